"""Single-layer transformer encoder over face tokens and the per-face head.

Block layout (no positional encoding; faces in a group form a set)::

    h   = LN1(x + MHA(x))
    out = LN2(h + FFN(h))

Padding slots are excluded as attention keys and zeroed on output.
"""

from __future__ import annotations

import math

import numpy as np

from .numeric import (
    DiffOp,
    NumericError,
    ordered_sum,
    rowwise_matmul,
    sigmoid,
    softmax_backward,
    softmax_masked,
)

LN_EPS = 1e-5

ENCODER_PARAMS = ("Wq", "Wk", "Wv", "Wo", "W1", "b1", "W2", "b2", "g1", "be1", "g2", "be2")


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def init_encoder(rng, d_model: int, d_ff: int, xavier) -> dict:
    return {
        "Wq": xavier(rng, d_model, d_model),
        "Wk": xavier(rng, d_model, d_model),
        "Wv": xavier(rng, d_model, d_model),
        "Wo": xavier(rng, d_model, d_model),
        "W1": xavier(rng, d_model, d_ff),
        "b1": np.zeros(d_ff),
        "W2": xavier(rng, d_ff, d_model),
        "b2": np.zeros(d_model),
        "g1": np.ones(d_model),
        "be1": np.zeros(d_model),
        "g2": np.ones(d_model),
        "be2": np.zeros(d_model),
    }


class EncoderOp(DiffOp):
    """forward(tokens, *params in ENCODER_PARAMS order) -> local features."""

    name = "encoder"

    def __init__(self, mask, heads: int):
        self.mask = np.asarray(mask, dtype=bool)
        if not self.mask.any():
            raise NumericError("encoder called with every token masked")
        self.heads = heads

    def _split(self, x):
        n, d = x.shape
        return x.reshape(n, self.heads, d // self.heads).transpose(1, 0, 2)

    def forward(self, x, Wq, Wk, Wv, Wo, W1, b1, W2, b2, g1, be1, g2, be2):
        n, d = x.shape
        if d % self.heads:
            raise ValueError(f"d_model={d} not divisible by heads={self.heads}")
        m = self.mask
        dh = d // self.heads
        scale = 1.0 / math.sqrt(dh)
        q = self._split(rowwise_matmul(x, Wq))
        k = self._split(rowwise_matmul(x, Wk))
        v = self._split(rowwise_matmul(x, Wv))
        logits = np.einsum("hid,hjd->hij", q, k, optimize=False) * scale
        att = softmax_masked(logits, m[None, None, :])
        prods = att[..., None] * v[:, None, :, :]
        prods = np.where(m[None, None, :, None], prods, 0.0)
        o = ordered_sum(prods, axis=2)
        oc = o.transpose(1, 0, 2).reshape(n, d)
        r1 = x + rowwise_matmul(oc, Wo)
        h1, ln1 = layer_norm(r1, g1, be1)
        z1 = rowwise_matmul(h1, W1) + b1
        a1 = np.maximum(z1, 0.0)
        r2 = h1 + rowwise_matmul(a1, W2) + b2
        out, ln2 = layer_norm(r2, g2, be2)
        out = out * m[:, None]
        cache = (x, q, k, v, att, oc, h1, z1, a1, ln1, ln2, scale,
                 (Wq, Wk, Wv, Wo, W1, W2))
        return out, cache

    def backward(self, dout, cache):
        x, q, k, v, att, oc, h1, z1, a1, ln1, ln2, scale, weights = cache
        Wq, Wk, Wv, Wo, W1, W2 = weights
        n, d = x.shape
        dout = dout * self.mask[:, None]
        dr2, dg2, dbe2 = layer_norm_backward(dout, ln2)
        db2 = dr2.sum(axis=0)
        dW2 = a1.T @ dr2
        dz1 = (dr2 @ W2.T) * (z1 > 0)
        db1 = dz1.sum(axis=0)
        dW1 = h1.T @ dz1
        dh1 = dr2 + dz1 @ W1.T
        dr1, dg1, dbe1 = layer_norm_backward(dh1, ln1)
        dWo = oc.T @ dr1
        do = self._split(dr1 @ Wo.T)
        datt = np.einsum("hid,hjd->hij", do, v)
        dv = np.einsum("hij,hid->hjd", att, do)
        dlogits = softmax_backward(att, datt) * scale
        dq = dlogits @ k
        dk = np.einsum("hij,hid->hjd", dlogits, q)

        def merge(t):
            return t.transpose(1, 0, 2).reshape(n, d)

        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        dx = dr1 + dq @ Wq.T + dk @ Wk.T + dv @ Wv.T
        return (dx, x.T @ dq, x.T @ dk, x.T @ dv, dWo,
                dW1, db1, dW2, db2, dg1, dbe1, dg2, dbe2)


def encoder_forward(tokens, mask, params: dict, heads: int):
    return EncoderOp(mask, heads)(tokens, *(params[k] for k in ENCODER_PARAMS))


class LocalHeadOp(DiffOp):
    """Per-face fake probability: ``sigmoid(F @ w + b)``."""

    name = "local_head"

    def forward(self, feats, w, b):
        y = sigmoid(rowwise_matmul(feats, w[:, None])[:, 0] + b[0])
        return y, (feats, w, y)

    def backward(self, dy, cache):
        feats, w, y = cache
        dz = dy * y * (1.0 - y)
        return np.outer(dz, w), feats.T @ dz, np.array([dz.sum()])


def local_head(feature, w, b) -> float:
    return float(LocalHeadOp()(np.atleast_2d(feature), np.asarray(w, float), np.atleast_1d(b).astype(float))[0])
