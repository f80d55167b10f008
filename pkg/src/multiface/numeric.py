"""Dense numerics shared by every learnable stage.

Forward passes that must be exactly permutation-equivariant use
:func:`rowwise_matmul` and :func:`ordered_sum`, whose results for one row do
not depend on where that row sits in the batch. BLAS GEMM does not give that
guarantee, so it is only used in backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_NORM = 1e-8


class NumericError(ValueError):
    """Raised on degenerate numeric input (zero norms, all-masked rows, NaNs)."""


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum without optimize never dispatches to BLAS; each output entry is
    # accumulated in the same k order regardless of its row index.
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def ordered_sum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along ``axis`` after sorting, so the result ignores input order."""
    return np.sort(x, axis=axis).sum(axis=axis)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < EPS_NORM or nv < EPS_NORM:
        raise NumericError(f"cosine of near-zero vector (norms {nu:.3g}, {nv:.3g})")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_sim_grad(u, v) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of cos(u, v) with respect to u and v."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < EPS_NORM or nv < EPS_NORM:
        raise NumericError(f"cosine of near-zero vector (norms {nu:.3g}, {nv:.3g})")
    c = u @ v / (nu * nv)
    du = v / (nu * nv) - c * u / nu**2
    dv = u / (nu * nv) - c * v / nv**2
    return du, dv


def cosine_rows(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """cos(x_i, p) for every row of ``x``; unclamped, for use inside losses."""
    nx = np.linalg.norm(x, axis=1)
    np_ = np.linalg.norm(p)
    if np.any(nx < EPS_NORM) or np_ < EPS_NORM:
        raise NumericError("cosine of near-zero vector")
    return (x @ p) / (nx * np_)


def cosine_rows_grad(x: np.ndarray, p: np.ndarray, dc: np.ndarray):
    """Backward of :func:`cosine_rows` given upstream ``dc`` (one per row)."""
    nx = np.linalg.norm(x, axis=1)
    np_ = np.linalg.norm(p)
    c = (x @ p) / (nx * np_)
    dx = dc[:, None] * (p[None, :] / (nx * np_)[:, None] - c[:, None] * x / (nx**2)[:, None])
    dp = (dc[:, None] * (x / (nx * np_)[:, None] - c[:, None] * p[None, :] / np_**2)).sum(axis=0)
    return dx, dp


def softmax_masked(logits, mask=None) -> np.ndarray:
    """Softmax over the last axis; masked-out entries get exactly zero.

    ``mask`` is boolean, True for live entries, broadcastable to ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not np.all(mask.any(axis=-1)):
        raise NumericError("softmax over a fully masked row")
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / ordered_sum(e, axis=-1)[..., None]


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    # Masked entries have probs == 0 and therefore receive zero gradient.
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


class DiffOp:
    """A differentiable operation with a hand-written backward rule.

    ``forward(*inputs)`` returns ``(output, cache)``; ``backward(grad_output,
    cache)`` returns one gradient per input, same shapes as the inputs.
    Non-differentiable context (masks, labels) is bound at construction.
    """

    name = "op"

    def forward(self, *inputs):
        raise NotImplementedError

    def backward(self, grad_output, cache):
        raise NotImplementedError

    def __call__(self, *inputs):
        return self.forward(*inputs)[0]


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    n_coords: int
    worst_input: int
    worst_index: tuple


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check_report(op: DiffOp, inputs, eps: float = 1e-5, rng=None) -> GradCheckReport:
    """Compare ``op.backward`` against central differences at ``inputs``.

    The output is contracted with a fixed random tensor ``r`` so a single
    scalar ``sum(r * op(x))`` exercises every output coordinate.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    out, cache = op.forward(*inputs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op.name}: non-finite forward output")
    r = rng.standard_normal(out.shape)
    analytic = op.backward(r if out.shape else float(r), cache)

    def scalar(xs):
        return float(np.sum(r * np.asarray(op.forward(*xs)[0])))

    worst = (0.0, 0, ())
    n_coords = 0
    for k, x in enumerate(inputs):
        ga = np.asarray(analytic[k], dtype=np.float64)
        if ga.shape != x.shape:
            raise NumericError(f"{op.name}: gradient {k} has shape {ga.shape}, input {x.shape}")
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + eps
            fp = scalar(inputs)
            x[idx] = orig - eps
            fm = scalar(inputs)
            x[idx] = orig
            num = (fp - fm) / (2 * eps)
            err = float(_rel_err(ga[idx], num))
            n_coords += 1
            if err > worst[0]:
                worst = (err, k, idx)
    return GradCheckReport(op.name, worst[0], n_coords, worst[1], worst[2])


def grad_check(op: DiffOp, inputs, eps: float = 1e-5, rng=None) -> float:
    """Maximum per-coordinate relative error of the analytic gradient."""
    return grad_check_report(op, inputs, eps=eps, rng=rng).max_rel_err
