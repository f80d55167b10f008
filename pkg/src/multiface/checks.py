"""Registry of every differentiable op with a random-input generator.

Used by ``multiface gradcheck`` and the test-suite: each entry builds an op
and a random, kink-free input point from an RNG.
"""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .dataset import BBox, FaceRecord, ImageRecord
from .encoder import ENCODER_PARAMS, EncoderOp, LocalHeadOp, init_encoder
from .global_agg import AggregateOp, GlobalHeadOp
from .losses import LossWeights, MeanBCEOp, PullLossOp, PushLossOp, TotalLossOp
from .model import ModelLossOp, init_params, xavier
from .numeric import DiffOp, cosine_sim, cosine_sim_grad, grad_check_report, softmax_backward, softmax_masked
from .simmat import ChannelExpandOp, FaceTokensOp, RawTokensOp, SimMatOp


class CosineOp(DiffOp):
    name = "cosine_sim"

    def forward(self, u, v):
        return cosine_sim(u, v), (u, v)

    def backward(self, dc, cache):
        du, dv = cosine_sim_grad(*cache)
        return du * dc, dv * dc


class SoftmaxOp(DiffOp):
    name = "softmax_masked"

    def __init__(self, mask):
        self.mask = mask

    def forward(self, logits):
        p = softmax_masked(logits, self.mask)
        return p, p

    def backward(self, dp, p):
        return (softmax_backward(p, dp),)


def _mask(rng, n, n_pad):
    m = np.ones(n, dtype=bool)
    m[rng.choice(n, size=n_pad, replace=False)] = False
    return m


def _labels_both(rng, mask):
    live = np.flatnonzero(mask)
    labels = np.zeros(len(mask), dtype=int)
    k = int(rng.integers(1, len(live)))
    labels[rng.choice(live, size=k, replace=False)] = 1
    return labels


def _case_cosine(rng):
    return CosineOp(), [rng.standard_normal(8), rng.standard_normal(8)]


def _case_softmax(rng):
    return SoftmaxOp(_mask(rng, 7, 2)), [rng.standard_normal(7) * 2]


def _case_simmat(rng):
    mask = _mask(rng, 6, 1)
    return SimMatOp(mask), [rng.standard_normal((6, 5))]


def _case_expand(rng):
    mask = _mask(rng, 6, 1)
    s = SimMatOp(mask)(rng.standard_normal((6, 5)))
    return ChannelExpandOp(mask), [s, rng.standard_normal(3), rng.standard_normal(3)]


def _case_tokens(order):
    def case(rng):
        mask = _mask(rng, 6, 1)
        s = SimMatOp(mask)(rng.standard_normal((6, 5)))
        maps = rng.uniform(0.5, 1.5, 3)[:, None, None] * s[None] + rng.standard_normal(3)[:, None, None] * np.outer(mask, mask)
        return FaceTokensOp(mask, order), [maps, rng.standard_normal((18, 4))]
    return case


def _case_raw_tokens(rng):
    return RawTokensOp(_mask(rng, 5, 1)), [rng.standard_normal((5, 6)), rng.standard_normal((6, 4))]


def _case_encoder(rng):
    n, d, heads, dff = 5, 8, 2, 12
    mask = _mask(rng, n, 1)
    p = init_encoder(rng, d, dff, xavier)
    for k in ("b1", "b2", "be1", "be2"):
        p[k] = rng.standard_normal(p[k].shape) * 0.1
    for k in ("g1", "g2"):
        p[k] = 1.0 + rng.standard_normal(p[k].shape) * 0.1
    tokens = rng.standard_normal((n, d)) * mask[:, None]
    return EncoderOp(mask, heads), [tokens] + [p[k] for k in ENCODER_PARAMS]


def _case_local_head(rng):
    return LocalHeadOp(), [rng.standard_normal((5, 6)) * 0.5, rng.standard_normal(6) * 0.5, rng.standard_normal(1)]


def _case_aggregate(kind):
    def case(rng):
        return AggregateOp(kind), [rng.standard_normal((4, 5)), rng.standard_normal((5, 5)), rng.standard_normal(5)]
    return case


def _case_global_head(rng):
    return GlobalHeadOp(), [rng.standard_normal(5), rng.standard_normal((5, 6)), rng.standard_normal(6),
                            rng.standard_normal((6, 1)), rng.standard_normal(1)]


def _case_pull(rng):
    mask = _mask(rng, 7, 1)
    return PullLossOp(_labels_both(rng, mask), mask), [rng.standard_normal((7, 5))]


def _case_push(rng):
    mask = _mask(rng, 7, 1)
    return PushLossOp(_labels_both(rng, mask), mask), [rng.standard_normal((7, 5))]


def _case_bce(rng):
    return MeanBCEOp(rng.integers(0, 2, 6)), [rng.uniform(0.05, 0.95, 6)]


def _case_total(rng):
    w = LossWeights(*rng.uniform(0, 5, 3))
    return TotalLossOp(w), [rng.uniform(0, 3, 4)]


def tiny_batch(rng, dim: int = 6, sizes=(2, 3, 2)):
    images = []
    for i, n in enumerate(sizes):
        labels = np.zeros(n, dtype=int)
        labels[rng.integers(0, n)] = int(rng.integers(0, 2))
        faces = [FaceRecord(f"i{i}f{j}", BBox(0, 0, 1, 1), rng.standard_normal(dim), int(labels[j]))
                 for j in range(n)]
        images.append(ImageRecord(f"i{i}", faces, int(labels.max())))
    return images


def tiny_config(**changes) -> TrainConfig:
    base = dict(group_size=5, channels=2, d_model=8, heads=2, d_ff=10, global_hidden=6, seed=0)
    base.update(changes)
    return TrainConfig(**base)


def _case_model(**changes):
    def case(rng):
        batch = tiny_batch(rng)
        cfg = tiny_config(seed=int(rng.integers(1 << 30)), **changes)
        params = init_params(cfg, 6)
        for k in params:
            if k.endswith((".b1", ".b2", ".bc", ".be1", ".be2", "local.b", "expand.b")):
                params[k] = params[k] + rng.standard_normal(params[k].shape) * 0.1
        names = list(params)
        return ModelLossOp(params, names, batch, cfg), [params[k] for k in names]
    return case


CASES = {
    "cosine_sim": _case_cosine,
    "softmax_masked": _case_softmax,
    "simmat": _case_simmat,
    "expand_channels": _case_expand,
    "face_tokens": _case_tokens("sorted"),
    "face_tokens_slot": _case_tokens("slot"),
    "raw_tokens": _case_raw_tokens,
    "encoder": _case_encoder,
    "local_head": _case_local_head,
    "aggregate_mean": _case_aggregate("mean"),
    "aggregate_max": _case_aggregate("max"),
    "global_head": _case_global_head,
    "pull_loss": _case_pull,
    "push_loss": _case_push,
    "bce": _case_bce,
    "total_loss": _case_total,
    "model": _case_model(),
    "model_backbone_inputs": _case_model(metric_input="backbone", global_input="backbone", pool="mean"),
    "model_no_sm": _case_model(no_sm=True),
}


# Whole-model cases carry many coordinates whose true gradient is ~1e-7 against
# a loss of order 1; at eps=1e-5 roundoff in the loss swamps those, so they use
# a larger step. They are also slow, hence fewer points.
CASE_SETTINGS = {name: (1e-5, 10) for name in CASES}
CASE_SETTINGS.update({name: (1e-4, 3) for name in CASES if name.startswith("model")})


def run_gradcheck(name: str, seed: int = 0, points=None, eps=None):
    """Worst relative error of op ``name`` over ``points`` random inputs."""
    if name not in CASES:
        raise KeyError(f"unknown op {name!r}; known: {', '.join(CASES)}")
    default_eps, default_points = CASE_SETTINGS[name]
    eps = default_eps if eps is None else eps
    points = default_points if points is None else points
    worst = None
    for i in range(points):
        rng = np.random.default_rng([seed, i])
        op, inputs = CASES[name](rng)
        rep = grad_check_report(op, inputs, eps=eps, rng=rng)
        if worst is None or rep.max_rel_err > worst.max_rel_err:
            worst = rep
    return worst
