"""Class prototypes, pull/push metric losses, BCE and the weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numeric import EPS_NORM, DiffOp, NumericError, cosine_rows, cosine_rows_grad

BCE_CLAMP = 1e-7


class DegeneratePrototype(NumericError):
    pass


@dataclass
class Prototypes:
    real: Optional[np.ndarray]
    fake: Optional[np.ndarray]
    N: int
    M: int


def _split(features, labels, mask):
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    return features[mask & (labels == 0)], features[mask & (labels == 1)]


def prototypes(features, labels, mask) -> Prototypes:
    """Mean real and mean fake feature over the live slots of a group."""
    reals, fakes = _split(np.asarray(features, dtype=np.float64), labels, mask)
    if len(reals) + len(fakes) == 0:
        raise NumericError("prototypes of a group with no live members")
    protos = []
    for part, name in ((reals, "real"), (fakes, "fake")):
        if len(part) == 0:
            protos.append(None)
            continue
        p = part.mean(axis=0)
        if np.linalg.norm(p) < EPS_NORM:
            raise DegeneratePrototype(f"{name} prototype has near-zero norm")
        protos.append(p)
    return Prototypes(protos[0], protos[1], len(reals), len(fakes))


def _distance(x, p):
    # 1 - cos, floored at 0: rounding can put cos a few ulps above 1, where
    # the true gradient is zero anyway
    return np.maximum(1.0 - cosine_rows(x, p), 0.0)


class PullLossOp(DiffOp):
    """Sum of (1 - cos) between every member and its own class prototype.

    A class with a single member is its own prototype and contributes
    exactly zero; it is skipped rather than evaluated as 1 - cos(f, f).
    """

    name = "pull_loss"

    def __init__(self, labels, mask):
        self.labels = np.asarray(labels)
        self.mask = np.asarray(mask, dtype=bool)

    def forward(self, features):
        protos = prototypes(features, self.labels, self.mask)
        total = 0.0
        for cls, p in ((0, protos.real), (1, protos.fake)):
            sel = self.mask & (self.labels == cls)
            if p is None or sel.sum() < 2:
                continue
            total += float(np.sum(_distance(features[sel], p)))
        return total, (features, protos)

    def backward(self, dloss, cache):
        features, protos = cache
        grad = np.zeros_like(features)
        for cls, p in ((0, protos.real), (1, protos.fake)):
            sel = self.mask & (self.labels == cls)
            if p is None or sel.sum() < 2:
                continue
            members = features[sel]
            dc = np.full(len(members), -float(dloss))
            dx, dp = cosine_rows_grad(members, p, dc)
            grad[sel] += dx + dp / len(members)
        return (grad,)


class PushLossOp(DiffOp):
    """exp(-sum(1 - cos(fake, F_R))) + exp(-sum(1 - cos(real, F_F))).

    Exponential of the summed distances, not a sum of exponentials. Each
    exponent is <= 0 so the terms stay in (0, 1]. Groups missing either
    class yield 0 (both terms need both prototypes).
    """

    name = "push_loss"

    def __init__(self, labels, mask):
        self.labels = np.asarray(labels)
        self.mask = np.asarray(mask, dtype=bool)

    def forward(self, features):
        protos = prototypes(features, self.labels, self.mask)
        if protos.real is None or protos.fake is None:
            return 0.0, (features, protos, None)
        reals = self.mask & (self.labels == 0)
        fakes = self.mask & (self.labels == 1)
        t_fake = math.exp(-float(np.sum(_distance(features[fakes], protos.real))))
        t_real = math.exp(-float(np.sum(_distance(features[reals], protos.fake))))
        return t_fake + t_real, (features, protos, (t_fake, t_real))

    def backward(self, dloss, cache):
        features, protos, terms = cache
        grad = np.zeros_like(features)
        if terms is None:
            return (grad,)
        t_fake, t_real = terms
        reals = self.mask & (self.labels == 0)
        fakes = self.mask & (self.labels == 1)
        # (movers, prototype, owners of that prototype, term value)
        for movers, proto, owners, t in ((fakes, protos.real, reals, t_fake),
                                         (reals, protos.fake, fakes, t_real)):
            x = features[movers]
            dx, dp = cosine_rows_grad(x, proto, np.full(len(x), float(dloss) * t))
            grad[movers] += dx
            grad[owners] += dp / owners.sum()
        return (grad,)


def pull_loss(features, labels, mask) -> float:
    return float(PullLossOp(labels, mask)(np.asarray(features, dtype=np.float64)))


def push_loss(features, labels, mask) -> float:
    return float(PushLossOp(labels, mask)(np.asarray(features, dtype=np.float64)))


def bce(yhat, y):
    """Binary cross-entropy with the prediction clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(yhat, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    out = -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)
    return float(out) if out.ndim == 0 else out


def bce_grad(yhat, y):
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (yhat > BCE_CLAMP) & (yhat < 1.0 - BCE_CLAMP)
    p = np.clip(yhat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return np.where(inside, -y / p + (1.0 - y) / (1.0 - p), 0.0)


class MeanBCEOp(DiffOp):
    name = "bce"

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.float64)

    def forward(self, yhat):
        return float(np.mean(bce(yhat, self.labels))), yhat

    def backward(self, dloss, yhat):
        return (float(dloss) * bce_grad(yhat, self.labels) / yhat.size,)


@dataclass(frozen=True)
class LossWeights:
    local: float = 1.0
    pull: float = 4.0
    push: float = 1.0
    global_: float = 1.0

    def __post_init__(self):
        for name in ("local", "pull", "push", "global_"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name}={v} must be finite and >= 0")


@dataclass
class LossBreakdown:
    L_global: float
    L_local: float
    L_pull: float
    L_push: float
    L_total: float
    weights: LossWeights = field(default_factory=LossWeights)

    def as_row(self) -> dict:
        return {"L_total": self.L_total, "L_global": self.L_global, "L_local": self.L_local,
                "L_pull": self.L_pull, "L_push": self.L_push}


def combine(L_global, L_local, L_pull, L_push, w: LossWeights) -> float:
    # Fixed left-to-right order; with global_ == 1.0 this is bitwise the
    # textbook L_global + l1*L_local + l2*L_pull + l3*L_push.
    return w.global_ * L_global + w.local * L_local + w.pull * L_pull + w.push * L_push


def total_loss(L_global, L_local, L_pull, L_push, weights: LossWeights = LossWeights()) -> LossBreakdown:
    parts = (L_global, L_local, L_pull, L_push)
    if not all(math.isfinite(float(v)) for v in parts):
        raise NumericError(f"non-finite loss component in {parts}")
    parts = tuple(float(v) for v in parts)
    return LossBreakdown(*parts, combine(*parts, weights), weights)


class TotalLossOp(DiffOp):
    """Weighted total as a function of the four components."""

    name = "total_loss"

    def __init__(self, weights: LossWeights = LossWeights()):
        self.weights = weights

    def forward(self, components):
        return combine(*components, self.weights), None

    def backward(self, dloss, _):
        w = self.weights
        return (float(dloss) * np.array([w.global_, w.local, w.pull, w.push]),)
