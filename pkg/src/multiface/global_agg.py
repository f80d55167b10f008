"""Per-image feature aggregation and the two-layer image-level head."""

from __future__ import annotations

import numpy as np

from .numeric import DiffOp, ordered_sum, rowwise_matmul, sigmoid

POOLS = ("mean", "max")


def pool(x: np.ndarray, kind: str = "mean") -> np.ndarray:
    if len(x) == 0:
        raise ValueError("cannot pool an image with no faces")
    if kind == "mean":
        return ordered_sum(x, axis=0) / len(x)
    if kind == "max":
        return x.max(axis=0)
    raise ValueError(f"unknown pooling {kind!r}")


class AggregateOp(DiffOp):
    """Pool an image's face features, then apply the 1x1 conv (affine map)."""

    name = "aggregate"

    def __init__(self, kind: str = "mean"):
        if kind not in POOLS:
            raise ValueError(f"unknown pooling {kind!r}")
        self.kind = kind

    def forward(self, faces, Wc, bc):
        pooled = pool(faces, self.kind)
        z = rowwise_matmul(pooled[None, :], Wc)[0] + bc
        return z, (faces, pooled, Wc)

    def backward(self, dz, cache):
        faces, pooled, Wc = cache
        dpooled = Wc @ dz
        if self.kind == "mean":
            dfaces = np.broadcast_to(dpooled / len(faces), faces.shape).copy()
        else:
            dfaces = np.zeros_like(faces)
            arg = np.argmax(faces, axis=0)
            dfaces[arg, np.arange(faces.shape[1])] = dpooled
        return dfaces, np.outer(pooled, dz), dz.copy()


def aggregate(faces, Wc, bc, kind: str = "mean") -> np.ndarray:
    return AggregateOp(kind)(np.asarray(faces, dtype=np.float64), Wc, bc)


class GlobalHeadOp(DiffOp):
    """``sigmoid(W2 . relu(W1 z + b1) + b2)`` for one aggregated feature ``z``."""

    name = "global_head"

    def forward(self, z, W1, b1, W2, b2):
        pre = rowwise_matmul(z[None, :], W1)[0] + b1
        h = np.maximum(pre, 0.0)
        y = float(sigmoid(h @ W2[:, 0] + b2[0]))
        return y, (z, pre, h, W1, W2, y)

    def backward(self, dy, cache):
        z, pre, h, W1, W2, y = cache
        dlogit = float(dy) * y * (1.0 - y)
        dW2 = (h * dlogit)[:, None]
        dpre = W2[:, 0] * dlogit * (pre > 0)
        return W1 @ dpre, np.outer(z, dpre), dpre, dW2, np.array([dlogit])


def global_head(z, W1, b1, W2, b2) -> float:
    return GlobalHeadOp()(np.asarray(z, dtype=np.float64), W1, b1, W2, b2)
