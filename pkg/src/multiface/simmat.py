"""Similarity groups, the self-similarity matrix and the tokens built from it."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .numeric import EPS_NORM, DiffOp, NumericError, rowwise_matmul


@dataclass
class SimilarityGroup:
    """A fixed-size slot array of faces drawn from whole images.

    ``image_slots`` maps each member image (by position in the source batch)
    to the slots its faces occupy; padding slots have ``mask == False``.
    """

    group_size: int
    member_refs: list
    mask: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    image_slots: list

    @property
    def N(self) -> int:
        return int(np.sum(self.mask & (self.labels == 0)))

    @property
    def M(self) -> int:
        return int(np.sum(self.mask & (self.labels == 1)))

    @property
    def n_live(self) -> int:
        return int(self.mask.sum())


def build_groups(batch, group_size: int, seed: Optional[int] = None) -> list:
    """Pack whole images, in batch order, into groups of ``group_size`` slots.

    An image that does not fit in the current group opens a new one, so no
    image is ever split. With ``seed`` set, slots inside each group are
    shuffled; without it faces sit in image order.
    """
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    for img in batch:
        if len(img.faces) > group_size:
            raise ValueError(
                f"image {img.image_id} has {len(img.faces)} faces, more than group_size={group_size}"
            )
    bins, current, used = [], [], 0
    for pos, img in enumerate(batch):
        if used + len(img.faces) > group_size:
            bins.append(current)
            current, used = [], 0
        current.append(pos)
        used += len(img.faces)
    if current:
        bins.append(current)

    rng = np.random.default_rng(seed) if seed is not None else None
    dim = batch[0].faces[0].feature.shape[0] if batch else 0
    groups = []
    for members in bins:
        order = [(pos, j) for pos in members for j in range(len(batch[pos].faces))]
        slots = np.arange(group_size)
        if rng is not None:
            slots = rng.permutation(group_size)
        feats = np.zeros((group_size, dim))
        labels = np.zeros(group_size, dtype=int)
        mask = np.zeros(group_size, dtype=bool)
        refs = [None] * group_size
        per_image = {pos: [] for pos in members}
        for k, (pos, j) in enumerate(order):
            s = int(slots[k])
            face = batch[pos].faces[j]
            feats[s] = face.feature
            labels[s] = face.label
            mask[s] = True
            refs[s] = (batch[pos].image_id, j)
            per_image[pos].append(s)
        image_slots = [(pos, np.array(per_image[pos], dtype=int)) for pos in members]
        groups.append(SimilarityGroup(group_size, refs, mask, feats, labels, image_slots))
    return groups


def build_simmat(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return SimMatOp(mask)(features)


class SimMatOp(DiffOp):
    """Pairwise cosine similarity among live slots; zero rows/cols for padding."""

    name = "simmat"

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    def forward(self, features):
        m = self.mask
        norms = np.linalg.norm(features, axis=1)
        if np.any(norms[m] < EPS_NORM):
            raise NumericError("zero-norm feature in similarity group")
        safe = np.where(m, norms, 1.0)
        u = np.where(m[:, None], features / safe[:, None], 0.0)
        s = np.einsum("id,jd->ij", u, u, optimize=False)
        s = np.clip(s, -1.0, 1.0)
        live = np.outer(m, m)
        s = np.where(live, s, 0.0)
        s[np.arange(len(m))[m], np.arange(len(m))[m]] = 1.0
        return s, (u, safe)

    def backward(self, ds, cache):
        u, norms = cache
        m = self.mask
        g = np.where(np.outer(m, m), ds, 0.0)
        np.fill_diagonal(g, 0.0)
        du = (g + g.T) @ u
        radial = np.sum(du * u, axis=1, keepdims=True)
        df = (du - radial * u) / norms[:, None]
        return (np.where(m[:, None], df, 0.0),)


def expand_channels(s, w, b, mask):
    return ChannelExpandOp(mask)(s, w, b)


class ChannelExpandOp(DiffOp):
    """1x1 convolution from one similarity map to C maps: ``w_c * S + b_c``.

    The bias only lands on live-live entries, so padding stays zero.
    """

    name = "expand_channels"

    def __init__(self, mask):
        m = np.asarray(mask, dtype=bool)
        self.live = np.outer(m, m).astype(np.float64)

    def forward(self, s, w, b):
        maps = w[:, None, None] * s[None] + b[:, None, None] * self.live[None]
        return maps, (s, w)

    def backward(self, dmaps, cache):
        s, w = cache
        ds = np.tensordot(w, dmaps, axes=(0, 0))
        dw = np.einsum("cij,ij->c", dmaps, s)
        db = np.einsum("cij,ij->c", dmaps, self.live)
        return ds, dw, db


class FaceTokensOp(DiffOp):
    """Turn each face's similarity rows (all channels) into one token.

    ``order="sorted"`` sorts each row in descending order before the
    projection, which makes a face's token depend on the *set* of its
    similarities rather than on which slots its neighbours landed in.
    ``order="slot"`` concatenates rows as stored.
    """

    name = "face_tokens"

    def __init__(self, mask, order: str = "sorted"):
        if order not in ("sorted", "slot"):
            raise ValueError(f"unknown token order {order!r}")
        self.mask = np.asarray(mask, dtype=bool)
        self.order = order

    def forward(self, maps, proj):
        C, n, _ = maps.shape
        if proj.shape[0] != C * n:
            raise ValueError(f"projection expects {proj.shape[0]} inputs, maps give {C * n}")
        rows = maps.transpose(1, 0, 2)
        idx = None
        if self.order == "sorted":
            idx = np.argsort(-rows, axis=2, kind="stable")
            rows = np.take_along_axis(rows, idx, axis=2)
        x = rows.reshape(n, C * n)
        tokens = rowwise_matmul(x, proj) * self.mask[:, None]
        return tokens, (x, proj, idx, maps.shape)

    def backward(self, dtokens, cache):
        x, proj, idx, shape = cache
        C, n, _ = shape
        dt = dtokens * self.mask[:, None]
        dproj = x.T @ dt
        drows = (dt @ proj.T).reshape(n, C, n)
        if idx is not None:
            unsorted = np.zeros_like(drows)
            np.put_along_axis(unsorted, idx, drows, axis=2)
            drows = unsorted
        return drows.transpose(1, 0, 2), dproj


class RawTokensOp(DiffOp):
    """Token path with the similarity matrix removed: project raw features."""

    name = "raw_tokens"

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)

    def forward(self, features, proj):
        return rowwise_matmul(features, proj) * self.mask[:, None], (features, proj)

    def backward(self, dtokens, cache):
        features, proj = cache
        dt = dtokens * self.mask[:, None]
        return dt @ proj.T, features.T @ dt


def face_tokens(maps, proj, mask, order: str = "sorted"):
    return FaceTokensOp(mask, order)(maps, proj)


# -- heatmap export --------------------------------------------------------------

def to_gray(s: np.ndarray) -> np.ndarray:
    """Map similarities in [-1, 1] linearly onto 0..255."""
    return np.clip(np.rint((np.asarray(s) + 1.0) * 127.5), 0, 255).astype(int)


def write_pgm(s: np.ndarray, path) -> None:
    gray = to_gray(s)
    h, w = gray.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in gray]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]], dtype=int)
    if data.size != w * h or maxval != 255:
        raise ValueError(f"{path}: malformed PGM body")
    return data.reshape(h, w)


def write_csv(s: np.ndarray, path) -> None:
    rows = [",".join(repr(float(v)) for v in row) for row in np.asarray(s)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_csv(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    return np.array([[float(v) for v in line.split(",")] for line in text])
