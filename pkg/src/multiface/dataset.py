"""On-disk dataset format, record types and label bookkeeping.

A dataset file is UTF-8 JSONL. The first line is a header::

    {"format": "filter-ds", "version": 1, "feature_dim": D}

and every following line holds one image with its detected faces.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FORMAT_NAME = "filter-ds"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError(f"non-finite bbox {vals}")
        if self.w <= 0 or self.h <= 0:
            raise DatasetError(f"bbox needs positive width and height, got {vals}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]


@dataclass
class FaceRecord:
    face_id: str
    bbox: BBox
    feature: np.ndarray
    label: int
    score: Optional[float] = None
    track_id: Optional[str] = None

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.feature.ndim != 1:
            raise DatasetError(f"face {self.face_id}: feature must be a vector")
        if not np.all(np.isfinite(self.feature)) or np.linalg.norm(self.feature) <= 0:
            raise DatasetError(f"face {self.face_id}: feature must be finite with nonzero norm")
        if self.label not in (0, 1):
            raise DatasetError(f"face {self.face_id}: label must be 0 or 1, got {self.label!r}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise DatasetError(f"face {self.face_id}: score {self.score} outside [0, 1]")


@dataclass
class ImageRecord:
    image_id: str
    faces: list
    label: int
    score: Optional[float] = None

    def __post_init__(self):
        if not self.faces:
            raise DatasetError(f"image {self.image_id}: no faces")
        expected = image_label([f.label for f in self.faces])
        if self.label != expected:
            raise DatasetError(
                f"image {self.image_id}: image label violates max rule "
                f"(label {self.label}, max face label {expected})"
            )

    @property
    def features(self) -> np.ndarray:
        return np.stack([f.feature for f in self.faces])


@dataclass
class Dataset:
    feature_dim: int
    images: list = field(default_factory=list)
    split_tag: str = ""

    def __post_init__(self):
        seen = set()
        for img in self.images:
            if img.image_id in seen:
                raise DatasetError(f"duplicate image_id {img.image_id!r}")
            seen.add(img.image_id)
            for f in img.faces:
                if f.feature.shape != (self.feature_dim,):
                    raise DatasetError(
                        f"dimension mismatch: face {f.face_id} has {f.feature.shape[0]} "
                        f"features, dataset declares {self.feature_dim}"
                    )

    @property
    def n_faces(self) -> int:
        return sum(len(img.faces) for img in self.images)

    def subset(self, indices: Sequence[int], split_tag: str = "") -> "Dataset":
        return Dataset(self.feature_dim, [self.images[i] for i in indices], split_tag or self.split_tag)


def image_label(face_labels) -> int:
    """An image is fake as soon as any of its faces is fake."""
    face_labels = list(face_labels)
    if not face_labels:
        raise DatasetError("image_label of an empty face list")
    return int(max(face_labels))


def iou(a: BBox, b: BBox) -> float:
    # (x + w) - x need not round back to w; cap the overlap at either extent
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = min(iw, a.w, b.w) * min(ih, a.h, b.h)
    return min(1.0, inter / (a.area + b.area - inter))


@dataclass(frozen=True)
class Assignment:
    label: Optional[int]
    matched_gt_index: Optional[int]
    iou: float

    @property
    def matched(self) -> bool:
        return self.matched_gt_index is not None


def assign_labels(detected, gt, threshold: float = 0.5) -> list:
    """Give each detected box the label of its highest-IoU ground-truth box.

    Detections whose best IoU is below ``threshold`` come back unmatched
    (label and index ``None``). Equal IoUs resolve to the lowest gt index.
    """
    if not gt:
        raise DatasetError("assign_labels needs at least one ground-truth box")
    out = []
    for box in detected:
        best_i, best = 0, -1.0
        for i, (gbox, _) in enumerate(gt):
            v = iou(box, gbox)
            if v > best:
                best_i, best = i, v
        if best >= threshold:
            out.append(Assignment(int(gt[best_i][1]), best_i, best))
        else:
            out.append(Assignment(None, None, best))
    return out


# -- JSONL I/O ---------------------------------------------------------------

def _face_to_json(f: FaceRecord) -> dict:
    # float() on numpy scalars keeps json's repr-based shortest round-trip form.
    return {
        "face_id": f.face_id,
        "bbox": [float(v) for v in f.bbox.as_list()],
        "label": int(f.label),
        "feature": [float(v) for v in f.feature],
        "track_id": f.track_id,
    }


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "feature_dim": ds.feature_dim}
        if ds.split_tag:
            header["split_tag"] = ds.split_tag
        fh.write(json.dumps(header) + "\n")
        for img in ds.images:
            row = {
                "image_id": img.image_id,
                "label": int(img.label),
                "faces": [_face_to_json(f) for f in img.faces],
            }
            fh.write(json.dumps(row) + "\n")


def _require(obj, key, lineno):
    if key not in obj:
        raise DatasetError(f"line {lineno}: missing key {key!r}")
    return obj[key]


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    images = []
    header = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: parse error: {e.msg}") from e
            if not isinstance(obj, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            if header is None:
                if obj.get("format") != FORMAT_NAME or obj.get("version") != FORMAT_VERSION:
                    raise DatasetError(f"line {lineno}: not a {FORMAT_NAME} v{FORMAT_VERSION} header")
                dim = obj.get("feature_dim")
                if not isinstance(dim, int) or dim < 1:
                    raise DatasetError(f"line {lineno}: feature_dim must be a positive integer")
                header = obj
                continue
            try:
                faces = []
                for fobj in _require(obj, "faces", lineno):
                    bbox = _require(fobj, "bbox", lineno)
                    if len(bbox) != 4:
                        raise DatasetError(f"line {lineno}: bbox needs 4 numbers")
                    faces.append(FaceRecord(
                        face_id=str(_require(fobj, "face_id", lineno)),
                        bbox=BBox(*(float(v) for v in bbox)),
                        feature=np.array(_require(fobj, "feature", lineno), dtype=np.float64),
                        label=_require(fobj, "label", lineno),
                        track_id=fobj.get("track_id"),
                    ))
                    if faces[-1].feature.shape != (header["feature_dim"],):
                        raise DatasetError(
                            f"dimension mismatch: face {faces[-1].face_id} has "
                            f"{faces[-1].feature.shape[0]} features, header declares {header['feature_dim']}"
                        )
                images.append(ImageRecord(
                    image_id=str(_require(obj, "image_id", lineno)),
                    faces=faces,
                    label=_require(obj, "label", lineno),
                ))
            except DatasetError as e:
                msg = str(e)
                raise DatasetError(msg if msg.startswith("line ") else f"line {lineno}: {msg}") from None
            except (TypeError, ValueError) as e:
                raise DatasetError(f"line {lineno}: {e}") from None
    if header is None:
        raise DatasetError(f"{path}: empty file")
    return Dataset(header["feature_dim"], images, header.get("split_tag", ""))


# -- synthetic relational task -------------------------------------------------

@dataclass
class SyntheticConfig:
    num_images: int = 500
    faces_per_image: tuple = (2, 5)
    fake_fraction: float = 0.3
    feature_dim: int = 32
    sigma: float = 0.1
    theta: float = math.pi / 2

    def validate(self):
        lo, hi = self.faces_per_image
        if self.num_images < 1:
            raise DatasetError("num_images must be >= 1")
        if not 2 <= lo <= hi:
            raise DatasetError("faces_per_image must satisfy 2 <= lo <= hi")
        if not 0.0 < self.fake_fraction < 1.0:
            raise DatasetError("fake_fraction must lie in (0, 1)")
        if self.feature_dim < 2:
            raise DatasetError("feature_dim must be >= 2")
        if self.sigma < 0:
            raise DatasetError("sigma must be >= 0")
        if not 0.0 < self.theta <= math.pi:
            raise DatasetError("theta must lie in (0, pi]")


def max_fakes(n_faces: int, lo: int) -> int:
    """Cap on forged faces per image.

    Keeps fakes a strict minority of every image and every fake cluster
    strictly smaller than any real cluster in the dataset; otherwise the
    two direction clusters of an image are exchangeable and the class is
    not identifiable from similarity structure.
    """
    return min(lo // 2, (n_faces - 1) // 2)


def _unit(v):
    return v / np.linalg.norm(v)


def gen_synthetic(config: SyntheticConfig, seed: int) -> Dataset:
    """Multi-face images whose face class is only visible relationally.

    Each image draws its own real direction ``d`` and a forged direction
    ``g`` at angle ``theta`` from ``d``; faces are noisy unit copies of their
    class direction. Since ``d`` and ``g`` are redrawn per image, a single
    face feature is uniformly distributed on the sphere whatever its label.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    lo, hi = config.faces_per_image
    D = config.feature_dim
    images = []
    for i in range(config.num_images):
        n = int(rng.integers(lo, hi + 1))
        d = _unit(rng.standard_normal(D))
        r = rng.standard_normal(D)
        r = _unit(r - (r @ d) * d)
        g = math.cos(config.theta) * d + math.sin(config.theta) * r
        k = min(int(rng.binomial(n, config.fake_fraction)), max_fakes(n, lo))
        labels = np.zeros(n, dtype=int)
        labels[rng.permutation(n)[:k]] = 1
        faces = []
        for j, lab in enumerate(labels):
            base = g if lab else d
            feat = _unit(base + config.sigma * rng.standard_normal(D))
            faces.append(FaceRecord(
                face_id=f"img{i:05d}_f{j}",
                bbox=BBox(float(40 * j), 0.0, 32.0, 32.0),
                feature=feat,
                label=int(lab),
            ))
        images.append(ImageRecord(f"img{i:05d}", faces, image_label(labels)))
    return Dataset(D, images, f"synthetic seed={seed}")
