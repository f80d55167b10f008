"""Face-, image- and track-level classification metrics and annotation export."""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

REPORT_SCHEMA = {
    "type": "object",
    "required": ["face_auc", "face_acc", "image_auc", "image_acc", "n_faces", "n_images"],
    "properties": {
        "face_auc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "face_acc": {"type": "number", "minimum": 0, "maximum": 1},
        "image_auc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "image_acc": {"type": "number", "minimum": 0, "maximum": 1},
        "track_auc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "track_acc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "n_faces": {"type": "integer", "minimum": 0},
        "n_images": {"type": "integer", "minimum": 0},
        "n_tracks": {"type": "integer", "minimum": 0},
    },
}

OVERLAY_SCHEMA = {
    "type": "object",
    "required": ["image_id", "faces"],
    "properties": {
        "image_id": {"type": "string"},
        "gt_label": {"enum": [0, 1]},
        "score": {"type": ["number", "null"]},
        "faces": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["bbox", "gt_label", "score", "predicted"],
                "properties": {
                    "face_id": {"type": "string"},
                    "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                    "gt_label": {"enum": [0, 1]},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                    "predicted": {"type": "boolean"},
                },
            },
        },
    },
}


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney U statistic.

    Ties between a fake and a real score earn half credit. Requires both
    classes to be present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg_rank = ends - (counts - 1) / 2.0
    rank_sum = avg_rank[inverse][pos].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("accuracy of an empty set")
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    return float(np.mean((scores >= threshold).astype(int) == labels))


def track_score(tracks) -> dict:
    """Mean face score per trajectory. ``tracks`` maps track id -> scores."""
    out = OrderedDict()
    for tid, vals in tracks.items():
        vals = list(vals)
        if not vals:
            raise ValueError(f"track {tid!r} has no faces")
        out[tid] = float(np.mean(vals))
    return out


def _auc_or_none(scores, labels):
    labels = np.asarray(labels)
    if len(labels) == 0 or labels.min() == labels.max():
        return None
    return roc_auc(scores, labels)


def metrics_report(images, face_scores, image_scores, track_level: bool = False) -> dict:
    """Metrics for predictions aligned with ``images`` (a list of ImageRecord)."""
    fs = np.concatenate([np.asarray(s, dtype=float) for s in face_scores]) if images else np.zeros(0)
    fl = np.array([f.label for img in images for f in img.faces])
    il = np.array([img.label for img in images])
    report = {
        "face_auc": _auc_or_none(fs, fl),
        "face_acc": accuracy(fs, fl),
        "image_auc": _auc_or_none(image_scores, il),
        "image_acc": accuracy(image_scores, il),
        "n_faces": int(fl.size),
        "n_images": len(images),
    }
    if track_level:
        grouped, track_labels = OrderedDict(), {}
        for img, scores in zip(images, face_scores):
            for face, s in zip(img.faces, scores):
                if face.track_id is None:
                    continue
                grouped.setdefault(face.track_id, []).append(float(s))
                track_labels[face.track_id] = max(track_labels.get(face.track_id, 0), face.label)
        means = track_score(grouped)
        ts = np.array(list(means.values()))
        tl = np.array([track_labels[t] for t in means])
        report["track_auc"] = _auc_or_none(ts, tl)
        report["track_acc"] = accuracy(ts, tl) if ts.size else None
        report["n_tracks"] = len(means)
    return report


def overlay_record(image, face_scores=None, image_score=None, threshold: float = 0.5) -> dict:
    if face_scores is None:
        face_scores = [f.score for f in image.faces]
        if image_score is None:
            image_score = image.score
    if len(face_scores) != len(image.faces) or any(s is None for s in face_scores):
        raise ValueError(f"image {image.image_id}: missing face scores")
    return {
        "image_id": image.image_id,
        "gt_label": int(image.label),
        "score": None if image_score is None else float(image_score),
        "faces": [
            {
                "face_id": face.face_id,
                "bbox": [float(v) for v in face.bbox.as_list()],
                "gt_label": int(face.label),
                "score": float(s),
                "predicted": bool(s >= threshold),
            }
            for face, s in zip(image.faces, face_scores)
        ],
    }


def export_overlay(image, path, face_scores=None, image_score=None) -> dict:
    """Write per-face boxes, labels and scores as JSON for an external plotter."""
    rec = overlay_record(image, face_scores, image_score)
    Path(path).write_text(json.dumps(rec, indent=2) + "\n", encoding="utf-8")
    return rec
