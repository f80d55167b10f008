"""Similarity heatmaps of learned face features for a fixed probe group."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .model import local_features
from .simmat import build_groups, build_simmat, read_csv, write_csv, write_pgm


def probe_group(dataset, cfg: TrainConfig, index: int = 0):
    """The ``index``-th similarity group of ``dataset`` packed in file order."""
    groups = build_groups(dataset.images, cfg.group_size)
    if not 0 <= index < len(groups):
        raise IndexError(f"group index {index} out of range (dataset packs into {len(groups)} groups)")
    return groups[index]


def learned_similarity(params: dict, group, cfg: TrainConfig) -> np.ndarray:
    """Cosine self-similarity of the encoder outputs of ``group``."""
    return build_simmat(local_features(params, group, cfg), group.mask)


def class_contrast(s: np.ndarray, labels, mask) -> float:
    """Mean within-class minus mean cross-class similarity (off-diagonal, live only)."""
    s = np.asarray(s, dtype=float)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    live = np.outer(mask, mask)
    np.fill_diagonal(live, False)
    same = labels[:, None] == labels[None, :]
    within, cross = s[live & same], s[live & ~same]
    if within.size == 0 or cross.size == 0:
        raise ValueError("probe group needs both classes, with at least two faces in one of them")
    return float(within.mean() - cross.mean())


def export_heatmap(s: np.ndarray, prefix) -> tuple:
    prefix = Path(prefix)
    pgm, csv = prefix.with_name(prefix.name + ".pgm"), prefix.with_name(prefix.name + ".csv")
    write_pgm(s, pgm)
    write_csv(s, csv)
    return pgm, csv


def export_sequence(checkpoints, dataset, group_index: int, prefix) -> dict:
    """Write one heatmap per checkpoint plus the input similarity and a sidecar.

    ``checkpoints`` is a list of loaded Checkpoint objects. Files are named
    ``prefix.eNN.{pgm,csv}``, ``prefix.input.{pgm,csv}`` and ``prefix.json``.
    """
    if not checkpoints:
        raise ValueError("no checkpoints given")
    prefix = Path(prefix)
    cfg = checkpoints[0].config
    group = probe_group(dataset, cfg, group_index)
    export_heatmap(build_simmat(group.features, group.mask), f"{prefix}.input")
    epochs = []
    for ck in checkpoints:
        s = learned_similarity(ck.params, group, ck.config)
        _, csv = export_heatmap(s, f"{prefix}.e{ck.epoch:02d}")
        epochs.append({"epoch": ck.epoch, "csv": csv.name, "contrast": class_contrast(s, group.labels, group.mask)})
    sidecar = {
        "group_index": group_index,
        "group_size": group.group_size,
        "mask": group.mask.astype(int).tolist(),
        "labels": group.labels.tolist(),
        "members": [list(r) if r is not None else None for r in group.member_refs],
        "epochs": epochs,
    }
    Path(f"{prefix}.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return sidecar


def contrast_from_files(prefix, epoch: int) -> float:
    """Recompute the class contrast of an exported heatmap from its CSV and sidecar."""
    side = json.loads(Path(f"{prefix}.json").read_text(encoding="utf-8"))
    s = read_csv(f"{prefix}.e{epoch:02d}.csv")
    return class_contrast(s, side["labels"], np.array(side["mask"], dtype=bool))
