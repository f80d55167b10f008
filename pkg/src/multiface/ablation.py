"""Component-removal runs: train each configuration and compare held-out metrics."""

from __future__ import annotations

import csv
from pathlib import Path

from .config import TrainConfig
from .metrics import metrics_report
from .model import predict
from .trainer import split_dataset, train

ABLATION_ROWS = (
    ("Full", {}),
    ("No-SM", {"no_sm": True}),
    ("No-global", {"no_global": True}),
    ("No-pull", {"no_pull": True}),
    ("No-push", {"no_push": True}),
)
ABLATION_COLUMNS = ["row", "face_auc", "face_acc", "image_auc", "image_acc", "final_L_total"]


def run_ablation(dataset, base: TrainConfig, val=None, out_dir=None, rows=ABLATION_ROWS) -> list:
    """Train every row of ``rows`` on the same split; return one metrics dict per row.

    When ``val`` is None the split comes from ``base.val_fraction`` and
    ``base.seed``, so every row sees the same held-out images.
    """
    if val is None:
        dataset, val = split_dataset(dataset, base.val_fraction, base.seed)
        if val is None:
            raise ValueError("ablation needs held-out images: pass val or set val_fraction > 0")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for name, changes in rows:
        cfg = base.replace(**changes)
        ckpt = out_dir / f"{name}.ckpt" if out_dir is not None else None
        res = train(dataset, cfg, out_ckpt=ckpt, val=val)
        face_scores, image_scores = predict(res.params, val.images, cfg)
        rep = metrics_report(val.images, face_scores, image_scores)
        results.append({
            "row": name,
            "face_auc": rep["face_auc"],
            "face_acc": rep["face_acc"],
            "image_auc": rep["image_auc"],
            "image_acc": rep["image_acc"],
            "final_L_total": res.history[-1]["L_total"],
        })
    if out_dir is not None:
        write_comparison(results, out_dir / "ablation.csv")
    return results


def write_comparison(results, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in ABLATION_COLUMNS})


def read_comparison(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
