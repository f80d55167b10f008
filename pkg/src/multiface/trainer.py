"""Adam, the epoch loop, ablation wiring and the checkpoint file format.

Checkpoint layout (little-endian)::

    b"FILT" | u32 version | u64 manifest length | manifest JSON | float32 payloads

The manifest lists tensors (name, shape, dtype) in payload order together
with the training config, feature dimension, epoch and Adam step count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import TrainConfig
from .dataset import Dataset
from .metrics import accuracy, roc_auc
from .model import expected_shapes, forward_backward, init_params, predict
from .numeric import NumericError

log = logging.getLogger(__name__)

MAGIC = b"FILT"
CKPT_VERSION = 1
LOG_COLUMNS = ["epoch", "L_total", "L_global", "L_local", "L_pull", "L_push", "val_face_auc", "val_image_acc"]


class CheckpointError(ValueError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    state: AdamState
    config: TrainConfig
    feature_dim: int
    epoch: int


def _manifest_tensors(params, state):
    tensors = [("param/" + k, v) for k, v in params.items()]
    for k in params:
        if k in state.m:
            tensors.append(("adam.m/" + k, state.m[k]))
            tensors.append(("adam.v/" + k, state.v[k]))
    return tensors


def save_checkpoint(params: dict, state: AdamState, config: TrainConfig, path,
                    feature_dim: int, epoch: int = 0) -> None:
    tensors = _manifest_tensors(params, state)
    manifest = {
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": "float32"} for n, a in tensors],
        "config": config.to_dict(),
        "feature_dim": int(feature_dim),
        "epoch": int(epoch),
        "adam": {"t": state.t, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``config`` given, tensor shapes must match it."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(raw) < 16 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    offset = 16 + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "float32":
            raise CheckpointError(f"{path}: tensor {entry['name']} has unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    stored = TrainConfig.from_dict(manifest["config"])
    feature_dim = manifest["feature_dim"]
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    want = expected_shapes(config if config is not None else stored, feature_dim)
    for name, shape in want.items():
        if name not in params:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if params[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {params[name].shape}, config expects {shape}"
            )
    extra = set(params) - set(want)
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")
    a = manifest["adam"]
    state = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
    for k in params:
        if "adam.m/" + k in tensors:
            state.m[k] = tensors["adam.m/" + k]
            state.v[k] = tensors["adam.v/" + k]
    return Checkpoint(params, state, config or stored, feature_dim, manifest["epoch"])


def epoch_checkpoint_path(out, epoch: int) -> Path:
    out = Path(out)
    return out.with_name(f"{out.stem}.e{epoch:02d}{out.suffix}")


# -- training loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    state: AdamState
    history: list
    checkpoints: list
    val: Optional[Dataset]


def split_dataset(ds: Dataset, val_fraction: float, seed: int):
    """Seeded image-level train/validation split."""
    if val_fraction <= 0:
        return ds, None
    order = np.random.default_rng([seed, 2]).permutation(len(ds.images))
    n_val = max(1, int(round(val_fraction * len(ds.images))))
    return ds.subset(sorted(order[n_val:]), "train"), ds.subset(sorted(order[:n_val]), "val")


def _val_metrics(params, val: Optional[Dataset], cfg: TrainConfig):
    if val is None or not val.images:
        return float("nan"), float("nan")
    face_scores, image_scores = predict(params, val.images, cfg)
    fs = np.concatenate(face_scores)
    fl = np.array([f.label for img in val.images for f in img.faces])
    il = np.array([img.label for img in val.images])
    auc = roc_auc(fs, fl) if 0 < fl.sum() < fl.size else float("nan")
    return auc, accuracy(image_scores, il)


def write_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


def train(dataset: Dataset, config: TrainConfig, out_ckpt=None, log_path=None,
          val: Optional[Dataset] = None, on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train the detection head. Deterministic for a given seed and config.

    Without an explicit ``val`` set, ``config.val_fraction`` of the images is
    held out. One checkpoint per epoch is written next to ``out_ckpt``
    (``name.eNN.ext``) and ``out_ckpt`` itself holds the final state.
    """
    if val is None:
        train_ds, val = split_dataset(dataset, config.val_fraction, config.seed)
    else:
        train_ds = dataset
    if not train_ds.images:
        raise ValueError("no training images")
    params = init_params(config, dataset.feature_dim)
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    rng = np.random.default_rng([config.seed, 1])
    history, written = [], []
    images = train_ds.images
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        sums = dict.fromkeys(LOG_COLUMNS[1:6], 0.0)
        n_batches = 0
        for b, start in enumerate(range(0, len(images), config.batch_images)):
            batch = [images[i] for i in order[start:start + config.batch_images]]
            try:
                res = forward_backward(params, batch, config)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {b}: {e}") from None
            if not math.isfinite(res.breakdown.L_total):
                raise NumericError(f"epoch {epoch}, batch {b}: loss is NaN")
            for note in res.notes:
                log.debug("epoch %d batch %d: %s", epoch, b, note)
            norm = clip_gradients(res.grads, config.clip_norm)
            if norm > config.clip_norm:
                log.info("epoch %d batch %d: gradient norm %.3f clipped to %.1f",
                         epoch, b, norm, config.clip_norm)
            adam_step(params, res.grads, state)
            for k, v in res.breakdown.as_row().items():
                sums[k] += v
            n_batches += 1
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        row["val_face_auc"], row["val_image_acc"] = _val_metrics(params, val, config)
        history.append(row)
        log.info("epoch %d: L_total=%.4f val_face_auc=%.4f val_image_acc=%.4f",
                 epoch, row["L_total"], row["val_face_auc"], row["val_image_acc"])
        if out_ckpt is not None:
            path = epoch_checkpoint_path(out_ckpt, epoch)
            save_checkpoint(params, state, config, path, dataset.feature_dim, epoch)
            written.append(path)
        if log_path is not None:
            write_log(history, log_path)
        if on_epoch is not None:
            on_epoch(epoch, params, row)
    if out_ckpt is not None:
        save_checkpoint(params, state, config, out_ckpt, dataset.feature_dim, config.epochs)
    return TrainResult(params, state, history, written, val)
