"""The full detection head as a fixed pipeline of differentiable stages.

Per similarity group::

    S = cos(f_i, f_j)  ->  maps = w_c S + b_c  ->  tokens  ->  encoder  ->  F_i
    F_i -> local head -> face score
    pool(F_i of one image) -> conv -> two-layer head -> image score

Gradients are composed by hand in :func:`forward_backward`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .encoder import ENCODER_PARAMS, EncoderOp, LocalHeadOp, init_encoder
from .global_agg import AggregateOp, GlobalHeadOp
from .losses import (
    DegeneratePrototype,
    LossBreakdown,
    PullLossOp,
    PushLossOp,
    bce,
    bce_grad,
    combine,
)
from .numeric import DiffOp, NumericError
from .simmat import ChannelExpandOp, FaceTokensOp, RawTokensOp, SimMatOp, build_groups

log = logging.getLogger(__name__)

GLOBAL_PARAMS = ("global.Wc", "global.bc", "global.W1", "global.b1", "global.W2", "global.b2")


def xavier(rng, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(cfg: TrainConfig, feature_dim: int) -> dict:
    """Fresh parameters; every name is created in a fixed order from one RNG."""
    rng = np.random.default_rng(cfg.seed)
    p = {}
    if cfg.no_sm:
        p["tokens.proj"] = xavier(rng, feature_dim, cfg.d_model)
    else:
        p["expand.w"] = np.ones(cfg.channels)
        p["expand.b"] = np.zeros(cfg.channels)
        p["tokens.proj"] = xavier(rng, cfg.channels * cfg.group_size, cfg.d_model)
    for k, v in init_encoder(rng, cfg.d_model, cfg.d_ff, xavier).items():
        p["enc." + k] = v
    p["local.w"] = xavier(rng, cfg.d_model, 1)[:, 0]
    p["local.b"] = np.zeros(1)
    g = feature_dim if cfg.global_input == "backbone" else cfg.d_model
    p["global.Wc"] = xavier(rng, g, g)
    p["global.bc"] = np.zeros(g)
    p["global.W1"] = xavier(rng, g, cfg.global_hidden)
    p["global.b1"] = np.zeros(cfg.global_hidden)
    p["global.W2"] = xavier(rng, cfg.global_hidden, 1)
    p["global.b2"] = np.zeros(1)
    return p


def expected_shapes(cfg: TrainConfig, feature_dim: int) -> dict:
    return {k: v.shape for k, v in init_params(cfg, feature_dim).items()}


@dataclass
class GroupTrace:
    group: object
    mask: np.ndarray
    stages: dict
    features: np.ndarray
    scores: np.ndarray
    pull: float | None = None
    push: float | None = None
    image_traces: list = field(default_factory=list)


@dataclass
class BatchResult:
    breakdown: LossBreakdown
    face_scores: list
    image_scores: np.ndarray
    grads: dict | None
    groups: list
    notes: list


def _forward_group(params, group, cfg: TrainConfig):
    mask = group.mask
    stages = {}
    if cfg.no_sm:
        op = RawTokensOp(mask)
        tokens, c = op.forward(group.features, params["tokens.proj"])
        stages["raw"] = (op, c)
    else:
        s = SimMatOp(mask)(group.features)
        op = ChannelExpandOp(mask)
        maps, c = op.forward(s, params["expand.w"], params["expand.b"])
        stages["expand"] = (op, c)
        op = FaceTokensOp(mask, cfg.token_order)
        tokens, c = op.forward(maps, params["tokens.proj"])
        stages["tokens"] = (op, c)
    enc = EncoderOp(mask, cfg.heads)
    feats, c = enc.forward(tokens, *(params["enc." + k] for k in ENCODER_PARAMS))
    stages["encoder"] = (enc, c)
    head = LocalHeadOp()
    scores, c = head.forward(feats, params["local.w"], params["local.b"])
    stages["local"] = (head, c)
    return GroupTrace(group, mask, stages, feats, scores)


def forward_backward(params: dict, batch, cfg: TrainConfig, need_grad: bool = True) -> BatchResult:
    """Loss, predictions and (optionally) parameter gradients for one batch."""
    weights = cfg.weights
    groups = build_groups(batch, cfg.group_size)
    notes = []
    traces = []
    face_scores = [None] * len(batch)
    image_scores = np.zeros(len(batch))
    image_labels = np.array([img.label for img in batch], dtype=float)

    for gi, group in enumerate(groups):
        tr = _forward_group(params, group, cfg)
        metric_in = tr.features if cfg.metric_input == "encoder" else group.features
        for kind, Op in (("pull", PullLossOp), ("push", PushLossOp)):
            op = Op(group.labels, group.mask)
            try:
                val, c = op.forward(metric_in)
            except DegeneratePrototype as e:
                notes.append(f"group {gi}: {kind} skipped ({e})")
                continue
            if kind == "push" and c[2] is None:
                notes.append(f"group {gi}: push skipped (single class)")
                continue
            setattr(tr, kind, val)
            tr.stages[kind] = (op, c)
        for pos, slots in group.image_slots:
            x = tr.features[slots] if cfg.global_input == "encoder" else group.features[slots]
            agg = AggregateOp(cfg.pool)
            z, ca = agg.forward(x, params["global.Wc"], params["global.bc"])
            head = GlobalHeadOp()
            y, ch = head.forward(z, params["global.W1"], params["global.b1"],
                                 params["global.W2"], params["global.b2"])
            image_scores[pos] = y
            face_scores[pos] = tr.scores[slots]
            tr.image_traces.append((pos, slots, (agg, ca), (head, ch)))
        traces.append(tr)

    live_scores = np.concatenate([t.scores[t.mask] for t in traces])
    live_labels = np.concatenate([t.group.labels[t.mask] for t in traces]).astype(float)
    L_local = float(np.mean(bce(live_scores, live_labels)))
    L_global = float(np.mean(bce(image_scores, image_labels)))
    pulls = [t.pull for t in traces if t.pull is not None]
    pushes = [t.push for t in traces if t.push is not None]
    L_pull = float(np.mean(pulls)) if pulls else 0.0
    L_push = float(np.mean(pushes)) if pushes else 0.0
    for v, name in ((L_local, "L_local"), (L_global, "L_global"), (L_pull, "L_pull"), (L_push, "L_push")):
        if not math.isfinite(v):
            bad = [i for i, t in enumerate(traces) if not np.all(np.isfinite(t.features))]
            raise NumericError(f"{name} is not finite (offending groups: {bad or 'unknown'})")
    total = combine(L_global, L_local, L_pull, L_push, weights)
    breakdown = LossBreakdown(L_global, L_local, L_pull, L_push, total, weights)

    grads = None
    if need_grad:
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        n_faces = len(live_scores)
        for tr in traces:
            _backward_group(tr, params, grads, cfg, weights, batch, image_scores, image_labels,
                            n_faces, len(pulls), len(pushes))
    return BatchResult(breakdown, face_scores, image_scores, grads, groups, notes)


def _backward_group(tr, params, grads, cfg, weights, batch, image_scores, image_labels,
                    n_faces, n_pull, n_push):
    group = tr.group
    dfeats = np.zeros_like(tr.features)

    # local head
    dscores = np.where(tr.mask, bce_grad(tr.scores, group.labels.astype(float)), 0.0)
    dscores *= weights.local / n_faces
    head, c = tr.stages["local"]
    dF, dw, db = head.backward(dscores, c)
    dfeats += dF
    grads["local.w"] += dw
    grads["local.b"] += db

    # metric losses
    for kind, w, count in (("pull", weights.pull, n_pull), ("push", weights.push, n_push)):
        if kind not in tr.stages or w == 0.0:
            continue
        op, c = tr.stages[kind]
        (dm,) = op.backward(w / count, c)
        if cfg.metric_input == "encoder":
            dfeats += dm
        # backbone features are inputs, so their gradient goes nowhere

    # global branch
    if weights.global_ != 0.0:
        n_img = len(batch)
        for pos, slots, (agg, ca), (ghead, ch) in tr.image_traces:
            dy = weights.global_ * float(bce_grad(image_scores[pos], image_labels[pos])) / n_img
            dz, dW1, db1, dW2, db2 = ghead.backward(dy, ch)
            dx, dWc, dbc = agg.backward(dz, ca)
            for name, g in zip(GLOBAL_PARAMS, (dWc, dbc, dW1, db1, dW2, db2)):
                grads[name] += g
            if cfg.global_input == "encoder":
                dfeats[slots] += dx

    enc, c = tr.stages["encoder"]
    enc_grads = enc.backward(dfeats, c)
    dtokens = enc_grads[0]
    for k, g in zip(ENCODER_PARAMS, enc_grads[1:]):
        grads["enc." + k] += g

    if cfg.no_sm:
        op, c = tr.stages["raw"]
        _, dproj = op.backward(dtokens, c)
        grads["tokens.proj"] += dproj
    else:
        op, c = tr.stages["tokens"]
        dmaps, dproj = op.backward(dtokens, c)
        grads["tokens.proj"] += dproj
        op, c = tr.stages["expand"]
        _, dw, db = op.backward(dmaps, c)
        grads["expand.w"] += dw
        grads["expand.b"] += db


def predict(params: dict, images, cfg: TrainConfig):
    """Face and image scores for ``images``, evaluated in training-sized chunks."""
    face_scores, image_scores = [], []
    for start in range(0, len(images), cfg.batch_images):
        res = forward_backward(params, images[start:start + cfg.batch_images], cfg, need_grad=False)
        face_scores.extend(res.face_scores)
        image_scores.extend(res.image_scores.tolist())
    return face_scores, np.array(image_scores)


def local_features(params: dict, group, cfg: TrainConfig) -> np.ndarray:
    """Encoder outputs F_i for one similarity group."""
    return _forward_group(params, group, cfg).features


class ModelLossOp(DiffOp):
    """Total batch loss as a function of the named parameters (for grad checks)."""

    name = "model"

    def __init__(self, params: dict, names, batch, cfg: TrainConfig):
        self.base = params
        self.names = list(names)
        self.batch = batch
        self.cfg = cfg

    def _params(self, arrays):
        params = dict(self.base)
        params.update(zip(self.names, arrays))
        return params

    def forward(self, *arrays):
        res = forward_backward(self._params(arrays), self.batch, self.cfg, need_grad=False)
        return res.breakdown.L_total, arrays

    def backward(self, dloss, arrays):
        grads = forward_backward(self._params(arrays), self.batch, self.cfg).grads
        return tuple(float(dloss) * grads[k] for k in self.names)
