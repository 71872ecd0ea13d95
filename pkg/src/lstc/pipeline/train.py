"""Two-stage SGD training, inference, and the K/M sweep."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DimensionError, NumericalError
from ..evaluation import Box, DetectionRecord, frame_map
from ..feature_bank import BankRecord, FeatureBank, WindowSpec
from ..fusion import bce_loss, fuse
from ..long_term import LongTermBranch
from ..numerics import Linear, Param, linear, sigmoid
from ..short_term import ShortTermBranch
from .config import TrainConfig
from .model import ModelState
from .synth import Dataset

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: ModelState
    losses: list = field(default_factory=list)
    bank: FeatureBank = None


def build_bank(dataset: Dataset, clips=None) -> FeatureBank:
    """Pooled actor features of every clip, keyed by (video, timestamp)."""
    bank = FeatureBank(dataset.d)
    for clip in clips if clips is not None else dataset.clips:
        bank.insert(BankRecord(clip.video_id, clip.timestamp_s, clip.actor_feats()))
    return bank


def _window_spec(cfg: TrainConfig):
    return WindowSpec(cfg.radius_s, cfg.include_center)


def _prepare(model, clips, bank, spec):
    prepared = []
    for clip in clips:
        if clip.n == 0:
            continue
        feats = clip.actor_feats()
        if feats.shape[1] != model.d:
            raise DimensionError(f"clip dim {feats.shape[1]} != model dim {model.d}")
        window = bank.query_window(clip.video_id, clip.timestamp_s, spec) if bank is not None else None
        prepared.append((clip, feats, window))
    return prepared


def _batch_loss(model: ModelState, batch, backward=True):
    branches, z_s, z_l, labels = [], [], [], []
    for clip, feats, window in batch:
        st = ShortTermBranch(model.short, model.attn_scale)
        zs = st.forward(clip.fmap, feats)
        if model.stage == 2:
            lt = LongTermBranch(model.long)
            zl = lt.forward(feats, window)
        else:
            lt, zl = None, np.zeros_like(zs)
        branches.append((st, lt))
        z_s.append(zs)
        z_l.append(zl)
        labels.append(clip.labels)
    probs = fuse((np.concatenate(z_s), np.concatenate(z_l)))
    loss, g = bce_loss(probs, np.concatenate(labels))
    if backward and math.isfinite(loss):
        start = 0
        for (st, lt), zs in zip(branches, z_s):
            part = g[start:start + zs.shape[0]]
            start += zs.shape[0]
            st.backward(part)
            if lt is not None:
                lt.backward(part)
    return loss


def dataset_loss(model: ModelState, clips, bank=None, spec=WindowSpec()) -> float:
    prepared = _prepare(model, clips, bank if model.stage == 2 else None, spec)
    return _batch_loss(model, prepared, backward=False)


def sgd_step(named_params, lr, weight_decay):
    for _, p in named_params:
        p.value -= lr * (p.grad + weight_decay * p.value)


def train(dataset: Dataset, cfg: TrainConfig, bank: FeatureBank = None,
          init: ModelState = None, clips=None) -> TrainResult:
    """Stage 1 trains the short-term branch alone and returns the feature bank;
    stage 2 starts from stage-1 short-term weights and trains both branches
    against the frozen bank.
    """
    rng = np.random.default_rng(cfg.seed)
    model = ModelState.init(dataset.d, dataset.c, rng, k=cfg.K, m=cfg.M, d_k=cfg.d_k,
                            attn_scale=cfg.attn_scale, threshold=cfg.threshold,
                            scale=cfg.init_scale)
    if cfg.stage == 2:
        if bank is None or init is None:
            raise ConfigError("stage 2 needs the stage-1 feature bank and stage-1 weights")
        if (init.d, init.c) != (dataset.d, dataset.c) or bank.dim != dataset.d:
            raise DimensionError("stage-1 model/bank dims do not match the dataset")
        src_params = init.short.named_params()
        dst_params = model.short.named_params()
        if init.stage == 2 and (init.long.k, init.long.m, init.long.d_k) == (model.long.k, model.long.m, model.long.d_k):
            # resuming from a stage-2 model keeps its long-term weights too
            src_params, dst_params = init.named_params(), model.named_params()
        for (_, dst), (_, src) in zip(dst_params, src_params):
            dst.value[...] = src.value
        model.stage = 2
    clips = dataset.subset("train") if clips is None else clips
    prepared = _prepare(model, clips, bank if cfg.stage == 2 else None, _window_spec(cfg))
    if not prepared:
        raise ConfigError("no training clips with actors")

    params = model.trainable()
    losses = []
    order, cursor = [], 0
    for step in range(cfg.steps):
        batch = []
        while len(batch) < min(cfg.batch_clips, len(prepared)):
            if cursor >= len(order):
                order, cursor = list(rng.permutation(len(prepared))), 0
            batch.append(prepared[order[cursor]])
            cursor += 1
        model.zero_grad()
        loss = _batch_loss(model, batch)
        if not math.isfinite(loss):
            raise NumericalError(f"training diverged: non-finite loss at step {step}")
        losses.append(loss)
        sgd_step(params, cfg.learning_rate, cfg.weight_decay)
        if step % 200 == 0:
            log.debug("stage %d step %d loss %.5f", cfg.stage, step, loss)
    model.zero_grad()
    out_bank = build_bank(dataset) if cfg.stage == 1 else bank
    return TrainResult(model, losses, out_bank)


@dataclass
class RoiBaseline:
    """Linear classifier on pooled actor features, no context of any kind."""
    w: Param
    b: Param

    def probs(self, feats):
        return sigmoid(linear(feats, self.w.value, self.b.value))

    def infer(self, clips) -> list:
        records = []
        for clip in clips:
            if clip.n == 0:
                continue
            probs = self.probs(clip.actor_feats())
            for a, box in enumerate(clip.boxes):
                for cls in range(probs.shape[1]):
                    records.append(DetectionRecord(clip.video_id, clip.timestamp_s, Box(*box),
                                                   cls, float(probs[a, cls])))
        return records


def train_roi_baseline(dataset: Dataset, cfg: TrainConfig, clips=None) -> RoiBaseline:
    rng = np.random.default_rng(cfg.seed)
    clips = [c for c in (dataset.subset("train") if clips is None else clips) if c.n]
    if not clips:
        raise ConfigError("no training clips with actors")
    feats = np.concatenate([c.actor_feats() for c in clips])
    labels = np.concatenate([c.labels for c in clips])
    model = RoiBaseline(Param(np.zeros((dataset.d, dataset.c))), Param(np.zeros((1, dataset.c))))
    op = Linear()
    for _ in range(cfg.steps):
        idx = rng.permutation(len(feats))[: cfg.batch_clips * 2]
        _, g = bce_loss(sigmoid(op(feats[idx], model.w.value, model.b.value)), labels[idx])
        _, dw, db = op.backward(g)
        model.w.value -= cfg.learning_rate * (dw + cfg.weight_decay * model.w.value)
        model.b.value -= cfg.learning_rate * (db + cfg.weight_decay * model.b.value)
    return model


def infer(model: ModelState, clips, bank: FeatureBank = None, spec: WindowSpec = WindowSpec()) -> list:
    """One scored detection per (actor, class), in clip/actor/class order."""
    records = []
    for clip in clips:
        if clip.n == 0:
            continue
        feats = clip.actor_feats()
        if feats.shape[1] != model.d:
            raise DimensionError(f"clip dim {feats.shape[1]} != model dim {model.d}")
        window = None
        if model.stage == 2 and bank is not None:
            window = bank.query_window(clip.video_id, clip.timestamp_s, spec)
        probs = model.probs(clip.fmap, feats, window)
        for a, box in enumerate(clip.boxes):
            b = Box(*box)
            for cls in range(model.c):
                records.append(DetectionRecord(clip.video_id, clip.timestamp_s, b, cls,
                                               float(probs[a, cls])))
    return records


def heldout_map(model, dataset, bank=None, spec=WindowSpec(), classes=None, delta=0.5, split="test"):
    clips = dataset.subset(split)
    dets = infer(model, clips, bank, spec)
    return frame_map(dets, dataset.gt_records(split), delta, class_filter=classes)


def sweep_km(dataset: Dataset, k_values, m_values, stage1_cfg: TrainConfig = None,
             stage2_cfg: TrainConfig = None, split="test") -> list:
    """Train one stage-2 model per (K, M) cell from a shared stage-1 model."""
    stage1_cfg = stage1_cfg or TrainConfig(stage=1)
    stage2_cfg = stage2_cfg or TrainConfig(stage=2, seed=stage1_cfg.seed)
    for v in list(k_values) + list(m_values):
        if v < 1:
            raise ConfigError("K and M values must be >= 1")
    base = train(dataset, stage1_cfg)
    rows = []
    for k in k_values:
        for m in m_values:
            cfg = stage2_cfg.replace(stage=2, K=k, M=m)
            res = train(dataset, cfg, bank=base.bank, init=base.model)
            r = heldout_map(res.model, dataset, base.bank, _window_spec(cfg), split=split)
            rows.append({"K": k, "M": m, "map": r.map_value, "final_loss": res.losses[-1] if res.losses else float("nan")})
    return rows
