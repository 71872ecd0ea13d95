"""Three-rung ablation: ROI-only baseline, + short-term context, + long-term context."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..evaluation import frame_map
from ..feature_bank import WindowSpec
from .config import SynthConfig, TrainConfig
from .synth import synth_generate
from .train import heldout_map, train, train_roi_baseline

log = logging.getLogger(__name__)

# Large enough that long-term co-occurrence is learnable rather than memorized.
ABLATION_SYNTH = SynthConfig(n_videos=500, n_test_videos=60, n_identities=14)
ABLATION_TRAIN = TrainConfig(learning_rate=0.7, steps=500)
ABLATION_STAGE2_STEPS = 1000


@dataclass
class AblationRow:
    seed: int
    baseline_map: float
    stage1_map: float
    stage2_map: float
    stage1_longterm_map: float
    stage2_longterm_map: float

    @property
    def longterm_gain(self):
        return self.stage2_longterm_map - self.stage1_longterm_map


def run_seed(seed: int, synth: SynthConfig = ABLATION_SYNTH, base: TrainConfig = ABLATION_TRAIN,
             stage2_steps: int = ABLATION_STAGE2_STEPS) -> AblationRow:
    ds = synth_generate(synth.replace(seed=seed))
    stage1 = base.replace(stage=1, seed=seed)
    stage2 = base.replace(stage=2, seed=seed, steps=stage2_steps)
    spec = WindowSpec(stage2.radius_s, stage2.include_center)
    longterm = list(range(synth.c_local, synth.c))

    baseline = train_roi_baseline(ds, stage1)
    r1 = train(ds, stage1)
    r2 = train(ds, stage2, bank=r1.bank, init=r1.model)

    test_clips, test_gt = ds.subset("test"), ds.gt_records("test")
    row = AblationRow(
        seed,
        frame_map(baseline.infer(test_clips), test_gt).map_value,
        heldout_map(r1.model, ds, None, spec).map_value,
        heldout_map(r2.model, ds, r1.bank, spec).map_value,
        heldout_map(r1.model, ds, None, spec, classes=longterm).map_value,
        heldout_map(r2.model, ds, r1.bank, spec, classes=longterm).map_value,
    )
    log.info("ablation seed %d: %s", seed, row)
    return row


def summarize(rows) -> dict:
    keys = ("baseline_map", "stage1_map", "stage2_map", "stage1_longterm_map", "stage2_longterm_map")
    out = {k: float(np.mean([getattr(r, k) for r in rows])) for k in keys}
    out["longterm_gain"] = out["stage2_longterm_map"] - out["stage1_longterm_map"]
    out["ordered"] = out["baseline_map"] < out["stage1_map"] < out["stage2_map"]
    return out
