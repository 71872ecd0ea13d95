"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -v tests/test_acceptance.py`` or directly as a script.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from lstc.errors import FormatError
from lstc.evaluation import (
    Box, DetectionRecord, GroundTruthRecord, average_precision, frame_map, multi_threshold_map,
    weighted_map,
)
from lstc.feature_bank import BankRecord, FeatureBank
from lstc.long_term import NLBlockParams, nl_weights
from lstc.pipeline.ablation import run_seed, summarize
from lstc.pipeline.config import SynthConfig, TrainConfig
from lstc.pipeline.diagnostics import complexity_timings, gradient_suite, oracle_trials
from lstc.pipeline.model import ModelState
from lstc.pipeline.synth import synth_generate
from lstc.pipeline.train import dataset_loss, train
from lstc.short_term import ClipFeatureMap, ShortTermParams, attention_map

_capture = None


@pytest.fixture(autouse=True)
def _uncaptured(pytestconfig):
    global _capture
    _capture = pytestconfig.pluginmanager.getplugin("capturemanager")
    yield
    _capture = None


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    if _capture is not None:
        with _capture.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)
    assert ok, line


def test_c1_second_order_oracle():
    t0 = time.perf_counter()
    rows = oracle_trials(trials=100, max_l=8, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r[3] for r in rows)
    report(1, len(rows) >= 100 and worst < 1e-9 and elapsed < 10,
           f"{len(rows)} instances, max |full - decoupled| = {worst:.2e}, {elapsed:.2f}s")


@pytest.mark.slow
def test_c2_complexity_separation():
    t0 = time.perf_counter()
    t = complexity_timings((64, 128, 256))
    elapsed = time.perf_counter() - t0
    dec = [t[i + 1][2] / t[i][2] for i in range(2)]
    full = [t[i + 1][1] / t[i][1] for i in range(2)]
    ok = max(dec) <= 1.5 and min(full) >= 3.0 and elapsed < 60
    report(2, ok, f"decoupled x{dec[0]:.2f}, x{dec[1]:.2f}; full x{full[0]:.2f}, x{full[1]:.2f}; "
                  f"{elapsed:.1f}s")


def test_c3_gradient_suite():
    t0 = time.perf_counter()
    reports = gradient_suite(seed=0, eps=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_rel_err)
    ok = all(r.passed(1e-5) for r in reports) and elapsed < 120
    report(3, ok, f"{len(reports)} checks incl. stage2_loss, worst {worst.op_name} "
                  f"{worst.max_rel_err:.2e}, {elapsed:.1f}s")


def test_c4_normalization():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 9))
        h, w, t = (int(v) for v in rng.integers(1, 4, size=3))
        clip = ClipFeatureMap(h, w, t, rng.normal(size=(h * w * t, d)) * 3)
        sp = ShortTermParams.init(d, 2, rng, scale=3.0)
        a = attention_map(clip, rng.normal(size=(int(rng.integers(1, 5)), d)), sp).a
        nl = NLBlockParams.init(d, int(rng.integers(1, 5)), rng, scale=3.0)
        wts = nl_weights(rng.normal(size=(3, d)), rng.normal(size=(int(rng.integers(1, 9)), d)), nl)
        worst = max(worst, np.abs(a.sum(axis=1) - 1).max(), np.abs(wts.sum(axis=1) - 1).max())
    report(4, worst <= 1e-12, f"1000 draws, max |row sum - 1| = {worst:.2e}")


def test_c5_overfit():
    cfg = SynthConfig(n_videos=2, clips_per_video=4, n_test_videos=0, c_longterm=0, seed=0)
    ds = synth_generate(cfg)
    t0 = time.perf_counter()
    res = train(ds, TrainConfig(stage=1, steps=2000, batch_clips=8))
    elapsed = time.perf_counter() - t0
    loss = dataset_loss(res.model, ds.clips)
    report(5, len(ds.clips) == 8 and loss < 0.05 and elapsed < 60,
           f"8 clips, BCE after 2000 steps = {loss:.2e}, {elapsed:.1f}s")


@pytest.mark.slow
def test_c6_ablation():
    rows = [run_seed(s) for s in (0, 1, 2)]
    s = summarize(rows)
    ok = s["longterm_gain"] >= 0.15 and s["ordered"]
    report(6, ok, f"long-term-class mAP@0.5 {s['stage1_longterm_map']:.3f} -> "
                  f"{s['stage2_longterm_map']:.3f} (gain {s['longterm_gain']:.3f}); all-class "
                  f"baseline {s['baseline_map']:.3f} -> +short {s['stage1_map']:.3f} -> "
                  f"+long {s['stage2_map']:.3f}")


def test_c7_evaluator():
    full, left, right = Box(0, 0, 1, 1), Box(0, 0, 0.5, 1), Box(0.5, 0, 1, 1)
    g = lambda f, b, c=0: GroundTruthRecord("v", f, b, c)
    d = lambda f, b, s, c=0: DetectionRecord("v", f, b, c, s)

    ap_half = average_precision([d(0, Box(0, 0, 0.4, 1), 0.9), d(0, Box(0, 0, 0.9, 1), 0.8)],
                                [g(0, full)], 0, 0.5)
    # per-class hand values 5/6, 1/2, 2/3 -> mAP 2/3
    gts = [g(0, full, 0), g(1, left, 0), g(0, left, 1), g(0, right, 2), g(1, full, 2), g(2, full, 2)]
    dets = [d(0, full, 0.9, 0), d(5, full, 0.8, 0), d(1, left, 0.7, 0), d(0, right, 0.6, 1),
            d(0, left, 0.5, 1), d(0, right, 0.9, 2), d(2, full, 0.8, 2)]
    three = frame_map(dets, gts).map_value
    # uniform crowd: every frame holds exactly two people and every detection sits in such a frame
    rng = np.random.default_rng(7)
    ugts, udets = [], []
    for f in range(8):
        ugts += [g(f, left, int(rng.integers(0, 3))), g(f, right, int(rng.integers(0, 3)))]
        for _ in range(3):
            udets.append(d(f, (left, right, full)[int(rng.integers(0, 3))], float(rng.uniform()),
                           int(rng.integers(0, 3))))
    uniform = abs(weighted_map(udets, ugts) - multi_threshold_map(udets, ugts))
    perfect = [d(x.timestamp_s, x.box, 1.0, x.class_id) for x in gts]
    perfect_maps = [frame_map(perfect, gts, delta).map_value for delta in (0.5, 0.6, 0.75)]
    ok = ap_half == 0.5 and three == 2 / 3 and uniform <= 1e-12 and perfect_maps == [1.0] * 3
    report(7, ok, f"AP={ap_half}, 3-class mAP={three!r}, |w-mAP - mAP|={uniform:.1e}, "
                  f"perfect={perfect_maps}")


def test_c8_binary_roundtrip():
    rng = np.random.default_rng(0)
    bank_ok = ckpt_ok = 0
    offsets_ok = True
    for i in range(50):
        dim = int(rng.integers(1, 6))
        bank = FeatureBank(dim)
        for v in range(int(rng.integers(1, 4))):
            for t in rng.choice(50, size=int(rng.integers(1, 5)), replace=False):
                bank.insert(BankRecord(f"video-{v}", int(t), rng.normal(size=(int(rng.integers(0, 4)), dim))))
        raw = bank.to_bytes()
        back = FeatureBank.from_bytes(raw)
        bank_ok += back == bank and back.to_bytes() == raw

        model = ModelState.init(int(rng.integers(1, 6)), int(rng.integers(1, 4)), rng,
                                k=int(rng.integers(1, 3)), m=int(rng.integers(1, 3)))
        model.stage = int(rng.integers(1, 3))
        for _, p in model.named_params():
            p.value[...] = rng.normal(size=p.shape)
        mraw = model.to_bytes()
        ckpt_ok += ModelState.from_bytes(mraw).to_bytes() == mraw

        for blob, loader in ((raw, FeatureBank.from_bytes), (mraw, ModelState.from_bytes)):
            cut = int(rng.integers(0, len(blob)))
            try:
                loader(blob[:cut])
                offsets_ok = False
            except FormatError as exc:
                offsets_ok &= exc.offset is not None and "byte offset" in str(exc)
            flipped = bytes([blob[0] ^ 0xFF]) + blob[1:]
            try:
                loader(flipped)
                offsets_ok = False
            except FormatError as exc:
                offsets_ok &= exc.offset == 0
    report(8, bank_ok == 50 and ckpt_ok == 50 and offsets_ok,
           f"bank {bank_ok}/50, checkpoint {ckpt_ok}/50 bitwise; truncated and bad-magic files "
           f"raise format errors with offsets: {offsets_ok}")


PIPELINE = """
set -e
lstc synth --config "$W/synth.json" --out "$W/data"
lstc train --stage 1 --data "$W/data" --bank "$W/bank.lfb" --out "$W/m1.bin" --steps 150
lstc train --stage 2 --data "$W/data" --bank "$W/bank.lfb" --init "$W/m1.bin" --out "$W/m2.bin" --steps 60
lstc infer --model "$W/m2.bin" --data "$W/data" --bank "$W/bank.lfb" --out "$W/det.csv"
lstc eval --gt "$W/data/gt_test.csv" --det "$W/det.csv" --deltas 0.5,0.6,0.75 --report "$W/report.json"
"""


def _run_pipeline(work: Path, threads: int):
    work.mkdir(parents=True)
    (work / "synth.json").write_text('{"n_videos": 8, "n_test_videos": 3, "seed": 11}')
    env = dict(os.environ, W=str(work))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = str(threads)
    bindir = str(Path(sys.executable).parent)
    env["PATH"] = bindir + os.pathsep + env.get("PATH", "")
    subprocess.run(["bash", "-c", PIPELINE], env=env, check=True, capture_output=True)
    return (work / "det.csv").read_bytes(), (work / "report.json").read_bytes()


@pytest.mark.slow
def test_c9_determinism(tmp_path):
    runs = [_run_pipeline(tmp_path / name, threads)
            for name, threads in (("a", 1), ("b", 1), ("c", 4))]
    same = all(r == runs[0] for r in runs)
    report(9, same and len(runs[0][0]) > 0,
           f"det.csv ({len(runs[0][0])} bytes) and report.json identical across 2 runs "
           f"and 1 vs 4 threads: {same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
