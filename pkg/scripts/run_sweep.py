"""K x M sweep of the long-term cascade on the ablation data.

    python scripts/run_sweep.py --k 1,2,3 --m 1,2,3 --seed 0
"""
import argparse

from lstc.pipeline.ablation import ABLATION_STAGE2_STEPS, ABLATION_SYNTH, ABLATION_TRAIN
from lstc.pipeline.synth import synth_generate
from lstc.pipeline.train import sweep_km


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", default="1,2,3")
    ap.add_argument("--m", default="1,2,3")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--stage2-steps", type=int, default=ABLATION_STAGE2_STEPS)
    args = ap.parse_args()

    ds = synth_generate(ABLATION_SYNTH.replace(seed=args.seed))
    s1 = ABLATION_TRAIN.replace(stage=1, seed=args.seed)
    s2 = ABLATION_TRAIN.replace(stage=2, seed=args.seed, steps=args.stage2_steps)
    ks = [int(v) for v in args.k.split(",")]
    ms = [int(v) for v in args.m.split(",")]
    rows = sweep_km(ds, ks, ms, s1, s2)
    print("K\\M " + "".join(f"{m:>8}" for m in ms))
    for k in ks:
        print(f"{k:>3} " + "".join(f"{r['map']:8.3f}" for r in rows if r["K"] == k))


if __name__ == "__main__":
    main()
