"""Baseline vs +short-term vs +long-term on the synthetic ablation set.

    python scripts/run_ablation.py --seeds 0,1,2 [--out ablation.json]
"""
import argparse
import dataclasses
import json
import logging

from lstc.pipeline.ablation import ABLATION_STAGE2_STEPS, run_seed, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--stage2-steps", type=int, default=ABLATION_STAGE2_STEPS)
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rows = [run_seed(int(s), stage2_steps=args.stage2_steps) for s in args.seeds.split(",")]
    print(f"{'seed':>4}  {'baseline':>8}  {'+short':>8}  {'+long':>8}  {'lt s1':>7}  {'lt s2':>7}")
    for r in rows:
        print(f"{r.seed:>4}  {r.baseline_map:8.3f}  {r.stage1_map:8.3f}  {r.stage2_map:8.3f}  "
              f"{r.stage1_longterm_map:7.3f}  {r.stage2_longterm_map:7.3f}")
    summary = summarize(rows)
    print(f"mean  {summary['baseline_map']:8.3f}  {summary['stage1_map']:8.3f}  "
          f"{summary['stage2_map']:8.3f}  {summary['stage1_longterm_map']:7.3f}  "
          f"{summary['stage2_longterm_map']:7.3f}")
    print(f"long-term gain {summary['longterm_gain']:.3f}, ordered: {summary['ordered']}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"rows": [dataclasses.asdict(r) for r in rows], "summary": summary},
                      fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
