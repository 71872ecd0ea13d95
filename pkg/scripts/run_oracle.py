"""Second-order equivalence and timing: oracle trials plus the L-doubling table.

    python scripts/run_oracle.py --trials 100 --max-l 8 --lengths 64,128,256,512
"""
import argparse

from lstc.pipeline.diagnostics import complexity_timings, oracle_trials


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--max-l", type=int, default=8)
    ap.add_argument("--lengths", default="64,128,256")
    ap.add_argument("--n", type=int, default=2)
    ap.add_argument("--d", type=int, default=8)
    ap.add_argument("--d-k", type=int, default=4)
    args = ap.parse_args()

    rows = oracle_trials(args.trials, args.max_l)
    print(f"{len(rows)} trials, max |full - decoupled| = {max(r[3] for r in rows):.2e}")

    lengths = [int(v) for v in args.lengths.split(",")]
    timings = complexity_timings(lengths, n=args.n, d=args.d, d_k=args.d_k)
    print(f"{'L':>5}  {'full ms':>10}  {'ratio':>6}  {'decoupled ms':>12}  {'ratio':>6}")
    prev = None
    for length, t_full, t_dec in timings:
        rf = f"{t_full / prev[0]:6.2f}" if prev else "      "
        rd = f"{t_dec / prev[1]:6.2f}" if prev else "      "
        print(f"{length:>5}  {t_full * 1e3:10.3f}  {rf}  {t_dec * 1e3:12.4f}  {rd}")
        prev = (t_full, t_dec)


if __name__ == "__main__":
    main()
