"""Run one experiment file over several seeds and ablation variants.

    python scripts/sweep.py configs/backdoor.yaml --seeds 5 --variants fedcare,m2,m3,m5 --out runs/backdoor
    python scripts/sweep.py configs/class_level.yaml --seeds 1 --retrain --out runs/class_level

Writes ``runs.json`` (every deterministic report) and ``summary.csv``
(one row per variant and seed plus a mean row) under ``--out``.
"""
import argparse
import csv
import json
import sys
from pathlib import Path

from fedcare import config as cfgmod
from fedcare.sweep import VARIANTS, mean_metric, seed_sweep

METRICS = ("r_acc", "u_acc", "test_acc", "mia", "asr")


def _fmt(x):
    return "n/a" if x is None else f"{x:.3f}"


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("config")
    p.add_argument("--seeds", type=int, default=5, help="runs seeds 0..N-1")
    p.add_argument("--variants", default="fedcare", help=f"comma list from {','.join(VARIANTS)}")
    p.add_argument("--retrain", action="store_true", help="also train the retrain oracle (first variant)")
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args(argv)

    variants = tuple(v.strip() for v in args.variants.split(","))
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        p.error(f"unknown variant(s) {unknown}")
    cfg = cfgmod.load(args.config)

    def log(run):
        if run.error:
            print(f"seed {run.seed}: {run.error}", file=sys.stderr, flush=True)
            return
        parts = [f"{v} asr={_fmt(run.metric(v, 'final', 'asr'))} r_acc={_fmt(run.metric(v, 'final', 'r_acc'))}"
                 for v in variants]
        print(f"seed {run.seed} ({run.seconds:.0f}s): " + "; ".join(parts), flush=True)

    runs = seed_sweep(cfg, range(args.seeds), variants, retrain=args.retrain, log=log)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.json").write_text(json.dumps(
        [{"seed": r.seed, "error": r.error, "seconds": r.seconds, "reports": r.reports} for r in runs],
        indent=1, sort_keys=True))
    blocks = ("pre", "unlearned", "final") + (("retrain",) if args.retrain else ())
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "block", *METRICS])
        for v in variants:
            for r in runs:
                if r.error is None:
                    for b in blocks:
                        if b in r.reports[v]["metrics"]:
                            w.writerow([v, r.seed, b, *(r.metric(v, b, m) for m in METRICS)])
            for b in blocks:
                if any(r.error is None and b in r.reports[v]["metrics"] for r in runs):
                    w.writerow([v, "mean", b, *(mean_metric(runs, v, b, m) for m in METRICS)])
    for v in variants:
        print(f"{v:8s} mean final " + " ".join(f"{m} {mean_metric(runs, v, 'final', m):.3f}" for m in METRICS))
    return 0 if all(r.error is None for r in runs) else 1


if __name__ == "__main__":
    sys.exit(main())
