"""Membership-inference score of a trained (not yet unlearned) model, per seed.

    python scripts/mia_overfit.py configs/mia_overfit.yaml --seeds 5

Only the training stage runs; the score uses the same member and
non-member sets as the full pipeline.
"""
import argparse
import dataclasses
import sys

import numpy as np

from fedcare import config as cfgmod
from fedcare.pipeline import Runner, evaluate


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("config")
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args(argv)
    cfg = cfgmod.load(args.config)
    scores = []
    for seed in range(args.seeds):
        runner = Runner(dataclasses.replace(cfg, seed=seed))
        (model, _), _ = runner.trained()
        report = evaluate(runner.base, runner.scenario, model)
        scores.append(report.mia)
        print(f"seed {seed}: mia {report.mia:.3f}  forget-set acc {report.forget_set_acc:.3f}  "
              f"test acc {report.test_acc:.3f}", flush=True)
    print(f"mean mia {np.mean(scores):.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
