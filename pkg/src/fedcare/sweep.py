"""Multi-seed, multi-variant runs of one experiment configuration.

Variants of a seed share a :class:`~fedcare.pipeline.Runner`, so training,
generator fitting and unlearning run once per seed and per distinct setting.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .pipeline import PhaseError, Runner

VARIANTS = {
    "fedcare": {},
    "m1": {"m1_batchnorm_generator": True},
    "m2": {"m2_no_projection": True},
    "m3": {"m3_plain_fedavg_recovery": True},
    "m4": {"m4_no_backbone_freeze": True},
    "m5": {"m5_no_server_filter": True},
}


@dataclass
class SeedRun:
    seed: int
    reports: dict = field(default_factory=dict)  # variant -> deterministic report
    recover: dict = field(default_factory=dict)  # variant -> per-round recovery rows
    backbone_frozen: dict = field(default_factory=dict)  # variant -> bool
    seconds: float = 0.0  # wall time of the first variant, including shared stages
    error: Optional[str] = None

    def metric(self, variant, block, name):
        return self.reports[variant]["metrics"][block][name]


def seed_sweep(config: ExperimentConfig, seeds, variants=("fedcare",), retrain=False, log=None):
    """One :class:`SeedRun` per seed; a failing seed records its error and moves on."""
    runs = []
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=int(seed))
        run = SeedRun(int(seed))
        start = time.perf_counter()
        try:
            runner = Runner(cfg)
            for i, name in enumerate(variants):
                res = runner.run(cfg.with_ablations(**VARIANTS[name]), retrain=retrain and i == 0)
                off = res.models["final"].head_offset
                run.reports[name] = res.report
                run.recover[name] = res.traces["recover"]
                run.backbone_frozen[name] = (res.models["final"].params.values[:off].tobytes()
                                             == res.models["unlearned"].params.values[:off].tobytes())
                if i == 0:
                    run.seconds = time.perf_counter() - start
        except PhaseError as exc:
            run.error = str(exc)
        runs.append(run)
        if log is not None:
            log(run)
    return runs


def mean_metric(runs, variant, block, name):
    """Mean over the seeds that completed; NaN if none did or the metric is undefined."""
    vals = [r.metric(variant, block, name) for r in runs
            if r.error is None and block in r.reports.get(variant, {}).get("metrics", {})]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")
