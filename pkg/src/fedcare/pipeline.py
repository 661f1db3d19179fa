"""End-to-end experiment: train, fit the generator, unlearn, recover, evaluate.

Every random choice is seeded from ``config.seed`` through :func:`derive`,
so the emitted metrics are a pure function of the configuration.  Stages
are plain functions of their inputs; :class:`Runner` memoises them so that
ablation variants of one seed share the stages they have in common.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, dump
from .data import (
    BackdoorSpec, ForgetSpec, LabeledDataset, Trigger, class_target_client, inject_backdoor,
    largest_client, load_idx, partition, split_forget_set, synth_blobs, train_test_split,
)
from .errors import ConfigError, FedCareError
from .evaluation import MIAConfig, MetricsReport, consolidate
from .federation import ClientState, CostLedger, run_rounds
from .generator import GeneratorHistory, GeneratorNet, sample, train_generator
from .models import build_classifier
from .numerics import SplitModel
from .recovery import RecoveryConfig, RollbackState, recovery_rounds
from .unlearning import UnlearnRequest, unlearn_run

PHASES = ("data", "train", "generator", "unlearn", "recover", "evaluate", "retrain")


class PhaseError(FedCareError):
    """Wraps any failure with the pipeline phase it happened in."""

    def __init__(self, phase, cause: BaseException):
        self.phase, self.cause = phase, cause
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")


def derive(seed, name) -> int:
    """Independent integer sub-seed for a named purpose."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class Scenario:
    shards: list  # per-client training data, target client already poisoned and trimmed
    test: LabeledDataset
    target: int
    spec: ForgetSpec
    request: UnlearnRequest
    forget_set: LabeledDataset
    remainder: LabeledDataset  # target client's retained data
    non_members: Optional[LabeledDataset]
    backdoor: Optional[tuple]  # (stamp, target_label)
    input_shape: tuple
    class_count: int


def load_dataset(config: ExperimentConfig):
    ds_cfg, seed = config.dataset, config.seed
    if ds_cfg.synth is not None:
        s = ds_cfg.synth
        full = synth_blobs(s.classes, s.per_class, tuple(s.shape), s.spread, derive(seed, "blobs"),
                           tuple(s.center_range))
        return train_test_split(full, ds_cfg.test_fraction, derive(seed, "split"))
    s = ds_cfg.idx
    train = load_idx(s.images, s.labels, s.classes)
    if s.limit is not None and s.limit < len(train):
        keep = np.sort(np.random.default_rng(derive(seed, "limit")).permutation(len(train))[:s.limit])
        train = train.subset(keep)
    if s.test_images is None:
        return train_test_split(train, ds_cfg.test_fraction, derive(seed, "split"))
    return train, load_idx(s.test_images, s.test_labels, s.classes)


def prepare(config: ExperimentConfig) -> Scenario:
    train, test = load_dataset(config)
    part = dataclasses.replace(config.partition, seed=derive(config.seed, "partition"))
    shards = partition(train, part)
    f = config.forget
    if f.target_client == "largest":
        target = class_target_client(shards, f.target_class) if f.granularity == "class" else largest_client(shards)
    else:
        target = int(f.target_client)
        if not 0 <= target < len(shards):
            raise ConfigError(f"forget.target_client {target} outside 0..{len(shards) - 1}")
    spec = ForgetSpec(f.granularity, target, f.instance_fraction, f.target_class, derive(config.seed, "forget"))

    own = shards[target]
    backdoor = None
    if config.backdoor is not None:
        b = config.backdoor
        bspec = BackdoorSpec(Trigger(b.trigger_size, b.trigger_value), b.target_label, b.poison_fraction,
                             derive(config.seed, "backdoor"))
        own, stamp = inject_backdoor(own, bspec)
        backdoor = (stamp, b.target_label)

    non_members = None
    h = config.evaluation.holdout_fraction
    if h > 0:
        order = np.random.default_rng(derive(config.seed, "holdout")).permutation(len(own))
        n_out = int(round(h * len(own)))
        withheld, own = own.subset(np.sort(order[:n_out])), own.subset(np.sort(order[n_out:]))
        non_members = withheld.where(withheld.labels == spec.target_class) if spec.granularity == "class" else withheld
    shards = list(shards)
    shards[target] = own
    forget_set, remainder = split_forget_set(own, spec)
    class_count = train.class_count
    return Scenario(shards, test, target, spec, UnlearnRequest.for_spec(spec, class_count), forget_set, remainder,
                    non_members, backdoor, train.sample_shape, class_count)


def _clients(shards, train_cfg, recovery=False):
    lr = train_cfg.recovery_lr if recovery and train_cfg.recovery_lr is not None else train_cfg.lr
    epochs = train_cfg.recovery_epochs if recovery and train_cfg.recovery_epochs is not None else train_cfg.epochs
    return [ClientState(i, s, epochs, train_cfg.batch_size, lr) for i, s in shards if len(s)]


def retained_shards(sc: Scenario):
    """``(client_id, data)`` for the clients that stay after the request."""
    out = []
    for i, s in enumerate(sc.shards):
        if i == sc.target:
            if sc.spec.granularity == "client":
                continue
            s = sc.remainder
        if sc.spec.granularity == "class":
            s = s.where(s.labels != sc.spec.target_class)
        out.append((i, s))
    return out


def stage_train(config, sc: Scenario, ledger: CostLedger, phase="train", shards=None):
    model = build_classifier(config.model, sc.input_shape, sc.class_count, seed=derive(config.seed, "init"))
    shards = list(enumerate(sc.shards)) if shards is None else shards
    roles = {sc.target: "target"}
    with ledger.timer(phase):
        model, records = run_rounds(model, _clients(shards, config.train), config.train.rounds,
                                    seed=derive(config.seed, phase), workers=config.train.workers,
                                    test_set=sc.test, phase=phase, roles=roles)
    for r in records:
        ledger.merge(r.ledger)
    return model, [{"round": r.round_index, "test_acc": r.test_acc} for r in records]


def generator_config(config):
    g = config.generator
    if config.ablations.m1_batchnorm_generator:
        g = dataclasses.replace(g, norm_kind="batch-norm")
    return g


def stage_generator(config, sc: Scenario, model: SplitModel, ledger: CostLedger):
    history = GeneratorHistory()
    with ledger.timer("generator"):
        gen = train_generator(model, generator_config(config), sorted(sc.request.reference_classes),
                              seed=derive(config.seed, "generator"), history=history)
    ledger.add_flops("generator", "server", history.flops)
    return gen, history


def unlearn_config(config):
    return dataclasses.replace(config.unlearn, project=config.unlearn.project and not config.ablations.m2_no_projection)


def stage_unlearn(config, sc: Scenario, model: SplitModel, gen: GeneratorNet, ledger: CostLedger):
    cfg = unlearn_config(config)
    with ledger.timer("unlearn"):
        ref = sample(gen, cfg.pseudo_per_class, sorted(sc.request.reference_classes),
                     seed=derive(config.seed, "reference"))
        gfwd, _ = gen.net.flops_per_sample()
        ledger.add_flops("unlearn", "target", gfwd * len(ref.labels))
        unlearned, trace = unlearn_run(model, sc.forget_set, ref, cfg, seed=derive(config.seed, "unlearn"),
                                       ledger=ledger)
    return unlearned, [t._asdict() for t in trace]


def recovery_config(config):
    a, r = config.ablations, config.recovery
    if a.m3_plain_fedavg_recovery:
        return dataclasses.replace(r, freeze_backbone=False, server_filter=False)
    return dataclasses.replace(r, freeze_backbone=r.freeze_backbone and not a.m4_no_backbone_freeze,
                               server_filter=r.server_filter and not a.m5_no_server_filter)


def stage_recover(config, sc: Scenario, pre: SplitModel, unlearned: SplitModel, ledger: CostLedger):
    rcfg = recovery_config(config)
    state = RollbackState.from_models(pre, unlearned, rcfg.eps_filter)
    clients = _clients(retained_shards(sc), config.train, recovery=True)
    with ledger.timer("recover"):
        model, records = recovery_rounds(unlearned, clients, state, rcfg, seed=derive(config.seed, "recover"),
                                         workers=config.train.workers, test_set=sc.test)
    for r in records:
        ledger.merge(r.ledger)
    rows = [dict(round=r.round_index, test_acc=r.test_acc, **r.info) for r in records]
    return model, rows, state


def evaluate(config, sc: Scenario, model, ledger=None) -> MetricsReport:
    mia = MIAConfig(config.evaluation.calibration_fraction, derive(config.seed, "mia"))
    return consolidate(model, sc.test, sc.spec, sc.forget_set, ledger, sc.non_members, sc.backdoor, mia)


def stage_retrain(config, sc: Scenario, ledger: CostLedger):
    model, trace = stage_train(config, sc, ledger, phase="retrain", shards=retained_shards(sc))
    return model, trace


def _metrics_record(report: MetricsReport):
    rec = report.to_record()
    rec.pop("wall_seconds")
    return rec


@dataclass
class RunResult:
    report: dict  # deterministic part
    timing: dict
    models: dict
    traces: dict
    generator: Optional[GeneratorNet] = None


class Runner:
    """Memoised stages for one scenario; ablation variants share what they can."""

    def __init__(self, config: ExperimentConfig, scenario: Scenario | None = None):
        self.base = config
        self._cache = {}
        self.scenario = scenario if scenario is not None else self._phase("data", prepare, config)

    def _phase(self, phase, fn, *args):
        try:
            return fn(*args)
        except PhaseError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the phase attached
            raise PhaseError(phase, exc) from exc

    def _memo(self, key, phase, fn, *args):
        if key not in self._cache:
            ledger = CostLedger()
            self._cache[key] = (self._phase(phase, fn, *args, ledger), ledger)
        return self._cache[key]

    def trained(self):
        return self._memo(("train",), "train", stage_train, self.base, self.scenario)

    def generator(self, config):
        m1 = config.ablations.m1_batchnorm_generator
        (model, _), _ = self.trained()
        return self._memo(("gen", m1), "generator", stage_generator, config, self.scenario, model)

    def unlearned(self, config):
        key = ("unlearn", config.ablations.m1_batchnorm_generator, unlearn_config(config).project)
        (model, _), _ = self.trained()
        (gen, _), _ = self.generator(config)
        return self._memo(key, "unlearn", stage_unlearn, config, self.scenario, model, gen)

    def retrained(self):
        return self._memo(("retrain",), "retrain", stage_retrain, self.base, self.scenario)

    def run(self, config: ExperimentConfig | None = None, retrain=None) -> RunResult:
        config = config or self.base
        sc = self.scenario
        (pre, train_trace), l_train = self.trained()
        (gen, gen_hist), l_gen = self.generator(config)
        (unl, ul_trace), l_ul = self.unlearned(config)
        l_rec = CostLedger()
        final, rec_trace, state = self._phase("recover", stage_recover, config, sc, pre, unl, l_rec)

        ledger = CostLedger()
        for part in (l_train, l_gen, l_ul, l_rec):
            ledger.merge(part)
        blocks = {}
        with ledger.timer("evaluate"):
            blocks["pre"] = self._phase("evaluate", evaluate, config, sc, pre)
            blocks["unlearned"] = self._phase("evaluate", evaluate, config, sc, unl)
            blocks["final"] = self._phase("evaluate", evaluate, config, sc, final, ledger)
        models = {"pre": pre, "unlearned": unl, "final": final}
        traces = {"train": train_trace, "unlearn": ul_trace, "recover": rec_trace}
        if retrain if retrain is not None else config.retrain_oracle:
            (oracle, rt_trace), l_rt = self.retrained()
            ledger.merge(l_rt)
            blocks["retrain"] = self._phase("evaluate", evaluate, config, sc, oracle, l_rt)
            models["retrain"] = oracle
            traces["retrain"] = rt_trace
        report = {
            "seed": config.seed,
            "ablations": config.ablations.active(),
            "scenario": scenario_summary(sc),
            "generator": {"lambda_tv": gen_hist.lambda_tv, "final_ce": gen_hist.losses[-1].ce if gen_hist.losses else None},
            "rollback_degenerate": state.degenerate,
            "metrics": {k: _metrics_record(v) for k, v in blocks.items()},
        }
        return RunResult(report, dict(sorted(ledger.wall_seconds.items())), models, traces, gen)


def scenario_summary(sc: Scenario):
    return {
        "target_client": sc.target,
        "granularity": sc.spec.granularity,
        "client_sizes": [len(s) for s in sc.shards],
        "forget_size": len(sc.forget_set),
        "remainder_size": len(sc.remainder),
        "non_member_size": len(sc.non_members) if sc.non_members is not None else 0,
        "test_size": len(sc.test),
        "reference_classes": sorted(sc.request.reference_classes),
    }


def write_csv(path, rows):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def write_artifacts(out, config: ExperimentConfig, result: RunResult):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump(config))
    for name, model in result.models.items():
        checkpoint.save(out / f"model_{name}.fckp", model)
    if result.generator is not None:
        checkpoint.save(out / "generator.fckp", result.generator)
    for name, rows in result.traces.items():
        write_csv(out / f"trace_{name}.csv", rows)
    write_json(out / "report.json", result.report)
    write_json(out / "timing.json", result.timing)


def run(config: ExperimentConfig, out=None) -> RunResult:
    """Full pipeline for one configuration; writes artifacts when ``out`` is given."""
    result = Runner(config).run()
    if out is not None:
        write_artifacts(out, config, result)
    return result
