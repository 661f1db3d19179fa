"""Federated unlearning simulator: train, unlearn, recover, evaluate.

    fedcare pipeline --config cfg.yaml --seed 3 --out runs/x [--m2-no-projection ...]

Verbs ``train``, ``unlearn``, ``recover`` run one stage each and exchange
checkpoints through ``--out``; ``evaluate`` scores whatever checkpoints are
there; ``pipeline`` runs everything; ``retrain-oracle`` trains from scratch
without the forgotten data.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import checkpoint, config as cfgmod, pipeline
from .errors import FedCareError
from .federation import CostLedger
from .pipeline import PhaseError

ABLATIONS = [f.name for f in dataclasses.fields(cfgmod.AblationFlags)]
VERBS = ("train", "unlearn", "recover", "evaluate", "pipeline", "retrain-oracle")


def build_parser():
    p = argparse.ArgumentParser(prog="fedcare", description=__doc__.split("\n\n")[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="YAML experiment file")
    p.add_argument("--seed", type=int, help="overrides the config's seed")
    p.add_argument("--out", help="output directory (default: the config's 'out')")
    p.add_argument("--workers", type=int, help="client threads per round")
    p.add_argument("--retrain-oracle", action="store_true", help="pipeline: also train the retrain oracle")
    for name in ABLATIONS:
        p.add_argument("--" + name.replace("_", "-"), action="store_true", dest=name, help=f"ablation {name[:2].upper()}")
    return p


def resolve_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.workers is not None:
        overrides["train"] = {"workers": args.workers}
    if args.retrain_oracle:
        overrides["retrain_oracle"] = True
    flags = {name: True for name in ABLATIONS if getattr(args, name)}
    if flags:
        overrides["ablations"] = flags
    return cfgmod.load(args.config, overrides)


def _load(out, name, phase):
    path = Path(out) / f"{name}.fckp"
    if not path.exists():
        raise PhaseError(phase, FileNotFoundError(f"{path} missing; run the earlier verb first"))
    try:
        return checkpoint.load(path)
    except FedCareError as exc:
        raise PhaseError(phase, exc) from exc


def _guard(phase, fn, *args):
    try:
        return fn(*args)
    except PhaseError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise PhaseError(phase, exc) from exc


def _finish(out, name, payload):
    pipeline.write_json(Path(out) / name, payload)
    print(json.dumps(payload, sort_keys=True))


def cmd_train(cfg, sc, out):
    ledger = CostLedger()
    model, trace = _guard("train", pipeline.stage_train, cfg, sc, ledger)
    checkpoint.save(out / "model_pre.fckp", model)
    pipeline.write_csv(out / "trace_train.csv", trace)
    report = _guard("evaluate", pipeline.evaluate, cfg, sc, model, ledger)
    _finish(out, "report_train.json", {"metrics": pipeline._metrics_record(report)})


def cmd_unlearn(cfg, sc, out):
    model = _load(out, "model_pre", "unlearn")
    ledger = CostLedger()
    gen, _ = _guard("generator", pipeline.stage_generator, cfg, sc, model, ledger)
    checkpoint.save(out / "generator.fckp", gen)
    unl, trace = _guard("unlearn", pipeline.stage_unlearn, cfg, sc, model, gen, ledger)
    checkpoint.save(out / "model_unlearned.fckp", unl)
    pipeline.write_csv(out / "trace_unlearn.csv", trace)
    report = _guard("evaluate", pipeline.evaluate, cfg, sc, unl, ledger)
    _finish(out, "report_unlearn.json", {"metrics": pipeline._metrics_record(report)})


def cmd_recover(cfg, sc, out):
    pre = _load(out, "model_pre", "recover")
    unl = _load(out, "model_unlearned", "recover")
    ledger = CostLedger()
    final, rows, _ = _guard("recover", pipeline.stage_recover, cfg, sc, pre, unl, ledger)
    checkpoint.save(out / "model_final.fckp", final)
    pipeline.write_csv(out / "trace_recover.csv", rows)
    report = _guard("evaluate", pipeline.evaluate, cfg, sc, final, ledger)
    _finish(out, "report_recover.json", {"metrics": pipeline._metrics_record(report)})


def cmd_evaluate(cfg, sc, out):
    metrics = {}
    for name in ("pre", "unlearned", "final", "retrain"):
        path = out / f"model_{name}.fckp"
        if path.exists():
            model = _load(out, f"model_{name}", "evaluate")
            metrics[name] = pipeline._metrics_record(_guard("evaluate", pipeline.evaluate, cfg, sc, model))
    if not metrics:
        raise PhaseError("evaluate", FileNotFoundError(f"no model checkpoints in {out}"))
    _finish(out, "report_evaluate.json", {"metrics": metrics})


def cmd_retrain(cfg, sc, out):
    ledger = CostLedger()
    model, trace = _guard("retrain", pipeline.stage_retrain, cfg, sc, ledger)
    checkpoint.save(out / "model_retrain.fckp", model)
    pipeline.write_csv(out / "trace_retrain.csv", trace)
    report = _guard("evaluate", pipeline.evaluate, cfg, sc, model, ledger)
    _finish(out, "report_retrain.json", {"metrics": pipeline._metrics_record(report)})


def cmd_pipeline(cfg, sc, out):
    result = pipeline.Runner(cfg, sc).run()
    pipeline.write_artifacts(out, cfg, result)
    print(json.dumps(result.report["metrics"], sort_keys=True))


COMMANDS = {"train": cmd_train, "unlearn": cmd_unlearn, "recover": cmd_recover, "evaluate": cmd_evaluate,
            "pipeline": cmd_pipeline, "retrain-oracle": cmd_retrain}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except FedCareError as exc:
        print(f"fedcare: [config] {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfgmod.dump(cfg))
        sc = _guard("data", pipeline.prepare, cfg)
        COMMANDS[args.verb](cfg, sc, out)
    except PhaseError as exc:
        print(f"fedcare: {exc}", file=sys.stderr)
        pipeline.write_json(out / "error.json", {"phase": exc.phase, "error": str(exc.cause),
                                                 "type": type(exc.cause).__name__})
        return 1
    except OSError as exc:
        print(f"fedcare: [io] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
