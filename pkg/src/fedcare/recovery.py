"""Relearning-resistant recovery after unlearning.

Remaining clients retrain only the classifier head on top of the frozen
unlearned backbone.  The server removes from every aggregated head update
its component along the fixed direction pointing back to the
pre-unlearning head, so recovery cannot quietly undo the unlearning step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, UsageError
from .federation import run_rounds
from .numerics import ParamVector, SplitModel

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class RollbackState:
    theta_pre: ParamVector
    theta_star: ParamVector
    head_offset: int
    v_rb: np.ndarray  # unit vector in head space, zeros when degenerate
    degenerate: bool
    eps_filter: float = 1e-12

    @property
    def delta_ul(self) -> ParamVector:
        return self.theta_star - self.theta_pre

    @classmethod
    def from_models(cls, pre: SplitModel, star: SplitModel, eps_filter=1e-12):
        if pre.layout != star.layout or pre.split_index != star.split_index:
            raise UsageError("pre- and post-unlearning models differ in architecture")
        v, degenerate = compute_rollback_direction(pre.params, star.params, star.head_offset)
        return cls(pre.params, star.params, star.head_offset, v, degenerate, eps_filter)


def compute_rollback_direction(theta_pre: ParamVector, theta_star: ParamVector, head_offset):
    """Unit vector along ``w - w*`` in the head slice.

    Returns ``(v_rb, degenerate)``; when the heads coincide (norm below
    1e-12) ``v_rb`` is all zeros and ``degenerate`` is True.
    """
    if theta_pre.layout != theta_star.layout:
        raise UsageError("parameter layouts differ")
    diff = theta_pre.values[head_offset:] - theta_star.values[head_offset:]
    norm = float(np.linalg.norm(diff))
    if norm < DEGENERATE_NORM:
        return np.zeros_like(diff), True
    return diff / norm, False


class FilterResult(NamedTuple):
    delta: np.ndarray
    fired: bool
    removed_magnitude: float
    inner_before: float


def filter_update(delta_agg, v_rb, eps_filter=1e-12, degenerate=False) -> FilterResult:
    """``delta - max(0, <delta, v>) / (|v|^2 + eps) * v``; identity when degenerate."""
    delta_agg = np.asarray(delta_agg, dtype=np.float64)
    v_rb = np.asarray(v_rb, dtype=np.float64)
    if delta_agg.shape != v_rb.shape:
        raise UsageError(f"head update shape {delta_agg.shape} != rollback direction {v_rb.shape}")
    inner = float(delta_agg @ v_rb)
    if degenerate or inner <= 0.0:
        return FilterResult(delta_agg, False, 0.0, inner)
    coef = inner / (float(v_rb @ v_rb) + eps_filter)
    return FilterResult(delta_agg - coef * v_rb, True, coef, inner)


def rollback_alignment(delta_rec, delta_ul) -> float:
    """``<delta_rec, -delta_ul>``; positive means drift back towards the original model."""
    a = delta_rec.values if isinstance(delta_rec, ParamVector) else np.asarray(delta_rec, dtype=np.float64)
    b = delta_ul.values if isinstance(delta_ul, ParamVector) else np.asarray(delta_ul, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError("vectors differ in shape")
    return float(-(a @ b))


@dataclass(frozen=True)
class RecoveryConfig:
    rounds: int = 10
    freeze_backbone: bool = True  # False: ablation M4
    server_filter: bool = True  # False: ablation M5
    eps_filter: float = 1e-12

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("recovery rounds must be non-negative")
        if not 0 <= self.eps_filter < 1e-3:
            raise ConfigError("eps_filter must be a small non-negative stabiliser")

    @classmethod
    def plain_fedavg(cls, rounds=10):
        """Ablation M3: full-model FedAvg, no filter."""
        return cls(rounds, freeze_backbone=False, server_filter=False)


def recovery_rounds(model_star: SplitModel, clients, state: RollbackState, config: RecoveryConfig,
                    seed=0, workers=1, test_set=None, roles=None):
    """Run ``config.rounds`` recovery rounds from the unlearned model.

    Returns ``(recovered_model, records)``; each record's ``info`` carries
    the filter diagnostics and the head-space and full-space rollback
    alignment after the round.
    """
    if config.rounds and not clients:
        raise ConfigError("recovery needs at least one remaining client")
    if model_star.params.layout != state.theta_star.layout or model_star.head_offset != state.head_offset:
        raise UsageError("rollback state does not match the model")
    off = state.head_offset
    delta_ul = state.delta_ul

    def hook(r, current: SplitModel, agg: ParamVector):
        head_now = current.params.values[off:]
        delta = agg.values[off:] - head_now
        if config.server_filter:
            res = filter_update(delta, state.v_rb, config.eps_filter, state.degenerate)
        else:
            res = FilterResult(delta, False, 0.0, float(delta @ state.v_rb))
        new_head = head_now + res.delta if res.fired else agg.values[off:]
        backbone = current.params.values[:off] if config.freeze_backbone else agg.values[:off]
        params = agg.with_values(np.concatenate([backbone, new_head]))
        delta_rec = params - state.theta_star
        info = {
            "filter_fired": res.fired,
            "removed_magnitude": res.removed_magnitude,
            "inner_before": res.inner_before,
            "inner_after": float(res.delta @ state.v_rb),
            "update_norm": float(np.linalg.norm(delta)),
            "alignment_head": rollback_alignment(delta_rec.values[off:], delta_ul.values[off:]),
            "alignment_full": rollback_alignment(delta_rec, delta_ul),
        }
        return params, info

    trainable = "head" if config.freeze_backbone else "all"
    return run_rounds(model_star, clients, config.rounds, trainable=trainable, hook=hook, seed=seed,
                      workers=workers, test_set=test_set, phase="recover", roles=roles)
