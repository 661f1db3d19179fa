"""Conflict-aware projected gradient-ascent unlearning.

At every step the ascent direction on the forget batch is projected onto
the half-space ``{d : <g_ref, d> <= 0}`` defined by the gradient of the
loss on generator-made reference samples, so that the reference loss does
not increase to first order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .data import ForgetSpec, LabeledDataset
from .errors import ConfigError, DivergenceError, DomainError, EmptyForgetSetError, UsageError
from .federation import CostLedger
from .generator import PseudoSampleBatch
from .numerics import ParamVector, SplitModel, backward, cross_entropy, forward, loss_and_grad


@dataclass(frozen=True)
class UnlearnRequest:
    forget_spec: ForgetSpec
    reference_classes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "reference_classes", frozenset(int(c) for c in self.reference_classes))
        if not self.reference_classes:
            raise ConfigError("reference class set is empty")
        if self.forget_spec.granularity == "class" and self.forget_spec.target_class in self.reference_classes:
            raise ConfigError("class-level requests must exclude the target class from the reference set")

    @classmethod
    def for_spec(cls, spec: ForgetSpec, class_count):
        classes = set(range(class_count))
        if spec.granularity == "class":
            classes.discard(spec.target_class)
        return cls(spec, frozenset(classes))


@dataclass(frozen=True)
class UnlearnConfig:
    lr: float = 0.01
    steps: int = 50
    forget_batch: int = 32
    ref_batch: int = 32
    eps_proj: float = 1e-12
    pseudo_per_class: int = 64
    project: bool = True  # False: raw gradient ascent (ablation M2)
    early_stop: bool = False
    early_stop_acc: Optional[float] = None  # None: chance level

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0:
            raise ConfigError("lr and steps must be non-negative")
        if self.forget_batch <= 0 or self.ref_batch <= 0 or self.pseudo_per_class <= 0:
            raise ConfigError("batch sizes must be positive")
        if not 0 <= self.eps_proj < 1e-3:
            raise ConfigError("eps_proj must be a small non-negative stabiliser")


class GradientPair(NamedTuple):
    g_tar: ParamVector
    g_ref: ParamVector
    inner_product: float
    step: int

    @classmethod
    def of(cls, g_tar, g_ref, step=0):
        return cls(g_tar, g_ref, g_tar.dot(g_ref), step)

    def consistent(self):
        return self.inner_product == self.g_tar.dot(self.g_ref)


class ProjectionResult(NamedTuple):
    d: ParamVector
    conflicted: bool
    removed_magnitude: float


def project(g_tar: ParamVector, g_ref: ParamVector, eps_proj=1e-12) -> ProjectionResult:
    """Closest direction to ``g_tar`` with ``<g_ref, d> <= 0``.

    ``d = g_tar - max(0, <g_tar, g_ref>) / (|g_ref|^2 + eps) * g_ref``; when
    the inner product is not positive ``g_tar`` is returned untouched.
    """
    if g_tar.layout != g_ref.layout:
        raise UsageError("parameter layouts differ")
    sq = float(g_ref.values @ g_ref.values)
    if sq + eps_proj == 0.0:
        raise DomainError("reference gradient is zero and eps_proj is zero")
    inner = g_tar.dot(g_ref)
    if inner <= 0.0:
        return ProjectionResult(g_tar, False, 0.0)
    coef = inner / (sq + eps_proj)
    return ProjectionResult(g_tar - coef * g_ref, True, coef)


def reference_gradient(model: SplitModel, samples, labels) -> ParamVector:
    """Mean cross-entropy gradient on a reference mini-batch."""
    if len(labels) == 0:
        raise UsageError("empty reference batch")
    return loss_and_grad(model, samples, labels)[1]


def forget_gradient(model: SplitModel, samples, labels) -> ParamVector:
    """Mean cross-entropy gradient on a forget mini-batch (the ascent direction)."""
    if len(labels) == 0:
        raise EmptyForgetSetError("empty forget batch")
    return loss_and_grad(model, samples, labels)[1]


class StepTrace(NamedTuple):
    step: int
    forget_loss: float
    ref_loss: float
    inner_product: float
    conflicted: bool
    removed_magnitude: float
    forget_acc: float


class _EpochCycler:
    """Mini-batches drawn without replacement, reshuffled every epoch."""

    def __init__(self, n, batch, rng):
        self.n, self.batch, self.rng = n, min(batch, n), rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self):
        if self.pos + self.batch > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return idx


def unlearn_run(model: SplitModel, forget_set: LabeledDataset, reference: PseudoSampleBatch,
                config: UnlearnConfig, seed=0, ledger: CostLedger | None = None,
                phase="unlearn", role="target"):
    """Projected gradient ascent for ``config.steps`` steps.

    Returns ``(unlearned_model, trace)``.  Forget batches cycle through
    ``forget_set`` epoch by epoch; reference batches are drawn afresh from
    ``reference`` at each step.
    """
    if len(forget_set) == 0:
        raise EmptyForgetSetError("forget set is empty")
    if len(reference.labels) == 0 and config.project:
        raise UsageError("reference pool is empty")
    forget_rng = np.random.default_rng([seed, 1])
    ref_rng = np.random.default_rng([seed, 2])
    forget_batches = _EpochCycler(len(forget_set), config.forget_batch, forget_rng)
    class_count = model.output_shape[0]
    stop_below = config.early_stop_acc if config.early_stop_acc is not None else 1.0 / class_count
    fwd, bwd = model.flops_per_sample()
    trace = []
    for t in range(config.steps):
        idx = forget_batches.next()
        xu, yu = forget_set.samples[idx], forget_set.labels[idx]
        logits, cache = forward(model, xu)
        f_loss, dlogits = cross_entropy(logits, yu)
        g_tar, _ = backward(model, cache, dlogits)
        f_acc = float(np.mean(np.argmax(logits, axis=1) == yu))
        n_flops = (fwd + bwd) * len(idx)

        if config.project:
            ridx = ref_rng.choice(len(reference.labels), size=min(config.ref_batch, len(reference.labels)),
                                  replace=False)
            r_loss, g_ref = loss_and_grad(model, reference.samples[ridx], reference.labels[ridx])
            res = project(g_tar, g_ref, config.eps_proj)
            inner = g_tar.dot(g_ref)
            n_flops += (fwd + bwd) * len(ridx)
        else:
            r_loss, inner = float("nan"), float("nan")
            res = ProjectionResult(g_tar, False, 0.0)

        if not np.isfinite(f_loss) or not np.all(np.isfinite(res.d.values)):
            raise DivergenceError(t, "unlearning loss or direction became non-finite")
        if ledger is not None:
            ledger.add_flops(phase, role, n_flops)
        trace.append(StepTrace(t, f_loss, r_loss, inner, res.conflicted, res.removed_magnitude, f_acc))
        if config.early_stop and f_acc < stop_below:
            break
        model = model.replace(params=model.params + config.lr * res.d)
    return model, trace


class TaylorPoint(NamedTuple):
    eta: float
    actual: float
    predicted: float

    @property
    def residual(self):
        return abs(self.actual - self.predicted)


def taylor_probe(model: SplitModel, d: ParamVector, ref_samples, ref_labels, etas):
    """Actual vs first-order change of the reference loss along ``d``."""
    base, g_ref = loss_and_grad(model, ref_samples, ref_labels)
    slope = g_ref.dot(d)
    out = []
    for eta in etas:
        moved = model.replace(params=model.params + eta * d)
        loss, _ = cross_entropy(forward(moved, ref_samples)[0], ref_labels)
        out.append(TaylorPoint(float(eta), loss - base, eta * slope))
    return out
