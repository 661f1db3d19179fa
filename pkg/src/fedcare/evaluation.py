"""Accuracy splits, loss-threshold membership inference, attack success rate and reports."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import ForgetSpec, LabeledDataset
from .errors import ConfigError, UsageError
from .federation import CostLedger, accuracy
from .numerics import per_sample_cross_entropy, predict


def forget_classes(spec: ForgetSpec, forget_set: LabeledDataset):
    """Classes whose test samples count towards ``u_acc``.

    Class mode uses the requested class; client and instance modes use the
    classes present in the forget set.
    """
    if spec.granularity == "class":
        return frozenset({int(spec.target_class)})
    return frozenset(int(c) for c in forget_set.classes_present())


@dataclass(frozen=True)
class AccuracySplit:
    r_acc: Optional[float]  # None when every class is a forget class
    u_acc: Optional[float]  # None when no test sample belongs to a forget class
    test_acc: float
    r_count: int
    u_count: int


def accuracy_split(model, test: LabeledDataset, classes) -> AccuracySplit:
    if len(test) == 0:
        raise UsageError("empty test set")
    classes = np.array(sorted(classes), dtype=np.int64)
    correct = np.argmax(predict(model, test.samples), axis=1) == test.labels
    in_u = np.isin(test.labels, classes)
    mean = lambda m: float(np.mean(correct[m])) if m.any() else None
    return AccuracySplit(mean(~in_u), mean(in_u), float(np.mean(correct)), int((~in_u).sum()), int(in_u.sum()))


def per_class_accuracy(model, test: LabeledDataset):
    correct = np.argmax(predict(model, test.samples), axis=1) == test.labels
    return {int(c): float(np.mean(correct[test.labels == c])) for c in test.classes_present()}


@dataclass(frozen=True)
class MIAConfig:
    calibration_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.calibration_fraction < 1:
            raise ConfigError("calibration_fraction must lie in (0, 1)")


def sample_losses(model, data: LabeledDataset):
    return per_sample_cross_entropy(predict(model, data.samples), data.labels)


def mia_score(model, members: LabeledDataset, non_members: LabeledDataset, config=MIAConfig()):
    """Accuracy of a single-threshold loss attack on a balanced member/non-member set.

    A random ``calibration_fraction`` of ``members`` fixes the threshold (their
    mean loss) and is never scored.  A sample is called a member iff its loss
    is below the threshold.  0.5 means members and non-members look alike.
    """
    rng = np.random.default_rng([config.seed, 5381])
    order = rng.permutation(len(members))
    n_cal = int(round(config.calibration_fraction * len(members)))
    if n_cal == 0 or n_cal == len(members) or len(non_members) == 0:
        raise UsageError("membership attack needs calibration members, scored members and non-members")
    threshold = float(np.mean(sample_losses(model, members.subset(order[:n_cal]))))
    pos = members.subset(order[n_cal:])
    m = min(len(pos), len(non_members))
    pos = pos.subset(np.sort(rng.permutation(len(pos))[:m]))
    neg = non_members.subset(np.sort(rng.permutation(len(non_members))[:m]))
    hits = np.sum(sample_losses(model, pos) < threshold) + np.sum(sample_losses(model, neg) >= threshold)
    return float(hits / (2 * m))


def asr(model, clean_test: LabeledDataset, stamp, target_label):
    """Fraction of stamped test samples (true label not the target) predicted as the target."""
    mask = clean_test.labels != target_label
    if not mask.any():
        return float("nan")
    preds = np.argmax(predict(model, stamp(clean_test.samples[mask])), axis=1)
    return float(np.mean(preds == target_label))


@dataclass
class MetricsReport:
    r_acc: Optional[float]
    u_acc: Optional[float]
    test_acc: float
    mia: Optional[float] = None
    asr: Optional[float] = None
    forget_set_acc: Optional[float] = None
    per_class_acc: dict = field(default_factory=dict)
    wall_seconds: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)  # phase -> role -> count

    def __post_init__(self):
        for name in ("r_acc", "u_acc", "test_acc", "mia", "asr", "forget_set_acc"):
            v = getattr(self, name)
            if v is not None and not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise UsageError(f"{name}={v} is not a fraction")

    def remaining_flops(self, phase=None):
        return sum(n for p, roles in self.flops.items() if phase in (None, p)
                   for r, n in roles.items() if r == "remaining")

    def to_record(self):
        out = asdict(self)
        out["per_class_acc"] = {str(k): v for k, v in self.per_class_acc.items()}
        return out


def consolidate(model, test: LabeledDataset, spec: ForgetSpec, forget_set: LabeledDataset,
                ledger: CostLedger | None = None, non_members: LabeledDataset | None = None,
                backdoor=None, mia_config=MIAConfig()) -> MetricsReport:
    """Assemble the full metrics record for one model.

    ``backdoor`` is an optional ``(stamp, target_label)`` pair.
    """
    split = accuracy_split(model, test, forget_classes(spec, forget_set))
    mia = mia_score(model, forget_set, non_members, mia_config) if non_members is not None else None
    attack = asr(model, test, *backdoor) if backdoor is not None else None
    flops, seconds = {}, {}
    if ledger is not None:
        for (phase, role), n in sorted(ledger.flops.items()):
            flops.setdefault(phase, {})[role] = int(n)
        seconds = dict(sorted(ledger.wall_seconds.items()))
    return MetricsReport(split.r_acc, split.u_acc, split.test_acc, mia, attack,
                         accuracy(model, forget_set), per_class_accuracy(model, test), seconds, flops)
