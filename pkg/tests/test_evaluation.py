import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcare.data import BackdoorSpec, ForgetSpec, LabeledDataset, Trigger, inject_backdoor, synth_blobs
from fedcare.errors import UsageError
from fedcare.evaluation import (
    MetricsReport, MIAConfig, accuracy_split, asr, consolidate, forget_classes, mia_score,
    sample_losses,
)
from fedcare.federation import ClientState, CostLedger, local_train
from fedcare.models import build_classifier
from fedcare.numerics import SplitModel, affine, flatten


def fixed_model(weight, bias, dims, shape=None):
    model = SplitModel.build([flatten(), affine(dims, len(bias))], shape or (dims,), 1)
    values = np.concatenate([np.asarray(weight, float).ravel(), np.asarray(bias, float)])
    return model.replace(params=model.params.with_values(values))


def constant_model(dims, classes, c, shape=None):
    bias = np.zeros(classes)
    bias[c] = 10.0
    return fixed_model(np.zeros((classes, dims)), bias, dims, shape)


def test_perfect_classifier_split():
    x = np.eye(3)
    ds = LabeledDataset(x, [0, 1, 2], 3)
    model = fixed_model(10 * np.eye(3), np.zeros(3), 3)
    split = accuracy_split(model, ds, {1})
    assert (split.r_acc, split.u_acc, split.test_acc) == (1.0, 1.0, 1.0)


def test_constant_classifier_on_balanced_test():
    ds = synth_blobs(10, 7, (4,), 0.1, seed=0)
    split = accuracy_split(constant_model(4, 10, 3), ds, {3})
    assert split.test_acc == pytest.approx(0.1) and split.u_acc == 1.0 and split.r_acc == 0.0


def test_all_forget_classes_leaves_r_acc_undefined():
    ds = synth_blobs(2, 5, (3,), 0.1, seed=0)
    split = accuracy_split(constant_model(3, 2, 0), ds, {0, 1})
    assert split.r_acc is None and split.u_acc == 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.sets(st.integers(0, 4), min_size=1, max_size=4))
def test_test_acc_is_weighted_combination(seed, classes):
    ds = synth_blobs(5, 8, (3,), 0.3, seed=seed)
    rng = np.random.default_rng(seed)
    model = fixed_model(rng.normal(size=(5, 3)), rng.normal(size=5), 3)
    s = accuracy_split(model, ds, classes)
    combined = (s.r_acc * s.r_count + s.u_acc * s.u_count) / (s.r_count + s.u_count)
    assert combined == pytest.approx(s.test_acc, abs=1e-12)


def test_forget_classes_by_granularity():
    f = LabeledDataset(np.zeros((3, 1)), [4, 1, 4], 5)
    assert forget_classes(ForgetSpec("client"), f) == {1, 4}
    assert forget_classes(ForgetSpec("class", target_class=2), f) == {2}


def test_mia_chance_level_for_unseen_data():
    scores = []
    for seed in range(5):
        pool = synth_blobs(4, 100, (6,), 0.3, seed=seed)
        perm = np.random.default_rng(seed).permutation(len(pool))
        model = build_classifier({"kind": "mlp", "hidden": [8]}, (6,), 4, seed=seed)
        a, b = pool.subset(perm[:200]), pool.subset(perm[200:])
        scores.append(mia_score(model, a, b, MIAConfig(seed=seed)))
    assert abs(np.mean(scores) - 0.5) <= 0.05
    assert all(0.4 <= s <= 0.6 for s in scores)


def test_mia_detects_gross_overfitting():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(120, 10))
    y = rng.integers(0, 4, size=120)
    members, outsiders = LabeledDataset(x[:60], y[:60], 4), LabeledDataset(x[60:], y[60:], 4)
    model = build_classifier({"kind": "mlp", "hidden": [64]}, (10,), 4, seed=0)
    upd = local_train(model, ClientState(0, members, epochs=400, batch_size=20, lr=0.2))
    model = model.replace(params=upd.params)
    assert mia_score(model, members, outsiders) > 0.7


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_mia_is_capped_by_member_loss_skew(seed):
    # with a mean-loss threshold, at most the members below that mean can be caught
    pool = synth_blobs(3, 40, (5,), 0.3, seed=seed)
    rng = np.random.default_rng(seed)
    model = fixed_model(rng.normal(size=(3, 5)) * 3, np.zeros(3), 5)
    members, outsiders = pool.subset(np.arange(0, 120, 2)), pool.subset(np.arange(1, 120, 2))
    cfg = MIAConfig(seed=seed)
    score = mia_score(model, members, outsiders, cfg)
    order = np.random.default_rng([seed, 5381]).permutation(len(members))
    losses = sample_losses(model, members)
    threshold = losses[order[:12]].mean()
    caught = np.mean(losses[order[12:]] < threshold)
    assert score <= (1 + caught) / 2 + 1e-12


def test_mia_rejects_empty_sets():
    ds = synth_blobs(2, 5, (3,), 0.1, seed=0)
    with pytest.raises(UsageError):
        mia_score(constant_model(3, 2, 0), ds, ds.subset([]))


def test_asr_of_trigger_blind_and_poisoned_models():
    ds = synth_blobs(3, 30, (1, 6, 6), 0.05, seed=0)
    stamp = Trigger(2, 1.0)
    assert asr(constant_model(36, 3, 1, (1, 6, 6)), ds, stamp, 0) == 0.0
    assert asr(constant_model(36, 3, 0, (1, 6, 6)), ds, stamp, 0) == 1.0


def test_freshly_poisoned_model_has_high_asr():
    ds = synth_blobs(4, 150, (1, 6, 6), 0.1, seed=1)
    poisoned, stamp = inject_backdoor(ds, BackdoorSpec(Trigger(2, 1.0), 0, poison_fraction=0.3, seed=1))
    model = build_classifier({"kind": "cnn", "conv_channels": [4], "hidden": 16}, (1, 6, 6), 4, seed=0)
    upd = local_train(model, ClientState(0, poisoned, epochs=15, batch_size=32, lr=0.1))
    model = model.replace(params=upd.params)
    test = synth_blobs(4, 40, (1, 6, 6), 0.1, seed=1)
    assert asr(model, test, stamp, 0) > 0.9


def test_asr_is_order_invariant():
    ds = synth_blobs(3, 20, (1, 5, 5), 0.2, seed=2)
    model = build_classifier({"kind": "cnn", "conv_channels": [2], "hidden": 8}, (1, 5, 5), 3, seed=1)
    perm = np.random.default_rng(0).permutation(len(ds))
    stamp = Trigger(2, 1.0)
    assert asr(model, ds, stamp, 1) == asr(model, ds.subset(perm), stamp, 1)


def _ledger():
    ledger = CostLedger()
    ledger.add_flops("train", "remaining", 100)
    ledger.add_flops("unlearn", "target", 40)
    ledger.add_flops("recover", "remaining", 7)
    ledger.add_time("train", 1.5)
    return ledger


def test_consolidate_attributes_flops_by_role():
    ds = synth_blobs(3, 10, (4,), 0.1, seed=0)
    model = constant_model(4, 3, 0)
    f = ds.where(ds.labels == 2)
    report = consolidate(model, ds, ForgetSpec("class", target_class=2), f, _ledger())
    assert report.flops == {"recover": {"remaining": 7}, "train": {"remaining": 100}, "unlearn": {"target": 40}}
    assert report.remaining_flops() == 107 and report.remaining_flops("recover") == 7
    assert report.wall_seconds == {"train": 1.5} and report.mia is None and report.asr is None


def test_consolidate_without_ledger_and_with_attacks():
    ds = synth_blobs(2, 20, (1, 4, 4), 0.1, seed=0)
    model = constant_model(16, 2, 1, (1, 4, 4))
    report = consolidate(model, ds, ForgetSpec("client"), ds.subset(np.arange(20)), None,
                         non_members=ds.subset(np.arange(20, 40)), backdoor=(Trigger(2, 1.0), 1))
    assert report.flops == {} and report.asr == 1.0 and 0 <= report.mia <= 1
    record = report.to_record()
    assert set(record["per_class_acc"]) == {"0", "1"}


def test_consolidate_is_deterministic():
    ds = synth_blobs(3, 10, (4,), 0.1, seed=0)
    model = constant_model(4, 3, 0)
    args = (model, ds, ForgetSpec("client"), ds.subset(np.arange(12)), _ledger(), ds.subset(np.arange(12, 30)))
    assert consolidate(*args).to_record() == consolidate(*args).to_record()


def test_report_rejects_non_fractions():
    with pytest.raises(UsageError):
        MetricsReport(r_acc=1.2, u_acc=None, test_acc=0.5)
