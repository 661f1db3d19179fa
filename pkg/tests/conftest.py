import hypothesis
import numpy as np
import pytest

from fedcare.data import PartitionConfig, partition, synth_blobs, train_test_split
from fedcare.federation import ClientState, run_rounds
from fedcare.models import build_classifier

hypothesis.settings.register_profile("fast", max_examples=5)
np.seterr(all="raise", under="ignore")

DESK_SHAPE = (1, 8, 8)


@pytest.fixture(scope="session")
def desk_data():
    ds = synth_blobs(5, 120, DESK_SHAPE, 0.25, seed=0)
    return train_test_split(ds, 0.25, seed=0)


@pytest.fixture(scope="session")
def trained_desk_model(desk_data):
    """A small CNN fitted by 8 rounds of IID FedAvg on 5-class blobs."""
    train, test = desk_data
    shards = partition(train, PartitionConfig("iid", client_count=3, seed=0))
    clients = [ClientState(i, s, epochs=1, batch_size=32, lr=0.05) for i, s in enumerate(shards)]
    model = build_classifier({"kind": "cnn", "conv_channels": [4, 4], "hidden": 16}, DESK_SHAPE, 5, seed=0)
    model, _ = run_rounds(model, clients, 8, seed=0)
    return model


@pytest.fixture(scope="session")
def smooth_desk_model(desk_data):
    """Same recipe with tanh activations, so the loss is twice differentiable."""
    train, _ = desk_data
    shards = partition(train, PartitionConfig("iid", client_count=3, seed=0))
    clients = [ClientState(i, s, epochs=1, batch_size=32, lr=0.05) for i, s in enumerate(shards)]
    arch = {"kind": "cnn", "conv_channels": [4, 4], "hidden": 16, "activation": "tanh"}
    model = build_classifier(arch, DESK_SHAPE, 5, seed=0)
    model, _ = run_rounds(model, clients, 8, seed=0)
    return model


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``record(number, passed, detail)`` collects one acceptance verdict."""

    def record(number, passed, detail):
        request.config.stash.setdefault(_CRITERIA, {})[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
