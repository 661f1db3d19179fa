"""FedAvg simulation: local SGD, weighted aggregation, rounds and a cost ledger.

FLOP convention (per sample): affine forward ``2*in*out``, conv forward
``2*k*k*C_in*C_out*H*W``, backward twice the forward for both; activation and
normalisation layers one FLOP per output element per pass; reshapes free.
"""
from __future__ import annotations

import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, UsageError
from .numerics import ParamVector, SplitModel, loss_and_grad, predict, sgd_step


@dataclass
class CostLedger:
    """FLOPs keyed by ``(phase, role)`` and wall seconds keyed by phase."""

    flops: Counter = field(default_factory=Counter)
    wall_seconds: dict = field(default_factory=dict)

    def add_flops(self, phase, role, n):
        if n < 0:
            raise UsageError("FLOP counts cannot decrease")
        self.flops[(phase, role)] += int(n)

    def add_time(self, phase, seconds):
        self.wall_seconds[phase] = self.wall_seconds.get(phase, 0.0) + max(0.0, seconds)

    @contextmanager
    def timer(self, phase):
        t0 = time.monotonic()
        try:
            yield
        finally:
            self.add_time(phase, time.monotonic() - t0)

    def merge(self, other: "CostLedger", phase=None, role=None):
        """Fold ``other`` in, optionally re-labelling its phase and/or role."""
        for (p, r), n in other.flops.items():
            self.add_flops(phase or p, role or r, n)
        for p, s in other.wall_seconds.items():
            self.add_time(phase or p, s)

    def total_flops(self, phase=None, role=None):
        return sum(n for (p, r), n in self.flops.items()
                   if (phase is None or p == phase) and (role is None or r == role))


@dataclass
class ClientState:
    client_id: int
    data: LabeledDataset
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05

    def __post_init__(self):
        if len(self.data) == 0:
            raise ConfigError(f"client {self.client_id} has no data")
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError(f"client {self.client_id}: hyperparameters must be positive")


class LocalUpdate(NamedTuple):
    params: ParamVector
    ledger: CostLedger
    epoch_losses: list
    sample_count: int


def local_train(model: SplitModel, client: ClientState, epochs=None, trainable="all",
                seed=0, round_index=0, phase="train", role="remaining") -> LocalUpdate:
    """Plain minibatch SGD on one client's data.

    ``trainable="head"`` backpropagates only through the classifier head, so
    the backbone slice comes back bit-identical.
    """
    if trainable not in ("all", "head"):
        raise UsageError(f"trainable must be 'all' or 'head', not {trainable!r}")
    epochs = client.epochs if epochs is None else epochs
    data = client.data
    if len(data) == 0:
        raise ConfigError(f"client {client.client_id} has no data")
    from_layer = model.split_index if trainable == "head" else 0
    fwd, bwd = model.flops_per_sample(from_layer)
    rng = np.random.default_rng([seed, round_index, client.client_id])
    ledger = CostLedger()
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), client.batch_size):
            idx = order[start:start + client.batch_size]
            loss, grad = loss_and_grad(model, data.samples[idx], data.labels[idx], from_layer)
            if not np.isfinite(loss):
                raise FloatingPointError(f"client {client.client_id}: non-finite training loss")
            model = model.replace(params=sgd_step(model.params, grad, client.lr))
            total += loss * idx.size
            ledger.add_flops(phase, role, (fwd + bwd) * idx.size)
        losses.append(total / len(data))
    return LocalUpdate(model.params, ledger, losses, len(data))


def aggregate(updates) -> ParamVector:
    """Sample-count weighted mean of ``(params, sample_count)`` pairs.

    Inputs are put in a canonical order before summation, so the result is
    bit-identical under any permutation of ``updates``.  The mean is formed
    as ``v0 + sum(w_i * (v_i - v0))`` which returns ``v0`` exactly when all
    inputs agree.
    """
    updates = [(p, int(n)) for p, n in updates]
    if not updates:
        raise UsageError("nothing to aggregate")
    layout = updates[0][0].layout
    for p, n in updates:
        if p.layout != layout:
            raise UsageError("parameter layouts differ")
        if n <= 0:
            raise UsageError("sample counts must be positive")
    updates.sort(key=lambda u: (u[0].values.tobytes(), u[1]))
    total = sum(n for _, n in updates)
    base = updates[0][0].values
    acc = np.zeros_like(base)
    for p, n in updates[1:]:
        acc += (n / total) * (p.values - base)
    return ParamVector(base + acc, layout)


def accuracy(model, data: LabeledDataset):
    if len(data) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict(model, data.samples), axis=1) == data.labels))


@dataclass
class RoundRecord:
    round_index: int
    participants: list
    params: ParamVector
    test_acc: Optional[float]
    ledger: CostLedger
    info: dict = field(default_factory=dict)


Hook = Callable[[int, SplitModel, ParamVector], "tuple[ParamVector, dict] | ParamVector"]


def run_rounds(model: SplitModel, clients, rounds, trainable="all", hook: Optional[Hook] = None,
               seed=0, workers=1, test_set=None, phase="train", roles=None):
    """Full-participation FedAvg.

    ``hook(round_index, current_model, aggregated_params)`` may replace the
    aggregate before it is installed; it returns new params, optionally
    paired with a dict of diagnostics stored on the round record.
    """
    if rounds < 0:
        raise ConfigError("rounds must be non-negative")
    clients = sorted(clients, key=lambda c: c.client_id)
    if rounds and not clients:
        raise ConfigError("no clients to train")
    roles = roles or {}
    records = []

    for r in range(rounds):
        def work(client, current=model, r=r):
            return local_train(current, client, trainable=trainable, seed=seed, round_index=r,
                               phase=phase, role=roles.get(client.client_id, "remaining"))

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(work, clients))
        else:
            results = [work(c) for c in clients]
        ledger = CostLedger()
        for res in results:
            ledger.merge(res.ledger)
        agg = aggregate([(res.params, res.sample_count) for res in results])
        info = {}
        if hook is not None:
            out = hook(r, model, agg)
            agg, info = out if isinstance(out, tuple) else (out, {})
        model = model.replace(params=agg)
        acc = accuracy(model, test_set) if test_set is not None else None
        records.append(RoundRecord(r, [c.client_id for c in clients], agg, acc, ledger, info))
    return model, records
