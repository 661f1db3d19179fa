"""Datasets, federated partitioning, backdoor poisoning and forget-set selection."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataFormatError, EmptyForgetSetError


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.shape[0] != labels.shape[0]:
            raise ConfigError("samples and labels differ in length")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ConfigError(f"labels outside [0, {self.class_count})")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def sample_shape(self):
        return self.samples.shape[1:]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.class_count)

    def where(self, mask):
        return self.subset(np.flatnonzero(mask))

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.class_count)

    def classes_present(self):
        return frozenset(int(c) for c in np.unique(self.labels))

    @staticmethod
    def concat(parts, class_count=None):
        parts = list(parts)
        if class_count is None:
            class_count = parts[0].class_count
        nonempty = [p for p in parts if len(p)]
        if not nonempty:
            shape = parts[0].samples.shape[1:] if parts else ()
            return LabeledDataset(np.zeros((0,) + shape), np.zeros(0, np.int64), class_count)
        return LabeledDataset(np.concatenate([p.samples for p in nonempty]),
                              np.concatenate([p.labels for p in nonempty]), class_count)


# --- IDX container -------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataFormatError(path, 0, "file too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES or ndim == 0:
        raise DataFormatError(path, 0, f"bad IDX magic {raw[:4].hex()}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(path, 4, "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header_end < need:
        raise DataFormatError(path, len(raw), f"truncated payload: expected {need} bytes after header")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    code = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}.get(array.dtype)
    if code is None:
        code, array = 0x0E, array.astype(">f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, class_count=10):
    """Load an IDX image/label pair; integer pixels are scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] == 0:
        raise DataFormatError(images_path, 4, "zero samples")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DataFormatError(labels_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
    if images.dtype == np.uint8:
        x = images.astype(np.float64) / 255.0
    else:
        x = images.astype(np.float64)
    if x.ndim == 3:
        x = x[:, None]
    return LabeledDataset(x, labels.astype(np.int64), class_count)


# --- synthetic data ------------------------------------------------------

def synth_blobs(class_count, per_class, dims, spread, seed, center_range=(0.2, 0.8)):
    """Gaussian clusters, one per class, clipped to [0, 1].

    ``dims`` is the per-sample shape, e.g. ``(1, 8, 8)``.  Class centres are
    drawn uniformly from ``center_range`` per coordinate.
    """
    dims = (dims,) if np.isscalar(dims) else tuple(dims)
    if class_count <= 0 or per_class <= 0 or min(dims) <= 0:
        raise ConfigError("synth_blobs needs positive counts and extents")
    if spread < 0:
        raise ConfigError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = rng.uniform(*center_range, size=(class_count,) + dims)
    labels = np.repeat(np.arange(class_count), per_class)
    x = means[labels] + spread * rng.normal(size=(labels.size,) + dims)
    order = rng.permutation(labels.size)
    return LabeledDataset(np.clip(x[order], 0.0, 1.0), labels[order], class_count)


def train_test_split(dataset, test_fraction, seed):
    """Stratified split; returns ``(train, test)``."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        test_idx.append(idx[:int(round(test_fraction * idx.size))])
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.zeros(len(dataset), bool)
    mask[test_idx] = True
    return dataset.where(~mask), dataset.where(mask)


# --- partitioning --------------------------------------------------------

@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "iid"
    alpha: float = 0.1
    client_count: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet"):
            raise ConfigError(f"unknown partition scheme {self.scheme!r}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.client_count < 2:
            raise ConfigError("client_count must be at least 2")


MAX_REDRAWS = 100


def partition_indices(labels, class_count, config: PartitionConfig):
    """Index arrays (sorted) of each client's shard."""
    labels = np.asarray(labels)
    n = config.client_count
    if config.scheme == "iid":
        rng = np.random.default_rng(config.seed)
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in range(class_count)])
        return [np.sort(order[k::n]) for k in range(n)]
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng(config.seed + attempt)
        shards = [[] for _ in range(n)]
        for c in range(class_count):
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(n, config.alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                shards[k].append(part)
        shards = [np.sort(np.concatenate(s)) for s in shards]
        if all(s.size for s in shards):
            return shards
    raise ConfigError(f"Dirichlet partition left a client empty after {MAX_REDRAWS} draws")


def partition(dataset, config: PartitionConfig):
    if len(dataset) == 0:
        raise ConfigError("cannot partition an empty dataset")
    return [dataset.subset(i) for i in partition_indices(dataset.labels, dataset.class_count, config)]


# --- backdoor ------------------------------------------------------------

@dataclass(frozen=True)
class Trigger:
    """Solid square patch; calling it stamps a batch of samples."""

    size: int = 3
    value: float = 1.0
    position: Optional[tuple] = None  # (row, col) of the top-left corner; None = bottom-right

    def corner(self, height, width):
        if self.position is None:
            return height - self.size, width - self.size
        return tuple(self.position)

    def check(self, sample_shape):
        if len(sample_shape) != 3:
            raise ConfigError("triggers need (C, H, W) samples")
        h, w = sample_shape[1:]
        r, c = self.corner(h, w)
        if self.size <= 0 or r < 0 or c < 0 or r + self.size > h or c + self.size > w:
            raise ConfigError(f"trigger patch of size {self.size} at {(r, c)} outside {h}x{w}")

    def __call__(self, samples):
        out = np.array(samples, dtype=np.float64, copy=True)
        r, c = self.corner(*out.shape[-2:])
        out[..., r:r + self.size, c:c + self.size] = self.value
        return out


@dataclass(frozen=True)
class BackdoorSpec:
    trigger: Trigger = field(default_factory=Trigger)
    target_label: int = 0
    poison_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.poison_fraction <= 1:
            raise ConfigError("poison_fraction must lie in (0, 1]")


def inject_backdoor(dataset, spec: BackdoorSpec):
    """Stamp the trigger on a random ``poison_fraction`` of samples and relabel them.

    Returns ``(poisoned_dataset, stamp)`` where ``stamp`` re-applies the
    trigger to arbitrary clean samples.
    """
    spec.trigger.check(dataset.sample_shape)
    if not 0 <= spec.target_label < dataset.class_count:
        raise ConfigError("target_label outside the label range")
    rng = np.random.default_rng(spec.seed)
    k = int(round(spec.poison_fraction * len(dataset)))
    idx = np.sort(rng.choice(len(dataset), size=k, replace=False))
    samples = dataset.samples.copy()
    labels = dataset.labels.copy()
    samples[idx] = spec.trigger(samples[idx])
    labels[idx] = spec.target_label
    return LabeledDataset(samples, labels, dataset.class_count), spec.trigger


# --- forget sets ---------------------------------------------------------

GRANULARITIES = ("client", "instance", "class")


@dataclass(frozen=True)
class ForgetSpec:
    granularity: str = "client"
    target_client: int = 0
    instance_fraction: Optional[float] = None
    target_class: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        g = self.granularity
        if g not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {g!r}")
        if g == "instance":
            if self.instance_fraction is None or not 0 < self.instance_fraction < 1:
                raise ConfigError("instance mode needs instance_fraction in (0, 1)")
        elif self.instance_fraction is not None:
            raise ConfigError("instance_fraction is only valid in instance mode")
        if g == "class":
            if self.target_class is None or self.target_class < 0:
                raise ConfigError("class mode needs a target_class")
        elif self.target_class is not None:
            raise ConfigError("target_class is only valid in class mode")


def split_forget_set(client_data, spec: ForgetSpec):
    """Return ``(forget_set, retained_remainder)`` for one client's data.

    Instance mode keeps the original sample order inside both parts.
    """
    n = len(client_data)
    if spec.granularity == "client":
        keep = np.zeros(n, bool)
    elif spec.granularity == "instance":
        k = int(round(spec.instance_fraction * n))
        chosen = np.random.default_rng(spec.seed).permutation(n)[:k]
        keep = np.ones(n, bool)
        keep[chosen] = False
    else:
        keep = client_data.labels != spec.target_class
    forget = client_data.where(~keep)
    if len(forget) == 0:
        raise EmptyForgetSetError(f"{spec.granularity} forget set is empty on this client")
    return forget, client_data.where(keep)


def class_target_client(shards, target_class):
    """Client holding the most samples of ``target_class``; ties go to the lowest id."""
    counts = [int(np.sum(s.labels == target_class)) for s in shards]
    if max(counts) == 0:
        raise EmptyForgetSetError(f"no client holds class {target_class}")
    return int(np.argmax(counts))


def largest_client(shards):
    return int(np.argmax([len(s) for s in shards]))
