from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

from ..errors import EmptyDataset, TooFewSamples
from ..numerics import RngStream
from .dataset import Dataset


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: NDArray

    def indices(self, fold: int) -> NDArray:
        return np.nonzero(self.fold_of == fold)[0]

    def complement(self, fold: int) -> NDArray:
        return np.nonzero(self.fold_of != fold)[0]


def stratified_kfold(dataset: Dataset, k: int, seed: int) -> FoldAssignment:
    """Assign samples to ``k`` folds, stratified per (domain, class) pair.

    Within each stratum the samples are shuffled and dealt round-robin; the
    starting fold rotates from one stratum to the next so the remainders
    spread over all folds instead of piling into fold 0.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    n = len(dataset)
    if n < k:
        raise TooFewSamples(f"{n} samples cannot fill {k} folds")
    rng = RngStream(seed)
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    for d, c in dataset.populated_pairs():
        members = np.nonzero((dataset.domains == d) & (dataset.labels == c))[0]
        members = members[rng.permutation(members.size)]
        fold_of[members] = (offset + np.arange(members.size)) % k
        offset = (offset + members.size) % k
    return FoldAssignment(k, fold_of)


@dataclass(frozen=True)
class Batch:
    inputs: NDArray  # (N, F)
    labels: NDArray
    domains: NDArray
    indices: NDArray  # row indices into the dataset the batch came from

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def _take(dataset: Dataset, idx: NDArray) -> Batch:
    return Batch(dataset.features[idx], dataset.labels[idx], dataset.domains[idx], idx)


def make_batches(dataset: Dataset, batch_size: int, mode: str = "standard", seed: int = 0) -> list[Batch]:
    """One epoch of mini-batches.

    ``standard`` shuffles and partitions the dataset (the last batch may be
    short). ``class_balanced`` cycles through the populated classes and draws
    with replacement inside each class, giving ``ceil(n / batch_size)`` full
    batches.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = RngStream(seed)

    if mode == "standard":
        order = rng.permutation(n)
        return [_take(dataset, order[i : i + batch_size]) for i in range(0, n, batch_size)]

    if mode == "class_balanced":
        classes = [int(c) for c in np.unique(dataset.labels)]
        members = [np.nonzero(dataset.labels == c)[0] for c in classes]
        num_batches = math.ceil(n / batch_size)
        total = num_batches * batch_size
        slot_class = np.arange(total) % len(classes)
        u = rng.uniform(total)
        idx = np.empty(total, dtype=np.int64)
        for j, m in enumerate(members):
            sel = slot_class == j
            pick = np.minimum((u[sel] * m.size).astype(np.int64), m.size - 1)
            idx[sel] = m[pick]
        return [_take(dataset, idx[i : i + batch_size]) for i in range(0, total, batch_size)]

    raise ValueError(f"unknown batch mode {mode!r}")


def augment_features(
    batch: Batch,
    jitter_sigma: float = 0.05,
    scale_range: tuple[float, float] = (0.9, 1.1),
    seed: int = 0,
) -> Batch:
    """Feature-space augmentation: ``x -> s * (x + jitter_sigma * eps)``.

    ``s`` is drawn per sample from ``scale_range``; labels and domains pass
    through untouched.
    """
    lo, hi = scale_range
    if not (0 < lo <= hi):
        raise ValueError("scale_range must satisfy 0 < lo <= hi")
    if jitter_sigma < 0:
        raise ValueError("jitter_sigma must be >= 0")
    if jitter_sigma == 0 and lo == hi == 1:
        return batch
    rng = RngStream(seed)
    N, F = batch.inputs.shape
    s = rng.uniform_range(lo, hi, N)
    x = batch.inputs
    if jitter_sigma > 0:
        x = x + jitter_sigma * rng.normal((N, F))
    return replace(batch, inputs=s[:, None] * x)
