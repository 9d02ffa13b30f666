from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.typing import NDArray

from ..errors import DimensionMismatch, LabelOutOfRange, ParseError


@dataclass(frozen=True)
class Sample:
    domain: int
    label: int
    features: NDArray


@dataclass(eq=False)
class Dataset:
    """Labelled feature vectors tagged with their source domain.

    Stored column-wise: ``features`` is (n, F), ``domains`` and ``labels`` are
    int arrays of length n. ``counts[d, c]`` is recomputed on construction and
    never stored independently of the samples.
    """

    features: NDArray
    domains: NDArray
    labels: NDArray
    num_domains: int = 0
    num_classes: int = 0
    counts: NDArray = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.domains = np.asarray(self.domains, dtype=np.int64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.domains.shape[0]
        if self.features.ndim != 2:
            self.features = self.features.reshape(n, -1)
        if self.features.shape[0] != n or self.labels.shape[0] != n:
            raise DimensionMismatch("features, domains and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise ParseError("non-finite feature value")
        if n and (self.domains.min() < 0 or self.labels.min() < 0):
            raise LabelOutOfRange("negative domain or class index")
        inferred_d = int(self.domains.max()) + 1 if n else 1
        inferred_c = int(self.labels.max()) + 1 if n else 1
        self.num_domains = max(int(self.num_domains), inferred_d)
        self.num_classes = max(int(self.num_classes), inferred_c)
        self.counts = np.zeros((self.num_domains, self.num_classes), dtype=np.int64)
        np.add.at(self.counts, (self.domains, self.labels), 1)
        self.features.setflags(write=False)
        self.domains.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return int(self.domains.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def sample(self, i: int) -> Sample:
        return Sample(int(self.domains[i]), int(self.labels[i]), self.features[i])

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def populated_pairs(self) -> list[tuple[int, int]]:
        """The set M of (domain, class) pairs holding at least one sample."""
        d, c = np.nonzero(self.counts)
        return [(int(a), int(b)) for a, b in zip(d, c)]

    def present_domains(self) -> list[int]:
        return [int(d) for d in np.unique(self.domains)]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.domains[idx],
            self.labels[idx],
            num_domains=self.num_domains,
            num_classes=self.num_classes,
        )

    def indices_of_domains(self, domains) -> NDArray:
        return np.nonzero(np.isin(self.domains, list(domains)))[0]


def _format_float(x: float) -> str:
    return repr(float(x))


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    buf.write(f"# num_domains={ds.num_domains},num_classes={ds.num_classes}\n")
    header = ["domain", "label"] + [f"f{j}" for j in range(ds.feature_dim)]
    buf.write(",".join(header) + "\n")
    for i in range(len(ds)):
        row = [str(int(ds.domains[i])), str(int(ds.labels[i]))]
        row.extend(_format_float(v) for v in ds.features[i])
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dataset_to_csv(ds), encoding="utf-8", newline="\n")


def _parse_meta(line: str) -> dict[str, int]:
    meta = {}
    for part in line.lstrip("#").strip().split(","):
        if not part.strip():
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise ParseError(f"bad metadata entry {part!r}")
        try:
            meta[key.strip()] = int(value)
        except ValueError:
            raise ParseError(f"bad metadata value {part!r}") from None
    return meta


def load_dataset(path) -> Dataset:
    """Read a dataset CSV.

    An optional leading ``# num_domains=..,num_classes=..`` line overrides the
    counts inferred from the largest indices present.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    meta: dict[str, int] = {}
    while lines and lines[0].startswith("#"):
        meta.update(_parse_meta(lines.pop(0)))
    if not lines:
        raise ParseError("missing header")
    rows = list(csv.reader(lines))
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["domain", "label"]:
        raise ParseError("header must start with 'domain,label'")
    dim = len(header) - 2
    if header[2:] != [f"f{j}" for j in range(dim)]:
        raise ParseError("feature columns must be named f0..f{F-1}")

    domains, labels, feats = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 2:
            raise DimensionMismatch(f"line {lineno}: expected {dim + 2} fields, got {len(row)}")
        try:
            d, c = int(row[0]), int(row[1])
            x = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if d < 0 or c < 0:
            raise ParseError(f"line {lineno}: negative index")
        if not all(math.isfinite(v) for v in x):
            raise ParseError(f"line {lineno}: non-finite feature")
        domains.append(d)
        labels.append(c)
        feats.append(x)

    features = np.array(feats, dtype=np.float64).reshape(len(feats), dim)
    return Dataset(
        features,
        np.array(domains, dtype=np.int64),
        np.array(labels, dtype=np.int64),
        num_domains=meta.get("num_domains", 0),
        num_classes=meta.get("num_classes", 0),
    )
