"""Training objectives: cross-entropy, BoDA alignment, CORAL and their sum.

Every loss returns a :class:`LossOutput` carrying its value and the analytic
gradient with respect to whatever it consumes (logits and/or embeddings).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from .errors import (
    DimensionMismatch,
    LabelOutOfRange,
    MissingCovariance,
    NotPositiveDefinite,
    SingleDomain,
    TooFewSamples,
)
from .numerics import cholesky_factor, solve_with_factor

log = logging.getLogger(__name__)

Pair = tuple[int, int]

WEIGHT_MIN = 1e-3
WEIGHT_MAX = 1e3
RIDGE_MAX = 1e-1


@dataclass
class LossOutput:
    value: float
    grad_logits: NDArray | None = None
    grad_Z: NDArray | None = None
    skipped: int = 0  # anchors (BoDA) or domain pairs (CORAL) left out


# ---------------------------------------------------------------------------
# Cross-entropy


def _log_softmax(logits: NDArray) -> NDArray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: NDArray, labels, form: str = "softmax") -> LossOutput:
    """Mean cross-entropy over the batch.

    ``form="softmax"`` is the usual multiclass loss. ``form="bernoulli"`` treats
    every logit as an independent sigmoid against the one-hot target and sums
    the binary log-losses per sample.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    N, C = logits.shape
    if N < 1:
        raise DimensionMismatch("empty batch")
    if labels.shape != (N,):
        raise DimensionMismatch("labels must have one entry per row of logits")
    if labels.min() < 0 or labels.max() >= C:
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    rows = np.arange(N)

    if form == "softmax":
        logp = _log_softmax(logits)
        value = -logp[rows, labels].sum() / N
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return LossOutput(float(value), grad_logits=grad / N)

    if form == "bernoulli":
        onehot = np.zeros_like(logits)
        onehot[rows, labels] = 1.0
        # log sigma(x) = -softplus(-x), log(1 - sigma(x)) = -softplus(x)
        softplus_pos = np.logaddexp(0.0, logits)
        softplus_neg = np.logaddexp(0.0, -logits)
        value = (onehot * softplus_neg + (1.0 - onehot) * softplus_pos).sum() / N
        sig = np.exp(-softplus_neg)
        return LossOutput(float(value), grad_logits=(sig - onehot) / N)

    raise ValueError(f"unknown cross-entropy form {form!r}")


# ---------------------------------------------------------------------------
# Domain-class statistics


class PairStats(NamedTuple):
    mean: NDArray
    count: int
    cov: NDArray | None
    chol: NDArray | None


@dataclass
class DomainClassStats:
    """Per-(domain, class) prototypes for the populated pairs, sorted by key."""

    pairs: list[Pair]
    means: NDArray  # (P, E)
    counts: NDArray  # (P,)
    covs: NDArray | None = None  # (P, E, E), ridge already added
    chols: NDArray | None = None  # lower Cholesky factors of covs
    ridges: NDArray | None = None  # ridge actually used per pair
    index: dict[Pair, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {p: i for i, p in enumerate(self.pairs)}

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.index

    @property
    def domains(self) -> list[int]:
        return sorted({d for d, _ in self.pairs})

    def entry(self, pair: Pair) -> PairStats:
        i = self.index[tuple(pair)]
        cov = None if self.covs is None else self.covs[i]
        chol = None if self.chols is None else self.chols[i]
        return PairStats(self.means[i], int(self.counts[i]), cov, chol)

    def count_map(self) -> dict[Pair, int]:
        return {p: int(n) for p, n in zip(self.pairs, self.counts)}


def _factor_with_ridge(cov: NDArray, ridge: float) -> tuple[NDArray, NDArray, float]:
    E = cov.shape[0]
    eps = ridge
    while True:
        S = cov + eps * np.eye(E)
        try:
            return S, cholesky_factor(S), eps
        except NotPositiveDefinite:
            if eps >= RIDGE_MAX:
                raise
            eps = min(eps * 10.0, RIDGE_MAX)
            log.warning("covariance not positive definite, raising ridge to %g", eps)


def domain_class_statistics(
    Z: NDArray, labels, domains, with_covariance: bool = False, ridge: float = 1e-4
) -> DomainClassStats:
    """Prototype (mean), count and optional ridged covariance for each populated pair.

    Covariances are unbiased (``n - 1``); a singleton pair gets the zero
    matrix before the ridge. If a ridged covariance fails Cholesky the ridge
    is multiplied by 10 until it reaches 0.1.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    domains = np.asarray(domains, dtype=np.int64)
    N, E = Z.shape
    if N < 1:
        raise DimensionMismatch("empty batch")

    key = domains * (int(labels.max()) + 1) + labels
    uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    P = uniq.size
    ncls = int(labels.max()) + 1
    pairs = [(int(k // ncls), int(k % ncls)) for k in uniq]
    sums = np.zeros((P, E))
    np.add.at(sums, inverse, Z)
    means = sums / counts[:, None]

    covs = chols = ridges = None
    if with_covariance:
        covs = np.empty((P, E, E))
        chols = np.empty((P, E, E))
        ridges = np.empty(P)
        centered = Z - means[inverse]
        for p in range(P):
            rows = centered[inverse == p]
            cov = rows.T @ rows / (counts[p] - 1) if counts[p] > 1 else np.zeros((E, E))
            covs[p], chols[p], ridges[p] = _factor_with_ridge(cov, ridge)
    return DomainClassStats(pairs, means, counts.astype(np.int64), covs, chols, ridges)


# ---------------------------------------------------------------------------
# Calibration weights


@dataclass
class CalibrationTable:
    """``weight(a, b) = clip((N_b / N_a) ** gamma, 1e-3, 1e3)``.

    ``a`` is the anchor's own (domain, class) pair and ``b`` the pair whose
    prototype it is compared against.
    """

    gamma: float
    counts: dict[Pair, int]

    @classmethod
    def from_stats(cls, stats: DomainClassStats, gamma: float = 1.0) -> "CalibrationTable":
        return cls(gamma, stats.count_map())

    @classmethod
    def from_count_table(cls, table: NDArray, gamma: float = 1.0) -> "CalibrationTable":
        d, c = np.nonzero(table)
        return cls(gamma, {(int(a), int(b)): int(table[a, b]) for a, b in zip(d, c)})

    def weight(self, anchor: Pair, target: Pair) -> float:
        if self.gamma == 0:
            return 1.0
        ratio = self.counts[tuple(target)] / self.counts[tuple(anchor)]
        return float(np.clip(ratio**self.gamma, WEIGHT_MIN, WEIGHT_MAX))

    def matrix(self, pairs: list[Pair]) -> NDArray:
        """(P, P) weights between every pair of ``pairs``: rows anchor, cols target."""
        n = np.array([self.counts[tuple(p)] for p in pairs], dtype=np.float64)
        if self.gamma == 0:
            return np.ones((n.size, n.size))
        return np.clip((n[None, :] / n[:, None]) ** self.gamma, WEIGHT_MIN, WEIGHT_MAX)


# ---------------------------------------------------------------------------
# Distances


def pair_distance(z: NDArray, entry: PairStats, kind: str = "euclidean", anchor_count: int = 1) -> float:
    """Distance from one embedding to one domain-class prototype.

    ``mahalanobis`` is ``sqrt(u^T S^-1 u) / anchor_count`` with ``u = z - mean``
    and ``S`` the ridged covariance stored in ``entry``.
    """
    u = np.asarray(z, dtype=np.float64) - entry.mean
    if kind == "euclidean":
        return float(np.sqrt(u @ u))
    if kind == "mahalanobis":
        if entry.chol is None:
            raise MissingCovariance("mahalanobis distance needs covariance statistics")
        if anchor_count < 1:
            raise ValueError("anchor_count must be >= 1")
        q = float(u @ solve_with_factor(entry.chol, u))
        return float(np.sqrt(max(q, 0.0))) / anchor_count
    raise ValueError(f"unknown distance kind {kind!r}")


def _distance_matrix(Z: NDArray, stats: DomainClassStats, kind: str, anchor_counts: NDArray):
    """Distances (N, P) and their gradients w.r.t. Z, shape (N, P, E)."""
    U = Z[:, None, :] - stats.means[None, :, :]
    if kind == "euclidean":
        dist = np.sqrt(np.einsum("npe,npe->np", U, U))
        safe = np.where(dist > 0, dist, 1.0)
        grad = np.where(dist[..., None] > 0, U / safe[..., None], 0.0)
        return dist, grad
    if kind == "mahalanobis":
        if stats.chols is None:
            raise MissingCovariance("mahalanobis distance needs covariance statistics")
        N, P, E = U.shape
        SinvU = np.empty_like(U)
        for p in range(P):
            SinvU[:, p, :] = solve_with_factor(stats.chols[p], U[:, p, :].T).T
        r = np.sqrt(np.maximum(np.einsum("npe,npe->np", U, SinvU), 0.0))
        scale = 1.0 / anchor_counts[:, None]
        safe = np.where(r > 0, r, 1.0)
        grad = np.where(r[..., None] > 0, SinvU * (scale / safe)[..., None], 0.0)
        return r * scale, grad
    raise ValueError(f"unknown distance kind {kind!r}")


# ---------------------------------------------------------------------------
# BoDA


def boda_loss(
    Z: NDArray,
    labels,
    domains,
    stats: DomainClassStats,
    calib: CalibrationTable,
    kind: str = "euclidean",
) -> LossOutput:
    """Balanced domain-class alignment loss and its gradient w.r.t. ``Z``.

    For anchor ``i`` in pair ``(d_i, c_i)`` each other domain ``d`` that has
    class ``c_i`` contributes::

        w[a, (d, c_i)] * dist(z_i, psi[d, c_i])
            + logsumexp_{q in M, q != a} ( -w[a, q] * dist(z_i, psi[q]) )

    scaled by ``1 / (|D| - 1)``. The result is averaged over anchors that
    have at least one such partner; the rest are counted in ``skipped``.
    ``stats`` and ``calib`` are treated as constants (stop-gradient).
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    domains = np.asarray(domains, dtype=np.int64)
    N, E = Z.shape
    if stats.means.shape[1] != E:
        raise DimensionMismatch("embedding and prototype dimensions differ")
    n_domains = len(stats.domains)
    if n_domains < 2:
        raise SingleDomain("alignment needs at least two domains")

    try:
        anchor_idx = np.array([stats.index[(int(d), int(c))] for d, c in zip(domains, labels)])
    except KeyError as exc:
        raise DimensionMismatch(f"anchor pair {exc.args[0]} missing from statistics") from None
    pair_dom = np.array([d for d, _ in stats.pairs])
    pair_cls = np.array([c for _, c in stats.pairs])

    dist, dgrad = _distance_matrix(Z, stats, kind, stats.counts[anchor_idx].astype(np.float64))
    W = calib.matrix(stats.pairs)[anchor_idx]  # (N, P)
    wd = W * dist

    own = np.arange(len(stats.pairs))[None, :] == anchor_idx[:, None]
    positive = (pair_cls[None, :] == labels[:, None]) & (pair_dom[None, :] != domains[:, None])
    k = positive.sum(axis=1)
    valid = k > 0
    K = int(valid.sum())
    skipped = N - K
    if skipped:
        log.debug("%d of %d anchors have no cross-domain partner", skipped, N)
    if K == 0:
        return LossOutput(0.0, grad_Z=np.zeros_like(Z), skipped=skipped)

    neg = np.where(own, -np.inf, -wd)
    m = neg.max(axis=1, keepdims=True)
    ex = np.exp(neg - m)
    denom = ex.sum(axis=1, keepdims=True)
    lse = (m + np.log(denom))[:, 0]
    soft = ex / denom  # zero on the anchor's own pair

    per_anchor = (np.where(positive, wd, 0.0).sum(axis=1) + k * lse) / (n_domains - 1)
    value = per_anchor[valid].sum() / K

    # d/dz [w_pos d_pos] - k * sum_q soft_q w_q d/dz d_q
    coef = np.where(positive, W, 0.0) - k[:, None] * soft * W
    coef[~valid] = 0.0
    grad = np.einsum("np,npe->ne", coef, dgrad) / ((n_domains - 1) * K)
    return LossOutput(float(value), grad_Z=grad, skipped=skipped)


# ---------------------------------------------------------------------------
# CORAL


def _coral_pair(Z1: NDArray, Z2: NDArray) -> tuple[float, NDArray, NDArray]:
    n1, E = Z1.shape
    n2 = Z2.shape[0]
    X1 = Z1 - Z1.mean(axis=0)
    X2 = Z2 - Z2.mean(axis=0)
    diff = X1.T @ X1 / (n1 - 1) - X2.T @ X2 / (n2 - 1)
    scale = 4.0 * E * E
    value = float((diff * diff).sum() / scale)
    G = 2.0 * diff / scale  # dL/dC1, symmetric
    return value, 2.0 / (n1 - 1) * X1 @ G, -2.0 / (n2 - 1) * X2 @ G


def coral_loss(Z_source: NDArray, Z_target: NDArray) -> LossOutput:
    """``||C_s - C_t||_F^2 / (4 E^2)`` with unbiased covariances.

    The gradient is returned stacked: rows of ``Z_source`` first, then
    ``Z_target``.
    """
    Z1 = np.asarray(Z_source, dtype=np.float64)
    Z2 = np.asarray(Z_target, dtype=np.float64)
    if Z1.shape[0] < 2 or Z2.shape[0] < 2:
        raise TooFewSamples("CORAL needs at least two samples per side")
    if Z1.shape[1] != Z2.shape[1]:
        raise DimensionMismatch("embedding dimensions differ")
    value, g1, g2 = _coral_pair(Z1, Z2)
    return LossOutput(value, grad_Z=np.vstack([g1, g2]))


def coral_multi_domain(Z: NDArray, domains) -> LossOutput:
    """CORAL averaged over all pairs of domains in the batch with >= 2 samples."""
    Z = np.asarray(Z, dtype=np.float64)
    domains = np.asarray(domains, dtype=np.int64)
    present = [d for d in np.unique(domains) if (domains == d).sum() >= 2]
    skipped = len(np.unique(domains)) - len(present)
    grad = np.zeros_like(Z)
    if len(present) < 2:
        return LossOutput(0.0, grad_Z=grad, skipped=skipped)
    masks = {d: domains == d for d in present}
    total, n_pairs = 0.0, 0
    for i, a in enumerate(present):
        for b in present[i + 1 :]:
            value, g1, g2 = _coral_pair(Z[masks[a]], Z[masks[b]])
            total += value
            grad[masks[a]] += g1
            grad[masks[b]] += g2
            n_pairs += 1
    return LossOutput(total / n_pairs, grad_Z=grad / n_pairs, skipped=skipped)


# ---------------------------------------------------------------------------


def total_objective(ce: LossOutput, align: LossOutput, lam: float = 1.0) -> LossOutput:
    """``ce + lam * align``; with ``lam == 0`` the alignment term is dropped entirely."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        return LossOutput(ce.value, grad_logits=ce.grad_logits, grad_Z=None)
    grad_Z = None if align.grad_Z is None else lam * align.grad_Z
    return LossOutput(ce.value + lam * align.value, grad_logits=ce.grad_logits, grad_Z=grad_Z)
