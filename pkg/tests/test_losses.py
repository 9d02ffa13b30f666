import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from boda_dg.errors import LabelOutOfRange, MissingCovariance, SingleDomain, TooFewSamples
from boda_dg.losses import (
    CalibrationTable,
    LossOutput,
    PairStats,
    boda_loss,
    coral_loss,
    coral_multi_domain,
    cross_entropy,
    domain_class_statistics,
    pair_distance,
    total_objective,
)
from boda_dg.numerics import finite_difference_gradient


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b)))


def random_instance(seed, N=None, E=None, D=None, C=None):
    """Random batch where every anchor has at least one cross-domain partner
    most of the time; anchors without one exercise the skip path."""
    rng = np.random.default_rng(seed)
    N = N or int(rng.integers(4, 9))
    E = E or int(rng.integers(2, 9))
    D = D or int(rng.integers(2, 4))
    C = C or int(rng.integers(1, 5))
    while True:
        domains = rng.integers(0, D, N)
        labels = rng.integers(0, C, N)
        if len(np.unique(domains)) >= 2:
            break
    Z = rng.normal(size=(N, E))
    return Z, labels, domains


# --- cross-entropy -----------------------------------------------------------


def test_ce_saturated():
    logits = np.array([[40.0, 0.0, 0.0], [0.0, 0.0, 35.0]])
    assert cross_entropy(logits, [0, 2]).value < 1e-12


def test_ce_uniform_logits():
    out = cross_entropy(np.zeros((5, 10)), [0, 1, 2, 3, 9])
    assert out.value == pytest.approx(math.log(10), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ce_matches_softmax_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 3))
    labels = rng.integers(0, 3, 4)
    out = cross_entropy(logits, labels)
    assert out.value == pytest.approx(oracles.softmax_ce(logits, labels), abs=1e-12)
    ex = np.exp(logits)
    expected = ex / ex.sum(axis=1, keepdims=True)
    expected[np.arange(4), labels] -= 1
    np.testing.assert_allclose(out.grad_logits, expected / 4, atol=1e-12)
    fd = finite_difference_gradient(lambda x: cross_entropy(x, labels).value, logits)
    assert rel_err(out.grad_logits, fd) < 1e-6


def test_ce_shift_invariance():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, 6)
    shifted = logits + rng.normal(size=(6, 1)) * 10
    assert cross_entropy(logits, labels).value == pytest.approx(cross_entropy(shifted, labels).value, abs=1e-12)


def test_ce_bernoulli_form():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(3, 4))
    labels = np.array([0, 3, 1])
    sig = 1 / (1 + np.exp(-logits))
    y = np.eye(4)[labels]
    expected = -(y * np.log(sig) + (1 - y) * np.log(1 - sig)).sum() / 3
    out = cross_entropy(logits, labels, form="bernoulli")
    assert out.value == pytest.approx(expected, abs=1e-12)
    fd = finite_difference_gradient(lambda x: cross_entropy(x, labels, "bernoulli").value, logits)
    assert rel_err(out.grad_logits, fd) < 1e-6


def test_ce_label_out_of_range():
    with pytest.raises(LabelOutOfRange):
        cross_entropy(np.zeros((2, 3)), [0, 3])


# --- statistics ----------------------------------------------------------------


def test_stats_zero_spread():
    v = np.array([1.0, -2.0, 0.5])
    stats = domain_class_statistics(np.stack([v, v]), [0, 0], [0, 0], with_covariance=True, ridge=1e-4)
    e = stats.entry((0, 0))
    np.testing.assert_array_equal(e.mean, v)
    np.testing.assert_allclose(e.cov, 1e-4 * np.eye(3), atol=1e-18)


def test_stats_singleton_means():
    Z = np.array([[0.0, 0.0], [2.0, 2.0]])
    stats = domain_class_statistics(Z, [0, 0], [0, 1])
    assert stats.pairs == [(0, 0), (1, 0)]
    np.testing.assert_array_equal(stats.entry((0, 0)).mean, [0, 0])
    np.testing.assert_array_equal(stats.entry((1, 0)).mean, [2, 2])


@pytest.mark.parametrize("seed", range(5))
def test_stats_match_two_pass(seed):
    Z, labels, domains = random_instance(seed, N=8, E=4)
    stats = domain_class_statistics(Z, labels, domains, with_covariance=True, ridge=1e-4)
    ref = oracles.prototypes(Z, labels, domains, with_cov=True, ridge=1e-4)
    assert stats.pairs == list(ref)
    for p, r in ref.items():
        e = stats.entry(p)
        assert e.count == r["count"]
        np.testing.assert_allclose(e.mean, r["mean"], atol=1e-12)
        np.testing.assert_allclose(e.cov, r["cov"], atol=1e-12)


# --- distances ------------------------------------------------------------------


def _entry(mean, cov=None):
    chol = None if cov is None else np.linalg.cholesky(cov)
    return PairStats(np.asarray(mean, float), 1, cov, chol)


def test_distance_coincident():
    e = _entry([1.0, 2.0], np.eye(2))
    assert pair_distance(np.array([1.0, 2.0]), e, "euclidean") == 0
    assert pair_distance(np.array([1.0, 2.0]), e, "mahalanobis", 3) == 0


def test_mahalanobis_hand_case():
    e = _entry([0.0, 0.0], 4 * np.eye(2))
    assert pair_distance(np.array([2.0, 0.0]), e, "mahalanobis", 1) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_mahalanobis_identity_is_euclidean(seed):
    rng = np.random.default_rng(seed)
    z, m = rng.normal(size=5), rng.normal(size=5)
    e = _entry(m, np.eye(5))
    assert pair_distance(z, e, "mahalanobis", 1) == pytest.approx(pair_distance(z, e, "euclidean"), abs=1e-10)
    s = 0.7
    e2 = _entry(m, s**2 * np.eye(5))
    assert pair_distance(z, e2, "mahalanobis", 1) == pytest.approx(pair_distance(z, e, "euclidean") / s, abs=1e-10)


def test_mahalanobis_needs_covariance():
    with pytest.raises(MissingCovariance):
        pair_distance(np.zeros(2), _entry([1.0, 1.0]), "mahalanobis", 1)


# --- BoDA -------------------------------------------------------------------------


def test_boda_symmetric_configuration_is_ln3():
    # Anchor at the origin, four prototypes at distance 2 in a square.
    delta = 2.0
    protos = np.array([[delta, 0], [-delta, 0], [0, delta], [0, -delta]], float)
    pairs = [(0, 0), (0, 1), (1, 0), (1, 1)]
    # One anchor (0,0) at origin plus filler rows that define the prototypes:
    # build statistics by hand so the anchor itself does not move them.
    from boda_dg.losses import DomainClassStats

    for kind in ("euclidean", "mahalanobis"):
        covs = np.stack([np.eye(2)] * 4)
        stats = DomainClassStats(pairs, protos, np.ones(4, int), covs, np.linalg.cholesky(covs))
        calib = CalibrationTable(1.0, stats.count_map())
        out = boda_loss(np.zeros((1, 2)), [0], [0], stats, calib, kind)
        assert out.value == pytest.approx(math.log(3), abs=1e-9)


def test_boda_dominant_partner():
    from boda_dg.losses import DomainClassStats

    pairs = [(0, 0), (0, 1), (1, 0), (1, 1)]
    z = np.zeros(2)
    protos = np.array([[20, 0], [0, 20], [0, 0], [-20, 0]], float)
    stats = DomainClassStats(pairs, protos, np.ones(4, int))
    out = boda_loss(z[None], [0], [0], stats, CalibrationTable(0.0, stats.count_map()))
    expected = math.log(1 + 2 * math.exp(-20))
    assert out.value == pytest.approx(expected, abs=1e-15)
    assert out.value < 1e-8


def _boda_pair(seed, kind, gamma):
    Z, labels, domains = random_instance(seed)
    with_cov = kind == "mahalanobis"
    stats = domain_class_statistics(Z, labels, domains, with_covariance=with_cov, ridge=1e-2)
    calib = CalibrationTable.from_stats(stats, gamma)
    return Z, labels, domains, stats, calib


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("kind", ["euclidean", "mahalanobis"])
@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
def test_boda_matches_double_loop(seed, kind, gamma):
    Z, labels, domains, stats, calib = _boda_pair(seed, kind, gamma)
    out = boda_loss(Z, labels, domains, stats, calib, kind)
    protos = oracles.prototypes(Z, labels, domains, with_cov=kind == "mahalanobis", ridge=1e-2)
    counts = {p: v["count"] for p, v in protos.items()}
    ref = oracles.boda_value(Z, labels, domains, protos, counts, gamma, kind)
    assert abs(out.value - ref) <= 1e-10


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["euclidean", "mahalanobis"])
def test_boda_gradient_finite_difference(seed, kind):
    Z, labels, domains, stats, calib = _boda_pair(100 + seed, kind, 1.0)
    out = boda_loss(Z, labels, domains, stats, calib, kind)
    fd = finite_difference_gradient(lambda x: boda_loss(x, labels, domains, stats, calib, kind).value, Z)
    assert rel_err(out.grad_Z, fd) < 1e-4


def test_boda_random_instance_n6_e4():
    rng = np.random.default_rng(2024)
    Z = rng.normal(size=(6, 4))
    domains = np.array([0, 1, 2, 0, 1, 2])
    labels = np.array([0, 1, 2, 1, 0, 2])
    stats = domain_class_statistics(Z, labels, domains)
    calib = CalibrationTable.from_stats(stats, 1.0)
    out = boda_loss(Z, labels, domains, stats, calib)
    protos = oracles.prototypes(Z, labels, domains)
    ref = oracles.boda_value(Z, labels, domains, protos, {p: v["count"] for p, v in protos.items()}, 1.0, "euclidean")
    assert abs(out.value - ref) < 1e-10
    fd = finite_difference_gradient(lambda x: boda_loss(x, labels, domains, stats, calib).value, Z)
    assert rel_err(out.grad_Z, fd) < 1e-4


def test_boda_skips_anchor_without_partner():
    Z = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 3.0]])
    labels = np.array([0, 0, 1, 2])
    domains = np.array([0, 1, 0, 1])
    stats = domain_class_statistics(Z, labels, domains)
    out = boda_loss(Z, labels, domains, stats, CalibrationTable(0.0, stats.count_map()))
    assert out.skipped == 2
    np.testing.assert_array_equal(out.grad_Z[2:], 0.0)


def test_boda_single_domain_raises():
    Z = np.zeros((2, 2))
    stats = domain_class_statistics(Z, [0, 1], [0, 0])
    with pytest.raises(SingleDomain):
        boda_loss(Z, [0, 1], [0, 0], stats, CalibrationTable(0.0, stats.count_map()))


def test_boda_weight_scaling_changes_value():
    Z, labels, domains, stats, _ = _boda_pair(7, "euclidean", 0.0)
    protos = oracles.prototypes(Z, labels, domains)
    counts = {p: v["count"] for p, v in protos.items()}

    class Scaled(CalibrationTable):
        def matrix(self, pairs):
            return 2.5 * super().matrix(pairs)

    scaled = boda_loss(Z, labels, domains, stats, Scaled(0.0, counts)).value
    base = boda_loss(Z, labels, domains, stats, CalibrationTable(0.0, counts)).value
    # brute force with every distance multiplied by 2.5
    ref = oracles.boda_value(2.5 * Z, labels, domains, {p: {**v, "mean": [2.5 * m for m in v["mean"]]} for p, v in protos.items()}, counts, 0.0, "euclidean")
    assert scaled == pytest.approx(ref, abs=1e-10)
    assert scaled != pytest.approx(base, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_boda_permutation_invariant(seed, rnd):
    Z, labels, domains, stats, calib = _boda_pair(seed, "euclidean", 1.0)
    perm = list(range(len(labels)))
    rnd.shuffle(perm)
    a = boda_loss(Z, labels, domains, stats, calib).value
    b = boda_loss(Z[perm], labels[perm], domains[perm], stats, calib).value
    assert a == pytest.approx(b, abs=1e-12)


def test_boda_gamma0_matches_table_free_evaluator():
    for seed in range(5):
        Z, labels, domains, stats, calib = _boda_pair(seed, "euclidean", 0.0)
        protos = oracles.prototypes(Z, labels, domains)
        # no calibration table: every weight is one
        ref = oracles.boda_value(Z, labels, domains, protos, {p: 1 for p in protos}, 0.0, "euclidean")
        assert boda_loss(Z, labels, domains, stats, calib).value == pytest.approx(ref, abs=1e-12)


def test_calibration_weights():
    calib = CalibrationTable(1.0, {(0, 0): 10, (1, 0): 40, (1, 1): 100_000})
    assert calib.weight((0, 0), (1, 0)) == 4.0
    assert calib.weight((1, 0), (0, 0)) == 0.25
    assert calib.weight((0, 0), (1, 1)) == 1e3
    assert CalibrationTable(0.0, calib.counts).weight((0, 0), (1, 1)) == 1.0


# --- CORAL ------------------------------------------------------------------------


def test_coral_identical_batches():
    Z = np.random.default_rng(0).normal(size=(5, 3))
    assert coral_loss(Z, Z.copy()).value == 0.0


def test_coral_hand_case():
    out = coral_loss(np.array([[1.0], [-1.0]]), np.array([[2.0], [-2.0]]))
    assert out.value == pytest.approx(9.0, abs=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_coral_gradient(seed):
    rng = np.random.default_rng(seed)
    Z1, Z2 = rng.normal(size=(5, 3)), 1.5 * rng.normal(size=(4, 3))
    out = coral_loss(Z1, Z2)
    fd1 = finite_difference_gradient(lambda x: coral_loss(x, Z2).value, Z1)
    fd2 = finite_difference_gradient(lambda x: coral_loss(Z1, x).value, Z2)
    assert rel_err(out.grad_Z, np.vstack([fd1, fd2])) < 1e-4


def test_coral_multi_domain_gradient():
    rng = np.random.default_rng(5)
    Z = rng.normal(size=(9, 3))
    domains = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    out = coral_multi_domain(Z, domains)
    fd = finite_difference_gradient(lambda x: coral_multi_domain(x, domains).value, Z)
    assert rel_err(out.grad_Z, fd) < 1e-4


def test_coral_too_few():
    with pytest.raises(TooFewSamples):
        coral_loss(np.zeros((1, 2)), np.zeros((3, 2)))


# --- total objective --------------------------------------------------------------


def test_total_objective_arithmetic():
    ce = LossOutput(0.5, grad_logits=np.ones((2, 2)))
    align = LossOutput(1.0, grad_Z=np.ones((2, 3)))
    assert total_objective(ce, align, 1.0).value == 1.5
    zero = total_objective(ce, align, 0.0)
    assert zero.value == ce.value and zero.grad_Z is None
    assert total_objective(ce, align, 2.0).grad_Z[0, 0] == 2.0
