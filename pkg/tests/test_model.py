import numpy as np
import pytest

import oracles
from boda_dg.errors import DimensionMismatch, InvalidDims, NonFiniteGradient
from boda_dg.losses import cross_entropy
from boda_dg.metrics import predict
from boda_dg.model import (
    SGD,
    ModelParams,
    backward,
    forward,
    init_params,
    load_model,
    reinit_classifier,
    save_model,
    sgd_step,
)
from boda_dg.numerics import finite_difference_gradient


def test_shapes():
    p = init_params([4, 8, 3], seed=0)
    assert [W.shape for W in p.weights] == [(8, 4), (3, 8)]
    assert [b.shape for b in p.biases] == [(8,), (3,)]
    assert p.layer_dims == [4, 8, 3]
    assert p.embedding_dim == 8 and p.num_classes == 3 and p.encoder_depth == 1


def test_init_deterministic():
    a, b = init_params([5, 7, 6, 2], 3), init_params([5, 7, 6, 2], 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    c = init_params([5, 7, 6, 2], 4)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_glorot_bounds():
    w = np.concatenate([init_params([32, 32], s).weights[0].ravel() for s in range(10)])
    assert w.size >= 10_000
    assert np.max(np.abs(w)) <= np.sqrt(6 / 64)
    assert abs(w.mean()) < 0.01


@pytest.mark.parametrize("dims", [[3], [3, 0, 2], [0, 2]])
def test_invalid_dims(dims):
    with pytest.raises(InvalidDims):
        init_params(dims, 0)


def test_zero_network():
    p = init_params([3, 4, 5, 2], 0)
    for a in p.arrays():
        a[...] = 0.0
    cache = forward(p, np.random.default_rng(0).normal(size=(6, 3)))
    assert np.all(cache.logits == 0) and np.all(cache.Z == 0)


def test_identity_encoder():
    p = init_params([4, 4, 3], 0)
    p.weights[0][...] = np.eye(4)
    p.biases[0][...] = 0.0
    X = np.random.default_rng(1).normal(size=(5, 4))
    # no ReLU after the last encoder layer, so negative inputs survive
    assert np.array_equal(forward(p, X).Z, X)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_straight_line_oracle(seed):
    rng = np.random.default_rng(seed)
    dims = [int(v) for v in rng.integers(1, 7, size=int(rng.integers(2, 5)))]
    p = init_params(dims, seed)
    for b in p.biases:
        b[...] = rng.normal(size=b.shape)
    X = rng.normal(size=(4, dims[0]))
    Z_ref, logits_ref = oracles.mlp_forward(
        [W.tolist() for W in p.weights], [b.tolist() for b in p.biases], X
    )
    cache = forward(p, X)
    assert np.allclose(cache.Z, Z_ref, rtol=0, atol=1e-12)
    assert np.allclose(cache.logits, logits_ref, rtol=0, atol=1e-12)


def test_forward_dimension_check():
    with pytest.raises(DimensionMismatch):
        forward(init_params([3, 2], 0), np.zeros((2, 4)))


def test_zero_upstream_gives_zero_grads():
    p = init_params([3, 5, 4, 2], 0)
    cache = forward(p, np.ones((3, 3)))
    g = backward(p, cache, np.zeros((3, 2)), np.zeros((3, 4)))
    assert all(np.all(a == 0) for a in g.arrays())


def _loss_with_z_term(p, X, y, R):
    """CE on logits plus a fixed linear functional of Z; exercises both paths."""
    cache = forward(p, X)
    ce = cross_entropy(cache.logits, y)
    return ce.value + float(np.sum(R * cache.Z)), cache, ce


@pytest.mark.parametrize("seed", range(6))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_params([4, 6, 5, 3], seed)
    for b in p.biases:
        b[...] = 0.1 * rng.normal(size=b.shape)
    X = rng.normal(size=(7, 4))
    y = rng.integers(0, 3, 7)
    R = 0.1 * rng.normal(size=(7, 5))
    _, cache, ce = _loss_with_z_term(p, X, y, R)
    grads = backward(p, cache, ce.grad_logits, R)
    for i, (arr, g) in enumerate(zip(p.arrays(), grads.arrays())):

        def f(v, i=i):
            q = p.copy()
            q.arrays()[i][...] = v
            return _loss_with_z_term(q, X, y, R)[0]

        num = finite_difference_gradient(f, arr)
        err = np.max(np.abs(num - g)) / max(1e-8, np.max(np.abs(num)), np.max(np.abs(g)))
        assert err < 1e-4, (i, err)


def test_last_layer_closed_form():
    rng = np.random.default_rng(3)
    p = init_params([3, 4, 2], 0)
    cache = forward(p, rng.normal(size=(5, 3)))
    G = rng.normal(size=(5, 2))
    g = backward(p, cache, G)
    assert np.allclose(g.weights[-1], G.T @ cache.Z, atol=1e-14)
    assert np.allclose(g.biases[-1], G.sum(axis=0), atol=1e-14)


def test_frozen_layers_get_zero_grads():
    p = init_params([3, 4, 4, 2], 0)
    cache = forward(p, np.ones((2, 3)))
    g = backward(p, cache, np.ones((2, 2)), frozen_layers=2)
    assert np.all(g.weights[0] == 0) and np.all(g.weights[1] == 0)
    assert np.any(g.weights[2] != 0)


def test_backward_shape_checks():
    p = init_params([3, 4, 2], 0)
    cache = forward(p, np.ones((2, 3)))
    with pytest.raises(DimensionMismatch):
        backward(p, cache, np.ones((2, 3)))
    with pytest.raises(DimensionMismatch):
        backward(p, cache, None, np.ones((2, 5)))


def test_sgd_zero_lr():
    p = init_params([3, 2], 0)
    before = p.copy()
    g = init_params([3, 2], 1)
    sgd_step(p, g, 0.0, 0.9, SGD())
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), before.arrays()))


def test_sgd_plain_step():
    p = init_params([3, 2], 0)
    before = p.copy()
    g = init_params([3, 2], 1)
    SGD(lr=0.1, momentum=0.0).step(p, g)
    for a, b, gg in zip(p.arrays(), before.arrays(), g.arrays()):
        assert np.array_equal(a, b - 0.1 * gg)


def test_sgd_momentum_accumulates():
    p = ModelParams([np.zeros((1, 1))], [np.zeros(1)])
    g = ModelParams([np.ones((1, 1))], [np.zeros(1)])
    opt = SGD(lr=1.0, momentum=0.5)
    opt.step(p, g)
    opt.step(p, g)
    # v1 = 1, v2 = 1.5
    assert p.weights[0][0, 0] == -2.5


def test_quadratic_bowl():
    w0 = np.array([0.6, 0.8])
    p = ModelParams([w0.reshape(1, 2).copy()], [np.zeros(1)])
    opt = SGD(lr=0.1, momentum=0.9)
    norms = []
    for _ in range(150):
        g = ModelParams([2.0 * p.weights[0]], [np.zeros(1)])
        opt.step(p, g)
        norms.append(np.linalg.norm(p.weights[0]))
    # heavy-ball on f = |w|^2: w_{t+1} = (1.9 - 0.2) w_t - 0.9 w_{t-1}
    prev, cur = 1.0, 1.0 - 0.2
    ref = [cur]
    for _ in range(149):
        prev, cur = cur, 1.7 * cur - 0.9 * prev
        ref.append(abs(cur))
    assert np.allclose(norms, ref, rtol=1e-9, atol=1e-15)
    # the contraction rate is sqrt(0.9) per step, so 100 steps leave ~3e-3
    assert norms[99] < 1e-2
    assert norms[149] < 1e-3


def test_sgd_rejects_nonfinite():
    p = init_params([2, 2], 0)
    g = init_params([2, 2], 0)
    g.weights[0][0, 0] = np.nan
    with pytest.raises(NonFiniteGradient):
        SGD().step(p, g)


def test_sgd_frozen_layers_untouched():
    p = init_params([3, 4, 2], 0)
    before = p.copy()
    SGD(lr=0.5).step(p, init_params([3, 4, 2], 9), frozen_layers=1)
    assert np.array_equal(p.weights[0], before.weights[0])
    assert not np.array_equal(p.weights[1], before.weights[1])


def test_separable_training_reaches_full_accuracy():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-2, 0.5, (40, 2)), rng.normal(2, 0.5, (40, 2))])
    y = np.repeat([0, 1], 40)
    p = init_params([2, 8, 2], 0)
    opt = SGD(lr=0.1, momentum=0.9)
    for _ in range(200):
        cache = forward(p, X)
        ce = cross_entropy(cache.logits, y)
        opt.step(p, backward(p, cache, ce.grad_logits))
    assert np.array_equal(predict(p, X), y)


def test_reinit_classifier_keeps_encoder():
    p = init_params([3, 5, 4, 2], 0)
    q = reinit_classifier(p, 7)
    assert all(np.array_equal(a, b) for a, b in zip(p.weights[:-1], q.weights[:-1]))
    assert not np.array_equal(p.weights[-1], q.weights[-1])
    assert np.all(q.biases[-1] == 0)


def test_save_load_round_trip(tmp_path):
    p = init_params([3, 5, 2], 0)
    path = tmp_path / "m.json"
    save_model(p, path, {"seed": 0})
    q, meta = load_model(path)
    assert meta == {"seed": 0}
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    text = path.read_bytes()
    save_model(q, path, {"seed": 0})
    assert path.read_bytes() == text


def test_load_rejects_wrong_sizes():
    obj = init_params([3, 2], 0).to_dict()
    obj["weights"][0] = obj["weights"][0][:-1]
    with pytest.raises(DimensionMismatch):
        ModelParams.from_dict(obj)
