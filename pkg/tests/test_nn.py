import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from fedsel import nn
from fedsel.errors import DimensionError, NumericError


def test_dense_identity():
    specs = [nn.dense(4, 4)]
    params = nn.ModelParams([(np.eye(4), np.zeros(4))])
    v = np.array([[1.5, -2.0, 0.25, 7.0]])
    assert np.array_equal(nn.forward(params, specs, v), v)


@pytest.mark.parametrize("c", [2, 3, 10])
def test_softmax_equal_logits(c):
    out = nn.forward(nn.ModelParams([]), [nn.softmax_layer()], np.full((3, c), 4.2))
    np.testing.assert_allclose(out, 1.0 / c, rtol=0, atol=1e-15)


def test_two_layer_forward_by_hand():
    # x W1 = [4, 1]; + b1 = [4, -1]; relu = [4, 0]; * W2 + b2 = 4*0.5 + 0*2 + 1 = 3
    specs = [nn.dense(3, 2), nn.relu(), nn.dense(2, 1)]
    params = nn.ModelParams([
        (np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), np.array([0.0, -2.0])),
        (np.array([[0.5], [2.0]]), np.array([1.0])),
    ])
    out = nn.forward(params, specs, np.array([[1.0, -2.0, 3.0]]))
    assert out.shape == (1, 1)
    assert out[0, 0] == 3.0


def test_dimension_error_names_layer():
    specs = [nn.dense(3, 4), nn.relu(), nn.dense(5, 2)]
    params = nn.ModelParams([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((5, 2)), np.zeros(2))])
    with pytest.raises(DimensionError, match="layer 2"):
        nn.forward(params, specs, np.zeros((1, 3)))


def test_softmax_rows_sum_to_one(rng):
    specs = nn.mlp_spec([6, 5, 4])
    params = nn.init_params(specs, rng)
    out = nn.forward(params, specs, rng.standard_normal((50, 6)) * 30)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_reconstruction_zero_case():
    specs = [nn.dense(3, 3)]
    params = nn.ModelParams([(np.zeros((3, 3)), np.zeros(3))])
    x = np.zeros((4, 3))
    loss, _ = nn.loss_and_grad(params, specs, x, None, nn.LossConfig(0.3, "reconstruction-l2"))
    assert loss == 0.0


def test_regularization_term():
    # 0.1 / 2 * (1 + 4 + 9 + 16) = 1.5
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    params = nn.ModelParams([(w, np.zeros(2))])
    assert nn.regularization(params, 0.1) == pytest.approx(1.5, abs=1e-15)
    # zero data term: output reproduces the target exactly
    x = np.zeros((2, 2))
    loss, _ = nn.loss_and_grad(params, [nn.dense(2, 2)], x, x, nn.LossConfig(0.1, "reconstruction-l2"))
    assert loss == pytest.approx(1.5, abs=1e-15)


def test_cross_entropy_nonnegative(rng):
    specs = nn.mlp_spec([5, 4, 3])
    params = nn.init_params(specs, rng)
    loss, _ = nn.loss_and_grad(params, specs, rng.standard_normal((8, 5)),
                               rng.integers(0, 3, 8))
    assert loss >= 0


def test_nonfinite_loss_raises():
    specs = [nn.dense(2, 2)]
    params = nn.ModelParams([(np.array([[np.inf, 0.0], [0.0, 1.0]]), np.zeros(2))])
    with pytest.raises(NumericError, match="layer 0"):
        nn.loss_and_grad(params, specs, np.ones((1, 2)), np.zeros((1, 2)),
                         nn.LossConfig(0.0, "mse"))


GRAD_CASES = {
    "dense-relu-softmax-ce": (lambda: nn.mlp_spec([4, 5, 3]), "cross-entropy", (5, 4), 3),
    "dense-logits-ce": (lambda: nn.mlp_spec([4, 3], output_softmax=False), "cross-entropy", (5, 4), 3),
    "mse": (lambda: nn.mlp_spec([3, 4, 2], output_softmax=False), "mse", (5, 3), None),
    "reconstruction": (lambda: nn.mlp_spec([4, 3, 4], output_softmax=False), "reconstruction-l2",
                       (5, 4), None),
    "conv": (lambda: [nn.conv3x3(2, 3, 4, 4), nn.relu(), nn.dense(48, 3), nn.softmax_layer()],
             "cross-entropy", (5, 32), 3),
    "random-pool": (lambda: [nn.dense(6, 8), nn.relu(), nn.random_pool_layer(5), nn.dense(8, 3)],
                    "mse", (5, 6), None),
    "softmax-mse": (lambda: [nn.dense(4, 3), nn.softmax_layer()], "mse", (5, 4), None),
}


@pytest.mark.parametrize("name", list(GRAD_CASES))
@pytest.mark.parametrize("lam", [0.0, 0.05])
def test_gradient_matches_finite_differences(name, lam):
    make, kind, shape, classes = GRAD_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    specs = make()
    params = nn.init_params(specs, rng)
    params = nn.ModelParams([(w, rng.standard_normal(b.shape) * 0.1) for w, b in params])
    x = rng.standard_normal(shape)
    if classes:
        y = rng.integers(0, classes, shape[0])
    elif kind == "reconstruction-l2":
        y = None
    else:
        y = rng.standard_normal((shape[0], specs[-2].out_dim if specs[-1].kind == nn.SOFTMAX
                                 else specs[-1].out_dim))
    cfg = nn.LossConfig(lam, kind)
    _, g = nn.loss_and_grad(params, specs, x, y, cfg, np.random.default_rng(7))
    num = numeric_grad(params, specs, x, y, cfg, seed=7)
    assert rel_error(g.flatten(), num) < 1e-4


def test_sgd_step_arithmetic():
    p = nn.ModelParams([(np.array([[1.0]]), np.array([1.0]))])
    g = nn.ModelParams([(np.array([[0.5]]), np.array([0.5]))])
    out = nn.sgd_step(p, g, 0.1)
    assert out.layers[0][0][0, 0] == pytest.approx(0.95, abs=1e-15)
    assert nn.sgd_step(p, g, 0.0).equals(p)


def test_sgd_two_steps_equal_summed(rng):
    specs = nn.mlp_spec([3, 2])
    p = nn.init_params(specs, rng)
    g = nn.ModelParams([(rng.standard_normal(w.shape), rng.standard_normal(b.shape)) for w, b in p])
    twice = nn.sgd_step(nn.sgd_step(p, g, 0.01), g, 0.01)
    once = nn.sgd_step(p, g, 0.02)
    np.testing.assert_allclose(twice.flatten(), once.flatten(), rtol=0, atol=1e-14)


def test_sgd_structure_mismatch(rng):
    p = nn.init_params(nn.mlp_spec([3, 2]), rng)
    g = nn.init_params(nn.mlp_spec([3, 4]), rng)
    with pytest.raises(DimensionError):
        nn.sgd_step(p, g, 0.1)


def test_random_pool_full_keep(rng):
    x = rng.standard_normal((4, 7))
    assert np.array_equal(nn.random_pool(x, 7, rng), x)


def test_random_pool_deterministic():
    x = np.arange(40.0).reshape(2, 20) + 1
    a = nn.random_pool(x, 5, np.random.default_rng(3))
    b = nn.random_pool(x, 5, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_random_pool_count(rng):
    out = nn.random_pool(np.ones((30, 20)), 5, rng)
    assert np.all(out.sum(axis=1) == 5)


def test_random_pool_too_many(rng):
    with pytest.raises(ValueError):
        nn.random_pool(np.ones((2, 3)), 4, rng)


def test_random_pool_requires_rng(rng):
    specs = [nn.dense(3, 6), nn.random_pool_layer(2)]
    with pytest.raises(ValueError, match="rng"):
        nn.forward(nn.init_params(specs, rng), specs, np.ones((1, 3)))


def test_random_pool_backward_routes_only_kept():
    specs = [nn.dense(4, 6), nn.random_pool_layer(2), nn.dense(6, 1)]
    params = nn.init_params(specs, np.random.default_rng(0))
    x = np.ones((1, 4))
    _, g = nn.loss_and_grad(params, specs, x, np.zeros((1, 1)), nn.LossConfig(0, "mse"),
                            np.random.default_rng(5))
    mask = nn.random_pool_mask(1, 6, 2, np.random.default_rng(5))[0]
    # first dense: columns of dropped features receive no gradient
    assert np.all(g.layers[0][0][:, ~mask] == 0)
    assert np.all(g.layers[0][1][~mask] == 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=2, max_size=4), st.integers(0, 2**31))
def test_flatten_roundtrip(sizes, seed):
    specs = nn.mlp_spec(sizes)
    p = nn.init_params(specs, np.random.default_rng(seed))
    flat = p.flatten()
    assert flat.size == nn.param_count(specs)
    q = nn.ModelParams.unflatten(flat, specs)
    assert q.equals(p)
    assert np.array_equal(q.flatten(), flat)


def test_param_count_pure_function_of_specs():
    specs = nn.dqre_conv_spec()
    a = nn.init_params(specs, np.random.default_rng(0))
    b = nn.init_params(specs, np.random.default_rng(1))
    assert a.size == b.size == nn.param_count(specs)


def test_dqre_conv_preset_shapes():
    specs = nn.dqre_conv_spec(num_classes=10)
    convs = [s.out_channels for s in specs if s.kind == nn.CONV3X3]
    dense = [s.out_dim for s in specs if s.kind == nn.DENSE]
    assert convs == [24, 18, 12, 6]
    assert dense == [7, 10]
    assert [s.pool_count for s in specs if s.kind == nn.RANDOM_POOL] == [5]
    literal = nn.dqre_conv_spec(literal=True)
    assert [s.out_dim for s in literal if s.kind == nn.DENSE] == [7, 8]
    small = nn.dqre_conv_spec(1, 6, 6, num_classes=10)
    p = nn.init_params(small, np.random.default_rng(0))
    out = nn.forward(p, small, np.random.default_rng(1).random((3, 36)), np.random.default_rng(2))
    assert out.shape == (3, 10)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_init_bounds():
    specs = [nn.dense(10, 20)]
    w, b = nn.init_params(specs, np.random.default_rng(0)).layers[0]
    assert np.abs(w).max() <= np.sqrt(6 / 30)
    assert np.all(b == 0)


def test_forward_deterministic(rng):
    specs = [nn.dense(5, 10), nn.relu(), nn.random_pool_layer(5), nn.dense(10, 3), nn.softmax_layer()]
    p = nn.init_params(specs, rng)
    x = rng.standard_normal((4, 5))
    a = nn.forward(p, specs, x, np.random.default_rng(9))
    b = nn.forward(p, specs, x, np.random.default_rng(9))
    assert np.array_equal(a, b)
