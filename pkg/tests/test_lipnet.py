import json

import numpy as np
import pytest

from emdfit import autodiff as ad
from emdfit import lipnet
from emdfit.errors import ConfigError
from emdfit.lipnet import (DenseLayer, LipschitzMLP, constrain_weights,
                           group_sort, lipschitz_ratio_check, load_checkpoint,
                           op_norm_inf_inf, op_norm_p_inf, save_checkpoint)


# -- group sort ---------------------------------------------------------------

def test_group_sort_pairs():
    assert np.array_equal(group_sort([3.0, 1.0, 4.0, 1.0], 2), [1, 3, 1, 4])


def test_group_sort_sorted_identity():
    assert np.array_equal(group_sort([1.0, 2.0, 3.0, 4.0], 4), [1, 2, 3, 4])


def test_group_sort_full():
    assert np.array_equal(group_sort([5.0, -2.0, 0.0], 3), [-2, 0, 5])


def test_group_sort_bad_length():
    with pytest.raises(ad.AutodiffError):
        group_sort([1.0, 2.0, 3.0], 2)


def test_group_sort_is_permutation_within_groups():
    rng = np.random.default_rng(0)
    v = rng.normal(size=12)
    out = group_sort(v, 3)
    for k in range(4):
        assert sorted(v[3 * k:3 * k + 3]) == list(out[3 * k:3 * k + 3])


@pytest.mark.parametrize("p", [1, 2, np.inf])
def test_group_sort_is_1_lipschitz_all_p(p):
    rng = np.random.default_rng(1)
    for _ in range(200):
        u = rng.normal(size=8)
        v = rng.normal(size=8)
        du = np.linalg.norm(group_sort(u, 2) - group_sort(v, 2), ord=p)
        dv = np.linalg.norm(u - v, ord=p)
        assert du <= dv + 1e-12


# -- operator norms -----------------------------------------------------------

def test_norm_inf_inf_examples():
    assert op_norm_inf_inf([[1, 2], [3, -4]]) == 7.0
    assert op_norm_inf_inf(np.eye(3)) == 1.0
    assert op_norm_inf_inf(np.zeros((2, 2))) == 0.0


def test_norm_p_inf_examples():
    assert op_norm_p_inf([[3, 4]], 2) == 5.0
    assert op_norm_p_inf(np.eye(2), 2) == 1.0
    assert op_norm_p_inf([[1, 1], [2, 0]], 1) == 2.0


def test_norm_matches_operator_definition():
    # ||W||_{p,inf} = sup ||Wx||_inf / ||x||_p, probed by random x
    rng = np.random.default_rng(2)
    W = rng.normal(size=(4, 3))
    for p in [1, 2, np.inf]:
        claimed = op_norm_p_inf(W, p)
        best = 0.0
        for _ in range(2000):
            x = rng.normal(size=3)
            best = max(best, np.max(np.abs(W @ x)) / np.linalg.norm(x, ord=p))
        assert best <= claimed + 1e-9
        assert best >= 0.95 * claimed  # sup nearly attained


# -- weight projection --------------------------------------------------------

def test_constrain_scales_down():
    layer = DenseLayer(W=np.array([[1.0, 1.0], [0.25, 0.25]]),
                       b=np.zeros(2))
    out = constrain_weights(layer)
    assert np.array_equal(out.W[0], [0.5, 0.5])
    assert op_norm_inf_inf(out.W) <= 1 + 1e-9


def test_constrain_leaves_feasible_unchanged():
    W = np.array([[0.25, 0.25], [0.1, -0.2]])
    layer = DenseLayer(W=W.copy(), b=np.zeros(2))
    out = constrain_weights(layer)
    assert np.array_equal(out.W, W)


def test_constrain_first_layer_p2():
    layer = DenseLayer(W=np.array([[3.0, 4.0]]), b=np.zeros(1),
                       is_first=True, input_norm_p=2)
    out = constrain_weights(layer)
    np.testing.assert_allclose(out.W, [[0.6, 0.8]], rtol=0, atol=1e-15)


@pytest.mark.parametrize("per_row", [False, True])
def test_constrain_idempotent_bitwise(per_row):
    rng = np.random.default_rng(3)
    for k in range(50):
        layer = DenseLayer(W=rng.normal(scale=rng.uniform(0.1, 3),
                                        size=(5, 4)),
                           b=rng.normal(size=5),
                           is_first=bool(k % 2), input_norm_p=2)
        once = constrain_weights(layer, per_row=per_row)
        twice = constrain_weights(once, per_row=per_row)
        assert np.array_equal(once.W, twice.W)
        assert np.array_equal(once.b, layer.b)
        assert once.operator_norm() <= 1 + 1e-9


def test_per_row_constraint_also_bounds_operator_norm():
    rng = np.random.default_rng(4)
    for _ in range(20):
        layer = DenseLayer(W=rng.normal(scale=2, size=(6, 6)), b=np.zeros(6))
        out = constrain_weights(layer, per_row=True)
        assert op_norm_inf_inf(out.W) <= 1 + 1e-9


# -- forward -----------------------------------------------------------------

def test_zero_network_outputs_zero():
    net = LipschitzMLP.create(2, hidden=(4, 4), group_size=2, seed=0,
                              zero_head=True)
    rng = np.random.default_rng(5)
    assert net.forward(rng.normal(size=2)) == 0.0
    assert np.array_equal(net.forward(rng.normal(size=(7, 2))), np.zeros(7))


def test_single_affine_layer():
    layer = DenseLayer(W=np.array([[1.0, 0.0]]), b=np.array([0.5]),
                       is_first=True, input_norm_p=2)
    net = LipschitzMLP([layer], group_size=1)
    assert net.forward(np.array([2.0, 9.0])) == 2.5


def test_forward_dimension_mismatch():
    net = LipschitzMLP.create(2, hidden=(4,), group_size=2, seed=0)
    with pytest.raises(ConfigError):
        net.forward(np.zeros(3))


def test_hidden_width_group_size_mismatch():
    with pytest.raises(ConfigError):
        LipschitzMLP.create(2, hidden=(5, 4), group_size=2, seed=0)


def test_random_net_lipschitz_in_l2():
    rng = np.random.default_rng(6)
    net = LipschitzMLP.create(2, hidden=(8, 8, 8), group_size=2, seed=11,
                              zero_head=False)
    for _ in range(300):
        x, y = rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2)
        lhs = abs(net.forward(x) - net.forward(y))
        assert lhs <= np.linalg.norm(x - y) + 1e-12


def test_batch_forward_matches_single():
    # BLAS reorders small matmuls by shape, so agreement is to rounding,
    # not bitwise
    net = LipschitzMLP.create(2, hidden=(6, 6), group_size=2, seed=7,
                              zero_head=False)
    rng = np.random.default_rng(8)
    X = rng.normal(size=(5, 2))
    batch = net.forward(X)
    singles = np.array([net.forward(x) for x in X])
    np.testing.assert_allclose(batch, singles, rtol=0, atol=1e-12)


def test_forward_unconstrained_weights_still_bounded():
    # raw weights way outside the ball: the in-forward projection holds
    layer1 = DenseLayer(W=np.array([[30.0, 40.0], [5.0, 0.0]]),
                        b=np.zeros(2), is_first=True, input_norm_p=2)
    layer2 = DenseLayer(W=np.array([[7.0, -9.0]]), b=np.array([1.0]))
    net = LipschitzMLP([layer1, layer2], group_size=2)
    assert lipschitz_ratio_check(net, 5000, seed=1) <= 1 + 1e-6


def test_ratio_check_zero_net():
    net = LipschitzMLP.create(3, hidden=(4,), group_size=2, seed=0,
                              zero_head=True)
    assert lipschitz_ratio_check(net, 100, seed=0) == 0.0


def test_ratio_check_constrained_many_pairs():
    net = LipschitzMLP.create(2, hidden=(16, 16), group_size=2, seed=9,
                              zero_head=False)
    assert lipschitz_ratio_check(net, 100_000, seed=2) <= 1 + 1e-6


def test_linear_functional_ratio_approaches_one():
    # first layer one row of unit L2 norm, single pass-through layer above
    a = np.array([0.6, 0.8])
    layers = [DenseLayer(W=a[None, :], b=np.zeros(1), is_first=True,
                         input_norm_p=2),
              DenseLayer(W=np.array([[1.0]]), b=np.zeros(1))]
    net = LipschitzMLP(layers, group_size=1)
    x = np.array([1.3, -0.4])
    for t in [0.1, 1.0, 2.0]:
        y = x + t * a
        ratio = abs(net.forward(x) - net.forward(y)) / t
        assert ratio == pytest.approx(1.0, abs=1e-12)


def test_forward_gradients_match_finite_differences():
    net = LipschitzMLP.create(2, hidden=(8, 8), group_size=2, seed=10,
                              zero_head=False)
    rng = np.random.default_rng(12)
    for _ in range(5):
        err = ad.finite_diff_check(lambda v: net.forward_graph(v),
                                   rng.uniform(-1, 1, 2), 1e-5)
        assert err <= 1e-4


def test_operator_norm_invariant_after_constrain_all_layers():
    net = LipschitzMLP.create(3, hidden=(8, 8), group_size=2, seed=13,
                              zero_head=False)
    for layer in net.constrained().layers:
        assert layer.operator_norm() <= 1 + 1e-9


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_roundtrip_exact(tmp_path):
    net = LipschitzMLP.create(2, hidden=(6, 4), group_size=2, seed=14,
                              zero_head=False)
    net.input_shift = np.array([0.123456789123456789, -0.5])
    path = tmp_path / "net.json"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.group_size == net.group_size
    assert loaded.p == net.p
    assert loaded.per_row == net.per_row
    assert np.array_equal(loaded.input_shift, net.input_shift)
    for a, b in zip(loaded.layers, net.layers):
        assert np.array_equal(a.W, b.W)
        assert np.array_equal(a.b, b.b)
        assert a.is_first == b.is_first
    x = np.array([0.3, 0.7])
    assert loaded.forward(x) == net.forward(x)


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"hello": 1}))
    with pytest.raises(ConfigError):
        load_checkpoint(path)
