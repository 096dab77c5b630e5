import numpy as np
import pytest

from emdfit import autodiff as ad
from emdfit.errors import DivergenceError, InputError
from emdfit.fitter import (Adam, FitConfig, estimate_emd, fit, kr_objective,
                           load_heatmap, potential_heatmap, save_heatmap,
                           save_trace, theta_forces)
from emdfit.lipnet import DenseLayer, LipschitzMLP
from emdfit.ot import DiscreteMeasure, exact_emd
from emdfit.shapes import ShapeSpec, WeightedSample, sample


def dirac(x):
    return DiscreteMeasure(np.array([1.0]), np.array([x]))


def dirac_sample(x):
    return WeightedSample(np.array([1.0]), np.array([x]))


def linear_potential(a, b=0.0):
    """f(x) = a . x + b as a constrained single-layer network."""
    a = np.asarray(a, dtype=np.float64)
    layer = DenseLayer(W=a[None, :] / max(np.linalg.norm(a), 1.0),
                       b=np.array([b]), is_first=True, input_norm_p=2)
    return LipschitzMLP([layer], group_size=1)


# -- kr_objective --------------------------------------------------------------

def test_objective_zero_net_is_zero():
    rng = np.random.default_rng(0)
    P = DiscreteMeasure(rng.uniform(0.1, 1, 5),
                        rng.uniform(0, 1, (5, 2))).normalized()
    s = WeightedSample(np.full(4, 0.25), rng.uniform(0, 1, (4, 2)))
    net = LipschitzMLP.create(2, hidden=(8, 8), group_size=2, seed=1,
                              zero_head=True)
    assert kr_objective(net, P, s) == 0.0


def test_objective_cancels_on_identical_measures():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 1, (6, 2))
    w = rng.uniform(0.1, 1, 6)
    w = w / w.sum()
    net = LipschitzMLP.create(2, hidden=(8, 8), group_size=2, seed=2,
                              zero_head=False)
    value = kr_objective(net, DiscreteMeasure(w, pts), WeightedSample(w, pts))
    assert value == 0.0


def test_objective_dirac_pair_linear_optimum():
    # f(x) = -x1 moves mass from x=d to x=0: objective = d
    d = 0.7
    net = linear_potential([-1.0, 0.0])
    value = kr_objective(net, dirac([0.0, 0.0]), dirac_sample([d, 0.0]))
    assert value == pytest.approx(d, abs=1e-15)


def test_objective_swap_negates():
    rng = np.random.default_rng(3)
    P = DiscreteMeasure(rng.uniform(0.1, 1, 5),
                        rng.uniform(0, 1, (5, 2))).normalized()
    w = rng.uniform(0.1, 1, 7)
    s = WeightedSample(w / w.sum(), rng.uniform(0, 1, (7, 2)))
    net = LipschitzMLP.create(2, hidden=(8, 8), group_size=2, seed=4,
                              zero_head=False)
    forward = kr_objective(net, P, s)
    backward = kr_objective(net, DiscreteMeasure(s.weights, s.points),
                            WeightedSample(P.weights, P.points))
    assert forward == pytest.approx(-backward, abs=1e-15)


def test_objective_requires_normalized_weights():
    P = DiscreteMeasure(np.array([2.0, 2.0]), np.zeros((2, 2)))
    s = WeightedSample(np.array([1.0]), np.zeros((1, 2)))
    net = LipschitzMLP.create(2, hidden=(4,), group_size=2, seed=0)
    with pytest.raises(InputError):
        kr_objective(net, P, s)


def test_objective_dimension_mismatch():
    P = DiscreteMeasure(np.array([1.0]), np.zeros((1, 3)))
    s = WeightedSample(np.array([1.0]), np.zeros((1, 2)))
    net = LipschitzMLP.create(3, hidden=(4,), group_size=2, seed=0)
    with pytest.raises(InputError):
        kr_objective(net, P, s)


# -- estimate_emd --------------------------------------------------------------

def test_estimate_identical_measures_stays_zero():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 1, (8, 2))
    w = rng.uniform(0.1, 1, 8)
    w = w / w.sum()
    net = LipschitzMLP.create(2, hidden=(16, 16), group_size=2, seed=6,
                              zero_head=True)
    value, _ = estimate_emd(DiscreteMeasure(w, pts), WeightedSample(w, pts),
                            net, steps=300, lr=1e-3)
    assert -1e-6 <= value <= 1e-3


def test_estimate_dirac_pair_converges_to_one():
    net = LipschitzMLP.create(2, hidden=(32, 32), group_size=2, seed=7,
                              zero_head=True)
    value, trained = estimate_emd(dirac([0.0, 0.0]), dirac_sample([1.0, 0.0]),
                                  net, steps=1200, lr=1e-2, lr_decay=0.01)
    assert 0.99 <= value <= 1.0 + 1e-6
    # returned potential reproduces the returned value exactly
    again = kr_objective(trained, dirac([0.0, 0.0]),
                         dirac_sample([1.0, 0.0]))
    assert again == value


def test_estimate_is_lower_bound_at_every_step():
    rng = np.random.default_rng(8)
    P = DiscreteMeasure(rng.uniform(0.1, 1, 9),
                        rng.uniform(0, 1, (9, 2))).normalized()
    w = rng.uniform(0.1, 1, 7)
    s = WeightedSample(w / w.sum(), rng.uniform(0, 1, (7, 2)))
    exact = exact_emd(P, DiscreteMeasure(s.weights, s.points)).cost
    seen = []
    net = LipschitzMLP.create(2, hidden=(16, 16), group_size=2, seed=9,
                              zero_head=True)
    estimate_emd(P, s, net, steps=400, lr=3e-3,
                 on_step=lambda k, v: seen.append(v))
    assert len(seen) == 400
    assert max(seen) <= exact + 1e-6


def test_estimate_monotone_best_so_far():
    rng = np.random.default_rng(10)
    P = DiscreteMeasure(rng.uniform(0.1, 1, 6),
                        rng.uniform(0, 1, (6, 2))).normalized()
    w = rng.uniform(0.1, 1, 6)
    s = WeightedSample(w / w.sum(), rng.uniform(0, 1, (6, 2)))
    seen = []
    net = LipschitzMLP.create(2, hidden=(16, 16), group_size=2, seed=11,
                              zero_head=True)
    estimate_emd(P, s, net, steps=300, lr=3e-3,
                 on_step=lambda k, v: seen.append(v))
    best = np.maximum.accumulate(seen)
    assert np.all(np.diff(best) >= 0)


def test_estimate_divergence_guard():
    P = dirac([0.0, 0.0])
    s = dirac_sample([1.0, 0.0])
    net = LipschitzMLP.create(2, hidden=(4, 4), group_size=2, seed=12,
                              zero_head=False)
    with pytest.raises(DivergenceError):
        estimate_emd(P, s, net, steps=50, lr=1.0, divergence_limit=1e-6)


def test_estimate_stochastic_mode_runs():
    rng = np.random.default_rng(13)
    P = DiscreteMeasure(rng.uniform(0.1, 1, 12),
                        rng.uniform(0, 1, (12, 2))).normalized()
    w = rng.uniform(0.1, 1, 10)
    s = WeightedSample(w / w.sum(), rng.uniform(0, 1, (10, 2)))
    net = LipschitzMLP.create(2, hidden=(8, 8), group_size=2, seed=14,
                              zero_head=True)
    value, _ = estimate_emd(P, s, net, steps=200, lr=3e-3, seed=1,
                            batch_size=6)
    exact = exact_emd(P, DiscreteMeasure(s.weights, s.points)).cost
    assert value <= exact + 1e-6  # reported value is the exact expectation


# -- potential heatmap and forces ----------------------------------------------

def test_heatmap_zero_net():
    net = LipschitzMLP.create(2, hidden=(4,), group_size=2, seed=0,
                              zero_head=True)
    grid = potential_heatmap(net, (0, 1, 0, 1), 8)
    assert grid.shape == (8, 8)
    assert np.all(grid == 0.0)


def test_heatmap_single_point():
    net = linear_potential([0.6, 0.8], b=0.25)
    grid = potential_heatmap(net, (0.3, 0.3, 0.4, 0.4), 1)
    assert grid.shape == (1, 1)
    assert grid[0, 0] == pytest.approx(net.forward([0.3, 0.4]), abs=1e-15)


def test_heatmap_row_major_orientation():
    net = linear_potential([1.0, 0.0])
    grid = potential_heatmap(net, (0, 1, 0, 1), 5)
    # row r is constant y; values increase along columns (x)
    assert np.all(np.diff(grid, axis=1) > 0)
    assert np.allclose(np.diff(grid, axis=0), 0.0)


def test_heatmap_dirac_pair_slope_near_one():
    net = LipschitzMLP.create(2, hidden=(32, 32), group_size=2, seed=15,
                              zero_head=True)
    _, trained = estimate_emd(dirac([0.2, 0.5]), dirac_sample([0.8, 0.5]),
                              net, steps=1200, lr=1e-2, lr_decay=0.01)
    grid = potential_heatmap(trained, (0.2, 0.8, 0.5, 0.5), 61)
    slopes = np.diff(grid[30]) / (0.6 / 60)
    # along the axis between the diracs the potential drops at unit rate
    assert np.mean(np.abs(slopes)) > 0.95
    assert np.max(np.abs(slopes)) <= 1.0 + 1e-9


def test_forces_zero_net():
    net = LipschitzMLP.create(2, hidden=(4, 4), group_size=2, seed=0,
                              zero_head=True)
    s = sample(ShapeSpec.circles([[0.5, 0.5]], [0.2], 8))
    assert np.all(theta_forces(net, s) == 0.0)


def test_forces_linear_potential():
    a = np.array([0.6, -0.8])
    net = linear_potential(a)
    s = sample(ShapeSpec.circles([[0.5, 0.5]], [0.2], 8))
    forces = theta_forces(net, s)
    np.testing.assert_allclose(forces, s.weights[:, None] * a, atol=1e-12)


def test_forces_point_toward_target():
    net = LipschitzMLP.create(2, hidden=(32, 32), group_size=2, seed=16,
                              zero_head=True)
    src = np.array([0.2, 0.3])
    dst = np.array([0.9, 0.6])
    _, trained = estimate_emd(dirac(dst), dirac_sample(src), net,
                              steps=1200, lr=1e-2, lr_decay=0.01)
    force = theta_forces(trained, dirac_sample(src))[0]
    direction = dst - src
    cos = force @ direction / (np.linalg.norm(force)
                               * np.linalg.norm(direction))
    assert cos >= np.cos(np.radians(10.0))


# -- fit ------------------------------------------------------------------------

def quick_config(**kw):
    base = dict(inner_steps_per_outer=5, inner_lr=3e-3, outer_lr=5e-3,
                outer_steps=20, warmup_inner_steps=100,
                refit_inner_steps=100, seed=0, net_hidden=(16, 16),
                net_group_size=2)
    base.update(kw)
    return FitConfig(**base)


def test_fit_fixed_point_keeps_theta():
    # event sampled exactly from the shape at its initialization
    spec = ShapeSpec.circles([[0.5, 0.5]], [0.25], samples_per_component=32)
    s = sample(spec)
    event = DiscreteMeasure(s.weights, s.points)
    cfg = quick_config(outer_steps=50)
    trace = fit(event, spec, cfg)
    assert np.linalg.norm(trace.final_spec.theta - spec.theta) <= 1e-3
    assert trace.observable <= 1e-2
    assert all(st.grad_norm_theta < 1e-3 for st in trace.steps)


def test_fit_records_every_outer_step():
    spec = ShapeSpec.point_set(np.array([[0.4, 0.4]]))
    rng = np.random.default_rng(17)
    event = DiscreteMeasure(np.full(6, 1 / 6), rng.uniform(0, 1, (6, 2)))
    cfg = quick_config(outer_steps=12)
    trace = fit(event, spec, cfg)
    assert [s.step for s in trace.steps] == list(range(12))
    assert all(np.isfinite(s.emd) for s in trace.steps)


def test_fit_estimates_stay_below_exact(tmp_path):
    rng = np.random.default_rng(18)
    event = DiscreteMeasure(np.full(8, 1 / 8), rng.uniform(0, 1, (8, 2)))
    spec = ShapeSpec.point_set(rng.uniform(0.2, 0.8, (2, 2)))
    cfg = quick_config(outer_steps=15)
    trace = fit(event, spec, cfg)
    for st in trace.steps:
        cur = sample(spec.with_theta(st.theta))
        exact = exact_emd(event, DiscreteMeasure(cur.weights,
                                                 cur.points)).cost
        assert st.emd <= exact + 1e-6


def test_fit_shift_equivariance():
    rng = np.random.default_rng(19)
    pts = rng.uniform(0.2, 0.8, (10, 2))
    event = DiscreteMeasure(np.full(10, 0.1), pts)
    spec = ShapeSpec.circles([[0.4, 0.45]], [0.2], samples_per_component=16)
    t = np.array([5.0, -3.0])
    event_t = DiscreteMeasure(event.weights, pts + t)
    from emdfit.shapes import translate
    spec_t = translate(spec, t)
    cfg = quick_config(outer_steps=10)
    tr1 = fit(event, spec, cfg)
    tr2 = fit(event_t, spec_t, cfg)
    for s1, s2 in zip(tr1.steps, tr2.steps):
        np.testing.assert_allclose(s1.theta[:2] + t, s2.theta[:2], atol=1e-9)
        assert s1.theta[2] == pytest.approx(s2.theta[2], abs=1e-9)
        assert s1.emd == pytest.approx(s2.emd, abs=1e-9)
    assert tr1.observable == pytest.approx(tr2.observable, abs=1e-9)


def test_fit_divergence_attaches_trace():
    rng = np.random.default_rng(20)
    event = DiscreteMeasure(np.full(5, 0.2), rng.uniform(0, 1, (5, 2)))
    spec = ShapeSpec.point_set(rng.uniform(0, 1, (2, 2)))
    cfg = quick_config(divergence_limit=1e-9, warmup_inner_steps=1,
                       outer_steps=5)
    with pytest.raises(DivergenceError) as exc_info:
        fit(event, spec, cfg)
    assert exc_info.value.trace is not None


def test_fit_snapshots_and_trace_files(tmp_path):
    rng = np.random.default_rng(21)
    event = DiscreteMeasure(np.full(6, 1 / 6), rng.uniform(0, 1, (6, 2)))
    spec = ShapeSpec.point_set(rng.uniform(0.3, 0.7, (2, 2)))
    cfg = quick_config(outer_steps=8, snapshot_steps=(0, 4),
                       heatmap_resolution=12)
    trace = fit(event, spec, cfg)
    assert set(trace.snapshots) == {0, 4}
    assert trace.snapshots[0].shape == (12, 12)

    tp = tmp_path / "trace.jsonl"
    save_trace(trace, tp)
    lines = tp.read_text().splitlines()
    assert len(lines) == 9  # 8 steps + summary

    hp = tmp_path / "hm.txt"
    save_heatmap(trace.snapshots[0], cfg.heatmap_bounds, hp)
    grid, bounds = load_heatmap(hp)
    assert np.array_equal(grid, trace.snapshots[0])
    assert bounds == cfg.heatmap_bounds


# -- Adam ------------------------------------------------------------------------

def test_adam_minimizes_quadratic():
    x = [np.array([5.0, -3.0])]
    opt = Adam(x, lr=0.1)
    for _ in range(500):
        opt.step(x, [2 * x[0]])
    assert np.linalg.norm(x[0]) < 1e-3


def test_config_validation():
    with pytest.raises(InputError):
        FitConfig(inner_lr=-1.0)
    with pytest.raises(InputError):
        FitConfig(outer_steps=0)
