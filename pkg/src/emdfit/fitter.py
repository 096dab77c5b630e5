"""Minimax engine: inner ascent trains the dual potential, outer descent
moves the shape.

The inner loop maximizes the dual objective

    sum_i E_i f(x_i)  -  sum_j w_j f(y_j)

over network parameters.  Because the network's Lipschitz constraint is
enforced inside every forward pass, every evaluated objective value is a
certified lower bound on the true transport distance between the event and
the current shape sample (weak duality), no matter how far training has
progressed.

The outer loop takes gradient steps on the shape parameters holding the
current potential fixed; near the inner optimum that is the exact gradient
of the minimax value (envelope argument), and no differentiation through
the inner loop is needed.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import shapes as shapes_mod
from .errors import DivergenceError, InputError
from .lipnet import LipschitzMLP
from .ot import DiscreteMeasure


class Adam:
    """Adaptive-moment gradient steps, one moment pair per parameter array."""

    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads, lr=None):
        """Descent step in place; pass negated grads to ascend."""
        if lr is None:
            lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            a -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


@dataclass
class FitConfig:
    inner_steps_per_outer: int = 10
    inner_lr: float = 1e-3
    outer_lr: float = 5e-3
    outer_steps: int = 300
    warmup_inner_steps: int = 500
    refit_inner_steps: int = 500
    stochastic_sampling: bool = False
    batch_size: int = 64
    seed: int = 0
    convergence_tol: float = 0.0   # early stop when theta grad stays below
    heatmap_resolution: int = 64
    heatmap_bounds: tuple = (0.0, 1.0, 0.0, 1.0)
    snapshot_steps: tuple = ()
    net_hidden: tuple = (64, 64, 64, 64)
    net_group_size: int = 2
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.inner_steps_per_outer < 1 or self.outer_steps < 1:
            raise InputError("step counts must be >= 1")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise InputError("learning rates must be positive")
        if self.batch_size < 1:
            raise InputError("batch size must be >= 1")


@dataclass
class FitStep:
    step: int
    theta: np.ndarray
    emd: float
    grad_norm_theta: float


@dataclass
class FitTrace:
    steps: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    observable: float = float("nan")
    final_spec: object = None
    net: object = None
    wall_time: float = 0.0


def kr_objective(net, event, sample):
    """The dual objective for a fixed potential; exact expectation.

    `event` is a normalized :class:`DiscreteMeasure`, `sample` a
    :class:`WeightedSample`.  Zero for a zero potential, and identically
    zero whenever event and sample are the same weighted points.  Both
    weight vectors must sum to 1: otherwise constant offsets of the
    potential do not cancel and the value is meaningless.
    """
    if abs(event.weights.sum() - 1.0) > 1e-8:
        raise InputError("event weights must be normalized to sum 1")
    if abs(sample.weights.sum() - 1.0) > 1e-8:
        raise InputError("sample weights must sum to 1")
    return float(_objective_graph(net, event, sample.weights,
                                  sample.points)[0].value)


def _objective_graph(net, event, w_sample, y_sample, params=None):
    """Tape for sum E_i f(x_i) - sum w_j f(y_j); returns (root, fx_event)."""
    if event.points.shape[1] != np.shape(y_sample)[-1]:
        raise InputError("event and sample dimensions differ")
    fx = net.forward_graph(ad.const(event.points), params)
    fy = net.forward_graph(y_sample, params)
    w = w_sample if isinstance(w_sample, ad.Var) else ad.const(w_sample)
    root = ad.dot(ad.const(event.weights), fx) - ad.dot(w, fy)
    return root, fx


def _leaf_params(net):
    return [ad.leaf(p) for p in net.parameters()]


def _check_value(value, step, limit):
    if not np.isfinite(value) or abs(value) > limit:
        raise DivergenceError(
            f"objective {value!r} at inner step {step} exceeded limits")


def estimate_emd(event, sample, net, steps=500, lr=1e-3, lr_decay=1.0,
                 on_step=None, divergence_limit=1e6, seed=None,
                 batch_size=None, restarts=1):
    """Gradient ascent on the potential; returns (emd_estimate, trained_net).

    The returned estimate is the final objective value, a lower bound on the
    exact transport cost up to float rounding.  `on_step(k, value)` is
    invoked with every evaluated objective.  `lr_decay` < 1 applies
    geometric decay spread over the run (final lr = lr * lr_decay).
    With `batch_size` set, each step subsamples both measures with
    probabilities given by their weights and uses the empirical mean.

    `restarts` > 1 repeats the ascent from fresh routing initializations
    (derived deterministically from `seed`) and keeps the best certified
    bound; the routing circuits gradient ascent can reach depend strongly on
    the draw, and the max of valid lower bounds is a tighter valid bound.
    """
    if restarts > 1:
        seeds = np.random.SeedSequence(seed).generate_state(restarts)
        best = (-np.inf, None)
        for r, s in enumerate(seeds):
            start = net if r == 0 else LipschitzMLP.like(net, int(s))
            value, trained = estimate_emd(
                event, sample, start, steps=steps, lr=lr, lr_decay=lr_decay,
                on_step=on_step, divergence_limit=divergence_limit,
                seed=None if batch_size is None else int(s),
                batch_size=batch_size)
            if value > best[0]:
                best = (value, trained)
        return best
    event = DiscreteMeasure(event.weights / event.weights.sum(), event.points)
    rng = np.random.default_rng(seed) if batch_size else None
    params = [p.copy() for p in net.parameters()]
    opt = Adam(params, lr)
    value = None
    for k in range(steps):
        leaves = [ad.leaf(p) for p in params]
        if rng is not None:
            xi = rng.choice(len(event.weights), size=batch_size,
                            p=event.weights)
            yi = rng.choice(len(sample.weights), size=batch_size,
                            p=sample.weights)
            ev = DiscreteMeasure(np.full(batch_size, 1.0 / batch_size),
                                 event.points[xi])
            root, _ = _objective_graph(net, ev,
                                       np.full(batch_size, 1.0 / batch_size),
                                       sample.points[yi], leaves)
        else:
            root, _ = _objective_graph(net, event, sample.weights,
                                       sample.points, leaves)
        value = float(root.value)
        _check_value(value, k, divergence_limit)
        if on_step is not None:
            on_step(k, value)
        grads = ad.backward(root)
        step_lr = lr * lr_decay ** (k / max(steps - 1, 1))
        opt.step(params, [-grads[l] for l in leaves], lr=step_lr)
    trained = LipschitzMLP(net.layers, net.group_size, net.input_shift)
    trained.set_parameters(params)
    trained = trained.constrained()
    # report the exact expectation for the exact returned parameters
    value = kr_objective(trained, event, sample)
    return value, trained


def fit(event, shape_spec, config=None):
    """Alternating minimax fit of a shape family to an event.

    Returns a :class:`FitTrace` with one record per outer step, optional
    potential snapshots, and the final observable (the tightest dual bound
    seen during a terminal inner refit).  Raises :class:`DivergenceError`
    carrying the partial trace if the objective leaves [-limit, limit] or
    turns non-finite.
    """
    cfg = config or FitConfig()
    event = DiscreteMeasure(event.weights / event.weights.sum(), event.points)
    rng = np.random.default_rng(cfg.seed)

    centroid = event.weights @ event.points
    net = LipschitzMLP.create(event.points.shape[1], hidden=cfg.net_hidden,
                              group_size=cfg.net_group_size,
                              seed=int(rng.integers(2 ** 31)), zero_head=True)
    net.input_shift = centroid

    theta = shape_spec.theta.copy()
    params = [p.copy() for p in net.parameters()]
    inner_opt = Adam(params, cfg.inner_lr)
    outer_opt = Adam([theta], cfg.outer_lr)

    trace = FitTrace()
    t0 = time.perf_counter()

    def one_step(k, update_theta):
        """Forward/backward at (theta, params); ascend params; optionally
        descend theta with the gradient evaluated at the pre-update
        potential."""
        leaves = [ad.leaf(p) for p in params]
        theta_leaf = ad.leaf(theta)
        sample_rng = rng if cfg.stochastic_sampling else None
        w_var, y_var = shapes_mod.sample_graph(
            shape_spec.with_theta(theta), theta_leaf, sample_rng)
        ev = event
        if cfg.stochastic_sampling:
            # empirical-mean estimate: draw points with probabilities given
            # by the weights; position gradients still flow to theta, the
            # (small) weight-derivative term of learned weights does not
            bs = cfg.batch_size
            xi = rng.choice(len(event.weights), size=bs, p=event.weights)
            yi = rng.choice(len(w_var.value), size=bs,
                            p=w_var.value / w_var.value.sum())
            ev = DiscreteMeasure(np.full(bs, 1.0 / bs), event.points[xi])
            y_var = ad.take_rows(y_var, yi)
            w_var = ad.const(np.full(bs, 1.0 / bs))
        root, _ = _objective_graph(net, ev, w_var, y_var, leaves)
        value = float(root.value)
        try:
            _check_value(value, k, cfg.divergence_limit)
        except DivergenceError as exc:
            exc.trace = trace
            raise
        grads = ad.backward(root)
        inner_opt.step(params, [-grads[l] for l in leaves])
        g_theta = grads[theta_leaf]
        if update_theta:
            outer_opt.step([theta], [g_theta])
        return value, float(np.sqrt(np.sum(g_theta * g_theta)))

    for k in range(cfg.warmup_inner_steps):
        one_step(k, update_theta=False)

    calm = 0
    for outer in range(cfg.outer_steps):
        for k in range(cfg.inner_steps_per_outer - 1):
            one_step(k, update_theta=False)
        theta_before = theta.copy()
        value, gnorm = one_step(cfg.inner_steps_per_outer - 1,
                                update_theta=True)
        trace.steps.append(FitStep(step=outer, theta=theta_before,
                                   emd=value, grad_norm_theta=gnorm))
        if outer in cfg.snapshot_steps:
            trace.snapshots[outer] = potential_heatmap(
                _net_with(net, params), cfg.heatmap_bounds,
                cfg.heatmap_resolution)
        if cfg.convergence_tol > 0:
            calm = calm + 1 if gnorm < cfg.convergence_tol else 0
            if calm >= 10:
                break

    # terminal refit with the final shape, tracking the best certified bound
    final_spec = shape_spec.with_theta(theta)
    final_sample = shapes_mod.sample(final_spec)
    refit_net = _net_with(net, params)
    best = [kr_objective(refit_net, event, final_sample)]

    def track(_, v):
        best[0] = max(best[0], v)

    try:
        value, refit_net = estimate_emd(
            event, final_sample, refit_net, steps=cfg.refit_inner_steps,
            lr=cfg.inner_lr, lr_decay=0.1, on_step=track,
            divergence_limit=cfg.divergence_limit)
    except DivergenceError as exc:
        exc.trace = trace
        raise
    best[0] = max(best[0], value)

    trace.observable = best[0]
    trace.final_spec = final_spec
    trace.net = refit_net
    trace.wall_time = time.perf_counter() - t0
    return trace


def _net_with(net, params):
    out = LipschitzMLP(net.layers, net.group_size, net.input_shift)
    out.set_parameters([p.copy() for p in params])
    return out


def potential_heatmap(net, bounds, resolution):
    """f evaluated on a regular grid; row r, column c maps to
    (x0 + c*dx, y0 + r*dy), row-major."""
    x0, x1, y0, y1 = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    vals = net.forward(pts)
    return np.asarray(vals).reshape(resolution, resolution)


def theta_forces(net, sample):
    """Per-point shape forces w_j * grad f(y_j).

    The outer descent direction for a sample point's position is exactly
    this vector, so it is what the fit's arrows visualize.
    """
    pts = ad.leaf(sample.points)
    total = ad.asum(net.forward_graph(pts))
    grad = ad.backward(total)[pts]  # rows are per-point gradients of f
    return sample.weights[:, None] * grad


# -- artifact formats --------------------------------------------------------

def save_trace(trace, path):
    """One JSON record per outer step, then a final summary record."""
    import json
    with open(path, "w") as fh:
        for s in trace.steps:
            fh.write(json.dumps({"step": s.step, "theta": s.theta.tolist(),
                                 "emd": s.emd,
                                 "grad_norm_theta": s.grad_norm_theta}) + "\n")
        fh.write(json.dumps({"observable": trace.observable,
                             "wall_time": trace.wall_time}) + "\n")


def save_heatmap(grid, bounds, path):
    """Plain-text grid: two '#' header lines (bounds, resolution), then one
    whitespace-separated row of values per grid row."""
    grid = np.asarray(grid)
    with open(path, "w") as fh:
        fh.write(f"# bounds {bounds[0]!r} {bounds[1]!r} {bounds[2]!r} "
                 f"{bounds[3]!r}\n")
        fh.write(f"# resolution {grid.shape[0]} {grid.shape[1]}\n")
        for row in grid:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_heatmap(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 3 or not lines[0].startswith("# bounds") \
            or not lines[1].startswith("# resolution"):
        raise InputError(f"{path}: not a heatmap file")
    bounds = tuple(float(t) for t in lines[0].split()[2:6])
    rows = [np.array([float(t) for t in line.split()])
            for line in lines[2:] if line.strip()]
    return np.vstack(rows), bounds
