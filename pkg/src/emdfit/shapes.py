"""Parameterized weighted point generators for geometric fitting.

Each shape maps a flat parameter vector theta to a set of weighted sample
points; built on the autodiff tape, the points (and learned weights) are
differentiable in theta.  Quantities that must stay positive (radii,
semi-axes) are stored as logs so that unconstrained gradient steps can never
produce an invalid shape.

Kinds and their theta layouts:

    point-set   k centers in d dims: [x1..xd] * k, plus k weight logits when
                weight_mode == "learned"
    circle-set  k circles in 2-d: [cx, cy, log r] * k
    ellipse     [cx, cy, log a, log b, rotation]
    triangle    [v0x, v0y, v1x, v1y, v2x, v2y]
    composite   concatenated component thetas, plus one logit per component
                when weight_mode == "learned"

Perimeter samplers place points at equal arc-length spacing (deterministic
mode) or at uniform-random arc positions (stochastic mode).  The ellipse
perimeter has no closed form; it is approximated by a dense polyline whose
arc length is computed on the tape, so derivatives account for the
re-uniformization as the axes change.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InputError

_ELLIPSE_SEGMENTS = 1024


@dataclass(frozen=True)
class WeightedSample:
    """Simplex-weighted points produced by a shape."""

    weights: np.ndarray  # (M,), sums to 1
    points: np.ndarray   # (M, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        x = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "points", x)
        if len(w) != len(x):
            raise InputError("weights and points length mismatch")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise InputError("sample weights must be a probability vector")


_ATOMIC_KINDS = ("point-set", "circle-set", "ellipse", "triangle")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    theta: np.ndarray
    samples_per_component: int = 64
    weight_mode: str = "uniform"
    dim: int = 2
    components: tuple = ()  # composite only: tuple of ShapeSpec

    def __post_init__(self):
        object.__setattr__(self, "theta",
                           np.asarray(self.theta, dtype=np.float64))
        object.__setattr__(self, "components", tuple(self.components))
        if self.samples_per_component < 1:
            raise ConfigError("samples-per-component must be >= 1")
        if self.weight_mode not in ("uniform", "learned"):
            raise ConfigError(f"unknown weight mode {self.weight_mode!r}")
        if self.kind == "composite":
            if not self.components:
                raise ConfigError("composite shape needs components")
            for c in self.components:
                if c.kind == "composite":
                    raise ConfigError("composite shapes do not nest")
                if c.weight_mode != "uniform":
                    raise ConfigError("component weights are set by the "
                                      "composite, use uniform components")
            expect = sum(len(c.theta) for c in self.components)
            if self.weight_mode == "learned":
                expect += len(self.components)
            if len(self.theta) != expect:
                raise ConfigError(
                    f"composite theta length {len(self.theta)} != {expect}")
            return
        if self.kind not in _ATOMIC_KINDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        n = len(self.theta)
        if self.kind == "point-set":
            per = self.dim + (1 if self.weight_mode == "learned" else 0)
            if n == 0 or n % per != 0:
                raise ConfigError(
                    f"point-set theta length {n} not a multiple of {per}")
        elif self.kind == "circle-set":
            if self.dim != 2 or n == 0 or n % 3 != 0:
                raise ConfigError("circle-set needs 2-d and theta length 3k")
        elif self.kind == "ellipse":
            if self.dim != 2 or n != 5:
                raise ConfigError("ellipse needs 2-d and theta length 5")
        elif self.kind == "triangle":
            if self.dim != 2 or n != 6:
                raise ConfigError("triangle needs 2-d and theta length 6")
        if self.kind != "point-set" and self.weight_mode == "learned":
            raise ConfigError(
                f"learned weights apply to point-set and composite shapes, "
                f"not {self.kind!r}")

    # -- convenience constructors -----------------------------------------
    @staticmethod
    def point_set(centers, weight_mode="uniform", logits=None):
        centers = np.asarray(centers, dtype=np.float64)
        theta = centers.ravel()
        if weight_mode == "learned":
            if logits is None:
                logits = np.zeros(len(centers))
            theta = np.concatenate([theta, np.asarray(logits, np.float64)])
        return ShapeSpec("point-set", theta, samples_per_component=1,
                         weight_mode=weight_mode, dim=centers.shape[1])

    @staticmethod
    def circles(centers, radii, samples_per_component=64):
        centers = np.asarray(centers, dtype=np.float64)
        radii = np.asarray(radii, dtype=np.float64)
        if np.any(radii <= 0):
            raise ConfigError("radii must be positive")
        theta = np.column_stack([centers, np.log(radii)]).ravel()
        return ShapeSpec("circle-set", theta, samples_per_component)

    @staticmethod
    def ellipse(center, a, b, rotation=0.0, samples_per_component=64):
        if a <= 0 or b <= 0:
            raise ConfigError("semi-axes must be positive")
        theta = np.array([center[0], center[1], math.log(a), math.log(b),
                          rotation], dtype=np.float64)
        return ShapeSpec("ellipse", theta, samples_per_component)

    @staticmethod
    def triangle(vertices, samples_per_component=64):
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != (3, 2):
            raise ConfigError("triangle needs three 2-d vertices")
        return ShapeSpec("triangle", vertices.ravel(), samples_per_component)

    @staticmethod
    def composite(components, weight_mode="uniform", logits=None):
        components = tuple(components)
        theta = np.concatenate([c.theta for c in components]) \
            if components else np.zeros(0)
        if weight_mode == "learned":
            if logits is None:
                logits = np.zeros(len(components))
            theta = np.concatenate([theta, np.asarray(logits, np.float64)])
        return ShapeSpec("composite", theta, weight_mode=weight_mode,
                         components=components)

    def with_theta(self, theta):
        return replace(self, theta=np.asarray(theta, dtype=np.float64))

    @property
    def n_points(self):
        if self.kind == "point-set":
            per = self.dim + (1 if self.weight_mode == "learned" else 0)
            return len(self.theta) // per
        if self.kind == "circle-set":
            return (len(self.theta) // 3) * self.samples_per_component
        if self.kind == "composite":
            return sum(c.n_points for c in self.components)
        return self.samples_per_component


def _softmax(logits):
    shifted = logits - ad.amax(logits)
    e = ad.exp(shifted)
    return e / ad.asum(e)


def _perimeter_points(xs, ys, m, rng):
    """Points at arc-length-uniform (or random-arc) positions along the
    polyline (xs, ys), all on the tape.

    The assignment of a position to a segment is decided on current values;
    a position landing exactly on a joint takes the segment it begins, so
    the subgradient follows the starting edge.
    """
    dx = xs[1:] - xs[:-1]
    dy = ys[1:] - ys[:-1]
    seglen = ad.sqrt(dx * dx + dy * dy)
    cum = ad.cumsum(seglen)
    total = cum[-1]
    if rng is None:
        frac = np.arange(m, dtype=np.float64) / m
    else:
        frac = rng.uniform(0.0, 1.0, size=m)
    s = ad.const(frac) * total
    idx = np.searchsorted(cum.value, s.value, side="right")
    idx = np.minimum(idx, len(seglen.value) - 1)
    prev = ad.take_rows(ad.concat([ad.const(np.zeros(1)), cum]), idx)
    t = (s - prev) / ad.take_rows(seglen, idx)
    px = ad.take_rows(xs[:-1], idx) + t * ad.take_rows(dx, idx)
    py = ad.take_rows(ys[:-1], idx) + t * ad.take_rows(dy, idx)
    return px, py


def sample_graph(spec, theta, rng=None):
    """Build the sampler on the tape: returns (weights, points) Vars.

    `theta` may be a Var (for differentiation) or an array.  Pass an `rng`
    for stochastic arc/angle positions; with `rng=None` the sampler is the
    deterministic fixed grid.
    """
    theta = theta if isinstance(theta, ad.Var) else ad.const(theta)
    m = spec.samples_per_component

    if spec.kind == "point-set":
        k = spec.n_points
        d = spec.dim
        cols = [theta[j:k * d:d] for j in range(d)]
        points = ad.stack_cols(cols)
        if spec.weight_mode == "learned":
            weights = _softmax(theta[k * d:])
        else:
            weights = ad.const(np.full(k, 1.0 / k))
        return weights, points

    if spec.kind == "circle-set":
        k = len(spec.theta) // 3
        parts = []
        for c in range(k):
            cx, cy, logr = theta[3 * c], theta[3 * c + 1], theta[3 * c + 2]
            r = ad.exp(logr)
            if rng is None:
                angles = 2.0 * np.pi * np.arange(m, dtype=np.float64) / m
            else:
                angles = rng.uniform(0.0, 2.0 * np.pi, size=m)
            px = cx + r * ad.const(np.cos(angles))
            py = cy + r * ad.const(np.sin(angles))
            parts.append(ad.stack_cols([px, py]))
        points = parts[0] if k == 1 else ad.concat(parts, axis=0)
        weights = ad.const(np.full(k * m, 1.0 / (k * m)))
        return weights, points

    if spec.kind == "ellipse":
        cx, cy = theta[0], theta[1]
        a = ad.exp(theta[2])
        b = ad.exp(theta[3])
        rot = theta[4]
        t = np.linspace(0.0, 2.0 * np.pi, _ELLIPSE_SEGMENTS + 1)
        xs = a * ad.const(np.cos(t))
        ys = b * ad.const(np.sin(t))
        px, py = _perimeter_points(xs, ys, m, rng)
        cr, sr = ad.cos(rot), ad.sin(rot)
        X = cx + cr * px - sr * py
        Y = cy + sr * px + cr * py
        points = ad.stack_cols([X, Y])
        weights = ad.const(np.full(m, 1.0 / m))
        return weights, points

    if spec.kind == "triangle":
        xs = ad.stack_cols([theta[0], theta[2], theta[4], theta[0]])
        ys = ad.stack_cols([theta[1], theta[3], theta[5], theta[1]])
        px, py = _perimeter_points(xs, ys, m, rng)
        points = ad.stack_cols([px, py])
        weights = ad.const(np.full(m, 1.0 / m))
        return weights, points

    # composite
    offsets = np.cumsum([0] + [len(c.theta) for c in spec.components])
    k = len(spec.components)
    if spec.weight_mode == "learned":
        masses = _softmax(theta[int(offsets[-1]):])
    else:
        masses = ad.const(np.full(k, 1.0 / k))
    w_parts, p_parts = [], []
    for c, comp in enumerate(spec.components):
        sub_theta = theta[int(offsets[c]):int(offsets[c + 1])]
        w, p = sample_graph(comp, sub_theta, rng)
        w_parts.append(masses[c] * w)
        p_parts.append(p)
    weights = w_parts[0] if k == 1 else ad.concat(w_parts, axis=0)
    points = p_parts[0] if k == 1 else ad.concat(p_parts, axis=0)
    return weights, points


def sample(spec, seed=None, stochastic=False):
    """Evaluate the sampler; returns a :class:`WeightedSample`.

    Deterministic mode (default) uses the fixed grid and is bitwise
    reproducible; stochastic mode draws arc/angle positions from the seed.
    """
    rng = np.random.default_rng(seed) if stochastic else None
    weights, points = sample_graph(spec, ad.const(spec.theta), rng)
    pts = points.value
    if pts.ndim == 1:  # single point
        pts = pts[None, :]
    return WeightedSample(weights=weights.value, points=pts)


def sample_jacobian_check(spec, seed=0, step=1e-6, stochastic=False):
    """Max relative error of d(point)/d(theta) against central differences.

    Coordinates whose perturbation flips a branch decision (a sample
    crossing a triangle corner or polyline joint) are excluded, matching the
    smoothness precondition.
    """
    theta0 = spec.theta

    def rng_for():
        return np.random.default_rng(seed) if stochastic else None

    theta_var = ad.leaf(theta0)
    _, points = sample_graph(spec, theta_var, rng_for())
    n_out = points.value.size
    n_cols = points.value.shape[1]
    n_theta = theta0.size

    jac = np.zeros((n_out, n_theta))
    for j in range(n_out):
        theta_var = ad.leaf(theta0)
        _, pts = sample_graph(spec, theta_var, rng_for())
        jac[j] = ad.backward(pts[divmod(j, n_cols)])[theta_var]

    worst = 0.0
    for i in range(n_theta):
        shift = np.zeros(n_theta)
        shift[i] = step
        _, pp = sample_graph(spec, ad.const(theta0 + shift), rng_for())
        _, pm = sample_graph(spec, ad.const(theta0 - shift), rng_for())
        if ad.branch_signature(pp) != ad.branch_signature(pm):
            continue
        fd = (pp.value - pm.value).ravel() / (2.0 * step)
        err = np.abs(jac[:, i] - fd) / (np.abs(fd) + 1e-12)
        worst = max(worst, float(np.max(err)))
    return worst


def translate(spec, offset):
    """Shift all positional parameters by `offset`; sizes/weights unchanged."""
    offset = np.asarray(offset, dtype=np.float64)
    theta = spec.theta.copy()
    if spec.kind == "point-set":
        k, d = spec.n_points, spec.dim
        theta[:k * d] += np.tile(offset, k)
    elif spec.kind == "circle-set":
        for c in range(len(theta) // 3):
            theta[3 * c:3 * c + 2] += offset
    elif spec.kind == "ellipse":
        theta[0:2] += offset
    elif spec.kind == "triangle":
        theta += np.tile(offset, 3)
    else:
        pos = 0
        for comp in spec.components:
            sub = comp.with_theta(theta[pos:pos + len(comp.theta)])
            theta[pos:pos + len(comp.theta)] = translate(sub, offset).theta
            pos += len(comp.theta)
    return spec.with_theta(theta)


# -- shape spec files --------------------------------------------------------

def _spec_doc(spec):
    doc = {
        "kind": spec.kind,
        "theta": spec.theta.tolist(),
        "samples_per_component": spec.samples_per_component,
        "weight_mode": spec.weight_mode,
        "dim": spec.dim,
    }
    if spec.kind == "composite":
        doc["components"] = [_spec_doc(c) for c in spec.components]
    return doc


def save_shape_spec(spec, path):
    with open(path, "w") as fh:
        json.dump(_spec_doc(spec), fh, indent=2)
        fh.write("\n")


def _spec_from_doc(doc):
    components = tuple(_spec_from_doc(c) for c in doc.get("components", []))
    return ShapeSpec(kind=doc["kind"],
                     theta=np.asarray(doc["theta"], dtype=np.float64),
                     samples_per_component=doc["samples_per_component"],
                     weight_mode=doc["weight_mode"],
                     dim=doc.get("dim", 2),
                     components=components)


def load_shape_spec(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: not a valid shape spec: {exc}") from exc
    try:
        return _spec_from_doc(doc)
    except KeyError as exc:
        raise InputError(f"{path}: shape spec missing field {exc}") from exc
