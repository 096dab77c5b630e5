"""Event data model, file formats, and synthetic generators.

An event is a set of particles, each an energy and a position in R^d
(d = 2 by default, coordinates in the unit box).  Events normalize to
discrete measures by dividing energies by the total, which is how they
enter every solver in this package.

Two file formats are supported and round-trip decimal-exactly:

    CSV     header "E,x1,...,xd", one particle per row
    JSONL   one JSON object per line: {"E": <energy>, "x": [<coords>]}
"""

import json
from dataclasses import dataclass

import numpy as np

from . import shapes as shapes_mod
from .errors import InputError
from .ot import DiscreteMeasure


@dataclass(frozen=True)
class Event:
    energies: np.ndarray  # (n,), > 0
    points: np.ndarray    # (n, d)
    label: str | None = None

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        x = np.asarray(self.points, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "points", x)
        if e.ndim != 1 or len(e) < 1 or len(e) != len(x):
            raise InputError("event needs matching energies and points")
        if not np.all(np.isfinite(e)) or not np.all(np.isfinite(x)):
            raise InputError("event contains non-finite entries")
        if np.any(e <= 0):
            raise InputError("particle energies must be positive")

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return len(self.energies)


def normalize(event):
    """Energies over total energy as weights; positions unchanged."""
    total = event.energies.sum()
    if total <= 0:
        raise InputError("event has zero total energy")
    return DiscreteMeasure(event.energies / total, event.points)


# -- file i/o ----------------------------------------------------------------

def _format_for(path, fmt):
    if fmt is not None:
        return fmt
    name = str(path)
    if name.endswith(".jsonl"):
        return "jsonl"
    return "csv"


def save_event(event, path, fmt=None):
    fmt = _format_for(path, fmt)
    if fmt == "csv":
        d = event.dim
        with open(path, "w") as fh:
            fh.write("E," + ",".join(f"x{k + 1}" for k in range(d)) + "\n")
            for e, x in zip(event.energies, event.points):
                fh.write(repr(float(e)) + ","
                         + ",".join(repr(float(c)) for c in x) + "\n")
    elif fmt == "jsonl":
        with open(path, "w") as fh:
            for e, x in zip(event.energies, event.points):
                fh.write(json.dumps({"E": float(e), "x": [float(c) for c in x]})
                         + "\n")
    else:
        raise InputError(f"unknown event format {fmt!r}")


def load_event(path, fmt=None):
    """Parse an event file; errors name the offending line."""
    fmt = _format_for(path, fmt)
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "jsonl":
        return _load_jsonl(path)
    raise InputError(f"unknown event format {fmt!r}")


def _load_csv(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise InputError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    if header[0] != "E" or len(header) < 2:
        raise InputError(f"{path}: line 1: expected header 'E,x1,...'")
    d = len(header) - 1
    energies, points = [], []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != d + 1:
            raise InputError(f"{path}: line {ln}: expected {d + 1} columns, "
                             f"got {len(cells)}")
        try:
            row = [float(c) for c in cells]
        except ValueError:
            raise InputError(f"{path}: line {ln}: non-numeric field") from None
        if row[0] <= 0:
            raise InputError(f"{path}: line {ln}: energy must be positive")
        energies.append(row[0])
        points.append(row[1:])
    if not energies:
        raise InputError(f"{path}: no particles")
    return Event(np.array(energies), np.array(points))


def _load_jsonl(path):
    energies, points = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                raise InputError(f"{path}: line {ln}: invalid JSON") from None
            if not isinstance(obj, dict) or "E" not in obj or "x" not in obj:
                raise InputError(f"{path}: line {ln}: need keys 'E' and 'x'")
            try:
                e = float(obj["E"])
                x = [float(c) for c in obj["x"]]
            except (TypeError, ValueError):
                raise InputError(f"{path}: line {ln}: non-numeric field") \
                    from None
            if e <= 0:
                raise InputError(f"{path}: line {ln}: energy must be positive")
            energies.append(e)
            points.append(x)
    if not energies:
        raise InputError(f"{path}: no particles")
    lengths = {len(x) for x in points}
    if len(lengths) != 1:
        raise InputError(f"{path}: inconsistent point dimensions {lengths}")
    return Event(np.array(energies), np.array(points))


# -- generators --------------------------------------------------------------

def gen_circle_event(centers, radii, points_per_circle=64, jitter=0.0,
                     seed=0):
    """Particles at uniform-random angles on circle perimeters.

    Equal energies; `jitter` adds a radial Gaussian spread.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
    if np.any(radii <= 0):
        raise InputError("radii must be positive")
    if len(centers) != len(radii):
        raise InputError("need one radius per center")
    rng = np.random.default_rng(seed)
    pts = []
    for c, r in zip(centers, radii):
        ang = rng.uniform(0.0, 2.0 * np.pi, size=points_per_circle)
        rad = r + (rng.normal(0.0, jitter, size=points_per_circle)
                   if jitter > 0 else 0.0)
        pts.append(np.column_stack([c[0] + rad * np.cos(ang),
                                    c[1] + rad * np.sin(ang)]))
    pts = np.concatenate(pts, axis=0)
    return Event(np.ones(len(pts)), pts, label="circles")


def gen_triangle_ellipse_event(triangle_vertices, ellipse_center, ellipse_a,
                               ellipse_b, ellipse_rotation=0.0,
                               points_per_shape=64, seed=0):
    """Particles at random arc positions along a triangle and an ellipse."""
    rng = np.random.default_rng(seed)
    tri = shapes_mod.ShapeSpec.triangle(triangle_vertices,
                                        samples_per_component=points_per_shape)
    ell = shapes_mod.ShapeSpec.ellipse(ellipse_center, ellipse_a, ellipse_b,
                                       ellipse_rotation,
                                       samples_per_component=points_per_shape)
    _, tri_pts = shapes_mod.sample_graph(tri, tri.theta, rng)
    _, ell_pts = shapes_mod.sample_graph(ell, ell.theta, rng)
    pts = np.concatenate([tri_pts.value, ell_pts.value], axis=0)
    return Event(np.ones(len(pts)), pts, label="triangle+ellipse")


def gen_subjet_event(n_centers, center_box=(0.15, 0.85), sigma=0.05,
                     particles_per_center=10, seed=0):
    """Cluster centers uniform in a box; per center, isotropic Gaussian
    particles with spread sigma.  Equal energies."""
    if n_centers < 1:
        raise InputError("need at least one center")
    if sigma <= 0:
        raise InputError("sigma must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = center_box
    centers = rng.uniform(lo, hi, size=(n_centers, 2))
    pts = centers[:, None, :] + rng.normal(
        0.0, sigma, size=(n_centers, particles_per_center, 2))
    pts = pts.reshape(-1, 2)
    return Event(np.ones(len(pts)), pts, label=f"subjets-{n_centers}")


def event_from_sample(sample, label=None):
    """Turn a weighted shape sample into an event (weights as energies)."""
    return Event(sample.weights.copy(), sample.points.copy(), label=label)
