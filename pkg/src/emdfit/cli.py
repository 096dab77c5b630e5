"""Command-line front end.

Subcommands:

    gen       write synthetic event files (circles, triangle-ellipse, subjets)
    emd       distance between two event files (exact / dual / sinkhorn)
    fit       minimax shape fit with trace, heatmaps, and optional SVG frames
    subjets   the cluster-count study: a (true N) x (fit N) observable matrix
    check     self-test suites (lipschitz, gradients, oracle, duality)

Every run that produces artifacts writes a manifest (JSON) recording the
command, the full effective configuration, the seed, artifact paths, wall
time, and the library version; with a fixed seed the artifacts are bitwise
reproducible.

Exit codes: 0 success, 1 failed checks, 2 input/configuration errors,
3 numerical failures (divergence, non-finite values).
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from . import __version__
from . import autodiff as ad
from . import events as events_mod
from . import fitter as fitter_mod
from . import lipnet
from . import ot
from . import shapes as shapes_mod
from . import svgplot
from .errors import EmdfitError, InputError, NumericalError

EXIT_CHECK_FAILED = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _write_manifest(out_dir, command, config, seed, artifacts, t0):
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": sorted(artifacts),
        "wall_time_s": time.perf_counter() - t0,
        "version": __version__,
    }
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _load_config(path, base):
    """Overlay a JSON config file onto a FitConfig; unknown keys error."""
    cfg = asdict(base)
    if path:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: invalid JSON: {exc}") from exc
        unknown = set(doc) - set(cfg)
        if unknown:
            raise InputError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg.update(doc)
    for key in ("snapshot_steps", "net_hidden", "heatmap_bounds"):
        cfg[key] = tuple(cfg[key])
    return fitter_mod.FitConfig(**cfg)


def _emit(report, fmt):
    if fmt == "json":
        print(json.dumps(report, indent=2))
    else:
        for k, v in report.items():
            print(f"{k}: {v}")


# -- gen ----------------------------------------------------------------------

def cmd_gen(args):
    rng_seed = args.seed
    if args.generator == "circles":
        centers = np.array(json.loads(args.centers))
        radii = np.array(json.loads(args.radii))
        ev = events_mod.gen_circle_event(centers, radii, args.points,
                                         jitter=args.jitter, seed=rng_seed)
    elif args.generator == "triangle-ellipse":
        ev = events_mod.gen_triangle_ellipse_event(
            json.loads(args.triangle), json.loads(args.ellipse_center),
            args.ellipse_a, args.ellipse_b, args.ellipse_rotation,
            points_per_shape=args.points, seed=rng_seed)
    elif args.generator == "subjets":
        ev = events_mod.gen_subjet_event(
            args.n_centers, sigma=args.sigma,
            particles_per_center=args.particles_per_center, seed=rng_seed)
    else:  # pragma: no cover - argparse restricts choices
        raise InputError(f"unknown generator {args.generator}")
    events_mod.save_event(ev, args.out, fmt=args.event_format)
    print(f"wrote {len(ev)} particles to {args.out}")
    return 0


# -- emd ----------------------------------------------------------------------

def cmd_emd(args):
    t0 = time.perf_counter()
    ev_a = events_mod.load_event(args.event_a)
    ev_b = events_mod.load_event(args.event_b)
    P = events_mod.normalize(ev_a)
    Q = events_mod.normalize(ev_b)
    artifacts = []
    report = {"method": args.method,
              "event_a": args.event_a, "event_b": args.event_b}
    config = {"method": args.method, "epsilon": args.epsilon,
              "steps": args.steps, "lr": args.lr, "hidden": args.hidden,
              "group_size": args.group_size}

    if args.method == "exact":
        plan = ot.exact_emd(P, Q)
        report["emd"] = plan.cost
        if args.plan_out:
            np.savetxt(args.plan_out, plan.gamma)
            artifacts.append(args.plan_out)
    elif args.method == "sinkhorn":
        value, iters = ot.sinkhorn_emd(P, Q, args.epsilon)
        report["emd"] = value
        report["iterations"] = iters
    elif args.method == "dual":
        hidden = tuple(int(h) for h in args.hidden.split(",") if h)
        net = lipnet.LipschitzMLP.create(
            P.dim, hidden=hidden, group_size=args.group_size,
            seed=args.seed, zero_head=True)
        net.input_shift = P.weights @ P.points
        sample = shapes_mod.WeightedSample(Q.weights, Q.points)
        value, trained = fitter_mod.estimate_emd(
            P, sample, net, steps=args.steps, lr=args.lr, lr_decay=0.03)
        report["emd"] = value
        ckpt = args.checkpoint_out or os.path.join(args.out_dir,
                                                   "potential.json")
        os.makedirs(os.path.dirname(ckpt) or ".", exist_ok=True)
        lipnet.save_checkpoint(trained, ckpt)
        artifacts.append(ckpt)
    else:  # pragma: no cover
        raise InputError(f"unknown method {args.method}")

    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        artifacts.append(_write_manifest(args.out_dir, "emd", config,
                                         args.seed, artifacts, t0))
    _emit(report, args.format)
    return 0


# -- fit ----------------------------------------------------------------------

def cmd_fit(args):
    t0 = time.perf_counter()
    ev = events_mod.load_event(args.event)
    spec = shapes_mod.load_shape_spec(args.shape)
    cfg = _load_config(args.config, fitter_mod.FitConfig(seed=args.seed))
    os.makedirs(args.out_dir, exist_ok=True)
    artifacts = []

    try:
        trace = fitter_mod.fit(events_mod.normalize(ev), spec, cfg)
    except EmdfitError as exc:
        trace = getattr(exc, "trace", None)
        if trace is not None and trace.steps:
            path = os.path.join(args.out_dir, "trace_partial.jsonl")
            fitter_mod.save_trace(trace, path)
            print(f"divergence: partial trace in {path}", file=sys.stderr)
        raise

    trace_path = os.path.join(args.out_dir, "trace.jsonl")
    fitter_mod.save_trace(trace, trace_path)
    artifacts.append(trace_path)

    spec_path = os.path.join(args.out_dir, "final_shape.json")
    shapes_mod.save_shape_spec(trace.final_spec, spec_path)
    artifacts.append(spec_path)

    ckpt_path = os.path.join(args.out_dir, "potential.json")
    lipnet.save_checkpoint(trace.net, ckpt_path)
    artifacts.append(ckpt_path)

    grids = dict(trace.snapshots)
    grids["final"] = fitter_mod.potential_heatmap(
        trace.net, cfg.heatmap_bounds, cfg.heatmap_resolution)
    for tag, grid in grids.items():
        path = os.path.join(args.out_dir, f"heatmap_{tag}.txt")
        fitter_mod.save_heatmap(grid, cfg.heatmap_bounds, path)
        artifacts.append(path)
        if args.svg:
            sample = shapes_mod.sample(trace.final_spec)
            forces = fitter_mod.theta_forces(trace.net, sample)
            svg = svgplot.render_frame(
                cfg.heatmap_bounds, heatmap=grid,
                event_points=ev.points,
                event_weights=ev.energies / ev.energies.sum(),
                shape_points=sample.points, forces=forces,
                title=f"step {tag}  observable={trace.observable:.5f}")
            spath = os.path.join(args.out_dir, f"frame_{tag}.svg")
            with open(spath, "w") as fh:
                fh.write(svg)
            artifacts.append(spath)

    _write_manifest(args.out_dir, "fit", asdict(cfg), cfg.seed, artifacts, t0)
    _emit({"observable": trace.observable,
           "outer_steps": len(trace.steps),
           "out_dir": args.out_dir}, args.format)
    return 0


# -- subjets ------------------------------------------------------------------

def _subjet_cell(payload):
    """One (true_n, fit_n, trial) fit; runs in a worker process."""
    true_n, fit_n, trial, seed, cfg_dict, sigma, particles = payload
    cfg = fitter_mod.FitConfig(**cfg_dict)
    cell_seed = np.random.SeedSequence([seed, true_n, trial]).entropy
    ev = events_mod.gen_subjet_event(true_n, sigma=sigma,
                                     particles_per_center=particles,
                                     seed=[seed, true_n, trial])
    rng = np.random.default_rng([seed, true_n, fit_n, trial, 1])
    centers = rng.uniform(0.25, 0.75, size=(fit_n, 2))
    spec = shapes_mod.ShapeSpec.point_set(centers, weight_mode="learned")
    cfg = fitter_mod.FitConfig(**{**cfg_dict,
                                  "seed": int(rng.integers(2 ** 31))})
    try:
        trace = fitter_mod.fit(events_mod.normalize(ev), spec, cfg)
        return true_n, fit_n, trial, trace.observable, None
    except EmdfitError as exc:
        return true_n, fit_n, trial, None, str(exc)
    finally:
        del cell_seed


def cmd_subjets(args):
    t0 = time.perf_counter()
    true_ns = [int(x) for x in args.true_n.split(",") if x]
    fit_ns = [int(x) for x in args.fit_n.split(",") if x]
    if not true_ns or not fit_ns:
        raise InputError("true-n and fit-n lists must be non-empty")
    cfg = _load_config(args.config, fitter_mod.FitConfig(
        seed=args.seed, net_hidden=(32, 32, 32), outer_steps=150,
        warmup_inner_steps=300, refit_inner_steps=300))
    cfg_dict = asdict(cfg)
    jobs = [(tn, fn, tr, args.seed, cfg_dict, args.sigma,
             args.particles_per_center)
            for tn in true_ns for fn in fit_ns for tr in range(args.trials)]
    results = {}
    failures = {}
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outs = list(pool.map(_subjet_cell, jobs))
    else:
        outs = [_subjet_cell(j) for j in jobs]
    for tn, fn, tr, obs, err in outs:
        if err is None:
            results.setdefault((tn, fn), []).append(obs)
        else:
            failures.setdefault((tn, fn), []).append(err)

    table = {}
    for tn in true_ns:
        for fn in fit_ns:
            vals = results.get((tn, fn), [])
            table[f"true={tn},fit={fn}"] = {
                "mean": float(np.mean(vals)) if vals else None,
                "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                "n": len(vals),
                "failures": len(failures.get((tn, fn), [])),
            }
    report = {"matrix": table}
    if args.format == "json":
        print(json.dumps(report, indent=2))
    else:
        print("true\\fit " + " ".join(f"{fn:>10d}" for fn in fit_ns))
        for tn in true_ns:
            cells = []
            for fn in fit_ns:
                c = table[f"true={tn},fit={fn}"]
                cells.append(f"{c['mean']:.4f}±{c['std']:.3f}"
                             if c["mean"] is not None else "   failed ")
            print(f"{tn:>8d} " + " ".join(f"{c:>10s}" for c in cells))
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        path = os.path.join(args.out_dir, "subjet_matrix.json")
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2)
        _write_manifest(args.out_dir, "subjets",
                        {**asdict(cfg), "trials": args.trials,
                         "true_n": true_ns, "fit_n": fit_ns},
                        args.seed, [path], t0)
    return 0


# -- check --------------------------------------------------------------------

def _check_lipschitz(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(10):
        hidden = tuple(rng.choice([4, 8, 16])
                       for _ in range(rng.integers(1, 4)))
        g = int(rng.choice([1, 2, 4]))
        hidden = tuple(h - h % g or g for h in hidden)
        net = lipnet.LipschitzMLP.create(2, hidden=hidden, group_size=g,
                                         seed=int(rng.integers(2 ** 31)),
                                         zero_head=False)
        worst = max(worst, lipnet.lipschitz_ratio_check(
            net, 20000, seed=int(rng.integers(2 ** 31)), box=(-2, 2)))
    return worst <= 1 + 1e-6, f"max ratio {worst:.9f} (limit 1+1e-6)"


def _check_gradients(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(5):
        net = lipnet.LipschitzMLP.create(2, hidden=(8, 8), group_size=2,
                                         seed=int(rng.integers(2 ** 31)),
                                         zero_head=False)
        x = rng.uniform(-1, 1, 2)
        worst = max(worst, ad.finite_diff_check(
            lambda v: net.forward_graph(v), x, 1e-5))
    for k in range(3):
        tri = shapes_mod.ShapeSpec.triangle(rng.uniform(0, 1, (3, 2)),
                                            samples_per_component=6)
        worst = max(worst, shapes_mod.sample_jacobian_check(tri, step=1e-6))
    return worst <= 1e-4, f"max rel err {worst:.3e} (limit 1e-4)"


def _check_oracle(seed):
    rng = np.random.default_rng(seed)
    msgs = []
    ok = True
    for k in range(10):
        n, m = rng.integers(2, 12, 2)
        P = ot.DiscreteMeasure(rng.uniform(0.1, 1, n), rng.uniform(0, 1, n))
        Q = ot.DiscreteMeasure(rng.uniform(0.1, 1, m), rng.uniform(0, 1, m))
        gap = abs(ot.exact_emd(P, Q).cost - ot.emd_1d(P, Q))
        if gap > 1e-8:
            ok = False
            msgs.append(f"1-d cross-check gap {gap:.2e}")
    for k in range(10):
        n, m = rng.integers(2, 10, 2)
        P = ot.DiscreteMeasure(rng.uniform(0.1, 1, n),
                               rng.uniform(0, 1, (n, 2)))
        Q = ot.DiscreteMeasure(rng.uniform(0.1, 1, m),
                               rng.uniform(0, 1, (m, 2)))
        d_pq = ot.exact_emd(P, Q).cost
        d_qp = ot.exact_emd(Q, P).cost
        if abs(d_pq - d_qp) > 1e-8:
            ok = False
            msgs.append(f"symmetry gap {abs(d_pq - d_qp):.2e}")
    return ok, "; ".join(msgs) if msgs else "cross-checks within 1e-8"


def _check_duality(seed):
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for k in range(20):
        n, m = rng.integers(2, 15, 2)
        P = ot.DiscreteMeasure(rng.uniform(0.1, 1, n),
                               rng.uniform(0, 1, (n, 2)))
        Q = ot.DiscreteMeasure(rng.uniform(0.1, 1, m),
                               rng.uniform(0, 1, (m, 2)))
        net = lipnet.LipschitzMLP.create(2, hidden=(16, 16), group_size=2,
                                         seed=int(rng.integers(2 ** 31)),
                                         zero_head=False)
        a = P.weights / P.weights.sum()
        b = Q.weights / Q.weights.sum()
        dual = float(a @ net.forward(P.points) - b @ net.forward(Q.points))
        worst = max(worst, dual - ot.exact_emd(P, Q).cost)
    return worst <= 1e-6, f"max dual excess {worst:.3e} (limit 1e-6)"


_CHECKS = {
    "lipschitz": _check_lipschitz,
    "gradients": _check_gradients,
    "oracle": _check_oracle,
    "duality": _check_duality,
}


def cmd_check(args):
    names = list(_CHECKS) if args.suite == "all" else [args.suite]
    failed = False
    for name in names:
        ok, msg = _CHECKS[name](args.seed)
        print(f"{'PASS' if ok else 'FAIL'} {name}: {msg}")
        failed |= not ok
    return EXIT_CHECK_FAILED if failed else 0


# -- parser -------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="emdfit",
        description="Earth Mover's Distance estimation and geometric fitting")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=["text", "json"], default="text")
    common.add_argument("--deterministic", action="store_true",
                        help="assert fully seeded deterministic mode "
                             "(the default behavior; recorded in manifests)")

    g = sub.add_parser("gen", parents=[common], help="generate event files")
    g.add_argument("generator",
                   choices=["circles", "triangle-ellipse", "subjets"])
    g.add_argument("--out", required=True)
    g.add_argument("--event-format", choices=["csv", "jsonl"], default=None)
    g.add_argument("--points", type=int, default=64,
                   help="points per circle / per shape")
    g.add_argument("--centers", default="[[0.3,0.3],[0.7,0.35],[0.5,0.75]]",
                   help="JSON list of circle centers")
    g.add_argument("--radii", default="[0.15,0.12,0.18]",
                   help="JSON list of circle radii")
    g.add_argument("--jitter", type=float, default=0.0)
    g.add_argument("--triangle", default="[[0.15,0.2],[0.55,0.15],[0.3,0.55]]")
    g.add_argument("--ellipse-center", default="[0.68,0.68]")
    g.add_argument("--ellipse-a", type=float, default=0.22)
    g.add_argument("--ellipse-b", type=float, default=0.12)
    g.add_argument("--ellipse-rotation", type=float, default=0.6)
    g.add_argument("--n-centers", type=int, default=3)
    g.add_argument("--sigma", type=float, default=0.05)
    g.add_argument("--particles-per-center", type=int, default=10)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("emd", parents=[common],
                       help="distance between two events")
    e.add_argument("event_a")
    e.add_argument("event_b")
    e.add_argument("--method", choices=["exact", "dual", "sinkhorn"],
                   default="exact")
    e.add_argument("--epsilon", type=float, default=0.001)
    e.add_argument("--steps", type=int, default=2000,
                   help="dual ascent steps")
    e.add_argument("--lr", type=float, default=1e-2)
    e.add_argument("--hidden", default="64,64,64,64")
    e.add_argument("--group-size", type=int, default=2)
    e.add_argument("--plan-out", default=None,
                   help="write the exact transport plan (text matrix)")
    e.add_argument("--checkpoint-out", default=None)
    e.add_argument("--out-dir", default=None)
    e.set_defaults(func=cmd_emd)

    f = sub.add_parser("fit", parents=[common], help="minimax shape fit")
    f.add_argument("event")
    f.add_argument("shape", help="shape spec JSON file")
    f.add_argument("--config", default=None, help="fit config JSON file")
    f.add_argument("--out-dir", required=True)
    f.add_argument("--svg", action="store_true", help="write SVG frames")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("subjets", parents=[common],
                       help="N-subjet observable matrix")
    s.add_argument("--true-n", default="3,4,5")
    s.add_argument("--fit-n", default="3,4,5")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--sigma", type=float, default=0.05)
    s.add_argument("--particles-per-center", type=int, default=10)
    s.add_argument("--config", default=None)
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    s.add_argument("--out-dir", default=None)
    s.set_defaults(func=cmd_subjets)

    c = sub.add_parser("check", parents=[common], help="self-test suites")
    c.add_argument("suite", nargs="?", default="all",
                   choices=["all", *_CHECKS])
    c.set_defaults(func=cmd_check)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, ad.AutodiffError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
