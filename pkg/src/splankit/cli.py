"""Command-line entry point: ``splankit <command> ...``.

Commands
--------
gen-scene   seeded box scene plus its splat conversion
risk-eval   closed-form risk of balls or of a static arm configuration
plan        receding-horizon run from a problem file
classify    precision/recall sweep of the three collision classifiers
render      color, depth and transmittance images of a splat scene
grad-check  finite-difference check of the rasterizer backward pass

Exit codes: 0 success, 2 expected negative outcome (failed plan or failed
check), 1 error.  Every output carries the tool version, the full
configuration and the seed; ``--deterministic`` drops timestamps and wall
times so repeated runs are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("splankit")

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2


def _threads(args) -> int:
    env = os.environ.get("SPLANKIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer SPLANKIT_THREADS=%r", env)
    return max(1, args.jobs)


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(n)


def _config(args) -> dict:
    skip = {"func", "verbose"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _meta(args) -> dict:
    meta = {"tool": "splankit", "version": __version__, "command": args.command, "seed": args.seed, "config": _config(args)}
    if not args.deterministic:
        meta["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return meta


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _load_splat(args):
    from .scene import load_scene
    from .scenegen import boxes_to_splat, load_gt

    if getattr(args, "scene", None):
        return load_scene(args.scene)
    if getattr(args, "gt", None):
        return boxes_to_splat(load_gt(args.gt), args.h, args.rho_t)
    raise ValueError("need --scene or --gt")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scene(args) -> int:
    from .scene import save_scene
    from .scenegen import boxes_to_splat, gen_scene, save_gt

    out = _out_dir(args)
    gt = gen_scene(args.n, args.seed, half_extent=args.half_extent, keep_out=args.keep_out,
                   bounds=((-args.bound,) * 3, (args.bound,) * 3))
    meta = _meta(args)
    doc = gt.to_dict()
    doc["meta"] = meta
    _write_json(out / "scene_gt.json", doc)
    if gt.boxes:
        splat = boxes_to_splat(gt, args.h, args.rho_t, surface_only=args.surface_only)
    else:
        from .scene import SplatScene

        splat = SplatScene.empty()
    save_scene(splat, out / "scene.splat", comments=meta)
    print(json.dumps({"boxes": len(gt.boxes), "components": len(splat), "out": str(out)}, sort_keys=True))
    return EXIT_OK


def _balls_from_args(args):
    from .arm import default_arm, load_arm
    from .scenegen import static_sfo_spheres

    centers, radii = [], []
    for b in args.ball or []:
        centers.append(b[:3])
        radii.append(b[3])
    if args.balls:
        with open(args.balls, newline="", encoding="utf-8") as fh:
            for row in csv.reader(line for line in fh if not line.startswith("#")):
                if not row or row[0].strip() == "x":
                    continue
                centers.append([float(v) for v in row[:3]])
                radii.append(float(row[3]))
    if args.config is not None:
        arm = load_arm(args.arm) if args.arm else default_arm()
        c, r = static_sfo_spheres(arm, np.asarray(args.config, dtype=float), args.n_s, uniform=False)
        centers.extend(c.tolist())
        radii.extend(r.tolist())
    if not centers:
        raise ValueError("no balls given (use --ball, --balls or --config)")
    return np.asarray(centers, dtype=float).reshape(-1, 3), np.asarray(radii, dtype=float)


def cmd_risk_eval(args) -> int:
    from .risk import erf_volume_bound_batch, risk_from_H

    if not 0 < args.alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    scene = _load_splat(args)
    C, r = _balls_from_args(args)
    if np.any(r <= 0):
        raise ValueError("ball radii must be > 0")
    H = erf_volume_bound_batch(scene, C, r)
    V = risk_from_H(H)
    results = [
        {"center": c.tolist(), "radius": float(rr), "H": float(h), "value": float(v), "bound": float(v / args.alpha)}
        for c, rr, h, v in zip(C, r, H, V)
    ]
    doc = {"meta": _meta(args), "results": results, "max_value": float(V.max()), "max_bound": float(V.max() / args.alpha)}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def load_problem(path, deterministic: bool = False):
    """Build a :class:`PlanProblem` from a JSON problem file.

    Keys: ``scene`` (splat file) or ``gt`` (box file, converted with ``h`` and
    ``rho_t``), optional ``arm``, ``q0``, optional ``dq0``, ``goal``, and the
    optional numbers ``alpha``, ``beta``, ``eta``, ``t_plan``, ``t_fin``,
    ``n_t``, ``n_s``, ``budget``, ``sfo_mode``, ``max_iters``.  Relative paths
    are resolved against the problem file.
    """
    from .arm import default_arm, load_arm
    from .planner import PlanProblem
    from .risk import RiskParams
    from .scene import load_scene
    from .scenegen import boxes_to_splat, load_gt
    from .trajectory import InitialCondition, TrajParamSpace

    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent

    def rel(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    gt = load_gt(rel(doc["gt"])) if doc.get("gt") else None
    if doc.get("scene"):
        scene = load_scene(rel(doc["scene"]))
    elif gt is not None:
        scene = boxes_to_splat(gt, doc.get("h", 0.04), doc.get("rho_t", 100.0))
    else:
        raise ValueError("problem needs 'scene' or 'gt'")
    arm = load_arm(rel(doc["arm"])) if doc.get("arm") else default_arm()
    space = TrajParamSpace(arm.n_q, doc.get("eta", 3.0), doc.get("t_plan", 0.5), doc.get("t_fin", 1.0))
    q0 = np.asarray(doc["q0"], dtype=float)
    ic = InitialCondition(q0, np.asarray(doc.get("dq0", np.zeros_like(q0)), dtype=float))
    budget = None if deterministic else doc.get("budget", 0.5)
    problem = PlanProblem(scene, arm, space, ic, doc["goal"], RiskParams(doc.get("alpha", 0.025), doc.get("beta", 0.025)),
                          n_t=doc.get("n_t", 10), n_s=doc.get("n_s", 5), budget=budget, sfo_mode=doc.get("sfo_mode", "exact"))
    return problem, gt, int(doc.get("max_iters", 150)), doc


def cmd_plan(args) -> int:
    from .planner import receding_horizon_run
    from .scenegen import arm_clearance

    out = _out_dir(args)
    problem, gt, max_iters, doc = load_problem(args.problem, args.deterministic)
    if args.max_iters is not None:
        max_iters = args.max_iters
    t0 = time.perf_counter()
    run = receding_horizon_run(problem, max_iters=max_iters)
    wall = time.perf_counter() - t0
    meta = _meta(args)
    meta["problem"] = doc
    n_q = problem.arm.n_q
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "status", "residual"] + [f"q{j}" for j in range(n_q)] + [f"dq{j}" for j in range(n_q)])
        for row in run.trace:
            w.writerow([row["step"], repr(float(row["t"])), row["status"], repr(float(row["residual"]))]
                       + [repr(float(v)) for v in row["q"]] + [repr(float(v)) for v in row["dq"]])
    summary = {
        "meta": meta,
        "status": run.status,
        "success": run.success,
        "steps": len(run.steps),
        "braked": any(s.t0 > 0 for s in run.segments),
        "at_rest": bool(np.all(run.dq == 0.0)),
        "goal_reached_q": next((row["q"].tolist() for row in reversed(run.trace) if row["status"] != "brake"), None),
        "final_q": run.q.tolist(),
        "final_dq": run.dq.tolist(),
        "step_status": [s.status for s in run.steps],
        "wall_time": None if args.deterministic else wall,
        "step_wall_times": None if args.deterministic else [s.wall_time for s in run.steps],
    }
    if gt is not None:
        _, Q, _ = run.sample(problem.space, 1e-3)
        clear = arm_clearance(gt, problem.arm, Q) if len(Q) else np.array([np.inf])
        summary["gt_min_clearance"] = float(np.min(clear))
        summary["gt_collision"] = bool(np.min(clear) < 0)
    _write_json(out / "summary.json", summary)
    print(json.dumps({"status": run.status, "steps": len(run.steps), "out": str(out)}, sort_keys=True))
    return EXIT_OK if run.success else EXIT_NEGATIVE


def cmd_classify(args) -> int:
    from .arm import default_arm, load_arm
    from .baselines import pr_auc, run_classification, write_pr_csv

    out = _out_dir(args)
    arm = load_arm(args.arm) if args.arm else default_arm()
    methods = tuple(args.methods)
    thresholds = None
    if args.thresholds is not None:
        thresholds = {m: np.asarray(args.thresholds, dtype=float) for m in methods}
    seeds = range(args.seed, args.seed + args.max_seeds)
    recs, used, skipped = run_classification(
        arm, seeds, args.n_scenes, args.per_category, args.n_obstacles, methods, thresholds,
        tuple(args.catnips_nmax), args.h, args.rho_t, args.max_draws)
    if not used:
        raise RuntimeError("no scene could supply every category")
    meta = _meta(args)
    meta["scene_seeds"] = used
    meta["skipped_seeds"] = skipped
    write_pr_csv(recs, out / "pr.csv", {k: json.dumps(v, sort_keys=True) for k, v in meta.items()})
    auc = {m: pr_auc([r for r in recs if r.method == m]) for m in methods}
    conservative = {}
    for m in methods:
        mine = [r for r in recs if r.method == m]
        conservative[m] = max(r.recall for r in mine)
    _write_json(out / "summary.json", {"meta": meta, "auc": auc, "max_recall": conservative, "rows": len(recs)})
    print(json.dumps({"auc": auc, "scenes": used}, sort_keys=True))
    return EXIT_OK


def _camera(args):
    from .raster import Camera, load_camera

    if args.camera:
        return load_camera(args.camera)
    return Camera.look_at(args.eye, args.target, args.width, args.height, args.fov)


def cmd_render(args) -> int:
    from .raster import render, save_camera, write_pfm, write_ppm

    out = _out_dir(args)
    scene = _load_splat(args)
    cam = _camera(args)
    t0 = time.perf_counter()
    res = render(scene, cam)
    wall = time.perf_counter() - t0
    meta = _meta(args)
    write_ppm(out / "color.ppm", res.color, comment=json.dumps(meta, sort_keys=True))
    write_pfm(out / "color.pfm", res.color)
    write_pfm(out / "depth.pfm", res.depth)
    write_pfm(out / "transmittance.pfm", res.transmittance)
    save_camera(cam, out / "camera.json")
    _write_json(out / "render.json", {
        "meta": meta,
        "components": len(scene),
        "images": ["color.ppm", "color.pfm", "depth.pfm", "transmittance.pfm"],
        "min_transmittance": float(res.transmittance.min()),
        "wall_time": None if args.deterministic else wall,
    })
    print(json.dumps({"out": str(out), "components": len(scene)}, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .raster import Camera, GaussianParams, gradient_check, random_params

    out = _out_dir(args)
    if args.scene or args.gt:
        params = GaussianParams.from_scene(_load_splat(args))
        cam = _camera(args)
    else:
        params = random_params(np.random.default_rng(args.seed), args.n_gaussians)
        cam = Camera(args.width, args.height, 1.25 * args.width, 1.25 * args.height, args.width / 2, args.height / 2)
    rep = gradient_check(params, cam, seed=args.seed)
    rep["tolerance"] = args.tol
    rep["pass"] = rep["max_rel_err"] <= args.tol
    _write_json(out / "grad_check.json", {"meta": _meta(args), **rep})
    print(json.dumps({"max_rel_err": rep["max_rel_err"], "pass": rep["pass"]}, sort_keys=True))
    return EXIT_OK if rep["pass"] else EXIT_NEGATIVE


# ---------------------------------------------------------------------------
# parser


def _add_scene_source(p, required: bool = True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--scene", type=Path, help="splat scene file")
    g.add_argument("--gt", type=Path, help="box scene file (converted on the fly)")
    p.add_argument("--h", type=float, default=0.04, help="lattice spacing for --gt conversion [m]")
    p.add_argument("--rho-t", type=float, default=100.0, help="target density for --gt conversion [1/m]")


def _add_camera(p):
    p.add_argument("--camera", type=Path, help="camera file (JSON)")
    p.add_argument("--eye", type=float, nargs=3, default=[1.6, -1.6, 1.2])
    p.add_argument("--target", type=float, nargs=3, default=[0.0, 0.0, 0.2])
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--fov", type=float, default=60.0, help="horizontal field of view [deg]")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true", help="omit timestamps and wall times")
    common.add_argument("--jobs", type=int, default=1, help="worker cap (SPLANKIT_THREADS overrides)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="splankit", description="Risk-bounded planning in Gaussian splat scenes.")
    ap.add_argument("--version", action="version", version=f"splankit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", parents=[common], help="seeded box scene and its splat conversion")
    p.add_argument("--n", type=int, required=True, help="number of boxes")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--h", type=float, default=0.04)
    p.add_argument("--rho-t", type=float, default=100.0)
    p.add_argument("--half-extent", type=float, default=0.1)
    p.add_argument("--keep-out", type=float, default=0.3)
    p.add_argument("--bound", type=float, default=0.9, help="workspace half-width [m]")
    p.add_argument("--surface-only", action="store_true")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("risk-eval", parents=[common], help="closed-form risk values and collision bounds")
    _add_scene_source(p)
    p.add_argument("--ball", type=float, nargs=4, action="append", metavar=("X", "Y", "Z", "R"))
    p.add_argument("--balls", type=Path, help="CSV of x,y,z,r rows")
    p.add_argument("--config", type=float, nargs="+", help="static joint configuration")
    p.add_argument("--arm", type=Path)
    p.add_argument("--n-s", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.025)
    p.add_argument("--out", type=Path, help="JSON output path (stdout when omitted)")
    p.set_defaults(func=cmd_risk_eval)

    p = sub.add_parser("plan", parents=[common], help="receding-horizon run from a problem file")
    p.add_argument("problem", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-iters", type=int)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("classify", parents=[common], help="precision/recall sweep over seeded scenes")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--methods", nargs="+", default=["splanning", "splatnav", "catnips"],
                   choices=["splanning", "splatnav", "catnips"])
    p.add_argument("--thresholds", type=float, nargs="+", help="one threshold list shared by all methods")
    p.add_argument("--catnips-nmax", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--n-scenes", type=int, default=10)
    p.add_argument("--max-seeds", type=int, default=40, help="seeds tried, starting at --seed")
    p.add_argument("--per-category", type=int, default=10)
    p.add_argument("--n-obstacles", type=int, default=3)
    p.add_argument("--max-draws", type=int, default=200_000)
    p.add_argument("--h", type=float, default=0.04)
    p.add_argument("--rho-t", type=float, default=100.0)
    p.add_argument("--arm", type=Path)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("render", parents=[common], help="render color, depth and transmittance")
    _add_scene_source(p)
    _add_camera(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the render gradients")
    _add_scene_source(p, required=False)
    _add_camera(p)
    p.add_argument("--n-gaussians", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_grad_check, width=32, height=32)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(_threads(args)):
            return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"splankit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
