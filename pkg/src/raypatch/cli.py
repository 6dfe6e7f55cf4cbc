"""Command-line front end: synth, train, render, mesh, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 data error (missing/corrupt files,
bad config values), 3 numerical failure (diverged training, non-finite math).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .fields import AnalyticShape, sine_texture
from .losses import LossWeights
from .render import render_view
from .scene import (EvalReport, chamfer, load_scene, marching_cubes, psnr,
                    read_mesh, save_scene, synth_scene, write_image,
                    write_mesh)
from .trainer import (TrainConfig, TrainingDiverged, checkpoint_load,
                      checkpoint_save, config_from_dict, config_hash,
                      density_schedule, format_log_record, init_state,
                      near_far, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; we reserve 2 for data errors,
    # so route parse failures through an exception main() maps to exit 1.
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


# -- run configuration ----------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on; serialized to <out>/config.json up front."""

    train: TrainConfig = field(default_factory=TrainConfig)
    scene: str = ""
    out: str = ""
    checkpoint_every: int = 0
    mesh_res: int = 64
    eval_points: int = 100000
    n_coarse: int = 64
    n_fine: int = 32
    chunk: int = 512
    threads: int = 1          # recorded; execution is always single-threaded
    deterministic: bool = True  # recorded; runs are deterministic regardless

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def _deep_merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if k not in base:
            raise ValueError(f"unknown config field {k!r}")
        if isinstance(v, dict) and isinstance(base[k], dict):
            out[k] = _deep_merge(base[k], v)
        else:
            out[k] = v
    return out


def run_config_from_dict(d: dict) -> RunConfig:
    merged = _deep_merge(asdict(RunConfig()), d)
    merged["train"] = config_from_dict(merged["train"])
    return RunConfig(**merged)


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing config file {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt config file {p}: {e}") from e
    if not isinstance(d, dict):
        raise ValueError(f"config file {p} must hold a JSON object")
    return run_config_from_dict(d)


# -- flag value parsers ----------------------------------------------------------

def _parse_vec(text: str, n: int, name: str) -> tuple[float, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise _UsageError(f"{name} needs {n} comma-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise _UsageError(f"{name}: could not parse {text!r} as numbers") from None


def _parse_patch(text: str) -> tuple[int, int]:
    """'5' -> (5, 5); '5x7' -> (5, 7)."""
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise _UsageError(f"--bundle-size: could not parse {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise _UsageError(f"--bundle-size wants S or HxW, got {text!r}")
    return (dims[0], dims[1])


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p != ""]
    except ValueError:
        raise _UsageError(f"--views: could not parse {text!r}") from None


# -- loss-arm presets -------------------------------------------------------------

_ARMS = ("bundle", "mv-l1", "mv-l2", "laplace", "sobel")


def arm_config(base: TrainConfig, arm: str) -> TrainConfig:
    """Named loss configurations used by the comparison grid.

    All arms keep the color and eikonal terms; they differ in which patch
    statistics are penalized and with which kernel.
    """
    w = base.weights
    if arm == "bundle":
        return replace(base, weights=replace(w, lambda_m=0.0, lambda_v=0.0,
                                             lambda_conv=0.0))
    if arm == "mv-l1":
        return replace(base, l1_stats=True,
                       weights=replace(w, lambda_conv=0.0))
    if arm == "mv-l2":
        return replace(base, weights=replace(w, lambda_conv=0.0))
    if arm in ("laplace", "sobel"):
        return replace(base, conv_kernel=arm)
    raise ValueError(f"unknown loss arm {arm!r}; choose from {list(_ARMS)}")


def _resolve_train_config(args) -> RunConfig:
    """defaults <- --config file <- individual flags."""
    cfg = load_run_config(args.config) if args.config else RunConfig()
    tc = cfg.train
    if getattr(args, "loss_arm", None):
        tc = arm_config(tc, args.loss_arm)
    overrides = {}
    if args.epochs is not None:
        overrides["steps"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.bundles is not None:
        overrides["n_bundles"] = args.bundles
    if args.bundle_size is not None:
        overrides["patch"] = _parse_patch(args.bundle_size)
    if args.render_mode is not None:
        overrides["mode"] = args.render_mode
    if getattr(args, "lr", None) is not None:
        overrides["lr"] = args.lr
    if overrides:
        tc = replace(tc, **overrides)
    run_overrides = {"train": tc}
    for name in ("scene", "out"):
        if getattr(args, name, None):
            run_overrides[name] = str(getattr(args, name))
    for name in ("checkpoint_every", "threads"):
        if getattr(args, name, None) is not None:
            run_overrides[name] = getattr(args, name)
    if getattr(args, "deterministic", False):
        run_overrides["deterministic"] = True
    return replace(cfg, **run_overrides)


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    kw = {"kind": args.shape, "center": _parse_vec(args.center, 3, "--center")}
    if args.shape == "sphere":
        kw["radius"] = args.radius
    elif args.shape == "box":
        kw["half_extents"] = _parse_vec(args.half_extents, 3, "--half-extents")
    elif args.shape == "torus":
        kw["radii"] = _parse_vec(args.radii, 2, "--radii")
    shape = AnalyticShape(**kw)
    if args.texture < 0:
        raise ValueError("--texture must be >= 0")
    albedo = sine_texture(freq=args.texture) if args.texture > 0 else (0.8, 0.45, 0.3)
    ds = synth_scene(shape, n_views=args.views, res=args.res,
                     light=_parse_vec(args.light, 3, "--light"),
                     albedo=albedo,
                     ambient=args.ambient, distance=args.distance,
                     n_points=args.points, seed=args.seed)
    save_scene(ds, args.out)
    print(f"wrote {len(ds.views)} views at {args.res}x{args.res} "
          f"and {len(ds.gt_points)} surface points to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    if not cfg.scene:
        raise _UsageError("train: --scene is required (flag or config file)")
    ds = load_scene(cfg.scene)
    out = Path(cfg.out or args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    ckpt = out / "last.npz"
    state = init_state(cfg.train)
    if cfg.train.steps == 0:
        checkpoint_save(state, ckpt)
        print(f"0 steps requested; wrote config and initial checkpoint to {out}")
        return EXIT_OK

    every = max(1, cfg.train.steps // 10)

    def progress(rec):
        if rec["step"] % every == 0 or rec["step"] == cfg.train.steps - 1:
            print(format_log_record(rec))

    state, records = train(ds, cfg.train, state=state,
                           log_path=out / "train.log",
                           checkpoint_path=ckpt,
                           checkpoint_every=cfg.checkpoint_every,
                           progress=progress if not args.quiet else None)
    checkpoint_save(state, ckpt)
    print(f"finished {state.step} steps; final total={records[-1]['total']:.6g} "
          f"-> {ckpt}")
    return EXIT_OK


def cmd_render(args) -> int:
    state = checkpoint_load(args.checkpoint)
    ds = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = _parse_ids(args.views) if args.views else list(range(len(ds.views)))
    for i in ids:
        if not 0 <= i < len(ds.views):
            raise ValueError(f"view {i} out of range; scene has {len(ds.views)}")
    dcfg = density_schedule(state.step, state.config)
    mode = args.render_mode or state.config.mode
    for i in ids:
        view = ds.views[i]
        nf = near_far(view, ds, state.config)
        res = render_view(view.camera, state.params, dcfg, *nf, mode=mode,
                          n_coarse=args.n_coarse, n_fine=args.n_fine,
                          chunk=args.chunk)
        path = out / f"view_{i:03d}.png"
        write_image(res["color"], path)
        print(f"view {i}: psnr={psnr(res['color'], view.image):.2f} dB -> {path}")
    return EXIT_OK


def _mesh_bounds(args, ds=None):
    if ds is not None:
        center, radius = np.asarray(ds.center), ds.radius
    else:
        center = np.asarray(_parse_vec(args.center, 3, "--center"))
        radius = args.radius
    pad = 1.2 * radius
    return tuple(center - pad), tuple(center + pad)


def cmd_mesh(args) -> int:
    state = checkpoint_load(args.checkpoint)
    ds = load_scene(args.scene) if args.scene else None
    lower, upper = _mesh_bounds(args, ds)
    mesh = marching_cubes(state.params, lower=lower, upper=upper, res=args.res)
    if len(mesh.triangles) == 0:
        print("warning: no surface crossed the sampled volume", file=sys.stderr)
    write_mesh(mesh, args.out)
    print(f"wrote {len(mesh.vertices)} vertices / {len(mesh.triangles)} "
          f"triangles to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    ds = load_scene(args.scene)
    timings["load"] = time.perf_counter() - t0

    state = None
    t0 = time.perf_counter()
    if args.checkpoint:
        state = checkpoint_load(args.checkpoint)
        lower, upper = _mesh_bounds(args, ds)
        mesh = marching_cubes(state.params, lower=lower, upper=upper,
                              res=args.res)
    else:
        mesh = read_mesh(args.mesh)
    timings["mesh"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if ds.gt_points is not None and len(mesh.triangles) > 0:
        dist = chamfer(mesh, ds.gt_points, n_samples=args.points,
                       rng=np.random.default_rng(0))
    else:
        dist = float("nan")  # no reference points, or an empty mesh
    timings["chamfer"] = time.perf_counter() - t0

    psnrs: list[float] = []
    t0 = time.perf_counter()
    if state is not None and args.psnr_views != 0:
        n = len(ds.views) if args.psnr_views < 0 else min(args.psnr_views,
                                                          len(ds.views))
        dcfg = density_schedule(state.step, state.config)
        for view in ds.views[:n]:
            nf = near_far(view, ds, state.config)
            res = render_view(view.camera, state.params, dcfg, *nf,
                              mode=state.config.mode, n_coarse=args.n_coarse,
                              n_fine=args.n_fine, chunk=args.chunk)
            psnrs.append(psnr(res["color"], view.image))
    timings["render"] = time.perf_counter() - t0

    report = EvalReport(
        chamfer=dist, psnr_per_view=psnrs,
        psnr_mean=float(np.mean(psnrs)) if psnrs else 0.0,
        config_hash=config_hash(state.config) if state is not None else "",
        timings=timings)
    report.save(args.out)
    print(f"desk-scale Chamfer = {dist:.6g}")
    if psnrs:
        print(f"PSNR over {len(psnrs)} views: mean = {report.psnr_mean:.2f} dB")
    print(f"report -> {args.out}")
    return EXIT_OK


# -- comparison grid ----------------------------------------------------------------

# (label, loss arm, patch shape, bundle count); several labels intentionally
# repeat one configuration so every grid axis reads as a complete sweep.
_GRID = [
    ("exp1", "bundle", (3, 3), 229),
    ("exp2", "mv-l1", (3, 3), 229),
    ("exp3", "mv-l2", (3, 3), 229),
    ("exp4", "laplace", (3, 3), 229),
    ("exp5", "sobel", (3, 3), 229),
    ("exp6", "sobel", (3, 3), 229),
    ("exp7", "sobel", (5, 7), 229),
    ("exp8", "sobel", (7, 7), 229),
    ("exp9", "sobel", (3, 3), 57),
    ("exp10", "sobel", (3, 3), 114),
    ("exp11", "sobel", (3, 3), 229),
]


def _run_arm(ds, base: TrainConfig, arm: str, patch, count: int, seed: int,
             mesh_res: int, n_points: int) -> float:
    cfg = arm_config(replace(base, patch=patch, n_bundles=count, seed=seed), arm)
    state, _ = train(ds, cfg)
    lower = tuple(np.asarray(ds.center) - 1.2 * ds.radius)
    upper = tuple(np.asarray(ds.center) + 1.2 * ds.radius)
    mesh = marching_cubes(state.params, lower=lower, upper=upper, res=mesh_res)
    if len(mesh.triangles) == 0:
        return float("inf")
    return chamfer(mesh, ds.gt_points, n_samples=n_points,
                   rng=np.random.default_rng(seed))


def cmd_ablate(args) -> int:
    ds = load_scene(args.scene)
    if ds.gt_points is None:
        raise ValueError("scene has no reference surface points to score against")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    base = TrainConfig(steps=args.steps, n_dense=args.n_dense,
                       n_sparse=args.n_sparse, seed=args.seed)
    run_cfg = RunConfig(train=base, scene=str(args.scene), out=str(out),
                        mesh_res=args.mesh_res, eval_points=args.points)
    run_cfg.save(out / "config.json")

    cache: dict[tuple, float] = {}
    rows = []
    for label, arm, patch, count in _GRID:
        dists = []
        for s in range(args.seeds):
            key = (arm, patch, count, args.seed + s)
            if key not in cache:
                t0 = time.perf_counter()
                cache[key] = _run_arm(ds, base, arm, patch, count,
                                      args.seed + s, args.mesh_res, args.points)
                if not args.quiet:
                    print(f"{label} {arm} {patch[0]}x{patch[1]} n={count} "
                          f"seed={args.seed + s}: chamfer={cache[key]:.6g} "
                          f"({time.perf_counter() - t0:.1f}s)")
            dists.append(cache[key])
        rows.append({"method": label, "arm": arm, "size": list(patch),
                     "count": count, "chamfer_mean": float(np.mean(dists)),
                     "chamfer": dists})

    header = f"{'method':<8}{'loss':<10}{'size':<7}{'bundles':>8}{'chamfer':>12}"
    lines = [header]
    for r in rows:
        lines.append(f"{r['method']:<8}{r['arm']:<10}"
                     f"{r['size'][0]}x{r['size'][1]:<5}{r['count']:>8}"
                     f"{r['chamfer_mean']:>12.6f}")
    table = "\n".join(lines)
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(
        {"steps": args.steps, "seeds": args.seeds, "rows": rows}, indent=2)
        + "\n")
    print(table)
    print(f"tables -> {out / 'ablation.txt'}, {out / 'ablation.json'}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _add_run_flags(p):
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--epochs", type=int, help="training steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--bundles", type=int, help="patches per step")
    p.add_argument("--bundle-size", help="patch shape: S or HxW (odd)")
    p.add_argument("--render-mode", choices=("volume", "surface"))
    p.add_argument("--loss-arm", choices=_ARMS)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--threads", type=int, help="recorded in the run config")
    p.add_argument("--deterministic", action="store_true",
                   help="recorded in the run config; runs are deterministic")
    p.add_argument("--quiet", action="store_true")


def _add_render_flags(p):
    p.add_argument("--n-coarse", type=int, default=64)
    p.add_argument("--n-fine", type=int, default=32)
    p.add_argument("--chunk", type=int, default=512)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="raypatch",
                     description="patch-bundle neural surface reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="ray-trace an analytic scene to disk")
    p.add_argument("--shape", choices=("sphere", "box", "torus"),
                   default="sphere")
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=0.5)
    p.add_argument("--half-extents", default="0.5,0.5,0.5")
    p.add_argument("--radii", default="0.5,0.2")
    p.add_argument("--center", default="0,0,0")
    p.add_argument("--views", type=int, default=30)
    p.add_argument("--res", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=10000)
    p.add_argument("--light", default="0.4,0.6,-0.7")
    p.add_argument("--ambient", type=float, default=0.2)
    p.add_argument("--distance", type=float, default=3.0)
    p.add_argument("--texture", type=float, default=0.0,
                   help="sine-texture frequency; 0 keeps the albedo flat")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a field to a scene")
    p.add_argument("--scene")
    p.add_argument("--out", default=".")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", help="comma-separated view indices; default all")
    p.add_argument("--render-mode", choices=("volume", "surface"))
    _add_render_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", help="extract a triangle mesh from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--scene", help="take bounds from this scene")
    p.add_argument("--center", default="0,0,0")
    p.add_argument("--radius", type=float, default=1.0)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="score a checkpoint or mesh against a scene")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--mesh")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--res", type=int, default=128, help="mesh grid resolution")
    p.add_argument("--points", type=int, default=100000)
    p.add_argument("--psnr-views", type=int, default=4,
                   help="views to render for PSNR; 0 skips, -1 means all")
    p.add_argument("--center", default="0,0,0")
    p.add_argument("--radius", type=float, default=1.0)
    _add_render_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the loss/size/count comparison grid")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--mesh-res", type=int, default=48)
    # the 7x7 row peaks near 4 GB at these sample counts; raise with care
    p.add_argument("--n-dense", type=int, default=16)
    p.add_argument("--n-sparse", type=int, default=4)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ad.DomainError, FloatingPointError, ZeroDivisionError,
            np.linalg.LinAlgError) as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
