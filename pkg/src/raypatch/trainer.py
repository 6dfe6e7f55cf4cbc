"""Optimization loop: bundle batching, rendering, losses, Adam updates.

One view per step. The central ray of every patch gets dense depth samples,
the surround gets sparse ones, and both groups render in two batched passes.
With two-pass sampling on, a detached stratified probe per group steers the
depth budget toward the current surface. All randomness flows through the
state's generator so runs (and resumed runs) reproduce bit-exactly.
"""
from __future__ import annotations

import json
import hashlib
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .fields import (EncodingConfig, FieldConfig, FieldParams, init_fields,
                     sdf_eval)
from .geometry import (BundleSchedule, build_bundles, bundle_size_schedule,
                       distance_mask)
from .losses import (ConvKernel, LossBreakdown, LossWeights, color_loss,
                     conv_loss, eikonal_from_gradients, eikonal_loss,
                     mask_loss, mean_loss, total_loss, variance_loss)
from .render import (DensityConfig, TraceConfig, density, importance_resample,
                     render_weights, rendered_depth, stratified_samples,
                     surface_render, volume_render)
from .scene import SceneDataset

_BETA1 = 0.9
_BETA2 = 0.999
_ADAM_EPS = 1e-8
_CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a loss term stops being finite; message carries the terms."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    n_bundles: int = 8
    bundle: BundleSchedule = BundleSchedule()
    patch: tuple[int, int] | None = None   # fixed sh x sw, overrides bundle
    field: FieldConfig = FieldConfig()
    lr: float = 5e-4
    lr_decay: float = 0.1          # endpoint ratio across the run
    n_dense: int = 64
    n_sparse: int = 16
    jitter: bool = True
    near: float = 0.0              # <= 0: derived per view from the scene
    far: float = 0.0
    alpha: float = 0.0             # <= 0: tracks 1/beta
    beta_start: float = 0.1
    beta_end: float = 0.01
    anneal_frac: float = 0.8       # share of the run spent annealing beta
    density_kind: str = "laplace"
    weights: LossWeights = LossWeights()
    l1_stats: bool = False
    pooled_stats: bool = False
    conv_kernel: str = "sobel"
    tau: float = 0.05              # patch depth-continuity threshold
    n_eik: int = 64
    eik_radius: float = 1.5        # eikonal ball, in scene radii
    mode: str = "volume"           # volume | surface
    two_pass: bool = True          # spend half the depth budget where a
                                   # detached probe put rendering weight
    use_masks: bool = False   # anchor bundles on mask foreground only
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps cannot be negative")
        if self.n_bundles < 1:
            raise ValueError("need at least one bundle per step")
        if self.patch is not None:
            object.__setattr__(self, "patch", tuple(int(x) for x in self.patch))
            if len(self.patch) != 2 or any(
                    x < 1 or x % 2 == 0 for x in self.patch):
                raise ValueError(f"patch {self.patch} must be two odd sizes")
        # zero is allowed as an explicit no-op update for testing
        if self.lr < 0:
            raise ValueError("learning rate cannot be negative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if not self.n_dense >= self.n_sparse >= 2:
            raise ValueError("need n_dense >= n_sparse >= 2")
        if self.beta_start <= 0 or self.beta_end <= 0:
            raise ValueError("beta endpoints must be positive")
        if not 0 < self.anneal_frac <= 1:
            raise ValueError("anneal_frac must be in (0, 1]")
        if self.mode not in ("volume", "surface"):
            raise ValueError(f"unknown train mode {self.mode!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["bundle"] = BundleSchedule(**d["bundle"])
    if d.get("patch") is not None:
        d["patch"] = tuple(d["patch"])
    fc = dict(d["field"])
    fc["pos_encoding"] = EncodingConfig(**fc["pos_encoding"])
    fc["dir_encoding"] = EncodingConfig(**fc["dir_encoding"])
    d["field"] = FieldConfig(**fc)
    d["weights"] = LossWeights(**d["weights"])
    return TrainConfig(**d)


# -- schedules ----------------------------------------------------------------

def lr_schedule(step: int, config: TrainConfig) -> float:
    """Exponential decay from lr to lr * lr_decay across the run."""
    if config.steps <= 1:
        return config.lr
    frac = min(max(step / (config.steps - 1), 0.0), 1.0)
    return config.lr * config.lr_decay ** frac


def beta_schedule(step: int, config: TrainConfig) -> float:
    """Log-linear anneal over the first anneal_frac of steps, then flat."""
    cut = config.anneal_frac * max(config.steps - 1, 1)
    u = min(max(step / cut, 0.0), 1.0)
    return float(math.exp((1.0 - u) * math.log(config.beta_start)
                          + u * math.log(config.beta_end)))


def density_schedule(step: int, config: TrainConfig) -> DensityConfig:
    beta = beta_schedule(step, config)
    alpha = config.alpha if config.alpha > 0 else 1.0 / beta
    return DensityConfig(alpha=alpha, beta=beta, kind=config.density_kind)


# -- optimizer ------------------------------------------------------------------

class AdamState:
    """First/second moment accumulators mirroring the parameter shapes."""

    def __init__(self, params: FieldParams):
        arrays = params.state_arrays()
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.count = 0

    def apply(self, params: FieldParams, grads: dict[str, np.ndarray],
              lr: float):
        self.count += 1
        bc1 = 1.0 - _BETA1 ** self.count
        bc2 = 1.0 - _BETA2 ** self.count
        for name, t in params.parameters():
            g = grads[name]
            if g.shape != t.data.shape:
                raise ValueError(f"gradient {name}: shape {g.shape} "
                                 f"!= {t.data.shape}")
            m, v = self.m[name], self.v[name]
            m *= _BETA1
            m += (1.0 - _BETA1) * g
            v *= _BETA2
            v += (1.0 - _BETA2) * g * g
            t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + _ADAM_EPS)
            t.grad = None


@dataclass
class TrainState:
    params: FieldParams
    opt: AdamState
    rng: np.random.Generator
    config: TrainConfig
    step: int = 0


def init_state(config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    params = init_fields(config.field, rng)
    return TrainState(params, AdamState(params), rng, config)


# -- one step ------------------------------------------------------------------

def near_far(view, dataset: SceneDataset, config: TrainConfig):
    if 0 < config.near < config.far:
        return config.near, config.far
    d = float(np.linalg.norm(view.camera.center - dataset.center))
    reach = 1.3 * dataset.radius
    return max(d - reach, 0.05), d + reach


def _ball_points(center, radius: float, n: int,
                 rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return np.asarray(center) + r * d


def _grid_from_groups(central: Tensor, surround: Tensor | None,
                      B: int, shape, c_flat: int, width: int) -> Tensor:
    """Reassemble [B, sh, sw, width] patches from center + surround rows."""
    sh, sw = shape
    if surround is None:
        return ad.reshape(central, (B, 1, 1, width))
    sur = ad.reshape(surround, (B, sh * sw - 1, width))
    mid = ad.reshape(central, (B, 1, width))
    flat = ad.concat([sur[:, :c_flat, :], mid, sur[:, c_flat:, :]], axis=1)
    return ad.reshape(flat, (B, sh, sw, width))


def _probe_weights(rays, near, far, n, params, dcfg, config, rng):
    """Detached stratified probe; returns the samples and their weights."""
    coarse = stratified_samples(rays, near, far, n, rng, jitter=config.jitter)
    with ad.no_grad(), Graph():
        s, _ = sdf_eval(params, Tensor(coarse.positions.reshape(-1, 3)))
        w = render_weights(ad.reshape(density(s, dcfg), coarse.t.shape),
                           coarse.deltas)
    return coarse, w.data


def _volume_forward(state, bundles, near, far, dcfg, config, rng):
    sh, sw = bundles[0].shape
    B = len(bundles)
    ci, cj = bundles[0].center_index
    c_flat = ci * sw + cj
    keep = np.ones((sh, sw), dtype=bool)
    keep[ci, cj] = False

    co = np.stack([b.origins[ci, cj] for b in bundles])
    cd = np.stack([b.dirs[ci, cj] for b in bundles])
    jrng = rng if config.jitter else None
    n_half = config.n_dense // 2
    two_pass = config.two_pass and n_half >= 2
    if two_pass:
        # half the central budget goes to uniform coverage, half lands in
        # the slab the probe found; the surround spends everything there
        coarse, cw = _probe_weights((co, cd), near, far, n_half,
                                    state.params, dcfg, config, jrng)
        central = importance_resample(coarse, cw, config.n_dense - n_half, jrng)
    else:
        central = stratified_samples((co, cd), near, far, config.n_dense,
                                     jrng, jitter=config.jitter)
    res_c = volume_render(central, state.params, dcfg)

    res_s = None
    if sh * sw > 1:
        so = np.concatenate([b.origins[keep] for b in bundles])
        sd = np.concatenate([b.dirs[keep] for b in bundles])
        if two_pass:
            s_coarse, sw_ = _probe_weights((so, sd), near, far, n_half,
                                           state.params, dcfg, config, jrng)
            surround = importance_resample(s_coarse, sw_, config.n_sparse,
                                           jrng, include_original=False)
        else:
            surround = stratified_samples((so, sd), near, far, config.n_sparse,
                                          jrng, jitter=config.jitter)
        res_s = volume_render(surround, state.params, dcfg)

    grid = _grid_from_groups(res_c.color,
                             None if res_s is None else res_s.color,
                             B, (sh, sw), c_flat, 3)

    # detached surface points feed the depth-continuity masks
    pts = np.empty((B, sh * sw, 3))
    pts[:, c_flat] = rendered_depth(res_c)
    if res_s is not None:
        pts[:, keep.ravel()] = rendered_depth(res_s).reshape(B, sh * sw - 1, 3)

    normals = res_c.sample_normals
    if res_s is not None:
        normals = ad.concat([normals, res_s.sample_normals], axis=0)

    opacity = ad.sub(1.0, res_c.transmittance_final)
    if res_s is not None:
        opacity = ad.concat([opacity,
                             ad.sub(1.0, res_s.transmittance_final)], axis=0)
    return grid, pts, normals, opacity, keep, (ci, cj)


def _surface_forward(state, bundles, near, far, config):
    sh, sw = bundles[0].shape
    tcfg = TraceConfig(t_min=near, t_max=far, eps=1e-6, max_steps=128)
    grids, pts, normals, opacity = [], [], [], []
    for b in bundles:
        res = surface_render(b, state.params, tcfg)
        grids.append(ad.reshape(res.color, (1, sh, sw, 3)))
        pts.append(rendered_depth(res).reshape(1, sh * sw, 3))
        if res.sample_normals is not None:
            normals.append(res.sample_normals)
        opacity.append(ad.sub(1.0, res.transmittance_final))
    grid = grids[0] if len(grids) == 1 else ad.concat(grids, axis=0)
    normals = (None if not normals else
               normals[0] if len(normals) == 1 else ad.concat(normals, axis=0))
    opacity = opacity[0] if len(opacity) == 1 else ad.concat(opacity, axis=0)
    ci, cj = bundles[0].center_index
    keep = np.ones((sh, sw), dtype=bool)
    keep[ci, cj] = False
    return grid, np.concatenate(pts), normals, opacity, keep, (ci, cj)


def train_step(state: TrainState, dataset: SceneDataset,
               config: TrainConfig | None = None,
               rng: np.random.Generator | None = None
               ) -> tuple[TrainState, LossBreakdown]:
    """Sample one view, render n fresh bundles, and apply one Adam update."""
    config = state.config if config is None else config
    rng = state.rng if rng is None else rng
    if not dataset.views:
        raise ValueError("dataset has no views")

    view_idx = int(rng.integers(len(dataset.views)))
    view = dataset.views[view_idx]
    s = (config.patch if config.patch is not None
         else bundle_size_schedule(state.step, config.bundle))
    anchor_mask = view.mask if (config.use_masks and view.mask is not None) else None
    bundles = build_bundles(view.camera, view.image, config.n_bundles, s,
                            rng, mask=anchor_mask, view_id=view_idx)
    near, far = near_far(view, dataset, config)
    dcfg = density_schedule(state.step, config)
    B = len(bundles)

    with Graph():
        if config.mode == "surface":
            grid, pts, normals, opacity, keep, center = _surface_forward(
                state, bundles, near, far, config)
        else:
            grid, pts, normals, opacity, keep, center = _volume_forward(
                state, bundles, near, far, dcfg, config, rng)

        truth = np.stack([b.true_colors for b in bundles])
        sh, sw = bundles[0].shape
        c_term = color_loss(ad.reshape(grid, (-1, 3)), truth.reshape(-1, 3))
        m_term = mean_loss(grid, truth, l1=config.l1_stats,
                           pooled=config.pooled_stats)
        v_term = variance_loss(grid, truth, l1=config.l1_stats,
                               pooled=config.pooled_stats)
        if min(sh, sw) >= 3:
            dmasks = [distance_mask(pts[k].reshape(sh, sw, 3), config.tau)
                      for k in range(B)]
            conv_term = conv_loss(grid, truth, dmasks,
                                  ConvKernel(config.conv_kernel))
        else:
            conv_term = Tensor(0.0)

        ball = _ball_points(dataset.center, config.eik_radius * dataset.radius,
                            config.n_eik, rng)
        eik = eikonal_loss(state.params, ball)
        if normals is not None:
            n_samp = normals.shape[0]
            w_samp = n_samp / (n_samp + config.n_eik)
            eik = ad.add(ad.mul(eikonal_from_gradients(normals), w_samp),
                         ad.mul(eik, 1.0 - w_samp))

        mask_term = None
        if config.weights.lambda_mask > 0 and view.mask is not None:
            ci, cj = center
            cen_px = np.stack([b.pixels[ci, cj] for b in bundles])
            if sh * sw > 1:
                sur_px = np.concatenate([b.pixels[keep] for b in bundles])
                px = np.concatenate([cen_px, sur_px])
            else:
                px = cen_px
            target = view.mask[px[:, 1], px[:, 0]]
            mask_term = mask_loss(opacity, target)

        bd = total_loss(c_term, m_term, v_term, conv_term, eik, mask_term,
                        config.weights)
        vals = bd.values()
        if not all(math.isfinite(x) for x in vals.values()):
            terms = ", ".join(f"{k}={x:.6g}" for k, x in vals.items())
            raise TrainingDiverged(
                f"non-finite loss at step {state.step}: {terms}")
        grads = ad.grad(bd.total, state.params.tensors())

    named = {name: g.data for (name, _), g in
             zip(state.params.parameters(), grads)}
    state.opt.apply(state.params, named, lr_schedule(state.step, config))
    state.step += 1
    return state, bd


# -- full runs -----------------------------------------------------------------

def format_log_record(rec: dict) -> str:
    parts = [f"step={rec['step']}"]
    parts += [f"{k}={rec[k]:.10g}" for k in
              ("total", "c", "m", "v", "conv", "eik", "mask_term",
               "lr", "beta")]
    parts.append(f"wall={rec['wall']:.3f}")
    return " ".join(parts)


def parse_log(path) -> list[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = {}
        for tok in line.split():
            k, val = tok.split("=", 1)
            rec[k] = int(val) if k == "step" else float(val)
        records.append(rec)
    return records


def train(dataset: SceneDataset, config: TrainConfig,
          state: TrainState | None = None, log_path=None,
          checkpoint_path=None, checkpoint_every: int = 0,
          progress=None) -> tuple[TrainState, list[dict]]:
    """Run (or resume) the loop to config.steps; returns per-step records."""
    if state is None:
        state = init_state(config)
    log_f = open(log_path, "a") if log_path else None
    records = []
    t0 = time.perf_counter()
    try:
        while state.step < config.steps:
            k = state.step
            state, bd = train_step(state, dataset, config)
            rec = {"step": k, **bd.values(),
                   "lr": lr_schedule(k, config),
                   "beta": beta_schedule(k, config),
                   "wall": time.perf_counter() - t0}
            records.append(rec)
            if log_f:
                log_f.write(format_log_record(rec) + "\n")
            if (checkpoint_path and checkpoint_every > 0
                    and (state.step % checkpoint_every == 0
                         or state.step == config.steps)):
                checkpoint_save(state, checkpoint_path)
            if progress is not None:
                progress(rec)
    finally:
        if log_f:
            log_f.close()
    return state, records


# -- checkpoints ----------------------------------------------------------------

def checkpoint_save(state: TrainState, path):
    arrays = {}
    for name, t in state.params.parameters():
        arrays[f"param:{name}"] = t.data
    for name, a in state.opt.m.items():
        arrays[f"adam_m:{name}"] = a
    for name, a in state.opt.v.items():
        arrays[f"adam_v:{name}"] = a
    meta = {
        "version": _CKPT_VERSION,
        "config_hash": config_hash(state.config),
        "config": asdict(state.config),
        "step": state.step,
        "adam_count": state.opt.count,
        "rng": state.rng.bit_generator.state,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def checkpoint_load(path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState; a given config must hash-match the stored one."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing checkpoint {p}")
    try:
        data = np.load(p)
        if "meta" not in data:
            raise ValueError("no metadata record")
        meta = json.loads(bytes(bytearray(data["meta"])).decode())
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise ValueError(f"corrupt checkpoint {p}: {e}") from e
    if meta.get("version") != _CKPT_VERSION:
        raise ValueError(f"checkpoint {p} has version {meta.get('version')}, "
                         f"this build reads {_CKPT_VERSION}")
    if config is not None and config_hash(config) != meta["config_hash"]:
        raise ValueError(
            f"checkpoint was written with config hash {meta['config_hash']}, "
            f"the current config hashes to {config_hash(config)}")
    config = config if config is not None else config_from_dict(meta["config"])

    params = init_fields(config.field, np.random.default_rng(config.seed))
    params.load_arrays({k[len("param:"):]: data[k] for k in data.files
                        if k.startswith("param:")})
    opt = AdamState(params)
    opt.count = int(meta["adam_count"])
    for name in opt.m:
        m = data[f"adam_m:{name}"]
        v = data[f"adam_v:{name}"]
        if m.shape != opt.m[name].shape or v.shape != opt.v[name].shape:
            raise ValueError(f"moment {name}: stored shape mismatch")
        opt.m[name] = m.astype(np.float64)
        opt.v[name] = v.astype(np.float64)
    rng = np.random.default_rng(config.seed)
    rng.bit_generator.state = meta["rng"]
    return TrainState(params, opt, rng, config, step=int(meta["step"]))
