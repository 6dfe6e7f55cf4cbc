"""Ray sampling, SDF-to-density, volume rendering, and surface tracing.

Volume rendering uses the piecewise-constant quadrature w_i = T_i(1-e^{-s_i d_i})
which obeys sum(w) + T_final = 1 exactly up to rounding. Densities come from
the Laplace CDF of the signed distance (logistic available behind the same
config). Surface mode sphere-traces the zero set and differentiates through
the hit point implicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from . import fields as fields_mod
from .fields import FieldParams
from .geometry import Camera, Ray, RayBundle


@dataclass(frozen=True)
class DensityConfig:
    alpha: float = 1.0
    beta: float = 0.1
    kind: str = "laplace"  # laplace | logistic

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.kind not in ("laplace", "logistic"):
            raise ValueError(f"unknown density kind {self.kind!r}")


class SampleSet:
    """Per-ray increasing depths plus the rays they live on.

    t: [R, n] strictly increasing within [near, far). The last segment length
    is capped at (far - near) / n so the final sample carries finite measure.
    """

    def __init__(self, t: np.ndarray, origins: np.ndarray, dirs: np.ndarray,
                 near: float, far: float):
        t = np.atleast_2d(np.asarray(t, dtype=np.float64))
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        if not near < far:
            raise ValueError("need near < far")
        if t.shape[1] < 2:
            raise ValueError("need at least 2 samples per ray")
        if np.any(np.diff(t, axis=1) <= 0):
            raise ValueError("sample depths must be strictly increasing")
        if np.any(t < near) or np.any(t >= far):
            raise ValueError("sample depths must lie in [near, far)")
        if origins.shape != dirs.shape or len(origins) != len(t):
            raise ValueError("rays and depths disagree in count")
        self.t = t
        self.origins = origins
        self.dirs = dirs
        self.near = float(near)
        self.far = float(far)

    @property
    def n_rays(self) -> int:
        return self.t.shape[0]

    @property
    def n_samples(self) -> int:
        return self.t.shape[1]

    @property
    def deltas(self) -> np.ndarray:
        cap = (self.far - self.near) / self.n_samples
        return np.concatenate([np.diff(self.t, axis=1),
                               np.full((self.n_rays, 1), cap)], axis=1)

    @property
    def positions(self) -> np.ndarray:
        return self.origins[:, None, :] + self.t[:, :, None] * self.dirs[:, None, :]


def _ray_arrays(rays) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(rays, Ray):
        return rays.origin[None], rays.direction[None]
    o, d = rays
    return np.atleast_2d(o), np.atleast_2d(d)


def stratified_samples(rays, near: float, far: float, n: int,
                       rng: np.random.Generator | None = None,
                       jitter: bool = False) -> SampleSet:
    """One sample per uniform stratum: midpoints, or jittered from rng."""
    if not near < far:
        raise ValueError("need near < far")
    if n < 2:
        raise ValueError("need at least 2 samples")
    o, d = _ray_arrays(rays)
    edges = near + (far - near) * np.arange(n + 1) / n
    lower = np.broadcast_to(edges[:-1], (len(o), n))
    if jitter:
        if rng is None:
            raise ValueError("jitter requires an rng")
        u = rng.uniform(size=(len(o), n))
    else:
        u = 0.5
    t = lower + u * (far - near) / n
    return SampleSet(t, o, d, near, far)


def density(sdf, cfg: DensityConfig):
    """sigma = alpha * CDF(-sdf); monotone non-increasing in the distance."""
    if isinstance(sdf, Tensor):
        if cfg.kind == "logistic":
            return ad.mul(ad.sigmoid(ad.mul(sdf, -1.0 / cfg.beta)), cfg.alpha)
        decay = ad.texp(ad.mul(ad.tabs(sdf), -1.0 / cfg.beta))
        half = ad.mul(decay, 0.5)
        return ad.mul(ad.where(sdf.data >= 0, half, ad.sub(1.0, half)), cfg.alpha)
    s = np.asarray(sdf, dtype=np.float64)
    if cfg.kind == "logistic":
        return cfg.alpha / (1.0 + np.exp(np.minimum(s / cfg.beta, 700)))
    half = 0.5 * np.exp(-np.abs(s) / cfg.beta)
    return cfg.alpha * np.where(s >= 0, half, 1.0 - half)


def _optical_depth(sigmas: Tensor, deltas) -> Tensor:
    if isinstance(deltas, Tensor):
        if sigmas.shape != deltas.shape:
            raise ad.ShapeMismatchError("sigmas and deltas must share a shape")
        return ad.mul(sigmas, deltas)
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigmas.shape != deltas.shape:
        raise ad.ShapeMismatchError("sigmas and deltas must share a shape")
    return ad.mul(sigmas, Tensor(deltas))


def transmittance(sigmas: Tensor, deltas) -> Tensor:
    """T_i = exp(-sum_{j<i} sigma_j delta_j); T_0 = 1. Shapes [R, n]."""
    od = _optical_depth(sigmas, deltas)
    inner = ad.cumsum(od, axis=1)
    R = od.shape[0]
    excl = ad.concat([Tensor(np.zeros((R, 1))), inner[:, :-1]], axis=1)
    return ad.texp(ad.mul(excl, -1.0))


def render_weights(sigmas: Tensor, deltas) -> Tensor:
    """w_i = T_i * (1 - exp(-sigma_i delta_i)); sum(w) + T_final = 1."""
    od = _optical_depth(sigmas, deltas)
    T = transmittance(sigmas, deltas)
    return ad.mul(T, ad.sub(1.0, ad.texp(ad.mul(od, -1.0))))


def final_transmittance(sigmas: Tensor, deltas) -> Tensor:
    od = _optical_depth(sigmas, deltas)
    return ad.texp(ad.mul(ad.tsum(od, axis=1), -1.0))


def _field_sdf(field, x):
    """FieldParams or any object with its own sdf_eval(x) -> (sdf, feature)."""
    if hasattr(field, "sdf_eval"):
        return field.sdf_eval(x)
    return fields_mod.sdf_eval(field, x)


def _field_color(field, x, v, n, feat):
    if hasattr(field, "color_eval"):
        return field.color_eval(x, v, n, feat)
    return fields_mod.color_eval(field, x, v, n, feat)


def _field_fn(field):
    """Plain numpy sdf evaluator for tracing, for either field flavor."""
    if hasattr(field, "sdf_fn"):
        return field.sdf_fn()
    if not hasattr(field, "sdf_eval"):
        return fields_mod.sdf_fn(field)

    def fn(pts):
        with ad.no_grad():
            s, _ = field.sdf_eval(Tensor(np.atleast_2d(pts)))
        return s.data

    return fn


class RenderResult:
    """Per-ray rendered color/depth plus the tensors later losses reuse."""

    def __init__(self, color: Tensor, depth, weights, transmittance_final: Tensor,
                 origins: np.ndarray, dirs: np.ndarray, *, sample_positions=None,
                 sample_sdf=None, sample_normals=None, t=None):
        self.color = color                      # [R,3] Tensor
        self.depth = depth                      # [R] Tensor or ndarray
        self.weights = weights                  # [R,n] Tensor (volume mode)
        self.transmittance_final = transmittance_final  # [R] Tensor
        self.origins = origins
        self.dirs = dirs
        self.sample_positions = sample_positions  # [R*n,3] leaf Tensor
        self.sample_sdf = sample_sdf              # [R*n] Tensor
        self.sample_normals = sample_normals      # [R*n,3] Tensor (unnormalized)
        self.t = t                                # [R,n] ndarray

    @property
    def n_rays(self) -> int:
        return len(self.origins)


def _unit(g: Tensor, eps: float = 1e-9) -> Tensor:
    n = ad.tsqrt(ad.tsum(ad.mul(g, g), axis=1, keepdims=True))
    return ad.div(g, ad.add(n, eps))


def volume_render(samples: SampleSet, params: FieldParams, cfg: DensityConfig,
                  background=0.0) -> RenderResult:
    """Differentiable quadrature of color along every ray in the sample set."""
    R, n = samples.t.shape
    pos = Tensor(samples.positions.reshape(-1, 3), requires_grad=True)
    sdf, feat = _field_sdf(params, pos)
    (grad_pos,) = ad.grad(ad.tsum(sdf), [pos], create_graph=True)

    sigma = ad.reshape(density(sdf, cfg), (R, n))
    deltas = samples.deltas
    w = render_weights(sigma, deltas)
    t_final = final_transmittance(sigma, deltas)

    view = np.repeat(samples.dirs, n, axis=0)
    rgb = _field_color(params, pos, view, _unit(grad_pos), feat)
    w3 = ad.reshape(w, (R, n, 1))
    color = ad.tsum(ad.mul(w3, ad.reshape(rgb, (R, n, 3))), axis=1)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    if np.any(bg != 0):
        color = ad.add(color, ad.mul(ad.reshape(t_final, (R, 1)), Tensor(bg.copy())))

    acc = ad.tsum(w, axis=1)
    depth_raw = ad.div(ad.tsum(ad.mul(w, Tensor(samples.t)), axis=1),
                       ad.maximum_const(acc, 1e-12))
    depth = ad.clip(depth_raw, samples.near, samples.far)
    return RenderResult(color, depth, w, t_final, samples.origins, samples.dirs,
                        sample_positions=pos, sample_sdf=sdf,
                        sample_normals=grad_pos, t=samples.t)


def rendered_depth(result: RenderResult) -> np.ndarray:
    """Per-ray surface point origin + depth * direction (detached)."""
    d = result.depth.data if isinstance(result.depth, Tensor) else result.depth
    return result.origins + d[:, None] * result.dirs


def importance_resample(samples: SampleSet, weights: np.ndarray, n_new: int,
                        rng: np.random.Generator | None = None,
                        include_original: bool = True) -> SampleSet:
    """Inverse-CDF resampling of depths from the (detached) weight histogram.

    Returns the sorted union with the original depths by default. Without an
    rng the new depths sit at deterministic quantile midpoints.
    """
    if n_new < 1:
        raise ValueError("need n_new >= 1")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != samples.t.shape:
        raise ValueError("weights must match the sample grid")
    R, n = w.shape
    pdf = w + 1e-5
    pdf /= pdf.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n_new) + 0.5) / n_new, (R, n_new)).copy()
    else:
        u = (np.arange(n_new) + rng.uniform(size=(R, n_new))) / n_new

    # one flat searchsorted across rays: offset every row into its own value
    # band, then strip the per-row index stride
    offsets = 2.0 * np.arange(R)[:, None]
    idx = np.searchsorted((cdf + offsets).ravel(), (u + offsets).ravel(),
                          side="right").reshape(R, n_new)
    idx = np.clip(idx - (n + 1) * np.arange(R)[:, None], 1, n)

    # segment boundaries around each original sample
    mids = 0.5 * (samples.t[:, :-1] + samples.t[:, 1:])
    lo_edge = np.concatenate([np.full((R, 1), samples.near), mids], axis=1)
    hi_edge = np.concatenate([mids, np.full((R, 1), samples.far)], axis=1)
    c_lo = np.take_along_axis(cdf, idx - 1, axis=1)
    c_hi = np.take_along_axis(cdf, idx, axis=1)
    frac = (u - c_lo) / np.maximum(c_hi - c_lo, 1e-12)
    t_new = (np.take_along_axis(lo_edge, idx - 1, axis=1)
             + frac * (np.take_along_axis(hi_edge, idx - 1, axis=1)
                       - np.take_along_axis(lo_edge, idx - 1, axis=1)))

    if include_original:
        t_all = np.sort(np.concatenate([samples.t, t_new], axis=1), axis=1)
    else:
        t_all = np.sort(t_new, axis=1)
    # repair exact ties: force gaps of at least eps while staying inside
    # [near, far); min of two strictly increasing sequences stays strict
    eps = 1e-12 * (samples.far - samples.near)
    ramp = eps * np.arange(t_all.shape[1])
    t_all = np.maximum(t_all, samples.near)
    t_all = np.maximum.accumulate(t_all - ramp, axis=1) + ramp
    cap = (samples.far - eps) - ramp[-1] + ramp
    t_all = np.minimum(t_all, cap)
    return SampleSet(t_all, samples.origins, samples.dirs, samples.near, samples.far)


def central_dense_sampling(bundle: RayBundle, near: float, far: float,
                           n_dense: int = 64, n_sparse: int = 16,
                           rng: np.random.Generator | None = None,
                           jitter: bool = False) -> tuple[SampleSet, SampleSet | None]:
    """Dense samples for the bundle's central ray, sparse for the surround."""
    if not n_dense >= n_sparse >= 2:
        raise ValueError("need n_dense >= n_sparse >= 2")
    ci, cj = bundle.center_index
    central = stratified_samples((bundle.origins[ci, cj][None],
                                  bundle.dirs[ci, cj][None]),
                                 near, far, n_dense, rng, jitter)
    if bundle.n_rays == 1:
        return central, None
    keep = np.ones(bundle.shape, dtype=bool)
    keep[ci, cj] = False
    surround = stratified_samples((bundle.origins[keep], bundle.dirs[keep]),
                                  near, far, n_sparse, rng, jitter)
    return central, surround


# -- surface mode -----------------------------------------------------------------

@dataclass(frozen=True)
class TraceConfig:
    t_min: float = 0.0
    t_max: float = 6.0
    eps: float = 1e-5
    max_steps: int = 128
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.t_min >= self.t_max:
            raise ValueError("need t_min < t_max")


def sphere_trace_batch(origins: np.ndarray, dirs: np.ndarray, sdf,
                       cfg: TraceConfig) -> tuple[np.ndarray, np.ndarray]:
    """March t <- t + f along each ray; secant-refine on sign change.

    Returns (hit mask, t at hit or t_max).
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    R = len(origins)
    t = np.full(R, cfg.t_min)
    hit = np.zeros(R, dtype=bool)
    active = np.ones(R, dtype=bool)
    t_lo = np.full(R, cfg.t_min)
    f_lo = np.zeros(R)
    bracket = np.zeros(R, dtype=bool)

    f = sdf(origins + t[:, None] * dirs)
    hit |= np.abs(f) < cfg.eps
    inside = (~hit) & (f < 0)
    hit |= inside  # started at or below the surface
    active &= ~hit

    for _ in range(cfg.max_steps):
        if not active.any():
            break
        t_lo[active] = t[active]
        f_lo[active] = f[active]
        t[active] = t[active] + f[active]
        overshoot = active & (t > cfg.t_max)
        active &= ~overshoot
        if not active.any():
            break
        f[active] = sdf(origins[active] + t[active, None] * dirs[active])
        done = active & (np.abs(f) < cfg.eps)
        hit |= done
        crossed = active & ~done & (f < 0)
        bracket |= crossed
        active &= ~done & ~crossed

    # secant refinement inside the sign-change bracket
    if bracket.any():
        lo, fl = t_lo[bracket].copy(), f_lo[bracket].copy()
        hi, fh = t[bracket].copy(), f[bracket].copy()
        o_b, d_b = origins[bracket], dirs[bracket]
        tm = 0.5 * (lo + hi)
        for _ in range(60):
            denom = fh - fl
            tm = np.where(np.abs(denom) > 1e-300, lo - fl * (hi - lo) / denom,
                          0.5 * (lo + hi))
            bad = (tm <= np.minimum(lo, hi)) | (tm >= np.maximum(lo, hi))
            tm = np.where(bad, 0.5 * (lo + hi), tm)
            fm = sdf(o_b + tm[:, None] * d_b)
            if np.all(np.abs(fm) < cfg.eps):
                break
            neg = fm < 0
            hi, fh = np.where(neg, tm, hi), np.where(neg, fm, fh)
            lo, fl = np.where(neg, lo, tm), np.where(neg, fl, fm)
        t[bracket] = tm
        hit[bracket] = True

    return hit, np.where(hit, t, cfg.t_max)


def sphere_trace(ray: Ray, sdf, t_min: float = 0.0, t_max: float = 6.0,
                 eps: float = 1e-5, max_steps: int = 128) -> tuple[bool, float]:
    cfg = TraceConfig(t_min=t_min, t_max=t_max, eps=eps, max_steps=max_steps)
    hit, t = sphere_trace_batch(ray.origin[None], ray.direction[None], sdf, cfg)
    return bool(hit[0]), float(t[0])


def surface_render(bundle: RayBundle, params: FieldParams,
                   cfg: TraceConfig) -> RenderResult:
    """Trace the zero set and shade hits; misses get the background color.

    The hit point re-enters the graph as x = x0 - (f(x0)/<grad0, v>) v with
    x0 and grad0 detached, so geometry gradients flow through f(x0) exactly
    as the implicit function theorem prescribes (to first order).
    """
    o = bundle.flat_origins()
    d = bundle.flat_dirs()
    K = len(o)
    hit, t_hit = sphere_trace_batch(o, d, _field_fn(params), cfg)
    bg = np.asarray(cfg.background, dtype=np.float64)

    if not hit.any():
        color = Tensor(np.broadcast_to(bg, (K, 3)).copy())
        return RenderResult(color, t_hit, None, Tensor(np.ones(K)), o, d)

    idx = np.where(hit)[0]
    x0 = Tensor(o[idx] + t_hit[idx, None] * d[idx], requires_grad=True)
    f0, _ = _field_sdf(params, x0)
    (g0,) = ad.grad(ad.tsum(f0), [x0])
    v = d[idx]
    denom = np.sum(g0.data * v, axis=1)
    denom = np.where(np.abs(denom) < 1e-6, np.copysign(1e-6, denom), denom)

    step = ad.reshape(ad.div(f0, Tensor(denom)), (len(idx), 1))
    x_hat = ad.sub(x0, ad.mul(step, Tensor(v)))
    f_hat, feat = _field_sdf(params, x_hat)
    (n_hat,) = ad.grad(ad.tsum(f_hat), [x_hat], create_graph=True)
    rgb = _field_color(params, x_hat, v, _unit(n_hat), feat)

    color = ad.scatter(rgb, (idx, slice(None)), (K, 3))
    if np.any(bg != 0):
        miss = np.ones((K, 1))
        miss[idx] = 0.0
        color = ad.add(color, Tensor(miss * bg))
    t_final = Tensor((~hit).astype(np.float64))
    return RenderResult(color, t_hit, None, t_final, o, d,
                        sample_positions=x_hat, sample_sdf=f_hat,
                        sample_normals=n_hat)


# -- full-image rendering -----------------------------------------------------------

def render_view(cam: Camera, params: FieldParams, dcfg: DensityConfig,
                near: float, far: float, mode: str = "volume",
                n_coarse: int = 64, n_fine: int = 32, chunk: int = 64,
                background=0.0, trace: TraceConfig | None = None) -> dict:
    """Render a whole camera view; returns numpy color/depth/alpha arrays."""
    if mode not in ("volume", "surface"):
        raise ValueError(f"unknown render mode {mode!r}")
    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1) + 0.5
    from .geometry import pixels_to_rays
    origins, dirs = pixels_to_rays(cam, uv)

    color = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    alpha = np.zeros(h * w)

    if mode == "surface":
        tc = trace or TraceConfig(t_min=near, t_max=far,
                                  background=tuple(np.broadcast_to(background, (3,))))
        for lo in range(0, h * w, 4096):
            sl = slice(lo, min(lo + 4096, h * w))
            hit, t_hit = sphere_trace_batch(origins[sl], dirs[sl],
                                            _field_fn(params), tc)
            depth[sl] = t_hit
            alpha[sl] = hit.astype(np.float64)
            bgc = np.asarray(tc.background, dtype=np.float64)
            color[sl] = bgc
            if hit.any():
                idx = np.where(hit)[0]
                pts = origins[sl][idx] + t_hit[idx, None] * dirs[sl][idx]
                with Graph():
                    x = Tensor(pts, requires_grad=True)
                    s, feat = _field_sdf(params, x)
                    (n,) = ad.grad(ad.tsum(s), [x])
                    rgb = _field_color(params, x, dirs[sl][idx],
                                       _unit(Tensor(n.data)), feat)
                color[lo + idx] = rgb.data
        return {"color": color.reshape(h, w, 3), "depth": depth.reshape(h, w),
                "alpha": alpha.reshape(h, w)}

    for lo in range(0, h * w, chunk):
        sl = slice(lo, min(lo + chunk, h * w))
        rays = (origins[sl], dirs[sl])
        coarse = stratified_samples(rays, near, far, n_coarse)
        with ad.no_grad(), Graph():
            s, _ = _field_sdf(params, Tensor(coarse.positions.reshape(-1, 3)))
            sig = density(s, dcfg)
            wts = render_weights(ad.reshape(sig, coarse.t.shape), coarse.deltas)
        samples = coarse
        if n_fine > 0:
            samples = importance_resample(coarse, wts.data, n_fine)
        with Graph():
            res = volume_render(samples, params, dcfg, background)
        color[sl] = res.color.data
        depth[sl] = res.depth.data
        alpha[sl] = 1.0 - res.transmittance_final.data
    return {"color": color.reshape(h, w, 3), "depth": depth.reshape(h, w),
            "alpha": alpha.reshape(h, w)}
