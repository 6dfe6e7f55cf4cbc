"""Implicit geometry (signed distance) and color networks.

The geometry net maps a 3-D point to a signed distance plus a feature vector;
the color net maps (point, view direction, normal, feature) to RGB through a
sigmoid. Weights live in `FieldParams` as autodiff leaf tensors. Analytic
sphere/box/torus distance fields serve as exact ground-truth oracles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor


@dataclass(frozen=True)
class EncodingConfig:
    """Sinusoidal frequency encoding: [x?, sin(2^k pi x), cos(2^k pi x)]_k."""

    n_freqs: int
    include_input: bool = True

    def out_dim(self, in_dim: int) -> int:
        return in_dim * 2 * self.n_freqs + (in_dim if self.include_input else 0)


def positional_encode(x, cfg: EncodingConfig) -> Tensor:
    """Encode coordinates (last axis) with sin/cos at frequencies 2^k * pi.

    Block layout along the feature axis: raw input (if kept), then per
    frequency a sin block followed by a cos block.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if cfg.n_freqs == 0 and not cfg.include_input:
        raise ValueError("encoding with no frequencies must include the input")
    parts = [x] if cfg.include_input else []
    for k in range(cfg.n_freqs):
        scaled = ad.mul(x, (2.0 ** k) * math.pi)
        parts.append(ad.tsin(scaled))
        parts.append(ad.tcos(scaled))
    if len(parts) == 1:
        return parts[0]
    return ad.concat(parts, axis=x.ndim - 1)


@dataclass(frozen=True)
class FieldConfig:
    """Network sizes; `desk()` quarter-width preset is the package default."""

    hidden_width: int = 64
    geo_hidden_layers: int = 8
    color_hidden_layers: int = 4
    feature_dim: int = 64
    skip_layer: int = 4
    pos_encoding: EncodingConfig = field(default_factory=lambda: EncodingConfig(6))
    dir_encoding: EncodingConfig = field(default_factory=lambda: EncodingConfig(4))
    softplus_sharpness: float = 100.0
    init_radius: float = 0.75

    @classmethod
    def desk(cls) -> "FieldConfig":
        return cls()

    @classmethod
    def full(cls) -> "FieldConfig":
        return cls(hidden_width=256, feature_dim=256,
                   pos_encoding=EncodingConfig(10), dir_encoding=EncodingConfig(4))

    def geo_dims(self) -> list[int]:
        d_in = self.pos_encoding.out_dim(3)
        return [d_in] + [self.hidden_width] * self.geo_hidden_layers + [1 + self.feature_dim]

    def color_dims(self) -> list[int]:
        d_in = 3 + self.dir_encoding.out_dim(3) + 3 + self.feature_dim
        return [d_in] + [self.hidden_width] * self.color_hidden_layers + [3]


class FieldParams:
    """All learnable weights of the geometry and color networks."""

    def __init__(self, config: FieldConfig, geo_w, geo_b, color_w, color_b):
        self.config = config
        self.geo_w = geo_w
        self.geo_b = geo_b
        self.color_w = color_w
        self.color_b = color_b

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.geo_w, self.geo_b)):
            out.append((f"geo.{i}.w", w))
            out.append((f"geo.{i}.b", b))
        for i, (w, b) in enumerate(zip(self.color_w, self.color_b)):
            out.append((f"color.{i}.w", w))
            out.append((f"color.{i}.b", b))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t in self.parameters():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"parameter {name}: shape {src.shape} != {t.data.shape}")
            t.data = np.asarray(src, dtype=np.float64).copy()
            t.grad = None


def _skip_out_dims(dims: list[int], skip_layer: int) -> list[int]:
    # the linear feeding the skip concat is narrowed so that after appending
    # the encoded input the width is back to dims[l+1]
    outs = []
    for l in range(len(dims) - 1):
        out_dim = dims[l + 1]
        if l + 1 == skip_layer:
            out_dim -= dims[0]
        outs.append(out_dim)
    return outs


def init_fields(config: FieldConfig, rng: np.random.Generator, geometric: bool = True) -> FieldParams:
    """Fresh parameters; geometric init shapes the SDF into a sphere."""
    geo_dims = config.geo_dims()
    geo_outs = _skip_out_dims(geo_dims, config.skip_layer)
    geo_w, geo_b = [], []
    d_prev = geo_dims[0]
    for l, d_out in enumerate(geo_outs):
        if l == config.skip_layer:
            d_prev += geo_dims[0]
        geo_w.append(Tensor(rng.normal(0.0, math.sqrt(2.0 / d_out), size=(d_prev, d_out)),
                            requires_grad=True))
        geo_b.append(Tensor(np.zeros(d_out), requires_grad=True))
        d_prev = d_out

    color_dims = config.color_dims()
    color_w, color_b = [], []
    for l in range(len(color_dims) - 1):
        fan_in, fan_out = color_dims[l], color_dims[l + 1]
        std = math.sqrt(2.0 / fan_in) if l < len(color_dims) - 2 else math.sqrt(1.0 / fan_in)
        color_w.append(Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True))
        color_b.append(Tensor(np.zeros(fan_out), requires_grad=True))

    params = FieldParams(config, geo_w, geo_b, color_w, color_b)
    if geometric:
        init_geometric(params, config.init_radius, rng)
    return params


def init_geometric(params: FieldParams, radius: float,
                   rng: np.random.Generator | None = None) -> FieldParams:
    """Re-initialize the geometry net so it approximates a sphere SDF.

    Standard recipe: zero-mean hidden weights with std sqrt(2/out), raw-xyz
    columns only in the first (and skip) layer, and a constant-mean final
    layer with bias -radius, which yields f(x) ~ |x| - radius at init.
    The expectation argument behind that recipe is exact only in the wide
    limit; at quarter width a single draw drifts the network gain by tens of
    percent compounded over depth, so each layer is rescaled against a probe
    set afterwards (the activation is positively homogeneous up to softplus
    smoothing, so a scalar rescale keeps the draw's structure).
    """
    if radius <= 0:
        raise ValueError("init radius must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    cfg = params.config
    dims = cfg.geo_dims()
    d_in = dims[0]
    n_lin = len(params.geo_w)
    for l, (w, b) in enumerate(zip(params.geo_w, params.geo_b)):
        fan_in, fan_out = w.data.shape
        if l == n_lin - 1:
            w.data = rng.normal(math.sqrt(math.pi) / math.sqrt(fan_in), 1e-4,
                                size=w.data.shape)
            b.data = np.full(fan_out, -radius)
        else:
            w.data = rng.normal(0.0, math.sqrt(2.0 / fan_out), size=w.data.shape)
            b.data = np.zeros(fan_out)
            if l == 0:
                w.data[3:, :] = 0.0  # only raw xyz feeds the first layer
            elif l == cfg.skip_layer and d_in > 3:
                w.data[-(d_in - 3):, :] = 0.0  # mute the encoded part of the skip input
        w.grad = None
        b.grad = None
    _calibrate_geo_gains(params, radius, rng)
    return params


def _np_encode(x: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    parts = [x] if cfg.include_input else []
    for k in range(cfg.n_freqs):
        s = (2.0 ** k) * math.pi * x
        parts.append(np.sin(s))
        parts.append(np.cos(s))
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)


def _calibrate_geo_gains(params: FieldParams, radius: float, rng: np.random.Generator):
    """Tune the fresh draw so the initial SDF is a reliable sphere.

    The mean-field argument behind the constant-mean last layer is exact only
    in the wide limit; at quarter width a single draw is off by tens of
    percent. Two corrections, both deterministic given the rng: rescale each
    hidden layer to unit gain on ball probes, then least-squares fit the sdf
    readout column to the target |x| - radius over the probes (the hidden
    stack stays a plain random draw; only the 1-D readout is fitted).
    """
    cfg = params.config
    beta = cfg.softplus_sharpness

    def act(z):
        z = beta * z
        return (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / beta

    dirs = rng.normal(size=(512, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = 1.3 * rng.uniform(0.0, 1.0, size=(512, 1)) ** (1 / 3)
    probes = np.concatenate([dirs * radii, np.zeros((1, 3))], axis=0)
    target = float(np.mean(np.linalg.norm(probes, axis=1)))

    enc = _np_encode(probes, cfg.pos_encoding)
    h = enc
    n_lin = len(params.geo_w)
    for l, (w, b) in enumerate(zip(params.geo_w, params.geo_b)):
        if l == cfg.skip_layer:
            h = np.concatenate([h, enc], axis=1) / math.sqrt(2.0)
        if l < n_lin - 1:
            got = float(np.mean(np.linalg.norm(act(h @ w.data + b.data), axis=1)))
            w.data *= target / got
            h = act(h @ w.data + b.data)
        else:
            y = np.linalg.norm(probes, axis=1) - radius
            design = np.concatenate([h, np.ones((len(h), 1))], axis=1)
            theta, *_ = np.linalg.lstsq(design, y, rcond=None)
            w.data[:, 0] = theta[:-1]
            b.data[0] = theta[-1]


def _scaled_softplus(x: Tensor, sharpness: float) -> Tensor:
    if sharpness == 1.0:
        return ad.softplus(x)
    return ad.mul(ad.softplus(ad.mul(x, sharpness)), 1.0 / sharpness)


def _as_batch(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 1:
        return ad.reshape(t, (1, -1)), True
    return t, False


def sdf_eval(params: FieldParams, x) -> tuple[Tensor, Tensor]:
    """Signed distance and feature vector at point(s) x ([N,3] or [3])."""
    xt, single = _as_batch(x)
    cfg = params.config
    enc = positional_encode(xt, cfg.pos_encoding)
    h = enc
    n_lin = len(params.geo_w)
    for l, (w, b) in enumerate(zip(params.geo_w, params.geo_b)):
        if l == cfg.skip_layer:
            h = ad.mul(ad.concat([h, enc], axis=1), 1.0 / math.sqrt(2.0))
        h = ad.add(ad.matmul(h, w), b)
        if l < n_lin - 1:
            h = _scaled_softplus(h, cfg.softplus_sharpness)
    sdf = h[:, 0]
    feat = h[:, 1:]
    if single:
        return sdf[0], feat[0]
    return sdf, feat


def sdf_gradient(params: FieldParams, x, create_graph: bool = True) -> Tensor:
    """Spatial gradient of the SDF at x; differentiable for eikonal terms.

    Inside an active graph the result stays on the tape. Called with no
    active graph it opens a scratch one and returns a detached constant.
    """
    if ad.active_graph() is None:
        with Graph():
            g = sdf_gradient(params, x, create_graph=False)
        return Tensor(g.data)
    xt, single = _as_batch(x)
    if not xt.requires_grad:
        xt = Tensor(xt.data, requires_grad=True)
    sdf, _ = sdf_eval(params, xt)
    (g,) = ad.grad(ad.tsum(sdf), [xt], create_graph=create_graph)
    if single:
        return g[0]
    return g


def color_eval(params: FieldParams, x, v, n, feature) -> Tensor:
    """View-dependent radiance in (0,1)^3 at surface/sample points."""
    xt, single = _as_batch(x)
    vt, _ = _as_batch(v)
    nt, _ = _as_batch(n)
    ft, _ = _as_batch(feature)
    cfg = params.config
    h = ad.concat([xt, positional_encode(vt, cfg.dir_encoding), nt, ft], axis=1)
    n_lin = len(params.color_w)
    for l, (w, b) in enumerate(zip(params.color_w, params.color_b)):
        h = ad.add(ad.matmul(h, w), b)
        if l < n_lin - 1:
            h = ad.relu(h)
    rgb = ad.sigmoid(h)
    if single:
        return rgb[0]
    return rgb


def sdf_fn(params: FieldParams):
    """Plain numpy SDF evaluator (no graph); for tracing and meshing."""

    def fn(pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        with ad.no_grad():
            s, _ = sdf_eval(params, pts)
        return s.data

    return fn


# -- analytic ground-truth shapes ---------------------------------------------

@dataclass(frozen=True)
class AnalyticShape:
    """Exact signed distance oracle: sphere, axis-aligned box, or z-axis torus."""

    kind: str
    radius: float = 0.5                      # sphere
    half_extents: tuple[float, float, float] = (0.5, 0.5, 0.5)  # box
    radii: tuple[float, float] = (0.5, 0.2)  # torus: (ring R, tube r)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "torus"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.kind == "sphere" and self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if self.kind == "box" and any(h <= 0 for h in self.half_extents):
            raise ValueError("box half extents must be positive")
        if self.kind == "torus" and any(r <= 0 for r in self.radii):
            raise ValueError("torus radii must be positive")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return analytic_sdf(self, x)

    def bounding_radius(self) -> float:
        c = float(np.linalg.norm(self.center))
        if self.kind == "sphere":
            return c + self.radius
        if self.kind == "box":
            return c + float(np.linalg.norm(self.half_extents))
        return c + self.radii[0] + self.radii[1]


def analytic_sdf(shape: AnalyticShape, x) -> np.ndarray:
    """Exact signed distance at x ([..., 3]); negative inside."""
    p = np.asarray(x, dtype=np.float64) - np.asarray(shape.center)
    if shape.kind == "sphere":
        return np.linalg.norm(p, axis=-1) - shape.radius
    if shape.kind == "box":
        q = np.abs(p) - np.asarray(shape.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside
    big_r, small_r = shape.radii
    ring = np.stack([np.linalg.norm(p[..., :2], axis=-1) - big_r, p[..., 2]], axis=-1)
    return np.linalg.norm(ring, axis=-1) - small_r


def lambert_shade(normals: np.ndarray, light_dir: np.ndarray, albedo,
                  ambient: float = 0.2, points: np.ndarray | None = None) -> np.ndarray:
    """albedo * max(0, n.l) + ambient; stays in [0,1] with the defaults.

    `albedo` is either one rgb triple or a callable of surface points
    (which must then be supplied).
    """
    l = np.asarray(light_dir, dtype=np.float64)
    l = l / np.linalg.norm(l)
    lit = np.maximum(np.atleast_2d(normals) @ l, 0.0)
    if callable(albedo):
        if points is None:
            raise ValueError("textured albedo needs the surface points")
        alb = albedo(points)
    else:
        alb = np.asarray(albedo, dtype=np.float64)
    return alb * lit[:, None] + ambient


def sine_texture(base=(0.8, 0.45, 0.3), freq: float = 3.0):
    """Smooth 3d albedo pattern: one plane-wave band per color channel.

    The bands run along skewed directions so every surface orientation
    shows contrast. Values stay within [0.1, 1.0] x base, keeping shaded
    colors inside [0, 1] under the default ambient.
    """
    if freq <= 0:
        raise ValueError("texture frequency must be positive")
    base_arr = np.asarray(base, dtype=np.float64)
    waves = np.array([[1.0, 0.3, -0.2], [-0.25, 1.0, 0.35], [0.3, -0.2, 1.0]])
    waves /= np.linalg.norm(waves, axis=1, keepdims=True)
    phases = np.array([0.0, 2.1, 4.2])

    def albedo(points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        proj = p @ waves.T
        return base_arr * (0.55 + 0.45 * np.sin(2 * np.pi * freq * proj + phases))

    return albedo


class AnalyticField:
    """Exact shape SDF plus Lambertian radiance, built on graph ops.

    Drop-in for FieldParams in the renderers; the ground-truth route for
    cross-checking learned-field rendering.
    """

    def __init__(self, shape: AnalyticShape, albedo=(0.8, 0.45, 0.3),
                 light_dir=(0.4, 0.6, -0.7), ambient: float = 0.2):
        self.shape = shape
        # constant rgb triple, or a callable of 3d points for textured shapes
        self.albedo = albedo if callable(albedo) else np.asarray(albedo, dtype=np.float64)
        l = np.asarray(light_dir, dtype=np.float64)
        self.light_dir = l / np.linalg.norm(l)
        self.ambient = float(ambient)

    def sdf_eval(self, x) -> tuple[Tensor, Tensor]:
        xt = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        p = ad.sub(xt, np.asarray(self.shape.center))
        if self.shape.kind == "sphere":
            s = ad.sub(_row_norm(p), self.shape.radius)
        elif self.shape.kind == "torus":
            big_r, small_r = self.shape.radii
            ring = ad.sub(_row_norm(p[:, :2]), big_r)
            z = p[:, 2]
            s = ad.sub(ad.tsqrt(ad.add(ad.mul(ring, ring), ad.mul(z, z))), small_r)
        else:
            q = ad.sub(ad.tabs(p), np.asarray(self.shape.half_extents))
            outside = _row_norm(ad.relu(q))
            qmax = _pairwise_max(_pairwise_max(q[:, 0], q[:, 1]), q[:, 2])
            inside = ad.mul(ad.relu(ad.mul(qmax, -1.0)), -1.0)  # min(qmax, 0)
            s = ad.add(outside, inside)
        feat = Tensor(np.zeros((s.shape[0], 1)))
        return s, feat

    def color_eval(self, x, v, n, feature) -> Tensor:
        nt = n if isinstance(n, Tensor) else Tensor(np.atleast_2d(n))
        lit = ad.relu(ad.matmul(nt, Tensor(self.light_dir)))
        if callable(self.albedo):
            # texture is ground truth; no gradient flows through it
            pts = x.data if isinstance(x, Tensor) else np.atleast_2d(x)
            alb = Tensor(self.albedo(pts))
        else:
            alb = Tensor(self.albedo)
        scaled = ad.mul(ad.reshape(lit, (-1, 1)), alb)
        return ad.add(scaled, self.ambient)

    def sdf_fn(self):
        return lambda pts: analytic_sdf(self.shape, np.atleast_2d(pts))


def _row_norm(p: Tensor) -> Tensor:
    return ad.tsqrt(ad.tsum(ad.mul(p, p), axis=1))


def _pairwise_max(a: Tensor, b: Tensor) -> Tensor:
    return ad.add(a, ad.relu(ad.sub(b, a)))


def analytic_normal(shape: AnalyticShape, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Outward unit normal by central differences of the exact SDF."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = np.zeros_like(x)
    for ax in range(3):
        d = np.zeros(3)
        d[ax] = eps
        g[:, ax] = (analytic_sdf(shape, x + d) - analytic_sdf(shape, x - d)) / (2 * eps)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.maximum(norm, 1e-300)
