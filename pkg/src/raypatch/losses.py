"""Training losses: color, per-bundle color statistics, masked edge features,
eikonal regularization, and the weighted total.

The statistic and feature terms consume stacked patch grids [B, sh, sw, 3];
flat per-ray renderer output gets reshaped into grids upstream. All terms are
graph scalars so one backward pass covers the whole objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .render import _field_sdf


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_m: float = 5e-3
    lambda_v: float = 1e-2
    lambda_conv: float = 5e-5
    lambda_eik: float = 0.1
    lambda_mask: float = 0.0

    def __post_init__(self):
        for name, val in vars(self).items():
            if val < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossBreakdown:
    c: Tensor
    m: Tensor
    v: Tensor
    conv: Tensor
    eik: Tensor
    mask_term: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in
                ("c", "m", "v", "conv", "eik", "mask_term", "total")}


_SOBEL_GX = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
_SOBEL_GX.setflags(write=False)
_LAPLACE.setflags(write=False)


@dataclass(frozen=True)
class ConvKernel:
    """3x3 zero-sum edge kernels; sobel has two directions, laplace one."""

    kind: str = "sobel"

    def __post_init__(self):
        if self.kind not in ("sobel", "laplace"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    @property
    def taps(self) -> tuple[np.ndarray, ...]:
        if self.kind == "sobel":
            return _SOBEL_GX, _SOBEL_GX.T
        return (_LAPLACE,)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def color_loss(rendered, truth) -> Tensor:
    """Mean absolute error over every pixel and channel."""
    r = _as_tensor(rendered)
    t = np.asarray(truth, dtype=np.float64)
    if r.shape != t.shape:
        raise ad.ShapeMismatchError(
            f"rendered {r.shape} vs truth {t.shape}")
    return ad.tmean(ad.tabs(ad.sub(r, t)))


def patch_stats(patch) -> tuple[Tensor, Tensor]:
    """Per-channel mean and population variance of one [sh, sw, 3] patch."""
    p = _as_tensor(patch)
    if p.ndim != 3 or p.shape[-1] != 3:
        raise ValueError("expected an [sh, sw, 3] patch")
    mean = ad.tmean(p, axis=(0, 1))
    centred = ad.sub(p, ad.reshape(mean, (1, 1, 3)))
    return mean, ad.tmean(ad.mul(centred, centred), axis=(0, 1))


def stack_bundles(patches) -> Tensor:
    """Coerce per-bundle color patches into one [B, sh, sw, 3] tensor."""
    if not isinstance(patches, (Tensor, np.ndarray)):
        parts = [ad.reshape(_as_tensor(p), (1,) + _as_tensor(p).shape)
                 for p in patches]
        if not parts:
            raise ValueError("need at least one bundle")
        return ad.concat(parts, axis=0)
    p = _as_tensor(patches)
    if p.ndim == 3:
        p = ad.reshape(p, (1,) + p.shape)
    if p.ndim != 4 or p.shape[-1] != 3:
        raise ValueError("expected [B, sh, sw, 3] bundle colors")
    return p


def _grid_mean(x: Tensor) -> Tensor:
    return ad.tmean(x, axis=(1, 2))


def _grid_var(x: Tensor) -> Tensor:
    mean = _grid_mean(x)
    centred = ad.sub(x, ad.reshape(mean, (x.shape[0], 1, 1, 3)))
    return ad.tmean(ad.mul(centred, centred), axis=(1, 2))


def _vector_norm(diff: Tensor, l1: bool) -> Tensor:
    if l1:
        return ad.tsum(ad.tabs(diff))
    # floor keeps the sqrt differentiable when the diff is exactly zero
    return ad.tsqrt(ad.maximum_const(ad.tsum(ad.mul(diff, diff)), 1e-30))


def _stat_loss(rendered, truth, stat, l1: bool, pooled: bool) -> Tensor:
    r = stack_bundles(rendered)
    t = stack_bundles(truth)
    if r.shape != t.shape:
        raise ad.ShapeMismatchError(f"rendered {r.shape} vs truth {t.shape}")
    if pooled:
        # one population across all bundles instead of per-bundle statistics
        r = ad.reshape(r, (1, -1, r.shape[2], 3))
        t = ad.reshape(t, (1, -1, t.shape[2], 3))
    diff = ad.sub(stat(r), stat(t))
    return ad.div(_vector_norm(diff, l1), float(r.shape[0]))


def mean_loss(rendered, truth, l1: bool = False, pooled: bool = False) -> Tensor:
    """Norm of per-bundle mean-color differences over the bundle count."""
    return _stat_loss(rendered, truth, _grid_mean, l1, pooled)


def variance_loss(rendered, truth, l1: bool = False, pooled: bool = False) -> Tensor:
    """Norm of per-bundle color-variance differences over the bundle count."""
    return _stat_loss(rendered, truth, _grid_var, l1, pooled)


def _conv_batch(x: Tensor, kernel: ConvKernel) -> list[Tensor]:
    """Valid 3x3 cross-correlation, one [B, sh-2, sw-2, 3] map per direction."""
    _, sh, sw, _ = x.shape
    if sh < 3 or sw < 3:
        raise ValueError("need at least a 3x3 patch for edge features")
    oh, ow = sh - 2, sw - 2
    outs = []
    for taps in kernel.taps:
        acc = None
        for di in range(3):
            for dj in range(3):
                w = taps[di, dj]
                if w == 0.0:
                    continue
                term = ad.mul(x[:, di:di + oh, dj:dj + ow, :], w)
                acc = term if acc is None else ad.add(acc, term)
        outs.append(acc)
    return outs


def conv_features(patch, kernel: ConvKernel = ConvKernel()) -> Tensor:
    """Edge responses of one patch, stacked as [directions, sh-2, sw-2, 3]."""
    p = _as_tensor(patch)
    if p.ndim != 3 or p.shape[-1] != 3:
        raise ValueError("expected an [sh, sw, 3] patch")
    return ad.concat(_conv_batch(ad.reshape(p, (1,) + p.shape), kernel), axis=0)


def _mask_array(masks, grid_shape) -> np.ndarray:
    rows = [m.values if hasattr(m, "values") else np.asarray(m, dtype=np.float64)
            for m in masks]
    m = np.stack(rows).astype(np.float64)
    if m.shape != grid_shape:
        raise ValueError(f"masks {m.shape} vs bundles {grid_shape}")
    return m


def conv_loss(rendered, truth, masks, kernel: ConvKernel = ConvKernel()) -> Tensor:
    """Norm of mask-weighted edge-feature differences over the bundle count.

    Masks are center-cropped to the valid-convolution region before they
    multiply the differences, so border pixels never contribute.
    """
    r = stack_bundles(rendered)
    t = stack_bundles(truth)
    if r.shape != t.shape:
        raise ad.ShapeMismatchError(f"rendered {r.shape} vs truth {t.shape}")
    m = _mask_array(masks, r.shape[:3])
    crop = Tensor(m[:, 1:-1, 1:-1, None].copy())
    total = None
    for fr, ft in zip(_conv_batch(r, kernel), _conv_batch(t, kernel)):
        masked = ad.mul(ad.sub(fr, ft), crop)
        sq = ad.tsum(ad.mul(masked, masked))
        total = sq if total is None else ad.add(total, sq)
    return ad.div(ad.tsqrt(ad.maximum_const(total, 1e-30)), float(r.shape[0]))


def eikonal_from_gradients(grads: Tensor) -> Tensor:
    """mean (||grad|| - 1)^2 over [N, 3] gradient rows."""
    sq = ad.maximum_const(ad.tsum(ad.mul(grads, grads), axis=1), 1e-30)
    d = ad.sub(ad.tsqrt(sq), 1.0)
    return ad.tmean(ad.mul(d, d))


def eikonal_loss(field, points) -> Tensor:
    """Unit-gradient penalty of the SDF at the given points.

    Differentiates through the gradient itself, so minimizing it needs the
    second-order support in the tape.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pos = Tensor(pts, requires_grad=True)
    sdf, _ = _field_sdf(field, pos)
    (g,) = ad.grad(ad.tsum(sdf), [pos], create_graph=True)
    return eikonal_from_gradients(g)


def mask_loss(opacity, mask, eps: float = 1e-6) -> Tensor:
    """Binary cross-entropy between rendered opacity and a target mask."""
    y = np.asarray(mask, dtype=np.float64).reshape(-1)
    p = _as_tensor(opacity)
    if p.size != y.size:
        raise ad.ShapeMismatchError(f"opacity {p.size} vs mask {y.size}")
    p = ad.clip(ad.reshape(p, (-1,)), eps, 1.0 - eps)
    on = ad.mul(Tensor(y), ad.tlog(p))
    off = ad.mul(Tensor(1.0 - y), ad.tlog(ad.sub(1.0, p)))
    return ad.mul(ad.tmean(ad.add(on, off)), -1.0)


def total_loss(c: Tensor, m: Tensor, v: Tensor, conv: Tensor,
               eik: Tensor | None = None, mask_term: Tensor | None = None,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of the terms; omitted optional terms count as zero."""
    zero = Tensor(np.asarray(0.0))
    eik = zero if eik is None else eik
    mask_term = zero if mask_term is None else mask_term
    total = ad.mul(c, weights.lambda_c)
    for term, lam in ((m, weights.lambda_m), (v, weights.lambda_v),
                      (conv, weights.lambda_conv), (eik, weights.lambda_eik),
                      (mask_term, weights.lambda_mask)):
        total = ad.add(total, ad.mul(term, lam))
    return LossBreakdown(c, m, v, conv, eik, mask_term, total)
