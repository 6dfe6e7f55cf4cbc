"""Cameras, rays, pixel-patch ray bundles, and the depth-discontinuity mask.

Pixel conventions: u indexes columns, v indexes rows, image[v, u]. Rays are
cast through coordinates as given; callers that want pixel centers pass
u + 0.5, v + 0.5. Camera poses are camera-to-world with +z the optical axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray  # 4x4 camera-to-world
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "c2w", np.asarray(self.c2w, dtype=np.float64))
        if self.c2w.shape != (4, 4):
            raise ValueError("pose must be a 4x4 matrix")
        rot = self.c2w[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9):
            raise ValueError("pose rotation block is not orthonormal")
        if not math.isclose(float(np.linalg.det(rot)), 1.0, abs_tol=1e-9):
            raise ValueError("pose rotation block must have determinant +1")
        if not np.allclose(self.c2w[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("pose last row must be [0,0,0,1]")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"ray direction norm {n} is not 1")

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t), self.direction)


def pixel_to_ray(cam: Camera, u: float, v: float) -> Ray:
    """Back-project one pixel; origin is the camera center in world frame."""
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    o, d = pixels_to_rays(cam, np.array([[u, v]]))
    return Ray(o[0], d[0])


def pixels_to_rays(cam: Camera, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized back-projection of [N,2] pixel coordinates (no bounds check)."""
    uv = np.asarray(uv, dtype=np.float64)
    local = np.stack([(uv[:, 0] - cam.cx) / cam.fx,
                      (uv[:, 1] - cam.cy) / cam.fy,
                      np.ones(len(uv))], axis=1)
    d = local @ cam.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape).copy()
    return o, d


def _patch_shape(s) -> tuple[int, int]:
    sh, sw = (s, s) if np.isscalar(s) else (int(s[0]), int(s[1]))
    if sh < 1 or sw < 1 or sh % 2 == 0 or sw % 2 == 0:
        raise ValueError(f"patch size must be odd and >= 1, got {(sh, sw)}")
    return sh, sw


class RayBundle:
    """An sh x sw pixel patch of rays with its true colors.

    `anchor` is the (u, v) of the central pixel after border clamping.
    Rays live in flat arrays; `ray(i, j)` materializes a single Ray.
    """

    def __init__(self, anchor, shape, pixels, origins, dirs, true_colors, view_id=0):
        self.anchor = (int(anchor[0]), int(anchor[1]))
        self.shape = shape
        self.pixels = pixels          # [sh,sw,2] integer (u,v)
        self.origins = origins        # [sh,sw,3]
        self.dirs = dirs              # [sh,sw,3]
        self.true_colors = true_colors  # [sh,sw,3]
        self.view_id = int(view_id)
        if pixels.shape[:2] != shape or dirs.shape[:2] != shape:
            raise ValueError("bundle array shapes disagree with the patch shape")

    @property
    def size(self) -> int:
        if self.shape[0] != self.shape[1]:
            raise ValueError("rectangular bundle has no single size")
        return self.shape[0]

    @property
    def n_rays(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def center_index(self) -> tuple[int, int]:
        return self.shape[0] // 2, self.shape[1] // 2

    def ray(self, i: int, j: int) -> Ray:
        return Ray(self.origins[i, j], self.dirs[i, j])

    def flat_dirs(self) -> np.ndarray:
        return self.dirs.reshape(-1, 3)

    def flat_origins(self) -> np.ndarray:
        return self.origins.reshape(-1, 3)


def sample_pixels(height: int, width: int, n: int, rng: np.random.Generator,
                  mask: np.ndarray | None = None) -> np.ndarray:
    """Draw n pixel (u, v) pairs uniformly, optionally from a foreground mask."""
    if mask is not None:
        fg = np.argwhere(np.asarray(mask))
        if len(fg) == 0:
            raise ValueError("foreground mask is empty")
        picked = fg[rng.integers(0, len(fg), size=n)]
        return picked[:, ::-1].copy()  # argwhere gives (v,u)
    flat = rng.integers(0, height * width, size=n)
    v, u = np.divmod(flat, width)
    return np.stack([u, v], axis=1)


def build_bundles(cam: Camera, image: np.ndarray, n: int, s,
                  rng: np.random.Generator, mask: np.ndarray | None = None,
                  view_id: int = 0) -> list[RayBundle]:
    """n random patches of rays; anchors clamp inward so patches stay in-bounds."""
    sh, sw = _patch_shape(s)
    h, w = image.shape[:2]
    if h < sh or w < sw:
        raise ValueError(f"{w}x{h} image cannot hold a {sh}x{sw} patch")
    if n < 1:
        raise ValueError("bundle count must be >= 1")
    anchors = sample_pixels(h, w, n, rng, mask)
    anchors[:, 0] = np.clip(anchors[:, 0], sw // 2, w - 1 - sw // 2)
    anchors[:, 1] = np.clip(anchors[:, 1], sh // 2, h - 1 - sh // 2)

    dj, di = np.meshgrid(np.arange(sw) - sw // 2, np.arange(sh) - sh // 2)
    us = anchors[:, 0, None, None] + dj    # [n,sh,sw]
    vs = anchors[:, 1, None, None] + di
    uv = np.stack([us, vs], axis=-1).reshape(-1, 2)
    origins, dirs = pixels_to_rays(cam, uv + 0.5)
    origins = origins.reshape(n, sh, sw, 3)
    dirs = dirs.reshape(n, sh, sw, 3)

    bundles = []
    for k in range(n):
        colors = image[vs[k], us[k]].astype(np.float64)
        pix = np.stack([us[k], vs[k]], axis=-1)
        bundles.append(RayBundle(anchors[k], (sh, sw), pix, origins[k], dirs[k],
                                 colors, view_id))
    return bundles


@dataclass(frozen=True)
class BundleSchedule:
    mode: str = "fixed"           # fixed | linear
    s_fixed: int = 3
    s_start: int = 7
    s_end: int = 3
    total_epochs: int = 1

    def __post_init__(self):
        if self.mode not in ("fixed", "linear"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        for name in ("s_fixed", "s_start", "s_end"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ValueError(f"{name}={v} must be odd and >= 1")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def bundle_size_schedule(epoch: int, config: BundleSchedule) -> int:
    if config.mode == "fixed":
        return config.s_fixed
    frac = min(max(epoch / config.total_epochs, 0.0), 1.0)
    s = config.s_start + (config.s_end - config.s_start) * frac
    # snap to the nearest odd value, half-up on ties
    return 2 * int(math.floor((s - 1) / 2 + 0.5)) + 1


@dataclass(frozen=True)
class DistanceMask:
    values: np.ndarray  # [sh,sw] of {0,1}

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("mask values must be binary")
        object.__setattr__(self, "values", v)


def distance_mask(surface_points: np.ndarray, tau: float) -> DistanceMask:
    """Flag patch pixels whose nearest 8-neighbor surface point is within tau.

    Pixels across a depth discontinuity sit far from all their neighbors and
    get 0; everything on a locally continuous surface gets 1.
    """
    pts = np.asarray(surface_points, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[2] != 3:
        raise ValueError("surface points must be an [s,s,3] grid")
    sh, sw = pts.shape[:2]
    if sh < 3 or sw < 3:
        raise ValueError("distance mask needs at least a 3x3 patch")
    best = np.full((sh, sw), np.inf)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            src_i = slice(max(0, -di), sh - max(0, di))
            src_j = slice(max(0, -dj), sw - max(0, dj))
            dst_i = slice(max(0, di), sh - max(0, -di))
            dst_j = slice(max(0, dj), sw - max(0, -dj))
            d = np.linalg.norm(pts[dst_i, dst_j] - pts[src_i, src_j], axis=-1)
            best[dst_i, dst_j] = np.minimum(best[dst_i, dst_j], d)
    return DistanceMask((best < tau).astype(np.float64))
