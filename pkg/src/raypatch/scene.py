"""Datasets, synthetic ground truth, isosurface extraction, and metrics.

A scene directory holds a JSON `manifest` plus `images/` and `masks/`; the
synthesizer writes the same layout it loads, so round-trips only lose the
8-bit image quantization. Meshing uses the classic 256-case tables with
edge-keyed vertex sharing, which makes closed surfaces watertight by
construction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from . import mc_tables as mct
from .fields import AnalyticShape, analytic_normal, lambert_shade
from .geometry import Camera, pixels_to_rays
from .render import TraceConfig, _field_fn, sphere_trace_batch


@dataclass
class View:
    image: np.ndarray                 # [h,w,3] in [0,1]
    camera: Camera
    mask: np.ndarray | None = None    # [h,w] of {0,1}


@dataclass
class SceneDataset:
    views: list[View]
    center: np.ndarray                # world center of the region of interest
    radius: float                     # ... which maps inside the unit sphere
    gt_points: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("scene radius must be positive")

    @property
    def n_views(self) -> int:
        return len(self.views)


class TriangleMesh:
    """Indexed triangle soup; extraction drops degenerate faces itself."""

    def __init__(self, vertices, triangles, normals=None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
                self.triangles.min() < 0
                or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")
        self.normals = (None if normals is None
                        else np.asarray(normals, dtype=np.float64).reshape(-1, 3))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class EvalReport:
    chamfer: float
    psnr_per_view: list[float]
    psnr_mean: float
    config_hash: str = ""
    timings: dict[str, float] = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.chamfer < 0:
            raise ValueError("chamfer cannot be negative")

    def save(self, path):
        Path(path).write_text(json.dumps({
            "chamfer": self.chamfer,
            "psnr_per_view": list(self.psnr_per_view),
            "psnr_mean": self.psnr_mean,
            "config_hash": self.config_hash,
            "timings": self.timings,
        }, indent=2) + "\n")


# -- synthetic ground truth ------------------------------------------------------

def _fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    th = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)


def _look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = np.cross(fwd, right)  # +v is down the image
    c2w[:3, 2] = fwd
    c2w[:3, 3] = position
    return c2w


def surface_points(shape: AnalyticShape, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """n points sampled uniformly by area on the analytic surface."""
    center = np.asarray(shape.center, dtype=np.float64)
    if shape.kind == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return center + shape.radius * d
    if shape.kind == "box":
        hx, hy, hz = shape.half_extents
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        half = np.array([hx, hy, hz])
        for ax in range(3):
            sel = axis == ax
            others = [a for a in range(3) if a != ax]
            pts[sel, ax] = sign[sel] * half[ax]
            pts[np.ix_(sel, others)] = uv[sel] * half[others]
        return center + pts
    big_r, small_r = shape.radii
    u = rng.uniform(0.0, 2.0 * math.pi, size=n)
    v = np.empty(n)
    done = 0
    while done < n:  # rejection keeps the tube angle area-uniform
        cand = rng.uniform(0.0, 2.0 * math.pi, size=2 * (n - done))
        keep = rng.uniform(size=cand.size) < (big_r + small_r * np.cos(cand)) / (big_r + small_r)
        cand = cand[keep][:n - done]
        v[done:done + cand.size] = cand
        done += cand.size
    ring = big_r + small_r * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), small_r * np.sin(v)], axis=1)
    return center + pts


def synth_scene(shape: AnalyticShape, n_views: int = 30, res: int = 96,
                light=(0.4, 0.6, -0.7), albedo=(0.8, 0.45, 0.3),
                ambient: float = 0.2, distance: float = 3.0,
                background=(0.0, 0.0, 0.0), n_points: int = 10000,
                seed: int = 0) -> SceneDataset:
    """Ray-traced views of an analytic shape with exact masks and points.

    Cameras sit on a Fibonacci sphere of the given distance looking at the
    shape center; colors are Lambertian max(0, n.l) * albedo + ambient.
    Pass a callable albedo (e.g. sine_texture) for a textured surface.
    """
    if n_views < 2:
        raise ValueError("need at least 2 views")
    center = np.asarray(shape.center, dtype=np.float64)
    rad = shape.bounding_radius() - float(np.linalg.norm(center))
    light = np.asarray(light, dtype=np.float64)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    tcfg = TraceConfig(t_min=1e-4, t_max=distance + 2.0 * rad,
                       eps=1e-7, max_steps=256)
    uu, vv = np.meshgrid(np.arange(res), np.arange(res))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1) + 0.5

    views = []
    for d in _fibonacci_directions(n_views):
        cam = Camera(fx=1.2 * res, fy=1.2 * res, cx=res / 2, cy=res / 2,
                     c2w=_look_at(center + distance * d, center),
                     width=res, height=res)
        origins, dirs = pixels_to_rays(cam, uv)
        hit, t = sphere_trace_batch(origins, dirs, shape.sdf, tcfg)
        img = np.tile(bg, (res * res, 1))
        if hit.any():
            pts = origins[hit] + t[hit, None] * dirs[hit]
            img[hit] = lambert_shade(analytic_normal(shape, pts), light,
                                     albedo, ambient, points=pts)
        views.append(View(np.clip(img, 0.0, 1.0).reshape(res, res, 3), cam,
                          hit.astype(np.float64).reshape(res, res)))

    pts = surface_points(shape, n_points, np.random.default_rng(seed))
    return SceneDataset(views, center, float(rad), gt_points=pts)


# -- scene directory IO ------------------------------------------------------------

def write_image(image: np.ndarray, path):
    """8-bit lossless raster: round(255 * c), gray or RGB by shape."""
    q = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def read_image(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing image file {p}")
    return np.asarray(Image.open(p), dtype=np.float64) / 255.0


def save_scene(dataset: SceneDataset, directory):
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    if any(v.mask is not None for v in dataset.views):
        (d / "masks").mkdir(exist_ok=True)
    entries = []
    for i, v in enumerate(dataset.views):
        rec = {
            "fx": v.camera.fx, "fy": v.camera.fy,
            "cx": v.camera.cx, "cy": v.camera.cy,
            "width": v.camera.width, "height": v.camera.height,
            "c2w": [float(x) for x in v.camera.c2w.ravel()],
            "image": f"images/view_{i:03d}.png",
        }
        write_image(v.image, d / rec["image"])
        if v.mask is not None:
            rec["mask"] = f"masks/view_{i:03d}.png"
            write_image(v.mask, d / rec["mask"])
        entries.append(rec)
    manifest = {"center": [float(c) for c in dataset.center],
                "radius": dataset.radius, "views": entries}
    if dataset.gt_points is not None:
        np.save(d / "points.npy", dataset.gt_points)
        manifest["gt_points"] = "points.npy"
    (d / "manifest").write_text(json.dumps(manifest, indent=2) + "\n")


def load_scene(directory) -> SceneDataset:
    """Read a scene directory; errors name the offending file or view."""
    d = Path(directory)
    mf = d / "manifest"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest under {d}")
    try:
        data = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt manifest {mf}: {e}") from e
    entries = data.get("views", [])
    if not entries:
        raise ValueError(f"{mf}: manifest lists no views")
    if "center" not in data or "radius" not in data:
        raise ValueError(f"{mf}: manifest lacks center/radius normalization")

    views = []
    for i, rec in enumerate(entries):
        where = f"view {i} of {mf}"
        try:
            image = read_image(d / rec["image"])
            c2w = np.asarray(rec["c2w"], dtype=np.float64).reshape(4, 4)
            cam = Camera(fx=rec["fx"], fy=rec["fy"], cx=rec["cx"],
                         cy=rec["cy"], c2w=c2w,
                         width=rec["width"], height=rec["height"])
        except KeyError as e:
            raise ValueError(f"{where}: missing field {e}") from e
        except ValueError as e:
            raise ValueError(f"{where}: {e}") from e
        if image.ndim != 3 or image.shape[:2] != (cam.height, cam.width):
            raise ValueError(
                f"{where}: image {rec['image']} is {image.shape[:2]}, "
                f"manifest says {(cam.height, cam.width)}")
        mask = None
        if rec.get("mask"):
            m = read_image(d / rec["mask"])
            if m.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"{where}: mask {rec['mask']} size mismatch")
            mask = (m > 0.5).astype(np.float64)
        views.append(View(image, cam, mask))

    gt = None
    if data.get("gt_points"):
        gt = np.load(d / data["gt_points"])
    return SceneDataset(views, np.asarray(data["center"], dtype=np.float64),
                        float(data["radius"]), gt_points=gt)


# -- isosurface extraction -----------------------------------------------------------

def marching_cubes(field, lower=(-1.0, -1.0, -1.0), upper=(1.0, 1.0, 1.0),
                   res=64, chunk: int = 65536) -> TriangleMesh:
    """Zero level set of an SDF on a regular grid, 256-case tables.

    `field` is a numpy batch callable or anything the renderers accept;
    `res` counts cells per axis. Vertices on shared cell edges are created
    once, so closed level sets extract watertight.
    """
    sdf = field if callable(field) else _field_fn(field)
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("need lower < upper per axis")
    res3 = (res, res, res) if np.isscalar(res) else tuple(res)
    nx, ny, nz = (int(r) for r in res3)
    if min(nx, ny, nz) < 2:
        raise ValueError("need at least 2 cells per axis")

    xs = np.linspace(lo[0], hi[0], nx + 1)
    ys = np.linspace(lo[1], hi[1], ny + 1)
    zs = np.linspace(lo[2], hi[2], nz + 1)
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        block = pts[start:start + chunk]
        vals[start:start + len(block)] = np.asarray(sdf(block)).reshape(-1)
    grid = vals.reshape(nx + 1, ny + 1, nz + 1)

    inside = grid < 0.0
    if not inside.any() or inside.all():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    case = np.zeros((nx, ny, nz), dtype=np.int32)
    for c, (ox, oy, oz) in enumerate(mct.CORNER_OFFSETS):
        case |= inside[ox:ox + nx, oy:oy + ny, oz:oz + nz].astype(np.int32) << c
    cut = np.asarray(mct.EDGE_CUTS, dtype=np.int32)[case]
    ii, jj, kk = np.nonzero(cut)

    axes = (xs, ys, zs)
    verts: list[tuple[float, float, float]] = []
    vert_id: dict[tuple, int] = {}
    faces: list[tuple[int, int, int]] = []
    for i, j, k in zip(ii.tolist(), jj.tolist(), kk.tolist()):
        tris = mct.TRIANGLES[case[i, j, k]]
        local = {}
        for e in set(tris):
            ca, cb = mct.EDGE_CORNERS[e]
            oa, ob = mct.CORNER_OFFSETS[ca], mct.CORNER_OFFSETS[cb]
            pa = (i + oa[0], j + oa[1], k + oa[2])
            pb = (i + ob[0], j + ob[1], k + ob[2])
            key = (pa, pb) if pa < pb else (pb, pa)
            idx = vert_id.get(key)
            if idx is None:
                a, b = key
                va, vb = grid[a], grid[b]
                t = va / (va - vb)  # signs differ on a cut edge
                p = [axes[ax][a[ax]] + t * (axes[ax][b[ax]] - axes[ax][a[ax]])
                     for ax in range(3)]
                idx = len(verts)
                verts.append((p[0], p[1], p[2]))
                vert_id[key] = idx
            local[e] = idx
        for n in range(0, len(tris), 3):
            # table winding is inward for f<0 inside; swap for outward normals
            faces.append((local[tris[n]], local[tris[n + 2]], local[tris[n + 1]]))

    v = np.asarray(verts)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    return TriangleMesh(v, f[areas > 1e-12])


# -- metrics ------------------------------------------------------------------------

def sample_surface(mesh: TriangleMesh, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """n area-weighted uniform points on the mesh surface."""
    if mesh.n_triangles == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    idx = rng.choice(mesh.n_triangles, size=n, p=areas / total)
    a = mesh.vertices[mesh.triangles[idx, 0]]
    b = mesh.vertices[mesh.triangles[idx, 1]]
    c = mesh.vertices[mesh.triangles[idx, 2]]
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    fold = (u + v) > 1.0
    u = np.where(fold, 1.0 - u, u)
    v = np.where(fold, 1.0 - v, v)
    return a + u * (b - a) + v * (c - a)


def _as_points(x, n_samples: int, rng) -> np.ndarray:
    if isinstance(x, TriangleMesh):
        return sample_surface(x, n_samples, rng or np.random.default_rng(0))
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("need a non-empty [N, 3] point set")
    return pts


def chamfer(a, b, n_samples: int = 100000, rng=None) -> float:
    """Symmetric mean nearest-neighbor distance between two surfaces.

    Meshes are surface-sampled to n_samples points first.
    """
    pa = _as_points(a, n_samples, rng)
    pb = _as_points(b, n_samples, rng)
    d_ab = cKDTree(pb).query(pa)[0].mean()
    d_ba = cKDTree(pa).query(pb)[0].mean()
    return 0.5 * (d_ab + d_ba)


def psnr(a, b, peak: float = 1.0, cap: float = 99.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * math.log10(peak * peak / mse), cap)


# -- mesh IO ------------------------------------------------------------------------

def write_mesh(mesh: TriangleMesh, path):
    lines = [f"v {x:.8f} {y:.8f} {z:.8f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n" if lines else "")


def read_mesh(path) -> TriangleMesh:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing mesh file {p}")
    verts, faces = [], []
    for line in p.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                        np.asarray(faces, dtype=np.int64).reshape(-1, 3))
