"""Synthetic scene oracle, scene manifests and image I/O.

A synthetic scene is a list of textured spheres and axis-aligned boxes,
observed by pinhole cameras and rendered by exact ray casting. Alongside
the images the generator writes ground-truth poses, hit depths and
correspondence tracks (surface points with their projections in every view
that sees them).

Scene spec (JSON)::

    {
      "seed": 0,
      "width": 64, "height": 48, "focal": 60.0,
      "near": 2.0, "far": 7.0,
      "supersample": 2,
      "background": [0, 0, 0],
      "light": [0.3, 0.8, 0.5],
      "track_stride": 4,
      "primitives": [
        {"type": "sphere", "center": [0, 0, -4], "radius": 0.8, "cell": 0.3},
        {"type": "box", "min": [-1, -1, -5], "max": [1, -0.8, -3], "cell": 0.3}
      ],
      "cameras": {"kind": "forward", "n": 8, "radius": 0.8,
                  "target": [0, 0, -4]}
    }

``cameras.kind`` is ``"forward"`` (view 0 at the origin aimed at ``target``,
the rest on a ring around it, aimed at ``target`` too or, with
``"parallel": true``, sharing view 0's orientation) or ``"orbit"`` (views on a horizontal
arc of ``arc_deg`` degrees at ``distance`` from ``target``, ordered along
the arc).

Manifest (``manifest.json`` in the scene directory)::

    {
      "images": ["images/000.png", ...],
      "intrinsics": {"fx", "fy", "cx", "cy", "width", "height"},
      "near": 2.0, "far": 7.0,
      "reference_poses": "poses.txt",            # optional
      "correspondences": "correspondences.json", # optional
      "scene_diameter": 3.1,                     # optional
      "test_every": 8
    }

Paths are relative to the manifest. Correspondence files hold
``{"tracks": [{"point": [x, y, z], "views": {"0": [u, v], ...}}, ...]}``.

Rasters (depth maps, expected-point dumps) are one JSON header line
(``{"width", "height", "channels", "dtype": "<f4"}``) followed by the raw
little-endian float32 payload.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import Intrinsics, Pose, look_at, pixel_directions, project_points, read_poses, write_poses


class SceneError(ValueError):
    pass


# ---------------------------------------------------------------------------
# primitives

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _mix(h):
    with np.errstate(over="ignore"):
        h = (h ^ (h >> np.uint64(30))) * _M2
        h = (h ^ (h >> np.uint64(27))) * _M3
        return h ^ (h >> np.uint64(31))


def _cell_colors(cells: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic pseudo-random colour in [0.08, 0.92]^3 per integer cell."""
    c = cells.astype(np.int64).view(np.uint64)
    with np.errstate(over="ignore"):
        h = np.uint64(seed) * _M1
        for k in range(3):
            h = _mix(h ^ (c[..., k] + _M1 * np.uint64(k + 1)))
        out = []
        for k in range(3):
            h = _mix(h + _M1)
            out.append((h >> np.uint64(11)).astype(np.float64) / float(1 << 53))
    return 0.08 + 0.84 * np.stack(out, axis=-1)


@dataclass
class Primitive:
    cell: float = 0.3
    seed: int = 0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def albedo(self, p: np.ndarray) -> np.ndarray:
        cells = np.floor((p + self.offset) / self.cell)
        return _cell_colors(cells, self.seed)


@dataclass
class Sphere(Primitive):
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def intersect(self, o, d, inside_ok=True):
        oc = o - self.center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(inside_ok & (t1 > 1e-9), t1, np.inf))
        t = np.where(hit, t, np.inf)
        return t

    def normal(self, p):
        n = p - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def contains(self, p):
        return np.linalg.norm(p - self.center, axis=-1) < self.radius

    def bounds(self):
        return self.center - self.radius, self.center + self.radius

    def entry_distance(self, p, d):
        """Distance back along -d from interior points p to the surface."""
        q = p - self.center
        b = np.einsum("ij,ij->i", q, -d)
        c = np.einsum("ij,ij->i", q, q) - self.radius**2
        return -b + np.sqrt(np.maximum(b * b - c, 0.0))


@dataclass
class Box(Primitive):
    lo: np.ndarray = field(default_factory=lambda: -np.ones(3))
    hi: np.ndarray = field(default_factory=lambda: np.ones(3))

    def _slabs(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.lo - o) * inv
            t2 = (self.hi - o) * inv
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        return np.minimum(t1, t2), np.maximum(t1, t2)

    def intersect(self, o, d, inside_ok=True):
        tn, tf = self._slabs(o, d)
        tmin = tn.max(axis=1)
        tmax = tf.min(axis=1)
        hit = tmax >= np.maximum(tmin, 1e-9)
        t = np.where(tmin > 1e-9, tmin, np.where(inside_ok, tmax, np.inf))
        return np.where(hit, t, np.inf)

    def normal(self, p):
        centre = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = (p - centre) / half
        axis = np.argmax(np.abs(q), axis=-1)
        n = np.zeros_like(p)
        n[np.arange(len(p)), axis] = np.sign(q[np.arange(len(p)), axis])
        return n

    def contains(self, p):
        return np.all((p > self.lo) & (p < self.hi), axis=-1)

    def bounds(self):
        return self.lo.copy(), self.hi.copy()

    def entry_distance(self, p, d):
        tn, _ = self._slabs(p, d)
        return -tn.max(axis=1)


def primitive_from_dict(d: dict, index: int, seed: int) -> Primitive:
    rng = np.random.default_rng([seed, index])
    common = {
        "cell": float(d.get("cell", 0.3)),
        "seed": int(d.get("texture_seed", seed * 1000 + index)),
        "offset": rng.uniform(0.1, 0.9, size=3) * float(d.get("cell", 0.3)),
    }
    kind = d.get("type")
    if kind == "sphere":
        return Sphere(center=np.asarray(d["center"], dtype=np.float64), radius=float(d["radius"]), **common)
    if kind == "box":
        lo = np.asarray(d["min"], dtype=np.float64)
        hi = np.asarray(d["max"], dtype=np.float64)
        if np.any(hi <= lo):
            raise SceneError(f"primitive {index}: box max must exceed min")
        return Box(lo=lo, hi=hi, **common)
    raise SceneError(f"primitive {index}: unknown type {kind!r}")


# ---------------------------------------------------------------------------
# analytic ray casting


class SceneTracer:
    def __init__(self, primitives, background=(0.0, 0.0, 0.0), light=(0.3, 0.8, 0.5)):
        self.primitives = list(primitives)
        self.background = np.asarray(background, dtype=np.float64)
        lv = np.asarray(light, dtype=np.float64)
        self.light = lv / np.linalg.norm(lv)

    def trace(self, o, d):
        """First hit per ray: distance (inf on miss) and primitive index (-1)."""
        o = np.asarray(o, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        o = np.broadcast_to(o, d.shape)
        best = np.full(len(d), np.inf)
        idx = np.full(len(d), -1)
        for k, prim in enumerate(self.primitives):
            t = prim.intersect(o, d)
            closer = t < best
            best = np.where(closer, t, best)
            idx = np.where(closer, k, idx)
        return best, idx

    def shade(self, p, idx):
        """Colour of surface points ``p`` on primitives ``idx``."""
        out = np.tile(self.background, (len(p), 1))
        for k, prim in enumerate(self.primitives):
            m = idx == k
            if not m.any():
                continue
            n = prim.normal(p[m])
            lam = np.clip(n @ self.light, 0.0, 1.0)
            out[m] = prim.albedo(p[m]) * (0.55 + 0.45 * lam)[:, None]
        return out

    def radiance(self, o, d):
        t, idx = self.trace(o, d)
        hit = idx >= 0
        p = np.broadcast_to(np.asarray(o, dtype=np.float64).reshape(-1, 3), d.shape) + np.where(hit, t, 0.0)[:, None] * d
        return self.shade(p, idx), t, idx

    def render(self, intr: Intrinsics, pose: Pose, supersample: int = 1):
        """Image (H, W, 3) and hit distance along each centre ray (inf on miss)."""
        h, w = intr.height, intr.width
        vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        acc = np.zeros((h * w, 3))
        s = max(int(supersample), 1)
        offs = (np.arange(s) + 0.5) / s - 0.5
        for dy in offs:
            for dx in offs:
                pix = np.stack([uu.ravel() + dx, vv.ravel() + dy], axis=-1)
                d = pixel_directions(intr, pix)
                d /= np.linalg.norm(d, axis=-1, keepdims=True)
                dw = d @ pose.rotation.T
                col, _, _ = self.radiance(pose.translation, dw)
                acc += col
        img = (acc / (s * s)).reshape(h, w, 3)
        pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
        d = pixel_directions(intr, pix)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        t, _ = self.trace(pose.translation, d @ pose.rotation.T)
        return img, t.reshape(h, w)

    def inside(self, p):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        m = np.zeros(len(p), dtype=bool)
        for prim in self.primitives:
            m |= prim.contains(p)
        return m


class AnalyticField:
    """Ground-truth radiance field of a synthetic scene.

    Density is ``sigma_inside`` within any primitive and zero elsewhere.
    The colour of an interior point is the shaded colour of the surface
    point where a ray along ``d`` entered the primitive, so compositing
    reproduces the ray-cast image up to quadrature resolution.
    """

    def __init__(self, tracer: SceneTracer, sigma_inside: float = 1e4):
        self.tracer = tracer
        self.sigma_inside = sigma_inside

    def __call__(self, x, d):
        dtype = x.dtype if isinstance(x, torch.Tensor) else torch.float64
        xn = np.asarray(torch.as_tensor(x).detach().cpu().numpy(), dtype=np.float64).reshape(-1, 3)
        dn = np.asarray(torch.as_tensor(d).detach().cpu().numpy(), dtype=np.float64).reshape(-1, 3)
        sigma = np.zeros(len(xn))
        rgb = np.zeros((len(xn), 3))
        for k, prim in enumerate(self.tracer.primitives):
            m = prim.contains(xn) & (sigma == 0)
            if not m.any():
                continue
            sigma[m] = self.sigma_inside
            back = prim.entry_distance(xn[m], dn[m])
            surf = xn[m] - back[:, None] * dn[m]
            rgb[m] = self.tracer.shade(surf, np.full(m.sum(), k))
        return torch.as_tensor(sigma, dtype=dtype), torch.as_tensor(rgb, dtype=dtype)


# ---------------------------------------------------------------------------
# scene generation


def forward_rig(n, radius, target, up=(0.0, 1.0, 0.0), centre=(0.0, 0.0, 0.0), parallel=False):
    """View 0 at ``centre``, the rest evenly on a ring around it, all aimed at
    ``target`` (or all sharing view 0's orientation when ``parallel``)."""
    centre = np.asarray(centre, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    base = look_at(centre, target, up)
    poses = [base]
    for k in range(n - 1):
        a = 2 * math.pi * k / max(n - 1, 1)
        off = base.rotation @ np.array([radius * math.cos(a), radius * math.sin(a), 0.0])
        if parallel:
            poses.append(Pose(base.rotation, centre + off))
        else:
            poses.append(look_at(centre + off, target, up))
    return poses


def orbit_rig(n, distance, target, arc_deg=60.0, height=0.0, up=(0.0, 1.0, 0.0)):
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for k in range(n):
        a = math.radians(-arc_deg / 2 + arc_deg * k / max(n - 1, 1))
        eye = target + np.array([distance * math.sin(a), height, distance * math.cos(a)])
        poses.append(look_at(eye, target, up))
    return poses


@dataclass
class SyntheticScene:
    intrinsics: Intrinsics
    poses: list
    images: list
    depths: list
    tracks: list
    tracer: SceneTracer
    near: float
    far: float
    scene_diameter: float
    spec: dict


def _cameras(spec, seed):
    cam = spec.get("cameras", {})
    kind = cam.get("kind", "forward")
    n = int(cam.get("n", 8))
    if n < 3:
        raise SceneError("a scene needs at least 3 cameras")
    target = cam.get("target", [0.0, 0.0, -4.0])
    if kind == "forward":
        return forward_rig(n, float(cam.get("radius", 0.8)), target, parallel=bool(cam.get("parallel", False)))
    if kind == "orbit":
        return orbit_rig(n, float(cam.get("distance", 4.0)), target, float(cam.get("arc_deg", 60.0)),
                         float(cam.get("height", 0.0)))
    raise SceneError(f"unknown camera rig {kind!r}")


def compute_tracks(tracer: SceneTracer, intr: Intrinsics, poses, stride: int = 4, rel_tol: float = 1e-6):
    """Surface points seeded on a pixel grid of every view, with their
    projections in all views that see them unoccluded and in bounds."""
    tracks = []
    h, w = intr.height, intr.width
    vv, uu = np.meshgrid(np.arange(stride // 2, h, stride), np.arange(stride // 2, w, stride), indexing="ij")
    grid = np.stack([uu.ravel(), vv.ravel()], axis=-1).astype(np.float64)
    for v, pose in enumerate(poses):
        d = pixel_directions(intr, grid)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        dw = d @ pose.rotation.T
        t, idx = tracer.trace(pose.translation, dw)
        hit = idx >= 0
        pts = pose.translation + t[hit, None] * dw[hit]
        vis_all = {}
        for k, other in enumerate(poses):
            uv, depth = project_points(intr, other, pts)
            ok = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
            dist = np.linalg.norm(pts - other.translation, axis=-1)
            dirs = (pts - other.translation) / np.maximum(dist, 1e-12)[:, None]
            tt, _ = tracer.trace(other.translation, dirs)
            ok &= np.abs(tt - dist) <= rel_tol * np.maximum(dist, 1.0)
            vis_all[k] = (ok, uv)
        for i in range(len(pts)):
            entry = {}
            for k, (ok, uv) in vis_all.items():
                if k == v:
                    entry[k] = grid[hit][i]
                elif ok[i]:
                    entry[k] = uv[i]
            if len(entry) >= 2:
                tracks.append({"point": pts[i], "views": entry, "seed_view": v})
    return tracks


def build_scene(spec: dict, seed: int | None = None) -> SyntheticScene:
    spec = dict(spec)
    seed = int(spec.get("seed", 0) if seed is None else seed)
    spec["seed"] = seed
    w, h = int(spec.get("width", 64)), int(spec.get("height", 48))
    f = float(spec.get("focal", 60.0))
    intr = Intrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
    prims = [primitive_from_dict(p, i, seed) for i, p in enumerate(spec.get("primitives", []))]
    tracer = SceneTracer(prims, spec.get("background", [0.0, 0.0, 0.0]), spec.get("light", [0.3, 0.8, 0.5]))
    poses = _cameras(spec, seed)
    centres = np.array([p.translation for p in poses])
    if prims and tracer.inside(centres).any():
        k = int(np.flatnonzero(tracer.inside(centres))[0])
        raise SceneError(f"camera {k} lies inside a primitive")
    images, depths = [], []
    for pose in poses:
        img, dep = tracer.render(intr, pose, int(spec.get("supersample", 2)))
        images.append(img)
        depths.append(dep)
    tracks = compute_tracks(tracer, intr, poses, int(spec.get("track_stride", 4))) if prims else []
    if prims:
        los, his = zip(*(p.bounds() for p in prims))
        diameter = float(np.linalg.norm(np.max(his, axis=0) - np.min(los, axis=0)))
    else:
        diameter = 0.0
    return SyntheticScene(intr, poses, images, depths, tracks, tracer, float(spec.get("near", 2.0)),
                          float(spec.get("far", 7.0)), diameter, spec)


def generate_scene(spec: dict, out_dir, seed: int | None = None) -> SyntheticScene:
    """Render a synthetic scene and write it, with its manifest, to ``out_dir``."""
    scene = build_scene(spec, seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    names = []
    for i, (img, dep) in enumerate(zip(scene.images, scene.depths)):
        name = f"images/{i:03d}.png"
        save_png(out / name, img)
        write_raster(out / f"depth/{i:03d}.f32", np.where(np.isfinite(dep), dep, 0.0))
        names.append(name)
    write_poses(out / "poses.txt", scene.poses, comment="ground-truth camera-to-world poses")
    write_tracks(out / "correspondences.json", scene.tracks)
    manifest = {
        "images": names,
        "intrinsics": scene.intrinsics.to_dict(),
        "near": scene.near,
        "far": scene.far,
        "reference_poses": "poses.txt",
        "correspondences": "correspondences.json",
        "scene_diameter": scene.scene_diameter,
        "test_every": int(spec.get("test_every", 8)),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "scene_spec.json").write_text(json.dumps(scene.spec, indent=2, sort_keys=True) + "\n")
    return scene


def standard_scene_spec(seed: int = 0) -> dict:
    """The desk-scale benchmark scene: eight forward-facing 64x48 views of a
    cluster of textured objects on a plate, taken from a ring of parallel
    cameras."""
    return {
        "seed": seed,
        "width": 64,
        "height": 48,
        "focal": 64.0,
        "near": 2.0,
        "far": 7.0,
        "supersample": 3,
        "background": [0.0, 0.0, 0.0],
        "light": [0.3, 0.8, 0.5],
        "track_stride": 3,
        "test_every": 8,
        "primitives": [
            {"type": "box", "min": [-1.6, -1.2, -5.6], "max": [1.6, 1.2, -5.3], "cell": 0.4},
            {"type": "box", "min": [-1.4, -1.05, -5.3], "max": [1.4, -0.85, -3.0], "cell": 0.4},
            {"type": "sphere", "center": [-0.55, -0.2, -4.2], "radius": 0.6, "cell": 0.3},
            {"type": "box", "min": [0.15, -0.85, -4.6], "max": [0.95, 0.35, -3.8], "cell": 0.3},
            {"type": "sphere", "center": [0.45, 0.55, -4.9], "radius": 0.35, "cell": 0.25},
        ],
        "cameras": {"kind": "forward", "n": 8, "radius": 0.7, "target": [0.0, -0.1, -4.4], "parallel": True},
    }


def textured_scene_spec(seed: int = 0) -> dict:
    """The standard layout at 256x192 with finer texture cells: enough
    corner structure for the default detector."""
    spec = standard_scene_spec(seed)
    spec.update({"width": 256, "height": 192, "focal": 256.0, "supersample": 2, "track_stride": 8})
    spec["primitives"] = [dict(p, cell=p["cell"] * 0.5) for p in spec["primitives"]]
    return spec


def sphere_scene_spec(seed: int = 0, n: int = 4) -> dict:
    return {
        "seed": seed,
        "width": 64,
        "height": 48,
        "focal": 60.0,
        "near": 2.0,
        "far": 6.0,
        "supersample": 1,
        "primitives": [{"type": "sphere", "center": [0.0, 0.0, -4.0], "radius": 1.0, "cell": 0.3}],
        "cameras": {"kind": "orbit", "n": n, "distance": 4.0, "target": [0.0, 0.0, -4.0], "arc_deg": 40.0},
    }


def box_scene_spec(seed: int = 0, n: int = 4) -> dict:
    return {
        "seed": seed,
        "width": 48,
        "height": 36,
        "focal": 48.0,
        "near": 2.0,
        "far": 7.0,
        "supersample": 1,
        "primitives": [
            {"type": "box", "min": [-0.9, -0.7, -4.6], "max": [0.7, 0.6, -3.4], "cell": 0.4},
            {"type": "box", "min": [-2.0, -1.6, -5.8], "max": [2.0, 1.6, -5.5], "cell": 0.5},
        ],
        "cameras": {"kind": "orbit", "n": n, "distance": 4.0, "target": [0.0, 0.0, -4.0], "arc_deg": 30.0},
    }


# ---------------------------------------------------------------------------
# files


def save_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise SceneError(f"cannot read image {path}: {e}") from e


def write_raster(path, arr: np.ndarray) -> None:
    a = np.asarray(arr, dtype="<f4")
    h, w = a.shape[:2]
    c = 1 if a.ndim == 2 else a.shape[2]
    header = json.dumps({"width": w, "height": h, "channels": c, "dtype": "<f4"}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(a).tobytes())


def read_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    hdr = json.loads(data[:nl])
    a = np.frombuffer(data[nl + 1 :], dtype=np.dtype(hdr["dtype"]))
    shape = (hdr["height"], hdr["width"]) if hdr["channels"] == 1 else (hdr["height"], hdr["width"], hdr["channels"])
    return a.reshape(shape).astype(np.float32)


def write_tracks(path, tracks) -> None:
    out = []
    for tr in tracks:
        out.append(
            {
                "point": [float(x) for x in tr["point"]],
                "views": {str(k): [float(uv[0]), float(uv[1])] for k, uv in sorted(tr["views"].items())},
            }
        )
    Path(path).write_text(json.dumps({"tracks": out}, sort_keys=True) + "\n")


def read_tracks(path) -> list:
    raw = json.loads(Path(path).read_text())
    return [
        {"point": np.asarray(t["point"]), "views": {int(k): np.asarray(v) for k, v in t["views"].items()}}
        for t in raw["tracks"]
    ]


# ---------------------------------------------------------------------------
# loading


@dataclass
class Dataset:
    images: list  # float64 (H, W, 3) in [0, 1]
    intrinsics: Intrinsics
    near: float
    far: float
    ids: list  # original image indices
    test_ids: list
    reference_poses: list | None = None
    tracks: list | None = None
    scene_diameter: float | None = None
    root: Path | None = None

    @property
    def train_ids(self):
        return [i for i in self.ids if i not in self.test_ids]

    @property
    def has_reference_poses(self) -> bool:
        return self.reference_poses is not None

    def image(self, i) -> np.ndarray:
        return self.images[self.ids.index(i)]

    def subset(self, ids) -> "Dataset":
        ids = list(ids)
        return Dataset(
            [self.image(i) for i in ids],
            self.intrinsics,
            self.near,
            self.far,
            ids,
            [i for i in self.test_ids if i in ids],
            self.reference_poses,
            self.tracks,
            self.scene_diameter,
            self.root,
        )


def holdout_ids(n: int, every: int = 8) -> list[int]:
    return list(range(0, n, every)) if every > 0 else []


def _downscale(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[0] // factor, img.shape[1] // factor
    return img[: h * factor, : w * factor].reshape(h, factor, w, factor, 3).mean(axis=(1, 3))


def load_scene(manifest_path, downscale: int = 1, test_every: int | None = None) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise SceneError(f"missing manifest {path}")
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneError(f"corrupt manifest {path}: {e}") from e
    root = path.parent
    intr = Intrinsics.from_dict(man["intrinsics"])
    images = []
    for name in man["images"]:
        p = root / name
        if not p.exists():
            raise SceneError(f"missing image {p}")
        img = load_png(p)
        if img.shape[:2] != (intr.height, intr.width):
            raise SceneError(f"{p}: size {img.shape[1]}x{img.shape[0]} disagrees with intrinsics")
        images.append(_downscale(img, downscale))
    if downscale != 1:
        intr = intr.scaled(downscale)
    ref = None
    if man.get("reference_poses"):
        rp = root / man["reference_poses"]
        if not rp.exists():
            raise SceneError(f"missing reference pose file {rp}")
        ref = read_poses(rp)
    tracks = None
    if man.get("correspondences"):
        cp = root / man["correspondences"]
        if not cp.exists():
            raise SceneError(f"missing correspondence file {cp}")
        tracks = read_tracks(cp)
        if downscale != 1:
            for tr in tracks:
                tr["views"] = {k: uv / downscale for k, uv in tr["views"].items()}
    every = int(man.get("test_every", 8) if test_every is None else test_every)
    n = len(images)
    return Dataset(images, intr, float(man["near"]), float(man["far"]), list(range(n)), holdout_ids(n, every),
                   ref, tracks, man.get("scene_diameter"), root)
