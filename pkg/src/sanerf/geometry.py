"""Camera model, poses, rays and Sim(3) trajectory alignment.

Conventions, used everywhere in the package:

* camera frame is right-handed, x right, y up, the camera looks down -z;
* pixel ``(u, v)`` has its centre at integer coordinates, ``u`` grows to the
  right and ``v`` grows downwards;
* a ``Pose`` is camera-to-world: a camera-frame direction ``d`` maps to
  ``R @ d`` and the camera centre in world coordinates is ``t``;
* Euler angles compose as ``R = Rz(gamma) @ Ry(beta) @ Rx(alpha)``.

Functions accept numpy arrays or torch tensors where gradients matter
(``euler_to_rotation``, ``transform_rays``); the numpy code paths are used by
the data generator and the evaluation tools.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


class GeometryError(ValueError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


@dataclass
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(-1)
        if m.size not in (12, 16):
            raise GeometryError(f"pose matrix needs 12 or 16 values, got {m.size}")
        m = m[:12].reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def is_valid(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) < tol
        )


@dataclass
class EulerPose:
    angles: np.ndarray
    translation: np.ndarray

    def to_pose(self) -> Pose:
        return Pose(euler_to_rotation(np.asarray(self.angles, dtype=np.float64)), self.translation)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image downscaled by ``factor``."""
        return Intrinsics(
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            int(round(self.width / factor)),
            int(round(self.height / factor)),
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass
class Rays:
    """A batch of rays; ``origins`` and ``directions`` are (N, 3)."""

    origins: torch.Tensor | np.ndarray
    directions: torch.Tensor | np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not self.near < self.far:
            raise GeometryError(f"need near < far, got {self.near} >= {self.far}")

    def __len__(self):
        return self.origins.shape[0]


# ---------------------------------------------------------------------------
# rotations


def _rot_parts(angles):
    if isinstance(angles, torch.Tensor):
        return torch, angles[..., 0], angles[..., 1], angles[..., 2]
    a = np.asarray(angles, dtype=np.float64)
    return np, a[..., 0], a[..., 1], a[..., 2]


def euler_to_rotation(angles):
    """Rotation matrix ``Rz(g) @ Ry(b) @ Rx(a)`` for angles ``(a, b, g)``.

    Works batched over leading dimensions and for numpy or torch input.
    """
    xp, a, b, g = _rot_parts(angles)
    ca, sa = xp.cos(a), xp.sin(a)
    cb, sb = xp.cos(b), xp.sin(b)
    cg, sg = xp.cos(g), xp.sin(g)
    rows = [
        [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
        [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
        [-sb, cb * sa, cb * ca],
    ]
    if xp is torch:
        return torch.stack([torch.stack(r, dim=-1) for r in rows], dim=-2)
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rotation_to_euler(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation` for ``|beta| < pi/2``."""
    r = np.asarray(r, dtype=np.float64)
    b = -np.arcsin(np.clip(r[2, 0], -1.0, 1.0))
    a = np.arctan2(r[2, 1], r[2, 2])
    g = np.arctan2(r[1, 0], r[0, 0])
    return np.array([a, b, g])


def project_to_so3(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    s = np.eye(3)
    s[2, 2] = np.sign(np.linalg.det(u @ vt))
    return u @ s @ vt


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` whose -z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    z = -fwd
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


# ---------------------------------------------------------------------------
# rays


def pixel_directions(intr: Intrinsics, pixels) -> np.ndarray:
    """Unnormalised camera-frame directions for (N, 2) pixel coordinates."""
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = p[:, 0], p[:, 1]
    return np.stack([(u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, -np.ones_like(u)], axis=-1)


def check_pixels(intr: Intrinsics, pixels) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    bad = (p[:, 0] < 0) | (p[:, 0] > intr.width - 1) | (p[:, 1] < 0) | (p[:, 1] > intr.height - 1)
    bad |= ~np.isfinite(p).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise GeometryError(
            f"pixel {tuple(p[i])} outside image {intr.width}x{intr.height}"
        )
    return p


def generate_rays(intr: Intrinsics, pixels, near: float = 0.0, far: float = 1.0) -> Rays:
    """Camera-frame rays through ``pixels``: origin at zero, unit direction."""
    p = check_pixels(intr, pixels)
    d = pixel_directions(intr, p)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return Rays(np.zeros_like(d), d, near, far)


def transform_rays(directions, rotation, translation):
    """World-frame rays for camera-frame ``directions`` under a pose.

    Directions become ``R d`` (renormalised) and every origin becomes the
    camera centre ``t``. ``rotation``/``translation`` may be torch tensors
    carrying gradients; batched poses of shape (N, 3, 3)/(N, 3) pair with
    (N, 3) directions.
    """
    if isinstance(rotation, torch.Tensor) or isinstance(directions, torch.Tensor):
        rotation = torch.as_tensor(rotation)
        dtype = rotation.dtype
        d = torch.as_tensor(directions, dtype=dtype)
        t = torch.as_tensor(translation, dtype=dtype)
        dw = torch.einsum("...ij,...j->...i", rotation, d)
        dw = dw / dw.norm(dim=-1, keepdim=True)
        o = t.expand_as(dw) if t.ndim == 1 else t
        return o, dw
    r = np.asarray(rotation, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    dw = np.einsum("...ij,...j->...i", r, d)
    dw = dw / np.linalg.norm(dw, axis=-1, keepdims=True)
    o = np.broadcast_to(np.asarray(translation, dtype=np.float64), dw.shape).copy()
    return o, dw


def transform_ray(ray: Rays, pose: Pose) -> Rays:
    o, d = transform_rays(ray.directions, pose.rotation, pose.translation)
    return Rays(o, d, ray.near, ray.far)


def project_points(intr: Intrinsics, pose: Pose, points) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns (N, 2) pixel coords and (N,) depths along -z."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (pts - pose.translation) @ pose.rotation
    depth = -cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / depth + intr.cx
        v = -intr.fy * cam[:, 1] / depth + intr.cy
    return np.stack([u, v], axis=-1), depth


def triangulate(rays_o: np.ndarray, rays_d: np.ndarray) -> np.ndarray:
    """Least-squares point closest to a set of lines."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(rays_o, rays_d):
        d = d / np.linalg.norm(d)
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ o
    return np.linalg.solve(a, b)


# ---------------------------------------------------------------------------
# alignment


def umeyama_sim3(source, target):
    """Similarity ``(s, R, t)`` minimising ``sum |s R x_i + t - y_i|^2``.

    ``source`` and ``target`` are (N, 3) with N >= 3 and non-collinear.
    """
    x = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if x.shape != y.shape:
        raise GeometryError(f"point sets differ in shape: {x.shape} vs {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {n}")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = (xc**2).sum() / n
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    # Two vanishing singular values means the source is collinear (or a point).
    if var_x <= 1e-300 or d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateConfigurationError("rank-deficient covariance (collinear or coincident points)")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    r = u @ s_fix @ vt
    scale = float(np.trace(np.diag(d) @ s_fix) / var_x)
    t = my - scale * r @ mx
    return scale, r, t


def apply_sim3(scale, r, t, points) -> np.ndarray:
    return scale * np.asarray(points, dtype=np.float64) @ np.asarray(r).T + np.asarray(t)


def sim3_pose(scale, r, t, pose: Pose) -> Pose:
    """Map a camera-to-world pose through a world similarity."""
    return Pose(r @ pose.rotation, scale * r @ pose.translation + t)


def ate_rmse(estimated, reference) -> float:
    """Translation RMSE after Sim(3) alignment of ``estimated`` onto ``reference``."""
    if len(estimated) != len(reference):
        raise GeometryError(f"trajectory lengths differ: {len(estimated)} vs {len(reference)}")
    if len(estimated) < 3:
        raise DegenerateConfigurationError("ATE needs at least 3 poses")
    est = np.array([_centre(p) for p in estimated])
    ref = np.array([_centre(p) for p in reference])
    s, r, t = umeyama_sim3(est, ref)
    res = apply_sim3(s, r, t, est) - ref
    return float(np.sqrt((res**2).sum(axis=1).mean()))


def _centre(p) -> np.ndarray:
    if isinstance(p, Pose):
        return p.translation
    return np.asarray(p, dtype=np.float64).reshape(-1)[-3:] if np.size(p) == 3 else Pose.from_matrix(p).translation


# ---------------------------------------------------------------------------
# pose text files


def write_poses(path, poses, comment: str | None = None) -> None:
    lines = []
    if comment:
        lines.extend(f"# {c}" for c in comment.splitlines())
    lines.append("# one camera per line: row-major 3x4 camera-to-world [R|t]")
    for p in poses:
        lines.append(" ".join(repr(float(v)) for v in p.matrix().reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        vals = line.split()
        if len(vals) != 12:
            raise GeometryError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        poses.append(Pose.from_matrix([float(v) for v in vals]))
    return poses


def write_pose_map(path, poses: dict, comment: str | None = None) -> None:
    """Pose file for a subset of images: the ``ids`` header line names the
    image id of each following row."""
    order = sorted(poses)
    head = (comment + "\n" if comment else "") + "ids: " + " ".join(map(str, order))
    write_poses(path, [poses[i] for i in order], comment=head)


def read_pose_map(path) -> dict:
    """``{image_id: Pose}``; files without an ``ids`` header number rows from 0."""
    poses = read_poses(path)
    ids = None
    for line in Path(path).read_text().splitlines():
        body = line.lstrip()
        if body.startswith("#") and body[1:].strip().startswith("ids:"):
            ids = [int(v) for v in body[1:].strip()[4:].split()]
    if ids is None:
        ids = list(range(len(poses)))
    if len(ids) != len(poses):
        raise GeometryError(f"{path}: {len(ids)} ids for {len(poses)} poses")
    return dict(zip(ids, poses))
