"""Stratified and hierarchical ray sampling plus volume-rendering quadrature.

Per-sample weights are ``w_i = T_i (1 - exp(-sigma_i delta_i))`` with
``T_i = exp(-sum_{j<i} sigma_j delta_j)``; the last interval is a large
sentinel so an opaque final sample absorbs all remaining transmittance.
The expected 3D point of a ray is the (unnormalised) weighted sum of its
sample positions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import kernels
from .geometry import GeometryError, Intrinsics, generate_rays, transform_rays

LAST_DELTA = 1e10


class RenderError(ValueError):
    pass


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    near: float = 2.0
    far: float = 6.0
    perturb: bool = True
    # divide the expected point by the accumulated weight
    normalize_expected_point: bool = False
    # level whose weights produce expected points: "fine" or "coarse"
    expected_point_level: str = "fine"
    kernel_backend: str | None = None

    def to_dict(self):
        return asdict(self)


@dataclass
class RaySamples:
    t: torch.Tensor  # (R, S) strictly increasing
    deltas: torch.Tensor  # (R, S), last column LAST_DELTA
    fallback: np.ndarray | None = None  # (R,) uniform-pdf flags for importance samples

    def positions(self, origins, directions):
        return origins[:, None, :] + self.t[..., None] * directions[:, None, :]


@dataclass
class RenderResult:
    color: torch.Tensor  # (R, 3)
    weights: torch.Tensor  # (R, S)
    acc: torch.Tensor  # (R,) sum of weights
    trans_final: torch.Tensor  # (R,) transmittance past the last sample
    t: torch.Tensor  # (R, S)
    expected_point: torch.Tensor | None = None  # (R, 3)
    total_weight: torch.Tensor | None = None  # (R,)
    fallback: np.ndarray | None = None


def _deltas(t: torch.Tensor) -> torch.Tensor:
    last = torch.full_like(t[:, :1], LAST_DELTA)
    return torch.cat([t[:, 1:] - t[:, :-1], last], dim=1)


def stratified_samples(n_rays: int, near: float, far: float, n: int, rng=None, jitter: bool = True,
                       dtype=torch.float64) -> RaySamples:
    """One sample per equal-width bin of ``[near, far]``; bin centres when
    ``jitter`` is off."""
    if n < 2:
        raise RenderError(f"need at least 2 samples per ray, got {n}")
    if not near < far:
        raise RenderError(f"need near < far, got {near} >= {far}")
    edges = np.linspace(near, far, n + 1)
    if jitter:
        if rng is None:
            raise RenderError("jittered sampling needs an rng")
        u = rng.random((n_rays, n))
    else:
        u = np.full((n_rays, n), 0.5)
    t = edges[:-1] + u * (edges[1:] - edges[:-1])
    t = torch.as_tensor(t, dtype=dtype)
    return RaySamples(t, _deltas(t))


def importance_samples(coarse: RenderResult, near: float, far: float, n: int, rng=None,
                       jitter: bool = True, merge: bool = True, backend: str | None = None) -> RaySamples:
    """Inverse-CDF samples from the piecewise-constant density proportional to
    the coarse weights; each coarse sample owns the bin between the midpoints
    to its neighbours. Merged with the coarse samples when ``merge``."""
    tc = coarse.t.detach().cpu().numpy().astype(np.float64)
    w = coarse.weights.detach().cpu().numpy().astype(np.float64)
    n_rays = tc.shape[0]
    mids = 0.5 * (tc[:, 1:] + tc[:, :-1])
    edges = np.concatenate([np.full((n_rays, 1), near), mids, np.full((n_rays, 1), far)], axis=1)
    if jitter:
        if rng is None:
            raise RenderError("jittered sampling needs an rng")
        u = (np.arange(n) + rng.random((n_rays, n))) / n
    else:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (n_rays, n))
    new, flag = kernels.sample_pdf(edges, w, u, backend=backend)
    t = np.sort(np.concatenate([tc, new], axis=1), axis=1) if merge else new
    t = torch.as_tensor(t, dtype=coarse.t.dtype)
    return RaySamples(t, _deltas(t), flag)


def composite(samples: RaySamples, sigma: torch.Tensor, rgb: torch.Tensor, backend: str | None = None) -> RenderResult:
    """Alpha-composite per-sample densities (R, S) and colours (R, S, 3)."""
    if sigma.shape != samples.t.shape or rgb.shape != (*samples.t.shape, 3):
        raise RenderError(
            f"composite: sigma {tuple(sigma.shape)} / rgb {tuple(rgb.shape)} vs samples {tuple(samples.t.shape)}"
        )
    if bool((sigma.detach() < 0).any()):
        raise RenderError("composite: negative density")
    deltas = samples.deltas.to(sigma.dtype)
    w, tf = kernels.composite_weights(sigma, deltas, backend=backend)
    color = (w[..., None] * rgb).sum(dim=1)
    return RenderResult(color, w, w.sum(dim=1), tf, samples.t, fallback=samples.fallback)


def expected_point(t: torch.Tensor, weights: torch.Tensor, origins: torch.Tensor, directions: torch.Tensor,
                   normalize: bool = False):
    """``x_s = sum_i w_i (o + t_i d)`` and ``sum_i w_i`` per ray."""
    total = weights.sum(dim=1)
    depth = (weights * t.to(weights.dtype)).sum(dim=1)
    x = total[:, None] * origins + depth[:, None] * directions
    if normalize:
        x = x / total.clamp_min(1e-10)[:, None]
    return x, total


def _query(field, pts, dirs):
    r, s, _ = pts.shape
    d = dirs[:, None, :].expand(r, s, 3)
    sigma, rgb = field(pts.reshape(-1, 3), d.reshape(-1, 3))
    return sigma.reshape(r, s), rgb.reshape(r, s, 3)


def render_rays(fields, origins: torch.Tensor, directions: torch.Tensor, cfg: RenderConfig, rng=None):
    """Coarse and fine render of world-frame rays.

    ``fields`` is a ``(coarse, fine)`` pair of callables ``(x, d) -> (sigma,
    rgb)``. Gradients reach the fields and, through origins and directions,
    whatever produced the rays.
    """
    if not cfg.near < cfg.far:
        raise RenderError(f"need near < far, got {cfg.near} >= {cfg.far}")
    coarse_f, fine_f = fields
    n_rays = origins.shape[0]
    dtype = origins.dtype
    sc = stratified_samples(n_rays, cfg.near, cfg.far, cfg.n_coarse, rng, jitter=cfg.perturb, dtype=dtype)
    sig, rgb = _query(coarse_f, sc.positions(origins, directions), directions)
    coarse = composite(sc, sig, rgb, cfg.kernel_backend)
    results = {"coarse": coarse}
    if cfg.n_fine > 0 and fine_f is not None:
        sf = importance_samples(coarse, cfg.near, cfg.far, cfg.n_fine, rng, jitter=cfg.perturb,
                                backend=cfg.kernel_backend)
        sig, rgb = _query(fine_f, sf.positions(origins, directions), directions)
        results["fine"] = composite(sf, sig, rgb, cfg.kernel_backend)
    else:
        results["fine"] = coarse
    for res in results.values():
        res.expected_point, res.total_weight = expected_point(
            res.t, res.weights, origins, directions, cfg.normalize_expected_point
        )
    return results["coarse"], results["fine"]


def camera_rays(intr: Intrinsics, pixels, rotation, translation, dtype=torch.float64):
    """World rays for pixels seen through camera-to-world poses.

    ``rotation``/``translation`` are one pose or per-pixel stacks and may
    carry gradients.
    """
    cam = generate_rays(intr, pixels)
    d = torch.as_tensor(cam.directions, dtype=dtype)
    rotation = torch.as_tensor(rotation, dtype=dtype)
    translation = torch.as_tensor(translation, dtype=dtype)
    return transform_rays(d, rotation, translation)


def render_pixels(fields, rotation, translation, intr: Intrinsics, pixels, cfg: RenderConfig, rng=None,
                  dtype=torch.float64):
    try:
        o, d = camera_rays(intr, pixels, rotation, translation, dtype)
    except GeometryError as e:
        raise RenderError(str(e)) from e
    return render_rays(fields, o, d, cfg, rng)


@torch.no_grad()
def render_image(fields, rotation, translation, intr: Intrinsics, cfg: RenderConfig, rng=None,
                 chunk: int = 1024, dtype=torch.float32):
    """Full image render; returns (H, W, 3) colours and (H, W) expected depth."""
    vv, uu = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1).astype(np.float64)
    cols, depths = [], []
    for s in range(0, len(pix), chunk):
        _, fine = render_pixels(fields, rotation, translation, intr, pix[s : s + chunk], cfg, rng, dtype)
        cols.append(fine.color.float().numpy())
        depths.append((fine.weights * fine.t.to(fine.weights.dtype)).sum(dim=1).float().numpy())
    img = np.concatenate(cols).reshape(intr.height, intr.width, 3)
    dep = np.concatenate(depths).reshape(intr.height, intr.width)
    return img, dep
