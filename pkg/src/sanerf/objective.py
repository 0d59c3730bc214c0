"""Training losses: pixel photometric, feature colour, 3D match consistency."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise LossError("loss weights must be non-negative")


@dataclass
class LossReport:
    L_pixel: float = 0.0
    L_feat_color: float = 0.0
    L_pr: float = 0.0
    L_3D: float = 0.0
    L_total: float = 0.0
    gated_match_fraction: float = 0.0
    no_features: bool = False
    no_matches: bool = False

    def as_dict(self):
        return asdict(self)


def photometric_loss(rendered: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every ray and channel."""
    if rendered.shape != truth.shape:
        raise LossError(f"photometric_loss: shapes {tuple(rendered.shape)} vs {tuple(truth.shape)}")
    if rendered.numel() == 0:
        return rendered.sum() * 0.0
    return ((rendered - truth) ** 2).mean()


def bilinear_sample(image: np.ndarray, uv) -> tuple[np.ndarray, bool]:
    """Colours at fractional pixel positions; returns ``(rgb, clamped)``
    where ``clamped`` reports that some position fell outside the image and
    was clamped to the edge."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    clamped = bool(((u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)).any())
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(int), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(int), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    out = (
        img[v0, u0] * (1 - fu) * (1 - fv)
        + img[v0, u1] * fu * (1 - fv)
        + img[v1, u0] * (1 - fu) * fv
        + img[v1, u1] * fu * fv
    )
    return out, clamped


def feature_color_loss(rendered: torch.Tensor, truth: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Mean over features of the squared colour error norm.

    Returns ``(loss, empty)``; an empty feature set gives zero loss.
    """
    if rendered.shape != truth.shape:
        raise LossError(f"feature_color_loss: shapes {tuple(rendered.shape)} vs {tuple(truth.shape)}")
    if rendered.shape[0] == 0:
        return rendered.sum() * 0.0, True
    return ((rendered - truth) ** 2).sum(dim=-1).mean(), False


def match_consistency_loss(x_r, x_i, x_j, w_r=None, w_i=None, w_j=None, min_weight: float = 0.5):
    """Mean over matches of the three pairwise squared distances between the
    expected 3D points of a matched feature in the three views.

    Matches where any ray's accumulated weight is below ``min_weight`` are
    dropped. Returns ``(loss, gated_fraction, empty)``.
    """
    n = x_r.shape[0]
    if not (x_i.shape == x_r.shape == x_j.shape):
        raise LossError("match_consistency_loss: point arrays differ in shape")
    if n == 0:
        return x_r.sum() * 0.0, 0.0, True
    keep = torch.ones(n, dtype=torch.bool)
    if w_r is not None:
        for w in (w_r, w_i, w_j):
            keep &= w.detach() >= min_weight
    gated = 1.0 - float(keep.float().mean())
    if not bool(keep.any()):
        return x_r.sum() * 0.0, gated, True
    a, b, c = x_r[keep], x_i[keep], x_j[keep]
    per = ((a - b) ** 2).sum(-1) + ((a - c) ** 2).sum(-1) + ((b - c) ** 2).sum(-1)
    return per.mean(), gated, False


def total_loss(l_pr: torch.Tensor, l_3d: torch.Tensor, weights: LossWeights):
    return weights.alpha * l_pr + weights.beta * l_3d
