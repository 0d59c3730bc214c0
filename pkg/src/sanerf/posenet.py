"""Convolutional regressor for the relative poses within an image triple.

The reference image and the two other images are stacked along the colour
axis (9 channels), passed through seven stride-2 convolutions (kernels 7, 5,
then 3), a 1x1 convolution to ``6 * (n_views - 1)`` channels and global
average pooling. Each non-reference view gets three Euler angles and a
translation; the reference view is fixed to the identity pose.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import gradflow as gf
from .geometry import euler_to_rotation
from .gradflow import ParamStore

KERNELS = (7, 5, 3, 3, 3, 3, 3)


@dataclass
class PoseNetConfig:
    channels: tuple = (16, 32, 64, 128, 256, 256, 256)
    image_size: tuple = (96, 128)  # (H, W) network input
    n_views: int = 3
    translation_scale: float = 0.1
    final_init_scale: float = 0.01
    # "cnn": pose network; "direct": free per-image pose variables
    mode: str = "cnn"

    @property
    def out_channels(self) -> int:
        return 6 * (self.n_views - 1)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


class PoseNet:
    def __init__(self, params: ParamStore, config: PoseNetConfig, rng: np.random.Generator,
                 image_ids=(), prefix: str = "pose"):
        if len(config.channels) != len(KERNELS):
            raise ValueError(f"pose network needs {len(KERNELS)} conv widths")
        self.params = params
        self.config = config
        self.prefix = prefix
        if config.mode == "cnn":
            c_in = 3 * config.n_views
            for i, (c_out, k) in enumerate(zip(config.channels, KERNELS)):
                std = math.sqrt(2.0 / (c_in * k * k))
                params.add(f"{prefix}.conv{i}.w", rng.normal(0.0, std, size=(c_out, c_in, k, k)))
                params.add(f"{prefix}.conv{i}.b", np.zeros(c_out))
                c_in = c_out
            std = config.final_init_scale * math.sqrt(1.0 / c_in)
            params.add(f"{prefix}.out.w", rng.normal(0.0, std, size=(config.out_channels, c_in, 1, 1)))
            params.add(f"{prefix}.out.b", np.zeros(config.out_channels))
        elif config.mode == "direct":
            for i in image_ids:
                params.add(f"{prefix}.direct.{i}", rng.normal(0.0, config.final_init_scale, size=6))
        else:
            raise ValueError(f"unknown pose mode {config.mode!r}")
        self._inputs: dict = {}

    def _p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def prepare(self, image: np.ndarray) -> torch.Tensor:
        """Resize an (H, W, 3) image to the network resolution, centred at 0."""
        t = torch.as_tensor(np.asarray(image), dtype=self.params.dtype).permute(2, 0, 1)[None]
        h, w = self.config.image_size
        if t.shape[-2:] != (h, w):
            t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
        return t[0] - 0.5

    def forward(self, ref_img, img_i, img_j) -> torch.Tensor:
        """Raw (2, 6) output: per non-reference view, 3 angles and a scaled
        translation."""
        xs = [x if isinstance(x, torch.Tensor) and x.ndim == 3 and x.shape[0] == 3 else self.prepare(x)
              for x in (ref_img, img_i, img_j)]
        if any(x.shape != xs[0].shape for x in xs):
            raise gf.ShapeError("posenet_forward", *(x.shape for x in xs))
        x = torch.cat(xs, dim=0)
        if x.shape[0] != 3 * self.config.n_views:
            raise gf.ShapeError("posenet_forward", x.shape)
        for i in range(len(KERNELS)):
            x = torch.relu(gf.conv2d(x, self._p(f"conv{i}.w"), self._p(f"conv{i}.b"), stride=2))
        x = gf.conv2d(x, self._p("out.w"), self._p("out.b"), stride=1)
        out = gf.global_avg_pool(x).reshape(self.config.n_views - 1, 6)
        return self._scale(out)

    def _scale(self, out):
        s = self.config.translation_scale
        return torch.cat([out[:, :3], s * out[:, 3:]], dim=1)

    def cached_input(self, key, image):
        if key not in self._inputs:
            self._inputs[key] = self.prepare(image)
        return self._inputs[key]

    def poses_for_triple(self, ids, images) -> dict:
        """``{image_id: (R, t)}`` for a triple ``(ref, i, j)``; ``images`` maps
        ids to (H, W, 3) arrays. The reference gets the exact identity."""
        ref, i, j = ids
        dtype = self.params.dtype
        if self.config.mode == "direct":
            out = torch.stack([self._p(f"direct.{i}"), self._p(f"direct.{j}")])
            out = self._scale(out)
        else:
            out = self.forward(*(self.cached_input(k, images[k]) for k in ids))
        rots = euler_to_rotation(out[:, :3])
        return {
            ref: (torch.eye(3, dtype=dtype), torch.zeros(3, dtype=dtype)),
            i: (rots[0], out[0, 3:]),
            j: (rots[1], out[1, 3:]),
        }

    def euler_outputs(self, ids, images) -> torch.Tensor:
        if self.config.mode == "direct":
            _, i, j = ids
            return self._scale(torch.stack([self._p(f"direct.{i}"), self._p(f"direct.{j}")]))
        return self.forward(*(self.cached_input(k, images[k]) for k in ids))
