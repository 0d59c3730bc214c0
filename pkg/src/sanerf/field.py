"""Positional-encoded MLP radiance field."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .gradflow import ParamStore


@dataclass
class EncodingConfig:
    n_freqs: int = 10
    include_input: bool = True

    def out_dim(self, in_dim: int = 3) -> int:
        return in_dim * (int(self.include_input) + 2 * self.n_freqs)


@dataclass
class FieldConfig:
    depth: int = 4
    width: int = 64
    skips: tuple[int, ...] = (2,)
    pos_encoding: EncodingConfig = field(default_factory=lambda: EncodingConfig(10))
    dir_encoding: EncodingConfig = field(default_factory=lambda: EncodingConfig(4))
    # positions are multiplied by this before encoding
    pos_scale: float = 1.0
    # "shared": one trunk feeds density and colour heads
    # "separate": independent density and colour MLPs
    architecture: str = "shared"
    sigma_shift: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skips"] = list(self.skips)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["pos_encoding"] = EncodingConfig(**d.get("pos_encoding", {}))
        d["dir_encoding"] = EncodingConfig(**d.get("dir_encoding", {"n_freqs": 4}))
        d["skips"] = tuple(d.get("skips", (2,)))
        return cls(**d)


def encode(x, config: EncodingConfig):
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)]``.

    Works on torch tensors or numpy arrays of shape (..., C).
    """
    is_torch = isinstance(x, torch.Tensor)
    xp = torch if is_torch else np
    if not is_torch:
        x = np.asarray(x, dtype=np.float64)
    parts = [x] if config.include_input else []
    for k in range(config.n_freqs):
        f = (2.0**k) * math.pi
        parts.append(xp.sin(f * x))
        parts.append(xp.cos(f * x))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1) if is_torch else np.concatenate(parts, axis=-1)


def _init_linear(params: ParamStore, name: str, n_in: int, n_out: int, rng, gain: float = 1.0):
    bound = gain * math.sqrt(6.0 / (n_in + n_out))
    params.add(f"{name}.w", rng.uniform(-bound, bound, size=(n_in, n_out)))
    params.add(f"{name}.b", np.zeros(n_out))


class RadianceField:
    """Maps world positions and unit view directions to (density, rgb).

    Weights live in the shared :class:`ParamStore` under ``prefix``. Density
    is computed before the view direction enters the network, so it cannot
    depend on it.
    """

    def __init__(self, params: ParamStore, prefix: str, config: FieldConfig, rng: np.random.Generator):
        self.params = params
        self.prefix = prefix
        self.config = config
        c = config
        in_x = c.pos_encoding.out_dim()
        in_d = c.dir_encoding.out_dim()
        if c.architecture not in ("shared", "separate"):
            raise ValueError(f"unknown field architecture {c.architecture!r}")

        def trunk(tag):
            n_in = in_x
            for i in range(c.depth):
                if i in c.skips and i > 0:
                    n_in += in_x
                _init_linear(params, f"{prefix}.{tag}{i}", n_in, c.width, rng)
                n_in = c.width

        trunk("l")
        _init_linear(params, f"{prefix}.sigma", c.width, 1, rng)
        if c.architecture == "separate":
            trunk("cl")
        _init_linear(params, f"{prefix}.feat", c.width, c.width, rng)
        _init_linear(params, f"{prefix}.dir", c.width + in_d, c.width // 2, rng)
        _init_linear(params, f"{prefix}.rgb", c.width // 2, 3, rng)

    def _p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def _trunk(self, ex, tag):
        h = ex
        for i in range(self.config.depth):
            if i in self.config.skips and i > 0:
                h = torch.cat([h, ex], dim=-1)
            h = torch.relu(h @ self._p(f"{tag}{i}.w") + self._p(f"{tag}{i}.b"))
        return h

    def query(self, x: torch.Tensor, d: torch.Tensor):
        """Density (N,) >= 0 and colour (N, 3) in [0, 1] for points ``x``
        viewed along unit directions ``d``."""
        c = self.config
        dtype = self.params.dtype
        x = torch.as_tensor(x, dtype=dtype)
        d = torch.as_tensor(d, dtype=dtype)
        ex = encode(x * c.pos_scale, c.pos_encoding)
        ed = encode(d, c.dir_encoding)
        h = self._trunk(ex, "l")
        raw_sigma = (h @ self._p("sigma.w") + self._p("sigma.b"))[..., 0]
        sigma = F.softplus(raw_sigma - c.sigma_shift)
        if c.architecture == "separate":
            h = self._trunk(ex, "cl")
        feat = h @ self._p("feat.w") + self._p("feat.b")
        hd = torch.relu(torch.cat([feat, ed], dim=-1) @ self._p("dir.w") + self._p("dir.b"))
        rgb = torch.sigmoid(hd @ self._p("rgb.w") + self._p("rgb.b"))
        return sigma, rgb

    __call__ = query
