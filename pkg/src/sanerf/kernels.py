"""Backend selection for the renderer's per-ray kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback. Set ``SANERF_KERNELS=python`` to force the fallback.
"""

from __future__ import annotations

import importlib
import os

import numpy as np
import torch

from . import _pykernels


def _load():
    if os.environ.get("SANERF_KERNELS", "").lower() == "python":
        return _pykernels, "python"
    try:
        return importlib.import_module("sanerf._ckernels"), "cython"
    except ImportError:
        return _pykernels, "python"


_impl, BACKEND = _load()


def get_backend(name: str | None = None):
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        return importlib.import_module("sanerf._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def _np(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy())


class _CompositeWeights(torch.autograd.Function):
    @staticmethod
    def forward(ctx, sigma, delta, backend):
        impl = get_backend(backend)
        s, d = _np(sigma), _np(delta).astype(_np(sigma).dtype, copy=False)
        w, tf = impl.composite_forward(s, d)
        w_t, tf_t = torch.from_numpy(w), torch.from_numpy(tf)
        ctx.save_for_backward(sigma, delta, w_t, tf_t)
        ctx.impl = impl
        return w_t, tf_t

    @staticmethod
    def backward(ctx, grad_w, grad_tf):
        sigma, delta, w, tf = ctx.saved_tensors
        dtype = _np(sigma).dtype
        gw = _np(grad_w).astype(dtype, copy=False) if grad_w is not None else np.zeros(tuple(w.shape), dtype)
        gt = _np(grad_tf).astype(dtype, copy=False) if grad_tf is not None else np.zeros(tuple(tf.shape), dtype)
        gs, gd = ctx.impl.composite_backward(
            _np(sigma), _np(delta).astype(dtype, copy=False), _np(w), _np(tf), gw, gt
        )
        return torch.from_numpy(gs), torch.from_numpy(gd).to(delta.dtype), None


def composite_weights(sigma: torch.Tensor, delta: torch.Tensor, backend: str | None = None):
    """Per-sample weights (R, S) and final transmittance (R,), differentiable
    in both ``sigma`` and ``delta``."""
    if sigma.shape != delta.shape or sigma.ndim != 2:
        raise ValueError(f"composite_weights: shapes {tuple(sigma.shape)} and {tuple(delta.shape)}")
    return _CompositeWeights.apply(sigma, delta.to(sigma.dtype), backend)


def sample_pdf(edges, weights, u, backend: str | None = None):
    impl = get_backend(backend)
    e = np.ascontiguousarray(edges, dtype=np.float64)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    uu = np.ascontiguousarray(u, dtype=np.float64)
    return impl.sample_pdf(e, w, uu)
