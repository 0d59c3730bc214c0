"""Pure numpy implementation of the renderer kernels (fallback backend)."""

import numpy as np


def composite_forward(sigma, delta):
    a = sigma.astype(np.float64) * delta
    att = np.exp(-a)
    trans_after = np.cumprod(att, axis=1)
    trans_before = np.concatenate([np.ones_like(a[:, :1]), trans_after[:, :-1]], axis=1)
    w = trans_before * (1.0 - att)
    return w.astype(sigma.dtype), trans_after[:, -1].astype(sigma.dtype)


def composite_backward(sigma, delta, weights, trans_final, grad_w, grad_tf):
    a = sigma.astype(np.float64) * delta
    trans_after = np.cumprod(np.exp(-a), axis=1)
    gw = grad_w.astype(np.float64)
    contrib = gw * weights
    # sum over i > k of g_i w_i
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    ga = gw * trans_after - suffix - (grad_tf * trans_final)[:, None]
    return (ga * delta).astype(sigma.dtype), (ga * sigma).astype(sigma.dtype)


def sample_pdf(edges, weights, u):
    n_rays, n_b = weights.shape
    total = weights.sum(axis=1, keepdims=True)
    flag = ~(total[:, 0] > 1e-12)
    pdf = np.where(flag[:, None], 1.0 / n_b, weights / np.where(flag[:, None], 1.0, total))
    cdf = np.cumsum(pdf, axis=1)
    # bin k is the first with cdf > u; row offsets make one flat searchsorted
    offs = np.arange(n_rays)[:, None] * 2.0
    k = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right").reshape(u.shape)
    k = k - np.arange(n_rays)[:, None] * n_b
    k = np.clip(k, 0, n_b - 1)
    rows = np.arange(n_rays)[:, None]
    c_hi = cdf[rows, k]
    p = pdf[rows, k]
    c_lo = c_hi - p
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(p > 0, (u - c_lo) / p, 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    lo = edges[rows, k]
    hi = edges[rows, k + 1]
    return lo + frac * (hi - lo), flag
