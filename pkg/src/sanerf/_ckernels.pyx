# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-ray scans for the volume renderer.

Mirrors ``sanerf._pykernels`` exactly; ``sanerf.kernels`` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ctypedef fused real:
    float
    double


def composite_forward(real[:, ::1] sigma, real[:, ::1] delta):
    """Weights ``T_i (1 - exp(-sigma_i delta_i))`` and final transmittance."""
    cdef Py_ssize_t n_rays = sigma.shape[0], n_s = sigma.shape[1], r, i
    dtype = np.float32 if real is float else np.float64
    w_arr = np.empty((n_rays, n_s), dtype=dtype)
    tf_arr = np.empty(n_rays, dtype=dtype)
    cdef real[:, ::1] w = w_arr
    cdef real[::1] tf = tf_arr
    cdef double trans, e
    with nogil:
        for r in range(n_rays):
            trans = 1.0
            for i in range(n_s):
                e = exp(-<double>sigma[r, i] * <double>delta[r, i])
                w[r, i] = <real>(trans * (1.0 - e))
                trans = trans * e
            tf[r] = <real>trans
    return w_arr, tf_arr


def composite_backward(real[:, ::1] sigma, real[:, ::1] delta, real[:, ::1] weights,
                       real[::1] trans_final, real[:, ::1] grad_w, real[::1] grad_tf):
    """Vector-Jacobian product of :func:`composite_forward` w.r.t. sigma and delta."""
    cdef Py_ssize_t n_rays = sigma.shape[0], n_s = sigma.shape[1], r, i
    dtype = np.float32 if real is float else np.float64
    gs_arr = np.empty((n_rays, n_s), dtype=dtype)
    gd_arr = np.empty((n_rays, n_s), dtype=dtype)
    cdef real[:, ::1] gs = gs_arr
    cdef real[:, ::1] gd = gd_arr
    cdef double suffix, trans_next, ga, tfterm
    with nogil:
        for r in range(n_rays):
            tfterm = <double>grad_tf[r] * <double>trans_final[r]
            # forward pass stores T_{i+1}; dividing transmittances back out
            # is unstable once exp(-a) underflows.
            trans_next = 1.0
            for i in range(n_s):
                trans_next = trans_next * exp(-<double>sigma[r, i] * <double>delta[r, i])
                gs[r, i] = <real>trans_next  # stash T_{i+1}
            suffix = 0.0
            for i in range(n_s - 1, -1, -1):
                ga = <double>grad_w[r, i] * <double>gs[r, i] - suffix - tfterm
                suffix = suffix + <double>grad_w[r, i] * <double>weights[r, i]
                gs[r, i] = <real>(ga * <double>delta[r, i])
                gd[r, i] = <real>(ga * <double>sigma[r, i])
    return gs_arr, gd_arr


def sample_pdf(double[:, ::1] edges, double[:, ::1] weights, double[:, ::1] u):
    """Inverse-CDF samples from piecewise-constant densities.

    ``edges`` (R, N+1), ``weights`` (R, N), ``u`` (R, M) sorted ascending in
    [0, 1). Rows whose weights sum to zero use a uniform density and are
    flagged.
    """
    cdef Py_ssize_t n_rays = weights.shape[0], n_b = weights.shape[1], m = u.shape[1]
    cdef Py_ssize_t r, k, j
    out_arr = np.empty((n_rays, m), dtype=np.float64)
    flag_arr = np.zeros(n_rays, dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef unsigned char[::1] flag = flag_arr
    cdef double total, c_lo, c_hi, p, uu, frac
    cdef bint uniform
    with nogil:
        for r in range(n_rays):
            total = 0.0
            for k in range(n_b):
                total = total + weights[r, k]
            uniform = not (total > 1e-12)
            if uniform:
                flag[r] = 1
            k = 0
            c_lo = 0.0
            p = (1.0 / n_b) if uniform else weights[r, 0] / total
            c_hi = p
            for j in range(m):
                uu = u[r, j]
                while k < n_b - 1 and c_hi <= uu:
                    k = k + 1
                    c_lo = c_hi
                    p = (1.0 / n_b) if uniform else weights[r, k] / total
                    c_hi = c_lo + p
                if p > 0:
                    frac = (uu - c_lo) / p
                else:
                    frac = 0.0
                if frac < 0.0:
                    frac = 0.0
                elif frac > 1.0:
                    frac = 1.0
                out[r, j] = edges[r, k] + frac * (edges[r, k + 1] - edges[r, k])
    return out_arr, flag_arr.astype(bool)
