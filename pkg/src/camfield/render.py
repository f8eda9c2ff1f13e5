"""Quadrature sampling and emission-absorption compositing.

The static compositor accumulates T_k * (1 - exp(-sigma_k delta_k)) * c_k
plus a background emitter weighted by the residual transmittance.  The full
compositor blends static and dynamic contributions with a per-sample weight
b: transmittance runs on the blended density b*sigma_s + (1-b)*sigma_d, and
each sample emits alpha_d*(1-b)*c_d + alpha_s*b*c_s.  With b identically 1
(or 0) the full compositor reduces exactly to the single-field one.

All compositors have hand-written adjoints used by training.
"""

import numpy as np


def sample_quadrature(near, far, K, stratified=False, rng=None):
    """Quadrature depths and segment lengths between near and far.

    near, far : scalars or (B,) per-ray bounds.
    Uniform mode places bin midpoints; stratified mode jitters one sample
    per bin using ``rng``.  Returns (u (B, K), delta (B, K)); the last
    segment length is capped at the mean bin width.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    B = len(near)
    width = (far - near)[:, None] / K
    edges = near[:, None] + np.arange(K)[None, :] * width
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = edges + rng.random((B, K)) * width
    else:
        u = edges + 0.5 * width
    delta = np.diff(u, axis=1)
    delta = np.concatenate([delta, width], axis=1)[:, :K] if K > 1 else width
    return u, delta


def transmittance(sigma, delta):
    """Accumulated transparency up to each sample: T_k = exp(-sum_{j<k}
    sigma_j delta_j).  sigma, delta: (B, K) with sigma >= 0, delta > 0."""
    sigma = np.atleast_2d(sigma)
    delta = np.atleast_2d(delta)
    if np.any(sigma < 0):
        raise ValueError("densities must be non-negative")
    if np.any(delta <= 0):
        raise ValueError("segment lengths must be positive")
    tau = sigma * delta
    prefix = np.concatenate([np.zeros((tau.shape[0], 1)),
                             np.cumsum(tau, axis=1)[:, :-1]], axis=1)
    return np.exp(-prefix)


def _weights(sigma, delta):
    tau = sigma * delta
    T = transmittance(sigma, delta)
    alpha = 1.0 - np.exp(-tau)
    T_end = np.exp(-np.sum(tau, axis=1))
    return T, alpha, T_end


def composite_static(sigma, rgb, delta, background):
    """Single-field compositing with background emitter.

    sigma (B, K), rgb (B, K, 3), delta (B, K), background (3,).
    Returns (B, 3) colors.
    """
    out, _ = composite_static_fwd(sigma, rgb, delta, background)
    return out


def composite_static_fwd(sigma, rgb, delta, background):
    sigma = np.atleast_2d(sigma)
    delta = np.atleast_2d(delta)
    T, alpha, T_end = _weights(sigma, delta)
    w = T * alpha
    C = np.einsum("bk,bkc->bc", w, rgb) + T_end[:, None] * background
    return C, (sigma, rgb, delta, background, T, alpha, T_end, w)


def composite_static_bwd(cache, dC):
    """Adjoint of the static compositor: returns (dsigma, drgb)."""
    sigma, rgb, delta, background, T, alpha, T_end, w = cache
    dC = np.atleast_2d(dC)
    drgb = w[:, :, None] * dC[:, None, :]
    dw = np.einsum("bkc,bc->bk", rgb, dC)
    dT_end = dC @ background
    # d tau_k: direct through alpha_k, plus every later weight and the
    # background term see -tau_k through their transmittance
    tau = sigma * delta
    direct = dw * T * np.exp(-tau)
    later = dw * w
    suffix = np.cumsum(later[:, ::-1], axis=1)[:, ::-1] - later
    dtau = direct - suffix - (dT_end * T_end)[:, None]
    return dtau * delta, drgb


def composite_full(sigma_s, rgb_s, sigma_d, rgb_d, blend, delta, background):
    """Blended static+dynamic compositing (see module docstring)."""
    out, _ = composite_full_fwd(sigma_s, rgb_s, sigma_d, rgb_d, blend, delta, background)
    return out


def composite_full_fwd(sigma_s, rgb_s, sigma_d, rgb_d, blend, delta, background):
    sigma_s = np.atleast_2d(sigma_s)
    sigma_d = np.atleast_2d(sigma_d)
    blend = np.atleast_2d(blend)
    delta = np.atleast_2d(delta)
    if np.any(blend < 0) or np.any(blend > 1):
        raise ValueError("blend weights must lie in [0, 1]")
    sigma_bl = blend * sigma_s + (1.0 - blend) * sigma_d
    tau_bl = sigma_bl * delta
    T = transmittance(sigma_bl, delta)
    T_end = np.exp(-np.sum(tau_bl, axis=1))
    alpha_s = 1.0 - np.exp(-sigma_s * delta)
    alpha_d = 1.0 - np.exp(-sigma_d * delta)
    emit = (alpha_d * (1.0 - blend))[:, :, None] * rgb_d \
         + (alpha_s * blend)[:, :, None] * rgb_s                  # (B, K, 3)
    C = np.einsum("bk,bkc->bc", T, emit) + T_end[:, None] * background
    cache = (sigma_s, rgb_s, sigma_d, rgb_d, blend, delta, background,
             T, T_end, alpha_s, alpha_d, emit)
    return C, cache


def composite_full_bwd(cache, dC):
    """Adjoint of the blended compositor.

    Returns (dsigma_s, drgb_s, dsigma_d, drgb_d, dblend).
    """
    (sigma_s, rgb_s, sigma_d, rgb_d, blend, delta, background,
     T, T_end, alpha_s, alpha_d, emit) = cache
    dC = np.atleast_2d(dC)

    demit = T[:, :, None] * dC[:, None, :]
    dT = np.einsum("bkc,bc->bk", emit, dC)
    dT_end = dC @ background

    # transmittance path: T_j = exp(-prefix_j) -> d tau_bl_k collects every
    # later sample plus the background term
    later = dT * T
    suffix = np.cumsum(later[:, ::-1], axis=1)[:, ::-1] - later
    dtau_bl = -suffix - (dT_end * T_end)[:, None]
    dsigma_s = dtau_bl * delta * blend
    dsigma_d = dtau_bl * delta * (1.0 - blend)
    dblend = dtau_bl * delta * (sigma_s - sigma_d)

    # emission path
    drgb_d = (alpha_d * (1.0 - blend))[:, :, None] * demit
    drgb_s = (alpha_s * blend)[:, :, None] * demit
    dalpha_d = (1.0 - blend) * np.einsum("bkc,bkc->bk", rgb_d, demit)
    dalpha_s = blend * np.einsum("bkc,bkc->bk", rgb_s, demit)
    dblend += np.einsum("bkc,bkc->bk", alpha_s[:, :, None] * rgb_s
                        - alpha_d[:, :, None] * rgb_d, demit)
    dsigma_s += dalpha_s * np.exp(-sigma_s * delta) * delta
    dsigma_d += dalpha_d * np.exp(-sigma_d * delta) * delta
    return dsigma_s, drgb_s, dsigma_d, drgb_d, dblend


def expected_depth_fwd(sigma, delta, u, far):
    """Absorption-weighted expected depth along rays.

    sigma, delta, u : (B, K); far : (B,).  Residual probability mass sits at
    ``far`` so empty rays get a finite answer.  Returns (depth (B,), cache).
    """
    sigma = np.atleast_2d(sigma)
    tau = sigma * delta
    T = transmittance(sigma, delta)
    alpha = 1.0 - np.exp(-tau)
    w = T * alpha
    T_end = np.exp(-np.sum(tau, axis=1))
    depth = np.sum(w * u, axis=1) + T_end * far
    return depth, (tau, T, w, u, far, T_end, delta)


def expected_depth_bwd(cache, ddepth):
    """Adjoint of expected_depth_fwd w.r.t. sigma; returns (B, K)."""
    tau, T, w, u, far, T_end, delta = cache
    dw = ddepth[:, None] * u
    direct = dw * T * np.exp(-tau)
    later = dw * w
    suffix = np.cumsum(later[:, ::-1], axis=1)[:, ::-1] - later
    dtau = direct - suffix - (ddepth * far * T_end)[:, None]
    return dtau * delta


def ray_near_far(origins, directions, bounds_min, bounds_max, pad=0.05, t_min=1e-3):
    """Per-ray [near, far] from the scene bounds, padded by ``pad`` of the
    interval on each side."""
    from .geometry import ray_box_interval
    t0, t1 = ray_box_interval(origins, directions, bounds_min, bounds_max)
    t0 = np.maximum(t0, t_min)
    t1 = np.maximum(t1, t0 + 1e-3)
    span = t1 - t0
    near = np.maximum(t0 - pad * span, t_min)
    far = t1 + pad * span
    return near, far
