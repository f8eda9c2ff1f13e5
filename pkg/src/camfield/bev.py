"""Geometry BEV volume: per-timestamp conditioning for both fields.

A stand-in encoder pools oracle occupancy/albedo statistics over height into
plan-view channels plus per-height occupancy logits; ``lift`` gates the
channels by sigmoid height probability to produce the 3D conditioning volume
that field queries sample trilinearly.  The volume is fixed conditioning:
nothing backpropagates into it, but sampling exposes a spatial gradient so
flow-warped queries can differentiate through the sample position.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import project
from .scene import query_scene


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class BevFeature:
    """Plan-view channels plus height logits before lifting."""

    values: np.ndarray            # (C, X, Y)
    heights: np.ndarray           # (1, Z, X, Y) occupancy logits
    extent_min: np.ndarray        # (3,)
    extent_max: np.ndarray        # (3,)
    timestamp: int

    def __post_init__(self):
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.heights))):
            raise ValueError("BEV feature must be finite")


@dataclass
class BevVolume:
    """Lifted conditioning volume, (C, Z, X, Y) over a world-space extent."""

    values: np.ndarray
    extent_min: np.ndarray
    extent_max: np.ndarray
    timestamp: int

    @property
    def channels(self):
        return self.values.shape[0]

    def flat_view(self):
        """(X*Y*Z, C) gather table, cached until ``values`` is replaced."""
        cached = getattr(self, "_flat", None)
        if cached is None or cached[0] is not self.values:
            arr = np.ascontiguousarray(
                np.transpose(self.values, (2, 3, 1, 0)).reshape(-1, self.channels))
            self._flat = (self.values, arr)
        return self._flat[1]


def visible_mask(cameras, centers, margin=1.02):
    """Boolean frustum-union visibility of world points for a camera list.

    centers : (N, 3).  A point is visible if it projects inside some
    camera's image (slightly enlarged by ``margin``) with positive depth.
    """
    vis = np.zeros(len(centers), dtype=bool)
    for cam in cameras:
        p_cam = (centers - cam.position) @ cam.rotation
        z = p_cam[:, 2]
        front = z > 1e-6
        u = np.where(front, cam.fx * p_cam[:, 0] / np.where(front, z, 1.0) + cam.cx, -1.0)
        v = np.where(front, cam.fy * p_cam[:, 1] / np.where(front, z, 1.0) + cam.cy, -1.0)
        pad_u = cam.width * (margin - 1.0)
        pad_v = cam.height * (margin - 1.0)
        vis |= front & (u >= -pad_u) & (u <= cam.width + pad_u) \
                     & (v >= -pad_v) & (v <= cam.height + pad_v)
    return vis


def _grid_centers(extent_min, extent_max, dims):
    """Voxel-center coordinates; dims = (X, Y, Z)."""
    axes = [extent_min[i] + (np.arange(dims[i]) + 0.5)
            * (extent_max[i] - extent_min[i]) / dims[i] for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)      # (X, Y, Z, 3)


def toy_encode(scene, cameras, t, channels=16, dims=(32, 32, 32), logit_scale=8.0):
    """Deterministic plan-view features from oracle occupancy and albedo.

    Pools the occupied-and-visible voxels of each (x, y) column over height:
    channels 0..7 are full-column statistics (occupancy fraction, mean RGB
    albedo, dynamic fraction, lowest/highest occupied height, any-coverage),
    channels 8..15 repeat them for the upper half of the height range.
    Height logits are +logit_scale at occupied visible voxels, else negative.
    """
    X, Y, Z = dims
    centers = _grid_centers(scene.bounds_min, scene.bounds_max, (X, Y, Z))
    flat = centers.reshape(-1, 3)
    density, color, is_dyn, _, _ = query_scene(scene, flat, t)
    occupied = (density > 0).reshape(X, Y, Z)
    vis = visible_mask(cameras, flat).reshape(X, Y, Z)
    color = color.reshape(X, Y, Z, 3)
    is_dyn = is_dyn.reshape(X, Y, Z)

    seen = occupied & vis
    heights = np.where(seen, logit_scale, -logit_scale)
    heights = np.transpose(heights, (2, 0, 1))[None]            # (1, Z, X, Y)

    z_norm = (np.arange(Z) + 0.5) / Z

    def column_stats(sel):
        cnt = sel.sum(axis=2)
        any_ = (cnt > 0).astype(np.float64)
        frac = cnt / Z
        safe = np.maximum(cnt, 1)
        rgb = np.where(sel[..., None], color, 0.0).sum(axis=2) / safe[..., None]
        dyn = np.where(sel, is_dyn, False).sum(axis=2) / safe
        lo = np.where(any_ > 0, np.where(sel, z_norm, np.inf).min(axis=2), 0.0)
        hi = np.where(any_ > 0, np.where(sel, z_norm, -np.inf).max(axis=2), 0.0)
        return np.stack([frac, rgb[..., 0], rgb[..., 1], rgb[..., 2],
                         dyn, lo, hi, any_], axis=0)            # (8, X, Y)

    upper = np.zeros_like(seen)
    upper[:, :, Z // 2:] = seen[:, :, Z // 2:]
    stats = np.concatenate([column_stats(seen), column_stats(upper)], axis=0)
    if channels <= stats.shape[0]:
        values = stats[:channels]
    else:
        reps = int(np.ceil(channels / stats.shape[0]))
        values = np.tile(stats, (reps, 1, 1))[:channels]
    return BevFeature(values=values.copy(), heights=heights,
                      extent_min=scene.bounds_min.copy(),
                      extent_max=scene.bounds_max.copy(), timestamp=int(t))


def lift(feature):
    """Gate plan-view channels by height probability: V[c,z,x,y] =
    sigmoid(height_logit[z,x,y]) * values[c,x,y]."""
    if feature.heights.shape[2:] != feature.values.shape[1:]:
        raise ValueError("height grid does not match plan-view grid")
    gate = _sigmoid(feature.heights.astype(np.float64))          # (1, Z, X, Y)
    vol = gate * feature.values[:, None, :, :]
    return BevVolume(values=vol, extent_min=feature.extent_min,
                     extent_max=feature.extent_max, timestamp=feature.timestamp)


def _sample_setup(volume, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    C, Z, X, Y = volume.values.shape
    dims = np.array([X, Y, Z], dtype=np.float64)
    span = volume.extent_max - volume.extent_min
    # continuous voxel coordinates with centers at integer + 0.5
    s = (x - volume.extent_min) / span * dims - 0.5
    inside = np.all((x >= volume.extent_min) & (x <= volume.extent_max), axis=1)
    c0 = np.floor(s).astype(np.int64)
    frac = s - c0
    return x, s, c0, frac, inside, dims, span


def sample(volume, x):
    """Trilinear world-space sampling; zero outside the extent.

    x : (B, 3).  Returns (B, C).
    """
    out, _ = sample_with_cache(volume, x)
    return out


def sample_with_cache(volume, x):
    from .encoding import _CORNERS, _corner_weights
    x, s, c0, frac, inside, dims, span = _sample_setup(volume, x)
    # gather the 8 surrounding voxel centers, clamping at the border
    flat = volume.flat_view()
    shape = np.array([volume.values.shape[2], volume.values.shape[3],
                      volume.values.shape[1]], dtype=np.int64)
    cc = np.clip(c0[:, None, :] + _CORNERS[None, :, :], 0, (shape - 1)[None, None, :])
    idx = (cc[..., 0] * shape[1] + cc[..., 1]) * shape[2] + cc[..., 2]
    corners = flat[idx]                                          # (B, 8, C)
    weights = _corner_weights(frac)                              # (B, 8)
    out = np.einsum("bc,bcf->bf", weights, corners)
    out[~inside] = 0.0
    return out, (inside, frac, corners, dims, span)


def sample_vjp(volume, x, upstream, cache=None):
    """Spatial gradient of the sampled feature: pulls a (B, C) cotangent
    back to a (B, 3) gradient w.r.t. the query position."""
    from .encoding import _weight_gradient
    if cache is None:
        _, cache = sample_with_cache(volume, x)
    inside, frac, corners, dims, span = cache
    upstream = np.atleast_2d(upstream)
    g = np.einsum("bcf,bf->bc", corners, upstream)               # (B, 8)
    dx = _weight_gradient(frac, g) * (dims / span)[None, :]
    dx[~inside] = 0.0
    return dx
