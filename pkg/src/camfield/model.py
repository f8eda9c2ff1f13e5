"""Field model: grids, nets, temporal codes and BEV volumes behind one API.

World positions (meters) are normalized into the unit ball around the scene
center before contraction/encoding; flow-head outputs are interpreted in
world meters per frame.  The per-timestamp BEV volumes are fixed
conditioning computed once from the scene; gradients never flow into them,
but warped queries differentiate through the sample *position*.
"""

import numpy as np

from . import bev
from .encoding import HashGrid
from .fields import DynamicField, KeyframeCodes, StaticField, embed_direction
from .geometry import all_pixel_rays
from .render import (composite_full_fwd, composite_static_fwd, ray_near_far,
                     sample_quadrature)

STATIC_PREFIX = "static."
DYNAMIC_PREFIX = "dynamic."


class FieldModel:
    """Trainable collaborative field for one scene."""

    def __init__(self, scene, rng, levels=8, base_resolution=16,
                 finest_resolution=256, table_size=2**16, feature_dim=2,
                 hidden=64, code_dim=16, bev_channels=16, bev_dims=(32, 32, 32)):
        self.hparams = {
            "levels": levels, "base_resolution": base_resolution,
            "finest_resolution": finest_resolution, "table_size": table_size,
            "feature_dim": feature_dim, "hidden": hidden, "code_dim": code_dim,
            "bev_channels": bev_channels, "bev_dims": list(bev_dims),
        }
        self.scene = scene
        self.center = scene.center
        self.radius = max(scene.radius, 1e-6)
        self.background = scene.background.copy()
        self.grid_s = HashGrid(levels, base_resolution, finest_resolution,
                               table_size, feature_dim, rng=rng)
        self.grid_d = HashGrid(levels, base_resolution, finest_resolution,
                               table_size, feature_dim, rng=rng)
        self.codes = KeyframeCodes(scene.timestamps, dim=code_dim)
        self.static = StaticField(self.grid_s, bev_channels, hidden=hidden, rng=rng)
        self.dynamic = DynamicField(self.grid_d, self.codes, bev_channels,
                                    hidden=hidden, rng=rng)
        self.bev_channels = bev_channels
        self.bev_dims = tuple(bev_dims)
        self.volumes = {}
        for t in scene.timestamps:
            feat = bev.toy_encode(scene, scene.cameras(), t,
                                  channels=bev_channels, dims=self.bev_dims)
            self.volumes[t] = bev.lift(feat)

    # ---------------------------------------------------------------- params

    def params(self):
        """Live name -> array view of every trainable parameter."""
        out = {STATIC_PREFIX + "tables": self.grid_s.tables}
        for k, v in self.static.net.params.items():
            out[STATIC_PREFIX + k] = v
        out[DYNAMIC_PREFIX + "tables"] = self.grid_d.tables
        out[DYNAMIC_PREFIX + "codes"] = self.codes.values
        for k, v in self.dynamic.net.params.items():
            out[DYNAMIC_PREFIX + k] = v
        return out

    def param_groups(self):
        names = list(self.params())
        return {
            "static": [n for n in names if n.startswith(STATIC_PREFIX)],
            "dynamic": [n for n in names if n.startswith(DYNAMIC_PREFIX)],
        }

    def set_param(self, name, value):
        target = self.params()[name]
        target[...] = value

    # ---------------------------------------------------------------- helpers

    def normalize(self, x):
        return (x - self.center) / self.radius

    def volume_at(self, t):
        key = int(round(float(t)))
        if key not in self.volumes:
            raise KeyError(f"no BEV volume for timestamp {t}")
        return self.volumes[key]

    # ---------------------------------------------------------------- queries

    def query_static(self, x, d, t, d_embed=None):
        """sigma/color of the background field at world points.

        x, d : (N, 3).  Returns (sigma (N,), rgb (N, 3), cache).
        """
        vol = self.volume_at(t)
        f = bev.sample(vol, x)
        sigma, rgb, cache = self.static.query(self.normalize(x), d, f,
                                              d_embed=d_embed)
        return sigma, rgb, cache

    def static_backward(self, cache, dsigma, drgb):
        grads = self.static.backward(cache, dsigma, drgb)
        return {STATIC_PREFIX + k: v for k, v in grads.items()}

    def query_dynamic(self, x, d, t, t_code=None, d_embed=None):
        """Full dynamic head at world points x for timestamp ``t``.

        ``t_code`` overrides the temporal-code time (defaults to t).  flows
        come back in world meters/frame.  Returns (flow_fw, flow_bw, sigma,
        rgb, blend, cache).
        """
        vol = self.volume_at(t)
        f, f_cache = bev.sample_with_cache(vol, x)
        tc = t if t_code is None else t_code
        fw, bw, sigma, rgb, blend, cache = self.dynamic.query(
            self.normalize(x), d, tc, f, d_embed=d_embed)
        return fw, bw, sigma, rgb, blend, (cache, vol, x, f_cache)

    def query_warped(self, x, d, t, s_fw, s_bw):
        """Neighbor-time color/density at flow-displaced world points:
        (x + s_fw) at t+1 and (x - s_bw) at t-1, conditioning features
        sampled from the neighbor times' volumes at the displaced points."""
        fw, bw = int(t) + 1, int(t) - 1
        self.volume_at(fw)
        self.volume_at(bw)
        _, _, sig_n, rgb_n, _, _ = self.query_dynamic(x + s_fw, d, fw)
        _, _, sig_p, rgb_p, _, _ = self.query_dynamic(x - s_bw, d, bw)
        return (rgb_n, sig_n), (rgb_p, sig_p)

    def dynamic_backward(self, full_cache, dfw=None, dbw=None, dsigma=None,
                         drgb=None, dblend=None, want_dx=False):
        """Adjoint of query_dynamic; dx comes back in world units."""
        cache, vol, x, f_cache = full_cache
        grads, dxn, df = self.dynamic.backward(
            cache, dfw=dfw, dbw=dbw, dsigma=dsigma, drgb=drgb,
            dblend=dblend, want_dx=want_dx)
        dx = None
        if want_dx:
            dx = dxn / self.radius + bev.sample_vjp(vol, x, df, cache=f_cache)
        return {DYNAMIC_PREFIX + k: v for k, v in grads.items()}, dx

    # ---------------------------------------------------------------- rendering

    def ray_points(self, origins, dirs, u):
        """Quadrature world points, (B, K, 3)."""
        return origins[:, None, :] + u[:, :, None] * dirs[:, None, :]

    def render_static_rays(self, origins, dirs, t, K=96, stratified=False,
                           rng=None, with_cache=False):
        """Background-only rendering of a ray batch, (B, 3)."""
        near, far = ray_near_far(origins, dirs, self.scene.bounds_min,
                                 self.scene.bounds_max)
        u, delta = sample_quadrature(near, far, K, stratified=stratified, rng=rng)
        B = len(origins)
        pts = self.ray_points(origins, dirs, u).reshape(-1, 3)
        de = np.repeat(embed_direction(dirs), K, axis=0)
        sigma, rgb, q_cache = self.query_static(pts, None, t, d_embed=de)
        C, c_cache = composite_static_fwd(sigma.reshape(B, K),
                                          rgb.reshape(B, K, 3), delta,
                                          self.background)
        if with_cache:
            return C, (q_cache, c_cache, B, K)
        return C

    def render_full_rays(self, origins, dirs, t, K=96, stratified=False, rng=None):
        """Blended static+dynamic rendering at timestamp t (direct queries)."""
        near, far = ray_near_far(origins, dirs, self.scene.bounds_min,
                                 self.scene.bounds_max)
        u, delta = sample_quadrature(near, far, K, stratified=stratified, rng=rng)
        B = len(origins)
        pts = self.ray_points(origins, dirs, u).reshape(-1, 3)
        de = np.repeat(embed_direction(dirs), K, axis=0)
        sig_s, rgb_s, _ = self.query_static(pts, None, t, d_embed=de)
        _, _, sig_d, rgb_d, blend, _ = self.query_dynamic(pts, None, t, d_embed=de)
        C, _ = composite_full_fwd(sig_s.reshape(B, K), rgb_s.reshape(B, K, 3),
                                  sig_d.reshape(B, K), rgb_d.reshape(B, K, 3),
                                  blend.reshape(B, K), delta, self.background)
        return C

    def render_image(self, camera, t, mode="full", K=160, chunk=4096):
        """Render a full camera image deterministically, (H, W, 3).

        ``chunk`` is the pixel-parallel unit; internally it is clipped so a
        chunk never exceeds ~150k quadrature points at once.
        """
        if mode not in ("full", "static"):
            raise ValueError("mode must be 'full' or 'static'")
        origins, dirs = all_pixel_rays(camera)
        n = len(origins)
        step = max(1, min(chunk, 150_000 // max(K, 1)))
        out = np.empty((n, 3))
        for lo in range(0, n, step):
            hi = min(lo + step, n)
            if mode == "static":
                out[lo:hi] = self.render_static_rays(origins[lo:hi], dirs[lo:hi], t, K=K)
            else:
                out[lo:hi] = self.render_full_rays(origins[lo:hi], dirs[lo:hi], t, K=K)
        return np.clip(out, 0.0, 1.0).reshape(camera.height, camera.width, 3)
