"""Analytic multi-agent scene oracle.

Scenes are unions of constant-density solids (boxes, spheres, a ground slab).
Dynamic solids translate along piecewise-linear trajectories keyed by integer
timestamps.  Because densities are piecewise constant, attenuation integrals
along rays have closed forms, which makes this module an exact reference for
the trainable renderer.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, all_pixel_rays, project, ray_box_interval

_INF = np.inf


@dataclass
class Primitive:
    """Constant-density solid.  ``trajectory`` maps integer timestamps to the
    world position of the shape's reference point (center; for ground, any
    point is fine since only ``height`` matters).  Static solids have no
    trajectory and keep ``center`` for all times."""

    shape: str                    # "box" | "sphere" | "ground"
    density: float                # extinction, 1/m
    albedo: np.ndarray            # (3,) RGB in [0, 1]
    center: np.ndarray = None     # (3,), static position (box/sphere)
    size: np.ndarray = None       # (3,) full box edge lengths
    radius: float = 0.0           # sphere
    height: float = 0.0           # ground: slab top z
    trajectory: dict = None       # {int t: (3,) position} for dynamic solids

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.center is not None:
            self.center = np.asarray(self.center, dtype=np.float64)
        if self.size is not None:
            self.size = np.asarray(self.size, dtype=np.float64)
        if self.trajectory is not None:
            self.trajectory = {int(t): np.asarray(p, dtype=np.float64)
                               for t, p in self.trajectory.items()}
        if self.density < 0:
            raise ValueError("density must be >= 0")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")

    @property
    def is_dynamic(self):
        return self.trajectory is not None

    def position(self, t):
        """Reference-point position at real time t (piecewise linear)."""
        if self.trajectory is None:
            return self.center
        ts = sorted(self.trajectory)
        if t <= ts[0]:
            return self.trajectory[ts[0]]
        if t >= ts[-1]:
            return self.trajectory[ts[-1]]
        import bisect
        i = bisect.bisect_right(ts, t) - 1
        t0, t1 = ts[i], ts[i + 1]
        a = (t - t0) / (t1 - t0)
        return (1 - a) * self.trajectory[t0] + a * self.trajectory[t1]

    def displacement(self, t, t2):
        """Position change of the solid from time t to time t2."""
        if self.trajectory is None:
            return np.zeros(3)
        return self.position(t2) - self.position(t)

    def contains(self, x, t):
        """Boolean inside-test, x: (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        if self.shape == "ground":
            return x[..., 2] <= self.height
        c = self.position(t)
        if self.shape == "sphere":
            return np.linalg.norm(x - c, axis=-1) <= self.radius
        if self.shape == "box":
            return np.all(np.abs(x - c) <= self.size / 2.0, axis=-1)
        raise ValueError(f"unknown shape {self.shape!r}")

    def ray_interval(self, origins, directions, t, bounds_min, bounds_max):
        """Entry/exit distances (t0, t1) of rays; misses get t0 > t1."""
        if self.shape == "ground":
            bmin = np.array([bounds_min[0], bounds_min[1], bounds_min[2] - 1.0])
            bmax = np.array([bounds_max[0], bounds_max[1], self.height])
            return ray_box_interval(origins, directions, bmin, bmax)
        c = self.position(t)
        if self.shape == "box":
            return ray_box_interval(origins, directions, c - self.size / 2.0, c + self.size / 2.0)
        if self.shape == "sphere":
            oc = origins - c
            b = np.sum(oc * directions, axis=-1)
            cc = np.sum(oc * oc, axis=-1) - self.radius ** 2
            disc = b * b - cc
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = np.where(ok, -b - sq, 1.0)
            t1 = np.where(ok, -b + sq, 0.0)
            return t0, t1
        raise ValueError(f"unknown shape {self.shape!r}")


@dataclass
class Scene:
    """Immutable analytic world: static + dynamic solids, agents' cameras."""

    static_primitives: list
    dynamic_primitives: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    background: np.ndarray        # (3,)
    timestamps: list              # sorted integer frame times
    agents: dict = field(default_factory=dict)   # agent_id -> [Camera]
    name: str = "scene"

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        self.timestamps = sorted(int(t) for t in self.timestamps)
        for p in self.dynamic_primitives:
            if p.trajectory is None:
                raise ValueError("dynamic primitive without trajectory")
            missing = [t for t in self.timestamps if t not in p.trajectory]
            if missing:
                raise ValueError(f"trajectory missing timestamps {missing}")

    @property
    def primitives(self):
        """Dynamic solids first so they win first-hit ties against the
        static background they sit on."""
        return list(self.dynamic_primitives) + list(self.static_primitives)

    def check_time(self, t):
        if int(t) not in self.timestamps or int(t) != t:
            raise ValueError(f"time {t} not in scene timestamps {self.timestamps}")

    def cameras(self):
        out = []
        for aid in sorted(self.agents):
            out.extend(self.agents[aid])
        return out

    def camera_by_id(self, camera_id):
        for cam in self.cameras():
            if cam.id == camera_id:
                return cam
        raise KeyError(f"unknown camera id {camera_id!r}")

    @property
    def center(self):
        return 0.5 * (self.bounds_min + self.bounds_max)

    @property
    def radius(self):
        """Radius of the ball circumscribing the bounds."""
        return 0.5 * float(np.linalg.norm(self.bounds_max - self.bounds_min))


def query_scene(scene, x, t):
    """Point query of the analytic world.

    x : (..., 3) world points.
    Returns (density (...,), color (..., 3), is_dynamic (...,) bool,
    flow_fw (..., 3), flow_bw (..., 3)).  Flows are the containing dynamic
    solid's displacement t->t+1 (forward) and t->t-1 (backward), zero in
    empty space and inside static solids.
    """
    scene.check_time(t)
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[:-1]
    density = np.zeros(batch)
    color = np.broadcast_to(scene.background, batch + (3,)).copy()
    is_dyn = np.zeros(batch, dtype=bool)
    flow_fw = np.zeros(batch + (3,))
    flow_bw = np.zeros(batch + (3,))

    ts = scene.timestamps
    t_next = t + 1 if t + 1 in ts else t
    t_prev = t - 1 if t - 1 in ts else t

    claimed = np.zeros(batch, dtype=bool)
    for prim in scene.primitives:
        inside = prim.contains(x, t) & ~claimed
        if not np.any(inside):
            continue
        claimed |= inside
        density[inside] = prim.density
        color[inside] = prim.albedo
        if prim.is_dynamic:
            is_dyn[inside] = True
            flow_fw[inside] = prim.displacement(t, t_next)
            flow_bw[inside] = prim.displacement(t, t_prev)
    return density, color, is_dyn, flow_fw, flow_bw


def oracle_render(scene, origins, directions, t, steps=512, near=None, far=None):
    """Brute-force reference rendering by fine midpoint quadrature.

    origins, directions : (N, 3).  Integrates the emission-absorption model
    against exact point queries; converges O(1/steps) to the true integral
    for piecewise-constant scenes.  Returns (N, 3) colors.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    scene.check_time(t)
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if near is None or far is None:
        t0, t1 = ray_box_interval(origins, directions, scene.bounds_min, scene.bounds_max)
        near_arr = np.maximum(t0, 1e-4) if near is None else np.full(len(origins), near)
        far_arr = np.maximum(t1, near_arr + 1e-4) if far is None else np.full(len(origins), far)
    else:
        near_arr = np.full(len(origins), float(near))
        far_arr = np.full(len(origins), float(far))

    n = len(origins)
    seg = (far_arr - near_arr) / steps                       # (N,)
    mids = near_arr[:, None] + (np.arange(steps) + 0.5) * seg[:, None]
    pts = origins[:, None, :] + mids[..., None] * directions[:, None, :]
    density, color, _, _, _ = query_scene(scene, pts.reshape(-1, 3), t)
    density = density.reshape(n, steps)
    color = color.reshape(n, steps, 3)

    tau = density * seg[:, None]
    trans = np.exp(-np.concatenate([np.zeros((n, 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
    alpha = 1.0 - np.exp(-tau)
    weights = trans * alpha
    t_end = np.exp(-np.sum(tau, axis=1))
    return np.einsum("nk,nkc->nc", weights, color) + t_end[:, None] * scene.background


def first_hit(scene, origins, directions, t, t_min=1e-4):
    """Nearest primitive entry along each ray.

    Returns (hit_index (N,) int, entry distance (N,)); index -1 / inf for
    rays that hit nothing.  Ties go to the earlier primitive in
    ``scene.primitives`` order.
    """
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    n = len(origins)
    best_t = np.full(n, _INF)
    best_i = np.full(n, -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        e0, e1 = prim.ray_interval(origins, directions, t, scene.bounds_min, scene.bounds_max)
        entry = np.where(e0 >= t_min, e0, np.where(e1 >= t_min, t_min, _INF))
        entry = np.where(e1 >= np.maximum(e0, t_min), entry, _INF)
        better = entry < best_t
        best_t = np.where(better, entry, best_t)
        best_i = np.where(better, i, best_i)
    return best_i, best_t


def render_labels(scene, camera, t, steps=512):
    """Exact per-pixel training labels for one camera and timestamp.

    Returns dict with:
      image  : (H, W, 3) oracle rendering
      mask   : (H, W) 1 where the first-hit solid is dynamic
      flow_fw: (H, W, 2) projected displacement of the first-hit point t->t+1
      flow_bw: (H, W, 2) same for t->t-1
    Pixels with no hit (or at clamp-boundary times) carry zero flow.
    """
    scene.check_time(t)
    H, W = camera.height, camera.width
    origins, dirs = all_pixel_rays(camera)
    image = oracle_render(scene, origins, dirs, t, steps=steps).reshape(H, W, 3)

    idx, dist = first_hit(scene, origins, dirs, t)
    n_dyn = len(scene.dynamic_primitives)
    hit = idx >= 0
    mask = (hit & (idx < n_dyn)).astype(np.float64)

    flow_fw = np.zeros((H * W, 2))
    flow_bw = np.zeros((H * W, 2))
    ts = scene.timestamps
    prims = scene.primitives
    for direction, t2, out in (("fw", t + 1, flow_fw), ("bw", t - 1, flow_bw)):
        if t2 not in ts:
            continue
        for i, prim in enumerate(prims):
            sel = hit & (idx == i)
            if not np.any(sel):
                continue
            disp = prim.displacement(t, t2)
            if not np.any(disp):
                continue
            x_hit = origins[sel] + dist[sel, None] * dirs[sel]
            out[sel] = project(x_hit + disp, camera) - project(x_hit, camera)

    return {
        "image": np.clip(image, 0.0, 1.0),
        "mask": mask.reshape(H, W),
        "flow_fw": flow_fw.reshape(H, W, 2),
        "flow_bw": flow_bw.reshape(H, W, 2),
    }
