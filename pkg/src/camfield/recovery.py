"""Camera-failure injection, view recovery and the downstream toy perception.

``inject_failure`` zeroes (or drops) chosen camera views; ``recover_views``
re-renders exactly the failed ones from the trained field; the perception
head carves a BEV occupancy map from the views by palette photo-consistency,
so any IoU change between settings is attributable to the views alone.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .bev import visible_mask
from .scene import query_scene

CLASS_NAMES = ("free", "occupied-static", "occupied-dynamic")
FREE, OCC_STATIC, OCC_DYNAMIC = 0, 1, 2
_UNKNOWN = 3


@dataclass
class FailureSpec:
    """Which views fail.  Either an explicit list of (agent_id, camera_id,
    timestamp) triples or a seeded random draw of ``expected_count`` cameras
    among the overlap-covered candidates."""

    mode: str = "failed"              # "failed" (zeroed) | "dropped" (absent)
    expected_count: int = 0
    explicit: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("failed", "dropped"):
            raise ValueError("mode must be 'failed' or 'dropped'")
        if self.expected_count < 0:
            raise ValueError("expected_count must be >= 0")


def overlap_covered_cameras(scene, min_fraction=0.3, probe_dims=(20, 20, 8)):
    """Camera ids whose visible volume is mostly covered by other cameras.

    Probes a coarse grid of in-bounds points: a camera qualifies when at
    least ``min_fraction`` of the points it sees are seen by some other
    camera too.
    """
    cams = scene.cameras()
    axes = [np.linspace(scene.bounds_min[i], scene.bounds_max[i], probe_dims[i])
            for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
    vis = {cam.id: visible_mask([cam], pts) for cam in cams}
    out = []
    for cam in cams:
        mine = vis[cam.id]
        if not np.any(mine):
            continue
        others = np.zeros_like(mine)
        for other in cams:
            if other.id != cam.id:
                others |= vis[other.id]
        if np.sum(mine & others) / np.sum(mine) >= min_fraction:
            out.append(cam.id)
    return out


def select_failures(scene, spec, t, count=None):
    """Resolve a FailureSpec into a manifest of failed views at time t.

    Returns a sorted list of {"agent": ..., "camera": ..., "time": t}.
    Deterministic for a fixed (spec.seed, t); counts are nested: the n=2
    manifest extends the n=1 manifest, so one training hold-out set covers
    a whole failure sweep.
    """
    if spec.explicit:
        return sorted(
            ({"agent": a, "camera": c, "time": int(tt)} for a, c, tt in spec.explicit
             if int(tt) == int(t)),
            key=lambda m: (m["agent"], m["camera"]))
    n = spec.expected_count if count is None else count
    if n == 0:
        return []
    candidates = overlap_covered_cameras(scene)
    if n > len(candidates):
        raise ValueError(f"requested {n} failures but only "
                         f"{len(candidates)} overlap-covered cameras")
    rng = np.random.default_rng([spec.seed, int(t)])
    order = rng.permutation(len(candidates))[:n]
    by_id = {cam.id: cam for cam in scene.cameras()}
    manifest = [{"agent": by_id[candidates[i]].agent_id,
                 "camera": candidates[i], "time": int(t)} for i in order]
    return sorted(manifest, key=lambda m: (m["agent"], m["camera"]))


def inject_failure(views, spec, manifest):
    """Apply a failure manifest to a {camera_id: image} view set.

    failed mode zeroes the listed views; dropped mode removes them.
    Untouched entries are passed through unchanged (same arrays).
    """
    failed_ids = {m["camera"] for m in manifest}
    missing = failed_ids - set(views)
    if missing:
        raise ValueError(f"manifest names unknown views: {sorted(missing)}")
    out = {}
    for cam_id, img in views.items():
        if cam_id in failed_ids:
            if spec.mode == "failed":
                out[cam_id] = np.zeros_like(img)
            # dropped: omit entirely
        else:
            out[cam_id] = img
    return out


def recover_views(model, manifest, t, K=160, chunk=4096, mode="full"):
    """Re-render every failed camera at time t from the trained field.

    Returns {camera_id: (H, W, 3) image}; raises on unknown camera ids.
    """
    out = {}
    for m in manifest:
        cam = model.scene.camera_by_id(m["camera"])   # KeyError on unknown id
        out[cam.id] = model.render_image(cam, t, mode=mode, K=K, chunk=chunk)
    return out


def psnr(image_a, image_b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical
    images give +inf (callers cap at 99.0 for logs)."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_logged(value, cap=99.0):
    return min(value, cap)


@dataclass
class PerceptionMap:
    """BEV class grid over the scene extent."""

    classes: np.ndarray           # (X, Y) ints indexing CLASS_NAMES
    extent_min: np.ndarray
    extent_max: np.ndarray

    def mask(self, class_index):
        return self.classes == class_index


def iou(pred, gt, class_index):
    """Per-class intersection over union; empty union counts as 1.0."""
    if pred.classes.shape != gt.classes.shape:
        raise ValueError("perception maps have different grid dims")
    p = pred.mask(class_index)
    g = gt.mask(class_index)
    union = np.sum(p | g)
    if union == 0:
        return 1.0
    return float(np.sum(p & g) / union)


class PerceptionHead:
    """Deterministic geometric carving of a BEV class map from camera views.

    For every BEV cell, fixed-height probe points are projected into each
    camera; the observed pixel colors are matched against the known class
    palettes.  A probe is accepted as occupied only when every camera that
    sees it agrees on the class (space-carving photo-consistency): a free
    cell's rays hit different things behind it, so disagreement carves it
    away.  Any camera whose color matches no palette entry (an all-black
    failed view, for instance) poisons the cell toward ``free``.
    Aggregation is by set-of-votes, so duplicated views are idempotent.
    """

    def __init__(self, scene, grid_dims=(40, 40), sample_heights=(0.45, 0.95),
                 match_threshold=0.26, min_views=2, extent_scale=0.8):
        self.scene = scene
        self.grid_dims = tuple(grid_dims)
        self.sample_heights = tuple(sample_heights)
        self.match_threshold = match_threshold
        self.min_views = min_views
        # map only the central collaboration zone: the outer fringe is
        # covered by too few cameras for photo-consistency to mean anything
        center = 0.5 * (scene.bounds_min[:2] + scene.bounds_max[:2])
        half = 0.5 * (scene.bounds_max[:2] - scene.bounds_min[:2]) * extent_scale
        self.extent_min = center - half
        self.extent_max = center + half
        palette, labels = [], []
        palette.append(scene.background)
        labels.append(FREE)
        for p in scene.static_primitives:
            palette.append(p.albedo)
            labels.append(FREE if p.shape == "ground" else OCC_STATIC)
        for p in scene.dynamic_primitives:
            palette.append(p.albedo)
            labels.append(OCC_DYNAMIC)
        self.palette = np.array(palette, dtype=np.float64)
        self.palette_labels = np.array(labels, dtype=np.int64)

    def cell_centers(self):
        X, Y = self.grid_dims
        bmin, bmax = self.extent_min, self.extent_max
        xs = bmin[0] + (np.arange(X) + 0.5) * (bmax[0] - bmin[0]) / X
        ys = bmin[1] + (np.arange(Y) + 0.5) * (bmax[1] - bmin[1]) / Y
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return gx, gy

    def _probe_points(self):
        gx, gy = self.cell_centers()
        pts = []
        for z in self.sample_heights:
            pts.append(np.stack([gx.ravel(), gy.ravel(),
                                 np.full(gx.size, z)], axis=-1))
        return np.concatenate(pts)          # (H_s * X * Y, 3)

    def _classify_colors(self, colors):
        """Nearest-palette labels with an unmatched sentinel."""
        d = np.linalg.norm(colors[:, None, :] - self.palette[None, :, :], axis=2)
        best = np.argmin(d, axis=1)
        labels = self.palette_labels[best]
        labels = np.where(d[np.arange(len(best)), best] <= self.match_threshold,
                          labels, _UNKNOWN)
        return labels

    def ground_truth(self, t):
        """Reference map carved directly from the analytic scene."""
        pts = self._probe_points()
        density, _, is_dyn, _, _ = query_scene(self.scene, pts, t)
        ground = np.zeros(len(pts), dtype=bool)
        for p in self.scene.static_primitives:
            if p.shape == "ground":
                ground |= p.contains(pts, t)
        occupied = (density > 0) & ~ground
        n_cells = self.grid_dims[0] * self.grid_dims[1]
        per_h_occ = occupied.reshape(len(self.sample_heights), n_cells)
        per_h_dyn = (occupied & is_dyn).reshape(len(self.sample_heights), n_cells)
        cls = np.full(n_cells, FREE, dtype=np.int64)
        cls[np.any(per_h_occ, axis=0)] = OCC_STATIC
        cls[np.any(per_h_dyn, axis=0)] = OCC_DYNAMIC
        return PerceptionMap(classes=cls.reshape(self.grid_dims),
                             extent_min=self.extent_min.copy(),
                             extent_max=self.extent_max.copy())

    def perceive(self, views, cameras):
        """Carve the map from rendered/observed views.

        views : {camera_id: (H, W, 3) image}; cameras : Camera list whose
        ids may be a superset of the views (dropped views just abstain).
        """
        if len(views) == 0:
            raise ValueError("perception needs at least one view")
        pts = self._probe_points()
        n_pts = len(pts)
        n_cells = self.grid_dims[0] * self.grid_dims[1]
        has = {c: np.zeros(n_pts, dtype=bool)
               for c in (FREE, OCC_STATIC, OCC_DYNAMIC, _UNKNOWN)}
        observers = np.zeros(n_pts, dtype=np.int64)
        seen_ids = set()
        for cam in cameras:
            if cam.id not in views or cam.id in seen_ids:
                continue
            seen_ids.add(cam.id)
            img = views[cam.id]
            p_cam = (pts - cam.position) @ cam.rotation
            z = p_cam[:, 2]
            front = z > 1e-6
            zz = np.where(front, z, 1.0)
            u = cam.fx * p_cam[:, 0] / zz + cam.cx
            v = cam.fy * p_cam[:, 1] / zz + cam.cy
            valid = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
            if not np.any(valid):
                continue
            observers += valid
            cols = np.clip(u[valid].astype(np.int64), 0, cam.width - 1)
            rows = np.clip(v[valid].astype(np.int64), 0, cam.height - 1)
            labels = self._classify_colors(img[rows, cols])
            for c in (FREE, OCC_STATIC, OCC_DYNAMIC, _UNKNOWN):
                sel = np.zeros(n_pts, dtype=bool)
                sel[np.flatnonzero(valid)[labels == c]] = True
                has[c] |= sel

        # photo-consistency per probe: occupied only when enough cameras
        # observe it and every one voted the same object class
        n_classes = (has[FREE].astype(np.int64) + has[OCC_STATIC]
                     + has[OCC_DYNAMIC])
        enough = observers >= self.min_views
        consistent_dyn = has[OCC_DYNAMIC] & (n_classes == 1) & enough
        consistent_sta = has[OCC_STATIC] & (n_classes == 1) & enough
        poisoned_pt = has[_UNKNOWN]

        def cellwise(arr):
            return np.any(arr.reshape(len(self.sample_heights), n_cells), axis=0)

        poisoned = cellwise(poisoned_pt)
        dyn = cellwise(consistent_dyn)
        sta = cellwise(consistent_sta)
        cls = np.full(n_cells, FREE, dtype=np.int64)
        cls[sta] = OCC_STATIC
        cls[dyn] = OCC_DYNAMIC
        cls[poisoned] = FREE
        return PerceptionMap(classes=cls.reshape(self.grid_dims),
                             extent_min=self.extent_min.copy(),
                             extent_max=self.extent_max.copy())


def toy_perception(scene, views, cameras, **head_kwargs):
    """One-shot wrapper: build the head for ``scene`` and carve a map."""
    return PerceptionHead(scene, **head_kwargs).perceive(views, cameras)


def evaluate_failure_sweep(model, scene, t, spec, counts=(0, 1, 2, 3),
                           K=160, chunk=4096, render_mode="full",
                           oracle_steps=512, head=None):
    """The end-to-end experiment grid: for each failure count, measure
    per-class IoU without and with recovery plus recovered-view PSNR.

    Returns (rows, view_rows): rows have one entry per (n, recovery) pair.
    """
    from .scene import render_labels
    head = head or PerceptionHead(scene)
    cameras = scene.cameras()
    oracle_views = {cam.id: render_labels(scene, cam, t, steps=oracle_steps)["image"]
                    for cam in cameras}
    gt_map = head.ground_truth(t)
    rows, view_rows = [], []
    for n in counts:
        manifest = select_failures(scene, spec, t, count=n)
        corrupted = inject_failure(oracle_views, spec, manifest)
        map_wo = head.perceive(corrupted, cameras)
        recovered = recover_views(model, manifest, t, K=K, chunk=chunk,
                                  mode=render_mode)
        repaired = dict(corrupted)
        repaired.update(recovered)
        map_w = head.perceive(repaired, cameras)
        psnrs = []
        for m in manifest:
            val = psnr(recovered[m["camera"]], oracle_views[m["camera"]])
            psnrs.append(val)
            view_rows.append({"n": n, "agent": m["agent"], "camera": m["camera"],
                              "time": t, "psnr": psnr_logged(val)})
        for recovery_on, pmap in ((0, map_wo), (1, map_w)):
            row = {"n": n, "recovery": recovery_on, "time": t}
            for ci, cname in enumerate(CLASS_NAMES):
                row[f"iou_{cname}"] = iou(pmap, gt_map, ci)
            row["mean_psnr"] = (psnr_logged(float(np.mean(psnrs)))
                                if (psnrs and recovery_on) else float("nan"))
            rows.append(row)
    return rows, view_rows


def write_report(path, rows):
    """Comma-separated evaluation table with a header row."""
    cols = ["n", "recovery", "time"] + [f"iou_{c}" for c in CLASS_NAMES] + ["mean_psnr"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            cells = []
            for c in cols:
                v = row[c]
                cells.append(f"{v:.8f}" if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")


def write_view_psnrs(path, view_rows):
    cols = ["n", "agent", "camera", "time", "psnr"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in view_rows:
            cells = [f"{row[c]:.8f}" if isinstance(row[c], float) else str(row[c])
                     for c in cols]
            fh.write(",".join(cells) + "\n")
