"""Two-phase optimization of the collaborative field.

Phase one fits the static background (masked reconstruction); phase two
freezes it and fits the dynamic field with the full-render, optical-flow,
cycle and smoothness objectives over (t-1, t, t+1) units.  Gradients are the
hand-written adjoints of the lower modules; the optimizer is first-order
adaptive-moment with the usual defaults.
"""

import json
import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as L
from .fields import embed_direction
from .geometry import all_pixel_rays
from .model import FieldModel
from .render import (composite_full_fwd, composite_full_bwd,
                     composite_static_fwd, composite_static_bwd,
                     expected_depth_bwd, expected_depth_fwd,
                     ray_near_far, sample_quadrature)
from .scene import render_labels

CHECKPOINT_MAGIC = b"CFCP"
CHECKPOINT_VERSION = 2

METRIC_COLUMNS = ("step", "phase", "lr", "loss_static", "loss_dynamic",
                  "loss_optical", "loss_cycle", "loss_smooth", "loss_total")


class NumericalError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


class CheckpointError(RuntimeError):
    """Raised for corrupt or incompatible checkpoint files."""


@dataclass
class TrainConfig:
    lr_init: float = 5e-4
    schedule: str = "cosine"          # "cosine" | "exponential"
    gamma: float = 0.9995             # exponential mode decay per step
    static_steps: int = 2000
    dynamic_steps: int = 1000
    rays_per_batch: int = 1024
    dynamic_rays_per_batch: int = 512     # dynamic steps run ~5 field passes
    samples_per_ray: int = 48
    lambda_static: float = 1.0
    lambda_dynamic: float = 1.0
    lambda_optical: float = 0.1
    lambda_cycle: float = 1.0
    smooth_weight: float = 0.1
    seed: int = 0
    max_grad_norm: float = 0.0        # 0 disables the norm cap
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.schedule not in ("cosine", "exponential"):
            raise ValueError("schedule must be 'cosine' or 'exponential'")
        for name in ("lambda_static", "lambda_dynamic", "lambda_optical",
                     "lambda_cycle", "smooth_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def weights(self):
        return (self.lambda_static, self.lambda_dynamic,
                self.lambda_optical, self.lambda_cycle)


def lr_at(config, step, total_steps):
    """Learning rate at a step of a phase with ``total_steps`` steps."""
    if total_steps <= 0:
        return config.lr_init
    if step > total_steps:
        raise ValueError("step beyond schedule length")
    if config.schedule == "cosine":
        return config.lr_init * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
    return config.lr_init * config.gamma ** step


class Adam:
    """First-order adaptive-moment updates over a dict of named arrays."""

    def __init__(self, names, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = list(names)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}

    def step(self, params, grads, lr):
        if lr == 0.0:
            return
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[n] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def clip_grads(grads, max_norm):
    if max_norm <= 0:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return grads


class TrainData:
    """Pooled per-timestamp training rays and labels.

    Cameras are fixed over time, so one (origin, direction) table serves
    every timestamp; labels are stacked per time in the same pixel order.
    ``hold_out`` lists (camera_id, timestamp) pairs excluded from training,
    which is how failed views stay unseen: a camera that fails at one
    timestamp still contributes its healthy frames at the others.
    """

    def __init__(self, scene, cameras, labels, hold_out=()):
        self.scene = scene
        self.cameras = list(cameras)
        self.hold_out = {(c, int(t)) for c, t in hold_out}
        origins, dirs, cam_idx = [], [], []
        for i, cam in enumerate(self.cameras):
            o, d = all_pixel_rays(cam)
            origins.append(o)
            dirs.append(d)
            cam_idx.append(np.full(len(o), i, dtype=np.int64))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.cam_idx = np.concatenate(cam_idx)
        self.by_time = {}
        self.valid_idx = {}
        for t in scene.timestamps:
            img, msk, ffw, fbw = [], [], [], []
            keep = []
            for i, cam in enumerate(self.cameras):
                lab = labels[(cam.id, t)]
                img.append(lab["image"].reshape(-1, 3))
                msk.append(lab["mask"].reshape(-1))
                ffw.append(lab["flow_fw"].reshape(-1, 2))
                fbw.append(lab["flow_bw"].reshape(-1, 2))
                keep.append(np.full(img[-1].shape[0],
                                    (cam.id, int(t)) not in self.hold_out))
            self.by_time[t] = {
                "image": np.concatenate(img), "mask": np.concatenate(msk),
                "flow_fw": np.concatenate(ffw), "flow_bw": np.concatenate(fbw),
            }
            self.valid_idx[t] = np.flatnonzero(np.concatenate(keep))
            if len(self.valid_idx[t]) == 0:
                raise ValueError(f"every view at t={t} is held out")

    @classmethod
    def from_scene(cls, scene, cameras, oracle_steps=512, hold_out=()):
        labels = {(cam.id, t): render_labels(scene, cam, t, steps=oracle_steps)
                  for cam in cameras for t in scene.timestamps}
        return cls(scene, cameras, labels, hold_out=hold_out)

    def sample_batch(self, rng, n, t=None, unit=False):
        """Draw ray indices; with ``unit`` the rays must be healthy at the
        whole (t-1, t, t+1) unit so no held-out label leaks in as a
        neighbor-time target."""
        if t is None:
            return rng.integers(0, len(self.origins), size=n)
        t = int(t)
        if unit:
            pool = self._unit_pool(t)
        else:
            pool = self.valid_idx[t]
        return pool[rng.integers(0, len(pool), size=n)]

    def _unit_pool(self, t):
        cached = getattr(self, "_unit_cache", None)
        if cached is None:
            cached = self._unit_cache = {}
        if t not in cached:
            pool = np.intersect1d(self.valid_idx[t], self.valid_idx[t - 1])
            pool = np.intersect1d(pool, self.valid_idx[t + 1])
            if len(pool) == 0:
                raise ValueError(f"no rays healthy across the unit at t={t}")
            cached[t] = pool
        return cached[t]

    def batch_arrays(self, idx, t):
        lab = self.by_time[t]
        return {
            "origins": self.origins[idx], "dirs": self.dirs[idx],
            "cam_idx": self.cam_idx[idx],
            "gt": lab["image"][idx], "mask": lab["mask"][idx],
            "flow_fw": lab["flow_fw"][idx], "flow_bw": lab["flow_bw"][idx],
        }


class Trainer:
    """Owns the model, optimizer state, rng and the metric log."""

    def __init__(self, model, data, config):
        self.model = model
        self.data = data
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        groups = model.param_groups()
        params = model.params()
        self.opt_static = Adam([n for n in groups["static"]], params,
                               config.beta1, config.beta2, config.eps)
        self.opt_dynamic = Adam([n for n in groups["dynamic"]], params,
                                config.beta1, config.beta2, config.eps)
        self.step_count = 0
        self.metrics = []

    # ------------------------------------------------------------- batching

    def _draw_time(self, interior=False):
        ts = self.model.scene.timestamps
        pool = ts[1:-1] if interior and len(ts) >= 3 else ts
        return int(pool[self.rng.integers(0, len(pool))])

    def make_batch(self, t, n=None, unit=False):
        n = n or self.config.rays_per_batch
        idx = self.data.sample_batch(self.rng, n, t=t, unit=unit)
        return t, idx

    # ------------------------------------------------------- static phase

    def static_forward_backward(self, t, idx, stratified=True):
        """Masked background objective and its gradients on one batch."""
        cfg = self.config
        batch = self.data.batch_arrays(idx, t)
        origins, dirs = batch["origins"], batch["dirs"]
        near, far = ray_near_far(origins, dirs, self.model.scene.bounds_min,
                                 self.model.scene.bounds_max)
        rng = self.rng if stratified else None
        u, delta = sample_quadrature(near, far, cfg.samples_per_ray,
                                     stratified=stratified, rng=rng)
        B, K = len(origins), cfg.samples_per_ray
        pts = self.model.ray_points(origins, dirs, u).reshape(-1, 3)
        de = np.repeat(embed_direction(dirs), K, axis=0)
        sigma, rgb, q_cache = self.model.query_static(pts, None, t, d_embed=de)
        C, c_cache = composite_static_fwd(sigma.reshape(B, K),
                                          rgb.reshape(B, K, 3), delta,
                                          self.model.background)
        l_static, dC = L.loss_static(C, batch["gt"], batch["mask"])
        if not np.isfinite(l_static):
            raise NumericalError(f"non-finite static loss at step {self.step_count}")
        dsigma, drgb = composite_static_bwd(c_cache, cfg.lambda_static * dC)
        grads = self.model.static_backward(q_cache, dsigma.reshape(-1),
                                           drgb.reshape(-1, 3))
        comp = {"loss_static": l_static / B, "loss_dynamic": 0.0,
                "loss_optical": 0.0, "loss_cycle": 0.0, "loss_smooth": 0.0}
        comp["loss_total"] = L.loss_total(
            (comp["loss_static"], 0.0, 0.0, 0.0), cfg.weights)
        comp["_raw_total"] = L.loss_total((l_static, 0.0, 0.0, 0.0), cfg.weights)
        return comp, grads

    # ------------------------------------------------------ dynamic phase

    def dynamic_forward_backward(self, t, idx, stratified=True):
        """Full-render unit objective at tau = {t-1, t, t+1} plus flow
        regularizers; gradients touch only dynamic parameters."""
        cfg = self.config
        model = self.model
        lam_s, lam_d, lam_o, lam_c = cfg.weights
        batch = self.data.batch_arrays(idx, t)
        origins, dirs = batch["origins"], batch["dirs"]
        near, far = ray_near_far(origins, dirs, model.scene.bounds_min,
                                 model.scene.bounds_max)
        rng = self.rng if stratified else None
        u, delta = sample_quadrature(near, far, cfg.samples_per_ray,
                                     stratified=stratified, rng=rng)
        B, K = len(origins), cfg.samples_per_ray
        pts = model.ray_points(origins, dirs, u)
        pts_flat = pts.reshape(-1, 3)
        de = np.repeat(embed_direction(dirs), K, axis=0)

        # frozen static side at each unit time (conditioning volume varies)
        static_sc = {}
        for tq in (t - 1, t, t + 1):
            s_sig, s_rgb, _ = model.query_static(pts_flat, None, tq, d_embed=de)
            static_sc[tq] = (s_sig.reshape(B, K), s_rgb.reshape(B, K, 3))

        # direct dynamic query at the unit center
        fw, bw, sig_t, rgb_t, blend, cache_t = model.query_dynamic(
            pts_flat, None, t, d_embed=de)
        blend_bk = blend.reshape(B, K)

        # flow-warped neighbor queries (positions differentiate through s)
        y_fw = pts_flat + fw
        _, bw_at_fw, sig_p, rgb_p, _, cache_p = model.query_dynamic(
            y_fw, None, t + 1, d_embed=de)
        z_bw = pts_flat - bw
        _, _, sig_m, rgb_m, _, cache_m = model.query_dynamic(
            z_bw, None, t - 1, d_embed=de)
        # cycle companion of the backward flow (note: +s_bw, unlike the warp)
        w_bw = pts_flat + bw
        fw_at_bw, _, _, _, _, cache_c = model.query_dynamic(
            w_bw, None, t - 1, d_embed=de)

        # composite the three unit renders
        renders, caches = {}, {}
        for tq, (sd, rd) in ((t, (sig_t, rgb_t)), (t + 1, (sig_p, rgb_p)),
                             (t - 1, (sig_m, rgb_m))):
            ss, rs = static_sc[tq]
            renders[tq], caches[tq] = composite_full_fwd(
                ss, rs, sd.reshape(B, K), rd.reshape(B, K, 3), blend_bk,
                delta, model.background)

        gts = {tq: self.data.by_time[tq]["image"][idx] for tq in (t - 1, t, t + 1)}
        l_dyn, dC = L.loss_dynamic(renders, gts)

        # expected surface point along each ray from the dynamic profile
        u_hat, depth_cache = expected_depth_fwd(sig_t.reshape(B, K), delta, u, far)
        x_hat = origins + u_hat[:, None] * dirs

        fw_hat, bw_hat, _, _, _, cache_hat = model.query_dynamic(x_hat, dirs, t)
        l_opt = 0.0
        dfw_hat = np.zeros((B, 3))
        dbw_hat = np.zeros((B, 3))
        dx_hat = np.zeros((B, 3))
        for ci in np.unique(batch["cam_idx"]):
            sel = batch["cam_idx"] == ci
            lo, dff, dbb, dxs = L.loss_optical(
                x_hat[sel], fw_hat[sel], bw_hat[sel],
                batch["flow_fw"][sel], batch["flow_bw"][sel],
                self.data.cameras[int(ci)])
            l_opt += lo
            dfw_hat[sel] = dff
            dbw_hat[sel] = dbb
            dx_hat[sel] = dxs

        l_cyc, dcy_fw, dcy_bwatfw, dcy_bw, dcy_fwatbw = L.loss_cycle(
            fw, bw_at_fw, bw, fw_at_bw)
        l_sm_fw, dsm_fw = L.loss_smooth(fw.reshape(B, K, 3))
        l_sm_bw, dsm_bw = L.loss_smooth(bw.reshape(B, K, 3))
        l_smooth = l_sm_fw + l_sm_bw

        l_cyc_group = l_cyc + cfg.smooth_weight * l_smooth
        # frozen-static reconstruction term, logged for Eq-style totals
        C_s, _ = composite_static_fwd(static_sc[t][0], static_sc[t][1],
                                      delta, model.background)
        l_static = L.loss_static(C_s, batch["gt"], batch["mask"])[0]
        total = L.loss_total((l_static, l_dyn, l_opt, l_cyc_group), cfg.weights)
        if not np.isfinite(total):
            raise NumericalError(f"non-finite dynamic loss at step {self.step_count}")

        # ---- backward ----
        dsig = {}
        drgb = {}
        dblend_total = np.zeros((B, K))
        for tq in (t, t + 1, t - 1):
            _, _, ds_d, dr_d, dbl = composite_full_bwd(caches[tq], lam_d * dC[tq])
            dsig[tq], drgb[tq] = ds_d, dr_d
            dblend_total += dbl

        grads_list = []
        # forward-warped query: render cotangents + cycle's bw-at-fw term
        g, dy = model.dynamic_backward(
            cache_p, dbw=lam_c * dcy_bwatfw,
            dsigma=dsig[t + 1].reshape(-1), drgb=drgb[t + 1].reshape(-1, 3),
            want_dx=True)
        grads_list.append(g)
        d_fw_total = dy
        # backward-warped query (position is x - s_bw)
        g, dz = model.dynamic_backward(
            cache_m, dsigma=dsig[t - 1].reshape(-1),
            drgb=drgb[t - 1].reshape(-1, 3), want_dx=True)
        grads_list.append(g)
        d_bw_total = -dz
        # cycle companion query at x + s_bw
        g, dw = model.dynamic_backward(cache_c, dfw=lam_c * dcy_fwatbw,
                                       want_dx=True)
        grads_list.append(g)
        d_bw_total += dw
        # optical-flow query at the expected surface point; the surface
        # point itself depends on the dynamic density profile
        g, dxh = model.dynamic_backward(cache_hat, dfw=lam_o * dfw_hat,
                                        dbw=lam_o * dbw_hat, want_dx=True)
        grads_list.append(g)
        du_hat = np.einsum("bi,bi->b", lam_o * dx_hat + dxh, dirs)
        dsig_depth = expected_depth_bwd(depth_cache, du_hat)
        # direct query collects every remaining cotangent
        d_fw_total += lam_c * (dcy_fw + cfg.smooth_weight * dsm_fw.reshape(-1, 3))
        d_bw_total += lam_c * (dcy_bw + cfg.smooth_weight * dsm_bw.reshape(-1, 3))
        g, _ = model.dynamic_backward(
            cache_t, dfw=d_fw_total, dbw=d_bw_total,
            dsigma=(dsig[t] + dsig_depth).reshape(-1),
            drgb=drgb[t].reshape(-1, 3),
            dblend=dblend_total.reshape(-1))
        grads_list.append(g)

        grads = grads_list[0]
        for g in grads_list[1:]:
            for k, v in g.items():
                grads[k] += v

        comp = {"loss_static": l_static / B, "loss_dynamic": l_dyn / B,
                "loss_optical": l_opt / B, "loss_cycle": l_cyc / (B * K),
                "loss_smooth": l_smooth / (B * K),
                "loss_total": total / B, "_raw_total": total}
        return comp, grads

    # ------------------------------------------------------------ stepping

    def train_step(self, phase):
        cfg = self.config
        if phase == "static":
            t = self._draw_time()
            _, idx = self.make_batch(t)
            comp, grads = self.static_forward_backward(t, idx)
            opt, steps = self.opt_static, cfg.static_steps
        elif phase == "dynamic":
            t = self._draw_time(interior=True)
            _, idx = self.make_batch(t, n=cfg.dynamic_rays_per_batch, unit=True)
            comp, grads = self.dynamic_forward_backward(t, idx)
            opt, steps = self.opt_dynamic, cfg.dynamic_steps
        else:
            raise ValueError(f"unknown phase {phase!r}")
        lr = lr_at(cfg, opt.t, steps)
        clip_grads(grads, cfg.max_grad_norm)
        opt.step(self.model.params(), grads, lr)
        self.step_count += 1
        comp.pop("_raw_total", None)
        row = {"step": self.step_count, "phase": phase, "lr": lr, **comp}
        self.metrics.append(row)
        return row

    def run(self, progress=None):
        cfg = self.config
        for _ in range(cfg.static_steps):
            row = self.train_step("static")
            if progress:
                progress(row)
        if len(self.model.scene.timestamps) >= 3:
            for _ in range(cfg.dynamic_steps):
                row = self.train_step("dynamic")
                if progress:
                    progress(row)
        return self.metrics

    # ------------------------------------------------------ verification

    def verify_gradients(self, probes=6, batch_size=8, samples=6, seed=1234,
                         fd_step=1e-6):
        """Central-difference check of every parameter group.

        Runs both phase objectives on a small deterministic batch and
        compares the analytic gradient of randomly probed parameters with
        central finite differences of the loss.  Returns {group: max
        relative error}.  ``probes`` = 0 yields an empty report.
        """
        if probes <= 0:
            return {}
        cfg = self.config
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(self.data.origins), size=batch_size)
        ts = self.model.scene.timestamps
        t_static = int(ts[0])
        t_dyn = int(ts[len(ts) // 2]) if len(ts) >= 3 else None

        saved_k = cfg.samples_per_ray
        cfg.samples_per_ray = samples
        report = {}
        try:
            params = self.model.params()
            groups = self.model.param_groups()

            def run_loss(phase):
                if phase == "static":
                    comp, grads = self.static_forward_backward(t_static, idx,
                                                               stratified=False)
                else:
                    comp, grads = self.dynamic_forward_backward(t_dyn, idx,
                                                                stratified=False)
                return comp["_raw_total"], grads

            for phase, names in (("static", groups["static"]),
                                 ("dynamic", groups["dynamic"])):
                if phase == "dynamic" and t_dyn is None:
                    continue
                _, grads = run_loss(phase)
                for name in names:
                    arr = params[name]
                    g = grads[name]
                    worst = 0.0
                    # bias probes toward entries with signal
                    flat_g = np.abs(g).ravel()
                    order = np.argsort(flat_g)[::-1]
                    n_strong = max(1, min(probes // 2, len(order)))
                    chosen = list(order[:n_strong])
                    chosen += list(rng.integers(0, arr.size, size=probes - n_strong))
                    for flat_i in chosen:
                        pos = np.unravel_index(int(flat_i), arr.shape)
                        h = fd_step * max(1.0, abs(arr[pos]))
                        old = arr[pos]
                        arr[pos] = old + h
                        f1, _ = run_loss(phase)
                        arr[pos] = old - h
                        f0, _ = run_loss(phase)
                        arr[pos] = old
                        fd = (f1 - f0) / (2.0 * h)
                        an = g[pos]
                        denom = max(abs(fd), abs(an), 1e-7)
                        worst = max(worst, abs(fd - an) / denom)
                    group_key = name
                    report[group_key] = worst
        finally:
            cfg.samples_per_ray = saved_k
        # collapse per-parameter entries into the five logical groups
        collapsed = {}
        for name, err in report.items():
            if name.startswith("static."):
                key = "static_tables" if name.endswith("tables") else "static_net"
            elif name.endswith("tables"):
                key = "dynamic_tables"
            elif name.endswith("codes"):
                key = "keyframe_codes"
            else:
                key = "dynamic_net"
            collapsed[key] = max(collapsed.get(key, 0.0), err)
        return collapsed

    # ----------------------------------------------------- checkpointing

    def checkpoint_arrays(self):
        arrays = dict(self.model.params())
        for t, vol in self.model.volumes.items():
            arrays[f"volume.{t}"] = vol.values
        for group, opt in (("static", self.opt_static), ("dynamic", self.opt_dynamic)):
            for n in opt.names:
                arrays[f"adam.{group}.m.{n}"] = opt.m[n]
                arrays[f"adam.{group}.v.{n}"] = opt.v[n]
        return arrays

    def save(self, path):
        from .sceneio import scene_to_doc
        header = {
            "step": self.step_count,
            "config": asdict(self.config),
            "rng_state": self.rng.bit_generator.state,
            "adam_t": {"static": self.opt_static.t, "dynamic": self.opt_dynamic.t},
            "scene": scene_to_doc(self.model.scene),
            "model_hparams": self.model.hparams,
            "metrics": self.metrics,
        }
        save_checkpoint(path, header, self.checkpoint_arrays())

    @classmethod
    def restore(cls, path, model, data):
        header, arrays = load_checkpoint(path)
        config = TrainConfig(**header["config"])
        trainer = cls(model, data, config)
        params = model.params()
        for n in params:
            params[n][...] = arrays[n]
        for t in model.volumes:
            model.volumes[t].values[...] = arrays[f"volume.{t}"]
        for group, opt in (("static", trainer.opt_static),
                           ("dynamic", trainer.opt_dynamic)):
            opt.t = header["adam_t"][group]
            for n in opt.names:
                opt.m[n][...] = arrays[f"adam.{group}.m.{n}"]
                opt.v[n][...] = arrays[f"adam.{group}.v.{n}"]
        trainer.step_count = header["step"]
        trainer.rng.bit_generator.state = header["rng_state"]
        trainer.metrics = list(header["metrics"])
        return trainer


def load_model(path):
    """Rebuild the trained FieldModel from a self-contained checkpoint.

    Returns (model, header).  Parameters and BEV volumes are restored
    exactly; the scene comes from the document embedded in the header.
    """
    from .sceneio import scene_from_doc
    header, arrays = load_checkpoint(path)
    scene = scene_from_doc(header["scene"])
    hp = dict(header["model_hparams"])
    hp["bev_dims"] = tuple(hp["bev_dims"])
    # init rng is irrelevant: every parameter is overwritten from the file
    model = FieldModel(scene, rng=np.random.default_rng(0), **hp)
    params = model.params()
    for n in params:
        params[n][...] = arrays[n]
    for t in model.volumes:
        model.volumes[t].values[...] = arrays[f"volume.{t}"]
    return model, header


def save_checkpoint(path, header, arrays):
    """Versioned little-endian binary: magic, version, JSON header with an
    array manifest, raw float64 payload, trailing CRC32 of the payload."""
    manifest = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape)})
        payload.extend(arr.tobytes())
    head = dict(header)
    head["manifest"] = manifest
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint32(len(head_bytes)).tobytes())
        fh.write(head_bytes)
        fh.write(payload)
        fh.write(np.uint32(crc).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
    hlen = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    if len(blob) < 12 + hlen + 4:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    offset = 12 + hlen
    payload = blob[offset:-4]
    crc_stored = int(np.frombuffer(blob[-4:], dtype="<u4")[0])
    expect = sum(int(np.prod(m["shape"])) * 8 for m in header["manifest"])
    if len(payload) != expect:
        raise CheckpointError("truncated checkpoint payload")
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc_stored:
        raise CheckpointError("checkpoint payload checksum mismatch")
    arrays = {}
    pos = 0
    for m in header["manifest"]:
        n = int(np.prod(m["shape"]))
        arrays[m["name"]] = np.frombuffer(
            payload[pos:pos + n * 8], dtype="<f8").reshape(m["shape"]).copy()
        pos += n * 8
    return header, arrays


def write_metrics(path, metrics):
    """Line-oriented metric log, one comma-separated row per step."""
    with open(path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in metrics:
            cells = []
            for col in METRIC_COLUMNS:
                val = row[col]
                cells.append(val if isinstance(val, str) else f"{val:.12e}"
                             if isinstance(val, float) else str(val))
            fh.write(",".join(cells) + "\n")
