"""Training objectives.

All losses return (scalar value, gradients w.r.t. their direct inputs) and
are plain sums over the batch, so values are comparable against hand
computations; the trainer normalizes per ray when logging.
"""

import numpy as np

from .geometry import project, project_with_grad


def _check_mask(mask):
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask must be binary")
    return mask


def loss_static(pred, gt, mask):
    """Masked background reconstruction: sum_i ||(C_i - C_i^gt) (1 - M_i)||^2.

    pred, gt : (B, 3); mask : (B,) in {0, 1} with 1 marking dynamic pixels.
    Returns (value, dpred).  The gradient is exactly zero on masked pixels.
    """
    mask = _check_mask(mask)
    keep = (1.0 - mask)[:, None]
    resid = (pred - gt) * keep
    value = float(np.sum(resid ** 2))
    return value, 2.0 * resid * keep


def loss_dynamic(preds, gts):
    """Full-render reconstruction over a time unit: sum_t sum_i ||C_t - C_t^gt||^2.

    preds, gts : dicts time -> (B, 3); the two key sets must match.
    Returns (value, {t: dpred_t}).
    """
    if set(preds) != set(gts):
        missing = set(preds) ^ set(gts)
        raise ValueError(f"prediction/ground-truth timestamps differ: {missing}")
    value = 0.0
    grads = {}
    for t in preds:
        resid = preds[t] - gts[t]
        value += float(np.sum(resid ** 2))
        grads[t] = 2.0 * resid
    return value, grads


def loss_optical(x_surf, flow_fw, flow_bw, gt_fw, gt_bw, camera):
    """Projected scene-flow supervision (componentwise L1).

    x_surf : (B, 3) expected surface points along the rays; flow_fw/bw :
    (B, 3) predicted world-space flows at x_surf; gt_fw/bw : (B, 2)
    reference image-space flows.  The residual is the projected flow
    project(x + s) - project(x) minus the reference.
    Returns (value, dflow_fw, dflow_bw, dx_surf).
    """
    value = 0.0
    dflows = []
    uv0, J0 = project_with_grad(x_surf, camera)
    dx = np.zeros_like(np.atleast_2d(x_surf), dtype=np.float64)
    for flow, gt in ((flow_fw, gt_fw), (flow_bw, gt_bw)):
        uv1, J1 = project_with_grad(x_surf + flow, camera)
        resid = uv1 - uv0 - gt
        value += float(np.sum(np.abs(resid)))
        sign = np.sign(resid)                                  # (B, 2)
        dflows.append(np.einsum("bi,bij->bj", sign, J1))
        dx += np.einsum("bi,bij->bj", sign, J1 - J0)
    return value, dflows[0], dflows[1], dx


def loss_cycle(fw_t, bw_at_fw, bw_t, fw_at_bw):
    """Scene-flow cycle consistency.

    Penalizes sum ||s_fw(x,t) + s_bw(x + s_fw, t+1)||^2 plus the mirrored
    backward term sum ||s_bw(x,t) + s_fw(x + s_bw, t-1)||^2.  All inputs
    (B, 3).  Returns (value, d_fw_t, d_bw_at_fw, d_bw_t, d_fw_at_bw).
    The gradients are w.r.t. the four flow arrays as direct inputs; the
    caller chains them through the warped query positions.
    """
    r1 = fw_t + bw_at_fw
    r2 = bw_t + fw_at_bw
    value = float(np.sum(r1 ** 2) + np.sum(r2 ** 2))
    return value, 2.0 * r1, 2.0 * r1, 2.0 * r2, 2.0 * r2


def loss_smooth(flows, delta_mask=None):
    """Spatial smoothness along rays: adjacent-sample flow differences.

    flows : (B, K, 3) per-sample flow vectors (apply once per direction).
    Returns (value, dflows).
    """
    flows = np.asarray(flows, dtype=np.float64)
    if flows.shape[1] < 2:
        return 0.0, np.zeros_like(flows)
    diff = flows[:, 1:] - flows[:, :-1]
    if delta_mask is not None:
        diff = diff * delta_mask[..., None]
    value = float(np.sum(diff ** 2))
    dflows = np.zeros_like(flows)
    g = 2.0 * diff
    dflows[:, 1:] += g
    dflows[:, :-1] -= g
    return value, dflows


def loss_total(components, weights=(1.0, 1.0, 0.1, 1.0)):
    """Weighted sum of (static, dynamic, optical, cycle-group) components."""
    if len(components) != 4 or len(weights) != 4:
        raise ValueError("expected exactly four loss components and weights")
    return float(sum(w * c for w, c in zip(weights, components)))
