"""Trainable static and dynamic field heads.

A small fully-connected net maps [hash features, (time code,) direction
embedding, volume feature] to head outputs:

  static  head -> (sigma: softplus, rgb: sigmoid)
  dynamic head -> (flow_fw, flow_bw: linear, sigma: softplus, rgb: sigmoid,
                   blend: sigmoid)

Every forward pass returns a cache; the matching backward pass produces
exact reverse-mode gradients for parameters and inputs.  Positions are in
scene-normalized units (the model layer scales world meters into the unit
ball before calling in here); flow head outputs are likewise normalized.
"""

import numpy as np

from .encoding import contract, contract_vjp, encode_grad, encode_with_cache

DIR_FREQS = np.array([1.0, 2.0, 4.0, 8.0])    # 4-frequency sinusoidal embedding
DIR_EMBED_DIM = 3 + 3 * 2 * len(DIR_FREQS)


def embed_direction(d):
    """Raw direction plus sin/cos at 4 octaves, (B, 27)."""
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    parts = [d]
    for f in DIR_FREQS:
        parts.append(np.sin(f * d))
        parts.append(np.cos(f * d))
    return np.concatenate(parts, axis=1)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Mlp:
    """Fully-connected ReLU net with explicit forward cache and backward.

    Parameters live in ``params`` as {"w0", "b0", "w1", ...}; the final
    layer is linear (head activations are applied by the caller).
    """

    def __init__(self, sizes, rng=None, hidden_activation="relu"):
        self.sizes = list(sizes)
        self.hidden_activation = hidden_activation
        self.params = {}
        for i, (nin, nout) in enumerate(zip(sizes[:-1], sizes[1:])):
            if rng is None:
                w = np.zeros((nin, nout))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / nin), size=(nin, nout))
            self.params[f"w{i}"] = w
            self.params[f"b{i}"] = np.zeros(nout)
        self.n_layers = len(sizes) - 1

    def zero_output_rows(self, cols):
        """Zero selected output columns of the last layer (and their biases);
        used for the flow head so early training starts at zero flow."""
        last = self.n_layers - 1
        self.params[f"w{last}"][:, cols] = 0.0
        self.params[f"b{last}"][cols] = 0.0

    def forward(self, x):
        """Returns (output, cache)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not np.isfinite(x.sum()):
            raise ValueError("non-finite network input")
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1 and self.hidden_activation == "relu":
                h = np.maximum(z, 0.0)
            else:
                h = z
            acts.append(h)
        return h, acts

    def backward(self, cache, dout):
        """Returns (dx, grads) with grads keyed like ``params``."""
        acts = cache
        grads = {}
        delta = np.atleast_2d(dout)
        for i in reversed(range(self.n_layers)):
            h_in = acts[i]
            if i < self.n_layers - 1 and self.hidden_activation == "relu":
                delta = delta * (acts[i + 1] > 0)
            grads[f"w{i}"] = h_in.T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ self.params[f"w{i}"].T
        return delta, grads


class KeyframeCodes:
    """One trainable latent per integer scene timestamp."""

    def __init__(self, timestamps, dim=16):
        self.timestamps = np.array(sorted(int(t) for t in timestamps), dtype=np.float64)
        self.dim = dim
        self.values = np.zeros((len(self.timestamps), dim))


def temporal_interp(codes, t):
    """Linear interpolation between the enclosing keyframe codes.

    t : scalar or (B,) real times within the keyframe range.
    Returns ((B, D) latents, cache for the adjoint).
    """
    ts = codes.timestamps
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < ts[0]) or np.any(t_arr > ts[-1]):
        raise ValueError(f"time outside keyframe range [{ts[0]}, {ts[-1]}]")
    hi = np.clip(np.searchsorted(ts, t_arr, side="right"), 1, len(ts) - 1)
    lo = hi - 1
    denom = ts[hi] - ts[lo]
    a = (t_arr - ts[lo]) / denom
    out = (1.0 - a)[:, None] * codes.values[lo] + a[:, None] * codes.values[hi]
    return out, (lo, hi, a)


def temporal_interp_vjp(codes, cache, upstream):
    """Scatter a (B, D) cotangent back to the code table, (N, D)."""
    lo, hi, a = cache
    grad = np.zeros_like(codes.values)
    np.add.at(grad, lo, (1.0 - a)[:, None] * upstream)
    np.add.at(grad, hi, a[:, None] * upstream)
    return grad


class StaticField:
    """Background field: hash features + direction + volume feature -> MLP."""

    def __init__(self, grid, feat_dim, hidden=64, rng=None):
        self.grid = grid
        self.feat_dim = feat_dim
        in_dim = grid.output_dim + DIR_EMBED_DIM + feat_dim
        self.net = Mlp([in_dim, hidden, hidden, 4], rng=rng)

    def query(self, x, d, f, d_embed=None):
        """x: (B, 3) normalized positions, d: (B, 3) unit viewing directions,
        f: (B, C) volume features.  ``d_embed`` short-circuits the direction
        embedding when the caller already holds it (directions repeat per
        quadrature sample).  Returns (sigma (B,), rgb (B, 3), cache)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if d_embed is None:
            d = np.atleast_2d(np.asarray(d, dtype=np.float64))
            norms = np.linalg.norm(d, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("viewing directions must be unit length")
            d_embed = embed_direction(d)
        p = contract(x)
        enc, enc_cache = encode_with_cache(self.grid, p)
        inp = np.concatenate([enc, d_embed, np.atleast_2d(f)], axis=1)
        raw, net_cache = self.net.forward(inp)
        sigma = softplus(raw[:, 0])
        rgb = sigmoid(raw[:, 1:4])
        return sigma, rgb, (x, p, enc_cache, net_cache, raw)

    def backward(self, cache, dsigma, drgb):
        """Returns grads {"tables": (L,T,F), "w0", ...}; input gradients are
        not needed for the static field (geometry is fixed)."""
        x, p, enc_cache, net_cache, raw = cache
        draw = np.zeros_like(raw)
        draw[:, 0] = dsigma * sigmoid(raw[:, 0])
        s = sigmoid(raw[:, 1:4])
        draw[:, 1:4] = drgb * s * (1.0 - s)
        dinp, net_grads = self.net.backward(net_cache, draw)
        d_enc = dinp[:, :self.grid.output_dim]
        table_grads, _ = encode_grad(self.grid, p, d_enc, cache=enc_cache)
        return {"tables": table_grads, **net_grads}


class DynamicField:
    """Foreground field with scene flow and blending heads.

    Head layout of the raw 11-vector: flow_fw (0:3, linear), flow_bw (3:6,
    linear), sigma (6, softplus), rgb (7:10, sigmoid), blend (10, sigmoid).
    """

    FW = slice(0, 3)
    BW = slice(3, 6)
    SIGMA = 6
    RGB = slice(7, 10)
    BLEND = 10

    def __init__(self, grid, codes, feat_dim, hidden=64, rng=None):
        self.grid = grid
        self.codes = codes
        self.feat_dim = feat_dim
        in_dim = grid.output_dim + codes.dim + DIR_EMBED_DIM + feat_dim
        self.net = Mlp([in_dim, hidden, hidden, 11], rng=rng)
        self.net.zero_output_rows(list(range(6)))   # start at zero flow

    def query(self, x, d, t, f, d_embed=None):
        """Full dynamic query at scene-normalized positions.

        Returns (flow_fw, flow_bw, sigma, rgb, blend, cache).
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if d_embed is None:
            d = np.atleast_2d(np.asarray(d, dtype=np.float64))
            norms = np.linalg.norm(d, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("viewing directions must be unit length")
            d_embed = embed_direction(d)
        p = contract(x)
        enc, enc_cache = encode_with_cache(self.grid, p)
        code, code_cache = temporal_interp(self.codes, np.broadcast_to(t, (len(x),)))
        inp = np.concatenate([enc, code, d_embed, np.atleast_2d(f)], axis=1)
        raw, net_cache = self.net.forward(inp)
        out = (raw[:, self.FW], raw[:, self.BW], softplus(raw[:, self.SIGMA]),
               sigmoid(raw[:, self.RGB]), sigmoid(raw[:, self.BLEND]))
        return out + ((x, p, enc_cache, code_cache, net_cache, raw),)

    def warped_query(self, x, d, t, s_fw, s_bw, f_next, f_prev):
        """Color/density heads at the flow-displaced neighbor times.

        Evaluates the same network (all parameters shared with ``query``)
        at (x + s_fw, t+1) and (x - s_bw, t-1).  f_next/f_prev are the
        conditioning features at the displaced positions.  Raises when the
        neighbor time leaves the keyframe range, so callers must keep the
        training unit off the boundary timestamps.
        Returns ((rgb_next, sigma_next), (rgb_prev, sigma_prev)).
        """
        _, _, sig_n, rgb_n, _, _ = self.query(x + s_fw, d, t + 1, f_next)
        _, _, sig_p, rgb_p, _, _ = self.query(x - s_bw, d, t - 1, f_prev)
        return (rgb_n, sig_n), (rgb_p, sig_p)

    def backward(self, cache, dfw=None, dbw=None, dsigma=None, drgb=None,
                 dblend=None, want_dx=False):
        """Exact adjoint of ``query``.

        Returns (grads, dx, df) where grads holds {"tables", "codes", net
        params}; dx is the gradient w.r.t. the (normalized) query position
        (None unless ``want_dx``) and df w.r.t. the volume feature.
        """
        x, p, enc_cache, code_cache, net_cache, raw = cache
        B = raw.shape[0]
        draw = np.zeros_like(raw)
        if dfw is not None:
            draw[:, self.FW] = dfw
        if dbw is not None:
            draw[:, self.BW] = dbw
        if dsigma is not None:
            draw[:, self.SIGMA] = dsigma * sigmoid(raw[:, self.SIGMA])
        if drgb is not None:
            s = sigmoid(raw[:, self.RGB])
            draw[:, self.RGB] = drgb * s * (1.0 - s)
        if dblend is not None:
            b = sigmoid(raw[:, self.BLEND])
            draw[:, self.BLEND] = dblend * b * (1.0 - b)
        dinp, net_grads = self.net.backward(net_cache, draw)

        L = self.grid.output_dim
        D = self.codes.dim
        d_enc = dinp[:, :L]
        d_code = dinp[:, L:L + D]
        d_f = dinp[:, L + D + DIR_EMBED_DIM:]
        table_grads, dp = encode_grad(self.grid, p, d_enc, cache=enc_cache)
        code_grads = temporal_interp_vjp(self.codes, code_cache, d_code)
        dx = contract_vjp(x, dp) if want_dx else None
        grads = {"tables": table_grads, "codes": code_grads, **net_grads}
        return grads, dx, d_f
