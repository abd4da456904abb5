"""Bidirectional LSTM regressor with hand-written backpropagation through time.

All tensors are float64 numpy arrays held in an ordered ``dict`` keyed by
stable names::

    lstm{layer}.{fwd|bwd}.w_x   (input_size, 4H)
    lstm{layer}.{fwd|bwd}.w_h   (H, 4H)
    lstm{layer}.{fwd|bwd}.b     (4H,)
    dense.w, dense.b            (2H + n_static, D), (D,)
    out.w, out.b                (D, 3), (3,)

Gate blocks along the ``4H`` axis are ordered input, forget, cell, output.
Sequences are batch-major, ``(B, T, features)``, with a ``(B, T)`` validity
mask; masked steps leave both recurrent states untouched.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

FORMAT_VERSION = 1
DIRECTIONS = ("fwd", "bwd")


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 1
    hidden: int = 160
    layers: int = 3
    n_static: int = 2
    dense: int = 64
    outputs: int = 3

    @property
    def feature_size(self) -> int:
        return 2 * self.hidden + self.n_static


def sigmoid(z):
    # tanh form: never overflows
    return 0.5 * np.tanh(0.5 * z) + 0.5


def softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def tensor_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.hidden
    shapes = {}
    for layer in range(cfg.layers):
        in_size = cfg.input_size if layer == 0 else 2 * H
        for d in DIRECTIONS:
            shapes[f"lstm{layer}.{d}.w_x"] = (in_size, 4 * H)
            shapes[f"lstm{layer}.{d}.w_h"] = (H, 4 * H)
            shapes[f"lstm{layer}.{d}.b"] = (4 * H,)
    shapes["dense.w"] = (cfg.feature_size, cfg.dense)
    shapes["dense.b"] = (cfg.dense,)
    shapes["out.w"] = (cfg.dense, cfg.outputs)
    shapes["out.b"] = (cfg.outputs,)
    return shapes


def parameter_count(cfg: ArchConfig) -> int:
    return sum(math.prod(s) for s in tensor_shapes(cfg).values())


def init_params(cfg: ArchConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Weight matrices ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); LSTM forget bias 1, other biases 0."""
    params = {}
    H = cfg.hidden
    for name, shape in tensor_shapes(cfg).items():
        if len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
            if name.startswith("lstm"):
                params[name][H:2 * H] = 1.0
    return params


# -- LSTM ------------------------------------------------------------------

def lstm_cell_step(x_t, h_prev, c_prev, w_x, w_h, b):
    """One LSTM step; works on single vectors or on (B, ·) batches."""
    H = w_h.shape[0]
    z = x_t @ w_x + h_prev @ w_h + b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


def _gate_affine(H):
    scale = np.full(4 * H, 0.5)
    scale[2 * H:3 * H] = 1.0
    offset = np.full(4 * H, 0.5)
    offset[2 * H:3 * H] = 0.0
    return scale, offset


def _lstm_direction_forward(x, mask, w_x, w_h, b, reverse):
    # recurrent buffers are time-major (T, B, .) so every step touches contiguous memory
    B, T, _ = x.shape
    H = w_h.shape[0]
    xw = np.ascontiguousarray((x @ w_x + b).transpose(1, 0, 2))  # (T, B, 4H)
    mask_t = np.ascontiguousarray(mask.T)[:, :, None]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    gates = np.empty((T, B, 4 * H))  # activated i, f, g, o
    h_prev = np.empty((T, B, H))
    c_prev = np.empty((T, B, H))
    tanh_c = np.empty((T, B, H))
    out = np.empty((T, B, H))
    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so all four gates take one tanh call
    scale, offset = _gate_affine(H)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = xw[t]
        z += h @ w_h
        z *= scale
        a = gates[t]
        np.tanh(z, out=a)
        a *= scale
        a += offset
        i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        h_prev[t] = h
        c_prev[t] = c
        c_new = f * c + i * g
        tc = np.tanh(c_new, out=tanh_c[t])
        h_new = o * tc
        m = mask_t[t]
        h = np.where(m, h_new, h)
        c = np.where(m, c_new, c)
        out[t] = h
    cache = (x, mask_t, gates, h_prev, c_prev, tanh_c, reverse)
    return out.transpose(1, 0, 2), h, cache


def _lstm_direction_backward(d_out, cache, w_x, w_h):
    """Backprop through one direction; ``d_out`` is dL/d(state after each step), (B, T, H)."""
    x, mask_t, gates, h_prev, c_prev, tanh_c, reverse = cache
    B, T, _ = x.shape
    H = w_h.shape[0]
    d_out = np.ascontiguousarray(d_out.transpose(1, 0, 2))
    dz_all = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    w_h_T = w_h.T
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        m = mask_t[t]
        dh = d_out[t] + dh_next
        a = gates[t]
        i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        tc = tanh_c[t]
        dh_new = np.where(m, dh, 0.0)
        dc_new = np.where(m, dc_next, 0.0) + dh_new * o * (1.0 - tc * tc)
        dz = dz_all[t]
        dz[:, :H] = dc_new * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc_new * c_prev[t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc_new * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh_new * tc * o * (1.0 - o)
        dh_next = dz @ w_h_T + np.where(m, 0.0, dh)
        dc_next = dc_new * f + np.where(m, 0.0, dc_next)
    flat_dz = dz_all.reshape(T * B, 4 * H)
    x_t = x.transpose(1, 0, 2).reshape(T * B, -1)
    grads = {
        "w_x": x_t.T @ flat_dz,
        "w_h": h_prev.reshape(T * B, H).T @ flat_dz,
        "b": flat_dz.sum(axis=0),
    }
    dx = (flat_dz @ w_x.T).reshape(T, B, -1).transpose(1, 0, 2)
    return dx, grads


def dropout(x, rate, rng):
    """Inverted dropout: kept units are scaled by 1/(1-rate). Returns (output, scaled mask)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def bilstm_forward(x, static, mask, params, cfg: ArchConfig, dropout_rate=0.0, training=False, rng=None):
    """Stacked BiLSTM encoder. Returns ``(features, cache)``.

    ``features`` is ``[h_fwd_final, h_bwd_final, static]`` of shape (B, 2H + n_static).
    Dropout acts on the outputs passed between LSTM layers, in training mode only.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[2] != cfg.input_size:
        raise ValueError(f"expected input of shape (B, T, {cfg.input_size}), got {x.shape}")
    B, T, _ = x.shape
    mask = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    static = np.asarray(static, dtype=float)
    if mask.shape != (B, T) or static.shape != (B, cfg.n_static):
        raise ValueError("mask/static shapes inconsistent with the input batch")
    layer_caches = []
    drop_masks = []
    inp = x
    for layer in range(cfg.layers):
        if layer > 0 and training and dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            inp, keep = dropout(inp, dropout_rate, rng)
        else:
            keep = None
        drop_masks.append(keep)
        outs, finals, caches = [], [], []
        for d in DIRECTIONS:
            p = f"lstm{layer}.{d}."
            out, h_final, cache = _lstm_direction_forward(
                inp, mask, params[p + "w_x"], params[p + "w_h"], params[p + "b"], reverse=(d == "bwd"))
            outs.append(out)
            finals.append(h_final)
            caches.append(cache)
        layer_caches.append(caches)
        inp = np.concatenate(outs, axis=2)
    features = np.concatenate(finals + [static], axis=1)
    return features, (layer_caches, drop_masks, (B, T))


def head_forward(features, params):
    """Dense(ReLU) then linear output; returns ``(theta_hat, cache)``.

    Columns of ``theta_hat``: sigmoid -> p_tran, softplus -> c_rate, softplus -> R0.
    """
    a1 = features @ params["dense.w"] + params["dense.b"]
    r = np.maximum(a1, 0.0)
    z = r @ params["out.w"] + params["out.b"]
    theta = np.empty_like(z)
    theta[:, 0] = sigmoid(z[:, 0])
    theta[:, 1:] = softplus(z[:, 1:])
    return theta, (features, a1, r, z, theta)


def forward(x, static, mask, params, cfg, dropout_rate=0.0, training=False, rng=None):
    features, enc_cache = bilstm_forward(x, static, mask, params, cfg, dropout_rate, training, rng)
    theta, head_cache = head_forward(features, params)
    return theta, (enc_cache, head_cache)


def backward(d_theta, cache, params, cfg: ArchConfig):
    """Gradients of a scalar loss w.r.t. every tensor, given dL/d(theta_hat)."""
    (layer_caches, drop_masks, (B, T)), (features, a1, r, z, theta) = cache
    H = cfg.hidden
    grads = {}
    dz = np.empty_like(d_theta)
    dz[:, 0] = d_theta[:, 0] * theta[:, 0] * (1.0 - theta[:, 0])
    dz[:, 1:] = d_theta[:, 1:] * sigmoid(z[:, 1:])  # softplus' = sigmoid
    grads["out.w"] = r.T @ dz
    grads["out.b"] = dz.sum(axis=0)
    da1 = (dz @ params["out.w"].T) * (a1 > 0)
    grads["dense.w"] = features.T @ da1
    grads["dense.b"] = da1.sum(axis=0)
    d_features = da1 @ params["dense.w"].T

    # final states: forward direction ends at t = T-1, backward at t = 0;
    # the carried state at those positions equals the last valid state
    d_out = np.zeros((B, T, 2 * H))
    d_out[:, T - 1, :H] = d_features[:, :H]
    d_out[:, 0, H:] += d_features[:, H:2 * H]
    for layer in range(cfg.layers - 1, -1, -1):
        d_in = None
        for k, d in enumerate(DIRECTIONS):
            p = f"lstm{layer}.{d}."
            dx, g = _lstm_direction_backward(
                d_out[:, :, k * H:(k + 1) * H], layer_caches[layer][k], params[p + "w_x"], params[p + "w_h"])
            for key, val in g.items():
                grads[p + key] = val
            d_in = dx if d_in is None else d_in + dx
        keep = drop_masks[layer]
        if keep is not None:
            d_in = d_in * keep
        d_out = d_in
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
    return {name: grads[name] for name in params}


# -- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2.77e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict | None = None
    v: dict | None = None


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if state.m is None:
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- weight files ------------------------------------------------------------

def params_to_doc(params, cfg: ArchConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "architecture": asdict(cfg),
        "tensors": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.items()},
    }


def params_from_doc(doc: dict):
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported weight format_version: {doc.get('format_version') if isinstance(doc, dict) else doc!r}")
    try:
        cfg = ArchConfig(**doc["architecture"])
        expected = tensor_shapes(cfg)
        tensors = doc["tensors"]
        if set(tensors) != set(expected):
            raise ValueError("tensor names do not match the architecture")
        params = {}
        for name, shape in expected.items():
            t = tensors[name]
            if tuple(t["shape"]) != shape:
                raise ValueError(f"tensor {name!r} has shape {t['shape']}, expected {list(shape)}")
            arr = np.array(t["values"], dtype=float)
            if arr.size != math.prod(shape):
                raise ValueError(f"tensor {name!r} has {arr.size} values, expected {math.prod(shape)}")
            params[name] = arr.reshape(shape)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed weight document: {exc}") from exc
    return params, cfg


def save_weights(params, cfg, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_doc(params, cfg), fh)


def load_weights(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a valid weight file ({exc})") from exc
    return params_from_doc(doc)
