"""Direct layer implementations used as oracles for lowered chains.

Nothing here touches the GCONV model; tensors are (B, C, H, W) numpy arrays
and conv weights use the usual (Noc, Nic/groups, Ky, Kx) layout.
"""

from __future__ import annotations

import numpy as np

from .errors import UnsupportedLayerError


def _pair(v):
    if isinstance(v, (list, tuple)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, w, stride=1, pad=0, groups=1):
    sy, sx = _pair(stride)
    py, px = _pair(pad)
    nb, nic, ny, nx = x.shape
    noc, icg, ky, kx = w.shape
    oy = (ny + 2 * py - ky) // sy + 1
    ox = (nx + 2 * px - kx) // sx + 1
    xp = np.zeros((nb, nic, ny + 2 * py, nx + 2 * px))
    xp[:, :, py:py + ny, px:px + nx] = x
    out = np.zeros((nb, noc, oy, ox))
    ocg = noc // groups
    for g in range(groups):
        xs = xp[:, g * icg:(g + 1) * icg]
        ws = w[g * ocg:(g + 1) * ocg]
        for i in range(ky):
            for j in range(kx):
                patch = xs[:, :, i:i + sy * (oy - 1) + 1:sy, j:j + sx * (ox - 1) + 1:sx]
                out[:, g * ocg:(g + 1) * ocg] += np.einsum("bcyx,oc->boyx", patch, ws[:, :, i, j])
    return out


def fully_connected(x, w):
    # w: (Noc, Nic, Niy, Nix)
    out = np.einsum("bcyx,ocyx->bo", x, w)
    return out[:, :, None, None]


def pool2d(x, window, stride=None, pad=0, mode="max"):
    ky, kx = _pair(window)
    sy, sx = _pair(stride if stride is not None else window)
    py, px = _pair(pad)
    nb, nc, ny, nx = x.shape
    oy = (ny + 2 * py - ky) // sy + 1
    ox = (nx + 2 * px - kx) // sx + 1
    fill = -np.inf if mode == "max" else 0.0
    xp = np.full((nb, nc, ny + 2 * py, nx + 2 * px), fill)
    xp[:, :, py:py + ny, px:px + nx] = x
    acc = np.full((nb, nc, oy, ox), fill)
    for i in range(ky):
        for j in range(kx):
            patch = xp[:, :, i:i + sy * (oy - 1) + 1:sy, j:j + sx * (ox - 1) + 1:sx]
            acc = np.maximum(acc, patch) if mode == "max" else acc + patch
    if mode == "max":
        return acc
    return acc / (ky * kx)


def lrn(x, local_size, alpha, beta, k):
    half = (local_size - 1) // 2
    nc = x.shape[1]
    sq = x * x
    out = np.empty_like(x)
    for c in range(nc):
        lo, hi = max(0, c - half), min(nc, c + half + 1)
        s = sq[:, lo:hi].sum(axis=1)
        out[:, c] = x[:, c] / (k + alpha * s / local_size) ** beta
    return out


def batch_norm_forward(x, eps):
    mu = x.mean(axis=0, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=0, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def batch_norm_backward(x, dy, eps):
    n = x.shape[0]
    mu = x.mean(axis=0, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return inv / n * (n * dy - dy.sum(axis=0, keepdims=True)
                      - xhat * (dy * xhat).sum(axis=0, keepdims=True))


def reference_layer(layer, inputs, params=None):
    """Evaluate ``layer`` directly.

    ``inputs`` is the list of input arrays (a backward batch_norm takes the
    forward input and the output gradient); ``params`` holds ``weight`` or
    ``gamma`` in the standard layouts.
    """
    p = layer.params
    params = params or {}
    kind = layer.kind
    x = np.asarray(inputs[0], dtype=np.float64)
    if kind == "conv":
        return conv2d(x, params["weight"], p.get("stride", 1), p.get("pad", 0), p.get("group", 1))
    if kind == "depthwise_conv":
        return conv2d(x, params["weight"], p.get("stride", 1), p.get("pad", 0), x.shape[1])
    if kind == "fully_connected":
        return fully_connected(x, params["weight"])
    if kind in ("max_pool", "avg_pool"):
        return pool2d(x, p["window"], p.get("stride"), p.get("pad", 0), kind[:3])
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "lrn":
        return lrn(x, int(p["local_size"]), p.get("alpha", 1e-4), p.get("beta", 0.75), p.get("k", 1))
    if kind == "batch_norm":
        if layer.mode == "backward":
            return batch_norm_backward(x, np.asarray(inputs[1], dtype=np.float64), p.get("eps", 1e-5))
        return batch_norm_forward(x, p.get("eps", 1e-5))
    if kind == "scale":
        return x * np.asarray(params["gamma"]).reshape(1, -1, 1, 1)
    if kind == "dropout_inference":
        return x * p.get("keep_prob", 0.5)
    if kind == "elementwise_add":
        return x + np.asarray(inputs[1], dtype=np.float64)
    if kind == "concat":
        return np.concatenate([np.asarray(a, dtype=np.float64) for a in inputs], axis=1)
    raise UnsupportedLayerError(f"no reference implementation for {kind!r}")


def reference_network(net, inputs, params=None, order=None):
    """Evaluate every layer of ``net`` directly; returns arrays keyed by layer id.

    ``params`` maps layer id to its ``{"weight": ..., "gamma": ...}`` dict.
    ``order`` is a topological layer order (defaults to the listed order).
    """
    params = params or {}
    values = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    layers = {l.id: l for l in net.layers}
    for layer in order or net.layers:
        if layer.kind == "batch_norm" and layer.mode == "backward":
            fwd = layers[layer.inputs[0]]
            args = [values[fwd.inputs[0]], values[layer.inputs[1]]]
        else:
            args = [values[i] for i in layer.inputs]
        values[layer.id] = reference_layer(layer, args, params.get(layer.id))
    return values
