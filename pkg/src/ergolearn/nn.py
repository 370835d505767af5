"""Minimal numpy neural-net layers with explicit parameters.

Layers are stateless shape descriptors; parameters live in plain dicts
({"W": ..., "b": ...}) so snapshots are cheap to copy, serialize, and
finite-difference. forward() returns (output, cache); backward() consumes
the cache and returns (input gradient, parameter gradients) with the same
dict structure as the parameters.

Convolutions use valid padding. A ConvTranspose2d built with the input
height/width of a matching Conv2d is its exact adjoint, so encoder conv
stacks can be mirrored exactly (rows a strided conv never reads come back
as bias-only rows).
"""

import math

import numpy as np

__all__ = [
    "Conv2d",
    "ConvTranspose2d",
    "Dense",
    "adam_init",
    "adam_step",
    "operator_norm",
    "tree_leaves",
    "tree_map",
]


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """(B, C, H, W) -> contiguous (B, Ho, Wo, C, k, k) sliding windows."""
    v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5))


def _col2im(cols: np.ndarray, out_shape, k: int, s: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (B, Ho, Wo, C, k, k) windows."""
    B, Ho, Wo = cols.shape[:3]
    out = np.zeros(out_shape, dtype=cols.dtype)
    gc = cols.transpose(0, 3, 1, 2, 4, 5)  # (B, C, Ho, Wo, k, k)
    for di in range(k):
        for dj in range(k):
            out[:, :, di : di + s * Ho : s, dj : dj + s * Wo : s] += gc[..., di, dj]
    return out


class Dense:
    def __init__(self, n_in: int, n_out: int, relu: bool = False):
        self.n_in = n_in
        self.n_out = n_out
        self.relu = relu

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict:
        W = rng.normal(0.0, 1.0 / math.sqrt(self.n_in), size=(self.n_out, self.n_in))
        return {"W": W.astype(dtype), "b": np.zeros(self.n_out, dtype=dtype)}

    def forward(self, p: dict, x: np.ndarray):
        y = x @ p["W"].T + p["b"]
        mask = None
        if self.relu:
            mask = y > 0
            y = y * mask
        return y, (x, mask)

    def backward(self, p: dict, cache, gy: np.ndarray):
        x, mask = cache
        if mask is not None:
            gy = gy * mask
        gW = gy.T @ x
        gb = gy.sum(axis=0)
        gx = gy @ p["W"]
        return gx, {"W": gW, "b": gb}

    def matvec(self, p: dict, x: np.ndarray) -> np.ndarray:
        return p["W"] @ x

    def rmatvec(self, p: dict, y: np.ndarray) -> np.ndarray:
        return p["W"].T @ y

    def in_shape(self):
        return (self.n_in,)


class Conv2d:
    """Valid-padding strided convolution on (B, C, H, W)."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int, relu: bool = False):
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.stride = stride
        self.relu = relu
        self.input_hw = None  # recorded by the architecture builder

    def out_hw(self, hw):
        return ((hw[0] - self.k) // self.stride + 1, (hw[1] - self.k) // self.stride + 1)

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict:
        fan_in = self.c_in * self.k * self.k
        W = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(self.c_out, self.c_in, self.k, self.k))
        return {"W": W.astype(dtype), "b": np.zeros(self.c_out, dtype=dtype)}

    def forward(self, p: dict, x: np.ndarray):
        cols = _im2col(x, self.k, self.stride)
        y = np.tensordot(cols, p["W"], axes=([3, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, c_out)
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + p["b"][None, :, None, None]
        mask = None
        if self.relu:
            mask = y > 0
            y = y * mask
        return y, (x.shape, cols, mask)

    def backward(self, p: dict, cache, gy: np.ndarray):
        x_shape, cols, mask = cache
        if mask is not None:
            gy = gy * mask
        g = gy.transpose(0, 2, 3, 1)  # (B, Ho, Wo, c_out)
        gW = np.tensordot(g, cols, axes=([0, 1, 2], [0, 1, 2]))
        gb = g.sum(axis=(0, 1, 2))
        gcols = np.tensordot(g, p["W"], axes=([3], [0]))  # (B, Ho, Wo, c_in, k, k)
        gx = _col2im(gcols, x_shape, self.k, self.stride)
        return gx, {"W": gW, "b": gb}

    def matvec(self, p: dict, x: np.ndarray) -> np.ndarray:
        cols = _im2col(x[None], self.k, self.stride)
        y = np.tensordot(cols, p["W"], axes=([3, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))[0]

    def rmatvec(self, p: dict, y: np.ndarray) -> np.ndarray:
        g = y[None].transpose(0, 2, 3, 1)
        gcols = np.tensordot(g, p["W"], axes=([3], [0]))
        return _col2im(gcols, (1, self.c_in) + tuple(self.input_hw), self.k, self.stride)[0]

    def in_shape(self):
        return (self.c_in,) + tuple(self.input_hw)


class ConvTranspose2d:
    """Exact adjoint of a valid-padding strided convolution.

    out_hw is fixed at construction (the mirrored Conv2d's input size), so
    any stride leftovers become bias-only output rows/columns.
    """

    def __init__(self, c_in: int, c_out: int, k: int, stride: int, out_hw, relu: bool = False):
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.stride = stride
        self.out_hw = tuple(out_hw)
        self.relu = relu
        self.input_hw = None

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict:
        fan_in = self.c_in * self.k * self.k
        W = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(self.c_out, self.c_in, self.k, self.k))
        return {"W": W.astype(dtype), "b": np.zeros(self.c_out, dtype=dtype)}

    def forward(self, p: dict, x: np.ndarray):
        B = x.shape[0]
        xt = x.transpose(0, 2, 3, 1)  # (B, Hi, Wi, c_in)
        cols = np.tensordot(xt, p["W"], axes=([3], [1]))  # (B, Hi, Wi, c_out, k, k)
        y = _col2im(cols, (B, self.c_out) + self.out_hw, self.k, self.stride)
        y += p["b"][None, :, None, None]
        mask = None
        if self.relu:
            mask = y > 0
            y = y * mask
        return y, (xt, mask)

    def backward(self, p: dict, cache, gy: np.ndarray):
        xt, mask = cache
        if mask is not None:
            gy = gy * mask
        gcols = _im2col(gy, self.k, self.stride)  # (B, Hi, Wi, c_out, k, k)
        gx = np.tensordot(gcols, p["W"], axes=([3, 4, 5], [0, 2, 3]))  # (B, Hi, Wi, c_in)
        gW = np.tensordot(gcols, xt, axes=([0, 1, 2], [0, 1, 2]))  # (c_out, k, k, c_in)
        gW = np.ascontiguousarray(gW.transpose(0, 3, 1, 2))
        gb = gy.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), {"W": gW, "b": gb}

    def matvec(self, p: dict, x: np.ndarray) -> np.ndarray:
        xt = x[None].transpose(0, 2, 3, 1)
        cols = np.tensordot(xt, p["W"], axes=([3], [1]))
        return _col2im(cols, (1, self.c_out) + self.out_hw, self.k, self.stride)[0]

    def rmatvec(self, p: dict, y: np.ndarray) -> np.ndarray:
        gcols = _im2col(y[None], self.k, self.stride)
        gx = np.tensordot(gcols, p["W"], axes=([3, 4, 5], [0, 2, 3]))
        return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))[0]

    def in_shape(self):
        return (self.c_in,) + tuple(self.input_hw)


def operator_norm(layer, p: dict, iters: int = 50, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value of a layer's linear map via power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=layer.in_shape())
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    v /= nv
    sigma = 0.0
    for _ in range(iters):
        u = layer.matvec(p, v)
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        v = layer.rmatvec(p, u / nu)
        nv = np.linalg.norm(v)
        if abs(nv - sigma) <= tol * max(sigma, 1.0):
            return float(nv)
        sigma = nv
        v = v / nv
    return float(sigma)


def tree_map(f, tree):
    """Apply f to every ndarray leaf of a nested dict/list structure."""
    if isinstance(tree, dict):
        return {k: tree_map(f, v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [tree_map(f, v) for v in tree]
    return f(tree)


def tree_leaves(tree, prefix=""):
    """Flatten to [(path, ndarray)] pairs in deterministic order."""
    out = []
    if isinstance(tree, dict):
        for k in sorted(tree):
            out.extend(tree_leaves(tree[k], f"{prefix}{k}."))
    elif isinstance(tree, list):
        for i, v in enumerate(tree):
            out.extend(tree_leaves(v, f"{prefix}{i}."))
    else:
        out.append((prefix[:-1], tree))
    return out


def adam_init(params_tree) -> dict:
    zeros = tree_map(np.zeros_like, params_tree)
    return {"m": zeros, "v": tree_map(np.zeros_like, params_tree), "t": 0}


def adam_step(params_tree, grads_tree, state: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update (minimization). Returns (new params, new state)."""
    t = state["t"] + 1
    b1c = 1.0 - beta1**t
    b2c = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}

    def rec(p, g, m, v):
        if isinstance(p, dict):
            out = ({}, {}, {})
            for k in p:
                a, b, c = rec(p[k], g[k], m[k], v[k])
                out[0][k], out[1][k], out[2][k] = a, b, c
            return out
        if isinstance(p, list):
            cols = [rec(pi, gi, mi, vi) for pi, gi, mi, vi in zip(p, g, m, v)]
            return [c[0] for c in cols], [c[1] for c in cols], [c[2] for c in cols]
        m2 = beta1 * m + (1.0 - beta1) * g
        v2 = beta2 * v + (1.0 - beta2) * (g * g)
        step = lr * (m2 / b1c) / (np.sqrt(v2 / b2c) + eps)
        return p - step, m2, v2

    new_p, new_m, new_v = rec(params_tree, grads_tree, state["m"], state["v"])
    return new_p, {"m": new_m, "v": new_v, "t": t}
