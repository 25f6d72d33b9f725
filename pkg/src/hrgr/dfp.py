"""Differentiable feature partition.

Soft k-means over a feature map: pixel coordinates are appended to the
features, a pointwise affine + GeLU block reduces the channels, centres
start as grid-cell means, and ``n_iter`` rounds of soft assignment and
weighted-mean updates follow.  All pieces come as ``*_fwd``/``*_vjp``
pairs so the whole unrolled loop can be differentiated.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .autodiff import DiffOp
from .tensor import ShapeError, matmul

__all__ = [
    "DfpConfig",
    "ChannelReducer",
    "gelu",
    "gelu_grad",
    "append_coords",
    "reduce_channels",
    "grid_factorization",
    "grid_labels",
    "init_centers_grid",
    "association",
    "update_centers",
    "hard_assign",
    "soft_cluster",
    "run_dfp",
    "reduce_channels_op",
    "init_centers_grid_op",
    "association_op",
    "update_centers_op",
    "run_dfp_op",
]

PARTITION_MODES = {"soft-dfp": "soft-dfp", "dfp": "soft-dfp",
                   "regular-grid": "regular-grid", "grid": "regular-grid"}

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class DfpConfig:
    """Partition settings.

    ``coord_scale=None`` scales pixel coordinates by ``sqrt(m / (h*w))``,
    i.e. one unit per expected region width.
    """

    n_regions: int = 64
    n_iter: int = 5
    coord_scale: float | None = None
    use_coords: bool = True
    partition_mode: str = "soft-dfp"
    epsilon: float = 1e-8
    backprop_iters: int | None = None

    def __post_init__(self):
        if self.n_regions < 1:
            raise ValueError(f"n_regions must be >= 1, got {self.n_regions}")
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.partition_mode not in PARTITION_MODES:
            raise ValueError(f"unknown partition_mode {self.partition_mode!r}")
        self.partition_mode = PARTITION_MODES[self.partition_mode]
        if self.backprop_iters is not None and self.backprop_iters < 0:
            raise ValueError("backprop_iters must be >= 0")

    def scale_for(self, h, w):
        if self.coord_scale is not None:
            return float(self.coord_scale)
        return math.sqrt(self.n_regions / (h * w))


@dataclass
class ChannelReducer:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, c_in, c_out, rng=None):
        if not c_out < c_in:
            raise ValueError(f"reducer must shrink channels, got {c_in} -> {c_out}")
        rng = np.random.default_rng(rng)
        bound = 1.0 / math.sqrt(c_in)
        return cls(rng.uniform(-bound, bound, size=(c_in, c_out)), np.zeros(c_out))

    @property
    def in_channels(self):
        return self.weight.shape[0]

    @property
    def out_channels(self):
        return self.weight.shape[1]


def gelu(x):
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _flat(f):
    f = np.asarray(f)
    if f.ndim == 3:
        return f.reshape(-1, f.shape[2])
    if f.ndim == 2:
        return f
    raise ShapeError(f"expected a feature map or matrix, got shape {f.shape}")


def append_coords(f, scale=1.0, normalize=False):
    """Append ``scale * x`` and ``scale * y`` channels to an ``h x w x c`` map.

    With ``normalize`` the raw column/row indices are first divided by
    ``w - 1`` and ``h - 1`` (size-1 axes map to 0).
    """
    f = np.asarray(f)
    if f.ndim != 3:
        raise ShapeError(f"expected h x w x c, got {f.shape}")
    if not math.isfinite(scale):
        raise ValueError("coordinate scale must be finite")
    h, w, c = f.shape
    dtype = f.dtype if np.issubdtype(f.dtype, np.floating) else np.float64
    xs = np.arange(w, dtype=dtype)
    ys = np.arange(h, dtype=dtype)
    if normalize:
        xs = xs / (w - 1) if w > 1 else np.zeros_like(xs)
        ys = ys / (h - 1) if h > 1 else np.zeros_like(ys)
    out = np.empty((h, w, c + 2), dtype=dtype)
    out[..., :c] = f
    out[..., c] = scale * xs[None, :]
    out[..., c + 1] = scale * ys[:, None]
    return out


def reduce_channels_fwd(f, weight, bias):
    shape = np.shape(f)
    x = _flat(f)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"reducer expects {weight.shape[0]} input channels, got {x.shape[1]}"
        )
    z = matmul(x, weight) + bias[None, :]
    out = gelu(z)
    return out.reshape(shape[:-1] + (weight.shape[1],)), (shape, x, weight, z)


def reduce_channels_vjp(cache, g):
    shape, x, weight, z = cache
    gz = g.reshape(z.shape) * gelu_grad(z)
    gx = matmul(gz, weight.T).reshape(shape)
    gw = matmul(x.T, gz)
    gb = gz.sum(axis=0)
    return gx, gw, gb


def reduce_channels(f, phi):
    """Pointwise ``GeLU(f W + b)``."""
    return reduce_channels_fwd(f, phi.weight, phi.bias)[0]


def grid_factorization(m, h, w):
    """Pick ``(g_h, g_w)`` with ``g_h * g_w == m`` closest in aspect to ``h / w``."""
    if m > h * w:
        raise ValueError(f"{m} regions requested for only {h * w} elements")
    best = None
    for gh in range(1, m + 1):
        if m % gh:
            continue
        gw = m // gh
        if gh > h or gw > w:
            continue
        score = abs(gh / gw - h / w)
        if best is None or score < best[0]:
            best = (score, gh, gw)
    if best is None:
        raise ValueError(f"{m} regions cannot tile a {h}x{w} map as a grid")
    return best[1], best[2]


def _cell_bounds(size, cells):
    return [(i * size) // cells for i in range(cells + 1)]


def grid_labels(h, w, m):
    """1-based row-major grid-cell labels for an ``h x w`` map."""
    gh, gw = grid_factorization(m, h, w)
    ys = np.searchsorted(_cell_bounds(h, gh), np.arange(h), side="right") - 1
    xs = np.searchsorted(_cell_bounds(w, gw), np.arange(w), side="right") - 1
    return (ys[:, None] * gw + xs[None, :] + 1).astype(np.uint32)


def _one_hot(labels, m, dtype=np.float64):
    flat = np.asarray(labels).reshape(-1).astype(np.int64) - 1
    out = np.zeros((flat.size, m), dtype=dtype)
    out[np.arange(flat.size), flat] = 1.0
    return out


def init_centers_grid_fwd(f, m):
    f = np.asarray(f)
    if f.ndim != 3:
        raise ShapeError(f"expected h x w x c, got {f.shape}")
    h, w, _ = f.shape
    labels = grid_labels(h, w, m).reshape(-1).astype(np.int64) - 1
    x = f.reshape(h * w, -1)
    counts = np.bincount(labels, minlength=m).astype(f.dtype)
    sums = np.zeros((m, x.shape[1]), dtype=f.dtype)
    np.add.at(sums, labels, x)
    return sums / counts[:, None], (f.shape, labels, counts)


def init_centers_grid_vjp(cache, g):
    shape, labels, counts = cache
    gx = (g / counts[:, None])[labels]
    return (gx.reshape(shape),)


def init_centers_grid(f, m):
    """Mean of ``f`` inside each of ``m`` grid cells, row-major."""
    return init_centers_grid_fwd(f, m)[0]


def association_fwd(f, centers, beta=1.0):
    e = _flat(f)
    r = np.asarray(centers)
    if e.shape[1] != r.shape[1]:
        raise ShapeError(f"feature channels {e.shape[1]} != centre channels {r.shape[1]}")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(r))):
        raise FloatingPointError("association: non-finite features or centres")
    sq = np.sum((e[:, None, :] - r[None, :, :]) ** 2, axis=2)
    shifted = sq - sq.min(axis=1, keepdims=True)
    ex = np.exp(-beta * shifted)
    d = ex / ex.sum(axis=1, keepdims=True)
    return d, (np.shape(f), e, r, d, beta)


def association_vjp(cache, g):
    shape, e, r, d, beta = cache
    glogit = d * (g - np.sum(g * d, axis=1, keepdims=True))
    gs = -beta * glogit
    ge = 2.0 * (e * gs.sum(axis=1)[:, None] - matmul(gs, r))
    gr = 2.0 * (r * gs.sum(axis=0)[:, None] - matmul(gs.T, e))
    return ge.reshape(shape), gr


def association(f, centers, beta=1.0):
    """Soft assignment ``D(i, j) = softmax_j(-beta * ||e_i - r_j||^2)``."""
    return association_fwd(f, centers, beta)[0]


def update_centers_fwd(d, f, epsilon=1e-8):
    x = _flat(f)
    d = np.asarray(d)
    if d.shape[0] != x.shape[0]:
        raise ShapeError(f"association has {d.shape[0]} rows, features have {x.shape[0]}")
    dtf = matmul(d.T, x)
    denom = d.sum(axis=0) + epsilon
    return dtf / denom[:, None], (np.shape(f), d, x, dtf, denom)


def update_centers_vjp(cache, g):
    shape, d, x, dtf, denom = cache
    gdtf = g / denom[:, None]
    gn = -np.sum(g * dtf, axis=1) / (denom * denom)
    gd = matmul(x, gdtf.T) + gn[None, :]
    gx = matmul(d, gdtf)
    return gd, gx.reshape(shape)


def update_centers(d, f, epsilon=1e-8):
    """Column-weighted means ``(D^T F) / (colsum(D) + epsilon)``."""
    return update_centers_fwd(d, f, epsilon)[0]


def hard_assign(d):
    """1-based argmax per row; ties go to the lowest column."""
    return (np.argmax(np.asarray(d), axis=1) + 1).astype(np.uint32)


def soft_cluster_fwd(f2, r0, n_iter, epsilon=1e-8):
    """Unrolled soft k-means from initial centres ``r0``.

    Returns the association computed against the final centres, the final
    centres and the per-iteration caches.
    """
    x = _flat(f2)
    r = r0
    caches = []
    for _ in range(n_iter):
        d, ac = association_fwd(x, r)
        r, uc = update_centers_fwd(d, x, epsilon)
        caches.append((ac, uc))
    d, final = association_fwd(x, r)
    return d, r, (caches, final)


def soft_cluster_vjp(cache, gd, gr, backprop_iters=None):
    caches, final = cache
    x = final[1]
    gx = np.zeros_like(x)
    gr = np.zeros_like(final[2]) if gr is None else gr.copy()
    if gd is not None:
        ge, gr_final = association_vjp(final, gd)
        gx += ge
        gr += gr_final
    steps = len(caches) if backprop_iters is None else min(backprop_iters, len(caches))
    for ac, uc in reversed(caches[len(caches) - steps:]):
        gdt, gxu = update_centers_vjp(uc, gr)
        gx += gxu
        ge, gr = association_vjp(ac, gdt)
        gx += ge
    if steps < len(caches):
        gr = None
    return gx, gr


def soft_cluster(f2, r0, n_iter, epsilon=1e-8):
    d, r, _ = soft_cluster_fwd(f2, r0, n_iter, epsilon)
    return d, r


def run_dfp_fwd(f, weight, bias, cfg):
    f = np.asarray(f)
    if f.ndim != 3:
        raise ShapeError(f"expected h x w x c, got {f.shape}")
    h, w, c = f.shape
    m = cfg.n_regions
    if m > h * w:
        raise ValueError(f"{m} regions requested for only {h * w} elements")
    fp = append_coords(f, cfg.scale_for(h, w)) if cfg.use_coords else f
    f2, rc = reduce_channels_fwd(fp, weight, bias)
    if cfg.partition_mode == "regular-grid":
        labels = grid_labels(h, w, m)
        d = _one_hot(labels, m, dtype=f2.dtype)
        r, ic = init_centers_grid_fwd(f2, m)
        return (d, r, labels), ("grid", c, rc, ic)
    r0, ic = init_centers_grid_fwd(f2, m)
    d, r, sc = soft_cluster_fwd(f2, r0, cfg.n_iter, cfg.epsilon)
    labels = hard_assign(d).reshape(h, w)
    return (d, r, labels), ("soft", c, rc, ic, sc, cfg.backprop_iters)


def run_dfp_vjp(cache, gd, gr, glabels=None):
    mode, c, rc, ic = cache[:4]
    if mode == "grid":
        if gr is None:
            return None, None, None
        (gf2,) = init_centers_grid_vjp(ic, gr)
    else:
        sc, backprop_iters = cache[4:]
        if gd is None and gr is None:
            return None, None, None
        gx, gr0 = soft_cluster_vjp(sc, gd, gr, backprop_iters)
        gf2 = gx.reshape(ic[0])
        if gr0 is not None:
            gf2 = gf2 + init_centers_grid_vjp(ic, gr0)[0]
    gfp, gw, gb = reduce_channels_vjp(rc, gf2)
    return gfp[..., :c], gw, gb


def run_dfp(f, phi, cfg):
    """Partition ``f`` into ``cfg.n_regions`` regions.

    Returns ``(D, centers, labels)`` with ``D`` the ``n x m`` soft
    association, ``centers`` the ``m x c''`` reduced-space centres and
    ``labels`` the ``h x w`` 1-based hard assignment.
    """
    return run_dfp_fwd(f, phi.weight, phi.bias, cfg)[0]


def _op(name, fwd, vjp, n_in, n_out=1):
    def forward(*args):
        out, cache = fwd(*args)
        return (out if n_out > 1 else (out,)), cache

    return DiffOp(name, forward, vjp, n_in, n_out)


def reduce_channels_op():
    return _op("reduce_channels", reduce_channels_fwd, reduce_channels_vjp, 3)


def init_centers_grid_op(m):
    return _op("init_centers_grid", lambda f: init_centers_grid_fwd(f, m),
               init_centers_grid_vjp, 1)


def association_op(beta=1.0):
    return _op("association", lambda f, r: association_fwd(f, r, beta),
               association_vjp, 2)


def update_centers_op(epsilon=1e-8):
    return _op("update_centers", lambda d, f: update_centers_fwd(d, f, epsilon),
               update_centers_vjp, 2)


def run_dfp_op(cfg, name="run_dfp"):
    """``(f, W_phi, b_phi) -> (D, centers, labels)``."""
    return _op(name, lambda f, w, b: run_dfp_fwd(f, w, b, cfg), run_dfp_vjp, 3, 3)
