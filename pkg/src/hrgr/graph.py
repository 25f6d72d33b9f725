"""Region nodes and the hierarchical adjacency matrix.

Per-layer hard label maps get disjoint global indices, are resized to the
finest layer's resolution and stacked into an ``h x w x k`` volume.  A
3x3x3 window over that volume links every pair of differing labels it
sees.  :func:`build_adjacency_oracle` is the literal loop;
:func:`build_adjacency_parallel` computes the same matrix with vectorised
shifted comparisons over row bands, one band per worker thread.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from .autodiff import DiffOp
from .dfp import update_centers_fwd, update_centers_vjp
from .tensor import ShapeError, matmul, resize_nearest_index

__all__ = [
    "StackedIndexVolume",
    "aggregate_nodes",
    "stack_index_maps",
    "window_offsets",
    "build_adjacency_oracle",
    "build_adjacency_parallel",
    "fully_connected_adjacency",
    "edge_list",
    "project_nodes",
    "aggregate_nodes_op",
    "project_nodes_op",
    "default_threads",
]

HIERARCHY_MODES = ("inter", "intra")


def default_threads():
    """Thread count from ``HRGR_THREADS``, else 1."""
    raw = os.environ.get("HRGR_THREADS")
    if not raw:
        return 1
    n = int(raw)
    if n < 1:
        raise ValueError(f"HRGR_THREADS must be >= 1, got {raw!r}")
    return n


@dataclass(frozen=True)
class StackedIndexVolume:
    values: np.ndarray
    region_counts: tuple

    @property
    def offsets(self):
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.region_counts)]))

    @property
    def n_nodes(self):
        return int(sum(self.region_counts))

    @property
    def n_layers(self):
        return self.values.shape[2]

    def layer_range(self, i):
        """1-based inclusive global label range of layer ``i``."""
        off = self.offsets
        return off[i] + 1, off[i + 1]


def aggregate_nodes_fwd(d, f, epsilon=1e-8):
    return update_centers_fwd(d, f, epsilon)


def aggregate_nodes(d, f, epsilon=1e-8):
    """Node features ``R = (D^T F) / (colsum(D) + epsilon)`` from the original features."""
    return update_centers_fwd(d, f, epsilon)[0]


def stack_index_maps(maps, region_counts):
    """Offset per-layer labels into one global range and stack them.

    Layer ``i`` labels ``1..m_i`` become ``o_i + 1 .. o_i + m_i`` with
    ``o_i = m_1 + ... + m_{i-1}``.  Every map is nearest-resized to the
    resolution of the map with the most elements.
    """
    maps = [np.asarray(j) for j in maps]
    region_counts = tuple(int(m) for m in region_counts)
    if not maps:
        raise ValueError("need at least one index map")
    if len(maps) != len(region_counts):
        raise ValueError(f"{len(maps)} maps but {len(region_counts)} region counts")
    for i, (j, m) in enumerate(zip(maps, region_counts)):
        if j.ndim != 2:
            raise ShapeError(f"index map {i} must be 2-D, got {j.shape}")
        if j.size and (j.min() < 1 or j.max() > m):
            raise ValueError(
                f"index map {i} has labels in [{j.min()}, {j.max()}], expected 1..{m}"
            )
    finest = max(range(len(maps)), key=lambda i: maps[i].size)
    th, tw = maps[finest].shape
    out = np.empty((th, tw, len(maps)), dtype=np.uint32)
    offset = 0
    for i, (j, m) in enumerate(zip(maps, region_counts)):
        out[..., i] = resize_nearest_index(j, th, tw).astype(np.uint32) + offset
        offset += m
    return StackedIndexVolume(out, region_counts)


def window_offsets(hierarchy="inter"):
    """All non-zero ``(dy, dx, dz)`` offsets of the window."""
    if hierarchy not in HIERARCHY_MODES:
        raise ValueError(f"hierarchy must be one of {HIERARCHY_MODES}, got {hierarchy!r}")
    dzs = (-1, 0, 1) if hierarchy == "inter" else (0,)
    return [(dy, dx, dz) for dy, dx, dz in product((-1, 0, 1), (-1, 0, 1), dzs)
            if (dy, dx, dz) != (0, 0, 0)]


def _as_volume(vol):
    if isinstance(vol, StackedIndexVolume):
        return vol.values, vol.n_nodes
    vals = np.asarray(vol)
    if vals.ndim == 2:
        vals = vals[..., None]
    return vals, int(vals.max())


def build_adjacency_oracle(vol, self_loops=True, hierarchy="inter"):
    """Reference adjacency: visit every position and every window offset."""
    vals, n = _as_volume(vol)
    h, w, k = vals.shape
    grid = vals.tolist()
    offsets = window_offsets(hierarchy)
    a = np.zeros((n, n), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            for z in range(k):
                u = grid[y][x][z]
                for dy, dx, dz in offsets:
                    yy, xx, zz = y + dy, x + dx, z + dz
                    if 0 <= yy < h and 0 <= xx < w and 0 <= zz < k:
                        v = grid[yy][xx][zz]
                        if u != v:
                            a[u - 1, v - 1] = 1
                            a[v - 1, u - 1] = 1
    if self_loops:
        np.fill_diagonal(a, 1)
    return a


def _band_edges(vals, n, y0, y1, half_offsets):
    """Flat ``u * n + v`` codes of differing label pairs whose first position lies in rows ``[y0, y1)``."""
    h, w, k = vals.shape
    codes = []
    for dy, dx, dz in half_offsets:
        ys0, ys1 = max(y0, -dy), min(y1, h - dy)
        xs0, xs1 = max(0, -dx), min(w, w - dx)
        zs0, zs1 = max(0, -dz), min(k, k - dz)
        if ys0 >= ys1 or xs0 >= xs1 or zs0 >= zs1:
            continue
        src = vals[ys0:ys1, xs0:xs1, zs0:zs1]
        dst = vals[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx, zs0 + dz:zs1 + dz]
        diff = src != dst
        if not diff.any():
            continue
        u = src[diff].astype(np.int64) - 1
        v = dst[diff].astype(np.int64) - 1
        codes.append(u * n + v)
        codes.append(v * n + u)
    if not codes:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate(codes))


def build_adjacency_parallel(vol, threads=None, self_loops=True, hierarchy="inter"):
    """Same matrix as :func:`build_adjacency_oracle`, built by worker threads.

    Rows of the volume are split into one contiguous band per worker.  Each
    worker emits a deduplicated set of edge codes; the sets are OR-ed into
    the output in band order, so the result does not depend on ``threads``.
    """
    vals, n = _as_volume(vol)
    threads = default_threads() if threads is None else int(threads)
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    h = vals.shape[0]
    # (p, p + o) and (p + o, p) are the same pair, so half the window suffices
    half = [o for o in window_offsets(hierarchy) if o > (0, 0, 0)]
    bounds = [(h * i) // threads for i in range(threads + 1)]
    bands = [(bounds[i], bounds[i + 1]) for i in range(threads) if bounds[i] < bounds[i + 1]]
    if threads == 1 or len(bands) == 1:
        results = [_band_edges(vals, n, y0, y1, half) for y0, y1 in bands]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda b: _band_edges(vals, n, b[0], b[1], half), bands))
    a = np.zeros(n * n, dtype=np.uint8)
    for codes in results:
        a[codes] = 1
    a = a.reshape(n, n)
    if self_loops:
        np.fill_diagonal(a, 1)
    return a


def fully_connected_adjacency(n):
    return np.ones((n, n), dtype=np.uint8)


def edge_list(a):
    """Undirected edges ``(u, v)``, ``u < v``, 1-based, row-major order."""
    a = np.asarray(a)
    u, v = np.nonzero(np.triu(a, k=1))
    return np.stack([u + 1, v + 1], axis=1).astype(np.uint32)


def project_nodes_fwd(nodes, weights):
    if len(nodes) != len(weights):
        raise ShapeError(f"{len(nodes)} node matrices but {len(weights)} projections")
    parts = []
    for i, (r, w) in enumerate(zip(nodes, weights)):
        if r.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {i}: nodes have {r.shape[1]} channels, W has {w.shape[0]} rows")
        parts.append(matmul(r, w))
    sizes = [r.shape[0] for r in nodes]
    return np.concatenate(parts, axis=0), (list(nodes), list(weights), sizes)


def project_nodes_vjp(cache, g):
    nodes, weights, sizes = cache
    gnodes, gweights = [], []
    start = 0
    for r, w, s in zip(nodes, weights, sizes):
        gi = g[start:start + s]
        gnodes.append(matmul(gi, w.T))
        gweights.append(matmul(r.T, gi))
        start += s
    return gnodes, gweights


def project_nodes(nodes, weights):
    """Stack ``R_i W_i`` for every layer into one ``M x C`` matrix."""
    return project_nodes_fwd(nodes, weights)[0]


def aggregate_nodes_op(epsilon=1e-8):
    def forward(d, f):
        r, cache = update_centers_fwd(d, f, epsilon)
        return (r,), cache

    return DiffOp("aggregate_nodes", forward, update_centers_vjp, 2)


def project_nodes_op(k):
    """``(R_1..R_k, W_1..W_k) -> R_G``."""
    def forward(*args):
        out, cache = project_nodes_fwd(args[:k], args[k:])
        return (out,), cache

    def vjp(cache, g):
        gn, gw = project_nodes_vjp(cache, g)
        return (*gn, *gw)

    return DiffOp("project_nodes", forward, vjp, 2 * k)
