"""Shared fixtures and brute-force oracles for the test suite."""

import numpy as np

from hrgr.dfp import ChannelReducer, DfpConfig, run_dfp
from hrgr.metrics import adjusted_rand_index
from hrgr.synthetic import SyntheticSpec, gen_blobs


def blob_reducer(channels=8, gain=2.0):
    """Near-identity reducer for ``channels`` features plus two coordinates.

    Features pass through ``gain * I`` shifted into the near-linear part of
    the GeLU; both coordinate channels are summed into one extra output.
    """
    w = np.zeros((channels + 2, channels + 1))
    w[:channels, :channels] = gain * np.eye(channels)
    w[channels, channels] = 1.0
    w[channels + 1, channels] = 1.0
    b = np.r_[gain * np.ones(channels), 0.0]
    return ChannelReducer(w, b)


def blob_recovery_ari(seed, coord_scale=0.05):
    spec = SyntheticSpec(h=32, w=32, kind="blobs", grid=(4, 4), sigma=0.05, seed=seed)
    f, labels = gen_blobs(spec)
    cfg = DfpConfig(n_regions=16, n_iter=10, coord_scale=coord_scale)
    _, _, pred = run_dfp(f, blob_reducer(f.shape[2]), cfg)
    return adjusted_rand_index(pred, labels)


def random_stochastic(rng, n, m):
    z = rng.standard_normal((n, m))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def weighted_mean_loop(d, f, eps=1e-8):
    """``out[j] = sum_i d[i, j] f[i] / (sum_i d[i, j] + eps)`` by explicit loops."""
    n, m = d.shape
    out = np.zeros((m, f.shape[1]))
    for j in range(m):
        num = np.zeros(f.shape[1])
        den = 0.0
        for i in range(n):
            num += d[i, j] * f[i]
            den += d[i, j]
        out[j] = num / (den + eps)
    return out


def eight_connected_adjacency(j):
    """Region pairs that touch by an edge or a corner in a single 2-D map."""
    h, w = j.shape
    n = int(j.max())
    a = np.zeros((n, n), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        u, v = j[y, x] - 1, j[yy, xx] - 1
                        a[u, v] = a[v, u] = 1
    return a


def random_volume_maps(rng, max_hw=32, max_k=4, max_m=16):
    """Random layer maps of varying sizes and region counts, each using every label."""
    k = int(rng.integers(1, max_k + 1))
    maps, counts = [], []
    for _ in range(k):
        h, w = (int(v) for v in rng.integers(1, max_hw + 1, size=2))
        m = int(rng.integers(1, min(max_m, h * w) + 1))
        j = rng.integers(1, m + 1, size=(h, w))
        j.reshape(-1)[:m] = rng.permutation(m) + 1
        maps.append(j.astype(np.uint32))
        counts.append(m)
    return maps, counts
