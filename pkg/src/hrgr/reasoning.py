"""Graph reasoning over region nodes and the assembled HRGR block.

The block is written once as a Wengert list (:func:`block_steps`) and run
with :func:`~hrgr.autodiff.run_chain` / :func:`~hrgr.autodiff.backprop_chain`.
:func:`hrgr_block_vjp` is a second, hand-sequenced composition of the same
per-op VJPs used to cross-check the chain.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffOp, Step, backprop_chain, run_chain
from .dfp import (
    ChannelReducer,
    DfpConfig,
    gelu,
    gelu_grad,
    run_dfp_fwd,
    run_dfp_op,
    run_dfp_vjp,
    update_centers_fwd,
    update_centers_vjp,
)
from .graph import (
    aggregate_nodes_op,
    build_adjacency_parallel,
    fully_connected_adjacency,
    project_nodes_fwd,
    project_nodes_op,
    project_nodes_vjp,
    stack_index_maps,
)
from .tensor import ShapeError, load, matmul, save

__all__ = [
    "IsolatedNodeError",
    "HrgrConfig",
    "HrgrParams",
    "save_params",
    "load_params",
    "message_pass",
    "regularize",
    "remap",
    "fuse",
    "hrgr_block",
    "hrgr_block_vjp",
    "block_steps",
    "block_op",
    "message_pass_op",
    "regularize_op",
    "remap_op",
    "fuse_op",
    "adjacency_op",
]

BLOCK_MODES = ("full", "grid", "intra", "fc")


class IsolatedNodeError(ZeroDivisionError):
    """A node has no neighbours, so its neighbour mean is undefined."""


@dataclass
class HrgrConfig:
    """Block settings; per-layer region counts may be an int or a list.

    ``mode`` selects an ablation: ``grid`` swaps the soft partition for a
    regular grid, ``intra`` restricts edges to within a layer, ``fc`` uses a
    fully connected graph.
    """

    n_regions: int | list = 16
    n_iter: int = 5
    rounds: int = 1
    mode: str = "full"
    self_loops: bool = True
    use_coords: bool = True
    coord_scale: float | None = None
    epsilon: float = 1e-8
    backprop_iters: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.mode not in BLOCK_MODES:
            raise ValueError(f"mode must be one of {BLOCK_MODES}, got {self.mode!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def regions(self, k):
        if isinstance(self.n_regions, (list, tuple)):
            if len(self.n_regions) != k:
                raise ValueError(f"{len(self.n_regions)} region counts for {k} layers")
            return [int(m) for m in self.n_regions]
        return [int(self.n_regions)] * k

    def dfp_config(self, m):
        return DfpConfig(
            n_regions=m,
            n_iter=self.n_iter,
            coord_scale=self.coord_scale,
            use_coords=self.use_coords,
            partition_mode="regular-grid" if self.mode == "grid" else "soft-dfp",
            epsilon=self.epsilon,
            backprop_iters=self.backprop_iters,
        )


@dataclass
class HrgrParams:
    """Learnable block weights for ``k`` layers with channel counts ``c_i``.

    ``reducers[i]`` maps ``c_i (+2)`` to the reduced partition space,
    ``proj[i]`` is ``c_i x C``, ``inv[i]`` is ``C x c_i`` and ``mu[i]`` is a
    one-element array.
    """

    reducers: list
    proj: list
    w_graph: np.ndarray
    w_alpha: np.ndarray
    w_beta: np.ndarray
    inv: list
    mu: list = field(default_factory=list)

    @classmethod
    def init(cls, channels, graph_channels=None, reduced_channels=None,
             use_coords=True, rng=None):
        rng = np.random.default_rng(rng)
        channels = [int(c) for c in channels]
        C = int(graph_channels or max(channels))

        def uniform(fan_in, shape):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        reducers, proj, inv = [], [], []
        for c in channels:
            c_in = c + 2 if use_coords else c
            c_red = reduced_channels or min(16, c_in - 1)
            reducers.append(ChannelReducer.init(c_in, c_red, rng))
        for c in channels:
            proj.append(uniform(c, (c, C)))
        w_graph = uniform(C, (C, C))
        w_alpha = uniform(C, (C, C))
        w_beta = uniform(C, (C, C))
        for c in channels:
            inv.append(uniform(C, (C, c)))
        mu = [np.ones(1) for _ in channels]
        return cls(reducers, proj, w_graph, w_alpha, w_beta, inv, mu)

    @property
    def n_layers(self):
        return len(self.proj)

    @property
    def channels(self):
        return [w.shape[0] for w in self.proj]

    @property
    def graph_channels(self):
        return self.w_graph.shape[0]

    def names(self):
        k = self.n_layers
        out = []
        for i in range(k):
            out += [f"phi{i}.weight", f"phi{i}.bias"]
        out += [f"W{i}" for i in range(k)]
        out += ["W_G", "W_alpha", "W_beta"]
        out += [f"W_inv{i}" for i in range(k)]
        out += [f"mu{i}" for i in range(k)]
        return out

    def to_dict(self):
        d = {}
        for i, r in enumerate(self.reducers):
            d[f"phi{i}.weight"] = r.weight
            d[f"phi{i}.bias"] = r.bias
        for i, w in enumerate(self.proj):
            d[f"W{i}"] = w
        d["W_G"] = self.w_graph
        d["W_alpha"] = self.w_alpha
        d["W_beta"] = self.w_beta
        for i, w in enumerate(self.inv):
            d[f"W_inv{i}"] = w
        for i, m in enumerate(self.mu):
            d[f"mu{i}"] = m
        return d

    @classmethod
    def from_dict(cls, d, k=None):
        if k is None:
            k = sum(1 for name in d if name.startswith("W_inv"))
        return cls(
            reducers=[ChannelReducer(np.asarray(d[f"phi{i}.weight"], dtype=np.float64),
                                     np.asarray(d[f"phi{i}.bias"], dtype=np.float64))
                      for i in range(k)],
            proj=[np.asarray(d[f"W{i}"], dtype=np.float64) for i in range(k)],
            w_graph=np.asarray(d["W_G"], dtype=np.float64),
            w_alpha=np.asarray(d["W_alpha"], dtype=np.float64),
            w_beta=np.asarray(d["W_beta"], dtype=np.float64),
            inv=[np.asarray(d[f"W_inv{i}"], dtype=np.float64) for i in range(k)],
            mu=[np.asarray(d[f"mu{i}"], dtype=np.float64).reshape(1) for i in range(k)],
        )

    def copy(self):
        return HrgrParams.from_dict({k: np.array(v, copy=True) for k, v in self.to_dict().items()},
                                    self.n_layers)


MANIFEST = "manifest.json"


def save_params(params, directory):
    """Write every weight as ``<name>.hrgt`` plus a ``manifest.json`` index."""
    os.makedirs(directory, exist_ok=True)
    tensors = {}
    for name, value in params.to_dict().items():
        fname = f"{name}.hrgt"
        save(np.asarray(value, dtype=np.float64), os.path.join(directory, fname))
        tensors[name] = fname
    manifest = {"channels": params.channels, "graph_channels": params.graph_channels,
                "tensors": tensors}
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_params(directory):
    """Inverse of :func:`save_params`; checks shapes against the manifest."""
    with open(os.path.join(directory, MANIFEST)) as fh:
        manifest = json.load(fh)
    try:
        channels = [int(c) for c in manifest["channels"]]
        tensors = manifest["tensors"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{directory}: malformed manifest ({exc})") from None
    k = len(channels)
    expected = HrgrParams.init(channels, manifest.get("graph_channels")).names()
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise ValueError(f"{directory}: manifest lacks {missing}")
    params = HrgrParams.from_dict(
        {n: load(os.path.join(directory, tensors[n])) for n in expected}, k)
    if params.channels != channels:
        raise ShapeError(f"{directory}: weights for channels {params.channels}, "
                         f"manifest says {channels}")
    C = params.graph_channels
    for i, c in enumerate(channels):
        if params.inv[i].shape != (C, c) or params.proj[i].shape != (c, C):
            raise ShapeError(f"{directory}: layer {i} projections do not match C={C}")
        if params.reducers[i].weight.shape[1] != params.reducers[i].bias.shape[0]:
            raise ShapeError(f"{directory}: phi{i} weight and bias disagree")
    square = {"W_G": params.w_graph, "W_alpha": params.w_alpha, "W_beta": params.w_beta}
    for name, w in square.items():
        if w.shape != (C, C):
            raise ShapeError(f"{directory}: {name} must be {C}x{C}")
    return params


def message_pass_fwd(rg, a, w_graph):
    a = np.asarray(a)
    if a.shape != (rg.shape[0], rg.shape[0]):
        raise ShapeError(f"adjacency {a.shape} does not match {rg.shape[0]} nodes")
    if w_graph.shape != (rg.shape[1], rg.shape[1]):
        raise ShapeError(f"W_G {w_graph.shape} does not match {rg.shape[1]} channels")
    af = a.astype(rg.dtype)
    deg = af.sum(axis=1)
    if np.any(deg == 0):
        bad = np.flatnonzero(deg == 0) + 1
        raise IsolatedNodeError(f"nodes {bad.tolist()} have no neighbours; enable self-loops")
    mean = matmul(af, rg) / deg[:, None]
    return matmul(mean, w_graph), (af, deg, mean, w_graph)


def message_pass_vjp(cache, g):
    af, deg, mean, w_graph = cache
    gmean = matmul(g, w_graph.T)
    gw = matmul(mean.T, g)
    grg = matmul(af.T, gmean / deg[:, None])
    return grg, None, gw


def message_pass(rg, a, w_graph):
    """Neighbour mean ``((A R_G) / rowsum(A)) W_G``."""
    return message_pass_fwd(rg, a, w_graph)[0]


def regularize_fwd(rh, w_alpha, w_beta):
    if w_alpha.shape[0] != rh.shape[1] or w_beta.shape[1] != rh.shape[1]:
        raise ShapeError(f"weights {w_alpha.shape}, {w_beta.shape} vs nodes {rh.shape}")
    z = matmul(rh, w_alpha)
    s = gelu(z)
    return matmul(s, w_beta) + rh, (rh, z, s, w_alpha, w_beta)


def regularize_vjp(cache, g):
    rh, z, s, w_alpha, w_beta = cache
    gs = matmul(g, w_beta.T)
    gwb = matmul(s.T, g)
    gz = gs * gelu_grad(z)
    gwa = matmul(rh.T, gz)
    grh = matmul(gz, w_alpha.T) + g
    return grh, gwa, gwb


def regularize(rh, w_alpha, w_beta):
    """Residual update ``GeLU(R W_alpha) W_beta + R``."""
    return regularize_fwd(rh, w_alpha, w_beta)[0]


def remap_fwd(rg, d, w_inv, start, stop):
    if not 0 <= start < stop <= rg.shape[0]:
        raise ShapeError(f"layer slice [{start}, {stop}) outside {rg.shape[0]} nodes")
    if d.shape[1] != stop - start:
        raise ShapeError(f"association has {d.shape[1]} columns, layer has {stop - start} nodes")
    rgi = rg[start:stop]
    ri = matmul(rgi, w_inv)
    return matmul(d, ri), (rg.shape, start, stop, rgi, ri, d, w_inv)


def remap_vjp(cache, g):
    shape, start, stop, rgi, ri, d, w_inv = cache
    gd = matmul(g, ri.T)
    gri = matmul(d.T, g)
    gw = matmul(rgi.T, gri)
    grg = np.zeros(shape, dtype=g.dtype)
    grg[start:stop] = matmul(gri, w_inv.T)
    return grg, gd, gw


def remap(rg, d, w_inv, start, stop):
    """Spread the layer's node rows ``R_G[start:stop] W_inv`` back to elements via ``D``."""
    return remap_fwd(rg, d, w_inv, start, stop)[0]


def fuse_fwd(f, fg, mu):
    f = np.asarray(f)
    if fg.size != f.size:
        raise ShapeError(f"graph features {fg.shape} cannot reshape to {f.shape}")
    fgr = fg.reshape(f.shape)
    mu = np.asarray(mu).reshape(-1)
    return mu[0] * fgr + f, (fg.shape, fgr, mu)


def fuse_vjp(cache, g):
    fg_shape, fgr, mu = cache
    return g, (mu[0] * g).reshape(fg_shape), np.array([np.sum(g * fgr)])


def fuse(f, fg, mu):
    """``mu * reshape(F_G) + f``."""
    return fuse_fwd(f, fg, mu)[0]


def _op(name, fwd, vjp, n_in):
    def forward(*args):
        out, cache = fwd(*args)
        return (out,), cache

    return DiffOp(name, forward, vjp, n_in)


def message_pass_op():
    return _op("message_pass", message_pass_fwd, message_pass_vjp, 3)


def regularize_op():
    return _op("regularize", regularize_fwd, regularize_vjp, 3)


def remap_op(start, stop):
    return _op("remap", lambda rg, d, w: remap_fwd(rg, d, w, start, stop), remap_vjp, 3)


def fuse_op():
    return _op("fuse", fuse_fwd, fuse_vjp, 3)


def _build_adjacency(labels, regions, cfg):
    if cfg.mode == "fc":
        return fully_connected_adjacency(sum(regions))
    vol = stack_index_maps(labels, regions)
    hierarchy = "intra" if cfg.mode == "intra" else "inter"
    return build_adjacency_parallel(vol, cfg.threads, cfg.self_loops, hierarchy)


def adjacency_op(regions, cfg):
    """``(labels_1..labels_k) -> A``; piecewise constant, so no gradient."""
    k = len(regions)

    def forward(*labels):
        return (_build_adjacency(labels, regions, cfg),), None

    def vjp(cache, g):
        return (None,) * k

    return DiffOp("adjacency", forward, vjp, k)


def block_steps(cfg, k, prefix=""):
    """Wengert list for the block on ``k`` layers.

    Inputs are ``f{i}`` plus every name in :meth:`HrgrParams.names`; outputs
    are ``out{i}``.  Diagnostics ``D{i}``, ``labels{i}`` and ``A`` remain in
    the value environment.
    """
    p = prefix
    regions = cfg.regions(k)
    offsets = np.concatenate([[0], np.cumsum(regions)]).astype(int)
    steps = []
    for i, m in enumerate(regions):
        steps.append(Step(run_dfp_op(cfg.dfp_config(m)),
                          (f"{p}f{i}", f"{p}phi{i}.weight", f"{p}phi{i}.bias"),
                          (f"{p}D{i}", f"{p}centers{i}", f"{p}labels{i}")))
        steps.append(Step(aggregate_nodes_op(cfg.epsilon),
                          (f"{p}D{i}", f"{p}f{i}"), (f"{p}R{i}",)))
    steps.append(Step(adjacency_op(regions, cfg),
                      tuple(f"{p}labels{i}" for i in range(k)), (f"{p}A",)))
    steps.append(Step(project_nodes_op(k),
                      tuple(f"{p}R{i}" for i in range(k)) + tuple(f"{p}W{i}" for i in range(k)),
                      (f"{p}RG0",)))
    for r in range(cfg.rounds):
        steps.append(Step(message_pass_op(), (f"{p}RG{r}", f"{p}A", f"{p}W_G"), (f"{p}RH{r}",)))
        steps.append(Step(regularize_op(), (f"{p}RH{r}", f"{p}W_alpha", f"{p}W_beta"),
                          (f"{p}RG{r + 1}",)))
    last = f"{p}RG{cfg.rounds}"
    for i in range(k):
        steps.append(Step(remap_op(int(offsets[i]), int(offsets[i + 1])),
                          (last, f"{p}D{i}", f"{p}W_inv{i}"), (f"{p}FG{i}",)))
        steps.append(Step(fuse_op(), (f"{p}f{i}", f"{p}FG{i}", f"{p}mu{i}"), (f"{p}out{i}",)))
    return steps


def _check_features(features, params):
    features = [np.asarray(f, dtype=np.float64) for f in features]
    if not features:
        raise ValueError("need at least one feature map")
    if len(features) != params.n_layers:
        raise ValueError(f"{len(features)} feature maps but params for {params.n_layers} layers")
    for i, (f, c) in enumerate(zip(features, params.channels)):
        if f.ndim != 3 or f.shape[2] != c:
            raise ShapeError(f"feature map {i} has shape {f.shape}, expected h x w x {c}")
    return features


def hrgr_block(features, params, cfg, return_env=False):
    """Enhance ``k`` feature maps with region-graph reasoning.

    Returns ``(outputs, diagnostics)`` where ``diagnostics`` holds the hard
    ``labels``, soft ``D`` per layer and the adjacency ``A``.
    """
    features = _check_features(features, params)
    k = len(features)
    steps = block_steps(cfg, k)
    values = {f"f{i}": f for i, f in enumerate(features)}
    values.update(params.to_dict())
    env, saved = run_chain(steps, values)
    outputs = [env[f"out{i}"] for i in range(k)]
    diag = {
        "labels": [env[f"labels{i}"] for i in range(k)],
        "D": [env[f"D{i}"] for i in range(k)],
        "A": env["A"],
    }
    if return_env:
        return outputs, diag, (steps, env, saved)
    return outputs, diag


def hrgr_block_vjp(features, params, cfg, cotangents):
    """Gradients of ``sum_i <cotangents[i], out_i>`` by direct composition.

    Returns ``(feature_grads, param_grads)`` with ``param_grads`` keyed like
    :meth:`HrgrParams.to_dict`.
    """
    features = _check_features(features, params)
    k = len(features)
    regions = cfg.regions(k)
    offsets = np.concatenate([[0], np.cumsum(regions)]).astype(int)

    # forward
    dfp_c, agg_c, ds, labels, nodes = [], [], [], [], []
    for i, (f, m) in enumerate(zip(features, regions)):
        red = params.reducers[i]
        (d, _, lab), c = run_dfp_fwd(f, red.weight, red.bias, cfg.dfp_config(m))
        r, ac = update_centers_fwd(d, f, cfg.epsilon)
        dfp_c.append(c)
        agg_c.append(ac)
        ds.append(d)
        labels.append(lab)
        nodes.append(r)
    a = _build_adjacency(labels, regions, cfg)
    rg, proj_c = project_nodes_fwd(nodes, params.proj)
    round_c = []
    for _ in range(cfg.rounds):
        rh, mc = message_pass_fwd(rg, a, params.w_graph)
        rg, rc = regularize_fwd(rh, params.w_alpha, params.w_beta)
        round_c.append((mc, rc))
    remap_c, fuse_c = [], []
    for i in range(k):
        fg, c = remap_fwd(rg, ds[i], params.inv[i], int(offsets[i]), int(offsets[i + 1]))
        remap_c.append(c)
        fuse_c.append(fuse_fwd(features[i], fg, params.mu[i])[1])

    # backward
    gp = {name: np.zeros_like(v) for name, v in params.to_dict().items()}
    gf = [np.zeros_like(f) for f in features]
    gd = [np.zeros_like(d) for d in ds]
    grg = np.zeros_like(rg)
    for i in range(k):
        g_f, g_fg, g_mu = fuse_vjp(fuse_c[i], np.asarray(cotangents[i]))
        gf[i] += g_f
        gp[f"mu{i}"] += g_mu
        g_rg, g_d, g_w = remap_vjp(remap_c[i], g_fg)
        grg += g_rg
        gd[i] += g_d
        gp[f"W_inv{i}"] += g_w
    for mc, rc in reversed(round_c):
        grh, gwa, gwb = regularize_vjp(rc, grg)
        gp["W_alpha"] += gwa
        gp["W_beta"] += gwb
        grg, _, gwg = message_pass_vjp(mc, grh)
        gp["W_G"] += gwg
    gnodes, gws = project_nodes_vjp(proj_c, grg)
    for i in range(k):
        gp[f"W{i}"] += gws[i]
        g_d, g_f = update_centers_vjp(agg_c[i], gnodes[i])
        gd[i] += g_d
        gf[i] += g_f
        g_f, g_w, g_b = run_dfp_vjp(dfp_c[i], gd[i], None)
        if g_f is not None:
            gf[i] += g_f
            gp[f"phi{i}.weight"] += g_w
            gp[f"phi{i}.bias"] += g_b
    return gf, gp


def block_op(cfg, k, param_names):
    """The whole block as one :class:`DiffOp` over ``(f_1..f_k, *params)``."""
    steps = block_steps(cfg, k)
    in_names = [f"f{i}" for i in range(k)] + list(param_names)
    out_names = [f"out{i}" for i in range(k)]

    def forward(*args):
        env, saved = run_chain(steps, dict(zip(in_names, args)))
        return tuple(env[n] for n in out_names), (env, saved)

    def vjp(cache, *gs):
        env, saved = cache
        grads = backprop_chain(steps, env, dict(zip(out_names, gs)), saved=saved)
        return tuple(grads.get(n) for n in in_names)

    return DiffOp("hrgr_block", forward, vjp, len(in_names), k)
