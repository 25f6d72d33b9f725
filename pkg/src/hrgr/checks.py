"""Registry of seeded gradient-check cases, one per differentiable operation."""

import numpy as np

from .autodiff import grad_check
from .dfp import (DfpConfig, association_op, init_centers_grid_op, reduce_channels_op,
                  run_dfp_op, update_centers_op)
from .graph import aggregate_nodes_op, project_nodes_op
from .loss import FocalConfig, focal_loss_op
from .reasoning import (HrgrConfig, HrgrParams, block_op, fuse_op, message_pass_op,
                        regularize_op, remap_op)

__all__ = ["GRADCHECK_CASES", "gradcheck_case", "run_gradchecks"]


def _stochastic(rng, n, m):
    z = rng.standard_normal((n, m))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _reduce_channels(rng):
    return (reduce_channels_op(),
            [rng.standard_normal((4, 4, 5)), rng.standard_normal((5, 3)) * 0.5,
             rng.standard_normal(3) * 0.1],
            ["f", "W_phi", "b_phi"])


def _init_centers_grid(rng):
    return init_centers_grid_op(4), [rng.standard_normal((4, 4, 3))], ["f"]


def _association(rng):
    return (association_op(), [rng.standard_normal((12, 3)), rng.standard_normal((4, 3))],
            ["f", "centers"])


def _update_centers(rng):
    return (update_centers_op(), [_stochastic(rng, 12, 4), rng.standard_normal((12, 3))],
            ["D", "f"])


def _run_dfp(rng):
    cfg = DfpConfig(n_regions=4, n_iter=3)
    return (run_dfp_op(cfg),
            [rng.standard_normal((8, 8, 3)), rng.standard_normal((5, 4)) * 0.5,
             rng.standard_normal(4) * 0.1],
            ["f", "W_phi", "b_phi"])


def _aggregate_nodes(rng):
    return (aggregate_nodes_op(), [_stochastic(rng, 16, 4), rng.standard_normal((16, 5))],
            ["D", "f"])


def _project_nodes(rng):
    return (project_nodes_op(2),
            [rng.standard_normal((4, 3)), rng.standard_normal((3, 5)),
             rng.standard_normal((3, 6)), rng.standard_normal((5, 6))],
            ["R1", "R2", "W1", "W2"])


def _adjacency(rng, n):
    a = (rng.random((n, n)) < 0.4).astype(np.uint8)
    a = a | a.T
    np.fill_diagonal(a, 1)
    return a


def _message_pass(rng):
    return (message_pass_op(),
            [rng.standard_normal((7, 4)), _adjacency(rng, 7), rng.standard_normal((4, 4))],
            ["R_G", "A", "W_G"])


def _regularize(rng):
    return (regularize_op(),
            [rng.standard_normal((7, 4)), rng.standard_normal((4, 4)),
             rng.standard_normal((4, 4))],
            ["R_H", "W_alpha", "W_beta"])


def _remap(rng):
    # layer occupies rows 3..7 of a 9-node graph
    return (remap_op(3, 7),
            [rng.standard_normal((9, 4)), _stochastic(rng, 10, 4), rng.standard_normal((4, 3))],
            ["R_G", "D", "W_inv"])


def _fuse(rng):
    return (fuse_op(),
            [rng.standard_normal((3, 4, 2)), rng.standard_normal((12, 2)),
             rng.standard_normal(1)],
            ["f", "F_G", "mu"])


def _focal_loss(rng):
    target = (rng.random(20) < 0.3).astype(np.float64)
    y = rng.uniform(0.05, 0.95, size=20)
    return focal_loss_op(target, FocalConfig()), [y], ["y_hat"]


def _hrgr_block(rng):
    cfg = HrgrConfig(n_regions=4, n_iter=2)
    feats = [rng.standard_normal((8, 8, 4)), rng.standard_normal((4, 4, 4))]
    params = HrgrParams.init([4, 4], graph_channels=8, rng=rng)
    # a non-trivial fusion weight so the remap path is exercised
    params.mu = [np.array([0.7]), np.array([1.3])]
    pd = params.to_dict()
    names = ["f0", "f1"] + params.names()
    return block_op(cfg, 2, params.names()), feats + [pd[n] for n in params.names()], names


GRADCHECK_CASES = {
    "reduce_channels": _reduce_channels,
    "init_centers_grid": _init_centers_grid,
    "association": _association,
    "update_centers": _update_centers,
    "run_dfp": _run_dfp,
    "aggregate_nodes": _aggregate_nodes,
    "project_nodes": _project_nodes,
    "message_pass": _message_pass,
    "regularize": _regularize,
    "remap": _remap,
    "fuse": _fuse,
    "focal_loss": _focal_loss,
    "hrgr_block": _hrgr_block,
}


def gradcheck_case(name, seed=0):
    """``(op, inputs, input_names)`` for a registered case."""
    try:
        build = GRADCHECK_CASES[name]
    except KeyError:
        raise ValueError(f"unknown op {name!r}; choose from {sorted(GRADCHECK_CASES)}") from None
    return build(np.random.default_rng(seed))


def run_gradchecks(ops="all", seeds=(0,), h=1e-5, tol=1e-4):
    """Run the registered checks and return a flat list of reports."""
    if ops == "all":
        ops = list(GRADCHECK_CASES)
    elif isinstance(ops, str):
        ops = [ops]
    reports = []
    for name in ops:
        for seed in seeds:
            op, inputs, names = gradcheck_case(name, seed)
            reports += grad_check(op, inputs, h=h, tol=tol, seed=seed, names=names)
    return reports
