"""``hrgr`` command line: partition, graph, reason, eval, synth, train-toy, gradcheck, bench.

Exit status is 0 on success, 1 on invalid input or usage and 2 on a
numerical failure (non-finite values, failed gradient check, mismatched
adjacency).
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import tensor
from .checks import GRADCHECK_CASES, run_gradchecks
from .estimators import DifferentiableFeaturePartition
from .graph import (build_adjacency_oracle, build_adjacency_parallel, default_threads,
                    stack_index_maps)
from .harness import ToyConfig, train_toy
from .metrics import evaluate
from .reasoning import HrgrConfig, HrgrParams, hrgr_block, load_params, save_params
from .synthetic import SyntheticSpec, gen_blobs, gen_forgery

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return value == "on"


def _int_list(value):
    try:
        out = [int(v) for v in value.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")
    if any(v < 1 for v in out):
        raise argparse.ArgumentTypeError("region counts must be >= 1")
    return out


def _positive_int(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value!r}")
    return n


def _threads(args):
    return args.threads if args.threads is not None else default_threads()


def _echo_config(args, **resolved):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(resolved)
    cfg.setdefault("dtype", "float64")
    print("config " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


def _require_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"{name} produced non-finite values")


def cmd_partition(args):
    _echo_config(args)
    f = tensor.load(args.input)
    est = DifferentiableFeaturePartition(
        n_regions=args.regions, n_iter=args.iters, reduced_channels=args.reduced_channels,
        coord_scale=args.coord_scale, use_coords=args.coords,
        partition_mode="soft-dfp" if args.mode == "dfp" else "regular-grid",
        random_state=args.seed,
    ).fit(f)
    _require_finite("partition", est.association_, est.cluster_centers_)
    tensor.save(est.association_, args.out_assoc)
    tensor.save(est.cluster_centers_, args.out_centers)
    tensor.save(est.labels_, args.out_index)
    print(json.dumps({"elements": int(est.association_.shape[0]), "regions": args.regions,
                      "regions_used": int(np.unique(est.labels_).size)}))
    return EXIT_OK


def cmd_graph(args):
    threads = _threads(args)
    _echo_config(args, threads=threads)
    if len(args.regions) != len(args.index):
        raise ValueError(f"{len(args.index)} index maps but {len(args.regions)} region counts")
    maps = [tensor.load(p) for p in args.index]
    vol = stack_index_maps(maps, args.regions)
    if args.oracle:
        a = build_adjacency_oracle(vol, args.self_loops, args.hierarchy)
    else:
        a = build_adjacency_parallel(vol, threads, args.self_loops, args.hierarchy)
    tensor.save(a, args.out)
    off_diag = int(np.triu(a, 1).sum())
    print(json.dumps({"nodes": int(a.shape[0]), "edges": off_diag}))
    return EXIT_OK


def cmd_reason(args):
    threads = _threads(args)
    _echo_config(args, threads=threads)
    feats = [tensor.load(p) for p in args.features]
    for i, f in enumerate(feats):
        if f.ndim != 3:
            raise tensor.ShapeError(f"feature map {i} must be h x w x c, got {f.shape}")
    if args.init_seed is not None:
        params = HrgrParams.init([f.shape[2] for f in feats], args.graph_channels,
                                 rng=args.init_seed)
        save_params(params, args.params)
    else:
        params = load_params(args.params)
    regions = args.regions if len(args.regions) > 1 else args.regions[0]
    cfg = HrgrConfig(n_regions=regions, n_iter=args.iters, rounds=args.rounds, mode=args.mode,
                     self_loops=args.self_loops, threads=threads)
    outs, diag = hrgr_block(feats, params, cfg)
    _require_finite("reason", *outs)
    for i, (o, lab) in enumerate(zip(outs, diag["labels"])):
        tensor.save(o, f"{args.out_prefix}f{i}.hrgt")
        tensor.save(lab, f"{args.out_prefix}index{i}.hrgt")
    tensor.save(diag["A"], f"{args.out_prefix}adj.hrgt")
    print(json.dumps({"layers": len(outs), "nodes": int(diag["A"].shape[0]),
                      "outputs": [f"{args.out_prefix}f{i}.hrgt" for i in range(len(outs))]}))
    return EXIT_OK


def cmd_eval(args):
    _echo_config(args)
    scores = tensor.load(args.scores)
    labels = tensor.load(args.labels)
    if scores.shape != labels.shape:
        raise tensor.ShapeError(f"scores {scores.shape} and labels {labels.shape} differ")
    _require_finite("scores", scores)
    r = evaluate(scores, labels)
    report = {"auc": r.auc, "f1": r.f1, "eer_threshold": r.eer_threshold}
    print(json.dumps(report))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


def cmd_synth(args):
    _echo_config(args)
    spec = SyntheticSpec(h=args.h, w=args.w, kind=args.kind, grid=tuple(args.grid),
                         channels=args.channels, sigma=args.sigma, seed=args.seed)
    if args.kind == "blobs":
        data, labels = gen_blobs(spec)
        names = ("features", "labels")
    else:
        data, labels = gen_forgery(spec)
        names = ("image", "mask")
    paths = [f"{args.out_prefix}{n}.hrgt" for n in names]
    tensor.save(data, paths[0])
    tensor.save(labels, paths[1])
    print(json.dumps({"kind": args.kind, "outputs": paths}))
    return EXIT_OK


def cmd_train_toy(args):
    cfg = ToyConfig(steps=args.steps, lr=args.lr, seed=args.seed, h=args.h, w=args.w,
                    mode=args.mode, freeze_mu=args.freeze_mu)
    _echo_config(args, toy=vars(cfg))
    report = train_toy(cfg)
    with open(args.report, "w") as fh:
        json.dump(report, fh, indent=2)
    print(json.dumps({k: report[k] for k in ("initial_loss", "final_loss", "auc", "f1",
                                              "eer_threshold")}))
    return EXIT_OK


def cmd_gradcheck(args):
    _echo_config(args)
    seeds = range(args.seed, args.seed + args.seeds)
    reports = run_gradchecks(args.op, seeds, h=args.step, tol=args.tol)
    for r in reports:
        print(r.line())
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def _bench_volume(h, w, layers, regions, seed):
    rng = np.random.default_rng(seed)
    maps = [rng.integers(1, regions + 1, size=(h, w)) for _ in range(layers)]
    return stack_index_maps(maps, [regions] * layers)


def _best_time(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cmd_bench(args):
    threads = _threads(args)
    _echo_config(args, threads=threads)
    vol = _bench_volume(args.h, args.w, args.layers, args.regions, args.seed)
    t_oracle, a_oracle = _best_time(lambda: build_adjacency_oracle(vol), args.repeat)
    t_par, a_par = _best_time(lambda: build_adjacency_parallel(vol, threads), args.repeat)
    identical = bool(a_oracle.dtype == a_par.dtype and np.array_equal(a_oracle, a_par))
    report = {
        "h": args.h, "w": args.w, "layers": args.layers, "regions": args.regions,
        "nodes": int(vol.n_nodes), "threads": threads, "repeat": args.repeat,
        "oracle_seconds": t_oracle, "parallel_seconds": t_par,
        "speedup": t_oracle / t_par if t_par > 0 else float("inf"),
        "identical": identical, "cpu_count": os.cpu_count(),
    }
    print(json.dumps(report, indent=2))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK if identical else EXIT_NUMERIC


def build_parser():
    p = _Parser(prog="hrgr", description="Hierarchical region-graph reasoning kernels.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("partition", help="soft-cluster a feature map into regions")
    s.add_argument("--input", required=True)
    s.add_argument("--regions", type=_positive_int, default=64)
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--coords", type=_on_off, default=True)
    s.add_argument("--coord-scale", type=float, default=None)
    s.add_argument("--mode", choices=("dfp", "grid"), default="dfp")
    s.add_argument("--reduced-channels", type=_positive_int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-assoc", required=True)
    s.add_argument("--out-centers", required=True)
    s.add_argument("--out-index", required=True)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("graph", help="build the region adjacency of stacked index maps")
    s.add_argument("--index", nargs="+", required=True)
    s.add_argument("--regions", type=_int_list, required=True)
    which = s.add_mutually_exclusive_group()
    which.add_argument("--oracle", action="store_true")
    which.add_argument("--parallel", action="store_true")
    s.add_argument("--threads", type=_positive_int, default=None)
    s.add_argument("--self-loops", type=_on_off, default=True)
    s.add_argument("--hierarchy", choices=("inter", "intra"), default="inter")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("reason", help="run the reasoning block on a feature pyramid")
    s.add_argument("--features", nargs="+", required=True)
    s.add_argument("--params", required=True, help="directory with manifest.json")
    s.add_argument("--init-seed", type=int, default=None,
                   help="draw fresh weights with this seed and write them to --params")
    s.add_argument("--graph-channels", type=_positive_int, default=None)
    s.add_argument("--regions", type=_int_list, default=[16])
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--rounds", type=int, default=1)
    s.add_argument("--mode", choices=("full", "grid", "intra", "fc"), default="full")
    s.add_argument("--self-loops", type=_on_off, default=True)
    s.add_argument("--threads", type=_positive_int, default=None)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_reason)

    s = sub.add_parser("eval", help="pixel AUC and F1 at the equal-error threshold")
    s.add_argument("--scores", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic sample")
    s.add_argument("--kind", choices=("blobs", "forgery"), default="blobs")
    s.add_argument("--h", type=_positive_int, default=32)
    s.add_argument("--w", type=_positive_int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=_positive_int, nargs=2, default=(4, 4))
    s.add_argument("--channels", type=_positive_int, default=8)
    s.add_argument("--sigma", type=float, default=0.05)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-toy", help="train the toy detector on synthetic forgeries")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=_positive_int, default=64)
    s.add_argument("--w", type=_positive_int, default=64)
    s.add_argument("--mode", choices=("full", "grid", "intra", "fc"), default="full")
    s.add_argument("--freeze-mu", action="store_true")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("gradcheck", help="finite-difference check of every VJP")
    s.add_argument("--op", choices=("all", *GRADCHECK_CASES), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=_positive_int, default=1, help="number of seeds")
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--json", default=None)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="time the oracle and parallel adjacency builders")
    s.add_argument("--h", type=_positive_int, default=128)
    s.add_argument("--w", type=_positive_int, default=128)
    s.add_argument("--layers", type=_positive_int, default=4)
    s.add_argument("--regions", type=_positive_int, default=16)
    s.add_argument("--threads", type=_positive_int, default=None)
    s.add_argument("--repeat", type=_positive_int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_INVALID
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ArithmeticError as exc:
        # FloatingPointError, GradCheckError, IsolatedNodeError
        print(f"error [{type(exc).__module__}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"error [{type(exc).__module__}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
