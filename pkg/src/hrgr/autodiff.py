"""Vector-Jacobian products, explicit reverse chains and finite-difference checks.

Every differentiable operation is a :class:`DiffOp`: ``forward(*inputs)``
returns ``(outputs, saved)`` where ``outputs`` is a tuple, and
``vjp(saved, *cotangents)`` returns one cotangent per input.  Integer
outputs (region labels) and constant inputs (adjacency) carry ``None``
cotangents.

A fixed pipeline is written as a list of :class:`Step` records, a Wengert
list, and differentiated by :func:`backprop_chain`.
"""

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffOp",
    "Step",
    "GradReport",
    "GradCheckError",
    "ChainShapeError",
    "is_differentiable",
    "run_chain",
    "backprop_chain",
    "grad_check",
    "reports_to_json",
    "reports_to_text",
]


class GradCheckError(ArithmeticError):
    """Forward evaluation produced non-finite values during a gradient check."""


class ChainShapeError(ValueError):
    """A cotangent does not match the shape of the value it belongs to."""


@dataclass(frozen=True)
class DiffOp:
    name: str
    forward: Callable
    vjp: Callable
    n_inputs: int
    n_outputs: int = 1


@dataclass(frozen=True)
class Step:
    op: DiffOp
    inputs: tuple
    outputs: tuple


@dataclass
class GradReport:
    op: str
    input: str
    max_rel_err: float
    max_abs_err: float
    h: float
    passed: bool

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return (
            f"{flag}  {self.op:<20s} {self.input:<12s} "
            f"rel={self.max_rel_err:.3e} abs={self.max_abs_err:.3e} h={self.h:g}"
        )


def is_differentiable(x):
    return isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating)


def run_chain(steps: Sequence[Step], values: dict):
    """Evaluate ``steps`` in order; return the value env and saved state."""
    env = dict(values)
    saved = []
    for step in steps:
        args = [env[name] for name in step.inputs]
        outs, cache = step.op.forward(*args)
        if len(outs) != len(step.outputs):
            raise ChainShapeError(
                f"{step.op.name}: produced {len(outs)} outputs, "
                f"wired to {len(step.outputs)}"
            )
        for name, val in zip(step.outputs, outs):
            env[name] = val
        saved.append(cache)
    return env, saved


def _accumulate(grads, name, g):
    if g is None:
        return
    if name in grads and grads[name] is not None:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def backprop_chain(steps: Sequence[Step], values: dict, cotangents: dict, saved=None):
    """Reverse-mode sweep over a Wengert list.

    ``values`` holds the chain inputs (and, when ``saved`` is given, every
    intermediate from :func:`run_chain`).  ``cotangents`` maps output
    names to their seeds.  Returns a dict of gradients for every name that
    received one; fan-out is summed.
    """
    if saved is None:
        values, saved = run_chain(steps, values)
    grads = {}
    for name, g in cotangents.items():
        if g is None:
            continue
        g = np.asarray(g)
        if np.shape(values[name]) != g.shape:
            raise ChainShapeError(
                f"cotangent for {name!r} has shape {g.shape}, "
                f"value has shape {np.shape(values[name])}"
            )
        _accumulate(grads, name, g)
    for step, cache in zip(reversed(steps), reversed(saved)):
        cts = []
        for name in step.outputs:
            g = grads.get(name)
            if g is not None and np.shape(g) != np.shape(values[name]):
                raise ChainShapeError(
                    f"{step.op.name}: cotangent for {name!r} has shape "
                    f"{np.shape(g)}, value has shape {np.shape(values[name])}"
                )
            cts.append(g)
        if all(g is None for g in cts):
            continue
        in_grads = step.op.vjp(cache, *cts)
        for name, g in zip(step.inputs, in_grads):
            _accumulate(grads, name, g)
    return grads


def _pairing(outs, vs):
    total = 0.0
    for o, v in zip(outs, vs):
        if v is not None:
            total += float(np.sum(np.asarray(o, dtype=np.float64) * v))
    return total


def grad_check(op: DiffOp, inputs, h=1e-5, tol=1e-4, seed=0, abs_floor=1e-8,
               wrt=None, names=None):
    """Compare ``op.vjp`` against central finite differences.

    A random cotangent ``v`` is drawn for every float output; for each
    coordinate ``x_i`` of each checked input the numeric derivative is
    ``(<v, f(x + h e_i)> - <v, f(x - h e_i)>) / 2h``.  Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``; coordinates whose absolute error is
    below ``abs_floor`` are exempt.  Returns one :class:`GradReport` per
    input.
    """
    inputs = [np.array(x, copy=True) if is_differentiable(np.asarray(x)) else x
              for x in inputs]
    names = list(names) if names is not None else [f"x{i}" for i in range(len(inputs))]
    rng = np.random.default_rng(seed)

    outs, cache = op.forward(*inputs)
    for o in outs:
        if is_differentiable(np.asarray(o)) and not np.all(np.isfinite(o)):
            raise GradCheckError(f"{op.name}: non-finite forward output")
    vs = [rng.standard_normal(np.shape(o)) if is_differentiable(np.asarray(o)) else None
          for o in outs]
    analytic = op.vjp(cache, *vs)

    if wrt is None:
        wrt = [i for i, x in enumerate(inputs) if is_differentiable(x)]
    reports = []
    for i in wrt:
        x = inputs[i]
        ga = analytic[i]
        ga = np.zeros_like(x) if ga is None else np.asarray(ga)
        gn = np.zeros_like(x)
        flat = x.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            plus = op.forward(*inputs)[0]
            flat[idx] = orig - h
            minus = op.forward(*inputs)[0]
            flat[idx] = orig
            for o in (*plus, *minus):
                if is_differentiable(np.asarray(o)) and not np.all(np.isfinite(o)):
                    raise GradCheckError(f"{op.name}: non-finite output at {names[i]}[{idx}]")
            gn.reshape(-1)[idx] = (_pairing(plus, vs) - _pairing(minus, vs)) / (2 * h)
        abs_err = np.abs(ga - gn)
        rel_err = abs_err / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)
        # coordinates below the absolute floor are exempt from the relative test
        counted = rel_err[abs_err >= abs_floor]
        max_rel = float(counted.max()) if counted.size else 0.0
        reports.append(GradReport(
            op=op.name,
            input=names[i],
            max_rel_err=max_rel,
            max_abs_err=float(abs_err.max()),
            h=h,
            passed=max_rel < tol,
        ))
    return reports


def reports_to_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2)


def reports_to_text(reports):
    return "\n".join(r.line() for r in reports)
