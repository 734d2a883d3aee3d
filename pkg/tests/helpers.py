"""Shared test utilities built on the oracles (not part of the package)."""

import numpy as np

from cgrseg.tensor import Rng, Tape, Tensor, backward, mul_hadamard, sum_all

from oracles import finite_difference, max_rel_err

TOL = 1e-4
EPS = 1e-5


def rt(rng, dims, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(dims, lo, hi), copy=False)


def weighted(out, seed=991):
    """Scalar loss with distinct per-element weights (better FD conditioning
    than a plain sum for ops with symmetric cancellation, e.g. softmax)."""
    w = Tensor(Rng(seed).uniform(out.dims, -1.0, 1.0), copy=False)
    return sum_all(mul_hadamard(out, w))


def fd_check(build, leaves, tol=TOL, eps=EPS):
    """Compare taped backward() against central differences on each leaf.

    ``build`` must be a pure function of the leaves' current data (snapshot
    and restore any batch-norm running buffers it touches).
    """
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    analytic = [t.grad.copy() for t in leaves]
    numeric = finite_difference(lambda: build().item(), [t.data for t in leaves], eps)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst <= tol, f"worst rel err {worst:.3e}"


def restoring(buffers, fn):
    """Wrap fn so the given tensors' data is restored after each call."""

    def wrapped(*args, **kwargs):
        snap = [b.data.copy() for b in buffers]
        try:
            return fn(*args, **kwargs)
        finally:
            for b, s in zip(buffers, snap):
                b.data[...] = s

    return wrapped


def params_of(obj, prefix="p"):
    """Learnable tensors of a params dataclass (skips running buffers)."""
    return [t for _, kind, t in obj.tensors(prefix) if kind == "param"]


def buffers_of(obj, prefix="p"):
    return [t for _, kind, t in obj.tensors(prefix) if kind == "buffer"]
