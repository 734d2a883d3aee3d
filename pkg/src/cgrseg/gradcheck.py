"""Central-finite-difference gradient verification.

The checker runs one taped backward pass, then probes randomly sampled
parameter coordinates with central differences and reports the worst
relative error.  Callers must make the loss a pure function of the
parameter data — freeze batch-norm stats (eval mode) or list the running
buffers so they are restored around every evaluation.

Disagreements below the rounding noise of the difference quotient itself
(~|loss|*ulp/eps) are ignored: such coordinates have true gradients too
small for f64 central differences to measure, and any error small enough
to hide there is also too small to observe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import NumericsError, Tape, Tensor, backward

__all__ = ["GradCheckResult", "grad_check"]

REL_FLOOR = 1e-8
# a central difference cannot resolve direction derivatives smaller than
# the rounding noise of the loss itself, ~|loss|*ulp/eps; disagreements
# inside a small multiple of that budget carry no information
NOISE_SAFETY = 64.0


@dataclass
class GradCheckResult:
    worst_rel: float
    worst_name: str
    checked: int
    within_noise: int = 0  # probes whose disagreement sat under the budget

    def ok(self, tol: float = 1e-4) -> bool:
        return math.isfinite(self.worst_rel) and self.worst_rel <= tol


def _restored(buffers, fn):
    snap = [b.data.copy() for b in buffers]
    try:
        return fn()
    finally:
        for b, s in zip(buffers, snap):
            b.data[...] = s


def grad_check(
    build_loss: Callable[[], Tensor],
    named_params: Sequence[tuple[str, Tensor]],
    rng,
    *,
    n_coords: int = 20,
    eps: float = 1e-5,
    buffers: Iterable[Tensor] = (),
) -> GradCheckResult:
    """Probe ``n_coords`` random parameter coordinates of the scalar loss."""
    if not named_params:
        raise ValueError("no parameters to check")
    if n_coords < 1:
        raise ValueError("n_coords must be >= 1")
    buffers = list(buffers)

    with Tape() as tape:
        loss = _restored(buffers, build_loss)
    if not np.isfinite(loss.data).all():
        raise NumericsError("loss is not finite")
    backward(tape, loss)
    grads = {id(t): t.grad.copy() for _, t in named_params}
    noise_budget = (
        NOISE_SAFETY * abs(loss.item()) * np.finfo(np.float64).eps / eps
    )

    worst_rel, worst_name, within_noise = 0.0, "none", 0
    for _ in range(n_coords):
        pi = int(rng.next_u64() % len(named_params))
        name, t = named_params[pi]
        flat = t.data.reshape(-1)
        ci = int(rng.next_u64() % flat.size)
        keep = flat[ci]

        flat[ci] = keep + eps
        f_plus = _restored(buffers, build_loss).item()
        flat[ci] = keep - eps
        f_minus = _restored(buffers, build_loss).item()
        flat[ci] = keep

        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = grads[id(t)].reshape(-1)[ci]
        diff = abs(analytic - numeric)
        if diff <= noise_budget:
            within_noise += 1  # below what central differences resolve here
            continue
        rel = diff / max(abs(analytic), abs(numeric), REL_FLOOR)
        if rel > worst_rel:
            worst_rel, worst_name = rel, f"{name}[{ci}]"
    return GradCheckResult(worst_rel=worst_rel, worst_name=worst_name,
                           checked=n_coords, within_noise=within_noise)
