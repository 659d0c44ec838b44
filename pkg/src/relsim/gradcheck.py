"""Central finite-difference gradient verification.

The numeric side never touches the tape: it re-runs the forward pass with
perturbed parameters, so it stays an independent oracle for the analytic
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autodiff import Array, Tape, Tensor


def numeric_gradient(
    f: Callable[[], float], p: Tensor, step: float = 1e-5
) -> Array:
    """d f / d p by central differences, one element at a time."""
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * step)
    return g


@dataclass(frozen=True)
class GradCheckResult:
    ok: bool
    worst_param: str
    worst_abs: float
    worst_rel: float

    def __str__(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return (
            f"{status}: worst abs {self.worst_abs:.3e}, "
            f"worst rel {self.worst_rel:.3e} at {self.worst_param!r}"
        )


def compare_gradients(
    build_loss: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-6,
) -> GradCheckResult:
    """Tape gradients vs. finite differences for every named parameter.

    An element passes when its absolute deviation is below ``abs_tol`` or its
    relative deviation (against the larger magnitude) is below ``rel_tol``.
    ``build_loss`` must be deterministic; it is re-evaluated many times.
    """
    with Tape() as tape:
        loss = build_loss()
        grads = tape.backward(loss)
    analytic = {name: grads.wrt(p) for name, p in params.items()}

    def forward() -> float:
        return build_loss().item()

    ok = True
    worst_param, worst_abs, worst_rel = "", 0.0, 0.0
    for name, p in params.items():
        num = numeric_gradient(forward, p, step=step)
        ana = analytic[name]
        abs_err = np.abs(ana - num)
        denom = np.maximum(np.abs(ana), np.abs(num))
        with np.errstate(divide="ignore", invalid="ignore"):
            rel_err = np.where(denom > 0, abs_err / denom, 0.0)
        bad = (abs_err >= abs_tol) & (rel_err >= rel_tol)
        if bad.any():
            ok = False
        i = int(abs_err.argmax())
        if abs_err.reshape(-1)[i] >= worst_abs:
            worst_param = name
            worst_abs = float(abs_err.reshape(-1)[i])
            worst_rel = float(rel_err.reshape(-1)[i])
    return GradCheckResult(
        ok=ok, worst_param=worst_param, worst_abs=worst_abs, worst_rel=worst_rel
    )
