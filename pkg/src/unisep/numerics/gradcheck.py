"""Central finite-difference verification of analytic gradients.

Checks run in 64-bit so the h^2 truncation error of the central difference
dominates roundoff; h = 1e-5 puts that error well under the 1e-4 relative
tolerance for reasonably scaled functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from . import autodiff as T


def finite_difference_grad(f, arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """d f / d arrays[name] by central differences; f maps the dict to a float."""
    grads = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = float(f(arrays))
            arr[idx] = orig - h
            fm = float(f(arrays))
            arr[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    per_param: dict
    passed: bool
    tolerance: float

    def __str__(self):
        lines = [f"gradient check: max relative error {self.max_rel_err:.3e} "
                 f"({'PASS' if self.passed else 'FAIL'} at {self.tolerance:.0e})"]
        for name, err in sorted(self.per_param.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(build_loss, params: dict[str, np.ndarray], h: float = 1e-5,
                    tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of build_loss against central differences.

    build_loss receives {name: Tensor} leaves (requires_grad set) and must
    return a scalar Tensor. Runs entirely in 64-bit mode.
    """
    if not params:
        raise ValidationError("gradient check needs at least one parameter")
    with T.precision("float64"):
        arrays = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
        leaves = {k: T.Tensor(a, requires_grad=True) for k, a in arrays.items()}
        loss = build_loss(leaves)
        T.backward(loss)
        analytic = {k: (leaves[k].grad if leaves[k].grad is not None
                        else np.zeros_like(arrays[k])) for k in arrays}

        def f(arrs):
            fresh = {k: T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=False)
                     for k, a in arrs.items()}
            return build_loss(fresh).item()

        numeric = finite_difference_grad(f, arrays, h=h)
    per_param = {k: _rel_err(analytic[k], numeric[k]) for k in arrays}
    worst = max(per_param.values())
    return GradCheckReport(max_rel_err=worst, per_param=per_param,
                           passed=worst <= tolerance, tolerance=tolerance)
