"""Conjugate gradient on the damped quadratic model.

Minimizes ``phi(d) = g.d + 1/2 d.(B + lambda I)d`` starting from ``d = 0``.
Termination follows the relative-progress rule: with a trailing window of
``k = max(10, ceil(0.1 i))`` iterations, stop once ``phi_i < 0`` and
``(phi_i - phi_{i-k}) / phi_i < k * tolerance``.
"""

import inspect
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class CGBreakdown(ArithmeticError):
    """The curvature was not positive along a search direction."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class CGAborted(ArithmeticError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class CGTrace:
    phi: list = field(default_factory=list)  # phi of the iterate after each iteration
    residual_norms: list = field(default_factory=list)  # starts with |g|
    termination: str = ""
    best_iteration: int = 0
    residuals: Optional[list] = None

    @property
    def iterations(self):
        return len(self.phi)

    def phi_increases(self, tol=0.0):
        """Indices ``i`` where ``phi[i] > phi[i-1] + tol * |phi[i-1]|``."""
        return [i for i in range(1, len(self.phi)) if self.phi[i] > self.phi[i - 1] + tol * abs(self.phi[i - 1])]

    def is_monotone(self, tol=0.0):
        return not self.phi_increases(tol)


def progress_window(i):
    return max(10, math.ceil(0.1 * i))


def run_cg(gradient, curvature_operator: Callable, lam=0.0, tolerance=5e-4, max_iters=250,
           phi_operator: Optional[Callable] = None, residual_tol=1e-14, store_residuals=False):
    """Approximately minimize the damped quadratic model.

    ``curvature_operator(v, i)`` returns ``B v`` for CG iteration ``i``
    (1-based); plain one-argument callables are accepted too. If
    ``phi_operator`` is given, the traced ``phi`` values are measured with it
    instead of the operator used for the updates, which is how a
    changing-operator run is judged against a single fixed operator.

    Returns the best-``phi`` iterate and its :class:`CGTrace`.
    """
    g = np.asarray(gradient, dtype=float)
    op = _with_iteration(curvature_operator)
    phi_op = None if phi_operator is None else _with_iteration(phi_operator)
    trace = CGTrace(residuals=[] if store_residuals else None)
    d = np.zeros_like(g)
    r = -g
    p = r.copy()
    rr = float(r @ r)
    gnorm = math.sqrt(rr)
    trace.residual_norms.append(gnorm)
    if store_residuals:
        trace.residuals.append(r.copy())
    best_d, best_phi = d.copy(), 0.0
    if gnorm == 0.0:
        trace.termination = "zero gradient"
        return best_d, trace

    for i in range(1, max_iters + 1):
        Ap = op(p, i) + lam * p
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            trace.termination = "non-finite curvature"
            raise CGAborted(f"CG iteration {i}: non-finite curvature", trace)
        if pAp <= 0.0:
            trace.termination = "negative curvature"
            raise CGBreakdown(f"CG iteration {i}: p.(B + lambda I)p = {pAp:.3e} <= 0", trace)
        alpha = rr / pAp
        d = d + alpha * p
        r = r - alpha * Ap
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            trace.termination = "non-finite residual"
            raise CGAborted(f"CG iteration {i}: non-finite residual", trace)
        if phi_op is None:
            phi = 0.5 * float(d @ (g - r))
        else:
            phi = float(g @ d + 0.5 * d @ (phi_op(d, i) + lam * d))
        trace.phi.append(phi)
        trace.residual_norms.append(math.sqrt(rr_new))
        if store_residuals:
            trace.residuals.append(r.copy())
        if phi < best_phi:
            best_d, best_phi, trace.best_iteration = d.copy(), phi, i

        if math.sqrt(rr_new) <= residual_tol * gnorm:
            trace.termination = "residual"
            break
        k = progress_window(i)
        if i > k and phi < 0 and (phi - trace.phi[i - 1 - k]) / phi < k * tolerance:
            trace.termination = "progress"
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    else:
        trace.termination = "max_iters"
    return best_d, trace


def _with_iteration(fn):
    try:
        params = inspect.signature(fn).parameters
        takes_two = len(params) >= 2 or any(p.kind == p.VAR_POSITIONAL for p in params.values())
    except (TypeError, ValueError):
        takes_two = False
    return fn if takes_two else (lambda v, i: fn(v))


def quadratic_model(gradient, curvature_operator, lam, d):
    """``g.d + 1/2 d.(B + lambda I)d`` evaluated directly."""
    d = np.asarray(d, dtype=float)
    return float(gradient @ d + 0.5 * d @ (curvature_operator(d) + lam * d))
