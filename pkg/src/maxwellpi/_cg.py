"""Conjugate gradients for Hermitian positive definite operators on arrays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CGError(RuntimeError):
    """CG broke down; ``iterate`` holds the last iterate for inspection."""

    def __init__(self, msg, iterate=None, residuals=None):
        super().__init__(msg)
        self.iterate = iterate
        self.residuals = residuals


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool


def cg(apply, b, x0=None, tol=1e-6, maxiter=100, callback=None, growth_limit=5,
       growth_factor=10.0, raise_on_stall=False, precond=None):
    """Solve ``apply(x) = b`` to relative residual ``tol``.

    ``precond`` optionally applies an SPD approximation of the inverse; the
    stopping test always uses the unpreconditioned residual.

    Raises CGError after ``growth_limit`` consecutive residual increases that
    end ``growth_factor`` times above the starting residual, or on a
    non-positive curvature. CG residuals oscillate on ill-conditioned SPD
    systems without any loss of progress, so only a blow-up counts as
    divergence. ``callback(x)`` runs after every update.
    """
    b = np.asarray(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=b.dtype)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), CGInfo(0, 0.0, True)
    r = b - apply(x) if x0 is not None else b.copy()
    z = r if precond is None else precond(r)
    p = z.copy()
    rz = np.vdot(r, z).real
    history = [np.linalg.norm(r) / bnorm]
    growth = 0
    it = 0
    while it < maxiter and history[-1] > tol:
        ap = apply(p)
        curv = np.vdot(p, ap).real
        if curv <= 0:
            raise CGError("non-positive curvature in CG", x, history)
        a = rz / curv
        x = x + a * p
        r = r - a * ap
        z = r if precond is None else precond(r)
        rz_new = np.vdot(r, z).real
        it += 1
        history.append(np.linalg.norm(r) / bnorm)
        if callback is not None:
            callback(x)
        growth = growth + 1 if history[-1] > history[-2] else 0
        if growth >= growth_limit and history[-1] > growth_factor * history[0]:
            raise CGError(f"CG diverged: residual grew {growth} iterations in a row",
                          x, history)
        p = z + (rz_new / rz) * p
        rz = rz_new
    converged = history[-1] <= tol
    if raise_on_stall and not converged:
        raise CGError(f"CG stagnated at relative residual {history[-1]:.3e}", x, history)
    return x, CGInfo(it, float(history[-1]), bool(converged))
