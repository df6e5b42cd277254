"""Joint density / coil-coefficient estimation by regularized Gauss-Newton.

Each sensitivity map is constrained to the span of a field basis,
``s_k = U alpha_k``, and the bilinear model ``G(p, alpha)_k = F_s(U alpha_k * p)``
is linearized around the current iterate. The damped normal equations of
every linearization are solved with CG.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._cg import CGError, cg
from .encoding import KSpaceData, adjoint_fs, forward_fs, normal_fs

__all__ = [
    "IrgnConfig",
    "IrgnState",
    "IrgnResult",
    "g_apply",
    "jacobian_apply",
    "jacobian_adjoint_apply",
    "normal_apply",
    "irgn_reconstruct",
]

log = logging.getLogger(__name__)


@dataclass
class IrgnConfig:
    """Solver settings.

    ``alpha0``/``beta0`` weight the density and coefficient penalties at the
    first outer iteration and shrink by ``decay`` per iteration. ``p_init`` is
    the constant initial density; the density penalty pulls toward it.
    """

    outer_iters: int = 9
    cg_iters: int = 30
    cg_tol: float = 1e-6
    alpha0: float = 1.0
    beta0: float = 1.0
    decay: float = 0.5
    gamma: float = 1.0
    p_init: float = 1.0
    backtrack: bool = False

    def __post_init__(self):
        if self.outer_iters < 1 or self.cg_iters < 1:
            raise ValueError("iteration counts must be positive")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.alpha0 <= 0 or self.beta0 <= 0 or self.gamma <= 0:
            raise ValueError("alpha0, beta0 and gamma must be positive")


@dataclass
class IrgnState:
    p: np.ndarray
    coeffs: np.ndarray
    alpha_n: float = 1.0
    beta_n: float = 1.0
    iter: int = 0
    data_norm: float = 1.0


@dataclass
class IrgnResult:
    density: np.ndarray
    coeffs: np.ndarray
    maps: np.ndarray
    history: list = field(default_factory=list)


def g_apply(p, coeffs, basis, traj):
    """Bilinear model ``F_s((U alpha_k) * p)`` for every coil, ``C x K``."""
    return forward_fs(traj, basis.apply(coeffs) * p)


def jacobian_apply(state: IrgnState, dp, dcoeffs, basis, traj, maps=None):
    """``J (dp, dalpha) = F_s(U alpha_k * dp + p * U dalpha_k)``."""
    maps = basis.apply(state.coeffs) if maps is None else maps
    return forward_fs(traj, maps * dp + state.p * basis.apply(dcoeffs))


def jacobian_adjoint_apply(state: IrgnState, residual, basis, traj, maps=None):
    """``J^H r`` as a (density, coefficients) pair."""
    maps = basis.apply(state.coeffs) if maps is None else maps
    back = adjoint_fs(traj, residual)
    return np.sum(maps.conj() * back, axis=0), basis.adjoint(state.p.conj() * back)


def normal_apply(state: IrgnState, dp, dcoeffs, basis, traj, maps=None):
    """``J^H J (dp, dalpha)`` evaluated through ``F_s^H F_s``."""
    maps = basis.apply(state.coeffs) if maps is None else maps
    img = normal_fs(traj, maps * dp + state.p * basis.apply(dcoeffs))
    return np.sum(maps.conj() * img, axis=0), basis.adjoint(state.p.conj() * img)


def _pack(p, coeffs):
    return np.concatenate([p.ravel(), coeffs.ravel()])


def _unpack(v, shape, cshape):
    n = int(np.prod(shape))
    return v[:n].reshape(shape), v[n:].reshape(cshape)


def _objective(state, y, basis, traj, dp, dco, maps):
    r = y - g_apply(state.p, state.coeffs, basis, traj) - jacobian_apply(
        state, dp, dco, basis, traj, maps)
    return 0.5 * np.vdot(r, r).real


def irgn_reconstruct(y: KSpaceData, traj, basis, cfg: IrgnConfig | None = None,
                     callback=None) -> IrgnResult:
    """Estimate density, basis coefficients and maps from multi-coil data.

    The data are scaled to unit RMS per image voxel (``||y|| = sqrt(N)``)
    before solving, which puts a unit density and unit-norm coil
    coefficients on the same footing as the penalties. The density is scaled
    back at the end, so ``G(density, coeffs)`` approximates the input data.
    ``callback(state)`` runs after each outer iteration.
    """
    cfg = IrgnConfig() if cfg is None else cfg
    if tuple(basis.shape) != tuple(traj.shape):
        raise ValueError(f"basis grid {basis.shape} does not match trajectory {traj.shape}")
    data = y.samples
    shape = tuple(traj.shape)
    scale = float(np.linalg.norm(data)) / np.sqrt(np.prod(shape))
    if scale == 0:
        raise ValueError("all-zero k-space data")
    data = data / scale
    C = data.shape[0]
    p_ref = np.full(shape, cfg.p_init, dtype=complex)
    state = IrgnState(p_ref.copy(), np.zeros((C, basis.q), dtype=complex),
                      cfg.alpha0, cfg.beta0, 0, scale)
    history = []

    for n in range(cfg.outer_iters):
        state.alpha_n = cfg.alpha0 * cfg.decay ** n
        state.beta_n = cfg.beta0 * cfg.decay ** n
        maps = basis.apply(state.coeffs)
        resid = data - forward_fs(traj, maps * state.p)
        g_p, g_c = jacobian_adjoint_apply(state, resid, basis, traj, maps)
        rhs = _pack(g_p - state.alpha_n * (state.p - p_ref), g_c - state.beta_n * state.coeffs)

        def op(v, state=state, maps=maps):
            dp, dco = _unpack(v, shape, state.coeffs.shape)
            a, b = normal_apply(state, dp, dco, basis, traj, maps)
            return _pack(a + state.alpha_n * dp, b + state.beta_n * dco)

        try:
            step, info = cg(op, rhs, tol=cfg.cg_tol, maxiter=cfg.cg_iters)
        except CGError as exc:
            dp, dco = _unpack(exc.iterate, shape, state.coeffs.shape)
            raise CGError(f"outer iteration {n}: {exc}",
                          {"p": state.p, "coeffs": state.coeffs, "dp": dp, "dcoeffs": dco},
                          exc.residuals) from exc
        dp, dco = _unpack(step, shape, state.coeffs.shape)

        gamma = cfg.gamma
        old = np.linalg.norm(resid)
        while True:
            p_new = state.p + gamma * dp
            c_new = state.coeffs + gamma * dco
            new = np.linalg.norm(data - g_apply(p_new, c_new, basis, traj))
            if not cfg.backtrack or new <= old or gamma < 1e-3:
                break
            gamma /= 2
        rel_step = np.linalg.norm(step) / max(np.linalg.norm(_pack(state.p, state.coeffs)), 1e-30)
        state.p, state.coeffs = p_new, c_new
        state.iter = n + 1
        history.append({"iter": n + 1, "alpha": state.alpha_n, "beta": state.beta_n,
                        "residual": float(new), "cg_iters": info.iterations,
                        "cg_residual": info.residual, "gamma": gamma, "rel_step": float(rel_step)})
        log.debug("irgn %d: residual %.3e, cg %d", n + 1, new, info.iterations)
        if callback is not None:
            callback(state)

    density = state.p * scale
    return IrgnResult(density, state.coeffs, basis.apply(state.coeffs), history)
