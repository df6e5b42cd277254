"""Constrained total-variation density reconstruction with known coil maps.

Solves ``min TV(p)`` subject to ``||y_k - F_s S_k p|| <= eps_k`` for every coil
with scaled ADMM. The splitting stacks ``A = [I; F_s S_1; ...; F_s S_C]`` and
``z = A p``; one iteration is a TV prox on ``z_0``, ball projections for the
``z_k``, a CG solve for ``p`` and a dual ascent step. The penalty ``rho``
adapts to balance the primal and dual residuals.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._cg import cg
from .encoding import KSpaceData, adjoint_fs, estimate_eps, forward_fs, normal_fs, normal_symbol

__all__ = [
    "AdmmConfig",
    "AdmmState",
    "AdmmResult",
    "project_ball",
    "grad",
    "grad_adjoint",
    "tv_norm",
    "prox_tv",
    "gram_preconditioner",
    "p_update",
    "adapt_rho",
    "admm_reconstruct",
]

log = logging.getLogger(__name__)


@dataclass
class AdmmConfig:
    max_iters: int = 300
    rho0: float = 1.0
    mu: float = 10.0
    rho_factor: float = 2.0
    tv_inner_iters: int = 20
    tol_rel: float = 1e-5
    eps: np.ndarray | None = None
    eps_factor: float = 1.0
    cg_tol: float = 1e-8
    cg_iters: int = 200

    def __post_init__(self):
        if self.max_iters < 1 or self.tv_inner_iters < 1:
            raise ValueError("iteration counts must be positive")
        if self.rho0 <= 0 or self.tol_rel <= 0:
            raise ValueError("rho0 and tol_rel must be positive")
        if self.mu <= 1 or self.rho_factor <= 1:
            raise ValueError("mu and rho_factor must exceed 1")


@dataclass
class AdmmState:
    p: np.ndarray
    z0: np.ndarray
    zk: np.ndarray
    u0: np.ndarray
    uk: np.ndarray
    rho: float
    iter: int = 0
    primal_res: float = np.inf
    dual_res: float = np.inf


@dataclass
class AdmmResult:
    density: np.ndarray
    converged: bool
    feasible: bool
    iterations: int
    coil_residuals: np.ndarray
    eps: np.ndarray
    history: list = field(default_factory=list)
    state: AdmmState | None = None


def project_ball(z, y, eps: float):
    """Projection onto ``{x : ||x - y|| <= eps}``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    z = np.asarray(z)
    y = np.asarray(y)
    d = z - y
    n = max(np.linalg.norm(d), eps)
    if n == 0:
        return y.astype(np.result_type(z, y), copy=True)
    return y + eps * d / n


def grad(x):
    """Forward differences along every axis, zero at the far edge."""
    x = np.asarray(x)
    out = np.zeros((x.ndim,) + x.shape, dtype=x.dtype)
    for ax in range(x.ndim):
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(0, -1)
        out[(ax,) + tuple(sl)] = np.diff(x, axis=ax)
    return out


def grad_adjoint(g):
    """Adjoint of :func:`grad` (minus the discrete divergence)."""
    g = np.asarray(g)
    nd = g.ndim - 1
    out = np.zeros(g.shape[1:], dtype=g.dtype)
    for ax in range(nd):
        comp = g[ax]
        head = [slice(None)] * nd
        head[ax] = slice(0, -1)
        tail = [slice(None)] * nd
        tail[ax] = slice(1, None)
        out[tuple(head)] -= comp[tuple(head)]
        out[tuple(tail)] += comp[tuple(head)]
    return out


def tv_norm(x) -> float:
    """Isotropic TV; real and imaginary parts share the gradient magnitude."""
    g = grad(x)
    return float(np.sum(np.sqrt(np.sum(np.abs(g) ** 2, axis=0))))


def prox_tv(z, weight: float, inner_iters: int = 20, dual=None, return_dual: bool = False):
    """Approximate ``argmin_x 1/(2 weight) ||x - z||^2 + TV(x)``.

    Fast projected gradient on the dual field (Beck-Teboulle). ``dual`` warm
    starts the iteration; pass ``return_dual=True`` to get it back.
    """
    if weight <= 0:
        raise ValueError("weight must be positive")
    z = np.asarray(z)
    nd = z.ndim
    lip = 4.0 * nd
    P = np.zeros((nd,) + z.shape, dtype=complex) if dual is None else dual.astype(complex, copy=True)
    Q = P.copy()
    t = 1.0
    for _ in range(inner_iters):
        x = z - weight * grad_adjoint(Q)
        Pn = Q + grad(x) / (weight * lip)
        Pn /= np.maximum(1.0, np.sqrt(np.sum(np.abs(Pn) ** 2, axis=0)))
        tn = (1 + np.sqrt(1 + 4 * t * t)) / 2
        Q = Pn + ((t - 1) / tn) * (Pn - P)
        P, t = Pn, tn
    x = z - weight * grad_adjoint(P)
    if not np.iscomplexobj(z):
        x = x.real
    return (x, P) if return_dual else x


def _gram(p, sens, traj):
    return p + np.sum(sens.conj() * normal_fs(traj, sens * p), axis=0)


def gram_preconditioner(sens, traj):
    """SPD approximation of ``(I + sum_k S_k^H F_s^H F_s S_k)^{-1}``.

    With ``E = sum_k |s_k|^2`` the system is close to
    ``E^{1/2} (E^{-1} + F_s^H F_s) E^{1/2}``; ``E^{-1}`` is replaced by its
    mean and ``F_s^H F_s`` by a circulant fit, so the inverse is two
    diagonal scalings around an FFT pair.
    """
    energy = np.sum(np.abs(sens) ** 2, axis=0)
    energy = np.maximum(energy, 1e-6 * energy.max())
    root = np.sqrt(energy)
    inv_sym = 1.0 / (1.0 / energy.mean() + normal_symbol(traj))
    ax = tuple(range(energy.ndim))

    def apply(r):
        w = np.fft.ifftn(np.fft.fftn(r / root, axes=ax) * inv_sym, axes=ax)
        return w / root

    return apply


def p_update(z, u, sens, traj, x0=None, tol: float = 1e-8, maxiter: int = 200,
             precond=None):
    """Solve ``(I + sum_k S_k^H F_s^H F_s S_k) p = z0 - u0 + sum_k S_k^H F_s^H (z_k - u_k)``.

    ``z`` and ``u`` are ``(image_part, data_part)`` pairs with the data part
    ``C x K``. ``precond`` is passed on to CG (see :func:`gram_preconditioner`).
    """
    z0, zk = z
    u0, uk = u
    rhs = z0 - u0 + np.sum(sens.conj() * adjoint_fs(traj, zk - uk), axis=0)
    p, _ = cg(lambda v: _gram(v, sens, traj), rhs, x0=x0, tol=tol, maxiter=maxiter,
              raise_on_stall=True, precond=precond)
    return p


def adapt_rho(primal_res: float, dual_res: float, rho: float, mu: float = 10.0,
              factor: float = 2.0) -> float:
    """Residual balancing: grow rho when the primal residual dominates."""
    if primal_res > mu * dual_res:
        return rho * factor
    if dual_res > mu * primal_res:
        return rho / factor
    return rho


def _rdot(a, b):
    """Per-coil ``Re <a, b>`` over the image axes."""
    return np.sum((a.conj() * b).reshape(len(a), -1), axis=1).real


class _DataPart:
    """A stack of per-coil k-space vectors ``F_s h_k + beta_k y_k``.

    The ball projection is affine in its argument, so every data-side ADMM
    variable stays in this form. Keeping ``h`` together with
    ``F_s^H F_s h`` lets all norms and inner products go through the normal
    operator (an FFT pair for radial data) instead of the NUDFT.
    """

    def __init__(self, h, th, beta):
        self.h, self.th, self.beta = h, th, beta

    def sqnorm(self, fhy, ynorm2):
        """``||F_s h_k + beta_k y_k||^2`` per coil."""
        v = _rdot(self.h, self.th) + 2 * self.beta * _rdot(self.h, fhy) + self.beta ** 2 * ynorm2
        return np.maximum(v, 0.0)

    def combine(self, a, other, b):
        return _DataPart(a * self.h + b * other.h, a * self.th + b * other.th,
                         a * self.beta + b * other.beta)

    def scaled(self, c):
        c = np.asarray(c, dtype=float)
        cb = c.reshape((-1,) + (1,) * (self.h.ndim - 1))
        return _DataPart(cb * self.h, cb * self.th, c * self.beta)

    def materialize(self, traj, y):
        return forward_fs(traj, self.h) + self.beta[:, None] * y


def admm_reconstruct(y: KSpaceData, traj, sens, cfg: AdmmConfig | None = None,
                     p0=None) -> AdmmResult:
    """Minimum-TV density consistent with every coil's noise ball.

    Ball radii come from ``cfg.eps``, then ``y.eps``, then
    :func:`~maxwellpi.encoding.estimate_eps`. The maps are rescaled
    internally (the returned density is in the units of the given maps);
    feasibility allows ``1.01 eps_k`` plus ``tol_rel ||y_k||`` of slack so
    noiseless runs with ``eps = 0`` can qualify.
    """
    cfg = AdmmConfig() if cfg is None else cfg
    sens = np.asarray(sens)
    data = y.samples
    if sens.shape[0] != data.shape[0]:
        raise ValueError(f"{sens.shape[0]} maps for {data.shape[0]} coils")
    if cfg.eps is not None:
        eps = np.broadcast_to(np.asarray(cfg.eps, dtype=float), (data.shape[0],)).copy()
    elif y.eps is not None:
        eps = y.eps.copy()
    else:
        eps = estimate_eps(y, cfg.eps_factor)

    # Scale the maps so the weakest covered voxels see unit coil energy; the
    # data term then dominates the identity block of A^H A everywhere.
    rss = np.sqrt(np.sum(np.abs(sens) ** 2, axis=0))
    if not rss.max() > 0:
        raise ValueError("all-zero sensitivity maps")
    map_scale = float(np.percentile(rss[rss > 1e-3 * rss.max()], 2))
    sens = sens / map_scale
    fhy = adjoint_fs(traj, data)
    if p0 is None:
        back = np.sum(sens.conj() * fhy, axis=0)
        p0 = back / np.maximum(np.sum(np.abs(sens) ** 2, axis=0), 1e-3)
    else:
        p0 = np.asarray(p0, dtype=complex) * map_scale
    # Work in units of the per-sample noise level: TV is 1-homogeneous, so
    # this fixes what rho means (rho = 1 shifts voxels by about one noise
    # std). Noiseless data falls back to the back-projection peak.
    scale = float(np.sqrt(np.mean(eps ** 2) / (2 * data.shape[1])))
    if not scale > 0:
        scale = float(np.abs(p0).max()) or float(np.linalg.norm(data)) or 1.0
    data = data / scale
    fhy = fhy / scale
    ynorm2 = np.sum(np.abs(data) ** 2, axis=1)
    eps_n = eps / scale
    p = p0 / scale
    C = data.shape[0]

    def gram_coils(img):
        sp = sens * img
        return sp, normal_fs(traj, sp)

    sp, tsp = gram_coils(p)
    ap = _DataPart(sp, tsp, np.zeros(C))          # A_k p
    yk = _DataPart(np.zeros_like(sp), np.zeros_like(sp), np.ones(C))  # y_k
    uk = _DataPart(np.zeros_like(sp), np.zeros_like(sp), np.zeros(C))
    u0 = np.zeros_like(p)
    rho = cfg.rho0
    precond = gram_preconditioner(sens, traj)
    tv_dual = None
    history = []
    converged = False
    it = 0
    primal = dual = np.inf
    for it in range(1, cfg.max_iters + 1):
        z0, tv_dual = prox_tv(p + u0, 1.0 / rho, cfg.tv_inner_iters,
                              dual=tv_dual, return_dual=True)
        # z_k = y_k + c_k (A_k p + u_k - y_k)
        off = _DataPart(ap.h + uk.h, ap.th + uk.th, ap.beta + uk.beta - 1.0)
        dist = np.sqrt(off.sqnorm(fhy, ynorm2))
        c = np.where(dist > eps_n, eps_n / np.maximum(dist, 1e-300), 1.0)
        zk = yk.combine(1.0, off.scaled(c), 1.0)
        rhs_k = zk.combine(1.0, uk, -1.0)
        rhs = z0 - u0 + np.sum(sens.conj() * (rhs_k.th + rhs_k.beta.reshape((-1,) + (1,) * p.ndim) * fhy),
                               axis=0)
        p_new, _ = cg(lambda v: _gram(v, sens, traj), rhs, x0=p, tol=cfg.cg_tol,
                      maxiter=cfg.cg_iters, raise_on_stall=True, precond=precond)
        sp, tsp = gram_coils(p_new)
        ap_new = _DataPart(sp, tsp, np.zeros(C))
        r0 = p_new - z0
        rk = ap_new.combine(1.0, zk, -1.0)
        primal = float(np.sqrt(np.vdot(r0, r0).real + rk.sqnorm(fhy, ynorm2).sum()))
        dap = ap_new.combine(1.0, ap, -1.0)
        dual = rho * float(np.sqrt(np.linalg.norm(p_new - p) ** 2 + np.maximum(_rdot(dap.h, dap.th), 0).sum()))
        u0 = u0 + r0
        uk = uk.combine(1.0, rk, 1.0)
        p, ap = p_new, ap_new

        ap_n2 = np.maximum(_rdot(ap.h, ap.th), 0).sum()
        pri_scale = max(np.sqrt(np.linalg.norm(p) ** 2 + ap_n2),
                        np.sqrt(np.linalg.norm(z0) ** 2 + zk.sqnorm(fhy, ynorm2).sum()))
        dual_scale = rho * np.sqrt(np.linalg.norm(u0) ** 2 + uk.sqnorm(fhy, ynorm2).sum())
        coil_res = np.sqrt(ap.combine(1.0, yk, -1.0).sqnorm(fhy, ynorm2))
        history.append({"iter": it, "primal": primal, "dual": dual, "rho": rho,
                        "tv": tv_norm(p) * scale / map_scale,
                        "max_constraint_ratio": float(np.max(coil_res / np.maximum(eps_n, 1e-300)))})
        if primal <= cfg.tol_rel * pri_scale and dual <= cfg.tol_rel * max(dual_scale, 1e-300):
            converged = True
            break
        # keep rho within a bounded range so stalled inner solves cannot drive it to overflow
        rho_new = float(np.clip(adapt_rho(primal, dual, rho, cfg.mu, cfg.rho_factor),
                                cfg.rho0 * 1e-6, cfg.rho0 * 1e6))
        if rho_new != rho:
            u0 = u0 * (rho / rho_new)
            uk = uk.scaled(np.full(C, rho / rho_new))
            rho = rho_new

    # final residuals straight from the sampling operator
    ap_final = forward_fs(traj, sens * p)
    coil_res = np.linalg.norm(data - ap_final, axis=1) * scale
    state = AdmmState(p=p * scale / map_scale, z0=z0 * scale / map_scale,
                      zk=zk.materialize(traj, data) * scale, u0=u0 * scale / map_scale,
                      uk=uk.materialize(traj, data) * scale, rho=rho, iter=it,
                      primal_res=primal, dual_res=dual)
    density = state.p
    feasible = bool(np.all(coil_res <= 1.01 * eps + cfg.tol_rel * np.linalg.norm(y.samples)))
    if not converged and not feasible:
        warnings.warn("ADMM stopped above the noise balls; the constraint set may be infeasible",
                      RuntimeWarning, stacklevel=2)
    log.debug("admm: %d iterations, converged=%s, feasible=%s", it, converged, feasible)
    return AdmmResult(density, converged, feasible, it, coil_res, eps, history, state)
