"""Truncated higher-order SVD and compressed application of the field basis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import FieldBasis, FovGrid

__all__ = [
    "Tucker",
    "TuckerBasis",
    "kmode_product",
    "unfold",
    "hosvd",
    "reconstruct",
    "compress_basis",
    "tucker_apply",
    "tucker_apply_adjoint",
]


@dataclass(frozen=True, eq=False)
class Tucker:
    """Core tensor and one factor per mode; ``factors[k]`` is ``n_k x r_k``."""

    core: np.ndarray
    factors: tuple[np.ndarray, ...]
    eps: float

    @property
    def ranks(self) -> tuple[int, ...]:
        return self.core.shape

    @property
    def full_shape(self) -> tuple[int, ...]:
        return tuple(u.shape[0] for u in self.factors)

    @property
    def n_stored(self) -> int:
        return self.core.size + sum(u.size for u in self.factors)

    @property
    def compression_ratio(self) -> float:
        """Stored element count relative to the dense tensor."""
        return self.n_stored / float(np.prod(self.full_shape))


@dataclass(frozen=True, eq=False)
class TuckerBasis(Tucker):
    """Four-mode Tucker form of a field basis (three spatial modes + index)."""

    fov: FovGrid = None

    @property
    def q(self) -> int:
        return self.factors[3].shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.fov.shape

    def truncate(self, q: int) -> "TuckerBasis":
        if not 1 <= q <= self.q:
            raise ValueError(f"cannot truncate a q={self.q} basis to {q}")
        factors = self.factors[:3] + (self.factors[3][:q],)
        return TuckerBasis(self.core, factors, self.eps, self.fov)

    def apply(self, coeffs):
        return tucker_apply(self, coeffs)

    def adjoint(self, images):
        return tucker_apply_adjoint(self, images)


def kmode_product(t: np.ndarray, b: np.ndarray, k: int) -> np.ndarray:
    """``t x_k b``: contract mode ``k`` of ``t`` with the columns of ``b``."""
    t = np.asarray(t)
    b = np.asarray(b)
    if b.ndim != 2 or b.shape[1] != t.shape[k]:
        raise ValueError(f"mode-{k} size {t.shape[k]} does not match matrix {b.shape}")
    return np.moveaxis(np.tensordot(t, b, axes=(k, 1)), -1, k)


def unfold(t: np.ndarray, k: int) -> np.ndarray:
    return np.moveaxis(t, k, 0).reshape(t.shape[k], -1)


def _rank_for(s: np.ndarray, budget_sq: float) -> int:
    # smallest r whose discarded tail energy fits the budget
    tail = np.concatenate([np.cumsum((s ** 2)[::-1])[::-1], [0.0]])
    return max(1, int(np.argmax(tail <= budget_sq)))


def hosvd(t: np.ndarray, eps: float = 0.0) -> Tucker:
    """Truncated HOSVD with relative Frobenius error at most ``eps``.

    Each mode discards singular-value tail energy up to ``eps**2 / M`` of the
    squared tensor norm, which bounds the total error by ``eps * ||t||``.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    t = np.asarray(t)
    budget = eps ** 2 * np.vdot(t, t).real / t.ndim
    factors = []
    for k in range(t.ndim):
        u, s, _ = np.linalg.svd(unfold(t, k), full_matrices=False)
        factors.append(np.ascontiguousarray(u[:, : _rank_for(s, budget)]))
    core = t
    for k, u in enumerate(factors):
        core = kmode_product(core, u.conj().T, k)
    return Tucker(core, tuple(factors), float(eps))


def reconstruct(tk: Tucker) -> np.ndarray:
    out = tk.core
    for k, u in enumerate(tk.factors):
        out = kmode_product(out, u, k)
    return out


def compress_basis(basis: FieldBasis, eps: float) -> TuckerBasis:
    """Tucker-compress a basis stacked as an ``n1 x n2 x n3 x q`` tensor.

    Voxels outside the support are stored as zeros.
    """
    fov = basis.fov
    stack = fov.scatter(basis.vectors.T).reshape((basis.q,) + fov.dims)
    tk = hosvd(np.moveaxis(stack, 0, -1), eps)
    return TuckerBasis(tk.core, tk.factors, tk.eps, fov)


def tucker_apply(tb: TuckerBasis, coeffs) -> np.ndarray:
    """``U_h @ coeffs`` as images, without forming ``U_h``; batch axes lead."""
    coeffs = np.asarray(coeffs)
    if coeffs.shape[-1] != tb.q:
        raise ValueError(f"expected {tb.q} coefficients, got {coeffs.shape[-1]}")
    u1, u2, u3, u4 = tb.factors
    w = coeffs @ u4
    g = np.tensordot(w, tb.core, axes=([-1], [3]))
    img = np.einsum("...abc,ia,jb,kc->...ijk", g, u1, u2, u3, optimize=True)
    img = img * tb.fov.support
    return img.reshape(coeffs.shape[:-1] + tb.fov.shape)


def tucker_apply_adjoint(tb: TuckerBasis, images) -> np.ndarray:
    """``U_h^H`` applied to image(s) of the grid shape."""
    images = np.asarray(images)
    shape = tb.fov.shape
    if images.shape[images.ndim - len(shape):] != shape:
        raise ValueError(f"expected trailing image shape {shape}, got {images.shape}")
    lead = images.shape[: images.ndim - len(shape)]
    f = images.reshape(lead + tb.fov.dims) * tb.fov.support
    u1, u2, u3, u4 = tb.factors
    c = np.einsum("...ijk,ia,jb,kc->...abc", f, u1.conj(), u2.conj(), u3.conj(),
                  optimize=True)
    w = np.tensordot(c, tb.core.conj(), axes=([-3, -2, -1], [0, 1, 2]))
    return w @ u4.conj().T
