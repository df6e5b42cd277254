"""Sampling patterns, the undersampled Fourier operator and the coil forward model.

Images are arrays whose trailing axes are the image shape; any leading axes
(coils, batch) are carried through every operator. The Fourier convention is
the centered unitary DFT: voxel ``i`` sits at position ``i - n // 2`` and the
sample at angular frequency ``k`` (radians per voxel) reads
``sum_r x(r) exp(-j k . r) / sqrt(N)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.fft

__all__ = [
    "GOLDEN_ANGLE_DEG",
    "EncodingError",
    "CartesianMask",
    "PoissonDisc",
    "Radial",
    "KSpaceData",
    "make_trajectory",
    "cartesian_mask",
    "poisson_disc_mask",
    "radial_trajectory",
    "fft_c",
    "ifft_c",
    "forward_fs",
    "adjoint_fs",
    "normal_fs",
    "normal_symbol",
    "forward_model",
    "simulate",
    "add_noise",
    "estimate_sigma",
    "estimate_eps",
]

GOLDEN_ANGLE_DEG = 180.0 * (math.sqrt(5) - 1) / 2  # 111.246...


class EncodingError(ValueError):
    pass


def _freq_grid(shape):
    return np.meshgrid(*[2 * np.pi * (np.arange(n) - n // 2) / n for n in shape],
                       indexing="ij")


class _Masked:
    """Shared behaviour of mask-based (Cartesian grid) trajectories."""

    mask: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    @property
    def n_samples(self) -> int:
        return int(self.mask.sum())

    @property
    def R(self) -> float:
        """Nominal reduction factor ``N / K``."""
        return self.mask.size / self.n_samples

    def kcoords(self) -> np.ndarray:
        return np.stack([g[self.mask] for g in _freq_grid(self.shape)], axis=1)


@dataclass(frozen=True, eq=False)
class CartesianMask(_Masked):
    mask: np.ndarray
    acs_lines: int = 0
    R_p: int = 1
    R_s: int = 1
    caipi_shift: int = 0


@dataclass(frozen=True, eq=False)
class PoissonDisc(_Masked):
    mask: np.ndarray
    target_R: float = 1.0
    acs_region: int = 0
    seed: int | None = 0


@dataclass(frozen=True, eq=False)
class Radial:
    """2D radial spokes through the k-space center."""

    shape: tuple[int, int]
    angles: np.ndarray
    readout_len: int
    golden: bool = True

    @property
    def n_spokes(self) -> int:
        return len(self.angles)

    @property
    def n_samples(self) -> int:
        return self.n_spokes * self.readout_len

    @property
    def R(self) -> float:
        return float(np.prod(self.shape)) / self.n_samples

    def kcoords(self) -> np.ndarray:
        m = np.arange(self.readout_len)
        kr = np.pi * (2 * m - self.readout_len) / self.readout_len
        kx = np.cos(self.angles)[:, None] * kr[None, :]
        ky = np.sin(self.angles)[:, None] * kr[None, :]
        return np.stack([kx.ravel(), ky.ravel()], axis=1)

    @cached_property
    def _phasors(self):
        k = self.kcoords()
        ex = np.exp(-1j * np.outer(k[:, 0], np.arange(self.shape[0]) - self.shape[0] // 2))
        ey = np.exp(-1j * np.outer(k[:, 1], np.arange(self.shape[1]) - self.shape[1] // 2))
        return ex, ey

    @cached_property
    def _toeplitz_kernel(self):
        # FFT of the point-spread function F^H F on a 2x zero-padded grid
        n1, n2 = self.shape
        k = self.kcoords()
        d1 = np.fft.fftfreq(2 * n1, 1 / (2 * n1))
        d2 = np.fft.fftfreq(2 * n2, 1 / (2 * n2))
        px = np.exp(1j * np.outer(d1, k[:, 0]))
        py = np.exp(1j * np.outer(k[:, 1], d2))
        psf = (px @ py) / (n1 * n2)
        psf[n1, :] = 0
        psf[:, n2] = 0
        return np.fft.fft2(psf)


@dataclass(frozen=True, eq=False)
class KSpaceData:
    """Per-coil samples ``C x K``; ``sigma`` is the per-real-component noise std."""

    samples: np.ndarray
    trajectory: object
    sigma: np.ndarray | None = None
    eps: np.ndarray | None = None

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples))
        if s.shape[1] != self.trajectory.n_samples:
            raise EncodingError(
                f"{s.shape[1]} samples per coil, trajectory has {self.trajectory.n_samples}")
        object.__setattr__(self, "samples", s)
        for name in ("sigma", "eps"):
            v = getattr(self, name)
            if v is not None:
                v = np.broadcast_to(np.asarray(v, dtype=float), (s.shape[0],)).copy()
                if np.any(v < 0):
                    raise EncodingError(f"{name} must be >= 0")
                object.__setattr__(self, name, v)

    @property
    def coils(self) -> int:
        return self.samples.shape[0]

    @property
    def K(self) -> int:
        return self.samples.shape[1]


def cartesian_mask(shape, R_p: int = 1, acs: int = 0, R_s: int = 1,
                   caipi: bool = False, caipi_shift: int | None = None) -> CartesianMask:
    """Regular line skipping along axis 0 (and axis 1 when ``R_s > 1``).

    Sampled lines include the center line. The ACS block spans ``acs``
    centered lines (an ``acs x acs`` block when both axes are undersampled);
    with ``caipi`` every successive phase line shifts its slice pattern by
    ``caipi_shift`` (default ``round(R_s / 2)``).
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) < 2:
        raise EncodingError("Cartesian masks need at least two axes")
    if R_p < 1 or R_s < 1:
        raise EncodingError("reduction factors must be >= 1")
    if R_p > shape[0] or R_s > shape[1]:
        raise EncodingError("reduction factor exceeds the grid size")
    if acs < 0 or acs > shape[0] or (R_s > 1 and acs > shape[1]):
        raise EncodingError("ACS region larger than the grid")
    shift = 0
    if caipi:
        shift = int(round(R_s / 2)) if caipi_shift is None else int(caipi_shift)

    c0, c1 = shape[0] // 2, shape[1] // 2
    i = np.arange(shape[0])[:, None]
    j = np.arange(shape[1])[None, :]
    line = (i - c0) % R_p == 0
    step = (i - c0) // R_p
    plane = line & ((j - c1 - step * shift) % R_s == 0)
    lo0 = c0 - acs // 2
    acs_rows = (i >= lo0) & (i < lo0 + acs)
    if R_s > 1:
        lo1 = c1 - acs // 2
        acs_rows = acs_rows & (j >= lo1) & (j < lo1 + acs)
    plane = plane | acs_rows
    mask = np.broadcast_to(plane.reshape(plane.shape + (1,) * (len(shape) - 2)), shape)
    return CartesianMask(np.ascontiguousarray(mask), acs, R_p, R_s, shift)


def poisson_disc_mask(shape, R: float, acs: int = 0, seed: int | None = 0) -> PoissonDisc:
    """Variable-density Poisson-disc pattern over axes 0 and 1.

    Sampling density falls as ``1 / (1 + r)`` with ``r`` the normalized
    distance from the k-space center, so the exclusion radius grows as
    ``sqrt(1 + r)``. Darts are thrown over a seeded permutation of the grid;
    the base radius is bisected to approach ``N / R`` samples. A centered
    ``acs x acs`` block is always sampled. Further axes are fully sampled.
    """
    shape = tuple(int(n) for n in shape)
    n1, n2 = shape[:2]
    if R < 1:
        raise EncodingError("R must be >= 1")
    if R > n1 * n2:
        raise EncodingError("reduction factor exceeds the grid size")
    if acs < 0 or acs > min(n1, n2):
        raise EncodingError("ACS region larger than the grid")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n1 * n2)
    ci, cj = n1 // 2, n2 // 2
    ii, jj = np.divmod(order, n2)
    rnorm = np.hypot((ii - ci) / (n1 / 2), (jj - cj) / (n2 / 2))
    growth = np.sqrt(1 + rnorm)

    acs_mask = np.zeros((n1, n2), dtype=bool)
    lo_i, lo_j = ci - acs // 2, cj - acs // 2
    acs_mask[lo_i:lo_i + acs, lo_j:lo_j + acs] = True
    target = (n1 * n2) / R

    def throw(r0):
        taken = np.zeros((n1, n2), dtype=bool)
        for i, j, g in zip(ii, jj, growth):
            rad = r0 * g
            w = int(math.ceil(rad))
            a0, a1 = max(i - w, 0), min(i + w + 1, n1)
            b0, b1 = max(j - w, 0), min(j + w + 1, n2)
            win = taken[a0:a1, b0:b1]
            if win.any():
                pi, pj = np.nonzero(win)
                if np.min((pi + a0 - i) ** 2 + (pj + b0 - j) ** 2) < rad * rad:
                    continue
            taken[i, j] = True
        return taken | acs_mask

    lo, hi = 0.5, float(max(n1, n2))
    best = throw(lo)
    if best.sum() > target:
        for _ in range(18):
            mid = 0.5 * (lo + hi)
            cand = throw(mid)
            if abs(cand.sum() - target) < abs(best.sum() - target):
                best = cand
            if cand.sum() > target:
                lo = mid
            else:
                hi = mid
    mask = np.broadcast_to(best.reshape(best.shape + (1,) * (len(shape) - 2)), shape)
    return PoissonDisc(np.ascontiguousarray(mask), float(R), acs, seed)


def radial_trajectory(shape, n_spokes: int, readout_len: int | None = None,
                      golden: bool = True) -> Radial:
    """Spokes at golden-angle increments (111.246 deg) or uniformly over 180 deg."""
    shape = tuple(int(n) for n in shape)
    if len(shape) != 2:
        raise EncodingError("radial trajectories are 2D")
    if n_spokes < 1:
        raise EncodingError("n_spokes must be >= 1")
    readout_len = max(shape) if readout_len is None else int(readout_len)
    idx = np.arange(n_spokes)
    if golden:
        angles = np.deg2rad(GOLDEN_ANGLE_DEG) * idx
    else:
        angles = np.pi * idx / n_spokes
    return Radial(shape, np.mod(angles, 2 * np.pi), readout_len, golden)


def make_trajectory(kind: str, shape, **params):
    """Build a trajectory from a pattern descriptor.

    ``kind`` is ``"cartesian"``, ``"caipi"``, ``"poisson"`` or ``"radial"``;
    ``params`` are forwarded to the matching constructor.
    """
    if kind == "cartesian":
        return cartesian_mask(shape, **params)
    if kind == "caipi":
        return cartesian_mask(shape, caipi=True, **params)
    if kind == "poisson":
        return poisson_disc_mask(shape, **params)
    if kind == "radial":
        return radial_trajectory(shape, **params)
    raise EncodingError(f"unknown trajectory kind {kind!r}")


def _img_axes(ndim):
    return tuple(range(-ndim, 0))


def fft_c(x, ndim: int):
    ax = _img_axes(ndim)
    return np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(x, axes=ax), axes=ax, norm="ortho"), axes=ax)


def ifft_c(x, ndim: int):
    ax = _img_axes(ndim)
    return np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(x, axes=ax), axes=ax, norm="ortho"), axes=ax)


def _check_image(traj, img):
    shape = tuple(traj.shape)
    if img.shape[img.ndim - len(shape):] != shape:
        raise EncodingError(f"image trailing shape must be {shape}, got {img.shape}")


def forward_fs(traj, img) -> np.ndarray:
    """``F_s img``: samples on the last axis, leading axes preserved."""
    img = np.asarray(img)
    _check_image(traj, img)
    if isinstance(traj, Radial):
        ex, ey = traj._phasors
        return np.sum((ex @ img) * ey, axis=-1) / math.sqrt(np.prod(traj.shape))
    return fft_c(img, len(traj.shape))[..., traj.mask]


def adjoint_fs(traj, samples) -> np.ndarray:
    """``F_s^H samples``: zero-filled inverse FFT or conjugate NUDFT sum."""
    samples = np.asarray(samples)
    if samples.shape[-1] != traj.n_samples:
        raise EncodingError(f"expected {traj.n_samples} samples, got {samples.shape[-1]}")
    if isinstance(traj, Radial):
        ex, ey = traj._phasors
        out = (ex.conj().T * samples[..., None, :]) @ ey.conj()
        return out / math.sqrt(np.prod(traj.shape))
    full = np.zeros(samples.shape[:-1] + tuple(traj.shape), dtype=complex)
    full[..., traj.mask] = samples
    return ifft_c(full, len(traj.shape))


def normal_fs(traj, img) -> np.ndarray:
    """``F_s^H F_s img`` without leaving the image domain."""
    img = np.asarray(img)
    _check_image(traj, img)
    nd = len(traj.shape)
    if isinstance(traj, Radial):
        # zero-padded FFT pair on the 2x grid, skipping the all-zero half
        n1, n2 = traj.shape
        a = scipy.fft.fft(img, n=2 * n2, axis=-1)
        a = scipy.fft.fft(a, n=2 * n1, axis=-2) * traj._toeplitz_kernel
        a = scipy.fft.ifft(a, axis=-2)[..., :n1, :]
        return scipy.fft.ifft(a, axis=-1)[..., :n2]
    return ifft_c(fft_c(img, nd) * traj.mask, nd)


def normal_symbol(traj) -> np.ndarray:
    """Eigenvalues of a circulant approximation of ``F_s^H F_s``.

    Laid out in ``np.fft.fftn`` order. Cartesian patterns are exactly
    circulant; radial ones use T. Chan's optimal circulant fit to the
    Toeplitz point-spread function.
    """
    if not isinstance(traj, Radial):
        return np.fft.ifftshift(traj.mask).astype(float)
    n1, n2 = traj.shape
    psf = np.fft.ifft2(traj._toeplitz_kernel)

    def fold(P, n):
        # offsets d in [0, n) sit at P[d]; their wrap-around partners d - n at P[n + d]
        w = (n - np.arange(n)) / n
        return w[:, None] * P[:n] + (1 - w)[:, None] * P[n:]

    c = fold(fold(psf, n1).T, n2).T
    return np.maximum(np.fft.fft2(c).real, 0.0)


def forward_model(p, sens, traj) -> np.ndarray:
    """Noise-free coil data ``y_k = F_s(s_k * p)`` stacked as ``C x K``."""
    p = np.asarray(p)
    sens = np.asarray(sens)
    if sens.shape[1:] != p.shape:
        raise EncodingError(f"maps {sens.shape} do not match density {p.shape}")
    return forward_fs(traj, sens * p)


def simulate(p, sens, traj, snr_db: float = math.inf, seed: int | None = 0) -> KSpaceData:
    clean = KSpaceData(forward_model(p, sens, traj), traj, sigma=np.zeros(len(sens)))
    return add_noise(clean, snr_db, seed)


def add_noise(y: KSpaceData, snr_db: float, seed: int | None = 0) -> KSpaceData:
    """White complex Gaussian noise at a joint SNR of ``snr_db`` over all coils."""
    if math.isinf(snr_db) and snr_db > 0:
        sigma = np.zeros(y.coils) if y.sigma is None else y.sigma
        return replace(y, sigma=sigma)
    rng = np.random.default_rng(seed)
    n = y.samples.size
    sigma = np.linalg.norm(y.samples) / (10 ** (snr_db / 20) * math.sqrt(2 * n))
    noise = sigma * (rng.standard_normal(y.samples.shape)
                     + 1j * rng.standard_normal(y.samples.shape))
    return replace(y, samples=y.samples + noise, sigma=np.full(y.coils, sigma), eps=None)


def estimate_sigma(y: KSpaceData, outer_fraction: float = 0.05) -> np.ndarray:
    """Per-coil noise std from the median absolute deviation of outer k-space."""
    if y.K < 64:
        raise EncodingError("too few samples to estimate the noise level (need K >= 64)")
    radius = np.linalg.norm(y.trajectory.kcoords(), axis=1)
    n_outer = max(int(round(outer_fraction * y.K)), 32)
    outer = np.argsort(radius, kind="stable")[-n_outer:]
    vals = y.samples[:, outer]
    parts = np.concatenate([vals.real, vals.imag], axis=1)
    med = np.median(parts, axis=1, keepdims=True)
    return 1.4826 * np.median(np.abs(parts - med), axis=1)


def estimate_eps(y: KSpaceData, factor: float = 1.0) -> np.ndarray:
    """Noise-ball radii ``factor * sigma_k * sqrt(2K)``.

    Uses the stored noise level when the data carries one.
    """
    if y.K < 64:
        raise EncodingError("too few samples to estimate the noise level (need K >= 64)")
    sigma = y.sigma if y.sigma is not None else estimate_sigma(y)
    return factor * sigma * math.sqrt(2 * y.K)
