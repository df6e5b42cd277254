"""Patient-agnostic magnetic-field basis for a field of view.

The basis is built by exciting electric and magnetic point dipoles placed on
a shell just outside the FOV with random complex amplitudes, evaluating the
resulting free-space magnetic fields at the voxel centroids, keeping only the
receive (B1-minus) circular polarization and orthonormalizing the snapshots
with a thin SVD.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import constants

__all__ = [
    "GYROMAGNETIC_HZ_PER_T",
    "FovGrid",
    "DipoleSet",
    "SampleMatrix",
    "FieldBasis",
    "BasisError",
    "place_boundary_dipoles",
    "scalar_green",
    "h_field_of_dipole",
    "dipole_fields",
    "sample_random_fields",
    "circular_polarization",
    "compute_basis",
    "project",
]

GYROMAGNETIC_HZ_PER_T = 42.577e6

# pairs of (voxel, dipole) evaluated per chunk; bounds peak memory
_CHUNK_PAIRS = 1 << 20


class BasisError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FovGrid:
    """Cartesian voxel grid of the field of view.

    Args:
        dims: voxel counts ``(n1, n2, n3)``; ``n3 == 1`` for a 2D slice.
        voxel_size: voxel edge lengths in meters.
        origin: centroid of voxel ``(0, 0, 0)`` in meters.
        support: boolean mask of shape ``dims``.
        b0: main field strength in tesla.
    """

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float]
    support: np.ndarray
    b0: float = 3.0

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise BasisError(f"dims must be three counts >= 1, got {self.dims}")
        vs = tuple(float(d) for d in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise BasisError(f"voxel_size must be positive, got {self.voxel_size}")
        support = np.asarray(self.support, dtype=bool).reshape(dims)
        if not support.any():
            raise BasisError("support is empty")
        if self.b0 <= 0:
            raise BasisError("b0 must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "support", support)

    @classmethod
    def create(cls, dims: Sequence[int], fov_mm: Sequence[float], b0: float = 3.0,
               support: str | np.ndarray = "full") -> "FovGrid":
        """Grid centered on the origin.

        ``dims`` and ``fov_mm`` have two entries for a slice or three for a
        volume. For a slice the through-plane voxel size equals the first
        in-plane voxel size. ``support`` is ``"full"``, ``"circle"`` (binary
        inscribed disc / cylinder) or a boolean mask.
        """
        dims = [int(n) for n in dims]
        fov = [float(f) * 1e-3 for f in fov_mm]
        if len(dims) != len(fov) or len(dims) not in (2, 3):
            raise BasisError("dims and fov_mm must both have 2 or 3 entries")
        vs = [f / n for f, n in zip(fov, dims)]
        if len(dims) == 2:
            dims.append(1)
            vs.append(vs[0])
        origin = [-(n - 1) / 2 * d for n, d in zip(dims, vs)]
        if isinstance(support, str):
            if support == "full":
                mask = np.ones(dims, dtype=bool)
            elif support == "circle":
                x = (np.arange(dims[0]) - (dims[0] - 1) / 2) * vs[0]
                y = (np.arange(dims[1]) - (dims[1] - 1) / 2) * vs[1]
                radius = min(dims[0] * vs[0], dims[1] * vs[1]) / 2
                disc = x[:, None] ** 2 + y[None, :] ** 2 <= radius ** 2
                mask = np.repeat(disc[:, :, None], dims[2], axis=2)
            else:
                raise BasisError(f"unknown support {support!r}")
        else:
            mask = np.asarray(support, dtype=bool).reshape(dims)
        return cls(tuple(dims), tuple(vs), tuple(origin), mask, b0)

    @property
    def shape(self) -> tuple[int, ...]:
        """Image shape: ``(n1, n2)`` for slices, ``(n1, n2, n3)`` otherwise."""
        return self.dims[:2] if self.dims[2] == 1 else self.dims

    @property
    def is_2d(self) -> bool:
        return self.dims[2] == 1

    @property
    def n_support(self) -> int:
        return int(self.support.sum())

    @property
    def larmor_freq(self) -> float:
        return GYROMAGNETIC_HZ_PER_T * self.b0

    @property
    def omega(self) -> float:
        return 2 * np.pi * self.larmor_freq

    @property
    def wavenumber(self) -> float:
        return self.omega * np.sqrt(constants.epsilon_0 * constants.mu_0)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.voxel_size[axis]

    def centroids(self) -> np.ndarray:
        """``(N, 3)`` centroids of the support voxels in C order."""
        idx = np.argwhere(self.support)
        return np.asarray(self.origin) + idx * np.asarray(self.voxel_size)

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Zero-filled image(s) from support vectors; leading axes are kept."""
        values = np.asarray(values)
        out = np.zeros(values.shape[:-1] + self.dims, dtype=values.dtype)
        out[..., self.support] = values
        return out.reshape(values.shape[:-1] + self.shape)

    def gather(self, images: np.ndarray) -> np.ndarray:
        """Support vectors from image(s) of shape ``(..., *shape)``."""
        images = np.asarray(images)
        lead = images.shape[: images.ndim - len(self.shape)]
        return images.reshape(lead + self.dims)[..., self.support]


@dataclass(frozen=True, eq=False)
class DipoleSet:
    """Point dipoles, one row per dipole.

    ``magnetic[i]`` selects the m kind (True) or the j kind (False).
    """

    positions: np.ndarray
    orientations: np.ndarray
    magnetic: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_positions(self) -> int:
        return len(np.unique(self.positions, axis=0))


@dataclass(frozen=True, eq=False)
class SampleMatrix:
    matrix: np.ndarray
    seed: int | None

    @property
    def n_s(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True, eq=False)
class FieldBasis:
    """Orthonormal basis ``U_h`` of circularly polarized fields on the support.

    ``vectors`` is ``N x q`` with ``N`` the number of support voxels and
    columns sorted by decreasing singular value. ``spectrum`` holds every
    singular value of the sample matrix the basis was cut from.
    """

    fov: FovGrid
    vectors: np.ndarray
    singular_values: np.ndarray
    spectrum: np.ndarray = field(default=None)

    @property
    def q(self) -> int:
        return self.vectors.shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.fov.shape

    def truncate(self, q: int) -> "FieldBasis":
        if not 1 <= q <= self.q:
            raise BasisError(f"cannot truncate a q={self.q} basis to {q}")
        return FieldBasis(self.fov, self.vectors[:, :q], self.singular_values[:q],
                          self.spectrum)

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        """Maps ``U_h @ coeffs`` as zero-filled images; ``coeffs`` is ``(..., q)``."""
        coeffs = np.asarray(coeffs)
        if coeffs.shape[-1] != self.q:
            raise BasisError(f"expected {self.q} coefficients, got {coeffs.shape[-1]}")
        return self.fov.scatter(coeffs @ self.vectors.T)

    def adjoint(self, images: np.ndarray) -> np.ndarray:
        """Coefficients ``U_h^H s`` for image(s) of shape ``(..., *shape)``."""
        return self.fov.gather(images) @ self.vectors.conj()


def place_boundary_dipoles(grid: FovGrid, margin: float | None = None,
                           spacing: float | None = None) -> DipoleSet:
    """Tile a shell enclosing the support with 3 orientations x 2 kinds.

    ``margin`` and ``spacing`` are in meters. The margin defaults to a
    quarter of the smallest in-plane FOV extent and the spacing to half the
    margin; shells hugging the FOV at a couple of voxels let near-field
    terms dominate the leading singular vectors, which then span smooth
    coil fields poorly and compress badly. Volumes get the surface of the enclosing box; slices get the
    in-plane rectangle plus copies shifted by ``+-margin`` through the plane.
    """
    extent = min(n * d for n, d in zip(grid.dims, grid.voxel_size) if n > 1)
    plane = min(n * d for n, d in zip(grid.dims[:2], grid.voxel_size[:2]))
    margin = plane / 4 if margin is None else float(margin)
    spacing = margin / 2 if spacing is None else float(spacing)
    if margin <= 0 or spacing <= 0:
        raise BasisError("margin and spacing must be positive")
    if spacing > extent:
        raise BasisError("degenerate dipole set: spacing exceeds the FOV extent")

    cent = grid.centroids()
    lo = cent.min(axis=0) - margin
    hi = cent.max(axis=0) + margin

    def lattice(axis):
        n = max(int(round((hi[axis] - lo[axis]) / spacing)), 1) + 1
        return np.linspace(lo[axis], hi[axis], n)

    if grid.is_2d:
        xs, ys = lattice(0), lattice(1)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        edge = (X == xs[0]) | (X == xs[-1]) | (Y == ys[0]) | (Y == ys[-1])
        ring = np.stack([X[edge], Y[edge]], axis=1)
        zc = grid.origin[2]
        pts = np.concatenate([
            np.column_stack([ring, np.full(len(ring), zc + dz)])
            for dz in (0.0, -margin, margin)
        ])
    else:
        xs, ys, zs = lattice(0), lattice(1), lattice(2)
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        edge = ((X == xs[0]) | (X == xs[-1]) | (Y == ys[0]) | (Y == ys[-1])
                | (Z == zs[0]) | (Z == zs[-1]))
        pts = np.stack([X[edge], Y[edge], Z[edge]], axis=1)

    if len(pts) < 2:
        raise BasisError("degenerate dipole set")
    eye = np.eye(3)
    positions = np.repeat(pts, 6, axis=0)
    orientations = np.tile(np.concatenate([eye, eye]), (len(pts), 1))
    magnetic = np.tile(np.repeat([False, True], 3), len(pts))
    return DipoleSet(positions, orientations, magnetic)


def scalar_green(r, r_src, k: float) -> complex:
    """Free-space Green function ``exp(-jkR) / (4 pi R)``."""
    dist = np.linalg.norm(np.asarray(r, dtype=float) - np.asarray(r_src, dtype=float))
    if dist == 0:
        raise BasisError("singular kernel evaluation: coincident points")
    return np.exp(-1j * k * dist) / (4 * np.pi * dist)


def _h_fields(points, src, orient, magnetic, k, omega):
    """``(N, D, 3)`` magnetic fields of unit dipoles at ``points``.

    Electric dipoles radiate ``grad g x j``; magnetic ones
    ``(grad grad + k^2) g . m / (j omega mu0)``.
    """
    R = points[:, None, :] - src[None, :, :]
    dist = np.sqrt(np.einsum("ndi,ndi->nd", R, R))
    if np.any(dist == 0):
        raise BasisError("singular kernel evaluation: dipole on a voxel centroid")
    rhat = R / dist[..., None]
    phase = np.exp(-1j * k * dist) / (4 * np.pi)
    kr = k * dist
    g = phase / dist
    dg = -phase * (1 + 1j * kr) / dist ** 2
    d2g = phase * (2 + 2j * kr - kr ** 2) / dist ** 3

    h = np.empty(R.shape, dtype=complex)
    el = ~magnetic
    if el.any():
        h[:, el] = dg[:, el, None] * np.cross(rhat[:, el], orient[None, el])
    if magnetic.any():
        rm = rhat[:, magnetic]
        m = orient[None, magnetic]
        proj = np.einsum("ndi,ndi->nd", rm, np.broadcast_to(m, rm.shape))
        radial = (d2g[:, magnetic] - dg[:, magnetic] / dist[:, magnetic])[..., None]
        h[:, magnetic] = (radial * proj[..., None] * rm
                          + (dg[:, magnetic] / dist[:, magnetic] + k ** 2 * g[:, magnetic])[..., None] * m)
        h[:, magnetic] /= 1j * omega * constants.mu_0
    return h


def h_field_of_dipole(position, orientation, magnetic: bool, grid: FovGrid,
                      k: float | None = None) -> np.ndarray:
    """``(N, 3)`` complex h of one unit dipole at the support centroids."""
    k = grid.wavenumber if k is None else k
    h = _h_fields(grid.centroids(), np.atleast_2d(np.asarray(position, dtype=float)),
                  np.atleast_2d(np.asarray(orientation, dtype=float)),
                  np.array([bool(magnetic)]), k, grid.omega)
    return h[:, 0]


def circular_polarization(h: np.ndarray) -> np.ndarray:
    """Receive component ``(h_x - j h_y) / 2`` over the last axis."""
    h = np.asarray(h)
    return (h[..., 0] - 1j * h[..., 1]) / 2


def _cp_fields(points, src, orient, magnetic, k, omega):
    """``(N, D)`` receive components of unit dipole fields, straight from the kernels.

    Same fields as ``circular_polarization(_h_fields(...))``; the distance
    dependent factors are evaluated once per distinct source position and
    the polarization is taken analytically, so no ``(N, D, 3)`` array is built.
    """
    pos, inv = np.unique(src, axis=0, return_inverse=True)
    inv = inv.ravel()
    R = points[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.einsum("npi,npi->np", R, R))
    if np.any(dist == 0):
        raise BasisError("singular kernel evaluation: dipole on a voxel centroid")
    rhat = R / dist[..., None]
    phase = np.exp(-1j * k * dist) / (4 * np.pi)
    kr = k * dist
    dg = -phase * (1 + 1j * kr) / dist ** 2
    out = np.empty((len(points), len(src)), dtype=complex)
    ox, oy, oz = orient[:, 0], orient[:, 1], orient[:, 2]
    el = np.flatnonzero(~magnetic)
    if el.size:
        # (r x o) projected on (x - j y) / 2 is linear in r
        a = np.stack([1j * oz[el], oz[el], -oy[el] - 1j * ox[el]], axis=1) / 2
        r = rhat[:, inv[el]]
        out[:, el] = dg[:, inv[el]] * np.einsum("ndi,di->nd", r, a)
    mg = np.flatnonzero(magnetic)
    if mg.size:
        g = phase / dist
        d2g = phase * (2 + 2j * kr - kr ** 2) / dist ** 3
        radial = (d2g - dg / dist)[:, inv[mg]]
        iso = (dg / dist + k ** 2 * g)[:, inv[mg]]
        r = rhat[:, inv[mg]]
        m = orient[mg]
        proj = np.einsum("ndi,di->nd", r, m)
        cp_r = (r[..., 0] - 1j * r[..., 1]) / 2
        cp_m = (m[:, 0] - 1j * m[:, 1]) / 2
        out[:, mg] = (radial * proj * cp_r + iso * cp_m[None, :]) / (1j * omega * constants.mu_0)
    return out


def _dipole_chunks(dipoles: DipoleSet, grid: FovGrid):
    points = grid.centroids()
    k, omega = grid.wavenumber, grid.omega
    # chunks hold whole positions (6 dipoles each in the default layout)
    step = max(6, (_CHUNK_PAIRS // len(points)) // 6 * 6)
    for start in range(0, len(dipoles), step):
        sl = slice(start, start + step)
        yield sl, _cp_fields(points, dipoles.positions[sl], dipoles.orientations[sl],
                             dipoles.magnetic[sl], k, omega)


def dipole_fields(dipoles: DipoleSet, grid: FovGrid) -> np.ndarray:
    """``(N, D)`` matrix of B1-minus fields, one column per dipole."""
    out = np.empty((grid.n_support, len(dipoles)), dtype=complex)
    for sl, block in _dipole_chunks(dipoles, grid):
        out[:, sl] = block
    return out


def sample_random_fields(dipoles: DipoleSet, grid: FovGrid, n_s: int,
                         seed: int | None = 0,
                         amplitudes: np.ndarray | None = None) -> SampleMatrix:
    """Snapshots of ``n_s`` random superpositions of all dipole fields.

    Amplitudes are i.i.d. circular complex standard normal drawn from
    ``numpy.random.default_rng(seed)`` unless ``amplitudes`` (``D x n_s``)
    is given.
    """
    if len(dipoles) == 0:
        raise BasisError("empty dipole set")
    if n_s < 1:
        raise BasisError("n_s must be >= 1")
    if amplitudes is None:
        rng = np.random.default_rng(seed)
        amplitudes = (rng.standard_normal((len(dipoles), n_s))
                      + 1j * rng.standard_normal((len(dipoles), n_s))) / np.sqrt(2)
    else:
        amplitudes = np.asarray(amplitudes, dtype=complex)
        if amplitudes.shape != (len(dipoles), n_s):
            raise BasisError(f"amplitudes must be {(len(dipoles), n_s)}")
    return SampleMatrix(_sample_sum(dipoles, grid, amplitudes), seed)


def _sample_sum(dipoles: DipoleSet, grid: FovGrid, amplitudes: np.ndarray) -> np.ndarray:
    """``dipole_fields(dipoles, grid) @ amplitudes`` without the ``N x D`` matrix.

    Per source position the receive field of any j or m dipole is a fixed
    combination of seven position-dependent columns (three for j, four for
    m), so the amplitudes are folded into those first and a single product
    per chunk of positions remains.
    """
    points = grid.centroids()
    k, omega = grid.wavenumber, grid.omega
    pos, inv = np.unique(dipoles.positions, axis=0, return_inverse=True)
    inv = inv.ravel()
    o, mag = dipoles.orientations, dipoles.magnetic
    n_pos, n_s = len(pos), amplitudes.shape[1]
    # j: (r x o)_cp = r . a(o);  m: radial (r . m) r_cp + iso m_cp
    a = np.stack([1j * o[:, 2], o[:, 2], -o[:, 1] - 1j * o[:, 0]], axis=1) / 2
    coef_el = np.zeros((n_pos, 3, n_s), dtype=complex)
    coef_m = np.zeros((n_pos, 3, n_s), dtype=complex)
    coef_iso = np.zeros((n_pos, n_s), dtype=complex)
    el, mg = ~mag, mag
    np.add.at(coef_el, inv[el], a[el][:, :, None] * amplitudes[el][:, None, :])
    np.add.at(coef_m, inv[mg], o[mg][:, :, None] * amplitudes[mg][:, None, :])
    np.add.at(coef_iso, inv[mg], ((o[mg, 0] - 1j * o[mg, 1]) / 2)[:, None] * amplitudes[mg])
    scale_m = 1 / (1j * omega * constants.mu_0)
    out = np.zeros((len(points), n_s), dtype=complex)
    step = max(1, _CHUNK_PAIRS // len(points))
    for start in range(0, n_pos, step):
        sl = slice(start, start + step)
        R = points[:, None, :] - pos[None, sl, :]
        dist = np.sqrt(np.einsum("npi,npi->np", R, R))
        if np.any(dist == 0):
            raise BasisError("singular kernel evaluation: dipole on a voxel centroid")
        rhat = R / dist[..., None]
        phase = np.exp(-1j * k * dist) / (4 * np.pi)
        kr = k * dist
        dg = -phase * (1 + 1j * kr) / dist ** 2
        d2g = phase * (2 + 2j * kr - kr ** 2) / dist ** 3
        radial = (d2g - dg / dist) * (rhat[..., 0] - 1j * rhat[..., 1]) / 2 * scale_m
        iso = (dg / dist + k ** 2 * phase / dist) * scale_m
        cols = np.concatenate([(dg[..., None] * rhat).reshape(len(points), -1),
                               (radial[..., None] * rhat).reshape(len(points), -1), iso], axis=1)
        coef = np.concatenate([coef_el[sl].reshape(-1, n_s), coef_m[sl].reshape(-1, n_s),
                               coef_iso[sl]], axis=0)
        out += cols @ coef
    return out


def compute_basis(samples: SampleMatrix, q: int, fov: FovGrid) -> FieldBasis:
    """Leading ``q`` left singular vectors of the sample matrix."""
    n, n_s = samples.matrix.shape
    if q > n_s:
        raise BasisError(f"insufficient excitations: q={q} > n_s={n_s}")
    if q > n or q < 1:
        raise BasisError(f"q must lie in [1, {n}]")
    u, s, _ = np.linalg.svd(samples.matrix, full_matrices=False)
    return FieldBasis(fov, np.ascontiguousarray(u[:, :q]), s[:q].copy(), s)


def project(basis: FieldBasis, s: np.ndarray) -> tuple[np.ndarray, float]:
    """Coefficients of ``s`` on the basis and the relative projection error.

    ``s`` is either a support vector of length ``N`` or an image of the grid
    shape (values outside the support are ignored).
    """
    s = np.asarray(s)
    vec = s if s.ndim == 1 and s.size == basis.vectors.shape[0] else basis.fov.gather(s)
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise BasisError("zero map")
    coeffs = basis.vectors.conj().T @ vec
    err = np.linalg.norm(basis.vectors @ coeffs - vec) / norm
    return coeffs, float(err)
