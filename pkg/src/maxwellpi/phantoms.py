"""Synthetic ground truth and comparison metrics."""
from __future__ import annotations

import numpy as np

__all__ = [
    "SHEPP_LOGAN_ELLIPSES",
    "shepp_logan",
    "birdcage_at",
    "birdcage_sens",
    "nrmse",
    "max_coil_projection_error",
]

# intensity, semi-axis a, semi-axis b, center x0, center y0, rotation (deg)
SHEPP_LOGAN_ELLIPSES = np.array([
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
])


def _unit_coords(n):
    # symmetric pixel centers on [-1, 1]
    return (np.arange(n) - (n - 1) / 2) / (n / 2)


def shepp_logan(dims) -> np.ndarray:
    """Modified (Toft) Shepp-Logan phantom with values in [0, 1].

    Rows run from y = +1 (top) to y = -1; columns from x = -1 to x = +1.
    """
    n1, n2 = int(dims[0]), int(dims[1])
    if min(n1, n2) < 16:
        raise ValueError("phantom needs at least 16 pixels per side")
    y = -_unit_coords(n1)[:, None]
    x = _unit_coords(n2)[None, :]
    img = np.zeros((n1, n2))
    for amp, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES:
        c, s = np.cos(np.deg2rad(phi)), np.sin(np.deg2rad(phi))
        xr = (x - x0) * c + (y - y0) * s
        yr = -(x - x0) * s + (y - y0) * c
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1] += amp
    return np.clip(img, 0.0, 1.0)


def birdcage_at(u, v, coils: int, radius_rel: float = 2.0) -> np.ndarray:
    """Unnormalized coil maps at normalized coordinates ``(u, v)``.

    Coil ``c`` sits at angle ``2 pi c / C`` on a circle of radius
    ``radius_rel``; its map has magnitude ``1 / d**2`` and a phase that winds
    once around the coil center, offset by the coil angle.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    out = []
    for c in range(coils):
        ang = 2 * np.pi * c / coils
        du = u - radius_rel * np.cos(ang)
        dv = v - radius_rel * np.sin(ang)
        out.append(np.exp(1j * (np.arctan2(dv, du) - ang)) / (du ** 2 + dv ** 2))
    return np.array(out)


def birdcage_sens(dims, coils: int = 8, radius_rel: float = 2.0) -> np.ndarray:
    """``C x dims`` smooth complex maps, scaled so the largest magnitude is 1.

    Volumes repeat the in-plane maps along the third axis.
    """
    if coils < 2:
        raise ValueError("need at least two coils")
    dims = tuple(int(n) for n in dims)
    u = _unit_coords(dims[0])[:, None]
    v = _unit_coords(dims[1])[None, :]
    maps = birdcage_at(u, v, coils, radius_rel)
    maps /= np.abs(maps).max()
    if len(dims) == 3:
        maps = np.repeat(maps[..., None], dims[2], axis=-1)
    return maps


def nrmse(x, ref) -> float:
    """Relative error after removing the best global complex scale of ``x``."""
    x = np.asarray(x).ravel()
    ref = np.asarray(ref).ravel()
    if x.shape != ref.shape:
        raise ValueError("shape mismatch")
    rnorm = np.linalg.norm(ref)
    if rnorm == 0:
        raise ValueError("zero reference")
    xx = np.vdot(x, x)
    c = np.vdot(x, ref) / xx if xx != 0 else 0.0
    return float(np.linalg.norm(c * x - ref) / rnorm)


def max_coil_projection_error(basis, maps) -> float:
    """Largest relative projection error over a stack of coil maps."""
    from .basis import project

    return max(project(basis, m)[1] for m in maps)
