"""8-bit grayscale renderings of complex maps (PGM P5 and PNG)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["to_gray", "emit_image"]


def to_gray(img, mode: str = "magnitude") -> np.ndarray:
    """Map a 2D array to ``uint8``.

    Args:
        img: finite real or complex 2D array.
        mode: ``"magnitude"`` scales ``|img|`` min-max onto 0..255 (a constant
            nonzero map gives mid-gray 128, an all-zero map black);
            ``"phase"`` wraps the angle to ``[0, 2 pi)`` on a cyclic 0..255
            scale.
    """
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("map contains non-finite values")
    if mode == "magnitude":
        m = np.abs(a).astype(float)
        lo, hi = m.min(), m.max()
        if hi == 0:
            return np.zeros(m.shape, np.uint8)
        if hi == lo:
            return np.full(m.shape, 128, np.uint8)
        return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)
    if mode == "phase":
        ph = np.mod(np.angle(a), 2 * np.pi)
        # 256 levels cover [0, 2 pi) so 0 and 2 pi land on the same code
        return (np.floor(ph / (2 * np.pi) * 256).astype(int) % 256).astype(np.uint8)
    raise ValueError(f"unknown mode {mode!r}")


def emit_image(img, path, mode: str = "magnitude", png: bool = True) -> list[Path]:
    """Write ``path`` as binary PGM and, if ``png``, a sibling ``.png``.

    Returns the written paths. Output bytes depend only on the input values.
    """
    g = to_gray(img, mode)
    path = Path(path).with_suffix(".pgm")
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + g.tobytes())
    out = [path]
    if png:
        p = path.with_suffix(".png")
        Image.fromarray(g).save(p, format="PNG", optimize=False)
        out.append(p)
    return out
