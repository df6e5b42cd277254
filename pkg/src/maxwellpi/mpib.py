"""MPIB: a small single-file container for grids, bases, trajectories and images.

Byte layout (all integers little-endian)::

    header  magic b"MPIB" | u16 version | u16 byte-order mark 0xFEFF | u32 block count
    block   8-byte ASCII tag, NUL padded
            u8 dtype code | u8 ndim | u16 reserved (0)
            ndim x u64 shape
            u32 attribute length | UTF-8 JSON attributes
            u64 payload length | payload (C order, little-endian)
            u32 CRC32 of every block byte from the tag through the payload

A file written on a big-endian host without byte swapping shows the mark as
``FE FF`` and is rejected. Objects span several blocks that share a tag and
carry a ``name`` attribute, for example a basis is a ``grid`` block followed
by ``basis`` blocks named ``vectors``, ``singular_values`` and ``spectrum``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import FieldBasis, FovGrid
from .encoding import CartesianMask, KSpaceData, PoissonDisc, Radial
from .tucker import TuckerBasis

__all__ = [
    "MAGIC",
    "VERSION",
    "TAGS",
    "MpibError",
    "Block",
    "write_mpib",
    "read_mpib",
    "pack_grid",
    "unpack_grid",
    "save_basis",
    "load_basis",
    "save_tucker",
    "load_tucker",
    "load_any_basis",
    "pack_trajectory",
    "unpack_trajectory",
    "save_kspace",
    "load_kspace",
    "save_array",
    "load_array",
]

MAGIC = b"MPIB"
VERSION = 1
BOM = 0xFEFF
TAGS = ("grid", "basis", "tucker", "traj", "kspace", "maps", "density")

_DTYPES = {
    1: np.dtype("<c8"),
    2: np.dtype("<c16"),
    3: np.dtype("<f4"),
    4: np.dtype("<f8"),
    5: np.dtype("<i8"),
    6: np.dtype("u1"),
    7: np.dtype("?"),
}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class MpibError(ValueError):
    """Malformed, corrupted or unsupported MPIB content."""


@dataclass
class Block:
    tag: str
    array: np.ndarray
    attrs: dict = field(default_factory=dict)

    @property
    def name(self):
        return self.attrs.get("name")


def _dtype_code(a):
    dt = a.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise MpibError(f"unsupported dtype {a.dtype}")
    return _CODES[dt], dt


def _encode_block(b: Block) -> bytes:
    if b.tag not in TAGS:
        raise MpibError(f"unknown tag {b.tag!r}")
    a = np.asarray(b.array)
    code, dt = _dtype_code(a)
    if a.ndim > 255:
        raise MpibError("too many dimensions")
    attrs = json.dumps(b.attrs, sort_keys=True, separators=(",", ":")).encode()
    payload = np.ascontiguousarray(a, dtype=dt).tobytes()
    body = b"".join([
        b.tag.encode("ascii").ljust(8, b"\0"),
        struct.pack("<BBH", code, a.ndim, 0),
        struct.pack(f"<{a.ndim}Q", *a.shape),
        struct.pack("<I", len(attrs)), attrs,
        struct.pack("<Q", len(payload)), payload,
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def write_mpib(path, blocks) -> None:
    """Write ``blocks`` atomically (temporary file, then rename)."""
    blocks = list(blocks)
    data = MAGIC + struct.pack("<HHI", VERSION, BOM, len(blocks))
    data += b"".join(_encode_block(b) for b in blocks)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise MpibError("truncated file: block ends early, CRC cannot be verified")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def read_mpib(path) -> list[Block]:
    """Read and verify every block; nothing is returned unless all CRCs pass."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise MpibError("bad magic: not an MPIB file")
    version, bom, count = struct.unpack("<HHI", buf[4:12])
    if bom != BOM:
        raise MpibError("byte order mark mismatch: file was written with the wrong endianness")
    if version != VERSION:
        raise MpibError(f"unsupported MPIB version {version}")
    rd = _Reader(buf)
    rd.pos = 12
    blocks = []
    for _ in range(count):
        start = rd.pos
        tag = rd.take(8).rstrip(b"\0").decode("ascii", errors="replace")
        code, ndim, _ = struct.unpack("<BBH", rd.take(4))
        shape = struct.unpack(f"<{ndim}Q", rd.take(8 * ndim))
        (alen,) = struct.unpack("<I", rd.take(4))
        attrs_raw = rd.take(alen)
        (plen,) = struct.unpack("<Q", rd.take(8))
        payload = rd.take(plen)
        body = buf[start:rd.pos]
        (crc,) = struct.unpack("<I", rd.take(4))
        if zlib.crc32(body) != crc:
            raise MpibError(f"CRC mismatch in block {len(blocks)} ({tag!r})")
        if tag not in TAGS:
            raise MpibError(f"unknown tag {tag!r}")
        if code not in _DTYPES:
            raise MpibError(f"unknown dtype code {code}")
        dt = _DTYPES[code]
        if plen != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise MpibError(f"payload size does not match shape {shape}")
        arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
        blocks.append(Block(tag, arr, json.loads(attrs_raw.decode()) if alen else {}))
    if rd.pos != len(buf):
        raise MpibError("trailing bytes after the last block")
    return blocks


def _find(blocks, tag, name=None, required=True):
    for b in blocks:
        if b.tag == tag and (name is None or b.name == name):
            return b
    if required:
        what = tag if name is None else f"{tag}/{name}"
        raise MpibError(f"missing block {what}")
    return None


def pack_grid(grid: FovGrid) -> Block:
    return Block("grid", grid.support, {
        "name": "support", "dims": list(grid.dims), "voxel_size": list(grid.voxel_size),
        "origin": list(grid.origin), "b0": grid.b0})


def unpack_grid(blocks) -> FovGrid:
    b = _find(blocks, "grid")
    a = b.attrs
    return FovGrid(tuple(a["dims"]), tuple(a["voxel_size"]), tuple(a["origin"]), b.array, a["b0"])


def save_basis(path, basis: FieldBasis, attrs=None) -> None:
    extra = dict(attrs or {})
    write_mpib(path, [
        pack_grid(basis.fov),
        Block("basis", basis.vectors, {"name": "vectors", **extra}),
        Block("basis", basis.singular_values, {"name": "singular_values"}),
        Block("basis", basis.spectrum, {"name": "spectrum"}),
    ])


def load_basis(path) -> FieldBasis:
    blocks = read_mpib(path)
    return FieldBasis(unpack_grid(blocks), _find(blocks, "basis", "vectors").array,
                      _find(blocks, "basis", "singular_values").array,
                      _find(blocks, "basis", "spectrum").array)


def save_tucker(path, tb: TuckerBasis) -> None:
    blocks = [pack_grid(tb.fov), Block("tucker", tb.core, {"name": "core", "eps": tb.eps})]
    blocks += [Block("tucker", f, {"name": f"factor{i}"}) for i, f in enumerate(tb.factors)]
    write_mpib(path, blocks)


def load_tucker(path) -> TuckerBasis:
    blocks = read_mpib(path)
    core = _find(blocks, "tucker", "core")
    factors = tuple(_find(blocks, "tucker", f"factor{i}").array for i in range(core.array.ndim))
    return TuckerBasis(core.array, factors, core.attrs["eps"], unpack_grid(blocks))


def load_any_basis(path):
    """A dense or Tucker basis, whichever the file holds."""
    blocks = read_mpib(path)
    if any(b.tag == "tucker" for b in blocks):
        return load_tucker(path)
    return load_basis(path)


def pack_trajectory(traj) -> Block:
    if isinstance(traj, Radial):
        return Block("traj", traj.angles, {"name": "radial", "shape": list(traj.shape),
                                           "readout_len": traj.readout_len, "golden": traj.golden})
    if isinstance(traj, CartesianMask):
        return Block("traj", traj.mask, {"name": "cartesian", "acs_lines": traj.acs_lines,
                                         "R_p": traj.R_p, "R_s": traj.R_s,
                                         "caipi_shift": traj.caipi_shift})
    if isinstance(traj, PoissonDisc):
        return Block("traj", traj.mask, {"name": "poisson", "target_R": traj.target_R,
                                         "acs_region": traj.acs_region, "seed": traj.seed})
    raise MpibError(f"cannot store trajectory of type {type(traj).__name__}")


def unpack_trajectory(blocks):
    b = _find(blocks, "traj")
    a = b.attrs
    kind = a.get("name")
    if kind == "radial":
        return Radial(tuple(a["shape"]), b.array, a["readout_len"], a["golden"])
    if kind == "cartesian":
        return CartesianMask(b.array, a["acs_lines"], a["R_p"], a["R_s"], a["caipi_shift"])
    if kind == "poisson":
        return PoissonDisc(b.array, a["target_R"], a["acs_region"], a["seed"])
    raise MpibError(f"unknown trajectory kind {kind!r}")


def save_kspace(path, y: KSpaceData, extra=()) -> None:
    """Samples plus their trajectory; ``extra`` blocks (e.g. ground truth) are appended."""
    blocks = [pack_trajectory(y.trajectory), Block("kspace", y.samples, {"name": "samples"})]
    if y.sigma is not None:
        blocks.append(Block("kspace", y.sigma, {"name": "sigma"}))
    if y.eps is not None:
        blocks.append(Block("kspace", y.eps, {"name": "eps"}))
    write_mpib(path, blocks + list(extra))


def load_kspace(path) -> tuple[KSpaceData, list[Block]]:
    """Returns the data and the full block list (for any extra blocks)."""
    blocks = read_mpib(path)
    traj = unpack_trajectory(blocks)
    sig = _find(blocks, "kspace", "sigma", required=False)
    eps = _find(blocks, "kspace", "eps", required=False)
    y = KSpaceData(_find(blocks, "kspace", "samples").array, traj,
                   None if sig is None else sig.array, None if eps is None else eps.array)
    return y, blocks


def save_array(path, tag: str, array, attrs=None) -> None:
    """One-block file for maps, densities and similar images."""
    write_mpib(path, [Block(tag, np.asarray(array), {"name": tag, **(attrs or {})})])


def load_array(path, tag: str) -> np.ndarray:
    return _find(read_mpib(path), tag).array
