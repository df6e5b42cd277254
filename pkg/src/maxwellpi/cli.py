"""Command-line front end: ``maxwellpi <subcommand> [--config FILE] [flags]``.

Every option can come from a JSON config file (keys are the flag names with
dashes or underscores); flags given on the command line win. The resolved
configuration is echoed to stdout as JSON before any computation, and every
run writes a manifest with checksums of its inputs and outputs.

Exit codes: 0 success, 1 configuration error, 2 runtime error (I/O or
numerics). Errors are reported on stderr as ``{"error": {"category": ...}}``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .admm import AdmmConfig, admm_reconstruct
from .basis import FovGrid, compute_basis, place_boundary_dipoles, project, sample_random_fields
from .encoding import make_trajectory, simulate
from .images import emit_image
from .irgn import IrgnConfig, irgn_reconstruct
from .mpib import (Block, MpibError, load_any_basis, load_array, load_basis, load_kspace,
                   read_mpib, save_array, save_basis, save_kspace, save_tucker, write_mpib)
from .phantoms import birdcage_sens, max_coil_projection_error, nrmse, shepp_logan
from .tucker import compress_basis

__all__ = ["ConfigError", "RunConfig", "build_parser", "parse_config", "run", "main"]

log = logging.getLogger("maxwellpi")


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


class RunError(RuntimeError):
    def __init__(self, category, msg):
        super().__init__(msg)
        self.category = category


@dataclass
class RunConfig:
    """Fully resolved options of one subcommand invocation."""

    subcommand: str
    options: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["options"][name]
        except KeyError:
            raise AttributeError(name) from None

    def to_json(self) -> str:
        return json.dumps({"subcommand": self.subcommand, **self.options}, indent=2, sort_keys=True,
                          default=str)


def _ints(s):
    return [int(v) for v in str(s).split(",") if v != ""]


def _floats(s):
    return [float(v) for v in str(s).split(",") if v != ""]


# name -> (type, default, help); REQUIRED marks options without a default
REQUIRED = object()
# extra spellings accepted on the command line
_ALIASES = {"eps_t": ["--eps"]}
_COMMON = {
    "seed": (int, 0, "random seed"),
    "threads": (int, None, "BLAS/FFT thread cap (default: $MPI_THREADS or library default)"),
    "manifest": (str, None, "manifest path (default: next to the main output)"),
}
_FOV = {
    "dims": (_ints, REQUIRED, "grid size, e.g. 64,64 or 48,48,42"),
    "fov_mm": (_floats, REQUIRED, "field of view in mm per axis"),
    "b0": (float, 3.0, "main field in tesla"),
    "support": (str, "full", "full or circle"),
}
_TRAJ = {
    "traj": (str, "cartesian", "cartesian, caipi, poisson or radial"),
    "R_p": (int, 2, "Cartesian phase reduction"),
    "R_s": (int, 1, "Cartesian slice reduction (3D)"),
    "acs": (int, 16, "ACS lines (or block side)"),
    "R": (float, 4.0, "Poisson-disc target reduction"),
    "spokes": (int, 100, "radial spoke count"),
    "readout": (int, None, "radial readout length (default: the larger image side)"),
    "uniform": (bool, False, "uniform instead of golden-angle spokes"),
}
_IRGN = {f.name: (type(f.default), f.default, f"IRGN {f.name}") for f in fields(IrgnConfig)}
_ADMM = {f.name: (type(f.default), f.default, f"ADMM {f.name}")
         for f in fields(AdmmConfig) if f.name != "eps"}
_ADMM["eps"] = (_floats, None, "per-coil ball radii (default: from the data)")

SUBCOMMANDS = {
    "build-basis": {
        **_FOV, "q": (int, REQUIRED, "basis dimension"),
        "n_s": (int, None, "random excitations (default q + 50)"),
        "margin_mm": (float, None, "dipole shell distance (default FOV/4)"),
        "spacing_mm": (float, None, "dipole spacing (default margin/2)"),
        "images": (int, 0, "emit magnitude/phase images of the first N basis vectors"),
        "out": (str, REQUIRED, "output basis file"), **_COMMON},
    "compress-basis": {
        "basis": (str, REQUIRED, "input basis file"),
        "eps_t": (float, 1e-4, "relative Tucker accuracy"),
        "out": (str, REQUIRED, "output Tucker file"), **_COMMON},
    "project": {
        "basis": (str, REQUIRED, "basis file"),
        "maps": (str, None, "MPIB maps file (default: birdcage maps)"),
        "coils": (int, 8, "birdcage coil count when --maps is absent"),
        "q_list": (_ints, None, "basis sizes to evaluate (default 20,50,100,200,500 up to q)"),
        "out": (str, REQUIRED, "output CSV"), **_COMMON},
    "simulate": {
        **_FOV, **_TRAJ,
        "coils": (int, 8, "coil count"),
        "maps": (str, None, "MPIB maps file (default: birdcage maps)"),
        "maps_basis": (str, None, "project the maps onto this basis first"),
        "q": (int, None, "basis columns used with --maps-basis"),
        "snr_db": (float, math.inf, "SNR in dB (inf: noiseless)"),
        "out": (str, REQUIRED, "output k-space file"), **_COMMON},
    "recon-bl": {
        "kspace": (str, REQUIRED, "k-space file"),
        "basis": (str, REQUIRED, "basis or Tucker file"),
        "q": (int, None, "use the first q basis columns"),
        **_IRGN,
        "out_dir": (str, REQUIRED, "output directory"), **_COMMON},
    "recon-l": {
        "kspace": (str, REQUIRED, "k-space file"),
        "maps": (str, None, "MPIB maps file (default: ground-truth maps stored with the data)"),
        **_ADMM,
        "out_dir": (str, REQUIRED, "output directory"), **_COMMON},
    "metrics": {
        "density": (str, REQUIRED, "density file"),
        "ref": (str, REQUIRED, "reference density file or k-space file with ground truth"),
        "basis": (str, None, "basis for the projection-error metric"),
        "maps": (str, None, "maps for the projection-error metric"),
        "out": (str, None, "JSON output (default: stdout only)"), **_COMMON},
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maxwellpi", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name, opts in SUBCOMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON file with option values")
        for key, (typ, default, hlp) in opts.items():
            flags = ["--" + key.replace("_", "-")] + _ALIASES.get(key, [])
            if typ is bool:
                sp.add_argument(*flags, dest=key, action="store_true", default=argparse.SUPPRESS,
                                help=hlp)
            else:
                conv = typ if typ in (_ints, _floats) else (str if typ is type(None) else typ)
                sp.add_argument(*flags, dest=key, type=conv, default=argparse.SUPPRESS, help=hlp)
    return ap


def _coerce(key, typ, value):
    if value is None:
        return None
    if typ in (_ints, _floats):
        if isinstance(value, (list, tuple)):
            return [int(v) if typ is _ints else float(v) for v in value]
        return typ(value)
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if typ is type(None):
        return value
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot convert {value!r} to {typ.__name__}") from exc


def parse_config(argv=None) -> RunConfig:
    """Flags over config file over defaults; raises ConfigError on problems."""
    ap = build_parser()
    try:
        ns = vars(ap.parse_args(argv))
    except SystemExit as exc:
        if exc.code == 0:  # --help
            raise
        raise ConfigError("invalid command line (see usage above)") from exc
    sub = ns.pop("subcommand")
    ns.pop("log_level", None)
    table = SUBCOMMANDS[sub]
    file_vals = {}
    cfg_path = ns.pop("config", None)
    if cfg_path:
        try:
            raw = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key == "subcommand":
                if v != sub:
                    raise ConfigError(f"config is for {v!r}, not {sub!r}")
                continue
            if key not in table:
                raise ConfigError(f"unknown config key {k!r} for {sub}")
            file_vals[key] = _coerce(key, table[key][0], v)
    opts = {}
    for key, (typ, default, _) in table.items():
        if key in ns:
            opts[key] = ns[key]
        elif key in file_vals:
            opts[key] = file_vals[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")
        else:
            opts[key] = default
    cfg = RunConfig(sub, opts)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    o = cfg.options
    if "dims" in o:
        if len(o["dims"]) not in (2, 3) or min(o["dims"]) < 1:
            raise ConfigError("--dims needs 2 or 3 positive sizes")
        if len(o["fov_mm"]) != len(o["dims"]) or min(o["fov_mm"]) <= 0:
            raise ConfigError("--fov-mm needs one positive entry per dimension")
        if o["support"] not in ("full", "circle"):
            raise ConfigError("--support must be full or circle")
    if o.get("q") is not None and o["q"] < 1:
        raise ConfigError("--q must be positive")
    if cfg.subcommand == "build-basis":
        n_s = o["n_s"] if o["n_s"] is not None else o["q"] + 50
        if n_s < o["q"]:
            raise ConfigError("--n-s must be at least --q")
        o["n_s"] = n_s
    if cfg.subcommand == "simulate":
        if o["traj"] not in ("cartesian", "caipi", "poisson", "radial"):
            raise ConfigError("--traj must be cartesian, caipi, poisson or radial")
        if o["maps_basis"] and o["q"] is None:
            raise ConfigError("--maps-basis needs --q")
    if cfg.subcommand == "compress-basis" and o["eps_t"] < 0:
        raise ConfigError("--eps-t must be >= 0")
    try:
        if cfg.subcommand == "recon-bl":
            IrgnConfig(**{k: o[k] for k in _IRGN})
        if cfg.subcommand == "recon-l":
            AdmmConfig(**{k: o[k] for k in _ADMM})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("basis", "kspace", "maps", "maps_basis", "density", "ref"):
        if o.get(key) and not Path(o[key]).is_file():
            raise ConfigError(f"--{key.replace('_', '-')}: no such file {o[key]}")
    if o.get("threads") is None:
        env = os.environ.get("MPI_THREADS")
        if env:
            try:
                o["threads"] = int(env)
            except ValueError as exc:
                raise ConfigError(f"MPI_THREADS must be an integer, got {env!r}") from exc
    if o.get("threads") is not None and o["threads"] < 1:
        raise ConfigError("--threads must be positive")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy

    return {"maxwellpi": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


class _Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.inputs = []
        self.outputs = []
        self.metrics = {}

    def inp(self, path):
        if path:
            self.inputs.append(str(path))
        return path

    def out(self, path):
        self.outputs.append(str(path))
        return path


def _grid(o):
    return FovGrid.create(o["dims"], o["fov_mm"], o["b0"], o["support"])


def _cmd_build_basis(cfg, r):
    o = cfg.options
    grid = _grid(o)
    mm = 1e-3
    dip = place_boundary_dipoles(grid, None if o["margin_mm"] is None else o["margin_mm"] * mm,
                                 None if o["spacing_mm"] is None else o["spacing_mm"] * mm)
    samples = sample_random_fields(dip, grid, o["n_s"], seed=o["seed"])
    basis = compute_basis(samples, o["q"], grid)
    save_basis(r.out(o["out"]), basis, {"n_s": o["n_s"], "seed": o["seed"],
                                        "n_dipoles": len(dip.magnetic)})
    r.metrics.update(n_dipoles=int(len(dip.magnetic)),
                     sigma_ratio=float(basis.singular_values[-1] / basis.singular_values[0]))
    if o["images"]:
        stem = Path(o["out"]).with_suffix("")
        for i in range(min(o["images"], basis.q)):
            img = basis.apply(np.eye(basis.q)[i])
            if img.ndim == 3:
                img = img[:, :, img.shape[2] // 2]
            for mode in ("magnitude", "phase"):
                for p in emit_image(img, f"{stem}_u{i:03d}_{mode[:3]}", mode):
                    r.out(p)


def _cmd_compress(cfg, r):
    o = cfg.options
    basis = load_basis(r.inp(o["basis"]))
    tb = compress_basis(basis, o["eps_t"])
    save_tucker(r.out(o["out"]), tb)
    r.metrics.update(ranks=list(tb.ranks), compression_ratio=tb.compression_ratio)


def _load_maps(path):
    blocks = read_mpib(path)
    for b in blocks:
        if b.tag == "maps" and b.name in ("maps", "truth_maps"):
            return b.array
    raise MpibError(f"{path}: no maps block")


def _cmd_project(cfg, r):
    o = cfg.options
    basis = load_basis(r.inp(o["basis"]))
    maps = (_load_maps(r.inp(o["maps"])) if o["maps"]
            else birdcage_sens(basis.fov.shape, o["coils"]))
    qs = o["q_list"] or [q for q in (20, 50, 100, 200, 500) if q <= basis.q]
    if max(qs) > basis.q:
        raise ConfigError(f"--q-list exceeds the basis size {basis.q}")
    rows = []
    for q in qs:
        b = basis.truncate(q)
        errs = [project(b, m)[1] for m in maps]
        rows.append([q, max(errs)] + errs)
    with open(r.out(o["out"]), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["q", "max_error"] + [f"coil{k}" for k in range(len(maps))])
        for row in rows:
            w.writerow([row[0]] + [f"{v:.10e}" for v in row[1:]])
    r.metrics["max_error"] = {str(row[0]): row[1] for row in rows}


def _trajectory(o):
    shape = tuple(o["dims"])
    kind = o["traj"]
    if kind == "cartesian":
        return make_trajectory(kind, shape, R_p=o["R_p"], acs=o["acs"], R_s=o["R_s"])
    if kind == "caipi":
        return make_trajectory(kind, shape, R_p=o["R_p"], acs=o["acs"], R_s=max(o["R_s"], 2))
    if kind == "poisson":
        return make_trajectory(kind, shape, R=o["R"], acs=o["acs"], seed=o["seed"])
    return make_trajectory(kind, shape, n_spokes=o["spokes"], readout_len=o["readout"],
                           golden=not o["uniform"])


def _cmd_simulate(cfg, r):
    o = cfg.options
    shape = tuple(o["dims"])
    p = shepp_logan(shape[:2]).astype(complex)
    if len(shape) == 3:
        p = np.repeat(p[..., None], shape[2], axis=-1)
    if o["maps"]:
        maps = _load_maps(r.inp(o["maps"]))
    else:
        maps = birdcage_sens(shape, o["coils"])
    if o["maps_basis"]:
        basis = load_any_basis(r.inp(o["maps_basis"])).truncate(o["q"])
        maps = basis.apply(np.stack([basis.adjoint(m) for m in maps]))
        p = p * basis.fov.support.reshape(basis.fov.shape)
    if maps.shape[1:] != shape:
        raise ConfigError(f"maps shape {maps.shape[1:]} does not match --dims {shape}")
    traj = _trajectory(o)
    y = simulate(p, maps, traj, o["snr_db"], seed=o["seed"])
    save_kspace(r.out(o["out"]), y, [Block("density", p, {"name": "truth_density"}),
                                     Block("maps", maps, {"name": "truth_maps"})])
    r.metrics.update(R=traj.R, K=traj.n_samples, coils=int(maps.shape[0]))


def _truth(blocks, tag):
    for b in blocks:
        if b.tag == tag and b.name == f"truth_{tag}":
            return b.array
    return None


def _emit_maps(maps, out_dir, prefix, r):
    for k, m in enumerate(maps):
        if m.ndim == 3:
            m = m[:, :, m.shape[2] // 2]
        for mode in ("magnitude", "phase"):
            for p in emit_image(m, out_dir / f"{prefix}{k:02d}_{mode[:3]}", mode):
                r.out(p)


def _cmd_recon_bl(cfg, r):
    o = cfg.options
    y, blocks = load_kspace(r.inp(o["kspace"]))
    basis = load_any_basis(r.inp(o["basis"]))
    if o["q"] is not None:
        if o["q"] > basis.q:
            raise ConfigError(f"--q {o['q']} exceeds the basis size {basis.q}")
        basis = basis.truncate(o["q"])
    icfg = IrgnConfig(**{k: o[k] for k in _IRGN})
    res = irgn_reconstruct(y, y.trajectory, basis, icfg)
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_array(r.out(out_dir / "density.mpib"), "density", res.density)
    write_mpib(r.out(out_dir / "maps.mpib"), [Block("maps", res.maps, {"name": "maps"}),
                                               Block("maps", res.coeffs, {"name": "coeffs"})])
    _write_history(r.out(out_dir / "convergence.csv"), res.history)
    dens = res.density if res.density.ndim == 2 else res.density[:, :, res.density.shape[2] // 2]
    for p in emit_image(dens, out_dir / "density_mag", "magnitude"):
        r.out(p)
    _emit_maps(res.maps, out_dir, "map", r)
    tp, tm = _truth(blocks, "density"), _truth(blocks, "maps")
    if tp is not None and tm is not None:
        prod, ref = res.maps * res.density, tm * tp
        r.metrics["product_rel_error"] = float(np.linalg.norm(prod - ref) / np.linalg.norm(ref))
    if tp is not None:
        r.metrics["nrmse"] = nrmse(res.density, tp)
    r.metrics["final_residual"] = res.history[-1]["residual"]


def _write_history(path, history):
    keys = list(history[0]) if history else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for h in history:
            w.writerow({k: (f"{v:.10e}" if isinstance(v, float) else v) for k, v in h.items()})


def _cmd_recon_l(cfg, r):
    o = cfg.options
    y, blocks = load_kspace(r.inp(o["kspace"]))
    if o["maps"]:
        maps = _load_maps(r.inp(o["maps"]))
    else:
        maps = _truth(blocks, "maps")
        if maps is None:
            raise ConfigError("--maps is required when the k-space file has no ground-truth maps")
    acfg = AdmmConfig(**{k: o[k] for k in _ADMM})
    res = admm_reconstruct(y, y.trajectory, maps, acfg)
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_array(r.out(out_dir / "density.mpib"), "density", res.density)
    _write_history(r.out(out_dir / "convergence.csv"), res.history)
    dens = res.density if res.density.ndim == 2 else res.density[:, :, res.density.shape[2] // 2]
    for p in emit_image(dens, out_dir / "density_mag", "magnitude"):
        r.out(p)
    r.metrics.update(converged=res.converged, feasible=res.feasible, iterations=res.iterations,
                     constraint_ratio=[float(v) for v in res.coil_residuals / np.maximum(res.eps, 1e-300)])
    tp = _truth(blocks, "density")
    if tp is not None:
        r.metrics["nrmse"] = nrmse(res.density, tp)


def _cmd_metrics(cfg, r):
    o = cfg.options
    dens = load_array(r.inp(o["density"]), "density")
    ref_blocks = read_mpib(r.inp(o["ref"]))
    ref = _truth(ref_blocks, "density")
    if ref is None:
        ref = next((b.array for b in ref_blocks if b.tag == "density"), None)
    if ref is None:
        raise MpibError(f"{o['ref']}: no density block")
    r.metrics["nrmse"] = nrmse(dens, ref)
    if o["basis"]:
        basis = load_basis(r.inp(o["basis"]))
        maps = (_load_maps(r.inp(o["maps"])) if o["maps"]
                else birdcage_sens(basis.fov.shape, 8))
        r.metrics["max_coil_projection_error"] = max_coil_projection_error(basis, maps)
    if o["out"]:
        Path(r.out(o["out"])).write_text(json.dumps(r.metrics, indent=2, sort_keys=True))


_COMMANDS = {
    "build-basis": _cmd_build_basis,
    "compress-basis": _cmd_compress,
    "project": _cmd_project,
    "simulate": _cmd_simulate,
    "recon-bl": _cmd_recon_bl,
    "recon-l": _cmd_recon_l,
    "metrics": _cmd_metrics,
}


def _manifest_path(cfg):
    o = cfg.options
    if o.get("manifest"):
        return Path(o["manifest"])
    if o.get("out_dir"):
        return Path(o["out_dir"]) / "manifest.json"
    if o.get("out"):
        return Path(str(o["out"]) + ".manifest.json")
    return None


def run(cfg: RunConfig) -> dict:
    """Execute a validated config; returns the manifest dictionary."""
    from threadpoolctl import threadpool_limits

    r = _Run(cfg)
    t0 = time.perf_counter()
    limit = cfg.options.get("threads")
    try:
        with threadpool_limits(limits=limit):
            _COMMANDS[cfg.subcommand](cfg, r)
    except (ConfigError, RunError):
        raise
    except (OSError, MpibError) as exc:
        raise RunError("io", str(exc)) from exc
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise RunError("numeric", f"{type(exc).__name__}: {exc}") from exc
    manifest = {
        "subcommand": cfg.subcommand,
        "config": json.loads(cfg.to_json()),
        "seed": cfg.options.get("seed"),
        "threads": limit,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - t0,
        "inputs": [{"path": p, "sha256": _sha256(p)} for p in r.inputs],
        "outputs": [{"path": p, "sha256": _sha256(p)} for p in r.outputs],
        "metrics": r.metrics,
    }
    mpath = _manifest_path(cfg)
    if mpath is not None:
        mpath.parent.mkdir(parents=True, exist_ok=True)
        mpath.write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return manifest


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _fail(category, msg, code):
    print(json.dumps({"error": {"category": category, "message": msg}}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if "--log-level" in argv:
        i = argv.index("--log-level")
        level = argv[i + 1] if i + 1 < len(argv) else "WARNING"
        logging.basicConfig(level=getattr(logging, level.upper(), logging.WARNING))
    try:
        cfg = parse_config(argv)
    except SystemExit:
        return 0
    except ConfigError as exc:
        return _fail("config", str(exc), 1)
    print(cfg.to_json(), flush=True)
    try:
        manifest = run(cfg)
    except ConfigError as exc:
        return _fail("config", str(exc), 1)
    except RunError as exc:
        return _fail(exc.category, str(exc), 2)
    if manifest["metrics"]:
        print(json.dumps({"metrics": manifest["metrics"]}, default=_jsonable), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
