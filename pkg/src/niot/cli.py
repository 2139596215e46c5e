"""Command-line front end.

Subcommands: ``run``, ``sweep``, ``corrupt``, ``enhance``, ``oracle`` and
``demo`` (writes the synthetic Y-network inputs and example configs).
"""
from __future__ import annotations

import argparse
import configparser
import itertools
import json
import logging
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import assets
from .elliptic import NoConvergence, SolverSettings
from .graph_oracle import optimal_branch_point
from .grid import Grid2D, UnbalancedForcing, build_grid
from .imageio import (
    ForcingEntry,
    ForcingSpec,
    ImageFormatError,
    apply_mask,
    build_forcing,
    enhance_conductivity,
    load_field,
    save_float_field,
    save_grayscale,
)
from .inpaint import NiotConfig, connectivity_check, run_niot
from .pm import NewtonNoConvergence, PmParams, pm_exponents

logger = logging.getLogger("niot")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration file

# key -> (section, parser)
_FLOAT, _INT, _STR = float, int, str
SCHEMA: dict[str, tuple[str, type]] = {
    "gamma": ("model", _FLOAT),
    "lambda": ("model", _FLOAT),
    "map": ("model", _STR),
    "alpha": ("model", _FLOAT),
    "pm_m": ("model", _FLOAT),
    "pm_t_star": ("model", _FLOAT),
    "pm_p": ("model", _FLOAT),
    "pm_kappa": ("model", _FLOAT),
    "pm_substeps": ("model", _INT),
    "pm_step_ratio": ("model", _FLOAT),
    "weight": ("fitting", _STR),
    "mu0": ("fitting", _STR),
    "mu0_value": ("fitting", _FLOAT),
    "mu_plus_rel": ("fitting", _FLOAT),
    "mu_min": ("fitting", _FLOAT),
    "dt0": ("optimization", _FLOAT),
    "dt_min": ("optimization", _FLOAT),
    "dt_max": ("optimization", _FLOAT),
    "dt_grow": ("optimization", _FLOAT),
    "stop_tol": ("optimization", _FLOAT),
    "k_max": ("optimization", _INT),
    "solver": ("optimization", _STR),
    "preconditioner": ("optimization", _STR),
    "rtol": ("optimization", _FLOAT),
    "observed": ("io", _STR),
    "mask": ("io", _STR),
    "nx": ("io", _INT),
    "ny": ("io", _INT),
    "forcing": ("io", _STR),
    "total_mass": ("io", _FLOAT),
    "output": ("io", _STR),
    "connectivity_threshold": ("io", _FLOAT),
}
SECTIONS = ("model", "fitting", "optimization", "io")
PATH_KEYS = ("observed", "mask", "output")


@dataclass(frozen=True)
class RunSetup:
    grid: Grid2D
    cfg: NiotConfig
    forcing_spec: ForcingSpec
    total_mass: float
    observed: np.ndarray | None
    mask: np.ndarray | None
    output: Path
    connectivity_threshold: float
    values: dict


def read_config(path: str | os.PathLike) -> dict:
    """Flat ``{key: raw string}`` view of an INI file with unknown keys rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA or SCHEMA[key][0] != section:
                raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
            values[key] = raw.strip()
    for key in PATH_KEYS:
        if key in values and values[key]:
            values[key] = str((path.parent / values[key]).resolve())
    if "forcing" in values and values["forcing"].startswith("@"):
        values["forcing"] = "@" + str((path.parent / values["forcing"][1:]).resolve())
    return values


def _typed(values: dict) -> dict:
    out = {}
    for key, raw in values.items():
        kind = SCHEMA[key][1]
        try:
            out[key] = kind(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {raw!r}") from exc
    return out


_ENTRY = re.compile(r"^(source|sink)\s+(\S+)\s+(\S+)$")


def parse_forcing(text: str, grid: Grid2D) -> ForcingSpec:
    """Parse ``source|sink <ix>,<iy>|<region image> <mass>`` entries separated by ``;`` or newlines.

    ``@path`` reads the entries from a file, and region images named there are
    looked up next to it.  The keyword ``y-network`` gives the built-in
    three-terminal case with point terminals, ``y-network-spread`` the same
    case with disk terminals.
    """
    text = text.strip()
    base = Path.cwd()
    if text.startswith("@"):
        base = Path(text[1:]).parent
        try:
            text = Path(text[1:]).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read forcing file: {exc}") from exc
    if text in ("y-network", "y-network-spread"):
        return assets.y_forcing_spec(grid, spread=text.endswith("spread"))
    sources, sinks = [], []
    for raw in re.split(r"[;\n]", text):
        raw = raw.split("#", 1)[0].strip()
        if not raw:
            continue
        m = _ENTRY.match(raw)
        if not m:
            raise ConfigError(f"cannot parse forcing entry {raw!r}")
        side, where, mass = m.groups()
        try:
            mass = float(mass)
            if re.fullmatch(r"-?\d+,-?\d+", where):
                ix, iy = (int(v) for v in where.split(","))
                entry = ForcingEntry(mass, cell=(ix, iy))
            else:
                region = load_field(base / where)
                if region.shape != grid.shape:
                    raise ConfigError(f"forcing region {where} has shape {region.shape}, grid is {grid.shape}")
                entry = ForcingEntry(mass, region=(region > 0.5).astype(float))
        except (OSError, ImageFormatError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"forcing entry {raw!r}: {exc}") from exc
        (sources if side == "source" else sinks).append(entry)
    if not sources or not sinks:
        raise ConfigError("forcing needs at least one source and one sink")
    return ForcingSpec(sources, sinks)


def _pm_params(v: dict) -> PmParams | None:
    if v.get("map", "identity") != "pm":
        return None
    if "pm_p" in v or "pm_kappa" in v:
        if "pm_p" not in v or "pm_kappa" not in v:
            raise ConfigError("pm_p and pm_kappa must be given together")
        m, t_star = pm_exponents(v["pm_p"], v["pm_kappa"], 2)
    else:
        m, t_star = PmParams.m, PmParams.t_star
    m = v.get("pm_m", m)
    t_star = v.get("pm_t_star", t_star)
    return PmParams(
        m=m,
        t_star=t_star,
        substeps=v.get("pm_substeps", PmParams.substeps),
        step_ratio=v.get("pm_step_ratio", PmParams.step_ratio),
    )


def build_setup(values: dict, require_output: bool = True) -> RunSetup:
    """Validate a raw config and load every input it references."""
    v = _typed(values)
    try:
        solver = SolverSettings(
            rtol=v.get("rtol", SolverSettings.rtol),
            preconditioner=v.get("preconditioner", SolverSettings.preconditioner),
            method=v.get("solver", SolverSettings.method),
        )
        cfg = NiotConfig(
            gamma=v.get("gamma", NiotConfig.gamma),
            lam=v.get("lambda", NiotConfig.lam),
            map_kind=v.get("map", NiotConfig.map_kind),
            alpha=v.get("alpha", NiotConfig.alpha),
            pm=_pm_params(v),
            weight_kind=v.get("weight", "mask" if "mask" in v else "one"),
            mu0_kind=v.get("mu0", NiotConfig.mu0_kind),
            mu0_value=v.get("mu0_value", NiotConfig.mu0_value),
            mu_plus_rel=v.get("mu_plus_rel", NiotConfig.mu_plus_rel),
            mu_min=v.get("mu_min", NiotConfig.mu_min),
            dt0=v.get("dt0", NiotConfig.dt0),
            dt_min=v.get("dt_min", NiotConfig.dt_min),
            dt_max=v.get("dt_max", NiotConfig.dt_max),
            dt_grow=v.get("dt_grow", NiotConfig.dt_grow),
            stop_tol=v.get("stop_tol", NiotConfig.stop_tol),
            k_max=v.get("k_max", NiotConfig.k_max),
            elliptic=solver,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    observed = mask = None
    for key in ("observed", "mask"):
        if key in v and not Path(v[key]).is_file():
            raise ConfigError(f"{key} file {v[key]} not found")
    try:
        if "observed" in v:
            observed = load_field(v["observed"])
        if "mask" in v:
            mask = load_field(v["mask"])
    except (OSError, ImageFormatError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.lam > 0 and observed is None:
        raise ConfigError("lambda > 0 needs an observed image")
    if cfg.weight_kind == "mask" and mask is None:
        raise ConfigError("weight = mask needs a mask file")
    if observed is not None:
        ny, nx = observed.shape
        if ("nx" in v and v["nx"] != nx) or ("ny" in v and v["ny"] != ny):
            raise ConfigError("nx/ny disagree with the observed image size")
    elif "nx" in v and "ny" in v:
        nx, ny = v["nx"], v["ny"]
    else:
        raise ConfigError("give an observed image or both nx and ny")
    if mask is not None and mask.shape != (ny, nx):
        raise ConfigError("mask and grid sizes differ")
    if mask is not None:
        mask = (mask > 0.5).astype(float)
    try:
        grid = build_grid(nx, ny)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if "forcing" not in v:
        raise ConfigError("missing forcing specification")
    spec = parse_forcing(v["forcing"], grid)
    total_mass = v.get("total_mass", 1.0)
    try:
        build_forcing(spec, grid, total_mass)
    except (ValueError, UnbalancedForcing) as exc:
        raise ConfigError(f"forcing: {exc}") from exc
    if require_output and "output" not in v:
        raise ConfigError("missing output directory")
    threshold = v.get("connectivity_threshold", 1e-2)
    if not 0 < threshold < 1:
        raise ConfigError("connectivity_threshold must lie in (0, 1)")
    return RunSetup(grid, cfg, spec, total_mass, observed, mask, Path(v.get("output", ".")), threshold, dict(values))


# ---------------------------------------------------------------------------
# Run


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _json_safe(x) for k, x in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(x) for x in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(_json_safe(payload), indent=1, allow_nan=False), encoding="utf-8")
    tmp.replace(path)


def execute(setup: RunSetup, output: Path | None = None) -> dict:
    """Run one configuration and write its outputs; returns a summary."""
    out = output or setup.output
    forcing = build_forcing(setup.forcing_spec, setup.grid, setup.total_mass)
    report = run_niot(setup.grid, forcing, setup.cfg, observed=setup.observed, mask=setup.mask)
    connected = connectivity_check(report.mu, forcing, setup.connectivity_threshold)
    out.mkdir(parents=True, exist_ok=True)
    save_float_field(report.mu, out / "mu_rec.niotf")
    save_float_field(report.image, out / "I_rec.niotf")
    save_float_field(report.u, out / "u_final.niotf")
    previews = {}
    for name, field in (("mu_rec", report.mu), ("I_rec", report.image)):
        scale = save_grayscale(field, out / f"{name}.png", normalization="max", bits=8)
        previews[f"{name}.png"] = {"normalization": "max", "bits": 8, "white_value": scale, "black_value": 0.0}
    last = report.accepted[-1]
    summary = {
        "stopping_reason": report.stopping_reason,
        "iterations": report.iterations,
        "J": last.J,
        "E": last.E,
        "M": last.M,
        "D": last.D,
        "final_update_norm": report.final_update_norm,
        "connected": connected,
    }
    payload = {
        "status": "completed",
        "summary": summary,
        "grid": {"nx": setup.grid.nx, "ny": setup.grid.ny, "h": setup.grid.h},
        "config": setup.values,
        "niot_config": asdict(setup.cfg),
        "total_mass": setup.total_mass,
        "connectivity_threshold": setup.connectivity_threshold,
        "previews": previews,
        "run": report.to_dict(),
    }
    _write_json(out / "report.json", payload)
    return summary


SOLVER_ERRORS = (NoConvergence, NewtonNoConvergence, RuntimeError, FloatingPointError, np.linalg.LinAlgError)


def cmd_run(args) -> int:
    try:
        setup = build_setup(read_config(args.config))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = execute(setup)
    except SOLVER_ERRORS as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if summary["stopping_reason"] == "step_underflow":
        logger.warning("time step fell below dt_min before the tolerance was met")
    print(json.dumps(_json_safe(summary)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Sweep


def _parse_override(text: str) -> tuple[str, list[str]]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=v1,v2")
    key, vals = text.split("=", 1)
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"unknown key '{key}' in override")
    if key in PATH_KEYS:
        raise ConfigError(f"'{key}' cannot be swept")
    items = [s.strip() for s in vals.split(",") if s.strip()]
    if not items:
        raise ConfigError(f"override {text!r} lists no values")
    return key, items


def _job_name(index: int, combo: dict) -> str:
    parts = [f"{k}={v}" for k, v in combo.items()]
    name = "_".join(parts) if parts else "base"
    return f"{index:03d}_" + re.sub(r"[^A-Za-z0-9=._-]", "-", name)


def _sweep_job(payload):
    name, values, out_dir = payload
    try:
        setup = build_setup(values)
        summary = execute(setup, Path(out_dir))
        return {"name": name, "status": "completed", **summary}
    except ConfigError as exc:
        return {"name": name, "status": "config_error", "error": str(exc)}
    except SOLVER_ERRORS as exc:
        return {"name": name, "status": "solver_failure", "error": str(exc)}


def cmd_sweep(args) -> int:
    try:
        base = read_config(args.config)
        grid_spec = dict(_parse_override(o) for o in args.overrides)
        build_setup(base)  # validate the base before launching anything
        combos = [dict(zip(grid_spec, vals)) for vals in itertools.product(*grid_spec.values())]
        jobs = []
        for combo in combos:
            values = {**base, **combo}
            _typed(values)
            jobs.append(values)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_root = Path(base["output"])
    payloads = [(_job_name(i, c), values, str(out_root / _job_name(i, c))) for i, (c, values) in enumerate(zip(combos, jobs))]
    workers = max(1, min(args.workers or os.cpu_count() or 1, len(payloads)))
    if workers == 1:
        results = [_sweep_job(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, payloads))
    for combo, res in zip(combos, results):
        res["parameters"] = combo
    out_root.mkdir(parents=True, exist_ok=True)
    _write_json(out_root / "index.json", {"base_config": str(Path(args.config).resolve()), "runs": results})
    failed = [r["name"] for r in results if r["status"] != "completed"]
    print(json.dumps({"runs": len(results), "failed": failed}))
    return EXIT_OK if not failed else EXIT_SOLVER


# ---------------------------------------------------------------------------
# Thin wrappers


def _save_any(field: np.ndarray, path: Path, normalization: str, bits: int = 8) -> None:
    if path.suffix.lower() in (".niotf", ".bin", ".f64"):
        save_float_field(field, path)
    else:
        save_grayscale(field, path, normalization=normalization, bits=bits)


def cmd_corrupt(args) -> int:
    try:
        image = load_field(args.image)
        mask = load_field(args.mask)
        if image.shape != mask.shape:
            raise ValueError("image and mask sizes differ")
        out = apply_mask(image, (mask > 0.5).astype(float))
        _save_any(out, Path(args.out), "unit", args.bits)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_enhance(args) -> int:
    try:
        thickness = load_field(args.thickness) * args.thickness_scale
        skeleton = (load_field(args.skeleton) > 0.5).astype(float)
        if thickness.shape != skeleton.shape:
            raise ValueError("thickness and skeleton sizes differ")
        ny, nx = thickness.shape
        grid = Grid2D(nx, ny, args.h if args.h else 1.0 / nx)
        m, t_star = pm_exponents(args.p, args.kappa, 2)
        pm = PmParams(m=args.m or m, t_star=args.t_star or t_star, substeps=args.substeps)
        out = enhance_conductivity(grid, thickness, skeleton, args.kappa, args.p, pm)
        _save_any(out, Path(args.out), "max", 16)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SOLVER_ERRORS as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps({"m": pm.m, "t_star": pm.t_star, "mass": float(out.sum() * grid.cell_area)}))
    return EXIT_OK


def _point(text: str) -> tuple[float, float]:
    try:
        x, y = (float(s) for s in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected x,y but got {text!r}") from exc
    return x, y


def cmd_oracle(args) -> int:
    try:
        res = optimal_branch_point(args.O, args.P, args.Q, args.wP, 1.0 - args.wP, args.alpha, resolution=args.resolution)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    bx, by = res.point
    angle = math.degrees(res.angle) if math.isfinite(res.angle) else float("nan")
    print(f"B=({bx:.4f},{by:.4f}) E={res.energy:.6f} angle={angle:.2f}deg")
    return EXIT_OK


DEMO_CONFIG = """\
[model]
gamma = {gamma}
lambda = {lam}
map = identity
alpha = {alpha}

[fitting]
{fitting}

[optimization]
dt0 = {dt0}
k_max = {k_max}

[io]
{io}
forcing = {forcing}
total_mass = {total_mass}
output = {output}
"""


def cmd_demo(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = build_grid(args.n, args.n)
    true = assets.y_image(grid)
    mask = assets.y_mask(grid)
    save_grayscale(true, out / "y_true.png")
    save_grayscale(mask, out / "y_mask.png")
    save_grayscale(apply_mask(true, mask), out / "y_observed.png")
    (out / "transport.ini").write_text(
        DEMO_CONFIG.format(
            gamma=0.5, lam=0.0, alpha=1.0, fitting="", dt0=1e-5, k_max=20000, forcing="y-network",
            io=f"nx = {args.n}\nny = {args.n}", total_mass=assets.TRANSPORT_MASS, output="out_transport",
        ),
        encoding="utf-8",
    )
    (out / "inpaint.ini").write_text(
        DEMO_CONFIG.format(
            gamma=0.5, lam=0.1, alpha=10.0, fitting="weight = mask\nmu0 = uniform\nmu0_value = 1", dt0=1e-5,
            k_max=10000, forcing="y-network-spread", io="observed = y_observed.png\nmask = y_mask.png",
            total_mass=assets.INPAINT_MASS, output="out_inpaint",
        ),
        encoding="utf-8",
    )
    print(f"wrote demo inputs to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="niot", description="Network inpainting via optimal transport.")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    p.add_argument("--workers", type=int, default=None, help="parallel sweep jobs (default: CPU count)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run one configuration")
    s.add_argument("config")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run the Cartesian product of parameter lists")
    s.add_argument("config")
    s.add_argument("overrides", nargs="*", metavar="key=v1,v2")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("corrupt", help="zero an image inside a mask")
    s.add_argument("image")
    s.add_argument("mask")
    s.add_argument("out")
    s.add_argument("--bits", type=int, choices=(8, 16), default=8)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("enhance", help="conductivity from local thickness and skeleton")
    s.add_argument("thickness")
    s.add_argument("skeleton")
    s.add_argument("kappa", type=float)
    s.add_argument("p", type=float)
    s.add_argument("out")
    s.add_argument("--h", type=float, default=None, help="cell size (default 1/nx)")
    s.add_argument("--thickness-scale", type=float, default=1.0, help="multiplies the thickness values")
    s.add_argument("--m", type=float, default=None)
    s.add_argument("--t-star", type=float, default=None)
    s.add_argument("--substeps", type=int, default=5)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("oracle", help="optimal branch point for one source and two sinks")
    s.add_argument("O", type=_point)
    s.add_argument("P", type=_point)
    s.add_argument("Q", type=_point)
    s.add_argument("wP", type=float)
    s.add_argument("alpha", type=float)
    s.add_argument("--resolution", type=float, default=1e-4)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("demo", help="write the synthetic Y-network inputs and example configs")
    s.add_argument("out")
    s.add_argument("--n", type=int, default=208)
    s.set_defaults(func=cmd_demo)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
