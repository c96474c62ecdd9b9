"""Command-line front end: job files in, CSV out.

Job files are YAML with four sections::

    layers:
      - {resistivity_ohm_m: 1.0, outer_radius_in: 4.0}
      - {resistivity_ohm_m: 1.0}
    source:
      position: {rho_in: 5.0, phi_deg: 0.0, z_in: 0.0}
      orientation: phi          # rho | phi | z | [a_rho, a_phi, a_z]
      kind: magnetic
      moment: 1.0
      frequency_hz: 36000
    observe:
      points:
        - {rho_in: 5.0, phi_deg: 0.0, z_in: 16.0}
      component: H_phi          # optional; default is the largest component
    solver:
      tolerance: 1.0e-4

Lengths take an explicit unit suffix (``_m`` or ``_in``), angles ``_deg``
or ``_rad``.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import dataclass, replace

import numpy as np
import yaml

from .contour import DEFAULT_F, DEFAULT_GAMMA
from .integrand import Dipole
from .medium import INCH, Layer, LayerStack
from .solver import (
    FIELD_NAMES,
    JobConfig,
    analytic_homogeneous,
    compute_fields,
    compute_point,
    relative_error_db,
)

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2
VALIDATE_THRESHOLD_DB = -60.0

_ORIENTATIONS = {"rho": (1.0, 0.0, 0.0), "phi": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}
_SOLVER_KEYS = {
    "tolerance": float, "n_max": int, "n_int": int, "max_iter": int, "path": str,
    "gamma": float, "f": float, "subtract_direct": str,
}


class JobError(ValueError):
    """Job file problem; ``where`` names the offending key or line."""

    def __init__(self, where: str, msg: str):
        super().__init__(f"{where}: {msg}")
        self.where = where


@dataclass(frozen=True)
class ErrorMapSpec:
    drho: tuple[float, float, int] = (0.0, 0.30, 21)
    dz: tuple[float, float, int] = (0.0, 0.30, 21)
    n_max: int = 10
    n_int: int = 2000
    component: str = "H_phi"


@dataclass(frozen=True)
class Job:
    config: JobConfig
    errormap: ErrorMapSpec
    explicit_subtract: bool


def _length(d: dict, stem: str, where: str, required=True):
    if f"{stem}_m" in d:
        return float(d[f"{stem}_m"])
    if f"{stem}_in" in d:
        return float(d[f"{stem}_in"]) * INCH
    if required:
        raise JobError(where, f"missing {stem}_m or {stem}_in")
    return None


def _angle(d: dict, stem: str, where: str) -> float:
    if f"{stem}_rad" in d:
        return float(d[f"{stem}_rad"])
    if f"{stem}_deg" in d:
        return math.radians(float(d[f"{stem}_deg"]))
    return 0.0


def _point(d, where):
    if not isinstance(d, dict):
        raise JobError(where, "expected a mapping")
    return (_length(d, "rho", where), _angle(d, "phi", where), _length(d, "z", where))


def _layer(d: dict, where: str) -> tuple[Layer, float | None]:
    if not isinstance(d, dict):
        raise JobError(where, "expected a mapping")
    if "resistivity_ohm_m" in d and "sigma" in d:
        raise JobError(where, "give resistivity_ohm_m or sigma, not both")
    sigma = 1.0 / float(d["resistivity_ohm_m"]) if "resistivity_ohm_m" in d else float(d.get("sigma", 0.0))
    layer = Layer(eps_r=float(d.get("eps_r", 1.0)), mu_r=float(d.get("mu_r", 1.0)),
                  sigma=sigma, sigma_m=float(d.get("sigma_m", 0.0)))
    return layer, _length(d, "outer_radius", where, required=False)


def _grid_axis(spec, where):
    if not (isinstance(spec, (list, tuple)) and len(spec) == 3):
        raise JobError(where, "grid axis must be [start, stop, count]")
    return np.linspace(float(spec[0]), float(spec[1]), int(spec[2]))


def _observers(obs: dict) -> list:
    pts = [_point(p, f"observe.points[{k}]") for k, p in enumerate(obs.get("points") or [])]
    grid = obs.get("grid")
    if grid:
        unit = INCH if grid.get("unit", "m") == "in" else 1.0
        rhos = _grid_axis(grid.get("rho", [1, 1, 1]), "observe.grid.rho") * unit
        zs = _grid_axis(grid.get("z", [0, 0, 1]), "observe.grid.z") * unit
        phis = np.radians(_grid_axis(grid.get("phi_deg", [0, 0, 1]), "observe.grid.phi_deg"))
        pts += [(float(r), float(p), float(z)) for r in rhos for p in phis for z in zs]
    return pts


def parse_job(text: str, require_observers: bool = True) -> Job:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "job"
        raise JobError(where, str(getattr(exc, "problem", exc))) from exc
    if not isinstance(doc, dict):
        raise JobError("job", "top level must be a mapping")
    try:
        return _build_job(doc, require_observers)
    except JobError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise JobError("job", str(exc)) from exc


def _build_job(doc: dict, require_observers: bool) -> Job:
    layers_doc = doc.get("layers")
    if not layers_doc:
        raise JobError("layers", "at least one layer is required")
    layers, radii = [], []
    for k, d in enumerate(layers_doc):
        layer, radius = _layer(d, f"layers[{k}]")
        layers.append(layer)
        if k < len(layers_doc) - 1:
            if radius is None:
                raise JobError(f"layers[{k}]", "inner layers need outer_radius_m or outer_radius_in")
            radii.append(radius)
        elif radius is not None:
            raise JobError(f"layers[{k}]", "the outermost layer is unbounded")
    stack = LayerStack(tuple(layers), tuple(radii))

    src = doc.get("source")
    if not isinstance(src, dict):
        raise JobError("source", "missing source section")
    rho, phi, z = _point(src.get("position"), "source.position")
    ori = src.get("orientation", "z")
    if isinstance(ori, str):
        if ori not in _ORIENTATIONS:
            raise JobError("source.orientation", f"unknown orientation {ori!r}")
        ori = _ORIENTATIONS[ori]
    if "frequency_hz" not in src:
        raise JobError("source", "missing frequency_hz")
    dipole = Dipole(rho, phi, z, tuple(ori), src.get("kind", "electric"), float(src.get("moment", 1.0)))

    obs = doc.get("observe") or {}
    observers = _observers(obs)
    if require_observers and not observers:
        raise JobError("observe", "no observation points")

    solver = doc.get("solver") or {}
    unknown = set(solver) - set(_SOLVER_KEYS)
    if unknown:
        raise JobError("solver", f"unknown keys {sorted(unknown)}")
    kw = {k: _SOLVER_KEYS[k](v) for k, v in solver.items()}
    cfg = JobConfig(stack, float(src["frequency_hz"]), dipole, tuple(observers),
                    monitor=obs.get("component"), **kw)

    em = doc.get("errormap") or {}
    emap = ErrorMapSpec(
        drho=tuple(em.get("drho_m", ErrorMapSpec.drho)),
        dz=tuple(em.get("dz_m", ErrorMapSpec.dz)),
        n_max=int(em.get("n_max", ErrorMapSpec.n_max)),
        n_int=int(em.get("n_int", ErrorMapSpec.n_int)),
        component=em.get("component", ErrorMapSpec.component),
    )
    return Job(cfg, emap, "subtract_direct" in solver)


def load_job(path: str, require_observers: bool = True) -> Job:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise JobError(path, exc.strerror or str(exc)) from exc
    return parse_job(text, require_observers)


def dump_job(job: Job) -> str:
    """Normalized YAML (SI lengths, radian angles) that reparses to the same job."""
    cfg = job.config
    layers = []
    for k, l in enumerate(cfg.stack.layers):
        d = {"sigma": l.sigma, "eps_r": l.eps_r, "mu_r": l.mu_r, "sigma_m": l.sigma_m}
        if k < len(cfg.stack.radii):
            d["outer_radius_m"] = cfg.stack.radii[k]
        layers.append(d)
    dp = cfg.dipole
    doc = {
        "layers": layers,
        "source": {
            "position": {"rho_m": dp.rho, "phi_rad": dp.phi, "z_m": dp.z},
            "orientation": list(dp.orientation),
            "kind": dp.kind,
            "moment": dp.moment,
            "frequency_hz": cfg.frequency,
        },
        "observe": {"points": [{"rho_m": r, "phi_rad": p, "z_m": z} for r, p, z in cfg.observers]},
        "solver": {k: getattr(cfg, k) for k in _SOLVER_KEYS},
        "errormap": {
            "drho_m": list(job.errormap.drho), "dz_m": list(job.errormap.dz),
            "n_max": job.errormap.n_max, "n_int": job.errormap.n_int,
            "component": job.errormap.component,
        },
    }
    if cfg.monitor is not None:
        doc["observe"]["component"] = cfg.monitor
    return yaml.safe_dump(doc, sort_keys=False)


def _apply_flags(cfg: JobConfig, args) -> JobConfig:
    kw = {}
    for flag, key in (("path", "path"), ("tolerance", "tolerance"), ("gamma", "gamma"),
                      ("max_iter", "max_iter"), ("n_max", "n_max"), ("n_int", "n_int")):
        val = getattr(args, flag, None)
        if val is not None:
            kw[key] = val
    return replace(cfg, **kw) if kw else cfg


def _settings_line(cfg: JobConfig) -> str:
    return (f"# tolerance={cfg.tolerance:g} n_max={cfg.n_max} n_int={cfg.n_int} max_iter={cfg.max_iter} "
            f"path={cfg.path} gamma={cfg.gamma:g} f={cfg.f:g} subtract_direct={cfg.subtract_direct} "
            f"magnitude_threshold=1e100")


def _fmt(x: float) -> str:
    return repr(float(x))


def _field_rows(cfg: JobConfig, result) -> list[list[str]]:
    header = ["rho_m", "phi_rad", "z_m"]
    for name in FIELD_NAMES:
        header += [f"{name}_re", f"{name}_im"]
    header += ["monitored", "monitored_abs", "monitored_phase_deg", "iterations", "n_max", "n_int",
               "rel_error", "path", "subtraction", "converged"]
    rows = [header]
    for k, (obs, rep) in enumerate(zip(cfg.observers, result.reports)):
        vals = np.concatenate([result.E[k], result.H[k]])
        row = [_fmt(c) for c in obs]
        for v in vals:
            row += [_fmt(v.real), _fmt(v.imag)]
        mon = vals[FIELD_NAMES.index(rep.monitored)]
        row += [rep.monitored, _fmt(abs(mon)), _fmt(math.degrees(np.angle(mon))), str(rep.iterations),
                str(rep.n_max), str(rep.n_int), _fmt(rep.rel_error), rep.path_kind,
                str(bool(rep.subtraction)).lower(), str(bool(rep.converged)).lower()]
        rows.append(row)
    return rows


def _write_csv(rows, out):
    w = csv.writer(out, lineterminator="\n")
    w.writerows(rows)


def cmd_field(args, out) -> int:
    job = load_job(args.job)
    cfg = _apply_flags(job.config, args)
    print(_settings_line(cfg), file=sys.stderr)
    result = compute_fields(cfg, jobs=args.jobs)
    _write_csv(_field_rows(cfg, result), out)
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_validate(args, out) -> int:
    job = load_job(args.job)
    cfg = _apply_flags(job.config, args)
    if not cfg.stack.is_homogeneous():
        raise JobError("layers", "validate requires homogeneous stack")
    if not job.explicit_subtract:
        # the closed form is the reference, so keep it out of the numeric path
        cfg = replace(cfg, subtract_direct="never")
    result = compute_fields(cfg, jobs=args.jobs)
    print(_settings_line(cfg), file=out)
    rows = [["rho_m", "phi_rad", "z_m", "component", "numeric_re", "numeric_im",
             "analytic_re", "analytic_im", "error_db"]]
    worst = -math.inf
    for k, obs in enumerate(cfg.observers):
        e_a, h_a = analytic_homogeneous(cfg.dipole, obs, cfg.stack, cfg.omega)
        ref = np.concatenate([e_a, h_a])
        num = np.concatenate([result.E[k], result.H[k]])
        name = cfg.monitor or FIELD_NAMES[int(np.argmax(np.abs(ref)))]
        idx = FIELD_NAMES.index(name)
        for i, comp in enumerate(FIELD_NAMES):
            db = relative_error_db(ref[i], num[i]) if ref[i] != 0 else float("nan")
            if i == idx:
                worst = max(worst, db)
            rows.append([*(_fmt(c) for c in obs), comp, _fmt(num[i].real), _fmt(num[i].imag),
                         _fmt(ref[i].real), _fmt(ref[i].imag), _fmt(db)])
    _write_csv(rows, out)
    print(f"# worst error_db={worst:.2f} threshold={VALIDATE_THRESHOLD_DB:g}", file=out)
    if not result.converged:
        return EXIT_NONCONVERGED
    return EXIT_OK if worst <= VALIDATE_THRESHOLD_DB else EXIT_NONCONVERGED


def errormap_grid(job: Job, n_max: int | None = None, n_int: int | None = None,
                  path: str | None = None, jobs: int = 1):
    """epsilon_dB over the (rho - rho', z - z') grid at fixed n_max and n_int.

    The direct field is never subtracted here: the map measures the raw
    spectral integral against the closed form.
    """
    cfg = job.config
    em = job.errormap
    if not cfg.stack.is_homogeneous():
        raise JobError("layers", "errormap requires homogeneous stack")
    dp = cfg.dipole
    drhos = _grid_axis(em.drho, "errormap.drho_m")
    dzs = _grid_axis(em.dz, "errormap.dz_m")
    pts = [(dp.rho + dr, dp.phi, dp.z + dz) for dr in drhos for dz in dzs if (dr, dz) != (0.0, 0.0)]
    base = replace(cfg, observers=tuple(pts), n_max=n_max if n_max is not None else em.n_max,
                   n_int=n_int if n_int is not None else em.n_int, adaptive=False,
                   subtract_direct="never", path=path or cfg.path, monitor=em.component)
    result = compute_fields(base, jobs=jobs)
    idx = FIELD_NAMES.index(em.component)
    rows = []
    for k, obs in enumerate(pts):
        e_a, h_a = analytic_homogeneous(dp, obs, cfg.stack, cfg.omega)
        ref = np.concatenate([e_a, h_a])[idx]
        num = np.concatenate([result.E[k], result.H[k]])[idx]
        rows.append((obs[0] - dp.rho, obs[2] - dp.z, relative_error_db(ref, num),
                     result.reports[k].path_kind))
    return rows


def _plot_errormap(rows, path_png: str, title: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    drho = np.array(sorted({r[0] for r in rows}))
    dz = np.array(sorted({r[1] for r in rows}))
    grid = np.full((dz.size, drho.size), np.nan)
    for dr, z, db, _ in rows:
        grid[np.searchsorted(dz, z), np.searchsorted(drho, dr)] = db
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    mesh = ax.pcolormesh(drho * 100, dz * 100, grid, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="relative error [dB]")
    ax.set_xlabel(r"$\rho-\rho'$ [cm]")
    ax.set_ylabel(r"$z-z'$ [cm]")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path_png, dpi=120)
    plt.close(fig)


def cmd_errormap(args, out) -> int:
    job = load_job(args.job, require_observers=False)
    path = args.path if args.path is not None else job.config.path
    rows = errormap_grid(job, n_max=args.n_max, n_int=args.n_int, path=path, jobs=args.jobs)
    _write_csv([["drho_m", "dz_m", "error_db", "path"]] + [[_fmt(a), _fmt(b), _fmt(c), d] for a, b, c, d in rows],
               out)
    if args.plot:
        em = job.errormap
        n_max = args.n_max if args.n_max is not None else em.n_max
        n_int = args.n_int if args.n_int is not None else em.n_int
        _plot_errormap(rows, args.plot, f"{em.component}, path={path}, n_max={n_max}, n_int={n_int}")
    return EXIT_OK


def cmd_dump_config(args, out) -> int:
    job = load_job(args.job, require_observers=False)
    job = replace(job, config=_apply_flags(job.config, args))
    out.write(dump_job(job))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("job", help="YAML job file")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--path", choices=("auto", "sip", "dsip"), default=None)
    common.add_argument("--tolerance", type=float, default=None)
    common.add_argument("--gamma", type=float, default=None)
    common.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    common.add_argument("--n-max", dest="n_max", type=int, default=None, help="initial highest mode")
    common.add_argument("--n-int", dest="n_int", type=int, default=None, help="initial quadrature nodes")
    common.add_argument("--out", default=None, help="write output here instead of stdout")

    parser = argparse.ArgumentParser(prog="cylfield",
                                     description="Dipole fields in cylindrically layered media.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("field", parents=[common], help="fields at the observation points (CSV)")
    sub.add_parser("validate", parents=[common], help="compare with the closed form (homogeneous only)")
    em = sub.add_parser("errormap", parents=[common], help="error map over a (rho, z) grid (CSV)")
    em.add_argument("--plot", default=None, metavar="PNG", help="also render the map to a PNG file")
    sub.add_parser("dump-config", parents=[common], help="print the normalized job file")
    return parser


_COMMANDS = {"field": cmd_field, "validate": cmd_validate, "errormap": cmd_errormap,
             "dump-config": cmd_dump_config}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    buf = io.StringIO()
    try:
        code = _COMMANDS[args.command](args, buf)
    except (JobError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = buf.getvalue()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
