"""Field computation with adaptive refinement of quadrature density and mode count."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import numpy as np

from .contour import (
    DEFAULT_F,
    DEFAULT_GAMMA,
    PathKind,
    PathSpec,
    build_dsip,
    build_sip,
    choose_path,
    ProbeNeverDecays,
    quadrature_nodes,
    track_sheet,
)
from .integrand import (
    Dipole,
    classify_case,
    closed_form_direct,
    CaseId,
    spectral_integrand,
    subtraction_decision,
)
from .medium import LayerStack, complex_constitutives

log = logging.getLogger(__name__)

__all__ = [
    "JobConfig",
    "PointReport",
    "FieldResult",
    "NonConvergenceError",
    "compute_fields",
    "compute_point",
    "analytic_homogeneous",
    "relative_error_db",
    "electric_equivalent",
    "FIELD_NAMES",
]

DB_FLOOR = -300.0
FIELD_NAMES = ("E_rho", "E_phi", "E_z", "H_rho", "H_phi", "H_z")


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class JobConfig:
    stack: LayerStack
    frequency: float
    dipole: Dipole
    observers: tuple[tuple[float, float, float], ...]
    tolerance: float = 1e-4
    n_max: int = 10
    n_int: int = 500
    max_iter: int = 8
    path: str = "auto"
    gamma: float = DEFAULT_GAMMA
    f: float = DEFAULT_F
    subtract_direct: str = "auto"
    adaptive: bool = True
    monitor: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "observers", tuple(tuple(float(c) for c in p) for p in self.observers))
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")
        if self.n_max < 0 or self.n_int < 32 or self.max_iter < 1:
            raise ValueError("need n_max >= 0, n_int >= 32 and max_iter >= 1")
        if self.path not in ("auto", "sip", "dsip"):
            raise ValueError("path must be auto, sip or dsip")
        if self.subtract_direct not in ("auto", "always", "never"):
            raise ValueError("subtract_direct must be auto, always or never")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.dipole.rho in self.stack.radii:
            raise ValueError("the dipole must lie strictly inside a layer")
        if self.monitor is not None and self.monitor not in FIELD_NAMES:
            raise ValueError(f"monitor must be one of {', '.join(FIELD_NAMES)}")
        if any(p[0] <= 0 for p in self.observers):
            raise ValueError("observation radii must be positive")

    @property
    def omega(self) -> float:
        return 2 * math.pi * self.frequency


@dataclass
class PointReport:
    iterations: int
    n_max: int
    n_int: int
    rel_error: float
    path_kind: str
    subtraction: bool
    converged: bool
    monitored: str
    seconds: float = 0.0
    history: list = field(default_factory=list)


@dataclass
class FieldResult:
    """E and H per observer as (rho, phi, z) complex components."""

    E: np.ndarray
    H: np.ndarray
    reports: list[PointReport]

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.reports)

    def component(self, name: str) -> np.ndarray:
        field_, comp = name.split("_")
        arr = self.E if field_ == "E" else self.H
        return arr[:, ("rho", "phi", "z").index(comp)]


def relative_error_db(reference: complex, numeric: complex) -> float:
    """10 log10(|numeric - reference| / |reference|), floored at -300 dB."""
    if reference == 0:
        raise ValueError("reference must be nonzero")
    rel = abs(numeric - reference) / abs(reference)
    if rel == 0:
        return DB_FLOOR
    return max(DB_FLOOR, 10 * math.log10(rel))


def analytic_homogeneous(dipole: Dipole, obs, stack: LayerStack, omega: float):
    """Closed-form (E, H) for a homogeneous stack."""
    if not stack.is_homogeneous():
        raise ValueError("analytic fields need a homogeneous stack")
    return closed_form_direct(dipole, obs, stack.layers[0], omega)


def electric_equivalent(stack: LayerStack, dipole: Dipole) -> tuple[LayerStack, Dipole]:
    """Electric problem whose fields map back by duality (identity for electric dipoles)."""
    if dipole.kind == "electric":
        return stack, dipole
    return stack.dual(), replace(dipole, kind="electric")


def _to_fields(rows: np.ndarray):
    """Six spectral rows -> (E, H) in (rho, phi, z) order."""
    ez, hz, er, hr, ep, hp = rows
    return np.array([er, ep, ez]), np.array([hr, hp, hz])


def _path_for(cfg: JobConfig, stack, dip, rho, dphi, dz, subtract, kind: str) -> PathSpec:
    omega = cfg.omega

    def probe(kz: complex) -> float:
        v = spectral_integrand(stack, omega, [kz], 0, dip, [(rho, dphi)], [subtract])
        return float(np.max(np.abs(v)))

    if kind == "sip" or (kind == "dsip" and dz == 0):
        try:
            return build_sip(stack, omega, probe)
        except ProbeNeverDecays:
            # fall back to a fixed truncation far past the largest wavenumber
            log.warning("SIP probe never decayed; using the initial truncation")
            return build_sip(stack, omega, None)
    if kind == "dsip":
        return build_dsip(stack, omega, dz, cfg.gamma, cfg.f)
    return choose_path(stack, omega, dz, probe, cfg.gamma, cfg.f)


def _sheet_k_rho(stack, omega, path, nodes):
    if not path.params.get("track_sheet"):
        return None
    k2 = np.array([omega**2 * np.prod(complex_constitutives(l, omega)) for l in stack.layers])
    kr, _ = track_sheet(k2[:, None] - nodes[None, :] ** 2)
    return kr


def _evaluate(cfg, stack, dip, obs, path, n_max, n_int, subtract):
    rho, phi, z = obs
    dz = z - dip.z
    q = quadrature_nodes(path, n_int)
    kr = _sheet_k_rho(stack, cfg.omega, path, q.nodes)
    v = spectral_integrand(stack, cfg.omega, q.nodes, n_max, dip, [(rho, phi - dip.phi)],
                           [subtract], k_rho=kr)[0]
    rows = np.sum(v * (q.weights * np.exp(1j * q.nodes * dz))[:, None], axis=0)
    e, h = _to_fields(rows)
    if subtract:
        j = stack.layer_of(dip.rho, source=True)
        e0, h0 = closed_form_direct(dip, obs, stack.layers[j], cfg.omega)
        e, h = e + e0, h + h0
    return e, h


def _decide_subtraction(cfg, stack, dip, rho, n_max) -> bool:
    if cfg.subtract_direct == "never":
        return False
    if classify_case(stack, rho, dip.rho) not in (CaseId.CASE1, CaseId.CASE2):
        return False
    if cfg.subtract_direct == "always":
        return True
    j = stack.layer_of(dip.rho, source=True)
    eps, mu = complex_constitutives(stack.layers[j], cfg.omega)
    k = complex(np.sqrt(cfg.omega**2 * eps * mu))
    return subtraction_decision(n_max, k, rho, dip.rho)


def _monitor_index(cfg, vals) -> int:
    if cfg.monitor is None:
        return int(np.argmax(np.abs(vals)))
    idx = FIELD_NAMES.index(cfg.monitor)
    if cfg.dipole.kind == "magnetic":
        # vals hold the electric-equivalent fields: E_m = -H_e, H_m = E_e
        idx = (idx + 3) % 6
    return idx


def _run(cfg, stack, dip, obs, kind):
    rho, phi, z = obs
    dz = z - dip.z
    dphi = phi - dip.phi
    n_max, n_int = cfg.n_max, cfg.n_int
    path = None
    path_subtract = None
    prev = None
    history = []
    e = h = None
    subtract = False
    err = math.inf
    monitored = ""
    iters = cfg.max_iter if cfg.adaptive else 1
    for it in range(1, iters + 1):
        subtract = _decide_subtraction(cfg, stack, dip, rho, n_max)
        if path is None or path_subtract != subtract:
            path = _path_for(cfg, stack, dip, rho, dphi, dz, subtract, kind)
            path_subtract = subtract
        e, h = _evaluate(cfg, stack, dip, obs, path, n_max, n_int, subtract)
        vals = np.concatenate([e, h])
        idx = _monitor_index(cfg, vals)
        monitored = FIELD_NAMES[(idx + 3) % 6 if cfg.dipole.kind == "magnetic" else idx]
        if prev is not None:
            cur = vals[idx]
            err = abs(cur - prev[idx]) / abs(cur) if cur != 0 else (0.0 if prev[idx] == 0 else math.inf)
            history.append(err)
            if err < cfg.tolerance:
                return e, h, PointReport(it, n_max, n_int, err, path.kind.value, subtract, True, monitored,
                                         history=history)
        prev = vals
        if it < iters:
            n_int *= 2
            n_max += 10
    converged = not cfg.adaptive
    return e, h, PointReport(iters, n_max, n_int, err, path.kind.value, subtract, converged, monitored,
                             history=history)


def compute_point(cfg: JobConfig, obs) -> tuple[np.ndarray, np.ndarray, PointReport]:
    """Fields at one observer, with one SIP retry if the DSIP fails to converge."""
    t0 = time.perf_counter()
    stack, dip = electric_equivalent(cfg.stack, cfg.dipole)
    e, h, rep = _run(cfg, stack, dip, obs, cfg.path)
    if not rep.converged and cfg.path == "auto" and rep.path_kind != PathKind.SIP.value:
        log.info("DSIP did not converge at %s; retrying on the SIP", obs)
        retry = _run(cfg, stack, dip, obs, "sip")
        if retry[2].converged:
            e, h, rep = retry
    if cfg.dipole.kind == "magnetic":
        e, h = -h, e
    rep.seconds = time.perf_counter() - t0
    return e, h, rep


def _point_task(args):
    cfg, obs = args
    return compute_point(cfg, obs)


def compute_fields(cfg: JobConfig, jobs: int = 1, strict: bool = False) -> FieldResult:
    """Fields at every observer; results do not depend on ``jobs``."""
    if not cfg.observers:
        raise ValueError("no observation points")
    tasks = [(cfg, obs) for obs in cfg.observers]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_point_task, tasks))
    else:
        out = [_point_task(t) for t in tasks]
    res = FieldResult(np.array([o[0] for o in out]), np.array([o[1] for o in out]), [o[2] for o in out])
    if strict and not res.converged:
        bad = [r for r in res.reports if not r.converged]
        raise NonConvergenceError(f"{len(bad)} observation point(s) did not converge "
                                  f"(last error {bad[0].rel_error:.3g})")
    return res
