"""Integration paths in the complex k_z plane and their quadrature nodes."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .medium import LayerStack, branch_points, principal_sqrt

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 1e-22
DEFAULT_F = 2.0
TRUNCATION_RATIO = 1e-20
PANEL_ORDER = 16
MAX_DOUBLINGS = 40

Probe = Callable[[complex], float]


class PathKind(enum.Enum):
    SIP = "SIP"
    DSIP_UP = "DSIP_up"
    DSIP_DOWN = "DSIP_down"

    @property
    def is_dsip(self) -> bool:
        return self is not PathKind.SIP


class ProbeNeverDecays(RuntimeError):
    """The SIP truncation search did not find the 1e-20 decay."""


@dataclass(frozen=True)
class PathSpec:
    vertices: tuple[complex, ...]
    kind: PathKind
    params: dict = field(default_factory=dict)

    def segments(self):
        return list(zip(self.vertices[:-1], self.vertices[1:]))

    def length(self) -> float:
        return sum(abs(b - a) for a, b in self.segments())


@dataclass(frozen=True)
class QuadratureSpec:
    nodes: np.ndarray
    weights: np.ndarray
    panels_per_segment: tuple[int, ...]

    @property
    def total_points(self) -> int:
        return self.nodes.size


def detour_sizes(stack: LayerStack, omega: float) -> tuple[float, float]:
    """(delta1, delta2): the SIP detour above the origin, scaled to the smallest wavenumber."""
    k_min = branch_points(stack, omega)[0]
    d1 = k_min.real / 5
    lossless = any(l.is_lossless() for l in stack.layers)
    d2 = d1 if lossless or k_min.imag == 0 else k_min.imag / 5
    return d1, d2


def _sip_vertices(d1, d2, d3, real_points=()):
    """SIP polyline; real branch points between delta1 and delta3 become panel breaks."""
    cuts = sorted(k for k in real_points if d1 < k < d3)
    left = tuple(complex(-k) for k in reversed(cuts))
    right = tuple(complex(k) for k in cuts)
    return ((complex(-d3),) + left + (complex(-d1), complex(-d1, d2), complex(d1, d2), complex(d1))
            + right + (complex(d3),))


def _real_points(pts):
    return [k.real for k in pts if k.imag == 0]


def build_sip(stack: LayerStack, omega: float, probe: Probe | None = None,
              threshold: float = TRUNCATION_RATIO, max_doublings: int = MAX_DOUBLINGS) -> PathSpec:
    """SIP with its truncation found by doubling from 5|k_min|.

    ``probe(k_z)`` returns the integrand magnitude; the search stops when
    probe(tip) / probe(elbow) falls below ``threshold``.  Without a probe
    the initial guess is used.
    """
    pts = branch_points(stack, omega)
    if not pts:
        raise ValueError("stack has no branch points")
    k_min = pts[0]
    d1, d2 = detour_sizes(stack, omega)
    d3 = 5 * abs(k_min)
    if probe is not None:
        p1 = probe(complex(d1))
        for _ in range(max_doublings):
            if p1 == 0 or probe(complex(d3)) < threshold * p1:
                break
            d3 *= 2
        else:
            raise ProbeNeverDecays("SIP integrand does not decay; use the DSIP")
    lossless = any(l.is_lossless() for l in stack.layers)
    return PathSpec(_sip_vertices(d1, d2, d3, _real_points(pts)), PathKind.SIP,
                    {"delta1": d1, "delta2": d2, "delta3": d3, "track_sheet": lossless})


def dsip_depth(dz: float, gamma: float = DEFAULT_GAMMA) -> float:
    """delta4 = -ln(gamma)/|dz|."""
    if dz == 0:
        return math.inf
    return -math.log(gamma) / abs(dz)


def build_dsip(stack: LayerStack, omega: float, dz: float, gamma: float = DEFAULT_GAMMA,
               f: float = DEFAULT_F) -> PathSpec:
    """DSIP: bent up (dz > 0) or down (dz < 0) to depth delta4 at +-delta3."""
    if dz == 0:
        raise ValueError("the DSIP needs dz != 0")
    d4 = dsip_depth(dz, gamma)
    pts = branch_points(stack, omega)
    relevant = [k for k in pts if k.imag <= d4]
    if not relevant:
        log.warning("no branch point below delta4; using all of them for delta3")
        relevant = pts
    d3 = f * max(k.real for k in relevant)
    d1, d2 = detour_sizes(stack, omega)
    sgn = 1 if dz > 0 else -1
    body = _sip_vertices(d1, d2, d3, _real_points(pts))
    verts = (complex(-d3, sgn * d4),) + body + (complex(d3, sgn * d4),)
    lossless = any(l.is_lossless() for l in stack.layers)
    kind = PathKind.DSIP_UP if dz > 0 else PathKind.DSIP_DOWN
    return PathSpec(verts, kind, {"delta1": d1, "delta2": d2, "delta3": d3, "delta4": d4,
                                  "gamma": gamma, "f": f, "track_sheet": lossless})


def choose_path(stack: LayerStack, omega: float, dz: float, probe: Probe | None = None,
                gamma: float = DEFAULT_GAMMA, f: float = DEFAULT_F) -> PathSpec:
    """SIP when dz = 0 or its truncation sits below delta4, DSIP otherwise."""
    if dz == 0:
        return build_sip(stack, omega, probe)
    d4 = dsip_depth(dz, gamma)
    try:
        sip = build_sip(stack, omega, probe)
    except ProbeNeverDecays:
        return build_dsip(stack, omega, dz, gamma, f)
    if sip.params["delta3"] < d4:
        return sip
    return build_dsip(stack, omega, dz, gamma, f)


def quadrature_nodes(path: PathSpec, n_int: int, order: int = PANEL_ORDER) -> QuadratureSpec:
    """Gauss-Legendre panels spread over the polyline in proportion to segment length."""
    if n_int < 32:
        raise ValueError("n_int must be at least 32")
    x, w = np.polynomial.legendre.leggauss(order)
    segs = path.segments()
    lengths = np.array([abs(b - a) for a, b in segs])
    total_panels = max(len(segs), int(round(n_int / order)))
    share = lengths / lengths.sum() * total_panels
    panels = np.maximum(1, np.floor(share).astype(int))
    # hand leftover panels to the segments that lost the most to rounding
    for idx in np.argsort(panels - share)[: max(0, total_panels - panels.sum())]:
        panels[idx] += 1
    nodes, weights = [], []
    for (a, b), m in zip(segs, panels):
        edges = np.linspace(0.0, 1.0, m + 1)
        lo, hi = edges[:-1, None], edges[1:, None]
        t = (lo + hi) / 2 + (hi - lo) / 2 * x
        nodes.append((a + (b - a) * t).ravel())
        weights.append(((b - a) * (hi - lo) / 2 * w).ravel())
    return QuadratureSpec(np.concatenate(nodes), np.concatenate(weights), tuple(int(p) for p in panels))


def track_sheet(k_rho_sq: np.ndarray, engaged: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Continuity-tracked k_rho along ordered nodes.

    ``k_rho_sq`` has shape (n_layers, n_nodes).  Starts on the Im >= 0 branch
    at the first node and picks, at each later node, the sign closest to the
    previous value.  Returns (k_rho, flipped) where ``flipped`` marks nodes
    off the principal branch.

    Crossing a real branch point along the real axis leaves both signs
    equidistant (k_rho turns from imaginary to real); such ties take the
    principal value, which is the outgoing choice there.
    """
    principal = principal_sqrt(np.asarray(k_rho_sq, dtype=complex))
    principal = np.atleast_2d(principal)
    if not engaged:
        return principal, np.zeros(principal.shape, dtype=bool)
    out = principal.copy()
    for col in range(1, out.shape[1]):
        prev = out[:, col - 1]
        cand = principal[:, col]
        d_same = np.abs(cand - prev)
        d_flip = np.abs(cand + prev)
        tie = d_same == d_flip
        if np.any(tie & (cand.imag != 0) & (cand.real != 0)):
            raise ArithmeticError("ambiguous branch choice while tracking k_rho")
        out[:, col] = np.where((d_flip < d_same) & ~tie, -cand, cand)
    return out, out != principal
