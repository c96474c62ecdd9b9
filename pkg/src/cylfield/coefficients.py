"""
Conditioned 2x2 reflection/transmission algebra for cylindrical layers.

Matrices are numpy arrays whose last two axes are 2x2; the leading axes
are the (order, k_z) evaluation grid.  Each hatted coefficient has a
companion log scale so that

    R_{i,i+1} = alpha_ii^2 * R_hat        R_{i+1,i} = beta_{i+1,i}^2 * R_hat
    T_{i,i+1} = T_{i+1,i} shape: alpha_ii * beta_{i+1,i} * T_hat

Only products of the form beta(inner radius) * alpha(outer radius) of one
layer are ever exponentiated; these never exceed one in magnitude.

Indexing is zero based: layer 0 is innermost and interface m separates
layers m and m+1 at ``stack.radii[m]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .medium import LayerStack, SpectralState
from .special_functions import ConditionedQuad, LogScale, conditioned_quad

__all__ = [
    "SingularBracketError",
    "ScaledMat2",
    "RTSet",
    "GeneralizedCoeffs",
    "SpectralGrid",
    "eye2",
    "inv2",
    "hatted_bessel_matrix",
    "raw_bessel_matrix",
    "local_rt_hat",
    "generalized_reflection",
    "generalized_transmission",
    "m_n_factors",
]


class SingularBracketError(ArithmeticError):
    """A 2x2 bracket could not be inverted (a guided-mode pole on the path)."""


def eye2(shape=()) -> np.ndarray:
    out = np.zeros(tuple(shape) + (2, 2), dtype=complex)
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    return out


def inv2(m: np.ndarray) -> np.ndarray:
    """Closed-form 2x2 inverse; exactly singular entries come back as NaN."""
    a, b = m[..., 0, 0], m[..., 0, 1]
    c, d = m[..., 1, 0], m[..., 1, 1]
    det = a * d - b * c
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_det = np.where(det != 0, 1.0 / det, np.nan)
    out = np.empty_like(m)
    out[..., 0, 0] = d * inv_det
    out[..., 0, 1] = -b * inv_det
    out[..., 1, 0] = -c * inv_det
    out[..., 1, 1] = a * inv_det
    return out


def _diag(a, b, shape) -> np.ndarray:
    out = np.zeros(tuple(shape) + (2, 2), dtype=complex)
    out[..., 0, 0] = a
    out[..., 1, 1] = b
    return out


def _scalar(x) -> np.ndarray:
    return np.asarray(x)[..., None, None]


@dataclass(frozen=True)
class ScaledMat2:
    """Matrix paired with a log scale; semantic value is ``exp(scale) * mat``."""

    mat: np.ndarray
    scale: LogScale

    def value(self) -> np.ndarray:
        return _scalar(np.exp(self.scale.as_log())) * self.mat


@dataclass(frozen=True)
class RTSet:
    """Hatted local coefficients at one interface.

    ``alpha_ii`` is the alpha scale of the inner layer at the interface and
    ``beta_jj`` the beta scale of the outer layer there.
    """

    r12_hat: np.ndarray
    r21_hat: np.ndarray
    t12_hat: np.ndarray
    t21_hat: np.ndarray
    alpha_ii: LogScale
    beta_jj: LogScale

    def scaled(self) -> dict[str, ScaledMat2]:
        a = self.alpha_ii
        b = self.beta_jj
        return {
            "r12": ScaledMat2(self.r12_hat, a**2),
            "r21": ScaledMat2(self.r21_hat, b**2),
            "t12": ScaledMat2(self.t12_hat, a * b),
            "t21": ScaledMat2(self.t21_hat, a * b),
        }


class SpectralGrid:
    """Conditioned functions of one layer stack on an (order, k_z) grid.

    Quads are cached per (layer, radius) so each interface and each source
    or observation radius is evaluated once.
    """

    def __init__(self, stack: LayerStack, state: SpectralState, orders):
        self.stack = stack
        self.state = state
        self.orders = np.asarray(orders, dtype=np.int64)
        self.kz = np.asarray(state.k_z, dtype=complex)
        self.shape = (self.orders.size,) + self.kz.shape
        self._n = self.orders.reshape((-1,) + (1,) * self.kz.ndim)
        self._quads: dict[tuple[int, float], ConditionedQuad] = {}

    @property
    def omega(self) -> float:
        return self.state.omega

    def k_rho(self, layer: int) -> np.ndarray:
        return self.state.k_rho[layer]

    def quad(self, layer: int, radius: float) -> ConditionedQuad:
        key = (layer, float(radius))
        q = self._quads.get(key)
        if q is None:
            z = np.broadcast_to(self.k_rho(layer) * radius, self.shape)
            q = conditioned_quad(np.broadcast_to(self._n, self.shape), z)
            self._quads[key] = q
        return q

    def log_beta(self, layer: int, radius: float) -> np.ndarray:
        return self.quad(layer, radius).log_beta

    def log_beta_inner(self, layer: int):
        a = self.stack.inner_radius(layer)
        return None if a is None else self.log_beta(layer, a)

    def log_beta_outer(self, layer: int):
        a = self.stack.outer_radius(layer)
        return None if a is None else self.log_beta(layer, a)


def _bessel_matrix(n, kz, krho, rho, omega, eps, mu, f, fp) -> np.ndarray:
    pre = 1.0 / (krho**2 * rho)
    out = np.empty(np.broadcast(f, kz).shape + (2, 2), dtype=complex)
    diag = krho * rho * fp
    off = -n * kz * f
    out[..., 0, 0] = pre * 1j * omega * eps * diag
    out[..., 0, 1] = pre * off
    out[..., 1, 0] = pre * off
    out[..., 1, 1] = pre * (-1j) * omega * mu * diag
    return out


def hatted_bessel_matrix(grid: SpectralGrid, layer: int, rho: float):
    """Hatted J-bar and H-bar matrices of one layer at radius rho.

    Returns ``(J_hat_bar, H_hat_bar, beta)`` with ``J_bar = beta * J_hat_bar``
    and ``H_bar = H_hat_bar / beta``.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    q = grid.quad(layer, rho)
    args = (grid._n, grid.kz, grid.k_rho(layer), rho, grid.omega,
            grid.state.eps[layer], grid.state.mu[layer])
    jm = _bessel_matrix(*args, q.j_hat, q.jp_hat)
    hm = _bessel_matrix(*args, q.h_hat, q.hp_hat)
    return jm, hm, q.beta


def raw_bessel_matrix(n, kz, krho, rho, omega, eps, mu, f, fp) -> np.ndarray:
    """Unconditioned B-bar matrix from raw function values (test oracle helper)."""
    return _bessel_matrix(n, kz, krho, rho, omega, eps, mu, f, fp)


def local_rt_hat(grid: SpectralGrid, interface: int) -> RTSet:
    """Hatted local R/T at one interface.

    An exactly singular D-hat leaves NaN entries, which callers treat as a
    pole hit and resolve by nudging the k_z node.
    """
    m = interface
    a = grid.stack.radii[m]
    q1 = grid.quad(m, a)
    q2 = grid.quad(m + 1, a)
    j1, h1, _ = hatted_bessel_matrix(grid, m, a)
    j2, h2, _ = hatted_bessel_matrix(grid, m + 1, a)
    d_hat = _scalar(q2.h_hat) * j1 - _scalar(q1.j_hat) * h2
    d_inv = inv2(d_hat)
    r12 = d_inv @ (_scalar(q1.h_hat) * h2 - _scalar(q2.h_hat) * h1)
    r21 = d_inv @ (_scalar(q1.j_hat) * j2 - _scalar(q2.j_hat) * j1)
    st = grid.state
    k1 = grid.k_rho(m)
    k2 = grid.k_rho(m + 1)
    w = grid.omega
    t12 = _scalar(2 * w / (np.pi * k1**2 * a)) * (
        d_inv @ _diag(st.eps[m], -st.mu[m], ()))
    t21 = _scalar(2 * w / (np.pi * k2**2 * a)) * (
        d_inv @ _diag(st.eps[m + 1], -st.mu[m + 1], ()))
    t12 = np.broadcast_to(t12, r12.shape)
    t21 = np.broadcast_to(t21, r12.shape)
    return RTSet(r12, r21, t12, t21, alpha_ii=q1.alpha, beta_jj=q2.beta)


def _bounded(log_value) -> np.ndarray:
    return np.exp(log_value)


def _chain(log_c, *mats) -> np.ndarray:
    """exp(log_c) * M1 @ M2 @ ..., normalizing each factor so that a tiny
    scale times huge hatted entries does not become 0 * inf."""
    total = np.asarray(log_c, dtype=complex)
    out = None
    for m in mats:
        norm = np.max(np.abs(m), axis=(-2, -1))
        norm = np.where((norm > 0) & np.isfinite(norm), norm, 1.0)
        total = total + np.log(norm)
        m = m / norm[..., None, None]
        out = m if out is None else out @ m
    with np.errstate(over="ignore", under="ignore"):
        return _scalar(np.exp(total)) * out


@dataclass
class GeneralizedCoeffs:
    """Hatted generalized reflections plus the scale bookkeeping per layer.

    ``rt_out[m]`` is the hatted R~_{m,m+1} (true value ``alpha_mm^2 *``) and
    ``rt_in[m]`` the hatted R~_{m+1,m} (true value ``beta_{m+1,m}^2 *``).
    ``log_in[k]``/``log_out[k]`` are log beta of layer k at its inner/outer
    radius (None where the radius does not exist).
    """

    grid: SpectralGrid
    local: list[RTSet]
    rt_out: list[np.ndarray]
    rt_in: list[np.ndarray]
    log_in: list
    log_out: list
    max_bounded: float = 0.0
    _cache: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return self.grid.stack.n_layers

    def layer_product(self, k: int, power: int = 1) -> np.ndarray:
        """(beta_{k,k-1} * alpha_kk)^power for an interior layer, as a plain array."""
        return _bounded(power * (self.log_in[k] - self.log_out[k]))

    def r_out(self, k: int):
        return self.rt_out[k] if k < self.n_layers - 1 else None

    def r_in(self, k: int):
        return self.rt_in[k - 1] if k > 0 else None


def generalized_reflection(grid: SpectralGrid) -> GeneralizedCoeffs:
    """Generalized reflections for every interface in both directions.

    The outgoing recursion starts from the outermost interface and the
    standing recursion from the innermost one.
    """
    stack = grid.stack
    n_int = stack.n_layers - 1
    local = [local_rt_hat(grid, m) for m in range(n_int)]
    log_in = [grid.log_beta_inner(k) for k in range(stack.n_layers)]
    log_out = [grid.log_beta_outer(k) for k in range(stack.n_layers)]
    eye = eye2(grid.shape)
    max_c = 0.0

    rt_out: list = [None] * n_int
    rt_in: list = [None] * n_int
    if n_int:
        rt_out[-1] = local[-1].r12_hat
        for m in range(n_int - 2, -1, -1):
            k = m + 1
            log_c = 2 * (log_in[k] - log_out[k])
            max_c = max(max_c, float(np.nanmax(np.abs(_bounded(log_c)))))
            s = local[m]
            nxt = rt_out[m + 1]
            inner = inv2(eye - _chain(log_c, s.r21_hat, nxt))
            rt_out[m] = s.r12_hat + _chain(log_c, s.t21_hat, nxt, inner, s.t12_hat)
        rt_in[0] = local[0].r21_hat
        for m in range(1, n_int):
            k = m
            log_c = 2 * (log_in[k] - log_out[k])
            max_c = max(max_c, float(np.nanmax(np.abs(_bounded(log_c)))))
            s = local[m]
            prv = rt_in[m - 1]
            inner = inv2(eye - _chain(log_c, s.r12_hat, prv))
            rt_in[m] = s.r21_hat + _chain(log_c, s.t12_hat, prv, inner, s.t21_hat)
    return GeneralizedCoeffs(grid, local, rt_out, rt_in, log_in, log_out, max_bounded=max_c)


def m_n_factors(gen: GeneralizedCoeffs, layer: int, kind: str) -> np.ndarray:
    """Multiple-reflection factor of one layer.

    ``kind`` is one of ``"M+"``, ``"M-"`` (generalized reflections on both
    sides) or ``"N+"``, ``"N-"`` (local reflection on the inner/outer side).
    """
    key = (kind, layer)
    if key in gen._cache:
        return gen._cache[key]
    grid = gen.grid
    eye = eye2(grid.shape)
    k = layer
    last = gen.n_layers - 1
    if k == 0 or k == last:
        out = eye
    else:
        log_c = 2 * (gen.log_in[k] - gen.log_out[k])
        if kind == "M+":
            pair = (gen.rt_in[k - 1], gen.rt_out[k])
        elif kind == "M-":
            pair = (gen.rt_out[k], gen.rt_in[k - 1])
        elif kind == "N+":
            pair = (gen.local[k - 1].r21_hat, gen.rt_out[k])
        elif kind == "N-":
            pair = (gen.local[k].r12_hat, gen.rt_in[k - 1])
        else:
            raise ValueError(f"unknown factor kind {kind!r}")
        out = inv2(eye - _chain(log_c, *pair))
    gen._cache[key] = out
    return out


def generalized_transmission(gen: GeneralizedCoeffs, source: int, obs: int) -> ScaledMat2:
    """Hatted generalized transmission from the source layer to the observation layer.

    Outgoing (obs > source): product ordered with k = obs-1 leftmost.
    Standing (obs < source): product ordered with k = obs+1 leftmost.
    The returned scale is beta_{i,i-1} * alpha_jj (outgoing) or
    alpha_ii * beta_{j,j-1} (standing).
    """
    j, i = source, obs
    if i == j:
        raise ValueError("transmission needs distinct layers")
    if i > j:
        mat = gen.local[i - 1].t12_hat
        for k in range(i - 1, j, -1):
            mat = _chain(gen.log_in[k] - gen.log_out[k], mat, m_n_factors(gen, k, "N+"), gen.local[k - 1].t12_hat)
        scale = LogScale.from_log(gen.log_in[i] - gen.log_out[j])
    else:
        mat = gen.local[i].t21_hat
        for k in range(i + 1, j):
            mat = _chain(gen.log_in[k] - gen.log_out[k], mat, m_n_factors(gen, k, "N-"), gen.local[k].t21_hat)
        scale = LogScale.from_log(gen.log_in[j] - gen.log_out[i])
    return ScaledMat2(mat, scale)
