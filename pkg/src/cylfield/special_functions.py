"""
Complex-argument cylindrical functions and their range-conditioned forms.

Every Bessel/Hankel value that enters the layered-medium algebra is split
into a bounded "hatted" part and a scale factor kept in log form:

    J_n(z)  = beta  * j_hat        J'_n(z) = beta  * jp_hat
    H_n(z)  = alpha * h_hat        H'_n(z) = alpha * hp_hat

with ``alpha = 1 / beta``.  The scale depends on the argument class
(small, moderate or large), so that products such as ``H_n(k rho) J_n(k rho')``
can be formed from exponents that cancel before anything is exponentiated.

All public functions accept numpy arrays and broadcast ``n`` against ``z``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special as sp

__all__ = [
    "ArgumentClass",
    "LogScale",
    "ConditionedQuad",
    "RangeError",
    "SMALL_ABS_THRESHOLD",
    "SMALL_MIN_ORDER",
    "LARGE_IMAG_THRESHOLD",
    "MAGNITUDE_THRESHOLD",
    "ln_factorial",
    "bessel_j_ref",
    "bessel_jp_ref",
    "hankel1_ref",
    "hankel1p_ref",
    "small_argument_leading",
    "classify",
    "conditioned_quad",
    "asymptotic_large_quad",
]

SMALL_ABS_THRESHOLD = 1e-4
SMALL_MIN_ORDER = 5
LARGE_IMAG_THRESHOLD = 30.0
MAGNITUDE_THRESHOLD = 1e100
LOG_CONVERT_LIMIT = 230.0

_LOG_MAGNITUDE_THRESHOLD = math.log(MAGNITUDE_THRESHOLD)
# raw values outside this window are treated as not representable
_TINY = 1e-290
_HUGE = 1e290


class RangeError(ArithmeticError):
    """A raw cylindrical function value falls outside double range."""


class ArgumentClass(enum.IntEnum):
    SMALL = 0
    MODERATE = 1
    LARGE = 2


@dataclass(frozen=True)
class LogScale:
    """Nonzero complex factor ``exp(log_magnitude + i*phase)``.

    Fields may be scalars or arrays of a common shape.  Multiplication adds
    the fields, so arbitrarily large or small factors can be combined
    without leaving double range.
    """

    log_magnitude: np.ndarray
    phase: np.ndarray

    @classmethod
    def from_log(cls, value) -> "LogScale":
        value = np.asarray(value, dtype=complex)
        return cls(value.real.copy(), value.imag.copy())

    @classmethod
    def unit(cls, shape=()) -> "LogScale":
        return cls(np.zeros(shape), np.zeros(shape))

    def as_log(self) -> np.ndarray:
        return np.asarray(self.log_magnitude) + 1j * np.asarray(self.phase)

    def __mul__(self, other: "LogScale") -> "LogScale":
        return LogScale(
            np.asarray(self.log_magnitude) + other.log_magnitude,
            np.asarray(self.phase) + other.phase,
        )

    def __truediv__(self, other: "LogScale") -> "LogScale":
        return self * other.reciprocal()

    def __pow__(self, k: int) -> "LogScale":
        return LogScale(k * np.asarray(self.log_magnitude), k * np.asarray(self.phase))

    def reciprocal(self) -> "LogScale":
        return LogScale(-np.asarray(self.log_magnitude), -np.asarray(self.phase))

    def to_complex(self) -> np.ndarray:
        """Plain complex value; refused when the magnitude is near double limits."""
        mag = np.asarray(self.log_magnitude)
        if np.any(np.abs(mag) > LOG_CONVERT_LIMIT):
            raise RangeError("log scale too large to convert to a plain number")
        return np.exp(self.as_log())


@dataclass(frozen=True)
class ConditionedQuad:
    """Hatted J, J', H, H' at one (order, argument) grid plus their scales."""

    j_hat: np.ndarray
    jp_hat: np.ndarray
    h_hat: np.ndarray
    hp_hat: np.ndarray
    arg_class: np.ndarray
    alpha: LogScale
    beta: LogScale

    @property
    def log_beta(self) -> np.ndarray:
        return self.beta.as_log()

    def reconstruct(self):
        """Raw (J, J', H, H'); only meaningful where the values are representable."""
        b = np.exp(self.beta.as_log())
        a = np.exp(self.alpha.as_log())
        return b * self.j_hat, b * self.jp_hat, a * self.h_hat, a * self.hp_hat


def ln_factorial(n):
    """Natural log of n! for integer n >= 0 (array aware)."""
    return sp.gammaln(np.asarray(n, dtype=float) + 1.0)


def _as_arrays(n, z):
    n = np.asarray(n)
    z = np.asarray(z, dtype=complex)
    n, z = np.broadcast_arrays(n, z)
    return n.astype(np.int64), z


# ---------------------------------------------------------------------------
# Reference (raw) functions
# ---------------------------------------------------------------------------

def _raw_j(n, z):
    with np.errstate(all="ignore"):
        je = sp.jve(n, z)
        log_mag = np.log(np.abs(je)) + np.abs(z.imag)
        val = je * np.exp(np.abs(z.imag))
    return val, je, log_mag


def bessel_j_ref(n, z):
    """J_n(z) for integer order and complex argument.

    Raises
    ------
    RangeError
        If the true value under- or overflows double precision.
    """
    n, z = _as_arrays(n, z)
    val, je, log_mag = _raw_j(n, z)
    bad = ~np.isfinite(val) | ((je == 0) & (z != 0)) | (log_mag < math.log(_TINY)) & (z != 0)
    bad &= ~((n == 0) & (z == 0))
    if np.any(bad):
        raise RangeError("J_n(z) not representable; use conditioned_quad")
    return val[()] if val.ndim == 0 else val


def hankel1_ref(n, z):
    """H^(1)_n(z) for integer order and nonzero complex argument."""
    n, z = _as_arrays(n, z)
    if np.any(z == 0):
        raise ValueError("H_n is singular at z = 0")
    with np.errstate(all="ignore"):
        he = sp.hankel1e(n, z)
        val = he * np.exp(1j * z)
    if np.any(~np.isfinite(val) | (np.abs(val) > _HUGE) | (np.abs(val) < _TINY)):
        raise RangeError("H_n(z) not representable; use conditioned_quad")
    return val[()] if val.ndim == 0 else val


def bessel_jp_ref(n, z):
    """dJ_n/dz via J'_n = J_{n-1} - (n/z) J_n."""
    n, z = _as_arrays(n, z)
    if np.any(z == 0):
        return np.where(n == 1, 0.5, 0.0) + 0j
    return bessel_j_ref(n - 1, z) - n / z * bessel_j_ref(n, z)


def hankel1p_ref(n, z):
    """dH^(1)_n/dz via the same recurrence."""
    n, z = _as_arrays(n, z)
    return hankel1_ref(n - 1, z) - n / z * hankel1_ref(n, z)


def small_argument_leading(n, z):
    """Leading small-argument forms of (J_n, J'_n, H_n, H'_n) for n >= 1."""
    n, z = _as_arrays(n, z)
    lb = n * np.log(z / 2) - ln_factorial(n)
    beta = np.exp(lb)
    alpha = np.exp(-lb)
    return (
        beta,
        beta * n / z,
        alpha * (-1j / (n * np.pi)),
        alpha * 1j / (np.pi * z),
    )


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def classify(n, z):
    """Argument class of each (n, z) pair as an int array of ArgumentClass values."""
    n, z = _as_arrays(n, z)
    cls = np.full(z.shape, int(ArgumentClass.MODERATE), dtype=np.int64)
    cls[(np.abs(z) < SMALL_ABS_THRESHOLD) & (n >= SMALL_MIN_ORDER)] = ArgumentClass.SMALL
    cls[z.imag >= LARGE_IMAG_THRESHOLD] = ArgumentClass.LARGE
    return cls


# ---------------------------------------------------------------------------
# Scaled evaluation routes
# ---------------------------------------------------------------------------

def _route_exp_scaled(n, z):
    """Hatted values relative to the scale exp(|Im z|), from AMOS scaled routines."""
    s = np.abs(z.imag)
    with np.errstate(all="ignore"):
        je = sp.jve(n, z)
        je1 = sp.jve(n - 1, z)
        he = sp.hankel1e(n, z)
        he1 = sp.hankel1e(n - 1, z)
        # H * exp(s) = hankel1e * exp(i z + s)
        ph = np.exp(1j * z.real + (s - z.imag))
        nz = n / z
        jh = je
        jph = je1 - nz * je
        hh = he * ph
        hph = (he1 - nz * he) * ph
    ok = np.isfinite(jh) & np.isfinite(jph) & np.isfinite(hh) & np.isfinite(hph)
    ok &= (np.abs(jh) > _TINY) & (np.abs(hh) < _HUGE) & (np.abs(hph) < _HUGE)
    return (jh, jph, hh, hph), s.astype(complex), ok


def _series_j_hat(n, z):
    """J_n(z) / ((z/2)^n / n!) by the ascending series."""
    q = -(z * z) / 4.0
    term = np.ones_like(z)
    total = np.ones_like(z)
    nf = n.astype(float)
    for k in range(1, 200):
        term = term * q / (k * (nf + k))
        total = total + term
        if np.all(np.abs(term) <= 1e-17 * np.abs(total)):
            break
    return total


def _y_hat_table(z, nmax):
    """beta_m * Y_m(z) for m = 0..nmax with beta_m = (z/2)^m / m!.

    The scaled recurrence y_{m+1} = m/(m+1) y_m - z^2/(4 m (m+1)) y_{m-1}
    is the forward Y recurrence rewritten for the scaled sequence.
    """
    out = np.empty((nmax + 1,) + z.shape, dtype=complex)
    out[0] = sp.yv(0, z)
    if nmax >= 1:
        out[1] = sp.yv(1, z) * z / 2.0
    zz = z * z / 4.0
    for m in range(1, nmax):
        out[m + 1] = (m / (m + 1.0)) * out[m] - zz / (m * (m + 1.0)) * out[m - 1]
    return out


def _route_power_scaled(n, z):
    """Hatted values relative to (z/2)^n / n!, valid for n >= 1 and |z| small versus n."""
    lb = n * np.log(z / 2.0) - ln_factorial(n)
    lb1 = (n - 1) * np.log(z / 2.0) - ln_factorial(n - 1)
    jh = _series_j_hat(n, z)
    jh1 = _series_j_hat(n - 1, z)
    nmax = int(n.max()) if n.size else 0
    table = _y_hat_table(z, nmax)
    flat_idx = np.arange(z.size)
    y_n = table.reshape(nmax + 1, -1)[n.ravel(), flat_idx].reshape(z.shape)
    y_n1 = table.reshape(nmax + 1, -1)[(n - 1).ravel(), flat_idx].reshape(z.shape)
    with np.errstate(all="ignore"):
        hh = np.exp(2 * lb) * jh + 1j * y_n
        hh1 = np.exp(2 * lb1) * jh1 + 1j * y_n1
        nz = n / z
        jph = nz * (2.0 * jh1 - jh)
        hph = z / (2.0 * n) * hh1 - nz * hh
    return (jh, jph, hh, hph), lb


def conditioned_quad(n, z, arg_class=None) -> ConditionedQuad:
    """Range-conditioned J, J', H, H' with their alpha/beta scales.

    Parameters
    ----------
    n : int or array of int
        Non-negative order(s).
    z : complex or array
        Nonzero argument(s); broadcast against ``n``.
    arg_class : optional
        Expected class; when given it must agree with :func:`classify`.

    Returns
    -------
    ConditionedQuad
        Scales follow the class: ``(z/2)^n/n!`` for Small, ``exp(Im z)`` for
        Large, and the magnitude clamp ``P`` for Moderate (``P = |J_n|`` when
        ``1/|J_n| >= 1e100``, else 1).
    """
    n, z = _as_arrays(n, z)
    shape = z.shape
    n = n.ravel()
    z = z.ravel()
    if np.any(n < 0):
        raise ValueError("conditioned_quad takes non-negative orders; fold negative ones")
    if np.any(z == 0):
        raise ValueError("conditioned_quad requires z != 0")
    cls = classify(n, z)
    if arg_class is not None and np.any(cls != np.broadcast_to(arg_class, shape).ravel()):
        raise ValueError("arg_class does not match classify(n, z)")

    vals_a, base_a, ok = _route_exp_scaled(n, z)
    use_b = (~ok | (cls == ArgumentClass.SMALL)) & (n >= 1)

    jh, jph, hh, hph = (v.copy() for v in vals_a)
    base = base_a.copy()
    if np.any(use_b):
        vals_b, base_b = _route_power_scaled(n[use_b], z[use_b])
        for dst, src in zip((jh, jph, hh, hph), vals_b):
            dst[use_b] = src
        base[use_b] = base_b

    target = np.zeros(z.shape, dtype=complex)
    small = cls == ArgumentClass.SMALL
    large = cls == ArgumentClass.LARGE
    moderate = cls == ArgumentClass.MODERATE
    target[small] = n[small] * np.log(z[small] / 2.0) - ln_factorial(n[small])
    target[large] = z[large].imag
    with np.errstate(divide="ignore"):
        log_abs_j = base.real + np.log(np.abs(jh))
    clamp = moderate & np.isfinite(log_abs_j) & (log_abs_j <= -_LOG_MAGNITUDE_THRESHOLD)
    target[clamp] = log_abs_j[clamp]

    with np.errstate(over="ignore", invalid="ignore"):
        fj = np.exp(base - target)
        fh = np.exp(target - base)
        out = (jh * fj, jph * fj, hh * fh, hph * fh)
    if not all(np.all(np.isfinite(v)) for v in out):
        raise FloatingPointError("nonfinite conditioned value; argument misclassified")
    out = [v.reshape(shape) for v in out]
    beta = LogScale.from_log(target.reshape(shape))
    return ConditionedQuad(*out, arg_class=cls.reshape(shape),
                           alpha=beta.reciprocal(), beta=beta)


# ---------------------------------------------------------------------------
# Large-argument asymptotic forms
# ---------------------------------------------------------------------------

def _hankel_series(n, w, max_terms=60):
    """Asymptotic sum 1 + (mu-1)/(8w) + (mu-1)(mu-9)/(2!(8w)^2) + ... with optimal truncation."""
    mu = 4.0 * n * n
    total = complex(1.0)
    term = complex(1.0)
    prev = math.inf
    for k in range(1, max_terms):
        term = term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * w)
        size = abs(term)
        if size > prev:
            break
        total += term
        if size < 1e-16 * abs(total):
            break
        prev = size
    return total


def _pq(n, z, max_terms=60):
    """Phase and quadrature polynomials P, Q of the Hankel expansion."""
    mu = 4.0 * n * n
    p = complex(0.0)
    q = complex(0.0)
    term = complex(1.0)
    prev = math.inf
    for k in range(0, max_terms):
        if k > 0:
            term = term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * z)
        size = abs(term)
        if size > prev:
            break
        sign = (-1) ** (k // 2)
        if k % 2 == 0:
            p += sign * term
        else:
            q += sign * term
        if k > 0 and size < 1e-16 * abs(p):
            break
        prev = size
    return p, q


def _large_j_h(n, z):
    # H_n(z) = (2/pi)(-i)^(n+1) K_n(-i z); K_n(w) ~ sqrt(pi/(2w)) e^{-w} S(w)
    w = -1j * z
    h_hat = (2 / np.pi) * (-1j) ** (n + 1) * np.sqrt(np.pi / (2 * w)) \
        * np.exp(1j * z.real) * _hankel_series(n, w)
    chi_re = z.real - n * np.pi / 2 - np.pi / 4
    p, q = _pq(n, z)
    j_hat = 0.5 * np.sqrt(2 / (np.pi * z)) * np.exp(-1j * chi_re) * (p - 1j * q)
    return j_hat, h_hat


def asymptotic_large_quad(n: int, z: complex) -> ConditionedQuad:
    """Large-argument hatted values from the Hankel asymptotic expansion.

    Accurate when ``Im z >= 30`` and ``4 n^2`` is small compared with ``|z|``;
    high orders should use :func:`conditioned_quad`, which relies on the
    uniformly valid scaled routines.
    """
    n = int(n)
    z = complex(z)
    j0, h0 = _large_j_h(n, z)
    j1, h1 = _large_j_h(abs(n - 1), z)
    if n == 0:
        # B_{-1} = -B_1
        j1, h1 = -j1, -h1
    beta = LogScale.from_log(z.imag)
    return ConditionedQuad(
        j_hat=j0,
        jp_hat=j1 - n / z * j0,
        h_hat=h0,
        hp_hat=h1 - n / z * h0,
        arg_class=int(classify(n, z)),
        alpha=beta.reciprocal(),
        beta=beta,
    )
