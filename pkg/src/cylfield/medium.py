"""Layer stack geometry, constitutive parameters and transverse wavenumbers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.constants import epsilon_0 as EPS0, mu_0 as MU0

INCH = 0.0254


@dataclass(frozen=True)
class Layer:
    eps_r: float = 1.0
    mu_r: float = 1.0
    sigma: float = 0.0
    sigma_m: float = 0.0
    swapped: bool = False  # dual medium: complex eps and mu exchanged

    def __post_init__(self):
        if self.eps_r <= 0 or self.mu_r <= 0:
            raise ValueError("eps_r and mu_r must be positive")
        if self.sigma < 0 or self.sigma_m < 0:
            raise ValueError("conductivities must be non-negative")

    @classmethod
    def from_resistivity(cls, resistivity: float, **kw) -> "Layer":
        return cls(sigma=1.0 / resistivity, **kw)

    def dual(self) -> "Layer":
        return replace(self, swapped=not self.swapped)

    def is_lossless(self) -> bool:
        return self.sigma == 0 and self.sigma_m == 0


@dataclass(frozen=True)
class LayerStack:
    """Concentric layers, innermost first; ``radii[i]`` is the outer radius of layer i."""

    layers: tuple[Layer, ...]
    radii: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "radii", tuple(float(a) for a in self.radii))
        if len(self.layers) < 1:
            raise ValueError("at least one layer is required")
        if len(self.radii) != len(self.layers) - 1:
            raise ValueError("need exactly one radius per interface")
        if any(a <= 0 for a in self.radii):
            raise ValueError("radii must be positive")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError("radii must be strictly increasing")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def dual(self) -> "LayerStack":
        return replace(self, layers=tuple(l.dual() for l in self.layers))

    def is_homogeneous(self) -> bool:
        first = self.layers[0]
        return all(l == first for l in self.layers)

    def layer_of(self, r: float, *, source: bool = False) -> int:
        """Zero-based layer index containing radius r.

        A point exactly on an interface belongs to the inner layer when it is
        a source point and to the outer layer otherwise.
        """
        idx = 0
        for a in self.radii:
            if r > a or (r == a and not source):
                idx += 1
        return idx

    def inner_radius(self, i: int) -> float | None:
        return self.radii[i - 1] if i > 0 else None

    def outer_radius(self, i: int) -> float | None:
        return self.radii[i] if i < len(self.radii) else None


def complex_constitutives(layer: Layer, omega: float) -> tuple[complex, complex]:
    """Complex (eps, mu) in F/m and H/m under the exp(-i omega t) convention."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    eps = EPS0 * layer.eps_r + 1j * layer.sigma / omega
    mu = MU0 * layer.mu_r + 1j * layer.sigma_m / omega
    return (mu, eps) if layer.swapped else (eps, mu)


def wavenumber(layer: Layer, omega: float) -> complex:
    eps, mu = complex_constitutives(layer, omega)
    return principal_sqrt(omega**2 * mu * eps)


def principal_sqrt(x):
    """Square root on the Im >= 0 sheet; purely real results are non-negative."""
    r = np.sqrt(np.asarray(x, dtype=complex))
    flip = (r.imag < 0) | ((r.imag == 0) & (r.real < 0))
    r = np.where(flip, -r, r)
    return r[()] if r.ndim == 0 else r


@dataclass(frozen=True)
class SpectralState:
    k_z: np.ndarray
    k_rho: np.ndarray  # shape (n_layers,) + k_z.shape
    omega: float
    eps: np.ndarray
    mu: np.ndarray
    sheet_flipped: np.ndarray | None = None

    def with_k_rho(self, k_rho, flipped) -> "SpectralState":
        return replace(self, k_rho=k_rho, sheet_flipped=flipped)


def spectral_state(stack: LayerStack, omega: float, k_z) -> SpectralState:
    """Per-layer transverse wavenumbers on the principal (Im >= 0) branch."""
    k_z = np.asarray(k_z, dtype=complex)
    cons = [complex_constitutives(l, omega) for l in stack.layers]
    eps = np.array([c[0] for c in cons])
    mu = np.array([c[1] for c in cons])
    k2 = omega**2 * eps * mu
    k_rho = principal_sqrt(k2.reshape((-1,) + (1,) * k_z.ndim) - k_z**2)
    return SpectralState(k_z=k_z, k_rho=np.asarray(k_rho), omega=omega, eps=eps, mu=mu)


def branch_points(stack: LayerStack, omega: float) -> list[complex]:
    """Distinct layer wavenumbers (upper half plane), sorted by magnitude."""
    pts: list[complex] = []
    for layer in stack.layers:
        k = complex(wavenumber(layer, omega))
        if not any(abs(k - p) <= 1e-12 * abs(p) for p in pts):
            pts.append(k)
    return sorted(pts, key=abs)


def stack_from_resistivities(resistivities: Sequence[float], radii: Sequence[float]) -> LayerStack:
    return LayerStack(tuple(Layer.from_resistivity(r) for r in resistivities), tuple(radii))
