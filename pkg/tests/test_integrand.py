import cmath
import math

import numpy as np
import pytest

from raw_oracle import RawMedium
from cylfield.coefficients import SpectralGrid, generalized_reflection
from cylfield.contour import build_dsip, build_sip, quadrature_nodes
from cylfield.integrand import (
    CaseId,
    Dipole,
    assemble_fn,
    azimuth_sum,
    classify_case,
    closed_form_direct,
    direct_term,
    direct_term_log_magnitude,
    fold_modes,
    source_factor,
    spectral_integrand,
    subtraction_decision,
    transverse_matrices,
)
from cylfield.medium import INCH, Layer, LayerStack, spectral_state, stack_from_resistivities, wavenumber

F0 = 36e3
W0 = 2 * math.pi * F0
K_TABLE = 0.25147 + 0.79122j
RHO_TABLE = 0.1270
S = np.diag([1.0, -1.0])


def _polar(z):
    return abs(z), math.degrees(cmath.phase(z))


# --- geometry -------------------------------------------------------------

def test_classify_case():
    st = stack_from_resistivities([1, 2, 3], [0.1, 0.2])
    assert classify_case(st, 0.15, 0.15) is CaseId.CASE1
    assert classify_case(st, 0.12, 0.15) is CaseId.CASE2
    assert classify_case(st, 0.3, 0.05) is CaseId.CASE3
    assert classify_case(st, 0.05, 0.3) is CaseId.CASE4
    # interface points: observer goes outward, source inward
    assert classify_case(st, 0.1, 0.1) is CaseId.CASE3
    with pytest.raises(ValueError):
        classify_case(st, 0.0, 0.1)


def test_dipole_validation():
    assert Dipole(0.1, 0, 0, (0, 3, 4)).orientation == pytest.approx((0, 0.6, 0.8))
    with pytest.raises(ValueError):
        Dipole(0.1, 0, 0, kind="loop")
    with pytest.raises(ValueError):
        Dipole(0.0, 0, 0)
    with pytest.raises(ValueError):
        Dipole(0.1, 0, 0, (0, 0, 0))


# --- source factor and transverse operators --------------------------------

def test_source_factor_by_orientation():
    st = stack_from_resistivities([2.0], [])
    kz, n, rho_s = 0.7 + 0.2j, 3, 0.11
    state = spectral_state(st, W0, kz)
    k2, eps = state.k_rho[0] ** 2, state.eps[0]
    s = source_factor(Dipole(rho_s, 0, 0, (0, 0, 1)), n, st, W0, kz)
    assert s.d1 == pytest.approx([k2, 0]) and not np.any(s.d2) and not np.any(s.d3)
    s = source_factor(Dipole(rho_s, 0, 0, (0, 1, 0)), n, st, W0, kz)
    assert s.d2 == pytest.approx([-n * kz / rho_s, 0])
    assert s.d3 == pytest.approx([0, 1j * W0 * eps])
    assert not np.any(s.d1)
    s = source_factor(Dipole(rho_s, 0, 0, (1, 0, 0)), n, st, W0, kz)
    assert s.d2 == pytest.approx([0, -n * W0 * eps / rho_s])
    assert s.d3 == pytest.approx([-1j * kz, 0])


def test_transverse_operators():
    st = stack_from_resistivities([2.0], [])
    kz = np.array([0.3 + 0.1j])
    op_rho, op_phi = transverse_matrices(st, W0, kz, 0.2)
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=complex)
    dx = np.array([[[0.5, -1.0], [2.0, 1.5]]], dtype=complex)
    assert np.allclose(op_rho.apply(0, x, dx), 1j * kz[:, None, None] * dx)
    assert np.allclose(op_phi.apply(0, x, dx), op_phi.deriv_coef @ dx)
    # the dual medium maps the rho-operator to -P W P with P the exchange matrix
    d_rho, _ = transverse_matrices(st.dual(), W0, kz, 0.2)
    p = np.array([[0, 1], [1, 0]])
    assert np.allclose(d_rho.order_coef, -p @ op_rho.order_coef @ p)


# --- azimuth folding -------------------------------------------------------

def _brute(blocks, dphi, power, parity):
    total = np.zeros(blocks.shape[1:], dtype=complex)
    for n in range(-blocks.shape[0] + 1, blocks.shape[0]):
        b = blocks[abs(n)] if n >= 0 else parity * S @ blocks[-n] @ S
        total = total + (float(n) ** power) * np.exp(1j * n * dphi) * b
    return total


def test_fold_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_max = int(rng.integers(0, 30))
        blocks = rng.normal(size=(n_max + 1, 2, 2)) + 1j * rng.normal(size=(n_max + 1, 2, 2))
        dphi = rng.uniform(-np.pi, np.pi)
        for power in (0, 1, 2):
            for parity in (1, -1):
                ref = _brute(blocks, dphi, power, parity)
                got = fold_modes(blocks, dphi, power, parity)
                assert np.max(np.abs(got - ref)) <= 1e-13 * max(1.0, np.max(np.abs(ref)))


def test_fold_off_diagonal_pairs_cancel():
    blocks = np.zeros((6, 2, 2), dtype=complex)
    blocks[:, 0, 1] = np.arange(1, 7)
    blocks[:, 1, 0] = 2j
    out = azimuth_sum("z", blocks, 0.0)
    assert np.array_equal(out, blocks[0])


def test_fold_diagonal_pairs_double():
    blocks = np.zeros((4, 2, 2), dtype=complex)
    blocks[:, 0, 0] = [1.0, 2.0, 3.0, 4.0]
    dphi = 0.4
    out = azimuth_sum("z", blocks, dphi)
    ref = 1.0 + sum(2 * math.cos(n * dphi) * blocks[n, 0, 0] for n in range(1, 4))
    assert out[0, 0] == pytest.approx(ref, rel=1e-14)
    # phi blocks flip the diagonal instead
    out = azimuth_sum("phi", blocks, dphi)
    ref = 1.0 + sum(2j * math.sin(n * dphi) * blocks[n, 0, 0] for n in range(1, 4))
    assert out[0, 0] == pytest.approx(ref, rel=1e-14)


# --- direct term -----------------------------------------------------------

@pytest.mark.parametrize("n, ratio, expected", [
    (0, 1, 5.9670), (10, 1, 3.0189), (20, 2, 1.4390e-6), (50, 5, 6.7907e-36),
])
def test_direct_term_magnitudes(n, ratio, expected):
    value = float(np.exp(direct_term_log_magnitude(n, K_TABLE, ratio * RHO_TABLE, RHO_TABLE)[0]))
    assert f"{value:.3e}" == f"{expected:.3e}"  # four significant figures


def test_subtraction_decision():
    assert subtraction_decision(10, K_TABLE, RHO_TABLE, RHO_TABLE)
    assert not subtraction_decision(50, K_TABLE, 5 * RHO_TABLE, RHO_TABLE)


def test_direct_term_rejects_cross_layer_geometry():
    st = stack_from_resistivities([1.0, 2.0], [0.1])
    grid = SpectralGrid(st, spectral_state(st, W0, np.array([0.1 + 0.1j])), np.arange(3))
    with pytest.raises(ValueError):
        direct_term(CaseId.CASE3, grid, 0.2, 0.05)


def test_direct_term_equals_homogeneous_assembly():
    st = stack_from_resistivities([1.0, 1.0], [0.1])
    kz = np.array([0.2 + 0.3j, 1.5 + 0.01j, 10.0])
    grid = SpectralGrid(st, spectral_state(st, W0, kz), np.arange(12))
    gen = generalized_reflection(grid)
    for rho, rs, case in ((0.15, 0.12, CaseId.CASE1), (0.12, 0.15, CaseId.CASE2)):
        full = assemble_fn(case, grid, gen, rho, rs)
        direct = direct_term(case, grid, rho, rs)
        scale = np.max(np.abs(direct.product()))
        assert np.max(np.abs(full.product() - direct.product())) < 1e-12 * scale


def test_small_argument_direct_block():
    # (1,1) entry of the direct kernel tends to -i/(n pi) (rho'/rho)^n
    st = LayerStack((Layer(sigma=1.0),))
    grid = SpectralGrid(st, spectral_state(st, 2 * math.pi * 10.0, np.array([1e-6])), np.arange(5, 9))
    rho, rs = 2e-3, 1e-3
    f = direct_term(CaseId.CASE1, grid, rho, rs).product()[:, 0, 0, 0]
    n = np.arange(5, 9)
    assert np.allclose(f, -1j / (n * np.pi) * (rs / rho) ** n, rtol=1e-4)


# --- conditioned kernel ----------------------------------------------------

def _random_config(rng):
    nl = int(rng.integers(3, 5))
    radii = tuple(0.08 * (k + 1) + rng.uniform(0, 0.02) for k in range(nl - 1))
    layers = tuple(Layer(eps_r=rng.uniform(1, 10), mu_r=rng.uniform(1, 3), sigma=10 ** rng.uniform(-2, 1))
                   for _ in range(nl))
    st = LayerStack(layers, radii)
    w = 2 * math.pi * 10 ** rng.uniform(4, 6)
    kmax = max(abs(wavenumber(l, w)) for l in layers)
    kz = kmax * (rng.uniform(0, 3, 4) + 1j * rng.uniform(0, 0.3, 4))
    edges = np.concatenate([[0.01], radii, [0.5]])
    li, lj = rng.integers(0, nl, 2)
    rho = rng.uniform(edges[li] + 0.003, edges[li + 1] - 0.003)
    rs = rng.uniform(edges[lj] + 0.003, edges[lj + 1] - 0.003)
    return st, w, kz, rho, rs, int(rng.integers(0, 9))


def kernel_mismatch(st, w, kz, rho, rs, n_max):
    """Largest relative difference between conditioned and raw F, dF/drho', dF/drho."""
    grid = SpectralGrid(st, spectral_state(st, w, kz), np.arange(n_max + 1))
    gen = generalized_reflection(grid)
    dec = assemble_fn(classify_case(st, rho, rs), grid, gen, rho, rs)
    raw = RawMedium(st, w, kz[None, :], np.arange(n_max + 1)[:, None])
    worst = 0.0
    pairs = zip((dec.product(), dec.left @ dec.mid @ dec.d_right, dec.d_left @ dec.mid @ dec.right),
                raw.kernel(rho, rs))
    for a, b in pairs:
        err = np.max(np.abs(a - b), axis=(-2, -1)) / np.max(np.abs(b), axis=(-2, -1))
        worst = max(worst, float(np.max(err)))
    return worst


def test_conditioned_kernel_matches_raw():
    rng = np.random.default_rng(11)
    for _ in range(40):
        assert kernel_mismatch(*_random_config(rng)) < 1e-10


def test_case_factor_identity():
    st = stack_from_resistivities([0.5, 2.0, 7.0, 1.0], [0.1, 0.2, 0.3])
    kz = np.array([0.3 + 0.2j, 1.0 + 0.05j, 3.0 + 1j])
    grid = SpectralGrid(st, spectral_state(st, W0, kz), np.arange(15))
    gen = generalized_reflection(grid)
    ra, rb = 0.14, 0.25  # layer 1 and layer 2
    c = assemble_fn(CaseId.CASE3, grid, gen, rb, ra).factors
    d = assemble_fn(CaseId.CASE4, grid, gen, ra, rb).factors
    for dk, ck in (("D1", "C3"), ("D2", "C4"), ("D3", "C1"), ("D4", "C2")):
        assert np.allclose(d[dk], c[ck], rtol=1e-13, atol=0)


def test_case_factors_bounded():
    w = 2 * math.pi * 36e3
    stacks = [stack_from_resistivities(r, [0.0508, 0.1016, 0.15])
              for r in ([1e-8, 1.0, 1e3, 1e-8], [1e3, 1e-5, 1.0, 5.0], [1.0, 1.0, 1e-2, 1e3])]
    geoms = [(0.03, 0.04), (0.04, 0.03), (0.2, 0.07), (0.07, 0.2), (0.12, 0.03), (0.03, 0.12), (0.08, 0.08)]
    for st in stacks:
        nodes = np.concatenate([quadrature_nodes(build_sip(st, w), 256).nodes,
                                quadrature_nodes(build_dsip(st, w, 0.1), 256).nodes])
        grid = SpectralGrid(st, spectral_state(st, w, nodes), np.arange(101))
        gen = generalized_reflection(grid)
        for rho, rs in geoms:
            dec = assemble_fn(classify_case(st, rho, rs), grid, gen, rho, rs)
            for name, v in dec.factors.items():
                assert np.max(np.abs(v)) <= 1 + 1e-12, name


def test_tangential_spectra_continuous_across_interfaces():
    st = stack_from_resistivities([0.2, 3.0, 20.0], [0.1, 0.16])
    kz = np.array([0.05 + 0.05j, 0.4 + 0.02j, 2.0 + 0.5j, 8.0])
    dip = Dipole(0.13, 0.0, 0.0, (0.4, 0.5, 0.7))
    for a in st.radii:
        obs = [(a * (1 - 1e-13), 0.6), (a, 0.6)]
        v = spectral_integrand(st, W0, kz, 20, dip, obs)
        inside, outside = v[0], v[1]
        for col in (0, 1, 4, 5):  # E_z, H_z, E_phi, H_phi
            rel = np.abs(inside[:, col] - outside[:, col]) / np.max(np.abs(outside[:, col]))
            assert np.max(rel) < 1e-6


def test_spectral_integrand_requires_electric_source():
    st = stack_from_resistivities([1.0], [])
    with pytest.raises(ValueError):
        spectral_integrand(st, W0, [0.1], 2, Dipole(0.1, 0, 0, kind="magnetic"), [(0.2, 0.0)])


# --- closed form and integrated fields -------------------------------------

def test_closed_form_reference_values():
    lay = Layer(sigma=1.0)
    obs = (5 * INCH, 0.0, 16 * INCH)
    _, h = closed_form_direct(Dipole(5 * INCH, 0, 0, (0, 1, 0), "magnetic"), obs, lay, W0)
    mag, ph = _polar(h[1])
    assert mag == pytest.approx(4.1884, abs=5e-5) and ph == pytest.approx(-91.0681, abs=5e-5)
    _, h = closed_form_direct(Dipole(5 * INCH, 0, 0, (0, 0, 1), "magnetic"), obs, lay, W0)
    mag, ph = _polar(h[2])
    assert mag == pytest.approx(8.3259, abs=1e-4) and ph == pytest.approx(91.2105, abs=5e-5)


def test_closed_form_reciprocity():
    lay = Layer(eps_r=5.0, sigma=0.3)
    rng = np.random.default_rng(2)
    for _ in range(10):
        p1 = (rng.uniform(0.05, 0.5), rng.uniform(0, 6), rng.uniform(-1, 1))
        p2 = (rng.uniform(0.05, 0.5), rng.uniform(0, 6), rng.uniform(-1, 1))
        a = rng.normal(size=3)
        b = rng.normal(size=3)
        # orientations are cylindrical components at each point
        e12, _ = closed_form_direct(Dipole(*p1, tuple(a)), p2, lay, W0)
        e21, _ = closed_form_direct(Dipole(*p2, tuple(b)), p1, lay, W0)
        lhs = e12 @ (b / np.linalg.norm(b))
        rhs = e21 @ (a / np.linalg.norm(a))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_closed_form_far_field_decay():
    lay = Layer(eps_r=4.0, sigma=1e-5)
    w = 2 * math.pi * 1e8
    k = wavenumber(lay, w)
    dip = Dipole(1.0, 0.0, 0.0, (0, 0, 1))
    r = 200.0
    e1, _ = closed_form_direct(dip, (1.0 + r, 0.0, 0.0), lay, w)
    e2, _ = closed_form_direct(dip, (1.0 + 2 * r, 0.0, 0.0), lay, w)
    ratio = np.linalg.norm(e2) / np.linalg.norm(e1)
    assert ratio == pytest.approx(0.5 * math.exp(-k.imag * r), rel=1e-3)


def test_closed_form_rejects_coincident_points():
    with pytest.raises(ValueError):
        closed_form_direct(Dipole(0.1, 0.2, 0.3), (0.1, 0.2, 0.3), Layer(sigma=1.0), W0)


def _integrate(st, dip, obs, n_max, subtract, path_nodes):
    v = spectral_integrand(st, W0, path_nodes.nodes, n_max, dip, [(obs[0], obs[1] - dip.phi)], [subtract])[0]
    rows = np.sum(v * (path_nodes.weights * np.exp(1j * path_nodes.nodes * (obs[2] - dip.z)))[:, None], axis=0)
    return rows


@pytest.mark.parametrize("orientation", [(0, 0, 1), (0, 1, 0), (1, 0, 0), (0.3, 0.5, 0.8)])
def test_spectral_integral_reproduces_homogeneous_fields(orientation):
    lay = Layer(sigma=1.0)
    st = LayerStack((lay,))
    dip = Dipole(0.1, 0.2, 0.0, orientation)
    obs = (0.2, 0.9, 0.15)
    q = quadrature_nodes(build_dsip(st, W0, obs[2]), 2048)
    rows = _integrate(st, dip, obs, 30, False, q)
    e, h = closed_form_direct(dip, obs, lay, W0)
    ref = np.array([e[2], h[2], e[0], h[0], e[1], h[1]])
    assert np.max(np.abs(rows - ref)) < 1e-6 * np.max(np.abs(ref))


def test_subtraction_consistency():
    st = stack_from_resistivities([0.5, 2.0], [0.1])
    dip = Dipole(0.15, 0.0, 0.0, (0.2, 0.6, 0.3))
    obs = (0.2, 0.3, 0.12)
    q = quadrature_nodes(build_dsip(st, W0, obs[2]), 2048)
    plain = _integrate(st, dip, obs, 40, False, q)
    sub = _integrate(st, dip, obs, 40, True, q)
    e, h = closed_form_direct(dip, obs, st.layers[1], W0)
    sub = sub + np.array([e[2], h[2], e[0], h[0], e[1], h[1]])
    assert np.max(np.abs(sub - plain)) < 1e-6 * np.max(np.abs(plain))
