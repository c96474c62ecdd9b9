import logging
import math

import numpy as np
import pytest

from cylfield.contour import (
    PathKind,
    PathSpec,
    ProbeNeverDecays,
    build_dsip,
    build_sip,
    choose_path,
    detour_sizes,
    dsip_depth,
    quadrature_nodes,
    track_sheet,
)
from cylfield.integrand import Dipole, spectral_integrand
from cylfield.medium import Layer, LayerStack, branch_points, principal_sqrt, stack_from_resistivities
from cylfield.solver import electric_equivalent

W0 = 2 * math.pi * 36e3
HOMOGENEOUS = stack_from_resistivities([1.0], [])

# two identical 1 ohm-m layers, phi-directed magnetic source at 5 cm, observer at 15 cm
SCENARIO_STACK = stack_from_resistivities([1.0, 1.0], [0.1])
SCENARIO_DIPOLE = Dipole(0.05, 0.0, 0.0, (0, 1, 0), "magnetic")
SCENARIO_RHO = 0.15


def scenario_probe():
    stack, dip = electric_equivalent(SCENARIO_STACK, SCENARIO_DIPOLE)

    def probe(kz):
        return float(np.max(np.abs(spectral_integrand(stack, W0, [kz], 0, dip, [(SCENARIO_RHO, 0.0)]))))

    return stack, probe


def test_detour_sizes():
    d1, d2 = detour_sizes(HOMOGENEOUS, W0)
    assert d1 == pytest.approx(0.0754, abs=5e-5)
    assert d2 == pytest.approx(d1, rel=1e-5)  # k ~ |k|(1+i)/sqrt(2) for a good conductor
    lossless = LayerStack((Layer(eps_r=2.0), Layer(sigma=0.1)), (0.1,))
    d1, d2 = detour_sizes(lossless, 1e7)
    assert d2 == d1


def test_sip_shape():
    p = build_sip(HOMOGENEOUS, W0)
    assert p.kind is PathKind.SIP
    v = np.array(p.vertices)
    assert np.allclose(v, -np.conj(v[::-1]))
    assert v[2].imag == pytest.approx(p.params["delta2"])
    assert p.params["delta3"] == pytest.approx(5 * abs(branch_points(HOMOGENEOUS, W0)[0]))
    assert not p.params["track_sheet"]
    lossless = build_sip(LayerStack((Layer(eps_r=2.0),)), 1e7)
    assert lossless.params["track_sheet"]


@pytest.mark.parametrize("dz, expected", [(1, 50.6568), (0.1, 506.568), (0.01, 5065.68), (0.001, 50656.8)])
def test_dsip_depth(dz, expected):
    # the reference values are -ln(1e-22)/dz cut (not rounded) to six digits
    d4 = dsip_depth(dz)
    digits = 6 - int(math.floor(math.log10(d4))) - 1
    assert math.floor(d4 * 10**digits) / 10**digits == pytest.approx(expected, rel=1e-12)
    assert dsip_depth(-dz) == dsip_depth(dz)


def test_dsip_shape():
    up = build_dsip(HOMOGENEOUS, W0, 0.1)
    down = build_dsip(HOMOGENEOUS, W0, -0.1)
    assert up.kind is PathKind.DSIP_UP and down.kind is PathKind.DSIP_DOWN
    assert up.kind.is_dsip and not PathKind.SIP.is_dsip
    assert up.vertices[0] == complex(-up.params["delta3"], up.params["delta4"])
    assert down.vertices[-1] == complex(down.params["delta3"], -down.params["delta4"])
    k = branch_points(HOMOGENEOUS, W0)[0]
    assert up.params["delta3"] == pytest.approx(2 * k.real)
    with pytest.raises(ValueError):
        build_dsip(HOMOGENEOUS, W0, 0.0)


def test_dsip_relevance_fallback(caplog):
    st = stack_from_resistivities([1e-5], [])
    (k,) = branch_points(st, W0)
    assert k.imag > dsip_depth(1.0)
    with caplog.at_level(logging.WARNING):
        p = build_dsip(st, W0, 1.0)
    assert p.params["delta3"] == pytest.approx(2 * k.real)
    assert "no branch point" in caplog.text


def test_dsip_relevance_filter_excludes_deep_points():
    st = stack_from_resistivities([1e-5, 1.0], [0.1])
    p = build_dsip(st, W0, 1.0)
    k_res = branch_points(stack_from_resistivities([1.0], []), W0)[0]
    assert p.params["delta3"] == pytest.approx(2 * k_res.real)


def test_sip_truncation_on_the_scenario():
    stack, probe = scenario_probe()
    p = build_sip(stack, W0, probe)
    assert 617.6628 / 2 <= p.params["delta3"] <= 617.6628 * 2


def test_path_choice_on_the_scenario():
    stack, probe = scenario_probe()
    assert choose_path(stack, W0, 1.0, probe).kind is PathKind.DSIP_UP
    assert choose_path(stack, W0, -1.0, probe).kind is PathKind.DSIP_DOWN
    assert choose_path(stack, W0, 0.001, probe).kind is PathKind.SIP
    assert choose_path(stack, W0, 0.0, probe).kind is PathKind.SIP


def test_probe_that_never_decays():
    with pytest.raises(ProbeNeverDecays):
        build_sip(HOMOGENEOUS, W0, lambda kz: 1.0, max_doublings=5)
    assert choose_path(HOMOGENEOUS, W0, 0.5, lambda kz: 1.0).kind.is_dsip


def test_quadrature_on_constants_and_weights():
    seg = PathSpec((0j, 1 + 0j), PathKind.SIP)
    q = quadrature_nodes(seg, 32)
    assert np.sum(q.weights) == pytest.approx(1.0, abs=1e-15)
    p = build_dsip(HOMOGENEOUS, W0, 0.3)
    q = quadrature_nodes(p, 500)
    assert len(q.panels_per_segment) == len(p.segments())
    assert min(q.panels_per_segment) >= 1
    assert q.total_points == 16 * sum(q.panels_per_segment)
    assert np.sum(q.weights) == pytest.approx(p.vertices[-1] - p.vertices[0], abs=1e-9)
    with pytest.raises(ValueError):
        quadrature_nodes(p, 16)


def test_quadrature_oscillatory_exponential():
    q = quadrature_nodes(PathSpec((0j, complex(math.pi)), PathKind.SIP), 64)
    val = np.sum(q.weights * np.exp(1j * q.nodes))
    assert abs(val - (np.exp(1j * np.pi) - 1) / 1j) < 1e-12


def test_quadrature_converges_superlinearly():
    path = PathSpec((0j, 1j, 40 + 1j), PathKind.SIP)
    exact = (np.exp(1j * 0.7 * (40 + 1j)) - 1) / (1j * 0.7) / 1.0

    def g(k):
        return np.exp(1j * 0.7 * k)

    errs = []
    for n in (32, 64, 128):
        q = quadrature_nodes(path, n)
        errs.append(abs(np.sum(q.weights * g(q.nodes)) - exact))
    assert errs[1] < errs[0] / 4
    assert errs[2] < max(errs[1] / 4, 1e-13)


@pytest.mark.parametrize("stack, omega", [
    (HOMOGENEOUS, W0),
    (stack_from_resistivities([1e-5, 1.0, 5.0], [0.1, 0.14]), W0),
    (LayerStack((Layer(eps_r=2.0), Layer(eps_r=9.0, sigma=1e-3)), (0.1,)), 1e8),
])
def test_nodes_clear_branch_points(stack, omega):
    pts = np.array(branch_points(stack, omega))
    k_min = abs(pts[0])
    for p in (build_sip(stack, omega), build_dsip(stack, omega, 0.05), build_dsip(stack, omega, -0.05)):
        q = quadrature_nodes(p, 2000)
        dist = np.min(np.abs(q.nodes[:, None] - pts[None, :]))
        assert dist >= 1e-6 * k_min


def test_sheet_tracking_identity_when_lossy():
    st = stack_from_resistivities([1.0, 5.0], [0.1])
    q = quadrature_nodes(build_sip(st, W0), 256)
    k2 = np.array([W0**2 * 4e-7 * np.pi * 1j * W0 / W0 / r for r in (1.0, 5.0)])
    sq = k2[:, None] - q.nodes[None, :] ** 2
    tracked, flipped = track_sheet(sq)
    assert not np.any(flipped)
    assert np.array_equal(tracked, principal_sqrt(sq))
    off, flags = track_sheet(sq, engaged=False)
    assert not np.any(flags)


def test_sheet_tracking_follows_the_continuation():
    # k_rho^2 circles the origin from below the real axis to above it
    theta = np.linspace(-np.pi / 2, np.pi / 2, 101)
    sq = np.exp(1j * theta)[None, :]
    tracked, flipped = track_sheet(sq)
    assert np.max(np.abs(np.diff(tracked[0]))) < 0.02
    assert np.allclose(tracked[0], -np.exp(0.5j * theta))
    assert np.array_equal(flipped[0], theta > 0)
    assert np.allclose(tracked**2, sq)


def test_real_branch_points_split_the_path():
    st = LayerStack((Layer(eps_r=4.0), Layer(eps_r=9.0)), (0.1,))
    w = 1e8
    pts = branch_points(st, w)
    for p in (build_sip(st, w), build_dsip(st, w, 0.2)):
        for k in pts:
            assert complex(k) in p.vertices and complex(-k) in p.vertices
        v = np.array(p.vertices)
        assert np.allclose(v, -np.conj(v[::-1]))


def test_tracking_on_a_lossless_sip():
    st = LayerStack((Layer(eps_r=4.0),))
    w = 1e8
    p = build_sip(st, w)
    q = quadrature_nodes(p, 512)
    k2 = complex(branch_points(st, w)[0]) ** 2
    tracked, flipped = track_sheet(np.array([k2 - q.nodes**2]))
    # off the principal sheet only on the right half of the detour, back on the real axis
    bad = q.nodes[flipped[0]]
    assert bad.size > 0
    assert np.all((bad.real > 0) & (bad.real <= p.params["delta1"]) & (bad.imag > 0))
    assert not np.any(flipped[0][q.nodes.imag == 0])
    # Lipschitz sanity: |dk_rho| <= 2 |dk_z| max|k_z| / min|k_rho| over each step
    t = tracked[0]
    dk = np.abs(np.diff(t))
    dz = np.abs(np.diff(q.nodes))
    lip = np.maximum(np.abs(q.nodes[1:]), np.abs(q.nodes[:-1])) / np.minimum(np.abs(t[1:]), np.abs(t[:-1]))
    assert np.all(dk <= 2 * dz * lip)


def test_dsip_tail_decays():
    stack, _ = scenario_probe()
    dip = electric_equivalent(SCENARIO_STACK, SCENARIO_DIPOLE)[1]
    dz = 0.1
    p = build_dsip(stack, W0, dz)
    q = quadrature_nodes(p, 4000)
    v = spectral_integrand(stack, W0, q.nodes, 10, dip, [(SCENARIO_RHO, 0.0)])[0]
    mag = np.max(np.abs(v), axis=1) * np.abs(np.exp(1j * q.nodes * dz))
    peak = np.max(mag)
    assert mag[0] <= p.params["gamma"] * peak * 10
    assert mag[-1] <= p.params["gamma"] * peak * 10
