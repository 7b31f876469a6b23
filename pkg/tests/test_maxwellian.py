import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate
from scipy.special import erf

from apdg.errors import ConfigurationError, DomainError
from apdg.maxwellian import (assumption_report, build_root_maxwellian, discrete_temperature,
                             discrete_velocity, exact_derivative_sq, exact_mass_sq, gamma_edges,
                             h1_error_bound, interpolation_errors, l2_error_bound, root_maxwellian,
                             root_maxwellian_derivative, symmetric_velocity_mesh, velocity_vh_mass)
from apdg.mesh import Mesh1D
from oracles import quad_cells

thetas = st.sampled_from([0.5, 1.0, 2.0])
n_even = st.sampled_from([8, 12, 16, 24, 32, 48])


def build(theta, n, Lf=6.0):
    return build_root_maxwellian(symmetric_velocity_mesh(Lf * math.sqrt(theta), n), theta)


def admissible(theta, n, Lf=6.0):
    h = 2 * Lf * math.sqrt(theta) / n
    return h * h <= 4 / math.sqrt(3) * theta


# ---------------------------------------------------------------------------
# construction and structural residuals
# ---------------------------------------------------------------------------

@given(thetas, n_even)
def test_structural_residuals(theta, n):
    if not admissible(theta, n):
        return
    M = build(theta, n)
    rep = assumption_report(M)
    assert abs(rep.residual_mass) < 1e-12
    assert abs(rep.residual_symmetry) < 1e-12
    assert abs(rep.residual_momentum) < 1e-12
    assert rep.energy_defect_expected


@given(thetas, n_even)
def test_mass_by_adaptive_quadrature(theta, n):
    if not admissible(theta, n):
        return
    M = build(theta, n)
    val = quad_cells(lambda v: float(M(v)) ** 2, M.mesh.nodes)
    assert val == pytest.approx(1.0, abs=1e-12)


@given(thetas, n_even)
def test_evenness_and_oddness(theta, n):
    if not admissible(theta, n):
        return
    M = build(theta, n)
    assert np.array_equal(M.values, M.values[::-1])
    v = np.linspace(0.01, M.L - 0.01, 53)
    vp = discrete_velocity(M, v, side="right")
    vm = discrete_velocity(M, -v, side="left")  # mirror cell of the right-hand cell
    # cellwise: v_h M is one constant per cell, mirrored exactly
    w = M.vh_times_m
    assert np.max(np.abs(w + w[::-1])) <= 1e-14 * np.max(np.abs(w))
    # pointwise: near +-L, M is tiny and its evaluation loses a few digits
    assert np.all(np.abs(vp + vm) <= 1e-13 * np.maximum(1, np.abs(vp)))
    # one-sided values at the node v = 0
    right = discrete_velocity(M, 0.0, side="right")
    left = discrete_velocity(M, 0.0, side="left")
    assert float(right) == pytest.approx(-float(left), abs=1e-14)


def test_build_is_bit_identical():
    a, b = build(1.0, 24), build(1.0, 24)
    assert np.array_equal(a.values, b.values)
    assert a.theta_h == b.theta_h


def test_positive_values():
    assert np.all(build(1.0, 16).values > 0)


@pytest.mark.parametrize("L, n, theta, word", [
    (0.5, 4, 1.0, "L >= sqrt"),
    (6.0, 4, 1.0, "h_v^2"),
    (6.0, 8, -1.0, "positive"),
])
def test_preconditions_named(L, n, theta, word):
    with pytest.raises(ConfigurationError, match=word.replace("^", r"\^")):
        build_root_maxwellian(symmetric_velocity_mesh(L, n), theta)


def test_asymmetric_mesh_rejected():
    with pytest.raises(ConfigurationError, match="symmetric"):
        build_root_maxwellian(Mesh1D(-5.0, 6.0, 22), 1.0)


def test_domain_error():
    M = build(1.0, 24)
    with pytest.raises(DomainError):
        M(7.0)
    with pytest.raises(DomainError):
        discrete_velocity(M, -6.5)


# ---------------------------------------------------------------------------
# temperature and velocity
# ---------------------------------------------------------------------------

def test_theta_h_converges_first_order():
    hs, errs = [], []
    for n in (24, 48, 96):
        M = build(1.0, n)
        assert discrete_temperature(M) == M.theta_h
        hs.append(M.h)
        errs.append(abs(M.theta_h - 1.0))
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order >= 0.9


def test_energy_defect_halves():
    d = [abs(assumption_report(build(1.0, n)).residual_energy) for n in (24, 48, 96, 192)]
    assert np.polyfit(np.log([1, .5, .25, .125]), np.log(d), 1)[0] >= 0.9


def test_homogeneity_of_temperature():
    M = build(1.0, 24)
    h = M.h
    for c in (0.5, 3.0):
        vals = c * M.values
        slopes = np.diff(vals) / h
        theta_c = 0.25 / (np.sum(slopes ** 2) * h)
        a, b = vals[:-1], vals[1:]
        mass_c = np.sum(h / 3 * (a * a + a * b + b * b))
        assert theta_c == pytest.approx(M.theta_h / c ** 2, rel=1e-13)
        assert mass_c == pytest.approx(c ** 2, rel=1e-13)
        assert theta_c * mass_c == pytest.approx(M.theta_h, rel=1e-13)


def test_vh_moments():
    """(v_h M, M) = 0 and (v_h M, v_h M) = 4 theta^2 (M', M') = theta^2 / theta_h."""
    M = build(1.0, 24)
    f1 = quad_cells(lambda v: float(discrete_velocity(M, v) * M(v) ** 2), M.mesh.nodes)
    f2 = quad_cells(lambda v: float((discrete_velocity(M, v) * M(v)) ** 2), M.mesh.nodes)
    assert abs(f1) < 1e-13
    assert f2 == pytest.approx(M.theta ** 2 / M.theta_h, rel=1e-12)
    assert f2 == pytest.approx(4 * M.theta ** 2 * np.sum(M.slopes ** 2) * M.h, rel=1e-12)


def test_vh_m_is_piecewise_constant():
    M = build(2.0, 32)
    v = M.mesh.nodes[:-1] + 0.37 * M.h
    assert np.allclose(discrete_velocity(M, v) * M(v), M.vh_times_m, rtol=1e-13, atol=0)


@pytest.mark.parametrize("kind, weight", [
    ("vh", lambda x: x), ("abs", np.abs),
    ("pos", lambda x: np.maximum(x, 0)), ("neg", lambda x: np.maximum(-x, 0))])
def test_velocity_mass_against_adaptive_quadrature(kind, weight):
    M = build(1.0, 8, Lf=3.0)
    W = velocity_vh_mass(M, 1, kind).toarray()
    nodes = M.mesh.nodes
    for c in range(M.mesh.n_cells):
        a, b = nodes[c], nodes[c + 1]
        phis = (lambda v: (b - v) / (b - a), lambda v: (v - a) / (b - a))
        for i in range(2):
            for j in range(2):
                ref = integrate.quad(lambda v: weight(float(discrete_velocity(M, v, "right" if v < b else "left")))
                                     * phis[i](v) * phis[j](v), a, b, epsabs=1e-15, epsrel=1e-13)[0]
                assert W[2 * c + i, 2 * c + j] == pytest.approx(ref, rel=1e-12, abs=1e-14)


# ---------------------------------------------------------------------------
# flux coefficients
# ---------------------------------------------------------------------------

@given(thetas, n_even)
def test_gamma_positive_and_symmetric(theta, n):
    if not admissible(theta, n):
        return
    g = gamma_edges(build(theta, n))
    assert g.gamma_star > 0
    assert g.gamma_B_plus == pytest.approx(g.gamma_B_minus, rel=1e-14)
    assert g.gamma_I == pytest.approx(g.gamma_B_plus, rel=1e-14)


def test_gamma_against_quadrature():
    M = build(1.0, 48)
    g = gamma_edges(M)
    ref_I = quad_cells(lambda v: 0.5 * abs(float(discrete_velocity(M, v))) * float(M(v)) ** 2, M.mesh.nodes)
    ref_p = quad_cells(lambda v: max(float(discrete_velocity(M, v)), 0.0) * float(M(v)) ** 2, M.mesh.nodes)
    assert g.gamma_I == pytest.approx(ref_I, rel=1e-12)
    assert g.gamma_B_plus == pytest.approx(ref_p, rel=1e-12)


def test_gamma_independent_of_x_context():
    """The flux coefficients are functions of the velocity mesh alone."""
    from apdg.kinetic import ProblemData, assemble, make_phase_space
    M = build(1.0, 16, Lf=4.0)
    vals = set()
    for n_x in (2, 4, 8):
        sp_ = make_phase_space((0.0, 1.0), n_x, 1, M.L, 16)
        ops = assemble(sp_, M, ProblemData(), 1, 0.1)
        vals.add((ops.gamma.gamma_I, ops.gamma.gamma_B_plus, ops.gamma.gamma_B_minus))
    assert len(vals) == 1


# ---------------------------------------------------------------------------
# interpolation error bounds
# ---------------------------------------------------------------------------

def test_exact_norms_against_quadrature():
    for theta in (0.5, 1.0, 2.0):
        L = 3 * math.sqrt(theta)
        m = integrate.quad(lambda v: root_maxwellian(v, theta) ** 2, -L, L, epsabs=1e-15)[0]
        d = integrate.quad(lambda v: root_maxwellian_derivative(v, theta) ** 2, -L, L, epsabs=1e-15)[0]
        assert exact_mass_sq(theta, L) == pytest.approx(m, rel=1e-13)
        assert exact_derivative_sq(theta, L) == pytest.approx(d, rel=1e-12)


def test_unnormalized_mass_residual():
    """Without normalization the mass residual is the erf factor minus one plus interpolation error."""
    theta, L, n = 1.0, 6.0, 96
    mesh = symmetric_velocity_mesh(L, n)
    raw = root_maxwellian(mesh.nodes, theta)
    a, b = raw[:-1], raw[1:]
    mass = np.sum(mesh.h / 3 * (a * a + a * b + b * b))
    exact = erf(L / math.sqrt(2 * theta))
    # interpolation error in the squared norm is O(h^2)
    assert abs((mass - 1) - (exact - 1)) < mesh.h ** 2


@pytest.mark.parametrize("theta", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("hf", [0.5, 0.25, 0.125])
def test_errors_below_closed_form_bounds(theta, hf):
    L = 6 * math.sqrt(theta)
    n = int(round(2 * L / (hf * math.sqrt(theta))))
    M = build_root_maxwellian(symmetric_velocity_mesh(L, n), theta)
    e0, e1 = interpolation_errors(M)
    assert e0 <= l2_error_bound(theta, L, M.h)
    assert e1 <= h1_error_bound(theta, L, M.h)
    # independent quadrature of the same distances
    r0 = math.sqrt(quad_cells(lambda v: (root_maxwellian(v, theta) - float(M(v))) ** 2, M.mesh.nodes))
    assert e0 == pytest.approx(r0, rel=1e-8)


def test_interpolation_orders():
    hs, e0s, e1s = [], [], []
    for n in (24, 48, 96):
        M = build(1.0, n)
        e0, e1 = interpolation_errors(M)
        hs.append(M.h)
        e0s.append(e0)
        e1s.append(e1)
    assert np.polyfit(np.log(hs), np.log(e0s), 1)[0] >= 1.8
    assert np.polyfit(np.log(hs), np.log(e1s), 1)[0] >= 0.9
