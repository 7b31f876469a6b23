import numpy as np
import pytest
from hypothesis import given, strategies as st

from apdg.errors import BoundaryTraceError, ConfigurationError, UnsupportedError
from apdg.mesh import (DGSpace, Mesh1D, Quadrature, SpatialField, conforming_interpolant,
                       interpolant_constant, jump_average, l2_project, norm_dual, norm_Hh1,
                       poincare_constant, projection_matrix, projection_stability_ratio,
                       trace_inverse_constants, zero_trace_space)
from oracles import HatBasis, dense_l2_projection, dual_norm_by_basis


def broken(n, k=1, a=0.0, b=1.0):
    return DGSpace(Mesh1D(a, b, n), k, "broken")


# ---------------------------------------------------------------------------
# meshes, spaces, quadrature
# ---------------------------------------------------------------------------

@given(st.floats(-5, 5), st.floats(0.1, 10), st.integers(2, 200))
def test_mesh_invariants(a, length, n):
    m = Mesh1D(a, a + length, n)
    assert np.all(np.diff(m.nodes) > 0)
    assert np.allclose(np.diff(m.nodes), m.h, rtol=1e-12, atol=0)
    assert abs(m.h * m.n_cells - (m.b - m.a)) <= 1e-12 * max(1.0, abs(m.b - m.a))


@pytest.mark.parametrize("n", [0, 1])
def test_mesh_needs_interior_edge(n):
    with pytest.raises(ConfigurationError):
        Mesh1D(0.0, 1.0, n)


def test_mesh_rejects_reversed_interval():
    with pytest.raises(ConfigurationError):
        Mesh1D(1.0, 0.0, 4)


@pytest.mark.parametrize("k", [0, 1, 2, 3])
@pytest.mark.parametrize("n", [2, 5, 8])
def test_dof_counts(n, k):
    mesh = Mesh1D(0, 1, n)
    assert DGSpace(mesh, k).dof_count == n * (k + 1)
    if k >= 1:
        assert DGSpace(mesh, k, "continuous").dof_count == n * k + 1
        assert DGSpace(mesh, k, "continuous_zero_trace").dof_count == n * k - 1
    for cont in ("broken", "continuous", "continuous_zero_trace", "broken_zero_trace"):
        if cont.startswith("continuous") and k == 0:
            continue
        if cont == "broken_zero_trace" and k == 0 and n == 2:
            with pytest.raises(ConfigurationError):
                DGSpace(mesh, k, cont)
            continue
        sp_ = DGSpace(mesh, k, cont)
        assert sp_.embedding.shape == (n * (k + 1), sp_.dof_count)


def test_continuous_degree_zero_rejected():
    with pytest.raises(UnsupportedError):
        DGSpace(Mesh1D(0, 1, 4), 0, "continuous")


def test_unknown_continuity_rejected():
    with pytest.raises(ConfigurationError):
        DGSpace(Mesh1D(0, 1, 4), 1, "smooth")


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_default_quadrature_exactness(k, rng):
    """The default rule integrates polynomials of degree 2k+2 exactly on every cell."""
    sp_ = broken(3, k, -1.0, 2.0)
    quad = sp_.quadrature()
    assert quad.order >= 2 * k + 2
    deg = 2 * k + 2
    coef = rng.standard_normal(deg + 1)
    p = np.polynomial.Polynomial(coef)
    exact = p.integ()(2.0) - p.integ()(-1.0)
    assert quad.integrate(p) == pytest.approx(exact, rel=1e-13, abs=1e-13)


def test_quadrature_exact_for():
    q = Quadrature.exact_for(Mesh1D(0, 1, 2), 7)
    assert q.order >= 7


# ---------------------------------------------------------------------------
# jumps and averages
# ---------------------------------------------------------------------------

def test_jump_average_constant():
    sp_ = broken(4, 1)
    u = SpatialField(sp_, np.ones(sp_.dof_count))
    for e in range(1, 4):
        assert jump_average(u, e) == pytest.approx((0.0, 1.0))


def test_jump_average_antisymmetric():
    sp_ = broken(2, 0)
    u = SpatialField(sp_, [1.0, -1.0])
    jmp, avg = jump_average(u, 1)
    assert abs(jmp) == pytest.approx(2.0)
    assert avg == pytest.approx(0.0)


def test_jump_average_boundary_raises():
    sp_ = broken(4, 1)
    with pytest.raises(BoundaryTraceError):
        jump_average(sp_.zero(), 0)
    with pytest.raises(BoundaryTraceError):
        jump_average(sp_.zero(), 4)


@given(st.integers(2, 8), st.integers(0, 3), st.integers(0, 2 ** 32 - 1))
def test_jump_average_matches_traces(n, k, seed):
    sp_ = broken(n, k)
    c = np.random.default_rng(seed).standard_normal(sp_.dof_count)
    u = SpatialField(sp_, c)
    for e in range(1, n):
        x = sp_.mesh.nodes[e]
        left = float(u.evaluate(np.array([x]), side="left")[0])
        right = float(u.evaluate(np.array([x]), side="right")[0])
        jmp, avg = jump_average(u, e)
        assert abs(jmp - (left - right)) <= 1e-14 * max(1, abs(left) + abs(right))
        assert abs(avg - 0.5 * (left + right)) <= 1e-14 * max(1, abs(left) + abs(right))


@given(st.integers(2, 8), st.integers(0, 3), st.integers(0, 2 ** 32 - 1))
def test_continuous_field_has_no_jumps(n, k, seed):
    if k == 0:
        return
    sp_ = DGSpace(Mesh1D(0, 1, n), k, "continuous")
    u = SpatialField(sp_, np.random.default_rng(seed).standard_normal(sp_.dof_count))
    for e in range(1, n):
        assert abs(jump_average(u, e)[0]) < 1e-14


@given(st.integers(2, 8), st.integers(0, 3), st.integers(0, 2 ** 32 - 1))
def test_integration_by_parts(n, k, seed):
    """(q, t') + (q', t) - <{q}, [t]> - <[q], {t}> - <q n, t>_bdry = 0."""
    sp_ = broken(n, k, 0.0, 2.0)
    rng = np.random.default_rng(seed)
    q, t = rng.standard_normal((2, sp_.dof_count))
    G, J, A = sp_.gradient, sp_.jump, sp_.average
    TL, TR = sp_.trace_left, sp_.trace_right
    val = (q @ (G @ t) + t @ (G @ q) - (A @ q) @ (J @ t) - (J @ q) @ (A @ t)
           - (TR @ q)[0] * (TR @ t)[0] + (TL @ q)[0] * (TL @ t)[0])
    scale = np.linalg.norm(q) * np.linalg.norm(t) * (k + 1) ** 2 * n
    assert abs(val) <= 1e-12 * scale


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_projection_reproduces_polynomials(k, rng):
    sp_ = broken(5, k)
    p = np.polynomial.Polynomial(rng.standard_normal(k + 1))
    u = l2_project(p, sp_)
    x = np.linspace(0, 1, 37)
    assert np.max(np.abs(u.evaluate(x) - p(x))) < 1e-12


def test_projection_of_one_onto_zero_trace():
    errs = []
    for n in (8, 16, 32, 64):
        sp_ = DGSpace(Mesh1D(0, 1, n), 1, "continuous_zero_trace")
        u = l2_project(lambda x: np.ones_like(x), sp_)
        assert u.evaluate(np.array([0.0]))[0] == 0.0
        assert u.evaluate(np.array([1.0]), side="left")[0] == 0.0
        q = sp_.broken.quadrature(6)
        errs.append(np.sqrt(q.integrate(lambda x: (u.evaluate(x) - 1.0) ** 2)))
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_projection_matches_dense_oracle():
    sp_ = broken(8, 1)
    f = lambda x: np.sin(np.pi * x)  # noqa: E731
    u = l2_project(f, sp_, n_points=20)
    ref, _ = dense_l2_projection(f, HatBasis(0, 1, 8))
    assert np.max(np.abs(u.coefficients - ref)) < 1e-12
    q = sp_.quadrature(20)
    err = np.sqrt(q.integrate(lambda x: (u.evaluate(x) - f(x)) ** 2))
    xq, wq = HatBasis(0, 1, 8).grid()
    Xb = HatBasis(0, 1, 8)
    uref = sum(ref[i] * Xb.value(i, xq) for i in range(Xb.size))
    err_ref = np.sqrt(np.sum(wq * (uref - f(xq)) ** 2))
    assert abs(err - err_ref) < 1e-12


@pytest.mark.parametrize("cont", ["broken", "continuous", "continuous_zero_trace", "broken_zero_trace"])
def test_projection_residual_orthogonal(cont):
    sp_ = DGSpace(Mesh1D(0, 1, 6), 2, cont)
    f = lambda x: np.exp(x) * np.cos(3 * x)  # noqa: E731
    u = l2_project(f, sp_, n_points=12)
    q = sp_.broken.quadrature(12)
    r, _ = q.reference
    phi = sp_.broken.reference_basis(r)
    resid = np.einsum("cq,qi->ci", q.weights * (f(q.points) - u.evaluate(q.points)), phi).ravel()
    assert np.max(np.abs(sp_.embedding.T @ resid)) < 1e-12


@given(st.integers(2, 8), st.integers(1, 3), st.integers(0, 1), st.integers(0, 2 ** 32 - 1))
def test_projection_idempotent_and_self_adjoint(n, k, beta, seed):
    sp_ = broken(n, k)
    P = projection_matrix(sp_, beta)
    rng = np.random.default_rng(seed)
    q, w = rng.standard_normal((2, sp_.dof_count))
    Mb = sp_.mass().toarray()
    assert np.max(np.abs(P @ (P @ q) - P @ q)) < 1e-12 * max(1, np.abs(q).max())
    assert abs((P @ q) @ Mb @ w - q @ Mb @ (P @ w)) < 1e-12 * np.linalg.norm(q) * np.linalg.norm(w)


# ---------------------------------------------------------------------------
# conforming interpolant
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2])
def test_interpolant_fixed_point(k, rng):
    S0 = DGSpace(Mesh1D(0, 1, 6), k, "continuous_zero_trace")
    u = SpatialField(S0, rng.standard_normal(S0.dof_count))
    out = conforming_interpolant(u.as_broken(), 0)
    assert np.array_equal(out.coefficients, u.coefficients)


def test_interpolant_single_jump():
    n, k, s = 8, 1, 0.75
    sp_ = broken(n, k)
    # continuous zero-trace hat plus a jump of size s at node 4
    S0 = DGSpace(sp_.mesh, 1, "continuous_zero_trace")
    base = SpatialField(S0, np.sin(np.arange(1, n))).broken_coefficients.copy()
    base[2 * 4] += s  # right cell's left value at node 4
    u = SpatialField(sp_, base)
    assert jump_average(u, 4)[0] == pytest.approx(-s)
    out = conforming_interpolant(u, 0)
    x4 = sp_.mesh.nodes[4]
    assert out.evaluate(np.array([x4]))[0] == pytest.approx(base[7] + s / 2)
    lhs = norm_Hh1(u - out.as_broken())
    C = interpolant_constant(sp_, 0)
    h = sp_.mesh.h
    rhs = np.sqrt(C / h * s ** 2)
    assert lhs <= rhs * (1 + 1e-12)
    assert lhs <= np.sqrt(C) * s / np.sqrt(h) * (1 + 1e-12)


@given(st.integers(2, 8), st.integers(0, 3), st.integers(0, 2 ** 32 - 1))
def test_interpolant_beta1_keeps_interior_nodes(n, k, seed):
    sp_ = broken(n, k)
    u = SpatialField(sp_, np.random.default_rng(seed).standard_normal(sp_.dof_count))
    if k == 0 and n == 2:
        return
    out = conforming_interpolant(u, 1).as_broken()
    c, o = u.broken_coefficients, out.broken_coefficients
    if k >= 1:
        assert np.array_equal(c[1:-1], o[1:-1])
        assert o[0] == 0.0 and o[-1] == 0.0
    else:
        assert np.array_equal(c[1:-1], o[1:-1])


def test_interpolant_degree_zero_beta0_unsupported():
    with pytest.raises(UnsupportedError):
        conforming_interpolant(broken(4, 0).zero(), 0)


@pytest.mark.parametrize("beta", [0, 1])
def test_interpolant_constants_bounded(beta):
    cs = [interpolant_constant(broken(n, 1), beta) for n in (8, 16, 32, 64)]
    assert max(cs) / min(cs) < 1.5


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def test_hh1_zero():
    assert norm_Hh1(broken(4, 1).zero()) == 0.0


def test_hh1_continuous_hat_is_gradient_norm():
    S0 = DGSpace(Mesh1D(0, 1, 8), 1, "continuous_zero_trace")
    c = np.zeros(S0.dof_count)
    c[3] = 1.0
    u = SpatialField(S0, c)
    h = 1 / 8
    assert norm_Hh1(u) == pytest.approx(np.sqrt(2 / h), rel=1e-14)
    K = S0.broken.stiffness
    b = u.broken_coefficients
    assert norm_Hh1(u) == pytest.approx(np.sqrt(b @ K @ b), rel=1e-14)


def test_hh1_indicator_on_one_cell():
    sp_ = broken(8, 0)
    c = np.zeros(8)
    c[3] = 1.0
    assert norm_Hh1(SpatialField(sp_, c)) == pytest.approx(np.sqrt(2 / (1 / 8)), rel=1e-14)


def test_hh1_positive_definite(rng):
    sp_ = broken(6, 2)
    for _ in range(20):
        assert norm_Hh1(SpatialField(sp_, rng.standard_normal(sp_.dof_count))) > 0


@pytest.mark.parametrize("beta", [0, 1])
def test_dual_norm_zero(beta):
    assert norm_dual(broken(4, 1).zero(), beta) == 0.0


@pytest.mark.parametrize("beta", [0, 1])
def test_dual_norm_of_orthogonal_field(beta, rng):
    sp_ = broken(6, 1)
    P = projection_matrix(sp_, beta)
    w = rng.standard_normal(sp_.dof_count)
    z = SpatialField(sp_, w - P @ w)
    assert norm_dual(z, beta) < 1e-12 * np.linalg.norm(w)


@pytest.mark.parametrize("beta", [0, 1])
def test_dual_norm_matches_basis_sweep(beta, rng):
    sp_ = broken(4, 1)
    test = zero_trace_space(sp_, beta)
    z = SpatialField(sp_, rng.standard_normal(sp_.dof_count))
    E = test.embedding.toarray()
    load = E.T @ sp_.mass().toarray() @ z.coefficients
    form = sp_.stiffness if beta == 0 else sp_.hh1_form
    gram = E.T @ form.toarray() @ E
    ref = dual_norm_by_basis(load, gram)
    assert abs(norm_dual(z, beta) - ref) <= 1e-10 * max(ref, 1)


def test_dual_norm_empty_test_space():
    with pytest.raises(ConfigurationError):
        norm_dual(broken(2, 0).zero(), 1)


# ---------------------------------------------------------------------------
# projection stability, trace/inverse, Poincare
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("beta", [0, 1])
def test_projection_ratio_one_on_target(beta, rng):
    sp_ = broken(6, 1)
    target = zero_trace_space(sp_, beta)
    q = target.embedding @ rng.standard_normal(target.dof_count)
    P = projection_matrix(sp_, beta)
    H = sp_.hh1_form.toarray()
    assert np.sqrt((P @ q) @ H @ (P @ q) / (q @ H @ q)) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("beta", [0, 1])
def test_projection_ratio_sampled_below_exact(beta):
    sp_ = broken(4, 1)
    exact = projection_stability_ratio(sp_, beta)
    sampled = projection_stability_ratio(sp_, beta, 2000, np.random.default_rng(1), method="sampled")
    assert sampled <= exact * (1 + 1e-12)
    assert sampled >= 0.7 * exact


@pytest.mark.parametrize("beta", [0, 1])
def test_projection_ratio_bounded_under_refinement(beta):
    r = [projection_stability_ratio(broken(n, 1), beta) for n in (8, 16, 32, 64)]
    assert max(r) / min(r) < 2


def test_trace_and_inverse_constants_bounded():
    vals = np.array([trace_inverse_constants(broken(n, 1)) for n in (8, 16, 32, 64, 128)])
    for col in vals.T:
        assert col.max() / col.min() < 1.5


def test_poincare_constant_bounded():
    cs = [poincare_constant(broken(n, 1)) for n in (8, 16, 32, 64)]
    assert max(cs) / min(cs) < 1.5
