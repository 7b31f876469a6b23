"""Tensor-product DG discretization of the weighted linear kinetic equation.

Unknown: ``g(x, v)`` in ``V_x (x) V_v`` (broken spaces).  Internal coefficient
ordering is the Kronecker ordering ``(x dof, v dof)``; every operator is a
sum of Kronecker products of one-dimensional x and v matrices because the
data ``omega`` and ``E`` depend on ``x`` (and ``t``) only.

The scheme, for all test functions ``z``::

    eps (g_t, z) + A(g, z) + B(g, z) + D(g, z) - Q(g, z)/eps = C(g, z) + R(z)

with ``A`` the upwind (``beta=0``) or eps-scaled Lax-Friedrichs (``beta=1``)
transport in x, ``B`` upwind transport in v, ``D`` the weak velocity boundary
condition ``g = M rho``, ``Q`` the relaxation collision operator and ``C``
the ``E v_h g / (2 theta)`` source.  ``R`` carries inflow data and is zero
unless inflow values are configured.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, SolverError
from .maxwellian import DiscreteMaxwellian, GammaCoefficients, gamma_edges, velocity_vh_mass
from .mesh import DGSpace, Mesh1D, SpatialField, l2_project

log = logging.getLogger(__name__)

PRESET_KINDS = ("constant", "linear", "sinusoid")


@dataclass(frozen=True)
class FieldPreset:
    """Named scalar profile on the unit-normalized interval ``xh in [0, 1]``.

    * ``constant``: ``c0``
    * ``linear``:   ``c0 + c1 xh``
    * ``sinusoid``: ``c0 + c1 sin(m pi xh)``

    multiplied by ``cos(2 pi f t)`` with ``f = time_frequency``.
    """

    kind: str = "constant"
    c0: float = 0.0
    c1: float = 0.0
    m: float = 1.0
    time_frequency: float = 0.0

    def __post_init__(self):
        if self.kind not in PRESET_KINDS:
            raise ConfigurationError(f"preset kind must be one of {PRESET_KINDS}, got {self.kind!r}")
        for name in ("c0", "c1", "m", "time_frequency"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"preset parameter {name} must be finite")

    def shape(self, xh, deriv: int = 0) -> np.ndarray:
        xh = np.asarray(xh, dtype=float)
        if self.kind == "constant":
            return np.full_like(xh, self.c0 if deriv == 0 else 0.0)
        if self.kind == "linear":
            if deriv == 0:
                return self.c0 + self.c1 * xh
            return np.full_like(xh, self.c1 if deriv == 1 else 0.0)
        k = self.m * np.pi
        if deriv == 0:
            return self.c0 + self.c1 * np.sin(k * xh)
        # d^n/dx^n sin(kx) = k^n sin(kx + n pi/2)
        return self.c1 * k ** deriv * np.sin(k * xh + deriv * np.pi / 2)

    def time_factor(self, t: float) -> float:
        if self.time_frequency == 0.0:
            return 1.0
        return math.cos(2.0 * math.pi * self.time_frequency * t)

    @property
    def time_dependent(self) -> bool:
        return self.time_frequency != 0.0

    @property
    def is_zero(self) -> bool:
        return self.c0 == 0.0 and (self.kind == "constant" or self.c1 == 0.0)


@dataclass(frozen=True)
class ProblemData:
    """Physical data on ``domain``: collision frequency, field, initial density."""

    theta: float = 1.0
    omega: FieldPreset = FieldPreset("constant", 1.0)
    E: FieldPreset = FieldPreset("constant", 0.0)
    rho0: FieldPreset = FieldPreset("sinusoid", 0.0, 1.0, 1.0)
    domain: Tuple[float, float] = (0.0, 1.0)
    inflow: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.theta > 0:
            raise ConfigurationError(f"theta must be positive, got {self.theta}")
        a, b = self.domain
        if not b > a:
            raise ConfigurationError(f"domain must satisfy a < b, got {self.domain}")
        if self.omega.time_dependent:
            raise ConfigurationError("omega must not depend on time")
        if self.omega_min <= 0:
            raise ConfigurationError(f"omega must be positive, sampled minimum {self.omega_min}")

    # coordinates
    def xhat(self, x):
        a, b = self.domain
        return (np.asarray(x, dtype=float) - a) / (b - a)

    @property
    def length(self) -> float:
        return self.domain[1] - self.domain[0]

    def omega_at(self, x) -> np.ndarray:
        return self.omega.shape(self.xhat(x))

    def E_at(self, x, t: float = 0.0) -> np.ndarray:
        return self.E.time_factor(t) * self.E.shape(self.xhat(x))

    def rho0_at(self, x) -> np.ndarray:
        return self.rho0.shape(self.xhat(x))

    @cached_property
    def _samples(self) -> np.ndarray:
        return np.linspace(self.domain[0], self.domain[1], 4097)

    @cached_property
    def omega_min(self) -> float:
        return float(np.min(self.omega_at(self._samples)))

    def omega_min_on(self, space: DGSpace) -> float:
        """Minimum of omega over dense samples and the quadrature points of ``space``."""
        q = space.quadrature(space.degree + 6).points
        return float(min(self.omega_min, np.min(self.omega_at(q))))

    @cached_property
    def E_sup(self) -> float:
        """Sup over x of |E| (the time factor is bounded by one)."""
        return float(np.max(np.abs(self.E.shape(self.xhat(self._samples)))))

    @property
    def time_dependent(self) -> bool:
        return self.E.time_dependent

    @property
    def has_inflow(self) -> bool:
        return any(v != 0.0 for v in self.inflow)


@dataclass(frozen=True, eq=False)
class PhaseSpace:
    """``V_x (x) V_v`` with broken factors."""

    x: DGSpace
    v: DGSpace

    def __post_init__(self):
        if self.x.continuity != "broken" or self.v.continuity != "broken":
            raise ConfigurationError("phase-space factors must be broken spaces")
        if self.v.degree < 1:
            raise ConfigurationError("velocity degree must be >= 1")

    @property
    def n_x(self) -> int:
        return self.x.dof_count

    @property
    def n_v(self) -> int:
        return self.v.dof_count

    @property
    def dof_count(self) -> int:
        return self.n_x * self.n_v

    @cached_property
    def spec_permutation(self) -> np.ndarray:
        """Internal index for each position of the (x-cell, v-cell, x-node, v-node) ordering."""
        nxc, kx1 = self.x.mesh.n_cells, self.x.n_local
        nvc, kv1 = self.v.mesh.n_cells, self.v.n_local
        cx, cv, lx, lv = np.meshgrid(np.arange(nxc), np.arange(nvc), np.arange(kx1),
                                     np.arange(kv1), indexing="ij")
        return ((cx * kx1 + lx) * self.n_v + cv * kv1 + lv).ravel()


def make_phase_space(domain: Tuple[float, float], n_x: int, k_x: int, L: float, n_v: int,
                     k_v: int = 1) -> PhaseSpace:
    return PhaseSpace(DGSpace(Mesh1D(domain[0], domain[1], n_x), k_x),
                      DGSpace(Mesh1D(-L, L, n_v), k_v))


@dataclass(frozen=True)
class StabilityConstants:
    omega_min: float
    E_sup: float
    vh_sup: float
    C_T: float
    C1: float
    C2: float
    C3: float
    eps_threshold: float


def velocity_trace_constant(space_v: DGSpace) -> float:
    """``C_T`` with ``|z(-L)|^2 + |z(L)|^2 <= C_T / h_v |z|^2`` on the velocity space."""
    lam = sla.eigh(space_v.boundary_form.toarray(), space_v.mass().toarray(), eigvals_only=True)
    return float(space_v.mesh.h * lam[-1])


def stability_constants(data: ProblemData, M: DiscreteMaxwellian, spaces: PhaseSpace) -> StabilityConstants:
    """Constants of the energy estimate and the threshold ``eps_{h_v}``."""
    omega_min = data.omega_min_on(spaces.x)
    h = M.mesh.h
    m_min = np.minimum(M.values[:-1], M.values[1:])
    vh_sup = float(np.max(np.abs(M.vh_times_m) / m_min))
    C_T = velocity_trace_constant(spaces.v)
    E_sup = data.E_sup
    C1 = E_sup * vh_sup / (2.0 * data.theta)
    C2 = C_T * E_sup
    C3 = 1.5 * E_sup / data.theta
    denom = 4.0 * C1 * h + 2.0 * C2
    eps_thr = math.inf if denom == 0 else omega_min * h / denom
    return StabilityConstants(omega_min, E_sup, vh_sup, C_T, C1, C2, C3, eps_thr)


@dataclass(frozen=True, eq=False)
class VelocityMatrices:
    """One-dimensional velocity matrices for a Maxwellian and degree."""

    Mv: sp.csr_matrix
    Mv_vh: sp.csr_matrix
    Mv_abs: sp.csr_matrix
    Mv_pos: sp.csr_matrix
    Mv_neg: sp.csr_matrix
    Gv: sp.csr_matrix          # (psi_j', psi_i)
    upwind_avg: sp.csr_matrix  # Jv^T Av
    upwind_jump: sp.csr_matrix  # Jv^T Jv
    m_coef: np.ndarray          # nodal coefficients of M
    vhm_coef: np.ndarray        # nodal coefficients of v_h M
    m_mom: np.ndarray           # (M, psi_j)
    vhm_mom: np.ndarray         # (v_h M, psi_j)
    dm_mom: np.ndarray          # (M', psi_j)
    bd: np.ndarray              # M(L) psi_j(L) - M(-L) psi_j(-L)


def velocity_matrices(M: DiscreteMaxwellian, space_v: DGSpace) -> VelocityMatrices:
    k = space_v.degree
    Mv = space_v.mass()
    m_coef = M.broken_coefficients(k)
    vhm_coef = M.vh_m_coefficients(k)
    # (M', psi_j): M' is piecewise constant, integrate psi_j exactly
    ones_int = np.asarray(Mv.sum(axis=0)).ravel()
    dm_mom = np.repeat(M.slopes, k + 1) * ones_int
    bd = (M.values[-1] * space_v.trace_right.toarray().ravel()
          - M.values[0] * space_v.trace_left.toarray().ravel())
    return VelocityMatrices(
        Mv=Mv,
        Mv_vh=velocity_vh_mass(M, k, "vh"),
        Mv_abs=velocity_vh_mass(M, k, "abs"),
        Mv_pos=velocity_vh_mass(M, k, "pos"),
        Mv_neg=velocity_vh_mass(M, k, "neg"),
        Gv=space_v.gradient,
        upwind_avg=(space_v.jump.T @ space_v.average).tocsr(),
        upwind_jump=space_v.jump_form,
        m_coef=m_coef,
        vhm_coef=vhm_coef,
        m_mom=Mv @ m_coef,
        vhm_mom=Mv @ vhm_coef,
        dm_mom=dm_mom,
        bd=bd,
    )


def _kron(a, b) -> sp.csr_matrix:
    return sp.kron(sp.csr_matrix(a), sp.csr_matrix(b), format="csr")


@dataclass(frozen=True, eq=False)
class AssembledOperators:
    """Sparse matrices of every form, for fixed ``eps``, ``beta`` and time ``t``.

    Matrices act on coefficient vectors; entry ``[i, j]`` is the form with
    trial function ``j`` and test function ``i``.
    """

    spaces: PhaseSpace
    maxwellian: DiscreteMaxwellian
    data: ProblemData
    beta: int
    epsilon: float
    t: float
    Mass: sp.csr_matrix
    A: sp.csr_matrix
    B: sp.csr_matrix
    D: sp.csr_matrix
    Q: sp.csr_matrix
    C: sp.csr_matrix
    R: np.ndarray
    P_rho: sp.csr_matrix
    P_J: sp.csr_matrix
    gamma: GammaCoefficients
    constants: StabilityConstants
    vel: VelocityMatrices = field(repr=False)
    parts: Dict[str, sp.csr_matrix] = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def theta(self) -> float:
        return self.data.theta

    @property
    def theta_h(self) -> float:
        return self.maxwellian.theta_h

    @property
    def time_dependent(self) -> bool:
        return self.data.time_dependent

    @cached_property
    def snapshot(self) -> dict:
        x = self.spaces.x.quadrature().points
        return {
            "omega": self.data.omega_at(x),
            "E": self.data.E_at(x, self.t),
            "theta": self.theta,
            "theta_h": self.theta_h,
            "gamma_I": self.gamma.gamma_I,
            "gamma_B_plus": self.gamma.gamma_B_plus,
            "gamma_B_minus": self.gamma.gamma_B_minus,
        }

    @cached_property
    def operator(self) -> sp.csr_matrix:
        """``A + B + D - C - Q / eps`` (everything except the time derivative)."""
        return (self.A + self.B + self.D - self.C - self.Q / self.epsilon).tocsr()

    def at_time(self, t: float) -> "AssembledOperators":
        """Operators with the field evaluated at time ``t``."""
        if not self.time_dependent or t == self.t:
            return self
        f = self.data.E.time_factor(t)
        p = self.parts
        return replace(self, t=t,
                       B=(f * p["B_signed"] + abs(f) * p["B_abs"]).tocsr(),
                       D=(f * p["D_unit"]).tocsr(),
                       C=(f * p["C_unit"]).tocsr(),
                       _cache={})

    def equilibrium(self, rho: np.ndarray) -> np.ndarray:
        """Coefficients of ``M rho`` for x-coefficients ``rho``."""
        return np.kron(rho, self.vel.m_coef)

    def isotropic_test(self) -> sp.csr_matrix:
        """Columns: coefficients of ``M phi_i`` for every x basis function."""
        return _kron(sp.identity(self.spaces.n_x), self.vel.m_coef[:, None])

    def current_test(self) -> sp.csr_matrix:
        """Columns: coefficients of ``v_h M phi_i``."""
        return _kron(sp.identity(self.spaces.n_x), self.vel.vhm_coef[:, None])


def assemble(spaces: PhaseSpace, M: DiscreteMaxwellian, data: ProblemData, beta: int,
             epsilon: float, t: float = 0.0) -> AssembledOperators:
    """Assemble every form of the scheme on ``spaces``."""
    if beta not in (0, 1):
        raise ConfigurationError(f"beta must be 0 or 1, got {beta}")
    if not (epsilon > 0 and math.isfinite(epsilon)):
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    if spaces.v.mesh != M.mesh:
        raise ConfigurationError("velocity space and Maxwellian live on different meshes")
    if tuple(data.domain) != (spaces.x.mesh.a, spaces.x.mesh.b):
        raise ConfigurationError("x space does not match the data domain")
    X = spaces.x
    vel = velocity_matrices(M, spaces.v)
    Mx = X.mass()
    G = X.gradient
    J, Av = X.jump, X.average
    TL, TR = X.trace_left, X.trace_right
    Mx_omega = X.mass(data.omega_at)
    Mx_E = X.mass(lambda x: data.E.shape(data.xhat(x)))
    Mx_absE = X.abs_mass(lambda x: data.E.shape(data.xhat(x)))
    tf = data.E.time_factor(t)

    A_vol = -_kron(G.T, vel.Mv_vh)
    A_avg = _kron(J.T @ Av, vel.Mv_vh)
    A_pen = _kron(J.T @ J, 0.5 * vel.Mv_abs)
    A_out = _kron(TR.T @ TR, vel.Mv_pos) + _kron(TL.T @ TL, vel.Mv_neg)
    A_in = _kron(TR.T @ TR, vel.Mv_neg) + _kron(TL.T @ TL, vel.Mv_pos)
    A = (A_vol + A_avg + epsilon ** beta * A_pen + A_out).tocsr()

    B_signed = _kron(Mx_E, -vel.Gv.T + vel.upwind_avg)
    B_abs = _kron(Mx_absE, 0.5 * vel.upwind_jump)
    D_unit = _kron(Mx_E, np.outer(vel.bd, vel.m_mom))
    C_unit = _kron(Mx_E, vel.Mv_vh) / (2.0 * data.theta)
    Q = _kron(Mx_omega, np.outer(vel.m_mom, vel.m_mom) - vel.Mv.toarray())

    R = np.zeros(spaces.dof_count)
    if data.has_inflow:
        m_a, m_b = data.inflow
        R = (m_a * np.kron(TL.toarray().ravel(), vel.Mv_pos @ vel.m_coef)
             + m_b * np.kron(TR.toarray().ravel(), vel.Mv_neg @ vel.m_coef))

    Ix = sp.identity(spaces.n_x, format="csr")
    parts = {
        "A_vol": A_vol, "A_avg": A_avg, "A_pen": A_pen, "A_out": A_out, "A_in": A_in,
        "B_signed": B_signed, "B_abs": B_abs, "D_unit": D_unit, "C_unit": C_unit,
        "Mx": Mx, "Mx_omega": Mx_omega, "Mx_E": Mx_E, "Mx_absE": Mx_absE,
        "A_bd_sym": _kron(TR.T @ TR + TL.T @ TL, 0.5 * vel.Mv_abs),
        "v_jump": _kron(Mx_absE, 0.5 * vel.upwind_jump),
    }
    return AssembledOperators(
        spaces=spaces, maxwellian=M, data=data, beta=beta, epsilon=float(epsilon), t=float(t),
        Mass=_kron(Mx, vel.Mv),
        A=A,
        B=(tf * B_signed + abs(tf) * B_abs).tocsr(),
        D=(tf * D_unit).tocsr(),
        Q=Q,
        C=(tf * C_unit).tocsr(),
        R=R,
        P_rho=_kron(Ix, vel.m_mom[None, :]),
        P_J=_kron(Ix, vel.vhm_mom[None, :]) / epsilon,
        gamma=gamma_edges(M),
        constants=stability_constants(data, M, spaces),
        vel=vel,
        parts=parts,
    )


# ---------------------------------------------------------------------------
# States, stepping and moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KineticState:
    g: np.ndarray
    epsilon: float
    beta: int
    t: float = 0.0

    def __post_init__(self):
        g = np.array(self.g, dtype=float).ravel()
        g.setflags(write=False)
        object.__setattr__(self, "g", g)


def initial_state(data: ProblemData, M: DiscreteMaxwellian, spaces: PhaseSpace,
                  epsilon: float = 1.0, beta: int = 1) -> KineticState:
    """Well-prepared state ``rho_0h M`` with ``rho_0h`` the L2 projection of ``rho0``."""
    rho0h = l2_project(data.rho0_at, spaces.x)
    g0 = np.kron(rho0h.coefficients, M.broken_coefficients(spaces.v.degree))
    return KineticState(g0, epsilon, beta, 0.0)


def _solve(K: sp.csr_matrix, rhs: np.ndarray, cache: dict, key, tol: float = 1e-11) -> np.ndarray:
    """Sparse LU solve (factor cached under ``key``) with a backward-error check.

    The relative residual is measured normwise, ``|r| / (|K| |x| + |b|)``, so
    stiff 1/eps blocks that cancel inside ``K x`` do not inflate it.
    """
    lu = cache.get(key)
    if lu is None:
        lu = spla.splu(K.tocsc())
        cache[key] = lu
    x = lu.solve(rhs)
    knorm = spla.norm(K, 1)

    def rel(x):
        r = rhs - K @ x
        return r, np.linalg.norm(r, 1) / max(knorm * np.linalg.norm(x, 1) + np.linalg.norm(rhs, 1), 1e-300)

    r, err = rel(x)
    for _ in range(2):
        if err <= tol:
            break
        x = x + lu.solve(r)
        r, err = rel(x)
    if err > tol:
        inv = spla.LinearOperator(K.shape, matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="T"))
        cond = spla.onenormest(K) * spla.onenormest(inv)
        raise SolverError(f"relative residual {err:.3e} above {tol:.0e}", condition_estimate=cond)
    return x


def step(state: KineticState, ops: AssembledOperators, dt: float) -> KineticState:
    """One backward Euler step; the field is taken at the new time level."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if state.epsilon != ops.epsilon or state.beta != ops.beta:
        raise ConfigurationError("state and operators disagree on epsilon or beta")
    t_new = state.t + dt
    op_t = ops.at_time(t_new) if ops.time_dependent else ops
    key = (float(dt), float(t_new) if ops.time_dependent else None)
    K = (ops.epsilon / dt) * ops.Mass + op_t.operator
    rhs = (ops.epsilon / dt) * (ops.Mass @ state.g) + ops.R
    cache = ops._cache if not ops.time_dependent else {}
    g_new = _solve(K.tocsr(), rhs, cache, key)
    return KineticState(g_new, state.epsilon, state.beta, t_new)


def run(state: KineticState, ops: AssembledOperators, dt: float, n_steps: int) -> List[KineticState]:
    """History ``[state, ..., state after n_steps]``."""
    hist = [state]
    for _ in range(n_steps):
        hist.append(step(hist[-1], ops, dt))
    return hist


def moments(state: KineticState, ops: AssembledOperators, J_form: str = "direct"):
    """Density and current as fields of the x space.

    ``J_form="direct"`` uses ``(v_h M, g)/eps``; ``"defect"`` uses
    ``-(2 theta/eps) (M', g - M rho)``.  The two agree up to roundoff.
    """
    X = ops.spaces.x
    rho = ops.P_rho @ state.g
    if J_form == "direct":
        J = ops.P_J @ state.g
    elif J_form == "defect":
        gt = state.g - ops.equilibrium(rho)
        n_x, n_v = ops.spaces.n_x, ops.spaces.n_v
        J = -(2.0 * ops.theta / ops.epsilon) * (gt.reshape(n_x, n_v) @ ops.vel.dm_mom)
    else:
        raise ConfigurationError(f"unknown J_form {J_form!r}")
    return SpatialField(X, rho), SpatialField(X, J)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyReport:
    epsilon: float
    beta: int
    T: float
    dt: float
    g0_sq: float
    gT_sq: float
    relaxation: float
    x_jump: float
    outflow: float
    lhs: float
    rhs: float
    tolerance: float
    C3: float
    eps_threshold: float
    asserted: bool
    holds: bool
    monotone: bool


def _qf(A, x) -> float:
    return float(x @ (A @ x))


def energy_diagnostics(history: Sequence[KineticState], ops: AssembledOperators,
                       tol_factor: float = 10.0) -> EnergyReport:
    """Terms of the space-time energy estimate evaluated along a run.

    Time integrals are right-endpoint sums, matching backward Euler.  The
    bound is asserted only when ``eps <= eps_{h_v}``; otherwise a warning is
    logged and ``asserted`` is False.
    """
    if len(history) < 2:
        raise ConfigurationError("need at least two states")
    eps, beta = ops.epsilon, ops.beta
    cst = ops.constants
    Mass = ops.Mass
    p = ops.parts
    g0 = history[0].g
    g0_sq = _qf(Mass, g0)
    relax = jump = out = 0.0
    energies = [g0_sq]
    for prev, cur in zip(history[:-1], history[1:]):
        dt = cur.t - prev.t
        g = cur.g
        gt = g - ops.equilibrium(ops.P_rho @ g)
        relax += dt * _qf(Mass, gt)
        jump += dt * _qf(p["A_pen"], g) * 2.0  # <|v_h| [[g]], [[g]]>
        out += dt * _qf(p["A_bd_sym"], g) * 2.0  # <|v_h| g, g> on the x boundary
        energies.append(_qf(Mass, g))
    T = history[-1].t - history[0].t
    dt = T / (len(history) - 1)
    gT_sq = energies[-1]
    lhs = (gT_sq + cst.omega_min / (2 * eps ** 2) * relax
           + eps ** (beta - 1) * jump + out / eps)
    rhs = g0_sq * math.exp(cst.C3 ** 2 * T / cst.omega_min)
    tol = tol_factor * dt
    asserted = eps <= cst.eps_threshold
    if not asserted:
        log.warning("eps=%g exceeds eps_hv=%g; energy bound not asserted", eps, cst.eps_threshold)
    monotone = bool(np.all(np.diff(energies) <= 1e-13 * max(g0_sq, 1e-300)))
    vals = (lhs, rhs)
    if not all(math.isfinite(v) for v in vals):
        raise SolverError("non-finite energy diagnostic")
    return EnergyReport(eps, beta, T, dt, g0_sq, gT_sq, relax, jump, out, lhs, rhs, tol,
                        cst.C3, cst.eps_threshold, asserted, lhs <= rhs * (1 + tol), monotone)


@dataclass(frozen=True)
class EvolutionReport:
    mode: str
    dt: float
    density_residual: float
    density_scale: float
    current_residual: float
    current_scale: float
    theta_norms: Dict[str, float]

    @property
    def density_relative(self) -> float:
        return self.density_residual / max(self.density_scale, 1e-300)

    @property
    def current_relative(self) -> float:
        return self.current_residual / max(self.current_scale, 1e-300)


def evolution_terms(g_prev: np.ndarray, g_next: np.ndarray, ops: AssembledOperators, dt: float,
                    mode: str = "implicit") -> Dict[str, Dict[str, np.ndarray]]:
    """Each term of the density and current evolution identities as functionals.

    ``mode="implicit"`` evaluates the spatial terms at the new level (the
    identities then hold to roundoff for backward Euler data); ``"lagged"``
    evaluates them at the old level, leaving an O(dt) time-discretization
    residual.  Returned vectors are indexed by the x basis functions.
    """
    if mode not in ("implicit", "lagged"):
        raise ConfigurationError(f"mode must be 'implicit' or 'lagged', got {mode!r}")
    eps, beta = ops.epsilon, ops.beta
    X = ops.spaces.x
    p = ops.parts
    gam = ops.gamma
    g = g_next if mode == "implicit" else g_prev
    rho = ops.P_rho @ g
    J = ops.P_J @ g
    gt = g - ops.equilibrium(rho)
    rho_new, rho_old = ops.P_rho @ g_next, ops.P_rho @ g_prev
    J_new, J_old = ops.P_J @ g_next, ops.P_J @ g_prev
    Zm = ops.isotropic_test()
    Zv = ops.current_test()
    Mx = p["Mx"]
    Jmp, Avg = X.jump, X.average
    TL, TR = X.trace_left, X.trace_right

    dens = {
        "time": Mx @ (rho_new - rho_old) / dt,
        "current": (-X.gradient.T + Jmp.T @ Avg) @ J,
        "jump": eps ** (beta - 1) * gam.gamma_I * (Jmp.T @ (Jmp @ rho)),
        "boundary": (gam.gamma_B_plus * (TR.T @ (TR @ rho))
                     + gam.gamma_B_minus * (TL.T @ (TL @ rho))) / eps,
        "theta1": eps ** beta * (-(Zm.T @ (p["A_pen"] @ gt)) / eps),
        "theta2": -(Zm.T @ (p["A_out"] @ gt)) / eps,
        "inflow": (Zm.T @ ops.R) / eps,
    }
    c_vv = float(ops.vel.vhm_coef @ ops.vel.vhm_mom)  # (v_h M, v_h M)
    A_full = ops.A
    theta3 = (Zv.T @ ((-A_full - ops.B + ops.C) @ gt)) / eps
    Mrho = ops.equilibrium(rho)
    cur = {
        "time": eps ** 2 * (Mx @ (J_new - J_old)) / dt,
        "collision": p["Mx_omega"] @ J,
        "diffusion": c_vv * ((X.gradient - Avg.T @ Jmp) @ rho),
        "drift": -(c_vv / ops.theta) * (ops.data.E.time_factor(ops.t) * (p["Mx_E"] @ rho)),
        "theta3": eps * theta3,
        "theta4": -eps ** beta * (Zv.T @ (p["A_pen"] @ Mrho)),
        "theta5": -(Zv.T @ (p["A_in"] @ Mrho)),
        "inflow": Zv.T @ ops.R,
    }
    return {"density": dens, "current": cur}


_RHS_TERMS = ("theta1", "theta2", "inflow", "theta3", "theta4", "theta5")


def evolution_residuals(prev: KineticState, nxt: KineticState, ops: AssembledOperators,
                        dt: Optional[float] = None, mode: str = "implicit") -> EvolutionReport:
    """Residual norms of the density and current evolution identities.

    The field is evaluated at the level where the spatial terms are taken.
    """
    if dt is None:
        dt = nxt.t - prev.t
    t_eval = nxt.t if mode == "implicit" else prev.t
    if ops.time_dependent:
        ops = ops.at_time(t_eval)
    g_prev, g_next = prev.g, nxt.g
    terms = evolution_terms(g_prev, g_next, ops, dt, mode)
    out = {}
    for name, tdict in terms.items():
        res = sum((-v if k in _RHS_TERMS else v) for k, v in tdict.items())
        scale = max(np.linalg.norm(v) for v in tdict.values())
        out[name] = (float(np.linalg.norm(res)), float(scale))
    thetas = {f"{grp}.{k}": float(np.linalg.norm(v)) for grp, td in terms.items()
              for k, v in td.items() if k.startswith("theta")}
    return EvolutionReport(mode, dt, out["density"][0], out["density"][1],
                           out["current"][0], out["current"][1], thetas)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(state: KineticState, spaces: PhaseSpace, path) -> None:
    """CSV checkpoint: ``#`` header lines, then one row per coefficient.

    Rows follow the ordering x-cell, v-cell, x-node, v-node.
    """
    X, V = spaces.x, spaces.v
    header = {
        "n_x": X.mesh.n_cells, "k_x": X.degree, "x_a": repr(X.mesh.a), "x_b": repr(X.mesh.b),
        "n_v": V.mesh.n_cells, "k_v": V.degree, "L": repr(V.mesh.b),
        "epsilon": repr(state.epsilon), "beta": state.beta, "t": repr(state.t),
    }
    perm = spaces.spec_permutation
    nxc, kx1 = X.mesh.n_cells, X.n_local
    nvc, kv1 = V.mesh.n_cells, V.n_local
    cx, cv, lx, lv = (a.ravel() for a in np.meshgrid(np.arange(nxc), np.arange(nvc), np.arange(kx1),
                                                     np.arange(kv1), indexing="ij"))
    with open(path, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k}={v}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x_cell", "v_cell", "x_node", "v_node", "coefficient"])
        for i, idx in enumerate(perm):
            wr.writerow([cx[i], cv[i], lx[i], lv[i], repr(float(state.g[idx]))])


def read_checkpoint(path):
    """Inverse of :func:`write_checkpoint`; returns ``(state, spaces)``."""
    meta = {}
    with open(path) as fh:
        text = fh.read()
    lines = text.splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            k, v = ln[1:].strip().split("=", 1)
            meta[k] = v
        else:
            body.append(ln)
    rows = list(csv.reader(io.StringIO("\n".join(body))))[1:]
    spaces = make_phase_space((float(meta["x_a"]), float(meta["x_b"])), int(meta["n_x"]),
                              int(meta["k_x"]), float(meta["L"]), int(meta["n_v"]), int(meta["k_v"]))
    g = np.empty(spaces.dof_count)
    g[spaces.spec_permutation] = [float(r[4]) for r in rows]
    state = KineticState(g, float(meta["epsilon"]), int(meta["beta"]), float(meta["t"]))
    return state, spaces
