"""Discrete drift-diffusion system obtained as the small-eps limit of the kinetic scheme.

Unknowns: density ``rho`` in the continuous zero-trace space (``beta=0``) or
the broken zero-trace space (``beta=1``), and current ``J`` in the broken
space ``V_x``.  For all test functions ``q`` and ``tau``::

    (rho_t, q) - (J, q') + <{{J}}, [[q]]> + <gamma_I [[rho]], [[q]]> = (f, q)
    (omega J, tau) + a ((rho', tau) - <[[rho]], {{tau}}>) - c (E rho, tau) = 0

with ``(a, c) = (theta, 1)`` or ``(theta_h, 1)``, or
``(theta^2/theta_h, theta/theta_h)`` (``theta_use="kinetic_limit"``), the
exact limit of the kinetic scheme when the discrete velocity is built with
``theta`` but the Maxwellian has discrete temperature ``theta_h``.  For
``beta=0`` every edge term vanishes because ``rho`` is continuous.

``J`` is eliminated cellwise through the inverse of the (block-diagonal)
omega-weighted mass matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, UnsupportedError
from .kinetic import ProblemData, _solve
from .maxwellian import DiscreteMaxwellian, gamma_edges
from .mesh import (DGSpace, SpatialField, _block_diagonal, _rhs_from_target, l2_project,
                   zero_trace_space)

THETA_USES = ("theta", "theta_h", "kinetic_limit")


def _block_inverse(A: sp.csr_matrix, nl: int) -> sp.csr_matrix:
    """Inverse of a block-diagonal matrix with ``nl x nl`` blocks."""
    n = A.shape[0]
    dense = A.toarray()
    blocks = np.stack([dense[i:i + nl, i:i + nl] for i in range(0, n, nl)])
    inv = np.linalg.inv(blocks)
    return _block_diagonal(inv)


def dd_coefficients(M: DiscreteMaxwellian, theta_use: str):
    """``(diffusion coefficient, drift coefficient)`` for the chosen temperature."""
    th, thh = M.theta, M.theta_h
    if theta_use == "theta":
        return th, 1.0
    if theta_use == "theta_h":
        return thh, 1.0
    if theta_use == "kinetic_limit":
        return th * th / thh, th / thh
    raise ConfigurationError(f"theta_use must be one of {THETA_USES}, got {theta_use!r}")


@dataclass(frozen=True, eq=False)
class DDOperators:
    space_x: DGSpace
    rho_space: DGSpace
    data: ProblemData
    beta: int
    theta_use: str
    diffusion: float
    drift: float
    gamma_I: float
    t: float
    mass: sp.csr_matrix          # gram of the rho space
    K_diff: sp.csr_matrix        # reduced operator without the field
    K_drift: sp.csr_matrix       # reduced field operator (unit time factor)
    J_diff: sp.csr_matrix        # rho coefficients -> J broken coefficients
    J_drift: sp.csr_matrix
    block: dict = field(repr=False)
    forcing: Optional[Callable] = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def time_factor(self) -> float:
        return self.data.E.time_factor(self.t)

    @cached_property
    def K(self) -> sp.csr_matrix:
        return (self.K_diff + self.time_factor * self.K_drift).tocsr()

    @cached_property
    def J_map(self) -> sp.csr_matrix:
        return (self.J_diff + self.time_factor * self.J_drift).tocsr()

    def at_time(self, t: float) -> "DDOperators":
        if not self.data.time_dependent or t == self.t:
            return self
        return replace(self, t=t, _cache={})

    def with_forcing(self, forcing: Optional[Callable]) -> "DDOperators":
        return replace(self, forcing=forcing, _cache={})

    def load(self, t: float) -> np.ndarray:
        if self.forcing is None:
            return np.zeros(self.rho_space.dof_count)
        b = _rhs_from_target(lambda x: self.forcing(x, t), self.rho_space, self.space_x.degree + 8)
        return self.rho_space.embedding.T @ b


def assemble_dd(space_x: DGSpace, M: DiscreteMaxwellian, data: ProblemData, beta: int,
                theta_use: str = "theta_h", t: float = 0.0,
                forcing: Optional[Callable] = None) -> DDOperators:
    """Assemble the limit system on the broken x space ``space_x``."""
    if beta not in (0, 1):
        raise ConfigurationError(f"beta must be 0 or 1, got {beta}")
    if space_x.continuity != "broken":
        raise ConfigurationError("space_x must be the broken x space")
    if beta == 0 and space_x.degree == 0:
        raise UnsupportedError("k_x = 0 with beta = 0 locks (no continuous subspace)")
    if M is None:
        raise ConfigurationError("a Maxwellian is needed for the flux coefficients")
    a_coef, c_coef = dd_coefficients(M, theta_use)
    gamma_I = gamma_edges(M).gamma_I
    rho_space = zero_trace_space(space_x, beta)
    E = rho_space.embedding
    X = space_x
    G, Jmp, Avg = X.gradient, X.jump, X.average
    Mx_omega = X.mass(data.omega_at)
    Mx_E = X.mass(lambda x: data.E.shape(data.xhat(x)))
    Winv = _block_inverse(Mx_omega, X.n_local)
    grad_rho = (G - Avg.T @ Jmp) @ E                    # (rho', tau) - <[[rho]], {{tau}}>
    div_J = E.T @ (-G.T + Jmp.T @ Avg)                  # -(J, q') + <{{J}}, [[q]]>
    J_diff = -(a_coef * (Winv @ grad_rho))
    J_drift = c_coef * (Winv @ (Mx_E @ E))
    K_diff = div_J @ J_diff + gamma_I * (E.T @ (Jmp.T @ Jmp) @ E)
    K_drift = div_J @ J_drift
    block = {"div_J": div_J.tocsr(), "grad_rho": (a_coef * grad_rho).tocsr(),
             "drift": (c_coef * (Mx_E @ E)).tocsr(), "Mx_omega": Mx_omega,
             "penalty": (gamma_I * (E.T @ (Jmp.T @ Jmp) @ E)).tocsr()}
    return DDOperators(space_x=X, rho_space=rho_space, data=data, beta=beta, theta_use=theta_use,
                       diffusion=a_coef, drift=c_coef, gamma_I=gamma_I, t=float(t),
                       mass=rho_space.gram, K_diff=K_diff.tocsr(), K_drift=K_drift.tocsr(),
                       J_diff=J_diff.tocsr(), J_drift=J_drift.tocsr(), block=block,
                       forcing=forcing)


@dataclass(frozen=True, eq=False)
class DDState:
    rho: SpatialField
    J: SpatialField
    t: float = 0.0


def initial_dd_state(ops: DDOperators, rho0) -> DDState:
    """Project ``rho0`` (callable or field) onto the density space; J from the constitutive law."""
    rho = l2_project(rho0, ops.rho_space)
    op0 = ops.at_time(0.0)
    return DDState(rho, SpatialField(ops.space_x, op0.J_map @ rho.coefficients), 0.0)


def step_dd(state: DDState, ops: DDOperators, dt: float) -> DDState:
    """Backward Euler step for the density; J reconstructed at the new level."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    t_new = state.t + dt
    op = ops.at_time(t_new)
    A = (op.mass / dt + op.K).tocsr()
    rhs = op.mass @ state.rho.coefficients / dt + op.load(t_new)
    key = (float(dt), float(t_new) if ops.data.time_dependent else None)
    cache = ops._cache if not ops.data.time_dependent else {}
    rho = _solve(A, rhs, cache, key)
    return DDState(SpatialField(ops.rho_space, rho), SpatialField(ops.space_x, op.J_map @ rho), t_new)


def step_dd_block(state: DDState, ops: DDOperators, dt: float) -> DDState:
    """Same step solving the coupled (rho, J) system without eliminating J."""
    t_new = state.t + dt
    op = ops.at_time(t_new)
    b = op.block
    tf = op.time_factor
    top = sp.hstack([op.mass / dt + b["penalty"], b["div_J"]])
    bot = sp.hstack([b["grad_rho"] - tf * b["drift"], b["Mx_omega"]])
    A = sp.vstack([top, bot]).tocsc()
    rhs = np.concatenate([op.mass @ state.rho.coefficients / dt + op.load(t_new),
                          np.zeros(ops.space_x.dof_count)])
    sol = spla.splu(A).solve(rhs)
    n = ops.rho_space.dof_count
    return DDState(SpatialField(ops.rho_space, sol[:n]), SpatialField(ops.space_x, sol[n:]), t_new)


def run_dd(state: DDState, ops: DDOperators, dt: float, n_steps: int) -> List[DDState]:
    hist = [state]
    for _ in range(n_steps):
        hist.append(step_dd(hist[-1], ops, dt))
    return hist


@dataclass(frozen=True)
class DDEnergyReport:
    lhs: float
    rhs: float
    rhs_linear_exponent: float
    tolerance: float
    holds: bool
    holds_linear_exponent: bool


def dd_energy_report(history: Sequence[DDState], ops: DDOperators, tol_factor: float = 10.0) -> DDEnergyReport:
    """Energy bound of the limit system along a run (unforced runs only).

    At each level ``n``: ``|rho^n|^2 + (omega_min/a) sum dt |J|^2`` against
    ``exp(c^2 |E|^2 t_n / (a omega_min)) |rho^0|^2``, the exponent given by
    Young's inequality.  The variant with ``|E|`` in place of ``|E|^2`` is
    reported alongside (``rhs_linear_exponent``).
    """
    if ops.forcing is not None:
        raise ConfigurationError("energy bound applies to unforced runs")
    Mb = ops.space_x.mass()
    wmin = ops.data.omega_min_on(ops.space_x)
    a, c, Es = ops.diffusion, ops.drift, ops.data.E_sup
    r0 = history[0].rho.broken_coefficients
    r0_sq = float(r0 @ (Mb @ r0))
    acc = 0.0
    worst = -math.inf
    worst_lin = -math.inf
    lhs_T = rhs_T = rhs_lin_T = 0.0
    for prev, cur in zip(history[:-1], history[1:]):
        dt = cur.t - prev.t
        Jc = cur.J.coefficients
        acc += dt * float(Jc @ (Mb @ Jc))
        rc = cur.rho.broken_coefficients
        lhs = float(rc @ (Mb @ rc)) + wmin / a * acc
        rhs = math.exp(c * c * Es * Es * cur.t / (a * wmin)) * r0_sq
        rhs_lin = math.exp(Es * cur.t / (a * wmin)) * r0_sq
        worst = max(worst, lhs - rhs)
        worst_lin = max(worst_lin, lhs - rhs_lin)
        lhs_T, rhs_T, rhs_lin_T = lhs, rhs, rhs_lin
    dt = (history[-1].t - history[0].t) / (len(history) - 1)
    tol = tol_factor * dt
    return DDEnergyReport(lhs_T, rhs_T, rhs_lin_T, tol,
                          worst <= tol * rhs_T, worst_lin <= tol * rhs_lin_T)


# ---------------------------------------------------------------------------
# Manufactured solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedSolution:
    """``rho = exp(-lam t) s(xh)`` with ``s = sin(m pi xh)`` or ``xh (1 - xh)``.

    ``J = (-a rho' + c E rho) / omega`` and the forcing ``f = rho_t + J'``
    make the pair an exact solution of the continuous limit equation.
    """

    data: ProblemData
    lam: float = 0.0
    m: int = 1
    profile: str = "sine"
    diffusion: float = 1.0
    drift: float = 1.0

    def __post_init__(self):
        if self.profile not in ("sine", "parabola"):
            raise ConfigurationError(f"profile must be 'sine' or 'parabola', got {self.profile!r}")

    def _s(self, x, d: int = 0):
        xh = self.data.xhat(x)
        ell = self.data.length
        if self.profile == "sine":
            k = self.m * np.pi
            return k ** d * np.sin(k * xh + d * np.pi / 2) / ell ** d
        if d == 0:
            return xh * (1.0 - xh)
        if d == 1:
            return (1.0 - 2.0 * xh) / ell
        return np.full_like(np.asarray(xh, dtype=float), -2.0 / ell ** 2)

    def _field(self, x, t, d: int = 0):
        return self.data.E.time_factor(t) * self.data.E.shape(self.data.xhat(x), d) / self.data.length ** d

    def rho(self, x, t):
        return math.exp(-self.lam * t) * self._s(x)

    def J(self, x, t):
        e = math.exp(-self.lam * t)
        flux = -self.diffusion * e * self._s(x, 1) + self.drift * self._field(x, t) * e * self._s(x)
        return flux / self.data.omega_at(x)

    def forcing(self, x, t):
        e = math.exp(-self.lam * t)
        s, s1, s2 = self._s(x), self._s(x, 1), self._s(x, 2)
        E, E1 = self._field(x, t), self._field(x, t, 1)
        w = self.data.omega_at(x)
        w1 = self.data.omega.shape(self.data.xhat(x), 1) / self.data.length
        F = e * (-self.diffusion * s1 + self.drift * E * s)
        F1 = e * (-self.diffusion * s2 + self.drift * (E1 * s + E * s1))
        return -self.lam * e * s + (F1 * w - F * w1) / (w * w)


def manufactured_reference(data: ProblemData, lam: float = None, m: int = 1, profile: str = "sine",
                           diffusion: Optional[float] = None, drift: float = 1.0):
    """``(rho_exact, J_exact, forcing)`` callables ``(x, t)``.

    ``lam`` defaults to the decay rate of the heat eigenfunction,
    ``a (m pi / ell)^2 / omega(a)``, so the forcing vanishes for constant
    omega and zero field.
    """
    a = data.theta if diffusion is None else diffusion
    if lam is None:
        lam = 0.0 if profile == "parabola" else a * (m * math.pi / data.length) ** 2 / float(
            data.omega_at(data.domain[0]))
    sol = ManufacturedSolution(data, lam, m, profile, a, drift)
    return sol.rho, sol.J, sol.forcing
