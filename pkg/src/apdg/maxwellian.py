"""Piecewise-linear discrete root-Maxwellian on a truncated velocity interval.

The root-Maxwellian ``(2 pi theta)^(-1/4) exp(-v^2 / (4 theta))`` is
interpolated at the nodes of a symmetric velocity mesh and rescaled to unit
L2 norm on ``[-L, L]``.  Everything derived from it (discrete temperature,
discrete velocity ``v_h = -2 theta M'/M``, flux coefficients) is computed
cellwise: ``M'`` is piecewise constant, so ``v_h M`` is piecewise constant
and most integrals reduce to finite sums.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Iterable

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.special import erf

from .errors import ConfigurationError, DomainError, InvariantViolation
from .mesh import DGSpace, Mesh1D, _block_diagonal

#: Gauss points per velocity cell for integrands containing ``v_h`` (rational per cell).
VELOCITY_QUADRATURE_POINTS = 32


def root_maxwellian(v, theta: float) -> np.ndarray:
    """Exact root-Maxwellian ``(2 pi theta)^(-1/4) exp(-v^2/(4 theta))``."""
    v = np.asarray(v, dtype=float)
    return (2.0 * np.pi * theta) ** -0.25 * np.exp(-v * v / (4.0 * theta))


def root_maxwellian_derivative(v, theta: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return -v / (2.0 * theta) * root_maxwellian(v, theta)


@dataclass(frozen=True, eq=False)
class DiscreteMaxwellian:
    """Continuous piecewise-linear root-Maxwellian with its derived quantities."""

    mesh: Mesh1D
    values: np.ndarray
    theta: float
    theta_h: float
    mass: float
    momentum_defect: float
    energy_defect: float

    @property
    def L(self) -> float:
        return self.mesh.b

    @property
    def h(self) -> float:
        return self.mesh.h

    @cached_property
    def slopes(self) -> np.ndarray:
        """Cellwise derivative of M (piecewise constant)."""
        return np.diff(self.values) / self.mesh.h

    @cached_property
    def vh_times_m(self) -> np.ndarray:
        """Cellwise constant value of ``v_h M = -2 theta M'``."""
        return -2.0 * self.theta * self.slopes

    def __call__(self, v) -> np.ndarray:
        return self.evaluate(v)

    def evaluate(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        _check_domain(self.mesh, v)
        return np.interp(v, self.mesh.nodes, self.values)

    def cell_values(self, cells: np.ndarray, v: np.ndarray) -> np.ndarray:
        """M at points ``v`` known to lie in cells ``cells`` (broadcasting)."""
        x0 = self.mesh.nodes[cells]
        return self.values[cells] + self.slopes[cells] * (v - x0)

    def broken_coefficients(self, degree: int) -> np.ndarray:
        """Nodal coefficients of M in the broken velocity space of ``degree >= 1``."""
        if degree < 1:
            raise ConfigurationError("the velocity space needs degree >= 1")
        space = DGSpace(self.mesh, degree)
        cells = np.repeat(np.arange(self.mesh.n_cells), degree + 1)
        return self.cell_values(cells, space.node_coordinates.ravel())

    def vh_m_coefficients(self, degree: int) -> np.ndarray:
        """Nodal coefficients of ``v_h M`` in the broken velocity space."""
        return np.repeat(self.vh_times_m, degree + 1)

    def velocity_at(self, cells: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``v_h`` at points ``v`` of the given cells."""
        return self.vh_times_m[cells] / self.cell_values(cells, v)


def _check_domain(mesh: Mesh1D, v: np.ndarray):
    tol = 1e-12 * max(1.0, abs(mesh.b))
    if np.any(v < mesh.a - tol) or np.any(v > mesh.b + tol):
        raise DomainError(f"velocity outside [{mesh.a}, {mesh.b}]")


def _l2_norm_sq_p1(values: np.ndarray, h: float) -> float:
    a, b = values[:-1], values[1:]
    return float(np.sum(h / 3.0 * (a * a + a * b + b * b)))


def check_maxwellian_preconditions(mesh_v: Mesh1D, theta: float):
    """Raise :class:`ConfigurationError` naming the first violated hypothesis."""
    if not theta > 0:
        raise ConfigurationError(f"theta must be positive, got {theta}")
    L = mesh_v.b
    if abs(mesh_v.a + mesh_v.b) > 1e-12 * max(1.0, L):
        raise ConfigurationError(
            f"velocity mesh must be symmetric about 0, got [{mesh_v.a}, {mesh_v.b}]")
    if L < math.sqrt(theta):
        raise ConfigurationError(f"violated L >= sqrt(theta): L={L}, sqrt(theta)={math.sqrt(theta)}")
    if mesh_v.h ** 2 > 4.0 / math.sqrt(3.0) * theta:
        raise ConfigurationError(
            f"violated h_v^2 <= (4/sqrt(3)) theta: h_v^2={mesh_v.h ** 2}, "
            f"bound={4.0 / math.sqrt(3.0) * theta}")


def build_root_maxwellian(mesh_v: Mesh1D, theta: float) -> DiscreteMaxwellian:
    """Normalized P1 nodal interpolant of the root-Maxwellian on ``mesh_v``."""
    check_maxwellian_preconditions(mesh_v, theta)
    raw = root_maxwellian(mesh_v.nodes, theta)
    raw = 0.5 * (raw + raw[::-1])  # exact evenness despite node roundoff
    values = raw / math.sqrt(_l2_norm_sq_p1(raw, mesh_v.h))
    values.setflags(write=False)
    h = mesh_v.h
    slopes = np.diff(values) / h
    mass = _l2_norm_sq_p1(values, h)
    momentum = float(np.sum(slopes * h * 0.5 * (values[:-1] + values[1:])))
    grad_sq = float(np.sum(slopes ** 2) * h)
    theta_h = 0.25 / grad_sq
    M = DiscreteMaxwellian(mesh=mesh_v, values=values, theta=float(theta), theta_h=theta_h,
                           mass=mass, momentum_defect=momentum,
                           energy_defect=grad_sq - 0.25 / theta)
    if np.any(values <= 0):
        raise InvariantViolation("discrete root-Maxwellian is not strictly positive")
    return M


def discrete_temperature(M: DiscreteMaxwellian) -> float:
    """``theta_h = 1 / (4 (M', M'))`` from the cellwise constant derivative."""
    return 0.25 / float(np.sum(M.slopes ** 2) * M.mesh.h)


def discrete_velocity(M: DiscreteMaxwellian, v, side: str = "right") -> np.ndarray:
    """``v_h(v) = -2 theta M'(v) / M(v)`` evaluated in the cell on ``side`` of a node."""
    v = np.asarray(v, dtype=float)
    _check_domain(M.mesh, v)
    cells = M.mesh.cell_index(v, side)
    return M.velocity_at(cells, v)


@dataclass(frozen=True)
class GammaCoefficients:
    gamma_I: float
    gamma_B_plus: float
    gamma_B_minus: float

    @property
    def gamma_star(self) -> float:
        return min(self.gamma_I, self.gamma_B_plus, self.gamma_B_minus)


def gamma_edges(M: DiscreteMaxwellian) -> GammaCoefficients:
    """Velocity averages of ``|v_h|`` against ``M^2`` on edges and outflow boundaries.

    On each cell ``v_h M^2 = (v_h M) M`` is a constant times a linear function,
    so every integral is exact.
    """
    h = M.mesh.h
    cell_int_m = 0.5 * h * (M.values[:-1] + M.values[1:])
    w = M.vh_times_m * cell_int_m  # integral of v_h M^2 per cell
    g_I = 0.5 * float(np.sum(np.abs(w)))
    g_plus = float(np.sum(w[w > 0]))
    g_minus = float(-np.sum(w[w < 0]))
    out = GammaCoefficients(g_I, g_plus, g_minus)
    if not out.gamma_star > 0:
        raise InvariantViolation(f"nonpositive flux coefficient: {out}")
    return out


def velocity_vh_mass(M: DiscreteMaxwellian, degree: int, kind: str = "vh",
                     n_points: int = VELOCITY_QUADRATURE_POINTS):
    """Weighted velocity mass matrix ``(w psi_j, psi_i)`` on the broken space.

    ``kind``: ``vh`` (w = v_h), ``abs`` (|v_h|), ``pos`` (v_h where v_h > 0)
    or ``neg`` (-v_h where v_h < 0).
    """
    space = DGSpace(M.mesh, degree)
    r, wq = npleg.leggauss(n_points)
    h = M.mesh.h
    pts = M.mesh.nodes[:-1, None] + 0.5 * h * (r[None, :] + 1.0)
    cells = np.broadcast_to(np.arange(M.mesh.n_cells)[:, None], pts.shape)
    vh = M.velocity_at(cells, pts)
    if kind == "abs":
        vh = np.abs(vh)
    elif kind == "pos":
        vh = np.where(M.vh_times_m[:, None] > 0, vh, 0.0)
    elif kind == "neg":
        vh = np.where(M.vh_times_m[:, None] < 0, -vh, 0.0)
    elif kind != "vh":
        raise ConfigurationError(f"unknown weight kind {kind!r}")
    phi = space.reference_basis(r)
    blocks = np.einsum("cq,qi,qj->cij", 0.5 * h * wq[None, :] * vh, phi, phi)
    return _block_diagonal(blocks)


# ---------------------------------------------------------------------------
# Certification report and interpolation error bounds
# ---------------------------------------------------------------------------

def exact_mass_sq(theta: float, L: float) -> float:
    """Squared L2 norm of the exact root-Maxwellian on ``[-L, L]``."""
    return float(erf(L / math.sqrt(2.0 * theta)))


def exact_derivative_sq(theta: float, L: float) -> float:
    """Squared L2 norm of the exact derivative on ``[-L, L]``."""
    e = erf(L / math.sqrt(2.0 * theta))
    return float(e / (4.0 * theta)
                 - L / (2.0 * math.sqrt(2.0 * math.pi * theta ** 3)) * math.exp(-L * L / (2.0 * theta)))


def l2_error_bound(theta: float, L: float, h: float) -> float:
    tail = 2.5 * (1.0 - math.sqrt(erf(L / math.sqrt(2.0 * theta))))
    return tail + 5.0 * h * h * math.sqrt(3.0) / (8.0 * theta)


def h1_error_bound(theta: float, L: float, h: float) -> float:
    tail = 2.5 * (1.0 - math.sqrt(erf(L / math.sqrt(2.0 * theta))))
    return (tail + 2.5 * h * h * math.sqrt(3.0) / (16.0 * theta ** 1.5)
            + 2.5 * math.sqrt(3.0) / math.sqrt(2.0) / (4.0 * theta) * h)


def interpolation_errors(M: DiscreteMaxwellian, n_points: int = 24):
    """L2 and derivative-L2 distances from the exact root-Maxwellian on [-L, L]."""
    r, w = npleg.leggauss(n_points)
    h = M.mesh.h
    pts = M.mesh.nodes[:-1, None] + 0.5 * h * (r[None, :] + 1.0)
    cells = np.broadcast_to(np.arange(M.mesh.n_cells)[:, None], pts.shape)
    wq = 0.5 * h * w[None, :]
    e0 = root_maxwellian(pts, M.theta) - M.cell_values(cells, pts)
    e1 = root_maxwellian_derivative(pts, M.theta) - M.slopes[cells]
    return float(np.sqrt(np.sum(wq * e0 ** 2))), float(np.sqrt(np.sum(wq * e1 ** 2)))


@dataclass(frozen=True)
class MaxwellianReport:
    theta: float
    L: float
    h_v: float
    n_cells: int
    theta_h: float
    residual_mass: float
    residual_symmetry: float
    residual_energy: float
    residual_momentum: float
    energy_defect_expected: bool
    l2_error: float
    l2_bound: float
    h1_error: float
    h1_bound: float
    gamma_I: float
    gamma_B_plus: float
    gamma_B_minus: float
    gamma_star: float

    @property
    def exact_residuals_ok(self) -> bool:
        return max(abs(self.residual_mass), abs(self.residual_symmetry),
                   abs(self.residual_momentum)) < 1e-12

    @property
    def bounds_ok(self) -> bool:
        return self.l2_error <= self.l2_bound and self.h1_error <= self.h1_bound

    def as_row(self) -> dict:
        return asdict(self)


def assumption_report(M: DiscreteMaxwellian) -> MaxwellianReport:
    """Residuals of the four structural requirements, error bounds and flux coefficients.

    The energy residual ``(M', M') - 1/(4 theta)`` is expected to be nonzero
    (order ``h_v``) for the interpolated construction; it is flagged, not failed.
    """
    gam = gamma_edges(M)
    l2e, h1e = interpolation_errors(M)
    L, h = M.L, M.h
    return MaxwellianReport(
        theta=M.theta, L=L, h_v=h, n_cells=M.mesh.n_cells, theta_h=M.theta_h,
        residual_mass=M.mass - 1.0,
        residual_symmetry=float(M.values[-1] - M.values[0]),
        residual_energy=M.energy_defect,
        residual_momentum=M.momentum_defect,
        energy_defect_expected=True,
        l2_error=l2e, l2_bound=l2_error_bound(M.theta, L, h),
        h1_error=h1e, h1_bound=h1_error_bound(M.theta, L, h),
        gamma_I=gam.gamma_I, gamma_B_plus=gam.gamma_B_plus, gamma_B_minus=gam.gamma_B_minus,
        gamma_star=gam.gamma_star,
    )


def write_reports_csv(reports: Iterable[MaxwellianReport], path) -> None:
    reports = list(reports)
    fields = list(MaxwellianReport.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        wr.writeheader()
        for rep in reports:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rep.as_row().items()})


def symmetric_velocity_mesh(L: float, n_cells: int) -> Mesh1D:
    return Mesh1D(-L, L, n_cells)
