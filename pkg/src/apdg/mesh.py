"""Uniform interval meshes, nodal DG spaces and the operators built on them.

Broken spaces use a Lagrange basis at the Gauss-Lobatto points of each cell
(the cell midpoint for degree 0).  Continuous spaces are not given their own
basis machinery; they are realized as subspaces of the broken space of the
same degree through a sparse 0/1 embedding matrix, so every form is assembled
once on the broken space and restricted as ``E.T @ A @ E``.

Sign conventions on an interior node: the cell on the left carries the
outward normal +1, so ``[[u]] = u_left - u_right`` and
``{{u}} = (u_left + u_right) / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.polynomial import legendre as npleg
from scipy.optimize import brentq

from .errors import (
    BoundaryTraceError,
    ConfigurationError,
    InvariantViolation,
    UnsupportedError,
)

CONTINUITIES = ("broken", "continuous", "continuous_zero_trace", "broken_zero_trace")


@dataclass(frozen=True)
class Mesh1D:
    """Uniform mesh of ``[a, b]`` with ``n_cells`` cells."""

    a: float
    b: float
    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 2:
            raise ConfigurationError(
                f"n_cells must be an integer >= 2 (interior edges needed), got {self.n_cells}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)) or not self.b > self.a:
            raise ConfigurationError(f"need finite a < b, got a={self.a}, b={self.b}")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "n_cells", int(self.n_cells))

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.n_cells

    @cached_property
    def nodes(self) -> np.ndarray:
        x = self.a + self.h * np.arange(self.n_cells + 1)
        x[-1] = self.b
        x.setflags(write=False)
        return x

    @property
    def n_interior_edges(self) -> int:
        return self.n_cells - 1

    def cell_index(self, x, side: str = "right") -> np.ndarray:
        """Index of the cell containing each point.

        On a mesh node ``side`` picks the cell to the right or to the left;
        the end points always map into the mesh.
        """
        x = np.asarray(x, dtype=float)
        s = (x - self.a) / self.h
        idx = np.floor(s).astype(int)
        if side == "left":
            on_node = np.isclose(s, np.round(s), rtol=0.0, atol=1e-12)
            idx = np.where(on_node, np.round(s).astype(int) - 1, idx)
        elif side != "right":
            raise ConfigurationError(f"side must be 'left' or 'right', got {side!r}")
        return np.clip(idx, 0, self.n_cells - 1)


def reference_nodes(degree: int) -> np.ndarray:
    """Gauss-Lobatto points on [-1, 1]; the midpoint for degree 0."""
    if degree < 0:
        raise ConfigurationError("degree must be >= 0")
    if degree == 0:
        return np.zeros(1)
    if degree == 1:
        return np.array([-1.0, 1.0])
    interior = npleg.Legendre.basis(degree).deriv().roots()
    return np.concatenate(([-1.0], np.sort(interior.real), [1.0]))


def lagrange_basis(nodes: np.ndarray, r, deriv: int = 0) -> np.ndarray:
    """Values (or derivatives) of the Lagrange basis on ``nodes`` at points ``r``.

    Returns an array of shape ``(len(r), len(nodes))``.
    """
    nodes = np.asarray(nodes, dtype=float)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    k = len(nodes) - 1
    coef = np.linalg.inv(npleg.legvander(nodes, k))  # column j: Legendre coefficients of phi_j
    if deriv:
        coef = npleg.legder(coef, m=deriv, axis=0)
        if coef.shape[0] == 0:
            return np.zeros((len(r), k + 1))
    return npleg.legval(r, coef).T


@dataclass(frozen=True)
class Quadrature:
    """Gauss-Legendre rule with ``n_points`` points in every cell of a mesh."""

    mesh: Mesh1D
    n_points: int

    def __post_init__(self):
        if self.n_points < 1:
            raise ConfigurationError("n_points must be >= 1")

    @classmethod
    def exact_for(cls, mesh: Mesh1D, degree: int) -> "Quadrature":
        """Smallest rule integrating polynomials of ``degree`` exactly."""
        return cls(mesh, max(1, (degree + 2) // 2))

    @property
    def order(self) -> int:
        """Highest polynomial degree integrated exactly."""
        return 2 * self.n_points - 1

    @cached_property
    def reference(self):
        r, w = npleg.leggauss(self.n_points)
        return r, w

    @cached_property
    def points(self) -> np.ndarray:
        r, _ = self.reference
        left = self.mesh.nodes[:-1, None]
        return left + 0.5 * self.mesh.h * (r[None, :] + 1.0)

    @cached_property
    def weights(self) -> np.ndarray:
        _, w = self.reference
        return np.broadcast_to(0.5 * self.mesh.h * w, (self.mesh.n_cells, self.n_points))

    def integrate(self, f: Callable) -> float:
        return float(np.sum(self.weights * f(self.points)))


def _block_diagonal(blocks: np.ndarray) -> sp.csr_matrix:
    n_cells, nl, _ = blocks.shape
    base = (np.arange(n_cells) * nl)[:, None, None]
    rows = np.broadcast_to(base + np.arange(nl)[None, :, None], blocks.shape)
    cols = np.broadcast_to(base + np.arange(nl)[None, None, :], blocks.shape)
    n = n_cells * nl
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n))


@dataclass(frozen=True, eq=False)
class DGSpace:
    """Degree-``k`` nodal space on a mesh.

    ``continuity`` is one of ``broken``, ``continuous``,
    ``continuous_zero_trace`` or ``broken_zero_trace`` (broken functions that
    vanish on the two boundary points).  All matrix methods act on
    coefficient vectors of the broken space of the same degree; map the
    space's own coefficients there with :attr:`embedding`.
    """

    mesh: Mesh1D
    degree: int
    continuity: str = "broken"

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ConfigurationError(f"degree must be an integer >= 0, got {self.degree}")
        if self.continuity not in CONTINUITIES:
            raise ConfigurationError(
                f"continuity must be one of {CONTINUITIES}, got {self.continuity!r}")
        if self.continuity.startswith("continuous") and self.degree < 1:
            raise UnsupportedError("continuous spaces need degree >= 1")
        if self.dof_count < 1:
            raise ConfigurationError(f"{self.continuity} space of degree {self.degree} on "
                                     f"{self.mesh.n_cells} cells has no degrees of freedom")

    # -- sizes and embeddings -------------------------------------------------
    @property
    def n_local(self) -> int:
        return self.degree + 1

    @property
    def n_broken(self) -> int:
        return self.mesh.n_cells * self.n_local

    @property
    def dof_count(self) -> int:
        n, k = self.mesh.n_cells, self.degree
        if self.continuity == "broken":
            return n * (k + 1)
        if self.continuity == "continuous":
            return n * k + 1
        if self.continuity == "continuous_zero_trace":
            return n * k - 1
        return n * (k + 1) - 2 if k >= 1 else n - 2

    @cached_property
    def broken(self) -> "DGSpace":
        if self.continuity == "broken":
            return self
        return DGSpace(self.mesh, self.degree, "broken")

    @cached_property
    def embedding(self) -> sp.csr_matrix:
        """0/1 matrix mapping this space's coefficients to broken coefficients."""
        n, k, nb = self.mesh.n_cells, self.degree, self.n_broken
        if self.continuity == "broken":
            return sp.identity(nb, format="csr")
        if self.continuity.startswith("continuous"):
            cells = np.repeat(np.arange(n), k + 1)
            local = np.tile(np.arange(k + 1), n)
            glob = cells * k + local
            emb = sp.csr_matrix((np.ones(nb), (np.arange(nb), glob)), shape=(nb, n * k + 1))
            if self.continuity == "continuous_zero_trace":
                emb = emb[:, 1:-1]
            return emb.tocsr()
        if k >= 1:
            keep = np.arange(1, nb - 1)
        else:
            keep = np.arange(1, n - 1)
        return sp.csr_matrix((np.ones(len(keep)), (keep, np.arange(len(keep)))),
                             shape=(nb, len(keep)))

    # -- reference element ----------------------------------------------------
    @cached_property
    def reference_nodes(self) -> np.ndarray:
        return reference_nodes(self.degree)

    def reference_basis(self, r, deriv: int = 0) -> np.ndarray:
        return lagrange_basis(self.reference_nodes, r, deriv)

    @cached_property
    def node_coordinates(self) -> np.ndarray:
        """Physical coordinates of the broken nodes, shape ``(n_cells, k+1)``."""
        left = self.mesh.nodes[:-1, None]
        return left + 0.5 * self.mesh.h * (self.reference_nodes[None, :] + 1.0)

    @cached_property
    def _end_values(self):
        phi = self.reference_basis(np.array([-1.0, 1.0]))
        return phi[0], phi[1]

    def quadrature(self, n_points: Optional[int] = None) -> Quadrature:
        """Default rule is exact to degree ``2k + 3``."""
        return Quadrature(self.mesh, n_points if n_points is not None else self.degree + 2)

    # -- broken-space matrices ------------------------------------------------
    def _blocks(self, values, d_test: int, d_trial: int, quad: Quadrature) -> np.ndarray:
        r, _ = quad.reference
        scale = 2.0 / self.mesh.h
        phi_test = self.reference_basis(r, d_test) * scale ** d_test
        phi_trial = self.reference_basis(r, d_trial) * scale ** d_trial
        wv = quad.weights * values
        return np.einsum("cq,qi,qj->cij", wv, phi_test, phi_trial)

    def _weight_values(self, weight, quad: Quadrature) -> np.ndarray:
        if weight is None:
            return np.ones_like(quad.points)
        if callable(weight):
            vals = np.asarray(weight(quad.points), dtype=float)
            return np.broadcast_to(vals, quad.points.shape)
        return np.broadcast_to(np.asarray(weight, dtype=float), quad.points.shape)

    def mass(self, weight=None, n_points: Optional[int] = None) -> sp.csr_matrix:
        """``M[i, j] = (w phi_j, phi_i)``.  ``weight`` is a callable, scalar or
        array of values at the quadrature points."""
        if weight is None and n_points is None:
            return self._mass
        quad = self.quadrature(n_points if n_points is not None else self.degree + 10)
        return _block_diagonal(self._blocks(self._weight_values(weight, quad), 0, 0, quad))

    def abs_mass(self, f: Callable, n_points: Optional[int] = None, n_samples: int = 64) -> sp.csr_matrix:
        """``(|f| phi_j, phi_i)`` for a smooth ``f``.

        Each cell is split at the sign changes of ``f`` (located by sampling and
        bracketing), so the Gauss rule only sees smooth pieces.
        """
        n_points = n_points if n_points is not None else self.degree + 10
        r, w = npleg.leggauss(n_points)
        nodes = self.mesh.nodes
        nl = self.n_local
        blocks = np.zeros((self.mesh.n_cells, nl, nl))
        for c in range(self.mesh.n_cells):
            a, b = nodes[c], nodes[c + 1]
            s = np.linspace(a, b, n_samples + 1)
            fs = np.asarray(f(s), dtype=float)
            cuts = [a]
            for i in range(n_samples):
                if fs[i] == 0.0 and 0 < i:
                    cuts.append(s[i])
                elif fs[i] * fs[i + 1] < 0:
                    cuts.append(brentq(lambda x: float(f(np.array([x]))[0]), s[i], s[i + 1], xtol=1e-15))
            cuts.append(b)
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                if hi <= lo:
                    continue
                x = 0.5 * (hi - lo) * r + 0.5 * (hi + lo)
                wx = 0.5 * (hi - lo) * w * np.abs(np.asarray(f(x), dtype=float))
                phi = self.reference_basis(2.0 * (x - a) / (b - a) - 1.0)
                blocks[c] += np.einsum("q,qi,qj->ij", wx, phi, phi)
        return _block_diagonal(blocks)

    @cached_property
    def _mass(self) -> sp.csr_matrix:
        quad = self.quadrature()
        return _block_diagonal(self._blocks(self._weight_values(None, quad), 0, 0, quad))

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """``K[i, j] = (phi_j', phi_i')`` cellwise."""
        quad = self.quadrature()
        return _block_diagonal(self._blocks(1.0, 1, 1, quad))

    @cached_property
    def gradient(self) -> sp.csr_matrix:
        """``G[i, j] = (phi_j', phi_i)`` cellwise; ``G.T`` pairs trial with test derivative."""
        quad = self.quadrature()
        return _block_diagonal(self._blocks(1.0, 0, 1, quad))

    @cached_property
    def jump(self) -> sp.csr_matrix:
        """Rows: interior nodes 1..n-1; ``[[u]] = u_left - u_right``."""
        return self._edge_matrix(1.0, -1.0)

    @cached_property
    def average(self) -> sp.csr_matrix:
        return self._edge_matrix(0.5, 0.5)

    def _edge_matrix(self, c_left: float, c_right: float) -> sp.csr_matrix:
        n, nl = self.mesh.n_cells, self.n_local
        at_minus, at_plus = self._end_values
        blocks = np.zeros((n - 1, self.n_broken))
        for e in range(n - 1):
            blocks[e, e * nl:(e + 1) * nl] += c_left * at_plus
            blocks[e, (e + 1) * nl:(e + 2) * nl] += c_right * at_minus
        return sp.csr_matrix(blocks)

    @cached_property
    def trace_left(self) -> sp.csr_matrix:
        """Row vector evaluating u(a)."""
        row = np.zeros((1, self.n_broken))
        row[0, :self.n_local] = self._end_values[0]
        return sp.csr_matrix(row)

    @cached_property
    def trace_right(self) -> sp.csr_matrix:
        """Row vector evaluating u(b)."""
        row = np.zeros((1, self.n_broken))
        row[0, -self.n_local:] = self._end_values[1]
        return sp.csr_matrix(row)

    @cached_property
    def boundary_form(self) -> sp.csr_matrix:
        """``<u, v>`` summed over the two boundary points."""
        return (self.trace_left.T @ self.trace_left + self.trace_right.T @ self.trace_right).tocsr()

    @cached_property
    def jump_form(self) -> sp.csr_matrix:
        """``<[[u]], [[v]]>`` over interior nodes."""
        return (self.jump.T @ self.jump).tocsr()

    @cached_property
    def hh1_form(self) -> sp.csr_matrix:
        """Gram matrix of the discrete H1 norm with jump and boundary penalties."""
        h = self.mesh.h
        return (self.stiffness + (self.jump_form + self.boundary_form) / h).tocsr()

    # -- own-space matrices ---------------------------------------------------
    def restrict(self, A) -> sp.csr_matrix:
        E = self.embedding
        return (E.T @ A @ E).tocsr()

    @cached_property
    def gram(self) -> sp.csr_matrix:
        """Mass matrix in this space's own coefficients."""
        return self.restrict(self.broken.mass())

    @cached_property
    def _gram_factor(self):
        return sla.cho_factor(self.gram.toarray())

    def solve_gram(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._gram_factor, b)

    def zero(self) -> "SpatialField":
        return SpatialField(self, np.zeros(self.dof_count))


@dataclass(frozen=True, eq=False)
class SpatialField:
    """A function of the space ``space`` given by its coefficients."""

    space: DGSpace
    coefficients: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).ravel()
        if c.shape[0] != self.space.dof_count:
            raise ConfigurationError(
                f"expected {self.space.dof_count} coefficients, got {c.shape[0]}")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @cached_property
    def broken_coefficients(self) -> np.ndarray:
        return self.space.embedding @ self.coefficients

    def cell_coefficients(self) -> np.ndarray:
        return self.broken_coefficients.reshape(self.space.mesh.n_cells, self.space.n_local)

    def __call__(self, x, side: str = "right") -> np.ndarray:
        return self.evaluate(x, side)

    def evaluate(self, x, side: str = "right", deriv: int = 0) -> np.ndarray:
        mesh = self.space.mesh
        x = np.asarray(x, dtype=float)
        flat = x.ravel()
        if np.any(flat < mesh.a - 1e-12) or np.any(flat > mesh.b + 1e-12):
            raise ConfigurationError("evaluation point outside the mesh")
        cells = mesh.cell_index(flat, side)
        r = 2.0 * (flat - mesh.nodes[cells]) / mesh.h - 1.0
        phi = self.space.reference_basis(r, deriv) * (2.0 / mesh.h) ** deriv
        vals = np.einsum("pi,pi->p", phi, self.cell_coefficients()[cells])
        return vals.reshape(x.shape)

    def with_coefficients(self, c) -> "SpatialField":
        return SpatialField(self.space, c)

    def __add__(self, other: "SpatialField") -> "SpatialField":
        return SpatialField(self.space, self.coefficients + other.coefficients)

    def __sub__(self, other: "SpatialField") -> "SpatialField":
        return SpatialField(self.space, self.coefficients - other.coefficients)

    def __mul__(self, c: float) -> "SpatialField":
        return SpatialField(self.space, c * self.coefficients)

    __rmul__ = __mul__

    def as_broken(self) -> "SpatialField":
        return SpatialField(self.space.broken, self.broken_coefficients)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def jump_average(field: SpatialField, edge_index: int):
    """Jump and average of ``field`` at mesh node ``edge_index``.

    Interior nodes are ``1 .. n_cells - 1``.  The jump is
    ``u_left - u_right`` (normal +1 on the left cell).
    """
    n = field.space.mesh.n_cells
    if edge_index in (0, n):
        raise BoundaryTraceError(f"node {edge_index} lies on the boundary")
    if not 0 < edge_index < n:
        raise ConfigurationError(f"edge index {edge_index} outside 1..{n - 1}")
    c = field.broken_coefficients
    sp_b = field.space.broken
    e = edge_index - 1
    return float((sp_b.jump[e] @ c).item()), float((sp_b.average[e] @ c).item())


def _rhs_from_target(target, space: DGSpace, n_points: Optional[int]) -> np.ndarray:
    """Broken load vector ``(target, phi_i)``."""
    broken = space.broken
    if isinstance(target, SpatialField):
        if n_points is None:
            n_points = (target.space.degree + space.degree) // 2 + 2
        quad = broken.quadrature(n_points)
        tm = target.space.mesh
        if (tm.a, tm.b, tm.n_cells) == (space.mesh.a, space.mesh.b, space.mesh.n_cells):
            r, _ = quad.reference
            vals = target.cell_coefficients() @ target.space.reference_basis(r).T
        else:
            vals = target.evaluate(quad.points)
    else:
        quad = broken.quadrature(n_points if n_points is not None else space.degree + 6)
        vals = np.broadcast_to(np.asarray(target(quad.points), dtype=float), quad.points.shape)
    r, _ = quad.reference
    phi = broken.reference_basis(r)
    loc = np.einsum("cq,qi->ci", quad.weights * vals, phi)
    return loc.ravel()


def l2_project(target, space: DGSpace, n_points: Optional[int] = None) -> SpatialField:
    """L2-orthogonal projection of a callable or field onto ``space``."""
    b = space.embedding.T @ _rhs_from_target(target, space, n_points)
    c = space.solve_gram(b)
    res = space.gram @ c - b
    scale = max(np.linalg.norm(b), 1e-300)
    if np.linalg.norm(res) > 1e-12 * scale and np.linalg.norm(res) > 1e-14:
        raise InvariantViolation(f"projection residual {np.linalg.norm(res):.3e} too large")
    return SpatialField(space, c)


def conforming_interpolant(field: SpatialField, beta: int) -> SpatialField:
    """Map a broken field into the zero-trace subspace used by flux variant ``beta``.

    ``beta=0``: continuous degree-k space with zero trace; coincident nodal
    values are averaged and the two boundary nodes are set to zero.
    ``beta=1``: broken zero-trace space; boundary nodal values are dropped and
    every other coefficient is kept.
    """
    space = field.space
    k, n = space.degree, space.mesh.n_cells
    c = field.broken_coefficients
    if beta == 0:
        if k < 1:
            raise UnsupportedError("the beta=0 interpolant needs degree >= 1")
        target = DGSpace(space.mesh, k, "continuous_zero_trace")
        glob = (np.repeat(np.arange(n), k + 1) * k + np.tile(np.arange(k + 1), n))
        sums = np.bincount(glob, weights=c, minlength=n * k + 1)
        counts = np.bincount(glob, minlength=n * k + 1)
        return SpatialField(target, (sums / counts)[1:-1])
    if beta == 1:
        target = DGSpace(space.mesh, k, "broken_zero_trace")
        return SpatialField(target, target.embedding.T @ c)
    raise ConfigurationError(f"beta must be 0 or 1, got {beta}")


def norm_Hh1(field: SpatialField) -> float:
    """Discrete H1 norm with jump and boundary penalties."""
    c = field.broken_coefficients
    return float(np.sqrt(max(c @ (field.space.broken.hh1_form @ c), 0.0)))


def zero_trace_space(space: DGSpace, beta: int) -> DGSpace:
    """Test space of the dual norm and target of the projection for ``beta``."""
    if beta == 0:
        return DGSpace(space.mesh, space.degree, "continuous_zero_trace")
    if beta == 1:
        return DGSpace(space.mesh, space.degree, "broken_zero_trace")
    raise ConfigurationError(f"beta must be 0 or 1, got {beta}")


def dual_gram(space: DGSpace, beta: int) -> sp.csr_matrix:
    """Gram matrix of the denominator norm of the beta dual norm on the test space."""
    test = zero_trace_space(space, beta)
    broken = test.broken
    form = broken.stiffness if beta == 0 else broken.hh1_form
    return test.restrict(form)


def norm_dual(field: SpatialField, beta: int) -> float:
    """Discrete dual norm: ``sup_q (z, q) / |q|`` over the zero-trace test space.

    The denominator is the broken gradient norm for ``beta=0`` and the
    discrete H1 norm for ``beta=1``.  Evaluated through the Riesz problem
    ``G r = b``, giving ``sqrt(b . r)``.
    """
    if beta not in (0, 1):
        raise ConfigurationError(f"beta must be 0 or 1, got {beta}")
    try:
        test = zero_trace_space(field.space, beta)
    except (UnsupportedError, ConfigurationError) as exc:
        raise ConfigurationError(f"empty or unsupported test space: {exc}") from exc
    b = test.embedding.T @ (field.space.broken.mass() @ field.broken_coefficients)
    G = dual_gram(field.space, beta).toarray()
    r = sla.solve(G, b, assume_a="pos")
    return float(np.sqrt(max(b @ r, 0.0)))


def projection_matrix(space: DGSpace, beta: int) -> np.ndarray:
    """Dense L2 projection from the broken space onto the beta zero-trace space,
    expressed in broken coefficients."""
    test = zero_trace_space(space, beta)
    E = test.embedding.toarray()
    Mb = space.broken.mass().toarray()
    return E @ sla.solve(E.T @ Mb @ E, E.T @ Mb, assume_a="pos")


def projection_stability_ratio(space: DGSpace, beta: int, n_samples: int = 0,
                               rng: Optional[np.random.Generator] = None,
                               method: str = "exact") -> float:
    """Largest ratio ``|S q|_{H1h} / |q|_{H1h}`` of the L2 projection ``S``.

    ``method="exact"`` solves the dense generalized eigenproblem; ``"sampled"``
    takes the max over ``n_samples`` Gaussian coefficient vectors.
    """
    broken = space.broken
    P = projection_matrix(broken, beta)
    H = broken.hh1_form.toarray()
    if method == "exact":
        lam = sla.eigh(P.T @ H @ P, H, eigvals_only=True)
        return float(np.sqrt(max(lam[-1], 0.0)))
    if method != "sampled":
        raise ConfigurationError(f"unknown method {method!r}")
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    Q = rng.standard_normal((broken.n_broken, n_samples))
    num = np.einsum("ij,ij->j", P @ Q, H @ (P @ Q))
    den = np.einsum("ij,ij->j", Q, H @ Q)
    return float(np.sqrt(np.max(num / den)))


def _restricted_rayleigh_max(N: np.ndarray, D: np.ndarray, rtol: float = 1e-10) -> float:
    """max q.N q / q.D q over the range of the semidefinite ``D``."""
    w, U = np.linalg.eigh(D)
    keep = w > rtol * w.max()
    Ur = U[:, keep]
    lam = sla.eigh(Ur.T @ N @ Ur, Ur.T @ D @ Ur, eigvals_only=True)
    return float(lam[-1])


def interpolant_matrix(space: DGSpace, beta: int) -> np.ndarray:
    """Dense matrix of the conforming interpolant on broken coefficients."""
    broken = space.broken
    n = broken.n_broken
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        out = conforming_interpolant(SpatialField(broken, e), beta)
        cols.append(out.broken_coefficients)
    return np.column_stack(cols)


def interpolant_constant(space: DGSpace, beta: int) -> float:
    """Smallest C with ``|q - I q|^2_{H1h} <= C/h (|q|^2_bdry + |[[q]]|^2)`` (beta=0)
    or ``<= C/h |q|^2_bdry`` (beta=1), over the whole broken space."""
    broken = space.broken
    I = interpolant_matrix(broken, beta)
    R = np.eye(broken.n_broken) - I
    N = R.T @ broken.hh1_form.toarray() @ R
    D = broken.boundary_form.toarray()
    if beta == 0:
        D = D + broken.jump_form.toarray()
    return _restricted_rayleigh_max(N, D / broken.mesh.h)


def trace_inverse_constants(space: DGSpace):
    """Measured constants ``(C_trace, C_inverse)`` of
    ``|[[q]]|^2 + |q|^2_bdry <= C_trace / h |q|^2`` and ``|q'| <= C_inverse / h |q|``."""
    broken = space.broken
    M = broken.mass().toarray()
    h = broken.mesh.h
    t = sla.eigh((broken.jump_form + broken.boundary_form).toarray(), M, eigvals_only=True)[-1]
    s = sla.eigh(broken.stiffness.toarray(), M, eigvals_only=True)[-1]
    return float(h * t), float(h * np.sqrt(s))


def poincare_constant(space: DGSpace) -> float:
    """Smallest C with ``|q| <= C |q|_{H1h}`` on the broken space."""
    broken = space.broken
    lam = sla.eigh(broken.mass().toarray(), broken.hh1_form.toarray(), eigvals_only=True)[-1]
    return float(np.sqrt(lam))
