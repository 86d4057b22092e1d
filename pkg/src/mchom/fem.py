"""Bilinear (Q1) finite elements on the structured grid.

Permeability is constant per fine cell, so every integral below is evaluated
exactly with the element matrices. Functions are handled in two forms:

* nodal vectors over the grid (or over a box of it), conforming;
* corner arrays of shape ``(n_cells, 4)``, one row of SW, SE, NE, NW values per
  fine cell. Functions that are broken across coarse cell faces live in this
  form, and the broken bilinear form is a plain sum over cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .field import CoefficientField
from .mesh import FineGrid

__all__ = [
    "STIFFNESS_LOCAL",
    "mass_local",
    "SolverError",
    "RankDeficientConstraints",
    "ConstraintSet",
    "SPDSolver",
    "assemble_stiffness",
    "assemble_mass",
    "apply_bilinear",
    "corner_values",
    "load_vector",
    "nodal_interpolant",
    "solve_spd",
    "solve_constrained",
    "solve_kkt_dense",
    "solve_fine_reference",
    "norms",
]

log = logging.getLogger(__name__)

# unit square, nodes SW, SE, NE, NW; independent of h in 2D
STIFFNESS_LOCAL = np.array(
    [[4.0, -1.0, -2.0, -1.0],
     [-1.0, 4.0, -1.0, -2.0],
     [-2.0, -1.0, 4.0, -1.0],
     [-1.0, -2.0, -1.0, 4.0]]
) / 6.0

_MASS_UNIT = np.array(
    [[4.0, 2.0, 1.0, 2.0],
     [2.0, 4.0, 2.0, 1.0],
     [1.0, 2.0, 4.0, 2.0],
     [2.0, 1.0, 2.0, 4.0]]
) / 36.0


def mass_local(h):
    return _MASS_UNIT * h * h


class SolverError(RuntimeError):
    """A linear solve failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (relative residual {residual:.3e})")
        self.residual = residual


class RankDeficientConstraints(SolverError):
    def __init__(self, row, label=None):
        what = f"row {row}" if label is None else f"row {row} ({label})"
        super().__init__(f"constraint {what} is linearly dependent on the others")
        self.row = row
        self.label = label


def _local_node_ids(grid, box):
    """Map from global node id to local index inside ``box`` (dense lookup)."""
    (x0, x1), (y0, _) = box
    w = x1 - x0 + 1

    def to_local(nodes):
        iy, ix = np.divmod(np.asarray(nodes), grid.n + 1)
        return (iy - y0) * w + (ix - x0)

    return to_local


def _element_corners(grid: FineGrid, box, cells):
    if box is None:
        return grid.cell_corners(cells)
    return _local_node_ids(grid, box)(grid.cell_corners(cells))


def _assemble(grid, weights, local, box=None, cells=None):
    if box is None:
        box = grid.full_box
    if cells is None:
        cells = grid.box_cells(box)
    cells = np.asarray(cells)
    if cells.size == 0:
        raise ValueError("empty support")
    corners = _element_corners(grid, box, cells)
    n_nodes = int(np.prod([hi - lo + 1 for lo, hi in box]))
    rows = np.repeat(corners, 4, axis=1).ravel()
    cols = np.tile(corners, (1, 4)).ravel()
    vals = (weights[:, None, None] * local[None, :, :]).ravel()
    return sp.coo_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes)).tocsr()


def assemble_stiffness(grid: FineGrid, field: CoefficientField, box=None, cells=None):
    """Stiffness matrix of ``∫ κ ∇u·∇v`` over ``cells`` on the nodes of ``box``.

    ``box`` defaults to the whole grid and ``cells`` to every cell of the box;
    a strict subset of cells integrates over that region only, which is how
    cell-restricted energies are formed. Rows follow ``grid.box_nodes(box)``.
    """
    if field.grid != grid:
        raise ValueError("field lives on a different grid")
    if box is None:
        box = grid.full_box
    if cells is None:
        cells = grid.box_cells(box)
    cells = np.asarray(cells)
    if cells.size == 0:
        raise ValueError("empty support")
    return _assemble(grid, field.values[cells], STIFFNESS_LOCAL, box, cells)


def assemble_mass(grid: FineGrid, box=None, cells=None):
    if box is None:
        box = grid.full_box
    if cells is None:
        cells = grid.box_cells(box)
    cells = np.asarray(cells)
    return _assemble(grid, np.ones(cells.size), mass_local(grid.h), box, cells)


def corner_values(u, grid: FineGrid, cells=None):
    """Corner array of a global nodal vector (or pass a corner array through)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 2 and u.shape[-1] == 4 and u.shape[0] == grid.n_cells:
        return u if cells is None else u[cells]
    if u.shape[0] != grid.n_nodes:
        raise ValueError(f"expected {grid.n_nodes} nodal values, got shape {u.shape}")
    return u[grid.cell_corners(cells)]


def apply_bilinear(field: CoefficientField, u, v, cells=None):
    """``Σ_cells ∫ κ ∇u·∇v``; broken functions enter as corner arrays."""
    grid = field.grid
    cu = corner_values(u, grid, cells)
    cv = corner_values(v, grid, cells)
    kappa = field.values if cells is None else field.values[np.asarray(cells)]
    return float(np.einsum("c,ca,ab,cb->", kappa, cu, STIFFNESS_LOCAL, cv))


def norms(u, field: CoefficientField, cells=None):
    """Energy and L2 norms of ``u`` over ``cells`` (default: whole domain)."""
    grid = field.grid
    cu = corner_values(u, grid, cells)
    kappa = field.values if cells is None else field.values[np.asarray(cells)]
    energy2 = np.einsum("c,ca,ab,cb->", kappa, cu, STIFFNESS_LOCAL, cu)
    l22 = np.einsum("ca,ab,cb->", cu, mass_local(grid.h), cu)
    return {"energy": float(np.sqrt(max(energy2, 0.0))), "l2": float(np.sqrt(max(l22, 0.0)))}


def nodal_interpolant(grid: FineGrid, f):
    """Nodal values of ``f``: scalar, callable ``f(x, y)``, or nodal array."""
    if callable(f):
        xy = grid.node_coords()
        return np.asarray(f(xy[:, 0], xy[:, 1]), dtype=float) * np.ones(grid.n_nodes)
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full(grid.n_nodes, float(f))
    if f.shape != (grid.n_nodes,):
        raise ValueError(f"expected {grid.n_nodes} nodal values for f, got shape {f.shape}")
    return f


def load_vector(grid: FineGrid, f, box=None, cells=None):
    """``(f, v_node)`` for the Q1 interpolant of ``f``, exact."""
    fn = nodal_interpolant(grid, f)
    if box is None:
        box = grid.full_box
    nodes = grid.box_nodes(box)
    return assemble_mass(grid, box, cells) @ fn[nodes]


class SPDSolver:
    """Reusable solver for a symmetric positive definite sparse matrix.

    ``method='direct'`` factorizes once with SuperLU; ``method='cg'`` runs
    Jacobi-preconditioned conjugate gradients from a zero initial guess.
    """

    def __init__(self, A, method="direct", tol=1e-10, maxiter=None):
        self.A = sp.csc_matrix(A)
        self.method = method
        self.tol = tol
        self.maxiter = maxiter if maxiter is not None else max(10 * self.A.shape[0], 1000)
        if method == "direct":
            self._lu = spla.splu(self.A, permc_spec="MMD_AT_PLUS_A")
        elif method == "cg":
            diag = self.A.diagonal()
            if np.any(diag <= 0):
                raise SolverError("matrix has a nonpositive diagonal entry")
            self._prec = spla.LinearOperator(self.A.shape, matvec=lambda x: x / diag, dtype=float)
        else:
            raise ValueError(f"unknown method {method!r}")

    def _cg(self, b):
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return np.zeros_like(b)
        x, info = spla.cg(self.A, b, x0=np.zeros_like(b), rtol=self.tol, atol=0.0,
                          maxiter=self.maxiter, M=self._prec)
        res = np.linalg.norm(self.A @ x - b) / nb
        if info != 0 or res > 10 * self.tol:
            raise SolverError(f"conjugate gradients stopped after {self.maxiter} iterations", res)
        return x

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self.method == "direct":
            return self._lu.solve(b)
        if b.ndim == 1:
            return self._cg(b)
        return np.column_stack([self._cg(b[:, j]) for j in range(b.shape[1])])


def solve_spd(A, b, tol=1e-10, method="direct"):
    """Solve ``A x = b``; raises :class:`SolverError` if the residual exceeds ``tol``."""
    b = np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b)
    x = SPDSolver(A, method, tol).solve(b)
    res = np.linalg.norm(A @ x - b) / nb
    if res > tol:
        raise SolverError("SPD solve did not reach tolerance", res)
    return x


@dataclass
class ConstraintSet:
    """Rows ``C`` of L2 pairings and targets ``g``; ``g`` may hold several columns."""

    C: sp.spmatrix
    g: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.C = sp.csr_matrix(self.C)
        self.g = np.asarray(self.g, dtype=float)
        if self.g.shape[0] != self.C.shape[0]:
            raise ValueError("one target per constraint row is required")

    def __len__(self):
        return self.C.shape[0]

    def label(self, row):
        return self.labels[row] if row < len(self.labels) else None


def _dependent_row(M):
    """Index of a row of ``M`` that is dependent on the others, via pivoted QR."""
    M = np.asarray(M)
    _, R, piv = sla.qr(M.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    scale = diag[0] if diag.size else 1.0
    bad = np.nonzero(diag <= 1e-12 * scale)[0]
    if bad.size:
        return int(piv[bad[0]])
    if M.shape[0] > diag.size:
        # more rows than columns: the unpivoted tail is dependent
        return int(piv[diag.size])
    return None


def solve_kkt_dense(A, C, b, g):
    """Reference path: LU factorization of the full KKT matrix."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    C = C.toarray() if sp.issparse(C) else np.asarray(C)
    n, m = A.shape[0], C.shape[0]
    row = _dependent_row(C) if m else None
    if row is not None:
        raise RankDeficientConstraints(row)
    K = np.block([[A, C.T], [C, np.zeros((m, m))]])
    g = np.asarray(g, dtype=float)
    b = np.zeros((n,) + g.shape[1:]) if b is None else np.asarray(b, dtype=float)
    if g.ndim == 2 and b.ndim == 1:
        b = np.repeat(b[:, None], g.shape[1], axis=1)
    sol = sla.solve(K, np.concatenate([b, g], axis=0), assume_a="sym")
    return sol[:n], sol[n:]


def _row_scaling(A, C):
    """Row weights bringing the constraint rows to the scale of ``A``."""
    norms_ = sp.linalg.norm(C, axis=1) if sp.issparse(C) else np.linalg.norm(C, axis=1)
    diag = np.abs(A.diagonal()).mean() if A.shape[0] else 1.0
    with np.errstate(divide="ignore"):
        w = np.where(norms_ > 0, np.sqrt(diag) / norms_, 1.0)
    return w


def solve_constrained(A, constraints: ConstraintSet, b=None, tol=1e-10, method="auto",
                      inner="direct", dense_threshold=600):
    """Minimize ``½uᵀAu − bᵀu`` subject to ``Cu = g``.

    The default path eliminates ``u`` and solves the Schur complement
    ``C A⁻¹ Cᵀ λ = C A⁻¹ b − g`` (dense, Cholesky), with inner SPD solves
    through :class:`SPDSolver`. Systems with at most ``dense_threshold``
    unknowns (primal plus multipliers) go through the dense KKT factorization
    when ``method='auto'``. Returns ``(u, multipliers)`` with sign convention
    ``A u + Cᵀλ = b``.
    """
    n, m = A.shape[0], len(constraints)
    if method == "auto":
        method = "dense" if n + m <= dense_threshold else "schur"
    if method not in ("dense", "schur"):
        raise ValueError(f"unknown method {method!r}")
    # row scaling leaves u unchanged and conditions both paths
    w = _row_scaling(A, constraints.C)
    C = sp.diags(w) @ constraints.C
    g = constraints.g * (w[:, None] if constraints.g.ndim == 2 else w)
    if method == "dense":
        try:
            u, lam = solve_kkt_dense(A, C, b, g)
        except RankDeficientConstraints as err:
            raise RankDeficientConstraints(err.row, constraints.label(err.row)) from None
        return u, lam * (w[:, None] if lam.ndim == 2 else w)

    solver = SPDSolver(A, inner, tol=min(tol, 1e-12) if inner == "cg" else tol)
    Y = solver.solve(C.T.toarray())
    if Y.ndim == 1:
        Y = Y[:, None]
    S = C @ Y
    S = 0.5 * (S + S.T)
    ev = np.linalg.eigvalsh(S) if m else np.ones(1)
    if ev[0] <= 1e-11 * ev[-1]:
        row = _dependent_row(C.toarray())
        row = m - 1 if row is None else row
        raise RankDeficientConstraints(row, constraints.label(row))
    factor = sla.cho_factor(S)
    if b is None:
        lam = sla.cho_solve(factor, -g)
        u = -Y @ lam
    else:
        x0 = solver.solve(b)
        rhs = C @ x0
        if g.ndim == 2:
            rhs = rhs[:, None]
            x0 = x0[:, None]
        lam = sla.cho_solve(factor, rhs - g)
        u = x0 - Y @ lam
    return u, lam * (w[:, None] if lam.ndim == 2 else w)


def solve_fine_reference(grid: FineGrid, field: CoefficientField, f, tol=1e-10, method="direct"):
    """Q1 solution of ``-div(κ∇u) = f`` with ``u = 0`` on the boundary.

    Returns the nodal vector over the whole grid.
    """
    A = assemble_stiffness(grid, field)
    b = load_vector(grid, f)
    free = np.ones(grid.n_nodes, dtype=bool)
    free[grid.boundary_nodes()] = False
    u = np.zeros(grid.n_nodes)
    u[free] = solve_spd(A[free][:, free], b[free], tol=tol, method=method)
    return u
