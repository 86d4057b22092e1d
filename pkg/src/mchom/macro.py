"""Effective tensors, the coupled two-continuum macro system and its checks.

All per-cell quantities derive from one Gram matrix per coarse cell,

    G[a, b] = (1/H^d) ∫_K κ ∇e_a · ∇e_b,

taken over the cell solutions ``e = (η_0, η_0^(1), η_0^(2), η_1, ...)``. The
diffusion, coupling and exchange blocks are sub-blocks of ``G``, so their
symmetries hold by construction.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import fem
from .cells import CellSolutionSet, feature_index
from .downscale import CoarseMesh, MacroField, cell_restricted_nodal, downscale_linear
from .field import CoefficientField
from .mesh import ShiftedPartition

__all__ = [
    "EffectiveTensors",
    "LoadMoments",
    "MacroSystem",
    "MacroSolution",
    "SingularMacroSystem",
    "gram_matrix",
    "assemble_effective_tensors",
    "assemble_effective_tensors_rve",
    "compute_load_moments",
    "assemble_macro_system",
    "solve_macro",
    "reconstruct",
    "averaging_identity_sides",
    "verify_averaging_identity",
    "write_tensors_csv",
    "read_tensors_csv",
]

log = logging.getLogger(__name__)


class SingularMacroSystem(RuntimeError):
    def __init__(self, sigma_min, sigma_max):
        super().__init__(
            f"macro system is singular: smallest singular value {sigma_min:.3e} "
            f"(largest {sigma_max:.3e})"
        )
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max


def gram_matrix(s: CellSolutionSet, field: CoefficientField, cells):
    """``∫_cells κ ∇e_a·∇e_b`` over the given fine cells, symmetrized."""
    E = s.on_cells(cells)
    G = np.einsum("c,caf,ab,cbg->fg", field.values[cells], E, fem.STIFFNESS_LOCAL, E)
    return 0.5 * (G + G.T)


@dataclass(eq=False)
class EffectiveTensors:
    """Per-coarse-cell ``α[i,j,k,l]``, ``β[i,j,k]``, ``γ[i,j]`` and their Gram matrices."""

    gram: np.ndarray
    centers: np.ndarray
    H: float
    n_continua: int
    d: int = 2
    provenance: str = "full-cell"

    @property
    def n_cells(self):
        return self.gram.shape[0]

    def _idx(self):
        nc, d = self.n_continua, self.d
        val = [feature_index(i, None, d) for i in range(nc)]
        grad = [[feature_index(i, k, d) for k in range(d)] for i in range(nc)]
        return np.array(val), np.array(grad)

    @property
    def gamma(self):
        val, _ = self._idx()
        return self.gram[:, val[:, None], val[None, :]]

    @property
    def beta(self):
        """``β[c, i, j, k]``: gradient k of continuum i against value of continuum j."""
        val, grad = self._idx()
        return self.gram[:, grad[:, None, :], val[None, :, None]]

    @property
    def alpha(self):
        _, grad = self._idx()
        return self.gram[:, grad[:, None, :, None], grad[None, :, None, :]]

    def quadratic_form(self, u_feats, v_feats):
        """Per-cell ``uᵀ G v`` for feature matrices of shape (cells, features)."""
        nf = self.gram.shape[1]
        return np.einsum("cf,cfg,cg->c", u_feats[:, :nf], self.gram, v_feats[:, :nf])

    def symmetry_violation(self):
        """Max relative asymmetry of ``α^{ij}_{kl}`` vs ``α^{ji}_{lk}`` and ``γ^{ij}`` vs ``γ^{ji}``."""
        a, g = self.alpha, self.gamma
        sa = np.abs(a - a.transpose(0, 2, 1, 4, 3)).max(initial=0.0) / max(np.abs(a).max(initial=0.0), 1e-300)
        sg = np.abs(g - g.transpose(0, 2, 1)).max(initial=0.0) / max(np.abs(g).max(initial=0.0), 1e-300)
        return float(max(sa, sg))

    def min_eigenvalue_ratio(self):
        """Smallest over cells of ``λ_min / λ_max`` of the Gram matrix."""
        worst = np.inf
        for G in self.gram:
            w = np.linalg.eigvalsh(0.5 * (G + G.T))
            top = max(abs(w).max(), 1e-300)
            worst = min(worst, w.min() / top)
        return float(worst)

    @classmethod
    def from_blocks(cls, alpha, beta, gamma, centers, H, provenance="imported"):
        """Rebuild the Gram matrices from separately stored blocks (no symmetrization)."""
        alpha, beta, gamma = map(np.asarray, (alpha, beta, gamma))
        C, nc, _, d = beta.shape
        nf = nc * (1 + d)
        gram = np.zeros((C, nf, nf))
        for i in range(nc):
            for j in range(nc):
                gram[:, feature_index(i, None, d), feature_index(j, None, d)] = gamma[:, i, j]
                for k in range(d):
                    gram[:, feature_index(i, k, d), feature_index(j, None, d)] = beta[:, i, j, k]
                    gram[:, feature_index(j, None, d), feature_index(i, k, d)] = beta[:, i, j, k]
                    for l in range(d):
                        gram[:, feature_index(i, k, d), feature_index(j, l, d)] = alpha[:, i, j, k, l]
        return cls(gram, np.asarray(centers), H, nc, d, provenance)


def _n_continua(sets):
    return max(len(s.present) for s in sets)


def assemble_effective_tensors(sets, field: CoefficientField, p_H: ShiftedPartition):
    """Full-cell tensors: cell-solution energies over each target cell ``K`` only."""
    if any(s is None for s in sets) or len(sets) != len(p_H):
        raise ValueError("cell solutions missing for some coarse cells")
    Hd = p_H.scale**p_H.grid.d
    nc = _n_continua(sets)
    nf = nc * (1 + p_H.grid.d)
    gram = np.zeros((len(p_H), nf, nf))
    for s in sets:
        cells = p_H.cells[s.cell_id].fine_cells
        gram[s.cell_id] = gram_matrix(s, field, cells)[:nf, :nf] / Hd
    centers = p_H.index_set
    return EffectiveTensors(gram, centers, p_H.scale, nc, p_H.grid.d, "full-cell")


def assemble_effective_tensors_rve(sets, field: CoefficientField, p_H: ShiftedPartition):
    """RVE tensors from cell solutions posed around windows ``ω ⊂ K``.

    Each set's ``patch.target_box`` is its window; the window integral is
    rescaled by ``|K| / (H^d |ω|)``.
    """
    grid = p_H.grid
    Hd = p_H.scale**grid.d
    nc = _n_continua(sets)
    nf = nc * (1 + grid.d)
    gram = np.zeros((len(p_H), nf, nf))
    for s in sets:
        window = s.patch.target_box
        cells = grid.box_cells(window)
        ratio = p_H.cells[s.cell_id].n_fine / cells.size
        gram[s.cell_id] = gram_matrix(s, field, cells)[:nf, :nf] * ratio / Hd
    return EffectiveTensors(gram, p_H.index_set, p_H.scale, nc, grid.d, "rve")


@dataclass(eq=False)
class LoadMoments:
    """``∫_K f e_a`` for every coarse cell and cell solution (cells, features)."""

    moments: np.ndarray

    def __add__(self, other):
        return LoadMoments(self.moments + other.moments)

    def __mul__(self, c):
        return LoadMoments(self.moments * c)

    __rmul__ = __mul__


def compute_load_moments(f, sets, p_H: ShiftedPartition):
    grid = p_H.grid
    fn = fem.nodal_interpolant(grid, f)
    M = fem.mass_local(grid.h)
    nf = _n_continua(sets) * (1 + grid.d)
    out = np.zeros((len(p_H), nf))
    for s in sets:
        cells = p_H.cells[s.cell_id].fine_cells
        fc = fn[grid.cell_corners(cells)]
        out[s.cell_id] = np.einsum("ca,ab,cbf->f", fc, M, s.on_cells(cells))[:nf]
    return LoadMoments(out)


@dataclass(eq=False)
class MacroSystem:
    """Dense macro matrix and RHS; dofs are ``i * n_nodes + node``."""

    matrix: np.ndarray
    rhs: np.ndarray
    mesh: CoarseMesh = field(repr=False)
    bc: str
    n_continua: int
    pinned: np.ndarray = field(repr=False)

    @property
    def free(self):
        mask = np.ones(self.matrix.shape[0], dtype=bool)
        mask[self.pinned] = False
        return mask


def _element_operator(mesh: CoarseMesh, point, nc):
    """Map from global macro dofs to the feature vector at ``point``."""
    nodes, E = mesh.eval_matrix(point)
    d = E.shape[0] - 1
    B = np.zeros((nc * (1 + d), nc * 4))
    dofs = np.zeros(nc * 4, dtype=np.int64)
    for i in range(nc):
        B[i * (1 + d):(i + 1) * (1 + d), i * 4:(i + 1) * 4] = E
        dofs[i * 4:(i + 1) * 4] = i * mesh.n_nodes + nodes
    return B, dofs


def assemble_macro_system(tensors, moments, mesh: CoarseMesh, bc="natural", partitions=None):
    """Midpoint-rule discretization of the homogenized two-field form.

    ``tensors``/``moments`` may be single objects or equal-length lists, one
    per shift partition in ``partitions``; the form is then averaged over the
    shifts. Macro values and gradients are sampled from the bilinear field at
    each cell's nominal center, with weight ``H^d`` per cell.

    ``bc='dirichlet'`` pins both continua to zero on the boundary. Dofs of a
    continuum that no cell solution sees (zero diagonal) are pinned as well.
    """
    if bc not in ("natural", "dirichlet"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    if isinstance(tensors, EffectiveTensors):
        tensors, moments = [tensors], [moments]
        partitions = [mesh.partition] if partitions is None else partitions
    if partitions is None or len(partitions) != len(tensors) or len(moments) != len(tensors):
        raise ValueError("one partition and one set of moments per tensor set is required")
    nc = tensors[0].n_continua
    n = nc * mesh.n_nodes
    K = np.zeros((n, n))
    b = np.zeros(n)
    for t, m, p in zip(tensors, moments, partitions):
        Hd = t.H**t.d
        for c in p.cells:
            B, dofs = _element_operator(mesh, c.center, nc)
            K[np.ix_(dofs, dofs)] += Hd * B.T @ t.gram[c.id] @ B
            b[dofs] += B.T @ m.moments[c.id, :B.shape[0]]
    K /= len(tensors)
    b /= len(tensors)
    K = 0.5 * (K + K.T)
    pinned = []
    if bc == "dirichlet":
        bnd = mesh.boundary_nodes()
        pinned.extend(int(i * mesh.n_nodes + v) for i in range(nc) for v in bnd)
    scale = np.abs(np.diag(K)).max(initial=0.0)
    unseen = np.nonzero(np.abs(np.diag(K)) <= 1e-14 * max(scale, 1e-300))[0]
    pinned = np.unique(np.concatenate([np.array(pinned, dtype=np.int64), unseen]))
    return MacroSystem(K, b, mesh, bc, nc, pinned)


@dataclass(eq=False)
class MacroSolution:
    """Nodal macro fields, shape (continua, coarse nodes), plus solver diagnostics."""

    U: np.ndarray
    mesh: CoarseMesh = field(repr=False)
    residual: float
    diagnostics: dict = field(default_factory=dict)
    reconstruction: np.ndarray | None = field(default=None, repr=False)

    def field(self):
        return MacroField.from_nodal(self.mesh, self.U)


def solve_macro(system: MacroSystem, tol=1e-10):
    """Dense solve of the free block; singularity is reported, never masked.

    A numerically singular system (``σ_min ≤ 1e-12 σ_max``) is solved in the
    least-squares sense when the right-hand side is consistent, and the
    null-space dimension is recorded; otherwise :class:`SingularMacroSystem`
    is raised.
    """
    free = system.free
    A = system.matrix[np.ix_(free, free)]
    b = system.rhs[free]
    x = np.zeros(system.matrix.shape[0])
    diag = {"bc": system.bc, "pinned": int(system.pinned.size), "n_free": int(free.sum())}
    if A.shape[0]:
        sv = sla.svdvals(A)
        smax, smin = float(sv.max()), float(sv.min())
        diag.update(sigma_max=smax, sigma_min=smin)
        singular = smin <= 1e-12 * smax
        diag["null_dim"] = int(np.sum(sv <= 1e-12 * smax))
        diag["singular"] = bool(singular)
        if singular:
            sol, *_ = sla.lstsq(A, b, cond=1e-12)
        else:
            sol = sla.solve(A, b, assume_a="sym")
        x[free] = sol
    nb = np.linalg.norm(b)
    res = float(np.linalg.norm(A @ x[free] - b) / nb) if nb > 0 else float(np.linalg.norm(A @ x[free]))
    if A.shape[0] and diag["singular"] and res > max(tol, 1e-8):
        raise SingularMacroSystem(diag["sigma_min"], diag["sigma_max"])
    if res > tol:
        log.warning("macro residual %.3e exceeds tolerance %.1e", res, tol)
    diag["residual"] = res
    U = x.reshape(system.n_continua, system.mesh.n_nodes)
    return MacroSolution(U, system.mesh, res, diag)


def reconstruct(solution: MacroSolution, sets, p_H: ShiftedPartition):
    """Broken fine-scale reconstruction of a macro solution (corner array)."""
    solution.reconstruction = downscale_linear(solution.field(), sets, p_H)
    return solution.reconstruction


def averaging_identity_sides(U: MacroField, V: MacroField, tensors: EffectiveTensors, sets,
                             field: CoefficientField, p_H: ShiftedPartition):
    """Both sides of the fixed-shift averaging identity.

    Left: ``Σ_K H^d (tensor form at the center)``. Right: the broken energy
    form of the two reconstructions, assembled per cell from a sparse
    stiffness matrix on the cell's nodes, independent of the Gram path.
    Also returns the broken energy norms of both reconstructions.
    """
    grid = p_H.grid
    nf = tensors.gram.shape[1]
    fu = U.sample(p_H)[:, :nf]
    fv = V.sample(p_H)[:, :nf]
    Hd = tensors.H**tensors.d
    lhs = float(Hd * tensors.quadratic_form(fu, fv).sum())
    rhs = uu = vv = 0.0
    for s in sets:
        cell = p_H.cells[s.cell_id]
        A = fem.assemble_stiffness(grid, field, cell.box)
        nfs = s.n_features
        wu = cell_restricted_nodal(s, cell.box, np.pad(fu[s.cell_id], (0, nfs - nf)))
        wv = cell_restricted_nodal(s, cell.box, np.pad(fv[s.cell_id], (0, nfs - nf)))
        Awv = A @ wv
        rhs += wu @ Awv
        uu += wu @ (A @ wu)
        vv += wv @ Awv
    return lhs, float(rhs), float(np.sqrt(max(uu, 0.0))), float(np.sqrt(max(vv, 0.0)))


def verify_averaging_identity(pairs, tensors, sets, field, p_H):
    """Max over ``(U, V)`` pairs of ``|lhs − rhs| / (‖P U‖_a ‖P V‖_a)``.

    Scaling by the norm product (Cauchy–Schwarz bound of either side) keeps
    the measure meaningful for pairs whose form value is near zero.
    """
    worst = 0.0
    for U, V in pairs:
        lhs, rhs, nu, nv = averaging_identity_sides(U, V, tensors, sets, field, p_H)
        scale = nu * nv
        if scale == 0.0:
            worst = max(worst, abs(lhs - rhs))
        else:
            worst = max(worst, abs(lhs - rhs) / scale)
    return float(worst)


_TENSOR_FILES = {"alpha": ("i", "j", "k", "l"), "beta": ("i", "j", "k"), "gamma": ("i", "j")}


def write_tensors_csv(tensors: EffectiveTensors, directory):
    """``alpha.csv``, ``beta.csv``, ``gamma.csv``: one row per cell and index tuple."""
    os.makedirs(directory, exist_ok=True)
    paths = {}
    for name, idx in _TENSOR_FILES.items():
        arr = getattr(tensors, name)
        path = os.path.join(directory, f"{name}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "center_x", "center_y", *idx, name])
            for c in range(arr.shape[0]):
                cx, cy = tensors.centers[c]
                for tup in np.ndindex(arr.shape[1:]):
                    w.writerow([c, f"{cx:.17g}", f"{cy:.17g}", *tup, f"{arr[(c, *tup)]:.17g}"])
        paths[name] = path
    return paths


def read_tensors_csv(directory, H):
    """Inverse of :func:`write_tensors_csv`; the Gram matrices are rebuilt as stored."""
    blocks, centers = {}, {}
    for name, idx in _TENSOR_FILES.items():
        with open(os.path.join(directory, f"{name}.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{name}.csv is empty")
        shape = [max(int(r["cell"]) for r in rows) + 1]
        shape += [max(int(r[k]) for r in rows) + 1 for k in idx]
        arr = np.zeros(shape)
        for r in rows:
            c = int(r["cell"])
            arr[(c, *(int(r[k]) for k in idx))] = float(r[name])
            centers[c] = (float(r["center_x"]), float(r["center_y"]))
        blocks[name] = arr
    cs = np.array([centers[c] for c in sorted(centers)])
    return EffectiveTensors.from_blocks(blocks["alpha"], blocks["beta"], blocks["gamma"], cs, H)
