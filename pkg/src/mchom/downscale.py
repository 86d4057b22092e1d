"""Projections onto the auxiliary space and the two downscaling operators.

Macro data enter the cell-solution reconstruction as a per-coarse-cell
*feature vector* ``[U_0, ∂_1U_0, ∂_2U_0, U_1, ∂_1U_1, ∂_2U_1]`` sampled at the
cell's nominal center, matching the column order of the cell solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem
from .cells import AuxiliaryBasis, CellSolutionSet, LocalizedBasisSet
from .mesh import FineGrid, ShiftedPartition

__all__ = [
    "MacroAverages",
    "CoarseMesh",
    "MacroField",
    "project_continuum_average",
    "downscale_nlmc",
    "downscale_linear",
    "cell_restricted_nodal",
]


@dataclass(eq=False)
class MacroAverages:
    """Average of a function on every nonempty piece of an auxiliary basis."""

    aux: AuxiliaryBasis = field(repr=False)
    values: np.ndarray

    def by_continuum(self, i):
        """Per-subcell averages of continuum ``i``; NaN on empty pieces."""
        out = np.full(len(self.aux.partition), np.nan)
        q = self.aux.piece_of[:, i]
        out[q >= 0] = self.values[q[q >= 0]]
        return out

    @property
    def empty(self):
        return self.aux.empty

    def __add__(self, other):
        return MacroAverages(self.aux, self.values + other.values)

    def __mul__(self, c):
        return MacroAverages(self.aux, self.values * c)

    __rmul__ = __mul__


def project_continuum_average(u, aux: AuxiliaryBasis, i=None):
    """``Π_i u``: averages of ``u`` over every ``K_j ∩ Ω_i``.

    ``u`` is a global nodal vector or a corner array; integration is exact
    for the piecewise bilinear function. With ``i`` given, returns the
    per-subcell array of that continuum (NaN where empty).
    """
    grid = aux.grid
    cu = fem.corner_values(u, grid)
    cell_int = cu.sum(axis=1) * grid.h**2 / 4.0
    sums = np.bincount(aux.fine_piece, weights=cell_int, minlength=len(aux))
    avgs = MacroAverages(aux, sums / aux.measure)
    return avgs if i is None else avgs.by_continuum(i)


def downscale_nlmc(avgs: MacroAverages, basis: LocalizedBasisSet):
    """``Σ U_{l,i} φ_{l,i}`` as a global nodal vector."""
    if avgs.aux is not basis.aux and len(avgs.aux) != len(basis.aux):
        raise ValueError("averages and basis belong to different auxiliary spaces")
    missing = np.asarray(basis.matrix.getnnz(axis=0) == 0) & (avgs.values != 0)
    if np.any(missing):
        raise ValueError(f"no basis function for piece {int(np.nonzero(missing)[0][0])}")
    return basis.matrix @ avgs.values


class CoarseMesh:
    """Q1 macro mesh whose elements are the cells of a partition."""

    def __init__(self, p: ShiftedPartition):
        self.partition = p
        h = p.grid.h
        self.coords = tuple(
            np.array([iv[0] for iv in ivs] + [ivs[-1][1]]) * h for ivs in p.axes
        )
        self.shape = tuple(len(c) for c in self.coords)
        self.n_nodes = int(np.prod(self.shape))

    def node_id(self, ix, iy):
        return iy * self.shape[0] + ix

    def element_nodes(self, cell_id):
        tx, ty = self.partition.cells[cell_id].index
        sw = self.node_id(tx, ty)
        return np.array([sw, sw + 1, sw + self.shape[0] + 1, sw + self.shape[0]])

    def boundary_nodes(self):
        nx, ny = self.shape
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
        on = (ix == 0) | (ix == nx - 1) | (iy == 0) | (iy == ny - 1)
        return self.node_id(ix[on], iy[on])

    def node_coords(self):
        x, y = np.meshgrid(*self.coords)
        return np.column_stack([x.ravel(), y.ravel()])

    def locate(self, point):
        """Element index ``(tx, ty)`` containing ``point`` (closed on the far side)."""
        idx = []
        for a, c in enumerate(self.coords):
            t = int(np.searchsorted(c, point[a], side="right")) - 1
            idx.append(min(max(t, 0), len(c) - 2))
        return tuple(idx)

    def eval_matrix(self, point):
        """``(nodes, E)`` with ``E @ U[nodes] = [U, ∂_xU, ∂_yU]`` at ``point``."""
        tx, ty = self.locate(point)
        x0, x1 = self.coords[0][tx], self.coords[0][tx + 1]
        y0, y1 = self.coords[1][ty], self.coords[1][ty + 1]
        hx, hy = x1 - x0, y1 - y0
        s, t = (point[0] - x0) / hx, (point[1] - y0) / hy
        sw = self.node_id(tx, ty)
        nodes = np.array([sw, sw + 1, sw + self.shape[0] + 1, sw + self.shape[0]])
        E = np.array([
            [(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t],
            [-(1 - t) / hx, (1 - t) / hx, t / hx, -t / hx],
            [-(1 - s) / hy, -s / hy, s / hy, (1 - s) / hy],
        ])
        return nodes, E


class MacroField:
    """Macro continuum fields ``(U_0, U_1)`` with a rule for center sampling.

    Build one with :meth:`from_nodal` (bilinear data on a :class:`CoarseMesh`),
    :meth:`from_functions` (closed-form values and gradients) or
    :meth:`from_cell_data` (explicit per-cell values and gradients).
    """

    def __init__(self, sampler, n_continua, description=""):
        self._sampler = sampler
        self.n_continua = n_continua
        self.description = description

    def __repr__(self):
        return f"MacroField({self.description}, n_continua={self.n_continua})"

    def sample(self, p: ShiftedPartition):
        """Feature matrix (cells, n_continua * 3) at the nominal cell centers."""
        return self._sampler(p)

    @classmethod
    def from_nodal(cls, mesh: CoarseMesh, U):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if U.shape[1] != mesh.n_nodes:
            raise ValueError(f"expected {mesh.n_nodes} nodal values per continuum")

        def sampler(p):
            out = np.zeros((len(p), 3 * U.shape[0]))
            for c in p.cells:
                nodes, E = mesh.eval_matrix(c.center)
                for i in range(U.shape[0]):
                    out[c.id, 3 * i:3 * i + 3] = E @ U[i, nodes]
            return out

        f = cls(sampler, U.shape[0], "nodal")
        f.mesh, f.nodal = mesh, U
        return f

    @classmethod
    def from_functions(cls, values, gradients, mode="center", h_eps=None):
        """``values[i](x, y)`` and ``gradients[i](x, y) -> (gx, gy)`` per continuum.

        ``mode='average'`` replaces point samples by means over the box of
        width ``h_eps`` around each center (midpoint rule on a 16x16 lattice).
        """
        if mode not in ("center", "average"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        if mode == "average" and h_eps is None:
            raise ValueError("average sampling needs h_eps")

        def at(fn, x, y):
            if mode == "center":
                return np.asarray(fn(x, y), dtype=float)
            t = (np.arange(16) + 0.5) / 16 - 0.5
            sx, sy = np.meshgrid(x + t * h_eps, y + t * h_eps)
            return np.mean(np.asarray(fn(sx.ravel(), sy.ravel()), dtype=float), axis=-1)

        def sampler(p):
            out = np.zeros((len(p), 3 * len(values)))
            for c in p.cells:
                x, y = c.center
                for i, (fv, fg) in enumerate(zip(values, gradients)):
                    out[c.id, 3 * i] = at(fv, x, y)
                    out[c.id, 3 * i + 1:3 * i + 3] = at(fg, x, y)
            return out

        return cls(sampler, len(values), f"functions/{mode}")

    @classmethod
    def from_cell_data(cls, p: ShiftedPartition, values, gradients):
        values = np.asarray(values, dtype=float)
        gradients = np.asarray(gradients, dtype=float)
        nc = values.shape[1]
        feats = np.concatenate(
            [np.concatenate([values[:, i:i + 1], gradients[:, i, :]], axis=1) for i in range(nc)],
            axis=1,
        )

        def sampler(q):
            if q.key() != p.key():
                raise ValueError("cell data were given on a different partition")
            return feats

        return cls(sampler, nc, "cells")


def _pad_features(feats, nfeat):
    if feats.shape[1] < nfeat:
        feats = np.pad(feats, ((0, 0), (0, nfeat - feats.shape[1])))
    return feats[:, :nfeat]


def downscale_linear(U: MacroField, sets, p_H: ShiftedPartition):
    """Broken reconstruction ``P(U)`` as a corner array over the fine grid.

    On each coarse cell ``K`` the cell solutions of ``K`` are combined with
    the sampled values and gradients; nothing is enforced across faces.
    """
    grid: FineGrid = p_H.grid
    if len(sets) != len(p_H):
        raise ValueError(f"need cell solutions for all {len(p_H)} coarse cells, got {len(sets)}")
    feats = U.sample(p_H)
    out = np.zeros((grid.n_cells, 4))
    for s in sets:
        if s is None:
            raise ValueError("missing cell solutions")
        cells = p_H.cells[s.cell_id].fine_cells
        c = _pad_features(feats[s.cell_id:s.cell_id + 1], s.n_features)[0]
        out[cells] = s.on_cells(cells) @ c
    return out


def cell_restricted_nodal(s: CellSolutionSet, box, coeffs):
    """Nodal values on ``box`` nodes of the cell-solution combination ``coeffs``."""
    grid = s.patch.grid
    nodes = grid.box_nodes(box)
    (px0, px1), (py0, _) = s.patch.box
    iy, ix = np.divmod(nodes, grid.n + 1)
    local = (iy - py0) * (px1 - px0 + 1) + (ix - px0)
    return s.values[local] @ coeffs
