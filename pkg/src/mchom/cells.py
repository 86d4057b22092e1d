"""Auxiliary indicator basis and the constrained cell problems built on it.

Every cell problem here minimizes the patch energy ``∫ κ|∇u|²`` over Q1
functions vanishing on the patch boundary, subject to prescribed averages on
each continuum piece ``K_j ∩ Ω_i`` of the H_eps subcells inside the patch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .field import MAGIC, CoefficientField, ContinuumMap
from .mesh import FineGrid, OversampledPatch, ShiftedPartition, oversample

__all__ = [
    "AuxiliaryBasis",
    "CellSolutionSet",
    "LocalizedBasisSet",
    "EmptyContinuumError",
    "CellCache",
    "build_auxiliary",
    "default_k_layers",
    "patch_system",
    "solve_constant_cell",
    "solve_linear_cell",
    "solve_cell_set",
    "solve_all_cell_sets",
    "solve_localized_nlmc_basis",
    "build_nlmc_basis",
    "decay_profile",
    "feature_index",
]

log = logging.getLogger(__name__)


class EmptyContinuumError(ValueError):
    pass


def default_k_layers(h_eps):
    """``max(2, ceil(log2(1/H_eps)))`` oversampling layers."""
    return max(2, math.ceil(math.log2(1.0 / h_eps) - 1e-12))


def feature_index(i, k=None, d=2):
    """Column of ``η_i`` (``k=None``) or ``η_i^(k)`` in a cell solution matrix."""
    return i * (1 + d) + (0 if k is None else 1 + k)


class AuxiliaryBasis:
    """Indicator functions of the nonempty pieces ``K_j ∩ Ω_i`` of a partition.

    Pieces are numbered subcell-major, continuum-minor. ``piece_of[j, i]`` is
    ``-1`` for empty pieces.
    """

    def __init__(self, p: ShiftedPartition, cmap: ContinuumMap):
        if cmap.grid != p.grid:
            raise ValueError("partition and continuum map use different grids")
        self.partition = p
        self.cmap = cmap
        grid = p.grid
        counts = np.zeros((len(p), 2), dtype=np.int64)
        labels = cmap.labels.astype(np.int64)
        np.add.at(counts, (p.cell_of_fine, labels), 1)
        nonempty = counts > 0
        self.piece_of = np.full((len(p), 2), -1, dtype=np.int64)
        self.piece_of[nonempty] = np.arange(int(nonempty.sum()))
        self.subcell, self.continuum = np.nonzero(nonempty)
        self.measure = counts[nonempty] * grid.h**grid.d
        self.empty = ~nonempty
        self.fine_piece = self.piece_of[p.cell_of_fine, labels]

    def __len__(self):
        return len(self.subcell)

    @property
    def grid(self) -> FineGrid:
        return self.partition.grid

    def centers(self):
        return self.partition.index_set[self.subcell]

    def pieces_in(self, subcells):
        pieces = self.piece_of[np.asarray(subcells)].ravel()
        return pieces[pieces >= 0]

    def pairing_matrix(self, pieces, box=None):
        """Rows ``(ψ_piece, v_node)`` over the nodes of ``box`` for the given pieces."""
        grid = self.grid
        box = grid.full_box if box is None else box
        pieces = np.asarray(pieces, dtype=np.int64)
        row_of = np.full(len(self), -1, dtype=np.int64)
        row_of[pieces] = np.arange(pieces.size)
        cells = grid.box_cells(box)
        rows = row_of[self.fine_piece[cells]]
        keep = rows >= 0
        cells, rows = cells[keep], rows[keep]
        (x0, x1), (y0, y1) = box
        iy, ix = np.divmod(cells, grid.n)
        w = x1 - x0 + 1
        sw = (iy - y0) * w + (ix - x0)
        corners = np.stack([sw, sw + 1, sw + w + 1, sw + w], axis=1)
        n_nodes = (x1 - x0 + 1) * (y1 - y0 + 1)
        quarter = grid.h**2 / 4.0
        C = sp.coo_matrix(
            (np.full(corners.size, quarter), (np.repeat(rows, 4), corners.ravel())),
            shape=(pieces.size, n_nodes),
        )
        return C.tocsr()

    def global_matrix(self):
        return self.pairing_matrix(np.arange(len(self)))


def build_auxiliary(p: ShiftedPartition, cmap: ContinuumMap) -> AuxiliaryBasis:
    return AuxiliaryBasis(p, cmap)


def patch_system(patch: OversampledPatch, aux: AuxiliaryBasis, field: CoefficientField):
    """Free-dof stiffness, pairing rows and piece ids of a patch problem."""
    grid = aux.grid
    if patch.sub is not aux.partition and patch.sub.key() != aux.partition.key():
        raise ValueError("patch and auxiliary basis use different partitions")
    A = fem.assemble_stiffness(grid, field, patch.box)
    free = ~patch.boundary_mask
    pieces = aux.pieces_in(patch.subcells)
    C = aux.pairing_matrix(pieces, patch.box)
    return A[free][:, free], C[:, free], pieces, free


def _solve_on_patch(patch, aux, field, targets, pieces=None, system=None, tol=1e-10, method="auto",
                    inner="direct"):
    """Solve the patch problem for each column of ``targets`` and embed it in the patch nodes."""
    A, C, pieces_, free = system if system is not None else patch_system(patch, aux, field)
    cons = fem.ConstraintSet(C, targets, [(int(aux.subcell[q]), int(aux.continuum[q])) for q in pieces_])
    u, lam = fem.solve_constrained(A, cons, None, tol=tol, method=method, inner=inner)
    u = np.asarray(u).reshape(A.shape[0], -1)
    out = np.zeros((patch.n_nodes, u.shape[1]))
    out[free] = u
    resid = C @ u - cons.g.reshape(C.shape[0], -1)
    scale = max(np.abs(cons.g).max(), 1.0) if cons.g.size else 1.0
    return out, float(np.abs(resid).max() / scale) if resid.size else 0.0


def _cell_targets(patch, aux, pieces, center, continua, d=2):
    """Target matrix for ``η_i`` and ``η_i^(k)`` of the requested continua."""
    offsets = aux.centers()[pieces] - np.asarray(center)[None, :]
    meas = aux.measure[pieces]
    cont = aux.continuum[pieces]
    G = np.zeros((pieces.size, 2 * (1 + d)))
    for i in continua:
        on = (cont == i).astype(float) * meas
        G[:, feature_index(i, None, d)] = on
        for k in range(d):
            G[:, feature_index(i, k, d)] = on * offsets[:, k]
    return G


def _require_continuum(aux, pieces, i):
    if not np.any(aux.continuum[pieces] == i):
        raise EmptyContinuumError(f"continuum {i} is empty on every subcell of the patch")


def solve_constant_cell(patch, aux, field, i, center=None, **solver):
    """Constant-representing solution ``η_i`` on ``patch`` (patch node values)."""
    system = patch_system(patch, aux, field)
    _require_continuum(aux, system[2], i)
    center = _patch_center(patch) if center is None else center
    G = _cell_targets(patch, aux, system[2], center, [i])[:, [feature_index(i)]]
    return _solve_on_patch(patch, aux, field, G, system=system, **solver)[0][:, 0]


def solve_linear_cell(patch, aux, field, i, direction, center=None, **solver):
    """Linear-representing solution ``η_i^(direction)`` on ``patch``."""
    system = patch_system(patch, aux, field)
    _require_continuum(aux, system[2], i)
    center = _patch_center(patch) if center is None else center
    G = _cell_targets(patch, aux, system[2], center, [i])[:, [feature_index(i, direction)]]
    return _solve_on_patch(patch, aux, field, G, system=system, **solver)[0][:, 0]


def _patch_center(patch):
    h = patch.grid.h
    return tuple(0.5 * (lo + hi) * h for lo, hi in patch.target_box)


@dataclass(eq=False)
class CellSolutionSet:
    """Cell solutions ``η_i``, ``η_i^(k)`` of one coarse cell.

    ``values`` has one column per feature, ordered ``η_0, η_0^(1), η_0^(2),
    η_1, η_1^(1), η_1^(2)``; columns of continua absent from the patch are zero
    and flagged in ``present``.
    """

    cell_id: int
    center: tuple
    patch: OversampledPatch = field(repr=False)
    values: np.ndarray = field(repr=False)
    present: tuple = (True, True)
    constraint_residual: float = 0.0

    @property
    def n_features(self):
        return self.values.shape[1]

    def on_cells(self, cells):
        """Corner values of every feature on global fine ``cells``: (cells, 4, features)."""
        return self.values[self.patch.local_corners(cells)]


def solve_cell_set(p_H: ShiftedPartition, cell_id, aux: AuxiliaryBasis, field: CoefficientField,
                   k_layers, center=None, window=None, n_continua=None, **solver):
    """All cell solutions of one coarse cell of ``p_H``.

    ``window`` (an aligned box inside the cell) switches to the RVE variant:
    the patch is grown around the window instead of the whole cell. The
    linear targets are offsets from ``center``, by default the nominal center
    of the cell, or the center of ``window`` when one is given.
    """
    grid = aux.grid
    cell = p_H.cells[cell_id]
    if window is None:
        patch = oversample(p_H, cell_id, k_layers, sub=aux.partition)
        if center is None:
            center = cell.center
    else:
        if not all(clo <= lo < hi <= chi for (clo, chi), (lo, hi) in zip(cell.box, window)):
            raise ValueError("RVE window must lie inside the coarse cell")
        sub = aux.partition
        try:
            sub.cells_in_box(window)
        except ValueError:
            raise ValueError("RVE window is not aligned with the H_eps partition") from None
        patch = _window_patch(sub, window, k_layers, cell_id)
        if center is None:
            center = tuple(0.5 * (lo + hi) * grid.h for lo, hi in window)
    system = patch_system(patch, aux, field)
    pieces = system[2]
    nc = aux.cmap.n_continua if n_continua is None else n_continua
    present = tuple(bool(np.any(aux.continuum[pieces] == i)) for i in range(nc))
    continua = [i for i in range(nc) if present[i]]
    G = _cell_targets(patch, aux, pieces, center, continua)[:, : nc * (1 + grid.d)]
    values, resid = _solve_on_patch(patch, aux, field, G, system=system, **solver)
    return CellSolutionSet(cell_id, tuple(center), patch, values, present, resid)


def _window_patch(sub, window, k_layers, target_id):
    ranges = []
    for axis, (lo, hi) in enumerate(window):
        first, last = sub.axis_range_in(axis, lo, hi)
        ranges.append((max(first - k_layers, 0), min(last + k_layers, sub.shape[axis] - 1)))
    box = tuple((sub.axes[a][r0][0], sub.axes[a][r1][1]) for a, (r0, r1) in enumerate(ranges))
    members = sub.cells_in_box(box)
    return OversampledPatch(target_id, k_layers, box, tuple(window), members, sub)


def solve_all_cell_sets(p_H, aux, field, k_layers, threads=1, cache=None, windows=None, **solver):
    """Cell solution sets for every coarse cell, optionally cached and threaded.

    Results do not depend on ``threads`` or on completion order.
    """
    def one(cid):
        window = None if windows is None else windows[cid]
        if cache is not None:
            key = cache.key(field, aux, p_H, cid, k_layers, window)
            hit = cache.load(key, p_H, cid, aux, k_layers, window)
            if hit is not None:
                return hit
        s = solve_cell_set(p_H, cid, aux, field, k_layers, window=window, **solver)
        if cache is not None:
            cache.store(key, s)
        return s

    ids = range(len(p_H))
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, ids))
    return [one(c) for c in ids]


@dataclass(eq=False)
class LocalizedBasisSet:
    """Localized NLMC basis: column ``q`` of ``matrix`` is ``φ`` of auxiliary piece ``q``."""

    aux: AuxiliaryBasis = field(repr=False)
    k_layers: int
    matrix: sp.csc_matrix = field(repr=False)
    patches: list = field(repr=False, default_factory=list)
    constraint_residual: float = 0.0

    def function(self, piece):
        return self.matrix[:, piece].toarray().ravel()


def solve_localized_nlmc_basis(aux: AuxiliaryBasis, field: CoefficientField, subcell, k_layers, **solver):
    """``φ_{l,i}`` for every nonempty continuum ``i`` of subcell ``l``.

    Returns ``(patch, values, pieces, residual)`` with one patch-node column
    per returned piece.
    """
    targets = aux.piece_of[subcell]
    targets = targets[targets >= 0]
    if targets.size == 0:
        raise EmptyContinuumError(f"subcell {subcell} has no nonempty continuum")
    patch = oversample(aux.partition, subcell, k_layers)
    system = patch_system(patch, aux, field)
    pieces = system[2]
    G = (pieces[:, None] == targets[None, :]) * aux.measure[pieces][:, None]
    values, resid = _solve_on_patch(patch, aux, field, G.astype(float), system=system, **solver)
    return patch, values, targets, resid


def build_nlmc_basis(aux: AuxiliaryBasis, field: CoefficientField, k_layers, threads=1, **solver):
    """Assemble all localized ``φ`` into a sparse (nodes x pieces) matrix."""
    grid = aux.grid

    def one(subcell):
        return solve_localized_nlmc_basis(aux, field, subcell, k_layers, **solver)

    subcells = [j for j in range(len(aux.partition)) if np.any(aux.piece_of[j] >= 0)]
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, subcells))
    else:
        results = [one(j) for j in subcells]
    rows, cols, vals, patches, worst = [], [], [], [], 0.0
    for patch, values, targets, resid in results:
        nodes = patch.node_ids
        for c, q in enumerate(targets):
            nz = np.nonzero(values[:, c])[0]
            rows.append(nodes[nz])
            cols.append(np.full(nz.size, q))
            vals.append(values[nz, c])
        patches.append(patch)
        worst = max(worst, resid)
    matrix = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n_nodes, len(aux)),
    )
    return LocalizedBasisSet(aux, k_layers, matrix, patches, worst)


def decay_profile(values, patch: OversampledPatch, field: CoefficientField, rings=None):
    """Energy of a patch function on each ring of subcells around the target.

    Ring ``r`` holds the subcells at Chebyshev distance ``r`` (in subcell
    index units) from the target box. Rings partition the patch, so the ring
    energies add up to the total patch energy.
    """
    sub = patch.sub
    grid = patch.grid
    ranges = [sub.axis_range_in(a, lo, hi) for a, (lo, hi) in enumerate(patch.target_box)]
    n_rings = patch.k_layers + 1 if rings is None else rings
    out = np.zeros(n_rings)
    nodes_local = np.asarray(values, dtype=float)
    for sid in patch.subcells:
        tx, ty = sub.cells[sid].index
        dist = max(
            max(ranges[0][0] - tx, tx - ranges[0][1], 0),
            max(ranges[1][0] - ty, ty - ranges[1][1], 0),
        )
        if dist >= n_rings:
            continue
        cells = sub.cells[sid].fine_cells
        cu = nodes_local[patch.local_corners(cells)]
        out[dist] += np.einsum("c,ca,ab,cb->", field.values[cells], cu, fem.STIFFNESS_LOCAL, cu)
    return out


_PATCH_HEADER = struct.Struct("<4sBBHI4II")
KIND_PATCH = 3


class CellCache:
    """Directory of cell-solution payloads plus a JSON manifest.

    Each payload uses the field binary header with kind 3, followed by the
    patch box and column count, then the patch-node values column-major.
    """

    def __init__(self, directory):
        self.directory = os.fspath(directory)
        os.makedirs(self.directory, exist_ok=True)
        self.manifest_path = os.path.join(self.directory, "manifest.json")
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as fh:
                self.manifest = json.load(fh)
        else:
            self.manifest = {}

    @staticmethod
    def key(field, aux, p_H, cell_id, k_layers, window=None):
        parts = [field.digest(), aux.cmap.digest(), repr(aux.partition.key()), repr(p_H.key()),
                 str(cell_id), str(k_layers), repr(window)]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:32]

    def load(self, key, p_H, cell_id, aux, k_layers, window=None):
        entry = self.manifest.get(key)
        if entry is None:
            with self._lock:
                self.misses += 1
            return None
        path = os.path.join(self.directory, entry["file"])
        with open(path, "rb") as fh:
            raw = fh.read()
        magic, _, kind, _, n, x0, x1, y0, y1, ncols = _PATCH_HEADER.unpack_from(raw)
        if magic != MAGIC or kind != KIND_PATCH:
            raise ValueError(f"{path}: not a cell-solution payload")
        values = np.frombuffer(raw, dtype="<f8", offset=_PATCH_HEADER.size)
        values = values.reshape(ncols, -1).T.copy()
        if window is None:
            patch = oversample(p_H, cell_id, k_layers, sub=aux.partition)
        else:
            patch = _window_patch(aux.partition, window, k_layers, cell_id)
        if patch.box != ((x0, x1), (y0, y1)):
            raise ValueError(f"{path}: cached patch does not match the requested cell")
        with self._lock:
            self.hits += 1
        return CellSolutionSet(cell_id, tuple(entry["center"]), patch, values,
                               tuple(entry["present"]), entry["constraint_residual"])

    def store(self, key, s: CellSolutionSet):
        (x0, x1), (y0, y1) = s.patch.box
        fname = f"{key}.bin"
        payload = _PATCH_HEADER.pack(MAGIC, 1, KIND_PATCH, 2, s.patch.grid.n, x0, x1, y0, y1,
                                     s.values.shape[1])
        payload += np.ascontiguousarray(s.values.T, dtype="<f8").tobytes()
        with open(os.path.join(self.directory, fname), "wb") as fh:
            fh.write(payload)
        with self._lock:
            self.manifest[key] = {
                "file": fname,
                "cell": int(s.cell_id),
                "k_layers": int(s.patch.k_layers),
                "center": list(s.center),
                "present": list(s.present),
                "constraint_residual": s.constraint_residual,
                "created": time.time(),
            }
            tmp = self.manifest_path + ".tmp"
            with open(tmp, "w") as fh:
                json.dump(self.manifest, fh, indent=1, sort_keys=True)
            os.replace(tmp, self.manifest_path)
