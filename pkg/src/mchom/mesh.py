"""Structured fine grid on the unit square and shifted rectangular partitions.

All geometry is kept in integer fine-cell units so that tiling, merging and
oversampling are exact. Boxes are tuples of ``(lo, hi)`` pairs, one per axis,
counted in fine cells.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FineGrid",
    "CoarseCell",
    "ShiftedPartition",
    "OversampledPatch",
    "build_fine_grid",
    "build_shifted_partition",
    "oversample",
    "write_partition_csv",
]

_SNAP_TOL = 1e-9


def _snap(value, n, what):
    """Return ``value * n`` as an int, or raise if it is not a grid multiple."""
    scaled = float(value) * n
    rounded = int(round(scaled))
    if abs(scaled - rounded) > _SNAP_TOL * max(1.0, abs(scaled)):
        raise ValueError(f"{what}={value!r} is not a multiple of the fine cell width 1/{n}")
    return rounded


class FineGrid:
    """Uniform grid of ``n_per_side**d`` square cells on ``[0, 1]^d``.

    Cells and nodes are numbered row-major with the x index running fastest.
    Only ``d = 2`` is supported by the finite element layer.
    """

    def __init__(self, n_per_side: int, d: int = 2):
        if int(n_per_side) != n_per_side or n_per_side < 2:
            raise ValueError(f"n_per_side must be an integer >= 2, got {n_per_side!r}")
        if d != 2:
            raise NotImplementedError("only d = 2 grids are supported")
        self.n = int(n_per_side)
        self.d = d
        self.h = 1.0 / self.n

    def __repr__(self):
        return f"FineGrid(n_per_side={self.n})"

    def __eq__(self, other):
        return isinstance(other, FineGrid) and other.n == self.n and other.d == self.d

    def __hash__(self):
        return hash((self.n, self.d))

    @property
    def n_per_side(self):
        return self.n

    @property
    def n_cells(self):
        return self.n**self.d

    @property
    def n_nodes(self):
        return (self.n + 1) ** self.d

    @property
    def full_box(self):
        return tuple((0, self.n) for _ in range(self.d))

    def cell_id(self, ix, iy):
        return np.asarray(iy) * self.n + np.asarray(ix)

    def node_id(self, ix, iy):
        return np.asarray(iy) * (self.n + 1) + np.asarray(ix)

    def cell_corners(self, cells=None):
        """Corner node ids of ``cells`` ordered SW, SE, NE, NW; shape (len, 4)."""
        if cells is None:
            cells = np.arange(self.n_cells)
        cells = np.asarray(cells)
        iy, ix = np.divmod(cells, self.n)
        sw = self.node_id(ix, iy)
        return np.stack([sw, sw + 1, sw + self.n + 2, sw + self.n + 1], axis=-1)

    def box_cells(self, box):
        (x0, x1), (y0, y1) = box
        ix, iy = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        return self.cell_id(ix, iy).ravel()

    def box_nodes(self, box):
        (x0, x1), (y0, y1) = box
        ix, iy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        return self.node_id(ix, iy).ravel()

    def box_boundary_mask(self, box):
        """Mask over ``box_nodes(box)`` marking nodes on the box boundary."""
        (x0, x1), (y0, y1) = box
        mask = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return mask.ravel()

    def boundary_nodes(self):
        return self.box_nodes(self.full_box)[self.box_boundary_mask(self.full_box)]

    def node_coords(self):
        t = np.linspace(0.0, 1.0, self.n + 1)
        x, y = np.meshgrid(t, t)
        return np.column_stack([x.ravel(), y.ravel()])

    def cell_centers(self):
        t = (np.arange(self.n) + 0.5) * self.h
        x, y = np.meshgrid(t, t)
        return np.column_stack([x.ravel(), y.ravel()])


def build_fine_grid(n_per_side: int) -> FineGrid:
    return FineGrid(n_per_side)


@dataclass(frozen=True, eq=False)
class CoarseCell:
    """One cell of a shifted partition.

    ``center`` is the nominal (unclipped) center ``x_l``; after merging a
    boundary sliver the surviving cell keeps its own nominal center.
    """

    id: int
    index: tuple
    center: tuple
    box: tuple
    fine_cells: np.ndarray = field(repr=False)
    continuum_cells: tuple | None = field(default=None, repr=False)

    @property
    def n_fine(self):
        return len(self.fine_cells)

    def extent(self):
        return tuple(hi - lo for lo, hi in self.box)


def _axis_intervals(n, m, s):
    """Intervals ``(lo, hi, doubled_center)`` of one axis after merging."""
    out = []
    t = -1 if s > 0 else 0
    while s + t * m < n:
        lo = s + t * m
        out.append([max(lo, 0), min(lo + m, n), 2 * lo + m])
        t += 1

    def deficient(iv):
        lo, hi, c2 = iv
        return c2 < 0 or c2 > 2 * n or 4 * (hi - lo) < m

    while len(out) > 1:
        if deficient(out[0]):
            out[1][0] = out[0][0]
            del out[0]
            continue
        if deficient(out[-1]):
            out[-2][1] = out[-1][1]
            del out[-1]
            continue
        break
    return [tuple(iv) for iv in out]


class ShiftedPartition:
    """Rectangular partition of mesh size ``scale`` shifted by ``z``.

    Nominal cells are ``z + [t, t+1) * scale`` clipped to the domain. A nominal
    cell whose center lies outside the closed domain, or whose clipped extent
    along an axis is below ``scale / 4``, is merged into its neighbour along
    that axis. Since the rule acts per axis the result is a tensor product of
    1D interval lists.
    """

    def __init__(self, grid: FineGrid, scale, z=None, continuum_map=None):
        n = grid.n
        if z is None:
            z = (0.0,) * grid.d
        z = tuple(np.broadcast_to(np.asarray(z, dtype=float), (grid.d,)))
        m = _snap(scale, n, "scale")
        if m < 1 or m > n:
            raise ValueError(f"scale={scale!r} must lie in [1/{n}, 1]")
        shift = tuple(_snap(zc, n, "shift") for zc in z)
        if any(s < 0 or s >= m for s in shift):
            raise ValueError(f"shift {z!r} must lie in [0, scale)^d")
        self.grid = grid
        self.m = m
        self.shift = shift
        self.scale = m / n
        self.z = tuple(s / n for s in shift)
        self.axes = tuple(_axis_intervals(n, m, s) for s in shift)
        self.shape = tuple(len(a) for a in self.axes)

        labels = None
        if continuum_map is not None:
            if continuum_map.grid != grid:
                raise ValueError("continuum map lives on a different grid")
            labels = continuum_map.labels

        cells = []
        cell_of_fine = np.empty(grid.n_cells, dtype=np.int64)
        # x index runs fastest, matching fine-cell numbering
        for cid, (ty, tx) in enumerate(itertools.product(range(self.shape[1]), range(self.shape[0]))):
            ivx, ivy = self.axes[0][tx], self.axes[1][ty]
            box = ((ivx[0], ivx[1]), (ivy[0], ivy[1]))
            fine = grid.box_cells(box)
            cell_of_fine[fine] = cid
            center = (ivx[2] / (2 * n), ivy[2] / (2 * n))
            per = None
            if labels is not None:
                per = tuple(fine[labels[fine] == i] for i in range(2))
            cells.append(CoarseCell(cid, (tx, ty), center, box, fine, per))
        self.cells = cells
        self.cell_of_fine = cell_of_fine
        self.continuum_map = continuum_map

    def __repr__(self):
        return f"ShiftedPartition(grid={self.grid!r}, scale={self.scale!r}, z={self.z!r}, shape={self.shape})"

    def __len__(self):
        return len(self.cells)

    def key(self):
        """Hashable description used for cache keys."""
        return (self.grid.n, self.m, self.shift)

    @property
    def index_set(self):
        """Nominal centers ``I_z`` of all cells."""
        return np.array([c.center for c in self.cells])

    def cell_id_at(self, index):
        tx, ty = index
        return ty * self.shape[0] + tx

    def with_continua(self, continuum_map):
        return ShiftedPartition(self.grid, self.scale, self.z, continuum_map)

    def axis_range_in(self, axis, lo, hi):
        """Interval indices along ``axis`` exactly covering ``[lo, hi)``."""
        ivs = self.axes[axis]
        first = next((t for t, iv in enumerate(ivs) if iv[0] == lo), None)
        last = next((t for t, iv in enumerate(ivs) if iv[1] == hi), None)
        if first is None or last is None or last < first:
            raise ValueError(f"[{lo}, {hi}) is not aligned with the partition along axis {axis}")
        return first, last

    def cells_in_box(self, box):
        """Ids of cells contained in an aligned box."""
        (fx, lx), (fy, ly) = (self.axis_range_in(a, lo, hi) for a, (lo, hi) in enumerate(box))
        return np.array(
            [self.cell_id_at((tx, ty)) for ty in range(fy, ly + 1) for tx in range(fx, lx + 1)],
            dtype=np.int64,
        )

    def cell_measures(self):
        return np.array([c.n_fine for c in self.cells]) * self.grid.h**self.grid.d


def build_shifted_partition(grid: FineGrid, scale, z=None, continuum_map=None) -> ShiftedPartition:
    return ShiftedPartition(grid, scale, z, continuum_map)


@dataclass(frozen=True, eq=False)
class OversampledPatch:
    """Target cell enlarged by ``k_layers`` rings of subcells, clipped to the domain.

    Node arrays refer to ``grid.box_nodes(box)`` order; ``boundary_mask`` marks
    the nodes on the patch boundary where cell solutions vanish.
    """

    target: int
    k_layers: int
    box: tuple
    target_box: tuple
    subcells: np.ndarray
    sub: ShiftedPartition = field(repr=False)

    @property
    def grid(self):
        return self.sub.grid

    @property
    def shape(self):
        return tuple(hi - lo for lo, hi in self.box)

    @property
    def node_ids(self):
        return self.grid.box_nodes(self.box)

    @property
    def boundary_mask(self):
        return self.grid.box_boundary_mask(self.box)

    @property
    def fine_cells(self):
        return self.grid.box_cells(self.box)

    @property
    def n_nodes(self):
        return int(np.prod([s + 1 for s in self.shape]))

    def local_corners(self, cells):
        """Patch-local node indices of the corners of global ``cells``."""
        n = self.grid.n
        (x0, x1), (y0, _) = self.box
        cells = np.asarray(cells)
        iy, ix = np.divmod(cells, n)
        lx, ly = ix - x0, iy - y0
        w = x1 - x0 + 1
        sw = ly * w + lx
        return np.stack([sw, sw + 1, sw + w + 1, sw + w], axis=-1)

    def contains_box(self, box):
        return all(plo <= lo and hi <= phi for (plo, phi), (lo, hi) in zip(self.box, box))


def oversample(p: ShiftedPartition, cell_id: int, k_layers: int, sub: ShiftedPartition | None = None):
    """Patch of all ``sub`` cells within Chebyshev distance ``k_layers`` of a cell.

    ``sub`` is the H_eps partition the layers are counted in; it defaults to
    ``p`` itself. The target cell must be a union of ``sub`` cells.
    """
    if k_layers < 0:
        raise ValueError("k_layers must be nonnegative")
    sub = p if sub is None else sub
    if sub.grid != p.grid:
        raise ValueError("partitions live on different grids")
    target = p.cells[cell_id]
    ranges = []
    for axis, (lo, hi) in enumerate(target.box):
        first, last = sub.axis_range_in(axis, lo, hi)
        ranges.append((max(first - k_layers, 0), min(last + k_layers, sub.shape[axis] - 1)))
    box = tuple((sub.axes[a][r0][0], sub.axes[a][r1][1]) for a, (r0, r1) in enumerate(ranges))
    (rx0, rx1), (ry0, ry1) = ranges
    members = np.array(
        [sub.cell_id_at((tx, ty)) for ty in range(ry0, ry1 + 1) for tx in range(rx0, rx1 + 1)],
        dtype=np.int64,
    )
    return OversampledPatch(cell_id, k_layers, box, target.box, members, sub)


def write_partition_csv(p: ShiftedPartition, path):
    h = p.grid.h
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "center_x", "center_y", "x_lo", "x_hi", "y_lo", "y_hi",
                    "n_fine", "n_fine_c0", "n_fine_c1"])
        for c in p.cells:
            (x0, x1), (y0, y1) = c.box
            per = [len(a) for a in c.continuum_cells] if c.continuum_cells is not None else ["", ""]
            w.writerow([c.id, repr(c.center[0]), repr(c.center[1]), repr(x0 * h), repr(x1 * h),
                        repr(y0 * h), repr(y1 * h), c.n_fine, *per])
