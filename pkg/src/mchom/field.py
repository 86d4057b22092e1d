"""High-contrast coefficient fields and their two-continuum decomposition."""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .mesh import FineGrid, ShiftedPartition

__all__ = [
    "GeometrySpec",
    "CoefficientField",
    "ContinuumMap",
    "generate_medium",
    "contrast",
    "volume_fractions",
    "identify_continua",
    "write_binary",
    "read_binary",
    "write_field_csv",
    "MEDIUM_KINDS",
]

MEDIUM_KINDS = ("constant", "periodic-inclusions", "channels", "channels-with-inclusions")

MAGIC = b"MCHF"
_HEADER = struct.Struct("<4sBBHI")
KIND_CELL = 0
KIND_NODE = 1
KIND_BROKEN = 2  # four corner values per cell


@dataclass(frozen=True)
class GeometrySpec:
    """Parameters of a generated medium. Lengths are in domain units."""

    kind: str = "channels"
    kappa_low: float = 1.0
    kappa_high: float = 1e4
    period: float | None = None
    inclusion_size: float | None = None
    channel_width: float = 1.0 / 32
    channel_count: int = 2
    orientation: str = "horizontal"
    jitter: bool = False
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class CoefficientField:
    """Piecewise constant permeability, one value per fine cell."""

    def __init__(self, grid: FineGrid, values):
        values = np.ascontiguousarray(values, dtype=np.float64).ravel()
        if values.shape != (grid.n_cells,):
            raise ValueError(f"expected {grid.n_cells} cell values, got {values.size}")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ValueError("permeability must be finite and strictly positive")
        self.grid = grid
        self.values = values
        self.values.setflags(write=False)
        self.kappa_min = float(values.min())
        self.kappa_max = float(values.max())

    def __repr__(self):
        return f"CoefficientField({self.grid!r}, range=[{self.kappa_min:g}, {self.kappa_max:g}])"

    def scaled(self, c):
        return CoefficientField(self.grid, self.values * c)

    def digest(self):
        return hashlib.sha256(self.values.tobytes()).hexdigest()


class ContinuumMap:
    """Per-fine-cell continuum label; 1 marks the high-permeability region."""

    def __init__(self, grid: FineGrid, labels):
        labels = np.ascontiguousarray(labels).ravel().astype(np.int8)
        if labels.shape != (grid.n_cells,):
            raise ValueError(f"expected {grid.n_cells} labels, got {labels.size}")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        self.grid = grid
        self.labels = labels
        self.labels.setflags(write=False)

    def __repr__(self):
        return f"ContinuumMap({self.grid!r}, fraction_1={self.labels.mean():.4g})"

    @property
    def n_continua(self):
        """2 when both labels occur, else 1."""
        return 2 if (self.labels.any() and not self.labels.all()) else 1

    @property
    def single_continuum(self):
        return self.n_continua == 1

    def digest(self):
        return hashlib.sha256(self.labels.tobytes()).hexdigest()


def identify_continua(field: CoefficientField, kappa_low=None, kappa_high=None) -> ContinuumMap:
    """Label cells above the geometric mean of the two extreme values as continuum 1."""
    lo = field.kappa_min if kappa_low is None else kappa_low
    hi = field.kappa_max if kappa_high is None else kappa_high
    if hi <= lo:
        return ContinuumMap(field.grid, np.zeros(field.grid.n_cells, dtype=np.int8))
    return ContinuumMap(field.grid, field.values > np.sqrt(lo * hi))


def _cells(length, n, what):
    if length is None:
        raise ValueError(f"{what} is required for this medium kind")
    c = float(length) * n
    r = int(round(c))
    if r < 1 or abs(c - r) > 1e-9 * max(1.0, c):
        raise ValueError(f"{what}={length!r} is not a positive multiple of 1/{n}")
    return r


def _channel_mask(spec: GeometrySpec, n):
    w = _cells(spec.channel_width, n, "channel_width")
    mask = np.zeros((n, n), dtype=bool)
    for c in range(spec.channel_count):
        start = int(round((c + 1) * n / (spec.channel_count + 1) - w / 2))
        start = min(max(start, 0), n - w)
        mask[start:start + w, :] = True
    if spec.orientation == "vertical":
        mask = mask.T
    elif spec.orientation != "horizontal":
        raise ValueError(f"unknown orientation {spec.orientation!r}")
    return mask


def _inclusion_mask(spec: GeometrySpec, n):
    p = _cells(spec.period, n, "period")
    s = _cells(spec.inclusion_size, n, "inclusion_size")
    if s > p:
        raise ValueError("inclusion_size exceeds the period")
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros((n, n), dtype=bool)
    for y0 in range(0, n, p):
        for x0 in range(0, n, p):
            if spec.jitter:
                ox, oy = rng.integers(0, p - s + 1, size=2)
            else:
                ox = oy = (p - s) // 2
            mask[y0 + oy:min(y0 + oy + s, n), x0 + ox:min(x0 + ox + s, n)] = True
    return mask


def generate_medium(spec: GeometrySpec, grid: FineGrid):
    """Build ``(CoefficientField, ContinuumMap)`` for a geometry on ``grid``.

    The result depends only on ``(spec, grid)``; random jitter draws from a
    generator seeded with ``spec.seed``.
    """
    if spec.kind not in MEDIUM_KINDS:
        raise ValueError(f"unknown medium kind {spec.kind!r}; expected one of {MEDIUM_KINDS}")
    if spec.kappa_low <= 0 or spec.kappa_high <= 0:
        raise ValueError("permeabilities must be positive")
    n = grid.n
    if spec.kind == "constant":
        mask = np.zeros((n, n), dtype=bool)
    elif spec.kind == "channels":
        mask = _channel_mask(spec, n)
    elif spec.kind == "periodic-inclusions":
        mask = _inclusion_mask(spec, n)
    else:
        mask = _channel_mask(spec, n) | _inclusion_mask(spec, n)
    values = np.where(mask, spec.kappa_high, spec.kappa_low).ravel()
    field = CoefficientField(grid, values)
    if spec.kind == "constant":
        return field, ContinuumMap(grid, np.zeros(grid.n_cells, dtype=np.int8))
    return field, identify_continua(field, spec.kappa_low, spec.kappa_high)


def contrast(field: CoefficientField) -> float:
    return field.kappa_max / field.kappa_min


def volume_fractions(cmap: ContinuumMap, p: ShiftedPartition):
    """Measures of every ``K ∩ Ω_i``; returns ``(measures, empty)`` of shape (cells, 2)."""
    if cmap.grid != p.grid:
        raise ValueError("continuum map and partition use different grids")
    counts = np.zeros((len(p), 2), dtype=np.int64)
    np.add.at(counts, (p.cell_of_fine, cmap.labels.astype(np.int64)), 1)
    return counts * p.grid.h**p.grid.d, counts == 0


def _payload_size(kind, n, d):
    if kind == KIND_CELL:
        return n**d
    if kind == KIND_NODE:
        return (n + 1) ** d
    if kind == KIND_BROKEN:
        return n**d * 2**d
    raise ValueError(f"unknown payload kind {kind}")


def write_binary(path, values, n_per_side, kind=KIND_CELL, d=2):
    """Header (magic, version, kind, d, n_per_side) then row-major little-endian float64.

    ``kind`` selects cell values, nodal values or broken functions (corner
    values of every cell, cell-major).
    """
    values = np.ascontiguousarray(values, dtype="<f8").ravel()
    expected = _payload_size(kind, n_per_side, d)
    if values.size != expected:
        raise ValueError(f"payload has {values.size} values, expected {expected}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, 1, kind, d, n_per_side))
        fh.write(values.tobytes())


def read_binary(path):
    """Inverse of :func:`write_binary`; returns ``(values, n_per_side, kind, d)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, kind, d, n = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != 1:
        raise ValueError(f"{path}: not a field file")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    expected = _payload_size(kind, n, d)
    if values.size != expected:
        raise ValueError(f"{path}: payload has {values.size} values, expected {expected}")
    return values, n, kind, d


def write_field_csv(path, field: CoefficientField, cmap: ContinuumMap):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "kappa", "label"])
        for i, (k, lab) in enumerate(zip(field.values, cmap.labels)):
            w.writerow([i, f"{k:.17g}", int(lab)])
