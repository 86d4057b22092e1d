"""Estimator-style wrappers: fit on a permeability field, then apply.

Both classes follow the scikit-learn conventions: constructor arguments are
stored untouched, ``fit`` validates its input and sets trailing-underscore
attributes, and ``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import fem
from .cells import build_auxiliary, build_nlmc_basis, default_k_layers, solve_all_cell_sets
from .downscale import CoarseMesh, MacroAverages, downscale_linear, downscale_nlmc, project_continuum_average
from .field import CoefficientField, ContinuumMap, identify_continua
from .macro import (assemble_effective_tensors, assemble_effective_tensors_rve,
                    assemble_macro_system, compute_load_moments, reconstruct, solve_macro)
from .mesh import ShiftedPartition, build_fine_grid

__all__ = ["check_coefficient", "check_labels", "check_scale", "NLMCBasis", "MulticontinuumHomogenizer"]


def check_coefficient(kappa):
    """Coerce ``kappa`` to a :class:`CoefficientField`.

    Accepts a field, an ``(n, n)`` array indexed ``[iy, ix]`` or a flat array
    of ``n*n`` cell values.
    """
    if isinstance(kappa, CoefficientField):
        return kappa
    arr = np.asarray(kappa, dtype=float)
    if arr.ndim == 2 and arr.shape[0] == arr.shape[1]:
        n = arr.shape[0]
    elif arr.ndim == 1:
        n = int(round(np.sqrt(arr.size)))
        if n * n != arr.size:
            raise ValueError(f"{arr.size} values do not form a square grid")
    else:
        raise ValueError(f"expected a square 2D array or flat cell values, got shape {arr.shape}")
    return CoefficientField(build_fine_grid(n), arr.ravel())


def check_labels(labels, field: CoefficientField):
    if labels is None:
        return identify_continua(field)
    if isinstance(labels, ContinuumMap):
        if labels.grid != field.grid:
            raise ValueError("labels live on a different grid")
        return labels
    return ContinuumMap(field.grid, np.asarray(labels).ravel())


def check_scale(value, n, what, min_cells=1):
    cells = value * n
    if value <= 0 or abs(cells - round(cells)) > 1e-9 * max(cells, 1) or round(cells) < min_cells:
        raise ValueError(f"{what}={value!r} must be a multiple of 1/{n} spanning at least {min_cells} cells")
    return int(round(cells))


class NLMCBasis(TransformerMixin, BaseEstimator):
    """Localized NLMC basis of a medium.

    ``transform`` maps nodal functions to their continuum averages and
    ``inverse_transform`` maps averages back through the basis. ``predict``
    returns the Galerkin solution of the fine problem in the basis span.
    """

    def __init__(self, scale_eps=1.0 / 8, k_layers=None, threads=1):
        self.scale_eps = scale_eps
        self.k_layers = k_layers
        self.threads = threads

    def fit(self, kappa, labels=None):
        field = check_coefficient(kappa)
        check_scale(self.scale_eps, field.grid.n, "scale_eps", min_cells=2)
        cmap = check_labels(labels, field)
        self.field_ = field
        self.continua_ = cmap
        self.k_layers_ = default_k_layers(self.scale_eps) if self.k_layers is None else int(self.k_layers)
        self.aux_ = build_auxiliary(ShiftedPartition(field.grid, self.scale_eps, continuum_map=cmap), cmap)
        self.basis_ = build_nlmc_basis(self.aux_, field, self.k_layers_, self.threads)
        self.n_features_out_ = len(self.aux_)
        return self

    def transform(self, u):
        """Averages of nodal vectors ``u``; 1D in, 1D out, rows for 2D input."""
        check_is_fitted(self, "basis_")
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return project_continuum_average(u, self.aux_).values
        return np.stack([project_continuum_average(r, self.aux_).values for r in u])

    def inverse_transform(self, averages):
        check_is_fitted(self, "basis_")
        a = np.asarray(averages, dtype=float)
        if a.ndim == 1:
            return downscale_nlmc(MacroAverages(self.aux_, a), self.basis_)
        return np.stack([downscale_nlmc(MacroAverages(self.aux_, r), self.basis_) for r in a])

    def predict(self, f):
        """Galerkin solution with zero boundary values for load ``f``."""
        check_is_fitted(self, "basis_")
        grid = self.field_.grid
        A = fem.assemble_stiffness(grid, self.field_)
        F = fem.load_vector(grid, f)
        interior = np.setdiff1d(np.arange(grid.n_nodes), grid.boundary_nodes())
        B = self.basis_.matrix[interior]
        B = B[:, np.asarray(B.getnnz(axis=0) > 0).ravel()]
        Ams = (B.T @ A[interior][:, interior] @ B).toarray()
        c = np.linalg.solve(0.5 * (Ams + Ams.T), B.T @ F[interior])
        u = np.zeros(grid.n_nodes)
        u[interior] = B @ c
        return u


class MulticontinuumHomogenizer(BaseEstimator):
    """Cell problems, effective tensors and the homogenized two-field solve.

    ``rve_window`` is the width of a window near the middle of every coarse
    cell; when set, cell problems are posed around it and the tensors are
    rescaled accordingly.
    """

    def __init__(self, scale=1.0 / 4, scale_eps=1.0 / 16, k_layers=None, bc="dirichlet",
                 rve_window=None, threads=1, tol=1e-10):
        self.scale = scale
        self.scale_eps = scale_eps
        self.k_layers = k_layers
        self.bc = bc
        self.rve_window = rve_window
        self.threads = threads
        self.tol = tol

    def fit(self, kappa, labels=None):
        from .pipeline import rve_windows

        field = check_coefficient(kappa)
        n = field.grid.n
        m = check_scale(self.scale, n, "scale")
        m_eps = check_scale(self.scale_eps, n, "scale_eps", min_cells=2)
        if m % m_eps or n % m:
            raise ValueError("need scale_eps | scale | 1 on the fine grid")
        if self.bc not in ("natural", "dirichlet"):
            raise ValueError(f"bc must be 'natural' or 'dirichlet', got {self.bc!r}")
        cmap = check_labels(labels, field)
        self.field_ = field
        self.continua_ = cmap
        self.k_layers_ = default_k_layers(self.scale_eps) if self.k_layers is None else int(self.k_layers)
        self.partition_ = ShiftedPartition(field.grid, self.scale)
        p_eps = ShiftedPartition(field.grid, self.scale_eps, continuum_map=cmap)
        self.aux_ = build_auxiliary(p_eps, cmap)
        self.mesh_ = CoarseMesh(self.partition_)
        windows = None
        if self.rve_window is not None:
            w = check_scale(self.rve_window, n, "rve_window")
            if w % m_eps or w > m:
                raise ValueError("rve_window must be a multiple of scale_eps inside one coarse cell")
            windows = rve_windows(self.partition_, p_eps, self.rve_window)
        self.cell_sets_ = solve_all_cell_sets(self.partition_, self.aux_, field, self.k_layers_,
                                              threads=self.threads, windows=windows)
        if windows is None:
            self.tensors_ = assemble_effective_tensors(self.cell_sets_, field, self.partition_)
        else:
            self.tensors_ = assemble_effective_tensors_rve(self.cell_sets_, field, self.partition_)
        return self

    def predict(self, f):
        """Macro solution for load ``f`` with its fine-scale reconstruction attached."""
        check_is_fitted(self, "tensors_")
        m = compute_load_moments(f, self.cell_sets_, self.partition_)
        system = assemble_macro_system(self.tensors_, m, self.mesh_, self.bc)
        sol = solve_macro(system, tol=self.tol)
        reconstruct(sol, self.cell_sets_, self.partition_)
        return sol

    def transform(self, U):
        """Broken fine-scale reconstruction (corner array) of a :class:`MacroField`."""
        check_is_fitted(self, "tensors_")
        return downscale_linear(U, self.cell_sets_, self.partition_)
