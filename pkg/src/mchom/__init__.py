"""Multicontinuum homogenization of high-contrast elliptic problems.

Fine Q1 discretizations on a uniform grid, constrained energy minimizing
cell problems, effective tensors and the coupled two-field macro problem.
"""

from .cells import (AuxiliaryBasis, CellCache, CellSolutionSet, LocalizedBasisSet, build_auxiliary,
                    build_nlmc_basis, default_k_layers, solve_all_cell_sets, solve_cell_set)
from .config import RunConfig, load_config
from .downscale import (CoarseMesh, MacroAverages, MacroField, downscale_linear, downscale_nlmc,
                        project_continuum_average)
from .estimators import MulticontinuumHomogenizer, NLMCBasis
from .field import CoefficientField, ContinuumMap, GeometrySpec, generate_medium, identify_continua
from .macro import (EffectiveTensors, assemble_effective_tensors, assemble_effective_tensors_rve,
                    assemble_macro_system, compute_load_moments, solve_macro, verify_averaging_identity)
from .mesh import FineGrid, ShiftedPartition, build_fine_grid, oversample

__version__ = "0.1.0"
