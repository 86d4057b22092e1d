import numpy as np
import pytest

import oracles
from mchom import fem
from mchom.cells import (CellCache, EmptyContinuumError, build_auxiliary, build_nlmc_basis, decay_profile,
                         default_k_layers, feature_index, solve_all_cell_sets, solve_cell_set,
                         solve_constant_cell, solve_linear_cell, solve_localized_nlmc_basis)
from mchom.field import CoefficientField, ContinuumMap, GeometrySpec, generate_medium, volume_fractions
from mchom.macro import gram_matrix
from mchom.mesh import FineGrid, ShiftedPartition, oversample


def _layered(n=16, period=4):
    """Horizontal layers: high permeability in every other band of ``period/2`` rows."""
    g = FineGrid(n)
    iy = np.repeat(np.arange(n), n)
    lab = ((iy // (period // 2)) % 2).astype(np.int8)
    return CoefficientField(g, np.where(lab == 1, 100.0, 1.0)), ContinuumMap(g, lab)


def _setup(field, cmap, H, He):
    g = field.grid
    pH = ShiftedPartition(g, H)
    pe = ShiftedPartition(g, He, continuum_map=cmap)
    return pH, pe, build_auxiliary(pe, cmap)


def test_default_k():
    assert [default_k_layers(h) for h in (1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 64)] == [2, 2, 3, 4, 6]


def test_auxiliary_rows(constant32, channels32):
    f, c = constant32
    aux = build_auxiliary(ShiftedPartition(f.grid, 1 / 8), c)
    assert np.all(aux.continuum == 0) and len(aux) == 64
    f, c = channels32
    p = ShiftedPartition(f.grid, 1 / 8)
    aux = build_auxiliary(p, c)
    meas, empty = volume_fractions(c, p)
    np.testing.assert_array_equal(aux.empty, empty)
    np.testing.assert_allclose(aux.measure, meas[~empty], rtol=0, atol=0)
    crossed = [s for s in range(len(p)) if 0 < c.labels[p.cells[s].fine_cells].sum() < p.cells[s].n_fine]
    assert all((aux.piece_of[s] >= 0).sum() == 2 for s in crossed)
    # pairing with the constant function gives the measures
    C = aux.global_matrix()
    np.testing.assert_allclose(C @ np.ones(f.grid.n_nodes), aux.measure, rtol=1e-13)
    # disjoint supports: each fine cell feeds exactly one row
    assert np.all(np.bincount(aux.fine_piece, minlength=len(aux)) * f.grid.h**2 == aux.measure)


def test_cell_problems_match_dense_oracle():
    """Two-continuum layered medium, 2x2-subcell target, k = 1 patch."""
    f, c = _layered(16)
    pH, pe, aux = _setup(f, c, 1 / 4, 1 / 8)
    cid = pH.cell_id_at((1, 1))
    s = solve_cell_set(pH, cid, aux, f, 1)
    patch = s.patch
    pieces = aux.pieces_in(patch.subcells)
    groups = [np.nonzero(aux.fine_piece == q)[0] for q in pieces]
    cx, cy = s.center
    offs = aux.centers()[pieces] - [cx, cy]
    for i in range(2):
        on = (aux.continuum[pieces] == i) * aux.measure[pieces]
        targets = np.column_stack([on, on * offs[:, 0], on * offs[:, 1]])
        ref = oracles.patch_problem(16, f.values, patch.box, groups, targets)[patch.node_ids]
        for j in range(3):
            col = s.values[:, feature_index(i, None if j == 0 else j - 1)]
            np.testing.assert_allclose(col, ref[:, j], atol=1e-8 * max(1, np.abs(ref[:, j]).max()))


def test_single_cell_solvers_agree_with_set():
    f, c = _layered(16)
    pH, pe, aux = _setup(f, c, 1 / 4, 1 / 8)
    cid = pH.cell_id_at((2, 1))
    s = solve_cell_set(pH, cid, aux, f, 1)
    np.testing.assert_allclose(solve_constant_cell(s.patch, aux, f, 1, s.center), s.values[:, 3], atol=1e-12)
    np.testing.assert_allclose(solve_linear_cell(s.patch, aux, f, 0, 1, s.center), s.values[:, 2], atol=1e-12)


def test_constraints_and_boundary(channels32):
    f, c = channels32
    pH, pe, aux = _setup(f, c, 1 / 4, 1 / 16)
    for cid in (0, 5, 15):
        s = solve_cell_set(pH, cid, aux, f, 2)
        assert s.constraint_residual <= 1e-10
        assert np.all(s.values[s.patch.boundary_mask] == 0)
        pieces = aux.pieces_in(s.patch.subcells)
        C = aux.pairing_matrix(pieces, s.patch.box)
        # η_0 + η_1 reproduces unit averages on every piece of the patch
        np.testing.assert_allclose(C @ (s.values[:, 0] + s.values[:, 3]), aux.measure[pieces], rtol=1e-10)


def test_empty_continuum_rejected(constant32):
    f, c = constant32
    pH, pe, aux = _setup(f, c, 1 / 4, 1 / 8)
    patch = oversample(pH, 0, 1, sub=pe)
    with pytest.raises(EmptyContinuumError):
        solve_constant_cell(patch, aux, f, 1)


def test_constant_plateau_decays_with_layers():
    """η_0 on a constant medium: target-cell energy falls geometrically with layers."""
    g = FineGrid(64)
    f, c = generate_medium(GeometrySpec(kind="constant"), g)
    pH, pe, aux = _setup(f, c, 1 / 8, 1 / 32)
    cid = pH.cell_id_at((3, 3))
    K = pH.cells[cid]
    energies = []
    for k in range(1, 5):
        s = solve_cell_set(pH, cid, aux, f, k)
        energies.append(gram_matrix(s, f, K.fine_cells)[0, 0])
    ratios = np.array(energies[1:]) / np.array(energies[:-1])
    assert np.all(ratios < 0.15), ratios


@pytest.mark.xfail(strict=True, reason="measured 0.026 κ|K| at k = 4; the 1e-3 level needs about six layers")
def test_constant_plateau_energy_at_four_layers():
    g = FineGrid(128)
    f, c = generate_medium(GeometrySpec(kind="constant"), g)
    pH, pe, aux = _setup(f, c, 1 / 4, 1 / 16)
    cid = pH.cell_id_at((1, 1))
    K = pH.cells[cid]
    s = solve_cell_set(pH, cid, aux, f, 4)
    assert gram_matrix(s, f, K.fine_cells)[0, 0] <= 1e-3 * K.n_fine * g.h**2


def test_constant_cell_dense_energy_oracle():
    g = FineGrid(32)
    f, c = generate_medium(GeometrySpec(kind="constant"), g)
    pH, pe, aux = _setup(f, c, 1 / 4, 1 / 16)
    cid = pH.cell_id_at((1, 1))
    s = solve_cell_set(pH, cid, aux, f, 2)
    pieces = aux.pieces_in(s.patch.subcells)
    groups = [np.nonzero(aux.fine_piece == q)[0] for q in pieces]
    ref = oracles.patch_problem(32, f.values, s.patch.box, groups, aux.measure[pieces])[:, 0]
    Kd = oracles.dense_stiffness(32, oracles.kappa_in_box(32, f.values, pH.cells[cid].box))
    e_ref = oracles.energy(ref, Kd)
    assert np.isclose(gram_matrix(s, f, pH.cells[cid].fine_cells)[0, 0], e_ref, rtol=1e-8)


def test_linear_cell_close_to_linear_and_odd():
    g = FineGrid(128)
    f, c = generate_medium(GeometrySpec(kind="constant"), g)
    pH, pe, aux = _setup(f, c, 1 / 4, 1 / 16)
    cid = pH.cell_id_at((1, 1))
    s = solve_cell_set(pH, cid, aux, f, 4)
    K = pH.cells[cid]
    xy = g.node_coords()[s.patch.node_ids]
    lin = xy[:, 0] - s.center[0]
    diff = np.zeros(g.n_nodes)
    diff[s.patch.node_ids] = s.values[:, 1] - lin
    dist = fem.norms(diff, f, K.fine_cells)["energy"]
    assert dist <= 0.05 * np.sqrt(K.n_fine * g.h**2), dist
    # odd reflection across the vertical midline through the center
    side = s.patch.shape[0] + 1
    vals = s.values[:, 1].reshape(-1, side)
    np.testing.assert_allclose(vals, -vals[:, ::-1], atol=1e-10)


def test_nlmc_basis_global_reproduces_averages(channels32):
    f, c = channels32
    p = ShiftedPartition(f.grid, 1 / 4, continuum_map=c)
    aux = build_auxiliary(p, c)
    B = build_nlmc_basis(aux, f, 8)  # patches cover the domain
    C = aux.global_matrix()
    P = (C @ B.matrix).toarray() / aux.measure[:, None]
    np.testing.assert_allclose(P, np.eye(len(aux)), atol=1e-9)


def test_nlmc_localized_constraints(channels32):
    f, c = channels32
    p = ShiftedPartition(f.grid, 1 / 8, continuum_map=c)
    aux = build_auxiliary(p, c)
    patch, vals, targets, resid = solve_localized_nlmc_basis(aux, f, 27, 2)
    assert resid <= 1e-10
    pieces = aux.pieces_in(patch.subcells)
    C = aux.pairing_matrix(pieces, patch.box)
    for col, q in enumerate(targets):
        expected = np.where(pieces == q, aux.measure[pieces], 0.0)
        np.testing.assert_allclose(C @ vals[:, col], expected, atol=1e-10 * aux.measure.max())


def test_nlmc_small_domain_dense_oracle():
    f, c = _layered(16)
    p = ShiftedPartition(f.grid, 1 / 8, continuum_map=c)
    aux = build_auxiliary(p, c)
    patch, vals, targets, _ = solve_localized_nlmc_basis(aux, f, p.cell_id_at((1, 1)), 1)
    pieces = aux.pieces_in(patch.subcells)
    groups = [np.nonzero(aux.fine_piece == q)[0] for q in pieces]
    G = np.stack([np.where(pieces == q, aux.measure[pieces], 0.0) for q in targets], axis=1)
    ref = oracles.patch_problem(16, f.values, patch.box, groups, G)[patch.node_ids]
    np.testing.assert_allclose(vals, ref, atol=1e-8 * np.abs(ref).max())


def test_decay_profile():
    g = FineGrid(64)
    f, c = generate_medium(GeometrySpec(kind="constant"), g)
    p = ShiftedPartition(g, 1 / 16, continuum_map=c)
    aux = build_auxiliary(p, c)
    sid = p.cell_id_at((7, 7))
    patch, vals, _, _ = solve_localized_nlmc_basis(aux, f, sid, 4)
    rings = decay_profile(vals[:, 0], patch, f)
    A = fem.assemble_stiffness(g, f, patch.box)
    assert np.all(rings >= 0)
    assert np.isclose(rings.sum(), vals[:, 0] @ A @ vals[:, 0], rtol=1e-12)
    assert rings[3] / rings[1] < 0.5
    assert np.all(decay_profile(np.ones(patch.n_nodes), patch, f) <= 1e-12 * rings.sum())


def test_k_monotone_improvement():
    """Target-cell energy discrepancy to the whole-domain solution shrinks with k."""
    f, c = _layered(32, period=8)
    pH, pe, aux = _setup(f, c, 1 / 4, 1 / 16)
    cid = pH.cell_id_at((1, 2))
    cells = pH.cells[cid].fine_cells
    ref = solve_cell_set(pH, cid, aux, f, 16)
    gaps = []
    for k in range(0, 4):
        s = solve_cell_set(pH, cid, aux, f, k)
        loc = np.zeros((f.grid.n_nodes, 6))
        loc[s.patch.node_ids] = s.values
        glo = np.zeros((f.grid.n_nodes, 6))
        glo[ref.patch.node_ids] = ref.values
        gaps.append(max(fem.norms(loc[:, j] - glo[:, j], f, cells)["energy"] for j in range(6)))
    assert all(b <= a * (1 + 1e-9) for a, b in zip(gaps, gaps[1:])), gaps


def test_threads_and_cache_bitwise(channels32, tmp_path):
    f, c = channels32
    pH, pe, aux = _setup(f, c, 1 / 4, 1 / 16)
    serial = solve_all_cell_sets(pH, aux, f, 2)
    threaded = solve_all_cell_sets(pH, aux, f, 2, threads=4)
    for a, b in zip(serial, threaded):
        assert a.values.tobytes() == b.values.tobytes()
    cache = CellCache(tmp_path)
    first = solve_all_cell_sets(pH, aux, f, 2, cache=cache)
    assert cache.misses == len(pH) and cache.hits == 0
    again = CellCache(tmp_path)
    second = solve_all_cell_sets(pH, aux, f, 2, cache=again)
    assert again.hits == len(pH) and again.misses == 0
    for a, b in zip(first, second):
        assert a.values.tobytes() == b.values.tobytes()
        assert a.center == b.center and a.present == b.present
