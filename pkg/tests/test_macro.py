import numpy as np
import pytest

import oracles
from mchom.cells import build_auxiliary, feature_index, solve_all_cell_sets
from mchom.downscale import CoarseMesh, MacroField
from mchom.field import CoefficientField, GeometrySpec, generate_medium
from mchom.macro import (EffectiveTensors, LoadMoments, SingularMacroSystem, assemble_effective_tensors,
                         assemble_effective_tensors_rve, assemble_macro_system, averaging_identity_sides,
                         compute_load_moments, read_tensors_csv, solve_macro, verify_averaging_identity,
                         write_tensors_csv)
from mchom.macro import _element_operator
from mchom.mesh import FineGrid, ShiftedPartition
from mchom.pipeline import random_macro_pairs, rve_windows


def _sets(field, cmap, H, He, k, windows=None):
    g = field.grid
    pH = ShiftedPartition(g, H)
    aux = build_auxiliary(ShiftedPartition(g, He, continuum_map=cmap), cmap)
    return pH, aux, solve_all_cell_sets(pH, aux, field, k, windows=windows)


@pytest.fixture(scope="module")
def channels(channels32):
    f, c = channels32
    pH, aux, sets = _sets(f, c, 1 / 4, 1 / 16, 2)
    return f, c, pH, aux, sets, assemble_effective_tensors(sets, f, pH)


@pytest.fixture(scope="module")
def constant128():
    g = FineGrid(128)
    f, c = generate_medium(GeometrySpec(kind="constant"), g)
    pH, aux, sets = _sets(f, c, 1 / 4, 1 / 16, 4)
    return f, c, pH, aux, sets, assemble_effective_tensors(sets, f, pH)


def _poisson_oracle(nx, H):
    """Scalar Q1 stiffness with one-point (center) quadrature on an nx x nx element mesh."""
    side = nx + 1
    g = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) / (2 * H)
    K = np.zeros((side * side, side * side))
    for ty in range(nx):
        for tx in range(nx):
            sw = ty * side + tx
            idx = [sw, sw + 1, sw + side + 1, sw + side]
            K[np.ix_(idx, idx)] += H * H * g @ g.T
    return K


def _identity_tensors(nc, cells, H):
    nf = 3 * nc
    gram = np.zeros((cells, nf, nf))
    for i in range(nc):
        for k in range(2):
            gram[:, feature_index(i, k), feature_index(i, k)] = 1.0
    return EffectiveTensors(gram, np.zeros((cells, 2)), H, nc)


def test_decoupled_poisson_assembly_and_solve():
    g = FineGrid(16)
    pH = ShiftedPartition(g, 1 / 4)
    mesh = CoarseMesh(pH)
    t = _identity_tensors(2, len(pH), 1 / 4)
    rng = np.random.default_rng(0)
    m = LoadMoments(rng.standard_normal((len(pH), 6)))
    sysm = assemble_macro_system(t, m, mesh, "dirichlet")
    K = _poisson_oracle(4, 1 / 4)
    nn = mesh.n_nodes
    np.testing.assert_allclose(sysm.matrix[:nn, :nn], K, atol=1e-13)
    np.testing.assert_allclose(sysm.matrix[nn:, nn:], K, atol=1e-13)
    assert np.all(sysm.matrix[:nn, nn:] == 0)
    sol = solve_macro(sysm)
    free = np.setdiff1d(np.arange(nn), mesh.boundary_nodes())
    for i in range(2):
        ref = np.zeros(nn)
        ref[free] = np.linalg.solve(K[np.ix_(free, free)], sysm.rhs[i * nn:(i + 1) * nn][free])
        np.testing.assert_allclose(sol.U[i], ref, atol=1e-10 * np.abs(ref).max())


def test_system_symmetric_and_zero_rhs(channels):
    f, c, pH, aux, sets, t = channels
    mesh = CoarseMesh(pH)
    zero = compute_load_moments(0.0, sets, pH)
    assert np.all(zero.moments == 0)
    sysm = assemble_macro_system(t, zero, mesh, "dirichlet")
    A = sysm.matrix
    assert np.abs(A - A.T).max() <= 1e-13 * np.abs(A).max()
    assert np.all(solve_macro(sysm).U == 0)


def test_two_by_two_mesh_dense_oracle():
    """Cell solutions, tensors, moments and macro solve against dense reference algebra."""
    g = FineGrid(16)
    f, c = generate_medium(GeometrySpec(kind="channels", kappa_high=50.0, channel_width=1 / 16), g)
    pH, aux, sets = _sets(f, c, 1 / 2, 1 / 8, 1)
    t = assemble_effective_tensors(sets, f, pH)
    mom = compute_load_moments(1.0, sets, pH)
    mesh = CoarseMesh(pH)
    sysm = assemble_macro_system(t, mom, mesh, "natural")
    H = 0.5
    nn = mesh.n_nodes
    Kref = np.zeros((2 * nn, 2 * nn))
    bref = np.zeros(2 * nn)
    for s in sets:
        cell = pH.cells[s.cell_id]
        pieces = aux.pieces_in(s.patch.subcells)
        groups = [np.nonzero(aux.fine_piece == q)[0] for q in pieces]
        offs = aux.centers()[pieces] - np.array(s.center)
        cols = []
        for i in range(2):
            on = (aux.continuum[pieces] == i) * aux.measure[pieces]
            cols += [on, on * offs[:, 0], on * offs[:, 1]]
        E = oracles.patch_problem(16, f.values, s.patch.box, groups, np.column_stack(cols))
        Kc = oracles.dense_stiffness(16, oracles.kappa_in_box(16, f.values, cell.box))
        G = E.T @ Kc @ E / H**2
        np.testing.assert_allclose(t.gram[s.cell_id], G, atol=1e-8 * np.abs(G).max())
        F = oracles.cell_integral_rows(16, [cell.fine_cells]) @ E
        np.testing.assert_allclose(mom.moments[s.cell_id], F.ravel(), atol=1e-10)
        # bilinear macro shape functions sampled at the cell center
        tx, ty = cell.index
        x0, y0 = cell.box[0][0] / 16, cell.box[1][0] / 16
        hx = (cell.box[0][1] - cell.box[0][0]) / 16
        hy = (cell.box[1][1] - cell.box[1][0]) / 16
        sx, sy = (s.center[0] - x0) / hx, (s.center[1] - y0) / hy
        N = oracles.shape(sx, sy)
        dN = oracles.shape_grad(sx, sy) / [hx, hy]
        nodes = [ty * 3 + tx, ty * 3 + tx + 1, (ty + 1) * 3 + tx + 1, (ty + 1) * 3 + tx]
        B = np.zeros((6, 8))
        dofs = []
        for i in range(2):
            B[3 * i, 4 * i:4 * i + 4] = N
            B[3 * i + 1:3 * i + 3, 4 * i:4 * i + 4] = dN.T
            dofs += [i * nn + v for v in nodes]
        Kref[np.ix_(dofs, dofs)] += H**2 * B.T @ G @ B
        bref[dofs] += B.T @ F.ravel()
    np.testing.assert_allclose(sysm.matrix, Kref, atol=1e-8 * np.abs(Kref).max())
    np.testing.assert_allclose(sysm.rhs, bref, atol=1e-10)
    # dirichlet on a 2x2 mesh leaves the single center node per continuum
    d = assemble_macro_system(t, mom, mesh, "dirichlet")
    sol = solve_macro(d)
    mid = 4
    ref = np.linalg.solve(Kref[np.ix_([mid, nn + mid], [mid, nn + mid])], bref[[mid, nn + mid]])
    np.testing.assert_allclose(sol.U[:, mid], ref, rtol=1e-10)


def test_kappa_scaling(channels):
    f, c, pH, aux, sets, t = channels
    scaled = CoefficientField(f.grid, 7.5 * f.values)
    t2 = assemble_effective_tensors(solve_all_cell_sets(pH, aux, scaled, 2), scaled, pH)
    np.testing.assert_allclose(t2.gram, 7.5 * t.gram, rtol=1e-9, atol=1e-12 * np.abs(t2.gram).max())


def test_tensor_structure(channels):
    f, c, pH, aux, sets, t = channels
    assert t.symmetry_violation() <= 1e-12
    assert t.min_eigenvalue_ratio() >= -1e-10
    g = t.gamma
    interior = [K.id for K in pH.cells if 0 < K.index[0] < 3 and 0 < K.index[1] < 3]
    for cid in interior:
        assert g[cid, 0, 1] <= 0 and g[cid, 0, 0] >= 0 and g[cid, 1, 1] >= 0
        # η_0 + η_1 is nearly constant inside K, so the exchange rows nearly cancel
        assert abs(g[cid, 0, 0] + g[cid, 0, 1]) <= 0.1 * g[cid, 0, 0]


def test_constant_medium_recovery(constant128):
    f, c, pH, aux, sets, t = constant128
    H = pH.scale
    for K in pH.cells:
        if 0 < K.index[0] < 3 and 0 < K.index[1] < 3:
            np.testing.assert_allclose(t.alpha[K.id, 0, 0], np.eye(2), atol=0.05)
            assert np.abs(t.beta[K.id]).max() * H <= 0.05
            assert t.gamma[K.id, 0, 0] * H**2 <= 0.05


def test_load_moments(constant128, channels):
    f, c, pH, aux, sets, t = constant128
    m = compute_load_moments(1.0, sets, pH)
    for K in pH.cells:
        if 0 < K.index[0] < 3 and 0 < K.index[1] < 3:
            assert abs(m.moments[K.id, 0] / (K.n_fine * f.grid.h**2) - 1) <= 0.05
    f, c, pH, aux, sets, t = channels
    u = lambda x, y: np.sin(3 * x) + y
    v = lambda x, y: x * y
    lhs = compute_load_moments(lambda x, y: 2 * u(x, y) - 3 * v(x, y), sets, pH).moments
    rhs = 2 * compute_load_moments(u, sets, pH).moments - 3 * compute_load_moments(v, sets, pH).moments
    np.testing.assert_allclose(lhs, rhs, atol=1e-13 * np.abs(rhs).max())


def test_identity_constants(channels):
    f, c, pH, aux, sets, t = channels
    n = len(pH)
    U = MacroField.from_cell_data(pH, np.column_stack([np.ones(n), np.zeros(n)]), np.zeros((n, 2, 2)))
    lhs, rhs, *_ = averaging_identity_sides(U, U, t, sets, f, pH)
    assert np.isclose(lhs, (t.gamma[:, 0, 0] * pH.scale**2).sum(), rtol=1e-14)
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_identity_random(channels):
    f, c, pH, aux, sets, t = channels
    assert verify_averaging_identity(random_macro_pairs(pH, 2, 4, seed=3), t, sets, f, pH) <= 1e-11


def test_identity_term_isolation(channels, rng):
    """Values only, gradients only and the cross pairing each reproduce their block."""
    f, c, pH, aux, sets, t = channels
    n = len(pH)
    vals = MacroField.from_cell_data(pH, rng.standard_normal((n, 2)), np.zeros((n, 2, 2)))
    grads = MacroField.from_cell_data(pH, np.zeros((n, 2)), rng.standard_normal((n, 2, 2)))
    Hd = pH.scale**2
    fv, fg = vals.sample(pH), grads.sample(pH)
    v, gr = fv[:, [0, 3]], fg[:, [1, 2, 4, 5]].reshape(n, 2, 2)
    expected = {
        (0, 0): Hd * np.einsum("ci,cij,cj->", v, t.gamma, v),
        (1, 1): Hd * np.einsum("cik,cijkl,cjl->", gr, t.alpha, gr),
        (1, 0): Hd * np.einsum("cik,cijk,cj->", gr, t.beta, v),
    }
    fields = (vals, grads)
    for (a, b), ref in expected.items():
        lhs, rhs, nu, nv = averaging_identity_sides(fields[a], fields[b], t, sets, f, pH)
        assert np.isclose(lhs, ref, rtol=1e-12, atol=1e-14 * nu * nv)
        assert abs(lhs - rhs) <= 1e-11 * nu * nv


def test_natural_bc_diagnostics(channels):
    f, c, pH, aux, sets, t = channels
    m = compute_load_moments(1.0, sets, pH)
    sysm = assemble_macro_system(t, m, CoarseMesh(pH), "natural")
    try:
        sol = solve_macro(sysm)
    except SingularMacroSystem as err:
        assert err.sigma_min <= 1e-12 * err.sigma_max
        return
    for key in ("sigma_min", "sigma_max", "null_dim", "singular", "residual"):
        assert key in sol.diagnostics
    assert sol.diagnostics["null_dim"] == 0 or sol.diagnostics["singular"]


def test_natural_bc_constant_shift(channels):
    """A constant added to both continua acts through the value blocks only."""
    f, c, pH, aux, sets, t = channels
    mesh = CoarseMesh(pH)
    sysm = assemble_macro_system(t, compute_load_moments(0.0, sets, pH), mesh, "natural")
    ones = np.ones(2 * mesh.n_nodes)
    got = sysm.matrix @ ones
    # with zero gradients every cell sees U = (1, 1) and ∇U = 0 at its center
    Hd = pH.scale**2
    ref = np.zeros_like(got)
    feats = np.array([1, 0, 0, 1, 0, 0], float)
    for K in pH.cells:
        B, dofs = _element_operator(mesh, K.center, 2)
        ref[dofs] += Hd * B.T @ (t.gram[K.id] @ feats)
    np.testing.assert_allclose(got, ref, atol=1e-12 * np.abs(sysm.matrix).max())


def test_singular_inconsistent_raises():
    g = FineGrid(16)
    pH = ShiftedPartition(g, 1 / 4)
    mesh = CoarseMesh(pH)
    t = _identity_tensors(1, len(pH), 1 / 4)
    m = LoadMoments(np.tile([1.0, 0, 0], (len(pH), 1)))
    with pytest.raises(SingularMacroSystem):
        solve_macro(assemble_macro_system(t, m, mesh, "natural"))


def test_tensor_csv_round_trip(channels, tmp_path):
    f, c, pH, aux, sets, t = channels
    paths = write_tensors_csv(t, tmp_path)
    assert sorted(paths) == ["alpha", "beta", "gamma"]
    back = read_tensors_csv(tmp_path, pH.scale)
    np.testing.assert_array_equal(back.gram, t.gram)
    np.testing.assert_array_equal(back.centers, t.centers)


def test_rve_degenerate_window(channels):
    f, c, pH, aux, sets, t = channels
    windows = [K.box for K in pH.cells]
    rsets = solve_all_cell_sets(pH, aux, f, 2, windows=windows)
    r = assemble_effective_tensors_rve(rsets, f, pH)
    np.testing.assert_allclose(r.gram, t.gram, rtol=0, atol=1e-12 * np.abs(t.gram).max())


def test_rve_constant_medium(constant128):
    f, c, pH, aux, sets, t = constant128
    w = rve_windows(pH, aux.partition, 1 / 8)
    r = assemble_effective_tensors_rve(solve_all_cell_sets(pH, aux, f, 4, windows=w), f, pH)
    for K in pH.cells:
        if 0 < K.index[0] < 3 and 0 < K.index[1] < 3:
            np.testing.assert_allclose(r.alpha[K.id], t.alpha[K.id], rtol=0.05, atol=0.05 * t.alpha[K.id].max())
