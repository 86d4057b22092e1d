import numpy as np
import pytest
from sklearn.base import clone

from mchom import fem
from mchom.downscale import MacroField
from mchom.estimators import MulticontinuumHomogenizer, NLMCBasis, check_coefficient, check_scale


def test_check_coefficient_shapes(channels32):
    f, _ = channels32
    assert check_coefficient(f) is f
    sq = check_coefficient(f.values.reshape(32, 32))
    flat = check_coefficient(f.values)
    np.testing.assert_array_equal(sq.values, flat.values)
    with pytest.raises(ValueError):
        check_coefficient(np.ones(30))
    with pytest.raises(ValueError):
        check_coefficient(np.ones((4, 5)))
    with pytest.raises(ValueError):
        check_scale(1 / 32, 32, "scale_eps", min_cells=2)


def test_params_and_clone():
    est = MulticontinuumHomogenizer(scale=1 / 4, scale_eps=1 / 8, k_layers=2)
    params = est.get_params()
    assert params["scale_eps"] == 1 / 8 and params["bc"] == "dirichlet"
    c = clone(est)
    assert c.get_params() == params and c is not est
    c.set_params(bc="natural")
    assert est.bc == "dirichlet"
    assert NLMCBasis(k_layers=3).get_params()["k_layers"] == 3


def test_nlmc_transform_round_trip(channels32):
    f, c = channels32
    est = NLMCBasis(scale_eps=1 / 8, k_layers=2).fit(f.values.reshape(32, 32), c)
    rng = np.random.default_rng(0)
    avgs = rng.standard_normal((3, est.n_features_out_))
    u = est.inverse_transform(avgs)
    assert u.shape == (3, f.grid.n_nodes)
    np.testing.assert_allclose(est.transform(u), avgs, atol=1e-8)
    np.testing.assert_allclose(est.transform(u[0]), avgs[0], atol=1e-8)


def test_nlmc_predict_close_to_fine(channels32):
    f, c = channels32
    est = NLMCBasis(scale_eps=1 / 8, k_layers=3).fit(f, c)
    load = lambda x, y: np.sin(3 * np.pi * x) * np.cos(2 * np.pi * y) + x
    u = fem.solve_fine_reference(f.grid, f, load)
    ums = est.predict(load)
    rel = fem.norms(ums - u, f)["energy"] / fem.norms(u, f)["energy"]
    assert rel < 0.5
    # the Galerkin solution is the energy-best element of the span
    proj = est.inverse_transform(est.transform(u))
    assert fem.norms(ums - u, f)["energy"] <= fem.norms(proj - u, f)["energy"] * (1 + 1e-9)


def test_unfitted_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        NLMCBasis().transform(np.zeros(4))
    with pytest.raises(NotFittedError):
        MulticontinuumHomogenizer().predict(1.0)


def test_homogenizer_fit_predict(channels32):
    f, c = channels32
    est = MulticontinuumHomogenizer(scale=1 / 4, scale_eps=1 / 8, k_layers=2).fit(f, c)
    assert est.tensors_.n_cells == 16 and est.tensors_.symmetry_violation() <= 1e-12
    sol = est.predict(1.0)
    assert sol.U.shape == (2, 25) and sol.residual <= 1e-10
    assert sol.reconstruction.shape == (f.grid.n_cells, 4)
    np.testing.assert_array_equal(est.transform(sol.field()), sol.reconstruction)
    zero = est.predict(0.0)
    assert np.all(zero.U == 0)


def test_homogenizer_rve_and_validation(channels32):
    f, c = channels32
    full = MulticontinuumHomogenizer(scale=1 / 4, scale_eps=1 / 8, k_layers=2).fit(f, c)
    rve = MulticontinuumHomogenizer(scale=1 / 4, scale_eps=1 / 8, k_layers=2, rve_window=1 / 4).fit(f, c)
    np.testing.assert_allclose(rve.tensors_.gram, full.tensors_.gram, atol=1e-12 * np.abs(full.tensors_.gram).max())
    for bad in ({"scale": 1 / 3}, {"scale_eps": 1 / 32}, {"bc": "robin"}, {"rve_window": 3 / 32}):
        with pytest.raises(ValueError):
            MulticontinuumHomogenizer(**{"scale": 1 / 4, "scale_eps": 1 / 8, **bad}).fit(f, c)


def test_homogenizer_transform_zero_field(channels32):
    f, c = channels32
    est = MulticontinuumHomogenizer(scale=1 / 4, scale_eps=1 / 8, k_layers=1).fit(f, c)
    n = len(est.partition_)
    U = MacroField.from_cell_data(est.partition_, np.zeros((n, 2)), np.zeros((n, 2, 2)))
    assert np.all(est.transform(U) == 0)
