import math

import numpy as np
import pytest

import oracles
from artifact import paths as P
from artifact.errors import DiscretizationError, ParameterError, StructuralError, UnsupportedModelError

GRID = P.TimeGrid(0.0, 1.0, 200)

MODELS = [
    P.ReflectedGBM(100, 80, 0.05, 0.2), P.GBM(1, 0.1, 0.3), P.SkewBM(0.0, 0.7), P.Bessel3(1.0),
    P.BesselIndex(1.0, -0.5), P.SquaredBessel(1.0, 1.0), P.LocalTimeAlpha(1.0, 0.5, 2.0),
    P.DoublyReflectedBM(1.5, 1.0, 2.0), P.SqrtDrift(1.0), P.ConstDriftGBM(1.0, 1.0), P.WilliamsBessel(2.0, 1.0),
]


def test_time_grid():
    g = P.TimeGrid(0.0, 2.0, 4)
    assert g.dt == 0.5
    np.testing.assert_allclose(g.times, [0, 0.5, 1, 1.5, 2])
    assert P.TimeGrid.from_dt(1.0, 1e-3).n_steps == 1000
    with pytest.raises(ParameterError):
        P.TimeGrid(1.0, 1.0, 3)
    with pytest.raises(ParameterError):
        P.TimeGrid(0.0, 1.0, 0)


@pytest.mark.parametrize("bad", [
    lambda: P.ReflectedGBM(100, 120, 0, 0.2), lambda: P.SkewBM(0, 1.0), lambda: P.LocalTimeAlpha(1, 2, 2),
    lambda: P.LocalTimeAlpha(1, 0.5, 0.5), lambda: P.DoublyReflectedBM(1, 2, 1), lambda: P.Bessel3(-1),
    lambda: P.WilliamsBessel(1, 2), lambda: P.ReflectedGBM(math.nan, 80, 0, 0.2),
])
def test_invalid_parameters(bad):
    with pytest.raises(ParameterError):
        bad()


@pytest.mark.parametrize("model", MODELS, ids=lambda m: type(m).__name__)
def test_sample_path_invariants(model):
    b = P.simulate_batch(model, GRID, 3, np.arange(64))
    b.check()
    assert b.values.shape == (64, 201)
    assert np.all(np.diff(b.kappa_var, axis=1) >= -1e-12)
    assert np.all(b.kappa_var[:, -1] >= np.abs(b.kappa[:, -1] - b.kappa[:, 0]) - 1e-12)
    for lt in b.local_times.values():
        assert np.all(np.diff(lt, axis=1) >= -1e-12)
    for i in np.nonzero(b.absorbed_at >= 0)[0]:
        assert np.all(b.values[i, b.absorbed_at[i]:] == 0)
        assert np.all(b.driver_increments[i, b.absorbed_at[i]:] == 0)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: type(m).__name__)
def test_determinism_independent_of_batching(model):
    whole = P.simulate_batch(model, GRID, 11, np.arange(300))
    parts = [P.simulate_batch(model, GRID, 11, np.arange(a, b)) for a, b in ((0, 7), (7, 256), (256, 300))]
    np.testing.assert_array_equal(whole.values, np.concatenate([p.values for p in parts]))
    single = P.simulate(model, GRID, P.RngSpec(11, 123))
    np.testing.assert_array_equal(single.values, whole.values[123])


def test_prefix_consistency_across_horizons():
    m = P.Bessel3(1.0)
    short = P.simulate_batch(m, P.TimeGrid(0, 0.5, 100), 5, np.arange(10))
    long = P.simulate_batch(m, P.TimeGrid(0, 1.0, 200), 5, np.arange(10))
    np.testing.assert_array_equal(short.values, long.values[:, :101])


def test_degenerate_reflected_gbm_is_constant():
    b = P.simulate_batch(P.ReflectedGBM(100, 80, 0.0, 0.0), GRID, 0, np.arange(4))
    assert np.all(b.values == 100) and np.all(b.kappa == 0)


def test_skorokhod_identity_reflected_gbm():
    m = P.ReflectedGBM(100, 95, 0.0, 0.3)
    b = P.simulate_batch(m, GRID, 1, np.arange(200))
    assert np.all(b.values >= m.b)
    dk = np.diff(b.kappa, axis=1)
    # reflection only acts while the price sits on the barrier
    assert np.all(b.values[:, 1:][dk > 0] == m.b)
    assert np.any(dk > 0)


def test_bessel3_mean_matches_quadrature():
    b = P.simulate_batch(P.Bessel3(1.0), P.TimeGrid(0, 1.0, 20), 2, np.arange(100_000))
    x = b.values[:, -1]
    ref = oracles.bessel3_mean(1.0, 1.0)
    assert abs(x.mean() - ref) < 3 * x.std() / math.sqrt(x.size)


def test_localtime_alpha_one_is_reflected_at_level():
    m = P.LocalTimeAlpha(1.0, 0.3, 1.0)
    b = P.simulate_batch(m, GRID, 0, np.arange(100))
    assert b.values.min() >= m.s0 - m.beta0_abs


def test_absorption_bessel_index_and_const_drift():
    for m in (P.BesselIndex(0.2, -0.5), P.ConstDriftGBM(0.3, 1.0)):
        b = P.simulate_batch(m, GRID, 0, np.arange(500))
        assert np.any(b.absorbed_at >= 0)


def test_skew_occupation_fraction_converges():
    # zero detection on the grid biases the occupation by O(sqrt dt); the bias must shrink at that rate
    m = P.SkewBM(0.0, 0.7)
    bias = []
    for n in (100, 1600):
        b = P.simulate_batch(m, P.TimeGrid(0, 1, n), 4, np.arange(10_000))
        frac = (b.values[:, 1:] > 0).mean(axis=1)
        se = frac.std() / math.sqrt(frac.size)
        bias.append(0.7 - frac.mean())
        assert abs(bias[-1]) < 3 * se + 1.5 * math.sqrt(1 / n)
    assert bias[1] < bias[0] / 2.5


def test_future_infimum_bounds_and_tail_law():
    b = P.future_infimum(P.simulate_batch(P.Bessel3(1.0), GRID, 0, np.arange(2000)))
    j = b.future_inf
    assert np.all(np.diff(j, axis=1) >= 0)
    assert np.all(j <= b.values)
    ratio = j[:, -1] / b.values[:, -1]  # uniform on [0, 1] for the post-horizon tail
    assert abs(ratio.mean() - 0.5) < 3 * math.sqrt(1 / 12 / ratio.size)


def test_future_infimum_recurrent_model_rejected():
    with pytest.raises(UnsupportedModelError):
        P.future_infimum(P.simulate_batch(P.SkewBM(0, 0.6), GRID, 0, np.arange(2)))


def test_local_time_estimate():
    m = P.ReflectedGBM(100, 95, 0.0, 0.2)
    g = P.TimeGrid(0, 1, 10_000)
    b = P.simulate_batch(m, g, 0, np.arange(200))
    est = P.local_time_estimate(b, m.b, 2 * math.sqrt(g.dt) * m.sigma * m.b)
    exact = b.local_times[float(m.b)][:, -1]
    sel = exact > 1.0
    rel = abs(est[sel, -1].sum() / exact[sel].sum() - 1)
    assert rel < 0.1
    far = P.local_time_estimate(b, 1000.0, 1.0)
    assert np.all(far == 0)


def test_williams_bessel_survival():
    g = P.TimeGrid(0, 1, 1000)
    b = P.simulate_batch(P.WilliamsBessel(2.0, 1.0), g, 0, np.arange(20_000))
    survived = (b.markers["rho_plus_index"] > g.n_steps).astype(float)
    ref = 2 * oracles.norm_cdf(1.0) - 1
    assert abs(survived.mean() - ref) < 3 * survived.std() / math.sqrt(survived.size)
    assert b.values.min() >= 1.0 - 1e-12


def test_guard_fraction_raises():
    with pytest.raises(DiscretizationError):
        P.simulate_batch(P.BesselIndex(1.0, 0.0), P.TimeGrid(0, 1, 4), 0, np.arange(256),
                         max_guard_fraction=1e-6)


def test_coarsen_structure():
    b = P.simulate_batch(P.Bessel3(1.0), GRID, 0, np.arange(3))
    c = P.coarsen(b, 4)
    np.testing.assert_array_equal(c.values, b.values[:, ::4])
    with pytest.raises(StructuralError):
        P.coarsen(b, 3)
