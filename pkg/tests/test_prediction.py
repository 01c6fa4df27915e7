import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from hbuq.errors import ExcessiveRejection, ImproperDensity, InvalidConfig
from hbuq.hyper import HyperParameters
from hbuq.model import SdofSpec, three_story_building, simulate
from hbuq.prediction import (
    CHUNK,
    ParameterSamples,
    PredictionConfig,
    band_multiplier,
    credible_band,
    noise_variance,
    predictive_density,
    predictive_moments,
    read_prediction_csv,
    sample_parameters,
    write_prediction,
)

SPEC = SdofSpec(0.16, 0.05)
HYPER = HyperParameters([0.16], [[0.005 ** 2]])
DT, N = 0.02, 300
U = np.random.default_rng(5).standard_normal(N)
PSI = np.zeros(2)


def moments(samples, alpha0=2.0, beta0=0.0, **kw):
    return predictive_moments(samples, SPEC, PSI, U, DT, N, alpha0, beta0, **kw)


# -- parameter sampling ---------------------------------------------------------

def test_sampling_moments():
    hp = HyperParameters([1.0, 2.0, 0.5], [[0.04, 0.01, 0.0], [0.01, 0.09, -0.02], [0.0, -0.02, 0.16]])
    s = sample_parameters(hp, 100_000, seed=4)
    assert s.theta.shape == (100_000, 3) and s.rejected == 0
    se_mean = np.sqrt(np.diag(hp.cov) / 1e5)
    assert np.all(np.abs(s.theta.mean(axis=0) - hp.mean) < 3 * se_mean)
    C = np.cov(s.theta.T)
    # SE of a Gaussian sample covariance entry: sqrt((S_ij^2 + S_ii S_jj) / N)
    se_cov = np.sqrt((hp.cov ** 2 + np.outer(np.diag(hp.cov), np.diag(hp.cov))) / 1e5)
    assert np.all(np.abs(C - hp.cov) < 3 * se_cov)


def test_sampling_is_deterministic():
    a = sample_parameters(HYPER, 50, seed=3).theta
    b = sample_parameters(HYPER, 50, seed=3).theta
    c = sample_parameters(HYPER, 50, seed=4).theta
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rejection_replaces_infeasible_draws():
    hp = HyperParameters([0.02], [[0.02 ** 2]])
    s = sample_parameters(hp, 200, seed=0, spec=SPEC)
    assert len(s) == 200 and np.all(s.theta > 0)
    assert 0 < s.rejected < 200


def test_excessive_rejection():
    with pytest.raises(ExcessiveRejection):
        sample_parameters(HyperParameters([-1.0], [[0.01]]), 100, seed=0, spec=SPEC)


def test_invalid_config():
    with pytest.raises(InvalidConfig):
        PredictionConfig(alpha0=1.0).validate()
    with pytest.raises(InvalidConfig):
        PredictionConfig(beta0=-1.0).validate()
    with pytest.raises(InvalidConfig):
        PredictionConfig(n_samples=0).validate()
    with pytest.raises(InvalidConfig):
        PredictionConfig(level=1.0).validate()
    cfg = PredictionConfig(alpha0=3.0, n_samples=10)
    assert PredictionConfig.from_dict(cfg.to_dict()) == cfg


# -- moments ----------------------------------------------------------------------

def test_noise_variance_alpha_two():
    assert noise_variance(2.0, 0.37) == pytest.approx(0.37, rel=1e-15)
    assert noise_variance(3.0, 0.6) == pytest.approx(0.3, rel=1e-15)


def test_single_sample_has_zero_covariance():
    s = ParameterSamples(np.array([[0.16]]), 0, None)
    m = moments(s)
    for q in m.mean:
        assert np.all(m.cov[q] == 0)
        h = simulate(SPEC, [0.16], PSI, U, DT, N)
        np.testing.assert_allclose(m.mean[q], h.quantity(q), rtol=1e-13, atol=1e-300)
    lo, hi = credible_band(m, 0.99)["displacement"]
    np.testing.assert_array_equal(lo, hi)


def test_moments_match_direct_computation():
    s = sample_parameters(HYPER, 2 * CHUNK + 17, seed=1)
    m = moments(s, alpha0=3.0, beta0=0.2)
    X = np.array([simulate(SPEC, t, PSI, U, DT, N).displacement for t in s.theta])
    np.testing.assert_allclose(m.mean["displacement"], X.mean(axis=0), rtol=1e-10, atol=1e-14)
    var = X.var(axis=0)[0] + 0.1
    np.testing.assert_allclose(m.variance("displacement")[0], var, rtol=1e-9)


def test_brute_force_monte_carlo():
    # alpha0 = 3 keeps the fourth moment of the noise finite, so the variance has a standard error
    alpha0, beta0, n_s = 3.0, 4e-4, 4000
    s = sample_parameters(HYPER, n_s, seed=2)
    m = moments(s, alpha0, beta0)
    rng = np.random.default_rng(99)
    n_mc = 20000
    thetas = HYPER.mean + np.sqrt(HYPER.cov[0, 0]) * rng.standard_normal((n_mc, 1))
    ks = [50, 150, 299]
    X = np.array([simulate(SPEC, t, PSI, U, DT, N).displacement[0, ks] for t in thetas])
    X = X + stats.t.rvs(2 * alpha0, scale=np.sqrt(beta0 / alpha0), size=X.shape, random_state=rng)
    for j, k in enumerate(ks):
        v = m.variance("displacement")[0, k]
        se_mean = np.sqrt(v / n_s + v / n_mc)
        assert abs(m.mean["displacement"][0, k] - X[:, j].mean()) < 3 * se_mean
        mc_var = X[:, j].var()
        kurt = stats.kurtosis(X[:, j], fisher=False)
        se_var = np.sqrt((kurt - 1) * v ** 2 * (1 / n_s + 1 / n_mc))
        assert abs(v - mc_var) < 3 * se_var


def test_mean_is_linear_in_input():
    s = sample_parameters(HYPER, 40, seed=0)
    a = predictive_moments(s, SPEC, PSI, U, DT, N, 2.0, 0.0)
    b = predictive_moments(s, SPEC, PSI, 3 * U, DT, N, 2.0, 0.0)
    np.testing.assert_allclose(b.mean["velocity"], 3 * a.mean["velocity"], rtol=1e-10, atol=1e-15)
    np.testing.assert_allclose(b.cov["velocity"], 9 * a.cov["velocity"], rtol=1e-9, atol=1e-20)


def test_noise_adds_to_covariance():
    s = sample_parameters(HYPER, 30, seed=0)
    a = moments(s, 2.0, 0.0)
    b = moments(s, 2.0, 0.05)
    np.testing.assert_allclose(b.cov["acceleration"] - a.cov["acceleration"], 0.05, rtol=1e-10)


def test_multichannel_covariance_is_psd():
    spec = three_story_building()
    theta0 = spec.nominal_theta()
    hp = HyperParameters(theta0, np.diag((0.03 * theta0) ** 2))
    s = sample_parameters(hp, 20, seed=0, spec=spec)
    u = np.random.default_rng(0).standard_normal(200)
    m = predictive_moments(s, spec, np.zeros(6), u, 0.01, 200, 2.0, 0.0)
    C = m.cov["displacement"]
    assert C.shape == (200, 3, 3)
    np.testing.assert_array_equal(C, np.swapaxes(C, 1, 2))
    w = np.linalg.eigvalsh(C[1:])
    assert w.min() > -1e-12 * max(w.max(), 1e-300)


def test_workers_do_not_change_result():
    s = sample_parameters(HYPER, 3 * CHUNK + 5, seed=6)
    a = moments(s, workers=1)
    b = moments(s, workers=2)
    for q in a.mean:
        np.testing.assert_array_equal(a.mean[q], b.mean[q])
        np.testing.assert_array_equal(a.cov[q], b.cov[q])


# -- density and bands ---------------------------------------------------------------

def test_density_requires_positive_beta():
    with pytest.raises(ImproperDensity):
        predictive_density([0.0], 10, np.array([[0.16]]), SPEC, PSI, U, DT, 2.0, 0.0)


def test_density_normalized_and_symmetric():
    alpha0, beta0, k = 2.0, 1e-4, 120
    thetas = np.array([[0.16]])
    x = simulate(SPEC, [0.16], PSI, U[:k + 1], DT, k + 1).displacement[0, k]
    scale = np.sqrt(beta0 / alpha0)
    f = lambda w: predictive_density([w], k, thetas, SPEC, PSI, U, DT, alpha0, beta0)
    total, _ = integrate.quad(f, x - 400 * scale, x + 400 * scale, points=[x], limit=200)
    tail = 2 * stats.t.sf(400, 2 * alpha0)
    assert total + tail == pytest.approx(1.0, abs=1e-6)
    for d in [0.3, 1.0, 5.0]:
        assert f(x + d * scale) == pytest.approx(f(x - d * scale), rel=1e-10)
    # heavier tail than a Gaussian of the same variance
    sd = np.sqrt(noise_variance(alpha0, beta0))
    assert f(x + 6 * sd) > stats.norm.pdf(6, scale=1) / sd


def test_density_mixture_integrates_to_one():
    thetas = sample_parameters(HYPER, 5, seed=0).theta
    f = lambda w: predictive_density([w], 80, thetas, SPEC, PSI, U, DT, 3.0, 1e-3)
    total, _ = integrate.quad(f, -2, 2, limit=200)
    assert total == pytest.approx(1.0, abs=1e-5)


def test_band_multiplier():
    assert band_multiplier(0.99) == pytest.approx(2.5758293035489004, rel=1e-12)
    assert band_multiplier(0.95) == pytest.approx(1.959963984540054, rel=1e-12)
    with pytest.raises(InvalidConfig):
        band_multiplier(0.0)


@given(st.floats(0.05, 0.9), st.floats(0.01, 0.09))
def test_bands_nest_with_level(level, extra):
    s = sample_parameters(HYPER, 10, seed=0)
    m = moments(s, 2.0, 1e-6)
    lo_a, hi_a = credible_band(m, level)["displacement"]
    lo_b, hi_b = credible_band(m, level + extra)["displacement"]
    assert np.all(lo_b <= lo_a) and np.all(hi_b >= hi_a)


def test_csv_round_trip(tmp_path):
    s = sample_parameters(HYPER, 12, seed=0)
    m = moments(s, 2.0, 1e-6)
    paths = write_prediction(m, tmp_path, 0.99)
    assert (tmp_path / "prediction_meta.json").exists()
    back = read_prediction_csv(paths["velocity"])
    np.testing.assert_array_equal(back["mean"], m.mean["velocity"])
    np.testing.assert_array_equal(back["var"], m.variance("velocity"))
    np.testing.assert_allclose(back["t"], m.time, rtol=1e-15)
    lo, hi = credible_band(m, 0.99)["velocity"]
    np.testing.assert_array_equal(back["lo"], lo)
    np.testing.assert_array_equal(back["hi"], hi)
