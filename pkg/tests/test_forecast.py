import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridflow.forecast import (
    BaselineARForecaster,
    ErrorModel,
    ForecastError,
    ForecastModel,
    _lag_matrix,
    fit,
    fit_baseline,
    fit_error_model,
    fit_residual_ar,
    forecast,
    iterated_one_step,
    sample_scenarios,
)
from synth import ar1_with_baseline

PERIODS = [96, 672, 35064]  # day, week, year at 15-minute resolution


def _exact_baseline(t):
    return 4.0 + 1.5 * np.sin(2 * np.pi * t / 96) - 0.5 * np.cos(2 * np.pi * t / 96) + 0.25 * np.sin(2 * np.pi * t / 672)


def test_baseline_recovers_exact_sinusoids():
    t = np.arange(2000)
    model = fit_baseline(_exact_baseline(t), [96, 672])
    assert model.beta0 == pytest.approx(4.0, abs=1e-6)
    assert np.allclose(model.alpha, [1.5, 0.25], atol=1e-6)
    assert np.allclose(model.beta, [-0.5, 0.0], atol=1e-6)


def test_baseline_parameter_count_and_residual_orthogonality():
    rng = np.random.default_rng(0)
    periods = [96, 192, 288, 384, 480, 672, 1344, 35064]
    x = rng.normal(size=3000) + 2
    model = fit_baseline(x, periods)
    assert model.n_params == 17
    from gridflow.forecast import _design

    X = _design(np.arange(x.size), periods)
    res = x - model(np.arange(x.size))
    assert np.max(np.abs(X.T @ res)) <= 1e-8 * np.abs(x).sum()


def test_baseline_errors():
    with pytest.raises(ForecastError, match="duplicate"):
        fit_baseline(np.ones(100), [96, 96])
    with pytest.raises(ForecastError, match="at least"):
        fit_baseline(np.ones(4), [96])


def test_zero_residuals_give_zero_gamma_and_baseline_forecast():
    t = np.arange(1500)
    model = fit(_exact_baseline(t), [96, 672], M=8, T=12)
    assert np.max(np.abs(model.ar.gamma)) <= 1e-6
    pred = forecast(model, _exact_baseline(np.arange(992, 1000)), t=999)
    assert np.allclose(pred, _exact_baseline(np.arange(1000, 1011)), atol=1e-6)


def test_gamma_shape_for_day_ahead_wind_model():
    rng = np.random.default_rng(1)
    r = rng.normal(size=2 * 288 + 288 + 400)
    model = fit_residual_ar(r, M=288, T=288)
    assert model.gamma.shape == (287, 288)


def test_lag_matrix_alignment():
    r = np.arange(10.0)
    X, Y, origins = _lag_matrix(r, M=3, T=4)
    assert origins[0] == 2 and origins[-1] == 6
    assert list(X[0]) == [2.0, 1.0, 0.0]  # most recent first
    assert list(Y[0]) == [3.0, 4.0, 5.0]


def test_ar1_recovery_on_long_series():
    x = ar1_with_baseline(96 * 200, seed=3)
    model = fit(x, [96], M=1, T=6)
    assert model.baseline.beta0 == pytest.approx(3.0, abs=0.05)
    assert model.baseline.alpha[0] == pytest.approx(2.0, abs=0.05)
    assert np.allclose(model.ar.gamma[:, 0], 0.9 ** np.arange(1, 6), atol=0.05)


def test_forecast_matches_analytic_ar1_prediction():
    x = ar1_with_baseline(96 * 200, seed=4)
    model = fit(x, [96], M=1, T=6)
    t = 5000
    pred = forecast(model, x[t : t + 1], t=t)
    b = model.baseline
    r_t = x[t] - b(t)[0]
    analytic = b(t + np.arange(1, 6)) + 0.9 ** np.arange(1, 6) * r_t
    assert np.allclose(pred, analytic, atol=0.05 * (1 + abs(r_t)))


def test_direct_beats_iterated_under_misspecification():
    # AR(1) state observed through white noise is ARMA(1,1); a one-step AR(1)
    # fit underestimates persistence, and iterating it compounds the error
    kw = dict(rho=0.9, sigma=0.1, measurement_noise=0.3)
    train = ar1_with_baseline(96 * 60, seed=10, **kw)
    valid = ar1_with_baseline(96 * 60, seed=11, t0=train.size, **kw)
    model = fit(train, [96], M=1, T=11)
    r = valid - model.baseline(train.size + np.arange(valid.size))
    X, Y, _ = _lag_matrix(r, 1, 11)
    direct = np.mean((Y[:, 9] - X @ model.ar.gamma[9]) ** 2)
    iterated = np.array([iterated_one_step(model.ar, X[i, ::-1], 10)[-1] for i in range(len(X))])
    assert direct < np.mean((Y[:, 9] - iterated) ** 2)


def test_clip_range():
    x = np.clip(ar1_with_baseline(96 * 20, seed=5, beta0=8, alpha1=9, sigma=1.0), 0, 16)
    model = fit(x, [96], M=4, T=24, clip=(0.0, 16.0))
    for t in range(100, 1800, 97):
        pred = forecast(model, x[t - 3 : t + 1], t=t)
        assert pred.shape == (23,)
        assert pred.min() >= 0.0 and pred.max() <= 16.0


def test_short_window_rejected():
    model = fit(ar1_with_baseline(2000, seed=0), [96], M=5, T=4)
    with pytest.raises(ForecastError, match="last 5"):
        forecast(model, np.ones(3), t=10)


def _wind_like_model():
    x = ar1_with_baseline(96 * 30, seed=7)
    model = fit(x[: 96 * 20], [96], M=3, T=9)
    model.errors = fit_error_model(model, x[96 * 20 :], t0=96 * 20)
    return model


def test_error_model_needs_two_vectors():
    model = fit(ar1_with_baseline(2000, seed=0), [96], M=2, T=5)
    with pytest.raises(ForecastError, match="2 error vectors"):
        fit_error_model(model, np.ones(6))


def test_zero_covariance_scenarios_equal_point():
    point = np.linspace(1, 2, 6)
    err = ErrorModel(np.zeros(6), np.zeros((6, 6)), 10)
    s = sample_scenarios(point, err, K=5, seed=1)
    assert np.array_equal(s, np.tile(point, (5, 1)))


def test_semidefinite_covariance_uses_eigen_fallback():
    # a zero pivot makes the Cholesky factorization fail
    cov = np.diag([1.0, 0.0, 4.0])
    s = sample_scenarios(np.ones(3), ErrorModel(np.zeros(3), cov, 10), K=500, seed=2)
    assert np.all(s[:, 1] == 1.0)
    assert s[:, 2].std() == pytest.approx(2.0, rel=0.15)
    # rank one: every draw lies on the span of v up to rounding
    v = np.array([1.0, 2.0, -1.0])
    s = sample_scenarios(np.zeros(3), ErrorModel(np.zeros(3), np.outer(v, v), 10), K=200, seed=2)
    assert np.allclose(np.cross(s, v), 0.0, atol=1e-6)


def test_scenarios_are_deterministic_and_distinct():
    model = _wind_like_model()
    point = np.full(8, 3.0)
    a = sample_scenarios(point, model.errors, 3, seed=42)
    b = sample_scenarios(point, model.errors, 3, seed=42)
    assert a.tobytes() == b.tobytes()
    assert len({row.tobytes() for row in a}) == 3
    assert not np.array_equal(a, sample_scenarios(point, model.errors, 3, seed=43))


def test_scenario_sample_moments():
    model = _wind_like_model()
    point = np.linspace(2, 4, 8)
    s = sample_scenarios(point, model.errors, 10_000, seed=0)
    sd = np.sqrt(np.diag(model.errors.cov))
    assert np.all(np.abs(s.mean(axis=0) - point - model.errors.mean) <= 3 * sd / 100)
    assert np.allclose(np.cov(s, rowvar=False), model.errors.cov, atol=0.1 * sd.max() ** 2)


def test_model_round_trip(tmp_path):
    model = _wind_like_model()
    model.meta["start"] = "2012-01-01T00:00:00"
    path = tmp_path / "m.json"
    model.save(path)
    back = ForecastModel.load(path)
    assert np.array_equal(back.ar.gamma, model.ar.gamma)
    assert np.array_equal(back.errors.cov, model.errors.cov)
    assert back.meta == model.meta
    with pytest.raises(ForecastError):
        ForecastModel.from_dict({"format": "other"})


def test_forecaster_pads_missing_lags_with_baseline():
    model = _wind_like_model()
    fc = BaselineARForecaster(model)
    history = np.array([model.baseline(0)[0]])
    # only one observation but M = 3: padding with baseline gives zero residuals
    pred = fc.predict(history, 0, 5)
    assert np.allclose(pred, model.baseline(np.arange(1, 6)), atol=1e-12)
    with pytest.raises(ForecastError):
        fc.predict(history, 0, 20)


def test_forecaster_scenarios_shape_and_seed():
    model = _wind_like_model()
    fc = BaselineARForecaster(model, seed=5)
    hist = ar1_with_baseline(50, seed=0)
    s1 = fc.scenarios(hist, 10, 6, 4)
    assert s1.shape == (6, 4)
    assert np.array_equal(s1, BaselineARForecaster(model, seed=5).scenarios(hist, 10, 6, 4))


@settings(max_examples=30, deadline=None)
@given(M=st.integers(1, 6), T=st.integers(2, 10), seed=st.integers(0, 1000))
def test_shared_factorization_matches_per_horizon_ridge(M, T, seed):
    # fitting all horizons at once gives the same row as a separate ridge fit
    r = np.random.default_rng(seed).normal(size=300)
    full = fit_residual_ar(r, M, T)
    X, Y, _ = _lag_matrix(r, M, T)
    assert full.gamma.shape == (T - 1, M)
    n = X.shape[0]
    lhs = np.linalg.lstsq(np.vstack([X, np.sqrt(1e-6 * n) * np.eye(M)]),
                          np.concatenate([Y[:, 0], np.zeros(M)]), rcond=None)[0]
    assert np.allclose(full.gamma[0], lhs, atol=1e-8)
