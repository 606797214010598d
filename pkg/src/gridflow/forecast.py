"""Baseline + residual forecasting and scenario generation.

The series is split as ``x_t = b_t + r_t`` where the baseline ``b_t`` is a
constant plus sinusoids of given periods and the residual is forecast by a
separate linear regression on the last ``M`` residuals for every horizon
``tau = 1..T-1`` (direct multi-step prediction, no iteration of a one-step
model).  Forecast errors on held-out data are summarized by a Gaussian,
from which scenario trajectories are drawn.

Time indices are absolute: a model fitted on a series starting at ``t0``
evaluates its baseline at ``t0, t0+1, ...``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

FORMAT_VERSION = 1


class ForecastError(ValueError):
    pass


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


def _design(t: np.ndarray, periods) -> np.ndarray:
    cols = [np.ones(t.size)]
    for P in periods:
        w = 2 * np.pi * t / P
        cols.append(np.sin(w))
        cols.append(np.cos(w))
    return np.column_stack(cols)


@dataclass
class BaselineModel:
    periods: np.ndarray
    beta0: float
    alpha: np.ndarray  # sine coefficients
    beta: np.ndarray  # cosine coefficients

    @property
    def n_params(self) -> int:
        return 1 + 2 * len(self.periods)

    @property
    def coef(self) -> np.ndarray:
        c = [self.beta0]
        for a, b in zip(self.alpha, self.beta):
            c += [a, b]
        return np.array(c)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return _design(t.reshape(-1), self.periods) @ self.coef


def _lstsq_qr(X: np.ndarray, Y: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Least squares via economic QR; ``ridge`` is added to the mean-square loss."""
    n, k = X.shape
    if ridge > 0:
        X = np.vstack([X, np.sqrt(ridge * n) * np.eye(k)])
        Y = np.vstack([Y, np.zeros((k,) + Y.shape[1:])]) if Y.ndim == 2 else np.concatenate([Y, np.zeros(k)])
    Q, R = np.linalg.qr(X, mode="reduced")
    d = np.abs(np.diag(R))
    if d.size and d.min() <= 1e-10 * max(d.max(), 1e-300):
        raise ForecastError("rank-deficient regression design (duplicate periods or too little data)")
    return sla.solve_triangular(R, Q.T @ Y)


def fit_baseline(series, periods, t0: int = 0) -> BaselineModel:
    """Least-squares fit of ``beta0 + sum_k alpha_k sin + beta_k cos``."""
    x = np.asarray(series, dtype=float).reshape(-1)
    periods = np.asarray(periods, dtype=float).reshape(-1)
    if np.any(periods <= 0):
        raise ForecastError("periods must be positive")
    if np.unique(periods).size != periods.size:
        raise ForecastError("rank-deficient design: duplicate periods")
    k = 1 + 2 * periods.size
    if x.size < 2 * k:
        raise ForecastError(f"need at least {2 * k} samples to fit {k} baseline coefficients")
    t = t0 + np.arange(x.size)
    c = _lstsq_qr(_design(t, periods), x)
    return BaselineModel(periods, float(c[0]), c[1::2].copy(), c[2::2].copy())


# ---------------------------------------------------------------------------
# residual auto-regression
# ---------------------------------------------------------------------------


@dataclass
class ResidualARModel:
    M: int
    T: int
    gamma: np.ndarray  # (T-1, M); column j multiplies r_{t-j}
    ridge: float = 1e-6

    def predict(self, recent: np.ndarray) -> np.ndarray:
        """Residual forecasts for ``tau = 1..T-1`` from the last ``M`` residuals
        (``recent[-1]`` is the current one)."""
        recent = np.asarray(recent, float)
        if recent.shape[-1] < self.M:
            raise ForecastError(f"need the last {self.M} values, got {recent.shape[-1]}")
        lags = recent[..., ::-1][..., : self.M]  # r_t, r_{t-1}, ...
        return lags @ self.gamma.T


def _lag_matrix(r: np.ndarray, M: int, T: int):
    """Rows for every origin ``t`` with ``M`` past and ``T-1`` future values."""
    L = r.size
    origins = np.arange(M - 1, L - T + 1)
    if origins.size == 0:
        raise ForecastError("series too short for the requested lags and horizon")
    X = np.lib.stride_tricks.sliding_window_view(r, M)[origins - M + 1][:, ::-1]
    Y = np.lib.stride_tricks.sliding_window_view(r, T)[origins][:, 1:]
    return X, Y, origins


def fit_residual_ar(residuals, M: int, T: int, ridge: float = 1e-6) -> ResidualARModel:
    """Direct multi-step fit: one ridge regression per horizon ``tau``.

    All horizons share the same regressors, so a single QR factorization
    serves every ``tau``; the coefficients are identical to fitting each
    row on its own.
    """
    r = np.asarray(residuals, float).reshape(-1)
    if M < 1 or T < 2:
        raise ForecastError("need M >= 1 and T >= 2")
    if r.size < M + T + M:
        raise ForecastError(f"need at least {2 * M + T} residuals, got {r.size}")
    X, Y, _ = _lag_matrix(r, M, T)
    if not np.any(X):
        return ResidualARModel(M, T, np.zeros((T - 1, M)), ridge)
    G = _lstsq_qr(X, Y, ridge)  # (M, T-1)
    return ResidualARModel(M, T, G.T.copy(), ridge)


def iterated_one_step(model_one_step: ResidualARModel, recent, steps: int) -> np.ndarray:
    """Iterate a one-step predictor ``steps`` times (reference method only)."""
    g = model_one_step.gamma[0]
    buf = list(np.asarray(recent, float)[-model_one_step.M :])
    out = []
    for _ in range(steps):
        nxt = float(np.dot(g, buf[::-1][: model_one_step.M]))
        out.append(nxt)
        buf.append(nxt)
    return np.array(out)


# ---------------------------------------------------------------------------
# combined model
# ---------------------------------------------------------------------------


@dataclass
class ErrorModel:
    mean: np.ndarray  # (T-1,)
    cov: np.ndarray  # (T-1, T-1)
    n_samples: int

    def __post_init__(self):
        C = np.asarray(self.cov, float)
        C = 0.5 * (C + C.T)
        w, V = np.linalg.eigh(C)
        if np.any(w < 0):
            C = (V * np.maximum(w, 0.0)) @ V.T
            C = 0.5 * (C + C.T)
        self.cov = C
        self.mean = np.asarray(self.mean, float)


@dataclass
class ForecastModel:
    baseline: BaselineModel
    ar: ResidualARModel
    clip: tuple | None = None
    errors: ErrorModel | None = None
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.ar.M

    @property
    def T(self) -> int:
        return self.ar.T

    def to_dict(self) -> dict:
        d = {
            "format": "gridflow-forecast",
            "version": FORMAT_VERSION,
            "baseline": {
                "periods": self.baseline.periods.tolist(),
                "beta0": self.baseline.beta0,
                "alpha": self.baseline.alpha.tolist(),
                "beta": self.baseline.beta.tolist(),
            },
            "ar": {"M": self.ar.M, "T": self.ar.T, "ridge": self.ar.ridge, "gamma": self.ar.gamma.tolist()},
            "clip": list(self.clip) if self.clip is not None else None,
            "meta": self.meta,
        }
        if self.errors is not None:
            d["errors"] = {
                "mean": self.errors.mean.tolist(),
                "cov": self.errors.cov.tolist(),
                "n_samples": self.errors.n_samples,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ForecastModel":
        if d.get("format") != "gridflow-forecast":
            raise ForecastError("not a forecast model file")
        if d.get("version") != FORMAT_VERSION:
            raise ForecastError(f"unsupported model file version {d.get('version')}")
        b = d["baseline"]
        base = BaselineModel(np.array(b["periods"], float), float(b["beta0"]),
                             np.array(b["alpha"], float), np.array(b["beta"], float))
        a = d["ar"]
        ar = ResidualARModel(int(a["M"]), int(a["T"]), np.array(a["gamma"], float).reshape(int(a["T"]) - 1, int(a["M"])),
                             float(a["ridge"]))
        err = None
        if d.get("errors"):
            e = d["errors"]
            err = ErrorModel(np.array(e["mean"], float), np.array(e["cov"], float), int(e["n_samples"]))
        clip = tuple(d["clip"]) if d.get("clip") is not None else None
        return cls(base, ar, clip, err, d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ForecastModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit(series, periods, M: int, T: int, ridge: float = 1e-6, clip=None, t0: int = 0) -> ForecastModel:
    """Fit baseline, then the residual auto-regression, on one series."""
    x = np.asarray(series, float).reshape(-1)
    base = fit_baseline(x, periods, t0)
    r = x - base(t0 + np.arange(x.size))
    ar = fit_residual_ar(r, M, T, ridge)
    return ForecastModel(base, ar, tuple(clip) if clip is not None else None)


def _clip(v, clip):
    if clip is None:
        return v
    lo, hi = clip
    return np.clip(v, -np.inf if lo is None else lo, np.inf if hi is None else hi)


def forecast(model: ForecastModel, recent, t: int, clip=None, horizon: int | None = None) -> np.ndarray:
    """Predict ``x_{t+1}, ..., x_{t+T-1}`` from the ``M`` values ending at ``t``.

    ``clip`` (``(lo, hi)``) defaults to the model's range.  ``horizon``
    optionally truncates the output to its first ``horizon`` values.
    """
    recent = np.asarray(recent, float).reshape(-1)
    M, T = model.M, model.T
    if recent.size < M:
        raise ForecastError(f"need the last {M} observations, got {recent.size}")
    past_t = t - np.arange(M)[::-1]
    r = recent[-M:] - model.baseline(past_t)
    fut_t = t + np.arange(1, T)
    out = model.baseline(fut_t) + model.ar.predict(r)
    out = _clip(out, model.clip if clip is None else clip)
    return out if horizon is None else out[:horizon]


def forecast_errors(model: ForecastModel, series, t0: int = 0, clip=None) -> np.ndarray:
    """Error vectors ``x_{t+tau} - xhat_{t+tau|t}``, ``tau = 1..T-1``, for every
    origin ``t`` of ``series`` (starting at absolute time ``t0``)."""
    x = np.asarray(series, float).reshape(-1)
    M, T = model.M, model.T
    t_abs = t0 + np.arange(x.size)
    r = x - model.baseline(t_abs)
    X, _, origins = _lag_matrix(r, M, T)
    future = np.lib.stride_tricks.sliding_window_view(x, T)[origins][:, 1:]
    fut_t = t_abs[origins][:, None] + np.arange(1, T)[None, :]
    pred = model.baseline(fut_t.ravel()).reshape(fut_t.shape) + X @ model.ar.gamma.T
    pred = _clip(pred, model.clip if clip is None else clip)
    return future - pred


def fit_error_model(model: ForecastModel, validation, t0: int = 0, zero_mean: bool = False,
                    clip=None) -> ErrorModel:
    """Gaussian fit to the forecast errors on ``validation``.

    Errors come from the clipped forecasts (those a controller would use).
    Overlapping windows are used as they are, without correcting for their
    correlation.
    """
    E = forecast_errors(model, validation, t0, clip)
    if E.shape[0] < 2:
        raise ForecastError("need at least 2 error vectors")
    mu = np.zeros(E.shape[1]) if zero_mean else E.mean(axis=0)
    C = np.cov(E, rowvar=False).reshape(E.shape[1], E.shape[1])
    return ErrorModel(mu, C, E.shape[0])


def _factor_cov(C: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(C)
        return V * np.sqrt(np.maximum(w, 0.0))


def sample_scenarios(point, errors: ErrorModel, K: int, seed: int, clip=None) -> np.ndarray:
    """``K`` trajectories ``point + e_k`` with ``e_k ~ N(mu, Sigma)``; shape ``(K, n)``.

    Only the first ``len(point)`` coordinates of the error model are used,
    so shorter (end-of-run) forecasts are supported.
    """
    point = np.asarray(point, float).reshape(-1)
    n = point.size
    if n > errors.mean.size:
        raise ForecastError(f"error model covers {errors.mean.size} steps, forecast has {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    L = _factor_cov(errors.cov[:n, :n])
    z = rng.standard_normal((K, n))
    out = point[None, :] + errors.mean[None, :n] + z @ L.T
    return _clip(out, clip)


# ---------------------------------------------------------------------------
# forecasters used by the simulation loop
# ---------------------------------------------------------------------------


class Forecaster:
    """Produces forecasts of periods ``t+1 .. t+n`` given history up to ``t``.

    ``history`` holds every realized value from the start of the run up to
    and including period ``t``.
    """

    def predict(self, history: np.ndarray, t: int, n: int) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def scenarios(self, history: np.ndarray, t: int, n: int, K: int) -> np.ndarray:
        """``(n, K)`` array; the default repeats the point forecast."""
        return np.repeat(self.predict(history, t, n)[:, None], K, axis=1)


class PerfectForecaster(Forecaster):
    """Returns the true future values (an oracle, for benchmarks)."""

    def __init__(self, truth):
        self.truth = np.asarray(truth, float)

    def predict(self, history, t, n):
        return self.truth[t + 1 : t + 1 + n].copy()


class ConstantForecaster(Forecaster):
    """Predicts the current value for every future period."""

    def predict(self, history, t, n):
        return np.full(n, float(np.asarray(history)[t]))


class BaselineARForecaster(Forecaster):
    """Wraps a fitted ``ForecastModel``.

    ``t_offset`` maps simulation period ``t`` to the model's absolute time.
    ``pre_history`` supplies observations before the run starts; lags
    still missing are filled with baseline values.
    """

    def __init__(self, model: ForecastModel, t_offset: int = 0, pre_history=None, seed: int = 0):
        self.model = model
        self.t_offset = t_offset
        self.pre = np.zeros(0) if pre_history is None else np.asarray(pre_history, float)
        self.seed = seed

    def _recent(self, history, t):
        h = np.concatenate([self.pre, np.asarray(history, float)[: t + 1]])
        M = self.model.M
        if h.size < M:
            # missing lags are taken at the baseline (zero residual)
            ta = t + self.t_offset - np.arange(M)[::-1]
            pad = self.model.baseline(ta[: M - h.size])
            h = np.concatenate([pad, h])
        return h[-M:]

    def predict(self, history, t, n):
        if n > self.model.T - 1:
            raise ForecastError(f"model forecasts {self.model.T - 1} steps, asked for {n}")
        return forecast(self.model, self._recent(history, t), t + self.t_offset, horizon=n)

    def scenarios(self, history, t, n, K):
        if self.model.errors is None:
            raise ForecastError("model has no fitted error distribution")
        point = self.predict(history, t, n)
        s = sample_scenarios(point, self.model.errors, K, self.seed + t, self.model.clip)
        return s.T


class FixedScenarios(Forecaster):
    """Wraps a list of forecasters, one per scenario."""

    def __init__(self, forecasters):
        self.forecasters = list(forecasters)

    def predict(self, history, t, n):
        return self.forecasters[0].predict(history, t, n)

    def scenarios(self, history, t, n, K):
        if K != len(self.forecasters):
            raise ForecastError(f"configured for {len(self.forecasters)} scenarios, asked for {K}")
        return np.column_stack([f.predict(history, t, n) for f in self.forecasters])
