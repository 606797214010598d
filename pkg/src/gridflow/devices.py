"""Device models.

Every device is an immutable dataclass holding its parameters.  Terminal
power is positive when it flows *into* the device, so a generator producing
power has a negative terminal power and its output is ``u = -p``.

Each device knows how to

* check its parameters (``validate``),
* evaluate its cost on a power schedule (``evaluate_cost``), returning
  ``inf`` when a hard constraint is violated,
* emit its cost and constraints into a QP builder (``lower``),
* produce the window / advanced copies that receding-horizon simulation
  needs (``window``, ``advance``).

Schedule parameters accept a scalar, a length-``T`` vector, or a ``T x S``
array (one column per scenario).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np

INF = np.inf
FEAS_TOL = 1e-6


class ValidationError(ValueError):
    """Raised for invalid device or network parameters.

    ``errors`` holds one message per violated rule, each prefixed by the
    offending field name.
    """

    def __init__(self, errors, where: str | None = None):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        prefix = f"{where}: " if where else ""
        super().__init__(prefix + "; ".join(self.errors))


def _tol(*scales) -> float:
    """Feasibility tolerance used by ``evaluate_cost``.

    Absolute ``FEAS_TOL`` for quantities of order one, growing with the
    magnitude of the bound so solver output at the default tolerances is
    never judged infeasible.
    """
    s = max([1.0] + [float(np.max(np.abs(x))) for x in scales if np.size(x) and np.all(np.isfinite(x))])
    return FEAS_TOL * s


def sched(value, T: int, S: int = 1, name: str = "schedule") -> np.ndarray:
    """Broadcast a scalar / (T,) / (T, S) parameter to a ``(T, S)`` array."""
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full((T, S), float(a))
    if a.ndim == 1:
        if a.shape[0] != T:
            raise ValidationError(f"{name}: expected length {T}, got {a.shape[0]}")
        return np.repeat(a[:, None], S, axis=1)
    if a.ndim == 2:
        if a.shape[0] != T or a.shape[1] not in (1, S):
            raise ValidationError(f"{name}: expected shape ({T}, {S}), got {a.shape}")
        return np.broadcast_to(a, (T, S)).copy()
    raise ValidationError(f"{name}: too many dimensions ({a.ndim})")


def _as_param(v):
    if v is None or isinstance(v, (int, float, str, bool)):
        return v
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return float(a)
    a = a.copy()
    a.setflags(write=False)
    return a


def _shift_param(v, k: int, length: int | None = None):
    """Drop the first ``k`` periods of a schedule parameter (scalars pass)."""
    if isinstance(v, np.ndarray) and v.ndim >= 1:
        out = v[k:] if length is None else v[k : k + length]
        return _as_param(out)
    return v


def _col(v, T, S, s, name):
    return sched(v, T, S, name)[:, s]


@dataclass(frozen=True, eq=False, kw_only=True)
class Device:
    """Base class; subclasses set ``kind`` and ``terminal_count``."""

    kind: ClassVar[str] = "device"
    terminal_count: ClassVar[int] = 1
    # parameters that are per-period schedules
    schedule_params: ClassVar[tuple[str, ...]] = ()

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple, np.ndarray)) and f.name not in ("devices", "nets", "exposed"):
                object.__setattr__(self, f.name, _as_param(v))

    # -- parameters -------------------------------------------------------
    @property
    def n_terminals(self) -> int:
        return self.terminal_count

    def params(self) -> dict[str, Any]:
        """Parameters as plain Python values (for serialization)."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = v.tolist()
            out[f.name] = v
        return out

    def replace(self, **changes) -> "Device":
        return dataclasses.replace(self, **changes)

    def errors(self, T: int, S: int = 1) -> list[str]:
        errs = []
        for name in self.schedule_params:
            v = getattr(self, name)
            if v is None:
                continue
            try:
                a = sched(v, T, S, name)
            except ValidationError as e:
                errs.extend(e.errors)
                continue
            if not np.all(np.isfinite(a) | np.isinf(a)) or np.any(np.isnan(a)):
                errs.append(f"{name}: contains NaN")
        return errs

    def validate(self, T: int = 1, S: int = 1) -> None:
        errs = self.errors(T, S)
        if errs:
            raise ValidationError(errs, self.kind)

    # -- time handling ----------------------------------------------------
    def window(self, t0: int, length: int) -> "Device":
        """Copy restricted to periods ``t0 .. t0+length-1``.

        Schedules are sliced; internal state (stored energy, temperature,
        previous output) is *not* propagated, use ``advance`` for that.
        """
        changes = {n: _shift_param(getattr(self, n), t0, length) for n in self.schedule_params}
        return self.replace(**changes) if changes else self

    def select_scenario(self, s: int) -> "Device":
        """Copy whose per-scenario schedules keep only scenario ``s``."""
        changes = {}
        for n in self.schedule_params:
            v = getattr(self, n)
            if isinstance(v, np.ndarray) and v.ndim == 2:
                changes[n] = _as_param(v[:, s if v.shape[1] > 1 else 0])
        return self.replace(**changes) if changes else self

    def advance(self, p_first: np.ndarray, h: float) -> "Device":
        """State after executing ``p_first`` (shape ``(M_d,)``) for one period,
        with the time origin moved forward by one period."""
        changes = {n: _shift_param(getattr(self, n), 1) for n in self.schedule_params}
        changes.update(self._next_state(np.asarray(p_first, float).reshape(-1), h))
        return self.replace(**changes) if changes else self

    def _next_state(self, p_first, h) -> dict:
        return {}

    # -- cost -------------------------------------------------------------
    def evaluate_cost(self, p, s: int = 0, h: float = 1.0, S: int | None = None) -> float:
        """Cost of the schedule ``p`` (shape ``(M_d, T)``) under scenario ``s``."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1 and self.n_terminals == 1:
            p = p[None, :]
        if p.ndim != 2 or p.shape[0] != self.n_terminals:
            raise ValueError(
                f"{self.kind}: expected power array with {self.n_terminals} rows, got shape {p.shape}"
            )
        T = p.shape[1]
        if S is None:
            S = s + 1
            for n in self.schedule_params:
                v = getattr(self, n)
                if isinstance(v, np.ndarray) and v.ndim == 2:
                    S = max(S, v.shape[1])
        return float(self._cost(p, T, S, s, h))

    def stage_cost(self, p_col, h: float = 1.0, s: int = 0) -> float:
        """Cost of executing one period (the first) given the current state."""
        return self.window(0, 1).evaluate_cost(np.asarray(p_col, float).reshape(-1, 1), s=s, h=h)

    def _cost(self, p, T, S, s, h) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def lower(self, ctx) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    # convenience for subgradient-based profit checks: (lo, hi) bounds on the
    # derivative of a separable single-terminal cost, or None if not separable
    def subgradient(self, p: np.ndarray, s: int = 0, h: float = 1.0, S: int = 1):
        return None


def _box_ok(x, lo, hi) -> bool:
    tol = _tol(lo, hi)
    return bool(np.all(x >= lo - tol) and np.all(x <= hi + tol))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False, kw_only=True)
class GenericGenerator(Device):
    """Dispatchable generator with quadratic cost in its output ``u = -p``.

    Cost per period is ``alpha*u**2 + beta*u + gamma`` subject to
    ``p_min <= u <= p_max``.  Optional ramp limits bound the change in output
    between periods; optional smoothing adds a quadratic or l1 penalty on it.
    ``initial_output`` is the output in the period before the first one; when
    it is ``None`` the first period is not coupled to the past.
    """

    kind: ClassVar[str] = "generic_generator"
    schedule_params: ClassVar[tuple[str, ...]] = ("p_min", "p_max")

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    p_min: Any = 0.0
    p_max: Any = INF
    ramp_up: float | None = None
    ramp_down: float | None = None
    smoothing: str | None = None
    smoothing_weight: float = 0.0
    initial_output: float | None = None

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if self.alpha < 0:
            errs.append("alpha: must be nonnegative for convexity")
        if not errs:
            lo, hi = sched(self.p_min, T, S), sched(self.p_max, T, S)
            if np.any(lo > hi):
                errs.append("p_min: exceeds p_max")
        for n in ("ramp_up", "ramp_down"):
            v = getattr(self, n)
            if v is not None and v < 0:
                errs.append(f"{n}: must be nonnegative")
        if self.smoothing not in (None, "quadratic", "l1"):
            errs.append("smoothing: must be 'quadratic', 'l1' or None")
        if self.smoothing_weight < 0:
            errs.append("smoothing_weight: must be nonnegative")
        return errs

    def _next_state(self, p_first, h):
        if self.ramp_up is None and self.ramp_down is None and not self.smoothing:
            return {}
        return {"initial_output": float(-p_first[0])}

    def _diffs(self, u):
        d = np.diff(u)
        if self.initial_output is not None and u.size:
            d = np.concatenate([[u[0] - self.initial_output], d])
        return d

    def _cost(self, p, T, S, s, h):
        u = -p[0]
        lo, hi = _col(self.p_min, T, S, s, "p_min"), _col(self.p_max, T, S, s, "p_max")
        if not _box_ok(u, lo, hi):
            return INF
        d = self._diffs(u)
        tol = _tol(u)
        if self.ramp_up is not None and np.any(d > self.ramp_up + tol):
            return INF
        if self.ramp_down is not None and np.any(-d > self.ramp_down + tol):
            return INF
        c = float(np.sum(self.alpha * u**2 + self.beta * u + self.gamma))
        if self.smoothing == "quadratic":
            c += self.smoothing_weight * float(np.sum(d**2))
        elif self.smoothing == "l1":
            c += self.smoothing_weight * float(np.sum(np.abs(d)))
        return c

    def subgradient(self, p, s=0, h=1.0, S=1):
        if self.ramp_up is not None or self.ramp_down is not None or self.smoothing:
            return None
        T = p.shape[-1]
        u = -np.asarray(p).reshape(-1)
        g = -(2 * self.alpha * u + self.beta)
        lo, hi = _col(self.p_min, T, S, s, "p_min"), _col(self.p_max, T, S, s, "p_max")
        tol = _tol(lo, hi) * 10
        glo = np.where(u >= hi - tol, -INF, g)  # p at its lower bound
        ghi = np.where(u <= lo + tol, INF, g)  # p at its upper bound
        return glo, ghi

    def lower(self, ctx):
        T, S, s = ctx.T, ctx.S, ctx.s
        p = ctx.p[0]
        lo, hi = _col(self.p_min, T, S, s, "p_min"), _col(self.p_max, T, S, s, "p_max")
        ctx.box("output", p, -hi, -lo, soft=True)
        if self.alpha:
            ctx.square([(p, 1.0)], self.alpha)
        if self.beta:
            ctx.linear(p, -self.beta)
        if self.gamma:
            ctx.constant(self.gamma * T)
        # change in output between consecutive periods
        terms, offset, periods = self._diff_terms(p)
        if terms is None:
            return
        if self.ramp_up is not None or self.ramp_down is not None:
            r_up = INF if self.ramp_up is None else self.ramp_up
            r_dn = INF if self.ramp_down is None else self.ramp_down
            ctx.rows("ramp", terms, -r_dn - offset, r_up - offset, periods)
        if self.smoothing == "quadratic" and self.smoothing_weight:
            ctx.square(terms, self.smoothing_weight, offset=offset)
        elif self.smoothing == "l1" and self.smoothing_weight:
            k = periods.size
            pos = ctx.var("smooth_pos", k, lb=0.0, periods=periods)
            neg = ctx.var("smooth_neg", k, lb=0.0, periods=periods)
            ctx.rows("smooth_split", terms + [(pos, -1.0), (neg, 1.0)], -offset, -offset, periods)
            ctx.linear(pos, self.smoothing_weight)
            ctx.linear(neg, self.smoothing_weight)

    def _diff_terms(self, p):
        """Terms for ``u_t - u_{t-1}`` (with ``u = -p``), constant offset, periods."""
        T = p.size
        if self.initial_output is None:
            if T < 2:
                return None, None, None
            return [(p[1:], -1.0), (p[:-1], 1.0)], np.zeros(T - 1), np.arange(1, T)
        # the first row compares against the given initial output; its
        # "previous" term repeats column p_0 with a zero coefficient
        prev = np.concatenate([p[:1], p[:-1]])
        coef_prev = np.ones(T)
        coef_prev[0] = 0.0
        offset = np.zeros(T)
        offset[0] = -self.initial_output
        return [(p, -1.0), (prev, coef_prev)], offset, np.arange(T)


@dataclass(frozen=True, eq=False, kw_only=True)
class FixedGenerator(Device):
    """Generator with a prescribed output schedule: ``-p = p_fix``."""

    kind: ClassVar[str] = "fixed_generator"
    schedule_params: ClassVar[tuple[str, ...]] = ("p_fix",)
    p_fix: Any = 0.0

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if not errs and not np.all(np.isfinite(sched(self.p_fix, T, S))):
            errs.append("p_fix: must be finite")
        return errs

    def _cost(self, p, T, S, s, h):
        v = _col(self.p_fix, T, S, s, "p_fix")
        return 0.0 if np.all(np.abs(-p[0] - v) <= _tol(v)) else INF

    def subgradient(self, p, s=0, h=1.0, S=1):
        n = p.shape[-1]
        return np.full(n, -INF), np.full(n, INF)

    def lower(self, ctx):
        v = _col(self.p_fix, ctx.T, ctx.S, ctx.s, "p_fix")
        ctx.box("fixed_output", ctx.p[0], -v, -v, soft=True)


@dataclass(frozen=True, eq=False, kw_only=True)
class RenewableGenerator(Device):
    """Zero-cost generator whose output is limited by ``p_avail``."""

    kind: ClassVar[str] = "renewable_generator"
    schedule_params: ClassVar[tuple[str, ...]] = ("p_avail",)
    p_avail: Any = 0.0

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if not errs and np.any(sched(self.p_avail, T, S) < 0):
            errs.append("p_avail: must be nonnegative")
        return errs

    def _cost(self, p, T, S, s, h):
        v = _col(self.p_avail, T, S, s, "p_avail")
        return 0.0 if _box_ok(-p[0], 0.0, v) else INF

    def subgradient(self, p, s=0, h=1.0, S=1):
        T = p.shape[-1]
        u = -np.asarray(p).reshape(-1)
        v = _col(self.p_avail, T, S, s, "p_avail")
        tol = 10 * _tol(v)
        glo = np.where(u >= v - tol, -INF, 0.0)
        ghi = np.where(u <= tol, INF, 0.0)
        return glo, ghi

    def lower(self, ctx):
        v = _col(self.p_avail, ctx.T, ctx.S, ctx.s, "p_avail")
        ctx.box("available", ctx.p[0], -v, 0.0, soft=True)


# ---------------------------------------------------------------------------
# loads
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False, kw_only=True)
class FixedLoad(Device):
    """Load consuming exactly ``p_fix``."""

    kind: ClassVar[str] = "fixed_load"
    schedule_params: ClassVar[tuple[str, ...]] = ("p_fix",)
    p_fix: Any = 0.0

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if not errs and not np.all(np.isfinite(sched(self.p_fix, T, S))):
            errs.append("p_fix: must be finite")
        return errs

    def _cost(self, p, T, S, s, h):
        v = _col(self.p_fix, T, S, s, "p_fix")
        return 0.0 if np.all(np.abs(p[0] - v) <= _tol(v)) else INF

    def subgradient(self, p, s=0, h=1.0, S=1):
        n = p.shape[-1]
        return np.full(n, -INF), np.full(n, INF)

    def lower(self, ctx):
        v = _col(self.p_fix, ctx.T, ctx.S, ctx.s, "p_fix")
        ctx.box("fixed_power", ctx.p[0], v, v, soft=True)


@dataclass(frozen=True, eq=False, kw_only=True)
class CurtailableLoad(Device):
    """Load with target ``p_des``; shortfall costs ``lambda_curt`` per MW."""

    kind: ClassVar[str] = "curtailable_load"
    schedule_params: ClassVar[tuple[str, ...]] = ("p_des", "p_min")
    p_des: Any = 0.0
    p_min: Any = 0.0
    lambda_curt: float = 0.0

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if self.lambda_curt < 0:
            errs.append("lambda_curt: must be nonnegative")
        if not errs and np.any(sched(self.p_min, T, S) > sched(self.p_des, T, S)):
            errs.append("p_min: exceeds p_des")
        return errs

    def _cost(self, p, T, S, s, h):
        des, lo = _col(self.p_des, T, S, s, "p_des"), _col(self.p_min, T, S, s, "p_min")
        if not _box_ok(p[0], lo, des):
            return INF
        return float(self.lambda_curt * np.sum(des - p[0]))

    def subgradient(self, p, s=0, h=1.0, S=1):
        T = p.shape[-1]
        x = np.asarray(p).reshape(-1)
        des, lo = _col(self.p_des, T, S, s, "p_des"), _col(self.p_min, T, S, s, "p_min")
        tol = 10 * _tol(des, lo)
        g = -self.lambda_curt
        glo = np.where(x <= lo + tol, -INF, g)
        ghi = np.where(x >= des - tol, INF, g)
        return glo, ghi

    def lower(self, ctx):
        T, S, s = ctx.T, ctx.S, ctx.s
        des, lo = _col(self.p_des, T, S, s, "p_des"), _col(self.p_min, T, S, s, "p_min")
        ctx.box("range", ctx.p[0], lo, des, soft=True)
        ctx.linear(ctx.p[0], -self.lambda_curt)
        ctx.constant(self.lambda_curt * float(np.sum(des)))


@dataclass(frozen=True, eq=False, kw_only=True)
class DeferrableLoad(Device):
    """Load that needs ``E_def`` energy within periods ``start..end`` (inclusive).

    Power is zero outside the window and within ``[0, p_max]`` inside it.  When
    the window extends past the horizon being optimized (as happens in a
    receding-horizon plan) the energy requirement becomes the interval of
    totals still completable in the remaining periods.
    """

    kind: ClassVar[str] = "deferrable_load"
    E_def: float = 0.0
    start: int = 0
    end: int = 0
    p_max: float = INF

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if self.E_def < 0:
            errs.append("E_def: must be nonnegative")
        if self.end < self.start:
            errs.append("end: window end precedes start")
        if self.p_max < 0:
            errs.append("p_max: must be nonnegative")
        if not errs and self.end < T and self.start >= 0:
            n = self.end - self.start + 1
            if np.isfinite(self.p_max) and self.E_def > self.p_max * n * 1e9:
                errs.append("E_def: unreachable")
        return errs

    def window(self, t0, length):
        return self.replace(start=self.start - t0, end=self.end - t0)

    def advance(self, p_first, h):
        p0 = float(np.asarray(p_first).reshape(-1)[0])
        E = self.E_def
        if self.start <= 0 <= self.end:
            E = max(E - h * p0, 0.0)
        return self.replace(E_def=E, start=self.start - 1, end=self.end - 1)

    def _span(self, T):
        lo = max(self.start, 0)
        hi = min(self.end, T - 1)
        return lo, hi

    def energy_bounds(self, T, h):
        """Interval for the energy delivered within the first ``T`` periods."""
        beyond = self.end - max(self.start, T) + 1 if self.end >= T else 0
        if beyond <= 0:
            return self.E_def, self.E_def
        rest = h * self.p_max * beyond
        return max(0.0, self.E_def - rest), self.E_def

    def _cost(self, p, T, S, s, h):
        x = p[0]
        lo, hi = self._span(T)
        mask = np.zeros(T, bool)
        if lo <= hi:
            mask[lo : hi + 1] = True
        tol = _tol(self.p_max if np.isfinite(self.p_max) else 1.0, self.E_def)
        if np.any(np.abs(x[~mask]) > tol):
            return INF
        if not _box_ok(x[mask], 0.0, self.p_max):
            return INF
        e_lo, e_hi = self.energy_bounds(T, h)
        total = h * float(np.sum(x[mask]))
        if total < e_lo - tol or total > e_hi + tol:
            return INF
        return 0.0

    def stage_cost(self, p_col, h=1.0, s=0):
        x = float(np.asarray(p_col).reshape(-1)[0])
        tol = _tol(self.p_max if np.isfinite(self.p_max) else 1.0)
        if self.start <= 0 <= self.end:
            return 0.0 if (-tol <= x <= self.p_max + tol) else INF
        return 0.0 if abs(x) <= tol else INF

    def lower(self, ctx):
        T = ctx.T
        p = ctx.p[0]
        lo, hi = self._span(T)
        mask = np.zeros(T, bool)
        if lo <= hi:
            mask[lo : hi + 1] = True
        if np.any(~mask):
            ctx.box("off_window", p[~mask], 0.0, 0.0)
        if np.any(mask):
            ctx.box("power", p[mask], 0.0, self.p_max)
            e_lo, e_hi = self.energy_bounds(T, ctx.h)
            cols = p[mask]
            ctx.row("energy", cols, np.full(cols.size, ctx.h), e_lo, e_hi)
        elif self.E_def > FEAS_TOL and self.end < 0:
            # the window has closed with energy still owed
            ctx.row("energy", p[:1], [0.0], self.E_def, self.E_def)


@dataclass(frozen=True, eq=False, kw_only=True)
class ThermalLoad(Device):
    """Temperature-controlled load (cooling when ``eta > 0``, heating when < 0).

    ``theta_{t+1} = theta_t + (mu/c)(theta_amb_t - theta_t) - (eta/c) p_t`` with
    ``theta_0 = theta_init``, and ``theta_min <= theta_t <= theta_max`` for
    ``t = 1..T``.
    """

    kind: ClassVar[str] = "thermal_load"
    schedule_params: ClassVar[tuple[str, ...]] = ("theta_amb",)
    c: float = 1.0
    mu: float = 1.0
    theta_amb: Any = 0.0
    eta: float = 1.0
    theta_min: float = -INF
    theta_max: float = INF
    p_max: float = INF
    theta_init: float = 0.0

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if self.c <= 0:
            errs.append("c: heat capacity must be positive")
        if self.mu <= 0:
            errs.append("mu: conductivity must be positive")
        if self.eta == 0:
            errs.append("eta: must be nonzero")
        if self.theta_min > self.theta_max:
            errs.append("theta_min: exceeds theta_max")
        if self.p_max < 0:
            errs.append("p_max: must be nonnegative")
        return errs

    def temperatures(self, p, T, S=1, s=0):
        amb = _col(self.theta_amb, T, S, s, "theta_amb")
        a, b = self.mu / self.c, self.eta / self.c
        th = np.empty(T)
        cur = self.theta_init
        for t in range(T):
            cur = (1 - a) * cur + a * amb[t] - b * p[t]
            th[t] = cur
        return th

    def _next_state(self, p_first, h):
        amb0 = float(np.asarray(self.theta_amb, float).reshape(-1)[0])
        a, b = self.mu / self.c, self.eta / self.c
        return {"theta_init": (1 - a) * self.theta_init + a * amb0 - b * float(p_first[0])}

    def _cost(self, p, T, S, s, h):
        if not _box_ok(p[0], 0.0, self.p_max):
            return INF
        th = self.temperatures(p[0], T, S, s)
        if not _box_ok(th, self.theta_min, self.theta_max):
            return INF
        return 0.0

    def lower(self, ctx):
        T, S, s = ctx.T, ctx.S, ctx.s
        p = ctx.p[0]
        amb = _col(self.theta_amb, T, S, s, "theta_amb")
        a, b = self.mu / self.c, self.eta / self.c
        ctx.box("power", p, 0.0, self.p_max)
        th = ctx.var("theta", T, lb=self.theta_min, ub=self.theta_max)
        rhs = a * amb
        rhs = rhs.copy()
        rhs[0] += (1 - a) * self.theta_init
        prev = np.concatenate([[th[0]], th[:-1]])
        coef_prev = np.full(T, -(1 - a))
        coef_prev[0] = 0.0
        ctx.rows(
            "dynamics",
            [(th, 1.0), (prev, coef_prev), (p, b)],
            rhs,
            rhs,
            np.arange(T),
            soft=True,
        )


@dataclass(frozen=True, eq=False, kw_only=True)
class GridTie(Device):
    """Connection to an external grid.

    Cost is ``max(-lambda_buy*p, -lambda_sell*p)``; ``-p`` is the power drawn
    from the grid.  Optional limits bound power bought and sold.
    """

    kind: ClassVar[str] = "grid_tie"
    lambda_buy: float = 0.0
    lambda_sell: float = 0.0
    p_max_buy: float = INF
    p_max_sell: float = INF

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if self.lambda_sell < 0:
            errs.append("lambda_sell: must be nonnegative")
        if self.lambda_buy < self.lambda_sell:
            errs.append("lambda_buy: arbitrage-free prices violated (need lambda_buy >= lambda_sell)")
        if self.p_max_buy < 0 or self.p_max_sell < 0:
            errs.append("p_max_buy/p_max_sell: must be nonnegative")
        return errs

    def _cost(self, p, T, S, s, h):
        x = p[0]
        if not _box_ok(x, -self.p_max_buy, self.p_max_sell):
            return INF
        return float(np.sum(np.maximum(-self.lambda_buy * x, -self.lambda_sell * x)))

    def subgradient(self, p, s=0, h=1.0, S=1):
        x = np.asarray(p).reshape(-1)
        tol = 10 * _tol(x)
        glo = np.where(x > tol, -self.lambda_sell, -self.lambda_buy)
        ghi = np.where(x < -tol, -self.lambda_buy, -self.lambda_sell)
        glo = np.where(x <= -self.p_max_buy + tol, -INF, glo)
        ghi = np.where(x >= self.p_max_sell - tol, INF, ghi)
        return glo, ghi

    def lower(self, ctx):
        p = ctx.p[0]
        T = ctx.T
        ctx.box("limits", p, -self.p_max_buy, self.p_max_sell)
        t = ctx.var("cost_epigraph", T)
        ctx.rows("buy", [(t, 1.0), (p, self.lambda_buy)], 0.0, INF, np.arange(T))
        ctx.rows("sell", [(t, 1.0), (p, self.lambda_sell)], 0.0, INF, np.arange(T))
        ctx.linear(t, 1.0)


@dataclass(frozen=True, eq=False, kw_only=True)
class PowerDissipator(Device):
    """Free sink: any nonnegative power at zero cost."""

    kind: ClassVar[str] = "power_dissipator"

    def _cost(self, p, T, S, s, h):
        return 0.0 if np.all(p[0] >= -FEAS_TOL) else INF

    def subgradient(self, p, s=0, h=1.0, S=1):
        x = np.asarray(p).reshape(-1)
        return np.where(x <= 10 * FEAS_TOL, -INF, 0.0), np.zeros_like(x)

    def lower(self, ctx):
        ctx.box("nonnegative", ctx.p[0], 0.0, INF)


# ---------------------------------------------------------------------------
# two-terminal devices
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False, kw_only=True)
class LosslessLine(Device):
    """Ideal line: ``p1 + p2 = 0``, ``p_min <= p1 <= p_max``, cost ``alpha_flow*p1**2``."""

    kind: ClassVar[str] = "lossless_line"
    terminal_count: ClassVar[int] = 2
    p_min: float = -INF
    p_max: float = INF
    alpha_flow: float = 0.0

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if self.p_min > self.p_max:
            errs.append("p_min: exceeds p_max")
        if self.alpha_flow < 0:
            errs.append("alpha_flow: must be nonnegative")
        return errs

    def _cost(self, p, T, S, s, h):
        tol = _tol(p)
        if np.any(np.abs(p[0] + p[1]) > tol) or not _box_ok(p[0], self.p_min, self.p_max):
            return INF
        return float(self.alpha_flow * np.sum(p[0] ** 2))

    def lower(self, ctx):
        p1, p2 = ctx.p[0], ctx.p[1]
        T = ctx.T
        ctx.rows("conservation", [(p1, 1.0), (p2, 1.0)], 0.0, 0.0, np.arange(T))
        ctx.box("limits", p1, self.p_min, self.p_max)
        if self.alpha_flow:
            ctx.square([(p1, 1.0)], self.alpha_flow)


@dataclass(frozen=True, eq=False, kw_only=True)
class LossyLine(Device):
    """Line with quadratic loss, lowered to a polyhedral convex relaxation.

    The exact loss curve ``p1 + p2 = alpha_loss*d**2`` with
    ``d = (p1 - p2)/2`` and ``|d| <= p_max`` is replaced by the region between
    ``cut_count`` tangent lines of the parabola and the cap
    ``p1 + p2 <= alpha_loss*p_max**2``.  ``evaluate_cost`` is zero on that
    polytope (the set the optimizer actually uses) and ``inf`` outside it.
    """

    kind: ClassVar[str] = "lossy_line"
    terminal_count: ClassVar[int] = 2
    alpha_loss: float = 0.0
    p_max: float = INF
    cut_count: int = 20

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if self.alpha_loss <= 0:
            errs.append("alpha_loss: must be positive")
        if not (0 < self.p_max < INF):
            errs.append("p_max: must be positive and finite")
        if self.cut_count < 2:
            errs.append("cut_count: need at least 2 tangent cuts")
        return errs

    def cut_points(self) -> np.ndarray:
        return np.linspace(-self.p_max, self.p_max, self.cut_count)

    def relaxation_gap(self, p) -> np.ndarray:
        """Per-period ``p1 + p2 - alpha_loss*d**2`` (zero on the exact curve)."""
        p = np.asarray(p, float)
        d = (p[0] - p[1]) / 2
        return p[0] + p[1] - self.alpha_loss * d**2

    def _cost(self, p, T, S, s, h):
        a = self.alpha_loss
        tol = _tol(a * self.p_max**2, self.p_max)
        tot = p[0] + p[1]
        d = (p[0] - p[1]) / 2
        if np.any(tot > a * self.p_max**2 + tol) or np.any(np.abs(d) > self.p_max + tol):
            return INF
        dk = self.cut_points()[:, None]
        if np.any(tot[None, :] < a * (2 * dk * d[None, :] - dk**2) - tol):
            return INF
        return 0.0

    def lower(self, ctx):
        a = self.alpha_loss
        p1, p2 = ctx.p[0], ctx.p[1]
        T = ctx.T
        per = np.arange(T)
        ctx.rows("loss_cap", [(p1, 1.0), (p2, 1.0)], -INF, a * self.p_max**2, per)
        ctx.rows("flow_limit", [(p1, 1.0), (p2, -1.0)], -2 * self.p_max, 2 * self.p_max, per)
        for k, dk in enumerate(self.cut_points()):
            ctx.rows(
                f"loss_cut{k}",
                [(p1, 1.0 - a * dk), (p2, 1.0 + a * dk)],
                -a * dk * dk,
                INF,
                per,
            )


@dataclass(frozen=True, eq=False, kw_only=True)
class Converter(Device):
    """Constant-efficiency converter, lowered to its triangular convex hull.

    Terminal 1 is the input in forward mode.  Exact behavior:
    ``p2 = max(-eta*p1, -p1/eta_rev)`` with ``p_min <= p1 <= p_max``.  The
    relaxation keeps both lines as lower bounds on ``p2`` and adds the chord
    through the two end points of the curve as an upper bound.
    """

    kind: ClassVar[str] = "converter"
    terminal_count: ClassVar[int] = 2
    eta: float = 1.0
    eta_rev: float = 1.0
    p_min: float = 0.0
    p_max: float = 0.0

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if not (0 < self.eta < 1):
            errs.append("eta: forward efficiency must lie in (0, 1)")
        if not (0 < self.eta_rev < 1):
            errs.append("eta_rev: reverse efficiency must lie in (0, 1)")
        if self.p_min > 0:
            errs.append("p_min: must be nonpositive")
        if self.p_max < 0:
            errs.append("p_max: must be nonnegative")
        if not (np.isfinite(self.p_min) and np.isfinite(self.p_max)):
            errs.append("p_min/p_max: must be finite")
        return errs

    def _chord(self):
        lo, hi = self.p_min, self.p_max
        y_hi, y_lo = -self.eta * hi, -lo / self.eta_rev
        if hi > lo:
            m = (y_hi - y_lo) / (hi - lo)
        else:
            m = 0.0
        return m, y_hi - m * hi

    def _cost(self, p, T, S, s, h):
        p1, p2 = p
        tol = _tol(self.p_min, self.p_max)
        if not _box_ok(p1, self.p_min, self.p_max):
            return INF
        if np.any(p2 < -self.eta * p1 - tol) or np.any(p2 < -p1 / self.eta_rev - tol):
            return INF
        m, c = self._chord()
        if np.any(p2 > m * p1 + c + tol):
            return INF
        return 0.0

    def relaxation_gap(self, p) -> np.ndarray:
        p1, p2 = np.asarray(p, float)
        return p2 - np.maximum(-self.eta * p1, -p1 / self.eta_rev)

    def lower(self, ctx):
        p1, p2 = ctx.p[0], ctx.p[1]
        per = np.arange(ctx.T)
        ctx.box("input_limits", p1, self.p_min, self.p_max)
        ctx.rows("forward", [(p2, 1.0), (p1, self.eta)], 0.0, INF, per)
        ctx.rows("reverse", [(p2, 1.0), (p1, 1.0 / self.eta_rev)], 0.0, INF, per)
        m, c = self._chord()
        ctx.rows("chord", [(p2, 1.0), (p1, -m)], -INF, c, per)


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------


def cycle_cost(capital_cost: float, h: float, n_cycles: float, E_min: float, E_max: float) -> float:
    """Charge/discharge cost per MW that amortizes ``capital_cost`` over
    ``n_cycles`` full cycles: ``C*h / (2*n_cyc*(E_max - E_min))``."""
    if E_max <= E_min:
        raise ValueError("E_max must exceed E_min")
    if n_cycles <= 0:
        raise ValueError("n_cycles must be positive")
    return capital_cost * h / (2.0 * n_cycles * (E_max - E_min))


@dataclass(frozen=True, eq=False, kw_only=True)
class IdealStorage(Device):
    """Storage with energy ``E_{t+1} = (1 - leak) E_t + h p_t``, ``E_0 = E_init``.

    ``E_min <= E_t <= E_max`` for ``t = 1..T``, ``p_min <= p <= p_max``.
    Optional: ``E_final`` pins the energy after the last period,
    ``terminal_cost`` adds ``terminal_cost * E_T`` to the cost and
    ``cycle_cost`` adds ``cycle_cost * sum |p_t|``.
    """

    kind: ClassVar[str] = "ideal_storage"
    leak: float
    E_min: float = 0.0
    E_max: float = INF
    E_init: float = 0.0
    p_min: float = -INF
    p_max: float = INF
    E_final: float | None = None
    terminal_cost: float | None = None
    cycle_cost: float = 0.0

    def errors(self, T, S=1):
        errs = super().errors(T, S)
        if not (0 < self.leak <= 1):
            errs.append("leak: must satisfy 0 < leak <= 1")
        if self.E_min > self.E_max:
            errs.append("E_min: exceeds E_max")
        if self.p_min > self.p_max:
            errs.append("p_min: exceeds p_max")
        if self.cycle_cost < 0:
            errs.append("cycle_cost: must be nonnegative")
        if self.E_final is not None and not (self.E_min - FEAS_TOL <= self.E_final <= self.E_max + FEAS_TOL):
            errs.append("E_final: outside [E_min, E_max]")
        return errs

    def energies(self, p, h) -> np.ndarray:
        """Energy after each period; same arithmetic as the state update."""
        p = np.asarray(p, float).reshape(-1)
        E = np.empty(p.size)
        cur = self.E_init
        for t in range(p.size):
            cur = (1 - self.leak) * cur + h * p[t]
            E[t] = cur
        return E

    def _next_state(self, p_first, h):
        return {"E_init": (1 - self.leak) * self.E_init + h * float(p_first[0])}

    def _cost(self, p, T, S, s, h):
        x = p[0]
        if not _box_ok(x, self.p_min, self.p_max):
            return INF
        E = self.energies(x, h)
        if not _box_ok(E, self.E_min, self.E_max):
            return INF
        if self.E_final is not None and abs(E[-1] - self.E_final) > _tol(self.E_final, self.E_max):
            return INF
        c = self.cycle_cost * float(np.sum(np.abs(x)))
        if self.terminal_cost:
            c += self.terminal_cost * float(E[-1])
        return c

    def stage_cost(self, p_col, h=1.0, s=0):
        return self.replace(E_final=None, terminal_cost=None).window(0, 1).evaluate_cost(
            np.asarray(p_col, float).reshape(1, 1), s=s, h=h
        )

    def lower(self, ctx):
        T, h = ctx.T, ctx.h
        p = ctx.p[0]
        ctx.box("power", p, self.p_min, self.p_max)
        E = ctx.var("energy", T, lb=self.E_min, ub=self.E_max)
        keep = 1.0 - self.leak
        prev = np.concatenate([[E[0]], E[:-1]])
        coef_prev = np.full(T, -keep)
        coef_prev[0] = 0.0
        rhs = np.zeros(T)
        rhs[0] = keep * self.E_init
        ctx.rows("dynamics", [(E, 1.0), (prev, coef_prev), (p, -h)], rhs, rhs, np.arange(T))
        if self.E_final is not None:
            ctx.box("terminal", E[-1:], self.E_final, self.E_final, periods=np.array([T - 1]))
        if self.terminal_cost:
            ctx.linear(E[-1:], self.terminal_cost)
        if self.cycle_cost:
            pos = ctx.var("charge", T, lb=0.0)
            neg = ctx.var("discharge", T, lb=0.0)
            ctx.rows("split", [(p, 1.0), (pos, -1.0), (neg, 1.0)], 0.0, 0.0, np.arange(T))
            ctx.linear(pos, self.cycle_cost)
            ctx.linear(neg, self.cycle_cost)


# ---------------------------------------------------------------------------
# composite
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False, kw_only=True)
class Composite(Device):
    """A sub-network presented as a single device.

    ``devices`` maps internal names to devices; ``nets`` is a list of
    ``(net_name, [member, ...])`` with members written ``"device.k"`` (local
    terminal ``k``); ``exposed`` lists the external terminals, each either
    ``"device.k"`` (the external terminal *is* that internal terminal) or
    ``"@net"`` (power entering the external terminal flows into that
    internal net).  Internal flows become extra variables of the compiled
    problem; the composite cost is never formed explicitly.
    """

    kind: ClassVar[str] = "composite"
    devices: dict = field(default_factory=dict)
    nets: tuple = ()
    exposed: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "devices", dict(self.devices))
        object.__setattr__(self, "nets", tuple((n, tuple(m)) for n, m in self.nets))
        object.__setattr__(self, "exposed", tuple(self.exposed))

    @property
    def n_terminals(self) -> int:
        return len(self.exposed)

    def params(self):
        from .io import device_to_dict  # local import: io depends on devices

        return {
            "devices": {k: device_to_dict(v) for k, v in self.devices.items()},
            "nets": [[n, list(m)] for n, m in self.nets],
            "exposed": list(self.exposed),
        }

    @staticmethod
    def _parse_member(ref: str):
        name, _, k = ref.rpartition(".")
        if not name:
            raise ValidationError(f"member '{ref}': expected 'device.k'")
        return name, int(k)

    def errors(self, T, S=1):
        errs = []
        seen = set()
        for name, dev in self.devices.items():
            errs.extend(f"{name}.{e}" for e in dev.errors(T, S))
        alias = set()
        net_names = {n for n, _ in self.nets}
        for ref in self.exposed:
            if ref.startswith("@"):
                if ref[1:] not in net_names:
                    errs.append(f"exposed: unknown internal net '{ref[1:]}'")
                continue
            try:
                d, k = self._parse_member(ref)
            except (ValidationError, ValueError):
                errs.append(f"exposed: bad reference '{ref}'")
                continue
            alias.add((d, k))
        for net, members in self.nets:
            for ref in members:
                try:
                    d, k = self._parse_member(ref)
                except (ValidationError, ValueError):
                    errs.append(f"nets: bad reference '{ref}'")
                    continue
                if d not in self.devices or not (0 <= k < self.devices[d].n_terminals):
                    errs.append(f"nets: unknown terminal '{ref}' in net '{net}'")
                if (d, k) in seen or (d, k) in alias:
                    errs.append(f"nets: terminal '{ref}' wired twice")
                seen.add((d, k))
        for d, dev in self.devices.items():
            for k in range(dev.n_terminals):
                if (d, k) not in seen and (d, k) not in alias:
                    errs.append(f"nets: internal terminal '{d}.{k}' is not wired")
        if not self.exposed:
            errs.append("exposed: composite needs at least one external terminal")
        return errs

    def window(self, t0, length):
        return self.replace(devices={k: v.window(t0, length) for k, v in self.devices.items()})

    def select_scenario(self, s):
        return self.replace(devices={k: v.select_scenario(s) for k, v in self.devices.items()})

    def advance(self, p_first, h):
        raise NotImplementedError(
            "advancing a composite needs its internal flows; use advance_internal"
        )

    def advance_internal(self, internal: dict, h: float) -> "Composite":
        """Advance every internal device given its executed first column."""
        return self.replace(
            devices={k: v.advance(internal[k], h) for k, v in self.devices.items()}
        )

    def lower(self, ctx):
        T = ctx.T
        cols = {}
        ext_into_net = {}
        for j, ref in enumerate(self.exposed):
            if ref.startswith("@"):
                ext_into_net.setdefault(ref[1:], []).append(j)
            else:
                cols[self._parse_member(ref)] = ctx.p[j]
        for d, dev in self.devices.items():
            pd = []
            for k in range(dev.n_terminals):
                if (d, k) not in cols:
                    cols[(d, k)] = ctx.var(f"{d}.p{k}", T, terminal=(d, k))
                pd.append(cols[(d, k)])
            dev.lower(ctx.child(d, np.vstack(pd)))
        for net, members in self.nets:
            terms = [(cols[self._parse_member(r)], 1.0) for r in members]
            terms += [(ctx.p[j], -1.0) for j in ext_into_net.get(net, [])]
            ctx.rows(f"net:{net}", terms, 0.0, 0.0, np.arange(T))

    def _cost(self, p, T, S, s, h):
        from .compiler import composite_cost

        return composite_cost(self, p, s=s, h=h, S=S)


def lossy_battery(
    *,
    leak: float,
    E_max: float,
    p_max: float,
    alpha_loss: float,
    E_min: float = 0.0,
    E_init: float = 0.0,
    cut_count: int = 20,
    line_p_max: float | None = None,
    cycle_cost: float = 0.0,
) -> Composite:
    """Ideal storage behind a lossy line, exposed through the line's far end."""
    storage = IdealStorage(
        leak=leak, E_min=E_min, E_max=E_max, E_init=E_init, p_min=-p_max, p_max=p_max,
        cycle_cost=cycle_cost,
    )
    line = LossyLine(alpha_loss=alpha_loss, p_max=line_p_max or p_max, cut_count=cut_count)
    return Composite(
        devices={"storage": storage, "line": line},
        nets=[("inner", ["storage.0", "line.0"])],
        exposed=["line.1"],
    )


DEVICE_KINDS: dict[str, type[Device]] = {
    cls.kind: cls
    for cls in (
        GenericGenerator,
        FixedGenerator,
        RenewableGenerator,
        FixedLoad,
        CurtailableLoad,
        DeferrableLoad,
        ThermalLoad,
        GridTie,
        PowerDissipator,
        LosslessLine,
        LossyLine,
        Converter,
        IdealStorage,
        Composite,
    )
}
