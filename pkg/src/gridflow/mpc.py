"""Dynamic OPF, certainty-equivalent MPC and robust scenario MPC simulations.

All three run over a network whose schedule parameters hold the *realized*
data for the whole run.  A simulation step at period ``t``

1. slices the (state-advanced) devices to a window of ``L`` periods,
2. overwrites every uncertain parameter with the true current value in the
   first column and forecasts in the remaining ones,
3. solves the window problem and executes its first column,
4. charges the realized per-period cost of every device at true data and
   moves device state (stored energy, temperature, last output, deferrable
   energy still owed) forward.

``run_dopf`` is the prescient benchmark: one whole-horizon solve, with the
same per-period cost accounting.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .compiler import compile_network
from .devices import Composite, Device, IdealStorage
from .forecast import Forecaster
from .network import Network
from .opf import InfeasibleError, Solution, optimize
from .qp import SolverSettings, Status

log = logging.getLogger(__name__)

MODES = ("dopf", "mpc", "rmpc")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TerminalCondition:
    """End-of-window condition for a storage device.

    ``kind`` is ``"constraint"`` (energy after the last period equals
    ``value``; ``None`` means the run's initial energy), ``"cost"`` (linear
    cost ``value * E_T``) or ``"none"``.
    """

    kind: str = "constraint"
    value: float | None = None

    def __post_init__(self):
        if self.kind not in ("constraint", "cost", "none"):
            raise ValueError(f"unknown terminal condition '{self.kind}'")
        if self.kind == "cost" and self.value is None:
            raise ValueError("terminal cost needs a value")


@dataclass
class SimulationConfig:
    horizon: int
    n_periods: int | None = None
    mode: str = "mpc"
    scenarios: int = 1
    probabilities: np.ndarray | None = None
    # None: constraint E_T = initial energy for every storage device;
    # otherwise a mapping device name -> TerminalCondition (missing = none)
    terminal: dict | None = None
    warm_start: bool = True
    soften_fallback: bool = True
    settings: SolverSettings | None = None
    keep_plans: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.scenarios < 1:
            raise ValueError("scenario count must be at least 1")
        if self.probabilities is not None:
            pr = np.asarray(self.probabilities, float)
            if pr.shape != (self.scenarios,):
                raise ValueError("probabilities must have one entry per scenario")
            self.probabilities = pr


@dataclass
class SimulationTrace:
    """What was executed, period by period."""

    network: Network
    mode: str
    p: np.ndarray  # (M, n) executed terminal powers
    prices: np.ndarray  # (N, n) first-period prices of each window
    stage_costs: np.ndarray  # (D, n) realized cost per device and period
    payments: np.ndarray  # (D, n) executed payments
    reports: list = field(default_factory=list)
    softened: np.ndarray | None = None  # (n,) bool
    states: dict = field(default_factory=dict)  # device -> (n+1,) carried state
    plans: list = field(default_factory=list)
    final_energy: list = field(default_factory=list)  # planned E_T per step

    @property
    def n_periods(self) -> int:
        return self.p.shape[1]

    @property
    def cost(self) -> float:
        return float(self.stage_costs.sum())

    @property
    def device_costs(self) -> dict:
        return dict(zip(self.network.device_names, self.stage_costs.sum(axis=1).tolist()))

    @property
    def total_payments(self) -> dict:
        return dict(zip(self.network.device_names, self.payments.sum(axis=1).tolist()))

    def balance_residual(self) -> float:
        A, _ = self.network.adjacency()
        return float(np.max(np.abs(A @ self.p))) if self.p.size else 0.0

    def to_csv(self, path) -> None:
        net = self.network
        head = ["period", "status", "iterations", "softened", "cost"]
        head += [f"power:{net.terminal_label(m)}" for m in range(net.M)]
        head += [f"price:{n}" for n in net.net_names]
        head += [f"payment:{d}" for d in net.device_names]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            for t in range(self.n_periods):
                rep = self.reports[t] if len(self.reports) == self.n_periods else self.reports[0]
                row = [t, rep.status.value, rep.iterations, int(bool(self.softened[t])),
                       repr(float(self.stage_costs[:, t].sum()))]
                row += [repr(float(v)) for v in self.p[:, t]]
                row += [repr(float(v)) for v in self.prices[:, t]]
                row += [repr(float(v)) for v in self.payments[:, t]]
                w.writerow(row)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _key(ref) -> tuple[str, str]:
    if isinstance(ref, tuple):
        return ref
    dev, _, param = ref.rpartition(".")
    if not dev:
        raise ValueError(f"uncertain quantity '{ref}': expected 'device.param'")
    return dev, param


def _apply_realized(network: Network, realized) -> Network:
    if not realized:
        return network
    devs = list(network.devices)
    for ref, series in realized.items():
        dev, param = _key(ref)
        d = network.device_id(dev)
        if param not in devs[d].schedule_params:
            raise ValueError(f"{dev}: '{param}' is not a schedule parameter")
        devs[d] = devs[d].replace(**{param: np.asarray(series, float)})
    return network.with_devices(devs)


def _series(dev: Device, param: str, n: int) -> np.ndarray:
    v = getattr(dev, param)
    a = np.asarray(v, float)
    if a.ndim == 0:
        return np.full(n, float(a))
    if a.ndim != 1 or a.shape[0] < n:
        raise SimulationError(f"realized '{param}' must be a vector covering {n} periods")
    return a[:n]


def _apply_terminal(dev: Device, cond: TerminalCondition | None, E0: float) -> Device:
    if not isinstance(dev, IdealStorage) or cond is None or cond.kind == "none":
        return dev.replace(E_final=None, terminal_cost=None) if isinstance(dev, IdealStorage) else dev
    if cond.kind == "constraint":
        return dev.replace(E_final=E0 if cond.value is None else cond.value, terminal_cost=None)
    return dev.replace(E_final=None, terminal_cost=cond.value)


def _internal_flows(sol: Solution, name: str, comp: Composite, t: int, s: int = 0) -> dict:
    """Executed internal terminal powers of a composite in period ``t``."""
    p_ext = sol.device_power(name)[:, t, s]
    alias = {}
    for j, ref in enumerate(comp.exposed):
        if not ref.startswith("@"):
            alias[comp._parse_member(ref)] = p_ext[j]
    out = {}
    for d, dev in comp.devices.items():
        if isinstance(dev, Composite):
            raise SimulationError("nested composites cannot be simulated step by step")
        col = []
        for k in range(dev.n_terminals):
            if (d, k) in alias:
                col.append(alias[(d, k)])
            else:
                col.append(float(sol.aux(name, f"{d}.p{k}", s)[t]))
        out[d] = np.array(col)
    return out


def _shift_warm_start(prev, problem):
    """Previous solution shifted by one period, matched by column/row tags."""
    px, py, pprob = prev

    def index(blocks):
        out = {}
        for b in blocks:
            out[(b.kind, b.owner, b.name, b.scenario)] = b
        return out

    def shift(old_vec, old_blocks, new_blocks, n):
        v = np.zeros(n)
        old = index(old_blocks)
        for b in new_blocks:
            ob = old.get((b.kind, b.owner, b.name, b.scenario))
            if ob is None or ob.periods.size == 0:
                continue
            want = b.periods + 1
            pos = np.searchsorted(ob.periods, want)
            pos = np.clip(pos, 0, ob.periods.size - 1)
            # beyond the old window: repeat the last value
            v[b.start : b.stop] = old_vec[ob.start + pos]
        return v

    x0 = shift(px, pprob.col_blocks, problem.col_blocks, problem.n_vars)
    y0 = shift(py, pprob.row_blocks, problem.row_blocks, problem.n_rows)
    return x0, y0


# ---------------------------------------------------------------------------
# accounting shared by every mode
# ---------------------------------------------------------------------------


class _Ledger:
    def __init__(self, network: Network, n: int):
        self.net = network
        self.n = n
        D = len(network.devices)
        self.p = np.zeros((network.M, n))
        self.prices = np.zeros((network.N, n))
        self.costs = np.zeros((D, n))
        self.pay = np.zeros((D, n))
        self.softened = np.zeros(n, bool)
        self.states = {}
        for name, dev in zip(network.device_names, network.devices):
            st = _state_of(dev)
            if st is not None:
                self.states[name] = [st]

    def execute(self, t, devices, p_col, price_col, internal):
        """Charge period ``t`` and return the advanced devices."""
        net = self.net
        self.p[:, t] = p_col
        self.prices[:, t] = price_col
        owner = net.net_of_terminals()
        lam = price_col[owner]
        new = []
        for d, (name, dev) in enumerate(zip(net.device_names, devices)):
            terms = net.device_terminals(d)
            pd = p_col[terms]
            self.costs[d, t] = dev.stage_cost(pd, h=net.h)
            if not np.isfinite(self.costs[d, t]):
                raise SimulationError(f"period {t}: executed power of '{name}' violates its true limits")
            self.pay[d, t] = float(lam[terms] @ pd)
            if isinstance(dev, Composite):
                nd = dev.advance_internal(internal[name], net.h)
            else:
                nd = dev.advance(pd, net.h)
            new.append(nd)
            if name in self.states:
                self.states[name].append(_state_of(nd))
        return new

    def trace(self, mode, reports, plans, finals):
        return SimulationTrace(
            network=self.net, mode=mode, p=self.p, prices=self.prices, stage_costs=self.costs,
            payments=self.pay, reports=reports, softened=self.softened,
            states={k: np.array(v) for k, v in self.states.items()}, plans=plans, final_energy=finals,
        )


def _state_of(dev):
    if isinstance(dev, IdealStorage):
        return dev.E_init
    if dev.kind == "thermal_load":
        return dev.theta_init
    return None


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


def run_dopf(
    network: Network,
    realized=None,
    *,
    n_periods: int | None = None,
    terminal: dict | None = None,
    settings: SolverSettings | None = None,
) -> SimulationTrace:
    """Whole-horizon dynamic OPF with perfect knowledge.

    ``terminal`` maps storage names to ``TerminalCondition``; by default no
    end condition is imposed.
    """
    net = _apply_realized(network, realized)
    n = net.T if n_periods is None else n_periods
    if net.S != 1:
        raise SimulationError("the realized network must have a single scenario")
    terminal = terminal or {}
    devs = [_apply_terminal(d.window(0, n), terminal.get(name), getattr(d, "E_init", 0.0))
            for name, d in zip(net.device_names, net.devices)]
    whole = net.with_devices(devs, T=n)
    sol = optimize(whole, settings)
    if not sol.optimal:
        raise InfeasibleError(sol.describe_failure(), sol.report, sol.certificate_tags())
    led = _Ledger(net, n)
    state = [d.window(0, n) for d in net.devices]
    for t in range(n):
        internal = {
            name: _internal_flows(sol, name, dev, t)
            for name, dev in zip(net.device_names, state) if isinstance(dev, Composite)
        }
        state = led.execute(t, state, sol.p[:, t, 0], sol.prices[:, t, 0], internal)
    plans = [sol.p[:, :, 0]]
    finals = _final_energies(sol, whole)
    return led.trace("dopf", [sol.report], plans, [finals])


def _final_energies(sol: Solution, net: Network) -> dict:
    out = {}
    for name, dev in zip(net.device_names, net.devices):
        if isinstance(dev, IdealStorage):
            out[name] = float(sol.aux(name, "energy")[-1])
    return out


def run_mpc(network: Network, forecasters: dict, config: SimulationConfig, realized=None) -> SimulationTrace:
    """Certainty-equivalent MPC: one point forecast per uncertain quantity."""
    return _run(network, forecasters, config, realized, robust=False)


def run_robust_mpc(network: Network, forecasters: dict, config: SimulationConfig,
                   realized=None) -> SimulationTrace:
    """Scenario MPC with ``config.scenarios`` forecasts per uncertain quantity.

    The window problem couples the scenarios through a common first-period
    flow, which is the one executed.
    """
    return _run(network, forecasters, config, realized, robust=True)


def simulate(network: Network, forecasters: dict, config: SimulationConfig, realized=None) -> SimulationTrace:
    if config.mode == "dopf":
        return run_dopf(network, realized, n_periods=config.n_periods, terminal=config.terminal,
                        settings=config.settings)
    if config.mode == "mpc":
        return run_mpc(network, forecasters, config, realized)
    return run_robust_mpc(network, forecasters, config, realized)


def _run(network, forecasters, config: SimulationConfig, realized, robust: bool) -> SimulationTrace:
    net = _apply_realized(network, realized)
    if net.S != 1:
        raise SimulationError("the realized network must have a single scenario")
    n = net.T if config.n_periods is None else config.n_periods
    if n > net.T:
        raise SimulationError(f"run of {n} periods exceeds the {net.T} realized periods")
    K = config.scenarios if robust else 1
    probs = config.probabilities if (robust and config.probabilities is not None) else np.full(K, 1.0 / K)
    bindings = []
    for ref, fc in (forecasters or {}).items():
        dev, param = _key(ref)
        d = net.device_id(dev)
        if param not in net.devices[d].schedule_params:
            raise SimulationError(f"{dev}: '{param}' is not a schedule parameter")
        if not isinstance(fc, Forecaster):
            raise SimulationError(f"forecaster for {dev}.{param} is not a Forecaster")
        bindings.append((d, param, _series(net.devices[d], param, n), fc))
    uncertain_names = {net.device_names[d] for d, *_ in bindings}

    if config.terminal is None:
        terminal = {name: TerminalCondition("constraint") for name, dev in zip(net.device_names, net.devices)
                    if isinstance(dev, IdealStorage)}
    else:
        terminal = dict(config.terminal)
    E0 = {name: dev.E_init for name, dev in zip(net.device_names, net.devices) if isinstance(dev, IdealStorage)}

    led = _Ledger(net, n)
    state = list(net.devices)
    reports, plans, finals = [], [], []
    prev = None
    for t in range(n):
        L = min(config.horizon, n - t)
        devs = [_apply_terminal(d.window(0, L), terminal.get(name), E0.get(name, 0.0))
                for name, d in zip(net.device_names, state)]
        for d, param, truth, fc in bindings:
            devs[d] = devs[d].replace(**{param: _window_values(truth, fc, t, L, K, robust)})
        window = net.with_devices(devs, T=L, probabilities=probs)
        problem = compile_network(window)
        warm = _shift_warm_start(prev, problem) if (config.warm_start and prev is not None) else None
        sol = optimize(window, config.settings, warm_start=warm, problem=problem)
        if sol.status is Status.PRIMAL_INFEASIBLE and config.soften_fallback:
            log.info("period %d: window infeasible, softening forecast-driven rows", t)
            sol = optimize(window, config.settings, soften=uncertain_names)
            led.softened[t] = True
        if not sol.optimal:
            raise InfeasibleError(f"period {t}: {sol.describe_failure()}", sol.report, sol.certificate_tags())
        internal = {
            name: _internal_flows(sol, name, dev, 0)
            for name, dev in zip(net.device_names, state) if isinstance(dev, Composite)
        }
        state = led.execute(t, state, sol.p[:, 0, 0], sol.prices[:, 0, 0], internal)
        reports.append(sol.report)
        finals.append(_final_energies(sol, window))
        if config.keep_plans:
            plans.append(sol.p.copy())
        prev = (sol.x, sol.y, sol.problem) if not led.softened[t] else None
    return led.trace("rmpc" if robust else "mpc", reports, plans, finals)


def _window_values(truth, fc: Forecaster, t: int, L: int, K: int, robust: bool) -> np.ndarray:
    """Window schedule: true value first, forecasts after."""
    if not robust:
        out = np.empty(L)
        out[0] = truth[t]
        if L > 1:
            out[1:] = _check(fc.predict(truth, t, L - 1), L - 1)
        return out
    out = np.empty((L, K))
    out[0, :] = truth[t]
    if L > 1:
        sc = np.asarray(fc.scenarios(truth, t, L - 1, K), float)
        if sc.shape != (L - 1, K):
            raise SimulationError(f"scenario forecaster returned shape {sc.shape}, expected {(L - 1, K)}")
        out[1:] = sc
    return out


def _check(v, n):
    v = np.asarray(v, float).reshape(-1)
    if v.size != n:
        raise SimulationError(f"forecaster returned {v.size} values, expected {n}")
    if not np.all(np.isfinite(v)):
        raise SimulationError("forecaster returned non-finite values")
    return v

