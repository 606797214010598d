"""Command-line interface: ``gridflow solve | simulate | forecast``.

Exit codes: 0 success, 1 bad input (parse or validation error), 2 infeasible
problem, 3 unbounded problem, 4 solver iteration limit reached.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from datetime import datetime

import numpy as np

from . import forecast as fc
from . import io
from .devices import ValidationError
from .mpc import SimulationConfig, SimulationError, simulate
from .opf import InfeasibleError, optimize
from .pricing import payments
from .qp import SolverSettings, Status

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_UNBOUNDED, EXIT_MAXITER = 0, 1, 2, 3, 4

_STATUS_EXIT = {
    Status.PRIMAL_INFEASIBLE: EXIT_INFEASIBLE,
    Status.DUAL_INFEASIBLE: EXIT_UNBOUNDED,
    Status.MAX_ITERATIONS: EXIT_MAXITER,
}

log = logging.getLogger("gridflow")


def _err(msg: str) -> None:
    print(f"gridflow: error: {msg}", file=sys.stderr)


def _settings(args) -> SolverSettings:
    return SolverSettings(eps_abs=args.eps, eps_rel=args.eps, max_iterations=args.max_iter)


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def _parse_perturb(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError("--perturb expects net,t,s,eps")
    return parts[0], int(parts[1]), int(parts[2]), float(parts[3])


def cmd_solve(args) -> int:
    net = io.load_network(args.network)
    if not args.dynamic and net.T > 1:
        net = net.with_devices([d.window(0, 1) for d in net.devices], T=1)
    settings = _settings(args)
    sol = optimize(net, settings)
    if not sol.optimal:
        _err(sol.describe_failure())
        return _STATUS_EXIT.get(sol.status, EXIT_INFEASIBLE)
    ledger = payments(sol)
    sys.stdout.write(io.format_summary(sol, ledger))
    print(f"\nobjective {sol.objective:.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        io.write_flows(os.path.join(args.out, "flows.csv"), sol)
        io.write_prices(os.path.join(args.out, "prices.csv"), sol)
        io.write_payments(os.path.join(args.out, "payments.csv"), ledger)
    if args.perturb:
        name, t, s, eps = _parse_perturb(args.perturb)
        if name not in net.net_names:
            raise ValidationError(f"--perturb: unknown net '{name}'")
        if not (0 <= t < net.T and 0 <= s < net.S):
            raise ValidationError("--perturb: period or scenario out of range")
        delta = np.zeros((net.N, net.T, net.S))
        delta[net.net_names.index(name), t, s] = eps
        pert = optimize(net, settings, delta=delta)
        if not pert.optimal:
            _err("perturbed problem: " + pert.describe_failure())
            return _STATUS_EXIT.get(pert.status, EXIT_INFEASIBLE)
        print(f"perturbed objective {pert.objective:.6f}")
        print(f"objective delta {pert.objective - sol.objective:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _load_data(data_dir: str):
    """Realized series ``<device>.<param>.csv`` in ``data_dir``."""
    out, starts = {}, {}
    for path in sorted(glob.glob(os.path.join(data_dir, "*.csv"))):
        key = os.path.basename(path)[: -len(".csv")]
        dev, _, param = key.rpartition(".")
        if not dev:
            raise ValidationError(f"data file '{path}': name must be <device>.<param>.csv")
        stamps, values = io.read_series(path)
        if values.ndim != 1:
            raise ValidationError(f"data file '{path}': expected a single value column")
        out[(dev, param)] = values
        starts[(dev, param)] = (stamps[0], io.series_step(stamps))
    return out, starts


def _model_offset(model: fc.ForecastModel, start, step) -> int:
    meta = model.meta or {}
    if "start" not in meta:
        return 0
    t0 = datetime.fromisoformat(meta["start"])
    return int(round((start - t0).total_seconds() / step.total_seconds()))


def _forecasters(args, realized, starts, K):
    models = {}
    for spec in args.model or []:
        key, _, path = spec.partition("=")
        if not path:
            raise ValidationError("--model expects device.param=FILE")
        models[tuple(key.rsplit(".", 1))] = fc.ForecastModel.load(path)
    out = {}
    for key, series in realized.items():
        if key in models:
            m = models[key]
            start, step = starts[key]
            out[key] = fc.BaselineARForecaster(m, _model_offset(m, start, step), seed=args.seed)
        elif args.forecaster == "perfect":
            out[key] = fc.PerfectForecaster(series)
        elif args.forecaster == "constant":
            out[key] = fc.ConstantForecaster()
        else:
            raise ValidationError(f"no forecast model given for {key[0]}.{key[1]}")
        if K > 1 and not isinstance(out[key], fc.BaselineARForecaster):
            out[key] = fc.FixedScenarios([out[key]] * K)
    return out


def cmd_simulate(args) -> int:
    net = io.load_network(args.network)
    realized, starts = _load_data(args.data) if args.data else ({}, {})
    for (dev, param) in realized:
        net.device_id(dev)  # raises KeyError for unknown devices
    modes = ["dopf", "mpc", "rmpc"] if args.mode == "all" else args.mode.split(",")
    terminal = None if args.terminal == "initial" else {}
    costs, traces = {}, {}
    for mode in modes:
        K = args.scenarios if mode == "rmpc" else 1
        cfg = SimulationConfig(
            horizon=args.horizon, n_periods=args.periods, mode=mode, scenarios=K,
            terminal=terminal, settings=_settings(args),
        )
        forecasters = _forecasters(args, realized, starts, K) if mode != "dopf" else {}
        trace = simulate(net, forecasters, cfg, realized)
        traces[mode] = trace
        costs[mode] = trace.cost
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for mode, trace in traces.items():
            name = "trace.csv" if len(traces) == 1 else f"trace_{mode}.csv"
            trace.to_csv(os.path.join(args.out, name))
    print("Mode                       Cost")
    print("----                       ----")
    for mode, c in costs.items():
        print(mode + f"{c:.2f}".rjust(io.LINE_WIDTH - len(mode)))
    if "dopf" in costs:
        for mode in ("mpc", "rmpc"):
            if mode in costs:
                ok = costs["dopf"] <= costs[mode] + 1e-6 * abs(costs[mode])
                print(f"cost(dopf) <= cost({mode}): {'yes' if ok else 'NO'}")
    for mode, trace in traces.items():
        print(f"\n[{mode}] total device payments")
        sys.stdout.write(io.format_payment_table(trace.total_payments))
    return EXIT_OK


# ---------------------------------------------------------------------------
# forecast
# ---------------------------------------------------------------------------


def _floats(text: str):
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_forecast(args) -> int:
    stamps, x = io.read_series(args.series)
    if x.ndim != 1:
        raise ValidationError("forecast series must have a single value column")
    step = io.series_step(stamps)
    if args.action == "fit":
        if args.periods is None or args.lags is None or args.horizon is None:
            raise ValidationError("fit needs --periods, --lags and --horizon")
        clip = tuple(_floats(args.clip)) if args.clip else None
        model = fc.fit(x, _floats(args.periods), args.lags, args.horizon, ridge=args.ridge, clip=clip)
        if args.validation:
            vst, v = io.read_series(args.validation)
            t0 = int(round((vst[0] - stamps[0]).total_seconds() / step.total_seconds()))
            model.errors = fc.fit_error_model(model, v, t0=t0, zero_mean=args.zero_mean)
            in_sample = False
        else:
            model.errors = fc.fit_error_model(model, x, zero_mean=args.zero_mean)
            in_sample = True
        model.meta = {"start": stamps[0].isoformat(), "step_seconds": step.total_seconds(),
                      "errors_in_sample": in_sample}
        out = args.out or "model.json"
        model.save(out)
        print(f"wrote {out}: {model.baseline.n_params} baseline coefficients, "
              f"gamma {model.ar.gamma.shape[0]}x{model.ar.gamma.shape[1]}")
        return EXIT_OK
    if not args.model:
        raise ValidationError(f"{args.action} needs --model")
    model = fc.ForecastModel.load(args.model)
    t_last = len(x) - 1 if args.at is None else args.at
    if not 0 <= t_last < len(x):
        raise ValidationError("--at is outside the series")
    t_abs = t_last + _model_offset(model, stamps[0], step)
    recent = x[: t_last + 1]
    if recent.size < model.M:
        raise ValidationError(f"need at least {model.M} observations before --at")
    point = fc.forecast(model, recent[-model.M :], t_abs)
    start = stamps[t_last] + step
    out = args.out or ("forecast.csv" if args.action == "predict" else "scenarios.csv")
    if args.action == "predict":
        io.write_series(out, point, start, step)
        print(f"wrote {out}: {point.size} values")
        return EXIT_OK
    if model.errors is None:
        raise ValidationError("model file has no error distribution")
    sc = fc.sample_scenarios(point, model.errors, args.k, args.seed, model.clip)
    io.write_series(out, sc.T, start, step)
    print(f"wrote {out}: {args.k} scenarios of {point.size} values")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridflow", description="Convex power-flow optimization and simulation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def solver_opts(sp):
        sp.add_argument("--eps", type=float, default=1e-6, help="solver tolerance (default 1e-6)")
        sp.add_argument("--max-iter", type=int, default=200000)

    s = sub.add_parser("solve", help="solve a network file and print prices and payments")
    s.add_argument("--network", required=True)
    s.add_argument("--dynamic", action="store_true", help="solve all periods (default: first period only)")
    s.add_argument("--out", help="directory for flows.csv, prices.csv, payments.csv")
    s.add_argument("--perturb", help="net,t,s,eps: also solve with eps extracted from a net")
    solver_opts(s)
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="run DOPF / MPC / robust MPC over realized data")
    m.add_argument("--network", required=True)
    m.add_argument("--mode", default="mpc", help="dopf, mpc, rmpc, a comma list, or 'all'")
    m.add_argument("--data", help="directory of realized series named <device>.<param>.csv")
    m.add_argument("--horizon", type=int, required=True)
    m.add_argument("--periods", type=int, help="number of periods to simulate (default: network T)")
    m.add_argument("--scenarios", type=int, default=20)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--forecaster", choices=["model", "perfect", "constant"], default="model")
    m.add_argument("--model", action="append", help="device.param=MODEL.json (repeatable)")
    m.add_argument("--terminal", choices=["initial", "none"], default="initial",
                   help="storage end-of-window condition (default: back to initial energy)")
    m.add_argument("--out", help="directory for trace CSVs")
    solver_opts(m)
    m.set_defaults(func=cmd_simulate)

    f = sub.add_parser("forecast", help="fit a forecaster, predict, or sample scenarios")
    f.add_argument("action", choices=["fit", "predict", "scenarios"])
    f.add_argument("--series", required=True)
    f.add_argument("--periods", help="comma-separated baseline periods in samples")
    f.add_argument("--lags", type=int)
    f.add_argument("--horizon", type=int)
    f.add_argument("--ridge", type=float, default=1e-6)
    f.add_argument("--clip", help="lo,hi range for forecasts")
    f.add_argument("--validation", help="held-out series for the error distribution")
    f.add_argument("--zero-mean", action="store_true", help="use a zero-mean error distribution")
    f.add_argument("--model", help="model file (output of fit, input otherwise)")
    f.add_argument("--at", type=int, help="index of the forecast origin (default: last sample)")
    f.add_argument("--k", type=int, default=3)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out")
    f.set_defaults(func=cmd_forecast)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "forecast" and args.action == "fit" and args.model and not args.out:
        args.out = args.model
    try:
        return args.func(args)
    except (io.FileFormatError, ValidationError, fc.ForecastError, KeyError, ValueError, OSError) as e:
        _err(str(e).strip("'\""))
        return EXIT_INPUT
    except InfeasibleError as e:
        _err(str(e))
        rep = e.report
        return _STATUS_EXIT.get(rep.status, EXIT_INFEASIBLE) if rep is not None else EXIT_INFEASIBLE
    except SimulationError as e:
        _err(str(e))
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
