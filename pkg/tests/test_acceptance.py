"""Acceptance criteria 1-12, each checked at its stated tolerance.

Every test records one PASS/FAIL line through the ``acceptance`` fixture;
the lines are repeated in the terminal summary of the pytest run.
"""

import csv
import re
import time
from datetime import datetime, timedelta

import numpy as np
import pytest

from gridflow import (
    FixedLoad,
    GenericGenerator,
    IdealStorage,
    LossyLine,
    Network,
    SimulationConfig,
    SolverSettings,
    optimize,
    payments,
    price_check,
    run_dopf,
    run_mpc,
    run_robust_mpc,
)
from gridflow.cases import home_energy, synthetic_wind, three_bus, two_device, wind_farm
from gridflow.cli import main
from gridflow.forecast import (
    BaselineARForecaster,
    ConstantForecaster,
    FixedScenarios,
    PerfectForecaster,
    _lag_matrix,
    fit,
    fit_error_model,
    forecast_errors,
    iterated_one_step,
    sample_scenarios,
)
from gridflow.io import read_series, save_network, write_series
from gridflow.pricing import TIGHT, relaxation_gaps
from netgen import random_network
from synth import ar1_with_baseline

# reference three-bus values; the reference numbers terminals net by net
FIGURE_TERMINALS = ["gen1[0]", "load1[0]", "line1[0]", "line2[0]", "line1[1]",
                    "line2[1]", "line3[0]", "line3[1]", "load2[0]", "gen2[0]"]
FIGURE_FLOWS = [-90.0, 50.0, 50.0, -10.0, -50.0, 10.0, -50.0, 50.0, 100.0, -60.0]
FIGURE_PRICES = {"net1": 33.60, "net2": 199.60, "net3": 24.00}
TABLE_PAYMENTS = {"gen1": -3024.0, "gen2": -1440.0, "load1": 1680.0, "load2": 19960.0,
                  "line1": -8300.0, "line2": -96.0, "line3": -8780.0}


def _three_bus_mismatches(flows, prices, pays):
    bad = []
    for label, want in zip(FIGURE_TERMINALS, FIGURE_FLOWS):
        if abs(flows[label] - want) > 1e-3:
            bad.append(f"{label} {flows[label]:.4f} vs {want}")
    for name, want in FIGURE_PRICES.items():
        if abs(prices[name] - want) > 1e-2:
            bad.append(f"{name} price {prices[name]:.4f} vs {want}")
    for name, want in TABLE_PAYMENTS.items():
        if abs(pays[name] - want) > 1.0:
            bad.append(f"{name} payment {pays[name]:.2f} vs {want}")
    return bad


def test_criterion_01_three_bus_golden(acceptance):
    t0 = time.perf_counter()
    net = three_bus()
    sol = optimize(net).require_optimal()
    led = payments(sol)
    elapsed = time.perf_counter() - t0
    flows = {net.terminal_label(m): sol.p[m, 0, 0] for m in range(net.M)}
    prices = {n: sol.price(n)[0, 0] for n in net.net_names}
    pays = {d: led.payment(d) for d in net.device_names}
    bad = _three_bus_mismatches(flows, prices, pays)
    if elapsed >= 1.0:
        bad.append(f"runtime {elapsed:.2f} s")
    # net2 only holds a fixed load and two saturated lines, so its price is
    # any value >= 33.6; report the one-sided derivative for context
    chk = price_check(net, "net2", base=sol)
    acceptance(1, not bad, f"{elapsed:.3f} s; net2 one-sided derivative {chk.finite_difference:.4f} "
                           f"({chk.one_sided}); mismatches: {bad or 'none'}")
    assert not bad, bad


def test_criterion_02_cli_summary_format(acceptance, tmp_path, capsys):
    path = tmp_path / "three_bus.json"
    save_network(three_bus(), path)
    rc = main(["solve", "--network", str(path)])
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ln.strip()]
    problems = [] if rc == 0 else [f"exit code {rc}"]
    for header in ("Terminal", "Net", "Device"):
        i = next((k for k, ln in enumerate(lines) if ln.split()[0] == header), None)
        if i is None:
            problems.append(f"missing {header} block")
            continue
        col = lines[i].split()[1]
        if col not in ("Power", "Price", "Payment") or not lines[i + 1].startswith("-" * len(header)):
            problems.append(f"bad {header} header")
    rows = {}
    for ln in lines:
        parts = ln.split()
        if len(parts) == 2 and re.fullmatch(r"-?\d+(\.\d*)?", parts[1]):
            rows[parts[0]] = parts[1]
    rows.pop("objective", None)
    for key, text in rows.items():
        want = 2 if "[" in key else (4 if key.startswith("net") else 2)
        if "." not in text or len(text.split(".")[1]) != want:
            problems.append(f"{key} printed as {text}")
    flows = {k: float(v) for k, v in rows.items() if "[" in k}
    prices = {k: float(v) for k, v in rows.items() if k.startswith("net")}
    pays = {k: float(v) for k, v in rows.items() if k in TABLE_PAYMENTS}
    numeric = _three_bus_mismatches(flows, prices, pays)
    ok = not problems and not numeric
    acceptance(2, ok, f"layout: {problems or 'ok'}; numeric mismatches: {numeric or 'none'}")
    assert ok, problems + numeric


def test_criterion_03_two_device_kkt(acceptance):
    sol = optimize(two_device(), TIGHT).require_optimal()
    p = sol.device_power("gen")[0, 0, 0]
    lam = sol.price("bus")[0, 0]
    ok = abs(p + 50.0) <= 1e-6 and abs(lam - 32.0) <= 1e-6
    acceptance(3, ok, f"p={p:.9f} lambda={lam:.9f}")
    assert ok


def test_criterion_04_finite_difference_prices(acceptance):
    worst, failures, checks = 0.0, [], 0
    for k in range(20):
        net = random_network(np.random.default_rng(1000 + k))
        base = optimize(net, TIGHT).require_optimal()
        for i in range(net.N):
            for t in range(net.T):
                c = price_check(net, i, t, 0, base=base)
                checks += 1
                err = abs(c.finite_difference - c.reported)
                worst = max(worst, err / max(1.0, abs(c.reported)))
                if c.one_sided is not None or not c.within(1e-3, 1e-4):
                    failures.append((k, net.net_names[i], t, c.reported, c.finite_difference))
    acceptance(4, not failures, f"{checks} (net, t) checks, worst scaled error {worst:.2e}, failures {failures}")
    assert not failures


def test_criterion_05_conservation_and_zero_sum(acceptance):
    worst_balance = worst_pay = 0.0
    for k in range(100):
        net = random_network(np.random.default_rng(5000 + k), strict=False)
        sol = optimize(net).require_optimal()
        A, _ = net.adjacency()
        worst_balance = max(worst_balance, float(np.max(np.abs(np.einsum("nm,mts->nts", A.toarray(), sol.p)))))
        worst_pay = max(worst_pay, payments(sol).zero_sum_residual())
    ok = worst_balance <= 1e-6 and worst_pay <= 1e-6
    acceptance(5, ok, f"max |Ap| {worst_balance:.2e}, max per-net payment sum {worst_pay:.2e}")
    assert ok


@pytest.fixture(scope="module")
def wind_model():
    x = synthetic_wind(96 * 40, seed=1000)
    model = fit(x[: 96 * 30], [96], M=8, T=25, clip=(0.0, 16.0))
    model.errors = fit_error_model(model, x[96 * 30 :], t0=96 * 30)
    return model


def test_criterion_06_prescience_bound(acceptance, wind_model):
    rows, ok = [], True
    for seed in range(10):
        # a 12 MW load keeps the gas unit running; with an 8 MW load several
        # traces cost exactly zero and a relative tolerance becomes meaningless
        net = wind_farm(synthetic_wind(96, seed=seed), load=12.0, E_init=25.0)
        dopf = run_dopf(net).cost
        mpc = run_mpc(net, {"wind.p_avail": BaselineARForecaster(wind_model, seed=seed)},
                      SimulationConfig(horizon=24)).cost
        rmpc = run_robust_mpc(net, {"wind.p_avail": BaselineARForecaster(wind_model, seed=seed)},
                              SimulationConfig(horizon=24, mode="rmpc", scenarios=5)).cost
        good = dopf <= mpc + 1e-6 * abs(mpc) and dopf <= rmpc + 1e-6 * abs(rmpc)
        ok &= good
        rows.append(f"{dopf:.1f}/{mpc:.1f}/{rmpc:.1f}")
    # perfect forecasts over the whole run reproduce the prescient solution
    wind = synthetic_wind(96, seed=0)
    net = wind_farm(wind, E_init=25.0)
    perfect = run_mpc(net, {"wind.p_avail": PerfectForecaster(wind)}, SimulationConfig(horizon=96, terminal={}))
    gap = abs(perfect.cost - run_dopf(net).cost)
    ok &= gap <= 1e-5 * max(1.0, abs(perfect.cost))
    acceptance(6, ok, f"dopf/mpc/rmpc costs {', '.join(rows)}; perfect-forecast gap {gap:.2e}")
    assert ok


def test_criterion_07_home_energy(acceptance):
    net = home_energy()
    sol = optimize(net).require_optimal()
    h = net.h
    g = sol.device_power("generator")[0, :, 0]
    dl = sol.device_power("deferrable_load")[0, :, 0]
    st = sol.device_power("storage")[0, :, 0]
    E = sol.aux("storage", "energy")  # energy at the end of each period
    lam = sol.price("home")[:, 0]
    delivered = dl.sum() * h
    dev = net.devices[net.device_id("deferrable_load")]
    tol = 1e-4

    def free(t):
        return tol < -g[t] < 6 - tol and tol < dl[t] < 5 - tol and abs(st[t]) < 2 - tol

    pairs = [t for t in range(dev.start, dev.end) if free(t) and free(t + 1) and tol < E[t] < 5 - tol]
    jump = max((abs(lam[t + 1] - lam[t]) for t in pairs), default=0.0)
    ok = abs(delivered - 30.0) <= 1e-4 and E.min() >= -1e-6 and E.max() <= 5 + 1e-6 and jump <= 1e-3
    acceptance(7, ok, f"delivered {delivered:.6f} kWh, storage in [{E.min():.2e}, {E.max():.6f}], "
                      f"{len(pairs)} unconstrained pairs, max price step {jump:.2e}")
    assert ok
    assert pairs


def test_criterion_08_lossy_line_relaxation(acceptance):
    a, p_max, K = 0.01, 50.0, 20
    net = Network()
    net.add_device(GenericGenerator(alpha=0.05, beta=10.0, p_max=200.0), "gen")
    net.add_device(LossyLine(alpha_loss=a, p_max=p_max, cut_count=K), "line")
    net.add_device(FixedLoad(p_fix=20.0), "load")
    net.connect("gen", "line.0", net="a")
    net.connect("line.1", "load", net="b")
    sol = optimize(net, TIGHT).require_optimal()
    gap = float(relaxation_gaps(sol)["line"][0])
    bound = a * (p_max / (K - 1)) ** 2 / 4
    positive = bool(np.all(sol.prices > 0))
    ok = positive and gap <= bound + 1e-6
    acceptance(8, ok, f"gap {gap:.3e} (|gap| {abs(gap):.3e}) vs bound {bound:.3e}; prices {sol.prices.ravel()}")
    assert ok


def test_criterion_09_storage_price_leveling(acceptance):
    net = Network(T=2)
    net.add_device(GenericGenerator(alpha=0.1, beta=10.0, p_max=500.0), "gen")
    net.add_device(FixedLoad(p_fix=[20.0, 60.0]), "load")
    net.add_device(IdealStorage(leak=1e-12, E_min=0.0, E_max=1000.0, E_init=0.0,
                                p_min=-500.0, p_max=500.0), "storage")
    net.connect("gen", "load", "storage", net="bus")
    lam = optimize(net, TIGHT).require_optimal().price("bus")[:, 0]
    ok = abs(lam[0] - lam[1]) <= 1e-4
    acceptance(9, ok, f"prices {lam[0]:.6f}, {lam[1]:.6f}")
    assert ok


def test_criterion_10_forecaster_recovery(acceptance):
    # seed fixed before looking at any result; 10 days of 96 samples
    train = ar1_with_baseline(960, seed=0)
    valid = ar1_with_baseline(960, seed=1, t0=960)
    model = fit(train, [96], M=1, T=11)
    b0, a1 = model.baseline.beta0, model.baseline.alpha[0]
    gamma = model.ar.gamma[:5, 0]
    gamma_err = float(np.max(np.abs(gamma - 0.9 ** np.arange(1, 6))))
    direct = float(np.mean(forecast_errors(model, valid, t0=960)[:, 9] ** 2))
    r = valid - model.baseline(960 + np.arange(valid.size))
    X, Y, _ = _lag_matrix(r, 1, 11)
    it = np.array([iterated_one_step(model.ar, X[i, ::-1], 10)[-1] for i in range(len(X))])
    iterated = float(np.mean((Y[:, 9] - it) ** 2))
    parts = {
        "beta0": abs(b0 - 3.0) <= 1e-2,
        "alpha1": abs(a1 - 2.0) <= 1e-2,
        "gamma": gamma_err <= 0.05,
        "direct<=iterated": direct <= iterated,
    }
    ok = all(parts.values())
    acceptance(10, ok, f"beta0 {b0:.4f}, alpha1 {a1:.4f}, max gamma error {gamma_err:.3f}, "
                       f"MSE@10 direct {direct:.5f} iterated {iterated:.5f}; "
                       f"failed parts {[k for k, v in parts.items() if not v] or 'none'}")
    assert ok, parts


def test_criterion_11_scenario_determinism_and_moments(acceptance, tmp_path, wind_model):
    start, step = datetime(2012, 1, 1), timedelta(minutes=15)
    hist = synthetic_wind(96, seed=5)
    write_series(tmp_path / "hist.csv", hist, start, step)
    model_path = tmp_path / "model.json"
    wind_model.meta = {"start": start.isoformat()}
    wind_model.save(model_path)
    for name in ("a.csv", "b.csv"):
        main(["forecast", "scenarios", "--series", str(tmp_path / "hist.csv"), "--model", str(model_path),
              "--k", "20", "--seed", "0", "--out", str(tmp_path / name)])
    identical = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        n_rows = sum(1 for _ in csv.reader(fh)) - 1
    point = np.full(24, 8.0)
    s = sample_scenarios(point, wind_model.errors, 10_000, seed=0)
    sd = np.sqrt(np.diag(wind_model.errors.cov))
    dev = np.abs(s.mean(axis=0) - point - wind_model.errors.mean) / (sd / 100)
    ok = identical and n_rows == 24 and float(dev.max()) <= 3.0
    acceptance(11, ok, f"byte-identical CSVs: {identical}; max |mean - (forecast+mu)| = {dev.max():.2f} sigma/100")
    assert ok
    assert read_series(tmp_path / "a.csv")[1].shape == (24, 20)


def test_criterion_12_robust_reductions(acceptance):
    net = wind_farm(synthetic_wind(48, seed=1), E_init=25.0)
    fc = {"wind.p_avail": ConstantForecaster()}
    mpc = run_mpc(net, fc, SimulationConfig(horizon=12))
    one = run_robust_mpc(net, fc, SimulationConfig(horizon=12, mode="rmpc", scenarios=1))
    exact = np.array_equal(mpc.p, one.p) and np.array_equal(mpc.prices, one.prices) \
        and np.array_equal(mpc.stage_costs, one.stage_costs)
    tight = SolverSettings(eps_abs=1e-8, eps_rel=1e-8)
    one_t = run_robust_mpc(net, fc, SimulationConfig(horizon=12, mode="rmpc", scenarios=1, settings=tight))
    three = run_robust_mpc(net, {"wind.p_avail": FixedScenarios([ConstantForecaster()] * 3)},
                           SimulationConfig(horizon=12, mode="rmpc", scenarios=3, settings=tight))
    diff = float(np.max(np.abs(one_t.p - three.p)))
    ok = exact and diff <= 1e-6
    acceptance(12, ok, f"K=1 identical to MPC: {exact}; K=3 identical scenarios max flow difference {diff:.2e}")
    assert ok
