import numpy as np
import pytest

from gridflow import (
    FixedLoad,
    GenericGenerator,
    IdealStorage,
    InfeasibleError,
    Network,
    optimize,
    payments,
    price_check,
    price_sheet,
    profit_check,
)
from gridflow.cases import three_bus, two_device
from gridflow.pricing import NegativePriceWarning, nonunique_price_nets

# expected three-bus flows by terminal label
THREE_BUS_FLOWS = {
    "gen1[0]": -90.0, "load1[0]": 50.0, "line1[0]": 50.0, "line2[0]": -10.0, "line3[0]": -50.0,
    "line1[1]": -50.0, "line2[1]": 10.0, "line3[1]": 50.0, "load2[0]": 100.0, "gen2[0]": -60.0,
}


@pytest.fixture(scope="module")
def three_bus_solution():
    return optimize(three_bus()).require_optimal()


def test_three_bus_flows(three_bus_solution):
    net = three_bus_solution.network
    for m in range(net.M):
        assert three_bus_solution.p[m, 0, 0] == pytest.approx(THREE_BUS_FLOWS[net.terminal_label(m)], abs=1e-3)


def test_three_bus_unique_prices(three_bus_solution):
    assert three_bus_solution.price("net1")[0, 0] == pytest.approx(33.6, abs=1e-4)
    assert three_bus_solution.price("net3")[0, 0] == pytest.approx(24.0, abs=1e-4)


def test_three_bus_net2_price_is_not_unique(three_bus_solution):
    # net2 only holds a fixed load and two saturated lines: extra demand is
    # infeasible, so only the left derivative of the optimal cost exists
    chk = price_check(three_bus_solution.network, "net2", base=three_bus_solution)
    assert chk.one_sided == "left"
    assert chk.finite_difference == pytest.approx(33.6, abs=1e-3)
    assert three_bus_solution.price("net2")[0, 0] >= chk.finite_difference - 1e-4
    assert nonunique_price_nets(three_bus_solution) == ["net2"]


def test_three_bus_payments_of_unique_price_devices(three_bus_solution):
    led = payments(three_bus_solution)
    assert led.payment("gen1") == pytest.approx(-3024.0, abs=1.0)
    assert led.payment("gen2") == pytest.approx(-1440.0, abs=1.0)
    assert led.payment("load1") == pytest.approx(1680.0, abs=1.0)
    assert led.payment("line2") == pytest.approx(-96.0, abs=1.0)
    assert led.zero_sum_residual() <= 1e-6
    assert abs(led.total.sum()) <= 1e-6


def test_two_device_closed_form():
    sol = optimize(two_device()).require_optimal()
    assert sol.device_power("gen")[0, 0, 0] == pytest.approx(-50.0, abs=1e-6)
    assert sol.price("bus")[0, 0] == pytest.approx(2 * 0.02 * 50 + 30, abs=1e-6)


@pytest.mark.parametrize("net_name", ["net1", "net3"])
def test_central_difference_matches_price(three_bus_solution, net_name):
    chk = price_check(three_bus_solution.network, net_name, base=three_bus_solution)
    assert chk.one_sided is None
    assert chk.within(1e-3, 1e-4)


def _storage_two_period(load=(20.0, 60.0)):
    net = Network(T=2)
    net.add_device(GenericGenerator(alpha=0.1, beta=10.0, p_max=500.0), "gen")
    net.add_device(FixedLoad(p_fix=list(load)), "load")
    net.add_device(IdealStorage(leak=1e-9, E_min=0.0, E_max=1000.0, E_init=0.0,
                                p_min=-500.0, p_max=500.0), "storage")
    net.connect("gen", "load", "storage", net="bus")
    return net


def test_storage_levels_prices():
    sol = optimize(_storage_two_period()).require_optimal()
    lam = sol.price("bus")[:, 0]
    assert lam[0] == pytest.approx(lam[1], abs=1e-4)


def test_scenario_prices_and_first_period_aggregation():
    pi = np.array([0.3, 0.7])
    net = Network(T=2, probabilities=pi)
    net.add_device(GenericGenerator(alpha=0.5, beta=2.0, p_max=100.0), "gen")
    net.add_device(FixedLoad(p_fix=np.array([[10.0, 10.0], [4.0, 8.0]])), "load")
    net.connect("gen", "load", net="bus")
    sol = optimize(net).require_optimal()
    lam = sol.price("bus")
    # later periods: the marginal cost in each scenario
    assert lam[1, 0] == pytest.approx(2 * 0.5 * 4 + 2, abs=1e-5)
    assert lam[1, 1] == pytest.approx(2 * 0.5 * 8 + 2, abs=1e-5)
    # first period: one price shared by both scenarios
    assert lam[0, 0] == pytest.approx(lam[0, 1])
    assert lam[0, 0] == pytest.approx(12.0, abs=1e-5)
    for t, s in [(0, 0), (1, 0), (1, 1)]:
        assert price_check(net, "bus", t, s, base=sol).within()


def test_payment_labels_for_mpc_step():
    sol = optimize(_storage_two_period()).require_optimal()
    led = payments(sol, mpc_step=True)
    assert led.labels == ["executed", "planned"]
    assert led.by_period.shape == (3, 2)


def test_profit_check_subgradient_and_subproblem():
    sol = optimize(_storage_two_period()).require_optimal()
    gen = profit_check(sol, "gen")
    assert gen.method == "subgradient" and gen.ok
    sto = profit_check(sol, "storage")
    assert sto.method == "subproblem" and sto.ok


def test_profit_check_on_line(three_bus_solution):
    res = profit_check(three_bus_solution, "line2")
    assert res.ok


def test_negative_price_warns():
    net = Network()
    # a generator paid to produce (negative linear cost) sets a negative price
    net.add_device(GenericGenerator(alpha=0.1, beta=-5.0, p_max=100.0), "gen")
    net.add_device(FixedLoad(p_fix=10.0), "load")
    net.connect("gen", "load", net="bus")
    sol = optimize(net).require_optimal()
    with pytest.warns(NegativePriceWarning, match="bus"):
        sheet = price_sheet(sol)
    assert sheet.prices[0, 0, 0] == pytest.approx(-3.0, abs=1e-5)


def test_price_sheet_device_view(three_bus_solution):
    sheet = price_sheet(three_bus_solution, warn=False)
    lp = sheet.device_prices("line2")[:, 0, 0]
    assert lp[0] == pytest.approx(33.6, abs=1e-4)
    assert lp[1] == pytest.approx(24.0, abs=1e-4)


def test_infeasible_solution_names_rows():
    net = Network()
    net.add_device(GenericGenerator(alpha=1.0, p_max=5.0), "gen")
    net.add_device(FixedLoad(p_fix=10.0), "load")
    net.connect("gen", "load", net="bus")
    sol = optimize(net)
    assert not sol.optimal
    with pytest.raises(InfeasibleError) as exc:
        sol.require_optimal()
    text = str(exc.value)
    assert "load" in text and "bus" in text
    with pytest.raises(InfeasibleError):
        payments(sol)


@pytest.mark.parametrize("seed", range(4))
def test_random_network_prices_match_finite_differences(seed):
    from netgen import random_network
    from gridflow.pricing import TIGHT

    net = random_network(np.random.default_rng(100 + seed), max_nets=4, max_T=3)
    base = optimize(net, TIGHT).require_optimal()
    for i in range(net.N):
        for t in range(net.T):
            chk = price_check(net, i, t, 0, base=base)
            assert chk.one_sided is None
            assert chk.within(1e-3, 1e-4), chk


@pytest.mark.parametrize("seed", range(10))
def test_random_network_balance_and_zero_sum(seed):
    from netgen import random_network

    net = random_network(np.random.default_rng(200 + seed), strict=False)
    sol = optimize(net).require_optimal()
    A, _ = net.adjacency()
    imbalance = np.einsum("nm,mts->nts", A.toarray(), sol.p)
    assert np.max(np.abs(imbalance)) <= 1e-6
    assert payments(sol).zero_sum_residual() <= 1e-6
