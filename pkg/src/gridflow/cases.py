"""Ready-made example networks and synthetic data."""

from __future__ import annotations

import numpy as np

from .devices import (
    DeferrableLoad,
    FixedLoad,
    GenericGenerator,
    IdealStorage,
    LosslessLine,
    RenewableGenerator,
)
from .network import Network


def three_bus() -> Network:
    """Three nets, two generators, two loads, three capacity-limited lines.

    Global terminal order: gen1, load1, line1[0], line1[1], line2[0],
    line2[1], line3[0], line3[1], load2, gen2.
    """
    net = Network(T=1)
    gen1 = GenericGenerator(alpha=0.02, beta=30.0, p_max=1000.0)
    gen2 = GenericGenerator(alpha=0.2, beta=0.0, p_max=100.0)
    line1 = LosslessLine(p_min=-50.0, p_max=50.0)
    line2 = LosslessLine(p_min=-10.0, p_max=10.0)
    line3 = LosslessLine(p_min=-50.0, p_max=50.0)
    net.add_device(gen1, "gen1")
    net.add_device(FixedLoad(p_fix=50.0), "load1")
    net.add_device(line1, "line1")
    net.add_device(line2, "line2")
    net.add_device(line3, "line3")
    net.add_device(FixedLoad(p_fix=100.0), "load2")
    net.add_device(gen2, "gen2")
    net.connect("load1", "gen1", "line1.0", "line2.0", net="net1")
    net.connect("load2", "line1.1", "line3.0", net="net2")
    net.connect("gen2", "line2.1", "line3.1", net="net3")
    return net


def two_device(alpha=0.02, beta=30.0, load=50.0) -> Network:
    """One generator and one fixed load on a single net."""
    net = Network(T=1)
    net.add_device(GenericGenerator(alpha=alpha, beta=beta, p_max=1000.0), "gen")
    net.add_device(FixedLoad(p_fix=load), "load")
    net.connect("gen", "load", net="bus")
    return net


def synthetic_home_load(n_periods: int = 1440, seed: int = 0) -> np.ndarray:
    """Household demand in kW over one day sampled every ``1440/n_periods`` minutes.

    Low overnight, a morning bump and a larger evening peak, plus small
    seeded noise.
    """
    rng = np.random.default_rng(seed)
    hours = np.arange(n_periods) * 24.0 / n_periods
    base = 0.4 + 0.8 * np.exp(-0.5 * ((hours - 7.5) / 1.2) ** 2)
    base += 1.8 * np.exp(-0.5 * ((hours - 19.0) / 2.0) ** 2)
    base += 0.3 * np.exp(-0.5 * ((hours - 13.0) / 2.5) ** 2)
    noise = 0.05 * rng.standard_normal(n_periods)
    return np.clip(base + noise, 0.1, None)


def home_energy(n_periods: int = 1440, load=None, seed: int = 0) -> Network:
    """Home with a generator, fixed load, deferrable load and battery.

    Units are kW and kWh with one-minute periods by default.  The deferrable
    load needs 30 kWh between 8:00 and 20:00.
    """
    h = 24.0 / n_periods
    if load is None:
        load = synthetic_home_load(n_periods, seed)
    start = int(round(8.0 / h))
    end = int(round(20.0 / h)) - 1
    net = Network(T=n_periods, h=h)
    net.add_device(GenericGenerator(alpha=0.0003, beta=0.0, p_min=0.0, p_max=6.0), "generator")
    net.add_device(FixedLoad(p_fix=np.asarray(load, float)), "fixed_load")
    net.add_device(DeferrableLoad(E_def=30.0, start=start, end=end, p_max=5.0), "deferrable_load")
    net.add_device(
        IdealStorage(leak=1e-12, E_min=0.0, E_max=5.0, E_init=0.0, p_min=-2.0, p_max=2.0),
        "storage",
    )
    net.connect("generator", "fixed_load", "deferrable_load", "storage", net="home")
    return net


def synthetic_wind(n_periods: int, seed: int = 0, capacity: float = 16.0, period_hours: float = 0.25):
    """Wind availability in MW: diurnal cycle plus a mean-reverting random walk.

    Returned values lie in ``[0, capacity]``.
    """
    rng = np.random.default_rng(seed)
    per_day = int(round(24 / period_hours))
    t = np.arange(n_periods)
    diurnal = 2.0 * np.sin(2 * np.pi * t / per_day + 1.3)
    r = np.empty(n_periods)
    cur = 0.0
    for i in range(n_periods):
        cur = 0.97 * cur + 0.8 * rng.standard_normal()
        r[i] = cur
    return np.clip(8.0 + diurnal + r, 0.0, capacity)


def wind_farm(wind, load: float = 8.0, h: float = 0.25, E_init: float = 0.0) -> Network:
    """Wind turbine, gas generator, 5 MW / 50 MWh storage and a constant load."""
    wind = np.asarray(wind, float)
    net = Network(T=wind.shape[0], h=h)
    net.add_device(RenewableGenerator(p_avail=wind), "wind")
    net.add_device(GenericGenerator(alpha=0.1, beta=20.0, p_min=0.0), "gas")
    net.add_device(
        IdealStorage(leak=1e-12, E_min=0.0, E_max=50.0, E_init=E_init, p_min=-5.0, p_max=5.0),
        "storage",
    )
    net.add_device(FixedLoad(p_fix=load), "load")
    net.connect("wind", "gas", "storage", "load", net="farm")
    return net
