"""Random network generators shared by the property and acceptance tests."""

import numpy as np

from gridflow import (
    CurtailableLoad,
    FixedLoad,
    GenericGenerator,
    IdealStorage,
    LosslessLine,
    Network,
    PowerDissipator,
)


def random_network(rng: np.random.Generator, max_nets=6, max_devices=10, max_T=4, strict=True):
    """A random feasible network.

    Every net gets a quadratic generator whose output range is wide enough
    never to bind, so with ``strict`` the optimal cost is differentiable in
    the balance perturbation and every price is unique.  The remaining
    devices are drawn from loads, lines, storage and dissipators.
    """
    T = int(rng.integers(1, max_T + 1))
    N = int(rng.integers(1, max_nets + 1))
    net = Network(T=T, h=float(rng.choice([0.25, 1.0])))
    members = [[] for _ in range(N)]
    n_dev = 0
    for i in range(N):
        lo = -1e4 if strict else 0.0
        g = GenericGenerator(alpha=float(rng.uniform(0.01, 0.5)), beta=float(rng.uniform(5, 40)),
                             p_min=lo, p_max=1e4)
        net.add_device(g, f"gen{i}")
        members[i].append(f"gen{i}")
        n_dev += 1
    # give every net a second terminal: pair nets with lines, a load for an odd one out
    for i in range(0, N, 2):
        if i + 1 < N:
            cap = float(rng.uniform(5, 60))
            net.add_device(LosslessLine(p_min=-cap, p_max=cap), f"tie{i}")
            members[i].append(f"tie{i}.0")
            members[i + 1].append(f"tie{i}.1")
        else:
            net.add_device(FixedLoad(p_fix=rng.uniform(5, 80, T)), f"base_load{i}")
            members[i].append(f"base_load{i}")
        n_dev += 1
    kinds = ["load", "curtail", "line", "storage", "dissipator"]
    while n_dev < max_devices and rng.random() < 0.85:
        kind = kinds[int(rng.integers(len(kinds)))]
        name = f"{kind}{n_dev}"
        i = int(rng.integers(N))
        if kind == "load":
            net.add_device(FixedLoad(p_fix=rng.uniform(5, 80, T)), name)
            members[i].append(name)
        elif kind == "curtail":
            net.add_device(CurtailableLoad(p_des=rng.uniform(10, 50, T), p_min=0.0,
                                           lambda_curt=float(rng.uniform(50, 200))), name)
            members[i].append(name)
        elif kind == "line":
            if N < 2:
                continue
            j = int(rng.choice([k for k in range(N) if k != i]))
            cap = float(rng.uniform(5, 60))
            net.add_device(LosslessLine(p_min=-cap, p_max=cap), name)
            members[i].append(f"{name}.0")
            members[j].append(f"{name}.1")
        elif kind == "storage":
            if T < 2:
                continue
            E = float(rng.uniform(10, 40))
            net.add_device(IdealStorage(leak=1e-3, E_min=0.0, E_max=E, E_init=E / 2,
                                        p_min=-10.0, p_max=10.0), name)
            members[i].append(name)
        else:
            if strict:
                continue
            net.add_device(PowerDissipator(), name)
            members[i].append(name)
        n_dev += 1
    for i in range(N):
        net.connect(*members[i], net=f"n{i}")
    return net
