"""Prices, payments and their sanity checks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .devices import INF, Converter, Device, LossyLine
from .network import Network
from .opf import InfeasibleError, Solution, optimize
from .qp import SolverSettings, Status


class NegativePriceWarning(UserWarning):
    pass


TIGHT = SolverSettings(eps_abs=1e-9, eps_rel=1e-9)


@dataclass
class PriceSheet:
    net_names: list
    prices: np.ndarray  # (N, T, S)
    terminal_prices: np.ndarray  # (M, T, S)
    device_terminals: dict

    def device_prices(self, device: str) -> np.ndarray:
        """Prices at the terminals of ``device``, shape ``(M_d, T, S)``."""
        return self.terminal_prices[self.device_terminals[device]]

    def __getitem__(self, net: str) -> np.ndarray:
        return self.prices[self.net_names.index(net)]


def price_sheet(solution: Solution, warn: bool = True) -> PriceSheet:
    if not solution.optimal:
        raise InfeasibleError("prices need an optimal solution", solution.report)
    net = solution.network
    if warn and solution.prices.size and np.min(solution.prices) < -1e-6:
        bad = sorted({net.net_names[i] for i in np.flatnonzero((solution.prices < -1e-6).any(axis=(1, 2)))})
        warnings.warn(f"negative prices at nets: {', '.join(bad)}", NegativePriceWarning, stacklevel=2)
    return PriceSheet(
        net_names=list(net.net_names),
        prices=solution.prices,
        terminal_prices=solution.terminal_prices(),
        device_terminals={n: net.device_terminals(n) for n in net.device_names},
    )


@dataclass
class PaymentLedger:
    """Payments *by* each device (negative means the device is paid).

    ``by_period[d, t]`` is the expected payment of device ``d`` in period
    ``t``; ``total[d]`` sums over periods.  ``net_sums[n, t, s]`` adds up the
    payments of the terminals on net ``n`` and vanishes at an optimum.
    ``labels`` marks each period as ``"executed"`` or ``"planned"``.
    """

    device_names: list
    by_period: np.ndarray  # (D, T)
    terminal_flows: np.ndarray  # (M, T, S) lambda * p
    net_sums: np.ndarray  # (N, T, S)
    labels: list = field(default_factory=list)

    EXECUTED: ClassVar[str] = "executed"
    PLANNED: ClassVar[str] = "planned"

    @property
    def total(self) -> np.ndarray:
        return self.by_period.sum(axis=1)

    def payment(self, device: str) -> float:
        return float(self.total[self.device_names.index(device)])

    def zero_sum_residual(self) -> float:
        return float(np.max(np.abs(self.net_sums))) if self.net_sums.size else 0.0

    def as_dict(self) -> dict:
        return dict(zip(self.device_names, self.total.tolist()))


def payments(solution: Solution, mpc_step: bool = False) -> PaymentLedger:
    """Payments ``P_d = sum_s pi_s sum_t lambda_{d,t,s}' p_{d,t,s}``.

    With ``mpc_step`` only the first period is labeled executed, the rest
    planned.
    """
    if not solution.optimal:
        raise InfeasibleError("payments need an optimal solution", solution.report)
    net = solution.network
    pi = net.probabilities
    lam = solution.terminal_prices()
    flows = lam * solution.p
    D = len(net.devices)
    by_period = np.zeros((D, net.T))
    for d in range(D):
        terms = net.device_terminals(d)
        by_period[d] = np.einsum("mts,s->t", flows[terms], pi)
    owner = net.net_of_terminals()
    net_sums = np.zeros((net.N, net.T, net.S))
    np.add.at(net_sums, owner, flows)
    labels = [PaymentLedger.EXECUTED] * net.T
    if mpc_step:
        labels = [PaymentLedger.EXECUTED] + [PaymentLedger.PLANNED] * (net.T - 1)
    return PaymentLedger(list(net.device_names), by_period, flows, net_sums, labels)


# ---------------------------------------------------------------------------
# finite-difference price check
# ---------------------------------------------------------------------------


@dataclass
class PriceCheck:
    net: str
    period: int
    scenario: int
    finite_difference: float
    reported: float
    gap: float
    one_sided: str | None = None  # "left"/"right" when one side is infeasible

    def within(self, rel: float = 1e-3, abs_: float = 1e-4) -> bool:
        return self.gap <= max(rel * abs(self.reported), abs_)


def price_check(
    network: Network,
    net,
    t: int = 0,
    s: int = 0,
    eps: float = 1e-3,
    settings: SolverSettings | None = None,
    base: Solution | None = None,
    regularization: float = 0.0,
) -> PriceCheck:
    """Compare a reported price with a central difference of the optimal cost.

    The optimal cost is re-solved with ``delta = +-eps`` on the balance row of
    ``(net, t, s)`` and the difference divided by ``2*eps*pi_s``.  With several
    scenarios the first-period price is common to all of them, so it is
    checked by perturbing every scenario at once and dividing by ``2*eps``.
    """
    settings = settings or TIGHT
    i = net if isinstance(net, int) else network.net_names.index(net)
    if base is None:
        base = optimize(network, settings, regularization=regularization)
    base.require_optimal()
    N, T, S = network.N, network.T, network.S
    delta = np.zeros((N, T, S))
    if S > 1 and t == 0:
        delta[i, 0, :] = 1.0
        scale = 1.0
    else:
        delta[i, t, s] = 1.0
        scale = network.probabilities[s]
    F0 = base.objective

    def F(sign):
        sol = optimize(network, settings, delta=sign * eps * delta, regularization=regularization)
        if sol.status is Status.PRIMAL_INFEASIBLE:
            return None
        sol.require_optimal()
        return sol.objective

    Fp, Fm = F(+1), F(-1)
    one_sided = None
    if Fp is not None and Fm is not None:
        fd = (Fp - Fm) / (2 * eps * scale)
    elif Fm is not None:
        fd = (F0 - Fm) / (eps * scale)
        one_sided = "left"
    elif Fp is not None:
        fd = (Fp - F0) / (eps * scale)
        one_sided = "right"
    else:
        raise InfeasibleError(f"both perturbations of net '{network.net_names[i]}' are infeasible")
    rep = float(base.prices[i, t, s])
    return PriceCheck(network.net_names[i], t, s, float(fd), rep, abs(fd - rep), one_sided)


# ---------------------------------------------------------------------------
# profit maximization check
# ---------------------------------------------------------------------------


@dataclass
class ProfitCheck:
    device: str
    method: str  # "subgradient" or "subproblem"
    residual: float
    ok: bool
    detail: str = ""


@dataclass(frozen=True, eq=False, kw_only=True)
class _PriceTaker(Device):
    """Counterparty charging ``-coef * p`` so a device sees prices ``coef``."""

    kind: ClassVar[str] = "_price_taker"
    schedule_params: ClassVar[tuple[str, ...]] = ("coef",)
    coef: object = 0.0

    def _cost(self, p, T, S, s, h):
        from .devices import _col

        return float(np.sum(_col(self.coef, T, S, s, "coef") * p[0]))

    def lower(self, ctx):
        from .devices import _col

        ctx.linear(ctx.p[0], _col(self.coef, ctx.T, ctx.S, ctx.s, "coef"))


def profit_check(solution: Solution, device, tol: float = 1e-5) -> ProfitCheck:
    """Check that ``device`` maximizes its own profit at the reported prices.

    Single-terminal devices with a separable cost are checked by testing
    that ``-lambda`` lies in the subdifferential interval of the cost at the
    optimal power (this covers kinks and active limits).  Other devices are
    checked by solving their own profit problem
    ``minimize f_d(p) + lambda_d' p`` and comparing with the solution's value.
    """
    solution.require_optimal()
    net = solution.network
    d = net.device_id(device)
    name = net.device_names[d]
    dev = net.devices[d]
    p = solution.device_power(d)  # (M_d, T, S)
    lam = solution.terminal_prices()[net.device_terminals(d)]
    scale = max(1.0, float(np.max(np.abs(lam))) if lam.size else 1.0)
    if net.S == 1 and dev.n_terminals == 1:
        iv = dev.subgradient(p[:, :, 0], s=0, h=net.h, S=1)
        if iv is not None:
            glo, ghi = iv
            target = -lam[0, :, 0]
            below = np.maximum(glo - target, 0.0)
            above = np.maximum(target - ghi, 0.0)
            below = np.where(np.isfinite(below), below, INF)
            res = float(np.max(np.concatenate([below, above]))) if target.size else 0.0
            return ProfitCheck(name, "subgradient", res, bool(res <= tol * scale),
                               "-price inside the subdifferential interval" if res <= tol * scale
                               else "price outside the subdifferential interval")
    # re-solve the device's own profit problem
    sub = Network(T=net.T, h=net.h, probabilities=net.probabilities)
    sub.add_device(dev, name)
    for k in range(dev.n_terminals):
        sub.add_device(_PriceTaker(coef=-lam[k]), f"market{k}")
        sub.connect((name, k), f"market{k}", net=f"terminal{k}")
    best = optimize(sub, TIGHT)
    if not best.optimal:
        return ProfitCheck(name, "subproblem", INF, False, f"profit problem: {best.status.value}")
    pi = net.probabilities
    own = sum(pi[s] * dev.evaluate_cost(p[:, :, s], s=s, h=net.h, S=net.S) for s in range(net.S))
    own += float(np.einsum("kts,kts,s->", lam, p, pi))
    gap = own - best.objective
    res = float(max(gap, 0.0))
    ok = bool(res <= tol * max(1.0, abs(own)))
    return ProfitCheck(name, "subproblem", res, ok, f"profit gap {gap:.3e}")


# ---------------------------------------------------------------------------
# relaxation tightness
# ---------------------------------------------------------------------------


def relaxation_gaps(solution: Solution) -> dict:
    """Per-period relaxation gap for every lossy line and converter.

    Zero means the point lies on the exact (nonconvex) device curve.
    """
    out = {}
    net = solution.network
    for d, dev in enumerate(net.devices):
        if isinstance(dev, (LossyLine, Converter)):
            out[net.device_names[d]] = dev.relaxation_gap(solution.device_power(d)[:, :, 0])
    return out


def nonunique_price_nets(solution: Solution, rel: float = 1e-6) -> list[str]:
    """Nets whose price may not be unique.

    A net is flagged when every terminal on it belongs to a device pinned at
    a bound in the direction that would absorb an extra unit, which is the
    situation where the optimal cost is not differentiable.  Detection is
    done numerically with one-sided finite differences.
    """
    out = []
    net = solution.network
    for i, name in enumerate(net.net_names):
        for t in range(net.T):
            chk = price_check(net, i, t, 0, eps=1e-4, base=solution)
            if chk.one_sided is not None:
                out.append(name)
                break
    return out
