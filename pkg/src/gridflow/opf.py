"""Optimal power flow: compile, solve and decode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compiler import CanonicalProblem, compile_network
from .network import Network
from .qp import SolveReport, SolverSettings, Status, solve


class InfeasibleError(RuntimeError):
    """Raised by ``Solution.require_optimal`` for non-optimal solves."""

    def __init__(self, message, report=None, tags=()):
        super().__init__(message)
        self.report = report
        self.tags = list(tags)


@dataclass
class Solution:
    network: Network
    problem: CanonicalProblem
    x: np.ndarray
    y: np.ndarray
    report: SolveReport
    p: np.ndarray | None = None  # (M, T, S)
    prices: np.ndarray | None = None  # (N, T, S)
    raw_duals: np.ndarray | None = None  # (N, T, S)

    @property
    def status(self) -> Status:
        return self.report.status

    @property
    def optimal(self) -> bool:
        return self.report.status is Status.OPTIMAL

    @property
    def objective(self) -> float:
        """Optimal cost, including constant cost terms."""
        return self.problem.objective(self.x)

    def require_optimal(self) -> "Solution":
        if not self.optimal:
            raise InfeasibleError(self.describe_failure(), self.report, self.certificate_tags())
        return self

    def certificate_tags(self):
        if self.report.certificate_rows:
            return [self.problem.row_tag(i) for i in self.report.certificate_rows]
        return [self.problem.col_tag(j) for j in self.report.certificate_cols]

    def describe_failure(self) -> str:
        st = self.report.status
        if st is Status.PRIMAL_INFEASIBLE:
            tags = ", ".join(str(t) for t in self.certificate_tags())
            return f"problem is infeasible; conflicting constraints include: {tags}"
        if st is Status.DUAL_INFEASIBLE:
            tags = ", ".join(str(t) for t in self.certificate_tags())
            return f"problem is unbounded; unbounded direction involves: {tags}"
        return f"solver stopped with status {st.value} after {self.report.iterations} iterations"

    # accessors -----------------------------------------------------------
    def device_power(self, device) -> np.ndarray:
        """Terminal powers of ``device``, shape ``(M_d, T, S)``."""
        return self.p[self.network.device_terminals(device)]

    def price(self, net) -> np.ndarray:
        i = net if isinstance(net, int) else self.network.net_names.index(net)
        return self.prices[i]

    def terminal_prices(self) -> np.ndarray:
        """Price seen by each terminal, shape ``(M, T, S)``."""
        idx = self.network.net_of_terminals()
        return self.prices[idx]

    def aux(self, device, name, scenario: int = 0) -> np.ndarray:
        dname = device if isinstance(device, str) else self.network.device_names[device]
        return self.x[self.problem.aux_columns(dname, name, scenario)]


def optimize(
    network: Network,
    settings: SolverSettings | None = None,
    *,
    delta=None,
    regularization: float = 0.0,
    warm_start=None,
    soften=None,
    problem: CanonicalProblem | None = None,
) -> Solution:
    """Solve the (static, dynamic or scenario) OPF problem for ``network``."""
    prob = problem or compile_network(network, delta, regularization=regularization, soften=soften)
    x, y, rep = solve(prob, settings, warm_start)
    sol = Solution(network, prob, x, y, rep)
    if rep.status is Status.OPTIMAL or rep.status is Status.MAX_ITERATIONS:
        sol.p, sol.prices, sol.raw_duals = prob.decode(x, y)
    return sol
