"""Compile a network into a sparse convex QP.

The problem has the form

    minimize    1/2 x'Px + q'x + const
    subject to  l <= Cx <= u

with one block of terminal-power columns per scenario, auxiliary columns
emitted by the devices (stored energy, temperature, epigraph variables),
one balance row per (net, period, scenario) and, when there are several
scenarios, rows forcing the first-period terminal powers to agree.

The objective is the probability-weighted sum of device costs.  Balance rows
read ``A p = -delta`` so a positive ``delta`` extracts power from a net; the
dual of such a row divided by the scenario probability is the price.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .devices import INF, Composite
from .network import Network

SOFT_PENALTY = 1e4


# ---------------------------------------------------------------------------
# tags
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetBalance:
    net: str
    period: int
    scenario: int


@dataclass(frozen=True)
class DeviceConstraint:
    device: str
    name: str
    period: int
    scenario: int


@dataclass(frozen=True)
class InfoPattern:
    column: "ColumnTag"
    scenarios: tuple[int, int]


@dataclass(frozen=True)
class ColumnTag:
    device: str
    name: str
    period: int
    scenario: int


@dataclass
class _Block:
    kind: str  # rows: "net" | "device" | "info"; columns: "terminal" | "aux" | "slack"
    owner: str
    name: str
    scenario: int
    start: int
    periods: np.ndarray
    extra: object = None

    @property
    def stop(self):
        return self.start + self.periods.size


def _locate(blocks, starts, i):
    k = bisect.bisect_right(starts, i) - 1
    b = blocks[k]
    return b, int(b.periods[i - b.start])


# ---------------------------------------------------------------------------
# canonical problem
# ---------------------------------------------------------------------------


@dataclass
class CanonicalProblem:
    P: sp.csc_matrix
    q: np.ndarray
    C: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    const: float
    T: int
    S: int
    h: float
    probabilities: np.ndarray
    terminal_cols: np.ndarray  # (M, T, S)
    net_rows: np.ndarray  # (N, T, S)
    net_names: list
    device_names: list
    row_blocks: list = field(default_factory=list)
    col_blocks: list = field(default_factory=list)

    def __post_init__(self):
        self._row_starts = [b.start for b in self.row_blocks]
        self._col_starts = [b.start for b in self.col_blocks]

    @property
    def n_vars(self) -> int:
        return self.P.shape[0]

    @property
    def n_rows(self) -> int:
        return self.C.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.const)

    def row_tag(self, i: int):
        b, t = _locate(self.row_blocks, self._row_starts, i)
        if b.kind == "net":
            return NetBalance(b.owner, t, b.scenario)
        if b.kind == "info":
            return InfoPattern(self.col_tag(int(b.extra[i - b.start])), (0, b.scenario))
        return DeviceConstraint(b.owner, b.name, t, b.scenario)

    def col_tag(self, j: int) -> ColumnTag:
        b, t = _locate(self.col_blocks, self._col_starts, j)
        return ColumnTag(b.owner, b.name, t, b.scenario)

    def aux_columns(self, device: str, name: str, scenario: int = 0) -> np.ndarray:
        """Columns of auxiliary variable ``name`` of ``device`` (period order)."""
        out = [
            np.arange(b.start, b.stop)
            for b in self.col_blocks
            if b.owner == device and b.name == name and b.scenario == scenario
        ]
        if not out:
            raise KeyError(f"no auxiliary variable '{name}' for device '{device}'")
        return np.concatenate(out)

    def decode(self, x, y):
        """Map solver vectors to ``(p, prices, raw_duals)``.

        ``p`` has shape ``(M, T, S)``; ``raw_duals`` are the balance-row
        multipliers, ``prices`` are those divided by the scenario probability.
        With several scenarios the first-period price is reported as the sum
        of the raw duals over scenarios, common to all scenarios.
        """
        x = np.asarray(x)
        y = np.asarray(y)
        p = x[self.terminal_cols]
        raw = y[self.net_rows] if self.net_rows.size else np.zeros((0, self.T, self.S))
        pi = self.probabilities
        with np.errstate(divide="ignore", invalid="ignore"):
            prices = np.where(pi > 0, raw / np.where(pi > 0, pi, 1.0), 0.0)
        if self.S > 1 and raw.size:
            prices[:, 0, :] = raw[:, 0, :].sum(axis=1, keepdims=True)
        return p, prices, raw

    def dump_triplets(self, fh) -> None:
        """Write the problem as plain-text sparse triplets.

        Sections ``P``, ``q``, ``C``, ``bounds``; nonzeros are written
        ``row col value`` one per line (0-based), vectors as ``index value``.
        """
        n, m = self.n_vars, self.n_rows
        fh.write(f"# n {n} m {m} const {float(self.const)!r}\n")
        P = sp.triu(self.P).tocoo()
        fh.write(f"P {P.nnz}\n")
        for i, j, v in zip(P.row, P.col, P.data):
            fh.write(f"{i} {j} {float(v)!r}\n")
        nz = np.flatnonzero(self.q)
        fh.write(f"q {nz.size}\n")
        for i in nz:
            fh.write(f"{i} {float(self.q[i])!r}\n")
        C = self.C.tocoo()
        fh.write(f"C {C.nnz}\n")
        for i, j, v in zip(C.row, C.col, C.data):
            fh.write(f"{i} {j} {float(v)!r}\n")
        fh.write(f"bounds {m}\n")
        for i in range(m):
            fh.write(f"{i} {float(self.l[i])!r} {float(self.u[i])!r}\n")


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self):
        self.n = 0
        self.q = []
        self.P_r, self.P_c, self.P_v = [], [], []
        self.C_r, self.C_c, self.C_v = [], [], []
        self.lo, self.hi = [], []
        self.m = 0
        self.const = 0.0
        self.row_blocks: list[_Block] = []
        self.col_blocks: list[_Block] = []

    def new_cols(self, k, kind, owner, name, scenario, periods, extra=None):
        idx = np.arange(self.n, self.n + k)
        self.col_blocks.append(_Block(kind, owner, name, scenario, self.n, np.asarray(periods, int), extra))
        self.n += k
        self.q.append(np.zeros(k))
        return idx

    def add_rows(self, kind, owner, name, scenario, terms, lo, hi, periods, extra=None):
        """Add ``k`` rows; ``terms`` is a list of ``(cols (k,), coefs)``."""
        periods = np.asarray(periods, int)
        k = periods.size
        lo = np.broadcast_to(np.asarray(lo, float), (k,)).copy()
        hi = np.broadcast_to(np.asarray(hi, float), (k,)).copy()
        keep = ~(np.isneginf(lo) & np.isposinf(hi))
        if not np.all(keep):
            idx = np.flatnonzero(keep)
            terms = [
                (np.asarray(c)[idx], np.broadcast_to(np.asarray(v, float), (k,))[idx]) for c, v in terms
            ]
            lo, hi, periods = lo[idx], hi[idx], periods[idx]
            k = idx.size
            if extra is not None:
                extra = np.asarray(extra)[idx]
        if k == 0:
            return np.zeros(0, int)
        rows = np.arange(self.m, self.m + k)
        for cols, coefs in terms:
            cols = np.asarray(cols, int)
            if cols.shape != (k,):
                raise ValueError(f"{owner}/{name}: term has {cols.shape} columns for {k} rows")
            self.C_r.append(rows)
            self.C_c.append(cols)
            self.C_v.append(np.broadcast_to(np.asarray(coefs, float), (k,)).astype(float))
        self.lo.append(lo)
        self.hi.append(hi)
        self.row_blocks.append(_Block(kind, owner, name, scenario, self.m, periods, extra))
        self.m += k
        return rows

    def add_single_row(self, kind, owner, name, scenario, cols, coefs, lo, hi, period):
        cols = np.asarray(cols, int)
        coefs = np.broadcast_to(np.asarray(coefs, float), cols.shape).astype(float)
        row = self.m
        self.C_r.append(np.full(cols.size, row))
        self.C_c.append(cols)
        self.C_v.append(coefs)
        self.lo.append(np.array([float(lo)]))
        self.hi.append(np.array([float(hi)]))
        self.row_blocks.append(_Block(kind, owner, name, scenario, self.m, np.array([period])))
        self.m += 1
        return row

    def add_linear(self, cols, coefs):
        q = np.concatenate(self.q) if len(self.q) > 1 else (self.q[0] if self.q else np.zeros(0))
        self.q = [q]
        np.add.at(q, np.asarray(cols, int), np.broadcast_to(np.asarray(coefs, float), np.shape(cols)))

    def add_quadratic(self, rows, cols, vals):
        self.P_r.append(np.asarray(rows, int))
        self.P_c.append(np.asarray(cols, int))
        self.P_v.append(np.asarray(vals, float))

    def build(self):
        n, m = self.n, self.m
        q = np.concatenate(self.q) if self.q else np.zeros(0)

        def cat(lst, dt):
            return np.concatenate(lst).astype(dt) if lst else np.zeros(0, dt)

        P = sp.csc_matrix(
            (cat(self.P_v, float), (cat(self.P_r, int), cat(self.P_c, int))), shape=(n, n)
        )
        C = sp.csc_matrix(
            (cat(self.C_v, float), (cat(self.C_r, int), cat(self.C_c, int))), shape=(m, n)
        )
        P.sum_duplicates()
        C.sum_duplicates()
        C.eliminate_zeros()
        return P, q, C, cat(self.lo, float), cat(self.hi, float)


class LoweringContext:
    """What a device sees while emitting its QP pieces for one scenario.

    ``p`` is the ``(M_d, T)`` array of terminal-power column indices.  All
    cost terms are multiplied by the scenario probability.
    """

    def __init__(self, builder, name, p, T, S, s, h, weight, soften=False, penalty=SOFT_PENALTY):
        self._b = builder
        self.device_name = name
        self.p = np.asarray(p, int)
        self.T, self.S, self.s, self.h = T, S, s, h
        self.weight = weight
        self.soften = soften
        self.penalty = penalty

    def child(self, name, p) -> "LoweringContext":
        return LoweringContext(
            self._b, f"{self.device_name}/{name}", p, self.T, self.S, self.s, self.h,
            self.weight, self.soften, self.penalty,
        )

    # variables
    def var(self, name, n=None, lb=None, ub=None, periods=None, terminal=None):
        n = self.T if n is None else n
        periods = np.arange(n) if periods is None else np.asarray(periods, int)
        kind = "terminal" if terminal is not None else "aux"
        cols = self._b.new_cols(n, kind, self.device_name, name, self.s, periods, terminal)
        lb = -INF if lb is None else lb
        ub = INF if ub is None else ub
        if np.any(np.isfinite(lb)) or np.any(np.isfinite(ub)):
            self.box(f"{name}_bounds", cols, lb, ub, periods)
        return cols

    # constraints
    def rows(self, name, terms, lo, hi, periods, soft=False):
        periods = np.asarray(periods, int)
        k = periods.size
        terms = [(np.asarray(c, int), v) for c, v in terms]
        if soft and self.soften:
            mask = periods >= 1
            if np.any(mask):
                idx = np.flatnonzero(mask)
                kk = idx.size
                sp_ = self._b.new_cols(kk, "slack", self.device_name, f"{name}_slack_pos", self.s, periods[idx])
                sn = self._b.new_cols(kk, "slack", self.device_name, f"{name}_slack_neg", self.s, periods[idx])
                self._b.add_rows("device", self.device_name, f"{name}_slack_bounds", self.s,
                                 [(np.concatenate([sp_, sn]), 1.0)], 0.0, INF, np.concatenate([periods[idx]] * 2))
                self._b.add_linear(np.concatenate([sp_, sn]), self.weight * self.penalty)
                # slack columns only touch the selected rows: use a dummy
                # column with zero coefficient on the other rows
                pos = np.zeros(k, int)
                neg = np.zeros(k, int)
                cpos = np.zeros(k)
                pos[:] = terms[0][0]
                neg[:] = terms[0][0]
                pos[idx], neg[idx] = sp_, sn
                cpos[idx] = 1.0
                terms = terms + [(pos, cpos), (neg, -cpos)]
        return self._b.add_rows("device", self.device_name, name, self.s, terms, lo, hi, periods)

    def box(self, name, cols, lo, hi, periods=None, soft=False):
        cols = np.asarray(cols, int)
        periods = np.arange(cols.size) if periods is None else np.asarray(periods, int)
        return self.rows(name, [(cols, 1.0)], lo, hi, periods, soft=soft)

    def row(self, name, cols, coefs, lo, hi, period=-1):
        return self._b.add_single_row("device", self.device_name, name, self.s, cols, coefs, lo, hi, period)

    # costs
    def linear(self, cols, coefs):
        cols = np.asarray(cols, int)
        self._b.add_linear(cols, self.weight * np.broadcast_to(np.asarray(coefs, float), cols.shape))

    def square(self, terms, weight, offset=0.0):
        """Add ``weight * (sum_i c_i x_i + offset)**2`` row-wise over the terms."""
        cols = [np.asarray(c, int) for c, _ in terms]
        k = cols[0].size
        coefs = [np.broadcast_to(np.asarray(v, float), (k,)) for _, v in terms]
        w = self.weight * np.broadcast_to(np.asarray(weight, float), (k,))
        off = np.broadcast_to(np.asarray(offset, float), (k,))
        for ci, ai in zip(cols, coefs):
            for cj, aj in zip(cols, coefs):
                self._b.add_quadratic(ci, cj, 2.0 * w * ai * aj)
            self._b.add_linear(ci, 2.0 * w * off * ai)
        self._b.const += float(np.sum(w * off * off))

    def constant(self, c):
        self._b.const += self.weight * float(c)


# ---------------------------------------------------------------------------
# compile
# ---------------------------------------------------------------------------


def compile_network(
    network: Network,
    delta=None,
    *,
    regularization: float = 0.0,
    soften=None,
    penalty: float = SOFT_PENALTY,
    info_pattern: bool = True,
) -> CanonicalProblem:
    """Build the QP for ``network``.

    ``delta`` (shape ``(N, T, S)``, or anything broadcastable to it) perturbs
    the balance rows to ``A p + delta = 0``.  ``regularization`` adds
    ``regularization * p**2`` on every terminal column.  ``soften`` is a set of
    device names whose schedule-driven rows in periods ``t >= 1`` get slack
    variables with cost ``penalty`` per unit.
    """
    network.validate()
    T, S, h = network.T, network.S, network.h
    M, N = network.M, network.N
    pi = network.probabilities
    if delta is None:
        delta = np.zeros((N, T, S))
    else:
        try:
            delta = np.broadcast_to(np.asarray(delta, float), (N, T, S))
        except ValueError:
            raise ValueError(f"delta: expected shape ({N}, {T}, {S}), got {np.shape(delta)}") from None
    soften = set(soften or ())

    b = _Builder()
    term_cols = np.zeros((M, T, S), dtype=int)
    for s in range(S):
        for d, name in enumerate(network.device_names):
            for k, m in enumerate(network.device_terminals(d)):
                term_cols[m, :, s] = b.new_cols(T, "terminal", name, f"p{k}", s, np.arange(T), (name, k))
    for s in range(S):
        for d, (name, dev) in enumerate(zip(network.device_names, network.devices)):
            terms = network.device_terminals(d)
            ctx = LoweringContext(
                b, name, term_cols[terms, :, s], T, S, s, h, pi[s],
                soften=name in soften, penalty=penalty,
            )
            dev.lower(ctx)
        if regularization:
            cols = term_cols[:, :, s].ravel()
            b.add_quadratic(cols, cols, np.full(cols.size, 2.0 * regularization * pi[s]))

    net_rows = np.zeros((N, T, S), dtype=int)
    for s in range(S):
        for i, net in enumerate(network.nets):
            members = net.members
            terms = [(term_cols[m, :, s], 1.0) for m in members]
            rhs = -delta[i, :, s]
            net_rows[i, :, s] = b.add_rows("net", net.net_id, "balance", s, terms, rhs, rhs, np.arange(T))

    if S > 1 and info_pattern:
        # first-period terminal powers (including composite internals) agree
        first = [
            blk.start + int(np.flatnonzero(blk.periods == 0)[0])
            for blk in b.col_blocks
            if blk.kind == "terminal" and blk.scenario == 0 and np.any(blk.periods == 0)
        ]
        by_key = {}
        for blk in b.col_blocks:
            if blk.kind == "terminal" and np.any(blk.periods == 0):
                key = (blk.owner, blk.name)
                by_key.setdefault(key, {})[blk.scenario] = blk.start + int(np.flatnonzero(blk.periods == 0)[0])
        base = np.array(first, int)
        keys = [
            (blk.owner, blk.name)
            for blk in b.col_blocks
            if blk.kind == "terminal" and blk.scenario == 0 and np.any(blk.periods == 0)
        ]
        for s in range(1, S):
            other = np.array([by_key[k][s] for k in keys], int)
            b.add_rows(
                "info", "info_pattern", "first_period", s, [(base, 1.0), (other, -1.0)],
                0.0, 0.0, np.zeros(base.size, int), extra=base,
            )

    P, q, C, l, u = b.build()
    return CanonicalProblem(
        P=P, q=q, C=C, l=l, u=u, const=b.const, T=T, S=S, h=h,
        probabilities=pi.copy(), terminal_cols=term_cols, net_rows=net_rows,
        net_names=network.net_names, device_names=list(network.device_names),
        row_blocks=b.row_blocks, col_blocks=b.col_blocks,
    )


def composite_cost(comp: Composite, p, s: int = 0, h: float = 1.0, S: int = 1) -> float:
    """Cost of a composite device: minimum internal cost given external powers."""
    from .devices import FixedLoad
    from .qp import SolverSettings, Status, solve_qp

    p = np.asarray(p, float)
    T = p.shape[1]
    inner = comp.select_scenario(s) if S > 1 else comp
    net = Network(T=T, h=h)
    net.add_device(inner, "composite")
    for j in range(comp.n_terminals):
        net.add_device(FixedLoad(p_fix=-p[j]), f"pin{j}")
        net.connect(("composite", j), f"pin{j}", net=f"ext{j}")
    prob = compile_network(net)
    x, y, rep = solve_qp(prob.P, prob.q, prob.C, prob.l, prob.u, SolverSettings(eps_abs=1e-8, eps_rel=1e-8))
    if rep.status is Status.PRIMAL_INFEASIBLE:
        return INF
    if rep.status is not Status.OPTIMAL:
        raise RuntimeError(f"composite cost evaluation failed: {rep.status.value}")
    return prob.objective(x)
