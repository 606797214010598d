"""Operator-splitting QP solver.

Solves

    minimize    1/2 x'Px + q'x
    subject to  l <= Cx <= u

with ADMM on the two-sided constraint form (the OSQP iteration), Ruiz
equilibration, adaptive step size and an active-set polish that refines
primal and dual iterates by solving the reduced KKT system directly.

Dual sign convention: stationarity reads ``Px + q + C'y = 0``; ``y_i > 0``
marks an active upper bound and ``y_i < 0`` an active lower bound.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INF = np.inf
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_RHO_EQ_FACTOR = 1e3


class Status(enum.Enum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class SolverSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_prim_inf: float = 1e-5
    eps_dual_inf: float = 1e-5
    max_iterations: int = 200_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 50
    scaling_iterations: int = 15
    check_interval: int = 10
    polish: bool = True
    polish_delta: float = 1e-7
    polish_refine_iter: int = 40
    polish_rounds: int = 30
    seed: int | None = None
    verify: bool = False

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0 < self.alpha < 2:
            raise ValueError("relaxation alpha must lie in (0, 2)")
        if self.rho <= 0 or self.sigma <= 0:
            raise ValueError("rho and sigma must be positive")


@dataclass
class SolveReport:
    status: Status
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    polished: bool = False
    rho_updates: int = 0
    # For infeasible/unbounded problems: indices of the rows (or columns)
    # carrying the largest certificate entries.
    certificate_rows: list[int] = field(default_factory=list)
    certificate_cols: list[int] = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


class SolverError(RuntimeError):
    pass


def _inf_norm(v):
    return float(np.max(np.abs(v))) if v.size else 0.0


def _col_inf_norms(M: sp.csc_matrix) -> np.ndarray:
    out = np.zeros(M.shape[1])
    if M.nnz:
        absM = abs(M).tocsc()
        out = np.asarray(absM.max(axis=0).todense()).ravel()
    return out


def _row_inf_norms(M: sp.csr_matrix) -> np.ndarray:
    out = np.zeros(M.shape[0])
    if M.nnz:
        absM = abs(M).tocsr()
        out = np.asarray(absM.max(axis=1).todense()).ravel()
    return out


def _limit(v, lo=1e-4, hi=1e4):
    v = np.where(v < lo, 1.0, v)
    return np.minimum(v, hi)


class _Scaling:
    """Diagonal equilibration D (columns), E (rows) and cost scale c."""

    def __init__(self, P, q, C, iterations):
        n, m = P.shape[0], C.shape[0]
        D = np.ones(n)
        E = np.ones(m)
        c = 1.0
        Ps, qs, Cs = P.copy(), q.copy(), C.copy()
        for _ in range(iterations):
            # column norms of the KKT matrix [P C'; C 0]
            dx = np.maximum(_col_inf_norms(Ps), _col_inf_norms(Cs))
            dy = _row_inf_norms(Cs.tocsr())
            dx = 1.0 / np.sqrt(_limit(dx))
            dy = 1.0 / np.sqrt(_limit(dy))
            Dx, Dy = sp.diags(dx), sp.diags(dy)
            Ps = (Dx @ Ps @ Dx).tocsc()
            qs = dx * qs
            Cs = (Dy @ Cs @ Dx).tocsc()
            D *= dx
            E *= dy
        # cost scaling, applied once after equilibration
        pnorm = _col_inf_norms(Ps)
        gamma = max(float(np.mean(pnorm)) if n else 0.0, _inf_norm(qs))
        gamma = 1.0 / _limit(np.array([gamma]))[0]
        Ps = (gamma * Ps).tocsc()
        qs = gamma * qs
        c *= gamma
        self.D, self.E, self.c = D, E, c
        self.P, self.q, self.C = Ps, qs, Cs


def _kkt(P, C, sigma, rho_vec):
    n = P.shape[0]
    K = sp.bmat(
        [[P + sigma * sp.eye(n), C.T], [C, sp.diags(-1.0 / rho_vec)]],
        format="csc",
    )
    return K


def _factor(K):
    return spla.splu(
        K,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )


def _project(z, l, u):
    return np.minimum(np.maximum(z, l), u)


def solve(prob, settings: SolverSettings | None = None, warm_start=None):
    """Solve a compiled problem (anything with ``P, q, C, l, u``).

    ``warm_start`` is an optional ``(x0, y0)`` pair.
    """
    x0, y0 = (None, None) if warm_start is None else warm_start
    return solve_qp(prob.P, prob.q, prob.C, prob.l, prob.u, settings, x0=x0, y0=y0)


def solve_qp(
    P,
    q,
    C,
    l,
    u,
    settings: SolverSettings | None = None,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
):
    """Solve the QP; returns ``(x, y, SolveReport)``.

    ``x0``/``y0`` optionally warm start the iteration (unscaled values).
    """
    settings = settings or SolverSettings()
    P = sp.csc_matrix(P, dtype=float)
    C = sp.csc_matrix(C, dtype=float)
    q = np.asarray(q, dtype=float).copy()
    l = np.asarray(l, dtype=float).copy()
    u = np.asarray(u, dtype=float).copy()
    n, m = P.shape[0], C.shape[0]
    if C.shape[1] != n or q.shape != (n,) or l.shape != (m,) or u.shape != (m,):
        raise ValueError("inconsistent problem dimensions")
    if np.any(l > u):
        bad = np.flatnonzero(l > u)
        return (
            np.zeros(n),
            np.zeros(m),
            SolveReport(Status.PRIMAL_INFEASIBLE, 0, INF, INF, INF, certificate_rows=bad[:5].tolist()),
        )
    return _Solver(P, q, C, l, u, settings).run(x0, y0)


class _Solver:
    def __init__(self, P, q, C, l, u, settings):
        self.s = settings
        self.P0, self.q0, self.C0, self.l0, self.u0 = P, q, C, l, u
        self.n, self.m = P.shape[0], C.shape[0]
        sc = _Scaling(P, q, C, settings.scaling_iterations)
        self.sc = sc
        self.P, self.q, self.C = sc.P, sc.q, sc.C
        self.l = np.where(np.isfinite(l), sc.E * l, l)
        self.u = np.where(np.isfinite(u), sc.E * u, u)
        self.eq = np.isfinite(l) & np.isfinite(u) & (u - l < 1e-10)
        self.rho = settings.rho
        self.CT = self.C.T.tocsc()

    def _rho_vec(self):
        r = np.full(self.m, self.rho)
        r[self.eq] = min(self.rho * _RHO_EQ_FACTOR, _RHO_MAX)
        # free rows get (nearly) no penalty
        free = ~np.isfinite(self.l) & ~np.isfinite(self.u)
        r[free] = _RHO_MIN
        return r

    def _refactor(self):
        self.rho_vec = self._rho_vec()
        self.lu = _factor(_kkt(self.P, self.C, self.s.sigma, self.rho_vec))

    # unscaled views
    def _unscale(self, x, y):
        sc = self.sc
        return sc.D * x, sc.E * y / sc.c

    def _residuals(self, x, y, z):
        """Unscaled primal/dual residuals and their tolerances."""
        sc = self.sc
        xu, yu = self._unscale(x, y)
        Cx = self.C0 @ xu
        zu = z / sc.E
        Px = self.P0 @ xu
        CTy = self.C0.T @ yu
        r_prim = _inf_norm(Cx - zu)
        r_dual = _inf_norm(Px + self.q0 + CTy)
        eps_prim = self.s.eps_abs + self.s.eps_rel * max(_inf_norm(Cx), _inf_norm(zu))
        eps_dual = self.s.eps_abs + self.s.eps_rel * max(
            _inf_norm(Px), _inf_norm(CTy), _inf_norm(self.q0)
        )
        return r_prim, r_dual, eps_prim, eps_dual

    def run(self, x0, y0):
        s = self.s
        n, m = self.n, self.m
        sc = self.sc
        x = np.zeros(n) if x0 is None else np.asarray(x0, float) / sc.D
        y = np.zeros(m) if y0 is None else np.asarray(y0, float) * sc.c / sc.E
        z = _project(self.C @ x, self.l, self.u)
        self._refactor()
        rho_updates = 0
        last_polish_key = None
        polish_tries = 0
        it = 0
        status = Status.MAX_ITERATIONS
        r_prim = r_dual = INF
        result = None
        for it in range(1, s.max_iterations + 1):
            x_prev, y_prev, z_prev = x, y, z
            rhs = np.concatenate([s.sigma * x - self.q, z - y / self.rho_vec])
            sol = self.lu.solve(rhs)
            xt = sol[:n]
            nu = sol[n:]
            zt = z + (nu - y) / self.rho_vec
            x = s.alpha * xt + (1 - s.alpha) * x_prev
            zr = s.alpha * zt + (1 - s.alpha) * z_prev
            z = _project(zr + y / self.rho_vec, self.l, self.u)
            y = y + self.rho_vec * (zr - z)

            if it % s.check_interval and it != s.max_iterations:
                continue
            r_prim, r_dual, eps_prim, eps_dual = self._residuals(x, y, z)
            if r_prim <= eps_prim and r_dual <= eps_dual:
                status = Status.OPTIMAL
                break
            # polishing early can terminate the iteration once the active
            # set is identified
            if s.polish and r_prim <= 1e3 * eps_prim and r_dual <= 1e3 * eps_dual:
                key = self._active_key(x, y, z)
                if key != last_polish_key and polish_tries < 50:
                    last_polish_key = key
                    polish_tries += 1
                    result = self._polish(x, y, z)
                    if result is not None:
                        status = Status.OPTIMAL
                        break
            cert = self._infeasibility(x - x_prev, y - y_prev)
            if cert is not None:
                return self._infeasible_result(cert, x - x_prev, y - y_prev, it, rho_updates)
            if s.adaptive_rho and it % s.adaptive_rho_interval == 0:
                new_rho = self._new_rho(x, y, z)
                if new_rho > 5 * self.rho or new_rho < 0.2 * self.rho:
                    self.rho = new_rho
                    self._refactor()
                    rho_updates += 1

        polished = False
        if result is not None:
            xu, yu = result
            polished = True
        else:
            if status is Status.OPTIMAL and s.polish:
                result = self._polish(x, y, z)
            if result is not None:
                xu, yu = result
                polished = True
            else:
                xu, yu = self._unscale(x, y)
        report = self._report(status, it, xu, yu, polished, rho_updates)
        if s.verify or os.environ.get("GRIDFLOW_VERIFY_KKT"):
            self._verify(report, xu, yu)
        return xu, yu, report

    # ------------------------------------------------------------------
    def _active_key(self, x, y, z):
        lower = (z - self.l < -y) & ~self.eq
        upper = (self.u - z < y) & ~self.eq
        return hash((np.packbits(lower).tobytes(), np.packbits(upper).tobytes()))

    def _polish(self, x, y, z):
        """Solve the equality-constrained QP on the guessed active set.

        Iterative refinement on the regularized reduced KKT system is started
        from the ADMM iterate, so on a degenerate active set the dual lands
        on the nearest multiplier consistent with the active rows.  If the
        result has multipliers of the wrong sign or violates an inactive
        row, the active set is corrected and the step repeated a few times.
        """
        lower = (z - self.l < -y) | self.eq
        upper = (self.u - z < y) | self.eq
        both = lower & upper & ~self.eq
        # row flagged both ways: trust the multiplier sign
        lower[both] = y[both] < 0
        upper[both] = ~lower[both]
        xs, ys = x, y
        for _ in range(self.s.polish_rounds):
            res = self._polish_step(xs, ys, lower, upper)
            if res is None:
                return None
            xp, yp = res
            xu, yu = self._unscale(xp, yp)
            if self._kkt_ok(xu, yu):
                return xu, yu
            # primal-dual active-set correction in scaled space
            Cx = self.C @ xp
            tiny = 1e-9 * max(1.0, _inf_norm(yp))
            gap = 1e-9 * max(1.0, _inf_norm(Cx))
            new_upper = upper & (self.eq | (yp > -tiny)) | (Cx > self.u + gap)
            new_lower = lower & (self.eq | (yp < tiny)) | (Cx < self.l - gap)
            if np.array_equal(new_upper, upper) and np.array_equal(new_lower, lower):
                return None
            upper, lower = new_upper, new_lower
            xs, ys = xp, yp
        return None

    def _polish_step(self, x, y, lower, upper):
        s = self.s
        act = np.flatnonzero(lower | upper)
        b = np.where(upper[act], self.u[act], self.l[act])
        if not np.all(np.isfinite(b)):
            return None
        CA = self.C[act]
        n, k = self.n, act.size
        d = s.polish_delta
        K0 = sp.bmat([[self.P, CA.T], [CA, None]], format="csc")
        Kd = sp.bmat(
            [[self.P + d * sp.eye(n), CA.T], [CA, -d * sp.eye(k)]], format="csc"
        )
        try:
            lu = _factor(Kd)
        except RuntimeError:
            return None
        rhs = np.concatenate([-self.q, b])
        sol = np.concatenate([x, y[act]])
        scale = max(1.0, _inf_norm(rhs))
        for _ in range(s.polish_refine_iter):
            r = rhs - K0 @ sol
            if _inf_norm(r) <= 1e-13 * scale:
                break
            step = lu.solve(r)
            if not np.all(np.isfinite(step)):
                return None
            sol = sol + step
        yp = np.zeros(self.m)
        yp[act] = sol[n:]
        return sol[:n], yp

    def _kkt_ok(self, xu, yu):
        s = self.s
        Cx = self.C0 @ xu
        Px = self.P0 @ xu
        CTy = self.C0.T @ yu
        viol = np.maximum(self.l0 - Cx, Cx - self.u0)
        r_prim = _inf_norm(np.maximum(viol, 0.0))
        r_dual = _inf_norm(Px + self.q0 + CTy)
        eps_prim = s.eps_abs + s.eps_rel * _inf_norm(Cx)
        eps_dual = s.eps_abs + s.eps_rel * max(_inf_norm(Px), _inf_norm(CTy), _inf_norm(self.q0))
        if not (r_prim <= eps_prim and r_dual <= eps_dual):
            return False
        # multiplier signs must match the side that is active
        tol = eps_dual
        up_gap = self.u0 - Cx
        lo_gap = Cx - self.l0
        bad_pos = (yu > tol) & (up_gap > eps_prim)
        bad_neg = (yu < -tol) & (lo_gap > eps_prim)
        return not (np.any(bad_pos) or np.any(bad_neg))

    def _new_rho(self, x, y, z):
        Cx = self.C @ x
        Px = self.P @ x
        CTy = self.CT @ y
        rp = _inf_norm(Cx - z) / max(_inf_norm(Cx), _inf_norm(z), 1e-10)
        rd = _inf_norm(Px + self.q + CTy) / max(
            _inf_norm(Px), _inf_norm(CTy), _inf_norm(self.q), 1e-10
        )
        new = self.rho * np.sqrt(rp / max(rd, 1e-10))
        return float(min(max(new, _RHO_MIN), _RHO_MAX))

    def _infeasibility(self, dx, dy):
        s = self.s
        dyu = self.sc.E * dy
        ndy = _inf_norm(dyu)
        if ndy > 1e-12:
            # primal infeasibility certificate, in unscaled quantities
            CTdy = (self.CT @ dy) / self.sc.D
            if _inf_norm(CTdy) <= s.eps_prim_inf * ndy:
                pos = np.maximum(dy, 0)
                neg = np.minimum(dy, 0)
                uu = np.where(np.isfinite(self.u), self.u, 0.0)
                ll = np.where(np.isfinite(self.l), self.l, 0.0)
                bad_inf = np.any((pos > 1e-12 * _inf_norm(dy)) & ~np.isfinite(self.u)) or np.any(
                    (neg < -1e-12 * _inf_norm(dy)) & ~np.isfinite(self.l)
                )
                if not bad_inf and uu @ pos + ll @ neg < -s.eps_prim_inf * ndy:
                    return Status.PRIMAL_INFEASIBLE
        ndx = _inf_norm(dx)
        if ndx > 1e-12:
            dxu = self.sc.D * dx
            ndxu = _inf_norm(dxu)
            Pdx = (self.P @ dx) / self.sc.D / self.sc.c
            qdx = (self.q @ dx) / self.sc.c
            if _inf_norm(Pdx) <= s.eps_dual_inf * ndxu and qdx < -s.eps_dual_inf * ndxu:
                Cdx = (self.C @ dx) / self.sc.E
                tol = s.eps_dual_inf * ndxu
                ok = np.where(
                    np.isfinite(self.u) & np.isfinite(self.l),
                    np.abs(Cdx) <= tol,
                    np.where(np.isfinite(self.u), Cdx <= tol, np.where(np.isfinite(self.l), Cdx >= -tol, True)),
                )
                if np.all(ok):
                    return Status.DUAL_INFEASIBLE
        return None

    def _infeasible_result(self, status, dx, dy, it, rho_updates):
        n, m = self.n, self.m
        rep = SolveReport(status, it, INF, INF, INF if status is Status.PRIMAL_INFEASIBLE else -INF,
                          rho_updates=rho_updates)
        if status is Status.PRIMAL_INFEASIBLE:
            dyu = self.sc.E * dy
            order = np.argsort(-np.abs(dyu), kind="stable")
            big = 1e-3 * _inf_norm(dyu)
            rep.certificate_rows = [int(i) for i in order[:5] if abs(dyu[i]) > big]
        else:
            dxu = self.sc.D * dx
            order = np.argsort(-np.abs(dxu), kind="stable")
            big = 1e-3 * _inf_norm(dxu)
            rep.certificate_cols = [int(i) for i in order[:5] if abs(dxu[i]) > big]
        return np.full(n, np.nan), np.full(m, np.nan), rep

    def _report(self, status, it, xu, yu, polished, rho_updates):
        Cx = self.C0 @ xu
        viol = np.maximum(np.maximum(self.l0 - Cx, Cx - self.u0), 0.0)
        r_prim = _inf_norm(viol)
        r_dual = _inf_norm(self.P0 @ xu + self.q0 + self.C0.T @ yu)
        obj = 0.5 * xu @ (self.P0 @ xu) + self.q0 @ xu
        return SolveReport(status, it, r_prim, r_dual, float(obj), polished, rho_updates)

    def _verify(self, report, xu, yu):
        if report.status is not Status.OPTIMAL:
            return
        s = self.s
        Cx = self.C0 @ xu
        Px = self.P0 @ xu
        CTy = self.C0.T @ yu
        eps_prim = s.eps_abs + s.eps_rel * _inf_norm(Cx)
        eps_dual = s.eps_abs + s.eps_rel * max(_inf_norm(Px), _inf_norm(CTy), _inf_norm(self.q0))
        # ADMM termination measures ||Cx - z||; allow for the z/Cx gap
        if report.primal_residual > 2 * eps_prim or report.dual_residual > 2 * eps_dual:
            raise SolverError(
                f"KKT check failed: primal {report.primal_residual:.3e} (tol {eps_prim:.3e}), "
                f"dual {report.dual_residual:.3e} (tol {eps_dual:.3e})"
            )
