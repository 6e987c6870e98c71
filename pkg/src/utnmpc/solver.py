"""Projected-gradient solver for smooth objectives over ``{A u = b, lo <= u <= hi}``.

Every iterate is feasible: the projection onto the affine-box set is exact
when the equality rows are disjoint sums with a common coefficient (the
green-time cycle constraints have this form) and Dykstra's cyclic projection
otherwise.  Steps start from a Barzilai-Borwein estimate and backtrack along
the projection arc until the Armijo condition holds, so accepted objective
values never increase.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels


class SolverError(RuntimeError):
    pass


class InfeasibleError(SolverError):
    pass


class NonFiniteObjectiveError(SolverError):
    def __init__(self, message: str, iterate: np.ndarray):
        super().__init__(message)
        self.iterate = iterate


class RankDeficientError(SolverError, ValueError):
    pass


@dataclass
class NlpProblem:
    """``min f(u)`` subject to ``A u = b`` and ``lo <= u <= hi``.

    Supply ``value_and_grad`` (preferred), or ``objective`` with an optional
    ``gradient``; a missing gradient falls back to central differences.
    """

    n: int
    lo: np.ndarray
    hi: np.ndarray
    u0: np.ndarray
    objective: Callable[[np.ndarray], float] | None = None
    gradient: Callable[[np.ndarray], np.ndarray] | None = None
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    check_rank: bool = True  # callers re-solving a known-good constraint set may skip the SVD

    def __post_init__(self):
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (self.n,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (self.n,)).copy()
        self.u0 = np.asarray(self.u0, dtype=float).reshape(self.n).copy()
        if self.A is None:
            self.A = np.zeros((0, self.n))
            self.b = np.zeros(0)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float)).reshape(-1, self.n)
        self.b = np.asarray(self.b, dtype=float).reshape(self.A.shape[0])
        if np.any(self.lo > self.hi):
            bad = np.flatnonzero(self.lo > self.hi)
            raise ValueError(f"lower bound above upper bound at indices {bad.tolist()}")
        if self.objective is None and self.value_and_grad is None:
            raise ValueError("NlpProblem needs objective or value_and_grad")
        m = self.A.shape[0]
        if m and self.check_rank and np.linalg.matrix_rank(self.A) < m:
            raise RankDeficientError(f"equality matrix has rank {np.linalg.matrix_rank(self.A)} < {m} rows")

    def evaluate(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        if self.value_and_grad is not None:
            f, g = self.value_and_grad(u)
            return float(f), np.asarray(g, dtype=float)
        f = float(self.objective(u))
        if self.gradient is not None:
            return f, np.asarray(self.gradient(u), dtype=float)
        return f, finite_diff_gradient(self.objective, u)

    def value(self, u: np.ndarray) -> float:
        if self.objective is not None:
            return float(self.objective(u))
        return float(self.value_and_grad(u)[0])


@dataclass
class SolveOptions:
    opt_tol: float = 1e-5
    feas_tol: float = 1e-8
    max_iter: int = 500
    step_tol: float = 1e-12
    armijo: float = 1e-4
    max_backtracks: int = 40
    projection_tol: float = 1e-10
    trace_path: str | None = None  # iterate trace CSV (debug)


@dataclass
class SolveReport:
    u: np.ndarray
    objective: float
    iterations: int
    converged: bool
    max_violation: float
    wall_time: float
    status: str = ""
    pg_norm: float = math.inf
    evaluations: int = 0
    trace: list = field(default_factory=list, repr=False)


def finite_diff_gradient(f: Callable[[np.ndarray], float], u, h: float = 1e-5) -> np.ndarray:
    """Central differences with per-coordinate step ``h * max(1, |u_i|)``."""
    u = np.asarray(u, dtype=float)
    g = np.zeros_like(u)
    for i in range(u.size):
        hi = h * max(1.0, abs(u[i]))
        up = u.copy()
        dn = u.copy()
        up[i] += hi
        dn[i] -= hi
        fp, fm = float(f(up)), float(f(dn))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteObjectiveError(f"non-finite objective while differencing coordinate {i}", up)
        g[i] = (fp - fm) / (2.0 * hi)
    return g


# ---------------------------------------------------------------------------
# projection


class AffineBoxProjector:
    """Euclidean projection onto ``{A u = b, lo <= u <= hi}``."""

    def __init__(self, lo, hi, A, b, tol: float = 1e-10, max_sweeps: int = 20000):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.A = np.asarray(A, dtype=float).reshape(-1, self.lo.size)
        self.b = np.asarray(b, dtype=float).reshape(-1)
        self.tol = tol
        self.max_sweeps = max_sweeps
        self.blocks = self._detect_blocks()
        if self.blocks is None and self.A.shape[0]:
            self._pinv = np.linalg.pinv(self.A)

    def _detect_blocks(self):
        n = self.lo.size
        used = np.zeros(n, dtype=bool)
        ptr, idx, rhs = [0], [], []
        for row, bi in zip(self.A, self.b):
            nz = np.flatnonzero(row)
            if nz.size == 0 or np.any(used[nz]) or not np.all(row[nz] == row[nz[0]]):
                return None
            used[nz] = True
            idx.extend(nz.tolist())
            ptr.append(len(idx))
            rhs.append(bi / row[nz[0]])
        return (np.array(ptr, dtype=np.int64), np.array(idx, dtype=np.int64),
                np.array(rhs, dtype=float), np.flatnonzero(~used).astype(np.int64))

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.blocks is not None:
            ptr, idx, rhs, free = self.blocks
            v, ok = kernels.project_blocks(y, self.lo, self.hi, ptr, idx, rhs, free)
            if not ok:
                raise InfeasibleError("cycle-sum equality cannot be met within the green bounds")
            return v
        return self._dykstra(y)

    def _dykstra(self, y):
        # the affine set needs no correction term, only the box does
        v = np.clip(y, self.lo, self.hi)
        corr = np.zeros_like(y)
        z = y.copy()
        for _ in range(self.max_sweeps):
            a = z - self._pinv @ (self.A @ z - self.b)
            w = np.clip(a + corr, self.lo, self.hi)
            corr = a + corr - w
            v = w
            if np.max(np.abs(self.A @ v - self.b)) <= self.tol:
                return v
            z = w
        raise InfeasibleError(
            f"projection did not reach tolerance {self.tol} after {self.max_sweeps} sweeps "
            f"(residual {np.max(np.abs(self.A @ v - self.b)):.3e})")

    def violation(self, u) -> float:
        if u.size == 0:
            return 0.0
        box = max(0.0, (self.lo - u).max(), (u - self.hi).max())
        eq = np.abs(self.A @ u - self.b).max() if self.A.shape[0] else 0.0
        return float(max(box, eq))


# ---------------------------------------------------------------------------
# solve


def _sup(v) -> float:
    return float(np.abs(v).max()) if v.size else 0.0


def _check_finite(f, g, u):
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjectiveError(f"objective or gradient not finite (f={f})", u.copy())


def solve(p: NlpProblem, opts: SolveOptions | None = None,
          projector: AffineBoxProjector | None = None) -> SolveReport:
    opts = opts or SolveOptions()
    t0 = time.perf_counter()
    proj = projector or AffineBoxProjector(p.lo, p.hi, p.A, p.b, tol=opts.projection_tol)
    u = proj(p.u0)
    f, g = p.evaluate(u)
    _check_finite(f, g, u)
    nev = 1
    trace = [(0, f, math.nan, 0.0, proj.violation(u))]
    alpha = 1.0 / max(1.0, _sup(g))
    status = "max_iter"
    pg = math.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        pg = _sup(u - proj(u - g))
        if pg <= opts.opt_tol:
            status = "optimal"
            it -= 1
            break
        accepted = False
        for _ in range(opts.max_backtracks):
            un = proj(u - alpha * g)
            d = un - u
            if _sup(d) <= opts.step_tol:
                break
            fn, gn = p.evaluate(un)
            nev += 1
            if math.isfinite(fn) and fn <= f + opts.armijo * float(g @ d):
                _check_finite(fn, gn, un)
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = "step_tol"
            break
        s, y = un - u, gn - g
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 1e-300 else 2.0 * alpha
        alpha = min(max(alpha, 1e-12), 1e12)
        u, f, g = un, fn, gn
        trace.append((it, f, pg, _sup(s), proj.violation(u)))
    else:
        pg = _sup(u - proj(u - g))
        if pg <= opts.opt_tol:
            status = "optimal"
    viol = proj.violation(u)
    rep = SolveReport(u=u, objective=f, iterations=it, converged=(status == "optimal" and viol <= opts.feas_tol),
                      max_violation=viol, wall_time=time.perf_counter() - t0, status=status, pg_norm=pg,
                      evaluations=nev, trace=trace)
    if opts.trace_path:
        write_trace(rep, opts.trace_path)
    return rep


def solve_multistart(p: NlpProblem, opts: SolveOptions | None = None, restarts: int = 5,
                     seed: int = 0) -> SolveReport:
    """Best of ``restarts`` solves: the given start plus random feasible points."""
    opts = opts or SolveOptions()
    proj = AffineBoxProjector(p.lo, p.hi, p.A, p.b, tol=opts.projection_tol)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    best = None
    for r in range(max(1, restarts)):
        if r == 0:
            start = p.u0
        else:
            lo = np.where(np.isfinite(p.lo), p.lo, -1.0)
            hi = np.where(np.isfinite(p.hi), p.hi, 1.0)
            start = lo + rng.random(p.n) * (hi - lo)
        q = NlpProblem(n=p.n, lo=p.lo, hi=p.hi, u0=start, objective=p.objective, gradient=p.gradient,
                       value_and_grad=p.value_and_grad, A=p.A, b=p.b, check_rank=False) if r else p
        rep = solve(q, opts, proj)
        if best is None or rep.objective < best.objective:
            best = rep
    best.wall_time = time.perf_counter() - t0
    return best


def write_trace(rep: SolveReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "objective", "pg_norm", "step", "max_violation"))
        for row in rep.trace:
            w.writerow([row[0]] + [f"{v:.10e}" for v in row[1:]])
