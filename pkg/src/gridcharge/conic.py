"""Interior-point solver for linear-plus-weighted-log objectives over
equality constraints, box bounds, and rotated second-order cones.

The problem class is

    maximize    c'x + sum_i w_i * log(x_i)
    subject to  A x = b
                lower <= x <= upper        (entries may be infinite)
                x_u >= 0, x_v >= 0, x_u * x_v >= x_z**2   per cone triple

Each cone triple is the 2x2 positive-semidefiniteness condition on
[[u, z], [z, v]], for which -log(u*v - z^2) is the standard self-concordant
barrier.  The weighted logs in the objective are themselves self-concordant,
so they are folded directly into the barrier subproblems: each centering
stage minimizes t*(-c'x - sum w_i log x_i) + Phi(x) subject to A x = b with
an infeasible-start primal-dual Newton method, and the stage parameter t is
increased geometrically until the duality-gap bound of the barrier
certifies the requested tolerance.

Everything is deterministic: fixed starting point (or caller-supplied),
fixed stage schedule, no randomness.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

__all__ = [
    "ConicProblem",
    "Solution",
    "SolverConfig",
    "FeasibilityReport",
    "SolverError",
    "solve",
    "check_feasible",
    "default_start",
    "dump_problem",
    "load_problem",
]

_CONE_D2 = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 2.0]])


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Interior-point knobs.

    `tolerance` bounds the relative duality gap and the scaled KKT residuals
    of a solution reported as optimal.  `barrier_reduction` is the factor by
    which the gap target shrinks between centering stages.
    """

    tolerance: float = 1e-8
    max_iterations: int = 200
    barrier_reduction: float = 1.0 / 30.0
    presolve: bool = True

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.barrier_reduction < 1:
            raise ValueError("barrier_reduction must be in (0, 1)")


@dataclass
class ConicProblem:
    """Data of one maximize instance; see module docstring for semantics."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    log_terms: tuple = ()          # (variable index, positive weight) pairs
    cones: tuple = ()              # (u, v, z) index triples
    names: tuple = ()              # optional variable names for dumps

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.shape[0]
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError("A and b row counts differ")
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bound vectors must have length n")
        self.log_terms = tuple((int(i), float(w)) for i, w in self.log_terms)
        for i, w in self.log_terms:
            if not 0 <= i < n:
                raise ValueError(f"log term index {i} out of range")
            if w <= 0:
                raise ValueError(f"log term weight must be positive, got {w}")
            if self.lower[i] < 0:
                raise ValueError(f"log variable {i} must have lower bound >= 0")
        seen = set()
        for i, _ in self.log_terms:
            if i in seen:
                raise ValueError(f"duplicate log term for variable {i}")
            seen.add(i)
        self.cones = tuple((int(u), int(v), int(z)) for u, v, z in self.cones)
        for u, v, z in self.cones:
            if len({u, v, z}) != 3:
                raise ValueError(f"cone indices must be distinct, got {(u, v, z)}")
            for i in (u, v, z):
                if not 0 <= i < n:
                    raise ValueError(f"cone index {i} out of range")
        if self.names and len(self.names) != n:
            raise ValueError("names must match variable count")

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def objective(self, x: np.ndarray) -> float:
        value = float(self.c @ x)
        for i, w in self.log_terms:
            value += w * math.log(x[i])
        return value


@dataclass(frozen=True)
class FeasibilityReport:
    equality_violation: float
    bound_violation: float
    cone_violation: float
    passed: bool

    @property
    def worst(self) -> float:
        return max(self.equality_violation, self.bound_violation, self.cone_violation)


@dataclass(frozen=True)
class Solution:
    status: str                  # optimal | infeasible | numerical-failure
    x: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    complementarity: float
    iterations: int
    message: str = ""

    def __post_init__(self):
        if self.status not in ("optimal", "infeasible", "numerical-failure"):
            raise ValueError(f"unknown status {self.status!r}")


def check_feasible(problem: ConicProblem, x: Sequence[float], tol: float) -> FeasibilityReport:
    """Worst violation per constraint class; passes iff all within tol."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.n,):
        raise ValueError(f"x must have length {problem.n}")
    eq = float(np.max(np.abs(problem.A @ x - problem.b))) if problem.A.shape[0] else 0.0
    lo = problem.lower - x
    hi = x - problem.upper
    bound = 0.0
    finite_lo = np.isfinite(problem.lower)
    finite_hi = np.isfinite(problem.upper)
    if finite_lo.any():
        bound = max(bound, float(np.max(lo[finite_lo])))
    if finite_hi.any():
        bound = max(bound, float(np.max(hi[finite_hi])))
    bound = max(bound, 0.0)
    cone = 0.0
    for u, v, z in problem.cones:
        cone = max(cone, x[z] ** 2 - x[u] * x[v], -x[u], -x[v])
    cone = max(cone, 0.0)
    return FeasibilityReport(
        equality_violation=eq,
        bound_violation=bound,
        cone_violation=float(cone),
        passed=bool(eq <= tol and bound <= tol and cone <= tol),
    )


def default_start(problem: ConicProblem, margin: float = 1e-3) -> np.ndarray:
    """Strictly interior default start: analytic center of the boxes with
    cone coordinates pushed inside by a fixed relative margin."""
    lo, hi = problem.lower, problem.upper
    x = np.zeros(problem.n)
    both = np.isfinite(lo) & np.isfinite(hi)
    x[both] = 0.5 * (lo[both] + hi[both])
    lo_only = np.isfinite(lo) & ~np.isfinite(hi)
    x[lo_only] = lo[lo_only] + np.maximum(1.0, np.abs(lo[lo_only]))
    hi_only = ~np.isfinite(lo) & np.isfinite(hi)
    x[hi_only] = hi[hi_only] - np.maximum(1.0, np.abs(hi[hi_only]))
    for i, _ in problem.log_terms:
        if x[i] <= 0:
            x[i] = max(margin, lo[i] + margin)
    for u, v, z in problem.cones:
        if x[u] <= 0:
            x[u] = max(margin, lo[u] + margin) if np.isfinite(lo[u]) else 1.0
        if x[v] <= 0:
            x[v] = max(margin, lo[v] + margin) if np.isfinite(lo[v]) else 1.0
        cap = (1.0 - margin) * math.sqrt(x[u] * x[v])
        x[z] = min(max(x[z], -cap), cap)
        if not np.isfinite(lo[z]) and not np.isfinite(hi[z]):
            x[z] = 0.0  # deepest interior point of the cone slice
    return x


# ----------------------------------------------------------------------------
# presolve


def _presolve(problem: ConicProblem, tol: float):
    """Handle pinned variables, drop redundant equality rows, scale rows.

    Returns (A, b, lower, upper, message) or raises SolverError("infeasible").
    """
    lo = problem.lower.copy()
    hi = problem.upper.copy()
    if np.any(lo > hi):
        raise SolverError("infeasible: crossed bounds")

    A, b = problem.A, problem.b
    pinned = np.isfinite(lo) & np.isfinite(hi) & (hi - lo <= 1e-14 * (1 + np.abs(lo)))
    if pinned.any():
        # represent x_i = lo_i as an equality row so barriers stay interior
        extra = np.zeros((int(pinned.sum()), problem.n))
        extra[np.arange(extra.shape[0]), np.flatnonzero(pinned)] = 1.0
        A = np.vstack([A, extra]) if A.size else extra
        b = np.concatenate([b, lo[pinned]])
        lo = lo.copy()
        hi = hi.copy()
        lo[pinned] = -np.inf
        hi[pinned] = np.inf

    m = A.shape[0]
    if m == 0:
        return A, b, lo, hi

    scale = np.maximum(np.max(np.abs(A), axis=1), 1e-300)
    zero_rows = np.max(np.abs(A), axis=1) == 0
    if zero_rows.any():
        if np.any(np.abs(b[zero_rows]) > tol):
            raise SolverError("infeasible: zero row with nonzero right-hand side")
        keep = ~zero_rows
        A, b, scale = A[keep], b[keep], scale[keep]
        m = A.shape[0]
        if m == 0:
            return A, b, lo, hi
    A = A / scale[:, None]
    b = b / scale

    # consistency: any x solving the least-squares system must fit b
    x_ls, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.max(np.abs(A @ x_ls - b)) > 1e-8 * (1.0 + np.max(np.abs(b))):
        raise SolverError("infeasible: inconsistent equality constraints")

    if m > 1:
        _, r, pivots = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        if diag.size:
            rank = int(np.sum(diag > max(A.shape) * np.finfo(float).eps * diag[0]))
        else:
            rank = 0
        if rank < m:
            keep = np.sort(pivots[:rank])
            A, b = A[keep], b[keep]
    return A, b, lo, hi


# ----------------------------------------------------------------------------
# barrier machinery


class _Stage:
    """Precomputed index structure and buffers for the Newton iterations."""

    def __init__(self, problem: ConicProblem, lo: np.ndarray, hi: np.ndarray):
        self.n = problem.n
        self.c = problem.c
        self.lo_idx = np.flatnonzero(np.isfinite(lo))
        self.hi_idx = np.flatnonzero(np.isfinite(hi))
        self.lo = lo[self.lo_idx]
        self.hi = hi[self.hi_idx]
        self.log_idx = np.array([i for i, _ in problem.log_terms], dtype=int)
        self.log_w = np.array([w for _, w in problem.log_terms], dtype=float)
        self.cones = np.array(problem.cones, dtype=int).reshape(-1, 3)
        self.m_eff = len(self.lo_idx) + len(self.hi_idx) + 2 * len(self.cones)
        self.cu = self.cones[:, 0]
        self.cv = self.cones[:, 1]
        self.cz = self.cones[:, 2]
        # flattened destination indices of the K 3x3 cone blocks in H
        if len(self.cones):
            rows = np.repeat(self.cones, 3, axis=1).reshape(-1, 3, 3)
            cols = np.tile(self.cones[:, None, :], (1, 3, 1))
            self._cone_flat = (rows * self.n + cols).reshape(-1)
        else:
            self._cone_flat = np.zeros(0, dtype=int)
        self._H = np.zeros((self.n, self.n))
        self._diag_idx = np.arange(self.n) * (self.n + 1)

    def interior(self, x: np.ndarray) -> bool:
        if self.lo_idx.size and (x[self.lo_idx] - self.lo).min() <= 0:
            return False
        if self.hi_idx.size and (self.hi - x[self.hi_idx]).min() <= 0:
            return False
        if self.log_idx.size and x[self.log_idx].min() <= 0:
            return False
        if len(self.cones):
            u, v, z = x[self.cu], x[self.cv], x[self.cz]
            if u.min() <= 0 or v.min() <= 0 or (u * v - z * z).min() <= 0:
                return False
        return True

    def barrier_value(self, x: np.ndarray, t: float) -> float:
        """t*(-objective) + Phi at strictly interior x (else +inf)."""
        value = -t * float(self.c @ x)
        if self.log_idx.size:
            xi = x[self.log_idx]
            if xi.min() <= 0:
                return math.inf
            value -= t * float(self.log_w @ np.log(xi))
        if self.lo_idx.size:
            s = x[self.lo_idx] - self.lo
            if s.min() <= 0:
                return math.inf
            value -= float(np.log(s).sum())
        if self.hi_idx.size:
            s = self.hi - x[self.hi_idx]
            if s.min() <= 0:
                return math.inf
            value -= float(np.log(s).sum())
        if len(self.cones):
            u, v, z = x[self.cu], x[self.cv], x[self.cz]
            if u.min() <= 0 or v.min() <= 0:
                return math.inf
            s = u * v - z * z
            if s.min() <= 0:
                return math.inf
            value -= float(np.log(s).sum())
        return value

    def grad_hess(self, x: np.ndarray, t: float):
        """Gradient and Hessian of t*(-obj) + Phi at strictly interior x.

        The returned Hessian aliases an internal buffer; it is consumed
        before the next call.
        """
        g = -t * self.c  # fresh array
        h_diag = np.zeros(self.n)
        if self.log_idx.size:
            xi = x[self.log_idx]
            tw = t * self.log_w
            g[self.log_idx] -= tw / xi
            h_diag[self.log_idx] += tw / xi**2
        if self.lo_idx.size:
            s = x[self.lo_idx] - self.lo
            g[self.lo_idx] -= 1.0 / s
            h_diag[self.lo_idx] += 1.0 / s**2
        if self.hi_idx.size:
            s = self.hi - x[self.hi_idx]
            g[self.hi_idx] += 1.0 / s
            h_diag[self.hi_idx] += 1.0 / s**2
        H = self._H
        H[:] = 0.0
        H.ravel()[self._diag_idx] = h_diag
        if len(self.cones):
            u, v, z = x[self.cu], x[self.cv], x[self.cz]
            s = u * v - z * z
            inv_s = 1.0 / s
            gu, gv, gz = v * inv_s, u * inv_s, -2.0 * z * inv_s
            np.subtract.at(g, self.cu, gu)
            np.subtract.at(g, self.cv, gv)
            np.subtract.at(g, self.cz, gz)
            # outer(gs, gs) + [[0,-1,0],[-1,0,0],[0,0,2]]/s per cone
            gs = np.empty((len(inv_s), 3))
            gs[:, 0] = gu
            gs[:, 1] = gv
            gs[:, 2] = gz
            blocks = gs[:, :, None] * gs[:, None, :]
            blocks[:, 0, 1] -= inv_s
            blocks[:, 1, 0] -= inv_s
            blocks[:, 2, 2] += 2.0 * inv_s
            np.add.at(H.ravel(), self._cone_flat, blocks.reshape(-1))
        return g, H

    def max_step(self, x: np.ndarray, dx: np.ndarray, frac: float = 0.995) -> float:
        """Largest step along dx keeping every barrier argument positive,
        shrunk by the fraction-to-boundary factor."""
        s = 1.0 / frac
        if self.lo_idx.size:
            slack = x[self.lo_idx] - self.lo
            d = dx[self.lo_idx]
            neg = d < 0
            if neg.any():
                s = min(s, float(np.min(slack[neg] / -d[neg])))
        if self.hi_idx.size:
            slack = self.hi - x[self.hi_idx]
            d = dx[self.hi_idx]
            pos = d > 0
            if pos.any():
                s = min(s, float(np.min(slack[pos] / d[pos])))
        if self.log_idx.size:
            xi = x[self.log_idx]
            d = dx[self.log_idx]
            neg = d < 0
            if neg.any():
                s = min(s, float(np.min(xi[neg] / -d[neg])))
        if len(self.cones):
            u, v, z = x[self.cu], x[self.cv], x[self.cz]
            du, dv, dz = dx[self.cu], dx[self.cv], dx[self.cz]
            for xi, di in ((u, du), (v, dv)):
                neg = di < 0
                if neg.any():
                    s = min(s, float(np.min(xi[neg] / -di[neg])))
            # slack(a) = s0 + p1*a + p2*a^2 must stay positive
            s0 = u * v - z * z
            p1 = du * v + u * dv - 2.0 * z * dz
            p2 = du * dv - dz * dz
            lin = np.abs(p2) < 1e-300
            if lin.any():
                hit = lin & (p1 < 0)
                if hit.any():
                    s = min(s, float(np.min(s0[hit] / -p1[hit])))
            quad = ~lin
            if quad.any():
                disc = p1[quad] ** 2 - 4.0 * p2[quad] * s0[quad]
                ok = disc >= 0
                if ok.any():
                    sq = np.sqrt(disc[ok])
                    p1q = p1[quad][ok]
                    p2q = p2[quad][ok]
                    for root in ((-p1q - sq) / (2 * p2q), (-p1q + sq) / (2 * p2q)):
                        pos = root > 0
                        if pos.any():
                            s = min(s, float(np.min(root[pos])))
        return frac * s


def _solve_kkt(H, A, r_dual, r_pri):
    n = H.shape[0]
    m = A.shape[0]
    if m == 0:
        try:
            step = np.linalg.solve(H, -r_dual)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Hessian: {exc}") from exc
        return step, np.zeros(0)
    M = np.zeros((n + m, n + m))
    M[:n, :n] = H
    M[:n, n:] = A.T
    M[n:, :n] = A
    rhs = np.empty(n + m)
    rhs[:n] = -r_dual
    rhs[n:] = -r_pri
    try:
        lu, piv = scipy.linalg.lu_factor(M, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"singular KKT system: {exc}") from exc
    sol = scipy.linalg.lu_solve((lu, piv), rhs, check_finite=False)
    if not np.all(np.isfinite(sol)):
        raise SolverError("singular KKT system: non-finite Newton step")
    # one pass of iterative refinement; cheap and stabilizes large-t stages
    resid = rhs - M @ sol
    sol = sol + scipy.linalg.lu_solve((lu, piv), resid, check_finite=False)
    return sol[:n], sol[n:]


def _project_onto_equalities(A: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Minimum-norm correction of x onto {A x = b}."""
    if not A.size:
        return x
    r = b - A @ x
    corr, *_ = np.linalg.lstsq(A, r, rcond=None)
    return x + corr


def _sanitize_start(x: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                    problem: ConicProblem, delta: float = 1e-4) -> np.ndarray:
    """Pull a caller-supplied start a minimum margin away from boundaries so
    the barrier is not astronomically steep on the first iterations."""
    x = x.copy()
    both = np.isfinite(lo) & np.isfinite(hi)
    if both.any():
        width = hi[both] - lo[both]
        x[both] = np.clip(x[both], lo[both] + delta * width, hi[both] - delta * width)
    lo_only = np.isfinite(lo) & ~np.isfinite(hi)
    x[lo_only] = np.maximum(x[lo_only], lo[lo_only] + delta * np.maximum(1.0, np.abs(lo[lo_only])))
    hi_only = ~np.isfinite(lo) & np.isfinite(hi)
    x[hi_only] = np.minimum(x[hi_only], hi[hi_only] - delta * np.maximum(1.0, np.abs(hi[hi_only])))
    for i, _ in problem.log_terms:
        x[i] = max(x[i], delta)
    for u, v, z in problem.cones:
        x[u] = max(x[u], delta)
        x[v] = max(x[v], delta)
        cap = (1.0 - delta) * math.sqrt(x[u] * x[v])
        x[z] = min(max(x[z], -cap), cap)
    return x


def _pick_t0(stage: _Stage, A: np.ndarray, x: np.ndarray) -> float:
    """Stage parameter whose central point is nearest to x, measured by the
    Newton decrement of the centering problem over a log grid of t."""
    best_t, best = 1.0, math.inf
    for expo in range(-3, 5):
        t = 10.0 ** expo
        g, H = stage.grad_hess(x, t)
        try:
            dx, _ = _solve_kkt(H, A, g, np.zeros(A.shape[0]))
        except SolverError:
            continue
        decrement = float(dx @ H @ dx)
        if decrement < best:
            best, best_t = decrement, t
    return best_t


def _center(stage, A, b, x, nu, t, budget, b_scale, eps_nt=1e-9):
    """Newton centering for t*(-obj) + Phi on {Ax=b}.

    While primally infeasible this runs infeasible-start Newton with a
    residual-norm search; once on the manifold it switches to classical
    damped Newton, whose step 1/(1+lambda) is interior by self-concordance
    and avoids crawling along constraint boundaries.  Returns
    (x, nu, iterations_used, failure_message_or_None).
    """
    if not stage.interior(x):
        return x, nu, 0, "centering started outside the barrier domain"
    used = 0
    best_decrement = math.inf
    stalled = 0
    f_curr = None
    while used < budget:
        g, H = stage.grad_hess(x, t)
        r_dual = g + (A.T @ nu if A.size else 0.0)
        r_pri = A @ x - b if A.size else np.zeros(0)
        pri_norm = float(np.max(np.abs(r_pri))) if r_pri.size else 0.0
        feasible = pri_norm <= 1e-10 * b_scale
        dx, dnu = _solve_kkt(H, A, r_dual, r_pri)
        decrement = float(dx @ H @ dx)
        if feasible and decrement / 2.0 <= eps_nt:
            # exact dual update at (numerically) fixed x
            return x, nu + dnu, used, None
        # numerical floor: the decrement stops shrinking once steps fall
        # below the float lattice; accept the center reached
        if decrement >= 0.9 * best_decrement:
            stalled += 1
            if feasible and stalled >= 5:
                return x, nu + dnu, used, None
            if stalled >= 12:
                return x, nu, used, "no progress in centering"
        else:
            stalled = 0
            best_decrement = decrement
        used += 1
        if feasible:
            lam = math.sqrt(max(decrement, 0.0))
            s = 1.0 if lam <= 0.25 else 1.0 / (1.0 + lam)
            if f_curr is None:
                f_curr = stage.barrier_value(x, t)
            slope = float(r_dual @ dx)
            accepted = False
            while s > 1e-13:
                xn = x + s * dx
                fn = stage.barrier_value(xn, t)  # +inf outside the domain
                if fn <= f_curr + 0.1 * s * slope:
                    accepted = True
                    break
                s *= 0.5
            if not accepted:
                if decrement / 2.0 <= 1e-6:
                    return x, nu, used, None
                return x, nu, used, "line search stalled"
            if np.array_equal(xn, x):
                # below the float lattice; centered as far as representable
                return x, nu + s * dnu, used, None
            x = xn
            f_curr = fn
            nu = nu + s * dnu
        else:
            f_curr = None
            s = min(1.0, stage.max_step(x, dx))
            norm0 = math.hypot(np.linalg.norm(r_dual), np.linalg.norm(r_pri))
            accepted = False
            while s > 1e-13:
                xn = x + s * dx
                nun = nu + s * dnu
                if stage.interior(xn):
                    gn, _ = stage.grad_hess(xn, t)
                    rn = math.hypot(
                        np.linalg.norm(gn + (A.T @ nun if A.size else 0.0)),
                        np.linalg.norm(A @ xn - b if A.size else np.zeros(0)),
                    )
                    if rn <= (1 - 0.01 * s) * norm0:
                        accepted = True
                        break
                s *= 0.5
            if not accepted:
                return x, nu, used, "infeasible-start line search stalled"
            x = x + s * dx
            nu = nu + s * dnu
    return x, nu, used, "iteration limit reached"


def _dual_certificate(stage: _Stage, A: np.ndarray, x: np.ndarray, nu: np.ndarray, t: float) -> float:
    """Scaled stationarity residual of the true KKT system at x.

    Multipliers are recovered from the barrier gradients (the central-path
    estimates) and then improved by an unconstrained least-squares fit, which
    sidesteps the float-lattice floor of re-deriving multipliers from slacks
    near active constraints.  Returns ||grad f0 + J'lam + A'y||_inf scaled by
    the magnitudes involved.
    """
    n = stage.n
    grad_f0 = -stage.c.copy()
    if stage.log_idx.size:
        grad_f0[stage.log_idx] -= stage.log_w / x[stage.log_idx]

    cols: list = []
    lam0: list = []
    for i, lo in zip(stage.lo_idx, stage.lo):
        col = np.zeros(n)
        col[i] = -1.0
        cols.append(col)
        lam0.append(1.0 / (t * (x[i] - lo)))
    for i, hi in zip(stage.hi_idx, stage.hi):
        col = np.zeros(n)
        col[i] = 1.0
        cols.append(col)
        lam0.append(1.0 / (t * (hi - x[i])))
    for u, v, z in stage.cones:
        col = np.zeros(n)
        col[u] = -x[v]
        col[v] = -x[u]
        col[z] = 2.0 * x[z]
        cols.append(col)
        lam0.append(1.0 / (t * (x[u] * x[v] - x[z] ** 2)))
    n_ineq = len(cols)
    if A.size:
        for r in A:
            cols.append(r.copy())
    y0 = nu / t if A.size else np.zeros(0)
    mults0 = np.concatenate([np.asarray(lam0), y0]) if cols else np.zeros(0)

    if not cols:
        residual = grad_f0
        denom = 1.0 + float(np.max(np.abs(grad_f0)))
        return float(np.linalg.norm(residual, np.inf)) / denom

    G = np.column_stack(cols)
    # nonnegative LS for the inequality multipliers (free equality duals are
    # split into +/- parts) gives a genuine KKT certificate at x
    if A.size:
        M = np.column_stack([G[:, :n_ineq], G[:, n_ineq:], -G[:, n_ineq:]])
    else:
        M = G
    try:
        fitted, _ = scipy.optimize.nnls(M, -grad_f0)
        mults = fitted[:n_ineq]
        y = fitted[n_ineq:n_ineq + A.shape[0]] - fitted[n_ineq + A.shape[0]:] if A.size else np.zeros(0)
        full = np.concatenate([mults, y])
    except Exception:
        full = mults0
    residual = grad_f0 + G @ full
    # fall back to the central-path multipliers if the fit is worse
    resid0 = grad_f0 + G @ mults0
    if np.linalg.norm(resid0, np.inf) < np.linalg.norm(residual, np.inf):
        residual, full = resid0, mults0
    denom = 1.0 + float(np.max(np.abs(grad_f0))) + float(np.max(np.abs(full), initial=0.0))
    return float(np.linalg.norm(residual, np.inf)) / denom


def _solve_ipm(problem: ConicProblem, config: SolverConfig, x0) -> Solution:
    def _bad(status, msg):
        return Solution(
            status=status,
            x=np.full(problem.n, np.nan),
            objective=np.nan,
            primal_residual=np.inf,
            dual_residual=np.inf,
            complementarity=np.inf,
            iterations=0,
            message=msg,
        )

    try:
        if config.presolve:
            A, b, lo, hi = _presolve(problem, config.tolerance)
        else:
            A, b, lo, hi = problem.A, problem.b, problem.lower, problem.upper
    except SolverError as exc:
        if "infeasible" in str(exc):
            return _bad("infeasible", str(exc))
        raise

    stage = _Stage(problem, lo, hi)
    if x0 is not None:
        x = np.asarray(x0, dtype=float).copy()
        if x.shape != (problem.n,):
            raise ValueError(f"x0 must have length {problem.n}")
        x = _sanitize_start(x, lo, hi, problem)
        if not stage.interior(x):
            x = default_start(problem)
    else:
        x = default_start(problem)
    if not stage.interior(x):
        return _bad("numerical-failure", "no strictly interior starting point found")

    # prefer starting on the equality manifold so centering can use pure
    # function-decrease steps; fall back to the infeasible-start phase if the
    # projection leaves the domain
    if A.size:
        projected = _project_onto_equalities(A, b, x)
        if stage.interior(projected):
            x = projected
    nu = np.zeros(A.shape[0])

    b_scale = 1.0 + (float(np.max(np.abs(b))) if b.size else 0.0)
    mu = 1.0 / config.barrier_reduction
    iterations = 0
    failure = None

    # phase 0: approach the analytic center under the pure barrier whenever
    # the iterate is off the equality manifold; there is no objective pull
    # toward a constraint boundary here, so the infeasible-start steps are
    # well behaved
    if A.size and float(np.max(np.abs(A @ x - b))) > 1e-10 * b_scale:
        x, nu, used, failure = _center(
            stage, A, b, x, nu, 0.0, config.max_iterations, b_scale, eps_nt=1e-4
        )
        iterations += used
        if failure is None and float(np.max(np.abs(A @ x - b))) > 1e-9 * b_scale:
            failure = "could not reach the equality manifold"

    if failure is None:
        t = _pick_t0(stage, A, x)
        for _ in range(80):
            # center loosely along the path, tightly at the last stage
            x, nu, used, failure = _center(
                stage, A, b, x, nu, t, config.max_iterations - iterations, b_scale,
                eps_nt=1e-5,
            )
            iterations += used
            if failure:
                break
            scale = max(1.0, abs(problem.objective(x)))
            if stage.m_eff / t <= config.tolerance * scale:
                x, nu, used, failure = _center(
                    stage, A, b, x, nu, t,
                    config.max_iterations - iterations, b_scale, eps_nt=1e-9,
                )
                iterations += used
                break
            # predictor: move along the central-path tangent toward the next
            # stage; dx/dt solves H dx = -grad f0 on the manifold
            grad_f0 = -stage.c.copy()
            if stage.log_idx.size:
                grad_f0[stage.log_idx] -= stage.log_w / x[stage.log_idx]
            try:
                g, H = stage.grad_hess(x, t)
                dxdt, dnudt = _solve_kkt(H, A, grad_f0, np.zeros(A.shape[0]))
                dt_jump = (mu - 1.0) * t
                s = min(1.0, 0.99 * stage.max_step(x, dt_jump * dxdt))
                x = x + s * dt_jump * dxdt
                nu = nu + s * dt_jump * dnudt
                iterations += 1
            except SolverError:
                pass
            t *= mu
        else:
            failure = "stage limit reached"
    else:
        t = 1.0

    r_dual = _dual_certificate(stage, A, x, nu, t) if failure is None else np.inf
    if failure is None and r_dual > config.tolerance:
        # re-center hard at the final stage; the quadratic tail is cheap
        x, nu, _, _ = _center(stage, A, b, x, nu, t, 8, b_scale, eps_nt=1e-12)
        r_dual = _dual_certificate(stage, A, x, nu, t)

    obj = problem.objective(x) if stage.interior(x) else np.nan
    scale = max(1.0, abs(obj) if math.isfinite(obj) else 1.0)
    r_pri = float(np.max(np.abs(A @ x - b))) / b_scale if A.size else 0.0
    gap = stage.m_eff / t / scale

    status = "optimal"
    message = ""
    if failure is not None:
        status = "numerical-failure"
        message = failure
    elif r_pri > config.tolerance or gap > config.tolerance * 1.0001 or r_dual > config.tolerance:
        status = "numerical-failure"
        message = (
            f"residuals above tolerance (pri={r_pri:.2e}, dual={r_dual:.2e}, gap={gap:.2e})"
        )
    return Solution(
        status=status,
        x=x,
        objective=obj,
        primal_residual=r_pri,
        dual_residual=r_dual,
        complementarity=gap,
        iterations=iterations,
        message=message,
    )


# ----------------------------------------------------------------------------
# optional cross-checking backend


def _solve_cvxpy(problem: ConicProblem, config: SolverConfig) -> Solution:
    import cvxpy as cp

    x = cp.Variable(problem.n)
    obj = problem.c @ x
    for i, w in problem.log_terms:
        obj = obj + w * cp.log(x[i])
    constraints = []
    if problem.A.shape[0]:
        constraints.append(problem.A @ x == problem.b)
    finite_lo = np.isfinite(problem.lower)
    finite_hi = np.isfinite(problem.upper)
    if finite_lo.any():
        constraints.append(x[finite_lo] >= problem.lower[finite_lo])
    if finite_hi.any():
        constraints.append(x[finite_hi] <= problem.upper[finite_hi])
    for u, v, z in problem.cones:
        constraints.append(x[u] >= 0)
        constraints.append(x[v] >= 0)
        constraints.append(
            cp.SOC(x[u] + x[v], cp.hstack([2 * x[z], x[u] - x[v]]))
        )
    prob = cp.Problem(cp.Maximize(obj), constraints)
    prob.solve()
    if prob.status not in ("optimal", "optimal_inaccurate"):
        status = "infeasible" if "infeasible" in prob.status else "numerical-failure"
        return Solution(
            status=status,
            x=np.full(problem.n, np.nan),
            objective=np.nan,
            primal_residual=np.inf,
            dual_residual=np.inf,
            complementarity=np.inf,
            iterations=0,
            message=f"cvxpy status {prob.status}",
        )
    xv = np.asarray(x.value, dtype=float)
    report = check_feasible(problem, xv, config.tolerance * 100)
    return Solution(
        status="optimal",
        x=xv,
        objective=float(prob.value),
        primal_residual=report.worst,
        dual_residual=np.nan,
        complementarity=np.nan,
        iterations=0,
        message="cvxpy backend",
    )


def solve(
    problem: ConicProblem,
    config: SolverConfig | None = None,
    x0=None,
    backend: str = "interior-point",
) -> Solution:
    """Solve the maximize instance; see module docstring.

    The default backend is the in-repo interior-point method.  `backend=
    "cvxpy"` delegates to an external conic solver for cross-validation
    (requires the `crosscheck` extra).
    """
    if config is None:
        config = SolverConfig()
    env_tol = os.environ.get("GRIDCHARGE_SOLVER_TOL")
    if env_tol:
        config = SolverConfig(
            tolerance=float(env_tol),
            max_iterations=config.max_iterations,
            barrier_reduction=config.barrier_reduction,
            presolve=config.presolve,
        )
    if backend == "interior-point":
        return _solve_ipm(problem, config, x0)
    if backend == "cvxpy":
        return _solve_cvxpy(problem, config)
    raise ValueError(f"unknown backend {backend!r}")


# ----------------------------------------------------------------------------
# plain-text dumps for external cross-checking


def dump_problem(problem: ConicProblem, path) -> None:
    """Write a problem in the documented plain-text format.

    Sections, one per line item:
        n <count>
        c <index> <value>                 (nonzeros only)
        log <index> <weight>
        row <row> <index> <value>         (A nonzeros)
        rhs <row> <value>
        bound <index> <lower> <upper>     (inf/-inf spelled out)
        cone <u> <v> <z>
        name <index> <text>
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"n {problem.n}\n")
        for i in np.flatnonzero(problem.c):
            fh.write(f"c {i} {float(problem.c[i])!r}\n")
        for i, w in problem.log_terms:
            fh.write(f"log {i} {float(w)!r}\n")
        for r in range(problem.A.shape[0]):
            for i in np.flatnonzero(problem.A[r]):
                fh.write(f"row {r} {i} {float(problem.A[r, i])!r}\n")
            fh.write(f"rhs {r} {float(problem.b[r])!r}\n")
        for i in range(problem.n):
            if np.isfinite(problem.lower[i]) or np.isfinite(problem.upper[i]):
                fh.write(f"bound {i} {float(problem.lower[i])!r} {float(problem.upper[i])!r}\n")
        for u, v, z in problem.cones:
            fh.write(f"cone {u} {v} {z}\n")
        for i, name in enumerate(problem.names):
            fh.write(f"name {i} {name}\n")


def load_problem(path) -> ConicProblem:
    """Read back a dump written by `dump_problem`."""
    n = None
    c = None
    rows: dict = {}
    rhs: dict = {}
    bounds: dict = {}
    logs: list = []
    cones: list = []
    names: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "n":
                n = int(parts[1])
                c = np.zeros(n)
            elif tag == "c":
                c[int(parts[1])] = float(parts[2])
            elif tag == "log":
                logs.append((int(parts[1]), float(parts[2])))
            elif tag == "row":
                rows.setdefault(int(parts[1]), []).append((int(parts[2]), float(parts[3])))
            elif tag == "rhs":
                rhs[int(parts[1])] = float(parts[2])
            elif tag == "bound":
                bounds[int(parts[1])] = (float(parts[2]), float(parts[3]))
            elif tag == "cone":
                cones.append((int(parts[1]), int(parts[2]), int(parts[3])))
            elif tag == "name":
                names[int(parts[1])] = parts[2]
    if n is None:
        raise ValueError("dump missing 'n' record")
    m = (max(rhs) + 1) if rhs else 0
    A = np.zeros((m, n))
    b = np.zeros(m)
    for r, entries in rows.items():
        for i, val in entries:
            A[r, i] = val
    for r, val in rhs.items():
        b[r] = val
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    for i, (lo, hi) in bounds.items():
        lower[i], upper[i] = lo, hi
    name_tuple = tuple(names.get(i, f"x{i}") for i in range(n)) if names else ()
    return ConicProblem(
        c=c, A=A, b=b, lower=lower, upper=upper,
        log_terms=tuple(logs), cones=tuple(cones), names=name_tuple,
    )
