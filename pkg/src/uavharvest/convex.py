"""Self-contained solvers for the planner's two subproblem classes.

- solve_lp: linear programs (scheduling). Backed by scipy's HiGHS; the
  test suite keeps an independent brute-force vertex oracle against it.
- solve_smooth: smooth concave maximization over smooth convex
  inequality constraints, via a log-barrier interior-point method with
  L-BFGS inner iterations and analytic first derivatives throughout.

Constraints are supplied either as plain callables g(x) -> (value, grad)
or as vectorized blocks that evaluate whole constraint families at once;
the planner uses blocks, small problems use callables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


class LPInfeasibleError(Exception):
    """The linear program admits no feasible point."""


class LPUnboundedError(Exception):
    """The linear program's objective is unbounded above."""


class SmoothSolveError(Exception):
    """The barrier solver could not be started or made progress."""


@dataclass
class LPProblem:
    """maximize c @ x  s.t.  a_ub @ x <= b_ub,  lower <= x <= upper."""

    c: np.ndarray
    a_ub: np.ndarray
    b_ub: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.a_ub = np.atleast_2d(np.asarray(self.a_ub, dtype=float))
        self.b_ub = np.asarray(self.b_ub, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n = self.c.size
        if self.a_ub.size and self.a_ub.shape[1] != n:
            raise ValueError("constraint matrix width does not match objective size")
        if self.a_ub.shape[0] != self.b_ub.size:
            raise ValueError("constraint rows and bounds disagree")
        if self.lower.size != n or self.upper.size != n:
            raise ValueError("variable bounds must match objective size")
        for arr in (self.c, self.a_ub, self.b_ub):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP coefficients must be finite")


@dataclass
class SolverConfig:
    """Barrier schedule and tolerances for solve_smooth (solve_lp ignores
    everything except tol_feas)."""

    t0: float = 10.0
    growth: float = 10.0
    tol_grad: float = 1e-8
    gap_tol: float = 2e-5
    max_outer: int = 16
    max_inner: int = 400
    tol_feas: float = 1e-6

    def __post_init__(self):
        if not self.growth > 1.0:
            raise ValueError("barrier growth factor must exceed 1")
        if min(self.t0, self.tol_grad, self.gap_tol, self.tol_feas) <= 0:
            raise ValueError("tolerances and t0 must be positive")


def solve_lp(p: LPProblem, cfg: SolverConfig | None = None) -> tuple[np.ndarray, float]:
    """Solve the LP to optimality; raises on infeasible/unbounded models."""
    bounds = list(zip(np.where(np.isfinite(p.lower), p.lower, -np.inf),
                      np.where(np.isfinite(p.upper), p.upper, np.inf)))
    res = linprog(
        -p.c,
        A_ub=p.a_ub if p.a_ub.size else None,
        b_ub=p.b_ub if p.b_ub.size else None,
        bounds=bounds,
        method="highs",
    )
    if res.status == 2:
        raise LPInfeasibleError(res.message)
    if res.status == 3:
        raise LPUnboundedError(res.message)
    if not res.success:
        raise SmoothSolveError(f"LP solver failure: {res.message}")
    x = np.asarray(res.x, dtype=float)
    return x, float(p.c @ x)


class FunctionRows:
    """Adapter turning per-row callables g(x) -> (value, grad) into a block."""

    def __init__(self, rows):
        self.rows = list(rows)

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    def value(self, x: np.ndarray) -> np.ndarray:
        return np.array([r(x)[0] for r in self.rows], dtype=float)

    def grad_weighted(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        for wi, r in zip(w, self.rows):
            if wi != 0.0:
                out += wi * r(x)[1]
        return out


@dataclass
class SmoothProblem:
    """Concave maximization over a strictly feasible convex region.

    objective(x) -> (value, gradient) must be concave; each block's rows
    g_i(x) <= 0 must be convex and continuously differentiable on the
    feasible interior. x0 must satisfy every row strictly.
    """

    n_vars: int
    objective: object
    blocks: list
    x0: np.ndarray

    @classmethod
    def from_functions(cls, objective, constraints, x0) -> "SmoothProblem":
        x0 = np.asarray(x0, dtype=float)
        return cls(x0.size, objective, [FunctionRows(constraints)], x0)

    def constraint_values(self, x: np.ndarray) -> np.ndarray:
        parts = [np.atleast_1d(b.value(x)) for b in self.blocks]
        return np.concatenate(parts) if parts else np.zeros(0)

    def num_rows(self) -> int:
        return int(sum(b.num_rows for b in self.blocks))


@dataclass
class SmoothResult:
    x: np.ndarray
    value: float
    stage_values: list[float] = field(default_factory=list)
    n_stages: int = 0
    n_evals: int = 0
    converged: bool = True
    warning: str | None = None
    kkt_residual: float = np.inf
    max_violation: float = -np.inf


def _barrier_eval(problem: SmoothProblem, t: float, x: np.ndarray, need_grad: bool):
    """phi(x) = -t f(x) - sum log(-g(x)); +inf outside the domain."""
    values = []
    for b in problem.blocks:
        g = np.atleast_1d(b.value(x))
        if not np.all(np.isfinite(g)) or np.any(g >= 0.0):
            return np.inf, None
        values.append(g)
    f_val, f_grad = problem.objective(x)
    if not np.isfinite(f_val):
        return np.inf, None
    phi = -t * f_val
    for g in values:
        phi -= np.log(-g).sum()
    if not need_grad:
        return phi, None
    grad = -t * np.asarray(f_grad, dtype=float)
    for b, g in zip(problem.blocks, values):
        grad += b.grad_weighted(x, 1.0 / (-g))
    return phi, grad


def _center(problem: SmoothProblem, t: float, x: np.ndarray, cfg: SolverConfig):
    """Approximately minimize the barrier objective with L-BFGS."""
    n_evals = 0
    phi, grad = _barrier_eval(problem, t, x, need_grad=True)
    n_evals += 1
    if not np.isfinite(phi):
        raise SmoothSolveError("barrier stage started outside the feasible interior")

    mem_s: list[np.ndarray] = []
    mem_y: list[np.ndarray] = []
    mem_rho: list[float] = []
    memory = 10
    tol = cfg.tol_grad * max(1.0, t)
    hit_cap = False

    for it in range(cfg.max_inner):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            break

        # Two-loop recursion for the L-BFGS direction.
        d = -grad.copy()
        alphas = []
        for s, y, rho in zip(reversed(mem_s), reversed(mem_y), reversed(mem_rho)):
            a = rho * (s @ d)
            alphas.append(a)
            d -= a * y
        if mem_s:
            y_last, s_last = mem_y[-1], mem_s[-1]
            d *= (s_last @ y_last) / (y_last @ y_last)
        else:
            d /= max(1.0, gnorm)
        for (s, y, rho), a in zip(zip(mem_s, mem_y, mem_rho), reversed(alphas)):
            b = rho * (y @ d)
            d += (a - b) * s

        slope = float(grad @ d)
        if slope >= 0.0:  # fall back to steepest descent on a bad direction
            d = -grad / max(1.0, gnorm)
            slope = float(grad @ d)
            mem_s.clear(), mem_y.clear(), mem_rho.clear()

        # Backtracking Armijo line search; out-of-domain steps just shrink.
        step = 1.0
        accepted = False
        for _ in range(60):
            x_new = x + step * d
            phi_new, _ = _barrier_eval(problem, t, x_new, need_grad=False)
            n_evals += 1
            if np.isfinite(phi_new) and phi_new <= phi + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break

        phi_new, grad_new = _barrier_eval(problem, t, x_new, need_grad=True)
        n_evals += 1
        s_vec = x_new - x
        y_vec = grad_new - grad
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            mem_s.append(s_vec)
            mem_y.append(y_vec)
            mem_rho.append(1.0 / sy)
            if len(mem_s) > memory:
                mem_s.pop(0), mem_y.pop(0), mem_rho.pop(0)
        x, phi, grad = x_new, phi_new, grad_new
    else:
        hit_cap = True

    return x, float(np.linalg.norm(grad)), n_evals, hit_cap


def solve_smooth(problem: SmoothProblem, cfg: SolverConfig | None = None) -> SmoothResult:
    """Log-barrier interior-point maximization from a strictly feasible start.

    Returns a feasible point whose objective never falls below the
    starting objective; final duality gap is bounded by
    num_rows / t_final <= gap_tol (up to centering error).
    """
    cfg = cfg or SolverConfig()
    x = np.asarray(problem.x0, dtype=float).copy()
    g0 = problem.constraint_values(x)
    if g0.size and (not np.all(np.isfinite(g0)) or g0.max() >= 0.0):
        raise SmoothSolveError(
            f"initial point is not strictly feasible (max constraint {g0.max():.3e})"
        )

    f0, _ = problem.objective(x)
    m = max(1, problem.num_rows())
    t = cfg.t0
    stage_values: list[float] = []
    total_evals = 0
    warning = None
    kkt = np.inf

    for stage in range(cfg.max_outer):
        x, gnorm, evals, hit_cap = _center(problem, t, x, cfg)
        total_evals += evals
        kkt = gnorm / t
        f_val, _ = problem.objective(x)
        stage_values.append(float(f_val))
        if m / t <= cfg.gap_tol:
            break
        t *= cfg.growth
    else:
        warning = "barrier stage budget exhausted before reaching the target gap"
    if hit_cap:
        warning = "inner iteration budget exhausted in the final stage"

    f_final, _ = problem.objective(x)
    if f_final < f0:
        # Ascent guarantee: never return a point worse than the start.
        x = np.asarray(problem.x0, dtype=float).copy()
        f_final = f0
        warning = warning or "no improvement over the starting point"

    g = problem.constraint_values(x)
    return SmoothResult(
        x=x,
        value=float(f_final),
        stage_values=stage_values,
        n_stages=len(stage_values),
        n_evals=total_evals,
        converged=warning is None,
        warning=warning,
        kkt_residual=float(kkt),
        max_violation=float(g.max()) if g.size else -np.inf,
    )


def check_gradient(f, x: np.ndarray, step: float = 1e-6) -> float:
    """Max relative mismatch between analytic and central-difference gradients.

    f(x) -> (value, gradient). Per-coordinate relative error uses
    max(1, |analytic|, |numeric|) as the denominator.
    """
    x = np.asarray(x, dtype=float)
    _, grad = f(x)
    grad = np.asarray(grad, dtype=float)
    worst = 0.0
    for i in range(x.size):
        h = step * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp, _ = f(xp)
        fm, _ = f(xm)
        num = (fp - fm) / (2.0 * h)
        err = abs(num - grad[i]) / max(1.0, abs(num), abs(grad[i]))
        worst = max(worst, err)
    return worst
