"""Small dense quadratic programs for the barrier/Lyapunov safety filter.

The per-step program minimizes (1/2) u^T H u + lam * eps^2 over the control u
and the Lyapunov slack eps, subject to one relaxed Lyapunov decrease row, one
barrier row per observed obstacle, and the input polytope A u <= b. Problems
are tiny (three variables for a planar vehicle), so they are solved exactly
with a primal active-set iteration; a finite active-set enumeration resolves
the rare degenerate cases and certifies infeasibility.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRow

SOLVED = "solved"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration_limit"

_FEAS_TOL = 1e-9
_MULT_TOL = 1e-10
_KKT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class QPProblem:
    """min (1/2) x^T hessian x + linear^T x  subject to  rows @ x <= bounds."""

    hessian: np.ndarray
    linear: np.ndarray
    rows: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        k = len(self.linear)
        if self.hessian.shape != (k, k):
            raise ValueError("hessian shape inconsistent with linear term")
        if self.rows.ndim != 2 or self.rows.shape[1] != k or len(self.rows) != len(self.bounds):
            raise ValueError("constraint shapes inconsistent")

    @property
    def n_vars(self) -> int:
        return len(self.linear)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.hessian @ x + self.linear @ x)

    def to_text(self) -> str:
        """Plain-text dump, one matrix per line, for external oracle harnesses."""
        parts = [
            " ".join(repr(float(v)) for v in self.hessian.ravel()),
            " ".join(repr(float(v)) for v in self.linear),
            " ".join(repr(float(v)) for v in self.rows.ravel()),
            " ".join(repr(float(v)) for v in self.bounds),
            f"{self.n_vars} {self.n_rows}",
        ]
        return "\n".join(parts) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "QPProblem":
        lines = [ln for ln in text.strip().splitlines()]
        n_vars, n_rows = (int(t) for t in lines[4].split())
        hessian = np.array([float(t) for t in lines[0].split()]).reshape(n_vars, n_vars)
        linear = np.array([float(t) for t in lines[1].split()])
        rows = (
            np.array([float(t) for t in lines[2].split()]).reshape(n_rows, n_vars)
            if n_rows
            else np.empty((0, n_vars))
        )
        bounds = np.array([float(t) for t in lines[3].split()])
        return cls(hessian, linear, rows, bounds)


@dataclass(frozen=True, eq=False)
class QPSolution:
    x: np.ndarray
    status: str
    active_set: tuple[int, ...] = ()
    multipliers: np.ndarray = field(default_factory=lambda: np.empty(0))
    stationarity_residual: float = math.inf
    feasibility_residual: float = math.inf
    complementarity_residual: float = math.inf


def _kkt_residuals(p: QPProblem, x: np.ndarray, active: tuple[int, ...], mult: np.ndarray):
    grad = p.hessian @ x + p.linear
    if len(active):
        grad = grad + p.rows[list(active)].T @ mult
    stationarity = float(np.linalg.norm(grad, ord=np.inf))
    slack = p.rows @ x - p.bounds if p.n_rows else np.zeros(0)
    feasibility = float(max(0.0, slack.max())) if p.n_rows else 0.0
    comp = 0.0
    for idx, mu in zip(active, mult):
        comp = max(comp, abs(mu * slack[idx]))
    return stationarity, feasibility, comp


def _solve_working_set(p: QPProblem, working: list[int]):
    """Equality-constrained subproblem; None when the system is inconsistent."""
    k = p.n_vars
    m = len(working)
    if m == 0:
        return np.linalg.solve(p.hessian, -p.linear), np.empty(0)
    g = p.rows[working]
    kkt = np.block([[p.hessian, g.T], [g, np.zeros((m, m))]])
    rhs = np.concatenate([-p.linear, p.bounds[working]])
    sol, residual, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    if np.linalg.norm(kkt @ sol - rhs, ord=np.inf) > 1e-7 * max(1.0, np.abs(rhs).max()):
        return None
    return sol[:k], sol[k:]


def _enumerate_solve(p: QPProblem) -> QPSolution:
    """Exact fallback: try every active subset up to n_vars rows.

    For a strictly convex program the optimum, if one exists, satisfies the
    stationarity condition with at most n_vars linearly independent active
    rows and nonnegative multipliers, so this search is exhaustive.
    """
    best = None
    indices = range(p.n_rows)
    for size in range(0, p.n_vars + 1):
        for subset in itertools.combinations(indices, size):
            res = _solve_working_set(p, list(subset))
            if res is None:
                continue
            x, mult = res
            if len(mult) and mult.min() < -_MULT_TOL:
                continue
            if p.n_rows and (p.rows @ x - p.bounds).max() > _FEAS_TOL:
                continue
            obj = p.objective(x)
            if best is None or obj < best[0] - 1e-12:
                best = (obj, x, subset, np.maximum(mult, 0.0))
    if best is None:
        return QPSolution(np.full(p.n_vars, np.nan), INFEASIBLE)
    _, x, subset, mult = best
    st, fe, co = _kkt_residuals(p, x, subset, mult)
    return QPSolution(x, SOLVED, subset, mult, st, fe, co)


def solve_qp(p: QPProblem, max_iterations: int | None = None) -> QPSolution:
    """Primal active-set solve of a strictly convex inequality QP.

    Starts from the unconstrained minimizer, alternately dropping rows whose
    multiplier has the wrong sign and adding the most violated row. Cycling
    or an inconsistent working set falls through to exact enumeration, which
    also certifies infeasibility. A solved status implies KKT residuals at or
    below 1e-8.
    """
    if max_iterations is None:
        max_iterations = 100 * max(p.n_rows, 1)
    working: list[int] = []
    seen: set[tuple[int, ...]] = set()
    for _ in range(max_iterations):
        key = tuple(sorted(working))
        if key in seen:
            return _enumerate_solve(p)
        seen.add(key)
        res = _solve_working_set(p, working)
        if res is None:
            return _enumerate_solve(p)
        x, mult = res
        if len(mult) and mult.min() < -_MULT_TOL:
            working.pop(int(np.argmin(mult)))
            continue
        if p.n_rows:
            slack = p.rows @ x - p.bounds
            worst = int(np.argmax(slack))
            if slack[worst] > _FEAS_TOL:
                if len(working) >= p.n_vars:
                    return _enumerate_solve(p)
                working.append(worst)
                continue
        st, fe, co = _kkt_residuals(p, x, tuple(working), mult)
        if max(st, fe, co) > _KKT_TOL:
            return _enumerate_solve(p)
        return QPSolution(x, SOLVED, tuple(working), mult, st, fe, co)
    return QPSolution(np.full(p.n_vars, np.nan), ITERATION_LIMIT)


def assemble_cbf_clf_qp(
    state,
    clf,
    barriers,
    dynamics,
    *,
    gamma_c: float,
    gamma_v: float,
    control_penalty: np.ndarray,
    slack_penalty: float,
    input_rows: np.ndarray,
    input_bounds: np.ndarray,
) -> QPProblem:
    """Stack the per-step program over (u, eps) at the current state.

    Lyapunov row:  LfV + LgV u - eps <= -gamma_v * V
    Barrier rows:  -Lf h - Lg h u    <=  gamma_c * h      (one per barrier)
    Input rows:    A u <= b
    with linear class-K terms gamma_c * h and gamma_v * V. ``barriers`` holds
    (h value, spatial gradient, point-map Jacobian or None) triples; a None
    Jacobian means the query point is the first two state components.

    Raises DegenerateRow when a barrier row has zero control sensitivity yet
    its constant side is violated (the program would be silently infeasible).
    """
    state = np.asarray(state, dtype=float)
    f_vec = dynamics.f(state)
    g_mat = dynamics.g(state)
    m = g_mat.shape[1]
    k = m + 1

    hessian = np.zeros((k, k))
    hessian[:m, :m] = control_penalty
    hessian[m, m] = 2.0 * slack_penalty
    linear = np.zeros(k)

    rows, bounds = [], []
    v_val = clf.value(state)
    v_grad = clf.gradient(state)
    lf_v = float(v_grad @ f_vec)
    lg_v = v_grad @ g_mat
    clf_row = np.concatenate([lg_v, [-1.0]])
    rows.append(clf_row)
    bounds.append(-lf_v - gamma_v * v_val)

    default_vjac = np.zeros((2, len(state)))
    default_vjac[0, 0] = 1.0
    default_vjac[1, 1] = 1.0
    for i, (h_val, h_grad, v_jac) in enumerate(barriers):
        jac = default_vjac if v_jac is None else np.asarray(v_jac, dtype=float)
        lf_h = float(h_grad @ (jac @ f_vec))
        lg_h = h_grad @ (jac @ g_mat)
        rhs = float(lf_h + gamma_c * h_val)
        if np.linalg.norm(lg_h) == 0.0:
            if rhs < 0.0:
                raise DegenerateRow(
                    f"barrier {i} has zero control sensitivity and is violated (rhs {rhs:.3g})"
                )
            continue
        rows.append(np.concatenate([-lg_h, [0.0]]))
        bounds.append(rhs)

    for a_row, b_val in zip(np.atleast_2d(input_rows), np.atleast_1d(input_bounds)):
        rows.append(np.concatenate([a_row, [0.0]]))
        bounds.append(float(b_val))

    return QPProblem(hessian, linear, np.array(rows), np.array(bounds))


def box_input_polytope(v_max: float, omega_max: float) -> tuple[np.ndarray, np.ndarray]:
    """|v| <= v_max, |omega| <= omega_max encoded as four rows."""
    rows = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    bounds = np.array([v_max, v_max, omega_max, omega_max])
    return rows, bounds
