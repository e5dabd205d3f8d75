import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbfmeta.control import QuadraticGoalClf, UnicycleDynamics
from cbfmeta.errors import DegenerateRow
from cbfmeta.qp import (
    INFEASIBLE,
    SOLVED,
    QPProblem,
    QPSolution,
    assemble_cbf_clf_qp,
    box_input_polytope,
    solve_qp,
)


def kkt_enumeration_oracle(p: QPProblem):
    """Reference solver: brute-force enumeration of candidate active sets,
    written independently from the library's fallback (explicit inverses,
    objective-minimum selection over all feasible KKT candidates)."""
    best = None
    for size in range(p.n_vars + 1):
        for subset in itertools.combinations(range(p.n_rows), size):
            G = p.rows[list(subset)]
            top = np.hstack([p.hessian, G.T]) if size else p.hessian
            if size:
                bottom = np.hstack([G, np.zeros((size, size))])
                kkt = np.vstack([top, bottom])
                rhs = np.concatenate([-p.linear, p.bounds[list(subset)]])
            else:
                kkt = p.hessian
                rhs = -p.linear
            try:
                sol = np.linalg.inv(kkt) @ rhs
            except np.linalg.LinAlgError:
                continue
            x, mult = sol[: p.n_vars], sol[p.n_vars :]
            if len(mult) and mult.min() < -1e-9:
                continue
            if p.n_rows and (p.rows @ x - p.bounds).max() > 1e-9:
                continue
            obj = p.objective(x)
            if best is None or obj < best[0]:
                best = (obj, x)
    return best


def random_feasible_qp(rng, n_rows):
    A = rng.normal(size=(3, 3))
    hessian = A @ A.T + np.eye(3)
    linear = rng.normal(size=3)
    rows = rng.normal(size=(n_rows, 3))
    x_feasible = rng.normal(size=3)
    bounds = rows @ x_feasible + rng.uniform(0.1, 1.0, size=n_rows)
    return QPProblem(hessian, linear, rows, bounds)


class TestSolveQP:
    def test_unconstrained_minimum(self):
        hessian = np.diag([1.0, 1.0, 20.0])
        p = QPProblem(hessian, np.zeros(3), np.empty((0, 3)), np.empty(0))
        s = solve_qp(p)
        assert s.status == SOLVED
        assert s.x == pytest.approx(np.zeros(3))

    def test_single_active_constraint(self):
        p = QPProblem(np.eye(1), np.zeros(1), np.array([[-1.0]]), np.array([-1.0]))
        s = solve_qp(p)
        assert s.status == SOLVED
        assert s.x == pytest.approx([1.0])
        assert s.multipliers == pytest.approx([1.0])

    def test_matches_enumeration_oracle(self, rng):
        for _ in range(300):
            p = random_feasible_qp(rng, int(rng.integers(1, 7)))
            s = solve_qp(p)
            oracle = kkt_enumeration_oracle(p)
            assert s.status == SOLVED
            assert oracle is not None
            assert abs(p.objective(s.x) - oracle[0]) < 1e-6

    def test_kkt_residuals_small(self, rng):
        for _ in range(100):
            p = random_feasible_qp(rng, 5)
            s = solve_qp(p)
            assert s.status == SOLVED
            assert s.stationarity_residual <= 1e-8
            assert s.feasibility_residual <= 1e-8
            assert s.complementarity_residual <= 1e-8

    @given(seed=st.integers(0, 10_000), perm_seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_row_permutation_invariance(self, seed, perm_seed):
        rng = np.random.default_rng(seed)
        p = random_feasible_qp(rng, 6)
        order = np.random.default_rng(perm_seed).permutation(6)
        shuffled = QPProblem(p.hessian, p.linear, p.rows[order], p.bounds[order])
        a, b = solve_qp(p), solve_qp(shuffled)
        assert a.status == SOLVED and b.status == SOLVED
        assert np.abs(a.x - b.x).max() < 1e-8

    def test_infeasible_detected(self):
        # x >= 1 and x <= -1 simultaneously.
        p = QPProblem(
            np.eye(1), np.zeros(1), np.array([[-1.0], [1.0]]), np.array([-1.0, -1.0])
        )
        assert solve_qp(p).status == INFEASIBLE

    def test_text_round_trip(self, rng):
        p = random_feasible_qp(rng, 4)
        again = QPProblem.from_text(p.to_text())
        assert np.array_equal(again.hessian, p.hessian)
        assert np.array_equal(again.rows, p.rows)


class TestAssemble:
    def setup_method(self):
        self.dynamics = UnicycleDynamics(0.1)
        self.clf = QuadraticGoalClf((2.5, 0.0))
        self.rows, self.bounds = box_input_polytope(1.0, 2.0)

    def assemble(self, state, barriers):
        return assemble_cbf_clf_qp(
            state,
            self.clf,
            barriers,
            self.dynamics,
            gamma_c=1.0,
            gamma_v=1.0,
            control_penalty=np.eye(2),
            slack_penalty=10.0,
            input_rows=self.rows,
            input_bounds=self.bounds,
        )

    def test_clf_row_at_goal(self):
        p = self.assemble(np.array([2.5, 0.0, 0.3]), [])
        assert p.rows[0] == pytest.approx([0.0, 0.0, -1.0])
        assert p.bounds[0] == pytest.approx(0.0)

    def test_unicycle_lie_derivative_hand_expansion(self):
        # At heading zero with ell = 0.1 the input matrix top block is
        # [[1, 0], [0, 0.1]], so LgV = [2*dx, 0.2*dy].
        state = np.array([1.0, 0.5, 0.0])
        p = self.assemble(state, [])
        dx, dy = 1.0 - 2.5, 0.5 - 0.0
        assert p.rows[0][:2] == pytest.approx([2.0 * dx, 0.2 * dy])
        v = (1.0 - 2.5) ** 2 + 0.5**2
        assert p.bounds[0] == pytest.approx(-v)

    def test_row_counts_with_barriers(self):
        barriers = [
            (0.5, np.array([1.0, 0.0]), None),
            (0.2, np.array([0.0, 1.0]), None),
        ]
        p = self.assemble(np.array([0.0, 0.0, 0.0]), barriers)
        assert p.n_rows == 1 + 2 + 4

    def test_hessian_block_structure(self):
        p = self.assemble(np.array([0.0, 0.0, 0.0]), [])
        assert p.hessian == pytest.approx(np.diag([1.0, 1.0, 20.0]))

    def test_degenerate_violated_row_raises(self):
        barriers = [(-0.5, np.zeros(2), None)]
        with pytest.raises(DegenerateRow):
            self.assemble(np.array([0.0, 0.0, 0.0]), barriers)

    def test_degenerate_satisfied_row_dropped(self):
        barriers = [(0.5, np.zeros(2), None)]
        p = self.assemble(np.array([0.0, 0.0, 0.0]), barriers)
        assert p.n_rows == 1 + 4

    def test_relaxed_clf_always_feasible_without_barriers(self, rng):
        for _ in range(50):
            state = rng.normal(size=3)
            p = self.assemble(state, [])
            assert solve_qp(p).status == SOLVED
