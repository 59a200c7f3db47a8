import itertools

import numpy as np
import pytest

from edgeprice.model import MilpModel, ModelError
from edgeprice.solve import (STATUS_GAP_LIMIT, STATUS_INFEASIBLE, STATUS_OPTIMAL,
                             STATUS_TIME_LIMIT, STATUS_UNBOUNDED, SolverConfig,
                             backend_names, backend_register, backend_solve,
                             backend_solve_polished, get_backend, solve_lp,
                             solve_milp)


def random_lp(rng, n=None, m=None):
    n = n or int(rng.integers(2, 8))
    m = m or int(rng.integers(1, 7))
    mdl = MilpModel("rand", "min")
    for i in range(n):
        mdl.add_var(f"x{i}")
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m) + 2.0
    senses = rng.choice(["<=", ">=", "=="], size=m, p=[0.6, 0.3, 0.1])
    for r in range(m):
        mdl.add_constraint({i: A[r, i] for i in range(n)}, str(senses[r]), b[r])
    c = rng.normal(size=n)
    mdl.set_objective({i: c[i] for i in range(n)})
    return mdl.finalize(), A, b, list(senses), c


def explicit_dual(A, b, senses, c):
    """The classical dual of min c'x, Ax {<=,>=,==} b, x >= 0, built fresh."""
    m, n = A.shape
    dual = MilpModel("dual", "max")
    ys = []
    for r in range(m):
        if senses[r] == "<=":
            ys.append(dual.add_var(f"y{r}", lb=-np.inf, ub=0.0))
        elif senses[r] == ">=":
            ys.append(dual.add_var(f"y{r}", lb=0.0))
        else:
            ys.append(dual.add_var(f"y{r}", lb=-np.inf))
    for j in range(n):
        dual.add_constraint({ys[r]: A[r, j] for r in range(m)}, "<=", c[j])
    dual.set_objective({ys[r]: b[r] for r in range(m)})
    return dual.finalize()


class TestSolveLp:
    def test_cap_dual(self):
        m = MilpModel("t", "max")
        x = m.add_var("x")
        m.add_constraint({x: 1.0}, "<=", 3.0)
        m.set_objective({x: 1.0})
        res = solve_lp(m.finalize())
        assert res.status == STATUS_OPTIMAL
        assert res.objective == pytest.approx(3.0, abs=1e-9)
        assert res.duals[0] == pytest.approx(1.0, abs=1e-9)

    def test_infeasible_pair(self):
        m = MilpModel("t", "max")
        x = m.add_var("x")
        m.add_constraint({x: 1.0}, "<=", -1.0)
        m.set_objective({x: 1.0})
        assert solve_lp(m.finalize()).status == STATUS_INFEASIBLE

    def test_unbounded(self):
        m = MilpModel("t", "max")
        x = m.add_var("x")
        m.add_constraint({x: 1.0}, ">=", 1.0)
        m.set_objective({x: 1.0})
        assert solve_lp(m.finalize()).status == STATUS_UNBOUNDED

    def test_strong_duality_against_explicit_dual(self):
        rng = np.random.default_rng(17)
        solved = 0
        for _ in range(40):
            primal, A, b, senses, c = random_lp(rng)
            p = solve_lp(primal)
            d = solve_lp(explicit_dual(A, b, senses, c))
            if p.status == STATUS_OPTIMAL:
                assert d.status == STATUS_OPTIMAL
                assert abs(p.objective - d.objective) <= 1e-7 * (1 + abs(p.objective))
                solved += 1
            elif p.status == STATUS_INFEASIBLE:
                assert d.status in (STATUS_UNBOUNDED, STATUS_INFEASIBLE)
            elif p.status == STATUS_UNBOUNDED:
                assert d.status == STATUS_INFEASIBLE
        assert solved >= 10  # the sampler must exercise the optimal path

    def test_duals_match_highs(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            mdl, *_ = random_lp(rng)
            ref = solve_lp(mdl)
            hig = get_backend("highs").solve_lp(mdl)
            assert ref.status == hig.status
            if ref.status == STATUS_OPTIMAL:
                assert np.allclose(ref.duals, hig.duals, atol=1e-6)


class TestSolveMilp:
    def test_knapsack(self):
        m = MilpModel("k", "max")
        a = m.add_var("a", "binary")
        b = m.add_var("b", "binary")
        m.add_constraint({a: 1.0, b: 1.0}, "<=", 1.0)
        m.set_objective({a: 3.0, b: 2.0})
        res = solve_milp(m.finalize())
        assert res.status == STATUS_OPTIMAL
        assert res.objective == pytest.approx(3.0)
        assert res.values[0] == pytest.approx(1.0)

    def test_pure_lp_identical(self):
        m = MilpModel("l", "min")
        x = m.add_var("x", lb=1.0, ub=5.0)
        m.set_objective({x: 2.0})
        m.finalize()
        assert solve_milp(m).objective == pytest.approx(solve_lp(m).objective)

    def test_against_binary_enumeration(self):
        rng = np.random.default_rng(23)
        for trial in range(12):
            n_cont, n_bin, m_rows = 3, int(rng.integers(2, 6)), 4
            mdl = MilpModel(f"e{trial}", "max")
            xs = [mdl.add_var(f"x{i}", ub=4.0) for i in range(n_cont)]
            bs = [mdl.add_var(f"b{i}", "binary") for i in range(n_bin)]
            A = rng.normal(size=(m_rows, n_cont + n_bin))
            rhs = rng.normal(size=m_rows) * 2 + 3
            for r in range(m_rows):
                mdl.add_constraint({i: A[r, i] for i in range(n_cont + n_bin)}, "<=", rhs[r])
            c = rng.normal(size=n_cont + n_bin)
            mdl.set_objective({i: c[i] for i in range(n_cont + n_bin)})
            mdl.finalize()
            res = solve_milp(mdl)

            # oracle: enumerate every binary assignment, LP for each
            best = None
            for bits in itertools.product((0, 1), repeat=n_bin):
                fixed = mdl.clone()
                for b, val in zip(bs, bits):
                    fixed.variables[b].lb = fixed.variables[b].ub = float(val)
                sub = solve_lp(fixed.finalize())
                if sub.status == STATUS_OPTIMAL and (best is None or sub.objective > best):
                    best = sub.objective
            if best is None:
                assert res.status == STATUS_INFEASIBLE
            else:
                assert res.status == STATUS_OPTIMAL
                assert abs(res.objective - best) <= 1e-7 * (1 + abs(best))

    def test_determinism(self):
        rng = np.random.default_rng(9)
        mdl, *_ = random_lp(rng, n=5, m=4)
        work = mdl.clone()
        b1 = work.add_var("b1", "binary")
        b2 = work.add_var("b2", "binary")
        work.add_constraint({0: 1.0, b1: 3.0, b2: -2.0}, "<=", 2.5)
        work.set_objective({0: 1.0, b1: 1.0, b2: 1.0}, "max")
        work.finalize()
        r1 = solve_milp(work)
        r2 = solve_milp(work)
        assert r1.status == r2.status
        assert r1.objective == r2.objective
        assert np.array_equal(r1.values, r2.values)

    def test_node_limit_reports_gap_limit(self):
        rng = np.random.default_rng(31)
        mdl = MilpModel("lim", "max")
        bs = [mdl.add_var(f"b{i}", "binary") for i in range(12)]
        wts = rng.uniform(1, 5, 12)
        vals = rng.uniform(1, 5, 12)
        mdl.add_constraint({b: wts[i] for i, b in enumerate(bs)}, "<=", wts.sum() / 3)
        mdl.set_objective({b: vals[i] for i, b in enumerate(bs)})
        mdl.finalize()
        res = solve_milp(mdl, SolverConfig(node_limit=3))
        assert res.status in (STATUS_GAP_LIMIT, STATUS_OPTIMAL)
        full = solve_milp(mdl)
        assert full.status == STATUS_OPTIMAL
        if res.status == STATUS_GAP_LIMIT and res.objective is not None:
            assert res.objective <= full.objective + 1e-9


class TestBackends:
    def test_reference_identity(self):
        m = MilpModel("t", "max")
        a = m.add_var("a", "binary")
        m.add_constraint({a: 1.0}, "<=", 1.0)
        m.set_objective({a: 2.0})
        m.finalize()
        assert backend_solve("reference", m).objective == solve_milp(m).objective

    def test_cross_backend_agreement(self):
        rng = np.random.default_rng(77)
        for _ in range(10):
            mdl, *_ = random_lp(rng, n=5, m=4)
            work = mdl.clone()
            b = work.add_var("bb", "binary")
            work.add_constraint({0: 1.0, b: 1.0}, "<=", 2.0)
            work.set_objective(dict(work.objective), "min")
            work.finalize()
            ref = backend_solve("reference", work)
            hig = backend_solve("highs", work)
            assert ref.status == hig.status
            if ref.status == STATUS_OPTIMAL:
                assert abs(ref.objective - hig.objective) <= 1e-6 * (1 + abs(hig.objective))

    def test_unknown_backend(self):
        m = MilpModel("t").finalize()
        with pytest.raises(ModelError, match="unknown backend"):
            backend_solve("no-such-engine", m)

    def test_register_contract(self):
        class Bogus:
            pass

        with pytest.raises(ModelError):
            backend_register("bogus", Bogus())

        class Custom:
            def solve_lp(self, model, config=None):
                return solve_lp(model, config)

            def solve_milp(self, model, config=None):
                return solve_milp(model, config)

        backend_register("custom", Custom())
        assert "custom" in backend_names()
        m = MilpModel("t", "max")
        x = m.add_var("x", ub=1.0)
        m.set_objective({x: 1.0})
        assert backend_solve("custom", m.finalize()).objective == pytest.approx(1.0)

    def test_polished_solutions_are_exactly_integral(self):
        m = MilpModel("p", "max")
        bs = [m.add_var(f"b{i}", "binary") for i in range(4)]
        u = m.add_var("u", ub=100.0)
        m.add_constraint({u: 1.0, bs[0]: -100.0}, "<=", 0.0)
        m.add_constraint({b: 1.0 for b in bs}, "<=", 2.0)
        m.set_objective({u: 1.0, bs[1]: 0.5})
        m.finalize()
        for name in ("reference", "highs"):
            res = backend_solve_polished(name, m)
            assert res.status == STATUS_OPTIMAL
            for b in bs:
                assert float(res.values[b]) in (0.0, 1.0)
            assert res.objective == pytest.approx(100.5)


class TestTimeLimit:
    def test_time_limit_status(self):
        rng = np.random.default_rng(13)
        mdl = MilpModel("big", "max")
        bs = [mdl.add_var(f"b{i}", "binary") for i in range(26)]
        w1 = rng.uniform(1, 9, 26)
        w2 = rng.uniform(1, 9, 26)
        v = w1 + w2 + rng.uniform(0, 0.01, 26)  # correlated: hard for B&B
        mdl.add_constraint({b: w1[i] for i, b in enumerate(bs)}, "<=", w1.sum() / 2)
        mdl.add_constraint({b: w2[i] for i, b in enumerate(bs)}, "<=", w2.sum() / 2)
        mdl.set_objective({b: v[i] for i, b in enumerate(bs)})
        mdl.finalize()
        res = solve_milp(mdl, SolverConfig(time_limit=0.05))
        assert res.status in (STATUS_TIME_LIMIT, STATUS_OPTIMAL)


class TestConfigValidation:
    def test_bad_tolerances(self):
        with pytest.raises(ModelError):
            SolverConfig(feas_tol=0.0).validate()
        with pytest.raises(ModelError):
            SolverConfig(node_limit=-1).validate()
