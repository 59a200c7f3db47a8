import itertools

import numpy as np
import pytest

from edgeprice.follower import (FollowerError, LeaderDecision, ModelVariant,
                                cost_breakdown, enumerate_placements, follower_cost,
                                solve_fixed_t_lp, solve_kkt_follower, solve_sp1)
from edgeprice.instance import GenConfig, generate
from conftest import make_manual_instance, rel_close


def mid_leader(inst, z=None):
    z = z if z is not None else [1] * inst.J
    return LeaderDecision.from_prices(
        inst,
        p=[inst.p_grid[j][len(inst.p_grid[j]) // 2] for j in range(inst.J)],
        ps=[inst.ps_grid[j][0] for j in range(inst.J)],
        z=z)


def random_leader(inst, rng):
    z = [int(v) for v in rng.integers(0, 2, inst.J)]
    if sum(z) == 0:
        z[int(rng.integers(0, inst.J))] = 1
    return LeaderDecision.from_prices(
        inst,
        p=[inst.p_grid[j][int(rng.integers(0, inst.V))] for j in range(inst.J)],
        ps=[inst.ps_grid[j][int(rng.integers(0, inst.H))] for j in range(inst.J)],
        z=z)


class TestLeaderDecision:
    def test_from_prices_builds_selectors(self, small_instance):
        ld = mid_leader(small_instance)
        ld.validate(small_instance)
        assert all(sum(row) == 1 for row in ld.r)
        assert all(sum(row) == 1 for row in ld.rs)

    def test_off_grid_price_rejected(self, small_instance):
        with pytest.raises(FollowerError, match="not a member"):
            LeaderDecision.from_prices(small_instance,
                                       p=[0.123] * small_instance.J,
                                       ps=[0.005] * small_instance.J,
                                       z=[1] * small_instance.J)

    def test_inconsistent_selector_rejected(self, small_instance):
        ld = mid_leader(small_instance)
        ld.p[0] = small_instance.p_grid[0][0] if ld.p[0] != small_instance.p_grid[0][0] \
            else small_instance.p_grid[0][1]
        with pytest.raises(FollowerError, match="inconsistent"):
            ld.validate(small_instance)


class TestAllDrop:
    def test_inactive_network_with_costly_cloud(self):
        # psi below the cloud serving cost p0 + w*d0 = 0.02 + 1e-3*60 = 0.08,
        # so with every node off the service prefers dropping to the cloud
        inst = make_manual_instance(w=[1e-3], psi=[[0.05], [0.05]])
        leader = mid_leader(inst, z=[0, 0])
        sol, phi = solve_sp1(inst, 0, leader)
        assert rel_close(phi, inst.all_drop_cost(0))
        assert sol.t == [0, 0] and sol.y0 == pytest.approx(0.0, abs=1e-9)
        assert sum(sol.q) == pytest.approx(sum(r[0] for r in inst.R), abs=1e-7)

    def test_zero_budget_forces_drop(self):
        inst = make_manual_instance(B=[0.0])
        leader = mid_leader(inst)
        sol, phi = solve_sp1(inst, 0, leader)
        assert rel_close(phi, inst.all_drop_cost(0))
        assert sol.y0 == pytest.approx(0.0, abs=1e-9)
        assert sol.t == [0, 0]

    def test_phi_never_exceeds_all_drop(self, small_instance):
        rng = np.random.default_rng(2)
        for _ in range(4):
            leader = random_leader(small_instance, rng)
            for k in range(small_instance.K):
                _, phi = solve_sp1(small_instance, k, leader)
                assert phi <= small_instance.all_drop_cost(k) + 1e-9


class TestEnumerationOracle:
    def test_milp_equals_placement_enumeration(self):
        inst = generate(GenConfig(I=3, J=2, K=2, graph_size=25, seed=21))
        rng = np.random.default_rng(4)
        for trial in range(3):
            leader = random_leader(inst, rng)
            for k in range(inst.K):
                _, phi = solve_sp1(inst, k, leader)
                best = enumerate_placements(inst, k, leader)
                assert rel_close(phi, best.objective)

    def test_solution_invariants(self, small_instance):
        leader = mid_leader(small_instance)
        sol, phi = solve_sp1(small_instance, 0, leader)
        assert sol.max_violation(small_instance, 0, leader) <= 1e-6
        assert rel_close(sol.costs.total, phi)


class TestFixedPlacementLp:
    def test_strong_duality(self, small_instance):
        leader = mid_leader(small_instance)
        for t in itertools.product((0, 1), repeat=small_instance.J):
            res = solve_fixed_t_lp(small_instance, 0, leader, list(t))
            assert res.status == "optimal"
            dual_obj = res.dual.objective(small_instance, 0, leader, list(t))
            assert abs(dual_obj - res.lp_value) <= 1e-7 * (1 + abs(res.lp_value))
            assert res.dual.max_infeasibility(small_instance, 0, leader) <= 1e-7

    def test_all_drop_duals_respect_eta_cap(self):
        inst = make_manual_instance(w=[1e-3], psi=[[0.05], [0.05]])
        leader = mid_leader(inst, z=[0, 0])
        res = solve_fixed_t_lp(inst, 0, leader, [0, 0])
        assert res.status == "optimal"
        assert rel_close(res.objective, inst.all_drop_cost(0))
        for i in range(inst.I):
            assert res.dual.eta[i] <= inst.psi[i][0] + 1e-9

    def test_t_exceeding_z_is_infeasible(self, small_instance):
        leader = mid_leader(small_instance, z=[0] * small_instance.J)
        res = solve_fixed_t_lp(small_instance, 0, leader, [1, 0])
        assert res.status == "infeasible"
        assert res.dual_ray

    def test_placement_cost_over_budget_infeasible(self):
        inst = make_manual_instance(B=[0.1])
        leader = mid_leader(inst)
        res = solve_fixed_t_lp(inst, 0, leader, [1, 1])
        assert res.status == "infeasible"
        assert res.dual_ray
        assert "budget" in res.reason


class TestKktOracle:
    def test_three_way_agreement(self):
        rng = np.random.default_rng(6)
        for trial in range(4):
            inst = generate(GenConfig(I=int(rng.integers(2, 4)), J=int(rng.integers(2, 4)),
                                      K=1, graph_size=25, seed=300 + trial))
            leader = random_leader(inst, rng)
            _, phi = solve_sp1(inst, 0, leader)
            enum = enumerate_placements(inst, 0, leader)
            kkt_obj, residuals, _ = solve_kkt_follower(inst, 0, leader, backend="highs")
            assert rel_close(phi, enum.objective)
            assert rel_close(phi, kkt_obj)
            assert max(residuals.values()) <= 1e-6

    def test_reference_backend_small(self):
        inst = generate(GenConfig(I=2, J=2, K=1, graph_size=20, seed=5))
        leader = mid_leader(inst)
        _, phi = solve_sp1(inst, 0, leader)
        kkt_obj, residuals, _ = solve_kkt_follower(inst, 0, leader, backend="reference")
        assert rel_close(phi, kkt_obj)
        assert max(residuals.values()) <= 1e-6

    def test_zero_demand_gives_zero(self):
        inst = make_manual_instance(R=[[0.0], [0.0]])
        leader = mid_leader(inst)
        kkt_obj, residuals, _ = solve_kkt_follower(inst, 0, leader, backend="highs")
        assert abs(kkt_obj) <= 1e-9
        assert max(residuals.values()) <= 1e-6


class TestCostBreakdown:
    def test_all_drop_components(self):
        inst = make_manual_instance(w=[1e-3], psi=[[0.05], [0.05]])
        leader = mid_leader(inst, z=[0, 0])
        sol, _ = solve_sp1(inst, 0, leader)
        cb = cost_breakdown(inst, 0, leader, sol)
        assert cb.cloud == pytest.approx(0.0, abs=1e-9)
        assert cb.edge == pytest.approx(0.0, abs=1e-9)
        assert cb.placement == pytest.approx(0.0, abs=1e-9)
        assert cb.delay == pytest.approx(0.0, abs=1e-9)
        assert cb.unmet == pytest.approx(inst.all_drop_cost(0), rel=1e-9)

    def test_cloud_component_rate(self, small_instance):
        leader = mid_leader(small_instance)
        sol, _ = solve_sp1(small_instance, 0, leader)
        sol.y0 = 10.0
        sol.x0 = [min(10.0, small_instance.R[i][0]) for i in range(small_instance.I)]
        # direct recomputation of the cloud charge at p0 = 0.02
        from edgeprice.follower import assemble_solution
        fresh = assemble_solution(small_instance, 0, leader, sol.x, sol.x0, sol.q,
                                  sol.y, sol.y0, sol.t)
        assert fresh.costs.cloud == pytest.approx(0.02 * 10.0)

    def test_total_matches_term_by_term(self, small_instance):
        rng = np.random.default_rng(8)
        leader = random_leader(small_instance, rng)
        sol, phi = solve_sp1(small_instance, 0, leader)
        cb = cost_breakdown(small_instance, 0, leader, sol)
        inst = small_instance
        w = inst.w[0]
        manual = (inst.p0 * sol.y0
                  + sum(leader.p[j] * sol.y[j] for j in range(inst.J))
                  + sum(leader.placement_price(inst, 0, j) * sol.t[j] for j in range(inst.J))
                  + w * (sum(sol.x0[i] * inst.d0[i] for i in range(inst.I))
                         + sum(sol.x[i][j] * inst.d[i][j]
                               for i in range(inst.I) for j in range(inst.J)))
                  + sum(inst.psi[i][0] * sol.q[i] for i in range(inst.I)))
        assert cb.total == pytest.approx(manual, rel=1e-12)
        assert rel_close(cb.total, phi)

    def test_invalid_solution_rejected(self, small_instance):
        leader = mid_leader(small_instance)
        sol, _ = solve_sp1(small_instance, 0, leader)
        sol.q[0] = -5.0
        with pytest.raises(FollowerError):
            cost_breakdown(small_instance, 0, leader, sol)


class TestMonotonicity:
    def test_raising_one_price_never_helps(self):
        inst = generate(GenConfig(I=3, J=3, K=1, graph_size=25, seed=31))
        base = LeaderDecision.from_prices(
            inst, p=[inst.p_grid[j][0] for j in range(inst.J)],
            ps=[inst.ps_grid[j][0] for j in range(inst.J)], z=[1] * inst.J)
        _, phi0 = solve_sp1(inst, 0, base)
        for j in range(inst.J):
            for v in range(1, inst.V):
                p = list(base.p)
                p[j] = inst.p_grid[j][v]
                bumped = LeaderDecision.from_prices(inst, p, base.ps, base.z)
                _, phi = solve_sp1(inst, 0, bumped)
                assert phi >= phi0 - 1e-9


class TestZeroPriceDegeneracy:
    def test_matches_unbudgeted_penalty_lp(self):
        # all prices zero: optimal cost is pure penalty minimization; the
        # oracle drops the budget row entirely (it cannot bind at zero prices)
        inst = make_manual_instance(
            p_grid=[[0.0, 0.01] for _ in range(2)],
            ps_grid=[[0.0, 0.01] for _ in range(2)],
            p0=0.0)
        leader = LeaderDecision.from_prices(inst, [0.0, 0.0], [0.0, 0.0], [1, 1])
        # placement still costs phi, so give the follower free installs too
        inst2 = inst.copy()
        inst2.phi = [[0.0], [0.0]]
        inst2.validate()
        _, phi = solve_sp1(inst2, 0, leader)

        from edgeprice.model import Expr, MilpModel
        from edgeprice.solve import solve_lp
        I, J = inst2.I, inst2.J
        m = MilpModel("transport", "min")
        x = [[m.add_var(f"x[{i},{j}]") for j in range(J)] for i in range(I)]
        x0 = [m.add_var(f"x0[{i}]") for i in range(I)]
        q = [m.add_var(f"q[{i}]") for i in range(I)]
        w = inst2.w[0]
        obj = Expr()
        for i in range(I):
            obj.add(q[i], inst2.psi[i][0])
            obj.add(x0[i], w * inst2.d0[i])
            for j in range(J):
                obj.add(x[i][j], w * inst2.d[i][j])
        m.set_objective(obj)
        for i in range(I):
            flow = Expr({x0[i]: 1.0, q[i]: 1.0})
            for j in range(J):
                flow.add(x[i][j], 1.0)
            m.add_constraint(flow, "==", inst2.R[i][0])
            delay = Expr({x0[i]: inst2.d0[i]})
            for j in range(J):
                delay.add(x[i][j], inst2.d[i][j])
            m.add_constraint(delay, "<=", inst2.Dmax[0] * inst2.R[i][0])
        for j in range(J):
            cap = Expr({x[i][j]: 1.0 for i in range(I)})
            m.add_constraint(cap, "<=", inst2.C[j])
        oracle = solve_lp(m.finalize())
        assert rel_close(phi, oracle.objective)


class TestNoPlacementVariant:
    def test_budget_excludes_placement(self):
        inst = make_manual_instance(B=[0.1])  # cannot afford any placement fee
        leader = mid_leader(inst)
        variant = ModelVariant(placement_in_follower=False)
        sol, phi = solve_sp1(inst, 0, leader, variant=variant)
        # with placement free the service can still install and serve a bit
        base_sol, base_phi = solve_sp1(inst, 0, leader)
        assert phi <= base_phi + 1e-9
        assert follower_cost(inst, 0, leader, sol, variant) == pytest.approx(phi, rel=1e-9)
