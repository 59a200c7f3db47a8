"""Per-service lower-level machinery.

Given the platform's decision (prices and activation), each service
solves a small MILP: place the service on a subset of active edge
nodes, buy compute at the nodes and the cloud, route demand, and drop
the rest, minimizing procurement + placement cost + delay and
unmet-demand penalties under a budget.

Three interchangeable routes to the same optimum live here:

* ``solve_sp1``           -- the follower MILP solved directly;
* ``solve_fixed_t_lp``    -- the LP left after fixing the placement
                             vector, together with its exact dual
                             (strong duality is verified internally);
* ``build_kkt_follower``  -- a single-level MILP encoding the KKT
                             system of the fixed-placement LP with
                             complementarity removed via the standard
                             big-M binary-switch reformulation.

The enumeration over placements (``enumerate_placements``) provides the
independent oracle used by the tests.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, asdict

from .model import BINARY, BigMRegistry, Expr, MilpModel, default_dual_bound
from .solve import (STATUS_INFEASIBLE, STATUS_OPTIMAL, SolveError, SolveResult,
                    SolverConfig, backend_solve, backend_solve_polished,
                    get_backend, polish_binaries, solve_lp)

INF = math.inf


class FollowerError(RuntimeError):
    pass


@dataclass
class ModelVariant:
    """Model toggles for the comparison schemes.

    ``placement_in_follower=False`` reproduces the older provisioning
    model in which services pay nothing for installation or storage:
    the placement term leaves the follower objective and budget (the
    platform side is untouched).
    """
    placement_in_follower: bool = True


DEFAULT_VARIANT = ModelVariant()


@dataclass
class LeaderDecision:
    p: list            # [j] compute price
    ps: list           # [j] storage price
    z: list            # [j] activation in {0,1}
    r: list            # [j][v] compute price selectors
    rs: list           # [j][h] storage price selectors

    @classmethod
    def from_prices(cls, instance, p, ps, z):
        r = [_one_hot(instance.p_grid[j], p[j], f"p[{j}]") for j in range(instance.J)]
        rs = [_one_hot(instance.ps_grid[j], ps[j], f"ps[{j}]") for j in range(instance.J)]
        return cls(p=[float(v) for v in p], ps=[float(v) for v in ps],
                   z=[int(v) for v in z], r=r, rs=rs)

    @classmethod
    def from_selectors(cls, instance, r, rs, z):
        p = [sum(instance.p_grid[j][v] * r[j][v] for v in range(instance.V))
             for j in range(instance.J)]
        ps = [sum(instance.ps_grid[j][h] * rs[j][h] for h in range(instance.H))
              for j in range(instance.J)]
        return cls(p=p, ps=ps, z=[int(v) for v in z],
                   r=[[int(v) for v in row] for row in r],
                   rs=[[int(v) for v in row] for row in rs])

    def validate(self, instance, tol=1e-9):
        J = instance.J
        for j in range(J):
            if self.z[j] not in (0, 1):
                raise FollowerError(f"z[{j}] must be 0/1")
            for sel, grid, price, label in ((self.r[j], instance.p_grid[j], self.p[j], "p"),
                                            (self.rs[j], instance.ps_grid[j], self.ps[j], "ps")):
                if abs(sum(sel) - 1.0) > tol or any(v not in (0, 1) for v in sel):
                    raise FollowerError(f"{label}-selector row {j} is not one-hot")
                implied = sum(g * s for g, s in zip(grid, sel))
                if abs(implied - price) > tol:
                    raise FollowerError(
                        f"{label}[{j}]={price} inconsistent with its selector (grid value {implied})")
        return self

    def placement_price(self, instance, k, j):
        """Cost the service pays to sit at EN j: install fee + storage rent."""
        return instance.phi[j][k] + instance.s_tb(k) * self.ps[j]


def _one_hot(grid, price, label):
    for v, g in enumerate(grid):
        if abs(g - price) <= 1e-9 * max(1.0, abs(g)):
            return [1 if u == v else 0 for u in range(len(grid))]
    raise FollowerError(f"{label}={price} is not a member of the grid {grid}")


@dataclass
class CostBreakdown:
    cloud: float
    edge: float
    placement: float
    delay: float
    unmet: float

    @property
    def total(self):
        return self.cloud + self.edge + self.placement + self.delay + self.unmet

    def as_dict(self):
        d = asdict(self)
        d["total"] = self.total
        return d


@dataclass
class FollowerSolution:
    x: list            # [i][j] workload to ENs
    x0: list           # [i] workload to cloud
    q: list            # [i] unmet demand
    y: list            # [j] procurement at ENs
    y0: float          # procurement at cloud
    t: list            # [j] placement in {0,1}
    costs: CostBreakdown
    avg_delay: list    # [i] average delay per area

    def to_json_dict(self):
        d = asdict(self)
        d["costs"] = self.costs.as_dict()
        return d

    def max_violation(self, instance, k, leader, variant=DEFAULT_VARIANT):
        """Largest residual over the follower feasibility system."""
        I, J = instance.I, instance.J
        worst = 0.0
        for i in range(I):
            worst = max(worst, abs(self.x0[i] + sum(self.x[i][j] for j in range(J))
                                   + self.q[i] - instance.R[i][k]))
            worst = max(worst, -self.x0[i], -self.q[i])
            lhs = self.x0[i] * instance.d0[i] + sum(self.x[i][j] * instance.d[i][j]
                                                    for j in range(J))
            worst = max(worst, lhs - instance.Dmax[k] * instance.R[i][k])
            for j in range(J):
                worst = max(worst, -self.x[i][j],
                            self.x[i][j] - instance.a[i][j][k] * instance.R[i][k])
        worst = max(worst, sum(self.x0) - self.y0, -self.y0)
        for j in range(J):
            worst = max(worst, sum(self.x[i][j] for i in range(I)) - self.y[j])
            worst = max(worst, self.y[j] - instance.C[j] * self.t[j], -self.y[j])
            worst = max(worst, self.t[j] - leader.z[j])
        payment = self.costs.cloud + self.costs.edge
        if variant.placement_in_follower:
            payment += self.costs.placement
        worst = max(worst, payment - instance.B[k])
        return worst

    def validate(self, instance, k, leader, variant=DEFAULT_VARIANT, tol=1e-6):
        resid = self.max_violation(instance, k, leader, variant)
        if resid > tol * (1.0 + instance.max_demand()):
            raise FollowerError(f"follower solution violates feasibility by {resid:.3e}")
        return self


@dataclass
class DualSolution:
    """Duals of the fixed-placement LP, one per constraint family."""
    mu1: float         # budget
    mu2: float         # cloud coupling
    nu: list           # [j] activation link (zero whenever t <= z holds strictly)
    Gamma: list        # [j] EN coupling
    sigma: list        # [j] placement capacity
    xi: list           # [i] delay cap
    eta: list          # [i] flow balance (sign-free)
    tau: list          # [i][j] eligibility

    def objective(self, instance, k, leader, t, variant=DEFAULT_VARIANT):
        """Dual objective of the inner LP (placement cost is added outside)."""
        I, J = instance.I, instance.J
        placement = sum(leader.placement_price(instance, k, j) * t[j] for j in range(J)) \
            if variant.placement_in_follower else 0.0
        val = -self.mu1 * (instance.B[k] - placement)
        val += sum(self.nu[j] * (t[j] - leader.z[j]) for j in range(J))
        val += sum(instance.R[i][k] * self.eta[i] for i in range(I))
        val -= sum(instance.R[i][k] * instance.Dmax[k] * self.xi[i] for i in range(I))
        val -= sum(instance.C[j] * t[j] * self.sigma[j] for j in range(J))
        val -= sum(instance.a[i][j][k] * instance.R[i][k] * self.tau[i][j]
                   for i in range(I) for j in range(J))
        return val

    def max_infeasibility(self, instance, k, leader):
        """Largest violation of the dual feasibility system."""
        I, J = instance.I, instance.J
        w = instance.w[k]
        worst = max(0.0, -self.mu1, -self.mu2)
        worst = max(worst, self.mu2 - instance.p0 * (1.0 + self.mu1))
        for j in range(J):
            worst = max(worst, -self.nu[j], -self.Gamma[j], -self.sigma[j])
            worst = max(worst, self.Gamma[j] - leader.p[j] * (1.0 + self.mu1) - self.sigma[j])
        for i in range(I):
            worst = max(worst, -self.xi[i])
            worst = max(worst, self.eta[i] - instance.psi[i][k])
            worst = max(worst, -(self.mu2 + instance.d0[i] * self.xi[i] - self.eta[i]
                                 + w * instance.d0[i]))
            for j in range(J):
                worst = max(worst, -self.tau[i][j])
                worst = max(worst, -(self.Gamma[j] + instance.d[i][j] * self.xi[i]
                                     + self.tau[i][j] - self.eta[i] + w * instance.d[i][j]))
        return worst


# -- model builders ---------------------------------------------------


def _placement_cost(instance, k, leader, j, variant):
    return leader.placement_price(instance, k, j) if variant.placement_in_follower else 0.0


def build_follower_milp(instance, k, leader, variant=DEFAULT_VARIANT, name=None):
    """The follower MILP for service k under a fixed leader decision."""
    leader.validate(instance)
    I, J = instance.I, instance.J
    m = MilpModel(name or f"follower[{k}]", "min")
    t = [m.add_var(f"t[{j}]", BINARY, tag=f"t[{j},{k}]") for j in range(J)]
    x = [[m.add_var(f"x[{i},{j}]", tag=f"x[{i},{j},{k}]") for j in range(J)] for i in range(I)]
    x0 = [m.add_var(f"x0[{i}]", tag=f"x0[{i},{k}]") for i in range(I)]
    q = [m.add_var(f"q[{i}]", tag=f"q[{i},{k}]") for i in range(I)]
    y = [m.add_var(f"y[{j}]", ub=instance.C[j], tag=f"y[{j},{k}]") for j in range(J)]
    y0 = m.add_var("y0", tag=f"y0[{k}]")

    obj = Expr()
    obj.add(y0, instance.p0)
    for j in range(J):
        obj.add(y[j], leader.p[j])
        obj.add(t[j], _placement_cost(instance, k, leader, j, variant))
    w = instance.w[k]
    for i in range(I):
        obj.add(q[i], instance.psi[i][k])
        obj.add(x0[i], w * instance.d0[i])
        for j in range(J):
            obj.add(x[i][j], w * instance.d[i][j])
    m.set_objective(obj)

    budget = Expr()
    budget.add(y0, instance.p0)
    for j in range(J):
        budget.add(y[j], leader.p[j])
        budget.add(t[j], _placement_cost(instance, k, leader, j, variant))
    m.add_constraint(budget, "<=", instance.B[k], name="budget", family="budget")
    for j in range(J):
        m.add_constraint({t[j]: 1.0}, "<=", leader.z[j], name=f"act[{j}]", family="activation")
    for j in range(J):
        m.add_constraint({y[j]: 1.0, t[j]: -instance.C[j]}, "<=", 0.0,
                         name=f"cap[{j}]", family="placement_capacity")
    m.add_constraint(Expr({x0[i]: 1.0 for i in range(I)}).add(y0, -1.0), "<=", 0.0,
                     name="cloud", family="cloud_coupling")
    for j in range(J):
        m.add_constraint(Expr({x[i][j]: 1.0 for i in range(I)}).add(y[j], -1.0), "<=", 0.0,
                         name=f"edge[{j}]", family="edge_coupling")
    for i in range(I):
        flow = Expr({x0[i]: 1.0, q[i]: 1.0})
        for j in range(J):
            flow.add(x[i][j], 1.0)
        m.add_constraint(flow, "==", instance.R[i][k], name=f"flow[{i}]", family="flow")
    for i in range(I):
        delay = Expr({x0[i]: instance.d0[i]})
        for j in range(J):
            delay.add(x[i][j], instance.d[i][j])
        m.add_constraint(delay, "<=", instance.Dmax[k] * instance.R[i][k],
                         name=f"delay[{i}]", family="delay")
    for i in range(I):
        for j in range(J):
            m.add_constraint({x[i][j]: 1.0}, "<=",
                             instance.a[i][j][k] * instance.R[i][k],
                             name=f"elig[{i},{j}]", family="eligibility")
    return m.finalize()


def extract_follower_solution(instance, k, leader, model, values,
                              variant=DEFAULT_VARIANT, t_fixed=None):
    I, J = instance.I, instance.J
    get = lambda tag: float(values[model.index_of_tag(tag)])
    t = t_fixed if t_fixed is not None else [int(round(get(f"t[{j},{k}]"))) for j in range(J)]
    x = [[max(0.0, get(f"x[{i},{j},{k}]")) for j in range(J)] for i in range(I)]
    x0 = [max(0.0, get(f"x0[{i},{k}]")) for i in range(I)]
    q = [max(0.0, get(f"q[{i},{k}]")) for i in range(I)]
    y = [max(0.0, get(f"y[{j},{k}]")) for j in range(J)]
    y0 = max(0.0, get(f"y0[{k}]"))
    return assemble_solution(instance, k, leader, x, x0, q, y, y0, t)


def assemble_solution(instance, k, leader, x, x0, q, y, y0, t):
    I, J = instance.I, instance.J
    w = instance.w[k]
    costs = CostBreakdown(
        cloud=instance.p0 * y0,
        edge=sum(leader.p[j] * y[j] for j in range(J)),
        placement=sum(leader.placement_price(instance, k, j) * t[j] for j in range(J)),
        delay=w * (sum(x0[i] * instance.d0[i] for i in range(I))
                   + sum(x[i][j] * instance.d[i][j] for i in range(I) for j in range(J))),
        unmet=sum(instance.psi[i][k] * q[i] for i in range(I)),
    )
    avg = []
    for i in range(I):
        load = x0[i] * instance.d0[i] + sum(x[i][j] * instance.d[i][j] for j in range(J))
        avg.append(load / instance.R[i][k] if instance.R[i][k] > 0 else 0.0)
    return FollowerSolution(x=x, x0=x0, q=q, y=y, y0=y0, t=list(t), costs=costs, avg_delay=avg)


def cost_breakdown(instance, k, leader, sol, variant=DEFAULT_VARIANT, tol=1e-6):
    """Recompute the five cost components of a solution; rejects invalid input."""
    sol.validate(instance, k, leader, variant, tol=tol)
    fresh = assemble_solution(instance, k, leader, sol.x, sol.x0, sol.q, sol.y, sol.y0, sol.t)
    return fresh.costs


def follower_cost(instance, k, leader, sol, variant=DEFAULT_VARIANT):
    c = sol.costs
    total = c.cloud + c.edge + c.delay + c.unmet
    if variant.placement_in_follower:
        total += c.placement
    return total


# -- fixed-placement LP and its dual ----------------------------------


@dataclass
class FixedPlacementResult:
    status: str                      # "optimal" | "infeasible"
    objective: float | None = None   # full follower cost (LP value + placement)
    lp_value: float | None = None
    solution: FollowerSolution | None = None
    dual: DualSolution | None = None
    dual_ray: bool = False           # infeasible fixed-t LP: unbounded dual route
    reason: str = ""


def solve_fixed_t_lp(instance, k, leader, t, variant=DEFAULT_VARIANT,
                     config=None, backend="reference"):
    """LP over (x, q, y) for a fixed placement vector, with exact duals."""
    leader.validate(instance)
    I, J = instance.I, instance.J
    t = [int(v) for v in t]
    for j in range(J):
        if t[j] > leader.z[j]:
            return FixedPlacementResult(STATUS_INFEASIBLE, dual_ray=True,
                                        reason=f"t[{j}]=1 at inactive EN {j}")
    placement = sum(_placement_cost(instance, k, leader, j, variant) * t[j] for j in range(J))
    residual_budget = instance.B[k] - placement
    if residual_budget < -1e-12:
        return FixedPlacementResult(STATUS_INFEASIBLE, dual_ray=True,
                                    reason=f"placement cost {placement:.6g} exceeds budget {instance.B[k]:.6g}")

    m = MilpModel(f"fixed_t[{k}]", "min")
    x = [[m.add_var(f"x[{i},{j}]") for j in range(J)] for i in range(I)]
    x0 = [m.add_var(f"x0[{i}]") for i in range(I)]
    q = [m.add_var(f"q[{i}]") for i in range(I)]
    y = [m.add_var(f"y[{j}]") for j in range(J)]
    y0 = m.add_var("y0")

    w = instance.w[k]
    obj = Expr({y0: instance.p0})
    for j in range(J):
        obj.add(y[j], leader.p[j])
    for i in range(I):
        obj.add(q[i], instance.psi[i][k])
        obj.add(x0[i], w * instance.d0[i])
        for j in range(J):
            obj.add(x[i][j], w * instance.d[i][j])
    m.set_objective(obj)

    rows = {}
    budget = Expr({y0: instance.p0})
    for j in range(J):
        budget.add(y[j], leader.p[j])
    rows["budget"] = m.add_constraint(budget, "<=", residual_budget, name="budget")
    rows["mu2"] = m.add_constraint(Expr({x0[i]: 1.0 for i in range(I)}).add(y0, -1.0),
                                   "<=", 0.0, name="cloud")
    rows["Gamma"] = [m.add_constraint(Expr({x[i][j]: 1.0 for i in range(I)}).add(y[j], -1.0),
                                      "<=", 0.0, name=f"edge[{j}]") for j in range(J)]
    rows["sigma"] = [m.add_constraint({y[j]: 1.0}, "<=", instance.C[j] * t[j],
                                      name=f"cap[{j}]") for j in range(J)]
    rows["xi"] = []
    for i in range(I):
        delay = Expr({x0[i]: instance.d0[i]})
        for j in range(J):
            delay.add(x[i][j], instance.d[i][j])
        rows["xi"].append(m.add_constraint(delay, "<=", instance.Dmax[k] * instance.R[i][k],
                                           name=f"delay[{i}]"))
    rows["eta"] = []
    for i in range(I):
        flow = Expr({x0[i]: 1.0, q[i]: 1.0})
        for j in range(J):
            flow.add(x[i][j], 1.0)
        rows["eta"].append(m.add_constraint(flow, "==", instance.R[i][k], name=f"flow[{i}]"))
    rows["tau"] = [[m.add_constraint({x[i][j]: 1.0}, "<=",
                                     instance.a[i][j][k] * instance.R[i][k],
                                     name=f"elig[{i},{j}]")
                    for j in range(J)] for i in range(I)]
    m.finalize()

    if backend == "reference":
        res = solve_lp(m, config)
    else:
        res = backend_solve(backend, m, config)
    if res.status == STATUS_INFEASIBLE:
        return FixedPlacementResult(STATUS_INFEASIBLE, dual_ray=True, reason="LP infeasible")
    if res.status != STATUS_OPTIMAL:
        raise SolveError(f"fixed-t LP ended with status {res.status}")

    yrow = res.duals
    dual = DualSolution(
        mu1=-float(yrow[rows["budget"]]),
        mu2=-float(yrow[rows["mu2"]]),
        nu=[0.0] * J,
        Gamma=[-float(yrow[r]) for r in rows["Gamma"]],
        sigma=[-float(yrow[r]) for r in rows["sigma"]],
        xi=[-float(yrow[r]) for r in rows["xi"]],
        eta=[float(yrow[r]) for r in rows["eta"]],
        tau=[[-float(yrow[rows["tau"][i][j]]) for j in range(J)] for i in range(I)],
    )
    vals = res.values
    sol = assemble_solution(
        instance, k, leader,
        x=[[float(vals[x[i][j]]) for j in range(J)] for i in range(I)],
        x0=[float(vals[x0[i]]) for i in range(I)],
        q=[float(vals[q[i]]) for i in range(I)],
        y=[float(vals[y[j]]) for j in range(J)],
        y0=float(vals[y0]), t=t)
    lp_value = float(res.objective)
    total = lp_value + (placement if variant.placement_in_follower else 0.0)

    dual_obj = dual.objective(instance, k, leader, t, variant)
    scale = 1.0 + abs(lp_value)
    if abs(dual_obj - lp_value) > 1e-6 * scale:
        raise SolveError(
            f"strong duality violated on fixed-t LP: primal {lp_value:.12g} vs dual {dual_obj:.12g}")
    return FixedPlacementResult(STATUS_OPTIMAL, objective=total, lp_value=lp_value,
                                solution=sol, dual=dual)


def enumerate_placements(instance, k, leader, variant=DEFAULT_VARIANT,
                         config=None, backend="reference"):
    """Exhaustive min over all 2^J placements of the fixed-t LP value."""
    J = instance.J
    best = None
    for bits in itertools.product((0, 1), repeat=J):
        res = solve_fixed_t_lp(instance, k, leader, list(bits), variant, config, backend)
        if res.status != STATUS_OPTIMAL:
            continue
        if best is None or res.objective < best.objective - 1e-12:
            best = res
    if best is None:
        raise FollowerError("no feasible placement found (all-zero should always work)")
    return best


def solve_sp1(instance, k, leader, variant=DEFAULT_VARIANT,
              config=None, backend="reference"):
    """Exact follower optimum; returns (FollowerSolution, phi)."""
    model = build_follower_milp(instance, k, leader, variant)
    res = backend_solve_polished(backend, model, config)
    if res.status != STATUS_OPTIMAL:
        raise SolveError(f"SP1[{k}] ended with status {res.status} (must be feasible)")
    sol = extract_follower_solution(instance, k, leader, model, res.values, variant)
    sol.validate(instance, k, leader, variant, tol=1e-5)
    return sol, float(res.objective)


# -- KKT / complementarity single-level oracle -------------------------


def derived_dual_bound(instance):
    """Instance-derived cap for dual-side variables.

    Bounded by the follower cost ceiling (budget + worst-case penalties)
    and the marginal value of money on the cheapest resource, with a 10x
    cushion.  Far tighter than the generic default policy, which keeps
    big-M models numerically tame; the registry's 0.99*M validation still
    guards the assumption.
    """
    inst = instance
    d_max = max(max(inst.d0),
                max(inst.d[i][j] for i in range(inst.I) for j in range(inst.J)))
    price_floor = min([p for p in [inst.p0] + [row[0] for row in inst.p_grid] if p > 0]
                      or [1e-3])
    scale = 0.0
    for k in range(inst.K):
        ceiling = (inst.B[k] + inst.all_drop_cost(k)
                   + inst.w[k] * d_max * inst.total_demand(k))
        money = (max(inst.psi[i][k] for i in range(inst.I)) + inst.p0
                 + inst.w[k] * d_max) / price_floor
        scale = max(scale, ceiling, money)
    return 10.0 * (scale + 1.0)


@dataclass
class KktFollowerModel:
    model: MilpModel
    registry: BigMRegistry
    pairs: dict          # family -> list of (label, slack Expr, dual Expr, u idx)
    tags: dict

    def complementarity_residuals(self, values):
        """Per family, the largest min(primal slack, dual side) at a point."""
        out = {}
        for family, pairs in self.pairs.items():
            worst = 0.0
            for label, slack, dual, _u in pairs:
                worst = max(worst, min(slack.value(values), dual.value(values)))
            out[family] = worst
        return out


def build_kkt_follower(instance, k, leader, variant=DEFAULT_VARIANT,
                       registry=None, dual_bound=None):
    """Single-level MILP equivalent of the follower problem.

    Encodes primal feasibility, stationarity, and complementary slackness
    of the fixed-placement LP for every placement vector at once (t stays
    binary), using one switch binary per complementarity pair.  Twelve
    constraint families, each with its own big-M from the registry.
    """
    leader.validate(instance)
    I, J = instance.I, instance.J
    registry = registry if registry is not None else BigMRegistry()
    w = instance.w[k]
    R = [instance.R[i][k] for i in range(I)]
    total_R = sum(R)
    if dual_bound is None:
        dual_bound = derived_dual_bound(instance)

    m = MilpModel(f"kkt_follower[{k}]", "min")
    t = [m.add_var(f"t[{j}]", BINARY) for j in range(J)]
    x = [[m.add_var(f"x[{i},{j}]", ub=instance.a[i][j][k] * R[i]) for j in range(J)]
         for i in range(I)]
    x0 = [m.add_var(f"x0[{i}]", ub=R[i]) for i in range(I)]
    q = [m.add_var(f"q[{i}]", ub=R[i]) for i in range(I)]
    y = [m.add_var(f"y[{j}]", ub=instance.C[j]) for j in range(J)]
    y0 = m.add_var("y0", ub=total_R)
    mu1 = m.add_var("mu1", ub=dual_bound)
    mu2 = m.add_var("mu2", ub=dual_bound)
    Gamma = [m.add_var(f"Gamma[{j}]", ub=dual_bound) for j in range(J)]
    sigma = [m.add_var(f"sigma[{j}]", ub=dual_bound) for j in range(J)]
    xi = [m.add_var(f"xi[{i}]", ub=dual_bound) for i in range(I)]
    nu = [m.add_var(f"nu[{j}]", ub=dual_bound) for j in range(J)]
    eta = [m.add_var(f"eta[{i}]", lb=-dual_bound, ub=dual_bound) for i in range(I)]
    tau = [[m.add_var(f"tau[{i},{j}]", ub=dual_bound) for j in range(J)] for i in range(I)]

    obj = Expr({y0: instance.p0})
    for j in range(J):
        obj.add(y[j], leader.p[j])
        obj.add(t[j], _placement_cost(instance, k, leader, j, variant))
    for i in range(I):
        obj.add(q[i], instance.psi[i][k])
        obj.add(x0[i], w * instance.d0[i])
        for j in range(J):
            obj.add(x[i][j], w * instance.d[i][j])
    m.set_objective(obj)

    for i in range(I):
        flow = Expr({x0[i]: 1.0, q[i]: 1.0})
        for j in range(J):
            flow.add(x[i][j], 1.0)
        m.add_constraint(flow, "==", R[i], name=f"flow[{i}]", family="flow")

    pairs = {}

    def complementarity(family, label, slack_expr, dual_expr, M):
        """0 <= slack ⊥ dual >= 0 via a switch binary and big-M caps."""
        watch = []
        if len(dual_expr.coeffs) == 1 and not dual_expr.constant:
            (only_idx, coef), = dual_expr.coeffs.items()
            if coef == 1.0 and m.variables[only_idx].kind != BINARY:
                watch = [only_idx]
        if family not in registry.entries:
            M = registry.register(family, M, watch=watch)
        else:
            M = registry.get(family)
            if watch:
                registry.register(family, M, watch=watch)
        u = m.add_var(f"u[{family}:{label}]", BINARY)
        m.add_constraint(slack_expr, ">=", 0.0, name=f"{family}:{label}:p0", family=family)
        lhs = Expr().add_expr(slack_expr).add(u, -M)
        m.add_constraint(lhs, "<=", 0.0, name=f"{family}:{label}:pM", family=family)
        m.add_constraint(dual_expr, ">=", 0.0, name=f"{family}:{label}:d0", family=family)
        dhs = Expr().add_expr(dual_expr).add(u, M)
        m.add_constraint(dhs, "<=", M, name=f"{family}:{label}:dM", family=family)
        pairs.setdefault(family, []).append((label, slack_expr, dual_expr, u))

    price_floor = min([p for p in ([instance.p0] + leader.p) if p > 0] or [1e-3])
    psi_max = max(instance.psi[i][k] for i in range(I))
    d_max = max([instance.d0[i] for i in range(I)] +
                [instance.d[i][j] for i in range(I) for j in range(J)])
    mdual = max(dual_bound, (psi_max + instance.p0 + w * d_max) / price_floor)

    # family 1: budget
    slack = Expr(constant=instance.B[k])
    slack.add(y0, -instance.p0)
    for j in range(J):
        slack.add(y[j], -leader.p[j])
        slack.add(t[j], -_placement_cost(instance, k, leader, j, variant))
    complementarity("kkt1_budget", "all", slack, Expr({mu1: 1.0}),
                    max(instance.B[k], mdual))
    # family 2: cloud coupling
    slack = Expr({y0: 1.0})
    for i in range(I):
        slack.add(x0[i], -1.0)
    complementarity("kkt2_cloud", "all", slack, Expr({mu2: 1.0}), max(total_R, mdual))
    # families 3-4: EN coupling and capacity
    for j in range(J):
        slack = Expr({y[j]: 1.0})
        for i in range(I):
            slack.add(x[i][j], -1.0)
        complementarity("kkt3_edge", f"j{j}", slack, Expr({Gamma[j]: 1.0}),
                        max(max(instance.C), mdual))
        complementarity("kkt4_cap", f"j{j}",
                        Expr({t[j]: instance.C[j], y[j]: -1.0}), Expr({sigma[j]: 1.0}),
                        max(max(instance.C), mdual))
    # family 5: eligibility
    for i in range(I):
        for j in range(J):
            complementarity("kkt5_elig", f"i{i}j{j}",
                            Expr({x[i][j]: -1.0}, constant=instance.a[i][j][k] * R[i]),
                            Expr({tau[i][j]: 1.0}), max(max(R, default=1.0), 1.0, mdual))
    # family 6: activation
    for j in range(J):
        complementarity("kkt6_act", f"j{j}",
                        Expr({t[j]: -1.0}, constant=leader.z[j]), Expr({nu[j]: 1.0}),
                        max(1.0, mdual))
    # family 7: delay
    for i in range(I):
        slack = Expr({x0[i]: -instance.d0[i]}, constant=instance.Dmax[k] * R[i])
        for j in range(J):
            slack.add(x[i][j], -instance.d[i][j])
        complementarity("kkt7_delay", f"i{i}", slack, Expr({xi[i]: 1.0}),
                        max(instance.Dmax[k] * max(R, default=1.0), 1.0, mdual))
    # families 8-12: stationarity ⊥ primal variable
    for i in range(I):
        for j in range(J):
            station = Expr({Gamma[j]: 1.0, tau[i][j]: 1.0, eta[i]: 1.0,
                            xi[i]: instance.d[i][j]}, constant=w * instance.d[i][j])
            complementarity("kkt8_x", f"i{i}j{j}", station, Expr({x[i][j]: 1.0}),
                            max(max(R, default=1.0), 1.0, mdual))
    for i in range(I):
        station = Expr({mu2: 1.0, eta[i]: 1.0, xi[i]: instance.d0[i]},
                       constant=w * instance.d0[i])
        complementarity("kkt9_x0", f"i{i}", station, Expr({x0[i]: 1.0}),
                        max(max(R, default=1.0), 1.0, mdual))
        complementarity("kkt10_q", f"i{i}",
                        Expr({eta[i]: 1.0}, constant=instance.psi[i][k]),
                        Expr({q[i]: 1.0}), max(max(R, default=1.0), 1.0, mdual))
    for j in range(J):
        station = Expr({mu1: leader.p[j], Gamma[j]: -1.0, sigma[j]: 1.0},
                       constant=leader.p[j])
        complementarity("kkt11_y", f"j{j}", station, Expr({y[j]: 1.0}),
                        max(max(instance.C), mdual))
    station = Expr({mu1: instance.p0, mu2: -1.0}, constant=instance.p0)
    complementarity("kkt12_y0", "all", station, Expr({y0: 1.0}), max(total_R, mdual))

    tags = {"t": t, "x": x, "x0": x0, "q": q, "y": y, "y0": y0,
            "mu1": mu1, "mu2": mu2, "Gamma": Gamma, "sigma": sigma,
            "xi": xi, "nu": nu, "eta": eta, "tau": tau}
    return KktFollowerModel(model=m.finalize(), registry=registry, pairs=pairs, tags=tags)


def solve_kkt_follower(instance, k, leader, variant=DEFAULT_VARIANT,
                       config=None, backend="reference", registry=None):
    """Solve the KKT reformulation; returns (optimum, residual audit, result).

    The raw MILP solve fixes the placement; the switch binaries are then
    re-derived from an exact primal/dual pair of that placement's LP and
    the completed pattern is certified against the KKT model itself (LP
    with all binaries fixed).  This sidesteps engine integrality slack,
    which on complementarity models routinely yields switch patterns with
    no exact completion.
    """
    import numpy as np

    km = build_kkt_follower(instance, k, leader, variant, registry=registry)
    cfg = config or SolverConfig()
    cfg = SolverConfig(**{**cfg.__dict__, "int_tol": min(cfg.int_tol, 1e-8)})
    res = backend_solve(backend, km.model, cfg)
    if res.status != STATUS_OPTIMAL:
        raise SolveError(f"KKT follower model ended with status {res.status}")
    claimed = float(res.objective)
    J, I = instance.J, instance.I
    tags = km.tags
    t = [int(round(res.values[tags["t"][j]])) for j in range(J)]
    ft = solve_fixed_t_lp(instance, k, leader, t, variant)
    if ft.status != STATUS_OPTIMAL:
        raise SolveError("KKT solve returned an unusable placement "
                         f"(fixed-placement LP {ft.status}: {ft.reason})")

    # assemble the exact completion: primal from the LP, duals from its
    # certificate (the flow multiplier flips sign between the two systems)
    point = np.zeros(km.model.n_vars)
    sol, dual = ft.solution, ft.dual
    for j in range(J):
        point[tags["t"][j]] = t[j]
        point[tags["y"][j]] = sol.y[j]
        point[tags["Gamma"][j]] = dual.Gamma[j]
        point[tags["sigma"][j]] = dual.sigma[j]
        point[tags["nu"][j]] = 0.0
    for i in range(I):
        point[tags["x0"][i]] = sol.x0[i]
        point[tags["q"][i]] = sol.q[i]
        point[tags["xi"][i]] = dual.xi[i]
        point[tags["eta"][i]] = -dual.eta[i]
        for j in range(J):
            point[tags["x"][i][j]] = sol.x[i][j]
            point[tags["tau"][i][j]] = dual.tau[i][j]
    point[tags["y0"]] = sol.y0
    point[tags["mu1"]] = dual.mu1
    point[tags["mu2"]] = dual.mu2
    for family, entries in km.pairs.items():
        for label, slack, dual_side, u_idx in entries:
            s_val = slack.value(point)
            d_val = dual_side.value(point)
            point[u_idx] = 1.0 if s_val > max(d_val, 1e-9 * (1.0 + abs(s_val))) else 0.0

    shim = SolveResult(STATUS_OPTIMAL, objective=claimed, values=point)
    adapter = get_backend(backend)
    cert = polish_binaries(km.model, shim, cfg, lp_solver=adapter.solve_lp)
    scale = 1.0 + abs(claimed)
    if abs(cert.objective - claimed) > 1e-5 * scale:
        raise SolveError(
            f"KKT certificate {cert.objective:.12g} disagrees with the engine's "
            f"claim {claimed:.12g}; the returned placement is suspect")
    km.registry.validate(cert.values)
    residuals = km.complementarity_residuals(cert.values)
    return float(cert.objective), residuals, cert
