"""Exact solving of MilpModels.

Two engines live behind one result contract:

* the built-in reference engine (bounded-variable primal simplex plus a
  deterministic best-first branch-and-bound on binaries), and
* a scipy/HiGHS adapter, registered under the name ``"highs"``.

Additional engines can be registered through ``backend_register``; an
adapter only has to accept a MilpModel and return a SolveResult with the
same status vocabulary and tolerance semantics.

Dual values are reported for pure LP solves only, with the sensitivity
convention dObj/d(rhs): for a minimization, duals of ``<=`` rows are
nonpositive; for a maximization the signs flip (the dual of ``x <= 3``
in ``max x`` is +1).
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import MilpModel, ModelError
from .simplex import (BoundedSimplex, INFEASIBLE, ITER_LIMIT, OPTIMAL,
                      SimplexFailure, UNBOUNDED)

INF = math.inf

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_UNBOUNDED = "unbounded"
STATUS_GAP_LIMIT = "gap-limit"
STATUS_TIME_LIMIT = "time-limit"


class SolveError(RuntimeError):
    """Numerical failure or protocol violation during a solve."""


@dataclass
class SolverConfig:
    feas_tol: float = 1e-7
    int_tol: float = 1e-6
    mip_gap: float = 1e-8
    node_limit: int | None = None
    time_limit: float | None = None
    max_lp_iterations: int | None = None
    branching: str = "lowest-index"

    def validate(self):
        if self.feas_tol <= 0 or self.int_tol <= 0 or self.mip_gap <= 0:
            raise ModelError("solver tolerances must be positive")
        if self.node_limit is not None and self.node_limit < 0:
            raise ModelError("node limit must be nonnegative")
        if self.time_limit is not None and self.time_limit < 0:
            raise ModelError("time limit must be nonnegative")
        return self


@dataclass
class SolveResult:
    status: str
    objective: float | None = None
    values: np.ndarray | None = None
    duals: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == STATUS_OPTIMAL

    def value_of(self, idx):
        return float(self.values[idx])

    def to_json_dict(self):
        """Wire format of the adapter contract (status/objective/values)."""
        return {
            "status": self.status,
            "objective": self.objective,
            "values": None if self.values is None else [float(v) for v in self.values],
            "duals": None if self.duals is None else [float(v) for v in self.duals],
            "stats": self.stats,
        }


class _ModelCore:
    """Constraint matrix and vectors extracted once per model."""

    def __init__(self, model: MilpModel):
        m, n = model.n_constraints, model.n_vars
        rows, cols, data = [], [], []
        b = np.zeros(m)
        senses = []
        for r, con in enumerate(model.constraints):
            senses.append(con.sense)
            b[r] = con.rhs
            for idx, coef in con.coeffs.items():
                rows.append(r)
                cols.append(idx)
                data.append(coef)
        self.A = sp.csc_matrix((data, (rows, cols)), shape=(m, n))
        self.b = b
        self.senses = senses
        self.n = n
        self.c = np.zeros(n)
        for idx, coef in model.objective.items():
            self.c[idx] = coef
        self.offset = model.objective_offset
        self.sense_mult = 1.0 if model.sense == "min" else -1.0
        self.lb = np.array([v.lb for v in model.variables])
        self.ub = np.array([v.ub for v in model.variables])
        self.binaries = model.binary_indices()


def _make_engine(core, config):
    return BoundedSimplex(core.A, core.b, core.senses,
                          feas_tol=config.feas_tol,
                          max_iterations=config.max_lp_iterations)


def _run_simplex(core, lb, ub, config, engine=None):
    if engine is None:
        engine = _make_engine(core, config)
    try:
        sol = engine.solve(core.sense_mult * core.c, lb, ub)
    except SimplexFailure as exc:
        raise SolveError(f"simplex failure: {exc}") from exc
    if sol.status == ITER_LIMIT:
        raise SolveError("simplex iteration limit exceeded (after Bland fallback)")
    return sol


def solve_lp(model: MilpModel, config: SolverConfig | None = None) -> SolveResult:
    """Solve the model as an LP (binaries relaxed to [0,1]); duals included."""
    config = (config or SolverConfig()).validate()
    core = _ModelCore(model)
    t0 = time.perf_counter()
    sol = _run_simplex(core, core.lb, core.ub, config)
    wall = time.perf_counter() - t0
    if sol.status == INFEASIBLE:
        return SolveResult(STATUS_INFEASIBLE, stats={"iterations": sol.iterations, "wall_time": wall})
    if sol.status == UNBOUNDED:
        return SolveResult(STATUS_UNBOUNDED, stats={"iterations": sol.iterations, "wall_time": wall})
    obj = core.sense_mult * sol.obj + core.offset
    duals = core.sense_mult * sol.duals
    return SolveResult(STATUS_OPTIMAL, objective=obj, values=sol.x, duals=duals,
                       stats={"iterations": sol.iterations, "wall_time": wall, "nodes": 0})


def solve_milp(model: MilpModel, config: SolverConfig | None = None) -> SolveResult:
    """Best-first branch-and-bound on the binaries.

    Deterministic: lowest-index fractional binary is branched first and the
    down-branch (fix to 0) is explored first among equal bounds.
    """
    config = (config or SolverConfig()).validate()
    core = _ModelCore(model)
    if not core.binaries:
        return solve_lp(model, config)

    t0 = time.perf_counter()
    deadline = t0 + config.time_limit if config.time_limit is not None else None
    mult = core.sense_mult  # internal objective is mult*obj, always minimized

    nodes = 0
    total_iters = 0
    incumbent = None
    incumbent_internal = INF
    engine = _make_engine(core, config)

    def lp_at(fixes):
        nonlocal nodes, total_iters
        lb = core.lb.copy()
        ub = core.ub.copy()
        for idx, val in fixes.items():
            lb[idx] = ub[idx] = float(val)
        sol = _run_simplex(core, lb, ub, config, engine)
        nodes += 1
        total_iters += sol.iterations
        return sol

    root = lp_at({})
    if root.status == INFEASIBLE:
        return SolveResult(STATUS_INFEASIBLE, stats={"nodes": nodes, "iterations": total_iters,
                                                     "wall_time": time.perf_counter() - t0})
    if root.status == UNBOUNDED:
        return SolveResult(STATUS_UNBOUNDED, stats={"nodes": nodes, "iterations": total_iters,
                                                    "wall_time": time.perf_counter() - t0})

    counter = 0
    heap = []  # (internal bound, insertion counter, fixes, lp solution)
    heapq.heappush(heap, (root.obj, counter, {}, root))

    def gap_cushion():
        ref = abs(incumbent_internal) if incumbent is not None else 1.0
        return config.mip_gap * max(1.0, ref)

    status = STATUS_OPTIMAL
    best_open_bound = root.obj
    while heap:
        if deadline is not None and time.perf_counter() > deadline:
            status = STATUS_TIME_LIMIT
            break
        if config.node_limit is not None and nodes >= config.node_limit:
            status = STATUS_GAP_LIMIT
            break
        bound, _, fixes, sol = heapq.heappop(heap)
        best_open_bound = bound
        if incumbent is not None and bound >= incumbent_internal - gap_cushion():
            best_open_bound = incumbent_internal
            break  # best-first: everything remaining is no better

        frac = None
        for idx in core.binaries:
            v = sol.x[idx]
            if abs(v - round(v)) > config.int_tol:
                frac = idx
                break
        if frac is None:
            # certify the pattern: re-solve with every binary fixed exactly,
            # so the incumbent never leans on a binary sitting just inside
            # the integrality tolerance (big-M rows leak badly otherwise)
            exact_fixes = {idx: round(sol.x[idx]) for idx in core.binaries}
            exact = lp_at(exact_fixes)
            if exact.status == OPTIMAL and exact.obj < incumbent_internal - 1e-12:
                incumbent_internal = exact.obj
                x = exact.x.copy()
                for idx in core.binaries:
                    x[idx] = round(x[idx])
                incumbent = x
            leak = INF if exact.status != OPTIMAL else exact.obj - sol.obj
            if leak <= 1e-9 * (1.0 + abs(sol.obj)):
                continue  # node optimum certified, fathom
            # the LP leaned on a near-integral binary; split the node on the
            # lowest-index binary not yet fixed so the search stays exact
            frac = next((idx for idx in core.binaries if idx not in fixes), None)
            if frac is None:
                continue  # fully fixed: exact.obj was the node optimum

        for val in (0, 1):  # down-branch first
            child_fixes = dict(fixes)
            child_fixes[frac] = val
            child = lp_at(child_fixes)
            if child.status != OPTIMAL:
                continue
            if incumbent is not None and child.obj >= incumbent_internal - gap_cushion():
                continue
            counter += 1
            heapq.heappush(heap, (child.obj, counter, child_fixes, child))

    wall = time.perf_counter() - t0
    stats = {"nodes": nodes, "iterations": total_iters, "wall_time": wall}
    if incumbent is None:
        if status == STATUS_OPTIMAL:
            return SolveResult(STATUS_INFEASIBLE, stats=stats)
        return SolveResult(status, stats=stats)
    obj = mult * incumbent_internal + core.offset
    if heap and status == STATUS_OPTIMAL:
        # popped-out early via the best-first cut; remaining nodes are worse
        pass
    if status != STATUS_OPTIMAL and heap:
        lo = min(best_open_bound, min(h[0] for h in heap))
        stats["gap"] = (incumbent_internal - lo) / max(1.0, abs(incumbent_internal))
    else:
        stats["gap"] = 0.0
    return SolveResult(status, objective=obj, values=incumbent, duals=None, stats=stats)


class PolishInfeasible(SolveError):
    """The rounded binary pattern admits no feasible continuous completion."""


def polish_binaries(model, result, config=None, lp_solver=None):
    """Re-solve the LP with every binary fixed at its rounded value.

    MILP engines may leave binaries a hair inside their integrality
    tolerance, which leaks through big-M constraints (slack <= u*M with
    u = 1-1e-6 is almost free).  Fixing the binaries and re-solving the
    continuous part yields exact linearization identities and a
    certified objective for the chosen pattern.
    """
    config = (config or SolverConfig()).validate()
    if result.values is None:
        return result
    bins = model.binary_indices()
    if not bins:
        return result
    saved = [(i, model.variables[i].lb, model.variables[i].ub) for i in bins]
    try:
        for i in bins:
            v = round(float(result.values[i]))
            model.variables[i].lb = model.variables[i].ub = float(v)
        lp = (lp_solver or solve_lp)(model, config)
    finally:
        for i, lo, hi in saved:
            model.variables[i].lb = lo
            model.variables[i].ub = hi
    if lp.status != STATUS_OPTIMAL:
        raise PolishInfeasible(f"polish LP ended {lp.status}")
    values = lp.values.copy()
    for i in bins:
        values[i] = round(float(result.values[i]))
    drift = abs(lp.objective - result.objective) / max(1.0, abs(lp.objective))
    stats = dict(result.stats)
    stats["polish_drift"] = drift
    return SolveResult(result.status, objective=lp.objective, values=values,
                       duals=None, stats=stats)


def _exclude_pattern(model, pattern):
    """No-good row cutting off exactly one binary assignment."""
    ones = [i for i, v in pattern.items() if v == 1]
    coeffs = {i: (1.0 if v == 1 else -1.0) for i, v in pattern.items()}
    model.add_constraint(coeffs, "<=", len(ones) - 1, name=f"nogood{len(model.constraints)}",
                         family="nogood")


def solve_milp_certified(adapter, model, config=None, max_exclusions=64):
    """Exact MILP optimum through an engine with loose integrality.

    Every candidate pattern is certified by an LP with the binaries fixed
    exactly.  If the engine's claimed objective beats its own pattern's
    certified value (it leaned on a fractionally-integral binary against a
    big-M row), that pattern is excluded with a no-good cut and the solve
    repeats; the incumbent certificate is returned once it matches the
    claimed bound.  Engines with exact integral handling take the fast
    path through a single certification.
    """
    config = (config or SolverConfig()).validate()
    bins = model.binary_indices()
    if not bins:
        return adapter.solve_lp(model, config)
    sense_mult = 1.0 if model.sense == "min" else -1.0

    work = model
    best = None
    for round_no in range(max_exclusions + 1):
        res = adapter.solve_milp(work, config)
        if res.status in (STATUS_UNBOUNDED,):
            return res
        if res.status == STATUS_INFEASIBLE:
            break  # no patterns left beyond the excluded ones
        if res.status not in (STATUS_OPTIMAL, STATUS_GAP_LIMIT, STATUS_TIME_LIMIT):
            return res
        claimed = res.objective
        try:
            cert = polish_binaries(model, res, config, lp_solver=adapter.solve_lp)
        except PolishInfeasible:
            cert = None
        if cert is not None and (best is None or
                                 sense_mult * cert.objective < sense_mult * best.objective):
            best = cert
        if res.status != STATUS_OPTIMAL:
            if best is None:
                return res
            best.status = res.status  # the optimality claim was never proven
            return best
        tol = 1e-9 * (1.0 + abs(claimed))
        if cert is not None and sense_mult * (cert.objective - claimed) <= tol:
            return cert  # claim certified: nothing can beat it
        if best is not None and sense_mult * (best.objective - claimed) <= tol:
            return best  # claimed bound of the reduced model meets the incumbent
        if work is model:
            work = model.clone()
        work._finalized = False
        _exclude_pattern(work, {i: int(round(res.values[i])) for i in bins})
        work._finalized = True
    if best is None:
        return SolveResult(STATUS_INFEASIBLE, stats={"exclusions": max_exclusions})
    return best


def backend_solve_polished(name, model, config=None):
    """Backend dispatch returning exactly-certified integral solutions."""
    adapter = get_backend(name)
    if not model.binary_indices():
        return adapter.solve_lp(model, config)
    if getattr(adapter, "exact_integrality", False):
        return backend_solve(name, model, config)
    return solve_milp_certified(adapter, model, config)


# -- pluggable backends ----------------------------------------------


class ReferenceBackend:
    """Adapter wrapping the built-in engine (identity adapter)."""

    name = "reference"
    exact_integrality = True  # incumbents are certified with binaries fixed

    def solve_lp(self, model, config=None):
        return solve_lp(model, config)

    def solve_milp(self, model, config=None):
        return solve_milp(model, config)


class ScipyHighsBackend:
    """Adapter for scipy.optimize (HiGHS): linprog for LPs, milp for MILPs."""

    name = "highs"

    def _arrays(self, model):
        core = _ModelCore(model)
        return core

    def solve_lp(self, model, config=None):
        from scipy.optimize import linprog

        config = (config or SolverConfig()).validate()
        core = self._arrays(model)
        A = core.A.tocsr()
        ub_rows, ub_rhs, ub_map = [], [], []
        eq_rows, eq_rhs, eq_map = [], [], []
        for r, sense in enumerate(core.senses):
            if sense == "<=":
                ub_rows.append(A[r]); ub_rhs.append(core.b[r]); ub_map.append((r, 1.0))
            elif sense == ">=":
                ub_rows.append(-A[r]); ub_rhs.append(-core.b[r]); ub_map.append((r, -1.0))
            else:
                eq_rows.append(A[r]); eq_rhs.append(core.b[r]); eq_map.append(r)
        kwargs = {}
        if ub_rows:
            kwargs["A_ub"] = sp.vstack(ub_rows); kwargs["b_ub"] = np.array(ub_rhs)
        if eq_rows:
            kwargs["A_eq"] = sp.vstack(eq_rows); kwargs["b_eq"] = np.array(eq_rhs)
        bounds = [(lo if np.isfinite(lo) else None, hi if np.isfinite(hi) else None)
                  for lo, hi in zip(core.lb, core.ub)]
        t0 = time.perf_counter()
        res = linprog(core.sense_mult * core.c, bounds=bounds, method="highs", **kwargs)
        wall = time.perf_counter() - t0
        stats = {"iterations": int(getattr(res, "nit", 0) or 0), "wall_time": wall, "nodes": 0}
        if res.status == 2:
            return SolveResult(STATUS_INFEASIBLE, stats=stats)
        if res.status == 3:
            return SolveResult(STATUS_UNBOUNDED, stats=stats)
        if res.status != 0:
            raise SolveError(f"highs linprog failed: {res.message}")
        duals = np.zeros(len(core.senses))
        if ub_rows:
            for (r, flip), marg in zip(ub_map, res.ineqlin.marginals):
                duals[r] = flip * marg
        if eq_rows:
            for r, marg in zip(eq_map, res.eqlin.marginals):
                duals[r] = marg
        duals *= core.sense_mult
        obj = core.sense_mult * res.fun + core.offset
        return SolveResult(STATUS_OPTIMAL, objective=obj, values=res.x, duals=duals, stats=stats)

    def solve_milp(self, model, config=None):
        from scipy.optimize import Bounds, LinearConstraint, milp

        config = (config or SolverConfig()).validate()
        core = self._arrays(model)
        if not core.binaries:
            return self.solve_lp(model, config)
        lo = np.full(len(core.b), -np.inf)
        hi = np.full(len(core.b), np.inf)
        for r, sense in enumerate(core.senses):
            if sense in ("<=", "=="):
                hi[r] = core.b[r]
            if sense in (">=", "=="):
                lo[r] = core.b[r]
        integrality = np.zeros(core.n)
        integrality[core.binaries] = 1
        options = {"mip_rel_gap": config.mip_gap}
        if config.time_limit is not None:
            options["time_limit"] = config.time_limit
        if config.node_limit is not None:
            options["node_limit"] = config.node_limit
        t0 = time.perf_counter()
        res = milp(c=core.sense_mult * core.c,
                   constraints=LinearConstraint(core.A, lo, hi),
                   integrality=integrality,
                   bounds=Bounds(core.lb, core.ub),
                   options=options)
        wall = time.perf_counter() - t0
        stats = {"nodes": int(getattr(res, "mip_node_count", 0) or 0), "wall_time": wall,
                 "iterations": 0, "gap": float(getattr(res, "mip_gap", 0.0) or 0.0)}
        if res.status == 2:
            return SolveResult(STATUS_INFEASIBLE, stats=stats)
        if res.status == 3:
            return SolveResult(STATUS_UNBOUNDED, stats=stats)
        if res.status == 1 or (res.status == 4 and res.x is not None):
            label = STATUS_TIME_LIMIT if config.time_limit is not None else STATUS_GAP_LIMIT
            if res.x is None:
                return SolveResult(label, stats=stats)
            obj = core.sense_mult * res.fun + core.offset
            return SolveResult(label, objective=obj, values=res.x, stats=stats)
        if res.status == 4 and "unbounded" in str(res.message).lower():
            # ambiguous "infeasible or unbounded": settle it via the relaxation,
            # mirroring the reference engine's root-relaxation semantics
            relax = self.solve_lp(model, config)
            if relax.status in (STATUS_INFEASIBLE, STATUS_UNBOUNDED):
                return SolveResult(relax.status, stats=stats)
        if res.status != 0 or res.x is None:
            raise SolveError(f"highs milp failed: {res.message}")
        x = np.array(res.x, dtype=float)
        for idx in core.binaries:
            x[idx] = round(x[idx])
        obj = core.sense_mult * res.fun + core.offset
        return SolveResult(STATUS_OPTIMAL, objective=obj, values=x, stats=stats)


_BACKENDS: dict = {}


def backend_register(name, adapter):
    """Register a solver adapter under a name (overwrites silently)."""
    for attr in ("solve_lp", "solve_milp"):
        if not callable(getattr(adapter, attr, None)):
            raise ModelError(f"backend {name!r} does not implement {attr}")
    _BACKENDS[name] = adapter
    return adapter


def backend_names():
    return sorted(_BACKENDS)


def get_backend(name):
    if name not in _BACKENDS:
        raise ModelError(f"unknown backend {name!r}; registered: {backend_names()}")
    return _BACKENDS[name]


def backend_solve(name, model, config=None):
    """Dispatch to a registered backend (MILP entry point; LPs pass through)."""
    adapter = get_backend(name)
    if model.binary_indices():
        return adapter.solve_milp(model, config)
    return adapter.solve_lp(model, config)


backend_register("reference", ReferenceBackend())
backend_register("highs", ScipyHighsBackend())
