"""Pricing schemes, sensitivity sweeps, and the model-size audit.

Schemes:

* ``dyn``          -- full bilevel optimization (prices free per node);
* ``flat``         -- one price across all nodes (compute, and by default
                      storage too), still bilevel-optimal;
* ``avg``          -- prices pinned to the mid-grid values, activation and
                      followers still optimized;
* ``nostorage``    -- storage prices identically zero (services stop paying
                      rent, the platform stops earning it);
* ``noplacement``  -- services pay neither installation nor storage, the
                      older provisioning model.

The first three have nested feasible sets, so their optimal profits are
ordered dyn >= flat >= avg on every instance; the test suite asserts
this exactly.  Sweeps emit flat CSV-ready rows, one per
(scheme, axis value, replicate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .bilevel import (Cut, build_master, build_sp2, mp_size, run_algorithm1,
                      sp1_size, sp2_size)
from .follower import LeaderDecision, ModelVariant, build_follower_milp
from .instance import GenConfig, ScaleFactors, apply_scale, generate

SCHEME_KINDS = ("dyn", "flat", "avg", "nostorage", "noplacement")


class SchemeError(ValueError):
    pass


@dataclass
class Scheme:
    kind: str
    avg_price: float = 0.03      # mid value of the default compute grid
    avg_sprice: float = 0.01     # mid value of the default storage grid
    flat_storage: bool = True    # flat scheme also equalizes storage prices

    def validate(self):
        if self.kind not in SCHEME_KINDS:
            raise SchemeError(f"unknown scheme {self.kind!r}; choose from {SCHEME_KINDS}")
        return self


@dataclass
class SchemeResult:
    scheme: str
    status: str
    profit: float
    leader: LeaderDecision | None
    solutions: list | None
    state: object
    reports: list = field(default_factory=list)


def solve_scheme(instance, scheme, epsilon=1e-4, config=None, backend="reference",
                 time_limit=None, max_iterations=None):
    """Solve one pricing scheme to bilevel optimality; returns SchemeResult."""
    scheme = scheme if isinstance(scheme, Scheme) else Scheme(kind=str(scheme))
    scheme.validate()
    inst = instance
    kwargs = dict(epsilon=epsilon, config=config, backend=backend,
                  time_limit=time_limit, max_iterations=max_iterations)
    if scheme.kind == "dyn":
        state = run_algorithm1(inst, **kwargs)
    elif scheme.kind == "flat":
        state = run_algorithm1(inst, flat=True, flat_storage=scheme.flat_storage, **kwargs)
    elif scheme.kind == "avg":
        for j in range(inst.J):
            if all(abs(scheme.avg_price - g) > 1e-9 for g in inst.p_grid[j]):
                raise SchemeError(
                    f"avg price {scheme.avg_price} is not on the compute grid of EN {j}")
            if all(abs(scheme.avg_sprice - g) > 1e-9 for g in inst.ps_grid[j]):
                raise SchemeError(
                    f"avg storage price {scheme.avg_sprice} is not on the storage grid of EN {j}")
        state = run_algorithm1(inst, fixed_price=scheme.avg_price,
                               fixed_sprice=scheme.avg_sprice, **kwargs)
    elif scheme.kind == "nostorage":
        zeroed = inst.copy()
        zeroed.ps_grid = [[0.0] for _ in range(inst.J)]
        zeroed.validate()
        inst = zeroed
        state = run_algorithm1(inst, **kwargs)
    else:  # noplacement
        state = run_algorithm1(inst, variant=ModelVariant(placement_in_follower=False),
                               **kwargs)

    reports = []
    if state.incumbent_solutions is not None:
        for k, sol in enumerate(state.incumbent_solutions):
            rep = sol.to_json_dict()
            rep["service"] = k
            reports.append(rep)
    profit = state.LB if state.LB != -math.inf else float("nan")
    return SchemeResult(scheme=scheme.kind, status=state.status, profit=profit,
                        leader=state.incumbent_leader,
                        solutions=state.incumbent_solutions, state=state,
                        reports=reports)


# -- sweeps ------------------------------------------------------------

SWEEP_AXES = ("p0", "delta", "gamma0", "Lambda", "beta0", "I")


@dataclass
class SweepSpec:
    schemes: list
    axis: str
    values: list
    replicates: int = 1
    base_seed: int = 0
    epsilon: float = 1e-4
    backend: str = "reference"
    gen: GenConfig = field(default_factory=GenConfig)
    time_limit: float | None = None

    def validate(self):
        if self.axis not in SWEEP_AXES:
            raise SchemeError(f"unknown sweep axis {self.axis!r}; choose from {SWEEP_AXES}")
        if self.replicates < 1:
            raise SchemeError("instances-per-point must be >= 1")
        if not self.values:
            raise SchemeError("axis values must be nonempty")
        if self.axis in ("delta", "gamma0", "Lambda", "beta0", "p0"):
            if any(v < 0 for v in self.values):
                raise SchemeError(f"axis {self.axis} values must be nonnegative")
        if self.axis == "I" and any(int(v) <= 0 for v in self.values):
            raise SchemeError("area counts must be positive")
        for s in self.schemes:
            (s if isinstance(s, Scheme) else Scheme(kind=str(s))).validate()
        return self


SWEEP_COLUMNS = ("scheme", "axis", "value", "replicate", "seed", "status", "profit",
                 "active_ens", "placements", "unmet_total", "mean_avg_delay",
                 "iterations", "wall_time", "prices", "storage_prices", "error")


def _instance_for(spec, value, replicate):
    seed = spec.base_seed + 7919 * replicate
    gen = replace(spec.gen, seed=seed)
    if spec.axis == "I":
        gen = replace(gen, I=int(value))
    inst = generate(gen)
    if spec.axis == "p0":
        inst = inst.copy()
        inst.p0 = float(value)
        inst.validate()
    elif spec.axis in ("delta", "gamma0", "Lambda", "beta0"):
        inst = apply_scale(inst, ScaleFactors(**{spec.axis: float(value)}))
    return inst, seed


def run_sweep(spec, on_row=None):
    """One row per (scheme, axis value, replicate); failures recorded, not raised."""
    spec.validate()
    rows = []
    for value in spec.values:
        for rep in range(spec.replicates):
            inst, seed = _instance_for(spec, value, rep)
            for sch in spec.schemes:
                sch = sch if isinstance(sch, Scheme) else Scheme(kind=str(sch))
                row = {"scheme": sch.kind, "axis": spec.axis, "value": value,
                       "replicate": rep, "seed": seed, "status": "", "profit": "",
                       "active_ens": "", "placements": "", "unmet_total": "",
                       "mean_avg_delay": "", "iterations": "", "wall_time": "",
                       "prices": "", "storage_prices": "", "error": ""}
                try:
                    outcome = solve_scheme(inst, sch, epsilon=spec.epsilon,
                                           backend=spec.backend,
                                           time_limit=spec.time_limit)
                    row["status"] = outcome.status
                    row["profit"] = outcome.profit
                    row["iterations"] = outcome.state.iteration
                    row["wall_time"] = round(outcome.state.wall_time, 3)
                    if outcome.leader is not None:
                        row["active_ens"] = sum(outcome.leader.z)
                        row["prices"] = "|".join(f"{p:g}" for p in outcome.leader.p)
                        row["storage_prices"] = "|".join(f"{p:g}" for p in outcome.leader.ps)
                    if outcome.solutions is not None:
                        row["placements"] = sum(sum(s.t) for s in outcome.solutions)
                        row["unmet_total"] = round(sum(sum(s.q) for s in outcome.solutions), 6)
                        delays = [d for s in outcome.solutions for d in s.avg_delay]
                        row["mean_avg_delay"] = round(sum(delays) / len(delays), 6) if delays else ""
                except Exception as exc:  # keep sweeping; the row carries the failure
                    row["status"] = "error"
                    row["error"] = str(exc)
                rows.append(row)
                if on_row is not None:
                    on_row(row)
    return rows


# -- closed-form size audit ----------------------------------------------


def audit_sizes(I, J, K, V, H, L, instance=None):
    """Build MP/SP1/SP2 symbolically and compare counts to the closed forms.

    Zero tolerance: every count must match exactly.  The report names the
    mismatching component and carries the built per-family row counts for
    diagnosis.
    """
    if min(I, J, K, V, H) <= 0 or L < 0:
        raise SchemeError("audit dimensions must be positive (L >= 0)")
    inst = instance
    if inst is None:
        grid_v = [round(0.01 * (v + 1), 6) for v in range(V)]
        grid_h = [round(0.005 * (h + 1), 6) for h in range(H)]
        gen = GenConfig(I=I, J=J, K=K, graph_size=max(100, I + J),
                        compute_grid=tuple(grid_v), storage_grid=tuple(grid_h), seed=0)
        inst = generate(gen)
    cuts = [Cut(l=l + 1, t_vectors=tuple(tuple((l + j) % 2 for j in range(J))
                                         for _ in range(K)))
            for l in range(L)]
    leader = LeaderDecision.from_prices(
        inst, [inst.p_grid[j][0] for j in range(J)],
        [inst.ps_grid[j][0] for j in range(J)], [1] * J)

    entries = []

    def compare(label, built_stats, formula_stats, families):
        for comp, built, want in (("constraints", built_stats.n_constraints, formula_stats.n_constraints),
                                  ("continuous", built_stats.n_continuous, formula_stats.n_continuous),
                                  ("binary", built_stats.n_binary, formula_stats.n_binary)):
            entries.append({"model": label, "component": comp, "built": built,
                            "formula": want, "match": built == want,
                            "families": families if comp == "constraints" else None})

    mp_bundle = build_master(inst, cuts)
    compare("MP", mp_bundle.model.stats(), mp_size(I, J, K, V, H, L),
            mp_bundle.model.family_counts())
    sp1_model = build_follower_milp(inst, 0, leader)
    compare("SP1", sp1_model.stats(), sp1_size(I, J), sp1_model.family_counts())
    sp2_model, _ = build_sp2(inst, leader, [inst.all_drop_cost(k) for k in range(K)],
                             service_blocks_only=True)
    compare("SP2", sp2_model.stats(), sp2_size(I, J, K), sp2_model.family_counts())

    ok = all(e["match"] for e in entries)
    return {"ok": ok, "dims": {"I": I, "J": J, "K": K, "V": V, "H": H, "L": L},
            "entries": entries}
