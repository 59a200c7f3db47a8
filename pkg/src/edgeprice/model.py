"""Solver-agnostic MILP construction layer.

Models are sparse collections of variables, linear constraints, and a
linear objective.  The module also provides the exact linearization
toolkit for products of binary and continuous variables (big-M based)
and binary-binary products (no big-M needed), plus a registry that
tracks the big-M constants used by each constraint family so their
validity can be audited after a solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

INF = math.inf

CONTINUOUS = "continuous"
BINARY = "binary"

SENSES = ("<=", ">=", "==")


class ModelError(ValueError):
    """Raised on malformed model construction (bad bounds, unknown vars, ...)."""


@dataclass
class VarDef:
    name: str
    kind: str = CONTINUOUS
    lb: float = 0.0
    ub: float = INF
    tag: str = ""

    def validate(self):
        if self.kind not in (CONTINUOUS, BINARY):
            raise ModelError(f"variable {self.name}: unknown kind {self.kind!r}")
        if self.kind == BINARY and (self.lb not in (0.0, 1.0) or self.ub not in (0.0, 1.0)):
            # fixing a binary inside {0,1} is allowed; widening is not
            raise ModelError(f"binary variable {self.name} must have bounds within {{0,1}}")
        if self.lb > self.ub:
            raise ModelError(f"variable {self.name}: lb {self.lb} > ub {self.ub}")


@dataclass
class LinearConstraint:
    coeffs: dict          # var index -> coefficient
    sense: str            # "<=", ">=", "=="
    rhs: float
    name: str = ""
    family: str = ""      # constraint-family identifier, used by stats and big-M audits


@dataclass
class ModelStats:
    n_constraints: int
    n_continuous: int
    n_binary: int

    def as_tuple(self):
        return (self.n_constraints, self.n_continuous, self.n_binary)


class Expr:
    """Sparse linear expression: coefficient map plus a constant term."""

    __slots__ = ("coeffs", "constant")

    def __init__(self, coeffs=None, constant=0.0):
        self.coeffs = dict(coeffs) if coeffs else {}
        self.constant = constant

    def add(self, idx, coef):
        if coef:
            self.coeffs[idx] = self.coeffs.get(idx, 0.0) + coef
        return self

    def add_expr(self, other, scale=1.0):
        for idx, coef in other.coeffs.items():
            self.add(idx, scale * coef)
        self.constant += scale * other.constant
        return self

    def value(self, x):
        return self.constant + sum(c * x[i] for i, c in self.coeffs.items())


class MilpModel:
    """Sparse MILP container with a name/tag registry and exact stats."""

    def __init__(self, name="model", sense="min"):
        if sense not in ("min", "max"):
            raise ModelError(f"objective sense must be min or max, got {sense!r}")
        self.name = name
        self.sense = sense
        self.variables: list[VarDef] = []
        self.constraints: list[LinearConstraint] = []
        self.objective: dict = {}
        self.objective_offset = 0.0
        self._by_name: dict = {}
        self._by_tag: dict = {}
        self._finalized = False

    # -- construction ------------------------------------------------

    def add_var(self, name, kind=CONTINUOUS, lb=0.0, ub=INF, tag=None):
        if self._finalized:
            raise ModelError("model is finalized")
        if name in self._by_name:
            raise ModelError(f"duplicate variable name {name!r}")
        if kind == BINARY:
            lb, ub = 0.0, 1.0
        tag = tag if tag is not None else name
        if tag in self._by_tag:
            raise ModelError(f"duplicate variable tag {tag!r}")
        v = VarDef(name=name, kind=kind, lb=float(lb), ub=float(ub), tag=tag)
        v.validate()
        idx = len(self.variables)
        self.variables.append(v)
        self._by_name[name] = idx
        self._by_tag[tag] = idx
        return idx

    def add_constraint(self, coeffs, sense, rhs, name="", family=""):
        if self._finalized:
            raise ModelError("model is finalized")
        if sense not in SENSES:
            raise ModelError(f"unknown constraint sense {sense!r}")
        if isinstance(coeffs, Expr):
            rhs = float(rhs) - coeffs.constant
            coeffs = coeffs.coeffs
        clean = {}
        for idx, coef in coeffs.items():
            if not (0 <= idx < len(self.variables)):
                raise ModelError(f"constraint {name!r} references undeclared variable {idx}")
            if coef:
                clean[idx] = clean.get(idx, 0.0) + float(coef)
        con = LinearConstraint(coeffs=clean, sense=sense, rhs=float(rhs),
                               name=name or f"c{len(self.constraints)}", family=family)
        self.constraints.append(con)
        return len(self.constraints) - 1

    def set_objective(self, coeffs, sense=None, offset=0.0):
        if sense is not None:
            if sense not in ("min", "max"):
                raise ModelError(f"objective sense must be min or max, got {sense!r}")
            self.sense = sense
        if isinstance(coeffs, Expr):
            offset = float(offset) + coeffs.constant
            coeffs = coeffs.coeffs
        for idx in coeffs:
            if not (0 <= idx < len(self.variables)):
                raise ModelError(f"objective references undeclared variable {idx}")
        self.objective = {i: float(c) for i, c in coeffs.items() if c}
        self.objective_offset = float(offset)

    def finalize(self):
        for v in self.variables:
            v.validate()
        self._finalized = True
        return self

    # -- queries -----------------------------------------------------

    @property
    def n_vars(self):
        return len(self.variables)

    @property
    def n_constraints(self):
        return len(self.constraints)

    def index_of(self, name):
        return self._by_name[name]

    def index_of_tag(self, tag):
        return self._by_tag[tag]

    def binary_indices(self):
        return [i for i, v in enumerate(self.variables) if v.kind == BINARY]

    def stats(self):
        n_bin = sum(1 for v in self.variables if v.kind == BINARY)
        return ModelStats(n_constraints=len(self.constraints),
                          n_continuous=len(self.variables) - n_bin,
                          n_binary=n_bin)

    def family_counts(self):
        counts = {}
        for con in self.constraints:
            counts[con.family] = counts.get(con.family, 0) + 1
        return counts

    def objective_value(self, x):
        val = self.objective_offset
        for idx, coef in self.objective.items():
            val += coef * x[idx]
        return val

    def constraint_activity(self, con, x):
        return sum(coef * x[idx] for idx, coef in con.coeffs.items())

    def max_violation(self, x):
        """Largest constraint/bound violation of a candidate point."""
        worst = 0.0
        for con in self.constraints:
            act = self.constraint_activity(con, x)
            if con.sense == "<=":
                worst = max(worst, act - con.rhs)
            elif con.sense == ">=":
                worst = max(worst, con.rhs - act)
            else:
                worst = max(worst, abs(act - con.rhs))
        for i, v in enumerate(self.variables):
            worst = max(worst, v.lb - x[i], x[i] - v.ub)
        return worst

    def clone(self):
        """Deep-enough copy: independent variables/constraints, shared nothing."""
        dup = MilpModel(self.name, self.sense)
        dup.variables = [VarDef(v.name, v.kind, v.lb, v.ub, v.tag) for v in self.variables]
        dup.constraints = [LinearConstraint(dict(c.coeffs), c.sense, c.rhs, c.name, c.family)
                           for c in self.constraints]
        dup.objective = dict(self.objective)
        dup.objective_offset = self.objective_offset
        dup._by_name = dict(self._by_name)
        dup._by_tag = dict(self._by_tag)
        dup._finalized = False
        return dup

    # -- debugging dump ----------------------------------------------

    def dump_lp(self):
        """Plain-text LP-style dump with deterministic ordering."""
        lines = [f"\\ model {self.name}", f"{'Minimize' if self.sense == 'min' else 'Maximize'}"]
        lines.append(" obj: " + _format_terms(self.objective, self.variables, self.objective_offset))
        lines.append("Subject To")
        for con in self.constraints:
            op = {"<=": "<=", ">=": ">=", "==": "="}[con.sense]
            lines.append(f" {con.name}: " + _format_terms(con.coeffs, self.variables) + f" {op} {con.rhs:.17g}")
        lines.append("Bounds")
        for v in self.variables:
            lo = "-inf" if v.lb == -INF else f"{v.lb:.17g}"
            hi = "+inf" if v.ub == INF else f"{v.ub:.17g}"
            lines.append(f" {lo} <= {v.name} <= {hi}")
        binaries = [v.name for v in self.variables if v.kind == BINARY]
        if binaries:
            lines.append("Binaries")
            lines.append(" " + " ".join(binaries))
        lines.append("End")
        return "\n".join(lines) + "\n"


def _format_terms(coeffs, variables, offset=0.0):
    parts = []
    for idx in sorted(coeffs):
        coef = coeffs[idx]
        sign = "-" if coef < 0 else "+"
        parts.append(f"{sign} {abs(coef):.17g} {variables[idx].name}")
    if offset:
        sign = "-" if offset < 0 else "+"
        parts.append(f"{sign} {abs(offset):.17g}")
    if not parts:
        return "0"
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


class BigMRegistry:
    """Big-M bookkeeping per constraint family, with post-solve validation.

    Every linearization family built into a model must be registered here,
    together with the variable indices whose values are capped by that M.
    After a solve, ``validate`` flags any watched variable that reached
    0.99*M, which is the symptom of an M chosen too small (the linearized
    model may then be cutting off genuinely feasible points).
    """

    FLAG_RATIO = 0.99

    def __init__(self, default_policy=None):
        self.entries = {}           # family -> (M, [watched var indices])
        self.default_policy = default_policy or default_dual_bound
        self.flags = {}             # family -> dict with max value / ratio after validate()

    def register(self, family, M, watch=()):
        if M <= 0:
            raise ModelError(f"big-M for family {family!r} must be positive, got {M}")
        if family in self.entries:
            old_m, old_watch = self.entries[family]
            if abs(old_m - M) > 1e-12 * max(1.0, abs(M)):
                raise ModelError(f"family {family!r} registered twice with different M")
            self.entries[family] = (old_m, list(old_watch) + list(watch))
        else:
            self.entries[family] = (float(M), list(watch))
        return float(M)

    def get(self, family):
        if family not in self.entries:
            raise ModelError(f"big-M registry has no entry for family {family!r}")
        return self.entries[family][0]

    def derive(self, family, *args, watch=(), **kwargs):
        """Register a family using the default heuristic bound policy."""
        return self.register(family, self.default_policy(*args, **kwargs), watch=watch)

    def validate(self, values):
        """Record, per family, how close watched variables came to M."""
        self.flags = {}
        for family, (M, watch) in self.entries.items():
            worst = 0.0
            for idx in watch:
                worst = max(worst, abs(values[idx]))
            ratio = worst / M if M else INF
            self.flags[family] = {"M": M, "max_value": worst, "ratio": ratio,
                                  "flagged": ratio >= self.FLAG_RATIO}
        return self.flags

    def flagged_families(self):
        return sorted(f for f, rec in self.flags.items() if rec["flagged"])


def default_dual_bound(max_price, max_demand, factor=1e4):
    """Default big-M for dual-side variables: 1e4 * (max price * max demand).

    The underlying formulation gives no usable finite bound for the dual
    variables, so this is deliberately generous; the registry's 0.99*M
    validation turns a too-small choice into a diagnosable event.
    """
    base = max(max_price * max_demand, 1e-6)
    return factor * base


# -- linearization toolkit -------------------------------------------


def link_bin_cont(model, u, b, M, name=None, family="link_bin_cont", registry=None):
    """Add U with U = u*b enforced linearly; returns the index of U.

    Constraints: U <= M*b, U <= u + M - M*b, U >= u + M*b - M, with
    U >= 0 carried by the variable's lower bound.  Exact whenever
    0 <= u <= M, hence the guard on u's declared upper bound.
    """
    if M <= 0:
        raise ModelError(f"link_bin_cont requires M > 0, got {M}")
    uvar = model.variables[u]
    bvar = model.variables[b]
    if bvar.kind != BINARY:
        raise ModelError(f"link_bin_cont partner {bvar.name} is not binary")
    if uvar.ub > M:
        raise ModelError(
            f"link_bin_cont: variable {uvar.name} has upper bound {uvar.ub} > M={M}; "
            "the linearization would cut off feasible points")
    if uvar.lb < 0:
        raise ModelError(f"link_bin_cont requires a nonnegative variable, {uvar.name} has lb {uvar.lb}")
    name = name or f"link[{uvar.name}*{bvar.name}]"
    U = model.add_var(name, CONTINUOUS, lb=0.0, ub=M, tag=name)
    model.add_constraint({U: 1.0, b: -M}, "<=", 0.0, name=f"{name}:ub_bin", family=family)
    model.add_constraint({U: 1.0, u: -1.0, b: M}, "<=", M, name=f"{name}:ub_cont", family=family)
    model.add_constraint({U: 1.0, u: -1.0, b: -M}, ">=", -M, name=f"{name}:lb", family=family)
    if registry is not None:
        registry.register(family, M, watch=[u])
    return U


def link_bin_bin(model, b1, b2, name=None, family="link_bin_bin"):
    """Add Z with Z = b1*b2 enforced linearly (no big-M); returns Z's index."""
    for b in (b1, b2):
        if model.variables[b].kind != BINARY:
            raise ModelError(f"link_bin_bin argument {model.variables[b].name} is not binary")
    v1, v2 = model.variables[b1], model.variables[b2]
    name = name or f"and[{v1.name}*{v2.name}]"
    Z = model.add_var(name, CONTINUOUS, lb=0.0, ub=1.0, tag=name)
    model.add_constraint({Z: 1.0, b1: -1.0}, "<=", 0.0, name=f"{name}:le1", family=family)
    model.add_constraint({Z: 1.0, b2: -1.0}, "<=", 0.0, name=f"{name}:le2", family=family)
    model.add_constraint({Z: 1.0, b1: -1.0, b2: -1.0}, ">=", -1.0, name=f"{name}:ge", family=family)
    return Z


def expand_price_product(model, prices, selectors, partner, M=None, name=None,
                         family="price_product", registry=None):
    """Exact linear expression for (sum_v price_v * r_v) * w.

    ``selectors`` are the one-hot binaries r_v (a sum-to-one constraint over
    exactly these variables must already be in the model); ``partner`` is w,
    either binary (no M needed) or nonnegative continuous with ub <= M.
    Returns an Expr equal to the product at every feasible point.
    """
    if len(prices) == 0:
        raise ModelError("expand_price_product: empty price grid")
    if len(prices) != len(selectors):
        raise ModelError("expand_price_product: grid and selector lengths differ")
    sel_set = set(selectors)
    for con in model.constraints:
        if con.sense == "==" and abs(con.rhs - 1.0) < 1e-12:
            if set(con.coeffs) == sel_set and all(abs(c - 1.0) < 1e-12 for c in con.coeffs.values()):
                break
    else:
        raise ModelError("expand_price_product: no sum-to-one constraint found over the selectors")
    partner_var = model.variables[partner]
    name = name or f"prod[{partner_var.name}]"
    expr = Expr()
    for v, (price, r) in enumerate(zip(prices, selectors)):
        if partner_var.kind == BINARY:
            linked = link_bin_bin(model, r, partner, name=f"{name}:{v}", family=family)
        else:
            if M is None:
                raise ModelError("expand_price_product: M required for a continuous partner")
            linked = link_bin_cont(model, partner, r, M, name=f"{name}:{v}",
                                   family=family, registry=registry)
        expr.add(linked, price)
    return expr


def model_stats(model):
    """Exact (n_constraints, n_continuous, n_binary) counts."""
    return model.stats()
