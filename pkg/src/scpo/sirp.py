"""Scenario-based stochastic inventory routing.

Two exact formulations over a scenario set (shared-plan and two-stage) plus
the machinery that actually solves them at scale:

* exact MILP builders (test oracles at tiny sizes) with MTZ subtour
  elimination;
* a three-MILP matheuristic: a giant-tour-restricted aggregated model
  (MILP1), an insertion/removal exchange model (MILP2), and a fixed-order
  subsequence model (MILP3), interleaved with TSP/CVRP re-optimization;
* progressive hedging over single-scenario subproblems with linearized
  delivery penalties, consensus averaging, adaptive penalty weights, and
  route freezing once scenarios agree on the first-period routing.

Deliveries are continuous; routing is binary.  Inventory enters the models
as affine expressions of the deliveries, split into weighted positive and
negative parts for the holding/backorder objective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Instance, Plan, route_distance
from .forecast import ScenarioSet
from .milp import (
    FEASIBLE,
    OPTIMAL,
    TIME_LIMIT,
    MilpModel,
    add_abs_linearization,
    add_pospart_linearization,
    solve_milp,
)
from .routing import (
    RoutingInfeasible,
    cvrp_solve,
    insertion_cost,
    removal_gain,
    tour_length,
    tsp_solve,
)

SOLUTION_FORMAT = "scpo-solution-v1"


@dataclass(frozen=True)
class SirpProblem:
    """A lookahead-horizon stochastic inventory routing problem."""

    instance: Instance
    inventories: np.ndarray          # current per-retailer inventory (N,)
    scenarios: ScenarioSet

    def __post_init__(self):
        inv = np.asarray(self.inventories, dtype=float)
        object.__setattr__(self, "inventories", inv)
        if inv.shape != (self.instance.n_retailers,):
            raise ValueError("inventories must have one entry per retailer")
        if self.scenarios.n_retailers != self.instance.n_retailers:
            raise ValueError("scenario retailer count mismatch")

    @property
    def lookahead(self) -> int:
        return self.scenarios.horizon

    @property
    def big_m(self) -> float:
        return float(min(self.instance.vehicle_capacity, self.instance.inv_capacity))

    def edge_cost(self, i: int, j: int) -> float:
        return self.instance.transport_scale * self.instance.dist(i, j)

    def restrict(self, scenario_index: int) -> "SirpProblem":
        return SirpProblem(self.instance, self.inventories,
                           ScenarioSet.single(self.scenarios.scenarios[scenario_index]))

    def cumulative_demand(self) -> np.ndarray:
        """cum[w, i, t] = demand of retailer i summed over periods < t."""
        S, N, ell = len(self.scenarios), self.instance.n_retailers, self.lookahead
        cum = np.zeros((S, N, ell + 1))
        for w, sc in enumerate(self.scenarios.scenarios):
            cum[w, :, 1:] = np.cumsum(sc, axis=1)
        return cum

    def delivery_bound(self, i: int, t: int, scenario: int | None = None) -> float:
        """Tightest a-priori bound on one delivery to retailer i (0-based)
        in period t: fleet/shelf capacity, less the shelf headroom that the
        stingiest scenario (or the given one) leaves once earlier demand
        has cleared."""
        cached = getattr(self, "_cum_cache", None)
        if cached is None:
            cached = self.cumulative_demand()
            object.__setattr__(self, "_cum_cache", cached)
        cleared = (cached[:, i, t].min() if scenario is None
                   else cached[scenario, i, t])
        head = (self.instance.inv_capacity - float(self.inventories[i]) +
                float(cleared))
        return max(0.0, min(self.big_m, head))


@dataclass
class IrpSolution:
    """Routes and deliveries over the lookahead horizon.

    `routes[t][v]` is the ordered retailer sequence of vehicle v in period t
    (possibly empty); `deliveries[v, i, t]` the matching quantities.
    """

    routes: list[list[tuple[int, ...]]]
    deliveries: np.ndarray               # (V, N, ell)
    objective: float
    transport: float
    holding: float
    backorder: float
    status: str = OPTIMAL
    pha_trace: list[dict] = field(default_factory=list)

    def total_deliveries(self) -> np.ndarray:
        return self.deliveries.sum(axis=0)

    def plan(self) -> Plan:
        first = [tuple(int(i) for i in r) for r in self.routes[0] if r]
        u0 = np.maximum(self.deliveries[:, :, 0].sum(axis=0), 0.0)
        visited = {i for r in first for i in r}
        for i in range(u0.shape[0]):
            if i + 1 not in visited:
                u0[i] = 0.0  # solver tolerance can leave dust here
        return Plan(routes=tuple(first), deliveries=u0)

    def to_json(self) -> str:
        return json.dumps({
            "format": SOLUTION_FORMAT,
            "routes": [[list(r) for r in period] for period in self.routes],
            "deliveries": [[[round(float(x), 9) for x in row] for row in veh]
                           for veh in self.deliveries],
            "objective": self.objective,
            "costs": {"transport": self.transport, "holding": self.holding,
                      "backorder": self.backorder},
            "status": self.status,
            "pha_trace": self.pha_trace,
        })


def evaluate_solution(problem: SirpProblem, routes, total_deliveries) -> tuple[float, float, float]:
    """(transport, expected holding, expected backorder) of a shared plan."""
    inst = problem.instance
    transport = 0.0
    for period in routes:
        for r in period:
            if r:
                transport += inst.transport_scale * route_distance(r, inst)
    hold = back = 0.0
    U = np.asarray(total_deliveries, dtype=float)
    for p, sc in zip(problem.scenarios.probabilities, problem.scenarios.scenarios):
        inv = problem.inventories.copy()
        for t in range(problem.lookahead):
            inv = inv + U[:, t] - sc[:, t]
            hold += p * inst.holding_cost * float(np.maximum(inv, 0.0).sum())
            back += p * inst.backorder_cost * float(-np.minimum(inv, 0.0).sum())
    return transport, hold, back


# ---------------------------------------------------------------------------
# Exact formulations (oracle scale, MTZ subtour elimination)
# ---------------------------------------------------------------------------

def _all_nodes(n: int) -> list[int]:
    return list(range(n + 1))  # 0 is the warehouse


def _add_inventory_terms(model: MilpModel, problem: SirpProblem, u_expr,
                         tag: str):
    """Attach expected holding/backorder costs and per-scenario caps.

    `u_expr(i, t)` yields {var: coeff} for the total delivery to retailer i
    in period t (scenario-specific variables are handled by the caller
    passing a scenario-aware expression).  Returns the (pos, neg) index maps.
    """
    inst = problem.instance
    N, ell = inst.n_retailers, problem.lookahead
    cum = problem.cumulative_demand()
    pos_map, neg_map = {}, {}
    for w, p in enumerate(problem.scenarios.probabilities):
        for i in range(N):
            for t in range(ell):
                expr = {}
                for tau in range(t + 1):
                    for var, coeff in u_expr(i, tau, w).items():
                        expr[var] = expr.get(var, 0.0) + coeff
                const = float(problem.inventories[i] - cum[w, i, t + 1])
                pos, neg = add_pospart_linearization(
                    model, expr, const, p * inst.holding_cost,
                    p * inst.backorder_cost, f"{tag}_i{i}t{t}w{w}")
                pos_map[(i, t, w)] = pos
                neg_map[(i, t, w)] = neg
    return pos_map, neg_map


def _add_inventory_caps(model: MilpModel, problem: SirpProblem, u_var,
                        u_expr, scenario_of_var=None):
    """u <= I^max - inventory, for every scenario.

    `u_var(i, v, t)` is the single delivery variable the cap applies to;
    `u_expr(i, tau, w)` the total-delivery expression as above.  When the
    delivery variables are scenario-indexed, `scenario_of_var` restricts
    each cap row to that scenario.
    """
    inst = problem.instance
    N, ell = inst.n_retailers, problem.lookahead
    V = inst.n_vehicles
    cum = problem.cumulative_demand()
    for i in range(N):
        for v in range(V):
            for t in range(ell):
                for w in range(len(problem.scenarios)):
                    if scenario_of_var is not None and scenario_of_var != w:
                        continue
                    var = u_var(i, v, t, w)
                    if var is None:
                        continue
                    expr = {var: 1.0}
                    for tau in range(t):
                        for vv, coeff in u_expr(i, tau, w).items():
                            expr[vv] = expr.get(vv, 0.0) + coeff
                    rhs = float(inst.inv_capacity - problem.inventories[i]
                                + cum[w, i, t])
                    model.add_constraint(expr, "<=", rhs)


def build_ss(problem: SirpProblem) -> tuple[MilpModel, dict]:
    """Shared-plan formulation: one set of routes/deliveries, inventory
    tracked per scenario."""
    inst = problem.instance
    N, V, ell = inst.n_retailers, inst.n_vehicles, problem.lookahead
    nodes = _all_nodes(N)
    M = problem.big_m
    model = MilpModel()
    z = {}
    for t in range(ell):
        for v in range(V):
            for i in nodes:
                for j in nodes:
                    if i != j:
                        z[(i, j, v, t)] = model.add_var(
                            f"z_{i}_{j}_v{v}t{t}", "binary")
    u = {}
    for i in range(N):
        for v in range(V):
            for t in range(ell):
                u[(i, v, t)] = model.add_var(f"u_{i+1}_v{v}t{t}", "continuous",
                                             lb=0.0,
                                             ub=problem.delivery_bound(i, t))
    # MTZ ordering variables (one per retailer/vehicle/period).
    w_ord = {}
    for i in range(1, N + 1):
        for v in range(V):
            for t in range(ell):
                w_ord[(i, v, t)] = model.add_var(f"ord_{i}_v{v}t{t}",
                                                 "continuous", lb=1.0, ub=float(N))

    obj = {var: problem.edge_cost(i, j) for (i, j, v, t), var in z.items()}
    model.add_objective(obj)

    for t in range(ell):
        for v in range(V):
            out0 = {z[(0, j, v, t)]: 1.0 for j in range(1, N + 1)}
            in0 = {z[(j, 0, v, t)]: 1.0 for j in range(1, N + 1)}
            model.add_constraint(out0, "<=", 1.0)
            model.add_constraint({**out0, **{k: -v_ for k, v_ in in0.items()}}, "=", 0.0)
            for i in range(1, N + 1):
                outi = {z[(i, j, v, t)]: 1.0 for j in nodes if j != i}
                ini = {z[(j, i, v, t)]: 1.0 for j in nodes if j != i}
                expr = dict(outi)
                for k, c in ini.items():
                    expr[k] = expr.get(k, 0.0) - c
                model.add_constraint(expr, "=", 0.0)
        for i in range(1, N + 1):
            visit = {z[(i, j, v, t)]: 1.0 for v in range(V)
                     for j in nodes if j != i}
            model.add_constraint(visit, "<=", 1.0)
        for i in range(N):
            m_it = problem.delivery_bound(i, t)
            for v in range(V):
                expr = {u[(i, v, t)]: 1.0}
                for j in nodes:
                    if j != i + 1:
                        expr[z[(i + 1, j, v, t)]] = -m_it
                model.add_constraint(expr, "<=", 0.0)
        for v in range(V):
            model.add_constraint({u[(i, v, t)]: 1.0 for i in range(N)},
                                 "<=", float(inst.vehicle_capacity))
        # Subtour elimination (MTZ) among retailers.
        for v in range(V):
            for i in range(1, N + 1):
                for j in range(1, N + 1):
                    if i != j:
                        model.add_constraint(
                            {w_ord[(i, v, t)]: 1.0, w_ord[(j, v, t)]: -1.0,
                             z[(i, j, v, t)]: float(N)}, "<=", float(N - 1))

    def u_expr(i, tau, w):
        return {u[(i, v, tau)]: 1.0 for v in range(V)}

    _add_inventory_caps(model, problem, lambda i, v, t, w: u[(i, v, t)], u_expr)
    pos, neg = _add_inventory_terms(model, problem, u_expr, "inv")
    return model, {"z": z, "u": u, "ord": w_ord, "inv_pos": pos, "inv_neg": neg}


def build_os(problem: SirpProblem, scenario_index: int) -> tuple[MilpModel, dict]:
    """Single-scenario formulation: the shared-plan model on one scenario."""
    return build_ss(problem.restrict(scenario_index))


def build_ts(problem: SirpProblem) -> tuple[MilpModel, dict]:
    """Two-stage formulation: scenario-indexed routes/deliveries tied
    together in the first period by shared consensus variables."""
    inst = problem.instance
    N, V, ell = inst.n_retailers, inst.n_vehicles, problem.lookahead
    S = len(problem.scenarios)
    nodes = _all_nodes(N)
    M = problem.big_m
    model = MilpModel()
    z, u, w_ord = {}, {}, {}
    for w in range(S):
        for t in range(ell):
            for v in range(V):
                for i in nodes:
                    for j in nodes:
                        if i != j:
                            z[(i, j, v, t, w)] = model.add_var(
                                f"z_{i}_{j}_v{v}t{t}w{w}", "binary")
                for i in range(1, N + 1):
                    w_ord[(i, v, t, w)] = model.add_var(
                        f"ord_{i}_v{v}t{t}w{w}", "continuous", lb=1.0, ub=float(N))
        for i in range(N):
            for v in range(V):
                for t in range(ell):
                    u[(i, v, t, w)] = model.add_var(
                        f"u_{i+1}_v{v}t{t}w{w}", "continuous", lb=0.0,
                        ub=problem.delivery_bound(i, t, w))
    ubar = {(i, v): model.add_var(f"ubar_{i+1}_v{v}", "continuous", lb=0.0,
                                  ub=problem.delivery_bound(i, 0))
            for i in range(N) for v in range(V)}
    zbar = {(i, j, v): model.add_var(f"zbar_{i}_{j}_v{v}", "binary")
            for i in nodes for j in nodes if i != j for v in range(V)}

    probs = problem.scenarios.probabilities
    obj = {var: probs[w] * problem.edge_cost(i, j)
           for (i, j, v, t, w), var in z.items()}
    model.add_objective(obj)

    for w in range(S):
        for t in range(ell):
            for v in range(V):
                out0 = {z[(0, j, v, t, w)]: 1.0 for j in range(1, N + 1)}
                in0 = {z[(j, 0, v, t, w)]: 1.0 for j in range(1, N + 1)}
                model.add_constraint(out0, "<=", 1.0)
                expr = dict(out0)
                for k, c in in0.items():
                    expr[k] = expr.get(k, 0.0) - c
                model.add_constraint(expr, "=", 0.0)
                for i in range(1, N + 1):
                    expr = {z[(i, j, v, t, w)]: 1.0 for j in nodes if j != i}
                    for j in nodes:
                        if j != i:
                            expr[z[(j, i, v, t, w)]] = expr.get(
                                z[(j, i, v, t, w)], 0.0) - 1.0
                    model.add_constraint(expr, "=", 0.0)
            for i in range(1, N + 1):
                visit = {z[(i, j, v, t, w)]: 1.0 for v in range(V)
                         for j in nodes if j != i}
                model.add_constraint(visit, "<=", 1.0)
            for i in range(N):
                m_it = problem.delivery_bound(i, t, w)
                for v in range(V):
                    expr = {u[(i, v, t, w)]: 1.0}
                    for j in nodes:
                        if j != i + 1:
                            expr[z[(i + 1, j, v, t, w)]] = -m_it
                    model.add_constraint(expr, "<=", 0.0)
            for v in range(V):
                model.add_constraint({u[(i, v, t, w)]: 1.0 for i in range(N)},
                                     "<=", float(inst.vehicle_capacity))
            for v in range(V):
                for i in range(1, N + 1):
                    for j in range(1, N + 1):
                        if i != j:
                            model.add_constraint(
                                {w_ord[(i, v, t, w)]: 1.0,
                                 w_ord[(j, v, t, w)]: -1.0,
                                 z[(i, j, v, t, w)]: float(N)}, "<=", float(N - 1))
        # First-period decisions must match the shared variables.
        for i in range(N):
            for v in range(V):
                model.add_constraint({u[(i, v, 0, w)]: 1.0, ubar[(i, v)]: -1.0},
                                     "=", 0.0)
        for (i, j, v), var in zbar.items():
            model.add_constraint({z[(i, j, v, 0, w)]: 1.0, var: -1.0}, "=", 0.0)

    pos_map, neg_map = {}, {}
    for w in range(S):
        def u_expr(i, tau, ww, w=w):
            return {u[(i, v, tau, w)]: 1.0 for v in range(V)}
        _add_inventory_caps(model, problem,
                            lambda i, v, t, ww, w=w: u[(i, v, t, w)] if ww == w else None,
                            u_expr, scenario_of_var=None)
        # Inventory cost terms for this scenario only.
        restricted = [(w, problem.scenarios.probabilities[w])]
        inst_ = problem.instance
        cum = problem.cumulative_demand()
        for i in range(N):
            for t in range(ell):
                expr = {}
                for tau in range(t + 1):
                    for var, coeff in u_expr(i, tau, w).items():
                        expr[var] = expr.get(var, 0.0) + coeff
                const = float(problem.inventories[i] - cum[w, i, t + 1])
                p = float(probs[w])
                pos, negv = add_pospart_linearization(
                    model, expr, const, p * inst_.holding_cost,
                    p * inst_.backorder_cost, f"ts_i{i}t{t}w{w}")
                pos_map[(i, t, w)] = pos
                neg_map[(i, t, w)] = negv
    return model, {"z": z, "u": u, "ord": w_ord, "ubar": ubar, "zbar": zbar,
                   "inv_pos": pos_map, "inv_neg": neg_map}


def _routes_from_arcs(arcs: dict[int, int]) -> tuple[int, ...]:
    """Follow successor pointers from the warehouse; returns retailer order."""
    seq = []
    node = 0
    seen = set()
    while True:
        nxt = arcs.get(node)
        if nxt is None or nxt == 0:
            break
        if nxt in seen:  # defensive: malformed arc set
            break
        seq.append(nxt)
        seen.add(nxt)
        node = nxt
    return tuple(seq)


def solution_from_exact(problem: SirpProblem, vm: dict, assignment: np.ndarray,
                        scenario_index: int | None = None) -> IrpSolution:
    """Decode an exact-model assignment into routes and deliveries.

    For the two-stage model pass `scenario_index` to choose which scenario's
    variables to read beyond the shared first period.
    """
    inst = problem.instance
    N, V, ell = inst.n_retailers, inst.n_vehicles, problem.lookahead
    routes = []
    deliveries = np.zeros((V, N, ell))
    for t in range(ell):
        period = []
        for v in range(V):
            arcs = {}
            for i in _all_nodes(N):
                for j in _all_nodes(N):
                    if i == j:
                        continue
                    key = (i, j, v, t) if scenario_index is None else (i, j, v, t, scenario_index)
                    var = vm["z"].get(key)
                    if var is not None and assignment[var] > 0.5:
                        arcs[i] = j
            period.append(_routes_from_arcs(arcs))
            for i in range(N):
                key = (i, v, t) if scenario_index is None else (i, v, t, scenario_index)
                var = vm["u"].get(key)
                if var is not None:
                    deliveries[v, i, t] = max(0.0, float(assignment[var]))
        routes.append(period)
    transport, hold, back = evaluate_solution(problem, routes,
                                              deliveries.sum(axis=0))
    return IrpSolution(routes, deliveries, transport + hold + back,
                       transport, hold, back)


# ---------------------------------------------------------------------------
# Matheuristic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Penalties:
    """Linearized first-period delivery penalties for progressive hedging."""

    lam: np.ndarray       # (N, V) per-vehicle weights
    lam_agg: np.ndarray   # (N,) aggregated weights for the vehicle-free model
    ubar: np.ndarray      # (N, V) consensus deliveries

    def ubar_total(self) -> np.ndarray:
        return self.ubar.sum(axis=1)


def _best_order(current: tuple[int, ...], dist) -> tuple[int, ...]:
    """Re-optimize a route order, never returning something longer."""
    if len(current) <= 1:
        return tuple(current)
    tour = tsp_solve(list(current), dist)
    if tour.length <= tour_length(list(current), dist) + 1e-12:
        return tuple(tour.sequence)
    return tuple(current)


def _solve_step(model: MilpModel, tag: str):
    sol = solve_milp(model)
    if sol.status in (OPTIMAL, FEASIBLE, TIME_LIMIT) and sol.x is not None:
        return sol
    raise RuntimeError(f"{tag} failed with status {sol.status}")


def _pospart_values(inv0: float, cum_u: float, cum_d: float) -> tuple[float, float]:
    val = inv0 + cum_u - cum_d
    return max(val, 0.0), max(-val, 0.0)


def _milp1_greedy_plan(problem: SirpProblem, giant, frozen_first, penalties):
    """Just-in-time warm plan: each period tops cumulative deliveries up to
    the critical-ratio quantile of cumulative scenario demand (clipped to
    every scenario's shelf headroom and the fleet capacity), so holding and
    backorder risk are balanced the way a per-retailer newsvendor would.
    With consensus penalties the first period tracks the consensus
    quantities instead."""
    inst = problem.instance
    N, V, ell = inst.n_retailers, inst.n_vehicles, problem.lookahead
    M, Q = problem.big_m, float(inst.vehicle_capacity)
    cum = problem.cumulative_demand()
    min_cum = cum.min(axis=0)
    ratio = inst.backorder_cost / (inst.backorder_cost + inst.holding_cost)
    need_cum = np.quantile(cum, ratio, axis=0)        # (N, ell+1)
    target = penalties.ubar_total() if penalties is not None else None
    g_u = np.zeros((N, ell))
    visits: list[set] = [set() for _ in range(ell)]
    for t in range(ell):
        if frozen_first is not None and t == 0:
            forced = {i for r in frozen_first for i in r}
            budget = Q * sum(1 for r in frozen_first if r)
        else:
            forced = None
            budget = Q * V
        for i in giant:
            k = i - 1
            if forced is not None and i not in forced:
                continue
            inv0 = float(problem.inventories[k])
            cumu = float(g_u[k, :t].sum())
            cap = float(inst.inv_capacity) - inv0 + float(min_cum[k, t]) - cumu
            if target is not None and t == 0:
                want = float(target[k])
            else:
                want = float(need_cum[k, t + 1]) - inv0 - cumu
            qty = max(0.0, min(want, cap, M, budget))
            if forced is None and qty <= 1e-9:
                continue
            visits[t].add(i)
            g_u[k, t] = qty
            budget -= qty
    return g_u, visits


def _assemble_warm(model, problem, giant, pos_in_giant, z, u, pos, neg,
                   pen_vars, penalties, frozen_first, plan_u, plan_visits,
                   cum):
    """Turn a delivery plan into a full variable assignment: walk the visit
    sets as giant-tour-ordered chains (frozen routes verbatim in period 0),
    then fill the inventory and penalty linearization variables."""
    inst = problem.instance
    V, ell = inst.n_vehicles, problem.lookahead
    Q = float(inst.vehicle_capacity)
    warm = {var: 0.0 for var in range(model.n_vars)}
    for t in range(ell):
        if frozen_first is not None and t == 0:
            routes = [sorted(r, key=lambda n: pos_in_giant[n])
                      for r in frozen_first if r]
        else:
            seq = [i for i in giant if i in plan_visits[t]]
            if not seq:
                routes = []
            else:
                load = float(sum(plan_u[i - 1, t] for i in seq))
                chunks = min(V, max(1, math.ceil(load / Q - 1e-9)))
                routes = [list(part) for part in
                          np.array_split(np.array(seq, dtype=int), chunks)
                          if len(part)]
        for route in routes:
            prev = 0
            for node in route:
                key = z[(prev, int(node), t)]
                warm[key] = warm.get(key, 0.0) + 1.0
                prev = int(node)
            warm[z[(prev, 0, t)]] += 1.0
    for (i, t), var in u.items():
        warm[var] = float(plan_u[i - 1, t])
    for (i, t, w), var in pos.items():
        pz, nz = _pospart_values(float(problem.inventories[i]),
                                 float(plan_u[i, :t + 1].sum()),
                                 float(cum[w, i, t + 1]))
        warm[var] = pz
        warm[neg[(i, t, w)]] = nz
    if penalties is not None:
        target = penalties.ubar_total()
        for i, (mu, nu) in pen_vars.items():
            pz, nz = _pospart_values(0.0, float(plan_u[i - 1, 0]),
                                     float(target[i - 1]))
            warm[mu], warm[nu] = pz, nz
    return warm


def _milp1(problem: SirpProblem, giant: tuple[int, ...], penalties,
           frozen_first, time_limit: float, gap: float):
    """Vehicle-aggregated model over giant-tour-ordered arcs.

    Arcs only run forward along the giant tour (plus depot arcs both ways),
    so subtours cannot form and no elimination constraints are needed.
    """
    inst = problem.instance
    N, V, ell = inst.n_retailers, inst.n_vehicles, problem.lookahead
    M = problem.big_m
    pos_in_giant = {node: idx for idx, node in enumerate(giant)}
    after = {i: [j for j in giant if pos_in_giant[j] > pos_in_giant[i]] + [0]
             for i in giant}
    before = {i: [j for j in giant if pos_in_giant[j] < pos_in_giant[i]] + [0]
              for i in giant}

    model = MilpModel()
    z = {}
    for t in range(ell):
        for i in giant:
            for j in after[i]:
                kind = "binary" if j != 0 else "integer"
                z[(i, j, t)] = model.add_var(f"z_{i}_{j}_t{t}", kind,
                                             lb=0.0, ub=1.0)
        for j in giant:
            z[(0, j, t)] = model.add_var(f"z_0_{j}_t{t}", "integer",
                                         lb=0.0, ub=float(V))
    u = {(i, t): model.add_var(f"u_{i}_t{t}", "continuous", lb=0.0,
                               ub=problem.delivery_bound(i - 1, t))
         for i in giant for t in range(ell)}

    obj = {var: problem.edge_cost(i, j) for (i, j, t), var in z.items()}
    model.add_objective(obj)

    for t in range(ell):
        out0 = {z[(0, j, t)]: 1.0 for j in giant}
        in0 = {z[(i, 0, t)]: 1.0 for i in giant}
        model.add_constraint(out0, "<=", float(V))
        expr = dict(out0)
        for k, c in in0.items():
            expr[k] = expr.get(k, 0.0) - c
        model.add_constraint(expr, "=", 0.0)
        for i in giant:
            flow = {z[(i, j, t)]: 1.0 for j in after[i]}
            for j in before[i]:
                key = (j, i, t)
                flow[z[key]] = flow.get(z[key], 0.0) - 1.0
            model.add_constraint(flow, "=", 0.0)
            model.add_constraint({z[(i, j, t)]: 1.0 for j in after[i]}, "<=", 1.0)
            m_it = problem.delivery_bound(i - 1, t)
            expr = {u[(i, t)]: 1.0}
            for j in after[i]:
                expr[z[(i, j, t)]] = -m_it
            model.add_constraint(expr, "<=", 0.0)
        cap = {u[(i, t)]: 1.0 for i in giant}
        for j in giant:
            cap[z[(0, j, t)]] = -float(inst.vehicle_capacity)
        model.add_constraint(cap, "<=", 0.0)

    if frozen_first is not None:
        visited = {i for r in frozen_first for i in r}
        n_routes = sum(1 for r in frozen_first if r)
        for i in giant:
            target = 1.0 if i in visited else 0.0
            model.add_constraint({z[(i, j, 0)]: 1.0 for j in after[i]},
                                 "=", target)
        model.add_constraint({z[(0, j, 0)]: 1.0 for j in giant}, "=",
                             float(n_routes))

    def u_expr(i, tau, w):
        return {u[(i, tau)]: 1.0} if (i, tau) in u else {}

    _add_inventory_caps(model, problem,
                        lambda i, v, t, w: u[(i + 1, t)] if v == 0 and (i + 1, t) in u else None,
                        lambda i, tau, w: u_expr(i + 1, tau, w))
    pos, neg = _add_inventory_terms(model, problem,
                                    lambda i, tau, w: u_expr(i + 1, tau, w), "m1")

    pen_vars = {}
    if penalties is not None:
        target = penalties.ubar_total()
        for i in giant:
            pen_vars[i] = add_abs_linearization(
                model, {u[(i, 0)]: 1.0}, -float(target[i - 1]),
                float(penalties.lam_agg[i - 1]), f"pen_{i}")

    cum = problem.cumulative_demand()
    g_u, g_visits = _milp1_greedy_plan(problem, giant, frozen_first, penalties)
    zero_visits = [set() if frozen_first is None or t > 0
                   else {i for r in frozen_first for i in r}
                   for t in range(ell)]
    for plan_u, plan_visits in ((g_u, g_visits),
                                (np.zeros((N, ell)), zero_visits)):
        warm = _assemble_warm(model, problem, giant, pos_in_giant, z, u,
                              pos, neg, pen_vars, penalties, frozen_first,
                              plan_u, plan_visits, cum)
        x = np.zeros(model.n_vars)
        for var, val in warm.items():
            x[var] = val
        if model.max_violation(x) <= 1e-7:
            break
    model.warm_start = warm
    model.time_limit = time_limit
    model.gap_tol = gap
    sol = _solve_step(model, "aggregated routing model")
    u_val = np.zeros((N, ell))
    visited = [set() for _ in range(ell)]
    for (i, t), var in u.items():
        u_val[i - 1, t] = max(0.0, float(sol.x[var]))
    for (i, j, t), var in z.items():
        if i != 0 and float(sol.x[var]) > 0.5:
            visited[t].add(i)
    return u_val, visited, sol.status


def _split_periods(problem: SirpProblem, u_val: np.ndarray, visited,
                   frozen_first):
    """Build at most V tours per period around the aggregated solution."""
    inst = problem.instance
    V, ell = inst.n_vehicles, problem.lookahead
    dist = inst.distance_matrix
    routes: list[list[tuple[int, ...]]] = []
    for t in range(ell):
        if frozen_first is not None and t == 0:
            period = [tuple(r) for r in frozen_first]
            period += [()] * (V - len(period))
            routes.append(period[:V])
            continue
        nodes = sorted(visited[t])
        if not nodes:
            routes.append([()] * V)
            continue
        if V == 1:
            routes.append([tuple(tsp_solve(nodes, dist).sequence)])
            continue
        demands = {i: u_val[i - 1, t] for i in nodes}
        try:
            tours = cvrp_solve(nodes, demands, inst.vehicle_capacity, V, dist)
            period = [tuple(tr.sequence) for tr in tours]
        except RoutingInfeasible:
            # Capacity-aware splitting failed; fall back to first-fit by
            # decreasing load (deliveries get re-optimized downstream).
            bins: list[list[int]] = [[] for _ in range(V)]
            loads = [0.0] * V
            for i in sorted(nodes, key=lambda n: -demands[n]):
                pick = min(range(V), key=lambda b: loads[b])
                for b in range(V):
                    if loads[b] + demands[i] <= inst.vehicle_capacity + 1e-9:
                        pick = b
                        break
                bins[pick].append(i)
                loads[pick] += demands[i]
            period = [tuple(tsp_solve(b, dist).sequence) if b else ()
                      for b in bins]
        period += [()] * (V - len(period))
        routes.append(period[:V])
    return routes


def _milp2(problem: SirpProblem, routes, u_val: np.ndarray, penalties,
           frozen_first, time_limit: float, gap: float):
    """Insertion/removal exchange over the current route assignment."""
    inst = problem.instance
    N, V, ell = inst.n_retailers, inst.n_vehicles, problem.lookahead
    M = problem.big_m
    dist = inst.distance_matrix
    a = np.zeros((N, V, ell), dtype=int)
    for t in range(ell):
        for v, r in enumerate(routes[t]):
            for i in r:
                a[i - 1, v, t] = 1

    model = MilpModel()
    s_var, r_var, u = {}, {}, {}
    warm = {}
    for t in range(ell):
        fixed = frozen_first is not None and t == 0
        for v in range(V):
            for i in range(1, N + 1):
                if a[i - 1, v, t]:
                    if not fixed:
                        r_var[(i, v, t)] = model.add_var(f"r_{i}_v{v}t{t}", "binary")
                        warm[r_var[(i, v, t)]] = 0.0
                elif not fixed:
                    s_var[(i, v, t)] = model.add_var(f"s_{i}_v{v}t{t}", "binary")
                    warm[s_var[(i, v, t)]] = 0.0
    for i in range(1, N + 1):
        for v in range(V):
            for t in range(ell):
                ub_it = problem.delivery_bound(i - 1, t)
                u[(i, v, t)] = model.add_var(f"u_{i}_v{v}t{t}", "continuous",
                                             lb=0.0, ub=ub_it)
                warm[u[(i, v, t)]] = (min(float(u_val[i - 1, t]), ub_it)
                                      if a[i - 1, v, t] else 0.0)

    # A capacity-overloaded split (first-fit fallback) would make the warm
    # start infeasible; scale each vehicle-period load down to capacity.
    for t in range(ell):
        for v in range(V):
            load = sum(warm[u[(i, v, t)]] for i in range(1, N + 1))
            if load > inst.vehicle_capacity:
                scale = inst.vehicle_capacity / load
                for i in range(1, N + 1):
                    warm[u[(i, v, t)]] *= scale

    obj = {}
    for (i, v, t), var in s_var.items():
        seq = list(routes[t][v])
        _, delta = insertion_cost(seq, i, dist)
        obj[var] = inst.transport_scale * delta
    for (i, v, t), var in r_var.items():
        seq = list(routes[t][v])
        gain = removal_gain(seq, i, dist)
        obj[var] = -inst.transport_scale * gain
    model.add_objective(obj)

    for t in range(ell):
        fixed = frozen_first is not None and t == 0
        for i in range(1, N + 1):
            expr = {}
            const = 0.0
            for v in range(V):
                if a[i - 1, v, t]:
                    const += 1.0
                    if not fixed:
                        expr[r_var[(i, v, t)]] = -1.0
                elif not fixed and (i, v, t) in s_var:
                    expr[s_var[(i, v, t)]] = 1.0
            if expr:
                model.add_constraint(expr, "<=", 1.0 - const)
            # delivery only where (still) visited
            m_it = problem.delivery_bound(i - 1, t)
            for v in range(V):
                row = {u[(i, v, t)]: 1.0}
                rhs = 0.0
                if a[i - 1, v, t]:
                    rhs = m_it
                    if not fixed:
                        row[r_var[(i, v, t)]] = m_it
                elif not fixed and (i, v, t) in s_var:
                    row[s_var[(i, v, t)]] = -m_it
                model.add_constraint(row, "<=", rhs)
        for v in range(V):
            model.add_constraint({u[(i, v, t)]: 1.0 for i in range(1, N + 1)},
                                 "<=", float(inst.vehicle_capacity))

    def u_expr(i, tau, w):
        return {u[(i + 1, v, tau)]: 1.0 for v in range(V)}

    _add_inventory_caps(model, problem,
                        lambda i, v, t, w: u[(i + 1, v, t)], u_expr)
    pos, neg = _add_inventory_terms(model, problem, u_expr, "m2")

    if penalties is not None:
        for i in range(1, N + 1):
            for v in range(V):
                mu, nu = add_abs_linearization(
                    model, {u[(i, v, 0)]: 1.0},
                    -float(penalties.ubar[i - 1, v]),
                    float(penalties.lam[i - 1, v]), f"pen_{i}_{v}")
                base = warm[u[(i, v, 0)]] - float(penalties.ubar[i - 1, v])
                warm[mu], warm[nu] = max(base, 0.0), max(-base, 0.0)

    cum = problem.cumulative_demand()
    warm_tot = np.zeros((N, ell))
    for (i, v, t), var in u.items():
        warm_tot[i - 1, t] += warm[var]
    cum_u = np.cumsum(warm_tot, axis=1)
    for (i, t, w), var in pos.items():
        pz, nz = _pospart_values(float(problem.inventories[i]),
                                 float(cum_u[i, t]), float(cum[w, i, t + 1]))
        warm[var] = pz
        warm[neg[(i, t, w)]] = nz
    model.warm_start = warm
    model.time_limit = time_limit
    model.gap_tol = gap
    sol = _solve_step(model, "exchange model")

    new_routes = []
    deliveries = np.zeros((V, N, ell))
    for t in range(ell):
        period = []
        for v in range(V):
            seq = list(routes[t][v])
            for i in range(1, N + 1):
                if (i, v, t) in r_var and sol.x[r_var[(i, v, t)]] > 0.5:
                    seq.remove(i)
            for i in range(1, N + 1):
                if (i, v, t) in s_var and sol.x[s_var[(i, v, t)]] > 0.5:
                    pos_i, _ = insertion_cost(seq, i, inst.distance_matrix)
                    seq.insert(pos_i, i)
            period.append(tuple(seq))
            for i in range(1, N + 1):
                deliveries[v, i - 1, t] = max(0.0, float(sol.x[u[(i, v, t)]]))
        new_routes.append(period)
    return new_routes, deliveries, sol.status


def _milp3(problem: SirpProblem, routes, deliveries: np.ndarray, penalties,
           frozen_first, time_limit: float, gap: float):
    """Subsequence selection along fixed route orders."""
    inst = problem.instance
    N, V, ell = inst.n_retailers, inst.n_vehicles, problem.lookahead
    M = problem.big_m
    model = MilpModel()
    z, u = {}, {}
    warm = {}
    route_nodes = {}
    for t in range(ell):
        fixed = frozen_first is not None and t == 0
        for v in range(V):
            seq = list(routes[t][v])
            route_nodes[(v, t)] = seq
            if not seq:
                continue
            if fixed:
                continue
            order = {n: p for p, n in enumerate(seq)}
            for i in seq:
                for j in seq:
                    if order.get(j, -1) > order[i]:
                        z[(i, j, v, t)] = model.add_var(
                            f"z3_{i}_{j}_v{v}t{t}", "binary")
                z[(i, 0, v, t)] = model.add_var(f"z3_{i}_0_v{v}t{t}", "binary")
                z[(0, i, v, t)] = model.add_var(f"z3_0_{i}_v{v}t{t}", "binary")
            # warm start: keep the whole route
            prev = 0
            for n in seq:
                warm[z[(prev, n, v, t)]] = 1.0
                prev = n
            warm[z[(prev, 0, v, t)]] = 1.0
    for t in range(ell):
        for v in range(V):
            for i in route_nodes[(v, t)]:
                ub_it = problem.delivery_bound(i - 1, t)
                u[(i, v, t)] = model.add_var(f"u3_{i}_v{v}t{t}", "continuous",
                                             lb=0.0, ub=ub_it)
                warm[u[(i, v, t)]] = min(float(deliveries[v, i - 1, t]), ub_it)

    obj = {var: problem.edge_cost(i, j) for (i, j, v, t), var in z.items()}
    model.add_objective(obj)

    for t in range(ell):
        fixed = frozen_first is not None and t == 0
        if fixed:
            for v in range(V):
                for i in route_nodes[(v, t)]:
                    model.add_constraint({u[(i, v, t)]: 1.0}, "<=", M)
            for v in range(V):
                if route_nodes[(v, t)]:
                    model.add_constraint(
                        {u[(i, v, t)]: 1.0 for i in route_nodes[(v, t)]},
                        "<=", float(inst.vehicle_capacity))
            continue
        for v in range(V):
            seq = route_nodes[(v, t)]
            if not seq:
                continue
            order = {n: p for p, n in enumerate(seq)}
            out0 = {z[(0, i, v, t)]: 1.0 for i in seq}
            in0 = {z[(i, 0, v, t)]: 1.0 for i in seq}
            model.add_constraint(out0, "<=", 1.0)
            expr = dict(out0)
            for k, c in in0.items():
                expr[k] = expr.get(k, 0.0) - c
            model.add_constraint(expr, "=", 0.0)
            for i in seq:
                after = [j for j in seq if order[j] > order[i]] + [0]
                befor = [j for j in seq if order[j] < order[i]] + [0]
                flow = {z[(i, j, v, t)]: 1.0 for j in after}
                for j in befor:
                    key = z[(j, i, v, t)]
                    flow[key] = flow.get(key, 0.0) - 1.0
                model.add_constraint(flow, "=", 0.0)
                m_it = problem.delivery_bound(i - 1, t)
                expr = {u[(i, v, t)]: 1.0}
                for j in after:
                    expr[z[(i, j, v, t)]] = -m_it
                model.add_constraint(expr, "<=", 0.0)
        for i in range(1, N + 1):
            expr = {}
            for v in range(V):
                seq = route_nodes[(v, t)]
                if i in seq:
                    order = {n: p for p, n in enumerate(seq)}
                    for j in seq + [0]:
                        if j == 0 or order[j] > order[i]:
                            expr[z[(i, j, v, t)]] = 1.0
            if expr:
                model.add_constraint(expr, "<=", 1.0)
        for v in range(V):
            if route_nodes[(v, t)]:
                model.add_constraint(
                    {u[(i, v, t)]: 1.0 for i in route_nodes[(v, t)]},
                    "<=", float(inst.vehicle_capacity))

    def u_expr(i, tau, w):
        out = {}
        for v in range(V):
            if (i + 1, v, tau) in u:
                out[u[(i + 1, v, tau)]] = 1.0
        return out

    _add_inventory_caps(model, problem,
                        lambda i, v, t, w: u.get((i + 1, v, t)), u_expr)
    pos, neg = _add_inventory_terms(model, problem, u_expr, "m3")

    if penalties is not None:
        for i in range(1, N + 1):
            for v in range(V):
                if (i, v, 0) not in u:
                    continue
                mu, nu = add_abs_linearization(
                    model, {u[(i, v, 0)]: 1.0},
                    -float(penalties.ubar[i - 1, v]),
                    float(penalties.lam[i - 1, v]), f"pen3_{i}_{v}")
                base = warm[u[(i, v, 0)]] - float(penalties.ubar[i - 1, v])
                warm[mu], warm[nu] = max(base, 0.0), max(-base, 0.0)

    cum = problem.cumulative_demand()
    cum_u = np.cumsum(deliveries.sum(axis=0), axis=1)
    for (i, t, w), var in pos.items():
        pz, nz = _pospart_values(float(problem.inventories[i]),
                                 float(cum_u[i, t]), float(cum[w, i, t + 1]))
        warm[var] = pz
        warm[neg[(i, t, w)]] = nz
    model.warm_start = warm
    model.time_limit = time_limit
    model.gap_tol = gap
    sol = _solve_step(model, "subsequence model")

    new_routes = []
    out = np.zeros((V, N, ell))
    for t in range(ell):
        fixed = frozen_first is not None and t == 0
        period = []
        for v in range(V):
            seq = route_nodes[(v, t)]
            if fixed:
                period.append(tuple(seq))
            else:
                kept = []
                for i in seq:
                    has_out = any(
                        sol.x[z[key]] > 0.5
                        for key in z
                        if key[0] == i and key[2] == v and key[3] == t)
                    if has_out:
                        kept.append(i)
                period.append(tuple(kept))
            for i in seq:
                if (i, v, t) in u:
                    out[v, i - 1, t] = max(0.0, float(sol.x[u[(i, v, t)]]))
        new_routes.append(period)
    return new_routes, out, sol.status


def matheuristic_solve(problem: SirpProblem, *, scenario_index: int | None = None,
                       penalties: Penalties | None = None,
                       frozen_first=None, time_limit: float = 10.0,
                       gap: float = 1e-4) -> IrpSolution:
    """Seven-step route-and-deliver heuristic.

    1. giant TSP over all retailers; 2. aggregated MILP restricted to
    giant-tour arcs; 3. per-period TSP/CVRP split; 4. insertion/removal
    MILP; 5. per-route re-TSP; 6. fixed-order subsequence MILP; 7. final
    re-TSP.  `scenario_index` restricts to a single scenario (the
    progressive-hedging subproblem); `penalties` adds first-period delivery
    penalties; `frozen_first` pins the period-0 routes.
    """
    if scenario_index is not None:
        problem = problem.restrict(scenario_index)
    inst = problem.instance
    dist = inst.distance_matrix
    statuses = []

    giant = tuple(tsp_solve(list(range(1, inst.n_retailers + 1)), dist).sequence)
    u_val, visited, st1 = _milp1(problem, giant, penalties, frozen_first,
                                 time_limit, gap)
    statuses.append(st1)
    routes = _split_periods(problem, u_val, visited, frozen_first)
    routes2, deliveries, st2 = _milp2(problem, routes, u_val, penalties,
                                      frozen_first, time_limit, gap)
    statuses.append(st2)
    routes2 = [[_best_order(r, dist) for r in period] for period in routes2]
    if frozen_first is not None:
        routes2[0] = [tuple(r) for r in routes[0]]
    routes3, deliveries3, st3 = _milp3(problem, routes2, deliveries, penalties,
                                       frozen_first, time_limit, gap)
    statuses.append(st3)
    routes3 = [[_best_order(r, dist) for r in period] for period in routes3]
    if frozen_first is not None:
        routes3[0] = [tuple(r) for r in routes[0]]

    transport, hold, back = evaluate_solution(problem, routes3,
                                              deliveries3.sum(axis=0))
    status = OPTIMAL if all(s == OPTIMAL for s in statuses) else FEASIBLE
    return IrpSolution(routes3, deliveries3, transport + hold + back,
                       transport, hold, back, status=status)


def extract_decision(solution: IrpSolution, instance: Instance) -> Plan:
    """First-period plan with route orders re-optimized, one slot per
    vehicle."""
    plan = solution.plan()
    routes = [tuple(tsp_solve(list(r), instance.distance_matrix).sequence)
              for r in plan.routes if r]
    routes += [()] * (instance.n_vehicles - len(routes))
    return Plan(routes=tuple(routes[:instance.n_vehicles]),
                deliveries=plan.deliveries)


# ---------------------------------------------------------------------------
# Progressive hedging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaParams:
    rho0: float = 0.001
    beta_d: float = 1.05
    beta_p: float = 1.05
    beta0: float = 1.2       # extra factor once routing has been fixed
    eps: float = 0.1
    max_iter: int = 50
    time_limit: float = 10.0
    gap: float = 1e-4


def canonical_deliveries(solution: IrpSolution, n_retailers: int,
                         n_vehicles: int) -> tuple[np.ndarray, tuple]:
    """First-period per-vehicle deliveries with vehicles relabeled so that
    routes are ordered by their smallest retailer (empty routes last).

    Vehicle indices inside a scenario solution are arbitrary; without a
    common labeling the consensus average would mix unrelated routes.
    """
    pairs = []
    for v, r in enumerate(solution.routes[0]):
        key = min(r) if r else n_retailers + 1
        pairs.append((key, v, tuple(r)))
    pairs.sort(key=lambda p: (p[0], p[1]))
    u = np.zeros((n_retailers, n_vehicles))
    routes = []
    for slot, (_, v, r) in enumerate(pairs[:n_vehicles]):
        u[:, slot] = solution.deliveries[v, :, 0]
        routes.append(r)
    return u, tuple(routes)


def _partition_key(routes: tuple) -> tuple:
    return tuple(sorted(tuple(sorted(r)) for r in routes if r))


def project_deliveries(instance: Instance, inventories: np.ndarray,
                       routes: tuple, ubar: np.ndarray) -> np.ndarray:
    """Clip consensus deliveries onto the feasible polytope of the routes.

    Unvisited retailers get zero; per-retailer inventory caps and per-vehicle
    capacity are enforced by clipping then proportional scaling.
    """
    V = instance.n_vehicles
    N = instance.n_retailers
    u = np.zeros((N, V))
    for v, r in enumerate(routes[:V]):
        for i in r:
            u[i - 1, v] = max(0.0, float(ubar[i - 1, v]))
    # inventory caps per retailer
    for i in range(N):
        cap = max(0.0, instance.inv_capacity - float(inventories[i]))
        tot = u[i].sum()
        if tot > cap > 0:
            u[i] *= cap / tot
        elif tot > cap:
            u[i] = 0.0
    # vehicle capacity
    for v in range(V):
        tot = u[:, v].sum()
        if tot > instance.vehicle_capacity:
            u[:, v] *= instance.vehicle_capacity / tot
    return u


def pha_solve(problem: SirpProblem, params: PhaParams | None = None) -> IrpSolution:
    """Progressive hedging over single-scenario subproblems.

    Iteration 0 solves each scenario unpenalized; afterwards the first-period
    deliveries are pulled toward their probability-weighted consensus through
    accumulated absolute-deviation penalties.  Once every scenario proposes
    the same first-period routing in two consecutive iterations, those routes
    are frozen for the remaining iterations.
    """
    params = params or PhaParams()
    inst = problem.instance
    N, V = inst.n_retailers, inst.n_vehicles
    S = len(problem.scenarios)
    probs = problem.scenarios.probabilities

    def solve_all(pen_list, frozen):
        sols, u_mats, parts = [], [], []
        for w in range(S):
            sol = matheuristic_solve(
                problem, scenario_index=w,
                penalties=pen_list[w] if pen_list else None,
                frozen_first=list(frozen) if frozen is not None else None,
                time_limit=params.time_limit, gap=params.gap)
            u, routes = canonical_deliveries(sol, N, V)
            sols.append(sol)
            u_mats.append(u)
            parts.append(_partition_key(routes) if frozen is None
                         else _partition_key(tuple(frozen)))
        return sols, np.stack(u_mats), parts

    trace = []
    sols, u_all, parts = solve_all(None, None)
    ubar = np.tensordot(probs, u_all, axes=1)
    residual = float(np.sum(probs[:, None, None] * np.abs(u_all - ubar)))
    theta_d = [float(np.sum((u_all - ubar) ** 2))]
    theta_p: list[float] = []
    rho = params.rho0
    lam = params.rho0 * np.abs(u_all - ubar)          # (S, N, V)
    lam_agg = params.rho0 * np.abs(u_all.sum(axis=2)
                                   - ubar.sum(axis=1))  # (S, N)
    trace.append({"r": 0, "rho": rho, "residual": residual,
                  "lambda_max": float(lam.max()) if lam.size else 0.0})
    frozen: tuple | None = None
    prev_part = parts[0] if len(set(parts)) == 1 else None
    best = (residual, ubar.copy(), sols, u_all.copy())
    converged = residual <= params.eps
    rho_hist = [rho]

    r = 0
    while not converged and r < params.max_iter:
        r += 1
        pen_list = [Penalties(lam[w], lam_agg[w], ubar) for w in range(S)]
        prev_ubar = ubar
        sols, u_all, parts = solve_all(pen_list, frozen)
        ubar = np.tensordot(probs, u_all, axes=1)
        residual = float(np.sum(probs[:, None, None] * np.abs(u_all - ubar)))
        theta_p.append(float(np.sum((ubar - prev_ubar) ** 2)))
        theta_d.append(float(np.sum((u_all - ubar) ** 2)))
        if residual < best[0]:
            best = (residual, ubar.copy(), sols, u_all.copy())
        # Freeze routes once all scenarios agree twice in a row.
        if frozen is None and len(set(parts)) == 1:
            if prev_part is not None and parts[0] == prev_part:
                canon = canonical_deliveries(sols[0], N, V)[1]
                frozen = tuple(tuple(tsp_solve(list(g), inst.distance_matrix).sequence)
                               for g in canon if g)
            prev_part = parts[0]
        elif frozen is None:
            prev_part = None
        trace.append({"r": r, "rho": rho, "residual": residual,
                      "lambda_max": float(lam.max()) if lam.size else 0.0})
        if residual <= params.eps:
            converged = True
            break
        # Penalty-rate update compares the two previous iterations' spreads.
        beta0 = params.beta0 if frozen is not None else 1.0
        if r >= 2:
            if theta_d[r - 1] - theta_d[r - 2] > 0:
                rho = beta0 * params.beta_d * rho
            elif len(theta_p) >= 2 and theta_p[-2] - (theta_p[-3] if len(theta_p) >= 3 else math.inf) > 0:
                rho = rho / (beta0 * params.beta_p)
        prev_rho = rho_hist[-1]
        lam = prev_rho * np.abs(u_all - prev_ubar[None, :, :]) + lam
        lam_agg = prev_rho * np.abs(u_all.sum(axis=2)
                                    - prev_ubar.sum(axis=1)[None, :]) + lam_agg
        rho_hist.append(rho)

    if not converged:
        residual, ubar, sols, u_all = best

    # Assemble the first-period decision from the consensus.
    if frozen is not None:
        first_routes = frozen
    else:
        # Majority first-period partition across scenarios, weighted by
        # probability; route orders re-optimized.
        tally: dict[tuple, float] = {}
        reps: dict[tuple, tuple] = {}
        for w in range(S):
            _, routes_w = canonical_deliveries(sols[w], N, V)
            key = _partition_key(routes_w)
            tally[key] = tally.get(key, 0.0) + float(probs[w])
            reps.setdefault(key, routes_w)
        key = max(tally, key=lambda k: (tally[k], -len(k)))
        first_routes = tuple(tuple(tsp_solve(list(g), inst.distance_matrix).sequence)
                             for g in reps[key] if g)
    u_first = project_deliveries(inst, problem.inventories, first_routes, ubar)

    # Expected cost over scenarios: the consensus first period followed by
    # each scenario's own continuation.
    ell = problem.lookahead
    routes_out: list[list[tuple[int, ...]]] = [
        list(first_routes) + [()] * (V - len(first_routes))]
    ref = max(range(S), key=lambda w: probs[w])
    for t in range(1, ell):
        routes_out.append([tuple(rr) for rr in sols[ref].routes[t]])
    deliveries = np.zeros((V, N, ell))
    for v in range(min(V, len(first_routes))):
        deliveries[v, :, 0] = u_first[:, v]
    for t in range(1, ell):
        deliveries[:, :, t] = sols[ref].deliveries[:, :, t]
    exp_tr = exp_h = exp_b = 0.0
    for w in range(S):
        tot = sols[w].total_deliveries().copy()
        tot[:, 0] = u_first.sum(axis=1)
        rts = [routes_out[0]] + [list(map(tuple, sols[w].routes[t]))
                                 for t in range(1, ell)]
        tr, hh, bb = evaluate_solution(problem.restrict(w), rts, tot)
        exp_tr += float(probs[w]) * tr
        exp_h += float(probs[w]) * hh
        exp_b += float(probs[w]) * bb
    return IrpSolution(routes_out, deliveries, exp_tr + exp_h + exp_b,
                       exp_tr, exp_h, exp_b,
                       status=OPTIMAL if converged else FEASIBLE,
                       pha_trace=trace)
