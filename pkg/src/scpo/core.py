"""Domain types, state transition, and cost accounting for the
one-warehouse multi-retailer replenishment system.

Nodes are numbered 0..N where node 0 is the warehouse and nodes 1..N are
retailers.  Arrays indexed by retailer use position ``i - 1`` for retailer
``i``.  All types are immutable value objects; the operations are pure
functions and safe to call concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

INSTANCE_FORMAT = "scpo-instance-v1"


def _readonly(a) -> np.ndarray:
    out = np.asarray(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Instance:
    """Geometry, fleet, cost, and horizon parameters of one system."""

    n_retailers: int
    coords: tuple[tuple[float, float], ...]  # node 0 = warehouse
    n_vehicles: int
    vehicle_capacity: float
    inv_capacity: float
    holding_cost: float
    backorder_cost: float
    transport_scale: float
    history_len: int
    lookahead: int
    eval_horizon: int
    rng_seed: int
    initial_inventory: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_retailers < 1:
            raise ValueError("n_retailers must be >= 1")
        if len(self.coords) != self.n_retailers + 1:
            raise ValueError("coords must hold warehouse plus one entry per retailer")
        if self.n_vehicles < 1:
            raise ValueError("n_vehicles must be >= 1")
        if self.vehicle_capacity <= 0 or self.inv_capacity <= 0:
            raise ValueError("capacities must be positive")
        if min(self.holding_cost, self.backorder_cost, self.transport_scale) < 0:
            raise ValueError("cost rates must be nonnegative")
        if not (self.history_len >= self.lookahead >= 1):
            raise ValueError("need history_len >= lookahead >= 1")
        if self.initial_inventory is not None and len(self.initial_inventory) != self.n_retailers:
            raise ValueError("initial_inventory length mismatch")
        object.__setattr__(self, "coords", tuple((float(x), float(y)) for x, y in self.coords))

    def dist(self, i: int, j: int) -> float:
        return float(self.distance_matrix[i, j])

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        pts = np.asarray(self.coords)
        d = np.hypot(pts[:, 0, None] - pts[None, :, 0], pts[:, 1, None] - pts[None, :, 1])
        d.setflags(write=False)
        return d

    def start_inventories(self) -> np.ndarray:
        """Initial per-retailer inventory; defaults to half the shelf capacity."""
        if self.initial_inventory is not None:
            return np.asarray(self.initial_inventory, dtype=float)
        return np.full(self.n_retailers, self.inv_capacity / 2.0)

    def to_json(self) -> str:
        doc = {
            "format": INSTANCE_FORMAT,
            "n_retailers": self.n_retailers,
            "coords": [[x, y] for x, y in self.coords],
            "n_vehicles": self.n_vehicles,
            "vehicle_capacity": self.vehicle_capacity,
            "inv_capacity": self.inv_capacity,
            "holding_cost": self.holding_cost,
            "backorder_cost": self.backorder_cost,
            "transport_scale": self.transport_scale,
            "history_len": self.history_len,
            "lookahead": self.lookahead,
            "eval_horizon": self.eval_horizon,
            "rng_seed": self.rng_seed,
        }
        if self.initial_inventory is not None:
            doc["initial_inventory"] = list(self.initial_inventory)
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "Instance":
        doc = json.loads(text)
        if doc.get("format") != INSTANCE_FORMAT:
            raise ValueError(f"unsupported instance format: {doc.get('format')!r}")
        init = doc.get("initial_inventory")
        return Instance(
            n_retailers=doc["n_retailers"],
            coords=tuple((x, y) for x, y in doc["coords"]),
            n_vehicles=doc["n_vehicles"],
            vehicle_capacity=doc["vehicle_capacity"],
            inv_capacity=doc["inv_capacity"],
            holding_cost=doc["holding_cost"],
            backorder_cost=doc["backorder_cost"],
            transport_scale=doc["transport_scale"],
            history_len=doc["history_len"],
            lookahead=doc["lookahead"],
            eval_horizon=doc["eval_horizon"],
            rng_seed=doc["rng_seed"],
            initial_inventory=tuple(init) if init is not None else None,
        )


@dataclass(frozen=True)
class State:
    """Epoch index, current inventories, and the trailing demand window.

    ``history`` has shape (N, L) with the oldest observation in column 0
    and the most recent in column L-1.  Inventories may be negative
    (backorders); they never exceed the shelf capacity.
    """

    epoch: int
    inventories: np.ndarray
    history: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inventories", _readonly(self.inventories))
        object.__setattr__(self, "history", _readonly(self.history))
        if self.history.ndim != 2 or self.history.shape[0] != self.inventories.shape[0]:
            raise ValueError("history must be (N, L) matching inventories")
        if np.any(self.history < 0):
            raise ValueError("demand history must be nonnegative")


@dataclass(frozen=True)
class Plan:
    """One epoch's joint decision: a route per vehicle plus deliveries.

    ``routes[v]`` is the ordered retailer sequence driven by vehicle v
    (may be empty); ``deliveries[i-1]`` is the quantity dropped at
    retailer i.
    """

    routes: tuple[tuple[int, ...], ...]
    deliveries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "routes", tuple(tuple(int(i) for i in r) for r in self.routes))
        object.__setattr__(self, "deliveries", _readonly(self.deliveries))

    @staticmethod
    def empty(inst: Instance) -> "Plan":
        return Plan(tuple(() for _ in range(inst.n_vehicles)), np.zeros(inst.n_retailers))

    def visited(self) -> set[int]:
        return {i for r in self.routes for i in r}


@dataclass(frozen=True)
class CostBreakdown:
    transport: float
    holding: float
    backorder: float

    @property
    def total(self) -> float:
        return self.transport + self.holding + self.backorder


def validate_plan(state: State, plan: Plan, inst: Instance) -> tuple[bool, list[str]]:
    """Check the four feasibility rules of a joint decision.

    Returns ``(ok, violations)``; violations are human-readable strings,
    nothing is raised.  Tolerance 1e-9 on the numeric comparisons.
    """
    tol = 1e-9
    violations: list[str] = []
    if len(plan.routes) != inst.n_vehicles:
        violations.append(f"plan has {len(plan.routes)} routes for {inst.n_vehicles} vehicles")
    if plan.deliveries.shape[0] != inst.n_retailers:
        violations.append("deliveries length mismatch")
        return False, violations

    seen: set[int] = set()
    for v, route in enumerate(plan.routes):
        for i in route:
            if not (1 <= i <= inst.n_retailers):
                violations.append(f"route {v}: unknown retailer {i}")
            elif i in seen:
                violations.append(f"duplicate visit: retailer {i}")
            seen.add(i)

    if np.any(plan.deliveries < -tol):
        violations.append("negative delivery")
    for i in range(1, inst.n_retailers + 1):
        if i not in seen and plan.deliveries[i - 1] > tol:
            violations.append(f"delivery to unvisited retailer {i}")
    for v, route in enumerate(plan.routes):
        load = sum(plan.deliveries[i - 1] for i in route)
        if load > inst.vehicle_capacity + tol:
            violations.append(f"vehicle capacity: route {v} loads {load:.6g} > Q={inst.vehicle_capacity:.6g}")
    post = state.inventories + plan.deliveries
    for i in range(inst.n_retailers):
        if post[i] > inst.inv_capacity + tol:
            violations.append(f"inventory capacity: retailer {i + 1} reaches {post[i]:.6g} > I_max={inst.inv_capacity:.6g}")
    return not violations, violations


def route_distance(route: tuple[int, ...] | list[int], inst: Instance) -> float:
    """Closed-tour distance warehouse -> route order -> warehouse."""
    if not route:
        return 0.0
    d = inst.dist(0, route[0])
    for a, b in zip(route, route[1:]):
        d += inst.dist(a, b)
    return d + inst.dist(route[-1], 0)


def transport_cost(plan: Plan, inst: Instance) -> float:
    """Scaled total driving distance of all non-empty routes.

    Uses the visit order stored in the plan; producers are expected to
    have re-optimized orders before committing.
    """
    return inst.transport_scale * sum(route_distance(r, inst) for r in plan.routes)


def inventory_cost_parts(post_inv: np.ndarray, demand: np.ndarray, inst: Instance) -> tuple[float, float]:
    """(holding, backorder) cost of one period given post-delivery stock."""
    left = np.asarray(post_inv, dtype=float) - np.asarray(demand, dtype=float)
    holding = inst.holding_cost * float(np.sum(np.maximum(left, 0.0)))
    backorder = inst.backorder_cost * float(-np.sum(np.minimum(left, 0.0)))
    return holding, backorder


def inventory_cost(post_inv: np.ndarray, demand: np.ndarray, inst: Instance) -> float:
    h, b = inventory_cost_parts(post_inv, demand, inst)
    return h + b


def transition(state: State, plan: Plan, realized_demand: np.ndarray, inst: Instance) -> tuple[State, CostBreakdown]:
    """Apply a plan, realize one period of demand, and roll the window."""
    demand = np.asarray(realized_demand, dtype=float)
    if np.any(demand < 0):
        raise ValueError("realized demand must be nonnegative")
    post = state.inventories + plan.deliveries
    holding, backorder = inventory_cost_parts(post, demand, inst)
    cost = CostBreakdown(transport=transport_cost(plan, inst), holding=holding, backorder=backorder)
    nxt = State(
        epoch=state.epoch + 1,
        inventories=post - demand,
        history=np.concatenate([state.history[:, 1:], demand[:, None]], axis=1),
    )
    return nxt, cost
