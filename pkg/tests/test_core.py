import math

import numpy as np
import pytest

from scpo.core import (
    CostBreakdown,
    Instance,
    Plan,
    State,
    inventory_cost,
    route_distance,
    transition,
    transport_cost,
    validate_plan,
)


def make_instance(**kw) -> Instance:
    base = dict(
        n_retailers=2,
        coords=((0.0, 0.0), (1.0, 0.0), (0.0, 1.0)),
        n_vehicles=1,
        vehicle_capacity=8.0,
        inv_capacity=15.0,
        holding_cost=0.3,
        backorder_cost=3.0,
        transport_scale=1.0,
        history_len=4,
        lookahead=2,
        eval_horizon=5,
        rng_seed=0,
    )
    base.update(kw)
    return Instance(**base)


def make_state(inst, inv, hist=None):
    if hist is None:
        hist = np.zeros((inst.n_retailers, inst.history_len))
    return State(epoch=0, inventories=np.asarray(inv, float), history=np.asarray(hist, float))


def test_empty_plan_is_valid():
    inst = make_instance()
    state = make_state(inst, [5.0, 5.0])
    ok, violations = validate_plan(state, Plan.empty(inst), inst)
    assert ok and violations == []


def test_duplicate_visit_rejected():
    inst = make_instance(n_vehicles=2)
    state = make_state(inst, [5.0, 5.0])
    plan = Plan(routes=((1,), (1,)), deliveries=np.array([2.0, 0.0]))
    ok, violations = validate_plan(state, plan, inst)
    assert not ok
    assert any("duplicate" in v for v in violations)


def test_vehicle_capacity_violation():
    inst = make_instance(vehicle_capacity=8.0)
    state = make_state(inst, [0.0, 0.0])
    plan = Plan(routes=((1, 2),), deliveries=np.array([5.0, 5.0]))
    ok, violations = validate_plan(state, plan, inst)
    assert not ok
    assert any("vehicle capacity" in v for v in violations)


def test_inventory_capacity_violation():
    inst = make_instance(inv_capacity=6.0)
    state = make_state(inst, [5.0, 0.0])
    plan = Plan(routes=((1,),), deliveries=np.array([2.0, 0.0]))
    ok, violations = validate_plan(state, plan, inst)
    assert not ok
    assert any("inventory capacity" in v for v in violations)


def test_delivery_to_unvisited_retailer_rejected():
    inst = make_instance()
    state = make_state(inst, [0.0, 0.0])
    plan = Plan(routes=((1,),), deliveries=np.array([1.0, 1.0]))
    ok, violations = validate_plan(state, plan, inst)
    assert not ok
    assert any("unvisited" in v for v in violations)


def test_unit_right_triangle_tour_distance():
    # warehouse at origin, retailers at (1,0) and (0,1): tour length 2 + sqrt(2)
    inst = make_instance(transport_scale=1.0)
    plan = Plan(routes=((1, 2),), deliveries=np.array([0.0, 0.0]))
    assert transport_cost(plan, inst) == pytest.approx(2.0 + math.sqrt(2.0), abs=1e-12)
    # scale factor multiplies through
    inst2 = make_instance(transport_scale=0.05)
    assert transport_cost(plan, inst2) == pytest.approx(0.05 * (2.0 + math.sqrt(2.0)), abs=1e-12)


def test_single_visit_distance_is_out_and_back():
    inst = make_instance()
    assert route_distance((1,), inst) == pytest.approx(2.0)


def test_inventory_cost_signs():
    inst = make_instance(holding_cost=0.3, backorder_cost=3.0)
    # one retailer left with +2 on shelf, the other short by 1
    cost = inventory_cost(np.array([5.0, 1.0]), np.array([3.0, 2.0]), inst)
    assert cost == pytest.approx(0.3 * 2 + 3.0 * 1)


def test_transition_rolls_history_oldest_first():
    inst = make_instance()
    hist = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]])
    state = make_state(inst, [5.0, 5.0], hist)
    plan = Plan(routes=((1,),), deliveries=np.array([2.0, 0.0]))
    nxt, cost = transition(state, plan, np.array([4.0, 1.0]), inst)
    assert nxt.epoch == 1
    np.testing.assert_allclose(nxt.history[0], [2.0, 3.0, 4.0, 4.0])
    np.testing.assert_allclose(nxt.history[1], [6.0, 7.0, 8.0, 1.0])
    np.testing.assert_allclose(nxt.inventories, [3.0, 4.0])
    assert cost.transport == pytest.approx(2.0)
    assert cost.holding == pytest.approx(0.3 * (3.0 + 4.0))
    assert cost.backorder == pytest.approx(0.0)
    assert cost.total == pytest.approx(cost.transport + cost.holding + cost.backorder)


def test_transition_flow_conservation_property():
    rng = np.random.default_rng(7)
    inst = make_instance(n_retailers=3, coords=((0, 0), (1, 0), (0, 1), (1, 1)),
                         vehicle_capacity=50.0, inv_capacity=100.0)
    state = make_state(inst, rng.uniform(0, 10, 3))
    for _ in range(25):
        deliveries = rng.uniform(0, 5, 3)
        demand = rng.uniform(0, 8, 3)
        plan = Plan(routes=((1, 2, 3),), deliveries=deliveries)
        nxt, _ = transition(state, plan, demand, inst)
        np.testing.assert_allclose(
            nxt.inventories, state.inventories + deliveries - demand, atol=1e-9)
        state = nxt


def test_negative_demand_rejected():
    inst = make_instance()
    state = make_state(inst, [5.0, 5.0])
    with pytest.raises(ValueError):
        transition(state, Plan.empty(inst), np.array([-1.0, 0.0]), inst)


def test_backorder_carries_negative_inventory():
    inst = make_instance()
    state = make_state(inst, [1.0, 0.0])
    nxt, cost = transition(state, Plan.empty(inst), np.array([4.0, 0.0]), inst)
    assert nxt.inventories[0] == pytest.approx(-3.0)
    assert cost.backorder == pytest.approx(3.0 * 3.0)


def test_instance_json_round_trip(tmp_path):
    inst = make_instance(initial_inventory=(4.0, 6.0))
    text = inst.to_json()
    again = Instance.from_json(text)
    assert again == inst
    assert '"format": "scpo-instance-v1"' in text


def test_instance_rejects_bad_format():
    with pytest.raises(ValueError, match="format"):
        Instance.from_json('{"format": "nope"}')


def test_instance_validation():
    with pytest.raises(ValueError):
        make_instance(n_retailers=3)  # coords mismatch
    with pytest.raises(ValueError):
        make_instance(vehicle_capacity=0.0)
    with pytest.raises(ValueError):
        make_instance(history_len=1, lookahead=2)


def test_start_inventories_default_is_half_capacity():
    inst = make_instance(inv_capacity=12.0)
    np.testing.assert_allclose(inst.start_inventories(), [6.0, 6.0])
    inst2 = make_instance(initial_inventory=(1.0, 2.0))
    np.testing.assert_allclose(inst2.start_inventories(), [1.0, 2.0])
