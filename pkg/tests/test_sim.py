"""Rolling-horizon simulator tests.

The key oracle: for a single retailer with integer demands the episode
under perfect information must match an exhaustive dynamic program over
integer inventory levels (visit-cost + holding/backorder recursion).
"""

import dataclasses
import json
import logging
import math
from functools import lru_cache

import numpy as np
import pytest

from scpo.core import Instance, Plan, State, validate_plan
from scpo.datagen import derive_instance, generate_dataset
from scpo.forecast import ForecastConfig, mle_fit_per_retailer, mqrnn_train
from scpo.sim import (
    EpisodeSetup,
    Policy,
    REPORT_FORMAT,
    _snap_plan,
    parse_policy,
    run_episode,
    run_experiment,
    saving,
    service_level,
    setup_episode,
)
from scpo.sirp import PhaParams


def one_retailer_instance(**kw):
    args = dict(
        n_retailers=1, coords=((0.0, 0.0), (0.0, 5.0)), n_vehicles=1,
        vehicle_capacity=10.0, inv_capacity=8.0, holding_cost=0.3,
        backorder_cost=3.0, transport_scale=0.5, history_len=4,
        lookahead=4, eval_horizon=4, rng_seed=0,
        initial_inventory=(2.0,))
    args.update(kw)
    return Instance(**args)


def dp_optimal_cost(demands, inv0, h, e, visit_cost, capacity, shelf):
    """Exact minimum cost by enumeration over integer delivery quantities."""

    @lru_cache(maxsize=None)
    def value(k, inv):
        if k == len(demands):
            return 0.0
        best = math.inf
        for u in range(0, min(capacity, shelf - inv) + 1):
            left = inv + u - demands[k]
            cost = (visit_cost if u > 0 else 0.0)
            cost += h * max(left, 0) + e * max(-left, 0)
            best = min(best, cost + value(k + 1, left))
        return best

    return value(0, inv0)


def test_pi_matches_dynamic_program():
    inst = one_retailer_instance()
    demands = [3, 0, 4, 2]
    truth = np.array([demands + [0, 0, 0, 0]], dtype=float)
    result = run_episode(inst, truth, Policy("pi"), seed=0)

    visit_cost = inst.transport_scale * 2 * 5.0  # round trip to the retailer
    optimum = dp_optimal_cost(tuple(demands), 2, 0.3, 3.0, visit_cost, 10, 8)
    # Backlogging period 0 frees shelf space for a single 7-unit drop:
    # 3.0 backorder + 5.0 transport + (1.8 + 0.6) holding.
    assert optimum == pytest.approx(10.4)
    assert result.cost == pytest.approx(optimum, abs=1e-5)
    assert result.transport == pytest.approx(5.0, abs=1e-6)
    assert result.holding == pytest.approx(2.4, abs=1e-5)
    assert result.backorder == pytest.approx(3.0, abs=1e-6)
    assert result.mse == 0.0
    assert result.fallbacks == 0


def test_pi_matches_dynamic_program_random_demands():
    rng = np.random.default_rng(7)
    demands = [int(d) for d in rng.integers(0, 5, size=4)]
    inst = one_retailer_instance(initial_inventory=(1.0,))
    truth = np.array([demands + [0] * 4], dtype=float)
    result = run_episode(inst, truth, Policy("pi"), seed=0)
    visit_cost = inst.transport_scale * 2 * 5.0
    optimum = dp_optimal_cost(tuple(demands), 1, 0.3, 3.0, visit_cost, 10, 8)
    assert result.cost == pytest.approx(optimum, abs=1e-5)


def test_zero_demand_is_all_holding():
    inst = one_retailer_instance(initial_inventory=(4.0,))
    truth = np.zeros((1, 8))
    result = run_episode(inst, truth, Policy("ev"), seed=0,
                         history0=np.zeros((1, 4)))
    assert result.transport == 0.0
    assert result.holding == pytest.approx(4 * 0.3 * 4.0)
    assert result.backorder == 0.0
    assert result.service == 1.0  # no demand at all
    assert result.mse == 0.0
    assert result.fallbacks == 0


def service_case_instance():
    return one_retailer_instance(
        lookahead=2, eval_horizon=1, transport_scale=0.1,
        initial_inventory=(3.0,))


def service_case_truth():
    return np.array([[4.0, 0.0, 0.0]])


def test_service_and_backorder_accounting():
    inst = service_case_instance()
    result = run_episode(inst, service_case_truth(), Policy("ev"), seed=0,
                         history0=np.zeros((1, 4)))
    # EV sees a zero-demand scenario, does nothing, and eats one backorder.
    assert result.service == pytest.approx(0.75)
    assert result.backorder == pytest.approx(3.0)
    assert result.transport == 0.0
    assert result.holding == 0.0
    assert result.mse == pytest.approx(8.0)  # (4-0)^2 + (0-0)^2 over 2 entries


def test_pi_beats_ev_on_service_case():
    inst = service_case_instance()
    result = run_episode(inst, service_case_truth(), Policy("pi"), seed=0,
                         history0=np.zeros((1, 4)))
    # Delivering one unit costs 0.1 * 10 = 1.0, cheaper than backorder 3.0.
    assert result.cost == pytest.approx(1.0, abs=1e-6)
    assert result.service == 1.0


def test_episode_is_deterministic():
    inst = one_retailer_instance()
    truth = np.array([[3, 0, 4, 2, 0, 0, 0, 0]], dtype=float)
    a = run_episode(inst, truth, Policy("emp"), seed=11,
                    history0=np.array([[2.0, 3.0, 1.0, 2.0]]))
    b = run_episode(inst, truth, Policy("emp"), seed=11,
                    history0=np.array([[2.0, 3.0, 1.0, 2.0]]))
    def stripped(result):
        return [{k: v for k, v in ep.items() if k != "time"}
                for ep in result.epochs]

    assert a.cost == b.cost
    assert stripped(a) == stripped(b)
    # A different seed must still produce a complete, valid episode.
    c = run_episode(inst, truth, Policy("emp"), seed=12,
                    history0=np.array([[2.0, 3.0, 1.0, 2.0]]))
    assert len(c.epochs) == inst.eval_horizon


def test_cost_equals_sum_of_parts_and_epochs():
    inst = one_retailer_instance()
    truth = np.array([[3, 0, 4, 2, 0, 0, 0, 0]], dtype=float)
    result = run_episode(inst, truth, Policy("pi"), seed=0)
    assert len(result.epochs) == inst.eval_horizon
    for key in ("transport", "holding", "backorder"):
        total = sum(ep[key] for ep in result.epochs)
        assert total == pytest.approx(getattr(result, key), abs=1e-9)
    assert result.cost == result.transport + result.holding + result.backorder


def test_saving_metric():
    assert saving(60.0, 110.0, 10.0) == pytest.approx(0.5)
    assert saving(10.0, 110.0, 10.0) == pytest.approx(1.0)   # the PI row
    assert saving(110.0, 110.0, 10.0) == pytest.approx(0.0)  # the EV row
    assert saving(200.0, 110.0, 10.0) == pytest.approx(-0.9)
    assert saving(5.0, 7.0, 7.0) is None


def test_service_level_zero_demand():
    assert service_level(0.0, 0.0) == 1.0
    assert service_level(3.0, 4.0) == pytest.approx(0.75)


def test_truth_shape_validation():
    inst = one_retailer_instance()
    with pytest.raises(ValueError):
        run_episode(inst, np.zeros((2, 8)), Policy("pi"), seed=0)
    with pytest.raises(ValueError):  # needs eval_horizon + lookahead columns
        run_episode(inst, np.zeros((1, 5)), Policy("pi"), seed=0)


def test_policy_parsing_and_names():
    assert parse_policy("pi").name == "PI"
    assert parse_policy("EV").name == "EV"
    assert parse_policy("pto:mqrnn").name == "PtO-MQRNN"
    assert parse_policy("scpo-ss:lstm").name == "ScPO-SS-LSTM"
    assert parse_policy("scpo-ts:mle").name == "ScPO-TS-MLE"
    with pytest.raises(ValueError):
        parse_policy("bogus")
    with pytest.raises(ValueError):
        parse_policy("pto")  # missing predictor
    with pytest.raises(ValueError):
        parse_policy("ev:mqrnn")  # predictor on a predictor-free policy
    with pytest.raises(ValueError):
        Policy("scpo-ss", "mqrnn", n_scenarios=0)


def test_missing_model_is_an_error():
    # Configuration problems fail fast instead of degrading into no-ops.
    inst = one_retailer_instance()
    truth = np.zeros((1, 8))
    with pytest.raises(ValueError, match="mqrnn"):
        run_episode(inst, truth, Policy("pto", "mqrnn"), seed=0)


def test_solver_failure_falls_back_to_noop(monkeypatch, caplog):
    inst = service_case_instance()

    def boom(*args, **kwargs):
        raise RuntimeError("forced failure")

    monkeypatch.setattr("scpo.sim._solve_epoch", boom)
    with caplog.at_level(logging.WARNING, logger="scpo.sim"):
        result = run_episode(inst, service_case_truth(), Policy("pi"), seed=0)
    assert result.fallbacks == 1
    assert result.backorder == pytest.approx(3.0)  # the no-op outcome
    assert any("no-op" in r.message for r in caplog.records)


def test_snap_plan_removes_solver_dust():
    inst = one_retailer_instance(n_retailers=2,
                                 coords=((0, 0), (0, 5), (5, 0)),
                                 vehicle_capacity=5.0, inv_capacity=10.0,
                                 initial_inventory=(9.5, 0.0))
    state = State(epoch=0, inventories=inst.start_inventories(),
                  history=np.zeros((2, 4)))
    plan = Plan(routes=((1, 2),), deliveries=np.array([1.0, -1e-9]))
    snapped = _snap_plan(plan, state, inst)
    assert snapped.deliveries[0] == pytest.approx(0.5)  # shelf cap 10
    assert snapped.deliveries[1] == 0.0                 # negative dust
    ok, problems = validate_plan(state, snapped, inst)
    assert ok, problems

    heavy = Plan(routes=((1, 2),), deliveries=np.array([0.3, 5.0 + 1e-7]))
    state2 = State(epoch=0, inventories=np.zeros(2), history=np.zeros((2, 4)))
    snapped2 = _snap_plan(heavy, state2, inst)
    load = snapped2.deliveries.sum()
    assert load <= 5.0 + 1e-12
    ok2, problems2 = validate_plan(state2, snapped2, inst)
    assert ok2, problems2


def experiment_setup():
    return EpisodeSetup(instance=service_case_instance(),
                        truth=service_case_truth(),
                        history0=np.zeros((1, 4)), pattern="random")


def test_experiment_rows_and_metrics():
    policies = [Policy("pi"), Policy("ev"), Policy("emp")]
    report = run_experiment([experiment_setup()], policies, seeds=[0, 1])
    rows = {r["policy"]: r for r in report.rows}
    assert set(rows) == {"PI", "EV", "EMP"}
    assert rows["PI"]["cost"] == pytest.approx(1.0, abs=1e-6)
    assert rows["EV"]["cost"] == pytest.approx(3.0, abs=1e-6)
    assert rows["PI"]["delta_cost"] == pytest.approx(0.0, abs=1e-9)
    assert rows["EV"]["delta_cost"] == pytest.approx(2.0, abs=1e-6)
    assert rows["PI"]["saving"] == pytest.approx(1.0)
    assert rows["EV"]["saving"] == pytest.approx(0.0, abs=1e-9)
    assert rows["EMP"]["saving"] == pytest.approx(0.0, abs=1e-9)
    assert rows["PI"]["mse"] == 0.0
    assert rows["EV"]["mse"] == pytest.approx(8.0)
    assert len(report.episodes) == 6  # 3 policies x 2 seeds


def test_report_files_are_deterministic():
    policies = [Policy("pi"), Policy("ev")]
    first = run_experiment([experiment_setup()], policies, seeds=[0, 1])
    second = run_experiment([experiment_setup()], policies, seeds=[0, 1],
                            jobs=2)
    assert first.to_csv() == second.to_csv()
    assert first.to_json() == second.to_json()
    doc = json.loads(first.to_json())
    assert doc["format"] == REPORT_FORMAT
    assert "time" not in json.dumps(doc["episodes"])
    assert "mean_time" not in json.dumps(doc["rows"])
    side = first.sidecar()
    assert "generated_at" in side and "random/PI" in side["mean_time"]
    header = first.to_csv().splitlines()[0]
    assert header == "pattern,policy,cost,delta_cost,saving,mse,service"


def test_saving_column_na_when_gap_is_zero():
    # Zero demand: every policy no-ops, EV cost equals PI cost.
    inst = one_retailer_instance(initial_inventory=(4.0,))
    setup = EpisodeSetup(instance=inst, truth=np.zeros((1, 8)),
                         history0=np.zeros((1, 4)), pattern="random")
    report = run_experiment([setup], [Policy("pi"), Policy("ev")], seeds=[0])
    assert all(r["saving"] is None for r in report.rows)
    for line in report.to_csv().splitlines()[1:]:
        assert line.split(",")[4] == "NA"


def tiny_dataset():
    return generate_dataset("random", n_retailers=8, T=40, seed=3,
                            k_clusters=1, group_size=2)


def tiny_instance(dataset):
    return derive_instance(dataset, 0, n_vehicles=1, lookahead=2,
                           history_len=6, eval_horizon=2)


def test_setup_episode_slices_the_series():
    dataset = tiny_dataset()
    inst = tiny_instance(dataset)
    setup = setup_episode(dataset, 0, inst)
    group = list(dataset.groups[0])
    start = dataset.n_periods - inst.eval_horizon - inst.lookahead
    assert np.array_equal(setup.truth, dataset.series[group][:, start:])
    assert np.array_equal(setup.history0,
                          dataset.series[group][:, start - 6:start])
    assert setup.retailer_ids == dataset.groups[0]
    assert setup.pattern == "random"
    assert len(setup.day_of_year) == setup.truth.shape[1] + 6


def test_emp_and_pto_mle_episodes_run():
    dataset = tiny_dataset()
    inst = tiny_instance(dataset)
    setup = setup_episode(dataset, 0, inst)
    fits = mle_fit_per_retailer(setup.history0)
    setup = dataclasses.replace(setup, models={"mle": fits})
    for policy in (Policy("emp"), Policy("pto", "mle")):
        result = run_episode(setup.instance, setup.truth, policy, seed=5,
                             models=setup.models, history0=setup.history0,
                             day_of_year=setup.day_of_year,
                             day_of_week=setup.day_of_week,
                             retailer_ids=setup.retailer_ids,
                             pattern=setup.pattern)
        assert result.fallbacks == 0
        assert math.isfinite(result.cost) and result.cost >= 0
        assert 0.0 <= result.service <= 1.0


def test_scpo_ss_mqrnn_episode_runs():
    dataset = tiny_dataset()
    inst = tiny_instance(dataset)
    cfg = ForecastConfig(history_len=6, lookahead=2, hidden=4, context=3,
                         global_hidden=6, local_hidden=4, epochs=2, batch=16,
                         quantiles=(0.1, 0.5, 0.9), seed=0)
    model = mqrnn_train(dataset, cfg)
    setup = setup_episode(dataset, 0, inst, models={"mqrnn": model})
    policy = Policy("scpo-ss", "mqrnn", n_scenarios=4, time_limit=5.0)
    result = run_episode(setup.instance, setup.truth, policy, seed=1,
                         models=setup.models, history0=setup.history0,
                         day_of_year=setup.day_of_year,
                         day_of_week=setup.day_of_week,
                         retailer_ids=setup.retailer_ids,
                         pattern=setup.pattern)
    assert result.fallbacks == 0
    assert math.isfinite(result.cost)
    assert len(result.epochs) == inst.eval_horizon
    pto = run_episode(setup.instance, setup.truth, Policy("pto", "mqrnn"),
                      seed=1, models=setup.models, history0=setup.history0,
                      day_of_year=setup.day_of_year,
                      day_of_week=setup.day_of_week,
                      retailer_ids=setup.retailer_ids)
    assert pto.fallbacks == 0


def test_scpo_ts_mle_episode_runs():
    inst = one_retailer_instance(eval_horizon=2, lookahead=2,
                                 initial_inventory=(2.0,))
    truth = np.array([[3.0, 2.0, 1.0, 0.0]])
    history0 = np.array([[2.0, 3.0, 2.0, 1.0]])
    fits = mle_fit_per_retailer(history0)
    policy = Policy("scpo-ts", "mle", n_scenarios=3,
                    pha=PhaParams(max_iter=10, time_limit=5.0))
    result = run_episode(inst, truth, policy, seed=2,
                         models={"mle": fits}, history0=history0)
    assert result.fallbacks == 0
    assert math.isfinite(result.cost)
