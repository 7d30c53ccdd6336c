"""Rolling-horizon evaluation of replenishment policies.

Six policy families are supported, differing only in how they turn the
current state into a demand scenario set:

* ``PI`` — perfect information: the true future slice (one scenario);
* ``EV`` — per-retailer mean of the trailing history (one scenario);
* ``EMP`` — resampled historical periods (one scenario);
* ``PtO`` — a predictor's single point forecast (one scenario);
* ``ScPO-SS`` — a predictor-driven scenario set, shared-plan optimization;
* ``ScPO-TS`` — the same scenario set, two-stage consensus optimization.

Every epoch the policy's scenario set feeds the lookahead solver, the first
period of the solution is executed against the true demand, and costs,
service, and forecast error are accumulated.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import CostBreakdown, Instance, Plan, State, transition, validate_plan
from .datagen import DemandDataset, make_calendar
from .forecast import (
    LstmModel,
    MqrnnModel,
    ScenarioSet,
    forecast_mse,
    lstm_predict,
    lstm_scenarios,
    mle_scenarios_per_retailer,
    mqrnn_predict,
    sample_scenarios,
)
from .sirp import PhaParams, SirpProblem, extract_decision, matheuristic_solve, pha_solve

log = logging.getLogger(__name__)

REPORT_FORMAT = "scpo-report-v1"

POLICY_KINDS = ("pi", "ev", "emp", "pto", "scpo-ss", "scpo-ts")
PREDICTORS = ("mqrnn", "lstm", "mle")


@dataclass(frozen=True)
class Policy:
    """A decision rule: scenario source plus solver configuration."""

    kind: str
    predictor: str | None = None
    n_scenarios: int = 20
    time_limit: float = 10.0
    gap: float = 1e-4
    pha: PhaParams = field(default_factory=PhaParams)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        needs_predictor = self.kind in ("pto", "scpo-ss", "scpo-ts")
        if needs_predictor and self.predictor not in PREDICTORS:
            raise ValueError(f"policy {self.kind!r} needs a predictor from "
                             f"{PREDICTORS}, got {self.predictor!r}")
        if not needs_predictor and self.predictor is not None:
            raise ValueError(f"policy {self.kind!r} takes no predictor")
        if self.kind.startswith("scpo") and self.n_scenarios < 1:
            raise ValueError("scenario count must be positive")

    @property
    def name(self) -> str:
        base = {"pi": "PI", "ev": "EV", "emp": "EMP", "pto": "PtO",
                "scpo-ss": "ScPO-SS", "scpo-ts": "ScPO-TS"}[self.kind]
        return base if self.predictor is None else f"{base}-{self.predictor.upper()}"


def parse_policy(text: str, **kwargs) -> Policy:
    """Parse 'pi', 'pto:mqrnn', 'scpo-ss:lstm', ... into a Policy."""
    kind, _, predictor = text.strip().lower().partition(":")
    return Policy(kind=kind, predictor=predictor or None, **kwargs)


# ---------------------------------------------------------------------------
# Scenario generation per policy
# ---------------------------------------------------------------------------

def _require_model(models, key, policy_name):
    if not models or key not in models:
        raise ValueError(f"policy {policy_name} requires a trained "
                         f"'{key}' model")
    return models[key]


def _policy_scenarios(policy: Policy, state: State, epoch: int,
                      truth: np.ndarray, lookahead: int, models,
                      retailer_ids, doy, dow, rng) -> ScenarioSet:
    """Build this epoch's scenario set; the calendar slices cover the
    history window plus the lookahead (index epoch..epoch+L+ell)."""
    N, L = state.history.shape
    ell = lookahead
    if policy.kind == "pi":
        return ScenarioSet.single(truth[:, epoch:epoch + ell].copy())
    if policy.kind == "ev":
        mean = state.history.mean(axis=1, keepdims=True)
        return ScenarioSet.single(np.tile(mean, (1, ell)))
    if policy.kind == "emp":
        picks = rng.integers(0, L, size=ell)
        return ScenarioSet.single(state.history[:, picks].copy())

    cal_doy = doy[epoch:epoch + L + ell]
    cal_dow = dow[epoch:epoch + L + ell]
    if policy.predictor == "mqrnn":
        model: MqrnnModel = _require_model(models, "mqrnn", policy.name)
        forecast = mqrnn_predict(model, state.history, cal_doy, cal_dow)
        if policy.kind == "pto":
            mid = list(forecast.quantile_levels).index(0.5)
            return ScenarioSet.single(forecast.values[:, :, mid].copy())
        n_extra = policy.n_scenarios - len(forecast.quantile_levels)
        if n_extra < 0:
            raise ValueError("scenario count is below the quantile grid size")
        return sample_scenarios(forecast, n_extra, int(rng.integers(2 ** 31)))
    if policy.predictor == "lstm":
        model: LstmModel = _require_model(models, "lstm", policy.name)
        point = lstm_predict(model, state.history, cal_doy, cal_dow)
        if policy.kind == "pto":
            return ScenarioSet.single(point)
        ids = retailer_ids if retailer_ids is not None else range(N)
        return lstm_scenarios(model, point, ids, policy.n_scenarios,
                              int(rng.integers(2 ** 31)))
    if policy.predictor == "mle":
        fits = _require_model(models, "mle", policy.name)
        count = 1 if policy.kind == "pto" else policy.n_scenarios
        return mle_scenarios_per_retailer(fits, ell, count,
                                          int(rng.integers(2 ** 31)))
    raise ValueError(f"unhandled policy {policy.name}")  # pragma: no cover


# ---------------------------------------------------------------------------
# Episode execution
# ---------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    policy: str
    pattern: str
    seed: int
    transport: float
    holding: float
    backorder: float
    service: float
    mse: float
    mean_time: float
    fallbacks: int
    epochs: list[dict]

    @property
    def cost(self) -> float:
        return self.transport + self.holding + self.backorder


def _snap_plan(plan: Plan, state: State, inst: Instance) -> Plan:
    """Remove solver-tolerance dust so the plan passes strict validation."""
    u = np.maximum(np.asarray(plan.deliveries, dtype=float), 0.0)
    over = state.inventories + u - inst.inv_capacity
    u = np.where(over > 0, u - np.minimum(u, over), u)
    for route in plan.routes:
        if not route:
            continue
        idx = [i - 1 for i in route]
        load = float(u[idx].sum())
        if load > inst.vehicle_capacity and load > 0:
            u[idx] *= inst.vehicle_capacity / load
    return Plan(routes=plan.routes, deliveries=u)


def _solve_epoch(policy: Policy, instance: Instance, state: State,
                 scen: ScenarioSet):
    problem = SirpProblem(instance, state.inventories.copy(), scen)
    if policy.kind == "scpo-ts":
        solution = pha_solve(problem, policy.pha)
    else:
        solution = matheuristic_solve(problem, time_limit=policy.time_limit,
                                      gap=policy.gap)
    return extract_decision(solution, instance)


def run_episode(instance: Instance, demand_truth: np.ndarray, policy: Policy,
                seed: int, *, models=None, history0=None, day_of_year=None,
                day_of_week=None, retailer_ids=None, pattern: str = "",
                collect: bool = True) -> EpisodeResult:
    """Roll the policy forward over `eval_horizon` epochs of true demand.

    `demand_truth` is (N, K) with K >= eval_horizon + lookahead (the tail is
    visible only to the perfect-information policy).  `history0` seeds the
    demand window (defaults to the truth's per-retailer mean); the calendar
    arrays cover history plus truth (length >= history_len + K).
    """
    truth = np.asarray(demand_truth, dtype=float)
    N = instance.n_retailers
    L, ell, K = instance.history_len, instance.lookahead, truth.shape[1]
    horizon = instance.eval_horizon
    if truth.shape[0] != N:
        raise ValueError("truth must have one row per retailer")
    if K < horizon + ell:
        raise ValueError("truth must cover eval_horizon + lookahead periods")
    if history0 is None:
        mean = truth[:, :horizon].mean(axis=1, keepdims=True)
        history0 = np.tile(mean, (1, L))
    history0 = np.asarray(history0, dtype=float)
    if day_of_year is None or day_of_week is None:
        day_of_year, day_of_week = make_calendar(L + K)
    day_of_year = np.asarray(day_of_year)
    day_of_week = np.asarray(day_of_week)
    if len(day_of_year) < L + horizon + ell:
        raise ValueError("calendar too short for history plus lookahead")

    rng = np.random.default_rng(seed)
    state = State(epoch=0, inventories=instance.start_inventories(),
                  history=history0)
    transport = holding = backorder = 0.0
    sat_num = sat_den = 0.0
    mses: list[float] = []
    times: list[float] = []
    fallbacks = 0
    trace: list[dict] = []

    for k in range(horizon):
        scen = _policy_scenarios(policy, state, k, truth, ell, models,
                                 retailer_ids, day_of_year, day_of_week, rng)
        start = time.perf_counter()
        try:
            plan = _snap_plan(_solve_epoch(policy, instance, state, scen),
                              state, instance)
            ok, problems = validate_plan(state, plan, instance)
            if not ok:
                raise RuntimeError("invalid plan: " + "; ".join(problems))
        except Exception:
            log.warning("epoch %d: solver failed for %s; executing no-op",
                        k, policy.name, exc_info=True)
            plan = Plan.empty(instance)
            fallbacks += 1
        elapsed = time.perf_counter() - start
        times.append(elapsed)

        demand = truth[:, k]
        available = np.maximum(state.inventories + plan.deliveries, 0.0)
        sat_num += float(np.minimum(demand, available).sum())
        sat_den += float(demand.sum())
        mse = forecast_mse(scen.mean_scenario(), truth[:, k:k + ell])
        mses.append(mse)
        state, cost = transition(state, plan, demand, instance)
        transport += cost.transport
        holding += cost.holding
        backorder += cost.backorder
        if collect:
            trace.append({
                "epoch": k,
                "routes": [list(r) for r in plan.routes],
                "deliveries": [round(float(x), 9) for x in plan.deliveries],
                "transport": cost.transport,
                "holding": cost.holding,
                "backorder": cost.backorder,
                "mse": mse,
                "time": elapsed,
            })

    service = 1.0 if sat_den == 0 else sat_num / sat_den
    return EpisodeResult(
        policy=policy.name, pattern=pattern, seed=seed,
        transport=transport, holding=holding, backorder=backorder,
        service=service, mse=float(np.mean(mses)) if mses else 0.0,
        mean_time=float(np.mean(times)) if times else 0.0,
        fallbacks=fallbacks, epochs=trace)


# ---------------------------------------------------------------------------
# Metrics and the experiment driver
# ---------------------------------------------------------------------------

def saving(cost_m: float, cost_ev: float, cost_pi: float) -> float | None:
    """Fraction of the EV-to-PI gap closed; None when the gap is zero."""
    gap = cost_ev - cost_pi
    if gap == 0:
        return None
    return 1.0 - (cost_m - cost_pi) / gap


def service_level(satisfied: float, total: float) -> float:
    return 1.0 if total == 0 else satisfied / total


@dataclass(frozen=True)
class EpisodeSetup:
    """Everything one episode needs besides policy and seed."""

    instance: Instance
    truth: np.ndarray
    history0: np.ndarray | None = None
    day_of_year: np.ndarray | None = None
    day_of_week: np.ndarray | None = None
    retailer_ids: tuple[int, ...] | None = None
    pattern: str = ""
    models: dict | None = None


def setup_episode(dataset: DemandDataset, group_index: int,
                  instance: Instance, models=None) -> EpisodeSetup:
    """Wire one retailer group of a dataset into an episode.

    Evaluation covers the last `eval_horizon` periods that still leave a
    full lookahead window inside the series; the preceding `history_len`
    periods seed the demand window.
    """
    T = dataset.n_periods
    L, ell = instance.history_len, instance.lookahead
    start = T - instance.eval_horizon - ell
    if start < L:
        raise ValueError("series too short for warm-up plus evaluation")
    group = dataset.groups[group_index]
    series = dataset.series[list(group)]
    return EpisodeSetup(
        instance=instance,
        truth=series[:, start:],
        history0=series[:, start - L:start],
        day_of_year=dataset.day_of_year[start - L:],
        day_of_week=dataset.day_of_week[start - L:],
        retailer_ids=tuple(group),
        pattern=dataset.pattern,
        models=models)


@dataclass
class SimReport:
    """Aggregated metrics (one row per pattern x policy) plus episode data."""

    rows: list[dict]
    episodes: list[EpisodeResult]

    def to_csv(self) -> str:
        lines = ["pattern,policy,cost,delta_cost,saving,mse,service"]
        for r in self.rows:
            sv = "NA" if r["saving"] is None else f"{r['saving']:.6f}"
            lines.append(
                f"{r['pattern']},{r['policy']},{r['cost']:.6f},"
                f"{r['delta_cost']:.6f},{sv},{r['mse']:.6f},{r['service']:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        rows = [{k: v for k, v in r.items() if k != "mean_time"}
                for r in self.rows]
        eps = [{
            "policy": e.policy, "pattern": e.pattern, "seed": e.seed,
            "transport": e.transport, "holding": e.holding,
            "backorder": e.backorder, "service": e.service, "mse": e.mse,
            "fallbacks": e.fallbacks, "epochs": [
                {k: v for k, v in ep.items() if k != "time"}
                for ep in e.epochs],
        } for e in self.episodes]
        return json.dumps({"format": REPORT_FORMAT, "rows": rows,
                           "episodes": eps}, indent=1)

    def sidecar(self) -> dict:
        """Wall-clock data kept out of the deterministic report files."""
        return {
            "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "mean_time": {f"{r['pattern']}/{r['policy']}": r["mean_time"]
                          for r in self.rows},
        }


def run_experiment(setups, policies, seeds, jobs: int = 1) -> SimReport:
    """Run every (setup, policy, seed) episode and average per pattern.

    ΔCost and Saving compare each policy's mean cost to the PI and EV rows
    of the same pattern (0/None when those policies were not run).
    """
    tasks = [(setup, policy, seed)
             for setup in setups for policy in policies for seed in seeds]

    def run_one(task):
        setup, policy, seed = task
        return run_episode(
            setup.instance, setup.truth, policy, seed, models=setup.models,
            history0=setup.history0, day_of_year=setup.day_of_year,
            day_of_week=setup.day_of_week, retailer_ids=setup.retailer_ids,
            pattern=setup.pattern)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            episodes = list(pool.map(run_one, tasks))
    else:
        episodes = [run_one(t) for t in tasks]

    patterns = []
    for setup in setups:
        if setup.pattern not in patterns:
            patterns.append(setup.pattern)
    rows = []
    for pattern in patterns:
        by_policy = {}
        for policy in policies:
            eps = [e for e in episodes
                   if e.pattern == pattern and e.policy == policy.name]
            by_policy[policy.name] = {
                "cost": float(np.mean([e.cost for e in eps])),
                "mse": float(np.mean([e.mse for e in eps])),
                "service": float(np.mean([e.service for e in eps])),
                "mean_time": float(np.mean([e.mean_time for e in eps])),
            }
        cost_pi = by_policy.get("PI", {}).get("cost")
        cost_ev = by_policy.get("EV", {}).get("cost")
        for policy in policies:
            agg = by_policy[policy.name]
            delta = agg["cost"] - cost_pi if cost_pi is not None else 0.0
            sav = (saving(agg["cost"], cost_ev, cost_pi)
                   if cost_pi is not None and cost_ev is not None else None)
            rows.append({
                "pattern": pattern, "policy": policy.name,
                "cost": agg["cost"], "delta_cost": delta, "saving": sav,
                "mse": agg["mse"], "service": agg["service"],
                "mean_time": agg["mean_time"],
            })
    return SimReport(rows=rows, episodes=episodes)
