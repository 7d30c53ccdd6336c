"""Command-line pipeline: ``gen`` data, ``train`` forecasters, ``run``
experiments, ``report`` result tables.

Configuration precedence, highest first: command-line flag, config file
(flat ``key = value`` lines named after RunConfig fields), the SCPO_SEED
environment variable (seed only), built-in default.  Every artifact is
byte-deterministic for a fixed config and seed; wall-clock data goes to a
sidecar metadata file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .datagen import PATTERNS, DemandDataset, derive_instance, generate_dataset
from .forecast import (
    DEFAULT_QUANTILES,
    ForecastConfig,
    LstmModel,
    MqrnnModel,
    lstm_train,
    mle_fit_per_retailer,
    mqrnn_train,
)
from .sim import Policy, parse_policy, run_experiment, setup_episode
from .sirp import PhaParams

E_USAGE = "E_USAGE"        # bad flags, unknown names, malformed config
E_VALUE = "E_VALUE"        # numeric values out of range, non-finite loss
E_IO = "E_IO"              # missing or unwritable files
E_FORMAT = "E_FORMAT"      # unparseable or wrong-format artifact files
E_MISMATCH = "E_MISMATCH"  # checkpoint incompatible with the run setup


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Every tunable of the pipeline with its built-in default."""

    seed: int = 0
    out: str = "."
    jobs: int = 1
    # data generation
    pattern: str = "random"
    retailers: int = 60
    periods: int = 366
    clusters: int = 3
    group_size: int = 5
    # instance shape and cost rates
    vehicles: int = 2
    lookahead: int = 5
    history_len: int = 14
    eval_horizon: int = 30
    holding_cost: float = 0.3
    backorder_cost: float = 3.0
    transport_scale: float = 0.05
    # forecaster training
    epochs: int = 30
    hidden: int = 32
    context: int = 16
    global_hidden: int = 64
    local_hidden: int = 32
    lr: float = 1e-3
    batch: int = 64
    quantiles: str = ""      # comma list; empty keeps the standard grid
    lookaheads: str = ""     # comma list for train; empty -> [lookahead]
    # experiment execution
    dataset: str = ""
    mqrnn: str = ""
    lstm: str = ""
    group: int = -1          # -1 runs every retailer group
    policies: str = "pi,ev"
    episodes: int = 1
    scenarios: int = 20
    time_limit: float = 10.0
    gap: float = 1e-4
    rho0: float = 0.001
    beta_d: float = 1.05
    beta_p: float = 1.05
    beta0: float = 1.2
    pha_eps: float = 0.1
    pha_max_iter: int = 50
    prefix: str = "report"


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise CliError(E_USAGE, f"bad value for {name}: {raw!r}") from exc


def read_config_file(path: str) -> dict:
    """Flat 'key = value' lines; blank lines and # comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(E_IO, f"cannot read config file {path}: {exc}") from exc
    values = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(E_USAGE, f"{path}:{ln}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELD_TYPES:
            raise CliError(E_USAGE, f"{path}:{ln}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def merge_config(flags: dict) -> RunConfig:
    values = dataclasses.asdict(RunConfig())
    env_seed = os.environ.get("SCPO_SEED")
    if env_seed is not None:
        values["seed"] = _coerce("seed", env_seed)
    if flags.get("config"):
        values.update(read_config_file(flags["config"]))
    for key, val in flags.items():
        if key != "config" and val is not None:
            values[key] = val
    return RunConfig(**values)


def validate_config(c: RunConfig) -> None:
    checks = [
        (c.retailers >= 1, "retailers must be >= 1"),
        (c.periods >= 2, "periods must be >= 2"),
        (c.clusters >= 1 and c.group_size >= 1, "clusters and group_size must be >= 1"),
        (c.vehicles >= 1, "vehicles must be >= 1"),
        (1 <= c.lookahead <= c.history_len, "need 1 <= lookahead <= history_len"),
        (c.eval_horizon >= 1, "eval_horizon must be >= 1"),
        (min(c.holding_cost, c.backorder_cost, c.transport_scale) >= 0,
         "cost rates must be nonnegative"),
        (c.epochs >= 1 and c.batch >= 1, "epochs and batch must be >= 1"),
        (c.lr > 0, "lr must be positive"),
        (c.episodes >= 1, "episodes must be >= 1"),
        (c.scenarios >= 1, "scenarios must be >= 1"),
        (c.time_limit > 0, "time_limit must be positive"),
        (c.gap >= 0, "gap must be nonnegative"),
        (c.jobs >= 1, "jobs must be >= 1"),
        (min(c.rho0, c.beta_d, c.beta_p, c.beta0, c.pha_eps) > 0,
         "PHA parameters must be positive"),
        (c.pha_max_iter >= 1, "pha_max_iter must be >= 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise CliError(E_VALUE, message)


def _parse_quantiles(text: str) -> tuple[float, ...]:
    if not text:
        return DEFAULT_QUANTILES
    try:
        qs = tuple(float(q) for q in text.split(","))
    except ValueError as exc:
        raise CliError(E_USAGE, f"bad quantile list {text!r}") from exc
    if not all(0 < q < 1 for q in qs) or list(qs) != sorted(set(qs)):
        raise CliError(E_VALUE, "quantiles must be strictly increasing in (0, 1)")
    return qs


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise CliError(E_IO, f"cannot write {path}: {exc}") from exc


def _load_dataset(path: str) -> DemandDataset:
    if not path:
        raise CliError(E_USAGE, "a --dataset file is required")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(E_IO, f"cannot read dataset {path}: {exc}") from exc
    try:
        return DemandDataset.from_json(text)
    except (ValueError, KeyError) as exc:
        raise CliError(E_FORMAT, f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(config: RunConfig, stdout) -> None:
    if config.pattern not in PATTERNS:
        raise CliError(E_USAGE, f"unknown pattern {config.pattern!r}; "
                                f"choose from {', '.join(PATTERNS)}")
    dataset = generate_dataset(config.pattern, config.retailers,
                               config.periods, config.seed,
                               config.clusters, config.group_size)
    out = Path(config.out)
    dataset_path = out / f"dataset-{config.pattern}.json"
    _write(dataset_path, dataset.to_json())
    paths = [dataset_path]
    for g in range(len(dataset.groups)):
        inst = derive_instance(
            dataset, g, n_vehicles=config.vehicles,
            lookahead=config.lookahead, history_len=config.history_len,
            eval_horizon=config.eval_horizon,
            holding_cost=config.holding_cost,
            backorder_cost=config.backorder_cost,
            transport_scale=config.transport_scale, rng_seed=config.seed)
        path = out / f"instance-{config.pattern}-{g:02d}.json"
        _write(path, inst.to_json())
        paths.append(path)
    series = dataset.series
    print(f"pattern={config.pattern} retailers={dataset.n_retailers} "
          f"periods={dataset.n_periods} groups={len(dataset.groups)}",
          file=stdout)
    print(f"train_retailers={len(dataset.train_idx)} "
          f"test_retailers={len(dataset.test_idx)} "
          f"demand_mean={series.mean():.4f} demand_std={series.std():.4f}",
          file=stdout)
    for path in paths:
        print(f"wrote {path}", file=stdout)


def _forecast_config(config: RunConfig, lookahead: int) -> ForecastConfig:
    return ForecastConfig(
        history_len=config.history_len, lookahead=lookahead,
        hidden=config.hidden, context=config.context,
        global_hidden=config.global_hidden, local_hidden=config.local_hidden,
        epochs=config.epochs, lr=config.lr, batch=config.batch,
        seed=config.seed, quantiles=_parse_quantiles(config.quantiles))


def _check_losses(name: str, losses) -> None:
    if not all(math.isfinite(x) for x in losses):
        raise CliError(E_VALUE, f"{name}: training diverged (non-finite loss)")


def cmd_train(config: RunConfig, stdout) -> None:
    dataset = _load_dataset(config.dataset)
    if config.lookaheads:
        try:
            ells = [int(x) for x in config.lookaheads.split(",")]
        except ValueError as exc:
            raise CliError(E_USAGE, f"bad lookahead list {config.lookaheads!r}") from exc
    else:
        ells = [config.lookahead]
    if any(not 1 <= ell <= config.history_len for ell in ells):
        raise CliError(E_VALUE, "each lookahead must lie in [1, history_len]")
    out = Path(config.out)
    log_rows = ["model,epoch,loss"]
    for ell in ells:
        model = mqrnn_train(dataset, _forecast_config(config, ell))
        _check_losses(f"mqrnn-l{ell}", model.epoch_losses)
        path = out / f"mqrnn-l{ell}.json"
        _write(path, model.to_json())
        log_rows += [f"mqrnn-l{ell},{i},{loss:.10f}"
                     for i, loss in enumerate(model.epoch_losses)]
        print(f"wrote {path} (final loss {model.epoch_losses[-1]:.6f})",
              file=stdout)
    lstm = lstm_train(dataset, _forecast_config(config, ells[0]))
    _check_losses("lstm", lstm.epoch_losses)
    lstm_path = out / "lstm.json"
    _write(lstm_path, lstm.to_json())
    log_rows += [f"lstm,{i},{loss:.10f}"
                 for i, loss in enumerate(lstm.epoch_losses)]
    print(f"wrote {lstm_path} (final loss {lstm.epoch_losses[-1]:.6f})",
          file=stdout)
    log_path = out / "training-log.csv"
    _write(log_path, "\n".join(log_rows) + "\n")
    print(f"wrote {log_path}", file=stdout)


def _parse_policies(config: RunConfig) -> list[Policy]:
    pha = PhaParams(rho0=config.rho0, beta_d=config.beta_d,
                    beta_p=config.beta_p, beta0=config.beta0,
                    eps=config.pha_eps, max_iter=config.pha_max_iter,
                    time_limit=config.time_limit, gap=config.gap)
    policies = []
    for text in config.policies.split(","):
        try:
            policies.append(parse_policy(text, n_scenarios=config.scenarios,
                                         time_limit=config.time_limit,
                                         gap=config.gap, pha=pha))
        except ValueError as exc:
            raise CliError(E_USAGE, str(exc)) from exc
    if not policies:
        raise CliError(E_USAGE, "at least one policy is required")
    return policies


def _load_checkpoint(path: str, loader, what: str):
    if not path:
        raise CliError(E_USAGE, f"a --{what} checkpoint is required "
                                f"by the requested policies")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(E_IO, f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return loader(text)
    except (ValueError, KeyError) as exc:
        raise CliError(E_FORMAT, f"{path}: {exc}") from exc


def _check_model(name: str, cfg: ForecastConfig, config: RunConfig) -> None:
    if cfg.lookahead != config.lookahead or cfg.history_len != config.history_len:
        raise CliError(
            E_MISMATCH,
            f"{name} checkpoint was trained for history_len={cfg.history_len} "
            f"lookahead={cfg.lookahead}, but the run uses "
            f"history_len={config.history_len} lookahead={config.lookahead}")


def cmd_run(config: RunConfig, stdout) -> None:
    dataset = _load_dataset(config.dataset)
    policies = _parse_policies(config)
    predictors = {p.predictor for p in policies if p.predictor}

    shared: dict = {}
    if "mqrnn" in predictors:
        model = _load_checkpoint(config.mqrnn, MqrnnModel.from_json, "mqrnn")
        _check_model("mqrnn", model.config, config)
        shared["mqrnn"] = model
    if "lstm" in predictors:
        model = _load_checkpoint(config.lstm, LstmModel.from_json, "lstm")
        _check_model("lstm", model.config, config)
        shared["lstm"] = model

    if config.group >= len(dataset.groups):
        raise CliError(E_VALUE, f"group {config.group} out of range "
                                f"(dataset has {len(dataset.groups)} groups)")
    group_ids = ([config.group] if config.group >= 0
                 else range(len(dataset.groups)))
    setups = []
    for g in group_ids:
        inst = derive_instance(
            dataset, g, n_vehicles=config.vehicles,
            lookahead=config.lookahead, history_len=config.history_len,
            eval_horizon=config.eval_horizon,
            holding_cost=config.holding_cost,
            backorder_cost=config.backorder_cost,
            transport_scale=config.transport_scale, rng_seed=config.seed)
        try:
            setup = setup_episode(dataset, g, inst, models=shared)
        except ValueError as exc:
            raise CliError(E_VALUE, str(exc)) from exc
        if "mle" in predictors:
            models = dict(shared)
            models["mle"] = mle_fit_per_retailer(setup.history0)
            setup = dataclasses.replace(setup, models=models)
        setups.append(setup)

    seeds = [config.seed + i for i in range(config.episodes)]
    report = run_experiment(setups, policies, seeds, jobs=config.jobs)

    out = Path(config.out)
    csv_path = out / f"{config.prefix}.csv"
    json_path = out / f"{config.prefix}.json"
    meta_path = out / f"{config.prefix}-meta.json"
    _write(csv_path, report.to_csv())
    _write(json_path, report.to_json())
    meta = report.sidecar()
    meta["host"] = platform.node()
    meta["platform"] = platform.platform()
    meta["elapsed"] = time.process_time()
    _write(meta_path, json.dumps(meta, indent=1))
    for path in (csv_path, json_path, meta_path):
        print(f"wrote {path}", file=stdout)
    print(render_table(json.loads(report.to_json())["rows"],
                       meta["mean_time"]), file=stdout)


METRICS = ("Cost", "DeltaCost", "Saving", "MSE", "Service", "Time")


def render_table(rows: list[dict], times: dict | None = None) -> str:
    """Six metrics per pattern, one column per policy, fixed order."""
    policies: list[str] = []
    patterns: list[str] = []
    for r in rows:
        if r["policy"] not in policies:
            policies.append(r["policy"])
        if r["pattern"] not in patterns:
            patterns.append(r["pattern"])
    header = ["pattern", "metric"] + policies
    table = [header]
    cell = {(r["pattern"], r["policy"]): r for r in rows}
    for pattern in patterns:
        for metric in METRICS:
            line = [pattern, metric]
            for policy in policies:
                r = cell.get((pattern, policy))
                line.append("-" if r is None else _metric_text(r, metric, times))
            table.append(line)
    widths = [max(len(row[c]) for row in table) for c in range(len(header))]
    return "\n".join(
        "  ".join(cellv.rjust(w) if idx >= 2 else cellv.ljust(w)
                  for idx, (cellv, w) in enumerate(zip(row, widths)))
        for row in table)


def _metric_text(row: dict, metric: str, times: dict | None) -> str:
    if metric == "Cost":
        return f"{row['cost']:.1f}"
    if metric == "DeltaCost":
        return f"{row['delta_cost']:.1f}"
    if metric == "Saving":
        sv = row.get("saving")
        return "NA" if sv is None else f"{round(100 * sv)}%"
    if metric == "MSE":
        return f"{row['mse']:.2f}"
    if metric == "Service":
        return f"{row['service']:.3f}"
    key = f"{row['pattern']}/{row['policy']}"
    if times and key in times:
        return f"{times[key]:.2f}s"
    return "-"


def cmd_report(paths: list[str], stdout) -> None:
    rows: list[dict] = []
    times: dict = {}
    for path in paths:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(E_IO, f"cannot read report {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(E_FORMAT, f"{path}: {exc}") from exc
        if doc.get("format") != "scpo-report-v1":
            raise CliError(E_FORMAT, f"{path}: unsupported report format "
                                     f"{doc.get('format')!r}")
        rows.extend(doc["rows"])
        sidecar = Path(path).with_name(Path(path).stem + "-meta.json")
        if sidecar.exists():
            try:
                times.update(json.loads(sidecar.read_text()).get("mean_time", {}))
            except (OSError, json.JSONDecodeError):
                pass  # timing is optional decoration
    print(render_table(rows, times), file=stdout)


# ---------------------------------------------------------------------------
# Argument parsing and entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: {E_USAGE}: {message}\n")


_HELP = {
    "seed": "master random seed (also settable via SCPO_SEED)",
    "out": "output directory",
    "jobs": "max parallel episodes",
    "pattern": f"demand pattern: {', '.join(PATTERNS)}",
    "retailers": "total retailers to simulate",
    "periods": "number of demand periods",
    "clusters": "retailer clusters among the test split",
    "group_size": "retailers per evaluation group",
    "vehicles": "fleet size per instance",
    "lookahead": "planning horizon per epoch",
    "history_len": "demand window length",
    "eval_horizon": "number of evaluated epochs",
    "holding_cost": "per-unit holding cost rate",
    "backorder_cost": "per-unit backorder cost rate",
    "transport_scale": "cost per unit distance",
    "epochs": "training epochs",
    "hidden": "encoder width",
    "context": "per-horizon context width",
    "global_hidden": "global decoder width",
    "local_hidden": "local decoder width",
    "lr": "learning rate",
    "batch": "minibatch size",
    "quantiles": "comma list of quantile levels",
    "lookaheads": "comma list of horizons to train (default: --lookahead)",
    "dataset": "dataset JSON produced by gen",
    "mqrnn": "quantile-forecaster checkpoint",
    "lstm": "point-forecaster checkpoint",
    "group": "retailer group index (-1 = all groups)",
    "policies": "comma list, e.g. pi,ev,emp,pto:mqrnn,scpo-ss:mqrnn",
    "episodes": "episodes (seeds) per policy and group",
    "scenarios": "scenario count for scenario-based policies",
    "time_limit": "solver time limit per stage, seconds",
    "gap": "solver relative gap tolerance",
    "rho0": "initial consensus penalty weight",
    "beta_d": "penalty growth factor",
    "beta_p": "penalty shrink factor",
    "beta0": "penalty boost once routes freeze",
    "pha_eps": "consensus residual threshold",
    "pha_max_iter": "max consensus iterations",
    "prefix": "basename for report files",
}

_COMMAND_FIELDS = {
    "gen": ("seed", "out", "pattern", "retailers", "periods", "clusters",
            "group_size", "vehicles", "lookahead", "history_len",
            "eval_horizon", "holding_cost", "backorder_cost",
            "transport_scale"),
    "train": ("seed", "out", "dataset", "lookahead", "lookaheads",
              "history_len", "epochs", "hidden", "context", "global_hidden",
              "local_hidden", "lr", "batch", "quantiles"),
    "run": ("seed", "out", "jobs", "dataset", "mqrnn", "lstm", "group",
            "policies", "episodes", "scenarios", "time_limit", "gap",
            "vehicles", "lookahead", "history_len", "eval_horizon",
            "holding_cost", "backorder_cost", "transport_scale",
            "rho0", "beta_d", "beta_p", "beta0", "pha_eps", "pha_max_iter",
            "prefix"),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="scpo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for command, fields in _COMMAND_FIELDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="flat key = value config file")
        for name in fields:
            kind = _FIELD_TYPES[name]
            typ = int if kind in ("int", int) else (
                float if kind in ("float", float) else str)
            p.add_argument(f"--{name.replace('_', '-')}", dest=name,
                           type=typ, default=None, help=_HELP[name])
    rep = sub.add_parser("report")
    rep.add_argument("traces", nargs="+", help="report JSON files to render")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "report":
            cmd_report(args.traces, sys.stdout)
            return 0
        flags = {k: v for k, v in vars(args).items() if k != "command"}
        config = merge_config(flags)
        validate_config(config)
        {"gen": cmd_gen, "train": cmd_train, "run": cmd_run}[args.command](
            config, sys.stdout)
        return 0
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2 if exc.code == E_USAGE else 1


if __name__ == "__main__":
    sys.exit(main())
