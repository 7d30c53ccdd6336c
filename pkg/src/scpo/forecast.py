"""Demand forecasting and scenario generation.

Three predictor families feed the optimizer:

* MQRNN — a sequence-to-sequence quantile forecaster: an LSTM encoder reads
  (demand, day-of-year, day-of-week) steps, a global MLP turns the final
  hidden state plus future calendar features into per-horizon contexts and
  one horizon-agnostic context, and a local MLP maps each horizon's contexts
  to a grid of quantiles trained under pinball loss.
* LSTM point forecaster — one-step-ahead squared-loss regressor applied
  recursively for multiple horizons, with Normal residual fits for sampling.
* MLE marginal fitting — picks among five classical distributions by
  chi-square goodness of fit and samples i.i.d. futures.

Scenario sets bundle equally weighted demand matrices for the optimizer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .nn import (
    Adam,
    Graph,
    ParamStore,
    dense,
    dense_params,
    lstm_cell,
    lstm_params,
    quantile_loss_node,
    squared_loss_node,
)

DEFAULT_QUANTILES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


# -- shared containers ---------------------------------------------------------

@dataclass
class QuantileForecast:
    """Per-retailer, per-horizon quantile grid, non-decreasing across levels."""

    values: np.ndarray  # (N, horizon, |levels|)
    quantile_levels: tuple[float, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[2] != len(self.quantile_levels):
            raise ValueError("quantile grid must be (retailers, horizon, levels)")
        if np.any(self.values < -1e-9):
            raise ValueError("quantile values must be non-negative")
        if np.any(np.diff(self.values, axis=2) < -1e-9):
            raise ValueError("quantile values must be non-decreasing across levels")


@dataclass
class ScenarioSet:
    """Equally shaped demand matrices with probabilities summing to one."""

    scenarios: list[np.ndarray]  # each (N, horizon)
    probabilities: np.ndarray

    def __post_init__(self):
        self.scenarios = [np.asarray(s, dtype=float) for s in self.scenarios]
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        if len(self.scenarios) != self.probabilities.size or not self.scenarios:
            raise ValueError("need one probability per scenario")
        shape = self.scenarios[0].shape
        if any(s.shape != shape for s in self.scenarios):
            raise ValueError("scenarios must share one shape")
        if any(np.any(s < 0) for s in self.scenarios):
            raise ValueError("scenario demands must be non-negative")
        if abs(float(self.probabilities.sum()) - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")

    def __len__(self) -> int:
        return len(self.scenarios)

    @property
    def n_retailers(self) -> int:
        return self.scenarios[0].shape[0]

    @property
    def horizon(self) -> int:
        return self.scenarios[0].shape[1]

    def mean_scenario(self) -> np.ndarray:
        """Probability-weighted mean demand matrix."""
        out = np.zeros_like(self.scenarios[0])
        for p, s in zip(self.probabilities, self.scenarios):
            out += p * s
        return out

    @staticmethod
    def single(matrix: np.ndarray) -> "ScenarioSet":
        return ScenarioSet([np.asarray(matrix, dtype=float)], np.array([1.0]))


def _uniform_probs(n: int) -> np.ndarray:
    p = np.full(n, 1.0 / n)
    for _ in range(3):
        gap = 1.0 - float(p.sum())
        if gap == 0.0:
            break
        p[-1] += gap
    return p


@dataclass(frozen=True)
class ForecastConfig:
    history_len: int = 14
    lookahead: int = 5
    hidden: int = 32           # encoder / point-forecast LSTM width
    context: int = 16          # per-horizon context width
    global_hidden: int = 64
    local_hidden: int = 32
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES

    def to_dict(self) -> dict:
        return {
            "history_len": self.history_len, "lookahead": self.lookahead,
            "hidden": self.hidden, "context": self.context,
            "global_hidden": self.global_hidden, "local_hidden": self.local_hidden,
            "epochs": self.epochs, "lr": self.lr, "batch": self.batch,
            "seed": self.seed, "quantiles": list(self.quantiles),
        }

    @staticmethod
    def from_dict(d: dict) -> "ForecastConfig":
        d = dict(d)
        d["quantiles"] = tuple(d.get("quantiles", DEFAULT_QUANTILES))
        return ForecastConfig(**d)


# -- window preparation --------------------------------------------------------

def _calendar_features(doy: np.ndarray, dow: np.ndarray) -> np.ndarray:
    return np.stack([np.asarray(doy, dtype=float) / 366.0,
                     np.asarray(dow, dtype=float) / 7.0], axis=1)


def _window_scale(hist: np.ndarray) -> float:
    """Normalizer for one input window: its own mean demand (at least 1).

    Per-window scaling keeps every training example at unit magnitude, so one
    network serves retailers whose demand levels differ by orders of
    magnitude, and a drifting series stays in-distribution at the horizon
    end."""
    return max(1.0, float(hist.mean()))


def _training_windows(dataset, cfg: ForecastConfig):
    """Sliding windows over every training retailer.

    Returns (X_hist, A_future, Y) with rows = windows:
      X_hist  (n, 3L): per history step [scaled demand, doy/366, dow/7]
      A_future (n, 2*lookahead): future [doy/366, dow/7]
      Y       (n, lookahead): scaled targets
    plus the retailer index of each window and the per-window scale s.
    """
    L, ell = cfg.history_len, cfg.lookahead
    T = dataset.series.shape[1]
    if T < L + ell:
        raise ValueError(f"series length {T} shorter than history+lookahead {L + ell}")
    cal = _calendar_features(dataset.day_of_year, dataset.day_of_week)
    xs, afs, ys, owners, scales = [], [], [], [], []
    for r in dataset.train_idx:
        row = dataset.series[r]
        for k in range(L, T - ell + 1):
            s = _window_scale(row[k - L:k])
            hist = np.column_stack([row[k - L:k] / s, cal[k - L:k]]).ravel()
            xs.append(hist)
            afs.append(cal[k:k + ell].ravel())
            ys.append(row[k:k + ell] / s)
            owners.append(r)
            scales.append(s)
    return (np.asarray(xs), np.asarray(afs), np.asarray(ys),
            np.asarray(owners), np.asarray(scales))


# -- MQRNN ----------------------------------------------------------------------

@dataclass
class MqrnnModel:
    store: ParamStore
    config: ForecastConfig
    scale: float
    epoch_losses: list[float] = field(default_factory=list)
    _graphs: dict = field(default_factory=dict, repr=False, compare=False)

    def to_json(self) -> str:
        return self.store.to_json(meta={
            "kind": "mqrnn", "config": self.config.to_dict(),
            "scale": self.scale, "epoch_losses": list(self.epoch_losses),
        })

    @staticmethod
    def from_json(text: str) -> "MqrnnModel":
        store, meta = ParamStore.from_json(text)
        if meta.get("kind") != "mqrnn":
            raise ValueError(f"expected an mqrnn checkpoint, got {meta.get('kind')!r}")
        return MqrnnModel(store, ForecastConfig.from_dict(meta["config"]),
                          float(meta["scale"]), list(meta.get("epoch_losses", [])))


def _mqrnn_params(store: ParamStore, cfg: ForecastConfig) -> None:
    H, C, ell = cfg.hidden, cfg.context, cfg.lookahead
    B = len(cfg.quantiles)
    lstm_params(store, "enc", 3, H)
    dense_params(store, "mg1", H + 2 * ell, cfg.global_hidden)
    dense_params(store, "mg2", cfg.global_hidden, (ell + 1) * C)
    dense_params(store, "ml1", 2 * C + 2, cfg.local_hidden)
    dense_params(store, "ml2", cfg.local_hidden, B)


def _mqrnn_graph(store: ParamStore, cfg: ForecastConfig, batch: int,
                 with_loss: bool):
    """Build the forward graph; returns (graph, output node).

    The loss graph ends in the mean pinball loss per window; the prediction
    graph ends in the horizon-concatenated quantile matrix (batch, ell*B).
    """
    H, C, ell = cfg.hidden, cfg.context, cfg.lookahead
    B = len(cfg.quantiles)
    g = Graph(store)
    xs = g.input("x")        # (batch, 3L)
    af = g.input("af")       # (batch, 2 ell)
    h = g.const(np.zeros((batch, H)))
    c = g.const(np.zeros((batch, H)))
    for t in range(cfg.history_len):
        x_t = g.slice_cols(xs, 3 * t, 3 * t + 3)
        h, c = lstm_cell(g, x_t, h, c, "enc", H)
    contexts = dense(g, g.tanh(dense(g, g.concat([h, af]), "mg1")), "mg2")
    c_all = g.slice_cols(contexts, ell * C, (ell + 1) * C)
    preds = []
    for t in range(ell):
        c_t = g.slice_cols(contexts, t * C, (t + 1) * C)
        af_t = g.slice_cols(af, 2 * t, 2 * t + 2)
        hid = g.tanh(dense(g, g.concat([c_t, c_all, af_t]), "ml1"))
        preds.append(dense(g, hid, "ml2"))
    if not with_loss:
        return g, g.concat(preds)
    y = g.input("y")          # (batch, ell) scaled targets
    terms = []
    for t in range(ell):
        terms.append(quantile_loss_node(g, preds[t],
                                        g.slice_cols(y, t, t + 1),
                                        cfg.quantiles, batch))
    total = terms[0]
    for t in terms[1:]:
        total = g.add(total, t)
    return g, g.smul(total, 1.0 / batch)


def _run_epochs(store, cfg, feeds_for_batch, n_windows, graphs_for_batch):
    """Shared mini-batch loop; returns per-epoch mean losses per window."""
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(store, lr=cfg.lr)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_windows)
        total, seen = 0.0, 0
        for start in range(0, n_windows, cfg.batch):
            rows = order[start:start + cfg.batch]
            g, out = graphs_for_batch(len(rows))
            feeds = feeds_for_batch(rows)
            store.zero_grads()
            loss = float(g.forward(feeds, out)[0, 0])
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} batch {start // cfg.batch}")
            g.backward(out)
            opt.step()
            total += loss * len(rows)
            seen += len(rows)
        losses.append(total / seen)
    return losses


def mqrnn_train(dataset, config: ForecastConfig | None = None) -> MqrnnModel:
    cfg = config or ForecastConfig()
    X, AF, Y, _, _ = _training_windows(dataset, cfg)
    store = ParamStore(cfg.seed)
    _mqrnn_params(store, cfg)
    model = MqrnnModel(store, cfg, max(1.0, dataset.train_mean_demand()))

    def graphs(batch):
        key = ("loss", batch)
        if key not in model._graphs:
            model._graphs[key] = _mqrnn_graph(store, cfg, batch, with_loss=True)
        return model._graphs[key]

    def feeds(rows):
        return {"x": X[rows], "af": AF[rows], "y": Y[rows]}

    model.epoch_losses = _run_epochs(store, cfg, feeds, X.shape[0], graphs)
    return model


def mqrnn_predict(model: MqrnnModel, history: np.ndarray, doy, dow) -> QuantileForecast:
    """Quantile forecast from the last L demands of each retailer.

    `doy`/`dow` cover history plus future: length L + lookahead, aligned so
    the first L entries belong to the history periods.
    """
    cfg = model.config
    L, ell = cfg.history_len, cfg.lookahead
    history = np.atleast_2d(np.asarray(history, dtype=float))
    if history.shape[1] != L:
        raise ValueError(f"history must have {L} columns, got {history.shape[1]}")
    if len(doy) != L + ell or len(dow) != L + ell:
        raise ValueError("calendar must cover history plus lookahead")
    n = history.shape[0]
    cal = _calendar_features(doy, dow)
    scales = np.array([_window_scale(history[i]) for i in range(n)])
    scaled = history / scales[:, None]
    X = np.concatenate(
        [np.column_stack([scaled[:, t], np.tile(cal[t], (n, 1))]) for t in range(L)],
        axis=1)
    AF = np.tile(cal[L:].ravel(), (n, 1))
    key = ("pred", n)
    if key not in model._graphs:
        model._graphs[key] = _mqrnn_graph(model.store, cfg, n, with_loss=False)
    g, out = model._graphs[key]
    raw = g.forward({"x": X, "af": AF}, out)    # (n, ell*B)
    B = len(cfg.quantiles)
    grid = raw.reshape(n, ell, B) * scales[:, None, None]
    grid = np.maximum(grid, 0.0)
    grid = np.sort(grid, axis=2)               # repair quantile crossing
    return QuantileForecast(grid, cfg.quantiles)


def sample_scenarios(forecast: QuantileForecast, n_extra: int, seed: int) -> ScenarioSet:
    """Scenario set = all quantile grids, plus `n_extra` draws.

    Each extra scenario picks one bin (between adjacent quantile levels,
    excluding the top level as a lower edge) shared across retailers and
    horizons, then draws independently and uniformly inside that bin per
    (retailer, horizon).  Probabilities are uniform.
    """
    if n_extra < 0:
        raise ValueError("n_extra must be >= 0")
    vals = forecast.values
    B = vals.shape[2]
    scenarios = [vals[:, :, b].copy() for b in range(B)]
    rng = np.random.default_rng(seed)
    for _ in range(n_extra):
        beta = int(rng.integers(0, B - 1))
        lo, hi = vals[:, :, beta], vals[:, :, beta + 1]
        u = rng.uniform(size=lo.shape)
        scenarios.append(lo + u * (hi - lo))
    return ScenarioSet(scenarios, _uniform_probs(len(scenarios)))


# -- LSTM point forecaster -------------------------------------------------------

@dataclass
class LstmModel:
    store: ParamStore
    config: ForecastConfig
    scale: float
    residual_fits: dict[int, tuple[float, float]]   # retailer -> (mu, sigma)
    pooled_residual: tuple[float, float]
    epoch_losses: list[float] = field(default_factory=list)
    _graphs: dict = field(default_factory=dict, repr=False, compare=False)

    def residual_for(self, retailer: int) -> tuple[float, float]:
        return self.residual_fits.get(retailer, self.pooled_residual)

    def to_json(self) -> str:
        return self.store.to_json(meta={
            "kind": "lstm", "config": self.config.to_dict(), "scale": self.scale,
            "residual_fits": {str(k): list(v) for k, v in self.residual_fits.items()},
            "pooled_residual": list(self.pooled_residual),
            "epoch_losses": list(self.epoch_losses),
        })

    @staticmethod
    def from_json(text: str) -> "LstmModel":
        store, meta = ParamStore.from_json(text)
        if meta.get("kind") != "lstm":
            raise ValueError(f"expected an lstm checkpoint, got {meta.get('kind')!r}")
        fits = {int(k): (float(v[0]), float(v[1]))
                for k, v in meta["residual_fits"].items()}
        pooled = tuple(float(v) for v in meta["pooled_residual"])
        return LstmModel(store, ForecastConfig.from_dict(meta["config"]),
                         float(meta["scale"]), fits, pooled,
                         list(meta.get("epoch_losses", [])))


def _lstm_graph(store: ParamStore, cfg: ForecastConfig, batch: int,
                with_loss: bool):
    """One-step-ahead regressor; loss graph ends in mean squared error."""
    H = cfg.hidden
    g = Graph(store)
    xs = g.input("x")
    h = g.const(np.zeros((batch, H)))
    c = g.const(np.zeros((batch, H)))
    for t in range(cfg.history_len):
        x_t = g.slice_cols(xs, 3 * t, 3 * t + 3)
        h, c = lstm_cell(g, x_t, h, c, "enc", H)
    pred = dense(g, h, "head")
    if not with_loss:
        return g, pred
    y = g.input("y")
    return g, g.smul(squared_loss_node(g, pred, y), 1.0 / batch)


def _lstm_step_graph(store: ParamStore, cfg: ForecastConfig, batch: int):
    """One recursion step: (x, h, c) -> (pred, h', c'), exposed via concat."""
    H = cfg.hidden
    g = Graph(store)
    x = g.input("x")
    h_in = g.input("h")
    c_in = g.input("c")
    h, c = lstm_cell(g, x, h_in, c_in, "enc", H)
    pred = dense(g, h, "head")
    return g, g.concat([pred, h, c])


def fit_residual_normal(errors: np.ndarray) -> tuple[float, float]:
    """Normal fit by moments: (mean, population std)."""
    e = np.asarray(errors, dtype=float)
    return float(np.mean(e)), float(np.std(e))


def lstm_train(dataset, config: ForecastConfig | None = None) -> LstmModel:
    cfg = config or ForecastConfig()
    # One-step-ahead pairs reuse the window builder with lookahead 1.
    win_cfg = ForecastConfig(**{**cfg.to_dict(), "lookahead": 1,
                                "quantiles": cfg.quantiles})
    X, _, Y, owners, scales = _training_windows(dataset, win_cfg)
    store = ParamStore(cfg.seed)
    lstm_params(store, "enc", 3, cfg.hidden)
    dense_params(store, "head", cfg.hidden, 1)
    model = LstmModel(store, cfg, max(1.0, dataset.train_mean_demand()), {}, (0.0, 0.0))

    def graphs(batch):
        key = ("loss", batch)
        if key not in model._graphs:
            model._graphs[key] = _lstm_graph(store, cfg, batch, with_loss=True)
        return model._graphs[key]

    def feeds(rows):
        return {"x": X[rows], "y": Y[rows]}

    model.epoch_losses = _run_epochs(store, cfg, feeds, X.shape[0], graphs)

    # Residuals of the trained one-step predictor, in demand units.
    g, out = _lstm_graph(store, cfg, X.shape[0], with_loss=False)
    pred = g.forward({"x": X}, out)[:, 0]
    residuals = (Y[:, 0] - pred) * scales
    fits: dict[int, tuple[float, float]] = {}
    for r in np.unique(owners):
        fits[int(r)] = fit_residual_normal(residuals[owners == r])
    model.residual_fits = fits
    model.pooled_residual = fit_residual_normal(residuals)
    return model


def lstm_predict(model: LstmModel, history: np.ndarray, doy, dow) -> np.ndarray:
    """Recursive multi-horizon point forecast (N, lookahead), clamped at 0.

    Each horizon's estimate is fed back as the next step's demand input.
    """
    cfg = model.config
    L, ell = cfg.history_len, cfg.lookahead
    history = np.atleast_2d(np.asarray(history, dtype=float))
    if history.shape[1] != L:
        raise ValueError(f"history must have {L} columns, got {history.shape[1]}")
    if len(doy) != L + ell or len(dow) != L + ell:
        raise ValueError("calendar must cover history plus lookahead")
    n = history.shape[0]
    cal = _calendar_features(doy, dow)
    scales = np.array([_window_scale(history[i]) for i in range(n)])
    scaled = history / scales[:, None]
    X = np.concatenate(
        [np.column_stack([scaled[:, t], np.tile(cal[t], (n, 1))]) for t in range(L)],
        axis=1)

    H = cfg.hidden
    # Run the encoder while keeping the final recurrent state.
    key = ("state", n)
    if key not in model._graphs:
        g = Graph(model.store)
        xs = g.input("x")
        h = g.const(np.zeros((n, H)))
        c = g.const(np.zeros((n, H)))
        for t in range(L):
            x_t = g.slice_cols(xs, 3 * t, 3 * t + 3)
            h, c = lstm_cell(g, x_t, h, c, "enc", H)
        pred = dense(g, h, "head")
        model._graphs[key] = (g, g.concat([pred, h, c]))
    g, out = model._graphs[key]
    packed = g.forward({"x": X}, out)
    preds = np.empty((n, ell))
    preds[:, 0] = packed[:, 0]
    h_state, c_state = packed[:, 1:1 + H], packed[:, 1 + H:]

    step_key = ("step", n)
    if step_key not in model._graphs:
        model._graphs[step_key] = _lstm_step_graph(model.store, cfg, n)
    gs, sout = model._graphs[step_key]
    for t in range(1, ell):
        x_next = np.column_stack([preds[:, t - 1], np.tile(cal[L + t - 1], (n, 1))])
        packed = gs.forward({"x": x_next, "h": h_state, "c": c_state}, sout)
        preds[:, t] = packed[:, 0]
        h_state, c_state = packed[:, 1:1 + H], packed[:, 1 + H:]
    return np.maximum(preds * scales[:, None], 0.0)


def lstm_scenarios(model: LstmModel, point: np.ndarray, retailer_ids,
                   n_scenarios: int, seed: int) -> ScenarioSet:
    """Point forecast plus i.i.d. Normal residual noise, clamped at 0."""
    point = np.asarray(point, dtype=float)
    rng = np.random.default_rng(seed)
    mus = np.array([model.residual_for(int(r))[0] for r in retailer_ids])
    sigmas = np.array([model.residual_for(int(r))[1] for r in retailer_ids])
    scenarios = []
    for _ in range(n_scenarios):
        noise = mus[:, None] + sigmas[:, None] * rng.standard_normal(point.shape)
        scenarios.append(np.maximum(point + noise, 0.0))
    return ScenarioSet(scenarios, _uniform_probs(n_scenarios))


# -- MLE marginal fit ------------------------------------------------------------

_MLE_FAMILIES = ("normal", "exponential", "lognormal", "pearson3", "weibull")


@dataclass
class MleFit:
    """A fitted marginal demand distribution with its selection diagnostics."""

    family: str
    params: tuple[float, ...]
    chi_square: dict[str, float]

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.family == "point":
            return np.full(size, self.params[0])
        dist = _frozen(self.family, self.params)
        return np.maximum(dist.rvs(size=size, random_state=rng), 0.0)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params)}

    @staticmethod
    def from_dict(d: dict) -> "MleFit":
        return MleFit(d["family"], tuple(d["params"]), {})


def _frozen(family: str, params: tuple[float, ...]):
    if family == "normal":
        return stats.norm(loc=params[0], scale=params[1])
    if family == "exponential":
        return stats.expon(loc=0.0, scale=params[0])
    if family == "lognormal":
        return stats.lognorm(params[0], loc=0.0, scale=params[1])
    if family == "pearson3":
        return stats.pearson3(params[0], loc=params[1], scale=params[2])
    if family == "weibull":
        return stats.weibull_min(params[0], loc=0.0, scale=params[1])
    raise ValueError(f"unknown family {family!r}")


def _fit_family(family: str, data: np.ndarray) -> tuple[float, ...] | None:
    try:
        if family == "normal":
            return (float(np.mean(data)), float(np.std(data)))
        if family == "exponential":
            if np.any(data < 0):
                return None
            return (float(np.mean(data)),)
        if family == "lognormal":
            if np.any(data <= 0):
                return None
            logd = np.log(data)
            sigma = float(np.std(logd))
            return (max(sigma, 1e-9), float(np.exp(np.mean(logd))))
        if family == "pearson3":
            skew = float(stats.skew(data))
            return (skew, float(np.mean(data)), float(np.std(data)))
        if family == "weibull":
            if np.any(data <= 0):
                return None
            shape, _, scl = stats.weibull_min.fit(data, floc=0.0)
            return (float(shape), float(scl))
    except Exception:
        return None
    return None


def _chi_square_stat(dist, data: np.ndarray) -> float:
    """Goodness of fit over equal-probability bins with expected count >= 5."""
    n = data.size
    nbins = min(10, max(2, n // 5))
    edges = dist.ppf(np.linspace(0.0, 1.0, nbins + 1))
    edges[0], edges[-1] = -np.inf, np.inf
    counts, _ = np.histogram(data, bins=edges)
    expected = n / nbins
    stat = float(np.sum((counts - expected) ** 2 / expected))
    return stat if math.isfinite(stat) else math.inf


def mle_fit(history: np.ndarray) -> MleFit:
    """Fit candidate distributions and keep the best chi-square scorer.

    Constant histories (including all zeros) collapse to a point mass.
    """
    data = np.asarray(history, dtype=float).ravel()
    if data.size == 0:
        raise ValueError("history must be non-empty")
    if float(np.std(data)) < 1e-12:
        return MleFit("point", (float(data[0]),), {})
    scores: dict[str, float] = {}
    fitted: dict[str, tuple[float, ...]] = {}
    for family in _MLE_FAMILIES:
        params = _fit_family(family, data)
        if params is None or not all(math.isfinite(p) for p in params):
            continue
        try:
            stat = _chi_square_stat(_frozen(family, params), data)
        except Exception:
            continue
        if math.isfinite(stat):
            scores[family] = stat
            fitted[family] = params
    if not scores:
        return MleFit("point", (float(np.mean(data)),), {})
    best = min(scores, key=lambda f: (scores[f], _MLE_FAMILIES.index(f)))
    return MleFit(best, fitted[best], scores)


def mle_scenarios(fit: MleFit, n_retailers: int, horizon: int,
                  n_scenarios: int, seed: int) -> ScenarioSet:
    rng = np.random.default_rng(seed)
    scenarios = [fit.sample(rng, (n_retailers, horizon)) for _ in range(n_scenarios)]
    return ScenarioSet(scenarios, _uniform_probs(n_scenarios))


def mle_fit_per_retailer(history: np.ndarray) -> list[MleFit]:
    """One marginal fit per row of an (N, L) history block."""
    return [mle_fit(row) for row in np.atleast_2d(history)]


def mle_scenarios_per_retailer(fits: list[MleFit], horizon: int,
                               n_scenarios: int, seed: int) -> ScenarioSet:
    rng = np.random.default_rng(seed)
    scenarios = []
    for _ in range(n_scenarios):
        rows = [f.sample(rng, horizon) for f in fits]
        scenarios.append(np.vstack(rows))
    return ScenarioSet(scenarios, _uniform_probs(n_scenarios))


# -- evaluation -------------------------------------------------------------------

def forecast_mse(point_forecast: np.ndarray, realized: np.ndarray) -> float:
    """Mean squared error over all entries."""
    a = np.asarray(point_forecast, dtype=float)
    b = np.asarray(realized, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))
