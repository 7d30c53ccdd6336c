"""Synthetic demand sequences, retailer geography, and instance assembly.

Three demand patterns are supported: a drifting trend with calendar
cycles ("trend"), i.i.d. normal noise ("random"), and their sum ("both").
Retailers are split 70/30 into train/test; test retailers are grouped by
location with k-means into fixed-size groups, one instance per group.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import Instance

DATASET_FORMAT = "scpo-dataset-v1"
PATTERNS = ("trend", "random", "both")
CYCLE_FORMS = ("printed", "conventional")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def make_calendar(T: int, start_doy: int = 1, start_dow: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Day-of-year (1..366) and day-of-week (1..7) for T consecutive days."""
    idx = np.arange(T)
    doy = (start_doy - 1 + idx) % 366 + 1
    dow = (start_dow - 1 + idx) % 7 + 1
    return doy, dow


def cycle_values(doy: np.ndarray, dow: np.ndarray, form: str = "printed") -> np.ndarray:
    """Weekly+yearly cycle term.

    The "printed" form evaluates sin(2*pi / (d/period)); the
    "conventional" form evaluates sin(2*pi * d/period).  Both are kept
    behind a switch because they produce very different shapes.
    """
    if form == "printed":
        return np.sin(2 * np.pi / (doy / 366.0)) + np.sin(2 * np.pi / (dow / 7.0))
    if form == "conventional":
        return np.sin(2 * np.pi * doy / 366.0) + np.sin(2 * np.pi * dow / 7.0)
    raise ValueError(f"unknown cycle form {form!r}")


def gen_trend(T: int, seed, calendar=None, cycle_form: str = "printed",
              phi: float | None = None, v0: float | None = None) -> np.ndarray:
    """Geometric drift v_k = phi*v_{k-1} plus a calendar cycle, clamped at 0.

    phi ~ U(0.995, 1.01) and v0 ~ U(5, 7) unless overridden (overrides
    exist for tests)."""
    rng = _rng(seed)
    if phi is None:
        phi = float(rng.uniform(0.995, 1.01))
    if v0 is None:
        v0 = float(rng.uniform(5.0, 7.0))
    doy, dow = make_calendar(T) if calendar is None else calendar
    v = v0 * phi ** np.arange(T)
    w = cycle_values(doy[:T], dow[:T], cycle_form)
    return np.maximum(0.0, v + w)


def gen_random(T: int, seed, mu: float | None = None,
               sigma2: float | None = None) -> np.ndarray:
    """i.i.d. N(mu, sigma^2) draws clamped at 0; mu ~ U(9,11), sigma^2 ~ U(2,4)."""
    rng = _rng(seed)
    if mu is None:
        mu = float(rng.uniform(9.0, 11.0))
    if sigma2 is None:
        sigma2 = float(rng.uniform(2.0, 4.0))
    return np.maximum(0.0, rng.normal(mu, math.sqrt(sigma2), size=T))


def gen_both(T: int, seed, calendar=None, cycle_form: str = "printed") -> np.ndarray:
    """Sum of an independent trend draw and random draw, clamped at 0."""
    rng = _rng(seed)
    return np.maximum(0.0, gen_trend(T, rng, calendar, cycle_form) + gen_random(T, rng))


def generate_series(pattern: str, T: int, seed, calendar=None,
                    cycle_form: str = "printed") -> np.ndarray:
    if pattern == "trend":
        return gen_trend(T, seed, calendar, cycle_form)
    if pattern == "random":
        return gen_random(T, seed)
    if pattern == "both":
        return gen_both(T, seed, calendar, cycle_form)
    raise ValueError(f"unknown pattern {pattern!r}")


# -- clustering --------------------------------------------------------------

def kmeans(points: np.ndarray, k: int, seed, max_iter: int = 100):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (labels, centroids, objective_history); the within-cluster
    sum of squares is non-increasing across iterations.
    """
    rng = _rng(seed)
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if not (1 <= k <= n):
        raise ValueError("need 1 <= k <= n_points")
    # k-means++ seeding
    centroids = [pts[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min([np.sum((pts - c) ** 2, axis=1) for c in centroids], axis=0)
        total = d2.sum()
        if total <= 0:
            centroids.append(pts[int(rng.integers(n))])
            continue
        centroids.append(pts[int(rng.choice(n, p=d2 / total))])
    centroids = np.array(centroids)

    labels = np.zeros(n, dtype=int)
    history = []
    for _ in range(max_iter):
        d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        for c in range(k):  # keep clusters non-empty
            if not np.any(new_labels == c):
                far = int(np.argmax(d2[np.arange(n), new_labels]))
                new_labels[far] = c
        if np.array_equal(new_labels, labels) and len(history) > 1:
            break
        labels = new_labels
        for c in range(k):
            centroids[c] = pts[labels == c].mean(axis=0)
    return labels, centroids, history


def rebalance_groups(points: np.ndarray, labels: np.ndarray,
                     centroids: np.ndarray, group_size: int) -> list[list[int]]:
    """Force every cluster to exactly group_size members.

    Oversized clusters shed the member farthest from its own centroid to
    the nearest undersized cluster; once none is undersized, members still
    above the target are dropped (they end up in no group).
    """
    pts = np.asarray(points, dtype=float)
    k = len(centroids)
    groups = [list(np.where(labels == c)[0]) for c in range(k)]
    if k * group_size > len(pts):
        raise ValueError(f"cannot form {k} groups of {group_size} from {len(pts)} points")

    def own_dist(idx, c):
        return float(np.sum((pts[idx] - centroids[c]) ** 2))

    while any(len(g) < group_size for g in groups):
        over = [c for c in range(k) if len(groups[c]) > group_size]
        under = [c for c in range(k) if len(groups[c]) < group_size]
        candidates = [(own_dist(i, c), i, c) for c in over for i in groups[c]]
        if not candidates:
            raise ValueError("rebalancing cannot reach exact group sizes")
        _, idx, src = max(candidates, key=lambda t: (t[0], t[1]))
        dst = min(under, key=lambda c: np.sum((pts[idx] - centroids[c]) ** 2))
        groups[src].remove(idx)
        groups[dst].append(idx)
    for c in range(k):  # drop any leftover members beyond the target size
        while len(groups[c]) > group_size:
            _, idx = max(((own_dist(i, c), i) for i in groups[c]),
                         key=lambda t: (t[0], t[1]))
            groups[c].remove(idx)
    if any(len(g) != group_size for g in groups):
        raise ValueError("rebalancing cannot reach exact group sizes")
    return [sorted(g) for g in groups]


def split_train_test(n_total: int, seed) -> tuple[list[int], list[int]]:
    """70/30 split: |train| = round(0.7 * total), indices shuffled by seed."""
    rng = _rng(seed)
    perm = rng.permutation(n_total)
    n_train = int(round(0.7 * n_total))
    return sorted(int(i) for i in perm[:n_train]), sorted(int(i) for i in perm[n_train:])


def build_instances(n_retailers_total: int, coords_box, k_clusters: int,
                    group_size: int, seed):
    """Draw coordinates uniformly in the box, split 70/30, k-means the test
    retailers into k clusters, and rebalance to exact group sizes.

    Returns (groups of global retailer indices, coords for all retailers,
    (train_idx, test_idx))."""
    rng = _rng(seed)
    (x0, x1), (y0, y1) = coords_box
    coords = np.column_stack([rng.uniform(x0, x1, n_retailers_total),
                              rng.uniform(y0, y1, n_retailers_total)])
    train_idx, test_idx = split_train_test(n_retailers_total, rng)
    if k_clusters * group_size > len(test_idx):
        raise ValueError("k_clusters * group_size exceeds the test-set size")
    test_pts = coords[test_idx]
    labels, centroids, _ = kmeans(test_pts, k_clusters, rng)
    local_groups = rebalance_groups(test_pts, labels, centroids, group_size)
    groups = [[test_idx[i] for i in g] for g in local_groups]
    return groups, coords, (train_idx, test_idx)


# -- dataset -----------------------------------------------------------------

@dataclass(frozen=True)
class DemandDataset:
    pattern: str
    series: np.ndarray          # (R, T)
    day_of_year: np.ndarray     # (T,)
    day_of_week: np.ndarray     # (T,)
    train_idx: tuple[int, ...]
    test_idx: tuple[int, ...]
    coords: np.ndarray          # (R, 2)
    groups: tuple[tuple[int, ...], ...]
    cycle_form: str = "printed"

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if np.any(self.series < 0):
            raise ValueError("demand values must be nonnegative")
        if set(self.train_idx) & set(self.test_idx):
            raise ValueError("train/test overlap")
        if self.series.shape[1] != len(self.day_of_year):
            raise ValueError("calendar length mismatch")

    @property
    def n_retailers(self) -> int:
        return self.series.shape[0]

    @property
    def n_periods(self) -> int:
        return self.series.shape[1]

    def train_mean_demand(self) -> float:
        return float(self.series[list(self.train_idx)].mean())

    def to_json(self) -> str:
        doc = {
            "format": DATASET_FORMAT,
            "pattern": self.pattern,
            "cycle_form": self.cycle_form,
            "series": [[round(float(v), 10) for v in row] for row in self.series],
            "day_of_year": [int(v) for v in self.day_of_year],
            "day_of_week": [int(v) for v in self.day_of_week],
            "train_idx": list(self.train_idx),
            "test_idx": list(self.test_idx),
            "coords": [[float(x), float(y)] for x, y in self.coords],
            "groups": [list(g) for g in self.groups],
        }
        return json.dumps(doc, indent=1)

    @staticmethod
    def from_json(text: str) -> "DemandDataset":
        doc = json.loads(text)
        if doc.get("format") != DATASET_FORMAT:
            raise ValueError(f"unsupported dataset format: {doc.get('format')!r}")
        return DemandDataset(
            pattern=doc["pattern"],
            series=np.asarray(doc["series"], dtype=float),
            day_of_year=np.asarray(doc["day_of_year"], dtype=int),
            day_of_week=np.asarray(doc["day_of_week"], dtype=int),
            train_idx=tuple(doc["train_idx"]),
            test_idx=tuple(doc["test_idx"]),
            coords=np.asarray(doc["coords"], dtype=float),
            groups=tuple(tuple(g) for g in doc["groups"]),
            cycle_form=doc.get("cycle_form", "printed"),
        )


DEFAULT_BOX = ((50.7, 53.4), (3.5, 7.1))


def generate_dataset(pattern: str, n_retailers: int, T: int, seed: int,
                     k_clusters: int, group_size: int,
                     coords_box=DEFAULT_BOX, cycle_form: str = "printed") -> DemandDataset:
    """End-to-end dataset build: sequences + geography + split + groups."""
    master = _rng(seed)
    calendar = make_calendar(T)
    series = np.stack([generate_series(pattern, T, master, calendar, cycle_form)
                       for _ in range(n_retailers)])
    groups, coords, (train_idx, test_idx) = build_instances(
        n_retailers, coords_box, k_clusters, group_size, master)
    return DemandDataset(
        pattern=pattern, series=series,
        day_of_year=calendar[0], day_of_week=calendar[1],
        train_idx=tuple(train_idx), test_idx=tuple(test_idx),
        coords=coords, groups=tuple(tuple(g) for g in groups),
        cycle_form=cycle_form,
    )


def derive_instance(dataset: DemandDataset, group_index: int, *,
                    n_vehicles: int = 2, lookahead: int = 5,
                    history_len: int = 14, eval_horizon: int = 30,
                    holding_cost: float = 0.3, backorder_cost: float = 3.0,
                    transport_scale: float = 0.05, rng_seed: int = 0,
                    vehicle_capacity: float | None = None,
                    inv_capacity: float | None = None) -> Instance:
    """Build one Instance from a retailer group.

    Unspecified capacities default to Q = ceil(1.5*N*mu/V) and
    I_max = ceil(3*mu) where mu is the train-set mean per-period demand;
    the warehouse sits at the centroid of the group's retailers.
    """
    group = dataset.groups[group_index]
    n = len(group)
    mu = dataset.train_mean_demand()
    if vehicle_capacity is None:
        vehicle_capacity = float(math.ceil(1.5 * n * mu / n_vehicles))
    if inv_capacity is None:
        inv_capacity = float(math.ceil(3 * mu))
    pts = dataset.coords[list(group)]
    warehouse = pts.mean(axis=0)
    coords = [tuple(warehouse)] + [tuple(p) for p in pts]
    return Instance(
        n_retailers=n, coords=tuple(coords), n_vehicles=n_vehicles,
        vehicle_capacity=vehicle_capacity, inv_capacity=inv_capacity,
        holding_cost=holding_cost, backorder_cost=backorder_cost,
        transport_scale=transport_scale, history_len=history_len,
        lookahead=lookahead, eval_horizon=eval_horizon, rng_seed=rng_seed,
    )


def truth_for_group(dataset: DemandDataset, group_index: int) -> np.ndarray:
    """Demand truth matrix (N, T) for an instance group."""
    return dataset.series[list(dataset.groups[group_index])]
