"""Mixed-integer linear programming at desk scale.

A dense two-phase tableau simplex solves the LP relaxations; a best-first
branch-and-bound handles integrality.  Sizes here are a few hundred rows
and columns, where a dense tableau is fast enough and easy to audit.

Conventions: objectives always minimize; constraint senses are the strings
"<=", "=", ">="; variable kinds are "continuous", "binary", "integer".
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

INF = math.inf
FEAS_TOL = 1e-6
INT_TOL = 1e-6
_PIVOT_TOL = 1e-9
_RCOST_TOL = 1e-9
# Simplex effort (tableau-cell updates) treated as one second of solving.
# Branch and bound charges its budget in this unit instead of wall-clock
# time so that identical models always explore identical trees.
WORK_RATE = 4e8

OPTIMAL = "Optimal"
FEASIBLE = "Feasible"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
TIME_LIMIT = "TimeLimit"


class SimplexFailure(RuntimeError):
    """Simplex exceeded its iteration budget; carries diagnostics."""


@dataclass
class _Var:
    name: str
    kind: str
    lb: float
    ub: float


@dataclass
class _Constraint:
    coeffs: dict[int, float]
    sense: str
    rhs: float


@dataclass
class MilpSolution:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    bound: float | None = None
    solve_time: float = 0.0
    nodes: int = 0
    gap: float | None = None
    work: float = 0.0  # simplex effort in tableau-cell updates

    def value(self, idx: int) -> float:
        return float(self.x[idx])


class MilpModel:
    """Container for variables, linear constraints, and a linear objective."""

    def __init__(self, name: str = "model"):
        self.name = name
        self.vars: list[_Var] = []
        self.cons: list[_Constraint] = []
        self.obj: dict[int, float] = {}
        self.obj_const: float = 0.0
        self.warm_start: dict[int, float] | None = None
        self.time_limit: float | None = None
        self.gap_tol: float = 1e-6

    # -- building --------------------------------------------------------

    def add_var(self, name: str, kind: str = "continuous",
                lb: float = 0.0, ub: float = INF) -> int:
        if kind == "binary":
            lb, ub = 0.0, 1.0
        if kind in ("binary", "integer") and not (math.isfinite(lb) and math.isfinite(ub)):
            raise ValueError(f"integer variable {name} needs finite bounds")
        if lb > ub:
            raise ValueError(f"variable {name}: lb {lb} > ub {ub}")
        self.vars.append(_Var(name, kind, float(lb), float(ub)))
        return len(self.vars) - 1

    def add_constraint(self, coeffs: dict[int, float], sense: str, rhs: float) -> int:
        if sense not in ("<=", "=", ">="):
            raise ValueError(f"bad sense {sense!r}")
        self.cons.append(_Constraint({int(k): float(v) for k, v in coeffs.items()
                                      if v != 0.0}, sense, float(rhs)))
        return len(self.cons) - 1

    def add_objective(self, coeffs: dict[int, float], constant: float = 0.0) -> None:
        for k, v in coeffs.items():
            self.obj[int(k)] = self.obj.get(int(k), 0.0) + float(v)
        self.obj_const += constant

    @property
    def n_vars(self) -> int:
        return len(self.vars)

    def int_indices(self) -> list[int]:
        return [j for j, v in enumerate(self.vars) if v.kind in ("binary", "integer")]

    # -- inspection -------------------------------------------------------

    def objective_value(self, x: np.ndarray) -> float:
        return self.obj_const + sum(c * x[j] for j, c in self.obj.items())

    def max_violation(self, x: np.ndarray, integrality: bool = True) -> float:
        """Largest constraint/bound (and optionally integrality) residual."""
        worst = 0.0
        for j, v in enumerate(self.vars):
            worst = max(worst, v.lb - x[j], x[j] - v.ub)
            if integrality and v.kind in ("binary", "integer"):
                worst = max(worst, abs(x[j] - round(x[j])))
        for con in self.cons:
            lhs = sum(c * x[j] for j, c in con.coeffs.items())
            if con.sense == "<=":
                worst = max(worst, lhs - con.rhs)
            elif con.sense == ">=":
                worst = max(worst, con.rhs - lhs)
            else:
                worst = max(worst, abs(lhs - con.rhs))
        return float(worst)

    def to_lp_string(self) -> str:
        """Human-readable LP-format dump for debugging against other solvers."""
        def term(c, name, first):
            sign = "-" if c < 0 else ("" if first else "+")
            mag = abs(c)
            return f" {sign} {mag:.12g} {name}" if not first else f"{sign}{mag:.12g} {name}"

        lines = ["Minimize", " obj:"]
        parts = []
        for j in sorted(self.obj):
            parts.append(term(self.obj[j], self.vars[j].name, not parts))
        lines[-1] += " " + "".join(parts) if parts else " 0"
        lines.append("Subject To")
        for i, con in enumerate(self.cons):
            parts = []
            for j in sorted(con.coeffs):
                parts.append(term(con.coeffs[j], self.vars[j].name, not parts))
            op = {"<=": "<=", ">=": ">=", "=": "="}[con.sense]
            lines.append(f" c{i}: " + "".join(parts) + f" {op} {con.rhs:.12g}")
        lines.append("Bounds")
        for v in self.vars:
            lo = "-inf" if v.lb == -INF else f"{v.lb:.12g}"
            hi = "+inf" if v.ub == INF else f"{v.ub:.12g}"
            lines.append(f" {lo} <= {v.name} <= {hi}")
        ints = [v.name for v in self.vars if v.kind in ("binary", "integer")]
        if ints:
            lines.append("General")
            lines.append(" " + " ".join(ints))
        lines.append("End")
        return "\n".join(lines)


# -- linearization helpers -------------------------------------------------

def add_abs_linearization(model: MilpModel, expr: dict[int, float],
                          const: float, weight: float,
                          tag: str = "abs") -> tuple[int, int]:
    """Add mu, nu >= 0 with mu - nu = expr + const and weight*(mu+nu) in
    the objective.  With weight > 0 at most one of mu, nu is positive at
    optimality, so mu + nu equals |expr + const|."""
    mu = model.add_var(f"{tag}.mu", lb=0.0)
    nu = model.add_var(f"{tag}.nu", lb=0.0)
    row = {mu: 1.0, nu: -1.0}
    for j, c in expr.items():
        row[j] = row.get(j, 0.0) - c
    model.add_constraint(row, "=", const)
    if weight != 0.0:
        model.add_objective({mu: weight, nu: weight})
    return mu, nu


def add_pospart_linearization(model: MilpModel, expr: dict[int, float],
                              const: float, h: float, e: float,
                              tag: str = "inv") -> tuple[int, int]:
    """Add pos, neg >= 0 with pos - neg = expr + const and h*pos + e*neg in
    the objective; exact for the cost h*(x)^+ + e*(x)^- when h, e >= 0 and
    at least one is positive (ties broken toward pos = (x)^+)."""
    pos = model.add_var(f"{tag}.pos", lb=0.0)
    neg = model.add_var(f"{tag}.neg", lb=0.0)
    row = {pos: 1.0, neg: -1.0}
    for j, c in expr.items():
        row[j] = row.get(j, 0.0) - c
    model.add_constraint(row, "=", const)
    if h != 0.0 or e != 0.0:
        model.add_objective({pos: h, neg: e})
    return pos, neg


# -- LP core ---------------------------------------------------------------

def _build_phase_rows(model: MilpModel, lb: np.ndarray, ub: np.ndarray):
    """Shift/split variables to y >= 0 form and collect rows.

    Returns (col_of_var mapping info, rows, senses, rhs, c, c0) where each
    original variable maps to one column (shift by lb, or reflect around ub)
    or two columns (free split).
    """
    n = model.n_vars
    mode = np.zeros(n, dtype=int)  # 0: x=lb+y, 1: x=ub-y, 2: x=y+ - y-
    col = np.zeros(n, dtype=int)
    ncols = 0
    for j in range(n):
        if lb[j] > ub[j] + FEAS_TOL:
            return None  # empty box: infeasible
        if math.isfinite(lb[j]):
            mode[j] = 0
        elif math.isfinite(ub[j]):
            mode[j] = 1
        else:
            mode[j] = 2
        col[j] = ncols
        ncols += 2 if mode[j] == 2 else 1

    rows: list[dict[int, float]] = []
    senses: list[str] = []
    rhs: list[float] = []

    def transform(coeffs: dict[int, float]) -> tuple[dict[int, float], float]:
        out: dict[int, float] = {}
        shift = 0.0
        for j, a in coeffs.items():
            if mode[j] == 0:
                out[col[j]] = out.get(col[j], 0.0) + a
                shift += a * lb[j]
            elif mode[j] == 1:
                out[col[j]] = out.get(col[j], 0.0) - a
                shift += a * ub[j]
            else:
                out[col[j]] = out.get(col[j], 0.0) + a
                out[col[j] + 1] = out.get(col[j] + 1, 0.0) - a
        return out, shift

    for con in model.cons:
        r, shift = transform(con.coeffs)
        rows.append(r)
        senses.append(con.sense)
        rhs.append(con.rhs - shift)
    # upper-bound rows for shifted variables with a finite box
    for j in range(n):
        if mode[j] == 0 and math.isfinite(ub[j]):
            width = ub[j] - lb[j]
            if width < -FEAS_TOL:
                return None
            rows.append({col[j]: 1.0})
            senses.append("<=")
            rhs.append(width)

    c = np.zeros(ncols)
    c0 = model.obj_const
    ct, cshift = transform(model.obj)
    for cj, a in ct.items():
        c[cj] += a
    c0 += cshift
    return mode, col, ncols, rows, senses, np.asarray(rhs), c, c0


def _pivot(tab: np.ndarray, basis: list[int], row: int, colj: int) -> None:
    piv = tab[row, colj]
    tab[row] /= piv
    colvals = tab[:, colj].copy()
    colvals[row] = 0.0
    tab -= np.outer(colvals, tab[row])
    tab[:, colj] = 0.0
    tab[row, colj] = 1.0
    basis[row] = colj


def _run_simplex(tab: np.ndarray, basis: list[int], allowed: np.ndarray,
                 cap: int, label: str) -> tuple[str, int]:
    """Iterate on a tableau whose last row is reduced costs and last column
    is the rhs.  Dantzig pricing first, Bland's rule after cap//2 iterations
    to guarantee no cycling.  Returns ('optimal'|'unbounded', pivots)."""
    m = tab.shape[0] - 1
    it = 0
    while True:
        if it > cap:
            raise SimplexFailure(
                f"{label}: exceeded {cap} iterations on {m} rows x "
                f"{tab.shape[1] - 1} cols (possible numerical cycling)")
        red = tab[-1, :-1]
        cand = np.where(allowed & (red < -_RCOST_TOL))[0]
        if cand.size == 0:
            return "optimal", it
        if it <= cap // 2:
            entering = int(cand[np.argmin(red[cand])])  # Dantzig
        else:
            entering = int(cand[0])  # Bland: smallest index
        colv = tab[:m, entering]
        pos = np.where(colv > _PIVOT_TOL)[0]
        if pos.size == 0:
            return "unbounded", it
        ratios = tab[pos, -1] / colv[pos]
        best = np.min(ratios)
        tied = pos[ratios <= best + 1e-12]
        if it <= cap // 2:
            leave = int(tied[0])
        else:  # Bland: leave on smallest basis index among ties
            leave = int(min(tied, key=lambda r: basis[r]))
        _pivot(tab, basis, leave, entering)
        it += 1


def solve_lp(model: MilpModel, lb_override: np.ndarray | None = None,
             ub_override: np.ndarray | None = None) -> MilpSolution:
    """Two-phase dense simplex over the model with integrality relaxed."""
    t0 = time.perf_counter()
    n = model.n_vars
    if n == 0:
        raise ValueError("model has no variables")
    lb = np.array([v.lb for v in model.vars]) if lb_override is None else np.asarray(lb_override, float)
    ub = np.array([v.ub for v in model.vars]) if ub_override is None else np.asarray(ub_override, float)

    built = _build_phase_rows(model, lb, ub)
    if built is None:
        return MilpSolution(INFEASIBLE, solve_time=time.perf_counter() - t0)
    mode, col, ncols, rows, senses, rhs, c, c0 = built

    # normalize rhs >= 0 (and turn degenerate >= rows into <= rows)
    m = len(rows)
    for i in range(m):
        if rhs[i] < 0:
            rows[i] = {j: -a for j, a in rows[i].items()}
            rhs[i] = -rhs[i]
            senses[i] = {"<=": ">=", ">=": "<=", "=": "="}[senses[i]]
        elif rhs[i] == 0 and senses[i] == ">=":
            rows[i] = {j: -a for j, a in rows[i].items()}
            senses[i] = "<="

    # Crash basis: an equality row whose only structural candidate is a
    # positive singleton column (appears in no other row) can seat that
    # column directly instead of an artificial variable.
    occurrences = np.zeros(ncols, dtype=int)
    for r in rows:
        for j in r:
            occurrences[j] += 1
    crash = [-1] * m
    for i in range(m):
        if senses[i] != "=":
            continue
        for j, a in rows[i].items():
            if a > _PIVOT_TOL and occurrences[j] == 1:
                crash[i] = j
                if a != 1.0:
                    rows[i] = {k: v / a for k, v in rows[i].items()}
                    rhs[i] = rhs[i] / a
                break

    n_slack = sum(1 for s in senses if s in ("<=", ">="))
    n_art = sum(1 for i, s in enumerate(senses)
                if s == ">=" or (s == "=" and crash[i] < 0))
    total = ncols + n_slack + n_art
    tab = np.zeros((m + 1, total + 1))
    basis = [0] * m
    s_at = ncols
    a_at = ncols + n_slack
    art_cols = []
    for i in range(m):
        for j, a in rows[i].items():
            tab[i, j] = a
        tab[i, -1] = rhs[i]
        if senses[i] == "<=":
            tab[i, s_at] = 1.0
            basis[i] = s_at
            s_at += 1
        elif senses[i] == ">=":
            tab[i, s_at] = -1.0
            s_at += 1
            tab[i, a_at] = 1.0
            basis[i] = a_at
            art_cols.append(a_at)
            a_at += 1
        elif crash[i] >= 0:
            basis[i] = crash[i]
        else:
            tab[i, a_at] = 1.0
            basis[i] = a_at
            art_cols.append(a_at)
            a_at += 1

    cap = 10 * (m + total)
    allowed = np.ones(total, dtype=bool)
    npiv = 0

    if art_cols:
        # phase 1: minimize the artificial sum
        for i in range(m):
            if basis[i] in art_cols:
                tab[-1, :-1] -= tab[i, :-1]
                tab[-1, -1] -= tab[i, -1]
        for j in art_cols:
            tab[-1, j] += 1.0
        _, p1 = _run_simplex(tab, basis, allowed, cap, "phase-1")
        npiv += p1
        phase1 = -tab[-1, -1]
        if phase1 > 1e-7:
            return MilpSolution(INFEASIBLE, solve_time=time.perf_counter() - t0,
                                work=(npiv + 10) * tab.size)
        # drive remaining artificials out of the basis
        art_set = set(art_cols)
        for i in range(m):
            if basis[i] in art_set:
                pivots = [j for j in range(ncols + n_slack) if abs(tab[i, j]) > 1e-7]
                if pivots:
                    _pivot(tab, basis, i, pivots[0])
                # else the row is redundant; its artificial stays at value 0
        allowed[list(art_set)] = False

    # phase 2: real objective expressed in the current basis
    tab[-1, :] = 0.0
    tab[-1, :ncols] = c
    for i in range(m):
        cb = c[basis[i]] if basis[i] < ncols else 0.0
        if cb != 0.0:
            tab[-1, :-1] -= cb * tab[i, :-1]
            tab[-1, -1] -= cb * tab[i, -1]
            tab[-1, basis[i]] = 0.0
    outcome, p2 = _run_simplex(tab, basis, allowed, cap, "phase-2")
    npiv += p2
    work = (npiv + 10) * tab.size
    if outcome == "unbounded":
        return MilpSolution(UNBOUNDED, solve_time=time.perf_counter() - t0,
                            work=work)

    y = np.zeros(total)
    for i in range(m):
        y[basis[i]] = tab[i, -1]
    x = np.empty(n)
    for j in range(n):
        if mode[j] == 0:
            x[j] = lb[j] + y[col[j]]
        elif mode[j] == 1:
            x[j] = ub[j] - y[col[j]]
        else:
            x[j] = y[col[j]] - y[col[j] + 1]
    obj = model.objective_value(x)
    sol = MilpSolution(OPTIMAL, x=x, objective=obj, bound=obj,
                       solve_time=time.perf_counter() - t0, gap=0.0, work=work)
    resid = model.max_violation(x, integrality=False)
    if resid > FEAS_TOL:
        raise SimplexFailure(
            f"LP solution violates constraints by {resid:.3e} on {model.name}")
    return sol


def _round_ints(model: MilpModel, x: np.ndarray, only_near: bool = False) -> np.ndarray:
    out = x.copy()
    for j in model.int_indices():
        r = round(out[j])
        if not only_near or abs(out[j] - r) <= INT_TOL:
            out[j] = r
    return out


# -- branch and bound --------------------------------------------------------

def _warm_objective(model: MilpModel) -> float | None:
    if model.warm_start is None:
        return None
    x = np.array([model.vars[j].lb if math.isfinite(model.vars[j].lb) else 0.0
                  for j in range(model.n_vars)])
    for j, val in model.warm_start.items():
        x[j] = val
    if model.max_violation(x) <= FEAS_TOL:
        return model.objective_value(x), x
    return None


def solve_milp(model: MilpModel) -> MilpSolution:
    """Best-first branch-and-bound over the LP relaxation.

    Branches on the most fractional integer variable (lowest index on
    ties), prunes by bound, and seeds the incumbent from model.warm_start
    when that assignment is feasible.  model.time_limit is enforced as a
    deterministic simplex-effort budget (calibrated to roughly one second
    of solving per unit), never as wall-clock time, so reruns of the same
    model always return the same solution.
    """
    t0 = time.perf_counter()
    budget = model.time_limit * WORK_RATE if model.time_limit else None
    int_idx = model.int_indices()
    lb0 = np.array([v.lb for v in model.vars])
    ub0 = np.array([v.ub for v in model.vars])

    incumbent_x = None
    incumbent_obj = INF
    warm = _warm_objective(model)
    if warm is not None:
        incumbent_obj, incumbent_x = warm[0], _round_ints(model, warm[1])

    root = solve_lp(model, lb0, ub0)
    nodes = 1
    work_used = root.work
    if root.status == INFEASIBLE:
        if incumbent_x is not None:
            return MilpSolution(OPTIMAL, x=incumbent_x, objective=incumbent_obj,
                                bound=incumbent_obj, solve_time=time.perf_counter() - t0,
                                nodes=nodes, gap=0.0)
        return MilpSolution(INFEASIBLE, solve_time=time.perf_counter() - t0, nodes=nodes)
    if root.status == UNBOUNDED:
        return MilpSolution(UNBOUNDED, solve_time=time.perf_counter() - t0, nodes=nodes)

    counter = itertools.count()
    heap: list[tuple[float, int, np.ndarray, np.ndarray, np.ndarray]] = []
    heapq.heappush(heap, (root.objective, next(counter), root.x, lb0, ub0))
    best_bound = root.objective

    def gap_of(inc, bnd):
        if inc >= INF:
            return INF
        return max(0.0, inc - bnd) / max(1.0, abs(inc))

    timed_out = False
    while heap:
        bound, _, x, lbn, ubn = heapq.heappop(heap)
        best_bound = bound
        if incumbent_obj < INF and bound >= incumbent_obj - max(1e-9, model.gap_tol * abs(incumbent_obj)):
            best_bound = incumbent_obj
            break  # best-first: nothing better remains
        # Plunge: keep descending into the more promising child so integral
        # incumbents appear early, parking the sibling on the heap.
        while True:
            if budget is not None and work_used > budget:
                timed_out = True
                break
            frac_j, frac_amt = -1, INT_TOL
            for j in int_idx:
                f = abs(x[j] - round(x[j]))
                if f > frac_amt:
                    frac_j, frac_amt = j, f
            if frac_j < 0:
                xi = _round_ints(model, x)
                obj = model.objective_value(xi)
                if model.max_violation(xi) <= FEAS_TOL and obj < incumbent_obj:
                    incumbent_obj, incumbent_x = obj, xi
                break
            xi = _round_ints(model, x)
            if model.max_violation(xi) <= FEAS_TOL:
                obj = model.objective_value(xi)
                if obj < incumbent_obj:
                    incumbent_obj, incumbent_x = obj, xi
            lo = math.floor(x[frac_j])
            children = []
            for side in (0, 1):
                clb, cub = lbn.copy(), ubn.copy()
                if side == 0:
                    cub[frac_j] = lo
                else:
                    clb[frac_j] = lo + 1
                child = solve_lp(model, clb, cub)
                nodes += 1
                work_used += child.work
                if child.status != OPTIMAL:
                    continue
                if incumbent_obj < INF and child.objective >= incumbent_obj - 1e-9:
                    continue
                children.append((child.objective, child.x, clb, cub))
            if not children:
                break
            children.sort(key=lambda c: c[0])
            _, x, lbn, ubn = children[0]
            for obj, cx, clb, cub in children[1:]:
                heapq.heappush(heap, (obj, next(counter), cx, clb, cub))
        if timed_out:
            break

    elapsed = time.perf_counter() - t0
    if incumbent_x is None:
        if timed_out:
            return MilpSolution(TIME_LIMIT, solve_time=elapsed, nodes=nodes,
                                bound=best_bound, work=work_used)
        return MilpSolution(INFEASIBLE, solve_time=elapsed, nodes=nodes,
                            work=work_used)
    if heap and timed_out:
        best_bound = min(best_bound, heap[0][0])
    gap = gap_of(incumbent_obj, best_bound)
    status = TIME_LIMIT if timed_out else (OPTIMAL if gap <= model.gap_tol + 1e-12 else FEASIBLE)
    if not timed_out and not heap:
        status, gap, best_bound = OPTIMAL, 0.0, incumbent_obj
    sol = MilpSolution(status, x=incumbent_x, objective=incumbent_obj,
                       bound=best_bound, solve_time=elapsed, nodes=nodes, gap=gap,
                       work=work_used)
    if model.max_violation(incumbent_x) > FEAS_TOL:
        raise SimplexFailure(f"incumbent violates constraints on {model.name}")
    return sol


def solve_by_enumeration(model: MilpModel, max_patterns: int = 2_000_000) -> MilpSolution:
    """Exhaustive oracle: try every integer assignment, solve the continuous
    LP for each, keep the best.  Only for small test models."""
    t0 = time.perf_counter()
    int_idx = model.int_indices()
    ranges = []
    count = 1
    for j in int_idx:
        v = model.vars[j]
        r = range(int(math.ceil(v.lb - INT_TOL)), int(math.floor(v.ub + INT_TOL)) + 1)
        ranges.append(r)
        count *= len(r)
        if count > max_patterns:
            raise ValueError(f"enumeration too large ({count} patterns)")
    lb = np.array([v.lb for v in model.vars])
    ub = np.array([v.ub for v in model.vars])
    best = None
    for pattern in itertools.product(*ranges) if ranges else [()]:
        lbn, ubn = lb.copy(), ub.copy()
        for j, val in zip(int_idx, pattern):
            lbn[j] = ubn[j] = val
        sol = solve_lp(model, lbn, ubn)
        if sol.status == OPTIMAL and (best is None or sol.objective < best.objective - 0.0):
            best = sol
    elapsed = time.perf_counter() - t0
    if best is None:
        return MilpSolution(INFEASIBLE, solve_time=elapsed)
    return MilpSolution(OPTIMAL, x=best.x, objective=best.objective,
                        bound=best.objective, solve_time=elapsed, gap=0.0)
