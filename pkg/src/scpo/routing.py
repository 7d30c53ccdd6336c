"""TSP and CVRP sub-solvers on symmetric Euclidean distance matrices.

Node 0 is always the depot; tours are retailer sequences with the depot
implicit at both ends.  Small TSPs are solved exactly by Held-Karp
dynamic programming; larger ones and all CVRPs use savings construction
plus local search.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

HELD_KARP_MAX = 13


class RoutingInfeasible(Exception):
    pass


@dataclass(frozen=True)
class Tour:
    sequence: tuple[int, ...]
    length: float


def tour_length(seq, dist) -> float:
    """Closed-tour distance depot -> seq -> depot."""
    if len(seq) == 0:
        return 0.0
    total = dist[0, seq[0]] + dist[seq[-1], 0]
    for a, b in zip(seq, seq[1:]):
        total += dist[a, b]
    return float(total)


def held_karp(nodes, dist) -> Tour:
    """Exact TSP by subset dynamic programming; O(2^n n^2)."""
    n = len(nodes)
    if n == 0:
        return Tour((), 0.0)
    if n == 1:
        return Tour((nodes[0],), tour_length(nodes, dist))
    d = np.array([[dist[a, b] for b in nodes] for a in nodes])
    d0 = np.array([dist[0, a] for a in nodes])
    full = (1 << n) - 1
    cost = np.full((1 << n, n), np.inf)
    parent = np.full((1 << n, n), -1, dtype=int)
    for i in range(n):
        cost[1 << i, i] = d0[i]
    for mask in range(1, full + 1):
        for i in range(n):
            if not (mask >> i) & 1:
                continue
            ci = cost[mask, i]
            if not np.isfinite(ci):
                continue
            rest = full & ~mask
            j = 0
            mrest = rest
            while mrest:
                if mrest & 1:
                    nm = mask | (1 << j)
                    nc = ci + d[i, j]
                    if nc < cost[nm, j]:
                        cost[nm, j] = nc
                        parent[nm, j] = i
                mrest >>= 1
                j += 1
    ends = cost[full] + d0
    last = int(np.argmin(ends))
    seq = []
    mask, i = full, last
    while i >= 0:
        seq.append(nodes[i])
        pi = parent[mask, i]
        mask &= ~(1 << i)
        i = pi
    seq.reverse()
    return Tour(tuple(seq), float(ends[last]))


def _nearest_neighbor(nodes, dist) -> list:
    left = list(nodes)
    seq = []
    cur = 0
    while left:
        nxt = min(left, key=lambda j: (dist[cur, j], j))
        seq.append(nxt)
        left.remove(nxt)
        cur = nxt
    return seq


def two_opt(seq, dist):
    """2-opt improvement of a closed tour; returns a sequence whose length
    never exceeds the input's."""
    seq = list(seq)
    n = len(seq)
    if n < 3:
        return tuple(seq)
    improved = True
    while improved:
        improved = False
        cycle = [0] + seq + [0]
        for i in range(1, n):
            for j in range(i + 1, n + 1):
                a, b = cycle[i - 1], cycle[i]
                c, e = cycle[j], cycle[j + 1]
                delta = dist[a, c] + dist[b, e] - dist[a, b] - dist[c, e]
                if delta < -1e-12:
                    cycle[i:j + 1] = reversed(cycle[i:j + 1])
                    improved = True
        seq = cycle[1:-1]
    return tuple(seq)


def tsp_solve(nodes, dist) -> Tour:
    """Exact Held-Karp up to HELD_KARP_MAX nodes, nearest-neighbor + 2-opt
    beyond that."""
    nodes = list(nodes)
    if len(nodes) <= 1:
        return Tour(tuple(nodes), tour_length(nodes, dist))
    if len(nodes) <= HELD_KARP_MAX:
        return held_karp(nodes, dist)
    seq = two_opt(_nearest_neighbor(nodes, dist), dist)
    return Tour(seq, tour_length(seq, dist))


def insertion_cost(seq, node, dist) -> tuple[int, float]:
    """Cheapest position to splice `node` into the closed tour and the
    distance increase of doing so."""
    if len(seq) == 0:
        return 0, float(2.0 * dist[0, node])
    best_pos, best_delta = 0, np.inf
    cycle = [0] + list(seq) + [0]
    for pos in range(len(seq) + 1):
        a, b = cycle[pos], cycle[pos + 1]
        delta = dist[a, node] + dist[node, b] - dist[a, b]
        if delta < best_delta - 1e-12:
            best_pos, best_delta = pos, delta
    return best_pos, float(best_delta)


def removal_gain(seq, node, dist) -> float:
    """Distance saved by splicing `node` out of the closed tour."""
    seq = list(seq)
    i = seq.index(node)
    cycle = [0] + seq + [0]
    a, b = cycle[i], cycle[i + 2]
    return float(dist[a, node] + dist[node, b] - dist[a, b])


def _route_loads(routes, demand_of):
    return [sum(demand_of[i] for i in r) for r in routes]


def cvrp_solve(nodes, demands, Q, V, dist) -> list[Tour]:
    """Clarke-Wright savings construction followed by relocate/swap and
    intra-route 2-opt improvement.  Raises RoutingInfeasible when the
    demands cannot be packed into V vehicles of capacity Q."""
    nodes = list(nodes)
    if isinstance(demands, dict):
        demand_of = {i: float(demands[i]) for i in nodes}
    else:
        demand_of = {i: float(q) for i, q in zip(nodes, demands)}
    if not nodes:
        return []
    tol = 1e-9
    if sum(demand_of.values()) > V * Q + tol:
        raise RoutingInfeasible(f"total demand {sum(demand_of.values()):.6g} exceeds fleet capacity {V * Q:.6g}")
    for i in nodes:
        if demand_of[i] > Q + tol:
            raise RoutingInfeasible(f"demand of node {i} exceeds vehicle capacity")

    routes = [[i] for i in nodes]
    savings = sorted(
        ((dist[0, i] + dist[0, j] - dist[i, j], i, j)
         for i, j in itertools.combinations(nodes, 2)),
        key=lambda s: (-s[0], s[1], s[2]))
    for sav, i, j in savings:
        if sav <= tol:
            continue
        ri = next((r for r in routes if i in r), None)
        rj = next((r for r in routes if j in r), None)
        if ri is None or rj is None or ri is rj:
            continue
        if sum(demand_of[a] for a in ri) + sum(demand_of[a] for a in rj) > Q + tol:
            continue
        # merge only at route ends so the saving estimate stays exact
        if ri[-1] == i and rj[0] == j:
            merged = ri + rj
        elif rj[-1] == j and ri[0] == i:
            merged = rj + ri
        elif ri[0] == i and rj[0] == j:
            merged = list(reversed(ri)) + rj
        elif ri[-1] == i and rj[-1] == j:
            merged = ri + list(reversed(rj))
        else:
            continue
        routes.remove(ri)
        routes.remove(rj)
        routes.append(merged)

    # force the route count down to the fleet size
    while len(routes) > V:
        best = None
        for a, b in itertools.combinations(range(len(routes)), 2):
            load = sum(demand_of[x] for x in routes[a]) + sum(demand_of[x] for x in routes[b])
            if load > Q + tol:
                continue
            cost = (tour_length(routes[a] + routes[b], dist)
                    - tour_length(routes[a], dist) - tour_length(routes[b], dist))
            if best is None or cost < best[0]:
                best = (cost, a, b)
        if best is None:
            raise RoutingInfeasible(f"cannot reduce {len(routes)} routes to {V} vehicles")
        _, a, b = best
        merged = routes[a] + routes[b]
        routes = [r for idx, r in enumerate(routes) if idx not in (a, b)] + [merged]

    routes = _improve(routes, demand_of, Q, dist)
    return [Tour(tuple(r), tour_length(r, dist)) for r in routes if r]


def _improve(routes, demand_of, Q, dist):
    routes = [list(r) for r in routes]
    tol = 1e-9
    improved = True
    guard = 0
    while improved and guard < 200:
        improved = False
        guard += 1
        routes = [list(two_opt(r, dist)) for r in routes]
        loads = _route_loads(routes, demand_of)
        # relocate: move a node into another route when it shortens the total
        for a in range(len(routes)):
            for node in list(routes[a]):
                gain = removal_gain(routes[a], node, dist)
                for b in range(len(routes)):
                    if a == b:
                        continue
                    if loads[b] + demand_of[node] > Q + tol:
                        continue
                    pos, delta = insertion_cost(routes[b], node, dist)
                    if delta - gain < -1e-9:
                        routes[a].remove(node)
                        routes[b].insert(pos, node)
                        loads = _route_loads(routes, demand_of)
                        improved = True
                        break
                if improved:
                    break
            if improved:
                break
        if improved:
            continue
        # swap: exchange a pair of nodes between two routes
        for a, b in itertools.combinations(range(len(routes)), 2):
            for na in list(routes[a]):
                for nb in list(routes[b]):
                    if loads[a] - demand_of[na] + demand_of[nb] > Q + tol:
                        continue
                    if loads[b] - demand_of[nb] + demand_of[na] > Q + tol:
                        continue
                    before = tour_length(routes[a], dist) + tour_length(routes[b], dist)
                    ra = [nb if x == na else x for x in routes[a]]
                    rb = [na if x == nb else x for x in routes[b]]
                    after = tour_length(ra, dist) + tour_length(rb, dist)
                    if after < before - 1e-9:
                        routes[a], routes[b] = ra, rb
                        loads = _route_loads(routes, demand_of)
                        improved = True
                        break
                if improved:
                    break
            if improved:
                break
    return [r for r in routes if r]
