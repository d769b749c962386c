"""Exact solvers and classical heuristics used as ground truth for gaps.

Scores are in natural units: tour length for routing (lower is better), total
value for knapsack (higher is better). Certificates use ``env`` action
indexing, so ``-env.tsp_return(inst, cert)`` / ``-env.cvrp_return(...)`` /
``env.kp_return(...)`` reproduce the score.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field

import numba
import numpy as np

from pomo.errors import PomoError, SizeLimitError
from pomo.instances import CvrpInstance, KpInstance, TspInstance

HELD_KARP_MAX = 20
BRUTE_FORCE_MAX = 10
KP_EXACT_MAX = 200


class ResourceError(PomoError, RuntimeError):
    exit_code = 4


@dataclass
class OracleResult:
    method: str
    optimal: bool
    score: float
    certificate: list = field(default_factory=list)
    nodes_expanded: int = 0


def distance_matrix(pts: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def tour_length(dist: np.ndarray, tour) -> float:
    tour = list(tour)
    return float(sum(dist[a, b] for a, b in zip(tour, tour[1:] + tour[:1])))


# --------------------------------------------------------------------------
# TSP

@numba.njit(cache=True)
def _held_karp_dp(dist):
    n = dist.shape[0]
    k = n - 1  # node 0 is the fixed start; bit j <-> node j + 1
    full = 1 << k
    dp = np.full((full, k), np.inf)
    parent = np.full((full, k), -1, dtype=np.int8)
    for j in range(k):
        dp[1 << j, j] = dist[0, j + 1]
    bits = np.empty(k, dtype=np.int64)
    for mask in range(1, full):
        nb = 0
        for i in range(k):
            if (mask >> i) & 1:
                bits[nb] = i
                nb += 1
        if nb < 2:
            continue
        for a in range(nb):
            j = bits[a]
            prev = mask ^ (1 << j)
            best = np.inf
            arg = -1
            for b in range(nb):
                i = bits[b]
                if i == j:
                    continue
                c = dp[prev, i] + dist[i + 1, j + 1]
                if c < best:
                    best = c
                    arg = i
            dp[mask, j] = best
            parent[mask, j] = arg
    last = full - 1
    best = np.inf
    end = -1
    for j in range(k):
        c = dp[last, j] + dist[j + 1, 0]
        if c < best:
            best = c
            end = j
    tour = np.empty(n, dtype=np.int64)
    tour[0] = 0
    mask = last
    j = end
    for pos in range(n - 1, 0, -1):
        tour[pos] = j + 1
        pj = parent[mask, j]
        mask ^= 1 << j
        j = pj
    return best, tour


def held_karp_tsp(instance: TspInstance, max_nodes: int = HELD_KARP_MAX) -> OracleResult:
    m = instance.size
    if m > max_nodes:
        raise SizeLimitError(f"Held-Karp is capped at {max_nodes} nodes, got {m}")
    dist = distance_matrix(instance.coords)
    if m <= 3:
        tour = list(range(m))
        return OracleResult("held_karp", True, tour_length(dist, tour), tour, 1)
    _, tour = _held_karp_dp(dist)
    tour = [int(t) for t in tour]
    # re-sum along the certificate so the score matches re-scoring exactly
    return OracleResult("held_karp", True, tour_length(dist, tour), tour, (1 << (m - 1)) * (m - 1))


def brute_force_tsp(instance: TspInstance, max_nodes: int = BRUTE_FORCE_MAX) -> OracleResult:
    """Exhaustive search over the (M-1)!/2 distinct tours."""
    m = instance.size
    if m > max_nodes:
        raise SizeLimitError(f"brute force is capped at {max_nodes} nodes, got {m}")
    dist = distance_matrix(instance.coords)
    if m <= 3:
        tour = list(range(m))
        return OracleResult("brute_force", True, tour_length(dist, tour), tour, 1)
    rest = np.array(
        [p for p in itertools.permutations(range(1, m)) if p[0] < p[-1]], dtype=np.int64
    )
    zeros = np.zeros((len(rest), 1), dtype=np.int64)
    tours = np.hstack([zeros, rest, zeros])
    lengths = dist[tours[:, :-1], tours[:, 1:]].sum(axis=1)
    best = int(np.argmin(lengths))
    tour = [int(t) for t in tours[best, :-1]]
    return OracleResult("brute_force", True, tour_length(dist, tour), tour, len(rest))


def farthest_insertion_tsp(instance: TspInstance) -> OracleResult:
    """Farthest insertion; ties go to the lowest index.

    Seeds the tour with the node whose farthest neighbour is farthest, then
    repeatedly adds the node farthest from the tour at its cheapest position.
    """
    m = instance.size
    dist = distance_matrix(instance.coords)
    first = int(dist.max(axis=1).argmax())
    tour = [first]
    in_tour = np.zeros(m, dtype=bool)
    in_tour[first] = True
    gap = dist[first].copy()  # distance from each node to the tour
    for _ in range(m - 1):
        cand = np.where(in_tour, -np.inf, gap)
        node = int(cand.argmax())
        t = np.array(tour)
        nxt = np.roll(t, -1)
        cost = dist[t, node] + dist[node, nxt] - dist[t, nxt]
        pos = int(cost.argmin())
        tour.insert(pos + 1, node)
        in_tour[node] = True
        gap = np.minimum(gap, dist[node])
    return OracleResult("farthest_insertion", False, tour_length(dist, tour), tour, 0)


# --------------------------------------------------------------------------
# KP

def _ratio_order(instance: KpInstance) -> np.ndarray:
    ratio = instance.values / instance.weights
    return np.argsort(-ratio, kind="stable")


def kp_greedy(instance: KpInstance) -> OracleResult:
    """Pack items by decreasing value/weight until the next one does not fit."""
    cap = instance.capacity
    chosen = []
    load = 0.0
    for i in _ratio_order(instance):
        w = instance.weights[i]
        if load + w > cap:
            break
        chosen.append(int(i))
        load += w
    value = float(instance.values[chosen].sum()) if chosen else 0.0
    return OracleResult("kp_greedy", False, value, chosen, 0)


def _kp_greedy_fill(instance: KpInstance) -> list:
    # skips items that do not fit; a tighter incumbent for branch-and-bound
    chosen, load = [], 0.0
    for i in _ratio_order(instance):
        if load + instance.weights[i] <= instance.capacity:
            chosen.append(int(i))
            load += instance.weights[i]
    return chosen


def kp_exact(instance: KpInstance, node_budget: int = 50_000_000) -> OracleResult:
    """Depth-first branch-and-bound with the fractional (Dantzig) upper bound."""
    m = instance.size
    if m > KP_EXACT_MAX:
        raise SizeLimitError(f"kp_exact is capped at {KP_EXACT_MAX} items, got {m}")
    order = _ratio_order(instance)
    w = instance.weights[order].tolist()
    v = instance.values[order].tolist()
    cw = [0.0]
    cv = [0.0]
    for wi, vi in zip(w, v):
        cw.append(cw[-1] + wi)
        cv.append(cv[-1] + vi)
    cap0 = instance.capacity

    def bound(k, cap, val):
        # largest j with cw[j] - cw[k] <= cap
        j = bisect.bisect_right(cw, cw[k] + cap, lo=k) - 1
        ub = val + cv[j] - cv[k]
        if j < m:
            ub += (cap - (cw[j] - cw[k])) * v[j] / w[j]
        return ub

    incumbent = _kp_greedy_fill(instance)
    best_val = float(instance.values[incumbent].sum()) if incumbent else 0.0
    rank = {int(o): r for r, o in enumerate(order)}
    best_set = sorted(rank[i] for i in incumbent)

    nodes = 0
    chosen = []
    # explicit stack of (next item, remaining capacity, value, items chosen so far)
    stack = [(0, cap0, 0.0, 0)]
    while stack:
        k, cap, val, depth = stack.pop()
        del chosen[depth:]
        nodes += 1
        if nodes > node_budget:
            raise ResourceError(f"kp_exact exceeded {node_budget} nodes")
        if val > best_val:
            best_val, best_set = val, list(chosen)
        if k == m or bound(k, cap, val) <= best_val:
            continue
        # exclude branch pushed first so the include branch is explored first
        stack.append((k + 1, cap, val, depth))
        if w[k] <= cap:
            chosen.append(k)
            stack.append((k + 1, cap - w[k], val + v[k], depth + 1))
    cert = sorted(int(order[r]) for r in best_set)
    value = float(instance.values[cert].sum()) if cert else 0.0
    return OracleResult("kp_exact", True, value, cert, nodes)


def kp_brute_force(instance: KpInstance) -> OracleResult:
    """All 2^M subsets; test oracle for small M."""
    m = instance.size
    if m > 22:
        raise SizeLimitError("subset enumeration is capped at 22 items")
    masks = np.arange(1 << m, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(m)) & 1).astype(np.float64)
    weight = bits @ instance.weights
    value = np.where(weight <= instance.capacity, bits @ instance.values, -np.inf)
    best = int(np.argmax(value))
    cert = [i for i in range(m) if (best >> i) & 1]
    score = float(instance.values[cert].sum()) if cert else 0.0
    return OracleResult("kp_brute_force", True, score, cert, 1 << m)


# --------------------------------------------------------------------------
# CVRP

def _two_opt(route: list, dist: np.ndarray) -> list:
    """2-opt on a closed route whose first element (the depot) stays fixed."""
    route = list(route)
    improved = True
    n = len(route)
    while improved:
        improved = False
        for i in range(1, n - 1):
            for j in range(i + 1, n):
                a, b = route[i - 1], route[i]
                c, d = route[j], route[(j + 1) % n]
                delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
                if delta < -1e-12:
                    route[i : j + 1] = route[i : j + 1][::-1]
                    improved = True
    return route


def cvrp_reference(instance: CvrpInstance) -> OracleResult:
    """Capacity-aware nearest neighbour followed by 2-opt inside each trip."""
    locs = instance.locations
    dist = distance_matrix(locs)
    demand = np.concatenate([[0.0], instance.demands])
    m = instance.size
    unvisited = set(range(1, m + 1))
    trips = []
    while unvisited:
        trip, load, here = [], 0.0, 0
        while True:
            options = [c for c in unvisited if load + demand[c] <= instance.capacity + 1e-9]
            if not options:
                break
            nxt = min(options, key=lambda c: (dist[here, c], c))
            trip.append(nxt)
            load += demand[nxt]
            unvisited.discard(nxt)
            here = nxt
        trips.append(trip)
    actions = []
    for trip in trips:
        route = _two_opt([0] + trip, dist) if len(trip) > 2 else [0] + trip
        actions.extend(route[1:])
        actions.append(0)
    length = 0.0
    path = [0] + actions
    for a, b in zip(path, path[1:]):
        length += dist[a, b]
    return OracleResult("cvrp_reference", False, float(length), actions, 0)


SOLVERS = {
    "held_karp": held_karp_tsp,
    "brute_force": brute_force_tsp,
    "farthest_insertion": farthest_insertion_tsp,
    "kp_exact": kp_exact,
    "kp_greedy": kp_greedy,
    "cvrp_reference": cvrp_reference,
}

SOLVER_KINDS = {
    "held_karp": "tsp",
    "brute_force": "tsp",
    "farthest_insertion": "tsp",
    "kp_exact": "kp",
    "kp_greedy": "kp",
    "cvrp_reference": "cvrp",
}

EXACT = {"held_karp", "brute_force", "kp_exact"}

