"""User-equilibrium traffic assignment by the Frank-Wolfe method.

The congestion model is a quartic volume-delay function, time = d(1 + a x^4)
with free-flow time proportional to length. Each undirected edge is expanded
into two directed arcs of equal length; the convex flow objective (sum of
per-arc delay integrals) is minimized link-wise, so path flows never need to
be enumerated. Reported link flows are per undirected edge, both directions
summed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netcore import ODMatrix, RoadNetwork

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


class DisconnectedDemand(Exception):
    """Positive demand between nodes with no connecting path."""

    def __init__(self, origin: int, dest: int):
        self.origin = origin
        self.dest = dest
        super().__init__(f"no path carries demand from node {origin} to node {dest}")


@dataclass(frozen=True)
class AssignmentConfig:
    alpha: float = 0.15
    fw_tolerance: float = 1e-3
    fw_max_iters: int = 200
    line_search_tol: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.fw_tolerance <= 0 or self.line_search_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.fw_max_iters < 1:
            raise ValueError("fw_max_iters must be at least 1")


@dataclass(frozen=True)
class AssignmentResult:
    """Equilibrium flows and diagnostics from one lower-level solve."""

    link_flows: np.ndarray          # per undirected edge, both directions summed
    arc_flows: np.ndarray           # per directed arc, sorted by (from, to)
    arc_lengths: np.ndarray
    alpha: float
    total_travel_time: float
    beckmann_value: float
    relative_gap: float
    iterations: int
    beckmann_trace: tuple[float, ...] = field(repr=False, default=())


def bpr_time(length_km, flow, alpha: float = 0.15):
    """Travel time d(1 + alpha * x^4); strictly increasing in flow for alpha > 0."""
    return length_km * (1.0 + alpha * flow ** 4)


class ArcGraph:
    """Directed two-arc expansion of an undirected edge list.

    Arcs are sorted by (from, to) node index; ties in shortest-path
    relaxations therefore resolve toward the lexicographically lowest arc,
    which keeps loading deterministic.
    """

    def __init__(self, n: int, edge_u, edge_v, edge_len):
        m = 2 * len(edge_len)
        arc_from = np.empty(m, dtype=np.int64)
        arc_to = np.empty(m, dtype=np.int64)
        arc_len = np.empty(m, dtype=np.float64)
        arc_edge = np.empty(m, dtype=np.int64)
        for i in range(len(edge_len)):
            arc_from[2 * i], arc_to[2 * i] = edge_u[i], edge_v[i]
            arc_from[2 * i + 1], arc_to[2 * i + 1] = edge_v[i], edge_u[i]
            arc_len[2 * i] = arc_len[2 * i + 1] = edge_len[i]
            arc_edge[2 * i] = arc_edge[2 * i + 1] = i
        order = np.lexsort((arc_to, arc_from))
        self.n = n
        self.m = m
        self.arc_from = np.ascontiguousarray(arc_from[order])
        self.arc_to = np.ascontiguousarray(arc_to[order])
        self.arc_len = np.ascontiguousarray(arc_len[order])
        self.arc_edge = np.ascontiguousarray(arc_edge[order])
        starts = np.zeros(n + 1, dtype=np.int64)
        for a in range(m):
            starts[self.arc_from[a] + 1] += 1
        self.adj_start = np.cumsum(starts).astype(np.int64)

    @classmethod
    def from_network(cls, net: RoadNetwork) -> "ArcGraph":
        eu = [e.u - 1 for e in net.edges]
        ev = [e.v - 1 for e in net.edges]
        el = [e.length_km for e in net.edges]
        return cls(net.n, eu, ev, el)

    def edge_flows(self, arc_flows: np.ndarray, n_edges: int) -> np.ndarray:
        return np.bincount(self.arc_edge, weights=arc_flows, minlength=n_edges)


@njit(cache=True, nogil=True)
def _dijkstra(n, adj_start, arc_to, times, origin, dist, pred_arc):
    for i in range(n):
        dist[i] = np.inf
        pred_arc[i] = -1
    dist[origin] = 0.0
    settled = np.zeros(n, dtype=np.bool_)
    for _ in range(n):
        best = -1
        bd = np.inf
        for v in range(n):
            if not settled[v] and dist[v] < bd:
                bd = dist[v]
                best = v
        if best < 0:
            break
        settled[best] = True
        for a in range(adj_start[best], adj_start[best + 1]):
            w = arc_to[a]
            nd = bd + times[a]
            if nd < dist[w]:
                dist[w] = nd
                pred_arc[w] = a


@njit(cache=True, nogil=True)
def _load_all_or_nothing(n, adj_start, arc_from, arc_to, times, demand, s):
    """All-or-nothing loading; returns (origin, dest) of the first unreachable
    positive demand, or (-1, -1) when every demand is routable."""
    dist = np.empty(n, dtype=np.float64)
    pred_arc = np.empty(n, dtype=np.int64)
    for a in range(s.shape[0]):
        s[a] = 0.0
    for r in range(n):
        has = False
        for t in range(n):
            if demand[r, t] > 0.0:
                has = True
                break
        if not has:
            continue
        _dijkstra(n, adj_start, arc_to, times, r, dist, pred_arc)
        for t in range(n):
            d = demand[r, t]
            if d <= 0.0:
                continue
            if not np.isfinite(dist[t]):
                return r, t
            v = t
            while v != r:
                a = pred_arc[v]
                s[a] += d
                v = arc_from[a]
    return -1, -1


@njit(cache=True, nogil=True)
def _arc_times(arc_len, x, alpha, times):
    for a in range(arc_len.shape[0]):
        xa = x[a]
        times[a] = arc_len[a] * (1.0 + alpha * xa * xa * xa * xa)


@njit(cache=True, nogil=True)
def _beckmann(arc_len, x, alpha):
    total = 0.0
    for a in range(arc_len.shape[0]):
        xa = x[a]
        total += arc_len[a] * (xa + alpha * xa ** 5 / 5.0)
    return total


@njit(cache=True, nogil=True)
def _dir_derivative(arc_len, x, delta, alpha, gamma):
    out = 0.0
    for a in range(arc_len.shape[0]):
        xa = x[a] + gamma * delta[a]
        out += arc_len[a] * (1.0 + alpha * xa * xa * xa * xa) * delta[a]
    return out


@njit(cache=True, nogil=True)
def _fw_loop(n, adj_start, arc_from, arc_to, arc_len, demand, alpha, tol, max_iters, ls_tol):
    m = arc_len.shape[0]
    x = np.zeros(m, dtype=np.float64)
    s = np.zeros(m, dtype=np.float64)
    times = np.empty(m, dtype=np.float64)
    delta = np.empty(m, dtype=np.float64)
    trace = np.empty(max_iters + 1, dtype=np.float64)

    # initialization: free-flow all-or-nothing
    _arc_times(arc_len, x, alpha, times)
    bad_o, bad_d = _load_all_or_nothing(n, adj_start, arc_from, arc_to, times, demand, s)
    if bad_o >= 0:
        return x, trace[:0], 0.0, 0, bad_o, bad_d
    x[:] = s
    trace[0] = _beckmann(arc_len, x, alpha)

    rel_gap = 0.0
    iters = 0
    for _ in range(max_iters):
        _arc_times(arc_len, x, alpha, times)
        _load_all_or_nothing(n, adj_start, arc_from, arc_to, times, demand, s)
        gap = 0.0
        for a in range(m):
            gap += times[a] * (x[a] - s[a])
        fb = trace[iters]
        rel_gap = gap / abs(fb) if fb != 0.0 else 0.0
        if rel_gap <= tol:
            return x, trace[: iters + 1], rel_gap, iters, -1, -1
        for a in range(m):
            delta[a] = s[a] - x[a]
        if _dir_derivative(arc_len, x, delta, alpha, 1.0) <= 0.0:
            gamma = 1.0
        else:
            lo, hi = 0.0, 1.0
            while hi - lo > ls_tol:
                mid = 0.5 * (lo + hi)
                dv = _dir_derivative(arc_len, x, delta, alpha, mid)
                if dv > 0.0:
                    hi = mid
                elif dv < 0.0:
                    lo = mid
                else:
                    lo = mid
                    hi = mid
            gamma = 0.5 * (lo + hi)
        for a in range(m):
            x[a] += gamma * delta[a]
        iters += 1
        trace[iters] = _beckmann(arc_len, x, alpha)

    # iteration cap reached: report the gap at the final point
    _arc_times(arc_len, x, alpha, times)
    _load_all_or_nothing(n, adj_start, arc_from, arc_to, times, demand, s)
    gap = 0.0
    for a in range(m):
        gap += times[a] * (x[a] - s[a])
    fb = trace[iters]
    rel_gap = gap / abs(fb) if fb != 0.0 else 0.0
    return x, trace[: iters + 1], rel_gap, iters, -1, -1


def _solve_on_graph(graph: ArcGraph, demand: np.ndarray, cfg: AssignmentConfig, n_edges: int) -> AssignmentResult:
    x, trace, rel_gap, iters, bad_o, bad_d = _fw_loop(
        graph.n,
        graph.adj_start,
        graph.arc_from,
        graph.arc_to,
        graph.arc_len,
        demand,
        cfg.alpha,
        cfg.fw_tolerance,
        cfg.fw_max_iters,
        cfg.line_search_tol,
    )
    if bad_o >= 0:
        raise DisconnectedDemand(bad_o + 1, bad_d + 1)
    times = bpr_time(graph.arc_len, x, cfg.alpha)
    total = float(np.dot(x, times))
    return AssignmentResult(
        link_flows=graph.edge_flows(x, n_edges),
        arc_flows=x,
        arc_lengths=graph.arc_len,
        alpha=cfg.alpha,
        total_travel_time=total,
        beckmann_value=float(trace[-1]) if len(trace) else 0.0,
        relative_gap=float(rel_gap),
        iterations=int(iters),
        beckmann_trace=tuple(float(v) for v in trace),
    )


def frank_wolfe(net: RoadNetwork, od: ODMatrix, cfg: AssignmentConfig | None = None) -> AssignmentResult:
    """Solve the equilibrium assignment on a network.

    Raises DisconnectedDemand when some positive demand has no path. Hitting
    the iteration cap is not an error; the result carries the achieved gap.
    """
    cfg = cfg or AssignmentConfig()
    if od.n != net.n:
        raise ValueError(f"demand matrix is {od.n}x{od.n} but network has {net.n} nodes")
    graph = ArcGraph.from_network(net)
    return _solve_on_graph(graph, od.demand, cfg, len(net.edges))


def total_travel_time(result: AssignmentResult) -> float:
    """Recompute flow-weighted travel time from the stored arc flows."""
    times = bpr_time(result.arc_lengths, result.arc_flows, result.alpha)
    return float(np.dot(result.arc_flows, times))


def shortest_path_costs(
    net: RoadNetwork,
    origin: int,
    flows=None,
    alpha: float = 0.15,
) -> tuple[dict[int, float], dict[int, int | None]]:
    """Single-source shortest paths under congested times for given edge flows.

    Returns per-node cost and predecessor maps keyed by node id; unreachable
    nodes carry infinite cost and no predecessor.
    """
    graph = ArcGraph.from_network(net)
    if flows is None:
        flows = np.zeros(len(net.edges))
    edge_times = bpr_time(np.array([e.length_km for e in net.edges]), np.asarray(flows, dtype=float), alpha)
    times = edge_times[graph.arc_edge]
    dist = np.empty(net.n, dtype=np.float64)
    pred_arc = np.empty(net.n, dtype=np.int64)
    _dijkstra(net.n, graph.adj_start, graph.arc_to, times, origin - 1, dist, pred_arc)
    costs = {}
    preds = {}
    for i in range(net.n):
        costs[i + 1] = float(dist[i])
        a = pred_arc[i]
        preds[i + 1] = int(graph.arc_from[a]) + 1 if a >= 0 else None
    return costs, preds


def all_or_nothing(net: RoadNetwork, od: ODMatrix, link_times=None) -> np.ndarray:
    """Load every demand onto its current shortest path; per-edge flows.

    Ties resolve to the lexicographically lowest arcs. Raises
    DisconnectedDemand when a positive demand has no connecting path.
    """
    graph = ArcGraph.from_network(net)
    if link_times is None:
        link_times = np.array([e.length_km for e in net.edges])
    times = np.asarray(link_times, dtype=float)[graph.arc_edge]
    s = np.zeros(graph.m)
    bad_o, bad_d = _load_all_or_nothing(
        graph.n, graph.adj_start, graph.arc_from, graph.arc_to, times, od.demand, s
    )
    if bad_o >= 0:
        raise DisconnectedDemand(bad_o + 1, bad_d + 1)
    return graph.edge_flows(s, len(net.edges))


def warmup_jit() -> None:
    """Compile the numerical kernels on a toy instance (no-op without numba)."""
    g = ArcGraph(2, [0], [1], [1.0])
    demand = np.zeros((2, 2))
    demand[0, 1] = 1.0
    _solve_on_graph(g, demand, AssignmentConfig(fw_max_iters=2), 1)
