"""Road network data model, geometry, centrality and file ingestion.

Networks are undirected simple graphs whose nodes carry geographic
coordinates. Edge lengths default to great-circle distances, which also
serve as construction costs, so budgets are expressed in kilometres.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0

REPORT_SCHEMA = 1

#: shortest-path weightings supported by edge_betweenness
WEIGHTINGS = ("hops", "distance")

#: weighting that reproduces the bundled instance's reference scores
DEFAULT_WEIGHTING = "hops"


class DataError(Exception):
    """Malformed input data, with file and line context when available."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if self.path is not None:
            where = f"{self.path}: "
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class Node:
    id: int
    lat: float
    lon: float
    name: str = ""

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"node {self.id}: latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"node {self.id}: longitude {self.lon} out of range")


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    length_km: float

    def __post_init__(self):
        if self.u == self.v:
            raise ValueError(f"self-loop at node {self.u}")
        if not self.length_km > 0.0:
            raise ValueError(f"edge {self.u}-{self.v}: nonpositive length")

    @property
    def key(self) -> tuple[int, int]:
        return (self.u, self.v) if self.u < self.v else (self.v, self.u)


def haversine_km(a: Node, b: Node) -> float:
    """Great-circle distance between two nodes in kilometres."""
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dp = p2 - p1
    dl = math.radians(b.lon - a.lon)
    h = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


class RoadNetwork:
    """Immutable undirected network with unique node ids 1..n."""

    def __init__(self, nodes: Sequence[Node], edges: Sequence[Edge]):
        ids = [n.id for n in nodes]
        if sorted(ids) != list(range(1, len(nodes) + 1)):
            raise ValueError("node ids must be unique and contiguous from 1")
        self.nodes = tuple(sorted(nodes, key=lambda n: n.id))
        self._by_id = {n.id: n for n in self.nodes}
        seen = set()
        for e in edges:
            if e.u not in self._by_id or e.v not in self._by_id:
                raise ValueError(f"edge {e.u}-{e.v} references unknown node")
            if e.key in seen:
                raise ValueError(f"duplicate edge {e.u}-{e.v}")
            seen.add(e.key)
        self.edges = tuple(edges)
        self._edge_keys = frozenset(seen)

    @property
    def n(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> Node:
        return self._by_id[node_id]

    def has_edge(self, u: int, v: int) -> bool:
        return ((u, v) if u < v else (v, u)) in self._edge_keys

    def edge_keys(self) -> frozenset[tuple[int, int]]:
        return self._edge_keys

    def coords(self) -> dict[int, tuple[float, float]]:
        """Planar (x, y) = (lon, lat) per node id, for intersection tests."""
        return {n.id: (n.lon, n.lat) for n in self.nodes}

    def with_edges_added(self, extra: Iterable[Edge]) -> "RoadNetwork":
        return RoadNetwork(self.nodes, list(self.edges) + list(extra))


@dataclass(frozen=True)
class CandidateSet:
    """Edges absent from the base network, in deterministic (u, v) order."""

    edges: tuple[Edge, ...]

    def __len__(self) -> int:
        return len(self.edges)

    def __getitem__(self, i: int) -> Edge:
        return self.edges[i]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([e.length_km for e in self.edges])


def build_candidates(net: RoadNetwork) -> CandidateSet:
    """All node pairs missing from the network, costed by haversine length."""
    out = []
    ids = [n.id for n in net.nodes]
    for i, u in enumerate(ids):
        for v in ids[i + 1 :]:
            if not net.has_edge(u, v):
                out.append(Edge(u, v, haversine_km(net.node(u), net.node(v))))
    out.sort(key=lambda e: e.key)
    return CandidateSet(tuple(out))


class ODMatrix:
    """Origin-destination demand, nonnegative with a zero diagonal."""

    def __init__(self, demand: np.ndarray):
        demand = np.asarray(demand, dtype=float)
        if demand.ndim != 2 or demand.shape[0] != demand.shape[1]:
            raise ValueError("demand must be a square matrix")
        if np.any(demand < 0):
            raise ValueError("demand entries must be nonnegative")
        if np.any(np.diag(demand) != 0):
            raise ValueError("demand diagonal must be zero")
        self.demand = demand
        self.demand.setflags(write=False)

    @property
    def n(self) -> int:
        return self.demand.shape[0]

    def total(self) -> float:
        return float(self.demand.sum())

    def origins(self) -> np.ndarray:
        """Row indices (0-based) with positive outgoing demand."""
        return np.flatnonzero(self.demand.sum(axis=1) > 0)


@dataclass(frozen=True)
class BetweennessScores:
    """Normalized edge betweenness, keyed by (u, v) with u < v."""

    weighting: str
    scores: Mapping[tuple[int, int], float]

    def __getitem__(self, key: tuple[int, int]) -> float:
        u, v = key
        return self.scores[(u, v) if u < v else (v, u)]

    def mean(self) -> float:
        return float(np.mean(list(self.scores.values())))


def edge_betweenness(net: RoadNetwork, weighting: str = DEFAULT_WEIGHTING) -> BetweennessScores:
    """Brandes accumulation of shortest-path fractions per edge.

    Ties are split across all shortest paths. Scores carry the undirected
    normalization 2/(n(n-1)); every score lies in [0, 1]. Unreachable node
    pairs contribute nothing.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    ids = [n.id for n in net.nodes]
    adj: dict[int, list[tuple[int, float]]] = {i: [] for i in ids}
    for e in net.edges:
        adj[e.u].append((e.v, e.length_km))
        adj[e.v].append((e.u, e.length_km))
    for i in ids:
        adj[i].sort()

    raw = {e.key: 0.0 for e in net.edges}
    for s in ids:
        sigma = {v: 0 for v in ids}
        dist = {v: math.inf for v in ids}
        preds: dict[int, list[int]] = {v: [] for v in ids}
        sigma[s] = 1
        dist[s] = 0.0
        order: list[int] = []
        if weighting == "distance":
            pq = [(0.0, s)]
            settled = set()
            while pq:
                d, v = heapq.heappop(pq)
                if v in settled:
                    continue
                settled.add(v)
                order.append(v)
                for w, lw in adj[v]:
                    nd = d + lw
                    if nd < dist[w]:
                        dist[w] = nd
                        sigma[w] = sigma[v]
                        preds[w] = [v]
                        heapq.heappush(pq, (nd, w))
                    elif nd == dist[w]:
                        sigma[w] += sigma[v]
                        preds[w].append(v)
        else:
            q = deque([s])
            while q:
                v = q.popleft()
                order.append(v)
                for w, _ in adj[v]:
                    if math.isinf(dist[w]):
                        dist[w] = dist[v] + 1
                        q.append(w)
                    if dist[w] == dist[v] + 1:
                        sigma[w] += sigma[v]
                        preds[w].append(v)
        delta = {v: 0.0 for v in ids}
        for v in reversed(order):
            for u in preds[v]:
                c = sigma[u] / sigma[v] * (1.0 + delta[v])
                raw[(u, v) if u < v else (v, u)] += c
                delta[u] += c

    n = net.n
    # each unordered pair is visited from both endpoints: /2, then 2/(n(n-1))
    norm = 1.0 / (n * (n - 1)) if n > 1 else 0.0
    return BetweennessScores(weighting, {k: c * norm for k, c in raw.items()})


def select_weighting(
    net: RoadNetwork, reference: Mapping[tuple[int, int], float]
) -> tuple[str, dict[str, float]]:
    """Pick the weighting with the lower max absolute deviation from reference scores."""
    deviations = {}
    for w in WEIGHTINGS:
        scores = edge_betweenness(net, w)
        deviations[w] = max(abs(scores[k] - ref) for k, ref in reference.items())
    chosen = min(WEIGHTINGS, key=lambda w: deviations[w])
    return chosen, deviations


def _orient(ax, ay, bx, by, cx, cy) -> float:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _open_segments_cross(p1, p2, p3, p4) -> bool:
    d1 = _orient(*p3, *p4, *p1)
    d2 = _orient(*p3, *p4, *p2)
    d3 = _orient(*p1, *p2, *p3)
    d4 = _orient(*p1, *p2, *p4)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    if d1 == 0 and d2 == 0 and d3 == 0 and d4 == 0:
        # collinear: crossing iff the open intervals overlap
        xs = sorted([p1, p2])
        ys = sorted([p3, p4])
        lo = max(xs[0], ys[0])
        hi = min(xs[1], ys[1])
        return lo < hi
    return False


def segment_intersections(
    edges_a: Iterable[Edge],
    edges_b: Iterable[Edge],
    coords: Mapping[int, tuple[float, float]],
) -> int:
    """Count unordered edge pairs (one from each list) whose open segments cross.

    Pairs sharing an endpoint node are never counted; collinear overlap is.
    Coordinates are treated as planar, which is adequate at city scale.
    """
    a = list(edges_a)
    b = list(edges_b)
    counted = set()
    hits = 0
    for ea in a:
        for eb in b:
            if ea.key == eb.key:
                continue
            pair = (ea.key, eb.key) if ea.key < eb.key else (eb.key, ea.key)
            if pair in counted:
                continue
            counted.add(pair)
            if {ea.u, ea.v} & {eb.u, eb.v}:
                continue
            if _open_segments_cross(coords[ea.u], coords[ea.v], coords[eb.u], coords[eb.v]):
                hits += 1
    return hits


def pcu_convert(passengers: float, occupants: Sequence[float], trip_shares: Sequence[float]) -> float:
    """Convert a passenger count to passenger car units.

    Each transport type contributes its trip share of the passengers divided
    by its occupancy, i.e. the vehicle count it puts on the road.
    """
    if len(occupants) != len(trip_shares):
        raise ValueError("occupants and trip_shares must have equal length")
    for a in occupants:
        if not a > 0:
            raise ValueError("occupants must be positive")
    return float(sum(s * passengers / a for a, s in zip(occupants, trip_shares)))


# ---------------------------------------------------------------------------
# file I/O


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.reader(f))
    except OSError as exc:
        raise DataError(str(exc), path=path) from exc


def load_network(nodes_path, edges_path) -> RoadNetwork:
    """Read nodes and edges CSVs; edge lengths default to haversine distance."""
    rows = _read_rows(nodes_path)
    if not rows:
        raise DataError("no data rows", path=nodes_path)
    nodes = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise DataError(f"expected id,lat,lon[,name], got {len(row)} fields", nodes_path, ln)
        try:
            node = Node(
                int(row[0]),
                float(row[1]),
                float(row[2]),
                row[3].strip() if len(row) > 3 else "",
            )
        except ValueError as exc:
            raise DataError(str(exc), nodes_path, ln) from exc
        nodes.append(node)
    if not nodes:
        raise DataError("no data rows", path=nodes_path)

    try:
        net_nodes = {n.id: n for n in nodes}
        if len(net_nodes) != len(nodes):
            raise ValueError("duplicate node ids")
    except ValueError as exc:
        raise DataError(str(exc), path=nodes_path) from exc

    rows = _read_rows(edges_path)
    if not rows:
        raise DataError("no data rows", path=edges_path)
    edges = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 2:
            raise DataError("expected u,v[,length_km]", edges_path, ln)
        try:
            u, v = int(row[0]), int(row[1])
        except ValueError as exc:
            raise DataError(f"bad node id: {exc}", edges_path, ln) from exc
        if u not in net_nodes or v not in net_nodes:
            raise DataError(f"unknown node id in edge {u}-{v}", edges_path, ln)
        if len(row) > 2 and row[2].strip():
            try:
                length = float(row[2])
            except ValueError as exc:
                raise DataError(f"bad length: {row[2]}", edges_path, ln) from exc
        else:
            length = haversine_km(net_nodes[u], net_nodes[v])
        try:
            edges.append(Edge(u, v, length))
        except ValueError as exc:
            raise DataError(str(exc), edges_path, ln) from exc
    try:
        return RoadNetwork(nodes, edges)
    except ValueError as exc:
        raise DataError(str(exc), path=edges_path) from exc


def load_od(path, node_ids: Sequence[int]) -> ODMatrix:
    """Read demand as a dense id-labelled matrix or origin,dest,demand triplets."""
    rows = [r for r in _read_rows(path) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError("no data rows", path=path)
    header = [c.strip().lower() for c in rows[0]]
    ids = list(node_ids)
    index = {i: k for k, i in enumerate(ids)}
    n = len(ids)
    demand = np.zeros((n, n))

    if header[:3] == ["origin", "dest", "demand"]:
        if len(rows) == 1:
            raise DataError("no data rows", path=path)
        for ln, row in enumerate(rows[1:], start=2):
            try:
                o, d, val = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise DataError(f"bad triplet row: {exc}", path, ln) from exc
            if o not in index or d not in index:
                raise DataError(f"unknown node id in pair {o}-{d}", path, ln)
            if val < 0:
                raise DataError(f"negative demand {val}", path, ln)
            demand[index[o], index[d]] = val
    else:
        try:
            col_ids = [int(c) for c in rows[0][1:]]
        except ValueError as exc:
            raise DataError(f"bad matrix header: {exc}", path, 1) from exc
        if sorted(col_ids) != sorted(ids):
            raise DataError("matrix header does not cover the network's node ids", path, 1)
        if len(rows) == 1:
            raise DataError("no data rows", path=path)
        for ln, row in enumerate(rows[1:], start=2):
            try:
                o = int(row[0])
            except ValueError as exc:
                raise DataError(f"bad origin id: {row[0]}", path, ln) from exc
            if o not in index:
                raise DataError(f"unknown node id {o}", path, ln)
            if len(row) != n + 1:
                raise DataError(f"expected {n + 1} fields, got {len(row)}", path, ln)
            for c, cell in zip(col_ids, row[1:]):
                try:
                    val = float(cell)
                except ValueError as exc:
                    raise DataError(f"bad demand value: {cell}", path, ln) from exc
                if val < 0:
                    raise DataError(f"negative demand {val}", path, ln)
                demand[index[o], index[c]] = val
    try:
        return ODMatrix(demand)
    except ValueError as exc:
        raise DataError(str(exc), path=path) from exc


def save_network(net: RoadNetwork, nodes_path, edges_path) -> None:
    with open(nodes_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "lat", "lon", "name"])
        for nd in net.nodes:
            w.writerow([nd.id, repr(nd.lat), repr(nd.lon), nd.name])
    with open(edges_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["u", "v", "length_km"])
        for e in net.edges:
            w.writerow([e.u, e.v, repr(e.length_km)])


def save_od(od: ODMatrix, path, node_ids: Sequence[int]) -> None:
    ids = list(node_ids)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["node"] + [str(i) for i in ids])
        for k, o in enumerate(ids):
            w.writerow([str(o)] + [repr(float(x)) for x in od.demand[k]])


def save_report(payload: dict, path) -> None:
    """Write a schema-versioned JSON report with deterministic bytes."""
    doc = {"schema": REPORT_SCHEMA}
    doc.update(payload)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("schema") != REPORT_SCHEMA:
        raise DataError(f"unsupported report schema {doc.get('schema')!r}", path=path)
    return doc


# ---------------------------------------------------------------------------
# bundled instance


def kinshasa_paths() -> dict[str, Path]:
    root = resources.files("tndp").joinpath("data/kinshasa")
    return {
        "nodes": Path(str(root.joinpath("nodes.csv"))),
        "edges": Path(str(root.joinpath("edges.csv"))),
        "od": Path(str(root.joinpath("od.csv"))),
        "reference_betweenness": Path(str(root.joinpath("reference_betweenness.csv"))),
    }


def load_kinshasa() -> tuple[RoadNetwork, ODMatrix]:
    paths = kinshasa_paths()
    net = load_network(paths["nodes"], paths["edges"])
    od = load_od(paths["od"], [n.id for n in net.nodes])
    return net, od


def load_reference_betweenness(path=None) -> dict[tuple[int, int], float]:
    """Published per-edge betweenness scores for the bundled instance."""
    if path is None:
        path = kinshasa_paths()["reference_betweenness"]
    rows = _read_rows(path)
    out = {}
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            u, v = int(row[0]), int(row[1])
            out[(u, v) if u < v else (v, u)] = float(row[2])
        except ValueError as exc:
            raise DataError(str(exc), path, ln) from exc
    return out
