"""Upper-level network design: binary edge selections under a km budget.

A design selects candidate edges to add to the base network. Its objective is
the equilibrium total travel time of the augmented network plus, when enabled
(q=1), a penalty per geometric crossing among the new edges. Evaluations are
counted against a per-run budget and memoized by selection, so re-evaluating
a known design is free.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .assignment import ArcGraph, AssignmentConfig, AssignmentResult, _solve_on_graph
from .netcore import (
    CandidateSet,
    ODMatrix,
    RoadNetwork,
    build_candidates,
    kinshasa_paths,
    load_network,
    load_od,
    _open_segments_cross,
)

DEFAULT_BUDGET_KM = 100.0
DEFAULT_FEV_CAP = 4000


class InfeasibleDesign(ValueError):
    """A design over budget was submitted for evaluation."""


class EvalBudgetExhausted(RuntimeError):
    """The run's evaluation budget is spent."""


@dataclass(frozen=True)
class DesignVector:
    """Sorted candidate indices plus their summed construction cost."""

    selected: tuple[int, ...]
    cost_km: float

    def __len__(self) -> int:
        return len(self.selected)


@dataclass(frozen=True)
class ObjectiveValue:
    total: float
    travel_time: float
    crossings: int
    feasible: bool
    assignment: AssignmentResult


@dataclass
class DesignProblem:
    """One design instance: base network, candidates, demand and budget.

    ``crossing_penalty`` may be the string "auto", which resolves to a tenth
    of the empty-design travel time so the penalty scales with the instance.
    Logically immutable; internal caches are thread-safe.
    """

    base_net: RoadNetwork
    candidates: CandidateSet
    od: ODMatrix
    budget_km: float = DEFAULT_BUDGET_KM
    q: int = 0
    crossing_penalty: float | str = "auto"
    assignment_cfg: AssignmentConfig = field(default_factory=AssignmentConfig)
    name: str = "problem"

    def __post_init__(self):
        if not self.budget_km > 0:
            raise ValueError("budget_km must be positive")
        if self.q not in (0, 1):
            raise ValueError("q must be 0 or 1")
        if self.crossing_penalty != "auto" and float(self.crossing_penalty) < 0:
            raise ValueError("crossing penalty must be nonnegative")
        self._lock = threading.RLock()
        self._memo: dict = {}
        self._cand_lengths = self.candidates.lengths
        self._cand_lengths.setflags(write=False)
        base = self.base_net.edges
        self._base_u = np.array([e.u - 1 for e in base], dtype=np.int64)
        self._base_v = np.array([e.v - 1 for e in base], dtype=np.int64)
        self._base_len = np.array([e.length_km for e in base])
        self._cand_u = np.array([e.u - 1 for e in self.candidates.edges], dtype=np.int64)
        self._cand_v = np.array([e.v - 1 for e in self.candidates.edges], dtype=np.int64)

    @property
    def candidate_lengths(self) -> np.ndarray:
        return self._cand_lengths

    def design_cost(self, indices: Iterable[int]) -> float:
        """Canonical cost of a selection; all feasibility checks use this."""
        idx = sorted(indices)
        if not idx:
            return 0.0
        return float(self._cand_lengths[idx].sum())

    def make_design(self, indices: Iterable[int]) -> DesignVector:
        idx = tuple(sorted(indices))
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate candidate indices")
        if idx and (idx[0] < 0 or idx[-1] >= len(self.candidates)):
            raise ValueError("candidate index out of range")
        return DesignVector(idx, self.design_cost(idx))

    def memo(self, key, factory):
        """Problem-level cache for deterministic derived values."""
        with self._lock:
            if key in self._memo:
                return self._memo[key]
        value = factory()
        with self._lock:
            return self._memo.setdefault(key, value)

    def solve_assignment(self, indices: Sequence[int]) -> AssignmentResult:
        idx = list(indices)
        eu = np.concatenate([self._base_u, self._cand_u[idx]]) if idx else self._base_u
        ev = np.concatenate([self._base_v, self._cand_v[idx]]) if idx else self._base_v
        el = np.concatenate([self._base_len, self._cand_lengths[idx]]) if idx else self._base_len
        graph = ArcGraph(self.base_net.n, eu, ev, el)
        return _solve_on_graph(graph, self.od.demand, self.assignment_cfg, len(el))

    def baseline(self) -> ObjectiveValue:
        """Objective of the empty design; the instance's reference travel time."""

        def compute():
            result = self.solve_assignment(())
            tt = result.total_travel_time
            return ObjectiveValue(tt, tt, 0, True, result)

        return self.memo("baseline", compute)

    def resolved_penalty(self) -> float:
        if self.crossing_penalty == "auto":
            return self.memo("penalty", lambda: self.baseline().travel_time / 10.0)
        return float(self.crossing_penalty)

    def _crossing_tables(self):
        """Per-candidate crossing counts vs the base net, and pairwise flags."""

        def compute():
            coords = self.base_net.coords()
            cand = self.candidates.edges
            base = self.base_net.edges
            segs = {e.key: (coords[e.u], coords[e.v]) for e in list(cand) + list(base)}

            def crosses(e1, e2):
                if {e1.u, e1.v} & {e2.u, e2.v}:
                    return False
                a, b = segs[e1.key]
                c, d = segs[e2.key]
                return _open_segments_cross(a, b, c, d)

            vs_base = np.zeros(len(cand), dtype=np.int64)
            for i, ce in enumerate(cand):
                vs_base[i] = sum(1 for be in base if crosses(ce, be))
            pair = np.zeros((len(cand), len(cand)), dtype=bool)
            for i in range(len(cand)):
                for j in range(i + 1, len(cand)):
                    if crosses(cand[i], cand[j]):
                        pair[i, j] = pair[j, i] = True
            return vs_base, pair

        return self.memo("crossing_tables", compute)

    def crossing_count(self, indices: Sequence[int]) -> int:
        idx = list(indices)
        if not idx:
            return 0
        vs_base, pair = self._crossing_tables()
        total = int(vs_base[idx].sum())
        sub = pair[np.ix_(idx, idx)]
        total += int(sub.sum()) // 2
        return total


def augment(problem: DesignProblem, design: DesignVector) -> RoadNetwork:
    """Base network plus the design's candidate edges."""
    extra = [problem.candidates[i] for i in design.selected]
    return problem.base_net.with_edges_added(extra)


def budget_check(problem: DesignProblem, design: DesignVector) -> tuple[bool, float]:
    cost = problem.design_cost(design.selected)
    return cost <= problem.budget_km, cost


def crossings(problem: DesignProblem, design: DesignVector) -> int:
    """Crossings among edge pairs with at least one selected member."""
    return problem.crossing_count(design.selected)


class Evaluator:
    """Counts and caches objective evaluations for one solver run.

    Cache hits are free; only distinct designs consume the evaluation budget.
    Accounting is lock-protected so runs may share it across worker threads.
    """

    def __init__(self, problem: DesignProblem, fev_cap: int | None = DEFAULT_FEV_CAP):
        self.problem = problem
        self.fev_cap = fev_cap
        self._count = 0
        self._cache: dict[tuple[int, ...], ObjectiveValue] = {}
        self._lock = threading.Lock()

    @property
    def evals_used(self) -> int:
        return self._count

    def charge(self, evals: int) -> None:
        """Account for evaluations performed on this run's behalf elsewhere."""
        with self._lock:
            self._count += evals

    def evaluate(self, design) -> ObjectiveValue:
        key = tuple(sorted(design.selected if isinstance(design, DesignVector) else design))
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        cost = self.problem.design_cost(key)
        if cost > self.problem.budget_km:
            # rejected before evaluation; consumes no budget
            raise InfeasibleDesign(
                f"selection costs {cost:.3f} km, budget is {self.problem.budget_km:.3f} km"
            )
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
            if self.fev_cap is not None and self._count >= self.fev_cap:
                raise EvalBudgetExhausted(f"evaluation budget of {self.fev_cap} spent")
            self._count += 1
        value = self._compute(key)
        with self._lock:
            self._cache[key] = value
        return value

    def _compute(self, key: tuple[int, ...]) -> ObjectiveValue:
        problem = self.problem
        result = problem.solve_assignment(key)
        tt = result.total_travel_time
        cr = problem.crossing_count(key)
        if problem.q:
            total = tt + problem.resolved_penalty() * cr
        else:
            total = tt
        return ObjectiveValue(total, tt, cr, True, result)


def evaluate(problem: DesignProblem, design: DesignVector) -> ObjectiveValue:
    """One-off evaluation outside any run budget."""
    return Evaluator(problem, fev_cap=None).evaluate(design)


# ---------------------------------------------------------------------------
# problem construction


def build_problem(
    net: RoadNetwork,
    od: ODMatrix,
    budget_km: float = DEFAULT_BUDGET_KM,
    q: int = 0,
    crossing_penalty: float | str = "auto",
    assignment_cfg: AssignmentConfig | None = None,
    name: str = "problem",
) -> DesignProblem:
    return DesignProblem(
        base_net=net,
        candidates=build_candidates(net),
        od=od,
        budget_km=budget_km,
        q=q,
        crossing_penalty=crossing_penalty,
        assignment_cfg=assignment_cfg or AssignmentConfig(),
        name=name,
    )


def load_problem(path) -> DesignProblem:
    """Read a problem definition JSON; data paths resolve against its folder.

    Recognized keys: nodes, edges, od (paths; bundled instance when omitted),
    budget_km, q, lambda ("auto" or a number), alpha, fw_tolerance,
    fw_max_iters, line_search_tol, name.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    known = {
        "nodes", "edges", "od", "budget_km", "q", "lambda", "alpha",
        "fw_tolerance", "fw_max_iters", "line_search_tol", "name",
    }
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown problem keys: {sorted(unknown)}")

    bundled = kinshasa_paths()
    base = path.parent

    def resolve(key):
        if key in doc:
            p = Path(doc[key])
            return p if p.is_absolute() else base / p
        return bundled[key]

    net = load_network(resolve("nodes"), resolve("edges"))
    od = load_od(resolve("od"), [n.id for n in net.nodes])
    cfg = AssignmentConfig(
        alpha=float(doc.get("alpha", 0.15)),
        fw_tolerance=float(doc.get("fw_tolerance", 1e-3)),
        fw_max_iters=int(doc.get("fw_max_iters", 200)),
        line_search_tol=float(doc.get("line_search_tol", 1e-6)),
    )
    penalty = doc.get("lambda", "auto")
    if penalty != "auto":
        penalty = float(penalty)
    return build_problem(
        net,
        od,
        budget_km=float(doc.get("budget_km", DEFAULT_BUDGET_KM)),
        q=int(doc.get("q", 0)),
        crossing_penalty=penalty,
        assignment_cfg=cfg,
        name=str(doc.get("name", path.stem)),
    )


def kinshasa_problem(
    budget_km: float = DEFAULT_BUDGET_KM,
    q: int = 0,
    crossing_penalty: float | str = "auto",
    assignment_cfg: AssignmentConfig | None = None,
) -> DesignProblem:
    from .netcore import load_kinshasa

    net, od = load_kinshasa()
    return build_problem(
        net, od, budget_km=budget_km, q=q, crossing_penalty=crossing_penalty,
        assignment_cfg=assignment_cfg, name=f"kinshasa-q{q}",
    )
