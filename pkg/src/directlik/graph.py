"""DAGs over observed variables, moral graphs and candidate-structure generation.

Edges are ordered pairs ``(j, i)`` meaning ``j -> i`` (``j`` is a parent of
``i``).  This matches the connectivity-matrix convention used throughout the
package: ``B[i, j] != 0`` only if ``(j, i)`` is an edge.
"""
from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CycleError, MatrixNotPDError, ResamplingError, SchemaError

Edge = tuple[int, int]


def _topological_order(p: int, edges: Iterable[Edge]) -> tuple[int, ...] | None:
    children: list[list[int]] = [[] for _ in range(p)]
    indeg = [0] * p
    for j, i in edges:
        children[j].append(i)
        indeg[i] += 1
    queue = deque(sorted(k for k in range(p) if indeg[k] == 0))
    order = []
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in sorted(children[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    if len(order) != p:
        return None
    return tuple(order)


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph on ``p`` observed variables."""

    p: int
    edges: frozenset = field(default_factory=frozenset)
    order: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        edges = frozenset((int(j), int(i)) for j, i in self.edges)
        object.__setattr__(self, "edges", edges)
        if self.p < 0:
            raise ValueError("p must be nonnegative")
        for j, i in edges:
            if j == i:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= j < self.p and 0 <= i < self.p):
                raise ValueError(f"edge {(j, i)} out of range for p={self.p}")
        order = _topological_order(self.p, edges)
        if order is None:
            raise CycleError(sorted(edges))
        object.__setattr__(self, "order", order)

    @classmethod
    def empty(cls, p: int) -> "Dag":
        return cls(p, frozenset())

    @classmethod
    def from_adjacency(cls, b, tol: float = 0.0) -> "Dag":
        """Support of a connectivity matrix (``|b[i, j]| > tol`` gives ``j -> i``)."""
        b = np.asarray(b)
        rows, cols = np.nonzero(np.abs(b) > tol)
        return cls(b.shape[0], frozenset(zip(cols.tolist(), rows.tolist())))

    def adjacency(self) -> np.ndarray:
        """Boolean ``p x p`` mask with ``[i, j]`` set when ``j -> i``."""
        a = np.zeros((self.p, self.p), dtype=bool)
        for j, i in self.edges:
            a[i, j] = True
        return a

    def parents(self, i: int) -> list[int]:
        return sorted(j for j, k in self.edges if k == i)

    def children(self, j: int) -> list[int]:
        return sorted(i for k, i in self.edges if k == j)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def key(self) -> tuple:
        """Canonical encoding used for deterministic ordering and dedup."""
        return (self.p, tuple(sorted(self.edges)))

    def with_edge(self, j: int, i: int) -> "Dag":
        return Dag(self.p, self.edges | {(j, i)})

    def without_edge(self, j: int, i: int) -> "Dag":
        return Dag(self.p, self.edges - {(j, i)})

    def reversed_edge(self, j: int, i: int) -> "Dag":
        if (j, i) not in self.edges:
            raise KeyError((j, i))
        return Dag(self.p, (self.edges - {(j, i)}) | {(i, j)})

    def has_path(self, src: int, dst: int) -> bool:
        """True if a directed path ``src ~> dst`` exists (length >= 0)."""
        if src == dst:
            return True
        children: dict[int, list[int]] = {}
        for j, i in self.edges:
            children.setdefault(j, []).append(i)
        seen = {src}
        stack = [src]
        while stack:
            u = stack.pop()
            for v in children.get(u, ()):
                if v == dst:
                    return True
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return False

    def skeleton(self) -> frozenset:
        return frozenset((min(j, i), max(j, i)) for j, i in self.edges)

    def v_structures(self) -> frozenset:
        """Triples ``(a, c, b)`` with ``a -> c <- b``, ``a < b`` non-adjacent."""
        skel = self.skeleton()
        out = set()
        for c in range(self.p):
            for a, b in itertools.combinations(self.parents(c), 2):
                if (a, b) not in skel:
                    out.add((a, c, b))
        return frozenset(out)

    def is_markov_equivalent(self, other: "Dag") -> bool:
        return (self.p == other.p and self.skeleton() == other.skeleton()
                and self.v_structures() == other.v_structures())

    def covered_edges(self) -> list[Edge]:
        out = []
        for j, i in sorted(self.edges):
            if set(self.parents(i)) == set(self.parents(j)) | {j}:
                out.append((j, i))
        return out

    def to_dict(self) -> dict:
        return {"p": self.p, "edges": [list(e) for e in sorted(self.edges)]}

    @classmethod
    def from_dict(cls, obj) -> "Dag":
        try:
            return cls(int(obj["p"]), frozenset(tuple(e) for e in obj["edges"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CycleError):
                raise
            raise SchemaError(f"bad DAG object: {exc}") from exc

    def __str__(self):
        return "Dag(p=%d, %s)" % (self.p, ", ".join(f"{j}->{i}" for j, i in sorted(self.edges)))


@dataclass(frozen=True)
class MoralGraph:
    p: int
    edges: frozenset

    def __post_init__(self):
        edges = frozenset((min(a, b), max(a, b)) for a, b in self.edges)
        if any(a == b for a, b in edges):
            raise ValueError("moral graph cannot contain self-loops")
        object.__setattr__(self, "edges", edges)

    def __len__(self):
        return len(self.edges)

    def issubset(self, other: "MoralGraph") -> bool:
        return self.edges <= other.edges


def moralize(d: Dag) -> MoralGraph:
    edges = set(d.skeleton())
    for c in range(d.p):
        for a, b in itertools.combinations(d.parents(c), 2):
            edges.add((a, b))
    return MoralGraph(d.p, frozenset(edges))


def moral_edge_count(d: Dag) -> int:
    return len(moralize(d).edges)


def markov_equivalence_class(d: Dag, limit: int = 10_000) -> list[Dag]:
    """All DAGs reachable from ``d`` by covered-edge reversals.

    Covered-edge reversals connect every pair of Markov-equivalent DAGs, so
    the closure is the full equivalence class (capped at ``limit`` members).
    """
    seen = {d.key: d}
    queue = deque([d])
    while queue and len(seen) < limit:
        cur = queue.popleft()
        for j, i in cur.covered_edges():
            nxt = cur.reversed_edge(j, i)
            if nxt.key not in seen:
                seen[nxt.key] = nxt
                queue.append(nxt)
    return sorted(seen.values(), key=lambda g: g.key)


def enumerate_dags(p: int) -> list[Dag]:
    """Every labelled DAG on ``p`` nodes (25 for p=3, 543 for p=4)."""
    if p > 5:
        raise ValueError("exhaustive enumeration is limited to p <= 5")
    pairs = list(itertools.combinations(range(p), 2))
    out = []
    for states in itertools.product((0, 1, 2), repeat=len(pairs)):
        edges = []
        for (a, b), s in zip(pairs, states):
            if s == 1:
                edges.append((a, b))
            elif s == 2:
                edges.append((b, a))
        if _topological_order(p, edges) is not None:
            out.append(Dag(p, frozenset(edges)))
    return out


def sample_er_dag(p: int, edge_prob: float, rng_seed=None, n_edges: int | None = None,
                  max_attempts: int = 10_000) -> Dag:
    """Draw each ordered pair independently with ``edge_prob``; reject cyclic draws.

    ``n_edges`` additionally rejects draws whose edge count differs.
    """
    if not 0.0 <= edge_prob <= 1.0:
        raise ValueError("edge_prob must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    off = ~np.eye(p, dtype=bool)
    for _ in range(max_attempts):
        draw = (rng.random((p, p)) < edge_prob) & off
        # draw[j, i] -> edge j -> i
        js, is_ = np.nonzero(draw)
        edges = list(zip(js.tolist(), is_.tolist()))
        if n_edges is not None and len(edges) != n_edges:
            continue
        if _topological_order(p, edges) is not None:
            return Dag(p, frozenset(edges))
    raise ResamplingError(f"no acyclic draw in {max_attempts} attempts (p={p}, prob={edge_prob})")


class _LocalScore:
    """Cached Gaussian node scores ``log(residual variance)`` on a covariance."""

    def __init__(self, cov):
        self.cov = cov
        self.cache: dict = {}

    def __call__(self, i: int, parents: frozenset) -> float:
        key = (i, parents)
        val = self.cache.get(key)
        if val is None:
            c = self.cov
            if parents:
                pa = sorted(parents)
                cpp = c[np.ix_(pa, pa)]
                cpi = c[pa, i]
                var = c[i, i] - cpi @ np.linalg.solve(cpp, cpi)
            else:
                var = c[i, i]
            val = float(np.log(max(var, 1e-300)))
            self.cache[key] = val
        return val


def _graph_score(dag: Dag, local: "_LocalScore", pen: float) -> float:
    return sum(local(i, frozenset(dag.parents(i))) for i in range(dag.p)) + pen * dag.n_edges


def _climb(dag: Dag, local: "_LocalScore", pen: float, max_parents: int) -> Dag:
    p = dag.p
    parents = [frozenset(dag.parents(i)) for i in range(p)]
    while True:
        best_delta, best_move = -1e-10, None
        for j in range(p):
            for i in range(p):
                if i == j:
                    continue
                if (j, i) in dag.edges:
                    gain_i = local(i, parents[i] - {j}) - local(i, parents[i])
                    delta = gain_i - pen
                    if delta < best_delta:
                        best_delta, best_move = delta, ("del", j, i)
                    if len(parents[j]) < max_parents:
                        trial = dag.without_edge(j, i)
                        if not trial.has_path(j, i):
                            delta = gain_i + local(j, parents[j] | {i}) - local(j, parents[j])
                            if delta < best_delta:
                                best_delta, best_move = delta, ("rev", j, i)
                elif (i, j) not in dag.edges and len(parents[i]) < max_parents:
                    if not dag.has_path(i, j):
                        delta = local(i, parents[i] | {j}) - local(i, parents[i]) + pen
                        if delta < best_delta:
                            best_delta, best_move = delta, ("add", j, i)
        if best_move is None:
            return dag
        kind, j, i = best_move
        if kind == "add":
            dag = dag.with_edge(j, i)
            parents[i] = parents[i] | {j}
        elif kind == "del":
            dag = dag.without_edge(j, i)
            parents[i] = parents[i] - {j}
        else:
            dag = dag.reversed_edge(j, i)
            parents[i] = parents[i] - {j}
            parents[j] = parents[j] | {i}


def _kick(dag: Dag, rng, n_moves: int) -> Dag:
    """Random reversals and deletions used to leave a local optimum."""
    for _ in range(n_moves):
        edges = sorted(dag.edges)
        if not edges:
            break
        j, i = edges[rng.integers(len(edges))]
        if rng.random() < 0.7:
            try:
                dag = dag.reversed_edge(j, i)
                continue
            except CycleError:
                pass
        dag = dag.without_edge(j, i)
    return dag


def _iterated_climb(cov, n_total, max_parents, restarts, rng_seed, penalty_scale=2.0):
    """Local optima found by iterated local search, keyed by equivalence class."""
    cov = np.asarray(cov, dtype=float)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise MatrixNotPDError("pooled covariance is not positive definite") from exc
    p = cov.shape[0]
    pen = penalty_scale * np.log(n_total) / n_total
    local = _LocalScore(cov)
    best = _climb(Dag.empty(p), local, pen, max_parents)
    best_score = _graph_score(best, local, pen)
    optima = {(best.skeleton(), best.v_structures()): (best_score, best)}
    rng = np.random.default_rng(rng_seed)
    for _ in range(restarts):
        start = _kick(best, rng, int(rng.integers(1, max(2, best.n_edges // 2) + 1)))
        cand = _climb(start, local, pen, max_parents)
        score = _graph_score(cand, local, pen)
        cls = (cand.skeleton(), cand.v_structures())
        if cls not in optima or score < optima[cls][0]:
            optima[cls] = (score, cand)
        if score < best_score - 1e-12:
            best, best_score = cand, score
    return sorted(optima.values(), key=lambda t: (t[0], t[1].key))


def hill_climb(pooled_cov, n_total: int, max_parents: int = 4, restarts: int = 0,
               rng_seed=0) -> Dag:
    """Greedy add/remove/reverse search minimising a penalised Gaussian score.

    Score: ``sum_i log(residual variance of i given parents)
    + 2 * log(n_total) / n_total * #edges``.  With ``restarts > 0`` the best
    optimum is repeatedly perturbed by random reversals/deletions and
    re-climbed (iterated local search, seeded by ``rng_seed``).
    """
    return _iterated_climb(pooled_cov, n_total, max_parents, restarts, rng_seed)[0][1]


def neighbourhood(dag: Dag) -> list[Dag]:
    """Single-edge deletions and acyclic single-edge reversals of ``dag``."""
    out = []
    for j, i in sorted(dag.edges):
        out.append(dag.without_edge(j, i))
    for j, i in sorted(dag.edges):
        try:
            out.append(dag.reversed_edge(j, i))
        except CycleError:
            pass
    return out


def generate_candidates(pooled_cov, n_total: int, max_parents: int = 4, restarts: int = 0,
                        n_optima: int = 1, include_mec: bool = False, neighbours: bool = True,
                        rng_seed=0) -> list[Dag]:
    """Hill-climb local optimum, optionally followed by its deletion/reversal neighbourhood.

    With ``restarts`` the climb is iterated from perturbed optima and the
    ``n_optima`` best distinct equivalence classes are kept;
    ``include_mec`` adds every Markov-equivalent member of each kept optimum.
    """
    optima = _iterated_climb(pooled_cov, n_total, max_parents, restarts, rng_seed)[:max(1, n_optima)]
    out = {}
    for _, opt in optima:
        out.setdefault(opt.key, opt)
        if neighbours:
            for g in neighbourhood(opt):
                out.setdefault(g.key, g)
        if include_mec:
            for g in markov_equivalence_class(opt, limit=200):
                out.setdefault(g.key, g)
    return list(out.values())


def save_dag(d: Dag, path) -> None:
    Path(path).write_text(json.dumps(d.to_dict()) + "\n")


def load_dag(path) -> Dag:
    return Dag.from_dict(json.loads(Path(path).read_text()))


def save_candidates(dags: Iterable[Dag], path) -> None:
    Path(path).write_text(json.dumps([d.to_dict() for d in dags], indent=1) + "\n")


def load_candidates(path) -> list[Dag]:
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, list):
        raise SchemaError("candidate file must hold a JSON array of DAG objects")
    return [Dag.from_dict(o) for o in obj]
