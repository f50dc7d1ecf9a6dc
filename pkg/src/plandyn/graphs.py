"""Planning worlds: random DAGs, the Blocksworld move graph, reachability
closures, feasible-next sets, and the feasible-set random-walk planner."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Graph:
    """Directed graph with a precomputed reachability closure.

    ``adjacency[u, v] == 1`` iff the edge (u, v) exists.  ``reachability`` is
    target-indexed: ``reachability[t, s] == 1`` iff there is a directed path
    of length >= 1 from s to t.  On a DAG the diagonal is therefore zero;
    undirected graphs (Blocksworld) pick up ones on the diagonal through
    their 2-cycles.
    """

    num_nodes: int
    adjacency: np.ndarray
    reachability: np.ndarray
    _out: tuple = field(default=(), repr=False, compare=False)
    _feasible_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        adjacency = np.ascontiguousarray(self.adjacency, dtype=np.int8)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise ValueError("adjacency must be a square matrix")
        if adjacency.shape[0] != self.num_nodes:
            raise ValueError("adjacency shape disagrees with num_nodes")
        reachability = np.ascontiguousarray(self.reachability, dtype=np.int8)
        if reachability.shape != adjacency.shape:
            raise ValueError("reachability shape disagrees with adjacency")
        for m in (adjacency, reachability):
            if not np.isin(m, (0, 1)).all():
                raise ValueError("matrix entries must be 0 or 1")
        adjacency.setflags(write=False)
        reachability.setflags(write=False)
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "reachability", reachability)
        out = tuple(np.flatnonzero(adjacency[u]) for u in range(self.num_nodes))
        object.__setattr__(self, "_out", out)

    def out_neighbors(self, u: int) -> np.ndarray:
        return self._out[u]

    def check_node(self, u: int) -> None:
        if not 0 <= u < self.num_nodes:
            raise ValueError(f"node id {u} out of range [0, {self.num_nodes})")

    def feasible_members(self, target: int, current: int) -> np.ndarray:
        """Nodes adjacent to ``current`` that can reach ``target`` (the target
        itself counts when adjacent).  Cached per (target, current)."""
        key = (target, current)
        cached = self._feasible_cache.get(key)
        if cached is not None:
            return cached
        self.check_node(target)
        self.check_node(current)
        nbrs = self._out[current]
        members = nbrs[(self.reachability[target, nbrs] == 1) | (nbrs == target)]
        members.setflags(write=False)
        self._feasible_cache[key] = members
        return members

    def is_dag(self) -> bool:
        return not self.reachability.diagonal().any()


@dataclass(frozen=True)
class FeasibleSet:
    """The candidate next nodes for one (target, current) context."""

    target: int
    current: int
    members: tuple

    def __contains__(self, node: int) -> bool:
        return node in self.members


def reachability_closure(adjacency: np.ndarray) -> np.ndarray:
    """Target-indexed transitive closure: ``R[t, s] == 1`` iff a directed
    path of length >= 1 leads from s to t."""
    a = np.asarray(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("adjacency must be a square matrix")
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    reach = a.astype(bool)
    step = a.astype(bool)
    # Fixpoint of reach | reach@step; doubling the step matrix converges in
    # O(log diameter) rounds.
    while True:
        grown = reach | (reach.astype(np.int32) @ step.astype(np.int32) > 0)
        if (grown == reach).all():
            break
        reach = grown
        step = (step.astype(np.int32) @ step.astype(np.int32) > 0) | step
    return np.ascontiguousarray(reach.T.astype(np.int8))


def _make_graph(adjacency: np.ndarray) -> Graph:
    adjacency = np.asarray(adjacency, dtype=np.int8)
    return Graph(
        num_nodes=adjacency.shape[0],
        adjacency=adjacency,
        reachability=reachability_closure(adjacency),
    )


def gen_erdos_renyi_dag(n: int, p: float, seed: int) -> Graph:
    """Random DAG: every ordered pair (u, v) with u < v gets an edge with
    probability ``p``, so node index order is a topological order."""
    if n < 2:
        raise ValueError("need at least 2 nodes")
    if not 0.0 <= p <= 1.0:
        raise ValueError("edge probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random((n, n))
    adjacency = np.where(np.triu(draws < p, k=1), 1, 0).astype(np.int8)
    return _make_graph(adjacency)


def feasible_next(g: Graph, target: int, current: int) -> FeasibleSet:
    members = g.feasible_members(target, current)
    return FeasibleSet(target=target, current=current, members=tuple(int(k) for k in members))


def oracle_plan(g: Graph, s: int, t: int, rng: np.random.Generator) -> list[int]:
    """Sample a valid path s..t by walking uniformly over the feasible set at
    every step.  Requires t reachable from s."""
    g.check_node(s)
    g.check_node(t)
    if s == t:
        raise ValueError("source and target must differ")
    if g.reachability[t, s] != 1:
        raise ValueError(f"target {t} is not reachable from source {s}")
    path = [s]
    current = s
    while current != t:
        members = g.feasible_members(t, current)
        if members.size == 0:  # cannot happen when reachability holds
            raise RuntimeError(f"empty feasible set at node {current} for target {t}")
        current = int(members[rng.integers(members.size)])
        path.append(current)
    return path


# ---------------------------------------------------------------------------
# Blocksworld
# ---------------------------------------------------------------------------

def blocksworld_states(num_blocks: int) -> list[tuple]:
    """All configurations of ``num_blocks`` distinct blocks arranged into
    stacks, canonically ordered.  A state is a sorted tuple of stacks; each
    stack is a tuple listed bottom to top."""
    if not 2 <= num_blocks <= 6:
        raise ValueError(f"unsupported block count: {num_blocks}")
    states: set[tuple] = set()
    for groups in _set_partitions(list(range(num_blocks))):
        for stacks in itertools.product(*(itertools.permutations(group) for group in groups)):
            states.add(tuple(sorted(stacks)))
    return sorted(states)


def _set_partitions(items: list):
    if not items:
        yield []
        return
    head, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[head]] + part
        for idx in range(len(part)):
            yield part[:idx] + [[head] + part[idx]] + part[idx + 1:]


def _blocksworld_moves(state: tuple) -> list[tuple]:
    """Successor states reachable by moving one clear (top) block."""
    successors = []
    for idx, stack in enumerate(state):
        block = stack[-1]
        others = state[:idx] + state[idx + 1:]
        trimmed = stack[:-1]
        base = others + ((trimmed,) if trimmed else ())
        if trimmed:  # move the block onto the table
            successors.append(tuple(sorted(base + ((block,),))))
        for jdx, dest in enumerate(base):  # or onto another stack's top
            successors.append(tuple(sorted(base[:jdx] + (dest + (block,),) + base[jdx + 1:])))
    return successors


def blocksworld_graph(num_blocks: int = 4) -> Graph:
    """Undirected move graph between block configurations; 73 nodes for four
    blocks.  Node ids follow the canonical state order of
    :func:`blocksworld_states`."""
    states = blocksworld_states(num_blocks)
    index = {state: i for i, state in enumerate(states)}
    n = len(states)
    adjacency = np.zeros((n, n), dtype=np.int8)
    for state, u in index.items():
        for succ in _blocksworld_moves(state):
            v = index[succ]
            adjacency[u, v] = 1
            adjacency[v, u] = 1
    return _make_graph(adjacency)


# ---------------------------------------------------------------------------
# Serialization and pair enumeration
# ---------------------------------------------------------------------------

def graph_to_json(g: Graph) -> str:
    """Serialize as ``{"n": ..., "edges": [[u, v], ...]}``.  Reachability is
    recomputed on load, never stored."""
    edges = [[int(u), int(v)] for u, v in np.argwhere(g.adjacency == 1)]
    return json.dumps({"n": g.num_nodes, "edges": edges}, sort_keys=True)


def graph_from_json(text: str) -> Graph:
    data = json.loads(text)
    n = int(data["n"])
    adjacency = np.zeros((n, n), dtype=np.int8)
    for u, v in data["edges"]:
        adjacency[int(u), int(v)] = 1
    return _make_graph(adjacency)


def reachable_pairs(g: Graph) -> list[tuple[int, int]]:
    """All ordered (source, target) pairs with target reachable from source,
    excluding trivial source == target pairs, in deterministic order."""
    pairs = [
        (int(s), int(t))
        for t, s in np.argwhere(g.reachability == 1)
        if s != t
    ]
    return sorted(pairs)
