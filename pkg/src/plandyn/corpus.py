"""Data stages for training and evaluation: pair splits, the supervised
path corpus with its transition-count tensor, the four-way RL split, and
sequence validation."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .graphs import Graph, oracle_plan, reachable_pairs

EOS_MARKER = "</s>"

REASON_BAD_EDGE = "bad-edge"
REASON_WRONG_TERMINAL = "wrong-terminal"
REASON_NO_EOS = "no-eos"
REASON_OVERRUN = "overrun"


def eos_id(g: Graph) -> int:
    """The end-of-sequence token id: one past the node ids."""
    return g.num_nodes


@dataclass(frozen=True)
class Sequence:
    """Token sequence in the ``s t s a b c t <eos>`` syntax.

    ``tokens[0]`` is the source, ``tokens[1]`` the target, and the path
    restarts at ``tokens[2] == tokens[0]``.  A sequence is complete iff its
    last token is the EOS id (== the graph's node count).
    """

    tokens: tuple
    source: int
    target: int

    def __post_init__(self):
        if len(self.tokens) < 3:
            raise ValueError("sequence needs at least the s t s prefix")
        if self.tokens[0] != self.source or self.tokens[1] != self.target:
            raise ValueError("prefix tokens disagree with source/target fields")

    def is_complete(self, eos: int) -> bool:
        return self.tokens[-1] == eos


def make_sequence(path: list[int], eos: int) -> Sequence:
    """Wrap a node path [s, ..., t] in sequence syntax with a closing EOS."""
    s, t = path[0], path[-1]
    return Sequence(tokens=(s, t) + tuple(path) + (eos,), source=s, target=t)


@dataclass(frozen=True)
class Verdict:
    valid: bool
    reason: str | None = None


def validate_sequence(g: Graph, seq: Sequence) -> Verdict:
    """Check a sequence against the graph.

    Valid iff the tokens after the prefix form an edge-consecutive path that
    ends at the target with EOS immediately after.  Invalid sequences carry a
    reason code; a malformed prefix raises instead.
    """
    eos = eos_id(g)
    tokens = seq.tokens
    if len(tokens) < 4:
        raise ValueError("sequence must have at least 4 tokens")
    if tokens[2] != tokens[0]:
        raise ValueError("malformed prefix: expected s t s")
    for tok in tokens[:2]:
        if not 0 <= tok < g.num_nodes:
            raise ValueError(f"prefix token {tok} out of node range")

    body = tokens[2:]
    path = []
    saw_eos = False
    for tok in body:
        if tok == eos:
            saw_eos = True
            break
        if not 0 <= tok < g.num_nodes:
            raise ValueError(f"token {tok} outside the vocabulary")
        path.append(tok)

    for a, b in zip(path, path[1:]):
        if g.adjacency[a, b] != 1:
            return Verdict(False, REASON_BAD_EDGE)
    if not saw_eos:
        if path and path[-1] == seq.target:
            return Verdict(False, REASON_NO_EOS)
        return Verdict(False, REASON_OVERRUN)
    if not path or path[-1] != seq.target:
        return Verdict(False, REASON_WRONG_TERMINAL)
    return Verdict(True, None)


# ---------------------------------------------------------------------------
# Pair splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairSplit:
    train_pairs: tuple
    test_pairs: tuple


@dataclass(frozen=True)
class RlSplit:
    train2train: tuple
    train2test: tuple
    test2train: tuple
    test2test: tuple

    @property
    def rl_train(self) -> tuple:
        return tuple(sorted(self.train2train + self.test2train))

    @property
    def rl_test(self) -> tuple:
        return tuple(sorted(self.train2test + self.test2test))


def split_pairs(g: Graph, train_fraction: float, seed: int) -> PairSplit:
    """Uniformly random partition of all reachable pairs."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    pairs = reachable_pairs(g)
    if not pairs:
        raise ValueError("graph has no reachable pairs")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_train = min(len(pairs), max(1, round(train_fraction * len(pairs))))
    train_idx = set(order[:n_train].tolist())
    train = tuple(sorted(pairs[i] for i in train_idx))
    test = tuple(sorted(pairs[i] for i in range(len(pairs)) if i not in train_idx))
    if not test:
        warnings.warn("train split absorbed every reachable pair; test set is empty")
    return PairSplit(train_pairs=train, test_pairs=test)


def make_rl_split(g: Graph, rl_train_fraction: float, base_split: PairSplit, seed: int) -> RlSplit:
    """Partition all reachable pairs into RL-train/RL-test independently of
    the base split, then intersect into the four subsets."""
    pairs = reachable_pairs(g)
    covered = set(base_split.train_pairs) | set(base_split.test_pairs)
    if covered != set(pairs):
        raise ValueError("base split does not cover all reachable pairs")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_rl = min(len(pairs), max(1, round(rl_train_fraction * len(pairs))))
    rl_train = {pairs[i] for i in order[:n_rl].tolist()}
    base_train = set(base_split.train_pairs)

    def pick(in_base: bool, in_rl: bool) -> tuple:
        return tuple(sorted(
            p for p in pairs
            if (p in base_train) == in_base and (p in rl_train) == in_rl
        ))

    return RlSplit(
        train2train=pick(True, True),
        train2test=pick(True, False),
        test2train=pick(False, True),
        test2test=pick(False, False),
    )


# ---------------------------------------------------------------------------
# SFT corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SftDataset:
    """Sampled path sequences plus the (target, current, next) count tensor.

    ``counts[i, j, k]`` tallies every position m >= 3 across the corpus with
    target i, current node j and next token k; the EOS prediction at the
    target is included as k == num_nodes.
    """

    sequences: tuple
    counts: np.ndarray


def sequence_counts(sequences, num_nodes: int) -> np.ndarray:
    counts = np.zeros((num_nodes, num_nodes, num_nodes + 1), dtype=np.int64)
    for seq in sequences:
        i = seq.target
        toks = seq.tokens
        for m in range(2, len(toks) - 1):
            counts[i, toks[m], toks[m + 1]] += 1
    return counts


def sample_sft_dataset(g: Graph, split: PairSplit, K: int, seed: int) -> SftDataset:
    """K oracle-planner paths per training pair, wrapped in sequence syntax."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    eos = eos_id(g)
    sequences = []
    for s, t in split.train_pairs:
        for _ in range(K):
            sequences.append(make_sequence(oracle_plan(g, s, t, rng), eos))
    return SftDataset(sequences=tuple(sequences), counts=sequence_counts(sequences, g.num_nodes))


def sample_uniform_paths(g: Graph, num_paths: int, seed: int, pairs=None) -> SftDataset:
    """A corpus of ``num_paths`` oracle paths over uniformly drawn pairs
    (the Blocksworld recipe: pairs sampled instead of enumerated)."""
    if num_paths < 1:
        raise ValueError("num_paths must be >= 1")
    pool = list(pairs) if pairs is not None else reachable_pairs(g)
    if not pool:
        raise ValueError("graph has no reachable pairs")
    rng = np.random.default_rng(seed)
    eos = eos_id(g)
    sequences = []
    for idx in rng.integers(len(pool), size=num_paths):
        s, t = pool[idx]
        sequences.append(make_sequence(oracle_plan(g, s, t, rng), eos))
    return SftDataset(sequences=tuple(sequences), counts=sequence_counts(sequences, g.num_nodes))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_corpus(path, dataset: SftDataset) -> None:
    """One sequence per line, space-separated ids, EOS rendered as </s>."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in dataset.sequences:
            body = " ".join(str(tok) for tok in seq.tokens[:-1])
            fh.write(f"{body} {EOS_MARKER}\n")


def read_corpus(path, g: Graph) -> tuple:
    eos = eos_id(g)
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[-1] != EOS_MARKER:
                raise ValueError("corpus line does not end with the EOS marker")
            toks = tuple(int(x) for x in parts[:-1]) + (eos,)
            sequences.append(Sequence(tokens=toks, source=toks[0], target=toks[1]))
    return tuple(sequences)


def splits_to_json(named_splits: dict) -> str:
    """JSON lists of [s, t] pairs per split name."""
    payload = {name: [[int(s), int(t)] for s, t in pairs] for name, pairs in named_splits.items()}
    return json.dumps(payload, sort_keys=True)


def splits_from_json(text: str) -> dict:
    data = json.loads(text)
    return {name: tuple((int(s), int(t)) for s, t in pairs) for name, pairs in data.items()}
