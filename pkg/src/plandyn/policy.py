"""Theory-level policy models and decoding.

Two parameterizations share one logit contract: a tabular model holding a
full (target, current) -> vocabulary logit tensor, and a linear model whose
logits decompose as a feed-forward row plus a target-value row.  The
vocabulary is the node ids followed by a single EOS token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Sequence

# Finite stand-in for minus infinity: softmax mass underflows to zero while
# arithmetic stays well-defined.
LOGIT_SENTINEL = -1e9


@dataclass
class DecodeConfig:
    mode: str = "temperature"
    tau: float = 1.0

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature"):
            raise ValueError(f"unknown decode mode: {self.mode}")
        if self.mode == "temperature" and not self.tau > 0:
            raise ValueError("temperature must be positive")


GREEDY = DecodeConfig(mode="greedy")


@dataclass
class TabularPolicy:
    """Logit tensor indexed [target, current, next]."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.ascontiguousarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 3 or self.logits.shape[0] != self.logits.shape[1]:
            raise ValueError("logits must have shape (V, V, vocab)")
        if self.logits.shape[2] != self.logits.shape[0] + 1:
            raise ValueError("vocabulary must be node count + 1 (EOS)")

    @property
    def num_nodes(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[2]

    @property
    def eos(self) -> int:
        return self.vocab_size - 1

    @classmethod
    def zeros(cls, num_nodes: int) -> "TabularPolicy":
        return cls(np.zeros((num_nodes, num_nodes, num_nodes + 1)))

    @classmethod
    def from_linear(cls, linear: "LinearPolicy") -> "TabularPolicy":
        logits = linear.w_v[:, None, :] + linear.w_m[None, :, :]
        return cls(logits)

    def logits_at(self, target: int, current: int) -> np.ndarray:
        self._check(target)
        self._check(current)
        return self.logits[target, current]

    def _check(self, node: int) -> None:
        if not 0 <= node < self.num_nodes:
            raise ValueError(f"node id {node} out of range")

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.logits.copy())


@dataclass
class LinearPolicy:
    """Weight pair whose sum gives the logits:
    ``logit(i, j, k) = w_m[j, k] + w_v[i, k]``."""

    w_m: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        self.w_m = np.ascontiguousarray(self.w_m, dtype=np.float64)
        self.w_v = np.ascontiguousarray(self.w_v, dtype=np.float64)
        if self.w_m.shape != self.w_v.shape or self.w_m.ndim != 2:
            raise ValueError("w_m and w_v must share a 2-d shape")
        if self.w_m.shape[1] != self.w_m.shape[0] + 1:
            raise ValueError("weight columns must be node count + 1 (EOS)")

    @property
    def num_nodes(self) -> int:
        return self.w_m.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.w_m.shape[1]

    @property
    def eos(self) -> int:
        return self.vocab_size - 1

    @classmethod
    def zeros(cls, num_nodes: int) -> "LinearPolicy":
        shape = (num_nodes, num_nodes + 1)
        return cls(np.zeros(shape), np.zeros(shape))

    def logits_at(self, target: int, current: int) -> np.ndarray:
        for node in (target, current):
            if not 0 <= node < self.num_nodes:
                raise ValueError(f"node id {node} out of range")
        return self.w_m[current] + self.w_v[target]

    def copy(self) -> "LinearPolicy":
        return LinearPolicy(self.w_m.copy(), self.w_v.copy())


Policy = TabularPolicy | LinearPolicy


def logits_at(model: Policy, target: int, current: int) -> np.ndarray:
    return model.logits_at(target, current)


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def next_distribution(model: Policy, target: int, current: int, decode: DecodeConfig) -> np.ndarray:
    """Next-token distribution: softmax(logits / tau), or a one-hot at the
    argmax under greedy decoding (ties break toward the lowest token id)."""
    row = model.logits_at(target, current)
    if decode.mode == "greedy":
        probs = np.zeros_like(row)
        probs[int(np.argmax(row))] = 1.0
        return probs
    return softmax(row / decode.tau)


def sample_token(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right").clip(0, len(probs) - 1))


def rollout(
    model: Policy,
    s: int,
    t: int,
    decode: DecodeConfig,
    max_len: int = 64,
    rng: np.random.Generator | None = None,
    stop_at_target: bool = False,
) -> Sequence:
    """Generate tokens after the (s, t, s) prefix until EOS, the target when
    ``stop_at_target`` is set, or ``max_len`` emissions.  Invalid sequences
    are returned as data, never raised."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if decode.mode != "greedy" and rng is None:
        raise ValueError("sampling decode modes need an rng")
    eos = model.eos
    tokens = [s, t, s]
    current = s
    for _ in range(max_len):
        probs = next_distribution(model, t, current, decode)
        if decode.mode == "greedy":
            token = int(np.argmax(probs))
        else:
            token = sample_token(probs, rng)
        tokens.append(token)
        if token == eos:
            break
        if stop_at_target and token == t:
            tokens.append(eos)
            break
        current = token
    return Sequence(tokens=tuple(tokens), source=s, target=t)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Policy, path) -> None:
    """JSON checkpoint with row-major weight arrays; round-trips bit-exact
    at double precision."""
    if isinstance(model, TabularPolicy):
        payload = {
            "kind": "tabular",
            "num_nodes": model.num_nodes,
            "logits": model.logits.ravel().tolist(),
        }
    elif isinstance(model, LinearPolicy):
        payload = {
            "kind": "linear",
            "num_nodes": model.num_nodes,
            "w_m": model.w_m.ravel().tolist(),
            "w_v": model.w_v.ravel().tolist(),
        }
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    n = int(payload["num_nodes"])
    if payload["kind"] == "tabular":
        logits = np.array(payload["logits"], dtype=np.float64).reshape(n, n, n + 1)
        return TabularPolicy(logits)
    if payload["kind"] == "linear":
        shape = (n, n + 1)
        return LinearPolicy(
            np.array(payload["w_m"], dtype=np.float64).reshape(shape),
            np.array(payload["w_v"], dtype=np.float64).reshape(shape),
        )
    raise ValueError(f"unknown checkpoint kind: {payload['kind']}")
