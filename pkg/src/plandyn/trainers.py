"""The three learning procedures on tabular / linear policies.

Supervised training uses the closed-form cross-entropy gradient per
(target, current) context.  Policy-gradient training rolls out on-policy,
weights transitions by the outcome reward, and optionally adds a detached
log-ratio regularizer toward a frozen base model.  Q-learning treats the
logits as state-action values with a squared TD objective, outcome or
process rewards, epsilon exploration and on/off-policy behavior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Sequence, validate_sequence
from .graphs import Graph
from .policy import (
    DecodeConfig,
    LinearPolicy,
    Policy,
    TabularPolicy,
    log_softmax,
    rollout,
    sample_token,
    softmax,
)


def _require_tabular(model: Policy, what: str) -> TabularPolicy:
    if not isinstance(model, TabularPolicy):
        raise TypeError(f"{what} operates on tabular models (per-context closed forms)")
    return model


def _context_counts(batch, vocab_size: int) -> dict:
    """Per-(target, current) next-token count vectors for a sequence batch."""
    counts: dict = {}
    for seq in batch:
        toks = seq.tokens
        i = seq.target
        for m in range(2, len(toks) - 1):
            key = (i, toks[m])
            vec = counts.get(key)
            if vec is None:
                vec = np.zeros(vocab_size)
                counts[key] = vec
            vec[toks[m + 1]] += 1.0
    return counts


# ---------------------------------------------------------------------------
# Supervised fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class SftConfig:
    lr: float = 0.1
    steps: int = 1
    batch: int | None = None  # None = full corpus per step

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def sft_step(model: Policy, batch, cfg: SftConfig) -> float:
    """One gradient step of next-token cross-entropy on a sequence batch.

    The gradient per context is ``-N[k] + softmax(f)[k] * sum(N)``; rows for
    distinct contexts are disjoint parameters, so they update independently.
    Returns the batch loss before the update.
    """
    model = _require_tabular(model, "sft_step")
    counts = _context_counts(batch, model.vocab_size)
    loss = 0.0
    for (i, j), n in counts.items():
        row = model.logits[i, j]
        logq = log_softmax(row)
        loss += -float(n @ logq)
        grad = -n + softmax(row) * n.sum()
        model.logits[i, j] = row - cfg.lr * grad
    return loss


def train_sft(model: Policy, counts: np.ndarray, cfg: SftConfig,
              loss_every: int = 0) -> list[tuple[int, float]]:
    """Full-batch descent of the corpus cross-entropy toward the
    frequency-matching optimum.

    Each observed context is driven by ``softmax(f) - empirical_freq``, i.e.
    contexts are weighted equally rather than by their raw counts.  This
    reaches the same optimum (softmax == empirical frequency) while keeping
    the step size stable for heavily observed contexts.  Returns sampled
    (step, mean-per-token loss) pairs when ``loss_every`` > 0.
    """
    model = _require_tabular(model, "train_sft")
    totals = counts.sum(axis=2)
    ctx = np.argwhere(totals > 0)
    ii, jj = ctx[:, 0], ctx[:, 1]
    n = counts[ii, jj].astype(np.float64)
    freq = n / n.sum(axis=1, keepdims=True)
    history = []
    for step in range(cfg.steps):
        rows = model.logits[ii, jj]
        if loss_every and step % loss_every == 0:
            logq = log_softmax(rows)
            history.append((step, -float((n * logq).sum()) / float(n.sum())))
        model.logits[ii, jj] = rows - cfg.lr * (softmax(rows) - freq)
    return history


@dataclass(frozen=True)
class SftStableReport:
    residual: float
    worst_context: tuple
    tol: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tol


def check_sft_stable_point(model: Policy, counts: np.ndarray, tol: float = 1e-3) -> SftStableReport:
    """Max over observed contexts of |softmax(f) - empirical frequency|."""
    model = _require_tabular(model, "check_sft_stable_point")
    totals = counts.sum(axis=2)
    ctx = np.argwhere(totals > 0)
    ii, jj = ctx[:, 0], ctx[:, 1]
    freq = counts[ii, jj] / totals[ii, jj][:, None]
    gap = np.abs(softmax(model.logits[ii, jj]) - freq)
    flat = int(np.argmax(gap))
    row, col = divmod(flat, gap.shape[1])
    worst = (int(ii[row]), int(jj[row]), int(col))
    return SftStableReport(residual=float(gap.max()), worst_context=worst, tol=tol)


# ---------------------------------------------------------------------------
# Policy gradient
# ---------------------------------------------------------------------------

@dataclass
class PgConfig:
    r: float = 1.0
    p: float = 0.0
    lam: float = 0.0
    lr: float = 0.1
    rollouts_per_step: int = 64
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    max_len: int = 64

    def __post_init__(self):
        if self.rollouts_per_step < 1:
            raise ValueError("rollouts_per_step must be >= 1")
        if self.lam < 0:
            raise ValueError("KL weight must be >= 0")


@dataclass
class RolloutCounts:
    """Transition tallies over a rollout batch: every trajectory versus the
    valid-path subset."""

    all_counts: np.ndarray
    correct_counts: np.ndarray

    @classmethod
    def empty(cls, num_nodes: int) -> "RolloutCounts":
        shape = (num_nodes, num_nodes, num_nodes + 1)
        return cls(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64))


def count_rollouts(rollouts, g: Graph) -> RolloutCounts:
    counts = RolloutCounts.empty(g.num_nodes)
    for seq in rollouts:
        valid = validate_sequence(g, seq).valid
        toks = seq.tokens
        i = seq.target
        for m in range(2, len(toks) - 1):
            counts.all_counts[i, toks[m], toks[m + 1]] += 1
            if valid:
                counts.correct_counts[i, toks[m], toks[m + 1]] += 1
    return counts


def pg_gradient(model: Policy, base_model: Policy | None, counts: RolloutCounts,
                cfg: PgConfig) -> dict:
    """Closed-form batch gradient per visited context.

    Reward part: ``-w[k] + q[k] * sum(w)`` with ``w = r * correct + p * all``.
    Regularizer part (detached log-ratio L = log q - log q_base):
    ``lam * (all[k] * L[k] - q[k] * sum(all * L))``.
    """
    model = _require_tabular(model, "pg_gradient")
    if cfg.lam > 0 and base_model is None:
        raise ValueError("KL regularization needs a frozen base model")
    grads: dict = {}
    for i, j in np.argwhere(counts.all_counts.sum(axis=2) > 0):
        nr = counts.all_counts[i, j].astype(np.float64)
        ncp = counts.correct_counts[i, j].astype(np.float64)
        w = cfg.r * ncp + cfg.p * nr
        row = model.logits[i, j]
        q = softmax(row)
        grad = -w + q * w.sum()
        if cfg.lam > 0:
            ratio = log_softmax(row) - log_softmax(base_model.logits_at(i, j))
            grad = grad + cfg.lam * (nr * ratio - q * float(nr @ ratio))
        grads[(int(i), int(j))] = grad
    return grads


def pg_rollouts(model: Policy, pairs, cfg: PgConfig, rng: np.random.Generator) -> list[Sequence]:
    picks = rng.integers(len(pairs), size=cfg.rollouts_per_step)
    return [
        rollout(model, pairs[idx][0], pairs[idx][1], cfg.decode, cfg.max_len, rng)
        for idx in picks
    ]


def apply_pg_gradient(model: Policy, grads: dict, lr: float) -> None:
    for (i, j), grad in grads.items():
        model.logits[i, j] = model.logits[i, j] - lr * grad


def pg_step(model: Policy, base_model: Policy | None, pairs, cfg: PgConfig,
            g: Graph, rng: np.random.Generator) -> RolloutCounts:
    """Sample on-policy rollouts for a batch of pairs and apply one gradient
    step.  Returns the batch's transition counts."""
    model = _require_tabular(model, "pg_step")
    rollouts = pg_rollouts(model, pairs, cfg, rng)
    counts = count_rollouts(rollouts, g)
    grads = pg_gradient(model, base_model, counts, cfg)
    apply_pg_gradient(model, grads, cfg.lr)
    return counts


def pg_loss(model: Policy, rollouts, cfg: PgConfig, g: Graph,
            base_model: Policy | None = None) -> float:
    """Batch objective: reward-weighted negative log-likelihood plus the
    detached-ratio regularizer.  With r=1, p=0, lam=0 this is exactly the
    cross-entropy of the valid rollouts."""
    if cfg.lam > 0 and base_model is None:
        raise ValueError("KL regularization needs a frozen base model")
    total = 0.0
    for seq in rollouts:
        reward = cfg.r * float(validate_sequence(g, seq).valid) + cfg.p
        toks = seq.tokens
        i = seq.target
        ce = 0.0
        reg = 0.0
        for m in range(2, len(toks) - 1):
            logq = log_softmax(model.logits_at(i, toks[m]))
            picked = float(logq[toks[m + 1]])
            ce -= picked
            if cfg.lam > 0:
                logqb = log_softmax(base_model.logits_at(i, toks[m]))
                reg += picked * (picked - float(logqb[toks[m + 1]]))
        total += reward * ce + cfg.lam * reg
    return total


def ppo_unclipped_step(model: Policy, rollouts, cfg: PgConfig, g: Graph) -> None:
    """Ratio-form update with the denominator detached at rollout time.

    The probability ratio new/old is formed against a snapshot of the same
    model, so the resulting update matches the plain return-weighted
    log-likelihood step on the same batch.
    """
    model = _require_tabular(model, "ppo_unclipped_step")
    if cfg.lam != 0:
        raise ValueError("the ratio-form step covers the return term only (lam must be 0)")
    snapshot: dict = {}
    grads: dict = {}
    for seq in rollouts:
        reward = cfg.r * float(validate_sequence(g, seq).valid) + cfg.p
        toks = seq.tokens
        i = seq.target
        for m in range(2, len(toks) - 1):
            key = (i, toks[m])
            q = snapshot.get(key)
            if q is None:
                q = softmax(model.logits[key])
                snapshot[key] = q
            k = toks[m + 1]
            denom = q[k]  # detached old probability
            unit = np.zeros_like(q)
            unit[k] = 1.0
            contrib = (-reward / denom) * q[k] * (unit - q)
            acc = grads.get(key)
            if acc is None:
                grads[key] = contrib
            else:
                grads[key] = acc + contrib
    for (i, j), grad in grads.items():
        model.logits[i, j] = model.logits[i, j] - cfg.lr * grad


# ---------------------------------------------------------------------------
# Q-learning
# ---------------------------------------------------------------------------

@dataclass
class QConfig:
    reward_mode: str = "process"
    epsilon: float = 0.1
    behavior: str = "on_policy"
    lr: float = 0.05
    max_len: int = 64

    def __post_init__(self):
        if self.reward_mode not in ("outcome", "process"):
            raise ValueError(f"unknown reward mode: {self.reward_mode}")
        if self.behavior not in ("on_policy", "off_policy"):
            raise ValueError(f"unknown behavior mode: {self.behavior}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def q_rollout(behavior_model: Policy, s: int, t: int, cfg: QConfig,
              rng: np.random.Generator) -> Sequence:
    """Episode generation with epsilon exploration over the node actions.

    Each step picks a uniformly random node with probability epsilon and the
    behavior policy's softmax over nodes otherwise; the episode stops on
    emitting the target (EOS appended for sequence completeness) or at
    ``max_len`` emissions."""
    num_nodes = behavior_model.num_nodes
    tokens = [s, t, s]
    current = s
    for _ in range(cfg.max_len):
        if rng.random() < cfg.epsilon:
            k = int(rng.integers(num_nodes))
        else:
            probs = softmax(behavior_model.logits_at(t, current)[:num_nodes])
            k = sample_token(probs, rng)
        tokens.append(k)
        if k == t:
            tokens.append(behavior_model.eos)
            break
        current = k
    return Sequence(tokens=tuple(tokens), source=s, target=t)


def q_step(model: Policy, trajectory: Sequence, cfg: QConfig, g: Graph,
           on_update=None) -> list[tuple[int, int, int]]:
    """Squared-TD update along one trajectory.

    Per transition the regression target is reward plus the detached
    bootstrap ``max_k f(target, next)[k]`` over node actions, with the
    bootstrap pinned to zero when the step lands on the target.  EOS tokens
    are outside the action space and skipped.
    """
    num_nodes = model.num_nodes
    eos = model.eos
    i = trajectory.target
    toks = trajectory.tokens
    outcome_valid = False
    if cfg.reward_mode == "outcome":
        outcome_valid = validate_sequence(g, trajectory).valid
    two_lr = 2.0 * cfg.lr
    tabular = isinstance(model, TabularPolicy)
    updated = []
    for m in range(2, len(toks) - 1):
        j, k = toks[m], toks[m + 1]
        if k == eos:
            continue
        if cfg.reward_mode == "outcome":
            reward = 1.0 if (outcome_valid and k == i) else 0.0
        else:
            reward = (1.0 if k == i else 0.0) - (0.0 if g.adjacency[j, k] else 1.0)
        bootstrap = 0.0 if k == i else float(model.logits_at(i, k)[:num_nodes].max())
        if tabular:
            value = model.logits[i, j, k]
            value -= two_lr * (value - reward - bootstrap)
            model.logits[i, j, k] = value
        else:
            delta = model.w_m[j, k] + model.w_v[i, k] - reward - bootstrap
            model.w_m[j, k] -= two_lr * delta
            model.w_v[i, k] -= two_lr * delta
            value = model.w_m[j, k] + model.w_v[i, k]
        updated.append((i, j, k))
        if on_update is not None:
            on_update(i, j, k, value)
    return updated


def train_q(model: Policy, g: Graph, pairs, cfg: QConfig, episodes: int,
            rng: np.random.Generator, base_model: Policy | None = None,
            on_update=None) -> None:
    """Run Q-learning episodes over uniformly sampled pairs."""
    if cfg.behavior == "off_policy":
        if base_model is None:
            raise ValueError("off-policy behavior needs a frozen base model")
        behavior = base_model
    else:
        behavior = model
    pool = list(pairs)
    if not pool:
        raise ValueError("no pairs to train on")
    for _ in range(episodes):
        s, t = pool[rng.integers(len(pool))]
        trajectory = q_rollout(behavior, s, t, cfg, rng)
        q_step(model, trajectory, cfg, g, on_update)
