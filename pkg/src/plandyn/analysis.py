"""Evaluation metrics and the named stable-point / convergence checks.

All metrics are pure functions of immutable model snapshots.  The checks are
registered under short ids (T1..T8, PPO) and return a ``TheoremReport`` with
a residual, a threshold, and the worst offenders.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import validate_sequence
from .graphs import Graph
from .policy import (
    DecodeConfig,
    LinearPolicy,
    Policy,
    TabularPolicy,
    log_softmax,
    rollout,
    softmax,
)
from .trainers import (
    PgConfig,
    RolloutCounts,
    apply_pg_gradient,
    check_sft_stable_point,
    count_rollouts,
    pg_gradient,
    pg_loss,
    pg_rollouts,
    ppo_unclipped_step,
)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

CSV_COLUMNS = [
    "step", "train_acc", "test_acc", "diversity",
    "kl_uniform_mean", "invalid_mass", "adjacency_auc", "extra_json",
]


@dataclass
class RunRecord:
    step: int
    train_acc: float
    test_acc: float
    diversity: float
    kl_uniform_mean: float
    invalid_mass: float
    adjacency_auc: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("train_acc", "test_acc"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.diversity < 0:
            raise ValueError("diversity must be >= 0")


def write_metrics_csv(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow([
                rec.step, repr(rec.train_acc), repr(rec.test_acc), repr(rec.diversity),
                repr(rec.kl_uniform_mean), repr(rec.invalid_mass), repr(rec.adjacency_auc),
                json.dumps(rec.extra, sort_keys=True),
            ])


def read_metrics_csv(path) -> list[RunRecord]:
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header in {path}")
        for row in reader:
            records.append(RunRecord(
                step=int(row["step"]),
                train_acc=float(row["train_acc"]),
                test_acc=float(row["test_acc"]),
                diversity=float(row["diversity"]),
                kl_uniform_mean=float(row["kl_uniform_mean"]),
                invalid_mass=float(row["invalid_mass"]),
                adjacency_auc=float(row["adjacency_auc"]),
                extra=json.loads(row["extra_json"]),
            ))
    return records


@dataclass
class TheoremReport:
    theorem: str
    residual: float
    threshold: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.residual <= self.threshold


# ---------------------------------------------------------------------------
# Masks and logit tensors
# ---------------------------------------------------------------------------

def feasible_mask(g: Graph) -> np.ndarray:
    """Boolean (target, current, next-node) mask of the feasible sets."""
    a = g.adjacency.astype(bool)
    r = g.reachability.astype(bool)
    eye = np.eye(g.num_nodes, dtype=bool)
    return a[None, :, :] & (r[:, None, :] | eye[:, None, :])


def feasible_action_mask(g: Graph) -> np.ndarray:
    """Feasible mask over the full vocabulary: the feasible next nodes, plus
    EOS exactly when the current node is the target."""
    n = g.num_nodes
    mask = np.zeros((n, n, n + 1), dtype=bool)
    mask[:, :, :n] = feasible_mask(g)
    idx = np.arange(n)
    mask[idx, idx, n] = True
    return mask


def logit_tensor(model: Policy) -> np.ndarray:
    if isinstance(model, TabularPolicy):
        return model.logits
    return model.w_v[:, None, :] + model.w_m[None, :, :]


# ---------------------------------------------------------------------------
# Accuracy and diversity
# ---------------------------------------------------------------------------

def accuracy(model: Policy, g: Graph, pairs, decode: DecodeConfig, trials: int = 1,
             rng: np.random.Generator | None = None, max_len: int = 64,
             stop_at_target: bool = False) -> float:
    """Fraction of (pair, trial) rollouts that validate.  Greedy decoding is
    deterministic, so it forces a single trial."""
    if not pairs:
        raise ValueError("empty pair set")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if decode.mode == "greedy":
        trials = 1
    hits = 0
    for s, t in pairs:
        for _ in range(trials):
            seq = rollout(model, s, t, decode, max_len, rng, stop_at_target=stop_at_target)
            hits += validate_sequence(g, seq).valid
    return hits / (len(pairs) * trials)


def output_diversity(model: Policy, g: Graph, pairs, trials: int = 100,
                     tau: float = 1.0, rng: np.random.Generator | None = None,
                     max_len: int = 64, stop_at_target: bool = False) -> float:
    """Mean number of distinct (token-exact) valid paths produced per pair
    over ``trials`` temperature samples."""
    if not pairs:
        raise ValueError("empty pair set")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    decode = DecodeConfig(mode="temperature", tau=tau)
    total = 0
    for s, t in pairs:
        seen = set()
        for _ in range(trials):
            seq = rollout(model, s, t, decode, max_len, rng, stop_at_target=stop_at_target)
            if validate_sequence(g, seq).valid:
                seen.add(seq.tokens)
        total += len(seen)
    return total / len(pairs)


# ---------------------------------------------------------------------------
# Distribution metrics
# ---------------------------------------------------------------------------

def kl_to_uniform(model: Policy, g: Graph, target: int, current: int) -> float:
    """KL from the uniform distribution on the feasible set to the model's
    next-token distribution renormalized over that set."""
    members = g.feasible_members(target, current)
    if members.size == 0:
        raise ValueError(f"empty feasible set for target {target}, current {current}")
    row = model.logits_at(target, current)[members]
    shifted = row - row.max()
    log_norm = shifted - np.log(np.exp(shifted).sum())
    return float(-np.log(members.size) - log_norm.mean())


def invalid_next_mass(model: Policy, g: Graph, target: int, current: int) -> float:
    """Softmax mass assigned outside the feasible set (EOS included)."""
    members = g.feasible_members(target, current)
    if members.size == 0:
        raise ValueError(f"empty feasible set for target {target}, current {current}")
    probs = softmax(model.logits_at(target, current))
    return float(1.0 - probs[members].sum())


def mean_kl_and_invalid_mass(model: Policy, g: Graph) -> tuple[float, float]:
    """Averages of the two metrics over every context with a nonempty
    feasible set (vectorized over all contexts)."""
    n = g.num_nodes
    mask = feasible_mask(g)
    sizes = mask.sum(axis=2)
    active = sizes > 0
    if not active.any():
        raise ValueError("graph has no feasible contexts")
    logits = logit_tensor(model)
    node_logits = logits[:, :, :n]
    neg = np.where(mask, node_logits, -np.inf)
    peak = neg.max(axis=2, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    log_norm = np.where(mask, node_logits - peak, -np.inf)
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(log_norm).sum(axis=2))
    restricted = node_logits - peak[:, :, 0][:, :, None] - lse[:, :, None]
    with np.errstate(invalid="ignore"):
        kl = -np.log(sizes, where=active, out=np.zeros_like(sizes, dtype=float))
        kl -= np.where(mask, restricted, 0.0).sum(axis=2) / np.where(active, sizes, 1)
    probs = softmax(logits)
    inv = 1.0 - np.where(mask, probs[:, :, :n], 0.0).sum(axis=2)
    return float(kl[active].mean()), float(inv[active].mean())


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    idx = 0
    while idx < len(x):
        jdx = idx
        while jdx + 1 < len(x) and sorted_x[jdx + 1] == sorted_x[idx]:
            jdx += 1
        ranks[order[idx:jdx + 1]] = 0.5 * (idx + jdx) + 1.0
        idx = jdx + 1
    return ranks


def adjacency_recovery(model: Policy, g: Graph) -> float:
    """AUC of the model's edge scores: probability that a random true edge
    outscores a random non-edge (ties count one half).  Self-pairs are
    excluded."""
    n = g.num_nodes
    if isinstance(model, LinearPolicy):
        scores = model.w_m[:, :n]
    else:
        scores = model.logits[:, :, :n].max(axis=0)
    offdiag = ~np.eye(n, dtype=bool)
    labels = g.adjacency[offdiag].astype(bool)
    values = scores[offdiag]
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both edges and non-edges")
    ranks = _average_ranks(values)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Success probabilities (backward DP over the DAG)
# ---------------------------------------------------------------------------

def _topological_order(g: Graph) -> list[int]:
    indeg = g.adjacency.sum(axis=0).astype(int)
    ready = [u for u in range(g.num_nodes) if indeg[u] == 0]
    order = []
    while ready:
        u = ready.pop()
        order.append(u)
        for v in g.out_neighbors(u):
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(int(v))
    if len(order) != g.num_nodes:
        raise ValueError("graph is not acyclic")
    return order


def success_probabilities(model: Policy, g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Exact valid-completion probabilities under the model's softmax policy.

    Returns ``(s, p)``: ``s[i, j]`` is the probability that generation from
    current node j with target i completes a valid path (the EOS emission at
    the target included); ``p[i, j, k]`` is the probability that choosing
    token k at context (i, j) belongs to a valid completion.  Requires a DAG.
    """
    n = g.num_nodes
    mask = feasible_mask(g)
    probs = softmax(logit_tensor(model))
    order = _topological_order(g)
    s = np.zeros((n, n))
    for i in range(n):
        s[i, i] = probs[i, i, n]  # EOS factor at the target
        for j in reversed(order):
            if j == i:
                continue
            members = np.flatnonzero(mask[i, j])
            if members.size:
                s[i, j] = float(probs[i, j, members] @ s[i, members])
    p = np.zeros((n, n, n + 1))
    p[:, :, :n] = np.where(mask, s[:, None, :], 0.0)
    idx = np.arange(n)
    p[idx, idx, n] = 1.0
    return s, p


def occurring_targets(g: Graph) -> list[int]:
    """Nodes that appear as the target of at least one reachable pair; only
    their contexts ever occur during training, so only their coordinates are
    covered by the persistent-exploration premise."""
    return [int(t) for t in np.flatnonzero(g.reachability.any(axis=1))]


def q_fixed_point_table(g: Graph) -> np.ndarray:
    """Limit table for process-reward value learning: the target-hit column
    carries the adjacency bit, other entries follow the
    adjacency/reachability case split (1 / 0 / -1)."""
    n = g.num_nodes
    a = g.adjacency.astype(np.float64)
    r = g.reachability.astype(np.float64)
    table = np.empty((n, n, n))
    both = a[None, :, :] * r[:, None, :]
    either = np.clip(a[None, :, :] + r[:, None, :], 0, 1)
    table[:] = both + either - 1.0  # 1 / 0 / -1
    idx = np.arange(n)
    for i in range(n):
        table[i, :, i] = a[:, i]
    return table


# ---------------------------------------------------------------------------
# Heatmap snapshots
# ---------------------------------------------------------------------------

def snapshot_logits(model: Policy, g: Graph, current: int, targets) -> dict:
    """Per-target rows of next-node logits, min-max normalized to [0, 1]
    (rows with zero range map to 0.5), with the feasible cells flagged."""
    n = g.num_nodes
    targets = [int(t) for t in targets]
    matrix = np.empty((len(targets), n))
    mask = np.zeros((len(targets), n), dtype=bool)
    for row, t in enumerate(targets):
        vals = model.logits_at(t, current)[:n].astype(np.float64)
        lo, hi = float(vals.min()), float(vals.max())
        if hi - lo == 0.0:
            matrix[row] = 0.5
        else:
            matrix[row] = (vals - lo) / (hi - lo)
        mask[row, g.feasible_members(t, current)] = True
    return {
        "current": int(current),
        "targets": targets,
        "columns": list(range(n)),
        "matrix": matrix.tolist(),
        "feasible": mask.tolist(),
    }


# ---------------------------------------------------------------------------
# Named checks
# ---------------------------------------------------------------------------

def _need(bundle: dict, *keys):
    missing = [k for k in keys if k not in bundle]
    if missing:
        raise KeyError(f"bundle is missing required elements: {', '.join(missing)}")
    return [bundle[k] for k in keys]


def _check_t1(bundle: dict) -> TheoremReport:
    """Supervised stable point: softmax matches the corpus frequencies."""
    model, counts = _need(bundle, "model", "counts")
    tol = bundle.get("tol", 1e-3)
    report = check_sft_stable_point(model, counts, tol)
    return TheoremReport("T1", report.residual, tol, {"worst_context": report.worst_context})


def _sft_loss_on_valid(model: Policy, rollouts, g: Graph) -> float:
    """Direct cross-entropy of the valid rollouts (oracle for the reward-
    filtered loss identity; deliberately avoids the pg_loss code path)."""
    total = 0.0
    for seq in rollouts:
        if not validate_sequence(g, seq).valid:
            continue
        toks = seq.tokens
        ce = 0.0
        for m in range(2, len(toks) - 1):
            row = model.logits_at(seq.target, toks[m])
            probs = np.exp(row - row.max())
            probs /= probs.sum()
            ce -= float(np.log(probs[toks[m + 1]]))
        total += ce
    return total


def _check_t2(bundle: dict) -> TheoremReport:
    """Reward-filtered equivalence: the r=1, p=0, lam=0 objective equals the
    cross-entropy of the valid subset."""
    model, g, batches = _need(bundle, "model", "graph", "rollout_batches")
    tol = bundle.get("tol", 1e-12)
    cfg = PgConfig(r=1.0, p=0.0, lam=0.0)
    worst = 0.0
    for batch in batches:
        gap = abs(pg_loss(model, batch, cfg, g) - _sft_loss_on_valid(model, batch, g))
        worst = max(worst, gap)
    return TheoremReport("T2", worst, tol, {"batches": len(batches)})


def _check_t3(bundle: dict) -> TheoremReport:
    """Gradient structure: infeasible tokens get nonnegative gradient (strict
    when the context carries valid-path counts) and per-context gradients
    sum to zero."""
    model, g, counts = _need(bundle, "model", "graph", "counts")
    tol = bundle.get("tol", 1e-9)
    cfg = PgConfig(r=1.0, p=0.0, lam=0.0)
    grads = pg_gradient(model, None, counts, cfg)
    allowed = feasible_action_mask(g)
    worst_sum = 0.0
    worst_violation = 0.0
    strict_failures = []
    for (i, j), grad in grads.items():
        worst_sum = max(worst_sum, abs(float(grad.sum())))
        bad = ~allowed[i, j]
        if bad.any():
            worst_violation = max(worst_violation, max(0.0, float(-grad[bad].min())))
            if counts.correct_counts[i, j].sum() > 0 and not (grad[bad] > 0).all():
                strict_failures.append((i, j))
    residual = max(worst_sum, worst_violation, tol * 2 if strict_failures else 0.0)
    return TheoremReport("T3", residual, tol, {
        "contexts": len(grads),
        "worst_sum": worst_sum,
        "worst_negative_violation": worst_violation,
        "strict_positivity_failures": strict_failures,
    })


def _check_t4(bundle: dict) -> TheoremReport:
    """Diversity decline in expectation: simulated return-weighted updates do
    not reduce the KL to the uniform feasible distribution (sample mean of
    the post-update KL >= pre-update KL minus three standard errors)."""
    model, g = _need(bundle, "model", "graph")
    rng = bundle.get("rng") or np.random.default_rng(0)
    n_sims = bundle.get("n_sims", 10_000)
    visits = bundle.get("visits", 8)
    lr = bundle.get("lr", 0.1)
    max_contexts = bundle.get("max_contexts", 20)
    mask = feasible_mask(g)
    sizes = mask.sum(axis=2)
    contexts = bundle.get("contexts")
    if contexts is None:
        contexts = [tuple(c) for c in np.argwhere(sizes >= 2)]
        if len(contexts) > max_contexts:
            picks = rng.choice(len(contexts), size=max_contexts, replace=False)
            contexts = [contexts[i] for i in picks]
    if not contexts:
        raise ValueError("no contexts with a feasible set of size >= 2")
    worst = -np.inf
    details = {}
    for (i, j) in contexts:
        members = np.flatnonzero(mask[i, j])
        row = model.logits_at(i, j)[members]
        qc = softmax(row)
        qc = qc / qc.sum()  # exact normalization for the multinomial sampler
        kl_pre = float(-np.log(members.size) - (np.log(qc)).mean())
        draws = rng.multinomial(visits, qc, size=n_sims)
        rows_next = row[None, :] + lr * (draws - visits * qc[None, :])
        shifted = rows_next - rows_next.max(axis=1, keepdims=True)
        log_norm = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        kl_post = -np.log(members.size) - log_norm.mean(axis=1)
        mean_post = float(kl_post.mean())
        se = float(kl_post.std(ddof=1) / np.sqrt(n_sims))
        margin = kl_pre - mean_post - 3.0 * se
        if margin > worst:
            worst = margin
            details = {
                "context": (int(i), int(j)), "kl_pre": kl_pre,
                "kl_post_mean": mean_post, "stderr": se,
            }
    details["contexts_checked"] = len(contexts)
    return TheoremReport("T4", worst, bundle.get("tol", 0.0), details)


def _check_t5(bundle: dict) -> TheoremReport:
    """Regularized stationarity balance: at visited contexts all supported
    tokens share the same value of success-probability plus lam times the
    log-ratio to the base model."""
    model, base, g, lam = _need(bundle, "model", "base_model", "graph", "lam")
    if lam <= 0:
        raise ValueError("the balance check applies to lam > 0 runs")
    support_eps = bundle.get("support_eps", 1e-2)
    min_visits = bundle.get("min_visits", 20)
    counts = bundle.get("counts")
    if counts is not None:
        visits = counts.all_counts.sum(axis=2)
        contexts = [tuple(c) for c in np.argwhere(visits >= min_visits)]
    else:
        contexts = [tuple(c) for c in _need(bundle, "contexts")[0]]
    if not contexts:
        raise ValueError("no visited contexts to check")
    _, p = success_probabilities(model, g)
    worst = 0.0
    details = {}
    for (i, j) in contexts:
        logq = log_softmax(model.logits_at(i, j))
        logqb = log_softmax(base.logits_at(i, j))
        q = np.exp(logq)
        supported = q >= support_eps
        if supported.sum() < 2:
            continue
        values = p[i, j, supported] + lam * (logq[supported] - logqb[supported])
        spread = float(values.max() - values.min())
        if spread > worst:
            worst = spread
            details = {"context": (int(i), int(j)), "supported": int(supported.sum())}
    details["contexts_checked"] = len(contexts)
    return TheoremReport("T5", worst, bundle.get("tol", 0.1), details)


def _check_t6(bundle: dict) -> TheoremReport:
    """Outcome-reward collapse: for each target the off-target logits flatten
    to one shared value (spread below threshold)."""
    model, g = _need(bundle, "model", "graph")
    tol = bundle.get("tol", 0.05)
    n = g.num_nodes
    targets = bundle.get("targets")
    if targets is None:
        targets = occurring_targets(g)
    logits = logit_tensor(model)
    worst = 0.0
    worst_target = -1
    for i in targets:
        keep_j = [j for j in range(n) if j != i]
        keep_k = [k for k in range(n) if k != i]
        block = logits[i][np.ix_(keep_j, keep_k)]
        spread = float(block.max() - block.min())
        if spread > worst:
            worst = spread
            worst_target = i
    return TheoremReport("T6", worst, tol, {"worst_target": worst_target})


def _check_t7(bundle: dict) -> TheoremReport:
    """Process-reward fixed point: every visited coordinate sits at its
    adjacency/reachability case value."""
    model, g = _need(bundle, "model", "graph")
    tol = bundle.get("tol", 0.02)
    n = g.num_nodes
    targets = bundle.get("targets")
    if targets is None:
        targets = occurring_targets(g)
    table = q_fixed_point_table(g)
    gaps = np.abs(logit_tensor(model)[:, :, :n] - table)
    # contexts with current == target never occur (episodes stop at the target)
    idx = np.arange(n)
    gaps[idx, idx, :] = 0.0
    keep = np.zeros((n, 1, 1), dtype=bool)
    keep[targets] = True
    gaps = np.where(keep, gaps, 0.0)
    flat = int(np.argmax(gaps))
    worst = np.unravel_index(flat, gaps.shape)
    return TheoremReport("T7", float(gaps.max()), tol,
                         {"worst_coordinate": tuple(int(x) for x in worst)})


def _check_t8(bundle: dict) -> TheoremReport:
    """Linear-model stable point: summed weights match adjacency +
    reachability - 1 off the target column, and the feed-forward columns
    equal adjacency - 1 up to a per-column constant."""
    model, g = _need(bundle, "model", "graph")
    if not isinstance(model, LinearPolicy):
        raise TypeError("T8 applies to linear models")
    tol = bundle.get("tol", 0.05)
    n = g.num_nodes
    targets = bundle.get("targets")
    if targets is None:
        targets = occurring_targets(g)
    sums = model.w_v[:, None, :n] + model.w_m[None, :, :n]
    wanted = g.adjacency[None, :, :].astype(float) + g.reachability[:, None, :].astype(float) - 1.0
    gaps = np.abs(sums - wanted)
    keep = np.zeros((n, 1, n), dtype=bool)
    keep[targets] = ~np.eye(n, dtype=bool)[targets][:, None, :]  # occurring targets, k != i
    res_sum = float(np.where(keep, gaps, 0.0).max())
    gauge_cols = model.w_m[:, :n] - (g.adjacency.astype(float) - 1.0)
    res_gauge = float((gauge_cols.max(axis=0) - gauge_cols.min(axis=0)).max())
    # terminal column: summed weight at k == target should equal the adjacency bit
    terminal = float(max(
        np.abs(sums[i, :, i] - g.adjacency[:, i]).max() for i in targets
    ))
    return TheoremReport("T8", max(res_sum, res_gauge), tol, {
        "sum_residual": res_sum,
        "gauge_residual": res_gauge,
        "terminal_residual": terminal,
    })


def _check_ppo(bundle: dict) -> TheoremReport:
    """Ratio-form equivalence: the detached-denominator update matches the
    return-weighted log-likelihood update on identical batches."""
    model, g, pairs = _need(bundle, "model", "graph", "pairs")
    rng = bundle.get("rng") or np.random.default_rng(0)
    batches = bundle.get("batches", 100)
    cfg = bundle.get("cfg") or PgConfig(rollouts_per_step=16)
    tol = bundle.get("tol", 1e-9)
    worst = 0.0
    for _ in range(batches):
        rollouts = pg_rollouts(model, pairs, cfg, rng)
        pg_model = model.copy()
        grads = pg_gradient(pg_model, None, count_rollouts(rollouts, g), cfg)
        apply_pg_gradient(pg_model, grads, cfg.lr)
        ppo_model = model.copy()
        ppo_unclipped_step(ppo_model, rollouts, cfg, g)
        worst = max(worst, float(np.abs(pg_model.logits - ppo_model.logits).max()))
    return TheoremReport("PPO", worst, tol, {"batches": batches})


THEOREM_CHECKS = {
    "T1": _check_t1,
    "T2": _check_t2,
    "T3": _check_t3,
    "T4": _check_t4,
    "T5": _check_t5,
    "T6": _check_t6,
    "T7": _check_t7,
    "T8": _check_t8,
    "PPO": _check_ppo,
}


def verify_theorem(theorem: str, bundle: dict) -> TheoremReport:
    """Run one named check against the supplied context bundle."""
    try:
        check = THEOREM_CHECKS[theorem]
    except KeyError:
        raise ValueError(f"unknown theorem id: {theorem}") from None
    return check(bundle)
