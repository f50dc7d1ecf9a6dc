"""Experiment orchestration: config files, seeded stage pipelines, run
directories with manifests and metrics, and export bundles."""

from __future__ import annotations

import datetime
import json
import os
import shutil
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    RunRecord,
    accuracy,
    adjacency_recovery,
    mean_kl_and_invalid_mass,
    output_diversity,
    snapshot_logits,
    write_metrics_csv,
)
from .corpus import (
    PairSplit,
    RlSplit,
    SftDataset,
    make_rl_split,
    read_corpus,
    sample_sft_dataset,
    sample_uniform_paths,
    sequence_counts,
    split_pairs,
    splits_from_json,
    splits_to_json,
    write_corpus,
)
from .graphs import Graph, blocksworld_graph, gen_erdos_renyi_dag, graph_from_json, graph_to_json
from .policy import DecodeConfig, GREEDY, LinearPolicy, TabularPolicy, load_checkpoint, save_checkpoint
from .trainers import PgConfig, QConfig, SftConfig, pg_step, q_rollout, q_step, train_sft

OUT_ENV_VAR = "PLANDYN_OUT"
CODE_VERSION = f"plandyn-{__version__}"


class ConfigError(ValueError):
    """Raised for malformed experiment configs, naming the offending key."""


def component_seed(master: int, label: str) -> np.random.SeedSequence:
    """Fan a single master seed out to per-component streams via a fixed
    label hash, so stages can be re-run in isolation."""
    return np.random.SeedSequence([int(master), zlib.crc32(label.encode("utf-8"))])


def component_rng(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(component_seed(master, label))


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

_STAGES = ("sft", "pg", "q")


@dataclass
class ExperimentConfig:
    raw: dict
    graph: dict
    stage: str
    seed: int
    world_seed: int
    out: str
    split: dict
    rl_split: dict | None
    sft: dict
    pg: dict
    q: dict
    base_checkpoint: str | None
    eval: dict


def _expect(mapping: dict, key: str, kind, where: str):
    if key not in mapping:
        raise ConfigError(f"missing config key: {where}{key}")
    value = mapping[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"config key '{where}{key}' must be a number")
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"config key '{where}{key}' must be {kind.__name__}")
    return value


def parse_experiment_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    stage = _expect(data, "stage", str, "")
    if stage not in _STAGES:
        raise ConfigError(f"config key 'stage' must be one of {_STAGES}")
    seed = _expect(data, "seed", int, "")
    # the world seed pins graph/split/corpus so stages of one recipe share
    # them while varying their training randomness
    world_seed = _expect(data, "world_seed", int, "") if "world_seed" in data else seed
    out = _expect(data, "out", str, "")

    graph = _expect(data, "graph", dict, "")
    kind = _expect(graph, "kind", str, "graph.")
    if kind == "er_dag":
        _expect(graph, "n", int, "graph.")
        p = _expect(graph, "p", float, "graph.")
        if not 0.0 <= p <= 1.0:
            raise ConfigError("config key 'graph.p' must lie in [0, 1]")
    elif kind == "blocksworld":
        _expect(graph, "blocks", int, "graph.")
    else:
        raise ConfigError("config key 'graph.kind' must be 'er_dag' or 'blocksworld'")

    split = data.get("split", {"train_fraction": 0.2})
    frac = _expect(split, "train_fraction", float, "split.")
    if not 0.0 < frac <= 1.0:
        raise ConfigError("config key 'split.train_fraction' must lie in (0, 1]")

    rl_split = data.get("rl_split")
    if rl_split is not None:
        _expect(rl_split, "train_fraction", float, "rl_split.")

    sft = dict(data.get("sft", {}))
    sft.setdefault("K", 10)
    sft.setdefault("steps", 20_000)
    sft.setdefault("lr", 0.1)

    pg = dict(data.get("pg", {}))
    q = dict(data.get("q", {}))
    if stage == "pg":
        pg.setdefault("steps", 2000)
    if stage == "q":
        q.setdefault("episodes", 20_000)

    base = data.get("base_checkpoint")
    if stage in ("pg", "q") and not base:
        raise ConfigError(f"missing config key: base_checkpoint (required for stage '{stage}')")

    ev = dict(data.get("eval", {}))
    ev.setdefault("every", 200)
    ev.setdefault("trials", 20)
    ev.setdefault("diversity_trials", 100)
    ev.setdefault("tau", 1.0)
    ev.setdefault("max_len", 64)
    ev.setdefault("checkpoints", False)
    ev.setdefault("snapshots", False)
    ev.setdefault("snapshot_current", 0)

    return ExperimentConfig(
        raw=data, graph=graph, stage=stage, seed=seed, world_seed=world_seed,
        out=out, split=split, rl_split=rl_split, sft=sft, pg=pg, q=q,
        base_checkpoint=base, eval=ev,
    )


def load_experiment_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_experiment_config(data)


def resolve_out_dir(out: str, out_root: str | None = None) -> Path:
    root = out_root or os.environ.get(OUT_ENV_VAR)
    path = Path(out)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


# ---------------------------------------------------------------------------
# Stage helpers
# ---------------------------------------------------------------------------

def build_graph(cfg: ExperimentConfig) -> Graph:
    if cfg.graph["kind"] == "er_dag":
        seed = cfg.graph.get("seed")
        if seed is None:
            seed = int(component_seed(cfg.world_seed, "graph").generate_state(1)[0])
        return gen_erdos_renyi_dag(cfg.graph["n"], cfg.graph["p"], int(seed))
    return blocksworld_graph(cfg.graph["blocks"])


def build_splits(cfg: ExperimentConfig, g: Graph) -> tuple[PairSplit, RlSplit | None]:
    seed = int(component_seed(cfg.world_seed, "split").generate_state(1)[0])
    split = split_pairs(g, cfg.split["train_fraction"], seed)
    rl = None
    if cfg.rl_split is not None:
        rl_seed = int(component_seed(cfg.world_seed, "rl_split").generate_state(1)[0])
        rl = make_rl_split(g, cfg.rl_split["train_fraction"], split, rl_seed)
    return split, rl


def build_sft_dataset(cfg: ExperimentConfig, g: Graph, split: PairSplit) -> SftDataset:
    seed = int(component_seed(cfg.world_seed, "corpus").generate_state(1)[0])
    if "num_paths" in cfg.sft:
        return sample_uniform_paths(g, cfg.sft["num_paths"], seed, pairs=split.train_pairs)
    return sample_sft_dataset(g, split, cfg.sft["K"], seed)


def pg_config_from(cfg_dict: dict) -> PgConfig:
    decode = cfg_dict.get("decode", {})
    return PgConfig(
        r=float(cfg_dict.get("r", 1.0)),
        p=float(cfg_dict.get("p", 0.0)),
        lam=float(cfg_dict.get("lambda", 0.0)),
        lr=float(cfg_dict.get("lr", 0.1)),
        rollouts_per_step=int(cfg_dict.get("rollouts_per_step", 64)),
        decode=DecodeConfig(mode=decode.get("mode", "temperature"), tau=float(decode.get("tau", 1.0))),
        max_len=int(cfg_dict.get("max_len", 64)),
    )


def q_config_from(cfg_dict: dict) -> QConfig:
    return QConfig(
        reward_mode=cfg_dict.get("reward_mode", "process"),
        epsilon=float(cfg_dict.get("epsilon", 0.1)),
        behavior=cfg_dict.get("behavior", "on_policy"),
        lr=float(cfg_dict.get("lr", 0.05)),
        max_len=int(cfg_dict.get("max_len", 64)),
    )


def evaluate_model(model, g: Graph, split: PairSplit, rl: RlSplit | None,
                   eval_cfg: dict, stage: str, step: int,
                   rng: np.random.Generator) -> RunRecord:
    stop = stage == "q"
    max_len = eval_cfg["max_len"]
    tau = eval_cfg["tau"]
    trials = eval_cfg["trials"]
    temp = DecodeConfig(mode="temperature", tau=tau)
    extra: dict = {}

    train_acc = accuracy(model, g, split.train_pairs, temp, trials, rng,
                         max_len=max_len, stop_at_target=stop)
    if split.test_pairs:
        test_acc = accuracy(model, g, split.test_pairs, GREEDY,
                            max_len=max_len, stop_at_target=stop)
    else:
        test_acc = 0.0
        extra["test_empty"] = True
    if eval_cfg["diversity_trials"]:
        diversity = output_diversity(model, g, split.train_pairs,
                                     trials=eval_cfg["diversity_trials"], tau=tau,
                                     rng=rng, max_len=max_len, stop_at_target=stop)
    else:
        diversity = 0.0
    kl_mean, invalid = mean_kl_and_invalid_mass(model, g)
    auc = adjacency_recovery(model, g)
    if rl is not None:
        for name in ("train2train", "train2test", "test2train", "test2test"):
            pairs = getattr(rl, name)
            if pairs:
                extra[f"acc_{name}"] = accuracy(model, g, pairs, GREEDY,
                                                max_len=max_len, stop_at_target=stop)
    return RunRecord(step=step, train_acc=train_acc, test_acc=test_acc,
                     diversity=diversity, kl_uniform_mean=kl_mean,
                     invalid_mass=invalid, adjacency_auc=auc, extra=extra)


# ---------------------------------------------------------------------------
# The run pipeline
# ---------------------------------------------------------------------------

def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def run_experiment(cfg: ExperimentConfig, out_root: str | None = None) -> Path:
    run_dir = resolve_out_dir(cfg.out, out_root)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    (run_dir / "heatmaps").mkdir(exist_ok=True)

    manifest_path = run_dir / "manifest.json"
    manifest = {
        "config": cfg.raw,
        "seed": cfg.seed,
        "code_version": CODE_VERSION,
        "started_at": _utcnow(),
        "finished_at": None,
        "files": [],
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    g = build_graph(cfg)
    (run_dir / "graph.json").write_text(graph_to_json(g), encoding="utf-8")
    split, rl = build_splits(cfg, g)
    named = {"train": split.train_pairs, "test": split.test_pairs}
    if rl is not None:
        named.update(train2train=rl.train2train, train2test=rl.train2test,
                     test2train=rl.test2train, test2test=rl.test2test)
    (run_dir / "splits.json").write_text(splits_to_json(named), encoding="utf-8")

    records: list[RunRecord] = []

    def eval_now(model, step: int) -> None:
        rng = component_rng(cfg.seed, f"eval:{step}")
        records.append(evaluate_model(model, g, split, rl, cfg.eval, cfg.stage, step, rng))
        if cfg.eval["checkpoints"]:
            save_checkpoint(model, run_dir / "checkpoints" / f"step_{step}.json")
        if cfg.eval["snapshots"]:
            snap = snapshot_logits(model, g, cfg.eval["snapshot_current"], range(g.num_nodes))
            (run_dir / "heatmaps" / f"logits_step_{step}.json").write_text(
                json.dumps(snap, sort_keys=True), encoding="utf-8")

    every = int(cfg.eval["every"])

    if cfg.stage == "sft":
        dataset = build_sft_dataset(cfg, g, split)
        write_corpus(run_dir / "corpus.txt", dataset)
        model = TabularPolicy.zeros(g.num_nodes)
        total = int(cfg.sft["steps"])
        eval_now(model, 0)
        done = 0
        while done < total:
            chunk = min(every, total - done)
            train_sft(model, dataset.counts, SftConfig(lr=cfg.sft["lr"], steps=chunk))
            done += chunk
            eval_now(model, done)
    elif cfg.stage == "pg":
        base = load_checkpoint(run_dir_relative(cfg.base_checkpoint, run_dir))
        model = base.copy()
        pg_cfg = pg_config_from(cfg.pg)
        rng = component_rng(cfg.seed, "pg")
        pairs = rl.rl_train if rl is not None else split.train_pairs
        total = int(cfg.pg["steps"])
        eval_now(model, 0)
        done = 0
        while done < total:
            chunk = min(every, total - done)
            for _ in range(chunk):
                pg_step(model, base, pairs, pg_cfg, g, rng)
            done += chunk
            eval_now(model, done)
    else:
        base = load_checkpoint(run_dir_relative(cfg.base_checkpoint, run_dir))
        model = base.copy()
        q_cfg = q_config_from(cfg.q)
        rng = component_rng(cfg.seed, "q")
        pairs = list(rl.rl_train if rl is not None else split.train_pairs)
        behavior = base if q_cfg.behavior == "off_policy" else model
        total = int(cfg.q["episodes"])
        eval_now(model, 0)
        done = 0
        while done < total:
            chunk = min(every, total - done)
            for _ in range(chunk):
                s, t = pairs[rng.integers(len(pairs))]
                q_step(model, q_rollout(behavior, s, t, q_cfg, rng), q_cfg, g)
            done += chunk
            eval_now(model, done)

    write_metrics_csv(run_dir / "metrics.csv", records)
    save_checkpoint(model, run_dir / "checkpoints" / "final.json")
    snap = snapshot_logits(model, g, cfg.eval["snapshot_current"], range(g.num_nodes))
    (run_dir / "heatmaps" / "logits_final.json").write_text(
        json.dumps(snap, sort_keys=True), encoding="utf-8")
    adjacency_payload = {
        "adjacency": g.adjacency.tolist(),
        "scores": _edge_scores(model, g).tolist(),
    }
    if cfg.stage == "sft":
        node_counts = dataset.counts[:, :, :g.num_nodes].sum(axis=0)
        adjacency_payload["edge_frequency"] = node_counts.tolist()
    (run_dir / "heatmaps" / "adjacency_final.json").write_text(
        json.dumps(adjacency_payload, sort_keys=True), encoding="utf-8")

    manifest["finished_at"] = _utcnow()
    manifest["files"] = sorted(
        str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
        if p.is_file() and p.name != "manifest.json"
    )
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return run_dir


def _edge_scores(model, g: Graph) -> np.ndarray:
    n = g.num_nodes
    if isinstance(model, LinearPolicy):
        return model.w_m[:, :n]
    return model.logits[:, :, :n].max(axis=0)


def run_dir_relative(path: str, run_dir: Path) -> Path:
    """Base-checkpoint paths resolve against the cwd first, then the run dir."""
    p = Path(path)
    if p.exists():
        return p
    candidate = run_dir / p
    if candidate.exists():
        return candidate
    raise FileNotFoundError(f"base checkpoint not found: {path}")


# ---------------------------------------------------------------------------
# Export bundles
# ---------------------------------------------------------------------------

def export_bundle(run_dirs, out_dir) -> Path:
    """Consolidate finished (or in-progress) runs into a stable bundle layout
    for the figure tooling.  Re-export is byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"complete": True, "runs": {}}
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        manifest_file = run_dir / "manifest.json"
        if not manifest_file.exists():
            raise FileNotFoundError(f"run has no manifest: {run_dir}")
        manifest = json.loads(manifest_file.read_text(encoding="utf-8"))
        label = run_dir.name
        dest = out / "runs" / label
        dest.mkdir(parents=True, exist_ok=True)
        entry = {"label": label, "manifest": f"runs/{label}/manifest.json"}
        shutil.copyfile(manifest_file, dest / "manifest.json")
        metrics = run_dir / "metrics.csv"
        if metrics.exists():
            shutil.copyfile(metrics, dest / "metrics.csv")
            entry["metrics"] = f"runs/{label}/metrics.csv"
        heat_src = run_dir / "heatmaps"
        heatmaps = []
        if heat_src.is_dir():
            (dest / "heatmaps").mkdir(exist_ok=True)
            for item in sorted(heat_src.glob("*.json")):
                shutil.copyfile(item, dest / "heatmaps" / item.name)
                heatmaps.append(f"runs/{label}/heatmaps/{item.name}")
        entry["heatmaps"] = heatmaps
        if manifest.get("finished_at") is None or not metrics.exists():
            index["complete"] = False
            entry["incomplete"] = True
        index["runs"][label] = entry
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# Verify bundles from run directories
# ---------------------------------------------------------------------------

def load_run_artifacts(run_dir) -> dict:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    cfg = parse_experiment_config(manifest["config"])
    g = graph_from_json((run_dir / "graph.json").read_text(encoding="utf-8"))
    splits = splits_from_json((run_dir / "splits.json").read_text(encoding="utf-8"))
    artifacts = {
        "config": cfg,
        "graph": g,
        "splits": splits,
        "model": load_checkpoint(run_dir / "checkpoints" / "final.json"),
    }
    if cfg.base_checkpoint:
        artifacts["base_model"] = load_checkpoint(run_dir_relative(cfg.base_checkpoint, run_dir))
    corpus_file = run_dir / "corpus.txt"
    if corpus_file.exists():
        sequences = read_corpus(corpus_file, g)
        artifacts["counts"] = sequence_counts(sequences, g.num_nodes)
    return artifacts


def theorem_bundle(theorem: str, artifacts: dict, rng: np.random.Generator) -> dict:
    """Assemble the context bundle a named check needs from run artifacts."""
    from .trainers import count_rollouts as _count
    from .trainers import pg_rollouts as _rolls

    g = artifacts["graph"]
    model = artifacts["model"]
    bundle: dict = {"graph": g, "model": model, "rng": rng}
    train_pairs = artifacts["splits"].get("train", ())
    if theorem == "T1":
        if "counts" not in artifacts:
            raise ValueError("T1 needs a run with a stored corpus (sft stage)")
        bundle["counts"] = artifacts["counts"]
    elif theorem in ("T2", "T3"):
        cfg = PgConfig(rollouts_per_step=64)
        if theorem == "T2":
            bundle["rollout_batches"] = [_rolls(model, train_pairs, cfg, rng) for _ in range(20)]
        else:
            bundle["counts"] = _count(_rolls(model, train_pairs, cfg, rng), g)
    elif theorem == "T5":
        cfg_pg = artifacts["config"].pg
        bundle["lam"] = float(cfg_pg.get("lambda", 0.0))
        bundle["base_model"] = artifacts["base_model"]
        sample_cfg = PgConfig(rollouts_per_step=512)
        bundle["counts"] = _count(_rolls(model, train_pairs, sample_cfg, rng), g)
    elif theorem == "PPO":
        bundle["pairs"] = train_pairs
    return bundle
