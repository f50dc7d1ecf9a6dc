"""Read-only access to exported run bundles.

A bundle directory carries an ``index.json`` plus per-run metrics CSVs,
manifests and heatmap JSONs.  Rendering never mutates the bundle.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

METRIC_COLUMNS = [
    "step", "train_acc", "test_acc", "diversity",
    "kl_uniform_mean", "invalid_mass", "adjacency_auc", "extra_json",
]


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class Bundle:
    root: Path
    index: dict

    @property
    def run_labels(self) -> list[str]:
        return sorted(self.index.get("runs", {}))

    def _entry(self, label: str) -> dict:
        runs = self.index.get("runs", {})
        if label not in runs:
            raise BundleError(f"bundle has no run labeled '{label}'")
        return runs[label]

    def metrics(self, label: str) -> dict:
        """Column-major metrics for one run: numeric arrays keyed by column."""
        entry = self._entry(label)
        if "metrics" not in entry:
            raise BundleError(f"run '{label}' has no metrics file")
        path = self.root / entry["metrics"]
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != METRIC_COLUMNS:
                raise BundleError(f"unexpected metrics header in {path}")
            rows = list(reader)
        if not rows:
            raise BundleError(f"metrics file is empty: {path}")
        out: dict = {name: [] for name in METRIC_COLUMNS if name != "extra_json"}
        out["extra"] = []
        for row in rows:
            out["step"].append(int(row["step"]))
            for name in out:
                if name in ("step", "extra"):
                    continue
                out[name].append(float(row[name]))
            out["extra"].append(json.loads(row["extra_json"]))
        return out

    def manifest(self, label: str) -> dict:
        entry = self._entry(label)
        return json.loads((self.root / entry["manifest"]).read_text(encoding="utf-8"))

    def heatmap_names(self, label: str) -> list[str]:
        return [Path(p).stem for p in self._entry(label).get("heatmaps", [])]

    def heatmap(self, label: str, name: str) -> dict:
        for rel in self._entry(label).get("heatmaps", []):
            if Path(rel).stem == name:
                return json.loads((self.root / rel).read_text(encoding="utf-8"))
        raise BundleError(f"run '{label}' has no heatmap '{name}'")


def load_bundle(path) -> Bundle:
    root = Path(path)
    index_file = root / "index.json"
    if not index_file.exists():
        raise BundleError(f"not a bundle directory (missing index.json): {root}")
    index = json.loads(index_file.read_text(encoding="utf-8"))
    return Bundle(root=root, index=index)


def display_label(manifest: dict, fallback: str) -> str:
    """Legend label derived from the run manifest."""
    config = manifest.get("config", {})
    stage = config.get("stage")
    if stage == "pg":
        lam = config.get("pg", {}).get("lambda", 0.0)
        return f"{fallback} (pg, lam={lam:g})"
    if stage == "q":
        mode = config.get("q", {}).get("reward_mode", "process")
        behavior = config.get("q", {}).get("behavior", "on_policy")
        return f"{fallback} (q, {mode}, {behavior})"
    if stage:
        return f"{fallback} ({stage})"
    return fallback
