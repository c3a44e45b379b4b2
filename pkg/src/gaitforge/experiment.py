"""Experiment orchestration: strategy-comparison and reward-proxy studies.

An experiment is a grid of arms, one per (variant, seed). A variant is
usually just a termination strategy; the reward study instead pits two
variants with the same strategy but different reward modes. Arms run
sequentially and independently; one arm failing never stops the rest.
"""

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import svgplot
from .ppo import TrainConfig
from .refmotion import load_reference
from .rewards import STRATEGIES
from .trainer import Trainer, config_hash

REWARD_MODES = ("mimic", "cost-proxy")
SUMMARY_COLUMNS = ("label", "iteration", "runs",
                   "mean_reward_mean", "mean_reward_std",
                   "mean_cost_J_mean", "mean_cost_J_std",
                   "mean_episode_len_mean", "mean_episode_len_std")


@dataclass(frozen=True)
class ArmVariant:
    """One column of the experiment grid."""

    label: str
    strategy: str
    reward_mode: str = "mimic"

    def __post_init__(self):
        if not self.label or "/" in self.label:
            raise ValueError(f"bad arm label {self.label!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    """Grid description: variants x seeds, shared training overrides.

    strategies entries are either strategy names or mappings with keys
    label/strategy/reward_mode, which is how the reward study names two
    arms that share a strategy.
    """

    env_id: str = "sine-track"
    strategies: tuple = STRATEGIES
    runs: int = 5
    seeds: tuple | None = None
    overrides: dict = field(default_factory=dict)
    out_dir: str = "compare"
    reward_mode: str = "mimic"
    reference: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        if self.seeds is not None:
            seeds = tuple(int(s) for s in self.seeds)
            if len(set(seeds)) != len(seeds):
                raise ValueError("seeds must be distinct")
            object.__setattr__(self, "seeds", seeds)
        elif self.runs < 1:
            raise ValueError("runs must be positive")
        if not self.strategies:
            raise ValueError("need at least one strategy")
        labels = [v.label for v in self.variants()]
        if len(set(labels)) != len(labels):
            raise ValueError("arm labels must be distinct")

    def variants(self) -> tuple:
        out = []
        for entry in self.strategies:
            if isinstance(entry, ArmVariant):
                out.append(entry)
            elif isinstance(entry, str):
                out.append(ArmVariant(entry, entry, self.reward_mode))
            else:
                entry = dict(entry)
                strategy = entry.pop("strategy")
                label = entry.pop("label", strategy)
                mode = entry.pop("reward_mode", self.reward_mode)
                if entry:
                    raise ValueError(f"unknown arm keys {sorted(entry)}")
                out.append(ArmVariant(label, strategy, mode))
        return tuple(out)

    def arm_seeds(self) -> tuple:
        if self.seeds is not None:
            return self.seeds
        return tuple(range(self.runs))

    @classmethod
    def from_doc(cls, doc: dict) -> "ExperimentSpec":
        doc = dict(doc)
        known = {"env_id", "strategies", "runs", "seeds", "overrides",
                 "out_dir", "reward_mode", "reference"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown experiment keys {sorted(unknown)}")
        if "seeds" in doc and doc["seeds"] is not None:
            doc["seeds"] = tuple(doc["seeds"])
        if "strategies" in doc:
            doc["strategies"] = tuple(doc["strategies"])
        return cls(**doc)


def arm_config(spec: ExperimentSpec, variant: ArmVariant,
               seed: int) -> TrainConfig:
    return TrainConfig(env_id=spec.env_id, strategy=variant.strategy,
                       reward_mode=variant.reward_mode, seed=int(seed),
                       **spec.overrides)


def read_log(path):
    """Load a training CSV as {column: float array}."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: np.array([float(r[i]) for r in body])
            for i, name in enumerate(header)}
    return cols


def summarize_arms(arm_logs):
    """Cross-seed mean and std per iteration, one block per arm label.

    arm_logs maps label -> list of per-seed column dicts. Seeds of one label
    must agree on their iteration grid; stds are population stds, matching a
    plain mean-square recomputation.
    """
    rows = []
    for label in arm_logs:
        logs = arm_logs[label]
        if not logs:
            continue
        iters = logs[0]["iteration"]
        for log in logs[1:]:
            if not np.array_equal(log["iteration"], iters):
                raise ValueError(f"arm {label!r} seeds disagree on iterations")
        for name in ("mean_reward", "mean_cost_J", "mean_episode_len"):
            for log in logs:
                if name not in log:
                    raise ValueError(f"arm {label!r} log lacks {name}")
        for i, it in enumerate(iters):
            row = {"label": label, "iteration": int(it), "runs": len(logs)}
            for name in ("mean_reward", "mean_cost_J", "mean_episode_len"):
                vals = np.array([log[name][i] for log in logs])
                row[f"{name}_mean"] = float(vals.mean())
                row[f"{name}_std"] = float(vals.std())
            rows.append(row)
    return rows


def write_summary(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([row["label"], row["iteration"], row["runs"]]
                            + [repr(row[c]) for c in SUMMARY_COLUMNS[3:]])


def _plot_metric(rows, labels, metric, path, *, title, ylabel):
    series = []
    for label in labels:
        mine = [r for r in rows if r["label"] == label]
        if not mine:
            continue
        x = np.array([r["iteration"] for r in mine], dtype=np.float64)
        mean = np.array([r[f"{metric}_mean"] for r in mine])
        std = np.array([r[f"{metric}_std"] for r in mine])
        series.append(svgplot.Series(label, x, mean,
                                     band=(mean - std, mean + std)))
    if series:
        svgplot.write_plot(path, series, title=title, xlabel="iteration",
                           ylabel=ylabel)


def run_experiment(spec: ExperimentSpec, *, char_path=None, echo=None):
    """Run every arm, then emit summary.csv, plots, and a manifest.

    Returns the manifest dict; manifest["ok"] is False when any arm failed
    or aborted. Failed arms keep whatever partial output they produced but
    are left out of the summary statistics.
    """
    say = echo or (lambda msg: None)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reference = load_reference(spec.reference) if spec.reference else None

    arms = []
    arm_logs = {v.label: [] for v in spec.variants()}
    for variant in spec.variants():
        for seed in spec.arm_seeds():
            cfg = arm_config(spec, variant, seed)
            arm_dir = out / variant.label / f"seed{seed:03d}"
            entry = {"label": variant.label, "strategy": variant.strategy,
                     "reward_mode": variant.reward_mode, "seed": int(seed),
                     "dir": str(arm_dir.relative_to(out)),
                     "config_hash": config_hash(cfg), "status": "ok"}
            say(f"arm {variant.label} seed {seed}")
            t0 = time.monotonic()
            try:
                trainer = Trainer(cfg, reference, char_path=char_path)
                result = trainer.train(arm_dir,
                                       meta={"arm_label": variant.label})
                if result["aborted"]:
                    entry["status"] = "aborted"
                    entry["error"] = "non-finite training state"
                else:
                    arm_logs[variant.label].append(read_log(result["log_path"]))
            except Exception as exc:  # noqa: BLE001  arm isolation
                entry["status"] = "failed"
                entry["error"] = f"{type(exc).__name__}: {exc}"
            entry["wall_clock_s"] = round(time.monotonic() - t0, 3)
            say(f"  -> {entry['status']} in {entry['wall_clock_s']}s")
            arms.append(entry)

    rows = summarize_arms(arm_logs)
    write_summary(out / "summary.csv", rows)
    labels = [v.label for v in spec.variants()]
    _plot_metric(rows, labels, "mean_reward", out / "reward_curves.svg",
                 title="mean reward per iteration", ylabel="mean reward")
    _plot_metric(rows, labels, "mean_cost_J", out / "cost_curves.svg",
                 title="mean planner cost per iteration", ylabel="mean cost J")
    _plot_metric(rows, labels, "mean_episode_len", out / "len_curves.svg",
                 title="mean episode length per iteration",
                 ylabel="mean episode length")

    manifest = {
        "env_id": spec.env_id,
        "seeds": list(spec.arm_seeds()),
        "overrides": dict(spec.overrides),
        "variants": [{"label": v.label, "strategy": v.strategy,
                      "reward_mode": v.reward_mode} for v in spec.variants()],
        "arms": arms,
        "summary": "summary.csv",
        "ok": all(a["status"] == "ok" for a in arms),
    }
    with open(out / "experiment.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
