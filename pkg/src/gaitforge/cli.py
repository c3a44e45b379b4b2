"""Command line entry points.

Every subcommand reads a single JSON config document. Relative output paths
land under the directory named by the GAITFORGE_OUT environment variable
(default: current directory). Exit codes: 0 success, 1 run failure (no gait,
training abort, failed experiment arm), 2 bad configuration.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import nets
from .envs import (SINE_CYCLE, SineTrackEnv, make_env,
                   sine_reference_trajectory, sine_target)
from .experiment import ExperimentSpec, run_experiment
from .physics import CONTROL_DT
from .planner import GaitFailure, PlannerConfig, generate_reference, save_trajectory
from .ppo import TrainConfig
from .refmotion import character_hash, extract_cycle, load_reference, save_reference
from .rewards import STRATEGIES, CurriculumSchedule, check_termination, tc_threshold
from .svgplot import Series, write_plot
from .trainer import Trainer, evaluate, load_checkpoint, make_task

OK = 0
RUN_FAILURE = 1
CONFIG_ERROR = 2

OUT_ROOT_VAR = "GAITFORGE_OUT"


class ConfigError(Exception):
    """Anything wrong with the config document rather than the run."""


def out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_VAR, "."))


def resolve_out(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else out_root() / p


def _load_doc(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return doc


def _take(doc, defaults):
    """Pull known keys out of doc with defaults; reject the rest."""
    unknown = set(doc) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return {k: doc.get(k, v) for k, v in defaults.items()}


def _emit(report):
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_refgen(doc) -> int:
    cfg = _take(doc, {
        "env": "biped", "character": None, "seed": 0, "duration_s": 5.0,
        "burn_in_s": 3.0, "retries": 3, "planner": {}, "out": "reference.json",
        "pos_tol": None, "vel_eps": None,
    })
    out = resolve_out(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    extract_kw = {}
    if cfg["pos_tol"] is not None:
        extract_kw["pos_tol"] = float(cfg["pos_tol"])
    if cfg["vel_eps"] is not None:
        extract_kw["vel_eps"] = float(cfg["vel_eps"])

    t0 = time.monotonic()
    if cfg["env"] == "sine-track":
        trajectory = sine_reference_trajectory()
        dt = 1.0
        hash_ = ""
    else:
        try:
            env = make_env(cfg["env"], char_path=cfg["character"])
            planner_cfg = PlannerConfig(**cfg["planner"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        dt = CONTROL_DT
        hash_ = character_hash(env.char.config)
        try:
            trajectory, _ = generate_reference(
                env, planner_cfg, float(cfg["duration_s"]),
                burn_in_s=float(cfg["burn_in_s"]), seed=int(cfg["seed"]),
                retries=int(cfg["retries"]))
        except GaitFailure as exc:
            dump = out.with_name(out.stem + "_failed" + (out.suffix or ".json"))
            save_trajectory(dump, exc.trajectory, exc.costs, dt, hash_)
            print(f"no sustained gait: {exc}; diagnostics {exc.diagnostics}; "
                  f"trajectory dumped to {dump}", file=sys.stderr)
            return RUN_FAILURE

    ref = extract_cycle(trajectory, dt, config_hash=hash_, **extract_kw)
    if ref is None:
        dump = out.with_name(out.stem + "_failed" + (out.suffix or ".json"))
        save_trajectory(dump, trajectory, [0.0] * len(trajectory), dt, hash_)
        print(f"no cycle closed in {len(trajectory)} frames; "
              f"trajectory dumped to {dump}", file=sys.stderr)
        return RUN_FAILURE
    save_reference(ref, out)
    speed = float(ref.cycle_offset[0] / (ref.cycle_len * ref.dt))
    _emit({"out": str(out), "cycle_len": ref.cycle_len,
           "cycle_duration_s": ref.cycle_len * ref.dt,
           "mean_forward_speed": speed,
           "wall_clock_s": round(time.monotonic() - t0, 3)})
    return OK


def cmd_train(doc) -> int:
    cfg = _take(doc, {"train": {}, "reference": None, "character": None,
                      "out": "train"})
    try:
        train_cfg = TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    reference = None
    if cfg["reference"] is not None:
        reference = load_reference(cfg["reference"])
    out = resolve_out(cfg["out"])
    try:
        trainer = Trainer(train_cfg, reference, char_path=cfg["character"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    summary = trainer.train(out)
    _emit({"out": str(out), "rows": summary["rows"],
           "aborted": summary["aborted"],
           "config_hash": summary["config_hash"]})
    return RUN_FAILURE if summary["aborted"] else OK


def cmd_eval(doc) -> int:
    cfg = _take(doc, {"checkpoint": None, "reference": None, "character": None,
                      "episodes": 10, "seed": 0, "max_len": 300, "out": None})
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs a checkpoint path")
    try:
        policy, _, meta = load_checkpoint(cfg["checkpoint"])
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from exc
    reference = None
    if cfg["reference"] is not None:
        reference = load_reference(cfg["reference"])
    try:
        task = make_task(
            TrainConfig(iterations=1, env_id=meta["env_id"],
                        strategy=meta.get("strategy", "none"),
                        reward_mode=meta.get("reward_mode", "mimic")),
            reference, char_path=cfg["character"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if task.obs_dim != policy.weights[0].shape[0]:
        raise ConfigError(
            f"checkpoint expects {policy.weights[0].shape[0]} observation "
            f"dims but the environment produces {task.obs_dim}")
    report = evaluate(policy, task, episodes=int(cfg["episodes"]),
                      seed=int(cfg["seed"]), max_len=int(cfg["max_len"]))
    report["checkpoint"] = str(cfg["checkpoint"])
    report["env_id"] = meta["env_id"]
    if cfg["out"]:
        out = resolve_out(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _emit(report)
    return OK


def cmd_compare(doc) -> int:
    doc = dict(doc)
    char_path = doc.pop("character", None)
    doc["out_dir"] = str(resolve_out(doc.get("out_dir", "compare")))
    try:
        spec = ExperimentSpec.from_doc(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    manifest = run_experiment(spec, char_path=char_path,
                              echo=lambda msg: print(msg, file=sys.stderr))
    _emit({"out": spec.out_dir, "ok": manifest["ok"],
           "arms": [{"label": a["label"], "seed": a["seed"],
                     "status": a["status"]} for a in manifest["arms"]]})
    return OK if manifest["ok"] else RUN_FAILURE


def cmd_toy(doc) -> int:
    cfg = _take(doc, {"episodes": 8, "max_len": 100, "seed": 0,
                      "strategies": list(STRATEGIES), "progress": 0.0,
                      "total": 100, "out": "toy"})
    for s in cfg["strategies"]:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    if not (0.0 <= float(cfg["progress"]) <= 1.0):
        raise ConfigError("progress must lie in [0, 1]")
    out = resolve_out(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    total = max(int(cfg["total"]), 1)
    iteration = int(round(float(cfg["progress"]) * (total - 1)))
    report = {"out": str(out), "strategies": {}}
    for strategy in cfg["strategies"]:
        schedule = CurriculumSchedule(strategy=strategy,
                                      total=max(total - 1, 1))
        r_min = tc_threshold(iteration, schedule)
        policy = nets.mlp_init((2, 32, 32, 1), seed=int(cfg["seed"]) * 7 + 1,
                               policy_head=True)
        rng = np.random.default_rng([int(cfg["seed"]),
                                     STRATEGIES.index(strategy)])
        env = SineTrackEnv()
        rows = []
        traces = []
        lens = []
        for ep in range(int(cfg["episodes"])):
            obs = env.reset(int(rng.integers(SINE_CYCLE)))
            t, y = env.state
            trace_t, trace_y = [t], [y]
            rows.append((ep, 0, t, y, ""))
            for step in range(1, int(cfg["max_len"]) + 1):
                action, _, _ = nets.policy_sample(policy, obs, rng)
                obs, reward, _ = env.step(float(action[0]))
                t, y = env.state
                trace_t.append(t)
                trace_y.append(y)
                rows.append((ep, step, t, y, repr(reward)))
                reason = check_termination(reward, r_min, step, False,
                                           int(cfg["max_len"]))
                if reason is not None:
                    break
            traces.append((trace_t, trace_y))
            lens.append(len(trace_t) - 1)
        csv_path = out / f"toy_{strategy}.csv"
        with open(csv_path, "w") as fh:
            fh.write("episode,step,t,y,reward\n")
            for ep, step, t, y, r in rows:
                fh.write(f"{ep},{step},{t},{y!r},{r}\n")
        t_lo = min(tr[0][0] for tr in traces)
        t_hi = max(tr[0][-1] for tr in traces)
        grid = np.arange(t_lo, t_hi + 1, dtype=np.float64)
        series = [Series("target", grid,
                         np.array([sine_target(t) for t in grid]))]
        series += [Series(f"ep{ep}", np.array(tt, dtype=np.float64),
                          np.array(yy)) for ep, (tt, yy) in enumerate(traces)]
        write_plot(out / f"toy_{strategy}.svg", series,
                   title=f"{strategy} (threshold {r_min:g})", xlabel="t",
                   ylabel="y")
        report["strategies"][strategy] = {
            "r_min": r_min, "csv": csv_path.name,
            "mean_episode_len": float(np.mean(lens))}
    _emit(report)
    return OK


COMMANDS = {
    "refgen": (cmd_refgen, "synthesize a gait and extract its cycle"),
    "train": (cmd_train, "train a policy against a reference motion"),
    "eval": (cmd_eval, "roll out a checkpoint deterministically"),
    "compare": (cmd_compare, "run a strategy or reward-mode comparison"),
    "toy": (cmd_toy, "dump didactic track traces per strategy"),
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gaitforge",
        description="gait synthesis, imitation training, and comparisons")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="path to a JSON config document")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CONFIG_ERROR if exc.code else OK
    try:
        return COMMANDS[args.command][0](_load_doc(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except (TypeError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
