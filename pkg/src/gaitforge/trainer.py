"""Rollout collection and the training loop.

Workers own one environment each and draw episodes by reference state
initialization; the loop stitches their transitions into one batch per
iteration, runs the clipped-surrogate update, and logs one CSV row. All
randomness flows from the config seed, so a single-worker run is bitwise
reproducible: log files and checkpoints come out identical across runs.
"""

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nets, ppo
from .characters import load_builtin, load_file
from .envs import SINE_CYCLE, SineTrackEnv, WalkerEnv
from .physics import CONTROL_DT
from .planner import PlannerConfig, instantaneous_cost
from .refmotion import rsi_sample, target_frame, translate_frame, cycle_wraps
from .rewards import (
    CurriculumSchedule,
    RewardWeights,
    TermReason,
    check_termination,
    combined_reward,
    cost_to_reward,
    imitation_reward,
    task_reward,
    tc_threshold,
)

REASON_CODES = {
    TermReason.FALL: 0,
    TermReason.MAX_LEN: 1,
    TermReason.BELOW_THRESHOLD: 2,
    TermReason.FAULT: 3,
}
CODE_REASONS = {v: k for k, v in REASON_CODES.items()}

LOG_COLUMNS = ("iteration", "mean_reward", "mean_reward_ma10", "mean_cost_J",
               "mean_episode_len", "R_min", "lr", "clip_fraction", "kl",
               "episodes", "faults")

CHECKPOINT_VERSION = 1


def config_hash(config: ppo.TrainConfig) -> str:
    doc = asdict(config)
    doc["hidden"] = list(doc["hidden"])
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    cost: float
    non_foot: bool
    fault: bool
    phase_index: int
    com_x: float


class MimicTask:
    """Walker episodes scored against a reference cycle.

    Resets draw a uniform reference frame and restore its exact simulator
    state; rewards compare the live frame to the phase-matched target,
    translated forward one cycle offset per wrap so world positions line up
    however long the episode runs.
    """

    kind = "walker"

    def __init__(self, char, reference, *, weights=None, planner_config=None,
                 reward_mode="mimic", include_phase=True):
        if reward_mode not in ("mimic", "cost-proxy"):
            raise ValueError(f"unknown reward mode {reward_mode!r}")
        self.char = char
        self.ref = reference
        self.weights = weights or RewardWeights()
        pcfg = planner_config or PlannerConfig()
        if pcfg.default_pose is None:
            pcfg = replace(pcfg, default_pose=char.j_default)
        self.pcfg = pcfg
        self.reward_mode = reward_mode
        self.env = WalkerEnv(char, cycle_len=reference.cycle_len,
                             include_phase=include_phase)
        self._start = 0
        self._k = 0

    @property
    def obs_dim(self):
        return self.env.obs_dim

    @property
    def action_dim(self):
        return self.env.action_dim

    def reset(self, rng):
        idx, _ = rsi_sample(self.ref, rng)
        self._start = idx
        self._k = 0
        return self.env.reset(frame=self.ref.frames[idx], cycle_index=idx)

    def step(self, action) -> StepResult:
        obs, frame, _, flags = self.env.step(action)
        self._k += 1
        if flags.fault:
            return StepResult(obs, 0.0, 0.0, False, True, 0, 0.0)
        L = self.ref.cycle_len
        phase_index = (self._start + self._k) % L
        cost = instantaneous_cost(frame, self.pcfg).total
        if self.reward_mode == "mimic":
            tgt = target_frame(self.ref, self._start, self._k)
            wraps = cycle_wraps(self.ref, self._start, self._k)
            if wraps:
                tgt = translate_frame(tgt, wraps * self.ref.cycle_offset)
            *_, r_i = imitation_reward(frame, tgt, self.weights)
            r_t = task_reward(frame, self.weights.v_target,
                              scale=self.weights.task_scale)
            reward = combined_reward(r_i, r_t, self.weights)
        else:
            reward = cost_to_reward(cost)
        return StepResult(obs, reward, cost, flags.non_foot_contact, False,
                          phase_index, float(frame.com[0]))


class SineTask:
    """The didactic tracker with the same episode surface as the walker."""

    kind = "sine"

    def __init__(self, *, reward_mode="mimic"):
        if reward_mode not in ("mimic", "cost-proxy"):
            raise ValueError(f"unknown reward mode {reward_mode!r}")
        self.env = SineTrackEnv()
        self.reward_mode = reward_mode

    obs_dim = SineTrackEnv.obs_dim
    action_dim = SineTrackEnv.action_dim

    def reset(self, rng):
        return self.env.reset(int(rng.integers(SINE_CYCLE)))

    def step(self, action) -> StepResult:
        obs, reward, _ = self.env.step(float(np.asarray(action).ravel()[0]))
        cost = self.env.cost()
        if self.reward_mode == "cost-proxy":
            reward = cost_to_reward(cost)
        t, y = self.env.state
        return StepResult(obs, reward, cost, False, False,
                          t % SINE_CYCLE, float(y))


def make_task(config: ppo.TrainConfig, reference=None, *, char_path=None):
    """Build the episode source a TrainConfig describes."""
    if config.env_id == "sine-track":
        return SineTask(reward_mode=config.reward_mode)
    if config.env_id in ("biped", "quadruped"):
        if reference is None:
            raise ValueError(f"{config.env_id} training needs a reference motion")
        char = load_file(char_path) if char_path else load_builtin(config.env_id)
        return MimicTask(char, reference, reward_mode=config.reward_mode)
    raise ValueError(f"unknown environment id {config.env_id!r}")


class Trainer:
    """Owns the nets, the workers, and every random stream of one run."""

    def __init__(self, config: ppo.TrainConfig, reference=None, *,
                 char_path=None, task_factory=None):
        self.config = config
        if task_factory is None:
            def task_factory():
                return make_task(config, reference, char_path=char_path)
        self.tasks = [task_factory() for _ in range(config.workers)]
        obs_dim = self.tasks[0].obs_dim
        act_dim = self.tasks[0].action_dim
        sizes = (obs_dim, *config.hidden, act_dim)
        self.policy = nets.mlp_init(sizes, seed=config.seed * 2 + 1,
                                    policy_head=True)
        self.value = nets.mlp_init((obs_dim, *config.hidden, 1),
                                   seed=config.seed * 2 + 2)
        self.policy_adam = nets.adam_init(self.policy)
        self.value_adam = nets.adam_init(self.value)
        self.worker_rngs = [np.random.default_rng([config.seed, w])
                            for w in range(config.workers)]
        self.update_rng = np.random.default_rng([config.seed, 777_777])
        self.schedule = CurriculumSchedule(
            strategy=config.strategy,
            total=max(config.iterations - 1, 1))
        self.workers = [{"obs": None, "alive": False, "ep_len": 0,
                         "ep_reward": 0.0} for _ in range(config.workers)]

    # -- rollout collection ---------------------------------------------------

    def run_iteration(self, iteration):
        """Collect one budget of steps, update the nets, return (batch, stats)."""
        cfg = self.config
        r_min = tc_threshold(iteration, self.schedule)
        quota = cfg.budget // cfg.workers
        B = quota * cfg.workers
        obs_dim = self.tasks[0].obs_dim
        act_dim = self.tasks[0].action_dim

        obs = np.empty((B, obs_dim))
        raw = np.empty((B, act_dim))
        logp = np.empty(B)
        rewards = np.empty(B)
        costs = np.empty(B)
        flags = np.zeros(B, dtype=bool)
        reasons = np.full(B, -1, dtype=np.int8)
        phases = np.zeros(B, dtype=np.int64)

        ep_lens = []
        ep_rewards = []
        faults = 0
        bootstrap_obs = np.empty((cfg.workers, obs_dim))

        for w, task in enumerate(self.tasks):
            rng = self.worker_rngs[w]
            st = self.workers[w]
            base = w * quota
            for i in range(quota):
                idx = base + i
                for _ in range(100):
                    if not st["alive"]:
                        st["obs"] = task.reset(rng)
                        st["alive"] = True
                        st["ep_len"] = 0
                        st["ep_reward"] = 0.0
                    action, raw_a, lp = nets.policy_sample(
                        self.policy, st["obs"], rng)
                    res = task.step(action)
                    if not res.fault:
                        break
                    faults += 1
                    st["alive"] = False
                    if i > 0 and st["ep_len"] > 0:
                        # the episode's previous step becomes its terminal one
                        flags[idx - 1] = True
                        reasons[idx - 1] = REASON_CODES[TermReason.FAULT]
                        ep_lens.append(st["ep_len"])
                        ep_rewards.append(st["ep_reward"])
                else:
                    raise RuntimeError("environment faulted 100 times in a row")
                obs[idx] = st["obs"]
                raw[idx] = raw_a
                logp[idx] = lp
                rewards[idx] = res.reward
                costs[idx] = res.cost
                phases[idx] = res.phase_index
                st["ep_len"] += 1
                st["ep_reward"] += res.reward
                reason = check_termination(
                    res.reward, r_min, st["ep_len"], res.non_foot,
                    max_len=cfg.max_episode_len)
                if reason is not None:
                    flags[idx] = True
                    reasons[idx] = REASON_CODES[reason]
                    ep_lens.append(st["ep_len"])
                    ep_rewards.append(st["ep_reward"])
                    st["alive"] = False
                else:
                    st["obs"] = res.obs
            bootstrap_obs[w] = st["obs"]

        values, _ = nets.mlp_forward(self.value, obs)
        values = values.ravel().copy()
        boot_vals, _ = nets.mlp_forward(self.value, bootstrap_obs)
        boot_vals = boot_vals.ravel()

        advantages = np.empty(B)
        returns = np.empty(B)
        segments = 0
        for w in range(cfg.workers):
            seg = slice(w * quota, (w + 1) * quota)
            boot = 0.0 if flags[seg][-1] else float(boot_vals[w])
            adv, ret = ppo.compute_gae(rewards[seg], values[seg], boot,
                                       flags[seg], cfg.gamma, cfg.lam)
            advantages[seg] = adv
            returns[seg] = ret
            segments += int(flags[seg].sum()) + (0 if flags[seg][-1] else 1)

        batch = ppo.RolloutBatch(
            obs=obs, raw_actions=raw, logp=logp, rewards=rewards,
            values=values, flags=flags, reasons=reasons, costs=costs,
            phases=phases, advantages=advantages, returns=returns)
        batch.validate()

        lr = ppo.lr_schedule(iteration, cfg.iterations, cfg.lr_start,
                             cfg.lr_end)
        up = ppo.clipped_update(self.policy, self.value, batch, cfg, lr,
                                policy_adam=self.policy_adam,
                                value_adam=self.value_adam,
                                update_rng=self.update_rng)

        stats = {
            "iteration": iteration,
            "R_min": float(r_min),
            "lr": float(lr),
            "mean_reward": float(rewards.mean()),
            "mean_cost_J": float(costs.mean()),
            "mean_episode_len": (float(np.mean(ep_lens)) if ep_lens else 0.0),
            "episodes": len(ep_lens),
            "episode_segments": segments,
            "faults": faults,
            "aborted": up["aborted"],
            "clip_fraction": up.get("clip_fraction", float("nan")),
            "kl": up.get("kl", float("nan")),
            "policy_loss": up.get("policy_loss"),
            "value_loss": up.get("value_loss"),
        }
        return batch, stats

    # -- full run ---------------------------------------------------------------

    def checkpoint_doc(self, iteration):
        return {
            "version": CHECKPOINT_VERSION,
            "iteration": iteration,
            "config_hash": config_hash(self.config),
            "env_id": self.config.env_id,
            "strategy": self.config.strategy,
            "reward_mode": self.config.reward_mode,
            "policy": nets.save_net(self.policy),
            "value": nets.save_net(self.value),
        }

    def save_checkpoint(self, path, iteration):
        with open(path, "w") as fh:
            json.dump(self.checkpoint_doc(iteration), fh, sort_keys=True,
                      separators=(",", ":"))

    def train(self, out_dir, *, meta=None, log_every=1):
        """Run all iterations, writing log.csv, timing.csv and checkpoints.

        Wall-clock times go to the separate timing.csv so log.csv and the
        checkpoints are byte-identical across reruns of the same config.
        Returns a summary dict; an aborted update stops the run early with
        the last finite parameters saved.
        """
        os.makedirs(out_dir, exist_ok=True)
        cfg = self.config
        chash = config_hash(cfg)
        doc = asdict(cfg)
        doc["hidden"] = list(doc["hidden"])
        run_meta = {"config": doc, "config_hash": chash,
                    "log_columns": list(LOG_COLUMNS)}
        if meta:
            run_meta.update(meta)
        with open(os.path.join(out_dir, "run_meta.json"), "w") as fh:
            json.dump(run_meta, fh, sort_keys=True, indent=2)

        recent = []
        rows = 0
        aborted = False
        last_stats = None
        log_path = os.path.join(out_dir, "log.csv")
        timing_path = os.path.join(out_dir, "timing.csv")
        with open(log_path, "w", newline="") as lf, \
                open(timing_path, "w", newline="") as tf:
            log = csv.writer(lf)
            log.writerow(LOG_COLUMNS)
            timing = csv.writer(tf)
            timing.writerow(("iteration", "wall_clock_s"))
            t0 = time.monotonic()
            for it in range(cfg.iterations):
                _, stats = self.run_iteration(it)
                last_stats = stats
                recent.append(stats["mean_reward"])
                if len(recent) > 10:
                    recent.pop(0)
                ma10 = float(np.mean(recent))
                if it % log_every == 0 or it == cfg.iterations - 1 \
                        or stats["aborted"]:
                    log.writerow((
                        it,
                        repr(stats["mean_reward"]),
                        repr(ma10),
                        repr(stats["mean_cost_J"]),
                        repr(stats["mean_episode_len"]),
                        repr(stats["R_min"]),
                        repr(stats["lr"]),
                        repr(stats["clip_fraction"]),
                        repr(stats["kl"]),
                        stats["episodes"],
                        stats["faults"],
                    ))
                    rows += 1
                timing.writerow((it, f"{time.monotonic() - t0:.3f}"))
                if stats["aborted"]:
                    aborted = True
                    break
                if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 \
                        and it + 1 < cfg.iterations:
                    self.save_checkpoint(
                        os.path.join(out_dir, f"checkpoint_{it + 1:06d}.json"),
                        it + 1)
        self.save_checkpoint(os.path.join(out_dir, "checkpoint_final.json"),
                             (last_stats or {}).get("iteration", -1) + 1)
        return {
            "aborted": aborted,
            "rows": rows,
            "config_hash": chash,
            "final": last_stats,
            "log_path": log_path,
        }


def load_checkpoint(path):
    """Read back a checkpoint: (policy params, value params, meta dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    policy, _ = nets.load_net(doc["policy"])
    value, _ = nets.load_net(doc["value"])
    meta = {k: doc[k] for k in ("iteration", "config_hash", "env_id",
                                "strategy", "reward_mode")}
    return policy, value, meta


def evaluate(policy, task, *, episodes=10, seed=0, max_len=300):
    """Deterministic-policy rollouts; no learning, no reward termination.

    Episodes end on Fall, fault, or max_len. Reports means over episodes plus
    the fall rate and, for walker tasks, the mean forward speed.
    """
    rng = np.random.default_rng([seed, 424_242])
    ep_rewards = []
    ep_lens = []
    ep_costs = []
    falls = 0
    speeds = []
    for _ in range(episodes):
        obs = task.reset(rng)
        total = 0.0
        cost_acc = 0.0
        steps = 0
        start_x = None
        last_x = None
        fell = False
        while steps < max_len:
            action = nets.policy_mean(policy, obs)
            res = task.step(action)
            if res.fault:
                fell = True
                break
            steps += 1
            total += res.reward
            cost_acc += res.cost
            if task.kind == "walker":
                if start_x is None:
                    start_x = res.com_x
                last_x = res.com_x
            obs = res.obs
            if res.non_foot:
                fell = True
                break
        ep_rewards.append(total / max(steps, 1))
        ep_lens.append(steps)
        ep_costs.append(cost_acc / max(steps, 1))
        falls += int(fell)
        if task.kind == "walker" and steps > 1 and start_x is not None:
            speeds.append((last_x - start_x) / ((steps - 1) * CONTROL_DT))
    if not episodes:
        return {"episodes": 0, "mean_reward": 0.0, "mean_episode_len": 0.0,
                "fall_rate": 0.0, "mean_forward_speed": 0.0, "mean_cost_J": 0.0}
    return {
        "episodes": episodes,
        "mean_reward": float(np.mean(ep_rewards)),
        "mean_episode_len": float(np.mean(ep_lens)),
        "fall_rate": falls / episodes,
        "mean_forward_speed": float(np.mean(speeds)) if speeds else 0.0,
        "mean_cost_J": float(np.mean(ep_costs)),
    }
