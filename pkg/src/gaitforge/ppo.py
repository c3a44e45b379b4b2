"""Core PPO math: advantage estimation, the clipped surrogate update, lr schedule.

The rollout/trainer loop lives in trainer.py; this module is pure array math
over explicit inputs so every piece can be checked against a slow oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets


@dataclass
class TrainConfig:
    """PPO hyperparameters. Defaults follow the shipped experiment configs."""

    iterations: int
    budget: int = 4096            # environment steps collected per iteration
    epochs: int = 25              # optimization passes over the batch
    minibatch: int = 256
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    lr_start: float = 1e-4
    lr_end: float = 1e-7
    workers: int = 1
    seed: int = 0
    hidden: tuple = (64, 64)
    max_episode_len: int = 100
    env_id: str = "biped"
    strategy: str = "curriculum"
    reward_mode: str = "mimic"    # or "cost-proxy"
    checkpoint_every: int = 200

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.budget < 1 or self.minibatch < 1 or self.epochs < 1:
            raise ValueError("budget, minibatch and epochs must be >= 1")
        if self.minibatch > self.budget:
            raise ValueError("minibatch cannot exceed the step budget")
        if not (0 < self.gamma <= 1) or not (0 <= self.lam <= 1):
            raise ValueError("need 0 < gamma <= 1 and 0 <= lam <= 1")
        if not (0 < self.clip_eps < 1):
            raise ValueError("clip_eps must be in (0, 1)")
        if self.workers < 1 or self.budget % self.workers != 0:
            raise ValueError("workers must be >= 1 and divide the step budget")
        if self.max_episode_len < 1:
            raise ValueError("max_episode_len must be >= 1")
        if self.reward_mode not in ("mimic", "cost-proxy"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")


@dataclass
class RolloutBatch:
    """One iteration's worth of transitions, worker-major order.

    flags[t] marks a terminal step (episode ended at t, zero bootstrap);
    a worker segment whose last step is unflagged was truncated by the budget
    and bootstraps with the value prediction there. reasons holds the
    termination code of flagged steps (-1 elsewhere).
    """

    obs: np.ndarray
    raw_actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    flags: np.ndarray
    reasons: np.ndarray
    costs: np.ndarray
    phases: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return self.obs.shape[0]

    def validate(self):
        B = len(self)
        names = ["raw_actions", "logp", "rewards", "values", "flags", "reasons", "costs"]
        if self.phases is not None:
            names.append("phases")
        for name in names:
            if getattr(self, name).shape[0] != B:
                raise ValueError(f"{name} length != batch length")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("non-finite rewards in batch")


def compute_gae(rewards, values, bootstrap_value, flags, gamma, lam):
    """Generalized advantage estimates plus value-regression targets.

    Flagged steps are terminal: the advantage recursion resets and the next
    state's value is zero. The bootstrap_value only enters when the batch ends
    mid-episode (last step unflagged). Returns (advantages, advantages+values).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    B = rewards.shape[0]
    if values.shape[0] != B or flags.shape[0] != B:
        raise ValueError("rewards, values and flags must have equal length")
    adv = np.empty(B)
    next_adv = 0.0
    next_val = float(bootstrap_value)
    for t in range(B - 1, -1, -1):
        if flags[t]:
            next_adv = 0.0
            next_val = 0.0
        delta = rewards[t] + gamma * next_val - values[t]
        adv[t] = delta + gamma * lam * next_adv
        next_adv = adv[t]
        next_val = values[t]
    return adv, adv + values


def lr_schedule(iteration, total_iterations, lr_start=1e-4, lr_end=1e-7):
    """Log-linear interpolation from lr_start down to lr_end across the run."""
    if total_iterations <= 1:
        return lr_start
    frac = iteration / (total_iterations - 1)
    return 10.0 ** (np.log10(lr_start) + (np.log10(lr_end) - np.log10(lr_start)) * frac)


def _policy_minibatch(policy, obs, raw, logp_old, adv, clip_eps):
    """Loss and parameter gradients for the clipped surrogate on one minibatch."""
    M = obs.shape[0]
    z, cache = nets.mlp_forward(policy, obs)
    mu = np.tanh(z)
    logp_new = nets.gaussian_logprob(raw, mu, policy.log_std)
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surr1 = ratio * adv
    surr2 = clipped * adv
    loss = -np.minimum(surr1, surr2).mean()
    # gradient flows through the unclipped branch only where it is the minimum
    g_logp = np.where(surr1 <= surr2, -adv * ratio, 0.0) / M
    var = np.exp(2.0 * policy.log_std)
    d = raw - mu
    g_mu = g_logp[:, None] * d / var
    g_z = g_mu * (1.0 - mu * mu)
    grads = nets.mlp_backprop(policy, cache, g_z)
    grads.log_std = (g_logp[:, None] * (d * d / var - 1.0)).sum(axis=0)
    return loss, grads, ratio


def _value_minibatch(value_net, obs, returns):
    M = obs.shape[0]
    v, cache = nets.mlp_forward(value_net, obs)
    v = v.reshape(-1)
    err = v - returns
    loss = np.mean(err * err)
    grads = nets.mlp_backprop(value_net, cache, (2.0 * err / M).reshape(-1, 1))
    return loss, grads


def clipped_update(policy, value_net, batch, config, lr, *, policy_adam, value_adam, update_rng):
    """Run the epoch/minibatch PPO update in place on policy and value nets.

    Advantages are standardized over the whole batch first. A non-finite
    policy or value loss aborts the update and restores every parameter and
    optimizer moment to its pre-update state. Both nets share the iteration lr
    (they are separate networks, so no loss weighting is involved).
    """
    B = len(batch)
    adv_raw = batch.advantages
    adv = (adv_raw - adv_raw.mean()) / (adv_raw.std() + 1e-8)

    pol_backup = nets.clone_params(policy)
    val_backup = nets.clone_params(value_net)
    pol_adam_backup = nets.clone_adam(policy_adam)
    val_adam_backup = nets.clone_adam(value_adam)

    stats = {
        "aborted": False,
        "adv_mean": float(adv.mean()) if np.all(np.isfinite(adv)) else float("nan"),
        "adv_std": float(adv.std()) if np.all(np.isfinite(adv)) else float("nan"),
        "first_ratio_dev": None,
        "policy_loss": None,
        "value_loss": None,
    }

    first = True
    for _ in range(config.epochs):
        perm = update_rng.permutation(B)
        for lo in range(0, B, config.minibatch):
            idx = perm[lo:lo + config.minibatch]
            pol_loss, pol_grads, ratio = _policy_minibatch(
                policy, batch.obs[idx], batch.raw_actions[idx], batch.logp[idx], adv[idx], config.clip_eps)
            val_loss, val_grads = _value_minibatch(value_net, batch.obs[idx], batch.returns[idx])
            if first:
                stats["first_ratio_dev"] = float(np.max(np.abs(ratio - 1.0)))
                first = False
            if not (np.isfinite(pol_loss) and np.isfinite(val_loss)):
                nets.copy_into(policy, pol_backup)
                nets.copy_into(value_net, val_backup)
                _restore_adam(policy_adam, pol_adam_backup)
                _restore_adam(value_adam, val_adam_backup)
                stats["aborted"] = True
                return stats
            nets.adam_step(policy, pol_grads, policy_adam, lr)
            nets.adam_step(value_net, val_grads, value_adam, lr)
            stats["policy_loss"] = float(pol_loss)
            stats["value_loss"] = float(val_loss)

    # post-update diagnostics on the full batch
    logp_new = nets.policy_logprob(policy, batch.obs, batch.raw_actions)
    ratio = np.exp(logp_new - batch.logp)
    stats["kl"] = float(np.mean(batch.logp - logp_new))
    stats["clip_fraction"] = float(np.mean(np.abs(ratio - 1.0) > config.clip_eps))
    return stats


def _restore_adam(dst, src):
    dst.step = src.step
    for d, s in zip(dst.m_w + dst.v_w + dst.m_b + dst.v_b, src.m_w + src.v_w + src.m_b + src.v_b):
        d[...] = s
    if dst.m_ls is not None:
        dst.m_ls[...] = src.m_ls
        dst.v_ls[...] = src.v_ls
