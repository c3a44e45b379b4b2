"""Imitation and task rewards, the termination-threshold schedule, and the
episode-ending decision.

Everything here is a pure function of its inputs. Exponential kernels keep
all rewards in (0, 1], which the threshold schedule relies on.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

TASK_SCALE = 2.5
COST_BUDGET = 10000.0
MAX_EPISODE_LEN = 100

STRATEGIES = ("none", "curriculum", "tight", "medium", "loose")


@dataclass(frozen=True)
class RewardWeights:
    """Outer imitation/task mix, inner term weights, and kernel falloffs."""

    omega_i: float = 0.7
    omega_t: float = 0.3
    w_p: float = 0.65
    w_v: float = 0.1
    w_e: float = 0.15
    w_c: float = 0.1
    k_p: float = 2.0
    k_v: float = 0.1
    k_e: float = 40.0
    k_c: float = 10.0
    task_scale: float = TASK_SCALE
    v_target: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))

    def __post_init__(self):
        if self.omega_i < 0 or self.omega_t < 0:
            raise ValueError("outer weights must be non-negative")
        if abs(self.omega_i + self.omega_t - 1.0) > 1e-9:
            raise ValueError("outer weights must sum to 1")
        if abs(self.w_p + self.w_v + self.w_e + self.w_c - 1.0) > 1e-9:
            raise ValueError("inner weights must sum to 1")
        if min(self.k_p, self.k_v, self.k_e, self.k_c, self.task_scale) <= 0:
            raise ValueError("kernel scales must be positive")
        object.__setattr__(self, "v_target",
                           np.asarray(self.v_target, dtype=np.float64))


class TermReason(Enum):
    FALL = "Fall"
    MAX_LEN = "MaxLen"
    BELOW_THRESHOLD = "BelowThreshold"
    FAULT = "Fault"


def imitation_reward(frame, target, weights: RewardWeights):
    """Pose, velocity, end-effector, and center-of-mass kernels plus their mix.

    Returns (r_p, r_v, r_e, r_c, r_i); each term is in (0, 1].
    """
    if frame.joint_angles.shape != target.joint_angles.shape:
        raise ValueError("joint count mismatch between frame and target")
    if frame.bone_ang_vel.shape != target.bone_ang_vel.shape:
        raise ValueError("bone count mismatch between frame and target")
    if frame.ee_pos.shape != target.ee_pos.shape:
        raise ValueError("end effector count mismatch between frame and target")
    dq = frame.joint_angles - target.joint_angles
    dv = frame.bone_ang_vel - target.bone_ang_vel
    de = frame.ee_pos - target.ee_pos
    dc = frame.com - target.com
    r_p = float(np.exp(-weights.k_p * np.dot(dq, dq)))
    r_v = float(np.exp(-weights.k_v * np.dot(dv, dv)))
    r_e = float(np.exp(-weights.k_e * np.sum(de * de)))
    r_c = float(np.exp(-weights.k_c * np.dot(dc, dc)))
    r_i = (weights.w_p * r_p + weights.w_v * r_v
           + weights.w_e * r_e + weights.w_c * r_c)
    return r_p, r_v, r_e, r_c, r_i


def task_reward(frame, v_target, *, scale=TASK_SCALE) -> float:
    """Kernel on the gap between mean bone velocity and the target velocity."""
    v_bar = frame.bone_lin_vel.mean(axis=0)
    d = np.asarray(v_target, dtype=np.float64) - v_bar
    return float(np.exp(-scale * np.dot(d, d)))


def combined_reward(r_i, r_t, weights: RewardWeights) -> float:
    return weights.omega_i * r_i + weights.omega_t * r_t


def cost_to_reward(cost, budget=COST_BUDGET) -> float:
    """Map a non-negative cost into [0, 1]; costs past the budget floor at 0."""
    if cost < 0:
        raise ValueError("cost must be non-negative")
    return min(max((budget - cost) / budget, 0.0), 1.0)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Reward-threshold strategy for early termination.

    none disables the reward threshold entirely; curriculum interpolates from
    r_start down to r_end over total iterations; the rest hold a constant.
    """

    strategy: str = "curriculum"
    total: int = 1
    r_start: float = 0.75
    r_end: float = 0.5
    tight: float = 0.75
    medium: float = 0.5
    loose: float = 0.25

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        for v in (self.r_start, self.r_end, self.tight, self.medium, self.loose):
            if not (0.0 <= v <= 1.0):
                raise ValueError("thresholds must lie in [0, 1]")
        if self.r_end > self.r_start:
            raise ValueError("curriculum must be non-increasing")
        if self.total < 1:
            raise ValueError("total iterations must be positive")


def tc_threshold(iteration, schedule: CurriculumSchedule) -> float:
    """Reward floor in force at a given training iteration."""
    s = schedule.strategy
    if s == "none":
        return 0.0
    if s == "tight":
        return schedule.tight
    if s == "medium":
        return schedule.medium
    if s == "loose":
        return schedule.loose
    frac = min(max(iteration / schedule.total, 0.0), 1.0)
    return schedule.r_start + (schedule.r_end - schedule.r_start) * frac


def check_termination(reward, r_min, step_count, non_foot_contact,
                      max_len=MAX_EPISODE_LEN):
    """Episode-ending decision: Fall beats BelowThreshold beats MaxLen.

    The threshold is strict (reward exactly at the floor survives). Returns
    None while the episode continues.
    """
    if non_foot_contact:
        return TermReason.FALL
    if reward < r_min:
        return TermReason.BELOW_THRESHOLD
    if step_count >= max_len:
        return TermReason.MAX_LEN
    return None
