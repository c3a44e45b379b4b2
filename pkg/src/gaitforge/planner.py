"""Warm-started random-shooting trajectory optimizer.

Plans fixed-depth action sequences by forward simulation: the previous best
plan, shifted one step, seeds a cloud of Gaussian perturbations; every
candidate is rolled out from the same snapshot and scored by a four-term
quadratic cost; the cheapest sequence wins. Closed-loop planning from the
default pose discovers a gait good enough to extract a reference cycle from.
"""

import base64
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .envs import K_P, WalkerEnv, action_to_alpha, frame_from_state
from .physics import (
    BAUMGARTE,
    CONTROL_DT,
    GRAVITY,
    N_SUBSTEPS,
    SOLVER_ITERS,
    _substep_kernel,
    load_snapshot,
    save_snapshot,
)
from .physics import step as sim_step

TRAJECTORY_VERSION = 1

# candidate sequences that put a non-foot link on the ground are effectively
# pruned: a big additive penalty, growing the earlier the fall happens
FALL_PENALTY = 1e5


@dataclass(frozen=True)
class CostTerms:
    c_torque: float
    c_pose: float
    c_balance: float
    c_velocity: float
    total: float


@dataclass(frozen=True)
class PlannerConfig:
    """Shooting parameters and cost weights.

    default_pose is resolved from the character when left as None; smoothing
    is the EMA coefficient applied to executed actions (0 disables it).
    """

    depth: int = 30
    candidates: int = 128
    sigma: float = 0.25
    elite_fraction: float = 0.0
    w_torque: float = 1e-3
    w_pose: float = 1.0
    w_balance: float = 5.0
    w_velocity: float = 10.0
    v_target: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    budget_s: float = 600.0
    smoothing: float = 0.3
    default_pose: np.ndarray | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.candidates < 2:
            raise ValueError("need at least 2 candidates")
        if min(self.w_torque, self.w_pose, self.w_balance, self.w_velocity) < 0:
            raise ValueError("cost weights must be non-negative")
        if not (0.0 <= self.elite_fraction <= 1.0):
            raise ValueError("elite fraction must lie in [0, 1]")
        if not (0.0 <= self.smoothing < 1.0):
            raise ValueError("smoothing must lie in [0, 1)")
        object.__setattr__(self, "v_target",
                           np.asarray(self.v_target, dtype=np.float64))
        if self.default_pose is not None:
            object.__setattr__(self, "default_pose",
                               np.asarray(self.default_pose, dtype=np.float64))


class GaitFailure(RuntimeError):
    """Reference generation gave up; diagnostics ride along."""

    def __init__(self, message, diagnostics=None, trajectory=None, costs=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.trajectory = trajectory or []
        self.costs = costs or []


def instantaneous_cost(frame, config: PlannerConfig, default_pose=None) -> CostTerms:
    """Four quadratic penalties of one frame plus their weighted total."""
    if default_pose is None:
        default_pose = config.default_pose
    if default_pose is None:
        raise ValueError("default pose unresolved; pass it or set it in config")
    tq = frame.applied_torques
    c_torque = float(np.dot(tq, tq))
    dq = frame.joint_angles - default_pose
    c_pose = float(np.dot(dq, dq))
    d_bal = frame.com[0] - frame.ee_pos[:, 0].mean()
    c_balance = float(d_bal * d_bal)
    dv = frame.bone_lin_vel.mean(axis=0) - config.v_target
    c_velocity = float(np.dot(dv, dv))
    total = (config.w_torque * c_torque + config.w_pose * c_pose
             + config.w_balance * c_balance + config.w_velocity * c_velocity)
    return CostTerms(c_torque, c_pose, c_balance, c_velocity, total)


def make_candidates(previous_plan, rng, config: PlannerConfig, action_dim):
    """Shifted warm start first, then Gaussian perturbations of it."""
    d, n = config.depth, config.candidates
    if previous_plan is None:
        shifted = np.zeros((d, action_dim))
    else:
        shifted = np.vstack([previous_plan[1:], previous_plan[-1:]])
    cands = np.empty((n, d, action_dim))
    cands[0] = shifted
    noise = rng.normal(0.0, config.sigma, size=(n - 1, d, action_dim))
    cands[1:] = np.clip(shifted[None] + noise, -1.0, 1.0)
    return cands


def shoot_plan(cost_fn, previous_plan, rng, config: PlannerConfig, action_dim):
    """Generic shooting step over any sequence-cost function.

    Returns (executed action, winning sequence, winning cost). The executed
    action is the winner's first action, or the elite average of the best
    ceil(f*N) first actions when elite_fraction > 0.
    """
    cands = make_candidates(previous_plan, rng, config, action_dim)
    costs = cost_fn(cands)
    costs = np.where(np.isfinite(costs), costs, np.inf)
    best = int(np.argmin(costs))
    if not np.isfinite(costs[best]):
        raise RuntimeError("all candidate rollouts went non-finite")
    plan = cands[best].copy()
    if config.elite_fraction > 0.0:
        k = int(np.ceil(config.elite_fraction * config.candidates))
        elite = np.argsort(costs, kind="stable")[:k]
        action = cands[elite, 0].mean(axis=0)
    else:
        action = plan[0].copy()
    return action, plan, float(costs[best])


@njit(cache=True)
def _batch_rollout_costs(pos0, ang0, vel0, angvel0,
                         inv_m, inv_i, radius, half_len,
                         jp, jc, japx, japy, jacx, jacy,
                         jlo, jhi, jtau, j_default,
                         mass, feet,
                         actions, k_p,
                         w_torque, w_pose, w_balance, w_velocity,
                         vt_x, vt_y,
                         dt, n_sub, sub_dt, gravity, iters, beta, mu):
    n_cand, depth, n_joint = actions.shape
    n = pos0.shape[0]
    total_mass = mass.sum()
    is_foot = np.zeros(n, dtype=np.uint8)
    for k in range(feet.shape[0]):
        is_foot[feet[k]] = 1
    costs = np.zeros(n_cand)
    for cand in range(n_cand):
        pos = pos0.copy(); ang = ang0.copy()
        vel = vel0.copy(); angvel = angvel0.copy()
        acc = 0.0
        for d in range(depth):
            omega = np.empty(n_joint)
            for j in range(n_joint):
                a = actions[cand, d, j]
                alpha = jlo[j] + (a + 1.0) * 0.5 * (jhi[j] - jlo[j])
                q = ang[jc[j]] - ang[jp[j]]
                omega[j] = k_p * (alpha - q)
            motor_impulse = np.zeros(n_joint)
            cont_imp = np.zeros((n, 2))
            cont_px = np.zeros((n, 2))
            cont_py = np.zeros((n, 2))
            _substep_kernel(pos, ang, vel, angvel,
                            inv_m, inv_i, radius, half_len,
                            jp, jc, japx, japy, jacx, jacy,
                            jlo, jhi, jtau,
                            omega, n_sub, sub_dt, gravity, iters, beta, mu,
                            motor_impulse, cont_imp, cont_px, cont_py)
            ok = True
            for i in range(n):
                if not (np.isfinite(pos[i, 0]) and np.isfinite(pos[i, 1])
                        and np.isfinite(ang[i]) and np.isfinite(vel[i, 0])
                        and np.isfinite(vel[i, 1]) and np.isfinite(angvel[i])):
                    ok = False
                    break
            if not ok:
                acc = np.inf
                break
            fell = False
            for i in range(n):
                if is_foot[i] == 0 and (cont_imp[i, 0] > 0.0
                                        or cont_imp[i, 1] > 0.0):
                    fell = True
                    break
            if fell:
                acc += FALL_PENALTY * (depth - d)
                break
            c_torque = 0.0
            c_pose = 0.0
            for j in range(n_joint):
                tau = motor_impulse[j] / dt
                c_torque += tau * tau
                dq = (ang[jc[j]] - ang[jp[j]]) - j_default[j]
                c_pose += dq * dq
            com_x = 0.0
            vbar_x = 0.0
            vbar_y = 0.0
            for i in range(n):
                com_x += mass[i] * pos[i, 0]
                vbar_x += vel[i, 0]
                vbar_y += vel[i, 1]
            com_x /= total_mass
            vbar_x /= n
            vbar_y /= n
            feet_x = 0.0
            for k in range(feet.shape[0]):
                f = feet[k]
                feet_x += pos[f, 0] + np.cos(ang[f]) * half_len[f]
            feet_x /= feet.shape[0]
            d_bal = com_x - feet_x
            dvx = vbar_x - vt_x
            dvy = vbar_y - vt_y
            acc += (w_torque * c_torque + w_pose * c_pose
                    + w_balance * d_bal * d_bal
                    + w_velocity * (dvx * dvx + dvy * dvy))
        costs[cand] = acc
    return costs


class Planner:
    """Shooting planner bound to one character."""

    def __init__(self, char, config: PlannerConfig, k_p=K_P):
        if config.default_pose is None:
            config = replace(config, default_pose=char.j_default)
        self.char = char
        self.config = config
        self.k_p = k_p

    def _batch_costs(self, state, candidates):
        c = self.char
        cfg = self.config
        return _batch_rollout_costs(
            state.pos, state.ang, state.vel, state.angvel,
            c.inv_mass, c.inv_inertia, c.radius, c.half_len,
            c.jp, c.jc,
            c.j_anchor_p[:, 0].copy(), c.j_anchor_p[:, 1].copy(),
            c.j_anchor_c[:, 0].copy(), c.j_anchor_c[:, 1].copy(),
            c.j_lo, c.j_hi, c.j_tau, cfg.default_pose,
            c.mass, np.asarray(c.feet, dtype=np.int64),
            np.ascontiguousarray(candidates), self.k_p,
            cfg.w_torque, cfg.w_pose, cfg.w_balance, cfg.w_velocity,
            cfg.v_target[0], cfg.v_target[1],
            CONTROL_DT, N_SUBSTEPS, CONTROL_DT / N_SUBSTEPS,
            GRAVITY, SOLVER_ITERS, BAUMGARTE, c.friction)

    def plan_action(self, snapshot, previous_plan, rng):
        """One receding-horizon decision from an exact simulator snapshot."""
        state = load_snapshot(snapshot)
        return shoot_plan(lambda cands: self._batch_costs(state, cands),
                          previous_plan, rng, self.config,
                          self.char.n_joints)

    def rollout_cost(self, snapshot, actions) -> float:
        """Reference evaluation of one sequence through the public step API.

        Mirrors the batch kernel exactly, fall pruning included.
        """
        state = load_snapshot(snapshot)
        feet = set(self.char.feet)
        depth = len(actions)
        total = 0.0
        for d, a in enumerate(actions):
            alpha = action_to_alpha(self.char, a)
            q = state.ang[self.char.jc] - state.ang[self.char.jp]
            res = sim_step(state, self.char, self.k_p * (alpha - q))
            state = res.state
            if not (np.all(np.isfinite(state.pos))
                    and np.all(np.isfinite(state.vel))):
                return float("inf")
            if any(c.link not in feet for c in res.contacts):
                return total + FALL_PENALTY * (depth - d)
            frame = frame_from_state(state, self.char, res.applied_torque)
            total += instantaneous_cost(frame, self.config).total
        return total


def plan_action(snapshot, previous_plan, rng, config: PlannerConfig, char):
    """Module-level convenience over Planner.plan_action."""
    return Planner(char, config).plan_action(snapshot, previous_plan, rng)


def generate_reference(env: WalkerEnv, config: PlannerConfig, duration_s=5.0,
                       *, burn_in_s=3.0, seed=0, retries=3):
    """Closed-loop planning from the default pose.

    Discards the burn-in prefix and returns (frames, costs) for the remaining
    duration. A fall restarts the attempt, and so does a stall: quiet standing
    is per-step cheaper than walking under the default weights, so an attempt
    whose center of mass is still near rest at the end of burn-in will never
    start moving and needs a fresh draw of shooting noise. Running out of
    retries or wall clock raises GaitFailure carrying the partial trajectory.
    """
    planner = Planner(env.char, config)
    rng = np.random.default_rng(seed)
    burn_steps = int(round(burn_in_s / CONTROL_DT))
    total_steps = burn_steps + int(round(duration_s / CONTROL_DT))
    stall_window = min(burn_steps, int(round(1.0 / CONTROL_DT)) + 1)
    stall_speed = 0.25 * float(np.hypot(*config.v_target))
    t_start = time.monotonic()
    falls = 0
    stalls = 0
    attempt_frames: list = []
    attempt_costs: list = []
    while True:
        env.reset()
        attempt_frames.clear()
        attempt_costs.clear()
        plan = None
        exec_action = None
        failed = False
        for k in range(total_steps):
            if time.monotonic() - t_start > config.budget_s:
                raise GaitFailure(
                    "planning budget exhausted",
                    diagnostics={"falls": falls, "stalls": stalls,
                                 "steps_done": k, "budget_s": config.budget_s},
                    trajectory=attempt_frames, costs=attempt_costs)
            snapshot = save_snapshot(env.state)
            action, plan, _ = planner.plan_action(snapshot, plan, rng)
            if exec_action is None or config.smoothing == 0.0:
                exec_action = action
            else:
                exec_action = (config.smoothing * exec_action
                               + (1.0 - config.smoothing) * action)
            _, frame, _, flags = env.step(exec_action)
            if flags.fault or flags.non_foot_contact:
                falls += 1
                failed = True
                break
            attempt_frames.append(frame)
            attempt_costs.append(
                instantaneous_cost(frame, planner.config).total)
            if k + 1 == burn_steps and stall_window >= 2:
                dx = (attempt_frames[-1].com[0]
                      - attempt_frames[-stall_window].com[0])
                drift = abs(dx) / ((stall_window - 1) * CONTROL_DT)
                if drift < stall_speed:
                    stalls += 1
                    failed = True
                    break
        if not failed:
            return attempt_frames[burn_steps:], attempt_costs[burn_steps:]
        if falls + stalls > retries:
            raise GaitFailure(
                "no sustained gait within the retry budget",
                diagnostics={"falls": falls, "stalls": stalls,
                             "steps_done": len(attempt_frames),
                             "retries": retries},
                trajectory=list(attempt_frames), costs=list(attempt_costs))


# ---------------------------------------------------------------------------
# Trajectory files: emitted frames plus per-step costs


def trajectory_to_json(frames, costs, dt, config_hash="") -> str:
    from .refmotion import _frame_to_json
    doc = {
        "version": TRAJECTORY_VERSION,
        "dt": dt,
        "config_hash": config_hash,
        "costs": [float(c) for c in costs],
        "frames": [_frame_to_json(f) for f in frames],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def trajectory_from_json(text: str):
    from .refmotion import _frame_from_json
    doc = json.loads(text)
    if doc.get("version") != TRAJECTORY_VERSION:
        raise ValueError(f"unsupported trajectory version {doc.get('version')}")
    frames = [_frame_from_json(d) for d in doc["frames"]]
    return frames, list(doc["costs"]), float(doc["dt"]), doc.get("config_hash", "")


def save_trajectory(path, frames, costs, dt, config_hash=""):
    with open(path, "w") as fh:
        fh.write(trajectory_to_json(frames, costs, dt, config_hash))


def load_trajectory(path):
    with open(path) as fh:
        return trajectory_from_json(fh.read())
