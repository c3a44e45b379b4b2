"""Environments: simulation-backed walkers and a 1-D sine-tracking toy.

This layer turns raw simulator state into observation vectors, maps policy
actions onto motor targets, and records per-step frames. It deliberately does
not compute rewards or decide termination; it only reports what happened
(contacts, step counts, faults) so the reward module can decide.
"""

from dataclasses import dataclass

import numpy as np

from .characters import load_builtin, load_file
from .physics import (
    kinematics_query,
    load_snapshot,
    make_character,
    save_snapshot,
)
from .physics import step as sim_step

# proportional gain turning a reference-angle error into a motor velocity target
K_P = 10.0

ENV_IDS = ("biped", "quadruped", "sine-track")

# sine-track toy: track y*(t) = sin(2 pi t / cycle) with a bounded increment
SINE_CYCLE = 50
SINE_GAIN = 0.2
SINE_CLAMP = 2.0
SINE_KERNEL = 4.0
SINE_HORIZON = 100
SINE_COST_SCALE = 2500.0


@dataclass(frozen=True)
class FrameRecord:
    """Everything one control step leaves behind.

    Arrays are sized by the character: joint_angles (J,), bone_ang_vel (L,),
    bone_lin_vel (L, 2), ee_pos and ee_vel (F, 2) for F feet, com and com_vel
    (2,). snapshot restores the exact simulator state via env_reset.
    """

    joint_angles: np.ndarray
    bone_ang_vel: np.ndarray
    bone_lin_vel: np.ndarray
    ee_pos: np.ndarray
    ee_vel: np.ndarray
    com: np.ndarray
    com_vel: np.ndarray
    snapshot: bytes
    applied_torques: np.ndarray


@dataclass(frozen=True)
class StepFlags:
    """Raw termination observations; the decision is made elsewhere."""

    non_foot_contact: bool
    step_count: int
    fault: bool


def frame_from_state(state, char, applied_torques=None) -> FrameRecord:
    kin = kinematics_query(state, char)
    if applied_torques is None:
        applied_torques = np.zeros(char.n_joints)
    return FrameRecord(
        joint_angles=kin.joint_angles,
        bone_ang_vel=kin.bone_ang_vel,
        bone_lin_vel=kin.bone_lin_vel,
        ee_pos=kin.ee_pos,
        ee_vel=kin.ee_vel,
        com=kin.com,
        com_vel=kin.com_vel,
        snapshot=save_snapshot(state),
        applied_torques=np.asarray(applied_torques, dtype=np.float64),
    )


def action_to_alpha(char, action):
    """Affine map from [-1,1]^J onto each joint's [lo, hi] range."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    return char.j_lo + (a + 1.0) * 0.5 * (char.j_hi - char.j_lo)


def alpha_to_action(char, alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    return np.clip(2.0 * (alpha - char.j_lo) / (char.j_hi - char.j_lo) - 1.0, -1.0, 1.0)


def observation_dim(char, *, include_phase=True, include_root_vel=False) -> int:
    return 3 + (2 if include_root_vel else 0) + char.n_links + char.n_joints \
        + (1 if include_phase else 0)


def observe(state, char, phase=0.0, *, include_phase=True, include_root_vel=False):
    """Observation vector: root pose, bone angular velocities, joint angles.

    Root x is reported relative to the feet centroid so the vector does not
    grow with distance walked; height and orientation stay absolute.
    """
    kin = kinematics_query(state, char)
    parts = [np.array([kin.root_pos[0] - kin.feet_center_x,
                       kin.root_pos[1],
                       kin.root_ang])]
    if include_root_vel:
        parts.append(state.vel[0].copy())
    parts.append(kin.bone_ang_vel)
    parts.append(kin.joint_angles)
    if include_phase:
        parts.append(np.array([phase]))
    return np.concatenate(parts)


class WalkerEnv:
    """Simulation-backed environment over a capsule character.

    Actions in [-1,1]^J choose reference joint angles by affine map; motors
    are driven at omega = K_P (alpha_ref - alpha). One env step is one
    control step of the simulator.
    """

    def __init__(self, char, *, cycle_len=None, include_phase=True,
                 include_root_vel=False, k_p=K_P):
        self.char = char
        self.cycle_len = cycle_len
        self.include_phase = include_phase
        self.include_root_vel = include_root_vel
        self.k_p = k_p
        self._feet = frozenset(int(f) for f in char.feet)
        self._state = None
        self._steps = 0
        self._phase_idx = 0

    @property
    def obs_dim(self):
        return observation_dim(self.char, include_phase=self.include_phase,
                               include_root_vel=self.include_root_vel)

    @property
    def action_dim(self):
        return self.char.n_joints

    @property
    def state(self):
        return self._state

    @property
    def phase(self):
        if not self.include_phase or not self.cycle_len:
            return 0.0
        return (self._phase_idx % self.cycle_len) / self.cycle_len

    def reset(self, frame: FrameRecord | None = None, cycle_index: int = 0):
        """Default pose, or the exact state stored in a reference frame."""
        if frame is None:
            self._state = make_character(self.char)
            self._phase_idx = 0
        else:
            st = load_snapshot(frame.snapshot)
            if st.pos.shape[0] != self.char.n_links:
                raise ValueError(
                    f"snapshot has {st.pos.shape[0]} links, character has "
                    f"{self.char.n_links}")
            self._state = st
            self._phase_idx = int(cycle_index)
        self._steps = 0
        return self._observe()

    def motor_targets(self, action):
        """Velocity targets the next step() call would send to the motors."""
        alpha_ref = action_to_alpha(self.char, action)
        q = self._state.ang[self.char.jc] - self._state.ang[self.char.jp]
        return self.k_p * (alpha_ref - q)

    def step(self, action):
        if self._state is None:
            raise RuntimeError("reset() before step()")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.char.n_joints,):
            raise ValueError(
                f"expected action shape ({self.char.n_joints},), got {action.shape}")
        res = sim_step(self._state, self.char, self.motor_targets(action))
        self._state = res.state
        self._steps += 1
        self._phase_idx += 1
        fault = not (np.all(np.isfinite(res.state.pos))
                     and np.all(np.isfinite(res.state.ang))
                     and np.all(np.isfinite(res.state.vel))
                     and np.all(np.isfinite(res.state.angvel)))
        non_foot = any(c.link not in self._feet for c in res.contacts)
        record = frame_from_state(self._state, self.char, res.applied_torque)
        flags = StepFlags(non_foot_contact=non_foot, step_count=self._steps,
                          fault=fault)
        return self._observe(), record, res.contacts, flags

    def _observe(self):
        return observe(self._state, self.char, self.phase,
                       include_phase=self.include_phase,
                       include_root_vel=self.include_root_vel)


def sine_target(t) -> float:
    return float(np.sin(2.0 * np.pi * t / SINE_CYCLE))


def sine_track_step(state, action):
    """One step of the toy tracker: ((t, y), a) -> ((t', y'), reward).

    The increment is bounded, the track is clamped to [-2, 2], and the reward
    is an exponential kernel on the post-step deviation from the sine target.
    """
    t, y = state
    a = min(max(float(action), -1.0), 1.0)
    y1 = min(max(y + SINE_GAIN * a, -SINE_CLAMP), SINE_CLAMP)
    t1 = t + 1
    d = y1 - sine_target(t1)
    return (t1, y1), float(np.exp(-SINE_KERNEL * d * d))


def sine_track_cost(state) -> float:
    """Quadratic tracking cost of a state, the toy analog of a planner cost."""
    t, y = state
    d = y - sine_target(t)
    return SINE_COST_SCALE * d * d


def sine_reference_trajectory(n_steps: int = 120):
    """The sampled optimal track as frame records, for the cycle pipeline.

    The lone end effector rides the sine while the com drifts steadily in x,
    so cycle detection sees the same geometry a walker produces: a periodic
    com-relative path with a per-cycle world offset.
    """
    frames = []
    for t in range(n_steps):
        y = sine_target(t)
        dy = sine_target(t + 1) - y
        com = np.array([t / SINE_CYCLE, 0.0])
        frames.append(FrameRecord(
            joint_angles=np.array([y]),
            bone_ang_vel=np.array([0.0]),
            bone_lin_vel=np.array([[0.0, dy]]),
            ee_pos=com + np.array([[0.0, y]]),
            ee_vel=np.array([[0.0, dy]]),
            com=com,
            com_vel=np.array([1.0 / SINE_CYCLE, dy]),
            snapshot=b"",
            applied_torques=np.array([0.0]),
        ))
    return frames


class SineTrackEnv:
    """Episode wrapper around sine_track_step with the same flag surface."""

    obs_dim = 2
    action_dim = 1

    def __init__(self):
        self._t = 0
        self._y = 0.0
        self._steps = 0

    @property
    def state(self):
        return (self._t, self._y)

    @property
    def phase(self):
        return (self._t % SINE_CYCLE) / SINE_CYCLE

    def reset(self, t0: int = 0):
        """Start on the target track at time t0 (t0 = 0 is the fixed init)."""
        self._t = int(t0)
        self._y = sine_target(self._t)
        self._steps = 0
        return self._observe()

    def step(self, action):
        (self._t, self._y), reward = sine_track_step((self._t, self._y), action)
        self._steps += 1
        flags = StepFlags(non_foot_contact=False, step_count=self._steps,
                          fault=False)
        return self._observe(), reward, flags

    def cost(self) -> float:
        return sine_track_cost((self._t, self._y))

    def _observe(self):
        return np.array([self.phase, self._y])


def make_env(env_id, *, char_path=None, **opts):
    """Environment factory over the id strings used by configs and the CLI."""
    if env_id == "sine-track":
        return SineTrackEnv()
    if env_id in ("biped", "quadruped"):
        char = load_file(char_path) if char_path else load_builtin(env_id)
        return WalkerEnv(char, **opts)
    raise ValueError(f"unknown environment id {env_id!r}")
