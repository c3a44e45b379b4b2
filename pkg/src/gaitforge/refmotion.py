"""Reference motions: cycle detection, phase-indexed targets, RSI draws.

A reference motion is one extracted locomotion cycle. Cycle detection works
on end-effector paths expressed relative to the center of mass, so a walking
character whose world positions never return can still close a cycle.
"""

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .envs import FrameRecord
from .physics import SNAPSHOT_MAGIC, config_to_json

MIN_CYCLE_LEN = 10
POS_TOL = 0.05
VEL_EPS = 1e-3
REFERENCE_VERSION = 1


def character_hash(config) -> str:
    """Stable fingerprint of a character config, stored with its motions."""
    return hashlib.sha256(config_to_json(config).encode()).hexdigest()


@dataclass(frozen=True)
class ReferenceMotion:
    """One motion cycle: frames, timing, and the per-cycle com displacement.

    cycle_offset lets a consumer lay cycles end to end: the k-th repetition
    of frame i sits at the stored pose translated by k * cycle_offset.
    """

    frames: tuple
    dt: float
    cycle_offset: np.ndarray
    config_hash: str = ""

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("reference motion needs at least one frame")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        e0 = self.frames[0].ee_pos.shape
        for f in self.frames:
            if f.ee_pos.shape != e0:
                raise ValueError("end-effector count differs between frames")
            if f.snapshot and not f.snapshot.startswith(SNAPSHOT_MAGIC):
                raise ValueError("frame snapshot is not restorable")
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "cycle_offset",
                           np.asarray(self.cycle_offset, dtype=np.float64))

    @property
    def cycle_len(self) -> int:
        return len(self.frames)


def _rel_ee(frame):
    return frame.ee_pos - frame.com


def detect_cycle(trajectory, pos_tol=POS_TOL, vel_eps=VEL_EPS):
    """Find the earliest closed end-effector cycle of length >= 10.

    A cycle closes at (t0, t) when every end effector has returned to its
    com-relative position within pos_tol and is moving the same way (positive
    velocity dot product) or is effectively stationary at both ends. Returns
    (start, length) or None.
    """
    n = len(trajectory)
    if n < MIN_CYCLE_LEN + 1:
        return None
    rel = [_rel_ee(f) for f in trajectory]
    for t0 in range(n - MIN_CYCLE_LEN):
        for t in range(t0 + MIN_CYCLE_LEN, n):
            if _cycle_closes(trajectory, rel, t0, t, pos_tol, vel_eps):
                return t0, t - t0
    return None


def _cycle_closes(traj, rel, t0, t, pos_tol, vel_eps):
    dp = rel[t] - rel[t0]
    if np.any(np.einsum("ij,ij->i", dp, dp) >= pos_tol * pos_tol):
        return False
    va, vb = traj[t0].ee_vel, traj[t].ee_vel
    for e in range(va.shape[0]):
        if float(va[e] @ vb[e]) > 0.0:
            continue
        if np.hypot(*va[e]) < vel_eps and np.hypot(*vb[e]) < vel_eps:
            continue
        return False
    return True


def extract_cycle(trajectory, dt, *, pos_tol=POS_TOL, vel_eps=VEL_EPS,
                  config_hash=""):
    """Detect a cycle and package it, or None when no cycle closes."""
    hit = detect_cycle(trajectory, pos_tol, vel_eps)
    if hit is None:
        return None
    start, length = hit
    frames = tuple(trajectory[start:start + length])
    offset = trajectory[start + length].com - trajectory[start].com
    return ReferenceMotion(frames=frames, dt=dt, cycle_offset=offset,
                           config_hash=config_hash)


def target_frame(ref: ReferenceMotion, start_index: int, step: int) -> FrameRecord:
    """Frame the imitator should match a given number of steps after start."""
    if not (0 <= start_index < ref.cycle_len):
        raise ValueError("start index outside the cycle")
    return ref.frames[(start_index + step) % ref.cycle_len]


def cycle_wraps(ref: ReferenceMotion, start_index: int, step: int) -> int:
    """How many full cycles lie between the start and the requested step."""
    return (start_index + step) // ref.cycle_len


def translate_frame(frame: FrameRecord, offset) -> FrameRecord:
    """Frame displaced rigidly; velocities and the snapshot are unaffected."""
    off = np.asarray(offset, dtype=np.float64)
    return FrameRecord(
        joint_angles=frame.joint_angles,
        bone_ang_vel=frame.bone_ang_vel,
        bone_lin_vel=frame.bone_lin_vel,
        ee_pos=frame.ee_pos + off,
        ee_vel=frame.ee_vel,
        com=frame.com + off,
        com_vel=frame.com_vel,
        snapshot=frame.snapshot,
        applied_torques=frame.applied_torques,
    )


def rsi_sample(ref: ReferenceMotion, rng):
    """Uniform frame index plus its snapshot, for reference state initialization."""
    idx = int(rng.integers(0, ref.cycle_len))
    return idx, ref.frames[idx].snapshot


# ---------------------------------------------------------------------------
# Reference-motion files: plain JSON, exact float round trip


def _frame_to_json(f: FrameRecord):
    return {
        "joint_angles": f.joint_angles.tolist(),
        "bone_ang_vel": f.bone_ang_vel.tolist(),
        "bone_lin_vel": f.bone_lin_vel.tolist(),
        "ee_pos": f.ee_pos.tolist(),
        "ee_vel": f.ee_vel.tolist(),
        "com": f.com.tolist(),
        "com_vel": f.com_vel.tolist(),
        "snapshot": base64.b64encode(f.snapshot).decode("ascii"),
        "applied_torques": f.applied_torques.tolist(),
    }


def _frame_from_json(d) -> FrameRecord:
    return FrameRecord(
        joint_angles=np.array(d["joint_angles"], dtype=np.float64),
        bone_ang_vel=np.array(d["bone_ang_vel"], dtype=np.float64),
        bone_lin_vel=np.array(d["bone_lin_vel"], dtype=np.float64).reshape(-1, 2),
        ee_pos=np.array(d["ee_pos"], dtype=np.float64).reshape(-1, 2),
        ee_vel=np.array(d["ee_vel"], dtype=np.float64).reshape(-1, 2),
        com=np.array(d["com"], dtype=np.float64),
        com_vel=np.array(d["com_vel"], dtype=np.float64),
        snapshot=base64.b64decode(d["snapshot"]),
        applied_torques=np.array(d["applied_torques"], dtype=np.float64),
    )


def reference_to_json(ref: ReferenceMotion) -> str:
    doc = {
        "version": REFERENCE_VERSION,
        "dt": ref.dt,
        "cycle_offset": ref.cycle_offset.tolist(),
        "config_hash": ref.config_hash,
        "frames": [_frame_to_json(f) for f in ref.frames],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def reference_from_json(text: str) -> ReferenceMotion:
    doc = json.loads(text)
    if doc.get("version") != REFERENCE_VERSION:
        raise ValueError(f"unsupported reference version {doc.get('version')}")
    return ReferenceMotion(
        frames=tuple(_frame_from_json(d) for d in doc["frames"]),
        dt=float(doc["dt"]),
        cycle_offset=np.array(doc["cycle_offset"], dtype=np.float64),
        config_hash=doc.get("config_hash", ""),
    )


def save_reference(ref: ReferenceMotion, path):
    with open(path, "w") as fh:
        fh.write(reference_to_json(ref))


def load_reference(path) -> ReferenceMotion:
    with open(path) as fh:
        return reference_from_json(fh.read())
