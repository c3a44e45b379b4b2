"""Planar rigid-body simulation for capsule-link characters.

World: x forward, y up, ground is the half-plane y <= 0. Bodies are capsules
with their axis along local x (endpoints at +-length/2). Joints are hinges
with angle limits and velocity motors whose torque is clamped. Contacts use
Coulomb friction and zero restitution. Integration is semi-implicit Euler at
a fixed substep rate with a sequential-impulse velocity solver and Baumgarte
positional bias. Everything runs in fixed iteration order on float64, so a
step is a pure, bitwise-reproducible function of (state, motors, dt).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

GRAVITY = 9.81
CONTROL_DT = 1.0 / 30.0
N_SUBSTEPS = 8
SOLVER_ITERS = 16
BAUMGARTE = 0.2

SNAPSHOT_MAGIC = b"GF2D"
SNAPSHOT_VERSION = 1


@dataclass
class LinkSpec:
    name: str
    length: float
    radius: float
    mass: float


@dataclass
class JointSpec:
    name: str
    parent: int
    child: int
    parent_anchor: tuple
    child_anchor: tuple
    default_angle: float      # child world angle minus parent world angle at rest
    limits: tuple             # (lo, hi) on that relative angle
    tau_max: float


@dataclass
class CharacterConfig:
    name: str
    links: list
    joints: list
    feet: list                # link indices allowed to touch the ground
    root_angle: float = 0.0
    friction: float = 1.0


def _capsule_inertia(length, radius, mass):
    """Uniform-density planar capsule: rectangle plus two end half-discs.

    The half-disc centroid offset is folded into a point mass at the capsule
    ends, which is exact enough for control purposes here.
    """
    a_rect = 2.0 * radius * length
    a_disc = np.pi * radius * radius
    total = a_rect + a_disc
    if total <= 0.0:
        raise ValueError("degenerate capsule")
    m_rect = mass * a_rect / total
    m_disc = mass - m_rect
    i_rect = m_rect * (length**2 + (2 * radius) ** 2) / 12.0
    i_disc = m_disc * (radius**2 / 2.0 + (length / 2.0) ** 2)
    return i_rect + i_disc


class Character:
    """Compiled array form of a CharacterConfig plus its default-pose builder."""

    def __init__(self, config: CharacterConfig):
        n = len(config.links)
        m = len(config.joints)
        if n < 1:
            raise ValueError("character needs at least one link")
        self.config = config
        self.mass = np.array([l.mass for l in config.links])
        self.radius = np.array([l.radius for l in config.links])
        self.half_len = np.array([l.length / 2.0 for l in config.links])
        if np.any(self.mass <= 0) or np.any(self.radius <= 0) or np.any(self.half_len < 0):
            raise ValueError("link masses and radii must be positive, lengths non-negative")
        self.inertia = np.array([_capsule_inertia(l.length, l.radius, l.mass) for l in config.links])
        self.inv_mass = 1.0 / self.mass
        self.inv_inertia = 1.0 / self.inertia

        self.jp = np.array([j.parent for j in config.joints], dtype=np.int64)
        self.jc = np.array([j.child for j in config.joints], dtype=np.int64)
        for j in config.joints:
            if not (0 <= j.parent < n and 0 <= j.child < n):
                raise ValueError(f"joint {j.name} references a missing link")
            if j.parent >= j.child:
                raise ValueError(f"joint {j.name}: links must be ordered parent before child")
            lo, hi = j.limits
            if not (lo < hi):
                raise ValueError(f"joint {j.name}: empty limit range")
            if not (lo <= j.default_angle <= hi):
                raise ValueError(f"joint {j.name}: default angle outside limits")
            if j.tau_max < 0:
                raise ValueError(f"joint {j.name}: negative torque bound")
        self.j_anchor_p = np.array([j.parent_anchor for j in config.joints], dtype=np.float64).reshape(m, 2)
        self.j_anchor_c = np.array([j.child_anchor for j in config.joints], dtype=np.float64).reshape(m, 2)
        self.j_lo = np.array([j.limits[0] for j in config.joints])
        self.j_hi = np.array([j.limits[1] for j in config.joints])
        self.j_tau = np.array([j.tau_max for j in config.joints])
        self.j_default = np.array([j.default_angle for j in config.joints])
        self.feet = list(config.feet)
        for f in self.feet:
            if not (0 <= f < n):
                raise ValueError("feet index out of range")
        self.friction = config.friction

    @property
    def n_links(self):
        return len(self.config.links)

    @property
    def n_joints(self):
        return len(self.config.joints)

    @property
    def joint_names(self):
        return [j.name for j in self.config.joints]


@dataclass
class SimState:
    pos: np.ndarray        # (n, 2) link centers
    ang: np.ndarray        # (n,) world orientation, continuous (never wrapped)
    vel: np.ndarray        # (n, 2)
    angvel: np.ndarray     # (n,)
    time: float = 0.0

    def copy(self):
        return SimState(self.pos.copy(), self.ang.copy(), self.vel.copy(), self.angvel.copy(), self.time)


@dataclass
class Contact:
    link: int
    point: tuple
    impulse: float


@dataclass
class StepResult:
    state: SimState
    applied_torque: np.ndarray   # (m,) motor torque averaged over the control step
    contacts: list               # of Contact


def _rot(theta, v):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def make_character(char: Character) -> SimState:
    """Pose the character at its default joint angles, feet on the ground.

    Link 0 is the root at x = 0; every link gets the parent's orientation plus
    the joint's default angle, positions chained so anchors coincide exactly.
    The whole figure is then shifted so its lowest surface point sits at y = 0.
    """
    n = char.n_links
    pos = np.zeros((n, 2))
    ang = np.zeros(n)
    ang[0] = char.config.root_angle
    placed = np.zeros(n, dtype=bool)
    placed[0] = True
    for j in range(char.n_joints):
        p, c = char.jp[j], char.jc[j]
        if not placed[p]:
            raise ValueError("joints must be listed so parents are placed first")
        ang[c] = ang[p] + char.j_default[j]
        pos[c] = pos[p] + _rot(ang[p], char.j_anchor_p[j]) - _rot(ang[c], char.j_anchor_c[j])
        placed[c] = True
    # lowest surface point across both capsule endpoints of every link
    low = np.inf
    for i in range(n):
        for sgn in (-1.0, 1.0):
            ey = pos[i, 1] + np.sin(ang[i]) * sgn * char.half_len[i]
            low = min(low, ey - char.radius[i])
    pos[:, 1] -= low
    return SimState(pos, ang, np.zeros((n, 2)), np.zeros(n), 0.0)


@njit(cache=True)
def _substep_kernel(pos, ang, vel, angvel,
                    inv_m, inv_i, radius, half_len,
                    jp, jc, japx, japy, jacx, jacy, jlo, jhi, jtau,
                    motor_omega, n_sub, dt, gravity, iters, beta, mu,
                    motor_impulse, cont_imp, cont_px, cont_py):
    n = pos.shape[0]
    m = jp.shape[0]
    rpx = np.empty(m); rpy = np.empty(m)
    rcx = np.empty(m); rcy = np.empty(m)
    cerrx = np.empty(m); cerry = np.empty(m)
    # impulse accumulators persist across substeps (warm starting): under
    # near-constant load each substep starts close to the converged solution,
    # which is what keeps a tall jointed chain from creeping
    lam_m = np.zeros(m); lam_lim = np.zeros(m)
    lim_side = np.zeros(m, dtype=np.int8)
    jpix = np.zeros(m); jpiy = np.zeros(m)
    c_on = np.zeros((n, 2), dtype=np.uint8)
    c_rx = np.empty((n, 2)); c_ry = np.empty((n, 2))
    c_pen = np.empty((n, 2))
    c_ln = np.zeros((n, 2)); c_lt = np.zeros((n, 2))
    c_px = np.empty((n, 2)); c_py = np.empty((n, 2))

    for _s in range(n_sub):
        for i in range(n):
            vel[i, 1] -= gravity * dt

        # joint geometry at substep start
        for j in range(m):
            p = jp[j]; c = jc[j]
            cp = np.cos(ang[p]); sp = np.sin(ang[p])
            cc = np.cos(ang[c]); sc = np.sin(ang[c])
            rpx[j] = cp * japx[j] - sp * japy[j]
            rpy[j] = sp * japx[j] + cp * japy[j]
            rcx[j] = cc * jacx[j] - sc * jacy[j]
            rcy[j] = sc * jacx[j] + cc * jacy[j]
            cerrx[j] = (pos[c, 0] + rcx[j]) - (pos[p, 0] + rpx[j])
            cerry[j] = (pos[c, 1] + rcy[j]) - (pos[p, 1] + rpy[j])
            # a limit impulse only carries over while the same side stays active
            q = ang[c] - ang[p]
            side = 0
            if q < jlo[j]:
                side = -1
            elif q > jhi[j]:
                side = 1
            if side != lim_side[j]:
                lam_lim[j] = 0.0
            lim_side[j] = side

        # ground contact candidates: the two capsule end circles of every link
        for i in range(n):
            ci = np.cos(ang[i]); si = np.sin(ang[i])
            for e in range(2):
                sgn = -1.0 if e == 0 else 1.0
                ex = pos[i, 0] + ci * sgn * half_len[i]
                ey = pos[i, 1] + si * sgn * half_len[i]
                gap = ey - radius[i]
                if gap < 0.0:
                    c_on[i, e] = 1
                    c_px[i, e] = ex
                    c_py[i, e] = ey - radius[i]
                    c_rx[i, e] = ex - pos[i, 0]
                    c_ry[i, e] = (ey - radius[i]) - pos[i, 1]
                    c_pen[i, e] = -gap
                else:
                    c_on[i, e] = 0
                    c_ln[i, e] = 0.0
                    c_lt[i, e] = 0.0

        # re-apply carried impulses at the current geometry
        for j in range(m):
            p = jp[j]; c = jc[j]
            ix = jpix[j]; iy = jpiy[j]
            vel[p, 0] -= inv_m[p] * ix
            vel[p, 1] -= inv_m[p] * iy
            angvel[p] -= inv_i[p] * (rpx[j] * iy - rpy[j] * ix)
            vel[c, 0] += inv_m[c] * ix
            vel[c, 1] += inv_m[c] * iy
            angvel[c] += inv_i[c] * (rcx[j] * iy - rcy[j] * ix)
            w_imp = lam_m[j] + lam_lim[j]
            angvel[p] -= inv_i[p] * w_imp
            angvel[c] += inv_i[c] * w_imp
        for i in range(n):
            for e in range(2):
                if c_on[i, e] == 1:
                    vel[i, 1] += inv_m[i] * c_ln[i, e]
                    angvel[i] += inv_i[i] * c_rx[i, e] * c_ln[i, e]
                    vel[i, 0] += inv_m[i] * c_lt[i, e]
                    angvel[i] += inv_i[i] * (-c_ry[i, e]) * c_lt[i, e]

        for _it in range(iters):
            # point-to-point anchor constraints with Baumgarte bias
            for j in range(m):
                p = jp[j]; c = jc[j]
                vpx = vel[p, 0] - angvel[p] * rpy[j]
                vpy = vel[p, 1] + angvel[p] * rpx[j]
                vcx = vel[c, 0] - angvel[c] * rcy[j]
                vcy = vel[c, 1] + angvel[c] * rcx[j]
                cdx = vcx - vpx + beta / dt * cerrx[j]
                cdy = vcy - vpy + beta / dt * cerry[j]
                k11 = inv_m[p] + inv_m[c] + inv_i[p] * rpy[j] * rpy[j] + inv_i[c] * rcy[j] * rcy[j]
                k12 = -inv_i[p] * rpx[j] * rpy[j] - inv_i[c] * rcx[j] * rcy[j]
                k22 = inv_m[p] + inv_m[c] + inv_i[p] * rpx[j] * rpx[j] + inv_i[c] * rcx[j] * rcx[j]
                det = k11 * k22 - k12 * k12
                if det > 0.0:
                    ix = -(k22 * cdx - k12 * cdy) / det
                    iy = -(k11 * cdy - k12 * cdx) / det
                    jpix[j] += ix
                    jpiy[j] += iy
                    vel[p, 0] -= inv_m[p] * ix
                    vel[p, 1] -= inv_m[p] * iy
                    angvel[p] -= inv_i[p] * (rpx[j] * iy - rpy[j] * ix)
                    vel[c, 0] += inv_m[c] * ix
                    vel[c, 1] += inv_m[c] * iy
                    angvel[c] += inv_i[c] * (rcx[j] * iy - rcy[j] * ix)

            for i in range(n):
                for e in range(2):
                    if c_on[i, e] == 1:
                        # normal: zero restitution, Baumgarte lift out of penetration
                        vy = vel[i, 1] + angvel[i] * c_rx[i, e]
                        kn = inv_m[i] + inv_i[i] * c_rx[i, e] * c_rx[i, e]
                        dl = -(vy - beta / dt * c_pen[i, e]) / kn
                        new = c_ln[i, e] + dl
                        if new < 0.0:
                            new = 0.0
                        dl = new - c_ln[i, e]
                        c_ln[i, e] = new
                        vel[i, 1] += inv_m[i] * dl
                        angvel[i] += inv_i[i] * c_rx[i, e] * dl
                        # Coulomb friction bounded by the normal impulse
                        vx = vel[i, 0] - angvel[i] * c_ry[i, e]
                        kt = inv_m[i] + inv_i[i] * c_ry[i, e] * c_ry[i, e]
                        dl = -vx / kt
                        cap = mu * c_ln[i, e]
                        new = c_lt[i, e] + dl
                        if new > cap:
                            new = cap
                        elif new < -cap:
                            new = -cap
                        dl = new - c_lt[i, e]
                        c_lt[i, e] = new
                        vel[i, 0] += inv_m[i] * dl
                        angvel[i] += inv_i[i] * (-c_ry[i, e]) * dl

            # motors and limits last so joint rates settle where gravity keeps
            # re-injecting velocity through the chain
            for j in range(m):
                p = jp[j]; c = jc[j]
                k_w = inv_i[p] + inv_i[c]
                if jtau[j] > 0.0 and k_w > 0.0:
                    cdot = angvel[c] - angvel[p] - motor_omega[j]
                    dl = -cdot / k_w
                    cap = jtau[j] * dt
                    new = lam_m[j] + dl
                    if new > cap:
                        new = cap
                    elif new < -cap:
                        new = -cap
                    dl = new - lam_m[j]
                    lam_m[j] = new
                    angvel[p] -= inv_i[p] * dl
                    angvel[c] += inv_i[c] * dl
                # angle limits (one side can be active at a time)
                q = ang[c] - ang[p]
                if q < jlo[j]:
                    cdot = angvel[c] - angvel[p]
                    bias = beta / dt * (q - jlo[j])
                    dl = -(cdot + bias) / k_w
                    new = lam_lim[j] + dl
                    if new < 0.0:
                        new = 0.0
                    dl = new - lam_lim[j]
                    lam_lim[j] = new
                    angvel[p] -= inv_i[p] * dl
                    angvel[c] += inv_i[c] * dl
                elif q > jhi[j]:
                    cdot = angvel[c] - angvel[p]
                    bias = beta / dt * (q - jhi[j])
                    dl = -(cdot + bias) / k_w
                    new = lam_lim[j] + dl
                    if new > 0.0:
                        new = 0.0
                    dl = new - lam_lim[j]
                    lam_lim[j] = new
                    angvel[p] -= inv_i[p] * dl
                    angvel[c] += inv_i[c] * dl

        for i in range(n):
            pos[i, 0] += vel[i, 0] * dt
            pos[i, 1] += vel[i, 1] * dt
            ang[i] += angvel[i] * dt

        # positional projection keeps anchor drift far below the contract bound
        for _pit in range(2):
            for j in range(m):
                p = jp[j]; c = jc[j]
                cp = np.cos(ang[p]); sp = np.sin(ang[p])
                cc = np.cos(ang[c]); sc = np.sin(ang[c])
                ax = cp * japx[j] - sp * japy[j]
                ay = sp * japx[j] + cp * japy[j]
                bx = cc * jacx[j] - sc * jacy[j]
                by = sc * jacx[j] + cc * jacy[j]
                ex = (pos[c, 0] + bx) - (pos[p, 0] + ax)
                ey = (pos[c, 1] + by) - (pos[p, 1] + ay)
                k11 = inv_m[p] + inv_m[c] + inv_i[p] * ay * ay + inv_i[c] * by * by
                k12 = -inv_i[p] * ax * ay - inv_i[c] * bx * by
                k22 = inv_m[p] + inv_m[c] + inv_i[p] * ax * ax + inv_i[c] * bx * bx
                det = k11 * k22 - k12 * k12
                if det > 0.0:
                    ix = -(k22 * ex - k12 * ey) / det
                    iy = -(k11 * ey - k12 * ex) / det
                    pos[p, 0] -= inv_m[p] * ix
                    pos[p, 1] -= inv_m[p] * iy
                    ang[p] -= inv_i[p] * (ax * iy - ay * ix)
                    pos[c, 0] += inv_m[c] * ix
                    pos[c, 1] += inv_m[c] * iy
                    ang[c] += inv_i[c] * (bx * iy - by * ix)

        for j in range(m):
            motor_impulse[j] += lam_m[j]
        for i in range(n):
            for e in range(2):
                if c_ln[i, e] > 0.0:
                    cont_imp[i, e] += c_ln[i, e]
                    cont_px[i, e] = c_px[i, e]
                    cont_py[i, e] = c_py[i, e]


def step(state, char, motor_omega, dt=CONTROL_DT, *, gravity=GRAVITY,
         n_substeps=N_SUBSTEPS, iters=SOLVER_ITERS) -> StepResult:
    """Advance one control period of dt seconds split into n_substeps.

    motor_omega is the target relative angular velocity per joint; the applied
    torque (clamped to each joint's bound) is returned averaged over dt.
    Pure function of its inputs: the incoming state is not modified.
    """
    motor_omega = np.asarray(motor_omega, dtype=np.float64)
    if motor_omega.shape != (char.n_joints,):
        raise ValueError(f"expected {char.n_joints} motor targets, got {motor_omega.shape}")
    pos = state.pos.copy()
    ang = state.ang.copy()
    vel = state.vel.copy()
    angvel = state.angvel.copy()
    n = char.n_links
    m = char.n_joints
    motor_impulse = np.zeros(m)
    cont_imp = np.zeros((n, 2))
    cont_px = np.zeros((n, 2))
    cont_py = np.zeros((n, 2))
    sub_dt = dt / n_substeps
    _substep_kernel(pos, ang, vel, angvel,
                    char.inv_mass, char.inv_inertia, char.radius, char.half_len,
                    char.jp, char.jc,
                    char.j_anchor_p[:, 0], char.j_anchor_p[:, 1],
                    char.j_anchor_c[:, 0], char.j_anchor_c[:, 1],
                    char.j_lo, char.j_hi, char.j_tau,
                    motor_omega, n_substeps, sub_dt, gravity, iters, BAUMGARTE, char.friction,
                    motor_impulse, cont_imp, cont_px, cont_py)
    contacts = []
    for i in range(n):
        for e in range(2):
            if cont_imp[i, e] > 0.0:
                contacts.append(Contact(i, (cont_px[i, e], cont_py[i, e]), cont_imp[i, e]))
    new_state = SimState(pos, ang, vel, angvel, state.time + dt)
    return StepResult(new_state, motor_impulse / dt, contacts)


@dataclass
class Kinematics:
    joint_angles: np.ndarray
    bone_ang_vel: np.ndarray
    bone_lin_vel: np.ndarray
    ee_pos: np.ndarray
    ee_vel: np.ndarray
    com: np.ndarray
    com_vel: np.ndarray
    root_pos: np.ndarray
    root_ang: float
    feet_center_x: float


def kinematics_query(state, char) -> Kinematics:
    """Joint angles, bone velocities, foot-tip positions, and mass aggregates."""
    q = state.ang[char.jc] - state.ang[char.jp]
    w = char.mass / char.mass.sum()
    com = (state.pos * w[:, None]).sum(axis=0)
    com_vel = (state.vel * w[:, None]).sum(axis=0)
    E = len(char.feet)
    ee_pos = np.zeros((E, 2))
    ee_vel = np.zeros((E, 2))
    for k, f in enumerate(char.feet):
        tip_local = np.array([char.half_len[f], 0.0])
        r = _rot(state.ang[f], tip_local)
        ee_pos[k] = state.pos[f] + r
        ee_vel[k] = state.vel[f] + state.angvel[f] * np.array([-r[1], r[0]])
    feet_cx = float(ee_pos[:, 0].mean()) if E else float(com[0])
    return Kinematics(q, state.angvel.copy(), state.vel.copy(), ee_pos, ee_vel,
                      com, com_vel, state.pos[0].copy(), float(state.ang[0]), feet_cx)


def joint_anchor_error(state, char):
    """Max distance between matching joint anchor points, for stability checks."""
    worst = 0.0
    for j in range(char.n_joints):
        p, c = char.jp[j], char.jc[j]
        ap = state.pos[p] + _rot(state.ang[p], char.j_anchor_p[j])
        ac = state.pos[c] + _rot(state.ang[c], char.j_anchor_c[j])
        worst = max(worst, float(np.hypot(*(ac - ap))))
    return worst


# ---------------------------------------------------------------------------
# Snapshots: versioned little-endian binary blobs, bit-exact round trip


def save_snapshot(state) -> bytes:
    n = state.pos.shape[0]
    head = SNAPSHOT_MAGIC + struct.pack("<HId", SNAPSHOT_VERSION, n, state.time)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in (state.pos, state.ang, state.vel, state.angvel))
    return head + body


def load_snapshot(blob) -> SimState:
    if len(blob) < 4 + 2 + 4 + 8 or blob[:4] != SNAPSHOT_MAGIC:
        raise ValueError("not a sim snapshot")
    version, n, time = struct.unpack_from("<HId", blob, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"snapshot version {version} not supported")
    need = 4 + 14 + 8 * (2 * n + n + 2 * n + n)
    if len(blob) != need:
        raise ValueError("snapshot length does not match link count")
    off = 18
    def take(count):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        return arr
    pos = take(2 * n).reshape(n, 2)
    ang = take(n)
    vel = take(2 * n).reshape(n, 2)
    angvel = take(n)
    return SimState(pos, ang, vel, angvel, time)


# ---------------------------------------------------------------------------
# Character JSON round trip


def config_to_json(config: CharacterConfig) -> str:
    doc = {
        "name": config.name,
        "root_angle": config.root_angle,
        "friction": config.friction,
        "links": [{"name": l.name, "length": l.length, "radius": l.radius, "mass": l.mass}
                  for l in config.links],
        "joints": [{"name": j.name, "parent": j.parent, "child": j.child,
                    "parent_anchor": list(j.parent_anchor), "child_anchor": list(j.child_anchor),
                    "default_angle": j.default_angle, "limits": list(j.limits), "tau_max": j.tau_max}
                   for j in config.joints],
        "feet": list(config.feet),
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def config_from_json(text: str) -> CharacterConfig:
    doc = json.loads(text)
    try:
        return CharacterConfig(
            name=doc["name"],
            links=[LinkSpec(l["name"], float(l["length"]), float(l["radius"]), float(l["mass"]))
                   for l in doc["links"]],
            joints=[JointSpec(j["name"], int(j["parent"]), int(j["child"]),
                              tuple(j["parent_anchor"]), tuple(j["child_anchor"]),
                              float(j["default_angle"]), tuple(j["limits"]), float(j["tau_max"]))
                    for j in doc["joints"]],
            feet=[int(f) for f in doc["feet"]],
            root_angle=float(doc.get("root_angle", 0.0)),
            friction=float(doc.get("friction", 1.0)),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed character document: {exc}") from exc
