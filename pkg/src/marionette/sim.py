"""Deterministic planar articulated-character simulator.

The character is a 7-link side-view biped: torso, two 2-link legs whose lower
links carry heel+toe foot segments, and two single-link arms. Joints are
PD-driven 1-DOF systems with gravity load; the root rigid body integrates
gravity, penalty ground contact with a Coulomb-capped friction force at ten
body points, reaction torques from torso-attached joints, and angular
damping. Everything is float64 and bit-deterministic for identical inputs.

Internally all kinematics and dynamics are batched over a leading lane axis
so many environment instances step in lockstep; the single-state API wraps a
batch of one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

G_DEFAULT = 9.81
DT_DEFAULT = 1.0 / 60.0

# link indices
TORSO, ULEG_L, LLEG_L, ULEG_R, LLEG_R, ARM_L, ARM_R = range(7)
# joint indices
HIP_L, KNEE_L_J, HIP_R, KNEE_R_J, SH_L, SH_R = range(6)
N_JOINTS = 6

# body point indices (FK output)
P_ROOT, P_TOP, P_KNEE_L, P_HEEL_L, P_TOE_L, P_KNEE_R, P_HEEL_R, P_TOE_R, P_HAND_L, P_HAND_R = range(10)
N_POINTS = 10
FALL_POINTS = np.array([P_ROOT, P_TOP, P_KNEE_L, P_KNEE_R, P_HAND_L, P_HAND_R])
EE_POINTS = np.array([P_TOE_L, P_TOE_R, P_HAND_L, P_HAND_R])
FOOT_POINTS = np.array([P_HEEL_L, P_TOE_L, P_HEEL_R, P_TOE_R])

# observation layout (per frame)
OBS_ROOT_HEIGHT = 0
OBS_TILT = slice(1, 3)
OBS_VEL_LOCAL = slice(3, 5)
OBS_ANGVEL = 5
OBS_JOINT_ANGLES = slice(6, 12)
OBS_JOINT_VELS = slice(12, 18)
OBS_EE_LOCAL = slice(18, 26)
OBS_DIM = 26
# entries kept by the motion-quality metrics (velocities dropped)
OBS_POSE_INDICES = np.array([0, 1, 2] + list(range(6, 12)) + list(range(18, 26)))

# velocity entries are divided by characteristic scales so every observation
# component lands in O(1) range; pose entries stay in physical units
OBS_SCALE = np.ones(26)
OBS_SCALE[3:5] = 5.0     # root velocity
OBS_SCALE[5] = 10.0      # root angular velocity
OBS_SCALE[12:18] = 10.0  # joint velocities

WINDOW_FRAMES = 5
WINDOW_STRIDE = 8
HISTORY_SIZE = 40
WINDOW_AGES = np.array([32, 24, 16, 8, 0])
WINDOW_DIM = WINDOW_FRAMES * OBS_DIM


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class CharacterModel:
    """Planar biped description; lengths in meters, masses in kg."""

    link_count: int = 7
    link_lengths: tuple = (0.60, 0.42, 0.45, 0.42, 0.45, 0.55, 0.55)
    link_masses: tuple = (28.0, 7.0, 4.5, 7.0, 4.5, 3.2, 3.2)
    joint_limits: tuple = (
        (-1.4, 1.4),   # left hip
        (-2.4, 0.0),   # left knee
        (-1.4, 1.4),   # right hip
        (-2.4, 0.0),   # right knee
        (-2.9, 2.9),   # left shoulder
        (-2.9, 2.9),   # right shoulder
    )
    pd_gains: tuple = (
        (500.0, 40.0),
        (350.0, 16.0),
        (500.0, 40.0),
        (350.0, 16.0),
        (120.0, 9.0),
        (120.0, 9.0),
    )
    foot_link_ids: tuple = (LLEG_L, LLEG_R)

    def __post_init__(self):
        if self.link_count != 7:
            raise SimError(f"this simulator models exactly 7 links, got {self.link_count}")
        if len(self.link_lengths) != 7 or any(l <= 0 for l in self.link_lengths):
            raise SimError("link_lengths must be 7 positive values")
        if len(self.link_masses) != 7 or any(m <= 0 for m in self.link_masses):
            raise SimError("link_masses must be 7 positive values")
        if len(self.joint_limits) != N_JOINTS:
            raise SimError(f"need {N_JOINTS} joint limits")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise SimError(f"joint limit lo must be < hi, got ({lo}, {hi})")
        if len(self.pd_gains) != N_JOINTS:
            raise SimError(f"need {N_JOINTS} pd gain pairs")
        if not self.foot_link_ids:
            raise SimError("foot_link_ids must be nonempty")
        if not set(self.foot_link_ids) <= set(range(7)):
            raise SimError("foot_link_ids outside valid link indices")
        object.__setattr__(self, "link_lengths", tuple(float(x) for x in self.link_lengths))
        object.__setattr__(self, "link_masses", tuple(float(x) for x in self.link_masses))
        object.__setattr__(self, "joint_limits",
                           tuple((float(a), float(b)) for a, b in self.joint_limits))
        object.__setattr__(self, "pd_gains",
                           tuple((float(a), float(b)) for a, b in self.pd_gains))
        object.__setattr__(self, "foot_link_ids", tuple(int(i) for i in self.foot_link_ids))

    @property
    def joint_count(self):
        return N_JOINTS

    def standing_root_height(self):
        return self.link_lengths[ULEG_L] + self.link_lengths[LLEG_L]

    def to_dict(self):
        return {
            "link_count": self.link_count,
            "link_lengths": list(self.link_lengths),
            "link_masses": list(self.link_masses),
            "joint_limits": [list(p) for p in self.joint_limits],
            "pd_gains": [list(p) for p in self.pd_gains],
            "foot_link_ids": list(self.foot_link_ids),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                link_count=int(d["link_count"]),
                link_lengths=tuple(d["link_lengths"]),
                link_masses=tuple(d["link_masses"]),
                joint_limits=tuple(tuple(p) for p in d["joint_limits"]),
                pd_gains=tuple(tuple(p) for p in d["pd_gains"]),
                foot_link_ids=tuple(d["foot_link_ids"]),
            )
        except KeyError as exc:
            raise SimError(f"character model missing field {exc.args[0]!r}") from None

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SimParams:
    """Contact/integration constants; the paper-silent knobs, all exposed."""

    dt: float = DT_DEFAULT
    gravity: float = G_DEFAULT
    contact_stiffness: float = 30000.0
    contact_damping: float = 600.0
    friction_mu: float = 1.2
    tangent_stiffness: float = 1400.0
    angular_damping: float = 22.0
    upright_stiffness: float = 240.0
    upright_support_floor: float = 0.15
    reaction_scale: float = 0.3
    joint_gravity_scale: float = 1.0
    heel_length: float = 0.09
    toe_length: float = 0.16
    joint_inertia_floor: float = 0.05
    root_inertia_floor: float = 0.8
    max_joint_speed: float = 40.0
    max_root_speed: float = 25.0
    max_root_spin: float = 40.0
    contact_tol: float = 0.05

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class SimState:
    """Full dynamic state of one character instance."""

    root_position: np.ndarray          # (2,)
    root_angle: float
    root_velocity: np.ndarray          # (2,)
    root_angular_velocity: float
    joint_angles: np.ndarray           # (6,)
    joint_velocities: np.ndarray       # (6,)
    time: float = 0.0

    def copy(self):
        return SimState(
            root_position=self.root_position.copy(),
            root_angle=float(self.root_angle),
            root_velocity=self.root_velocity.copy(),
            root_angular_velocity=float(self.root_angular_velocity),
            joint_angles=self.joint_angles.copy(),
            joint_velocities=self.joint_velocities.copy(),
            time=float(self.time),
        )

    def is_finite(self):
        return bool(
            np.isfinite(self.root_position).all()
            and np.isfinite(self.root_angle)
            and np.isfinite(self.root_velocity).all()
            and np.isfinite(self.root_angular_velocity)
            and np.isfinite(self.joint_angles).all()
            and np.isfinite(self.joint_velocities).all()
        )


@dataclass
class Action:
    """PD joint-angle targets, clamped to the model's joint limits."""

    target_joint_angles: np.ndarray

    def clamped(self, model: CharacterModel):
        lims = np.asarray(model.joint_limits)
        return np.clip(np.asarray(self.target_joint_angles, dtype=np.float64),
                       lims[:, 0], lims[:, 1])


class BatchState:
    """Struct-of-arrays state for N lanes stepping in lockstep."""

    __slots__ = ("pos", "angle", "vel", "angvel", "q", "qd", "time")

    def __init__(self, n):
        self.pos = np.zeros((n, 2))
        self.angle = np.zeros(n)
        self.vel = np.zeros((n, 2))
        self.angvel = np.zeros(n)
        self.q = np.zeros((n, N_JOINTS))
        self.qd = np.zeros((n, N_JOINTS))
        self.time = np.zeros(n)

    @property
    def n(self):
        return self.pos.shape[0]

    @classmethod
    def from_states(cls, states):
        b = cls(len(states))
        for i, s in enumerate(states):
            b.set_lane(i, s)
        return b

    def set_lane(self, i, s: SimState):
        self.pos[i] = s.root_position
        self.angle[i] = s.root_angle
        self.vel[i] = s.root_velocity
        self.angvel[i] = s.root_angular_velocity
        self.q[i] = s.joint_angles
        self.qd[i] = s.joint_velocities
        self.time[i] = s.time

    def lane(self, i) -> SimState:
        return SimState(
            root_position=self.pos[i].copy(),
            root_angle=float(self.angle[i]),
            root_velocity=self.vel[i].copy(),
            root_angular_velocity=float(self.angvel[i]),
            joint_angles=self.q[i].copy(),
            joint_velocities=self.qd[i].copy(),
            time=float(self.time[i]),
        )


def _perp(d):
    out = np.empty_like(d)
    out[..., 0] = -d[..., 1]
    out[..., 1] = d[..., 0]
    return out


def fk_points(batch: BatchState, model: CharacterModel, params: SimParams):
    """Forward kinematics for all lanes.

    Returns (points (N,10,2), point_velocities (N,10,2), coms (N,7,2)).
    """
    L = model.link_lengths
    n = batch.n
    theta = batch.angle
    q = batch.q
    qd = batch.qd

    pts = np.empty((n, N_POINTS, 2))
    vels = np.empty((n, N_POINTS, 2))
    coms = np.empty((n, 7, 2))

    root = batch.pos
    vroot = batch.vel
    w0 = batch.angvel[:, None]

    up = np.stack([-np.sin(theta), np.cos(theta)], axis=1)
    top = root + L[TORSO] * up
    pts[:, P_ROOT] = root
    pts[:, P_TOP] = top
    vels[:, P_ROOT] = vroot
    vels[:, P_TOP] = vroot + w0 * _perp(top - root)
    coms[:, TORSO] = root + 0.5 * L[TORSO] * up

    for side, (hip_j, knee_j, p_knee, p_heel, p_toe, uleg, lleg) in enumerate(
        ((HIP_L, KNEE_L_J, P_KNEE_L, P_HEEL_L, P_TOE_L, ULEG_L, LLEG_L),
         (HIP_R, KNEE_R_J, P_KNEE_R, P_HEEL_R, P_TOE_R, ULEG_R, LLEG_R))
    ):
        th_u = theta + q[:, hip_j]
        w_u = batch.angvel + qd[:, hip_j]
        dir_u = np.stack([np.sin(th_u), -np.cos(th_u)], axis=1)
        knee = root + L[uleg] * dir_u
        v_knee = vroot + w_u[:, None] * _perp(knee - root)
        pts[:, p_knee] = knee
        vels[:, p_knee] = v_knee
        coms[:, uleg] = root + 0.5 * L[uleg] * dir_u

        th_l = th_u + q[:, knee_j]
        w_l = w_u + qd[:, knee_j]
        dir_l = np.stack([np.sin(th_l), -np.cos(th_l)], axis=1)
        ankle = knee + L[lleg] * dir_l
        fdir = np.stack([np.cos(th_l), np.sin(th_l)], axis=1)
        heel = ankle - params.heel_length * fdir
        toe = ankle + params.toe_length * fdir
        pts[:, p_heel] = heel
        pts[:, p_toe] = toe
        vels[:, p_heel] = v_knee + w_l[:, None] * _perp(heel - knee)
        vels[:, p_toe] = v_knee + w_l[:, None] * _perp(toe - knee)
        coms[:, lleg] = knee + 0.5 * L[lleg] * dir_l

    for sh_j, p_hand, arm in ((SH_L, P_HAND_L, ARM_L), (SH_R, P_HAND_R, ARM_R)):
        th_a = theta + q[:, sh_j]
        w_a = batch.angvel + qd[:, sh_j]
        dir_a = np.stack([np.sin(th_a), -np.cos(th_a)], axis=1)
        hand = top + L[arm] * dir_a
        pts[:, p_hand] = hand
        vels[:, p_hand] = vels[:, P_TOP] + w_a[:, None] * _perp(hand - top)
        coms[:, arm] = top + 0.5 * L[arm] * dir_a

    return pts, vels, coms


def _joint_inertias(model: CharacterModel, params: SimParams):
    L, m = model.link_lengths, model.link_masses
    i_hip_l = m[ULEG_L] * (0.5 * L[ULEG_L]) ** 2 + m[LLEG_L] * (L[ULEG_L] + 0.5 * L[LLEG_L]) ** 2
    i_knee_l = m[LLEG_L] * (0.5 * L[LLEG_L]) ** 2
    i_hip_r = m[ULEG_R] * (0.5 * L[ULEG_R]) ** 2 + m[LLEG_R] * (L[ULEG_R] + 0.5 * L[LLEG_R]) ** 2
    i_knee_r = m[LLEG_R] * (0.5 * L[LLEG_R]) ** 2
    i_sh_l = m[ARM_L] * (0.5 * L[ARM_L]) ** 2
    i_sh_r = m[ARM_R] * (0.5 * L[ARM_R]) ** 2
    return np.maximum(
        np.array([i_hip_l, i_knee_l, i_hip_r, i_knee_r, i_sh_l, i_sh_r]),
        params.joint_inertia_floor,
    )


def step_batch(batch: BatchState, targets: np.ndarray, model: CharacterModel,
               params: SimParams) -> None:
    """Advance every lane by one dt in place. ``targets`` is (N, 6), already
    expected in radians; PD targets are clamped to joint limits here."""
    L = np.asarray(model.link_lengths)
    masses = np.asarray(model.link_masses)
    total_mass = masses.sum()
    lims = np.asarray(model.joint_limits)
    gains = np.asarray(model.pd_gains)
    inertias = _joint_inertias(model, params)
    g = params.gravity
    dt = params.dt

    tgt = np.clip(targets, lims[:, 0], lims[:, 1])
    tau_pd = gains[:, 0] * (tgt - batch.q) - gains[:, 1] * batch.qd

    pts, vels, coms = fk_points(batch, model, params)

    # penalty contact with viscous friction capped by a Coulomb cone
    pen = np.minimum(pts[:, :, 1], 0.0)
    touching = pen < 0.0
    fn = np.where(
        touching,
        -params.contact_stiffness * pen - params.contact_damping * vels[:, :, 1],
        0.0,
    )
    fn = np.maximum(fn, 0.0)
    ft_raw = -params.tangent_stiffness * vels[:, :, 0]
    cap = params.friction_mu * fn
    ft = np.where(touching, np.clip(ft_raw, -cap, cap), 0.0)
    fcontact = np.stack([ft, fn], axis=2)

    # joint gravity load (generalized force, sin of absolute link angle)
    th_ul_l = batch.angle + batch.q[:, HIP_L]
    th_ll_l = th_ul_l + batch.q[:, KNEE_L_J]
    th_ul_r = batch.angle + batch.q[:, HIP_R]
    th_ll_r = th_ul_r + batch.q[:, KNEE_R_J]
    th_a_l = batch.angle + batch.q[:, SH_L]
    th_a_r = batch.angle + batch.q[:, SH_R]
    gs = params.joint_gravity_scale * g
    tau_grav = np.stack(
        [
            -gs * (masses[ULEG_L] * 0.5 * L[ULEG_L] * np.sin(th_ul_l)
                   + masses[LLEG_L] * (L[ULEG_L] * np.sin(th_ul_l)
                                       + 0.5 * L[LLEG_L] * np.sin(th_ll_l))),
            -gs * masses[LLEG_L] * 0.5 * L[LLEG_L] * np.sin(th_ll_l),
            -gs * (masses[ULEG_R] * 0.5 * L[ULEG_R] * np.sin(th_ul_r)
                   + masses[LLEG_R] * (L[ULEG_R] * np.sin(th_ul_r)
                                       + 0.5 * L[LLEG_R] * np.sin(th_ll_r))),
            -gs * masses[LLEG_R] * 0.5 * L[LLEG_R] * np.sin(th_ll_r),
            -gs * masses[ARM_L] * 0.5 * L[ARM_L] * np.sin(th_a_l),
            -gs * masses[ARM_R] * 0.5 * L[ARM_R] * np.sin(th_a_r),
        ],
        axis=1,
    )

    # root linear dynamics
    force = fcontact.sum(axis=1)
    force[:, 1] -= total_mass * g

    # Root angular dynamics. Contact forces reaching the root through a pin
    # joint transmit no moment: leg-point contacts act at the hip (zero
    # lever), hand contacts act at the shoulder anchor, torso points at
    # their own position. Plus gravity torque about the root, reaction from
    # torso-attached joints, an upright restoring torque, and damping.
    rel = pts - batch.pos[:, None, :]
    lever = rel.copy()
    lever[:, (P_KNEE_L, P_HEEL_L, P_TOE_L, P_KNEE_R, P_HEEL_R, P_TOE_R), :] = 0.0
    top_rel = rel[:, P_TOP]
    lever[:, P_HAND_L] = top_rel
    lever[:, P_HAND_R] = top_rel
    torque_contact = (lever[:, :, 0] * fcontact[:, :, 1] - lever[:, :, 1] * fcontact[:, :, 0]).sum(axis=1)
    com_rel = coms - batch.pos[:, None, :]
    torque_grav = (-(masses[None, :] * g) * com_rel[:, :, 0]).sum(axis=1)
    reaction = -params.reaction_scale * (
        tau_pd[:, HIP_L] + tau_pd[:, HIP_R] + tau_pd[:, SH_L] + tau_pd[:, SH_R]
    )
    inertia_root = (masses[None, :] * ((com_rel**2).sum(axis=2) + (L**2)[None, :] / 12.0)).sum(axis=1)
    inertia_root = inertia_root + params.root_inertia_floor
    # balance reflex only works while the feet carry weight; a character that
    # keeps its feet unloaded (legs tucked, airborne too long) tips over
    support = np.minimum(fn[:, FOOT_POINTS].sum(axis=1) / (total_mass * g), 1.0)
    upright_gain = params.upright_support_floor + (1.0 - params.upright_support_floor) * support
    torque = (
        torque_contact
        + torque_grav
        + reaction
        - params.upright_stiffness * upright_gain * np.sin(batch.angle)
        - params.angular_damping * batch.angvel
    )

    # semi-implicit Euler, joints then root
    batch.qd += (tau_pd + tau_grav) / inertias * dt
    np.clip(batch.qd, -params.max_joint_speed, params.max_joint_speed, out=batch.qd)
    batch.q += batch.qd * dt

    batch.vel += force / total_mass * dt
    np.clip(batch.vel, -params.max_root_speed, params.max_root_speed, out=batch.vel)
    batch.angvel += torque / inertia_root * dt
    np.clip(batch.angvel, -params.max_root_spin, params.max_root_spin, out=batch.angvel)
    batch.pos += batch.vel * dt
    batch.angle += batch.angvel * dt
    batch.time += dt


def step(state: SimState, action: Action, model: CharacterModel,
         params: SimParams | None = None) -> SimState:
    """Single-instance step; a batch of one lane under the hood."""
    if params is None:
        params = SimParams()
    if params.dt <= 0:
        raise SimError(f"dt must be positive, got {params.dt}")
    if not state.is_finite():
        raise SimError("non-finite simulation state rejected")
    batch = BatchState.from_states([state])
    step_batch(batch, action.clamped(model)[None, :], model, params)
    out = batch.lane(0)
    if not out.is_finite():
        raise SimError("simulation produced a non-finite state")
    return out


def fall_flags(batch: BatchState, model: CharacterModel, params: SimParams) -> np.ndarray:
    pts, _, _ = fk_points(batch, model, params)
    return (pts[:, FALL_POINTS, 1] < params.contact_tol).any(axis=1)


def detect_fall(state: SimState, model: CharacterModel,
                params: SimParams | None = None) -> bool:
    """True iff any non-foot body point is within tolerance of the ground."""
    if params is None:
        params = SimParams()
    batch = BatchState.from_states([state])
    return bool(fall_flags(batch, model, params)[0])


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


def observation_batch(batch: BatchState, model: CharacterModel,
                      params: SimParams) -> np.ndarray:
    """Per-lane observation frames, shape (N, OBS_DIM)."""
    pts, _, _ = fk_points(batch, model, params)
    n = batch.n
    obs = np.empty((n, OBS_DIM))
    c, s = np.cos(batch.angle), np.sin(batch.angle)
    obs[:, OBS_ROOT_HEIGHT] = batch.pos[:, 1]
    obs[:, 1] = s
    obs[:, 2] = c
    # world -> root frame rotation R(-theta)
    vx, vy = batch.vel[:, 0], batch.vel[:, 1]
    obs[:, 3] = c * vx + s * vy
    obs[:, 4] = -s * vx + c * vy
    obs[:, OBS_ANGVEL] = batch.angvel
    obs[:, OBS_JOINT_ANGLES] = batch.q
    obs[:, OBS_JOINT_VELS] = batch.qd
    rel = pts[:, EE_POINTS] - batch.pos[:, None, :]
    ex = c[:, None] * rel[:, :, 0] + s[:, None] * rel[:, :, 1]
    ey = -s[:, None] * rel[:, :, 0] + c[:, None] * rel[:, :, 1]
    obs[:, OBS_EE_LOCAL] = np.stack([ex, ey], axis=2).reshape(n, -1)
    obs /= OBS_SCALE
    return obs


def observation_frame(state: SimState, model: CharacterModel,
                      params: SimParams | None = None) -> np.ndarray:
    if params is None:
        params = SimParams()
    return observation_batch(BatchState.from_states([state]), model, params)[0]


def observe(history) -> np.ndarray:
    """Build the policy window from a chronological frame sequence.

    Picks frames at ages {32, 24, 16, 8, 0} steps behind the newest, clamped
    to the oldest frame when the history is shorter. Returns a (5, OBS_DIM)
    array ordered oldest to newest.
    """
    frames = list(history)
    if not frames:
        raise SimError("observe needs at least one frame of history")
    n = len(frames)
    out = np.empty((WINDOW_FRAMES, OBS_DIM))
    for k, age in enumerate(WINDOW_AGES):
        out[k] = frames[max(0, n - 1 - int(age))]
    return out


class ObsHistory:
    """Fixed-size ring of recent observation frames per lane."""

    def __init__(self, n_env):
        self.buf = np.zeros((n_env, HISTORY_SIZE, OBS_DIM))
        self.len = np.zeros(n_env, dtype=np.intp)
        self.head = np.zeros(n_env, dtype=np.intp)
        self._rows = np.arange(n_env)[:, None]

    def reset_lane(self, i):
        self.len[i] = 0
        self.head[i] = 0

    def push(self, frames):
        self.buf[self._rows[:, 0], self.head] = frames
        self.head = (self.head + 1) % HISTORY_SIZE
        np.minimum(self.len + 1, HISTORY_SIZE, out=self.len)

    def windows(self) -> np.ndarray:
        """(N, WINDOW_DIM) stacked oldest-to-newest window per lane."""
        ages = np.minimum(WINDOW_AGES[None, :], self.len[:, None] - 1)
        slots = (self.head[:, None] - 1 - ages) % HISTORY_SIZE
        return self.buf[self._rows, slots].reshape(self.buf.shape[0], WINDOW_DIM)

    def recent(self, k) -> np.ndarray:
        """(N, k*OBS_DIM) last k frames oldest-to-newest (clamp-padded)."""
        ages = np.minimum(np.arange(k - 1, -1, -1)[None, :], self.len[:, None] - 1)
        slots = (self.head[:, None] - 1 - ages) % HISTORY_SIZE
        return self.buf[self._rows, slots].reshape(self.buf.shape[0], k * OBS_DIM)


# ---------------------------------------------------------------------------
# clip-frame helpers
# ---------------------------------------------------------------------------


def clip_frame_velocities(root: np.ndarray, joints: np.ndarray, fps: float):
    """Finite-difference velocities for every clip frame.

    Central differences inside, single-sided at the boundaries. Returns
    (root_vel (F,2), root_angvel (F,), joint_vel (F,J)).
    """
    f = root.shape[0]
    if f == 1:
        return np.zeros((1, 2)), np.zeros(1), np.zeros_like(joints)
    full = np.concatenate([root, joints], axis=1)
    vel = np.empty_like(full)
    vel[1:-1] = (full[2:] - full[:-2]) * (fps / 2.0)
    vel[0] = (full[1] - full[0]) * fps
    vel[-1] = (full[-1] - full[-2]) * fps
    return vel[:, 0:2], vel[:, 2], vel[:, 3:]


def state_from_clip_arrays(root: np.ndarray, joints: np.ndarray, fps: float,
                           frame_index: int) -> SimState:
    f = root.shape[0]
    if not 0 <= frame_index < f:
        raise SimError(f"frame index {frame_index} out of range [0, {f})")
    rv, av, jv = clip_frame_velocities(root, joints, fps)
    return SimState(
        root_position=root[frame_index, 0:2].copy(),
        root_angle=float(root[frame_index, 2]),
        root_velocity=rv[frame_index].copy(),
        root_angular_velocity=float(av[frame_index]),
        joint_angles=joints[frame_index].copy(),
        joint_velocities=jv[frame_index].copy(),
        time=frame_index / fps,
    )


def reset_from_frame(clip, frame_index: int) -> SimState:
    """Pose and finite-difference velocities copied from a clip frame."""
    return state_from_clip_arrays(clip.root, clip.joints, clip.fps, frame_index)


def batch_from_clip(root: np.ndarray, joints: np.ndarray, fps: float) -> BatchState:
    """All clip frames as one batch (used to synthesize reference features)."""
    f = root.shape[0]
    b = BatchState(f)
    b.pos = root[:, 0:2].copy()
    b.angle = root[:, 2].copy()
    rv, av, jv = clip_frame_velocities(root, joints, fps)
    b.vel = rv
    b.angvel = av
    b.q = joints.copy()
    b.qd = jv
    b.time = np.arange(f) / fps
    return b


def default_standing_state(model: CharacterModel, settle=0.0) -> SimState:
    """Canonical standing pose: straight legs, arms hanging, feet on ground."""
    return SimState(
        root_position=np.array([0.0, model.standing_root_height() - 0.012]),
        root_angle=0.0,
        root_velocity=np.zeros(2),
        root_angular_velocity=0.0,
        joint_angles=np.zeros(N_JOINTS),
        joint_velocities=np.zeros(N_JOINTS),
        time=float(settle),
    )
