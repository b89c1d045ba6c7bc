"""Procedural motion clips: generation, captions, curation, and file I/O.

Each skill is a parameterized family of smooth joint-target curves. A clip is
produced by replaying those targets through the simulator from a settled
standing state and recording the resulting poses, so every clip is physically
trackable by construction. Captions come from per-skill template pools with
slot randomization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import sim
from .sim import CharacterModel, SimParams

FPS_DEFAULT = 60.0


class MotionError(ValueError):
    pass


@dataclass(frozen=True)
class MotionClip:
    """Kinematic reference: per-frame character pose plus caption set."""

    id: str
    fps: float
    root: np.ndarray     # (F, 3): x, y, angle
    joints: np.ndarray   # (F, 6)
    captions: tuple
    skill_tag: str

    def __post_init__(self):
        object.__setattr__(self, "root", np.asarray(self.root, dtype=np.float64))
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=np.float64))
        object.__setattr__(self, "captions", tuple(self.captions))
        if not self.captions:
            raise MotionError(f"clip {self.id!r} needs at least one caption")
        if self.root.ndim != 2 or self.root.shape[1] != 3:
            raise MotionError(f"clip {self.id!r} root must be (F, 3)")
        if self.joints.shape != (self.root.shape[0], sim.N_JOINTS):
            raise MotionError(f"clip {self.id!r} joints must be (F, {sim.N_JOINTS})")
        if not (np.isfinite(self.root).all() and np.isfinite(self.joints).all()):
            raise MotionError(f"clip {self.id!r}: non-finite pose")

    @property
    def n_frames(self):
        return self.root.shape[0]

    @property
    def duration(self):
        return self.n_frames / self.fps

    def __eq__(self, other):
        return (
            isinstance(other, MotionClip)
            and self.id == other.id
            and self.fps == other.fps
            and self.skill_tag == other.skill_tag
            and self.captions == other.captions
            and np.array_equal(self.root, other.root)
            and np.array_equal(self.joints, other.joints)
        )


@dataclass
class Dataset:
    clips: list = field(default_factory=list)
    rejected: list = field(default_factory=list)   # (clip id, reason)

    def __post_init__(self):
        ids = [c.id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise MotionError("duplicate clip ids in dataset")
        bad = set(i for i, _ in self.rejected) & set(ids)
        if bad:
            raise MotionError(f"clips both kept and rejected: {sorted(bad)}")

    def by_id(self, clip_id):
        for c in self.clips:
            if c.id == clip_id:
                return c
        raise KeyError(clip_id)


# ---------------------------------------------------------------------------
# gait catalogue
# ---------------------------------------------------------------------------


def _pulse(x):
    # one-sided C1 bump train with period 1 on x
    return np.maximum(0.0, np.sin(2.0 * np.pi * x)) ** 2


def _stride_targets(t, p, direction):
    w = 2.0 * np.pi * p["freq"]
    ph = w * t
    delta = -0.4 if direction > 0 else 0.8
    hl = p["amp"] * np.sin(ph)
    hr = p["amp"] * np.sin(ph + np.pi)
    kl = -p["knee"] * 0.5 * (1.0 + np.cos(ph - delta))
    kr = -p["knee"] * 0.5 * (1.0 + np.cos(ph + np.pi - delta))
    sl = p["arm"] * np.sin(ph + np.pi)
    sr = p["arm"] * np.sin(ph)
    return np.stack([hl, kl, hr, kr, sl, sr], axis=-1)


def _walk(t, p):
    return _stride_targets(t, p, +1)


def _walk_backward(t, p):
    return _stride_targets(t, p, -1)


def _jog(t, p):
    return _stride_targets(t, p, +1)


def _crouch(t, p):
    u = 0.5 * (1.0 - np.cos(2.0 * np.pi * p["freq"] * t))
    hip = p["depth_hip"] * u
    knee = -p["depth_knee"] * u
    sh = 0.25 * u
    z = np.zeros_like(u)
    return np.stack([hip, knee, hip, knee, sh, sh], axis=-1)


def _wave(t, p):
    lift = p["lift"] + p["amp"] * np.sin(2.0 * np.pi * p["freq"] * t)
    sway = 0.05 * np.sin(2.0 * np.pi * 0.5 * t)
    z = np.zeros_like(t) if np.ndim(t) else 0.0
    hl = 0.03 * np.sin(2.0 * np.pi * 0.4 * t)
    kl = -0.06 * (1.0 + np.sin(2.0 * np.pi * 0.4 * t)) * 0.5
    if p["side"] > 0:
        sl, sr = sway, lift
    else:
        sl, sr = lift, sway
    return np.stack([hl, kl, hl, kl, np.broadcast_to(sl, np.shape(lift)),
                     np.broadcast_to(sr, np.shape(lift))], axis=-1)


def _kick(t, p):
    x = p["freq"] * t
    pulse = _pulse(x)
    hip_k = p["height"] * pulse
    knee_k = -p["chamber"] * _pulse(x + 0.12)
    hip_s = -0.18 * pulse
    knee_s = -0.05 * pulse
    arm_a = 0.45 * pulse
    if p["side"] > 0:
        return np.stack([hip_s, knee_s, hip_k, knee_k, arm_a, -0.3 * pulse], axis=-1)
    return np.stack([hip_k, knee_k, hip_s, knee_s, -0.3 * pulse, arm_a], axis=-1)


def _spin_in_place(t, p):
    ph = 2.0 * np.pi * p["freq"] * t
    hip = p["amp"] * np.sin(ph)
    knee = -p["amp"] * 0.6 * (1.0 + np.cos(ph)) * 0.5
    sh = -p["arm"] * np.sin(ph)
    return np.stack([hip, knee, hip, knee, sh, sh], axis=-1)


def _jump(t, p):
    x = p["freq"] * t
    charge = np.maximum(0.0, np.sin(2.0 * np.pi * x)) ** p["sharp"]
    hip = p["depth_hip"] * charge
    knee = -p["depth_knee"] * charge
    sh = -0.7 * charge
    return np.stack([hip, knee, hip, knee, sh, sh], axis=-1)


def _idle_sway(t, p):
    ph = 2.0 * np.pi * p["freq"] * t
    hip = p["amp"] * np.sin(ph)
    knee = -p["amp"] * 0.8 * (1.0 + np.sin(ph)) * 0.5
    sh = p["arm"] * np.sin(ph + 0.7)
    return np.stack([hip, knee, -hip, knee, sh, -sh], axis=-1)


def _punch(t, p):
    x = p["freq"] * t
    jab_l = p["reach"] * _pulse(x)
    jab_r = p["reach"] * _pulse(x + 0.5)
    stance_l = np.full_like(jab_l, 0.14)
    stance_r = np.full_like(jab_l, -0.14)
    knee = np.full_like(jab_l, -0.12)
    return np.stack([stance_l, knee, stance_r, knee, jab_l, jab_r], axis=-1)


def _u(rng, lo, hi):
    return float(rng.uniform(lo, hi))


SKILLS = {
    "walk": {
        "fn": _walk,
        "params": lambda rng: {"amp": _u(rng, 0.40, 0.55), "freq": _u(rng, 0.85, 1.15),
                               "knee": _u(rng, 0.45, 0.62), "arm": _u(rng, 0.18, 0.30)},
        "templates": [
            "a person is walking forward",
            "the man walks ahead {adv}",
            "someone strides forward {adv}",
            "a person walks in a straight line",
            "the person is walking {adv} across the ground",
            "a man walks forward at an even pace",
        ],
    },
    "walk-backward": {
        "fn": _walk_backward,
        "params": lambda rng: {"amp": _u(rng, 0.38, 0.50), "freq": _u(rng, 0.75, 1.0),
                               "knee": _u(rng, 0.42, 0.55), "arm": _u(rng, 0.15, 0.25)},
        "templates": [
            "a person is walking backwards {adv}",
            "the man walks backward",
            "someone steps backwards without turning around",
            "a person retreats backwards {adv}",
            "the person walks in reverse",
        ],
    },
    "jog": {
        "fn": _jog,
        "params": lambda rng: {"amp": _u(rng, 0.46, 0.58), "freq": _u(rng, 1.25, 1.55),
                               "knee": _u(rng, 0.75, 1.0), "arm": _u(rng, 0.3, 0.4)},
        "templates": [
            "a person is jogging {adv}",
            "the man jogs forward",
            "someone runs forward at a light pace",
            "a person is running {adv}",
            "the person jogs ahead in a straight line",
        ],
    },
    "crouch": {
        "fn": _crouch,
        "params": lambda rng: {"freq": _u(rng, 0.28, 0.40), "depth_hip": _u(rng, 0.62, 0.80),
                               "depth_knee": _u(rng, 1.05, 1.35)},
        "templates": [
            "a man crouches down on the ground",
            "a person squats down low and stands back up",
            "the person crouches down then rises",
            "someone bends their knees into a deep crouch",
            "a person lowers into a squat {adv}",
        ],
    },
    "wave": {
        "fn": _wave,
        "params": lambda rng: {"lift": _u(rng, 2.15, 2.45), "amp": _u(rng, 0.25, 0.40),
                               "freq": _u(rng, 1.3, 2.0), "side": rng.choice([-1.0, 1.0])},
        "templates": [
            "a person raises their arm and waves",
            "the man waves his hand overhead",
            "someone waves {adv} with one arm in the air",
            "a person waves hello with a raised hand",
            "the person stands and waves at someone",
        ],
    },
    "kick": {
        "fn": _kick,
        "params": lambda rng: {"freq": _u(rng, 0.55, 0.8), "height": _u(rng, 0.85, 1.1),
                               "chamber": _u(rng, 0.7, 1.0), "side": rng.choice([-1.0, 1.0])},
        "templates": [
            "a man does a kick to the front",
            "a person kicks with one leg",
            "the person performs repeated kicks",
            "someone snaps a kick forward {adv}",
            "a person raises a leg and kicks",
        ],
    },
    "spin-in-place": {
        "fn": _spin_in_place,
        "params": lambda rng: {"freq": _u(rng, 0.5, 0.75), "amp": _u(rng, 0.22, 0.32),
                               "arm": _u(rng, 0.5, 0.75)},
        "templates": [
            "a person twists their body around in place",
            "the man rocks and spins in place",
            "someone swings their arms and twists on the spot",
            "a person rotates their body {adv} without stepping away",
            "the person spins about in place",
        ],
    },
    "jump": {
        "fn": _jump,
        "params": lambda rng: {"freq": _u(rng, 0.7, 0.95), "depth_hip": _u(rng, 0.5, 0.66),
                               "depth_knee": _u(rng, 0.95, 1.25), "sharp": _u(rng, 1.3, 1.9)},
        "templates": [
            "a person is doing small jumps",
            "the man hops up and down",
            "someone jumps repeatedly in place",
            "a person bounces up and down {adv}",
            "the person does little hops on the spot",
        ],
    },
    "idle-sway": {
        "fn": _idle_sway,
        "params": lambda rng: {"freq": _u(rng, 0.35, 0.55), "amp": _u(rng, 0.02, 0.04),
                               "arm": _u(rng, 0.06, 0.12)},
        "templates": [
            "a person stands and sways gently",
            "the man stands in place shifting his weight",
            "someone idles, rocking {adv}",
            "a person stands still, swaying slightly",
            "the person waits in place calmly",
        ],
    },
    "punch": {
        "fn": _punch,
        "params": lambda rng: {"freq": _u(rng, 1.1, 1.6), "reach": _u(rng, 1.2, 1.55)},
        "templates": [
            "in a fighting stance, a person punches with alternating hands",
            "the man throws quick punches",
            "someone jabs at the air {adv}",
            "a person shadow boxes with rapid punches",
            "the person punches forward again and again",
        ],
    },
}

ADVERBS = ("slowly", "briskly", "steadily", "casually", "energetically", "smoothly")

MONOTONE_SKILLS = {"walk": +1, "jog": +1, "walk-backward": -1}
IDLE_SKILLS = {"idle-sway", "wave", "punch", "spin-in-place", "crouch", "jump", "kick"}

SETTLE_TIME = 1.0


@dataclass(frozen=True)
class SkillSpec:
    skill_tag: str
    duration: float
    seed: int
    overrides: dict = field(default_factory=dict)


class GenerationError(RuntimeError):
    pass


def _render_captions(templates, rng, count):
    pool = []
    for tpl in templates:
        if "{adv}" in tpl:
            pool.append(tpl.format(adv=ADVERBS[int(rng.integers(len(ADVERBS)))]))
        else:
            pool.append(tpl)
    idx = rng.permutation(len(pool))[:count]
    return tuple(pool[i] for i in sorted(idx))


def _strictly_monotone(x, direction):
    y = direction * np.asarray(x, dtype=np.float64)
    y = np.maximum.accumulate(y)
    # break ties so the sequence is strictly increasing
    y = y + np.arange(y.size) * 1e-9
    return direction * y


def generate_clip(spec: SkillSpec, model: CharacterModel | None = None,
                  params: SimParams | None = None, fps=FPS_DEFAULT) -> MotionClip:
    """Simulate one skill's target curves and record the resulting clip."""
    if spec.skill_tag not in SKILLS:
        raise MotionError(f"unknown skill tag {spec.skill_tag!r}")
    if not 1.0 <= spec.duration <= 12.0:
        raise MotionError(f"duration {spec.duration} outside [1, 12] s")
    model = model or CharacterModel()
    params = params or SimParams()
    skill = SKILLS[spec.skill_tag]
    rng = np.random.default_rng(spec.seed)
    gait = skill["params"](rng)
    gait.update(spec.overrides)
    fn = skill["fn"]

    batch = sim.BatchState.from_states([sim.default_standing_state(model)])
    g0 = fn(0.0, gait)
    n_settle = int(round(SETTLE_TIME / params.dt))
    for i in range(n_settle):
        u = min(1.0, i / (n_settle * 0.6))
        blend = u * u * (3.0 - 2.0 * u)
        sim.step_batch(batch, (blend * g0)[None, :], model, params)
        if sim.fall_flags(batch, model, params)[0]:
            raise GenerationError(f"{spec.skill_tag} seed {spec.seed}: fell while settling")

    n_frames = int(round(spec.duration * fps))
    root = np.empty((n_frames, 3))
    joints = np.empty((n_frames, sim.N_JOINTS))
    for i in range(n_frames):
        sim.step_batch(batch, fn(i * params.dt, gait)[None, :], model, params)
        if sim.fall_flags(batch, model, params)[0]:
            raise GenerationError(
                f"{spec.skill_tag} seed {spec.seed}: fell at t={i * params.dt:.2f}"
            )
        root[i, 0:2] = batch.pos[0]
        root[i, 2] = batch.angle[0]
        joints[i] = batch.q[0]

    # Keep the captured track physically exact except for a strictness fix-up
    # on forward/backward gaits: stance-phase foot slip can produce sub-cm
    # backsteps, which a cumulative-extremum pass flattens.
    direction = MONOTONE_SKILLS.get(spec.skill_tag)
    if direction is not None:
        root[:, 0] = _strictly_monotone(root[:, 0], direction)

    captions = _render_captions(skill["templates"], rng, count=2 + int(rng.integers(2)))
    clip_id = f"{spec.skill_tag}-{spec.seed:05d}"
    return MotionClip(id=clip_id, fps=fps, root=root, joints=joints,
                      captions=captions, skill_tag=spec.skill_tag)


def sample_caption(clip: MotionClip, rng: np.random.Generator) -> str:
    return clip.captions[int(rng.integers(len(clip.captions)))]


# ---------------------------------------------------------------------------
# curation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurationConfig:
    min_duration: float = 2.0
    max_duration: float = 9.0
    airborne_height: float = 0.10
    airborne_window: float = 1.5


def foot_heights(clip: MotionClip, model: CharacterModel | None = None,
                 params: SimParams | None = None) -> np.ndarray:
    """Per-frame minimum height over both feet's heel and toe points."""
    model = model or CharacterModel()
    params = params or SimParams()
    batch = sim.batch_from_clip(clip.root, clip.joints, clip.fps)
    pts, _, _ = sim.fk_points(batch, model, params)
    return pts[:, sim.FOOT_POINTS, 1].min(axis=1)


def _longest_true_run(mask):
    best = run = 0
    for m in mask:
        run = run + 1 if m else 0
        best = max(best, run)
    return best


def curate(dataset: Dataset, config: CurationConfig | None = None,
           model: CharacterModel | None = None,
           params: SimParams | None = None) -> Dataset:
    """Drop clips with out-of-range duration or implausibly airborne feet."""
    config = config or CurationConfig()
    kept, rejected = [], list(dataset.rejected)
    for clip in dataset.clips:
        if not config.min_duration <= clip.duration <= config.max_duration:
            rejected.append((clip.id, "duration"))
            continue
        heights = foot_heights(clip, model, params)
        run = _longest_true_run(heights > config.airborne_height)
        if run / clip.fps > config.airborne_window:
            rejected.append((clip.id, "implausible-airborne"))
            continue
        kept.append(clip)
    return Dataset(clips=kept, rejected=rejected)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def save_clip(clip: MotionClip, path):
    doc = {
        "id": clip.id,
        "fps": clip.fps,
        "captions": list(clip.captions),
        "skill_tag": clip.skill_tag,
        "frames": [
            {"root": [r[0], r[1], r[2]], "joints": list(j)}
            for r, j in zip(clip.root, clip.joints)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_clip(path) -> MotionClip:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MotionError(f"unparseable clip file {path}: {exc}") from None
    for fld in ("id", "fps", "captions", "skill_tag", "frames"):
        if fld not in doc:
            raise MotionError(f"clip file {path} missing field {fld!r}")
    frames = doc["frames"]
    if not frames:
        raise MotionError(f"clip file {path} has no frames")
    root = np.empty((len(frames), 3))
    joints = np.empty((len(frames), sim.N_JOINTS))
    for i, fr in enumerate(frames):
        for fld in ("root", "joints"):
            if fld not in fr:
                raise MotionError(f"clip file {path} frame {i} missing field {fld!r}")
        root[i] = fr["root"]
        joints[i] = fr["joints"]
    return MotionClip(id=doc["id"], fps=float(doc["fps"]), root=root, joints=joints,
                      captions=tuple(doc["captions"]), skill_tag=doc["skill_tag"])


def generate_dataset(n_clips, seed, skills=None, duration_range=(3.0, 7.5),
                     model=None, params=None, fps=FPS_DEFAULT) -> Dataset:
    """Round-robin over the catalogue with per-clip derived seeds."""
    skills = list(skills or SKILLS.keys())
    root_rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        tag = skills[i % len(skills)]
        clip_seed = int(root_rng.integers(1, 2**31 - 1))
        duration = float(root_rng.uniform(*duration_range))
        clips.append(generate_clip(SkillSpec(tag, duration, clip_seed),
                                   model=model, params=params, fps=fps))
    return Dataset(clips=clips)
