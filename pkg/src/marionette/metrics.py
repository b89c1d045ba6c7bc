"""Windowed precision/recall motion-quality metrics and transition harness.

A state sequence is reduced to per-frame pose features (root height, tilt,
joint angles, root-local end-effector positions; velocities and the root's
horizontal position excluded so translated replays still match). Both metrics
slide 10-frame windows: recall asks how much of the reference is reproduced
somewhere in the rollout, precision how much of the rollout reproduces some
part of the reference. AUC over an epsilon sweep summarizes each curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sim

WINDOW = 10


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    eps_grid: np.ndarray = field(
        default_factory=lambda: np.geomspace(1e-3, 5.0, 64)
    )
    metric_fps: float = 30.0
    horizon_pad: float = 2.0
    auc_normalize: bool = False
    transition_count: int = 256
    transition_horizon: float = 10.0
    transition_window: tuple = (3.0, 7.0)


@dataclass
class StateSequence:
    """Ordered pose-feature frames from a clip or a rollout."""

    frames: np.ndarray     # (F, D)
    source: str            # "reference" | "rollout"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise MetricError("state sequence must be 2-D (frames x features)")

    @property
    def n_frames(self):
        return self.frames.shape[0]


def pose_features_from_obs(obs_frames: np.ndarray) -> np.ndarray:
    """Reduce raw observation frames to the metric feature subset."""
    return np.asarray(obs_frames)[:, sim.OBS_POSE_INDICES]


def clip_sequence(clip, model=None, params=None, metric_fps=30.0) -> StateSequence:
    model = model or sim.CharacterModel()
    params = params or sim.SimParams()
    batch = sim.batch_from_clip(clip.root, clip.joints, clip.fps)
    obs = sim.observation_batch(batch, model, params)
    stride = max(1, int(round(clip.fps / metric_fps)))
    return StateSequence(pose_features_from_obs(obs[::stride]), "reference")


def _windows(seq: StateSequence) -> np.ndarray:
    if seq.n_frames < WINDOW:
        raise MetricError(
            f"windowed metrics need >= {WINDOW} frames, got {seq.n_frames}"
        )
    v = np.lib.stride_tricks.sliding_window_view(seq.frames, WINDOW, axis=0)
    return np.ascontiguousarray(v.transpose(0, 2, 1)).reshape(v.shape[0], -1)


def _min_window_distances(targets: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """For each target window, the distance to its nearest pool window.

    Blocked plain-arithmetic evaluation (no dot-product tricks) so a naive
    double-loop oracle reproduces the same floats bit for bit.
    """
    n_t, d = targets.shape
    out = np.empty(n_t)
    block = max(1, int(4_000_000 // max(1, pool.shape[0] * d)))
    for s in range(0, n_t, block):
        diff = targets[s:s + block, None, :] - pool[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        out[s:s + block] = dist.min(axis=1)
    return out


def _coverage(target_seq: StateSequence, pool_seq: StateSequence, eps) -> float:
    tw = _windows(target_seq)
    pw = _windows(pool_seq)
    if tw.shape[1] != pw.shape[1]:
        raise MetricError(
            f"feature dimension mismatch: {target_seq.frames.shape[1]} vs "
            f"{pool_seq.frames.shape[1]}"
        )
    dmin = _min_window_distances(tw, pw)
    return float(np.mean(dmin <= eps))


def thresholded_recall(rollout: StateSequence, reference: StateSequence, eps) -> float:
    """Fraction of the reference's windows matched somewhere in the rollout."""
    return _coverage(reference, rollout, eps)


def thresholded_precision(rollout: StateSequence, reference: StateSequence, eps) -> float:
    """Fraction of the rollout's windows matching some reference window."""
    return _coverage(rollout, reference, eps)


@dataclass
class PRCurve:
    epsilons: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    precision_auc: float
    recall_auc: float

    def to_dict(self):
        return {
            "epsilons": self.epsilons.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "precision_auc": self.precision_auc,
            "recall_auc": self.recall_auc,
        }


def _auc(eps_grid, values, normalize):
    raw = float(np.trapezoid(values, eps_grid))
    return raw / float(eps_grid[-1]) if normalize else raw


def pr_curve(rollout: StateSequence, reference: StateSequence, eps_grid,
             auc_normalize=False) -> PRCurve:
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    if eps_grid.size < 2 or np.any(np.diff(eps_grid) <= 0):
        raise MetricError("epsilon grid must be ascending with >= 2 points")
    rw = _windows(rollout)
    mw = _windows(reference)
    if rw.shape[1] != mw.shape[1]:
        raise MetricError("feature dimension mismatch between rollout and reference")
    dmin_ref = _min_window_distances(mw, rw)
    dmin_roll = _min_window_distances(rw, mw)
    recall = (dmin_ref[None, :] <= eps_grid[:, None]).mean(axis=1)
    precision = (dmin_roll[None, :] <= eps_grid[:, None]).mean(axis=1)
    return PRCurve(
        epsilons=eps_grid,
        precision=precision,
        recall=recall,
        precision_auc=_auc(eps_grid, precision, auc_normalize),
        recall_auc=_auc(eps_grid, recall, auc_normalize),
    )


def zero_curve(eps_grid, auc_normalize=False) -> PRCurve:
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    z = np.zeros_like(eps_grid)
    return PRCurve(eps_grid, z.copy(), z.copy(), 0.0, 0.0)


def average_curves(curves) -> PRCurve:
    eps = curves[0].epsilons
    prec = np.mean([c.precision for c in curves], axis=0)
    rec = np.mean([c.recall for c in curves], axis=0)
    return PRCurve(eps, prec, rec,
                   float(np.trapezoid(prec, eps)), float(np.trapezoid(rec, eps)))


# ---------------------------------------------------------------------------
# policy rollouts
# ---------------------------------------------------------------------------


def rollout_observations(controller, conds, horizons, model, params, switch_steps=None,
                         switch_conds=None, init_states=None):
    """Deterministic lockstep rollout of N lanes with per-lane conditioning.

    Returns (obs_frames (T, N, OBS_DIM), alive_steps (N,)): lanes stop
    counting at their first fall or at their per-lane horizon. When
    ``switch_steps`` is given, lane conditioning flips to ``switch_conds``
    at that step (the transition harness).
    """
    n = len(horizons)
    batch = sim.BatchState(n)
    for i in range(n):
        batch.set_lane(i, init_states[i] if init_states is not None
                       else sim.default_standing_state(model))
    history = sim.ObsHistory(n)
    history.push(sim.observation_batch(batch, model, params))
    t_max = int(max(horizons))
    obs_log = np.zeros((t_max, n, sim.OBS_DIM))
    alive = np.full(n, -1, dtype=np.intp)
    conds = np.array(conds, dtype=np.float64)
    fallen = np.zeros(n, dtype=bool)
    for t in range(t_max):
        if switch_steps is not None:
            flip = switch_steps == t
            if flip.any():
                conds[flip] = switch_conds[flip]
        actions = controller.act(history.windows(), conds, t)
        sim.step_batch(batch, actions, model, params)
        frames = sim.observation_batch(batch, model, params)
        history.push(frames)
        obs_log[t] = frames
        fell_now = sim.fall_flags(batch, model, params) & ~fallen
        for i in np.nonzero(fell_now)[0]:
            alive[i] = t
            fallen[i] = True
    for i in range(n):
        if alive[i] < 0:
            alive[i] = int(horizons[i])
        else:
            alive[i] = min(alive[i], int(horizons[i]))
    return obs_log, alive


def evaluate_policy(controller, dataset, mode, config: EvalConfig | None = None,
                    model=None, params=None, seed=0):
    """Averaged PR curves over every motion in the dataset.

    ``mode`` is "index" or "caption"; the controller must expose
    ``cond_for_motion(clip, mode)`` and batched deterministic ``act``.
    Rollouts start from the default standing state and run for the clip
    duration plus a pad; a fall truncates the rollout and sequences shorter
    than one metric window score zero.
    """
    config = config or EvalConfig()
    model = model or sim.CharacterModel()
    params = params or sim.SimParams()
    clips = dataset.clips
    conds = np.stack([controller.cond_for_motion(c, mode) for c in clips])
    horizons = [int(round((c.duration + config.horizon_pad) / params.dt)) for c in clips]
    obs_log, alive = rollout_observations(controller, conds, horizons, model, params)

    stride = max(1, int(round((1.0 / params.dt) / config.metric_fps)))
    curves = []
    per_motion = {}
    for i, clip in enumerate(clips):
        frames = pose_features_from_obs(obs_log[: alive[i], i])[::stride]
        ref = clip_sequence(clip, model, params, config.metric_fps)
        if frames.shape[0] < WINDOW:
            curve = zero_curve(config.eps_grid, config.auc_normalize)
        else:
            curve = pr_curve(StateSequence(frames, "rollout"), ref,
                             config.eps_grid, config.auc_normalize)
        curves.append(curve)
        per_motion[clip.id] = curve
    return average_curves(curves), per_motion


@dataclass
class TransitionReport:
    n_trajectories: int
    success_count: int
    fell_before_transition: int
    fell_after_transition: int
    same_group: bool

    def __post_init__(self):
        total = self.success_count + self.fell_before_transition + self.fell_after_transition
        if total != self.n_trajectories:
            raise MetricError(
                f"transition buckets sum to {total}, expected {self.n_trajectories}"
            )

    def to_dict(self):
        return {
            "Transition Type": (
                "Caption-Pair from Same Group" if self.same_group
                else "Caption-Pair from Different Groups"
            ),
            "Successful (No Falls)": self.success_count / self.n_trajectories,
            "Fell Before Transition Point": self.fell_before_transition / self.n_trajectories,
            "Fell After Transition Point": self.fell_after_transition / self.n_trajectories,
            "n_trajectories": self.n_trajectories,
        }


def transition_eval(controller, dataset, partitions, config: EvalConfig | None = None,
                    model=None, params=None, seed=0):
    """Caption-switch stress test: same-partition and cross-partition pairs."""
    config = config or EvalConfig()
    model = model or sim.CharacterModel()
    params = params or sim.SimParams()
    rng = np.random.default_rng(seed)
    by_id = {c.id: c for c in dataset.clips}
    groups = [p.motion_ids for p in partitions]

    reports = []
    for same_group in (True, False):
        pairs = []
        while len(pairs) < config.transition_count:
            if same_group:
                candidates = [g for g in groups if len(g) >= 2]
                g = candidates[int(rng.integers(len(candidates)))]
                a, b = rng.choice(len(g), size=2, replace=False)
                pairs.append((g[int(a)], g[int(b)]))
            else:
                gi, gj = rng.choice(len(groups), size=2, replace=False)
                a = groups[int(gi)][int(rng.integers(len(groups[int(gi)])))]
                b = groups[int(gj)][int(rng.integers(len(groups[int(gj)])))]
                pairs.append((a, b))
        n = len(pairs)
        horizon = int(round(config.transition_horizon / params.dt))
        lo, hi = config.transition_window
        switch_steps = rng.integers(int(lo / params.dt), int(hi / params.dt), size=n)
        conds_a = np.stack([
            controller.cond_for_motion(by_id[a], "caption", rng=rng) for a, _ in pairs
        ])
        conds_b = np.stack([
            controller.cond_for_motion(by_id[b], "caption", rng=rng) for _, b in pairs
        ])
        _, alive = rollout_observations(
            controller, conds_a, [horizon] * n, model, params,
            switch_steps=switch_steps, switch_conds=conds_b,
        )
        success = int(np.sum(alive >= horizon))
        fell_before = int(np.sum((alive < horizon) & (alive < switch_steps)))
        fell_after = int(np.sum((alive < horizon) & (alive >= switch_steps)))
        reports.append(TransitionReport(
            n_trajectories=n,
            success_count=success,
            fell_before_transition=fell_before,
            fell_after_transition=fell_after,
            same_group=same_group,
        ))
    return tuple(reports)
