"""Expert trajectory recording: the supervised action dataset.

Each accepted expert is rolled out in fixed-size chunks from random clip
frames. A per-chunk coin decides whether the executed actions are stochastic
or deterministic, but the *recorded* action is always the deterministic mean,
so downstream regression targets carry no sampling noise. Chunks that fall
are resumed from a fresh random frame until the chunk's step budget is met.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import sim
from .ppo import ClipReference, encode_phase, expert_observations


class RecordError(RuntimeError):
    pass


@dataclass(frozen=True)
class RecordConfig:
    chunk_count: int = 20
    chunk_len: int = 100
    stochastic_fraction: float = 0.9
    max_consecutive_failures: int = 1000

    @property
    def total_steps(self):
        return self.chunk_count * self.chunk_len


@dataclass
class Trajectory:
    """Ordered (window observation, deterministic action) pairs for one motion."""

    motion_id: str
    windows: np.ndarray        # (N, WINDOW_DIM) policy-facing history windows
    actions: np.ndarray        # (N, 6) expert mean actions
    expert_obs: np.ndarray     # (N, OBS_DIM + 2) the expert's own frame+phase view
    chunk_starts: np.ndarray   # (chunk_count,)

    def __post_init__(self):
        n = self.windows.shape[0]
        if not (self.actions.shape[0] == n and self.expert_obs.shape[0] == n):
            raise RecordError("trajectory arrays disagree on step count")

    @property
    def n_steps(self):
        return self.windows.shape[0]


@dataclass
class TrajectoryDataset:
    trajectories: dict = field(default_factory=dict)   # motion_id -> Trajectory

    def __contains__(self, motion_id):
        return motion_id in self.trajectories

    def __getitem__(self, motion_id):
        return self.trajectories[motion_id]

    @property
    def motion_ids(self):
        return sorted(self.trajectories)


def record_trajectories(expert, clip, config: RecordConfig, model=None, params=None,
                        seed=0) -> Trajectory:
    """Roll an accepted expert on its clip and log window/action pairs."""
    model = model or sim.CharacterModel()
    params = params or sim.SimParams()
    rng = np.random.default_rng(seed)
    ref = ClipReference(clip, model, params)

    n_total = config.total_steps
    windows = np.empty((n_total, sim.WINDOW_DIM))
    actions = np.empty((n_total, expert.action_dim))
    expert_view = np.empty((n_total, sim.OBS_DIM + 2))
    chunk_starts = np.arange(config.chunk_count, dtype=np.intp) * config.chunk_len

    batch = sim.BatchState(1)
    history = sim.ObsHistory(1)
    consecutive_failures = 0
    write = 0

    def fresh_start():
        frame = int(rng.integers(ref.n_frames))
        batch.set_lane(0, sim.reset_from_frame(clip, frame))
        history.reset_lane(0)
        history.push(sim.observation_batch(batch, model, params))

    for chunk in range(config.chunk_count):
        stochastic = rng.random() < config.stochastic_fraction
        fresh_start()
        remaining = config.chunk_len
        while remaining > 0:
            obs = expert_observations(batch, ref, model, params)
            mean_action = expert.act_mean(obs)
            if stochastic:
                executed, _ = expert.sample(obs, rng)
            else:
                executed = mean_action
            windows[write] = history.windows()[0]
            actions[write] = mean_action[0]
            expert_view[write] = obs[0]
            sim.step_batch(batch, executed, model, params)
            history.push(sim.observation_batch(batch, model, params))
            write += 1
            remaining -= 1
            if sim.fall_flags(batch, model, params)[0]:
                consecutive_failures += 1
                if consecutive_failures > config.max_consecutive_failures:
                    raise RecordError(
                        f"expert for {clip.id} fell {consecutive_failures} times in a row; "
                        "aborting recording"
                    )
                if remaining > 0:
                    fresh_start()
            else:
                consecutive_failures = 0

    return Trajectory(
        motion_id=clip.id,
        windows=windows,
        actions=actions,
        expert_obs=expert_view,
        chunk_starts=chunk_starts,
    )


def sample_bc_batch(dataset: TrajectoryDataset, motion_ids, batch_size, rng):
    """Uniform over motion ids, then uniform over that trajectory's steps.

    Returns (windows, actions, ids) aligned by row.
    """
    for mid in motion_ids:
        if mid not in dataset:
            raise KeyError(f"unknown motion id {mid!r}")
    if batch_size == 0:
        dim_w = sim.WINDOW_DIM
        any_t = dataset[motion_ids[0]] if motion_ids else None
        dim_a = any_t.actions.shape[1] if any_t is not None else 0
        return np.empty((0, dim_w)), np.empty((0, dim_a)), []
    choice = rng.integers(len(motion_ids), size=batch_size)
    windows, acts, ids = [], [], []
    for k in choice:
        traj = dataset[motion_ids[int(k)]]
        row = int(rng.integers(traj.n_steps))
        windows.append(traj.windows[row])
        acts.append(traj.actions[row])
        ids.append(traj.motion_id)
    return np.stack(windows), np.stack(acts), ids


# ---------------------------------------------------------------------------
# file I/O: binary container + JSON sidecar
# ---------------------------------------------------------------------------


def save_trajectory(traj: Trajectory, path, config: RecordConfig | None = None):
    with open(path, "wb") as fh:
        np.savez(
            fh,
            motion_id=np.frombuffer(traj.motion_id.encode("utf-8"), dtype=np.uint8),
            windows=traj.windows,
            actions=traj.actions,
            expert_obs=traj.expert_obs,
            chunk_starts=traj.chunk_starts,
        )
    if config is not None:
        sidecar = {
            "motion_id": traj.motion_id,
            "steps": int(traj.n_steps),
            "chunk_count": config.chunk_count,
            "chunk_len": config.chunk_len,
            "stochastic_fraction": config.stochastic_fraction,
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2)


def load_trajectory(path) -> Trajectory:
    with np.load(path) as data:
        return Trajectory(
            motion_id=bytes(data["motion_id"]).decode("utf-8"),
            windows=np.array(data["windows"]),
            actions=np.array(data["actions"]),
            expert_obs=np.array(data["expert_obs"]),
            chunk_starts=np.array(data["chunk_starts"]),
        )
