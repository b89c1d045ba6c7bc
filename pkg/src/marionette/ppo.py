"""PPO with GAE, the motion-tracking objective, and per-clip expert training.

Experts observe a single frame plus a phase encoding that synchronizes them
to their reference clip; episodes use reference-state initialization and end
on a fall or after one clip length (gaits are periodic, so phase wraps).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sim
from .autodiff import Tensor
from .nets import Adam, MlpSpec, Mlp, PolicyNet

TWO_PI = 2.0 * np.pi


class PpoError(ValueError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    pose: float = 0.6
    velocity: float = 0.1
    root: float = 0.3
    alpha_pose: float = 2.0
    alpha_velocity: float = 0.05
    alpha_root: float = 5.0


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    minibatch: int = 512
    policy_lr: float = 3e-4
    critic_lr: float = 1e-3
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5      # 0 disables clipping
    target_kl: float = 0.02        # stop the epoch sweep when exceeded


@dataclass(frozen=True)
class ExpertConfig:
    hidden_dims: tuple = (256, 128)
    epoch_limit: int = 400
    accept_threshold: float = 0.05
    discard_threshold: float = 0.10
    frames_per_epoch: int = 4096
    n_envs: int = 16
    init_log_std: float = -1.2
    eval_every: int = 1
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)


@dataclass
class ExpertResult:
    status: str                  # "accepted" | "discarded"
    final_pose_error: float
    epochs_trained: int
    wall_time: float

    def to_dict(self):
        return {
            "status": self.status,
            "final_pose_error": self.final_pose_error,
            "epochs_trained": self.epochs_trained,
            "wall_time": self.wall_time,
        }


def encode_phase(phi):
    """Periodic (sin, cos) encoding of normalized clip time."""
    phi = np.asarray(phi, dtype=np.float64) % 1.0
    return np.stack([np.sin(TWO_PI * phi), np.cos(TWO_PI * phi)], axis=-1)


def tracking_reward(q_err2, qd_err2, root_err2, weights: RewardWeights):
    """Exponential-decay tracking reward from squared error sums.

    Maximal (sum of the three weights) at zero error, decays to zero as any
    error grows; weights default to (0.6, 0.1, 0.3).
    """
    w = weights
    return (
        w.pose * np.exp(-w.alpha_pose * q_err2)
        + w.velocity * np.exp(-w.alpha_velocity * qd_err2)
        + w.root * np.exp(-w.alpha_root * root_err2)
    )


def tracking_reward_state(state: sim.SimState, ref_root, ref_root_vel, ref_joints,
                          ref_joint_vel, weights: RewardWeights) -> float:
    q_err2 = float(((state.joint_angles - ref_joints) ** 2).sum())
    qd_err2 = float(((state.joint_velocities - ref_joint_vel) ** 2).sum())
    root_err2 = float(
        ((state.root_position - ref_root[0:2]) ** 2).sum()
        + (state.root_angle - ref_root[2]) ** 2
    )
    return float(tracking_reward(q_err2, qd_err2, root_err2, weights))


def compute_gae(rewards, values, dones=None, gamma=0.99, lam=0.95):
    """Generalized advantage estimation over (T,) or (T, lanes) arrays.

    ``values`` must carry one bootstrap row beyond the rewards.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1:
        raise PpoError(
            f"values must have len(rewards)+1 entries, got {values.shape[0]} "
            f"for {rewards.shape[0]} rewards"
        )
    if dones is None:
        dones = np.zeros_like(rewards)
    dones = np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0] if rewards.ndim > 1 else rewards[:1].reshape(()))
    for t in range(rewards.shape[0] - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    returns = adv + values[:-1]
    return adv, returns


def _clip_global_norm(params, max_norm):
    if max_norm <= 0:
        return
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scal = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scal


def ppo_update(policy: PolicyNet, critic: Mlp, batch, cfg: PpoConfig, rng,
               policy_opt: Adam, critic_opt: Adam, extra_loss_fn=None):
    """Clipped-surrogate policy update plus MSE critic regression.

    ``extra_loss_fn(rng) -> (Tensor, dict)`` lets callers add an auxiliary
    loss term (the behaviour-cloning term of the stage-2 objective); the
    returned dict is merged into the stats under its own keys.
    """
    obs = batch["obs"]
    if obs.shape[0] == 0:
        raise PpoError("empty batch")
    actions = batch["actions"]
    logp_old = batch["log_probs"]
    adv = batch["advantages"]
    returns = batch["returns"]

    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    n = obs.shape[0]
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0,
             "approx_kl": 0.0, "skipped": 0, "updates": 0}
    extra_totals = {}
    for _ in range(cfg.ppo_epochs):
        order = rng.permutation(n)
        kl_stop = False
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            mb_adv = Tensor(adv[idx])
            logp_new = policy.log_prob_graph(obs[idx], actions[idx])
            ratio = ad.exp(ad.sub(logp_new, Tensor(logp_old[idx])))
            surr = ad.minimum(
                ad.mul(ratio, mb_adv),
                ad.mul(ad.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), mb_adv),
            )
            loss = ad.neg(ad.mean_all(surr))
            if cfg.entropy_coef > 0.0:
                loss = ad.sub(loss, ad.scale(policy.entropy_graph(), cfg.entropy_coef))
            extra_stats = None
            if extra_loss_fn is not None:
                extra, extra_stats = extra_loss_fn(rng)
                loss = ad.add(loss, extra)
            if not np.isfinite(loss.data):
                stats["skipped"] += 1
                continue
            policy_opt.zero_grad()
            ad.backward(loss)
            _clip_global_norm(policy.parameters(), cfg.max_grad_norm)
            policy_opt.step()

            v = critic.forward(Tensor(obs[idx]))
            verr = ad.sub(v, Tensor(returns[idx][:, None]))
            vloss = ad.mean_all(ad.mul(verr, verr))
            if np.isfinite(vloss.data):
                critic_opt.zero_grad()
                ad.backward(vloss)
                _clip_global_norm(critic.parameters(), cfg.max_grad_norm)
                critic_opt.step()
                stats["value_loss"] += float(vloss.data)

            ratio_nd = ratio.data
            approx_kl = float(np.mean(ratio_nd - 1.0 - np.log(np.maximum(ratio_nd, 1e-12))))
            stats["policy_loss"] += float(loss.data)
            stats["clip_fraction"] += float(np.mean(np.abs(ratio_nd - 1.0) > cfg.clip_eps))
            stats["approx_kl"] += approx_kl
            stats["updates"] += 1
            if extra_stats:
                for k, vv in extra_stats.items():
                    extra_totals[k] = extra_totals.get(k, 0.0) + vv
            if cfg.target_kl > 0.0 and approx_kl > cfg.target_kl:
                kl_stop = True
                break
        if kl_stop:
            break
    if stats["updates"]:
        for k in ("policy_loss", "value_loss", "clip_fraction", "approx_kl"):
            stats[k] /= stats["updates"]
        for k, vv in extra_totals.items():
            stats[k] = vv / stats["updates"]
    return stats


# ---------------------------------------------------------------------------
# expert training
# ---------------------------------------------------------------------------


class ClipReference:
    """Precomputed per-frame reference arrays for a clip."""

    def __init__(self, clip, model: sim.CharacterModel, params: sim.SimParams):
        self.clip = clip
        self.n_frames = clip.n_frames
        self.fps = clip.fps
        self.duration = clip.duration
        rv, av, jv = sim.clip_frame_velocities(clip.root, clip.joints, clip.fps)
        self.root = clip.root
        self.root_vel = rv
        self.root_angvel = av
        self.joints = clip.joints
        self.joint_vel = jv
        batch = sim.batch_from_clip(clip.root, clip.joints, clip.fps)
        pts, _, _ = sim.fk_points(batch, model, params)
        self.points = pts    # (F, 10, 2)

    def frame_at(self, times):
        return np.asarray(np.round(np.asarray(times) * self.fps), dtype=np.intp) % self.n_frames

    def phase_at(self, times):
        return (np.asarray(times) % self.duration) / self.duration


def batch_tracking_rewards(batch: sim.BatchState, ref: ClipReference,
                           weights: RewardWeights) -> np.ndarray:
    idx = ref.frame_at(batch.time)
    q_err2 = ((batch.q - ref.joints[idx]) ** 2).sum(axis=1)
    qd_err2 = ((batch.qd - ref.joint_vel[idx]) ** 2).sum(axis=1)
    root_err2 = (
        ((batch.pos - ref.root[idx, 0:2]) ** 2).sum(axis=1)
        + (batch.angle - ref.root[idx, 2]) ** 2
    )
    return tracking_reward(q_err2, qd_err2, root_err2, weights)


def expert_observations(batch: sim.BatchState, ref: ClipReference,
                        model, params) -> np.ndarray:
    frames = sim.observation_batch(batch, model, params)
    phase = encode_phase(ref.phase_at(batch.time))
    return np.concatenate([frames, phase], axis=1)


def evaluate_pose_error(policy: PolicyNet, ref: ClipReference, model, params,
                        start_frame=0) -> float:
    """Mean Cartesian error over end-effector points plus root for one
    deterministic rollout across the whole clip."""
    state = sim.reset_from_frame(ref.clip, start_frame)
    batch = sim.BatchState.from_states([state])
    n = ref.n_frames
    track = np.empty((n, 3))
    joints = np.empty((n, sim.N_JOINTS))
    for i in range(n):
        obs = expert_observations(batch, ref, model, params)
        action = policy.act_mean(obs)
        sim.step_batch(batch, action, model, params)
        track[i, 0:2] = batch.pos[0]
        track[i, 2] = batch.angle[0]
        joints[i] = batch.q[0]
        if sim.fall_flags(batch, model, params)[0]:
            track = track[: i + 1]
            joints = joints[: i + 1]
            break
    rolled = sim.BatchState(track.shape[0])
    rolled.pos = track[:, 0:2]
    rolled.angle = track[:, 2]
    rolled.q = joints
    pts, _, _ = sim.fk_points(rolled, model, params)
    idx = ref.frame_at(start_frame / ref.fps + (np.arange(track.shape[0]) + 1) / ref.fps)
    ref_pts = ref.points[idx]
    sel = np.concatenate([[sim.P_ROOT], sim.EE_POINTS])
    err = np.linalg.norm(pts[:, sel] - ref_pts[:, sel], axis=2).mean()
    # a rollout cut short by a fall counts the missing frames at full error
    if track.shape[0] < n:
        missing = n - track.shape[0]
        err = (err * track.shape[0] + 1.0 * missing) / n
    return float(err)


class ExpertEnv:
    """Vectorized tracking environment: N lanes over one clip."""

    def __init__(self, ref: ClipReference, model, params, n_envs, rng,
                 reward_weights: RewardWeights):
        self.ref = ref
        self.model = model
        self.params = params
        self.n = n_envs
        self.rng = rng
        self.reward_weights = reward_weights
        self.batch = sim.BatchState(n_envs)
        self.steps_left = np.zeros(n_envs, dtype=np.intp)
        for i in range(n_envs):
            self.reset_lane(i)

    def reset_lane(self, i):
        frame = int(self.rng.integers(self.ref.n_frames))
        self.batch.set_lane(i, sim.reset_from_frame(self.ref.clip, frame))
        self.steps_left[i] = self.ref.n_frames

    def observe(self):
        return expert_observations(self.batch, self.ref, self.model, self.params)

    def step(self, actions):
        sim.step_batch(self.batch, actions, self.model, self.params)
        rewards = batch_tracking_rewards(self.batch, self.ref, self.reward_weights)
        fell = sim.fall_flags(self.batch, self.model, self.params)
        self.steps_left -= 1
        truncated = (self.steps_left <= 0) & ~fell
        return rewards, fell, truncated


def _critic_values(critic: Mlp, obs_flat, chunk=8192):
    out = np.empty(obs_flat.shape[0])
    for s in range(0, obs_flat.shape[0], chunk):
        out[s:s + chunk] = critic.infer(obs_flat[s:s + chunk])[:, 0]
    return out


def collect_rollout(policy, env: ExpertEnv, n_steps, rng):
    """Run lanes in lockstep for ceil(n_steps / n_envs) iterations.

    Returns flat arrays plus the (T, N) done grid and bootstrap observations.
    """
    n_env = env.n
    t_steps = (n_steps + n_env - 1) // n_env
    obs_dim = env.observe().shape[1]
    act_dim = policy.action_dim
    obs_g = np.empty((t_steps, n_env, obs_dim))
    act_g = np.empty((t_steps, n_env, act_dim))
    logp_g = np.empty((t_steps, n_env))
    rew_g = np.empty((t_steps, n_env))
    done_g = np.zeros((t_steps, n_env))
    trunc_obs = []

    for t in range(t_steps):
        obs = env.observe()
        actions, logp = policy.sample(obs, rng)
        rewards, fell, truncated = env.step(actions)
        obs_g[t] = obs
        act_g[t] = actions
        logp_g[t] = logp
        rew_g[t] = rewards
        done_g[t] = fell | truncated
        if truncated.any():
            next_obs = env.observe()
            for i in np.nonzero(truncated)[0]:
                trunc_obs.append((t, i, next_obs[i]))
        for i in np.nonzero(fell | truncated)[0]:
            env.reset_lane(i)
    bootstrap_obs = env.observe()
    return {
        "obs": obs_g, "actions": act_g, "log_probs": logp_g, "rewards": rew_g,
        "dones": done_g, "trunc_obs": trunc_obs, "bootstrap_obs": bootstrap_obs,
    }


def finish_rollout(roll, critic, cfg: PpoConfig):
    """Compute values post-hoc, patch truncation bootstraps, run GAE, flatten."""
    t_steps, n_env, obs_dim = roll["obs"].shape
    flat_obs = roll["obs"].reshape(-1, obs_dim)
    values = _critic_values(critic, flat_obs).reshape(t_steps, n_env)
    boot = _critic_values(critic, roll["bootstrap_obs"])
    rewards = roll["rewards"].copy()
    if roll["trunc_obs"]:
        tr_vals = _critic_values(critic, np.stack([o for _, _, o in roll["trunc_obs"]]))
        for (t, i, _), v in zip(roll["trunc_obs"], tr_vals):
            rewards[t, i] += cfg.gamma * v
    values_ext = np.concatenate([values, boot[None, :]], axis=0)
    adv, rets = compute_gae(rewards, values_ext, roll["dones"], cfg.gamma, cfg.lam)
    return {
        "obs": flat_obs,
        "actions": roll["actions"].reshape(-1, roll["actions"].shape[-1]),
        "log_probs": roll["log_probs"].reshape(-1),
        "advantages": adv.reshape(-1),
        "returns": rets.reshape(-1),
        "mean_reward": float(roll["rewards"].mean()),
        "episode_dones": float(roll["dones"].sum()),
    }


def train_expert(clip, config: ExpertConfig, model=None, params=None, seed=0):
    """Stage-1 tracking expert for one curated clip.

    Early-stops when the deterministic pose error drops below the accept
    threshold; at the epoch limit the clip is discarded if the error is
    still above the discard threshold.
    """
    model = model or sim.CharacterModel()
    params = params or sim.SimParams()
    rng = np.random.default_rng(seed)
    ref = ClipReference(clip, model, params)

    obs_dim = sim.OBS_DIM + 2
    pol_spec = MlpSpec(obs_dim, config.hidden_dims, sim.N_JOINTS, "elu", False)
    val_spec = MlpSpec(obs_dim, config.hidden_dims, 1, "elu", False)
    policy = PolicyNet(pol_spec, rng, init_log_std=config.init_log_std)
    critic = Mlp(val_spec, rng)
    policy_opt = Adam(policy.parameters(), lr=config.ppo.policy_lr)
    critic_opt = Adam(critic.parameters(), lr=config.ppo.critic_lr)

    env = ExpertEnv(ref, model, params, config.n_envs, rng, config.reward)

    start = time.perf_counter()
    curve = []
    pose_error = float("inf")
    epochs_run = 0
    for epoch in range(config.epoch_limit + 1):
        if epoch % config.eval_every == 0 or epoch == config.epoch_limit:
            pose_error = evaluate_pose_error(policy, ref, model, params)
        curve.append((epochs_run, pose_error, float("nan") if epoch == 0 else batch["mean_reward"],
                      float("nan") if epoch == 0 else stats["approx_kl"]))
        if pose_error < config.accept_threshold or epoch == config.epoch_limit:
            break
        roll = collect_rollout(policy, env, config.frames_per_epoch, rng)
        batch = finish_rollout(roll, critic, config.ppo)
        stats = ppo_update(policy, critic, batch, config.ppo, rng, policy_opt, critic_opt)
        epochs_run = epoch + 1
    status = "accepted" if pose_error < config.discard_threshold else "discarded"
    result = ExpertResult(
        status=status,
        final_pose_error=float(pose_error),
        epochs_trained=epochs_run,
        wall_time=time.perf_counter() - start,
    )
    return policy, result, curve
