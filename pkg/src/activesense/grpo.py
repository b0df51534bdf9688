"""Group-relative policy optimisation of the sensing policy against a frozen world model."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .environment import FieldTrajectory, clip_to_domain, init_layout, observe_values
from .numerics import (NonFiniteError, ParamStore, RngStream, adam_step, gradient_of,
                       linear_then_constant_lr, module_tensors)
from .policy import SensingPolicy, log_prob, sample_action
from .training import History, TrainingDivergedError
from .worldmodel import WorldModel

log = logging.getLogger(__name__)


@dataclass
class GrpoConfig:
    groups: int = 4
    horizon: int = 3
    gamma: float = 0.99
    clip: float = 0.2
    eps_norm: float = 1e-8
    epochs: int = 4
    episodes: int = 8
    episode_len: int = 16
    total_steps: int = 50_000
    minibatch: int = 32
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    filtering: bool = True
    filter_reset: float = 0.1
    exec_group: str = "first"     # "first" | "random"
    common_noise: bool = True     # groups in a timestep share diffusion noise
    n_sensors: int = 64
    history_len: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.groups < 2:
            raise ValueError("GRPO needs at least two groups")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if not 0 < self.clip < 1:
            raise ValueError("clip must be in (0, 1)")
        if self.exec_group not in ("first", "random"):
            raise ValueError(f"unknown exec_group {self.exec_group!r}")

    @property
    def iterations(self) -> int:
        return max(1, self.total_steps // (self.episodes * self.episode_len))


@dataclass
class PpoConfig:
    value_weight: float = 5.0
    value_lr_scale: float = 10.0

    def __post_init__(self):
        if self.value_weight < 0:
            raise ValueError("value weight must be non-negative")


@dataclass
class GroupRollout:
    z_next: torch.Tensor          # M x d_z
    coords: torch.Tensor          # N x 2
    values: torch.Tensor          # N x C
    actions: torch.Tensor         # G x N x 2, pre-clip samples
    log_probs: torch.Tensor       # G x N
    rewards: torch.Tensor         # G lookahead rewards
    episode: int = 0
    t: int = 0

    def __post_init__(self):
        G = self.rewards.shape[0]
        if self.actions.shape[0] != G or self.log_probs.shape[0] != G:
            raise ValueError("group fields must all have G entries")


@dataclass
class FilterState:
    tau: float = -math.inf
    minima: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# reward shaping and advantages

def lookahead_reward(rewards: Sequence[float] | torch.Tensor, gamma: float, horizon: int | None = None):
    """Discount-weighted mean of the next ``horizon`` rewards (shorter tails use what exists)."""
    r = torch.as_tensor(rewards, dtype=torch.float64)
    H = r.shape[-1] if horizon is None else horizon
    if H < 1:
        raise ValueError("horizon must be >= 1")
    r = r[..., :H]
    w = gamma ** torch.arange(r.shape[-1], dtype=torch.float64)
    return (r * w).sum(-1) / w.sum()


def group_advantage(rewards: torch.Tensor) -> torch.Tensor:
    """(r - mean) / std over the last axis, population std; zeros for a degenerate group."""
    r = torch.as_tensor(rewards, dtype=torch.float64)
    if r.shape[-1] < 2:
        raise ValueError("need at least two rewards per group")
    centred = r - r.mean(-1, keepdim=True)
    std = r.std(-1, unbiased=False, keepdim=True)
    return torch.where(std < 1e-8, torch.zeros_like(centred), centred / torch.where(std < 1e-8, 1.0, std))


def batch_normalize(adv: torch.Tensor, eps_norm: float = 1e-8) -> torch.Tensor:
    a = torch.as_tensor(adv)
    if a.numel() == 0:
        raise ValueError("empty mini-batch")
    return (a - a.mean()) / (a.std(unbiased=False) + eps_norm)


def grpo_surrogate(logp_new: torch.Tensor, logp_old: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    """Clipped objective averaged over groups and sensors.

    ``logp_*`` are ... x G x N per-sensor log densities and ``adv`` is ... x G.
    """
    ratio = torch.exp(logp_new - logp_old.detach())
    a = adv.detach()[..., None].to(ratio.dtype)
    return torch.minimum(ratio * a, ratio.clamp(1 - clip, 1 + clip) * a).mean()


def dynamic_filter(rewards: Sequence[float] | torch.Tensor, state: FilterState, iteration: int) -> bool:
    """Record the group minimum; return False when the whole group is below τ after iteration 1."""
    r = torch.as_tensor(rewards, dtype=torch.float64)
    state.minima.append(float(r.min()))
    return not (iteration > 1 and bool((r < state.tau).all()))


def end_iteration(state: FilterState, rng: RngStream | None = None, reset_prob: float = 0.1) -> FilterState:
    if state.minima:
        state.tau = float(np.mean(state.minima))
    state.minima = []
    if rng is not None and rng.random() < reset_prob:
        state.tau = -math.inf
    return state


# ---------------------------------------------------------------------------
# rollouts

@torch.no_grad()
def _frame_mse(model: WorldModel, z: torch.Tensor, frame: torch.Tensor) -> torch.Tensor:
    H, W = frame.shape[0], frame.shape[1]
    return ((model.decode_grid(z, H, W) - frame) ** 2).mean(dim=(-3, -2, -1))


@torch.no_grad()
def lookahead_rewards(model: WorldModel, u: torch.Tensor, t: int, z_t: torch.Tensor, hist: History,
                      new_coords: torch.Tensor, horizon: int, rng: RngStream, common_noise: bool = True):
    """Per-group rewards r_{t+1..t+H} for layouts ``new_coords`` (G x N x 2), frozen after the move.

    Step t+1 is reconstructed from what the moved sensors actually read; later
    steps come from the latent dynamics with the history carried forward.
    """
    G = new_coords.shape[0]
    vals = observe_values(u[t + 1].expand(G, *u.shape[1:]), new_coords)
    z = model.encoder(new_coords, vals)[0]
    h = hist.expand(G)
    h.push(z_t.expand(G, *z_t.shape))
    rewards = [-_frame_mse(model, z, u[t + 1])]
    first = z
    for k in range(2, horizon + 1):
        if t + k >= u.shape[0]:
            break
        z_next = model.dynamics_sample(z, h.state(), rng, shared_noise=common_noise)
        h.push(z)
        z = z_next
        rewards.append(-_frame_mse(model, z, u[t + k]))
    return torch.stack(rewards, -1), vals, first


@dataclass
class RolloutStats:
    mean_reward: float = 0.0
    mean_lookahead: float = 0.0
    kept_fraction: float = 1.0
    entries: int = 0


@torch.no_grad()
def collect_rollouts(model: WorldModel, trajs: Sequence[FieldTrajectory], policy: SensingPolicy,
                     cfg: GrpoConfig, filt: FilterState, iteration: int, rng: RngStream,
                     groups: int | None = None):
    """Run ``cfg.episodes`` episodes, returning the (filtered) buffer and summary stats."""
    G = groups or cfg.groups
    a_max = policy.cfg.a_max
    need = cfg.episode_len + cfg.horizon
    usable = [i for i, tr in enumerate(trajs) if tr.length > need]
    if len(usable) < len(trajs):
        log.warning("skipping %d trajectories shorter than %d frames", len(trajs) - len(usable), need + 1)
    if not usable:
        raise ValueError(f"no trajectory has the {need + 1} frames an episode needs")
    buffer, exec_rewards, looks, kept, seen = [], [], [], 0, 0
    for ep in range(cfg.episodes):
        tr = trajs[usable[rng.integers(0, len(usable))]]
        u = torch.from_numpy(tr.data)
        t0 = int(rng.integers(0, tr.length - need))
        coords = init_layout(cfg.n_sensors, rng).coords
        vals = observe_values(u[t0], coords)
        z = model.encoder(coords, vals)[0]
        hist = History(model, cfg.history_len)
        for t in range(t0, t0 + cfg.episode_len):
            z_hat = model.dynamics_sample(z, hist.state(), rng)
            mu, logsig = policy(z_hat, coords, vals)
            act = sample_action(mu.expand(G, *mu.shape), logsig.expand(G, *logsig.shape), a_max, rng)
            new_coords = clip_to_domain(coords + act.displacement)
            r, new_vals, new_z = lookahead_rewards(model, u, t, z, hist, new_coords, cfg.horizon, rng,
                                                   cfg.common_noise)
            look = lookahead_reward(r, cfg.gamma).float()
            keep = dynamic_filter(look, filt, iteration) if cfg.filtering else True
            seen += 1
            if keep:
                kept += 1
                buffer.append(GroupRollout(z_hat, coords, vals, act.pre_clip, act.log_prob, look, ep, t))
            g = 0 if cfg.exec_group == "first" else int(rng.integers(0, G))
            exec_rewards.append(float(r[g, 0]))
            looks.append(float(look.mean()))
            hist.push(z)
            coords, vals, z = new_coords[g], new_vals[g], new_z[g]
    stats = RolloutStats(float(np.mean(exec_rewards)), float(np.mean(looks)), kept / max(seen, 1), len(buffer))
    return buffer, stats


# ---------------------------------------------------------------------------
# optimisation

def _stack(buffer: Sequence[GroupRollout]):
    return (torch.stack([b.z_next for b in buffer]), torch.stack([b.coords for b in buffer]),
            torch.stack([b.values for b in buffer]), torch.stack([b.actions for b in buffer]),
            torch.stack([b.log_probs for b in buffer]), torch.stack([b.rewards for b in buffer]))


def grpo_update(policy: SensingPolicy, store: ParamStore, buffer: Sequence[GroupRollout], cfg: GrpoConfig,
                lr: float, rng: RngStream) -> float:
    """``cfg.epochs`` passes of mini-batch ascent on the clipped surrogate; returns the mean objective."""
    if not buffer:
        return 0.0
    z, coords, vals, acts, logp_old, rewards = _stack(buffer)
    adv = group_advantage(rewards)
    objs = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(buffer))
        for s in range(0, len(buffer), cfg.minibatch):
            idx = torch.from_numpy(order[s:s + cfg.minibatch])
            a_hat = batch_normalize(adv[idx], cfg.eps_norm)

            def objective():
                mu, logsig = policy(z[idx], coords[idx], vals[idx])
                lp = log_prob(acts[idx], mu[:, None], logsig[:, None])
                return grpo_surrogate(lp, logp_old[idx], a_hat, cfg.clip)

            j = objective()
            if not torch.isfinite(j):
                raise NonFiniteError("GRPO objective is not finite")
            grads = gradient_of(-j, store)
            adam_step(store, grads, lr)
            objs.append(j.item())
    return float(np.mean(objs))


def _guarded(update, policy: SensingPolicy, iteration: int) -> float:
    last = {k: v.clone() for k, v in module_tensors(policy).items()}
    try:
        return update()
    except NonFiniteError as exc:
        raise TrainingDivergedError(f"policy update diverged at iteration {iteration}: {exc}", last) from exc


def policy_store(policy: SensingPolicy, value_lr_scale: float = 1.0) -> ParamStore:
    return ParamStore({n: p for n, p in policy.named_parameters()}, {"value": value_lr_scale})


def train_policy(model: WorldModel, trajs: Sequence[FieldTrajectory], cfg: GrpoConfig,
                 policy: SensingPolicy | None = None, on_iteration: Callable | None = None,
                 iterations: int | None = None):
    """Alternate rollout collection and GRPO updates; the world model is never modified."""
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        rng = RngStream(cfg.seed, "policy")
        env_rng = RngStream(cfg.seed, "env")
        policy = policy or SensingPolicy(rng=RngStream(cfg.seed, "init"))
        store = policy_store(policy)
        filt = FilterState()
        n_iter = iterations or cfg.iterations
        history = []
        for it in range(1, n_iter + 1):
            lr = linear_then_constant_lr(it - 1, n_iter, cfg.lr_start, cfg.lr_end)
            buffer, stats = collect_rollouts(model, trajs, policy, cfg, filt, it, env_rng)
            tau = filt.tau
            if cfg.filtering:
                end_iteration(filt, env_rng, cfg.filter_reset)
            obj = _guarded(lambda: grpo_update(policy, store, buffer, cfg, lr, rng), policy, it)
            rec = {"iteration": it, "mean_reward": stats.mean_reward, "mean_lookahead": stats.mean_lookahead,
                   "tau": tau, "kept_fraction": stats.kept_fraction, "surrogate": obj, "lr": lr}
            history.append(rec)
            if on_iteration:
                on_iteration(rec)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    return policy, history


# ---------------------------------------------------------------------------
# PPO baseline

def reward_to_go(rewards: Sequence[float], gamma: float) -> list[float]:
    out, acc = [], 0.0
    for r in reversed(list(rewards)):
        acc = r + gamma * acc
        out.append(acc)
    return out[::-1]


def ppo_objective(logp_new, logp_old, adv, values, returns, clip, value_weight):
    """Clipped surrogate minus ``value_weight`` times the squared value error (to maximise)."""
    ratio = torch.exp(logp_new - logp_old.detach())
    a = adv.detach()[..., None].to(ratio.dtype)
    surr = torch.minimum(ratio * a, ratio.clamp(1 - clip, 1 + clip) * a).mean()
    return surr - value_weight * ((values - returns.detach()) ** 2).mean()


def ppo_update(policy: SensingPolicy, store: ParamStore, batch: dict, cfg: GrpoConfig, ppo: PpoConfig,
               lr: float, rng: RngStream) -> float:
    n = batch["z"].shape[0]
    objs = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.minibatch):
            idx = torch.from_numpy(order[s:s + cfg.minibatch])
            mu, logsig, v = policy(batch["z"][idx], batch["coords"][idx], batch["values"][idx], with_value=True)
            adv = batch_normalize(batch["returns"][idx] - v.detach().double(), cfg.eps_norm)
            lp = log_prob(batch["actions"][idx], mu, logsig)
            j = ppo_objective(lp, batch["log_probs"][idx], adv, v, batch["returns"][idx].float(),
                              cfg.clip, ppo.value_weight)
            if not torch.isfinite(j):
                raise NonFiniteError("PPO objective is not finite")
            adam_step(store, gradient_of(-j, store), lr)
            objs.append(j.item())
    return float(np.mean(objs))


@torch.no_grad()
def collect_ppo(model, trajs, policy, cfg: GrpoConfig, rng: RngStream) -> tuple[dict, RolloutStats]:
    """Single-action episodes; the stored return is the discounted sum of lookahead rewards."""
    dummy = FilterState()
    flat = {"z": [], "coords": [], "values": [], "actions": [], "log_probs": [], "returns": []}
    exec_rewards, looks = [], []
    one = GrpoConfig(**{**cfg.__dict__, "episodes": 1, "filtering": False, "groups": 2})
    for ep in range(cfg.episodes):
        buf, stats = collect_rollouts(model, trajs, policy, one, dummy, 1, rng, groups=1)
        look = [float(b.rewards[0]) for b in buf]
        rtg = reward_to_go(look, cfg.gamma)
        for b, R in zip(buf, rtg):
            flat["z"].append(b.z_next)
            flat["coords"].append(b.coords)
            flat["values"].append(b.values)
            flat["actions"].append(b.actions[0])
            flat["log_probs"].append(b.log_probs[0])
            flat["returns"].append(torch.tensor(R, dtype=torch.float64))
        exec_rewards.append(stats.mean_reward)
        looks.append(stats.mean_lookahead)
    batch = {k: torch.stack(v) for k, v in flat.items()}
    return batch, RolloutStats(float(np.mean(exec_rewards)), float(np.mean(looks)), 1.0, batch["z"].shape[0])


def train_policy_ppo(model: WorldModel, trajs: Sequence[FieldTrajectory], cfg: GrpoConfig,
                     ppo: PpoConfig | None = None, policy: SensingPolicy | None = None,
                     on_iteration: Callable | None = None, iterations: int | None = None):
    ppo = ppo or PpoConfig()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        rng = RngStream(cfg.seed, "policy")
        env_rng = RngStream(cfg.seed, "env")
        policy = policy or SensingPolicy(rng=RngStream(cfg.seed, "init"), value_head=True)
        store = policy_store(policy, ppo.value_lr_scale)
        n_iter = iterations or cfg.iterations
        history = []
        for it in range(1, n_iter + 1):
            lr = linear_then_constant_lr(it - 1, n_iter, cfg.lr_start, cfg.lr_end)
            batch, stats = collect_ppo(model, trajs, policy, cfg, env_rng)
            obj = _guarded(lambda: ppo_update(policy, store, batch, cfg, ppo, lr, rng), policy, it)
            rec = {"iteration": it, "mean_reward": stats.mean_reward, "mean_lookahead": stats.mean_lookahead,
                   "tau": -math.inf, "kept_fraction": 1.0, "surrogate": obj, "lr": lr}
            history.append(rec)
            if on_iteration:
                on_iteration(rec)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    return policy, history
