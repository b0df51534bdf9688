"""Closed-loop sensing evaluation: frozen, random-walk and learned sensor layouts."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .environment import FieldTrajectory, clip_to_domain, init_layout, observe_values
from .numerics import RngStream
from .policy import SensingPolicy
from .training import EvalReport, History
from .worldmodel import WorldModel

STRATEGIES = ("fixed", "random", "policy")

# (model, z_t, history, coords, values, rng) -> displacement N x 2
Mover = Callable[..., torch.Tensor]


def fixed_mover(model, z, hist, coords, values, rng):
    return torch.zeros_like(coords)


def random_mover(a_max: float) -> Mover:
    def move(model, z, hist, coords, values, rng):
        return rng.uniform(-a_max, a_max, tuple(coords.shape), coords.dtype)
    return move


def policy_mover(policy: SensingPolicy, sample: bool = False) -> Mover:
    """Mean action by default; the predicted next latent conditions the policy."""
    a_max = policy.cfg.a_max

    def move(model, z, hist, coords, values, rng):
        z_hat = model.dynamics_sample(z, hist.state(), rng)
        mu, logsig = policy(z_hat, coords, values)
        if sample:
            mu = mu + torch.exp(logsig) * rng.normal(mu.shape, mu.dtype)
        return mu.clamp(-a_max, a_max)
    return move


@torch.no_grad()
def sensing_errors(model: WorldModel, traj: FieldTrajectory, coords0: torch.Tensor, mover: Mover,
                   rng: RngStream, history_len: int = 3, track: list | None = None) -> list[float]:
    """Observe, reconstruct, move; returns the per-frame full-grid MSE.

    ``track`` (if given) receives the N x 2 layout used at every step.
    """
    u = torch.from_numpy(traj.data)
    H, W = u.shape[1:3]
    coords, hist, errs = coords0, History(model, history_len), []
    for t in range(traj.length):
        values = observe_values(u[t], coords)
        z = model.encoder(coords, values)[0]
        errs.append(float(((model.decode_grid(z, H, W) - u[t]) ** 2).mean()))
        if track is not None:
            track.append(coords.clone())
        if t + 1 < traj.length:
            step = mover(model, z, hist, coords, values, rng)
            hist.push(z)
            coords = clip_to_domain(coords + step)
    return errs


@dataclass
class ComparisonReport:
    reports: dict[str, EvalReport]
    budget: int
    seed: int
    tracks: dict[str, list] = field(default_factory=dict)

    def improvement(self, strategy: str, baseline: str = "fixed") -> float:
        """Relative reduction of the average MSE versus ``baseline``, in percent."""
        base = self.reports[baseline].avg
        return 100.0 * (base - self.reports[strategy].avg) / base

    def rows(self):
        for name, r in self.reports.items():
            row = {"strategy": name, "budget": self.budget, "seed": self.seed,
                   "in_t": r.in_t, "out_t": r.out_t, "avg": r.avg}
            row["improvement_pct"] = 0.0 if name == "fixed" else self.improvement(name)
            yield row


def compare_strategies(model: WorldModel, trajs: Sequence[FieldTrajectory], budget: int, seed: int,
                       policy: SensingPolicy | None = None, a_max: float = 0.05, history_len: int = 3,
                       keep_tracks: bool = False) -> ComparisonReport:
    """Every strategy sees the same trajectories, the same t=0 layouts and the same rng streams."""
    movers = {"fixed": fixed_mover, "random": random_mover(policy.cfg.a_max if policy else a_max)}
    if policy is not None:
        movers["policy"] = policy_mover(policy)
    reports, tracks = {}, {}
    for name, mover in movers.items():
        per, paths = [], []
        for i, tr in enumerate(trajs):
            coords0 = init_layout(budget, RngStream(seed, f"layout/{i}")).coords
            path = [] if keep_tracks else None
            per.append(sensing_errors(model, tr, coords0, mover, RngStream(seed, f"sense/{i}"), history_len, path))
            paths.append(path)
        reports[name] = EvalReport([float(x) for x in np.mean(per, axis=0)], budget, seed, name)
        if keep_tracks:
            tracks[name] = paths
    return ComparisonReport(reports, budget, seed, tracks)
