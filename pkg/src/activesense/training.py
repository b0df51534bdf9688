"""Two-stage world-model training and autoregressive rollout evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .environment import (DOMAIN_HI, DOMAIN_LO, FieldTrajectory, clip_to_domain, init_layout, observe_values,
                          uniform_coords)
from .numerics import (NonFiniteError, ParamStore, RngStream, adam_step, check_finite,
                       cosine_lr, gradient_of)
from .worldmodel import WorldModel, kl_standard_normal

log = logging.getLogger(__name__)


class TrainingDivergedError(NonFiniteError):
    """Loss went non-finite; ``last_state`` holds the parameters before the bad step."""

    def __init__(self, msg, last_state=None):
        super().__init__(msg)
        self.last_state = last_state


@dataclass
class TrainConfig:
    stage1_epochs: int = 300
    stage2_epochs: int = 150
    batch_size: int = 32
    lr: float = 1e-3
    query_lr_scale: float = 10.0
    lr_floor: float = 1e-5
    beta: float = 1e-5
    lam: float = 1.0
    n_train: int = 64
    history_len: int = 3
    in_t_only: bool = True
    box_layout_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_train < 1:
            raise ValueError("need at least one training sensor")
        if not 0 <= self.box_layout_frac <= 1:
            raise ValueError("box_layout_frac must lie in [0, 1]")


@dataclass
class EvalReport:
    per_step: list[float]
    budget: int
    seed: int
    label: str = ""

    @property
    def split(self) -> int:
        return len(self.per_step) // 2

    @property
    def in_t(self) -> float:
        return float(np.mean(self.per_step[:self.split]))

    @property
    def out_t(self) -> float:
        return float(np.mean(self.per_step[self.split:]))

    @property
    def avg(self) -> float:
        return float(np.mean(self.per_step))

    def rows(self):
        for t, m in enumerate(self.per_step):
            yield {"t": t, "mse": m, "split": "in_t" if t < self.split else "out_t"}

    def to_dict(self):
        return {"label": self.label, "budget": self.budget, "seed": self.seed,
                "per_step": list(self.per_step), "in_t": self.in_t, "out_t": self.out_t, "avg": self.avg}


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


def _segment_len(traj: FieldTrajectory, in_t_only: bool) -> int:
    return traj.length // 2 if in_t_only else traj.length


def _stack_frames(trajs, index) -> torch.Tensor:
    return torch.from_numpy(np.stack([trajs[i].data[t] for i, t in index]))


def world_store(model: WorldModel, parts: Sequence[str], cfg: TrainConfig) -> ParamStore:
    named = {}
    for part in parts:
        for n, p in getattr(model, part).named_parameters():
            named[f"{part}.{n}"] = p
    return ParamStore(named, {"encoder.queries": cfg.query_lr_scale})


def training_layouts(batch: int, n: int, rng: RngStream, box_frac: float = 0.0) -> torch.Tensor:
    """B x n x 2 layouts: uniform over the domain, or (with prob ``box_frac``) uniform in a random box.

    Boxes have half-widths in [0.2, 1] per axis, so the encoder also sees the
    clustered layouts a moving sensor array produces.
    """
    coords = uniform_coords((batch, n), rng)
    if box_frac <= 0:
        return coords
    centre = rng.uniform(DOMAIN_LO, DOMAIN_HI, (batch, 1, 2))
    half = rng.uniform(0.2, 1.0, (batch, 1, 2))
    boxed = clip_to_domain(centre + half * coords)
    pick = torch.from_numpy(rng.generator.random(batch) < box_frac)[:, None, None]
    return torch.where(pick, boxed, coords)


def _set_requires_grad(model: WorldModel, parts: Sequence[str]):
    for name in ("encoder", "decoder", "gru", "denoiser"):
        for p in getattr(model, name).parameters():
            p.requires_grad_(name in parts)


# ---------------------------------------------------------------------------
# stage 1

def train_stage1(model: WorldModel, trajs: Sequence[FieldTrajectory], cfg: TrainConfig,
                 store: ParamStore | None = None, on_epoch: Callable | None = None) -> list[dict]:
    """Fit encoder + decoder to reconstruct every frame from a fresh random layout."""
    if not trajs:
        raise ValueError("stage 1 needs at least one trajectory")
    rng = RngStream(cfg.seed, "stage1")
    parts = ("encoder", "decoder")
    _set_requires_grad(model, parts)
    store = store or world_store(model, parts, cfg)
    frames = [(i, t) for i, tr in enumerate(trajs) for t in range(_segment_len(tr, cfg.in_t_only))]
    per_epoch = math.ceil(len(frames) / cfg.batch_size)
    total = per_epoch * cfg.stage1_epochs
    H, W = trajs[0].data.shape[1:3]
    history, step = [], 0
    for epoch in range(cfg.stage1_epochs):
        order = rng.permutation(len(frames))
        sums = np.zeros(3)
        for b in range(per_epoch):
            idx = [frames[j] for j in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            u = _stack_frames(trajs, idx)
            coords = training_layouts(len(idx), cfg.n_train, rng, cfg.box_layout_frac)
            values = observe_values(u, coords)

            def objective():
                st = model.encode(coords, values, rng)
                recon = ((model.decode_grid(st.z, H, W) - u) ** 2).mean()
                kl = kl_standard_normal(st.mu, st.logsig).mean()
                objective.parts = (recon.item(), kl.item())
                return recon + cfg.beta * kl

            loss = objective()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"stage 1 loss non-finite at epoch {epoch}",
                                            {n: p.detach().clone() for n, p in store.params.items()})
            grads = gradient_of(loss, store)
            adam_step(store, grads, cosine_lr(step, total, cfg.lr, cfg.lr_floor))
            step += 1
            sums += (loss.item(), *objective.parts)
        rec = {"epoch": epoch, "loss": sums[0] / per_epoch, "recon": sums[1] / per_epoch, "kl": sums[2] / per_epoch}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    _set_requires_grad(model, ("encoder", "decoder", "gru", "denoiser"))
    return history


# ---------------------------------------------------------------------------
# stage 2

def history_state(model: WorldModel, past: Sequence[torch.Tensor], batch=()) -> torch.Tensor:
    """GRU summary of the given past latents (oldest first), starting from zeros."""
    h = model.init_history(batch)
    for z in past:
        h = model.gru_step(h, z)
    return h


class History:
    """Sliding window of the last ``length`` latents feeding the GRU."""

    def __init__(self, model: WorldModel, length: int, batch=()):
        self.model, self.length, self.batch = model, length, batch
        self.past: list[torch.Tensor] = []

    def state(self) -> torch.Tensor:
        return history_state(self.model, self.past, self.batch)

    def push(self, z: torch.Tensor) -> None:
        if self.length <= 0:
            return
        self.past = (self.past + [z])[-self.length:]

    def copy(self) -> "History":
        h = History(self.model, self.length, self.batch)
        h.past = list(self.past)
        return h

    def expand(self, n: int) -> "History":
        h = History(self.model, self.length, (n, *self.batch))
        h.past = [z.expand(n, *z.shape) for z in self.past]
        return h


def _encode_mean(model, frames, coords):
    with torch.no_grad():
        return model.encoder(coords, observe_values(frames, coords))[0]


def train_stage2(model: WorldModel, trajs: Sequence[FieldTrajectory], cfg: TrainConfig,
                 store: ParamStore | None = None, on_epoch: Callable | None = None) -> list[dict]:
    """Fit GRU + denoiser on consecutive encoded latents; encoder/decoder stay frozen."""
    if not trajs:
        raise ValueError("stage 2 needs at least one trajectory")
    rng = RngStream(cfg.seed, "stage2")
    parts = ("gru", "denoiser")
    _set_requires_grad(model, parts)
    store = store or world_store(model, parts, cfg)
    Th = cfg.history_len
    # target index t+1 must stay inside the training segment
    pairs = [(i, t) for i, tr in enumerate(trajs) for t in range(_segment_len(tr, cfg.in_t_only) - 1)]
    if not pairs:
        raise ValueError("trajectories too short for stage 2")
    per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    total = per_epoch * cfg.stage2_epochs
    history, step = [], 0
    for epoch in range(cfg.stage2_epochs):
        order = rng.permutation(len(pairs))
        tot = 0.0
        for b in range(per_epoch):
            idx = [pairs[j] for j in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            B = len(idx)
            z_t = _encode_mean(model, _stack_frames(trajs, idx), uniform_coords((B, cfg.n_train), rng))
            z_n = _encode_mean(model, _stack_frames(trajs, [(i, t + 1) for i, t in idx]),
                               uniform_coords((B, cfg.n_train), rng))
            past = []
            for lag in range(Th, 0, -1):
                # windows shorter than Th near t=0 repeat the zero state via masking
                src = [(i, max(t - lag, 0)) for i, t in idx]
                z_p = _encode_mean(model, _stack_frames(trajs, src), uniform_coords((B, cfg.n_train), rng))
                valid = torch.tensor([t - lag >= 0 for _, t in idx])
                past.append((z_p, valid))
            h = model.init_history((B,))
            for z_p, valid in past:
                h = torch.where(valid[:, None, None], model.gru_step(h, z_p), h)
            loss = cfg.lam * model.diffusion_loss(z_t, z_n, h, rng)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"stage 2 loss non-finite at epoch {epoch}",
                                            {n: p.detach().clone() for n, p in store.params.items()})
            grads = gradient_of(loss, store)
            adam_step(store, grads, cosine_lr(step, total, cfg.lr, cfg.lr_floor))
            step += 1
            tot += loss.item()
        rec = {"epoch": epoch, "diffusion": tot / per_epoch}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    _set_requires_grad(model, ("encoder", "decoder", "gru", "denoiser"))
    return history


# ---------------------------------------------------------------------------
# evaluation

Dynamics = Callable[[torch.Tensor, torch.Tensor, RngStream], torch.Tensor]


@torch.no_grad()
def rollout_errors(model: WorldModel, traj: FieldTrajectory, coords0: torch.Tensor, rng: RngStream,
                   history_len: int = 3, dynamics: Dynamics | None = None) -> list[float]:
    """Encode o_0 once, then roll latent dynamics with no further observations."""
    u = torch.from_numpy(traj.data)
    H, W = u.shape[1:3]
    z = model.encoder(coords0, observe_values(u[0], coords0))[0]
    hist = History(model, history_len)
    step = dynamics or (lambda zt, ht, r: model.dynamics_sample(zt, ht, r))
    errs = []
    for t in range(traj.length):
        errs.append(float(((model.decode_grid(z, H, W) - u[t]) ** 2).mean()))
        if t + 1 < traj.length:
            h = hist.state()
            z_next = step(z, h, rng)
            hist.push(z)
            z = check_finite(z_next, "rollout latent")
    return errs


def rollout_eval(model: WorldModel, trajs: Sequence[FieldTrajectory], budget: int, seed: int,
                 history_len: int = 3, dynamics: Dynamics | None = None,
                 layouts: Sequence[torch.Tensor] | None = None) -> EvalReport:
    """Per-step full-grid MSE averaged over ``trajs``; one random layout per trajectory."""
    per = []
    for i, tr in enumerate(trajs):
        coords0 = layouts[i] if layouts is not None else init_layout(budget, RngStream(seed, f"layout/{i}")).coords
        per.append(rollout_errors(model, tr, coords0, RngStream(seed, f"rollout/{i}"), history_len, dynamics))
    return EvalReport([float(x) for x in np.mean(per, axis=0)], budget, seed, "rollout")


@torch.no_grad()
def reconstruction_mse(model: WorldModel, trajs: Sequence[FieldTrajectory], budget: int, seed: int) -> float:
    """Mean per-frame MSE of decode(encode(o_t)) with a fresh random layout per trajectory."""
    errs = []
    for i, tr in enumerate(trajs):
        coords = init_layout(budget, RngStream(seed, f"layout/{i}")).coords
        u = torch.from_numpy(tr.data)
        z = model.encoder(coords.expand(tr.length, *coords.shape), observe_values(u, coords.expand(tr.length, *coords.shape)))[0]
        errs.append(float(((model.decode_grid(z, *u.shape[1:3]) - u) ** 2).mean()))
    return float(np.mean(errs))
