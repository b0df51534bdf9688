"""Transformer sensing policy: per-sensor Gaussian displacements.

Sensor queries (Fourier position features + embedded reading) cross-attend to
the predicted next latent at every frequency scale, then self-attend across
the array.  Sensors are processed in a canonical order and the outputs are
scattered back, so the map is exactly equivariant to sensor permutations.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import RngStream, init_torch_params
from .worldmodel import (LOGSIG_MAX, LOGSIG_MIN, FourierConfig, MultiHeadAttention, SelfAttentionBlock,
                         canonical_order, fourier_embed, fourier_embed_scale, gather_rows)

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class PolicyConfig:
    channels: int = 1
    latent_dim: int = 16
    fourier: FourierConfig = field(default_factory=lambda: FourierConfig((2, 3), 7))
    value_embed_dim: int = 32
    heads: int = 4
    head_dim: int = 128
    scale_feature_dim: int = 64
    blocks: int = 2
    a_max: float = 0.05
    init_std: float = 0.025

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("fourier"), dict):
            f = dict(d["fourier"])
            f["scales"] = tuple(f["scales"])
            d["fourier"] = FourierConfig(**f)
        return cls(**d)


@dataclass
class Action:
    displacement: torch.Tensor   # ... x N x 2, clipped
    pre_clip: torch.Tensor       # ... x N x 2, the Gaussian sample
    log_prob: torch.Tensor       # ... x N, density of the pre-clip sample


class SensingPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig | None = None, rng: RngStream | None = None, value_head: bool = False):
        super().__init__()
        self.cfg = cfg = cfg or PolicyConfig()
        D = cfg.model_dim
        self.value_embed = nn.Linear(cfg.channels, cfg.value_embed_dim)
        sdim = cfg.fourier.scale_dim(2) + cfg.value_embed_dim
        self.cross = nn.ModuleList(
            MultiHeadAttention(sdim, cfg.latent_dim, cfg.heads, cfg.head_dim, cfg.scale_feature_dim)
            for _ in cfg.fourier.scales)
        self.lift = nn.Linear(len(cfg.fourier.scales) * cfg.scale_feature_dim + cfg.fourier.dim(2), D)
        self.blocks = nn.ModuleList(SelfAttentionBlock(D, cfg.heads, cfg.head_dim) for _ in range(cfg.blocks))
        self.norm = nn.LayerNorm(D)
        self.head = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, 4))
        self.value = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, 1)) if value_head else None
        init_torch_params(self, (rng or RngStream(0, "init")).child("policy"))
        with torch.no_grad():
            self.head[-1].weight.mul_(0.01)

    def features(self, z_next: torch.Tensor, coords: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        emb = self.value_embed(values)
        feats = []
        for s, attn in zip(self.cfg.fourier.scales, self.cross):
            q = torch.cat([fourier_embed_scale(coords, self.cfg.fourier, s), emb], -1)
            feats.append(attn(q, z_next))
        x = self.lift(torch.cat(feats + [fourier_embed(coords, self.cfg.fourier)], -1))
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward(self, z_next: torch.Tensor, coords: torch.Tensor, values: torch.Tensor,
                with_value: bool = False):
        """Return (mu, logsig), each ... x N x 2 (plus V(s) when ``with_value``)."""
        if coords.shape[-2] == 0:
            raise ValueError("policy needs at least one sensor")
        if z_next.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent dim {z_next.shape[-1]} != {self.cfg.latent_dim}")
        if coords.shape[:-1] != values.shape[:-1]:
            raise ValueError("coordinates and values do not align")
        idx = canonical_order(coords, values)
        x = self.features(z_next, gather_rows(coords, idx), gather_rows(values, idx))
        out = self.head(x)
        mu = self.cfg.a_max * out[..., :2]
        logsig = (out[..., 2:] + math.log(self.cfg.init_std)).clamp(LOGSIG_MIN, LOGSIG_MAX)
        inv = torch.argsort(idx, dim=-1)
        mu, logsig = gather_rows(mu, inv), gather_rows(logsig, inv)
        if with_value:
            if self.value is None:
                raise RuntimeError("policy was built without a value head")
            return mu, logsig, self.value(x.mean(-2)).squeeze(-1)
        return mu, logsig


def log_prob(action: torch.Tensor, mu: torch.Tensor, logsig: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log density per sensor (summed over the 2 displacement axes)."""
    if action.shape != torch.broadcast_shapes(action.shape, mu.shape):
        raise ValueError("action and distribution shapes do not align")
    z = (action - mu) * torch.exp(-logsig)
    return (-0.5 * z ** 2 - logsig - 0.5 * LOG_2PI).sum(-1)


def sample_action(mu: torch.Tensor, logsig: torch.Tensor, a_max: float, rng: RngStream) -> Action:
    pre = mu + torch.exp(logsig) * rng.normal(mu.shape, mu.dtype)
    return Action(pre.clamp(-a_max, a_max), pre, log_prob(pre, mu, logsig))
