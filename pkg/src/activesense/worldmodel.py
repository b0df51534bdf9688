"""Latent world model: set encoder, GRU + diffusion latent dynamics, coordinate decoder.

All modules take a leading batch axis.  Sets of observations are sorted into a
canonical order before attention, which makes the encoder exactly (bitwise)
invariant to the order sensors are listed in.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .environment import DOMAIN_HI, DOMAIN_LO, grid_coords
from .numerics import RngStream, init_torch_params, scaled_dot_attention

LOGSIG_MIN, LOGSIG_MAX = -10.0, 2.0


@dataclass(frozen=True)
class FourierConfig:
    scales: tuple[int, ...] = (2, 3)
    n_freq: int = 12
    base: float = 2.0

    def __post_init__(self):
        if self.n_freq < 1 or not self.scales:
            raise ValueError("need n_freq >= 1 and at least one scale")

    def frequencies(self, scale: int) -> np.ndarray:
        # log-uniform in [pi, pi * base**scale]
        return np.pi * self.base ** np.linspace(0.0, float(scale), self.n_freq)

    def scale_dim(self, d: int = 2) -> int:
        return d + 2 * self.n_freq * d

    def dim(self, d: int = 2) -> int:
        return d + len(self.scales) * 2 * self.n_freq * d


def _sincos(x: torch.Tensor, freqs: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    w = torch.as_tensor(freqs, dtype=x.dtype)
    xw = (x[..., :, None] * w).flatten(-2)
    return torch.sin(xw), torch.cos(xw)


def fourier_embed(x: torch.Tensor, cfg: FourierConfig) -> torch.Tensor:
    """[x, sin(xω^s), cos(xω^s) for s in scales], frequencies applied per axis."""
    parts = [x]
    for s in cfg.scales:
        parts.extend(_sincos(x, cfg.frequencies(s)))
    return torch.cat(parts, -1)


def fourier_embed_scale(x: torch.Tensor, cfg: FourierConfig, scale: int) -> torch.Tensor:
    return torch.cat([x, *_sincos(x, cfg.frequencies(scale))], -1)


def canonical_order(coords: torch.Tensor, values: torch.Tensor | None = None) -> torch.Tensor:
    """Per-batch permutation sorting points by (x, y, values...)."""
    keys = [coords[..., 1], coords[..., 0]]
    if values is not None:
        keys = [values[..., c] for c in reversed(range(values.shape[-1]))] + keys
    keys = np.stack([k.detach().cpu().numpy() for k in keys])
    return torch.from_numpy(np.lexsort(keys, axis=-1))


def gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(x, -2, idx[..., None].expand(*idx.shape, x.shape[-1]))


def check_in_domain(coords: torch.Tensor) -> None:
    if ((coords < DOMAIN_LO) | (coords > DOMAIN_HI)).any():
        raise ValueError("query coordinate outside the domain")


# ---------------------------------------------------------------------------
# building blocks

class MultiHeadAttention(nn.Module):
    def __init__(self, q_dim, kv_dim, heads, head_dim, out_dim, v_dim=None):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        inner = heads * head_dim
        self.to_q = nn.Linear(q_dim, inner)
        self.to_k = nn.Linear(kv_dim, inner)
        self.to_v = nn.Linear(v_dim or kv_dim, inner)
        self.to_out = nn.Linear(inner, out_dim)

    def _split(self, x):
        return x.unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)

    def forward(self, xq, xk, xv=None):
        q = self._split(self.to_q(xq))
        k = self._split(self.to_k(xk))
        v = self._split(self.to_v(xk if xv is None else xv))
        out = scaled_dot_attention(q, k, v)
        return self.to_out(out.transpose(-3, -2).flatten(-2))


class FeedForward(nn.Module):
    def __init__(self, dim, hidden=None, out=None):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden or 2 * dim)
        self.fc2 = nn.Linear(hidden or 2 * dim, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(self.norm(x))))


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim, heads, head_dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, heads, head_dim, dim)
        self.ff = FeedForward(dim)

    def forward(self, x):
        h = self.norm(x)
        x = x + self.attn(h, h)
        return x + self.ff(x)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class WorldConfig:
    channels: int = 1
    n_latents: int = 32
    query_dim: int = 128
    latent_dim: int = 16
    enc_heads: int = 4
    enc_head_dim: int = 32
    fourier: FourierConfig = field(default_factory=FourierConfig)
    dec_blocks: int = 2
    dec_heads: int = 4
    dec_head_dim: int = 32
    dec_feature_dim: int = 16
    dec_width: int = 128
    dyn_dim: int = 128
    dyn_heads: int = 4
    dyn_blocks: int = 4
    dyn_mod_dim: int = 512
    step_embed_dim: int = 32
    gru_hidden: int = 32
    gru_layers: int = 2
    diffusion_steps: int = 3
    alpha_bar_final: float = 0.02
    query_chunk: int = 256

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "fourier" in d and isinstance(d["fourier"], dict):
            f = dict(d["fourier"])
            f["scales"] = tuple(f["scales"])
            d["fourier"] = FourierConfig(**f)
        return cls(**d)


@dataclass
class LatentState:
    z: torch.Tensor           # ... x M x d_z
    mu: torch.Tensor
    logsig: torch.Tensor
    h: torch.Tensor | None = None


# ---------------------------------------------------------------------------
# encoder

class SetEncoder(nn.Module):
    def __init__(self, cfg: WorldConfig):
        super().__init__()
        self.cfg = cfg
        d_q, gdim = cfg.query_dim, cfg.fourier.dim(2)
        self.queries = nn.Parameter(torch.zeros(cfg.n_latents, d_q))
        self.value_embed = nn.Linear(cfg.channels, d_q)
        self.geo_norm = nn.LayerNorm(d_q)
        self.geo_attn = MultiHeadAttention(d_q, gdim, cfg.enc_heads, cfg.enc_head_dim, d_q)
        self.geo_ff = FeedForward(d_q)
        self.obs_norm = nn.LayerNorm(d_q)
        self.obs_attn = MultiHeadAttention(d_q, gdim, cfg.enc_heads, cfg.enc_head_dim, d_q, v_dim=d_q)
        self.obs_ff = FeedForward(d_q)
        self.to_mu = nn.Linear(d_q, cfg.latent_dim)
        self.to_logsig = nn.Linear(d_q, cfg.latent_dim)

    def forward(self, coords: torch.Tensor, values: torch.Tensor):
        if coords.shape[-2] == 0:
            raise ValueError("cannot encode an empty observation set")
        idx = canonical_order(coords, values)
        coords, values = gather_rows(coords, idx), gather_rows(values, idx)
        pos = fourier_embed(coords, self.cfg.fourier)
        q = self.queries.expand(*coords.shape[:-2], *self.queries.shape)
        z_geo = q + self.geo_ff(self.geo_attn(self.geo_norm(q), pos))
        vals = self.value_embed(values)
        z_obs = z_geo + self.obs_ff(self.obs_attn(self.obs_norm(z_geo), pos, vals))
        mu = self.to_mu(z_obs)
        logsig = self.to_logsig(z_obs).clamp(LOGSIG_MIN, LOGSIG_MAX)
        return mu, logsig


# ---------------------------------------------------------------------------
# decoder

class FieldDecoder(nn.Module):
    def __init__(self, cfg: WorldConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dec_heads * cfg.dec_head_dim
        self.lift = nn.Linear(cfg.latent_dim, d)
        self.blocks = nn.ModuleList(SelfAttentionBlock(d, cfg.dec_heads, cfg.dec_head_dim)
                                    for _ in range(cfg.dec_blocks))
        self.token_norm = nn.LayerNorm(d)
        sdim = cfg.fourier.scale_dim(2)
        self.cross = nn.ModuleList(MultiHeadAttention(sdim, d, cfg.dec_heads, cfg.dec_head_dim, cfg.dec_feature_dim)
                                   for _ in cfg.fourier.scales)
        w = cfg.dec_width
        self.mlp = nn.Sequential(nn.Linear(len(cfg.fourier.scales) * cfg.dec_feature_dim, w), nn.SiLU(),
                                 nn.Linear(w, w), nn.SiLU(), nn.Linear(w, cfg.channels))

    def tokens(self, z: torch.Tensor) -> torch.Tensor:
        x = self.lift(z)
        for blk in self.blocks:
            x = blk(x)
        return self.token_norm(x)

    def query(self, tokens: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        feats = [attn(fourier_embed_scale(coords, self.cfg.fourier, s), tokens)
                 for s, attn in zip(self.cfg.fourier.scales, self.cross)]
        return self.mlp(torch.cat(feats, -1))

    def forward(self, z: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        check_in_domain(coords)
        tokens = self.tokens(z)
        batch = coords.shape[:-2]
        if tokens.shape[:-2] != batch:
            tokens = tokens.expand(*batch, *tokens.shape[-2:])
        P, chunk = coords.shape[-2], self.cfg.query_chunk
        n_chunks = max(1, math.ceil(P / chunk))
        pad = n_chunks * chunk - P
        # fixed-size query chunks keep every output row independent of P
        c = torch.cat([coords, coords.new_zeros(*batch, pad, 2)], -2) if pad else coords
        c = c.reshape(*batch, n_chunks, chunk, 2)
        tok = tokens.unsqueeze(-3).expand(*batch, n_chunks, *tokens.shape[-2:])
        out = self.query(tok, c).reshape(*batch, n_chunks * chunk, -1)
        return out[..., :P, :]


# ---------------------------------------------------------------------------
# recurrent history

class GRUCell(nn.Module):
    def __init__(self, in_dim, hidden):
        super().__init__()
        self.hidden = hidden
        self.ih = nn.Linear(in_dim, 3 * hidden)
        self.hh = nn.Linear(hidden, 3 * hidden)

    def gates(self, h, x):
        gi, gh = self.ih(x), self.hh(h)
        ir, iu, inn = gi.chunk(3, -1)
        hr, hu, hn = gh.chunk(3, -1)
        r = torch.sigmoid(ir + hr)
        u = torch.sigmoid(iu + hu)
        n = torch.tanh(inn + r * hn)
        return r, u, n

    def forward(self, h, x):
        _, u, n = self.gates(h, x)
        return (1 - u) * n + u * h


class TokenGRU(nn.Module):
    """Stacked GRU applied to every latent token with shared weights.

    The state concatenates all layers along the feature axis; the last
    ``hidden`` features are the top layer.
    """

    def __init__(self, in_dim, hidden, layers):
        super().__init__()
        self.hidden = hidden
        self.cells = nn.ModuleList(GRUCell(in_dim if i == 0 else hidden, hidden) for i in range(layers))

    @property
    def state_dim(self):
        return self.hidden * len(self.cells)

    def forward(self, h, z):
        x, new = z, []
        for i, cell in enumerate(self.cells):
            x = cell(h[..., i * self.hidden:(i + 1) * self.hidden], x)
            new.append(x)
        return torch.cat(new, -1)

    def top(self, h):
        return h[..., -self.hidden:]


# ---------------------------------------------------------------------------
# diffusion

@dataclass(frozen=True)
class NoiseSchedule:
    """Exponentially decreasing ᾱ_k = exp(-c k / K), with c set so ᾱ_K = alpha_bar_final."""
    steps: int = 3
    alpha_bar_final: float = 0.02

    def __post_init__(self):
        if self.steps < 1 or not 0 < self.alpha_bar_final < 1:
            raise ValueError("invalid noise schedule")

    @property
    def alpha_bar(self) -> np.ndarray:
        c = -math.log(self.alpha_bar_final)
        return np.exp(-c * np.arange(self.steps + 1) / self.steps)

    @property
    def alpha(self) -> np.ndarray:
        ab = self.alpha_bar
        return np.concatenate([[1.0], ab[1:] / ab[:-1]])

    @property
    def sigma(self) -> np.ndarray:
        ab, a = self.alpha_bar, self.alpha
        var = np.zeros(self.steps + 1)
        var[1:] = (1 - a[1:]) * (1 - ab[:-1]) / (1 - ab[1:])
        return np.sqrt(var)


def diffusion_forward(z0: torch.Tensor, k, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form q(z^k | z^0)."""
    k_arr = np.asarray(k)
    if (k_arr < 1).any() or (k_arr > sched.steps).any():
        raise ValueError(f"diffusion step {k} outside 1..{sched.steps}")
    ab = torch.as_tensor(sched.alpha_bar[k_arr], dtype=z0.dtype)
    if ab.dim():
        ab = ab.reshape(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


class AdaLNBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = MultiHeadAttention(dim, dim, heads, dim // heads, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x, mod):
        shift1, scale1, gate1, shift2, scale2, gate2 = mod.chunk(6, -1)
        h = self.norm1(x) * (1 + scale1) + shift1
        x = x + gate1 * self.attn(h, h)
        h = self.norm2(x) * (1 + scale2) + shift2
        return x + gate2 * self.fc2(F.gelu(self.fc1(h)))


class Denoiser(nn.Module):
    """Transformer noise predictor over [context; noisy target] tokens with adaLN-Zero."""

    def __init__(self, cfg: WorldConfig):
        super().__init__()
        self.cfg = cfg
        D, M = cfg.dyn_dim, cfg.n_latents
        self.inp = nn.Linear(cfg.latent_dim, D)
        self.pos = nn.Parameter(torch.zeros(2 * M, D))
        self.step_embed = nn.Embedding(cfg.diffusion_steps + 1, cfg.step_embed_dim)
        n_mod = cfg.dyn_blocks * 6 * D + 2 * D
        self.mod_in = nn.Linear(cfg.step_embed_dim + cfg.gru_hidden, cfg.dyn_mod_dim)
        self.mod_out = nn.Linear(cfg.dyn_mod_dim, n_mod)
        self.mod_out._keep_init = True
        nn.init.zeros_(self.mod_out.weight)
        nn.init.zeros_(self.mod_out.bias)
        self.blocks = nn.ModuleList(AdaLNBlock(D, cfg.dyn_heads) for _ in range(cfg.dyn_blocks))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False)
        self.out = nn.Linear(D, cfg.latent_dim)

    def modulation(self, k: torch.Tensor, h_top: torch.Tensor) -> torch.Tensor:
        e = self.step_embed(k)                                   # B x d_k
        e = e[..., None, :].expand(*h_top.shape[:-1], e.shape[-1])
        c = torch.cat([e, h_top], -1)                            # per-token conditioning
        mod = self.mod_out(F.silu(self.mod_in(c)))
        return torch.cat([mod, mod], -2)                         # context and target share h per token

    def forward(self, x: torch.Tensor, k: torch.Tensor, h_top: torch.Tensor) -> torch.Tensor:
        D = self.cfg.dyn_dim
        mod = self.modulation(k, h_top)
        y = self.inp(x) + self.pos
        for i, blk in enumerate(self.blocks):
            y = blk(y, mod[..., i * 6 * D:(i + 1) * 6 * D])
        shift, scale = mod[..., -2 * D:].chunk(2, -1)
        return self.out(self.final_norm(y) * (1 + scale) + shift)


# ---------------------------------------------------------------------------
# full model

class WorldModel(nn.Module):
    def __init__(self, cfg: WorldConfig | None = None, rng: RngStream | None = None):
        super().__init__()
        self.cfg = cfg = cfg or WorldConfig()
        self.encoder = SetEncoder(cfg)
        self.decoder = FieldDecoder(cfg)
        self.gru = TokenGRU(cfg.latent_dim, cfg.gru_hidden, cfg.gru_layers)
        self.denoiser = Denoiser(cfg)
        self.schedule = NoiseSchedule(cfg.diffusion_steps, cfg.alpha_bar_final)
        rng = rng or RngStream(0, "init")
        init_torch_params(self, rng.child("world"))
        with torch.no_grad():
            self.encoder.queries.copy_(rng.child("queries").normal(self.encoder.queries.shape))
            self.denoiser.pos.copy_(rng.child("pos").normal(self.denoiser.pos.shape) * 0.02)
            self.denoiser.out.weight.mul_(0.1)
            self.encoder.to_logsig.bias.fill_(-3.0)

    # -- encoder / decoder
    def encode(self, coords, values, rng: RngStream | None = None, sample: bool = True) -> LatentState:
        mu, logsig = self.encoder(coords, values)
        if sample and rng is not None:
            z = mu + logsig.exp() * rng.normal(mu.shape, mu.dtype)
        else:
            z = mu
        return LatentState(z, mu, logsig)

    def decode(self, z, coords):
        return self.decoder(z, coords)

    def decode_grid(self, z, height, width):
        coords = grid_coords(height, width).to(z.dtype)
        out = self.decoder(z, coords.expand(*z.shape[:-2], *coords.shape))
        return out.reshape(*z.shape[:-2], height, width, -1)

    # -- dynamics
    def init_history(self, batch=()) -> torch.Tensor:
        return torch.zeros(*batch, self.cfg.n_latents, self.gru.state_dim)

    def gru_step(self, h, z):
        return self.gru(h, z)

    def denoise_predict(self, x_k, k, h):
        k = torch.as_tensor(k, dtype=torch.long)
        if k.dim() == 0:
            k = k.expand(x_k.shape[:-2]) if x_k.dim() > 2 else k
        return self.denoiser(x_k, k, self.gru.top(h))

    def diffusion_loss(self, z_t, z_next, h_t, rng: RngStream) -> torch.Tensor:
        B = z_t.shape[0]
        k = rng.integers(1, self.cfg.diffusion_steps + 1, size=B)
        eps = rng.normal(z_next.shape, z_next.dtype)
        noisy = diffusion_forward(z_next, k, eps, self.schedule)
        pred = self.denoise_predict(torch.cat([z_t, noisy], -2), torch.as_tensor(k), h_t)
        return ((pred[..., self.cfg.n_latents:, :] - eps) ** 2).mean()

    def dynamics_sample(self, z_t, h_t, rng: RngStream, noise_scale: float = 1.0,
                        shared_noise: bool = False) -> torch.Tensor:
        """Reverse DDPM from pure noise to ẑ_{t+1}; ``noise_scale=0`` drops the σ_k ξ term.

        ``shared_noise`` draws one M x d noise sequence and reuses it across the batch.
        """
        sched, M = self.schedule, self.cfg.n_latents
        a, ab, sig = sched.alpha, sched.alpha_bar, sched.sigma
        batch = z_t.shape[:-2]
        shape = z_t.shape[-2:] if shared_noise else z_t.shape

        def noise():
            return rng.normal(shape, z_t.dtype).expand(z_t.shape)

        x = noise()
        for k in range(sched.steps, 0, -1):
            kk = torch.full(batch, k, dtype=torch.long) if batch else torch.tensor(k)
            eps = self.denoise_predict(torch.cat([z_t, x], -2), kk, h_t)[..., M:, :]
            x = (x - (1 - a[k]) / math.sqrt(1 - ab[k]) * eps) / math.sqrt(a[k])
            if k > 1 and noise_scale:
                x = x + noise_scale * sig[k] * noise()
        return x

    # -- reward
    def reward(self, u_true: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        H, W = u_true.shape[-3], u_true.shape[-2]
        u_hat = self.decode_grid(z, H, W)
        return -((u_hat - u_true) ** 2).mean(dim=(-3, -2, -1))


def kl_standard_normal(mu: torch.Tensor, logsig: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma²) || N(0, 1)) summed over the trailing two axes."""
    return 0.5 * (mu ** 2 + torch.exp(2 * logsig) - 1 - 2 * logsig).sum(dim=(-2, -1))


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).mean()
