"""Shared test utilities: finite-difference oracles and small model configs."""
from __future__ import annotations

import torch

from activesense.policy import PolicyConfig
from activesense.worldmodel import FourierConfig, WorldConfig


def numeric_grad(f, x: torch.Tensor, step: float = 1e-6, index=None) -> torch.Tensor:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    ``index`` limits the probe to a subset of flat positions; other entries stay 0.
    """
    flat = x.data.view(-1)
    out = torch.zeros_like(flat)
    positions = range(flat.numel()) if index is None else index
    with torch.no_grad():
        for i in positions:
            old = flat[i].item()
            flat[i] = old + step
            hi = f().item()
            flat[i] = old - step
            lo = f().item()
            flat[i] = old
            out[i] = (hi - lo) / (2 * step)
    return out.view_as(x)


def max_rel_error(auto: torch.Tensor, num: torch.Tensor) -> float:
    """max |a - n| normalised by the largest gradient magnitude of the block."""
    scale = max(num.abs().max().item(), auto.abs().max().item(), 1e-12)
    return (auto - num).abs().max().item() / scale


def tiny_world(**kw) -> WorldConfig:
    """Every width ≤ 8 so finite-difference sweeps stay cheap."""
    base = dict(n_latents=4, query_dim=8, latent_dim=4, enc_heads=2, enc_head_dim=4,
                fourier=FourierConfig((1, 2), 2), dec_blocks=1, dec_heads=2, dec_head_dim=4, dec_feature_dim=4,
                dec_width=8, dyn_dim=8, dyn_heads=2, dyn_blocks=1, dyn_mod_dim=8, step_embed_dim=4,
                gru_hidden=4, query_chunk=16)
    base.update(kw)
    return WorldConfig(**base)


def tiny_policy(latent_dim: int = 4, **kw) -> PolicyConfig:
    base = dict(latent_dim=latent_dim, fourier=FourierConfig((1, 2), 2), value_embed_dim=4, heads=2, head_dim=4,
                scale_feature_dim=4, blocks=1)
    base.update(kw)
    return PolicyConfig(**base)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Log one acceptance outcome; conftest prints the table at the end of the session."""
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
