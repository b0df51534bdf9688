"""Autodiff vs central finite differences for every trainable block, in float64 at widths <= 8."""
from __future__ import annotations

import torch

from activesense.numerics import RngStream
from activesense.policy import SensingPolicy, log_prob
from activesense.worldmodel import WorldModel, kl_standard_normal

from helpers import max_rel_error, numeric_grad, tiny_policy, tiny_world

PROBES_PER_TENSOR = 6
STEP = 1e-6


def _check(f, tensors: dict[str, torch.Tensor], seed: int = 0) -> float:
    """Worst error over a few probed entries of each tensor, normalised by the block's gradient scale.

    Per-tensor normalisation would flag tensors whose exact gradient is zero
    (attention key biases cancel in the softmax), where autodiff returns ~1e-16.
    """
    names = list(tensors)
    autos = torch.autograd.grad(f(), [tensors[n] for n in names], allow_unused=True)
    g = torch.Generator().manual_seed(seed)
    got, want = [], []
    for name, auto in zip(names, autos):
        x = tensors[name]
        auto = torch.zeros_like(x) if auto is None else auto
        k = min(PROBES_PER_TENSOR, x.numel())
        idx = torch.randperm(x.numel(), generator=g)[:k].tolist()
        got.append(auto.reshape(-1)[idx])
        want.append(numeric_grad(f, x, STEP, idx).reshape(-1)[idx])
    return max_rel_error(torch.cat(got), torch.cat(want))


def _world():
    return WorldModel(tiny_world(), RngStream(0, "grad")).double()


def _data(seed=0, n=6):
    g = torch.Generator().manual_seed(seed)
    coords = torch.rand(n, 2, generator=g, dtype=torch.float64) * 1.8 - 0.9
    return g, coords, torch.randn(n, 1, generator=g, dtype=torch.float64)


def _params(module, prefix=""):
    return {prefix + n: p for n, p in module.named_parameters()}


def encoder_error() -> float:
    m = _world()
    g, c, v = _data()
    w_mu, w_ls = torch.randn(4, 4, generator=g, dtype=torch.float64), torch.randn(4, 4, generator=g, dtype=torch.float64)

    def f():
        mu, ls = m.encoder(c, v)
        return (mu * w_mu).sum() + (ls * w_ls).sum()
    return _check(f, _params(m.encoder))


def gru_error() -> float:
    m = _world()
    g = torch.Generator().manual_seed(1)
    h = torch.randn(4, m.gru.state_dim, generator=g, dtype=torch.float64, requires_grad=True)
    z = torch.randn(4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(4, m.gru.state_dim, generator=g, dtype=torch.float64)

    def f():
        return (m.gru_step(h, z) * w).sum()
    return _check(f, {**_params(m.gru), "h": h, "z": z})


def denoiser_error() -> float:
    m = _world()
    # break the zero-initialised gates so every path carries gradient
    with torch.no_grad():
        for p in m.denoiser.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=torch.Generator().manual_seed(p.numel()), dtype=p.dtype))
    g = torch.Generator().manual_seed(2)
    x = torch.randn(8, 4, generator=g, dtype=torch.float64, requires_grad=True)
    h = torch.randn(4, m.gru.state_dim, generator=g, dtype=torch.float64)
    w = torch.randn(8, 4, generator=g, dtype=torch.float64)

    def f():
        return (m.denoise_predict(x, 2, h) * w).sum()
    return _check(f, {**_params(m.denoiser), "x": x})


def decoder_error() -> float:
    m = _world()
    g, c, _ = _data(3, n=7)
    z = torch.randn(4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(7, 1, generator=g, dtype=torch.float64)

    def f():
        return (m.decode(z, c) * w).sum()
    return _check(f, {**_params(m.decoder), "z": z})


def policy_error() -> float:
    p = SensingPolicy(tiny_policy(), RngStream(0, "grad")).double()
    with torch.no_grad():
        p.head[-1].weight.mul_(100.0)          # undo the small output init so the head is exercised
    g, c, v = _data(4)
    z = torch.randn(4, 4, generator=g, dtype=torch.float64)
    w_mu, w_ls = torch.randn(6, 2, generator=g, dtype=torch.float64), torch.randn(6, 2, generator=g, dtype=torch.float64)

    def f():
        mu, ls = p(z, c, v)
        return (mu * w_mu).sum() + (ls * w_ls).sum()
    return _check(f, _params(p))


def log_prob_error() -> float:
    g = torch.Generator().manual_seed(5)
    a, mu = (torch.randn(5, 2, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(2))
    ls = (0.3 * torch.randn(5, 2, generator=g, dtype=torch.float64)).requires_grad_()

    def f():
        return log_prob(a, mu, ls).sum()
    return _check(f, {"a": a, "mu": mu, "logsig": ls})


def full_loss_error() -> float:
    """Stage-1 objective (reconstruction + KL) plus the diffusion loss, through every block."""
    m = _world()
    g, c, v = _data(6)
    frame = torch.randn(4, 4, 1, generator=g, dtype=torch.float64)

    def f():
        rng = RngStream(7, "loss")             # identical noise on every evaluation
        st = m.encode(c, v, rng)
        recon = ((m.decode_grid(st.z, 4, 4) - frame) ** 2).mean()
        kl = kl_standard_normal(st.mu, st.logsig)
        z = st.z[None]
        h = m.gru_step(m.init_history((1,)).double(), z)
        return recon + 1e-2 * kl + m.diffusion_loss(z, z.flip(-1), h, rng)
    return _check(f, _params(m))


BLOCKS = {
    "encoder": encoder_error,
    "gru": gru_error,
    "denoiser": denoiser_error,
    "decoder": decoder_error,
    "policy": policy_error,
    "log_prob": log_prob_error,
    "full_loss": full_loss_error,
}
