"""Tensor plumbing: seeded random streams, attention, gradients, Adam and checkpoints.

Tensors are plain ``torch.Tensor`` objects in float32.  Autograd comes from
torch; everything that decides training behaviour (optimizer maths, random
draws, serialization) lives here so it is reproducible bit for bit.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

DTYPE = torch.float32


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where only finite values are allowed."""


class CheckpointFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# finite guards

def as_tensor(data, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Build a tensor, rejecting non-finite entries."""
    t = torch.as_tensor(np.asarray(data), dtype=dtype)
    if not torch.isfinite(t).all():
        raise NonFiniteError("tensor construction received non-finite values")
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if t.is_floating_point() and not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


class _FiniteGuard(TorchFunctionMode):
    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        outs = out if isinstance(out, (tuple, list)) else (out,)
        for o in outs:
            if isinstance(o, torch.Tensor) and o.is_floating_point() and o.numel():
                if not torch.isfinite(o.detach()).all():
                    name = getattr(func, "__name__", repr(func))
                    raise NonFiniteError(f"non-finite output from {name}")
        return out


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every torch op output for NaN/Inf while active."""
    if not enabled:
        yield
        return
    with _FiniteGuard():
        yield


def debug_enabled() -> bool:
    return os.environ.get("ACTIVESENSE_DEBUG", "") not in ("", "0")


# ---------------------------------------------------------------------------
# random streams

def _stream_key(seed: int, label: str) -> int:
    h = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(h[:16], "little")


@dataclass
class RngStream:
    """Counter-based generator (Philox) keyed by ``(seed, label)``.

    ``counter`` counts draw calls; two streams with equal seed and label
    produce the same sequence on every platform.
    """

    seed: int
    label: str = "root"
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=_stream_key(self.seed, self.label)))
        self.counter = 0

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    @property
    def generator(self) -> np.random.Generator:
        self.counter += 1
        return self._gen

    def normal(self, shape, dtype: torch.dtype = DTYPE) -> torch.Tensor:
        return torch.from_numpy(self.generator.standard_normal(tuple(shape))).to(dtype)

    def uniform(self, low: float, high: float, shape, dtype: torch.dtype = DTYPE) -> torch.Tensor:
        return torch.from_numpy(self.generator.uniform(low, high, tuple(shape))).to(dtype)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def random(self) -> float:
        return float(self.generator.random())

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def init_torch_params(module: torch.nn.Module, rng: RngStream) -> torch.nn.Module:
    """Reinitialise a module's parameters from ``rng`` so init is platform-stable.

    Linear weights get a uniform fan-in init; biases start at zero.  Modules can
    opt out by setting ``_keep_init = True`` (used for zero-init layers).
    """
    for name, mod in module.named_modules():
        if getattr(mod, "_keep_init", False):
            continue
        if isinstance(mod, torch.nn.Linear):
            bound = 1.0 / math.sqrt(mod.in_features)
            with torch.no_grad():
                mod.weight.copy_(rng.uniform(-bound, bound, mod.weight.shape))
                if mod.bias is not None:
                    mod.bias.zero_()
        elif isinstance(mod, torch.nn.Embedding):
            with torch.no_grad():
                mod.weight.copy_(rng.normal(mod.weight.shape) * 0.02)
    return module


# ---------------------------------------------------------------------------
# attention

def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                         return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes; leading axes broadcast."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} does not match key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if k.shape[-2] == 0:
        raise ValueError("attention needs at least one key")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    w = torch.softmax(scores, dim=-1)
    out = w @ v
    return (out, w) if return_weights else out


# ---------------------------------------------------------------------------
# parameters and Adam

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class ParamStore:
    """Named parameters with Adam moments and per-parameter lr multipliers."""

    def __init__(self, params: Mapping[str, torch.Tensor], lr_scale: Mapping[str, float] | None = None):
        self.params: dict[str, torch.Tensor] = dict(params)
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.steps = {n: 0 for n in self.params}
        self.lr_scale = {n: 1.0 for n in self.params}
        for prefix, s in (lr_scale or {}).items():
            for n in self.params:
                if n == prefix or n.startswith(prefix + "."):
                    self.lr_scale[n] = float(s)

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "", lr_scale=None) -> "ParamStore":
        named = {(prefix + n if not prefix else f"{prefix}.{n}"): p for n, p in module.named_parameters()}
        return cls(named, lr_scale)

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for n, p in self.params.items():
            out[n] = p.detach()
            out[f"adam.m/{n}"] = self.m[n]
            out[f"adam.v/{n}"] = self.v[n]
            out[f"adam.step/{n}"] = torch.tensor(self.steps[n], dtype=torch.int64)
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor], strict: bool = True):
        for n, p in self.params.items():
            if n not in tensors:
                if strict:
                    raise KeyError(f"checkpoint has no parameter {n!r}")
                continue
            src = tensors[n]
            if tuple(src.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {n}: {tuple(src.shape)} vs {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(src)
            if f"adam.m/{n}" in tensors:
                self.m[n] = tensors[f"adam.m/{n}"].clone()
                self.v[n] = tensors[f"adam.v/{n}"].clone()
                self.steps[n] = int(tensors[f"adam.step/{n}"])


def gradient_of(f: Callable[[], torch.Tensor] | torch.Tensor, store: ParamStore) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar objective w.r.t. every parameter in ``store``.

    Parameters the objective does not touch get zeros.
    """
    out = f() if callable(f) else f
    if out.numel() != 1:
        raise ValueError(f"objective must be scalar, got shape {tuple(out.shape)}")
    check_finite(out.detach(), "objective")
    names = list(store.params)
    tensors = [store.params[n] for n in names]
    if not out.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(out.reshape(()), tensors, allow_unused=True)
    return {n: (torch.zeros_like(t) if g is None else g.detach())
            for n, t, g in zip(names, tensors, grads)}


def adam_step(store: ParamStore, grads: Mapping[str, torch.Tensor], lr: float,
              betas: tuple[float, float] = (BETA1, BETA2), eps: float = ADAM_EPS) -> ParamStore:
    """In-place bias-corrected Adam update of every parameter that has a gradient."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    b1, b2 = betas
    for n, g in grads.items():
        p = store.params[n]
        if tuple(g.shape) != tuple(p.shape):
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {n} {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {n!r}")
        store.steps[n] += 1
        t = store.steps[n]
        store.m[n].mul_(b1).add_(g, alpha=1 - b1)
        store.v[n].mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = store.m[n] / (1 - b1 ** t)
        v_hat = store.v[n] / (1 - b2 ** t)
        with torch.no_grad():
            p.sub_(lr * store.lr_scale[n] * m_hat / (v_hat.sqrt() + eps))
    return store


# ---------------------------------------------------------------------------
# learning-rate schedules

def cosine_lr(step: int, total: int, lr: float, floor: float = 1e-5) -> float:
    if total <= 1:
        return lr
    frac = min(max(step / (total - 1), 0.0), 1.0)
    lo = min(floor, lr)
    return lo + 0.5 * (lr - lo) * (1 + math.cos(math.pi * frac))


def linear_then_constant_lr(step: int, total: int, start: float, end: float) -> float:
    half = max(total // 2, 1)
    if step >= half:
        return end
    return start + (end - start) * step / half


# ---------------------------------------------------------------------------
# checkpoint file: "LASR", u32 version, then tensor records until EOF

MAGIC = b"LASR"
VERSION = 1
_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8"), 2: (torch.int64, "<i8")}
_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor]) -> None:
    buf = bytearray(MAGIC + struct.pack("<I", VERSION))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TAGS:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<BI", _TAGS[t.dtype], t.dim())
        buf += struct.pack(f"<{t.dim()}I", *t.shape)
        buf += t.numpy().astype(_DTYPES[_TAGS[t.dtype]][1]).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _DTYPES:
            raise CheckpointFormatError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype, np_dtype = _DTYPES[tag]
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(count * np.dtype(np_dtype).itemsize), dtype=np_dtype).reshape(shape)
        out[name] = torch.from_numpy(arr.copy()).to(dtype)
    return out


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {(f"{prefix}.{n}" if prefix else n): p.detach() for n, p in module.named_parameters()}


def checksum(tensors: Iterable[torch.Tensor] | Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    items = tensors.items() if isinstance(tensors, Mapping) else enumerate(tensors)
    for k, t in items:
        h.update(str(k).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
