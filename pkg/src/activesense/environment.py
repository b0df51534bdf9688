"""Ground-truth field generation, bilinear sensing and sensor layouts.

The spatial domain is the periodic square (-1, 1)²; grid node (i, j) sits at
``(-1 + 2i/W, -1 + 2j/H)`` and frames are stored as ``[j, i, c]`` arrays.
"""
from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .numerics import RngStream

log = logging.getLogger(__name__)

DOMAIN_LO, DOMAIN_HI = -1.0, 1.0
DOMAIN_LEN = DOMAIN_HI - DOMAIN_LO
BLOWUP_LIMIT = 1e6


class SolverBlowUpError(FloatingPointError):
    pass


class TrajectoryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    height: int = 32
    width: int = 32
    channels: int = 1
    dt: float = 0.01          # solver step
    nu: float = 1e-3
    forcing: str = "li"       # "zero" | "li"
    forcing_amp: float = 0.1
    save_every: int = 1       # solver steps between stored frames

    def __post_init__(self):
        for n in (self.height, self.width):
            if n < 2 or n & (n - 1):
                raise ValueError(f"grid extents must be powers of two, got {self.height}x{self.width}")
        if self.nu < 0:
            raise ValueError("viscosity must be non-negative")
        if self.forcing not in ("zero", "li"):
            raise ValueError(f"unknown forcing {self.forcing!r}")

    @property
    def frame_dt(self) -> float:
        return self.dt * self.save_every


@dataclass
class FieldTrajectory:
    data: np.ndarray          # T x H x W x C float32
    dt: float
    nu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError("trajectory data must be T x H x W x C")
        if self.data.shape[0] < 2:
            raise ValueError("trajectory needs at least two frames")
        if not np.isfinite(self.data).all():
            raise ValueError("trajectory contains non-finite values")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    def frame(self, t: int) -> torch.Tensor:
        return torch.from_numpy(self.data[t])


@dataclass
class SensorLayout:
    coords: torch.Tensor      # N x 2

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[-1] != 2 or self.coords.shape[0] < 1:
            raise ValueError("layout must be an N x 2 array with N >= 1")

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class ObservationSet:
    layout: SensorLayout
    values: torch.Tensor      # N x C
    t: int = 0

    def __post_init__(self):
        if self.values.shape[0] != len(self.layout):
            raise ValueError("observation values do not align with the layout")

    @property
    def coords(self) -> torch.Tensor:
        return self.layout.coords


# ---------------------------------------------------------------------------
# grid helpers

def grid_coords(height: int, width: int) -> torch.Tensor:
    """All node coordinates, (H*W) x 2, in frame (row-major [j, i]) order."""
    xs = DOMAIN_LO + DOMAIN_LEN * np.arange(width) / width
    ys = DOMAIN_LO + DOMAIN_LEN * np.arange(height) / height
    X, Y = np.meshgrid(xs, ys)
    return torch.from_numpy(np.stack([X.ravel(), Y.ravel()], -1)).float()


def _wavenumbers(height: int, width: int):
    kx = 2 * np.pi / DOMAIN_LEN * np.fft.fftfreq(width, 1.0 / width)
    ky = 2 * np.pi / DOMAIN_LEN * np.fft.fftfreq(height, 1.0 / height)
    KX, KY = np.meshgrid(kx, ky)
    nx = np.abs(np.fft.fftfreq(width, 1.0 / width))
    ny = np.abs(np.fft.fftfreq(height, 1.0 / height))
    NX, NY = np.meshgrid(nx, ny)
    dealias = (NX < width / 3) & (NY < height / 3)
    return KX, KY, dealias


def forcing_field(spec: DomainSpec) -> np.ndarray:
    if spec.forcing == "zero":
        return np.zeros((spec.height, spec.width))
    xy = grid_coords(spec.height, spec.width).double().numpy()
    s = (xy[:, 0] + xy[:, 1]).reshape(spec.height, spec.width)
    return spec.forcing_amp * (np.sin(2 * np.pi * s) + np.cos(2 * np.pi * s))


# ---------------------------------------------------------------------------
# vorticity solver

def simulate_vorticity(w0: np.ndarray, spec: DomainSpec, steps: int, seed: int = 0) -> FieldTrajectory:
    """Integrate dw/dt + u·∇w = νΔw + f on the torus and return ``steps`` frames.

    Integrating-factor Heun scheme: diffusion is exact in Fourier space, the
    advection + forcing term is a 2nd-order explicit step with 2/3 dealiasing.
    Frame 0 is ``w0``; frames are ``spec.save_every`` solver steps apart.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != (spec.height, spec.width):
        raise ValueError(f"w0 has shape {w0.shape}, expected {(spec.height, spec.width)}")
    if not np.isfinite(w0).all():
        raise ValueError("initial vorticity is not finite")
    if steps < 2:
        raise ValueError("need at least two frames")

    KX, KY, dealias = _wavenumbers(spec.height, spec.width)
    K2 = KX ** 2 + KY ** 2
    K2_inv = np.where(K2 > 0, 1.0 / np.where(K2 > 0, K2, 1.0), 0.0)
    E = np.exp(-spec.nu * K2 * spec.dt)
    f_hat = np.fft.fft2(forcing_field(spec))
    dx = DOMAIN_LEN / max(spec.height, spec.width)

    def tendency(w_hat):
        psi_hat = w_hat * K2_inv
        u = np.real(np.fft.ifft2(1j * KY * psi_hat))
        v = np.real(np.fft.ifft2(-1j * KX * psi_hat))
        wx = np.real(np.fft.ifft2(1j * KX * w_hat))
        wy = np.real(np.fft.ifft2(1j * KY * w_hat))
        adv_hat = np.fft.fft2(u * wx + v * wy) * dealias
        adv_hat[0, 0] = 0.0  # divergence-free advection has zero mean
        return f_hat - adv_hat, max(np.abs(u).max(), np.abs(v).max())

    frames = [w0.copy()]
    w_hat = np.fft.fft2(w0)
    warned = False
    n_solver = (steps - 1) * spec.save_every
    for n in range(1, n_solver + 1):
        N0, umax = tendency(w_hat)
        if not warned and umax * spec.dt / dx > 0.5:
            warnings.warn(f"CFL number {umax * spec.dt / dx:.2f} exceeds 0.5 at step {n}", RuntimeWarning)
            warned = True
        w1 = E * (w_hat + spec.dt * N0)
        N1, _ = tendency(w1)
        w_hat = E * w_hat + 0.5 * spec.dt * (E * N0 + N1)
        if n % spec.save_every == 0:
            w = np.real(np.fft.ifft2(w_hat))
            peak = np.abs(w).max()
            if not np.isfinite(peak) or peak > BLOWUP_LIMIT:
                raise SolverBlowUpError(f"vorticity blew up at solver step {n} (max |w| = {peak:.3g})")
            frames.append(w)
    data = np.stack(frames)[..., None].astype(np.float32)
    return FieldTrajectory(data, spec.frame_dt, spec.nu, seed)


def gaussian_random_field(spec: DomainSpec, rng: RngStream, alpha: float = 2.5, tau: float = 7.0) -> np.ndarray:
    """Zero-mean periodic GRF with covariance ∝ (-Δ + τ²)^(-α)."""
    KX, KY, _ = _wavenumbers(spec.height, spec.width)
    amp = tau ** (0.5 * (2 * alpha - 2)) * (KX ** 2 + KY ** 2 + tau ** 2) ** (-alpha / 2)
    amp[0, 0] = 0.0
    g = rng.generator
    noise = g.standard_normal((spec.height, spec.width)) + 1j * g.standard_normal((spec.height, spec.width))
    w = np.real(np.fft.ifft2(noise * amp)) * spec.height * spec.width
    return w


def generate_ns_dataset(spec: DomainSpec, count: int, steps: int, seed: int, burn_in: int = 0,
                        label: str = "data", alpha: float = 2.5, tau: float = 7.0) -> list[FieldTrajectory]:
    """``count`` trajectories from GRF initial vorticity, one sub-stream per trajectory."""
    trajs = []
    for i in range(count):
        traj_seed = int(RngStream(seed, f"{label}/{i}").integers(0, 2 ** 63))
        w0 = gaussian_random_field(spec, RngStream(traj_seed, "ic"), alpha, tau)
        tr = simulate_vorticity(w0, spec, steps + burn_in, seed=traj_seed)
        if burn_in:
            tr = FieldTrajectory(tr.data[burn_in:], tr.dt, tr.nu, tr.seed)
        trajs.append(tr)
    return trajs


@dataclass(frozen=True)
class HotspotSpec:
    """Gaussian bump advected along x inside a horizontal band."""
    height: int = 16
    width: int = 16
    width_sigma: float = 0.25
    band: float = 0.3
    speed: tuple[float, float] = (0.04, 0.08)
    amplitude: float = 1.0


def hotspot_trajectory(spec: HotspotSpec, steps: int, rng: RngStream, seed: int = 0) -> FieldTrajectory:
    g = rng.generator
    cx = g.uniform(-1, 1)
    cy = g.uniform(-spec.band, spec.band)
    vx = g.uniform(*spec.speed) * g.choice([-1.0, 1.0])
    vy = g.uniform(-0.25, 0.25) * abs(vx)
    xy = grid_coords(spec.height, spec.width).double().numpy()
    frames = []
    for t in range(steps):
        c = np.array([cx + vx * t, cy + vy * t])
        d = (xy - c + 1.0) % DOMAIN_LEN - 1.0       # periodic displacement
        val = spec.amplitude * np.exp(-(d ** 2).sum(-1) / (2 * spec.width_sigma ** 2))
        frames.append(val.reshape(spec.height, spec.width))
    data = np.stack(frames)[..., None].astype(np.float32)
    return FieldTrajectory(data, 1.0, 0.0, seed)


def generate_hotspot_dataset(spec: HotspotSpec, count: int, steps: int, seed: int,
                             label: str = "data") -> list[FieldTrajectory]:
    out = []
    for i in range(count):
        traj_seed = int(RngStream(seed, f"{label}/{i}").integers(0, 2 ** 63))
        out.append(hotspot_trajectory(spec, steps, RngStream(traj_seed, "hotspot"), traj_seed))
    return out


# ---------------------------------------------------------------------------
# sensing

def observe_values(frame: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear, periodically wrapped samples of ``frame`` at ``coords``.

    ``frame`` is H x W x C, or B x H x W x C with ``coords`` B x N x 2.
    """
    if ((coords < DOMAIN_LO) | (coords > DOMAIN_HI)).any():
        raise ValueError("sensor coordinate outside the domain; clip before observing")
    if frame.dim() == 4:
        if coords.dim() != 3 or coords.shape[0] != frame.shape[0]:
            raise ValueError("batched frames need B x N x 2 coordinates")
        return torch.stack([observe_values(f, c) for f, c in zip(frame, coords)])
    H, W = frame.shape[0], frame.shape[1]
    c = coords.double()
    fx = (c[..., 0] - DOMAIN_LO) * W / DOMAIN_LEN
    fy = (c[..., 1] - DOMAIN_LO) * H / DOMAIN_LEN
    x0f, y0f = torch.floor(fx), torch.floor(fy)
    tx, ty = (fx - x0f)[..., None], (fy - y0f)[..., None]
    x0 = x0f.long() % W
    y0 = y0f.long() % H
    x1, y1 = (x0 + 1) % W, (y0 + 1) % H
    f = frame.double()
    out = ((1 - tx) * (1 - ty) * f[y0, x0] + tx * (1 - ty) * f[y0, x1]
           + (1 - tx) * ty * f[y1, x0] + tx * ty * f[y1, x1])
    return out.to(frame.dtype if frame.is_floating_point() else torch.float32)


def observe(frame: torch.Tensor, layout: SensorLayout, t: int = 0) -> ObservationSet:
    return ObservationSet(layout, observe_values(frame, layout.coords), t)


def clip_to_domain(coords: torch.Tensor) -> torch.Tensor:
    return coords.clamp(DOMAIN_LO, DOMAIN_HI)


def init_layout(n: int, rng: RngStream, jitter: float = 0.1) -> SensorLayout:
    """Uniform samples over the domain plus N(0, jitter²) noise, clipped back in."""
    if n < 1:
        raise ValueError("need at least one sensor")
    g = rng.generator
    xy = g.uniform(DOMAIN_LO, DOMAIN_HI, (n, 2)) + jitter * g.standard_normal((n, 2))
    return SensorLayout(clip_to_domain(torch.from_numpy(xy).float()))


def uniform_coords(shape: Sequence[int], rng: RngStream) -> torch.Tensor:
    return rng.uniform(DOMAIN_LO, DOMAIN_HI, tuple(shape) + (2,))


def apply_displacement(layout: SensorLayout, action: torch.Tensor) -> SensorLayout:
    if action.shape != layout.coords.shape:
        raise ValueError(f"action shape {tuple(action.shape)} does not match layout {tuple(layout.coords.shape)}")
    return SensorLayout(clip_to_domain(layout.coords + action))


# ---------------------------------------------------------------------------
# trajectory file: "LTRJ", u32 version, u32 count, records

TRAJ_MAGIC = b"LTRJ"
TRAJ_VERSION = 1
_REC_HEAD = struct.Struct("<Q4Idd")


def save_trajectories(trajs: Iterable[FieldTrajectory], path) -> None:
    trajs = list(trajs)
    buf = bytearray(TRAJ_MAGIC + struct.pack("<II", TRAJ_VERSION, len(trajs)))
    for tr in trajs:
        T, H, W, C = tr.data.shape
        buf += _REC_HEAD.pack(int(tr.seed) & 0xFFFFFFFFFFFFFFFF, T, H, W, C, float(tr.dt), float(tr.nu))
        buf += tr.data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_trajectories(path) -> list[FieldTrajectory]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != TRAJ_MAGIC:
        raise TrajectoryFormatError(f"{path}: not a trajectory file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != TRAJ_VERSION:
        raise TrajectoryFormatError(f"{path}: unsupported trajectory file version {version}")
    pos, out = 12, []
    for r in range(count):
        if pos + _REC_HEAD.size > len(data):
            raise TrajectoryFormatError(f"{path}: truncated in header of record {r}")
        seed, T, H, W, C, dt, nu = _REC_HEAD.unpack_from(data, pos)
        pos += _REC_HEAD.size
        n = T * H * W * C * 4
        if pos + n > len(data):
            raise TrajectoryFormatError(f"{path}: truncated payload in record {r}")
        arr = np.frombuffer(data, dtype="<f4", count=T * H * W * C, offset=pos).reshape(T, H, W, C)
        pos += n
        out.append(FieldTrajectory(arr.astype(np.float32), dt, nu, seed))
    if pos != len(data):
        raise TrajectoryFormatError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return out
