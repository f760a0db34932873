"""Denoising-diffusion prior over teacher feature vectors.

Steps are 1-based (``t = 1..T``); ``alpha_bar(0) = 1`` by convention so the
last deterministic DDIM step lands exactly on the predicted clean feature.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray  # [T], float64

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t) -> torch.Tensor:
        """``alpha_bar`` at integer step(s) ``t`` in ``0..T`` as a float64 tensor."""
        table = torch.from_numpy(np.concatenate([[1.0], self.alpha_bars]))
        return table[torch.as_tensor(t, dtype=torch.long)]


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  shape: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if shape == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif shape == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_start, 0.999)
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")
    return NoiseSchedule(betas)


def forward_marginal(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form ``q(z_t | z0)`` draw for given noise: ``sqrt(ab) z0 + sqrt(1 - ab) eps``."""
    t_arr = torch.as_tensor(t)
    if (t_arr < 1).any() or (t_arr > schedule.T).any():
        raise ValueError(f"t must lie in 1..{schedule.T}")
    ab = schedule.alpha_bar(t_arr).to(z0.dtype)
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (z0.ndim - 1)))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


@dataclass(frozen=True)
class DenoiserSpec:
    dim: int
    hidden: int = 256
    time_dim: int = 64


class Denoiser(nn.Module):
    """Epsilon-prediction MLP: three linear layers, time embedding added after the first."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        self.inp = nn.Linear(spec.dim, spec.hidden)
        self.time = nn.Sequential(nn.Linear(spec.time_dim, spec.hidden), nn.SiLU(),
                                  nn.Linear(spec.hidden, spec.hidden))
        self.mid = nn.Linear(spec.hidden, spec.hidden)
        self.out = nn.Linear(spec.hidden, spec.dim)
        self.n_params = sum(p.numel() for p in self.parameters())

    def forward(self, z: torch.Tensor, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        emb = timestep_embedding(t, self.spec.time_dim).to(z.dtype)
        h = F.silu(self.inp(z) + self.time(emb))
        h = F.silu(self.mid(h))
        return self.out(h)


def build_denoiser(spec: DenoiserSpec, seed: int = 0) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(spec)


class FusionAdapter(nn.Module):
    """Per-feature fusion weight ``alpha = sigmoid(alpha_logits)`` plus optional projections.

    ``project`` lifts student features to the teacher dimension before fusion;
    ``back_map`` brings reconstructions back to the student dimension for the
    student head. Both are identities when the dimensions agree.
    """

    def __init__(self, teacher_dim: int, student_dim: Optional[int] = None, alpha_init: float = 0.5):
        super().__init__()
        student_dim = student_dim or teacher_dim
        self.teacher_dim, self.student_dim = teacher_dim, student_dim
        logit = math.log(alpha_init / (1.0 - alpha_init))
        self.alpha_logits = nn.Parameter(torch.full((teacher_dim,), logit))
        if student_dim != teacher_dim:
            self.project = nn.Linear(student_dim, teacher_dim)
            self.back = nn.Linear(teacher_dim, student_dim)
        else:
            self.project = None
            self.back = None

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha_logits)

    def lift(self, z_short: torch.Tensor) -> torch.Tensor:
        return self.project(z_short) if self.project is not None else z_short

    def back_map(self, z_long: torch.Tensor) -> torch.Tensor:
        return self.back(z_long) if self.back is not None else z_long


def fuse_init(z_short: torch.Tensor, adapter: FusionAdapter,
              generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """``alpha * lift(z_short) + (1 - alpha) * eps`` with fresh standard normal ``eps``."""
    z = adapter.lift(z_short)
    eps = torch.randn(z.shape, generator=generator, dtype=z.dtype)
    alpha = adapter.alpha.to(z.dtype)
    return alpha * z + (1.0 - alpha) * eps


def ddim_timesteps(T: int, nfe: int) -> list[int]:
    """``nfe`` evenly spaced steps from ``T`` downward; the chain then ends at 0."""
    if not 1 <= nfe <= T:
        raise ValueError(f"nfe must lie in 1..{T}")
    return [T - (i * T) // nfe for i in range(nfe)]


def ddim_step(denoiser, z_t: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from step ``t`` to ``t_prev``."""
    if not t > t_prev >= 0 or t > schedule.T:
        raise ValueError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t_prev))
    eps_hat = denoiser(z_t, t)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def posterior_sample(denoiser, schedule: NoiseSchedule, adapter: FusionAdapter,
                     z_short: torch.Tensor, nfe: int = 5,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Fusion-initialized reverse chain: a plausible teacher feature for each student feature."""
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    z = fuse_init(z_short, adapter, generator)
    steps = ddim_timesteps(schedule.T, nfe) + [0]
    for t, t_prev in zip(steps[:-1], steps[1:]):
        z = ddim_step(denoiser, z, t, t_prev, schedule)
        if not torch.isfinite(z).all():
            raise NumericalError(f"non-finite value after reverse step t={t} -> {t_prev}")
    return z


def sample_prior(denoiser, schedule: NoiseSchedule, n: int, nfe: int = 50,
                 generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    """Unconditional samples (pure-noise start, the ``alpha = 0`` path)."""
    z = torch.randn((n, denoiser.spec.dim), generator=generator, dtype=dtype)
    steps = ddim_timesteps(schedule.T, nfe) + [0]
    for t, t_prev in zip(steps[:-1], steps[1:]):
        z = ddim_step(denoiser, z, t, t_prev, schedule)
    return z


def diffusion_loss(denoiser, z0: torch.Tensor, schedule: NoiseSchedule,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean over the batch of ``||eps - eps_hat(z_t, t)||^2`` with ``t ~ U{1..T}``."""
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_marginal(z0, t, eps, schedule)
    return ((eps - denoiser(z_t, t)) ** 2).sum(dim=1).mean()


# ---------------------------------------------------------------------------
# checkpoints


def prior_to_bytes(denoiser: Denoiser, adapter: Optional[FusionAdapter] = None) -> bytes:
    holder = nn.Module()
    holder.denoiser = denoiser
    fields = {"denoiser": asdict(denoiser.spec)}
    if adapter is not None:
        holder.adapter = adapter
        fields["adapter"] = {"teacher_dim": adapter.teacher_dim, "student_dim": adapter.student_dim}
    return ckpt.to_bytes("diffusion-prior", fields, holder)


def prior_from_bytes(blob: bytes) -> tuple[Denoiser, Optional[FusionAdapter]]:
    header, flat = ckpt.read_header(blob)
    if header["family"] != "diffusion-prior":
        raise ckpt.CheckpointError(f"expected a diffusion-prior checkpoint, got {header['family']!r}")
    holder = nn.Module()
    holder.denoiser = Denoiser(DenoiserSpec(**header["fields"]["denoiser"]))
    adapter = None
    if "adapter" in header["fields"]:
        adapter = holder.adapter = FusionAdapter(**header["fields"]["adapter"])
    ckpt.load_state(holder, header, flat)
    return holder.denoiser, adapter


def save_prior(path, denoiser: Denoiser, adapter: Optional[FusionAdapter] = None) -> None:
    ckpt.atomic_write(path, prior_to_bytes(denoiser, adapter))


def load_prior(path):
    return prior_from_bytes(Path(path).read_bytes())
