"""Diffusion-side inference: noise schedule, blurry-latent re-noising,
deterministic reverse sampling with first-frame and caption conditioning,
and latent frame interpolation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation, InvalidArgument

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Index t runs 0..T; alpha_bar[0] = 1 by convention."""

    betas: np.ndarray  # [T + 1], betas[0] unused (0)
    alphas: np.ndarray
    alpha_bar: np.ndarray
    sampler_steps: int = 25

    @property
    def T(self) -> int:
        return len(self.betas) - 1


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, sampler_steps: int = 25) -> NoiseSchedule:
    if T < 2:
        raise InvalidArgument("T must be >= 2")
    if not (0 < beta_start < 1 and 0 < beta_end < 1):
        raise InvalidArgument("beta range must lie inside (0, 1)")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    return NoiseSchedule(betas, alphas, alpha_bar, sampler_steps)


def theta_step(theta: float, T: int) -> int:
    # tolerance guards products such as 0.29 * 100 = 28.999999999999996
    return int(math.floor(theta * T + 1e-9))


def alpha_coefficients(schedule: NoiseSchedule, theta: float) -> tuple[float, float]:
    """(signal, noise) coefficients for re-noising the blurry latent to step T."""
    if not 0 < theta <= 1:
        raise InvalidArgument(f"theta must lie in (0, 1], got {theta}")
    ratio = schedule.alpha_bar[schedule.T] / schedule.alpha_bar[theta_step(theta, schedule.T)]
    return math.sqrt(ratio), math.sqrt(1.0 - ratio)


def inject_alpha_guidance(z_blurry, schedule: NoiseSchedule, theta: float, seed=0):
    """z_T = a * z_blurry + b * eps with fresh Gaussian eps drawn from ``seed``."""
    a, b = alpha_coefficients(schedule, theta)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = np.asarray(z_blurry, dtype=np.float64)
    eps = rng.standard_normal(z.shape)
    return a * z + b * eps


def interpolate_frames(latents, n_target: int) -> np.ndarray:
    """Linear interpolation along the frame axis at uniform times."""
    lat = np.asarray(latents, dtype=np.float64)
    if n_target < 2:
        raise InvalidArgument("n_target must be >= 2")
    n = lat.shape[0]
    if n_target < n:
        raise InvalidArgument("n_target must be at least the input frame count")
    if n == 1:
        return np.repeat(lat, n_target, axis=0)
    times = np.arange(n_target) * (n - 1) / (n_target - 1)
    out = np.empty((n_target, *lat.shape[1:]))
    for k, t in enumerate(times):
        i = min(int(np.floor(t)), n - 2)
        # a + f (b - a) is exact for constant runs; endpoints are copied
        out[k] = lat[i] + (t - i) * (lat[i + 1] - lat[i])
    out[0], out[-1] = lat[0], lat[-1]
    return out


# --------------------------------------------------------------- denoisers


@dataclass
class Conditions:
    keyframe_latent: np.ndarray | None = None  # beta guidance, [c, h, w]
    text_embedding: np.ndarray | None = None  # gamma guidance, [d]


class Denoiser:
    def predict(self, z_t: np.ndarray, t: int, cond: Conditions) -> np.ndarray:
        raise NotImplementedError


class LinearGaussianDenoiser(Denoiser):
    """Exact noise posterior mean when every latent entry is N(mean, var)."""

    def __init__(self, schedule: NoiseSchedule, mean=0.0, var: float = 1.0):
        self.schedule, self.mean, self.var = schedule, mean, var

    def predict(self, z_t, t, cond=None):
        ab = self.schedule.alpha_bar[t]
        return math.sqrt(1 - ab) * (z_t - math.sqrt(ab) * self.mean) / (ab * self.var + 1 - ab)


def timestep_grid(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise InvalidArgument(f"sampler steps must lie in [1, {T}]")
    return np.round(np.linspace(T, 0, steps + 1)).astype(int)


def reverse_sample(z_T, denoiser: Denoiser, schedule: NoiseSchedule, cond: Conditions | None = None,
                   steps: int | None = None, seed=0, return_trajectory: bool = False, x0_fn=None):
    """Deterministic reverse updates on an evenly spaced sub-schedule.

    With a keyframe latent, frame 0 is overwritten at every step by the
    keyframe noised to that step's level (exactly the keyframe at t = 0).
    ``x0_fn`` optionally maps each clean-latent estimate back onto the
    valid data set; the noise estimate is then made consistent with it.
    """
    cond = cond or Conditions()
    steps = schedule.sampler_steps if steps is None else steps
    ab = schedule.alpha_bar
    ts = timestep_grid(schedule.T, steps)
    z = np.array(z_T, dtype=np.float64)
    key = cond.keyframe_latent
    if key is not None:
        key = np.asarray(key, dtype=np.float64)
        if key.shape != z.shape[1:]:
            raise ContractViolation(f"keyframe latent {key.shape} does not match frame latent {z.shape[1:]}")
        eps_key = np.random.default_rng(seed).standard_normal(key.shape)
        z[0] = math.sqrt(ab[ts[0]]) * key + math.sqrt(1 - ab[ts[0]]) * eps_key
    trajectory = [z.copy()] if return_trajectory else None
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps = np.asarray(denoiser.predict(z, int(t), cond), dtype=np.float64)
        if eps.shape != z.shape:
            raise ContractViolation(f"denoiser returned {eps.shape}, expected {z.shape}")
        x0 = (z - math.sqrt(1 - ab[t]) * eps) / math.sqrt(ab[t])
        if x0_fn is not None:
            x0 = np.asarray(x0_fn(x0), dtype=np.float64)
            eps = (z - math.sqrt(ab[t]) * x0) / math.sqrt(1 - ab[t])
        z = math.sqrt(ab[t_prev]) * x0 + math.sqrt(1 - ab[t_prev]) * eps
        if key is not None:
            z[0] = math.sqrt(ab[t_prev]) * key + math.sqrt(1 - ab[t_prev]) * eps_key
        if return_trajectory:
            trajectory.append(z.copy())
    return (z, trajectory) if return_trajectory else z


# ------------------------------------------------------ tiny video denoiser


def _timestep_embedding(t, dim: int):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TinyVideoDenoiser(nn.Module, Denoiser):
    """Per-frame convolutions with cross-frame attention at every pixel;
    conditioned on a first-frame latent and a caption embedding.

    The network outputs the velocity v = sqrt(ab) eps - sqrt(1 - ab) x0 and
    ``predict`` converts it to a noise estimate. It works on per-channel
    standardized latents; ``normalize`` / ``denormalize`` map codec latents
    in and out of that space.
    """

    def __init__(self, latent_c: int, text_dim: int = 64, width: int = 48, t_dim: int = 64,
                 schedule: NoiseSchedule | None = None):
        nn.Module.__init__(self)
        self.latent_c, self.text_dim, self.t_dim = latent_c, text_dim, t_dim
        schedule = schedule or make_schedule()
        self.register_buffer("alpha_bar", torch.as_tensor(schedule.alpha_bar, dtype=torch.float64))
        self.register_buffer("lat_mean", torch.zeros(latent_c, dtype=torch.float64))
        self.register_buffer("lat_std", torch.ones(latent_c, dtype=torch.float64))
        self.inp = nn.Conv2d(2 * latent_c + 1, width, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, width)
        self.txt_proj = nn.Linear(text_dim, width)
        self.q = nn.Linear(width, width, bias=False)
        self.k = nn.Linear(width, width, bias=False)
        self.v = nn.Linear(width, width, bias=False)
        self.mid = nn.Conv2d(width, width, 3, padding=1)
        self.mid2 = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, latent_c, 3, padding=1)

    def _stats(self):
        return self.lat_mean.numpy()[:, None, None], self.lat_std.numpy()[:, None, None]

    def normalize(self, latents) -> np.ndarray:
        m, s = self._stats()
        return (np.asarray(latents, dtype=np.float64) - m) / s

    def denormalize(self, z) -> np.ndarray:
        m, s = self._stats()
        return np.asarray(z, dtype=np.float64) * s + m

    def forward(self, z, t, key, key_mask, text):
        """z: [b, F, c, h, w]; t: [b]; key: [b, c, h, w]; key_mask: [b]; text: [b, d]."""
        b, nf, c, h, w = z.shape
        keyb = (key * key_mask[:, None, None, None])[:, None].expand(b, nf, c, h, w)
        flag = key_mask[:, None, None, None, None].expand(b, nf, 1, h, w)
        x = torch.cat([z, keyb, flag], dim=2).reshape(b * nf, 2 * c + 1, h, w)
        x = self.inp(x)
        bias = self.t_proj(_timestep_embedding(t, self.t_dim).to(x.dtype)) + self.txt_proj(text)
        x = F.gelu(x + bias.repeat_interleave(nf, dim=0)[:, :, None, None])
        width = x.shape[1]
        seq = x.reshape(b, nf, width, h, w).permute(0, 3, 4, 1, 2).reshape(b * h * w, nf, width)
        att = torch.softmax(self.q(seq) @ self.k(seq).transpose(1, 2) / math.sqrt(width), dim=-1)
        seq = seq + att @ self.v(seq)
        x = seq.reshape(b, h, w, nf, width).permute(0, 3, 4, 1, 2).reshape(b * nf, width, h, w)
        x = F.gelu(self.mid(x)) + x
        x = F.gelu(self.mid2(x)) + x
        return self.out(x).reshape(b, nf, c, h, w)

    @torch.no_grad()
    def predict(self, z_t, t, cond: Conditions):
        dtype = self.inp.weight.dtype
        z = torch.as_tensor(z_t, dtype=dtype)[None]
        c, h, w = z.shape[2:]
        if cond.keyframe_latent is not None:
            key, mask = torch.as_tensor(cond.keyframe_latent, dtype=dtype)[None], torch.ones(1, dtype=dtype)
        else:
            key, mask = torch.zeros(1, c, h, w, dtype=dtype), torch.zeros(1, dtype=dtype)
        if cond.text_embedding is not None:
            text = torch.as_tensor(cond.text_embedding, dtype=dtype)[None]
        else:
            text = torch.zeros(1, self.text_dim, dtype=dtype)
        v = self(z, torch.tensor([float(t)]), key, mask, text)[0].double().numpy()
        ab = float(self.alpha_bar[int(t)])
        return math.sqrt(ab) * v + math.sqrt(1.0 - ab) * np.asarray(z_t, dtype=np.float64)


def train_denoiser(videos: np.ndarray, texts: np.ndarray, schedule: NoiseSchedule, steps: int = 1500,
                   batch: int = 8, lr: float = 1e-3, cond_drop: float = 0.1, seed: int = 0, width: int = 48):
    """Velocity-prediction training on latent videos [n, F, c, h, w] with captions [n, d].

    Latents are standardized per channel first; the statistics are stored
    on the returned network.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    videos = np.asarray(videos, dtype=np.float64)
    mean = videos.mean(axis=(0, 1, 3, 4))
    std = np.maximum(videos.std(axis=(0, 1, 3, 4)), 1e-6)
    x_all = torch.as_tensor((videos - mean[:, None, None]) / std[:, None, None], dtype=torch.float32)
    txt_all = torch.as_tensor(texts, dtype=torch.float32)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float32)
    net = TinyVideoDenoiser(x_all.shape[2], txt_all.shape[1], width=width, schedule=schedule)
    net.lat_mean.copy_(torch.as_tensor(mean))
    net.lat_std.copy_(torch.as_tensor(std))
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    losses = []
    for step in range(steps):
        idx = torch.randint(len(x_all), (batch,), generator=gen)
        x0 = x_all[idx]
        t = torch.randint(1, schedule.T + 1, (batch,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        a = ab[t].reshape(-1, 1, 1, 1, 1)
        z = a.sqrt() * x0 + (1 - a).sqrt() * eps
        v = a.sqrt() * eps - (1 - a).sqrt() * x0
        key_mask = (torch.rand(batch, generator=gen) > cond_drop).float()
        txt_mask = (torch.rand(batch, generator=gen) > cond_drop).float()
        pred = net(z, t.float(), x0[:, 0], key_mask, txt_all[idx] * txt_mask[:, None])
        loss = torch.mean((pred - v) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if step % 250 == 0:
            log.info("denoiser step %d loss %.4f", step, loss.item())
    return net.eval(), losses
