"""Perception reconstructor: one fMRI vector -> N_f coarse latents ->
temporal upsampling stack -> blurry latent video in codec space."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation, ConfigError, Divergence, InvalidArgument, NotReady

log = logging.getLogger(__name__)


@dataclass
class PRConfig:
    n_voxels: int = 2048
    n_frames: int = 6
    latent_c: int = 48
    code_dim: int = 64
    hidden: int = 256
    coarse_hw: int = 8
    # (channels out, upsampling factor) per stage, coarse to target
    stages: list = field(default_factory=lambda: [[48, 2], [48, 1]])
    attn_dim: int = 16
    tau: float = 0.07
    lr: float = 3e-4
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 40
    seed: int = 0

    def stage_chain(self):
        """[(c_in, hw_in, c_out, hw_out)] with shape consistency checked."""
        chain, c, hw = [], self.latent_c, self.coarse_hw
        for c_out, factor in self.stages:
            if factor < 1 or int(factor) != factor:
                raise ConfigError("pr.stages", f"upsampling factor {factor} must be a positive integer")
            chain.append((c, hw, int(c_out), hw * int(factor)))
            c, hw = int(c_out), hw * int(factor)
        if c != self.latent_c:
            raise ConfigError("pr.stages", f"stage chain ends with {c} channels, codec latent has {self.latent_c}")
        return chain


# ----------------------------------------------------------------- blocks


class InceptionExtension(nn.Module):
    """Shallow MLP: one voxel vector -> N_f codes."""

    def __init__(self, n_voxels: int, n_frames: int, code_dim: int, hidden: int):
        super().__init__()
        self.n_voxels, self.n_frames, self.code_dim = n_voxels, n_frames, code_dim
        self.fc1 = nn.Linear(n_voxels, hidden)
        self.fc2 = nn.Linear(hidden, n_frames * code_dim)

    def forward(self, y):
        if y.shape[-1] != self.n_voxels:
            raise InvalidArgument(f"expected {self.n_voxels} voxels, got {y.shape[-1]}")
        h = F.gelu(self.fc1(y))
        return self.fc2(h).reshape(*y.shape[:-1], self.n_frames, self.code_dim)


def inception_extend(fmri, ext: InceptionExtension):
    y = torch.as_tensor(np.asarray(fmri) if not torch.is_tensor(fmri) else fmri, dtype=ext.fc1.weight.dtype)
    return ext(y)


def temporal_attention(e_temp, w_q, w_k, return_weights: bool = False):
    """Attention over the frame axis of [(b*h*w), N_f, c] without a value map."""
    if not torch.isfinite(e_temp).all():
        raise ContractViolation("non-finite values entering temporal attention")
    c = e_temp.shape[-1]
    if w_q.shape[-1] != c or w_k.shape[-1] != c:
        raise InvalidArgument(f"projection inner dim must equal channel count {c}")
    q = e_temp @ w_q.T
    k = e_temp @ w_k.T
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c), dim=-1)
    out = weights @ e_temp
    return (out, weights) if return_weights else out


class SpatialLayer(nn.Module):
    """Depthwise-separable 3-D convolution over (frame, h, w) followed by
    single-head spatial self-attention; shape preserving."""

    def __init__(self, c: int, attn_dim: int):
        super().__init__()
        self.depthwise = nn.Conv3d(c, c, 3, padding=1, groups=c)
        self.pointwise = nn.Conv3d(c, c, 1)
        self.q = nn.Linear(c, attn_dim, bias=False)
        self.k = nn.Linear(c, attn_dim, bias=False)
        self.v = nn.Linear(c, c, bias=False)
        self.attn_dim = attn_dim

    def forward(self, x, n_frames: int):
        bn, c, h, w = x.shape
        b = bn // n_frames
        v = x.reshape(b, n_frames, c, h, w).transpose(1, 2)
        v = self.pointwise(F.gelu(self.depthwise(v)))
        v = v.transpose(1, 2).reshape(bn, c, h * w).transpose(1, 2)  # [bn, hw, c]
        att = torch.softmax(self.q(v) @ self.k(v).transpose(1, 2) / math.sqrt(self.attn_dim), dim=-1)
        v = v + att @ self.v(v)
        return v.transpose(1, 2).reshape(bn, c, h, w)


def squash(raw):
    return torch.sigmoid(raw)


def residual_mix(eta, passthrough, sublayer):
    """eta * passthrough + (1 - eta) * sublayer, exactly one branch at eta in {0, 1}."""
    return eta * passthrough + (1 - eta) * sublayer


class TemporalUpsampleStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, factor: int, attn_dim: int):
        super().__init__()
        self.spatial = SpatialLayer(c_in, attn_dim)
        self.w_q = nn.Parameter(torch.randn(c_in, c_in) / math.sqrt(c_in))
        self.w_k = nn.Parameter(torch.randn(c_in, c_in) / math.sqrt(c_in))
        self.eta1_raw = nn.Parameter(torch.zeros(()))
        self.eta2_raw = nn.Parameter(torch.zeros(()))
        self.factor = factor
        self.proj = nn.Conv2d(c_in, c_out, 1)

    def upsample(self, x):
        if self.factor > 1:
            x = F.interpolate(x, scale_factor=self.factor, mode="bilinear", align_corners=False)
        return self.proj(x)

    def forward(self, e):
        b, nf, c, h, w = e.shape
        spat = e.reshape(b * nf, c, h, w)
        x = residual_mix(squash(self.eta1_raw), spat, self.spatial(spat, nf))
        temp = x.reshape(b, nf, c, h, w).permute(0, 3, 4, 1, 2).reshape(b * h * w, nf, c)
        x = residual_mix(squash(self.eta2_raw), temp, temporal_attention(temp, self.w_q, self.w_k))
        x = x.reshape(b, h, w, nf, c).permute(0, 3, 4, 1, 2).reshape(b * nf, c, h, w)
        x = self.upsample(x)
        return x.reshape(b, nf, *x.shape[1:])


class TemporalUpsampler(nn.Module):
    def __init__(self, cfg: PRConfig):
        super().__init__()
        self.stages = nn.ModuleList(
            TemporalUpsampleStage(c_in, c_out, hw_out // hw_in, cfg.attn_dim)
            for c_in, hw_in, c_out, hw_out in cfg.stage_chain()
        )

    def forward(self, e):
        for stage in self.stages:
            e = stage(e)
        return e


def temporal_upsample_forward(codes_latent, upsampler: TemporalUpsampler):
    return upsampler(codes_latent)


class PerceptionReconstructor(nn.Module):
    def __init__(self, cfg: PRConfig):
        super().__init__()
        self.cfg = cfg
        self.extension = InceptionExtension(cfg.n_voxels, cfg.n_frames, cfg.code_dim, cfg.hidden)
        self.to_coarse = nn.Sequential(
            nn.Linear(cfg.code_dim, cfg.code_dim), nn.GELU(),
            nn.Linear(cfg.code_dim, cfg.latent_c * cfg.coarse_hw**2),
        )
        self.upsampler = TemporalUpsampler(cfg)

    def forward(self, y):
        codes = self.extension(y)
        coarse = self.to_coarse(codes)
        coarse = coarse.reshape(*codes.shape[:2], self.cfg.latent_c, self.cfg.coarse_hw, self.cfg.coarse_hw)
        return self.upsampler(coarse)


# ------------------------------------------------------------------- loss


def _bidirectional_infonce(sim, tau):
    """Mean of -1/2 log softmax along rows and along columns of the diagonal."""
    logits = sim / tau
    row = torch.diagonal(torch.log_softmax(logits, dim=-1), dim1=-2, dim2=-1)
    col = torch.diagonal(torch.log_softmax(logits, dim=-2), dim1=-2, dim2=-1)
    return -0.5 * (row.mean(-1) + col.mean(-1))


def cosine_matrix(a, b):
    a = F.normalize(a.flatten(start_dim=2) if a.dim() > 3 else a, dim=-1)
    b = F.normalize(b.flatten(start_dim=2) if b.dim() > 3 else b, dim=-1)
    return a @ b.transpose(-1, -2)


def pr_loss(e_x, e_y, tau: float = 0.07):
    """MAE plus symmetric frame-level InfoNCE, averaged over the batch.

    e_x, e_y: [b, N_f, c, h, w] (a missing batch axis is allowed).
    """
    if tau <= 0:
        raise InvalidArgument("temperature must be positive")
    if e_x.shape != e_y.shape:
        raise InvalidArgument(f"shape mismatch {tuple(e_x.shape)} vs {tuple(e_y.shape)}")
    if e_x.dim() == 4:
        e_x, e_y = e_x[None], e_y[None]
    mae = torch.mean(torch.abs(e_x - e_y))
    sim = cosine_matrix(e_x, e_y)  # sim[b, j, k] = sim(x_j, y_k)
    return mae + _bidirectional_infonce(sim, tau).mean()


# --------------------------------------------------------------- training


def standardize_stats(fmri: np.ndarray):
    mean = fmri.mean(axis=0)
    std = fmri.std(axis=0) + 1e-6
    return mean, std


class TrainedPR:
    """Model plus the voxel normalization it was trained with."""

    def __init__(self, model: PerceptionReconstructor, vox_mean, vox_std):
        self.model = model.eval()
        self.vox_mean = np.asarray(vox_mean, dtype=np.float64)
        self.vox_std = np.asarray(vox_std, dtype=np.float64)

    def predict_latents(self, fmri: np.ndarray) -> np.ndarray:
        fmri = np.asarray(fmri, dtype=np.float64)
        single = fmri.ndim == 1
        y = (np.atleast_2d(fmri) - self.vox_mean) / self.vox_std
        dtype = next(self.model.parameters()).dtype
        with torch.no_grad():
            out = self.model(torch.as_tensor(y, dtype=dtype)).double().numpy()
        return out[0] if single else out


def train_pr(fmri: np.ndarray, latents: np.ndarray, cfg: PRConfig, val_size: int = 32):
    """Fit the perception reconstructor; returns (TrainedPR, history dict).

    fmri: [n, n_voxels]; latents: [n, N_f, c, h, w] codec latents of the frames.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    mean, std = standardize_stats(fmri)
    y_all = torch.as_tensor((fmri - mean) / std, dtype=torch.float32)
    x_all = torch.as_tensor(latents, dtype=torch.float32)
    n = len(y_all)
    model = PerceptionReconstructor(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch)
    val = slice(0, min(val_size, n))
    history = {"train_loss": [], "val_loss": []}

    def val_loss():
        model.eval()
        with torch.no_grad():
            v = pr_loss(x_all[val], model(y_all[val]), cfg.tau).item()
        model.train()
        return v

    history["initial_val_loss"] = val_loss()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for s in range(steps_per_epoch):
            idx = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            loss = pr_loss(x_all[idx], model(y_all[idx]), cfg.tau)
            if not torch.isfinite(loss):
                raise Divergence(f"perception training diverged at epoch {epoch} step {s}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        history["train_loss"].append(total / n)
        history["val_loss"].append(val_loss())
        log.info("pr epoch %d train %.4f val %.4f", epoch, history["train_loss"][-1], history["val_loss"][-1])
    return TrainedPR(model, mean, std), history


def config_dict(cfg: PRConfig) -> dict:
    return asdict(cfg)


def reconstruct_blurry(fmri, pr: TrainedPR | None, codec):
    """Blurry N_f-frame video and its latent sequence for one fMRI vector."""
    if pr is None:
        raise NotReady("train-pr", "no perception checkpoint loaded")
    latents = pr.predict_latents(fmri)
    return codec.decode_latent(latents), latents
