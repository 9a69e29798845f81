"""Semantics reconstructor: ridge projection of voxels, fMRI-to-keyframe
contrastive alignment with mixed inputs, a one-step prior onto keyframe
embeddings, caption-side alignment, keyframe decoding and voxel-weight
export."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
import torch.nn.functional as F
from torch import nn

from .codecs import EMBED_DIM, N_TOKENS, ReftmProjector
from .errors import ContractViolation, Divergence, InvalidArgument, NotReady, SingularSystem
from .tensorio import save_tensor

log = logging.getLogger(__name__)


@dataclass
class SRConfig:
    n_voxels: int = 2048
    ridge_dim: int = 256
    ridge_lambda: float = 1e-4
    hidden: int = 512
    tau: float = 0.07
    beta_a: float = 0.15
    beta_b: float = 0.15
    delta: float = 30.0
    mu: float = 1.0
    lr: float = 3e-4
    align_epochs: int = 60
    prior_epochs: int = 60
    decoder_epochs: int = 40
    align_batch: int = 64
    prior_batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0 or self.mu < 0:
            raise InvalidArgument("loss coefficients must be non-negative")


# ------------------------------------------------------------------ ridge


def ridge_fit_oracle(X, Y, lam: float) -> np.ndarray:
    """Closed-form ridge weights (X^T X + lam I)^-1 X^T Y."""
    X, Y = np.atleast_2d(np.asarray(X, dtype=np.float64)), np.asarray(Y, dtype=np.float64)
    if lam < 0:
        raise InvalidArgument("lambda must be >= 0")
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0] or min(*X.shape, Y.shape[1]) < 1:
        raise InvalidArgument("X and Y need matching, non-empty row counts")
    gram = X.T @ X + lam * np.eye(X.shape[1])
    if lam == 0 and np.linalg.matrix_rank(gram) < X.shape[1]:
        raise SingularSystem("X^T X is singular; use lambda > 0")
    try:
        return np.linalg.solve(gram, X.T @ Y)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


class RidgeLayer(nn.Linear):
    """Linear voxel projection trained with an L2 penalty on its weight."""

    def __init__(self, n_voxels: int, dim: int, lam: float = 1e-4, bias: bool = True):
        super().__init__(n_voxels, dim, bias=bias)
        self.lam = lam

    def penalty(self):
        return self.lam * torch.sum(self.weight**2)

    def fit_closed_form(self, X, Y):
        W = ridge_fit_oracle(X, Y, self.lam)
        with torch.no_grad():
            self.weight.copy_(torch.as_tensor(W.T, dtype=self.weight.dtype))
            if self.bias is not None:
                self.bias.zero_()
        return self


def ridge_apply(fmri, layer: RidgeLayer):
    y = torch.as_tensor(fmri, dtype=layer.weight.dtype)
    if y.shape[-1] != layer.in_features:
        raise InvalidArgument(f"expected {layer.in_features} voxels, got {y.shape[-1]}")
    return layer(y)


def fit_ridge_layer(X, Y, lam: float, max_iter: int = 500) -> RidgeLayer:
    """Train a bias-free RidgeLayer on ||XW - Y||^2 + lam ||W||^2 by L-BFGS."""
    X = torch.as_tensor(X, dtype=torch.float64)
    Y = torch.as_tensor(Y, dtype=torch.float64)
    torch.manual_seed(0)
    layer = RidgeLayer(X.shape[1], Y.shape[1], lam, bias=False).double()
    opt = torch.optim.LBFGS(layer.parameters(), lr=1.0, max_iter=max_iter, tolerance_grad=1e-12,
                            tolerance_change=1e-15, history_size=50, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = torch.sum((layer(X) - Y) ** 2) + layer.penalty()
        loss.backward()
        return loss

    opt.step(closure)
    return layer


# ------------------------------------------------------------ embedders


class FmriEmbedderMLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.LayerNorm(hidden), nn.GELU(),
            nn.Linear(hidden, N_TOKENS * EMBED_DIM),
        )

    def forward(self, x):
        return self.net(x).reshape(*x.shape[:-1], N_TOKENS, EMBED_DIM)


class PriorNetwork(nn.Module):
    """Residual MLP from fMRI embedding to predicted keyframe embedding."""

    def __init__(self, hidden: int = 1024):
        super().__init__()
        d = N_TOKENS * EMBED_DIM
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, e):
        flat = e.flatten(start_dim=-2)
        return (flat + self.net(flat)).reshape(e.shape)


# ---------------------------------------------------------------- mixing


def mixco_mix(batch, beta_params=(0.15, 0.15), seed=0, force_lambda: float | None = None):
    """Mix each row with a random partner: lam * Y + (1 - lam) * Y[partner].

    Partners form a random cyclic derangement, so no row is its own partner.
    Returns (mixed, partners, lambdas).
    """
    b = batch.shape[0]
    if b < 2:
        raise InvalidArgument("mixing needs a batch of at least 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(b)
    partners = np.empty(b, dtype=np.int64)
    partners[order] = np.roll(order, -1)
    if force_lambda is None:
        lam = rng.beta(*beta_params, size=b)
    else:
        lam = np.full(b, float(force_lambda))
    if torch.is_tensor(batch):
        lt = torch.as_tensor(lam, dtype=batch.dtype).reshape(-1, *([1] * (batch.dim() - 1)))
        mixed = lt * batch + (1 - lt) * batch[torch.as_tensor(partners)]
    else:
        lt = lam.reshape(-1, *([1] * (batch.ndim - 1)))
        mixed = lt * batch + (1 - lt) * batch[partners]
    return mixed, partners, lam


# ----------------------------------------------------------------- losses


def _cos(a, b):
    a = F.normalize(a.flatten(start_dim=1), dim=-1)
    b = F.normalize(b.flatten(start_dim=1), dim=-1)
    return a @ b.T


def bimixco_loss(e_mixed, e_key, partners, lam, tau: float = 0.07):
    """Four-term bidirectional mixed contrastive loss.

    The back-mixing term weights row l of column j = partners[l] by
    (1 - lam[j]), as the formula is written.
    """
    if tau <= 0:
        raise InvalidArgument("temperature must be positive")
    b = e_mixed.shape[0]
    partners = torch.as_tensor(np.asarray(partners), dtype=torch.long)
    if partners.shape != (b,) or partners.min() < 0 or partners.max() >= b or torch.any(partners == torch.arange(b)):
        raise ContractViolation("partner indices must be a length-b map with no fixed points")
    lam = torch.as_tensor(np.asarray(lam), dtype=e_mixed.dtype)
    logits = _cos(e_mixed, e_key) / tau  # [i, k] = sim(mixed_i, key_k)
    rows = torch.log_softmax(logits, dim=1)
    cols = torch.log_softmax(logits, dim=0)
    idx = torch.arange(b)
    t1 = (lam * rows[idx, idx]).sum()
    t2 = ((1 - lam) * rows[idx, partners]).sum()
    t3 = (lam * cols[idx, idx]).sum()
    t4 = ((1 - lam[partners]) * cols[idx, partners]).sum()
    return -(t1 + t2 + t3 + t4) / (2 * b)


def prior_loss(prediction, target):
    if prediction.shape != target.shape:
        raise InvalidArgument("prediction and target shapes differ")
    return torch.mean((prediction - target) ** 2)


def symmetric_infonce(a, b, tau: float):
    logits = _cos(a, b) / tau
    idx = torch.arange(a.shape[0])
    return -0.5 * (torch.log_softmax(logits, dim=1)[idx, idx].mean() + torch.log_softmax(logits, dim=0)[idx, idx].mean())


def reftm_loss(e_re, e_text, projector: ReftmProjector, tau: float = 0.07):
    if tau <= 0:
        raise InvalidArgument("temperature must be positive")
    projector.assert_frozen()
    return symmetric_infonce(projector(e_re), e_text, tau)


def sr_total_loss(l_bimixco, l_prior, l_reftm, delta: float = 30.0, mu: float = 1.0):
    if delta < 0 or mu < 0:
        raise InvalidArgument("loss coefficients must be non-negative")
    return l_bimixco + delta * l_prior + mu * l_reftm


# ------------------------------------------------------------- projector


def matching_accuracy(proj_img: np.ndarray, labels: np.ndarray, class_text: np.ndarray) -> tuple[float, float]:
    """(image->text, text->image) top-1 class-level matching accuracy."""
    pi = proj_img / np.linalg.norm(proj_img, axis=1, keepdims=True)
    ct = class_text / np.linalg.norm(class_text, axis=1, keepdims=True)
    sims = pi @ ct.T  # [n_img, n_classes]
    i2t = float(np.mean(np.argmax(sims, axis=1) == labels))
    # each image's own caption queries the image pool
    t2i = float(np.mean(labels[np.argmax(sims[:, labels], axis=0)] == labels))
    return i2t, t2i


def pretrain_projector(img_embs: np.ndarray, text_embs: np.ndarray, labels: np.ndarray, class_text: np.ndarray,
                       epochs: int = 20, batch: int = 64, lr: float = 1e-3, tau: float = 0.07,
                       holdout: float = 0.25, seed: int = 0):
    """Contrastively fit the token-grid -> text projector, then freeze it."""
    if len(img_embs) < 200:
        raise InvalidArgument("projector pretraining needs at least 200 pairs")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    n = len(img_embs)
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(holdout * n))
    hold, train = perm[:n_hold], perm[n_hold:]
    proj = ReftmProjector(img_embs.shape[-2] * img_embs.shape[-1], text_embs.shape[-1])
    x = torch.as_tensor(img_embs, dtype=torch.float32)
    t = torch.as_tensor(text_embs, dtype=torch.float32)
    opt = torch.optim.AdamW(proj.parameters(), lr=lr)
    tr = torch.as_tensor(train)
    for epoch in range(epochs):
        order = tr[torch.randperm(len(tr), generator=gen)]
        for s in range(0, len(order), batch):
            idx = order[s : s + batch]
            if len(idx) < 2:
                continue
            loss = symmetric_infonce(proj(x[idx]), t[idx], tau)
            if not torch.isfinite(loss):
                raise Divergence(f"projector pretraining diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    proj.freeze()
    with torch.no_grad():
        out = proj(x[torch.as_tensor(hold)]).double().numpy()
    acc = matching_accuracy(out, labels[hold], class_text)
    return proj, {"image_to_text": acc[0], "text_to_image": acc[1], "holdout_pairs": int(n_hold)}


# ------------------------------------------------------ keyframe decoder


class KeyframeDecoder(nn.Module):
    """Reconstruction embedding -> latent of the keyframe's object drawn at
    the frame centre (appearance). Placement on the blurry first frame is
    done in pixel space by ``place_template``.

    The network predicts per-channel standardized latents; codec channels
    differ several-fold in offset and scale (patch means vs. detail).
    """

    def __init__(self, latent_shape, hidden: int = 256):
        super().__init__()
        c, h, w = latent_shape
        self.latent_shape = tuple(latent_shape)
        self.net = nn.Sequential(
            nn.Linear(N_TOKENS * EMBED_DIM, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, c * h * w),
        )
        self.register_buffer("lat_mean", torch.zeros(c, 1, 1))
        self.register_buffer("lat_std", torch.ones(c, 1, 1))

    def set_latent_stats(self, latents):
        z = torch.as_tensor(np.asarray(latents), dtype=self.lat_mean.dtype)
        self.lat_mean.copy_(z.mean(dim=(0, 2, 3)).reshape(-1, 1, 1))
        self.lat_std.copy_(z.std(dim=(0, 2, 3)).clamp_min(1e-6).reshape(-1, 1, 1))

    def forward_normalized(self, e_re):
        return self.net(e_re.flatten(start_dim=-2)).reshape(-1, *self.latent_shape)

    def forward(self, e_re):
        return self.forward_normalized(e_re) * self.lat_std + self.lat_mean


def foreground_centroid(frame, top_fraction: float = 0.1) -> np.ndarray:
    """(row, col) centroid of the pixels that differ most from the frame's
    median colour; the strongest ``top_fraction`` of pixels carry weight."""
    frame = np.asarray(frame, dtype=np.float64)
    dev = np.linalg.norm(frame - np.median(frame.reshape(-1, 3), axis=0), axis=-1)
    w = np.maximum(dev - np.quantile(dev, 1.0 - top_fraction), 0.0)
    if w.sum() <= 1e-12:
        return (np.array(dev.shape, dtype=np.float64) - 1) / 2
    rows, cols = np.indices(dev.shape)
    return np.array([(rows * w).sum(), (cols * w).sum()]) / w.sum()


def translate_frame(frame, offset) -> np.ndarray:
    """Bilinear sub-pixel translation by (d_row, d_col); edges extend outwards."""
    return ndimage.shift(np.asarray(frame, dtype=np.float64), (offset[0], offset[1], 0), order=1, mode="nearest")


def center_object(frame) -> np.ndarray:
    """Translate a frame so its foreground centroid sits at the frame centre."""
    frame = np.asarray(frame, dtype=np.float64)
    centre = (np.array(frame.shape[:2], dtype=np.float64) - 1) / 2
    return translate_frame(frame, centre - foreground_centroid(frame))


def matte_background(frame, lo: float = 0.1, hi: float = 0.3) -> np.ndarray:
    """Fade pixels within ``lo`` of the median colour to that colour, ramping
    linearly to untouched at ``hi``; removes low-amplitude decoder haze."""
    frame = np.asarray(frame, dtype=np.float64)
    bg = np.median(frame.reshape(-1, 3), axis=0)
    dev = np.linalg.norm(frame - bg, axis=-1)
    alpha = np.clip((dev - lo) / (hi - lo), 0.0, 1.0)[..., None]
    return bg + alpha * (frame - bg)


def place_template(template, blurry) -> np.ndarray:
    """Move a centred appearance template onto the blurry frame's foreground centroid."""
    template = np.asarray(template, dtype=np.float64)
    centre = (np.array(template.shape[:2], dtype=np.float64) - 1) / 2
    return translate_frame(template, foreground_centroid(blurry) - centre)


# --------------------------------------------------------------- model


class SemanticsReconstructor(nn.Module):
    def __init__(self, cfg: SRConfig, latent_shape):
        super().__init__()
        self.cfg = cfg
        self.ridge = RidgeLayer(cfg.n_voxels, cfg.ridge_dim, cfg.ridge_lambda)
        self.embed = FmriEmbedderMLP(cfg.ridge_dim, cfg.hidden)
        self.prior = PriorNetwork()
        self.decoder = KeyframeDecoder(latent_shape)
        self.register_buffer("vox_mean", torch.zeros(cfg.n_voxels))
        self.register_buffer("vox_std", torch.ones(cfg.n_voxels))

    def normalize(self, fmri):
        return (torch.as_tensor(fmri, dtype=self.vox_mean.dtype) - self.vox_mean) / self.vox_std

    def fmri_embedding(self, y_norm):
        return self.embed(self.ridge(y_norm))

    @torch.no_grad()
    def embeddings(self, fmri):
        """(fMRI embedding, reconstruction embedding) for raw voxel vectors."""
        e = self.fmri_embedding(self.normalize(np.atleast_2d(fmri)))
        return e.double().numpy(), self.prior(e).double().numpy()

    @torch.no_grad()
    def template_latent(self, e_re) -> np.ndarray:
        """Centred appearance latents [n, c, h, w] for reconstruction embeddings."""
        e = torch.as_tensor(np.asarray(e_re), dtype=self.vox_mean.dtype).reshape(-1, N_TOKENS, EMBED_DIM)
        return self.decoder(e).double().numpy()

    def decode_keyframe(self, e_re, blurry_latent, codec) -> np.ndarray:
        """Keyframes [n, H, W, 3]: decoded appearance templates, background
        matted, placed on the foreground centroids of the decoded blurry
        first frames."""
        templates = codec.decode_latent(self.template_latent(e_re))
        blurry = codec.decode_latent(np.asarray(blurry_latent).reshape(-1, *self.decoder.latent_shape))
        if len(templates) != len(blurry):
            raise ContractViolation(f"{len(templates)} embeddings for {len(blurry)} blurry frames")
        return np.stack([np.clip(place_template(matte_background(t), b), 0.0, 1.0) for t, b in zip(templates, blurry)])


def _check(loss, phase, step):
    if not torch.isfinite(loss):
        raise Divergence(f"semantics training diverged in phase '{phase}' at step {step}")


def train_sr(fmri: np.ndarray, frame_embs: np.ndarray, text_embs: np.ndarray, projector: ReftmProjector,
             cfg: SRConfig, latent_shape, template_latents: np.ndarray | None = None):
    """Three phases: (1) ridge + MLP on mixed contrastive alignment, (2) prior on
    delta * L_Prior + mu * L_Reftm, (3) appearance decoder on the prior's outputs.

    fmri: [n, V]; frame_embs: [n, N_f, 16, 64] embeddings of every retained
    frame (the keyframe is redrawn each epoch); text_embs: [n, 64];
    template_latents: [n, c, h, w] latents of the centred first frames.
    """
    projector.assert_frozen()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n, n_frames = frame_embs.shape[:2]
    model = SemanticsReconstructor(cfg, latent_shape)
    model.vox_mean.copy_(torch.as_tensor(fmri.mean(0)))
    model.vox_std.copy_(torch.as_tensor(fmri.std(0) + 1e-6))
    y_all = model.normalize(fmri).float()
    fe = torch.as_tensor(frame_embs, dtype=torch.float32)
    te = torch.as_tensor(text_embs, dtype=torch.float32)
    history = {"align_loss": [], "prior_loss": [], "reftm_loss": [], "decoder_loss": []}

    def keyframes(epoch_rng):
        pick = torch.as_tensor(epoch_rng.integers(n_frames, size=n))
        return fe[torch.arange(n), pick]

    # phase 1: alignment
    params = list(model.ridge.parameters()) + list(model.embed.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr)
    steps = cfg.align_epochs * math.ceil(n / cfg.align_batch)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=max(steps, 1))
    step = 0
    for epoch in range(cfg.align_epochs):
        key = keyframes(np.random.default_rng([cfg.seed, 1, epoch]))
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for s in range(0, n, cfg.align_batch):
            idx = perm[s : s + cfg.align_batch]
            if len(idx) < 2:
                continue
            mixed, partners, lam = mixco_mix(y_all[idx], (cfg.beta_a, cfg.beta_b), rng)
            loss = bimixco_loss(model.fmri_embedding(mixed), key[idx], partners, lam, cfg.tau)
            loss = loss + model.ridge.penalty()
            _check(loss, "align", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            total += loss.item() * len(idx)
        history["align_loss"].append(total / n)

    # phase 2: prior + caption alignment, alignment weights frozen
    for p in params:
        p.requires_grad_(False)
    with torch.no_grad():
        e_y = model.fmri_embedding(y_all)
    opt = torch.optim.AdamW(model.prior.parameters(), lr=cfg.lr)
    steps = cfg.prior_epochs * math.ceil(n / cfg.prior_batch)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=max(steps, 1))
    for epoch in range(cfg.prior_epochs):
        key = keyframes(np.random.default_rng([cfg.seed, 2, epoch]))
        perm = torch.randperm(n, generator=gen)
        tp = tr = 0.0
        for s in range(0, n, cfg.prior_batch):
            idx = perm[s : s + cfg.prior_batch]
            e_re = model.prior(e_y[idx])
            lp = prior_loss(e_re, key[idx])
            lr_ = reftm_loss(e_re, te[idx], projector, cfg.tau) if len(idx) > 1 else e_re.sum() * 0
            loss = sr_total_loss(torch.zeros(()), lp, lr_, cfg.delta, cfg.mu)
            _check(loss, "prior", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            tp += lp.item() * len(idx)
            tr += lr_.item() * len(idx)
        history["prior_loss"].append(tp / n)
        history["reftm_loss"].append(tr / n)
    projector.assert_frozen()
    for p in model.prior.parameters():
        p.requires_grad_(False)

    # phase 3: appearance decoder on the model's own reconstruction embeddings
    if template_latents is not None and cfg.decoder_epochs > 0:
        with torch.no_grad():
            e_re_all = model.prior(e_y)
        model.decoder.set_latent_stats(template_latents)
        zt = (torch.as_tensor(template_latents, dtype=torch.float32) - model.decoder.lat_mean) / model.decoder.lat_std
        noise_scale = 0.3 * e_re_all.std()
        opt = torch.optim.AdamW(model.decoder.parameters(), lr=1e-3)
        for epoch in range(cfg.decoder_epochs):
            perm = torch.randperm(n, generator=gen)
            total = 0.0
            for s in range(0, n, cfg.prior_batch):
                idx = perm[s : s + cfg.prior_batch]
                e_in = e_re_all[idx] + noise_scale * torch.randn(e_re_all[idx].shape, generator=gen)
                loss = torch.mean((model.decoder.forward_normalized(e_in) - zt[idx]) ** 2)
                _check(loss, "decoder", step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                total += loss.item() * len(idx)
            history["decoder_loss"].append(total / n)
    history["phase_boundaries"] = {
        "align_epochs": cfg.align_epochs, "prior_epochs": cfg.prior_epochs, "decoder_epochs": cfg.decoder_epochs,
    }
    return model.eval(), history


def config_dict(cfg: SRConfig) -> dict:
    return asdict(cfg)


def reconstruct_keyframe(fmri, blurry_first_latent, sr: SemanticsReconstructor | None, codec):
    """Keyframe image and reconstruction embedding for one fMRI vector."""
    if sr is None:
        raise NotReady("train-sr", "no semantics checkpoint loaded")
    if blurry_first_latent is None:
        raise NotReady("train-pr", "no blurry first frame available")
    _, e_re = sr.embeddings(fmri)
    return sr.decode_keyframe(e_re, blurry_first_latent, codec)[0], e_re[0]


# ------------------------------------------------------------ voxel export


def voxel_weight_map(weight: np.ndarray) -> np.ndarray:
    """Per-voxel mean |weight| over output dims, min-max scaled to [0, 1].

    weight: [out_dim, n_voxels] (torch Linear layout).
    """
    score = np.abs(np.asarray(weight, dtype=np.float64)).mean(axis=0)
    lo, hi = score.min(), score.max()
    if hi - lo <= 0:
        log.warning("voxel weights are all equal; exporting 0.5 everywhere")
        return np.full_like(score, 0.5)
    return (score - lo) / (hi - lo)


def export_voxel_weights(weight: np.ndarray, out_dir) -> np.ndarray:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w = voxel_weight_map(weight)
    save_tensor(w, out / "voxel_weights.tns")
    with open(out / "voxel_weights.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["voxel_index", "weight"])
        for i, v in enumerate(w):
            writer.writerow([i, repr(float(v))])
    return w
