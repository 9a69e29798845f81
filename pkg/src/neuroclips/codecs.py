"""Small deterministic stand-ins for the frozen pretrained models: a latent
pixel codec, a token-grid semantic embedder with a text branch, a frame
classifier and a template captioner."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.fft import dct
from torch import nn

from .data import BACKGROUND, WorldSpec, _rng, class_name, render_clip, sample_motion
from .errors import InvalidArgument

log = logging.getLogger(__name__)

PATCH = 4
N_TOKENS = 16
EMBED_DIM = 64
TEXT_DIM = 64


# -------------------------------------------------------------- latent codecs


class LatentCodec:
    """Frame [H, W, 3] <-> latent [c, h, w]; decode clamps to [0, 1]."""

    latent_shape: tuple[int, int, int]
    latent_scale: float = 1.0

    def _encode_one(self, frame: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _decode_one(self, latent: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def encode_latent(self, frames) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-3:] != self.frame_shape:
            raise InvalidArgument(f"frame shape {frames.shape[-3:]} != {self.frame_shape}")
        lead = frames.shape[:-3]
        flat = frames.reshape(-1, *self.frame_shape)
        out = np.stack([self._encode_one(f) * self.latent_scale for f in flat])
        return out.reshape(*lead, *self.latent_shape)

    def decode_latent(self, latents) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float64)
        if latents.shape[-3:] != self.latent_shape:
            raise InvalidArgument(f"latent shape {latents.shape[-3:]} != {self.latent_shape}")
        lead = latents.shape[:-3]
        flat = latents.reshape(-1, *self.latent_shape)
        out = np.stack([np.clip(self._decode_one(z / self.latent_scale), 0.0, 1.0) for z in flat])
        return out.reshape(*lead, *self.frame_shape)

    def params(self) -> dict[str, np.ndarray]:
        return {}


def _dct_basis(n: int) -> np.ndarray:
    d1 = dct(np.eye(n), norm="ortho", axis=0)
    return np.kron(d1, d1)  # rows are orthonormal 2-D basis functions


class OrthogonalCodec(LatentCodec):
    """Exactly invertible blockwise 2-D DCT.

    Each 4x4 patch of each color channel maps to 16 orthonormal
    coefficients. Channel k of the latent holds coefficient k // 3 of color
    k % 3, so the first three channels are the (scaled) patch means.
    """

    variant = "orthogonal"

    def __init__(self, frame_size: int = 64, latent_scale: float = 1.0):
        if frame_size % PATCH:
            raise InvalidArgument("frame size must be a multiple of the patch size")
        self.frame_shape = (frame_size, frame_size, 3)
        g = frame_size // PATCH
        self.latent_shape = (3 * PATCH * PATCH, g, g)
        self.latent_scale = float(latent_scale)
        self.basis = _dct_basis(PATCH)

    def _encode_one(self, frame):
        s, g = self.frame_shape[0], self.latent_shape[1]
        patches = frame.reshape(g, PATCH, g, PATCH, 3).transpose(0, 2, 4, 1, 3).reshape(g, g, 3, PATCH * PATCH)
        coeffs = patches @ self.basis.T  # [g, g, color, coeff]
        return coeffs.transpose(3, 2, 0, 1).reshape(self.latent_shape)

    def _decode_one(self, latent):
        g = self.latent_shape[1]
        coeffs = latent.reshape(PATCH * PATCH, 3, g, g).transpose(2, 3, 1, 0)
        patches = coeffs @ self.basis
        return patches.reshape(g, g, 3, PATCH, PATCH).transpose(0, 3, 1, 4, 2).reshape(self.frame_shape)

    def params(self):
        return {"basis": self.basis}


class _ConvAE(nn.Module):
    def __init__(self, latent_c: int = 4, width: int = 32):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.GELU(),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.GELU(),
            nn.Conv2d(2 * width, latent_c, 3, 1, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_c, 2 * width, 3, 1, 1), nn.GELU(),
            nn.ConvTranspose2d(2 * width, width, 4, 2, 1), nn.GELU(),
            nn.ConvTranspose2d(width, 3, 4, 2, 1),
        )


class ConvCodec(LatentCodec):
    """Small trained convolutional autoencoder with a [4, 16, 16] latent."""

    variant = "conv"

    def __init__(self, frame_size: int = 64, latent_c: int = 4, latent_scale: float = 1.0):
        self.frame_shape = (frame_size, frame_size, 3)
        self.latent_shape = (latent_c, frame_size // 4, frame_size // 4)
        self.latent_scale = float(latent_scale)
        torch.manual_seed(0)
        self.net = _ConvAE(latent_c).double()

    @torch.no_grad()
    def _encode_one(self, frame):
        x = torch.from_numpy(np.ascontiguousarray(frame.transpose(2, 0, 1)))[None]
        return self.net.enc(x)[0].numpy()

    @torch.no_grad()
    def _decode_one(self, latent):
        y = self.net.dec(torch.from_numpy(np.ascontiguousarray(latent))[None])[0]
        return y.numpy().transpose(1, 2, 0)

    def fit(self, frames: np.ndarray, steps: int = 1500, batch: int = 32, lr: float = 2e-3, seed: int = 0):
        torch.manual_seed(seed)
        x_all = torch.from_numpy(frames.transpose(0, 3, 1, 2).astype(np.float32))
        net = self.net.float()
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
        gen = torch.Generator().manual_seed(seed)
        for step in range(steps):
            idx = torch.randint(len(x_all), (batch,), generator=gen)
            x = x_all[idx]
            loss = torch.mean((net.dec(net.enc(x)) - x) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            if step % 250 == 0:
                log.info("conv codec step %d mse %.5f", step, loss.item())
        self.net = net.double()
        return self

    def params(self):
        return {"net." + k: v.detach().numpy() for k, v in self.net.state_dict().items()}

    def load_params(self, params):
        state = {k[4:]: torch.from_numpy(v) for k, v in params.items() if k.startswith("net.")}
        self.net.load_state_dict(state)


def make_codec(variant: str, frame_size: int = 64, latent_scale: float = 1.0) -> LatentCodec:
    if variant == "orthogonal":
        return OrthogonalCodec(frame_size, latent_scale)
    if variant == "conv":
        return ConvCodec(frame_size, latent_scale=latent_scale)
    raise InvalidArgument(f"unknown codec variant {variant!r}")


# ------------------------------------------------------------ frame features


def _frame_descriptor(frame: np.ndarray) -> np.ndarray:
    """Position-invariant appearance descriptor plus a coarse occupancy grid."""
    frame = np.asarray(frame, dtype=np.float64)
    s = frame.shape[0]
    bg = np.median(frame.reshape(-1, 3), axis=0)
    diff = frame - bg
    w = np.linalg.norm(diff, axis=-1)
    total = w.sum() + 1e-8
    mean_diff = (w[..., None] * diff).reshape(-1, 3).sum(0) / total
    direction = mean_diff / (np.linalg.norm(mean_diff) + 1e-8)
    mask = np.clip(w / 0.3, 0.0, 1.0)
    area = mask.sum() / (np.pi * 9.0**2)
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    m = mask.sum() + 1e-8
    cx, cy = (mask * xs).sum() / m, (mask * ys).sum() / m
    dx, dy = xs - cx, ys - cy
    cxx, cyy, cxy = ((mask * dx * dx).sum() / m, (mask * dy * dy).sum() / m, (mask * dx * dy).sum() / m)
    spread = cxx + cyy + 1e-8
    aniso = np.array([(cxx - cyy) / spread, 2 * cxy / spread])
    rad = np.hypot(dx, dy)
    edges = np.array([0.0, 3.0, 6.0, 9.0, 13.0, np.inf])
    profile = np.array([(mask * ((rad >= lo) & (rad < hi))).sum() for lo, hi in zip(edges[:-1], edges[1:])]) / m
    blocks = w.reshape(4, s // 4, 4, s // 4).mean(axis=(1, 3)).ravel()
    return np.concatenate([3.0 * direction, [area, np.sqrt(spread) / 9.0], aniso, 2.0 * profile, blocks])


def frame_descriptors(frames) -> np.ndarray:
    frames = np.asarray(frames)
    flat = frames.reshape(-1, *frames.shape[-3:])
    out = np.stack([_frame_descriptor(f) for f in flat])
    return out.reshape(*frames.shape[:-3], out.shape[-1])


_APPEARANCE = slice(0, 12)  # descriptor entries that ignore position


def world_frames(world: WorldSpec, per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Single frames of every class at random positions (codec pretraining corpus)."""
    frames, labels = [], []
    for c in range(world.n_classes):
        for k in range(per_class):
            rng = _rng(seed, 3, c, k)
            motion = sample_motion(rng, world)
            clip = render_clip(c, motion, world)
            frames.append(clip.frames[int(rng.integers(clip.n_frames))])
            labels.append(c)
    return np.stack(frames), np.array(labels)


# --------------------------------------------------------- frame classifier


@dataclass
class FrameClassifier:
    """Nearest-centroid classifier over appearance descriptors."""

    centroids: np.ndarray
    scale: np.ndarray
    temperature: float = 0.5
    abstain_below: float = 0.3

    @classmethod
    def fit(cls, frames: np.ndarray, labels: np.ndarray, n_classes: int) -> "FrameClassifier":
        d = frame_descriptors(frames)[:, _APPEARANCE]
        scale = d.std(axis=0) + 1e-3
        z = d / scale
        centroids = np.stack([z[labels == c].mean(axis=0) for c in range(n_classes)])
        return cls(centroids, scale)

    def predict_proba(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        single = frames.ndim == 3
        d = frame_descriptors(frames.reshape(-1, *frames.shape[-3:]))[:, _APPEARANCE] / self.scale
        d2 = ((d[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        logits = -d2 / (2 * self.temperature * d.shape[1])
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        if single:
            return p[0]
        return p.reshape(*frames.shape[:-3], -1)

    def predict(self, frames) -> np.ndarray:
        return np.argmax(self.predict_proba(frames), axis=-1)

    def predict_video_proba(self, video) -> np.ndarray:
        """Video-level class probabilities: mean of per-frame probabilities."""
        return self.predict_proba(np.asarray(video)).mean(axis=-2)

    def params(self):
        return {"classifier.centroids": self.centroids, "classifier.scale": self.scale}


# --------------------------------------------------------- semantic embedder


class TextVocabulary:
    FIXED = ("a", "video", "of", "an", "object")

    def __init__(self, n_classes: int, seed: int = 0, dim: int = TEXT_DIM):
        self.words = list(self.FIXED) + [class_name(c) for c in range(n_classes)]
        rng = _rng(seed, 4242)
        self.vectors = rng.standard_normal((len(self.words), dim))
        self.index = {w: i for i, w in enumerate(self.words)}
        self.weights = np.array([1.0 if w in self.FIXED else 3.0 for w in self.words])

    def tokenize(self, caption: str) -> list[int]:
        ids = []
        for word in caption.lower().split():
            if word not in self.index:
                raise InvalidArgument(f"unknown vocabulary token {word!r}")
            ids.append(self.index[word])
        if not ids:
            raise InvalidArgument("empty caption")
        return ids


class SemanticEmbedder:
    """Image frame -> token grid [16, 64]; caption -> vector [64].

    The image branch maps an appearance descriptor to per-class prototype
    token grids through a ridge fit on world renders, plus a small fixed
    random projection that keeps within-class variation.
    """

    def __init__(self, n_classes: int, seed: int = 0):
        self.n_classes = n_classes
        self.vocab = TextVocabulary(n_classes, seed)
        rng = _rng(seed, 5151)
        self.prototypes = rng.standard_normal((n_classes, N_TOKENS * EMBED_DIM))
        self.mu = None
        self.sd = None
        self.A = None
        self.R = None

    def fit(self, frames: np.ndarray, labels: np.ndarray, ridge: float = 1.0, seed: int = 0) -> "SemanticEmbedder":
        d = frame_descriptors(frames)
        self.mu, self.sd = d.mean(axis=0), d.std(axis=0) + 1e-3
        z = np.hstack([(d - self.mu) / self.sd, np.ones((len(d), 1))])
        target = self.prototypes[labels]
        self.A = np.linalg.solve(z.T @ z + ridge * np.eye(z.shape[1]), z.T @ target)
        self.R = _rng(seed, 5152).standard_normal((z.shape[1], N_TOKENS * EMBED_DIM)) * 0.3
        return self

    def _check(self):
        if self.A is None:
            raise InvalidArgument("semantic embedder is not fitted")

    def embed_image(self, frames) -> np.ndarray:
        self._check()
        frames = np.asarray(frames)
        d = frame_descriptors(frames.reshape(-1, *frames.shape[-3:]))
        z = np.hstack([(d - self.mu) / self.sd, np.ones((len(d), 1))])
        e = z @ self.A + np.tanh(z @ self.R)
        return e.reshape(*frames.shape[:-3], N_TOKENS, EMBED_DIM)

    def embed_text(self, caption: str) -> np.ndarray:
        ids = self.vocab.tokenize(caption)
        w = self.vocab.weights[ids]
        v = (w[:, None] * self.vocab.vectors[ids]).sum(0) / w.sum()
        return v / np.linalg.norm(v)

    def params(self):
        self._check()
        return {
            "embedder.mu": self.mu, "embedder.sd": self.sd, "embedder.A": self.A,
            "embedder.R": self.R, "embedder.prototypes": self.prototypes,
            "embedder.vocab": self.vocab.vectors,
        }

    def load_params(self, p):
        self.mu, self.sd, self.A, self.R = p["embedder.mu"], p["embedder.sd"], p["embedder.A"], p["embedder.R"]
        self.prototypes = p["embedder.prototypes"]
        self.vocab.vectors = p["embedder.vocab"]


def cosine(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# ----------------------------------------------------------------- captioner


class Captioner:
    TEMPLATE = "a video of a {}"
    FALLBACK = "a video of an object"

    def __init__(self, n_classes: int, classifier: FrameClassifier | None = None):
        self.n_classes = n_classes
        self.classifier = classifier

    def caption(self, class_id: int | None) -> str:
        if class_id is None:
            return self.FALLBACK
        if not 0 <= class_id < self.n_classes:
            raise InvalidArgument(f"class id {class_id} out of range")
        return self.TEMPLATE.format(class_name(class_id))

    def caption_keyframe(self, item) -> str:
        if isinstance(item, (int, np.integer)):
            return self.caption(int(item))
        if self.classifier is None:
            raise InvalidArgument("frame captioning needs a frame classifier")
        p = self.classifier.predict_proba(np.asarray(item)[None])[0]
        if p.max() < self.classifier.abstain_below:
            return self.FALLBACK
        return self.caption(int(np.argmax(p)))


# ------------------------------------------------------------ projector


class ReftmProjector(nn.Module):
    """Flattened token grid -> text embedding space; frozen after pretraining."""

    def __init__(self, in_dim: int = N_TOKENS * EMBED_DIM, out_dim: int = TEXT_DIM):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.frozen = False

    def forward(self, x):
        return self.linear(x.flatten(start_dim=-2))

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def assert_frozen(self):
        from .errors import ContractViolation

        if not self.frozen or any(p.requires_grad for p in self.parameters()):
            raise ContractViolation("projector must stay frozen during semantics training")
        if any(p.grad is not None and torch.any(p.grad != 0) for p in self.parameters()):
            raise ContractViolation("projector received a gradient update")
