"""Synthetic stimulus world: moving-shape clips, a known linear voxel
encoding model, and on-disk dataset persistence."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ContractViolation, InvalidArgument, NotReady
from .tensorio import load_array, save_tensor

log = logging.getLogger(__name__)

CLASS_NAMES = ("jellyfish", "bird", "fish", "turtle", "airplane", "car", "flower", "dog")
_GEOMETRIES = ("disc", "triangle", "square", "diamond", "ring", "cross", "bar", "saltire")
_COLORS = (
    (0.95, 0.25, 0.25),
    (0.25, 0.90, 0.30),
    (0.25, 0.40, 0.95),
    (0.95, 0.90, 0.20),
    (0.90, 0.30, 0.90),
    (0.20, 0.90, 0.90),
    (0.98, 0.60, 0.15),
    (0.95, 0.95, 0.95),
)
BACKGROUND = 0.15
OBJECT_RADIUS = 9.0
MAX_SPEED = 8.0  # pixels per second
_COARSE_GRID = 4

_SPLIT_CODES = {"train": 1, "test": 2, "pretrain": 3}


@dataclass(frozen=True)
class WorldSpec:
    n_classes: int = 8
    frame_size: int = 64
    clip_seconds: float = 2.0
    train_fps: int = 3
    infer_fps: int = 8
    source_fps: int = 30
    n_voxels: int = 2048
    noise_sigma: float = 0.25
    active_fraction: float = 0.75
    delay_samples: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidArgument("n_classes must be >= 2")
        for name in ("train_fps", "infer_fps", "source_fps"):
            n = Fraction(getattr(self, name)) * Fraction(self.clip_seconds).limit_denominator(1000)
            if n.denominator != 1 or n <= 0:
                raise InvalidArgument(f"{name} x clip_seconds must be a positive integer")
        if self.delay_samples < 0:
            raise InvalidArgument("delay_samples must be >= 0")

    def frames_at(self, fps: float) -> int:
        n = Fraction(fps).limit_denominator(1000) * Fraction(self.clip_seconds).limit_denominator(1000)
        if n.denominator != 1:
            raise InvalidArgument(f"{fps} FPS does not give a whole frame count")
        return int(n)

    @property
    def n_frames(self) -> int:
        """Retained frames per clip at the training rate."""
        return self.frames_at(self.train_fps)

    @property
    def n_infer_frames(self) -> int:
        return self.frames_at(self.infer_fps)

    @property
    def feature_dim(self) -> int:
        return self.n_classes + 4 + self.n_frames * _COARSE_GRID**2 + 1


def class_name(class_id: int) -> str:
    if class_id < len(CLASS_NAMES):
        return CLASS_NAMES[class_id]
    return f"object{class_id}"


@dataclass
class MotionParams:
    x0: float
    y0: float
    vx: float
    vy: float

    def position(self, t):
        return self.x0 + self.vx * t, self.y0 + self.vy * t

    def reversed(self, duration: float) -> "MotionParams":
        x1, y1 = self.position(duration)
        return MotionParams(x1, y1, -self.vx, -self.vy)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.vx, self.vy]


@dataclass
class VideoClip:
    frames: np.ndarray  # [n_frames, H, W, 3], values in [0, 1]
    fps: float
    class_id: int = -1
    motion_params: MotionParams | None = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FmriSample:
    voxels: np.ndarray
    subject_id: str = "sim01"
    clip_index: int = -1
    repeat_count: int = 1

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 1 or not np.all(np.isfinite(self.voxels)):
            raise InvalidArgument("fMRI voxels must be a finite 1-D vector")


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# ---------------------------------------------------------------- rendering


def _signed_distance(geometry: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if geometry == "disc":
        return np.hypot(dx, dy) - r
    if geometry == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - 0.85 * r
    if geometry == "diamond":
        return np.abs(dx) + np.abs(dy) - 1.2 * r
    if geometry == "ring":
        return np.abs(np.hypot(dx, dy) - 0.7 * r) - 0.3 * r
    if geometry == "triangle":
        # equilateral, pointing up; outward normals at 90, 210, 330 degrees (y grows downward)
        c = np.sqrt(3.0) / 2.0
        planes = np.stack([dy, -c * dx - 0.5 * dy, c * dx - 0.5 * dy])
        return planes.max(axis=0) - 0.6 * r
    if geometry == "cross":
        a = np.maximum(np.abs(dx) - r, np.abs(dy) - 0.35 * r)
        b = np.maximum(np.abs(dy) - r, np.abs(dx) - 0.35 * r)
        return np.minimum(a, b)
    if geometry == "bar":
        return np.maximum(np.abs(dx) - 1.3 * r, np.abs(dy) - 0.4 * r)
    if geometry == "saltire":
        u, v = (dx + dy) / np.sqrt(2.0), (dx - dy) / np.sqrt(2.0)
        a = np.maximum(np.abs(u) - r, np.abs(v) - 0.3 * r)
        b = np.maximum(np.abs(v) - r, np.abs(u) - 0.3 * r)
        return np.minimum(a, b)
    raise InvalidArgument(f"unknown geometry {geometry!r}")


def class_style(class_id: int) -> tuple[str, tuple[float, float, float]]:
    if class_id < len(_GEOMETRIES):
        return _GEOMETRIES[class_id], _COLORS[class_id]
    rng = _rng(9173, class_id)
    return _GEOMETRIES[class_id % len(_GEOMETRIES)], tuple(float(c) for c in rng.uniform(0.3, 1.0, 3))


def render_frame(class_id: int, cx: float, cy: float, size: int) -> np.ndarray:
    geometry, color = class_style(class_id)
    cx = float(np.clip(cx, 0.0, size - 1.0))
    cy = float(np.clip(cy, 0.0, size - 1.0))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    d = _signed_distance(geometry, xs - cx, ys - cy, OBJECT_RADIUS)
    alpha = np.clip(0.5 - d, 0.0, 1.0)[..., None]
    frame = BACKGROUND * (1.0 - alpha) + np.asarray(color) * alpha
    return np.clip(frame, 0.0, 1.0)


def render_clip(class_id: int, motion_params: MotionParams, world: WorldSpec, fps: float | None = None) -> VideoClip:
    """Render one clip of a single shape translating along a straight line."""
    if not 0 <= class_id < world.n_classes:
        raise InvalidArgument(f"class_id {class_id} outside [0, {world.n_classes})")
    fps = world.train_fps if fps is None else fps
    n = world.frames_at(fps)
    frames = np.empty((n, world.frame_size, world.frame_size, 3), dtype=np.float32)
    for i in range(n):
        cx, cy = motion_params.position(i / fps)
        frames[i] = render_frame(class_id, cx, cy, world.frame_size)
    return VideoClip(frames, fps, class_id, motion_params)


def downsample_frames(clip: VideoClip, target_fps: float) -> VideoClip:
    """Keep every k-th frame starting at frame 0, k = source_fps / target_fps."""
    ratio = Fraction(clip.fps).limit_denominator(1000) / Fraction(target_fps).limit_denominator(1000)
    if ratio.denominator != 1 or ratio < 1:
        raise InvalidArgument(f"cannot downsample {clip.fps} FPS to {target_fps} FPS")
    k = int(ratio)
    return VideoClip(clip.frames[::k].copy(), target_fps, clip.class_id, clip.motion_params)


def sample_motion(rng: np.random.Generator, world: WorldSpec) -> MotionParams:
    s = world.frame_size
    x0, y0 = rng.uniform(0.25 * s, 0.75 * s, 2)
    vx, vy = rng.uniform(-MAX_SPEED, MAX_SPEED, 2)
    return MotionParams(float(x0), float(y0), float(vx), float(vy))


# ----------------------------------------------------------------- encoding


def clip_features(class_id: int, motion: MotionParams, world: WorldSpec, tag: float = 0.0) -> np.ndarray:
    """Renderer features: class one-hot, normalized motion, per-frame coarse
    occupancy maps, and a reserved tag slot."""
    s = world.frame_size
    onehot = np.zeros(world.n_classes)
    onehot[class_id] = 1.0
    mot = np.array([motion.x0 / s - 0.5, motion.y0 / s - 0.5, motion.vx / MAX_SPEED, motion.vy / MAX_SPEED])
    g = _COARSE_GRID
    centers = (np.arange(g) + 0.5) * s / g
    sigma = s / g
    maps = []
    for i in range(world.n_frames):
        cx, cy = motion.position(i / world.train_fps)
        cx, cy = np.clip(cx, 0, s - 1), np.clip(cy, 0, s - 1)
        wx = np.exp(-0.5 * ((centers - cx) / sigma) ** 2)
        wy = np.exp(-0.5 * ((centers - cy) / sigma) ** 2)
        maps.append(np.outer(wy, wx).ravel())
    return np.concatenate([onehot, mot, np.concatenate(maps), [tag]])


@dataclass
class GroundTruthEncoder:
    W_true: np.ndarray  # [feature_dim, n_voxels]
    delay_samples: int = 2

    @classmethod
    def from_world(cls, world: WorldSpec) -> "GroundTruthEncoder":
        rng = _rng(world.seed, 7001)
        W = rng.standard_normal((world.feature_dim, world.n_voxels))
        n_active = int(round(world.active_fraction * world.n_voxels))
        active = np.zeros(world.n_voxels, dtype=bool)
        active[rng.permutation(world.n_voxels)[:n_active]] = True
        W[:, ~active] = 0.0
        return cls(W, world.delay_samples)

    @property
    def active_voxels(self) -> np.ndarray:
        return np.any(self.W_true != 0.0, axis=0)

    def response(self, features: np.ndarray) -> np.ndarray:
        if features.shape[-1] != self.W_true.shape[0]:
            raise ContractViolation(
                f"feature length {features.shape[-1]} != encoder input {self.W_true.shape[0]}"
            )
        return features @ self.W_true


def simulate_fmri(
    clip: VideoClip,
    enc: GroundTruthEncoder,
    noise_sigma: float,
    world: WorldSpec,
    rng: np.random.Generator | None = None,
    repeats: int = 1,
    tag: float = 0.0,
) -> FmriSample:
    """Noiseless linear response plus Gaussian noise, averaged over repeats."""
    feats = clip_features(clip.class_id, clip.motion_params, world, tag=tag)
    clean = enc.response(feats)
    if noise_sigma == 0:
        return FmriSample(clean, repeat_count=repeats)
    rng = rng if rng is not None else np.random.default_rng(0)
    noise = rng.standard_normal((repeats, clean.size)).mean(axis=0)
    return FmriSample(clean + noise_sigma * noise, repeat_count=repeats)


def simulate_stream(
    clips: list[VideoClip],
    enc: GroundTruthEncoder,
    world: WorldSpec,
    noise_sigma: float,
    repeats: int,
    split_code: int,
    tag_with_index: bool = False,
) -> list[tuple[int, FmriSample]]:
    """Acquire one recording per clip slot with a hemodynamic lag, then pair.

    Recording r reflects clip r - delay. Clip i is paired with recording
    i + delay; clips whose response falls past the last recording are dropped.
    """
    delay = enc.delay_samples
    n = len(clips)
    recordings = []
    for r in range(n):
        rng = _rng(world.seed, split_code, r, 17)
        if r < delay:
            base = np.zeros(world.n_voxels)
            noise = rng.standard_normal((repeats, world.n_voxels)).mean(axis=0)
            recordings.append(base + noise_sigma * noise)
            continue
        src = clips[r - delay]
        tag = float(r - delay) if tag_with_index else 0.0
        s = simulate_fmri(src, enc, noise_sigma, world, rng=rng, repeats=repeats, tag=tag)
        recordings.append(s.voxels)
    pairs = []
    for i in range(n - delay):
        pairs.append((i, FmriSample(recordings[i + delay], clip_index=i, repeat_count=repeats)))
    return pairs


# ------------------------------------------------------------------ dataset


@dataclass
class Dataset:
    world: WorldSpec
    frames: dict[str, np.ndarray]  # split -> [n, N_f, H, W, 3]
    fmri: dict[str, np.ndarray]  # split -> [n, n_voxels]
    labels: dict[str, list[dict]] = field(default_factory=dict)
    root: Path | None = None

    def classes(self, split: str) -> np.ndarray:
        return np.array([row["class_id"] for row in self.labels[split]])

    def motions(self, split: str) -> list[MotionParams]:
        return [MotionParams(*row["motion_params"]) for row in self.labels[split]]

    def render_infer_clip(self, split: str, i: int) -> VideoClip:
        row = self.labels[split][i]
        return render_clip(row["class_id"], MotionParams(*row["motion_params"]), self.world, fps=self.world.infer_fps)


def _generate_split(world: WorldSpec, enc: GroundTruthEncoder, split: str, n: int, repeats: int):
    code = _SPLIT_CODES[split]
    total = n + enc.delay_samples
    clips = []
    for i in range(total):
        rng = _rng(world.seed, code, i)
        class_id = int(rng.integers(world.n_classes))
        motion = sample_motion(rng, world)
        src = render_clip(class_id, motion, world, fps=world.source_fps)
        clips.append(downsample_frames(src, world.train_fps))
    pairs = simulate_stream(clips, enc, world, world.noise_sigma, repeats, code)
    kept = [clips[i] for i, _ in pairs]
    fmri = np.stack([s.voxels for _, s in pairs]).astype(np.float32)
    labels = [
        {"class_id": c.class_id, "motion_params": c.motion_params.as_list(), "stream_index": i}
        for i, c in enumerate(kept)
    ]
    return kept, fmri, labels


def make_dataset(
    world: WorldSpec,
    n_train_clips: int,
    n_test_clips: int,
    test_repeats: int,
    out_dir,
    train_repeats: int = 2,
) -> Path:
    if n_train_clips < 1 or n_test_clips < 1 or test_repeats < 1:
        raise InvalidArgument("clip counts and repeats must be >= 1")
    out = Path(out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
        (out / "fmri").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    enc = GroundTruthEncoder.from_world(world)
    labels_all = []
    splits = {}
    idx = 0
    for split, n, reps in (("train", n_train_clips, train_repeats), ("test", n_test_clips, test_repeats)):
        clips, fmri, labels = _generate_split(world, enc, split, n, reps)
        start = idx
        for clip, vox, row in zip(clips, fmri, labels):
            save_tensor(clip.frames, out / "clips" / f"{idx}.tns")
            save_tensor(vox, out / "fmri" / f"{idx}.tns")
            labels_all.append({"idx": idx, "split": split, **row})
            idx += 1
        splits[split] = {"start": start, "count": len(clips), "repeats": reps}
        log.info("wrote %d %s pairs", len(clips), split)
    save_tensor(enc.W_true, out / "encoder" / "W_true.tns")
    (out / "labels.json").write_text(json.dumps(labels_all, indent=1) + "\n")
    manifest = {
        "kind": "dataset",
        "world": asdict(world),
        "seed": world.seed,
        "splits": splits,
        "rows": len(labels_all),
        "delay_samples": enc.delay_samples,
        "dropped_boundary_clips_per_split": enc.delay_samples,
        "fmri_averaging": "raw vectors averaged across repeats before any normalization",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise NotReady("synth", f"no dataset manifest under {root}")
    manifest = json.loads((root / "manifest.json").read_text())
    world = WorldSpec(**manifest["world"])
    labels_all = json.loads((root / "labels.json").read_text())
    frames, fmri, labels = {}, {}, {}
    for split, info in manifest["splits"].items():
        ids = range(info["start"], info["start"] + info["count"])
        frames[split] = np.stack([load_array(root / "clips" / f"{i}.tns") for i in ids])
        fmri[split] = np.stack([load_array(root / "fmri" / f"{i}.tns") for i in ids])
        labels[split] = [labels_all[i] for i in ids]
    return Dataset(world, frames, fmri, labels, root)


def load_encoder(root, world: WorldSpec) -> GroundTruthEncoder:
    return GroundTruthEncoder(load_array(Path(root) / "encoder" / "W_true.tns"), world.delay_samples)
