"""Run configuration: a flat YAML key/value document validated against
RunConfig. Unknown keys and wrongly typed values are rejected."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .checkpoint import json_hash
from .errors import ConfigError


@dataclass
class RunConfig:
    # synthetic world
    n_classes: int = 8
    n_voxels: int = 2048
    noise_sigma: float = 0.25
    delay_samples: int = 2
    n_train: int = 512
    n_test: int = 64
    test_repeats: int = 10
    seed: int = 0
    # frozen stand-in models
    codec: str = "orthogonal"
    latent_scale: float = 1.0
    codec_steps: int = 1500
    embedder_frames_per_class: int = 60
    projector_epochs: int = 20
    denoiser_videos: int = 256
    denoiser_steps: int = 1200
    denoiser_width: int = 48
    # perception reconstructor
    lr: float = 3e-4
    tau: float = 0.07
    pr_epochs: int = 15
    pr_batch: int = 40
    pr_weight_decay: float = 0.01
    # semantics reconstructor
    align_epochs: int = 60
    prior_epochs: int = 60
    decoder_epochs: int = 40
    align_batch: int = 64
    prior_batch: int = 64
    delta: float = 30.0
    mu: float = 1.0
    beta_a: float = 0.15
    beta_b: float = 0.15
    ridge_lambda: float = 1e-4
    # inference
    theta: float = 0.3
    diffusion_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler_steps: int = 25
    # fusion
    fusion_threshold: float = 0.5
    keep_boundary_frames: bool = True
    # evaluation
    nway_n: int = 2
    nway_k: int = 1
    nway_repeats: int = 100
    retrieval_pool: int = 64
    retrieval_partitions: int = 1
    clip_pcc_mode: str = "cosine"
    workers: int = 1

    def validate(self) -> "RunConfig":
        checks = [
            ("n_classes", self.n_classes >= 2, "must be >= 2"),
            ("noise_sigma", self.noise_sigma >= 0, "must be >= 0"),
            ("n_train", self.n_train >= 1, "must be >= 1"),
            ("n_test", self.n_test >= 1, "must be >= 1"),
            ("codec", self.codec in ("orthogonal", "conv"), "must be 'orthogonal' or 'conv'"),
            ("lr", self.lr > 0, "must be > 0"),
            ("tau", self.tau > 0, "must be > 0"),
            ("delta", self.delta >= 0, "must be >= 0"),
            ("mu", self.mu >= 0, "must be >= 0"),
            ("theta", 0 < self.theta <= 1, "must lie in (0, 1]"),
            ("sampler_steps", 1 <= self.sampler_steps <= self.diffusion_T, "must lie in [1, diffusion_T]"),
            ("nway_n", 2 <= self.nway_n <= self.n_classes, "must lie in [2, n_classes]"),
            ("nway_k", 1 <= self.nway_k <= self.nway_n, "must lie in [1, nway_n]"),
            ("clip_pcc_mode", self.clip_pcc_mode in ("cosine", "pearson"), "must be 'cosine' or 'pearson'"),
            ("workers", self.workers >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return json_hash(self.to_dict())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, value):
    if key not in _TYPES:
        raise ConfigError(key, "unknown configuration key")
    kind = _TYPES[key]
    if isinstance(value, str) and kind != "str":
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(key, f"unparseable value ({exc})") from exc
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, "expected true/false")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("<file>", "config must be a flat key: value mapping")
        for key, value in doc.items():
            values[key] = coerce(str(key), value)
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value)
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
