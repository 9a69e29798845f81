"""Evaluation protocol: pixel metrics, N-way top-K classification,
adjacent-frame embedding consistency, and bidirectional retrieval."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument

PSNR_CAP_DB = 100.0


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    k = np.arange(size) - (size - 1) / 2
    g = np.exp(-(k**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray, c1: float, c2: float) -> np.ndarray:
    wa = sliding_window_view(a, win.shape)
    wb = sliding_window_view(b, win.shape)
    mu_a = np.einsum("ijkl,kl->ij", wa, win)
    mu_b = np.einsum("ijkl,kl->ij", wb, win)
    saa = np.einsum("ijkl,kl->ij", wa * wa, win) - mu_a**2
    sbb = np.einsum("ijkl,kl->ij", wb * wb, win) - mu_b**2
    sab = np.einsum("ijkl,kl->ij", wa * wb, win) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over channels and all full-window positions."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < win_size:
        raise InvalidArgument(f"images must be at least {win_size} pixels on each side")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    maps = [_ssim_channel(a[..., ch], b[..., ch], win, c1, c2) for ch in range(a.shape[-1])]
    return float(np.mean(maps))


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(data_range**2 / mse), PSNR_CAP_DB)


def video_ssim(pred, gt) -> float:
    return float(np.mean([ssim(p, g) for p, g in zip(pred, gt)]))


def video_psnr(pred, gt) -> float:
    return float(np.mean([psnr(p, g) for p, g in zip(pred, gt)]))


def nway_topk(gt_class: int, prob_vector, N: int, K: int = 1, repeats: int = 100, seed=0) -> float:
    """Fraction of repeats in which the true class ranks in the top K among
    itself and N - 1 distractor classes drawn without replacement."""
    p = np.asarray(prob_vector, dtype=np.float64)
    n_classes = p.shape[0]
    if N < 2:
        raise InvalidArgument("N must be >= 2")
    if N > n_classes or not 1 <= K <= N:
        raise InvalidArgument(f"need K <= N <= n_classes (K={K}, N={N}, n_classes={n_classes})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    others = np.array([c for c in range(n_classes) if c != gt_class])
    hits = 0
    for _ in range(repeats):
        cand = np.concatenate([[gt_class], rng.choice(others, N - 1, replace=False)])
        # ties go to the lower class index
        order = sorted(cand, key=lambda c: (-p[c], c))
        hits += gt_class in order[:K]
    return hits / repeats


def _flat_embeddings(video, embedder) -> np.ndarray:
    e = embedder.embed_image(np.asarray(video)) if embedder is not None else np.asarray(video)
    return e.reshape(e.shape[0], -1)


def clip_pcc(video, embedder=None, mode: str = "cosine") -> float:
    """Mean similarity of embeddings of consecutive frames.

    With ``embedder=None`` the rows of ``video`` are taken as embeddings.
    """
    e = _flat_embeddings(video, embedder)
    if e.shape[0] < 2:
        raise InvalidArgument("CLIP-pcc needs at least two frames")
    vals = []
    for x, y in zip(e[:-1], e[1:]):
        if mode == "pearson":
            x, y = x - x.mean(), y - y.mean()
        elif mode != "cosine":
            raise InvalidArgument(f"unknown clip_pcc mode {mode!r}")
        vals.append(float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y))))
    return float(np.mean(vals))


def _normalize_rows(x):
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def retrieval_topk(fmri_embs, key_embs, pool_size: int = 300, partitions: int = 4, seed=0) -> tuple[float, float]:
    """Top-1 cosine retrieval inside random disjoint pools, both directions.

    Returns (keyframe retrieval from fMRI, fMRI retrieval from keyframe),
    averaged over partitions.
    """
    a, b = _normalize_rows(fmri_embs), _normalize_rows(key_embs)
    if len(a) != len(b):
        raise InvalidArgument("embedding sets must be aligned")
    if pool_size < 2 or partitions < 1:
        raise InvalidArgument("pool_size must be >= 2 and partitions >= 1")
    if pool_size * partitions > len(a):
        raise InvalidArgument(f"pool of {pool_size} x {partitions} partitions exceeds {len(a)} samples")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(len(a))
    fwd, bwd = [], []
    for p in range(partitions):
        idx = perm[p * pool_size : (p + 1) * pool_size]
        sims = a[idx] @ b[idx].T
        target = np.arange(pool_size)
        fwd.append(np.mean(np.argmax(sims, axis=1) == target))
        bwd.append(np.mean(np.argmax(sims, axis=0) == target))
    return float(np.mean(fwd)), float(np.mean(bwd))


def frame_correlation(a, b) -> float:
    a = np.ravel(a) - np.mean(a)
    b = np.ravel(b) - np.mean(b)
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def mean_frame_correlation(pred, gt) -> float:
    return float(np.mean([frame_correlation(p, g) for p, g in zip(pred, gt)]))


# ------------------------------------------------------------------ report


@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)
    protocol: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    SCALARS = ("ssim", "psnr_db", "clip_pcc")

    def aggregate(self) -> dict:
        agg = {}
        for key in self.SCALARS:
            vals = np.array([r[key] for r in self.records], dtype=np.float64)
            agg[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        for key in ("nway", "nway_video"):
            vals = np.array([r[key]["rate"] for r in self.records if key in r], dtype=np.float64)
            if len(vals):
                agg[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        agg.update(self.extra)
        return agg

    def lines(self) -> list[str]:
        out = [json.dumps(r, sort_keys=True) for r in self.records]
        out.append(json.dumps({"aggregate": self.aggregate(), "protocol": self.protocol}, sort_keys=True))
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n")
        return path


def eval_report(pred_videos, gt_videos, pred_probs, gt_classes, embedder, cfg, seed: int = 0,
                video_probs=None, extra: dict | None = None) -> MetricReport:
    """Per-sample SSIM/PSNR/N-way/CLIP-pcc records plus an aggregate.

    pred_probs: per-frame class probabilities [n, F, n_classes]; video_probs
    (optional) [n, n_classes].
    """
    n = len(pred_videos)
    if not (len(gt_videos) == n == len(pred_probs) == len(gt_classes)):
        raise InvalidArgument("prediction and ground-truth sets have different lengths")
    N, K, R = cfg["nway_n"], cfg["nway_k"], cfg["nway_repeats"]
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        frame_rates = [nway_topk(int(gt_classes[i]), p, N, K, R, rng) for p in pred_probs[i]]
        rec = {
            "idx": i,
            "ssim": video_ssim(pred_videos[i], gt_videos[i]),
            "psnr_db": video_psnr(pred_videos[i], gt_videos[i]),
            "nway": {"N": N, "K": K, "rate": float(np.mean(frame_rates))},
            "clip_pcc": clip_pcc(pred_videos[i], embedder, cfg.get("clip_pcc_mode", "cosine")),
        }
        if video_probs is not None:
            rec["nway_video"] = {"N": N, "K": K, "rate": nway_topk(int(gt_classes[i]), video_probs[i], N, K, R, rng)}
        records.append(rec)
    protocol = {"N": N, "K": K, "repeats": R, "seed": seed, "samples": n}
    return MetricReport(records, protocol, dict(extra or {}))
