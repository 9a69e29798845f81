"""Matplotlib figures written next to the evaluation report."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def metric_histograms(report, path: Path) -> Path:
    keys = ("ssim", "psnr_db", "clip_pcc")
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3))
    for ax, key in zip(axes, keys):
        vals = [r[key] for r in report.records]
        ax.hist(vals, bins=20, color="tab:blue", alpha=0.8)
        ax.axvline(np.mean(vals), color="k", ls="--", lw=1)
        ax.set_title(f"{key} (mean {np.mean(vals):.3f})")
    return _save(fig, path)


def frame_strip(rows: dict[str, np.ndarray], path: Path, max_frames: int = 8) -> Path:
    """rows: label -> video [F, H, W, 3]; frames are subsampled evenly."""
    n_rows = len(rows)
    fig, axes = plt.subplots(n_rows, max_frames, figsize=(1.2 * max_frames, 1.3 * n_rows), squeeze=False)
    for r, (label, video) in enumerate(rows.items()):
        idx = np.linspace(0, len(video) - 1, min(max_frames, len(video))).round().astype(int)
        for c in range(max_frames):
            ax = axes[r, c]
            ax.axis("off")
            if c < len(idx):
                ax.imshow(np.clip(video[idx[c]], 0, 1))
        axes[r, 0].set_title(label, fontsize=7, loc="left")
    return _save(fig, path)


def render_eval_figures(report, videos, gt_videos, blurry, gt_frames, keyframes, out_dir: Path, n_examples: int = 4):
    out_dir = Path(out_dir)
    paths = [metric_histograms(report, out_dir / "metric_histograms.png")]
    for i in range(min(n_examples, len(videos))):
        rows = {"ground truth": gt_videos[i], "reconstruction": videos[i],
                "blurry (3 fps)": blurry[i], "keyframe": keyframes[i][None]}
        paths.append(frame_strip(rows, out_dir / f"sample_{i:04d}.png"))
    agg = report.aggregate()
    if "blurry_frame_correlation" in agg:
        fig, ax = plt.subplots(figsize=(4, 3))
        names = ["blurry", "shuffled", "keyframe acc", "chance"]
        vals = [agg["blurry_frame_correlation"], agg["blurry_shuffled_baseline"], agg["keyframe_class_accuracy"],
                agg["chance_accuracy"]]
        ax.bar(names, vals, color=["tab:blue", "tab:gray", "tab:green", "tab:gray"])
        ax.set_ylim(0, 1)
        paths.append(_save(fig, out_dir / "baselines.png"))
    return paths


def render_weight_figure(weights: np.ndarray, path: Path) -> Path:
    side = int(np.ceil(np.sqrt(weights.size)))
    grid = np.full(side * side, np.nan)
    grid[: weights.size] = weights
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    im = axes[0].imshow(grid.reshape(side, side), cmap="viridis", vmin=0, vmax=1)
    axes[0].set_title("voxel weight map")
    fig.colorbar(im, ax=axes[0])
    axes[1].hist(weights, bins=40, color="tab:purple")
    axes[1].set_title("weight distribution")
    return _save(fig, Path(path))
