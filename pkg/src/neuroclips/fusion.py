"""Multi-fMRI fusion: a same-class classifier over neighbouring keyframe
embeddings and tail-frame chaining into videos of up to three clips."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument

MAX_CHAIN = 3


def _pair_features(a, b):
    a = nn.functional.normalize(a.flatten(start_dim=1), dim=-1)
    b = nn.functional.normalize(b.flatten(start_dim=1), dim=-1)
    return torch.cat([a * b, (a - b).abs()], dim=-1)


class SimilarityClassifier(nn.Module):
    """Shallow MLP giving P(same class) for a pair of embeddings; symmetric in its inputs."""

    def __init__(self, dim: int, hidden: int = 64, threshold: float = 0.5):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * dim, hidden), nn.GELU(), nn.Linear(hidden, 1))
        self.threshold = threshold

    def forward(self, a, b):
        return torch.sigmoid(self.net(_pair_features(a, b))).squeeze(-1)

    @torch.no_grad()
    def probability(self, a, b) -> float:
        ta = torch.as_tensor(np.asarray(a), dtype=torch.float32).reshape(1, -1)
        tb = torch.as_tensor(np.asarray(b), dtype=torch.float32).reshape(1, -1)
        return float(self(ta, tb)[0])

    def same_class(self, a, b) -> bool:
        return self.probability(a, b) > self.threshold


def make_pairs(labels: np.ndarray, n_pairs: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Balanced (i, j, same) pairs: half same-class, half different-class."""
    classes = np.unique(labels)
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    left, right, same = [], [], []
    for k in range(n_pairs):
        c = rng.choice(classes)
        i = rng.choice(by_class[c])
        if k % 2 == 0:
            j = rng.choice(by_class[c])
        else:
            d = rng.choice(classes[classes != c])
            j = rng.choice(by_class[d])
        left.append(i)
        right.append(j)
        same.append(float(k % 2 == 0))
    return np.array(left), np.array(right), np.array(same)


def train_similarity_mlp(embeddings: np.ndarray, labels: np.ndarray, n_pairs: int = 4000, epochs: int = 30,
                         lr: float = 3e-3, threshold: float = 0.5, holdout: float = 0.25, seed: int = 0):
    """Returns (classifier, held-out pair accuracy)."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise InvalidArgument("pair corpus needs at least two classes")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    n = len(labels)
    perm = rng.permutation(n)
    n_hold = max(2, int(round(holdout * n)))
    hold, train = perm[:n_hold], perm[n_hold:]
    x = torch.as_tensor(embeddings.reshape(n, -1), dtype=torch.float32)
    clf = SimilarityClassifier(x.shape[1], threshold=threshold)
    li, ri, yy = make_pairs(labels[train], n_pairs, rng)
    li, ri = train[li], train[ri]
    y = torch.as_tensor(yy, dtype=torch.float32)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for _ in range(epochs):
        order = torch.randperm(len(y), generator=gen)
        for s in range(0, len(order), 128):
            idx = order[s : s + 128]
            p = clf(x[li[idx]], x[ri[idx]]).clamp(1e-6, 1 - 1e-6)
            loss = nn.functional.binary_cross_entropy(p, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    hl, hr, hy = make_pairs(labels[hold], 1000, rng)
    with torch.no_grad():
        p = clf(x[hold[hl]], x[hold[hr]]).numpy()
    acc = float(np.mean((p > threshold) == (hy > 0.5)))
    return clf.eval(), acc


@dataclass
class FusedVideo:
    frames: np.ndarray
    members: list[int]
    boundary_decisions: list[bool] = field(default_factory=list)
    fps: float = 8.0

    @property
    def duration(self) -> float:
        return self.frames.shape[0] / self.fps


@dataclass
class FusionItem:
    embedding: np.ndarray  # keyframe embedding
    frames: np.ndarray  # [16, H, W, 3]


def fuse_videos(items: Sequence[FusionItem], same_class: Callable[[np.ndarray, np.ndarray], bool],
                regenerate: Callable[[int, np.ndarray], np.ndarray], keep_boundary_frames: bool = True,
                max_chain: int = MAX_CHAIN, fps: float = 8.0) -> tuple[list[FusedVideo], list[bool]]:
    """Chain adjacent same-class reconstructions.

    When clip i is judged same-class as clip i - 1 and the current chain has
    room, clip i is regenerated with the previous clip's last frame as its
    first frame. Returns the fused videos and every adjacent-pair decision.
    """
    if len(items) == 0:
        raise InvalidArgument("nothing to fuse")
    decisions = [bool(same_class(items[i - 1].embedding, items[i].embedding)) for i in range(1, len(items))]
    chains: list[list[int]] = [[0]]
    videos = {0: np.asarray(items[0].frames)}
    for i in range(1, len(items)):
        current = chains[-1]
        if decisions[i - 1] and len(current) < max_chain:
            videos[i] = np.asarray(regenerate(i, videos[current[-1]][-1]))
            current.append(i)
        else:
            videos[i] = np.asarray(items[i].frames)
            chains.append([i])
    fused = []
    for chain in chains:
        parts = [videos[chain[0]]]
        for m in chain[1:]:
            parts.append(videos[m] if keep_boundary_frames else videos[m][1:])
        bounds = [decisions[m - 1] for m in chain[1:]]
        fused.append(FusedVideo(np.concatenate(parts), list(chain), bounds, fps))
    return fused, decisions
