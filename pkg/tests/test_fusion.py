import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from neuroclips.codecs import OrthogonalCodec
from neuroclips.errors import InvalidArgument
from neuroclips.fusion import (MAX_CHAIN, FusionItem, SimilarityClassifier, fuse_videos, make_pairs,
                               train_similarity_mlp)
from neuroclips.guidance import Conditions, TinyVideoDenoiser, make_schedule, reverse_sample

N_FRAMES = 16
CODEC = OrthogonalCodec(frame_size=16)


@pytest.fixture(scope="module")
def sampler():
    torch.manual_seed(0)
    sched = make_schedule(T=1000, sampler_steps=4)
    net = TinyVideoDenoiser(CODEC.latent_shape[0], 8, width=8, schedule=sched).eval()

    def regenerate(k, first_frame):
        key = CODEC.encode_latent(first_frame)
        z = np.random.default_rng(k).standard_normal((N_FRAMES, *CODEC.latent_shape))
        return CODEC.decode_latent(reverse_sample(z, net, sched, Conditions(key, np.ones(8)), seed=k))

    return regenerate


def _items(classes, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for c in classes:
        emb = np.zeros(8)
        emb[c] = 1.0
        out.append(FusionItem(emb, rng.uniform(0, 1, (N_FRAMES, 16, 16, 3))))
    return out


def _same(a, b):
    return int(np.argmax(a)) == int(np.argmax(b))


def test_three_same_class_clips_fuse_with_exact_boundaries(sampler):
    fused, decisions = fuse_videos(_items([2, 2, 2]), _same, sampler)
    assert decisions == [True, True]
    assert len(fused) == 1
    v = fused[0]
    assert v.frames.shape[0] == 48 and v.duration == 6.0 and v.fps == 8.0
    assert v.members == [0, 1, 2] and v.boundary_decisions == [True, True]
    for b in (16, 32):
        assert np.array_equal(v.frames[b], CODEC.decode_latent(CODEC.encode_latent(v.frames[b - 1])))


def test_mismatch_never_fuses(sampler):
    items = _items([0, 1, 0])
    fused, decisions = fuse_videos(items, _same, sampler)
    assert decisions == [False, False]
    assert [f.members for f in fused] == [[0], [1], [2]]
    for f, item in zip(fused, items):
        assert f.frames.shape[0] == 16 and np.array_equal(f.frames, item.frames)


def test_chain_cap_and_remainder(sampler):
    fused, _ = fuse_videos(_items([3, 3, 3, 3]), _same, sampler)
    assert [f.frames.shape[0] for f in fused] == [48, 16]
    assert [f.members for f in fused] == [[0, 1, 2], [3]]


def test_dropping_boundary_frames(sampler):
    fused, _ = fuse_videos(_items([1, 1, 1]), _same, sampler, keep_boundary_frames=False)
    assert fused[0].frames.shape[0] == 46


def test_empty_input_raises(sampler):
    with pytest.raises(InvalidArgument):
        fuse_videos([], _same, sampler)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=9))
def test_chain_properties(classes):
    items = _items(classes)
    calls = []

    def regenerate(k, first):
        calls.append(k)
        return np.repeat(first[None], N_FRAMES, axis=0)

    fused, decisions = fuse_videos(items, _same, regenerate)
    assert decisions == [classes[i - 1] == classes[i] for i in range(1, len(classes))]
    assert [m for f in fused for m in f.members] == list(range(len(classes)))
    for f in fused:
        assert 1 <= len(f.members) <= MAX_CHAIN
        assert f.duration == 2.0 * len(f.members) <= 6.0
        assert len({classes[m] for m in f.members}) == 1
    assert calls == [m for f in fused for m in f.members[1:]]


def test_decisions_depend_only_on_adjacent_pairs():
    clf = SimilarityClassifier(8)
    rng = np.random.default_rng(4)
    embs = rng.standard_normal((6, 8))
    base = [clf.same_class(embs[i - 1], embs[i]) for i in range(1, 6)]
    # swapping clips 0 and 1 only touches the boundaries around them
    swapped = embs[[1, 0, 2, 3, 4, 5]]
    after = [clf.same_class(swapped[i - 1], swapped[i]) for i in range(1, 6)]
    assert after[2:] == base[2:]
    items = [FusionItem(e, np.zeros((N_FRAMES, 4, 4, 3))) for e in embs]
    _, decisions = fuse_videos(items, clf.same_class, lambda k, f: np.zeros((N_FRAMES, 4, 4, 3)))
    assert decisions == base


# ----------------------------------------------------------- similarity MLP


def _cluster_corpus(n_per=60, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    centres = np.eye(8, dim) * 3.0
    labels = np.repeat(np.arange(8), n_per)
    return centres[labels] + 0.3 * rng.standard_normal((len(labels), dim)), labels


@pytest.fixture(scope="module")
def trained_mlp():
    x, y = _cluster_corpus()
    return train_similarity_mlp(x, y, n_pairs=2000, epochs=15, seed=0)


def test_similarity_mlp_accuracy_and_examples(trained_mlp):
    clf, acc = trained_mlp
    assert acc >= 0.9
    e = np.eye(8, 16)
    assert clf.probability(e[1], e[1]) > clf.threshold
    assert clf.probability(e[1], e[5]) < clf.threshold
    p = clf.probability(e[2], e[3])
    assert 0.0 <= p <= 1.0


def test_similarity_mlp_is_deterministic(trained_mlp):
    x, y = _cluster_corpus()
    again, acc = train_similarity_mlp(x, y, n_pairs=2000, epochs=15, seed=0)
    for a, b in zip(trained_mlp[0].state_dict().values(), again.state_dict().values()):
        assert torch.equal(a, b)
    assert acc == trained_mlp[1]


def test_similarity_mlp_is_symmetric(trained_mlp):
    clf, _ = trained_mlp
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 16))
    assert clf.probability(a, b) == pytest.approx(clf.probability(b, a), abs=1e-7)


def test_single_class_corpus_raises():
    with pytest.raises(InvalidArgument):
        train_similarity_mlp(np.zeros((10, 4)), np.zeros(10, dtype=int))


def test_make_pairs_is_balanced():
    labels = np.repeat(np.arange(4), 10)
    li, ri, same = make_pairs(labels, 200, np.random.default_rng(0))
    assert same.mean() == 0.5
    assert np.all((labels[li] == labels[ri]) == (same == 1.0))
