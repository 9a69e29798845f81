import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from finite_diff import check_grads, np_log_softmax
from neuroclips.codecs import OrthogonalCodec, ReftmProjector
from neuroclips.errors import ContractViolation, InvalidArgument, NotReady, SingularSystem
from neuroclips.semantics import (PriorNetwork, RidgeLayer, SRConfig, bimixco_loss, center_object,
                                  KeyframeDecoder, export_voxel_weights, fit_ridge_layer, foreground_centroid,
                                  matching_accuracy, matte_background,
                                  mixco_mix, place_template, prior_loss, reconstruct_keyframe, reftm_loss,
                                  ridge_apply, ridge_fit_oracle, sr_total_loss, train_sr, voxel_weight_map)


# ------------------------------------------------------------------ oracles


def np_cos(a, b):
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def bimixco_oracle(e_mixed, e_key, m, lam, tau):
    """Scalar loops over the four-term formula as written."""
    n = len(e_mixed)
    s = np_cos(e_mixed, e_key) / tau
    total = 0.0
    for i in range(n):
        den = sum(math.exp(s[i, k]) for k in range(n))
        total += lam[i] * math.log(math.exp(s[i, i]) / den)
        total += (1 - lam[i]) * math.log(math.exp(s[i, m[i]]) / den)
    for j in range(n):
        den = sum(math.exp(s[k, j]) for k in range(n))
        total += lam[j] * math.log(math.exp(s[j, j]) / den)
        for l_ in range(n):
            if m[l_] == j:
                total += (1 - lam[j]) * math.log(math.exp(s[l_, j]) / den)
    return -total / (2 * n)


def infonce_oracle(a, b, tau):
    logits = np_cos(a, b) / tau
    return -0.5 * (np.mean(np.diag(np_log_softmax(logits, 1))) + np.mean(np.diag(np_log_softmax(logits, 0))))


def _derangement(rng, n):
    order = rng.permutation(n)
    m = np.empty(n, dtype=int)
    m[order] = np.roll(order, -1)
    return m


# -------------------------------------------------------------------- ridge


def test_ridge_orthogonal_design_lambda_zero(rng):
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    y = rng.standard_normal((6, 2))
    np.testing.assert_allclose(ridge_fit_oracle(q, y, 0.0), q.T @ y, atol=1e-12)


def test_ridge_infinite_shrinkage(rng):
    x, y = rng.standard_normal((20, 5)), rng.standard_normal((20, 3))
    w = ridge_fit_oracle(x, y, 1e9)
    assert np.linalg.norm(w) <= 1e-6 * np.linalg.norm(x.T @ y)


def test_ridge_normal_equations(rng):
    x, y, lam = rng.standard_normal((40, 10)), rng.standard_normal((40, 3)), 0.7
    w = ridge_fit_oracle(x, y, lam)
    np.testing.assert_allclose(x.T @ x @ w + lam * w - x.T @ y, 0.0, atol=1e-8)


def test_ridge_singular_at_lambda_zero(rng):
    x = rng.standard_normal((3, 6))
    with pytest.raises(SingularSystem):
        ridge_fit_oracle(x, rng.standard_normal((3, 1)), 0.0)


def test_ridge_rejects_negative_lambda(rng):
    with pytest.raises(InvalidArgument):
        ridge_fit_oracle(rng.standard_normal((4, 2)), rng.standard_normal(4), -1.0)


def test_trained_ridge_layer_recovers_closed_form(rng):
    x = rng.standard_normal((200, 30))
    w_true = rng.standard_normal((30, 5))
    y = x @ w_true  # noiseless
    lam = 0.5
    layer = fit_ridge_layer(x, y, lam)
    w = layer.weight.detach().numpy().T
    oracle = ridge_fit_oracle(x, y, lam)
    assert np.linalg.norm(w - oracle) / np.linalg.norm(oracle) <= 1e-3


def test_closed_form_fit_mode(rng):
    x, y = rng.standard_normal((50, 8)), rng.standard_normal((50, 4))
    layer = RidgeLayer(8, 4, lam=0.1).double().fit_closed_form(x, y)
    np.testing.assert_allclose(ridge_apply(x, layer).detach().numpy(), x @ ridge_fit_oracle(x, y, 0.1), atol=1e-10)


def test_ridge_apply_contracts(rng):
    layer = RidgeLayer(12, 256).double()
    assert ridge_apply(rng.standard_normal(12), layer).shape == (256,)
    with torch.no_grad():
        layer.weight.zero_()
    np.testing.assert_array_equal(ridge_apply(rng.standard_normal(12), layer).detach().numpy(),
                                  layer.bias.detach().numpy())
    with pytest.raises(InvalidArgument):
        ridge_apply(np.zeros(11), layer)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ridge_apply_is_affine(seed):
    r = np.random.default_rng(seed)
    layer = RidgeLayer(9, 7).double()
    torch.nn.init.normal_(layer.weight, generator=torch.Generator().manual_seed(seed))
    a, b = r.standard_normal((2, 9))
    f = lambda v: ridge_apply(v, layer).detach().numpy()  # noqa: E731
    np.testing.assert_allclose(f(a + b) - f(a) - f(b) + f(np.zeros(9)), 0.0, atol=1e-9)


# ---------------------------------------------------------------- mixing


def test_mix_forced_lambda_one_and_zero(rng):
    y = rng.standard_normal((5, 7))
    mixed, partners, _ = mixco_mix(y, force_lambda=1.0, seed=3)
    np.testing.assert_array_equal(mixed, y)
    mixed, partners, _ = mixco_mix(y, force_lambda=0.0, seed=3)
    np.testing.assert_array_equal(mixed, y[partners])


@settings(max_examples=30, deadline=None)
@given(b=st.integers(2, 40), seed=st.integers(0, 10_000))
def test_partners_are_derangements(b, seed):
    _, partners, lam = mixco_mix(np.zeros((b, 3)), seed=seed)
    assert np.all(partners != np.arange(b))
    assert sorted(partners.tolist()) == list(range(b))
    assert np.all((lam >= 0) & (lam <= 1))


def test_mix_lambda_follows_beta(rng):
    lam = np.concatenate([mixco_mix(np.zeros((100, 1)), seed=rng)[2] for _ in range(100)])
    assert len(lam) == 10_000
    assert stats.kstest(lam, stats.beta(0.15, 0.15).cdf).pvalue > 0.01


def test_mix_rejects_single_row():
    with pytest.raises(InvalidArgument):
        mixco_mix(np.zeros((1, 4)))


# --------------------------------------------------------------- bimixco


@pytest.mark.parametrize("b", [2, 3, 5, 8, 16])
def test_bimixco_with_unit_lambda_is_infonce(b):
    r = np.random.default_rng(b)
    ey, ex = r.standard_normal((2, b, 4, 6))
    m = _derangement(r, b)
    got = bimixco_loss(torch.tensor(ey), torch.tensor(ex), m, np.ones(b), 0.07).item()
    assert abs(got - infonce_oracle(ey, ex, 0.07)) <= 1e-10


def test_bimixco_hand_case_batch_two():
    r = np.random.default_rng(11)
    ey, ex = r.standard_normal((2, 2, 3, 4))
    m, lam = np.array([1, 0]), np.array([0.5, 0.5])
    got = bimixco_loss(torch.tensor(ey), torch.tensor(ex), m, lam, 0.07).item()
    assert abs(got - bimixco_oracle(ey, ex, m, lam, 0.07)) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(b=st.integers(2, 10), seed=st.integers(0, 10_000), tau=st.floats(0.05, 1.0))
def test_bimixco_matches_loop_oracle(b, seed, tau):
    r = np.random.default_rng(seed)
    ey, ex = r.standard_normal((2, b, 2, 3))
    m, lam = _derangement(r, b), r.uniform(0, 1, b)
    got = bimixco_loss(torch.tensor(ey), torch.tensor(ex), m, lam, tau).item()
    assert got >= 0
    assert abs(got - bimixco_oracle(ey, ex, m, lam, tau)) <= 1e-9


def test_bimixco_gradients():
    r = np.random.default_rng(2)
    ey = torch.tensor(r.standard_normal((4, 2, 3)), requires_grad=True)
    ex = torch.tensor(r.standard_normal((4, 2, 3)), requires_grad=True)
    m, lam = _derangement(r, 4), r.uniform(0, 1, 4)
    assert check_grads(lambda: bimixco_loss(ey, ex, m, lam, 0.3), [ey, ex]) <= 1e-4


def test_bimixco_rejects_fixed_point_pairing():
    e = torch.randn(3, 2, 2)
    with pytest.raises(ContractViolation):
        bimixco_loss(e, e, np.array([0, 2, 1]), np.ones(3))
    with pytest.raises(ContractViolation):
        bimixco_loss(e, e, np.array([1, 2, 3]), np.ones(3))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.floats(1e-2, 1e2))
def test_bimixco_scale_invariance(seed, scale):
    r = np.random.default_rng(seed)
    ey, ex = r.standard_normal((2, 4, 2, 3))
    m, lam = _derangement(r, 4), r.uniform(0, 1, 4)
    ey2 = ey.copy()
    ey2[1] *= scale
    a = bimixco_loss(torch.tensor(ey), torch.tensor(ex), m, lam).item()
    b = bimixco_loss(torch.tensor(ey2), torch.tensor(ex), m, lam).item()
    assert a == pytest.approx(b, abs=1e-10)


# ------------------------------------------------------------ prior / reftm


def test_prior_loss_cases():
    x = torch.randn(3, 16, 64, dtype=torch.float64)
    assert prior_loss(x, x).item() == 0.0
    assert prior_loss(x + 0.3, x).item() == pytest.approx(0.09, abs=1e-12)
    with pytest.raises(InvalidArgument):
        prior_loss(x, x[:, :2])


def test_prior_loss_gradient_through_network():
    torch.manual_seed(0)
    net = PriorNetwork(hidden=8).double()
    e = torch.randn(2, 16, 64, dtype=torch.float64)
    target = torch.randn(2, 16, 64, dtype=torch.float64)
    params = [net.net[0].weight, net.net[2].bias]
    assert check_grads(lambda: prior_loss(net(e), target), params) <= 1e-4


def test_prior_network_preserves_shape():
    assert PriorNetwork(hidden=16)(torch.randn(5, 16, 64)).shape == (5, 16, 64)


def _frozen_projector(seed=0):
    torch.manual_seed(seed)
    return ReftmProjector().double().freeze()


def test_reftm_batch_of_one_is_zero():
    proj = _frozen_projector()
    assert reftm_loss(torch.randn(1, 16, 64, dtype=torch.float64), torch.randn(1, 64, dtype=torch.float64),
                      proj).item() == 0.0


def test_reftm_matches_infonce_oracle():
    proj = _frozen_projector()
    e = torch.randn(4, 16, 64, dtype=torch.float64)
    text = proj(e).detach()
    got = reftm_loss(e, text, proj, 0.07).item()
    assert abs(got - infonce_oracle(text.numpy(), text.numpy(), 0.07)) <= 1e-10


def test_reftm_gradient_and_projector_untouched():
    proj = _frozen_projector()
    e = torch.randn(3, 16, 64, dtype=torch.float64, requires_grad=True)
    text = torch.randn(3, 64, dtype=torch.float64)
    with torch.no_grad():
        e.data.mul_(0.05)  # keep logits moderate for finite differences
    assert check_grads(lambda: reftm_loss(e, text, proj, 0.5), [e]) <= 1e-4
    assert all(p.grad is None for p in proj.parameters())
    proj.assert_frozen()


def test_reftm_requires_frozen_projector():
    proj = ReftmProjector().double()
    with pytest.raises(ContractViolation):
        reftm_loss(torch.randn(2, 16, 64, dtype=torch.float64), torch.randn(2, 64, dtype=torch.float64), proj)


def test_sr_total_loss_weights():
    a, p, r = torch.tensor(1.3), torch.tensor(0.2), torch.tensor(0.7)
    assert SRConfig().delta == 30 and SRConfig().mu == 1
    assert sr_total_loss(a, p, r, 0.0, 0.0).item() == pytest.approx(1.3)
    l1 = sr_total_loss(a, p, r, 1.0, 1.0).item()
    l2 = sr_total_loss(a, p, r, 2.0, 1.0).item()
    assert l2 - l1 == pytest.approx(0.2, abs=1e-6)
    with pytest.raises(InvalidArgument):
        sr_total_loss(a, p, r, -1.0, 1.0)
    with pytest.raises(InvalidArgument):
        SRConfig(mu=-1)


def test_matching_accuracy_perfect():
    text = np.eye(4)
    labels = np.array([0, 1, 2, 3, 1])
    assert matching_accuracy(text[labels] * 3, labels, text) == (1.0, 1.0)


# ---------------------------------------------------------------- training


def _toy_sr_data(n=2, v=32, seed=0):
    r = np.random.default_rng(seed)
    fmri = r.standard_normal((n, v))
    frame_embs = r.standard_normal((n, 3, 16, 64))
    texts = r.standard_normal((n, 64))
    return fmri, frame_embs, texts


def _small_sr_cfg(**kw):
    base = dict(n_voxels=32, ridge_dim=16, hidden=32, align_epochs=100, prior_epochs=5, decoder_epochs=0,
                align_batch=2, prior_batch=2, lr=3e-3)
    base.update(kw)
    return SRConfig(**base)


def test_two_clip_overfit_retrieval():
    fmri, frame_embs, texts = _toy_sr_data()
    # one keyframe per clip regardless of the per-epoch draw
    frame_embs[:] = frame_embs[:, :1]
    sr, _ = train_sr(fmri, frame_embs, texts, _frozen_projector().float(), _small_sr_cfg(), (4, 4, 4))
    e_y, _ = sr.embeddings(fmri)
    sims = np_cos(e_y, frame_embs[:, 0])
    assert np.all(np.argmax(sims, axis=1) == np.arange(2))
    assert np.all(np.argmax(sims, axis=0) == np.arange(2))


def test_phase_one_improves_retrieval():
    r = np.random.default_rng(4)
    n, v = 64, 48
    w = r.standard_normal((v, 16 * 64)) / np.sqrt(v)
    fmri = r.standard_normal((n, v))
    keys = (fmri @ w).reshape(n, 1, 16, 64).repeat(3, axis=1)
    cfg = _small_sr_cfg(n_voxels=v, align_epochs=30, align_batch=16, prior_batch=16, prior_epochs=1)
    acc = lambda e: np.mean(np.argmax(np_cos(e, keys[:, 0]), axis=1) == np.arange(n))  # noqa: E731
    before, _ = train_sr(fmri, keys, r.standard_normal((n, 64)), _frozen_projector().float(),
                         _small_sr_cfg(n_voxels=v, align_epochs=0, prior_epochs=0), (4, 4, 4))
    after, _ = train_sr(fmri, keys, r.standard_normal((n, 64)), _frozen_projector().float(), cfg, (4, 4, 4))
    assert acc(after.embeddings(fmri)[0]) > acc(before.embeddings(fmri)[0])


def test_train_sr_deterministic_and_records_phases():
    fmri, frame_embs, texts = _toy_sr_data(4)
    cfg = _small_sr_cfg(align_epochs=2, prior_epochs=2, decoder_epochs=1)
    templates = np.random.default_rng(1).standard_normal((4, 4, 4, 4))
    a, ha = train_sr(fmri, frame_embs, texts, _frozen_projector().float(), cfg, (4, 4, 4), templates)
    b, hb = train_sr(fmri, frame_embs, texts, _frozen_projector().float(), cfg, (4, 4, 4), templates)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert ha["phase_boundaries"] == {"align_epochs": 2, "prior_epochs": 2, "decoder_epochs": 1}
    assert len(ha["align_loss"]) == 2 and len(ha["prior_loss"]) == 2 and len(ha["decoder_loss"]) == 1


def test_train_sr_rejects_unfrozen_projector():
    fmri, frame_embs, texts = _toy_sr_data()
    with pytest.raises(ContractViolation):
        train_sr(fmri, frame_embs, texts, ReftmProjector(), _small_sr_cfg(), (4, 4, 4))


def test_projector_gradient_during_training_fires():
    proj = _frozen_projector().float()
    proj.linear.weight.grad = torch.ones_like(proj.linear.weight)
    fmri, frame_embs, texts = _toy_sr_data()
    with pytest.raises(ContractViolation):
        train_sr(fmri, frame_embs, texts, proj, _small_sr_cfg(align_epochs=1), (4, 4, 4))


# ---------------------------------------------------------------- keyframe


def test_reconstruct_keyframe_contracts():
    fmri, frame_embs, texts = _toy_sr_data(4, v=32)
    codec = OrthogonalCodec()
    blurry = np.random.default_rng(0).uniform(0, 1, (4, 64, 64, 3))
    lat = codec.encode_latent(blurry)
    cfg = _small_sr_cfg(align_epochs=1, prior_epochs=1, decoder_epochs=1)
    sr, _ = train_sr(fmri, frame_embs, texts, _frozen_projector().float(), cfg, codec.latent_shape, lat)
    frame, e_re = reconstruct_keyframe(fmri[0], lat[0], sr, codec)
    again, _ = reconstruct_keyframe(fmri[0], lat[0], sr, codec)
    assert frame.shape == (64, 64, 3) and e_re.shape == (16, 64)
    assert np.array_equal(frame, again)
    with pytest.raises(NotReady):
        reconstruct_keyframe(fmri[0], lat[0], None, codec)
    with pytest.raises(NotReady):
        reconstruct_keyframe(fmri[0], None, sr, codec)


def _sr_with_fixed_template(codec, template_frame):
    from neuroclips.semantics import SemanticsReconstructor

    sr = SemanticsReconstructor(SRConfig(n_voxels=32), codec.latent_shape).double().eval()
    last = sr.decoder.net[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.copy_(torch.as_tensor(codec.encode_latent(template_frame).ravel()))
    return sr


def test_keyframe_takes_appearance_from_template_and_position_from_blurry():
    from scipy.ndimage import gaussian_filter

    from neuroclips.data import render_frame
    from neuroclips.metrics import frame_correlation

    codec = OrthogonalCodec()
    sr = _sr_with_fixed_template(codec, render_frame(2, 31.5, 31.5, 64))
    blurry = 0.5 * gaussian_filter(render_frame(5, 22, 41, 64), sigma=(3, 3, 0))
    out = sr.decode_keyframe(np.zeros((1, 16, 64)), codec.encode_latent(blurry), codec)[0]
    assert np.allclose(foreground_centroid(out), [41, 22], atol=0.5)
    target = render_frame(2, 22, 41, 64)
    assert frame_correlation(out, target) > 0.99
    assert frame_correlation(out, target) > max(frame_correlation(out, render_frame(c, 22, 41, 64))
                                                for c in range(8) if c != 2)


def test_decode_keyframe_count_mismatch_raises():
    codec = OrthogonalCodec()
    sr = _sr_with_fixed_template(codec, np.zeros((64, 64, 3)))
    with pytest.raises(ContractViolation):
        sr.decode_keyframe(np.zeros((2, 16, 64)), np.zeros((3, *codec.latent_shape)), codec)


def test_foreground_centroid_of_render_and_blank_frame():
    from neuroclips.data import render_frame

    assert np.allclose(foreground_centroid(render_frame(0, 20.0, 44.0, 64)), [44.0, 20.0], atol=0.05)
    assert np.allclose(foreground_centroid(np.full((8, 8, 3), 0.3)), [3.5, 3.5])


def test_matte_removes_haze_and_keeps_object():
    from neuroclips.data import render_frame

    frame = render_frame(3, 30.0, 30.0, 64)
    haze = 0.05 * np.random.default_rng(0).standard_normal(frame.shape) / math.sqrt(3)
    out = matte_background(frame + haze)
    bg = np.median((frame + haze).reshape(-1, 3), axis=0)
    dev = np.linalg.norm(frame + haze - bg, axis=-1)
    assert np.allclose(out[dev <= 0.1], bg)
    assert np.allclose(out[dev >= 0.3], (frame + haze)[dev >= 0.3], atol=1e-12)
    assert np.array_equal(matte_background(np.full((4, 4, 3), 0.2)), np.full((4, 4, 3), 0.2))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_matte_only_pulls_pixels_towards_background(a, b):
    from neuroclips.data import render_frame

    frame = render_frame(int(8 * a) % 8, 16 + 32 * a, 16 + 32 * b, 64)
    frame = frame + 0.1 * np.random.default_rng(int(1e6 * b)).uniform(-1, 1, frame.shape)
    bg = np.median(frame.reshape(-1, 3), axis=0)
    out = matte_background(frame)
    # every pixel lands on the segment between itself and the median colour
    before, after = frame - bg, out - bg
    t = (after * before).sum(-1) / np.maximum((before * before).sum(-1), 1e-30)
    assert np.all((t >= -1e-12) & (t <= 1 + 1e-12))
    assert np.allclose(after, t[..., None] * before, atol=1e-12)


def test_decoder_output_is_destandardized():
    torch.manual_seed(0)
    dec = KeyframeDecoder((3, 2, 2), hidden=8)
    lat = np.random.default_rng(0).normal([[[5.0]], [[-1.0]], [[0.0]]], [[[2.0]], [[0.1]], [[1.0]]], (40, 3, 2, 2))
    dec.set_latent_stats(lat)
    assert np.allclose(dec.lat_mean.flatten().numpy(), lat.mean(axis=(0, 2, 3)), atol=1e-5)
    assert np.allclose(dec.lat_std.flatten().numpy(), lat.std(axis=(0, 2, 3), ddof=1), rtol=1e-5)
    e = torch.randn(2, 16, 64)
    with torch.no_grad():
        torch.testing.assert_close(dec(e), dec.forward_normalized(e) * dec.lat_std + dec.lat_mean)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 7), st.floats(16, 48), st.floats(16, 48))
def test_center_then_place_recovers_frame(c, cx, cy):
    from neuroclips.data import render_frame

    frame = render_frame(c, cx, cy, 64)
    centred = center_object(frame)
    assert np.allclose(foreground_centroid(centred), [31.5, 31.5], atol=0.3)
    back = place_template(centred, frame)
    assert np.abs(back - frame).mean() < 0.02


# ---------------------------------------------------------------- weights


def test_voxel_weight_export(tmp_path, rng):
    w = rng.standard_normal((16, 40))
    w[:, :10] = 0
    out = export_voxel_weights(w, tmp_path)
    assert out.shape == (40,)
    assert out.min() == 0.0 and out.max() == 1.0
    lines = (tmp_path / "voxel_weights.csv").read_text().splitlines()
    assert lines[0] == "voxel_index,weight" and len(lines) == 41
    assert (tmp_path / "voxel_weights.tns").exists()


def test_voxel_weights_constant_case():
    np.testing.assert_array_equal(voxel_weight_map(np.ones((3, 5))), np.full(5, 0.5))


def test_voxel_weights_separate_active_voxels():
    r = np.random.default_rng(0)
    n, v = 600, 200
    active = r.uniform(size=v) < 0.75
    w_true = r.standard_normal((v, 8)) * active[:, None]
    x = r.standard_normal((n, v))
    y = x @ w_true
    layer = fit_ridge_layer(x, y, lam=1.0)
    exported = voxel_weight_map(layer.weight.detach().numpy())
    assert np.all((exported >= 0) & (exported <= 1))
    p = stats.mannwhitneyu(exported[active], exported[~active], alternative="greater").pvalue
    assert p < 0.01
