"""Stage runners shared by the CLI: frozen-model pretraining, the two
reconstructors, per-fMRI video inference, fusion, evaluation and export."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt
from .codecs import (Captioner, ConvCodec, FrameClassifier, ReftmProjector, SemanticEmbedder, make_codec,
                     world_frames)
from .config import RunConfig
from .data import (Dataset, WorldSpec, _rng, load_dataset, load_encoder, make_dataset, render_clip,
                   sample_motion)
from .errors import NotReady
from .fusion import FusionItem, SimilarityClassifier, fuse_videos, train_similarity_mlp
from .guidance import (Conditions, NoiseSchedule, TinyVideoDenoiser, inject_alpha_guidance, interpolate_frames,
                       make_schedule, reverse_sample, train_denoiser)
from .metrics import (clip_pcc, eval_report, mean_frame_correlation, retrieval_topk)
from .perception import PerceptionReconstructor, PRConfig, TrainedPR, reconstruct_blurry, train_pr
from .semantics import (SemanticsReconstructor, SRConfig, center_object, export_voxel_weights, pretrain_projector,
                        train_sr)
from .tensorio import load_array, save_tensor

log = logging.getLogger(__name__)

STAGES = ("dataset", "codecs", "pr", "sr", "infer", "fuse", "eval", "weights")


def world_from_config(cfg: RunConfig) -> WorldSpec:
    return WorldSpec(n_classes=cfg.n_classes, n_voxels=cfg.n_voxels, noise_sigma=cfg.noise_sigma,
                     delay_samples=cfg.delay_samples, seed=cfg.seed)


def sample_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, 99, index]).generate_state(1)[0])


def stage_manifest(command: str, cfg: RunConfig, inputs: dict, **extra) -> dict:
    return {"command": command, "config_hash": cfg.hash(), "config": cfg.to_dict(), "input_hashes": inputs,
            "seed": cfg.seed, "version": ckpt.VERSION, **extra}


def _manifest_hash(directory: Path, stage: str) -> str:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise NotReady(stage, f"missing {path}")
    return ckpt.file_hash(path)


# ------------------------------------------------------------------ synth


def run_synth(cfg: RunConfig, home: Path) -> Path:
    out = home / "dataset"
    make_dataset(world_from_config(cfg), cfg.n_train, cfg.n_test, cfg.test_repeats, out)
    path = out / "manifest.json"
    files = sorted(f for f in out.rglob("*") if f.is_file() and f != path)
    digest = ckpt.json_hash([[f.relative_to(out).as_posix(), ckpt.file_hash(f)] for f in files])
    manifest = {**json.loads(path.read_text()), **stage_manifest("synth", cfg, {}, content_hash=digest)}
    ckpt.write_json(path, manifest)
    return out


# --------------------------------------------------------- frozen models


@dataclass
class Bundle:
    codec: object
    embedder: SemanticEmbedder
    classifier: FrameClassifier
    captioner: Captioner
    projector: ReftmProjector
    denoiser: TinyVideoDenoiser
    schedule: NoiseSchedule
    content_hash: str = ""


def _schedule(cfg: RunConfig) -> NoiseSchedule:
    return make_schedule(cfg.diffusion_T, cfg.beta_start, cfg.beta_end, cfg.sampler_steps)


def denoiser_corpus(world: WorldSpec, codec, embedder, captioner, n_videos: int, seed: int):
    lat, txt = [], []
    for k in range(n_videos):
        rng = _rng(seed, 3, 10_000 + k)
        c = int(rng.integers(world.n_classes))
        clip = render_clip(c, sample_motion(rng, world), world, fps=world.infer_fps)
        lat.append(codec.encode_latent(clip.frames))
        txt.append(embedder.embed_text(captioner.caption(c)))
    return np.stack(lat), np.stack(txt)


def run_pretrain_codecs(cfg: RunConfig, home: Path) -> Bundle:
    world = world_from_config(cfg)
    out = home / "codecs"
    frames, labels = world_frames(world, cfg.embedder_frames_per_class, cfg.seed)
    held, held_labels = world_frames(world, 20, cfg.seed + 7919)
    codec = make_codec(cfg.codec, world.frame_size, cfg.latent_scale)
    codec_stats = {}
    if isinstance(codec, ConvCodec):
        codec.fit(frames, steps=cfg.codec_steps, seed=cfg.seed)
        from .metrics import psnr

        rec = codec.decode_latent(codec.encode_latent(held[:64]))
        codec_stats["heldout_psnr_db"] = float(np.mean([psnr(a, b) for a, b in zip(rec, held[:64])]))
    embedder = SemanticEmbedder(world.n_classes, cfg.seed).fit(frames, labels, seed=cfg.seed)
    classifier = FrameClassifier.fit(frames, labels, world.n_classes)
    captioner = Captioner(world.n_classes, classifier)
    clf_acc = float(np.mean(classifier.predict(held) == held_labels))
    class_text = np.stack([embedder.embed_text(captioner.caption(c)) for c in range(world.n_classes)])
    img = embedder.embed_image(frames)
    projector, proj_stats = pretrain_projector(img, class_text[labels], labels, class_text,
                                               epochs=cfg.projector_epochs, seed=cfg.seed)
    schedule = _schedule(cfg)
    vids, txt = denoiser_corpus(world, codec, embedder, captioner, cfg.denoiser_videos, cfg.seed)
    denoiser, losses = train_denoiser(vids, txt, schedule, steps=cfg.denoiser_steps, seed=cfg.seed,
                                      width=cfg.denoiser_width)
    params = {**codec.params(), **embedder.params(), **classifier.params(),
              **ckpt.state_to_arrays(projector, "projector."), **ckpt.state_to_arrays(denoiser, "denoiser.")}
    manifest = stage_manifest(
        "pretrain-codecs", cfg, {},
        kind="codecs", codec_variant=cfg.codec, latent_shape=list(codec.latent_shape),
        classifier_heldout_accuracy=clf_acc, projector=proj_stats, codec_stats=codec_stats,
        denoiser_final_loss=float(np.mean(losses[-50:])),
    )
    digest = ckpt.save_checkpoint(out, params, manifest)
    return Bundle(codec, embedder, classifier, captioner, projector, denoiser, schedule, digest)


def load_bundle(cfg: RunConfig, home: Path) -> Bundle:
    params, manifest = ckpt.load_checkpoint(home / "codecs", "pretrain-codecs")
    world = world_from_config(cfg)
    codec = make_codec(manifest["codec_variant"], world.frame_size, cfg.latent_scale)
    if isinstance(codec, ConvCodec):
        codec.load_params(params)
    embedder = SemanticEmbedder(world.n_classes, cfg.seed)
    embedder.load_params(params)
    classifier = FrameClassifier(params["classifier.centroids"], params["classifier.scale"])
    captioner = Captioner(world.n_classes, classifier)
    projector = ReftmProjector()
    ckpt.arrays_to_state(projector, params, "projector.")
    projector.freeze()
    denoiser = TinyVideoDenoiser(codec.latent_shape[0], width=cfg.denoiser_width, schedule=_schedule(cfg))
    ckpt.arrays_to_state(denoiser, params, "denoiser.")
    return Bundle(codec, embedder, classifier, captioner, projector, denoiser.eval(), _schedule(cfg),
                  manifest["content_hash"])


# ------------------------------------------------------------ reconstructors


def pr_config(cfg: RunConfig, world: WorldSpec, latent_c: int) -> PRConfig:
    return PRConfig(n_voxels=world.n_voxels, n_frames=world.n_frames, latent_c=latent_c,
                    stages=[[latent_c, 2], [latent_c, 1]], tau=cfg.tau, lr=cfg.lr,
                    weight_decay=cfg.pr_weight_decay, epochs=cfg.pr_epochs, batch_size=cfg.pr_batch, seed=cfg.seed)


def _dataset(home: Path) -> Dataset:
    return load_dataset(home / "dataset")


def run_train_pr(cfg: RunConfig, home: Path) -> TrainedPR:
    ds = _dataset(home)
    bundle = load_bundle(cfg, home)
    pcfg = pr_config(cfg, ds.world, bundle.codec.latent_shape[0])
    latents = bundle.codec.encode_latent(ds.frames["train"]).astype(np.float32)
    pr, history = train_pr(ds.fmri["train"], latents, pcfg)
    params = {**ckpt.state_to_arrays(pr.model, "model."), "vox_mean": pr.vox_mean, "vox_std": pr.vox_std}
    inputs = {"dataset": _manifest_hash(home / "dataset", "synth"), "codecs": bundle.content_hash}
    manifest = stage_manifest("train-pr", cfg, inputs, kind="pr", pr_config=vars(pcfg),
                              codec_hash=bundle.content_hash, epoch=pcfg.epochs, history=history)
    ckpt.save_checkpoint(home / "pr", params, manifest)
    return pr


def load_pr(cfg: RunConfig, home: Path, world: WorldSpec, latent_c: int) -> TrainedPR:
    params, manifest = ckpt.load_checkpoint(home / "pr", "train-pr")
    pcfg = PRConfig(**manifest["pr_config"])
    model = PerceptionReconstructor(pcfg)
    ckpt.arrays_to_state(model, params, "model.")
    return TrainedPR(model, params["vox_mean"], params["vox_std"])


def sr_config(cfg: RunConfig, world: WorldSpec) -> SRConfig:
    return SRConfig(n_voxels=world.n_voxels, ridge_lambda=cfg.ridge_lambda, tau=cfg.tau, beta_a=cfg.beta_a,
                    beta_b=cfg.beta_b, delta=cfg.delta, mu=cfg.mu, lr=cfg.lr, align_epochs=cfg.align_epochs,
                    prior_epochs=cfg.prior_epochs, decoder_epochs=cfg.decoder_epochs,
                    align_batch=cfg.align_batch, prior_batch=cfg.prior_batch, seed=cfg.seed)


def run_train_sr(cfg: RunConfig, home: Path) -> SemanticsReconstructor:
    ds = _dataset(home)
    bundle = load_bundle(cfg, home)
    scfg = sr_config(cfg, ds.world)
    frames = ds.frames["train"]
    frame_embs = bundle.embedder.embed_image(frames)
    texts = np.stack([bundle.embedder.embed_text(bundle.captioner.caption(int(c))) for c in ds.classes("train")])
    templates = bundle.codec.encode_latent(np.stack([center_object(f) for f in frames[:, 0]]))
    sr, history = train_sr(ds.fmri["train"], frame_embs, texts, bundle.projector, scfg,
                           bundle.codec.latent_shape, templates)
    params = ckpt.state_to_arrays(sr, "model.")
    inputs = {"dataset": _manifest_hash(home / "dataset", "synth"), "codecs": bundle.content_hash}
    manifest = stage_manifest(
        "train-sr", cfg, inputs, kind="sr", sr_config=vars(scfg), codec_hash=bundle.content_hash,
        projector_hash=ckpt.content_hash(ckpt.state_to_arrays(bundle.projector)),
        phase_schedule=history.pop("phase_boundaries"), delta=scfg.delta, mu=scfg.mu, tau=scfg.tau,
        beta_params=[scfg.beta_a, scfg.beta_b], history=history,
    )
    ckpt.save_checkpoint(home / "sr", params, manifest)
    return sr


def load_sr(cfg: RunConfig, home: Path, world: WorldSpec, latent_shape) -> SemanticsReconstructor:
    params, manifest = ckpt.load_checkpoint(home / "sr", "train-sr")
    sr = SemanticsReconstructor(SRConfig(**manifest["sr_config"]), latent_shape)
    ckpt.arrays_to_state(sr, params, "model.")
    return sr.eval()


# -------------------------------------------------------------- inference


class NeuroClips:
    """Full fMRI -> video reconstruction with alpha/beta/gamma guidance."""

    def __init__(self, cfg: RunConfig, bundle: Bundle, pr: TrainedPR | None, sr: SemanticsReconstructor | None,
                 world: WorldSpec):
        self.cfg, self.bundle, self.pr, self.sr, self.world = cfg, bundle, pr, sr, world

    @classmethod
    def load(cls, cfg: RunConfig, home: Path) -> "NeuroClips":
        world = world_from_config(cfg)
        bundle = load_bundle(cfg, home)
        pr = load_pr(cfg, home, world, bundle.codec.latent_shape[0])
        sr = load_sr(cfg, home, world, bundle.codec.latent_shape)
        return cls(cfg, bundle, pr, sr, world)

    def reconstruct_keyframe(self, fmri, blurry_first_latent):
        if self.sr is None:
            raise NotReady("train-sr", "semantics reconstructor missing")
        e_y, e_re = self.sr.embeddings(fmri)
        return self.sr.decode_keyframe(e_re, blurry_first_latent, self.bundle.codec)[0], e_y[0], e_re[0]

    def _project(self, x0):
        # clean-latent estimates are clamped to valid pixel values
        den, codec = self.bundle.denoiser, self.bundle.codec
        return den.normalize(codec.encode_latent(codec.decode_latent(den.denormalize(x0))))

    def _run_sampler(self, z_T, cond: Conditions, seed: int, key_latent=None) -> np.ndarray:
        b = self.bundle
        z0 = b.denoiser.denormalize(reverse_sample(z_T, b.denoiser, b.schedule, cond, self.cfg.sampler_steps,
                                                   seed=seed, x0_fn=self._project))
        if key_latent is not None:
            # frame 0 is the keyframe latent itself, free of normalization round-off
            z0[0] = key_latent
        return b.codec.decode_latent(z0)

    def sample(self, z_blurry16, first_frame, caption: str | None, seed: int) -> np.ndarray:
        b = self.bundle
        z_T = inject_alpha_guidance(b.denoiser.normalize(z_blurry16), b.schedule, self.cfg.theta, seed)
        key = b.codec.encode_latent(first_frame) if first_frame is not None else None
        cond = Conditions(b.denoiser.normalize(key) if key is not None else None,
                          b.embedder.embed_text(caption) if caption is not None else None)
        return self._run_sampler(z_T, cond, seed, key)

    def reconstruct_video(self, fmri, seed: int) -> dict:
        if self.pr is None:
            raise NotReady("train-pr", "perception reconstructor missing")
        blurry, lat = reconstruct_blurry(fmri, self.pr, self.bundle.codec)
        keyframe, e_y, e_re = self.reconstruct_keyframe(fmri, lat[0])
        caption = self.bundle.captioner.caption_keyframe(keyframe)
        z16 = interpolate_frames(lat, self.world.n_infer_frames)
        video = self.sample(z16, keyframe, caption, seed)
        return {"video": video, "blurry": blurry, "blurry_latents": lat, "z16": z16, "keyframe": keyframe,
                "caption": caption, "fmri_embedding": e_y, "recon_embedding": e_re, "seed": seed}

    def unconditioned_video(self, seed: int) -> np.ndarray:
        b = self.bundle
        shape = (self.world.n_infer_frames, *b.codec.latent_shape)
        z_T = np.random.default_rng([seed, 5]).standard_normal(shape)
        return self._run_sampler(z_T, Conditions(), seed)


def _write_png_frames(frames: np.ndarray, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(frames):
        Image.fromarray(np.round(np.clip(f, 0, 1) * 255).astype(np.uint8)).save(directory / f"frame_{k:02d}.png")


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_infer(cfg: RunConfig, home: Path, split: str = "test") -> Path:
    ds = _dataset(home)
    nc = NeuroClips.load(cfg, home)
    out = home / "infer"
    fmri = ds.fmri[split]

    def one(i):
        res = nc.reconstruct_video(fmri[i], sample_seed(cfg.seed, i))
        res["unconditioned"] = nc.unconditioned_video(sample_seed(cfg.seed + 1, i))
        return res

    results = _map(one, range(len(fmri)), cfg.workers)
    fps = ds.world.infer_fps
    for i, res in enumerate(results):
        vdir = out / "videos" / f"{i:04d}"
        _write_png_frames(res["video"], vdir)
        save_tensor(res["video"].astype(np.float32), vdir / "frames.tns")
        ckpt.write_json(vdir / "video.json", {"fps": fps, "frame_count": int(res["video"].shape[0]),
                                              "source_fmri_index": i, "split": split, "caption": res["caption"],
                                              "seed": res["seed"], "theta": cfg.theta})
    stack = lambda key: np.stack([r[key] for r in results])  # noqa: E731
    save_tensor(stack("video").astype(np.float32), out / "videos.tns")
    save_tensor(stack("blurry").astype(np.float32), out / "blurry.tns")
    save_tensor(stack("keyframe").astype(np.float32), out / "keyframes.tns")
    save_tensor(stack("unconditioned").astype(np.float32), out / "unconditioned.tns")
    save_tensor(stack("fmri_embedding"), out / "fmri_embeddings.tns")
    save_tensor(stack("recon_embedding"), out / "recon_embeddings.tns")
    save_tensor(stack("z16"), out / "blurry_latents16.tns")
    captions = [r["caption"] for r in results]
    inputs = {"dataset": _manifest_hash(home / "dataset", "synth"), "codecs": nc.bundle.content_hash,
              "pr": _manifest_hash(home / "pr", "train-pr"), "sr": _manifest_hash(home / "sr", "train-sr")}
    manifest = stage_manifest("infer", cfg, inputs, kind="infer", split=split, samples=len(results), fps=fps,
                              theta=cfg.theta, sampler_steps=cfg.sampler_steps, captions=captions,
                              seeds=[r["seed"] for r in results])
    ckpt.write_json(out / "manifest.json", manifest)
    return out


# ----------------------------------------------------------------- fusion


def _require(directory: Path, stage: str) -> dict:
    path = directory / "manifest.json"
    if not path.exists():
        raise NotReady(stage, f"missing {path}")
    return json.loads(path.read_text())


def train_fusion_classifier(cfg: RunConfig, bundle: Bundle, world: WorldSpec):
    frames, labels = world_frames(world, 40, cfg.seed + 31)
    embs = bundle.embedder.embed_image(frames)
    return train_similarity_mlp(embs, labels, threshold=cfg.fusion_threshold, seed=cfg.seed)


def run_fuse(cfg: RunConfig, home: Path, start: int = 0, count: int | None = None) -> Path:
    infer_manifest = _require(home / "infer", "infer")
    nc = NeuroClips.load(cfg, home)
    ds = _dataset(home)
    split = infer_manifest["split"]
    videos = load_array(home / "infer" / "videos.tns").astype(np.float64)
    keyframes = load_array(home / "infer" / "keyframes.tns").astype(np.float64)
    z16 = load_array(home / "infer" / "blurry_latents16.tns")
    captions, seeds = infer_manifest["captions"], infer_manifest["seeds"]
    count = len(videos) - start if count is None else count
    order = list(range(start, start + count))
    clf, acc = train_fusion_classifier(cfg, nc.bundle, nc.world)
    items = [FusionItem(nc.bundle.embedder.embed_image(keyframes[i]), videos[i]) for i in order]

    def regenerate(k, first_frame):
        i = order[k]
        return nc.sample(z16[i], first_frame, captions[i], seeds[i])

    fused, decisions = fuse_videos(items, clf.same_class, regenerate, cfg.keep_boundary_frames, fps=nc.world.infer_fps)
    out = home / "fuse"
    records = []
    for n, fv in enumerate(fused):
        vdir = out / "videos" / f"{n:04d}"
        _write_png_frames(fv.frames, vdir)
        save_tensor(fv.frames.astype(np.float32), vdir / "frames.tns")
        rec = {"members": [order[m] for m in fv.members], "boundary_decisions": fv.boundary_decisions,
               "frame_count": int(fv.frames.shape[0]), "duration_s": fv.duration, "fps": fv.fps}
        ckpt.write_json(vdir / "video.json", rec)
        records.append(rec)
    inputs = {"infer": _manifest_hash(home / "infer", "infer"), "codecs": nc.bundle.content_hash}
    manifest = stage_manifest("fuse", cfg, inputs, kind="fuse", split=split, similarity_heldout_accuracy=acc,
                              adjacent_decisions=decisions, fused=records)
    ckpt.write_json(out / "manifest.json", manifest)
    return out


# ------------------------------------------------------------- evaluation


def run_eval(cfg: RunConfig, home: Path, figures: bool = True) -> Path:
    infer_manifest = _require(home / "infer", "infer")
    ds = _dataset(home)
    bundle = load_bundle(cfg, home)
    split = infer_manifest["split"]
    videos = load_array(home / "infer" / "videos.tns").astype(np.float64)
    blurry = load_array(home / "infer" / "blurry.tns").astype(np.float64)
    keyframes = load_array(home / "infer" / "keyframes.tns").astype(np.float64)
    uncond = load_array(home / "infer" / "unconditioned.tns").astype(np.float64)
    fmri_embs = load_array(home / "infer" / "fmri_embeddings.tns")
    n = len(videos)
    gt_videos = np.stack([ds.render_infer_clip(split, i).frames for i in range(n)]).astype(np.float64)
    gt_frames = ds.frames[split][:n].astype(np.float64)
    classes = ds.classes(split)[:n]
    clf = bundle.classifier
    frame_probs = np.stack([clf.predict_proba(v) for v in videos])
    video_probs = frame_probs.mean(axis=1)

    key_acc = float(np.mean(clf.predict(keyframes) == classes))
    blurry_corr = float(np.mean([mean_frame_correlation(b, g) for b, g in zip(blurry, gt_frames)]))
    shuffled = float(np.mean([mean_frame_correlation(blurry[i], gt_frames[(i + 1) % n]) for i in range(n)]))
    mid = ds.world.n_frames // 2
    gt_key_embs = bundle.embedder.embed_image(gt_frames[:, mid])
    pool = min(cfg.retrieval_pool, n)
    parts = max(1, min(cfg.retrieval_partitions, n // pool))
    r_fwd, r_bwd = retrieval_topk(fmri_embs, gt_key_embs, pool, parts, seed=cfg.seed)
    pcc_uncond = float(np.mean([clip_pcc(u, bundle.embedder, cfg.clip_pcc_mode) for u in uncond]))
    pcc_gt = float(np.mean([clip_pcc(g, bundle.embedder, cfg.clip_pcc_mode) for g in gt_videos]))
    extra = {
        "keyframe_class_accuracy": key_acc,
        "chance_accuracy": 1.0 / ds.world.n_classes,
        "blurry_frame_correlation": blurry_corr,
        "blurry_shuffled_baseline": shuffled,
        "retrieval": {"pool": pool, "partitions": parts, "keyframe_from_fmri": r_fwd, "fmri_from_keyframe": r_bwd,
                      "chance": 1.0 / pool},
        "clip_pcc_unconditioned": pcc_uncond,
        "clip_pcc_ground_truth": pcc_gt,
    }
    report = eval_report(videos, gt_videos, frame_probs, classes, bundle.embedder, cfg.to_dict(), seed=cfg.seed,
                         video_probs=video_probs, extra=extra)
    out = home / "eval"
    report.write(out / "report.jsonl")
    if figures:
        from .plotting import render_eval_figures

        render_eval_figures(report, videos, gt_videos, blurry, gt_frames, keyframes, out / "figures")
    inputs = {"infer": _manifest_hash(home / "infer", "infer"), "codecs": bundle.content_hash}
    manifest = stage_manifest("eval", cfg, inputs, kind="eval", split=split, samples=n,
                              report_sha256=ckpt.file_hash(out / "report.jsonl"))
    ckpt.write_json(out / "manifest.json", manifest)
    return out


# ----------------------------------------------------------------- export


def run_export_weights(cfg: RunConfig, home: Path, figures: bool = True) -> Path:
    params, manifest = ckpt.load_checkpoint(home / "sr", "train-sr")
    out = home / "weights"
    w = export_voxel_weights(params["model.ridge.weight"], out)
    stats = {}
    enc_path = home / "dataset" / "encoder" / "W_true.tns"
    if enc_path.exists():
        from scipy.stats import mannwhitneyu

        active = np.any(load_array(enc_path) != 0, axis=0)
        res = mannwhitneyu(w[active], w[~active], alternative="greater")
        stats = {"active_mean": float(w[active].mean()), "inactive_mean": float(w[~active].mean()),
                 "mannwhitney_p": float(res.pvalue)}
    if figures:
        from .plotting import render_weight_figure

        render_weight_figure(w, out / "voxel_weights.png")
    inputs = {"sr": _manifest_hash(home / "sr", "train-sr")}
    ckpt.write_json(out / "manifest.json", stage_manifest("export-weights", cfg, inputs, kind="weights",
                                                          n_voxels=int(w.size), ground_truth_check=stats))
    return out
