"""Command-line entry point: ``neuroclips <command> [options]``.

Commands run one pipeline stage each and write their artifacts plus a
manifest.json under the artifact root (``--home`` or ``$NEUROCLIPS_HOME``).

Exit codes: 0 success, 1 invalid configuration or argument, 2 usage error,
3 an upstream artifact is missing, 4 training diverged, a file is corrupt or
another run-time check failed.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import VERSION
from .config import RunConfig, load_config
from .errors import ConfigError, InvalidArgument, NeuroClipsError, NotReady

log = logging.getLogger("neuroclips")

EXIT_OK, EXIT_CONFIG, EXIT_USAGE, EXIT_NOT_READY, EXIT_FAILED = 0, 1, 2, 3, 4

COMMANDS = {
    "synth": "generate the synthetic world dataset (clips, fMRI, labels)",
    "pretrain-codecs": "fit the frozen stand-ins: codec, embedder, classifier, projector, denoiser",
    "train-pr": "train the Perception Reconstructor (fMRI -> blurry latent video)",
    "train-sr": "train the Semantics Reconstructor (fMRI -> keyframe + embeddings)",
    "infer": "reconstruct 8 FPS videos for every test fMRI sample",
    "fuse": "chain consecutive same-class reconstructions into longer videos",
    "eval": "score reconstructions and write report.jsonl plus figures",
    "export-weights": "export per-voxel ridge weights in [0, 1] as .tns and .csv",
}


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(item, "overrides must look like key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuroclips", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="flat YAML key: value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--home", type=Path, default=None,
                        help="artifact root (default: $NEUROCLIPS_HOME or ./neuroclips_home)")
    common.add_argument("--seed", type=int, default=None, help="shorthand for --set seed=N")
    common.add_argument("--theta", type=float, default=None, help="alpha-guidance noise level in (0, 1]")
    common.add_argument("--workers", type=int, default=None, help="per-sample worker threads (results unchanged)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "infer":
            p.add_argument("--split", default="test", choices=("train", "test"), help="which fMRI split to decode")
        if name == "fuse":
            p.add_argument("--start", type=int, default=0, help="first reconstruction index to chain")
            p.add_argument("--count", type=int, default=None, help="number of consecutive reconstructions")
        if name in ("eval", "export-weights"):
            p.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = _parse_set(args.overrides)
    for key in ("seed", "theta", "workers"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def resolve_home(args) -> Path:
    if args.home is not None:
        return args.home
    return Path(os.environ.get("NEUROCLIPS_HOME", "neuroclips_home"))


def dispatch(command: str, cfg: RunConfig, home: Path, args) -> Path:
    if command == "synth":
        return pipeline.run_synth(cfg, home)
    if command == "pretrain-codecs":
        pipeline.run_pretrain_codecs(cfg, home)
        return home / "codecs"
    if command == "train-pr":
        if not (home / "dataset" / "manifest.json").exists():
            raise NotReady("synth", f"no dataset under {home / 'dataset'}")
        if not (home / "codecs" / "manifest.json").exists():
            log.info("frozen stand-in models missing; running pretrain-codecs first")
            pipeline.run_pretrain_codecs(cfg, home)
        pipeline.run_train_pr(cfg, home)
        return home / "pr"
    if command == "train-sr":
        pipeline.run_train_sr(cfg, home)
        return home / "sr"
    if command == "infer":
        return pipeline.run_infer(cfg, home, split=args.split)
    if command == "fuse":
        return pipeline.run_fuse(cfg, home, start=args.start, count=args.count)
    if command == "eval":
        return pipeline.run_eval(cfg, home, figures=not args.no_figures)
    if command == "export-weights":
        return pipeline.run_export_weights(cfg, home, figures=not args.no_figures)
    raise AssertionError(command)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on usage errors
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        home = resolve_home(args)
        out = dispatch(args.command, cfg, home, args)
    except ConfigError as exc:
        print(f"error: invalid config key '{exc.key}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgument as exc:
        print(f"error: invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotReady as exc:
        print(f"error: not ready, run '{exc.stage}' first ({exc})", file=sys.stderr)
        return EXIT_NOT_READY
    except NeuroClipsError as exc:
        # divergence, corrupt files and internal contract failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
