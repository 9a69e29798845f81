import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from neuroclips.cli import COMMANDS, main

TINY = str(Path(__file__).with_name("tiny_config.yaml"))
STAGES = ["synth", "pretrain-codecs", "train-pr", "train-sr", "infer", "fuse", "eval", "export-weights"]
STAGE_DIRS = {"synth": "dataset", "pretrain-codecs": "codecs", "train-pr": "pr", "train-sr": "sr", "infer": "infer",
              "fuse": "fuse", "eval": "eval", "export-weights": "weights"}


def run(*argv, home=None):
    args = list(argv) + ["--config", TINY]
    if home is not None:
        args += ["--home", str(home)]
    return main(args)


@pytest.fixture(scope="module")
def tiny_home(tmp_path_factory):
    home = tmp_path_factory.mktemp("tiny")
    for stage in STAGES:
        extra = ["--no-figures"] if stage in ("eval", "export-weights") else []
        assert run(stage, *extra, home=home) == 0, stage
    return home


def _copy(home, tmp_path, name="copy"):
    dst = tmp_path / name
    shutil.copytree(home, dst)
    return dst


# ------------------------------------------------------------------ usage


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit) as ex:
        main(["--help"])
    assert ex.value.code == 0
    out = capsys.readouterr().out
    assert all(name in out for name in COMMANDS)


def test_subcommand_help(capsys):
    with pytest.raises(SystemExit) as ex:
        main(["infer", "--help"])
    assert ex.value.code == 0
    assert "--theta" in capsys.readouterr().out


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    for argv in (["bogus"], ["synth", "--no-figures"], ["infer", "--split", "valid"]):
        with pytest.raises(SystemExit) as ex:
            main(argv + ["--home", str(tmp_path)])
        assert ex.value.code == 2


def test_bad_config_exits_1(tmp_path, capsys):
    assert run("synth", "--set", "learning_rate=1", home=tmp_path) == 1
    assert "learning_rate" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("n_train: lots\n")
    assert main(["synth", "--config", str(bad), "--home", str(tmp_path)]) == 1
    assert run("infer", "--theta", "1.5", home=tmp_path) == 1


@pytest.mark.parametrize("command", ["train-pr", "train-sr", "infer", "fuse", "eval", "export-weights"])
def test_missing_upstream_exits_3(command, tmp_path, capsys):
    assert run(command, home=tmp_path / "empty") == 3
    assert "not ready" in capsys.readouterr().err


def test_corrupt_artifact_exits_4(tiny_home, tmp_path):
    home = _copy(tiny_home, tmp_path)
    target = sorted((home / "sr").rglob("*.tns"))[0]
    target.write_bytes(target.read_bytes()[:20])
    assert run("infer", home=home) == 4


def test_home_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("NEUROCLIPS_HOME", str(tmp_path / "envhome"))
    assert run("synth") == 0
    assert (tmp_path / "envhome" / "dataset" / "manifest.json").exists()


# ------------------------------------------------------------------ artifacts


def test_every_stage_writes_a_complete_manifest(tiny_home):
    for stage, sub in STAGE_DIRS.items():
        m = json.loads((tiny_home / sub / "manifest.json").read_text())
        assert m["command"] == stage
        for key in ("config_hash", "input_hashes", "seed", "version"):
            assert key in m, (stage, key)
        text = json.dumps(m).lower()
        assert "timestamp" not in text and "date" not in m


def test_infer_layout(tiny_home):
    videos = sorted((tiny_home / "infer" / "videos").iterdir())
    assert len(videos) == 6
    for vdir in videos:
        assert sorted(p.name for p in vdir.glob("*.png")) == [f"frame_{k:02d}.png" for k in range(16)]
        meta = json.loads((vdir / "video.json").read_text())
        assert meta["fps"] == 8 and meta["frame_count"] == 16 and meta["split"] == "test"
        assert meta["caption"].startswith("a video of a")


def test_fuse_manifest_is_consistent(tiny_home):
    m = json.loads((tiny_home / "fuse" / "manifest.json").read_text())
    members = [i for rec in m["fused"] for i in rec["members"]]
    assert members == list(range(6))
    for rec in m["fused"]:
        assert len(rec["members"]) <= 3
        assert rec["duration_s"] == 2.0 * len(rec["members"]) and rec["frame_count"] == 16 * len(rec["members"])
        assert all(m["adjacent_decisions"][i - 1] for i in rec["members"][1:])


def test_export_weights_in_unit_interval(tiny_home):
    rows = (tiny_home / "weights" / "voxel_weights.csv").read_text().splitlines()
    vals = np.array([float(r.split(",")[-1]) for r in rows[1:]])
    assert len(vals) == 128 and vals.min() >= 0.0 and vals.max() <= 1.0


def test_theta_override_reaches_infer(tiny_home, tmp_path):
    home = _copy(tiny_home, tmp_path)
    assert run("infer", "--theta", "1.0", home=home) == 0
    m = json.loads((home / "infer" / "manifest.json").read_text())
    assert m["theta"] == 1.0 and m["config"]["theta"] == 1.0
    assert json.loads((home / "infer" / "videos" / "0000" / "video.json").read_text())["theta"] == 1.0


def test_workers_do_not_change_results(tiny_home, tmp_path):
    home = _copy(tiny_home, tmp_path)
    assert run("infer", "--workers", "3", home=home) == 0
    assert (home / "infer" / "videos.tns").read_bytes() == (tiny_home / "infer" / "videos.tns").read_bytes()


def test_rerun_of_a_stage_is_byte_identical(tiny_home, tmp_path):
    home = _copy(tiny_home, tmp_path)
    assert run("eval", "--no-figures", home=home) == 0
    for name in ("report.jsonl", "manifest.json"):
        assert (home / "eval" / name).read_bytes() == (tiny_home / "eval" / name).read_bytes()
