"""End-to-end command-line tests on a scaled-down configuration.

Everything runs in-process through cli.main so exit codes and artifacts
can be asserted directly.
"""

import json
import shutil

import numpy as np
import pytest

from swarmlens import cli
from swarmlens.io_formats import read_map, read_ppm

SMOKE_CONFIG = """\
[sim]
n_ants = 6
arena = 128
episode_len = 240.0
duel_rate = 20.0

[model]
conv_channels = 4,8,16,32
dense_units = 32,16

[train]
max_epochs = 1
batch = 4

[explain]
upsample = 128
"""


def write_config(tmp_path):
    path = tmp_path / "smoke.ini"
    path.write_text(SMOKE_CONFIG)
    return str(path)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestUsageErrors:
    def test_explain_requires_checkpoint(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            cli.main(["explain", "flows", "frames", "--out", str(tmp_path)])
        assert err.value.code == 2

    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            cli.main(["synth", "--label", "stable", "--out", str(tmp_path),
                      "--frobnicate"])
        assert err.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["transmogrify"])
        assert err.value.code == 2

    def test_bad_label_value(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            cli.main(["synth", "--label", "wobbly", "--out", str(tmp_path)])
        assert err.value.code == 2


class TestErrorExitCodes:
    def test_unknown_config_key_is_validation_error(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[sim]\nwarp_speed = 9\n")
        code = cli.main(["synth", "--label", "stable", "--out",
                         str(tmp_path / "out"), "--config", str(bad)])
        assert code == 4

    def test_missing_frames_dir_is_file_error(self, tmp_path):
        code = cli.main(["flow", str(tmp_path / "nowhere"), "--out",
                         str(tmp_path / "out")])
        assert code == 3

    def test_missing_manifest_is_validation_error(self, tmp_path):
        flows = tmp_path / "flows"
        flows.mkdir()
        code = cli.main(["train", str(flows), "--out", str(tmp_path / "out")])
        assert code == 4

    def test_corrupt_flo_is_format_error(self, tmp_path, smoke_dirs):
        flows = tmp_path / "flows"
        shutil.copytree(smoke_dirs["flows"], flows)
        victim = sorted(flows.glob("*-a.flo"))[0]
        victim.write_bytes(b"XXXX" + victim.read_bytes()[4:])
        code = cli.main(["train", str(flows), "--out", str(tmp_path / "out"),
                         "--config", smoke_dirs["config"]])
        assert code == 3


class TestSynthDeterminism:
    def test_byte_identical_reruns(self, tmp_path):
        config = write_config(tmp_path)
        args = ["synth", "--label", "unstable", "--episodes", "2", "--seed", "7",
                "--config", config]
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(args + ["--out", str(a)]) == 0
        assert cli.main(args + ["--out", str(b)]) == 0
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert list(ta) == list(tb)
        assert all(ta[k] == tb[k] for k in ta)

    def test_episode_layout(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["synth", "--label", "stable", "--seed", "3",
                         "--config", config, "--out", str(out)]) == 0
        ep = out / "stable-0003"
        meta = json.loads((ep / "meta.json").read_text())
        assert meta["label"] == 0
        assert meta["arena"] == 128
        assert meta["frame_indices"] == [0, 1, 2, 240, 241, 242]
        for idx in meta["frame_indices"]:
            assert (ep / f"frame_{idx:06d}.pgm").exists()
        assert (ep / "events.jsonl").read_bytes() == b""


@pytest.fixture(scope="session")
def smoke_dirs(tmp_path_factory):
    """synth(5 stable + 5 unstable) -> flow, shared across CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    config = write_config(root)
    frames = root / "frames"
    for label, seed in (("stable", 0), ("unstable", 100)):
        code = cli.main(["synth", "--label", label, "--episodes", "5",
                         "--seed", str(seed), "--config", config,
                         "--out", str(frames)])
        assert code == 0
    flows = root / "flows"
    assert cli.main(["flow", str(frames), "--config", config,
                     "--out", str(flows)]) == 0
    return {"root": root, "config": config, "frames": frames, "flows": flows}


class TestPipeline:
    def test_flow_manifest(self, smoke_dirs):
        manifest = (smoke_dirs["flows"] / "manifest.csv").read_text().splitlines()
        assert manifest[0] == "sample_id,flo_a,flo_b,label,t_seconds,episode_id"
        assert len(manifest) == 1 + 10 * 2  # two samples per 240 s episode
        first = manifest[1].split(",")
        assert first[0] == "stable-0000-t000000"
        assert (smoke_dirs["flows"] / first[1]).exists()
        assert (smoke_dirs["flows"] / first[2]).exists()

    def test_flow_rerun_identical(self, smoke_dirs, tmp_path):
        again = tmp_path / "flows2"
        assert cli.main(["flow", str(smoke_dirs["frames"]), "--config",
                         smoke_dirs["config"], "--out", str(again)]) == 0
        want = tree_bytes(smoke_dirs["flows"])
        got = tree_bytes(again)
        assert list(want) == list(got)
        assert all(want[k] == got[k] for k in want)

    def test_train_explain_eval(self, smoke_dirs, tmp_path):
        run = tmp_path / "run"
        code = cli.main(["train", str(smoke_dirs["flows"]), "--config",
                         smoke_dirs["config"], "--seed", "1", "--out", str(run)])
        assert code == 0
        ckpt = run / "model.ckpt"
        assert ckpt.exists()
        loss_lines = (run / "loss.csv").read_text().splitlines()
        assert loss_lines[0] == "epoch,train_loss,val_loss"
        assert len(loss_lines) == 2  # max_epochs = 1

        ex = tmp_path / "explained"
        code = cli.main(["explain", str(smoke_dirs["flows"]),
                         str(smoke_dirs["frames"]), "--checkpoint", str(ckpt),
                         "--config", smoke_dirs["config"], "--out", str(ex)])
        assert code == 0
        maps = sorted(ex.glob("map-*.flo"))
        overlays = sorted(ex.glob("overlay-*.ppm"))
        assert len(maps) == len(overlays) == 20
        m = read_map(maps[0])
        assert m.shape == (128, 128)
        assert np.all(m >= 0.0)
        rgb = read_ppm(overlays[0])
        assert rgb.shape == (3, 128, 128)

        ev = tmp_path / "evaled"
        code = cli.main(["eval", str(smoke_dirs["flows"]),
                         str(smoke_dirs["frames"]), "--checkpoint", str(ckpt),
                         "--config", smoke_dirs["config"], "--seed", "1",
                         "--out", str(ev)])
        assert code == 0
        report = json.loads((ev / "eval.json").read_text())
        assert set(report) == {"auc", "accuracy", "pointing_accuracy",
                               "random_baseline", "per_episode_auc", "loss_curve"}
        assert 0.0 <= report["auc"] <= 1.0
        assert 0.0 <= report["accuracy"] <= 1.0
        if report["pointing_accuracy"] is not None:
            assert 0.0 <= report["pointing_accuracy"] <= 1.0
            assert 0.0 < report["random_baseline"] < 1.0

        ev2 = tmp_path / "evaled2"
        code = cli.main(["eval", str(smoke_dirs["flows"]), "--checkpoint",
                         str(ckpt), "--config", smoke_dirs["config"],
                         "--seed", "1", "--out", str(ev2)])
        assert code == 0
        no_frames = json.loads((ev2 / "eval.json").read_text())
        assert no_frames["pointing_accuracy"] is None
        assert no_frames["auc"] == report["auc"]
