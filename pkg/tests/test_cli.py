from __future__ import annotations

import filecmp
import json

import pytest

from umpe.cli import MANIFEST, main, parse_subset

TINY = ["--set", "width=16", "--set", "num_layers=1", "--set", "num_heads=2", "--set", "batch_size=4",
        "--set", "stage1_epochs=2", "--set", "stage2_epochs=1"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth-data", "--seed", "3", "--frames", "8", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def checkpoint(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run") / "run"
    assert main(["train", "--data", str(data), "--out", str(out), *TINY]) == 0
    return out / "checkpoint.pt"


def _tree_equal(a, b, ignore=(MANIFEST,)) -> bool:
    cmp = filecmp.dircmp(a, b, ignore=list(ignore))
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    files = [f for f in cmp.common_files]
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d, ()) for d in cmp.common_dirs)


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_missing_required_argument(self, capsys):
        assert main(["eval", "--data", "x"]) == 2

    def test_train_without_data(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path / "r")]) == 2
        assert "data_dir" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        assert main(["train", "--data", "d", "--out", str(tmp_path / "r"), "--set", "bogus=1", "--print-config"]) == 2

    def test_missing_checkpoint(self, data, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--data", str(data),
                     "--out", str(tmp_path / "e")]) == 2

    def test_bad_subset(self, checkpoint, data, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(data), "--subset", "hd+lidar",
                     "--out", str(tmp_path / "e")]) == 2

    def test_runtime_failure_is_one(self, tmp_path, capsys):
        # a checkpoint file that torch cannot read
        bad = tmp_path / "bad.pt"
        bad.write_text("not a checkpoint")
        data = tmp_path / "d"
        assert main(["synth-data", "--frames", "1", "--out", str(data)]) == 0
        assert main(["eval", "--checkpoint", str(bad), "--data", str(data), "--out", str(tmp_path / "e")]) == 1

    def test_plot_needs_input(self, tmp_path, capsys):
        assert main(["plot", "--out", str(tmp_path / "p")]) == 2


class TestSynthData:
    def test_refuses_non_empty_out(self, data, capsys):
        assert main(["synth-data", "--frames", "1", "--out", str(data)]) == 2
        assert "--overwrite" in capsys.readouterr().err

    def test_overwrite(self, tmp_path):
        out = tmp_path / "d"
        assert main(["synth-data", "--frames", "2", "--out", str(out)]) == 0
        assert main(["synth-data", "--frames", "1", "--out", str(out), "--overwrite"]) == 0
        assert len([p for p in out.iterdir() if p.is_dir()]) == 1

    def test_rerun_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth-data", "--seed", "9", "--frames", "3", "--out", str(tmp_path / name)]) == 0
        assert _tree_equal(tmp_path / "a", tmp_path / "b")

    def test_manifest(self, data):
        m = json.loads((data / MANIFEST).read_text())
        assert m["command"] == "synth-data" and m["seeds"] == [3] and m["config_hash"]
        assert m["argv"][:3] == ["synth-data", "--seed", "3"]

    def test_noise_file(self, tmp_path):
        noise = tmp_path / "noise.json"
        noise.write_text(json.dumps({"drift_scale": 0.0}))
        out = tmp_path / "d"
        assert main(["synth-data", "--frames", "1", "--noise", str(noise), "--out", str(out)]) == 0
        meta = json.loads((out / "000000" / "meta.json").read_text())
        assert all(v == {"dx": 0.0, "dy": 0.0, "dtheta": 0.0} for v in meta["drift"].values())


class TestTrainEval:
    def test_print_config(self, capsys):
        assert main(["train", "--print-config", "--seed", "4", "--set", "lr_prior=0.001"]) == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["seed"] == 4 and cfg["lr_prior"] == 0.001 and cfg["stage1_epochs"] == 20

    def test_train_outputs(self, checkpoint):
        run = checkpoint.parent
        assert {"checkpoint.pt", "metrics.jsonl", "config.json", MANIFEST} <= {p.name for p in run.iterdir()}

    def test_train_rerun_log_identical(self, data, checkpoint, tmp_path):
        out = tmp_path / "again"
        assert main(["train", "--data", str(data), "--out", str(out), *TINY]) == 0
        assert (out / "metrics.jsonl").read_bytes() == (checkpoint.parent / "metrics.jsonl").read_bytes()

    def test_eval_subset(self, checkpoint, data, tmp_path):
        out = tmp_path / "e"
        assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(data), "--subset", "hd+sat",
                     "--out", str(out)]) == 0
        res = json.loads((out / "eval.json").read_text())
        assert res["subset"] == "hd+sat" and 0 <= res["miou"] <= 1

    def test_powerset_and_plot(self, checkpoint, data, tmp_path, capsys):
        ps = tmp_path / "ps"
        assert main(["powerset", "--checkpoint", str(checkpoint), "--data", str(data), "--out", str(ps)]) == 0
        rows = json.loads((ps / "powerset.json").read_text())
        assert len(rows) == 16 and rows[0]["subset"] == "none"
        figs = tmp_path / "figs"
        assert main(["plot", "--powerset", str(ps / "powerset.json"),
                     "--metrics", str(checkpoint.parent / "metrics.jsonl"), "--out", str(figs)]) == 0
        assert (figs / "powerset.png").stat().st_size > 0 and (figs / "training_curves.png").exists()


def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
    results = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
    assert results and all(r["rel_error"] < 1e-4 for r in results)


@pytest.mark.parametrize("text,bits", [("none", (0, 0, 0, 0)), ("hd+sat", (1, 0, 1, 0)),
                                       ("sd,rsd", (0, 1, 0, 1)), ("hd+sd+sat+rsd", (1, 1, 1, 1))])
def test_parse_subset(text, bits):
    assert parse_subset(text) == bits
