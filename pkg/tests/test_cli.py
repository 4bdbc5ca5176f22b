"""End-to-end CLI behavior: commands, files, and exit codes."""

import json

import numpy as np
import pytest
from PIL import Image

from pyradet.cli import main

MICRO_CONFIG = {
    "backbone": {"input_size": 32, "levels": 2, "channels_per_level": [4, 6],
                 "l2norm_levels": [0]},
    "fusion": {"reduced_channels": 8},
    "head": {"hidden_channels": 4},
    "generator": {"image_size": 32},
    "augment": {"output_size": 32},
    "train": {"batch_size": 2, "max_iters": 10, "seed": 5, "checkpoint_interval": 5},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(MICRO_CONFIG))
    return str(path)


def run(*argv):
    return main(list(argv))


class TestGenDataset:
    def test_count_zero_writes_empty_manifest(self, tmp_path, config_file):
        out = tmp_path / "ds"
        assert run("gen-dataset", "--out", str(out), "--count", "0",
                   "--seed", "1", "--config", config_file) == 0
        assert (out / "manifest.jsonl").read_text() == ""

    def test_same_seed_identical_files(self, tmp_path, config_file, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        run("gen-dataset", "--out", str(a), "--count", "3", "--seed", "2",
            "--config", config_file)
        run("gen-dataset", "--out", str(b), "--count", "3", "--seed", "2",
            "--config", config_file)
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        for i in range(3):
            name = f"images/scene_{i:06d}.png"
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_count_lines_and_histogram_summary(self, tmp_path, config_file, capsys):
        out = tmp_path / "ds"
        assert run("gen-dataset", "--out", str(out), "--count", "20",
                   "--seed", "3", "--config", config_file) == 0
        lines = (out / "manifest.jsonl").read_text().strip().split("\n")
        assert len(lines) == 20
        printed = capsys.readouterr().out
        assert "face short sides" in printed


@pytest.fixture
def trained_setup(tmp_path, config_file):
    data = tmp_path / "data"
    run("gen-dataset", "--out", str(data), "--count", "6", "--seed", "4",
        "--config", config_file)
    out = tmp_path / "run"
    code = run("train", "--data", str(data), "--out", str(out),
               "--config", config_file, "--log-every", "0")
    assert code == 0
    return data, out


class TestTrain:
    def test_missing_data_dir_exits_1(self, tmp_path, config_file, capsys):
        missing = tmp_path / "nowhere"
        code = run("train", "--data", str(missing), "--out", str(tmp_path / "o"),
                   "--config", config_file)
        assert code == 1
        assert str(missing) in capsys.readouterr().err

    def test_smoke_run_writes_checkpoint_and_log(self, trained_setup):
        _, out = trained_setup
        assert (out / "final.ckpt").exists()
        assert (out / "ckpt_000005.ckpt").exists()
        log = (out / "loss_log.csv").read_text().strip().split("\n")
        assert log[0] == "iter,loss,cls,reg,lr"
        assert len(log) == 11  # header + 10 rows

    def test_resume_continues_iteration_numbering(self, tmp_path, trained_setup, config_file):
        data, out = trained_setup
        out2 = tmp_path / "resumed"
        code = run("train", "--data", str(data), "--out", str(out2),
                   "--config", config_file, "--resume", str(out / "ckpt_000005.ckpt"),
                   "--log-every", "0")
        assert code == 0
        rows = (out2 / "loss_log.csv").read_text().strip().split("\n")[1:]
        iterations = [int(r.split(",")[0]) for r in rows]
        assert iterations == list(range(5, 10))
        straight = (out / "loss_log.csv").read_text().strip().split("\n")[6:]
        assert rows == straight

    def test_usage_error_exits_1(self, capsys):
        assert run("train", "--data") == 1


class TestEval:
    def test_eval_prints_ap_and_writes_csv(self, tmp_path, trained_setup, config_file,
                                           capsys, monkeypatch):
        data, out = trained_setup
        monkeypatch.chdir(tmp_path)
        code = run("eval", "--checkpoint", str(out / "final.ckpt"),
                   "--data", str(data), "--config", config_file)
        assert code == 0
        printed = capsys.readouterr().out
        assert "AP@0.5" in printed
        assert (tmp_path / "pr_curve.csv").read_text().startswith("score,precision,recall")

    def test_bad_checkpoint_exits_1(self, tmp_path, trained_setup, config_file, capsys):
        data, _ = trained_setup
        bogus = tmp_path / "bogus.ckpt"
        bogus.write_bytes(b"NOPE!")
        code = run("eval", "--checkpoint", str(bogus), "--data", str(data),
                   "--config", config_file)
        assert code == 1

    def test_checkpoint_missing_tensors_listed(self, tmp_path, trained_setup,
                                               config_file, capsys):
        from pyradet.model import load_checkpoint, save_checkpoint

        data, out = trained_setup
        arrays = load_checkpoint(out / "final.ckpt")
        victim = next(k for k in arrays if k.startswith("backbone."))
        del arrays[victim]
        partial = tmp_path / "partial.ckpt"
        save_checkpoint(partial, arrays)
        code = run("eval", "--checkpoint", str(partial), "--data", str(data),
                   "--config", config_file)
        assert code == 1
        assert victim in capsys.readouterr().err


class TestDetect:
    def test_untrained_model_emits_zero_lines(self, tmp_path, trained_setup,
                                              config_file, capsys):
        data, out = trained_setup
        # Fresh (untrained) weights: every score sits at the 0.01 prior.
        from pyradet.config import PipelineConfig
        from pyradet.model import save_checkpoint

        det = PipelineConfig.from_json_file(config_file).build_detector()
        fresh = tmp_path / "fresh.ckpt"
        save_checkpoint(fresh, det.state_arrays())
        image = next((data / "images").glob("*.png"))
        code = run("detect", "--checkpoint", str(fresh), "--image", str(image),
                   "--config", config_file)
        assert code == 0
        assert capsys.readouterr().out == ""

    def test_output_is_json_lines(self, tmp_path, trained_setup, config_file, capsys):
        data, out = trained_setup
        image = next((data / "images").glob("*.png"))
        code = run("detect", "--checkpoint", str(out / "final.ckpt"),
                   "--image", str(image), "--config", config_file)
        assert code == 0
        for line in capsys.readouterr().out.strip().split("\n"):
            if line:
                record = json.loads(line)
                assert "score" in record and "box" in record

    def test_ellipses_flag_matches_conversion(self, tmp_path, trained_setup,
                                              config_file, capsys):
        from pyradet.anchors import Box
        from pyradet.evaluation import box_to_ellipse

        data, out = trained_setup
        image = next((data / "images").glob("*.png"))
        run("detect", "--checkpoint", str(out / "final.ckpt"), "--image", str(image),
            "--config", config_file)
        box_lines = [json.loads(l) for l in capsys.readouterr().out.strip().split("\n") if l]
        run("detect", "--checkpoint", str(out / "final.ckpt"), "--image", str(image),
            "--config", config_file, "--ellipses")
        ell_lines = [json.loads(l) for l in capsys.readouterr().out.strip().split("\n") if l]
        assert len(box_lines) == len(ell_lines)
        for b, e in zip(box_lines, ell_lines):
            cx, cy, major, minor, angle = box_to_ellipse(Box(*b["box"]))
            assert e["ellipse"][0] == pytest.approx(cx, abs=1e-2)
            assert e["ellipse"][2] == pytest.approx(major, abs=1e-2)

    def test_unreadable_image_exits_1(self, tmp_path, trained_setup, config_file, capsys):
        _, out = trained_setup
        bad = tmp_path / "not_an_image.png"
        bad.write_text("hello")
        code = run("detect", "--checkpoint", str(out / "final.ckpt"),
                   "--image", str(bad), "--config", config_file)
        assert code == 1

    def test_non_square_image_boxes_scaled_back(self, tmp_path, trained_setup,
                                                config_file, capsys):
        data, out = trained_setup
        arr = (np.random.default_rng(0).random((48, 64, 3)) * 255).astype(np.uint8)
        path = tmp_path / "wide.png"
        Image.fromarray(arr).save(path)
        code = run("detect", "--checkpoint", str(out / "final.ckpt"),
                   "--image", str(path), "--config", config_file)
        assert code == 0
        for line in capsys.readouterr().out.strip().split("\n"):
            if line:
                box = json.loads(line)["box"]
                assert 0 <= box[0] <= 64 and 0 <= box[2] <= 64
                assert 0 <= box[1] <= 48 and 0 <= box[3] <= 48


class TestAnchorStats:
    def test_writes_expected_csv(self, tmp_path, config_file):
        out = tmp_path / "stats.csv"
        assert run("anchor-stats", "--config", config_file, "--out", str(out)) == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "size,pos_x,pos_y,matched_count"
        assert len(lines) > 5


class TestHelp:
    @pytest.mark.parametrize(
        "command,flags",
        [
            ("gen-dataset", ["--out", "--count", "--seed", "--config"]),
            ("train", ["--data", "--out", "--config", "--resume"]),
            ("eval", ["--checkpoint", "--data", "--config", "--pr-out"]),
            ("detect", ["--checkpoint", "--image", "--ellipses"]),
            ("anchor-stats", ["--config", "--out"]),
        ],
    )
    def test_help_exits_zero_and_documents_flags(self, command, flags, capsys):
        assert run(command, "--help") == 0
        text = capsys.readouterr().out
        for flag in flags:
            assert flag in text
