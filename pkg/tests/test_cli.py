import json

import pytest

from anchorctx.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from anchorctx.config import OUTPUT_ROOT_ENV, load_config
from anchorctx.dataset import load_dataset
from anchorctx.metrics import SUMMARY_FIELDS

# small but complete: 4 videos so the test split is non-empty
SPEC = {"num_videos": 4, "frames_per_video": 12, "seed": 1}
FAST = ["--epochs=2", "--D=8", "--L=3", "--ccd_epochs=2", "--T_steps=10", "--N=5", "--denoiser_width=16"]


def _write_spec(path, **kw):
    path.write_text(json.dumps({**SPEC, **kw}))
    return path


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert main(["gen-data", str(_write_spec(tmp_path / "spec.json")), "--out", str(tmp_path / "data")]) == EXIT_OK
    (tmp_path / "run.conf").write_text("# test run\ndataset = data\noutput_dir = out\nseed = 3\n")
    return tmp_path


def _run(workdir, *args):
    return main([*args, str(workdir / "run.conf"), *FAST])


class TestGenData:
    def test_minimal_spec(self, tmp_path):
        spec = _write_spec(tmp_path / "s.json", num_videos=1)
        assert main(["gen-data", str(spec), "--out", str(tmp_path / "d")]) == EXIT_OK
        assert len(load_dataset(tmp_path / "d")) == 12

    def test_same_spec_same_files(self, tmp_path):
        spec = _write_spec(tmp_path / "s.json", num_videos=1)
        for name in ("a", "b"):
            main(["gen-data", str(spec), "--out", str(tmp_path / name)])
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_single_class_with_motion_is_rejected(self, tmp_path, capsys):
        spec = _write_spec(tmp_path / "s.json", K=1, motion_classes=[[0, 1]], context_classes=[])
        assert main(["gen-data", str(spec), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
        assert "error" in capsys.readouterr().err

    def test_default_location_uses_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
        spec = _write_spec(tmp_path / "tiny.json", num_videos=1)
        assert main(["gen-data", str(spec)]) == EXIT_OK
        assert (tmp_path / "root" / "tiny" / "manifest.json").is_file()

    def test_missing_spec(self, tmp_path):
        assert main(["gen-data", str(tmp_path / "nope.json")]) == EXIT_CONFIG


class TestTrain:
    def test_both_stages_write_checkpoints(self, workdir):
        assert _run(workdir, "train", "--stage", "acd") == EXIT_OK
        assert _run(workdir, "train", "--stage", "ccd") == EXIT_OK
        out = workdir / "out"
        for name in ("acd.ckpt", "ccd.ckpt", "acd_loss.csv", "ccd_loss.csv", "run_meta_acd.json", "run_meta_ccd.json"):
            assert (out / name).is_file(), name
        assert (out / "acd_loss.csv").read_text().splitlines()[0] == "epoch,loss"
        meta = json.loads((out / "run_meta_acd.json").read_text())
        assert meta["seed"] == 3 and len(meta["config_hash"]) == 64

    def test_refinement_needs_detector(self, workdir, capsys):
        assert _run(workdir, "train", "--stage", "ccd") == EXIT_MISSING
        assert "acd.ckpt" in capsys.readouterr().err

    def test_same_seed_same_loss_curve(self, workdir):
        _run(workdir, "train", "--stage", "acd")
        first = (workdir / "out" / "acd_loss.csv").read_bytes()
        _run(workdir, "train", "--stage", "acd")
        assert (workdir / "out" / "acd_loss.csv").read_bytes() == first

    def test_unknown_key(self, workdir):
        assert main(["train", str(workdir / "run.conf"), "--stage", "acd", "--colour=red"]) == EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        (tmp_path / "run.conf").write_text("dataset = nowhere\n")
        assert main(["train", str(tmp_path / "run.conf"), "--stage", "acd"]) == EXIT_CONFIG


class TestEval:
    def test_oracle_predictions_score_one(self, workdir, capsys):
        test = [f for f in load_dataset(workdir / "data") if f.split == "test"]
        rows = []
        for f in test:
            for box, c in f.ground_truth:
                scores = [0.0] * 8
                scores[c] = 1.0
                rows.append({"video_id": f.video_id, "t": f.t, "box": list(box), "scores": scores})
        (workdir / "oracle.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
        assert _run(workdir, "eval", "--source", "acd", "--predictions", str(workdir / "oracle.jsonl")) == EXIT_OK
        header, values = capsys.readouterr().out.strip().splitlines()[-2:]
        assert header.split(",") == list(SUMMARY_FIELDS)
        assert all(float(v) == 1.0 for v in values.split(","))

    def test_refined_eval_without_checkpoint(self, workdir):
        assert _run(workdir, "eval", "--source", "ccd") == EXIT_MISSING
        _run(workdir, "train", "--stage", "acd")
        assert _run(workdir, "eval", "--source", "ccd") == EXIT_MISSING

    def test_metrics_and_confidence_files(self, workdir):
        for stage in ("acd", "ccd"):
            _run(workdir, "train", "--stage", stage)
        assert _run(workdir, "eval", "--source", "acd") == EXIT_OK
        assert _run(workdir, "eval", "--source", "ccd") == EXIT_OK
        out = workdir / "out"
        for name in ("metrics_acd.csv", "metrics_ccd.csv", "predictions_ccd.jsonl", "confidence.csv"):
            assert (out / name).is_file(), name
        text = (out / "metrics_ccd.csv").read_text()
        for key in SUMMARY_FIELDS:
            assert key in text
        record = json.loads((out / "predictions_ccd.jsonl").read_text().splitlines()[0])
        assert record["source"] == "ccd" and len(record["iw"]) == 8

    def test_report_confidence(self, workdir, capsys):
        for stage in ("acd", "ccd"):
            _run(workdir, "train", "--stage", stage)
        assert _run(workdir, "report-confidence") == EXIT_OK
        printed = capsys.readouterr().out
        assert printed.endswith((workdir / "out" / "confidence.csv").read_text())


class TestConfig:
    def test_overrides_win(self, workdir):
        cfg = load_config(workdir / "run.conf", {"seed": 9, "lr": 0.5})
        assert (cfg.seed, cfg.lr) == (9, 0.5)

    def test_output_root_env(self, workdir, monkeypatch):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(workdir / "elsewhere"))
        assert _run(workdir, "train", "--stage", "acd") == EXIT_OK
        assert (workdir / "elsewhere" / "out" / "acd.ckpt").is_file()

    def test_bad_value(self, workdir):
        assert main(["train", str(workdir / "run.conf"), "--stage", "acd", "--epochs=many"]) == EXIT_CONFIG


class TestEndToEnd:
    def test_repeated_runs_are_byte_identical(self, workdir):
        outputs = []
        for name in ("first", "second"):
            conf = workdir / f"{name}.conf"
            conf.write_text(f"dataset = data\noutput_dir = {name}\nseed = 3\n")
            for args in (["train", "--stage", "acd"], ["train", "--stage", "ccd"],
                         ["eval", "--source", "acd"], ["eval", "--source", "ccd"]):
                assert main([args[0], str(conf), *args[1:], *FAST]) == EXIT_OK
            outputs.append({n: (workdir / name / n).read_bytes()
                            for n in ("metrics_acd.csv", "metrics_ccd.csv", "confidence.csv")})
        assert outputs[0] == outputs[1]
