import csv
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from obidiff.cli import main
from obidiff.images import load_image, save_image
from obidiff.manifest import load_manifest


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, runner):
    """synth -> validate -> split -> short train-diffusion, shared below."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    res = runner.invoke(main, [
        "synth", "--out", str(ds), "--classes", "3", "--pairs-per-class", "30",
        "--resolution", "32", "--seed", "4",
    ])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["validate", "--manifest", str(ds / "manifest.json")])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["split", "--manifest", str(ds / "manifest.json"), "--seed", "4"])
    assert res.exit_code == 0, res.output

    run = root / "run"
    res = runner.invoke(main, [
        "train-diffusion", "--manifest", str(ds / "manifest.json"), "--out", str(run),
        "--steps", "4", "--batch-size", "2", "--seed", "4",
    ], env={"OBIDIFF_BASE_CHANNELS": "4", "OBIDIFF_CTX_DIM": "16", "OBIDIFF_T": "100"})
    assert res.exit_code == 0, res.output
    return root, ds, run


class TestSynthValidateSplit:
    def test_dataset_on_disk(self, pipeline):
        _, ds, _ = pipeline
        manifest = load_manifest(ds / "manifest.json")
        assert len(manifest.pairs) == 90
        assert manifest.resolution == 32
        assert (ds / "synth.config.json").exists()

    def test_qc_csv(self, pipeline):
        _, ds, _ = pipeline
        with open(ds / "qc.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["pair_id", "class_id", "iou", "decision"]
        assert len(rows) == 91
        decisions = {r[3] for r in rows[1:]}
        assert decisions == {"accept", "reject"}

    def test_split_persisted(self, pipeline):
        _, ds, _ = pipeline
        manifest = load_manifest(ds / "manifest.json")
        assert manifest.splits["train"] and manifest.splits["val"]
        assert not set(manifest.splits["train"]) & set(manifest.splits["val"])

    def test_rerun_from_resolved_config_identical(self, pipeline, runner, tmp_path):
        """The resolved-config file must replay to a bit-identical dataset."""
        _, ds, _ = pipeline
        doc = json.loads((ds / "synth.config.json").read_text())
        doc.pop("command")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(doc))
        replay = tmp_path / "replay"
        res = runner.invoke(main, ["synth", "--out", str(replay), "--config", str(cfg)])
        assert res.exit_code == 0, res.output
        a = load_manifest(ds / "manifest.json")
        b = load_manifest(replay / "manifest.json")
        for pa, pb in zip(a.pairs, b.pairs):
            assert pa.pair_id == pb.pair_id
            assert np.array_equal(*map(load_image, (ds / pa.glyph_path, replay / pb.glyph_path)))
            assert np.array_equal(*map(load_image, (ds / pa.style_path, replay / pb.style_path)))

    def test_env_override_applies(self, runner, tmp_path):
        res = runner.invoke(main, [
            "synth", "--out", str(tmp_path / "d"),
            "--classes", "2", "--pairs-per-class", "2",
        ], env={"OBIDIFF_RESOLUTION": "48"})
        assert res.exit_code == 0, res.output
        assert load_manifest(tmp_path / "d" / "manifest.json").resolution == 48

    def test_flag_beats_env(self, runner, tmp_path):
        res = runner.invoke(main, [
            "synth", "--out", str(tmp_path / "d"), "--classes", "2",
            "--pairs-per-class", "2", "--resolution", "32",
        ], env={"OBIDIFF_RESOLUTION": "48"})
        assert res.exit_code == 0, res.output
        assert load_manifest(tmp_path / "d" / "manifest.json").resolution == 32


class TestTrainDiffusion:
    def test_outputs(self, pipeline):
        _, _, run = pipeline
        assert (run / "checkpoint.pt").exists()
        assert (run / "checkpoint.json").exists()
        assert (run / "loss.png").exists()
        cfg = json.loads((run / "train-diffusion.config.json").read_text())
        assert cfg["steps"] == 4 and cfg["base_channels"] == 4

    def test_lock_released(self, pipeline):
        _, _, run = pipeline
        assert not (run / ".lock").exists()

    def test_lock_blocks_concurrent_run(self, pipeline, runner):
        _, ds, run = pipeline
        (run / ".lock").write_text("1")
        try:
            res = runner.invoke(main, [
                "train-diffusion", "--manifest", str(ds / "manifest.json"),
                "--out", str(run), "--steps", "1",
            ])
            assert res.exit_code != 0
            assert "locked" in res.output
        finally:
            (run / ".lock").unlink()


@pytest.fixture(scope="module")
def generated(pipeline, runner):
    root, ds, run = pipeline
    gen = root / "gen"
    res = runner.invoke(main, [
        "generate", "--checkpoint", str(run / "checkpoint.pt"), "--out", str(gen),
        "--manifest", str(ds / "manifest.json"), "--mode", "few-shot",
        "--limit", "4", "--steps", "5", "--seed", "0",
    ])
    assert res.exit_code == 0, res.output
    return gen


class TestGenerateEval:
    def test_generate_outputs(self, generated):
        prov = json.loads((generated / "provenance.json").read_text())
        assert len(prov) == 4
        for rec in prov:
            img = load_image(rec["out_path"])
            assert img.shape == (32, 32)

    def test_generate_requests_file(self, pipeline, runner, tmp_path):
        _, ds, run = pipeline
        manifest = load_manifest(ds / "manifest.json")
        pair = manifest.split_pairs("val")[0]
        req = {
            "glyph_path": str(ds / pair.glyph_path),
            "style_path": str(ds / pair.style_path),
            "out_path": str(tmp_path / "one.png"),
            "seed": 9,
        }
        reqs = tmp_path / "reqs.jsonl"
        reqs.write_text(json.dumps(req) + "\n")
        res = runner.invoke(main, [
            "generate", "--checkpoint", str(run / "checkpoint.pt"),
            "--out", str(tmp_path / "out"), "--requests", str(reqs), "--steps", "5",
        ])
        assert res.exit_code == 0, res.output
        assert load_image(tmp_path / "one.png").shape == (32, 32)

    def test_eval_outputs(self, pipeline, runner, generated):
        root, ds, _ = pipeline
        out = root / "eval"
        res = runner.invoke(main, [
            "eval", "--manifest", str(ds / "manifest.json"),
            "--generated", str(generated), "--out", str(out),
        ])
        assert res.exit_code == 0, res.output
        with open(out / "metrics.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["image_a", "image_b", "l1", "rmse", "psnr", "ssim"]
        assert len(rows) == 5
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) >= {"n", "l1", "rmse", "psnr", "ssim"}
        assert (out / "samples.png").exists()


class TestFeatures:
    def test_csv_and_figure(self, pipeline, runner):
        root, ds, _ = pipeline
        out = root / "feat"
        res = runner.invoke(main, [
            "features", "--manifest", str(ds / "manifest.json"), "--out", str(out),
        ])
        assert res.exit_code == 0, res.output
        with open(out / "features.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["image", "brightness", "contrast", "sharpness", "si"]
        assert len(rows) > 1
        for row in rows[1:]:
            for v in row[1:]:
                float(v)
        assert (out / "features.png").exists()


class TestAugmentStub:
    def test_stub_experiment(self, pipeline, runner):
        root, ds, _ = pipeline
        out = root / "aug"
        res = runner.invoke(main, [
            "augment-experiment", "--manifest", str(ds / "manifest.json"),
            "--scales", "1", "--out", str(out),
        ], env={"OBIDIFF_EPOCHS": "1"})
        assert res.exit_code == 0, res.output
        with open(out / "experiment.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["scale", "arm", "acc1", "acc3", "acc5"]
        assert {r[1] for r in rows[1:]} == {"duplicate", "generated"}
        assert (out / "experiment.png").exists()


class TestStudyCommands:
    def test_bundle_and_score(self, pipeline, runner, tmp_path):
        _, ds, run = pipeline
        bundle = tmp_path / "bundle"
        res = runner.invoke(main, [
            "study-bundle", "--manifest", str(ds / "manifest.json"),
            "--checkpoint", str(run / "checkpoint.pt"), "--out", str(bundle),
            "--n-real", "3", "--n-gen", "3", "--steps", "5",
        ])
        assert res.exit_code == 0, res.output
        items = json.loads((bundle / "items.json").read_text())["items"]
        assert len(items) == 6

        sessions = bundle / "sessions"
        sessions.mkdir()
        with open(sessions / "abc.jsonl", "w") as fh:
            fh.write(json.dumps({"event": "created", "timestamp": 0.0}) + "\n")
            for i, it in enumerate(items):
                fh.write(json.dumps({
                    "event": "response", "item_id": it["item_id"],
                    "choice": it["truth"], "timestamp": float(i + 1),
                }) + "\n")
        res = runner.invoke(main, [
            "study-score", "--bundle", str(bundle), "--session", "abc",
        ])
        assert res.exit_code == 0, res.output
        report = json.loads(res.output)
        assert report["f1"] == 1.0
