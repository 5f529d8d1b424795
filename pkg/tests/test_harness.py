import csv
import filecmp
import json

import numpy as np
import pytest
import torch

from twosubnet_tal.harness import cli
from twosubnet_tal.harness.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from twosubnet_tal.harness.config import (DataSource, ManifestError, RunManifest,
                                          align_to_dataset, train_preset)
from twosubnet_tal.harness.data import (DatasetFormatError, load_dataset, parse_annotations,
                                        read_unit_features, save_dataset, write_unit_features)
from twosubnet_tal.harness.synthetic import (GenerationError, class_patterns,
                                             generate_synthetic_dataset, preset)
from twosubnet_tal.training import build_model

SMALL = dict(num_train=4, num_test=2, frames=320)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic_dataset(preset("tiny5", **SMALL))


class TestSynthetic:
    def test_byte_identical(self, tmp_path):
        a = save_dataset(generate_synthetic_dataset(preset("tiny5", **SMALL)), tmp_path / "a")
        b = save_dataset(generate_synthetic_dataset(preset("tiny5", **SMALL, workers=3)),
                         tmp_path / "b")
        cmp = filecmp.dircmp(a, b)
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        for sub in ("features",):
            assert not filecmp.dircmp(a / sub, b / sub).diff_files

    def test_seed_changes_data(self):
        a = generate_synthetic_dataset(preset("tiny5", **SMALL))
        b = generate_synthetic_dataset(preset("tiny5", seed=1, **SMALL))
        assert a.fingerprint() != b.fingerprint()

    def test_instances_consistent(self, small):
        cfg = preset("tiny5", **SMALL)
        for v in small.videos.values():
            spans = sorted((g.interval.start_frame, g.interval.end_frame) for g in v.instances)
            assert cfg.instances[0] <= len(spans) <= cfg.instances[1]
            for (s, e) in spans:
                assert 1 <= s <= e <= v.frames
                assert cfg.duration[0] <= e - s + 1 <= cfg.duration[1]
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                assert s2 - e1 - 1 >= cfg.min_gap
            assert len(set(spans)) == len(spans)
            assert all(0 <= g.class_id < cfg.num_classes for g in v.instances)

    def test_zero_noise_patterns(self):
        cfg = preset("tiny5", noise=0.0, **SMALL)
        ds = generate_synthetic_dataset(cfg)
        patterns, _ = class_patterns(cfg)
        flat = patterns.reshape(cfg.num_classes, -1)
        checked = correct = 0
        for v in ds.videos.values():
            for g in v.instances:
                lo = (g.interval.start_frame - 1 + cfg.unit_length - 1) // cfg.unit_length
                hi = g.interval.end_frame // cfg.unit_length
                for u in range(lo, hi):  # units entirely inside the instance
                    feat = v.features[:, u, :].astype(np.float64)
                    np.testing.assert_allclose(feat, patterns[g.class_id], rtol=0, atol=1e-6)
                    pred = int(np.argmin(((flat - feat.reshape(-1)) ** 2).sum(1)))
                    checked += 1
                    correct += pred == g.class_id
        assert checked > 0 and correct == checked

    def test_actionness_tracks_instances(self, small):
        v = next(iter(small.videos.values()))
        g = v.instances[0]
        u = (g.interval.start_frame + g.interval.end_frame) // 2 // v.unit_length
        assert v.actionness[u] > 0.7 and v.actionness.min() < 0.3

    def test_packing_error(self):
        with pytest.raises(GenerationError):
            generate_synthetic_dataset(preset("tiny5", instances=(6, 6), duration=(90, 96),
                                              **SMALL))

    @pytest.mark.parametrize("bad", [dict(num_classes=1), dict(duration=(10, 5000)),
                                     dict(mode="audio")])
    def test_invalid_config(self, bad):
        with pytest.raises(GenerationError):
            preset("tiny5", **bad)

    def test_pixel_mode(self):
        ds = generate_synthetic_dataset(preset("pixel-tiny", num_train=1, num_test=1))
        v = next(iter(ds.videos.values()))
        assert v.pixels.shape == (192, 16, 16, 3) and v.pixels.dtype == np.uint8
        assert v.flow.shape == (192, 2, 16, 16)
        # flow is nonzero only while the shape moves inside an instance
        inside = np.zeros(v.frames, bool)
        for g in v.instances:
            inside[g.interval.start_frame - 1:g.interval.end_frame] = True
        assert not np.abs(v.flow[~inside]).any()


class TestFormats:
    def test_feature_file(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(2, 5, 3)).astype(np.float32)
        write_unit_features(tmp_path / "f.bin", x)
        raw = (tmp_path / "f.bin").read_bytes()
        assert raw[:4] == b"UFEA" and len(raw) == 20 + x.size * 4
        assert np.array_equal(read_unit_features(tmp_path / "f.bin"), x)

    def test_feature_file_errors(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(DatasetFormatError, match="magic"):
            read_unit_features(tmp_path / "bad.bin")
        write_unit_features(tmp_path / "t.bin", np.zeros((2, 4, 4), np.float32))
        (tmp_path / "t.bin").write_bytes((tmp_path / "t.bin").read_bytes()[:-4])
        with pytest.raises(DatasetFormatError):
            read_unit_features(tmp_path / "t.bin")

    def test_annotations(self):
        rec = {"video_id": "v", "frames": 10, "fps": 30, "instances": []}
        assert parse_annotations([rec]) == parse_annotations({"videos": [rec]})
        with pytest.raises(DatasetFormatError):
            parse_annotations([{"video_id": "v"}])

    def test_dataset_round_trip(self, small, tmp_path):
        back = load_dataset(save_dataset(small, tmp_path / "d"))
        assert back.fingerprint() == small.fingerprint()


class TestCheckpoint:
    def test_bit_exact(self, small, tmp_path):
        cfg = align_to_dataset(train_preset("tiny5"), small)
        model = build_model(cfg, small.num_classes)
        path = save_checkpoint(tmp_path / "c.pt", model, cfg, "step2", 42)
        ck = load_checkpoint(path, expected_hash=cfg.hash())
        assert (ck.phase, ck.iteration, ck.config) == ("step2", 42, cfg)
        restored = ck.build_model().state_dict()
        for k, v in model.state_dict().items():
            assert v.dtype == restored[k].dtype
            assert torch.equal(v, restored[k])

    def test_hash_mismatch(self, small, tmp_path):
        cfg = align_to_dataset(train_preset("tiny5"), small)
        path = save_checkpoint(tmp_path / "c.pt", build_model(cfg, 5), cfg, "step1", 1)
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path, expected_hash="0" * 16)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "none.pt")


class TestManifest:
    def test_round_trip(self, small, tmp_path):
        cfg = align_to_dataset(train_preset("tiny5"), small)
        m = RunManifest(cfg, DataSource.from_preset("tiny5", **SMALL), small.fingerprint())
        m.write(tmp_path / "m.json")
        back = RunManifest.read(tmp_path / "m.json")
        assert back.config == cfg
        assert back.load_dataset().fingerprint() == small.fingerprint()
        obj = json.loads((tmp_path / "m.json").read_text())
        assert obj["config"]["subnet2"]["capture"]["widths"] == list(cfg.subnet2.capture.widths)
        assert obj["config"]["weights"] == {"lambda_tiou": 1.0, "mu_reg": 1.0, "aux_weight": 1.0}

    def test_tampered(self, small, tmp_path):
        cfg = align_to_dataset(train_preset("tiny5"), small)
        obj = RunManifest(cfg, DataSource.from_preset("tiny5"), "x").to_json()
        obj["config"]["seed"] = 99
        with pytest.raises(ManifestError):
            RunManifest.from_json(obj)


FAST = ["--iterations", "2", "2", "1", "--batch-size", "16"]


class TestCli:
    def test_train_three_checkpoints(self, tmp_path):
        out = tmp_path / "r"
        assert cli.main(["train", "--preset", "tiny5", "--seed", "7", *FAST, "--out", str(out)]) == 0
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == \
            ["step1.pt", "step2.pt", "step3.pt"]
        hist = [json.loads(x) for x in (out / "history.jsonl").read_text().splitlines()]
        assert [h["phase"] for h in hist] == ["step1"] * 2 + ["step2"] * 2 + ["step3"]
        assert set(hist[0]) == {"phase", "iteration", "L_als", "L_tIoU", "L_reg", "principal",
                                "auxiliary", "total"}
        assert RunManifest.read(out / "manifest.json").config.seed == 7

    def test_manifest_records_alpha_n(self, tmp_path):
        out = tmp_path / "r"
        assert cli.main(["train", "--preset", "tiny5", "--alpha", "3", "--n", "65",
                         "--iterations", "0", "0", "0", "--out", str(out)]) == 0
        s2 = json.loads((out / "manifest.json").read_text())["config"]["subnet2"]
        assert (s2["alpha"], s2["n"]) == (3, 65)

    def test_rerun_same_loss(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["train", "--preset", "tiny5", *FAST, "--out", str(a)]) == 0
        assert cli.main(["train", "--manifest", str(a / "manifest.json"), "--out", str(b)]) == 0
        la = json.loads((a / "history.jsonl").read_text().splitlines()[-1])["total"]
        lb = json.loads((b / "history.jsonl").read_text().splitlines()[-1])["total"]
        assert abs(la - lb) <= 1e-9

    def test_env_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
        assert cli.main(["eval", "--preset", "tiny5", "--gt-as-detections"]) == 0
        assert (tmp_path / "metrics-test.csv").is_file()

    def test_gt_as_detections(self, tmp_path, capsys):
        out = tmp_path / "m.csv"
        assert cli.main(["eval", "--preset", "tiny5", "--gt-as-detections", "--average",
                         "--out", str(out)]) == 0
        rows = list(csv.reader(out.read_text().splitlines()))
        assert all(float(x) == 1.0 for x in rows[1][1:])

    def test_generate_then_train_from_dir(self, tmp_path):
        d = tmp_path / "data"
        assert cli.main(["generate", "--preset", "tiny5", "--num-train", "6", "--num-test", "2",
                         "--out", str(d)]) == 0
        assert cli.main(["train", "--data", str(d), *FAST, "--out", str(tmp_path / "r")]) == 0
        assert cli.main(["detect", "--run", str(tmp_path / "r")]) == 0
        assert (tmp_path / "r" / "detections-test.jsonl").is_file()

    def test_detect_hash_mismatch(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out, seed in ((a, "1"), (b, "2")):
            assert cli.main(["train", "--preset", "tiny5", "--seed", seed,
                             "--iterations", "0", "0", "0", "--out", str(out)]) == 0
        assert cli.main(["detect", "--checkpoint", str(a / "checkpoints" / "step3.pt"),
                         "--manifest", str(b / "manifest.json")]) == 1

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(["detect", "--checkpoint", str(tmp_path / "x.pt"),
                         "--preset", "tiny5"]) == 1

    @pytest.mark.parametrize("argv", [
        ["train"],
        ["train", "--preset", "tiny5", "--data", "x"],
        ["train", "--preset", "tiny5", "--batch-size", "12"],
        ["train", "--preset", "tiny5", "--alpha", "0"],
        ["train", "--preset", "tiny5", "--step3-mix", "0.3", "0.3"],
        ["train", "--manifest", "m.json", "--seed", "3"],
        ["train", "--preset", "nope"],
        ["sweep", "--preset", "tiny5", "--methods", "median"],
        ["frobnicate"],
    ])
    def test_usage_errors(self, argv):
        with pytest.raises(SystemExit) as info:
            cli.main(argv)
        assert info.value.code == 2

    def test_sweep_flags_short_proposals(self, tmp_path):
        out = tmp_path / "s.csv"
        assert cli.main(["sweep", "--preset", "tiny5", "--data-seed", "3", "--alphas", "1", "9",
                         "--ns", "17", "--methods", "average", "--iterations", "1", "1", "1",
                         "--batch-size", "16", "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.read_text().splitlines()))
        assert [(r["alpha"], r["n"], r["pooling"]) for r in rows] == [("1", "17", "average"),
                                                                      ("9", "17", "average")]
        by_alpha = {r["alpha"]: r for r in rows}
        # a few one- and two-unit candidates are below the 3-unit floor at any alpha
        assert by_alpha["9"]["status"] in ("flagged", "infeasible")
        assert int(by_alpha["9"]["skipped_proposals"]) > int(by_alpha["1"]["skipped_proposals"])
        assert by_alpha["1"]["total_proposals"] == by_alpha["9"]["total_proposals"]
