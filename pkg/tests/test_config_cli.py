import csv
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vistr import box_ops, selftest
from vistr.cli import main
from vistr.config import ConfigError, TrainConfig, load_config, parse_config, serialize_config
from vistr.engine import MetricsLog, Sample, Trainer, TrainingDiverged, make_samples
from vistr.model import VisTR
from vistr.serialize import load_tensors
from vistr.synthdata import SynthConfig, generate_dataset
from vistr.tensor import seed_everything

TINY = """
# small enough to train in a few seconds
train.epochs = 2
train.lr_drop_epoch = 1
train.lr_transformer = 0.0005
train.lr_backbone = 0.0001
train.seed = 5
model.d = 12
model.heads = 2
model.n = 3
model.T = 2
model.encoder_layers = 1
model.decoder_layers = 1
model.ffn_dim = 16
model.mask_channels = 4
model.fusion_channels = 4
data.num_clips = 2
data.T = 2
data.height = 32
data.width = 48
data.size_min = 5
data.size_max = 8
data.capacity = 3
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY)
    return path


@pytest.fixture
def tiny_data(tmp_path, tiny_config):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_round_trip(self):
        cfg = parse_config(TINY, env={})
        assert parse_config(serialize_config(cfg), env={}) == cfg

    @settings(max_examples=50, deadline=None)
    @given(
        lr=st.floats(1e-7, 1e-2),
        seed=st.integers(0, 2**31),
        mode=st.sampled_from(["video", "frame", "instance", "prediction"]),
        pos=st.booleans(),
        bg=st.floats(0, 1),
    )
    def test_round_trip_property(self, lr, seed, mode, pos, bg):
        cfg = TrainConfig()
        cfg.lr_transformer = lr
        cfg.lr_backbone = lr / 10
        cfg.seed = seed
        cfg.model.query_mode = mode
        cfg.model.use_positional = pos
        cfg.loss.background_class_weight = bg
        assert parse_config(serialize_config(cfg), env={}) == cfg

    def test_long_schedule_expressible(self):
        cfg = parse_config("train.lr_transformer = 1e-4\nlr_backbone = 1e-5\nepochs = 18\nlr_drop_epoch = 12", env={})
        cfg.validate()
        assert (cfg.lr_transformer, cfg.lr_backbone, cfg.epochs, cfg.lr_drop_epoch) == (1e-4, 1e-5, 18, 12)

    def test_seed_from_environment_only(self):
        cfg = parse_config("train.seed = 3\nmodel.d = 48", env={"VISTR_SEED": "11", "VISTR_MODEL_D": "24"})
        assert cfg.seed == 11 and cfg.model.d == 48

    @pytest.mark.parametrize(
        "text, match",
        [
            ("model.width = 3", "unknown key"),
            ("optim.lr = 3", "unknown section"),
            ("model.d = many", "model.d"),
            ("train.deterministic = maybe", "deterministic"),
            ("just words", "line 1"),
        ],
    )
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text, env={})

    def test_backbone_lr_bound(self):
        cfg = parse_config("lr_backbone = 0.01", env={})
        with pytest.raises(ConfigError, match="lr_backbone"):
            cfg.validate()

    def test_load_from_file(self, tiny_config):
        assert load_config(tiny_config, env={}).model.d == 12


class TestGenData:
    def test_default_dataset(self, tmp_path):
        out = tmp_path / "d"
        assert main(["gen-data", "--out", str(out)]) == 0
        doc = json.loads((out / "annotations.json").read_text())
        assert len(doc["videos"]) == 8
        counts = {v["id"]: 0 for v in doc["videos"]}
        for a in doc["annotations"]:
            counts[a["video_id"]] += 1
        assert set(counts.values()) <= {2, 3}
        assert (out / "frames" / "clip_0000" / "005.bin").exists()

    def test_rerun_is_byte_identical(self, tmp_path, tiny_config):
        for name in ("a", "b"):
            assert main(["gen-data", "--config", str(tiny_config), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a/annotations.json").read_bytes() == (tmp_path / "b/annotations.json").read_bytes()

    def test_capacity_violation(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("data.instance_max = 9")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1
        assert "capacity" in capsys.readouterr().err


class TestTrain:
    def test_zero_epochs_saves_initialisation(self, tmp_path, tiny_config, tiny_data):
        cfg_path = tmp_path / "zero.txt"
        cfg_path.write_text(TINY + "train.epochs = 0\n")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--data", str(tiny_data), "--out", str(out)]) == 0
        cfg = load_config(cfg_path, env={})
        seed_everything(cfg.seed)
        expected = VisTR(cfg.model).state_dict()
        stored = load_tensors(out / "checkpoint.bin")
        assert list(stored) == list(expected)
        for name, value in expected.items():
            assert np.array_equal(stored[name], value.numpy()), name

    def test_deterministic_runs_match(self, tmp_path, tiny_config, tiny_data):
        for name in ("a", "b"):
            args = ["train", "--config", str(tiny_config), "--data", str(tiny_data), "--out", str(tmp_path / name)]
            assert main(args + ["--deterministic"]) == 0
        assert (tmp_path / "a/checkpoint.bin").read_bytes() == (tmp_path / "b/checkpoint.bin").read_bytes()
        assert (tmp_path / "a/metrics.csv").read_text() == (tmp_path / "b/metrics.csv").read_text()

    def test_metrics_and_schedule(self, tmp_path, tiny_config, tiny_data):
        out = tmp_path / "run"
        assert main(["train", "--config", str(tiny_config), "--data", str(tiny_data), "--out", str(out)]) == 0
        with (out / "metrics.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "total", "class_nll", "box", "mask", "lr"]
        assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
        assert [float(r["lr"]) for r in rows] == pytest.approx([5e-4, 5e-4, 5e-5, 5e-5])
        for r in rows:
            parts = float(r["class_nll"]) + float(r["box"]) + float(r["mask"])
            assert float(r["total"]) == pytest.approx(parts, rel=1e-6)
        saved = load_config(out / "config.txt", env={})
        assert saved.model.d == 12 and saved.dataset == str(tiny_data)

    def test_generated_data_when_no_dataset(self, tmp_path, tiny_config):
        assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "run")]) == 0
        assert (tmp_path / "run" / "checkpoint.bin").exists()

    def test_clip_length_mismatch(self, tmp_path, tiny_config, tiny_data, capsys):
        cfg_path = tmp_path / "t3.txt"
        cfg_path.write_text(TINY + "model.T = 3\n")
        assert main(["train", "--config", str(cfg_path), "--data", str(tiny_data), "--out", str(tmp_path / "r")]) == 1
        assert "model.T" in capsys.readouterr().err


class TestTrainerInternals:
    @pytest.fixture
    def trainer(self, tmp_path):
        cfg = parse_config(TINY, env={})
        return Trainer(cfg, make_samples(*generate_dataset(cfg.data)), tmp_path / "run")

    def test_parameter_groups(self, trainer):
        groups = trainer.optimizer.param_groups
        assert [g["lr"] for g in groups] == [5e-4, 1e-4]
        backbone = {id(p) for p in trainer.model.backbone.parameters()}
        assert {id(p) for p in groups[1]["params"]} == backbone
        assert all(g["weight_decay"] == 1e-4 for g in groups)
        assert isinstance(trainer.optimizer, torch.optim.AdamW)

    def test_random_frame_order_is_a_permutation(self, trainer):
        trainer.cfg.frame_order = "random"
        orders = {tuple(trainer._frame_order(6)) for _ in range(20)}
        assert all(sorted(o) == list(range(6)) for o in orders)
        assert len(orders) > 1
        trainer.cfg.frame_order = "in_order"
        assert trainer._frame_order(4) == [0, 1, 2, 3]

    def test_divergence_dump(self, trainer):
        bad = trainer.samples[1]
        frames = bad.frames.clone()
        frames[0, 0, 0, 0] = math.nan
        with pytest.raises(TrainingDiverged, match=bad.clip_id):
            trainer.train_step(Sample(bad.clip_id, frames, bad.targets, bad.truths))
        dump = json.loads((trainer.out_dir / "divergence.json").read_text())
        assert dump["batch_id"] == bad.clip_id

    def test_metrics_steps_must_increase(self, tmp_path):
        log = MetricsLog(tmp_path)
        row = {"total": 1.0, "class_nll": 1.0, "box": 0.0, "mask": 0.0}
        log.log_step(1, row, 0.1)
        with pytest.raises(ValueError):
            log.log_step(1, row, 0.1)


class TestInferEval:
    @pytest.fixture
    def trained(self, tmp_path, tiny_config, tiny_data):
        out = tmp_path / "run"
        assert main(["train", "--config", str(tiny_config), "--data", str(tiny_data), "--out", str(out)]) == 0
        return out

    def test_infer_then_eval(self, tmp_path, trained, tiny_data, capsys):
        results = tmp_path / "results.json"
        args = ["infer", "--config", str(trained / "config.txt"), "--checkpoint", str(trained / "checkpoint.bin")]
        assert main(args + ["--data", str(tiny_data), "--out", str(results)]) == 0
        doc = json.loads(results.read_text())
        per_video = {}
        for r in doc:
            per_video[r["video_id"]] = per_video.get(r["video_id"], 0) + 1
            assert len(r["rle_masks"]) == 2 and sum(r["rle_masks"][0]) == 32 * 48
        assert all(k <= 3 for k in per_video.values())
        capsys.readouterr()
        report = tmp_path / "report.json"
        assert main(["eval", "--results", str(results), "--annotations", str(tiny_data), "--out", str(report)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed == json.loads(report.read_text())
        assert set(printed) == {"AP", "AP50", "AP75", "AR1", "AR10"}

    def test_infer_on_empty_dataset(self, tmp_path, tiny_config, trained):
        cfg = tmp_path / "empty.txt"
        cfg.write_text(TINY + "data.num_clips = 0\n")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 0
        out = tmp_path / "r.json"
        args = ["infer", "--config", str(tiny_config), "--checkpoint", str(trained / "checkpoint.bin")]
        assert main(args + ["--data", str(tmp_path / "empty"), "--out", str(out)]) == 0
        assert json.loads(out.read_text()) == []

    def test_checkpoint_config_mismatch(self, tmp_path, trained, tiny_data, capsys):
        cfg = tmp_path / "wide.txt"
        cfg.write_text(TINY + "model.d = 24\n")
        args = ["infer", "--config", str(cfg), "--checkpoint", str(trained / "checkpoint.bin"), "--data", str(tiny_data)]
        assert main(args + ["--out", str(tmp_path / "r.json")]) == 1
        assert "input_proj.weight" in capsys.readouterr().err


class TestEvalCommand:
    def _truth_as_results(self, annotations):
        doc = json.loads(annotations.read_text())
        return [
            {"video_id": a["video_id"], "category_id": a["category_id"], "score": 1.0, "rle_masks": a["rle_masks"]}
            for a in doc["annotations"]
        ]

    def test_truth_as_results(self, tmp_path, tiny_data, capsys):
        res = tmp_path / "res.json"
        res.write_text(json.dumps(self._truth_as_results(tiny_data / "annotations.json")))
        assert main(["eval", "--results", str(res), "--annotations", str(tiny_data / "annotations.json")]) == 0
        assert json.loads(capsys.readouterr().out)["AP"] == 1.0

    def test_empty_results(self, tmp_path, tiny_data, capsys):
        res = tmp_path / "res.json"
        res.write_text("[]")
        assert main(["eval", "--results", str(res), "--annotations", str(tiny_data)]) == 0
        assert json.loads(capsys.readouterr().out)["AP"] == 0.0

    def test_fixture_pair(self, capsys):
        from pathlib import Path
        from fractions import Fraction

        pair = Path(__file__).parent / "fixtures" / "eval_pair"
        assert main(["eval", "--results", str(pair / "results.json"), "--annotations", str(pair / "annotations.json")]) == 0
        report = json.loads(capsys.readouterr().out)
        expected = json.loads((pair / "expected.json").read_text())["report"]
        assert report == {k: float(Fraction(v)) for k, v in expected.items()}

    def test_malformed_results(self, tmp_path, tiny_data, capsys):
        res = tmp_path / "res.json"
        res.write_text('[{"video_id": "clip_0000"}]')
        assert main(["eval", "--results", str(res), "--annotations", str(tiny_data)]) == 1
        assert "category_id" in capsys.readouterr().err


class TestSelftest:
    def test_passes(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == len(selftest.SUITES)

    def test_giou_mutant_is_caught(self, monkeypatch):
        def off_by_one(a, b):
            # pixel-style "+1" widths, a classic off-by-one
            wa = a.clone()
            wa[..., 2:] = wa[..., 2:] + 1
            wb = b.clone()
            wb[..., 2:] = wb[..., 2:] + 1
            return original(wa, wb)

        original = box_ops.generalized_iou
        monkeypatch.setattr(box_ops, "generalized_iou", off_by_one)
        lines = []
        assert selftest.run(lines.append) is False
        assert any(line.startswith("FAIL scalar-oracles") for line in lines)
