import os

import numpy as np
import pytest

from nxnflow import checkpoint as ckpt_io
from nxnflow.cli import main
from nxnflow.config import RunConfig, parse_kv_lines
from nxnflow.data import load_images, load_points_csv
from nxnflow.errors import ConfigError
from nxnflow.model import ModelConfig, MultiScaleModel
from nxnflow.suites import random_small_model
from nxnflow.tensor import Rng

RANK2_CFG = """
# tiny toy run
model.mode = rank2
model.dim = 2
model.depth_k = 2
model.levels = 1
model.hidden_width = 8
train.batch_size = 32
train.steps = 5
train.seed = 11
data.kind = eight_gaussians
data.n = 256
"""

IMAGE_CFG = """
model.mode = image
model.channels = 3
model.height = 8
model.width = 8
model.depth_k = 1
model.levels = 2
model.hidden_width = 8
model.bits = 5
train.batch_size = 16
train.steps = 3
train.seed = 5
data.kind = textures
data.n = 64
"""


def write_cfg(tmp_path, text, name="cfg.txt"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestConfigParsing:
    def test_comments_and_values(self):
        entries = parse_kv_lines("# hi\nmodel.dim = 3  # trailing\n\ntrain.lr = 0.5\n")
        assert entries == {"model.dim": "3", "train.lr": "0.5"}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="nope"):
            RunConfig({"model.nope": "1"})

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError, match="train.lr"):
            RunConfig({"train.lr": "fast"})

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_kv_lines("just a line without equals")


class TestCheckpointFormat:
    def test_bit_exact_roundtrip(self, tmp_path):
        model = random_small_model(Rng(0))
        ck = ckpt_io.Checkpoint(
            config_text=model.config.to_text(), step=7,
            params=ckpt_io.snapshot_params(model),
            adam_t=3,
            adam_m={k: np.zeros_like(v) for k, v in model.param_tree().items()},
            adam_v={k: np.ones_like(v) for k, v in model.param_tree().items()},
            rng_state=Rng(1).state_json())
        p = tmp_path / "m.nxnf"
        ckpt_io.save(ck, p)
        raw1 = p.read_bytes()
        loaded = ckpt_io.load(p)
        ckpt_io.save(loaded, p)
        assert p.read_bytes() == raw1
        assert loaded.step == 7 and loaded.adam_t == 3
        for k, v in ck.params.items():
            np.testing.assert_array_equal(loaded.params[k], v)

    def test_mismatched_config_refused(self, tmp_path):
        model = random_small_model(Rng(0))
        ck = ckpt_io.Checkpoint(model.config.to_text(), 0,
                                ckpt_io.snapshot_params(model),
                                None, {}, {}, Rng(0).state_json())
        other = MultiScaleModel(ModelConfig(mode="rank2", dim=2, depth_k=1,
                                            levels=1, hidden_width=8), Rng(0))
        with pytest.raises(ConfigError):
            ckpt_io.restore_model(ck, other)

    def test_restored_forward_identical(self, tmp_path):
        model = random_small_model(Rng(3))
        p = tmp_path / "m.nxnf"
        ck = ckpt_io.Checkpoint(model.config.to_text(), 0,
                                ckpt_io.snapshot_params(model),
                                None, {}, {}, Rng(0).state_json())
        ckpt_io.save(ck, p)
        fresh = MultiScaleModel(model.config, Rng(99))
        ckpt_io.restore_model(ckpt_io.load(p), fresh)
        x = Rng(4).normal((2, 2, 4, 4))
        np.testing.assert_array_equal(model.forward(x).logdet, fresh.forward(x).logdet)


class TestTrainCommand:
    def test_smoke_and_artifacts(self, tmp_path):
        cfg = write_cfg(tmp_path, RANK2_CFG)
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--set", "train.steps=1",
                     "--out", str(out)]) == 0
        ck = ckpt_io.load(out / "checkpoint.nxnf")
        assert ck.step == 1
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "step,nll_nats,bpd,grad_norm,seconds"
        assert len(lines) == 2

    def test_determinism_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path, RANK2_CFG)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", cfg, "--out", str(a)]) == 0
        assert main(["train", "--config", cfg, "--out", str(b)]) == 0
        assert (a / "checkpoint.nxnf").read_bytes() == (b / "checkpoint.nxnf").read_bytes()

    def test_resume_continues_step_numbering(self, tmp_path):
        cfg = write_cfg(tmp_path, RANK2_CFG)
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        assert main(["train", "--config", cfg, "--out", str(out),
                     "--resume", str(out / "checkpoint.nxnf")]) == 0
        rows = (out / "metrics.csv").read_text().strip().splitlines()[1:]
        steps = [int(r.split(",")[0]) for r in rows]
        assert steps == list(range(1, 11))

    def test_bad_config_exit_code(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, RANK2_CFG + "model.bogus = 1\n")
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
        assert "model.bogus" in capsys.readouterr().err

    def test_no_partial_output_on_config_error(self, tmp_path):
        cfg = write_cfg(tmp_path, RANK2_CFG + "data.kind = nxni\n")
        out = tmp_path / "never"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 2
        assert not out.exists()


class TestEvalCommand:
    @pytest.fixture()
    def trained(self, tmp_path):
        cfg = write_cfg(tmp_path, RANK2_CFG)
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        return str(out / "checkpoint.nxnf")

    def test_eval_deterministic(self, trained, tmp_path, capsys):
        args = ["eval", "--checkpoint", trained, "--data", "eight_gaussians",
                "--n", "128", "--seed", "3"]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        assert capsys.readouterr().out == first
        assert first.startswith("nll_nats=")

    def test_eval_csv_output(self, trained, tmp_path):
        out = tmp_path / "eval.csv"
        assert main(["eval", "--checkpoint", trained, "--data", "eight_gaussians",
                     "--n", "64", "--seed", "1", "--out", str(out)]) == 0
        assert out.read_text().startswith("nll_nats,bpd\n")


class TestSampleCommand:
    @pytest.fixture()
    def trained_image(self, tmp_path):
        cfg = write_cfg(tmp_path, IMAGE_CFG)
        out = tmp_path / "img_run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        return str(out / "checkpoint.nxnf")

    def test_rank2_csv_samples(self, tmp_path):
        cfg = write_cfg(tmp_path, RANK2_CFG)
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        dst = tmp_path / "s.csv"
        ck = str(out / "checkpoint.nxnf")
        assert main(["sample", "--checkpoint", ck, "--n", "10",
                     "--seed", "2", "--out", str(dst)]) == 0
        assert load_points_csv(dst).shape == (10, 2)
        # determinism
        dst2 = tmp_path / "s2.csv"
        assert main(["sample", "--checkpoint", ck, "--n", "10",
                     "--seed", "2", "--out", str(dst2)]) == 0
        assert dst.read_bytes() == dst2.read_bytes()

    def test_empty_sample_artifact(self, tmp_path):
        cfg = write_cfg(tmp_path, RANK2_CFG)
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(out)]) == 0
        dst = tmp_path / "none.csv"
        assert main(["sample", "--checkpoint", str(out / "checkpoint.nxnf"),
                     "--n", "0", "--seed", "1", "--out", str(dst)]) == 0
        assert load_points_csv(dst).shape[0] == 0

    def test_image_samples_with_montage(self, trained_image, tmp_path):
        dst = tmp_path / "samples.nxni"
        assert main(["sample", "--checkpoint", trained_image, "--n", "4",
                     "--temperature", "0.7", "--seed", "8", "--out", str(dst)]) == 0
        ds = load_images(dst)
        assert ds.images.shape == (4, 3, 8, 8)
        assert ds.bits == 5
        assert os.path.exists(str(dst) + ".ppm")


class TestVerifyCommand:
    def test_conv_equiv_passes(self, capsys):
        assert main(["verify", "--suite", "conv_equiv", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "conv_reformulation,pass" in out

    def test_report_stable_across_runs(self, capsys):
        main(["verify", "--suite", "normalization", "--seed", "4"])
        a = capsys.readouterr().out
        main(["verify", "--suite", "normalization", "--seed", "4"])
        assert capsys.readouterr().out == a

    def test_threads_env_validated(self, monkeypatch):
        monkeypatch.setenv("NXNFLOW_THREADS", "zero")
        from nxnflow.cli import worker_cap
        with pytest.raises(ConfigError):
            worker_cap()
        monkeypatch.setenv("NXNFLOW_THREADS", "2")
        assert worker_cap() == 2
