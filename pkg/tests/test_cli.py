import numpy as np
import pytest

from padflow.cli import main
from padflow.invconv import ConvKernel
from padflow.model import FlowModel, ModelConfig, load_model, save_model
from padflow.tensorio import read_image, save_kernel


def write_config(path, **overrides):
    base = {
        "dataset": "checkerboard",
        "height": "8",
        "width": "8",
        "channels": "1",
        "dataset_size": "48",
        "epochs": "2",
        "batch_size": "16",
        "levels": "2",
        "depth": "1",
        "hidden": "8",
        "coupling": "quad",
        "log_timing": "0",
    }
    base.update({k: str(v) for k, v in overrides.items()})
    path.write_text("".join(f"{k}={v}\n" for k, v in base.items()))
    return path


class TestTrainCommand:
    def test_missing_config_exit_1(self, tmp_path, capsys):
        missing = tmp_path / "nope.cfg"
        assert main(["train", "--config", str(missing)]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_csv_has_one_row_per_epoch(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = write_config(tmp_path / "run.cfg", epochs=3)
        assert main(["train", "--config", str(cfg), "--seed", "1"]) == 0
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 3

    def test_identical_runs_byte_identical_csv(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = write_config(tmp_path / "run.cfg")
        assert main(["train", "--config", str(cfg), "--seed", "5"]) == 0
        first = (tmp_path / "metrics.csv").read_bytes()
        assert main(["train", "--config", str(cfg), "--seed", "5"]) == 0
        assert (tmp_path / "metrics.csv").read_bytes() == first

    def test_divergence_exit_2(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        cfg = write_config(tmp_path / "run.cfg", lr="1e9", epochs="8", scale_bound="60")
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["train", "--config", str(cfg), "--seed", "0"])
        err = capsys.readouterr().err
        assert code == 2, err
        assert "error" in err


class TestEvalCommand:
    def test_eval_is_seed_deterministic(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        cfg = write_config(tmp_path / "run.cfg")
        main(["train", "--config", str(cfg), "--seed", "2"])
        capsys.readouterr()
        assert main(["eval", "--checkpoint", "model.ckpt", "--config", str(cfg),
                     "--seed", "7"]) == 0
        out1 = capsys.readouterr().out
        main(["eval", "--checkpoint", "model.ckpt", "--config", str(cfg), "--seed", "7"])
        assert capsys.readouterr().out == out1

    def test_eval_matches_final_training_row(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        cfg = write_config(tmp_path / "run.cfg")
        main(["train", "--config", str(cfg), "--seed", "4"])
        final_bpd = float((tmp_path / "metrics.csv").read_text()
                          .strip().splitlines()[-1].split(",")[2])
        capsys.readouterr()
        main(["eval", "--checkpoint", "model.ckpt", "--config", str(cfg), "--seed", "5"])
        printed = float(capsys.readouterr().out.split()[1])
        assert printed == pytest.approx(final_bpd, abs=1e-9)

    def test_shape_mismatch_exit_1(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        cfg = write_config(tmp_path / "run.cfg")
        main(["train", "--config", str(cfg), "--seed", "0"])
        other = write_config(tmp_path / "other.cfg", height=16, width=16)
        capsys.readouterr()
        assert main(["eval", "--checkpoint", "model.ckpt", "--config", str(other)]) == 1


class TestSampleCommand:
    def test_zero_temperature_identity_model_emits_black(self, tmp_path, capsys):
        config = ModelConfig(8, 8, 1, levels=2, depth=1, coupling="quad",
                             hidden=8, init="identity")
        ckpt = tmp_path / "identity.ckpt"
        save_model(ckpt, FlowModel(config))
        out = tmp_path / "samples"
        assert main(["sample", "--checkpoint", str(ckpt), "-n", "2",
                     "--temperature", "0", "--out", str(out), "--seed", "0"]) == 0
        img = read_image(out / "sample_0000.pgm")
        np.testing.assert_array_equal(img, 0)
        assert "in" in capsys.readouterr().out  # timing line

    def test_samples_have_finite_logprob(self, tmp_path):
        rng = np.random.default_rng(0)
        config = ModelConfig(8, 8, 1, levels=2, depth=1, coupling="quad",
                             hidden=8, init="identity")
        model = FlowModel(config, rng)
        for _, p in model.named_params():
            p += rng.normal(0, 0.05, size=p.shape)
        ckpt = tmp_path / "m.ckpt"
        save_model(ckpt, model)
        out = tmp_path / "s"
        assert main(["sample", "--checkpoint", str(ckpt), "-n", "4",
                     "--out", str(out), "--seed", "3"]) == 0
        reloaded = load_model(ckpt)
        pixels = np.stack([
            read_image(out / f"sample_{i:04d}.pgm") for i in range(4)
        ])
        from padflow.training import dequantize
        x = dequantize(pixels, np.random.default_rng(0))
        logp, _ = reloaded.logprob(x)
        assert np.all(np.isfinite(logp))

    def test_corrupt_checkpoint_exit_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert main(["sample", "--checkpoint", str(bad)]) == 1


class TestCheckCommand:
    def test_identity_kernel_report(self, tmp_path, capsys):
        path = tmp_path / "id.tensor"
        save_kernel(path, ConvKernel.identity(3, 1))
        assert main(["check", str(path)]) == 0
        out = capsys.readouterr().out
        assert "invertible; logdet/pixel = 0" in out
        assert "masked-triangular pass" in out

    def test_zero_tap_reported_singular(self, tmp_path, capsys):
        w = np.random.default_rng(0).normal(size=(3, 3, 1, 1))
        w[2, 2, 0, 0] = 0.0
        path = tmp_path / "z.tensor"
        save_kernel(path, ConvKernel(w, "masked"))
        assert main(["check", str(path)]) == 0
        out = capsys.readouterr().out
        assert "singular: zero diagonal tap" in out

    def test_singular_block_reported_with_oracle(self, tmp_path, capsys):
        w = np.zeros((3, 3, 2, 2))
        w[2, 2] = 1.0
        path = tmp_path / "b.tensor"
        save_kernel(path, ConvKernel(w, "block"))
        assert main(["check", str(path)]) == 0
        out = capsys.readouterr().out
        assert "singular block" in out
        assert "oracle det" in out

    def test_dump_writes_matrix(self, tmp_path, capsys):
        from padflow.tensorio import load_tensor
        path = tmp_path / "id.tensor"
        save_kernel(path, ConvKernel.identity(3, 1))
        dump = tmp_path / "m.tensor"
        assert main(["check", str(path), "--dump", str(dump)]) == 0
        np.testing.assert_array_equal(load_tensor(dump), np.eye(16))

    def test_malformed_fixture_exit_1(self, tmp_path):
        bad = tmp_path / "bad.tensor"
        bad.write_bytes(b"garbage")
        assert main(["check", str(bad)]) == 1


class TestBenchCommand:
    def test_bench_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--sizes", "8x8x2", "--repetitions", "5",
                     "--batch", "4", "--seed", "0", "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "method,H,W,C,mean_s,std_s,ratio_vs_ours"
        assert any(line.startswith("emerging,8,8,2") for line in lines)

    def test_bad_size_exit_1(self, capsys):
        assert main(["bench", "--sizes", "8x8"]) == 1
