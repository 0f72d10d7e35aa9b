import json

import numpy as np
import pytest

from paramop.cli import main
from paramop.corpus import make_corpus
from paramop.imaging import read_png, write_png
from paramop.operators import gaussian_blur
from paramop.training import evaluate, psnr


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    for i, img in enumerate(make_corpus(8, 32, seed=0)):
        write_png(str(d / f"img{i:02d}.png"), img)
    return d


@pytest.fixture(scope="module")
def trained_model(tmp_path_factory, corpus_dir):
    d = tmp_path_factory.mktemp("model")
    cfg = {
        "operators": ["gaussian"],
        "base": {"depth": 8, "channels": 8},
        "hyper": {"mode": "norm_at", "layer": 7},
        "patch_size": 16,
        "batch_size": 1,
        "steps": 5,
        "seed": 0,
    }
    cfg_path = d / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = d / "model.dlf"
    rc = main(["train", "--config", str(cfg_path), "--corpus", str(corpus_dir), "--out", str(out)])
    assert rc == 0 and out.exists()
    return out


class TestOracleCommand:
    def test_writes_output(self, tmp_path, corpus_dir):
        src = sorted(corpus_dir.glob("*.png"))[0]
        out = tmp_path / "out.png"
        rc = main(["oracle", "--operator", "gaussian", "--gamma", "1.0", "--input", str(src), "--output", str(out)])
        assert rc == 0
        ref = gaussian_blur(read_png(str(src)), 1.0)
        got = read_png(str(out))
        assert np.abs(got - ref).max() <= 1 / 255 + 1e-9  # 8-bit quantization

    def test_invalid_lambda_exit_1(self, tmp_path, corpus_dir, capsys):
        src = sorted(corpus_dir.glob("*.png"))[0]
        rc = main(["oracle", "--operator", "l0", "--gamma", "0.0", "--input", str(src), "--output", str(tmp_path / "x.png")])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_missing_input_exit_2(self, tmp_path):
        rc = main(["oracle", "--operator", "l0", "--gamma", "0.01", "--input", "/nonexistent.png", "--output", str(tmp_path / "x.png")])
        assert rc == 2

    def test_unknown_operator_exit_1(self, tmp_path, corpus_dir):
        src = sorted(corpus_dir.glob("*.png"))[0]
        rc = main(["oracle", "--operator", "wmf", "--gamma", "1", "--input", str(src), "--output", str(tmp_path / "x.png")])
        assert rc == 1

    def test_usage_error_exit_1(self):
        assert main(["oracle", "--operator", "l0"]) == 1


class TestAnalyzeCommand:
    def test_counts_default_config(self, capsys, tmp_path):
        out = tmp_path / "counts.json"
        rc = main(["analyze", "counts", "--out", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "conv=696256" in printed
        data = json.loads(out.read_text())
        assert data["total_saved"] == 2091200

    def test_equiv_on_model(self, trained_model, capsys, tmp_path):
        # norm_at model predicts no conv kernels: reported as usage error
        rc = main(["analyze", "equiv", "--model", str(trained_model)])
        assert rc == 1

    def test_erf_runs(self, trained_model, corpus_dir, tmp_path, capsys):
        src = sorted(corpus_dir.glob("*.png"))[0]
        overlay = tmp_path / "erf.png"
        report = tmp_path / "erf.json"
        rc = main([
            "analyze", "erf", "--model", str(trained_model), "--operator", "gaussian",
            "--gamma", "1.0", "--input", str(src), "--point", "8,8",
            "--overlay", str(overlay), "--out", str(report),
        ])
        assert rc == 0 and overlay.exists()
        data = json.loads(report.read_text())
        assert data["coverage"] >= 1 and data["point"] == [8, 8]

    def test_weights_between_models(self, trained_model, capsys, tmp_path):
        rc = main([
            "analyze", "weights", "--model-a", str(trained_model), "--model-b", str(trained_model),
            "--operator", "gaussian", "--gamma", "1.0", "--out", str(tmp_path / "w.json"),
        ])
        assert rc == 0
        rows = json.loads((tmp_path / "w.json").read_text())
        assert all(r["correlation"] == pytest.approx(1.0) for r in rows)


class TestApplyCommand:
    def test_apply_reproduces_eval_psnr(self, trained_model):
        from paramop.checkpoint import load_checkpoint
        from paramop.cli import _apply_model

        ckpt = load_checkpoint(str(trained_model))
        cfg = ckpt.train_config()
        img = make_corpus(1, 16, seed=42)[0]
        pred, _ = _apply_model(ckpt, "gaussian", [1.0], img, cheap=False)
        apply_psnr = psnr(pred, gaussian_blur(img, 1.0))
        eval_psnr = evaluate(cfg, ckpt.net, [img], eval_gammas={"gaussian": [[1.0]]})[0].psnr
        assert abs(apply_psnr - eval_psnr) < 1e-4

    def test_apply_writes_png(self, trained_model, tmp_path):
        img = make_corpus(1, 16, seed=42)[0]
        src = tmp_path / "in.png"
        write_png(str(src), img)
        out = tmp_path / "out.png"
        rc = main(["apply", "--model", str(trained_model), "--operator", "gaussian", "--gamma", "1.0",
                   "--input", str(src), "--output", str(out)])
        assert rc == 0 and out.exists()
        assert read_png(str(out)).shape == (16, 16, 3)

    def test_apply_cheap_matches_full(self, trained_model, tmp_path):
        img = make_corpus(1, 16, seed=43)[0]
        src = tmp_path / "in.png"
        write_png(str(src), img)
        full = tmp_path / "full.png"
        cheap = tmp_path / "cheap.png"
        assert main(["apply", "--model", str(trained_model), "--operator", "gaussian", "--gamma", "0.8",
                     "--input", str(src), "--output", str(full)]) == 0
        assert main(["apply", "--model", str(trained_model), "--operator", "gaussian", "--gamma", "0.8",
                     "--input", str(src), "--output", str(cheap), "--cheap"]) == 0
        assert full.read_bytes() == cheap.read_bytes()

    def test_missing_model_exit_2(self, tmp_path, corpus_dir):
        src = sorted(corpus_dir.glob("*.png"))[0]
        rc = main(["apply", "--model", "/no/such.dlf", "--operator", "gaussian", "--gamma", "1",
                   "--input", str(src), "--output", str(tmp_path / "o.png")])
        assert rc == 2
