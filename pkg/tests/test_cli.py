"""End-to-end CLI runs at toy scale and the exit-code contract."""

import json

import numpy as np
import pytest

from sure_denoise.cli import (
    EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VALIDATION, main,
)
from sure_denoise.data import read_pgm, write_pgm


def run_cli(*argv):
    return main(list(argv))


def write_cfg(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


SYNTH = {"kind": "synthetic", "n": 24, "size": [28, 28], "image_kind": "strokes",
         "seed": 1}


def train_cfg(tmp_path, **over):
    cfg = {
        "dataset": dict(SYNTH),
        "architecture": "sda",
        "objective": "sure",
        "sigma": 25,
        "epsilon": 1e-4,
        "epochs": 1,
        "batch_size": 8,
        "output_dir": str(tmp_path / "out"),
    }
    cfg.update(over)
    return cfg


# -- exit codes --------------------------------------------------------------

def test_missing_config_file_is_config_error(tmp_path):
    assert run_cli("train", "--config", str(tmp_path / "nope.json")) == EXIT_CONFIG


def test_unknown_key_is_config_error(tmp_path):
    cfg = train_cfg(tmp_path)
    cfg["learning_rate"] = 0.1  # the field is called lr
    assert run_cli("train", "--config", write_cfg(tmp_path, "c.json", cfg)) == EXIT_CONFIG


def test_missing_required_key_is_config_error(tmp_path):
    cfg = train_cfg(tmp_path)
    del cfg["objective"]
    assert run_cli("train", "--config", write_cfg(tmp_path, "c.json", cfg)) == EXIT_CONFIG


def test_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run_cli("train", "--config", str(p)) == EXIT_CONFIG


def test_missing_data_file_is_data_error(tmp_path):
    cfg = train_cfg(tmp_path)
    cfg["dataset"] = {"kind": "mnist_idx", "images": str(tmp_path / "absent")}
    assert run_cli("train", "--config", write_cfg(tmp_path, "c.json", cfg)) == EXIT_DATA


def test_mse_gt_on_gt_free_data_is_data_error(tmp_path, capsys):
    # corrupt without clean copies, then ask for supervised training on it
    ccfg = {
        "dataset": dict(SYNTH), "sigma": 25, "seed": 3,
        "output_dir": str(tmp_path / "noisy"),
    }
    assert run_cli("corrupt", "--config", write_cfg(tmp_path, "co.json", ccfg)) == EXIT_OK
    tcfg = train_cfg(tmp_path, objective="mse_gt")
    tcfg["dataset"] = {"kind": "manifest", "path": str(tmp_path / "noisy" / "manifest.json")}
    assert run_cli("train", "--config", write_cfg(tmp_path, "t.json", tcfg)) == EXIT_DATA
    assert "ground truth" in capsys.readouterr().err


# -- corrupt -> train -> denoise -> refine pipeline --------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny end-to-end run shared by the pipeline assertions."""
    root = tmp_path_factory.mktemp("cli")
    ccfg = {
        "dataset": dict(SYNTH), "sigma": 25, "seed": 3, "include_clean": True,
        "output_dir": str(root / "noisy"),
    }
    assert run_cli("corrupt", "--config", write_cfg(root, "co.json", ccfg)) == EXIT_OK
    tcfg = {
        "dataset": {"kind": "manifest", "path": str(root / "noisy" / "manifest.json")},
        "architecture": "sda", "objective": "sure", "sigma": 25,
        "epsilon": 1e-4, "epochs": 1, "batch_size": 8,
        "output_dir": str(root / "run"),
    }
    assert run_cli("train", "--config", write_cfg(root, "t.json", tcfg)) == EXIT_OK
    return root


def test_corrupt_outputs(pipeline):
    man = json.loads((pipeline / "noisy" / "manifest.json").read_text())
    assert len(man["images"]) == 24
    assert man["noise"]["kind"] == "gaussian"
    first = man["images"][0]
    img = read_pgm(pipeline / "noisy" / first["noisy"])
    assert img.shape == (28, 28)
    assert np.isclose(first["sigma"], 25 / 255.0)


def test_train_outputs(pipeline):
    run = pipeline / "run"
    assert (run / "final.ckpt").exists()
    assert (run / "train_log.csv").exists()
    assert (run / "run_config.json").exists()  # merged config travels along
    summary = json.loads((run / "summary.json").read_text())
    assert summary["epochs_run"] == 1


def test_denoise_command(pipeline, tmp_path, capsys):
    man = json.loads((pipeline / "noisy" / "manifest.json").read_text())
    noisy = str(pipeline / "noisy" / man["images"][0]["noisy"])
    clean = str(pipeline / "noisy" / man["images"][0]["clean"])
    cfg = {
        "checkpoint": str(pipeline / "run" / "final.ckpt"),
        "images": [noisy], "gt": [clean],
        "output_dir": str(tmp_path / "den"),
    }
    assert run_cli("denoise", "--config", write_cfg(tmp_path, "d.json", cfg)) == EXIT_OK
    assert "PSNR" in capsys.readouterr().out
    outs = list((tmp_path / "den").glob("denoised_*.pgm"))
    assert len(outs) == 1 and read_pgm(outs[0]).shape == (28, 28)


def test_denoise_rejects_wrong_size(pipeline, tmp_path):
    big = tmp_path / "big.pgm"
    write_pgm(big, np.zeros((32, 32)))
    cfg = {
        "checkpoint": str(pipeline / "run" / "final.ckpt"),
        "images": [str(big)],
        "output_dir": str(tmp_path / "den2"),
    }
    assert run_cli("denoise", "--config", write_cfg(tmp_path, "d.json", cfg)) == EXIT_DATA


def test_refine_command(pipeline, tmp_path, capsys):
    man = json.loads((pipeline / "noisy" / "manifest.json").read_text())
    noisy = str(pipeline / "noisy" / man["images"][1]["noisy"])
    cfg = {
        "checkpoint": str(pipeline / "run" / "final.ckpt"),
        "image": noisy, "sigma": 25, "epochs": 2,
        "output_dir": str(tmp_path / "ref"),
    }
    assert run_cli("refine", "--config", write_cfg(tmp_path, "r.json", cfg)) == EXIT_OK
    out = capsys.readouterr().out
    assert "SURE before" in out and "SURE after" in out
    assert (tmp_path / "ref" / "denoised.pgm").exists()
    assert (tmp_path / "ref" / "refined.ckpt").exists()


# -- validate ----------------------------------------------------------------

def test_validate_unknown_suite(tmp_path):
    with pytest.raises(SystemExit):  # argparse rejects the choice
        run_cli("validate", "nope", "--output-dir", str(tmp_path))


def test_validate_divergence_small(tmp_path):
    code = run_cli(
        "validate", "divergence", "--output-dir", str(tmp_path / "v"),
        "--set", "n_draws=300",
    )
    report = json.loads((tmp_path / "v" / "report.json").read_text())
    assert (tmp_path / "v" / "report.txt").exists()
    assert code in (EXIT_OK, EXIT_VALIDATION)
    assert report[0]["test"] == "divergence"


def test_cli_overrides_take_precedence(tmp_path):
    cfg = train_cfg(tmp_path, epochs=1)
    code = run_cli(
        "train", "--config", write_cfg(tmp_path, "c.json", cfg),
        "--output-dir", str(tmp_path / "ov"), "--set", "epochs=2",
    )
    assert code == EXIT_OK
    summary = json.loads((tmp_path / "ov" / "summary.json").read_text())
    assert summary["epochs_run"] == 2
