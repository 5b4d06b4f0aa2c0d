"""Desk-scale training protocol shared by the acceptance tests.

One network/objective combination per named run, all under the same budget:
10,000 synthetic 28x28 stroke images, 30 epochs, batch 200, Adam 1e-3.
Finished runs are cached on disk (checkpoint + summary keyed by a config
hash), so repeated pytest invocations do not retrain.

Set SURE_DENOISE_RUN_CACHE to relocate the cache directory.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from sure_denoise.data import Dataset, generate_synthetic, psnr
from sure_denoise.nets import build_sda
from sure_denoise.noise import NoiseSpec, Rng, corrupt_gaussian, corrupt_poisson
from sure_denoise.risk import RiskObjective
from sure_denoise.train import TrainConfig, denoise_batched, restore, train

CACHE_DIR = Path(os.environ.get(
    "SURE_DENOISE_RUN_CACHE", str(Path(__file__).parent / "_run_cache")
))

SIGMA25 = 25.0 / 255.0
N_TRAIN = 10_000
N_TEST = 1_000
EPOCHS = 30
BATCH = 200
TRAIN_DATA_SEED = 11
TEST_DATA_SEED = 12
TEST_NOISE_SEED = 123
TRAIN_SEED = 0

# name -> (objective kwargs, corruption spec)
RUNS = {
    "mse_gt_g25": dict(
        objective=RiskObjective("mse_gt", sigma=SIGMA25),
        noise=NoiseSpec("gaussian", sigma=SIGMA25),
    ),
    "sure_e4": dict(
        objective=RiskObjective("sure", sigma=SIGMA25, epsilon=1e-4),
        noise=NoiseSpec("gaussian", sigma=SIGMA25),
    ),
    "sure_e2": dict(
        objective=RiskObjective("sure", sigma=SIGMA25, epsilon=1e-2),
        noise=NoiseSpec("gaussian", sigma=SIGMA25),
    ),
    "sure_e7": dict(
        objective=RiskObjective("sure", sigma=SIGMA25, epsilon=1e-7),
        noise=NoiseSpec("gaussian", sigma=SIGMA25),
    ),
    "mse_reg_g25": dict(
        objective=RiskObjective("mse_reg", sigma=SIGMA25),
        noise=NoiseSpec("gaussian", sigma=SIGMA25),
    ),
    "pure_z10": dict(
        objective=RiskObjective("pure", zeta=0.1),
        noise=NoiseSpec("poisson", zeta=0.1),
    ),
    "pure_z01": dict(
        objective=RiskObjective("pure", zeta=0.01),
        noise=NoiseSpec("poisson", zeta=0.01),
    ),
    "mse_gt_p10": dict(
        objective=RiskObjective("mse_gt"),
        noise=NoiseSpec("poisson", zeta=0.1),
    ),
    "mse_gt_p01": dict(
        objective=RiskObjective("mse_gt"),
        noise=NoiseSpec("poisson", zeta=0.01),
    ),
}


def train_dataset() -> Dataset:
    return generate_synthetic(N_TRAIN, (28, 28), "strokes", TRAIN_DATA_SEED)


def test_images() -> np.ndarray:
    return generate_synthetic(N_TEST, (28, 28), "strokes", TEST_DATA_SEED).clean


def corrupt_test(clean: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    rng = Rng(TEST_NOISE_SEED)
    if noise.kind == "gaussian":
        return corrupt_gaussian(clean, noise.sigma, rng)
    return corrupt_poisson(clean, noise.zeta, rng)


def _config_hash(name: str) -> str:
    spec = RUNS[name]
    payload = json.dumps({
        "name": name,
        "objective": vars(spec["objective"]),
        "noise": vars(spec["noise"]),
        "n_train": N_TRAIN, "n_test": N_TEST,
        "epochs": EPOCHS, "batch": BATCH,
        "seeds": [TRAIN_DATA_SEED, TEST_DATA_SEED, TEST_NOISE_SEED, TRAIN_SEED],
    }, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def ensure_run(name: str) -> dict:
    """Train (or load from cache) the named run; returns its summary dict
    with test_psnr, noisy_psnr and the checkpoint path."""
    spec = RUNS[name]
    out = CACHE_DIR / name
    summary_path = out / "summary.json"
    h = _config_hash(name)
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        if summary.get("config_hash") == h and Path(summary["checkpoint"]).exists():
            return summary

    out.mkdir(parents=True, exist_ok=True)
    ds = train_dataset()
    cfg = TrainConfig(
        objective=spec["objective"], epochs=EPOCHS, batch_size=BATCH,
        lr=1e-3, seed=TRAIN_SEED, noise=spec["noise"],
    )
    d = build_sda(seed=TRAIN_SEED)
    ckpt, history = train(d, ds, cfg, out_dir=out)

    clean = test_images()
    noisy = corrupt_test(clean, spec["noise"])
    denoised = denoise_batched(restore(ckpt), noisy)
    summary = {
        "name": name,
        "config_hash": h,
        "checkpoint": str(out / "final.ckpt"),
        "test_psnr": psnr(denoised, clean),
        "noisy_psnr": psnr(np.clip(noisy, 0, 1), clean),
        "epochs_run": len(history),
        "final_loss": history[-1]["loss"] if history else None,
    }
    summary_path.write_text(json.dumps(summary, indent=2))
    return summary


if __name__ == "__main__":
    import sys
    names = sys.argv[1:] or list(RUNS)
    for n in names:
        s = ensure_run(n)
        print(f"{n}: test_psnr={s['test_psnr']:.3f} dB (noisy {s['noisy_psnr']:.2f})",
              flush=True)
