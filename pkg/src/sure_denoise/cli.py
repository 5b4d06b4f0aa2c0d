"""Command-line entry point.

    sure-denoise {corrupt|train|refine|denoise|validate} --config <path> [overrides]

Commands are configured by a strict JSON document (unknown keys rejected);
selected flags override config fields one-to-one. Exit codes are a stable
contract: 0 success, 2 config error, 3 data error, 4 numerical abort,
5 validation failure.

Heavy imports happen after thread setup so --threads (or the
SURE_DENOISE_THREADS env var) can cap BLAS parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_VALIDATION = 5

VALIDATE_SUITES = ("divergence", "unbiasedness", "pure", "epsilon")


def _check_keys(cfg: dict, allowed, required, ctx: str):
    from .errors import ConfigError

    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"{ctx}: unknown config keys {sorted(unknown)}")
    missing = set(required) - set(cfg)
    if missing:
        raise ConfigError(f"{ctx}: missing required config keys {sorted(missing)}")


def _load_config(path) -> dict:
    from .errors import ConfigError

    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {p} must be a JSON object")
    return cfg


def _prepare_out_dir(cfg: dict, config_path) -> Path:
    from .errors import ConfigError

    out = cfg.get("output_dir")
    if not out:
        raise ConfigError("output_dir is required (config field or --output-dir)")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    # reproducibility: the exact merged config travels with the results
    (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    if config_path is not None and Path(config_path).exists():
        shutil.copy(config_path, out / Path(config_path).name)
    return out


_DATASET_KEYS = {
    "kind", "n", "size", "image_kind", "seed",
    "images", "labels", "subset", "offset", "path",
}


def _load_dataset(dcfg: dict):
    from .data import Dataset, generate_synthetic, load_mnist_idx, read_pgm
    from .errors import ConfigError
    import numpy as np

    if not isinstance(dcfg, dict) or "kind" not in dcfg:
        raise ConfigError("dataset: must be an object with a 'kind' field")
    _check_keys(dcfg, _DATASET_KEYS, {"kind"}, "dataset")
    kind = dcfg["kind"]
    if kind == "synthetic":
        _check_keys(dcfg, _DATASET_KEYS, {"kind", "n", "size", "image_kind"}, "dataset")
        h, w = dcfg["size"]
        return generate_synthetic(
            int(dcfg["n"]), (int(h), int(w)), dcfg["image_kind"],
            int(dcfg.get("seed", 0)),
        )
    if kind == "mnist_idx":
        _check_keys(dcfg, _DATASET_KEYS, {"kind", "images"}, "dataset")
        ds = load_mnist_idx(dcfg["images"], dcfg.get("labels"))
        off = int(dcfg.get("offset", 0))
        if "subset" in dcfg:
            ds.clean = ds.clean[off:off + int(dcfg["subset"])]
            if ds.labels is not None:
                ds.labels = ds.labels[off:off + int(dcfg["subset"])]
        elif off:
            ds.clean = ds.clean[off:]
        return ds
    if kind == "manifest":
        _check_keys(dcfg, _DATASET_KEYS, {"kind", "path"}, "dataset")
        mpath = Path(dcfg["path"])
        man = json.loads(mpath.read_text())
        noisy, clean, sigma = [], [], []
        for entry in man["images"]:
            noisy.append(read_pgm(mpath.parent / entry["noisy"]))
            if "clean" in entry:
                clean.append(read_pgm(mpath.parent / entry["clean"]))
            sigma.append(entry.get("sigma", 0.0))
        return Dataset(
            noisy=np.stack(noisy)[:, None, :, :],
            clean=np.stack(clean)[:, None, :, :] if clean else None,
            sigma=np.asarray(sigma, dtype=np.float64),
            name=str(mpath),
        )
    raise ConfigError(f"dataset: unknown kind {kind!r}")


def _build_net(cfg: dict, seed: int):
    from .errors import ConfigError
    from .nets import build_dncnn_lite, build_sda

    arch = cfg.get("architecture", "sda")
    if arch == "sda":
        return build_sda(in_channels=1, seed=seed)
    if arch == "dncnn_lite":
        return build_dncnn_lite(
            depth=int(cfg.get("depth", 7)),
            channels=int(cfg.get("channels", 32)),
            in_channels=1, seed=seed,
        )
    raise ConfigError(f"unknown architecture {arch!r}")


def _noise_spec(cfg: dict):
    """Config noise levels use the 0-255 convention; internal images are
    [0,1], so sigma values divide by 255 here."""
    from .errors import ConfigError
    from .noise import NoiseSpec

    if cfg.get("zeta") is not None:
        return NoiseSpec(kind="poisson", zeta=float(cfg["zeta"]))
    if cfg.get("sigma_range") is not None:
        lo, hi = cfg["sigma_range"]
        return NoiseSpec(kind="gaussian", sigma_range=(lo / 255.0, hi / 255.0))
    if cfg.get("sigma") is not None:
        return NoiseSpec(kind="gaussian", sigma=float(cfg["sigma"]) / 255.0)
    raise ConfigError("one of sigma, sigma_range, zeta is required")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

_TRAIN_KEYS = {
    "dataset", "architecture", "depth", "channels", "objective",
    "sigma", "sigma_range", "zeta", "epsilon",
    "epochs", "batch_size", "lr", "lr_decay_epoch", "lr_decayed",
    "weight_decay", "optimizer", "seed", "output_dir", "regenerate_noise",
    "val_fraction", "threads",
}


def cmd_train(cfg: dict, config_path) -> int:
    from .data import Dataset, psnr
    from .errors import DataError
    from .noise import Rng
    from .risk import RiskObjective
    from .train import TrainConfig, denoise_batched, restore, train

    _check_keys(cfg, _TRAIN_KEYS, {"dataset", "architecture", "objective", "output_dir"},
                "train")
    out = _prepare_out_dir(cfg, config_path)
    seed = int(cfg.get("seed", 0))
    ds = _load_dataset(cfg["dataset"])
    objective_kind = cfg["objective"]
    if objective_kind == "mse_gt" and not ds.has_clean:
        raise DataError("objective mse_gt needs ground truth, dataset is GT-free")

    spec = None
    if objective_kind == "pure" or cfg.get("zeta") is not None \
            or cfg.get("sigma") is not None or cfg.get("sigma_range") is not None:
        spec = _noise_spec(cfg)

    obj = RiskObjective(
        kind=objective_kind,
        epsilon=cfg.get("epsilon"),
        sigma=(spec.sigma if spec and spec.kind == "gaussian" and spec.sigma else None),
        zeta=(spec.zeta if spec and spec.kind == "poisson" else None),
        sigma_range=(spec.sigma_range if spec and spec.kind == "gaussian" else None),
    )
    tcfg = TrainConfig(
        objective=obj,
        epochs=int(cfg.get("epochs", 30)),
        batch_size=int(cfg.get("batch_size", 200)),
        lr=float(cfg.get("lr", 1e-3)),
        lr_decay_epoch=cfg.get("lr_decay_epoch"),
        lr_decayed=float(cfg.get("lr_decayed", 1e-4)),
        seed=seed,
        weight_decay=float(cfg.get("weight_decay", 0.0)),
        optimizer=cfg.get("optimizer", "adam"),
        noise=spec,
        regenerate_noise=cfg.get("regenerate_noise"),
    )

    # optional held-out validation split (diagnostic only)
    val_ds = None
    frac = float(cfg.get("val_fraction", 0.0))
    if frac > 0 and ds.has_clean:
        n_val = max(1, int(len(ds) * frac))
        val_ds = Dataset(clean=ds.clean[-n_val:], name=f"{ds.name}-val")
        ds.clean = ds.clean[:-n_val]
        if ds.noisy is not None:
            val_ds.noisy = ds.noisy[-n_val:]
            ds.noisy = ds.noisy[:-n_val]
        if ds.sigma is not None:
            val_ds.sigma = ds.sigma[-n_val:]
            ds.sigma = ds.sigma[:-n_val]
        if val_ds.noisy is None and spec is not None:
            from .train import _corrupt_dataset
            _corrupt_dataset(val_ds, spec, Rng(seed + 991))

    t0 = time.perf_counter()
    ckpt, history = train(_build_net(cfg, seed), ds, tcfg, val_ds=val_ds, out_dir=out)
    wall = time.perf_counter() - t0
    summary = {
        "epochs_run": len(history),
        "final_loss": history[-1]["loss"] if history else None,
        "final_val_psnr": history[-1]["val_psnr"] if history else None,
        "wall_seconds": wall,
        "checkpoint": str(out / "final.ckpt"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"trained {len(history)} epochs -> {out / 'final.ckpt'}")
    if summary["final_val_psnr"] is not None:
        print(f"final validation PSNR: {summary['final_val_psnr']:.2f} dB")
    return EXIT_OK


_CORRUPT_KEYS = {
    "dataset", "sigma", "sigma_range", "zeta", "seed", "output_dir",
    "include_clean", "threads",
}


def cmd_corrupt(cfg: dict, config_path) -> int:
    import numpy as np
    from .data import write_pgm
    from .noise import Rng, corrupt_gaussian, corrupt_poisson
    from .errors import DataError

    _check_keys(cfg, _CORRUPT_KEYS, {"dataset", "output_dir"}, "corrupt")
    out = _prepare_out_dir(cfg, config_path)
    seed = int(cfg.get("seed", 0))
    spec = _noise_spec(cfg)
    ds = _load_dataset(cfg["dataset"])
    clean = ds.require_clean()
    rng = Rng(seed)

    if spec.kind == "poisson":
        if np.any(clean < 0):
            raise DataError("poisson corruption requires nonnegative intensities")
        noisy = corrupt_poisson(clean, spec.zeta, rng)
        sigma = np.zeros(clean.shape[0])
    elif spec.sigma_range is not None:
        lo, hi = spec.sigma_range
        sigma = rng.sigma.uniform(lo, hi, size=clean.shape[0])
        noisy = clean + sigma[:, None, None, None] * rng.corrupt.standard_normal(clean.shape)
    else:
        noisy = corrupt_gaussian(clean, spec.sigma, rng)
        sigma = np.full(clean.shape[0], spec.sigma)

    (out / "noisy").mkdir(exist_ok=True)
    include_clean = bool(cfg.get("include_clean", False))
    if include_clean:
        (out / "clean").mkdir(exist_ok=True)
    entries = []
    for i in range(clean.shape[0]):
        rel = f"noisy/{i:05d}.pgm"
        write_pgm(out / rel, noisy[i])
        entry = {"noisy": rel}
        if spec.kind == "poisson":
            entry["zeta"] = spec.zeta
        else:
            entry["sigma"] = float(sigma[i])
        if include_clean:
            crel = f"clean/{i:05d}.pgm"
            write_pgm(out / crel, clean[i])
            entry["clean"] = crel
        entries.append(entry)
    manifest = {
        "seed": seed,
        "noise": {"kind": spec.kind, "sigma": spec.sigma, "zeta": spec.zeta,
                  "sigma_range": list(spec.sigma_range) if spec.sigma_range else None},
        "images": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(entries)} noisy images + manifest to {out}")
    return EXIT_OK


_REFINE_KEYS = {
    "checkpoint", "image", "sigma", "epsilon", "epochs", "lr",
    "lr_decay_epoch", "lr_decayed", "seed", "keep_best", "output_dir", "threads",
}


def cmd_refine(cfg: dict, config_path) -> int:
    from .data import read_pgm, write_pgm
    from .train import RefineConfig, load_checkpoint, refine

    _check_keys(cfg, _REFINE_KEYS, {"checkpoint", "image", "sigma", "output_dir"},
                "refine")
    out = _prepare_out_dir(cfg, config_path)
    ckpt = load_checkpoint(cfg["checkpoint"])
    img = read_pgm(cfg["image"])[None, None, :, :]
    sigma = float(cfg["sigma"]) / 255.0
    rcfg = RefineConfig(
        epochs=int(cfg.get("epochs", 75)),
        lr=float(cfg.get("lr", 1e-4)),
        lr_decay_epoch=int(cfg.get("lr_decay_epoch", 50)),
        lr_decayed=float(cfg.get("lr_decayed", 5e-5)),
        seed=int(cfg.get("seed", 0)),
        epsilon=cfg.get("epsilon"),
        keep_best=bool(cfg.get("keep_best", True)),
    )
    _, denoised, info = refine(ckpt, img, sigma, rcfg, out_dir=out)
    write_pgm(out / "denoised.pgm", denoised[0, 0])
    print(f"SURE before: {info['sure_before']:.4f}")
    print(f"SURE after:  {info['sure_after']:.4f}")
    print(f"wrote {out / 'denoised.pgm'} and {out / 'refined.ckpt'}")
    return EXIT_OK


_DENOISE_KEYS = {"checkpoint", "images", "gt", "output_dir", "threads"}


def cmd_denoise(cfg: dict, config_path) -> int:
    from .data import psnr, read_pgm, write_pgm
    from .errors import DataError
    from .tensor import Tensor
    from .train import load_checkpoint, restore

    _check_keys(cfg, _DENOISE_KEYS, {"checkpoint", "images", "output_dir"}, "denoise")
    out = _prepare_out_dir(cfg, config_path)
    ckpt = load_checkpoint(cfg["checkpoint"])
    d = restore(ckpt)
    gt_paths = cfg.get("gt") or []
    for i, path in enumerate(cfg["images"]):
        img = read_pgm(path)
        if d.architecture_tag == "sda" and img.shape != (28, 28):
            raise DataError(
                f"{path}: the autoencoder operates on 28x28 images, got {img.shape}"
            )
        den = d.forward(Tensor(img[None, None]), "eval").data[0, 0]
        dst = out / f"denoised_{Path(path).stem}.pgm"
        write_pgm(dst, den)
        line = f"{path} -> {dst}"
        if i < len(gt_paths):
            line += f"  PSNR {psnr(den, read_pgm(gt_paths[i])):.2f} dB"
        print(line)
    return EXIT_OK


_VALIDATE_KEYS = {"suite", "arch", "architecture", "seed", "checkpoint",
                  "output_dir", "threads", "realizations", "n_draws",
                  "eps_grid", "epochs"}


def cmd_validate(cfg: dict, config_path) -> int:
    import numpy as np
    from .data import generate_synthetic, psnr
    from .errors import ConfigError
    from .noise import Rng, corrupt_gaussian
    from .oracles import (
        ConstantDenoiser, IdentityDenoiser, LinearDenoiser,
        epsilon_sweep, validate_divergence, validate_pure, validate_unbiasedness,
    )
    from .risk import RiskObjective
    from .train import TrainConfig, denoise_batched, load_checkpoint, restore, train

    _check_keys(cfg, _VALIDATE_KEYS, {"suite", "output_dir"}, "validate")
    if "arch" in cfg:
        cfg = dict(cfg)
        cfg["architecture"] = cfg.pop("arch")
    suite = cfg["suite"]
    if suite not in VALIDATE_SUITES:
        raise ConfigError(
            f"unknown validation suite {suite!r}; choose from {VALIDATE_SUITES}"
        )
    out = _prepare_out_dir(cfg, config_path)
    seed = int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)

    def subject_denoiser():
        if cfg.get("checkpoint"):
            return restore(load_checkpoint(cfg["checkpoint"]))
        return _build_net(cfg, seed)

    reports = []
    rows = None
    if suite == "divergence":
        n_draws = int(cfg.get("n_draws", 10_000))
        A = rng.standard_normal((16, 16)) * 0.2
        y = rng.standard_normal((1, 1, 4, 4))
        reports.append(validate_divergence(LinearDenoiser(A), y, eps=1e-3,
                                           n_draws=n_draws, seed=seed))
        d = subject_denoiser()
        x = generate_synthetic(1, (28, 28), "strokes", rng).clean
        yimg = corrupt_gaussian(x, 25 / 255.0, Rng(seed))
        reports.append(validate_divergence(d, yimg, eps=1e-4, n_draws=100,
                                           seed=seed, rel_tol=0.02))
    elif suite == "unbiasedness":
        R = int(cfg.get("realizations", 2000))
        x = generate_synthetic(1, (28, 28), "strokes", rng).clean
        reports.append(validate_unbiasedness(IdentityDenoiser(), x, 25 / 255.0, R, seed=seed))
        reports.append(validate_unbiasedness(ConstantDenoiser(0.5), x, 25 / 255.0, R, seed=seed))
        reports.append(validate_unbiasedness(subject_denoiser(), x, 25 / 255.0, R, seed=seed))
    elif suite == "pure":
        R = int(cfg.get("realizations", 2000))
        x = generate_synthetic(1, (28, 28), "strokes", rng).clean
        reports.append(validate_pure(ConstantDenoiser(0.5), x, 0.01, R, seed=seed))
        reports.append(validate_pure(subject_denoiser(), x, 0.01, R, seed=seed))
    elif suite == "epsilon":
        grid = cfg.get("eps_grid", [1e-2, 1e-4, 1e-7])
        epochs = int(cfg.get("epochs", 3))

        def run(eps):
            ds = generate_synthetic(320, (28, 28), "strokes", seed)
            test = generate_synthetic(64, (28, 28), "strokes", seed + 1)
            nrng = Rng(seed + 2)
            test_noisy = corrupt_gaussian(test.clean, 25 / 255.0, nrng)
            obj = RiskObjective(kind="sure", epsilon=eps, sigma=25 / 255.0)
            from .noise import NoiseSpec
            tcfg = TrainConfig(objective=obj, epochs=epochs, batch_size=64,
                               seed=seed, noise=NoiseSpec("gaussian", sigma=25 / 255.0))
            d = _build_net(cfg, seed)
            _, hist = train(d, ds, tcfg)
            den = denoise_batched(d, test_noisy)
            return psnr(den, test.clean), [h["loss"] for h in hist]

        rows = epsilon_sweep(run, grid)

    lines = []
    ok = True
    if rows is not None:
        for r in rows:
            ok = ok and r["error"] is None
            lines.append(f"eps={r['epsilon']:g} psnr={r['psnr']} error={r['error']}")
        (out / "report.json").write_text(json.dumps(rows, indent=2))
    else:
        from dataclasses import asdict
        for rep in reports:
            ok = ok and rep.passed
            lines.append(str(rep))
        (out / "report.json").write_text(
            json.dumps([asdict(r) for r in reports], indent=2)
        )
    text = "\n".join(lines)
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK if ok else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sure-denoise")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("corrupt", "train", "refine", "denoise", "validate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None)
        sp.add_argument("--output-dir", dest="output_dir", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override a top-level config field")
        if name == "train":
            sp.add_argument("--objective", default=None)
            sp.add_argument("--epochs", type=int, default=None)
            sp.add_argument("--sigma", type=float, default=None)
            sp.add_argument("--zeta", type=float, default=None)
            sp.add_argument("--epsilon", type=float, default=None)
        if name == "refine":
            sp.add_argument("--epochs", type=int, default=None)
            sp.add_argument("--no-keep-best", action="store_true")
        if name == "validate":
            sp.add_argument("suite", nargs="?", default=None,
                            choices=VALIDATE_SUITES)
            sp.add_argument("--arch", default=None)
            sp.add_argument("--checkpoint", default=None)
    return p


def _merge_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    from .errors import ConfigError

    cfg = dict(cfg)
    simple = ("output_dir", "seed", "threads", "objective", "epochs",
              "sigma", "zeta", "epsilon", "checkpoint")
    for key in simple:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "no_keep_best", False):
        cfg["keep_best"] = False
    if getattr(args, "suite", None) is not None:
        cfg["suite"] = args.suite
    if getattr(args, "arch", None) is not None:
        cfg["arch"] = args.arch
        cfg["architecture"] = args.arch
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=JSON, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw  # bare string convenience
    return cfg


_COMMANDS = {
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "refine": cmd_refine,
    "denoise": cmd_denoise,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    threads = args.threads or os.environ.get("SURE_DENOISE_THREADS") or 1
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))

    from .errors import ConfigError, DataError
    from .tensor import NumericalError

    try:
        cfg = _merge_overrides(_load_config(args.config), args)
        if args.command == "validate":
            cfg.pop("architecture", None)  # validate names it 'arch'
            cfg.setdefault("arch", "sda")
            if not cfg.get("suite"):
                raise ConfigError("validate: suite is required")
        cfg.pop("threads", None)
        return _COMMANDS[args.command](cfg, args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
