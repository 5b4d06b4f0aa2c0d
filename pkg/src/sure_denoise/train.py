"""Training and refinement loops, SGD/Adam, and checkpoint persistence."""

from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import Batch, Dataset, batches, psnr
from .errors import ConfigError, DataError
from .nets import (
    BatchNorm2d, Denoiser, LayerSpec, apply_param_mask, build_from_specs,
)
from .noise import NoiseSpec, Rng, corrupt_gaussian, corrupt_poisson, perturb_binary, perturb_gaussian
from .risk import (
    EPS_DOT_DEFAULT, LossReport, RiskObjective, blind_sure_loss, epsilon_rule,
    mse_loss, mse_reg_loss, pure_loss, sure_loss,
)
from .tensor import NumericalError, Tensor

CKPT_MAGIC = b"SURE\x00NET1"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class OptimizerState:
    """SGD or Adam (beta1=0.9, beta2=0.999, eps=1e-8) with per-parameter
    moment buffers; masked parameters are never touched."""

    def __init__(self, kind: str, lr: float, weight_decay: float = 0.0):
        if kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}


def adam_step(opt: OptimizerState, params, mask: Dict[str, bool]) -> None:
    """One bias-corrected Adam update over (name, Tensor) parameter pairs."""
    opt.step_count += 1
    t = opt.step_count
    for name, p in params:
        if not mask.get(name, True):
            continue
        g = p.grad
        if g is None:
            continue
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        opt.m[name] = opt.beta1 * opt.m[name] + (1 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1 - opt.beta2) * g * g
        m_hat = opt.m[name] / (1 - opt.beta1 ** t)
        v_hat = opt.v[name] / (1 - opt.beta2 ** t)
        p.data -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def sgd_step(opt: OptimizerState, params, mask: Dict[str, bool]) -> None:
    opt.step_count += 1
    for name, p in params:
        if not mask.get(name, True) or p.grad is None:
            continue
        g = p.grad
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        p.data -= opt.lr * g


def optimizer_step(opt: OptimizerState, d: Denoiser) -> None:
    step = adam_step if opt.kind == "adam" else sgd_step
    step(opt, d.parameters(), d.param_mask)


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    objective: RiskObjective
    epochs: int = 30
    batch_size: int = 200
    lr: float = 1e-3
    lr_decay_epoch: Optional[int] = None
    lr_decayed: float = 1e-4
    seed: int = 0
    weight_decay: float = 0.0
    optimizer: str = "adam"
    checkpoint_every: int = 0          # 0 = final only
    noise: Optional[NoiseSpec] = None  # used when noisy images must be drawn
    regenerate_noise: Optional[bool] = None  # None -> per-objective default
    early_stop: Optional[bool] = None        # None -> mse_reg at high noise

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")


@dataclass
class RefineConfig:
    epochs: int = 75
    lr: float = 1e-4
    lr_decay_epoch: int = 50
    lr_decayed: float = 5e-5
    seed: int = 0
    epsilon: Optional[float] = None
    keep_best: bool = True


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    architecture_tag: str
    residual: bool
    layer_specs: List[LayerSpec]
    tensors: Dict[str, np.ndarray]   # parameters and batch-norm running stats
    seed: int = 0
    epoch: int = 0
    version: int = CKPT_VERSION


def snapshot(d: Denoiser, seed: int = 0, epoch: int = 0) -> Checkpoint:
    tensors = {name: t.data.copy() for name, t in d.parameters()}
    for i, layer in enumerate(d.layers):
        if isinstance(layer, BatchNorm2d):
            tensors[f"layer{i}.running_mean"] = layer.running_mean.copy()
            tensors[f"layer{i}.running_var"] = layer.running_var.copy()
    return Checkpoint(
        architecture_tag=d.architecture_tag,
        residual=d.residual,
        layer_specs=[s for s in d.layer_specs()],
        tensors=tensors,
        seed=seed,
        epoch=epoch,
    )


def restore(ckpt: Checkpoint) -> Denoiser:
    d = build_from_specs(ckpt.layer_specs, ckpt.architecture_tag, ckpt.residual)
    load_into(d, ckpt)
    return d


def load_into(d: Denoiser, ckpt: Checkpoint) -> None:
    if d.architecture_tag != ckpt.architecture_tag:
        raise DataError(
            f"architecture mismatch: checkpoint is {ckpt.architecture_tag!r}, "
            f"network is {d.architecture_tag!r}"
        )
    names = {name for name, _ in d.parameters()}
    for name, t in d.parameters():
        if name not in ckpt.tensors:
            raise DataError(f"checkpoint missing tensor {name!r}")
        if ckpt.tensors[name].shape != t.data.shape:
            raise DataError(
                f"shape mismatch for {name!r}: {ckpt.tensors[name].shape} vs {t.data.shape}"
            )
        t.data[:] = ckpt.tensors[name]
    for i, layer in enumerate(d.layers):
        if isinstance(layer, BatchNorm2d):
            layer.running_mean[:] = ckpt.tensors[f"layer{i}.running_mean"]
            layer.running_var[:] = ckpt.tensors[f"layer{i}.running_var"]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    order = sorted(ckpt.tensors)
    header = {
        "version": ckpt.version,
        "architecture_tag": ckpt.architecture_tag,
        "residual": ckpt.residual,
        "layer_specs": [s.to_dict() for s in ckpt.layer_specs],
        "tensors": [
            {"name": n, "shape": list(ckpt.tensors[n].shape), "dtype": "float64"}
            for n in order
        ],
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in order:
            f.write(np.ascontiguousarray(ckpt.tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CKPT_MAGIC) + 8 or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    if len(raw) < off + hlen:
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: corrupt checkpoint header") from None
    off += hlen
    if header.get("version") != CKPT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint version {header.get('version')}"
        )
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 8
        if len(raw) < off + nbytes:
            raise DataError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
        tensors[entry["name"]] = arr.reshape(entry["shape"])
        off += nbytes
    return Checkpoint(
        architecture_tag=header["architecture_tag"],
        residual=header["residual"],
        layer_specs=[LayerSpec.from_dict(s) for s in header["layer_specs"]],
        tensors=tensors,
        seed=header["seed"],
        epoch=header["epoch"],
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _corrupt_dataset(ds: Dataset, spec: NoiseSpec, rng: Rng) -> None:
    """Draw noisy images (and per-sample sigma for blind mode) in place."""
    clean = ds.require_clean()
    if spec.kind == "gaussian":
        if spec.sigma_range is not None:
            lo, hi = spec.sigma_range
            ds.sigma = rng.sigma.uniform(lo, hi, size=clean.shape[0])
            g = rng.corrupt.standard_normal(clean.shape)
            ds.noisy = clean + ds.sigma[:, None, None, None] * g
        else:
            ds.noisy = corrupt_gaussian(clean, spec.sigma, rng)
            ds.sigma = np.full(clean.shape[0], spec.sigma)
    else:
        ds.noisy = corrupt_poisson(clean, spec.zeta, rng)


def _batch_loss(
    d: Denoiser, b: Batch, obj: RiskObjective, arch: str,
    n_probe: Optional[np.ndarray],
) -> Tuple[Tensor, LossReport]:
    if obj.kind == "mse_gt":
        h = d.forward(Tensor(b.y), "train")
        loss = mse_loss(h, b.x)
        return loss, LossReport(loss=loss.item(), data_fidelity=loss.item())
    if obj.kind == "mse_reg":
        h = d.forward(Tensor(b.y), "train")
        loss = mse_reg_loss(h, b.y)
        return loss, LossReport(loss=loss.item(), data_fidelity=loss.item())
    if obj.kind in ("sure", "sure_ft"):
        eps = obj.epsilon if obj.epsilon is not None else epsilon_rule(
            arch, obj.sigma * 255.0 if obj.sigma else 0.0
        )
        return sure_loss(d, b.y, obj.sigma, eps, n_tilde=n_probe)
    if obj.kind == "blind_sure":
        if b.sigma is None:
            raise DataError("blind training needs per-sample noise levels")
        eps_j = np.maximum(b.sigma * 255.0 * 1.2e-4, 1e-8)
        return blind_sure_loss(d, b.y, b.sigma, eps_j, n_tilde=n_probe)
    if obj.kind == "pure":
        eps_dot = obj.epsilon if obj.epsilon is not None else EPS_DOT_DEFAULT
        return pure_loss(d, b.y, obj.zeta, eps_dot, n_dot=n_probe)
    raise ConfigError(f"unknown objective {obj.kind!r}")


def train(
    d: Denoiser,
    ds: Dataset,
    cfg: TrainConfig,
    val_ds: Optional[Dataset] = None,
    out_dir=None,
) -> Tuple[Checkpoint, List[dict]]:
    """Optimize the denoiser on the dataset; returns the final checkpoint and
    the per-epoch history (also written to train_log.csv under out_dir).

    Ground truth, when present, is used only for the mse_gt objective and for
    diagnostic PSNR; estimator objectives read noisy images alone.
    """
    obj = cfg.objective
    rng = Rng(cfg.seed)
    if obj.kind == "mse_gt":
        ds.require_clean()
        regen = cfg.regenerate_noise if cfg.regenerate_noise is not None else True
        if ds.noisy is None or regen:
            if cfg.noise is None:
                raise ConfigError("mse_gt needs a noise spec to draw noisy inputs")
    else:
        regen = cfg.regenerate_noise if cfg.regenerate_noise is not None else False
        if ds.noisy is None:
            if cfg.noise is None or not ds.has_clean:
                raise DataError(
                    "estimator objectives need pre-corrupted noisy images "
                    "(or clean images plus a noise spec to draw them once)"
                )
            _corrupt_dataset(ds, cfg.noise, rng)

    early_stop = cfg.early_stop
    if early_stop is None:
        early_stop = obj.kind == "mse_reg" and (obj.sigma or 0) >= 50.0 / 255.0

    opt = OptimizerState(cfg.optimizer, cfg.lr, cfg.weight_decay)
    history: List[dict] = []
    n = len(ds)
    last_good = snapshot(d, cfg.seed, 0)
    val_loss_up = 0
    prev_val_loss = None

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = (
            cfg.lr_decayed
            if cfg.lr_decay_epoch is not None and epoch >= cfg.lr_decay_epoch
            else cfg.lr
        )
        if obj.kind == "mse_gt" and (regen or ds.noisy is None):
            _corrupt_dataset(ds, cfg.noise, rng)
        # one fresh probe per sample per epoch
        shape = ds.noisy.shape
        if obj.kind == "pure":
            probes = perturb_binary(shape, rng)
        elif obj.kind in ("sure", "blind_sure", "sure_ft"):
            probes = perturb_gaussian(shape, rng)
        else:
            probes = None

        epoch_loss = 0.0
        epoch_div = 0.0
        nb = 0
        try:
            for b in batches(ds, cfg.batch_size, (cfg.seed, 7, epoch), epoch):
                n_probe = probes[b.sel] if probes is not None else None
                d.zero_grad()
                loss, report = _batch_loss(d, b, obj, d.architecture_tag, n_probe)
                loss.backward()
                optimizer_step(opt, d)
                epoch_loss += report.loss
                epoch_div += report.divergence_estimate
                nb += 1
        except NumericalError:
            if out_dir is not None:
                save_checkpoint(last_good, Path(out_dir) / "last_good.ckpt")
            raise

        row = {
            "epoch": epoch,
            "objective": obj.kind,
            "loss": epoch_loss / max(nb, 1),
            "divergence_estimate": epoch_div / max(nb, 1),
            "mse_vs_gt": None,
            "val_psnr": None,
            "lr": opt.lr,
            "wall_ms": 1000.0 * (time.perf_counter() - t0),
        }
        if ds.has_clean:
            out = denoise_batched(d, ds.noisy[:200])
            row["mse_vs_gt"] = float(np.mean(
                ((out - ds.clean[:200]) ** 2).sum(axis=(1, 2, 3))
            ))
        if val_ds is not None and val_ds.has_clean and val_ds.noisy is not None:
            out = denoise_batched(d, val_ds.noisy)
            row["val_psnr"] = psnr(out, val_ds.clean)
        history.append(row)
        last_good = snapshot(d, cfg.seed, epoch + 1)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(last_good, Path(out_dir) / f"epoch{epoch + 1:04d}.ckpt")

        if early_stop and val_ds is not None and val_ds.noisy is not None:
            h = denoise_batched(d, val_ds.noisy)
            vloss = float(np.mean(((h - val_ds.noisy) ** 2).sum(axis=(1, 2, 3))))
            if prev_val_loss is not None and vloss > prev_val_loss:
                val_loss_up += 1
                if val_loss_up >= 3:
                    break
            else:
                val_loss_up = 0
            prev_val_loss = vloss

    final = snapshot(d, cfg.seed, len(history))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(final, out_dir / "final.ckpt")
        write_history_csv(history, out_dir / "train_log.csv")
    return final, history


def write_history_csv(history: List[dict], path) -> None:
    cols = ["epoch", "objective", "loss", "divergence_estimate",
            "mse_vs_gt", "val_psnr", "lr", "wall_ms"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k) for k in cols})


def denoise_batched(d: Denoiser, noisy: np.ndarray, batch: int = 200) -> np.ndarray:
    out = np.empty_like(noisy)
    for start in range(0, noisy.shape[0], batch):
        chunk = noisy[start:start + batch]
        out[start:start + chunk.shape[0]] = d.forward(Tensor(chunk), "eval").data
    return out


# ---------------------------------------------------------------------------
# single-image refinement
# ---------------------------------------------------------------------------

def estimate_sure(
    d: Denoiser, y: np.ndarray, sigma: float, eps: float,
    seed: int = 0, n_probes: int = 8,
) -> float:
    """Low-variance risk estimate of the current network on one image:
    eval-mode forwards, probe average."""
    rng = Rng(seed)
    vals = []
    for _ in range(n_probes):
        loss, _ = sure_loss(d, y, sigma, eps, rng=rng, mode="eval")
        vals.append(loss.item())
    return float(np.mean(vals))


def refine(
    ckpt: Checkpoint, y_test: np.ndarray, sigma: float, cfg: RefineConfig,
    out_dir=None,
) -> Tuple[Checkpoint, np.ndarray, dict]:
    """Fine-tune a pretrained denoiser on a single noisy test image by
    minimizing its own risk estimate, batch-norm frozen. Keeps the
    best-by-estimated-risk snapshot unless cfg.keep_best is False."""
    if y_test.ndim != 4 or y_test.shape[0] != 1:
        raise DataError("refine expects a single [1,C,H,W] image")
    d = restore(ckpt)
    apply_param_mask(d, "freeze_batch_norm")
    eps = cfg.epsilon if cfg.epsilon is not None else epsilon_rule(
        d.architecture_tag, sigma * 255.0
    )
    rng = Rng(cfg.seed)
    opt = OptimizerState("adam", cfg.lr)
    sure_before = estimate_sure(d, y_test, sigma, eps, seed=cfg.seed + 1)
    best_val = sure_before
    best = snapshot(d, cfg.seed, 0)

    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_decayed if epoch >= cfg.lr_decay_epoch else cfg.lr
        d.zero_grad()
        loss, _ = sure_loss(d, y_test, sigma, eps, rng=rng)
        loss.backward()
        optimizer_step(opt, d)
        val = estimate_sure(d, y_test, sigma, eps, seed=cfg.seed + 1)
        if val < best_val:
            best_val = val
            best = snapshot(d, cfg.seed, epoch + 1)

    if cfg.keep_best:
        load_into(d, best)
        final = best
    else:
        final = snapshot(d, cfg.seed, cfg.epochs)
    sure_after = estimate_sure(d, y_test, sigma, eps, seed=cfg.seed + 1)
    denoised = d.forward(Tensor(y_test), "eval").data
    info = {"sure_before": sure_before, "sure_after": sure_after, "epsilon": eps}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(final, out_dir / "refined.ckpt")
    return final, denoised, info
