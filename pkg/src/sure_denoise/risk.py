"""Loss functions for denoiser training.

Supervised MSE, the Monte-Carlo unbiased risk estimate for Gaussian noise
(per-sample and minibatch, fixed or per-sample noise level), the single-image
refinement objective, and the Poisson counterpart. None of the estimator
losses ever receive ground truth; diagnostics against clean images are
computed by the caller.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError
from .nets import Denoiser
from .noise import Rng, perturb_binary, perturb_gaussian
from .tensor import Tensor

SURE_KINDS = ("sure", "blind_sure", "sure_ft")
ALL_KINDS = ("mse_gt", "mse_reg") + SURE_KINDS + ("pure",)

# Poisson estimator variance blows up at high gain; see pure_loss warning.
PURE_ZETA_WARN = 0.2


@dataclass
class RiskObjective:
    kind: str
    epsilon: Optional[float] = None   # None -> architecture rule
    sigma: Optional[float] = None     # [0,1] units, fixed-level training
    zeta: Optional[float] = None
    sigma_range: Optional[Tuple[float, float]] = None  # blind training

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.kind in SURE_KINDS + ("pure",):
            if self.epsilon is not None and self.epsilon <= 0:
                raise ConfigError("epsilon must be > 0")


@dataclass
class LossReport:
    """Per-batch decomposition; loss == data_fidelity - constant_term +
    divergence_term exactly (all are batch means)."""

    loss: float
    data_fidelity: float
    constant_term: float = 0.0
    divergence_term: float = 0.0
    divergence_estimate: float = 0.0   # raw mean MC divergence, unweighted
    mse_vs_gt: Optional[float] = None


def epsilon_rule(arch: str, sigma255: float = 0.0, blind: bool = False) -> float:
    """Probe-step defaults: constant 1e-4 for the autoencoder, noise-level
    proportional for the residual CNN (sigma on the 0-255 scale)."""
    if blind:
        return sigma255 * 1.2e-4
    if arch == "sda":
        return 1e-4
    if arch == "dncnn_lite":
        return sigma255 * 1.4e-4
    raise ConfigError(f"no epsilon rule for architecture {arch!r}")


EPS_DOT_DEFAULT = 1e-3  # center of the admissible Poisson probe-step range


# ---------------------------------------------------------------------------
# supervised / regularization losses
# ---------------------------------------------------------------------------

def _batch_sq_norm(a: Tensor) -> Tensor:
    """Sum of squares over pixel axes, mean over batch -> scalar Tensor."""
    return (a * a).sum(axes=tuple(range(1, len(a.shape)))).mean()


def mse_loss(h_out: Tensor, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if h_out.shape != x.shape:
        raise ValueError(f"mse_loss shape mismatch: {h_out.shape} vs {x.shape}")
    return _batch_sq_norm(h_out - x)


def mse_reg_loss(h_out: Tensor, y) -> Tensor:
    """MSE against the noisy input itself (autoencoder regularization baseline)."""
    return mse_loss(h_out, y)


# ---------------------------------------------------------------------------
# Monte-Carlo divergence
# ---------------------------------------------------------------------------

def mc_divergence(
    d: Denoiser, y: np.ndarray, eps: float, n_tilde: np.ndarray,
    mode: str = "eval", h_y: Optional[Tensor] = None,
) -> Tensor:
    """Per-sample probe estimate n~' (h(y + eps*n~) - h(y)) / eps, kept on
    the tape so it is differentiable w.r.t. the parameters."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if n_tilde.shape != y.shape:
        raise ValueError(f"probe shape {n_tilde.shape} != input shape {y.shape}")
    h0 = h_y if h_y is not None else d.forward(Tensor(y), mode)
    h1 = d.forward(Tensor(y + eps * n_tilde), mode)
    nt = Tensor(n_tilde)
    return (nt * (h1 - h0)).sum(axes=tuple(range(1, y.ndim))) / eps


def exact_divergence_fd(
    d: Denoiser, y: np.ndarray, h_fd: float = 1e-3, mode: str = "eval",
    chunk: int = 256,
) -> float:
    """Divergence by K central finite differences (oracle; O(K) forwards)."""
    if y.ndim != 4 or y.shape[0] != 1:
        raise ValueError("exact_divergence_fd expects a single [1,C,H,W] image")
    K = y.size
    if K > 4096:
        raise ValueError(f"image too large for brute-force divergence (K={K})")
    flat = y.reshape(-1)
    total = 0.0
    for start in range(0, K, chunk):
        idx = np.arange(start, min(start + chunk, K))
        m = idx.size
        plus = np.repeat(flat[None, :], m, axis=0)
        minus = plus.copy()
        plus[np.arange(m), idx] += h_fd
        minus[np.arange(m), idx] -= h_fd
        hp = d.forward(Tensor(plus.reshape((m,) + y.shape[1:])), mode).data.reshape(m, K)
        hm = d.forward(Tensor(minus.reshape((m,) + y.shape[1:])), mode).data.reshape(m, K)
        total += float(np.sum((hp[np.arange(m), idx] - hm[np.arange(m), idx]) / (2 * h_fd)))
    return total


# ---------------------------------------------------------------------------
# unbiased risk losses
# ---------------------------------------------------------------------------

def _sure_core(
    d: Denoiser, y: np.ndarray, sigma_sq: np.ndarray, eps: np.ndarray,
    n_tilde: np.ndarray, mode: str,
) -> Tuple[Tensor, LossReport]:
    """Shared batch estimator: sigma_sq and eps are per-sample vectors [M]."""
    M = y.shape[0]
    K = int(np.prod(y.shape[1:]))
    yt = Tensor(y)
    h0 = d.forward(yt, mode)
    resid = yt - h0
    fid_j = (resid * resid).sum(axes=tuple(range(1, y.ndim)))          # [M]
    h1 = d.forward(Tensor(y + eps.reshape(-1, 1, 1, 1) * n_tilde), mode)
    div_j = (Tensor(n_tilde) * (h1 - h0)).sum(axes=tuple(range(1, y.ndim))) \
        / Tensor(eps)                                                   # [M]
    weight = Tensor(2.0 * sigma_sq)
    const = float(np.mean(K * sigma_sq))
    loss = fid_j.mean() - const + (weight * div_j).mean()
    report = LossReport(
        loss=loss.item(),
        data_fidelity=fid_j.mean().item(),
        constant_term=const,
        divergence_term=(weight * div_j).mean().item(),
        divergence_estimate=div_j.mean().item(),
    )
    return loss, report


def sure_loss(
    d: Denoiser, y_batch: np.ndarray, sigma: float, eps: float,
    rng: Optional[Rng] = None, n_tilde: Optional[np.ndarray] = None,
    mode: str = "train",
) -> Tuple[Tensor, LossReport]:
    """Minibatch Gaussian risk estimate: per-sample ||y - h(y)||^2 - K*sigma^2
    + (2*sigma^2/eps) * probe term, averaged over the batch."""
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    if n_tilde is None:
        n_tilde = perturb_gaussian(y_batch.shape, rng)
    M = y_batch.shape[0]
    return _sure_core(
        d, y_batch,
        sigma_sq=np.full(M, sigma * sigma),
        eps=np.full(M, eps),
        n_tilde=n_tilde, mode=mode,
    )


def blind_sure_loss(
    d: Denoiser, y_batch: np.ndarray, sigma_per_sample: np.ndarray,
    eps_per_sample: np.ndarray,
    rng: Optional[Rng] = None, n_tilde: Optional[np.ndarray] = None,
    mode: str = "train",
) -> Tuple[Tensor, LossReport]:
    """Gaussian risk estimate with per-sample noise level and probe step."""
    sigma_per_sample = np.asarray(sigma_per_sample, dtype=np.float64)
    eps_per_sample = np.asarray(eps_per_sample, dtype=np.float64)
    if sigma_per_sample.shape[0] != y_batch.shape[0]:
        raise ConfigError("sigma_per_sample length must equal batch size")
    if np.any(sigma_per_sample <= 0) or np.any(eps_per_sample <= 0):
        raise ConfigError("per-sample sigma and eps must be > 0")
    if n_tilde is None:
        n_tilde = perturb_gaussian(y_batch.shape, rng)
    return _sure_core(
        d, y_batch,
        sigma_sq=sigma_per_sample ** 2,
        eps=eps_per_sample,
        n_tilde=n_tilde, mode=mode,
    )


def sure_ft_loss(
    d: Denoiser, y_test: np.ndarray, sigma: float, eps: float,
    rng: Optional[Rng] = None, n_tilde: Optional[np.ndarray] = None,
    mode: str = "train",
) -> Tuple[Tensor, LossReport]:
    """Single-image refinement objective: the batch estimator at M=1. The
    parameter-freezing constraint is enforced by the mask, not here."""
    if y_test.ndim != 4 or y_test.shape[0] != 1:
        raise ConfigError("sure_ft_loss expects a single [1,C,H,W] image")
    return sure_loss(d, y_test, sigma, eps, rng=rng, n_tilde=n_tilde, mode=mode)


def pure_loss(
    d: Denoiser, y_batch: np.ndarray, zeta: float, eps_dot: float,
    rng: Optional[Rng] = None, n_dot: Optional[np.ndarray] = None,
    mode: str = "train",
) -> Tuple[Tensor, LossReport]:
    """Poisson risk estimate with a Rademacher probe weighted by the noisy
    image: ||y - h(y)||^2 - zeta*sum(y) + (2*zeta/eps.) (n. o y)'(h(y+eps. n.) - h(y))."""
    if zeta <= 0:
        raise ConfigError("zeta must be > 0")
    if eps_dot <= 0:
        raise ConfigError("eps_dot must be > 0")
    if zeta > PURE_ZETA_WARN:
        warnings.warn(
            f"zeta={zeta} exceeds {PURE_ZETA_WARN}: the Poisson risk estimate "
            "becomes highly inaccurate and training may not converge",
            RuntimeWarning,
        )
    if n_dot is None:
        n_dot = perturb_binary(y_batch.shape, rng)
    pix_axes = tuple(range(1, y_batch.ndim))
    yt = Tensor(y_batch)
    h0 = d.forward(yt, mode)
    resid = yt - h0
    fid_j = (resid * resid).sum(axes=pix_axes)
    h1 = d.forward(Tensor(y_batch + eps_dot * n_dot), mode)
    weighted_probe = Tensor(n_dot * y_batch)
    div_j = (weighted_probe * (h1 - h0)).sum(axes=pix_axes) / eps_dot
    const = float(zeta * np.mean(y_batch.sum(axis=pix_axes)))
    loss = fid_j.mean() - const + (2.0 * zeta) * div_j.mean()
    report = LossReport(
        loss=loss.item(),
        data_fidelity=fid_j.mean().item(),
        constant_term=const,
        divergence_term=2.0 * zeta * div_j.mean().item(),
        divergence_estimate=div_j.mean().item(),
    )
    return loss, report
