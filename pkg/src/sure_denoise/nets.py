"""Denoiser architectures: conv autoencoder (SDA) and a reduced-depth
residual CNN, built from conv / transposed-conv / batch-norm layers that run
on the autodiff tape.

Conv kernels are im2col + BLAS matmul; transposed conv is the exact adjoint
scatter, with explicit output_padding so stride-2 round trips (28->14->7->14->28)
recover the input shape bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, _ensure_finite


# ---------------------------------------------------------------------------
# functional conv kernels
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    B, C, Hp, Wp = xp.shape
    sB, sC, sH, sW = xp.strides
    view = as_strided(
        xp,
        shape=(B, C, oh, ow, kh, kw),
        strides=(sB, sC, sH * stride, sW * stride, sH, sW),
    )
    # [B*oh*ow, C*kh*kw], contiguous copy
    return np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * oh * ow, C * kh * kw
    )


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, padding: int) -> Tensor:
    """Cross-correlation of x[B,C,H,W] with w[O,C,kh,kw]."""
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    p, s = padding, stride
    oh = (H + 2 * p - kh) // s + 1
    ow = (W + 2 * p - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, oh, ow)
    out2 = cols @ w.data.reshape(O, -1).T
    if b is not None:
        out2 = out2 + b.data
    out = out2.reshape(B, oh, ow, O).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * oh * ow, O)
        grads = []
        if x.requires_grad:
            dcols = g2 @ w.data.reshape(O, -1)
            # [kh,kw,B,C,oh,ow] contiguous so each kernel-offset add is a
            # contiguous block read
            d6 = np.ascontiguousarray(
                dcols.reshape(B, oh, ow, C, kh, kw).transpose(4, 5, 0, 3, 1, 2)
            )
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += d6[ki, kj]
            dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
            grads.append((x, dx))
        if w.requires_grad:
            grads.append((w, (g2.T @ cols).reshape(O, C, kh, kw)))
        if b is not None and b.requires_grad:
            grads.append((b, g2.sum(axis=0)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, bwd, "conv2d")


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Optional[Tensor],
    stride: int, padding: int, output_padding: int,
) -> Tensor:
    """Transposed conv of x[B,Cin,H,W] with w[Cin,Cout,kh,kw]."""
    B, Cin, H, W = x.shape
    Cw, Cout, kh, kw = w.shape
    if Cin != Cw:
        raise ValueError(f"conv_transpose2d channel mismatch: input {Cin}, weight {Cw}")
    s, p, op = stride, padding, output_padding
    if op >= s:
        raise ValueError("output_padding must be smaller than stride")
    OH = (H - 1) * s - 2 * p + kh + op
    OW = (W - 1) * s - 2 * p + kw + op
    Hc = max((H - 1) * s + kh, p + OH)
    Wc = max((W - 1) * s + kw, p + OW)

    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(B * H * W, Cin)
    tmp = x2 @ w.data.reshape(Cin, Cout * kh * kw)
    t6 = np.ascontiguousarray(
        tmp.reshape(B, H, W, Cout, kh, kw).transpose(4, 5, 0, 3, 1, 2)
    )
    canvas = np.zeros((B, Cout, Hc, Wc))
    for ki in range(kh):
        for kj in range(kw):
            canvas[:, :, ki:ki + s * H:s, kj:kj + s * W:s] += t6[ki, kj]
    out = canvas[:, :, p:p + OH, p:p + OW]
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bwd(g):
        gcan = np.zeros((B, Cout, Hc, Wc))
        gcan[:, :, p:p + OH, p:p + OW] = g
        d6 = np.empty((kh, kw, B, Cout, H, W))
        for ki in range(kh):
            for kj in range(kw):
                d6[ki, kj] = gcan[:, :, ki:ki + s * H:s, kj:kj + s * W:s]
        dtmp = np.ascontiguousarray(d6.transpose(2, 4, 5, 3, 0, 1)).reshape(
            B * H * W, Cout * kh * kw
        )
        grads = []
        if x.requires_grad:
            dx2 = dtmp @ w.data.reshape(Cin, -1).T
            grads.append((x, dx2.reshape(B, H, W, Cin).transpose(0, 3, 1, 2)))
        if w.requires_grad:
            grads.append((w, (x2.T @ dtmp).reshape(Cin, Cout, kh, kw)))
        if b is not None and b.requires_grad:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, bwd, "conv_transpose2d")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: Tuple[int, int] = (0, 0)
    stride: int = 1
    padding: int = 0
    output_padding: int = 0

    def to_dict(self):
        d = asdict(self)
        d["kernel"] = list(d["kernel"])
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["kernel"] = tuple(d["kernel"])
        return LayerSpec(**d)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer: owns (name, Tensor) parameters and a spec."""

    spec: LayerSpec

    def params(self) -> List[Tuple[str, Tensor]]:
        return []

    def forward(self, x: Tensor, mode: str) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = spec.in_channels * kh * kw
        self.weight = Tensor(
            _kaiming_uniform(rng, (spec.out_channels, spec.in_channels, kh, kw), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, mode):
        return conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class ConvTranspose2d(Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = spec.in_channels * kh * kw
        self.weight = Tensor(
            _kaiming_uniform(rng, (spec.in_channels, spec.out_channels, kh, kw), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, mode):
        return conv_transpose2d(
            x, self.weight, self.bias,
            self.spec.stride, self.spec.padding, self.spec.output_padding,
        )


class Sigmoid(Layer):
    def __init__(self, spec=None):
        self.spec = spec or LayerSpec(kind="sigmoid")

    def forward(self, x, mode):
        return x.sigmoid()


class ReLU(Layer):
    def __init__(self, spec=None):
        self.spec = spec or LayerSpec(kind="relu")

    def forward(self, x, mode):
        return x.relu()


class BatchNorm2d(Layer):
    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        c = spec.in_channels
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.frozen = False  # frozen => eval statistics, no running-stat updates

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x, mode):
        c = self.spec.in_channels
        if mode == "train" and not self.frozen:
            mean = x.mean(axes=(0, 2, 3), keepdims=True)
            var = ((x - mean) ** 2).mean(axes=(0, 2, 3), keepdims=True)
            m = self.MOMENTUM
            self.running_mean = (1 - m) * self.running_mean + m * mean.data.reshape(c)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(c)
            xhat = (x - mean) / (var + self.EPS).sqrt()
        else:
            mean = Tensor(self.running_mean.reshape(1, c, 1, 1))
            var = Tensor(self.running_var.reshape(1, c, 1, 1))
            xhat = (x - mean) / (var + self.EPS).sqrt()
        g = self.gamma.reshape(1, c, 1, 1)
        b = self.beta.reshape(1, c, 1, 1)
        return xhat * g + b


_LAYER_KINDS = {
    "conv2d": Conv2d,
    "conv_transpose2d": ConvTranspose2d,
    "sigmoid": Sigmoid,
    "relu": ReLU,
    "batch_norm": BatchNorm2d,
}


def _build_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    if spec.kind in ("conv2d", "conv_transpose2d"):
        return _LAYER_KINDS[spec.kind](spec, rng)
    if spec.kind == "batch_norm":
        return BatchNorm2d(spec)
    return _LAYER_KINDS[spec.kind](spec)


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

class Denoiser:
    """A parameterized denoiser h(y; theta): an ordered layer stack, an
    optional residual (h(y) = y - net(y)) wrapper, and a per-parameter
    trainable mask used to freeze parameter subsets during refinement."""

    def __init__(self, layers: List[Layer], architecture_tag: str, residual: bool):
        self.layers = layers
        self.architecture_tag = architecture_tag
        self.residual = residual
        self.param_mask = {name: True for name, _ in self.parameters()}

    def parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, t in layer.params():
                out.append((f"layer{i}.{name}", t))
        return out

    def trainable_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.parameters() if self.param_mask[n]]

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def forward(self, y: Tensor, mode: str = "train") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        expected_c = next(
            (l.spec.in_channels for l in self.layers
             if l.spec.kind in ("conv2d", "conv_transpose2d")), None
        )
        if y.data.ndim != 4:
            raise ValueError(f"expected [B,C,H,W] input, got shape {y.shape}")
        if expected_c is not None and y.shape[1] != expected_c:
            raise ValueError(
                f"channel mismatch: network expects {expected_c}, got {y.shape[1]}"
            )
        out = y
        for layer in self.layers:
            out = layer.forward(out, mode)
        if self.residual:
            if out.shape != y.shape:
                raise ValueError(
                    f"residual wrapper needs matching shapes: {out.shape} vs {y.shape}"
                )
            out = y - out
        return out

    def __call__(self, y: Tensor, mode: str = "train") -> Tensor:
        return self.forward(y, mode)

    def layer_specs(self) -> List[LayerSpec]:
        return [l.spec for l in self.layers]


def build_sda(in_channels: int = 1, seed: int = 0) -> Denoiser:
    """4-layer conv autoencoder: two stride-2 convs down (28->14->7), two
    stride-2 transposed convs back up, sigmoid after every layer.
    Channel plan 1->32->64->32->1."""
    if in_channels < 1:
        raise ValueError("in_channels must be >= 1")
    rng = np.random.default_rng(seed)
    enc1, enc2 = 32, 64
    specs = [
        LayerSpec("conv2d", in_channels, enc1, (3, 3), 2, 1),
        LayerSpec("sigmoid"),
        LayerSpec("conv2d", enc1, enc2, (3, 3), 2, 1),
        LayerSpec("sigmoid"),
        LayerSpec("conv_transpose2d", enc2, enc1, (3, 3), 2, 1, 1),
        LayerSpec("sigmoid"),
        LayerSpec("conv_transpose2d", enc1, in_channels, (3, 3), 2, 1, 1),
        LayerSpec("sigmoid"),
    ]
    layers = [_build_layer(s, rng) for s in specs]
    return Denoiser(layers, "sda", residual=False)


def build_dncnn_lite(
    depth: int = 7, channels: int = 32, in_channels: int = 1, seed: int = 0
) -> Denoiser:
    """Residual CNN h(y) = y - net(y): conv+relu, (depth-2) conv+bn+relu
    blocks, then a zero-initialized final conv so training starts from the
    identity denoiser."""
    if depth < 3:
        raise ValueError("depth must be >= 3")
    rng = np.random.default_rng(seed)
    specs = [LayerSpec("conv2d", in_channels, channels, (3, 3), 1, 1), LayerSpec("relu")]
    for _ in range(depth - 2):
        specs += [
            LayerSpec("conv2d", channels, channels, (3, 3), 1, 1),
            LayerSpec("batch_norm", channels),
            LayerSpec("relu"),
        ]
    specs.append(LayerSpec("conv2d", channels, in_channels, (3, 3), 1, 1))
    layers = [_build_layer(s, rng) for s in specs]
    layers[-1].weight.data[:] = 0.0
    layers[-1].bias.data[:] = 0.0
    return Denoiser(layers, "dncnn_lite", residual=True)


def build_from_specs(
    specs: List[LayerSpec], architecture_tag: str, residual: bool, seed: int = 0
) -> Denoiser:
    rng = np.random.default_rng(seed)
    return Denoiser([_build_layer(s, rng) for s in specs], architecture_tag, residual)


def apply_param_mask(d: Denoiser, policy: str) -> None:
    """all_trainable marks everything trainable; freeze_batch_norm pins every
    batch-norm scale/shift and its running statistics."""
    if policy == "all_trainable":
        for name in d.param_mask:
            d.param_mask[name] = True
        for layer in d.layers:
            if isinstance(layer, BatchNorm2d):
                layer.frozen = False
    elif policy == "freeze_batch_norm":
        for i, layer in enumerate(d.layers):
            if isinstance(layer, BatchNorm2d):
                layer.frozen = True
                for name, _ in layer.params():
                    d.param_mask[f"layer{i}.{name}"] = False
    else:
        raise ValueError(f"unknown mask policy {policy!r}")
