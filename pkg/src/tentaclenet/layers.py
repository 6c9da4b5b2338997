"""Layer records and their inference-time forward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitcore import BitTensor, binarize, im2row_binary, pack_bits, window_view, xnor_gemm

FP_KINDS = ("conv", "dense", "batchnorm", "relu", "maxpool", "avgpool", "globalavgpool", "softmax")


class DegenerateBatchNorm(ValueError):
    pass


@dataclass
class BatchNormParams:
    mu: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("mu", "var", "gamma", "beta"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.var < 0):
            raise ValueError("variance must be non-negative")

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5) -> BatchNormParams:
        return cls(
            np.zeros(channels), np.ones(channels), np.ones(channels), np.zeros(channels), eps
        )

    @property
    def channels(self) -> int:
        return self.mu.shape[0]

    def apply(self, x: np.ndarray, axis: int = -3) -> np.ndarray:
        shape = [1] * x.ndim
        shape[axis] = -1
        scale = (self.gamma / np.sqrt(self.var + np.float32(self.eps))).reshape(shape)
        return ((x - self.mu.reshape(shape)) * scale + self.beta.reshape(shape)).astype(np.float32)


@dataclass
class Threshold:
    """Fused batch-norm + sign: bit = x >= c, or x <= c where ``flipped``."""

    c: np.ndarray
    flipped: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float32)
        self.flipped = np.asarray(self.flipped, dtype=bool)


def alpha_from_weights(filt) -> float:
    w = np.asarray(filt, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("empty filter")
    if not np.isfinite(w).all():
        raise ValueError("non-finite filter weights")
    return float(np.abs(w).sum() / w.size)


def fused_threshold(bn: BatchNormParams) -> Threshold:
    """Fold batch-norm followed by sign into per-channel comparisons.

    c = mu - (beta / gamma) * sqrt(var + eps); a negative gamma flips the
    comparison so the bit still equals sign(bn(x)) off the boundary.
    """
    gamma = bn.gamma.astype(np.float64)
    if np.any(gamma == 0):
        raise DegenerateBatchNorm("degenerate batch-norm scale; channel output is constant beta")
    c = bn.mu.astype(np.float64) - (bn.beta.astype(np.float64) / gamma) * np.sqrt(
        bn.var.astype(np.float64) + bn.eps
    )
    return Threshold(c.astype(np.float32), gamma < 0)


def binact_apply(fmap: np.ndarray, thr: Threshold) -> BitTensor:
    """Binarize a C x H x W (or B x C x H x W) map with per-channel thresholds."""
    x = np.asarray(fmap, dtype=np.float32)
    if x.ndim < 3 or x.shape[-3] != thr.c.shape[0]:
        raise ValueError(f"fmap {x.shape} does not match {thr.c.shape[0]} thresholds")
    if np.isnan(x).any():
        raise ValueError("NaN in feature map")
    c = thr.c.reshape(-1, 1, 1)
    flip = thr.flipped.reshape(-1, 1, 1)
    bits = np.where(flip, x <= c, x >= c)
    return pack_bits(bits)


@dataclass
class BinaryConvLayer:
    """Binary convolution block inside a tentacle.

    Training state (``master``, ``bn`` running statistics) lives alongside the
    finalized inference record (``packed_weights``, ``alpha``, ``threshold``).
    There is deliberately no activation-side scale. ``threshold`` is set for
    blocks that feed another binary layer; the last block of a tentacle keeps
    ``bn`` and emits floats.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    pool: int = 0
    binact: bool = True
    master: np.ndarray | None = None
    bn: BatchNormParams | None = None
    packed_weights: BitTensor | None = None
    alpha: np.ndarray | None = None
    threshold: Threshold | None = None

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def finalize(self) -> None:
        if self.master is None:
            raise ValueError("no master weights to finalize")
        w = self.master.reshape(self.out_channels, self.fan_in)
        self.packed_weights = pack_bits(w >= 0)
        self.alpha = np.array([alpha_from_weights(r) for r in w], dtype=np.float32)
        if self.binact:
            self.threshold = fused_threshold(self.bn)


@dataclass
class FPLayer:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0
    kernel: int = 1
    bn: BatchNormParams | None = None

    def __post_init__(self):
        if self.kind not in FP_KINDS:
            raise ValueError(f"unknown fp layer kind {self.kind!r}")
        if self.kind == "conv" and (self.weight is None or self.weight.ndim != 4):
            raise ValueError("conv layer needs a 4-d weight (F, C, kh, kw)")
        if self.kind == "dense" and (self.weight is None or self.weight.ndim != 2):
            raise ValueError("dense layer needs a 2-d weight (out, in)")
        if self.kind == "batchnorm" and self.bn is None:
            raise ValueError("batchnorm layer needs BatchNormParams")


def conv2d(x: np.ndarray, weight: np.ndarray, bias=None, stride=1, pad=0, fill=0.0) -> np.ndarray:
    """Float convolution of B x C x H x W by F x C x kh x kw via im2col."""
    f, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {c}")
    cols, ho, wo = window_view(x, kh, kw, stride, pad, fill)
    out = cols @ weight.reshape(f, -1).T
    if bias is not None:
        out = out + bias
    return out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2)


def pool2d(x: np.ndarray, k: int, mode: str = "max") -> np.ndarray:
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ValueError(f"pool size {k} larger than map {h}x{w}")
    v = x[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k)
    return v.max(axis=(3, 5)) if mode == "max" else v.mean(axis=(3, 5))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def fp_forward(layer: FPLayer, x: np.ndarray) -> np.ndarray:
    """Full-precision forward; accepts an unbatched or batched input."""
    x = np.asarray(x, dtype=np.float32)
    k = layer.kind
    if k in ("dense", "softmax", "relu"):
        batched = x.ndim >= 2 if k == "dense" else True
    else:
        batched = x.ndim == 4
    if k == "dense":
        xb = x if batched else x[None]
        if xb.shape[-1] != layer.weight.shape[1]:
            raise ValueError(f"dense expects {layer.weight.shape[1]} inputs, got {xb.shape[-1]}")
        out = xb @ layer.weight.T
        if layer.bias is not None:
            out = out + layer.bias
        return (out if batched else out[0]).astype(np.float32)
    if k == "relu":
        return np.maximum(x, 0)
    if k == "softmax":
        return softmax(x).astype(np.float32)
    xb = x if batched else x[None]
    if xb.ndim != 4:
        raise ValueError(f"{k} expects C x H x W input, got shape {x.shape}")
    if k == "conv":
        out = conv2d(xb, layer.weight, layer.bias, layer.stride, layer.pad)
    elif k == "batchnorm":
        if xb.shape[1] != layer.bn.channels:
            raise ValueError("batchnorm channel mismatch")
        out = layer.bn.apply(xb, axis=1)
    elif k in ("maxpool", "avgpool"):
        out = pool2d(xb, layer.kernel, "max" if k == "maxpool" else "avg")
    else:  # globalavgpool
        out = xb.mean(axis=(2, 3))
    out = out.astype(np.float32)
    return out if batched else out[0]


def binary_conv_forward(inp: BitTensor, layer: BinaryConvLayer) -> np.ndarray:
    """alpha_f * (2*popcount(xnor) - n) per output element, F x H' x W' (batched if input is)."""
    shape = inp.shape
    if len(shape) not in (3, 4) or shape[-3] != layer.in_channels:
        raise ValueError(f"input {shape} does not match layer with {layer.in_channels} channels")
    if layer.packed_weights is None:
        raise ValueError("layer is not finalized")
    batch = shape[0] if len(shape) == 4 else 1
    h, w = shape[-2], shape[-1]
    k, s, p = layer.kernel, layer.stride, layer.pad
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    rows = im2row_binary(inp, k, k, s, p)
    ints = xnor_gemm(rows, layer.packed_weights)
    out = (ints.astype(np.float32) * layer.alpha).reshape(batch, ho, wo, layer.out_channels)
    out = out.transpose(0, 3, 1, 2)
    return out if len(shape) == 4 else out[0]


def bit_maxpool(t: BitTensor, k: int) -> BitTensor:
    """Max pooling over +-1 values is a logical OR over the window."""
    bits = t.to_bits()
    squeeze = bits.ndim == 3
    if squeeze:
        bits = bits[None]
    out = pool2d(bits, k, "max")
    return pack_bits(out[0] if squeeze else out)


def network_forward(model, x: np.ndarray) -> np.ndarray:
    """Logits for one input (C x H x W) or a batch (B x C x H x W)."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.shape[1:] != tuple(model.spec.input_shape):
        raise ValueError(f"input shape {x.shape} does not match {model.spec.input_shape}")
    if model.binary:
        feats = _binary_features(model, xb)
    else:
        feats = _float_features(model, xb)
    logits = fp_forward(model.fc, np.concatenate(feats, axis=1))
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    return logits[0] if single else logits


def _head(model, z: np.ndarray) -> np.ndarray:
    if model.spec.head_kind == "global_pool":
        return z.mean(axis=(2, 3))
    return z.reshape(z.shape[0], -1)


def _binary_features(model, xb):
    sh = model.shared
    z = fp_forward(sh.conv, xb)
    bits = binact_apply(z, sh.threshold)
    if sh.pool:
        bits = bit_maxpool(bits, sh.pool)
    feats = []
    for ti, tentacle in enumerate(model.tentacles):
        h = bits
        for li, layer in enumerate(tentacle):
            try:
                z = binary_conv_forward(h, layer)
            except ValueError as exc:
                raise ValueError(f"tentacle {ti} layer {li}: {exc}") from exc
            if layer.binact:
                h = binact_apply(z, layer.threshold)
                if layer.pool:
                    h = bit_maxpool(h, layer.pool)
            else:
                z = layer.bn.apply(z, axis=1)
                if layer.pool:
                    z = pool2d(z, layer.pool)
                feats.append(_head(model, z))
    return feats


def _float_features(model, xb):
    sh = model.shared
    z = fp_forward(sh.conv, xb)
    a = np.maximum(sh.bn.apply(z, axis=1), 0)
    if sh.pool:
        a = pool2d(a, sh.pool)
    feats = []
    for tentacle in model.tentacles:
        h = a
        for layer in tentacle:
            z = layer.bn.apply(conv2d(h, layer.master, None, layer.stride, layer.pad), axis=1)
            if layer.binact:
                z = np.maximum(z, 0)
            if layer.pool:
                z = pool2d(z, layer.pool)
            h = z
        feats.append(_head(model, h))
    return feats
