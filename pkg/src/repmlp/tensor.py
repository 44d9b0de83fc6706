"""Minimal NCHW tensor primitives.

Feature maps are plain ``numpy.ndarray`` objects of dtype float32 and shape
``(n, c, h, w)`` stored C-contiguous, so the flat index of element
``[i, j, u, v]`` is ``((i * c + j) * h + u) * w + v``.  Every function here is
pure: inputs are never modified.

Convolution is computed directly by sliding the kernel over the zero-padded
input.  Kernel offsets are visited in row-major order and each offset
contributes one accumulation step, so the reduction order per output element
is fixed.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from repmlp.errors import ConfigurationError, DimensionError, ParameterError

DTYPE = np.float32
BN_EPS = 1e-5

Padding = Union[int, Tuple[int, int, int, int]]


def as_tensor4(x, name="input") -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array of rank 4."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise DimensionError(f"{name} must be rank 4 (n, c, h, w), got shape {arr.shape}")
    return arr


def _vector(x, name) -> Optional[np.ndarray]:
    if x is None:
        return None
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ConvLayer:
    """2-D convolution parameters.

    ``kernel`` has shape ``(out_channels, in_channels // groups, kh, kw)``.
    ``padding`` is either one zero-padding width for all four borders or a
    ``(top, bottom, left, right)`` tuple.
    """

    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    padding: Padding = 0
    stride: int = 1
    groups: int = 1

    def __post_init__(self):
        kernel = np.ascontiguousarray(self.kernel, dtype=DTYPE)
        if kernel.ndim != 4:
            raise DimensionError(f"conv kernel must be rank 4, got shape {kernel.shape}")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", _vector(self.bias, "conv bias"))
        if self.groups < 1 or self.stride < 1:
            raise ConfigurationError("groups and stride must be positive")
        if kernel.shape[0] % self.groups:
            raise ConfigurationError(
                f"out_channels={kernel.shape[0]} not divisible by groups={self.groups}"
            )
        if self.bias is not None and self.bias.shape[0] != kernel.shape[0]:
            raise DimensionError(
                f"conv bias length {self.bias.shape[0]} != out_channels {kernel.shape[0]}"
            )
        if any(p < 0 for p in self.pads):
            raise ConfigurationError(f"padding must be non-negative, got {self.padding}")

    @property
    def pads(self) -> Tuple[int, int, int, int]:
        if isinstance(self.padding, (int, np.integer)):
            p = int(self.padding)
            return (p, p, p, p)
        return tuple(int(p) for p in self.padding)

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_per_group(self) -> int:
        return self.kernel.shape[1]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        top, bottom, left, right = self.pads
        kh, kw = self.kernel_size
        span_h = h + top + bottom - kh
        span_w = w + left + right - kw
        if span_h < 0 or span_w < 0:
            raise ConfigurationError(
                f"kernel {kh}x{kw} larger than padded input {h + top + bottom}x{w + left + right}"
            )
        if span_h % self.stride or span_w % self.stride:
            raise ConfigurationError(
                f"non-integer output size for input {h}x{w}, kernel {kh}x{kw}, "
                f"padding {self.pads}, stride {self.stride}"
            )
        return span_h // self.stride + 1, span_w // self.stride + 1


@dataclass(frozen=True, eq=False)
class FcLayer:
    """Fully-connected layer ``y = x @ weight.T + bias``.

    With ``groups == s > 1`` the layer is a set-sharing FC: ``weight`` has
    shape ``(s * q, p)`` and maps each of the ``s`` consecutive length-``p``
    slices of the input vector with its own ``(q, p)`` block.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    groups: int = 1

    def __post_init__(self):
        weight = np.ascontiguousarray(self.weight, dtype=DTYPE)
        if weight.ndim != 2:
            raise DimensionError(f"fc weight must be a matrix, got shape {weight.shape}")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", _vector(self.bias, "fc bias"))
        if self.groups < 1 or weight.shape[0] % self.groups:
            raise ConfigurationError(
                f"fc weight rows {weight.shape[0]} not divisible by groups={self.groups}"
            )
        if self.bias is not None and self.bias.shape[0] != weight.shape[0]:
            raise DimensionError(
                f"fc bias length {self.bias.shape[0]} != output length {weight.shape[0]}"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class BnParams:
    """Inference-time batch norm: ``gamma / sigma * (x - mu) + beta`` per channel.

    ``sigma`` is the standard deviation with epsilon already folded in; use
    :meth:`from_running` to build one from a running variance.
    """

    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        for field in ("mu", "sigma", "gamma", "beta"):
            object.__setattr__(self, field, _vector(getattr(self, field), f"bn {field}"))
        lengths = {len(self.mu), len(self.sigma), len(self.gamma), len(self.beta)}
        if len(lengths) != 1:
            raise DimensionError(f"bn vectors have mismatched lengths {sorted(lengths)}")

    @classmethod
    def from_running(cls, mean, var, gamma, beta, eps: float = BN_EPS) -> "BnParams":
        var = np.asarray(var, dtype=np.float64)
        sigma = np.sqrt(var + eps)
        return cls(mean, sigma, gamma, beta, eps)

    @classmethod
    def identity(cls, channels: int) -> "BnParams":
        return cls(
            np.zeros(channels), np.ones(channels), np.ones(channels), np.zeros(channels), 0.0
        )

    def __len__(self):
        return len(self.mu)

    def check(self):
        if not np.all(self.sigma > 0):
            raise ParameterError("bn sigma must be strictly positive")

    def scale(self) -> np.ndarray:
        """Per-channel ``gamma / sigma``."""
        self.check()
        return (self.gamma / self.sigma).astype(DTYPE)

    def shift(self) -> np.ndarray:
        """Per-channel ``beta - mu * gamma / sigma``."""
        return (self.beta - self.mu * self.scale()).astype(DTYPE)


def conv2d(x, layer: ConvLayer) -> np.ndarray:
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise DimensionError(
            f"channel axis: input has {c} channels, conv expects "
            f"{layer.c_per_group} x {layer.groups} groups = {layer.in_channels}"
        )
    oh, ow = layer.output_hw(h, w)
    top, bottom, left, right = layer.pads
    if any(layer.pads):
        x = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    g, cpg = layer.groups, layer.c_per_group
    opg = layer.out_channels // g
    kh, kw = layer.kernel_size
    st = layer.stride
    xg = x.reshape(n, g, cpg, x.shape[2], x.shape[3])
    fg = layer.kernel.reshape(g, opg, cpg, kh, kw)
    if kh == kw == 1 and st == 1:
        # single tap: one accumulation step, no zero-initialized buffer needed
        out = np.matmul(fg[:, :, :, 0, 0], xg.reshape(n, g, cpg, oh * ow))
        out = out.reshape(n, layer.out_channels, oh, ow)
        if layer.bias is not None:
            out += layer.bias[None, :, None, None]
        return out
    out = np.zeros((n, g, opg, oh * ow), dtype=DTYPE)
    for a in range(kh):
        for b in range(kw):
            window = xg[:, :, :, a : a + st * (oh - 1) + 1 : st, b : b + st * (ow - 1) + 1 : st]
            window = window.reshape(n, g, cpg, oh * ow)
            tap = fg[:, :, :, a, b]
            if cpg == 1:
                out += tap[None, :, :, :] * window
            else:
                out += np.matmul(tap, window)
    out = out.reshape(n, layer.out_channels, oh, ow)
    if layer.bias is not None:
        out += layer.bias[None, :, None, None]
    return out


def fc_forward(x, layer: FcLayer, out_shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Apply ``layer`` to every length-``in_features`` vector of ``x``.

    ``x`` is flattened in memory order into ``(-1, in_features)`` rows. The
    result has shape ``(rows, out_features)`` unless ``out_shape`` is given.
    """
    x = np.ascontiguousarray(x, dtype=DTYPE)
    in_len = layer.in_features
    if x.size % in_len:
        raise DimensionError(
            f"input of {x.size} elements is not a whole number of length-{in_len} vectors"
        )
    v = x.reshape(-1, in_len)
    if layer.groups == 1:
        out = v @ layer.weight.T
    else:
        s = layer.groups
        q, p = layer.weight.shape[0] // s, layer.weight.shape[1]
        sets = v.reshape(-1, s, p).transpose(1, 0, 2)
        blocks = layer.weight.reshape(s, q, p).transpose(0, 2, 1)
        out = np.matmul(sets, blocks).transpose(1, 0, 2).reshape(-1, s * q)
    if layer.bias is not None:
        out += layer.bias
    out = np.ascontiguousarray(out, dtype=DTYPE)
    if out_shape is not None:
        out = reshape(out, out_shape)
    return out


def reshape(t, new_dims: Sequence[int]) -> np.ndarray:
    """Change the shape specification without reordering elements in memory."""
    arr = np.ascontiguousarray(t)
    new_dims = tuple(int(d) for d in new_dims)
    if math.prod(new_dims) != arr.size:
        raise DimensionError(f"cannot reshape {arr.shape} ({arr.size} elements) to {new_dims}")
    return arr.reshape(new_dims)


_calibrating = False


@contextmanager
def bn_calibration():
    """While active, :func:`bn_inference` first overwrites each BN's running
    mean and deviation with the statistics of the batch it receives."""
    global _calibrating
    previous, _calibrating = _calibrating, True
    try:
        yield
    finally:
        _calibrating = previous


def bn_inference(x, bn: BnParams) -> np.ndarray:
    x = as_tensor4(x)
    if len(bn) != x.shape[1]:
        raise DimensionError(f"channel axis: bn has {len(bn)} channels, input has {x.shape[1]}")
    if _calibrating:
        bn.mu[:] = x.mean(axis=(0, 2, 3), dtype=np.float64)
        bn.sigma[:] = np.sqrt(x.var(axis=(0, 2, 3), dtype=np.float64) + bn.eps)
    bn.check()
    scale = (bn.gamma / bn.sigma)[None, :, None, None]
    return ((x - bn.mu[None, :, None, None]) * scale + bn.beta[None, :, None, None]).astype(DTYPE)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), DTYPE(0))


def gelu(x) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    x = np.asarray(x, dtype=DTYPE)
    cdf = erf(x * _INV_SQRT2)
    cdf += DTYPE(1.0)
    cdf *= DTYPE(0.5)
    return x * cdf


_INV_SQRT2 = DTYPE(1.0 / math.sqrt(2.0))
_ACTIVATIONS = {"gelu": gelu, "relu": relu}


def activation(x, kind: str) -> np.ndarray:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None
    return fn(x)


def global_avg_pool(x) -> np.ndarray:
    x = as_tensor4(x)
    n, c, h, w = x.shape
    return (x.reshape(n, c, h * w).sum(axis=2, dtype=DTYPE) / DTYPE(h * w)).reshape(n, c, 1, 1)


def split_patches(x, ph: int, pw: int) -> np.ndarray:
    """Tile ``(n, c, h, w)`` into ``(n * gh * gw, c, ph, pw)`` patches.

    Patches of one sample are consecutive and ordered row-major over the
    ``gh x gw`` patch grid.
    """
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if ph <= 0 or pw <= 0 or h % ph or w % pw:
        raise ConfigurationError(f"patch size {ph}x{pw} does not tile a {h}x{w} map")
    gh, gw = h // ph, w // pw
    tiles = x.reshape(n, c, gh, ph, gw, pw).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(tiles).reshape(n * gh * gw, c, ph, pw)


def restore_patches(patches, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`split_patches` for an original ``h x w`` map."""
    patches = as_tensor4(patches, "patches")
    m, c, ph, pw = patches.shape
    if h % ph or w % pw:
        raise ConfigurationError(f"patch size {ph}x{pw} does not tile a {h}x{w} map")
    gh, gw = h // ph, w // pw
    if m % (gh * gw):
        raise DimensionError(f"{m} patches is not a multiple of the {gh}x{gw} grid")
    n = m // (gh * gw)
    grid = patches.reshape(n, gh, gw, c, ph, pw).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(grid).reshape(n, c, h, w)
