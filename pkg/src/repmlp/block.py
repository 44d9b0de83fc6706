"""The RepMLP Block: Global, Channel and Local Perceptrons.

A training-form block computes

    out = BN3(FC3(x)) + sum_k BN_k(DWCONV_k(x)) + broadcast(GP(x))

with FC3 and the depth-wise convs applied in the share-set layout
``(n*c/s, s, h, w)``.  :func:`convert_block` folds the BNs and conv branches
into FC3 so the deploy form is ``FC3'(x) + broadcast(GP(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from repmlp.errors import ConfigurationError, DimensionError
from repmlp.init import RandomInit
from repmlp.reparam import merge_local_into_channel
from repmlp.tensor import (
    BnParams,
    ConvLayer,
    FcLayer,
    as_tensor4,
    bn_inference,
    conv2d,
    fc_forward,
    global_avg_pool,
    relu,
    reshape,
)

TRAIN = "train"
DEPLOY = "deploy"
MODES = (TRAIN, DEPLOY)


@dataclass(frozen=True)
class RepMlpBlockConfig:
    c: int
    h: int
    w: int
    s: int
    local_kernels: Tuple[int, ...] = (1, 3)
    gp_reduction: int = 4
    use_global: bool = True

    def __post_init__(self):
        object.__setattr__(self, "local_kernels", tuple(int(k) for k in self.local_kernels))
        if min(self.c, self.h, self.w, self.s) < 1:
            raise ConfigurationError(f"block dims must be positive: {self}")
        if self.c % self.s:
            raise ConfigurationError(f"share-sets s={self.s} must divide channels c={self.c}")
        for k in self.local_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"local kernel sizes must be odd, got {k}")
        if self.use_global and (self.gp_reduction < 1 or self.c % self.gp_reduction):
            raise ConfigurationError(
                f"gp_reduction={self.gp_reduction} must divide channels c={self.c}"
            )

    @property
    def hw(self) -> int:
        return self.h * self.w


@dataclass(frozen=True, eq=False)
class RepMlpBlock:
    cfg: RepMlpBlockConfig
    mode: str
    fc3: FcLayer
    gp_fc1: Optional[FcLayer] = None
    gp_fc2: Optional[FcLayer] = None
    bn3: Optional[BnParams] = None
    local: List[Tuple[ConvLayer, BnParams]] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == DEPLOY and (self.bn3 is not None or self.local):
            raise ConfigurationError("deploy-mode blocks carry no BN and no conv branches")
        if self.mode == TRAIN and self.bn3 is None:
            raise ConfigurationError("train-mode blocks need the FC3 batch norm")

    def named_arrays(self, prefix="") -> Dict[str, np.ndarray]:
        out = {}
        if self.gp_fc1 is not None:
            out.update(_fc_arrays(self.gp_fc1, prefix + "gp_fc1."))
            out.update(_fc_arrays(self.gp_fc2, prefix + "gp_fc2."))
        out.update(_fc_arrays(self.fc3, prefix + "fc3."))
        if self.bn3 is not None:
            out.update(_bn_arrays(self.bn3, prefix + "bn3."))
        for i, (conv, bn) in enumerate(self.local):
            out[f"{prefix}local.{i}.kernel"] = conv.kernel
            out.update(_bn_arrays(bn, f"{prefix}local.{i}.bn."))
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.named_arrays().values())


def _fc_arrays(fc, prefix):
    out = {prefix + "weight": fc.weight}
    if fc.bias is not None:
        out[prefix + "bias"] = fc.bias
    return out


def _bn_arrays(bn, prefix):
    return {prefix + "mu": bn.mu, prefix + "sigma": bn.sigma, prefix + "gamma": bn.gamma, prefix + "beta": bn.beta}


def make_bn(params, prefix, channels) -> BnParams:
    shape = (channels,)
    return BnParams(
        params(prefix + "mu", shape, "bn.mu"),
        params(prefix + "sigma", shape, "bn.sigma"),
        params(prefix + "gamma", shape, "bn.gamma"),
        params(prefix + "beta", shape, "bn.beta"),
    )


def make_block(cfg: RepMlpBlockConfig, mode=TRAIN, params=None, prefix="") -> RepMlpBlock:
    """Assemble a block, pulling every array from the ``params`` provider."""
    if params is None:
        params = RandomInit(0)
    c, s, hw = cfg.c, cfg.s, cfg.hw
    gp_fc1 = gp_fc2 = None
    if cfg.use_global:
        hidden = c // cfg.gp_reduction
        gp_fc1 = FcLayer(
            params(prefix + "gp_fc1.weight", (hidden, c), "weight", c),
            params(prefix + "gp_fc1.bias", (hidden,), "bias", c),
        )
        gp_fc2 = FcLayer(
            params(prefix + "gp_fc2.weight", (c, hidden), "weight", hidden),
            params(prefix + "gp_fc2.bias", (c,), "bias", hidden),
        )
    fc3_weight = params(prefix + "fc3.weight", (s * hw, hw), "weight", hw)
    if mode == DEPLOY:
        fc3 = FcLayer(fc3_weight, params(prefix + "fc3.bias", (s * hw,), "bias", hw), groups=s)
        return RepMlpBlock(cfg, mode, fc3, gp_fc1, gp_fc2)
    fc3 = FcLayer(fc3_weight, None, groups=s)
    bn3 = make_bn(params, prefix + "bn3.", s)
    local = []
    for i, k in enumerate(cfg.local_kernels):
        kernel = params(f"{prefix}local.{i}.kernel", (s, 1, k, k), "weight", k * k)
        conv = ConvLayer(kernel, None, padding=(k - 1) // 2, groups=s)
        local.append((conv, make_bn(params, f"{prefix}local.{i}.bn.", s)))
    return RepMlpBlock(cfg, mode, fc3, gp_fc1, gp_fc2, bn3, local)


def _check_input(x, block: RepMlpBlock) -> np.ndarray:
    x = as_tensor4(x)
    cfg = block.cfg
    _, c, h, w = x.shape
    if c != cfg.c:
        raise DimensionError(f"channel axis: block expects {cfg.c} channels, got {c}")
    if (h, w) != (cfg.h, cfg.w):
        raise DimensionError(
            f"spatial axes: block is bound to {cfg.h}x{cfg.w} inputs, got {h}x{w}; "
            "split larger maps into patches first"
        )
    return x


def _share_set_layout(x, s):
    n, c, h, w = x.shape
    return reshape(x, (n * c // s, s, h, w))


def global_perceptron(x, block: RepMlpBlock) -> np.ndarray:
    """Average-pool, FC(c -> c/r), ReLU, FC(c/r -> c); returns ``(n, c, 1, 1)``."""
    x = as_tensor4(x)
    n, c = x.shape[:2]
    if block.gp_fc1 is None:
        return np.zeros((n, c, 1, 1), dtype=x.dtype)
    pooled = global_avg_pool(x).reshape(n, c)
    hidden = relu(fc_forward(pooled, block.gp_fc1))
    return fc_forward(hidden, block.gp_fc2, out_shape=(n, c, 1, 1))


def channel_perceptron(x, block: RepMlpBlock) -> np.ndarray:
    """Set-sharing FC3 (followed by its BN in train mode)."""
    x = _check_input(x, block)
    s = block.cfg.s
    xs = _share_set_layout(x, s)
    y = fc_forward(xs, block.fc3, out_shape=xs.shape)
    if block.bn3 is not None:
        y = bn_inference(y, block.bn3)
    return reshape(y, x.shape)


def local_perceptron(x, block: RepMlpBlock) -> np.ndarray:
    """Sum of the depth-wise conv+BN branches in the share-set layout."""
    x = _check_input(x, block)
    if block.mode != TRAIN:
        raise ConfigurationError("deploy-mode blocks have no local perceptron")
    xs = _share_set_layout(x, block.cfg.s)
    out = np.zeros_like(xs)
    for conv, bn in block.local:
        out += bn_inference(conv2d(xs, conv), bn)
    return reshape(out, x.shape)


def block_forward(x, block: RepMlpBlock) -> np.ndarray:
    x = _check_input(x, block)
    out = channel_perceptron(x, block)
    if block.mode == TRAIN and block.local:
        out = out + local_perceptron(x, block)
    if block.gp_fc1 is not None:
        out = out + global_perceptron(x, block)
    return out


def convert_block(block: RepMlpBlock) -> RepMlpBlock:
    """Return the deploy-form equivalent of a train-form block."""
    if block.mode != TRAIN:
        raise ConfigurationError(f"convert_block needs a train-mode block, got {block.mode!r}")
    cfg = block.cfg
    fc3 = merge_local_into_channel(block.fc3, block.bn3, block.local, cfg.s, cfg.h, cfg.w)
    return RepMlpBlock(cfg, DEPLOY, fc3, block.gp_fc1, block.gp_fc2)
