"""Hierarchical RepMLPNet: stem, four stages of (RepMLP Block, FFN) pairs,
inter-stage embeddings and a classification head.

Stage ``i`` (0-based) works on ``C * 2**i`` channels at ``H / 2**(i+2)`` by
``W / 2**(i+2)`` pixels.  Each entry of ``blocks_per_stage`` counts one RepMLP
Block followed by one FFN (1x1 conv, GELU, 1x1 conv), both with identity
shortcuts.  Every conv outside the RepMLP Blocks is followed by a BN in train
mode; deploy mode folds those BNs into conv biases.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from repmlp.block import (
    DEPLOY,
    MODES,
    TRAIN,
    RepMlpBlock,
    RepMlpBlockConfig,
    block_forward,
    convert_block,
    make_block,
    make_bn,
    _bn_arrays,
)
from repmlp.errors import ConfigurationError
from repmlp.init import RandomInit
from repmlp.reparam import fuse_bn_conv
from repmlp.tensor import (
    DTYPE,
    BnParams,
    ConvLayer,
    FcLayer,
    as_tensor4,
    bn_calibration,
    bn_inference,
    conv2d,
    fc_forward,
    gelu,
    global_avg_pool,
    restore_patches,
    split_patches,
)

NUM_STAGES = 4
STEM_STRIDE = 4
DOWNSAMPLE_KINDS = ("embed2x2", "conv3", "conv5")


@dataclass(frozen=True)
class NetConfig:
    blocks_per_stage: Tuple[int, ...]
    base_channels: int
    share_sets: Tuple[int, ...]
    input_hw: Tuple[int, int] = (224, 224)
    num_classes: int = 1000
    ffn_ratio: int = 4
    downsample_kind: str = "embed2x2"
    local_kernels: Tuple[int, ...] = (1, 3)
    gp_reduction: int = 4
    use_global: bool = True

    def __post_init__(self):
        for name in ("blocks_per_stage", "share_sets", "input_hw", "local_kernels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.blocks_per_stage) != NUM_STAGES or len(self.share_sets) != NUM_STAGES:
            raise ConfigurationError("blocks_per_stage and share_sets need exactly four entries")
        if len(self.input_hw) != 2:
            raise ConfigurationError(f"input_hw must be (H, W), got {self.input_hw}")
        H, W = self.input_hw
        if H <= 0 or W <= 0 or H % 32 or W % 32:
            raise ConfigurationError(f"input resolution {H}x{W} must be divisible by 32")
        if self.base_channels < 1 or self.num_classes < 1 or self.ffn_ratio < 1:
            raise ConfigurationError("base_channels, num_classes and ffn_ratio must be positive")
        if any(b < 0 for b in self.blocks_per_stage):
            raise ConfigurationError("blocks_per_stage entries must be non-negative")
        if self.downsample_kind not in DOWNSAMPLE_KINDS:
            raise ConfigurationError(
                f"downsample_kind must be one of {DOWNSAMPLE_KINDS}, got {self.downsample_kind!r}"
            )
        for i in range(NUM_STAGES):
            self.block_config(i)

    def stage_channels(self, i: int) -> int:
        return self.base_channels * 2**i

    def stage_hw(self, i: int) -> Tuple[int, int]:
        H, W = self.input_hw
        return H // 2 ** (i + 2), W // 2 ** (i + 2)

    def block_config(self, i: int) -> RepMlpBlockConfig:
        h, w = self.stage_hw(i)
        return RepMlpBlockConfig(
            self.stage_channels(i),
            h,
            w,
            self.share_sets[i],
            self.local_kernels,
            self.gp_reduction,
            self.use_global,
        )

    def replace(self, **changes) -> "NetConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d) -> "NetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        missing = {f.name for f in dataclasses.fields(cls) if f.default is dataclasses.MISSING} - set(d)
        if missing:
            raise ConfigurationError(f"config is missing required keys {sorted(missing)}")
        return cls(**d)


NAMED_CONFIGS = {
    "T224": NetConfig((2, 2, 6, 2), 64, (1, 4, 16, 128), (224, 224)),
    "B224": NetConfig((2, 2, 12, 2), 96, (1, 4, 32, 128), (224, 224)),
    "T256": NetConfig((2, 2, 6, 2), 64, (1, 4, 16, 128), (256, 256)),
    "B256": NetConfig((2, 2, 12, 2), 96, (1, 4, 32, 128), (256, 256)),
    "D256": NetConfig((2, 2, 18, 2), 80, (1, 4, 16, 128), (256, 256)),
    "L256": NetConfig((2, 2, 18, 2), 96, (1, 4, 32, 256), (256, 256)),
}


@dataclass(frozen=True, eq=False)
class ConvBn:
    """A conv optionally followed by an inference BN."""

    conv: ConvLayer
    bn: Optional[BnParams] = None

    def __call__(self, x):
        y = conv2d(x, self.conv)
        return bn_inference(y, self.bn) if self.bn is not None else y

    def fused(self) -> "ConvBn":
        return ConvBn(fuse_bn_conv(self.conv, self.bn)) if self.bn is not None else self

    def named_arrays(self, prefix):
        out = {prefix + "conv.kernel": self.conv.kernel}
        if self.conv.bias is not None:
            out[prefix + "conv.bias"] = self.conv.bias
        if self.bn is not None:
            out.update(_bn_arrays(self.bn, prefix + "bn."))
        return out


@dataclass(frozen=True, eq=False)
class Ffn:
    expand: ConvBn
    project: ConvBn

    def __call__(self, x):
        return self.project(gelu(self.expand(x)))

    def named_arrays(self, prefix):
        return {**self.expand.named_arrays(prefix + "expand."), **self.project.named_arrays(prefix + "project.")}


@dataclass(frozen=True, eq=False)
class Network:
    cfg: NetConfig
    mode: str
    stem: ConvBn
    downsamples: List[List[ConvBn]]
    stages: List[List[Tuple[RepMlpBlock, Ffn]]]
    head: FcLayer

    def named_arrays(self) -> Dict[str, np.ndarray]:
        out = dict(self.stem.named_arrays("stem."))
        for i, stage in enumerate(self.stages):
            if i > 0:
                for j, layer in enumerate(self.downsamples[i - 1]):
                    out.update(layer.named_arrays(f"down{i}.{j}."))
            for j, (block, ffn) in enumerate(stage):
                out.update(block.named_arrays(f"stage{i}.{j}.block."))
                out.update(ffn.named_arrays(f"stage{i}.{j}.ffn."))
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.named_arrays().values())

    def __call__(self, x):
        return net_forward(self, x)


def _make_conv_bn(params, prefix, mode, c_in, c_out, k, stride=1, padding=0, groups=1) -> ConvBn:
    fan_in = (c_in // groups) * k * k
    kernel = params(prefix + "conv.kernel", (c_out, c_in // groups, k, k), "weight", fan_in)
    if mode == DEPLOY:
        bias = params(prefix + "conv.bias", (c_out,), "bias", fan_in)
        return ConvBn(ConvLayer(kernel, bias, padding, stride, groups))
    return ConvBn(ConvLayer(kernel, None, padding, stride, groups), make_bn(params, prefix + "bn.", c_out))


def _make_downsample(cfg: NetConfig, params, prefix, mode, c_in, c_out) -> List[ConvBn]:
    if cfg.downsample_kind == "embed2x2":
        return [_make_conv_bn(params, prefix + "0.", mode, c_in, c_out, 2, stride=2)]
    k = 3 if cfg.downsample_kind == "conv3" else 5
    p = (k - 1) // 2
    # asymmetric padding keeps the stride-2 output exactly half of an even input
    pads = (p, p - 1, p, p - 1)
    return [
        _make_conv_bn(params, prefix + "0.", mode, c_in, c_out, 1),
        _make_conv_bn(params, prefix + "1.", mode, c_out, c_out, k, stride=2, padding=pads, groups=c_out),
    ]


CALIBRATION_SAMPLES = 64  # per channel at the coarsest stage


def build_net(cfg: NetConfig, seed=0, mode=TRAIN, params=None, calibrate=True) -> Network:
    """Assemble a network; arrays come from ``params`` or a seeded initializer.

    A seeded train-mode network gets BN running statistics measured on a random
    batch (see :func:`calibrate_bn`), so activations keep a trained network's
    scale however deep it is.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    calibrate = calibrate and params is None and mode == TRAIN
    if params is None:
        params = RandomInit(seed)
    C = cfg.base_channels
    stem = _make_conv_bn(params, "stem.", mode, 3, C, STEM_STRIDE, stride=STEM_STRIDE)
    downsamples, stages = [], []
    for i in range(NUM_STAGES):
        c = cfg.stage_channels(i)
        if i > 0:
            downsamples.append(_make_downsample(cfg, params, f"down{i}.", mode, c // 2, c))
        bcfg = cfg.block_config(i)
        units = []
        for j in range(cfg.blocks_per_stage[i]):
            prefix = f"stage{i}.{j}."
            block = make_block(bcfg, mode, params, prefix + "block.")
            hidden = c * cfg.ffn_ratio
            ffn = Ffn(
                _make_conv_bn(params, prefix + "ffn.expand.", mode, c, hidden, 1),
                _make_conv_bn(params, prefix + "ffn.project.", mode, hidden, c, 1),
            )
            units.append((block, ffn))
        stages.append(units)
    c_last = cfg.stage_channels(NUM_STAGES - 1)
    head = FcLayer(
        params("head.weight", (cfg.num_classes, c_last), "weight", c_last),
        params("head.bias", (cfg.num_classes,), "bias", c_last),
    )
    net = Network(cfg, mode, stem, downsamples, stages, head)
    if calibrate:
        calibrate_bn(net, seed)
    return net


def calibrate_bn(net: Network, seed=0, batch=None):
    """Set every BN's running statistics from one seeded standard-normal batch.

    The default batch is the smallest that gives every channel of the last
    stage ``CALIBRATION_SAMPLES`` values, so no variance is estimated from a
    handful of points.
    """
    if net.mode != TRAIN:
        raise ConfigurationError("only train-mode networks have BN layers to calibrate")
    if batch is None:
        h, w = net.cfg.stage_hw(NUM_STAGES - 1)
        batch = max(2, -(-CALIBRATION_SAMPLES // (h * w)))
    x = np.random.default_rng(seed).standard_normal((batch, 3) + net.cfg.input_hw).astype(DTYPE)
    with bn_calibration():
        net_forward(net, x)


def convert_net(net: Network) -> Network:
    """Deploy-form equivalent of a train-form network."""
    if net.mode != TRAIN:
        raise ConfigurationError(f"convert_net needs a train-mode network, got {net.mode!r}")
    stages = [
        [(convert_block(block), Ffn(ffn.expand.fused(), ffn.project.fused())) for block, ffn in stage]
        for stage in net.stages
    ]
    downsamples = [[layer.fused() for layer in ds] for ds in net.downsamples]
    return Network(net.cfg, DEPLOY, net.stem.fused(), downsamples, stages, net.head)


def _run_stage(x, units):
    for block, ffn in units:
        x = x + block_forward(x, block)
        x = x + ffn(x)
    return x


def _stage_inputs(net: Network, x, i):
    if i == 0:
        return net.stem(x)
    for layer in net.downsamples[i - 1]:
        x = layer(x)
    return x


def stage_features(net: Network, x) -> List[np.ndarray]:
    """Outputs of the four stages for inputs at the native resolution."""
    x = as_tensor4(x)
    feats = []
    for i, units in enumerate(net.stages):
        x = _run_stage(_stage_inputs(net, x, i), units)
        feats.append(x)
    return feats


def net_forward(net: Network, x) -> np.ndarray:
    """Logits ``(n, num_classes)`` for ``(n, 3, H, W)`` inputs."""
    feat = stage_features(net, x)[-1]
    pooled = global_avg_pool(feat).reshape(feat.shape[0], -1)
    return fc_forward(pooled, net.head)


def patch_grids(cfg: NetConfig, input_hw: Sequence[int]) -> List[Tuple[int, int]]:
    """Patch grid ``(rows, cols)`` used at each stage for an ``input_hw`` image."""
    H, W = input_hw
    Hn, Wn = cfg.input_hw
    if H <= 0 or W <= 0 or H % Hn or W % Wn:
        raise ConfigurationError(
            f"input {H}x{W} does not tile into the native {Hn}x{Wn} resolution; "
            f"height must be divisible by {Hn} and width by {Wn}"
        )
    return [(H // Hn, W // Wn)] * NUM_STAGES


def backbone_forward(x, net: Network, patch_mode=True) -> List[np.ndarray]:
    """Four stage feature maps for inputs at any resolution tiling the native one.

    Each stage's map is split into patches of the block's native size, the
    patches run through the stage as a batch, and the results are stitched
    back.  Stem and downsampling layers always see the whole map.
    """
    x = as_tensor4(x)
    if not patch_mode:
        return stage_features(net, x)
    patch_grids(net.cfg, x.shape[2:])
    feats = []
    for i, units in enumerate(net.stages):
        x = _stage_inputs(net, x, i)
        h, w = net.cfg.stage_hw(i)
        H, W = x.shape[2:]
        if (H, W) == (h, w):
            x = _run_stage(x, units)
        else:
            x = restore_patches(_run_stage(split_patches(x, h, w), units), H, W)
        feats.append(x)
    return feats
