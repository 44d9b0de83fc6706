"""Parameter and FLOPs accounting.

FLOPs are multiply-accumulates: one MAC counts as one FLOP.  Only convs and
FC layers contribute; BN, activations, pooling, bias and shortcut additions
count zero.  Counts are per sample at the configured input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Union

from repmlp.block import DEPLOY, RepMlpBlock
from repmlp.init import ZeroInit
from repmlp.net import ConvBn, NetConfig, Network, build_net

HEADER = "# FLOPs counted as multiply-accumulates (1 MAC = 1 FLOP), per sample"


@dataclass
class LayerCount:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class CountReport:
    config: str
    mode: str
    layers: List[LayerCount] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    flops = macs

    def summary(self) -> str:
        return f"{self.params / 1e6:.1f}M / {self.macs / 1e9:.1f}B"

    def format(self, per_layer=False) -> str:
        lines = [HEADER, f"config={self.config} mode={self.mode}"]
        if per_layer:
            lines.append(f"{'layer':<40} {'kind':<10} {'params':>12} {'MACs':>14}")
            for layer in self.layers:
                lines.append(f"{layer.name:<40} {layer.kind:<10} {layer.params:>12,} {layer.macs:>14,}")
        lines.append(f"params: {self.params:,} ({self.params / 1e6:.2f}M)")
        lines.append(f"FLOPs:  {self.macs:,} ({self.macs / 1e9:.2f}B)")
        lines.append(self.summary())
        return "\n".join(lines)


def _conv_count(name, layer: ConvBn, h, w):
    conv = layer.conv
    oh, ow = conv.output_hw(h, w)
    kh, kw = conv.kernel_size
    macs = oh * ow * conv.out_channels * conv.c_per_group * kh * kw
    params = sum(a.size for a in layer.named_arrays("").values())
    return LayerCount(name, "conv", params, macs), oh, ow


def _block_counts(prefix, block: RepMlpBlock) -> List[LayerCount]:
    cfg = block.cfg
    c, hw = cfg.c, cfg.hw
    out = []
    if block.gp_fc1 is not None:
        gp_params = sum(a.size for k, a in block.named_arrays().items() if k.startswith("gp_"))
        gp_macs = block.gp_fc1.weight.size + block.gp_fc2.weight.size
        out.append(LayerCount(prefix + "global", "fc", gp_params, gp_macs))
    fc3_params = sum(a.size for k, a in block.named_arrays().items() if k.startswith(("fc3.", "bn3.")))
    # c/s vectors of length s*hw, each through s blocks of (hw, hw)
    out.append(LayerCount(prefix + "fc3", "fc-sets", fc3_params, c * hw * hw))
    for i, (conv, bn) in enumerate(block.local):
        k = conv.kernel_size[0]
        out.append(LayerCount(f"{prefix}local{k}x{k}", "dwconv", conv.kernel.size + 4 * len(bn), c * hw * k * k))
    return out


def count_params_flops(target: Union[Network, NetConfig], mode: str = DEPLOY, name: str = "") -> CountReport:
    """Exact parameter count and per-layer MACs.

    ``target`` is a built network (counted as is) or a config, which is
    counted in ``mode`` without materializing real weights.
    """
    if isinstance(target, NetConfig):
        net = build_net(target, mode=mode, params=ZeroInit())
    else:
        net = target
    cfg = net.cfg
    report = CountReport(name or "custom", net.mode)
    h, w = cfg.input_hw
    row, h, w = _conv_count("stem", net.stem, h, w)
    report.layers.append(row)
    for i, stage in enumerate(net.stages):
        if i > 0:
            for j, layer in enumerate(net.downsamples[i - 1]):
                row, h, w = _conv_count(f"down{i}.{j}", layer, h, w)
                report.layers.append(row)
        for j, (block, ffn) in enumerate(stage):
            report.layers.extend(_block_counts(f"stage{i}.{j}.", block))
            for part in ("expand", "project"):
                row, _, _ = _conv_count(f"stage{i}.{j}.ffn.{part}", getattr(ffn, part), h, w)
                report.layers.append(row)
    head = net.head
    report.layers.append(LayerCount("head", "fc", head.weight.size + head.bias.size, head.weight.size))
    return report


def share_set_param_sum(cfg: NetConfig) -> int:
    """Closed form ``sum_i B_i * S_i * (h_i * w_i)**2`` of all FC3 kernels."""
    total = 0
    for i, (b, s) in enumerate(zip(cfg.blocks_per_stage, cfg.share_sets)):
        h, w = cfg.stage_hw(i)
        total += b * s * (h * w) ** 2
    return total


@dataclass
class BranchDelta:
    kernels: Sequence[int]
    params: int
    macs: int


def resmlp_delta_config(blocks=12, s=1, kernels=(1, 3), channels=None, hw=None) -> BranchDelta:
    """Extra training-time cost of conv branches beside a set-sharing FC.

    Each depth-wise ``k x k`` branch over ``s`` sets adds ``k*k`` kernel
    weights and four BN values (mu, sigma, gamma, beta) per set.  MACs are
    reported when ``channels`` and ``hw`` (positions per map) are given.
    """
    params = sum((k * k + 4) * s for k in kernels) * blocks
    macs = 0
    if channels is not None and hw is not None:
        macs = sum(channels * hw * k * k for k in kernels) * blocks
    return BranchDelta(tuple(kernels), params, macs)
