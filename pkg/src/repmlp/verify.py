"""Equivalence suites shared by the ``verify`` command and the test-suite.

Each suite returns a :class:`SuiteResult` holding the worst absolute
deviation it saw and the tolerance it was held to.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from repmlp.block import RepMlpBlockConfig, block_forward, convert_block, make_block
from repmlp.init import RandomInit
from repmlp.net import NetConfig, build_net, convert_net, net_forward
from repmlp.reparam import conv_to_fc, fuse_bn_conv, fuse_bn_grouped_fc, toeplitz_oracle
from repmlp.tensor import DTYPE, BnParams, ConvLayer, FcLayer, bn_inference, conv2d, fc_forward

TOL_TRANSFORM = 1e-5
TOL_MMUL = 1e-4
TOL_BLOCK = 1e-4
TOL_NET = 1e-3

BLOCK_GRID_C = (4, 8, 64)
BLOCK_GRID_S = (1, 2, 4)
BLOCK_GRID_HW = (4, 8, 16)
BLOCK_GRID_KERNELS = ((1,), (3,), (1, 3))


@dataclass
class SuiteResult:
    name: str
    cases: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<22} cases={self.cases:<5} worst={self.worst:.3e} tol={self.tol:.0e}"


def _normal(rng, shape):
    return rng.standard_normal(shape).astype(DTYPE)


def random_bn(rng, channels) -> BnParams:
    return BnParams.from_running(
        rng.uniform(-1, 1, channels),
        rng.uniform(0.5, 2.0, channels),
        rng.uniform(0.5, 1.5, channels),
        rng.uniform(-1, 1, channels),
    )


def exhaustive_small_grid() -> Iterator[Tuple[int, int, int, int, int, int]]:
    """All ``(k, h, w, c, o, g)`` with k in {1,3}, h,w in 1..4, c,o in {1,2}, g in {1,c}."""
    for k, h, w, c, o in itertools.product((1, 3), range(1, 5), range(1, 5), (1, 2), (1, 2)):
        for g in sorted({1, c}):
            if o % g == 0:
                yield k, h, w, c, o, g


def oracle_suite(rng, exhaustive=True, samples=24) -> SuiteResult:
    cases = list(exhaustive_small_grid())
    if not exhaustive:
        cases = [cases[i] for i in rng.choice(len(cases), size=min(samples, len(cases)), replace=False)]
    worst = 0.0
    for k, h, w, c, o, g in cases:
        layer = ConvLayer(_normal(rng, (o, c // g, k, k)), padding=(k - 1) // 2, groups=g)
        diff = conv_to_fc(layer, c, h, w).weight - toeplitz_oracle(layer, c, h, w)
        worst = max(worst, float(np.abs(diff).max()))
    return SuiteResult("toeplitz-oracle", len(cases), worst, TOL_TRANSFORM)


def random_conv_case(rng, max_c=8, max_hw=16, fan_in_scaled=False):
    c = int(rng.integers(1, max_c + 1))
    g = int(rng.choice([d for d in range(1, c + 1) if c % d == 0]))
    o = g * int(rng.integers(1, max(1, max_c // g) + 1))
    k = int(rng.choice([1, 3, 5]))
    h = int(rng.integers(1, max_hw + 1))
    w = int(rng.integers(1, max_hw + 1))
    kernel = _normal(rng, (o, c // g, k, k))
    if fan_in_scaled:
        kernel /= np.sqrt(kernel[0].size)
    layer = ConvLayer(kernel, padding=(k - 1) // 2, groups=g)
    return layer, c, h, w


def mmul_suite(rng, cases=200) -> SuiteResult:
    """MMUL with the converted weight against direct CONV on random inputs."""
    worst = 0.0
    for _ in range(cases):
        layer, c, h, w = random_conv_case(rng)
        x = _normal(rng, (2, c, h, w))
        weight = conv_to_fc(layer, c, h, w).weight
        mm = fc_forward(x, FcLayer(weight), out_shape=(2, layer.out_channels, h, w))
        worst = max(worst, float(np.abs(mm - conv2d(x, layer)).max()))
    return SuiteResult("mmul-vs-conv", cases, worst, TOL_MMUL)


def bn_fusion_suite(rng, cases=100) -> SuiteResult:
    """Conv-BN and set-sharing-FC-BN pairs against their fused forms.

    Weights are fan-in scaled so pre-BN activations are O(1), as in a network.
    """
    worst = 0.0
    for _ in range(cases):
        layer, c, h, w = random_conv_case(rng, max_c=8, max_hw=8, fan_in_scaled=True)
        bn = random_bn(rng, layer.out_channels)
        x = _normal(rng, (2, c, h, w))
        ref = bn_inference(conv2d(x, layer), bn)
        worst = max(worst, float(np.abs(conv2d(x, fuse_bn_conv(layer, bn)) - ref).max()))

        s, hw = int(rng.integers(1, 5)), int(rng.integers(1, 17))
        fc = FcLayer(_normal(rng, (s * hw, hw)) / np.sqrt(hw), groups=s)
        bn = random_bn(rng, s)
        v = _normal(rng, (3, s, hw, 1))
        ref = bn_inference(fc_forward(v, fc, out_shape=(3, s, hw, 1)), bn)
        fused = fc_forward(v, fuse_bn_grouped_fc(fc, bn, hw), out_shape=(3, s, hw, 1))
        worst = max(worst, float(np.abs(fused - ref).max()))
    return SuiteResult("bn-fusion", 2 * cases, worst, TOL_TRANSFORM)


def linearity_suite(rng, cases=50) -> SuiteResult:
    worst = 0.0
    for _ in range(cases):
        layer, c, h, w = random_conv_case(rng, max_c=4, max_hw=8)
        other = ConvLayer(_normal(rng, layer.kernel.shape), padding=layer.padding, groups=layer.groups)
        a, b = (float(v) for v in rng.uniform(-2, 2, 2))
        mixed = ConvLayer(a * layer.kernel + b * other.kernel, padding=layer.padding, groups=layer.groups)
        lhs = conv_to_fc(mixed, c, h, w).weight
        rhs = a * conv_to_fc(layer, c, h, w).weight + b * conv_to_fc(other, c, h, w).weight
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return SuiteResult("conversion-linearity", cases, worst, TOL_TRANSFORM)


def block_grid() -> List[RepMlpBlockConfig]:
    return [
        RepMlpBlockConfig(c, hw, hw, s, kernels)
        for c, s, hw, kernels in itertools.product(BLOCK_GRID_C, BLOCK_GRID_S, BLOCK_GRID_HW, BLOCK_GRID_KERNELS)
    ]


def block_suite(rng, configs=None, batch=2, perturb=0.0) -> SuiteResult:
    """Train-form vs deploy-form block forwards over the config grid.

    ``perturb`` is added to one merged FC3 weight of the first block, to check
    that the suite notices a broken conversion.
    """
    configs = block_grid() if configs is None else configs
    worst = 0.0
    for idx, cfg in enumerate(configs):
        block = make_block(cfg, "train", RandomInit(int(rng.integers(2**31))))
        deploy = convert_block(block)
        if perturb and idx == 0:
            weight = deploy.fc3.weight.copy()
            weight[0, 0] += perturb
            deploy = type(deploy)(cfg, deploy.mode, FcLayer(weight, deploy.fc3.bias, cfg.s), deploy.gp_fc1, deploy.gp_fc2)
        x = _normal(rng, (batch, cfg.c, cfg.h, cfg.w))
        worst = max(worst, float(np.abs(block_forward(x, block) - block_forward(x, deploy)).max()))
    return SuiteResult("block-merge", len(configs), worst, TOL_BLOCK)


def net_suite(cfg: NetConfig, seed=0, batch=1) -> SuiteResult:
    net = build_net(cfg, seed)
    deploy = convert_net(net)
    rng = np.random.default_rng(seed)
    x = _normal(rng, (batch, 3) + cfg.input_hw)
    worst = float(np.abs(net_forward(net, x) - net_forward(deploy, x)).max())
    return SuiteResult("net-merge", batch, worst, TOL_NET)


def run_all(seed=0, exhaustive=False, config: Optional[NetConfig] = None, perturb=0.0) -> List[SuiteResult]:
    rng = np.random.default_rng(seed)
    results = [
        oracle_suite(rng, exhaustive=exhaustive),
        mmul_suite(rng),
        bn_fusion_suite(rng),
        linearity_suite(rng),
        block_suite(rng, perturb=perturb),
    ]
    if config is not None:
        results.append(net_suite(config, seed))
    return results
