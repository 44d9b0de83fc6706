import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repmlp.block import (
    RepMlpBlock,
    RepMlpBlockConfig,
    block_forward,
    channel_perceptron,
    convert_block,
    global_perceptron,
    local_perceptron,
    make_block,
)
from repmlp.counting import _block_counts
from repmlp.errors import ConfigurationError, DimensionError
from repmlp.init import RandomInit, ZeroInit
from repmlp.reparam import fuse_bn_grouped_fc
from repmlp.tensor import BnParams, ConvLayer, FcLayer, fc_forward


def identity_block(c, h, w, s, kernels=()):
    hw = h * w
    fc3 = FcLayer(np.tile(np.eye(hw), (s, 1)), groups=s)
    local = [(ConvLayer(np.zeros((s, 1, k, k)), padding=(k - 1) // 2, groups=s), BnParams.identity(s)) for k in kernels]
    cfg = RepMlpBlockConfig(c, h, w, s, tuple(kernels), use_global=False)
    return RepMlpBlock(cfg, "train", fc3, bn3=BnParams.identity(s), local=local)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RepMlpBlockConfig(6, 4, 4, 4)
    with pytest.raises(ConfigurationError):
        RepMlpBlockConfig(8, 4, 4, 2, (2,))
    with pytest.raises(ConfigurationError):
        RepMlpBlockConfig(6, 4, 4, 2, gp_reduction=4)


def test_global_perceptron_zero_input():
    block = make_block(RepMlpBlockConfig(8, 4, 4, 2), params=ZeroInit())
    assert not global_perceptron(np.zeros((2, 8, 4, 4)), block).any()


def test_global_perceptron_depends_only_on_channel_means(rng):
    block = make_block(RepMlpBlockConfig(8, 4, 4, 2), params=RandomInit(3))
    means = rng.standard_normal((1, 8, 1, 1))
    flat = np.broadcast_to(means, (1, 8, 4, 4))
    noise = rng.standard_normal((1, 8, 4, 4))
    noise -= noise.mean(axis=(2, 3), keepdims=True)
    out = global_perceptron(flat, block)
    assert out.shape == (1, 8, 1, 1)
    np.testing.assert_allclose(global_perceptron(flat + noise, block), out, atol=1e-5)


def test_global_perceptron_param_count():
    c = 64
    block = make_block(RepMlpBlockConfig(c, 4, 4, 1), params=ZeroInit())
    gp = sum(a.size for k, a in block.named_arrays().items() if k.startswith("gp_"))
    assert gp == 2 * c * c // 4 + c // 4 + c


@pytest.mark.parametrize("hw,expected", [(56, 9_834_496), (7, 2_401)])
def test_channel_perceptron_param_count(hw, expected):
    block = make_block(RepMlpBlockConfig(4, hw, hw, 1), "deploy", ZeroInit())
    assert block.fc3.weight.size == expected


def test_channel_perceptron_identity(rng):
    block = identity_block(6, 3, 4, 3)
    x = rng.standard_normal((2, 6, 3, 4)).astype(np.float32)
    np.testing.assert_array_equal(channel_perceptron(x, block), x)


def test_channel_perceptron_share_set_layout(rng):
    # channel j of sample i lands in share-set j % s
    c, s, h, w = 6, 3, 2, 2
    hw = h * w
    scales = np.array([1.0, 10.0, 100.0])
    fc3 = FcLayer(np.concatenate([sc * np.eye(hw) for sc in scales]), groups=s)
    block = RepMlpBlock(RepMlpBlockConfig(c, h, w, s, (), use_global=False), "deploy", fc3)
    x = rng.standard_normal((2, c, h, w)).astype(np.float32)
    out = channel_perceptron(x, block)
    for j in range(c):
        np.testing.assert_allclose(out[:, j], scales[j % s] * x[:, j], rtol=1e-6)


def test_local_perceptron_trivial(rng):
    x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
    assert not local_perceptron(x, identity_block(4, 5, 5, 2, (1, 3))).any()
    block = identity_block(4, 5, 5, 2, (1,))
    block.local[0] = (ConvLayer(np.ones((2, 1, 1, 1)), groups=2), BnParams.identity(2))
    np.testing.assert_array_equal(local_perceptron(x, block), x)


@pytest.mark.parametrize("k,s", [(1, 1), (3, 1), (3, 16)])
def test_local_branch_param_count(k, s):
    block = make_block(RepMlpBlockConfig(s * 4, 4, 4, s, (k,)), params=ZeroInit())
    extra = sum(a.size for name, a in block.named_arrays().items() if name.startswith("local."))
    assert extra == (k * k + 4) * s


def test_block_forward_zero_weights():
    block = make_block(RepMlpBlockConfig(8, 4, 4, 2), params=ZeroInit())
    block = RepMlpBlock(block.cfg, "train", block.fc3, block.gp_fc1, block.gp_fc2, BnParams.identity(2),
                        [(conv, BnParams.identity(2)) for conv, _ in block.local])
    assert not block_forward(np.ones((1, 8, 4, 4)), block).any()


def test_block_forward_rejects_wrong_resolution():
    block = make_block(RepMlpBlockConfig(8, 4, 4, 2))
    with pytest.raises(DimensionError, match="patches"):
        block_forward(np.ones((1, 8, 8, 4)), block)
    with pytest.raises(DimensionError, match="channel"):
        block_forward(np.ones((1, 4, 4, 4)), block)


@pytest.mark.parametrize(
    "c,s,hw,kernels",
    [(4, 1, 4, (1,)), (8, 2, 8, (3,)), (64, 4, 16, (1, 3)), (64, 1, 16, (1, 3)), (16, 4, 7, (1, 3, 5))],
)
def test_train_deploy_equivalence(rng, c, s, hw, kernels):
    block = make_block(RepMlpBlockConfig(c, hw, hw, s, kernels), params=RandomInit(int(rng.integers(1000))))
    deploy = convert_block(block)
    x = rng.standard_normal((3, c, hw, hw)).astype(np.float32)
    assert np.abs(block_forward(x, block) - block_forward(x, deploy)).max() <= 1e-4


def test_converted_block_over_100_inputs(rng):
    block = make_block(RepMlpBlockConfig(16, 8, 8, 4), params=RandomInit(11))
    deploy = convert_block(block)
    x = rng.standard_normal((100, 16, 8, 8)).astype(np.float32)
    assert np.abs(block_forward(x, block) - block_forward(x, deploy)).max() <= 1e-4


def test_convert_structure_and_counts():
    cfg = RepMlpBlockConfig(16, 6, 6, 4)
    block = make_block(cfg, params=RandomInit(0))
    deploy = convert_block(block)
    assert deploy.mode == "deploy" and deploy.bn3 is None and not deploy.local
    assert deploy.gp_fc1 is block.gp_fc1 and deploy.gp_fc2 is block.gp_fc2
    gp = 2 * 16 * 4 + 4 + 16
    assert deploy.param_count() == cfg.s * cfg.hw**2 + cfg.s * cfg.hw + gp
    assert block.mode == "train" and len(block.local) == 2  # source untouched
    with pytest.raises(ConfigurationError):
        convert_block(deploy)
    with pytest.raises(ConfigurationError):
        local_perceptron(np.ones((1, 16, 6, 6)), deploy)


def test_convert_without_local_branches_keeps_fc3():
    block = identity_block(4, 3, 3, 2)
    np.testing.assert_array_equal(convert_block(block).fc3.weight, block.fc3.weight)


def test_zeroed_local_branches_equal_fused_fc3_alone(rng):
    cfg = RepMlpBlockConfig(8, 5, 5, 2)
    block = make_block(cfg, params=RandomInit(5))
    zeroed = [
        (ConvLayer(np.zeros_like(conv.kernel), padding=conv.padding, groups=conv.groups),
         BnParams(np.zeros(2), bn.sigma, bn.gamma, np.zeros(2)))
        for conv, bn in block.local
    ]
    block = RepMlpBlock(cfg, "train", block.fc3, block.gp_fc1, block.gp_fc2, block.bn3, zeroed)
    fc3_only = RepMlpBlock(cfg, "deploy", fuse_bn_grouped_fc(block.fc3, block.bn3, cfg.hw), block.gp_fc1, block.gp_fc2)
    x = rng.standard_normal((2, 8, 5, 5)).astype(np.float32)
    np.testing.assert_allclose(block_forward(x, block), block_forward(x, fc3_only), atol=1e-5)


@pytest.mark.parametrize("s", [1, 2, 4, 8])
def test_channel_path_macs_independent_of_s(s):
    block = make_block(RepMlpBlockConfig(8, 6, 6, s), "deploy", ZeroInit())
    fc3 = next(row for row in _block_counts("", block) if row.name == "fc3")
    assert fc3.macs == 8 * 36**2
    assert block.fc3.weight.size == s * 36**2


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16), mode=st.sampled_from(["train", "deploy"]))
def test_batch_permutation_equivariance(seed, mode):
    rng = np.random.default_rng(seed)
    block = make_block(RepMlpBlockConfig(8, 4, 4, 2), params=RandomInit(seed))
    if mode == "deploy":
        block = convert_block(block)
    x = rng.standard_normal((5, 8, 4, 4)).astype(np.float32)
    perm = rng.permutation(5)
    np.testing.assert_allclose(block_forward(x[perm], block), block_forward(x, block)[perm], atol=1e-6)


def test_deploy_block_rejects_branches():
    cfg = RepMlpBlockConfig(4, 2, 2, 2)
    with pytest.raises(ConfigurationError):
        RepMlpBlock(cfg, "deploy", FcLayer(np.zeros((8, 4)), groups=2), bn3=BnParams.identity(2))
    with pytest.raises(ConfigurationError):
        RepMlpBlock(cfg, "train", FcLayer(np.zeros((8, 4)), groups=2))
