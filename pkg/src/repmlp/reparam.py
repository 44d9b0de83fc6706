"""Conv-to-FC conversion, BN folding and RepMLP branch merging.

The FC equivalent of a convolution is obtained by convolving an identity
matrix that has been reshaped into a batch of one-hot feature maps:

    W = RS(CONV(RS(I, (chw, c, h, w)), F, p), (chw, ohw)).T

Because the construction only calls :func:`repmlp.tensor.conv2d`, the
resulting matrix reproduces that exact convolution.  :func:`toeplitz_oracle`
builds the same matrix from index arithmetic alone and is used to check it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from repmlp.errors import ConfigurationError, DimensionError
from repmlp.tensor import DTYPE, BnParams, ConvLayer, FcLayer, conv2d, reshape


@dataclass(frozen=True, eq=False)
class ToeplitzResult:
    """FC weight equivalent to a convolution.

    ``weight`` is ``(o*h*w, c*h*w)`` for the block layout or ``(s*h*w, h*w)``
    for the stacked per-set layout used by set-sharing FCs.  ``provenance``
    records ``(kernel_size, padding, groups)`` of the source conv.
    """

    weight: np.ndarray
    provenance: Tuple[int, int, int]
    stacked: bool = False


def _check_mergeable(layer: ConvLayer, c: int, h: int, w: int) -> int:
    if layer.in_channels != c:
        raise DimensionError(f"channel axis: conv expects {layer.in_channels} channels, got c={c}")
    if layer.stride != 1:
        raise ConfigurationError(f"only stride-1 convs can be converted, got stride {layer.stride}")
    kh, kw = layer.kernel_size
    top, bottom, left, right = layer.pads
    if kh != kw or kh % 2 == 0 or not top == bottom == left == right == (kh - 1) // 2:
        raise ConfigurationError(
            f"conversion needs an odd square kernel with padding (k-1)/2; "
            f"got kernel {kh}x{kw}, padding {layer.pads}"
        )
    return top


def _check_depthwise(layer: ConvLayer, c: int):
    if not (layer.groups == c and layer.out_channels == c):
        raise ConfigurationError(
            f"stacked layout needs a depth-wise conv over {c} channels, got groups={layer.groups}, "
            f"out_channels={layer.out_channels}"
        )


def conv_to_fc(layer: ConvLayer, c: int, h: int, w: int, stacked: bool = False) -> ToeplitzResult:
    """Build the FC weight that reproduces ``conv2d(x, layer)`` on ``(c, h, w)`` inputs.

    The bias of ``layer`` is ignored; only the kernel is converted.

    With ``stacked=True`` the layer must be depth-wise over ``c`` channels and
    the per-channel ``(hw, hw)`` blocks are stacked into a ``(c*hw, hw)``
    matrix, which is the weight layout of a set-sharing FC with ``c`` sets.
    """
    p = _check_mergeable(layer, c, h, w)
    if stacked:
        _check_depthwise(layer, c)
    g, cpg = layer.groups, layer.c_per_group
    opg = layer.out_channels // g
    hw = h * w
    kernel_only = ConvLayer(layer.kernel, None, layer.padding, 1, g)

    # One identity per group, replicated across groups so a single grouped
    # conv call yields every diagonal block at once.
    eye = np.eye(cpg * hw, dtype=DTYPE)
    ident = reshape(eye, (cpg * hw, cpg, h, w))
    ident = np.ascontiguousarray(np.tile(ident, (1, g, 1, 1)))
    conv_out = conv2d(ident, kernel_only)
    conv_out = conv_out.reshape(cpg * hw, g, opg * hw)

    if stacked:
        # conv_out[:, i, :] is I @ W_i.T for channel i
        weight = np.ascontiguousarray(conv_out.transpose(1, 2, 0)).reshape(c * hw, hw)
    else:
        weight = np.zeros((layer.out_channels * hw, c * hw), dtype=DTYPE)
        for gi in range(g):
            weight[gi * opg * hw : (gi + 1) * opg * hw, gi * cpg * hw : (gi + 1) * cpg * hw] = (
                conv_out[:, gi, :].T
            )
    return ToeplitzResult(weight, (layer.kernel_size[0], p, g), stacked)


def toeplitz_oracle(layer: ConvLayer, c: int, h: int, w: int, stacked: bool = False) -> np.ndarray:
    """Reference Toeplitz matrix filled entry by entry from the conv definition.

    ``W[(o, u', v'), (ci, u, v)] = F[o, ci - group_offset, u - u' + p, v - v' + p]``
    whenever the kernel index is in range and ``ci`` belongs to ``o``'s group.
    """
    p = _check_mergeable(layer, c, h, w)
    if stacked:
        _check_depthwise(layer, c)
    k = layer.kernel_size[0]
    g, cpg = layer.groups, layer.c_per_group
    opg = layer.out_channels // g
    hw = h * w
    kernel = layer.kernel
    weight = np.zeros((layer.out_channels * hw, c * hw), dtype=DTYPE)
    for o in range(layer.out_channels):
        first_in = (o // opg) * cpg
        for uo in range(h):
            for vo in range(w):
                row = (o * h + uo) * w + vo
                for ci in range(cpg):
                    for a in range(k):
                        u = uo + a - p
                        if not 0 <= u < h:
                            continue
                        for b in range(k):
                            v = vo + b - p
                            if not 0 <= v < w:
                                continue
                            col = ((first_in + ci) * h + u) * w + v
                            weight[row, col] = kernel[o, ci, a, b]
    if stacked:
        return np.concatenate([weight[i * hw : (i + 1) * hw, i * hw : (i + 1) * hw] for i in range(c)])
    return weight


def fuse_bn_conv(layer: ConvLayer, bn: BnParams) -> ConvLayer:
    """Fold a following BN into ``layer``; the result always carries a bias."""
    if len(bn) != layer.out_channels:
        raise DimensionError(
            f"channel axis: bn has {len(bn)} channels, conv has {layer.out_channels} outputs"
        )
    scale = bn.scale()
    kernel = layer.kernel * scale[:, None, None, None]
    bias = bn.shift()
    if layer.bias is not None:
        bias = bias + scale * layer.bias
    return ConvLayer(kernel, bias, layer.padding, layer.stride, layer.groups)


def fuse_bn_grouped_fc(fc: FcLayer, bn: BnParams, hw: int) -> FcLayer:
    """Fold a BN over the ``s`` sets of a set-sharing FC into its weight and bias.

    Output rows ``i*hw .. (i+1)*hw - 1`` belong to set ``i`` and are scaled by
    that set's ``gamma / sigma``.
    """
    s = len(bn)
    if fc.groups != s or fc.weight.shape != (s * hw, hw):
        raise DimensionError(
            f"expected a set-sharing FC of weight shape {(s * hw, hw)} with {s} groups, "
            f"got {fc.weight.shape} with {fc.groups} groups"
        )
    scale = np.repeat(bn.scale(), hw)
    weight = fc.weight * scale[:, None]
    bias = np.repeat(bn.shift(), hw)
    if fc.bias is not None:
        bias = bias + scale * fc.bias
    return FcLayer(weight, bias, groups=s)


def merge_local_into_channel(
    fc3: FcLayer,
    bn3: BnParams,
    convs: Iterable[Tuple[ConvLayer, BnParams]],
    s: int,
    h: int,
    w: int,
) -> FcLayer:
    """Collapse FC3+BN and the parallel depth-wise conv+BN branches into one FC."""
    hw = h * w
    fused = fuse_bn_grouped_fc(fc3, bn3, hw)
    weight = fused.weight.copy()
    bias = fused.bias.copy()
    for conv, bn in convs:
        conv = fuse_bn_conv(conv, bn)
        weight += conv_to_fc(conv, s, h, w, stacked=True).weight
        bias += np.repeat(conv.bias, hw)
    return FcLayer(weight, bias, groups=s)
