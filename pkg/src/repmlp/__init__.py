"""Structural re-parameterization of RepMLP networks.

Training-form networks (set-sharing FC with parallel depth-wise conv and BN
branches) are converted into inference-form networks made of FC layers only.
"""

from repmlp.block import RepMlpBlock, RepMlpBlockConfig, block_forward, convert_block, make_block
from repmlp.counting import count_params_flops, resmlp_delta_config
from repmlp.errors import ConfigurationError, DimensionError, FormatError, ParameterError
from repmlp.model_io import export_locality_heatmap, load_config, load_net, save_net
from repmlp.net import NAMED_CONFIGS, NetConfig, backbone_forward, build_net, convert_net, net_forward
from repmlp.reparam import conv_to_fc, fuse_bn_conv, fuse_bn_grouped_fc, merge_local_into_channel, toeplitz_oracle
from repmlp.tensor import BnParams, ConvLayer, FcLayer, conv2d, fc_forward

__version__ = "0.1.0"
