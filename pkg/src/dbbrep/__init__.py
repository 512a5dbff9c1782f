"""Diverse-branch conv blocks and their lossless collapse into a single conv."""

from dbbrep._backend import BACKEND
from dbbrep.blocks import (
    BlockParams,
    BlockSpec,
    BnMode,
    BranchKind,
    Variant,
    build_block,
    build_counterpart,
    build_dbb,
    forward_block,
    fuse_block,
)
from dbbrep.ops import avgpool2d, batchnorm_infer, conv2d, conv2d_reference
from dbbrep.tensor import BnParams, ContractError, ConvParams
from dbbrep.transforms import PadMode

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BlockParams",
    "BlockSpec",
    "BnMode",
    "BnParams",
    "BranchKind",
    "ContractError",
    "ConvParams",
    "PadMode",
    "Variant",
    "avgpool2d",
    "batchnorm_infer",
    "build_block",
    "build_counterpart",
    "build_dbb",
    "conv2d",
    "conv2d_reference",
    "forward_block",
    "fuse_block",
]
