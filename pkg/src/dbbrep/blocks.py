"""Training-time multi-branch blocks and their collapse into a single conv.

A block is described by a :class:`BlockSpec`.  :func:`block_layout` turns a
spec into a shape-only plan (branches, stages, tensor shapes); the builders
fill that plan with arrays, and the same plan drives weight-file validation
and parameter counting, so all three always agree.

Branch kinds and their stage chains (P = K // 2, s = stride, g = groups):

=========  ============================================================
kxk        KxK conv (s, pad P) -> BN
1x1        1x1 conv (s, pad 0) -> BN
1x1_kxk    1x1 conv (identity init, C -> C) -> BN -> KxK conv (s) -> BN
1x1_avg    1x1 conv (C -> D) -> BN -> KxK avg pool (s) -> BN
1xk, kx1   asymmetric convs of the ACB counterpart, pad (0, P) / (P, 0)
=========  ============================================================

In the two-stage branches the sequence padding P sits on the first stage
under ``PadMode.A`` and is bias-padded before the second stage under
``PadMode.B``.  For a depthwise block (g = C = D) the ``1x1`` branch is not
allowed and ``1x1_avg`` loses its 1x1 conv, keeping only pool -> BN.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from dbbrep.ops import avgpool2d, batchnorm_infer, conv2d
from dbbrep.tensor import BnParams, ContractError, ConvParams, as_tensor4
from dbbrep.transforms import (
    ConvBn,
    PadMode,
    SeqConvBn,
    avgpool_to_conv,
    forward_conv_bn,
    fuse_conv_bn,
    fuse_sequential_grouped,
    merge_branches,
    pad_input_with_bias,
    pad_kernel,
)

__all__ = [
    "Variant",
    "BnMode",
    "BranchKind",
    "BlockSpec",
    "AvgBn",
    "Branch",
    "BlockParams",
    "block_layout",
    "expected_entries",
    "build_dbb",
    "build_counterpart",
    "build_block",
    "randomize_block",
    "fuse_branch",
    "fuse_block",
    "forward_branch",
    "forward_block",
    "block_tensors",
    "block_from_tensors",
    "block_from_fused",
]


class Variant(enum.Enum):
    DBB = "dbb"
    ACB = "acb"
    DUPLICATE = "duplicate"
    BASELINE = "baseline"


class BnMode(enum.Enum):
    PER_BRANCH = "per_branch"  # BN after every conv / pool stage
    POST_ADD = "post_add"  # purely linear branches, one BN after the sum
    NONE = "none"  # no BN at all; convs carry a bias (deployed form)


class BranchKind(enum.Enum):
    KXK = "kxk"
    ONE = "1x1"
    ONE_KXK = "1x1_kxk"
    ONE_AVG = "1x1_avg"
    ONE_BY_K = "1xk"
    K_BY_ONE = "kx1"


DBB_BRANCHES = (BranchKind.KXK, BranchKind.ONE, BranchKind.ONE_KXK, BranchKind.ONE_AVG)
ACB_BRANCHES = (BranchKind.KXK, BranchKind.ONE_BY_K, BranchKind.K_BY_ONE)
_ORDER = {k: i for i, k in enumerate(BranchKind)}


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    groups: int = 1
    branches: tuple[BranchKind, ...] = DBB_BRANCHES
    bn_mode: BnMode = BnMode.PER_BRANCH
    variant: Variant = Variant.DBB
    duplicates: int = 1
    pad_mode: PadMode = PadMode.B

    def __post_init__(self):
        branches = tuple(sorted({BranchKind(b) for b in self.branches}, key=_ORDER.__getitem__))
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "bn_mode", BnMode(self.bn_mode))
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "pad_mode", PadMode(self.pad_mode))
        c, d, k, g = self.in_channels, self.out_channels, self.kernel_size, self.groups
        if c < 1 or d < 1:
            raise ContractError(f"channel counts must be positive, got C={c} D={d}")
        if k % 2 == 0 or not 1 < k < 7:
            raise ContractError(f"kernel_size must be odd with 1 < K < 7, got {k}")
        if self.stride < 1:
            raise ContractError(f"stride must be positive, got {self.stride}")
        if g < 1 or c % g or d % g:
            raise ContractError(f"groups {g} must divide C={c} and D={d}")
        if not branches:
            raise ContractError("a block needs at least one branch")

        v = self.variant
        if v is Variant.DBB:
            if not set(branches) <= set(DBB_BRANCHES):
                raise ContractError(f"DBB branches must be drawn from {[b.value for b in DBB_BRANCHES]}")
            if self.is_depthwise and BranchKind.ONE in branches:
                raise ContractError("a depthwise DBB cannot have the 1x1 branch")
        elif v is Variant.ACB and branches != ACB_BRANCHES:
            raise ContractError("ACB has exactly the kxk, 1xk and kx1 branches")
        elif v in (Variant.DUPLICATE, Variant.BASELINE) and branches != (BranchKind.KXK,):
            raise ContractError(f"{v.value} blocks consist of kxk branches only")
        if v is Variant.DUPLICATE and self.duplicates < 2:
            raise ContractError(f"duplicate blocks need >= 2 copies, got {self.duplicates}")
        if v is not Variant.DUPLICATE and self.duplicates != 1:
            raise ContractError("duplicates only applies to the duplicate variant")
        if self.bn_mode is BnMode.NONE and v is not Variant.BASELINE:
            raise ContractError("bn_mode 'none' is only valid for a baseline (deployed) block")

    @property
    def is_depthwise(self) -> bool:
        return self.groups > 1 and self.groups == self.in_channels == self.out_channels

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    # convenience constructors

    @classmethod
    def dbb(cls, in_channels, out_channels, kernel_size=3, stride=1, groups=1,
            branches=DBB_BRANCHES, **kw) -> BlockSpec:
        if groups > 1 and groups == in_channels == out_channels:
            branches = tuple(b for b in branches if b is not BranchKind.ONE)
        return cls(in_channels, out_channels, kernel_size, stride, groups, branches, **kw)

    @classmethod
    def acb(cls, in_channels, out_channels, kernel_size=3, stride=1, groups=1, **kw) -> BlockSpec:
        return cls(in_channels, out_channels, kernel_size, stride, groups, ACB_BRANCHES,
                   variant=Variant.ACB, **kw)

    @classmethod
    def duplicate(cls, n, in_channels, out_channels, kernel_size=3, stride=1, groups=1,
                  **kw) -> BlockSpec:
        return cls(in_channels, out_channels, kernel_size, stride, groups, (BranchKind.KXK,),
                   variant=Variant.DUPLICATE, duplicates=n, **kw)

    @classmethod
    def baseline(cls, in_channels, out_channels, kernel_size=3, stride=1, groups=1,
                 **kw) -> BlockSpec:
        return cls(in_channels, out_channels, kernel_size, stride, groups, (BranchKind.KXK,),
                   variant=Variant.BASELINE, **kw)


# --------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class _ConvLayout:
    kernel_shape: tuple[int, int, int, int]
    stride: int
    padding: tuple[int, int]
    groups: int
    has_bias: bool
    has_bn: bool
    identity: bool = False


@dataclass(frozen=True)
class _AvgLayout:
    channels: int
    kernel_size: int
    stride: int
    padding: int
    groups: int
    has_bn: bool


@dataclass(frozen=True)
class _BranchLayout:
    name: str
    stages: tuple


def block_layout(spec: BlockSpec) -> tuple[tuple[_BranchLayout, ...], bool]:
    """Shape-only plan of ``spec``: branch layouts and whether a post-add BN exists."""
    c, d, k, s, g = (spec.in_channels, spec.out_channels, spec.kernel_size,
                     spec.stride, spec.groups)
    p = spec.padding
    bn = spec.bn_mode is BnMode.PER_BRANCH
    bias = spec.bn_mode is BnMode.NONE
    a = spec.pad_mode is PadMode.A
    first_pad, second_pad = ((p, p), (0, 0)) if a else ((0, 0), (p, p))

    def conv(out, kh, kw, stride, pad, identity=False):
        return _ConvLayout((out, c // g, kh, kw), stride, pad, g, bias, bn, identity)

    out = []
    for kind in spec.branches:
        if kind is BranchKind.KXK:
            for i in range(spec.duplicates):
                name = "kxk" if i == 0 else f"kxk_dup{i}"
                out.append(_BranchLayout(name, (conv(d, k, k, s, (p, p)),)))
        elif kind is BranchKind.ONE:
            out.append(_BranchLayout(kind.value, (conv(d, 1, 1, s, (0, 0)),)))
        elif kind is BranchKind.ONE_KXK:
            out.append(_BranchLayout(kind.value, (
                conv(c, 1, 1, 1, first_pad, identity=True),
                _ConvLayout((d, c // g, k, k), s, second_pad, g, bias, bn),
            )))
        elif kind is BranchKind.ONE_AVG:
            if spec.is_depthwise:
                stages = (_AvgLayout(c, k, s, p, g, bn),)
            else:
                stages = (conv(d, 1, 1, 1, first_pad), _AvgLayout(d, k, s, second_pad[0], g, bn))
            out.append(_BranchLayout(kind.value, stages))
        elif kind is BranchKind.ONE_BY_K:
            out.append(_BranchLayout(kind.value, (conv(d, 1, k, s, (0, p)),)))
        elif kind is BranchKind.K_BY_ONE:
            out.append(_BranchLayout(kind.value, (conv(d, k, 1, s, (p, 0)),)))
    return tuple(out), spec.bn_mode is BnMode.POST_ADD


_BN_FIELDS = ("mean", "std", "scale", "shift")


def expected_entries(spec: BlockSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list of every tensor a block of ``spec`` holds.

    Names follow ``<branch>.<stage>.kernel``, ``<branch>.<stage>.bias`` and
    ``<branch>.<stage>.bn.<mean|std|scale|shift>``; the post-add BN of a
    purely linear block is ``post_bn.<field>``.
    """
    layouts, post_bn = block_layout(spec)
    entries = []
    for br in layouts:
        for i, st in enumerate(br.stages):
            prefix = f"{br.name}.{i}"
            if isinstance(st, _ConvLayout):
                entries.append((f"{prefix}.kernel", st.kernel_shape))
                if st.has_bias:
                    entries.append((f"{prefix}.bias", (st.kernel_shape[0],)))
                ch = st.kernel_shape[0]
            else:
                ch = st.channels
            if st.has_bn:
                entries.extend((f"{prefix}.bn.{f}", (ch,)) for f in _BN_FIELDS)
    if post_bn:
        entries.extend((f"post_bn.{f}", (spec.out_channels,)) for f in _BN_FIELDS)
    return entries


# --------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class AvgBn:
    """Average pooling stage, optionally followed by BN."""

    channels: int
    kernel_size: int
    stride: int
    padding: int = 0
    groups: int = 1
    bn: BnParams | None = None

    def as_conv_bn(self) -> ConvBn:
        conv = avgpool_to_conv(self.channels, self.kernel_size, self.stride, self.groups,
                               self.padding)
        return ConvBn(conv, self.bn)


@dataclass(frozen=True)
class Branch:
    name: str
    stages: tuple  # of ConvBn | AvgBn
    pad_mode: PadMode = PadMode.B


@dataclass(frozen=True)
class BlockParams:
    spec: BlockSpec
    branches: tuple[Branch, ...]
    post_bn: BnParams | None = None


# --------------------------------------------------------------------------
# construction


def _identity_1x1(channels: int, groups: int) -> np.ndarray:
    cg = channels // groups
    kernel = np.zeros((channels, cg, 1, 1))
    for d in range(channels):
        kernel[d, d % cg] = 1.0
    return kernel


def _materialize(spec: BlockSpec, make_kernel, make_bn, make_bias) -> BlockParams:
    layouts, has_post = block_layout(spec)
    branches = []
    for br in layouts:
        stages = []
        for st in br.stages:
            if isinstance(st, _ConvLayout):
                kernel = _identity_1x1(st.kernel_shape[0], st.groups) if st.identity \
                    else make_kernel(st.kernel_shape)
                bias = make_bias(st.kernel_shape[0]) if st.has_bias else None
                conv = ConvParams(kernel, bias, st.stride, st.padding, st.groups)
                stages.append(ConvBn(conv, make_bn(st.kernel_shape[0]) if st.has_bn else None))
            else:
                stages.append(AvgBn(st.channels, st.kernel_size, st.stride, st.padding,
                                    st.groups, make_bn(st.channels) if st.has_bn else None))
        branches.append(Branch(br.name, tuple(stages), spec.pad_mode))
    post = make_bn(spec.out_channels) if has_post else None
    return BlockParams(spec, tuple(branches), post)


def _kaiming(rng: np.random.Generator):
    def make(shape):
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return make


def build_dbb(spec: BlockSpec, seed: int = 0) -> BlockParams:
    """Allocate a DBB: fan-in scaled Gaussian kernels, identity 1x1 in the
    1x1-KxK branch, identity BN statistics everywhere."""
    if spec.variant is not Variant.DBB:
        raise ContractError(f"build_dbb expects a DBB spec, got {spec.variant.value}")
    rng = np.random.default_rng(seed)
    return _materialize(spec, _kaiming(rng), BnParams.identity, np.zeros)


def build_counterpart(spec: BlockSpec, seed: int = 0, *, shared_init: bool = False) -> BlockParams:
    """Build an ACB, duplicate or baseline block.

    ``shared_init`` gives every duplicate branch the same kernel.
    """
    if spec.variant is Variant.DBB:
        raise ContractError("use build_dbb for DBB specs")
    rng = np.random.default_rng(seed)
    make = _kaiming(rng)
    if shared_init:
        cache = {}

        def make_kernel(shape, _make=make):
            if shape not in cache:
                cache[shape] = _make(shape)
            return cache[shape]
    else:
        make_kernel = make
    return _materialize(spec, make_kernel, BnParams.identity, np.zeros)


def build_block(spec: BlockSpec, seed: int = 0) -> BlockParams:
    if spec.variant is Variant.DBB:
        return build_dbb(spec, seed)
    return build_counterpart(spec, seed)


def randomize_block(block: BlockParams, seed: int) -> BlockParams:
    """Same structure, every kernel/bias/BN statistic redrawn at random.

    Used by equivalence tests, where identity initialisation would hide
    mistakes in the transforms.
    """
    rng = np.random.default_rng(seed)

    def bn(ch):
        return BnParams(rng.normal(size=ch), rng.uniform(0.5, 2.0, size=ch),
                        rng.normal(size=ch), rng.normal(size=ch))

    tensors = block_tensors(block)
    new = {}
    for name, arr in tensors.items():
        if name.endswith(".kernel") or name.endswith(".bias"):
            new[name] = rng.normal(size=arr.shape)
    for name in tensors:
        if name.endswith(".bn.mean") or name.startswith("post_bn.mean"):
            prefix = name[: -len("mean")]
            b = bn(tensors[name].shape[0])
            for f in _BN_FIELDS:
                new[prefix + f] = getattr(b, f)
    return block_from_tensors(block.spec, new)


# --------------------------------------------------------------------------
# evaluation


def _forward_stage(stage, x, padding=None) -> np.ndarray:
    if isinstance(stage, ConvBn):
        if padding is not None:
            stage = ConvBn(dataclasses.replace(stage.conv, padding=padding), stage.bn)
        return forward_conv_bn(stage, x)
    pad = stage.padding if padding is None else padding[0]
    y = avgpool2d(x, stage.kernel_size, stage.stride, pad)
    return y if stage.bn is None else batchnorm_infer(y, stage.bn)


def _stage_padding(stage) -> tuple[int, int]:
    if isinstance(stage, ConvBn):
        return stage.conv.padding
    return stage.padding, stage.padding


def forward_branch(branch: Branch, x) -> np.ndarray:
    """Evaluate one branch stage by stage, bias-padding under PadMode.B."""
    y = x
    for stage in branch.stages[:-1]:
        y = _forward_stage(stage, y)
    last = branch.stages[-1]
    pad = _stage_padding(last)
    if len(branch.stages) > 1 and branch.pad_mode is PadMode.B and pad != (0, 0):
        b1 = fuse_conv_bn(branch.stages[-2]).bias
        y = pad_input_with_bias(y, b1, pad)
        return _forward_stage(last, y, padding=(0, 0))
    return _forward_stage(last, y)


def forward_block(block: BlockParams, x) -> np.ndarray:
    """Training-structure forward pass: sum of branch outputs (+ post-add BN)."""
    x = as_tensor4(x)
    if x.shape[1] != block.spec.in_channels:
        raise ContractError(
            f"input has {x.shape[1]} channels, block expects {block.spec.in_channels}"
        )
    out = forward_branch(block.branches[0], x)
    for br in block.branches[1:]:
        out = out + forward_branch(br, x)
    if block.post_bn is not None:
        out = batchnorm_infer(out, block.post_bn)
    return out


# --------------------------------------------------------------------------
# fusion


def fuse_branch(branch: Branch, kernel_size: int) -> ConvParams:
    """Collapse one branch into a ``kernel_size`` x ``kernel_size`` conv."""
    stages = [s.as_conv_bn() if isinstance(s, AvgBn) else s for s in branch.stages]
    if len(stages) == 1:
        conv = fuse_conv_bn(stages[0])
    elif len(stages) == 2:
        conv = fuse_sequential_grouped(SeqConvBn(stages[0], stages[1], branch.pad_mode))
    else:
        raise ContractError(f"branch {branch.name!r} has {len(stages)} stages; at most 2 supported")
    return pad_kernel(conv, kernel_size, kernel_size)


def fuse_block(block: BlockParams) -> ConvParams:
    """Collapse the whole block into one conv with bias.

    Per branch: pooling becomes a conv, BNs are folded, 1x1 -> KxK
    sequences are fused, kernels are padded to KxK; then the branches are
    summed and a post-add BN, if any, is folded into the sum.
    """
    spec = block.spec
    k, p = spec.kernel_size, spec.padding
    convs = [fuse_branch(br, k) for br in block.branches]
    for br, c in zip(block.branches, convs):
        if c.padding != (p, p) or c.stride != (spec.stride, spec.stride):
            raise ContractError(
                f"branch {br.name!r} fused to padding {c.padding} stride {c.stride}, "
                f"expected {(p, p)} / {(spec.stride, spec.stride)}"
            )
    merged = merge_branches(convs)
    return fuse_conv_bn(ConvBn(merged, block.post_bn))


# --------------------------------------------------------------------------
# flat tensor views (for serialization)


def block_tensors(block: BlockParams) -> dict[str, np.ndarray]:
    """Flatten a block into canonical ``name -> array`` pairs (see expected_entries)."""
    out = {}

    def put_bn(prefix, bn):
        for f in _BN_FIELDS:
            out[f"{prefix}.{f}"] = getattr(bn, f)

    for br in block.branches:
        for i, st in enumerate(br.stages):
            prefix = f"{br.name}.{i}"
            if isinstance(st, ConvBn):
                out[f"{prefix}.kernel"] = st.conv.kernel
                if st.conv.bias is not None:
                    out[f"{prefix}.bias"] = st.conv.bias
            if st.bn is not None:
                put_bn(f"{prefix}.bn", st.bn)
    if block.post_bn is not None:
        put_bn("post_bn", block.post_bn)
    return out


def block_from_tensors(spec: BlockSpec, tensors: dict[str, np.ndarray]) -> BlockParams:
    """Inverse of :func:`block_tensors`; names and shapes must match ``spec`` exactly."""
    expected = dict(expected_entries(spec))
    missing = [n for n in expected if n not in tensors]
    extra = [n for n in tensors if n not in expected]
    if missing or extra:
        raise ContractError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(np.shape(tensors[name])) != tuple(shape):
            raise ContractError(
                f"tensor {name!r} has shape {tuple(np.shape(tensors[name]))}, expected {shape}"
            )

    layouts, has_post = block_layout(spec)
    branches = []
    for br in layouts:
        stages = []
        for i, st in enumerate(br.stages):
            prefix = f"{br.name}.{i}"
            bn = BnParams(*(tensors[f"{prefix}.bn.{f}"] for f in _BN_FIELDS)) if st.has_bn else None
            if isinstance(st, _ConvLayout):
                bias = tensors[f"{prefix}.bias"] if st.has_bias else None
                conv = ConvParams(tensors[f"{prefix}.kernel"], bias, st.stride, st.padding, st.groups)
                stages.append(ConvBn(conv, bn))
            else:
                stages.append(AvgBn(st.channels, st.kernel_size, st.stride, st.padding,
                                    st.groups, bn))
        branches.append(Branch(br.name, tuple(stages), spec.pad_mode))
    post = BnParams(*(tensors[f"post_bn.{f}"] for f in _BN_FIELDS)) if has_post else None
    return BlockParams(spec, tuple(branches), post)


def block_from_fused(conv: ConvParams) -> BlockParams:
    """Wrap a fused conv as a one-branch baseline block without BN."""
    kh, kw = conv.kernel_size
    if kh != kw or conv.padding != (kh // 2, kh // 2) or conv.stride[0] != conv.stride[1]:
        raise ContractError("fused conv must be square with padding K//2 and uniform stride")
    spec = BlockSpec.baseline(conv.in_channels, conv.out_channels, kh, conv.stride[0],
                              conv.groups, bn_mode=BnMode.NONE)
    return block_from_tensors(spec, {"kxk.0.kernel": conv.kernel, "kxk.0.bias": conv.bias_or_zeros()})
