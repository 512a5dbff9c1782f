"""Parameter-space transforms that collapse conv structures into one conv.

Each function maps structured parameters to a single :class:`ConvParams`
whose forward pass reproduces the original structure:

* :func:`fuse_conv_bn`            conv followed by inference BN
* :func:`merge_branches`          sum of same-config parallel convs
* :func:`fuse_sequential`         1x1 conv -> KxK conv (dense)
* :func:`fuse_sequential_grouped` the same, split per group
* :func:`concat_kernels`          channel concatenation of parallel convs
* :func:`avgpool_to_conv`         average pooling as a fixed kernel
* :func:`pad_kernel`              small kernel embedded in a larger one
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from dbbrep.ops import batchnorm_infer, conv2d
from dbbrep.tensor import BnParams, ContractError, ConvParams, as_tensor4

__all__ = [
    "PadMode",
    "ConvBn",
    "SeqConvBn",
    "fuse_conv_bn",
    "merge_branches",
    "fuse_sequential",
    "fuse_sequential_grouped",
    "concat_kernels",
    "avgpool_to_conv",
    "pad_kernel",
    "pad_input_with_bias",
    "forward_conv_bn",
    "forward_sequential",
]


class PadMode(enum.Enum):
    """Where a 1x1 -> KxK sequence applies its KxK padding.

    ``A`` zero-pads the input of the 1x1 stage; ``B`` pads the intermediate
    map with the first stage's effective bias instead of zeros.
    """

    A = "A"
    B = "B"


@dataclass(frozen=True)
class ConvBn:
    """A conv optionally followed by inference BN (``bn=None`` means no BN)."""

    conv: ConvParams
    bn: BnParams | None = None

    def __post_init__(self):
        if self.bn is not None and self.bn.channels != self.conv.out_channels:
            raise ContractError(
                f"bn has {self.bn.channels} channels, conv produces {self.conv.out_channels}"
            )


@dataclass(frozen=True)
class SeqConvBn:
    """1x1 ConvBn followed by a KxK ConvBn sharing one group count.

    Under ``PadMode.A`` the first conv carries the sequence padding and the
    second pads nothing.  Under ``PadMode.B`` the first conv pads nothing and
    the second conv's ``padding`` is applied with bias-valued pixels.
    """

    first: ConvBn
    second: ConvBn
    pad_mode: PadMode = PadMode.B

    def __post_init__(self):
        c1, c2 = self.first.conv, self.second.conv
        if c1.kernel_size != (1, 1):
            raise ContractError(f"first stage must be 1x1, got {c1.kernel_size}")
        if c1.stride != (1, 1):
            raise ContractError("first stage must have stride 1")
        if c1.groups != c2.groups:
            raise ContractError(f"stage groups differ: {c1.groups} vs {c2.groups}")
        if c1.out_channels != c2.in_channels:
            raise ContractError(
                f"first stage emits {c1.out_channels} channels, second expects {c2.in_channels}"
            )
        if self.pad_mode is PadMode.A and c2.padding != (0, 0):
            raise ContractError("PadMode.A requires the second stage to have zero padding")
        if self.pad_mode is PadMode.B and c1.padding != (0, 0):
            raise ContractError("PadMode.B requires the first stage to have zero padding")

    @property
    def groups(self) -> int:
        return self.first.conv.groups

    @property
    def padding(self) -> tuple[int, int]:
        p1, p2 = self.first.conv.padding, self.second.conv.padding
        return p1[0] + p2[0], p1[1] + p2[1]


def _with(conv: ConvParams, **changes) -> ConvParams:
    fields = dict(
        kernel=conv.kernel,
        bias=conv.bias,
        stride=conv.stride,
        padding=conv.padding,
        groups=conv.groups,
    )
    fields.update(changes)
    return ConvParams(**fields)


def fuse_conv_bn(cb: ConvBn) -> ConvParams:
    """Fold the BN into the conv; an existing conv bias is absorbed first.

    Without a BN the conv is returned with an explicit (possibly zero) bias.
    """
    conv, bn = cb.conv, cb.bn
    if bn is None:
        return _with(conv, bias=conv.bias_or_zeros())
    t = bn.scale / bn.std
    kernel = conv.kernel * t[:, None, None, None]
    bias = (conv.bias_or_zeros() - bn.mean) * t + bn.shift
    return _with(conv, kernel=kernel, bias=bias)


def merge_branches(branches) -> ConvParams:
    """Sum kernels and biases of same-config convs whose outputs are added."""
    branches = list(branches)
    if not branches:
        raise ContractError("merge_branches needs at least one branch")
    head = branches[0]
    for i, b in enumerate(branches[1:], 1):
        if not head.same_config(b):
            raise ContractError(
                f"branch {i} config differs: kernel {b.kernel.shape} stride {b.stride} "
                f"padding {b.padding} groups {b.groups} vs kernel {head.kernel.shape} "
                f"stride {head.stride} padding {head.padding} groups {head.groups}"
            )
    kernel = head.kernel.copy()
    for b in branches[1:]:
        kernel += b.kernel
    if all(b.bias is None for b in branches):
        bias = None
    else:
        bias = head.bias_or_zeros().copy()
        for b in branches[1:]:
            bias += b.bias_or_zeros()
    return _with(head, kernel=kernel, bias=bias)


def fuse_sequential(seq: SeqConvBn) -> ConvParams:
    """Collapse a dense 1x1 -> KxK sequence into one KxK conv."""
    if seq.groups != 1:
        raise ContractError(f"fuse_sequential handles g=1 only, got g={seq.groups}")
    c1 = fuse_conv_bn(seq.first)
    c2 = fuse_conv_bn(seq.second)
    m1 = c1.kernel[:, :, 0, 0]  # D x C
    # per kernel position: F'[:, :, u, v] = F2[:, :, u, v] @ F1
    kernel = np.einsum("edhw,dc->echw", c2.kernel, m1)
    bias = np.einsum("edhw,d->e", c2.kernel, c1.bias) + c2.bias
    return ConvParams(kernel, bias, stride=c2.stride, padding=seq.padding, groups=1)


def fuse_sequential_grouped(seq: SeqConvBn) -> ConvParams:
    """Grouped 1x1 -> KxK sequence: fuse each group densely, then concatenate."""
    g = seq.groups
    if g == 1:
        return fuse_sequential(seq)
    c1 = fuse_conv_bn(seq.first)
    c2 = fuse_conv_bn(seq.second)
    dg = c1.out_channels // g
    eg = c2.out_channels // g
    parts = []
    for i in range(g):
        s1, s2 = slice(i * dg, (i + 1) * dg), slice(i * eg, (i + 1) * eg)
        first = ConvBn(_with(c1, kernel=c1.kernel[s1], bias=c1.bias[s1], groups=1))
        second = ConvBn(_with(c2, kernel=c2.kernel[s2], bias=c2.bias[s2], groups=1))
        parts.append(fuse_sequential(SeqConvBn(first, second, seq.pad_mode)))
    return _with(concat_kernels(parts), groups=g)


def concat_kernels(parts) -> ConvParams:
    """Concatenate dense convs along the output-channel axis."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat_kernels needs at least one part")
    head = parts[0]
    for i, p in enumerate(parts):
        if p.groups != 1:
            raise ContractError(f"part {i} is grouped (g={p.groups}); concatenate per group")
        if (
            p.kernel.shape[1:] != head.kernel.shape[1:]
            or p.stride != head.stride
            or p.padding != head.padding
        ):
            raise ContractError(f"part {i} config differs from part 0")
    if len(parts) == 1:
        return head
    kernel = np.concatenate([p.kernel for p in parts], axis=0)
    bias = None
    if any(p.bias is not None for p in parts):
        bias = np.concatenate([p.bias_or_zeros() for p in parts])
    return _with(head, kernel=kernel, bias=bias)


def avgpool_to_conv(
    channels: int, k: int, stride: int = 1, groups: int = 1, padding: int = 0
) -> ConvParams:
    """Kernel reproducing k x k average pooling: 1/k^2 on each channel's own slice."""
    if k < 1:
        raise ContractError(f"pooling size must be >= 1, got {k}")
    if channels % groups:
        raise ContractError(f"{channels} channels not divisible by {groups} groups")
    cg = channels // groups
    kernel = np.zeros((channels, cg, k, k))
    for d in range(channels):
        kernel[d, d % cg] = 1.0 / (k * k)
    return ConvParams(kernel, None, stride=stride, padding=padding, groups=groups)


def pad_kernel(params: ConvParams, target_kh: int, target_kw: int) -> ConvParams:
    """Zero-pad a kernel to ``target_kh x target_kw``, centred, adjusting padding."""
    kh, kw = params.kernel_size
    dh, dw = target_kh - kh, target_kw - kw
    if dh < 0 or dw < 0:
        raise ContractError(f"cannot shrink kernel {kh}x{kw} to {target_kh}x{target_kw}")
    if dh % 2 or dw % 2:
        raise ContractError(
            f"{kh}x{kw} -> {target_kh}x{target_kw} cannot be centred symmetrically"
        )
    if dh == 0 and dw == 0:
        return params
    d, cg = params.kernel.shape[:2]
    kernel = np.zeros((d, cg, target_kh, target_kw))
    kernel[:, :, dh // 2:dh // 2 + kh, dw // 2:dw // 2 + kw] = params.kernel
    ph, pw = params.padding
    return _with(params, kernel=kernel, padding=(ph + dh // 2, pw + dw // 2))


def pad_input_with_bias(x, b, pixels) -> np.ndarray:
    """Pad every channel j with a border of constant ``b[j]`` instead of zeros."""
    x = as_tensor4(x)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (x.shape[1],):
        raise ContractError(f"bias shape {b.shape} does not match {x.shape[1]} channels")
    if isinstance(pixels, (int, np.integer)):
        ph = pw = int(pixels)
    else:
        ph, pw = pixels
    if ph < 0 or pw < 0:
        raise ContractError(f"padding must be non-negative, got {pixels}")
    n, c, h, w = x.shape
    out = np.empty((n, c, h + 2 * ph, w + 2 * pw))
    out[...] = b[None, :, None, None]
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out.astype(x.dtype, copy=False)


def forward_conv_bn(cb: ConvBn, x) -> np.ndarray:
    y = conv2d(x, cb.conv)
    return y if cb.bn is None else batchnorm_infer(y, cb.bn)


def forward_sequential(seq: SeqConvBn, x, *, bias_padding: bool = True) -> np.ndarray:
    """Evaluate the unfused sequence stage by stage.

    With ``bias_padding=False`` a ``PadMode.B`` sequence falls back to plain
    zero padding, which is *not* equivalent to the fused conv; this exists
    to demonstrate that failure.
    """
    y = forward_conv_bn(seq.first, x)
    second = seq.second
    if seq.pad_mode is PadMode.B and second.conv.padding != (0, 0) and bias_padding:
        b1 = fuse_conv_bn(seq.first).bias
        y = pad_input_with_bias(y, b1, second.conv.padding)
        second = ConvBn(_with(second.conv, padding=(0, 0)), second.bn)
    return forward_conv_bn(second, y)
