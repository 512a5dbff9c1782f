"""Forward operators over NCHW tensors.

All arithmetic runs in float64; float32 inputs are converted on entry and
the result is cast back to float32.  Nothing broadcasts implicitly: every
shape mismatch raises :class:`~dbbrep.tensor.ContractError`.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dbbrep import _backend
from dbbrep.tensor import BnParams, ContractError, ConvParams, as_tensor4, conv_output_size

__all__ = [
    "conv2d",
    "conv2d_reference",
    "batchnorm_infer",
    "avgpool2d",
    "add",
    "concat_channels",
    "rep_bias",
]


def _check_conv(x: np.ndarray, params: ConvParams) -> tuple[int, int]:
    if x.shape[1] != params.in_channels:
        raise ContractError(
            f"input has {x.shape[1]} channels, conv expects {params.in_channels} "
            f"({params.groups} groups x {params.kernel.shape[1]})"
        )
    kh, kw = params.kernel_size
    (sh, sw), (ph, pw) = params.stride, params.padding
    return conv_output_size(x.shape[2], kh, sh, ph), conv_output_size(x.shape[3], kw, sw, pw)


def conv2d(input, params: ConvParams, *, backend: str | None = None) -> np.ndarray:
    """Cross-correlate ``input`` with ``params`` (zero padding, grouped, biased).

    ``backend`` selects ``"compiled"`` or ``"python"`` explicitly; by default
    the kernel chosen at import time is used.
    """
    x = as_tensor4(input)
    _check_conv(x, params)
    kernel_fn = _backend.conv2d_nchw if backend is None else _backend.KERNELS[backend]
    ph, pw = params.padding
    xp = x.astype(np.float64, copy=False)
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = kernel_fn(
        np.ascontiguousarray(xp),
        np.ascontiguousarray(params.kernel),
        params.stride[0],
        params.stride[1],
        params.groups,
    )
    if params.bias is not None:
        out += params.bias[None, :, None, None]
    return out.astype(x.dtype, copy=False)


def conv2d_reference(input, params: ConvParams) -> np.ndarray:
    """Direct sliding-window summation with scalar loops.

    Deliberately shares no code with :func:`conv2d`; out-of-range window
    positions contribute zero instead of padding the input.
    """
    x = as_tensor4(input)
    ho, wo = _check_conv(x, params)
    xd = x.astype(np.float64)
    f = params.kernel
    b = params.bias_or_zeros()
    n, d = x.shape[0], params.out_channels
    cg, kh, kw = f.shape[1], f.shape[2], f.shape[3]
    dg = d // params.groups
    (sh, sw), (ph, pw) = params.stride, params.padding
    h, w = x.shape[2], x.shape[3]
    out = np.zeros((n, d, ho, wo))
    for i, j, oy, ox in itertools.product(range(n), range(d), range(ho), range(wo)):
        c0 = (j // dg) * cg
        acc = 0.0
        for c in range(cg):
            for u in range(kh):
                y = oy * sh + u - ph
                if y < 0 or y >= h:
                    continue
                for v in range(kw):
                    xx = ox * sw + v - pw
                    if 0 <= xx < w:
                        acc += f[j, c, u, v] * xd[i, c0 + c, y, xx]
        out[i, j, oy, ox] = acc + b[j]
    return out.astype(x.dtype, copy=False)


def batchnorm_infer(input, bn: BnParams) -> np.ndarray:
    x = as_tensor4(input)
    if x.shape[1] != bn.channels:
        raise ContractError(f"input has {x.shape[1]} channels, bn has {bn.channels}")

    def col(v):
        return v[None, :, None, None]

    out = (x.astype(np.float64) - col(bn.mean)) * col(bn.scale) / col(bn.std) + col(bn.shift)
    return out.astype(x.dtype, copy=False)


def avgpool2d(input, k: int, stride: int, padding: int = 0) -> np.ndarray:
    """Mean over each k x k window; padded zeros count toward the k*k divisor."""
    x = as_tensor4(input)
    if k < 1 or stride < 1 or padding < 0:
        raise ContractError(f"invalid pooling config k={k} stride={stride} padding={padding}")
    conv_output_size(x.shape[2], k, stride, padding)
    conv_output_size(x.shape[3], k, stride, padding)
    xp = x.astype(np.float64)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.sum(axis=(4, 5)) / (k * k)
    return out.astype(x.dtype, copy=False)


def add(a, b) -> np.ndarray:
    a, b = as_tensor4(a, "a"), as_tensor4(b, "b")
    if a.shape != b.shape:
        raise ContractError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def concat_channels(a, b) -> np.ndarray:
    a, b = as_tensor4(a, "a"), as_tensor4(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ContractError(f"cannot concatenate shapes {a.shape} and {b.shape} on channels")
    return np.concatenate([a, b], axis=1)


def rep_bias(b, h: int, w: int, n: int = 1) -> np.ndarray:
    """Replicate a per-channel bias into an n x D x h x w constant map."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ContractError(f"bias must be a vector, got shape {b.shape}")
    return np.broadcast_to(b[None, :, None, None], (n, b.shape[0], h, w)).copy()
