"""Core value types: NCHW tensors, convolution and batch-norm parameters.

Tensors are plain ``numpy.ndarray`` objects of rank 4.  Parameter bundles
are frozen dataclasses holding read-only float64 copies of their arrays, so
they can be shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ContractError",
    "as_tensor4",
    "conv_output_size",
    "ConvParams",
    "BnParams",
]

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _pair(v, name: str) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    try:
        a, b = v
    except (TypeError, ValueError):
        raise ContractError(f"{name} must be an int or a pair of ints, got {v!r}") from None
    return int(a), int(b)


def as_tensor4(x, name: str = "input") -> np.ndarray:
    """Validate ``x`` as an N x C x H x W float32/float64 array."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ContractError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")
    if x.dtype not in SUPPORTED_DTYPES:
        raise ContractError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output extent of a sliding window: floor((size + 2p - k) / s) + 1."""
    if size + 2 * padding < kernel:
        raise ContractError(
            f"padded extent {size} + 2*{padding} is smaller than kernel extent {kernel}"
        )
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True, eq=False)
class ConvParams:
    """A (possibly grouped) 2-D convolution: kernel D x (C/g) x Kh x Kw plus optional bias."""

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        kernel = _frozen(self.kernel)
        if kernel.ndim != 4:
            raise ContractError(f"kernel must be rank 4, got shape {kernel.shape}")
        object.__setattr__(self, "kernel", kernel)
        if self.bias is not None:
            bias = _frozen(self.bias)
            if bias.shape != (kernel.shape[0],):
                raise ContractError(
                    f"bias shape {bias.shape} does not match {kernel.shape[0]} output channels"
                )
            object.__setattr__(self, "bias", bias)
        stride = _pair(self.stride, "stride")
        padding = _pair(self.padding, "padding")
        if min(stride) < 1:
            raise ContractError(f"stride must be positive, got {stride}")
        if min(padding) < 0:
            raise ContractError(f"padding must be non-negative, got {padding}")
        groups = int(self.groups)
        if groups < 1:
            raise ContractError(f"groups must be positive, got {groups}")
        if kernel.shape[0] % groups:
            raise ContractError(
                f"output channels {kernel.shape[0]} not divisible by groups {groups}"
            )
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)
        object.__setattr__(self, "groups", groups)

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]

    def bias_or_zeros(self) -> np.ndarray:
        return np.zeros(self.out_channels) if self.bias is None else self.bias

    def same_config(self, other: ConvParams) -> bool:
        return (
            self.kernel.shape == other.kernel.shape
            and self.stride == other.stride
            and self.padding == other.padding
            and self.groups == other.groups
        )

    def __eq__(self, other):
        if not isinstance(other, ConvParams):
            return NotImplemented
        if not self.same_config(other):
            return False
        if (self.bias is None) != (other.bias is None):
            return False
        return np.array_equal(self.kernel, other.kernel) and (
            self.bias is None or np.array_equal(self.bias, other.bias)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BnParams:
    """Inference-mode batch norm: ``(x - mean) * scale / std + shift`` per channel.

    ``std`` already includes epsilon.  Use :meth:`from_variance` to build one
    from running variance the way training frameworks store it.
    """

    mean: np.ndarray
    std: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    epsilon: float = field(default=1e-5)

    def __post_init__(self):
        arrays = {}
        for name in ("mean", "std", "scale", "shift"):
            a = _frozen(getattr(self, name))
            if a.ndim != 1:
                raise ContractError(f"bn {name} must be a vector, got shape {a.shape}")
            arrays[name] = a
        lengths = {a.shape[0] for a in arrays.values()}
        if len(lengths) != 1:
            raise ContractError(
                "bn vectors differ in length: "
                + ", ".join(f"{k}={v.shape[0]}" for k, v in arrays.items())
            )
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if np.any(arrays["std"] < np.sqrt(self.epsilon)):
            raise ContractError("bn std entries must be >= sqrt(epsilon)")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)

    @classmethod
    def from_variance(cls, mean, var, scale, shift, epsilon: float = 1e-5) -> BnParams:
        var = np.asarray(var, dtype=np.float64)
        if np.any(var < 0):
            raise ContractError("bn variance must be non-negative")
        return cls(mean, np.sqrt(var + epsilon), scale, shift, epsilon)

    @classmethod
    def identity(cls, channels: int) -> BnParams:
        return cls(np.zeros(channels), np.ones(channels), np.ones(channels), np.zeros(channels))

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def __eq__(self, other):
        if not isinstance(other, BnParams):
            return NotImplemented
        return self.epsilon == other.epsilon and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("mean", "std", "scale", "shift")
        )

    __hash__ = None
