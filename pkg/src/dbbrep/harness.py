"""Equivalence campaigns, parameter accounting and fused-vs-branched timing."""

from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from dbbrep.blocks import (
    BlockParams,
    BlockSpec,
    BnMode,
    BranchKind,
    build_block,
    expected_entries,
    forward_block,
    fuse_block,
    randomize_block,
)
from dbbrep.ops import conv2d
from dbbrep.tensor import ContractError
from dbbrep.transforms import PadMode

__all__ = [
    "VARIANTS",
    "REFERENCE_TRAINING_M",
    "REFERENCE_INFERENCE_M",
    "TrialConfig",
    "TrialResult",
    "TrialReport",
    "run_equivalence_campaign",
    "LayerSpec",
    "ArchSpec",
    "resnet18",
    "count_params",
    "BenchResult",
    "bench_block",
]

K, ONE, ONE_KXK, AVG = BranchKind.KXK, BranchKind.ONE, BranchKind.ONE_KXK, BranchKind.ONE_AVG


def _dbb(*branches, **kw):
    def make(c, d, k, s, g):
        return BlockSpec.dbb(c, d, k, s, g, branches=branches, **kw)
    return make


def _dup(n, **kw):
    def make(c, d, k, s, g):
        return BlockSpec.duplicate(n, c, d, k, s, g, **kw)
    return make


# name -> factory(C, D, K, stride, groups) -> BlockSpec
VARIANTS: dict[str, Callable[[int, int, int, int, int], BlockSpec]] = {
    "dbb": _dbb(K, ONE, ONE_KXK, AVG),
    "dbb-no-1x1": _dbb(K, ONE_KXK, AVG),
    "dbb-no-1x1kxk": _dbb(K, ONE, AVG),
    "dbb-no-avg": _dbb(K, ONE, ONE_KXK),
    "dbb-1x1": _dbb(K, ONE),
    "dbb-1x1kxk": _dbb(K, ONE_KXK),
    "dbb-avg": _dbb(K, AVG),
    "baseline": lambda c, d, k, s, g: BlockSpec.baseline(c, d, k, s, g),
    "dup2": _dup(2),
    "dup3": _dup(3),
    "acb": lambda c, d, k, s, g: BlockSpec.acb(c, d, k, s, g),
    "dbb-depthwise": _dbb(K, ONE_KXK, AVG),
    "linear-dbb": _dbb(K, ONE, ONE_KXK, AVG, bn_mode=BnMode.POST_ADD),
    "linear-1x1": _dbb(K, ONE, bn_mode=BnMode.POST_ADD),
    "linear-dup2": _dup(2, bn_mode=BnMode.POST_ADD),
}

# Reference training-time parameter counts (millions) for ResNet-18 variants.
REFERENCE_TRAINING_M = {
    "dbb": 26.33,
    "dbb-no-1x1": 25.09,
    "dbb-no-1x1kxk": 14.18,
    "dbb-no-avg": 25.08,
    "dbb-1x1": 12.93,
    "dbb-1x1kxk": 23.84,
    "dbb-avg": 12.95,
    "baseline": 11.69,
    "dup2": 22.69,
    "dup3": 33.70,
    "linear-dbb": 26.20,
    "linear-1x1": 12.91,
    "linear-dup2": 22.68,
}
REFERENCE_INFERENCE_M = 11.68


# --------------------------------------------------------------------------
# equivalence campaign


@dataclass(frozen=True)
class TrialConfig:
    trials: int = 100
    tolerance: float = 1e-10
    seed: int = 0
    dtype: str = "f64"
    variants: tuple[str, ...] = tuple(VARIANTS)
    batch: tuple[int, int] = (1, 2)
    channels: tuple[int, int] = (1, 8)
    spatial: tuple[int, int] = (1, 9)
    kernel_sizes: tuple[int, ...] = (3, 5)
    strides: tuple[int, ...] = (1, 2)
    # ints, or "C" for groups equal to the input channel count
    groups: tuple = (1, 2, "C")

    def __post_init__(self):
        if self.trials < 1:
            raise ContractError(f"trials must be >= 1, got {self.trials}")
        if not self.tolerance > 0:
            raise ContractError(f"tolerance must be positive, got {self.tolerance}")
        if self.dtype not in ("f32", "f64"):
            raise ContractError(f"dtype must be f32 or f64, got {self.dtype!r}")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ContractError(f"unknown variants {unknown}")
        if not self.variants:
            raise ContractError("at least one variant is required")


@dataclass(frozen=True)
class TrialResult:
    index: int
    variant: str
    config: dict
    max_error: float = 0.0
    passed: bool = True


@dataclass(frozen=True)
class TrialReport:
    results: tuple[TrialResult, ...]
    tolerance: float
    dtype: str

    @property
    def max_error(self) -> float:
        return max(r.max_error for r in self.results)

    @property
    def failures(self) -> int:
        return sum(not r.passed for r in self.results)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_text(self, verbose: bool = False) -> str:
        lines = []
        if verbose:
            for r in self.results:
                cfg = " ".join(f"{k}={v}" for k, v in r.config.items())
                lines.append(
                    f"trial={r.index} variant={r.variant} {cfg} "
                    f"max_error={r.max_error:.3e} {'PASS' if r.passed else 'FAIL'}"
                )
        lines += [
            f"trials={len(self.results)}",
            f"dtype={self.dtype}",
            f"tolerance={self.tolerance:g}",
            f"max_error={self.max_error:.3e}",
            f"failures={self.failures}",
            f"status={'pass' if self.passed else 'fail'}",
        ]
        return "\n".join(lines)


def _draw_spec(variant: str, cfg: TrialConfig, rng: np.random.Generator) -> BlockSpec:
    lo, hi = cfg.channels
    k = int(rng.choice(cfg.kernel_sizes))
    s = int(rng.choice(cfg.strides))
    if variant == "dbb-depthwise":
        c = int(rng.integers(max(lo, 2), max(hi, 2) + 1))
        return VARIANTS[variant](c, c, k, s, c)
    c = int(rng.integers(lo, hi + 1))
    choice = cfg.groups[int(rng.integers(len(cfg.groups)))]
    g = c if choice == "C" else int(choice)
    if g == 1:
        d = int(rng.integers(lo, hi + 1))
        return VARIANTS[variant](c, d, k, s, 1)
    # grouped but not depthwise: C and D divisible by g, D != C when g == C
    cs = [x for x in range(lo, hi + 1) if x % g == 0] if choice != "C" else [c]
    if not cs:
        return VARIANTS[variant](c, int(rng.integers(lo, hi + 1)), k, s, 1)
    c = int(rng.choice(cs))
    ds = [x for x in range(lo, hi + 1) if x % g == 0 and not (x == c == g)]
    if not ds:
        return VARIANTS[variant](c, int(rng.integers(lo, hi + 1)), k, s, 1)
    return VARIANTS[variant](c, int(rng.choice(ds)), k, s, g)


def _run_trial(index: int, variant: str, cfg: TrialConfig) -> TrialResult:
    rng = np.random.default_rng([cfg.seed, index])
    spec = _draw_spec(variant, cfg, rng)
    spec = dataclasses.replace(spec, pad_mode=PadMode.A if rng.random() < 0.5 else PadMode.B)
    param_seed = int(rng.integers(2**31))
    block = randomize_block(build_block(spec, param_seed), param_seed + 1)
    n = int(rng.integers(cfg.batch[0], cfg.batch[1] + 1))
    h = int(rng.integers(cfg.spatial[0], cfg.spatial[1] + 1))
    w = int(rng.integers(cfg.spatial[0], cfg.spatial[1] + 1))
    dtype = np.float32 if cfg.dtype == "f32" else np.float64
    x = rng.normal(size=(n, spec.in_channels, h, w)).astype(dtype)

    branched = forward_block(block, x)
    fused = conv2d(x, fuse_block(block))
    if branched.shape != fused.shape:
        err = float("inf")
    else:
        err = float(np.max(np.abs(branched.astype(np.float64) - fused.astype(np.float64))))
        if cfg.dtype == "f32":
            err /= max(float(np.max(np.abs(fused))), np.finfo(np.float32).tiny)
    config = {
        "C": spec.in_channels, "D": spec.out_channels, "K": spec.kernel_size,
        "stride": spec.stride, "groups": spec.groups, "N": n, "H": h, "W": w,
        "pad_mode": spec.pad_mode.value,
    }
    return TrialResult(index, variant, config, err, err <= cfg.tolerance)


def run_equivalence_campaign(cfg: TrialConfig) -> TrialReport:
    """Compare branched and fused forward passes over randomized blocks.

    Variants are assigned round-robin so every variant is covered once the
    trial count reaches the number of variants.  Deterministic in ``cfg.seed``.
    """
    results = tuple(
        _run_trial(i, cfg.variants[i % len(cfg.variants)], cfg) for i in range(cfg.trials)
    )
    return TrialReport(results, cfg.tolerance, cfg.dtype)


# --------------------------------------------------------------------------
# parameter accounting


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "fc"
    in_channels: int
    out_channels: int
    kernel_size: int = 1
    stride: int = 1
    groups: int = 1
    replaceable: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.replaceable and not (self.kind == "conv" and 1 < self.kernel_size < 7):
            raise ContractError("only KxK convs with 1 < K < 7 are replaceable")


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    num_classes: int


def resnet18(num_classes: int = 1000) -> ArchSpec:
    """ResNet-18: 7x7 stem, 16 replaceable 3x3 convs, 3 downsample 1x1 convs, FC."""
    layers = [LayerSpec("conv", 3, 64, 7, 2)]
    c = 64
    for width, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        for block in range(2):
            s = stride if block == 0 else 1
            layers.append(LayerSpec("conv", c, width, 3, s, replaceable=True))
            layers.append(LayerSpec("conv", width, width, 3, 1, replaceable=True))
            if block == 0 and (s != 1 or c != width):
                layers.append(LayerSpec("conv", c, width, 1, s))
            c = width
    layers.append(LayerSpec("fc", c, num_classes))
    return ArchSpec("resnet18", tuple(layers), num_classes)


_LEARNABLE = (".kernel", ".bias", ".bn.scale", ".bn.shift", "post_bn.scale", "post_bn.shift")


def _block_learnable(spec: BlockSpec) -> int:
    return sum(int(np.prod(shape)) for name, shape in expected_entries(spec)
               if name.endswith(_LEARNABLE))


def count_params(arch: ArchSpec, variant: str = "baseline", phase: str = "training") -> int:
    """Learnable parameters of ``arch`` with every replaceable conv built as ``variant``.

    Training: conv kernels (bias-free, each followed by BN), BN scale and
    shift, FC weight and bias; replaceable convs expand to the variant's
    block.  Inference: every conv has its BN folded into a bias, so all
    variants give the same count.  BN running statistics are never counted.
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    if phase not in ("training", "inference"):
        raise ContractError(f"phase must be 'training' or 'inference', got {phase!r}")
    total = 0
    for layer in arch.layers:
        if layer.kind == "fc":
            total += layer.in_channels * layer.out_channels + layer.out_channels
            continue
        kernel = (layer.out_channels * (layer.in_channels // layer.groups)
                  * layer.kernel_size ** 2)
        if phase == "inference":
            total += kernel + layer.out_channels
        elif layer.replaceable:
            spec = VARIANTS[variant](layer.in_channels, layer.out_channels, layer.kernel_size,
                                     layer.stride, layer.groups)
            total += _block_learnable(spec)
        else:
            total += kernel + 2 * layer.out_channels
    return total


# --------------------------------------------------------------------------
# timing


class BenchResult(NamedTuple):
    branched_time: float
    fused_time: float

    @property
    def ratio(self) -> float:
        return self.branched_time / self.fused_time


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_block(block: BlockParams, input_shape, repeats: int = 5, *, seed: int = 0,
                warmup: int = 1) -> BenchResult:
    """Median seconds per forward: branched block vs its fused single conv.

    Fusion itself is done once, outside the timed region.
    """
    if repeats < 3:
        raise ContractError(f"repeats must be >= 3, got {repeats}")
    x = np.random.default_rng(seed).normal(size=tuple(input_shape))
    fused = fuse_block(block)
    branched_t = _median_time(lambda: forward_block(block, x), repeats, warmup)
    fused_t = _median_time(lambda: conv2d(x, fused), repeats, warmup)
    return BenchResult(branched_t, fused_t)
