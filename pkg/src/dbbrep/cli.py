"""Command line entry point: ``dbbrep {init,fuse,verify,count-params,bench}``.

Every command prints ``key=value`` lines.  Exit codes: 0 success,
1 verification failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from dbbrep import _backend
from dbbrep.blocks import build_block, forward_block, fuse_block, randomize_block
from dbbrep.harness import (
    REFERENCE_INFERENCE_M,
    REFERENCE_TRAINING_M,
    VARIANTS,
    TrialConfig,
    bench_block,
    count_params,
    resnet18,
    run_equivalence_campaign,
)
from dbbrep.ops import conv2d
from dbbrep.serialization import load_spec, load_weights, save_fused, save_spec, save_weights
from dbbrep.tensor import ContractError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SPOT_CHECK_TOLERANCE = 1e-10
ARCHS = {"resnet18": resnet18}


def default_seed() -> int:
    try:
        return int(os.environ.get("DBBREP_SEED", "0"))
    except ValueError:
        return 0


def _shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N,C,H,W, got {text!r}") from None
    if len(shape) != 4 or min(shape) < 1:
        raise argparse.ArgumentTypeError(f"expected four positive ints N,C,H,W, got {text!r}")
    return shape


def cmd_init(args) -> int:
    spec = VARIANTS[args.variant](args.in_channels, args.out_channels, args.kernel_size,
                                  args.stride, args.groups)
    block = build_block(spec, args.seed)
    if args.randomize:
        block = randomize_block(block, args.seed + 1)
    save_spec(spec, args.spec)
    save_weights(block, args.weights, args.element_type)
    print(f"spec={args.spec}")
    print(f"weights={args.weights}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    spec = load_spec(args.spec)
    block = load_weights(args.weights, spec)
    fused = fuse_block(block)
    save_fused(fused, args.out, args.element_type)
    rng = np.random.default_rng(args.seed)
    err = 0.0
    for _ in range(3):
        x = rng.normal(size=(1, spec.in_channels, args.size, args.size))
        err = max(err, float(np.max(np.abs(forward_block(block, x) - conv2d(x, fused)))))
    print("fused_kernel_shape=" + "x".join(str(v) for v in fused.kernel.shape))
    print(f"stride={fused.stride[0]} padding={fused.padding[0]} groups={fused.groups}")
    print(f"spot_check_max_error={err:.3e}")
    print(f"out={args.out}")
    return EXIT_OK if err <= SPOT_CHECK_TOLERANCE else EXIT_FAIL


def cmd_verify(args) -> int:
    fields = {}
    if args.config:
        fields = json.loads(Path(args.config).read_text())
        if not isinstance(fields, dict):
            raise ContractError("verify config must be a JSON object")
        for key in ("variants", "batch", "channels", "spatial", "kernel_sizes", "strides", "groups"):
            if key in fields:
                fields[key] = tuple(fields[key])
    for key in ("trials", "seed", "tolerance", "dtype"):
        value = getattr(args, key)
        if value is not None:
            fields[key] = value
    if args.variants:
        fields["variants"] = tuple(args.variants.split(","))
    fields.setdefault("seed", default_seed())
    if fields.get("dtype") == "f32" and args.tolerance is None and "tolerance" not in fields:
        fields["tolerance"] = 1e-3
    try:
        cfg = TrialConfig(**fields)
    except TypeError as e:
        raise ContractError(f"invalid verify config: {e}") from None
    report = run_equivalence_campaign(cfg)
    print(report.to_text(verbose=args.verbose))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_count_params(args) -> int:
    arch = ARCHS[args.arch]()
    n = count_params(arch, args.variant, args.phase)
    print(f"arch={args.arch}")
    print(f"variant={args.variant}")
    print(f"phase={args.phase}")
    print(f"params={n}")
    print(f"params_m={n / 1e6:.2f}")
    ref = REFERENCE_TRAINING_M.get(args.variant) if args.phase == "training" else REFERENCE_INFERENCE_M
    if args.arch == "resnet18" and ref is not None:
        print(f"reference_m={ref:.2f}")
        print(f"delta_m={n / 1e6 - ref:+.3f}")
    print("convention=learnable only: conv kernels, conv biases where present, "
          "BN scale+shift, FC weight+bias; training convs before BN are bias-free; "
          "BN running statistics excluded")
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = load_spec(args.spec)
    if args.weights:
        block = load_weights(args.weights, spec)
    else:
        block = build_block(spec, args.seed)
    shape = args.input_shape or (1, spec.in_channels, 56, 56)
    if shape[1] != spec.in_channels:
        raise ContractError(f"input shape has {shape[1]} channels, block expects {spec.in_channels}")
    res = bench_block(block, shape, args.repeats, seed=args.seed)
    print(f"backend={_backend.BACKEND}")
    print("input_shape=" + "x".join(str(v) for v in shape))
    print(f"branched_time={res.branched_time:.6f}")
    print(f"fused_time={res.fused_time:.6f}")
    print(f"speedup={res.ratio:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbbrep", description="Build, fuse and verify diverse-branch conv blocks."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    seed_kw = dict(type=int, default=None, help="RNG seed (default: $DBBREP_SEED or 0)")
    etype_kw = dict(choices=("f32", "f64"), default="f64")

    p = sub.add_parser("init", help="write a block spec and freshly initialised weights")
    p.add_argument("spec", help="output spec file (JSON)")
    p.add_argument("weights", help="output weight manifest (JSON; payload written beside it)")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="dbb")
    p.add_argument("--in-channels", type=int, default=4)
    p.add_argument("--out-channels", type=int, default=8)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--randomize", action="store_true",
                   help="random kernels and BN statistics instead of the regular init")
    p.add_argument("--element-type", **etype_kw)
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("fuse", help="collapse a block into one conv and spot-check it")
    p.add_argument("spec")
    p.add_argument("weights")
    p.add_argument("out", help="output manifest for the fused conv")
    p.add_argument("--size", type=int, default=8, help="spatial size of spot-check inputs")
    p.add_argument("--element-type", **etype_kw)
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify", help="randomized branched-vs-fused equivalence campaign")
    p.add_argument("--config", help="JSON file with TrialConfig fields")
    p.add_argument("--trials", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.add_argument("--variants", help="comma-separated subset of: " + ",".join(VARIANTS))
    p.add_argument("--verbose", action="store_true", help="one line per trial")
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("count-params", help="learnable parameter count of an architecture")
    p.add_argument("--arch", choices=sorted(ARCHS), default="resnet18")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="dbb")
    p.add_argument("--phase", choices=("training", "inference"), default="training")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("bench", help="time branched vs fused forward passes")
    p.add_argument("spec")
    p.add_argument("--weights", help="weight manifest (default: fresh init from --seed)")
    p.add_argument("--input-shape", type=_shape, help="N,C,H,W (default 1,C,56,56)")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", **seed_kw)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and hasattr(args, "seed") and args.command != "verify":
        args.seed = default_seed()
    try:
        return args.func(args)
    except (ContractError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
