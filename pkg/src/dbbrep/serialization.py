"""Block spec files and weight manifests.

A block spec is a small JSON document mirroring :class:`BlockSpec`.  Weights
are stored as a JSON manifest plus a sidecar ``.bin`` payload of raw
little-endian floats::

    {
      "format_version": 1,
      "element_type": "f64",            # or "f32"
      "payload": "weights.bin",         # relative to the manifest
      "payload_bytes": 1234,
      "block": { ...block spec... },
      "tensors": [{"name": "kxk.0.kernel", "shape": [8, 4, 3, 3], "offset": 0}, ...]
    }

Tensor names follow :func:`dbbrep.blocks.expected_entries`; entries are
packed back to back in that order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from dbbrep.blocks import (
    BlockParams,
    BlockSpec,
    block_from_fused,
    block_from_tensors,
    block_tensors,
    expected_entries,
)
from dbbrep.tensor import ContractError, ConvParams

__all__ = [
    "FORMAT_VERSION",
    "ManifestError",
    "spec_to_dict",
    "spec_from_dict",
    "dumps_spec",
    "loads_spec",
    "save_spec",
    "load_spec",
    "save_weights",
    "load_weights",
    "save_fused",
    "manifest_spec",
]

FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_SPEC_FIELDS = ("in_channels", "out_channels", "kernel_size", "stride", "groups",
                "branches", "bn_mode", "variant", "duplicates", "pad_mode")


class ManifestError(ContractError):
    """A weight manifest or its payload is malformed or does not fit the block spec."""


def spec_to_dict(spec: BlockSpec) -> dict:
    return {
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "kernel_size": spec.kernel_size,
        "stride": spec.stride,
        "groups": spec.groups,
        "branches": [b.value for b in spec.branches],
        "bn_mode": spec.bn_mode.value,
        "variant": spec.variant.value,
        "duplicates": spec.duplicates,
        "pad_mode": spec.pad_mode.value,
    }


def spec_from_dict(d: dict) -> BlockSpec:
    unknown = set(d) - set(_SPEC_FIELDS)
    if unknown:
        raise ContractError(f"unknown block spec keys: {sorted(unknown)}")
    missing = {"in_channels", "out_channels"} - set(d)
    if missing:
        raise ContractError(f"block spec is missing {sorted(missing)}")
    kw = dict(d)
    if "branches" in kw:
        kw["branches"] = tuple(kw["branches"])
    try:
        return BlockSpec(**kw)
    except (TypeError, ValueError) as e:
        raise ContractError(f"invalid block spec: {e}") from None


def dumps_spec(spec: BlockSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2) + "\n"


def loads_spec(text: str) -> BlockSpec:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ContractError(f"block spec is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise ContractError("block spec must be a JSON object")
    return spec_from_dict(d)


def save_spec(spec: BlockSpec, path) -> None:
    Path(path).write_text(dumps_spec(spec))


def load_spec(path) -> BlockSpec:
    return loads_spec(Path(path).read_text())


def _payload_path(path: Path) -> Path:
    return path.with_name(path.stem + ".bin")


def save_weights(block: BlockParams, path, element_type: str = "f64") -> None:
    """Write ``block``'s tensors as manifest ``path`` plus a ``.bin`` sidecar."""
    if element_type not in _DTYPES:
        raise ContractError(f"element_type must be one of {list(_DTYPES)}, got {element_type!r}")
    dtype = _DTYPES[element_type]
    path = Path(path)
    tensors = block_tensors(block)
    entries, chunks, offset = [], [], 0
    for name, shape in expected_entries(block.spec):
        data = np.ascontiguousarray(tensors[name], dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = _payload_path(path)
    payload.write_bytes(b"".join(chunks))
    manifest = {
        "format_version": FORMAT_VERSION,
        "element_type": element_type,
        "payload": payload.name,
        "payload_bytes": offset,
        "block": spec_to_dict(block.spec),
        "tensors": entries,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def save_fused(conv: ConvParams, path, element_type: str = "f64") -> None:
    """Save a fused conv as a one-branch baseline manifest (``kxk.0.kernel/bias``)."""
    save_weights(block_from_fused(conv), path, element_type)


def _read_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: manifest is not valid JSON: {e}") from None
    if not isinstance(manifest, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ManifestError(
            f"{path}: unsupported format_version {version!r} (expected {FORMAT_VERSION})"
        )
    if manifest.get("element_type") not in _DTYPES:
        raise ManifestError(f"{path}: unknown element_type {manifest.get('element_type')!r}")
    if not isinstance(manifest.get("tensors"), list):
        raise ManifestError(f"{path}: 'tensors' must be a list")
    return manifest


def manifest_spec(path) -> BlockSpec:
    """The block spec a manifest was written for."""
    manifest = _read_manifest(Path(path))
    return spec_from_dict(manifest["block"])


def load_weights(path, spec: BlockSpec) -> BlockParams:
    """Read a manifest written by :func:`save_weights` and rebuild the block.

    Every failure names the manifest and, where applicable, the entry at fault.
    """
    path = Path(path)
    manifest = _read_manifest(path)
    dtype = _DTYPES[manifest["element_type"]]

    expected = dict(expected_entries(spec))
    seen = [e.get("name") for e in manifest["tensors"]]
    dupes = sorted({n for n in seen if seen.count(n) > 1})
    if dupes:
        raise ManifestError(f"{path}: duplicate entries {dupes}")
    missing = [n for n in expected if n not in seen]
    extra = [n for n in seen if n not in expected]
    if extra:
        raise ManifestError(f"{path}: unexpected entry {extra[0]!r}")
    if missing:
        raise ManifestError(f"{path}: missing entry {missing[0]!r}")
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(entry.get("shape", ()))
        if shape != tuple(expected[name]):
            raise ManifestError(
                f"{path}: entry {name!r} has shape {list(shape)}, spec expects {list(expected[name])}"
            )

    payload_path = path.parent / manifest.get("payload", _payload_path(path).name)
    try:
        payload = payload_path.read_bytes()
    except OSError as e:
        raise ManifestError(f"{path}: cannot read payload {payload_path}: {e}") from None

    tensors = {}
    end = 0
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(entry.get("shape", ()))
        offset = entry.get("offset")
        if not isinstance(offset, int) or offset < end:
            raise ManifestError(
                f"{path}: entry {name!r} offset {offset!r} overlaps or precedes byte {end}"
            )
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(payload):
            raise ManifestError(
                f"{path}: truncated payload, entry {name!r} needs bytes "
                f"[{offset}, {offset + nbytes}) but {payload_path.name} has {len(payload)}"
            )
        tensors[name] = (
            np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        end = offset + nbytes
    if manifest.get("payload_bytes", len(payload)) != len(payload):
        raise ManifestError(
            f"{path}: payload is {len(payload)} bytes, manifest declares {manifest['payload_bytes']}"
        )
    if "block" in manifest:
        written_for = spec_from_dict(manifest["block"])
        if written_for != spec:
            diff = [f for f in _SPEC_FIELDS if getattr(written_for, f) != getattr(spec, f)]
            raise ManifestError(f"{path}: manifest was written for a different block ({diff} differ)")

    try:
        return block_from_tensors(spec, tensors)
    except ContractError as e:
        raise ManifestError(f"{path}: {e}") from None

