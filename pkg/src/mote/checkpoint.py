"""Checkpoint directory = ``manifest.json`` + ``weights.bin``.

``weights.bin`` concatenates little-endian tensors, each starting on a 64-byte
boundary. Tensor dtypes:

* ``f32``      float32, row-major
* ``i2packed`` INT2 ternary codes in the layout of :mod:`mote.packing`; ``scale`` is the per-tensor scale
* ``i8``       int8 RTN codes, row-major; ``scale`` is the list of per-row scales
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import (
    CheckpointIOError,
    CorruptManifestError,
    MissingTensorError,
    ShapeMismatchError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)
from .model import GluExpert, ModelConfig, MoTEModel, PackedGluExpert
from .packing import PackedTernaryMatrix, packed_row_bytes, unpack_int2

FORMAT_VERSION = 1
ALIGN = 64
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
DTYPES = ("f32", "i2packed", "i8")


def expected_nbytes(dtype: str, shape) -> int:
    if dtype == "f32":
        return 4 * int(np.prod(shape))
    if dtype == "i8":
        return int(np.prod(shape))
    if dtype == "i2packed":
        if len(shape) != 2:
            raise CorruptManifestError(f"i2packed tensors must be 2-d, got shape {shape}")
        return shape[0] * packed_row_bytes(shape[1])
    raise UnsupportedDtypeError(f"unsupported dtype {dtype!r}")


def _tensors(model: MoTEModel):
    """Yield ``(name, dtype, payload bytes, shape, scale, frozen)`` for every stored tensor."""
    for mod_name, module in model.named_modules():
        prefix = f"{mod_name}." if mod_name else ""
        if isinstance(module, PackedGluExpert):
            for w, p in module.packed.items():
                yield prefix + w, "i2packed", p.data, [p.rows, p.cols], p.scale, False
            continue
        for pname, p in module.named_parameters(recurse=False):
            frozen = not p.requires_grad
            if isinstance(module, GluExpert) and pname in module.rtn:
                codes, scales = module.rtn[pname]
                yield (prefix + pname, "i8", codes.astype(np.int8).tobytes(), list(codes.shape),
                       [float(s) for s in scales], frozen)
            else:
                arr = p.detach().cpu().numpy().astype("<f4", copy=False)
                yield prefix + pname, "f32", arr.tobytes(), list(arr.shape), None, frozen


def save_checkpoint(model: MoTEModel, path, meta: dict | None = None) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        index, offset = [], 0
        with open(path / WEIGHTS, "wb") as f:
            for name, dtype, payload, shape, scale, frozen in _tensors(model):
                pad = -offset % ALIGN
                f.write(b"\0" * pad)
                offset += pad
                f.write(payload)
                index.append({
                    "name": name, "dtype": dtype, "shape": shape, "byte_offset": offset,
                    "byte_length": len(payload), "scale": scale, "frozen": frozen,
                })
                offset += len(payload)
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": model.cfg.to_dict(),
            "tensors": index,
            "meta": meta or {},
        }
        (path / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    except OSError as e:
        raise CheckpointIOError(f"failed to write checkpoint at {path}: {e}") from e
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text(encoding="utf-8")
    except OSError as e:
        raise CheckpointIOError(f"cannot read {path / MANIFEST}: {e}") from e
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise CorruptManifestError(f"{path / MANIFEST} is not valid JSON: {e}") from e
    if not isinstance(manifest, dict) or "tensors" not in manifest or "config" not in manifest:
        raise CorruptManifestError(f"{path / MANIFEST} lacks config or tensor index")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    return manifest


def _validate_index(index: list[dict], blob_len: int) -> dict[str, dict]:
    by_name: dict[str, dict] = {}
    spans = []
    for t in index:
        try:
            name, dtype, shape = t["name"], t["dtype"], [int(s) for s in t["shape"]]
            off, length = int(t["byte_offset"]), int(t["byte_length"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptManifestError(f"malformed tensor entry {t!r}") from e
        if dtype not in DTYPES:
            raise UnsupportedDtypeError(f"tensor {name}: unsupported dtype {dtype!r}")
        if name in by_name:
            raise CorruptManifestError(f"duplicate tensor name {name}")
        if length != expected_nbytes(dtype, shape):
            raise CorruptManifestError(
                f"tensor {name}: byte_length {length} != {expected_nbytes(dtype, shape)} for {dtype}{shape}"
            )
        if off < 0 or off + length > blob_len:
            raise CorruptManifestError(f"tensor {name} lies outside the weight file")
        by_name[name] = {**t, "shape": shape, "byte_offset": off, "byte_length": length}
        spans.append((off, off + length, name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CorruptManifestError(f"tensors {an} and {bn} overlap")
    return by_name


def load_checkpoint(path) -> MoTEModel:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / WEIGHTS).read_bytes()
    except OSError as e:
        raise CheckpointIOError(f"cannot read {path / WEIGHTS}: {e}") from e
    entries = _validate_index(manifest["tensors"], len(blob))
    cfg = ModelConfig.from_dict(manifest["config"])
    model = MoTEModel(cfg)

    def raw(t):
        return blob[t["byte_offset"] : t["byte_offset"] + t["byte_length"]]

    expected = dict(model.named_parameters())
    unknown = set(entries) - set(expected)
    if unknown:
        raise CorruptManifestError(f"manifest names unknown tensors: {sorted(unknown)[:5]}")
    missing = set(expected) - set(entries)
    if missing:
        raise MissingTensorError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")

    for name, p in expected.items():
        t = entries[name]
        if list(p.shape) != t["shape"]:
            raise ShapeMismatchError(f"tensor {name}: shape {t['shape']} != expected {list(p.shape)}")

    packed_groups: dict[str, dict[str, PackedTernaryMatrix]] = {}
    with torch.no_grad():
        for name, p in expected.items():
            t = entries[name]
            mod_name, pname = name.rsplit(".", 1)
            if t["dtype"] == "i2packed":
                pm = PackedTernaryMatrix(t["shape"][0], t["shape"][1], raw(t), float(t["scale"]))
                unpack_int2(pm)  # rejects invalid codes
                packed_groups.setdefault(mod_name, {})[pname] = pm
                continue
            if t["dtype"] == "f32":
                arr = np.frombuffer(raw(t), dtype="<f4").reshape(t["shape"])
            else:
                codes = np.frombuffer(raw(t), dtype=np.int8).reshape(t["shape"]).copy()
                scales = np.asarray(t["scale"], dtype=np.float32)
                if scales.shape != (t["shape"][0],):
                    raise CorruptManifestError(f"tensor {name}: need one scale per row")
                module = model.get_submodule(mod_name)
                module.rtn[pname] = (codes, scales)
                arr = scales[:, None] * codes.astype(np.float32)
            p.copy_(torch.from_numpy(arr.copy()))
            p.requires_grad_(not t.get("frozen", False))

    for mod_name, mats in packed_groups.items():
        if set(mats) != {"w_up", "w_gate", "w_down"} or ".moe.experts." not in f".{mod_name}.":
            raise CorruptManifestError(f"{mod_name}: packed storage must cover a whole routed expert")
        parent, idx = mod_name.rsplit(".", 1)
        model.get_submodule(parent)[int(idx)] = PackedGluExpert(**mats)
    return model


def load_meta(path) -> dict:
    return read_manifest(path).get("meta", {})
