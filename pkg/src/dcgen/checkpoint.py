"""Binary checkpoint bundles: named float32 tensors plus string metadata.

Layout (all integers little-endian):

    bytes 0..3    magic "DCGN"
    u32           format version (currently 1)
    u32           metadata byte length
    ...           metadata, UTF-8 "key=value" lines
    u32           tensor count
    per tensor    u16 name length | name UTF-8 | u8 dtype code (1 = float32)
                  | u8 rank | u32 per-axis extent | u64 absolute byte offset
    ...           payloads, each offset 64-byte aligned

Writes are atomic (temp file + rename). The loader validates magic, version,
and table integrity (offsets in range, 64-aligned, non-overlapping) before
returning anything, so a truncated or corrupt file never yields a partial
bundle.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import ContractViolation, FormatError, StateError, VersionError
from .models import DiTModel, LatentSpec, ToyAutoencoder, attach_lora
from .rng import Rng
from .tensor import Tensor

MAGIC = b"DCGN"
VERSION = 1
ALIGN = 64
_DTYPE_F32 = 1


def _encode_metadata(metadata: dict) -> bytes:
    lines = []
    for key in sorted(metadata):
        value = str(metadata[key])
        if "=" in key or "\n" in key or not key:
            raise ContractViolation(f"bad metadata key {key!r}")
        if "\n" in value:
            raise ContractViolation(f"metadata value for '{key}' contains a newline")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def _decode_metadata(blob: bytes) -> dict:
    meta = {}
    text = blob.decode("utf-8")
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"metadata line without '=': {line!r}")
        key, value = line.split("=", 1)
        meta[key] = value
    return meta


def save_checkpoint(path: str, tensors: dict, metadata: dict | None = None):
    """Write a named-tensor bundle; everything must be float32."""
    arrays = {}
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr.dtype != np.float32:
            raise ContractViolation(f"tensor '{name}' has dtype {arr.dtype}; checkpoints hold float32")
        arrays[name] = np.ascontiguousarray(arr)
    meta_blob = _encode_metadata(metadata or {})

    entries = []
    table_size = 0
    for name in arrays:
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ContractViolation(f"tensor name too long: {name[:40]}...")
        table_size += 2 + len(nb) + 1 + 1 + 4 * arrays[name].ndim + 8
        entries.append(nb)

    header_size = 4 + 4 + 4 + len(meta_blob) + 4 + table_size
    offsets = {}
    cursor = header_size
    for name, arr in arrays.items():
        cursor = (cursor + ALIGN - 1) // ALIGN * ALIGN
        offsets[name] = cursor
        cursor += arr.nbytes

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(struct.pack("<Q", offsets[name]))
        for name, arr in arrays.items():
            pad = offsets[name] - f.tell()
            if pad:
                f.write(b"\x00" * pad)
            f.write(arr.astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    blob = f.read(n)
    if len(blob) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return blob


def load_checkpoint(path: str):
    """Read a bundle back; returns (tensors, metadata)."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise FormatError("bad magic; not a checkpoint file")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != VERSION:
            raise VersionError(version, VERSION)
        meta_len = struct.unpack("<I", _read_exact(f, 4, "metadata length"))[0]
        meta = _decode_metadata(_read_exact(f, meta_len, "metadata"))
        count = struct.unpack("<I", _read_exact(f, 4, "tensor count"))[0]
        table = []
        for i in range(count):
            name_len = struct.unpack("<H", _read_exact(f, 2, "name length"))[0]
            name = _read_exact(f, name_len, "name").decode("utf-8")
            dtype_code, rank = struct.unpack("<BB", _read_exact(f, 2, "dtype/rank"))
            if dtype_code != _DTYPE_F32:
                raise FormatError(f"tensor '{name}' has unknown dtype code {dtype_code}")
            shape = tuple(struct.unpack("<I", _read_exact(f, 4, "extent"))[0] for _ in range(rank))
            offset = struct.unpack("<Q", _read_exact(f, 8, "offset"))[0]
            table.append((name, shape, offset))

        spans = []
        names = set()
        for name, shape, offset in table:
            if name in names:
                raise FormatError(f"duplicate tensor name '{name}'")
            names.add(name)
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            if offset % ALIGN:
                raise FormatError(f"tensor '{name}' offset {offset} not {ALIGN}-byte aligned")
            if offset + nbytes > size:
                raise FormatError(f"tensor '{name}' extends past end of file")
            spans.append((offset, offset + nbytes, name))
        spans.sort()
        for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise FormatError(f"tensors '{n0}' and '{n1}' overlap")

        tensors = {}
        for name, shape, offset in table:
            f.seek(offset)
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            buf = _read_exact(f, nbytes, f"payload of '{name}'")
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    return tensors, meta


# -- model-level helpers -------------------------------------------------------


def _hp_meta(obj) -> dict:
    return {f"hp.{k}": str(v) for k, v in obj.hyperparams().items()}


def save_model_checkpoint(path: str, model, metadata: dict | None = None,
                          opt_state=None, ema=None):
    """Bundle a model (and optionally optimizer/EMA state) self-describingly."""
    meta = dict(metadata or {})
    meta.update(_hp_meta(model))
    tensors = {}
    for name, p in model.named_params().items():
        tensors[f"param.{name}"] = p.data
    if isinstance(model, DiTModel):
        loras = [lin.lora for lin in model._linears().values() if lin.lora is not None]
        if loras:
            meta["hp.lora_rank"] = str(loras[0].rank)
            meta["hp.lora_alpha"] = str(loras[0].alpha)
            meta["hp.lora_targets"] = ";".join(sorted(ad.target for ad in loras))
    if opt_state is not None:
        meta["opt.step"] = str(opt_state.step)
        for name, arr in opt_state.m.items():
            tensors[f"opt.m.{name}"] = arr
        for name, arr in opt_state.v.items():
            tensors[f"opt.v.{name}"] = arr
    if ema is not None:
        meta["ema.decay"] = repr(ema.decay)
        for name, arr in ema.shadow.items():
            tensors[f"ema.{name}"] = arr
    save_checkpoint(path, tensors, meta)


def _require(meta: dict, key: str) -> str:
    if key not in meta:
        raise FormatError(f"checkpoint metadata missing '{key}'")
    return meta[key]


def build_model_from_metadata(meta: dict):
    """Reconstruct an untrained model object from checkpoint metadata."""
    kind = _require(meta, "hp.kind")
    spec = LatentSpec(f=int(_require(meta, "hp.f")), p=int(_require(meta, "hp.p")),
                      c=int(_require(meta, "hp.c")))
    if kind == "autoencoder":
        return ToyAutoencoder(spec, hidden=int(_require(meta, "hp.hidden")), rng=Rng(0),
                              image_channels=int(meta.get("hp.image_channels", 3)))
    if kind == "dit":
        model = DiTModel(
            spec,
            image_size=int(_require(meta, "hp.image_size")),
            rng=Rng(0),
            hidden=int(_require(meta, "hp.hidden")),
            depth=int(_require(meta, "hp.depth")),
            heads=int(_require(meta, "hp.heads")),
            mlp_ratio=int(_require(meta, "hp.mlp_ratio")),
            num_classes=int(_require(meta, "hp.num_classes")),
            guidance_embed=bool(int(meta.get("hp.guidance_embed", "0"))),
            image_channels=int(meta.get("hp.image_channels", 3)),
        )
        if "hp.lora_rank" in meta:
            targets = tuple(meta["hp.lora_targets"].split(";"))
            patterns = tuple(f"{t}.weight" for t in targets)
            attach_lora(model, rank=int(meta["hp.lora_rank"]),
                        alpha=float(meta["hp.lora_alpha"]), targets=patterns, rng=Rng(0))
        return model
    raise FormatError(f"unknown model kind '{kind}'")


def load_model_checkpoint(path: str):
    """Load (model, metadata, raw_tensors); parameters are filled in."""
    tensors, meta = load_checkpoint(path)
    model = build_model_from_metadata(meta)
    params = model.named_params()
    for name, p in params.items():
        key = f"param.{name}"
        if key not in tensors:
            raise FormatError(f"checkpoint missing parameter '{name}'")
        if tensors[key].shape != p.data.shape:
            raise FormatError(
                f"parameter '{name}' shape {tensors[key].shape} != expected {p.data.shape}"
            )
        p.data = tensors[key].copy()
    return model, meta, tensors


def load_optimizer_state(tensors: dict, meta: dict):
    from .optim import OptimizerState

    if "opt.step" not in meta:
        raise StateError("checkpoint holds no optimizer state; cannot resume from it")
    st = OptimizerState(step=int(meta["opt.step"]))
    for key, arr in tensors.items():
        if key.startswith("opt.m."):
            st.m[key[len("opt.m."):]] = arr.copy()
        elif key.startswith("opt.v."):
            st.v[key[len("opt.v."):]] = arr.copy()
    return st


def load_ema_state(tensors: dict, meta: dict):
    from .optim import EmaState

    if "ema.decay" not in meta:
        return None
    ema = EmaState(decay=float(meta["ema.decay"]))
    for key, arr in tensors.items():
        if key.startswith("ema."):
            ema.shadow[key[len("ema."):]] = arr.copy()
    return ema
