"""Named-tensor checkpoint files and base <-> conviformer weight conversion.

File layout (all integers little-endian)::

    b"CVFCKPT\\0"   8-byte magic
    u32             format version (1)
    u64             header length H
    H bytes         UTF-8 JSON: {"entries": [{name, dtype, shape, offset, nbytes}, ...],
                                 "metadata": {...}}
    payload         entry bytes, C order, little-endian; offsets are relative to
                    the payload start and entries are stored back to back

Parameter names follow the schema documented in :mod:`conviformer.model`.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConversionError, FormatError
from .model import Conviformer, ConviformerConfig

MAGIC = b"CVFCKPT\0"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8"), "i32": np.dtype("<i4"),
          "u8": np.dtype("u1")}
_TAG = {v.str: k for k, v in DTYPES.items()}

DIRECTIONS = ("base_to_conviformer", "conviformer_to_base")

SCHEMA = [re.compile(p) for p in (
    r"frontend\.down\.\d+\.(conv\.[wb]|norm\.[gb])",
    r"frontend\.out\.conv\.[wb]",
    r"patch_embed\.proj\.[wb]",
    r"(gpsa|sa)\.\d+\.(norm[12]\.[gb]|attn\.(wq|wk|wv|wo|bo)|ffn\.(w1|b1|w2|b2))",
    r"gpsa\.\d+\.attn\.(pos\.[wb]|gate)",
    r"cls_token",
    r"norm\.[gb]",
    r"head\.(tax\.[wb]|(gen|fam)\.(w1|b1|w2|b2)|emb_(tax|gen|fam)\.[wb])",
)]
FRONTEND = re.compile(r"frontend\.")
PATCH_EMBED = ("patch_embed.proj.w", "patch_embed.proj.b")


def matches_schema(name: str) -> bool:
    return any(p.fullmatch(name) for p in SCHEMA)


@dataclass
class CheckpointBundle:
    """Ordered ``name -> array`` entries plus free-form JSON metadata."""

    entries: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for name, arr in self.entries.items():
            a = np.asarray(arr)
            if a.dtype.newbyteorder("<").str not in _TAG:
                raise FormatError(f"entry {name!r}: unsupported dtype {a.dtype}")
            clean[name] = a
        self.entries = clean

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    @classmethod
    def from_model(cls, model: Conviformer, **metadata) -> "CheckpointBundle":
        meta = {"config": model.cfg.to_dict(), "input_res": model.input_res, "seed": model.cfg.seed}
        meta.update(metadata)
        return cls({k: v.copy() for k, v in model.state_dict().items()}, meta)

    # ------------------------------------------------------------ bytes

    def to_bytes(self) -> bytes:
        header, chunks, offset = [], [], 0
        for name, arr in self.entries.items():
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            header.append({"name": name, "dtype": _TAG[le.dtype.str], "shape": list(arr.shape),
                           "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        head = json.dumps({"entries": header, "metadata": self.metadata}, sort_keys=True).encode()
        return _PREAMBLE.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<bytes>") -> "CheckpointBundle":
        if len(buf) < _PREAMBLE.size:
            raise FormatError(f"{source}: truncated preamble ({len(buf)} bytes)")
        magic, version, hlen = _PREAMBLE.unpack_from(buf)
        if magic != MAGIC:
            raise FormatError(f"{source}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{source}: unsupported format version {version}")
        start = _PREAMBLE.size + hlen
        if len(buf) < start:
            raise FormatError(f"{source}: truncated header (need {hlen} bytes)")
        try:
            header = json.loads(buf[_PREAMBLE.size:start].decode())
            specs = header["entries"]
            metadata = header.get("metadata", {})
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{source}: corrupt header: {exc}") from exc
        payload = memoryview(buf)[start:]
        entries: dict[str, np.ndarray] = {}
        expect = 0
        for spec in specs:
            try:
                name, tag, shape = spec["name"], spec["dtype"], tuple(int(s) for s in spec["shape"])
                offset, nbytes = int(spec["offset"]), int(spec["nbytes"])
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{source}: corrupt header entry {spec!r}") from exc
            if name in entries:
                raise FormatError(f"{source}: duplicate entry {name!r}")
            if tag not in DTYPES:
                raise FormatError(f"{source}: entry {name!r} has unknown dtype {tag!r}")
            dt = DTYPES[tag]
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
                raise FormatError(f"{source}: entry {name!r} declares {nbytes} bytes for shape {shape} {tag}")
            if offset != expect:
                raise FormatError(f"{source}: entry {name!r} starts at {offset}, expected {expect}")
            if offset + nbytes > len(payload):
                raise FormatError(f"{source}: entry {name!r} is incomplete: needs bytes "
                                  f"[{offset}, {offset + nbytes}) of the payload, only {len(payload)} present")
            arr = np.frombuffer(payload[offset:offset + nbytes], dtype=dt).reshape(shape)
            entries[name] = arr.astype(dt.newbyteorder("="), copy=True)
            expect = offset + nbytes
        if expect != len(payload):
            raise FormatError(f"{source}: {len(payload) - expect} trailing bytes after the last entry")
        return cls(entries, metadata)

    def save(self, path) -> None:
        """Write atomically: a temp file in the same directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        return cls.from_bytes(Path(path).read_bytes(), source=str(path))


save = CheckpointBundle.save
load = CheckpointBundle.load


# ---------------------------------------------------------------- conversion


def convert(bundle: CheckpointBundle, direction: str) -> CheckpointBundle:
    """Strip the parameters the target architecture cannot reuse.

    ``base_to_conviformer`` drops the RGB patch projection (weight and bias);
    ``conviformer_to_base`` drops the convolutional front-end and the
    64-channel patch projection. Retained arrays are passed through unchanged
    and the dropped names are listed in ``metadata["conversion"]``.
    """
    direction = direction.replace("-", "_")
    if direction not in DIRECTIONS:
        raise ConversionError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    unmatched = [n for n in bundle.entries if not matches_schema(n)]
    if unmatched:
        raise ConversionError(f"names outside the parameter schema: {unmatched}")
    has_frontend = [n for n in bundle.entries if FRONTEND.match(n)]
    missing_embed = [n for n in PATCH_EMBED if n not in bundle.entries]
    if missing_embed:
        raise ConversionError(f"source lacks patch embedding entries {missing_embed}")
    if direction == "base_to_conviformer":
        if has_frontend:
            raise ConversionError(f"base checkpoint unexpectedly has front-end entries: {has_frontend}")
        drop = list(PATCH_EMBED)
        mode = "conviformer"
    else:
        if not has_frontend:
            raise ConversionError("conviformer checkpoint has no front-end entries")
        drop = has_frontend + list(PATCH_EMBED)
        mode = "convit"
    kept = {k: v for k, v in bundle.entries.items() if k not in drop}
    meta = json.loads(json.dumps(bundle.metadata))
    if isinstance(meta.get("config"), dict):
        meta["config"]["mode"] = mode
    meta["conversion"] = {"direction": direction, "dropped": [n for n in bundle.entries if n in drop]}
    return CheckpointBundle(kept, meta)


@dataclass
class LoadReport:
    loaded: list[str]
    fresh: list[str]


def load_into(model: Conviformer, bundle: CheckpointBundle) -> LoadReport:
    """Load every bundle entry into ``model``; report which model parameters kept their init.

    Raises ConversionError if the bundle has names the model does not know.
    """
    missing, unexpected = model.load_state_dict(bundle.entries, strict=False)
    if unexpected:
        raise ConversionError(f"bundle entries unknown to the model: {unexpected}")
    return LoadReport([k for k in model.params if k not in missing], missing)


def save_model(model: Conviformer, path, **metadata) -> None:
    CheckpointBundle.from_model(model, **metadata).save(path)


def load_model(path, input_res: Optional[int] = None) -> tuple[Conviformer, CheckpointBundle]:
    """Rebuild a model from the config snapshot in a checkpoint and load its weights strictly."""
    bundle = CheckpointBundle.load(path)
    try:
        cfg = ConviformerConfig.from_dict(bundle.metadata["config"])
        res = input_res or int(bundle.metadata["input_res"])
    except KeyError as exc:
        raise FormatError(f"{path}: metadata lacks {exc}") from exc
    model = Conviformer(cfg, res)
    model.load_state_dict(bundle.entries, strict=True)
    return model, bundle
