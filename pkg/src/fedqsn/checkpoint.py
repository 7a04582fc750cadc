"""Binary checkpoints of a :class:`ServerState`.

Layout (little-endian)::

    b"FQSNCKPT"  u8:version  u64:payload_length  u32:crc32(payload)  payload

    payload := u32:round  str:config_hash  blob:meta_json
               model:original  model:global  mask  blob:extras_json
    model   := u32:n_tensors  tensor_record*        (bits field 32 = raw float32)
    mask    := f64:amplification  blob:specs_json  u32:n  (str:name u32:n_bits bytes:packed)*
    str     := u16:length utf-8
    blob    := u32:length bytes

Tensor records share the quantized-model codec. ``extras`` carries the
round history so an interrupted run can resume.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint
from .masking import MaskRecord, MaskSpec
from .protocol import ServerState
from .quantization import RAW_FLOAT_BITS, _Reader, decode_tensor, encode_raw_tensor
from .tensor import ModelState

MAGIC = b"FQSNCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sBQI")


@dataclass
class Checkpoint:
    state: ServerState
    config_hash: str = ""
    extras: dict = field(default_factory=dict)


def _str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _blob(raw: bytes) -> bytes:
    return struct.pack("<I", len(raw)) + raw


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _model(state: ModelState) -> bytes:
    out = struct.pack("<I", len(state))
    for name, tensor in state.params.items():
        out += encode_raw_tensor(name, tensor)
    return out


def _mask(record: MaskRecord) -> bytes:
    out = struct.pack("<d", record.amplification)
    out += _blob(_json([asdict(s) for s in record.specs]))
    out += struct.pack("<I", len(record.keep))
    for name, bits in record.keep.items():
        out += _str(name) + struct.pack("<I", bits.size)
        out += np.packbits(bits, bitorder="little").tobytes()
    return out


def encode_checkpoint(state: ServerState, config_hash: str = "", extras: dict | None = None) -> bytes:
    payload = struct.pack("<I", state.round) + _str(config_hash)
    payload += _blob(_json(state.original_model.meta))
    payload += _model(state.original_model) + _model(state.global_model)
    payload += _mask(state.server_mask)
    payload += _blob(_json(extras or {}))
    return _HEADER.pack(MAGIC, VERSION, len(payload), zlib.crc32(payload)) + payload


def _read_str(r: _Reader) -> str:
    (n,) = r.unpack("H")
    return r.take(n).decode("utf-8")


def _read_blob(r: _Reader) -> bytes:
    (n,) = r.unpack("I")
    return r.take(n)


def _read_model(r: _Reader, meta: dict) -> ModelState:
    (n,) = r.unpack("I")
    params = {}
    for _ in range(n):
        name, bits, _block, values = decode_tensor(r)
        if bits != RAW_FLOAT_BITS:
            raise CorruptCheckpoint(f"tensor {name!r} is not stored as raw floats")
        params[name] = values
    return ModelState(params, meta)


def _read_mask(r: _Reader) -> MaskRecord:
    (amp,) = r.unpack("d")
    specs = tuple(MaskSpec(**s) for s in json.loads(_read_blob(r)))
    (n,) = r.unpack("I")
    keep = {}
    for _ in range(n):
        name = _read_str(r)
        (n_bits,) = r.unpack("I")
        packed = np.frombuffer(r.take(-(-n_bits // 8)), dtype=np.uint8)
        keep[name] = np.unpackbits(packed, bitorder="little")[:n_bits].astype(bool)
    return MaskRecord(keep=keep, amplification=amp, specs=specs)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CorruptCheckpoint(f"checkpoint truncated: {len(data)} bytes is shorter than the header")
    magic, version, length, crc = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint("bad magic bytes, not a fedqsn checkpoint")
    if version != VERSION:
        raise CorruptCheckpoint(f"checkpoint format version {version}, this reader supports version {VERSION}")
    payload = data[_HEADER.size :]
    if len(payload) != length:
        raise CorruptCheckpoint(f"checkpoint length mismatch: header says {length} bytes, found {len(payload)}")
    if zlib.crc32(payload) != crc:
        raise CorruptCheckpoint("checkpoint checksum mismatch")
    try:
        r = _Reader(payload)
        (round_,) = r.unpack("I")
        config_hash = _read_str(r)
        meta = json.loads(_read_blob(r))
        original = _read_model(r, meta)
        global_model = _read_model(r, meta)
        mask = _read_mask(r)
        extras = json.loads(_read_blob(r))
        if r.pos != len(payload):
            raise CorruptCheckpoint(f"{len(payload) - r.pos} unexpected trailing bytes")
    except CorruptCheckpoint:
        raise
    except (ValueError, struct.error, UnicodeDecodeError, TypeError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint payload: {exc}") from None
    state = ServerState(global_model=global_model, original_model=original, server_mask=mask, round=round_)
    return Checkpoint(state, config_hash, extras)


def save_checkpoint(state: ServerState, path, config_hash: str = "", extras: dict | None = None) -> Path:
    path = Path(path)
    data = encode_checkpoint(state, config_hash, extras)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> ServerState:
    return read_checkpoint(path).state
