"""Blockwise absmax quantization.

Each tensor is flattened row-major and cut into contiguous blocks of
``block_size`` values (the last block may be short; blocks never span
tensors). A block with absmax ``a`` is coded as
``round(q * x / a)`` with ``q = 2**(bits-1) - 1``, rounding half away from
zero, and decoded as ``code * a / q``.

``bits == 1`` would make ``q`` zero, so the one-bit path is sign
quantization instead: ``code = sign(x)`` and ``value = code * a``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, ShapeMismatch
from .tensor import DTYPE, ModelState

DEFAULT_BLOCK_SIZE = 256
RAW_FLOAT_BITS = 32


@dataclass(frozen=True)
class QuantConfig:
    bit_width: int = 2
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        if not isinstance(self.bit_width, (int, np.integer)) or not 1 <= self.bit_width <= 8:
            raise InvalidConfig(f"bit_width must be an integer in [1, 8], got {self.bit_width!r}")
        if not isinstance(self.block_size, (int, np.integer)) or self.block_size < 1:
            raise InvalidConfig(f"block_size must be a positive integer, got {self.block_size!r}")

    @property
    def qmax(self) -> int:
        """Largest code magnitude (1 on the sign path)."""
        return max(1, 2 ** (self.bit_width - 1) - 1)


@dataclass(frozen=True)
class QuantizedTensor:
    shape: tuple[int, ...]
    codes: np.ndarray  # int8, one per element, row-major
    scales: np.ndarray  # float32 absmax per block

    @property
    def num_blocks(self) -> int:
        return int(self.scales.size)


@dataclass(frozen=True)
class QuantizedModel:
    tensors: dict[str, QuantizedTensor]
    config: QuantConfig
    meta: dict[str, str] = field(default_factory=dict)


def round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _blocks(flat: np.ndarray, block_size: int) -> np.ndarray:
    n_blocks = -(-flat.size // block_size)
    padded = np.zeros(n_blocks * block_size, dtype=flat.dtype)
    padded[: flat.size] = flat
    return padded.reshape(n_blocks, block_size)


def quantize_tensor(tensor: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
    flat = np.asarray(tensor, dtype=DTYPE).ravel()
    blocks = _blocks(flat, cfg.block_size)
    absmax = np.abs(blocks).max(axis=1)
    safe = np.where(absmax > 0, absmax, 1.0).astype(np.float64)[:, None]
    x = blocks.astype(np.float64)
    if cfg.bit_width == 1:
        codes = np.sign(x)
    else:
        q = cfg.qmax
        codes = np.clip(round_half_away((q / safe) * x), -q, q)
    codes = codes.reshape(-1)[: flat.size].astype(np.int8)
    return QuantizedTensor(shape=tuple(np.shape(tensor)), codes=codes, scales=absmax.astype(DTYPE))


def dequantize_tensor(qt: QuantizedTensor, cfg: QuantConfig) -> np.ndarray:
    n = int(np.prod(qt.shape))
    codes = _blocks(qt.codes.astype(np.float64), cfg.block_size)
    scales = qt.scales.astype(np.float64)[:, None]
    if cfg.bit_width == 1:
        values = codes * scales
    else:
        values = codes * scales / cfg.qmax
    return values.reshape(-1)[:n].astype(DTYPE).reshape(qt.shape)


def quantize(state: ModelState, cfg: QuantConfig) -> QuantizedModel:
    if not isinstance(cfg, QuantConfig):
        raise InvalidConfig("quantize needs a QuantConfig")
    tensors = {name: quantize_tensor(t, cfg) for name, t in state.params.items()}
    return QuantizedModel(tensors=tensors, config=cfg, meta=dict(state.meta))


def dequantize(q: QuantizedModel) -> ModelState:
    params = {name: dequantize_tensor(qt, q.config) for name, qt in q.tensors.items()}
    return ModelState._trusted(params, q.meta)


def fake_quantize(state: ModelState, cfg: QuantConfig) -> ModelState:
    """``dequantize(quantize(state))``: values snapped onto the code grid."""
    return dequantize(quantize(state, cfg))


def quantization_error_bound(block_absmax: float, bit_width: int) -> float:
    """Largest per-element round-trip error for a block, half a quantization step."""
    if bit_width < 2:
        raise InvalidConfig("the half-step error bound needs bit_width >= 2")
    return 0.5 * float(block_absmax) / (2 ** (bit_width - 1) - 1)


def block_error_bounds(tensor: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Per-element error bound, shaped like ``tensor``."""
    flat = np.asarray(tensor, dtype=DTYPE).ravel()
    absmax = np.abs(_blocks(flat, cfg.block_size)).max(axis=1).astype(np.float64)
    bounds = np.repeat(0.5 * absmax / cfg.qmax, cfg.block_size)[: flat.size]
    return bounds.reshape(np.shape(tensor))


# --------------------------------------------------------------------------
# Canonical byte layout (little-endian throughout)
#
#   model  := b"FQQM" u8:version u8:bits u32:block_size u32:n_tensors tensor*
#   tensor := u16:len name u8:ndim u32*ndim:shape u8:bits u32:block_size
#             u32:n_blocks f32*n_blocks:scales packed_codes
#
# Codes are two's-complement, ``bits`` per code, LSB-first, padded to a byte
# boundary per tensor. bits == 1 stores ternary sign codes in 2-bit fields.
# bits == 32 means raw float32 payload with n_blocks == 0.
# --------------------------------------------------------------------------

MODEL_MAGIC = b"FQQM"
CODEC_VERSION = 1


def _field_width(bits: int) -> int:
    return 2 if bits == 1 else bits


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    width = _field_width(bits)
    unsigned = codes.astype(np.int64) & ((1 << width) - 1)
    planes = (unsigned[:, None] >> np.arange(width)) & 1
    return np.packbits(planes.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, count: int, bits: int) -> np.ndarray:
    width = _field_width(bits)
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    planes = raw[: count * width].reshape(count, width).astype(np.int64)
    unsigned = (planes << np.arange(width)).sum(axis=1)
    sign_bit = 1 << (width - 1)
    return (unsigned - ((unsigned & sign_bit) << 1)).astype(np.int8)


def packed_size(count: int, bits: int) -> int:
    return -(-count * _field_width(bits) // 8)


def _encode_header(name: str, shape: tuple[int, ...], bits: int, block_size: int, n_blocks: int) -> bytes:
    raw = name.encode("utf-8")
    out = struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape))
    out += struct.pack(f"<{len(shape)}I", *shape)
    return out + struct.pack("<BII", bits, block_size, n_blocks)


def encode_quantized_tensor(name: str, qt: QuantizedTensor, cfg: QuantConfig) -> bytes:
    out = _encode_header(name, qt.shape, cfg.bit_width, cfg.block_size, qt.num_blocks)
    out += qt.scales.astype("<f4").tobytes()
    return out + pack_codes(qt.codes, cfg.bit_width)


def encode_raw_tensor(name: str, tensor: np.ndarray) -> bytes:
    out = _encode_header(name, tuple(tensor.shape), RAW_FLOAT_BITS, 0, 0)
    return out + np.ascontiguousarray(tensor, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = offset

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ValueError(f"truncated payload: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def decode_tensor(reader: _Reader):
    """Read one tensor record. Returns ``(name, bits, block_size, payload)``.

    ``payload`` is a float32 array for raw records, else a QuantizedTensor.
    """
    (name_len,) = reader.unpack("H")
    name = reader.take(name_len).decode("utf-8")
    (ndim,) = reader.unpack("B")
    shape = tuple(reader.unpack(f"{ndim}I")) if ndim else ()
    bits, block_size, n_blocks = reader.unpack("BII")
    count = int(np.prod(shape)) if shape else 0
    if bits == RAW_FLOAT_BITS:
        values = np.frombuffer(reader.take(4 * count), dtype="<f4").astype(DTYPE).reshape(shape)
        return name, bits, block_size, values
    if not 1 <= bits <= 8 or block_size < 1:
        raise ValueError(f"tensor {name!r}: invalid bits={bits} block_size={block_size}")
    if n_blocks != -(-count // block_size):
        raise ValueError(f"tensor {name!r}: {n_blocks} blocks cannot cover {count} values")
    scales = np.frombuffer(reader.take(4 * n_blocks), dtype="<f4").astype(DTYPE)
    codes = unpack_codes(reader.take(packed_size(count, bits)), count, bits)
    return name, bits, block_size, QuantizedTensor(shape=shape, codes=codes, scales=scales)


def encode_quantized(q: QuantizedModel) -> bytes:
    cfg = q.config
    out = MODEL_MAGIC + struct.pack("<BBII", CODEC_VERSION, cfg.bit_width, cfg.block_size, len(q.tensors))
    for name in sorted(q.tensors):
        out += encode_quantized_tensor(name, q.tensors[name], cfg)
    return out


def decode_quantized(data: bytes) -> QuantizedModel:
    reader = _Reader(data)
    if reader.take(4) != MODEL_MAGIC:
        raise ValueError("not a quantized model payload")
    version, bits, block_size, n = reader.unpack("BBII")
    if version != CODEC_VERSION:
        raise ValueError(f"codec version {version} unsupported (expected {CODEC_VERSION})")
    cfg = QuantConfig(bit_width=bits, block_size=block_size)
    tensors = {}
    for _ in range(n):
        name, t_bits, t_block, qt = decode_tensor(reader)
        if (t_bits, t_block) != (bits, block_size) or not isinstance(qt, QuantizedTensor):
            raise ShapeMismatch(f"tensor {name!r} disagrees with model-level quantization config")
        tensors[name] = qt
    if reader.pos != len(data):
        raise ValueError(f"{len(data) - reader.pos} trailing bytes after quantized model")
    return QuantizedModel(tensors=tensors, config=cfg)
