"""DSM: the on-device model container format.

A DSM container carries a model's structure and parameters but no
training metadata: neither the trainable mask nor any optimizer state
is stored, so a parsed model comes back inference-only (all layers
frozen). All multi-byte integers are little-endian; all parameter data
is raw little-endian float32.

Byte layout (version 1)::

    offset  size        field
    0       4           magic "DSM1"
    4       2           version (u16)
    6       1           input rank R
    7       4*R         input dims (u32 each)
    .       4           num_classes (u32)
    .       4           layer count (u32)

    per layer:
            2           identifier byte length L (u16)
            L           identifier (UTF-8)
            1           kind code (see KIND_CODES)
            1           dtype code (0 = float32)
            1           output rank r
            4*r         output dims (u32 each)
            1           parameter count P

    per parameter:
            2           name byte length M (u16)
            M           name (UTF-8)
            1           rank q
            4*q         dims (u32 each)
            4           data byte length (u32, must equal 4 * prod(dims))
            .           raw float32 data, little-endian

Container size is therefore exactly::

    19 + 4*R + sum over layers of (6 + L + 4*r)
             + sum over parameters of (7 + M + 4*q + 4*numel)

which ``container_size`` computes without serializing. Parsing never
reads past a declared length: every violation raises a typed DsmError
carrying the byte offset at which it was detected.
"""

from __future__ import annotations

import struct

import numpy as np

from .engine import F32, KINDS, LayerSpec, Model

MAGIC = b"DSM1"
VERSION = 1
MAX_RANK = 8

KIND_CODES = {kind: i + 1 for i, kind in enumerate(KINDS)}
CODE_KINDS = {code: kind for kind, code in KIND_CODES.items()}
DTYPE_CODES = {"f32": 0}
CODE_DTYPES = {0: "f32"}


class DsmError(Exception):
    """Base class for container errors; ``offset`` locates the fault."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{message} (offset {offset})")


class BadMagic(DsmError):
    def __init__(self, offset: int = 0, found: bytes = b""):
        super().__init__(offset, f"bad magic {found!r}, expected {MAGIC!r}")


class UnsupportedVersion(DsmError):
    def __init__(self, offset: int, version: int):
        self.version = version
        super().__init__(offset, f"unsupported container version {version}")


class Truncated(DsmError):
    def __init__(self, offset: int, wanted: int = 0):
        super().__init__(offset, f"container truncated, wanted {wanted} more bytes")


class BadLayerKind(DsmError):
    def __init__(self, offset: int, code: int):
        self.code = code
        super().__init__(offset, f"unknown layer kind code {code}")


class InvalidModel(DsmError):
    """Structurally invalid content in an otherwise well-framed container."""


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise Truncated(self.pos, n - (len(self.buf) - self.pos))
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def utf8(self, length_bytes: int = 2) -> str:
        at = self.pos
        n = self.u16() if length_bytes == 2 else self.u8()
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidModel(at, f"invalid UTF-8 string: {exc}") from None

    def dims(self, rank: int) -> tuple[int, ...]:
        at = self.pos
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        for d in dims:
            if d == 0:
                raise InvalidModel(at, "zero dimension")
        return dims


def _rank_checked(reader: _Reader, what: str) -> int:
    at = reader.pos
    rank = reader.u8()
    if rank == 0 or rank > MAX_RANK:
        raise InvalidModel(at, f"{what} rank {rank} outside 1..{MAX_RANK}")
    return rank


def _numel(dims) -> int:
    n = 1
    for d in dims:
        n *= int(d)
    return n


def parse_model(buf: bytes) -> Model:
    """Parse a container into an inference-only model (all layers frozen).

    Raises BadMagic, UnsupportedVersion, Truncated, BadLayerKind or
    InvalidModel; never reads past declared lengths.
    """
    r = _Reader(bytes(buf))
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagic(0, magic)
    at = r.pos
    version = r.u16()
    if version != VERSION:
        raise UnsupportedVersion(at, version)
    input_rank = _rank_checked(r, "input")
    input_shape = r.dims(input_rank)
    at = r.pos
    num_classes = r.u32()
    if num_classes == 0:
        raise InvalidModel(at, "num_classes must be positive")
    at = r.pos
    layer_count = r.u32()
    if layer_count == 0:
        raise InvalidModel(at, "no layers")

    layers: list[LayerSpec] = []
    seen_ids: set[str] = set()
    for _ in range(layer_count):
        at = r.pos
        identifier = r.utf8()
        if identifier in seen_ids:
            raise InvalidModel(at, f"duplicate layer identifier {identifier!r}")
        seen_ids.add(identifier)
        at = r.pos
        kind_code = r.u8()
        if kind_code not in CODE_KINDS:
            raise BadLayerKind(at, kind_code)
        kind = CODE_KINDS[kind_code]
        at = r.pos
        dtype_code = r.u8()
        if dtype_code not in CODE_DTYPES:
            raise InvalidModel(at, f"unknown dtype code {dtype_code}")
        out_rank = _rank_checked(r, "output")
        output_shape = r.dims(out_rank)
        param_count = r.u8()
        params: dict[str, np.ndarray] = {}
        for _ in range(param_count):
            at = r.pos
            name = r.utf8()
            if name in params:
                raise InvalidModel(at, f"duplicate parameter name {name!r}")
            p_rank = _rank_checked(r, "parameter")
            p_dims = r.dims(p_rank)
            at = r.pos
            byte_len = r.u32()
            if byte_len != 4 * _numel(p_dims):
                raise InvalidModel(
                    at, f"parameter byte length {byte_len} does not match dims {p_dims}")
            raw = r.take(byte_len)
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(p_dims).astype(F32)
        layers.append(LayerSpec(identifier, kind, output_shape,
                                dtype=CODE_DTYPES[dtype_code], params=params))

    if r.pos != len(r.buf):
        raise InvalidModel(r.pos, f"{len(r.buf) - r.pos} trailing bytes after layer table")
    if layers[-1].kind != "softmax":
        raise InvalidModel(r.pos, "last layer must be softmax")
    if layers[-1].output_shape != (num_classes,):
        raise InvalidModel(r.pos, "softmax output does not match num_classes")
    return Model(layers=layers, input_shape=input_shape, num_classes=num_classes,
                 trainable_mask=[False] * len(layers))


def serialize_model(model: Model) -> bytes:
    """Serialize a model to the container layout; the trainable mask is dropped."""
    _validate_for_serialization(model)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("B", len(model.input_shape))
    out += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    out += struct.pack("<I", model.num_classes)
    out += struct.pack("<I", len(model.layers))
    for spec in model.layers:
        ident = spec.identifier.encode("utf-8")
        out += struct.pack("<H", len(ident)) + ident
        out += struct.pack("B", KIND_CODES[spec.kind])
        out += struct.pack("B", DTYPE_CODES[spec.dtype])
        out += struct.pack("B", len(spec.output_shape))
        out += struct.pack(f"<{len(spec.output_shape)}I", *spec.output_shape)
        out += struct.pack("B", len(spec.params))
        for name, arr in spec.params.items():
            raw_name = name.encode("utf-8")
            out += struct.pack("<H", len(raw_name)) + raw_name
            out += struct.pack("B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            out += struct.pack("<I", len(data))
            out += data
    return bytes(out)


def _validate_for_serialization(model: Model) -> None:
    if not model.layers:
        raise InvalidModel(0, "no layers")
    seen: set[str] = set()
    for spec in model.layers:
        if spec.kind not in KIND_CODES:
            raise InvalidModel(0, f"unknown layer kind {spec.kind!r}")
        if spec.dtype not in DTYPE_CODES:
            raise InvalidModel(0, f"unknown dtype {spec.dtype!r}")
        if spec.identifier in seen:
            raise InvalidModel(0, f"duplicate layer identifier {spec.identifier!r}")
        seen.add(spec.identifier)
        if not spec.output_shape or len(spec.output_shape) > MAX_RANK:
            raise InvalidModel(0, "output rank outside 1..8")
        if len(spec.params) > 255:
            raise InvalidModel(0, "too many parameters")
        for arr in spec.params.values():
            if arr.ndim == 0 or arr.ndim > MAX_RANK:
                raise InvalidModel(0, "parameter rank outside 1..8")
    if model.layers[-1].kind != "softmax":
        raise InvalidModel(0, "last layer must be softmax")
    if model.layers[-1].output_shape != (model.num_classes,):
        raise InvalidModel(0, "softmax output does not match num_classes")
    if not model.input_shape or len(model.input_shape) > MAX_RANK:
        raise InvalidModel(0, "input rank outside 1..8")


def container_size(model: Model) -> int:
    """Exact serialized size in bytes, from the closed form in the module docs."""
    size = 19 + 4 * len(model.input_shape)
    for spec in model.layers:
        size += 6 + len(spec.identifier.encode("utf-8")) + 4 * len(spec.output_shape)
        for name, arr in spec.params.items():
            size += 7 + len(name.encode("utf-8")) + 4 * arr.ndim + 4 * arr.size
    return size
