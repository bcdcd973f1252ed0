"""``.zmdl`` model artifacts with an optional, strippable optimizer section.

Layout (little-endian)::

    fixed header   "ZMDL" | u16 version | u8 arch | u8 flags | u32 n_features
                   | u32 k | u32 n_fields | u32 n_layers
    dims           (n_fields + 1) x u32 field offsets | (n_layers + 1) x u32 MLP widths
    section table  u64 params_len | u64 optimizer_len | u32 crc32(payload)
    payload        params section, then optimizer section (absent when stripped)

Params section: w0, w, V, then each dense layer's weight and bias, all f32.

Optimizer section::

    counters block  u8 kind | 7 pad | f64 lr, beta1, beta2, eps | u64 t_global
                    | u64 n_t_row | n_t_row x u32 t_row   (t_row only for lazy Adam)
    moments         m (Adam family only), then v, each laid out like params
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError
from .model import Arch, DenseLayer, ModelParams
from .optim import OptimizerKind, OptimizerState, Slots

MAGIC = b"ZMDL"
VERSION = 1
FLAG_OPTIMIZER = 0x01

_FIXED = struct.Struct("<4sHBBIIII")
_TABLE = struct.Struct("<QQI")
_COUNTERS = struct.Struct("<B7xddddQQ")
_FLAGS_AT = 7  # byte offset of the flags field in _FIXED

_ARCH_CODES = {Arch.FM: 0, Arch.DEEPFM: 1}
_KIND_CODES = {OptimizerKind.ADAGRAD: 0, OptimizerKind.ADAM: 1, OptimizerKind.LAZY_ADAM: 2}


class ArtifactError(FormatError):
    pass


class BadMagicError(ArtifactError):
    pass


class UnsupportedVersionError(ArtifactError):
    pass


class ChecksumError(ArtifactError):
    pass


class TruncatedArtifactError(ArtifactError):
    pass


class MissingOptimizerStateError(ValidationError):
    """Raised when resuming training from a stripped artifact."""


@dataclass
class ArtifactInfo:
    arch: Arch
    n_features: int
    k: int
    field_offsets: np.ndarray
    widths: list[int]
    has_optimizer: bool
    header_len: int
    params_len: int
    optimizer_len: int
    crc: int

    @property
    def payload_len(self) -> int:
        return self.params_len + self.optimizer_len

    @property
    def total_len(self) -> int:
        return self.header_len + self.payload_len


def _param_shapes(n_features, k, widths):
    shapes = [(), (n_features,), (n_features, k)]
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    return shapes


def _pack_arrays(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def _unpack_arrays(buf, offset, shapes):
    out = []
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        a = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float32)
        out.append(a.reshape(shape))
        offset += 4 * count
    return out, offset


def _header(params: ModelParams, flags: int, params_len: int, opt_len: int, crc: int) -> bytes:
    widths = [params.n_fields * params.k] + [l.weight.shape[1] for l in params.mlp] if params.mlp else []
    fixed = _FIXED.pack(
        MAGIC, VERSION, _ARCH_CODES[params.arch], flags,
        params.n_features, params.k, params.n_fields, len(params.mlp),
    )
    dims = np.asarray(params.field_offsets, dtype="<u4").tobytes()
    dims += np.asarray(widths if params.mlp else [0], dtype="<u4").tobytes()
    return fixed + dims + _TABLE.pack(params_len, opt_len, crc)


def _optimizer_section(state: OptimizerState) -> bytes:
    t_row = state.t_row if state.kind is OptimizerKind.LAZY_ADAM else np.zeros(0)
    block = _COUNTERS.pack(
        _KIND_CODES[state.kind], state.lr, state.beta1, state.beta2, state.eps,
        state.t_global, len(t_row),
    ) + np.asarray(t_row, dtype="<u4").tobytes()
    moments = b"".join(_pack_arrays(s.arrays()) for s in state.slot_sets())
    return block + moments


def save(params: ModelParams, optimizer_state: OptimizerState | None = None,
         include_optimizer: bool = True) -> bytes:
    """Serialize parameters (and optionally optimizer state) deterministically."""
    params.validate()
    if not params.all_finite():
        raise ValidationError("refusing to save non-finite parameters")
    if include_optimizer and optimizer_state is None:
        raise ValidationError("include_optimizer=True needs an optimizer state")
    body = _pack_arrays(params.arrays())
    opt = _optimizer_section(optimizer_state) if include_optimizer else b""
    crc = zlib.crc32(body + opt)
    flags = FLAG_OPTIMIZER if include_optimizer else 0
    return _header(params, flags, len(body), len(opt), crc) + body + opt


def read_header(data: bytes) -> ArtifactInfo:
    if len(data) < _FIXED.size:
        if data[:4] and not MAGIC.startswith(bytes(data[:4])):
            raise BadMagicError(f"bad magic {bytes(data[:4])!r}")
        raise TruncatedArtifactError("artifact shorter than its fixed header")
    magic, version, arch, flags, n, k, n_fields, n_layers = _FIXED.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"artifact version {version} is not supported")
    try:
        arch = {v: a for a, v in _ARCH_CODES.items()}[arch]
    except KeyError:
        raise ArtifactError(f"unknown arch code {arch}") from None
    if flags & ~FLAG_OPTIMIZER:
        raise ArtifactError(f"unknown flag bits {flags:#x}")
    pos = _FIXED.size
    n_widths = n_layers + 1 if n_layers else 1
    dims_len = 4 * (n_fields + 1 + n_widths)
    if len(data) < pos + dims_len + _TABLE.size:
        raise TruncatedArtifactError("artifact truncated inside its header")
    field_offsets = np.frombuffer(data, "<u4", n_fields + 1, pos).astype(np.int64)
    widths = np.frombuffer(data, "<u4", n_widths, pos + 4 * (n_fields + 1)).tolist() if n_layers else []
    pos += dims_len
    params_len, opt_len, crc = _TABLE.unpack_from(data, pos)
    pos += _TABLE.size
    info = ArtifactInfo(arch, n, k, field_offsets, widths, bool(flags & FLAG_OPTIMIZER),
                        pos, params_len, opt_len, crc)
    expect = 4 * sum(int(np.prod(s, dtype=np.int64)) for s in _param_shapes(n, k, widths))
    if params_len != expect:
        raise ArtifactError(f"params section is {params_len} bytes, dims imply {expect}")
    if not info.has_optimizer and opt_len:
        raise ArtifactError("optimizer section present but flag bit clear")
    return info


def _verified(data: bytes) -> ArtifactInfo:
    info = read_header(data)
    if len(data) < info.total_len:
        raise TruncatedArtifactError(f"artifact has {len(data)} bytes, header declares {info.total_len}")
    if len(data) > info.total_len:
        raise ArtifactError("trailing bytes after declared sections")
    if zlib.crc32(memoryview(data)[info.header_len:]) != info.crc:
        raise ChecksumError("payload checksum mismatch")
    return info


def _slots_from(arrays) -> Slots:
    mlp = [(arrays[i], arrays[i + 1]) for i in range(3, len(arrays), 2)]
    return Slots(arrays[0], arrays[1], arrays[2], mlp)


def load(data: bytes):
    """Return ``(params, optimizer_state_or_None)``."""
    info = _verified(data)
    shapes = _param_shapes(info.n_features, info.k, info.widths)
    arrays, pos = _unpack_arrays(data, info.header_len, shapes)
    mlp = [DenseLayer(arrays[i], arrays[i + 1]) for i in range(3, len(arrays), 2)]
    params = ModelParams(info.arch, arrays[0], arrays[1], arrays[2], info.field_offsets, mlp)
    params.validate()
    if not info.has_optimizer:
        return params, None

    code, lr, b1, b2, eps, t_global, n_t_row = _COUNTERS.unpack_from(data, pos)
    try:
        kind = {v: kd for kd, v in _KIND_CODES.items()}[code]
    except KeyError:
        raise ArtifactError(f"unknown optimizer code {code}") from None
    pos += _COUNTERS.size
    t_row = np.frombuffer(data, "<u4", n_t_row, pos).astype(np.int64) if n_t_row else None
    pos += 4 * n_t_row
    n_sets = kind.moments_per_param
    sets = []
    for _ in range(n_sets):
        arrs, pos = _unpack_arrays(data, pos, shapes)
        sets.append(_slots_from(arrs))
    if pos != info.total_len:
        raise ArtifactError("optimizer section length does not match its contents")
    m, v = (None, sets[0]) if n_sets == 1 else (sets[0], sets[1])
    if kind is OptimizerKind.LAZY_ADAM and t_row is None:
        t_row = np.zeros(info.n_features, dtype=np.int64)
    state = OptimizerState(kind, lr, b1, b2, eps, m, v, int(t_global), t_row)
    return params, state


def load_for_training(data: bytes):
    """Like :func:`load` but refuses artifacts without optimizer state."""
    params, state = load(data)
    if state is None:
        raise MissingOptimizerStateError(
            "artifact was saved without optimizer state (stripped); it can serve but not resume training"
        )
    return params, state


def strip(data: bytes) -> bytes:
    """Drop the optimizer section; idempotent, predictions unchanged."""
    info = _verified(data)
    if not info.has_optimizer:
        return bytes(data)
    body = bytes(data[info.header_len : info.header_len + info.params_len])
    head = bytearray(data[: info.header_len])
    head[_FLAGS_AT] &= ~FLAG_OPTIMIZER
    _TABLE.pack_into(head, info.header_len - _TABLE.size, info.params_len, 0, zlib.crc32(body))
    return bytes(head) + body


def section_sizes(data: bytes) -> dict:
    """Byte accounting used by the strip report."""
    info = _verified(data)
    counters = moments = 0
    if info.has_optimizer:
        pos = info.header_len + info.params_len
        n_t_row = _COUNTERS.unpack_from(data, pos)[-1]
        counters = _COUNTERS.size + 4 * n_t_row
        moments = info.optimizer_len - counters
    return {
        "header": info.header_len,
        "params": info.params_len,
        "optimizer": info.optimizer_len,
        "optimizer_counters": counters,
        "optimizer_moments": moments,
        "payload": info.payload_len,
        "total": info.total_len,
        "has_optimizer": info.has_optimizer,
    }
