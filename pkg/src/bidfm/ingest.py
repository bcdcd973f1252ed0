"""Binary example stream, CSV baseline codec, and a background prefetch reader.

Stream layout (little-endian)::

    header : b"ZFMT" | u16 version=1 | u16 reserved=0
    record : u8 label | u16 n | n x u32 feature_id | n x f32 feature_value

Records are fixed-width given ``n``; there are no delimiters or escapes.
"""
from __future__ import annotations

import io
import queue
import struct
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .errors import FormatError, ValidationError
from .model import PackedBatch, SparseExample

MAGIC = b"ZFMT"
VERSION = 1
HEADER = struct.Struct("<4sHH")
HEADER_SIZE = HEADER.size
RECORD_HEAD = struct.Struct("<BH")
MAX_FEATURES = 0xFFFF

DEFAULT_BLOCK_SIZE = 1024
DEFAULT_PREFETCH_BLOCKS = 4


class RecordCapacityError(ValidationError):
    pass


class HeaderError(FormatError):
    pass


class CorruptionError(FormatError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt stream at byte {offset}: {reason}")
        self.offset = offset


class CsvParseError(FormatError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


# ---------------------------------------------------------------------------
# binary codec


def encode_header() -> bytes:
    return HEADER.pack(MAGIC, VERSION, 0)


def encode_record(example: SparseExample) -> bytes:
    if example.label is None:
        raise ValidationError("binary records need a label")
    n = len(example.feature_ids)
    if n > MAX_FEATURES:
        raise RecordCapacityError(f"{n} features exceed the u16 count field")
    return (
        RECORD_HEAD.pack(example.label, n)
        + example.feature_ids.astype("<u4").tobytes()
        + example.feature_values.astype("<f4").tobytes()
    )


def encode_stream(examples: Iterable[SparseExample]) -> bytes:
    out = io.BytesIO()
    write_stream(out, examples)
    return out.getvalue()


def write_stream(fh: BinaryIO, examples: Iterable[SparseExample]) -> int:
    fh.write(encode_header())
    count = 0
    for ex in examples:
        fh.write(encode_record(ex))
        count += 1
    return count


def encode_packed(batch: PackedBatch, labels) -> bytes:
    """Encode a labelled packed batch as records (no header)."""
    labels = np.asarray(labels)
    lengths = np.diff(batch.offsets)
    if (lengths > MAX_FEATURES).any():
        raise RecordCapacityError("record exceeds u16 feature count")
    if (lengths < 1).any():
        raise ValidationError("records need at least one feature")
    ids = batch.ids.astype("<u4")
    vals = batch.values.astype("<f4")
    parts = []
    for i in range(batch.batch_size):
        lo, hi = batch.offsets[i], batch.offsets[i + 1]
        parts.append(RECORD_HEAD.pack(int(labels[i]), hi - lo))
        parts.append(ids[lo:hi].tobytes())
        parts.append(vals[lo:hi].tobytes())
    return b"".join(parts)


def check_header(raw: bytes) -> None:
    if len(raw) < HEADER_SIZE:
        raise HeaderError(f"stream shorter than the {HEADER_SIZE}-byte header")
    magic, version, reserved = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise HeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise HeaderError(f"unsupported stream version {version}")
    if reserved != 0:
        raise HeaderError("reserved header field must be zero")


@dataclass
class ExampleBlock:
    batch: PackedBatch
    labels: np.ndarray  # uint8
    offset: int  # byte offset of the first record

    def __len__(self):
        return self.batch.batch_size

    def examples(self) -> list[SparseExample]:
        return self.batch.examples(self.labels)


def decode_records(buf: bytes | memoryview, base_offset: int = 0, limit: int | None = None):
    """Decode complete records from ``buf``.

    Returns ``(block, consumed)``; ``consumed`` bytes were used, the rest is an
    incomplete trailing record. ``limit`` caps the number of records.
    """
    starts = []
    counts = []
    pos = 0
    size = len(buf)
    unpack = RECORD_HEAD.unpack_from
    while pos + 3 <= size and (limit is None or len(starts) < limit):
        label, n = unpack(buf, pos)
        end = pos + 3 + 8 * n
        if end > size:
            break
        if n == 0:
            raise CorruptionError(base_offset + pos, "record with zero features")
        if label > 1:
            raise CorruptionError(base_offset + pos, f"label byte {label}")
        starts.append(pos)
        counts.append(n)
        pos = end
    raw = np.frombuffer(buf, dtype=np.uint8, count=pos)
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    offsets = np.zeros(len(starts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    rec = np.repeat(np.arange(len(starts)), counts)
    j = np.arange(offsets[-1]) - offsets[:-1][rec]
    id_pos = starts[rec] + 3 + 4 * j
    val_pos = id_pos + 4 * counts[rec]
    lanes = np.arange(4)
    ids = raw[id_pos[:, None] + lanes].view("<u4").reshape(-1)
    vals = raw[val_pos[:, None] + lanes].view("<f4").reshape(-1)
    batch = PackedBatch(ids.astype(np.int64), vals.astype(np.float32), offsets)
    if len(ids) > 1:
        steps = np.diff(batch.ids)
        bad = steps <= 0
        bad[offsets[1:-1] - 1] = False
        if bad.any():
            r = int(np.searchsorted(offsets, int(np.argmax(bad)), side="right") - 1)
            raise CorruptionError(base_offset + int(starts[r]), "feature ids not strictly increasing")
    labels = raw[starts] if len(starts) else np.zeros(0, np.uint8)
    return ExampleBlock(batch, labels, base_offset), pos


def decode_bytes(data: bytes) -> list[SparseExample]:
    """Decode a whole in-memory stream (header included)."""
    check_header(data)
    block, used = decode_records(memoryview(data)[HEADER_SIZE:], HEADER_SIZE)
    if HEADER_SIZE + used != len(data):
        raise CorruptionError(HEADER_SIZE + used, "truncated record at end of stream")
    return block.examples()


# ---------------------------------------------------------------------------
# background reader


def _open_source(source) -> tuple[BinaryIO, bool]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return io.BytesIO(bytes(source)), True
    if isinstance(source, (str, Path)):
        if str(source) == "-":
            return sys.stdin.buffer, False
        return open(source, "rb"), True
    return source, False


_END = object()


class RecordReader:
    """Decode a binary stream on a background thread into a bounded block queue.

    ``source`` may be a path, ``"-"`` for stdin, raw bytes, or a binary file
    object. Iterating yields :class:`SparseExample`; :meth:`blocks` yields
    packed :class:`ExampleBlock` objects in stream order.
    """

    def __init__(self, source, block_size: int = DEFAULT_BLOCK_SIZE,
                 prefetch_blocks: int = DEFAULT_PREFETCH_BLOCKS, read_size: int = 1 << 20):
        if block_size < 1 or prefetch_blocks < 1:
            raise ValidationError("block_size and prefetch_blocks must be positive")
        self._fh, self._owns = _open_source(source)
        self.block_size = block_size
        self.read_size = read_size
        self._queue: queue.Queue = queue.Queue(maxsize=prefetch_blocks)
        self._stop = threading.Event()
        self.wait_time = 0.0  # consumer seconds spent blocked on an empty queue
        self.records = 0
        self._thread = threading.Thread(target=self._run, name="bidfm-reader", daemon=True)
        self._started = False

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _run(self):
        try:
            head = self._read_at_least(HEADER_SIZE)
            check_header(head)
            pending = head[HEADER_SIZE:]
            offset = HEADER_SIZE  # stream offset of pending[0]
            eof = False
            while not eof:
                chunk = self._fh.read(self.read_size)
                if not chunk:
                    eof = True
                else:
                    pending = pending + chunk if pending else chunk
                view = memoryview(pending)
                used_total = 0
                while True:
                    block, used = decode_records(view[used_total:], offset + used_total, self.block_size)
                    if len(block) == 0:
                        break
                    full = len(block) == self.block_size
                    if not full and not eof:
                        break  # wait for more bytes to fill the block
                    if not self._put(block):
                        return
                    used_total += used
                pending = bytes(view[used_total:])
                offset += used_total
            if pending:
                raise CorruptionError(offset, f"truncated record ({len(pending)} trailing bytes)")
            self._put(_END)
        except BaseException as exc:  # handed to the consumer
            self._put(exc)
        finally:
            if self._owns:
                self._fh.close()

    def _read_at_least(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self._fh.read(n - len(buf))
            if not chunk:
                break
            buf += chunk
        return buf

    def start(self) -> "RecordReader":
        if not self._started:
            self._started = True
            self._thread.start()
        return self

    def blocks(self) -> Iterator[ExampleBlock]:
        self.start()
        try:
            while True:
                try:
                    item = self._queue.get_nowait()
                except queue.Empty:
                    t0 = time.perf_counter()
                    item = self._queue.get()
                    self.wait_time += time.perf_counter() - t0
                if item is _END:
                    return
                if isinstance(item, BaseException):
                    raise item
                self.records += len(item)
                yield item
        finally:
            self.close()

    def __iter__(self) -> Iterator[SparseExample]:
        for block in self.blocks():
            yield from block.examples()

    def close(self):
        self._stop.set()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def decode_stream(source, **kwargs) -> Iterator[SparseExample]:
    return iter(RecordReader(source, **kwargs))


# ---------------------------------------------------------------------------
# CSV baseline: "label,id:value,id:value\n"


def _fmt_value(v: np.float32) -> str:
    return np.format_float_positional(v, unique=True, trim="-")


def encode_csv_record(example: SparseExample) -> str:
    if example.label is None:
        raise ValidationError("CSV records need a label")
    feats = ",".join(
        f"{i}:{_fmt_value(v)}" for i, v in zip(example.feature_ids.tolist(), example.feature_values)
    )
    return f"{example.label},{feats}\n"


def encode_csv(examples: Iterable[SparseExample]) -> str:
    return "".join(encode_csv_record(e) for e in examples)


def decode_csv_line(line: str, lineno: int = 1) -> SparseExample:
    parts = line.rstrip("\r\n").split(",")
    if len(parts) < 2:
        raise CsvParseError(lineno, "need a label and at least one feature")
    if parts[0] not in ("0", "1"):
        raise CsvParseError(lineno, f"bad label {parts[0]!r}")
    ids, vals = [], []
    for field in parts[1:]:
        key, sep, val = field.partition(":")
        try:
            if not sep:
                raise ValueError("missing ':'")
            ids.append(int(key))
            vals.append(float(val))
        except ValueError:
            raise CsvParseError(lineno, f"malformed field {field!r}") from None
    try:
        return SparseExample(ids, vals, int(parts[0]))
    except ValidationError as exc:
        raise CsvParseError(lineno, str(exc)) from None


def decode_csv(text_or_lines) -> Iterator[SparseExample]:
    lines = text_or_lines.splitlines() if isinstance(text_or_lines, str) else text_or_lines
    for lineno, line in enumerate(lines, start=1):
        if line.strip():
            yield decode_csv_line(line, lineno)
