"""CWBS-1: a deterministic streaming window compressor.

Each log entry becomes one record::

    literal  0x00 | len:u16be | payload
    delta    0x01 | slot:u8 | len:u16be | rle(payload XOR reference)

The compressor keeps a 256-slot cache of previously seen literal payloads.
An entry is delta-coded against the cached line sharing the longest prefix
with it; otherwise it is written verbatim and inserted into the cache
(round-robin eviction). The XOR payload is run-length coded so that lines
close to their reference collapse into a few bytes while novel content
shows up as long literal runs.

RLE tokens: a control byte ``c <= 0x7F`` stands for ``c + 1`` zero bytes,
``c >= 0x80`` is followed by ``c - 0x7F`` verbatim bytes.

Sample container (``.cladds``)::

    b"CLADDS1\\n" then repeated {window_id:u32be, label:u8, stream_len:u32be, stream}
"""
from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import BinaryIO, Iterable, Iterator, Optional, Protocol, Union

from .errors import DecodeError, FormatError, InputError

N_SLOTS = 256
MIN_PREFIX = 8
MAX_PAYLOAD = 0xFFFF
MAX_RUN = 128

HDR_LITERAL = 0x00
HDR_DELTA = 0x01

CONTAINER_MAGIC = b"CLADDS1\n"
_REC = struct.Struct(">IBI")

_RUNS = re.compile(rb"\x00+|[^\x00]+")


@dataclass(frozen=True)
class LogEntry:
    payload: bytes
    ordinal: int = 0

    def __post_init__(self):
        if not isinstance(self.payload, (bytes, bytearray)):
            raise InputError("payload must be bytes")
        if b"\n" in self.payload:
            raise InputError(f"entry {self.ordinal}: payload contains a line terminator")
        if len(self.payload) > MAX_PAYLOAD:
            raise InputError(
                f"entry {self.ordinal}: payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}"
            )
        if self.ordinal < 0:
            raise InputError("ordinal must be non-negative")


@dataclass
class LogWindow:
    entries: list[LogEntry]
    window_id: int = 0
    label: int = 0

    def __post_init__(self):
        if not self.entries:
            raise InputError("window has no entries")
        ords = [e.ordinal for e in self.entries]
        if any(b <= a for a, b in zip(ords, ords[1:])):
            raise InputError(f"window {self.window_id}: ordinals not strictly increasing")
        if self.label not in (0, 1):
            raise InputError(f"window {self.window_id}: label must be 0 or 1")

    @property
    def payloads(self) -> list[bytes]:
        return [e.payload for e in self.entries]

    @classmethod
    def from_payloads(cls, payloads: Iterable[bytes], window_id=0, label=0, first_ordinal=0):
        entries = [LogEntry(bytes(p), first_ordinal + i) for i, p in enumerate(payloads)]
        return cls(entries, window_id=window_id, label=label)


@dataclass
class CompressedWindow:
    stream: bytes
    label: int = 0
    window_id: int = 0
    original_byte_count: int = 0

    def __len__(self):
        return len(self.stream)


@dataclass
class CompressorState:
    """Reference cache shared by the encoder and decoder.

    ``_by_head`` indexes occupied slots by their first ``MIN_PREFIX`` bytes so
    reference lookup only scans slots that can reach the eligibility threshold.
    """

    cache: list = field(default_factory=lambda: [None] * N_SLOTS)
    next_slot: int = 0
    _by_head: dict = field(default_factory=dict, repr=False)

    def reset(self):
        self.cache = [None] * N_SLOTS
        self.next_slot = 0
        self._by_head = {}

    def insert(self, payload: bytes) -> int:
        slot = self.next_slot
        old = self.cache[slot]
        if old is not None and len(old) >= MIN_PREFIX:
            bucket = self._by_head[old[:MIN_PREFIX]]
            bucket.remove(slot)
            if not bucket:
                del self._by_head[old[:MIN_PREFIX]]
        self.cache[slot] = payload
        if len(payload) >= MIN_PREFIX:
            self._by_head.setdefault(payload[:MIN_PREFIX], []).append(slot)
        self.next_slot = (slot + 1) % N_SLOTS
        return slot

    def copy(self) -> "CompressorState":
        return CompressorState(
            list(self.cache), self.next_slot, {k: list(v) for k, v in self._by_head.items()}
        )


def common_prefix_len(a: bytes, b: bytes) -> int:
    n = min(len(a), len(b))
    if a[:n] == b[:n]:
        return n
    lo, hi = 0, n  # a[:lo] == b[:lo], a[:hi] != b[:hi]
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if a[:mid] == b[:mid]:
            lo = mid
        else:
            hi = mid
    return lo


def select_reference(state: CompressorState, candidate: bytes) -> Optional[tuple[int, bytes]]:
    """Pick the cached line to delta-code ``candidate`` against.

    A slot is eligible when it shares at least ``MIN_PREFIX`` leading bytes
    with the candidate, or when a non-empty candidate shorter than that is
    entirely a prefix of it. The longest common prefix wins, ties go to the
    lowest slot id.
    """
    if not candidate:
        return None
    if len(candidate) >= MIN_PREFIX:
        slots = state._by_head.get(candidate[:MIN_PREFIX], ())
    else:
        slots = [i for i, ref in enumerate(state.cache) if ref is not None and ref.startswith(candidate)]
    best = None
    best_len = -1
    for slot in sorted(slots):
        n = common_prefix_len(state.cache[slot], candidate)
        if n > best_len:
            best, best_len = slot, n
    if best is None:
        return None
    return best, state.cache[best]


def xor_with_reference(payload: bytes, reference: bytes) -> bytes:
    """XOR ``payload`` with ``reference`` truncated or zero-padded to its length."""
    n = len(payload)
    if n == 0:
        return b""
    ref = reference[:n].ljust(n, b"\x00")
    return (int.from_bytes(payload, "big") ^ int.from_bytes(ref, "big")).to_bytes(n, "big")


def rle_encode(xor_payload: bytes) -> bytes:
    out = bytearray()
    for m in _RUNS.finditer(xor_payload):
        run = m.group()
        if run[0] == 0:
            n = len(run)
            while n > 0:
                k = min(n, MAX_RUN)
                out.append(k - 1)
                n -= k
        else:
            for i in range(0, len(run), MAX_RUN):
                chunk = run[i:i + MAX_RUN]
                out.append(0x7F + len(chunk))
                out += chunk
    return bytes(out)


def _rle_decode_at(buf: bytes, pos: int, expected_len: int) -> tuple[bytes, int]:
    """Decode tokens from ``buf[pos:]`` until exactly ``expected_len`` bytes are produced."""
    out = bytearray()
    end = len(buf)
    while len(out) < expected_len:
        if pos >= end:
            raise DecodeError(f"token stream truncated at offset {pos}")
        c = buf[pos]
        pos += 1
        if c <= 0x7F:
            out += bytes(c + 1)
        else:
            n = c - 0x7F
            if pos + n > end:
                raise DecodeError(f"literal token at offset {pos - 1} needs {n} bytes")
            out += buf[pos:pos + n]
            pos += n
    if len(out) != expected_len:
        raise FormatError(f"RLE payload decodes to {len(out)} bytes, expected {expected_len}")
    return bytes(out), pos


def rle_decode(tokens: bytes, expected_len: int) -> bytes:
    out = bytearray()
    pos, end = 0, len(tokens)
    while pos < end:
        c = tokens[pos]
        pos += 1
        if c <= 0x7F:
            out += bytes(c + 1)
        else:
            n = c - 0x7F
            if pos + n > end:
                raise DecodeError(f"literal token at offset {pos - 1} needs {n} bytes")
            out += tokens[pos:pos + n]
            pos += n
    if len(out) != expected_len:
        raise FormatError(f"RLE payload decodes to {len(out)} bytes, expected {expected_len}")
    return bytes(out)


def compress_entry(state: CompressorState, entry: Union[LogEntry, bytes]) -> bytes:
    payload = entry.payload if isinstance(entry, LogEntry) else bytes(entry)
    n = len(payload)
    if n > MAX_PAYLOAD:
        raise InputError(f"payload of {n} bytes exceeds {MAX_PAYLOAD}")
    ref = select_reference(state, payload)
    if ref is not None:
        slot, reference = ref
        return bytes((HDR_DELTA, slot)) + n.to_bytes(2, "big") + rle_encode(
            xor_with_reference(payload, reference)
        )
    state.insert(payload)
    return bytes((HDR_LITERAL,)) + n.to_bytes(2, "big") + payload


def compress_window(
    window: LogWindow, carry_state: bool = False, state: Optional[CompressorState] = None
) -> CompressedWindow:
    """Compress one window.

    By default a fresh cache is used. With ``carry_state=True`` the caller's
    ``state`` persists across windows and the same sequence of states must be
    replayed to decompress.
    """
    if carry_state:
        if state is None:
            raise InputError("carry_state=True requires a CompressorState")
    else:
        state = CompressorState()
    parts = [compress_entry(state, e) for e in window.entries]
    return CompressedWindow(
        stream=b"".join(parts),
        label=window.label,
        window_id=window.window_id,
        original_byte_count=sum(len(e.payload) for e in window.entries),
    )


def iter_records(stream: bytes, state: CompressorState) -> Iterator[bytes]:
    pos, end = 0, len(stream)
    while pos < end:
        hdr = stream[pos]
        if hdr == HDR_LITERAL:
            if pos + 3 > end:
                raise FormatError(f"truncated literal header at offset {pos}")
            n = int.from_bytes(stream[pos + 1:pos + 3], "big")
            pos += 3
            if pos + n > end:
                raise FormatError(f"literal payload at offset {pos} truncated")
            payload = stream[pos:pos + n]
            pos += n
            state.insert(payload)
        elif hdr == HDR_DELTA:
            if pos + 4 > end:
                raise FormatError(f"truncated delta header at offset {pos}")
            slot = stream[pos + 1]
            n = int.from_bytes(stream[pos + 2:pos + 4], "big")
            reference = state.cache[slot]
            if reference is None:
                raise FormatError(f"delta record at offset {pos} references empty slot {slot}")
            try:
                diff, pos = _rle_decode_at(stream, pos + 4, n)
            except DecodeError as exc:
                raise FormatError(f"truncated delta payload: {exc}") from exc
            payload = xor_with_reference(diff, reference)
        else:
            raise FormatError(f"unknown record header 0x{hdr:02x} at offset {pos}")
        yield payload


def decompress_window(
    cw: CompressedWindow,
    carry_state: bool = False,
    state: Optional[CompressorState] = None,
    first_ordinal: int = 0,
) -> LogWindow:
    if carry_state:
        if state is None:
            raise InputError("carry_state=True requires a CompressorState")
    else:
        state = CompressorState()
    payloads = list(iter_records(cw.stream, state))
    return LogWindow.from_payloads(payloads, cw.window_id, cw.label, first_ordinal)


class WindowCompressor(Protocol):
    """Anything that turns a LogWindow into a CompressedWindow."""

    def compress(self, window: LogWindow) -> CompressedWindow: ...


class CWBS1:
    """Stateful wrapper; ``carry_state=True`` keeps the cache across windows."""

    def __init__(self, carry_state: bool = False):
        self.carry_state = carry_state
        self.state = CompressorState()

    def compress(self, window: LogWindow) -> CompressedWindow:
        return compress_window(window, self.carry_state, self.state if self.carry_state else None)


# -- sample container ---------------------------------------------------------

PathOrFile = Union[str, PathLike, BinaryIO]


def write_container(dest: PathOrFile, windows: Iterable[CompressedWindow]) -> int:
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    count = 0
    for cw in windows:
        buf.write(_REC.pack(cw.window_id, cw.label, len(cw.stream)))
        buf.write(cw.stream)
        count += 1
    data = buf.getvalue()
    if hasattr(dest, "write"):
        dest.write(data)
    else:
        with open(dest, "wb") as fh:
            fh.write(data)
    return count


def read_container(src: PathOrFile) -> list[CompressedWindow]:
    if hasattr(src, "read"):
        data = src.read()
    else:
        with open(src, "rb") as fh:
            data = fh.read()
    if not data.startswith(CONTAINER_MAGIC):
        raise FormatError("not a CLADDS1 container (bad magic)")
    pos = len(CONTAINER_MAGIC)
    out = []
    while pos < len(data):
        if pos + _REC.size > len(data):
            raise FormatError(f"truncated record header at offset {pos}")
        wid, label, n = _REC.unpack_from(data, pos)
        pos += _REC.size
        if label not in (0, 1):
            raise FormatError(f"record at offset {pos - _REC.size}: label {label} not in {{0,1}}")
        if pos + n > len(data):
            raise FormatError(f"truncated stream for window {wid}")
        out.append(CompressedWindow(data[pos:pos + n], label=label, window_id=wid))
        pos += n
    return out
