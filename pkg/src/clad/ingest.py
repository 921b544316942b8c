"""Labeled log loading, windowing and train/validation/test splitting."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .compressor import LogEntry, LogWindow
from .errors import ConfigError, IngestionError

LABEL_ADAPTERS = ("inline-prefix", "session-table")
WINDOWINGS = ("sliding", "fixed-interval", "session")
SPLITS = ("chronological", "random")

DEFAULT_SESSION_PATTERN = r"blk_-?\d+"

LabeledEntry = tuple  # (LogEntry, int)


@dataclass
class DatasetSpec:
    name: str
    entry_file: str
    label_adapter: str = "inline-prefix"
    windowing: str = "sliding"
    window_size: int = 100
    target_window_count: Optional[int] = None
    split: str = "chronological"
    split_ratio: float = 0.8
    seed: int = 0
    label_table: Optional[str] = None
    session_pattern: str = DEFAULT_SESSION_PATTERN

    def __post_init__(self):
        if self.label_adapter not in LABEL_ADAPTERS:
            raise ConfigError(f"label_adapter must be one of {LABEL_ADAPTERS}")
        if self.windowing not in WINDOWINGS:
            raise ConfigError(f"windowing must be one of {WINDOWINGS}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if not 0 < float(self.split_ratio) < 1:
            raise ConfigError("split_ratio (train fraction) must lie in (0, 1)")
        if self.label_adapter == "session-table" and not self.label_table:
            raise ConfigError("session-table adapter needs label_table")
        if self.windowing == "fixed-interval" and not self.target_window_count:
            raise ConfigError("fixed-interval windowing needs target_window_count")


@dataclass
class LabeledSequenceSet:
    windows: list[LogWindow] = field(default_factory=list)
    # per-window entry labels and anomaly kinds, when the producer knows them
    entry_labels: Optional[list] = None
    kinds: Optional[list] = None

    @property
    def anomaly_count(self) -> int:
        return sum(w.label for w in self.windows)

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)


# -- loading ------------------------------------------------------------------

def _read_lines(path) -> list[bytes]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read: {exc.strerror}", path=path) from exc
    if not data:
        return []
    lines = data.split(b"\n")
    if lines[-1] == b"":
        lines.pop()
    return [ln[:-1] if ln.endswith(b"\r") else ln for ln in lines]


def parse_inline_prefix(line: bytes) -> tuple[bytes, int]:
    """``"- payload"`` is normal; any other leading token marks an anomaly.

    The label token and its separating space are stripped from the payload.
    """
    token, sep, rest = line.partition(b" ")
    if not token:
        raise ValueError("missing label token")
    return rest, 0 if token == b"-" else 1


def load_session_table(path) -> dict[str, int]:
    table = {}
    for i, raw in enumerate(_read_lines(path), start=1):
        text = raw.decode("utf-8", errors="replace").strip()
        if not text:
            continue
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise IngestionError("expected 'key,label'", path=path, line=i)
        key, lab = parts
        low = lab.lower()
        if low in ("0", "normal"):
            table[key] = 0
        elif low in ("1", "anomaly", "anomalous"):
            table[key] = 1
        elif i == 1:
            continue  # header row
        else:
            raise IngestionError(f"unrecognised label {lab!r}", path=path, line=i)
    return table


def load_labeled_entries(spec: DatasetSpec) -> list[tuple[LogEntry, int]]:
    lines = _read_lines(spec.entry_file)
    out = []
    if spec.label_adapter == "inline-prefix":
        for i, line in enumerate(lines):
            try:
                payload, lab = parse_inline_prefix(line)
                out.append((LogEntry(payload, i), lab))
            except ValueError as exc:
                raise IngestionError(str(exc), path=spec.entry_file, line=i + 1) from exc
        return out
    table = load_session_table(spec.label_table)
    pattern = re.compile(spec.session_pattern.encode())
    for i, line in enumerate(lines):
        m = pattern.search(line)
        if m is None:
            raise IngestionError("no session key in line", path=spec.entry_file, line=i + 1)
        key = m.group().decode()
        if key not in table:
            raise IngestionError(f"session {key} missing from label table", path=spec.entry_file, line=i + 1)
        try:
            out.append((LogEntry(line, i), table[key]))
        except ValueError as exc:
            raise IngestionError(str(exc), path=spec.entry_file, line=i + 1) from exc
    return out


# -- windowing ----------------------------------------------------------------

def label_window(window, entry_labels: Sequence[int]) -> int:
    return int(any(entry_labels))


def _make_window(block, window_id) -> LogWindow:
    entries = [e for e, _ in block]
    return LogWindow(entries, window_id=window_id, label=label_window(entries, [lab for _, lab in block]))


def sliding_windows(entries, W: int) -> LabeledSequenceSet:
    """Non-overlapping blocks of ``W`` entries; a trailing partial block is dropped."""
    if W < 1:
        raise ConfigError("window size must be >= 1")
    n = len(entries) // W
    return LabeledSequenceSet([_make_window(entries[k * W:(k + 1) * W], k) for k in range(n)])


def fixed_interval_step(total: int, W: int, target: int) -> int:
    if target < 1 or target * W > total:
        raise IngestionError(f"cannot draw {target} windows of {W} from {total} entries")
    return (total - target * W) // target


def fixed_interval_windows(entries, W: int, target_window_count: int) -> LabeledSequenceSet:
    step = fixed_interval_step(len(entries), W, target_window_count)
    stride = W + step
    return LabeledSequenceSet(
        [_make_window(entries[k * stride:k * stride + W], k) for k in range(target_window_count)]
    )


def session_windows(entries, id_pattern: str = DEFAULT_SESSION_PATTERN) -> LabeledSequenceSet:
    """One window per session key, ordered by first appearance.

    The session label arrives attached to every entry and passes through.
    """
    pattern = re.compile(id_pattern.encode() if isinstance(id_pattern, str) else id_pattern)
    groups: dict[bytes, list] = {}
    for entry, lab in entries:
        m = pattern.search(entry.payload)
        if m is None:
            raise IngestionError(f"no session key in entry {entry.ordinal}", line=entry.ordinal + 1)
        groups.setdefault(m.group(), []).append((entry, lab))
    return LabeledSequenceSet([_make_window(block, k) for k, block in enumerate(groups.values())])


def build_windows(spec: DatasetSpec, entries=None) -> LabeledSequenceSet:
    if entries is None:
        entries = load_labeled_entries(spec)
    if spec.windowing == "sliding":
        return sliding_windows(entries, spec.window_size)
    if spec.windowing == "fixed-interval":
        return fixed_interval_windows(entries, spec.window_size, spec.target_window_count)
    return session_windows(entries, spec.session_pattern)


# -- splitting ----------------------------------------------------------------

def split_sizes(n: int, train_fraction=0.8) -> tuple[int, int, int]:
    """(train, validation, test) sizes: test = ceil((1-f)n), validation = ceil(pool/10)."""
    frac = Fraction(str(train_fraction))
    n_test = math.ceil((1 - frac) * n)
    pool = n - n_test
    n_val = math.ceil(Fraction(pool, 10))
    return pool - n_val, n_val, n_test


def split(windows, spec: DatasetSpec):
    windows = list(windows)
    if len(windows) < 5:
        raise IngestionError(f"need at least 5 windows to split, got {len(windows)}")
    n_train, n_val, _ = split_sizes(len(windows), spec.split_ratio)
    if spec.split == "chronological":
        ordered = sorted(windows, key=lambda w: w.window_id)
    else:
        perm = np.random.default_rng(spec.seed).permutation(len(windows))
        ordered = [windows[i] for i in perm]
    pool = n_train + n_val
    train, val, test = ordered[:n_train], ordered[n_train:pool], ordered[pool:]
    if spec.split == "random":
        # keep temporal order inside each part; priority sampling relies on it
        train.sort(key=lambda w: w.window_id)
        val.sort(key=lambda w: w.window_id)
        test.sort(key=lambda w: w.window_id)
    return train, val, test


def write_manifest(path, spec: DatasetSpec, train, val, test, extra=None):
    def part(ws):
        ids = [w.window_id for w in ws]
        return {
            "windows": len(ws),
            "anomalous": sum(w.label for w in ws),
            "first_window_id": min(ids) if ids else None,
            "last_window_id": max(ids) if ids else None,
        }

    manifest = {
        "dataset": spec.name,
        "windowing": spec.windowing,
        "window_size": spec.window_size,
        "split": spec.split,
        "seed": spec.seed,
        "total_windows": len(train) + len(val) + len(test),
        "total_anomalous": sum(w.label for w in [*train, *val, *test]),
        "parts": {"train": part(train), "validation": part(val), "test": part(test)},
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
