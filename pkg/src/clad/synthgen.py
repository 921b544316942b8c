"""Seeded synthetic log corpora with injected anomalies.

Normal lines come from a small pool of lowercase templates whose variable
slots draw from narrow domains, so the compressor turns most of them into
short delta records. Three anomaly kinds disturb that regularity at
different scales:

``novel-keyword``
    one entry is rewritten to open with a never-seen uppercase token,
``malformed-variable``
    one slot value is replaced by an out-of-domain non-ASCII string,
``burst``
    5 to 15 consecutive entries are replaced by novel lines.

Both single-entry kinds are built to leave bytes in the compressed stream
that normal windows never produce: a line led by a novel token shares no
prefix with the cache, so it is stored as a literal with its raw uppercase
bytes, and a non-ASCII value XORs against an ASCII reference into bytes at
or above 0x80.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .compressor import LogEntry, LogWindow
from .errors import InputError
from .ingest import LabeledSequenceSet

ANOMALY_KINDS = ("novel-keyword", "malformed-variable", "burst")
KIND_TAGS = {"novel-keyword": "NOVEL", "malformed-variable": "MALFORMED", "burst": "BURST"}

BURST_MIN, BURST_MAX = 5, 15

_UPPER = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
_FULLWIDTH_DIGITS = "".join(chr(0xFF10 + i) for i in range(10))
_GARBLED = "\ufffd\u00c3\u00c2\u00a9\u00ae\u00b0\u00b1\u00b5\u00b6\u00bf\u00d7\u00f7\u00d8\u00f0\u00fe\u00ff"


@dataclass(frozen=True)
class Slot:
    kind: str  # "int" | "hex" | "enum"
    lo: int = 0
    hi: int = 0
    width: int = 0
    choices: tuple = ()

    def draw(self, rng) -> str:
        if self.kind == "int":
            return str(int(rng.integers(self.lo, self.hi + 1))).zfill(self.width)
        if self.kind == "hex":
            return "".join("0123456789abcdef"[i] for i in rng.integers(0, 16, self.width))
        return self.choices[int(rng.integers(len(self.choices)))]


def _i(lo, hi, width=0):
    return Slot("int", lo, hi, width)


def _h(width):
    return Slot("hex", width=width)


def _e(*choices):
    return Slot("enum", choices=choices)


@dataclass(frozen=True)
class TemplateSpec:
    text: str
    slots: tuple = ()

    def render(self, rng) -> str:
        return self.text.format(*(s.draw(rng) for s in self.slots))

    @property
    def pattern(self) -> re.Pattern:
        parts = re.split(r"\{(\d+)\}", self.text)
        rx = []
        for i, part in enumerate(parts):
            rx.append(re.escape(part) if i % 2 == 0 else f"(?P<s{part}>[^ ]+?)")
        return re.compile("^" + "".join(rx) + "$")


DEFAULT_TEMPLATES: tuple[TemplateSpec, ...] = (
    TemplateSpec("kernel.ras info: instruction cache parity error corrected on core {0}", (_i(0, 31, 2),)),
    TemplateSpec("kernel.mem info: {0} ddr errors detected and corrected on rank {1}", (_i(0, 99, 3), _i(0, 7))),
    TemplateSpec("sched.job info: job {0} started on node {1} with {2} tasks", (_h(6), _i(0, 63, 2), _i(1, 64, 3))),
    TemplateSpec("net.torus info: link {0} receive fifo at {1} percent", (_e("x+", "x-", "y+", "y-", "z+", "z-"), _i(0, 100, 3))),
    TemplateSpec("fs.lustre info: client {0} reconnected to ost {1}", (_h(8), _i(0, 15, 2))),
    TemplateSpec("mmcs.db info: idoproxy connection {0} established", (_i(1000, 9999),)),
    TemplateSpec("ciod.io info: generated core files for program {0}", (_e("mpi_app", "solver1", "solver2", "cfdsim0"),)),
    TemplateSpec("app.mpi info: rank {0} reached barrier {1} after {2} ms", (_i(0, 511, 3), _i(0, 99, 2), _i(0, 999, 3))),
    TemplateSpec("power.bmc info: fan {0} speed {1} rpm", (_i(1, 8), _i(3000, 6000))),
    TemplateSpec("power.psu info: voltage rail {0} nominal at {1} mv", (_e("vdd", "vcc", "vio"), _i(900, 1300, 4))),
    TemplateSpec("auth.sshd info: accepted publickey for user{0} from 10.0.{1}.{2}", (_i(0, 50, 2), _i(0, 255, 3), _i(0, 255, 3))),
    TemplateSpec("cron.daemon info: session opened for job {0}", (_h(4),)),
    TemplateSpec("dhcp.agent info: lease renewed for 10.1.{0}.{1} mac {2}", (_i(0, 255, 3), _i(0, 255, 3), _h(12))),
    TemplateSpec("hdfs.block info: received block blk_{0} of size {1} from 10.2.{2}.1", (_i(0, 99999, 5), _e("67108864", "33554432"), _i(0, 255, 3))),
    TemplateSpec("hdfs.dnode info: packet responder {0} for block blk_{1} terminating", (_i(0, 2), _i(0, 99999, 5))),
    TemplateSpec("ntp.sync info: clock offset {0} us stratum {1}", (_i(0, 999, 3), _i(1, 4))),
    TemplateSpec("gpfs.mmfs info: disk {0} recovered in {1} ms", (_e("nsd01", "nsd02", "nsd03"), _i(0, 999, 3))),
    TemplateSpec("rack.env info: inlet temperature {0} c humidity {1} pct", (_i(18, 27), _i(30, 60))),
    TemplateSpec("kernel.tcp info: retransmit timer fired for socket {0}", (_h(8),)),
    TemplateSpec("svc.health info: heartbeat {0} ok latency {1} ms", (_i(0, 9999, 4), _i(0, 99, 2))),
)


@dataclass(frozen=True)
class AnomalyKind:
    """Mixture weights over the anomaly kinds; unnamed kinds get weight 0."""

    weights: dict = field(default_factory=lambda: {k: 1.0 for k in ANOMALY_KINDS})

    def __post_init__(self):
        for k, w in self.weights.items():
            if k not in ANOMALY_KINDS:
                raise InputError(f"unknown anomaly kind {k!r}")
            if not 0 <= w <= 1:
                raise InputError(f"rate for {k} must lie in [0, 1]")
        if not any(self.weights.values()):
            raise InputError("at least one anomaly kind needs a positive rate")

    def draw(self, rng) -> str:
        names = [k for k in ANOMALY_KINDS if self.weights.get(k, 0) > 0]
        p = np.array([self.weights[k] for k in names], dtype=float)
        return names[int(rng.choice(len(names), p=p / p.sum()))]


def _kinds(kinds) -> AnomalyKind:
    if kinds is None:
        return AnomalyKind()
    if isinstance(kinds, AnomalyKind):
        return kinds
    if isinstance(kinds, str):
        kinds = [kinds]
    return AnomalyKind({k: 1.0 for k in kinds})


def _template_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** 0.8
    return w / w.sum()


def novel_token(rng, lo=6, hi=12) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(_UPPER[i] for i in rng.integers(0, len(_UPPER), n))


def novel_line(rng) -> str:
    words = [novel_token(rng)] + [novel_token(rng, 3, 9) for _ in range(int(rng.integers(3, 7)))]
    return " ".join(words)


def out_of_domain_value(rng) -> str:
    """A value no slot domain can produce: non-ASCII and at least 12 encoded bytes."""
    style = int(rng.integers(3))
    if style == 0:  # number rendered in full-width digits
        return "-" + "".join(_FULLWIDTH_DIGITS[i] for i in rng.integers(0, 10, int(rng.integers(4, 9))))
    if style == 1:  # hex with replacement characters spliced in
        chars = ["0123456789abcdef"[i] for i in rng.integers(0, 16, int(rng.integers(6, 10)))]
        for j in rng.choice(len(chars), size=max(1, len(chars) // 2), replace=False):
            chars[int(j)] = "\ufffd"
        return "0x" + "".join(chars)
    return "".join(_GARBLED[i] for i in rng.integers(0, len(_GARBLED), int(rng.integers(6, 11))))


def _match(line: str, templates) -> Optional[re.Match]:
    for t in templates:
        m = t.pattern.match(line)
        if m:
            return m
    return None


def _inject(window: LogWindow, kind: str, rng, templates) -> tuple[LogWindow, list[int]]:
    lines = [e.payload.decode() for e in window.entries]
    n = len(lines)
    if kind == "burst":
        length = min(n, int(rng.integers(BURST_MIN, BURST_MAX + 1)))
        start = int(rng.integers(0, n - length + 1))
        changed = list(range(start, start + length))
        for i in changed:
            lines[i] = novel_line(rng)
    elif kind == "novel-keyword":
        i = int(rng.integers(n))
        lines[i] = novel_token(rng) + " " + lines[i]
        changed = [i]
    elif kind == "malformed-variable":
        order = [int(j) for j in rng.permutation(n)]
        changed = []
        for i in order:
            m = _match(lines[i], templates)
            if m is None or not m.re.groupindex:
                continue
            g = list(m.re.groupindex)[int(rng.integers(len(m.re.groupindex)))]
            a, b = m.span(g)
            lines[i] = lines[i][:a] + out_of_domain_value(rng) + lines[i][b:]
            changed = [i]
            break
        if not changed:  # nothing templated to corrupt
            i = order[0]
            lines[i] = lines[i] + " " + out_of_domain_value(rng)
            changed = [i]
    else:
        raise InputError(f"unknown anomaly kind {kind!r}")
    entries = [LogEntry(line.encode(), e.ordinal) for line, e in zip(lines, window.entries)]
    return LogWindow(entries, window_id=window.window_id, label=1), changed


def inject_anomaly(window: LogWindow, kind: str, seed, templates=DEFAULT_TEMPLATES) -> LogWindow:
    return _inject(window, kind, np.random.default_rng(seed), templates)[0]


def normal_window(rng, window_size: int, window_id=0, first_ordinal=0, templates=DEFAULT_TEMPLATES) -> LogWindow:
    weights = _template_weights(len(templates))
    picks = rng.choice(len(templates), size=window_size, p=weights)
    lines = [templates[int(t)].render(rng) for t in picks]
    return LogWindow.from_payloads((ln.encode() for ln in lines), window_id, 0, first_ordinal)


def anomaly_count(n_windows: int, anomaly_ratio) -> int:
    return math.floor(Fraction(str(anomaly_ratio)) * n_windows + Fraction(1, 2))


def generate_corpus(
    seed: int,
    n_windows: int,
    window_size: int = 100,
    anomaly_ratio: float = 0.1,
    kinds=None,
    templates: Sequence[TemplateSpec] = DEFAULT_TEMPLATES,
) -> LabeledSequenceSet:
    """Build ``n_windows`` windows, exactly ``round(anomaly_ratio * n_windows)`` anomalous.

    Window ``k`` draws from its own stream seeded by ``(seed, k)`` so windows
    can be generated independently. ``entry_labels`` and ``kinds`` on the
    returned set record which entries were modified and how.
    """
    if not 0 <= anomaly_ratio <= 1:
        raise InputError("anomaly_ratio must lie in [0, 1]")
    if window_size < 1 or n_windows < 0:
        raise InputError("window_size must be >= 1 and n_windows >= 0")
    mix = _kinds(kinds)
    n_anom = anomaly_count(n_windows, anomaly_ratio)
    chosen = set(int(i) for i in np.random.default_rng([seed, 0x5EED]).choice(n_windows, n_anom, replace=False))
    out = LabeledSequenceSet(entry_labels=[], kinds=[])
    for k in range(n_windows):
        rng = np.random.default_rng([seed, k])
        w = normal_window(rng, window_size, k, k * window_size, templates)
        labels = [0] * window_size
        kind = None
        if k in chosen:
            kind = mix.draw(rng)
            w, changed = _inject(w, kind, rng, templates)
            for i in changed:
                labels[i] = 1
        out.windows.append(w)
        out.entry_labels.append(labels)
        out.kinds.append(kind)
    return out


def write_corpus(path, corpus: LabeledSequenceSet) -> None:
    """Write the inline-prefix log file plus a ``<name>.windows.csv`` sidecar."""
    path = Path(path)
    lines = []
    side = ["window_id,label,kind"]
    for w, labels, kind in zip(corpus.windows, corpus.entry_labels, corpus.kinds):
        tag = KIND_TAGS.get(kind, "ANOMALY").encode()
        for e, lab in zip(w.entries, labels):
            lines.append((tag if lab else b"-") + b" " + e.payload)
        side.append(f"{w.window_id},{w.label},{kind or ''}")
    path.write_bytes(b"\n".join(lines) + (b"\n" if lines else b""))
    path.with_suffix(".windows.csv").write_text("\n".join(side) + "\n")
