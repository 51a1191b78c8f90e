"""Reader for PhysioNet WFDB records (``.hea`` / ``.dat`` / ``.atr``).

Only what the MIT-BIH and INCART databases need is supported: single-segment
records, storage formats 212 and 16, and MIT-format annotation files.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = (212, 16)
DEFAULT_GAIN = 200.0
DEFAULT_FS = 250.0


class WfdbError(ValueError):
    """Base class for WFDB parsing errors."""


class HeaderParseError(WfdbError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"header line {line_no}: {message}")
        self.line_no = line_no


class UnsupportedFormatError(WfdbError):
    pass


class TruncatedDataError(WfdbError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"signal payload truncated: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class AnnotationOrderError(WfdbError):
    pass


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    fmt: int
    gain: float
    baseline: int
    units: str = "mV"
    adc_resolution: int = 0
    adc_zero: int = 0
    initial_value: int = 0
    checksum: int = 0
    byte_offset: int = 0
    description: str = ""


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    fs: float
    n_samples: int
    signals: tuple[SignalSpec, ...]


@dataclass(frozen=True)
class ChannelInfo:
    name: str
    gain: float
    baseline: int


class Annotation(NamedTuple):
    sample: int
    symbol: str
    chan: int = 0
    num: int = 0
    aux: str = ""


@dataclass
class EcgRecord:
    """A gain-corrected multichannel ECG recording.

    ``signal`` has shape ``(n_samples, n_channels)`` and is in mV.
    """

    record_id: str
    fs: float
    channels: list[ChannelInfo]
    signal: np.ndarray
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=float)
        if self.signal.ndim == 1:
            self.signal = self.signal[:, None]
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if self.signal.shape[0] == 0:
            raise ValueError("record has no samples")
        if self.signal.shape[1] != len(self.channels):
            raise ValueError("channel descriptors do not match signal columns")
        n = self.signal.shape[0]
        for ann in self.annotations:
            if not 0 <= ann.sample < n:
                raise ValueError(f"annotation at sample {ann.sample} outside record of {n} samples")

    @property
    def n_samples(self) -> int:
        return self.signal.shape[0]

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.channels]


# --------------------------------------------------------------------------
# Header

_FMT_RE = re.compile(r"^(\d+)(?:x(\d+))?(?::(\d+))?(?:\+(\d+))?$")
_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+0-9]+)\))?(?:/(.*))?$")


def _num(token: str, cast, line_no: int, what: str):
    try:
        return cast(token)
    except ValueError:
        raise HeaderParseError(f"bad {what} {token!r}", line_no) from None


def parse_header(data: bytes | str) -> RecordHeader:
    """Parse the text of a ``.hea`` file.

    Raises:
        HeaderParseError: malformed content (the message carries the line number).
        UnsupportedFormatError: multi-segment records or storage formats other
            than 212 and 16.
    """
    text = data.decode("latin-1") if isinstance(data, bytes) else data
    lines = [
        (i, ln.strip())
        for i, ln in enumerate(text.splitlines(), start=1)
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise HeaderParseError("empty header", 1)

    line_no, record_line = lines[0]
    tokens = record_line.split()
    if len(tokens) < 2:
        raise HeaderParseError("record line needs a name and a signal count", line_no)
    name = tokens[0]
    if "/" in name:
        raise UnsupportedFormatError(f"multi-segment record {name!r} is not supported")
    n_signals = _num(tokens[1], int, line_no, "signal count")
    if n_signals <= 0:
        raise HeaderParseError(f"record declares {n_signals} signals", line_no)
    fs = DEFAULT_FS
    if len(tokens) > 2:
        fs_token = re.split(r"[/(]", tokens[2])[0]
        fs = _num(fs_token, float, line_no, "sampling frequency")
        if fs <= 0:
            raise HeaderParseError(f"non-positive sampling frequency {fs}", line_no)
    n_samples = _num(tokens[3], int, line_no, "sample count") if len(tokens) > 3 else 0

    sig_lines = lines[1 : 1 + n_signals]
    if len(sig_lines) < n_signals:
        raise HeaderParseError(
            f"expected {n_signals} signal lines, found {len(sig_lines)}", lines[-1][0]
        )
    signals = tuple(_parse_signal_line(ln, no) for no, ln in sig_lines)
    return RecordHeader(name, n_signals, fs, n_samples, signals)


def _parse_signal_line(line: str, line_no: int) -> SignalSpec:
    tokens = line.split()
    if len(tokens) < 2:
        raise HeaderParseError("signal line needs a file name and a format", line_no)
    m = _FMT_RE.match(tokens[1])
    if not m:
        raise HeaderParseError(f"bad format field {tokens[1]!r}", line_no)
    fmt = int(m.group(1))
    if fmt not in SUPPORTED_FORMATS:
        raise UnsupportedFormatError(f"storage format {fmt} (line {line_no}) is not supported")
    if m.group(2) and int(m.group(2)) != 1:
        raise UnsupportedFormatError(f"multi-sample frames (line {line_no}) are not supported")
    byte_offset = int(m.group(4) or 0)

    gain, baseline, units = DEFAULT_GAIN, None, "mV"
    if len(tokens) > 2:
        g = _GAIN_RE.match(tokens[2])
        if not g:
            raise HeaderParseError(f"bad gain field {tokens[2]!r}", line_no)
        gain = _num(g.group(1), float, line_no, "gain")
        if g.group(2) is not None:
            baseline = int(g.group(2))
        if g.group(3):
            units = g.group(3)
    if gain == 0:
        gain = DEFAULT_GAIN
    ints = [
        _num(t, int, line_no, "integer field") for t in tokens[3:8]
    ]
    adc_res, adc_zero, init_val, checksum, _block = (ints + [0] * 5)[:5]
    if baseline is None:
        baseline = adc_zero
    description = " ".join(tokens[8:])
    return SignalSpec(
        file_name=tokens[0],
        fmt=fmt,
        gain=gain,
        baseline=baseline,
        units=units,
        adc_resolution=adc_res,
        adc_zero=adc_zero,
        initial_value=init_val,
        checksum=checksum,
        byte_offset=byte_offset,
        description=description,
    )


# --------------------------------------------------------------------------
# Signal files


def bytes_needed_212(n_values: int) -> int:
    return math.ceil(n_values * 3 / 2)


def parse_signal_212(data: bytes, n_channels: int, n_samples: int) -> np.ndarray:
    """Unpack format-212 data (two 12-bit samples per 3 bytes, frame-interleaved)."""
    total = n_channels * n_samples
    need = bytes_needed_212(total)
    if len(data) < need:
        raise TruncatedDataError(need, len(data))
    b = np.frombuffer(data, dtype=np.uint8, count=need).astype(np.int32)
    n_pairs = total // 2
    trip = b[: 3 * n_pairs].reshape(-1, 3)
    out = np.empty(total, dtype=np.int32)
    out[0 : 2 * n_pairs : 2] = trip[:, 0] | ((trip[:, 1] & 0x0F) << 8)
    out[1 : 2 * n_pairs : 2] = trip[:, 2] | ((trip[:, 1] & 0xF0) << 4)
    if total % 2:
        out[-1] = b[-2] | ((b[-1] & 0x0F) << 8)
    out[out > 2047] -= 4096
    return out.reshape(n_samples, n_channels)


def pack_212(samples: np.ndarray) -> bytes:
    """Inverse of :func:`parse_signal_212`; values must fit in 12-bit two's complement."""
    flat = np.asarray(samples, dtype=np.int64).ravel()
    if flat.size and (flat.min() < -2048 or flat.max() > 2047):
        raise ValueError("sample out of 12-bit range")
    u = (flat & 0xFFF).astype(np.uint16)
    n_pairs = u.size // 2
    s0 = u[0 : 2 * n_pairs : 2]
    s1 = u[1 : 2 * n_pairs : 2]
    trip = np.empty((n_pairs, 3), dtype=np.uint8)
    trip[:, 0] = s0 & 0xFF
    trip[:, 1] = ((s0 >> 8) & 0x0F) | (((s1 >> 8) & 0x0F) << 4)
    trip[:, 2] = s1 & 0xFF
    out = trip.tobytes()
    if u.size % 2:
        last = int(u[-1])
        out += bytes([last & 0xFF, (last >> 8) & 0x0F])
    return out


def parse_signal_16(data: bytes, n_channels: int, n_samples: int) -> np.ndarray:
    need = 2 * n_channels * n_samples
    if len(data) < need:
        raise TruncatedDataError(need, len(data))
    raw = np.frombuffer(data, dtype="<i2", count=n_channels * n_samples)
    return raw.astype(np.int32).reshape(n_samples, n_channels)


def _samples_in_file(fmt: int, n_bytes: int, n_channels: int) -> int:
    if fmt == 212:
        return (n_bytes * 2 // 3) // n_channels
    return n_bytes // (2 * n_channels)


def read_signal_file(path: Path, specs: Sequence[SignalSpec], n_samples: int) -> np.ndarray:
    fmt = specs[0].fmt
    if any(s.fmt != fmt for s in specs):
        raise UnsupportedFormatError(f"{path.name}: mixed storage formats in one file")
    data = path.read_bytes()[specs[0].byte_offset :]
    n_ch = len(specs)
    if n_samples <= 0:
        n_samples = _samples_in_file(fmt, len(data), n_ch)
    if fmt == 212:
        return parse_signal_212(data, n_ch, n_samples)
    return parse_signal_16(data, n_ch, n_samples)


# --------------------------------------------------------------------------
# Annotations

_SKIP, _NUM, _SUB, _CHAN, _AUX = 59, 60, 61, 62, 63

ANNOTATION_SYMBOLS = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A", 9: "S",
    10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|", 18: "s", 19: "T",
    20: "*", 21: "D", 22: '"', 23: "=", 24: "p", 25: "B", 26: "^", 27: "t",
    28: "+", 29: "u", 30: "?", 31: "!", 32: "[", 33: "]", 34: "e", 35: "n",
    36: "@", 37: "x", 38: "f", 39: "(", 40: ")", 41: "r",
}
SYMBOL_CODES = {sym: code for code, sym in ANNOTATION_SYMBOLS.items()}


def parse_annotations(data: bytes) -> list[Annotation]:
    """Decode an MIT-format annotation stream.

    SKIP/NUM/SUB/CHAN/AUX pseudo-annotations modify state or the preceding
    annotation and are never emitted. Unknown type codes are logged and
    skipped; their time increment still applies.

    Raises:
        AnnotationOrderError: emitted sample indices would decrease.
    """
    out: list[Annotation] = []
    t = 0
    chan = num = 0
    i = 0
    n = len(data)
    while i + 1 < n:
        word = data[i] | (data[i + 1] << 8)
        i += 2
        code, value = word >> 10, word & 0x3FF
        if code == 0 and value == 0:
            break
        if code == _SKIP:
            if i + 4 > n:
                raise WfdbError("SKIP annotation truncated")
            hi = data[i] | (data[i + 1] << 8)
            lo = data[i + 2] | (data[i + 3] << 8)
            interval = (hi << 16) | lo
            if interval >= 1 << 31:
                interval -= 1 << 32
            t += interval
            i += 4
        elif code == _NUM:
            num = value - 1024 if value >= 512 else value
            if out:
                out[-1] = out[-1]._replace(num=num)
        elif code == _SUB:
            pass
        elif code == _CHAN:
            chan = value
            if out:
                out[-1] = out[-1]._replace(chan=chan)
        elif code == _AUX:
            aux = bytes(data[i : i + value]).decode("latin-1").rstrip("\x00")
            i += value + (value & 1)
            if out:
                out[-1] = out[-1]._replace(aux=aux)
        else:
            t += value
            symbol = ANNOTATION_SYMBOLS.get(code)
            if symbol is None:
                logger.warning("unknown annotation code %d at sample %d; skipped", code, t)
                continue
            if out and t < out[-1].sample:
                raise AnnotationOrderError(
                    f"annotation sample {t} precedes previous sample {out[-1].sample}"
                )
            if t < 0:
                raise AnnotationOrderError(f"negative annotation sample {t}")
            out.append(Annotation(t, symbol, chan, num))
    return out


def write_annotations(annotations: Iterable[tuple[int, str]]) -> bytes:
    """Encode ``(sample, symbol)`` pairs as an MIT annotation stream (for fixtures)."""
    buf = bytearray()
    prev = 0
    for sample, symbol in annotations:
        code = SYMBOL_CODES[symbol]
        delta = int(sample) - prev
        if 0 <= delta <= 1023:
            word = (code << 10) | delta
            buf += bytes([word & 0xFF, word >> 8])
        else:
            interval = delta & 0xFFFFFFFF
            hi, lo = interval >> 16, interval & 0xFFFF
            buf += bytes([0, _SKIP << 2, hi & 0xFF, hi >> 8, lo & 0xFF, lo >> 8])
            word = code << 10
            buf += bytes([word & 0xFF, word >> 8])
        prev = int(sample)
    buf += b"\x00\x00"
    return bytes(buf)


# --------------------------------------------------------------------------
# AAMI grouping

DEFAULT_AAMI_GROUPS = {
    "N": ("N", "L", "R", "e", "j"),
    "S": ("A", "a", "J", "S"),
    "V": ("V", "E"),
    "F": ("F",),
    "Q": ("/", "f", "Q"),
}


def build_aami_table(groups: dict[str, Iterable[str]] | None = None) -> dict[str, str]:
    groups = DEFAULT_AAMI_GROUPS if groups is None else groups
    table: dict[str, str] = {}
    for cls, symbols in groups.items():
        for sym in symbols:
            if sym in table:
                raise ValueError(f"symbol {sym!r} assigned to both {table[sym]} and {cls}")
            table[sym] = cls
    return table


AAMI_TABLE = build_aami_table()


def load_aami_table(path: str | Path) -> dict[str, str]:
    """Read an override table: JSON object mapping class -> list of symbols."""
    with open(path) as fh:
        return build_aami_table(json.load(fh))


def map_to_aami(symbol: str, table: dict[str, str] | None = None) -> str | None:
    return (AAMI_TABLE if table is None else table).get(symbol)


# --------------------------------------------------------------------------
# Records

DEFAULT_LEAD_PREFERENCES: tuple[tuple[str, ...], ...] = (("MLII", "II"), ("V1",))


def pick_leads(
    names: Sequence[str],
    preferences: Sequence[Sequence[str]] = DEFAULT_LEAD_PREFERENCES,
) -> list[int]:
    """Choose one channel per preference slot.

    Each slot takes the first channel whose name matches (case-insensitive);
    otherwise the lowest-index channel not already taken.
    """
    upper = [n.upper() for n in names]
    chosen: list[int] = []
    for slot in preferences:
        idx = next(
            (i for i, nm in enumerate(upper) if nm in {p.upper() for p in slot} and i not in chosen),
            None,
        )
        if idx is None:
            idx = next((i for i in range(len(names)) if i not in chosen), None)
        if idx is None:
            break
        chosen.append(idx)
    return chosen


def load_record(
    path: str | Path,
    annotator: str | None = "atr",
    channels: Sequence[int] | None = None,
    max_samples: int | None = None,
) -> EcgRecord:
    """Load ``<path>.hea`` plus its signal files and optional annotations.

    ``path`` is the record path without extension. Samples are converted to
    mV as ``(raw - baseline) / gain`` per channel.
    """
    path = Path(path)
    if path.suffix in (".hea", ".dat", ".atr"):
        path = path.with_suffix("")
    header = parse_header((path.parent / f"{path.name}.hea").read_bytes())

    columns: list[np.ndarray] = [None] * header.n_signals  # type: ignore[list-item]
    by_file: dict[str, list[int]] = {}
    for i, spec in enumerate(header.signals):
        by_file.setdefault(spec.file_name, []).append(i)
    n_samples = header.n_samples
    for fname, idxs in by_file.items():
        raw = read_signal_file(path.parent / fname, [header.signals[i] for i in idxs], n_samples)
        for col, i in enumerate(idxs):
            columns[i] = raw[:, col]
    n_samples = min(len(c) for c in columns)

    chans = list(range(header.n_signals)) if channels is None else list(channels)
    stop = n_samples if max_samples is None else min(n_samples, int(max_samples))
    sig = np.empty((stop, len(chans)))
    infos = []
    for out_col, i in enumerate(chans):
        spec = header.signals[i]
        sig[:, out_col] = (columns[i][:stop] - spec.baseline) / spec.gain
        infos.append(ChannelInfo(spec.description or f"ch{i}", spec.gain, spec.baseline))

    anns: list[Annotation] = []
    if annotator:
        ann_path = path.parent / f"{path.name}.{annotator}"
        if ann_path.exists():
            anns = [a for a in parse_annotations(ann_path.read_bytes()) if a.sample < stop]
        else:
            logger.warning("no annotation file %s", ann_path)
    return EcgRecord(header.record_name, header.fs, infos, sig, anns)


def record_to_csv(record: EcgRecord, out: IO[str]) -> None:
    writer = csv.writer(out)
    writer.writerow(["sample_index"] + [f"ch{i}_mV" for i in range(record.signal.shape[1])])
    for i, row in enumerate(record.signal):
        writer.writerow([i] + [f"{v:.6f}" for v in row])


def write_record(
    directory: str | Path,
    record_name: str,
    raw: np.ndarray,
    fs: float,
    gains: Sequence[float],
    baselines: Sequence[int],
    names: Sequence[str],
    annotations: Iterable[tuple[int, str]] | None = None,
    fmt: int = 212,
) -> Path:
    """Write a single-file WFDB record from raw ADC values (fixture helper)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = np.asarray(raw, dtype=np.int64)
    n, n_ch = raw.shape
    dat = f"{record_name}.dat"
    if fmt == 212:
        payload = pack_212(raw)
    elif fmt == 16:
        payload = raw.astype("<i2").tobytes()
    else:
        raise UnsupportedFormatError(f"cannot write format {fmt}")
    (directory / dat).write_bytes(payload)
    lines = [f"{record_name} {n_ch} {fs:g} {n}"]
    for c in range(n_ch):
        checksum = int(raw[:, c].sum()) & 0xFFFF
        checksum = checksum - 0x10000 if checksum >= 0x8000 else checksum
        lines.append(
            f"{dat} {fmt} {gains[c]:g}({baselines[c]})/mV 11 {baselines[c]} "
            f"{int(raw[0, c])} {checksum} 0 {names[c]}"
        )
    (directory / f"{record_name}.hea").write_text("\n".join(lines) + "\n")
    if annotations is not None:
        (directory / f"{record_name}.atr").write_bytes(write_annotations(annotations))
    return directory / record_name
