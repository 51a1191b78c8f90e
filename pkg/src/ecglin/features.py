"""Per-beat base features and the named-column matrix that carries them.

Missing values are tracked in a boolean mask next to the values (the value
slot holds 0.0); imputation happens during refinement.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dsp
from .segmentation import BeatSegment

logger = logging.getLogger(__name__)

BASE_REGISTRY_VERSION = "base-v1"

TIME_NAMES = ("mean", "std", "skew", "kurt", "rms", "zcr", "max", "min", "ptp", "mad")
SPECTRAL_NAMES = (
    "low_band_0_5Hz", "mid_band_5_15Hz", "high_band_15_40Hz", "spec_entropy", "dominant_freq", "total_power",
)
WAVELET_NAMES = tuple(f"wp_e{i}" for i in range(8))
MORPH_NAMES = (
    "qrs_dur_ms", "qrs_onset_ms", "qrs_offset_ms", "r_amp_mV", "q_amp_mV", "s_amp_mV", "p_amp_mV",
    "pr_ms", "t_amp_mV", "t_peak_ms", "qt_ms", "st_dev_mV", "qrs_area", "cwt_energy",
)
RR_NAMES = (
    "rr_prev", "rr_next", "rr_ratio", "local_rr_mean", "rr_prev_norm", "rr_next_norm", "rr_diff", "heart_rate",
)
CROSS_NAMES = ("corr_ch0_ch1", "energy_ratio_ch1_ch0", "r_amp_ch1", "lag_ch0_ch1_ms")
PAA_NAMES = tuple(f"paa_{i:02d}" for i in range(14))

BANDS = ((0.0, 5.0), (5.0, 15.0), (15.0, 40.0))
LOCAL_RR_BEATS = 5
DELINEATION_SCALE_S = 0.010
LOBE_FRACTION = 0.15


# --------------------------------------------------------------------------
# Registry


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    channel: int | None
    group: str


@dataclass(frozen=True)
class FeatureRegistry:
    version: str
    specs: tuple[FeatureSpec, ...]

    def __post_init__(self):
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate feature names: {dup}")

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def __len__(self) -> int:
        return len(self.specs)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def hash(self) -> str:
        h = hashlib.sha256((self.version + "\n" + "\n".join(self.names)).encode())
        return h.hexdigest()[:16]

    def extend(self, version: str, specs: Iterable[FeatureSpec]) -> "FeatureRegistry":
        return FeatureRegistry(version, self.specs + tuple(specs))


def _base_specs() -> list[FeatureSpec]:
    specs = []
    for ch in (0, 1):
        specs += [FeatureSpec(f"{n}_ch{ch}", ch, "time") for n in TIME_NAMES]
    for ch in (0, 1):
        suffix = "" if ch == 0 else "_ch1"
        specs += [FeatureSpec(n + suffix, ch, "spectral") for n in SPECTRAL_NAMES]
    for ch in (0, 1):
        suffix = "" if ch == 0 else "_ch1"
        specs += [FeatureSpec(n + suffix, ch, "wavelet") for n in WAVELET_NAMES]
    specs += [FeatureSpec(n, 0, "morphology") for n in MORPH_NAMES]
    specs += [FeatureSpec(n, None, "rr") for n in RR_NAMES]
    specs += [FeatureSpec(n, None, "cross") for n in CROSS_NAMES]
    specs += [FeatureSpec(n, 0, "paa") for n in PAA_NAMES]
    return specs


BASE_REGISTRY = FeatureRegistry(BASE_REGISTRY_VERSION, tuple(_base_specs()))
assert len(BASE_REGISTRY) == 88


# --------------------------------------------------------------------------
# Feature matrix


@dataclass(frozen=True)
class BeatRef:
    record_id: str
    beat_index: int
    r_peak: int


@dataclass
class FeatureMatrix:
    columns: list[str]
    values: np.ndarray
    missing: np.ndarray
    beat_refs: list[BeatRef]
    labels: list[str | None]
    registry_version: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.missing = np.asarray(self.missing, dtype=bool)
        d = len(self.columns)
        if self.values.size == 0:
            self.values = self.values.reshape(0, d)
            self.missing = self.missing.reshape(0, d)
        if self.values.ndim != 2 or self.values.shape[1] != d or self.missing.shape != self.values.shape:
            raise ValueError("values/missing/columns shape mismatch")
        # missing slots always hold 0.0 so binary round trips are exact
        self.values = np.where(self.missing, 0.0, self.values)
        n = self.values.shape[0]
        if len(self.beat_refs) != n or len(self.labels) != n:
            raise ValueError("row metadata length mismatch")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.nonzero(rows)[0]
        return FeatureMatrix(
            list(self.columns),
            self.values[rows],
            self.missing[rows],
            [self.beat_refs[i] for i in rows],
            [self.labels[i] for i in rows],
            self.registry_version,
            dict(self.meta),
        )

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    @staticmethod
    def vstack(parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        if not parts:
            raise ValueError("nothing to stack")
        cols = parts[0].columns
        if any(p.columns != cols for p in parts):
            raise ValueError("column mismatch")
        return FeatureMatrix(
            list(cols),
            np.vstack([p.values for p in parts]),
            np.vstack([p.missing for p in parts]),
            [r for p in parts for r in p.beat_refs],
            [l for p in parts for l in p.labels],
            parts[0].registry_version,
            dict(parts[0].meta),
        )

    def to_csv(self, path: str | Path, header_comment: str | None = None, with_index: bool = False) -> None:
        """Registry columns plus ``label`` (missing cells written empty).

        ``with_index`` prepends ``record_id,beat_index``; the binary dump always carries them.
        """
        with open(path, "w") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            fh.write(",".join((["record_id", "beat_index"] if with_index else []) + self.columns + ["label"]) + "\n")
            for i in range(self.n_rows):
                cells = ["" if m else repr(float(v)) for v, m in zip(self.values[i], self.missing[i])]
                ref = self.beat_refs[i]
                index = [ref.record_id, str(ref.beat_index)] if with_index else []
                fh.write(",".join(index + cells + [self.labels[i] or ""]) + "\n")

    def to_binary(self, path: str | Path, extra: dict | None = None) -> None:
        """Column-major float64 values (NaN for missing) plus a JSON sidecar."""
        path = Path(path)
        vals = np.where(self.missing, np.nan, self.values)
        path.write_bytes(np.asfortranarray(vals).astype("<f8").tobytes(order="F"))
        schema = {
            "shape": [self.n_rows, self.n_cols],
            "order": "column-major",
            "dtype": "float64-le",
            "columns": self.columns,
            "labels": self.labels,
            "beat_refs": [[r.record_id, r.beat_index, r.r_peak] for r in self.beat_refs],
            "registry_version": self.registry_version,
            **(extra or {}),
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(schema, indent=1))

    @classmethod
    def from_binary(cls, path: str | Path) -> "FeatureMatrix":
        path = Path(path)
        schema = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        n, d = schema["shape"]
        vals = np.frombuffer(path.read_bytes(), dtype="<f8").reshape((n, d), order="F")
        missing = np.isnan(vals)
        return cls(
            schema["columns"],
            np.where(missing, 0.0, vals),
            missing,
            [BeatRef(r[0], int(r[1]), int(r[2])) for r in schema["beat_refs"]],
            schema["labels"],
            schema.get("registry_version", ""),
        )


# --------------------------------------------------------------------------
# Extractors. Each returns (values, missing) in its registry order.


def time_domain_features(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n == 0:
        raise ValueError("empty segment")
    miss = np.zeros(len(TIME_NAMES), dtype=bool)
    mean = x.mean()
    c = x - mean
    m2 = np.mean(c**2)
    if m2 > 0:
        skew = np.mean(c**3) / m2**1.5
        kurt = np.mean(c**4) / m2**2 - 3.0
    else:
        skew = kurt = 0.0
        miss[[2, 3]] = True
    std = x.std(ddof=1) if n > 1 else 0.0
    neg = x < 0
    zcr = np.count_nonzero(neg[1:] != neg[:-1]) / (n - 1) if n > 1 else 0.0
    med = np.median(x)
    vals = [mean, std, skew, kurt, np.sqrt(np.mean(x**2)), zcr, x.max(), x.min(), np.ptp(x), np.median(np.abs(x - med))]
    return np.array(vals, dtype=float), miss


def frequency_domain_features(x: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalized band powers, spectral entropy, dominant frequency, power."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 64:
        raise ValueError("need at least 64 samples")
    power = dsp.dft_magnitudes(x)[: n // 2 + 1] ** 2
    freqs = np.arange(len(power)) * fs / n
    total = power.sum()
    if total <= 0:
        return np.zeros(len(SPECTRAL_NAMES)), np.ones(len(SPECTRAL_NAMES), dtype=bool)
    bands = [power[(freqs >= lo) & (freqs < hi)].sum() / total for lo, hi in BANDS]
    pos = power[1:]
    p = pos / pos.sum() if pos.sum() > 0 else np.zeros_like(pos)
    nz = p[p > 0]
    entropy = float(-np.sum(nz * np.log(nz)))
    dominant = float(freqs[1 + int(np.argmax(pos))]) if pos.size else 0.0
    vals = bands + [entropy, dominant, float(np.mean(x**2))]
    return np.array(vals), np.zeros(len(SPECTRAL_NAMES), dtype=bool)


def wavelet_features(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = dsp.wavelet_packet_energies(x, 4, 3)
    return e, np.full(len(e), not e.any())


@dataclass
class QrsBounds:
    onset: int
    offset: int
    coeffs: np.ndarray


def _walk_lobes(w: np.ndarray, r: int, step: int, limit: int, thr: float) -> int | None:
    """Walk outward from the R lobe across CWT lobes whose peak reaches ``thr``.

    Returns the far zero crossing of the outermost significant lobe (or of
    the R lobe when no neighbour qualifies); None when the R lobe never
    crosses zero inside the search window.
    """
    def inside(i):
        return 0 <= i < len(w) and (i - limit) * step <= 0

    sgn = np.sign(w[r])
    i = r
    while inside(i + step) and np.sign(w[i]) == sgn:
        i += step
    if np.sign(w[i]) == sgn:
        return None
    boundary = i
    while True:
        sgn = np.sign(w[i])
        if sgn == 0:
            return boundary
        j, peak = i, 0.0
        while inside(j + step) and np.sign(w[j]) == sgn:
            peak = max(peak, abs(w[j]))
            j += step
        if peak < thr:
            return boundary
        boundary = j
        if np.sign(w[j]) == sgn:
            return boundary
        i = j


def delineate_qrs(
    x: np.ndarray, fs: float, r: int, pre_s: float = 0.10, post_s: float = 0.12
) -> QrsBounds | None:
    """QRS onset/offset from a Mexican-hat CWT at ~10 ms scale."""
    w = dsp.cwt_mexican_hat(x, [max(1.0, DELINEATION_SCALE_S * fs)])[0]
    if w[r] == 0:
        return None
    thr = LOBE_FRACTION * abs(w[r])
    on = _walk_lobes(w, r, -1, max(0, r - int(round(pre_s * fs))), thr)
    off = _walk_lobes(w, r, 1, min(len(x) - 1, r + int(round(post_s * fs))), thr)
    if on is None or off is None:
        return None
    return QrsBounds(on, off, w)


def _window(n: int, lo: float, hi: float) -> slice | None:
    a, b = max(0, int(round(lo))), min(n, int(round(hi)) + 1)
    return slice(a, b) if b > a else None


def pr_baseline(x: np.ndarray, fs: float, r: int) -> float:
    sl = _window(len(x), r - 0.090 * fs, r - 0.060 * fs)
    return float(np.mean(x[sl])) if sl is not None else float(np.median(x))


def morphological_features(x: np.ndarray, fs: float, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Lead-II landmarks. Times in ms relative to R or QRS onset; amplitudes vs PR baseline."""
    x = np.asarray(x, dtype=float)
    k = len(MORPH_NAMES)
    vals = np.zeros(k)
    miss = np.ones(k, dtype=bool)
    if np.ptp(x) == 0 or not 0 <= r < len(x):
        return vals, miss
    ms = 1000.0 / fs
    b = pr_baseline(x, fs, r)
    out: dict[str, float] = {"r_amp_mV": x[r] - b}
    q = delineate_qrs(x, fs, r)
    if q is not None:
        on, off = q.onset, q.offset
        out.update(
            qrs_dur_ms=(off - on) * ms,
            qrs_onset_ms=(r - on) * ms,
            qrs_offset_ms=(off - r) * ms,
            q_amp_mV=x[on : r + 1].min() - b,
            s_amp_mV=x[r : off + 1].min() - b,
            qrs_area=float(np.sum(np.abs(x[on : off + 1] - b)) / fs),
            cwt_energy=float(np.sum(q.coeffs[on : off + 1] ** 2)),
        )
        p_sl = _window(len(x), r - 0.300 * fs, on - 0.020 * fs)
        if p_sl is not None and p_sl.stop - p_sl.start >= 0.010 * fs:
            p = p_sl.start + int(np.argmax(np.abs(x[p_sl] - b)))
            out.update(p_amp_mV=x[p] - b, pr_ms=(on - p) * ms)
        t_sl = _window(len(x), off + 0.080 * fs, off + 0.400 * fs)
        if t_sl is not None and t_sl.stop - t_sl.start >= 0.020 * fs:
            t = t_sl.start + int(np.argmax(np.abs(x[t_sl] - b)))
            out.update(t_amp_mV=x[t] - b, t_peak_ms=(t - r) * ms, qt_ms=(t - on) * ms)
        st_sl = _window(len(x), off + 0.040 * fs, off + 0.080 * fs)
        if st_sl is not None:
            out["st_dev_mV"] = float(np.mean(x[st_sl])) - b
    for i, name in enumerate(MORPH_NAMES):
        if name in out:
            vals[i], miss[i] = out[name], False
    return vals, miss


def rr_features(rr: np.ndarray, beat_index: int, rr_prev: float, rr_next: float) -> tuple[np.ndarray, np.ndarray]:
    """RR context; ``rr`` holds the record's RR intervals in seconds."""
    lo, hi = max(0, beat_index - LOCAL_RR_BEATS), min(len(rr), beat_index + LOCAL_RR_BEATS)
    local = float(np.mean(rr[lo:hi])) if hi > lo else float(np.mean([rr_prev, rr_next]))
    vals = [
        rr_prev, rr_next, rr_prev / rr_next, local, rr_prev / local, rr_next / local,
        rr_next - rr_prev, 60.0 / local,
    ]
    return np.array(vals), np.zeros(len(RR_NAMES), dtype=bool)


def cross_lead_features(x0: np.ndarray, x1: np.ndarray, fs: float, r: int) -> tuple[np.ndarray, np.ndarray]:
    vals = np.zeros(len(CROSS_NAMES))
    miss = np.zeros(len(CROSS_NAMES), dtype=bool)
    c0, c1 = x0 - x0.mean(), x1 - x1.mean()
    d0, d1 = np.sqrt(np.dot(c0, c0)), np.sqrt(np.dot(c1, c1))
    if d0 > 0 and d1 > 0:
        vals[0] = np.dot(c0, c1) / (d0 * d1)
    else:
        miss[0] = True
    e0 = np.dot(x0, x0)
    if e0 > 0:
        vals[1] = np.dot(x1, x1) / e0
    else:
        miss[1] = True
    vals[2] = x1[r] - pr_baseline(x1, fs, r)
    max_lag = max(1, int(round(0.05 * fs)))
    if d0 > 0 and d1 > 0:
        n = len(x0)
        lags = np.arange(-max_lag, max_lag + 1)
        xc = [np.dot(c0[max(0, -l) : n - max(0, l)], c1[max(0, l) : n - max(0, -l)]) for l in lags]
        vals[3] = lags[int(np.argmax(np.abs(xc)))] * 1000.0 / fs
    else:
        miss[3] = True
    return vals, miss


def paa_features(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    chunks = np.array_split(np.asarray(x, dtype=float), len(PAA_NAMES))
    return np.array([c.mean() for c in chunks]), np.zeros(len(PAA_NAMES), dtype=bool)


def extract_base_features(seg: BeatSegment, rr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One 88-value row (values, missing mask) in registry order."""
    s = seg.samples
    if s.ndim != 2 or s.shape[1] < 2:
        raise ValueError("base features need two channels")
    fs = seg.fs_effective
    x0, x1 = s[:, 0], s[:, 1]
    parts = [
        time_domain_features(x0), time_domain_features(x1),
        frequency_domain_features(x0, fs), frequency_domain_features(x1, fs),
        wavelet_features(x0), wavelet_features(x1),
        morphological_features(x0, fs, seg.r_index),
        rr_features(rr, seg.beat_index, seg.rr_prev, seg.rr_next),
        cross_lead_features(x0, x1, fs, seg.r_index),
        paa_features(x0),
    ]
    vals = np.concatenate([p[0] for p in parts])
    miss = np.concatenate([p[1] for p in parts])
    vals = np.where(np.isfinite(vals), vals, 0.0)
    miss |= ~np.isfinite(np.concatenate([p[0] for p in parts]))
    if len(vals) != len(BASE_REGISTRY):
        raise AssertionError("row length does not match the registry")
    return vals, miss


def base_feature_matrix(segments: Sequence[BeatSegment], rr_by_record: dict[str, np.ndarray]) -> FeatureMatrix:
    n = len(segments)
    d = len(BASE_REGISTRY)
    vals = np.zeros((n, d))
    miss = np.zeros((n, d), dtype=bool)
    for i, seg in enumerate(segments):
        vals[i], miss[i] = extract_base_features(seg, rr_by_record[seg.record_id])
    return FeatureMatrix(
        BASE_REGISTRY.names,
        vals,
        miss,
        [BeatRef(s.record_id, s.beat_index, s.r_peak) for s in segments],
        [s.label for s in segments],
        BASE_REGISTRY_VERSION,
    )
