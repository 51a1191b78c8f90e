"""R-peak detection: three detectors, kurtosis-based quality weights, voting merge."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from . import dsp

logger = logging.getLogger(__name__)

DETECTORS = ("pan_tompkins", "cwt", "adaptive_threshold")
REFRACTORY_S = 0.2
REFINE_S = 0.05
SQI_WINDOW_S = 5.0


@dataclass
class PeakSet:
    detector_id: str
    peaks: np.ndarray
    sqi_weight: float = 0.0
    window_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    window_len: int = 1

    def __post_init__(self):
        self.peaks = np.asarray(self.peaks, dtype=np.int64)
        if self.peaks.size > 1 and np.any(np.diff(self.peaks) <= 0):
            raise ValueError("peaks must be strictly increasing")

    def weight_at(self, sample: int) -> float:
        if self.window_weights.size == 0:
            return self.sqi_weight
        i = min(int(sample) // self.window_len, self.window_weights.size - 1)
        return float(self.window_weights[i])


# --------------------------------------------------------------------------
# Shared helpers


def _is_flat(x: np.ndarray) -> bool:
    return x.size == 0 or not np.isfinite(x).all() or np.ptp(x) == 0


def refine_peaks(x: np.ndarray, candidates: np.ndarray, fs: float, refractory_s: float = REFRACTORY_S) -> np.ndarray:
    """Move each candidate to the max |x| within ±50 ms, then enforce the refractory gap."""
    half = max(1, int(round(REFINE_S * fs)))
    n = len(x)
    ax = np.abs(x)
    out = []
    for c in np.asarray(candidates, dtype=np.int64):
        lo, hi = max(0, c - half), min(n, c + half + 1)
        if lo >= hi:
            continue
        out.append(lo + int(np.argmax(ax[lo:hi])))
    return enforce_refractory(np.array(out, dtype=np.int64), ax, int(round(refractory_s * fs)))


def enforce_refractory(peaks: np.ndarray, strength: np.ndarray, gap: int) -> np.ndarray:
    """Drop the weaker of any two peaks closer than ``gap`` samples."""
    peaks = np.unique(peaks)
    kept: list[int] = []
    for p in peaks:
        if kept and p - kept[-1] < gap:
            if strength[p] > strength[kept[-1]]:
                kept[-1] = int(p)
            continue
        kept.append(int(p))
    return np.array(kept, dtype=np.int64)


def _bandpass(x: np.ndarray, fs: float, lo: float, hi: float, order: int = 2) -> np.ndarray:
    hi = min(hi, 0.45 * fs)
    return dsp.filtfilt(dsp.design_butterworth_bandpass(order, lo, hi, fs), x)


# --------------------------------------------------------------------------
# Pan-Tompkins


@dataclass
class PanTompkinsTrace:
    filtered: np.ndarray
    derivative: np.ndarray
    integrated: np.ndarray


def pan_tompkins_stages(x: np.ndarray, fs: float) -> PanTompkinsTrace:
    f = _bandpass(x, fs, 5.0, 15.0)
    # 5-point derivative, centred: (2x[n+1] + x[n+2] - 2x[n-1] - x[n-2]) / 8
    d = np.convolve(f, np.array([1, 2, 0, -2, -1]) / 8.0, mode="same") * fs
    mwi = uniform_filter1d(d**2, size=max(1, int(round(0.15 * fs))), mode="nearest")
    return PanTompkinsTrace(f, d, mwi)


def detect_pan_tompkins(x: np.ndarray, fs: float) -> PeakSet:
    x = np.asarray(x, dtype=float)
    if len(x) < 2 * fs:
        raise ValueError("Pan-Tompkins needs at least 2 s of signal")
    if _is_flat(x):
        logger.warning("flat signal; no peaks")
        return PeakSet("pan_tompkins", [])
    tr = pan_tompkins_stages(x, fs)
    mwi = tr.integrated
    refractory = int(round(REFRACTORY_S * fs))
    cand, _ = find_peaks(mwi, distance=refractory)
    if cand.size == 0:
        return PeakSet("pan_tompkins", [])

    init = mwi[: int(2 * fs)]
    spki, npki = init.max() / 3.0, init.mean() / 2.0
    thr1 = npki + 0.25 * (spki - npki)
    slope_win = max(1, int(round(0.075 * fs)))
    abs_d = np.abs(tr.derivative)

    def max_slope(i: int) -> float:
        return float(abs_d[max(0, i - slope_win) : i + slope_win + 1].max())

    qrs: list[int] = []
    qrs_slopes: list[float] = []
    skipped: list[int] = []

    def accept(i: int, searchback: bool) -> None:
        nonlocal spki
        spki = (0.25 if searchback else 0.125) * mwi[i] + (0.75 if searchback else 0.875) * spki
        qrs.append(int(i))
        qrs_slopes.append(max_slope(i))
        skipped.clear()

    for c in cand:
        if len(qrs) >= 2:
            rr_avg = float(np.mean(np.diff(qrs[-9:])))
            if c - qrs[-1] > 1.66 * rr_avg:
                thr2 = 0.5 * thr1
                pool = [s for s in skipped if s - qrs[-1] >= refractory and mwi[s] > thr2]
                if pool:
                    accept(max(pool, key=lambda s: mwi[s]), searchback=True)
        pk = mwi[c]
        if pk > thr1 and (not qrs or c - qrs[-1] >= refractory):
            is_t = bool(qrs) and c - qrs[-1] < 0.36 * fs and max_slope(c) < 0.5 * qrs_slopes[-1]
            if is_t:
                npki = 0.125 * pk + 0.875 * npki
                skipped.append(int(c))
            else:
                accept(c, searchback=False)
        else:
            npki = 0.125 * pk + 0.875 * npki
            skipped.append(int(c))
        thr1 = npki + 0.25 * (spki - npki)

    return PeakSet("pan_tompkins", refine_peaks(x, np.array(qrs), fs))


# --------------------------------------------------------------------------
# CWT energy detector


def qrs_scales(fs: float) -> list[float]:
    return [s * fs / 360.0 for s in (4, 8, 16, 32)]


def cwt_rows(x: np.ndarray, fs: float) -> np.ndarray:
    """QRS-scale CWT rows, each scaled to unit standard deviation."""
    w = dsp.cwt_mexican_hat(x, qrs_scales(fs))
    sd = w.std(axis=1, keepdims=True)
    return w / np.where(sd > 0, sd, 1.0)


def cwt_energy(x: np.ndarray, fs: float) -> np.ndarray:
    """Sum over QRS scales of squared, per-scale standardized coefficients."""
    return np.sum(cwt_rows(x, fs) ** 2, axis=0)


def running_mean_std(x: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    size = max(1, min(size, len(x)))
    mu = uniform_filter1d(x, size=size, mode="nearest")
    var = uniform_filter1d(x * x, size=size, mode="nearest") - mu**2
    return mu, np.sqrt(np.maximum(var, 0.0))


def detect_cwt(x: np.ndarray, fs: float, window_s: float = 10.0) -> PeakSet:
    """Local maxima of the QRS-scale CWT envelope above running mean + 2 std.

    The envelope is sqrt(energy); scales are standardized first so wide
    ectopic complexes do not dominate the threshold.
    """
    x = np.asarray(x, dtype=float)
    if _is_flat(x):
        logger.warning("flat signal; no peaks")
        return PeakSet("cwt", [])
    e = np.sqrt(cwt_energy(x, fs))
    mu, sd = running_mean_std(e, int(round(window_s * fs)))
    thr = mu + 2 * sd
    cand, _ = find_peaks(e, distance=int(round(REFRACTORY_S * fs)))
    cand = cand[e[cand] > thr[cand]]
    return PeakSet("cwt", refine_peaks(x, cand, fs))


# --------------------------------------------------------------------------
# Adaptive threshold detector


def detect_adaptive_threshold(x: np.ndarray, fs: float, window_s: float = 2.0, k: float = 1.5) -> PeakSet:
    """Peaks of x² above a running mean + k·std over a sliding window."""
    x = np.asarray(x, dtype=float)
    if _is_flat(x):
        logger.warning("flat signal; no peaks")
        return PeakSet("adaptive_threshold", [])
    sq = x * x
    mu, sd = running_mean_std(sq, int(round(window_s * fs)))
    thr = mu + k * sd
    cand, _ = find_peaks(sq, distance=int(round(REFRACTORY_S * fs)))
    cand = cand[sq[cand] > thr[cand]]
    return PeakSet("adaptive_threshold", refine_peaks(x, cand, fs))


# --------------------------------------------------------------------------
# Signal quality and merge


def sqi_kurtosis(x: np.ndarray) -> float:
    """max(0, excess kurtosis); 0 for constant input."""
    x = np.asarray(x, dtype=float)
    if len(x) < 4:
        raise ValueError("need at least 4 samples")
    c = x - x.mean()
    m2 = np.mean(c**2)
    if m2 <= 1e-300:
        return 0.0
    return max(0.0, float(np.mean(c**4) / m2**2 - 3.0))


def quality_signal(detector_id: str, x: np.ndarray, fs: float) -> np.ndarray:
    """Linear (pre-squaring) signal each detector works from; its kurtosis is the SQI.

    Linear filtering keeps Gaussian noise Gaussian, so noise scores near 0.
    """
    if detector_id == "pan_tompkins":
        return pan_tompkins_stages(x, fs).filtered
    if detector_id == "cwt":
        return cwt_rows(x, fs).sum(axis=0)
    if detector_id == "adaptive_threshold":
        return x
    raise KeyError(detector_id)


def windowed_sqi(env: np.ndarray, fs: float, window_s: float = SQI_WINDOW_S) -> tuple[np.ndarray, int]:
    w = max(4, int(round(window_s * fs)))
    n_win = max(1, -(-len(env) // w))
    out = np.zeros(n_win)
    for i in range(n_win):
        seg = env[i * w : (i + 1) * w]
        out[i] = sqi_kurtosis(seg) if len(seg) >= 4 else (out[i - 1] if i else 0.0)
    return out, w


def attach_sqi(ps: PeakSet, x: np.ndarray, fs: float) -> PeakSet:
    if _is_flat(x):
        ps.window_weights, ps.window_len, ps.sqi_weight = np.zeros(1), max(1, len(x)), 0.0
        return ps
    ww, wl = windowed_sqi(quality_signal(ps.detector_id, x, fs), fs)
    ps.window_weights, ps.window_len = ww, wl
    ps.sqi_weight = float(np.mean(ww))
    return ps


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> int:
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    if w.sum() <= 0:
        w = np.ones_like(w)
    cum = np.cumsum(w)
    return int(v[np.searchsorted(cum, 0.5 * cum[-1] - 1e-12)])


def ensemble_merge(peaksets: list[PeakSet], fs: float, tolerance_s: float = 0.05) -> np.ndarray:
    """Single-linkage clustering of all candidates; keep clusters carrying
    at least half of the total detector weight, located at the weighted median."""
    if tolerance_s <= 0:
        raise ValueError("tolerance must be positive")
    tol = int(round(tolerance_s * fs))
    rows = [(int(p), d) for d, ps in enumerate(peaksets) for p in ps.peaks]
    if not rows:
        return np.zeros(0, dtype=np.int64)
    rows.sort()
    samples = np.array([r[0] for r in rows])
    dets = np.array([r[1] for r in rows])
    breaks = np.nonzero(np.diff(samples) > tol)[0] + 1
    merged = []
    for idx in np.split(np.arange(len(rows)), breaks):
        s, d = samples[idx], dets[idx]
        centre = int(round(s.mean()))
        totals = np.array([ps.weight_at(centre) for ps in peaksets])
        if totals.sum() <= 0:
            totals = np.ones(len(peaksets))
        votes = sum(totals[k] for k in np.unique(d))
        if votes + 1e-12 < 0.5 * totals.sum():
            continue
        merged.append(_weighted_median(s, totals[d]))
    return np.array(merged, dtype=np.int64)


_DETECT = {
    "pan_tompkins": detect_pan_tompkins,
    "cwt": detect_cwt,
    "adaptive_threshold": detect_adaptive_threshold,
}


def detect_rpeaks(
    x: np.ndarray, fs: float, tolerance_s: float = 0.05, detectors=DETECTORS
) -> tuple[np.ndarray, list[PeakSet]]:
    """Run the detectors on one channel and merge. Returns (peaks, per-detector sets)."""
    x = np.asarray(x, dtype=float)
    sets = [attach_sqi(_DETECT[d](x, fs), x, fs) for d in detectors]
    return ensemble_merge(sets, fs, tolerance_s), sets


def match_peaks(detected: np.ndarray, reference: np.ndarray, tol: int) -> tuple[int, int, int]:
    """Greedy one-to-one matching within ``tol`` samples: (tp, fn, fp)."""
    detected = np.sort(np.asarray(detected))
    reference = np.sort(np.asarray(reference))
    used = np.zeros(len(detected), dtype=bool)
    tp = 0
    for r in reference:
        lo = np.searchsorted(detected, r - tol)
        hi = np.searchsorted(detected, r + tol, side="right")
        best, best_d = -1, tol + 1
        for j in range(lo, hi):
            if not used[j] and abs(detected[j] - r) < best_d:
                best, best_d = j, abs(detected[j] - r)
        if best >= 0:
            used[best] = True
            tp += 1
    return tp, len(reference) - tp, len(detected) - tp
