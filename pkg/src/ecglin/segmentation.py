"""Beat windowing: composite window loss, (alpha, beta) grid search, IQR pruning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dsp
from .wfdb_io import Annotation, map_to_aami

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.5, 0.3, 0.2)
HIST_BINS = 32
MIN_SEGMENT = 32
LENGTH_BOUNDS_MS = (250.0, 1500.0)
LABEL_TOLERANCE_S = 0.075
GRID_STEP = 1.0 / 15.0
ALPHA_GRID = tuple(0.1 + k * GRID_STEP for k in range(9))
BETA_GRID = tuple(0.3 + k * GRID_STEP for k in range(9))
DEFAULT_ALPHA = ALPHA_GRID[2]
DEFAULT_BETA = BETA_GRID[1]


@dataclass(frozen=True)
class WindowParams:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not (0 < self.alpha <= 1 and 0 < self.beta <= 1):
            raise ValueError(f"window fractions must lie in (0, 1]: {self}")


@dataclass(frozen=True)
class SegmentLoss:
    entropy_term: float
    snr_term: float
    energy_term: float
    length_penalty: float
    total: float
    degenerate: bool = False


def length_penalty(duration_ms: float, bounds=LENGTH_BOUNDS_MS) -> float:
    lo, hi = bounds
    if duration_ms < lo:
        return ((lo - duration_ms) / 100.0) ** 2
    if duration_ms > hi:
        return ((duration_ms - hi) / 100.0) ** 2
    return 0.0


def histogram_entropy(x: np.ndarray, bins: int = HIST_BINS) -> float:
    """Shannon entropy (nats) of the equal-width amplitude histogram over [min, max]."""
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi <= lo:
        return 0.0
    counts, _ = np.histogram(x, bins=bins, range=(lo, hi))
    p = counts[counts > 0] / len(x)
    return float(-np.sum(p * np.log(p)))


def composite_loss(
    x: np.ndarray,
    fs: float,
    qrs_band: tuple[float, float] = (5.0, 15.0),
    weights: Sequence[float] = DEFAULT_WEIGHTS,
) -> SegmentLoss:
    """Window loss: w_e·H + w_s·(1 − SNR') + w_g·(1 − E_r) + P_l.

    SNR is QRS-band over out-of-band DFT energy, squashed to [0, 1] as
    SNR/(1+SNR); E_r is QRS-band over total energy.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) < MIN_SEGMENT:
        raise ValueError(f"segment must be 1-D with at least {MIN_SEGMENT} samples")
    w_e, w_s, w_g = weights
    p_l = length_penalty(1000.0 * len(x) / fs)

    power = np.abs(np.fft.fft(x)) ** 2
    total_e = float(power.sum())
    if total_e <= 0.0:
        total = w_s + w_g + p_l
        return SegmentLoss(0.0, 1.0, 1.0, p_l, total, degenerate=True)
    f = np.abs(np.fft.fftfreq(len(x), 1.0 / fs))
    band_e = float(power[(f >= qrs_band[0]) & (f <= qrs_band[1])].sum())
    out_e = total_e - band_e
    snr_c = 1.0 if out_e <= 0 else (band_e / out_e) / (1.0 + band_e / out_e)
    e_r = band_e / total_e
    h = histogram_entropy(x)
    snr_term, energy_term = 1.0 - snr_c, 1.0 - e_r
    total = w_e * h + w_s * snr_term + w_g * energy_term + p_l
    return SegmentLoss(h, snr_term, energy_term, p_l, total)


# --------------------------------------------------------------------------
# RR context and windows


def rr_context(r_peaks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Previous/next RR in samples; edges borrow the record-median RR."""
    r = np.asarray(r_peaks, dtype=float)
    if r.size < 2:
        raise ValueError("need at least 2 R-peaks for RR context")
    d = np.diff(r)
    med = float(np.median(d))
    return np.r_[med, d], np.r_[d, med]


def window_bounds(r: int, rr_prev: float, rr_next: float, window: WindowParams) -> tuple[int, int]:
    """Half-open sample range [start, end) for one beat."""
    return int(r - round(window.alpha * rr_prev)), int(r + round(window.beta * rr_next))


# --------------------------------------------------------------------------
# Grid search


def _grid_median_index(n: int) -> int:
    return (n - 1) // 2


def _argmin_nearest_median(losses: np.ndarray) -> tuple[int, int]:
    """Argmin over a 2-D grid; ties go to the cell nearest the grid centre."""
    best = losses.min()
    cand = np.argwhere(losses <= best + 1e-12 * max(1.0, abs(best)))
    ca, cb = _grid_median_index(losses.shape[0]), _grid_median_index(losses.shape[1])
    d = (cand[:, 0] - ca) ** 2 + (cand[:, 1] - cb) ** 2
    i = int(np.lexsort((cand[:, 1], cand[:, 0], d))[0])
    return int(cand[i, 0]), int(cand[i, 1])


def lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values))
    return float(v[(len(v) - 1) // 2])


def robust_optimum(
    alphas: np.ndarray, betas: np.ndarray, losses: np.ndarray, fraction: float = 0.05
) -> WindowParams:
    """Per-coordinate (lower) median of the per-beat optima of the best ``fraction`` beats."""
    losses = np.asarray(losses)
    if losses.size == 0:
        raise ValueError("no beats")
    k = max(1, int(np.ceil(fraction * len(losses))))
    top = np.argsort(losses, kind="stable")[:k]
    return WindowParams(lower_median(np.asarray(alphas)[top]), lower_median(np.asarray(betas)[top]))


@dataclass
class GridSearchResult:
    alphas: np.ndarray
    betas: np.ndarray
    beat_losses: np.ndarray  # (n_beats, n_alpha, n_beta)
    r_peaks: np.ndarray
    record_ids: list[str] = field(default_factory=list)

    @property
    def surface(self) -> np.ndarray:
        return self.beat_losses.mean(axis=0)

    def per_beat_optima(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(alpha, beta, loss) at each beat's argmin."""
        a, b, l = [], [], []
        for grid in self.beat_losses:
            i, j = _argmin_nearest_median(grid)
            a.append(self.alphas[i])
            b.append(self.betas[j])
            l.append(grid[i, j])
        return np.array(a), np.array(b), np.array(l)

    def robust(self, fraction: float = 0.05) -> WindowParams:
        return robust_optimum(*self.per_beat_optima(), fraction=fraction)

    def global_minimum(self) -> tuple[WindowParams, float]:
        s = self.surface
        i, j = _argmin_nearest_median(s)
        return WindowParams(float(self.alphas[i]), float(self.betas[j])), float(s[i, j])

    @staticmethod
    def concat(results: Sequence["GridSearchResult"]) -> "GridSearchResult":
        if not results:
            raise ValueError("nothing to combine")
        first = results[0]
        for r in results[1:]:
            if not (np.array_equal(r.alphas, first.alphas) and np.array_equal(r.betas, first.betas)):
                raise ValueError("grids differ")
        return GridSearchResult(
            first.alphas,
            first.betas,
            np.concatenate([r.beat_losses for r in results]),
            np.concatenate([r.r_peaks for r in results]),
            [rid for r in results for rid in r.record_ids],
        )


def grid_search_window(
    x: np.ndarray,
    fs: float,
    r_peaks: np.ndarray,
    alpha_grid: Sequence[float] = ALPHA_GRID,
    beta_grid: Sequence[float] = BETA_GRID,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
    record_id: str = "",
) -> GridSearchResult:
    """Evaluate the window loss for every beat and every (alpha, beta) cell.

    Windows are clipped to the record; cells giving fewer than the minimum
    segment length score +inf.
    """
    if len(alpha_grid) == 0 or len(beta_grid) == 0:
        raise ValueError("grids must be non-empty")
    x = np.asarray(x, dtype=float)
    r_peaks = np.asarray(r_peaks, dtype=np.int64)
    rr_p, rr_n = rr_context(r_peaks)
    n = len(x)
    losses = np.full((len(r_peaks), len(alpha_grid), len(beta_grid)), np.inf)
    for k, r in enumerate(r_peaks):
        for i, a in enumerate(alpha_grid):
            start = max(0, int(r - round(a * rr_p[k])))
            for j, b in enumerate(beta_grid):
                end = min(n, int(r + round(b * rr_n[k])))
                if end - start >= MIN_SEGMENT:
                    losses[k, i, j] = composite_loss(x[start:end], fs, weights=weights).total
    return GridSearchResult(
        np.asarray(alpha_grid, dtype=float),
        np.asarray(beta_grid, dtype=float),
        losses,
        r_peaks,
        [record_id] * len(r_peaks),
    )


# --------------------------------------------------------------------------
# Segment extraction


@dataclass
class BeatSegment:
    record_id: str
    beat_index: int
    r_peak: int
    window: WindowParams
    samples: np.ndarray  # (target_len, n_channels), mV
    label: str | None
    rr_prev: float  # seconds
    rr_next: float
    raw_length: int
    fs_effective: float
    r_index: int  # R position inside ``samples``
    symbol: str | None = None
    padded: bool = False


def iqr_keep(lengths: np.ndarray) -> np.ndarray:
    """Boolean mask of lengths inside [Q1 − 1.5·IQR, Q3 + 1.5·IQR]."""
    lengths = np.asarray(lengths, dtype=float)
    if len(lengths) < 3:
        return np.ones(len(lengths), dtype=bool)
    q1, q3 = np.percentile(lengths, [25, 75])
    iqr = q3 - q1
    return (lengths >= q1 - 1.5 * iqr) & (lengths <= q3 + 1.5 * iqr)


def label_beats(
    r_peaks: np.ndarray, annotations: Sequence[Annotation], fs: float, table: dict | None = None
) -> list[tuple[str | None, str | None]]:
    """(AAMI label, raw symbol) from the nearest beat annotation within 75 ms."""
    beats = [(a.sample, a.symbol) for a in annotations if map_to_aami(a.symbol, table) is not None]
    if not beats:
        return [(None, None)] * len(r_peaks)
    pos = np.array([b[0] for b in beats])
    tol = LABEL_TOLERANCE_S * fs
    out = []
    for r in r_peaks:
        i = int(np.searchsorted(pos, r))
        best = min((j for j in (i - 1, i) if 0 <= j < len(pos)), key=lambda j: (abs(pos[j] - r), j))
        if abs(pos[best] - r) <= tol:
            sym = beats[best][1]
            out.append((map_to_aami(sym, table), sym))
        else:
            out.append((None, None))
    return out


def extract_window(signal: np.ndarray, start: int, end: int) -> tuple[np.ndarray, bool]:
    """Slice [start, end) padding with edge values past the record bounds."""
    n = signal.shape[0]
    lo, hi = max(0, start), min(n, end)
    seg = signal[lo:hi]
    pad_l, pad_r = lo - start, end - hi
    if pad_l or pad_r:
        seg = np.pad(seg, [(pad_l, pad_r)] + [(0, 0)] * (signal.ndim - 1), mode="edge")
        return seg, True
    return seg, False


def segment_record(
    signal: np.ndarray,
    fs: float,
    r_peaks: np.ndarray,
    window: WindowParams = WindowParams(),
    target_len: int = 324,
    annotations: Sequence[Annotation] = (),
    record_id: str = "",
    aami_table: dict | None = None,
    drop_unlabeled: bool = False,
) -> list[BeatSegment]:
    """Cut, IQR-prune and resample one segment per R-peak."""
    if target_len < 64:
        raise ValueError("target_len must be at least 64")
    signal = np.asarray(signal, dtype=float)
    if signal.ndim == 1:
        signal = signal[:, None]
    r_peaks = np.asarray(r_peaks, dtype=np.int64)
    if len(r_peaks) < 2:
        return []
    rr_p, rr_n = rr_context(r_peaks)
    bounds = [window_bounds(int(r), rr_p[k], rr_n[k], window) for k, r in enumerate(r_peaks)]
    lengths = np.array([e - s for s, e in bounds])
    keep = iqr_keep(lengths) & (lengths >= MIN_SEGMENT)
    labels = label_beats(r_peaks, annotations, fs, aami_table)

    out = []
    for k in np.nonzero(keep)[0]:
        label, sym = labels[k]
        if drop_unlabeled and label is None:
            continue
        start, end = bounds[k]
        raw, padded = extract_window(signal, start, end)
        samples = dsp.resample_to_length(raw, target_len)
        raw_len = end - start
        r_index = int(round((r_peaks[k] - start) * target_len / raw_len))
        out.append(
            BeatSegment(
                record_id=record_id,
                beat_index=int(k),
                r_peak=int(r_peaks[k]),
                window=window,
                samples=samples,
                label=label,
                rr_prev=float(rr_p[k] / fs),
                rr_next=float(rr_n[k] / fs),
                raw_length=int(raw_len),
                fs_effective=fs * target_len / raw_len,
                r_index=min(r_index, target_len - 1),
                symbol=sym,
                padded=padded,
            )
        )
    n_pruned = int(np.sum(~keep))
    if n_pruned:
        logger.debug("%s: IQR pruned %d of %d beats", record_id, n_pruned, len(r_peaks))
    return out
