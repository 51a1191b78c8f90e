"""Inter-beat context: HRV statistics, a beat-similarity graph, lagged copies.

Everything here works per record; beats of different records never share
an edge or a window.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from . import dsp
from .features import BASE_REGISTRY, FeatureMatrix, FeatureRegistry, FeatureSpec

logger = logging.getLogger(__name__)

AUG_REGISTRY_VERSION = "aug-v1"
HRV_HALF_WINDOW = 10
TACHOGRAM_FS = 4.0
WELCH_SAMPLES = 256
MIN_LFHF_SECONDS = 60.0
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.4)
GRAPH_K = 4
GRAPH_TAU = 1.0
DAMPING = 0.85
# stopping at an L1 step of tol leaves up to tol * d / (1 - d) error; 1e-10 keeps it under 1e-8
PAGERANK_TOL = 1e-10

HRV_NAMES = (
    "hrv_sdnn_ms", "hrv_pnn50", "hrv_rmssd_ms", "hrv_rr_mean_ms", "rr_delta_prev_ms", "rr_delta_next_ms",
    "sdnn_global_ms", "pnn50_global", "rmssd_global_ms", "lf_hf", "lf_nu", "hf_nu",
)
GRAPH_NAMES = (
    "pagerank", "clustering", "wdeg", "in_strength", "out_strength", "in_degree",
    "knn_sim_mean", "sim_prev", "sim_next",
)
# Base columns that get lag-1 and lag-2 copies: lead-0 time/spectral/wavelet
# blocks, the morphology block and a handful of rhythm/cross-lead values.
LAG_SOURCES = tuple(
    [f"{n}_ch0" for n in ("mean", "std", "skew", "kurt", "rms", "zcr", "max", "min", "ptp", "mad")]
    + ["low_band_0_5Hz", "mid_band_5_15Hz", "high_band_15_40Hz", "spec_entropy", "dominant_freq", "total_power"]
    + [f"wp_e{i}" for i in range(8)]
    + [
        "qrs_dur_ms", "qrs_onset_ms", "qrs_offset_ms", "r_amp_mV", "q_amp_mV", "s_amp_mV", "p_amp_mV",
        "pr_ms", "t_amp_mV", "t_peak_ms", "qt_ms", "st_dev_mV", "qrs_area", "cwt_energy",
    ]
    + ["rr_prev", "rr_next", "rr_ratio", "corr_ch0_ch1", "energy_ratio_ch1_ch0", "r_amp_ch1"]
)
LAGS = (1, 2)


def _aug_specs() -> list[FeatureSpec]:
    specs = [FeatureSpec(n, None, "hrv") for n in HRV_NAMES]
    specs += [FeatureSpec(n, None, "graph") for n in GRAPH_NAMES]
    base = {s.name: s for s in BASE_REGISTRY.specs}
    for lag in LAGS:
        specs += [FeatureSpec(f"{n}_lag{lag}", base[n].channel, "lag") for n in LAG_SOURCES]
    return specs


AUG_REGISTRY = BASE_REGISTRY.extend(AUG_REGISTRY_VERSION, _aug_specs())
assert len(LAG_SOURCES) == 44 and len(AUG_REGISTRY) == 197


# --------------------------------------------------------------------------
# HRV


@dataclass(frozen=True)
class HrvMetrics:
    sdnn_ms: float
    pnn50: float
    rmssd_ms: float
    window: tuple[int, int]


@dataclass(frozen=True)
class LfHf:
    lf: float
    hf: float
    ratio: float
    valid: bool

    @property
    def lf_nu(self) -> float:
        tot = self.lf + self.hf
        return self.lf / tot if tot > 0 else 0.0

    @property
    def hf_nu(self) -> float:
        tot = self.lf + self.hf
        return self.hf / tot if tot > 0 else 0.0


def hrv_time_domain(rr: np.ndarray, window: tuple[int, int] | None = None) -> HrvMetrics | None:
    """SDNN, pNN50 and RMSSD of ``rr`` (seconds) over ``window`` (interval index range).

    Returns None when the window holds fewer than two intervals.
    """
    rr = np.asarray(rr, dtype=float)
    lo, hi = window if window is not None else (0, len(rr))
    lo, hi = max(0, lo), min(len(rr), hi)
    w = rr[lo:hi] * 1000.0
    if len(w) < 2:
        return None
    d = np.diff(w)
    return HrvMetrics(
        sdnn_ms=float(np.std(w, ddof=1)),
        pnn50=float(np.mean(np.abs(d) > 50.0)),
        rmssd_ms=float(np.sqrt(np.mean(d**2))),
        window=(lo, hi),
    )


def tachogram(rr: np.ndarray, fs: float = TACHOGRAM_FS) -> np.ndarray:
    """RR values (s) placed at their beat times and linearly resampled at ``fs``."""
    rr = np.asarray(rr, dtype=float)
    t = np.cumsum(rr)
    grid = np.arange(t[0], t[-1], 1.0 / fs)
    return np.interp(grid, t, rr)


def hrv_lf_hf(rr: np.ndarray) -> LfHf:
    """LF/HF from a Welch PSD of the 4 Hz tachogram; needs 60 s of RR data."""
    rr = np.asarray(rr, dtype=float)
    if len(rr) < 3 or rr.sum() < MIN_LFHF_SECONDS:
        return LfHf(0.0, 0.0, 0.0, False)
    tach = tachogram(rr)
    nper = min(WELCH_SAMPLES, len(tach))
    psd = dsp.welch_psd(tach, TACHOGRAM_FS, nper, overlap=0.5, detrend=True)
    lf = psd.band_power(*LF_BAND)
    hf = psd.band_power(*HF_BAND)
    total = psd.band_power(0.0, TACHOGRAM_FS / 2)
    # anything below float noise relative to the signal level counts as zero power
    floor = np.finfo(float).eps * max(float(np.mean(tach)) ** 2, 1e-300) * 1e3
    if lf + hf <= floor or total <= floor:
        return LfHf(0.0, 0.0, 0.0, False)
    return LfHf(lf, hf, lf / max(hf, floor), True)


def hrv_block(rr: np.ndarray, beat_indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Per-beat HRV columns (``HRV_NAMES`` order) for beats of one record."""
    rr = np.asarray(rr, dtype=float)
    n = len(beat_indices)
    vals = np.zeros((n, len(HRV_NAMES)))
    miss = np.zeros((n, len(HRV_NAMES)), dtype=bool)
    glob = hrv_time_domain(rr)
    lfhf = hrv_lf_hf(rr)
    for row, b in enumerate(beat_indices):
        m = hrv_time_domain(rr, (b - HRV_HALF_WINDOW, b + HRV_HALF_WINDOW))
        if m is None:
            miss[row, 0:3] = True
        else:
            vals[row, 0:3] = m.sdnn_ms, m.pnn50, m.rmssd_ms
        lo, hi = max(0, b - HRV_HALF_WINDOW), min(len(rr), b + HRV_HALF_WINDOW)
        if hi > lo:
            vals[row, 3] = 1000.0 * rr[lo:hi].mean()
        else:
            miss[row, 3] = True
        # interval k spans beats k -> k+1; beat b sits between rr[b-1] and rr[b]
        if b >= 2 and b - 1 < len(rr):
            vals[row, 4] = 1000.0 * (rr[b - 1] - rr[b - 2])
        else:
            miss[row, 4] = True
        if b + 1 < len(rr):
            vals[row, 5] = 1000.0 * (rr[b + 1] - rr[b])
        else:
            miss[row, 5] = True
    if glob is None:
        miss[:, 6:9] = True
    else:
        vals[:, 6:9] = glob.sdnn_ms, glob.pnn50, glob.rmssd_ms
    vals[:, 9:12] = lfhf.ratio, lfhf.lf_nu, lfhf.hf_nu
    miss[:, 9:12] = not lfhf.valid
    return vals, miss


# --------------------------------------------------------------------------
# Beat graph


@dataclass
class BeatGraph:
    n: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    k: int = GRAPH_K
    tau: float = GRAPH_TAU

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=float)
        if not (len(self.src) == len(self.dst) == len(self.weight)):
            raise ValueError("edge arrays differ in length")
        if np.any(self.src == self.dst):
            raise ValueError("self-loops are not allowed")
        if np.any((self.weight <= 0) | (self.weight > 1)):
            raise ValueError("edge weights must lie in (0, 1]")

    def adjacency(self) -> sparse.csr_matrix:
        """W[i, j] = weight of edge i -> j."""
        return sparse.csr_matrix((self.weight, (self.src, self.dst)), shape=(self.n, self.n))

    def symmetric(self) -> sparse.csr_matrix:
        w = self.adjacency()
        return w.maximum(w.T).tocsr()

    def to_edge_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("src,dst,weight\n")
            for s, d, w in zip(self.src, self.dst, self.weight):
                fh.write(f"{s},{d},{w!r}\n")


def zscore_columns(x: np.ndarray, missing: np.ndarray | None = None) -> np.ndarray:
    """Per-column z-score; missing cells and constant columns become 0."""
    x = np.asarray(x, dtype=float).copy()
    if missing is None:
        missing = np.zeros(x.shape, dtype=bool)
    out = np.zeros_like(x)
    for j in range(x.shape[1]):
        ok = ~missing[:, j]
        if ok.sum() < 2:
            continue
        mu = x[ok, j].mean()
        sd = x[ok, j].std()
        if sd > 0:
            out[ok, j] = (x[ok, j] - mu) / sd
    return out


def cosine_matrix(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    u = z / safe[:, None]
    c = u @ u.T
    zero = norms == 0
    c[zero, :] = 0.0
    c[:, zero] = 0.0
    return np.clip(c, -1.0, 1.0)


def build_beat_graph(
    z: np.ndarray, positions: np.ndarray | None = None, k: int = GRAPH_K, tau: float = GRAPH_TAU
) -> tuple[BeatGraph, np.ndarray]:
    """kNN graph over already standardized rows ``z``.

    ``positions`` are the beat sequence numbers used for temporal decay
    (defaults to row order). Returns the graph and the raw cosine matrix.
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    if n < 2:
        raise ValueError("graph needs at least two beats")
    if k < 1 or tau <= 0:
        raise ValueError("k must be >= 1 and tau > 0")
    pos = np.arange(n) if positions is None else np.asarray(positions, dtype=float)
    cos = cosine_matrix(z)
    w = np.maximum(cos, 0.0) * np.exp(-np.abs(pos[:, None] - pos[None, :]) / tau)
    np.fill_diagonal(w, 0.0)
    src, dst, wt = [], [], []
    kk = min(k, n - 1)
    for i in range(n):
        # stable sort: ties go to the lower index
        order = np.argsort(-w[i], kind="stable")[:kk]
        order = order[w[i, order] > 0]
        src.extend([i] * len(order))
        dst.extend(order.tolist())
        wt.extend(w[i, order].tolist())
    wt = np.minimum(np.asarray(wt, dtype=float), 1.0)
    return BeatGraph(n, np.asarray(src), np.asarray(dst), wt, k, tau), cos


def transition_matrix(graph: BeatGraph) -> sparse.csr_matrix:
    """Column-stochastic M with M[i, j] = w(j -> i) / out_strength(j); no dangling fix."""
    w = graph.adjacency()
    out = np.asarray(w.sum(axis=1)).ravel()
    inv = np.divide(1.0, out, out=np.zeros_like(out), where=out > 0)
    return (sparse.diags(inv) @ w).T.tocsr()


def pagerank(graph: BeatGraph, d: float = DAMPING, tol: float = PAGERANK_TOL, max_iter: int = 200) -> np.ndarray:
    """Power iteration of PR = (1-d) 1 + d M PR; dangling columns spread uniformly. Sums to n."""
    n = graph.n
    if n == 0:
        return np.zeros(0)
    if not 0 < d < 1:
        raise ValueError("damping must be in (0, 1)")
    m = transition_matrix(graph)
    out = np.asarray(graph.adjacency().sum(axis=1)).ravel()
    dangling = out <= 0
    pr = np.ones(n)
    for it in range(max_iter):
        spread = pr[dangling].sum() / n
        new = (1 - d) + d * (m @ pr + spread)
        delta = np.abs(new - pr).sum()
        pr = new
        if delta < tol:
            break
    else:
        logger.warning("pagerank did not converge in %d iterations", max_iter)
    return pr * (n / pr.sum())


def weighted_clustering(graph: BeatGraph) -> np.ndarray:
    """Barrat weighted clustering on the max-symmetrized graph."""
    w = graph.symmetric()
    a = (w > 0).astype(float)
    s = np.asarray(w.sum(axis=1)).ravel()
    k = np.asarray(a.sum(axis=1)).ravel()
    # sum_{j,h} (w_ij + w_ih)/2 a_ij a_ih a_jh = sum_j w_ij (A^2)_ij for symmetric A
    num = np.asarray(w.multiply(a @ a).sum(axis=1)).ravel()
    den = s * (k - 1)
    c = np.divide(num, den, out=np.zeros_like(num), where=(k >= 2) & (den > 0))
    return np.clip(c, 0.0, 1.0)


def graph_block(
    values: np.ndarray, missing: np.ndarray, positions: np.ndarray, k: int = GRAPH_K, tau: float = GRAPH_TAU
) -> tuple[np.ndarray, np.ndarray, BeatGraph | None]:
    """Per-beat graph columns (``GRAPH_NAMES`` order) for one record's base rows."""
    n = values.shape[0]
    vals = np.zeros((n, len(GRAPH_NAMES)))
    miss = np.zeros((n, len(GRAPH_NAMES)), dtype=bool)
    if n == 1:
        vals[0, 0] = 1.0
        miss[0, 6:] = True
        return vals, miss, None
    z = zscore_columns(values, missing)
    g, cos = build_beat_graph(z, positions, k, tau)
    w = g.adjacency()
    vals[:, 0] = pagerank(g)
    vals[:, 1] = weighted_clustering(g)
    vals[:, 2] = np.asarray(g.symmetric().sum(axis=1)).ravel()
    vals[:, 3] = np.asarray(w.sum(axis=0)).ravel()
    vals[:, 4] = np.asarray(w.sum(axis=1)).ravel()
    vals[:, 5] = np.bincount(g.dst, minlength=n)
    for i in range(n):
        nbrs = g.dst[g.src == i]
        if nbrs.size:
            vals[i, 6] = cos[i, nbrs].mean()
        else:
            miss[i, 6] = True
    idx = np.arange(n)
    vals[1:, 7] = cos[idx[1:], idx[:-1]]
    miss[0, 7] = True
    vals[:-1, 8] = cos[idx[:-1], idx[1:]]
    miss[-1, 8] = True
    return vals, miss, g


# --------------------------------------------------------------------------
# Lagged copies


def lag_block(values: np.ndarray, missing: np.ndarray, columns: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Lag-1 and lag-2 copies of ``LAG_SOURCES`` from earlier rows of the same record."""
    src = [list(columns).index(c) for c in LAG_SOURCES]
    n = values.shape[0]
    blocks_v, blocks_m = [], []
    for lag in LAGS:
        v = np.zeros((n, len(src)))
        m = np.ones((n, len(src)), dtype=bool)
        if n > lag:
            v[lag:] = values[:-lag, src]
            m[lag:] = missing[:-lag, src]
        blocks_v.append(v)
        blocks_m.append(m)
    return np.hstack(blocks_v), np.hstack(blocks_m)


# --------------------------------------------------------------------------
# Assembly


def _record_groups(fm: FeatureMatrix) -> dict[str, np.ndarray]:
    groups: dict[str, list[int]] = {}
    for i, ref in enumerate(fm.beat_refs):
        groups.setdefault(ref.record_id, []).append(i)
    out = {}
    for rid, rows in groups.items():
        rows = np.asarray(rows)
        order = np.argsort([fm.beat_refs[i].beat_index for i in rows], kind="stable")
        out[rid] = rows[order]
    return out


def augment_matrix(
    base: FeatureMatrix,
    rr_by_record: dict[str, np.ndarray],
    k: int = GRAPH_K,
    tau: float = GRAPH_TAU,
    edge_dir: str | Path | None = None,
) -> FeatureMatrix:
    """Append HRV, graph and lag columns; rows keep their order."""
    if base.columns != BASE_REGISTRY.names:
        raise ValueError("augmentation expects the 88-column base layout")
    n = base.n_rows
    extra = len(AUG_REGISTRY) - len(BASE_REGISTRY)
    vals = np.zeros((n, extra))
    miss = np.zeros((n, extra), dtype=bool)
    h, g = len(HRV_NAMES), len(GRAPH_NAMES)
    for rid, rows in _record_groups(base).items():
        beats = np.array([base.beat_refs[i].beat_index for i in rows])
        rv, rm = hrv_block(rr_by_record[rid], beats)
        gv, gm, graph = graph_block(base.values[rows], base.missing[rows], beats, k, tau)
        lv, lm = lag_block(base.values[rows], base.missing[rows], base.columns)
        vals[rows] = np.hstack([rv, gv, lv])
        miss[rows] = np.hstack([rm, gm, lm])
        if edge_dir is not None and graph is not None:
            graph.to_edge_csv(Path(edge_dir) / f"{rid}_edges.csv")
        logger.debug("augmented record %s: %d beats", rid, len(rows))
    assert vals.shape[1] == h + g + len(LAG_SOURCES) * len(LAGS)
    return FeatureMatrix(
        AUG_REGISTRY.names,
        np.hstack([base.values, vals]),
        np.hstack([base.missing, miss]),
        list(base.beat_refs),
        list(base.labels),
        AUG_REGISTRY_VERSION,
        dict(base.meta),
    )
