import itertools

import numpy as np
import pytest

from ecglin import dsp, rpeaks, segmentation as seg, synthetic, wfdb_io

FS = 360.0


def test_loss_pure_tone_in_band():
    t = np.arange(360) / FS
    loss = seg.composite_loss(np.sin(2 * np.pi * 10 * t), FS)
    assert 1 - loss.energy_term > 0.9
    assert loss.energy_term < 0.1


def test_loss_uniform_noise_entropy():
    x = np.random.default_rng(0).uniform(-1, 1, size=100_000)
    h = seg.composite_loss(x, FS).entropy_term
    assert abs(h - np.log(32)) < 0.1


def test_length_penalty_values():
    assert seg.length_penalty(2000) == pytest.approx(25.0)
    assert seg.length_penalty(900) == 0.0
    assert seg.length_penalty(150) == pytest.approx(1.0)
    x = np.random.default_rng(1).normal(size=int(2.0 * FS))
    assert seg.composite_loss(x, FS).length_penalty == pytest.approx(25.0)


def test_loss_total_is_weighted_sum():
    x = np.random.default_rng(2).normal(size=300)
    l = seg.composite_loss(x, FS)
    assert l.total == pytest.approx(0.5 * l.entropy_term + 0.3 * l.snr_term + 0.2 * l.energy_term + l.length_penalty)


def test_loss_zero_segment_degenerate():
    l = seg.composite_loss(np.zeros(200), FS)
    assert l.degenerate
    assert l.entropy_term == 0.0 and l.snr_term == 1.0 and l.energy_term == 1.0


def test_loss_short_segment_rejected():
    with pytest.raises(ValueError):
        seg.composite_loss(np.ones(31), FS)


def test_window_params_validation():
    with pytest.raises(ValueError):
        seg.WindowParams(0.0, 0.5)
    with pytest.raises(ValueError):
        seg.WindowParams(0.5, 1.2)


def test_grid_contains_target_window():
    assert any(round(a, 3) == 0.233 for a in seg.ALPHA_GRID)
    assert any(round(b, 3) == 0.367 for b in seg.BETA_GRID)
    assert round(seg.DEFAULT_ALPHA, 3) == 0.233 and round(seg.DEFAULT_BETA, 3) == 0.367
    assert round(seg.ALPHA_GRID[0], 3) == 0.100
    assert min(seg.ALPHA_GRID) <= 0.2 and max(seg.ALPHA_GRID) >= 0.6
    assert min(seg.BETA_GRID) <= 0.4 and max(seg.BETA_GRID) >= 0.8


def test_constant_surface_gives_grid_median():
    r = np.arange(1, 13) * 288
    flat = np.ones(14 * 288)  # every cell has the same (degenerate) loss
    res = seg.grid_search_window(flat, FS, r)
    assert np.ptp(res.surface) == 0
    a, b, _ = res.per_beat_optima()
    mid_a, mid_b = seg.ALPHA_GRID[4], seg.BETA_GRID[4]
    assert np.all(a == mid_a) and np.all(b == mid_b)
    opt = res.robust()
    assert (opt.alpha, opt.beta) == (mid_a, mid_b)


def test_small_grid_matches_bruteforce():
    rec = synthetic.make_record(synthetic.SyntheticSpec(seconds=20, seed=3))
    x = rec.signal[:, 0]
    r = np.array([a.sample for a in rec.annotations])
    alphas, betas = [0.1, 0.3, 0.5], [0.3, 0.5, 0.7]
    res = seg.grid_search_window(x, FS, r, alphas, betas)
    a_opt, b_opt, l_opt = res.per_beat_optima()
    d = np.diff(r)
    med = np.median(d)
    for k, rk in enumerate(r):
        rp = d[k - 1] if k > 0 else med
        rn = d[k] if k < len(d) else med
        best = None
        for a, b in itertools.product(alphas, betas):
            s, e = max(0, int(rk - round(a * rp))), min(len(x), int(rk + round(b * rn)))
            v = seg.composite_loss(x[s:e], FS).total
            if best is None or v < best[0] - 1e-12:
                best = (v, a, b)
        assert l_opt[k] == pytest.approx(best[0], abs=1e-12)
        assert (a_opt[k], b_opt[k]) == (best[1], best[2])


def test_entropy_only_weights_minimise_entropy():
    rec = synthetic.make_record(synthetic.SyntheticSpec(seconds=15, seed=4))
    x = rec.signal[:, 0]
    r = np.array([a.sample for a in rec.annotations])
    grid = np.linspace(0.2, 0.6, 5)
    res = seg.grid_search_window(x, FS, r, grid, grid, weights=(1, 0, 0))
    rp, rn = seg.rr_context(r)
    for k, rk in enumerate(r):
        hs = np.full((5, 5), np.inf)
        for i, a in enumerate(grid):
            for j, b in enumerate(grid):
                s, e = max(0, int(rk - round(a * rp[k]))), min(len(x), int(rk + round(b * rn[k])))
                if e - s >= 32:
                    hs[i, j] = seg.histogram_entropy(x[s:e]) + seg.length_penalty(1000 * (e - s) / FS)
        assert res.beat_losses[k].min() == pytest.approx(hs.min(), abs=1e-12)


def test_robust_optimum_top_fraction():
    a = np.array([0.1, 0.2, 0.3, 0.4] * 10)
    b = np.array([0.5, 0.6, 0.7, 0.8] * 10)
    l = np.arange(40, dtype=float)
    opt = seg.robust_optimum(a, b, l, 0.05)  # top 2 beats: indices 0, 1
    assert (opt.alpha, opt.beta) == (0.1, 0.5)
    one = seg.GridSearchResult(np.array([0.2]), np.array([0.5]), np.ones((5, 1, 1)), np.arange(5))
    assert (one.robust().alpha, one.robust().beta) == (0.2, 0.5)


def test_iqr_equal_lengths_prunes_nothing():
    assert seg.iqr_keep(np.full(20, 300)).all()
    mask = seg.iqr_keep(np.r_[np.full(20, 300), 1200])
    assert mask[:20].all() and not mask[-1]
    assert seg.iqr_keep(np.array([1, 1000])).all()


def test_segment_record_equal_rr():
    rr = 300
    r = np.arange(2, 30) * rr
    x = np.random.default_rng(0).normal(size=(32 * rr, 2))
    out = seg.segment_record(x, FS, r, seg.WindowParams(0.3, 0.5), target_len=324)
    assert len(out) == len(r)
    assert all(s.samples.shape == (324, 2) for s in out)
    assert all(not s.padded for s in out)


def test_segment_900ms_resampled_to_target():
    rr = 324  # 900 ms at 360 Hz; alpha = beta = 0.5 gives a 900 ms window
    r = np.array([1000, 1000 + rr, 1000 + 2 * rr])
    x = np.random.default_rng(0).normal(size=(3000, 1))
    for target in (324, 256, 500):
        out = seg.segment_record(x, FS, r, seg.WindowParams(0.5, 0.5), target_len=target)
        assert all(s.raw_length == rr for s in out)
        assert all(s.samples.shape == (target, 1) for s in out)
    with pytest.raises(ValueError):
        seg.segment_record(x, FS, r, target_len=63)


def test_edge_windows_padded_and_flagged():
    r = np.array([10, 300, 600, 890])
    x = np.arange(900, dtype=float)[:, None]
    out = seg.segment_record(x, FS, r, seg.WindowParams(0.5, 0.5), target_len=64)
    assert out[0].padded and out[-1].padded
    assert not out[1].padded


def test_labels_from_nearest_annotation():
    anns = [wfdb_io.Annotation(100, "N"), wfdb_io.Annotation(395, "+"), wfdb_io.Annotation(400, "V"),
            wfdb_io.Annotation(1000, "A")]
    labels = seg.label_beats(np.array([110, 405, 700, 1020]), anns, FS)
    assert labels == [("N", "N"), ("V", "V"), (None, None), ("S", "A")]


def test_segments_on_synthetic_record():
    rec = synthetic.make_record(synthetic.SyntheticSpec(seconds=60, seed=8))
    y = dsp.filtfilt(dsp.design_butterworth_bandpass(4, 0.5, 40, FS), rec.signal)
    peaks, _ = rpeaks.detect_rpeaks(y[:, 0], FS)
    out = seg.segment_record(y, FS, peaks, annotations=rec.annotations, record_id="x")
    assert len(out) >= 0.9 * len(rec.annotations)
    truth = {a.sample: wfdb_io.map_to_aami(a.symbol) for a in rec.annotations}
    labelled = [s for s in out if s.label is not None]
    assert len(labelled) >= 0.95 * len(out)
    for s in labelled:
        nearest = min(truth, key=lambda t: abs(t - s.r_peak))
        assert truth[nearest] == s.label
    assert all(abs(s.samples[s.r_index, 0]) > 0.3 for s in labelled)
