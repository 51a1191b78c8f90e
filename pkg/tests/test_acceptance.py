"""Acceptance checks, one test and one printed status line per criterion.

Criteria needing the MIT-BIH or INCART databases are skipped unless
``MITDB_DIR`` (or ``ECG_DATA_DIR``) and ``INCART_DIR`` point at local copies.
Run ``python tests/test_acceptance.py`` for just the status lines.
"""
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ecglin import augmentation as A, dsp, features as F, models as M, refinement as R, segmentation as S, synthetic
from ecglin import pipeline as P

RESULTS: dict[int, tuple[str, str]] = {}

TITLES = {
    1: "dimension ledger 88 -> 197 -> 202",
    2: "segment count 1173 +/- 15%",
    3: "linear models F1/acc >= 0.94, tree trails by >= 3 points",
    4: "5-fold CI separation, linear SVC vs tree",
    5: "resource envelope and efficiency score",
    6: "oracle equivalences",
    7: "property suites and run determinism",
    8: "grid-search harness",
    9: "INCART stretch run (optional)",
}


def _report(n: int, status: str, detail: str) -> None:
    RESULTS[n] = (status, detail)
    line = f"criterion {n} [{status}] {TITLES[n]}: {detail}"
    capman = _CAPTURE.get("capsys")
    if capman is not None:
        with capman.disabled():
            print("\n" + line)
    else:
        print(line)


_CAPTURE: dict = {}


@pytest.fixture(autouse=True)
def _expose_capsys(capsys):
    _CAPTURE["capsys"] = capsys
    yield
    _CAPTURE.pop("capsys", None)


def _check(n: int, checks: list[tuple[str, bool]]) -> None:
    failed = [name for name, ok in checks if not ok]
    if failed:
        _report(n, "FAIL", "failed: " + "; ".join(failed))
    else:
        _report(n, "PASS", "; ".join(name for name, _ in checks))
    assert not failed, failed


def _data_dir(*env, probe) -> Path | None:
    for var in env:
        v = os.environ.get(var)
        if v and (Path(v) / probe).exists():
            return Path(v)
    return None


MITDB = _data_dir("MITDB_DIR", "ECG_DATA_DIR", probe="100.hea")
INCART = _data_dir("INCART_DIR", probe="I01.hea")


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("acc_corpus")
    synthetic.write_corpus(d, n_records=4, seconds=80, seed=21)
    out = tmp_path_factory.mktemp("acc_run")
    cfg = P.PipelineConfig(data_dir=str(d), record_seconds=None, output_dir=str(out))
    return cfg, P.run_pipeline(cfg), out


_MIT: dict = {}


def mitdb_run(tmp_path_factory):
    """One full MIT-BIH run shared by criteria 1 to 5 (balanced data split 80/20)."""
    if "run" not in _MIT:
        out = tmp_path_factory.mktemp("mitdb_run")
        cfg = P.PipelineConfig(data_dir=str(MITDB), dataset="mitbih", output_dir=str(out)).with_overrides(
            {"balance.mode": "balance_then_split"})
        t0 = time.perf_counter()
        m = P.run_pipeline(cfg)
        _MIT["run"] = (cfg, m, out, time.perf_counter() - t0)
    return _MIT["run"]


# ---- 1 ------------------------------------------------------------------------


def test_criterion_1_dimensions(synth_run, tmp_path_factory):
    _, m, _ = synth_run
    checks = [
        ("registries 88/197/202", (len(F.BASE_REGISTRY), len(A.AUG_REGISTRY), len(R.FINAL_REGISTRY)) == (88, 197, 202)),
        ("synthetic run 88/197/202", (m["dimensions"]["base"], m["dimensions"]["augmented"],
                                      m["dimensions"]["final"]) == (88, 197, 202)),
    ]
    if MITDB is not None:
        _, mm, _, secs = mitdb_run(tmp_path_factory)
        d = mm["dimensions"]
        checks.append(("MIT-BIH run 88/197/202", (d["base"], d["augmented"], d["final"]) == (88, 197, 202)))
        checks.append((f"MIT-BIH run {secs:.0f} s <= 900 s", secs <= 900))
    else:
        checks.append(("MIT-BIH run not attempted (no data)", True))
    _check(1, checks)


# ---- 2 to 4: need MIT-BIH -------------------------------------------------------------


def _need_mitdb(n):
    if MITDB is None:
        _report(n, "SKIP", "MIT-BIH data not available (set MITDB_DIR)")
        pytest.skip("MIT-BIH data not available")


def test_criterion_2_segment_count(tmp_path_factory):
    _need_mitdb(2)
    _, m, _, _ = mitdb_run(tmp_path_factory)
    n = m["segments"]
    _check(2, [(f"{n} segments within [997, 1349]", abs(n - 1173) <= 0.15 * 1173)])


def test_criterion_3_accuracy(tmp_path_factory):
    _need_mitdb(3)
    _, m, _, _ = mitdb_run(tmp_path_factory)
    r = m["models"]
    checks = []
    for k in ("linear_svc", "logistic_regression"):
        checks.append((f"{k} F1 {r[k]['f1_weighted']:.4f} >= 0.94", r[k]["f1_weighted"] >= 0.94))
        checks.append((f"{k} acc {r[k]['acc']:.4f} >= 0.94", r[k]["acc"] >= 0.94))
    gap = min(r["linear_svc"]["f1_weighted"], r["logistic_regression"]["f1_weighted"]) - r["decision_tree"]["f1_weighted"]
    checks.append((f"tree F1 gap {100 * gap:.2f} points >= 3", gap >= 0.03))
    _check(3, checks)


def test_criterion_4_ci_separation(tmp_path_factory):
    _need_mitdb(4)
    _, m, _, _ = mitdb_run(tmp_path_factory)
    cv = m["cv"]
    if cv is None or "skipped" in cv:
        _check(4, [("cross-validation ran", False)])
    svc, tree = cv["linear_svc"], cv["decision_tree"]
    _check(4, [(f"SVC [{svc['ci_low']:.4f}, {svc['ci_high']:.4f}] vs tree [{tree['ci_low']:.4f}, {tree['ci_high']:.4f}]",
                svc["ci_low"] > tree["ci_high"] or tree["ci_low"] > svc["ci_high"])])


# ---- 5 ------------------------------------------------------------------------


def test_criterion_5_resources(synth_run, tmp_path):
    _, _, out = synth_run
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2000, 202))
    y = [("N", "S", "V", "F", "Q")[i] for i in rng.integers(0, 5, 2000)]
    checks = []
    for kind in ("linear_svc", "logistic_regression"):
        m, _ = M.train_model(kind, x, y)
        size = M.save_model(m, tmp_path / f"{kind}.bin")
        lat = M.time_inference(m, x[:1000], repeats=30)
        checks.append((f"{kind} weights {size / 1024:.2f} KB <= 16", size <= 16 * 1024))
        checks.append((f"{kind} single-row {1e3 * lat.single_row_ms:.2f} us <= 50", lat.single_row_ms <= 0.05))
        checks.append((f"{kind} batched {1e3 * lat.batched_ms_per_sample:.3f} us <= 5",
                       lat.batched_ms_per_sample <= 0.005))
    run_sizes = [(out / "models" / f"{k}.bin").stat().st_size for k in ("linear_svc", "logistic_regression")]
    checks.append((f"pipeline linear model files {max(run_sizes)} B <= 16 KB", max(run_sizes) <= 16 * 1024))
    e = M.efficiency_score(0.9843, 0.9844, 0.177, 4.62e-4, 8.54)
    checks.append((f"efficiency spot check {e:.4f} vs 0.553", abs(e - 0.553) <= 0.01))
    _check(5, checks)


# ---- 6 ------------------------------------------------------------------------


def _naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.abs(np.exp(-2j * np.pi * np.outer(k, k) / n) @ x)


def test_criterion_6_oracles():
    rng = np.random.default_rng(6)
    checks = []

    err = 0.0
    for n in (2, 3, 7, 64, 127, 128):
        x = rng.normal(size=n)
        ref = _naive_dft(x)
        err = max(err, np.max(np.abs(dsp.dft_magnitudes(x) - ref)) / ref.max())
    checks.append((f"DFT rel err {err:.1e}", err <= 1e-9))

    err = 0.0
    for n in range(2, 11):
        z = rng.normal(size=(n, 6))
        g, _ = A.build_beat_graph(A.zscore_columns(z), np.arange(n), k=3, tau=2.0)
        pr = A.pagerank(g)
        mt = A.transition_matrix(g).toarray()
        dangling = mt.sum(axis=0) == 0
        mt[:, dangling] = 1.0 / n
        d = A.DAMPING
        dense = np.linalg.solve(np.eye(n) - d * mt, np.full(n, 1 - d))
        dense *= n / dense.sum()
        err = max(err, np.max(np.abs(pr - dense)))
    checks.append((f"PageRank vs dense solve {err:.1e}", err <= 1e-8))

    err = 0.0
    for n in range(3, 9):
        z = rng.normal(size=(n, 5))
        g, _ = A.build_beat_graph(A.zscore_columns(z), np.arange(n), k=3, tau=3.0)
        w = g.symmetric()
        a = (w > 0).astype(float)
        c = A.weighted_clustering(g)
        for i in range(n):
            s, k = w[i].sum(), a[i].sum()
            tri = sum((w[i, j] + w[i, h]) / 2 * a[i, j] * a[i, h] * a[j, h]
                      for j in range(n) for h in range(n) if j != h)
            ref = tri / (s * (k - 1)) if k >= 2 else 0.0
            err = max(err, abs(c[i] - ref))
    checks.append((f"Barrat vs triple enumeration {err:.1e}", err <= 1e-12))

    ok = True
    for _ in range(20):
        n = int(rng.integers(4, 31))
        x = rng.normal(size=(n, 3)).round(1)
        yi = rng.integers(0, 3, n)
        onehot = np.eye(3)[yi]
        sp = M.best_split(x, onehot)
        best = None
        for f in range(3):
            vals = np.unique(x[:, f])
            for t in (vals[:-1] + vals[1:]) / 2:
                left = x[:, f] <= t
                imp = (left.sum() * M.gini(onehot[left].sum(0))[0] + (~left).sum() * M.gini(onehot[~left].sum(0))[0]) / n
                if best is None or imp < best[0] - 1e-12:
                    best = (imp, f, t)
        if best is None:
            ok &= sp is None
        else:
            ok &= sp is not None and sp.feature == best[1] and abs(sp.threshold - best[2]) < 1e-12
    checks.append(("CART root split vs exhaustive search", bool(ok)))

    err = 0.0
    xa = np.c_[rng.normal(size=(40, 4)), np.ones(40)]
    ypm = np.where(rng.random(40) < 0.5, 1.0, -1.0)
    s = rng.uniform(0.5, 2, 40)
    theta = rng.normal(size=5) * 0.3
    for fun in (M.logistic_objective, M.squared_hinge_objective):
        _, g = fun(theta, xa, ypm, s, 0.7)
        fd = np.array([(fun(theta + h, xa, ypm, s, 0.7)[0] - fun(theta - h, xa, ypm, s, 0.7)[0]) / 2e-6
                       for h in np.eye(5) * 1e-6])
        err = max(err, np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)))
    checks.append((f"loss gradients vs central differences {err:.1e}", err <= 1e-5))

    x = rng.normal(size=(120, 12)) @ rng.normal(size=(12, 12))
    p = R.fit_pca(x, 5)
    lam, vec = np.linalg.eigh(np.cov(x, rowvar=False))
    lam, vec = lam[::-1][:5], vec[:, ::-1][:, :5]
    align = np.abs(np.sum(p.basis * vec.T, axis=1))
    ok = np.allclose(p.variance_ratios * np.trace(np.cov(x, rowvar=False)), lam, rtol=1e-9) and np.allclose(align, 1, atol=1e-8)
    checks.append(("PCA vs dense eigensolve up to sign", bool(ok)))
    _check(6, checks)


# ---- 7 ------------------------------------------------------------------------


def test_criterion_7_properties(synth_run, tmp_path):
    rng = np.random.default_rng(7)
    fs = 360.0
    checks = []
    bp = dsp.design_butterworth_bandpass(4, 0.5, 40.0, fs)
    t = np.arange(int(20 * fs)) / fs
    lags = []
    for f in (2.0, 10.0, 25.0):
        x = np.sin(2 * np.pi * f * t)
        y = dsp.filtfilt(bp, x)
        mid = slice(len(t) // 4, 3 * len(t) // 4)
        xc = np.correlate(y[mid], x[mid], mode="full")
        lags.append(int(np.argmax(xc)) - (len(x[mid]) - 1))
    checks.append((f"filtfilt lags {lags}", lags == [0, 0, 0]))

    poles = max(np.max(np.abs(dsp.design_butterworth_bandpass(o, 0.5, 40, fs).poles())) for o in (2, 4, 6, 8))
    checks.append((f"Butterworth max |pole| {poles:.4f} < 1", poles < 1))

    err = 0.0
    for _ in range(10):
        x = rng.normal(size=256)
        e = dsp.wavelet_packet_energies(x, normalize=False)
        err = max(err, abs(e.sum() - np.sum(x**2)) / np.sum(x**2))
    checks.append((f"wavelet-packet energy rel err {err:.1e}", err <= 1e-6))

    y = rng.integers(0, 5, 1000)
    mis = [R.mutual_information(rng.normal(size=1000), y) for _ in range(20)]
    self_mi = R.mutual_information(y.astype(float), y)
    checks.append(("MI >= 0", min(mis) >= 0))
    checks.append((f"I(X;X) {self_mi:.6f} = H(X) {R.entropy_nats(y):.6f}", abs(self_mi - R.entropy_nats(y)) < 1e-9))

    x = np.vstack([rng.normal(0, 1, (60, 4)), rng.normal(4, 1, (9, 4))])
    lab = ["N"] * 60 + ["V"] * 9
    xs, ys, parents, _ = R.smote(x, lab, seed=3)
    res = 0.0
    for i in np.nonzero(parents[:, 0] >= 0)[0]:
        a, b = x[parents[i, 0]], x[parents[i, 1]]
        d = b - a
        tt = np.clip(np.dot(xs[i] - a, d) / np.dot(d, d), 0, 1)
        res = max(res, np.linalg.norm(a + tt * d - xs[i]))
    checks.append((f"SMOTE convexity residual {res:.1e}", res < 1e-9))

    xr = rng.normal(size=(300, 202))
    yr = [("N", "S", "V", "F", "Q")[i] for i in rng.integers(0, 5, 300)]
    same = True
    for kind in M.MODEL_KINDS:
        m, _ = M.train_model(kind, xr, yr)
        M.save_model(m, tmp_path / "m.bin")
        same &= M.load_model(tmp_path / "m.bin").predict(xr) == m.predict(xr)
    checks.append(("serialization round trip predictions", bool(same)))

    cfg, _, out = synth_run
    P.run_pipeline(cfg.with_overrides({"output_dir": str(tmp_path / "rerun")}))
    checks.append(("rerun metrics.json bitwise identical",
                   (tmp_path / "rerun" / "metrics.json").read_bytes() == (out / "metrics.json").read_bytes()))
    _check(7, checks)


# ---- 8 ------------------------------------------------------------------------


def test_criterion_8_grid_harness(synth_run, tmp_path):
    cfg, _, _ = synth_run
    opt = P.run_grid_search(cfg.with_overrides({"output_dir": str(tmp_path)}))
    g = tmp_path / "grid_search"
    recomputed = P.robust_from_csv(g / "per_beat_optima.csv", cfg.segmentation.top_fraction)
    rows = [l for l in (g / "loss_surface.csv").read_text().splitlines() if l[0].isdigit()]
    checks = [
        (f"robust optimum ({opt.alpha:.4f}, {opt.beta:.4f}) equals recomputation", recomputed == opt),
        (f"{len(rows)} surface rows = grid cells", len(rows) == len(S.ALPHA_GRID) * len(S.BETA_GRID)),
        ("alpha 0.233 on grid", any(round(a, 3) == 0.233 for a in S.ALPHA_GRID)),
        ("beta 0.367 on grid", any(round(b, 3) == 0.367 for b in S.BETA_GRID)),
        ("default window is (0.233, 0.367)", (round(S.DEFAULT_ALPHA, 3), round(S.DEFAULT_BETA, 3)) == (0.233, 0.367)),
    ]
    _check(8, checks)


# ---- 9 ------------------------------------------------------------------------


def test_criterion_9_incart(tmp_path):
    if INCART is None:
        _report(9, "SKIP", "INCART data not available (set INCART_DIR); optional stretch run")
        pytest.skip("INCART data not available")
    cfg = P.PipelineConfig(data_dir=str(INCART), dataset="incart", record_seconds=None, fs_target=257.0,
                           output_dir=str(tmp_path), cross_validate=False, models=["logistic_regression"])
    m = P.run_pipeline(cfg)
    f1 = m["models"]["logistic_regression"]["f1_weighted"]
    _check(9, [(f"logistic regression F1 {f1:.4f} >= 0.93", f1 >= 0.93)])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
