"""Synthetic two-lead ECG records with AAMI-class beats.

Used as hermetic fixtures and for runs without the real databases. Beats are
sums of Gaussian waves (P, Q, R, S, T); ectopic classes change timing and
morphology the way their physiology suggests (premature atrial beats keep a
narrow QRS, ventricular beats are wide with a discordant T, fusion beats
blend the two, paced beats carry a pacing spike).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import wfdb_io

logger = logging.getLogger(__name__)

# (amplitude mV, centre s relative to R, width s) per wave, per lead
_WAVES = {
    "N": (
        [(0.15, -0.20, 0.025), (-0.10, -0.028, 0.009), (1.20, 0.0, 0.010), (-0.25, 0.028, 0.010), (0.30, 0.26, 0.045)],
        [(0.08, -0.20, 0.025), (0.20, -0.015, 0.009), (-0.70, 0.020, 0.013), (-0.10, 0.26, 0.045)],
    ),
    "S": (
        [(-0.08, -0.16, 0.020), (-0.10, -0.028, 0.009), (1.10, 0.0, 0.010), (-0.25, 0.028, 0.010), (0.25, 0.24, 0.045)],
        [(0.12, -0.16, 0.020), (0.20, -0.015, 0.009), (-0.70, 0.020, 0.013), (-0.08, 0.24, 0.045)],
    ),
    "V": (
        [(1.60, 0.0, 0.030), (-0.50, 0.065, 0.025), (-0.45, 0.30, 0.060)],
        [(-0.60, -0.02, 0.025), (1.10, 0.045, 0.030), (0.40, 0.30, 0.060)],
    ),
    "Q": (
        [(2.50, -0.045, 0.0015), (0.90, 0.0, 0.028), (-0.60, 0.060, 0.025), (-0.30, 0.30, 0.060)],
        [(-1.50, -0.045, 0.0015), (-0.80, 0.020, 0.030), (0.30, 0.30, 0.060)],
    ),
}

_SYMBOL = {"N": "N", "S": "A", "V": "V", "F": "F", "Q": "/"}
# (RR before the beat, RR after the beat) as multiples of the sinus RR
_TIMING = {"N": (1.0, 1.0), "S": (0.68, 1.12), "V": (0.62, 1.38), "F": (0.92, 1.08), "Q": (1.0, 1.0)}


def beat_waves(cls: str, rng: np.random.Generator | None = None) -> tuple[list, list]:
    """Wave parameters for one beat, jittered when ``rng`` is given."""
    if cls == "F":
        n0, n1 = _WAVES["N"]
        v0, v1 = _WAVES["V"]
        lead0 = [(0.5 * a, c, w) for a, c, w in n0 + v0]
        lead1 = [(0.5 * a, c, w) for a, c, w in n1 + v1]
    else:
        lead0, lead1 = _WAVES[cls]
    if rng is None:
        return list(lead0), list(lead1)
    scale = rng.normal(1.0, 0.08)
    stretch = rng.normal(1.0, 0.05)

    def jitter(waves):
        return [(a * scale * rng.normal(1.0, 0.05), c * stretch, w * stretch * rng.normal(1.0, 0.04)) for a, c, w in waves]

    return jitter(lead0), jitter(lead1)


def render_waves(n: int, fs: float, r_sample: float, waves, out: np.ndarray) -> None:
    for amp, centre, width in waves:
        mu = r_sample + centre * fs
        sd = max(width * fs, 0.3)
        lo = max(0, int(mu - 6 * sd))
        hi = min(n, int(mu + 6 * sd) + 2)
        if lo >= hi:
            continue
        t = np.arange(lo, hi)
        out[lo:hi] += amp * np.exp(-((t - mu) ** 2) / (2 * sd**2))


@dataclass
class SyntheticSpec:
    seconds: float = 60.0
    fs: float = 360.0
    mean_rr: float = 0.8
    class_probs: tuple[float, float, float, float, float] = (0.6, 0.12, 0.12, 0.08, 0.08)
    noise_mv: float = 0.02
    wander_mv: float = 0.1
    seed: int = 0


def make_record(spec: SyntheticSpec, record_id: str = "syn") -> wfdb_io.EcgRecord:
    rng = np.random.default_rng(spec.seed)
    fs = spec.fs
    n = int(round(spec.seconds * fs))
    sig = np.zeros((n, 2))
    classes = np.array(["N", "S", "V", "F", "Q"])
    probs = np.asarray(spec.class_probs, dtype=float)
    probs = probs / probs.sum()

    t = 0.5 + rng.uniform(0, 0.3)
    anns: list[wfdb_io.Annotation] = []
    pending_post = 1.0
    while True:
        cls = str(rng.choice(classes, p=probs))
        pre, post = _TIMING[cls]
        sinus = spec.mean_rr * (1 + 0.05 * np.sin(2 * np.pi * 0.1 * t) + 0.03 * np.sin(2 * np.pi * 0.25 * t))
        sinus *= rng.normal(1.0, 0.015)
        t += sinus * pre * pending_post
        pending_post = post
        if t > spec.seconds - 0.6:
            break
        r = t * fs
        w0, w1 = beat_waves(cls, rng)
        render_waves(n, fs, r, w0, sig[:, 0])
        render_waves(n, fs, r, w1, sig[:, 1])
        anns.append(wfdb_io.Annotation(int(round(r)), _SYMBOL[cls]))

    tt = np.arange(n) / fs
    wander = spec.wander_mv * np.sin(2 * np.pi * 0.15 * tt + rng.uniform(0, 2 * np.pi))
    sig += wander[:, None]
    sig += rng.normal(0, spec.noise_mv, size=sig.shape)
    channels = [wfdb_io.ChannelInfo("MLII", 200.0, 1024), wfdb_io.ChannelInfo("V1", 200.0, 1024)]
    return wfdb_io.EcgRecord(record_id, fs, channels, sig, anns)


def write_synthetic_record(directory: str | Path, record: wfdb_io.EcgRecord) -> Path:
    raw = np.clip(np.round(record.signal * 200.0) + 1024, -2048, 2047).astype(np.int64)
    return wfdb_io.write_record(
        directory,
        record.record_id,
        raw,
        record.fs,
        [200.0, 200.0],
        [1024, 1024],
        record.channel_names,
        annotations=[(a.sample, a.symbol) for a in record.annotations],
    )


def write_corpus(
    directory: str | Path, n_records: int = 6, seconds: float = 60.0, seed: int = 0, fs: float = 360.0
) -> list[str]:
    """Write ``n_records`` WFDB records and return their names."""
    rng = np.random.default_rng(seed)
    names = []
    for i in range(n_records):
        probs = rng.dirichlet([6, 1.5, 1.5, 1.0, 1.0])
        spec = SyntheticSpec(
            seconds=seconds,
            fs=fs,
            mean_rr=float(rng.uniform(0.65, 1.0)),
            class_probs=tuple(probs),
            seed=int(rng.integers(2**31)),
        )
        name = f"s{i:03d}"
        write_synthetic_record(directory, make_record(spec, name))
        names.append(name)
    (Path(directory) / "RECORDS").write_text("\n".join(names) + "\n")
    return names


def bump_train(seconds: float, fs: float, rate_hz: float = 1.0, width_s: float = 0.012, amp=1.0) -> np.ndarray:
    """Gaussian QRS-like bumps at a fixed rate; ``amp`` may be a callable of time."""
    n = int(round(seconds * fs))
    x = np.zeros(n)
    for k in range(int(seconds * rate_hz)):
        tk = (k + 0.5) / rate_hz
        a = amp(tk) if callable(amp) else amp
        render_waves(n, fs, tk * fs, [(a, 0.0, width_s)], x)
    return x
