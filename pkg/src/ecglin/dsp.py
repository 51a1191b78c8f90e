"""Signal-processing kernels shared by detection, segmentation and features."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import comb

import numpy as np
from scipy import signal as sps

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# IIR design and zero-phase filtering


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections, one ``(b0, b1, b2, a0, a1, a2)`` row each."""

    sections: np.ndarray

    def __post_init__(self):
        sos = np.atleast_2d(np.asarray(self.sections, dtype=float))
        if sos.shape[1] != 6:
            raise ValueError("each section needs 6 coefficients")
        if np.any(sos[:, 3] == 0):
            raise ValueError("section with a0 == 0")
        sos = sos / sos[:, 3:4]
        object.__setattr__(self, "sections", sos)

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    @property
    def order(self) -> int:
        """Sum of per-section orders (highest nonzero delay tap)."""
        total = 0
        for s in self.sections:
            taps = np.nonzero((s[:3] != 0) | (s[3:] != 0))[0]
            total += int(taps.max()) if taps.size else 0
        return total

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(s[3:6]) for s in self.sections])

    def is_stable(self) -> bool:
        p = self.poles()
        return bool(p.size == 0 or np.max(np.abs(p)) < 1.0)

    @classmethod
    def identity(cls) -> "BiquadCascade":
        return cls(np.array([[1.0, 0, 0, 1.0, 0, 0]]))


def _butter_lp_poles(order: int) -> np.ndarray:
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def design_butterworth_bandpass(order: int, f_low: float, f_high: float, fs: float) -> BiquadCascade:
    """Digital Butterworth band-pass via prewarped bilinear transform.

    ``order`` is the low-pass prototype order, so the cascade has ``order``
    biquads (band-pass transformation doubles the order).
    """
    if order not in (2, 4, 6, 8):
        raise ValueError(f"order must be one of 2, 4, 6, 8 (got {order})")
    if not 0 < f_low < f_high < fs / 2:
        raise ValueError(f"band edges must satisfy 0 < {f_low} < {f_high} < {fs / 2}")

    wl = 2 * fs * np.tan(np.pi * f_low / fs)
    wh = 2 * fs * np.tan(np.pi * f_high / fs)
    bw, w0 = wh - wl, np.sqrt(wl * wh)

    p_lp = _butter_lp_poles(order)
    half = p_lp * bw / 2
    disc = np.sqrt(half**2 - w0**2 + 0j)
    p_bp = np.concatenate([half + disc, half - disc])
    gain = bw**order

    fs2 = 2 * fs
    p_z = (fs2 + p_bp) / (fs2 - p_bp)
    gain = float(np.real(gain * fs2**order / np.prod(fs2 - p_bp)))

    # pair conjugate poles, one section per pair, zeros at z = +1 and z = -1
    upper = p_z[p_z.imag > 1e-12]
    real = np.sort(p_z[np.abs(p_z.imag) <= 1e-12].real)
    denoms = [np.real(np.poly([p, np.conj(p)])) for p in upper]
    denoms += [np.poly(real[i : i + 2]) for i in range(0, len(real), 2)]
    if len(denoms) != order:
        raise RuntimeError("pole pairing failed")
    denoms.sort(key=lambda a: np.max(np.abs(np.roots(a))))
    sos = np.zeros((order, 6))
    for i, a in enumerate(denoms):
        sos[i, :3] = [1.0, 0.0, -1.0]
        sos[i, 3:] = a
    sos[0, :3] *= gain
    cascade = BiquadCascade(sos)
    if not cascade.is_stable():
        raise RuntimeError("designed cascade is unstable")
    return cascade


def frequency_response(cascade: BiquadCascade, freqs: np.ndarray, fs: float) -> np.ndarray:
    """Complex response of the cascade at ``freqs`` (Hz)."""
    z1 = np.exp(-2j * np.pi * np.asarray(freqs, dtype=float) / fs)
    h = np.ones_like(z1)
    for b0, b1, b2, a0, a1, a2 in cascade.sections:
        h *= (b0 + b1 * z1 + b2 * z1**2) / (a0 + a1 * z1 + a2 * z1**2)
    return h


def filtfilt(cascade: BiquadCascade, x: np.ndarray) -> np.ndarray:
    """Forward-backward filtering along axis 0 with odd-reflection edge padding."""
    x = np.asarray(x, dtype=float)
    sos = cascade.sections
    padlen = 3 * cascade.order
    n = x.shape[0]
    if n <= padlen:
        raise ValueError(f"signal of {n} samples too short for padding of {padlen}")
    if padlen:
        left = 2 * x[0] - x[padlen:0:-1]
        right = 2 * x[-1] - x[-2 : -padlen - 2 : -1]
        ext = np.concatenate([left, x, right], axis=0)
    else:
        ext = x
    zi = sps.sosfilt_zi(sos)
    zi = zi.reshape(zi.shape + (1,) * (ext.ndim - 1))
    y, _ = sps.sosfilt(sos, ext, axis=0, zi=zi * ext[0])
    y = y[::-1]
    y, _ = sps.sosfilt(sos, y, axis=0, zi=zi * y[0])
    y = y[::-1]
    return y[padlen : padlen + n] if padlen else y


# --------------------------------------------------------------------------
# Resampling


def _ratio(fs_in: float, fs_out: float) -> tuple[int, int]:
    r = (Fraction(fs_out).limit_denominator(10**6) / Fraction(fs_in).limit_denominator(10**6))
    r = r.limit_denominator(10**4)
    return r.numerator, r.denominator


def _fit_length(y: np.ndarray, n_out: int) -> np.ndarray:
    if y.shape[0] > n_out:
        return y[:n_out]
    if y.shape[0] < n_out:
        pad = [(0, n_out - y.shape[0])] + [(0, 0)] * (y.ndim - 1)
        return np.pad(y, pad, mode="edge")
    return y


def resample_polyphase(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Rational-rate resampling along axis 0 with a Kaiser anti-aliasing FIR."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("empty input")
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    if fs_in == fs_out:
        return x.copy()
    up, down = _ratio(fs_in, fs_out)
    y = sps.resample_poly(x, up, down, axis=0, padtype="line")
    return _fit_length(y, int(round(x.shape[0] * fs_out / fs_in)))


def resample_to_length(x: np.ndarray, n_out: int) -> np.ndarray:
    """Polyphase-resample ``x`` (axis 0) to exactly ``n_out`` samples."""
    x = np.asarray(x, dtype=float)
    n_in = x.shape[0]
    if n_in == 0:
        raise ValueError("empty input")
    if n_in == n_out:
        return x.copy()
    f = Fraction(n_out, n_in)
    y = sps.resample_poly(x, f.numerator, f.denominator, axis=0, padtype="line")
    return _fit_length(y, n_out)


# --------------------------------------------------------------------------
# Spectra


def dft_magnitudes(x: np.ndarray) -> np.ndarray:
    """|X(k)| for k = 0..N-1."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    return np.abs(np.fft.fft(x, axis=0))


@dataclass(frozen=True)
class PsdEstimate:
    freqs: np.ndarray
    power: np.ndarray
    n_segments: int
    window_length: int

    def band_power(self, f_lo: float, f_hi: float) -> float:
        """Integrated density over ``[f_lo, f_hi)``."""
        m = (self.freqs >= f_lo) & (self.freqs < f_hi)
        df = self.freqs[1] - self.freqs[0] if len(self.freqs) > 1 else 0.0
        return float(np.sum(self.power[m]) * df)


def welch_psd(
    x: np.ndarray, fs: float, window_length: int, overlap: float = 0.5, detrend: bool = True
) -> PsdEstimate:
    """Averaged Hann-windowed periodograms, one-sided density (units²/Hz)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    if window_length < 2 or window_length > n:
        raise ValueError(f"window_length {window_length} incompatible with {n} samples")
    step = window_length - int(overlap * window_length)
    starts = np.arange(0, n - window_length + 1, step)
    win = sps.get_window("hann", window_length)
    segs = x[starts[:, None] + np.arange(window_length)]
    if detrend:
        segs = segs - segs.mean(axis=1, keepdims=True)
    spec = np.abs(np.fft.rfft(segs * win, axis=1)) ** 2 / (fs * np.sum(win**2))
    if window_length % 2:
        spec[:, 1:] *= 2
    else:
        spec[:, 1:-1] *= 2
    freqs = np.fft.rfftfreq(window_length, 1.0 / fs)
    return PsdEstimate(freqs, spec.mean(axis=0), len(starts), window_length)


# --------------------------------------------------------------------------
# Continuous wavelet transform


@lru_cache(maxsize=64)
def mexican_hat(scale: float) -> np.ndarray:
    """Odd-length, unit-L2-norm Mexican-hat kernel sampled on ±5 scales."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    half = max(1, int(np.ceil(5 * scale)))
    t = np.arange(-half, half + 1) / scale
    psi = (1 - t**2) * np.exp(-(t**2) / 2)
    psi = psi / np.linalg.norm(psi)
    psi.setflags(write=False)
    return psi


def cwt_mexican_hat(x: np.ndarray, scales) -> np.ndarray:
    """CWT rows per scale, zero-lag aligned with ``x`` (``same``-mode convolution)."""
    x = np.asarray(x, dtype=float)
    out = np.empty((len(scales), x.shape[0]))
    for i, s in enumerate(scales):
        out[i] = sps.fftconvolve(x, mexican_hat(float(s)), mode="same")
    return out


# --------------------------------------------------------------------------
# Daubechies wavelet packets


@lru_cache(maxsize=16)
def daubechies_filter(order: int) -> np.ndarray:
    """Minimum-phase Daubechies scaling filter with ``order`` vanishing moments.

    Obtained by spectral factorization; normalized so the taps sum to sqrt(2).
    """
    if not 1 <= order <= 10:
        raise ValueError("order must be in 1..10")
    # P(y) = sum_k C(N-1+k, k) y^k with y = sin^2(w/2)
    coeffs = [comb(order - 1 + k, k) for k in range(order)]
    y_roots = np.roots(coeffs[::-1]) if order > 1 else np.array([])
    z_roots = []
    for y in y_roots:
        # y = (2 - z - 1/z) / 4  =>  z^2 - (2 - 4y) z + 1 = 0
        r = np.roots([1.0, -(2 - 4 * y), 1.0])
        z_roots.append(r[np.argmin(np.abs(r))])
    h = np.real(np.poly(np.r_[-np.ones(order), np.array(z_roots, dtype=complex)]))
    h = h * np.sqrt(2) / h.sum()
    h = h[::-1] if abs(h[0]) < abs(h[-1]) else h
    h.setflags(write=False)
    return h


def _dwt_periodic(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    taps = len(lo)
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(taps)[None, :] + 1 - taps // 2) % n
    xs = x[idx]
    return xs @ lo, xs @ hi


def wavelet_packet_decompose(x: np.ndarray, wavelet_order: int = 4, levels: int = 3) -> list[np.ndarray]:
    """Full packet tree to ``levels``; leaves returned in frequency order.

    The input is zero-padded to a multiple of ``2**levels`` and filtered with
    periodic extension, which keeps the transform orthogonal.
    """
    x = np.asarray(x, dtype=float)
    h = daubechies_filter(wavelet_order)
    taps = len(h)
    if x.shape[0] < taps * 2**levels:
        raise ValueError(f"need at least {taps * 2 ** levels} samples, got {x.shape[0]}")
    block = 2**levels
    n = -(-x.shape[0] // block) * block
    x = np.pad(x, (0, n - x.shape[0]))
    g = h[::-1] * (-1.0) ** np.arange(taps)
    nodes = [x]
    for _ in range(levels):
        nxt = []
        for node in nodes:
            a, d = _dwt_periodic(node, h, g)
            nxt += [a, d]
        nodes = nxt
    gray = [p ^ (p >> 1) for p in range(len(nodes))]
    return [nodes[i] for i in gray]


def wavelet_packet_energies(
    x: np.ndarray, wavelet_order: int = 4, levels: int = 3, normalize: bool = True
) -> np.ndarray:
    """Leaf energies (sum of squared coefficients), normalized to sum to 1.

    A zero signal yields an all-zero vector; callers treat that as missing.
    """
    leaves = wavelet_packet_decompose(x, wavelet_order, levels)
    e = np.array([float(np.dot(c, c)) for c in leaves])
    if not normalize:
        return e
    total = e.sum()
    return e / total if total > 0 else np.zeros_like(e)
