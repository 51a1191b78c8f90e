import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from ecglin import dsp

FS = 360.0


@pytest.fixture(scope="module")
def bp():
    return dsp.design_butterworth_bandpass(4, 0.5, 40, FS)


def naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * kk * k / n)) for kk in k])


# ---- Butterworth -----------------------------------------------------------


def test_bandpass_sections_and_passband(bp):
    assert bp.n_sections == 4
    f = np.linspace(0, FS / 2, 4001)
    mag = np.abs(dsp.frequency_response(bp, f, FS))
    peak = mag.max()
    h20 = abs(dsp.frequency_response(bp, [20.0], FS)[0])
    assert 0.99 <= h20 / peak <= 1.0
    assert abs(dsp.frequency_response(bp, [0.0], FS)[0]) < 1e-3


def test_bandpass_matches_reference_design(bp):
    ref = sps.butter(4, [0.5, 40], btype="bandpass", fs=FS, output="sos")
    f = np.linspace(0.01, FS / 2 - 0.01, 2000)
    _, h_ref = sps.sosfreqz(ref, worN=f, fs=FS)
    np.testing.assert_allclose(np.abs(dsp.frequency_response(bp, f, FS)), np.abs(h_ref), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(
    order=st.sampled_from([2, 4, 6, 8]),
    lo=st.floats(0.05, 50),
    width=st.floats(1.0, 100),
    fs=st.sampled_from([128.0, 250.0, 257.0, 360.0, 500.0]),
)
def test_butterworth_always_stable(order, lo, width, fs):
    hi = min(lo + width, 0.45 * fs)
    if hi <= lo:
        return
    c = dsp.design_butterworth_bandpass(order, lo, hi, fs)
    assert c.n_sections == order
    assert np.all(np.abs(c.poles()) < 1)
    np.testing.assert_allclose(c.sections[:, 3], 1.0)


@pytest.mark.parametrize("args", [(4, 0, 40, 360), (4, 40, 30, 360), (4, 0.5, 180, 360), (3, 0.5, 40, 360)])
def test_bandpass_rejects_bad_params(args):
    with pytest.raises(ValueError):
        dsp.design_butterworth_bandpass(*args)


def test_cascade_rejects_zero_a0():
    with pytest.raises(ValueError):
        dsp.BiquadCascade(np.array([[1, 0, 0, 0, 0, 0]]))


# ---- filtfilt --------------------------------------------------------------


def test_filtfilt_identity():
    x = np.random.default_rng(0).normal(size=100)
    np.testing.assert_array_equal(dsp.filtfilt(dsp.BiquadCascade.identity(), x), x)


@pytest.mark.parametrize("freq", [2.0, 5.0, 10.0, 20.0, 30.0])
def test_filtfilt_zero_phase(bp, freq):
    t = np.arange(int(10 * FS)) / FS
    x = np.sin(2 * np.pi * freq * t)
    y = dsp.filtfilt(bp, x)
    mid = slice(int(2 * FS), int(8 * FS))
    xc = sps.correlate(y[mid], x[mid], mode="full")
    lag = np.argmax(xc) - (len(x[mid]) - 1)
    assert lag == 0


def test_filtfilt_magnitude_squared(bp):
    t = np.arange(int(20 * FS)) / FS
    x = np.sin(2 * np.pi * 45.0 * t)
    y = dsp.filtfilt(bp, x)
    mid = slice(int(5 * FS), int(15 * FS))
    gain = np.std(y[mid]) / np.std(x[mid])
    assert gain == pytest.approx(abs(dsp.frequency_response(bp, [45.0], FS)[0]) ** 2, rel=1e-3)


def test_filtfilt_kills_baseline_wander(bp):
    t = np.arange(int(120 * FS)) / FS
    x = np.sin(2 * np.pi * 0.1 * t)
    y = dsp.filtfilt(bp, x)
    mid = slice(int(20 * FS), int(100 * FS))
    ratio_db = 20 * np.log10(np.sqrt(np.mean(y[mid] ** 2)) / np.sqrt(np.mean(x[mid] ** 2)))
    assert ratio_db < -40


def test_filtfilt_matches_scipy_with_same_padding(bp):
    x = np.random.default_rng(1).normal(size=2000)
    ref = sps.sosfiltfilt(bp.sections, x, padtype="odd", padlen=3 * bp.order)
    np.testing.assert_allclose(dsp.filtfilt(bp, x), ref, atol=1e-10)


def test_filtfilt_multichannel(bp):
    x = np.random.default_rng(2).normal(size=(1000, 2))
    y = dsp.filtfilt(bp, x)
    np.testing.assert_allclose(y[:, 1], dsp.filtfilt(bp, x[:, 1]))


def test_filtfilt_too_short(bp):
    with pytest.raises(ValueError):
        dsp.filtfilt(bp, np.zeros(3 * bp.order))


# ---- resampling ------------------------------------------------------------


def test_resample_identity():
    x = np.random.default_rng(0).normal(size=300)
    np.testing.assert_array_equal(dsp.resample_polyphase(x, 360, 360), x)


def test_resample_257_to_360_keeps_frequency():
    fs_in = 257.0
    t = np.arange(int(20 * fs_in)) / fs_in
    y = dsp.resample_polyphase(np.sin(2 * np.pi * 5 * t), fs_in, 360.0)
    spec = dsp.dft_magnitudes(y)[: len(y) // 2]
    f = np.arange(len(spec)) * 360.0 / len(y)
    assert abs(f[np.argmax(spec)] - 5.0) <= 0.1


def test_resample_length_contract():
    assert len(dsp.resample_polyphase(np.zeros(257), 257, 360)) == 360
    assert len(dsp.resample_polyphase(np.zeros(1000), 360, 128)) == round(1000 * 128 / 360)


def test_resample_to_length():
    x = np.random.default_rng(0).normal(size=(324, 2))
    assert dsp.resample_to_length(np.zeros((int(0.9 * 360), 2)), 324).shape == (324, 2)
    assert dsp.resample_to_length(x[:317], 324).shape == (324, 2)
    with pytest.raises(ValueError):
        dsp.resample_polyphase(np.zeros(0), 1, 2)


# ---- DFT / Welch -----------------------------------------------------------


def test_dft_constant():
    m = dsp.dft_magnitudes(np.ones(4))
    assert m[0] == pytest.approx(4)
    np.testing.assert_allclose(m[1:], 0, atol=1e-12)


@pytest.mark.parametrize("n", [2, 3, 7, 16, 64, 100, 127, 128])
def test_dft_matches_naive_sum(n):
    x = np.random.default_rng(n).normal(size=n)
    naive = np.abs(naive_dft(x))
    fast = dsp.dft_magnitudes(x)
    assert np.max(np.abs(fast - naive)) / np.max(naive) < 1e-9


def test_parseval():
    x = np.random.default_rng(0).normal(size=101)
    assert np.sum(x**2) == pytest.approx(np.sum(dsp.dft_magnitudes(x) ** 2) / len(x), rel=1e-9)


def test_welch_white_noise_density():
    rng = np.random.default_rng(0)
    sigma = 1.7
    x = rng.normal(scale=sigma, size=10_000)
    psd = dsp.welch_psd(x, fs=100.0, window_length=256, overlap=0.5)
    integral = np.trapezoid(psd.power, psd.freqs) if hasattr(np, "trapezoid") else np.trapz(psd.power, psd.freqs)
    assert integral == pytest.approx(sigma**2, rel=0.15)
    assert np.all(psd.power >= 0)
    assert psd.freqs[0] == 0 and psd.freqs[-1] == 50.0 and np.all(np.diff(psd.freqs) > 0)


def test_welch_single_segment_is_periodogram():
    x = np.random.default_rng(3).normal(size=128)
    psd = dsp.welch_psd(x, fs=4.0, window_length=128, overlap=0.5)
    assert psd.n_segments == 1
    f, p = sps.periodogram(x, fs=4.0, window="hann")
    np.testing.assert_allclose(psd.power, p, rtol=1e-10, atol=1e-14)


def test_welch_matches_scipy():
    x = np.random.default_rng(4).normal(size=3000)
    psd = dsp.welch_psd(x, fs=4.0, window_length=256, overlap=0.5)
    f, p = sps.welch(x, fs=4.0, window="hann", nperseg=256, noverlap=128)
    np.testing.assert_allclose(psd.freqs, f)
    np.testing.assert_allclose(psd.power, p, rtol=1e-10)


def test_welch_peak_location():
    t = np.arange(0, 300, 0.25)
    psd = dsp.welch_psd(np.sin(2 * np.pi * 0.25 * t), fs=4.0, window_length=256)
    bin_w = psd.freqs[1]
    assert abs(psd.freqs[np.argmax(psd.power)] - 0.25) <= bin_w


def test_welch_errors():
    with pytest.raises(ValueError):
        dsp.welch_psd(np.zeros(10), 1.0, 20)
    with pytest.raises(ValueError):
        dsp.welch_psd(np.zeros(100), 1.0, 20, overlap=1.0)


# ---- CWT -------------------------------------------------------------------


def test_cwt_impulse_reproduces_kernel():
    x = np.zeros(201)
    x[100] = 1.0
    for s in (4, 8, 16):
        row = dsp.cwt_mexican_hat(x, [s])[0]
        k = dsp.mexican_hat(s)
        half = len(k) // 2
        np.testing.assert_allclose(row[100 - half : 100 + half + 1], k[::-1], atol=1e-12)
        assert np.argmax(row) == 100


def test_cwt_kernel_unit_norm():
    for s in (1, 4, 8, 16, 32):
        assert np.linalg.norm(dsp.mexican_hat(s)) == pytest.approx(1.0)


@pytest.mark.parametrize("width", [4, 8, 16, 32])
def test_cwt_bump_selects_matching_scale(width):
    # width = full width at half maximum of the Gaussian bump
    n = 1024
    sigma = width / (2 * np.sqrt(2 * np.log(2)))
    t = np.arange(n) - n / 2
    x = np.exp(-(t**2) / (2 * sigma**2))
    scales = [4, 8, 16, 32]
    resp = np.abs(dsp.cwt_mexican_hat(x, scales)).max(axis=1)
    assert scales[int(np.argmax(resp))] == width


def test_cwt_zero():
    assert not np.any(dsp.cwt_mexican_hat(np.zeros(500), [4, 8, 16, 32]))


# ---- wavelet packets -------------------------------------------------------


def test_db4_taps():
    ref = [0.2303778133, 0.7148465706, 0.6308807679, -0.0279837694,
           -0.1870348117, 0.0308413818, 0.0328830117, -0.0105974018]
    np.testing.assert_allclose(dsp.daubechies_filter(4), ref, atol=1e-9)


@pytest.mark.parametrize("order", [1, 2, 3, 4, 6, 8])
def test_daubechies_orthonormal(order):
    h = dsp.daubechies_filter(order)
    assert len(h) == 2 * order
    for shift in range(0, len(h), 2):
        expected = 1.0 if shift == 0 else 0.0
        assert np.dot(h[shift:], h[: len(h) - shift]) == pytest.approx(expected, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(64, 700), seed=st.integers(0, 10_000))
def test_wavelet_packet_energy_conservation(n, seed):
    x = np.random.default_rng(seed).normal(size=n)
    raw = dsp.wavelet_packet_energies(x, 4, 3, normalize=False)
    assert raw.sum() == pytest.approx(np.dot(x, x), rel=1e-6)
    assert dsp.wavelet_packet_energies(x).sum() == pytest.approx(1.0, abs=1e-9)


def test_wavelet_packet_dc_in_lowest_leaf():
    x = 1.0 + 1e-4 * np.random.default_rng(0).normal(size=328)
    e = dsp.wavelet_packet_energies(x)
    assert e[0] >= 0.95


def test_wavelet_packet_zero_signal():
    np.testing.assert_array_equal(dsp.wavelet_packet_energies(np.zeros(324)), np.zeros(8))


def test_wavelet_packet_too_short():
    with pytest.raises(ValueError):
        dsp.wavelet_packet_energies(np.ones(63))


def test_wavelet_packet_matches_pywavelets():
    pywt = pytest.importorskip("pywt")
    x = np.random.default_rng(7).normal(size=328)
    wp = pywt.WaveletPacket(x, "db4", mode="periodization", maxlevel=3)
    ref = np.array([np.sum(node.data**2) for node in wp.get_level(3, order="freq")])
    np.testing.assert_allclose(dsp.wavelet_packet_energies(x, normalize=False), ref, rtol=1e-12)
