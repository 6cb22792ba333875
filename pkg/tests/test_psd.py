import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal

from digmon.spectral.psd import N_BINS, NFFT, Psd, compute_psd, hann, psd_windows, window_length
from digmon.spectral.record import (
    CODE_MAX,
    DB_MAX,
    DB_MIN,
    HEADER_SIZE,
    PAYLOAD_SIZE,
    RECORD_SIZE,
    decode_db,
    deserialize_record,
    encode_db,
    serialize_record,
    serialize_spectrogram,
)

FS = 50_000.0


def test_shapes_and_grid():
    p = compute_psd(np.random.default_rng(0).normal(size=2000))
    assert p.bins.shape == (2048,) and N_BINS == 2048 and NFFT == 4096
    assert p.df == FS / 4096
    assert p.freqs[-1] == pytest.approx(2047 * FS / 4096)
    assert np.all(p.bins >= 0)
    assert window_length(FS) == 2000


@pytest.mark.parametrize("n", [0, 1999, 2001, 4000])
def test_wrong_length(n):
    with pytest.raises(ValueError):
        compute_psd(np.zeros(n))


def test_psd_validation():
    with pytest.raises(ValueError):
        Psd(np.zeros(100), 1.0, 1.0)
    with pytest.raises(ValueError):
        Psd(-np.ones(2048), 1.0, 1.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 100), st.floats(-1e3, 1e3))
def test_matches_scipy_periodogram(seed, scale, offset):
    x = offset + scale * np.random.default_rng(seed).normal(size=2000)
    _, ref = signal.periodogram(x, fs=FS, window="hann", nfft=NFFT, detrend="constant",
                                scaling="density", return_onesided=True)
    np.testing.assert_allclose(compute_psd(x).bins, ref[:N_BINS], rtol=1e-9, atol=1e-12 * ref.max())


def test_hann_is_periodic_form():
    np.testing.assert_allclose(hann(2000), signal.get_window("hann", 2000, fftbins=True), atol=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_parseval(seed):
    rng = np.random.default_rng(seed)
    x = 180 + rng.normal(0, 2, 2000) + 3 * np.sin(2 * np.pi * rng.uniform(50, 20_000) * np.arange(2000) / FS)
    p = compute_psd(x)
    w = hann(2000)
    xw = (x - x.mean()) * w
    windowed_var = np.sum(xw ** 2) / np.sum(w ** 2)
    assert p.bins.sum() * p.df == pytest.approx(windowed_var, rel=0.01)


def test_white_noise_flat_per_octave():
    x = np.random.default_rng(1).normal(size=2000 * 100)
    p = compute_psd(x, n_average=100)
    levels = []
    k = 8
    while 2 * k <= N_BINS:
        levels.append(np.median(p.db()[k:2 * k]))
        k *= 2
    assert max(levels) - min(levels) <= 3.0


def test_single_tone_concentration():
    t = np.arange(2000) / FS
    p = compute_psd(5.0 * np.sin(2 * np.pi * 1000 * t))
    k = int(np.argmax(p.bins))
    assert k == round(1000 / p.df)
    # the Hann main lobe spans +-2 resolution bins, i.e. +-4 transform bins here
    lobe = p.bins[k - 4:k + 5].sum()
    assert lobe / p.bins.sum() >= 0.90
    assert p.bins[k] / p.bins.sum() > 1 / 9


def test_averaging_and_windows():
    x = np.random.default_rng(3).normal(size=2000 * 6)
    ws = psd_windows(x, t0=1_000)
    assert len(ws) == 6 and [w.window_id for w in ws] == list(range(6))
    assert ws[1].t_start - ws[0].t_start == 40_000_000
    avg = compute_psd(x, n_average=6)
    np.testing.assert_allclose(avg.bins, np.mean([w.bins for w in ws], axis=0), rtol=1e-12)
    assert len(psd_windows(x, n_average=4)) == 1


def test_band_power_of_tone():
    t = np.arange(2000) / FS
    p = compute_psd(2.0 * np.sin(2 * np.pi * 3000 * t))
    assert p.band_power(2900, 3100) == pytest.approx(2.0 ** 2 / 2, rel=0.02)


# spectrogram record ---------------------------------------------------------

def _noise_psd(seed=0, t_start=0):
    return compute_psd(180 + np.random.default_rng(seed).normal(0, 1.7, 2000), t_start=t_start)


def test_record_sizes():
    p = _noise_psd()
    assert len(serialize_spectrogram(p)) == 4096 == PAYLOAD_SIZE
    assert len(serialize_record(p)) == RECORD_SIZE == 4096 + HEADER_SIZE and HEADER_SIZE == 16


def test_all_floor_psd_is_zero_payload():
    p = Psd(np.zeros(2048), FS / NFFT, FS)
    assert serialize_spectrogram(p) == bytes(4096)
    p = Psd(np.full(2048, 1e-20), FS / NFFT, FS)
    assert serialize_spectrogram(p) == bytes(4096)


def test_record_roundtrip_within_one_step():
    p = _noise_psd(4, t_start=1_700_000_000_123_456_789)
    r = deserialize_record(serialize_record(p))
    assert r.t_start == 1_700_000_000_123_456_789 and r.fs == FS
    assert (r.db_min, r.db_max) == (DB_MIN, DB_MAX)
    step = (DB_MAX - DB_MIN) / CODE_MAX
    inside = (p.db() > DB_MIN) & (p.db() < DB_MAX)
    assert np.max(np.abs(r.db[inside] - p.db()[inside])) <= step
    q = r.to_psd()
    assert q.bins.shape == (2048,) and q.df == p.df


def test_record_layout_bit_exact():
    p = Psd(np.full(2048, 1.0), FS / NFFT, FS, t_start=42)
    raw = serialize_record(p)
    assert raw[:8] == (42).to_bytes(8, "little")
    assert np.frombuffer(raw[8:12], "<f4")[0] == FS
    assert int.from_bytes(raw[12:14], "little", signed=True) == DB_MIN
    assert int.from_bytes(raw[14:16], "little", signed=True) == DB_MAX
    code = round((0 - DB_MIN) / (DB_MAX - DB_MIN) * CODE_MAX)
    assert np.all(np.frombuffer(raw[16:], "<u2") == code)


def test_deserialize_rejects_bad_size():
    with pytest.raises(ValueError):
        deserialize_record(b"\x00" * 100)


@given(st.lists(st.floats(-150, 100), min_size=2, max_size=50))
def test_encoding_monotone(values):
    v = np.sort(np.array(values))
    codes = encode_db(v).astype(int)
    assert np.all(np.diff(codes) >= 0)
    assert np.all(np.abs(decode_db(codes) - np.clip(v, DB_MIN, DB_MAX)) <= (DB_MAX - DB_MIN) / CODE_MAX)
