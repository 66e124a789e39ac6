import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from hst import dsp
from hst.dsp import AudioClip, DspConfig

from oracles import dft_peak_hz, naive_stft_direct

FS = dsp.SAMPLE_RATE


def tone(freq, seconds, fs=FS, amp=0.5):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * freq * t)


def band_noise(lo, hi, seconds, seed=0, fs=FS):
    from scipy.signal import butter, sosfiltfilt

    x = np.random.default_rng(seed).standard_normal(int(seconds * fs))
    return 0.3 * sosfiltfilt(butter(6, [lo, hi], btype="bandpass", fs=fs, output="sos"), x)


# -- ingestion --------------------------------------------------------------------------


def test_load_16bit_is_scaled_copy(tmp_path):
    raw = (np.random.default_rng(0).uniform(-1, 1, 5000) * 30000).astype(np.int16)
    wavfile.write(tmp_path / "a.wav", FS, raw)
    clip = dsp.load_audio(tmp_path / "a.wav")
    assert clip.fs == FS
    assert np.array_equal(clip.samples, raw / 32768.0)


def test_load_stereo_identical_channels(tmp_path):
    mono = (tone(440, 0.5) * 32767).astype(np.int16)
    wavfile.write(tmp_path / "m.wav", FS, mono)
    wavfile.write(tmp_path / "s.wav", FS, np.stack([mono, mono], axis=1))
    assert np.array_equal(dsp.load_audio(tmp_path / "m.wav").samples, dsp.load_audio(tmp_path / "s.wav").samples)


def test_load_resamples_44k_sine(tmp_path):
    wavfile.write(tmp_path / "hi.wav", 44100, tone(1000.0, 1.0, fs=44100).astype(np.float32))
    clip = dsp.load_audio(tmp_path / "hi.wav")
    assert clip.fs == FS and abs(len(clip.samples) - FS) <= 1
    assert abs(dft_peak_hz(clip.samples, FS) - 1000.0) / 1000.0 < 1e-3


def _write_pcm24(path, ints, fs):
    payload = b"".join(int(v).to_bytes(3, "little", signed=True) for v in ints)
    fmt = struct.pack("<HHIIHH", 1, 1, fs, fs * 3, 3, 24)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_load_24bit_and_8bit(tmp_path):
    ints = np.array([0, 2 ** 22, -(2 ** 23), 2 ** 23 - 1, -5])
    _write_pcm24(tmp_path / "p24.wav", ints, FS)
    assert np.allclose(dsp.load_audio(tmp_path / "p24.wav").samples, ints / 2 ** 23, atol=0)
    wavfile.write(tmp_path / "p8.wav", FS, np.array([0, 128, 255, 64], dtype=np.uint8))
    assert dsp.load_audio(tmp_path / "p8.wav").samples.tolist() == [-1.0, 0.0, 127 / 128, -0.5]


def test_load_errors(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(dsp.IngestionError):
        dsp.load_audio(tmp_path / "junk.wav")
    with pytest.raises(dsp.IngestionError):
        dsp.load_audio(tmp_path / "missing.wav")
    wavfile.write(tmp_path / "empty.wav", FS, np.zeros(0, dtype=np.int16))
    with pytest.raises(dsp.EmptyClipError):
        dsp.load_audio(tmp_path / "empty.wav")


# -- trimming ----------------------------------------------------------------------------


def test_trim_zero_padding():
    body = tone(500, 1.0)
    x = np.concatenate([np.zeros(FS), body, np.zeros(FS)])
    out = dsp.trim_silence(AudioClip(x, FS))
    win = int(0.01 * FS)
    assert abs(len(out.samples) - len(body)) <= 2 * win


def test_trim_without_silence_is_identity():
    x = band_noise(200, 4000, 1.0)
    assert np.array_equal(dsp.trim_silence(AudioClip(x, FS)).samples, x)


def test_trim_noise_floor_edges():
    rng = np.random.default_rng(7)
    n_lead, n_body, n_tail = int(0.7 * FS), int(1.3 * FS), int(0.4 * FS)
    # both levels are peak sample levels in dBFS
    x = rng.standard_normal(n_lead + n_body + n_tail)
    x *= 10 ** (-70 / 20) / np.abs(x).max()
    x[n_lead:n_lead + n_body] += tone(700, n_body / FS, amp=10 ** (-10 / 20))
    out = dsp.trim_silence(AudioClip(x, FS), 60.0)
    # locate the surviving span inside the original
    start = int(np.flatnonzero(x == out.samples[0])[0])
    stop = start + len(out.samples)
    assert abs(start - n_lead) / FS <= 0.05
    assert abs(stop - (n_lead + n_body)) / FS <= 0.05


def test_trim_silent_clip_errors():
    with pytest.raises(dsp.EmptyClipError):
        dsp.trim_silence(AudioClip(np.zeros(1000), FS))


def test_duration_filter():
    assert not dsp.duration_ok(AudioClip(np.zeros(2 * FS), FS))
    assert dsp.duration_ok(AudioClip(np.zeros(2 * FS + 1), FS))
    with pytest.raises(dsp.TooShortError):
        dsp.prepare_clip(AudioClip(tone(300, 1.5), FS), DspConfig())


# -- augmentation ------------------------------------------------------------------------


def test_amplify_doubles_half_scale():
    x = tone(300, 0.5, amp=0.5)
    assert np.array_equal(dsp.amplify(AudioClip(x, FS), 2.0).samples, 2.0 * x)


def test_pitch_speed_half_doubles_length():
    out = dsp.change_pitch_speed(AudioClip(tone(300, 1.0), FS), 0.5)
    assert len(out.samples) == 2 * FS


def test_pitch_speed_lowers_pitch():
    out = dsp.change_pitch_speed(AudioClip(tone(1000.0, 1.0), FS), 0.8)
    assert abs(dft_peak_hz(out.samples, FS) - 800.0) < 2.0


def test_add_noise_snr():
    x = tone(440, 2.0)
    out = dsp.add_white_noise(AudioClip(x, FS), 30.0, np.random.default_rng(3))
    noise = out.samples - x
    snr = 10 * math.log10(np.mean(x ** 2) / np.mean(noise ** 2))
    assert abs(snr - 30.0) <= 1.0


def test_augment_draws_from_ranges():
    clip = AudioClip(tone(300, 1.0, amp=0.1), FS)
    for seed in range(20):
        out = dsp.augment(clip, np.random.default_rng(seed), "amplify")
        gain = out.samples.max() / clip.samples.max()
        assert 1.15 <= gain <= 2.0
        n = len(dsp.augment(clip, np.random.default_rng(seed), "pitch_speed").samples)
        assert FS / 0.99 - 2 <= n <= FS / 0.8 + 2
    with pytest.raises(ValueError):
        dsp.augment(clip, np.random.default_rng(0), "reverse")


# -- window and STFT -----------------------------------------------------------------------


@pytest.mark.parametrize("n", [1024, 2048, 4096])
def test_hann_analytic(n):
    w = dsp.hann(n)
    assert w[0] == 0.0 and w[n // 2] == 1.0
    assert math.fsum(w) == n / 2
    assert np.array_equal(w[1:], w[1:][::-1])
    direct = [0.5 - 0.5 * math.cos(2 * math.pi * k / n) for k in range(n)]
    assert np.max(np.abs(w - direct)) < 1e-15


def test_stft_on_bin_sine():
    cfg = DspConfig()
    f = 10 * FS / cfg.n_fft
    x = np.sin(2 * np.pi * f * np.arange(3 * FS) / FS)
    mag = np.abs(dsp.stft(AudioClip(x, FS), cfg))
    assert mag.shape == (cfg.n_fft // 2 + 1, dsp.frame_count(len(x), cfg.n_fft, cfg.hop))
    assert np.all(np.argmax(mag, axis=0) == 10)
    others = np.delete(mag, [9, 10, 11], axis=0)
    assert np.all(20 * np.log10(mag[10] / others.max(axis=0)) >= 40)


def test_stft_zeros():
    assert not np.any(dsp.stft(AudioClip(np.zeros(FS), FS), DspConfig()))


def test_stft_matches_absolute_index_sum():
    cfg = DspConfig()
    x = np.random.default_rng(11).standard_normal(FS)
    fast = dsp.stft(AudioClip(x, FS), cfg)
    slow = naive_stft_direct(x, cfg.n_fft, cfg.hop)
    k = np.arange(cfg.n_fft // 2 + 1)[:, None]
    n0 = np.arange(fast.shape[1])[None, :] * cfg.hop
    aligned = fast * np.exp(-2j * np.pi * k * n0 / cfg.n_fft)
    assert np.max(np.abs(aligned - slow)) < 1e-6


def test_stft_too_short():
    with pytest.raises(dsp.TooShortError):
        dsp.stft(AudioClip(np.zeros(100), FS), DspConfig())


@settings(max_examples=200, deadline=None)
@given(st.integers(2048, 60000), st.sampled_from([1024, 2048, 4096]), st.integers(1, 1000))
def test_frame_count_property(length, n_fft, overlap):
    hop = n_fft - overlap
    if length < n_fft:
        return
    t = dsp.frame_count(length, n_fft, hop)
    assert t == (length - n_fft) // hop + 1
    assert (t - 1) * hop + n_fft <= length < t * hop + n_fft


def test_config_validation():
    with pytest.raises(dsp.DspConfigError):
        DspConfig(n_fft=128, overlap=128)
    with pytest.raises(dsp.DspConfigError):
        DspConfig(f_max=20000)
    with pytest.raises(dsp.DspConfigError):
        DspConfig(mel_mode="cubic")
    assert DspConfig().hop == 1920


# -- Mel ---------------------------------------------------------------------------------


def test_single_band_spans_range():
    fb = dsp.mel_filterbank(DspConfig(n_mels=1))
    row = fb.weights[0]
    bins = np.arange(row.size) * FS / 2048
    assert row[0] == 0.0 and row[-1] == 0.0
    assert np.all(row[1:-1] > 0)
    center = 700 * (10 ** ((2595 * math.log10(1 + FS / 2 / 700) / 2) / 2595) - 1)
    assert fb.center_freqs[0] == pytest.approx(center, rel=1e-12)
    assert bins[np.argmax(row)] == pytest.approx(center, abs=FS / 2048)


def test_centers_closed_form():
    cfg = DspConfig()
    fb = dsp.mel_filterbank(cfg)
    assert np.all(np.diff(fb.center_freqs) > 0)
    top = 2595 * math.log10(1 + (FS / 2) / 700)
    for i, c in enumerate(fb.center_freqs):
        m = top * (i + 1) / (cfg.n_mels + 1)
        assert abs(c - 700 * (10 ** (m / 2595) - 1)) < 1e-9


def test_rows_nonzero_and_overlap_neighbours_only():
    w = dsp.mel_filterbank(DspConfig()).weights
    assert np.all(w >= 0) and np.all(w.max(axis=1) > 0)
    support = w > 0
    for i in range(len(w)):
        for j in range(i + 2, len(w)):
            assert not np.any(support[i] & support[j])


def test_infeasible_band_count():
    with pytest.raises(dsp.DspConfigError):
        dsp.mel_filterbank(DspConfig(n_mels=600, n_fft=1024, overlap=128))


def test_nearest_bin_mode_is_one_hot():
    cfg = DspConfig(mel_mode="nearest_bin")
    fb = dsp.mel_filterbank(cfg)
    assert np.all(fb.weights.sum(axis=1) == 1.0)
    assert np.array_equal(np.argmax(fb.weights, axis=1), np.round(fb.center_freqs * cfg.n_fft / FS).astype(int))


def test_log_mel_identities():
    fb = dsp.mel_filterbank(DspConfig())
    zero = np.zeros((1025, 4))
    assert np.all(dsp.log_mel(zero, fb) == math.log(1e-10))
    p = np.random.default_rng(0).uniform(0.1, 2.0, (1025, 5))
    assert np.allclose(dsp.log_mel(p * math.e ** 2, fb) - dsp.log_mel(p, fb), 2.0, atol=1e-12)
    got = dsp.log_mel(p, fb)
    for i, t in [(0, 0), (50, 3), (127, 4)]:
        acc = math.fsum(fb.weights[i, k] * p[k, t] for k in range(1025))
        assert abs(got[i, t] - math.log(max(acc, 1e-10))) < 1e-12


# -- resize and normalisation -------------------------------------------------------------


def test_resize_examples():
    assert np.all(dsp.resize_bilinear(np.full((128, 40), 3.25)) == 3.25)
    img = np.random.default_rng(0).standard_normal((224, 224))
    assert np.array_equal(dsp.resize_bilinear(img), img)
    r, c = np.meshgrid(np.arange(128.0), np.arange(11.0), indexing="ij")
    ramp = 0.3 * r - 1.7 * c + 4.0
    out = dsp.resize_bilinear(ramp)
    rr, cc = np.meshgrid(np.linspace(0, 127, 224), np.linspace(0, 10, 224), indexing="ij")
    assert np.max(np.abs(out - (0.3 * rr - 1.7 * cc + 4.0))) < 1e-6


def test_normalize_half():
    img = np.random.default_rng(2).standard_normal((30, 30)) * 7 + 3
    out = dsp.normalize_half(img).values
    assert abs(out.mean() - 0.5) < 1e-6 and abs(out.std() - 0.5) < 1e-6
    assert np.max(np.abs(dsp.normalize_half(out).values - out)) < 1e-9
    assert np.max(np.abs(dsp.normalize_half(2.5 * img - 9).values - out)) < 1e-9
    with pytest.raises(dsp.DegenerateInputError):
        dsp.normalize_half(np.full((4, 4), 1.0))


# -- full pipeline -------------------------------------------------------------------------


def test_spectrogram_shape_and_determinism():
    clip = AudioClip(band_noise(300, 3000, 2.5), FS)
    a = dsp.compute_spectrogram(clip).values
    b = dsp.compute_spectrogram(AudioClip(clip.samples.copy(), FS)).values
    assert a.shape == (224, 224)
    assert a.tobytes() == b.tobytes()


def test_band_energy_ordering():
    cfg = DspConfig(out_size=64)
    lo = dsp.compute_spectrogram(AudioClip(band_noise(100, 800, 2.5, 1), FS), cfg).values
    hi = dsp.compute_spectrogram(AudioClip(band_noise(4000, 8000, 2.5, 2), FS), cfg).values
    assert lo[:32].mean() > lo[32:].mean()
    assert hi[32:].mean() > hi[:32].mean()


def test_amplify_leaves_normalized_spectrogram_unchanged():
    # white noise keeps every Mel cell clear of the log floor and of sample clipping
    clip = AudioClip(np.random.default_rng(4).normal(0, 0.05, int(2.5 * FS)), FS)
    a = dsp.compute_spectrogram(clip).values
    b = dsp.compute_spectrogram(dsp.amplify(clip, 1.7)).values
    assert np.max(np.abs(a - b)) < 1e-5


def test_spectrogram_cache_layout(tmp_path):
    img = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
    dsp.save_spectrogram(tmp_path / "x.spec", img)
    blob = (tmp_path / "x.spec").read_bytes()
    assert blob[:8] == b"HSTSPEC1"
    assert struct.unpack("<II", blob[8:16]) == (3, 5)
    assert np.array_equal(np.frombuffer(blob[16:], "<f4").reshape(3, 5), img)
    assert np.array_equal(dsp.load_spectrogram(tmp_path / "x.spec"), img)
    (tmp_path / "bad.spec").write_bytes(blob[:-4])
    with pytest.raises(dsp.IngestionError):
        dsp.load_spectrogram(tmp_path / "bad.spec")
