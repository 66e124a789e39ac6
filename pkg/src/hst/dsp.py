"""Audio ingestion and log-Mel spectrogram features.

Spectrogram images are laid out with rows = Mel bands (row 0 is the lowest
band) and columns = STFT frames in time order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 22050
MIN_DURATION_S = 2.0
SPEC_MAGIC = b"HSTSPEC1"


class IngestionError(IOError):
    """Audio could not be read or has an unsupported encoding."""


class EmptyClipError(ValueError):
    """No usable samples remain."""


class TooShortError(ValueError):
    """Clip is shorter than required."""


class DspConfigError(ValueError):
    pass


class DegenerateInputError(ValueError):
    """Input has zero variance and cannot be standardised."""


@dataclass
class AudioClip:
    samples: np.ndarray
    fs: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.fs


@dataclass
class DspConfig:
    n_fft: int = 2048
    overlap: int = 128
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float | None = None
    out_size: int = 224
    mel_mode: str = "triangular"
    log_floor: float = 1e-10
    fs: int = SAMPLE_RATE
    trim_db: float = 60.0
    trim_window_s: float = 0.01

    def __post_init__(self):
        if self.hop <= 0:
            raise DspConfigError(f"overlap {self.overlap} leaves no hop for n_fft {self.n_fft}")
        if self.mel_mode not in ("triangular", "nearest_bin"):
            raise DspConfigError(f"unknown mel_mode {self.mel_mode!r}")
        if self.upper_freq > self.fs / 2:
            raise DspConfigError(f"f_max {self.upper_freq} exceeds Nyquist {self.fs / 2}")
        if self.out_size < 2:
            raise DspConfigError("out_size must be >= 2")

    @property
    def hop(self) -> int:
        return self.n_fft - self.overlap

    @property
    def upper_freq(self) -> float:
        return self.fs / 2 if self.f_max is None else float(self.f_max)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MelFilterbank:
    weights: np.ndarray
    center_freqs: np.ndarray


@dataclass
class Spectrogram:
    values: np.ndarray
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape


# -- ingestion ----------------------------------------------------------------


def _to_float(raw: np.ndarray) -> np.ndarray:
    if raw.dtype == np.uint8:
        return (raw.astype(np.float64) - 128.0) / 128.0
    if raw.dtype == np.int16:
        return raw.astype(np.float64) / 32768.0
    if raw.dtype == np.int32:
        # scipy left-aligns 24-bit PCM into int32
        return raw.astype(np.float64) / 2147483648.0
    if raw.dtype in (np.float32, np.float64):
        return raw.astype(np.float64)
    raise IngestionError(f"unsupported sample type {raw.dtype}")


def resample(x: np.ndarray, fs_in: int, fs_out: int) -> np.ndarray:
    """Band-limited rational resampling (Kaiser-windowed sinc FIR)."""
    if fs_in == fs_out:
        return x
    g = math.gcd(int(fs_in), int(fs_out))
    return resample_poly(x, fs_out // g, fs_in // g)


def load_audio(path, target_fs: int = SAMPLE_RATE) -> AudioClip:
    try:
        fs, raw = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    x = _to_float(np.asarray(raw))
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise EmptyClipError(f"{path}: no samples")
    x = resample(x, fs, target_fs)
    return AudioClip(np.clip(x, -1.0, 1.0), target_fs)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.round(np.clip(clip.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    wavfile.write(str(path), clip.fs, pcm)


def trim_silence(clip: AudioClip, threshold_db: float = 60.0, window_s: float = 0.01) -> AudioClip:
    """Drop leading/trailing windows whose RMS sits ``threshold_db`` below the peak."""
    x = clip.samples
    if x.size == 0:
        raise EmptyClipError("cannot trim an empty clip")
    win = max(1, int(round(window_s * clip.fs)))
    n_win = int(math.ceil(x.size / win))
    padded = np.zeros(n_win * win)
    padded[: x.size] = x
    rms = np.sqrt((padded.reshape(n_win, win) ** 2).mean(axis=1))
    peak = rms.max()
    if peak <= 0.0:
        raise EmptyClipError("clip is entirely silent")
    loud = np.flatnonzero(rms > peak * 10.0 ** (-threshold_db / 20.0))
    start = loud[0] * win
    stop = min(x.size, (loud[-1] + 1) * win)
    return AudioClip(x[start:stop].copy(), clip.fs)


def duration_ok(clip: AudioClip, min_s: float = MIN_DURATION_S) -> bool:
    return clip.duration > min_s


# -- augmentation ---------------------------------------------------------------

AMPLIFY_RANGE = (1.15, 2.0)
PITCH_SPEED_RANGE = (0.8, 0.99)
NOISE_SNR_DB_RANGE = (20.0, 40.0)


def amplify(clip: AudioClip, gain: float) -> AudioClip:
    return AudioClip(np.clip(clip.samples * gain, -1.0, 1.0), clip.fs)


def change_pitch_speed(clip: AudioClip, factor: float) -> AudioClip:
    """Play back at ``factor`` times the original rate; factor < 1 lengthens the clip."""
    frac = Fraction(factor).limit_denominator(1000)
    y = resample_poly(clip.samples, frac.denominator, frac.numerator)
    return AudioClip(np.clip(y, -1.0, 1.0), clip.fs)


def add_white_noise(clip: AudioClip, snr_db: float, rng: np.random.Generator) -> AudioClip:
    power = float(np.mean(clip.samples ** 2))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    return AudioClip(clip.samples + rng.normal(0.0, sigma, clip.samples.size), clip.fs)


def augment(clip: AudioClip, rng: np.random.Generator, kind: str) -> AudioClip:
    if kind == "amplify":
        return amplify(clip, rng.uniform(*AMPLIFY_RANGE))
    if kind == "pitch_speed":
        return change_pitch_speed(clip, rng.uniform(*PITCH_SPEED_RANGE))
    if kind == "add_noise":
        return add_white_noise(clip, rng.uniform(*NOISE_SNR_DB_RANGE), rng)
    raise ValueError(f"unknown augmentation {kind!r}")


# -- spectral analysis -----------------------------------------------------------


def hann(n: int) -> np.ndarray:
    """Periodic Hann window 0.5 - 0.5 cos(2 pi n / N).

    Evaluated on the first half and mirrored, so w[n] == w[N - n] bit-for-bit.
    """
    if n < 2:
        raise ValueError("window length must be >= 2")
    k = np.arange(n)
    half = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n // 2 + 1) / n)
    return half[np.minimum(k, n - k)]


def frame_count(length: int, n_fft: int, hop: int) -> int:
    if length < n_fft:
        raise TooShortError(f"{length} samples is shorter than one {n_fft}-sample frame")
    return (length - n_fft) // hop + 1


def stft(clip: AudioClip, cfg: DspConfig) -> np.ndarray:
    """Complex STFT of shape (n_fft//2 + 1, T).

    Phase is referenced to each frame's first sample.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    n, hop = cfg.n_fft, cfg.hop
    t = frame_count(x.size, n, hop)
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(t, n), strides=(x.strides[0] * hop, x.strides[0]), writeable=False
    )
    return np.fft.rfft(frames * hann(n), axis=1).T


def mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: DspConfig, fs: int | None = None) -> MelFilterbank:
    fs = cfg.fs if fs is None else fs
    f_lo, f_hi = float(cfg.f_min), cfg.upper_freq
    if cfg.n_mels < 1 or not f_lo < f_hi <= fs / 2:
        raise DspConfigError(f"invalid band layout n_mels={cfg.n_mels}, [{f_lo}, {f_hi}] at fs={fs}")
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * fs / cfg.n_fft
    in_range = np.count_nonzero((bin_hz >= f_lo) & (bin_hz <= f_hi))
    if cfg.n_mels > in_range:
        raise DspConfigError(f"{cfg.n_mels} Mel bands exceed the {in_range} FFT bins in range")

    edges = mel_to_hz(np.linspace(mel(f_lo), mel(f_hi), cfg.n_mels + 2))
    centers = edges[1:-1]
    weights = np.zeros((cfg.n_mels, n_bins))
    if cfg.mel_mode == "nearest_bin":
        idx = np.clip(np.round(centers * cfg.n_fft / fs).astype(int), 0, n_bins - 1)
        weights[np.arange(cfg.n_mels), idx] = 1.0
    else:
        for i in range(cfg.n_mels):
            lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
            rise = (bin_hz - lo) / (mid - lo)
            fall = (hi - bin_hz) / (hi - mid)
            weights[i] = np.maximum(0.0, np.minimum(rise, fall))
        empty = np.flatnonzero(weights.sum(axis=1) == 0)
        if empty.size:
            raise DspConfigError(f"Mel band {empty[0]} covers no FFT bin; reduce n_mels or raise n_fft")
    return MelFilterbank(weights, centers)


def log_mel(power: np.ndarray, fb: MelFilterbank, floor: float = 1e-10) -> np.ndarray:
    return np.log(np.maximum(fb.weights @ power, floor))


def resize_bilinear(img: np.ndarray, out: int | tuple[int, int] = 224) -> np.ndarray:
    """Bilinear resample on a corner-aligned grid (first/last samples map exactly)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2:
        raise ValueError(f"need a 2-D image with extents >= 2, got {img.shape}")
    oh, ow = (out, out) if isinstance(out, int) else out

    def axis_weights(n_in, n_out):
        pos = np.linspace(0.0, n_in - 1, n_out)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
        return lo, pos - lo

    r0, rf = axis_weights(img.shape[0], oh)
    c0, cf = axis_weights(img.shape[1], ow)
    rows = img[r0] * (1.0 - rf)[:, None] + img[r0 + 1] * rf[:, None]
    return rows[:, c0] * (1.0 - cf) + rows[:, c0 + 1] * cf


def normalize_half(img: np.ndarray) -> Spectrogram:
    """Standardise to mean 0.5 and standard deviation 0.5."""
    img = np.asarray(img, dtype=np.float64)
    mu, sd = img.mean(), img.std()
    if not sd > 1e-12 * max(1.0, abs(mu)):
        raise DegenerateInputError("image has zero variance")
    return Spectrogram((img - mu) / sd * 0.5 + 0.5, normalized=True)


def power_spectrogram(clip: AudioClip, cfg: DspConfig) -> np.ndarray:
    spec = stft(clip, cfg)
    return spec.real ** 2 + spec.imag ** 2


def compute_spectrogram(clip: AudioClip, cfg: DspConfig | None = None) -> Spectrogram:
    cfg = cfg or DspConfig()
    if clip.fs != cfg.fs:
        clip = AudioClip(resample(clip.samples, clip.fs, cfg.fs), cfg.fs)
    lm = log_mel(power_spectrogram(clip, cfg), mel_filterbank(cfg), cfg.log_floor)
    if lm.shape[1] < 2:
        lm = np.repeat(lm, 2, axis=1)
    return normalize_half(resize_bilinear(lm, cfg.out_size))


def prepare_clip(clip: AudioClip, cfg: DspConfig, min_s: float = MIN_DURATION_S) -> AudioClip:
    """Trim silence and enforce the admission duration."""
    clip = trim_silence(clip, cfg.trim_db, cfg.trim_window_s)
    if not duration_ok(clip, min_s):
        raise TooShortError(f"clip lasts {clip.duration:.2f} s after trimming (need > {min_s} s)")
    return clip


# -- spectrogram cache files --------------------------------------------------------


def save_spectrogram(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(SPEC_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(values).tobytes())


def load_spectrogram(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != SPEC_MAGIC:
        raise IngestionError(f"{path}: not a spectrogram cache file")
    h, w = struct.unpack("<II", blob[8:16])
    payload = blob[16:]
    if len(payload) != 4 * h * w:
        raise IngestionError(f"{path}: payload holds {len(payload)} bytes, expected {4 * h * w}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()
