"""Synthetic two-class respiratory-sound corpora.

Class 1 clips carry sustained broadband noise bursts (2.2-5 kHz by default).
Class 0 clips carry cyclic narrowband tones (150-900 Hz) with silent gaps.
The two bands are disjoint, and the class-1 band sits in the upper half of
the default Mel axis, which gives Grad-CAM a known target region. Both sit on a faint
white-noise floor and are padded with digital silence so trimming has work
to do.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .dsp import SAMPLE_RATE, AudioClip, write_wav
from .evaluation import ManifestRecord, write_manifest


@dataclass
class SynthSpec:
    n_per_class: int = 200
    duration_s: tuple[float, float] = (2.6, 4.0)
    broadband_hz: tuple[float, float] = (2200.0, 5000.0)
    tone_hz: tuple[float, float] = (150.0, 900.0)
    tone_on_s: tuple[float, float] = (0.15, 0.35)
    tone_off_s: tuple[float, float] = (0.08, 0.2)
    amplitude: tuple[float, float] = (0.15, 0.5)
    floor_db: float = -55.0
    pad_s: tuple[float, float] = (0.05, 0.3)
    separable: bool = True
    seed: int = 0
    fs: int = SAMPLE_RATE

    def __post_init__(self):
        if self.separable and not (self.tone_hz[1] <= self.broadband_hz[0] or self.broadband_hz[1] <= self.tone_hz[0]):
            raise ValueError(f"class bands overlap: tones {self.tone_hz} vs broadband {self.broadband_hz}")

    def to_dict(self) -> dict:
        return asdict(self)


def _taper(n: int, fs: int, ramp_s: float = 0.01) -> np.ndarray:
    env = np.ones(n)
    r = min(n // 2, max(1, int(ramp_s * fs)))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
    env[:r] = ramp
    env[n - r:] = ramp[::-1]
    return env


def broadband_bursts(n: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.broadband_hz
    sos = butter(6, [lo, hi], btype="bandpass", fs=spec.fs, output="sos")
    x = sosfiltfilt(sos, rng.standard_normal(n + 2048))[1024:1024 + n]
    # slow amplitude wobble keeps the bursts sustained but not stationary
    t = np.arange(n) / spec.fs
    wobble = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    x = x * wobble * _taper(n, spec.fs)
    return x / np.max(np.abs(x))


def cyclic_tones(n: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    x = np.zeros(n)
    f0 = rng.uniform(*spec.tone_hz)
    pos = 0
    while pos < n:
        on = int(rng.uniform(*spec.tone_on_s) * spec.fs)
        seg = min(on, n - pos)
        f = f0 * rng.uniform(0.97, 1.03)
        t = np.arange(seg) / spec.fs
        x[pos:pos + seg] = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) * _taper(seg, spec.fs)
        pos += seg + int(rng.uniform(*spec.tone_off_s) * spec.fs)
    return x


def synth_clip(label: int, spec: SynthSpec, rng: np.random.Generator) -> AudioClip:
    n = int(rng.uniform(*spec.duration_s) * spec.fs)
    recipe = label if spec.separable else int(rng.integers(0, 2))
    body = broadband_bursts(n, spec, rng) if recipe == 1 else cyclic_tones(n, spec, rng)
    body = body * rng.uniform(*spec.amplitude)
    body = body + rng.normal(0.0, 10 ** (spec.floor_db / 20), n)
    pad = [np.zeros(int(rng.uniform(*spec.pad_s) * spec.fs)) for _ in range(2)]
    return AudioClip(np.clip(np.concatenate([pad[0], body, pad[1]]), -1.0, 1.0), spec.fs)


def generate_corpus(spec: SynthSpec, out_dir) -> list[ManifestRecord]:
    """Write WAV files plus ``manifest.jsonl`` under ``out_dir``; deterministic per seed."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(spec.seed).spawn(2 * spec.n_per_class)
    records = []
    k = 0
    for label in (0, 1):
        for i in range(spec.n_per_class):
            clip = synth_clip(label, spec, np.random.default_rng(seeds[k]))
            k += 1
            rid = f"c{label}_{i:04d}"
            path = out / "audio" / f"{rid}.wav"
            write_wav(path, clip)
            group = "synthetic-positive" if label else "synthetic-negative"
            records.append(ManifestRecord(rid, str(path), label, "unknown", group))
    write_manifest(out / "manifest.jsonl", records, relative_to=out)
    return records
