"""Synthetic source classes for desk-scale experiments.

Three families with clearly different spectral structure:

* ``harmonic-tones`` — note sequences built from a configurable set of
  fundamentals with decaying partials (tonal, sparse spectra);
* ``filtered-noise`` — white noise through a per-item resonator with slow
  amplitude modulation (broadband, colored spectra);
* ``gaussian-ar`` — a stable second-order autoregressive process (smooth
  lowpass spectra, useful as an analytically tractable stand-in).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audioio import write_wav

SOURCE_CLASSES = ("harmonic-tones", "filtered-noise", "gaussian-ar")

DEFAULT_FUNDAMENTALS = (110.0, 146.8, 196.0, 220.0, 293.7, 392.0)

_TARGET_RMS = 10.0 ** (-20.0 / 20.0)  # -20 dBFS item level


@dataclass(frozen=True)
class SynthSpec:
    """What to synthesize: class, count, duration, and rendering knobs."""

    source_class: str
    count: int
    duration: float = 8.0
    sample_rate: int = 16000
    seed: int = 0
    fundamentals: tuple = DEFAULT_FUNDAMENTALS
    note_seconds: float = 0.5
    partials: int = 6
    noise_band_hz: tuple = (400.0, 3600.0)

    def __post_init__(self):
        if self.source_class not in SOURCE_CLASSES:
            raise ValueError(
                f"unknown source class {self.source_class!r}; choose from {SOURCE_CLASSES}"
            )
        if self.count < 0 or self.duration <= 0:
            raise ValueError("count must be >= 0 and duration positive")


def _normalize(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x**2))
    if rms > 0:
        x = x * (_TARGET_RMS / rms)
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x = x * (0.99 / peak)
    return x


def _render_harmonic(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    n_total = int(round(spec.duration * sr))
    note_len = int(round(spec.note_seconds * sr))
    out = np.zeros(n_total)
    t = np.arange(note_len) / sr
    envelope = np.exp(-t / (0.6 * spec.note_seconds))
    fade = int(0.005 * sr)
    envelope[:fade] *= np.linspace(0.0, 1.0, fade)
    pos = 0
    while pos < n_total:
        f0 = rng.choice(spec.fundamentals)
        note = np.zeros(note_len)
        for k in range(1, spec.partials + 1):
            if k * f0 >= sr / 2:
                break
            note += (1.0 / k) * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
        chunk = (note * envelope)[: n_total - pos]
        out[pos:pos + chunk.size] = chunk
        pos += note_len
    return out


def _render_filtered_noise(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    n_total = int(round(spec.duration * sr))
    lo, hi = spec.noise_band_hz
    center = rng.uniform(lo, hi)
    bandwidth = center / rng.uniform(3.0, 8.0)
    # constrained two-pole resonator
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * center / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    sig = lfilter([1.0 - r], a, rng.standard_normal(n_total))
    # slow amplitude modulation so items are not stationary
    mod_hz = rng.uniform(0.3, 1.5)
    t = np.arange(n_total) / sr
    sig *= 0.6 + 0.4 * np.sin(2 * np.pi * mod_hz * t + rng.uniform(0, 2 * np.pi))
    return sig


def _render_gaussian_ar(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n_total = int(round(spec.duration * spec.sample_rate))
    radius = rng.uniform(0.9, 0.97)
    theta = rng.uniform(0.05, 0.5)
    a = [1.0, -2 * radius * np.cos(theta), radius * radius]
    return lfilter([1.0], a, rng.standard_normal(n_total))


_RENDERERS = {
    "harmonic-tones": _render_harmonic,
    "filtered-noise": _render_filtered_noise,
    "gaussian-ar": _render_gaussian_ar,
}


def render_item(spec: SynthSpec, index: int) -> np.ndarray:
    """Render item ``index`` deterministically from (spec.seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(5, index)))
    return _normalize(_RENDERERS[spec.source_class](spec, rng))


def assign_splits(count: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> list[str]:
    """Disjoint train/val/test labels, reproducible from the seed."""
    order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))).permutation(count)
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    labels = [""] * count
    for rank, idx in enumerate(order):
        if rank < n_train:
            labels[idx] = "train"
        elif rank < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    return labels


def synthesize_dataset(spec: SynthSpec, out_dir) -> Path:
    """Write WAV items plus a manifest with the split assignment."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = assign_splits(spec.count, spec.seed)
    entries = []
    for i in range(spec.count):
        name = f"{spec.source_class}_{i:04d}.wav"
        write_wav(out_dir / name, render_item(spec, i), spec.sample_rate, fmt="int16")
        entries.append({"file": name, "split": labels[i], "index": i})
    manifest = {
        "source_class": spec.source_class,
        "sample_rate": spec.sample_rate,
        "duration": spec.duration,
        "seed": spec.seed,
        "items": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path
