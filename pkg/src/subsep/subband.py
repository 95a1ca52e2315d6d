"""Cosine-modulated pseudo-QMF filterbank used as the modeling domain.

The bank splits a waveform into ``channels`` critically sampled subband
sequences (one frame of coefficients per ``channels`` input samples) and
reconstructs with the adjoint synthesis bank. The prototype is a
Kaiser-windowed lowpass with cutoff near pi/(2C), refined by an iterative
power-complementarity flattening pass, which brings the delay-compensated
round-trip error below -70 dB for full-scale inputs.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import firwin

DEFAULT_CHANNELS = 64
DEFAULT_OVERLAP = 10
DEFAULT_SAMPLE_RATE = 16000

_KAISER_BETA = 8.25
_FLATTEN_ITERS = 20
_PROBE_SEED = 740551
_PROBE_LEN = 16384


@dataclass(frozen=True)
class Waveform:
    """A mono, finite, real-valued signal with a sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def energy(self) -> float:
        return float(np.sum(self.samples**2))


@dataclass(frozen=True)
class SubbandFrames:
    """N x C matrix of real subband coefficients (one frame per C samples).

    ``pad_front`` and ``signal_samples`` record the boundary padding applied
    by :meth:`FilterBank.analyze` so that synthesis can trim the output back
    to the original extent. Frames constructed directly (e.g. sampled from a
    model) default to a zero offset and an N*C sample span.
    """

    coeffs: np.ndarray
    channels: int
    frame_stride_samples: int = 0
    pad_front: int = 0
    signal_samples: int | None = None
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs)
        object.__setattr__(self, "coeffs", coeffs)
        if coeffs.ndim != 2 or coeffs.shape[1] != self.channels:
            raise ValueError(
                f"coeffs must be (frames, {self.channels}), got {coeffs.shape}"
            )
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("subband coefficients contain non-finite values")
        if self.frame_stride_samples == 0:
            object.__setattr__(self, "frame_stride_samples", self.channels)

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[0]

    def energy(self) -> float:
        return float(np.sum(self.coeffs**2))


@dataclass(frozen=True)
class PrototypeFilter:
    """Symmetric lowpass prototype for a C-channel modulated bank."""

    taps: np.ndarray
    channels: int
    overlap_factor: int

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        object.__setattr__(self, "taps", taps)
        expected = self.channels * self.overlap_factor
        if taps.size != expected:
            raise ValueError(f"expected {expected} taps, got {taps.size}")


def _validate_geometry(channels: int, overlap_factor: int) -> None:
    if channels < 2 or channels % 2 != 0:
        raise ValueError(f"unsupported channel count {channels}: must be even and >= 2")
    if not 8 <= overlap_factor <= 16:
        raise ValueError(f"overlap_factor must be in [8, 16], got {overlap_factor}")


def _modulate(taps: np.ndarray, channels: int) -> np.ndarray:
    """Cosine-modulate a prototype into the (C, taps) analysis matrix."""
    lt = taps.size
    t = np.arange(lt)
    k = np.arange(channels)[:, None]
    phase = (2 * k + 1) * (np.pi / (2 * channels)) * (t[None, :] - (lt - 1) / 2)
    bank = 2.0 * taps[None, :] * np.cos(phase + (-1.0) ** k * (np.pi / 4))
    # unit mean row norm: white noise keeps per-channel variance ~1
    norms = np.sqrt(np.sum(bank**2, axis=1))
    return bank / norms.mean()


def _flatten(taps: np.ndarray, channels: int, iters: int) -> np.ndarray:
    """Iteratively rescale the zero-phase response so that adjacent band
    shifts of |H|^2 sum to a constant, then re-truncate to the filter length."""
    lt = taps.size
    n_fft = 32 * lt
    h = taps.copy()
    half = n_fft // (2 * channels)  # pi/C in rfft bins
    idx = np.arange(half + 1)
    for _ in range(iters):
        spec = np.fft.rfft(h, n_fft)
        w = np.arange(spec.size) * (2 * np.pi / n_fft)
        zero_phase = (spec * np.exp(1j * w * (lt - 1) / 2)).real
        power = zero_phase**2
        pair = power[idx] + power[half - idx]
        gain = np.ones_like(power)
        gain[idx] = np.sqrt(power[0] / np.maximum(pair, 1e-30))
        adjusted = zero_phase * gain * np.exp(-1j * w * (lt - 1) / 2)
        h = np.fft.irfft(adjusted, n_fft)[:lt]
        h = 0.5 * (h + h[::-1])  # re-impose symmetry lost to truncation
    return h


def _roundtrip_error(bank: np.ndarray, channels: int, probe: np.ndarray) -> float:
    pad = bank.shape[1] - channels
    full = _synthesize_raw(bank, _analyze_raw(bank, probe, channels), channels)
    rebuilt = full[pad:pad + probe.size]
    return float(np.sum((rebuilt - probe) ** 2))


@functools.lru_cache(maxsize=16)
def _design_cached(channels: int, overlap_factor: int) -> tuple:
    lt = channels * overlap_factor
    probe = np.random.default_rng(_PROBE_SEED).standard_normal(_PROBE_LEN)
    nominal = 1.0 / (2 * channels)

    def objective(cutoff: float) -> float:
        h = _flatten(firwin(lt, cutoff, window=("kaiser", _KAISER_BETA)), channels, _FLATTEN_ITERS)
        return _roundtrip_error(_modulate(h, channels), channels, probe)

    res = minimize_scalar(
        objective,
        bounds=(1.02 * nominal, 1.45 * nominal),
        method="bounded",
        options={"xatol": nominal * 1e-5},
    )
    taps = _flatten(firwin(lt, res.x, window=("kaiser", _KAISER_BETA)), channels, _FLATTEN_ITERS)
    return tuple(taps)


def design_prototype(channels: int = DEFAULT_CHANNELS, overlap_factor: int = DEFAULT_OVERLAP) -> PrototypeFilter:
    """Design the near-perfect-reconstruction prototype for a C-channel bank.

    Deterministic in (channels, overlap_factor): the cutoff of a Kaiser
    lowpass is tuned against a fixed white-noise probe, with the flattening
    refinement applied inside the search.
    """
    _validate_geometry(channels, overlap_factor)
    taps = np.array(_design_cached(channels, overlap_factor))
    return PrototypeFilter(taps=taps, channels=channels, overlap_factor=overlap_factor)


def _analyze_raw(bank: np.ndarray, signal: np.ndarray, channels: int) -> np.ndarray:
    lt = bank.shape[1]
    pad = lt - channels
    ext = np.concatenate([np.zeros(pad), signal, np.zeros(2 * pad)])
    n_frames = (signal.size + 2 * pad) // channels
    idx = np.arange(lt)[None, :] + channels * np.arange(n_frames)[:, None]
    return ext[idx] @ bank.T


def _synthesize_raw(bank: np.ndarray, coeffs: np.ndarray, channels: int) -> np.ndarray:
    lt = bank.shape[1]
    n_frames = coeffs.shape[0]
    chunks = coeffs @ bank
    out = np.zeros((n_frames - 1) * channels + lt)
    for j in range(lt // channels):
        out[j * channels:j * channels + n_frames * channels] += chunks[:, j * channels:(j + 1) * channels].reshape(-1)
    return out


class FilterBank:
    """Critically sampled analysis/synthesis pair over a shared prototype.

    ``analyze`` zero-pads the input at both boundaries so every signal
    sample is covered by the full filter overlap; ``synthesize`` trims the
    padding again, so analyze -> synthesize returns the input extent with
    no residual delay.
    """

    def __init__(self, channels: int = DEFAULT_CHANNELS, overlap_factor: int = DEFAULT_OVERLAP,
                 prototype: PrototypeFilter | None = None):
        if prototype is None:
            prototype = design_prototype(channels, overlap_factor)
        elif prototype.channels != channels:
            raise ValueError("prototype channel count does not match bank")
        self.channels = channels
        self.overlap_factor = prototype.overlap_factor
        self.prototype = prototype
        self._bank = _modulate(prototype.taps, channels)
        # samples of zero padding added before/after the signal by analyze
        self.boundary_pad = self._bank.shape[1] - channels

    def analyze(self, w: Waveform | np.ndarray) -> SubbandFrames:
        """Split a waveform into subband frames (one frame per C samples).

        The input is zero-padded up to a multiple of C and by the filter
        overlap at both boundaries; the padding is recorded on the returned
        frames so synthesis restores the original length exactly.
        """
        if not isinstance(w, Waveform):
            w = Waveform(np.asarray(w, dtype=np.float64))
        c = self.channels
        signal = w.samples
        tail = (-signal.size) % c
        if tail:
            signal = np.concatenate([signal, np.zeros(tail)])
        coeffs = _analyze_raw(self._bank, signal, c)
        return SubbandFrames(
            coeffs=coeffs,
            channels=c,
            frame_stride_samples=c,
            pad_front=self.boundary_pad,
            signal_samples=w.samples.size,
            sample_rate=w.sample_rate,
        )

    def synthesize(self, frames: SubbandFrames) -> Waveform:
        """Reconstruct a waveform from subband frames.

        Frames produced by :meth:`analyze` come back at the original length;
        directly constructed frames yield n_frames * C samples starting at
        their recorded offset.
        """
        if frames.channels != self.channels:
            raise ValueError(
                f"frames have {frames.channels} channels, bank has {self.channels}"
            )
        c = self.channels
        span = frames.signal_samples
        if span is None:
            span = frames.n_frames * c
        full = _synthesize_raw(self._bank, np.asarray(frames.coeffs, dtype=np.float64), c)
        out = full[frames.pad_front:frames.pad_front + span]
        if out.size < span:
            out = np.concatenate([out, np.zeros(span - out.size)])
        return Waveform(out, sample_rate=frames.sample_rate)
