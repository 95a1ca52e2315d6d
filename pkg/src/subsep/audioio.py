"""Mono WAV read/write (16-bit PCM and 32-bit float)."""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile

from .subband import Waveform

_INT16_SCALE = 32768.0


def read_wav(path) -> Waveform:
    """Read a mono WAV file into a normalized float waveform."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / _INT16_SCALE
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples=samples, sample_rate=int(rate))


def write_wav(path, waveform: Waveform | np.ndarray, sample_rate: int | None = None,
              fmt: str = "float32") -> None:
    """Write mono audio; ``fmt`` is ``float32`` (estimates) or ``int16`` (data)."""
    if isinstance(waveform, Waveform):
        samples = waveform.samples
        sample_rate = waveform.sample_rate if sample_rate is None else sample_rate
    else:
        samples = np.asarray(waveform, dtype=np.float64)
        if sample_rate is None:
            raise ValueError("sample_rate required for raw arrays")
    if fmt == "float32":
        wavfile.write(path, sample_rate, samples.astype(np.float32))
    elif fmt == "int16":
        scaled = np.round(samples * _INT16_SCALE)
        wavfile.write(path, sample_rate,
                      np.clip(scaled, -32768, 32767).astype(np.int16))
    else:
        raise ValueError(f"unsupported format {fmt!r}")
