"""Mono 16-bit PCM WAV reading and writing.

The only interchange format is RIFF/WAVE, one channel, 16-bit signed
little-endian samples.  Floats map to ints as round(clamp(x, -1, 1) * 32767),
so write -> read -> write is byte-stable.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LayoutError


@dataclass
class WavFile:
    sample_rate: int
    channels: int
    samples: np.ndarray  # float64 in [-1, 1], shape [T] (or [T, channels])


def float_to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")


def pcm16_to_float(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 32767.0


def read_wav(path) -> WavFile:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise LayoutError(f"{path}: only 16-bit PCM is supported")
        channels = fh.getnchannels()
        rate = fh.getframerate()
        frames = fh.readframes(fh.getnframes())
    data = np.frombuffer(frames, dtype="<i2")
    if channels > 1:
        data = data.reshape(-1, channels)
    return WavFile(sample_rate=rate, channels=channels, samples=pcm16_to_float(data))


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    samples = np.asarray(samples)
    if samples.ndim != 1:
        raise ConfigError(f"write_wav expects a mono waveform, got shape {samples.shape}")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(float_to_pcm16(samples).tobytes())
