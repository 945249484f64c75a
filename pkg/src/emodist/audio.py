"""Minimal waveform layer: 16 kHz mono PCM IO, mixing, and the 15 s cap.

Audio never gets resampled or renormalized here; files must already be
16-bit PCM mono at 16 kHz, and anything else is rejected loudly. Mixing
follows a MixPlan: either silence is inserted between the two signals or
a gap-sized region is overlapped as an equal-weight sum (0.5/0.5, which
keeps in-range inputs in range).
"""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass

import numpy as np

from .augment import MODE_OVERLAP, MODE_SILENCE, MixPlan
from .errors import DataError

SAMPLE_RATE_HZ = 16_000
MAX_SECONDS = 15.0
_SCALE = 32768.0


@dataclass
class Waveform:
    """Mono PCM audio as real samples in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise DataError(f"sample rate must be {SAMPLE_RATE_HZ} Hz, got {self.sample_rate_hz}")
        if self.samples.size and (self.samples.min() < -1.0 or self.samples.max() > 1.0):
            raise DataError("waveform samples out of [-1, 1]")

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate_hz


def read_wav(path: str | os.PathLike) -> Waveform:
    """Read a 16-bit PCM mono 16 kHz WAV file; reject any other format."""
    path = os.fspath(path)
    try:
        reader = wave.open(path, "rb")
    except FileNotFoundError:
        raise DataError(f"wav file not found: {path}") from None
    except wave.Error as exc:
        raise DataError(f"{path}: not a readable WAV file ({exc})") from None
    with reader:
        if reader.getnchannels() != 1:
            raise DataError(f"{path}: channels={reader.getnchannels()}, need mono")
        if reader.getsampwidth() != 2:
            raise DataError(f"{path}: sample_width={reader.getsampwidth()} bytes, need 16-bit PCM")
        if reader.getframerate() != SAMPLE_RATE_HZ:
            raise DataError(f"{path}: sample_rate={reader.getframerate()}, need {SAMPLE_RATE_HZ}")
        if reader.getcomptype() != "NONE":
            raise DataError(f"{path}: compression={reader.getcomptype()!r}, need uncompressed PCM")
        payload = reader.readframes(reader.getnframes())
    ints = np.frombuffer(payload, dtype="<i2")
    return Waveform(samples=ints.astype(np.float64) / _SCALE)


def write_wav(path: str | os.PathLike, waveform: Waveform) -> None:
    """Write a waveform as 16-bit PCM mono; read_wav(write_wav(w)) is bit-exact."""
    path = os.fspath(path)
    ints = np.clip(np.rint(waveform.samples * _SCALE), -32768, 32767).astype("<i2")
    tmp = path + ".tmp"
    with wave.open(tmp, "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(waveform.sample_rate_hz)
        writer.writeframes(ints.tobytes())
    os.replace(tmp, path)


def mix_waveforms(maj: Waveform, minority: Waveform, plan: MixPlan) -> Waveform:
    """Splice two waveforms per the plan: silence-gapped or overlapped.

    The gap is ``floor(t * rate)`` samples. In overlap mode the shared
    region is ``0.5 * a + 0.5 * b`` and the gap is clamped to the shorter
    signal; non-overlap regions are copied verbatim.
    """
    if maj.sample_rate_hz != minority.sample_rate_hz:
        raise DataError(f"sample rate mismatch: {maj.sample_rate_hz} vs {minority.sample_rate_hz}")
    a, b = (minority, maj) if plan.order_swapped else (maj, minority)
    gap = int(plan.t_seconds * a.sample_rate_hz)
    if plan.mode == MODE_SILENCE:
        samples = np.concatenate([a.samples, np.zeros(gap), b.samples])
    elif plan.mode == MODE_OVERLAP:
        gap = min(gap, a.samples.size, b.samples.size)
        overlap = 0.5 * a.samples[a.samples.size - gap:] + 0.5 * b.samples[:gap]
        samples = np.concatenate([a.samples[: a.samples.size - gap], overlap, b.samples[gap:]])
    else:
        raise DataError(f"unknown mix mode {plan.mode!r}")
    return Waveform(samples=samples, sample_rate_hz=a.sample_rate_hz)


def truncate_to_cap(waveform: Waveform, cap_seconds: float = MAX_SECONDS) -> Waveform:
    """Keep at most the first ``cap_seconds`` of audio (tail dropped)."""
    cap = int(cap_seconds * waveform.sample_rate_hz)
    if waveform.samples.size <= cap:
        return waveform
    return Waveform(samples=waveform.samples[:cap], sample_rate_hz=waveform.sample_rate_hz)
