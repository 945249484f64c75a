"""Strict 16 kHz mono PCM WAV reading with a duration cap."""

from __future__ import annotations

import os
import wave

import numpy as np

SAMPLE_RATE_HZ = 16_000


class AudioDecodeError(Exception):
    """Unreadable or off-format audio; the offending sample is skipped."""


def read_wav_capped(path: str | os.PathLike, cap_seconds: float) -> np.ndarray:
    """Read a WAV file as float64 in [-1, 1), truncated to ``cap_seconds``.

    Only 16-bit PCM mono at 16 kHz is accepted; the cap keeps at most the
    first ``cap_seconds * 16000`` samples (applied before any encoder).
    """
    path = os.fspath(path)
    try:
        reader = wave.open(path, "rb")
    except (FileNotFoundError, wave.Error, EOFError) as exc:
        raise AudioDecodeError(f"{path}: {exc}") from None
    with reader:
        if reader.getnchannels() != 1:
            raise AudioDecodeError(f"{path}: channels={reader.getnchannels()}, need mono")
        if reader.getsampwidth() != 2:
            raise AudioDecodeError(f"{path}: sample_width={reader.getsampwidth()}, need 16-bit")
        if reader.getframerate() != SAMPLE_RATE_HZ:
            raise AudioDecodeError(f"{path}: sample_rate={reader.getframerate()}, need {SAMPLE_RATE_HZ}")
        n_frames = min(reader.getnframes(), int(cap_seconds * SAMPLE_RATE_HZ))
        payload = reader.readframes(n_frames)
    if not payload:
        raise AudioDecodeError(f"{path}: empty audio stream")
    return np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
