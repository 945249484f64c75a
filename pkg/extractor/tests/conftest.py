import json
import wave

import numpy as np
import pytest


def write_wav(path, samples, rate=16_000):
    ints = np.clip(np.rint(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(rate)
        writer.writeframes(ints.tobytes())


def sine(seconds, freq, rate=16_000, amplitude=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return amplitude * np.sin(2 * np.pi * freq * t)


def manifest_entry(sample_id, consensus_idx, audio_path=None, transcript=None):
    probs = [0.0] * 9
    probs[consensus_idx] = 1.0
    names = ["neutral", "happy", "sad", "angry", "disgust", "contempt", "fear",
             "surprise", "other"]
    obj = {
        "sample_id": sample_id,
        "split": "train",
        "probs": probs,
        "n_annotations": 5,
        "consensus": names[consensus_idx],
        "secondary": None,
        "attributes": None,
        "embedding_path": None,
        "audio_path": audio_path,
    }
    if transcript is not None:
        obj["transcript"] = transcript
    return obj


@pytest.fixture
def speech_manifest(tmp_path):
    """Three short utterances with distinct tones, plus a manifest."""
    audio_dir = tmp_path / "audio"
    audio_dir.mkdir()
    entries = []
    for i, (sample_id, freq) in enumerate([("s0", 220.0), ("s1", 440.0), ("s2", 880.0)]):
        path = audio_dir / f"{sample_id}.wav"
        write_wav(path, sine(0.5, freq))
        entries.append(manifest_entry(sample_id, i, audio_path=f"audio/{sample_id}.wav",
                                      transcript=f"sample number {i} says hello"))
    manifest = tmp_path / "train.jsonl"
    with open(manifest, "w") as fh:
        for obj in entries:
            fh.write(json.dumps(obj) + "\n")
    return manifest
