"""Embedding-sequence container, binary IO, and synthetic fixtures.

Encoder hidden states travel through the toolkit as an
``EmbeddingSequence``: a layers x frames x dim float32 tensor plus the
frame rate. Serialization is a small little-endian binary format (magic
``SEMB``) chosen for bit-exact round trips. The synthetic generator
produces Gaussian class-cluster datasets so the whole pipeline can be
exercised and verified without any pretrained encoder.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .labels import (
    N_CLASSES,
    EmotionClass,
    LabeledSample,
    SoftLabel,
    consensus_of,
    write_manifest,
)
from .rng import derive_rng

MAGIC = b"SEMB"
FORMAT_VERSION = 1
MAX_SECONDS = 15.0


def frame_cap(frame_rate_hz: float) -> int:
    """Frame count corresponding to the 15 s input cap at a given frame rate."""
    return int(math.ceil(MAX_SECONDS * frame_rate_hz))


@dataclass
class EmbeddingSequence:
    """Precomputed encoder hidden states for one utterance.

    Attributes:
        data: float32 array of shape (n_layers, n_frames, dim).
        frame_rate_hz: frames per second of the encoder output; used to
            convert mixing gaps from seconds to frames.
    """

    data: np.ndarray
    frame_rate_hz: float

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"embedding data must be (layers, frames, dim) with positive sizes, got {self.data.shape}")
        if not self.frame_rate_hz > 0:
            raise DataError(f"frame rate must be positive, got {self.frame_rate_hz}")

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


_HEADER = struct.Struct("<4sIIIIf")


def write_embeddings(path: str | os.PathLike, emb: EmbeddingSequence) -> None:
    """Write an embedding sequence to its binary container (atomic replace)."""
    path = os.fspath(path)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, emb.n_layers, emb.n_frames, emb.dim,
                          float(emb.frame_rate_hz))
    payload = np.ascontiguousarray(emb.data, dtype="<f4").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_embeddings(path: str | os.PathLike) -> EmbeddingSequence:
    """Read a binary embedding container, validating magic, version and size."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise DataError(f"embedding file not found: {path}") from None
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header (got {len(raw)} bytes, need {_HEADER.size})")
    magic, version, n_layers, n_frames, dim, frame_rate = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: version mismatch (file {version}, reader {FORMAT_VERSION})")
    expected = n_layers * n_frames * dim * 4
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise DataError(f"{path}: truncated payload (expected {expected} bytes, got {actual})")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n_layers, n_frames, dim).copy()
    return EmbeddingSequence(data=data, frame_rate_hz=frame_rate)


@dataclass
class SynthSpec:
    """Recipe for a synthetic Gaussian-cluster embedding dataset.

    Each sample of class c gets frames drawn i.i.d. from
    N(mixture mean, noise_sigma^2 I), where the mixture mean is the
    soft-label-weighted average of the class means (equal to the class
    mean for one-hot labels). ``ambiguity`` > 0 makes each annotator vote
    for a uniformly random other class with that probability, producing
    genuinely soft labels.
    """

    dim: int
    class_means: np.ndarray
    noise_sigma: float
    seed: int
    frames_range: tuple[int, int] = (4, 10)
    n_layers: int = 2
    frame_rate_hz: float = 50.0
    votes_per_sample: int = 5
    ambiguity: float = 0.0
    n_classes: int = N_CLASSES

    def __post_init__(self) -> None:
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        if self.class_means.shape != (self.n_classes, self.dim):
            raise DataError(f"class_means must be ({self.n_classes}, {self.dim}), got {self.class_means.shape}")
        if self.frames_range[0] < 1 or self.frames_range[1] < self.frames_range[0]:
            raise DataError(f"bad frames_range {self.frames_range}")
        if not 0.0 <= self.ambiguity < 1.0:
            raise DataError(f"ambiguity must be in [0, 1), got {self.ambiguity}")


def make_synth_spec(preset: str, dim: int, seed: int, noise_sigma: float | None = None,
                    **overrides) -> SynthSpec:
    """Build a SynthSpec from a named preset.

    Presets:
        separable: well-spread class means (pairwise distance > 4 sigma)
            and one-hot votes; a sanity fixture any reasonable model
            should ace.
        overlapping: closer means, wider noise, and ambiguous votes, so
            classes genuinely confuse each other.
    """
    rng = derive_rng(seed, "synth-spec", preset, dim)
    directions = rng.standard_normal((N_CLASSES, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    if preset == "separable":
        sigma = 0.05 if noise_sigma is None else noise_sigma
        means = directions * 2.0
        spread = min(
            np.linalg.norm(means[i] - means[j])
            for i in range(N_CLASSES)
            for j in range(i + 1, N_CLASSES)
        )
        if spread <= 4.0 * sigma:
            raise DataError(f"separable preset needs pairwise mean distance > 4 sigma, got {spread:.3f}")
        params = dict(dim=dim, class_means=means, noise_sigma=sigma, seed=seed, ambiguity=0.0)
    elif preset == "overlapping":
        sigma = 0.8 if noise_sigma is None else noise_sigma
        means = directions * 1.0
        params = dict(dim=dim, class_means=means, noise_sigma=sigma, seed=seed, ambiguity=0.25)
    else:
        raise DataError(f"unknown synth preset {preset!r}")
    params.update(overrides)
    return SynthSpec(**params)


def _synth_sample(spec: SynthSpec, true_class: int, sample_id: str, split: str) -> tuple[LabeledSample, EmbeddingSequence]:
    rng = derive_rng(spec.seed, "synth-sample", split, sample_id)
    votes = np.full(spec.votes_per_sample, true_class, dtype=np.int64)
    if spec.ambiguity > 0:
        flip = rng.random(spec.votes_per_sample) < spec.ambiguity
        alternatives = rng.integers(0, spec.n_classes - 1, size=spec.votes_per_sample)
        alternatives[alternatives >= true_class] += 1
        votes[flip] = alternatives[flip]
    counts = np.bincount(votes, minlength=spec.n_classes).astype(np.float64)
    label = SoftLabel(probs=counts / len(votes), n_annotations=len(votes))

    n_frames = int(rng.integers(spec.frames_range[0], spec.frames_range[1] + 1))
    mean = label.probs @ spec.class_means
    frames = rng.normal(loc=mean, scale=spec.noise_sigma,
                        size=(spec.n_layers, n_frames, spec.dim))
    emb = EmbeddingSequence(data=frames.astype(np.float32), frame_rate_hz=spec.frame_rate_hz)
    sample = LabeledSample(
        sample_id=sample_id,
        soft_label=label,
        consensus=consensus_of(label),
        split=split,
    )
    return sample, emb


def synth_dataset(spec: SynthSpec, n_per_class: list[int], split: str,
                  out_dir: str | os.PathLike, manifest_name: str | None = None) -> list[LabeledSample]:
    """Materialize a synthetic dataset: SEMB files plus a JSONL manifest.

    ``n_per_class`` gives the sample count for each of the 9 classes.
    Every byte of output is determined by (spec, n_per_class, split).
    Returns the samples with resolved embedding paths.
    """
    if len(n_per_class) != spec.n_classes:
        raise DataError(f"n_per_class must have {spec.n_classes} entries, got {len(n_per_class)}")
    out_dir = os.fspath(out_dir)
    emb_dir = os.path.join(out_dir, "embeddings")
    os.makedirs(emb_dir, exist_ok=True)
    samples = []
    for cls in range(spec.n_classes):
        name = EmotionClass(cls).label
        for i in range(n_per_class[cls]):
            sample_id = f"{split}-{name}-{i:04d}"
            sample, emb = _synth_sample(spec, cls, sample_id, split)
            emb_path = os.path.join(emb_dir, f"{sample_id}.semb")
            write_embeddings(emb_path, emb)
            sample.embedding_path = os.path.abspath(emb_path)
            samples.append(sample)
    manifest_path = os.path.join(out_dir, manifest_name or f"{split}.jsonl")
    write_manifest(manifest_path, samples)
    return samples
