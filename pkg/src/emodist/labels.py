"""Multi-annotator emotion labels and their distribution algebra.

The toolkit works on a fixed 9-way label space: eight scored emotion
classes plus ``other``. Annotator votes for one utterance are aggregated
into a soft label (a probability vector over the 9 classes), from which
everything else is derived: consensus classes, empirical class
distributions, inverse-frequency class weights, and re-weighted training
targets.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import DataError

N_CLASSES = 9

# Smoothing applied to empirical distributions so inverse weights stay finite
# for classes that never occur.
SMOOTHING_EPS = 1e-6


class EmotionClass(IntEnum):
    """The 9 emotion classes, with stable indices used everywhere."""

    NEUTRAL = 0
    HAPPY = 1
    SAD = 2
    ANGRY = 3
    DISGUST = 4
    CONTEMPT = 5
    FEAR = 6
    SURPRISE = 7
    OTHER = 8

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, token: str) -> "EmotionClass":
        try:
            return cls[token.upper()]
        except KeyError:
            raise DataError(f"unknown emotion token {token!r}") from None


MAJORITY_CLASSES = frozenset(
    {EmotionClass.NEUTRAL, EmotionClass.HAPPY, EmotionClass.SAD, EmotionClass.ANGRY}
)
MINORITY_CLASSES = frozenset(
    {EmotionClass.DISGUST, EmotionClass.CONTEMPT, EmotionClass.FEAR, EmotionClass.SURPRISE}
)
# Classes eligible for scoring and prediction argmax; excludes "other".
SCORED_CLASSES = tuple(EmotionClass(i) for i in range(8))


@dataclass
class AnnotationRecord:
    """One annotator's judgment of one utterance.

    Attributes:
        sample_id: Utterance identifier.
        annotator_id: Annotator identifier; (sample_id, annotator_id) is
            unique within a dataset.
        primary: The annotator's primary emotion choice.
        secondary: Additional emotions the annotator perceived (may be empty).
        arousal / valence / dominance: Ratings on a 1-7 scale, or None
            when the annotator gave no attribute ratings.
    """

    sample_id: str
    annotator_id: str
    primary: EmotionClass
    secondary: frozenset[EmotionClass] = frozenset()
    arousal: float | None = None
    valence: float | None = None
    dominance: float | None = None


@dataclass
class SoftLabel:
    """Probability distribution over the 9 classes built from annotator votes."""

    probs: np.ndarray
    n_annotations: int

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (N_CLASSES,):
            raise DataError(f"soft label must have {N_CLASSES} entries, got shape {self.probs.shape}")
        if np.any(self.probs < 0):
            raise DataError("soft label entries must be non-negative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise DataError(f"soft label must sum to 1, got {self.probs.sum()!r}")
        if self.n_annotations < 1:
            raise DataError("soft label needs at least one annotation")


@dataclass
class ClassWeights:
    """Empirical class distribution q and its normalized inverse weights w."""

    q: np.ndarray
    w: np.ndarray


@dataclass
class LabeledSample:
    """One utterance with its aggregated targets and media pointers.

    ``consensus`` is None when no strict plurality exists among the
    annotators ("no agreement"); such samples are trainable but are
    excluded from scoring. Paths are stored as resolved absolute paths in
    memory; manifest IO relativizes them against the manifest location.
    """

    sample_id: str
    soft_label: SoftLabel
    consensus: EmotionClass | None
    split: str
    secondary_label: np.ndarray | None = None
    attributes: np.ndarray | None = None
    embedding_path: str | None = None
    text_embedding_path: str | None = None
    audio_path: str | None = None
    transcript: str | None = None
    mix_plan: dict | None = None


def parse_annotations(path: str | os.PathLike) -> list[AnnotationRecord]:
    """Parse an annotation CSV into one record per row.

    The file must be UTF-8 with the header
    ``sample_id,annotator_id,primary,secondary,arousal,valence,dominance``.
    ``secondary`` is a ``;``-separated list (empty allowed); the three
    attribute columns are either all filled or all empty per row.

    Raises:
        DataError: missing file, bad header, duplicate (sample_id,
            annotator_id), unknown emotion token, or attribute out of [1,7];
            row-level problems name the offending row number.
    """
    expected_header = ["sample_id", "annotator_id", "primary", "secondary", "arousal", "valence", "dominance"]
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise DataError(f"annotation file not found: {path}") from None
    records: list[AnnotationRecord] = []
    seen: set[tuple[str, str]] = set()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected_header:
            raise DataError(f"bad annotation header {header!r}, expected {expected_header!r}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(expected_header):
                raise DataError(f"row {row_no}: expected {len(expected_header)} fields, got {len(row)}")
            sample_id, annotator_id, primary_tok, secondary_tok = (cell.strip() for cell in row[:4])
            key = (sample_id, annotator_id)
            if key in seen:
                raise DataError(f"row {row_no}: duplicate annotation for {key!r}")
            seen.add(key)
            try:
                primary = EmotionClass.from_label(primary_tok)
                secondary = frozenset(
                    EmotionClass.from_label(tok.strip())
                    for tok in secondary_tok.split(";")
                    if tok.strip()
                )
            except DataError as exc:
                raise DataError(f"row {row_no}: {exc}") from None
            attrs = [cell.strip() for cell in row[4:7]]
            values: list[float | None] = []
            for name, cell in zip(("arousal", "valence", "dominance"), attrs):
                if not cell:
                    values.append(None)
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(f"row {row_no}: bad {name} value {cell!r}") from None
                if not 1.0 <= value <= 7.0:
                    raise DataError(f"row {row_no}: {name} {value} out of range [1, 7]")
                values.append(value)
            records.append(
                AnnotationRecord(
                    sample_id=sample_id,
                    annotator_id=annotator_id,
                    primary=primary,
                    secondary=secondary,
                    arousal=values[0],
                    valence=values[1],
                    dominance=values[2],
                )
            )
    return records


def build_soft_label(annotations: list[AnnotationRecord]) -> SoftLabel:
    """Aggregate primary votes for one sample into a soft label.

    ``probs[c]`` is the fraction of annotators whose primary vote was c.
    """
    if not annotations:
        raise DataError("cannot build a soft label from zero annotations")
    sample_ids = {a.sample_id for a in annotations}
    if len(sample_ids) != 1:
        raise DataError(f"annotations span multiple samples: {sorted(sample_ids)!r}")
    counts = np.zeros(N_CLASSES, dtype=np.float64)
    for record in annotations:
        counts[record.primary] += 1.0
    return SoftLabel(probs=counts / len(annotations), n_annotations=len(annotations))


def consensus_of(label: SoftLabel) -> EmotionClass | None:
    """Return the strict-plurality class of a soft label, or None on ties."""
    probs = label.probs
    top = int(np.argmax(probs))
    if np.sum(probs == probs[top]) > 1:
        return None
    return EmotionClass(top)


def empirical_distribution(samples: list[LabeledSample]) -> np.ndarray:
    """Mean soft-label distribution over a dataset, smoothed away from zero.

    The raw mean is smoothed as ``(q + eps) / (1 + 9 eps)`` so every entry
    is strictly positive and inverse weights stay finite.
    """
    if not samples:
        raise DataError("cannot compute an empirical distribution of zero samples")
    mean = np.zeros(N_CLASSES, dtype=np.float64)
    for sample in samples:
        mean += sample.soft_label.probs
    mean /= len(samples)
    return (mean + SMOOTHING_EPS) / (1.0 + N_CLASSES * SMOOTHING_EPS)


def class_weights(q: np.ndarray) -> ClassWeights:
    """Normalized inverse-frequency weights: ``w[i] = (1/q[i]) / sum_j 1/q[j]``."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise DataError("class weights need strictly positive class frequencies")
    inverse = 1.0 / q
    return ClassWeights(q=q, w=inverse / inverse.sum())


def reweight_target(probs: np.ndarray, weights: ClassWeights, renormalize: bool = True) -> np.ndarray:
    """Elementwise product of a target distribution with the class weights.

    With ``renormalize`` (the default) the product is rescaled to sum to 1
    so the training target remains a distribution; zero entries stay zero
    either way.
    """
    probs = np.asarray(probs, dtype=np.float64)
    product = probs * weights.w
    total = product.sum()
    if total <= 0:
        raise DataError("re-weighted target is all zero (disjoint supports)")
    return product / total if renormalize else product


def aggregate_secondary(annotations: list[AnnotationRecord]) -> np.ndarray | None:
    """Normalized vote counts over all secondary mentions, or None if there are none."""
    if not annotations:
        raise DataError("cannot aggregate zero annotations")
    counts = np.zeros(N_CLASSES, dtype=np.float64)
    for record in annotations:
        for cls in record.secondary:
            counts[cls] += 1.0
    total = counts.sum()
    if total == 0:
        return None
    return counts / total


def aggregate_attributes(annotations: list[AnnotationRecord]) -> np.ndarray | None:
    """Mean arousal/valence/dominance rescaled from [1,7] to [0,1], or None.

    A record contributes only when it carries all three ratings; the
    result is None when no record does.
    """
    if not annotations:
        raise DataError("cannot aggregate zero annotations")
    triples = [
        (a.arousal, a.valence, a.dominance)
        for a in annotations
        if a.arousal is not None and a.valence is not None and a.dominance is not None
    ]
    if not triples:
        return None
    mean = np.mean(np.asarray(triples, dtype=np.float64), axis=0)
    return (mean - 1.0) / 6.0


def group_annotations(records: list[AnnotationRecord]) -> dict[str, list[AnnotationRecord]]:
    """Group records by sample_id, preserving first-seen sample order."""
    grouped: dict[str, list[AnnotationRecord]] = {}
    for record in records:
        grouped.setdefault(record.sample_id, []).append(record)
    return grouped


def build_samples(records: list[AnnotationRecord], split: str) -> list[LabeledSample]:
    """Aggregate parsed annotations into one LabeledSample per utterance."""
    samples = []
    for sample_id, group in group_annotations(records).items():
        label = build_soft_label(group)
        samples.append(
            LabeledSample(
                sample_id=sample_id,
                soft_label=label,
                consensus=consensus_of(label),
                split=split,
                secondary_label=aggregate_secondary(group),
                attributes=aggregate_attributes(group),
            )
        )
    return samples


# --- JSONL manifest IO -----------------------------------------------------

_NO_AGREEMENT = "no_agreement"


def _relativize(path: str | None, base_dir: str) -> str | None:
    if path is None:
        return None
    return os.path.relpath(path, base_dir).replace(os.sep, "/")


def sample_to_manifest_obj(sample: LabeledSample, base_dir: str) -> dict:
    """Serialize one sample to its manifest JSON object (paths relative to base_dir)."""
    obj = {
        "sample_id": sample.sample_id,
        "split": sample.split,
        "probs": [float(p) for p in sample.soft_label.probs],
        "n_annotations": int(sample.soft_label.n_annotations),
        "consensus": sample.consensus.label if sample.consensus is not None else _NO_AGREEMENT,
        "secondary": None if sample.secondary_label is None else [float(p) for p in sample.secondary_label],
        "attributes": None if sample.attributes is None else [float(a) for a in sample.attributes],
        "embedding_path": _relativize(sample.embedding_path, base_dir),
        "audio_path": _relativize(sample.audio_path, base_dir),
    }
    if sample.text_embedding_path is not None:
        obj["text_embedding_path"] = _relativize(sample.text_embedding_path, base_dir)
    if sample.transcript is not None:
        obj["transcript"] = sample.transcript
    if sample.mix_plan is not None:
        obj["mix_plan"] = sample.mix_plan
    return obj


def write_manifest(path: str | os.PathLike, samples: list[LabeledSample]) -> None:
    """Write samples as JSON Lines; media paths become relative to the manifest dir."""
    path = os.fspath(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_manifest_obj(sample, base_dir), sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)


def _resolve(rel: str | None, base_dir: str) -> str | None:
    if rel is None:
        return None
    return os.path.normpath(os.path.join(base_dir, rel))


def read_manifest(path: str | os.PathLike) -> list[LabeledSample]:
    """Read a JSON Lines manifest back into LabeledSamples.

    Validates the schema, the soft-label simplex, and that the stored
    consensus matches the strict-plurality rule applied to the stored
    probabilities.
    """
    path = os.fspath(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    samples = []
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: bad JSON ({exc})") from None
            try:
                label = SoftLabel(probs=np.asarray(obj["probs"], dtype=np.float64),
                                  n_annotations=int(obj["n_annotations"]))
                consensus_tok = obj["consensus"]
                consensus = None if consensus_tok == _NO_AGREEMENT else EmotionClass.from_label(consensus_tok)
                sample = LabeledSample(
                    sample_id=str(obj["sample_id"]),
                    soft_label=label,
                    consensus=consensus,
                    split=str(obj["split"]),
                    secondary_label=None if obj.get("secondary") is None else np.asarray(obj["secondary"], dtype=np.float64),
                    attributes=None if obj.get("attributes") is None else np.asarray(obj["attributes"], dtype=np.float64),
                    embedding_path=_resolve(obj.get("embedding_path"), base_dir),
                    text_embedding_path=_resolve(obj.get("text_embedding_path"), base_dir),
                    audio_path=_resolve(obj.get("audio_path"), base_dir),
                    transcript=obj.get("transcript"),
                    mix_plan=obj.get("mix_plan"),
                )
            except KeyError as exc:
                raise DataError(f"{path}:{line_no}: missing manifest field {exc}") from None
            except DataError as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from None
            if sample.consensus is not consensus_of(label):
                raise DataError(
                    f"{path}:{line_no}: stored consensus {consensus_tok!r} does not match the "
                    f"strict-plurality rule for the stored probabilities"
                )
            samples.append(sample)
    if not samples:
        raise DataError(f"manifest {path} contains no samples")
    return samples
