"""Imbalance-aware augmentation: annotation dropout and sample mixing.

Two mechanisms shift training mass toward rare emotions. Annotation
dropout removes a fraction of majority-class votes before the soft label
is rebuilt, robustifying against label noise while never touching
minority votes. Mixing splices a majority-class utterance with a
minority-class partner (sampled proportionally to inverse class
frequency) and averages their label distributions.

All randomness flows through explicit generators; callers derive them
from (seed, epoch, sample_id) so an augmentation stream is reproducible
regardless of data-loading order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .features import EmbeddingSequence, frame_cap
from .labels import (
    MAJORITY_CLASSES,
    MINORITY_CLASSES,
    AnnotationRecord,
    EmotionClass,
    LabeledSample,
    SoftLabel,
)

MODE_SILENCE = "silence"
MODE_OVERLAP = "overlap"


@dataclass
class AugmentConfig:
    """Knobs for the augmentation stream.

    Attributes:
        p_mix: probability of mixing each majority-class sample.
        dropout_rate: fraction of a sample's annotations to drop (majority
            votes only); must be < 1 so at least one vote survives.
        max_gap_seconds: upper bound of the silence/overlap duration drawn
            per mix.
        seed: base seed for the augmentation random streams.
    """

    p_mix: float = 0.3
    dropout_rate: float = 0.2
    max_gap_seconds: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_mix <= 1.0:
            raise DataError(f"p_mix must be in [0, 1], got {self.p_mix}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DataError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.max_gap_seconds < 0:
            raise DataError(f"max_gap_seconds must be >= 0, got {self.max_gap_seconds}")


@dataclass
class MixPlan:
    """Fully-resolved decisions for one mix: what, in which order, and how."""

    first: str
    second: str
    mode: str
    t_seconds: float
    order_swapped: bool

    def to_dict(self) -> dict:
        return {
            "first": self.first,
            "second": self.second,
            "mode": self.mode,
            "t_seconds": self.t_seconds,
            "order_swapped": self.order_swapped,
        }


def annotation_dropout(annotations: list[AnnotationRecord], cfg: AugmentConfig,
                       rng: np.random.Generator) -> list[AnnotationRecord]:
    """Drop a rate-determined number of majority-class votes, order preserved.

    The drop count is ``floor(dropout_rate * len(annotations))``, but only
    votes whose primary is a majority class are eligible; minority and
    "other" votes always survive. With no eligible votes the input is
    returned unchanged.
    """
    if not annotations:
        raise DataError("cannot apply annotation dropout to zero annotations")
    n_drop = int(cfg.dropout_rate * len(annotations))
    eligible = [i for i, a in enumerate(annotations) if a.primary in MAJORITY_CLASSES]
    if n_drop == 0 or not eligible:
        return list(annotations)
    n_drop = min(n_drop, len(eligible), len(annotations) - 1)
    dropped = set(rng.choice(len(eligible), size=n_drop, replace=False).tolist())
    drop_indices = {eligible[k] for k in dropped}
    return [a for i, a in enumerate(annotations) if i not in drop_indices]


def dropout_soft_label(label: SoftLabel, cfg: AugmentConfig,
                       rng: np.random.Generator) -> SoftLabel:
    """Annotation dropout applied directly to a soft label.

    Vote counts are exactly recoverable as ``round(probs * n_annotations)``
    because soft labels are built as count fractions, so the label can be
    thinned without access to the original annotation rows.
    """
    counts = np.rint(label.probs * label.n_annotations).astype(np.int64)
    records = []
    for cls in EmotionClass:
        records.extend(
            AnnotationRecord(sample_id="_", annotator_id=f"{cls.label}-{k}", primary=cls)
            for k in range(counts[cls])
        )
    kept = annotation_dropout(records, cfg, rng)
    kept_counts = np.zeros(len(counts), dtype=np.float64)
    for record in kept:
        kept_counts[record.primary] += 1.0
    return SoftLabel(probs=kept_counts / len(kept), n_annotations=len(kept))


def should_mix(sample: LabeledSample, cfg: AugmentConfig, rng: np.random.Generator) -> bool:
    """True with probability p_mix for majority-consensus samples, else always False."""
    if sample.consensus is None or sample.consensus not in MAJORITY_CLASSES:
        return False
    return bool(rng.random() < cfg.p_mix)


class MinoritySampler:
    """Inverse-frequency sampler over the minority-class portion of a dataset.

    Class weights are proportional to 1/q over the minority classes that
    actually have samples; within a class, samples are drawn uniformly.
    Immutable after construction.
    """

    def __init__(self, samples: list[LabeledSample], q: np.ndarray) -> None:
        by_class: dict[EmotionClass, list[LabeledSample]] = {}
        for sample in samples:
            if sample.consensus in MINORITY_CLASSES:
                by_class.setdefault(sample.consensus, []).append(sample)
        if not by_class:
            raise DataError("minority sampler needs at least one minority-class sample")
        self.by_class = by_class
        self.class_order = sorted(by_class)
        weights = np.array([1.0 / q[c] for c in self.class_order], dtype=np.float64)
        self.class_probs = weights / weights.sum()

    def sample_partner(self, rng: np.random.Generator) -> LabeledSample:
        cls = self.class_order[int(rng.choice(len(self.class_order), p=self.class_probs))]
        group = self.by_class[cls]
        return group[int(rng.integers(0, len(group)))]


def make_mix_plan(maj: LabeledSample, minority: LabeledSample, cfg: AugmentConfig,
                  rng: np.random.Generator) -> MixPlan:
    """Draw the order, mode, and gap duration for one mix (all from ``rng``)."""
    order_swapped = bool(rng.random() < 0.5)
    mode = MODE_SILENCE if rng.random() < 0.5 else MODE_OVERLAP
    t_seconds = float(rng.uniform(0.0, cfg.max_gap_seconds))
    first, second = (minority, maj) if order_swapped else (maj, minority)
    return MixPlan(first=first.sample_id, second=second.sample_id, mode=mode,
                   t_seconds=t_seconds, order_swapped=order_swapped)


def mix_labels(d_maj: SoftLabel, d_min: SoftLabel) -> SoftLabel:
    """Label distribution of a mixed sample: the elementwise mean of the inputs."""
    return SoftLabel(probs=(d_maj.probs + d_min.probs) / 2.0,
                     n_annotations=d_maj.n_annotations + d_min.n_annotations)


def mix_embeddings(maj: EmbeddingSequence, minority: EmbeddingSequence,
                   plan: MixPlan) -> EmbeddingSequence:
    """Splice two embedding sequences along the frame axis per the plan.

    Silence mode inserts ``floor(t * frame_rate)`` all-zero frames between
    the sequences; overlap mode averages a gap-sized tail/head region. The
    result is truncated to the 15 s frame cap (head kept). This is the
    feature-space analogue of waveform mixing and is an approximation:
    zero embedding frames stand in for silent audio.
    """
    if (maj.n_layers, maj.dim) != (minority.n_layers, minority.dim) or \
            maj.frame_rate_hz != minority.frame_rate_hz:
        raise DataError(
            f"cannot mix embeddings with mismatched shape/rate: "
            f"({maj.n_layers}, *, {maj.dim})@{maj.frame_rate_hz} vs "
            f"({minority.n_layers}, *, {minority.dim})@{minority.frame_rate_hz}"
        )
    a, b = (minority, maj) if plan.order_swapped else (maj, minority)
    gap = int(plan.t_seconds * a.frame_rate_hz)
    if plan.mode == MODE_SILENCE:
        silence = np.zeros((a.n_layers, gap, a.dim), dtype=np.float32)
        data = np.concatenate([a.data, silence, b.data], axis=1)
    elif plan.mode == MODE_OVERLAP:
        gap = min(gap, a.n_frames, b.n_frames)
        head = a.data[:, : a.n_frames - gap]
        overlap = (a.data[:, a.n_frames - gap:] + b.data[:, :gap]) / 2.0
        tail = b.data[:, gap:]
        data = np.concatenate([head, overlap, tail], axis=1)
    else:
        raise DataError(f"unknown mix mode {plan.mode!r}")
    data = data[:, : frame_cap(a.frame_rate_hz)]
    return EmbeddingSequence(data=data, frame_rate_hz=a.frame_rate_hz)
