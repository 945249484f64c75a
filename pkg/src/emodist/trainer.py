"""Training loop: on-the-fly augmentation, re-weighting, and model selection.

Each epoch shuffles the training set (seeded), applies annotation dropout
and then mixing per the augmentation config, re-weights the training
targets (never the dev targets), and takes adaptive-moment gradient steps
over per-sample gradients reduced in a fixed order. After every epoch the
model is scored on dev with unweighted targets, and the checkpoint whose
composite score (macro-F1 blended with minority mAP) is best is kept.
Identical configs and seeds produce bitwise-identical reports and
checkpoints.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, MinoritySampler, dropout_soft_label, make_mix_plan, \
    mix_embeddings, mix_labels, should_mix
from .errors import DataError, NumericError
from .features import EmbeddingSequence, read_embeddings
from .labels import (
    EmotionClass,
    LabeledSample,
    class_weights,
    consensus_of,
    empirical_distribution,
    read_manifest,
    reweight_target,
)
from .metrics import MetricsReport, compute_report
from .model import (
    BatchItem,
    HeadParams,
    LossConfig,
    ModelConfig,
    SampleTargets,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .rng import derive_rng


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    learning_rate: float = 5e-4
    epochs: int = 15
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    selection_weight: float = 0.5
    reweight_targets: bool = True
    renormalize_reweighted: bool = True
    use_text: bool = False
    conv_width: int = 256
    mlp_hidden: int = 256
    predict_secondary: bool = False
    predict_attributes: bool = False
    last_layer_only: bool = False
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise DataError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.selection_weight <= 1.0:
            raise DataError(f"selection_weight must be in [0, 1], got {self.selection_weight}")

    def to_dict(self) -> dict:
        obj = {k: v for k, v in self.__dict__.items() if k not in ("augmentation", "loss")}
        obj["augmentation"] = dict(self.augmentation.__dict__)
        obj["loss"] = dict(self.loss.__dict__)
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        aug = obj.pop("augmentation", {})
        loss = obj.pop("loss", {})
        return cls(augmentation=AugmentConfig(**aug), loss=LossConfig(**loss), **obj)


@dataclass
class EpochRecord:
    """Per-epoch view recorded in the train report."""

    epoch: int
    train_loss: float
    dev_metrics: MetricsReport
    selection_score: float


@dataclass
class TrainReport:
    """Outcome of a training run; serializes to deterministic JSON."""

    epochs: list[EpochRecord]
    selected_epoch: int
    checkpoint_path: str
    selection_weight: float

    def to_dict(self) -> dict:
        return {
            "epochs": [
                {
                    "epoch": rec.epoch,
                    "train_loss": rec.train_loss,
                    "dev_metrics": rec.dev_metrics.to_dict(),
                    "selection_score": rec.selection_score,
                }
                for rec in self.epochs
            ],
            "selected_epoch": self.selected_epoch,
            "checkpoint_path": self.checkpoint_path,
            "selection_weight": self.selection_weight,
        }

    def write_json(self, path: str | os.PathLike) -> None:
        path = os.fspath(path)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def from_json_file(cls, path: str | os.PathLike) -> "TrainReport":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(
            epochs=[
                EpochRecord(
                    epoch=rec["epoch"],
                    train_loss=rec["train_loss"],
                    dev_metrics=MetricsReport.from_dict(rec["dev_metrics"]),
                    selection_score=rec["selection_score"],
                )
                for rec in obj["epochs"]
            ],
            selected_epoch=obj["selected_epoch"],
            checkpoint_path=obj["checkpoint_path"],
            selection_weight=obj["selection_weight"],
        )


class AdamOptimizer:
    """Adaptive moment estimation over a named parameter dict."""

    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.adam_eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in tensors.items():
            grad = grads[name]
            m = self.m.setdefault(name, np.zeros_like(tensor))
            v = self.v.setdefault(name, np.zeros_like(tensor))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            tensor -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


class EmbeddingStore:
    """Lazy cache of embedding files keyed by resolved path."""

    def __init__(self) -> None:
        self._cache: dict[str, EmbeddingSequence] = {}

    def get(self, path: str | None) -> EmbeddingSequence:
        if path is None:
            raise DataError("sample has no embedding_path")
        if path not in self._cache:
            self._cache[path] = read_embeddings(path)
        return self._cache[path]


def _model_config(cfg: TrainConfig, samples: list[LabeledSample],
                  store: EmbeddingStore) -> ModelConfig:
    first = store.get(samples[0].embedding_path)
    text_layers = text_dim = None
    if cfg.use_text:
        first_text = store.get(samples[0].text_embedding_path)
        text_layers, text_dim = first_text.n_layers, first_text.dim
    return ModelConfig(
        speech_layers=first.n_layers,
        speech_dim=first.dim,
        text_layers=text_layers,
        text_dim=text_dim,
        conv_width=cfg.conv_width,
        mlp_hidden=cfg.mlp_hidden,
        predict_secondary=cfg.predict_secondary,
        predict_attributes=cfg.predict_attributes,
        last_layer_only=cfg.last_layer_only,
    )


def _augmented_item(sample: LabeledSample, cfg: TrainConfig, epoch: int,
                    store: EmbeddingStore, sampler: MinoritySampler | None,
                    weights) -> BatchItem:
    """Dropout, then mixing, then target re-weighting for one training sample."""
    aug = cfg.augmentation
    rng = derive_rng(aug.seed, "augment", epoch, sample.sample_id)
    label = sample.soft_label
    secondary = sample.secondary_label
    attributes = sample.attributes
    speech = store.get(sample.embedding_path)

    if aug.dropout_rate > 0 and label.n_annotations > 1:
        label = dropout_soft_label(label, aug, rng)

    view = LabeledSample(sample_id=sample.sample_id, soft_label=label,
                         consensus=consensus_of(label), split=sample.split)
    if sampler is not None and should_mix(view, aug, rng):
        partner = sampler.sample_partner(rng)
        plan = make_mix_plan(view, partner, aug, rng)
        speech = mix_embeddings(speech, store.get(partner.embedding_path), plan)
        label = mix_labels(label, partner.soft_label)
        secondary = None
        attributes = None

    primary = label.probs
    if cfg.reweight_targets and weights is not None:
        primary = reweight_target(primary, weights, renormalize=cfg.renormalize_reweighted)
    targets = SampleTargets(
        primary=primary,
        secondary=secondary if cfg.predict_secondary else None,
        attributes=attributes if cfg.predict_attributes else None,
    )
    text = store.get(sample.text_embedding_path) if cfg.use_text else None
    return BatchItem(speech=speech, targets=targets, text=text)


def _predict_samples(samples: list[LabeledSample], params: HeadParams,
                     store: EmbeddingStore, use_text: bool) -> dict[str, np.ndarray]:
    """Forward every sample (no augmentation, no re-weighting)."""
    preds = {}
    for sample in samples:
        text = store.get(sample.text_embedding_path) if use_text else None
        output = forward(store.get(sample.embedding_path), text, params)
        preds[sample.sample_id] = output.primary_probs
    return preds


def score_predictions(samples: list[LabeledSample],
                      preds: dict[str, np.ndarray]) -> MetricsReport:
    """Score predictions against consensus gold, skipping other/no-agreement."""
    gold, rows = [], []
    for sample in samples:
        if sample.consensus is None or sample.consensus == EmotionClass.OTHER:
            continue
        if sample.sample_id not in preds:
            raise DataError(f"no prediction for sample {sample.sample_id!r}")
        gold.append(int(sample.consensus))
        rows.append(preds[sample.sample_id])
    if not gold:
        raise DataError("no scorable samples (every consensus is 'other' or no-agreement)")
    return compute_report(gold, np.asarray(rows))


def selection_score(report: MetricsReport, weight: float) -> float:
    """Blend of macro-F1 and minority mAP; falls back to macro-F1 alone
    when no minority class has a dev positive."""
    if report.minority_map is None:
        return report.macro_f1
    return weight * report.macro_f1 + (1.0 - weight) * report.minority_map


def train(train_manifest: str | os.PathLike, dev_manifest: str | os.PathLike,
          cfg: TrainConfig, out_dir: str | os.PathLike) -> TrainReport:
    """Run the full training protocol and persist the best checkpoint.

    Returns the TrainReport; the checkpoint and ``train_report.json`` are
    written under ``out_dir`` (checkpoint path stored relative to it).
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    train_samples = read_manifest(train_manifest)
    dev_samples = read_manifest(dev_manifest)
    store = EmbeddingStore()

    q = empirical_distribution(train_samples)
    weights = class_weights(q) if cfg.reweight_targets else None
    sampler = None
    if cfg.augmentation.p_mix > 0:
        try:
            sampler = MinoritySampler(train_samples, q)
        except DataError:
            sampler = None  # no minority samples: mixing silently disabled

    config = _model_config(cfg, train_samples, store)
    params = HeadParams.initialize(config, derive_rng(cfg.seed, "init"))
    optimizer = AdamOptimizer(cfg)

    best_epoch = -1
    best_score = -math.inf
    best_params: HeadParams | None = None
    records = []
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(train_samples))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch_ids = order[start: start + cfg.batch_size]
            batch = [
                _augmented_item(train_samples[i], cfg, epoch, store, sampler, weights)
                for i in batch_ids
            ]
            loss, grads = backward(batch, params, cfg.loss)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss!r} at epoch {epoch}, batch {n_batches}")
            optimizer.step(params.named(), grads)
            epoch_loss += loss
            n_batches += 1
        dev_preds = _predict_samples(dev_samples, params, store, cfg.use_text)
        report = score_predictions(dev_samples, dev_preds)
        score = selection_score(report, cfg.selection_weight)
        records.append(EpochRecord(epoch=epoch, train_loss=epoch_loss / n_batches,
                                   dev_metrics=report, selection_score=score))
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_params = params.copy()

    checkpoint_name = "checkpoint.sckp"
    save_checkpoint(os.path.join(out_dir, checkpoint_name), best_params)
    train_report = TrainReport(
        epochs=records,
        selected_epoch=best_epoch,
        checkpoint_path=checkpoint_name,
        selection_weight=cfg.selection_weight,
    )
    train_report.write_json(os.path.join(out_dir, "train_report.json"))
    return train_report


def evaluate(checkpoint: str | os.PathLike, manifest: str | os.PathLike,
             use_text: bool | None = None) -> tuple[MetricsReport, dict[str, np.ndarray]]:
    """Evaluate a checkpoint over a manifest.

    Returns the metrics over scorable samples plus the per-sample
    probability vectors for every sample (scorable or not), keyed by
    sample_id, for prediction dumps and ensembling.
    """
    params = load_checkpoint(checkpoint)
    samples = read_manifest(manifest)
    store = EmbeddingStore()
    if use_text is None:
        use_text = params.config.multimodal
    preds = _predict_samples(samples, params, store, use_text)
    return score_predictions(samples, preds), preds
