import json
import math

import numpy as np
import pytest

from emodist.augment import AugmentConfig
from emodist.errors import DataError, NumericError
from emodist.features import (
    EmbeddingSequence,
    make_synth_spec,
    synth_dataset,
    write_embeddings,
)
from emodist.labels import (
    LabeledSample,
    SoftLabel,
    class_weights,
    consensus_of,
    empirical_distribution,
    read_manifest,
    write_manifest,
)
from emodist.model import (
    BatchItem,
    HeadParams,
    SampleTargets,
    backward,
    load_checkpoint,
)
from emodist.rng import derive_rng
from emodist.trainer import (
    AdamOptimizer,
    EmbeddingStore,
    TrainConfig,
    _augmented_item,
    evaluate,
    score_predictions,
    selection_score,
    train,
)


def tiny_cfg(**kw):
    defaults = dict(
        epochs=3,
        batch_size=8,
        seed=7,
        conv_width=8,
        mlp_hidden=8,
        reweight_targets=False,
        augmentation=AugmentConfig(p_mix=0.0, dropout_rate=0.0, seed=7),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = make_synth_spec("separable", dim=6, seed=13, noise_sigma=0.0,
                           frames_range=(2, 4), n_layers=2)
    synth_dataset(spec, [12] * 9, "train", root)
    synth_dataset(spec, [4] * 9, "dev", root)
    return root


class TestTrainBasics:
    def test_zero_learning_rate_freezes_params(self, dataset, tmp_path):
        cfg = tiny_cfg(learning_rate=0.0)
        report = train(dataset / "train.jsonl", dataset / "dev.jsonl", cfg, tmp_path)
        params = load_checkpoint(tmp_path / "checkpoint.sckp")
        fresh = HeadParams.initialize(params.config, derive_rng(cfg.seed, "init"))
        for name, tensor in fresh.named().items():
            stored = params.named()[name]
            assert np.array_equal(stored, tensor.astype(np.float32).astype(np.float64))
        first = report.epochs[0].dev_metrics
        for record in report.epochs[1:]:
            assert record.dev_metrics.macro_f1 == first.macro_f1
            assert record.dev_metrics.accuracy == first.accuracy

    def test_same_seed_bitwise_identical(self, dataset, tmp_path):
        cfg = tiny_cfg(epochs=2, augmentation=AugmentConfig(p_mix=0.5, dropout_rate=0.2, seed=7),
                       reweight_targets=True)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        train(dataset / "train.jsonl", dataset / "dev.jsonl", cfg, out_a)
        train(dataset / "train.jsonl", dataset / "dev.jsonl", cfg, out_b)
        assert (out_a / "train_report.json").read_bytes() == (out_b / "train_report.json").read_bytes()
        assert (out_a / "checkpoint.sckp").read_bytes() == (out_b / "checkpoint.sckp").read_bytes()

    def test_learns_separable_data(self, dataset, tmp_path):
        cfg = tiny_cfg(epochs=15, conv_width=32, mlp_hidden=32)
        report = train(dataset / "train.jsonl", dataset / "dev.jsonl", cfg, tmp_path)
        best = report.epochs[report.selected_epoch]
        assert best.dev_metrics.macro_f1 >= 0.99

    def test_selected_epoch_maximizes_score(self, dataset, tmp_path):
        report = train(dataset / "train.jsonl", dataset / "dev.jsonl", tiny_cfg(), tmp_path)
        scores = [rec.selection_score for rec in report.epochs]
        best = report.selected_epoch
        assert scores[best] == max(scores)
        assert all(scores[i] < scores[best] for i in range(best))  # ties go earliest

    def test_initial_loss_near_ln9_on_one_hot(self, dataset, tmp_path):
        cfg = tiny_cfg(learning_rate=0.0, epochs=1)
        report = train(dataset / "train.jsonl", dataset / "dev.jsonl", cfg, tmp_path)
        assert 2.0 <= report.epochs[0].train_loss <= 2.4
        assert report.epochs[0].train_loss == pytest.approx(math.log(9), abs=1e-6)


class TestMultimodal:
    def test_text_stream_trains_and_evaluates(self, dataset, tmp_path):
        """Samples with a text embedding stream train through the fused path."""
        rng = derive_rng(99, "text-fixture")
        text_dir = tmp_path / "text"
        text_dir.mkdir()
        rewritten = []
        for split in ("train", "dev"):
            samples = read_manifest(dataset / f"{split}.jsonl")
            for sample in samples:
                cls = int(np.argmax(sample.soft_label.probs))
                tokens = int(rng.integers(2, 6))
                base = np.zeros((1, tokens, 5), dtype=np.float32)
                base[0, :, cls % 5] = 1.0 + 0.01 * rng.standard_normal(tokens).astype(np.float32)
                path = text_dir / f"{sample.sample_id}.semb"
                write_embeddings(path, EmbeddingSequence(data=base, frame_rate_hz=1.0))
                sample.text_embedding_path = str(path)
            write_manifest(tmp_path / f"{split}.jsonl", samples)
            rewritten.append(tmp_path / f"{split}.jsonl")
        cfg = tiny_cfg(epochs=2, use_text=True,
                       augmentation=AugmentConfig(p_mix=0.5, dropout_rate=0.0, seed=7))
        report = train(rewritten[0], rewritten[1], cfg, tmp_path / "run")
        assert len(report.epochs) == 2
        params = load_checkpoint(tmp_path / "run" / "checkpoint.sckp")
        assert params.config.multimodal
        assert params.config.text_dim == 5
        metrics, preds = evaluate(tmp_path / "run" / "checkpoint.sckp", rewritten[1])
        assert metrics.n_scored > 0


class TestPlainKlEquivalence:
    def test_no_aug_no_reweight_equals_direct_loop(self, dataset, tmp_path):
        """With augmentation and re-weighting disabled, train() is plain KL
        training: an independent loop over the same shuffles and optimizer
        reproduces the checkpoint bitwise."""
        cfg = tiny_cfg(epochs=2)
        report = train(dataset / "train.jsonl", dataset / "dev.jsonl", cfg, tmp_path)

        samples = read_manifest(dataset / "train.jsonl")
        store = EmbeddingStore()
        items = [BatchItem(speech=store.get(s.embedding_path),
                           targets=SampleTargets(primary=s.soft_label.probs))
                 for s in samples]
        config = load_checkpoint(tmp_path / "checkpoint.sckp").config
        params = HeadParams.initialize(config, derive_rng(cfg.seed, "init"))
        optimizer = AdamOptimizer(cfg)
        losses = []
        for epoch in range(cfg.epochs):
            order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(items))
            epoch_loss, n_batches = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [items[i] for i in order[start:start + cfg.batch_size]]
                loss, grads = backward(batch, params, cfg.loss)
                optimizer.step(params.named(), grads)
                epoch_loss += loss
                n_batches += 1
            losses.append(epoch_loss / n_batches)
        for got, want in zip((rec.train_loss for rec in report.epochs), losses):
            assert got == want
        # the selected checkpoint is one of the epoch states; epoch-2 state
        # must match when epoch 2 was selected
        if report.selected_epoch == cfg.epochs - 1:
            stored = load_checkpoint(tmp_path / "checkpoint.sckp")
            for name, tensor in params.named().items():
                assert np.array_equal(stored.named()[name],
                                      tensor.astype(np.float32).astype(np.float64))


class TestReweighting:
    def test_train_targets_reweighted_dev_untouched(self, dataset):
        samples = read_manifest(dataset / "train.jsonl")
        store = EmbeddingStore()
        weights = class_weights(empirical_distribution(samples))
        sample = samples[0]
        cfg_on = tiny_cfg(reweight_targets=True)
        cfg_off = tiny_cfg(reweight_targets=False)
        item_on = _augmented_item(sample, cfg_on, 0, store, None, weights)
        item_off = _augmented_item(sample, cfg_off, 0, store, None, None)
        expected = sample.soft_label.probs * weights.w
        expected /= expected.sum()
        assert np.allclose(item_on.targets.primary, expected, atol=1e-12)
        assert np.array_equal(item_off.targets.primary, sample.soft_label.probs)
        # dev scoring consumes only predicted probabilities and consensus gold:
        # there is no target (weighted or otherwise) in its signature.
        preds = {s.sample_id: np.full(9, 1.0 / 9) for s in samples}
        report = score_predictions(samples, preds)
        assert report.n_scored > 0

    def test_renormalize_switch_off(self, dataset):
        samples = read_manifest(dataset / "train.jsonl")
        store = EmbeddingStore()
        weights = class_weights(empirical_distribution(samples))
        cfg = tiny_cfg(reweight_targets=True, renormalize_reweighted=False)
        item = _augmented_item(samples[0], cfg, 0, store, None, weights)
        expected = samples[0].soft_label.probs * weights.w
        assert np.allclose(item.targets.primary, expected, atol=1e-15)


class TestSelectionScore:
    def test_blend(self):
        report = type("R", (), {"macro_f1": 0.6, "minority_map": 0.2})()
        assert selection_score(report, 0.5) == pytest.approx(0.4)
        assert selection_score(report, 1.0) == pytest.approx(0.6)

    def test_fallback_without_minority(self):
        report = type("R", (), {"macro_f1": 0.6, "minority_map": None})()
        assert selection_score(report, 0.25) == pytest.approx(0.6)


class TestEvaluate:
    def test_same_checkpoint_twice_identical(self, dataset, tmp_path):
        cfg = tiny_cfg(epochs=1)
        train(dataset / "train.jsonl", dataset / "dev.jsonl", cfg, tmp_path)
        report_a, preds_a = evaluate(tmp_path / "checkpoint.sckp", dataset / "dev.jsonl")
        report_b, preds_b = evaluate(tmp_path / "checkpoint.sckp", dataset / "dev.jsonl")
        assert report_a.to_dict() == report_b.to_dict()
        for key in preds_a:
            assert np.array_equal(preds_a[key], preds_b[key])

    def test_other_and_no_agreement_excluded(self, dataset, tmp_path):
        cfg = tiny_cfg(epochs=1)
        train(dataset / "train.jsonl", dataset / "dev.jsonl", cfg, tmp_path)
        report, preds = evaluate(tmp_path / "checkpoint.sckp", dataset / "dev.jsonl")
        dev = read_manifest(dataset / "dev.jsonl")
        scorable = [s for s in dev
                    if s.consensus is not None and int(s.consensus) < 8]
        assert report.n_scored == len(scorable)
        assert len(preds) == len(dev)


class TestFailureModes:
    def test_missing_embedding_named(self, dataset, tmp_path):
        samples = read_manifest(dataset / "train.jsonl")
        for s in samples:
            s.embedding_path = s.embedding_path + ".gone"
        broken = tmp_path / "broken.jsonl"
        write_manifest(broken, samples)
        with pytest.raises(DataError, match=r"\.gone"):
            train(broken, dataset / "dev.jsonl", tiny_cfg(epochs=1), tmp_path / "out")

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_non_finite_loss_aborts_with_location(self, tmp_path):
        emb_path = tmp_path / "bad.semb"
        data = np.full((1, 3, 4), np.inf, dtype=np.float32)
        write_embeddings(emb_path, EmbeddingSequence(data=data, frame_rate_hz=50.0))
        probs = np.zeros(9)
        probs[0] = 1.0
        label = SoftLabel(probs=probs, n_annotations=1)
        sample = LabeledSample(sample_id="bad", soft_label=label,
                               consensus=consensus_of(label), split="train",
                               embedding_path=str(emb_path))
        manifest = tmp_path / "bad.jsonl"
        write_manifest(manifest, [sample])
        with pytest.raises(NumericError, match="epoch 0, batch 0"):
            train(manifest, manifest, tiny_cfg(epochs=1), tmp_path / "out")
