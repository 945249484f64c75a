import json

import numpy as np
import pytest

from emodist.cli import main
from emodist.features import make_synth_spec, read_embeddings, synth_dataset
from emodist.labels import EmotionClass, read_manifest

HEADER = "sample_id,annotator_id,primary,secondary,arousal,valence,dominance\n"

FIVE_ROWS = (
    "u1,a1,happy,,4.0,4.0,4.0\n"
    "u1,a2,happy,surprise,5.0,4.0,4.0\n"
    "u1,a3,neutral,,4.0,4.0,4.0\n"
    "u2,a1,fear,,2.0,2.0,2.0\n"
    "u2,a2,fear,,2.5,2.0,2.0\n"
)


def run(*argv):
    return main([str(a) for a in argv])


class TestBuildLabels:
    def test_five_rows_two_samples(self, tmp_path, capsys):
        csv = tmp_path / "ann.csv"
        csv.write_text(HEADER + FIVE_ROWS, encoding="utf-8")
        out = tmp_path / "manifest.jsonl"
        assert run("build-labels", csv, "--out", out, "--split", "train") == 0
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 2
        samples = read_manifest(out)
        assert samples[0].consensus == EmotionClass.HAPPY
        assert samples[1].consensus == EmotionClass.FEAR
        assert "2 samples from 5 annotations" in capsys.readouterr().out
        assert (tmp_path / "manifest.run.json").exists()

    def test_empty_csv_is_data_error(self, tmp_path, capsys):
        csv = tmp_path / "empty.csv"
        csv.write_text(HEADER, encoding="utf-8")
        assert run("build-labels", csv, "--out", tmp_path / "m.jsonl") == 2
        assert "no annotations" in capsys.readouterr().err

    def test_rerun_byte_identical(self, tmp_path):
        csv = tmp_path / "ann.csv"
        csv.write_text(HEADER + FIVE_ROWS, encoding="utf-8")
        out_a = tmp_path / "a.jsonl"
        out_b = tmp_path / "b.jsonl"
        assert run("build-labels", csv, "--out", out_a) == 0
        assert run("build-labels", csv, "--out", out_b) == 0
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_bad_row_is_data_error(self, tmp_path, capsys):
        csv = tmp_path / "ann.csv"
        csv.write_text(HEADER + "u1,a1,joy,,,,\n", encoding="utf-8")
        assert run("build-labels", csv, "--out", tmp_path / "m.jsonl") == 2
        assert "joy" in capsys.readouterr().err


class TestSynthCommand:
    def test_generates_both_splits(self, tmp_path):
        out = tmp_path / "data"
        assert run("synth", "--out", out, "--preset", "separable", "--dim", "8",
                   "--train-counts", "3", "--dev-counts", "2", "--seed", "5") == 0
        assert len(read_manifest(out / "train.jsonl")) == 27
        assert len(read_manifest(out / "dev.jsonl")) == 18
        assert (out / "run_manifest.json").exists()

    def test_per_class_counts(self, tmp_path):
        out = tmp_path / "data"
        assert run("synth", "--out", out, "--train-counts",
                   "5,5,5,5,1,1,1,1,0", "--seed", "3") == 0
        samples = read_manifest(out / "train.jsonl")
        assert len(samples) == 24

    def test_usage_error_without_counts(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path / "x") == 1
        assert "counts" in capsys.readouterr().err


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "data"
    spec = make_synth_spec("separable", dim=6, seed=21, frames_range=(2, 4),
                           votes_per_sample=5, ambiguity=0.2)
    synth_dataset(spec, [10, 10, 10, 10, 2, 2, 2, 2, 1], "train", out)
    synth_dataset(spec, [3] * 9, "dev", out)
    return out


class TestAugmentCommand:
    def test_p_mix_zero_no_dropout_is_identity_modulo_paths(self, tmp_path, synth_dir):
        out = tmp_path / "aug"
        assert run("augment", "--manifest", synth_dir / "train.jsonl", "--out", out,
                   "--p-mix", "0", "--dropout-rate", "0", "--seed", "1") == 0
        before = read_manifest(synth_dir / "train.jsonl")
        after = read_manifest(out / "train.jsonl")
        assert len(before) == len(after)
        for a, b in zip(before, after):
            assert a.sample_id == b.sample_id
            assert np.array_equal(a.soft_label.probs, b.soft_label.probs)
            assert a.embedding_path == b.embedding_path

    def test_p_mix_one_mixes_every_majority_entry(self, tmp_path, synth_dir):
        out = tmp_path / "aug"
        assert run("augment", "--manifest", synth_dir / "train.jsonl", "--out", out,
                   "--p-mix", "1", "--dropout-rate", "0", "--seed", "1") == 0
        entries = read_manifest(out / "train.jsonl")
        majority = {EmotionClass.NEUTRAL, EmotionClass.HAPPY, EmotionClass.SAD,
                    EmotionClass.ANGRY}
        originals = {s.sample_id: s for s in read_manifest(synth_dir / "train.jsonl")}
        for entry in entries:
            original = originals.get(entry.sample_id.split("+")[0])
            if original is not None and original.consensus in majority:
                assert "+" in entry.sample_id
                assert entry.mix_plan is not None
                emb = read_embeddings(entry.embedding_path)
                assert emb.dim == 6

    def test_fixed_seed_identical_corpus(self, tmp_path, synth_dir):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            assert run("augment", "--manifest", synth_dir / "train.jsonl", "--out", out,
                       "--p-mix", "0.5", "--dropout-rate", "0.2", "--seed", "9") == 0
        assert (out_a / "train.jsonl").read_bytes() == (out_b / "train.jsonl").read_bytes()
        mixed_a = sorted((out_a / "mixed").iterdir())
        mixed_b = sorted((out_b / "mixed").iterdir())
        assert [p.name for p in mixed_a] == [p.name for p in mixed_b]
        for pa, pb in zip(mixed_a, mixed_b):
            assert pa.read_bytes() == pb.read_bytes()


class TestTrainEvaluateEnsemble:
    @pytest.fixture
    def trained(self, tmp_path, synth_dir):
        out = tmp_path / "run"
        code = run("train", "--train-manifest", synth_dir / "train.jsonl",
                   "--dev-manifest", synth_dir / "dev.jsonl", "--out", out,
                   "--epochs", "2", "--conv-width", "16", "--mlp-hidden", "16",
                   "--seed", "3", "--p-mix", "0.3", "--dropout-rate", "0.2")
        assert code == 0
        return out

    def test_train_outputs(self, trained):
        assert (trained / "checkpoint.sckp").exists()
        report = json.loads((trained / "train_report.json").read_text())
        assert len(report["epochs"]) == 2
        assert (trained / "run_manifest.json").exists()

    def test_evaluate_and_preds(self, tmp_path, synth_dir, trained):
        report_path = tmp_path / "report.json"
        preds_path = tmp_path / "preds.jsonl"
        code = run("evaluate", "--checkpoint", trained / "checkpoint.sckp",
                   "--manifest", synth_dir / "dev.jsonl", "--out", report_path,
                   "--preds-out", preds_path, "--confusion-csv", tmp_path / "conf.csv")
        assert code == 0
        report = json.loads(report_path.read_text())
        assert 0 <= report["macro_f1"] <= 1
        preds = [json.loads(line) for line in preds_path.read_text().strip().split("\n")]
        assert len(preds) == 27
        assert all(abs(sum(p["probs"]) - 1) < 1e-9 for p in preds)

    def test_ensemble_identities(self, tmp_path, synth_dir, trained):
        report_path = tmp_path / "single.json"
        preds_path = tmp_path / "preds.jsonl"
        run("evaluate", "--checkpoint", trained / "checkpoint.sckp",
            "--manifest", synth_dir / "dev.jsonl", "--out", report_path,
            "--preds-out", preds_path)
        one = tmp_path / "ens1.json"
        assert run("ensemble", preds_path, "--manifest", synth_dir / "dev.jsonl",
                   "--out", one) == 0
        with_self = tmp_path / "ens2.json"
        assert run("ensemble", preds_path, preds_path, "--manifest",
                   synth_dir / "dev.jsonl", "--out", with_self) == 0
        single = json.loads(report_path.read_text())
        assert json.loads(one.read_text()) == single
        assert json.loads(with_self.read_text()) == single

    def test_ensemble_matches_hand_rolled_average(self, tmp_path, synth_dir, trained):
        preds_paths = []
        for seed in (3, 4, 5):
            out = tmp_path / f"sys{seed}"
            run("train", "--train-manifest", synth_dir / "train.jsonl",
                "--dev-manifest", synth_dir / "dev.jsonl", "--out", out,
                "--epochs", "1", "--conv-width", "8", "--mlp-hidden", "8",
                "--seed", str(seed))
            preds = out / "preds.jsonl"
            run("evaluate", "--checkpoint", out / "checkpoint.sckp",
                "--manifest", synth_dir / "dev.jsonl", "--out", out / "rep.json",
                "--preds-out", preds)
            preds_paths.append(preds)
        avg_out = tmp_path / "avg.jsonl"
        assert run("ensemble", *preds_paths, "--manifest", synth_dir / "dev.jsonl",
                   "--out", tmp_path / "ens.json", "--preds-out", avg_out) == 0

        by_id = {}
        for path in preds_paths:
            for line in path.read_text().strip().split("\n"):
                obj = json.loads(line)
                by_id.setdefault(obj["sample_id"], []).append(np.asarray(obj["probs"]))
        averaged = {k: np.mean(np.stack(v), axis=0) for k, v in by_id.items()}
        for line in avg_out.read_text().strip().split("\n"):
            obj = json.loads(line)
            assert np.allclose(obj["probs"], averaged[obj["sample_id"]], atol=1e-12)

    def test_ensemble_id_mismatch_is_data_error(self, tmp_path, synth_dir, capsys):
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        a.write_text('{"sample_id": "x", "probs": [1,0,0,0,0,0,0,0,0]}\n')
        b.write_text('{"sample_id": "y", "probs": [1,0,0,0,0,0,0,0,0]}\n')
        assert run("ensemble", a, b, "--manifest", synth_dir / "dev.jsonl",
                   "--out", tmp_path / "r.json") == 2
        assert "sample-id sets differ" in capsys.readouterr().err


class TestConfigPrecedence:
    def test_config_file_then_cli_flags(self, tmp_path, synth_dir):
        cfg = tmp_path / "run.toml"
        cfg.write_text(
            "[train]\nepochs = 2\nconv_width = 8\nmlp_hidden = 8\nseed = 11\n"
            "[augment]\np_mix = 0.0\ndropout_rate = 0.0\n"
        )
        out = tmp_path / "run"
        assert run("train", "--train-manifest", synth_dir / "train.jsonl",
                   "--dev-manifest", synth_dir / "dev.jsonl", "--out", out,
                   "--config", cfg, "--epochs", "1") == 0
        report = json.loads((out / "train_report.json").read_text())
        assert len(report["epochs"]) == 1  # CLI flag beats config file
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["conv_width"] == 8  # config beats default
        assert manifest["config"]["seed"] == 11

    def test_unknown_config_key_is_usage_error(self, tmp_path, synth_dir, capsys):
        cfg = tmp_path / "run.toml"
        cfg.write_text("[train]\nlr = 0.1\n")
        assert run("train", "--train-manifest", synth_dir / "train.jsonl",
                   "--dev-manifest", synth_dir / "dev.jsonl",
                   "--out", tmp_path / "x", "--config", cfg) == 1
        assert "unknown config key" in capsys.readouterr().err


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert main(["train", "--train-manifest", "x"]) == 1

    def test_data_error(self, tmp_path, capsys):
        assert run("evaluate", "--checkpoint", tmp_path / "no.sckp",
                   "--manifest", tmp_path / "no.jsonl", "--out", tmp_path / "r.json") == 2
