"""Command-line entry point for the whole pipeline.

Subcommands: build-labels, synth, augment, train, evaluate, ensemble.
Every command accepts --seed/--config/--out; values resolve as dataclass
defaults < config file < explicit CLI flags. Each command writes a run
manifest (resolved config, inputs, outputs, timestamps) next to its
outputs so any artifact can be regenerated. Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .audio import mix_waveforms, read_wav, truncate_to_cap, write_wav
from .augment import AugmentConfig, MinoritySampler, dropout_soft_label, make_mix_plan, \
    mix_embeddings, mix_labels, should_mix
from .errors import DataError, NumericError, UsageError
from .features import make_synth_spec, read_embeddings, synth_dataset, write_embeddings
from .labels import (
    EmotionClass,
    LabeledSample,
    build_samples,
    consensus_of,
    empirical_distribution,
    parse_annotations,
    read_manifest,
    write_manifest,
)
from .model import ensemble_predict
from .rng import derive_rng
from .trainer import TrainConfig, evaluate, score_predictions, train

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class _Parser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with code 2."""

    def error(self, message: str):
        raise UsageError(message)


def _write_run_manifest(out: str, command: str, config: dict,
                        inputs: list[str], outputs: list[str],
                        seed: int | None, started: str) -> None:
    """Atomically record how an output artifact was produced."""
    if os.path.isdir(out):
        path = os.path.join(out, "run_manifest.json")
    else:
        path = os.path.splitext(out)[0] + ".run.json"
    payload = {
        "command": command,
        "config": config,
        "inputs": [os.path.abspath(p) for p in inputs],
        "outputs": [os.path.abspath(p) for p in outputs],
        "seed": seed,
        "version": __version__,
        "started_at": started,
        "finished_at": _now(),
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"{path}: bad TOML ({exc})") from None


def _merge_section(defaults: dict, file_section: dict, cli_values: dict) -> dict:
    """Overlay config-file values then explicitly-set CLI values onto defaults."""
    merged = dict(defaults)
    for key, value in file_section.items():
        if key not in merged:
            raise UsageError(f"unknown config key {key!r}")
        merged[key] = value
    for key, value in cli_values.items():
        if value is not None:
            merged[key] = value
    return merged


def _parse_counts(text: str, what: str) -> list[int]:
    parts = [p.strip() for p in text.split(",")]
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"{what} must be an int or 9 comma-separated ints, got {text!r}") from None
    if len(values) == 1:
        return values * 9
    if len(values) != 9:
        raise UsageError(f"{what} needs 1 or 9 values, got {len(values)}")
    return values


# --- subcommands -------------------------------------------------------------


def _cmd_build_labels(args: argparse.Namespace) -> int:
    started = _now()
    records = parse_annotations(args.annotations)
    if not records:
        raise DataError(f"no annotations in {args.annotations}")
    samples = build_samples(records, args.split)
    write_manifest(args.out, samples)
    counts = {c.label: 0 for c in EmotionClass}
    no_agreement = 0
    for sample in samples:
        if sample.consensus is None:
            no_agreement += 1
        else:
            counts[sample.consensus.label] += 1
    print(f"{len(samples)} samples from {len(records)} annotations -> {args.out}")
    for name, count in counts.items():
        print(f"  {name:<10} {count}")
    print(f"  {'no_agreement':<10} {no_agreement}")
    _write_run_manifest(args.out, "build-labels", {"split": args.split},
                        [args.annotations], [args.out], None, started)
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    started = _now()
    overrides = {}
    if args.frames_min is not None or args.frames_max is not None:
        overrides["frames_range"] = (args.frames_min or 4, args.frames_max or 10)
    for key in ("n_layers", "votes_per_sample", "ambiguity"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    spec = make_synth_spec(args.preset, args.dim, args.seed,
                           noise_sigma=args.noise_sigma, **overrides)
    outputs = []
    for split, counts_text in (("train", args.train_counts), ("dev", args.dev_counts)):
        if counts_text is None:
            continue
        counts = _parse_counts(counts_text, f"--{split}-counts")
        samples = synth_dataset(spec, counts, split, args.out)
        manifest = os.path.join(args.out, f"{split}.jsonl")
        outputs.append(manifest)
        print(f"{split}: {len(samples)} samples -> {manifest}")
    if not outputs:
        raise UsageError("nothing to generate: pass --train-counts and/or --dev-counts")
    _write_run_manifest(args.out, "synth",
                        {"preset": args.preset, "dim": args.dim,
                         "noise_sigma": args.noise_sigma, "overrides": {
                             k: list(v) if isinstance(v, tuple) else v
                             for k, v in overrides.items()}},
                        [], outputs, args.seed, started)
    return 0


def _augment_entry(sample: LabeledSample, aug: AugmentConfig,
                   sampler: MinoritySampler | None, mode: str,
                   out_dir: str, media_dir: str) -> LabeledSample:
    """Apply dropout then (maybe) mixing to one manifest entry."""
    rng = derive_rng(aug.seed, "augment", 0, sample.sample_id)
    label = sample.soft_label
    if aug.dropout_rate > 0 and label.n_annotations > 1:
        label = dropout_soft_label(label, aug, rng)
    entry = LabeledSample(
        sample_id=sample.sample_id,
        soft_label=label,
        consensus=consensus_of(label),
        split=sample.split,
        secondary_label=sample.secondary_label,
        attributes=sample.attributes,
        embedding_path=sample.embedding_path,
        text_embedding_path=sample.text_embedding_path,
        audio_path=sample.audio_path,
        transcript=sample.transcript,
    )
    if sampler is None or not should_mix(entry, aug, rng):
        return entry
    partner = sampler.sample_partner(rng)
    plan = make_mix_plan(entry, partner, aug, rng)
    mixed_id = f"{sample.sample_id}+{partner.sample_id}"
    mixed_label = mix_labels(label, partner.soft_label)
    mixed = LabeledSample(
        sample_id=mixed_id,
        soft_label=mixed_label,
        consensus=consensus_of(mixed_label),
        split=sample.split,
        mix_plan=plan.to_dict(),
    )
    if mode == "embedding":
        emb = mix_embeddings(read_embeddings(sample.embedding_path),
                             read_embeddings(partner.embedding_path), plan)
        path = os.path.join(media_dir, f"{mixed_id}.semb")
        write_embeddings(path, emb)
        mixed.embedding_path = os.path.abspath(path)
    else:
        wave = mix_waveforms(read_wav(sample.audio_path),
                             read_wav(partner.audio_path), plan)
        path = os.path.join(media_dir, f"{mixed_id}.wav")
        write_wav(path, truncate_to_cap(wave))
        mixed.audio_path = os.path.abspath(path)
    return mixed


def _cmd_augment(args: argparse.Namespace) -> int:
    started = _now()
    file_cfg = _load_config_file(args.config).get("augment", {})
    defaults = AugmentConfig().__dict__
    cli_values = {"p_mix": args.p_mix, "dropout_rate": args.dropout_rate,
                  "max_gap_seconds": args.max_gap, "seed": args.seed}
    aug = AugmentConfig(**_merge_section(defaults, file_cfg, cli_values))
    samples = read_manifest(args.manifest)
    q = empirical_distribution(samples)
    try:
        sampler = MinoritySampler(samples, q) if aug.p_mix > 0 else None
    except DataError:
        sampler = None
    os.makedirs(args.out, exist_ok=True)
    media_dir = os.path.join(args.out, "mixed")
    os.makedirs(media_dir, exist_ok=True)
    entries = [_augment_entry(s, aug, sampler, args.mode, args.out, media_dir)
               for s in samples]
    manifest_path = os.path.join(args.out, os.path.basename(os.fspath(args.manifest)))
    write_manifest(manifest_path, entries)
    n_mixed = sum(1 for e in entries if e.mix_plan is not None)
    print(f"{len(entries)} entries ({n_mixed} mixed) -> {manifest_path}")
    _write_run_manifest(args.out, "augment",
                        {"mode": args.mode, **aug.__dict__},
                        [os.fspath(args.manifest)], [manifest_path], aug.seed, started)
    return 0


def _train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    file_cfg = _load_config_file(args.config)
    train_defaults = {k: v for k, v in TrainConfig().to_dict().items()
                      if k not in ("augmentation", "loss")}
    cli_train = {
        "learning_rate": args.learning_rate, "epochs": args.epochs,
        "batch_size": args.batch_size, "seed": args.seed,
        "selection_weight": args.selection_weight,
        "reweight_targets": args.reweight_targets,
        "use_text": args.use_text, "conv_width": args.conv_width,
        "mlp_hidden": args.mlp_hidden,
        "predict_secondary": args.predict_secondary,
        "predict_attributes": args.predict_attributes,
        "last_layer_only": args.last_layer_only,
    }
    merged = _merge_section(train_defaults, file_cfg.get("train", {}), cli_train)
    aug_cli = {"p_mix": args.p_mix, "dropout_rate": args.dropout_rate,
               "max_gap_seconds": args.max_gap, "seed": args.seed}
    merged["augmentation"] = _merge_section(AugmentConfig().__dict__,
                                            file_cfg.get("augment", {}), aug_cli)
    loss_cli = {"lambda_secondary": args.lambda_secondary,
                "lambda_attributes": args.lambda_attributes}
    merged["loss"] = _merge_section({"lambda_secondary": 0.5, "lambda_attributes": 0.5},
                                    file_cfg.get("loss", {}), loss_cli)
    return TrainConfig.from_dict(merged)


def _cmd_train(args: argparse.Namespace) -> int:
    started = _now()
    cfg = _train_config_from_args(args)
    report = train(args.train_manifest, args.dev_manifest, cfg, args.out)
    best = report.epochs[report.selected_epoch]
    print(f"selected epoch {report.selected_epoch}: "
          f"macro-F1 {best.dev_metrics.macro_f1:.4f}, "
          f"minority mAP {best.dev_metrics.minority_map if best.dev_metrics.minority_map is not None else 'n/a'}, "
          f"score {best.selection_score:.4f}")
    print(f"checkpoint -> {os.path.join(args.out, report.checkpoint_path)}")
    _write_run_manifest(args.out, "train", cfg.to_dict(),
                        [os.fspath(args.train_manifest), os.fspath(args.dev_manifest)],
                        [os.path.join(args.out, report.checkpoint_path),
                         os.path.join(args.out, "train_report.json")],
                        cfg.seed, started)
    return 0


def _write_predictions(path: str, samples: list[LabeledSample],
                       preds: dict[str, np.ndarray]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps({"sample_id": sample.sample_id,
                                 "probs": [float(p) for p in preds[sample.sample_id]]},
                                sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)


def _cmd_evaluate(args: argparse.Namespace) -> int:
    started = _now()
    report, preds = evaluate(args.checkpoint, args.manifest)
    report.write_json(args.out)
    outputs = [args.out]
    if args.preds_out:
        samples = read_manifest(args.manifest)
        _write_predictions(args.preds_out, samples, preds)
        outputs.append(args.preds_out)
    if args.confusion_csv:
        report.write_confusion_csv(args.confusion_csv)
        outputs.append(args.confusion_csv)
    print(f"accuracy {report.accuracy:.2f}%, macro-F1 {report.macro_f1:.4f}, "
          f"minority mAP {report.minority_map if report.minority_map is not None else 'n/a'} "
          f"({report.n_scored} scored) -> {args.out}")
    _write_run_manifest(args.out, "evaluate", {},
                        [os.fspath(args.checkpoint), os.fspath(args.manifest)],
                        outputs, None, started)
    return 0


def _read_predictions(path: str) -> dict[str, np.ndarray]:
    preds = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"prediction file not found: {path}") from None
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                preds[str(obj["sample_id"])] = np.asarray(obj["probs"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{line_no}: bad prediction line ({exc})") from None
    if not preds:
        raise DataError(f"prediction file {path} is empty")
    return preds


def _cmd_ensemble(args: argparse.Namespace) -> int:
    started = _now()
    systems = [_read_predictions(p) for p in args.predictions]
    base_ids = set(systems[0])
    for path, system in zip(args.predictions[1:], systems[1:]):
        if set(system) != base_ids:
            missing = sorted(base_ids - set(system))[:5]
            extra = sorted(set(system) - base_ids)[:5]
            raise DataError(
                f"sample-id sets differ between {args.predictions[0]} and {path} "
                f"(missing e.g. {missing}, extra e.g. {extra})"
            )
    samples = read_manifest(args.manifest)
    averaged = {}
    for sample in samples:
        if sample.sample_id not in base_ids:
            raise DataError(f"no prediction for manifest sample {sample.sample_id!r}")
        averaged[sample.sample_id] = ensemble_predict(
            [system[sample.sample_id] for system in systems])
    report = score_predictions(samples, averaged)
    report.write_json(args.out)
    outputs = [args.out]
    if args.preds_out:
        _write_predictions(args.preds_out, samples, averaged)
        outputs.append(args.preds_out)
    print(f"{len(systems)}-system ensemble: accuracy {report.accuracy:.2f}%, "
          f"macro-F1 {report.macro_f1:.4f} -> {args.out}")
    _write_run_manifest(args.out, "ensemble", {"n_systems": len(systems)},
                        list(args.predictions) + [os.fspath(args.manifest)],
                        outputs, None, started)
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emodist",
                     description="Soft-label speech emotion recognition toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-labels", help="aggregate an annotation CSV into a manifest")
    p.add_argument("annotations", help="annotation CSV path")
    p.add_argument("--out", required=True, help="output manifest (JSONL)")
    p.add_argument("--split", default="train", help="split tag for the samples")
    p.set_defaults(func=_cmd_build_labels)

    p = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--preset", default="separable", choices=["separable", "overlapping"])
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--n-layers", type=int, default=None)
    p.add_argument("--votes-per-sample", dest="votes_per_sample", type=int, default=None)
    p.add_argument("--ambiguity", type=float, default=None)
    p.add_argument("--frames-min", type=int, default=None)
    p.add_argument("--frames-max", type=int, default=None)
    p.add_argument("--train-counts", default=None,
                   help="samples per class for the train split (int or 9 comma-separated ints)")
    p.add_argument("--dev-counts", default=None, help="same for the dev split")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("augment", help="materialize an augmented manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["embedding", "waveform"], default="embedding")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--p-mix", type=float, default=None)
    p.add_argument("--dropout-rate", type=float, default=None)
    p.add_argument("--max-gap", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train a model from manifests")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--dev-manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--selection-weight", type=float, default=None)
    p.add_argument("--reweight-targets", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--use-text", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--conv-width", type=int, default=None)
    p.add_argument("--mlp-hidden", type=int, default=None)
    p.add_argument("--predict-secondary", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--predict-attributes", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--last-layer-only", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--p-mix", type=float, default=None)
    p.add_argument("--dropout-rate", type=float, default=None)
    p.add_argument("--max-gap", type=float, default=None)
    p.add_argument("--lambda-secondary", type=float, default=None)
    p.add_argument("--lambda-attributes", type=float, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output metrics report (JSON)")
    p.add_argument("--preds-out", default=None, help="optional per-sample predictions (JSONL)")
    p.add_argument("--confusion-csv", default=None, help="optional confusion matrix CSV")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ensemble", help="average per-system predictions and rescore")
    p.add_argument("predictions", nargs="+", help="prediction JSONL files, one per system")
    p.add_argument("--manifest", required=True, help="manifest providing gold labels")
    p.add_argument("--out", required=True, help="output metrics report (JSON)")
    p.add_argument("--preds-out", default=None, help="optional averaged predictions (JSONL)")
    p.set_defaults(func=_cmd_ensemble)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
