"""semb-extract: run an encoder over a manifest and dump SEMB files."""

from __future__ import annotations

import argparse
import sys

from .encoders import ModelLoadError
from .extract import ExtractorConfig, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semb-extract",
        description="Extract encoder hidden states for every sample in a manifest",
    )
    parser.add_argument("--manifest", required=True, help="input manifest (JSONL)")
    parser.add_argument("--model", required=True,
                        help="encoder id: builtin:fbank, builtin:chargram, or hf:<model>")
    parser.add_argument("--out-dir", required=True, help="output directory")
    parser.add_argument("--layers", choices=["all", "last"], default="all",
                        help="emit all encoder layers or only the last")
    parser.add_argument("--stream", choices=["speech", "text"], default=None,
                        help="modality for hf: models (builtins infer it)")
    parser.add_argument("--cap-seconds", type=float, default=15.0,
                        help="truncate audio to this many seconds before encoding")
    parser.add_argument("--device", default="cpu", help="device hint for hf: models")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExtractorConfig(model=args.model, out_dir=args.out_dir, layers=args.layers,
                          stream=args.stream, cap_seconds=args.cap_seconds,
                          device=args.device)
    try:
        report = extract(args.manifest, cfg)
    except ModelLoadError as exc:
        print(f"model load failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{report.n_extracted} samples extracted -> {report.manifest_path}")
    for entry in report.skipped:
        print(f"skipped {entry['sample_id']}: {entry['reason']}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
