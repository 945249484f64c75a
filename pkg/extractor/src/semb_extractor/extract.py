"""The extraction pass: manifest in, SEMB files + updated manifest out."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .encoders import ModelLoadError, load_encoder
from .semb import write_semb
from .wav import AudioDecodeError, read_wav_capped


@dataclass
class ExtractorConfig:
    """What to run over which stream, and where the files go."""

    model: str
    out_dir: str
    layers: str = "all"
    stream: str | None = None
    cap_seconds: float = 15.0
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.layers not in ("all", "last"):
            raise ValueError(f"layers must be 'all' or 'last', got {self.layers!r}")


@dataclass
class ExtractReport:
    """Outcome of one extraction pass."""

    manifest_path: str
    n_extracted: int
    skipped: list[dict] = field(default_factory=list)


def _read_manifest_objects(path: str) -> list[dict]:
    objects = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                objects.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: bad JSON ({exc})") from None
    if not objects:
        raise ValueError(f"manifest {path} contains no samples")
    return objects


def extract(manifest: str | os.PathLike, cfg: ExtractorConfig) -> ExtractReport:
    """Run the configured encoder over every manifest sample.

    One `SEMB` file is written per sample into ``out_dir/embeddings``;
    audio is truncated to the 15 s cap before encoding. Samples whose
    media cannot be decoded are skipped and listed (in the report and in
    ``skipped.jsonl``), never silently dropped. The updated manifest —
    containing only successfully extracted samples, with the relevant
    embedding-path field rewritten — lands in ``out_dir``.
    """
    manifest = os.fspath(manifest)
    manifest_dir = os.path.dirname(os.path.abspath(manifest))
    encoder = load_encoder(cfg.model, stream=cfg.stream, device=cfg.device)
    stream = encoder.stream
    path_field = "embedding_path" if stream == "speech" else "text_embedding_path"

    out_dir = os.fspath(cfg.out_dir)
    emb_dir = os.path.join(out_dir, "embeddings")
    os.makedirs(emb_dir, exist_ok=True)

    kept, skipped = [], []
    for obj in _read_manifest_objects(manifest):
        sample_id = str(obj.get("sample_id", "?"))
        try:
            if stream == "speech":
                rel_audio = obj.get("audio_path")
                if rel_audio is None:
                    raise AudioDecodeError(f"{sample_id}: no audio_path in manifest")
                samples = read_wav_capped(os.path.join(manifest_dir, rel_audio),
                                          cfg.cap_seconds)
                stack, frame_rate = encoder.encode_speech(samples)
            else:
                transcript = obj.get("transcript")
                if transcript is None:
                    raise AudioDecodeError(f"{sample_id}: no transcript in manifest")
                stack, frame_rate = encoder.encode_text(transcript)
        except AudioDecodeError as exc:
            skipped.append({"sample_id": sample_id, "reason": str(exc)})
            continue
        if cfg.layers == "last":
            stack = stack[-1:]
        emb_path = os.path.join(emb_dir, f"{sample_id}.semb")
        write_semb(emb_path, stack, frame_rate)
        updated = dict(obj)
        # rebase every media path from the input manifest dir to out_dir so
        # the rewritten manifest stays fully resolvable
        for key in ("embedding_path", "text_embedding_path", "audio_path"):
            if updated.get(key) is not None:
                resolved = os.path.join(manifest_dir, updated[key])
                updated[key] = os.path.relpath(resolved, out_dir).replace(os.sep, "/")
        updated[path_field] = os.path.relpath(emb_path, out_dir).replace(os.sep, "/")
        kept.append(updated)

    out_manifest = os.path.join(out_dir, os.path.basename(manifest))
    tmp = out_manifest + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for obj in kept:
            fh.write(json.dumps(obj, sort_keys=True))
            fh.write("\n")
    os.replace(tmp, out_manifest)
    if skipped:
        with open(os.path.join(out_dir, "skipped.jsonl"), "w", encoding="utf-8") as fh:
            for entry in skipped:
                fh.write(json.dumps(entry, sort_keys=True))
                fh.write("\n")
    return ExtractReport(manifest_path=out_manifest, n_extracted=len(kept), skipped=skipped)
