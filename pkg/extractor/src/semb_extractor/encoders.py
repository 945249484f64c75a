"""Encoder registry: built-in deterministic encoders and pretrained bridges.

Model identifiers select the encoder:

- ``builtin:fbank`` — dependency-free speech encoder: log-mel filterbank
  frames, with deeper "layers" formed by exponential smoothing of the
  layer below. Deterministic, weight-free; intended for fixtures, CI, and
  pipeline bring-up.
- ``builtin:chargram`` — dependency-free text encoder: one frame per
  whitespace token, hashed character trigram counts per token.
- ``hf:<model-id>`` — any transformers encoder (e.g. WavLM, the Whisper
  encoder, RoBERTa) run with hidden-state output; requires torch +
  transformers and locally available weights.

Every encoder returns (layers, frames, dim) float32 plus the frame rate,
where "all layers" excludes the input-embedding layer of transformer
stacks.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


class ModelLoadError(Exception):
    """The requested encoder could not be constructed."""


def _smooth_stack(base: np.ndarray, n_layers: int, decay: float = 0.6) -> np.ndarray:
    """Stack ``n_layers`` views: the base frames, then repeated causal EMAs."""
    layers = [base]
    for _ in range(n_layers - 1):
        prev = layers[-1]
        ema = np.empty_like(prev)
        state = prev[0]
        for t in range(prev.shape[0]):
            state = decay * state + (1.0 - decay) * prev[t]
            ema[t] = state
        layers.append(ema)
    return np.stack(layers)


class FbankEncoder:
    """Log-mel filterbank speech encoder (25 ms window, 20 ms hop)."""

    stream = "speech"

    def __init__(self, dim: int = 32, n_layers: int = 4, sample_rate: int = 16_000):
        self.dim = dim
        self.n_layers = n_layers
        self.sample_rate = sample_rate
        self.win = 400
        self.hop = 320
        self.frame_rate_hz = sample_rate / self.hop
        self._window = np.hanning(self.win)
        self._filters = self._mel_filters()

    def _mel_filters(self) -> np.ndarray:
        def hz_to_mel(f):
            return 2595.0 * math.log10(1.0 + f / 700.0)

        def mel_to_hz(m):
            return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

        n_fft_bins = self.win // 2 + 1
        mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(self.sample_rate / 2),
                                 self.dim + 2)
        hz_points = np.array([mel_to_hz(m) for m in mel_points])
        bins = np.floor((self.win + 1) * hz_points / self.sample_rate).astype(int)
        filters = np.zeros((self.dim, n_fft_bins))
        for i in range(self.dim):
            lo, mid, hi = bins[i], bins[i + 1], bins[i + 2]
            for k in range(lo, mid):
                if mid > lo:
                    filters[i, k] = (k - lo) / (mid - lo)
            for k in range(mid, hi):
                if hi > mid:
                    filters[i, k] = (hi - k) / (hi - mid)
        return filters

    def encode_speech(self, samples: np.ndarray) -> tuple[np.ndarray, float]:
        if samples.size < self.win:
            samples = np.pad(samples, (0, self.win - samples.size))
        n_frames = 1 + (samples.size - self.win) // self.hop
        frames = np.empty((n_frames, self.dim))
        for t in range(n_frames):
            chunk = samples[t * self.hop: t * self.hop + self.win] * self._window
            power = np.abs(np.fft.rfft(chunk)) ** 2
            frames[t] = np.log1p(self._filters @ power)
        stack = _smooth_stack(frames, self.n_layers)
        return stack.astype(np.float32), self.frame_rate_hz


class ChargramEncoder:
    """Hashed character-trigram text encoder; one frame per whitespace token."""

    stream = "text"

    def __init__(self, dim: int = 32, n_layers: int = 4):
        self.dim = dim
        self.n_layers = n_layers

    def _token_vector(self, token: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        padded = f"^{token.lower()}$"
        for i in range(max(1, len(padded) - 2)):
            gram = padded[i: i + 3]
            digest = hashlib.blake2b(gram.encode(), digest_size=8).digest()
            vec[int.from_bytes(digest, "little") % self.dim] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def encode_text(self, transcript: str) -> tuple[np.ndarray, float]:
        tokens = transcript.split()
        if not tokens:
            tokens = ["<empty>"]
        frames = np.stack([self._token_vector(tok) for tok in tokens])
        stack = _smooth_stack(frames, self.n_layers)
        return stack.astype(np.float32), 1.0


class HfEncoder:
    """transformers-backed encoder (speech or text) with hidden-state output.

    The input-embedding layer is excluded from "all layers": hidden_states
    has n_transformer_layers + 1 entries and the first is dropped.
    """

    def __init__(self, model_id: str, stream: str, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ModelLoadError(f"hf:{model_id} needs torch and transformers ({exc})") from None
        self.stream = stream
        self._torch = torch
        try:
            if stream == "speech":
                from transformers import AutoFeatureExtractor
                self.processor = AutoFeatureExtractor.from_pretrained(model_id)
            else:
                self.processor = AutoTokenizer.from_pretrained(model_id)
            model = AutoModel.from_pretrained(model_id)
        except Exception as exc:
            raise ModelLoadError(f"cannot load {model_id!r}: {exc}") from None
        if hasattr(model, "get_encoder"):
            model = model.get_encoder()
        self.model = model.to(device).eval()
        self.device = device

    def _hidden_stack(self, output, n_frames_hint: int | None = None) -> np.ndarray:
        hidden = output.hidden_states[1:]  # drop the input-embedding layer
        stack = self._torch.stack(hidden, dim=0)[:, 0]
        return stack.float().cpu().numpy().astype(np.float32)

    def encode_speech(self, samples: np.ndarray) -> tuple[np.ndarray, float]:
        torch = self._torch
        inputs = self.processor(samples, sampling_rate=16_000, return_tensors="pt")
        inputs = {k: v.to(self.device) for k, v in inputs.items() if hasattr(v, "to")}
        with torch.no_grad():
            output = self.model(**inputs, output_hidden_states=True)
        stack = self._hidden_stack(output)
        seconds = samples.size / 16_000.0
        return stack, stack.shape[1] / seconds

    def encode_text(self, transcript: str) -> tuple[np.ndarray, float]:
        torch = self._torch
        inputs = self.processor(transcript, return_tensors="pt")
        inputs = {k: v.to(self.device) for k, v in inputs.items()}
        with torch.no_grad():
            output = self.model(**inputs, output_hidden_states=True)
        return self._hidden_stack(output), 1.0


def load_encoder(model_id: str, stream: str | None = None, device: str = "cpu"):
    """Construct the encoder named by ``model_id``.

    Built-ins infer their stream; ``hf:`` identifiers need an explicit
    ``stream`` ("speech" or "text").
    """
    if model_id == "builtin:fbank":
        return FbankEncoder()
    if model_id == "builtin:chargram":
        return ChargramEncoder()
    if model_id.startswith("hf:"):
        if stream not in ("speech", "text"):
            raise ModelLoadError(f"hf models need --stream speech|text (got {stream!r})")
        return HfEncoder(model_id[3:], stream=stream, device=device)
    raise ModelLoadError(f"unknown model identifier {model_id!r}")
