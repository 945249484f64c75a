"""Downstream head over precomputed embeddings, with exact gradients.

The architecture is deliberately small: a softmax-weighted average over
encoder layers, a 3-stage pointwise (per-frame) convolution with ReLU,
temporal averaging, optional concatenation with an averaged text stream,
and a two-layer MLP whose output carves out the primary 9-class logits
plus optional secondary-emotion logits and attribute regressors.

Training minimizes KL(target || prediction) on the primary distribution,
with optional KL / mean-squared-error auxiliary terms. ``backward``
implements the exact reverse-mode gradient of the whole computation; it
is verified against central finite differences in the test suite. All
math runs in float64; checkpoints store float32 tensors.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .features import EmbeddingSequence
from .labels import N_CLASSES

CHECKPOINT_MAGIC = b"SCKP"
CHECKPOINT_VERSION = 1
N_ATTRIBUTES = 3


@dataclass
class ModelConfig:
    """Static shape and head configuration of the downstream model."""

    speech_layers: int
    speech_dim: int
    text_layers: int | None = None
    text_dim: int | None = None
    conv_width: int = 256
    mlp_hidden: int = 256
    predict_secondary: bool = False
    predict_attributes: bool = False
    last_layer_only: bool = False

    def __post_init__(self) -> None:
        if self.speech_layers < 1 or self.speech_dim < 1:
            raise DataError("speech_layers and speech_dim must be >= 1")
        if (self.text_layers is None) != (self.text_dim is None):
            raise DataError("text_layers and text_dim must be set together")

    @property
    def multimodal(self) -> bool:
        return self.text_dim is not None

    @property
    def fused_dim(self) -> int:
        return self.conv_width + (self.text_dim or 0)

    @property
    def out_dim(self) -> int:
        return N_CLASSES + (N_CLASSES if self.predict_secondary else 0) + \
            (N_ATTRIBUTES if self.predict_attributes else 0)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "ModelConfig":
        return cls(**json.loads(payload))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass
class HeadParams:
    """All trainable tensors of the head, tied to their ModelConfig."""

    config: ModelConfig
    layer_logits_speech: np.ndarray
    conv_weights: list[np.ndarray]
    conv_biases: list[np.ndarray]
    mlp1_weight: np.ndarray
    mlp1_bias: np.ndarray
    mlp2_weight: np.ndarray
    mlp2_bias: np.ndarray
    layer_logits_text: np.ndarray | None = None

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator,
                   output_scale: float = 0.0) -> "HeadParams":
        """Seeded initialization: scaled-Gaussian hidden layers, zero biases.

        The output layer is zero by default so the untrained model predicts
        the uniform distribution exactly (initial one-hot loss = ln 9);
        pass ``output_scale`` > 0 for a fully random head.
        """
        dims = [config.speech_dim, config.conv_width, config.conv_width, config.conv_width]
        conv_weights = [
            rng.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i])
            for i in range(3)
        ]
        conv_biases = [np.zeros(dims[i + 1]) for i in range(3)]
        mlp1_weight = rng.standard_normal((config.fused_dim, config.mlp_hidden)) / np.sqrt(config.fused_dim)
        mlp2_weight = rng.standard_normal((config.mlp_hidden, config.out_dim)) * \
            (output_scale / np.sqrt(config.mlp_hidden))
        return cls(
            config=config,
            layer_logits_speech=np.zeros(config.speech_layers),
            conv_weights=conv_weights,
            conv_biases=conv_biases,
            mlp1_weight=mlp1_weight,
            mlp1_bias=np.zeros(config.mlp_hidden),
            mlp2_weight=mlp2_weight,
            mlp2_bias=np.zeros(config.out_dim),
            layer_logits_text=np.zeros(config.text_layers) if config.multimodal else None,
        )

    def named(self) -> dict[str, np.ndarray]:
        """Flat name -> tensor view of every parameter, in a fixed order."""
        tensors = {"layer_logits_speech": self.layer_logits_speech}
        if self.layer_logits_text is not None:
            tensors["layer_logits_text"] = self.layer_logits_text
        for i in range(3):
            tensors[f"conv{i}_weight"] = self.conv_weights[i]
            tensors[f"conv{i}_bias"] = self.conv_biases[i]
        tensors["mlp1_weight"] = self.mlp1_weight
        tensors["mlp1_bias"] = self.mlp1_bias
        tensors["mlp2_weight"] = self.mlp2_weight
        tensors["mlp2_bias"] = self.mlp2_bias
        return tensors

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "HeadParams":
        try:
            return cls(
                config=config,
                layer_logits_speech=tensors["layer_logits_speech"],
                conv_weights=[tensors[f"conv{i}_weight"] for i in range(3)],
                conv_biases=[tensors[f"conv{i}_bias"] for i in range(3)],
                mlp1_weight=tensors["mlp1_weight"],
                mlp1_bias=tensors["mlp1_bias"],
                mlp2_weight=tensors["mlp2_weight"],
                mlp2_bias=tensors["mlp2_bias"],
                layer_logits_text=tensors.get("layer_logits_text"),
            )
        except KeyError as exc:
            raise DataError(f"checkpoint is missing parameter {exc}") from None

    def copy(self) -> "HeadParams":
        named = {name: tensor.copy() for name, tensor in self.named().items()}
        return HeadParams.from_named(self.config, named)


@dataclass
class ModelOutput:
    """Prediction for one sample plus the activations needed for backprop."""

    primary_probs: np.ndarray
    primary_logprobs: np.ndarray
    secondary_probs: np.ndarray | None
    attributes: np.ndarray | None
    cache: dict = field(repr=False, default_factory=dict)


@dataclass
class LossConfig:
    """Weights of the auxiliary loss terms."""

    lambda_secondary: float = 0.5
    lambda_attributes: float = 0.5

    def __post_init__(self) -> None:
        if self.lambda_secondary < 0 or self.lambda_attributes < 0:
            raise DataError("loss weights must be non-negative")


@dataclass
class SampleTargets:
    """Training targets for one sample; auxiliary targets may be absent."""

    primary: np.ndarray
    secondary: np.ndarray | None = None
    attributes: np.ndarray | None = None


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def _layer_mix(emb: EmbeddingSequence, layer_logits: np.ndarray,
               last_layer_only: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = emb.data.astype(np.float64)
    if last_layer_only:
        weights = np.zeros(emb.n_layers)
        weights[-1] = 1.0
    else:
        weights = _softmax(layer_logits)
    return np.einsum("l,ltd->td", weights, data), weights, data


def forward(speech: EmbeddingSequence, text: EmbeddingSequence | None,
            params: HeadParams) -> ModelOutput:
    """Run the head over one sample's embeddings.

    Pipeline: softmax layer mix -> 3 pointwise conv+ReLU stages ->
    temporal mean; optional text stream (layer mix + temporal mean, no
    conv); concatenate; 2-layer MLP; log-softmax primary head, softmax
    secondary head, logistic attribute head.
    """
    config = params.config
    if speech.n_layers != config.speech_layers or speech.dim != config.speech_dim:
        raise DataError(
            f"speech embedding shape ({speech.n_layers}, *, {speech.dim}) does not match "
            f"model config ({config.speech_layers}, *, {config.speech_dim})"
        )
    if config.multimodal and text is None:
        raise DataError("model is multimodal but no text embedding was provided")
    if text is not None and config.multimodal:
        if text.n_layers != config.text_layers or text.dim != config.text_dim:
            raise DataError(
                f"text embedding shape ({text.n_layers}, *, {text.dim}) does not match "
                f"model config ({config.text_layers}, *, {config.text_dim})"
            )

    cache: dict = {}
    mixed, alpha, speech_data = _layer_mix(speech, params.layer_logits_speech, config.last_layer_only)
    cache.update(speech_data=speech_data, alpha_speech=alpha)

    hidden = mixed
    pre_acts, post_acts = [], [mixed]
    for w, b in zip(params.conv_weights, params.conv_biases):
        z = hidden @ w + b
        hidden = np.maximum(z, 0.0)
        pre_acts.append(z)
        post_acts.append(hidden)
    pooled_speech = hidden.mean(axis=0)
    cache.update(conv_pre=pre_acts, conv_post=post_acts, n_frames=hidden.shape[0])

    if config.multimodal:
        mixed_text, alpha_text, text_data = _layer_mix(text, params.layer_logits_text, False)
        pooled_text = mixed_text.mean(axis=0)
        fused = np.concatenate([pooled_speech, pooled_text])
        cache.update(text_data=text_data, alpha_text=alpha_text, n_text_frames=text_data.shape[1])
    else:
        fused = pooled_speech

    z_hidden = fused @ params.mlp1_weight + params.mlp1_bias
    h_hidden = np.maximum(z_hidden, 0.0)
    out = h_hidden @ params.mlp2_weight + params.mlp2_bias
    cache.update(fused=fused, mlp_pre=z_hidden, mlp_post=h_hidden)

    logprobs = _log_softmax(out[:N_CLASSES])
    probs = np.exp(logprobs)
    secondary_probs = None
    attributes = None
    cursor = N_CLASSES
    if config.predict_secondary:
        secondary_probs = _softmax(out[cursor: cursor + N_CLASSES])
        cursor += N_CLASSES
    if config.predict_attributes:
        attributes = 1.0 / (1.0 + np.exp(-out[cursor: cursor + N_ATTRIBUTES]))
    return ModelOutput(
        primary_probs=probs,
        primary_logprobs=logprobs,
        secondary_probs=secondary_probs,
        attributes=attributes,
        cache=cache,
    )


def _check_simplex(target: np.ndarray, what: str) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (N_CLASSES,):
        raise DataError(f"{what} must have {N_CLASSES} entries, got shape {target.shape}")
    if abs(float(target.sum()) - 1.0) > 1e-6 or float(target.min()) < -1e-9:
        raise DataError(f"{what} is off the probability simplex")
    return target


def kl_loss(output: ModelOutput, target: np.ndarray) -> float:
    """KL(target || prediction) with the 0 * log 0 = 0 convention."""
    target = _check_simplex(target, "KL target")
    support = target > 0
    t = target[support]
    return float(np.sum(t * (np.log(t) - output.primary_logprobs[support])))


def _secondary_kl(secondary_probs: np.ndarray, target: np.ndarray) -> float:
    target = _check_simplex(target, "secondary target")
    support = target > 0
    t = target[support]
    return float(np.sum(t * (np.log(t) - np.log(secondary_probs[support]))))


def total_loss(output: ModelOutput, targets: SampleTargets,
               cfg: LossConfig) -> tuple[float, dict[str, float]]:
    """Primary KL plus weighted auxiliary terms; absent targets contribute 0.

    Returns the scalar loss and a per-term breakdown (unweighted terms).
    """
    breakdown = {"primary": kl_loss(output, targets.primary), "secondary": 0.0, "attributes": 0.0}
    total = breakdown["primary"]
    if targets.secondary is not None:
        if output.secondary_probs is None:
            raise DataError("secondary target given but the model has no secondary head")
        breakdown["secondary"] = _secondary_kl(output.secondary_probs, targets.secondary)
        total += cfg.lambda_secondary * breakdown["secondary"]
    if targets.attributes is not None:
        if output.attributes is None:
            raise DataError("attribute target given but the model has no attribute head")
        diff = output.attributes - np.asarray(targets.attributes, dtype=np.float64)
        breakdown["attributes"] = float(np.mean(diff * diff))
        total += cfg.lambda_attributes * breakdown["attributes"]
    return total, breakdown


@dataclass
class BatchItem:
    """One training example: embeddings plus its targets."""

    speech: EmbeddingSequence
    targets: SampleTargets
    text: EmbeddingSequence | None = None


def _sample_gradients(item: BatchItem, params: HeadParams, cfg: LossConfig,
                      output: ModelOutput) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of total_loss for one sample."""
    config = params.config
    cache = output.cache
    targets = item.targets

    g_out = np.zeros(config.out_dim)
    g_out[:N_CLASSES] = output.primary_probs - _check_simplex(targets.primary, "KL target")
    cursor = N_CLASSES
    if config.predict_secondary:
        if targets.secondary is not None:
            g_out[cursor: cursor + N_CLASSES] = cfg.lambda_secondary * \
                (output.secondary_probs - np.asarray(targets.secondary, dtype=np.float64))
        cursor += N_CLASSES
    if config.predict_attributes and targets.attributes is not None:
        a = output.attributes
        diff = a - np.asarray(targets.attributes, dtype=np.float64)
        g_out[cursor: cursor + N_ATTRIBUTES] = cfg.lambda_attributes * \
            (2.0 / N_ATTRIBUTES) * diff * a * (1.0 - a)

    grads: dict[str, np.ndarray] = {}
    h_hidden = cache["mlp_post"]
    grads["mlp2_weight"] = np.outer(h_hidden, g_out)
    grads["mlp2_bias"] = g_out
    g_hidden = (params.mlp2_weight @ g_out) * (cache["mlp_pre"] > 0)
    grads["mlp1_weight"] = np.outer(cache["fused"], g_hidden)
    grads["mlp1_bias"] = g_hidden
    g_fused = params.mlp1_weight @ g_hidden

    g_speech_pooled = g_fused[: config.conv_width]
    if config.multimodal:
        g_text_pooled = g_fused[config.conv_width:]
        g_text_mixed = np.broadcast_to(g_text_pooled / cache["n_text_frames"],
                                       (cache["n_text_frames"], config.text_dim))
        g_alpha_text = np.einsum("td,ltd->l", g_text_mixed, cache["text_data"])
        alpha_text = cache["alpha_text"]
        grads["layer_logits_text"] = alpha_text * (g_alpha_text - alpha_text @ g_alpha_text)

    n_frames = cache["n_frames"]
    g_conv = np.broadcast_to(g_speech_pooled / n_frames, (n_frames, config.conv_width)).copy()
    for i in reversed(range(3)):
        g_z = g_conv * (cache["conv_pre"][i] > 0)
        grads[f"conv{i}_weight"] = cache["conv_post"][i].T @ g_z
        grads[f"conv{i}_bias"] = g_z.sum(axis=0)
        g_conv = g_z @ params.conv_weights[i].T

    if config.last_layer_only:
        grads["layer_logits_speech"] = np.zeros_like(params.layer_logits_speech)
    else:
        g_alpha = np.einsum("td,ltd->l", g_conv, cache["speech_data"])
        alpha = cache["alpha_speech"]
        grads["layer_logits_speech"] = alpha * (g_alpha - alpha @ g_alpha)
    return grads


def backward(batch: list[BatchItem], params: HeadParams,
             cfg: LossConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and mean gradients over a batch.

    Samples are reduced in list order with a fixed accumulation sequence,
    so the result is bitwise deterministic for a given batch.
    """
    if not batch:
        raise DataError("cannot take gradients of an empty batch")
    total = 0.0
    acc: dict[str, np.ndarray] = {name: np.zeros_like(t) for name, t in params.named().items()}
    for item in batch:
        output = forward(item.speech, item.text, params)
        loss, _ = total_loss(output, item.targets, cfg)
        total += loss
        for name, grad in _sample_gradients(item, params, cfg, output).items():
            acc[name] += grad
    scale = 1.0 / len(batch)
    return total * scale, {name: grad * scale for name, grad in acc.items()}


def ensemble_predict(outputs: list[np.ndarray]) -> np.ndarray:
    """Unweighted mean of per-system probability vectors."""
    if not outputs:
        raise DataError("cannot ensemble zero systems")
    stacked = np.stack([_check_simplex(np.asarray(o, dtype=np.float64), "ensemble input")
                        for o in outputs])
    return stacked.mean(axis=0)


# --- Checkpoint IO ----------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, params: HeadParams) -> None:
    """Write params as a versioned binary checkpoint (float32 tensors)."""
    path = os.fspath(path)
    config_json = params.config.to_json().encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              params.config.digest(), struct.pack("<I", len(config_json)), config_json]
    tensors = params.named()
    chunks.append(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        encoded = name.encode()
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> HeadParams:
    """Read a checkpoint, verifying magic, version, and the config digest."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None

    view = memoryview(raw)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        chunk = view[offset: offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version mismatch (file {version}, reader {CHECKPOINT_VERSION})")
    digest = bytes(take(32))
    (config_len,) = struct.unpack("<I", take(4))
    config_json = bytes(take(config_len)).decode()
    config = ModelConfig.from_json(config_json)
    if config.digest() != digest:
        raise DataError(f"{path}: checkpoint config digest mismatch")
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if dims else 1
        payload = take(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes after checkpoint payload")
    return HeadParams.from_named(config, tensors)
