"""A small numpy transformer encoder classifier with a probability head per layer.

The encoder body is drawn from a seed and stays frozen. Each layer owns a
linear "process" head reading the first-token hidden state, so every layer
yields a class distribution that the early-exit controller can watch. Blocks
use pre-layer normalisation (no learned gain/bias) and fixed sinusoidal
positions; head inputs are the layer-normalised first-token state.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .decision import EarlyExitParams, EarlyExitState, early_exit_step, softmax
from .errors import InvalidInputError, InvalidParameterError
from .pruning import Segmentation

CLS, SEP = "[CLS]", "[SEP]"
CLS_ID, SEP_ID = 0, 1
N_RESERVED_IDS = 2
WEIGHTS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 6
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 1024
    n_classes: int = 2
    max_len: int = 64
    seed: int = 0
    split_length: int = 6

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "max_len", "split_length"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise InvalidParameterError("n_classes must be >= 2")
        if self.vocab_size <= N_RESERVED_IDS:
            raise InvalidParameterError("vocab_size too small for special tokens")
        if self.d_model % self.n_heads:
            raise InvalidParameterError("d_model must be divisible by n_heads")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True, eq=False)
class TokenSequence:
    pieces: tuple[str, ...]
    ids: np.ndarray
    segmentation: Segmentation

    def __len__(self):
        return len(self.pieces)


def _piece_id(piece: str, vocab_size: int) -> int:
    h = zlib.crc32(piece.lower().encode("utf-8"))
    return N_RESERVED_IDS + h % (vocab_size - N_RESERVED_IDS)


def split_word(word: str, split_length: int) -> list[str]:
    """Root of ``split_length`` characters followed by ``##``-marked suffix pieces."""
    if len(word) <= split_length:
        return [word]
    pieces = [word[:split_length]]
    for i in range(split_length, len(word), split_length):
        pieces.append("##" + word[i:i + split_length])
    return pieces


def tokenize(text: str, config: EncoderConfig = EncoderConfig(), mode: str = "word") -> TokenSequence:
    """Whitespace words, optionally split into sub-words, wrapped in [CLS] ... [SEP]."""
    if mode not in ("word", "subword"):
        raise InvalidParameterError(f"unknown tokenization mode {mode!r}")
    words = text.split()
    if not words:
        raise InvalidInputError("cannot tokenize empty text")
    pieces = [CLS]
    spans = []
    for w in words:
        sub = split_word(w, config.split_length) if mode == "subword" else [w]
        spans.append((len(pieces), len(pieces) + len(sub)))
        pieces.extend(sub)
    pieces.append(SEP)
    special = tuple(p in (CLS, SEP) and i in (0, len(pieces) - 1) for i, p in enumerate(pieces))
    ids = [CLS_ID] + [_piece_id(p, config.vocab_size) for p in pieces[1:-1]] + [SEP_ID]
    ids = np.asarray(ids, dtype=np.int64)
    ids.setflags(write=False)
    return TokenSequence(tuple(pieces), ids, Segmentation(tuple(words), tuple(spans), special))


def scaled_dot_attention(q, k, v, d_k):
    """Return ``(softmax(q k^T / sqrt(d_k)) v, attention)``."""
    q, k, v = (np.asarray(m, dtype=np.float64) for m in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise InvalidInputError("Q, K, V must be matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise InvalidInputError(f"incompatible shapes Q{q.shape} K{k.shape} V{v.shape}")
    if not d_k > 0:
        raise InvalidInputError("d_k must be positive")
    scores = q @ k.T / math.sqrt(d_k)
    scores -= scores.max(axis=1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=1, keepdims=True)
    return att @ v, att


def _layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass(frozen=True, eq=False)
class ModelWeights:
    config: EncoderConfig
    embedding: np.ndarray
    layers: tuple[dict, ...]
    head_w: np.ndarray  # (L, K, d_model) per-layer process heads
    head_b: np.ndarray  # (L, K)
    final_w: np.ndarray  # (K, d_model)
    final_b: np.ndarray  # (K,)

    @classmethod
    def init(cls, config: EncoderConfig) -> "ModelWeights":
        rng = np.random.default_rng(config.seed)
        d, f = config.d_model, config.d_ff
        emb = rng.normal(0.0, 1.0, (config.vocab_size, d))
        layers = []
        for _ in range(config.n_layers):
            layers.append({
                "wq": rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)),
                "wk": rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)),
                "wv": rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)),
                "wo": rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)),
                "w1": rng.normal(0.0, 1.0 / math.sqrt(d), (d, f)),
                "b1": np.zeros(f),
                "w2": rng.normal(0.0, 1.0 / math.sqrt(f), (f, d)),
                "b2": np.zeros(d),
            })
        k, n = config.n_classes, config.n_layers
        return cls(config, emb, tuple(layers),
                   np.zeros((n, k, d)), np.zeros((n, k)),
                   np.zeros((k, d)), np.zeros(k))._frozen()

    def _frozen(self) -> "ModelWeights":
        arrays = [self.embedding, self.head_w, self.head_b, self.final_w, self.final_b]
        arrays += [a for layer in self.layers for a in layer.values()]
        for a in arrays:
            a.setflags(write=False)
        return self

    def with_heads(self, head_w, head_b, final_w, final_b) -> "ModelWeights":
        return replace(self, head_w=np.array(head_w, dtype=np.float64),
                       head_b=np.array(head_b, dtype=np.float64),
                       final_w=np.array(final_w, dtype=np.float64),
                       final_b=np.array(final_b, dtype=np.float64))._frozen()

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "head_w": self.head_w, "head_b": self.head_b,
               "final_w": self.final_w, "final_b": self.final_b}
        for i, layer in enumerate(self.layers):
            for name, a in layer.items():
                out[f"layer{i}.{name}"] = a
        return out

    def save(self, path) -> None:
        """Write an ``.npz`` archive; every array keeps its own shape header.

        The ``meta`` entry is a JSON string with the format version, the
        weight seed and the full encoder config.
        """
        meta = json.dumps({"version": WEIGHTS_FORMAT_VERSION, "seed": self.config.seed,
                           "config": asdict(self.config)}, sort_keys=True)
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(meta), **self.arrays())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != WEIGHTS_FORMAT_VERSION:
                raise InvalidInputError(f"unsupported weights version {meta.get('version')}")
            config = EncoderConfig(**meta["config"])
            layers = tuple(
                {name: z[f"layer{i}.{name}"].copy() for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")}
                for i in range(config.n_layers))
            return cls(config, z["embedding"].copy(), layers, z["head_w"].copy(),
                       z["head_b"].copy(), z["final_w"].copy(), z["final_b"].copy())._frozen()


@dataclass(frozen=True, eq=False)
class ForwardResult:
    layer_probs: list[np.ndarray]
    attention: np.ndarray  # (executed_layers, heads, n, n)
    logits: np.ndarray
    executed_layers: int
    exited_early: bool = False
    features: list[np.ndarray] = field(default_factory=list)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


def _encoder_layer(x, layer, config):
    n = x.shape[0]
    h = _layer_norm(x)
    q, k, v = h @ layer["wq"], h @ layer["wk"], h @ layer["wv"]
    dk = config.d_k
    heads_out = np.empty((n, config.d_model))
    att = np.empty((config.n_heads, n, n))
    for j in range(config.n_heads):
        sl = slice(j * dk, (j + 1) * dk)
        heads_out[:, sl], att[j] = scaled_dot_attention(q[:, sl], k[:, sl], v[:, sl], dk)
    x = x + heads_out @ layer["wo"]
    h = _layer_norm(x)
    x = x + np.maximum(h @ layer["w1"] + layer["b1"], 0.0) @ layer["w2"] + layer["b2"]
    return x, att


def forward(tokens, weights: ModelWeights, exit_params: EarlyExitParams | None = None) -> ForwardResult:
    """Run the encoder layer by layer, consulting the exit controller after each one."""
    cfg = weights.config
    ids = tokens.ids if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
    n = ids.size
    if n == 0:
        raise InvalidInputError("empty token sequence")
    if n > cfg.max_len:
        raise InvalidInputError(f"{n} tokens exceed max_len={cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InvalidInputError("token id out of vocabulary range")
    x = weights.embedding[ids] + sinusoidal_positions(n, cfg.d_model)
    state = EarlyExitState()
    layer_probs, atts, feats = [], [], []
    logits = None
    for i, layer in enumerate(weights.layers, start=1):
        x, att = _encoder_layer(x, layer, cfg)
        atts.append(att)
        feat = _layer_norm(x[0])
        feats.append(feat)
        head_logits = weights.head_w[i - 1] @ feat + weights.head_b[i - 1]
        layer_probs.append(softmax(head_logits))
        if exit_params is not None:
            state = early_exit_step(state, layer_probs[-1], exit_params, i)
            if state.exited:
                logits = head_logits
                break
    exited = logits is not None
    if not exited:
        logits = weights.final_w @ feats[-1] + weights.final_b
    return ForwardResult(layer_probs, np.stack(atts), logits, len(atts), exited, feats)


def head_features(weights: ModelWeights, dataset) -> tuple[np.ndarray, np.ndarray]:
    """Frozen head inputs for every layer: ``(L, N, d_model)`` and labels ``(N,)``."""
    feats = [forward(tokens, weights).features for tokens, _ in dataset]
    labels = np.asarray([int(y) for _, y in dataset], dtype=np.int64)
    return np.stack(feats, axis=1), labels


def head_loss_and_grad(w, b, feats, labels):
    """Mean cross-entropy of a linear softmax head and its analytic gradient."""
    logits = feats @ w.T + b
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    n = labels.size
    loss = -np.log(p[np.arange(n), labels]).mean()
    delta = p.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    return float(loss), delta.T @ feats, delta.sum(axis=0)


def train_heads(weights: ModelWeights, dataset, learning_rate: float = 0.1,
                epochs: int = 50) -> ModelWeights:
    """Full-batch gradient descent on every head; the encoder body is untouched."""
    dataset = list(dataset)
    if not dataset:
        raise InvalidInputError("training dataset is empty")
    if learning_rate < 0 or epochs < 0:
        raise InvalidParameterError("learning rate and epochs must be non-negative")
    feats, labels = head_features(weights, dataset)
    if labels.min() < 0 or labels.max() >= weights.config.n_classes:
        raise InvalidInputError("label out of range")
    head_w, head_b = weights.head_w.copy(), weights.head_b.copy()
    final_w, final_b = weights.final_w.copy(), weights.final_b.copy()
    for _ in range(epochs):
        for layer in range(weights.config.n_layers):
            _, gw, gb = head_loss_and_grad(head_w[layer], head_b[layer], feats[layer], labels)
            head_w[layer] -= learning_rate * gw
            head_b[layer] -= learning_rate * gb
        _, gw, gb = head_loss_and_grad(final_w, final_b, feats[-1], labels)
        final_w -= learning_rate * gw
        final_b -= learning_rate * gb
    return weights.with_heads(head_w, head_b, final_w, final_b)


def final_head_loss(weights: ModelWeights, dataset) -> float:
    feats, labels = head_features(weights, dataset)
    return head_loss_and_grad(weights.final_w, weights.final_b, feats[-1], labels)[0]
