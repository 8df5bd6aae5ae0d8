"""Model backends behind one contract: per-layer probabilities, importance, cost.

Three kinds ship here:

* ``synthetic``: seeded generator with a configurable accuracy, for trend
  experiments at scale.
* ``toy``: the numpy encoder from :mod:`collabinfer.encoder`.
* ``trace``: replays records written by :func:`write_traces`.

Backends return the full per-layer record they can produce; the early-exit
controller then decides how many layers ran, and the cost model charges for
exactly those layers.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decision import EarlyExitParams, exit_point
from .encoder import EncoderConfig, ModelWeights, TokenSequence, forward, tokenize, train_heads
from .errors import ConfigError, InvalidInputError, MissingTraceError, TraceMismatchError
from .pruning import ImportanceVector
from .streams import derive_rng

BACKEND_KINDS = ("synthetic", "toy", "trace")
TRACE_VERSION = 1


@dataclass(frozen=True)
class CostModel:
    """Simulated compute time: ``base + per_token*n + per_token_sq*n**2 + per_layer*layers``."""

    base: float = 0.0
    per_token: float = 0.0
    per_layer: float = 1.0
    per_token_sq: float = 0.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"cost.{name} must be a finite non-negative number, got {v}")

    def __call__(self, n_tokens: int, layers: int) -> float:
        return (self.base + self.per_token * n_tokens + self.per_token_sq * n_tokens * n_tokens
                + self.per_layer * layers)


@dataclass(frozen=True)
class SyntheticDynamics:
    """How synthetic per-layer outputs evolve with depth.

    Each (task, tier) draws a shallow guess and a final answer. The final
    answer is correct with the tier accuracy ``a``; the guess with
    ``1/K + shallow_skill * (a - 1/K)``, so deeper-tier models also guess better.
    Layer ``l`` mixes the two with weight ``lam(l)``, a logistic ramp centred
    on a per-task commitment depth drawn uniformly from ``commit_range``
    (fractions of the depth) with width ``sharpness`` layers, rescaled so
    ``lam(1) = 0`` and ``lam(L) = 1``. Layer 1 itself emits the uniform
    vector, so outputs start uninformed, jump to the guess, hover there until
    the ramp, and settle on the final answer.
    """

    shallow_skill: float = 0.6
    commit_range: tuple[float, float] = (0.3, 1.0)
    sharpness: float = 1.5
    confidence_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        lo, hi = self.commit_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("commit_range must satisfy 0 <= lo <= hi <= 1")
        if not self.sharpness > 0:
            raise ConfigError("sharpness must be > 0")
        if not 0 <= self.shallow_skill <= 1:
            raise ConfigError("shallow_skill must lie in [0, 1]")
        clo, chi = self.confidence_range
        if not 0 < clo < chi <= 1:
            raise ConfigError("confidence_range must satisfy 0 < lo < hi <= 1")


@dataclass(frozen=True)
class TierProfile:
    index: int
    backend: str = "synthetic"
    accuracy: float = 0.9
    n_layers: int = 12
    cost: CostModel = field(default_factory=CostModel)
    tokenization: str = "word"
    temperature: float = 1.0
    split_length: int = 6
    n_classes: int = 2
    dynamics: SyntheticDynamics = field(default_factory=SyntheticDynamics)
    encoder: EncoderConfig | None = None
    weights_path: str | None = None
    train_samples: int = 200
    train_epochs: int = 50
    train_lr: float = 0.1

    def __post_init__(self):
        if self.index < 1:
            raise ConfigError("tier index starts at 1")
        if self.backend not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind {self.backend!r}; expected one of {BACKEND_KINDS}")
        if not 0 < self.accuracy <= 1:
            raise ConfigError(f"tier {self.index}: accuracy must lie in (0, 1]")
        if self.tokenization not in ("word", "subword"):
            raise ConfigError(f"tier {self.index}: tokenization must be 'word' or 'subword'")
        if not self.temperature > 0:
            raise ConfigError(f"tier {self.index}: temperature must be > 0")
        if self.n_layers < 1:
            raise ConfigError(f"tier {self.index}: n_layers must be >= 1")

    @property
    def encoder_config(self) -> EncoderConfig:
        if self.encoder is not None:
            return self.encoder
        return EncoderConfig(n_layers=self.n_layers, n_classes=self.n_classes,
                             split_length=self.split_length, seed=self.index)

    @property
    def depth(self) -> int:
        return self.encoder_config.n_layers if self.backend == "toy" else self.n_layers

    def tokenize(self, text: str) -> TokenSequence:
        return tokenize(text, self.encoder_config, self.tokenization)


@dataclass(frozen=True, eq=False)
class LayerRecord:
    """Everything a backend can say about one input before early exit is applied."""

    layer_probs: list[np.ndarray]
    layer_importance: list[np.ndarray]
    final_probs: np.ndarray


@dataclass(frozen=True, eq=False)
class BackendOutput:
    layer_probs: list[np.ndarray]
    importance: ImportanceVector
    probs: np.ndarray
    executed_layers: int
    cost: float
    exited_early: bool


def sum_layer_importance(layer_importance, layers: int) -> np.ndarray:
    """Left-to-right sum of the first ``layers`` per-layer importance vectors."""
    total = np.zeros_like(np.asarray(layer_importance[0], dtype=np.float64))
    for v in layer_importance[:layers]:
        total = total + v
    return total


def apply_exit(record: LayerRecord, n_tokens: int, profile: TierProfile,
               exit_params: EarlyExitParams | None) -> BackendOutput:
    stop = exit_point(record.layer_probs, exit_params)
    executed = len(record.layer_probs) if stop is None else stop
    probs = record.final_probs if stop is None else record.layer_probs[stop - 1]
    importance = ImportanceVector(sum_layer_importance(record.layer_importance, executed))
    return BackendOutput(list(record.layer_probs[:executed]), importance, probs, executed,
                         profile.cost(n_tokens, executed), stop is not None)


class SyntheticBackend:
    """Seeded stand-in model with a target accuracy.

    Outcome draws come from the stream ``(seed, task, "synthetic/<tier>")`` and
    importance draws from ``(seed, task, "importance/<tier>")``, so a task's
    record never depends on which other tasks or grid cells ran.

    The final vector puts a maximum probability drawn uniformly from
    ``dynamics.confidence_range`` on the true label when the task is drawn
    correct, otherwise on a different class; the remaining mass is spread
    evenly. Every layer contributes the same importance ``n * s / sum(s)`` with
    token salience ``s ~ Exp(1)``: a total of ``n`` per layer, as a single
    head of row-stochastic attention would give. Because the pruning rule is
    scale free, the pruned hand-off text then does not depend on how many
    layers ran, which keeps trace replay exact across exit settings.
    """

    kind = "synthetic"

    def __init__(self, profile: TierProfile, seed: int):
        self.profile = profile
        self.seed = seed

    def _vector(self, rng, label: int, correct: bool) -> np.ndarray:
        k = self.profile.n_classes
        lo, hi = self.profile.dynamics.confidence_range
        top = max(float(rng.uniform(lo, hi)), 1.0 / k + 1e-9)
        top = min(top, 1.0 - 1e-9)
        if correct:
            cls = label
        else:
            cls = int(rng.integers(0, k - 1))
            cls += cls >= label
        v = np.full(k, (1.0 - top) / (k - 1))
        v[cls] = top
        return v

    def record(self, task_id: str, label: int, n_tokens: int) -> LayerRecord:
        p, dyn = self.profile, self.profile.dynamics
        rng = derive_rng(self.seed, task_id, f"synthetic/{p.index}")
        correct = bool(rng.random() < p.accuracy)
        final = self._vector(rng, label, correct)
        chance = 1.0 / p.n_classes
        shallow_acc = chance + dyn.shallow_skill * (p.accuracy - chance)
        shallow = self._vector(rng, label, bool(rng.random() < shallow_acc))
        depth = p.n_layers
        centre = 1 + (depth - 1) * rng.uniform(*dyn.commit_range)
        ramp = 1.0 / (1.0 + np.exp(-(np.arange(1, depth + 1) - centre) / dyn.sharpness))
        if depth == 1:
            lam = np.ones(1)
        else:
            lam = (ramp - ramp[0]) / (ramp[-1] - ramp[0])
        layer_probs = [(1.0 - l) * shallow + l * final for l in lam]
        if depth > 1:
            layer_probs[0] = np.full(p.n_classes, 1.0 / p.n_classes)
        layer_probs[-1] = final
        irng = derive_rng(self.seed, task_id, f"importance/{p.index}")
        salience = irng.exponential(1.0, n_tokens)
        per_layer = n_tokens * salience / salience.sum()
        return LayerRecord(layer_probs, [per_layer] * depth, final)

    def infer(self, task_id: str, label: int, tokens: TokenSequence,
              exit_params: EarlyExitParams | None) -> BackendOutput:
        return apply_exit(self.record(task_id, label, len(tokens)), len(tokens), self.profile, exit_params)


class ToyBackend:
    """Runs the numpy encoder; early exit happens inside the forward pass."""

    kind = "toy"

    def __init__(self, profile: TierProfile, weights: ModelWeights):
        self.profile = profile
        self.weights = weights

    @classmethod
    def build(cls, profile: TierProfile, seed: int) -> "ToyBackend":
        if profile.weights_path:
            return cls(profile, ModelWeights.load(profile.weights_path))
        from .workload import make_tasks

        cfg = profile.encoder_config
        weights = ModelWeights.init(cfg)
        train = make_tasks(profile.train_samples, seed, prefix=f"train{profile.index}-")
        data = [(tokenize(t.text, cfg, profile.tokenization), t.label) for t in train]
        weights = train_heads(weights, data, profile.train_lr, profile.train_epochs)
        return cls(profile, weights)

    def record(self, tokens: TokenSequence) -> LayerRecord:
        res = forward(tokens, self.weights)
        layer_imp = [att.sum(axis=(0, 1)) for att in res.attention]
        return LayerRecord(res.layer_probs, layer_imp, res.probs)

    def infer(self, task_id: str, label: int, tokens: TokenSequence,
              exit_params: EarlyExitParams | None) -> BackendOutput:
        res = forward(tokens, self.weights, exit_params)
        layer_imp = [att.sum(axis=(0, 1)) for att in res.attention]
        importance = ImportanceVector(sum_layer_importance(layer_imp, res.executed_layers))
        return BackendOutput(res.layer_probs, importance, res.probs, res.executed_layers,
                             self.profile.cost(len(tokens), res.executed_layers), res.exited_early)


@dataclass(frozen=True, eq=False)
class TraceRecord:
    task_id: str
    tier: int
    tokens: tuple[str, ...]
    label: int
    layer_probs: list[np.ndarray]
    importance: np.ndarray
    final_probs: np.ndarray
    layer_importance: list[np.ndarray] | None = None
    text: str | None = None

    def to_json(self) -> dict:
        out = {"version": TRACE_VERSION, "task_id": self.task_id, "tier": self.tier,
               "tokens": list(self.tokens), "label": self.label,
               "layer_probs": [v.tolist() for v in self.layer_probs],
               "importance": self.importance.tolist(),
               "final_probs": self.final_probs.tolist()}
        if self.layer_importance is not None:
            out["layer_importance"] = [v.tolist() for v in self.layer_importance]
        if self.text is not None:
            out["text"] = self.text
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TraceRecord":
        if obj.get("version") != TRACE_VERSION:
            raise InvalidInputError(f"unsupported trace record version {obj.get('version')!r}")
        arr = lambda v: np.asarray(v, dtype=np.float64)  # noqa: E731
        layer_probs = [arr(v) for v in obj["layer_probs"]]
        final = arr(obj["final_probs"]) if "final_probs" in obj else layer_probs[-1]
        li = obj.get("layer_importance")
        return cls(str(obj["task_id"]), int(obj["tier"]), tuple(obj["tokens"]), int(obj["label"]),
                   layer_probs, arr(obj["importance"]), final,
                   None if li is None else [arr(v) for v in li], obj.get("text"))

    def layer_record(self) -> LayerRecord:
        if self.layer_importance is not None:
            layer_imp = self.layer_importance
        else:
            # only the total is known: attribute it all to the first layer
            zero = np.zeros_like(self.importance)
            layer_imp = [self.importance] + [zero] * (len(self.layer_probs) - 1)
        return LayerRecord(self.layer_probs, layer_imp, self.final_probs)


class TraceStore:
    """Immutable mapping ``(task_id, tier) -> TraceRecord`` plus the file header."""

    def __init__(self, records, header: dict | None = None):
        self.header = dict(header or {})
        self._records = {}
        for r in records:
            self._records[(r.task_id, r.tier)] = r

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records.values())

    def get(self, task_id: str, tier: int) -> TraceRecord:
        try:
            return self._records[(task_id, tier)]
        except KeyError:
            raise MissingTraceError(f"no trace for task {task_id!r} at tier {tier}") from None

    def task_ids(self) -> list[str]:
        seen = {}
        for tid, _ in self._records:
            seen.setdefault(tid, None)
        return list(seen)

    @classmethod
    def load(cls, path) -> "TraceStore":
        header, records = None, []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
                if obj.get("kind") == "header":
                    if obj.get("version") != TRACE_VERSION:
                        raise InvalidInputError(f"{path}:{lineno}: unsupported trace version")
                    header = obj
                    continue
                try:
                    records.append(TraceRecord.from_json(obj))
                except KeyError as exc:
                    raise InvalidInputError(f"{path}:{lineno}: missing field {exc}") from None
        return cls(records, header)

    def save(self, path) -> None:
        write_traces(path, list(self), self.header)


def write_traces(path, records, header: dict | None = None) -> None:
    """JSON lines: an optional header line, then one record per (task, tier)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            h = {"kind": "header", "version": TRACE_VERSION}
            h.update({k: v for k, v in header.items() if k not in ("kind", "version")})
            fh.write(json.dumps(h, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


class TraceBackend:
    kind = "trace"

    def __init__(self, profile: TierProfile, store: TraceStore):
        self.profile = profile
        self.store = store

    def infer(self, task_id: str, label: int, tokens: TokenSequence,
              exit_params: EarlyExitParams | None) -> BackendOutput:
        rec = self.store.get(task_id, self.profile.index)
        if tuple(rec.tokens) != tuple(tokens.pieces):
            raise TraceMismatchError(
                f"task {task_id!r} tier {self.profile.index}: input tokens differ from the trace")
        return apply_exit(rec.layer_record(), len(rec.tokens), self.profile, exit_params)


def make_backend(profile: TierProfile, seed: int, trace_store: TraceStore | None = None):
    if profile.backend == "synthetic":
        return SyntheticBackend(profile, seed)
    if profile.backend == "toy":
        return ToyBackend.build(profile, seed)
    if profile.backend == "trace":
        if trace_store is None:
            raise ConfigError(f"tier {profile.index} uses trace replay but no trace file was given")
        return TraceBackend(profile, trace_store)
    raise ConfigError(f"unknown backend kind {profile.backend!r}")


def backend_infer(backend, task_id: str, label: int, tokens: TokenSequence,
                  exit_params: EarlyExitParams | None) -> BackendOutput:
    """Dispatch one inference to a concrete backend."""
    if len(tokens) == 0:
        raise InvalidInputError("empty token sequence")
    if getattr(backend, "kind", None) not in BACKEND_KINDS:
        raise ConfigError(f"unknown backend {backend!r}")
    return backend.infer(task_id, label, tokens, exit_params)
