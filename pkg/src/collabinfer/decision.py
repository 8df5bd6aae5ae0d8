"""Numeric kernels for the offloading dispatcher and the early-exit controller.

Everything here is a pure function of its arguments. Randomness enters only
through an explicitly passed ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, UsageError

DEFAULT_TEMPERATURE_GRID = (0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0)


@dataclass(frozen=True)
class CalibrationParams:
    temperature: float = 1.0

    def __post_init__(self):
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise InvalidParameterError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class OffloadParams:
    threshold: float = 0.8
    scale: float = 10.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise InvalidParameterError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.scale > 0:
            raise InvalidParameterError(f"scale k must be > 0, got {self.scale}")
        if self.rng_seed < 0:
            raise InvalidParameterError("rng_seed must be non-negative")


@dataclass(frozen=True)
class EnsembleSpec:
    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not w:
            raise InvalidParameterError("ensemble needs at least one weight")
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise InvalidParameterError(f"weights must be finite and >= 0: {w}")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise InvalidParameterError(f"weights must sum to 1, got {math.fsum(w)!r}")


@dataclass(frozen=True)
class EarlyExitParams:
    diff_threshold: float = 0.0
    patience: int = 1

    def __post_init__(self):
        if not (self.diff_threshold >= 0 and math.isfinite(self.diff_threshold)):
            raise InvalidParameterError(f"diff_threshold must be >= 0, got {self.diff_threshold}")
        if int(self.patience) != self.patience or self.patience < 1:
            raise InvalidParameterError(f"patience must be a positive integer, got {self.patience}")


@dataclass(frozen=True, eq=False)
class EarlyExitState:
    counter: int = 0
    last_probs: np.ndarray | None = None
    exited_at_layer: int | None = None
    last_layer: int = 0

    @property
    def exited(self) -> bool:
        return self.exited_at_layer is not None


def _as_vector(values, name="logits") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise InvalidInputError(f"{name} must be a 1-d vector with at least 2 entries")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def softmax(logits) -> np.ndarray:
    z = _as_vector(logits)
    e = np.exp(z - z.max())
    return e / e.sum()


def confidence(logits, cal: CalibrationParams | float = CalibrationParams()) -> float:
    """Largest entry of the temperature-scaled softmax."""
    if not isinstance(cal, CalibrationParams):
        cal = CalibrationParams(float(cal))
    z = _as_vector(logits)
    return float(softmax(z / cal.temperature).max())


def probs_to_logits(probs) -> np.ndarray:
    """Log-probabilities; softmax of the result reproduces ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p <= 0):
        raise InvalidInputError("probabilities must be strictly positive to take logs")
    return np.log(p)


def norm_confidence(conf: float, t: float) -> float:
    if not conf > t:
        raise InvalidInputError(f"norm_confidence requires conf > t (conf={conf}, t={t})")
    return (conf - t) / (1.0 - t) - 0.5


def offload_probability(conf: float, params: OffloadParams) -> float:
    if not 0.0 < conf <= 1.0:
        raise InvalidInputError(f"confidence must lie in (0, 1], got {conf}")
    if conf <= params.threshold:
        return 1.0
    x = params.scale * norm_confidence(conf, params.threshold)
    # logistic written to stay finite for large |x|
    if x >= 0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


def decide_offload(prob: float, rng: np.random.Generator) -> bool:
    """One Bernoulli(prob) draw; consumes exactly one uniform from ``rng``."""
    if not 0.0 <= prob <= 1.0:
        raise InvalidInputError(f"probability must lie in [0, 1], got {prob}")
    return bool(rng.random() < prob)


def ensemble(probs: Sequence, spec: EnsembleSpec) -> np.ndarray:
    if len(probs) != len(spec.weights):
        raise InvalidInputError(
            f"{len(probs)} probability vectors but {len(spec.weights)} weights")
    vecs = [np.asarray(p, dtype=np.float64) for p in probs]
    k = vecs[0].shape
    if any(v.ndim != 1 or v.shape != k for v in vecs):
        raise InvalidInputError("probability vectors must all have the same length")
    out = np.zeros(k, dtype=np.float64)
    for w, v in zip(spec.weights, vecs):
        out += w * v
    return out


def layer_diff(prev, curr) -> float:
    a = np.asarray(prev, dtype=np.float64)
    b = np.asarray(curr, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError("layer outputs differ in length")
    return abs(float(b.max()) - float(a.max()))


def early_exit_step(state: EarlyExitState, curr, params: EarlyExitParams,
                    layer_index: int) -> EarlyExitState:
    """Advance the patience counter by one layer.

    A diff strictly below the threshold increments the counter; anything
    else (including equality) resets it. The first call only records the
    layer output. Once the counter reaches ``params.patience`` the returned
    state carries ``exited_at_layer`` and further calls raise.
    """
    if state.exited:
        raise UsageError(f"model already exited at layer {state.exited_at_layer}")
    if layer_index != state.last_layer + 1:
        raise UsageError(f"expected layer {state.last_layer + 1}, got {layer_index}")
    curr = np.asarray(curr, dtype=np.float64)
    if state.last_probs is None:
        return replace(state, last_probs=curr, last_layer=layer_index)
    d = layer_diff(state.last_probs, curr)
    counter = state.counter + 1 if d < params.diff_threshold else 0
    exited = layer_index if counter >= params.patience else None
    return EarlyExitState(counter=counter, last_probs=curr,
                          exited_at_layer=exited, last_layer=layer_index)


def exit_point(per_layer_probs: Sequence, params: EarlyExitParams | None) -> int | None:
    """Layer at which the controller stops a pass over ``per_layer_probs``, or None."""
    if params is None:
        return None
    state = EarlyExitState()
    for i, p in enumerate(per_layer_probs, start=1):
        state = early_exit_step(state, p, params, i)
        if state.exited:
            return i
    return None


def _mean_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    nll = log_norm - z[np.arange(len(labels)), labels]
    # fsum is exactly rounded, so the result ignores sample order
    return math.fsum(nll.tolist()) / len(labels)


def calibrate_temperature(validation, grid=DEFAULT_TEMPERATURE_GRID) -> CalibrationParams:
    """Grid-search the temperature minimising validation NLL.

    ``validation`` is a sequence of ``(logits, label)`` pairs. Ties go to the
    smaller temperature.
    """
    validation = list(validation)
    grid = list(grid)
    if not validation:
        raise InvalidInputError("validation set is empty")
    if not grid:
        raise InvalidInputError("temperature grid is empty")
    if any(not (g > 0) for g in grid):
        raise InvalidParameterError("grid temperatures must be positive")
    logits = np.stack([_as_vector(z) for z, _ in validation])
    labels = np.asarray([int(y) for _, y in validation])
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InvalidInputError("label out of range for logit width")
    best_t, best = None, math.inf
    for t in sorted(set(float(g) for g in grid)):
        nll = _mean_nll(logits, labels, t)
        if nll < best:
            best_t, best = t, nll
    return CalibrationParams(best_t)


def profile_weights(accuracies) -> EnsembleSpec:
    acc = [float(a) for a in accuracies]
    if not acc:
        raise InvalidInputError("need at least one accuracy")
    if any(not (a > 0) for a in acc):
        raise InvalidInputError(f"accuracies must be > 0: {acc}")
    total = math.fsum(acc)
    w = [a / total for a in acc]
    # push the rounding residue onto the largest weight so the sum is exact
    w[int(np.argmax(w))] += 1.0 - math.fsum(w)
    return EnsembleSpec(tuple(w))
