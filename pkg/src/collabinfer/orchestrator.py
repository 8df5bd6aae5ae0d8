"""The tiered inference loop: infer, score confidence, maybe offload, prune, repeat, ensemble."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backends import TierProfile, backend_infer, make_backend
from .decision import (
    CalibrationParams,
    EarlyExitParams,
    EnsembleSpec,
    OffloadParams,
    confidence,
    decide_offload,
    ensemble,
    offload_probability,
    probs_to_logits,
    profile_weights,
)
from .errors import CollabInferError, ConfigError, InvalidInputError, TierError
from .netsim import LatencyBreakdown, NetworkLink, task_size, total_latency, transmission_latency
from .pruning import PruneParams, prune_for_handoff
from .streams import derive_rng


@dataclass(frozen=True)
class Task:
    id: str
    text: str
    label: int


@dataclass(frozen=True)
class TierChain:
    tiers: tuple[TierProfile, ...]
    links: tuple[NetworkLink, ...]
    offload: OffloadParams
    prune: tuple[PruneParams, ...]
    early_exit: EarlyExitParams | None
    backends: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        n = len(self.tiers)
        if n < 1:
            raise ConfigError("a chain needs at least one tier")
        if len(self.links) != n - 1:
            raise ConfigError(f"{n} tiers need {n - 1} links, got {len(self.links)}")
        if len(self.prune) != n - 1:
            raise ConfigError(f"{n} tiers need {n - 1} pruning settings, got {len(self.prune)}")
        for i, t in enumerate(self.tiers, start=1):
            if t.index != i:
                raise ConfigError(f"tier indices must run 1..{n} in order")
        for j, link in enumerate(self.links, start=1):
            if link.source != j:
                raise ConfigError(f"link {j} must connect tier {j} to tier {j + 1}")
        if self.backends and len(self.backends) != n:
            raise ConfigError("one backend per tier required")

    @classmethod
    def build(cls, tiers, links, offload, prune, early_exit, seed=0, trace_store=None):
        tiers = tuple(tiers)
        backends = tuple(make_backend(p, seed, trace_store) for p in tiers)
        return cls(tiers, tuple(links), offload, tuple(prune), early_exit, backends)

    def with_params(self, offload=None, early_exit="keep") -> "TierChain":
        """Same tiers and backends with different dispatcher or exit settings."""
        return TierChain(self.tiers, self.links, offload or self.offload, self.prune,
                         self.early_exit if early_exit == "keep" else early_exit, self.backends)

    @property
    def weights(self) -> EnsembleSpec:
        return profile_weights([t.accuracy for t in self.tiers])


@dataclass(frozen=True, eq=False)
class TierRecord:
    tier: int
    executed_layers: int
    probs: np.ndarray
    confidence: float
    offload_probability: float | None
    offloaded: bool | None
    forwarded_text: str | None
    compute: float
    n_tokens: int


@dataclass(frozen=True, eq=False)
class InferenceOutcome:
    task_id: str
    tiers: list[TierRecord]
    probs: np.ndarray
    weights: tuple[float, ...]
    predicted: int
    label: int
    latency: LatencyBreakdown

    @property
    def correct(self) -> bool:
        return self.predicted == self.label

    def fingerprint(self) -> tuple:
        """Hashable, bit-exact summary used for determinism checks."""
        return (self.task_id, self.predicted, tuple(self.probs.tolist()), self.weights,
                self.latency.compute, self.latency.transmission,
                tuple((r.tier, r.executed_layers, tuple(r.probs.tolist()), r.confidence,
                       r.offload_probability, r.offloaded, r.forwarded_text, r.n_tokens)
                      for r in self.tiers))


def run_task(task: Task, chain: TierChain, seed: int) -> InferenceOutcome:
    """Push one task up the chain until a tier keeps it or the last tier answers.

    Offload draws use the stream ``(chain.offload.rng_seed, task, "offload/<tier>")``;
    link jitter uses ``(seed, task, "jitter/<link>")``.
    """
    if not chain.backends:
        raise ConfigError("chain has no backends; use TierChain.build")
    n = len(chain.tiers)
    text = task.text
    records: list[TierRecord] = []
    transmissions: list[float] = []
    for i, (profile, backend) in enumerate(zip(chain.tiers, chain.backends), start=1):
        try:
            tokens = profile.tokenize(text)
            out = backend_infer(backend, task.id, task.label, tokens, chain.early_exit)
        except CollabInferError as exc:
            raise TierError(i, exc) from exc
        conf = confidence(probs_to_logits(out.probs), CalibrationParams(profile.temperature))
        if i == n:
            records.append(TierRecord(i, out.executed_layers, out.probs, conf, None, None,
                                      None, out.cost, len(tokens)))
            break
        p = offload_probability(conf, chain.offload)
        go = decide_offload(p, derive_rng(chain.offload.rng_seed, task.id, f"offload/{i}"))
        forwarded = None
        if go:
            target = chain.tiers[i].tokenize(text).segmentation
            forwarded, _ = prune_for_handoff(out.importance, tokens.segmentation, target,
                                             chain.prune[i - 1])
            link = chain.links[i - 1]
            jitter_rng = derive_rng(seed, task.id, f"jitter/{i}") if link.jitter else None
            transmissions.append(transmission_latency(task_size(forwarded), link, jitter_rng))
        records.append(TierRecord(i, out.executed_layers, out.probs, conf, p, go, forwarded,
                                  out.cost, len(tokens)))
        if not go:
            break
        text = forwarded
    spec = profile_weights([chain.tiers[r.tier - 1].accuracy for r in records])
    probs = ensemble([r.probs for r in records], spec)
    latency = total_latency([r.compute for r in records], transmissions)
    return InferenceOutcome(task.id, records, probs, spec.weights, int(np.argmax(probs)),
                            task.label, latency)


@dataclass(frozen=True)
class WorkloadMetrics:
    n_tasks: int
    accuracy: float
    mean_latency: float
    mean_compute: float
    mean_transmission: float
    p50_latency: float
    p95_latency: float
    offload_rate: tuple[float, ...]
    reach_rate: tuple[float, ...]
    mean_layers: tuple[float, ...]
    mean_depth_fraction: float
    accuracy_target: float | None = None

    @property
    def target_met(self) -> bool | None:
        if self.accuracy_target is None:
            return None
        return self.accuracy >= self.accuracy_target


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def summarize(outcomes, chain: TierChain, accuracy_target: float | None = None) -> WorkloadMetrics:
    outcomes = list(outcomes)
    if not outcomes:
        raise InvalidInputError("no outcomes to summarise")
    n_tiers = len(chain.tiers)
    lat = sorted(o.latency.total for o in outcomes)
    offload, reach, layers = [], [], []
    fractions = []
    for i in range(1, n_tiers + 1):
        recs = [r for o in outcomes for r in o.tiers if r.tier == i]
        reach.append(len(recs) / len(outcomes))
        layers.append(_mean(r.executed_layers for r in recs))
        fractions.extend(r.executed_layers / chain.tiers[i - 1].depth for r in recs)
        if i < n_tiers:
            offload.append(_mean(1.0 if r.offloaded else 0.0 for r in recs))
    return WorkloadMetrics(
        n_tasks=len(outcomes),
        accuracy=sum(o.correct for o in outcomes) / len(outcomes),
        mean_latency=_mean(o.latency.total for o in outcomes),
        mean_compute=_mean(o.latency.total_compute for o in outcomes),
        mean_transmission=_mean(o.latency.total_transmission for o in outcomes),
        p50_latency=float(np.percentile(lat, 50)),
        p95_latency=float(np.percentile(lat, 95)),
        offload_rate=tuple(offload),
        reach_rate=tuple(reach),
        mean_layers=tuple(layers),
        mean_depth_fraction=_mean(fractions),
        accuracy_target=accuracy_target,
    )


def run_workload(tasks, chain: TierChain, seed: int, accuracy_target: float | None = None):
    """Run every task with its own derived streams; returns ``(outcomes, metrics)``."""
    tasks = list(tasks)
    if not tasks:
        raise InvalidInputError("workload is empty")
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("task ids must be unique within a workload")
    outcomes = [run_task(t, chain, seed) for t in tasks]
    return outcomes, summarize(outcomes, chain, accuracy_target)
