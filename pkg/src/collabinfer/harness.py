"""Experiment configuration, parameter sweeps, trace generation and reports.

Config files are YAML with a mandatory ``version: 1`` key. Unknown keys are
rejected with the offending line number, so a typo never silently falls back
to a default.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .backends import (
    CostModel,
    SyntheticBackend,
    SyntheticDynamics,
    TierProfile,
    ToyBackend,
    TraceRecord,
    TraceStore,
    make_backend,
    write_traces,
)
from .decision import (
    DEFAULT_TEMPERATURE_GRID,
    EarlyExitParams,
    OffloadParams,
    calibrate_temperature,
    probs_to_logits,
)
from .encoder import CLS, SEP, EncoderConfig
from .errors import ConfigError
from .netsim import NetworkLink
from .orchestrator import Task, TierChain, run_workload
from .pruning import ImportanceVector, PruneParams, prune_for_handoff
from .workload import make_tasks

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
REPORT_VERSION = 1
DEFAULT_TAUS = (0.0, 0.01, 0.0001, 0.00001)
DEFAULT_THRESHOLDS = (0.7, 0.8, 0.9)

DEFAULT_CONFIG_YAML = """\
version: 1
seed: 7
accuracy_target: 0.85
workload:
  source: synthetic
  n_tasks: 1000
  min_words: 8
  max_words: 24
offload:
  scale: 10.0
  thresholds: [0.7, 0.8, 0.9]
early_exit:
  patience: 2
  taus: [0.0, 0.01, 0.0001, 0.00001]
tiers:
  - name: end
    backend: synthetic
    accuracy: 0.80
    layers: 6
    tokenization: word
    temperature: 1.0
    cost: {base: 40.0, per_token: 1.0, per_layer: 10.0}
  - name: edge
    backend: synthetic
    accuracy: 0.90
    layers: 12
    tokenization: subword
    temperature: 1.0
    cost: {base: 80.0, per_token: 0.5, per_layer: 15.0}
  - name: cloud
    backend: synthetic
    accuracy: 0.96
    layers: 24
    tokenization: word
    temperature: 1.0
    cost: {base: 150.0, per_token: 0.3, per_layer: 20.0}
links:
  - {rate: 0.5, jitter: 0.0, alpha: 0.8}
  - {rate: 2.0, jitter: 0.0, alpha: 0.8}
"""

_TOP_KEYS = {"version", "seed", "accuracy_target", "workload", "offload", "early_exit",
             "tiers", "links", "calibration"}
_WORKLOAD_KEYS = {"source", "n_tasks", "min_words", "max_words", "trace_file"}
_OFFLOAD_KEYS = {"scale", "thresholds"}
_EXIT_KEYS = {"patience", "taus", "enabled"}
_TIER_KEYS = {"name", "backend", "accuracy", "layers", "tokenization", "temperature", "cost",
              "split_length", "classes", "dynamics", "encoder", "weights", "train"}
_COST_KEYS = {"base", "per_token", "per_layer", "per_token_sq"}
_DYN_KEYS = {"shallow_skill", "commit_range", "sharpness", "confidence_range"}
_ENCODER_KEYS = {"layers", "heads", "d_model", "d_ff", "vocab_size", "max_len", "seed"}
_TRAIN_KEYS = {"samples", "epochs", "learning_rate"}
_LINK_KEYS = {"rate", "jitter", "alpha"}
_CALIB_KEYS = {"grid", "n_tasks"}


@dataclass(frozen=True)
class WorkloadSpec:
    source: str = "synthetic"
    n_tasks: int = 1000
    min_words: int = 8
    max_words: int = 24
    trace_file: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    tiers: tuple[TierProfile, ...]
    tier_names: tuple[str, ...]
    links: tuple[NetworkLink, ...]
    alphas: tuple[float, ...]
    taus: tuple[float, ...] = DEFAULT_TAUS
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    scale: float = 10.0
    patience: int = 2
    early_exit_enabled: bool = True
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    accuracy_target: float | None = None
    calibration_grid: tuple[float, ...] = DEFAULT_TEMPERATURE_GRID
    calibration_tasks: int = 500
    base_dir: str = "."

    def __post_init__(self):
        if not self.taus or not self.thresholds:
            raise ConfigError("sweep lists must be non-empty")
        if len(self.links) != len(self.tiers) - 1 or len(self.alphas) != len(self.links):
            raise ConfigError("need exactly one link (with alpha) between consecutive tiers")

    def to_dict(self) -> dict:
        """Canonical, JSON-serialisable form; the config hash is taken over this."""
        tiers = []
        for name, t in zip(self.tier_names, self.tiers):
            d = {"name": name, "backend": t.backend, "accuracy": t.accuracy, "layers": t.n_layers,
                 "tokenization": t.tokenization, "temperature": t.temperature,
                 "split_length": t.split_length, "classes": t.n_classes,
                 "cost": asdict(t.cost)}
            if t.backend == "synthetic":
                dyn = asdict(t.dynamics)
                d["dynamics"] = {k: list(v) if isinstance(v, tuple) else v for k, v in dyn.items()}
            if t.backend == "toy":
                d["encoder"] = asdict(t.encoder_config)
                d["weights"] = t.weights_path
                d["train"] = {"samples": t.train_samples, "epochs": t.train_epochs,
                              "learning_rate": t.train_lr}
            tiers.append(d)
        return {
            "version": CONFIG_VERSION, "seed": self.seed,
            "accuracy_target": self.accuracy_target,
            "workload": asdict(self.workload),
            "offload": {"scale": self.scale, "thresholds": list(self.thresholds)},
            "early_exit": {"patience": self.patience, "taus": list(self.taus),
                           "enabled": self.early_exit_enabled},
            "tiers": tiers,
            "links": [{"rate": l.rate, "jitter": l.jitter, "alpha": a}
                      for l, a in zip(self.links, self.alphas)],
            "calibration": {"grid": list(self.calibration_grid), "n_tasks": self.calibration_tasks},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


# --- parsing ---------------------------------------------------------------

class _Lines:
    """Line numbers of every mapping key, addressed by key path."""

    def __init__(self, text: str):
        self.lines: dict[tuple, int] = {}
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                              None if mark is None else mark.line + 1) from None
        if node is not None:
            self._walk(node, ())

    def _walk(self, node, path):
        self.lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (k.value,)
                self.lines[key] = k.start_mark.line + 1
                self._walk(v, key)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, path + (i,))

    def at(self, path) -> int | None:
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)


class _Reader:
    def __init__(self, lines: _Lines):
        self.lines = lines

    def fail(self, path, msg):
        raise ConfigError(f"{'.'.join(str(p) for p in path) or '<root>'}: {msg}", self.lines.at(path))

    def mapping(self, obj, path, allowed):
        if obj is None:
            return {}
        if not isinstance(obj, dict):
            self.fail(path, "expected a mapping")
        for k in obj:
            if k not in allowed:
                self.fail(path + (k,), f"unknown key {k!r} (allowed: {', '.join(sorted(allowed))})")
        return obj

    def number(self, obj, path, default=None, kind=float, positive=False, nonneg=False):
        if obj is None:
            if default is None:
                self.fail(path, "required value missing")
            return default
        if isinstance(obj, bool) or not isinstance(obj, (int, float)):
            self.fail(path, f"expected a number, got {obj!r}")
        if kind is int and int(obj) != obj:
            self.fail(path, f"expected an integer, got {obj!r}")
        v = kind(obj)
        if positive and not v > 0:
            self.fail(path, f"must be > 0, got {v}")
        if nonneg and not v >= 0:
            self.fail(path, f"must be >= 0, got {v}")
        return v

    def numbers(self, obj, path, default):
        if obj is None:
            return tuple(default)
        if not isinstance(obj, list) or not obj:
            self.fail(path, "expected a non-empty list")
        return tuple(self.number(v, path + (i,)) for i, v in enumerate(obj))

    def pair(self, obj, path, default):
        vals = self.numbers(obj, path, default)
        if len(vals) != 2:
            self.fail(path, "expected two numbers")
        return vals


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    lines = _Lines(text)
    r = _Reader(lines)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:  # pragma: no cover - compose already caught it
        raise ConfigError(str(exc)) from None
    raw = r.mapping(raw, (), _TOP_KEYS)
    if raw.get("version") != CONFIG_VERSION:
        r.fail(("version",), f"version must be {CONFIG_VERSION}")
    if "seed" not in raw:
        r.fail(("seed",), "seed is required")
    seed = r.number(raw["seed"], ("seed",), kind=int, nonneg=True)
    target = raw.get("accuracy_target")
    target = None if target is None else r.number(target, ("accuracy_target",), nonneg=True)

    wl = r.mapping(raw.get("workload"), ("workload",), _WORKLOAD_KEYS)
    source = wl.get("source", "synthetic")
    if source not in ("synthetic", "trace"):
        r.fail(("workload", "source"), "must be 'synthetic' or 'trace'")
    if source == "trace" and not wl.get("trace_file"):
        r.fail(("workload", "trace_file"), "trace workloads need trace_file")
    workload = WorkloadSpec(
        source, r.number(wl.get("n_tasks"), ("workload", "n_tasks"), 1000, int, positive=True),
        r.number(wl.get("min_words"), ("workload", "min_words"), 8, int, positive=True),
        r.number(wl.get("max_words"), ("workload", "max_words"), 24, int, positive=True),
        wl.get("trace_file"))
    if workload.max_words < workload.min_words:
        r.fail(("workload", "max_words"), "must be >= min_words")

    off = r.mapping(raw.get("offload"), ("offload",), _OFFLOAD_KEYS)
    scale = r.number(off.get("scale"), ("offload", "scale"), 10.0, positive=True)
    thresholds = r.numbers(off.get("thresholds"), ("offload", "thresholds"), DEFAULT_THRESHOLDS)
    for i, t in enumerate(thresholds):
        if not 0 < t < 1:
            r.fail(("offload", "thresholds", i), "thresholds must lie in (0, 1)")

    ee = r.mapping(raw.get("early_exit"), ("early_exit",), _EXIT_KEYS)
    patience = r.number(ee.get("patience"), ("early_exit", "patience"), 2, int, positive=True)
    taus = r.numbers(ee.get("taus"), ("early_exit", "taus"), DEFAULT_TAUS)
    for i, t in enumerate(taus):
        if t < 0:
            r.fail(("early_exit", "taus", i), "taus must be >= 0")
    enabled = ee.get("enabled", True)
    if not isinstance(enabled, bool):
        r.fail(("early_exit", "enabled"), "expected true or false")

    tiers_raw = raw.get("tiers")
    if not isinstance(tiers_raw, list) or not tiers_raw:
        r.fail(("tiers",), "expected a non-empty list of tiers")
    tiers, names = [], []
    for i, t in enumerate(tiers_raw):
        tiers.append(_parse_tier(r, t, ("tiers", i), i + 1, base_dir))
        names.append(str(t.get("name", f"tier{i + 1}")))

    links_raw = raw.get("links") or []
    if not isinstance(links_raw, list):
        r.fail(("links",), "expected a list")
    if len(links_raw) != len(tiers) - 1:
        r.fail(("links",), f"{len(tiers)} tiers need {len(tiers) - 1} links, got {len(links_raw)}")
    links, alphas = [], []
    for j, l in enumerate(links_raw):
        path = ("links", j)
        l = r.mapping(l, path, _LINK_KEYS)
        rate = r.number(l.get("rate"), path + ("rate",), positive=True)
        jitter = r.number(l.get("jitter"), path + ("jitter",), 0.0, nonneg=True)
        if jitter >= 1:
            r.fail(path + ("jitter",), "must be < 1")
        links.append(NetworkLink(j + 1, rate, jitter))
        alphas.append(r.number(l.get("alpha"), path + ("alpha",), 0.8, nonneg=True))

    cal = r.mapping(raw.get("calibration"), ("calibration",), _CALIB_KEYS)
    grid = r.numbers(cal.get("grid"), ("calibration", "grid"), DEFAULT_TEMPERATURE_GRID)
    if any(g <= 0 for g in grid):
        r.fail(("calibration", "grid"), "temperatures must be > 0")
    n_cal = r.number(cal.get("n_tasks"), ("calibration", "n_tasks"), 500, int, positive=True)

    return ExperimentConfig(seed, tuple(tiers), tuple(names), tuple(links), tuple(alphas),
                            taus, thresholds, scale, patience, enabled, workload, target,
                            grid, n_cal, str(base_dir))


def _parse_tier(r: _Reader, t, path, index, base_dir) -> TierProfile:
    t = r.mapping(t, path, _TIER_KEYS)
    backend = t.get("backend", "synthetic")
    if backend not in ("synthetic", "toy", "trace"):
        r.fail(path + ("backend",), f"unknown backend {backend!r}")
    tok = t.get("tokenization", "word")
    if tok not in ("word", "subword"):
        r.fail(path + ("tokenization",), "must be 'word' or 'subword'")
    cost = r.mapping(t.get("cost"), path + ("cost",), _COST_KEYS)
    cost = CostModel(**{k: r.number(v, path + ("cost", k), nonneg=True) for k, v in cost.items()})
    dyn_raw = r.mapping(t.get("dynamics"), path + ("dynamics",), _DYN_KEYS)
    base = SyntheticDynamics()
    dyn = SyntheticDynamics(
        r.number(dyn_raw.get("shallow_skill"), path + ("dynamics", "shallow_skill"), base.shallow_skill),
        r.pair(dyn_raw.get("commit_range"), path + ("dynamics", "commit_range"), base.commit_range),
        r.number(dyn_raw.get("sharpness"), path + ("dynamics", "sharpness"), base.sharpness, positive=True),
        r.pair(dyn_raw.get("confidence_range"), path + ("dynamics", "confidence_range"),
               base.confidence_range))
    layers = r.number(t.get("layers"), path + ("layers",), 12, int, positive=True)
    n_classes = r.number(t.get("classes"), path + ("classes",), 2, int)
    if n_classes < 2:
        r.fail(path + ("classes",), "need at least 2 classes")
    split = r.number(t.get("split_length"), path + ("split_length",), 6, int, positive=True)
    enc = None
    if t.get("encoder") is not None:
        e = r.mapping(t["encoder"], path + ("encoder",), _ENCODER_KEYS)
        d = EncoderConfig()
        num = lambda k, dv: r.number(e.get(k), path + ("encoder", k), dv, int, positive=True)  # noqa: E731
        try:
            enc = EncoderConfig(n_layers=num("layers", layers), n_heads=num("heads", d.n_heads),
                                d_model=num("d_model", d.d_model), d_ff=num("d_ff", d.d_ff),
                                vocab_size=num("vocab_size", d.vocab_size), n_classes=n_classes,
                                max_len=num("max_len", d.max_len),
                                seed=r.number(e.get("seed"), path + ("encoder", "seed"), index, int),
                                split_length=split)
        except ValueError as exc:
            r.fail(path + ("encoder",), str(exc))
        layers = enc.n_layers
    train = r.mapping(t.get("train"), path + ("train",), _TRAIN_KEYS)
    weights = t.get("weights")
    if weights is not None:
        p = Path(weights)
        weights = str(p if p.is_absolute() else Path(base_dir) / p)
    try:
        return TierProfile(
            index=index, backend=backend,
            accuracy=r.number(t.get("accuracy"), path + ("accuracy",), positive=True),
            n_layers=layers, cost=cost, tokenization=tok,
            temperature=r.number(t.get("temperature"), path + ("temperature",), 1.0, positive=True),
            split_length=split, n_classes=n_classes, dynamics=dyn, encoder=enc,
            weights_path=weights,
            train_samples=r.number(train.get("samples"), path + ("train", "samples"), 200, int, positive=True),
            train_epochs=r.number(train.get("epochs"), path + ("train", "epochs"), 50, int, nonneg=True),
            train_lr=r.number(train.get("learning_rate"), path + ("train", "learning_rate"), 0.1, nonneg=True))
    except ConfigError as exc:
        r.fail(path, str(exc))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=str(path.parent))


def default_config() -> ExperimentConfig:
    return parse_config(DEFAULT_CONFIG_YAML)


# --- workloads and chains --------------------------------------------------

def text_from_pieces(pieces) -> str:
    words = []
    for p in pieces:
        if p in (CLS, SEP):
            continue
        if p.startswith("##") and words:
            words[-1] += p[2:]
        else:
            words.append(p)
    return " ".join(words)


def load_workload(config: ExperimentConfig):
    """Tasks plus, for trace workloads, the loaded store."""
    wl = config.workload
    if wl.source == "synthetic":
        return make_tasks(wl.n_tasks, config.seed, min_words=wl.min_words,
                          max_words=wl.max_words), None
    store = TraceStore.load(config.resolve(wl.trace_file))
    tasks = []
    for rec in store:
        if rec.tier == 1:
            text = rec.text or text_from_pieces(rec.tokens)
            tasks.append(Task(rec.task_id, text, rec.label))
    return tasks, store


def build_chain(config: ExperimentConfig, trace_store: TraceStore | None = None,
                threshold: float | None = None, tau: float | None = None,
                exit_controller: bool = True) -> TierChain:
    tiers = config.tiers
    if trace_store is not None:
        tiers = tuple(replace(t, backend="trace") for t in tiers)
    offload = OffloadParams(config.thresholds[0] if threshold is None else threshold,
                            config.scale, config.seed)
    exit_params = None
    if exit_controller and config.early_exit_enabled:
        exit_params = EarlyExitParams(config.taus[0] if tau is None else tau, config.patience)
    return TierChain.build(tiers, config.links, offload,
                           [PruneParams(a) for a in config.alphas], exit_params,
                           config.seed, trace_store)


# --- sweep -----------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    tau: float
    threshold: float
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

    def flat(self) -> dict:
        out = {"tau": self.tau, "threshold": self.threshold, "accuracy": self.accuracy,
               "mean_latency": self.mean_latency, "mean_compute": self.mean_compute,
               "mean_transmission": self.mean_transmission, "p50_latency": self.p50_latency,
               "p95_latency": self.p95_latency}
        for i, v in enumerate(self.offload_rate, start=1):
            out[f"offload_rate_t{i}"] = v
        for i, v in enumerate(self.reach_rate, start=1):
            out[f"reach_rate_t{i}"] = v
        for i, v in enumerate(self.mean_layers, start=1):
            out[f"mean_layers_t{i}"] = v
        out["mean_depth_fraction"] = self.mean_depth_fraction
        return out


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[SweepRow, ...]
    seed: int
    config_hash: str
    n_tasks: int
    accuracy_target: float | None = None

    def row(self, tau: float, threshold: float) -> SweepRow:
        for r in self.rows:
            if r.tau == tau and r.threshold == threshold:
                return r
        raise KeyError((tau, threshold))

    def to_csv(self) -> str:
        buf = io.StringIO()
        flat = [r.flat() for r in self.rows]
        writer = csv.DictWriter(buf, fieldnames=list(flat[0]), lineterminator="\n")
        writer.writeheader()
        for row in flat:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
        buf.write(f"# report_version={REPORT_VERSION}\n")
        buf.write(f"# seed={self.seed}\n")
        buf.write(f"# config_sha256={self.config_hash}\n")
        buf.write(f"# n_tasks={self.n_tasks}\n")
        buf.write(f"# accuracy_target={_fmt(self.accuracy_target)}\n")
        return buf.getvalue()

    def to_json(self) -> str:
        obj = {"report_version": REPORT_VERSION, "seed": self.seed,
               "config_sha256": self.config_hash, "n_tasks": self.n_tasks,
               "accuracy_target": self.accuracy_target,
               "rows": [r.flat() for r in self.rows]}
        return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "report.csv", out / "report.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(self.to_json(), encoding="utf-8")
        return csv_path, json_path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def grid_order(taus, thresholds):
    """Cells ordered by threshold descending, then tau descending."""
    return [(tau, t) for t in sorted(set(thresholds), reverse=True)
            for tau in sorted(set(taus), reverse=True)]


def run_cell(config, tasks, base_chain: TierChain, tau, threshold, exit_controller=True):
    exit_params = None
    if exit_controller and config.early_exit_enabled:
        exit_params = EarlyExitParams(tau, config.patience)
    chain = base_chain.with_params(OffloadParams(threshold, config.scale, config.seed), exit_params)
    return run_workload(tasks, chain, config.seed, config.accuracy_target)


def run_sweep(config: ExperimentConfig, exit_controller: bool = True,
              keep_outcomes: bool = False):
    """Run every (tau, threshold) cell on the same tasks and random streams.

    With ``exit_controller=False`` the chain is built without any early-exit
    controller at all (not merely tau = 0). With ``keep_outcomes`` the return
    value is ``(report, {cell: outcomes})``.
    """
    started = time.perf_counter()
    tasks, store = load_workload(config)
    base = build_chain(config, store, exit_controller=exit_controller)
    rows, kept = [], {}
    for tau, t in grid_order(config.taus, config.thresholds):
        outcomes, m = run_cell(config, tasks, base, tau, t, exit_controller)
        if keep_outcomes:
            kept[(tau, t)] = outcomes
        rows.append(SweepRow(tau, t, m.accuracy, m.mean_latency, m.mean_compute,
                             m.mean_transmission, m.p50_latency, m.p95_latency, m.offload_rate,
                             m.reach_rate, m.mean_layers, m.mean_depth_fraction))
    report = SweepReport(tuple(rows), config.seed, config.config_hash(), len(tasks),
                         config.accuracy_target)
    log.info("sweep of %d cells over %d tasks took %.2f s wall clock (not a latency metric)",
             len(rows), len(tasks), time.perf_counter() - started)
    return (report, kept) if keep_outcomes else report


# --- objective -------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveResult:
    target: float
    passes: tuple[bool, ...]
    best_index: int | None

    @property
    def infeasible(self) -> bool:
        return self.best_index is None


def report_objective(report: SweepReport, target: float) -> ObjectiveResult:
    """Rows meeting the accuracy target, and the fastest of them (first row on ties)."""
    passes = tuple(r.accuracy >= target for r in report.rows)
    best = None
    for i, (r, ok) in enumerate(zip(report.rows, passes)):
        if ok and (best is None or r.mean_latency < report.rows[best].mean_latency):
            best = i
    return ObjectiveResult(target, passes, best)


# --- traces ----------------------------------------------------------------

def generate_traces(config: ExperimentConfig, path, n_tasks: int | None = None) -> int:
    """Run every tier on every task and write the full per-layer records.

    Tier ``j + 1`` sees the text pruned from tier ``j``'s full-depth importance,
    the same input a live run hands over. Returns the number of records.
    """
    if config.workload.source != "synthetic":
        raise ConfigError("traces are generated from a synthetic workload spec")
    n = config.workload.n_tasks if n_tasks is None else n_tasks
    tasks = make_tasks(n, config.seed, min_words=config.workload.min_words,
                       max_words=config.workload.max_words)
    backends = [make_backend(p, config.seed) for p in config.tiers]
    records = []
    for task in tasks:
        text = task.text
        for j, (profile, backend) in enumerate(zip(config.tiers, backends)):
            tokens = profile.tokenize(text)
            if isinstance(backend, SyntheticBackend):
                rec = backend.record(task.id, task.label, len(tokens))
            elif isinstance(backend, ToyBackend):
                rec = backend.record(tokens)
            else:  # pragma: no cover - make_backend only builds the two kinds here
                raise ConfigError(f"cannot generate traces from backend {profile.backend!r}")
            total = ImportanceVector(sum(rec.layer_importance[1:], rec.layer_importance[0].copy()))
            records.append(TraceRecord(task.id, profile.index, tokens.pieces, task.label,
                                       rec.layer_probs, total.values, rec.final_probs,
                                       rec.layer_importance, text))
            if j + 1 < len(config.tiers):
                target = config.tiers[j + 1].tokenize(text).segmentation
                text, _ = prune_for_handoff(total, tokens.segmentation, target,
                                            PruneParams(config.alphas[j]))
    header = {"seed": config.seed, "n_tasks": n, "n_tiers": len(config.tiers),
              "config_sha256": config.config_hash(), "config": config.to_dict()}
    write_traces(path, records, header)
    return len(records)


def replay_config(config: ExperimentConfig, trace_path) -> ExperimentConfig:
    wl = replace(config.workload, source="trace", trace_file=str(Path(trace_path).resolve()))
    return replace(config, workload=wl)


# --- calibration -----------------------------------------------------------

def calibrate(config: ExperimentConfig, n_tasks: int | None = None) -> dict[str, float]:
    """Fit one temperature per tier on a held-out synthetic validation set."""
    n = config.calibration_tasks if n_tasks is None else n_tasks
    tasks = make_tasks(n, config.seed, prefix="val", min_words=config.workload.min_words,
                       max_words=config.workload.max_words)
    out = {}
    for name, profile in zip(config.tier_names, config.tiers):
        if profile.backend == "trace":
            raise ConfigError("calibration needs a live backend, not trace replay")
        backend = make_backend(profile, config.seed)
        data = []
        for task in tasks:
            res = backend.infer(task.id, task.label, profile.tokenize(task.text), None)
            data.append((probs_to_logits(res.probs), task.label))
        out[name] = calibrate_temperature(data, config.calibration_grid).temperature
    return out


def fmt_table(report: SweepReport) -> str:
    """Human-readable grid table, one line per cell."""
    lines = [f"{'tau':>9} {'t':>5} {'latency':>10} {'compute':>10} {'transmit':>9} "
             f"{'accuracy':>9} {'depth':>6}"]
    for r in report.rows:
        lines.append(f"{r.tau:>9g} {r.threshold:>5g} {r.mean_latency:>10.2f} "
                     f"{r.mean_compute:>10.2f} {r.mean_transmission:>9.2f} {r.accuracy:>9.4f} "
                     f"{r.mean_depth_fraction:>6.3f}")
    if math.isfinite(report.accuracy_target or math.nan):
        obj = report_objective(report, report.accuracy_target)
        if obj.infeasible:
            lines.append(f"target accuracy {report.accuracy_target}: infeasible")
        else:
            b = report.rows[obj.best_index]
            lines.append(f"target accuracy {report.accuracy_target}: fastest passing cell "
                         f"tau={b.tau:g} t={b.threshold:g} ({b.mean_latency:.2f} ms)")
    return "\n".join(lines)
