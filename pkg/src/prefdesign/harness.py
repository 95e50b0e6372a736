"""Experiment orchestration: instances, replay ingestion, seeded multi-strategy
runs, CSV output and the canonical separation study."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .algorithms import (
    STRATEGIES,
    SimulationOracle,
    ReplayOracle,
    SelectionStrategy,
    run_batched,
    run_sequential,
)
from .complexity import canonical_instance
from .core import ArmSet, InputDomainError, Link, PrefDesignError, TrueModel, normalize_armset
from .estimator import MleConfig

log = logging.getLogger(__name__)

TRACE_HEADER = ("seed", "strategy", "labels_spent", "test_accuracy", "active_set_size", "wall_ms")
SUMMARY_HEADER = ("strategy", "budget", "mean_accuracy", "stderr", "n_seeds")
MAX_SYNTHETIC_DRAWS = 100_000


class ConfigError(PrefDesignError, ValueError):
    pass


class DataFormatError(PrefDesignError, ValueError):
    pass


class InfeasibleMarginError(PrefDesignError, ValueError):
    pass


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SyntheticSource:
    d: int
    n: int
    margin: float
    seed: int = 0


@dataclass(frozen=True)
class ReplaySource:
    path: str
    split: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    strategies: tuple[str, ...] = ("ours-greedy", "random")
    delta: float = 0.1
    omega: float = 1.0
    batch_size: int = 50
    budget: int = 1500
    n_seeds: int = 50
    source: SyntheticSource | ReplaySource = SyntheticSource(5, 50, 0.2)
    ridge: float = 1e-5
    threshold: float = 0.1
    output: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(f"unknown strategies {unknown}; choose from {STRATEGIES}")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if self.batch_size < 1 or self.budget < self.batch_size:
            raise ConfigError("need budget >= batch_size >= 1")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be positive")
        if not (0 < self.delta <= math.exp(-1)):
            raise ConfigError("delta must lie in (0, 1/e]")
        if self.omega <= 0 or self.ridge < 0:
            raise ConfigError("omega must be positive and ridge nonnegative")
        if isinstance(self.source, ReplaySource) and not (0 < self.source.split < 1):
            raise ConfigError("split fraction must lie in (0, 1)")


# --------------------------------------------------------------------------
# instances


def _unit_ball(rng, k: int, d: int) -> np.ndarray:
    g = rng.standard_normal((k, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.random(k)[:, None] ** (1.0 / d)


def make_synthetic(d: int, n: int, margin: float, seed=None) -> tuple[ArmSet, TrueModel]:
    """Rejection-sample n arms from the unit ball with |z^T theta*| >= margin."""
    if not (0 < margin < 1):
        raise InputDomainError("margin must lie in (0, 1)")
    if d < 1 or n < d:
        raise InputDomainError("need n >= d >= 1")
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(d)
    theta /= np.linalg.norm(theta)
    kept: list[np.ndarray] = []
    drawn = 0
    chunk = 1024
    while len(kept) < n:
        if drawn >= MAX_SYNTHETIC_DRAWS:
            raise InfeasibleMarginError(
                f"only {len(kept)} of {n} arms cleared margin {margin} after {drawn} draws"
            )
        k = min(chunk, MAX_SYNTHETIC_DRAWS - drawn)
        z = _unit_ball(rng, k, d)
        drawn += k
        kept.extend(z[np.abs(z @ theta) >= margin])
    return ArmSet(np.array(kept[:n])), TrueModel(theta, Link.LOGISTIC)


def make_replay_style(d: int, n: int, seed=None, scale: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian feature differences with one fixed logistic label per pair.

    ``scale`` is the norm of theta* relative to the typical feature norm;
    returns raw (unnormalized) features and labels.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, d)) / math.sqrt(d)
    theta = rng.standard_normal(d)
    theta *= scale / np.linalg.norm(theta)
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-(z @ theta)))).astype(np.int8)
    return z, labels


def write_replay_csv(path, features, labels) -> None:
    features = np.atleast_2d(features)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "label"] + [f"f_{k}" for k in range(features.shape[1])])
        for i, (row, y) in enumerate(zip(features, labels)):
            w.writerow([i, int(y)] + [repr(float(v)) for v in row])


@dataclass(frozen=True, eq=False)
class ReplaySplit:
    train: ArmSet
    train_labels: np.ndarray
    test: ArmSet
    test_labels: np.ndarray
    pair_ids: tuple[list[str], list[str]] = field(default=([], []), repr=False)


def read_replay_csv(path) -> tuple[list[str], np.ndarray]:
    """Parse and orient a replay file; returns (pair ids, oriented features)."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["pair_id", "label"] or len(header) < 3:
            raise DataFormatError(f"{path}:1: header must start with pair_id,label,f_0")
        d = len(header) - 2
        if header[2:] != [f"f_{k}" for k in range(d)]:
            raise DataFormatError(f"{path}:1: feature columns must be f_0..f_{d - 1}")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 2:
                raise DataFormatError(f"{path}:{lineno}: expected {d + 2} fields, found {len(rec)}")
            if rec[1].strip() not in ("0", "1"):
                raise DataFormatError(f"{path}:{lineno}: label must be 0 or 1, found {rec[1]!r}")
            try:
                z = np.array([float(v) for v in rec[2:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(z)):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature value")
            # a 0 label means the second response won: flip to chosen-minus-rejected
            rows.append(z if rec[1].strip() == "1" else -z)
            ids.append(rec[0])
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return ids, np.array(rows)


def load_replay(path, split: float = 0.5, seed=None) -> ReplaySplit:
    """Load, orient, normalize and split a replay file by a seeded shuffle.

    After orientation every stored label is 1.
    """
    if not (0 < split < 1):
        raise InputDomainError("split must lie in (0, 1)")
    ids, z = read_replay_csv(path)
    n = z.shape[0]
    if n < 2:
        raise DataFormatError(f"{path}: need at least two rows to split")
    arms = normalize_armset(z)
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(n - 1, max(1, int(round(split * n))))
    tr, te = np.sort(order[:n_train]), np.sort(order[n_train:])
    ones = np.ones(n, dtype=np.int8)
    return ReplaySplit(
        arms.subset(tr), ones[tr], arms.subset(te), ones[te],
        ([ids[i] for i in tr], [ids[i] for i in te]),
    )


def evaluate_accuracy(theta_hat, test: ArmSet, labels) -> float:
    """Fraction of test arms whose predicted sign matches the label; ties lose."""
    labels = np.asarray(labels)
    if test.n == 0:
        raise InputDomainError("empty test set")
    u = test.features @ np.asarray(theta_hat, dtype=float)
    correct = np.where(labels == 1, u > 0, u < 0)
    return float(np.mean(correct))


# --------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class TraceRecord:
    seed: int
    strategy: str
    labels_spent: int
    test_accuracy: float
    active_set_size: int
    wall_ms: float

    def as_row(self) -> list[str]:
        return [_fmt(getattr(self, k)) for k in TRACE_HEADER]


@dataclass(frozen=True)
class SummaryRecord:
    strategy: str
    budget: int
    mean_accuracy: float
    stderr: float
    n_seeds: int

    def as_row(self) -> list[str]:
        return [_fmt(getattr(self, k)) for k in SUMMARY_HEADER]


def _cell_seed(seed: int, strategy: str, stream: int) -> np.random.SeedSequence:
    # keyed by strategy identity, not by its position in the config
    return np.random.SeedSequence([seed, STRATEGIES.index(strategy), stream])


def _instance(cfg: ExperimentConfig, seed: int):
    """(train arms, oracle, test arms, test labels) for one seed."""
    src = cfg.source
    if isinstance(src, SyntheticSource):
        arms, model = make_synthetic(src.d, src.n, src.margin, src.seed)
        return arms, model, arms, (model.margins(arms) > 0).astype(np.int8)
    split = load_replay(src.path, src.split, seed)
    return split.train, split.train_labels, split.test, split.test_labels


def run_cell(cfg: ExperimentConfig, seed: int, strategy: str, batch_size: int | None = None) -> list[TraceRecord]:
    """One (seed, strategy) cell: a batched run scored at every batch boundary."""
    train, truth, test, test_labels = _instance(cfg, seed)
    if isinstance(truth, TrueModel):
        oracle = SimulationOracle(train, truth, _cell_seed(seed, strategy, 0))
    else:
        oracle = ReplayOracle(truth)
    rng = np.random.default_rng(_cell_seed(seed, strategy, 1))
    _, trace = run_batched(
        SelectionStrategy(strategy, cfg.threshold), train, cfg.delta,
        batch_size or cfg.batch_size, cfg.budget, oracle, rng, mle=MleConfig(ridge=cfg.ridge),
        fresh_only=isinstance(oracle, ReplayOracle),
    )
    return [
        TraceRecord(
            seed, strategy, row.labels_spent, evaluate_accuracy(row.theta, test, test_labels),
            row.active_set_size, row.wall_ms,
        )
        for row in trace.rows
    ]


def _safe_cell(args):
    cfg, seed, strategy = args
    try:
        return run_cell(cfg, seed, strategy), None
    except PrefDesignError as exc:
        return [], f"seed={seed} strategy={strategy}: {type(exc).__name__}: {exc}"
    except np.linalg.LinAlgError as exc:
        return [], f"seed={seed} strategy={strategy}: numerical failure: {exc}"


def worker_count() -> int:
    env = os.environ.get("PREFDESIGN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"PREFDESIGN_THREADS must be an integer, got {env!r}") from None
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def summarize(records: Sequence[TraceRecord]) -> list[SummaryRecord]:
    groups: dict[tuple[str, int], list[float]] = {}
    for r in records:
        groups.setdefault((r.strategy, r.labels_spent), []).append(r.test_accuracy)
    out = []
    for (strategy, budget), acc in sorted(groups.items()):
        a = np.array(acc)
        se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
        out.append(SummaryRecord(strategy, budget, float(a.mean()), se, a.size))
    return out


@dataclass
class ExperimentResult:
    records: list[TraceRecord]
    summary: list[SummaryRecord]
    failures: list[str]


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """Run every (seed, strategy) cell; failed cells are logged and skipped.

    When ``cfg.output`` is set, writes ``<output>.trace.csv`` and
    ``<output>.summary.csv``.
    """
    cells = [(cfg, seed, s) for seed in range(cfg.n_seeds) for s in cfg.strategies]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            results = list(pool.map(_safe_cell, cells))
    else:
        results = [_safe_cell(c) for c in cells]
    records, failures = [], []
    for rows, err in results:
        records.extend(rows)
        if err:
            log.error("cell failed: %s", err)
            failures.append(err)
    records.sort(key=lambda r: (r.strategy, r.seed, r.labels_spent))
    summary = summarize(records)
    if cfg.output:
        write_trace_csv(f"{cfg.output}.trace.csv", records)
        write_summary_csv(f"{cfg.output}.summary.csv", summary)
    return ExperimentResult(records, summary, failures)


def write_trace_csv(path, records: Sequence[TraceRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        w.writerows(r.as_row() for r in records)


def read_trace_csv(path) -> list[TraceRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_HEADER:
            raise DataFormatError(f"{path}: unexpected trace header {reader.fieldnames}")
        return [
            TraceRecord(
                int(r["seed"]), r["strategy"], int(r["labels_spent"]), float(r["test_accuracy"]),
                int(r["active_set_size"]), float(r["wall_ms"]),
            )
            for r in reader
        ]


def write_summary_csv(path, summary: Sequence[SummaryRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        w.writerows(r.as_row() for r in summary)


# --------------------------------------------------------------------------
# canonical separation


@dataclass
class SeparationSummary:
    d: int
    eps: float
    labels: dict[str, list[int]]
    stopped: dict[str, list[bool]]
    margin_share: list[float]
    pulls: dict[str, list[np.ndarray]]

    def median(self, method: str) -> float:
        return float(np.median(self.labels[method]))

    def mean(self, method: str) -> float:
        return float(np.mean(self.labels[method]))

    @property
    def ratio(self) -> float:
        """Median labels-to-stop of the max-width selector over ours."""
        return self.median("apo") / self.median("ours-greedy")

    @property
    def budget_capped(self) -> bool:
        return not all(all(v) for v in self.stopped.values())

    def table(self) -> list[tuple[str, float, float, int]]:
        return [(m, self.median(m), self.mean(m), sum(self.stopped[m])) for m in self.labels]


def run_canonical_separation(
    d: int, eps: float, seeds, delta: float = 0.1, budget_cap: int = 2_000_000,
    refit_every: int | None = None,
) -> SeparationSummary:
    """Both selectors run to the same stopping rule on the canonical instance.

    ``margin_share`` is the fraction of ours' pulls made after every arm
    was first covered that went to the small-margin arm.
    """
    arms, model = canonical_instance(d, eps)
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    methods = ("ours-greedy", "apo")
    out = SeparationSummary(d, eps, {m: [] for m in methods}, {m: [] for m in methods}, [], {m: [] for m in methods})
    for seed in seeds:
        for m in methods:
            oracle = SimulationOracle(arms, model, _cell_seed(seed, m, 0))
            _, trace = run_sequential(
                m, arms, delta, budget_cap, oracle, np.random.default_rng(_cell_seed(seed, m, 1)),
                stop_when_classified=True, refit_every=refit_every,
            )
            out.labels[m].append(trace.labels)
            out.stopped[m].append(trace.stopped)
            out.pulls[m].append(trace.pulls)
            if m == "ours-greedy":
                base = trace.pulls_at_coverage if trace.pulls_at_coverage is not None else 0
                post = trace.pulls - base
                out.margin_share.append(float(post[-1] / post.sum()) if post.sum() else math.nan)
    if out.budget_capped:
        log.warning("some canonical runs hit the budget cap of %d labels", budget_cap)
    return out
