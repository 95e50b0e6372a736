"""Query-selection algorithms: phased experimental design, greedy
remaining-uncertainty sampling, the baseline selectors and batching."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .core import (
    JITTER_SCALE,
    ArmSet,
    FisherMatrix,
    InputDomainError,
    LabeledDataset,
    Link,
    SingularMatrixError,
    TrueModel,
    jitter_for,
    link_derivative,
)
from .design import (
    Design,
    DesignProblem,
    alg2_objective,
    d_optimal_scores,
    round_design,
    rounding_threshold,
    solve_design,
)
from .estimator import ConfidenceSpec, MleConfig, gamma_d, mle_from_counts, width_factor

STRATEGIES = ("ours-greedy", "random", "uncertainty", "selective", "apo", "d-optimal")
DEFAULT_LABEL_CAP = 1_000_000
SEQUENTIAL_REFIT_LIMIT = 2000


# --------------------------------------------------------------------------
# oracles


class SimulationOracle:
    """Draws y ~ Bernoulli(psi(z^T theta*)) for every query."""

    mode = "simulate"

    def __init__(self, arms: ArmSet, model: TrueModel, seed=None):
        self.arms = arms
        self.model = model
        self.rng = np.random.default_rng(seed)
        self.p = model.probabilities(arms)
        self.calls = 0

    def query(self, indices) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        self.calls += idx.size
        return (self.rng.random(idx.size) < self.p[idx]).astype(np.int8)

    def query_counts(self, counts) -> np.ndarray:
        """Label-1 totals per arm for ``counts[i]`` independent pulls of arm i."""
        counts = np.asarray(counts, dtype=np.int64)
        self.calls += int(counts.sum())
        return self.rng.binomial(counts, self.p).astype(float)


class ReplayOracle:
    """Returns the fixed recorded label of each arm."""

    mode = "replay"

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int8)
        self.calls = 0

    def query(self, indices) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        self.calls += idx.size
        return self.labels[idx].copy()

    def query_counts(self, counts) -> np.ndarray:
        counts = np.asarray(counts, dtype=np.int64)
        self.calls += int(counts.sum())
        return (counts * self.labels).astype(float)


# --------------------------------------------------------------------------
# traces


@dataclass
class TraceRow:
    labels_spent: int
    active_set_size: int
    theta: np.ndarray
    round: int = 0
    eps: float = math.nan
    rho: float = math.nan
    n_round: int = 0
    wall_ms: float = 0.0


@dataclass
class RunTrace:
    rows: list[TraceRow] = field(default_factory=list)
    budget_exceeded: bool = False
    stopped: bool = False
    labels: int = 0
    pulls: Optional[np.ndarray] = None
    pulls_at_coverage: Optional[np.ndarray] = None
    warmup_labels: int = 0
    refit_labels: int = 0
    started: float = field(default_factory=time.perf_counter, repr=False)

    def append(self, **kw) -> None:
        kw.setdefault("wall_ms", 1e3 * (time.perf_counter() - self.started))
        self.rows.append(TraceRow(**kw))

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]


# --------------------------------------------------------------------------
# phased experimental design


@dataclass
class WarmupResult:
    theta: np.ndarray
    labels_used: int
    counts: np.ndarray
    design: Design


def warmup_size(n_arms: int, d: int, delta: float, omega: float, kappa0: float) -> int:
    gam = gamma_d(ConfidenceSpec(delta, n_arms, d))
    return math.ceil(3 * (1 + omega) / kappa0 * d * gam * math.log(2 * n_arms * (2 + n_arms) / delta))


def round_size(rho: float, ell: int, n_arms: int, d: int, delta: float, omega: float) -> int:
    n = math.ceil(3 * (1 + omega) * rho * math.log(2 * ell**2 * n_arms * (2 + n_arms) / delta))
    return max(n, rounding_threshold(d, omega))


def warmup(
    arms: ArmSet, delta: float, omega: float, kappa0: float, oracle,
    link: Link = Link.LOGISTIC, mle: MleConfig = MleConfig(),
) -> WarmupResult:
    """G-optimal sampling of N0 labels followed by an MLE fit."""
    if not (0 < kappa0 <= 0.25):
        raise InputDomainError("kappa0 must lie in (0, 0.25]")
    lam0, _ = solve_design(DesignProblem.g_optimal(arms, link=link))
    n0 = warmup_size(arms.n, arms.dim, delta, omega, kappa0)
    counts = round_design(lam0, n0, omega, arms)
    wins = oracle.query_counts(counts)
    fit = mle_from_counts(arms.features, counts.astype(float), wins, link, mle)
    return WarmupResult(fit.theta, n0, counts, lam0)


def run_exp_design(
    arms: ArmSet, delta: float, omega: float, oracle, kappa0: float,
    link: Link = Link.LOGISTIC, mle: MleConfig = MleConfig(),
    label_cap: int = DEFAULT_LABEL_CAP, reuse_q_labels: bool = False,
    design_tol: float = 1e-3,
) -> tuple[np.ndarray, RunTrace]:
    """Warm-up, then rounds of design / round / query / eliminate, then a
    non-adaptive refit on fresh labels for the accumulated pulls Q.

    Trace rows: one for the warm-up (round 0), one per elimination round,
    and a last one for the final refit.
    """
    n, d = arms.n, arms.dim
    trace = RunTrace()
    wu = warmup(arms, delta, omega, kappa0, oracle, link, mle)
    spent = wu.labels_used
    trace.warmup_labels = spent
    trace.append(labels_spent=spent, active_set_size=n, theta=wu.theta, round=0, n_round=spent)
    theta = wu.theta
    active = np.arange(n)
    q_counts = np.zeros(n, dtype=np.int64)
    q_wins = np.zeros(n)
    ell = 1
    while active.size >= 1:
        eps = 2.0 ** (-ell + 1)
        problem = alg2_objective(arms, active, theta, eps, delta, n, link)
        lam, report = solve_design(problem, tol=design_tol)
        n_ell = round_size(report.value, ell, n, d, delta, omega)
        if spent + n_ell > label_cap:
            trace.budget_exceeded = True
            break
        counts = round_design(lam, n_ell, omega, arms)
        wins = oracle.query_counts(counts)
        spent += n_ell
        q_counts += counts
        q_wins += wins
        theta = mle_from_counts(arms.features, counts.astype(float), wins, link, mle, theta0=theta).theta
        trace.append(
            labels_spent=spent, active_set_size=int(active.size), theta=theta,
            round=ell, eps=eps, rho=report.value, n_round=n_ell,
        )
        active = active[np.abs(arms.features[active] @ theta) <= eps]
        ell += 1

    if trace.budget_exceeded:
        trace.labels = spent
        trace.pulls = wu.counts + q_counts
        return theta, trace

    q_total = int(q_counts.sum())
    if reuse_q_labels:
        final_wins = q_wins
    else:
        final_wins = oracle.query_counts(q_counts)
        spent += q_total
        trace.refit_labels = q_total
    theta = mle_from_counts(arms.features, q_counts.astype(float), final_wins, link, mle, theta0=theta).theta
    trace.append(labels_spent=spent, active_set_size=0, theta=theta, round=ell, n_round=q_total)
    trace.labels = spent
    trace.pulls = wu.counts + q_counts * (1 if reuse_q_labels else 2)
    trace.stopped = True
    return theta, trace


# --------------------------------------------------------------------------
# selection rules


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str
    threshold: float = 0.1

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise InputDomainError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if not math.isfinite(self.threshold):
            raise InputDomainError("selective threshold must be finite")


def remaining_uncertainty(z, theta_hat, width):
    """min(-LCB, UCB), which equals width - |z^T theta|."""
    c = np.dot(z, theta_hat)
    return np.minimum(-(c - width), c + width)


def stopping_check(z, theta_hat, width) -> bool:
    return bool(width < abs(float(np.dot(z, theta_hat))))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties resolved towards lower index."""
    if k == 1:
        # argmax already returns the first maximizer
        return np.array([int(np.argmax(scores))])
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


class _Learner:
    """Sufficient statistics and the current fit for one sequential run."""

    def __init__(self, arms: ArmSet, delta: float, link: Link, mle: MleConfig):
        self.z = arms.features
        self.n, self.d = self.z.shape
        self.delta = delta
        self.link = Link(link)
        self.mle = mle
        self.pulls = np.zeros(self.n)
        self.wins = np.zeros(self.n)
        self.theta = np.zeros(self.d)
        self.refresh()

    def add(self, indices, labels) -> None:
        if np.ndim(indices) == 1 and len(indices) == 1:
            i = indices[0]
            self.pulls[i] += 1.0
            self.wins[i] += labels[0]
            return
        np.add.at(self.pulls, indices, 1.0)
        np.add.at(self.wins, indices, labels)

    def refit(self) -> None:
        if self.pulls.sum() > 0:
            self.theta = mle_from_counts(self.z, self.pulls, self.wins, self.link, self.mle, theta0=self.theta).theta
        self.refresh()

    def newton_step(self) -> None:
        """One warm Newton step; falls back to a full refit when the step
        does not shrink the gradient."""
        if self.link is not Link.LOGISTIC:
            self.refit()
            return
        theta = self.theta.copy()
        if _kernels.newton_step(self.z, self.pulls, self.wins, theta, self.mle.ridge):
            self.theta = theta
            self.refresh()
        else:
            self.refit()

    def refresh(self) -> None:
        self._fisher = None
        self.t_eff = max(1, int(np.count_nonzero(self.pulls)))
        if self.link is Link.LOGISTIC:
            self.margins = np.empty(self.n)
            inv_sq = np.empty(self.n)
            jitter = _kernels.refresh(self.z, self.pulls, self.theta, JITTER_SCALE, self.margins, inv_sq)
            if jitter < 0:
                raise SingularMatrixError("data Fisher matrix is not positive definite")
        else:
            self.margins = self.z @ self.theta
            inv_sq = self.fisher.inv_sq_norms(self.z)
        self.inv_norms = np.sqrt(inv_sq)
        self.widths = width_factor(self.delta, self.t_eff) * self.inv_norms

    @property
    def fisher(self) -> FisherMatrix:
        if self._fisher is None:
            mu_dot = link_derivative(self.link, self.z @ self.theta)
            raw = (self.z.T * (self.pulls * mu_dot)) @ self.z
            jitter = jitter_for(raw)
            raw.flat[:: self.d + 1] += jitter
            self._fisher = FisherMatrix(raw, jitter)
        return self._fisher

    @property
    def uncertainty(self) -> np.ndarray:
        return self.widths - np.abs(self.margins)

    def all_classified(self) -> bool:
        return bool(np.all(self.widths < np.abs(self.margins)))

    def unclassified(self) -> int:
        return int(np.count_nonzero(self.widths >= np.abs(self.margins)))

    def scores(self, kind: str) -> np.ndarray:
        if kind == "ours-greedy":
            return self.uncertainty
        if kind == "uncertainty":
            return -np.abs(self.margins)
        if kind == "apo":
            return self.inv_norms
        if kind == "d-optimal":
            mu_dot = link_derivative(self.link, self.margins)
            return d_optimal_scores(self.z, self.fisher, mu_dot)
        raise InputDomainError(f"{kind} has no score")


def _selective_pick(lcb: np.ndarray, threshold: float, rng) -> int:
    order = rng.permutation(lcb.size)
    hit = order[lcb[order] < threshold]
    if hit.size:
        return int(hit[0])
    return int(rng.integers(lcb.size))


def _select(learner: _Learner, strategy: SelectionStrategy, k: int, rng, fresh_only: bool = False) -> np.ndarray:
    """k arms to query next. With ``fresh_only`` only never-queried arms are
    eligible and the k picks are distinct (pool-based sampling)."""
    kind = strategy.kind
    if not fresh_only:
        if kind == "random":
            return rng.integers(learner.n, size=k)
        if kind == "selective":
            lcb = learner.margins - learner.widths
            return np.array([_selective_pick(lcb, strategy.threshold, rng) for _ in range(k)], dtype=np.int64)
        return top_k(learner.scores(kind), k)
    pool = np.flatnonzero(learner.pulls == 0)
    if pool.size < k:
        raise InputDomainError(f"only {pool.size} unqueried arms left, need {k}")
    if kind == "random":
        return rng.choice(pool, size=k, replace=False)
    if kind == "selective":
        lcb = (learner.margins - learner.widths)[pool]
        picks = []
        for _ in range(k):
            j = _selective_pick(lcb, strategy.threshold, rng)
            picks.append(pool[j])
            pool, lcb = np.delete(pool, j), np.delete(lcb, j)
        return np.array(picks, dtype=np.int64)
    return pool[top_k(learner.scores(kind)[pool], k)]


def _scores_from_dataset(strategy, arms, dataset, theta_hat, delta, link):
    learner = _Learner(arms, delta, link, MleConfig())
    if len(dataset):
        learner.pulls, learner.wins = dataset.counts()
    learner.theta = np.asarray(theta_hat, dtype=float)
    learner.refresh()
    return learner


def greedy_step(arms: ArmSet, dataset: LabeledDataset, theta_hat, delta: float, link: Link = Link.LOGISTIC) -> int:
    """Arm with the largest remaining uncertainty, using plug-in widths."""
    learner = _scores_from_dataset("ours-greedy", arms, dataset, theta_hat, delta, link)
    return int(np.argmax(learner.uncertainty))


def baseline_step(
    strategy, arms: ArmSet, dataset: LabeledDataset, theta_hat, delta: float, rng,
    link: Link = Link.LOGISTIC,
) -> int:
    if isinstance(strategy, str):
        strategy = SelectionStrategy(strategy)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    learner = _scores_from_dataset(strategy.kind, arms, dataset, theta_hat, delta, link)
    return int(_select(learner, strategy, 1, rng)[0])


# --------------------------------------------------------------------------
# sequential and batched runs


def _as_strategy(strategy) -> SelectionStrategy:
    return SelectionStrategy(strategy) if isinstance(strategy, str) else strategy


def _record(trace: RunTrace, learner: _Learner, spent: int) -> None:
    trace.append(labels_spent=spent, active_set_size=learner.unclassified(), theta=learner.theta.copy())


def run_sequential(
    strategy, arms: ArmSet, delta: float, budget: int, oracle, rng=None,
    stop_when_classified: bool = False, refit_every: int | None = None,
    link: Link = Link.LOGISTIC, mle: MleConfig = MleConfig(), refit_fraction: float = 0.0,
    fresh_only: bool = False,
) -> tuple[np.ndarray, RunTrace]:
    """One label per round.

    The MLE is refit to convergence once at least
    ``max(refit_every, refit_fraction * t)`` labels arrived since the last
    fit (``refit_every`` defaults to 1 up to a budget of 2000, else 50).
    Between refits the logistic estimate follows the data with one warm
    Newton step per label. Stopping is checked after every label, and a
    tentative stop is confirmed by a converged refit before it is accepted.
    """
    strategy = _as_strategy(strategy)
    if budget < 1:
        raise InputDomainError("budget must be at least 1")
    rng = np.random.default_rng(rng)
    if refit_every is None:
        refit_every = 1 if budget <= SEQUENTIAL_REFIT_LIMIT else 50
    learner = _Learner(arms, delta, link, mle)
    trace = RunTrace()
    spent = 0
    last_fit = 0
    for t in range(1, budget + 1):
        i = _select(learner, strategy, 1, rng, fresh_only)
        learner.add(i, oracle.query(i))
        spent += 1
        if trace.pulls_at_coverage is None and np.all(learner.pulls > 0):
            trace.pulls_at_coverage = learner.pulls.astype(np.int64)
        if t - last_fit < max(refit_every, refit_fraction * t) and t < budget:
            learner.newton_step()
            if not (stop_when_classified and learner.all_classified()):
                continue
        last_fit = t
        learner.refit()
        _record(trace, learner, spent)
        if stop_when_classified and learner.all_classified():
            trace.stopped = True
            break
    trace.labels = spent
    trace.pulls = learner.pulls.astype(np.int64)
    return learner.theta, trace


def run_greedy(
    arms: ArmSet, delta: float, budget: int, oracle, stop_when_classified: bool = False,
    refit_every: int | None = None, link: Link = Link.LOGISTIC, mle: MleConfig = MleConfig(),
    refit_fraction: float = 0.0,
) -> tuple[np.ndarray, RunTrace]:
    """Greedy remaining-uncertainty sampling; returns the MLE on all data."""
    return run_sequential(
        "ours-greedy", arms, delta, budget, oracle, None, stop_when_classified, refit_every, link, mle,
        refit_fraction,
    )


def run_batched(
    strategy, arms: ArmSet, delta: float, batch_size: int, budget: int, oracle, rng=None,
    stop_when_classified: bool = False, link: Link = Link.LOGISTIC, mle: MleConfig = MleConfig(),
    fresh_only: bool = False,
) -> tuple[np.ndarray, RunTrace]:
    """Select a whole batch from scores frozen at the batch start, query it,
    then refit once. The final batch is truncated to the remaining budget."""
    strategy = _as_strategy(strategy)
    if batch_size < 1 or budget < 1:
        raise InputDomainError("batch_size and budget must be positive")
    rng = np.random.default_rng(rng)
    learner = _Learner(arms, delta, link, mle)
    trace = RunTrace()
    spent = 0
    while spent < budget:
        k = min(batch_size, budget - spent)
        idx = _select(learner, strategy, k, rng, fresh_only)
        learner.add(idx, oracle.query(idx))
        spent += k
        if trace.pulls_at_coverage is None and np.all(learner.pulls > 0):
            trace.pulls_at_coverage = learner.pulls.astype(np.int64)
        learner.refit()
        _record(trace, learner, spent)
        if stop_when_classified and learner.all_classified():
            trace.stopped = True
            break
    trace.labels = spent
    trace.pulls = learner.pulls.astype(np.int64)
    return learner.theta, trace
