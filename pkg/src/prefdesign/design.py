"""Optimal designs over the probability simplex and the ROUND procedure.

All objectives handled here have the weighted min-max form

    g(lam) = max_{z in target} w_z * z^T H(lam, theta)^{-1} z,

which covers G-optimal design (unit weights, all arms as targets), the
margin-weighted objective and the two-part objective used by the phased
elimination algorithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import linprog, minimize, minimize_scalar

from .core import (
    ArmSet,
    FisherMatrix,
    InputDomainError,
    LabeledDataset,
    Link,
    PrefDesignError,
    check_simplex,
    fisher_counts,
    jitter_for,
    link_derivative,
)
from .estimator import CONF_SCALE, ConfidenceSpec, gamma_d


class InfeasibleDesignError(PrefDesignError, ValueError):
    pass


class RoundingError(PrefDesignError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Design:
    weights: np.ndarray

    def __post_init__(self):
        lam = check_simplex(self.weights)
        lam = lam / lam.sum()
        lam.setflags(write=False)
        object.__setattr__(self, "weights", lam)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    @classmethod
    def uniform(cls, n: int, over=None) -> "Design":
        lam = np.zeros(n)
        idx = np.arange(n) if over is None else np.asarray(over, dtype=int)
        lam[idx] = 1.0 / idx.size
        return cls(lam)


@dataclass(frozen=True, eq=False)
class DesignProblem:
    arms: ArmSet
    theta: np.ndarray
    targets: np.ndarray
    target_weights: np.ndarray
    link: Link = Link.LOGISTIC

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        targets = np.asarray(self.targets, dtype=int).ravel()
        w = np.broadcast_to(np.asarray(self.target_weights, dtype=float), targets.shape).copy()
        if targets.size == 0:
            raise InputDomainError("design problem needs a nonempty target set")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InputDomainError("target weights must be finite and nonnegative")
        if theta.size != self.arms.dim:
            raise InputDomainError("theta dimension does not match the arms")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "target_weights", w)
        object.__setattr__(self, "link", Link(self.link))

    @classmethod
    def g_optimal(cls, arms: ArmSet, theta=None, link: Link = Link.LOGISTIC) -> "DesignProblem":
        theta = np.zeros(arms.dim) if theta is None else theta
        return cls(arms, theta, np.arange(arms.n), np.ones(arms.n), link)

    @property
    def curvature(self) -> np.ndarray:
        return link_derivative(self.link, self.arms.features @ self.theta)

    @property
    def target_features(self) -> np.ndarray:
        return self.arms.features[self.targets]


@dataclass
class SolverReport:
    value: float
    duality_gap: float
    iterations: int
    lower_bound: float = 0.0
    history: list[float] = field(default_factory=list)
    singular: bool = False


class _Evaluator:
    """Caches the per-problem arrays used by every objective evaluation."""

    def __init__(self, problem: DesignProblem):
        self.z = problem.arms.features
        self.a = self.z * np.sqrt(problem.curvature)[:, None]
        self.targets = problem.target_features
        self.w = problem.target_weights
        self.n, self.d = self.z.shape

    def factor(self, lam):
        h = (self.a.T * lam) @ self.a
        h[np.diag_indices(self.d)] += jitter_for(h)
        return linalg.cho_factor(h, lower=True, check_finite=False)

    def values(self, lam, want_grad=False):
        try:
            c = self.factor(lam)
        except linalg.LinAlgError:
            return None
        hz = linalg.cho_solve(c, self.targets.T, check_finite=False)
        v = self.w * np.einsum("md,dm->m", self.targets, hz)
        if not want_grad:
            return v
        # dv_z / dlam_i = -w_z (a_i^T H^{-1} z)^2, shape (n, m)
        grad = -self.w * (self.a @ hz) ** 2
        return v, grad

    def objective(self, lam) -> float:
        v = self.values(lam)
        return math.inf if v is None else float(v.max())


def _linearized_lmo(lam, v, grad):
    """Minimize the max of the first-order models of every target piece.

    The optimal LP value is a valid lower bound on the global optimum and its
    minimizer is the Frank-Wolfe vertex for the max-type objective.
    """
    n, m = grad.shape
    base = v - grad.T @ lam
    c = np.zeros(n + 1)
    c[-1] = 1.0
    a_ub = np.hstack([grad.T, -np.ones((m, 1))])
    a_eq = np.ones((1, n + 1))
    a_eq[0, -1] = 0.0
    res = linprog(
        c, A_ub=a_ub, b_ub=-base, A_eq=a_eq, b_eq=[1.0],
        bounds=[(0, None)] * n + [(None, None)], method="highs",
    )
    if res.status != 0:
        return None, -math.inf
    return np.clip(res.x[:n], 0.0, None), float(res.fun)


def _spanning_start(ev: _Evaluator) -> np.ndarray:
    """Greedy volume maximization: pick up to d arms with largest residual."""
    resid = ev.a.copy()
    chosen = []
    for _ in range(ev.d):
        norms = np.einsum("ij,ij->i", resid, resid)
        i = int(np.argmax(norms))
        if norms[i] <= 1e-20:
            break
        chosen.append(i)
        u = resid[i] / math.sqrt(norms[i])
        resid -= np.outer(resid @ u, u)
    lam = np.zeros(ev.n)
    lam[chosen] = 1.0 / len(chosen)
    return lam


def _check_feasible(ev: _Evaluator) -> None:
    active = ev.a[np.linalg.norm(ev.a, axis=1) > 0]
    if active.shape[0] == 0:
        raise InfeasibleDesignError("no arm carries information")
    u, sv, _ = np.linalg.svd(active.T, full_matrices=False)
    basis = u[:, sv > 1e-10 * sv[0]]
    needed = ev.targets[ev.w > 0]
    resid = needed - (needed @ basis) @ basis.T
    if np.max(np.linalg.norm(resid, axis=1), initial=0.0) > 1e-8:
        raise InfeasibleDesignError("target arms are not spanned by the arm set")


def _line_search(ev: _Evaluator, lam, direction, current: float):
    res = minimize_scalar(
        lambda s: ev.objective(lam + s * direction),
        bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-9},
    )
    if res.fun < current:
        return float(res.x), float(res.fun)
    return 0.0, current


def _polish(ev: _Evaluator, lam, scale: float):
    """SLSQP on the epigraph form min t s.t. v_z(lam) <= t."""
    n = ev.n

    def cons(x):
        v = ev.values(np.clip(x[:n], 0.0, None))
        return x[n] - (np.full(ev.w.size, 1e30) if v is None else v / scale)

    def cons_jac(x):
        out = ev.values(np.clip(x[:n], 0.0, None), want_grad=True)
        if out is None:
            return np.zeros((ev.w.size, n + 1))
        _, grad = out
        return np.hstack([-grad.T / scale, np.ones((ev.w.size, 1))])

    x0 = np.r_[lam, ev.objective(lam) / scale]
    obj_grad = np.r_[np.zeros(n), 1.0]
    res = minimize(
        lambda x: x[n], x0, jac=lambda x: obj_grad, method="SLSQP",
        constraints=[
            {"type": "ineq", "fun": cons, "jac": cons_jac},
            {"type": "eq", "fun": lambda x: x[:n].sum() - 1.0, "jac": lambda x: np.r_[np.ones(n), 0.0]},
        ],
        bounds=[(0.0, 1.0)] * n + [(0.0, None)],
        options={"maxiter": 300, "ftol": 1e-12},
    )
    out = np.clip(res.x[:n], 0.0, None)
    return out / out.sum()


def solve_design(problem: DesignProblem, tol: float = 1e-3, max_iter: int = 10_000) -> tuple[Design, SolverReport]:
    """Minimize the weighted min-max objective over the simplex.

    Frank-Wolfe iterations use the linearized max as their oracle and an exact
    line search, so accepted iterates never increase the objective. When
    the certified relative gap stalls, an SLSQP polish on the epigraph form
    is tried and kept only if it improves the objective.
    """
    ev = _Evaluator(problem)
    _check_feasible(ev)
    lam = _spanning_start(ev)
    uniform = np.full(ev.n, 1.0 / ev.n)
    g = ev.objective(lam)
    if ev.objective(uniform) < g or not math.isfinite(g):
        lam, g = uniform, ev.objective(uniform)
    history = [g]
    lower = -math.inf
    polished = False
    it = 0
    for it in range(1, max_iter + 1):
        v, grad = ev.values(lam, want_grad=True)
        vertex, lb = _linearized_lmo(lam, v, grad)
        lower = max(lower, lb)
        if lower > 0 and (g - lower) / g <= tol:
            break
        step, g_new = (0.0, g) if vertex is None else _line_search(ev, lam, vertex - lam, g)
        if not polished and (step == 0.0 or it >= 5):
            polished = True
            cand = _polish(ev, lam, g)
            g_cand = ev.objective(cand)
            if g_cand < g:
                lam, g = cand, g_cand
                history.append(g)
                continue
        if step == 0.0:
            if polished:
                break
            continue
        lam = np.clip(lam + step * (vertex - lam), 0.0, None)
        lam /= lam.sum()
        g = g_new
        history.append(g)
    lam[lam < 1e-12 * lam.max()] = 0.0
    lam /= lam.sum()
    g_final = ev.objective(lam)
    if g_final <= g * (1 + 1e-12):
        g = g_final
    gap = max(0.0, (g - lower) / g) if lower > 0 else math.inf
    report = SolverReport(
        value=g, duality_gap=gap, iterations=it, lower_bound=max(lower, 0.0),
        history=history, singular=not math.isfinite(g),
    )
    return Design(lam), report


def objective_value(design, problem: DesignProblem) -> float:
    """Exact max over targets of w_z ||z||^2_{H(lam,theta)^{-1}}."""
    lam = check_simplex(getattr(design, "weights", design), problem.arms.n)
    ev = _Evaluator(problem)
    v = ev.values(lam)
    if v is None:
        return math.inf
    return float(v.max())


def alg2_objective(
    arms: ArmSet, active, theta_hat, eps: float, delta: float, t_eff: int | None = None,
    link: Link = Link.LOGISTIC,
) -> DesignProblem:
    """Encode max(f1, f2) as one weighted min-max problem over all arms.

    Every arm carries gamma(d); arms still active carry
    max(gamma(d), 2.4^2 / eps^2).
    """
    active = np.asarray(active, dtype=int)
    if active.size == 0:
        raise InputDomainError("active set must be nonempty")
    t_eff = arms.n if t_eff is None else t_eff
    gam = gamma_d(ConfidenceSpec(delta, t_eff, arms.dim))
    w = np.full(arms.n, gam)
    w[active] = max(gam, CONF_SCALE**2 / eps**2)
    return DesignProblem(arms, theta_hat, np.arange(arms.n), w, link)


def d_optimal_scores(z: np.ndarray, fisher: FisherMatrix, mu_dot: np.ndarray) -> np.ndarray:
    """log of the determinant gain factor 1 + mu' z^T M^{-1} z, per arm."""
    return np.log1p(mu_dot * fisher.inv_sq_norms(z))


def d_optimal_pick(history: LabeledDataset, arms: ArmSet, theta_hat, link: Link = Link.LOGISTIC) -> int:
    """argmax_z det(H'(history) + mu'(z^T theta) z z^T); lowest index on ties."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    pulls = history.counts()[0] if len(history) else np.zeros(arms.n)
    fisher = fisher_counts(arms.features, pulls, theta_hat, link)
    mu_dot = link_derivative(link, arms.features @ theta_hat)
    return int(np.argmax(d_optimal_scores(arms.features, fisher, mu_dot)))


def rounding_threshold(d: int, omega: float) -> int:
    return math.ceil((d * (d + 1) + 2) / omega)


def largest_remainder(weights, n_pulls: int) -> np.ndarray:
    """Apportion ``n_pulls`` integers proportional to ``weights``.

    Remainders are ranked in decreasing order; ties go to the lower index.
    """
    quota = np.asarray(weights, dtype=float) * n_pulls
    counts = np.floor(quota + 1e-12).astype(np.int64)
    left = n_pulls - int(counts.sum())
    if left > 0:
        rem = quota - counts
        order = np.lexsort((np.arange(rem.size), -rem))
        counts[order[:left]] += 1
    elif left < 0:
        order = np.lexsort((np.arange(quota.size), quota - counts))
        for i in order:
            if left == 0:
                break
            if counts[i] > 0:
                counts[i] -= 1
                left += 1
    return counts


def rounding_ratio(counts, design: Design, arms: ArmSet, theta, link: Link = Link.LOGISTIC) -> float:
    """Smallest generalized eigenvalue of (sum_s mu' z_s z_s^T, N H(lam, theta))."""
    counts = np.asarray(counts, dtype=float)
    n_pulls = counts.sum()
    mu_dot = link_derivative(link, arms.features @ np.asarray(theta, dtype=float))
    lhs = (arms.features.T * (counts * mu_dot)) @ arms.features
    rhs = n_pulls * (arms.features.T * (design.weights * mu_dot)) @ arms.features
    return _min_generalized_eig(lhs, rhs)


def _min_generalized_eig(lhs, rhs) -> float:
    # restrict to range(rhs): the guarantee is vacuous on its null space
    evals, evecs = np.linalg.eigh(0.5 * (rhs + rhs.T))
    keep = evals > 1e-12 * max(evals.max(), 1e-300)
    if not np.any(keep):
        return math.inf
    basis = evecs[:, keep] / np.sqrt(evals[keep])
    reduced = basis.T @ lhs @ basis
    return float(np.linalg.eigvalsh(0.5 * (reduced + reduced.T)).min())


def round_design(
    design: Design, n_pulls: int, omega: float, arms: ArmSet | None = None,
    theta=None, link: Link = Link.LOGISTIC,
) -> np.ndarray:
    """Turn a design into exactly ``n_pulls`` pulls, returned as per-arm counts.

    The Loewner guarantee sum mu' z z^T >= N/(1+omega) H(lam, theta) is
    verified at ``theta`` (default zero) when ``arms`` is given, and pulls are
    greedily reassigned until it holds.
    """
    if not (0 < omega <= 1):
        raise InputDomainError("omega must lie in (0, 1]")
    if not isinstance(design, Design):
        design = Design(design)
    d = arms.dim if arms is not None else None
    if d is not None and n_pulls < rounding_threshold(d, omega):
        raise RoundingError(f"N={n_pulls} is below r(omega)={rounding_threshold(d, omega)}")
    counts = largest_remainder(design.weights, n_pulls)
    if arms is None:
        return counts
    theta = np.zeros(arms.dim) if theta is None else np.asarray(theta, dtype=float)
    target = 1.0 / (1.0 + omega) - 1e-12
    mu_dot = link_derivative(link, arms.features @ theta)
    a = arms.features * np.sqrt(mu_dot)[:, None]
    rhs = n_pulls * (a.T * design.weights) @ a
    outer = [np.outer(row, row) for row in a]

    def value(c):
        return _min_generalized_eig((a.T * c) @ a, rhs)

    current = value(counts)
    for _ in range(n_pulls + 1):
        if current >= target:
            return counts
        # move one pull toward the arm that best covers the deficit direction
        # (the generalized eigenvector of the smallest eigenvalue), taking it
        # from whichever arm loses least; fall back to all pairs if that stalls
        lhs = (a.T * counts) @ a
        _, evecs = linalg.eigh(lhs + 1e-300 * np.eye(arms.dim), rhs + jitter_for(rhs) * np.eye(arms.dim))
        receivers = [int(np.argmax((a @ evecs[:, 0]) ** 2))]
        best = (current, None)
        for pass_receivers in (receivers, range(arms.n)):
            for r in pass_receivers:
                for donor in np.flatnonzero(counts):
                    if donor == r:
                        continue
                    v = _min_generalized_eig(lhs + outer[r] - outer[donor], rhs)
                    if v > best[0]:
                        best = (v, (int(donor), r))
            if best[1] is not None:
                break
        if best[1] is None:
            break
        current, (donor, r) = best
        counts[donor] -= 1
        counts[r] += 1
    raise RoundingError("could not satisfy the rounding guarantee")


def counts_to_pulls(counts) -> np.ndarray:
    """Expand per-arm counts to an index multiset in increasing arm order."""
    counts = np.asarray(counts, dtype=np.int64)
    return np.repeat(np.arange(counts.size), counts)
