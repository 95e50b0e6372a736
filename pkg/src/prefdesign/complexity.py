"""Instance complexity, the upper and lower label-complexity bounds, and the
canonical separation instance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.optimize import linprog
from scipy.special import expit, xlogy

from .core import (
    ArmSet,
    DegenerateInstanceError,
    InputDomainError,
    Link,
    PrefDesignError,
    TrueModel,
    fisher_design,
)
from .design import Design, DesignProblem, rounding_threshold, solve_design
from .estimator import CONF_SCALE, ConfidenceSpec, MleConfig, gamma_d, mle_from_counts


class InfiniteDivergenceError(PrefDesignError, ArithmeticError):
    pass


@dataclass(frozen=True)
class InstanceComplexity:
    rho_star: float
    rho_zero: float
    ell_star: int
    margin: float
    log_bar: float
    n_arms: int

    def __post_init__(self):
        vals = (self.rho_star, self.rho_zero, self.ell_star, self.margin, self.log_bar)
        if not all(v > 0 for v in vals):
            raise InputDomainError("instance complexity quantities must be positive")


@dataclass(frozen=True, eq=False)
class LowerBoundEstimate:
    """Lower bound on the expected number of labels of a delta-correct rule.

    ``value`` divides the log term by a certified upper bound on the game
    value, so it never overstates the bound; ``gap`` is the relative width
    of the bracket on the game value.
    """

    value: float
    design: Design
    worst_thetas: np.ndarray
    gap: float
    game_value: float = math.nan
    converged: bool = True


def margin_and_ellstar(arms: ArmSet, theta_star) -> tuple[float, int]:
    margin = float(np.min(np.abs(arms.features @ np.asarray(theta_star, dtype=float))))
    if margin <= 0:
        raise DegenerateInstanceError("zero margin: an arm lies on the decision boundary")
    return margin, max(0, math.ceil(math.log2(4.0 / margin)))


def _require_logistic(link):
    if Link(link) is not Link.LOGISTIC:
        raise InputDomainError("only the logistic link is supported here")


def rho_star(arms: ArmSet, theta_star, link: Link = Link.LOGISTIC, tol: float = 1e-4) -> float:
    """min over designs of max_z ||z||^2_{H^-1} / (z^T theta*)^2 at theta*."""
    theta_star = np.asarray(theta_star, dtype=float)
    margin_and_ellstar(arms, theta_star)
    m = arms.features @ theta_star
    problem = DesignProblem(arms, theta_star, np.arange(arms.n), 1.0 / m**2, link)
    _, report = solve_design(problem, tol=tol)
    return report.value


def rho_zero(
    arms: ArmSet, theta_star, d: int, delta: float, t_eff: int | None = None,
    link: Link = Link.LOGISTIC, tol: float = 1e-4,
) -> float:
    """3 gamma(d) times the G-type design value at theta*."""
    t_eff = arms.n if t_eff is None else t_eff
    problem = DesignProblem.g_optimal(arms, np.asarray(theta_star, dtype=float), link)
    _, report = solve_design(problem, tol=tol)
    return 3.0 * gamma_d(ConfidenceSpec(delta, t_eff, d)) * report.value


def log_bar(ell_star: int, n_arms: int, delta: float) -> float:
    return math.log(2.0 * ell_star**2 * n_arms * (2 + n_arms) / delta)


def instance_complexity(arms: ArmSet, model: TrueModel, delta: float) -> InstanceComplexity:
    margin, ell = margin_and_ellstar(arms, model.theta_star)
    return InstanceComplexity(
        rho_star=rho_star(arms, model.theta_star, model.link),
        rho_zero=rho_zero(arms, model.theta_star, arms.dim, delta, link=model.link),
        ell_star=ell,
        margin=margin,
        log_bar=log_bar(ell, arms.n, delta),
        n_arms=arms.n,
    )


def complexity_bound(instcx: InstanceComplexity, omega: float, kappa0: float, d: int, delta: float) -> float:
    """Four-term upper bound on the labels used, with the absolute constant set to 1.

    gamma(d) is evaluated with t_eff = |Z|, as in the elimination algorithm.
    """
    if omega <= 0 or not (0 < kappa0 <= 0.25):
        raise InputDomainError("need omega > 0 and kappa0 in (0, 0.25]")
    gam = gamma_d(ConfidenceSpec(delta, instcx.n_arms, d))
    scale = (1 + omega) * instcx.log_bar
    return (
        scale * instcx.ell_star * instcx.rho_star
        + scale * instcx.ell_star * instcx.rho_zero
        + scale * d * gam / kappa0
        + instcx.ell_star * rounding_threshold(d, omega)
    )


def bernoulli_kl(p, q):
    """KL(Bern(p) || Bern(q)), with 0 log 0 = 0. Vectorized."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any((p < 0) | (p > 1)) or np.any((q < 0) | (q > 1)):
        raise InputDomainError("probabilities must lie in [0, 1]")
    edge = ((q == 0) | (q == 1)) & (p != q)
    if np.any(edge):
        raise InfiniteDivergenceError("KL is infinite when q is 0 or 1 and p differs")
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = xlogy(p, p) - xlogy(p, q) + xlogy(1 - p, 1 - p) - xlogy(1 - p, 1 - q)
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


# --------------------------------------------------------------------------
# lower bound game


@dataclass(frozen=True)
class LowerBoundConfig:
    mw_iterations: int = 200
    cut_iterations: int = 200
    rel_gap: float = 1e-4
    max_dim: int = 10


class _FlipOracle:
    """For each arm j, the alternative closest in weighted KL that puts
    arm j on the decision boundary."""

    _MLE = MleConfig(ridge=0.0, grad_tol=1e-11, max_iter=200)

    def __init__(self, arms: ArmSet, theta_star: np.ndarray):
        self.z = arms.features
        self.n, self.d = self.z.shape
        self.p = expit(self.z @ theta_star)
        self.bases = [linalg.null_space(self.z[j][None, :]) for j in range(self.n)]
        self.starts = [b.T @ theta_star for b in self.bases]

    def flip(self, j: int, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Worst alternative for arm j and its per-arm KL vector."""
        basis = self.bases[j]
        if basis.shape[1] == 0:
            theta = np.zeros(self.d)
        else:
            # weighted KL to theta* equals a logistic loss with soft labels p
            zb = self.z @ basis
            fit = mle_from_counts(zb, lam, lam * self.p, Link.LOGISTIC, self._MLE, self.starts[j])
            self.starts[j] = fit.theta
            theta = basis @ fit.theta
        return theta, bernoulli_kl(self.p, expit(self.z @ theta))

    def evaluate(self, lam):
        thetas, kls = zip(*(self.flip(j, lam) for j in range(self.n)))
        kls = np.array(kls)
        return np.array(thetas), kls, kls @ lam


def _best_cut_design(cuts: np.ndarray):
    """max_{lam, s} s  s.t.  s <= k . lam for every cut k, lam on the simplex."""
    m, n = cuts.shape
    c = np.zeros(n + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-cuts, np.ones((m, 1))])
    a_eq = np.zeros((1, n + 1))
    a_eq[0, :n] = 1.0
    res = linprog(
        c, A_ub=a_ub, b_ub=np.zeros(m), A_eq=a_eq, b_eq=[1.0],
        bounds=[(0, None)] * n + [(None, None)], method="highs",
    )
    if res.status != 0:
        raise PrefDesignError(f"cutting-plane LP failed: {res.message}")
    lam = np.clip(res.x[:n], 0.0, None)
    return lam / lam.sum(), -res.fun


def lower_bound(
    arms: ArmSet, theta_star, delta: float, cfg: LowerBoundConfig = LowerBoundConfig(),
    link: Link = Link.LOGISTIC,
) -> LowerBoundEstimate:
    """log(1/(2.4 delta)) / max_lam min_j min_{theta: z_j^T theta = 0} sum_i lam_i KL_i(theta).

    The outer maximization starts with multiplicative weights and is then
    refined with Kelley cutting planes. Every inner solution gives a valid
    cut, so the LP value upper-bounds the game value even when the inner
    solves are inexact.
    """
    _require_logistic(link)
    theta_star = np.asarray(theta_star, dtype=float).ravel()
    if not (0 < delta < 1):
        raise InputDomainError("delta must lie in (0, 1)")
    if arms.dim > cfg.max_dim:
        raise InputDomainError(f"lower bound solver is limited to d <= {cfg.max_dim}")
    margin_and_ellstar(arms, theta_star)
    log_term = max(0.0, math.log(1.0 / (CONF_SCALE * delta)))
    oracle = _FlipOracle(arms, theta_star)
    n = arms.n

    lam = np.full(n, 1.0 / n)
    best = (-math.inf, lam, None)
    cuts = []

    def probe(lam):
        nonlocal best
        thetas, kls, vals = oracle.evaluate(lam)
        cuts.extend(kls)
        j = int(np.argmin(vals))
        if vals[j] > best[0]:
            best = (float(vals[j]), lam.copy(), thetas)
        return kls[j]

    scale = None
    eta = math.sqrt(2.0 * math.log(max(n, 2)) / cfg.mw_iterations)
    for _ in range(cfg.mw_iterations if n > 1 else 1):
        g = probe(lam)
        scale = scale or max(float(g.max()), 1e-300)
        lam = lam * np.exp(eta * g / scale)
        lam /= lam.sum()

    upper = math.inf
    for _ in range(cfg.cut_iterations):
        lam_cp, upper = _best_cut_design(np.array(cuts))
        if upper - best[0] <= cfg.rel_gap * upper:
            break
        probe(lam_cp)
    else:
        lam_cp, upper = _best_cut_design(np.array(cuts))

    lower_val, lam_best, thetas = best
    gap = max(0.0, (upper - lower_val) / upper) if upper > 0 else math.inf
    value = log_term / upper if log_term > 0 else 0.0
    return LowerBoundEstimate(
        value=value, design=Design(lam_best), worst_thetas=thetas, gap=gap,
        game_value=lower_val, converged=gap <= cfg.rel_gap,
    )


# --------------------------------------------------------------------------
# canonical instance and diagnostics


def canonical_instance(d: int, eps: float) -> tuple[ArmSet, TrueModel]:
    """Standard basis arms; theta* is all ones except eps in the last slot."""
    if not (0 < eps < 0.25):
        raise InputDomainError("eps must lie in (0, 1/4)")
    if d < 2:
        raise InputDomainError("the canonical instance needs d >= 2")
    theta = np.ones(d)
    theta[-1] = eps
    return ArmSet(np.eye(d)), TrueModel(theta, Link.LOGISTIC)


def sandwich_check(design, theta_hat, theta_star, arms: ArmSet, link: Link = Link.LOGISTIC) -> bool:
    """True iff H(lam, theta*)/3 <= H(lam, theta_hat) <= 3 H(lam, theta*) in Loewner order."""
    lam = getattr(design, "weights", design)
    h_hat = fisher_design(lam, theta_hat, arms, link).matrix
    h_star = fisher_design(lam, theta_star, arms, link).matrix
    eig = linalg.eigh(h_hat, h_star, eigvals_only=True)
    tol = 1e-9
    return bool(eig.min() >= 1.0 / 3.0 - tol and eig.max() <= 3.0 + tol)
