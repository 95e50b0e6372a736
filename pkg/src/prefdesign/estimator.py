"""Maximum-likelihood estimation and confidence widths for the BTL model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.linalg.lapack import dposv
from scipy.special import expit, log_expit

from .core import (
    FisherMatrix,
    InputDomainError,
    LabeledDataset,
    Link,
    PrefDesignError,
    fisher_counts,
    link_derivative,
    link_eval,
)

CONF_SCALE = 2.4
_PROB_FLOOR = 1e-300


class NumericError(PrefDesignError, ArithmeticError):
    pass


@dataclass(frozen=True)
class MleConfig:
    ridge: float = 1e-5
    grad_tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        if self.ridge < 0 or self.grad_tol <= 0 or self.max_iter < 1:
            raise InputDomainError(f"invalid MLE configuration {self}")


@dataclass(frozen=True)
class MleResult:
    theta: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float


@dataclass(frozen=True)
class ConfidenceSpec:
    delta: float
    t_eff: int
    d: int

    def __post_init__(self):
        if not (0.0 < self.delta <= math.exp(-1) + 1e-12):
            raise InputDomainError("delta must lie in (0, 1/e]")
        if self.t_eff < 1 or self.d < 1:
            raise InputDomainError("t_eff and d must be positive")


def log_likelihood(theta, z, pulls, wins, link: Link = Link.LOGISTIC, ridge: float = 0.0) -> float:
    """Regularized log-likelihood for aggregated (pulls, wins) per arm."""
    u = z @ theta
    if Link(link) is Link.LOGISTIC:
        ll = wins @ log_expit(u) + (pulls - wins) @ log_expit(-u)
    else:
        p = link_eval(link, u)
        with np.errstate(divide="ignore"):
            ll = wins @ np.log(np.maximum(p, _PROB_FLOOR)) + (pulls - wins) @ np.log(np.maximum(1 - p, _PROB_FLOOR))
    return float(ll - 0.5 * ridge * theta @ theta)


def score(theta, z, pulls, wins, link: Link = Link.LOGISTIC, ridge: float = 0.0) -> np.ndarray:
    """Gradient of ``log_likelihood`` with respect to theta."""
    u = z @ theta
    if Link(link) is Link.LOGISTIC:
        r = wins - pulls * expit(u)
    else:
        p = np.clip(link_eval(link, u), _PROB_FLOOR, 1 - 1e-16)
        r = (wins - pulls * p) * link_derivative(link, u) / (p * (1 - p))
    return z.T @ r - ridge * theta


def _curvature(theta, z, pulls, link):
    u = z @ theta
    if Link(link) is Link.LOGISTIC:
        s = expit(u)
        return pulls * s * (1 - s)
    # Fisher scoring for non-canonical links
    p = np.clip(link_eval(link, u), _PROB_FLOOR, 1 - 1e-16)
    return pulls * link_derivative(link, u) ** 2 / (p * (1 - p))


def _logistic_newton(z, pulls, wins, ridge, grad_tol, max_iter, theta):
    """Lean Newton loop for the logistic link.

    A full step is taken whenever it shrinks the gradient norm; otherwise the
    step is backtracked with the Armijo rule on the log-likelihood.
    """
    d = z.shape[1]
    floor = 1e-12 * max(1.0, float(pulls.sum()))
    losses = pulls - wins
    s = expit(z @ theta)
    g = z.T @ (wins - pulls * s) - ridge * theta
    gnorm = math.sqrt(g @ g)
    it = 0
    while gnorm > grad_tol and it < max_iter:
        it += 1
        h = (z.T * (pulls * s * (1.0 - s))) @ z
        h.flat[:: d + 1] += ridge + floor
        _, step, info = dposv(h, g)
        if info != 0:
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        cand = theta + step
        s_c = expit(z @ cand)
        g_c = z.T @ (wins - pulls * s_c) - ridge * cand
        gn_c = math.sqrt(g_c @ g_c)
        if not gn_c < gnorm:
            def loglik(th):
                u = z @ th
                return wins @ log_expit(u) + losses @ log_expit(-u) - 0.5 * ridge * th @ th

            f = loglik(theta)
            slope = g @ step
            t = 0.5
            while t >= 1e-12:
                cand = theta + t * step
                if loglik(cand) >= f + 1e-4 * t * slope:
                    break
                t *= 0.5
            if t < 1e-12:
                # no ascent possible in floating point: numerically stationary
                break
            s_c = expit(z @ cand)
            g_c = z.T @ (wins - pulls * s_c) - ridge * cand
            gn_c = math.sqrt(g_c @ g_c)
        moved = np.max(np.abs(cand - theta))
        theta, s, g, gnorm = cand, s_c, g_c, gn_c
        if moved <= 1e-15 * max(1.0, np.max(np.abs(theta))):
            break
    return theta, it, gnorm


def mle_from_counts(
    z: np.ndarray,
    pulls: np.ndarray,
    wins: np.ndarray,
    link: Link = Link.LOGISTIC,
    cfg: MleConfig = MleConfig(),
    theta0: np.ndarray | None = None,
) -> MleResult:
    """Damped Newton ascent on the aggregated log-likelihood.

    ``pulls`` and ``wins`` may be fractional; the solver only needs them as
    weights.
    """
    d = z.shape[1]
    keep = pulls > 0
    z, pulls, wins = z[keep], pulls[keep], wins[keep]
    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=float)
    if link is Link.LOGISTIC or link == Link.LOGISTIC.value:
        theta, it, gnorm = _logistic_newton(z, pulls, wins, cfg.ridge, cfg.grad_tol, cfg.max_iter, theta)
        converged = gnorm <= cfg.grad_tol or (it < cfg.max_iter and gnorm <= 1e-6 * max(1.0, float(pulls.sum())))
        return MleResult(theta, bool(converged), it, gnorm)
    f = log_likelihood(theta, z, pulls, wins, link, cfg.ridge)
    if not math.isfinite(f):
        raise NumericError("log-likelihood is not finite at the starting point")
    floor = 1e-12 * max(1.0, float(pulls.sum()))
    g = score(theta, z, pulls, wins, link, cfg.ridge)
    gnorm = float(np.linalg.norm(g))
    it = 0
    while gnorm > cfg.grad_tol and it < cfg.max_iter:
        it += 1
        h = (z.T * _curvature(theta, z, pulls, link)) @ z
        h[np.diag_indices(d)] += cfg.ridge + floor
        step = linalg.solve(h, g, assume_a="pos", check_finite=False)
        slope = g @ step
        t = 1.0
        while True:
            cand = theta + t * step
            fc = log_likelihood(cand, z, pulls, wins, link, cfg.ridge)
            if math.isfinite(fc) and fc >= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            # no ascent possible in floating point: numerically stationary
            break
        moved = np.max(np.abs(cand - theta))
        theta, f = cand, fc
        g = score(theta, z, pulls, wins, link, cfg.ridge)
        gnorm = float(np.linalg.norm(g))
        if moved <= 1e-15 * max(1.0, np.max(np.abs(theta))):
            break
    converged = gnorm <= cfg.grad_tol or (it < cfg.max_iter and gnorm <= 1e-6 * max(1.0, float(pulls.sum())))
    return MleResult(theta, bool(converged), it, gnorm)


def mle_fit(dataset: LabeledDataset, link: Link = Link.LOGISTIC, cfg: MleConfig = MleConfig()) -> MleResult:
    if len(dataset) == 0:
        raise InputDomainError("cannot fit an MLE on an empty dataset")
    pulls, wins = dataset.counts()
    return mle_from_counts(dataset.arms.features, pulls, wins, link, cfg)


def gamma_d(spec: ConfidenceSpec) -> float:
    return 64.0 * (spec.d * math.log(6.0) + math.log((2.0 + spec.t_eff) / spec.delta))


def width_factor(delta: float, t_eff: int) -> float:
    """2.4 * sqrt(log(2(2 + t_eff)/delta)): multiplies the inverse norm."""
    return CONF_SCALE * math.sqrt(math.log(2.0 * (2.0 + max(t_eff, 1)) / delta))


def conf_widths(z: np.ndarray, fisher: FisherMatrix, delta: float, t_eff: int) -> np.ndarray:
    """Vectorized widths for the rows of ``z`` against a precomputed H'."""
    return width_factor(delta, t_eff) * np.sqrt(fisher.inv_sq_norms(z))


def conf_width(z, dataset: LabeledDataset, theta, spec: ConfidenceSpec, link: Link = Link.LOGISTIC) -> float:
    """D(z) = 2.4 ||z||_{H'(D,theta)^{-1}} sqrt(log(2(2+t_eff)/delta)).

    Pass theta* for theory-facing diagnostics and the current estimate for
    plug-in use by the algorithms. The width is returned whether or not the
    xi-condition holds; see ``check_xi_condition``.
    """
    if len(dataset) == 0:
        raise InputDomainError("conf_width needs a nonempty dataset")
    pulls, _ = dataset.counts()
    h = fisher_counts(dataset.arms.features, pulls, np.asarray(theta, dtype=float), link)
    return float(conf_widths(np.asarray(z, dtype=float), h, spec.delta, spec.t_eff)[0])


def xi_squared(dataset: LabeledDataset, theta, link: Link = Link.LOGISTIC) -> float:
    pulls, _ = dataset.counts()
    h = fisher_counts(dataset.arms.features, pulls, np.asarray(theta, dtype=float), link)
    used = dataset.arms.features[pulls > 0]
    return float(np.max(h.inv_sq_norms(used)))


def check_xi_condition(dataset: LabeledDataset, theta, spec: ConfidenceSpec, link: Link = Link.LOGISTIC) -> bool:
    """True iff max_s ||z_s||^2_{H'^{-1}} <= 1 / gamma(d) at theta."""
    if len(dataset) == 0:
        raise InputDomainError("check_xi_condition needs a nonempty dataset")
    return xi_squared(dataset, theta, link) <= 1.0 / gamma_d(spec)


def lcb_ucb(z, theta_hat, width: float) -> tuple[float, float]:
    if width < 0:
        raise InputDomainError("width must be nonnegative")
    c = float(np.dot(z, theta_hat))
    return c - width, c + width
