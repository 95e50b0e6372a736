"""Domain types, link functions and Fisher-information algebra."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg
from scipy.linalg.lapack import dpotrf, dtrtrs
from scipy.special import expit, ndtr

JITTER_SCALE = 1e-10


class PrefDesignError(Exception):
    """Base class for all library errors."""


class InputDomainError(PrefDesignError, ValueError):
    pass


class DimensionError(PrefDesignError, ValueError):
    pass


class SingularMatrixError(PrefDesignError, np.linalg.LinAlgError):
    pass


class DegenerateInstanceError(PrefDesignError, ValueError):
    pass


class Link(enum.Enum):
    LOGISTIC = "logistic"
    LINEAR = "linear"
    GAUSSIAN_CDF = "gaussian-cdf"


def _check_linear_domain(u):
    u = np.asarray(u, dtype=float)
    if np.any(np.abs(u) > 1.0 + 1e-12):
        raise InputDomainError("linear link is only defined on [-1, 1]")
    return u


def link_eval(link: Link, u):
    """Preference probability psi(u). Works elementwise on arrays."""
    link = Link(link)
    if link is Link.LOGISTIC:
        return expit(u)
    if link is Link.LINEAR:
        u = _check_linear_domain(u)
        return np.clip((u + 1.0) / 2.0, 0.0, 1.0)
    return ndtr(u)


def link_derivative(link: Link, u):
    link = Link(link)
    if link is Link.LOGISTIC:
        s = expit(u)
        return s * (1.0 - s)
    if link is Link.LINEAR:
        u = _check_linear_domain(u)
        return np.full_like(u, 0.5, dtype=float) if u.ndim else 0.5
    return np.exp(-0.5 * np.square(u)) / np.sqrt(2.0 * np.pi)


class Arm(NamedTuple):
    index: int
    features: np.ndarray


@dataclass(frozen=True, eq=False)
class ArmSet:
    """Finite set of preference-pair features, one row per arm.

    Rows must have Euclidean norm at most one; use ``normalize_armset`` to
    build an instance from raw embedding differences.
    """

    features: np.ndarray

    def __post_init__(self):
        z = np.array(self.features, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2 or z.shape[0] == 0 or z.shape[1] == 0:
            raise DimensionError("an ArmSet needs at least one arm of dimension >= 1")
        if not np.all(np.isfinite(z)):
            raise InputDomainError("arm features must be finite")
        if np.linalg.norm(z, axis=1).max() > 1.0 + 1e-9:
            raise InputDomainError("arm features must have norm <= 1")
        z.setflags(write=False)
        object.__setattr__(self, "features", z)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Arm:
        return Arm(int(i), self.features[i])

    def __iter__(self):
        return (self[i] for i in range(self.n))

    def subset(self, indices) -> "ArmSet":
        return ArmSet(self.features[np.asarray(indices, dtype=int)])


@dataclass(frozen=True, eq=False)
class TrueModel:
    theta_star: np.ndarray
    link: Link = Link.LOGISTIC

    def __post_init__(self):
        theta = np.array(self.theta_star, dtype=float).ravel()
        theta.setflags(write=False)
        object.__setattr__(self, "theta_star", theta)
        object.__setattr__(self, "link", Link(self.link))

    def margins(self, arms: ArmSet) -> np.ndarray:
        if arms.dim != self.theta_star.size:
            raise DimensionError("theta_star and arms disagree on dimension")
        return arms.features @ self.theta_star

    def margin(self, arms: ArmSet) -> float:
        return float(np.min(np.abs(self.margins(arms))))

    def probabilities(self, arms: ArmSet) -> np.ndarray:
        return link_eval(self.link, self.margins(arms))

    def kappa0(self, arms: ArmSet) -> float:
        """Smallest link derivative over the arm set."""
        return float(np.min(link_derivative(self.link, self.margins(arms))))

    def check_well_posed(self, arms: ArmSet) -> None:
        if self.margin(arms) <= 0.0:
            raise DegenerateInstanceError("an arm lies on the decision boundary")


def jitter_for(matrix: np.ndarray) -> float:
    d = matrix.shape[0]
    tr = float(np.trace(matrix))
    # empty designs have zero trace; fall back to an absolute floor
    return JITTER_SCALE * (tr / d if tr > 0 else 1.0)


@dataclass(frozen=True, eq=False)
class FisherMatrix:
    """Symmetric PSD information matrix with the ridge already added."""

    matrix: np.ndarray
    jitter: float

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "FisherMatrix":
        raw = 0.5 * (raw + raw.T)
        jit = jitter_for(raw)
        m = raw + jit * np.eye(raw.shape[0])
        m.setflags(write=False)
        return cls(m, jit)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def raw(self) -> np.ndarray:
        return self.matrix - self.jitter * np.eye(self.dim)

    @cached_property
    def cholesky(self) -> np.ndarray:
        factor, info = dpotrf(self.matrix, lower=1, clean=1)
        if info != 0:
            raise SingularMatrixError("Fisher matrix is not positive definite")
        return factor

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.cholesky, True), rhs, check_finite=False)

    def inv_sq_norms(self, z: np.ndarray) -> np.ndarray:
        """Squared inverse norms z^T M^{-1} z for each row of ``z``."""
        z = np.atleast_2d(z)
        y, info = dtrtrs(self.cholesky, z.T, lower=1)
        if info != 0:
            raise SingularMatrixError("triangular solve failed")
        return np.einsum("ij,ij->j", y, y)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Ordered query records (arm index, binary label) over an ArmSet."""

    arms: ArmSet
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        lab = np.asarray(self.labels).ravel()
        if idx.shape != lab.shape:
            raise DimensionError("indices and labels must have equal length")
        if idx.size and (idx.min() < 0 or idx.max() >= self.arms.n):
            raise IndexError("dataset references an arm outside the ArmSet")
        if lab.size and not np.all((lab == 0) | (lab == 1)):
            raise InputDomainError("labels must be 0 or 1")
        idx.setflags(write=False)
        lab = lab.astype(np.int8)
        lab.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "labels", lab)

    @classmethod
    def from_records(cls, arms: ArmSet, records: Sequence[tuple[int, int]]) -> "LabeledDataset":
        if len(records) == 0:
            return cls(arms)
        idx, lab = zip(*records)
        return cls(arms, np.array(idx), np.array(lab))

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def records(self) -> list[tuple[int, int]]:
        return list(zip(self.indices.tolist(), self.labels.tolist()))

    @property
    def t_eff(self) -> int:
        return int(np.unique(self.indices).size)

    def counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-arm (pulls, number of label-1 outcomes)."""
        n = self.arms.n
        pulls = np.bincount(self.indices, minlength=n).astype(float)
        wins = np.bincount(self.indices, weights=self.labels, minlength=n)
        return pulls, wins

    def extend(self, indices, labels) -> "LabeledDataset":
        return LabeledDataset(
            self.arms,
            np.concatenate([self.indices, np.atleast_1d(indices)]),
            np.concatenate([self.labels, np.atleast_1d(labels)]),
        )


def build_feature(emb_chosen, emb_rejected) -> np.ndarray:
    a = np.asarray(emb_chosen, dtype=float)
    b = np.asarray(emb_rejected, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return a - b


def normalize_armset(raw) -> ArmSet:
    """Scale all rows by the largest row norm so the max norm becomes one."""
    z = np.array(raw, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    scale = np.linalg.norm(z, axis=1).max() if z.size else 0.0
    if scale == 0.0:
        raise InputDomainError("cannot normalize an all-zero arm set")
    return ArmSet(z / scale)


def _as_features(arms) -> np.ndarray:
    return arms.features if isinstance(arms, ArmSet) else np.atleast_2d(np.asarray(arms, dtype=float))


def check_simplex(weights, n: int | None = None, atol: float = 1e-9) -> np.ndarray:
    lam = np.asarray(weights, dtype=float).ravel()
    if n is not None and lam.size != n:
        raise DimensionError(f"design has {lam.size} weights for {n} arms")
    if np.any(lam < -atol) or abs(lam.sum() - 1.0) > atol or not np.all(np.isfinite(lam)):
        raise InputDomainError("design weights must lie on the probability simplex")
    return np.clip(lam, 0.0, None)


def weighted_gram(z: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return (z.T * weights) @ z


def fisher_design(weights, theta, arms, link: Link = Link.LOGISTIC) -> FisherMatrix:
    """H(lambda, theta) = sum_z lambda_z mu'(z^T theta) z z^T, plus jitter."""
    z = _as_features(arms)
    lam = check_simplex(getattr(weights, "weights", weights), z.shape[0])
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != z.shape[1]:
        raise DimensionError("theta and arms disagree on dimension")
    mu_dot = link_derivative(link, z @ theta)
    return FisherMatrix.from_raw(weighted_gram(z, lam * mu_dot))


def fisher_counts(z: np.ndarray, pulls: np.ndarray, theta, link: Link = Link.LOGISTIC) -> FisherMatrix:
    mu_dot = link_derivative(link, z @ np.asarray(theta, dtype=float))
    return FisherMatrix.from_raw(weighted_gram(z, pulls * mu_dot))


def fisher_data(dataset: LabeledDataset, theta, link: Link = Link.LOGISTIC) -> FisherMatrix:
    """Unnormalized data Fisher matrix H'(D, theta)."""
    if len(dataset) == 0:
        raise InputDomainError("fisher_data needs a nonempty dataset")
    pulls, _ = dataset.counts()
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != dataset.arms.dim:
        raise DimensionError("theta and arms disagree on dimension")
    return fisher_counts(dataset.arms.features, pulls, theta, link)


def inv_norm(z, m: FisherMatrix) -> float:
    """sqrt(z^T M^{-1} z) via a Cholesky solve."""
    z = np.asarray(z, dtype=float).ravel()
    if not isinstance(m, FisherMatrix):
        m = FisherMatrix(np.asarray(m, dtype=float), 0.0)
    if z.size != m.dim:
        raise DimensionError("vector and matrix disagree on dimension")
    return float(np.sqrt(m.inv_sq_norms(z)[0]))
