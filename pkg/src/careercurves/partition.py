"""Covariate-dependent product partition prior (PPMx) over subject clusterings.

The prior mass of a partition is an unnormalized product, over clusters, of a
cohesion term M * (size-1)! and similarity terms scoring how alike the
cluster's covariates are.  Similarities are marginals of conjugate auxiliary
models: a Gaussian with unknown mean for the continuous covariate and
Dirichlet-multinomial marginals for the two categorical ones.  Everything is
computed in log space; cluster sizes in the hundreds overflow otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "EXPERIENCE_LEVELS",
    "DRAFT_LEVELS",
    "Partition",
    "CovariateProfile",
    "SimilarityConfig",
    "log_cohesion",
    "log_similarity_continuous",
    "log_similarity_categorical",
    "log_ppmx_prior",
    "predictive_allocation_logweights",
]

EXPERIENCE_LEVELS = ("HS", "COLLEGE", "INTL")
DRAFT_LEVELS = ("TOP5", "ROUND1", "ROUND2")

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Partition:
    """Cluster labels s_1..s_m taking values 1..k with no empty clusters."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("labels must be a non-empty 1-d sequence")
        k = labels.max()
        if labels.min() < 1 or not np.array_equal(np.unique(labels), np.arange(1, k + 1)):
            raise ValueError("labels must cover 1..k with no gaps")

    @property
    def n_subjects(self) -> int:
        return self.labels.size

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max())

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters + 1)[1:]

    def members(self, j: int) -> np.ndarray:
        """Indices of subjects in cluster j (1-based label)."""
        return np.flatnonzero(self.labels == j)


@dataclass(frozen=True)
class CovariateProfile:
    """One subject's clustering covariates plus the raw draft order.

    ``age`` is age at first game in years, ``experience`` one of
    EXPERIENCE_LEVELS, ``draft_cat`` one of DRAFT_LEVELS.  ``draft_order`` is
    the raw pick number; it is not used by the partition prior, only by the
    career-length regression.
    """

    age: float
    experience: str
    draft_cat: str
    draft_order: int = 1

    def __post_init__(self):
        if self.experience not in EXPERIENCE_LEVELS:
            raise ValueError(f"unknown experience category: {self.experience!r}")
        if self.draft_cat not in DRAFT_LEVELS:
            raise ValueError(f"unknown draft category: {self.draft_cat!r}")

    @property
    def experience_index(self) -> int:
        return EXPERIENCE_LEVELS.index(self.experience)

    @property
    def draft_index(self) -> int:
        return DRAFT_LEVELS.index(self.draft_cat)


@dataclass(frozen=True)
class SimilarityConfig:
    """Similarity and cohesion settings of the partition prior.

    ``use_covariates=False`` turns every similarity term into 1, reducing the
    prior to the covariate-free product partition (DP-type) model.
    ``standardize_age`` asks the model fit to z-score ages before they reach
    the similarity; the default keeps raw years.
    """

    gaussian_prior_mean_variance: float = 10.0
    dirichlet_concentration: float = 0.1
    M: float = 1.0
    use_covariates: bool = True
    standardize_age: bool = False

    def __post_init__(self):
        if self.gaussian_prior_mean_variance <= 0:
            raise ValueError("gaussian_prior_mean_variance must be positive")
        if self.dirichlet_concentration <= 0:
            raise ValueError("dirichlet_concentration must be positive")
        if self.M <= 0:
            raise ValueError("cohesion mass M must be positive")


def log_cohesion(size: int, M: float = 1.0) -> float:
    """log of the DP-type cohesion M * (size-1)!, exact in log space."""
    if size < 1:
        raise ValueError("cluster size must be >= 1")
    return float(np.log(M) + gammaln(size))


def _log_normal(x, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def log_similarity_continuous(values, cfg: SimilarityConfig) -> float:
    """Marginal of iid N(x; m, 1) values under m ~ N(0, v0), in log space.

    Evaluated through the conjugate ratio
    prod N(x_i; 0, 1) * N(0; 0, v0) / N(m_hat; 0, s_hat^2) with
    s_hat^2 = (n + 1/v0)^{-1} and m_hat = s_hat^2 * sum(x).
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("similarity of an empty value set is undefined")
    return float(
        _log_similarity_continuous_stats(x.size, x.sum(), np.dot(x, x), cfg)
    )


def _log_similarity_continuous_stats(n, sx, sxx, cfg: SimilarityConfig):
    """Continuous similarity from sufficient statistics (n, sum x, sum x^2).

    Vectorizes over arrays of statistics; used by the sampler's hot loop.
    """
    v0 = cfg.gaussian_prior_mean_variance
    s_hat2 = 1.0 / (np.asarray(n, dtype=float) + 1.0 / v0)
    m_hat = s_hat2 * sx
    log_data = -0.5 * (n * _LOG_2PI + sxx)
    log_prior_at_zero = -0.5 * (_LOG_2PI + np.log(v0))
    log_post_at_mhat = -0.5 * (_LOG_2PI + np.log(s_hat2) + m_hat**2 / s_hat2)
    return log_data + log_prior_at_zero - log_post_at_mhat


def log_similarity_categorical(counts, alpha: float) -> float:
    """Dirichlet-multinomial marginal of category counts, in log space.

    log G(C*a) - C*log G(a) + sum_c log G(n_c + a) - log G(N + C*a).
    """
    n = np.asarray(counts, dtype=float)
    if n.size == 0 or np.any(n < 0) or n.sum() <= 0:
        raise ValueError("counts must be non-negative with a positive total")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    C = n.size
    return float(
        gammaln(C * alpha)
        - C * gammaln(alpha)
        + gammaln(n + alpha).sum()
        - gammaln(n.sum() + C * alpha)
    )


def _log_similarity_categorical_stats(counts, alpha):
    """Row-wise Dirichlet-multinomial marginal for an (k, C) count array."""
    counts = np.asarray(counts, dtype=float)
    C = counts.shape[-1]
    return (
        gammaln(C * alpha)
        - C * gammaln(alpha)
        + gammaln(counts + alpha).sum(axis=-1)
        - gammaln(counts.sum(axis=-1) + C * alpha)
    )


def _profile_arrays(profiles):
    ages = np.array([p.age for p in profiles], dtype=float)
    exp_idx = np.array([p.experience_index for p in profiles], dtype=int)
    draft_idx = np.array([p.draft_index for p in profiles], dtype=int)
    return ages, exp_idx, draft_idx


def log_similarity_profiles(profiles, cfg: SimilarityConfig) -> float:
    """Joint log-similarity of a set of full covariate profiles."""
    if not cfg.use_covariates:
        return 0.0
    ages, exp_idx, draft_idx = _profile_arrays(profiles)
    a = cfg.dirichlet_concentration
    return (
        log_similarity_continuous(ages, cfg)
        + log_similarity_categorical(np.bincount(exp_idx, minlength=3), a)
        + log_similarity_categorical(np.bincount(draft_idx, minlength=3), a)
    )


def log_ppmx_prior(p: Partition, covs, cfg: SimilarityConfig) -> float:
    """Unnormalized log prior mass of a partition given covariate profiles."""
    if len(covs) != p.n_subjects:
        raise ValueError("one covariate profile per subject is required")
    total = 0.0
    for j in range(1, p.n_clusters + 1):
        idx = p.members(j)
        total += log_cohesion(idx.size, cfg.M)
        total += log_similarity_profiles([covs[i] for i in idx], cfg)
    return total


def predictive_allocation_logweights(
    p: Partition, covs, x_new: CovariateProfile, cfg: SimilarityConfig
) -> np.ndarray:
    """Unnormalized log allocation weights of a new subject.

    Entry h < k is the log cohesion-similarity ratio of adding the subject to
    cluster h+1; the last entry opens a new cluster.  The caller normalizes
    via log-sum-exp.
    """
    if len(covs) != p.n_subjects:
        raise ValueError("one covariate profile per subject is required")
    k = p.n_clusters
    out = np.empty(k + 1)
    for j in range(1, k + 1):
        idx = p.members(j)
        members = [covs[i] for i in idx]
        out[j - 1] = (
            log_cohesion(idx.size + 1, cfg.M)
            - log_cohesion(idx.size, cfg.M)
            + log_similarity_profiles(members + [x_new], cfg)
            - log_similarity_profiles(members, cfg)
        )
    out[k] = log_cohesion(1, cfg.M) + log_similarity_profiles([x_new], cfg)
    return out
