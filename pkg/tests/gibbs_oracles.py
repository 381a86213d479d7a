"""Shared fixtures and slice-density machinery for the sampler tests."""

import copy
import math

import numpy as np

from careercurves.basis import KnotSet
from careercurves.model import PlayerRecord, PriorConfig
from careercurves.partition import CovariateProfile, SimilarityConfig
from careercurves.sampler import FitData, initial_state, log_joint


def tiny_prior(**overrides):
    """Finite-moment hyperparameters for the tiny-model sampler tests."""
    base = dict(
        A=1.0,
        a_tau=3.0, b_tau=1.0,
        v=1.0,
        s2_mu=4.0,
        s2_b0=4.0, a_b0=3.0, b_b0=1.0,
        a_sigma=3.0, b_sigma=1.0,
        m_a=(0.0, 5.0), s2_a=4.0,
        m_gamma=(2.0, 0.0, 0.0), s2_gamma=4.0,
        a_delta=3.0, b_delta=1.0,
        a_psi=3.0, b_psi=1.0,
        knots=KnotSet(1, 2),  # P = 4
        penalty_order=1,
        p_aux=3,
        similarity=SimilarityConfig(),
    )
    base.update(overrides)
    return PriorConfig(**base)


def tiny_records(m=4, n=10, seed=0, active_flags=None):
    rng = np.random.default_rng(seed)
    exps = ["HS", "COLLEGE", "INTL"]
    drafts = ["TOP5", "ROUND1", "ROUND2"]
    records = []
    for i in range(m):
        is_active = bool(active_flags[i]) if active_flags is not None else False
        n_obs = n if not is_active else max(2, n - 3)
        records.append(
            PlayerRecord(
                id=f"t{i}",
                y=rng.normal(8.0, 2.0, n_obs),
                active=is_active,
                games_observed=n_obs,
                career_length_observed=2.0 + 0.3 * i,
                profile=CovariateProfile(
                    age=float(rng.uniform(19, 25)),
                    experience=exps[i % 3],
                    draft_cat=drafts[i % 3],
                    draft_order=int(rng.integers(1, 50)),
                ),
            )
        )
    return records


def random_state(records, prior, seed=3, k=None):
    """A dispersed but valid state for slice checks."""
    fd = FitData(records, prior)
    rng = np.random.default_rng(seed)
    ms = initial_state(fd, prior)
    m, P = fd.m, fd.P
    if k is None:
        k = min(2, m)
    labels = 1 + (np.arange(m) % k)
    ms.labels = labels
    ms.theta = rng.normal(0.0, 1.0, (k, P))
    ms.lambda2 = rng.uniform(0.05, 0.8, k) ** 2 * prior.A**2
    ms.tau2 = rng.uniform(0.3, 2.0, k)
    ms.beta = rng.normal(0.0, 1.0, (m, P)) + ms.theta[labels - 1]
    ms.beta0 = rng.normal(8.0, 1.0, m)
    ms.sigma2 = rng.uniform(0.5, 3.0, m)
    ms.mu = rng.normal(0.0, 0.5, P)
    ms.mu_b0 = rng.normal(8.0, 1.0)
    ms.sigma2_b0 = rng.uniform(0.5, 2.0)
    ms.alpha = np.array([rng.normal(0, 1), rng.normal(5, 1)])
    ms.gamma = np.array([rng.normal(2, 0.5), rng.normal(0, 0.1), rng.normal(0, 0.01)])
    ms.delta2 = rng.uniform(0.5, 2.0)
    ms.psi2 = rng.uniform(0.5, 2.0)
    ms.n_imputed = fd.n_obs + np.where(fd.active, rng.uniform(0.5, 4.0, m), 0.0)
    ms.L_imputed = fd.L_obs + np.where(fd.active, rng.uniform(0.1, 1.0, m), 0.0)
    fd.sync_designs(ms)
    return ms, fd


def slice_tv(ms, fd, prior, grid, set_value, closed_logpdf):
    """Total variation between the grid-normalized log-joint slice and a
    closed-form density over the same grid."""
    base = copy.deepcopy(ms)
    lj = np.empty(grid.size)
    for idx, v in enumerate(grid):
        trial = base.copy()
        set_value(trial, v)
        lj[idx] = log_joint(trial, fd, prior)
    lj -= lj.max()
    p = np.exp(lj)
    p /= p.sum()
    lq = np.array([closed_logpdf(v) for v in grid], dtype=float)
    lq -= lq.max()
    q = np.exp(lq)
    q /= q.sum()
    return 0.5 * float(np.abs(p - q).sum())


def norm_logpdf(x, mean, var):
    return -0.5 * (math.log(2 * math.pi * var) + (x - mean) ** 2 / var)


def ig_logpdf_shape_scale(x, shape, scale):
    """Unnormalized log density of InvGamma(shape, scale)."""
    return -(shape + 1.0) * math.log(x) - scale / x
