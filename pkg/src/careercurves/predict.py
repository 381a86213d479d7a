"""Posterior curve summaries, partition point estimates, and predictions.

All operations read a frozen Chain.  Curve summaries carry the per-iterate
draw matrix so downstream statistics (peak-game spread, segment checks) can
work with the posterior sample rather than only the bands.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .basis import bspline_basis, penalty_matrix
from .partition import (
    Partition,
    _log_similarity_categorical_stats,
    _log_similarity_continuous_stats,
)
from .sampler import Chain, _draw_categorical, _inv_gamma

__all__ = [
    "CurveSummary",
    "PartitionEstimate",
    "fitted_curve",
    "active_prediction",
    "career_prediction",
    "dahl_estimate",
    "peak_game",
    "write_curve_csv",
    "write_partition_csv",
]


@dataclass
class CurveSummary:
    """Pointwise posterior summary of a production curve on aligned time.

    Bands are nested by construction: the prediction band adds observation
    noise to the curve draws and is clipped to contain the credible band.
    """

    grid: np.ndarray
    mean: np.ndarray
    cred_lo: np.ndarray
    cred_hi: np.ndarray
    pred_lo: np.ndarray
    pred_hi: np.ndarray
    draws: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class PartitionEstimate:
    partition: Partition
    ls_score: float
    sample_index: int


def _summarize(grid, draws, noise_sd, rng) -> CurveSummary:
    """Summary bands from curve draws (S, G) and per-draw noise sds (S,)."""
    mean = draws.mean(axis=0)
    cred_lo, cred_hi = np.percentile(draws, [2.5, 97.5], axis=0)
    noise = noise_sd[:, None] * rng.standard_normal(draws.shape)
    pred_lo, pred_hi = np.percentile(draws + noise, [2.5, 97.5], axis=0)
    # numerical guard: quantiles of a finite sample can cross under tiny noise
    pred_lo = np.minimum(pred_lo, cred_lo)
    pred_hi = np.maximum(pred_hi, cred_hi)
    return CurveSummary(grid, mean, cred_lo, cred_hi, pred_lo, pred_hi, draws)


def _curve_draws(chain: Chain, idx: int, grid) -> np.ndarray:
    H = bspline_basis(grid, chain.prior.knots)
    beta = np.stack([s.beta[idx] for s in chain.samples])
    beta0 = np.array([s.beta0[idx] for s in chain.samples])
    return beta0[:, None] + beta @ H.T


def fitted_curve(chain: Chain, player_id: str, grid_size: int = 201, seed: int = 0) -> CurveSummary:
    """Posterior mean curve with credible and prediction bands on [0, 1]."""
    idx = chain.index_of(player_id)
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, grid_size)
    draws = _curve_draws(chain, idx, grid)
    noise_sd = np.sqrt(np.array([s.sigma2[idx] for s in chain.samples]))
    return _summarize(grid, draws, noise_sd, rng)


def active_prediction(chain: Chain, player_id: str, grid_size: int = 201, seed: int = 0):
    """Career completion for an active player, conditioned on the posterior
    expectation of the imputed game total.

    Returns (CurveSummary, expected_n).  The summary's grid covers the whole
    aligned career; multiply by expected_n for game units.  The segment past
    the observed boundary is informed by the cluster and global structure.
    """
    idx = chain.index_of(player_id)
    if not chain.active[idx]:
        raise ValueError(
            f"player {player_id!r} is retired; use fitted_curve for observed careers"
        )
    expected_n = int(round(float(np.mean([s.n_imputed[idx] for s in chain.samples]))))
    summary = fitted_curve(chain, player_id, grid_size=grid_size, seed=seed)
    return summary, expected_n


class _AllocationContext:
    """Per-chain constants for covariate-driven allocation of a new subject."""

    def __init__(self, chain: Chain):
        self.prior = chain.prior
        self.sim = chain.prior.similarity
        profiles = chain.profiles
        ages = np.array([p.age for p in profiles])
        self.sim_x = (ages - chain.sim_shift) / chain.sim_scale
        self.exp_idx = np.array([p.experience_index for p in profiles])
        self.draft_idx = np.array([p.draft_index for p in profiles])
        P = chain.prior.dimension
        self.K_chol = np.linalg.cholesky(
            penalty_matrix(P, chain.prior.penalty_order, chain.prior.v)
        )
        self.P = P

    def new_profile_values(self, profile, chain):
        x = (profile.age - chain.sim_shift) / chain.sim_scale
        return x, profile.experience_index, profile.draft_index

    def logweights(self, state, x, e, d):
        """Unnormalized allocation log weights for one iterate (k+1 entries)."""
        k = state.n_clusters
        lab = state.labels - 1
        sizes = np.bincount(lab, minlength=k).astype(float)
        out = np.log(sizes)
        if self.sim.use_covariates:
            s_x = np.bincount(lab, weights=self.sim_x, minlength=k)
            s_xx = np.bincount(lab, weights=self.sim_x**2, minlength=k)
            out = out + (
                _log_similarity_continuous_stats(sizes + 1.0, s_x + x, s_xx + x * x, self.sim)
                - _log_similarity_continuous_stats(sizes, s_x, s_xx, self.sim)
            )
            a = self.sim.dirichlet_concentration
            for cat_idx, new_idx in ((self.exp_idx, e), (self.draft_idx, d)):
                cnt = np.zeros((k, 3))
                np.add.at(cnt, (lab, cat_idx), 1.0)
                plus = cnt.copy()
                plus[:, new_idx] += 1.0
                out = out + (
                    _log_similarity_categorical_stats(plus, a)
                    - _log_similarity_categorical_stats(cnt, a)
                )
        new_w = math.log(self.sim.M)
        if self.sim.use_covariates:
            new_w += float(_log_similarity_continuous_stats(1.0, x, x * x, self.sim))
            a = self.sim.dirichlet_concentration
            single = np.zeros((2, 3))
            single[0, e] = 1.0
            single[1, d] = 1.0
            new_w += float(_log_similarity_categorical_stats(single, a).sum())
        return np.append(out, new_w)


def career_prediction(chain: Chain, x_new, grid_size: int = 201, seed: int = 0):
    """Posterior predictive curve for a hypothetical new subject.

    Per iterate the subject is allocated to an existing or fresh cluster by
    the covariate-dependent predictive weights, coefficients are drawn from
    that cluster, and the curve is evaluated on the grid.  Returns
    (CurveSummary, expected_games) where expected_games averages the imputed
    totals of active players in the allocated clusters (all subjects, when
    the cluster has none).
    """
    ctx = _AllocationContext(chain)
    x, e, d = ctx.new_profile_values(x_new, chain)
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, grid_size)
    H = bspline_basis(grid, chain.prior.knots)
    prior = chain.prior

    draws = np.empty((len(chain.samples), grid.size))
    noise_sd = np.empty(len(chain.samples))
    games = np.empty(len(chain.samples))
    any_active = bool(chain.active.any())
    for s_idx, state in enumerate(chain.samples):
        logw = ctx.logweights(state, x, e, d)
        h = _draw_categorical(rng, logw)
        if h < state.n_clusters:
            theta = state.theta[h]
            lam2 = state.lambda2[h]
            members = np.flatnonzero(state.labels == h + 1)
            pool = members[chain.active[members]] if any_active else members
            if pool.size == 0:
                pool = np.arange(len(chain.player_ids))
        else:
            tau2_new = float(_inv_gamma(rng, prior.a_tau, 1.0 / prior.b_tau))
            lam = rng.uniform(0.0, prior.A)
            lam2 = lam * lam
            z = rng.standard_normal(ctx.P)
            theta = state.mu + math.sqrt(tau2_new) * solve_triangular(
                ctx.K_chol, z, lower=True, trans=1
            )
            pool = np.arange(len(chain.player_ids))
        beta_new = theta + math.sqrt(lam2) * rng.standard_normal(ctx.P)
        beta0_new = state.mu_b0 + math.sqrt(state.sigma2_b0) * rng.standard_normal()
        draws[s_idx] = beta0_new + H @ beta_new
        # a new subject's noise level: that of a randomly chosen fitted subject
        noise_sd[s_idx] = math.sqrt(state.sigma2[rng.integers(len(state.sigma2))])
        if any_active:
            act_pool = pool[chain.active[pool]]
            games[s_idx] = (
                state.n_imputed[act_pool].mean() if act_pool.size else state.n_imputed.mean()
            )
        else:
            games[s_idx] = state.n_imputed[pool].mean()
    summary = _summarize(grid, draws, noise_sd, rng)
    return summary, float(games.mean())


def dahl_estimate(chain: Chain) -> PartitionEstimate:
    """Stored partition closest (least squares) to the pairwise co-clustering
    probability matrix; ties broken by the earliest iterate."""
    if len(chain.samples) == 0:
        raise ValueError("chain holds no samples")
    labels = np.stack([s.labels for s in chain.samples])
    S, m = labels.shape
    pbar = np.zeros((m, m))
    for row in labels:
        pbar += row[:, None] == row[None, :]
    pbar /= S
    best_idx, best_score = 0, math.inf
    for s_idx, row in enumerate(labels):
        assoc = (row[:, None] == row[None, :]).astype(float)
        score = float(((assoc - pbar) ** 2).sum())
        if score < best_score - 1e-12:
            best_idx, best_score = s_idx, score
    return PartitionEstimate(
        partition=Partition(labels[best_idx].copy()),
        ls_score=best_score,
        sample_index=best_idx,
    )


def peak_game(curve: CurveSummary, expected_n: float):
    """Game index of maximum posterior-mean production, with the spread of
    per-iterate peak positions (standard deviation, in game units)."""
    if curve.grid.size == 0:
        raise ValueError("empty curve grid")
    peak = int(round(float(curve.grid[int(np.argmax(curve.mean))]) * expected_n))
    if curve.draws is None:
        return peak, math.nan
    positions = curve.grid[np.argmax(curve.draws, axis=1)] * expected_n
    return peak, float(positions.std())


def write_curve_csv(summary: CurveSummary, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["grid", "mean", "cred_lo", "cred_hi", "pred_lo", "pred_hi"])
        for t in range(summary.grid.size):
            w.writerow(
                [
                    repr(float(summary.grid[t])),
                    repr(float(summary.mean[t])),
                    repr(float(summary.cred_lo[t])),
                    repr(float(summary.cred_hi[t])),
                    repr(float(summary.pred_lo[t])),
                    repr(float(summary.pred_hi[t])),
                ]
            )


def write_partition_csv(est: PartitionEstimate, player_ids, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["player_id", "cluster_label"])
        for pid, lab in zip(player_ids, est.partition.labels):
            w.writerow([pid, int(lab)])
