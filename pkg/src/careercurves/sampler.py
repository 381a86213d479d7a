"""MCMC engine for the hierarchical curve-clustering model.

One sweep updates, in order: the partition (Polya-urn step with auxiliary
clusters drawn from the prior), per-subject conjugate blocks (spline
coefficients, intercept, noise variance) and censored imputation, per-cluster
blocks (cluster curve, smoothing variance, within-cluster spread), and the
global blocks (grand mean curve, intercept hyperparameters, and the
games/length regressions).  Non-conjugate parameters move by random-walk
Metropolis with proposal scales adapted during burn-in and frozen afterwards.

A chain is a single sequential worker owning its state; run several chains
concurrently with independent seeds for replication.  The vectorized
per-subject updates are exactly equivalent to a sequential pass with one
shared stream, so results are reproducible bit-for-bit given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import gammaln

from .basis import aligned_times, design_matrix, penalty_matrix
from .model import PlayerRecord, PriorConfig
from .partition import _log_similarity_continuous_stats

__all__ = [
    "McmcConfig",
    "ModelState",
    "Chain",
    "FitData",
    "NumericalError",
    "run_chain",
    "log_joint",
    "trunc_norm_lower",
    "update_partition",
    "update_beta",
    "update_beta0",
    "update_sigma2",
    "impute_censored",
    "update_theta_tau",
    "update_lambda",
    "update_mu_globals",
    "update_regression_blocks",
]

_LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(RuntimeError):
    """Non-finite state or an impossible linear system inside a sweep."""


@dataclass(frozen=True)
class McmcConfig:
    """Sweep counts and reproducibility settings.

    ``iterations`` is the total sweep count including burn-in; the stored
    sample count is (iterations - burnin) // thin.  ``init_partition`` is
    "singletons" (every subject starts in its own cluster, merges happen
    through the urn) or "single" (one shared cluster).  Splitting a merged
    cluster requires an auxiliary prior draw to land near a subject's
    coefficients, which is rare in more than a few dimensions, so singleton
    starts mix far faster.

    With ``anneal_spread_cap`` and a spread cap A below 1, the first
    ``anneal_fraction`` of burn-in runs with the cap lifted to 1 so clusters
    can form (joining a cluster is prohibitively expensive while every spread
    is pinned tiny); the cap then snaps back, spreads are clamped inside it,
    and only post-burn-in sweeps are ever stored.
    """

    iterations: int = 50_000
    burnin: int = 25_000
    thin: int = 25
    seed: int = 0
    adapt_during_burnin: bool = True
    proposal_sd: dict = field(default_factory=dict)
    init_partition: str = "singletons"
    anneal_spread_cap: bool = True
    anneal_fraction: float = 0.8

    def __post_init__(self):
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 <= self.burnin < self.iterations:
            raise ValueError("burnin must satisfy 0 <= burnin < iterations")
        if (self.iterations - self.burnin) < self.thin:
            raise ValueError("no samples would be stored")
        if self.init_partition not in ("singletons", "single"):
            raise ValueError("init_partition must be 'singletons' or 'single'")
        if not 0.0 <= self.anneal_fraction < 1.0:
            raise ValueError("anneal_fraction must lie in [0, 1)")

    @property
    def n_samples(self) -> int:
        return (self.iterations - self.burnin) // self.thin


@dataclass
class ModelState:
    """All parameters at one iterate, stored as arrays over subjects/clusters.

    Cluster labels are 1-based and gap-free; rows of ``theta`` line up with
    labels.  ``n_imputed``/``L_imputed`` equal the observed values for retired
    subjects and the current imputation for active ones.
    """

    labels: np.ndarray      # (m,) int
    beta0: np.ndarray       # (m,)
    beta: np.ndarray        # (m, P)
    sigma2: np.ndarray      # (m,)
    n_imputed: np.ndarray   # (m,)
    L_imputed: np.ndarray   # (m,)
    theta: np.ndarray       # (k, P)
    lambda2: np.ndarray     # (k,)
    tau2: np.ndarray        # (k,)
    mu: np.ndarray          # (P,)
    mu_b0: float
    sigma2_b0: float
    alpha: np.ndarray       # (2,)
    gamma: np.ndarray       # (3,)
    delta2: float
    psi2: float

    @property
    def n_clusters(self) -> int:
        return self.theta.shape[0]

    def copy(self) -> "ModelState":
        return ModelState(
            labels=self.labels.copy(), beta0=self.beta0.copy(), beta=self.beta.copy(),
            sigma2=self.sigma2.copy(), n_imputed=self.n_imputed.copy(),
            L_imputed=self.L_imputed.copy(), theta=self.theta.copy(),
            lambda2=self.lambda2.copy(), tau2=self.tau2.copy(), mu=self.mu.copy(),
            mu_b0=self.mu_b0, sigma2_b0=self.sigma2_b0, alpha=self.alpha.copy(),
            gamma=self.gamma.copy(), delta2=self.delta2, psi2=self.psi2,
        )

    def validate(self, fd: "FitData", prior: PriorConfig):
        k = self.n_clusters
        if not np.array_equal(np.unique(self.labels), np.arange(1, k + 1)):
            raise NumericalError("labels must cover 1..k with no empty cluster")
        checks = [
            (np.all(self.sigma2 > 0), "sigma2 must stay positive"),
            (np.all(self.tau2 > 0), "tau2 must stay positive"),
            (np.all((self.lambda2 > 0) & (self.lambda2 <= prior.A**2)),
             "lambda2 must stay in (0, A^2]"),
            (self.sigma2_b0 > 0 and self.delta2 > 0 and self.psi2 > 0,
             "global variances must stay positive"),
            (np.all(self.n_imputed >= fd.n_obs - 1e-9), "imputed n below its bound"),
            (np.all(self.L_imputed >= fd.L_obs - 1e-9), "imputed L below its bound"),
        ]
        for ok, msg in checks:
            if not ok:
                raise NumericalError(msg)
        for arr in (self.beta0, self.beta, self.theta, self.mu, self.alpha, self.gamma):
            if not np.all(np.isfinite(arr)):
                raise NumericalError("non-finite parameter value")


@dataclass
class Chain:
    """Stored post-burn-in, thinned iterates plus everything needed to
    predict from them without re-reading the raw data."""

    samples: list
    rng_seed: int
    prior: PriorConfig
    mcmc: McmcConfig
    acceptance_rates: dict
    player_ids: list
    active: np.ndarray
    n_obs: np.ndarray
    L_obs: np.ndarray
    profiles: list
    sim_shift: float = 0.0
    sim_scale: float = 1.0

    def __len__(self):
        return len(self.samples)

    def index_of(self, player_id: str) -> int:
        try:
            return self.player_ids.index(player_id)
        except ValueError:
            raise KeyError(f"unknown player id {player_id!r}") from None


# ---------------------------------------------------------------------------
# truncated normal sampling


def trunc_norm_lower(rng, mean, sd, lower):
    """Draws from N(mean, sd^2) truncated to [lower, inf), vectorized.

    Inverse-CDF in the body of the distribution; exponential rejection in the
    far tail, where the inverse CDF runs out of floating-point resolution.
    """
    from scipy.special import ndtr, ndtri

    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    sd = np.broadcast_to(np.asarray(sd, dtype=float), mean.shape)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), mean.shape)
    a = (lower - mean) / sd
    out = np.empty_like(a)

    body = a <= 4.0
    if np.any(body):
        u = 1.0 - rng.random(int(body.sum()))  # in (0, 1], keeps the product positive
        tail_prob = ndtr(-a[body])  # = 1 - Phi(a), accurate for a <= 4
        out[body] = -ndtri(u * tail_prob)
    far = ~body
    if np.any(far):
        af = a[far]
        lam = 0.5 * (af + np.sqrt(af * af + 4.0))
        draws = np.empty_like(af)
        todo = np.ones(af.shape, dtype=bool)
        while np.any(todo):
            n_todo = int(todo.sum())
            z = af[todo] + rng.exponential(size=n_todo) / lam[todo]
            accept = np.log(rng.random(n_todo)) <= -0.5 * (z - lam[todo]) ** 2
            idx = np.flatnonzero(todo)[accept]
            draws[idx] = z[accept]
            todo[idx] = False
        out[far] = draws
    return mean + sd * out


def _inv_gamma(rng, shape, scale, size=None):
    """Inverse-gamma draw with density ~ x^-(shape+1) exp(-scale/x)."""
    g = rng.standard_gamma(shape, size=size)
    return scale / g


def _ig_logpdf(x, a, b):
    """Log density of the prior convention IG(a, b): x^-(a+1) exp(-1/(b x))."""
    s = 1.0 / b
    return a * math.log(s) - gammaln(a) - (a + 1.0) * np.log(x) - s / x


# ---------------------------------------------------------------------------
# prepared data


class FitData:
    """Per-fit workspace: responses, encoded covariates, and design caches.

    Design matrices of active subjects depend on the current imputed game
    total; ``rebuild_design(i, n)`` refreshes row i's caches eagerly whenever
    the imputation moves.
    """

    def __init__(self, records, prior: PriorConfig):
        if not records:
            raise ValueError("at least one record is required")
        self.records = list(records)
        self.m = len(self.records)
        self.knots = prior.knots
        self.P = prior.knots.dimension
        self.K = penalty_matrix(self.P, prior.penalty_order, prior.v)
        self.K_chol = np.linalg.cholesky(self.K)
        sign, logdet = np.linalg.slogdet(self.K)
        self.K_logdet = float(logdet)

        self.y = [np.asarray(r.y, dtype=float) for r in self.records]
        self.n_obs = np.array([r.games_observed for r in self.records], dtype=float)
        self.active = np.array([r.active for r in self.records], dtype=bool)
        self.L_obs = np.array([r.career_length_observed for r in self.records])
        self.d = np.array([r.profile.draft_order for r in self.records], dtype=float)
        self.exp_idx = np.array([r.profile.experience_index for r in self.records])
        self.draft_idx = np.array([r.profile.draft_index for r in self.records])

        ages = np.array([r.profile.age for r in self.records], dtype=float)
        sim = prior.similarity
        self.sim_shift, self.sim_scale = 0.0, 1.0
        if sim.standardize_age and self.m > 1:
            self.sim_shift = float(ages.mean())
            self.sim_scale = float(ages.std()) or 1.0
        self.sim_x = (ages - self.sim_shift) / self.sim_scale

        a = sim.dirichlet_concentration
        # gammaln lookup tables over possible category/total counts
        counts = np.arange(self.m + 2, dtype=float)
        self._gl_cat = gammaln(counts + a)
        self._gl_tot = gammaln(counts + 3.0 * a)
        # log similarity of each subject alone, reused every allocation
        single_cat = float(
            gammaln(3 * a) - gammaln(a) + gammaln(1 + a) - gammaln(1 + 3 * a)
        )
        self.single_sim = (
            _log_similarity_continuous_stats(
                1.0, self.sim_x, self.sim_x**2, sim
            )
            + 2.0 * single_cat
        )

        self.yty = np.array([float(v @ v) for v in self.y])
        self.ysum = np.array([float(v.sum()) for v in self.y])
        self.H = [None] * self.m
        self.HtH = np.zeros((self.m, self.P, self.P))
        self.Hty = np.zeros((self.m, self.P))
        self.Ht1 = np.zeros((self.m, self.P))
        self.free_mask = [None] * self.m
        self.loose_mask = [None] * self.m
        for i in range(self.m):
            self.rebuild_design(i, self.n_obs[i])

    def rebuild_design(self, i: int, n_total: float):
        H = design_matrix(aligned_times(n_total, int(self.n_obs[i])), self.knots)
        self.H[i] = H
        self.HtH[i] = H.T @ H
        self.Hty[i] = H.T @ self.y[i]
        self.Ht1[i] = H.sum(axis=0)
        # coefficients with no data support (columns of all zeros); only
        # active subjects' tails produce them
        mask = ~np.any(H != 0.0, axis=0)
        self.free_mask[i] = mask if mask.any() else None
        # columns whose support reaches past the observed boundary: these are
        # only thinly informed by data and are treated as free during the
        # burn-in formation phase
        if self.active[i]:
            t = self.knots.knots
            q = self.knots.degree
            z_max = self.n_obs[i] / n_total
            loose = t[q + 1 : q + 1 + self.P] > z_max + 1e-12
            self.loose_mask[i] = loose if loose.any() else None
        else:
            self.loose_mask[i] = None

    def sync_designs(self, ms: ModelState):
        """Rebuild active subjects' designs to match a state's imputations."""
        for i in np.flatnonzero(self.active):
            self.rebuild_design(i, ms.n_imputed[i])


# ---------------------------------------------------------------------------
# cluster-level covariate statistics for the partition update


class _ClusterStats:
    def __init__(self, ms: ModelState, fd: FitData):
        k = ms.n_clusters
        lab = ms.labels - 1
        self.sizes = np.bincount(lab, minlength=k).astype(float)
        self.s_x = np.bincount(lab, weights=fd.sim_x, minlength=k)
        self.s_xx = np.bincount(lab, weights=fd.sim_x**2, minlength=k)
        self.cnt_exp = np.zeros((k, 3), dtype=int)
        self.cnt_draft = np.zeros((k, 3), dtype=int)
        np.add.at(self.cnt_exp, (lab, fd.exp_idx), 1)
        np.add.at(self.cnt_draft, (lab, fd.draft_idx), 1)

    @property
    def k(self):
        return self.sizes.size

    def remove(self, c, i, fd):
        x = fd.sim_x[i]
        self.sizes[c] -= 1
        self.s_x[c] -= x
        self.s_xx[c] -= x * x
        self.cnt_exp[c, fd.exp_idx[i]] -= 1
        self.cnt_draft[c, fd.draft_idx[i]] -= 1

    def add(self, c, i, fd):
        x = fd.sim_x[i]
        self.sizes[c] += 1
        self.s_x[c] += x
        self.s_xx[c] += x * x
        self.cnt_exp[c, fd.exp_idx[i]] += 1
        self.cnt_draft[c, fd.draft_idx[i]] += 1

    def drop_cluster(self, c):
        self.sizes = np.delete(self.sizes, c)
        self.s_x = np.delete(self.s_x, c)
        self.s_xx = np.delete(self.s_xx, c)
        self.cnt_exp = np.delete(self.cnt_exp, c, axis=0)
        self.cnt_draft = np.delete(self.cnt_draft, c, axis=0)

    def append_cluster(self, i, fd):
        x = fd.sim_x[i]
        self.sizes = np.append(self.sizes, 1.0)
        self.s_x = np.append(self.s_x, x)
        self.s_xx = np.append(self.s_xx, x * x)
        row_e = np.zeros((1, 3), dtype=int)
        row_e[0, fd.exp_idx[i]] = 1
        self.cnt_exp = np.vstack([self.cnt_exp, row_e])
        row_d = np.zeros((1, 3), dtype=int)
        row_d[0, fd.draft_idx[i]] = 1
        self.cnt_draft = np.vstack([self.cnt_draft, row_d])

    def delta_log_similarity(self, i, fd, sim):
        """log g(cluster + subject i) - log g(cluster), per cluster."""
        x = fd.sim_x[i]
        cont = _log_similarity_continuous_stats(
            self.sizes + 1.0, self.s_x + x, self.s_xx + x * x, sim
        ) - _log_similarity_continuous_stats(self.sizes, self.s_x, self.s_xx, sim)
        n = self.sizes.astype(int)
        ce = self.cnt_exp[np.arange(self.k), fd.exp_idx[i]]
        cd = self.cnt_draft[np.arange(self.k), fd.draft_idx[i]]
        cat = (
            fd._gl_cat[ce + 1] - fd._gl_cat[ce]
            + fd._gl_cat[cd + 1] - fd._gl_cat[cd]
            - 2.0 * (fd._gl_tot[n + 1] - fd._gl_tot[n])
        )
        return cont + cat


def coeff_loglik(beta_i, theta, lambda2):
    """log N(beta_i; theta, lambda2 I) for each row of theta."""
    diff = np.asarray(theta) - beta_i
    d2 = np.einsum("...p,...p->...", diff, diff)
    P = diff.shape[-1]
    return -0.5 * (P * (_LOG_2PI + np.log(lambda2)) + d2 / lambda2)


def _draw_categorical(rng, logw):
    w = np.exp(logw - logw.max())
    cdf = np.cumsum(w)
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right").clip(0, w.size - 1))


def _draw_prior_clusters(rng, n, ms, fd, prior):
    """Auxiliary (theta, lambda2, tau2) triples drawn from their priors."""
    tau2 = _inv_gamma(rng, prior.a_tau, 1.0 / prior.b_tau, size=n)
    lam = rng.uniform(0.0, prior.A, size=n)
    z = rng.standard_normal((n, fd.P))
    dev = solve_triangular(fd.K_chol, z.T, lower=True, trans=1).T
    theta = ms.mu + np.sqrt(tau2)[:, None] * dev
    return theta, lam * lam, tau2


def _reallocate_subject(ms, fd, prior, stats, i, rng, loose_tail=False):
    sim = prior.similarity
    c = int(ms.labels[i]) - 1
    reuse = None
    if stats.sizes[c] == 1.0:
        # a vanishing singleton's parameters become the first auxiliary
        # cluster (algorithm-8 convention); relabel to keep labels gap-free
        reuse = (ms.theta[c].copy(), float(ms.lambda2[c]), float(ms.tau2[c]))
        stats.drop_cluster(c)
        ms.theta = np.delete(ms.theta, c, axis=0)
        ms.lambda2 = np.delete(ms.lambda2, c)
        ms.tau2 = np.delete(ms.tau2, c)
        ms.labels[ms.labels > c + 1] -= 1
    else:
        stats.remove(c, i, fd)

    k = stats.k
    # coefficients without data support carry no information about the
    # cluster, so the allocation works on the informed block and the free
    # block is redrawn from the chosen cluster afterwards (an exact joint
    # conditional draw of the label and the free coefficients; keeping the
    # stale free block would glue a censored subject to its current
    # cluster's tail shape)
    free = fd.loose_mask[i] if loose_tail else fd.free_mask[i]
    if free is None:
        obs = slice(None)
        b_obs = ms.beta[i]
    else:
        obs = ~free
        b_obs = ms.beta[i][obs]
    logw = np.empty(k + prior.p_aux)
    logw[:k] = coeff_loglik(b_obs, ms.theta[:, obs], ms.lambda2) + np.log(stats.sizes)
    if sim.use_covariates:
        logw[:k] += stats.delta_log_similarity(i, fd, sim)

    n_fresh = prior.p_aux - (1 if reuse is not None else 0)
    if n_fresh > 0:
        theta_new, l2_new, t2_new = _draw_prior_clusters(rng, n_fresh, ms, fd, prior)
    else:
        theta_new = np.empty((0, fd.P))
        l2_new = t2_new = np.empty(0)
    if reuse is not None:
        theta_new = np.vstack([reuse[0][None, :], theta_new])
        l2_new = np.concatenate([[reuse[1]], l2_new])
        t2_new = np.concatenate([[reuse[2]], t2_new])
    new_base = math.log(sim.M) - math.log(prior.p_aux)
    if sim.use_covariates:
        new_base += fd.single_sim[i]
    logw[k:] = coeff_loglik(b_obs, theta_new[:, obs], l2_new) + new_base

    h = _draw_categorical(rng, logw)
    if h < k:
        ms.labels[i] = h + 1
        stats.add(h, i, fd)
        theta_sel, lam2_sel = ms.theta[h], ms.lambda2[h]
    else:
        a = h - k
        ms.theta = np.vstack([ms.theta, theta_new[a][None, :]])
        ms.lambda2 = np.append(ms.lambda2, l2_new[a])
        ms.tau2 = np.append(ms.tau2, t2_new[a])
        ms.labels[i] = stats.k + 1
        stats.append_cluster(i, fd)
        theta_sel, lam2_sel = theta_new[a], l2_new[a]
    if free is not None:
        nf = int(free.sum())
        ms.beta[i][free] = theta_sel[free] + math.sqrt(lam2_sel) * rng.standard_normal(nf)


def update_partition(ms, fd, prior, rng, loose_tail=False):
    """One Polya-urn pass over all subjects (Neal's auxiliary-cluster scheme).

    ``loose_tail`` widens censored subjects' free coefficient block to every
    column reaching past their observed boundary; used only during discarded
    burn-in sweeps so thinly-informed boundary coefficients cannot pin a
    subject to a malformed cluster while clusters are still forming.
    """
    stats = _ClusterStats(ms, fd)
    for i in range(fd.m):
        _reallocate_subject(ms, fd, prior, stats, i, rng, loose_tail)


# ---------------------------------------------------------------------------
# conjugate subject-level updates (vectorized across subjects)


def update_beta(ms, fd, prior, rng):
    lam2 = ms.lambda2[ms.labels - 1]
    prec = fd.HtH / ms.sigma2[:, None, None]
    prec[:, np.arange(fd.P), np.arange(fd.P)] += 1.0 / lam2[:, None]
    rhs = (fd.Hty - ms.beta0[:, None] * fd.Ht1) / ms.sigma2[:, None]
    rhs += ms.theta[ms.labels - 1] / lam2[:, None]
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as e:
        raise NumericalError("subject coefficient system not positive definite") from e
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    z = rng.standard_normal((fd.m, fd.P))
    noise = np.linalg.solve(np.transpose(L, (0, 2, 1)), z[..., None])[..., 0]
    ms.beta = mean + noise


def update_beta0(ms, fd, prior, rng):
    hb = np.einsum("ip,ip->i", fd.Ht1, ms.beta)
    denom = fd.n_obs * ms.sigma2_b0 + ms.sigma2
    mean = (ms.sigma2_b0 * (fd.ysum - hb) + ms.sigma2 * ms.mu_b0) / denom
    var = ms.sigma2_b0 * ms.sigma2 / denom
    ms.beta0 = mean + np.sqrt(var) * rng.standard_normal(fd.m)


def _residual_ss(ms, fd):
    hb = np.einsum("ip,ip->i", fd.Ht1, ms.beta)
    quad = np.einsum("ip,ipq,iq->i", ms.beta, fd.HtH, ms.beta)
    ss = (
        fd.yty
        - 2.0 * ms.beta0 * fd.ysum
        - 2.0 * np.einsum("ip,ip->i", fd.Hty, ms.beta)
        + fd.n_obs * ms.beta0**2
        + 2.0 * ms.beta0 * hb
        + quad
    )
    return np.maximum(ss, 0.0)


def update_sigma2(ms, fd, prior, rng):
    shape = 0.5 * fd.n_obs + prior.a_sigma
    scale = 0.5 * _residual_ss(ms, fd) + 1.0 / prior.b_sigma
    ms.sigma2 = _inv_gamma(rng, shape, scale)


def impute_censored(ms, fd, prior, rng):
    """Draw latent career length then game total for each active subject and
    rebuild that subject's design for the new alignment."""
    act = np.flatnonzero(fd.active)
    if act.size == 0:
        return
    d = fd.d[act]
    nu = ms.gamma[0] + ms.gamma[1] * d + ms.gamma[2] * d * d
    ms.L_imputed[act] = trunc_norm_lower(
        rng, nu, math.sqrt(ms.psi2), fd.L_obs[act]
    )
    eta = ms.alpha[0] + ms.alpha[1] * ms.L_imputed[act]
    ms.n_imputed[act] = trunc_norm_lower(
        rng, eta, math.sqrt(ms.delta2), fd.n_obs[act]
    )
    for i in act:
        fd.rebuild_design(i, ms.n_imputed[i])


# ---------------------------------------------------------------------------
# cluster- and population-level updates


def update_theta_tau(ms, fd, prior, rng):
    k = ms.n_clusters
    lab = ms.labels - 1
    n_h = np.bincount(lab, minlength=k).astype(float)
    sums = np.zeros((k, fd.P))
    np.add.at(sums, lab, ms.beta)

    prec = fd.K[None, :, :] / ms.tau2[:, None, None]
    prec = prec + (n_h / ms.lambda2)[:, None, None] * np.eye(fd.P)
    rhs = sums / ms.lambda2[:, None] + (fd.K @ ms.mu) / ms.tau2[:, None]
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as e:
        raise NumericalError("cluster curve system not positive definite") from e
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    z = rng.standard_normal((k, fd.P))
    ms.theta = mean + np.linalg.solve(np.transpose(L, (0, 2, 1)), z[..., None])[..., 0]

    dev = ms.theta - ms.mu
    quad = np.einsum("hp,pq,hq->h", dev, fd.K, dev)
    # the quadratic form runs over the P spline coefficients, so the shape
    # uses P rather than the subject count
    ms.tau2 = _inv_gamma(rng, 0.5 * fd.P + prior.a_tau, 0.5 * quad + 1.0 / prior.b_tau)


def update_lambda(ms, fd, prior, rng, block):
    """Random-walk Metropolis on each cluster's within-cluster spread, on the
    standard-deviation scale where the prior is uniform on (0, A)."""
    k = ms.n_clusters
    lab = ms.labels - 1
    n_h = np.bincount(lab, minlength=k).astype(float)
    resid = ms.beta - ms.theta[lab]
    ssb = np.bincount(lab, weights=np.einsum("ip,ip->i", resid, resid), minlength=k)

    lam = np.sqrt(ms.lambda2)
    prop = lam + block.sd * rng.standard_normal(k)
    ok = (prop > 0.0) & (prop < prior.A)
    safe = np.where(ok, prop, 1.0)
    log_acc = np.where(
        ok,
        -n_h * fd.P * np.log(safe) - 0.5 * ssb / safe**2
        + n_h * fd.P * np.log(lam) + 0.5 * ssb / lam**2,
        -np.inf,
    )
    accept = np.log(rng.random(k)) < log_acc
    lam = np.where(accept, prop, lam)
    ms.lambda2 = lam * lam
    block.proposals += k
    block.accepts += int(accept.sum())


def update_mu_globals(ms, fd, prior, rng):
    prec = fd.K * float((1.0 / ms.tau2).sum())
    prec[np.arange(fd.P), np.arange(fd.P)] += 1.0 / prior.s2_mu
    rhs = fd.K @ (ms.theta / ms.tau2[:, None]).sum(axis=0)
    L = np.linalg.cholesky(prec)
    mean = cho_solve((L, True), rhs)
    z = rng.standard_normal(fd.P)
    ms.mu = mean + solve_triangular(L, z, lower=True, trans=1)

    prec0 = fd.m / ms.sigma2_b0 + 1.0 / prior.s2_b0
    mean0 = (ms.beta0.sum() / ms.sigma2_b0) / prec0
    ms.mu_b0 = mean0 + math.sqrt(1.0 / prec0) * rng.standard_normal()

    scale = 0.5 * float(((ms.beta0 - ms.mu_b0) ** 2).sum()) + 1.0 / prior.b_b0
    ms.sigma2_b0 = float(_inv_gamma(rng, 0.5 * fd.m + prior.a_b0, scale))


def _games_loglik(ms, fd, alpha, delta2):
    eta = alpha[0] + alpha[1] * ms.L_imputed
    return float(
        -0.5 * (fd.m * (_LOG_2PI + math.log(delta2))
                + ((ms.n_imputed - eta) ** 2).sum() / delta2)
    )


def _length_loglik(ms, fd, gamma, psi2):
    nu = gamma[0] + gamma[1] * fd.d + gamma[2] * fd.d**2
    return float(
        -0.5 * (fd.m * (_LOG_2PI + math.log(psi2))
                + ((ms.L_imputed - nu) ** 2).sum() / psi2)
    )


def mh_alpha(ms, fd, prior, rng, block):
    m_a = np.asarray(prior.m_a)
    prop = ms.alpha + block.sd * block.base * rng.standard_normal(2)
    log_acc = (
        _games_loglik(ms, fd, prop, ms.delta2)
        - _games_loglik(ms, fd, ms.alpha, ms.delta2)
        - 0.5 * float(((prop - m_a) ** 2).sum() - ((ms.alpha - m_a) ** 2).sum()) / prior.s2_a
    )
    block.proposals += 1
    if math.log(rng.random()) < log_acc:
        ms.alpha = prop
        block.accepts += 1


def mh_gamma(ms, fd, prior, rng, block):
    m_g = np.asarray(prior.m_gamma)
    prop = ms.gamma + block.sd * block.base * rng.standard_normal(3)
    log_acc = (
        _length_loglik(ms, fd, prop, ms.psi2)
        - _length_loglik(ms, fd, ms.gamma, ms.psi2)
        - 0.5 * float(((prop - m_g) ** 2).sum() - ((ms.gamma - m_g) ** 2).sum()) / prior.s2_gamma
    )
    block.proposals += 1
    if math.log(rng.random()) < log_acc:
        ms.gamma = prop
        block.accepts += 1


def mh_delta2(ms, fd, prior, rng, block):
    """Log-scale random walk with the Jacobian correction."""
    prop = ms.delta2 * math.exp(block.sd * rng.standard_normal())
    log_acc = (
        _games_loglik(ms, fd, ms.alpha, prop)
        - _games_loglik(ms, fd, ms.alpha, ms.delta2)
        + float(_ig_logpdf(prop, prior.a_delta, prior.b_delta))
        - float(_ig_logpdf(ms.delta2, prior.a_delta, prior.b_delta))
        + math.log(prop) - math.log(ms.delta2)
    )
    block.proposals += 1
    if math.log(rng.random()) < log_acc:
        ms.delta2 = prop
        block.accepts += 1


def mh_psi2(ms, fd, prior, rng, block):
    prop = ms.psi2 * math.exp(block.sd * rng.standard_normal())
    log_acc = (
        _length_loglik(ms, fd, ms.gamma, prop)
        - _length_loglik(ms, fd, ms.gamma, ms.psi2)
        + float(_ig_logpdf(prop, prior.a_psi, prior.b_psi))
        - float(_ig_logpdf(ms.psi2, prior.a_psi, prior.b_psi))
        + math.log(prop) - math.log(ms.psi2)
    )
    block.proposals += 1
    if math.log(rng.random()) < log_acc:
        ms.psi2 = prop
        block.accepts += 1


def update_regression_blocks(ms, fd, prior, rng, blocks):
    """Metropolis moves for the games/length regressions and their variances.

    Imputed totals participate alongside the observed ones; variance
    parameters are proposed on the log scale with the Jacobian correction.
    """
    mh_alpha(ms, fd, prior, rng, blocks["alpha"])
    mh_gamma(ms, fd, prior, rng, blocks["gamma"])
    mh_delta2(ms, fd, prior, rng, blocks["delta2"])
    mh_psi2(ms, fd, prior, rng, blocks["psi2"])


# ---------------------------------------------------------------------------
# joint density (diagnostics and slice tests)


def log_joint(ms, fd, prior: PriorConfig) -> float:
    """Log of the augmented joint density at a state, up to the partition
    prior's normalizing constant.

    Active subjects' imputed totals enter through their Gaussian densities
    plus the truncation indicators; design matrices are synchronized to the
    state's imputations first.
    """
    fd.sync_designs(ms)
    sim = prior.similarity
    out = 0.0

    if np.any(ms.n_imputed < fd.n_obs - 1e-12) or np.any(ms.L_imputed < fd.L_obs - 1e-12):
        return -math.inf

    ss = _residual_ss(ms, fd)
    out += float(
        (-0.5 * (fd.n_obs * (_LOG_2PI + np.log(ms.sigma2)) + ss / ms.sigma2)).sum()
    )
    out += _games_loglik(ms, fd, ms.alpha, ms.delta2)
    out += _length_loglik(ms, fd, ms.gamma, ms.psi2)

    out += float(_ig_logpdf(ms.sigma2, prior.a_sigma, prior.b_sigma).sum())
    out += float(
        -0.5 * ((_LOG_2PI + math.log(ms.sigma2_b0))
                + (ms.beta0 - ms.mu_b0) ** 2 / ms.sigma2_b0).sum()
    )
    lab = ms.labels - 1
    out += float(coeff_loglik(ms.beta, ms.theta[lab], ms.lambda2[lab]).sum())

    k = ms.n_clusters
    dev = ms.theta - ms.mu
    quad = np.einsum("hp,pq,hq->h", dev, fd.K, dev)
    out += float(
        (-0.5 * (fd.P * _LOG_2PI + fd.P * np.log(ms.tau2) - fd.K_logdet + quad / ms.tau2)).sum()
    )
    out += float(_ig_logpdf(ms.tau2, prior.a_tau, prior.b_tau).sum())
    lam = np.sqrt(ms.lambda2)
    if np.any(lam >= prior.A) or np.any(lam <= 0.0):
        return -math.inf
    out += -k * math.log(prior.A)

    out += float(-0.5 * (fd.P * (_LOG_2PI + math.log(prior.s2_mu)) + (ms.mu**2).sum() / prior.s2_mu))
    out += -0.5 * (_LOG_2PI + math.log(prior.s2_b0) + ms.mu_b0**2 / prior.s2_b0)
    out += float(_ig_logpdf(ms.sigma2_b0, prior.a_b0, prior.b_b0))
    m_a = np.asarray(prior.m_a)
    out += float(-0.5 * (2 * (_LOG_2PI + math.log(prior.s2_a)) + ((ms.alpha - m_a) ** 2).sum() / prior.s2_a))
    m_g = np.asarray(prior.m_gamma)
    out += float(-0.5 * (3 * (_LOG_2PI + math.log(prior.s2_gamma)) + ((ms.gamma - m_g) ** 2).sum() / prior.s2_gamma))
    out += float(_ig_logpdf(ms.delta2, prior.a_delta, prior.b_delta))
    out += float(_ig_logpdf(ms.psi2, prior.a_psi, prior.b_psi))

    # partition prior (unnormalized)
    stats = _ClusterStats(ms, fd)
    out += float(np.log(sim.M) * k + gammaln(stats.sizes).sum())
    if sim.use_covariates:
        out += float(
            _log_similarity_continuous_stats(stats.sizes, stats.s_x, stats.s_xx, sim).sum()
        )
        a = sim.dirichlet_concentration
        for cnt in (stats.cnt_exp, stats.cnt_draft):
            out += float(
                (gammaln(3 * a) - 3 * gammaln(a)
                 + gammaln(cnt + a).sum(axis=1) - gammaln(cnt.sum(axis=1) + 3 * a)).sum()
            )
    return out


# ---------------------------------------------------------------------------
# the full sweep


class _Block:
    __slots__ = ("sd", "base", "accepts", "proposals", "_w_acc", "_w_prop")

    def __init__(self, sd, base=1.0):
        self.sd = sd
        self.base = base
        self.accepts = 0
        self.proposals = 0
        self._w_acc = 0
        self._w_prop = 0

    def adapt(self):
        dp = self.proposals - self._w_prop
        if dp < 20:
            return
        rate = (self.accepts - self._w_acc) / dp
        if rate < 0.2:
            self.sd *= 0.7
        elif rate > 0.5:
            self.sd *= 1.4
        self._w_acc = self.accepts
        self._w_prop = self.proposals

    @property
    def rate(self):
        return self.accepts / self.proposals if self.proposals else math.nan


def _make_blocks(fd, prior, mcmc):
    d_scale = max(1.0, float(np.abs(fd.d).max()))
    L_scale = max(1.0, float(np.abs(fd.L_obs).max()))
    overrides = mcmc.proposal_sd
    blocks = {
        "lambda": _Block(overrides.get("lambda", 0.1 * prior.A)),
        "alpha": _Block(overrides.get("alpha", 0.5), base=np.array([1.0, 1.0 / L_scale])),
        "gamma": _Block(
            overrides.get("gamma", 0.5),
            base=np.array([1.0, 1.0 / d_scale, 1.0 / d_scale**2]),
        ),
        "delta2": _Block(overrides.get("delta2", 0.5)),
        "psi2": _Block(overrides.get("psi2", 0.5)),
    }
    return blocks


def initial_state(
    fd: FitData, prior: PriorConfig, init_partition: str = "singletons"
) -> ModelState:
    """Empirical starting values: per-subject ridge fits, singleton clusters
    seeded at those fits (or one shared cluster), globals at prior means
    (modes for the variance components, whose shape-1 priors have no mean)."""
    m, P = fd.m, fd.P
    beta0 = fd.ysum / fd.n_obs
    beta = np.zeros((m, P))
    # the model's own penalty as the ridge matrix: coefficients without data
    # support (active players' tails) start at the random-walk continuation
    # of the informed ones rather than at zero
    ridge = fd.K + 0.1 * np.eye(P)
    for i in range(m):
        rhs = fd.Hty[i] - beta0[i] * fd.Ht1[i]
        beta[i] = np.linalg.solve(fd.HtH[i] + ridge, rhs)
    tau2_mode = (1.0 / prior.b_tau) / (prior.a_tau + 1.0)
    if init_partition == "single":
        labels = np.ones(m, dtype=int)
        theta = beta.mean(axis=0, keepdims=True)
        k = 1
    else:
        labels = np.arange(1, m + 1, dtype=int)
        theta = beta.copy()
        k = m
    ms = ModelState(
        labels=labels,
        beta0=beta0,
        beta=beta,
        sigma2=np.ones(m),
        n_imputed=fd.n_obs.copy(),
        L_imputed=fd.L_obs.copy(),
        theta=theta,
        lambda2=np.full(k, 0.25 * prior.A**2),
        tau2=np.full(k, tau2_mode),
        mu=np.zeros(P),
        mu_b0=0.0,
        sigma2_b0=(1.0 / prior.b_b0) / (prior.a_b0 + 1.0),
        alpha=np.array(prior.m_a, dtype=float),
        gamma=np.array(prior.m_gamma, dtype=float),
        delta2=(1.0 / prior.b_delta) / (prior.a_delta + 1.0),
        psi2=(1.0 / prior.b_psi) / (prior.a_psi + 1.0),
    )
    ss = _residual_ss(ms, fd)
    ms.sigma2 = np.maximum(ss / np.maximum(fd.n_obs - 1.0, 1.0), 1e-6)
    return ms


def sweep(ms, fd, prior, rng, blocks, loose_tail=False):
    update_partition(ms, fd, prior, rng, loose_tail)
    update_beta(ms, fd, prior, rng)
    update_beta0(ms, fd, prior, rng)
    update_sigma2(ms, fd, prior, rng)
    impute_censored(ms, fd, prior, rng)
    update_theta_tau(ms, fd, prior, rng)
    update_lambda(ms, fd, prior, rng, blocks["lambda"])
    update_mu_globals(ms, fd, prior, rng)
    update_regression_blocks(ms, fd, prior, rng, blocks)


def run_chain(records, prior: PriorConfig, mcmc: McmcConfig) -> Chain:
    """Run one chain and return the thinned post-burn-in samples.

    Deterministic given ``mcmc.seed``.  Raises NumericalError with the
    offending iterate's index if a non-finite state is ever produced.
    """
    import dataclasses

    fd = FitData(records, prior)
    rng = np.random.default_rng(mcmc.seed)
    ms = initial_state(fd, prior, mcmc.init_partition)
    blocks = _make_blocks(fd, prior, mcmc)

    prior_eff = prior
    anneal_until = 0
    if mcmc.anneal_spread_cap and mcmc.burnin > 0:
        anneal_until = int(mcmc.anneal_fraction * mcmc.burnin)
        if anneal_until > 0 and prior.A < 1.0:
            prior_eff = dataclasses.replace(prior, A=1.0)
            ms.lambda2 = np.full_like(ms.lambda2, 0.25)

    samples = []
    for it in range(mcmc.iterations):
        if it == anneal_until and prior_eff is not prior:
            prior_eff = prior
            ms.lambda2 = np.minimum(ms.lambda2, (0.999 * prior.A) ** 2)
        sweep(ms, fd, prior_eff, rng, blocks, loose_tail=it < anneal_until)
        if mcmc.adapt_during_burnin and it < mcmc.burnin and (it + 1) % 50 == 0:
            for b in blocks.values():
                b.adapt()
        if it >= mcmc.burnin and (it - mcmc.burnin) % mcmc.thin == mcmc.thin - 1:
            try:
                ms.validate(fd, prior)
            except NumericalError as e:
                raise NumericalError(f"iterate {it}: {e}") from e
            samples.append(ms.copy())

    return Chain(
        samples=samples,
        rng_seed=mcmc.seed,
        prior=prior,
        mcmc=mcmc,
        acceptance_rates={name: b.rate for name, b in blocks.items()},
        player_ids=[r.id for r in fd.records],
        active=fd.active.copy(),
        n_obs=fd.n_obs.copy(),
        L_obs=fd.L_obs.copy(),
        profiles=[r.profile for r in fd.records],
        sim_shift=fd.sim_shift,
        sim_scale=fd.sim_scale,
    )
