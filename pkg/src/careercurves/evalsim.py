"""Synthetic data generation, evaluation metrics, and competitor models.

The six committed group curves stand in for typical career archetypes (the
benchmark design needs fixed closed forms): a flat role-player arc, rise then
hold, an early peak with a long fade, a mid-career hump, a late slump that
recovers, and a steady decline.  A generator self-check keeps them pairwise
L2-separated after centering.

Competitors: SP fits every subject independently with a penalized-spline
prior; hSP centers that prior on a shared mean curve; SPDP shares one
coefficient vector inside each cluster of a Dirichlet-process mixture; HPPM
is the full hierarchical model with the covariate-free partition prior;
POLY5 replaces the spline with a per-subject quintic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .basis import bspline_basis, penalty_matrix
from .model import PlayerRecord, PriorConfig, truncate_record
from .partition import (
    CovariateProfile,
    _log_similarity_categorical_stats,
    _log_similarity_continuous_stats,
)
from .predict import _AllocationContext, dahl_estimate
from .sampler import Chain, McmcConfig, _inv_gamma, run_chain, trunc_norm_lower

__all__ = [
    "GROUP_CURVES",
    "SyntheticSpec",
    "SyntheticTruth",
    "MetricReport",
    "generate",
    "center",
    "mispe",
    "r2",
    "lsd",
    "fit_competitor",
    "career_draw_matrix",
    "bench_cell",
    "holdout_protocol",
    "MODELS",
]

MODELS = ("HPPMx", "HPPM", "SP", "hSP", "SPDP", "POLY5")


def _flat_role_player(z):
    return -2.2 + 1.1 * np.cos(2.0 * np.pi * z)


def _rise_and_hold(z):
    return -2.9 + 5.2 * (1.0 - np.exp(-6.0 * z))


def _early_peak_long_fade(z):
    return 56.0 * z * np.exp(-4.5 * z) - 2.0


def _mid_career_hump(z):
    return 3.6 * np.sin(np.pi * z) - 1.2


def _late_dip_recover(z):
    return 0.8 - 3.6 * np.exp(-0.5 * ((z - 0.72) / 0.14) ** 2)


def _gradual_decline(z):
    return 1.8 - 4.2 * z


GROUP_CURVES = (
    _flat_role_player,
    _rise_and_hold,
    _early_peak_long_fade,
    _mid_career_hump,
    _late_dip_recover,
    _gradual_decline,
)

_EXPERIENCE_CELLS = ("HS", "COLLEGE")
_DRAFT_CELLS = ("TOP5", "ROUND1", "ROUND2")


@dataclass(frozen=True)
class SyntheticSpec:
    """Design of one synthetic dataset: m subjects split evenly over the six
    group curves, n games each, noise variance w2."""

    m: int = 60
    n: int = 50
    w2: float = 0.1
    seed: int = 0
    group_curves: tuple = GROUP_CURVES

    def __post_init__(self):
        if self.m % len(self.group_curves) != 0:
            raise ValueError("m must be divisible by the number of groups")
        if self.n < 2 or self.w2 < 0:
            raise ValueError("need n >= 2 and w2 >= 0")


@dataclass(frozen=True)
class SyntheticTruth:
    groups: np.ndarray          # (m,) 0-based group index
    b0: np.ndarray              # (m,) random intercepts
    group_curves: tuple


@dataclass
class MetricReport:
    mispe: float = math.nan
    r2: float = math.nan
    lsd: float = math.nan
    k_hat: float = math.nan
    mse: float = math.nan
    mspe: float = math.nan


def _draw_profile(rng, group):
    x_star = group + 1.0 + rng.normal(0.0, math.sqrt(0.1))
    draft_order = int(rng.integers(1, 59))
    return CovariateProfile(
        age=float(x_star),
        experience=_EXPERIENCE_CELLS[group % 2],
        draft_cat=_DRAFT_CELLS[group % 3],
        draft_order=draft_order,
    )


def generate(spec: SyntheticSpec):
    """Synthetic records plus the ground truth used for scoring.

    Responses follow b0 + f_group(t/n) + noise; the two categorical
    covariates cross to identify the six groups and the continuous one
    concentrates near the group index.  All records are retired with fully
    observed careers; career lengths follow a draft-order trend so the
    censored-imputation machinery has signal when records are truncated.
    """
    rng = np.random.default_rng(spec.seed)
    groups = np.repeat(np.arange(6), spec.m // 6)
    t = np.arange(1, spec.n + 1) / spec.n
    records, b0s = [], []
    for i in range(spec.m):
        g = int(groups[i])
        profile = _draw_profile(rng, g)
        b0 = 10.0 + rng.normal(0.0, math.sqrt(2.0))
        y = b0 + spec.group_curves[g](t) + rng.normal(0.0, math.sqrt(spec.w2), spec.n)
        L = max(1.0, 11.0 - 0.15 * profile.draft_order + rng.normal(0.0, 0.5))
        records.append(
            PlayerRecord(
                id=f"s{i:03d}",
                y=y,
                active=False,
                games_observed=spec.n,
                career_length_observed=L,
                profile=profile,
            )
        )
        b0s.append(b0)
    return records, SyntheticTruth(groups, np.array(b0s), spec.group_curves)


def curve_separation(group_curves=GROUP_CURVES, grid_size: int = 2001) -> float:
    """Minimum pairwise centered L2 separation of the committed curves."""
    z = np.linspace(0.0, 1.0, grid_size)
    vals = [f(z) - f(z).mean() for f in group_curves]
    out = math.inf
    for i in range(len(vals)):
        for j in range(i + 1, len(vals)):
            out = min(out, float(np.trapezoid((vals[i] - vals[j]) ** 2, z)))
    return out


# ---------------------------------------------------------------------------
# metrics


def center(values):
    values = np.asarray(values, dtype=float)
    return values - values.mean()


def mispe(fitted, truth, z) -> float:
    """Quadrature of the squared curve difference over the time grid.

    Inputs must already be centered; the weight on point t is z[t+1] - z[t].
    """
    z = np.asarray(z, dtype=float)
    if z.size < 2:
        raise ValueError("need at least two grid points")
    diff2 = (np.asarray(fitted, dtype=float) - np.asarray(truth, dtype=float)) ** 2
    return float(np.sum(np.diff(z) * diff2[:-1]))


def r2(fitted, y) -> float:
    y = np.asarray(y, dtype=float)
    num = float(((np.asarray(fitted) - y) ** 2).sum())
    den = float(((y - y.mean()) ** 2).sum())
    return 1.0 - num / den


def lsd(fitted_curve) -> float:
    """Standard deviation of lag-one differences with the n-3 divisor."""
    f = np.asarray(fitted_curve, dtype=float)
    n = f.size
    if n < 4:
        raise ValueError("need at least four curve values")
    lags = np.diff(f)
    return float(math.sqrt(((lags - lags.mean()) ** 2).sum() / (n - 3)))


# ---------------------------------------------------------------------------
# competitor fits


@dataclass(frozen=True)
class GibbsConfig:
    """Shared settings for the non-partition competitor samplers."""

    iterations: int = 2000
    burnin: int = 700
    thin: int = 10
    seed: int = 0
    s2_beta: float = 100.0**2


class CompetitorFit:
    """Posterior draws and point fits for SP, hSP, SPDP, or POLY5."""

    def __init__(self, model, records, z_list, prior, draws):
        self.model = model
        self.records = records
        self.z = z_list
        self.prior = prior
        self.draws = draws
        self._H = [
            bspline_basis(z, prior.knots) if model != "POLY5" else _poly_design(z)
            for z in z_list
        ]

    def fitted_values(self, i) -> np.ndarray:
        """Posterior-mean fitted response on subject i's observed grid."""
        H = self._H[i]
        out = np.zeros(H.shape[0])
        for d in self.draws:
            out += d["c"][i] + H @ _subject_coef(d, i)
        return out / len(self.draws)

    def predict_at(self, i, z_new) -> np.ndarray:
        """Posterior-mean prediction for subject i at new aligned times."""
        H = bspline_basis(z_new, self.prior.knots) if self.model != "POLY5" else _poly_design(z_new)
        out = np.zeros(len(z_new))
        for d in self.draws:
            out += d["c"][i] + H @ _subject_coef(d, i)
        return out / len(self.draws)

    def k_hat(self) -> float:
        if self.model != "SPDP":
            return math.nan
        labels = np.stack([d["labels"] for d in self.draws])
        S, m = labels.shape
        pbar = np.zeros((m, m))
        for row in labels:
            pbar += row[:, None] == row[None, :]
        pbar /= S
        best, best_k = math.inf, math.nan
        for row in labels:
            assoc = (row[:, None] == row[None, :]).astype(float)
            score = float(((assoc - pbar) ** 2).sum())
            if score < best - 1e-12:
                best, best_k = score, float(row.max())
        return best_k


def _subject_coef(draw, i):
    if "labels" in draw:  # SPDP point-mass sharing
        return draw["theta_star"][draw["labels"][i] - 1]
    return draw["theta"][i]


def _poly_design(z):
    z = np.asarray(z, dtype=float)
    return np.vander(z, 6, increasing=True)


def _covariate_design(records):
    X = np.zeros((len(records), 6))
    for i, r in enumerate(records):
        p = r.profile
        X[i] = [
            1.0,
            1.0 if p.experience_index == 1 else 0.0,
            1.0 if p.experience_index == 2 else 0.0,
            1.0 if p.draft_index == 1 else 0.0,
            1.0 if p.draft_index == 2 else 0.0,
            p.age,
        ]
    return X


def _batched_normal_solve(prec, rhs, rng):
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    z = rng.standard_normal(rhs.shape)
    return mean + np.linalg.solve(np.transpose(L, (0, 2, 1)), z[..., None])[..., 0]


def fit_competitor(model, records, prior: PriorConfig, mcmc, z_list=None):
    """Fit one of the comparison models and return its posterior draws.

    ``model`` is one of MODELS.  HPPMx/HPPM run the full hierarchical chain
    (HPPM with similarity off) and return a Chain; the rest run their own
    conjugate Gibbs samplers and return a CompetitorFit.  ``z_list`` supplies
    each subject's aligned times for the non-hierarchical models; by default
    retired records use t/n over their observed games.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
    if model in ("HPPMx", "HPPM"):
        if model == "HPPM":
            prior = replace(prior, similarity=replace(prior.similarity, use_covariates=False))
        return run_chain(records, prior, mcmc)

    if z_list is None:
        z_list = [np.arange(1, r.games_observed + 1) / r.games_observed for r in records]
    if model == "POLY5":
        return _fit_poly5(records, z_list, prior, mcmc)
    return _fit_spline_family(model, records, z_list, prior, mcmc)


def _prepare(records, z_list, design_fn):
    m = len(records)
    H = [design_fn(z) for z in z_list]
    P = H[0].shape[1]
    y = [np.asarray(r.y, dtype=float) for r in records]
    caches = {
        "HtH": np.stack([h.T @ h for h in H]),
        "Hty": np.stack([h.T @ v for h, v in zip(H, y)]),
        "Ht1": np.stack([h.sum(axis=0) for h in H]),
        "yty": np.array([float(v @ v) for v in y]),
        "ysum": np.array([float(v.sum()) for v in y]),
        "n": np.array([v.size for v in y], dtype=float),
    }
    return m, P, H, y, caches


def _ssr(caches, c, coef):
    hb = np.einsum("ip,ip->i", caches["Ht1"], coef)
    quad = np.einsum("ip,ipq,iq->i", coef, caches["HtH"], coef)
    ss = (
        caches["yty"]
        - 2.0 * c * caches["ysum"]
        - 2.0 * np.einsum("ip,ip->i", caches["Hty"], coef)
        + caches["n"] * c**2
        + 2.0 * c * hb
        + quad
    )
    return np.maximum(ss, 0.0)


def _update_beta_x(X, caches, c_coef, sigma2, s2_beta, rng):
    """Conjugate draw of the global covariate coefficients.

    ``c_coef`` must be the per-subject fitted-curve column sums Ht1'theta_i.
    """
    q = X.shape[1]
    w = caches["n"] / sigma2
    prec = (X.T * w) @ X + np.eye(q) / s2_beta
    resid_sum = (caches["ysum"] - c_coef) / sigma2
    rhs = X.T @ resid_sum
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs)
    return mean + solve_triangular(L, rng.standard_normal(q), lower=True, trans=1)


def _fit_spline_family(model, records, z_list, prior, mcmc):
    """Gibbs sampler for SP (independent subjects), hSP (shared mean curve),
    and SPDP (point-mass coefficient sharing within DP clusters)."""
    rng = np.random.default_rng(mcmc.seed)
    m, P, H, y, caches = _prepare(records, z_list, lambda z: bspline_basis(z, prior.knots))
    K = penalty_matrix(P, prior.penalty_order, prior.v)
    K_chol = np.linalg.cholesky(K)
    X = _covariate_design(records)
    s2_beta = 100.0**2
    eyeP = np.eye(P)

    beta_x = np.linalg.lstsq(X, caches["ysum"] / caches["n"], rcond=None)[0]
    c = X @ beta_x
    theta = np.stack(
        [np.linalg.solve(caches["HtH"][i] + eyeP, caches["Hty"][i] - c[i] * caches["Ht1"][i])
         for i in range(m)]
    )
    sigma2 = np.maximum(_ssr(caches, c, theta) / np.maximum(caches["n"] - 1, 1), 1e-6)
    tau2 = (1.0 / prior.b_tau) / (prior.a_tau + 1.0)
    mu = np.zeros(P)
    labels = np.arange(1, m + 1)
    theta_star = theta.copy()

    draws = []
    for it in range(mcmc.iterations):
        c = X @ beta_x
        if model == "SPDP":
            labels, theta_star = _spdp_allocate(
                labels, theta_star, caches, c, sigma2, tau2, K_chol, prior, rng
            )
            k = theta_star.shape[0]
            # shared coefficients per cluster
            prec = np.zeros((k, P, P))
            rhs = np.zeros((k, P))
            for i in range(m):
                h = labels[i] - 1
                prec[h] += caches["HtH"][i] / sigma2[i]
                rhs[h] += (caches["Hty"][i] - c[i] * caches["Ht1"][i]) / sigma2[i]
            prec += K[None, :, :] / tau2
            theta_star = _batched_normal_solve(prec, rhs, rng)
            theta = theta_star[labels - 1]
            quad = np.einsum("hp,pq,hq->h", theta_star, K, theta_star).sum()
            shape = 0.5 * k * P + prior.a_tau
        else:
            anchor = mu if model == "hSP" else 0.0
            prec = caches["HtH"] / sigma2[:, None, None] + K[None, :, :] / tau2
            rhs = (caches["Hty"] - c[:, None] * caches["Ht1"]) / sigma2[:, None]
            if model == "hSP":
                rhs = rhs + (K @ mu) / tau2
            theta = _batched_normal_solve(prec, rhs, rng)
            dev = theta - anchor
            quad = np.einsum("ip,pq,iq->i", dev, K, dev).sum()
            shape = 0.5 * m * P + prior.a_tau
            if model == "hSP":
                prec_mu = m * K / tau2 + np.eye(P) / s2_beta
                rhs_mu = K @ theta.sum(axis=0) / tau2
                Lmu = np.linalg.cholesky(prec_mu)
                mu = np.linalg.solve(prec_mu, rhs_mu) + solve_triangular(
                    Lmu, rng.standard_normal(P), lower=True, trans=1
                )
        tau2 = float(_inv_gamma(rng, shape, 0.5 * quad + 1.0 / prior.b_tau))
        coef = theta_star[labels - 1] if model == "SPDP" else theta
        c_coef = np.einsum("ip,ip->i", caches["Ht1"], coef)
        beta_x = _update_beta_x(X, caches, c_coef, sigma2, s2_beta, rng)
        c = X @ beta_x
        sigma2 = _inv_gamma(
            rng, 0.5 * caches["n"] + prior.a_sigma, 0.5 * _ssr(caches, c, coef) + 1.0 / prior.b_sigma
        )
        if it >= mcmc.burnin and (it - mcmc.burnin) % mcmc.thin == mcmc.thin - 1:
            d = {"c": c.copy(), "beta_x": beta_x.copy(), "tau2": tau2, "sigma2": sigma2.copy()}
            if model == "SPDP":
                d["labels"] = labels.copy()
                d["theta_star"] = theta_star.copy()
            else:
                d["theta"] = theta.copy()
                if model == "hSP":
                    d["mu"] = mu.copy()
            draws.append(d)
    return CompetitorFit(model, records, z_list, prior, draws)


def _spdp_allocate(labels, theta_star, caches, c, sigma2, tau2, K_chol, prior, rng):
    """Auxiliary-cluster urn pass where cluster members share coefficients."""
    m = labels.size
    P = theta_star.shape[1]
    M = prior.similarity.M
    p_aux = prior.p_aux
    labels = labels.copy()
    for i in range(m):
        cur = labels[i] - 1
        sizes = np.bincount(labels - 1, minlength=theta_star.shape[0]).astype(float)
        sizes[cur] -= 1.0
        reuse = None
        if sizes[cur] == 0.0:
            reuse = theta_star[cur].copy()
            theta_star = np.delete(theta_star, cur, axis=0)
            sizes = np.delete(sizes, cur)
            labels[labels > cur + 1] -= 1
        k = theta_star.shape[0]
        n_fresh = p_aux - (1 if reuse is not None else 0)
        z = rng.standard_normal((n_fresh, P))
        fresh = math.sqrt(tau2) * solve_triangular(K_chol, z.T, lower=True, trans=1).T
        aux = np.vstack([reuse[None, :], fresh]) if reuse is not None else fresh
        cand = np.vstack([theta_star, aux])
        # data likelihood of y_i under each candidate coefficient vector
        ss = (
            caches["yty"][i]
            - 2.0 * c[i] * caches["ysum"][i]
            + caches["n"][i] * c[i] ** 2
            - 2.0 * cand @ (caches["Hty"][i] - c[i] * caches["Ht1"][i])
            + np.einsum("hp,pq,hq->h", cand, caches["HtH"][i], cand)
        )
        loglik = -0.5 * ss / sigma2[i]
        logw = np.concatenate(
            [loglik[:k] + np.log(sizes), loglik[k:] + math.log(M) - math.log(p_aux)]
        )
        logw -= logw.max()
        w = np.exp(logw)
        h = int(np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right").clip(0, w.size - 1))
        if h < k:
            labels[i] = h + 1
        else:
            theta_star = np.vstack([theta_star, cand[h][None, :]])
            labels[i] = k + 1
    return labels, theta_star


def _fit_poly5(records, z_list, prior, mcmc):
    rng = np.random.default_rng(mcmc.seed)
    m, P, V, y, caches = _prepare(records, z_list, _poly_design)
    X = _covariate_design(records)
    s2 = 100.0**2

    beta_x = np.linalg.lstsq(X, caches["ysum"] / caches["n"], rcond=None)[0]
    c = X @ beta_x
    gamma = np.stack(
        [np.linalg.solve(caches["HtH"][i] + np.eye(P), caches["Hty"][i] - c[i] * caches["Ht1"][i])
         for i in range(m)]
    )
    sigma2 = np.maximum(_ssr(caches, c, gamma) / np.maximum(caches["n"] - 1, 1), 1e-6)
    tau2 = np.full(P, 1.0)
    mu = gamma.mean(axis=0)

    draws = []
    for it in range(mcmc.iterations):
        c = X @ beta_x
        prec = caches["HtH"] / sigma2[:, None, None] + np.diag(1.0 / tau2)[None, :, :]
        rhs = (caches["Hty"] - c[:, None] * caches["Ht1"]) / sigma2[:, None] + mu / tau2
        gamma = _batched_normal_solve(prec, rhs, rng)
        prec_mu = m / tau2 + 1.0 / s2
        mean_mu = (gamma.sum(axis=0) / tau2) / prec_mu
        mu = mean_mu + rng.standard_normal(P) / np.sqrt(prec_mu)
        tau2 = _inv_gamma(
            rng,
            0.5 * m + prior.a_tau,
            0.5 * ((gamma - mu) ** 2).sum(axis=0) + 1.0 / prior.b_tau,
        )
        c_coef = np.einsum("ip,ip->i", caches["Ht1"], gamma)
        beta_x = _update_beta_x(X, caches, c_coef, sigma2, s2, rng)
        c = X @ beta_x
        sigma2 = _inv_gamma(
            rng, 0.5 * caches["n"] + prior.a_sigma, 0.5 * _ssr(caches, c, gamma) + 1.0 / prior.b_sigma
        )
        if it >= mcmc.burnin and (it - mcmc.burnin) % mcmc.thin == mcmc.thin - 1:
            draws.append(
                {"c": c.copy(), "beta_x": beta_x.copy(), "theta": gamma.copy(),
                 "mu": mu.copy(), "tau2": tau2.copy(), "sigma2": sigma2.copy()}
            )
    return CompetitorFit("POLY5", records, z_list, prior, draws)


# ---------------------------------------------------------------------------
# career prediction draws for out-of-sample scoring


def career_draw_matrix(fit, profiles, z_grid, seed=0):
    """Per-iterate career-curve draws for new subjects.

    Returns an array (S, J, G): one curve draw per stored iterate per new
    subject, on the supplied aligned-time grid.
    """
    rng = np.random.default_rng(seed)
    if isinstance(fit, Chain):
        return _career_draws_hppmx(fit, profiles, z_grid, rng)
    J = len(profiles)
    G = len(z_grid)
    H = bspline_basis(z_grid, fit.prior.knots) if fit.model != "POLY5" else _poly_design(z_grid)
    X = _covariate_design_profiles(profiles)
    P = H.shape[1]
    K = penalty_matrix(P, fit.prior.penalty_order, fit.prior.v) if fit.model != "POLY5" else None
    K_chol = np.linalg.cholesky(K) if K is not None else None
    out = np.empty((len(fit.draws), J, G))
    for s_idx, d in enumerate(fit.draws):
        cx = X @ d["beta_x"]
        if fit.model == "POLY5":
            coef = d["mu"] + rng.standard_normal((J, P)) * np.sqrt(d["tau2"])
        elif fit.model == "SPDP":
            sizes = np.bincount(d["labels"] - 1).astype(float)
            M = fit.prior.similarity.M
            probs = np.append(sizes, M) / (sizes.sum() + M)
            picks = rng.choice(probs.size, size=J, p=probs)
            coef = np.empty((J, P))
            for j, h in enumerate(picks):
                if h < sizes.size:
                    coef[j] = d["theta_star"][h]
                else:
                    z = rng.standard_normal(P)
                    coef[j] = math.sqrt(d["tau2"]) * solve_triangular(
                        K_chol, z, lower=True, trans=1
                    )
        else:
            anchor = d.get("mu", np.zeros(P))
            z = rng.standard_normal((J, P))
            dev = solve_triangular(K_chol, z.T, lower=True, trans=1).T
            coef = anchor + math.sqrt(d["tau2"]) * dev
        out[s_idx] = cx[:, None] + coef @ H.T
    return out


def _covariate_design_profiles(profiles):
    X = np.zeros((len(profiles), 6))
    for i, p in enumerate(profiles):
        X[i] = [
            1.0,
            1.0 if p.experience_index == 1 else 0.0,
            1.0 if p.experience_index == 2 else 0.0,
            1.0 if p.draft_index == 1 else 0.0,
            1.0 if p.draft_index == 2 else 0.0,
            p.age,
        ]
    return X


def _career_draws_hppmx(chain: Chain, profiles, z_grid, rng):
    ctx = _AllocationContext(chain)
    J = len(profiles)
    H = bspline_basis(z_grid, chain.prior.knots)
    P = ctx.P
    prior = chain.prior
    xs = np.array([(p.age - chain.sim_shift) / chain.sim_scale for p in profiles])
    es = np.array([p.experience_index for p in profiles])
    ds = np.array([p.draft_index for p in profiles])
    sim = prior.similarity
    out = np.empty((len(chain.samples), J, len(z_grid)))
    for s_idx, state in enumerate(chain.samples):
        k = state.n_clusters
        lab = state.labels - 1
        sizes = np.bincount(lab, minlength=k).astype(float)
        logw = np.tile(np.log(sizes)[:, None], (1, J))
        new_w = np.full(J, math.log(sim.M) - 0.0)
        if sim.use_covariates:
            s_x = np.bincount(lab, weights=ctx.sim_x, minlength=k)
            s_xx = np.bincount(lab, weights=ctx.sim_x**2, minlength=k)
            logw += _log_similarity_continuous_stats(
                sizes[:, None] + 1.0, s_x[:, None] + xs[None, :],
                s_xx[:, None] + xs[None, :] ** 2, sim,
            ) - _log_similarity_continuous_stats(sizes, s_x, s_xx, sim)[:, None]
            a = sim.dirichlet_concentration
            for cat_idx, new_idx in ((ctx.exp_idx, es), (ctx.draft_idx, ds)):
                cnt = np.zeros((k, 3))
                np.add.at(cnt, (lab, cat_idx), 1.0)
                logw += gammaln(cnt[:, new_idx] + 1.0 + a) - gammaln(cnt[:, new_idx] + a)
                logw -= (gammaln(sizes + 1.0 + 3 * a) - gammaln(sizes + 3 * a))[:, None]
            new_w += _log_similarity_continuous_stats(1.0, xs, xs * xs, sim)
            single = float(
                gammaln(3 * a) - gammaln(a) + gammaln(1.0 + a) - gammaln(1.0 + 3 * a)
            )
            new_w += 2.0 * single
        allw = np.vstack([logw, new_w[None, :]])
        gum = rng.gumbel(size=allw.shape)
        picks = np.argmax(allw + gum, axis=0)
        theta_sel = np.empty((J, P))
        lam2_sel = np.empty(J)
        fresh = picks == k
        if np.any(fresh):
            nf = int(fresh.sum())
            tau2_new = _inv_gamma(rng, prior.a_tau, 1.0 / prior.b_tau, size=nf)
            lam_new = rng.uniform(0.0, prior.A, size=nf)
            z = rng.standard_normal((nf, P))
            dev = solve_triangular(ctx.K_chol, z.T, lower=True, trans=1).T
            theta_sel[fresh] = state.mu + np.sqrt(tau2_new)[:, None] * dev
            lam2_sel[fresh] = lam_new**2
        if np.any(~fresh):
            theta_sel[~fresh] = state.theta[picks[~fresh]]
            lam2_sel[~fresh] = state.lambda2[picks[~fresh]]
        beta_new = theta_sel + np.sqrt(lam2_sel)[:, None] * rng.standard_normal((J, P))
        beta0_new = state.mu_b0 + math.sqrt(state.sigma2_b0) * rng.standard_normal(J)
        out[s_idx] = beta0_new[:, None] + beta_new @ H.T
    return out


# ---------------------------------------------------------------------------
# benchmark harness


def _hppmx_fitted_means(chain: Chain, records):
    """Posterior-mean fitted values per subject, conditioning active subjects
    on their expected imputed totals."""
    S = len(chain.samples)
    n_hat = np.mean(np.stack([s.n_imputed for s in chain.samples]), axis=0)
    out = []
    for i, rec in enumerate(records):
        t = np.arange(1, rec.games_observed + 1)
        z = np.minimum(t / max(n_hat[i], rec.games_observed), 1.0)
        H = bspline_basis(z, chain.prior.knots)
        acc = np.zeros(rec.games_observed)
        for s in chain.samples:
            acc += s.beta0[i] + H @ s.beta[i]
        out.append(acc / S)
    return out, n_hat


def evaluate_fit(fit, records, truth: SyntheticTruth, n_out=100, out_seed=1234):
    """Score one fitted model on a synthetic dataset: out-of-sample MISPE,
    within-sample R-squared and lag-one smoothness, and the estimated cluster
    count where the model clusters."""
    rng = np.random.default_rng(out_seed)
    n = records[0].games_observed
    z = np.arange(1, n + 1) / n
    groups_out = np.array([rng.integers(0, 6) for _ in range(n_out)])
    profiles_out = [_draw_profile(rng, int(g)) for g in groups_out]
    truths_out = np.stack([center(truth.group_curves[g](z)) for g in groups_out])

    draws = career_draw_matrix(fit, profiles_out, z, seed=out_seed + 1)
    draws = draws - draws.mean(axis=2, keepdims=True)
    dz = np.diff(z)
    sq = (draws - truths_out[None, :, :]) ** 2
    mispe_js = (sq[:, :, :-1] * dz[None, None, :]).sum(axis=2).mean(axis=0)

    if isinstance(fit, Chain):
        fitted, _ = _hppmx_fitted_means(fit, records)
        k_hat = float(dahl_estimate(fit).partition.n_clusters)
    else:
        fitted = [fit.fitted_values(i) for i in range(len(records))]
        k_hat = fit.k_hat()
    r2s = [r2(fitted[i], records[i].y) for i in range(len(records))]
    lsds = [lsd(fitted[i]) for i in range(len(records))]
    return MetricReport(
        mispe=float(np.mean(mispe_js)),
        r2=float(np.mean(r2s)),
        lsd=float(np.mean(lsds)),
        k_hat=k_hat,
    )


def bench_cell(
    models,
    n_datasets=5,
    m=60,
    n=50,
    w2=0.1,
    A=1.0,
    inner_knots=5,
    iterations=3000,
    burnin=1000,
    thin=10,
    seed=0,
    n_out=100,
    prior: PriorConfig | None = None,
):
    """Fit the requested models to replicate synthetic datasets and return
    {model: (per-dataset MetricReports)}."""
    from .basis import KnotSet

    base = prior if prior is not None else PriorConfig()
    base = replace(base, A=A, knots=KnotSet(inner_knots, base.knots.degree))
    results = {model: [] for model in models}
    for d in range(n_datasets):
        spec = SyntheticSpec(m=m, n=n, w2=w2, seed=seed + 1000 * d)
        records, truth = generate(spec)
        for model in models:
            mcmc = McmcConfig(iterations=iterations, burnin=burnin, thin=thin, seed=seed + d)
            fit = fit_competitor(model, records, base, mcmc)
            results[model].append(
                evaluate_fit(fit, records, truth, n_out=n_out, out_seed=seed + 7000 + d)
            )
    return results


def bench_rows(results, w2, A, inner_knots, n):
    """Flatten bench results into report rows (one per model and metric)."""
    rows = []
    for model, reports in results.items():
        for metric in ("mispe", "r2", "lsd", "k_hat"):
            vals = np.array([getattr(rep, metric) for rep in reports], dtype=float)
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                continue
            mc_se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            rows.append(
                {
                    "model": model, "w2": w2, "A": A, "knots": inner_knots, "n": n,
                    "metric": metric, "value": float(vals.mean()), "mc_se": mc_se,
                }
            )
    return rows


def holdout_protocol(
    records,
    fraction=0.25,
    k=50,
    seed=0,
    models=("HPPMx", "SP"),
    prior: PriorConfig | None = None,
    mcmc: McmcConfig | None = None,
):
    """Truncate the final games of k random retired subjects, refit, and
    report fit (MSE, observed games) against prediction (MSPE, hidden tail).

    The hierarchical model treats truncated subjects as active and imputes
    their totals; the non-hierarchical competitors are aligned on the true
    totals, which they cannot estimate.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    retired = [i for i, r in enumerate(records) if not r.active and r.games_observed >= 8]
    if k > len(retired):
        raise ValueError("not enough retired subjects to truncate")
    chosen = sorted(rng.choice(len(retired), size=k, replace=False).tolist())
    chosen = [retired[j] for j in chosen]
    modified = list(records)
    for i in chosen:
        modified[i] = truncate_record(records[i], fraction)

    prior = prior if prior is not None else PriorConfig()
    mcmc = mcmc if mcmc is not None else McmcConfig(iterations=3000, burnin=1000, thin=10, seed=seed)
    out = {}
    for model in models:
        if model in ("HPPMx", "HPPM"):
            chain = fit_competitor(model, modified, prior, mcmc)
            fitted, n_hat = _hppmx_fitted_means(chain, modified)
            mse = np.mean(
                [np.mean((fitted[i] - modified[i].y) ** 2) for i in range(len(modified))]
            )
            mspes = []
            for i in chosen:
                full = records[i]
                tail_t = np.arange(modified[i].games_observed + 1, full.games_observed + 1)
                z_tail = np.minimum(tail_t / max(n_hat[i], modified[i].games_observed), 1.0)
                H = bspline_basis(z_tail, chain.prior.knots)
                pred = np.zeros(tail_t.size)
                for s in chain.samples:
                    pred += s.beta0[i] + H @ s.beta[i]
                pred /= len(chain.samples)
                mspes.append(np.mean((pred - full.y[modified[i].games_observed:]) ** 2))
        else:
            # oracle alignment: competitors have no model for the unseen total
            z_list = [
                np.arange(1, modified[i].games_observed + 1) / records[i].games_observed
                for i in range(len(modified))
            ]
            fit = fit_competitor(model, modified, prior, mcmc, z_list=z_list)
            mse = np.mean(
                [np.mean((fit.fitted_values(i) - modified[i].y) ** 2) for i in range(len(modified))]
            )
            mspes = []
            for i in chosen:
                full = records[i]
                tail_t = np.arange(modified[i].games_observed + 1, full.games_observed + 1)
                z_tail = tail_t / full.games_observed
                pred = fit.predict_at(i, z_tail)
                mspes.append(np.mean((pred - full.y[modified[i].games_observed:]) ** 2))
        out[model] = MetricReport(mse=float(mse), mspe=float(np.mean(mspes)))
    return out
