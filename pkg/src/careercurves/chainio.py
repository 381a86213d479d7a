"""Chain files: a versioned JSON header line, then one JSON record per iterate.

The header embeds the prior/MCMC configuration and the per-subject facts
(ids, censoring bounds, covariates) so prediction can run from the file alone
without re-reading the raw data.  Serialization is deterministic: identical
chains produce byte-identical files.
"""

from __future__ import annotations

import json

import numpy as np

from .basis import KnotSet
from .model import PriorConfig
from .partition import CovariateProfile, SimilarityConfig
from .sampler import Chain, McmcConfig, ModelState

__all__ = ["write_chain", "dump_chain", "read_chain", "FORMAT_NAME", "FORMAT_VERSION"]

FORMAT_NAME = "careercurves-chain"
FORMAT_VERSION = 1


def _prior_to_dict(prior: PriorConfig) -> dict:
    sim = prior.similarity
    return {
        "A": prior.A, "a_tau": prior.a_tau, "b_tau": prior.b_tau, "v": prior.v,
        "s2_mu": prior.s2_mu, "s2_b0": prior.s2_b0, "a_b0": prior.a_b0,
        "b_b0": prior.b_b0, "a_sigma": prior.a_sigma, "b_sigma": prior.b_sigma,
        "m_a": list(prior.m_a), "s2_a": prior.s2_a,
        "m_gamma": list(prior.m_gamma), "s2_gamma": prior.s2_gamma,
        "a_delta": prior.a_delta, "b_delta": prior.b_delta,
        "a_psi": prior.a_psi, "b_psi": prior.b_psi,
        "inner_knots": prior.knots.inner_count, "degree": prior.knots.degree,
        "penalty_order": prior.penalty_order, "p_aux": prior.p_aux,
        "similarity": {
            "gaussian_prior_mean_variance": sim.gaussian_prior_mean_variance,
            "dirichlet_concentration": sim.dirichlet_concentration,
            "M": sim.M,
            "use_covariates": sim.use_covariates,
            "standardize_age": sim.standardize_age,
        },
    }


def _prior_from_dict(d: dict) -> PriorConfig:
    sim = SimilarityConfig(**d["similarity"])
    return PriorConfig(
        A=d["A"], a_tau=d["a_tau"], b_tau=d["b_tau"], v=d["v"], s2_mu=d["s2_mu"],
        s2_b0=d["s2_b0"], a_b0=d["a_b0"], b_b0=d["b_b0"], a_sigma=d["a_sigma"],
        b_sigma=d["b_sigma"], m_a=tuple(d["m_a"]), s2_a=d["s2_a"],
        m_gamma=tuple(d["m_gamma"]), s2_gamma=d["s2_gamma"], a_delta=d["a_delta"],
        b_delta=d["b_delta"], a_psi=d["a_psi"], b_psi=d["b_psi"],
        knots=KnotSet(d["inner_knots"], d["degree"]),
        penalty_order=d["penalty_order"], p_aux=d["p_aux"], similarity=sim,
    )


def _mcmc_to_dict(mcmc: McmcConfig) -> dict:
    return {
        "iterations": mcmc.iterations, "burnin": mcmc.burnin, "thin": mcmc.thin,
        "seed": mcmc.seed, "adapt_during_burnin": mcmc.adapt_during_burnin,
        "proposal_sd": dict(mcmc.proposal_sd),
        "init_partition": mcmc.init_partition,
        "anneal_spread_cap": mcmc.anneal_spread_cap,
    }


def _state_to_dict(ms: ModelState) -> dict:
    return {
        "labels": ms.labels.tolist(),
        "beta0": ms.beta0.tolist(),
        "beta": ms.beta.tolist(),
        "sigma2": ms.sigma2.tolist(),
        "n_imputed": ms.n_imputed.tolist(),
        "L_imputed": ms.L_imputed.tolist(),
        "theta": ms.theta.tolist(),
        "lambda2": ms.lambda2.tolist(),
        "tau2": ms.tau2.tolist(),
        "mu": ms.mu.tolist(),
        "mu_b0": ms.mu_b0,
        "sigma2_b0": ms.sigma2_b0,
        "alpha": ms.alpha.tolist(),
        "gamma": ms.gamma.tolist(),
        "delta2": ms.delta2,
        "psi2": ms.psi2,
    }


def _state_from_dict(d: dict) -> ModelState:
    return ModelState(
        labels=np.array(d["labels"], dtype=int),
        beta0=np.array(d["beta0"]),
        beta=np.array(d["beta"]),
        sigma2=np.array(d["sigma2"]),
        n_imputed=np.array(d["n_imputed"]),
        L_imputed=np.array(d["L_imputed"]),
        theta=np.array(d["theta"]),
        lambda2=np.array(d["lambda2"]),
        tau2=np.array(d["tau2"]),
        mu=np.array(d["mu"]),
        mu_b0=float(d["mu_b0"]),
        sigma2_b0=float(d["sigma2_b0"]),
        alpha=np.array(d["alpha"]),
        gamma=np.array(d["gamma"]),
        delta2=float(d["delta2"]),
        psi2=float(d["psi2"]),
    )


def write_chain(chain: Chain, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dump_chain(chain, fh)


def dump_chain(chain: Chain, fh) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "seed": chain.rng_seed,
        "n_samples": len(chain.samples),
        "prior": _prior_to_dict(chain.prior),
        "mcmc": _mcmc_to_dict(chain.mcmc),
        "acceptance_rates": chain.acceptance_rates,
        "sim_shift": chain.sim_shift,
        "sim_scale": chain.sim_scale,
        "players": [
            {
                "id": pid,
                "active": bool(act),
                "games_observed": float(n),
                "career_length_observed": float(L),
                "age": p.age,
                "experience": p.experience,
                "draft_cat": p.draft_cat,
                "draft_order": p.draft_order,
            }
            for pid, act, n, L, p in zip(
                chain.player_ids, chain.active, chain.n_obs, chain.L_obs, chain.profiles
            )
        ],
    }
    fh.write(json.dumps(header, sort_keys=True) + "\n")
    for ms in chain.samples:
        fh.write(json.dumps(_state_to_dict(ms), sort_keys=True) + "\n")


def read_chain(path) -> Chain:
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise ValueError(f"{path}: empty chain file")
        header = json.loads(header_line)
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: not a chain file")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported chain version {header.get('version')}")
        samples = [_state_from_dict(json.loads(line)) for line in fh if line.strip()]
    players = header["players"]
    if len(samples) != header["n_samples"]:
        raise ValueError(f"{path}: truncated chain file")
    return Chain(
        samples=samples,
        rng_seed=header["seed"],
        prior=_prior_from_dict(header["prior"]),
        mcmc=McmcConfig(**header["mcmc"]),
        acceptance_rates=header["acceptance_rates"],
        player_ids=[p["id"] for p in players],
        active=np.array([p["active"] for p in players], dtype=bool),
        n_obs=np.array([p["games_observed"] for p in players]),
        L_obs=np.array([p["career_length_observed"] for p in players]),
        profiles=[
            CovariateProfile(p["age"], p["experience"], p["draft_cat"], p["draft_order"])
            for p in players
        ],
        sim_shift=header["sim_shift"],
        sim_scale=header["sim_scale"],
    )
