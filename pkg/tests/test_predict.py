import math

import numpy as np
import pytest
from scipy.special import logsumexp

from careercurves.basis import KnotSet
from careercurves.model import PlayerRecord, PriorConfig
from careercurves.partition import CovariateProfile, Partition, SimilarityConfig
from careercurves.predict import (
    CurveSummary,
    _AllocationContext,
    active_prediction,
    career_prediction,
    dahl_estimate,
    fitted_curve,
    peak_game,
    write_curve_csv,
    write_partition_csv,
)
from careercurves.sampler import Chain, McmcConfig, ModelState, run_chain


def make_two_group_records(seed=0, with_active=True):
    rng = np.random.default_rng(seed)
    records = []
    n = 40
    for i in range(8):
        g = i // 4
        t = np.arange(1, n + 1) / n
        f = 3.0 * np.sin(np.pi * t) if g == 0 else 2.5 - 4.0 * t  # hump vs decline
        y = 10 + f + rng.normal(0, 0.3, n)
        active = with_active and i == 7  # one active subject in the declining group
        n_obs = 28 if active else n
        records.append(
            PlayerRecord(
                id=f"p{i}",
                y=y[:n_obs],
                active=active,
                games_observed=n_obs,
                career_length_observed=2.0 if active else 3.0,
                profile=CovariateProfile(
                    age=20.0 + 3.0 * g + rng.normal(0, 0.2),
                    experience="HS" if g == 0 else "COLLEGE",
                    draft_cat="TOP5" if g == 0 else "ROUND2",
                    draft_order=4 + 30 * g,
                ),
            )
        )
    return records


@pytest.fixture(scope="module")
def fitted_chain():
    records = make_two_group_records()
    prior = PriorConfig(A=1.0, knots=KnotSet(5, 3))
    mcmc = McmcConfig(iterations=1200, burnin=500, thin=7, seed=17)
    return run_chain(records, prior, mcmc)


def test_band_ordering_invariant(fitted_chain):
    for pid in ("p0", "p5"):
        s = fitted_curve(fitted_chain, pid, grid_size=101)
        assert np.all(s.cred_lo <= s.mean + 1e-12)
        assert np.all(s.mean <= s.cred_hi + 1e-12)
        assert np.all(s.pred_lo <= s.cred_lo + 1e-12)
        assert np.all(s.cred_hi <= s.pred_hi + 1e-12)


def test_active_prediction_requires_active(fitted_chain):
    with pytest.raises(ValueError, match="fitted_curve"):
        active_prediction(fitted_chain, "p0")
    with pytest.raises(KeyError):
        active_prediction(fitted_chain, "nobody")


def test_active_prediction_declining_tail(fitted_chain):
    summary, expected_n = active_prediction(fitted_chain, "p7", grid_size=101)
    assert expected_n >= 28
    # the declining group's extrapolated segment must decline
    boundary = 28 / expected_n
    seg = summary.mean[summary.grid >= min(boundary, 0.75)]
    assert seg[-1] < seg[0]


def test_active_prediction_matches_fitted_on_observed_grid(fitted_chain):
    summary, expected_n = active_prediction(fitted_chain, "p7", grid_size=101, seed=5)
    fit = fitted_curve(fitted_chain, "p7", grid_size=101, seed=5)
    np.testing.assert_allclose(summary.mean, fit.mean, atol=1e-12)
    np.testing.assert_allclose(summary.draws, fit.draws, atol=1e-12)


def test_career_prediction_near_matching_cluster(fitted_chain):
    hump, _ = career_prediction(
        fitted_chain,
        CovariateProfile(age=20.0, experience="HS", draft_cat="TOP5", draft_order=4),
        grid_size=51,
        seed=2,
    )
    decline, _ = career_prediction(
        fitted_chain,
        CovariateProfile(age=23.0, experience="COLLEGE", draft_cat="ROUND2", draft_order=34),
        grid_size=51,
        seed=2,
    )
    z = np.linspace(0, 1, 51)
    truth_hump = 10 + 3.0 * np.sin(np.pi * z)
    truth_decline = 10 + 2.5 - 4.0 * z

    def centered_mse(a, b):
        return float(np.mean(((a - a.mean()) - (b - b.mean())) ** 2))

    assert centered_mse(hump.mean, truth_hump) < centered_mse(hump.mean, truth_decline)
    assert centered_mse(decline.mean, truth_decline) < centered_mse(decline.mean, truth_hump)


def test_career_prediction_ppm_mode_ignores_covariates():
    records = make_two_group_records(seed=3, with_active=False)
    prior = PriorConfig(
        A=1.0, knots=KnotSet(4, 3),
        similarity=SimilarityConfig(use_covariates=False),
    )
    mcmc = McmcConfig(iterations=400, burnin=200, thin=4, seed=9)
    chain = run_chain(records, prior, mcmc)
    a, _ = career_prediction(
        chain, CovariateProfile(19.0, "HS", "TOP5", 2), grid_size=31, seed=11
    )
    b, _ = career_prediction(
        chain, CovariateProfile(27.0, "INTL", "ROUND2", 45), grid_size=31, seed=11
    )
    np.testing.assert_array_equal(a.draws, b.draws)


def _chain_from_labelsets(labelsets):
    """Minimal chain whose samples differ only in partition labels."""
    m = len(labelsets[0])
    P = 4
    samples = []
    for labels in labelsets:
        labels = np.asarray(labels)
        k = labels.max()
        samples.append(
            ModelState(
                labels=labels.copy(),
                beta0=np.zeros(m),
                beta=np.zeros((m, P)),
                sigma2=np.ones(m),
                n_imputed=np.full(m, 30.0),
                L_imputed=np.full(m, 3.0),
                theta=np.zeros((k, P)),
                lambda2=np.full(k, 0.25),
                tau2=np.ones(k),
                mu=np.zeros(P),
                mu_b0=0.0,
                sigma2_b0=1.0,
                alpha=np.array([0.0, 10.0]),
                gamma=np.array([3.0, 0.0, 0.0]),
                delta2=1.0,
                psi2=1.0,
            )
        )
    profiles = [CovariateProfile(21.0, "COLLEGE", "ROUND1", 10)] * m
    return Chain(
        samples=samples,
        rng_seed=0,
        prior=PriorConfig(knots=KnotSet(1, 2)),
        mcmc=McmcConfig(iterations=10, burnin=5, thin=1),
        acceptance_rates={},
        player_ids=[f"x{i}" for i in range(m)],
        active=np.zeros(m, dtype=bool),
        n_obs=np.full(m, 30.0),
        L_obs=np.full(m, 3.0),
        profiles=profiles,
    )


def test_dahl_all_identical():
    chain = _chain_from_labelsets([[1, 1, 2], [1, 1, 2], [1, 1, 2]])
    est = dahl_estimate(chain)
    np.testing.assert_array_equal(est.partition.labels, [1, 1, 2])
    assert est.ls_score == pytest.approx(0.0)


def test_dahl_two_candidate_tie():
    # two iterates {{1,2},{3}} and {{1},{2,3}}: each has score 1.0, the
    # earliest wins
    chain = _chain_from_labelsets([[1, 1, 2], [1, 2, 2]])
    est = dahl_estimate(chain)
    assert est.sample_index == 0
    np.testing.assert_array_equal(est.partition.labels, [1, 1, 2])
    assert est.ls_score == pytest.approx(1.0)


def test_dahl_matches_bruteforce():
    rng = np.random.default_rng(23)
    labelsets = []
    for _ in range(10):
        raw = rng.integers(1, 4, size=5)
        # relabel into canonical gap-free form
        _, canon = np.unique(raw, return_inverse=True)
        labelsets.append(canon + 1)
    chain = _chain_from_labelsets(labelsets)
    est = dahl_estimate(chain)

    labels = np.stack(labelsets)
    pbar = np.mean(
        [row[:, None] == row[None, :] for row in labels], axis=0
    ).astype(float)
    scores = [
        float((((row[:, None] == row[None, :]).astype(float) - pbar) ** 2).sum())
        for row in labels
    ]
    best = int(np.argmin(scores))
    assert est.sample_index == best
    assert est.ls_score == pytest.approx(scores[best])


def test_dahl_empty_chain():
    chain = _chain_from_labelsets([[1, 1]])
    chain.samples = []
    with pytest.raises(ValueError):
        dahl_estimate(chain)


def test_peak_game_monotone_and_symmetric():
    grid = np.linspace(0, 1, 101)
    rising = CurveSummary(grid, grid.copy(), grid, grid, grid, grid, draws=None)
    peak, spread = peak_game(rising, 500)
    assert peak == 500
    assert math.isnan(spread)

    hump_mean = np.sin(np.pi * grid)
    draws = np.tile(hump_mean, (40, 1))
    hump = CurveSummary(grid, hump_mean, hump_mean, hump_mean, hump_mean, hump_mean, draws)
    peak, spread = peak_game(hump, 800)
    assert peak == 400
    assert spread == pytest.approx(0.0)


def test_allocation_frequencies_match_exact_weights(fitted_chain):
    # freeze one iterate; the career allocation frequencies over many rng
    # draws must match the predictive weights computed offline
    state = fitted_chain.samples[0]
    frozen = Chain(
        samples=[state],
        rng_seed=0,
        prior=fitted_chain.prior,
        mcmc=fitted_chain.mcmc,
        acceptance_rates={},
        player_ids=fitted_chain.player_ids,
        active=fitted_chain.active,
        n_obs=fitted_chain.n_obs,
        L_obs=fitted_chain.L_obs,
        profiles=fitted_chain.profiles,
        sim_shift=fitted_chain.sim_shift,
        sim_scale=fitted_chain.sim_scale,
    )
    profile = CovariateProfile(age=20.5, experience="HS", draft_cat="TOP5", draft_order=3)
    ctx = _AllocationContext(frozen)
    x, e, d = ctx.new_profile_values(profile, frozen)
    logw = ctx.logweights(state, x, e, d)
    probs = np.exp(logw - logsumexp(logw))

    # and the offline route through the public partition-module operation
    from careercurves.partition import predictive_allocation_logweights

    pub = predictive_allocation_logweights(
        Partition(state.labels), frozen.profiles, profile, frozen.prior.similarity
    )
    np.testing.assert_allclose(pub, logw, atol=1e-10)

    rng = np.random.default_rng(31)
    counts = np.zeros(probs.size)
    reps = 20_000
    from careercurves.sampler import _draw_categorical

    for _ in range(reps):
        counts[_draw_categorical(rng, logw)] += 1
    freq = counts / reps
    for got, want in zip(freq, probs):
        se = math.sqrt(max(want * (1 - want), 1e-12) / reps)
        assert got == pytest.approx(want, abs=max(3 * se, 1e-3))


def test_curve_csv_roundtrip(tmp_path, fitted_chain):
    s = fitted_curve(fitted_chain, "p0", grid_size=21)
    path = tmp_path / "curve.csv"
    write_curve_csv(s, path)
    data = np.genfromtxt(path, delimiter=",", names=True)
    np.testing.assert_allclose(data["grid"], s.grid)
    np.testing.assert_allclose(data["mean"], s.mean)
    est = dahl_estimate(fitted_chain)
    write_partition_csv(est, fitted_chain.player_ids, tmp_path / "part.csv")
    rows = (tmp_path / "part.csv").read_text().strip().splitlines()
    assert rows[0] == "player_id,cluster_label"
    assert len(rows) == 1 + len(fitted_chain.player_ids)
