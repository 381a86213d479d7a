import math

import numpy as np
import pytest
from scipy.stats import norm

from careercurves.basis import KnotSet, aligned_times, design_matrix
from careercurves.model import (
    BoxScore,
    GlobalState,
    IngestError,
    PlayerRecord,
    PriorConfig,
    SubjectState,
    draft_category,
    game_score,
    ingest,
    log_likelihood_subject,
    truncate_record,
)
from careercurves.partition import CovariateProfile

WORKED_BOX = dict(
    PTS=10, FGM=4, FGA=8, FTM=2, FTA=2, OREB=1, DREB=3, STL=1, AST=2, BLK=0, TO=2, PF=3
)


def make_record(active=False, n=12, L=4.0, draft=7, seed=0):
    rng = np.random.default_rng(seed)
    return PlayerRecord(
        id="p1",
        y=rng.normal(8.0, 3.0, size=n),
        active=active,
        games_observed=n,
        career_length_observed=L,
        profile=CovariateProfile(21.0, "COLLEGE", draft_category(draft), draft),
    )


def make_globals(P, alpha=(0.0, 76.0), gamma=(2.0, -0.05, 0.0), delta2=30.0, psi2=2.0):
    return GlobalState(
        mu=np.zeros(P),
        mu_b0=8.0,
        sigma2_b0=4.0,
        alpha=np.array(alpha),
        gamma=np.array(gamma),
        delta2=delta2,
        psi2=psi2,
    )


def test_game_score_zero():
    assert game_score(BoxScore(*([0] * 12))) == 0.0


def test_game_score_worked_example():
    assert game_score(BoxScore(**WORKED_BOX)) == pytest.approx(6.8)


def test_game_score_linearity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        fga = int(rng.integers(0, 20))
        fta = int(rng.integers(0, 10))
        a = BoxScore(
            PTS=int(rng.integers(0, 40)), FGM=int(rng.integers(0, fga + 1)), FGA=fga,
            FTM=int(rng.integers(0, fta + 1)), FTA=fta, OREB=int(rng.integers(0, 6)),
            DREB=int(rng.integers(0, 10)), STL=int(rng.integers(0, 5)),
            AST=int(rng.integers(0, 12)), BLK=int(rng.integers(0, 5)),
            TO=int(rng.integers(0, 6)), PF=int(rng.integers(0, 6)),
        )
        b = BoxScore(**WORKED_BOX)
        summed = BoxScore(
            **{f: getattr(a, f) + getattr(b, f) for f in a.__dataclass_fields__}
        )
        assert game_score(summed) == pytest.approx(game_score(a) + game_score(b))


def test_box_score_validation():
    with pytest.raises(ValueError):
        BoxScore(PTS=2, FGM=3, FGA=2, FTM=0, FTA=0, OREB=0, DREB=0, STL=0, AST=0,
                 BLK=0, TO=0, PF=0)
    with pytest.raises(ValueError):
        BoxScore(PTS=-1, FGM=0, FGA=0, FTM=0, FTA=0, OREB=0, DREB=0, STL=0, AST=0,
                 BLK=0, TO=0, PF=0)


def test_loglik_constant_response():
    ks = KnotSet(4, 3)
    P = ks.dimension
    n = 10
    rec = make_record(n=n)
    rec = PlayerRecord(
        id=rec.id, y=np.full(n, 5.0), active=False, games_observed=n,
        career_length_observed=rec.career_length_observed, profile=rec.profile,
    )
    H = design_matrix(aligned_times(n, n), ks)
    ss = SubjectState(beta0=5.0, beta=np.zeros(P), sigma2=1.0,
                      n_imputed=n, L_imputed=rec.career_length_observed)
    gs = make_globals(P)
    got = log_likelihood_subject(rec, ss, H, gs)
    gaussian_part = -0.5 * n * math.log(2 * math.pi)
    n_part = norm.logpdf(n, gs.alpha[0] + gs.alpha[1] * rec.career_length_observed,
                         math.sqrt(gs.delta2))
    d = rec.profile.draft_order
    L_part = norm.logpdf(rec.career_length_observed,
                         gs.gamma[0] + gs.gamma[1] * d + gs.gamma[2] * d * d,
                         math.sqrt(gs.psi2))
    assert got == pytest.approx(gaussian_part + n_part + L_part, abs=1e-10)


def test_loglik_active_censoring_at_mean():
    ks = KnotSet(4, 3)
    P = ks.dimension
    n = 8
    rec = make_record(active=True, n=n, L=3.0)
    # choose alpha so the games bound sits exactly at eta: the censoring term
    # contributes log(1/2)
    gs = make_globals(P, alpha=(float(n), 0.0), gamma=(-50.0, 0.0, 0.0))
    ss = SubjectState(beta0=0.0, beta=np.zeros(P), sigma2=2.0,
                      n_imputed=n + 5.0, L_imputed=4.0)
    H = design_matrix(aligned_times(ss.n_imputed, n), ks)
    got = log_likelihood_subject(rec, ss, H, gs)
    resid = rec.y
    gauss = -0.5 * (n * math.log(2 * math.pi * 2.0) + np.sum(resid**2) / 2.0)
    # eta uses the imputed career length for an active player
    assert gs.alpha[0] + gs.alpha[1] * ss.L_imputed == n
    n_term = math.log(0.5)
    d = rec.profile.draft_order
    nu = gs.gamma[0] + gs.gamma[1] * d + gs.gamma[2] * d * d
    L_term = norm.logsf(rec.career_length_observed, nu, math.sqrt(gs.psi2))
    assert got == pytest.approx(gauss + n_term + L_term, abs=1e-10)


def test_loglik_matches_slow_oracle():
    rng = np.random.default_rng(21)
    ks = KnotSet(5, 3)
    P = ks.dimension
    for active in (False, True):
        n = 15
        rec = make_record(active=active, n=n, L=5.0, seed=4)
        n_imp = n + 20.0 if active else float(n)
        ss = SubjectState(
            beta0=rng.normal(8, 1), beta=rng.normal(0, 1, P),
            sigma2=float(rng.uniform(0.5, 3)), n_imputed=n_imp,
            L_imputed=7.0 if active else rec.career_length_observed,
        )
        gs = make_globals(P, alpha=(5.0, 70.0), gamma=(9.0, -0.2, 0.002))
        H = design_matrix(aligned_times(ss.n_imputed, n), ks)
        got = log_likelihood_subject(rec, ss, H, gs)
        # slow per-point summation, scipy densities only
        want = 0.0
        for t in range(n):
            mean_t = ss.beta0 + float(H[t] @ ss.beta)
            want += norm.logpdf(rec.y[t], mean_t, math.sqrt(ss.sigma2))
        d = rec.profile.draft_order
        nu = gs.gamma[0] + gs.gamma[1] * d + gs.gamma[2] * d * d
        if active:
            eta = gs.alpha[0] + gs.alpha[1] * ss.L_imputed
            want += norm.logsf(rec.games_observed, eta, math.sqrt(gs.delta2))
            want += norm.logsf(rec.career_length_observed, nu, math.sqrt(gs.psi2))
        else:
            eta = gs.alpha[0] + gs.alpha[1] * rec.career_length_observed
            want += norm.logpdf(rec.games_observed, eta, math.sqrt(gs.delta2))
            want += norm.logpdf(rec.career_length_observed, nu, math.sqrt(gs.psi2))
        assert got == pytest.approx(want, abs=1e-10)


def test_loglik_dimension_mismatch():
    ks = KnotSet(4, 3)
    rec = make_record(n=10)
    H = design_matrix(aligned_times(12, 12), ks)
    ss = SubjectState(0.0, np.zeros(ks.dimension), 1.0, 10, 4.0)
    with pytest.raises(ValueError):
        log_likelihood_subject(rec, ss, H, make_globals(ks.dimension))


def test_prior_config_defaults():
    cfg = PriorConfig()
    assert cfg.A == 1.0
    assert cfg.a_tau == 1.0 and cfg.b_tau == 0.05
    assert cfg.m_a == (0.0, 76.0)
    assert cfg.M == 1.0
    assert cfg.dimension == cfg.knots.dimension
    with pytest.raises(ValueError):
        PriorConfig(A=-1.0)


def test_draft_category():
    assert draft_category(1) == "TOP5"
    assert draft_category(5) == "TOP5"
    assert draft_category(6) == "ROUND1"
    assert draft_category(30) == "ROUND1"
    assert draft_category(31) == "ROUND2"


PLAYERS_HEADER = "id,first_game_age_years,experience,draft_order,active,career_length_years,seasons_played\n"
BOX_HEADER = "player_id,game_index,PTS,FGM,FGA,FTM,FTA,OREB,DREB,STL,AST,BLK,TO,PF\n"


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_ingest_empty_boxscores(tmp_path):
    players = write(tmp_path / "players.csv", PLAYERS_HEADER + "a,21.0,COLLEGE,7,0,4.0,4\n")
    box = write(tmp_path / "box.csv", BOX_HEADER)
    assert ingest(players, box) == []


def test_ingest_three_games(tmp_path):
    players = write(tmp_path / "players.csv", PLAYERS_HEADER + "a,21.0,COLLEGE,7,0,4.0,4\n")
    rows = "".join(f"a,{t},10,4,8,2,2,1,3,1,2,0,2,3\n" for t in (1, 2, 3))
    box = write(tmp_path / "box.csv", BOX_HEADER + rows)
    recs = ingest(players, box)
    assert len(recs) == 1
    assert recs[0].games_observed == 3
    np.testing.assert_allclose(recs[0].y, [6.8, 6.8, 6.8])
    assert recs[0].profile.draft_cat == "ROUND1"


def test_ingest_gamescore_table(tmp_path):
    players = write(tmp_path / "players.csv", PLAYERS_HEADER + "a,21.0,HS,3,1,2.5,3\n")
    gs = write(tmp_path / "gs.csv", "player_id,game_index,game_score\na,1,5.5\na,2,7.0\n")
    recs = ingest(players, gs)
    assert recs[0].active is True
    np.testing.assert_allclose(recs[0].y, [5.5, 7.0])


def test_ingest_eligibility_filter(tmp_path):
    players = write(
        tmp_path / "players.csv",
        PLAYERS_HEADER + "short,21.0,COLLEGE,7,0,4.0,4\nlong,22.0,COLLEGE,12,0,4.0,4\n",
    )
    rows = "".join(f"short,{t},5.0\n" for t in range(1, 42))
    rows += "".join(f"long,{t},5.0\n" for t in range(1, 43))
    gs = write(tmp_path / "gs.csv", "player_id,game_index,game_score\n" + rows)
    recs = ingest(players, gs, apply_filters=True)
    assert [r.id for r in recs] == ["long"]
    # without the flag both stay
    assert len(ingest(players, gs)) == 2


def test_ingest_validation_errors(tmp_path):
    players = write(tmp_path / "players.csv", PLAYERS_HEADER + "a,21.0,COLLEGE,7,0,4.0,4\n")
    bad = write(tmp_path / "box.csv", BOX_HEADER + "a,1,10,9,8,2,2,1,3,1,2,0,2,3\n")
    with pytest.raises(IngestError) as ei:
        ingest(players, bad)
    assert ":2:" in str(ei.value)  # line number of the offending row
    malformed = write(tmp_path / "box2.csv", BOX_HEADER + "a,1,xx,4,8,2,2,1,3,1,2,0,2,3\n")
    with pytest.raises(IngestError) as ei:
        ingest(players, malformed)
    assert "PTS" in str(ei.value)


def test_truncate_record():
    rec = make_record(n=40)
    cut = truncate_record(rec, 0.25)
    assert cut.active is True
    assert cut.games_observed == 30
    np.testing.assert_array_equal(cut.y, rec.y[:30])
    assert cut.career_length_observed == pytest.approx(3.0)
    with pytest.raises(ValueError):
        truncate_record(cut, 0.25)
