"""Data model, hyperparameter configuration, and the censored likelihood.

A subject's response series is the per-game Game Score.  Retired players
contribute Gaussian terms for their observed game total n and career length L;
active players contribute survival terms because both quantities are only
bounded below by what has been observed so far.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_ndtr

from .basis import KnotSet
from .partition import CovariateProfile, SimilarityConfig

__all__ = [
    "PlayerRecord",
    "BoxScore",
    "SubjectState",
    "ClusterState",
    "GlobalState",
    "PriorConfig",
    "game_score",
    "log_likelihood_subject",
    "ingest",
    "IngestError",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PlayerRecord:
    """One subject's observed series, censoring status and covariates.

    ``games_observed`` is the career total for a retired player and the
    current (lower-bound) count for an active one; likewise
    ``career_length_observed`` in years.
    """

    id: str
    y: np.ndarray
    active: bool
    games_observed: int
    career_length_observed: float
    profile: CovariateProfile

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "y", y)
        if self.games_observed < 1:
            raise ValueError(f"player {self.id}: games_observed must be >= 1")
        if y.size != self.games_observed:
            raise ValueError(f"player {self.id}: y length must equal games_observed")
        if self.career_length_observed <= 0:
            raise ValueError(f"player {self.id}: career length must be positive")


@dataclass(frozen=True)
class BoxScore:
    PTS: int
    FGM: int
    FGA: int
    FTM: int
    FTA: int
    OREB: int
    DREB: int
    STL: int
    AST: int
    BLK: int
    TO: int
    PF: int

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"box score field {name} must be non-negative")
        if self.FGM > self.FGA:
            raise ValueError("FGM cannot exceed FGA")
        if self.FTM > self.FTA:
            raise ValueError("FTM cannot exceed FTA")


def game_score(b: BoxScore) -> float:
    """Hollinger Game Score: a fixed linear combination of box-score counts."""
    return (
        b.PTS
        + 0.4 * b.FGM
        - 0.7 * b.FGA
        - 0.4 * (b.FTA - b.FTM)
        + 0.7 * b.OREB
        + 0.3 * b.DREB
        + b.STL
        + 0.7 * b.AST
        + 0.7 * b.BLK
        - 0.4 * b.PF
        - b.TO
    )


@dataclass
class SubjectState:
    """Per-subject parameters: intercept, spline coefficients, noise variance,
    and the (possibly imputed) career totals."""

    beta0: float
    beta: np.ndarray
    sigma2: float
    n_imputed: float
    L_imputed: float


@dataclass
class ClusterState:
    theta: np.ndarray
    lambda2: float
    tau2: float


@dataclass
class GlobalState:
    """Population-level parameters shared by all subjects."""

    mu: np.ndarray
    mu_b0: float
    sigma2_b0: float
    alpha: np.ndarray  # games-on-length regression (intercept, slope)
    gamma: np.ndarray  # length-on-draft-order quadratic coefficients
    delta2: float
    psi2: float


@dataclass(frozen=True)
class PriorConfig:
    """Every hyperparameter and structural constant of the hierarchy.

    Inverse-gamma pairs (a, b) parameterize a density proportional to
    x^-(a+1) exp(-1/(b x)); the full conditionals accumulate 1/b into the
    scale term.  Defaults follow the reference analysis where stated and are
    otherwise repo defaults.
    """

    A: float = 1.0
    a_tau: float = 1.0
    b_tau: float = 0.05
    v: float = 1.0
    s2_mu: float = 100.0**2
    s2_b0: float = 100.0**2
    a_b0: float = 1.0
    b_b0: float = 1.0
    a_sigma: float = 1.0
    b_sigma: float = 1.0
    m_a: tuple = (0.0, 76.0)
    s2_a: float = 10.0**2
    m_gamma: tuple = (0.0, 0.0, 0.0)
    s2_gamma: float = 100.0**2
    a_delta: float = 1.0
    b_delta: float = 1.0
    a_psi: float = 1.0
    b_psi: float = 1.0
    knots: KnotSet = field(default_factory=lambda: KnotSet(15, 3))
    penalty_order: int = 1
    p_aux: int = 3
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)

    def __post_init__(self):
        for name in (
            "A", "a_tau", "b_tau", "v", "s2_mu", "s2_b0", "a_b0", "b_b0",
            "a_sigma", "b_sigma", "s2_a", "s2_gamma", "a_delta", "b_delta",
            "a_psi", "b_psi",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.p_aux < 1:
            raise ValueError("p_aux must be >= 1")
        if self.penalty_order < 1:
            raise ValueError("penalty_order must be >= 1")

    @property
    def M(self) -> float:
        """Cohesion mass, delegated to the similarity config."""
        return self.similarity.M

    @property
    def dimension(self) -> int:
        return self.knots.dimension


def _eta(alpha, L):
    return alpha[0] + alpha[1] * L


def _nu(gamma, d):
    return gamma[0] + gamma[1] * d + gamma[2] * d * d


def log_likelihood_subject(
    rec: PlayerRecord, ss: SubjectState, H: np.ndarray, gs: GlobalState
) -> float:
    """Log likelihood of one subject under the censored model.

    ``H`` must be the design matrix over the subject's aligned times (built
    with the current imputed total for an active player).  Retired players
    contribute Gaussian densities for (n, L); active players contribute the
    survival probabilities of the observed lower bounds.
    """
    if H.shape[0] != rec.y.size:
        raise ValueError("design matrix rows must match the response length")
    resid = rec.y - ss.beta0 - H @ ss.beta
    out = -0.5 * (
        rec.y.size * (_LOG_2PI + math.log(ss.sigma2))
        + float(resid @ resid) / ss.sigma2
    )
    d = rec.profile.draft_order
    if rec.active:
        eta = _eta(gs.alpha, ss.L_imputed)
        nu = _nu(gs.gamma, d)
        out += float(log_ndtr(-(rec.games_observed - eta) / math.sqrt(gs.delta2)))
        out += float(log_ndtr(-(rec.career_length_observed - nu) / math.sqrt(gs.psi2)))
    else:
        eta = _eta(gs.alpha, rec.career_length_observed)
        nu = _nu(gs.gamma, d)
        out += -0.5 * (
            _LOG_2PI + math.log(gs.delta2) + (rec.games_observed - eta) ** 2 / gs.delta2
        )
        out += -0.5 * (
            _LOG_2PI
            + math.log(gs.psi2)
            + (rec.career_length_observed - nu) ** 2 / gs.psi2
        )
    return out


class IngestError(ValueError):
    """Malformed or invalid input data; carries the offending line number."""

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


_PLAYER_FIELDS = [
    "id",
    "first_game_age_years",
    "experience",
    "draft_order",
    "active",
    "career_length_years",
    "seasons_played",
]

_BOX_FIELDS = ["PTS", "FGM", "FGA", "FTM", "FTA", "OREB", "DREB", "STL", "AST", "BLK", "TO", "PF"]


def draft_category(draft_order: int) -> str:
    """Top-5 pick, rest of round one (picks 6-30), or round two."""
    if draft_order <= 5:
        return "TOP5"
    if draft_order <= 30:
        return "ROUND1"
    return "ROUND2"


def _read_rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise IngestError(path, 1, f"missing columns: {', '.join(missing)}")
        for row in reader:
            yield reader.line_num, row


def _parse(path, line, row, col, cast):
    raw = row.get(col)
    if raw is None or raw == "":
        raise IngestError(path, line, f"missing value for {col}")
    try:
        return cast(raw)
    except ValueError:
        raise IngestError(path, line, f"cannot parse {col}={raw!r}") from None


def ingest(player_csv, score_csv, apply_filters: bool = False):
    """Build PlayerRecords from a player table plus per-game scores.

    ``score_csv`` may be a box-score table (reduced to Game Score here) or a
    precomputed game-score table; the header decides.  With
    ``apply_filters=True`` players with fewer than 42 games or fewer than 3
    seasons are dropped.
    """
    meta = {}
    order = []
    for line, row in _read_rows(player_csv, _PLAYER_FIELDS):
        pid = row["id"].strip()
        if not pid:
            raise IngestError(player_csv, line, "empty player id")
        if pid in meta:
            raise IngestError(player_csv, line, f"duplicate player id {pid!r}")
        active = _parse(player_csv, line, row, "active", int)
        if active not in (0, 1):
            raise IngestError(player_csv, line, "active must be 0 or 1")
        exp = row["experience"].strip().upper()
        draft = _parse(player_csv, line, row, "draft_order", int)
        if draft < 1:
            raise IngestError(player_csv, line, "draft_order must be >= 1")
        try:
            profile = CovariateProfile(
                age=_parse(player_csv, line, row, "first_game_age_years", float),
                experience=exp,
                draft_cat=draft_category(draft),
                draft_order=draft,
            )
        except ValueError as e:
            raise IngestError(player_csv, line, str(e)) from None
        meta[pid] = {
            "profile": profile,
            "active": bool(active),
            "L": _parse(player_csv, line, row, "career_length_years", float),
            "seasons": _parse(player_csv, line, row, "seasons_played", int),
            "scores": {},
        }
        order.append(pid)

    with open(score_csv, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    precomputed = header is not None and "game_score" in header
    required = ["player_id", "game_index"] + ([] if precomputed else _BOX_FIELDS)
    for line, row in _read_rows(score_csv, required):
        pid = row["player_id"].strip()
        if pid not in meta:
            raise IngestError(score_csv, line, f"unknown player id {pid!r}")
        t = _parse(score_csv, line, row, "game_index", int)
        if t < 1:
            raise IngestError(score_csv, line, "game_index must be >= 1")
        if t in meta[pid]["scores"]:
            raise IngestError(score_csv, line, f"duplicate game {t} for player {pid!r}")
        if precomputed:
            gs = _parse(score_csv, line, row, "game_score", float)
        else:
            try:
                box = BoxScore(**{c: _parse(score_csv, line, row, c, int) for c in _BOX_FIELDS})
            except ValueError as e:
                raise IngestError(score_csv, line, str(e)) from None
            gs = game_score(box)
        meta[pid]["scores"][t] = gs

    records = []
    for pid in order:
        info = meta[pid]
        games = info["scores"]
        if not games:
            continue
        indices = sorted(games)
        if indices != list(range(1, len(indices) + 1)):
            raise IngestError(score_csv, 0, f"player {pid!r} has gaps in game indices")
        if apply_filters and (len(indices) < 42 or info["seasons"] < 3):
            continue
        records.append(
            PlayerRecord(
                id=pid,
                y=np.array([games[t] for t in indices]),
                active=info["active"],
                games_observed=len(indices),
                career_length_observed=info["L"],
                profile=info["profile"],
            )
        )
    return records


def truncate_record(rec: PlayerRecord, fraction: float) -> PlayerRecord:
    """Treat a retired record as active by hiding its final ``fraction`` of games."""
    if rec.active:
        raise ValueError("can only truncate retired records")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    keep = int(math.ceil((1.0 - fraction) * rec.games_observed))
    keep = max(1, min(keep, rec.games_observed - 1))
    return replace(
        rec,
        y=rec.y[:keep],
        active=True,
        games_observed=keep,
        career_length_observed=(1.0 - fraction) * rec.career_length_observed,
    )
