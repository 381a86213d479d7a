"""Command-line entry points tying the library into reproducible runs.

Subcommands: gamescore, fit, predict, simulate, bench, summarize.
Exit codes: 0 success, 1 I/O failure, 2 validation failure, 3 numerical
failure.  Every subcommand is deterministic given --seed; output files are
written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np

from .basis import KnotSet
from .chainio import dump_chain, read_chain
from .evalsim import (
    MODELS,
    SyntheticSpec,
    bench_cell,
    bench_rows,
    generate,
    holdout_protocol,
)
from .model import BoxScore, IngestError, PriorConfig, game_score, ingest
from .partition import CovariateProfile, SimilarityConfig
from .predict import (
    active_prediction,
    career_prediction,
    dahl_estimate,
    fitted_curve,
    write_curve_csv,
    write_partition_csv,
)
from .sampler import McmcConfig, NumericalError, run_chain

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

_BOX_FIELDS = ["PTS", "FGM", "FGA", "FTM", "FTA", "OREB", "DREB", "STL", "AST", "BLK", "TO", "PF"]


class _CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


def _atomic_write(path, write_fn):
    """Write via a temp file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config(path):
    """Layered key/value config: [prior], [similarity], [knots], [mcmc]."""
    prior_kw, sim_kw, mcmc_kw = {}, {}, {}
    knots_kw = {}
    if path:
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise _CliError(EXIT_IO, f"cannot read config file {path}")
        float_fields = {
            "A", "a_tau", "b_tau", "v", "s2_mu", "s2_b0", "a_b0", "b_b0", "a_sigma",
            "b_sigma", "s2_a", "s2_gamma", "a_delta", "b_delta", "a_psi", "b_psi",
        }
        if cp.has_section("prior"):
            for key, raw in cp.items("prior"):
                if key in float_fields:
                    prior_kw[key] = float(raw)
                elif key == "m_a":
                    prior_kw["m_a"] = tuple(float(v) for v in raw.split(","))
                elif key == "m_gamma":
                    prior_kw["m_gamma"] = tuple(float(v) for v in raw.split(","))
                elif key in ("penalty_order", "p_aux"):
                    prior_kw[key] = int(raw)
                else:
                    raise _CliError(EXIT_VALIDATION, f"unknown prior option {key!r}")
        if cp.has_section("similarity"):
            for key, raw in cp.items("similarity"):
                if key in ("gaussian_prior_mean_variance", "dirichlet_concentration", "m"):
                    sim_kw["M" if key == "m" else key] = float(raw)
                elif key in ("use_covariates", "standardize_age"):
                    sim_kw[key] = raw.strip().lower() in ("1", "true", "yes")
                else:
                    raise _CliError(EXIT_VALIDATION, f"unknown similarity option {key!r}")
        if cp.has_section("knots"):
            for key, raw in cp.items("knots"):
                if key in ("inner_count", "degree"):
                    knots_kw[key] = int(raw)
                else:
                    raise _CliError(EXIT_VALIDATION, f"unknown knots option {key!r}")
        if cp.has_section("mcmc"):
            for key, raw in cp.items("mcmc"):
                if key in ("iterations", "burnin", "thin", "seed"):
                    mcmc_kw[key] = int(raw)
                elif key in ("adapt_during_burnin", "anneal_spread_cap"):
                    mcmc_kw[key] = raw.strip().lower() in ("1", "true", "yes")
                elif key == "init_partition":
                    mcmc_kw[key] = raw.strip()
                elif key == "anneal_fraction":
                    mcmc_kw[key] = float(raw)
                else:
                    raise _CliError(EXIT_VALIDATION, f"unknown mcmc option {key!r}")
    return prior_kw, sim_kw, knots_kw, mcmc_kw


def _build_configs(args):
    try:
        prior_kw, sim_kw, knots_kw, mcmc_kw = _load_config(getattr(args, "config", None))
        if getattr(args, "A", None) is not None:
            prior_kw["A"] = args.A
        if getattr(args, "knots", None) is not None:
            knots_kw["inner_count"] = args.knots
        if knots_kw:
            prior_kw["knots"] = KnotSet(
                knots_kw.get("inner_count", 15), knots_kw.get("degree", 3)
            )
        if getattr(args, "ppm", False):
            sim_kw["use_covariates"] = False
        if sim_kw:
            prior_kw["similarity"] = SimilarityConfig(**sim_kw)
        prior = PriorConfig(**prior_kw)
        for name in ("iterations", "burnin", "thin", "seed"):
            v = getattr(args, name, None)
            if v is not None:
                mcmc_kw[name] = v
        mcmc = McmcConfig(**mcmc_kw)
        return prior, mcmc
    except (ValueError, TypeError) as e:
        raise _CliError(EXIT_VALIDATION, f"invalid configuration: {e}") from e


def _out_path(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def cmd_gamescore(args):
    """Stream box-score rows to Game Score rows."""
    try:
        fh_in = open(args.boxscores, newline="", encoding="utf-8")
    except OSError as e:
        raise _CliError(EXIT_IO, str(e)) from e
    rows = []
    with fh_in:
        reader = csv.DictReader(fh_in)
        if reader.fieldnames is not None:
            missing = [c for c in ["player_id", "game_index"] + _BOX_FIELDS
                       if c not in reader.fieldnames]
            if missing:
                raise _CliError(
                    EXIT_VALIDATION, f"{args.boxscores}: missing columns {', '.join(missing)}"
                )
            for row in reader:
                line = reader.line_num
                try:
                    box = BoxScore(**{c: int(row[c]) for c in _BOX_FIELDS})
                except (TypeError, ValueError) as e:
                    raise _CliError(
                        EXIT_VALIDATION, f"{args.boxscores}:{line}: {e}"
                    ) from e
                rows.append((row["player_id"], row["game_index"], game_score(box)))

    def write(fh):
        w = csv.writer(fh)
        w.writerow(["player_id", "game_index", "game_score"])
        for pid, t, gs in rows:
            w.writerow([pid, t, repr(float(gs))])

    _atomic_write(args.output, write)
    return EXIT_OK


def _ingest(args):
    try:
        records = ingest(args.players, args.scores, apply_filters=args.filter)
    except IngestError as e:
        raise _CliError(EXIT_VALIDATION, str(e)) from e
    except OSError as e:
        raise _CliError(EXIT_IO, str(e)) from e
    if not records:
        raise _CliError(EXIT_VALIDATION, "no usable player records after ingestion")
    return records


def cmd_fit(args):
    records = _ingest(args)
    prior, mcmc = _build_configs(args)
    try:
        chain = run_chain(records, prior, mcmc)
    except NumericalError as e:
        raise _CliError(EXIT_NUMERICAL, str(e)) from e
    chain_path = _out_path(args, "chain.ndjson")
    _atomic_write(chain_path, lambda fh: dump_chain(chain, fh))

    est = dahl_estimate(chain)
    write_partition_csv(est, chain.player_ids, _out_path(args, "partition.csv"))

    def write_fitted(fh):
        w = csv.writer(fh)
        w.writerow(["player_id", "grid", "mean", "cred_lo", "cred_hi", "pred_lo", "pred_hi"])
        for pid in chain.player_ids:
            s = fitted_curve(chain, pid, grid_size=args.grid_size, seed=mcmc.seed)
            for t in range(s.grid.size):
                w.writerow([pid] + [repr(float(v[t])) for v in
                                    (s.grid, s.mean, s.cred_lo, s.cred_hi, s.pred_lo, s.pred_hi)])

    _atomic_write(_out_path(args, "fitted_curves.csv"), write_fitted)

    def write_clusters(fh):
        w = csv.writer(fh)
        w.writerow(["cluster", "grid", "mean"])
        grid = np.linspace(0.0, 1.0, args.grid_size)
        for label in range(1, est.partition.n_clusters + 1):
            ids = [chain.player_ids[i] for i in est.partition.members(label)]
            acc = np.zeros(grid.size)
            for pid in ids:
                acc += fitted_curve(chain, pid, grid_size=args.grid_size, seed=mcmc.seed).mean
            acc /= len(ids)
            for t in range(grid.size):
                w.writerow([label, repr(float(grid[t])), repr(float(acc[t]))])

    _atomic_write(_out_path(args, "cluster_curves.csv"), write_clusters)
    print(f"wrote {chain_path} ({len(chain)} samples, k_hat={est.partition.n_clusters})")
    return EXIT_OK


def cmd_predict(args):
    try:
        chain = read_chain(args.chain)
    except OSError as e:
        raise _CliError(EXIT_IO, str(e)) from e
    except ValueError as e:
        raise _CliError(EXIT_VALIDATION, str(e)) from e
    if args.mode == "active":
        try:
            summary, expected_n = active_prediction(
                chain, args.player, grid_size=args.grid_size, seed=args.seed or 0
            )
        except KeyError as e:
            raise _CliError(EXIT_VALIDATION, str(e)) from e
        except ValueError as e:
            raise _CliError(EXIT_VALIDATION, str(e)) from e
        _atomic_write(args.output, lambda fh: _write_curve(fh, summary))
        print(f"expected career games: {expected_n}")
    else:
        try:
            profile = CovariateProfile(
                age=args.age,
                experience=args.experience.upper(),
                draft_cat=args.draft.upper(),
                draft_order={"TOP5": 3, "ROUND1": 15, "ROUND2": 40}[args.draft.upper()],
            )
        except (KeyError, ValueError) as e:
            raise _CliError(EXIT_VALIDATION, f"invalid covariates: {e}") from e
        summary, games = career_prediction(
            chain, profile, grid_size=args.grid_size, seed=args.seed or 0
        )
        _atomic_write(args.output, lambda fh: _write_curve(fh, summary))
        print(f"expected career games (cluster average): {games:.1f}")
    return EXIT_OK


def _write_curve(fh, summary):
    w = csv.writer(fh)
    w.writerow(["grid", "mean", "cred_lo", "cred_hi", "pred_lo", "pred_hi"])
    for t in range(summary.grid.size):
        w.writerow(
            [repr(float(v[t])) for v in
             (summary.grid, summary.mean, summary.cred_lo, summary.cred_hi,
              summary.pred_lo, summary.pred_hi)]
        )


def cmd_simulate(args):
    try:
        spec = SyntheticSpec(m=args.m, n=args.n, w2=args.w2, seed=args.seed or 0)
    except ValueError as e:
        raise _CliError(EXIT_VALIDATION, str(e)) from e
    records, truth = generate(spec)

    def write_players(fh):
        w = csv.writer(fh)
        w.writerow(["id", "first_game_age_years", "experience", "draft_order",
                    "active", "career_length_years", "seasons_played"])
        for r in records:
            w.writerow([r.id, repr(r.profile.age), r.profile.experience,
                        r.profile.draft_order, int(r.active),
                        repr(r.career_length_observed), 4])

    def write_scores(fh):
        w = csv.writer(fh)
        w.writerow(["player_id", "game_index", "game_score"])
        for r in records:
            for t, v in enumerate(r.y, start=1):
                w.writerow([r.id, t, repr(float(v))])

    def write_truth(fh):
        w = csv.writer(fh)
        w.writerow(["id", "group", "b0"])
        for r, g, b in zip(records, truth.groups, truth.b0):
            w.writerow([r.id, int(g), repr(float(b))])

    _atomic_write(_out_path(args, "players.csv"), write_players)
    _atomic_write(_out_path(args, "gamescores.csv"), write_scores)
    _atomic_write(_out_path(args, "truth.csv"), write_truth)
    print(f"wrote {args.m} synthetic careers to {args.out_dir}")
    return EXIT_OK


def cmd_bench(args):
    models = [m.strip() for m in args.models.split(",")]
    for m in models:
        if m not in MODELS:
            raise _CliError(EXIT_VALIDATION, f"unknown model {m!r}; choose from {MODELS}")
    rows = []
    cells = [(A, kn, w2, n)
             for A in args.A for kn in args.knots for w2 in args.w2 for n in args.n]
    seed = args.seed or 0
    if args.threads > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.threads) as ex:
            futures = [
                ex.submit(_bench_one_cell, models, args.datasets, cell, args.iterations,
                          args.burnin, args.thin, seed)
                for cell in cells
            ]
            for fut in futures:
                rows.extend(fut.result())
    else:
        for cell in cells:
            rows.extend(_bench_one_cell(models, args.datasets, cell, args.iterations,
                                        args.burnin, args.thin, seed))

    def write(fh):
        w = csv.writer(fh)
        w.writerow(["model", "w2", "A", "knots", "n", "metric", "value", "mc_se"])
        for r in rows:
            w.writerow([r["model"], repr(float(r["w2"])), repr(float(r["A"])), r["knots"],
                        r["n"], r["metric"], repr(float(r["value"])), repr(float(r["mc_se"]))])

    _atomic_write(args.output, write)
    print(f"wrote {len(rows)} benchmark rows to {args.output}")
    return EXIT_OK


def _bench_one_cell(models, n_datasets, cell, iterations, burnin, thin, seed):
    A, knots, w2, n = cell
    results = bench_cell(
        models, n_datasets=n_datasets, n=n, w2=w2, A=A, inner_knots=knots,
        iterations=iterations, burnin=burnin, thin=thin, seed=seed,
    )
    return bench_rows(results, w2=w2, A=A, inner_knots=knots, n=n)


def cmd_summarize(args):
    try:
        chain = read_chain(args.chain)
    except OSError as e:
        raise _CliError(EXIT_IO, str(e)) from e
    except ValueError as e:
        raise _CliError(EXIT_VALIDATION, str(e)) from e
    ks = [s.n_clusters for s in chain.samples]
    est = dahl_estimate(chain)
    print(f"samples: {len(chain)}")
    print(f"subjects: {len(chain.player_ids)} ({int(chain.active.sum())} active)")
    print(f"cluster count: mean {np.mean(ks):.2f} min {min(ks)} max {max(ks)}")
    print(f"partition estimate: {est.partition.n_clusters} clusters (ls score {est.ls_score:.3f})")
    for name, rate in chain.acceptance_rates.items():
        print(f"acceptance[{name}]: {rate:.3f}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="careercurves",
                                description="career-curve clustering and prediction")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gamescore", help="reduce box scores to Game Score rows")
    g.add_argument("boxscores")
    g.add_argument("-o", "--output", default="gamescores.csv")
    g.set_defaults(fn=cmd_gamescore)

    f = sub.add_parser("fit", help="run the MCMC fit")
    f.add_argument("players")
    f.add_argument("scores")
    f.add_argument("--config")
    f.add_argument("--filter", action="store_true",
                   help="apply the 42-game / 3-season eligibility filters")
    f.add_argument("--ppm", action="store_true", help="covariate-free partition prior")
    f.add_argument("--A", type=float)
    f.add_argument("--knots", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--burnin", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--grid-size", type=int, default=201)
    f.add_argument("--out-dir", default=".")
    f.set_defaults(fn=cmd_fit)

    pr = sub.add_parser("predict", help="active or career prediction from a chain file")
    prsub = pr.add_subparsers(dest="mode", required=True)
    pa = prsub.add_parser("active")
    pa.add_argument("chain")
    pa.add_argument("player")
    pa.add_argument("-o", "--output", default="active_prediction.csv")
    pa.add_argument("--grid-size", type=int, default=201)
    pa.add_argument("--seed", type=int)
    pa.set_defaults(fn=cmd_predict)
    pc = prsub.add_parser("career")
    pc.add_argument("chain")
    pc.add_argument("age", type=float)
    pc.add_argument("experience", choices=["HS", "COLLEGE", "INTL", "hs", "college", "intl"])
    pc.add_argument("draft", choices=["TOP5", "ROUND1", "ROUND2", "top5", "round1", "round2"])
    pc.add_argument("-o", "--output", default="career_prediction.csv")
    pc.add_argument("--grid-size", type=int, default=201)
    pc.add_argument("--seed", type=int)
    pc.set_defaults(fn=cmd_predict)

    s = sub.add_parser("simulate", help="write a synthetic dataset")
    s.add_argument("--m", type=int, default=60)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--w2", type=float, default=0.1)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(fn=cmd_simulate)

    b = sub.add_parser("bench", help="comparative study over a factor grid")
    b.add_argument("--models", default="HPPMx,HPPM,SP")
    b.add_argument("--datasets", type=int, default=5)
    b.add_argument("--A", type=float, nargs="+", default=[1.0])
    b.add_argument("--knots", type=int, nargs="+", default=[5])
    b.add_argument("--w2", type=float, nargs="+", default=[0.1])
    b.add_argument("--n", type=int, nargs="+", default=[50])
    b.add_argument("--iterations", type=int, default=3000)
    b.add_argument("--burnin", type=int, default=1000)
    b.add_argument("--thin", type=int, default=10)
    b.add_argument("--seed", type=int)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("-o", "--output", default="bench.csv")
    b.set_defaults(fn=cmd_bench)

    m = sub.add_parser("summarize", help="summarize a chain file")
    m.add_argument("chain")
    m.set_defaults(fn=cmd_summarize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
