"""Command-line interface.

Every command prints one JSON object. Failures print
``{"command", "error", "message"}`` and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from .core import CarryoverSpec, Constant, FrailtySpec, PowerLaw
from .diagnostics import (
    ObsExpRow,
    extract_gaps,
    gap_hazard_piecewise,
    nelson_aalen_mean,
    obs_exp_table,
)
from .estimate import fit_fixed, fit_poisson, fit_random
from .io import ingest_csv, write_events_csv, write_rows_csv, write_subjects_csv
from .score import (
    bootstrap_pvalue_fixed,
    bootstrap_pvalue_random,
    choose_p_source,
    lr_test,
    score_test_fixed,
    score_test_random,
    wald_test,
)
from .semiparam import ag_frailty_score, ag_score, fit_ag, fit_ag_frailty
from .simulate import SimConfig, simulate_dataset
from .study import (
    NULL_HEADER,
    POWER_HEADER,
    StudyConfig,
    parse_frailty,
    parse_tau,
    run_mc_study,
)

RESULT_KEYS = ("command", "config_hash", "seed", "params", "std_errors", "loglik", "aic",
               "statistic", "obs", "exp", "p_value", "p_source", "notes")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _clean(obj):
    """JSON-safe copy: NaN and infinities become null, numpy scalars floats."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _dump(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1)


def _config_hash(args, extra="") -> str:
    skip = {"func", "threads", "output", "out_dir"}
    conf = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    text = json.dumps(conf, sort_keys=True, default=str) + extra
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _result(args, dataset=None, **fields) -> dict:
    out = dict.fromkeys(RESULT_KEYS)
    out["notes"] = []
    out.update(fields)
    out["command"] = args.command
    out["seed"] = getattr(args, "seed", None)
    out["config_hash"] = _config_hash(args, dataset.digest if dataset is not None else "")
    return out


def _carryover(args) -> CarryoverSpec:
    if args.delta is None:
        raise UsageError("--delta is required")
    return CarryoverSpec(args.delta, args.threshold)


def _load(args):
    return ingest_csv(args.events, args.subjects)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> dict:
    gamma = args.gamma or ([1.0] if args.baseline == "constant" else [1.0, 1.0])
    if args.baseline == "constant":
        if len(gamma) != 1:
            raise UsageError("constant baseline takes one --gamma value")
        b = Constant(gamma[0])
    else:
        if len(gamma) != 2:
            raise UsageError("powerlaw baseline takes two --gamma values")
        b = PowerLaw(*gamma)
    cfg = SimConfig(
        m=args.m,
        tau_rule=parse_tau(args.tau),
        baseline=b,
        frailty=parse_frailty(args.frailty),
        beta=math.log(args.exp_beta),
        carryover=CarryoverSpec(args.delta if args.delta is not None else 0.1054, args.threshold),
        refractory=args.refractory,
        seed=args.seed,
    )
    d = simulate_dataset(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_events_csv(d, out_dir / "events.csv")
    write_subjects_csv(d, out_dir / "subjects.csv")
    return _result(args, d, params={"m": d.m, "n_events": d.n_events},
                   notes=[f"wrote {out_dir / 'events.csv'} and {out_dir / 'subjects.csv'}"])


def _fit(args, d, c, constrain=False):
    if args.model == "fixed":
        return fit_fixed(d, args.baseline, c, constrain_beta_zero=constrain)
    if args.model == "random":
        return fit_random(d, args.baseline, c, constrain_beta_zero=constrain)
    if args.model == "poisson":
        return fit_poisson(d, args.baseline, c, constrain_beta_zero=constrain)
    covs = args.covariates or []
    if args.model == "ag":
        return fit_ag(d, covs, c, include_carryover=not constrain)
    return fit_ag_frailty(d, covs, c, include_carryover=not constrain)


def cmd_fit(args) -> dict:
    d = _load(args)
    c = _carryover(args)
    fit = _fit(args, d, c)
    return _result(args, d, params=fit.params, std_errors=fit.std_errors, loglik=fit.loglik,
                   aic=fit.aic, notes=list(fit.meta.get("notes", [])))


def _score(args, d, c):
    model = args.model
    if model == "fixed":
        return score_test_fixed(d, args.baseline, c, args.two_sided)
    if model == "random":
        return score_test_random(d, args.baseline, c, two_sided=args.two_sided)
    if model == "ag":
        return ag_score(d, c, args.two_sided)
    raise UsageError(f"no score statistic for model {model!r}")


def cmd_test(args) -> dict:
    d = _load(args)
    c = _carryover(args)
    if args.statistic == "wald":
        t = wald_test(_fit(args, d, c))
    elif args.statistic == "lr":
        t = lr_test(_fit(args, d, c, constrain=True), _fit(args, d, c))
    elif args.model == "ag-frailty":
        t = ag_frailty_score(d, c, args.phi, B=args.B, seed=args.seed,
                             refractory=args.refractory or 0.0, threads=args.threads)
    else:
        source = args.p_source or choose_p_source(d, c)
        if source == "bootstrap" and args.model == "fixed":
            t = bootstrap_pvalue_fixed(d, args.baseline, c, args.B, args.seed,
                                       args.two_sided, args.threads)
        elif source == "bootstrap" and args.model == "random":
            t = bootstrap_pvalue_random(d, args.baseline, c, args.B, args.seed,
                                        args.refractory, args.threads)
        elif source == "bootstrap":
            raise UsageError("bootstrap p-values need --model fixed, random or ag-frailty")
        else:
            t = _score(args, d, c)
    return _result(args, d, params=t.params, statistic=t.statistic, obs=t.obs, exp=t.exp,
                   p_value=t.p_value, p_source=t.p_source, notes=list(t.notes))


def cmd_mc_study(args) -> dict:
    cfg = StudyConfig.from_text(Path(args.config).read_text(encoding="utf-8"))
    if args.reps is not None:
        cfg.replications = args.reps
    if args.seed is not None:
        cfg.seed = args.seed
    report = run_mc_study(cfg, cache_dir=args.cache, threads=args.threads)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(args.timing) + "\n", encoding="utf-8")
        write_rows_csv(report.null_rows(), NULL_HEADER, out / "null.csv")
        write_rows_csv(report.power_rows(), POWER_HEADER, out / "power.csv")
    res = _result(args)
    res.update(config_hash=report.config_hash, seed=report.seed)
    res["cells"] = report.cells
    if args.timing:
        res["runtime_seconds"] = report.runtimes
    return res


def cmd_diagnose(args) -> dict:
    d = _load(args)
    mean = nelson_aalen_mean(d)
    edges = args.edges
    res = _result(args, d)
    res["mean_function"] = {
        "time": mean.jump_times, "mean": mean.cumulative_values, "variance": mean.variance,
    }
    if edges:
        groups = extract_gaps(d, by_index=True) if args.by_index else {"all": extract_gaps(d)}
        tables = {}
        for key, gaps in groups.items():
            tables[str(key)] = [row._asdict() for row in gap_hazard_piecewise(gaps, edges)]
        res["gap_hazard"] = tables
    return res


def cmd_obs_exp(args) -> dict:
    d = _load(args)
    if not args.delta_grid:
        raise UsageError("--delta-grid is required")
    rows = obs_exp_table(d, args.baseline, args.delta_grid, args.model, args.threshold)
    if args.output_csv:
        write_rows_csv(rows, ObsExpRow._fields, args.output_csv)
    res = _result(args, d)
    res["rows"] = [r._asdict() for r in rows]
    return res


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="carryover", description="Carryover effects in recurrent events.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def data_flags(sp):
        sp.add_argument("--events", help="events CSV (subject_id,event_time[,resolution_time])")
        sp.add_argument("--subjects", required=True, help="subjects CSV (subject_id,tau[,...])")

    def model_flags(sp, models=("fixed", "random", "poisson", "ag", "ag-frailty")):
        sp.add_argument("--model", choices=models, default="random")
        sp.add_argument("--baseline", choices=("constant", "powerlaw"), default="constant")
        sp.add_argument("--delta", type=float)
        sp.add_argument("--threshold", type=int, default=1)
        sp.add_argument("--covariates", type=lambda s: [x for x in s.split(",") if x])

    sp = sub.add_parser("simulate", help="simulate a dataset to CSV")
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--tau", default="10", help="'10' or 'U(lo,hi)'")
    sp.add_argument("--baseline", choices=("constant", "powerlaw"), default="constant")
    sp.add_argument("--gamma", type=float, nargs="+")
    sp.add_argument("--frailty", default="none", help="none | gamma:phi | lognormal:phi")
    sp.add_argument("--exp-beta", type=float, default=1.0)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--threshold", type=int, default=1)
    sp.add_argument("--refractory", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit a model")
    data_flags(sp)
    model_flags(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("test", help="test for no carryover effect")
    data_flags(sp)
    model_flags(sp)
    sp.add_argument("--statistic", choices=("score", "wald", "lr"), default="score")
    sp.add_argument("--p-source", choices=("normal", "bootstrap"))
    sp.add_argument("--B", type=int, default=999)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--refractory", type=float)
    sp.add_argument("--phi", type=float, help="frailty variance for ag-frailty")
    sp.add_argument("--two-sided", action="store_true")
    sp.set_defaults(func=cmd_test)

    sp = sub.add_parser("mc-study", help="run a Monte Carlo study")
    sp.add_argument("--config", required=True)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--cache", help="directory for resumable per-cell results")
    sp.add_argument("--out-dir")
    sp.add_argument("--timing", action="store_true", help="include wall-clock runtimes")
    sp.set_defaults(func=cmd_mc_study)

    sp = sub.add_parser("diagnose", help="mean function and gap hazards")
    data_flags(sp)
    sp.add_argument("--edges", type=_floats, help="comma-separated gap-time edges from 0")
    sp.add_argument("--by-index", action="store_true")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("obs-exp", help="observed/expected table over window lengths")
    data_flags(sp)
    model_flags(sp, models=("fixed", "random"))
    sp.add_argument("--delta-grid", type=_floats)
    sp.add_argument("--output-csv")
    sp.set_defaults(func=cmd_obs_exp)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    command = next((a for a in argv if not a.startswith("-")), None)
    try:
        args = build_parser().parse_args(argv)
        result = args.func(args)
    except UsageError as exc:
        print(_dump({"command": command, "error": "usage", "message": str(exc)}))
        return 2
    except Exception as exc:  # reported as machine-readable JSON
        print(_dump({"command": command, "error": type(exc).__name__, "message": str(exc)}))
        return 1
    print(_dump(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
