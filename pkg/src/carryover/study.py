"""Monte Carlo calibration and power studies over a scenario grid.

Every (cell, replicate) pair draws from its own random stream keyed by a
hash of the cell definition, so results do not depend on grid order, worker
count or interruption.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import re
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np

from .core import CarryoverSpec, Constant, FrailtySpec, PowerLaw, _arrays_from_parts
from .parallel import run_replicates
from .score import score_test_fixed, score_test_random
from .semiparam import ag_score
from .simulate import FixedTau, UniformTau, _simulate_batch, sample_frailties, substream

TAIL_POINTS = {"0.95": 1.645, "0.975": 1.960, "0.99": 2.326}
STATISTICS = ("fixed", "random", "ag")


# ---------------------------------------------------------------------------
# Scenario parsing
# ---------------------------------------------------------------------------


def parse_tau(text: str):
    """``"10"`` for a fixed follow-up or ``"U(lo,hi)"`` for a uniform one."""
    t = text.replace(" ", "")
    mt = re.fullmatch(r"U\(([^,]+),([^)]+)\)", t, flags=re.IGNORECASE)
    if mt:
        return UniformTau(float(mt.group(1)), float(mt.group(2)))
    v = float(t)
    if not v > 0:
        raise ValueError(f"tau must be positive: {text!r}")
    return FixedTau(v)


def tau_label(rule) -> str:
    if isinstance(rule, FixedTau):
        return repr(rule.tau)
    return f"U({rule.lo!r},{rule.hi!r})"


def parse_frailty(text: str) -> FrailtySpec:
    """``"none"``, ``"gamma:0.3"`` or ``"lognormal:0.3"``."""
    parts = text.strip().split(":")
    if parts[0] == "none":
        return FrailtySpec()
    if len(parts) != 2:
        raise ValueError(f"frailty must look like kind:phi, got {text!r}")
    return FrailtySpec(parts[0], float(parts[1]))


def parse_baseline(text: str):
    """``"constant:gamma"`` or ``"powerlaw:gamma1:gamma2"``."""
    parts = text.strip().split(":")
    if parts[0] == "constant" and len(parts) == 2:
        return Constant(float(parts[1]))
    if parts[0] == "powerlaw" and len(parts) == 3:
        return PowerLaw(float(parts[1]), float(parts[2]))
    raise ValueError(f"cannot parse baseline {text!r}")


def baseline_label(b) -> str:
    if isinstance(b, Constant):
        return f"constant:{b.gamma!r}"
    return f"powerlaw:{b.gamma1!r}:{b.gamma2!r}"


@dataclass(frozen=True)
class Cell:
    """One fully specified scenario."""

    m: int
    tau: str
    delta: float
    frailty: str
    baseline: str
    threshold: int
    refractory: float
    statistic: str
    family: str
    alpha_once: bool

    @property
    def key(self) -> int:
        text = json.dumps(asdict(self), sort_keys=True)
        return int(hashlib.sha256(text.encode()).hexdigest()[:8], 16)

    def label(self) -> str:
        return (f"{self.statistic} m={self.m} tau={self.tau} delta={self.delta!r} "
                f"frailty={self.frailty} baseline={self.baseline}")


@dataclass
class StudyConfig:
    """Scenario grid and Monte Carlo settings.

    Grid axes (``m``, ``tau``, ``delta``, ``frailty``, ``baseline``) are
    crossed. ``exp_beta`` lists alternatives for the power pass, each
    simulated with true window ``delta0`` (defaults to the test window).
    """

    m: list
    tau: list
    delta: list
    frailty: list = field(default_factory=lambda: ["none"])
    baseline: list = field(default_factory=lambda: ["constant:1"])
    exp_beta: list = field(default_factory=list)
    delta0: list = field(default_factory=list)
    threshold: int = 1
    refractory: float = 0.0
    replications: int = 1000
    power_replications: Optional[int] = None
    statistic: str = "random"
    family: str = "constant"
    critical_value_source: str = "empirical"
    alpha_once: Optional[bool] = None
    seed: int = 0

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        if self.critical_value_source not in ("normal", "empirical"):
            raise ValueError("critical_value_source must be normal or empirical")
        for name in ("m", "tau", "delta", "frailty", "baseline"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name!r} is empty")
        for t in self.tau:
            parse_tau(t)
        for f in self.frailty:
            parse_frailty(f)
        for b in self.baseline:
            parse_baseline(b)
        if self.alpha_once is None:
            self.alpha_once = self.statistic == "fixed"

    @classmethod
    def from_text(cls, text: str) -> "StudyConfig":
        """Parse flat ``key = value`` lines; list axes are comma separated.

        ``tau`` entries are separated by ``;`` since uniform rules contain
        commas. ``#`` starts a comment.
        """
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            raw[k] = v
        conv = {
            "m": lambda v: [int(x) for x in _split(v)],
            "tau": lambda v: [x.strip() for x in v.split(";") if x.strip()],
            "delta": lambda v: [float(x) for x in _split(v)],
            "delta0": lambda v: [float(x) for x in _split(v)],
            "exp_beta": lambda v: [float(x) for x in _split(v)],
            "frailty": _split,
            "baseline": _split,
            "threshold": int,
            "refractory": float,
            "replications": int,
            "power_replications": int,
            "statistic": str,
            "family": str,
            "critical_value_source": str,
            "alpha_once": lambda v: v.lower() in ("1", "true", "yes"),
            "seed": int,
        }
        kwargs = {}
        for k, v in raw.items():
            if k not in conv:
                raise ValueError(f"unknown config key {k!r}")
            kwargs[k] = conv[k](v)
        missing = [k for k in ("m", "tau", "delta") if k not in kwargs]
        if missing:
            raise ValueError(f"missing config keys: {', '.join(missing)}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def cells(self) -> list:
        out = []
        for m, tau, delta, fr, bl in itertools.product(
            self.m, self.tau, self.delta, self.frailty, self.baseline
        ):
            out.append(Cell(int(m), tau, float(delta), fr, bl, self.threshold,
                            float(self.refractory), self.statistic, self.family,
                            bool(self.alpha_once)))
        return out


def _split(v: str) -> list:
    return [x.strip() for x in v.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------


def statistic_value(kind: str, arrays, family: str, c: CarryoverSpec) -> float:
    """Score statistic of the given kind; NaN when it is undefined."""
    try:
        if kind == "fixed":
            return score_test_fixed(arrays, family, c).statistic
        if kind == "random":
            return score_test_random(arrays, family, c).statistic
        return ag_score(arrays, c).statistic
    except (ValueError, np.linalg.LinAlgError):
        return math.nan


def _cell_alphas(cell: Cell, seed: int):
    if not cell.alpha_once:
        return None
    return sample_frailties(parse_frailty(cell.frailty), cell.m, substream(seed, "alpha", cell.key))


def _replicate(r, *, cell: Cell, seed, kind, beta, delta0, alphas):
    rng = substream(seed, kind, cell.key, r)
    frailty = parse_frailty(cell.frailty)
    alpha = alphas if alphas is not None else sample_frailties(frailty, cell.m, rng)
    tau = parse_tau(cell.tau).sample(cell.m, rng)
    truth = CarryoverSpec(delta0, cell.threshold)
    times, counts, res = _simulate_batch(
        alpha, tau, parse_baseline(cell.baseline), beta, truth, cell.refractory, rng
    )
    arrays = _arrays_from_parts(times, res, counts, tau)
    return statistic_value(cell.statistic, arrays, cell.family,
                           CarryoverSpec(cell.delta, cell.threshold))


def null_statistics(cell: Cell, reps: int, seed: int, threads: int = 1) -> np.ndarray:
    fn = partial(_replicate, cell=cell, seed=seed, kind="null", beta=0.0,
                 delta0=cell.delta, alphas=_cell_alphas(cell, seed))
    return np.asarray(run_replicates(fn, reps, threads))


def power_statistics(cell: Cell, reps: int, seed: int, beta: float, delta0: float,
                     threads: int = 1) -> np.ndarray:
    fn = partial(_replicate, cell=cell, seed=seed, kind="power", beta=beta,
                 delta0=delta0, alphas=_cell_alphas(cell, seed))
    return np.asarray(run_replicates(fn, reps, threads))


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def empirical_quantile(values, p: float) -> float:
    """Order statistic ``ceil(p R)`` (1-based) of the ``R`` values."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return math.nan
    k = max(1, math.ceil(p * v.size - 1e-12))
    return float(v[k - 1])


def rate_with_se(hits: int, reps: int):
    if reps == 0:
        return math.nan, math.nan
    r = hits / reps
    return r, math.sqrt(r * (1.0 - r) / reps)


def summarize_null(stats_: np.ndarray) -> dict:
    ok = stats_[~np.isnan(stats_)]
    out = {"reps": int(ok.size), "failed": int(stats_.size - ok.size),
           "quantiles": {}, "tail": {}}
    for p, z in TAIL_POINTS.items():
        out["quantiles"][p] = empirical_quantile(ok, float(p))
        rate, se = rate_with_se(int(np.sum(ok > z)), ok.size)
        out["tail"][p] = {"critical": z, "rate": rate, "se": se}
    return out


def summarize_power(stats_: np.ndarray, critical: float) -> dict:
    ok = stats_[~np.isnan(stats_)]
    rate, se = rate_with_se(int(np.sum(ok > critical)), ok.size)
    return {"reps": int(ok.size), "failed": int(stats_.size - ok.size),
            "critical": critical, "rate": rate, "se": se}


# ---------------------------------------------------------------------------
# Study runner
# ---------------------------------------------------------------------------


@dataclass
class StudyReport:
    config: dict
    config_hash: str
    seed: int
    cells: list  # dicts, one per cell, grid order
    runtimes: dict = field(default_factory=dict)

    def to_json(self, include_timing: bool = False) -> str:
        obj = {"config": self.config, "config_hash": self.config_hash,
               "seed": self.seed, "cells": self.cells}
        if include_timing:
            obj["runtime_seconds"] = self.runtimes
        return json.dumps(obj, sort_keys=True, indent=1)

    def null_rows(self) -> list:
        rows = []
        for c in self.cells:
            n = c["null"]
            rows.append(
                (c["statistic"], c["m"], c["tau"], c["delta"], c["frailty"], c["baseline"],
                 n["reps"], n["failed"],
                 n["quantiles"]["0.95"], n["quantiles"]["0.975"], n["quantiles"]["0.99"],
                 n["tail"]["0.95"]["rate"], n["tail"]["0.95"]["se"],
                 n["tail"]["0.975"]["rate"], n["tail"]["0.975"]["se"],
                 n["tail"]["0.99"]["rate"], n["tail"]["0.99"]["se"],
                 self.seed, self.config_hash)
            )
        return rows

    def power_rows(self) -> list:
        rows = []
        for c in self.cells:
            for p in c["power"]:
                rows.append(
                    (c["statistic"], c["m"], c["tau"], c["delta"], p["delta0"], p["exp_beta"],
                     c["frailty"], c["baseline"], p["reps"], p["failed"], p["critical"],
                     p["rate"], p["se"], self.seed, self.config_hash)
                )
        return rows


NULL_HEADER = ("statistic", "m", "tau", "delta", "frailty", "baseline", "reps", "failed",
               "q95", "q975", "q99", "p_gt_1.645", "se_1.645", "p_gt_1.960", "se_1.960",
               "p_gt_2.326", "se_2.326", "seed", "config_hash")
POWER_HEADER = ("statistic", "m", "tau", "delta", "delta0", "exp_beta", "frailty", "baseline",
                "reps", "failed", "critical", "rejection_rate", "se", "seed", "config_hash")


def run_cell(cell: Cell, cfg: StudyConfig, threads: int = 1) -> dict:
    null = null_statistics(cell, cfg.replications, cfg.seed, threads)
    summary = summarize_null(null)
    if cfg.critical_value_source == "empirical":
        critical = summary["quantiles"]["0.95"]
    else:
        critical = TAIL_POINTS["0.95"]
    power = []
    deltas0 = cfg.delta0 or [cell.delta]
    preps = cfg.power_replications or cfg.replications
    for eb, d0 in itertools.product(cfg.exp_beta, deltas0):
        stats_ = power_statistics(cell, preps, cfg.seed, math.log(eb), d0, threads)
        row = summarize_power(stats_, critical)
        row.update(exp_beta=eb, delta0=d0)
        power.append(row)
    out = asdict(cell)
    out.update(key=cell.key, null=summary, power=power)
    return out


def run_mc_study(cfg: StudyConfig, cache_dir=None, threads: int = 1, progress=None) -> StudyReport:
    """Null calibration and optional power pass for every grid cell.

    With ``cache_dir`` each finished cell is stored and reused on a rerun
    with the same configuration, so an interrupted study resumes where it
    stopped. A failing cell raises with its description after completed
    cells have been cached.
    """
    cells, runtimes = [], {}
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    for cell in cfg.cells():
        path = cache / f"{cfg.config_hash}-{cell.key:08x}.json" if cache else None
        if path is not None and path.exists():
            cells.append(json.loads(path.read_text()))
            continue
        t0 = time.perf_counter()
        try:
            result = run_cell(cell, cfg, threads)
        except Exception as exc:
            raise RuntimeError(f"cell {cell.label()} failed: {exc}") from exc
        runtimes[cell.label()] = time.perf_counter() - t0
        # round trip so fresh and cached cells serialize identically
        text = json.dumps(result, sort_keys=True)
        if path is not None:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(text)
            os.replace(tmp, path)
        cells.append(json.loads(text))
        if progress is not None:
            progress(cell)
    return StudyReport(cfg.to_dict(), cfg.config_hash, cfg.seed, cells, runtimes)
