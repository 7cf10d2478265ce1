"""Descriptive estimators: mean functions, gap-time hazards, Obs/Exp tables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import CarryoverSpec, Dataset
from .estimate import fit_fixed, fit_random
from .score import score_test_fixed, score_test_random, wald_test
from .semiparam import breslow_increments


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous nondecreasing step function starting at 0."""

    jump_times: np.ndarray
    cumulative_values: np.ndarray
    variance: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.jump_times, dtype=float)
        v = np.asarray(self.cumulative_values, dtype=float)
        if t.shape != v.shape:
            raise ValueError("jump_times and cumulative_values differ in length")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(v) < -1e-12):
            raise ValueError("jump times must increase and values must not decrease")
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "cumulative_values", v)
        if self.variance is not None:
            object.__setattr__(self, "variance", np.asarray(self.variance, dtype=float))

    def __call__(self, t):
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        vals = np.concatenate([[0.0], self.cumulative_values])
        return vals[idx + 1]


def nelson_aalen_mean(d: Dataset) -> StepFunction:
    """Nelson-Aalen estimate of the mean number of events by time ``t``.

    The variance is the robust (subject-level sandwich) form, valid without
    Poisson assumptions.
    """
    rs = breslow_increments(d)
    inc = rs.increments
    tab = rs.table
    col = np.searchsorted(rs.distinct_times, tab.ev_time)
    dNmat = np.zeros_like(rs.Ymat)
    np.add.at(dNmat, (tab.ev_subject, col), 1.0)
    resid = rs.Ymat / rs.Y * (dNmat - rs.Ymat * inc)
    var = np.sum(np.cumsum(resid, axis=1) ** 2, axis=0)
    return StepFunction(rs.distinct_times, np.cumsum(inc), var)


class Gap(NamedTuple):
    duration: float
    censored: bool
    index: int  # 1 for the gap ending in the first event


def extract_gaps(d: Dataset, by_index: bool = False):
    """At-risk durations between a resumption and the next event.

    The last gap of each subject is censored at ``tau``; it is dropped when
    the subject is not at risk again before ``tau``. With ``by_index`` the
    gaps are returned as ``{index: [Gap, ...]}``.
    """
    gaps = []
    for h in d.subjects:
        start = 0.0
        for j, (t, s) in enumerate(zip(h.event_times, h.resumption_times), start=1):
            gaps.append(Gap(float(t - start), False, j))
            start = float(s)
        if h.tau > start:
            gaps.append(Gap(h.tau - start, True, h.n_events + 1))
    if not by_index:
        return gaps
    out: dict = {}
    for g in gaps:
        out.setdefault(g.index, []).append(g)
    return dict(sorted(out.items()))


class HazardRow(NamedTuple):
    lower: float
    upper: float
    H: float  # cumulative hazard at ``upper``
    h: float  # constant hazard on (lower, upper]


def piecewise_hazard(edges: Sequence[float], H: Sequence[float]) -> list:
    """Piecewise-constant hazard from a cumulative hazard given at ``edges``."""
    a = np.asarray(edges, dtype=float)
    H = np.asarray(H, dtype=float)
    if a.size < 2 or a[0] != 0 or np.any(np.diff(a) <= 0):
        raise ValueError("edges must start at 0 and strictly increase")
    if H.shape != a.shape:
        raise ValueError("H needs one value per edge")
    h = np.diff(H) / np.diff(a)
    return [HazardRow(a[j - 1], a[j], H[j], h[j - 1]) for j in range(1, a.size)]


def gap_cumulative_hazard(gaps) -> StepFunction:
    """Nelson-Aalen cumulative hazard of possibly censored durations."""
    dur = np.array([g[0] for g in gaps], dtype=float)
    cens = np.array([bool(g[1]) for g in gaps], dtype=bool)
    if np.any(dur < 0):
        raise ValueError("negative gap duration")
    ev = np.sort(dur[~cens])
    if ev.size == 0:
        return StepFunction(np.empty(0), np.empty(0))
    u, dN = np.unique(ev, return_counts=True)
    srt = np.sort(dur)
    at_risk = srt.size - np.searchsorted(srt, u, side="left")
    return StepFunction(u, np.cumsum(dN / at_risk))


def gap_hazard_piecewise(gaps, edges: Sequence[float]) -> list:
    """Nelson-Aalen gap hazard evaluated at ``edges`` and differenced.

    ``gaps`` is a sequence of ``(duration, censored)`` pairs.
    """
    H = gap_cumulative_hazard(gaps)
    return piecewise_hazard(edges, H(np.asarray(edges, dtype=float)))


class ObsExpRow(NamedTuple):
    delta: float
    obs: int
    exp: float
    gamma: tuple  # baseline parameters of the full fit
    beta: float
    phi: float
    S2: float
    Z2: float
    loglik: float


def obs_exp_table(
    d: Dataset,
    family: str,
    delta_grid: Sequence[float],
    model: str = "random",
    threshold: int = 1,
    return_fits: bool = False,
):
    """One row per window length combining the score test and the full fit.

    ``Exp`` is the expected window count under ``beta = 0``; ``S2`` is the
    squared score statistic and ``Z2`` the Wald statistic of the full fit.
    """
    if len(delta_grid) == 0:
        raise ValueError("delta grid is empty")
    if model not in ("fixed", "random"):
        raise ValueError(f"unknown model {model!r}")
    rows, fits = [], []
    for delta in delta_grid:
        c = CarryoverSpec(float(delta), threshold)
        if model == "fixed":
            score = score_test_fixed(d, family, c)
            fit = fit_fixed(d, family, c)
        else:
            score = score_test_random(d, family, c)
            fit = fit_random(d, family, c)
        try:
            z2 = wald_test(fit).statistic
        except ValueError:
            z2 = math.nan
        base = tuple(v for k, v in fit.params.items() if k.startswith("gamma"))
        rows.append(
            ObsExpRow(
                float(delta),
                int(score.obs),
                float(score.exp),
                base,
                fit.params["beta"],
                fit.params.get("phi", math.nan),
                score.statistic**2,
                z2,
                fit.loglik,
            )
        )
        fits.append(fit)
    return (rows, fits) if return_fits else rows
