"""Carryover indicators, exposure times and baseline integrals.

Everything here is closed form. Each subject's follow-up is split into
at-risk intervals ``[s_k, e_k]`` where ``s_0 = 0``, ``s_k`` is the
resumption after event ``k`` and ``e_k`` is the next event (or ``tau``).
Within an interval with ``k`` prior events the carryover indicator equals
one on ``[s_k, min(s_k + delta, e_k)]`` when ``k`` reaches the threshold,
and zero elsewhere.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .core import (
    BaselineSpec,
    CarryoverSpec,
    Constant,
    Dataset,
    DatasetArrays,
    EventHistory,
    PowerLaw,
    _arrays_from_parts,
)


class ExposureSummary(NamedTuple):
    total_window_time: float
    obs_count: int
    weighted_window_integral: float
    at_risk_baseline_integral: float


class ExposureTable:
    """Vectorized at-risk intervals and event indicators for a dataset.

    Parameters
    ----------
    arrays : DatasetArrays
        Flat event arrays, usually ``Dataset.arrays``.
    carryover : CarryoverSpec
    """

    def __init__(self, arrays: DatasetArrays, carryover: CarryoverSpec):
        self.carryover = carryover
        self.counts = arrays.counts
        self.tau = arrays.tau
        self.m = arrays.counts.size
        delta = carryover.delta
        thr = carryover.prior_event_threshold

        m, counts, offsets = self.m, arrays.counts, arrays.offsets
        n_iv = counts + 1
        iv_offsets = np.zeros(m + 1, dtype=np.int64)
        np.cumsum(n_iv, out=iv_offsets[1:])
        total = iv_offsets[-1]
        iv_subject = np.repeat(np.arange(m), n_iv)
        iv_rank = np.arange(total) - np.repeat(iv_offsets[:-1], n_iv)

        # interval k of subject i starts at resumption k (0 for k = 0) and
        # ends at event k + 1 (tau for the last one)
        first = iv_offsets[:-1]
        last = iv_offsets[1:] - 1
        is_first = np.zeros(total, dtype=bool)
        is_first[first] = True
        is_last = np.zeros(total, dtype=bool)
        is_last[last] = True
        start = np.zeros(total)
        start[~is_first] = arrays.resumptions
        end = np.empty(total)
        end[~is_last] = arrays.times
        end[last] = arrays.tau
        start = np.minimum(start, end)

        self.iv_subject = iv_subject
        self.iv_start = start
        self.iv_end = end
        self.iv_wend = np.minimum(start + delta, end)
        self.iv_active = iv_rank >= thr

        # event j (0-based) closes interval j of its subject
        ev_iv_start = start[~is_last]
        self.ev_time = arrays.times
        self.ev_subject = arrays.subject
        self.ev_rank = arrays.rank
        self.ev_z = (arrays.rank >= thr) & (arrays.times - ev_iv_start <= delta)

        self._win_subject = iv_subject[self.iv_active]
        self._win_start = start[self.iv_active]
        self._win_end = self.iv_wend[self.iv_active]

    @classmethod
    def from_dataset(cls, d: Dataset, carryover: CarryoverSpec) -> "ExposureTable":
        return cls(d.arrays, carryover)

    def _per_subject(self, subject, values) -> np.ndarray:
        return np.bincount(subject, weights=values, minlength=self.m)

    # -- counts --------------------------------------------------------------
    def obs_per_subject(self) -> np.ndarray:
        return np.bincount(self.ev_subject, weights=self.ev_z, minlength=self.m)

    @property
    def obs(self) -> int:
        return int(self.ev_z.sum())

    def window_time(self) -> np.ndarray:
        """Lebesgue measure of ``{Z = 1, Y = 1}`` per subject."""
        return self._per_subject(self._win_subject, self._win_end - self._win_start)

    def at_risk_time(self) -> np.ndarray:
        return self._per_subject(self.iv_subject, self.iv_end - self.iv_start)

    # -- baseline integrals --------------------------------------------------
    def at_risk_integral(self, b: BaselineSpec) -> np.ndarray:
        if isinstance(b, Constant):
            return b.gamma * self.at_risk_time()
        vals = b.cumulative(self.iv_end) - b.cumulative(self.iv_start)
        return self._per_subject(self.iv_subject, vals)

    def window_integral(self, b: BaselineSpec) -> np.ndarray:
        """``int Z_i(t) rho0(t) Y_i(t) dt`` per subject."""
        if isinstance(b, Constant):
            return b.gamma * self.window_time()
        vals = b.cumulative(self._win_end) - b.cumulative(self._win_start)
        return self._per_subject(self._win_subject, vals)

    def powerlaw_gamma2_derivatives(self, b: PowerLaw):
        """Derivatives in ``gamma2`` of the at-risk and window integrals."""

        def dcum(t):
            t = np.asarray(t, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                out = b.gamma1 * t**b.gamma2 * np.log(t)
            return np.where(t > 0, out, 0.0)

        da = self._per_subject(self.iv_subject, dcum(self.iv_end) - dcum(self.iv_start))
        dw = self._per_subject(
            self._win_subject, dcum(self._win_end) - dcum(self._win_start)
        )
        return da, dw

    def r_values(self, b: BaselineSpec, beta: float):
        """``(R_i, dR_i/dbeta)`` per subject."""
        a = self.at_risk_integral(b)
        w = self.window_integral(b)
        eb = math.exp(beta)
        return a + (eb - 1.0) * w, eb * w

    def sum_log_rate(self, b: BaselineSpec) -> float:
        if isinstance(b, Constant):
            return self.ev_time.size * math.log(b.gamma)
        return float(np.sum(b.log_rate(self.ev_time)))


def _history_arrays(h: EventHistory) -> DatasetArrays:
    return _arrays_from_parts(
        h.event_times, h.resumption_times, [h.n_events], [h.tau]
    )


def exposure_table(h: EventHistory, c: CarryoverSpec) -> ExposureTable:
    return ExposureTable(_history_arrays(h), c)


# ---------------------------------------------------------------------------
# Per-history operations
# ---------------------------------------------------------------------------


def carryover_indicator(h: EventHistory, t: float, c: CarryoverSpec) -> int:
    """Value of ``Z(t)`` (including the at-risk requirement)."""
    if not 0 <= t <= h.tau:
        raise ValueError(f"t={t} outside [0, tau={h.tau}]")
    k = int(np.searchsorted(h.event_times, t, side="left"))
    if k < c.prior_event_threshold:
        return 0
    start = h.resumption_times[k - 1]
    if t < start:
        return 0
    return int(t - start <= c.delta)


def at_risk_indicator(h: EventHistory, t: float) -> int:
    if not 0 <= t <= h.tau:
        return 0
    k = int(np.searchsorted(h.event_times, t, side="left"))
    if k == 0:
        return 1
    return int(t >= h.resumption_times[k - 1])


def carryover_exposure(h: EventHistory, c: CarryoverSpec) -> float:
    """Total time spent inside carryover windows while at risk."""
    return float(exposure_table(h, c).window_time()[0])


def baseline_cumulative(b: BaselineSpec, a: float, t: float) -> float:
    """``int_a^t rho0(u) du``."""
    if a > t:
        raise ValueError("lower limit exceeds upper limit")
    return float(b.cumulative(t) - b.cumulative(a))


def r_integral(h: EventHistory, b: BaselineSpec, beta: float, c: CarryoverSpec):
    """``R = int Y rho0 exp(beta Z) dt`` and its first two beta-derivatives."""
    tab = exposure_table(h, c)
    value, d1 = tab.r_values(b, beta)
    return float(value[0]), float(d1[0]), float(d1[0])


def exposure_summary(h: EventHistory, b: BaselineSpec, c: CarryoverSpec) -> ExposureSummary:
    tab = exposure_table(h, c)
    return ExposureSummary(
        total_window_time=float(tab.window_time()[0]),
        obs_count=tab.obs,
        weighted_window_integral=float(tab.window_integral(b)[0]),
        at_risk_baseline_integral=float(tab.at_risk_integral(b)[0]),
    )


def conditional_frailty_intensity(
    h: EventHistory,
    t: float,
    b: BaselineSpec,
    phi: float,
    beta: float,
    c: CarryoverSpec,
) -> float:
    """Intensity at ``t`` with a mean-one gamma frailty integrated out."""
    if phi <= 0:
        raise ValueError("phi must be positive; use the Poisson intensity for phi = 0")
    if not 0 <= t <= h.tau:
        raise ValueError(f"t={t} outside [0, tau={h.tau}]")
    k = int(np.searchsorted(h.event_times, t, side="left"))
    past = EventHistory(
        h.subject_id,
        h.event_times[:k],
        t,
        None if h.resolution_times is None else np.minimum(h.resolution_times[:k], t),
    )
    if t > 0:
        r = r_integral(past, b, beta, c)[0]
    else:
        r = 0.0
    y = at_risk_indicator(h, t)
    if y == 0:
        return 0.0
    z = carryover_indicator(h, t, c)
    rho = float(b.rate(t))
    return (1.0 / phi + k) / (1.0 / phi + r) * rho * math.exp(beta * z)
