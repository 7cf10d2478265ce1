"""Domain types for recurrent-event histories and model specifications."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Event histories
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EventHistory:
    """Events of one subject observed over ``[0, tau]``.

    ``resolution_times[j]`` is the time the subject becomes at risk again
    after event ``j``. When absent, resolution is instantaneous.
    """

    subject_id: str
    event_times: np.ndarray
    tau: float
    resolution_times: Optional[np.ndarray] = None
    covariates: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "event_times", _frozen_array(self.event_times))
        object.__setattr__(self, "tau", float(self.tau))
        if self.resolution_times is not None:
            object.__setattr__(
                self, "resolution_times", _frozen_array(self.resolution_times)
            )
        if self.covariates is not None:
            object.__setattr__(
                self,
                "covariates",
                {str(k): float(v) for k, v in self.covariates.items()},
            )

    @property
    def n_events(self) -> int:
        return int(self.event_times.size)

    @property
    def resumption_times(self) -> np.ndarray:
        """Times at which the at-risk period following each event starts."""
        if self.resolution_times is None:
            return self.event_times
        return self.resolution_times

    def gap_times(self) -> np.ndarray:
        """Gaps ``W_j = T_j - T_{j-1}`` with ``T_0 = 0``."""
        return np.diff(self.event_times, prepend=0.0)

    def __repr__(self):
        return (
            f"EventHistory(subject_id={self.subject_id!r}, "
            f"n_events={self.n_events}, tau={self.tau})"
        )


class DatasetArrays(NamedTuple):
    """Flat (CSR-style) view of a dataset used by the vectorized kernels."""

    times: np.ndarray  # all event times, grouped by subject
    resumptions: np.ndarray  # at-risk resumption time after each event
    subject: np.ndarray  # subject index of each event
    rank: np.ndarray  # 0-based index of each event within its subject
    counts: np.ndarray  # n_i
    offsets: np.ndarray  # start of subject i in ``times``
    tau: np.ndarray


def _arrays_from_parts(times, resumptions, counts, tau) -> DatasetArrays:
    counts = np.asarray(counts, dtype=np.int64)
    offsets = np.zeros(counts.size + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    subject = np.repeat(np.arange(counts.size), counts)
    rank = np.arange(offsets[-1]) - np.repeat(offsets[:-1], counts)
    return DatasetArrays(
        times=np.asarray(times, dtype=float),
        resumptions=np.asarray(resumptions, dtype=float),
        subject=subject,
        rank=rank,
        counts=counts,
        offsets=offsets,
        tau=np.asarray(tau, dtype=float),
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """A collection of independent subjects."""

    subjects: tuple
    time_unit: str = ""

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    @classmethod
    def from_arrays(
        cls,
        times,
        counts,
        tau,
        resolution_times=None,
        subject_ids: Optional[Sequence[str]] = None,
        time_unit: str = "",
    ) -> "Dataset":
        """Build a dataset from flat event arrays grouped by subject."""
        times = np.asarray(times, dtype=float)
        counts = np.asarray(counts, dtype=np.int64)
        tau = np.asarray(tau, dtype=float)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        if subject_ids is None:
            subject_ids = [str(i + 1) for i in range(counts.size)]
        subjects = []
        for i, sid in enumerate(subject_ids):
            lo, hi = offsets[i], offsets[i + 1]
            res = None if resolution_times is None else resolution_times[lo:hi]
            subjects.append(EventHistory(sid, times[lo:hi], tau[i], res))
        ds = cls(tuple(subjects), time_unit)
        res_all = times if resolution_times is None else np.asarray(resolution_times, float)
        ds.__dict__["arrays"] = _arrays_from_parts(times, res_all, counts, tau)
        return ds

    @property
    def m(self) -> int:
        return len(self.subjects)

    @property
    def n_events(self) -> int:
        return int(self.arrays.counts.sum())

    @property
    def has_resolution_times(self) -> bool:
        return any(s.resolution_times is not None for s in self.subjects)

    @cached_property
    def arrays(self) -> DatasetArrays:
        counts = [s.n_events for s in self.subjects]
        if self.subjects:
            times = np.concatenate([s.event_times for s in self.subjects])
            res = np.concatenate([s.resumption_times for s in self.subjects])
        else:
            times = res = np.empty(0)
        tau = [s.tau for s in self.subjects]
        return _arrays_from_parts(times, res, counts, tau)

    @cached_property
    def digest(self) -> str:
        """Content hash of event, resumption and follow-up arrays."""
        a = self.arrays
        h = hashlib.sha256()
        for part in (a.times, a.resumptions, a.counts, a.tau):
            h.update(np.ascontiguousarray(part).tobytes())
        return h.hexdigest()[:16]

    def covariate_matrix(self, names: Sequence[str]) -> np.ndarray:
        out = np.empty((self.m, len(names)))
        for i, s in enumerate(self.subjects):
            for j, name in enumerate(names):
                if not s.covariates or name not in s.covariates:
                    raise KeyError(
                        f"subject {s.subject_id!r} has no covariate {name!r}"
                    )
                out[i, j] = s.covariates[name]
        return out

    def __repr__(self):
        return f"Dataset(m={self.m}, n_events={self.n_events})"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


class Violation(NamedTuple):
    subject_id: Optional[str]
    rule: str
    message: str


def _history_violations(h: EventHistory) -> list:
    out = []
    sid = h.subject_id
    t = h.event_times
    if not (math.isfinite(h.tau) and h.tau > 0):
        out.append(Violation(sid, "tau not positive", f"tau={h.tau}"))
    if not np.all(np.isfinite(t)):
        out.append(Violation(sid, "non-finite event time", "NaN or inf event time"))
        return out
    if t.size and t[0] <= 0:
        out.append(Violation(sid, "event not after zero", f"event at {t[0]}"))
    if t.size and t[-1] > h.tau:
        out.append(
            Violation(sid, "event after tau", f"event at {t[-1]} > tau={h.tau}")
        )
    d = np.diff(t)
    if np.any(d == 0):
        out.append(Violation(sid, "simultaneous events", "duplicate event times"))
    if np.any(d < 0):
        out.append(
            Violation(sid, "non-increasing event times", "event times out of order")
        )
    r = h.resolution_times
    if r is not None:
        if r.size != t.size:
            out.append(
                Violation(
                    sid,
                    "resolution length mismatch",
                    f"{r.size} resolution times for {t.size} events",
                )
            )
        else:
            if np.any(r < t):
                out.append(
                    Violation(sid, "resolution before event", "resolution_times[j] < event_times[j]")
                )
            if np.any(r[:-1] >= t[1:]):
                out.append(
                    Violation(
                        sid,
                        "event inside non-at-risk interval",
                        "an event falls before the previous event resolved",
                    )
                )
    return out


def validate_dataset(d: Dataset) -> list:
    """Return the list of structural violations; empty when ``d`` is well formed."""
    out = []
    if d.m < 1:
        out.append(Violation(None, "empty dataset", "dataset has no subjects"))
    seen = set()
    for h in d.subjects:
        if h.subject_id in seen:
            out.append(Violation(h.subject_id, "duplicate subject id", "subject_id repeated"))
        seen.add(h.subject_id)
        out.extend(_history_violations(h))
    return out


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    """Constant baseline rate ``gamma``."""

    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def params(self) -> dict:
        return {"gamma": self.gamma}

    def rate(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.gamma)

    def log_rate(self, t):
        return np.full_like(np.asarray(t, dtype=float), math.log(self.gamma))

    def cumulative(self, t):
        return self.gamma * np.asarray(t, dtype=float)

    def inverse_cumulative(self, h):
        return np.asarray(h, dtype=float) / self.gamma

    def sup_rate(self, a: float, b: float) -> float:
        return self.gamma


@dataclass(frozen=True)
class PowerLaw:
    """Power-law baseline ``gamma1 * gamma2 * t**(gamma2 - 1)``."""

    gamma1: float = 1.0
    gamma2: float = 1.0

    def __post_init__(self):
        if not (self.gamma1 > 0 and self.gamma2 > 0):
            raise ValueError("power-law parameters must be positive")

    @property
    def params(self) -> dict:
        return {"gamma1": self.gamma1, "gamma2": self.gamma2}

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        return self.gamma1 * self.gamma2 * t ** (self.gamma2 - 1.0)

    def log_rate(self, t):
        t = np.asarray(t, dtype=float)
        return math.log(self.gamma1 * self.gamma2) + (self.gamma2 - 1.0) * np.log(t)

    def cumulative(self, t):
        return self.gamma1 * np.asarray(t, dtype=float) ** self.gamma2

    def inverse_cumulative(self, h):
        return (np.asarray(h, dtype=float) / self.gamma1) ** (1.0 / self.gamma2)

    def sup_rate(self, a: float, b: float) -> float:
        # monotone: the supremum sits at an endpoint; a must be > 0 when gamma2 < 1
        return float(max(self.rate(a), self.rate(b)))


@dataclass(frozen=True, eq=False)
class PiecewiseConstant:
    """Piecewise-constant rate: ``rates[k]`` on ``(knots[k], knots[k+1]]``.

    The last rate extends beyond the final knot.
    """

    knots: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        knots = _frozen_array(self.knots)
        rates = _frozen_array(self.rates)
        if knots.size != rates.size + 1 or knots[0] != 0.0:
            raise ValueError("knots must start at 0 and have len(rates) + 1 entries")
        if np.any(np.diff(knots) <= 0) or np.any(rates < 0):
            raise ValueError("knots must increase and rates be nonnegative")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "rates", rates)
        cum = np.concatenate([[0.0], np.cumsum(rates * np.diff(knots))])
        cum.setflags(write=False)
        object.__setattr__(self, "_cum", cum)

    @property
    def params(self) -> dict:
        return {"n_pieces": int(self.rates.size)}

    def _index(self, t):
        idx = np.searchsorted(self.knots, t, side="left") - 1
        return np.clip(idx, 0, self.rates.size - 1)

    def rate(self, t):
        return self.rates[self._index(np.asarray(t, dtype=float))]

    def log_rate(self, t):
        with np.errstate(divide="ignore"):
            return np.log(self.rate(t))

    def cumulative(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, self.rates.size - 1)
        return self._cum[idx] + self.rates[idx] * (t - self.knots[idx])

    def inverse_cumulative(self, h):
        h = np.asarray(h, dtype=float)
        idx = np.searchsorted(self._cum, h, side="right") - 1
        idx = np.clip(idx, 0, self.rates.size - 1)
        # skip zero-rate pieces: advance to the next piece with positive rate
        pos = np.flatnonzero(self.rates > 0)
        if pos.size == 0:
            return np.full_like(h, np.inf)
        nxt = pos[np.clip(np.searchsorted(pos, idx), 0, pos.size - 1)]
        idx = np.where(self.rates[idx] > 0, idx, nxt)
        out = self.knots[idx] + (h - self._cum[idx]) / self.rates[idx]
        # no mass left after a trailing zero-rate piece
        if self.rates[-1] == 0:
            out = np.where(h > self._cum[-1], np.inf, out)
        return out

    def sup_rate(self, a: float, b: float) -> float:
        lo, hi = self._index(a), self._index(b)
        return float(self.rates[lo : hi + 1].max())


BaselineSpec = Union[Constant, PowerLaw, PiecewiseConstant]


def baseline_family(b: BaselineSpec) -> str:
    if isinstance(b, Constant):
        return "constant"
    if isinstance(b, PowerLaw):
        return "powerlaw"
    return "piecewise"


# ---------------------------------------------------------------------------
# Carryover and frailty
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CarryoverSpec:
    """Carryover window of length ``delta``.

    Windows open only once at least ``prior_event_threshold`` events have
    occurred.
    """

    delta: float
    prior_event_threshold: int = 1

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if int(self.prior_event_threshold) < 1:
            raise ValueError("prior_event_threshold must be at least 1")
        object.__setattr__(self, "prior_event_threshold", int(self.prior_event_threshold))


def delta_from_c(c: float, gamma: float = 1.0) -> float:
    """Window length with ``P(W <= delta) = c`` for exponential(gamma) gaps."""
    if not 0 < c < 1:
        raise ValueError("c must lie in (0, 1)")
    return -math.log1p(-c) / gamma


@dataclass(frozen=True)
class FrailtySpec:
    kind: str = "none"
    phi: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "gamma", "lognormal"):
            raise ValueError(f"unknown frailty kind {self.kind!r}")
        if self.phi < 0 or not math.isfinite(self.phi):
            raise ValueError("frailty variance phi must be >= 0")

    def lognormal_params(self) -> tuple:
        """(mu, sigma) of log(alpha) giving mean 1 and variance phi."""
        s2 = math.log1p(self.phi)
        return -0.5 * s2, math.sqrt(s2)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    params: dict
    std_errors: dict
    loglik: float
    n_params: int
    converged: bool = True
    n_evaluations: int = 0
    fixed_effect_alphas: Optional[np.ndarray] = None
    boundary: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params

    def to_dict(self) -> dict:
        return {
            "params": dict(self.params),
            "std_errors": dict(self.std_errors),
            "loglik": self.loglik,
            "aic": self.aic,
            "n_params": self.n_params,
            "converged": self.converged,
            "n_evaluations": self.n_evaluations,
            "boundary": self.boundary,
        }


@dataclass
class TestResult:
    statistic: float
    obs: float
    exp: float
    variance: float
    p_value: float
    p_source: str
    notes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "obs": self.obs,
            "exp": self.exp,
            "variance": self.variance,
            "p_value": self.p_value,
            "p_source": self.p_source,
        }


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def dataset_to_json(d: Dataset) -> str:
    """Canonical JSON text; floats use shortest round-trip repr."""
    subjects = []
    for h in d.subjects:
        subjects.append(
            {
                "subject_id": h.subject_id,
                "tau": h.tau,
                "event_times": h.event_times.tolist(),
                "resolution_times": None
                if h.resolution_times is None
                else h.resolution_times.tolist(),
                "covariates": h.covariates,
            }
        )
    return json.dumps(
        {"time_unit": d.time_unit, "subjects": subjects},
        sort_keys=True,
        separators=(",", ":"),
    )


def dataset_from_json(text: str) -> Dataset:
    obj = json.loads(text)
    subjects = [
        EventHistory(
            s["subject_id"],
            s["event_times"],
            s["tau"],
            s.get("resolution_times"),
            s.get("covariates"),
        )
        for s in obj["subjects"]
    ]
    return Dataset(tuple(subjects), obj.get("time_unit", ""))
