"""Likelihoods and maximum likelihood fits for carryover models.

Three likelihoods are provided for intensity ``alpha_i rho0(t) exp(beta Z_i(t))``:

* fixed effects, with each ``alpha_i`` profiled out (``alpha_i = n_i / R_i``);
* gamma random effects with mean one and variance ``phi``;
* Poisson, a common ``alpha`` absorbed into ``rho0``.

Positive parameters are optimized on the log scale with a restarted
Nelder-Mead simplex.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .core import (
    BaselineSpec,
    CarryoverSpec,
    Constant,
    Dataset,
    DatasetArrays,
    FitResult,
    PowerLaw,
)
from .exposure import ExposureTable

log = logging.getLogger(__name__)

PHI_FLOOR = 1e-8
FAMILIES = ("constant", "powerlaw")


def _table(d, c: CarryoverSpec) -> ExposureTable:
    if isinstance(d, ExposureTable):
        return d
    if isinstance(d, DatasetArrays):
        return ExposureTable(d, c)
    return ExposureTable.from_dataset(d, c)


def _xlogy_sum(n, r) -> float:
    pos = n > 0
    return float(np.sum(n[pos] * np.log(r[pos])))


# ---------------------------------------------------------------------------
# Log likelihoods
# ---------------------------------------------------------------------------


def profile_loglik_fixed(d, b: BaselineSpec, beta: float, c: CarryoverSpec) -> float:
    """Fixed-effects log likelihood with ``alpha_i`` profiled out (up to a constant)."""
    tab = _table(d, c)
    r, _ = tab.r_values(b, beta)
    return tab.sum_log_rate(b) + beta * tab.obs - _xlogy_sum(tab.counts, r)


def loglik_fixed_full(
    d, b: BaselineSpec, beta: float, alphas: Sequence[float], c: CarryoverSpec
) -> float:
    """Fixed-effects log likelihood at explicit subject rates ``alphas``."""
    tab = _table(d, c)
    alphas = np.asarray(alphas, dtype=float)
    r, _ = tab.r_values(b, beta)
    n = tab.counts
    pos = n > 0
    return float(
        np.sum(n[pos] * np.log(alphas[pos]))
        + tab.sum_log_rate(b)
        + beta * tab.obs
        - np.sum(alphas * r)
    )


def loglik_poisson(d, b: BaselineSpec, beta: float, c: CarryoverSpec) -> float:
    tab = _table(d, c)
    r, _ = tab.r_values(b, beta)
    return tab.sum_log_rate(b) + beta * tab.obs - float(np.sum(r))


def _frailty_terms(ranks, n, r, phi) -> float:
    # log G(n + 1/phi) - log G(1/phi) + n log phi = sum_{k<n} log(1 + k phi)
    return float(
        np.sum(np.log1p(ranks * phi)) - np.sum((n + 1.0 / phi) * np.log1p(phi * r))
    )


def loglik_random(d, b: BaselineSpec, beta: float, phi: float, c: CarryoverSpec) -> float:
    """Gamma random-effects log likelihood; Poisson limit for ``phi <= 1e-8``."""
    if phi < 0:
        raise ValueError("phi must be >= 0")
    tab = _table(d, c)
    if phi <= PHI_FLOOR:
        return loglik_poisson(tab, b, beta, c)
    r, _ = tab.r_values(b, beta)
    return tab.sum_log_rate(b) + beta * tab.obs + _frailty_terms(tab.ev_rank, tab.counts, r, phi)


def score_beta_random(d, b: BaselineSpec, beta: float, phi: float, c: CarryoverSpec) -> float:
    """Analytic derivative of the random-effects log likelihood in ``beta``."""
    tab = _table(d, c)
    r, dr = tab.r_values(b, beta)
    n = tab.counts
    return float(tab.obs - np.sum((1.0 + n * phi) * dr / (1.0 + phi * r)))


# ---------------------------------------------------------------------------
# Optimization helpers
# ---------------------------------------------------------------------------


@dataclass
class _OptResult:
    x: np.ndarray
    fun: float
    nfev: int
    converged: bool


def nelder_mead(
    f: Callable,
    x0,
    step: float = 0.2,
    xatol: float = 1e-9,
    fatol: float = 1e-10,
    maxfev: int = 100_000,
    max_restarts: int = 5,
) -> _OptResult:
    """Minimize ``f`` by Nelder-Mead, restarting from each solution until stable."""
    x = np.asarray(x0, dtype=float)
    dim = x.size
    nfev = 0
    fun = f(x)
    nfev += 1
    converged = False
    for _ in range(max_restarts + 1):
        simplex = np.vstack([x] + [x + step * np.eye(dim)[i] for i in range(dim)])
        res = minimize(
            f,
            x,
            method="Nelder-Mead",
            options=dict(
                initial_simplex=simplex,
                xatol=xatol,
                fatol=fatol,
                maxfev=max(maxfev - nfev, 1),
            ),
        )
        nfev += res.nfev
        improved = fun - res.fun
        if res.fun <= fun:
            x, fun = res.x, res.fun
        converged = bool(res.success)
        if nfev >= maxfev:
            converged = False
            break
        if improved <= fatol:
            break
        step = max(10 * xatol, min(step, 0.05))
    return _OptResult(np.asarray(x), float(fun), nfev, converged)


def numeric_hessian(f: Callable, x, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian with step ``rel_step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    k = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * h[i] * h[j])
    return H


def _covariance(negll: Callable, theta) -> Optional[np.ndarray]:
    H = numeric_hessian(negll, theta)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.diag(cov) < 0) or not np.all(np.isfinite(cov)):
        return None
    return cov


# ---------------------------------------------------------------------------
# Parameterized models
# ---------------------------------------------------------------------------


class _Model:
    """Maps an unconstrained vector to (baseline, beta, phi) for one dataset."""

    def __init__(self, tab, family, kind, fit_beta=True, fixed_phi=None, fixed_gamma1=None):
        if family not in FAMILIES:
            raise ValueError(f"unknown baseline family {family!r}")
        self.tab, self.family, self.kind = tab, family, kind
        self.fit_beta = fit_beta
        self.fixed_phi = fixed_phi
        names = []
        if family == "constant":
            if kind != "fixed":
                names.append("gamma")
        else:
            if kind != "fixed":
                names.append("gamma1")
            names.append("gamma2")
        if fit_beta:
            names.append("beta")
        if kind == "random" and fixed_phi is None:
            names.append("phi")
        self.names = names
        # sufficient statistics for the constant family
        self.a = tab.at_risk_time()
        self.w = tab.window_time()
        self.n = tab.counts.astype(float)
        self.N = float(tab.counts.sum())
        self.obs = tab.obs
        self.sum_log_t = float(np.sum(np.log(tab.ev_time))) if tab.ev_time.size else 0.0
        # identical (n, a, w) subjects contribute identical terms
        rows, mult = np.unique(np.column_stack([self.n, self.a, self.w]), axis=0, return_counts=True)
        self.g_n, self.g_a, self.g_w = rows.T
        self.g_mult = mult.astype(float)
        rank_counts = np.bincount(tab.ev_rank) if tab.ev_rank.size else np.zeros(0)
        self.rank_k = np.flatnonzero(rank_counts).astype(float)
        self.rank_mult = rank_counts[rank_counts > 0].astype(float)
        self.log_n = np.where(self.g_n > 0, np.log(np.maximum(self.g_n, 1.0)), 0.0)
        self._slots = {name: i for i, name in enumerate(names)}

    def unpack(self, theta):
        p = dict(zip(self.names, theta))
        if self.family == "constant":
            b = Constant(math.exp(p["gamma"])) if "gamma" in p else Constant(1.0)
        else:
            g1 = math.exp(p["gamma1"]) if "gamma1" in p else 1.0
            b = PowerLaw(g1, math.exp(p["gamma2"]))
        beta = p.get("beta", 0.0)
        if self.kind == "random":
            phi = self.fixed_phi if self.fixed_phi is not None else math.exp(
                max(p["phi"], math.log(PHI_FLOOR))
            )
        else:
            phi = None
        return b, beta, phi

    def _r(self, b, beta):
        if isinstance(b, Constant):
            return b.gamma * (self.a + math.expm1(beta) * self.w), b.gamma * self.N
        r, _ = self.tab.r_values(b, beta)
        return r, None

    def _loglik_constant(self, theta) -> float:
        sl = self._slots
        g = math.exp(theta[sl["gamma"]]) if "gamma" in sl else 1.0
        beta = float(theta[sl["beta"]]) if "beta" in sl else 0.0
        r = g * (self.g_a + math.expm1(beta) * self.g_w)
        base = self.N * math.log(g) + beta * self.obs
        mult = self.g_mult
        if self.kind == "fixed":
            pos = self.g_n > 0
            return base - float(np.sum(mult[pos] * self.g_n[pos] * np.log(r[pos])))
        if self.kind == "random":
            if self.fixed_phi is not None:
                phi = self.fixed_phi
            else:
                phi = math.exp(max(theta[sl["phi"]], math.log(PHI_FLOOR)))
            if phi > PHI_FLOOR:
                return base + float(
                    np.dot(self.rank_mult, np.log1p(self.rank_k * phi))
                    - np.dot(mult, (self.g_n + 1.0 / phi) * np.log1p(phi * r))
                )
        return base - float(np.dot(mult, r))

    def gradient_constant(self, theta) -> np.ndarray:
        """Analytic gradient of the constant-family log-likelihood in ``theta``."""
        sl = self._slots
        g = math.exp(theta[sl["gamma"]]) if "gamma" in sl else 1.0
        beta = float(theta[sl["beta"]]) if "beta" in sl else 0.0
        eb = math.exp(beta)
        r = g * (self.g_a + (eb - 1.0) * self.g_w)
        dr_beta = g * eb * self.g_w
        mult = self.g_mult
        grad = np.zeros(len(self.names))
        phi = 0.0
        if self.kind == "random":
            phi = self.fixed_phi if self.fixed_phi is not None else math.exp(
                max(theta[sl["phi"]], math.log(PHI_FLOOR)))
        if self.kind == "fixed":
            pos = self.g_n > 0
            weight = np.where(pos, self.g_n / np.where(pos, r, 1.0), 0.0)
        elif self.kind == "random" and phi > PHI_FLOOR:
            weight = (1.0 + self.g_n * phi) / (1.0 + phi * r)
        else:
            weight = np.ones_like(r)
        if "gamma" in sl:
            grad[sl["gamma"]] = self.N - float(np.dot(mult, weight * r))
        if "beta" in sl:
            grad[sl["beta"]] = self.obs - float(np.dot(mult, weight * dr_beta))
        if "phi" in sl and phi > PHI_FLOOR:
            d_phi = float(np.dot(self.rank_mult, self.rank_k / (1.0 + self.rank_k * phi))) + float(
                np.dot(mult, np.log1p(phi * r) / phi**2 - (self.g_n + 1.0 / phi) * r / (1.0 + phi * r)))
            grad[sl["phi"]] = phi * d_phi
        return grad

    def polish(self, theta, max_iter: int = 20):
        """Newton refinement of a simplex solution for the constant family.

        The simplex stops at a relative objective change near 1e-10, which
        leaves parameter error of order 1e-5; a few Newton steps on the
        analytic gradient bring it to round-off.
        """
        x = np.asarray(theta, dtype=float).copy()
        if "phi" in self._slots and x[self._slots["phi"]] <= math.log(PHI_FLOOR) + 1e-6:
            return x
        f0 = self.loglik(x)
        for _ in range(max_iter):
            g = self.gradient_constant(x)
            h = np.empty((x.size, x.size))
            for j in range(x.size):
                e = np.zeros(x.size)
                e[j] = 1e-5
                h[:, j] = (self.gradient_constant(x + e) - self.gradient_constant(x - e)) / 2e-5
            h = 0.5 * (h + h.T)
            try:
                step = -np.linalg.solve(h, g)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(step)) or np.max(np.abs(step)) > 0.1:
                break
            f1 = self.loglik(x + step)
            if not math.isfinite(f1) or f1 < f0 - 1e-9 * max(1.0, abs(f0)):
                break
            x, f0 = x + step, f1
            if np.max(np.abs(step)) < 1e-13:
                break
        return x

    def loglik(self, theta) -> float:
        if self.family == "constant":
            return self._loglik_constant(theta)
        b, beta, phi = self.unpack(theta)
        if isinstance(b, Constant):
            slr = self.N * math.log(b.gamma)
        else:
            slr = self.N * math.log(b.gamma1 * b.gamma2) + (b.gamma2 - 1.0) * self.sum_log_t
        r, _ = self._r(b, beta)
        base = slr + beta * self.obs
        if self.kind == "fixed":
            return base - _xlogy_sum(self.n, r)
        if self.kind == "poisson" or phi <= PHI_FLOOR:
            return base - float(np.sum(r))
        return base + _frailty_terms(self.tab.ev_rank, self.n, r, phi)

    def negll(self, theta) -> float:
        v = self.loglik(theta)
        return -v if math.isfinite(v) else 1e300

    def start(self):
        x = []
        a_tot = float(self.a.sum())
        rate = self.N / a_tot
        if self.family == "constant":
            if self.kind != "fixed":
                x.append(math.log(rate))
        else:
            if self.kind != "fixed":
                x.append(math.log(rate))
            x.append(0.0)
        if self.fit_beta:
            x.append(0.0)
        if self.kind == "random" and self.fixed_phi is None:
            mu = rate * self.a
            denom = float(np.sum(mu**2))
            phi0 = float(np.sum((self.n - mu) ** 2 - self.n)) / denom if denom > 0 else 0.1
            x.append(math.log(min(max(phi0, 0.05), 5.0)))
        return np.array(x)

    def named_params(self, theta) -> dict:
        b, beta, phi = self.unpack(theta)
        out = {k: float(v) for k, v in b.params.items()}
        out["beta"] = float(beta)
        if phi is not None:
            out["phi"] = phi
        return out


_LOG_SCALE = {"gamma", "gamma1", "gamma2", "phi"}


def _std_errors(model: _Model, theta, params) -> tuple:
    if not model.names:
        return {}, []
    cov = _covariance(model.negll, theta)
    notes = []
    if cov is None:
        notes.append("observed information not positive definite; standard errors unavailable")
        return {k: float("nan") for k in model.names}, notes
    se = {}
    for i, name in enumerate(model.names):
        s = math.sqrt(cov[i, i])
        se[name] = params[name] * s if name in _LOG_SCALE else s
    return se, notes


def _check_events(tab):
    if tab.counts.sum() == 0:
        raise ValueError("no events in dataset")


def _run(
    model: _Model,
    meta: dict,
    start=None,
    extra_params: int = 0,
    compute_se: bool = True,
    optimize: bool = True,
) -> FitResult:
    theta0 = model.start() if start is None else np.asarray(start, dtype=float)
    if model.names and optimize:
        opt = nelder_mead(model.negll, theta0)
        theta, nfev, converged = opt.x, opt.nfev, opt.converged
        if model.family == "constant":
            theta = model.polish(theta)
    else:
        theta, nfev, converged = theta0, 1, True
    if not converged:
        log.warning("optimizer did not converge (%s)", meta.get("model"))
    params = model.named_params(theta)
    se, notes = _std_errors(model, theta, params) if compute_se else ({}, [])
    boundary = False
    if "phi" in model.names and params["phi"] <= PHI_FLOOR * (1 + 1e-9):
        boundary = True
        se["phi"] = float("nan")
        notes.append("phi estimate on the lower boundary 1e-8")
    meta = dict(meta, notes=notes + meta.get("notes", []), theta=theta.tolist(),
                free=list(model.names))
    return FitResult(
        params=params,
        std_errors=se,
        loglik=model.loglik(theta),
        n_params=len(model.names) + extra_params,
        converged=converged,
        n_evaluations=nfev,
        boundary=boundary,
        meta=meta,
    )


def _meta(d, model, family, c) -> dict:
    return {
        "model": model,
        "family": family,
        "delta": c.delta,
        "threshold": c.prior_event_threshold,
        "dataset_hash": d.digest if isinstance(d, Dataset) else None,
    }


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------


def fit_fixed(
    d: Dataset,
    family: str,
    c: CarryoverSpec,
    constrain_beta_zero: bool = False,
    compute_se: bool = True,
) -> FitResult:
    """Maximize the fixed-effects profile likelihood.

    The scale of ``rho0`` is not identifiable alongside free ``alpha_i``, so
    ``gamma`` (constant family) or ``gamma1`` (power law) is held at 1. The
    reported log likelihood is the full fixed-effects value at the profiled
    ``alpha_i = n_i / R_i`` and ``n_params`` counts the ``m`` subject rates.
    """
    tab = _table(d, c)
    _check_events(tab)
    model = _Model(tab, family, "fixed", fit_beta=not constrain_beta_zero)
    meta = _meta(d, "fixed", family, c)
    scale = "gamma" if family == "constant" else "gamma1"
    meta["notes"] = [f"{scale} fixed at 1: not identifiable with subject-specific rates"]
    fit = _run(model, meta, extra_params=tab.m, compute_se=compute_se)
    b, beta, _ = model.unpack(np.array(fit.meta["theta"]))
    r, _ = tab.r_values(b, beta)
    n = tab.counts
    with np.errstate(divide="ignore", invalid="ignore"):
        alphas = np.where(n > 0, n / r, 0.0)
    fit.fixed_effect_alphas = alphas
    fit.loglik = fit.loglik + float(np.sum(n[n > 0] * (np.log(n[n > 0]) - 1.0)))
    return fit


def fit_random(
    d: Dataset,
    family: str,
    c: CarryoverSpec,
    constrain_beta_zero: bool = False,
    phi: Optional[float] = None,
    start=None,
    compute_se: bool = True,
) -> FitResult:
    """Maximize the gamma random-effects likelihood.

    Pass ``phi`` to hold the frailty variance fixed. Standard errors come
    from a numeric Hessian on the optimization scale and the delta method.
    """
    tab = _table(d, c)
    _check_events(tab)
    model = _Model(tab, family, "random", fit_beta=not constrain_beta_zero, fixed_phi=phi)
    meta = _meta(d, "random", family, c)
    if phi is not None:
        meta["notes"] = [f"phi held at {phi}"]
    return _run(model, meta, start=start, compute_se=compute_se)


def fit_poisson(
    d: Dataset,
    family: str,
    c: CarryoverSpec,
    constrain_beta_zero: bool = False,
    compute_se: bool = True,
) -> FitResult:
    """Fit the carryover model without heterogeneity (common rate)."""
    tab = _table(d, c)
    _check_events(tab)
    model = _Model(tab, family, "poisson", fit_beta=not constrain_beta_zero)
    if family == "constant" and constrain_beta_zero:
        # closed-form MLE: total events over total at-risk time
        theta = np.array([math.log(model.N / model.a.sum())])
        return _run(model, _meta(d, "poisson", family, c), start=theta,
                    compute_se=compute_se, optimize=False)
    return _run(model, _meta(d, "poisson", family, c), compute_se=compute_se)


_FITTERS = {"fixed": fit_fixed, "random": fit_random, "poisson": fit_poisson}


def fit_model(d, model: str, family: str, c: CarryoverSpec, constrain_beta_zero=False):
    try:
        fitter = _FITTERS[model]
    except KeyError:
        raise ValueError(f"unknown model {model!r}") from None
    return fitter(d, family, c, constrain_beta_zero=constrain_beta_zero)


def baseline_from_params(family: str, params: dict) -> BaselineSpec:
    if family == "constant":
        return Constant(params.get("gamma", 1.0))
    return PowerLaw(params.get("gamma1", 1.0), params["gamma2"])


@dataclass
class DeltaProfile:
    fits: list  # (delta, FitResult) ordered by delta
    best_by_loglik: float
    best_by_aic: float


def profile_delta(
    d: Dataset,
    family: str,
    delta_grid: Sequence[float],
    model: str = "random",
    threshold: int = 1,
) -> DeltaProfile:
    """One full fit per window length, ordered by window length."""
    grid = sorted(float(x) for x in delta_grid)
    if not grid:
        raise ValueError("delta grid is empty")
    fits = [(dl, fit_model(d, model, family, CarryoverSpec(dl, threshold))) for dl in grid]
    best_ll = max(fits, key=lambda p: p[1].loglik)[0]
    best_aic = min(fits, key=lambda p: p[1].aic)[0]
    return DeltaProfile(fits, best_ll, best_aic)
