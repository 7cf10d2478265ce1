"""Tests of no carryover effect (``beta = 0``).

Score statistics take the form ``(Obs - Exp) / sqrt(Var)`` where ``Obs``
counts events falling inside a carryover window and ``Exp`` is its
estimate under ``beta = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np
from scipy import stats

from .core import (
    BaselineSpec,
    CarryoverSpec,
    Constant,
    Dataset,
    FitResult,
    PowerLaw,
    TestResult,
    _arrays_from_parts,
)
from .estimate import (
    PHI_FLOOR,
    _Model,
    _table,
    baseline_from_params,
    fit_fixed,
    fit_poisson,
    fit_random,
    numeric_hessian,
)
from .parallel import run_replicates
from .simulate import _simulate_batch, sample_conditional_event_times, substream


def _normal_p(s: float, two_sided: bool) -> float:
    if two_sided:
        return float(2.0 * stats.norm.sf(abs(s)))
    return float(stats.norm.sf(s))


def _derivs(tab, b: BaselineSpec):
    """``R``, ``dR/dbeta`` and their gamma-gradients at ``beta = 0``.

    Returns per-subject arrays ``(A, W, dA, dW)`` with ``dA``/``dW`` of shape
    ``(m, k)`` over the baseline parameters in natural scale.
    """
    A = tab.at_risk_integral(b)
    W = tab.window_integral(b)
    if isinstance(b, Constant):
        dA = (A / b.gamma)[:, None]
        dW = (W / b.gamma)[:, None]
    elif isinstance(b, PowerLaw):
        da2, dw2 = tab.powerlaw_gamma2_derivatives(b)
        dA = np.column_stack([A / b.gamma1, da2])
        dW = np.column_stack([W / b.gamma1, dw2])
    else:
        raise TypeError("analytic derivatives need a parametric baseline")
    return A, W, dA, dW


# ---------------------------------------------------------------------------
# Fixed effects
# ---------------------------------------------------------------------------


def fixed_score_numerator(d, b: BaselineSpec, c: CarryoverSpec):
    """``(Obs, Exp)`` with ``Exp = sum_i n_i int Z rho0 / int rho0``.

    The subject sum is correctly rounded, so the result does not depend on
    subject order.
    """
    tab = _table(d, c)
    A = tab.at_risk_integral(b)
    W = tab.window_integral(b)
    n = tab.counts
    pos = n > 0
    return tab.obs, math.fsum(n[pos] * W[pos] / A[pos])


def score_test_fixed(
    d: Dataset, family: str, c: CarryoverSpec, two_sided: bool = False
) -> TestResult:
    """Score test of ``beta = 0`` in the fixed-effects model."""
    tab = _table(d, c)
    n = tab.counts.astype(float)
    if n.sum() < 1:
        raise ValueError("no events in dataset")
    params = {}
    if family == "constant":
        b = Constant(1.0)
    else:
        null = fit_fixed(tab, family, c, constrain_beta_zero=True, compute_se=False)
        b = baseline_from_params(family, null.params)
        params = dict(null.params)
    obs, exp = fixed_score_numerator(tab, b, c)
    if family == "constant":
        A = tab.at_risk_integral(b)
        W = tab.window_integral(b)
        pos = n > 0
        p = W[pos] / A[pos]
        var = float(np.sum(n[pos] * p * (1.0 - p)))
    else:
        model = _Model(tab, family, "fixed", fit_beta=True)
        theta = np.array([math.log(b.gamma2), 0.0])
        H = -numeric_hessian(model.loglik, theta)
        var = float(H[1, 1] - H[1, 0] ** 2 / H[0, 0])
    if not var > 0:
        raise ValueError("score variance is zero: no carryover exposure")
    s = (obs - exp) / math.sqrt(var)
    return TestResult(s, obs, exp, var, _normal_p(s, two_sided), "normal", params=params)


# ---------------------------------------------------------------------------
# Random effects
# ---------------------------------------------------------------------------


@dataclass
class InformationBlocks:
    i_bb: float
    i_bg: np.ndarray
    i_bp: Optional[float]
    i_nuisance: np.ndarray

    def score_variance(self) -> float:
        cross = self.i_bg if self.i_bp is None else np.append(self.i_bg, self.i_bp)
        v = self.i_bb - cross @ np.linalg.solve(self.i_nuisance, cross)
        return float(v)


def random_score_numerator(d, b: BaselineSpec, phi: float, c: CarryoverSpec):
    """``(Obs, Exp)`` for the gamma random-effects score at ``beta = 0``.

    ``Exp = sum_i (1 + n_i phi) int Z rho0 / (1 + phi int rho0)``; ``phi = 0``
    gives the Poisson form.
    """
    if phi < 0:
        raise ValueError("phi must be >= 0")
    tab = _table(d, c)
    A = tab.at_risk_integral(b)
    W = tab.window_integral(b)
    n = tab.counts
    return tab.obs, float(np.sum((1.0 + n * phi) * W / (1.0 + phi * A)))


def beta_information(d, b: BaselineSpec, phi: float, c: CarryoverSpec):
    """Analytic ``(I_bb, I_bgamma, I_bphi)`` at ``beta = 0``.

    Written as ``(1 + n phi) / (1 + phi R)^2`` weights so that ``phi = 0``
    gives the Poisson limit.
    """
    tab = _table(d, c)
    A, W, dA, dW = _derivs(tab, b)
    n = tab.counts.astype(float)
    q = 1.0 + phi * A
    wgt = (1.0 + n * phi) / q**2
    i_bb = float(np.sum(wgt * (q * W - phi * W**2)))
    i_bg = np.sum(wgt[:, None] * (q[:, None] * dW - phi * W[:, None] * dA), axis=0)
    i_bp = float(np.sum(W * (n - A) / q**2))
    return i_bb, i_bg, i_bp


def _log_term_curvature(x: np.ndarray) -> np.ndarray:
    """``-2 log1p(x) + 2x/(1+x) + x^2/(1+x)^2`` without cancellation at small x."""
    x = np.asarray(x, dtype=float)
    out = -2.0 * np.log1p(x) + 2.0 * x / (1.0 + x) + (x / (1.0 + x)) ** 2
    small = x < 0.1
    if np.any(small):
        xs = x[small]
        acc = np.zeros_like(xs)
        for j in range(25, 2, -1):
            acc = acc * xs + (-1.0) ** (j + 1) * (3.0 - j - 2.0 / j)
        out[small] = acc * xs**3
    return out


def _nuisance_information_constant(tab, gamma, phi, free_phi) -> np.ndarray:
    """Exact negative Hessian of the constant-baseline null in (gamma, phi)."""
    m = _Model(tab, "constant", "random" if phi > 0 else "poisson", fit_beta=False)
    n, a, mult = m.g_n, m.g_a, m.g_mult
    if phi <= 0:
        return np.array([[m.N / gamma**2]])
    r = gamma * a
    x = phi * r
    i_gg = m.N / gamma**2 - float(np.dot(mult, (1.0 + n * phi) * phi * a**2 / (1.0 + x) ** 2))
    if not free_phi:
        return np.array([[i_gg]])
    i_gp = float(np.dot(mult, a * (n - r) / (1.0 + x) ** 2))
    k = m.rank_k
    i_pp = float(np.dot(m.rank_mult, k**2 / (1.0 + k * phi) ** 2)) - float(
        np.dot(mult, _log_term_curvature(x) / phi**3 + n * r**2 / (1.0 + x) ** 2))
    return np.array([[i_gg, i_gp], [i_gp, i_pp]])


def _nuisance_information(tab, family, b, phi, free_phi, c) -> np.ndarray:
    """Negative Hessian of the null log likelihood in natural (gamma, phi)."""
    if family == "constant":
        return _nuisance_information_constant(tab, b.gamma, phi, free_phi)
    kind = "random" if phi > 0 else "poisson"
    model = _Model(
        tab, family, kind, fit_beta=False, fixed_phi=None if free_phi else phi
    )
    nat = list(b.params.values())
    if free_phi:
        nat.append(phi)
    nat = np.asarray(nat, dtype=float)
    theta = np.log(nat)
    H = numeric_hessian(model.loglik, theta)
    # gradient on the log scale (zero at the null MLE, kept for accuracy)
    g = np.empty(theta.size)
    h = 1e-4 * np.maximum(1.0, np.abs(theta))
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = h[i]
        g[i] = (model.loglik(theta + e) - model.loglik(theta - e)) / (2 * h[i])
    H_nat = H / np.outer(nat, nat) - np.diag(g / nat**2)
    return -H_nat


def information_blocks(
    d, family: str, b: BaselineSpec, phi: float, c: CarryoverSpec, free_phi: bool = True
) -> InformationBlocks:
    tab = _table(d, c)
    i_bb, i_bg, i_bp = beta_information(tab, b, phi, c)
    nuis = _nuisance_information(tab, family, b, phi, free_phi and phi > 0, c)
    return InformationBlocks(i_bb, i_bg, i_bp if (free_phi and phi > 0) else None, nuis)


def _null_fit(tab, family, c, phi, start=None) -> FitResult:
    if phi is None:
        return fit_random(tab, family, c, constrain_beta_zero=True, start=start, compute_se=False)
    if phi <= 0:
        return fit_poisson(tab, family, c, constrain_beta_zero=True, compute_se=False)
    return fit_random(tab, family, c, constrain_beta_zero=True, phi=phi, compute_se=False)


def score_test_random(
    d: Dataset,
    family: str,
    c: CarryoverSpec,
    phi: Optional[float] = None,
    two_sided: bool = False,
    start=None,
) -> TestResult:
    """Score test of ``beta = 0`` under gamma random effects.

    The null model is refitted unless ``phi`` is given, in which case the
    frailty variance is held there and only the baseline is refitted. An
    estimate on the ``phi`` boundary falls back to the Poisson form.
    """
    tab = _table(d, c)
    if tab.counts.sum() < 1:
        raise ValueError("no events in dataset")
    null = _null_fit(tab, family, c, phi, start)
    notes = []
    free_phi = phi is None
    phi_t = null.params.get("phi", 0.0)
    if null.boundary or phi_t <= PHI_FLOOR:
        notes.append("phi on boundary: Poisson score form used")
        phi_t, free_phi = 0.0, False
    b = baseline_from_params(family, null.params)
    obs, exp = random_score_numerator(tab, b, phi_t, c)
    blocks = information_blocks(tab, family, b, phi_t, c, free_phi=free_phi)
    var = blocks.score_variance()
    if not var > 0:
        raise ValueError(f"non-positive score variance {var}")
    s = (obs - exp) / math.sqrt(var)
    params = dict(null.params)
    params["phi"] = phi_t
    result = TestResult(s, obs, exp, var, _normal_p(s, two_sided), "normal", notes, params)
    result.params["_theta"] = null.meta["theta"]
    return result


def score_test_poisson(d: Dataset, family: str, c: CarryoverSpec, two_sided=False) -> TestResult:
    """Score test ignoring heterogeneity (``phi = 0``)."""
    return score_test_random(d, family, c, phi=0.0, two_sided=two_sided)


# ---------------------------------------------------------------------------
# Wald and likelihood ratio
# ---------------------------------------------------------------------------


def wald_test(fit: FitResult) -> TestResult:
    """``Z^2 = beta_hat^2 / Var(beta_hat)`` referred to chi-square(1)."""
    if "beta" not in fit.params or "beta" not in fit.std_errors:
        raise ValueError("fit has no standard error for beta")
    beta, se = fit.params["beta"], fit.std_errors["beta"]
    if not (math.isfinite(se) and se > 0):
        raise ValueError(f"unusable standard error {se}")
    z2 = (beta / se) ** 2
    return TestResult(z2, float("nan"), float("nan"), se**2, float(stats.chi2.sf(z2, 1)), "chi2")


def lr_test(fit_null: FitResult, fit_full: FitResult) -> TestResult:
    h0, h1 = fit_null.meta.get("dataset_hash"), fit_full.meta.get("dataset_hash")
    if h0 is not None and h1 is not None and h0 != h1:
        raise ValueError("fits were computed on different datasets")
    notes = []
    stat = 2.0 * (fit_full.loglik - fit_null.loglik)
    if stat < 0:
        notes.append("full fit below null fit: optimizer failure suspected; statistic floored at 0")
        stat = 0.0
    if fit_full.meta.get("model") == "fixed":
        notes.append("fixed-effects LR is not chi-square when m grows with tau fixed")
    return TestResult(stat, float("nan"), float("nan"), float("nan"),
                      float(stats.chi2.sf(stat, 1)), "chi2", notes)


# ---------------------------------------------------------------------------
# Bootstrap p-values
# ---------------------------------------------------------------------------


def bootstrap_p(observed: float, replicates, two_sided: bool = False) -> float:
    """``(1 + #{S* >= S}) / (B + 1)``; squared statistics when two-sided."""
    reps = np.asarray(replicates, dtype=float)
    if two_sided:
        k = np.sum(reps**2 >= observed**2)
    else:
        k = np.sum(reps >= observed)
    return float((1 + k) / (reps.size + 1))


def _fixed_replicate(r, *, counts, tau, b, family, c, seed, two_sided):
    rng = substream(seed, "bootstrap", r)
    times = np.concatenate(
        [sample_conditional_event_times(int(k), b, t, rng) for k, t in zip(counts, tau)]
    ) if counts.sum() else np.empty(0)
    d = _arrays_from_parts(times, times, counts, tau)
    try:
        return score_test_fixed(d, family, c, two_sided).statistic
    except ValueError:
        return float("nan")


def bootstrap_pvalue_fixed(
    d: Dataset,
    family: str,
    c: CarryoverSpec,
    B: int,
    seed: int = 0,
    two_sided: bool = False,
    threads: int = 1,
) -> TestResult:
    """Conditional bootstrap: event times redrawn given each ``n_i``."""
    if B < 1:
        raise ValueError("B must be >= 1")
    if d.has_resolution_times:
        raise ValueError("conditional bootstrap needs subjects always at risk")
    observed = score_test_fixed(d, family, c, two_sided)
    b = Constant(1.0) if family == "constant" else baseline_from_params(family, observed.params)
    a = d.arrays
    fn = partial(_fixed_replicate, counts=a.counts, tau=a.tau, b=b, family=family, c=c,
                 seed=seed, two_sided=two_sided)
    reps = np.asarray(run_replicates(fn, B, threads))
    ok = ~np.isnan(reps)
    notes = list(observed.notes)
    if not ok.all():
        notes.append(f"{int((~ok).sum())} replicates had zero variance and count as not exceeding")
    p = bootstrap_p(observed.statistic, reps[ok], two_sided) * (ok.sum() + 1) / (B + 1)
    return TestResult(observed.statistic, observed.obs, observed.exp, observed.variance,
                      p, f"bootstrap(B={B})", notes, observed.params)


def infer_refractory(d: Dataset) -> float:
    if not d.has_resolution_times:
        return 0.0
    a = d.arrays
    return float(np.median(a.resumptions - a.times)) if a.times.size else 0.0


def _random_replicate(r, *, tau, b, phi, family, c, refractory, seed, start):
    rng = substream(seed, "bootstrap", r)
    m = tau.size
    alpha = rng.gamma(1.0 / phi, phi, size=m) if phi > 0 else np.ones(m)
    times, counts, res = _simulate_batch(alpha, tau, b, 0.0, c, refractory, rng)
    d = _arrays_from_parts(times, res, counts, tau)
    try:
        return score_test_random(d, family, c, start=start).statistic
    except ValueError:
        return float("nan")


def bootstrap_pvalue_random(
    d: Dataset,
    family: str,
    c: CarryoverSpec,
    B: int,
    seed: int = 0,
    refractory: Optional[float] = None,
    threads: int = 1,
) -> TestResult:
    """Parametric bootstrap of ``S^2`` from the fitted null random-effects model."""
    if B < 1:
        raise ValueError("B must be >= 1")
    observed = score_test_random(d, family, c)
    phi = observed.params["phi"]
    b = baseline_from_params(family, observed.params)
    if refractory is None:
        refractory = infer_refractory(d)
    fn = partial(_random_replicate, tau=d.arrays.tau, b=b, phi=phi, family=family, c=c,
                 refractory=refractory, seed=seed, start=observed.params["_theta"])
    reps = np.asarray(run_replicates(fn, B, threads))
    ok = ~np.isnan(reps)
    k = int(np.sum(reps[ok] ** 2 >= observed.statistic**2))
    notes = list(observed.notes)
    if not ok.all():
        notes.append(f"{int((~ok).sum())} replicates failed and count as not exceeding")
    return TestResult(observed.statistic, observed.obs, observed.exp, observed.variance,
                      (1 + k) / (B + 1), f"bootstrap(B={B})", notes, observed.params)


def choose_p_source(d: Dataset, c: CarryoverSpec) -> str:
    """Normal approximation for large, event-rich data with a non-tiny window."""
    a = d.arrays
    n_mean = a.counts.mean() if a.counts.size else 0.0
    tab = _table(d, c)
    rate = a.counts.sum() / max(tab.at_risk_time().sum(), 1e-300)
    if d.m >= 100 and n_mean >= 2 and rate * c.delta >= 0.02:
        return "normal"
    return "bootstrap"
