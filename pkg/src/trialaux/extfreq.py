"""Minimum-variance and minimum-MSE combination with external summaries.

A main-data estimate ``theta_hat`` is combined with an internal auxiliary
estimate ``psi_hat`` and an external counterpart ``psi_check`` through the
linear family ``theta_hat + lam * (psi_hat - psi_check)``.  The
minimum-variance weight divides by ``var(delta_hat)``; the minimum-MSE
weight additionally adds the squared observed discrepancy to the
denominator, which adaptively suppresses a conflicting external source.
Interval estimation and testing for the minimum-MSE combination use a
parametric bootstrap of the fitted normal model, since its limit law is
not normal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .datagen import TrialDataset
from .exceptions import DegenerateVarianceError, InsufficientDataError, TrialAuxWarning
from .ols import ARM_COLUMN, ancova_design, fit_ols
from .rngdist import RngStream

_Z975 = 1.959963984540054


def _normal_two_sided_p(estimate: float, se: float) -> float:
    from scipy.special import ndtr

    return float(2.0 * ndtr(-abs(estimate) / se))


@dataclass
class SummaryStat:
    """Published-style summary: estimate, variance and backing sample size."""

    estimate: float
    variance: float
    n: int
    label: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.variance) and self.variance > 0.0):
            raise DegenerateVarianceError(f"variance must be positive, got {self.variance}")


@dataclass
class CombinedEstimate:
    estimate: float
    se: float
    lam: float
    delta_hat: float
    method: str
    ci_low: float = np.nan
    ci_high: float = np.nan
    p_value: float = np.nan
    bootstrap_b: int = 0


@dataclass
class CombinationSetting:
    """Everything the parametric bootstrap needs about one combination."""

    theta_hat: SummaryStat
    psi_hat: SummaryStat
    psi_check: SummaryStat
    cov_theta_psi: float


def joint_moments(ds: TrialDataset, rng: RngStream, b: int = 2000, scale: str = "z", strict: bool = False):
    """Joint estimate of the 24-month and 12-month arm effects on main data.

    The 24-month effect uses the complete cases, the 12-month effect the
    intermediate-observed cases, and their joint covariance comes from a
    nonparametric bootstrap over subjects (no closed form is available for
    the overlap).  Returns (theta_hat, psi_hat, 2x2 covariance).
    """
    if b < 500:
        msg = f"b={b} bootstrap resamples give an imprecise covariance"
        if strict:
            raise ValueError(msg)
        warnings.warn(msg, TrialAuxWarning)

    def both_effects(d: TrialDataset):
        baseline, intermediate, final = d.columns(scale)
        my = d.obs_y
        mz = d.obs_z
        if int(my.sum()) < 6 or int(mz.sum()) < 6:
            raise InsufficientDataError("resample lost too many observed outcomes")
        fit_y = fit_ols(ancova_design(baseline[my], d.covariate[my], d.arm[my]), final[my])
        fit_z = fit_ols(ancova_design(baseline[mz], d.covariate[mz], d.arm[mz]), intermediate[mz])
        return fit_y, fit_z

    fit_y, fit_z = both_effects(ds)
    theta = SummaryStat(
        estimate=float(fit_y.coefficients[ARM_COLUMN]),
        variance=float(fit_y.covariance[ARM_COLUMN, ARM_COLUMN]),
        n=ds.m,
        label="theta_hat",
    )
    psi = SummaryStat(
        estimate=float(fit_z.coefficients[ARM_COLUMN]),
        variance=float(fit_z.covariance[ARM_COLUMN, ARM_COLUMN]),
        n=ds.m_z,
        label="psi_hat_internal",
    )
    g = rng.generator()
    pairs = np.empty((b, 2))
    for i in range(b):
        idx = g.integers(0, ds.n, size=ds.n)
        fy, fz = both_effects(ds.take(idx))
        pairs[i, 0] = fy.coefficients[ARM_COLUMN]
        pairs[i, 1] = fz.coefficients[ARM_COLUMN]
    return theta, psi, np.cov(pairs.T)


def mvar_combine(
    theta_hat: SummaryStat,
    psi_hat: SummaryStat,
    psi_check: SummaryStat,
    cov_theta_psi: float,
) -> CombinedEstimate:
    """Minimum-variance combination (unbiased when the sources agree).

    The external summary is treated as independent of every main-data
    statistic, so ``var(delta_hat) = var(psi_hat) + var(psi_check)`` and
    ``cov(theta_hat, delta_hat) = cov(theta_hat, psi_hat)``.
    """
    delta = psi_hat.estimate - psi_check.estimate
    var_delta = psi_hat.variance + psi_check.variance
    if var_delta <= 0.0:
        raise DegenerateVarianceError("var(delta_hat) must be positive")
    lam = -cov_theta_psi / var_delta
    estimate = theta_hat.estimate + lam * delta
    variance = theta_hat.variance - cov_theta_psi**2 / var_delta
    se = float(np.sqrt(max(variance, 1e-300)))
    return CombinedEstimate(
        estimate=float(estimate),
        se=se,
        lam=float(lam),
        delta_hat=float(delta),
        method="MVAR",
        ci_low=float(estimate - _Z975 * se),
        ci_high=float(estimate + _Z975 * se),
        p_value=_normal_two_sided_p(estimate, se),
    )


def mmse_combine(
    theta_hat: SummaryStat,
    psi_hat: SummaryStat,
    psi_check: SummaryStat,
    cov_theta_psi: float,
) -> CombinedEstimate:
    """Minimum-MSE combination; the squared discrepancy inflates the denominator.

    The reported se is the plug-in root MSE.  Interval and p-value fields
    are left empty here; fill them with :func:`mmse_bootstrap_inference`.
    """
    delta = psi_hat.estimate - psi_check.estimate
    denom = psi_hat.variance + psi_check.variance + delta * delta
    if denom <= 0.0:
        raise DegenerateVarianceError("MSE denominator must be positive")
    lam = -cov_theta_psi / denom
    estimate = theta_hat.estimate + lam * delta
    mse = theta_hat.variance - cov_theta_psi**2 / denom
    return CombinedEstimate(
        estimate=float(estimate),
        se=float(np.sqrt(max(mse, 1e-300))),
        lam=float(lam),
        delta_hat=float(delta),
        method="MMSE",
    )


def mmse_bootstrap_inference(
    setting: CombinationSetting,
    b: int,
    rng: RngStream,
    null_theta: float = 0.0,
):
    """Percentile interval and two-sided p-value for the minimum-MSE estimate.

    Draws ``(theta_hat*, psi_hat*, psi_check*)`` from the fitted joint
    normal with the discrepancy recentred at zero -- the regime in which the
    nonnormal limit applies and the narrower intervals are valid -- and
    recomputes the combination per draw.  The 95% interval takes percentiles
    of the recentred distribution around the observed estimate; the p-value
    is the two-sided tail frequency of the statistic simulated under
    ``theta = null_theta``.
    """
    if b < 2000:
        raise ValueError(f"need at least 2000 bootstrap draws, got {b}")
    th, ph, pc = setting.theta_hat, setting.psi_hat, setting.psi_check
    cov = np.array([
        [th.variance, setting.cov_theta_psi],
        [setting.cov_theta_psi, ph.variance],
    ])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # degenerate when psi_hat is theta_hat itself; fall back to the
        # nearest PSD factor via eigendecomposition
        w, v = np.linalg.eigh(cov)
        chol = v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
    g = rng.generator()
    e = g.standard_normal((b, 2)) @ chol.T
    e_check = np.sqrt(pc.variance) * g.standard_normal(b)
    delta_star = e[:, 1] - e_check
    denom = ph.variance + pc.variance + delta_star * delta_star
    correction = setting.cov_theta_psi * delta_star / denom
    pivot = e[:, 0] - correction
    observed = mmse_combine(th, ph, pc, setting.cov_theta_psi).estimate
    ci_low, ci_high = np.quantile(observed + pivot, (0.025, 0.975))
    p_value = float(np.mean(np.abs(pivot) >= abs(observed - null_theta)))
    return float(ci_low), float(ci_high), p_value
