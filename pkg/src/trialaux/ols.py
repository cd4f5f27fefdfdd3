"""QR-based least squares and the complete-case covariate-adjusted analysis.

The final-outcome analysis regresses the 24-month value on its baseline
value, the extra covariate and the arm indicator, using only subjects with
the final outcome observed.  Reported p-values downstream use the normal
reference; at the residual degrees of freedom in play the difference from
the t reference is negligible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .datagen import TrialDataset
from .exceptions import InsufficientDataError, SingularDesignError


@dataclass
class FitResult:
    coefficients: np.ndarray
    covariance: np.ndarray
    residual_sd: float
    n_used: int
    dof: int


@dataclass
class EffectEstimate:
    """Scalar treatment-effect estimate with its standard error."""

    estimate: float
    se: float
    scale: str
    n_complete: int
    method: str

    def __post_init__(self):
        if not np.isfinite(self.estimate):
            raise ValueError("estimate must be finite")
        if not (np.isfinite(self.se) and self.se > 0.0):
            raise ValueError("se must be positive and finite")


def fit_ols(design: np.ndarray, response: np.ndarray) -> FitResult:
    """Least squares via the thin QR factorization.

    The covariance is ``sigma^2 (D'D)^{-1}`` with ``sigma^2 = RSS / dof``.
    Rank deficiency raises :class:`SingularDesignError` naming the first
    offending column.
    """
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    if design.ndim != 2:
        raise ValueError("design must be a 2-d matrix")
    n, p = design.shape
    if response.shape != (n,):
        raise ValueError("response length does not match design")
    if n <= p:
        raise InsufficientDataError(f"need more rows ({n}) than columns ({p})")
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    tol = np.finfo(float).eps * max(n, p) * (diag.max() if diag.size else 0.0)
    bad = np.flatnonzero(diag <= tol)
    if bad.size:
        raise SingularDesignError(f"design column {bad[0]} is linearly dependent", bad[0])
    coef = solve_triangular(r, q.T @ response)
    resid = response - design @ coef
    rss = float(resid @ resid)
    dof = n - p
    sigma2 = rss / dof
    rinv = solve_triangular(r, np.eye(p))
    return FitResult(
        coefficients=coef,
        covariance=sigma2 * (rinv @ rinv.T),
        residual_sd=float(np.sqrt(sigma2)),
        n_used=n,
        dof=dof,
    )


def ancova_design(baseline: np.ndarray, covariate: np.ndarray, arm: np.ndarray) -> np.ndarray:
    """Design [1, baseline, covariate, arm]; the arm coefficient is the effect."""
    return np.column_stack([np.ones(len(arm)), baseline, covariate, arm])


ARM_COLUMN = 3


def ancova_complete_case(ds: TrialDataset, scale: str = "z") -> EffectEstimate:
    """Arm effect on the final outcome, complete cases only."""
    baseline, _, final = ds.columns(scale)
    mask = ds.obs_y
    m = int(mask.sum())
    if m < 6:
        raise InsufficientDataError(f"only {m} complete cases")
    design = ancova_design(baseline[mask], ds.covariate[mask], ds.arm[mask])
    fit = fit_ols(design, final[mask])
    return EffectEstimate(
        estimate=float(fit.coefficients[ARM_COLUMN]),
        se=float(np.sqrt(fit.covariance[ARM_COLUMN, ARM_COLUMN])),
        scale=scale,
        n_complete=m,
        method="CC",
    )


def ancova_fit(ds: TrialDataset, scale: str = "z") -> FitResult:
    """Full complete-case fit (all coefficients), for Bayesian initialization."""
    baseline, _, final = ds.columns(scale)
    mask = ds.obs_y
    if int(mask.sum()) < 6:
        raise InsufficientDataError(f"only {int(mask.sum())} complete cases")
    design = ancova_design(baseline[mask], ds.covariate[mask], ds.arm[mask])
    return fit_ols(design, final[mask])
