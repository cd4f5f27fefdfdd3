"""Estimators that recover precision from the trial's own auxiliary data.

Three routes are provided:

* double regression -- compose the intermediate-outcome regression (all
  subjects with a 12-month value) with the conditional final-outcome
  regression (complete cases);
* a two-stage rate estimate for binary endpoints built from the law of
  total probability;
* sequential AIPW -- per-arm regression, prediction, re-regression and
  marginalization, with an influence-based variance that is robust to
  misspecification of the working models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import TrialDataset
from .exceptions import DataStateError, EmptyStratumError, InsufficientDataError
from .ols import ARM_COLUMN, EffectEstimate, ancova_design, fit_ols
from .rngdist import RngStream


@dataclass
class DRegComponents:
    """Pieces of the double-regression composition."""

    bz: np.ndarray              # intermediate-model coefficients (on T)
    bz_cov: np.ndarray
    beta: np.ndarray            # final-model coefficients on T given the intermediate
    gamma: float                # final-model coefficient on the intermediate
    beta_gamma_cov: np.ndarray  # joint covariance of (beta..., gamma)
    pi: float                   # m / m_Z
    rho_resid: float            # residual correlation of the two outcomes


@dataclass
class BinaryAuxEstimate:
    p_tilde: float
    p_z: float
    p_y_given_z: float
    p_y_given_zbar: float
    variance: float


@dataclass
class AipwComponents:
    eta: dict            # per-arm stage-1 coefficients
    zeta: dict           # per-arm stage-2 coefficients
    y_hat: dict          # per-arm stage-1 predictions over all subjects
    y_tilde: dict        # per-arm stage-2 predictions over all subjects
    mu: dict             # per-arm marginal means
    weights: dict        # empirical arm/observation probabilities
    influence: np.ndarray


def dreg_from_arrays(design_z, z, design_y_t, y, arm_col: int):
    """Double regression on explicit design matrices.

    ``design_z`` (rows with the intermediate observed) regresses the
    intermediate on T; ``design_y_t`` and the matching intermediate column
    appended to it (complete-case rows) regress the final outcome on T and
    the intermediate.  Returns the treatment element of the composed
    coefficient vector, its delta-method variance and the components.

    The two regressions' error terms are independent (the conditional
    model's residual is mean zero given every intermediate value), so the
    delta method on (beta_R, gamma, bz_R) needs no cross-covariance term.
    """
    design_z = np.asarray(design_z, dtype=float)
    p = design_z.shape[1]
    fit1 = fit_ols(design_z, z)
    fit2 = fit_ols(design_y_t, y)
    beta = fit2.coefficients[:p]
    gamma = float(fit2.coefficients[p])
    bz = fit1.coefficients
    estimate = float(beta[arm_col] + gamma * bz[arm_col])
    v2 = fit2.covariance
    b_r = float(bz[arm_col])
    variance = (
        v2[arm_col, arm_col]
        + b_r * b_r * v2[p, p]
        + 2.0 * b_r * v2[arm_col, p]
        + gamma * gamma * fit1.covariance[arm_col, arm_col]
    )
    comp = DRegComponents(
        bz=bz,
        bz_cov=fit1.covariance,
        beta=beta,
        gamma=gamma,
        beta_gamma_cov=v2,
        pi=float(design_y_t.shape[0] / design_z.shape[0]),
        rho_resid=np.nan,
    )
    return estimate, float(variance), comp


def double_regression(ds: TrialDataset, scale: str = "z") -> EffectEstimate:
    est, var, _ = double_regression_components(ds, scale)
    return EffectEstimate(
        estimate=est, se=float(np.sqrt(var)), scale=scale,
        n_complete=ds.m, method="DReg",
    )


def double_regression_components(ds: TrialDataset, scale: str = "z"):
    """Double regression on a trial dataset; returns (estimate, variance, components)."""
    baseline, intermediate, final = ds.columns(scale)
    mz_mask = ds.obs_z
    m_mask = ds.obs_y
    m, m_z = int(m_mask.sum()), int(mz_mask.sum())
    if m_z < 6:
        raise InsufficientDataError(f"only {m_z} intermediate-observed cases")
    if m < 7:
        raise InsufficientDataError(f"only {m} complete cases")
    t_z = ancova_design(baseline[mz_mask], ds.covariate[mz_mask], ds.arm[mz_mask])
    t_y = ancova_design(baseline[m_mask], ds.covariate[m_mask], ds.arm[m_mask])
    design_y = np.column_stack([t_y, intermediate[m_mask]])
    est, var, comp = dreg_from_arrays(t_z, intermediate[mz_mask], design_y, final[m_mask], ARM_COLUMN)
    comp.rho_resid = _residual_correlation(t_y, final[m_mask], intermediate[m_mask])
    return est, var, comp


def _residual_correlation(design, y, z) -> float:
    ry = y - design @ fit_ols(design, y).coefficients
    rz = z - design @ fit_ols(design, z).coefficients
    denom = np.sqrt((ry @ ry) * (rz @ rz))
    return float(ry @ rz / denom) if denom > 0 else 0.0


def binary_event_rate(y, z) -> BinaryAuxEstimate:
    """Event-rate MLE using a fully observed binary intermediate outcome.

    ``y`` holds the final outcome for the first ``m`` subjects; ``z`` holds
    the intermediate outcome for all ``m_Z >= m`` subjects, aligned so that
    ``z[:m]`` pairs with ``y``.  The estimate stratifies the final-outcome
    rate on the intermediate and reweights by the intermediate's full-sample
    rate.
    """
    y = np.asarray(y)
    z = np.asarray(z)
    m, m_z = y.shape[0], z.shape[0]
    if m > m_z:
        raise DataStateError("more final outcomes than intermediate outcomes")
    if m == 0:
        raise InsufficientDataError("no final outcomes")
    if not (np.isin(y, (0, 1)).all() and np.isin(z, (0, 1)).all()):
        raise ValueError("outcomes must be binary 0/1")
    z_front = z[:m]
    n_z1 = int(z_front.sum())
    if n_z1 == 0 or n_z1 == m:
        raise EmptyStratumError("one intermediate stratum is empty among complete cases")
    p_z = float(z.mean())
    p_yz = float(y[z_front == 1].mean())
    p_yzb = float(y[z_front == 0].mean())
    p_tilde = p_z * p_yz + (1.0 - p_z) * p_yzb
    pq = p_tilde * (1.0 - p_tilde)
    if pq > 0.0 and 0.0 < p_z < 1.0:
        rho_sq = (p_yz - p_tilde) ** 2 * p_z / (pq * (1.0 - p_z))
    else:
        rho_sq = 0.0
    pi = m / m_z
    variance = (1.0 - rho_sq * (1.0 - pi)) * pq / m
    return BinaryAuxEstimate(
        p_tilde=p_tilde, p_z=p_z, p_y_given_z=p_yz, p_y_given_zbar=p_yzb,
        variance=float(variance),
    )


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


def _fit_logistic(design, y, max_iter=100, tol=1e-10):
    """Newton-Raphson logistic fit; raises on non-convergence."""
    beta = np.zeros(design.shape[1])
    for _ in range(max_iter):
        p = _expit(design @ beta)
        w = p * (1.0 - p)
        grad = design.T @ (y - p)
        hess = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise DataStateError("logistic fit failed (separation?)") from exc
        beta = beta + step
        if np.max(np.abs(grad)) < tol:
            return beta
    raise DataStateError("logistic fit did not converge")


def aipw_fit(ds: TrialDataset, scale: str = "z", outcome_kind: str = "continuous") -> AipwComponents:
    """Sequential per-arm regression/prediction estimator of both arm means.

    Stage 1 models the final outcome on the covariate, baseline and
    intermediate among complete cases; stage 2 re-regresses those
    predictions on covariate and baseline among intermediate-observed
    subjects; the arm mean averages the stage-2 predictions over everyone.
    Working models are linear for continuous outcomes and inverse-logit for
    binary ones, always with an intercept.
    """
    if outcome_kind not in ("continuous", "binary"):
        raise ValueError(f"unknown outcome_kind {outcome_kind!r}")
    baseline, intermediate, final = ds.columns(scale)
    n = ds.n
    arm = ds.arm.astype(float)
    obs_y = ds.obs_y
    obs_z = ds.obs_z
    z_filled = np.where(obs_z, intermediate, 0.0)
    y_filled = np.where(obs_y, final, 0.0)
    h_design_full = np.column_stack([np.ones(n), ds.covariate, baseline, z_filled])
    g_design_full = np.column_stack([np.ones(n), ds.covariate, baseline])

    eta, zeta, y_hat, y_tilde, mu = {}, {}, {}, {}, {}
    for r in (0, 1):
        in_arm = ds.arm == r
        cohort1 = obs_y & in_arm
        cohort12 = obs_z & in_arm
        if int(cohort1.sum()) < 7:
            raise InsufficientDataError(f"arm {r}: only {int(cohort1.sum())} complete cases for stage 1")
        if int(cohort12.sum()) < 5:
            raise InsufficientDataError(f"arm {r}: only {int(cohort12.sum())} intermediate cases for stage 2")
        try:
            if outcome_kind == "continuous":
                eta[r] = fit_ols(h_design_full[cohort1], final[cohort1]).coefficients
                y_hat[r] = h_design_full @ eta[r]
                zeta[r] = fit_ols(g_design_full[cohort12], y_hat[r][cohort12]).coefficients
                y_tilde[r] = g_design_full @ zeta[r]
            else:
                eta[r] = _fit_logistic(h_design_full[cohort1], final[cohort1])
                y_hat[r] = _expit(h_design_full @ eta[r])
                zeta[r] = _fit_logistic(g_design_full[cohort12], y_hat[r][cohort12])
                y_tilde[r] = _expit(g_design_full @ zeta[r])
        except (DataStateError, np.linalg.LinAlgError) as exc:
            raise DataStateError(f"arm {r}: working model failed: {exc}") from exc
        mu[r] = float(y_tilde[r].mean())

    p_r = float(arm.mean())
    weights = {"p_R": p_r, "p_Rbar": 1.0 - p_r}
    for r, label in ((1, "R"), (0, "Rbar")):
        in_arm = ds.arm == r
        weights[f"p_CY|{label}"] = float(obs_y[in_arm].mean())
        weights[f"p_CZ|{label}"] = float(obs_z[in_arm].mean())

    def arm_terms(r, p_arm, p_cy, p_cz):
        ind = arm if r == 1 else 1.0 - arm
        t_y = ind * obs_y * (y_filled - y_hat[r]) / (p_arm * p_cy)
        t_z = ind * obs_z * (y_hat[r] - y_tilde[r]) / (p_arm * p_cz)
        return t_y + t_z + y_tilde[r] - mu[r]

    influence = arm_terms(1, p_r, weights["p_CY|R"], weights["p_CZ|R"]) - arm_terms(
        0, 1.0 - p_r, weights["p_CY|Rbar"], weights["p_CZ|Rbar"]
    )
    return AipwComponents(
        eta=eta, zeta=zeta, y_hat=y_hat, y_tilde=y_tilde, mu=mu,
        weights=weights, influence=influence,
    )


def aipw_effect(ds: TrialDataset, scale: str = "z", outcome_kind: str = "continuous") -> EffectEstimate:
    comp = aipw_fit(ds, scale, outcome_kind)
    se = float(np.sqrt(np.var(comp.influence, ddof=1) / ds.m_r))
    return EffectEstimate(
        estimate=comp.mu[1] - comp.mu[0], se=se, scale=scale,
        n_complete=ds.m, method="AIPW",
    )


def aipw_variance_bootstrap(
    ds: TrialDataset,
    b: int,
    rng: RngStream,
    scale: str = "z",
    outcome_kind: str = "continuous",
) -> float:
    """Nonparametric-bootstrap SE of the AIPW effect over subject resamples.

    Resamples that cannot support the per-arm fits are skipped; more than 1%
    skipped aborts.
    """
    if b < 200:
        raise ValueError(f"need at least 200 bootstrap resamples, got {b}")
    g = rng.generator()
    effects = []
    skipped = 0
    for _ in range(b):
        idx = g.integers(0, ds.n, size=ds.n)
        try:
            comp = aipw_fit(ds.take(idx), scale, outcome_kind)
        except DataStateError:
            skipped += 1
            continue
        effects.append(comp.mu[1] - comp.mu[0])
    if skipped > 0.01 * b:
        raise DataStateError(f"{skipped}/{b} bootstrap resamples were unestimable")
    return float(np.std(effects, ddof=1))
