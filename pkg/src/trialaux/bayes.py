"""Bayesian borrowing from an external trial for the arm-effect parameter.

Four routes:

* a commensurability measure built from the Hellinger distance between the
  two trials' normalized (sample-size balanced) likelihoods;
* a power-style prior: the external effect posterior, variance-inflated by
  ``1/(1-Delta)^2`` and capped at the information actually lost to
  missingness, conjugately updated with the current trial's estimate;
* a joint hierarchical model over the individual patient data of both
  trials with exchangeable arm effects;
* a two-stage meta-analytic combination of trial-level summaries.

The hierarchical and two-stage models are sampled with the blockwise
adaptive Metropolis engine in :mod:`trialaux.mcmc`; the common-mean
hyperparameter is integrated out analytically (its prior is conjugate) and
recovered per draw afterwards, which removes one poorly mixing direction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .datagen import TrialDataset
from .exceptions import ConvergenceError, TrialAuxWarning
from .mcmc import McmcConfig, McmcResult, mcmc_sample
from .ols import ARM_COLUMN, ancova_design, ancova_fit
from .rngdist import RngStream

_Z975 = 1.959963984540054
_XI_SD = 10.0          # prior sd for the common effect and regression coefficients
_SIGMA_SCALE = 10.0    # half-t3 prior scale for residual sd
RHAT_LIMIT = 1.01
ESS_LIMIT = 400.0


@dataclass(frozen=True)
class NormalApprox:
    """Normal summary of a likelihood or posterior, with its backing size."""

    mean: float
    sd: float
    n: int

    def __post_init__(self):
        if not (np.isfinite(self.sd) and self.sd > 0.0):
            raise ValueError(f"sd must be positive, got {self.sd}")


@dataclass(frozen=True)
class Commensurability:
    delta: float
    delta_sq: float
    exponent_a: float  # power applied to the first likelihood
    exponent_b: float  # power applied to the second likelihood


@dataclass
class HierParams:
    xi_mean: float
    xi_sd: float
    tau_mean: float
    tau_sd: float
    effect_means: np.ndarray  # posterior mean arm effect per trial


@dataclass
class PosteriorSummary:
    mean: float
    sd: float
    pr_ge_zero: float
    q025: float
    q975: float
    rhat: float
    ess_bulk: float
    n_draws: int


def _analytic_summary(mean: float, sd: float) -> PosteriorSummary:
    return PosteriorSummary(
        mean=float(mean),
        sd=float(sd),
        pr_ge_zero=float(ndtr(mean / sd)),
        q025=float(mean - _Z975 * sd),
        q975=float(mean + _Z975 * sd),
        rhat=np.nan,
        ess_bulk=np.nan,
        n_draws=0,
    )


def trial_normal_approx(ds: TrialDataset, scale: str = "z") -> NormalApprox:
    """Normal approximation of a trial's complete-case arm-effect likelihood."""
    fit = ancova_fit(ds, scale)
    return NormalApprox(
        mean=float(fit.coefficients[ARM_COLUMN]),
        sd=float(np.sqrt(fit.covariance[ARM_COLUMN, ARM_COLUMN])),
        n=fit.n_used,
    )


def hellinger_commensurability(a: NormalApprox, b: NormalApprox) -> Commensurability:
    """Distance between the two normalized effect likelihoods.

    The likelihood backed by more data is raised to the ratio of sample
    sizes (variance inflated by the reciprocal), making the comparison
    information-balanced; the squared Hellinger distance of the two normals
    then has a closed form.  0 means identical, 1 disjoint.
    """
    exp_a = min(1.0, b.n / a.n)
    exp_b = min(1.0, a.n / b.n)
    va = a.sd**2 / exp_a
    vb = b.sd**2 / exp_b
    h2 = 1.0 - math.sqrt(2.0 * math.sqrt(va * vb) / (va + vb)) * math.exp(
        -((a.mean - b.mean) ** 2) / (4.0 * (va + vb))
    )
    h2 = min(max(h2, 0.0), 1.0)
    delta = math.sqrt(h2)
    return Commensurability(delta=delta, delta_sq=h2, exponent_a=exp_a, exponent_b=exp_b)


def lambda_from_tau(tau: float, n_d: int, sigma_d: float) -> float:
    """Fraction of external samples retained for a given heterogeneity level."""
    if tau < 0.0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    if n_d < 1:
        raise ValueError(f"n_d must be a positive count, got {n_d}")
    if not sigma_d > 0.0:
        raise ValueError(f"sigma_d must be positive, got {sigma_d}")
    return 1.0 / (1.0 + 2.0 * n_d * tau**2 / sigma_d**2)


def _conjugate_normal(prior_mean, prior_var, lik_mean, lik_var) -> PosteriorSummary:
    post_var = 1.0 / (1.0 / prior_var + 1.0 / lik_var)
    post_mean = post_var * (prior_mean / prior_var + lik_mean / lik_var)
    return _analytic_summary(post_mean, math.sqrt(post_var))


def complete_case_posterior(cc: NormalApprox, base_sd: float = _XI_SD) -> PosteriorSummary:
    """Current-trial-only posterior under the vague normal prior."""
    return _conjugate_normal(0.0, base_sd**2, cc.mean, cc.sd**2)


def power_prior_posterior(
    cc: NormalApprox,
    ext: NormalApprox,
    comm: Commensurability,
    n_missing: int,
    base_sd: float = _XI_SD,
) -> PosteriorSummary:
    """Conjugate update of the inflated external prior with the current trial.

    The external prior variance starts at the unit information of the
    external fit divided by the number of missing outcomes (borrowing can at
    most restore what was lost), then inflates by ``1/(1-Delta)^2``.  At
    ``Delta ~ 1`` the external source is discarded and the vague base prior
    is used instead.
    """
    if n_missing < 1:
        raise ValueError(f"n_missing must be a positive count, got {n_missing}")
    if comm.delta >= 1.0 - 1e-9:
        warnings.warn(
            "commensurability ~ 1: external information discarded, vague prior used",
            TrialAuxWarning,
        )
        return complete_case_posterior(cc, base_sd)
    sigma_unit = ext.sd * math.sqrt(ext.n)
    prior_var = (sigma_unit**2 / n_missing) / (1.0 - comm.delta) ** 2
    return _conjugate_normal(ext.mean, prior_var, cc.mean, cc.sd**2)


def _summarize_draws(draws: np.ndarray, rhat: float, ess: float) -> PosteriorSummary:
    q025, q975 = np.quantile(draws, (0.025, 0.975))
    return PosteriorSummary(
        mean=float(draws.mean()),
        sd=float(draws.std(ddof=1)),
        pr_ge_zero=float(np.mean(draws >= 0.0)),
        q025=float(q025),
        q975=float(q975),
        rhat=float(rhat),
        ess_bulk=float(ess),
        n_draws=draws.size,
    )


def _check_diagnostics(result: McmcResult, context: str) -> None:
    worst_rhat = float(np.nanmax(result.rhat))
    worst_ess = float(np.nanmin(result.ess_bulk))
    if not np.isfinite(worst_rhat) or worst_rhat > RHAT_LIMIT or worst_ess < ESS_LIMIT:
        raise ConvergenceError(
            f"{context}: rhat {worst_rhat:.4f} / bulk-ESS {worst_ess:.0f} "
            f"outside limits (<= {RHAT_LIMIT}, >= {ESS_LIMIT})",
            result=result,
        )


def _exchangeable_logpdf(theta3: np.ndarray, tau_sq, xi_sd: float = _XI_SD):
    """Marginal log density of the per-trial effects with the common mean
    integrated out: N(0, xi_sd^2 J + tau^2 I), vectorized over chains."""
    d = theta3.shape[1]
    s2 = xi_sd**2
    total = theta3.sum(axis=1)
    ssq = (theta3**2).sum(axis=1)
    denom = tau_sq + d * s2
    logdet = (d - 1) * np.log(tau_sq) + np.log(denom)
    quad = ssq / tau_sq - s2 * total**2 / (tau_sq * denom)
    return -0.5 * (logdet + quad)


def _half_normal_log(tau, sigma_tau):
    return -(tau**2) / (2.0 * sigma_tau**2)


def _half_t3_log(sigma, scale=_SIGMA_SCALE):
    return -2.0 * np.log1p((sigma / scale) ** 2 / 3.0)


def _xi_draws(theta3_draws: np.ndarray, tau_draws: np.ndarray, g, xi_sd: float = _XI_SD):
    """Posterior draws of the common mean given effects and heterogeneity."""
    d = theta3_draws.shape[1]
    v = 1.0 / (1.0 / xi_sd**2 + d / tau_draws**2)
    m = v * theta3_draws.sum(axis=1) / tau_draws**2
    return m + np.sqrt(v) * g.standard_normal(len(tau_draws))


def hierarchical_fit(
    datasets,
    scale: str,
    cfg: McmcConfig,
    rng: RngStream | None = None,
    tau_fixed: float | None = None,
    draws_out: dict | None = None,
):
    """Joint hierarchical model over all trials' complete cases.

    Each trial gets its own regression coefficients and residual sd; the
    arm effects are exchangeable around a common mean with between-trial sd
    tau (half-normal prior scaled to a quarter of the unit-information sd
    estimated from the external trial).  Returns the current-trial effect
    posterior and a hyperparameter summary.  ``tau_fixed=0`` ties the
    effects to a single shared parameter.
    """
    if len(datasets) < 2:
        raise ValueError("need the current trial plus at least one external dataset")
    if rng is None:
        rng = RngStream(cfg.seed)
    n_trials = len(datasets)
    suff = []
    fits = []
    for ds in datasets:
        baseline, _, final = ds.columns(scale)
        mask = ds.obs_y
        design = ancova_design(baseline[mask], ds.covariate[mask], ds.arm[mask])
        y = final[mask]
        suff.append((design.T @ design, design.T @ y, float(y @ y), int(mask.sum())))
        fits.append(ancova_fit(ds, scale))
    ext_fit = fits[1]
    sigma_unit = math.sqrt(ext_fit.covariance[ARM_COLUMN, ARM_COLUMN]) * math.sqrt(ext_fit.n_used)
    sigma_tau = sigma_unit / 4.0

    tied = tau_fixed is not None and tau_fixed == 0.0
    sample_tau = tau_fixed is None
    # layout: per trial [theta0, theta1, theta2, log sigma], then the arm
    # effects (one per trial, or a single shared one when tied), then log tau.
    n_eff = 1 if tied else n_trials
    eff0 = 4 * n_trials
    k = eff0 + n_eff + (1 if sample_tau else 0)
    names = []
    for d in range(n_trials):
        names += [f"theta{j}_{d}" for j in range(3)] + [f"log_sigma_{d}"]
    names += ["theta3_common"] if tied else [f"theta3_{d}" for d in range(n_trials)]
    if sample_tau:
        names.append("log_tau")

    def effect_columns(mat):
        if tied:
            return np.repeat(mat[:, eff0 : eff0 + 1], n_trials, axis=1)
        return mat[:, eff0 : eff0 + n_trials]

    def make_trial_component(d):
        g_mat, h_vec, yy, m_d = suff[d]
        eff_ix = eff0 if tied else eff0 + d
        # partition the quadratic form so no per-call column assembly is needed
        g11 = np.ascontiguousarray(g_mat[:3, :3])
        g12 = np.ascontiguousarray(g_mat[:3, ARM_COLUMN])
        g22 = float(g_mat[ARM_COLUMN, ARM_COLUMN])
        h3 = np.ascontiguousarray(h_vec[:3])
        h_arm = float(h_vec[ARM_COLUMN])
        lo = 4 * d

        def comp(mat):
            b = mat[:, lo : lo + 3]
            eff = mat[:, eff_ix]
            x = mat[:, lo + 3]
            quad = np.einsum("ci,ij,cj->c", b, g11, b) + eff * (2.0 * (b @ g12) + eff * g22)
            rss = yy - 2.0 * (b @ h3 + eff * h_arm) + quad
            lp = -m_d * x - 0.5 * rss * np.exp(-2.0 * x)
            lp += _half_t3_log(np.exp(x)) + x
            lp -= (b * b).sum(axis=1) / (2.0 * _XI_SD**2)
            return lp

        return comp

    def exchange_component(mat):
        if tied:
            return -(mat[:, eff0] ** 2) / (2.0 * _XI_SD**2)
        if sample_tau:
            tau_sq = np.exp(2.0 * mat[:, k - 1])
        else:
            tau_sq = tau_fixed**2
        return _exchangeable_logpdf(effect_columns(mat), tau_sq)

    def tau_component(mat):
        t = mat[:, k - 1]
        return _half_normal_log(np.exp(t), sigma_tau) + t

    components = [make_trial_component(d) for d in range(n_trials)]
    exch_ix = len(components)
    components.append(exchange_component)
    if sample_tau:
        tau_ix = len(components)
        components.append(tau_component)

    g_init = rng.substream(1).generator()
    init = np.empty((cfg.chains, k))
    for c in range(cfg.chains):
        row = []
        for d in range(n_trials):
            fit = fits[d]
            se = np.sqrt(np.diag(fit.covariance))
            jitter = g_init.standard_normal(3) * se[:3]
            row.extend(fit.coefficients[:3] + jitter)
            row.append(math.log(fit.residual_sd) + 0.1 * g_init.standard_normal())
        if tied:
            row.append(fits[0].coefficients[ARM_COLUMN] + 0.02 * g_init.standard_normal())
        else:
            for d in range(n_trials):
                fit = fits[d]
                se3 = math.sqrt(fit.covariance[ARM_COLUMN, ARM_COLUMN])
                row.append(fit.coefficients[ARM_COLUMN] + se3 * g_init.standard_normal())
        if sample_tau:
            row.append(math.log(sigma_tau / 2.0) + 0.5 * g_init.standard_normal())
        init[c] = row

    # per-trial blocks: coefficients plus that trial's effect (the effect is
    # shared with the hyper block, which also moves tau along the shrinkage
    # ridge); residual sds get univariate updates
    # several proposals of the same block per sweep compound its mixing
    # (three ~8%-efficient moves behave like one ~22% move)
    blocks = []
    prop_chols = []
    affected = []
    adapt = []

    def add_block(idx, chol, hits, adapt_shape, repeats=1):
        for _ in range(repeats):
            blocks.append(np.asarray(idx))
            prop_chols.append(chol)
            affected.append(hits)
            adapt.append(adapt_shape)

    for d in range(n_trials):
        if tied:
            add_block(
                [4 * d, 4 * d + 1, 4 * d + 2],
                np.linalg.cholesky(fits[d].covariance[:3, :3]),
                [d], False, repeats=3,
            )
        else:
            cov4 = fits[d].covariance
            perm = [0, 1, 2, ARM_COLUMN]
            add_block(
                [4 * d, 4 * d + 1, 4 * d + 2, eff0 + d],
                np.linalg.cholesky(cov4[np.ix_(perm, perm)]),
                [d, exch_ix], False, repeats=3,
            )
        add_block(
            [4 * d + 3],
            np.array([[math.sqrt(1.0 / (2.0 * suff[d][3]))]]),
            [d], False,
        )
    if tied:
        add_block(
            [eff0],
            np.array([[math.sqrt(fits[0].covariance[ARM_COLUMN, ARM_COLUMN])]]),
            list(range(n_trials)) + [exch_ix], False, repeats=2,
        )
    else:
        hyper = list(range(eff0, eff0 + n_eff))
        hyper_sds = [math.sqrt(fits[d].covariance[ARM_COLUMN, ARM_COLUMN]) for d in range(n_trials)]
        hyper_affected = list(range(n_trials)) + [exch_ix]
        if sample_tau:
            hyper.append(k - 1)
            hyper_sds.append(0.6)
            hyper_affected.append(tau_ix)
        # the ridge shape depends on where tau settles, so keep adapting it
        add_block(hyper, np.diag(hyper_sds), hyper_affected, True, repeats=2)
        if sample_tau:
            # a dedicated heterogeneity update: its conditional posterior is wide
            add_block([k - 1], np.array([[0.6]]), [exch_ix, tau_ix], False, repeats=2)

    result = mcmc_sample(
        None, init, cfg, blocks=blocks, rng=rng.substream(2),
        vectorized=True, param_names=names, proposal_chol=prop_chols,
        adapt_cov=adapt, components=components, block_components=affected,
    )
    if draws_out is not None:
        draws_out["result"] = result
    _check_diagnostics(result, "hierarchical fit")
    flat = result.flat()
    effect_draws = effect_columns(flat)
    theta30 = effect_draws[:, 0]
    if sample_tau:
        tau_draws = np.exp(flat[:, k - 1])
    else:
        tau_draws = np.full(flat.shape[0], float(tau_fixed))
    if tied:
        xi = theta30
    else:
        xi = _xi_draws(effect_draws, np.maximum(tau_draws, 1e-12), rng.substream(3).generator())
    params = HierParams(
        xi_mean=float(xi.mean()),
        xi_sd=float(xi.std(ddof=1)),
        tau_mean=float(tau_draws.mean()),
        tau_sd=float(tau_draws.std(ddof=1)) if sample_tau else 0.0,
        effect_means=effect_draws.mean(axis=0),
    )
    summary = _summarize_draws(theta30, result.rhat[eff0], result.ess_bulk[eff0])
    return summary, params


def mac_fit(
    stage1,
    cfg: McmcConfig,
    rng: RngStream | None = None,
    tau_fixed: float | None = None,
    sigma_tau: float | None = None,
) -> PosteriorSummary:
    """Two-stage combination: exchangeable model over stage-1 summaries.

    Stage-1 estimates enter as normal likelihoods with known variance; the
    return value is the current trial's (first summary's) shrinkage
    posterior.
    """
    if len(stage1) < 2:
        raise ValueError("need at least two stage-1 summaries")
    if rng is None:
        rng = RngStream(cfg.seed)
    n_trials = len(stage1)
    est = np.array([s.mean for s in stage1])
    var = np.array([s.sd**2 for s in stage1])
    if sigma_tau is None:
        sigma_tau = stage1[1].sd * math.sqrt(stage1[1].n) / 4.0

    tied = tau_fixed is not None and tau_fixed == 0.0
    sample_tau = tau_fixed is None
    k = (1 if tied else n_trials) + (1 if sample_tau else 0)

    def effect_columns(mat):
        if tied:
            return np.repeat(mat[:, :1], n_trials, axis=1)
        return mat[:, :n_trials]

    def lik_component(mat):
        return -0.5 * (((est - effect_columns(mat)) ** 2) / var).sum(axis=1)

    def exchange_component(mat):
        if tied:
            return -(mat[:, 0] ** 2) / (2.0 * _XI_SD**2)
        if sample_tau:
            tau_sq = np.exp(2.0 * mat[:, -1])
        else:
            tau_sq = tau_fixed**2
        return _exchangeable_logpdf(effect_columns(mat), tau_sq)

    def tau_component(mat):
        t = mat[:, -1]
        return _half_normal_log(np.exp(t), sigma_tau) + t

    components = [lik_component, exchange_component]
    if sample_tau:
        components.append(tau_component)

    g_init = rng.substream(1).generator()
    init = np.empty((cfg.chains, k))
    for c in range(cfg.chains):
        row = []
        if tied:
            row.append(est.mean() + 0.5 * math.sqrt(var[0]) * g_init.standard_normal())
        else:
            row.extend(est + np.sqrt(var) * g_init.standard_normal(n_trials))
        if sample_tau:
            row.append(math.log(sigma_tau / 2.0) + 0.5 * g_init.standard_normal())
        init[c] = row

    names = (["theta3_common"] if tied else [f"theta3_{d}" for d in range(n_trials)])
    if sample_tau:
        names.append("log_tau")
    seed_sds = [math.sqrt(var[0])] if tied else list(np.sqrt(var))
    if sample_tau:
        seed_sds.append(0.6)
    all_comps = list(range(len(components)))
    blocks = [np.arange(k)] * 3
    prop_chols = [np.diag(seed_sds)] * 3
    affected = [all_comps] * 3
    adapt = [True] * 3
    if sample_tau:
        blocks.append(np.array([k - 1]))
        prop_chols.append(np.array([[0.6]]))
        affected.append([1, 2])
        adapt.append(False)
    result = mcmc_sample(
        None, init, cfg, blocks=blocks, rng=rng.substream(2),
        vectorized=True, param_names=names, proposal_chol=prop_chols,
        adapt_cov=adapt, components=components, block_components=affected,
    )
    _check_diagnostics(result, "two-stage combination fit")
    theta30 = result.flat()[:, 0]
    return _summarize_draws(theta30, result.rhat[0], result.ess_bulk[0])
