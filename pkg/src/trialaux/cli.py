"""Scenario orchestration and reporting.

A scenario bundles a generator configuration, a method list and output
options; running it produces one report row per method and scale.  With
``replications > 1`` the rows aggregate Monte Carlo summaries (mean
estimate, spread of estimates, rejection rate at the 5% level).  Reports
are emitted as CSV or a markdown table, plus a plot-ready long-format
interval file.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from . import bayes, extfreq, internal
from .datagen import ExternalScenario, GenConfig, apply_missingness, generate_external, generate_main
from .exceptions import ConfigError, TrialAuxError, TrialAuxWarning
from .mcmc import McmcConfig
from .ols import ancova_complete_case
from .rngdist import RngStream

_Z975 = 1.959963984540054

METHODS = ("CC", "DReg", "AIPW", "MVAR", "MMSE", "Hierarchical", "Power", "MAC")
FREQUENTIST = {"CC", "DReg", "AIPW", "MVAR", "MMSE"}
EXTERNAL_METHODS = {"MVAR", "MMSE", "Hierarchical", "Power", "MAC"}
SCALES = ("z", "percentile")
CONFLICTS = {"none": "NC", "moderate": "MC", "strong": "SC"}
SIZES = ("full", "double", "half")

# substream domains
_SUB_MAIN = 10
_SUB_MISS = 11
_SUB_EXT = 12
_SUB_METHOD = 13

REPORT_HEADER = [
    "method", "auxiliary", "scale", "estimate", "se", "p_value", "pr_ge_zero",
    "ci_low", "ci_high", "n_reps", "mc_sd", "reject_rate",
]


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    replications: int = 1
    rho: float = 0.9
    methods: tuple = ("CC",)
    scales: tuple = ("z",)
    external_conflict: str = "none"
    external_size: str = "full"
    n: int = 452
    missing_pairs: int = 125
    missing_final_only: int = 125
    bootstrap_b: int = 4000
    hypothesis: str | None = None  # "null" zeroes the generator's arm effects
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    dump_draws: bool = False

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("methods list must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        if not self.scales:
            raise ConfigError("scales list must be nonempty")
        for s in self.scales:
            if s not in SCALES:
                raise ConfigError(f"unknown scale {s!r}; choose from {SCALES}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.rho not in (0.6, 0.9):
            raise ConfigError(f"rho must be 0.6 or 0.9, got {self.rho}")
        if self.external_conflict not in CONFLICTS:
            raise ConfigError(f"unknown conflict level {self.external_conflict!r}")
        if self.external_size not in SIZES:
            raise ConfigError(f"unknown external size {self.external_size!r}")
        if self.external_conflict != "none" and self.external_size != "full":
            raise ConfigError("conflict scenarios are defined at full external size only")
        if self.hypothesis not in (None, "null", "alt"):
            raise ConfigError(f"hypothesis must be null/alt/absent, got {self.hypothesis!r}")

    @staticmethod
    def from_dict(raw: dict) -> "ScenarioConfig":
        known = {
            "seed", "replications", "rho", "methods", "scales", "external",
            "n", "missing_pairs", "missing_final_only", "bootstrap_b",
            "hypothesis", "mcmc", "dump_draws",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        ext = raw.get("external", {})
        mc = raw.get("mcmc", {})
        try:
            mcmc = McmcConfig(
                chains=int(mc.get("chains", 4)),
                warmup=int(mc.get("warmup", 2000)),
                keep=int(mc.get("keep", 2000)),
                seed=int(mc.get("seed", raw.get("seed", 0))),
                target_accept=mc.get("target_accept"),
            )
            cfg = ScenarioConfig(
                seed=int(raw.get("seed", 0)),
                replications=int(raw.get("replications", 1)),
                rho=float(raw.get("rho", 0.9)),
                methods=tuple(raw.get("methods", ("CC",))),
                scales=tuple(raw.get("scales", ("z",))),
                external_conflict=str(ext.get("conflict", "none")),
                external_size=str(ext.get("size", "full")),
                n=int(raw.get("n", 452)),
                missing_pairs=int(raw.get("missing_pairs", 125)),
                missing_final_only=int(raw.get("missing_final_only", 125)),
                bootstrap_b=int(raw.get("bootstrap_b", 4000)),
                hypothesis=raw.get("hypothesis"),
                mcmc=mcmc,
                dump_draws=bool(raw.get("dump_draws", False)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config value: {exc}") from exc
        cfg.validate()
        return cfg


@dataclass
class ReportRow:
    method: str
    auxiliary: str
    scale: str
    estimate: float
    se: float
    p_value: float = np.nan
    pr_ge_zero: float = np.nan
    ci_low: float = np.nan
    ci_high: float = np.nan
    n_reps: int = 1
    mc_sd: float = np.nan
    reject_rate: float = np.nan


def _external_scenario(cfg: ScenarioConfig) -> ExternalScenario:
    if cfg.external_conflict == "strong":
        return ExternalScenario.STRONG_CONFLICT
    if cfg.external_conflict == "moderate":
        return ExternalScenario.MODERATE_CONFLICT
    return {
        "full": ExternalScenario.SAME_SIZE,
        "double": ExternalScenario.DOUBLE,
        "half": ExternalScenario.HALF,
    }[cfg.external_size]


def _aux_label(cfg: ScenarioConfig, method: str) -> str:
    if method == "CC":
        return "none"
    if method in ("DReg", "AIPW"):
        return "int-12m"
    return f"ext-{cfg.external_size} ({CONFLICTS[cfg.external_conflict]})"


def _normal_p(estimate: float, se: float) -> float:
    return float(2.0 * ndtr(-abs(estimate) / se))


def _run_one_method(method, scale, ds, ext, cfg, rng):
    """One method on one realized dataset; returns a per-replication record."""
    if method in ("CC", "DReg", "AIPW"):
        if method == "CC":
            eff = ancova_complete_case(ds, scale)
        elif method == "DReg":
            eff = internal.double_regression(ds, scale)
        else:
            eff = internal.aipw_effect(ds, scale)
        return dict(
            estimate=eff.estimate, se=eff.se, p=_normal_p(eff.estimate, eff.se),
            pr=np.nan, ci_low=eff.estimate - _Z975 * eff.se, ci_high=eff.estimate + _Z975 * eff.se,
        )

    cc = ancova_complete_case(ds, scale)
    theta = extfreq.SummaryStat(cc.estimate, cc.se**2, ds.m, "theta_hat")

    if method in ("MVAR", "MMSE"):
        # the external source reports the same endpoint, so the internal
        # counterpart of the auxiliary is the main estimate itself
        ext_cc = ancova_complete_case(ext, scale)
        psi_check = extfreq.SummaryStat(ext_cc.estimate, ext_cc.se**2, ext.m, "psi_check_external")
        psi_hat = replace(theta, label="psi_hat_internal")
        if method == "MVAR":
            comb = extfreq.mvar_combine(theta, psi_hat, psi_check, theta.variance)
            return dict(estimate=comb.estimate, se=comb.se, p=comb.p_value, pr=np.nan,
                        ci_low=comb.ci_low, ci_high=comb.ci_high)
        comb = extfreq.mmse_combine(theta, psi_hat, psi_check, theta.variance)
        setting = extfreq.CombinationSetting(theta, psi_hat, psi_check, theta.variance)
        lo, hi, p = extfreq.mmse_bootstrap_inference(setting, cfg.bootstrap_b, rng)
        return dict(estimate=comb.estimate, se=comb.se, p=p, pr=np.nan, ci_low=lo, ci_high=hi)

    cc_na = bayes.trial_normal_approx(ds, scale)
    ext_na = bayes.trial_normal_approx(ext, scale)
    if method == "Power":
        comm = bayes.hellinger_commensurability(cc_na, ext_na)
        post = bayes.power_prior_posterior(cc_na, ext_na, comm, n_missing=ds.n - ds.m)
    elif method == "MAC":
        post = bayes.mac_fit([cc_na, ext_na], cfg.mcmc, rng=rng)
    else:
        post, _ = bayes.hierarchical_fit([ds, ext], scale, cfg.mcmc, rng=rng)
    return dict(estimate=post.mean, se=post.sd, p=np.nan, pr=post.pr_ge_zero,
                ci_low=post.q025, ci_high=post.q975)


def _replication(cfg: ScenarioConfig, rep: int) -> dict:
    root = RngStream(cfg.seed)
    rep_stream = root.substream(1, rep)
    gen_cfg = GenConfig(
        n=cfg.n, rho=cfg.rho,
        missing_pairs=cfg.missing_pairs, missing_final_only=cfg.missing_final_only,
        seed=cfg.seed,
    )
    if cfg.hypothesis == "null":
        gen_cfg = replace(gen_cfg, effect_12m=0.0, effect_24m=0.0)
    full = generate_main(gen_cfg, rep_stream.substream(_SUB_MAIN))
    ds = apply_missingness(full, rep_stream.substream(_SUB_MISS), cfg.missing_pairs, cfg.missing_final_only)
    ext = None
    if any(m in EXTERNAL_METHODS for m in cfg.methods):
        ext = generate_external(_external_scenario(cfg), gen_cfg, rep_stream.substream(_SUB_EXT))
    out = {}
    for mi, method in enumerate(cfg.methods):
        for scale in cfg.scales:
            rng = rep_stream.substream(_SUB_METHOD, mi, 0 if scale == "z" else 1)
            try:
                out[(method, scale)] = _run_one_method(method, scale, ds, ext, cfg, rng)
            except TrialAuxError as exc:
                raise type(exc)(f"{method}/{scale} (rep {rep}): {exc}") from exc
    return out


def run_scenario(cfg: ScenarioConfig, threads: int = 1) -> list:
    """Run every (method, scale) pair, aggregating across replications."""
    cfg.validate()
    reps = range(cfg.replications)
    if threads > 1 and cfg.replications > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replication, [cfg] * cfg.replications, reps))
    else:
        results = [_replication(cfg, r) for r in reps]

    rows = []
    for method in cfg.methods:
        for scale in cfg.scales:
            recs = [res[(method, scale)] for res in results]
            est = np.array([r["estimate"] for r in recs])
            se = np.array([r["se"] for r in recs])
            p = np.array([r["p"] for r in recs])
            pr = np.array([r["pr"] for r in recs])
            lo = np.array([r["ci_low"] for r in recs])
            hi = np.array([r["ci_high"] for r in recs])
            n_reps = len(recs)
            rows.append(ReportRow(
                method=method,
                auxiliary=_aux_label(cfg, method),
                scale=scale,
                estimate=float(est.mean()),
                se=float(se.mean()),
                p_value=float(np.nanmean(p)) if not np.all(np.isnan(p)) else np.nan,
                pr_ge_zero=float(np.nanmean(pr)) if not np.all(np.isnan(pr)) else np.nan,
                ci_low=float(lo.mean()),
                ci_high=float(hi.mean()),
                n_reps=n_reps,
                mc_sd=float(est.std(ddof=1)) if n_reps > 1 else np.nan,
                reject_rate=float(np.mean(p < 0.05)) if n_reps > 1 and not np.all(np.isnan(p)) else np.nan,
            ))
    return rows


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else format(value, ".17g")
    return str(value)


def emit_report(rows, fmt: str = "csv") -> str:
    """Render rows as CSV (lossless) or a fixed-precision markdown table."""
    if not rows:
        raise ConfigError("no rows to report")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([
                r.method, r.auxiliary, r.scale,
                _csv_cell(r.estimate), _csv_cell(r.se), _csv_cell(r.p_value),
                _csv_cell(r.pr_ge_zero), _csv_cell(r.ci_low), _csv_cell(r.ci_high),
                r.n_reps, _csv_cell(r.mc_sd), _csv_cell(r.reject_rate),
            ])
        return buf.getvalue()
    if fmt == "markdown":
        def f4(x):
            return "" if isinstance(x, float) and math.isnan(x) else f"{x:.4f}"

        lines = [
            "| Method | Auxiliary | Scale | Estimate (SE) | p / pr(effect>=0) | 95% interval | reps | MC-SD | reject |",
            "|---|---|---|---|---|---|---|---|---|",
        ]
        for r in rows:
            tail = f4(r.p_value) if not math.isnan(r.p_value) else f4(r.pr_ge_zero)
            lines.append(
                f"| {r.method} | {r.auxiliary} | {r.scale} "
                f"| {f4(r.estimate)} ({f4(r.se)}) | {tail} "
                f"| [{f4(r.ci_low)}, {f4(r.ci_high)}] | {r.n_reps} | {f4(r.mc_sd)} | {f4(r.reject_rate)} |"
            )
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")


def parse_report_csv(text: str) -> list:
    """Inverse of emit_report(..., 'csv')."""
    rdr = csv.reader(io.StringIO(text))
    header = next(rdr)
    if header != REPORT_HEADER:
        raise ConfigError(f"unexpected report header {header!r}")
    rows = []
    for rec in rdr:
        def fnum(s):
            return float(s) if s else math.nan

        rows.append(ReportRow(
            method=rec[0], auxiliary=rec[1], scale=rec[2],
            estimate=fnum(rec[3]), se=fnum(rec[4]), p_value=fnum(rec[5]),
            pr_ge_zero=fnum(rec[6]), ci_low=fnum(rec[7]), ci_high=fnum(rec[8]),
            n_reps=int(rec[9]), mc_sd=fnum(rec[10]), reject_rate=fnum(rec[11]),
        ))
    return rows


def emit_intervals(rows) -> str:
    """Long-format (method, scale, estimate, lo95, hi95) CSV for plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "scale", "estimate", "lo95", "hi95"])
    skipped = 0
    for r in rows:
        if math.isnan(r.ci_low) or math.isnan(r.ci_high):
            skipped += 1
            continue
        w.writerow([r.method, r.scale, _csv_cell(r.estimate), _csv_cell(r.ci_low), _csv_cell(r.ci_high)])
    if skipped:
        warnings.warn(f"{skipped} row(s) lacked interval bounds and were skipped", TrialAuxWarning)
    return buf.getvalue()


def _dump_hierarchical_draws(cfg: ScenarioConfig, path) -> None:
    rep_stream = RngStream(cfg.seed).substream(1, 0)
    gen_cfg = GenConfig(n=cfg.n, rho=cfg.rho, missing_pairs=cfg.missing_pairs,
                        missing_final_only=cfg.missing_final_only, seed=cfg.seed)
    full = generate_main(gen_cfg, rep_stream.substream(_SUB_MAIN))
    ds = apply_missingness(full, rep_stream.substream(_SUB_MISS), cfg.missing_pairs, cfg.missing_final_only)
    ext = generate_external(_external_scenario(cfg), gen_cfg, rep_stream.substream(_SUB_EXT))
    sink: dict = {}
    bayes.hierarchical_fit([ds, ext], cfg.scales[0], cfg.mcmc,
                           rng=rep_stream.substream(_SUB_METHOD, 0, 0), draws_out=sink)
    result = sink["result"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(result.param_names)
        for row in result.flat():
            w.writerow([format(v, ".17g") for v in row])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="trialaux",
        description="Generate synthetic disrupted-trial data and run auxiliary-information analyses.",
    )
    parser.add_argument("--config", required=True, help="JSON scenario file")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--format", choices=("csv", "markdown"), default="csv")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--strict", action="store_true",
                        help="escalate package warnings to errors")
    args = parser.parse_args(argv)

    try:
        with open(args.config) as fh:
            cfg = ScenarioConfig.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    os.makedirs(args.out, exist_ok=True)
    try:
        with warnings.catch_warnings():
            if args.strict:
                warnings.simplefilter("error", TrialAuxWarning)
            rows = run_scenario(cfg, threads=args.threads)
            report = emit_report(rows, args.format)
            intervals = emit_intervals(rows)
            if cfg.dump_draws and "Hierarchical" in cfg.methods:
                _dump_hierarchical_draws(cfg, os.path.join(args.out, "draws.csv"))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrialAuxError, TrialAuxWarning) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return 3

    ext_name = "report.csv" if args.format == "csv" else "report.md"
    with open(os.path.join(args.out, ext_name), "w") as fh:
        fh.write(report)
    with open(os.path.join(args.out, "intervals.csv"), "w") as fh:
        fh.write(intervals)
    print(report, end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
