"""Synthetic two-arm trial generator with intermediate and final outcomes.

The generator mimics a pediatric weight-management trial: a BMI z-score at
baseline (left-truncated at the 85th percentile), one extra covariate, and
correlated 12- and 24-month z-scores whose means shift under treatment.
Percentile-scale columns are the normal CDF of the z-scores.  A disruption
is simulated by deleting the 12/24-month pair for some subjects and only
the 24-month value for others, so the final-outcome count m, the
intermediate count m_Z and the recruited count m_R satisfy
``m <= m_Z <= m_R <= n``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.special import ndtr

from .exceptions import ConfigError, DataStateError
from .rngdist import RngStream, sample_bivariate_normal, sample_truncated_normal

# Inclusion threshold: 85th percentile of the standard normal.
BASELINE_TRUNCATION = 1.036
BASELINE_MEAN = 1.5
BASELINE_SD = 1.0
COVARIATE_MEAN = 1.0
COVARIATE_SD = 1.0
OUTCOME_SD = 0.3

CSV_HEADER = [
    "id", "d", "R", "X", "zBMI1", "zBMI2", "zBMI3",
    "pBMI1", "pBMI2", "pBMI3", "obs_Z", "obs_Y",
]

# substream indices used by the generator
_SUB_BASELINE = 1
_SUB_ARM = 2
_SUB_COVARIATE = 3
_SUB_OUTCOMES = 4


@dataclass(frozen=True)
class GenConfig:
    """Parameters of the artificial trial generator."""

    n: int = 452
    rho: float = 0.9
    effect_12m: float = -0.16
    effect_24m: float = -0.08
    intercept_drift: float = -0.2
    covariate_coef: float = 0.1
    missing_pairs: int = 125
    missing_final_only: int = 125
    seed: int = 0

    def validate(self) -> None:
        if self.n < 4 or self.n % 2 != 0:
            raise ConfigError(f"n must be an even count >= 4, got {self.n}")
        if not abs(self.rho) < 1.0:
            raise ConfigError(f"|rho| must be < 1, got {self.rho}")
        if self.missing_pairs < 0 or self.missing_final_only < 0:
            raise ConfigError("missingness counts must be nonnegative")
        if self.missing_pairs + self.missing_final_only > self.n:
            raise ConfigError("missingness counts exceed the sample size")


class ExternalScenario(Enum):
    SAME_SIZE = "same_size"
    DOUBLE = "double"
    HALF = "half"
    STRONG_CONFLICT = "strong_conflict"
    MODERATE_CONFLICT = "moderate_conflict"


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's row, with percentile columns derived from the z columns."""

    id: int
    arm: int
    covariate: float
    zbmi1: float
    zbmi2: float | None
    zbmi3: float | None
    pbmi1: float
    pbmi2: float | None
    pbmi3: float | None
    obs_z: bool
    obs_y: bool


@dataclass
class TrialDataset:
    """Columnar per-subject data for one source; NaN marks a missing value."""

    source_id: int
    arm: np.ndarray
    covariate: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray
    obs_z: np.ndarray
    obs_y: np.ndarray

    @property
    def n(self) -> int:
        return self.arm.shape[0]

    @property
    def m(self) -> int:
        """Subjects with the final outcome observed."""
        return int(self.obs_y.sum())

    @property
    def m_z(self) -> int:
        """Subjects with the intermediate outcome observed."""
        return int(self.obs_z.sum())

    @property
    def m_r(self) -> int:
        """Subjects recruited (baseline data always present)."""
        return self.n

    @property
    def p1(self) -> np.ndarray:
        return ndtr(self.z1)

    @property
    def p2(self) -> np.ndarray:
        return np.where(self.obs_z, ndtr(np.where(self.obs_z, self.z2, 0.0)), np.nan)

    @property
    def p3(self) -> np.ndarray:
        return np.where(self.obs_y, ndtr(np.where(self.obs_y, self.z3, 0.0)), np.nan)

    def columns(self, scale: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(baseline, intermediate, final) columns on the requested scale."""
        if scale == "z":
            return self.z1, self.z2, self.z3
        if scale == "percentile":
            return self.p1, self.p2, self.p3
        raise ConfigError(f"unknown scale {scale!r}")

    def record(self, i: int) -> SubjectRecord:
        oz, oy = bool(self.obs_z[i]), bool(self.obs_y[i])
        return SubjectRecord(
            id=i,
            arm=int(self.arm[i]),
            covariate=float(self.covariate[i]),
            zbmi1=float(self.z1[i]),
            zbmi2=float(self.z2[i]) if oz else None,
            zbmi3=float(self.z3[i]) if oy else None,
            pbmi1=float(ndtr(self.z1[i])),
            pbmi2=float(ndtr(self.z2[i])) if oz else None,
            pbmi3=float(ndtr(self.z3[i])) if oy else None,
            obs_z=oz,
            obs_y=oy,
        )

    def take(self, indices) -> "TrialDataset":
        """Row subset/resample (used by bootstrap loops)."""
        idx = np.asarray(indices)
        return TrialDataset(
            source_id=self.source_id,
            arm=self.arm[idx].copy(),
            covariate=self.covariate[idx].copy(),
            z1=self.z1[idx].copy(),
            z2=self.z2[idx].copy(),
            z3=self.z3[idx].copy(),
            obs_z=self.obs_z[idx].copy(),
            obs_y=self.obs_y[idx].copy(),
        )

    def validate(self) -> None:
        if np.any(self.z1 < BASELINE_TRUNCATION - 1e-12):
            raise DataStateError("baseline z-scores below the inclusion threshold")
        if np.any(self.obs_y & ~self.obs_z):
            raise DataStateError("final outcome observed without the intermediate one")
        counts = np.bincount(self.arm, minlength=2)
        if counts[0] < 2 or counts[1] < 2:
            raise DataStateError("each arm needs at least 2 subjects")


def generate_main(cfg: GenConfig, rng: RngStream | None = None) -> TrialDataset:
    """Generate the full (missingness-free) trial dataset.

    Baseline z-scores are left-truncated N(1.5, 1) at the inclusion
    threshold; arms are assigned 1:1 by permuted blocks of two; the 12- and
    24-month z-scores are bivariate normal around means that add the
    intercept drift, the arm effect and the covariate effect to baseline.
    """
    cfg.validate()
    if rng is None:
        rng = RngStream(cfg.seed)
    n = cfg.n
    z1 = sample_truncated_normal(
        rng.substream(_SUB_BASELINE), BASELINE_MEAN, BASELINE_SD, BASELINE_TRUNCATION, n
    )
    flips = rng.substream(_SUB_ARM).generator().integers(0, 2, size=n // 2)
    arm = np.empty(n, dtype=np.int8)
    arm[0::2] = flips
    arm[1::2] = 1 - flips
    covariate = rng.substream(_SUB_COVARIATE).generator().normal(COVARIATE_MEAN, COVARIATE_SD, n)
    noise = sample_bivariate_normal(rng.substream(_SUB_OUTCOMES), (0.0, 0.0), OUTCOME_SD, cfg.rho, n)
    xterm = cfg.covariate_coef * covariate
    z2 = z1 + cfg.intercept_drift + cfg.effect_12m * arm + xterm + noise[:, 0]
    z3 = z1 + cfg.effect_24m * arm + xterm + noise[:, 1]
    return TrialDataset(
        source_id=0,
        arm=arm,
        covariate=covariate,
        z1=z1,
        z2=z2,
        z3=z3,
        obs_z=np.ones(n, dtype=bool),
        obs_y=np.ones(n, dtype=bool),
    )


def apply_missingness(ds: TrialDataset, rng: RngStream, pairs: int, final_only: int) -> TrialDataset:
    """Delete outcome data for randomly chosen subjects (MCAR, not stratified).

    ``pairs`` subjects lose both the intermediate and final outcome;
    ``final_only`` further subjects, drawn from those still holding an
    intermediate value, lose only the final outcome.
    """
    if pairs < 0 or final_only < 0:
        raise ConfigError("missingness counts must be nonnegative")
    if pairs + final_only > ds.n:
        raise ConfigError("missingness counts exceed the sample size")
    out = ds.take(np.arange(ds.n))
    if pairs == 0 and final_only == 0:
        return out
    g = rng.generator()
    pair_idx = g.permutation(ds.n)[:pairs]
    out.obs_z[pair_idx] = False
    out.obs_y[pair_idx] = False
    eligible = np.flatnonzero(out.obs_z)
    if final_only > eligible.size:
        raise DataStateError(
            f"cannot drop {final_only} final-only outcomes: only {eligible.size} subjects remain eligible"
        )
    final_idx = g.choice(eligible, size=final_only, replace=False)
    out.obs_y[final_idx] = False
    out.z2[~out.obs_z] = np.nan
    out.z3[~out.obs_y] = np.nan
    return out


def generate_external(scenario: ExternalScenario, base_cfg: GenConfig, rng: RngStream) -> TrialDataset:
    """Generate an external trial dataset (never any missing data).

    Size variants rescale n; conflict variants replace the arm effects with
    (-0.36, -0.28) for a strong conflict or (-0.18, -0.10) for a moderate one.
    """
    if not isinstance(scenario, ExternalScenario):
        raise ConfigError(f"unknown external scenario {scenario!r}")
    cfg = replace(base_cfg, missing_pairs=0, missing_final_only=0)
    if scenario is ExternalScenario.DOUBLE:
        cfg = replace(cfg, n=base_cfg.n * 2)
    elif scenario is ExternalScenario.HALF:
        cfg = replace(cfg, n=base_cfg.n // 2)
    elif scenario is ExternalScenario.STRONG_CONFLICT:
        cfg = replace(cfg, effect_12m=-0.36, effect_24m=-0.28)
    elif scenario is ExternalScenario.MODERATE_CONFLICT:
        cfg = replace(cfg, effect_12m=-0.18, effect_24m=-0.10)
    ds = generate_main(cfg, rng)
    ds.source_id = 1
    return ds


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(ds: TrialDataset, path) -> None:
    """Write the dataset in the documented 12-column layout; empty = missing."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        p1, p2, p3 = ds.p1, ds.p2, ds.p3
        for i in range(ds.n):
            oz, oy = bool(ds.obs_z[i]), bool(ds.obs_y[i])
            w.writerow([
                i,
                ds.source_id,
                int(ds.arm[i]),
                _fmt(ds.covariate[i]),
                _fmt(ds.z1[i]),
                _fmt(ds.z2[i]) if oz else "",
                _fmt(ds.z3[i]) if oy else "",
                _fmt(p1[i]),
                _fmt(p2[i]) if oz else "",
                _fmt(p3[i]) if oy else "",
                int(oz),
                int(oy),
            ])


def read_csv(path) -> TrialDataset:
    """Read a dataset written by :func:`write_csv`, checking column duality."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != CSV_HEADER:
            raise ConfigError(f"unexpected CSV header {header!r}")
        rows = list(r)
    n = len(rows)
    if n == 0:
        raise DataStateError("empty dataset file")
    arm = np.empty(n, dtype=np.int8)
    covariate = np.empty(n)
    z1 = np.empty(n)
    z2 = np.full(n, np.nan)
    z3 = np.full(n, np.nan)
    obs_z = np.zeros(n, dtype=bool)
    obs_y = np.zeros(n, dtype=bool)
    source = 0
    for i, row in enumerate(rows):
        source = int(row[1])
        arm[i] = int(row[2])
        covariate[i] = float(row[3])
        z1[i] = float(row[4])
        obs_z[i] = row[10] == "1"
        obs_y[i] = row[11] == "1"
        if obs_z[i]:
            z2[i] = float(row[5])
            if abs(float(row[8]) - ndtr(z2[i])) > 1e-12:
                raise DataStateError(f"row {i}: pBMI2 inconsistent with zBMI2")
        if obs_y[i]:
            z3[i] = float(row[6])
            if abs(float(row[9]) - ndtr(z3[i])) > 1e-12:
                raise DataStateError(f"row {i}: pBMI3 inconsistent with zBMI3")
    ds = TrialDataset(
        source_id=source, arm=arm, covariate=covariate,
        z1=z1, z2=z2, z3=z3, obs_z=obs_z, obs_y=obs_y,
    )
    ds.validate()
    return ds
