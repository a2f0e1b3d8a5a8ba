"""Bootstrap inference for group-time effects and their aggregates.

The multiplier bootstrap perturbs the stored influence vectors with one
mean-zero, unit-variance weight per unit. Replication ``b`` draws from its
own counter-based Philox stream keyed by the seed, so each replication
gives the same weights regardless of order or batching.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd

from .errors import ConfigError, EstimationError
from .gt_did import (
    AggregatedEffects,
    EstimatorConfig,
    aggregate_dynamic,
    aggregate_group,
    aggregate_overall,
    estimate_all_cells,
)
from .numerics import normal_quantile, normal_two_sided_p
from .panel_store import PanelDataset

log = logging.getLogger(__name__)

_SQRT5 = math.sqrt(5.0)
MAMMEN_LOW = (1.0 - _SQRT5) / 2.0
MAMMEN_HIGH = (1.0 + _SQRT5) / 2.0
MAMMEN_P_LOW = (1.0 + _SQRT5) / (2.0 * _SQRT5)
_IQR_NORMAL = normal_quantile(0.75) - normal_quantile(0.25)

TABLE_COLUMNS = ["Avg ATT", "CI-Lower", "CI-Upper", "No uniq treated", "p-value"]
LABEL_COLUMN = {"dynamic": "Event Time", "group": "Cohort", "overall": "Aggregate"}


@dataclass(frozen=True)
class BootstrapSpec:
    reps: int = 999
    weights: Literal["mammen", "rademacher"] = "mammen"
    seed: int = 0
    band: Literal["pointwise", "simultaneous"] = "simultaneous"
    level: float = 0.95

    def __post_init__(self):
        if self.reps < 99:
            raise ConfigError("bootstrap reps must be at least 99")
        if not 0.5 < self.level < 1.0:
            raise ConfigError("level must lie in (0.5, 1)")
        if self.weights not in ("mammen", "rademacher"):
            raise ConfigError(f"unknown multiplier law {self.weights!r}")
        if self.band not in ("pointwise", "simultaneous"):
            raise ConfigError(f"unknown band type {self.band!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a non-negative 64-bit integer")


def replication_rng(seed: int, b: int, stream: int = 0) -> np.random.Generator:
    """Generator for replication ``b``; independent of every other ``b``."""
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, b, stream, 0]))


def multiplier_draws(n: int, spec: BootstrapSpec, b: int) -> np.ndarray:
    u = replication_rng(spec.seed, b).random(n)
    if spec.weights == "mammen":
        return np.where(u < MAMMEN_P_LOW, MAMMEN_LOW, MAMMEN_HIGH)
    return np.where(u < 0.5, -1.0, 1.0)


@dataclass
class BandResult:
    """Standard errors and band limits for a set of rows."""

    se: np.ndarray
    critical_value: float
    lower: np.ndarray
    upper: np.ndarray
    p_value: np.ndarray
    degenerate: np.ndarray
    band: str
    level: float
    reps: int
    quantiles: dict = field(default_factory=dict)  # probability -> per-row quantile of the draws
    rejected_draws: int = 0


def _iqr_se(draws: np.ndarray) -> np.ndarray:
    q25, q75 = np.quantile(draws, [0.25, 0.75], axis=0)
    return (q75 - q25) / _IQR_NORMAL


def _sup_critical(deviations, se, ok, level, pointwise_z):
    """Level quantile of the sup t-statistic over non-degenerate rows,
    floored at the pointwise value when there are two or more rows."""
    if not ok.any():
        return pointwise_z
    t = np.abs(deviations[:, ok]) / se[ok]
    c = float(np.quantile(t.max(axis=1), level))
    return max(c, pointwise_z) if ok.sum() >= 2 else c


def _finish(estimates, se, draws, crit_fn, spec, reps, rejected=0, percentile=None):
    estimates = np.asarray(estimates, dtype=float)
    tol = 1e-12 * max(1.0, float(np.nanmax(np.abs(estimates))) if estimates.size else 1.0)
    zero = se <= tol
    degenerate = zero & (np.abs(estimates) > tol)
    ok = ~zero
    z = normal_quantile(0.5 + spec.level / 2.0)
    crit = crit_fn(ok, z) if spec.band == "simultaneous" else z
    safe = np.where(ok, se, 1.0)
    if percentile is not None and spec.band == "pointwise":
        lower, upper = percentile
    else:
        lower = estimates - crit * np.where(ok, se, 0.0)
        upper = estimates + crit * np.where(ok, se, 0.0)
    p = np.where(ok, normal_two_sided_p(estimates / safe), np.where(degenerate, 0.0, 1.0))
    if degenerate.any():
        log.warning("rows %s have zero bootstrap spread with a nonzero estimate", np.flatnonzero(degenerate).tolist())
    probs = (0.025, 0.25, 0.5, 0.75, 0.975)
    quantiles = dict(zip(probs, np.quantile(draws, probs, axis=0))) if draws.size else {}
    return BandResult(se, float(crit), lower, upper, p.astype(float), degenerate, spec.band, spec.level, reps, quantiles, rejected)


def _influence_and_estimates(source):
    if isinstance(source, AggregatedEffects):
        present = source.present()
        return present.influence, present.estimates
    if isinstance(source, tuple):
        influence, estimates = source
        return np.atleast_2d(np.asarray(influence, dtype=float)), np.asarray(estimates, dtype=float)
    cells = [c for c in source if c.identified]
    return np.array([c.influence for c in cells]), np.array([c.att for c in cells])


def multiplier_bootstrap(source, spec: BootstrapSpec, chunk: int = 256) -> BandResult:
    """Bands for the rows of ``source``.

    ``source`` is an :class:`AggregatedEffects` (missing rows are skipped),
    an iterable of cells, or an ``(influence, estimates)`` pair with
    influence of shape ``rows x N``. Deviations are
    ``Delta_r = mean_i V_i psi_ir``.
    """
    psi, estimates = _influence_and_estimates(source)
    if psi.ndim != 2 or psi.shape[0] != estimates.size:
        raise ValueError("influence must have one row per estimate")
    n = psi.shape[1]
    deviations = np.empty((spec.reps, psi.shape[0]))
    for lo in range(0, spec.reps, chunk):
        hi = min(lo + chunk, spec.reps)
        V = np.stack([multiplier_draws(n, spec, b) for b in range(lo, hi)])
        deviations[lo:hi] = V @ psi.T / n
    se = _iqr_se(deviations)
    return _finish(
        estimates,
        se,
        deviations,
        lambda ok, z: _sup_critical(deviations, se, ok, spec.level, z),
        spec,
        spec.reps,
    )


# -- tables ------------------------------------------------------------------------------


@dataclass
class EffectTable:
    """Estimates with bands in the published table layout.

    The CSV has the label column (``Event Time``, ``Cohort`` or
    ``Aggregate``) followed by ``Avg ATT, CI-Lower, CI-Upper,
    No uniq treated, p-value``. The JSON form adds standard errors, row
    flags and run metadata.
    """

    kind: str
    labels: list
    estimate: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    n_unique_treated: np.ndarray
    p_value: np.ndarray
    band: str
    critical_value: float
    level: float
    flags: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def label_column(self) -> str:
        return LABEL_COLUMN.get(self.kind, "Label")

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                self.label_column: self.labels,
                "Avg ATT": self.estimate,
                "CI-Lower": self.ci_lower,
                "CI-Upper": self.ci_upper,
                "No uniq treated": self.n_unique_treated.astype(np.int64),
                "p-value": self.p_value,
            }
        )
        return frame

    def row(self, label) -> dict:
        i = self.labels.index(label)
        return {
            "label": label,
            "estimate": float(self.estimate[i]),
            "se": float(self.se[i]),
            "ci_lower": float(self.ci_lower[i]),
            "ci_upper": float(self.ci_upper[i]),
            "n_unique_treated": int(self.n_unique_treated[i]),
            "p_value": float(self.p_value[i]),
            "flags": list(self.flags[i]) if self.flags else [],
        }

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.8g", lineterminator="\n")

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        rows = [{k: clean(v) for k, v in self.row(lab).items()} for lab in self.labels]
        return {
            "kind": self.kind,
            "band": self.band,
            "level": self.level,
            "critical_value": self.critical_value,
            "meta": self.meta,
            "rows": rows,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def effect_table(agg: AggregatedEffects, spec: BootstrapSpec, band: BandResult | None = None) -> EffectTable:
    """Attach bootstrap bands to aggregated estimates. Missing rows keep NaN
    entries and the ``missing`` flag."""
    present = agg.present()
    if band is None:
        if len(present) == 0:
            raise EstimationError("no identified rows to build a table from")
        band = multiplier_bootstrap(present, spec)
    R = len(agg)
    full = {name: np.full(R, np.nan) for name in ("se", "lo", "hi", "p")}
    idx = np.flatnonzero(~agg.missing)
    full["se"][idx], full["lo"][idx], full["hi"][idx], full["p"][idx] = band.se, band.lower, band.upper, band.p_value
    flags = [[] for _ in range(R)]
    for i in np.flatnonzero(agg.missing):
        flags[i].append("missing")
    for j in np.flatnonzero(band.degenerate):
        flags[idx[j]].append("degenerate")
    meta = {**agg.meta, "reps": spec.reps, "weights": spec.weights, "seed": spec.seed}
    return EffectTable(
        kind=agg.kind,
        labels=list(agg.labels),
        estimate=agg.estimates.copy(),
        se=full["se"],
        ci_lower=full["lo"],
        ci_upper=full["hi"],
        n_unique_treated=agg.n_unique_treated.copy(),
        p_value=full["p"],
        band=band.band,
        critical_value=band.critical_value,
        level=band.level,
        flags=flags,
        meta=meta,
    )


# -- empirical bootstrap ---------------------------------------------------------------


def resample_units(ds: PanelDataset, positions: np.ndarray) -> PanelDataset:
    """Dataset holding the units at ``positions`` (repeats allowed); the
    k-th copy of a unit is renamed ``<id>#k``."""
    ids = ds.unit_ids[positions]
    copy_no = pd.Series(ids).groupby(ids).cumcount().to_numpy()
    new_ids = np.char.add(np.char.add(ids.astype(str), "#"), copy_no.astype(str))
    units = ds.units.iloc[positions].copy()
    units.index = pd.Index(new_ids, name="unit_id")
    starts = np.searchsorted(ds.obs["unit_id"].to_numpy(), ds.unit_ids)
    ends = np.r_[starts[1:], len(ds.obs)]
    rows = np.concatenate([np.arange(starts[p], ends[p]) for p in positions])
    obs = ds.obs.iloc[rows].copy()
    obs["unit_id"] = np.repeat(new_ids, (ends - starts)[positions])
    return PanelDataset(units, obs, ds.outcomes, ds.covariates, ds.span, ds.provenance)


def _aggregate(cellset, aggregate: str, **kw) -> AggregatedEffects:
    if aggregate == "dynamic":
        return aggregate_dynamic(cellset)
    if aggregate == "group":
        return aggregate_group(cellset, kw.get("exclude_year_zero", False))
    if aggregate == "overall":
        return aggregate_overall(cellset, kw.get("weighting", "cohort_size"), kw.get("exclude_year_zero", False))
    raise ConfigError(f"unknown aggregation {aggregate!r}")


def empirical_bootstrap(
    ds: PanelDataset,
    config: EstimatorConfig,
    spec: BootstrapSpec,
    aggregate: str = "dynamic",
    max_rejections: int | None = None,
    **agg_kw,
) -> tuple[AggregatedEffects, BandResult]:
    """Resample units with replacement and re-run the whole pipeline.

    Pointwise bands are percentile intervals of the re-estimates. Simultaneous
    bands use the sup-t critical value of the re-estimate deviations. A draw
    in which any originally identified row cannot be estimated is rejected
    and redrawn.
    """
    point = _aggregate(estimate_all_cells(ds, config), aggregate, **agg_kw)
    keep = ~point.missing
    estimates = point.estimates[keep]
    max_rejections = spec.reps if max_rejections is None else max_rejections
    draws = np.empty((spec.reps, keep.sum()))
    rejected, attempt = 0, 0
    b = 0
    while b < spec.reps:
        rng = replication_rng(spec.seed, attempt, stream=1)
        attempt += 1
        positions = np.sort(rng.integers(0, ds.n_units, ds.n_units))
        agg = _aggregate(estimate_all_cells(resample_units(ds, positions), config), aggregate, **agg_kw)
        if agg.missing[keep].any() or list(agg.labels) != list(point.labels):
            rejected += 1
            if rejected > max_rejections:
                raise EstimationError(f"empirical bootstrap rejected {rejected} draws")
            continue
        draws[b] = agg.estimates[keep]
        b += 1
    if rejected:
        log.info("empirical bootstrap redrew %d rejected samples", rejected)
    deviations = draws - estimates
    se = _iqr_se(deviations)
    alpha = 1.0 - spec.level
    percentile = tuple(np.quantile(draws, [alpha / 2, 1 - alpha / 2], axis=0))
    band = _finish(
        estimates,
        se,
        deviations,
        lambda ok, z: _sup_critical(deviations, se, ok, spec.level, z),
        spec,
        spec.reps,
        rejected,
        percentile,
    )
    return point, band
