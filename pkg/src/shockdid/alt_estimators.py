"""Robustness estimators: TWFE event study on placebo-dated controls,
triple differences by gender and propensity-score matching of women to men."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, EstimationError
from .gt_did import EstimatorConfig, aggregate_dynamic, estimate_all_cells
from .inference import BootstrapSpec, EffectTable, effect_table
from .numerics import (
    DesignMatrix,
    RANK_TOL,
    cluster_robust_cov,
    fit_logistic,
    normal_quantile,
    normal_two_sided_p,
    within_transform,
)
from .panel_store import PanelDataset, baseline_covariates

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EventStudySpec:
    """Event-study regression settings.

    ``e_range`` lists the event times kept in the sample; ``base`` is the
    omitted period (added to the sample if absent). Controls are the cohort
    shocked exactly ``lag`` years after the focal cohort, dated at the focal
    cohort's shock year.
    """

    e_range: tuple = tuple(range(-5, 5))
    lag: int = 5
    base: int = -1
    level: float = 0.95

    def __post_init__(self):
        e = tuple(sorted(set(self.e_range) | {self.base}))
        object.__setattr__(self, "e_range", e)
        if self.lag <= max(e):
            raise ConfigError("lag must exceed the largest event time so controls stay untreated")
        if not 0.5 < self.level < 1:
            raise ConfigError("level must lie in (0.5, 1)")

    @property
    def estimated(self) -> tuple:
        return tuple(e for e in self.e_range if e != self.base)


@dataclass
class StackedSample:
    """Long sample of treated and placebo-dated control observations."""

    frame: pd.DataFrame  # unit_id, year, y, event_time, treated, female, focal
    focal: list
    skipped: list


def shifted_sample(ds: PanelDataset, outcome: str, spec: EventStudySpec) -> StackedSample:
    """Pair each focal cohort with the cohort shocked ``spec.lag`` years
    later. Focal cohorts are taken in ascending order and a unit keeps the
    first role it is given, so no unit appears twice."""
    if outcome not in ds.outcomes:
        raise ConfigError(f"unknown outcome {outcome!r}")
    cohorts = ds.cohorts
    assigned = np.zeros(ds.n_units, dtype=bool)
    role_focal = np.zeros(ds.n_units, dtype=np.int64)
    role_treated = np.zeros(ds.n_units, dtype=bool)
    focal, skipped = [], []
    for g in ds.cohort_years:
        treated = (cohorts == g) & ~assigned
        controls = (cohorts == g + spec.lag) & ~assigned
        if not treated.any() or not controls.any():
            if treated.any():
                skipped.append(g)
            continue
        focal.append(g)
        for mask, is_treated in ((treated, True), (controls, False)):
            assigned |= mask
            role_focal[mask] = g
            role_treated[mask] = is_treated
        n_dup = int(((cohorts == g + spec.lag) & ~controls).sum())
        if n_dup:
            log.info("focal cohort %d: %d control-cohort units already assigned earlier", g, n_dup)
    if not focal:
        raise EstimationError("no focal cohort has units shocked exactly lag years later")
    y = ds.wide(outcome)
    rows = np.flatnonzero(assigned)
    years = ds.years
    e_lo, e_hi = min(spec.e_range), max(spec.e_range)
    parts = []
    for r in rows:
        g = role_focal[r]
        yrs = np.arange(g + e_lo, g + e_hi + 1)
        cols = yrs - ds.span[0]
        inside = (cols >= 0) & (cols < len(years))
        vals = y[r, cols[inside]]
        ok = np.isfinite(vals)
        parts.append((np.full(ok.sum(), r), yrs[inside][ok], vals[ok], yrs[inside][ok] - g))
    pos = np.concatenate([p[0] for p in parts])
    frame = pd.DataFrame(
        {
            "unit_id": ds.unit_ids[pos],
            "year": np.concatenate([p[1] for p in parts]),
            "y": np.concatenate([p[2] for p in parts]),
            "event_time": np.concatenate([p[3] for p in parts]),
            "treated": role_treated[pos],
            "female": ds.units["gender"].to_numpy()[pos] == "female",
            "focal": role_focal[pos],
        }
    )
    return StackedSample(frame, focal, skipped)


def _independent_columns(Z: np.ndarray, fixed: int) -> list[int]:
    """Indices of columns kept: the first ``fixed`` always, others only
    when they add rank."""
    keep = list(range(fixed))
    scale = np.linalg.norm(Z, axis=0)
    ref = scale[:fixed].max() if fixed else scale.max()
    for j in range(fixed, Z.shape[1]):
        if scale[j] <= RANK_TOL * max(ref, 1.0):
            continue
        cand = Z[:, keep + [j]] / np.where(scale[keep + [j]] > 0, scale[keep + [j]], 1.0)
        s = np.linalg.svd(cand, compute_uv=False)
        if s[-1] > 1e-8 * s[0]:
            keep.append(j)
    return keep


def _fe_regression(frame, regressors: dict, required: list):
    """OLS of ``frame.y`` on ``regressors`` after absorbing unit and year
    effects; columns in ``required`` must be identified."""
    units = frame["unit_id"].to_numpy()
    years = frame["year"].to_numpy()
    names = list(regressors)
    X = np.column_stack([regressors[k] for k in names]).astype(float)
    dm = within_transform(np.column_stack([frame["y"].to_numpy(float), X]), units, years)
    yd, Xd = dm[:, 0], dm[:, 1:]
    req_idx = [names.index(k) for k in required]
    scale = np.linalg.norm(Xd[:, req_idx], axis=0)
    raw = np.linalg.norm(X[:, req_idx], axis=0)
    dead = [required[i] for i in range(len(required)) if scale[i] <= 1e-8 * max(raw[i], 1.0)]
    if dead:
        raise EstimationError(f"event-time dummies not identified (no variation): {dead}")
    order = req_idx + [j for j in range(len(names)) if j not in req_idx]
    keep = _independent_columns(Xd[:, order], len(req_idx))
    cols = [order[k] for k in keep]
    if len(keep) < len(req_idx):
        raise EstimationError("collinear event-time dummies")
    Z = Xd[:, cols]
    s = np.linalg.svd(Z, compute_uv=False)
    if s[-1] <= 1e-10 * s[0]:
        raise EstimationError(f"collinear event-time dummies among {[names[c] for c in cols]}")
    beta, *_ = np.linalg.lstsq(Z, yd, rcond=None)
    resid = yd - Z @ beta
    cov = cluster_robust_cov(Z, resid, units, df_model=Z.shape[1])
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    out = {names[c]: (beta[i], se[i]) for i, c in enumerate(cols)}
    dropped = [names[j] for j in range(len(names)) if j not in cols]
    return out, dropped


def _table(labels, est, se, n_treated, base, level, meta) -> EffectTable:
    est = np.asarray(est, dtype=float)
    se = np.asarray(se, dtype=float)
    z = normal_quantile(0.5 + level / 2)
    ok = se > 0
    p = np.where(ok, normal_two_sided_p(est / np.where(ok, se, 1.0)), np.nan)
    flags = [["base"] if lab == base else [] for lab in labels]
    return EffectTable(
        kind="dynamic",
        labels=list(labels),
        estimate=est,
        se=se,
        ci_lower=est - z * se,
        ci_upper=est + z * se,
        n_unique_treated=np.asarray(n_treated, dtype=np.int64),
        p_value=p,
        band="pointwise",
        critical_value=z,
        level=level,
        flags=flags,
        meta=meta,
    )


def _event_dummies(frame, spec):
    et = frame["event_time"].to_numpy()
    return {e: (et == e).astype(float) for e in spec.estimated}


def twfe_event_study(ds: PanelDataset, outcome: str, spec: EventStudySpec | None = None) -> EffectTable:
    """Dynamic TWFE regression with unit and year effects.

    Regressors are ``treated x 1[e]`` for every non-base event time plus the
    event-time main effects of the placebo-dated sample (dropped when the
    fixed effects absorb them). Standard errors are clustered by unit.
    """
    spec = spec or EventStudySpec()
    sample = shifted_sample(ds, outcome, spec)
    frame = sample.frame
    D = frame["treated"].to_numpy(float)
    dummies = _event_dummies(frame, spec)
    regs = {f"D:e{e}": D * d for e, d in dummies.items()}
    regs.update({f"e{e}": d for e, d in dummies.items()})
    required = [f"D:e{e}" for e in spec.estimated]
    coef, dropped = _fe_regression(frame, regs, required)
    return _event_table(frame, coef, spec, "D:e{}", {"estimator": "twfe", "focal_cohorts": sample.focal, "dropped": dropped})


def _event_table(frame, coef, spec, pattern, meta):
    treated = frame[frame["treated"]]
    labels, est, se, n = [], [], [], []
    for e in spec.e_range:
        labels.append(e)
        n.append(treated.loc[treated["event_time"] == e, "unit_id"].nunique())
        if e == spec.base:
            est.append(0.0)
            se.append(0.0)
        else:
            b, s = coef[pattern.format(e)]
            est.append(b)
            se.append(s)
    return _table(labels, est, se, n, spec.base, spec.level, meta)


def triple_did(ds: PanelDataset, outcome: str, spec: EventStudySpec | None = None) -> EffectTable:
    """Gender interaction of the event study: rows are the coefficients of
    ``treated x female x 1[e]``, the female-minus-male difference in effects."""
    spec = spec or EventStudySpec()
    sample = shifted_sample(ds, outcome, spec)
    frame = sample.frame
    for role in (True, False):
        genders = set(frame.loc[frame["treated"] == role, "female"])
        if len(genders) < 2:
            raise EstimationError("triple differences need both genders among treated and control units")
    D = frame["treated"].to_numpy(float)
    F = frame["female"].to_numpy(float)
    dummies = _event_dummies(frame, spec)
    regs = {f"DF:e{e}": D * F * d for e, d in dummies.items()}
    regs.update({f"D:e{e}": D * d for e, d in dummies.items()})
    regs.update({f"F:e{e}": F * d for e, d in dummies.items()})
    regs.update({f"e{e}": d for e, d in dummies.items()})
    required = [f"DF:e{e}" for e in spec.estimated] + [f"D:e{e}" for e in spec.estimated]
    coef, dropped = _fe_regression(frame, regs, required)
    meta = {"estimator": "triple_did", "contrast": "female - male", "focal_cohorts": sample.focal, "dropped": dropped}
    return _event_table(frame, coef, spec, "DF:e{}", meta)


# -- matching ------------------------------------------------------------------------------

BALANCE_COLUMNS = [
    "Means Treated",
    "Means Control",
    "Std. Mean Diff.",
    "Var. Ratio",
    "eCDF Mean",
    "eCDF Max",
    "Std. Pair Dist.",
]


@dataclass
class MatchResult:
    pairs: pd.DataFrame  # treated, control, distance
    unmatched_treated: int
    unmatched_control: int
    balance_before: pd.DataFrame
    balance_after: pd.DataFrame
    propensity: pd.Series
    treated_group: str
    caliper: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def matched_units(self) -> list:
        return sorted(set(self.pairs["treated"]) | set(self.pairs["control"]))


def _is_binary(x: np.ndarray) -> bool:
    return bool(np.all(np.isin(x, (0.0, 1.0))))


def _ecdf_gaps(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    grid = np.union1d(a, b)
    fa = np.searchsorted(np.sort(a), grid, side="right") / a.size
    fb = np.searchsorted(np.sort(b), grid, side="right") / b.size
    gap = np.abs(fa - fb)
    return float(gap.mean()), float(gap.max())


def balance_table(frame: pd.DataFrame, treated: np.ndarray, columns: list, pairs=None) -> pd.DataFrame:
    """Covariate balance between ``treated`` rows and the rest.

    Standardised differences use the pooled scale ``sqrt((s1^2 + s0^2) / 2)``
    of the groups being compared. The variance ratio is omitted for 0/1
    variables. The standardised pair distance (mean absolute within-pair
    difference over the same scale) needs ``pairs``, a tuple of row
    positions ``(treated_rows, control_rows)``.
    """
    out = {}
    for col in columns:
        x = frame[col].to_numpy(dtype=float)
        a, b = x[treated], x[~treated]
        m1, m0 = a.mean(), b.mean()
        v1 = a.var(ddof=1) if a.size > 1 else 0.0
        v0 = b.var(ddof=1) if b.size > 1 else 0.0
        scale = np.sqrt((v1 + v0) / 2.0)
        smd = (m1 - m0) / scale if scale > 0 else 0.0
        ratio = np.nan if _is_binary(x) or v0 == 0 else v1 / v0
        e_mean, e_max = _ecdf_gaps(a, b)
        pair = np.nan
        if pairs is not None and scale > 0:
            pair = float(np.mean(np.abs(x[pairs[0]] - x[pairs[1]])) / scale)
        out[col] = [m1, m0, smd, ratio, e_mean, e_max, pair]
    return pd.DataFrame.from_dict(out, orient="index", columns=BALANCE_COLUMNS)


def ps_match(
    baseline: pd.DataFrame,
    covariates,
    group_column: str = "gender",
    treated_group: str = "female",
    caliper: float | None = None,
) -> MatchResult:
    """Greedy 1:1 nearest-neighbour matching on the estimated propensity
    without replacement.

    ``baseline`` has one row per unit (index = unit id) with the covariates
    and the group label. Treated-role units are processed in descending
    propensity order (ties by unit id); each takes the closest remaining
    control (ties by unit id), subject to ``caliper`` on the propensity scale.
    """
    covariates = list(covariates)
    frame = baseline.sort_index(kind="stable")
    missing = frame[covariates].isna().any(axis=1)
    if missing.any():
        raise EstimationError(f"{int(missing.sum())} units lack baseline covariates")
    treated = frame[group_column].to_numpy() == treated_group
    if treated.all() or not treated.any():
        raise EstimationError("matching needs units in both groups")
    X = DesignMatrix.from_frame(frame, covariates)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_logistic(X, treated.astype(float))
    p = fit.fitted
    ids = frame.index.to_numpy()
    t_idx = np.flatnonzero(treated)
    c_idx = np.flatnonzero(~treated)
    # ids are sorted, so stable sorts break ties by unit id
    t_order = t_idx[np.argsort(-p[t_idx], kind="stable")]
    c_sorted = c_idx[np.argsort(p[c_idx], kind="stable")]
    pc = p[c_sorted]
    free = np.ones(c_sorted.size, dtype=bool)
    pairs = []
    for i in t_order:
        if not free.any():
            break
        d = np.where(free, np.abs(pc - p[i]), np.inf)
        best = d.min()
        if caliper is not None and best > caliper:
            continue
        # nearest distance, then smallest unit id among exact ties
        cands = np.flatnonzero(d == best)
        j = cands[np.argmin(c_sorted[cands])] if cands.size > 1 else cands[0]
        free[j] = False
        pairs.append((ids[i], ids[c_sorted[j]], float(best)))
    if not pairs:
        warnings.warn("caliper excludes every treated unit; no pairs formed", stacklevel=2)
    pair_frame = pd.DataFrame(pairs, columns=["treated", "control", "distance"])
    work = frame[covariates].astype(float).copy()
    work.insert(0, "Distance", p)
    cols = ["Distance", *covariates]
    before = balance_table(work, treated, cols)
    if pairs:
        pos = {u: k for k, u in enumerate(ids)}
        tp = np.array([pos[u] for u in pair_frame["treated"]])
        cp = np.array([pos[u] for u in pair_frame["control"]])
        rows = np.r_[tp, cp]
        sub = work.iloc[rows].reset_index(drop=True)
        flag = np.r_[np.ones(tp.size, bool), np.zeros(cp.size, bool)]
        after = balance_table(sub, flag, cols, pairs=(np.arange(tp.size), np.arange(tp.size, rows.size)))
    else:
        after = pd.DataFrame(np.nan, index=cols, columns=BALANCE_COLUMNS)
    return MatchResult(
        pairs=pair_frame,
        unmatched_treated=int(treated.sum()) - len(pairs),
        unmatched_control=int((~treated).sum()) - len(pairs),
        balance_before=before,
        balance_after=after,
        propensity=pd.Series(p, index=frame.index, name="propensity"),
        treated_group=treated_group,
        caliper=caliper,
        meta={"converged": fit.converged},
    )


def match_dataset(ds: PanelDataset, covariates, caliper: float | None = None) -> MatchResult:
    """Match women to men on covariates measured the year before their shock."""
    base = baseline_covariates(ds, covariates)
    base["gender"] = ds.units["gender"].to_numpy()
    incomplete = base[list(covariates)].isna().any(axis=1)
    if incomplete.any():
        log.info("dropping %d units without baseline covariates before matching", int(incomplete.sum()))
        base = base[~incomplete]
    return ps_match(base, covariates, caliper=caliper)


def matched_gt_did(
    ds: PanelDataset, match: MatchResult, config: EstimatorConfig, spec: BootstrapSpec
) -> dict[str, EffectTable]:
    """Dynamic group-time tables per gender on the matched sample."""
    if match.pairs.empty:
        raise EstimationError("matching produced no pairs")
    sub = ds.subset_units(match.matched_units)
    out = {}
    for gender in ("male", "female"):
        cells = estimate_all_cells(sub.by_gender(gender), config)
        out[gender] = effect_table(aggregate_dynamic(cells), spec)
    return out


# -- de-trended placebo series --------------------------------------------------------------


def placebo_trend_series(ds: PanelDataset, outcome: str, spec: EventStudySpec | None = None) -> pd.DataFrame:
    """Mean outcome by event time after removing year effects, for treated
    units and for the placebo-dated controls (shocked ``lag`` years later),
    by gender. Plot-ready: one row per (gender, group, event time)."""
    spec = spec or EventStudySpec()
    frame = shifted_sample(ds, outcome, spec).frame
    # year effects from untreated observations only, so post-shock effects stay in the series
    untreated = ~(frame["treated"] & (frame["event_time"] >= 0))
    year_mean = frame[untreated].groupby("year")["y"].mean()
    effect = frame["year"].map(year_mean).fillna(year_mean.mean()) - year_mean.mean()
    frame = frame.assign(resid=frame["y"] - effect)
    frame["group"] = np.where(frame["treated"], "treated", "placebo_control")
    frame["gender"] = np.where(frame["female"], "female", "male")
    z = normal_quantile(0.5 + spec.level / 2)
    stats = frame.groupby(["gender", "group", "event_time"])["resid"].agg(["mean", "std", "count"]).reset_index()
    half = z * stats["std"].fillna(0.0) / np.sqrt(stats["count"])
    stats["ci_lower"] = stats["mean"] - half
    stats["ci_upper"] = stats["mean"] + half
    return stats.rename(columns={"count": "n"})[["gender", "group", "event_time", "mean", "ci_lower", "ci_upper", "n"]]
