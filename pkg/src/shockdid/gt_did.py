"""Group-time average treatment effects on rolling-window risk sets.

Every cell compares the change ``Y_t - Y_base`` of cohort ``g`` with that of
not-yet-treated comparison cohorts. Post-period cells use ``base = g - 1``.
Pre-period cells use ``base = t - 1``, so they are short one-period
placebo comparisons.

Influence contributions are stored as dense vectors over all dataset units,
scaled so that ``att_hat - att ~ mean_i psi_i`` with the mean taken over the
dataset's N units. A multiplier ``V_i`` per unit then perturbs every cell
and aggregate consistently.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ConfigError, RankDeficientError
from .numerics import DesignMatrix, SeparationWarning, fit_logistic, fit_ols
from .panel_store import PanelDataset, Strategy, baseline_covariates, risk_positions

log = logging.getLogger(__name__)

DEFAULT_E_RANGE = tuple(range(-4, 5))
Weighting = Literal["cohort_size", "equal", "event"]


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings for one cell-estimation run.

    ``ps_covariates`` and ``or_covariates`` override ``covariates`` for the
    propensity and outcome models respectively. With no covariates at all the
    unconditional two-mean comparison is used.
    """

    outcome: str
    window: int = 5
    strategy: Strategy = "not_yet_treated_window"
    covariates: tuple = ()
    ps_covariates: tuple | None = None
    or_covariates: tuple | None = None
    trim: float = 0.995
    e_range: tuple = DEFAULT_E_RANGE

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be a positive number of years")
        if self.strategy not in ("not_yet_treated_window", "shifted_exact"):
            raise ConfigError(f"unknown control strategy {self.strategy!r}")
        if not 0.5 < self.trim <= 1.0:
            raise ConfigError("trim must lie in (0.5, 1]")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "e_range", tuple(sorted(self.e_range)))
        for name in ("ps_covariates", "or_covariates"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))

    @property
    def propensity_covariates(self) -> tuple:
        return self.covariates if self.ps_covariates is None else self.ps_covariates

    @property
    def outcome_covariates(self) -> tuple:
        return self.covariates if self.or_covariates is None else self.or_covariates

    @property
    def doubly_robust(self) -> bool:
        return bool(self.propensity_covariates or self.outcome_covariates)


@dataclass(frozen=True, eq=False)
class GroupTimeCell:
    g: int
    t: int
    base: int
    att: float | None
    influence: np.ndarray | None  # length N, aligned with the dataset's unit order
    treated: np.ndarray  # positions of contributing treated units
    n_treated: int
    n_control: int
    status: str = "ok"
    flags: tuple = ()

    @property
    def e(self) -> int:
        return self.t - self.g

    @property
    def identified(self) -> bool:
        return self.status == "ok"


@dataclass
class NuisanceFits:
    propensity: object | None  # FitResult or None for the unconditional estimator
    outcome: object | None
    propensity_values: np.ndarray | None
    trimmed: list = field(default_factory=list)
    dropped_covariates: list = field(default_factory=list)
    fallback: bool = False


@dataclass
class CellSet:
    """All cells of one estimation run plus the unit index they refer to."""

    cells: list
    unit_ids: np.ndarray
    config: EstimatorConfig
    trimmed: dict = field(default_factory=dict)  # (g, t) -> trimmed unit ids

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    def identified(self) -> list:
        return [c for c in self.cells if c.identified]

    def get(self, g: int, t: int) -> GroupTimeCell | None:
        for c in self.cells:
            if c.g == g and c.t == t:
                return c
        return None


def _base_year(g: int, t: int) -> int:
    return g - 1 if t >= g else t - 1


def _unidentified(g, t, base, status, treated=None, n_control=0):
    treated = np.zeros(0, dtype=np.int64) if treated is None else treated
    return GroupTimeCell(g, t, base, None, None, treated, int(treated.size), int(n_control), status)


def _changes(ds: PanelDataset, outcome: str, t: int, base: int, pos: np.ndarray) -> np.ndarray:
    y = ds.wide(outcome)
    return y[pos, ds.year_index(t)] - y[pos, ds.year_index(base)]


def _cell_frame(ds, g, t, window, strategy, outcome):
    base = _base_year(g, t)
    if ds.year_index(t) is None or ds.year_index(base) is None or ds.year_index(g - 1) is None:
        return base, None, None, "outside-span"
    treated, controls = risk_positions(ds, g, t, window, strategy, outcome, base)
    if treated.size == 0:
        return base, treated, controls, "no-treated"
    if controls.size == 0:
        return base, treated, controls, "no-controls"
    return base, treated, controls, "ok"


def _influence(N, treated, controls, w1, w0, r, correction=None):
    n = w1.size
    eta1 = np.mean(w1 * r)
    eta0 = np.mean(w0 * r)
    phi = w1 * (r - eta1) - w0 * (r - eta0)
    if correction is not None:
        phi = phi + correction
    psi = np.zeros(N)
    psi[treated] = phi[: treated.size]
    psi[controls] = phi[treated.size :]
    psi *= N / n
    return eta1 - eta0, psi


def att_gt_unconditional(
    ds: PanelDataset,
    g: int,
    t: int,
    window: int = 5,
    strategy: Strategy = "not_yet_treated_window",
    outcome: str | None = None,
) -> GroupTimeCell:
    """Difference of mean changes between cohort ``g`` and its risk-set controls."""
    outcome = outcome or ds.outcomes[0]
    base, treated, controls, status = _cell_frame(ds, g, t, window, strategy, outcome)
    if status != "ok":
        return _unidentified(g, t, base, status, treated, 0 if controls is None else controls.size)
    d1 = _changes(ds, outcome, t, base, treated)
    d0 = _changes(ds, outcome, t, base, controls)
    n1, n0 = d1.size, d0.size
    n = n1 + n0
    w1 = np.r_[np.full(n1, n / n1), np.zeros(n0)]
    w0 = np.r_[np.zeros(n1), np.full(n0, n / n0)]
    _, psi = _influence(ds.n_units, treated, controls, w1, w0, np.r_[d1, d0])
    att = float(d1.mean() - d0.mean())
    return GroupTimeCell(g, t, base, att, psi, treated, n1, n0)


def _fit_with_retry(fit, X: np.ndarray, names: list, y, dropped: list):
    """Fit on the non-constant columns. On rank deficiency, drop the last
    named collinear column and retry once."""
    cols = [c for j, c in enumerate(names) if np.ptp(X[:, j]) > 0]
    dropped.extend(c for c in names if c not in cols)
    for attempt in range(2):
        idx = [names.index(c) for c in cols]
        design = np.column_stack([np.ones(X.shape[0]), X[:, idx]])
        try:
            return fit(DesignMatrix(design, ("intercept", *cols)), y), cols
        except RankDeficientError as err:
            bad = [c for c in err.columns if c != "intercept"]
            if attempt or not bad:
                raise
            dropped.append(bad[-1])
            cols = [c for c in cols if c != bad[-1]]
    raise AssertionError("unreachable")


def _estimation_effects(G, odds, r, X_ps=None, p=None, X_or=None):
    """Influence terms for having estimated the nuisance models.

    ``X_ps`` and ``X_or`` are the fitted designs (with intercept) over the
    cell sample, ``p`` the fitted propensities and ``r = dY - m(X)``. Each
    term is the fit's linear representation times the derivative of the
    estimate with respect to its coefficients. Both vanish when the models
    are intercept-only.
    """
    n = G.size
    out = np.zeros(n)
    eta0 = np.sum(odds * r) / odds.sum()
    if X_or is not None:
        ctrl = 1.0 - G
        gram = (X_or * ctrl[:, None]).T @ X_or / n
        lin_or = np.linalg.solve(gram, (X_or * (ctrl * r)[:, None]).T).T
        imbalance = (G @ X_or) / G.sum() - (odds @ X_or) / odds.sum()
        out -= lin_or @ imbalance
    if X_ps is not None:
        info = (X_ps * (p * (1.0 - p))[:, None]).T @ X_ps / n
        lin_ps = np.linalg.solve(info, (X_ps * (G - p)[:, None]).T).T
        slope = (X_ps * (odds * (r - eta0))[:, None]).sum(axis=0) / odds.sum()
        out -= lin_ps @ slope
    return out


def att_gt_doubly_robust(
    ds: PanelDataset,
    g: int,
    t: int,
    window: int = 5,
    strategy: Strategy = "not_yet_treated_window",
    covariates=(),
    trim: float = 0.995,
    outcome: str | None = None,
    ps_covariates=None,
    or_covariates=None,
    baseline=None,
) -> tuple[GroupTimeCell, NuisanceFits]:
    """Doubly robust ATT(g, t).

    The propensity of cohort-``g`` membership is fit by logit on the cell
    sample (treated and controls), the outcome change by OLS on controls, both
    on covariates frozen at ``g - 1``. Controls with fitted propensity above
    ``trim`` get zero weight. If the logit separates, an intercept-only
    propensity is used and the cell is flagged.
    """
    outcome = outcome or ds.outcomes[0]
    ps_cov = list(covariates if ps_covariates is None else ps_covariates)
    or_cov = list(covariates if or_covariates is None else or_covariates)
    nuisance = NuisanceFits(None, None, None)
    base, treated, controls, status = _cell_frame(ds, g, t, window, strategy, outcome)
    if status != "ok":
        return _unidentified(g, t, base, status, treated, 0 if controls is None else controls.size), nuisance

    every = sorted(set(ps_cov) | set(or_cov))
    flags = []
    if every:
        if baseline is None:
            baseline = baseline_covariates(ds, every)
        base_values = baseline[every].to_numpy(dtype=float)
        complete = np.isfinite(base_values).all(axis=1)
        if not complete[treated].all() or not complete[controls].all():
            flags.append("missing-covariates")
            treated = treated[complete[treated]]
            controls = controls[complete[controls]]
            if treated.size == 0 or controls.size == 0:
                status = "no-treated" if treated.size == 0 else "no-controls"
                return _unidentified(g, t, base, status, treated, controls.size), nuisance
    pos = np.r_[treated, controls]
    n1, n0 = treated.size, controls.size
    G = np.r_[np.ones(n1), np.zeros(n0)]
    dy = _changes(ds, outcome, t, base, pos)

    X_ps = X_or = None
    if ps_cov:
        X = baseline[ps_cov].to_numpy(dtype=float)[pos]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SeparationWarning)
            ps_fit, ps_cols = _fit_with_retry(fit_logistic, X, ps_cov, G, nuisance.dropped_covariates)
        if ps_fit.converged:
            p = ps_fit.fitted
            X_ps = np.column_stack([np.ones(pos.size), X[:, [ps_cov.index(c) for c in ps_cols]]])
        else:
            nuisance.fallback = True
            flags.append("propensity-fallback")
            log.info("cell (%d, %d): propensity separation, using intercept-only model", g, t)
            p = np.full(pos.size, n1 / pos.size)
        nuisance.propensity = ps_fit
    else:
        p = np.full(pos.size, n1 / pos.size)

    if or_cov:
        X = baseline[or_cov].to_numpy(dtype=float)[pos]
        or_fit, cols = _fit_with_retry(fit_ols, X[n1:], or_cov, dy[n1:], nuisance.dropped_covariates)
        idx = [or_cov.index(c) for c in cols]
        X_or = np.column_stack([np.ones(pos.size), X[:, idx]])
        m = X_or @ or_fit.params
        nuisance.outcome = or_fit
    else:
        m = np.full(pos.size, dy[n1:].mean())
    if nuisance.dropped_covariates:
        flags.append("dropped-covariates")

    odds = np.zeros(pos.size)
    ctrl = slice(n1, None)
    trimmed = p[ctrl] > trim
    odds[ctrl] = np.where(trimmed, 0.0, p[ctrl] / (1.0 - np.minimum(p[ctrl], trim)))
    if trimmed.any():
        nuisance.trimmed = ds.unit_ids[controls[trimmed]].tolist()
        flags.append("trimmed")
        log.info("cell (%d, %d): trimmed %d controls with propensity > %s", g, t, trimmed.sum(), trim)
    if not odds.sum() > 0:
        cell = _unidentified(g, t, base, "all-controls-trimmed", treated, n0)
        return cell, nuisance
    nuisance.propensity_values = p
    w1 = G / G.mean()
    w0 = odds / odds.mean()
    r = dy - m
    correction = _estimation_effects(G, odds, r, X_ps, p, X_or)
    att, psi = _influence(ds.n_units, treated, controls, w1, w0, r, correction)
    cell = GroupTimeCell(g, t, base, float(att), psi, treated, n1, n0, "ok", tuple(flags))
    return cell, nuisance


def feasible_cells(ds: PanelDataset, e_range=DEFAULT_E_RANGE) -> list[tuple[int, int]]:
    return [(g, g + e) for g in ds.cohort_years for e in e_range]


def estimate_all_cells(ds: PanelDataset, config: EstimatorConfig) -> CellSet:
    """Estimate every ``(g, g + e)`` cell for ``e`` in ``config.e_range``.

    Cells that cannot be estimated stay in the result with a status
    (``outside-span``, ``no-controls``, ``no-treated``,
    ``all-controls-trimmed``).
    """
    if config.outcome not in ds.outcomes:
        raise ConfigError(f"unknown outcome {config.outcome!r}; dataset has {list(ds.outcomes)}")
    missing = [c for c in set(config.propensity_covariates) | set(config.outcome_covariates) if c not in ds.covariates]
    if missing:
        raise ConfigError(f"unknown covariates {sorted(missing)}")
    cells, trimmed = [], {}
    baseline = None
    if config.doubly_robust:
        baseline = baseline_covariates(ds, sorted(set(config.propensity_covariates) | set(config.outcome_covariates)))
    for g, t in feasible_cells(ds, config.e_range):
        if config.doubly_robust:
            try:
                cell, fits = att_gt_doubly_robust(
                    ds,
                    g,
                    t,
                    config.window,
                    config.strategy,
                    trim=config.trim,
                    outcome=config.outcome,
                    ps_covariates=config.propensity_covariates,
                    or_covariates=config.outcome_covariates,
                    baseline=baseline,
                )
            except RankDeficientError as err:
                log.warning("cell (%d, %d): %s", g, t, err)
                cells.append(_unidentified(g, t, _base_year(g, t), "rank-deficient"))
                continue
            if fits.trimmed:
                trimmed[(g, t)] = fits.trimmed
        else:
            cell = att_gt_unconditional(ds, g, t, config.window, config.strategy, config.outcome)
        cells.append(cell)
    return CellSet(cells, ds.unit_ids, config, trimmed)


# -- aggregation --------------------------------------------------------------------------


@dataclass
class AggregatedEffects:
    """Aggregated estimates with influence vectors, ready for inference.

    ``kind`` is ``dynamic`` (labels are event times), ``group`` (cohort
    years) or ``overall`` (a single row).
    """

    kind: str
    labels: list
    estimates: np.ndarray
    influence: np.ndarray  # rows x N
    n_unique_treated: np.ndarray
    missing: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def present(self) -> AggregatedEffects:
        keep = ~self.missing
        return AggregatedEffects(
            self.kind,
            [lab for lab, k in zip(self.labels, keep) if k],
            self.estimates[keep],
            self.influence[keep],
            self.n_unique_treated[keep],
            self.missing[keep],
            dict(self.meta),
        )


def _combine(cells, weights, N):
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    est = float(sum(wi * c.att for wi, c in zip(w, cells)))
    psi = np.zeros(N)
    for wi, c in zip(w, cells):
        psi += wi * c.influence
    return est, psi


def _cells_of(cellset):
    if isinstance(cellset, CellSet):
        return cellset.identified(), cellset.n_units
    cells = [c for c in cellset if c.identified]
    if not cells:
        raise ValueError("no identified cells to aggregate")
    return cells, cells[0].influence.size


def _rows(kind, labels, parts, N, meta):
    est = np.array([p[0] if p else np.nan for p in parts])
    infl = np.array([p[1] if p else np.zeros(N) for p in parts]).reshape(len(parts), N)
    n_unique = np.array([p[2] if p else 0 for p in parts], dtype=np.int64)
    missing = np.array([not p for p in parts], dtype=bool)
    return AggregatedEffects(kind, list(labels), est, infl, n_unique, missing, meta)


def aggregate_dynamic(cellset, e_range=None) -> AggregatedEffects:
    """Event-time effects ``theta(e) = sum_g w_g ATT(g, g + e)`` with
    ``w_g`` proportional to the cell's treated count."""
    cells, N = _cells_of(cellset)
    if e_range is None:
        e_range = cellset.config.e_range if isinstance(cellset, CellSet) else sorted({c.e for c in cells})
    parts = []
    for e in e_range:
        at = [c for c in cells if c.e == e]
        if not at:
            log.warning("event time %d has no identified cells", e)
            parts.append(None)
            continue
        est, psi = _combine(at, [c.n_treated for c in at], N)
        parts.append((est, psi, sum(c.n_treated for c in at)))
    return _rows("dynamic", e_range, parts, N, {"weights": "cohort_size"})


def _post(cells, exclude_year_zero):
    first = 1 if exclude_year_zero else 0
    return [c for c in cells if c.e >= first]


def _n_unique(cells):
    return np.unique(np.concatenate([c.treated for c in cells])).size if cells else 0


def aggregate_group(cellset, exclude_year_zero: bool = False) -> AggregatedEffects:
    """Per-cohort effects: equal-weight mean of the cohort's post-period cells."""
    cells, N = _cells_of(cellset)
    post = _post(cells, exclude_year_zero)
    cohorts = sorted({c.g for c in cells})
    parts = []
    for g in cohorts:
        mine = [c for c in post if c.g == g]
        if not mine:
            parts.append(None)
            continue
        est, psi = _combine(mine, np.ones(len(mine)), N)
        parts.append((est, psi, _n_unique(mine)))
    return _rows("group", cohorts, parts, N, {"exclude_year_zero": exclude_year_zero})


def aggregate_overall(
    cellset, weighting: Weighting = "cohort_size", exclude_year_zero: bool = False
) -> AggregatedEffects:
    """Single post-period summary.

    ``cohort_size`` weights the group effects by the number of distinct
    treated units each cohort contributes, ``equal`` weights cohorts equally
    and ``event`` averages the dynamic effects over post-period event times.
    """
    cells, N = _cells_of(cellset)
    post = _post(cells, exclude_year_zero)
    meta = {"weighting": weighting, "exclude_year_zero": exclude_year_zero}
    if not post:
        return _rows("overall", ["overall"], [None], N, meta)
    if weighting == "event":
        dyn = aggregate_dynamic(post, sorted({c.e for c in post})).present()
        est = float(dyn.estimates.mean())
        psi = dyn.influence.mean(axis=0)
    elif weighting in ("cohort_size", "equal"):
        grp = aggregate_group(post, exclude_year_zero).present()
        w = grp.n_unique_treated.astype(float) if weighting == "cohort_size" else np.ones(len(grp))
        w = w / w.sum()
        est = float(w @ grp.estimates)
        psi = w @ grp.influence
    else:
        raise ConfigError(f"unknown overall weighting {weighting!r}")
    return _rows("overall", ["overall"], [(est, psi, _n_unique(post))], N, meta)
