"""Panel data model, CSV ingestion and dataset transforms.

A :class:`PanelDataset` holds two frames: one row per unit (gender, cohort,
shock type, severity) and one row per unit-year observation (outcomes,
covariates, alive flag). Datasets are never mutated; every transform
returns a new one.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping

import numpy as np
import pandas as pd

from .errors import IntegrityError, SchemaError

log = logging.getLogger(__name__)

GENDERS = ("male", "female")
SHOCK_TYPES = ("myocardial", "cerebral")
SEVERITIES = ("STEMI", "NSTEMI")
DEATH = "death"

_GENDER_ALIASES = {"male": "male", "m": "male", "man": "male", "female": "female", "f": "female", "woman": "female"}

Strategy = Literal["not_yet_treated_window", "shifted_exact"]


@dataclass(frozen=True)
class Observation:
    unit_id: str
    year: int
    outcomes: dict
    covariates: dict
    alive: bool = True


@dataclass(frozen=True)
class UnitRecord:
    unit_id: str
    gender: str
    cohort: int
    shock_type: str | None
    severity: str | None
    observations: tuple[Observation, ...]

    def treated(self, year: int) -> bool:
        return year >= self.cohort

    def event_time(self, year: int) -> int:
        return year - self.cohort


@dataclass(frozen=True)
class RowError:
    line: int
    column: str
    value: str
    reason: str


@dataclass(frozen=True, eq=False)
class PanelDataset:
    units: pd.DataFrame
    obs: pd.DataFrame
    outcomes: tuple[str, ...]
    covariates: tuple[str, ...]
    span: tuple[int, int]
    provenance: str = "ingested"
    rejected: tuple[RowError, ...] = ()
    price_base: tuple[tuple[str, int], ...] = ()
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        units = self.units.copy()
        units.index = units.index.astype(str)
        units.index.name = "unit_id"
        units["cohort"] = units["cohort"].astype(np.int64)
        for col in ("shock_type", "severity"):
            if col not in units:
                units[col] = None
        units = units[["gender", "cohort", "shock_type", "severity"]]
        obs = self.obs.copy()
        obs["unit_id"] = obs["unit_id"].astype(str)
        obs["year"] = obs["year"].astype(np.int64)
        if "alive" not in obs:
            obs["alive"] = True
        obs["alive"] = obs["alive"].astype(bool)
        obs = obs.sort_values(["unit_id", "year"], kind="stable").reset_index(drop=True)
        obs = obs[["unit_id", "year", "alive", *self.outcomes, *self.covariates]]
        units = units.sort_index(kind="stable")
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "span", (int(self.span[0]), int(self.span[1])))
        self._validate()

    # -- invariants ---------------------------------------------------------

    def _validate(self):
        units, obs = self.units, self.obs
        if units.index.has_duplicates:
            dup = units.index[units.index.duplicated()].unique().tolist()
            raise IntegrityError(f"duplicate unit ids: {dup[:10]}", dup)
        bad_gender = ~units["gender"].isin(GENDERS)
        if bad_gender.any():
            raise IntegrityError(f"unknown gender for units {units.index[bad_gender].tolist()[:10]}")
        dup = obs.duplicated(["unit_id", "year"])
        if dup.any():
            keys = list(obs.loc[dup, ["unit_id", "year"]].itertuples(index=False, name=None))
            raise IntegrityError(f"duplicate (unit, year) rows: {keys[:10]}", keys)
        lo, hi = self.span
        out = (obs["year"] < lo) | (obs["year"] > hi)
        if out.any():
            raise IntegrityError(f"years outside span {self.span}: {sorted(obs.loc[out, 'year'].unique())[:10]}")
        unknown = ~obs["unit_id"].isin(units.index)
        if unknown.any():
            raise IntegrityError(f"observations for unknown units: {obs.loc[unknown, 'unit_id'].unique()[:10].tolist()}")
        if DEATH in self.outcomes:
            self._validate_death()

    def _validate_death(self):
        death = self.wide(DEATH)
        seen = np.where(np.isnan(death), 0.0, death)
        ever = np.maximum.accumulate(seen, axis=1)
        observed = ~np.isnan(death)
        if np.any(observed & (ever == 1) & (death == 0)):
            raise IntegrityError("death outcome is not absorbing")
        # strictly after the first death year, other outcomes must be missing
        after = np.zeros_like(ever, dtype=bool)
        after[:, 1:] = ever[:, :-1] == 1
        for name in self.outcomes:
            if name == DEATH:
                continue
            if np.any(after & ~np.isnan(self.wide(name))):
                raise IntegrityError(f"outcome {name!r} observed after death")

    # -- accessors ------------------------------------------------------------

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def unit_ids(self) -> np.ndarray:
        return self.units.index.to_numpy()

    @property
    def cohorts(self) -> np.ndarray:
        return self.units["cohort"].to_numpy()

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.span[0], self.span[1] + 1)

    @property
    def cohort_years(self) -> list[int]:
        return sorted(int(g) for g in np.unique(self.cohorts))

    def _positions(self):
        if "positions" not in self._cache:
            rows = self.units.index.get_indexer(self.obs["unit_id"])
            cols = self.obs["year"].to_numpy() - self.span[0]
            self._cache["positions"] = (rows, cols)
        return self._cache["positions"]

    def wide(self, column: str) -> np.ndarray:
        """``(n_units, n_years)`` matrix of ``column``; NaN where there is no row."""
        key = ("wide", column)
        if key not in self._cache:
            rows, cols = self._positions()
            out = np.full((self.n_units, len(self.years)), np.nan)
            out[rows, cols] = self.obs[column].to_numpy(dtype=float)
            out.setflags(write=False)
            self._cache[key] = out
        return self._cache[key]

    def observed(self, outcome: str | None = None) -> np.ndarray:
        """Boolean ``(n_units, n_years)``: an alive row exists, or ``outcome`` is non-missing."""
        if outcome is not None:
            key = ("observed", outcome)
            if key not in self._cache:
                self._cache[key] = ~np.isnan(self.wide(outcome))
            return self._cache[key]
        key = ("alive",)
        if key not in self._cache:
            rows, cols = self._positions()
            out = np.zeros((self.n_units, len(self.years)), dtype=bool)
            out[rows, cols] = self.obs["alive"].to_numpy()
            self._cache[key] = out
        return self._cache[key]

    def year_index(self, year: int) -> int | None:
        if self.span[0] <= year <= self.span[1]:
            return int(year - self.span[0])
        return None

    def unit(self, unit_id) -> UnitRecord:
        row = self.units.loc[str(unit_id)]
        rows = self.obs[self.obs["unit_id"] == str(unit_id)]
        observations = tuple(
            Observation(
                unit_id=str(unit_id),
                year=int(r["year"]),
                outcomes={k: r[k] for k in self.outcomes},
                covariates={k: r[k] for k in self.covariates},
                alive=bool(r["alive"]),
            )
            for _, r in rows.iterrows()
        )
        return UnitRecord(
            unit_id=str(unit_id),
            gender=row["gender"],
            cohort=int(row["cohort"]),
            shock_type=_none_if_missing(row["shock_type"]),
            severity=_none_if_missing(row["severity"]),
            observations=observations,
        )

    # -- derived datasets ------------------------------------------------------

    def _derive(self, units=None, obs=None, **changes):
        return PanelDataset(
            units=self.units if units is None else units,
            obs=self.obs if obs is None else obs,
            outcomes=changes.pop("outcomes", self.outcomes),
            covariates=changes.pop("covariates", self.covariates),
            span=changes.pop("span", self.span),
            provenance=changes.pop("provenance", self.provenance),
            rejected=changes.pop("rejected", self.rejected),
            price_base=changes.pop("price_base", self.price_base),
        )

    def subset_units(self, keep) -> PanelDataset:
        """Keep units given by a boolean mask over ``units`` or an iterable of ids."""
        if isinstance(keep, (np.ndarray, pd.Series)) and np.asarray(keep).dtype == bool:
            ids = self.units.index[np.asarray(keep)]
        else:
            ids = pd.Index([str(k) for k in keep])
        units = self.units.loc[self.units.index.isin(ids)]
        obs = self.obs[self.obs["unit_id"].isin(units.index)]
        return self._derive(units=units, obs=obs)

    def by_gender(self, gender: str) -> PanelDataset:
        return self.subset_units(self.units["gender"].to_numpy() == gender)

    def with_obs(self, obs: pd.DataFrame) -> PanelDataset:
        return self._derive(obs=obs)

    def equals(self, other: PanelDataset) -> bool:
        return (
            self.outcomes == other.outcomes
            and self.covariates == other.covariates
            and self.span == other.span
            and _frames_equal(self.units, other.units)
            and _frames_equal(self.obs, other.obs)
        )


def _none_if_missing(value):
    if value is None or (isinstance(value, float) and np.isnan(value)) or value == "":
        return None
    return value


def _frames_equal(a: pd.DataFrame, b: pd.DataFrame) -> bool:
    if list(a.columns) != list(b.columns) or len(a) != len(b) or not a.index.equals(b.index):
        return False
    for col in a.columns:
        x, y = a[col], b[col]
        if pd.api.types.is_float_dtype(x) or pd.api.types.is_float_dtype(y):
            xv, yv = x.to_numpy(dtype=float), y.to_numpy(dtype=float)
            if not np.array_equal(xv, yv, equal_nan=True):
                return False
        else:
            xs = x.map(_none_if_missing).tolist()
            ys = y.map(_none_if_missing).tolist()
            if xs != ys:
                return False
    return True


# -- ingestion --------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnMapping:
    """Names the CSV columns holding each panel field.

    ``outcomes`` and ``covariates`` map dataset names to CSV column names;
    a plain list means the names are identical.
    """

    unit: str = "unit_id"
    year: str = "year"
    cohort: str = "cohort"
    gender: str = "gender"
    shock_type: str | None = None
    severity: str | None = None
    alive: str | None = None
    outcomes: Mapping[str, str] | tuple = ()
    covariates: Mapping[str, str] | tuple = ()

    def outcome_map(self) -> dict[str, str]:
        return dict(self.outcomes) if isinstance(self.outcomes, Mapping) else {c: c for c in self.outcomes}

    def covariate_map(self) -> dict[str, str]:
        return dict(self.covariates) if isinstance(self.covariates, Mapping) else {c: c for c in self.covariates}

    @classmethod
    def for_dataset(cls, ds: PanelDataset) -> ColumnMapping:
        return cls(
            shock_type="shock_type",
            severity="severity",
            alive="alive",
            outcomes=tuple(ds.outcomes),
            covariates=tuple(ds.covariates),
        )


def _parse_int(value: str) -> int:
    number = float(value)
    if not number.is_integer():
        raise ValueError(value)
    return int(number)


def ingest_csv(path, schema: ColumnMapping, delimiter: str = ",", span=None) -> PanelDataset:
    """Read a long-format panel CSV.

    Rows whose unit, year, cohort or gender cannot be parsed (and rows with
    non-numeric outcome or covariate text) are dropped and listed in
    ``dataset.rejected``. Missing columns raise :class:`SchemaError`;
    duplicate unit-year rows or units whose cohort/gender changes between rows
    raise :class:`IntegrityError`.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        records = list(reader)

    outcome_map = schema.outcome_map()
    covariate_map = schema.covariate_map()
    required = [schema.unit, schema.year, schema.cohort, schema.gender]
    optional = [c for c in (schema.shock_type, schema.severity, schema.alive) if c]
    wanted = required + optional + list(outcome_map.values()) + list(covariate_map.values())
    missing = [c for c in wanted if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    pos = {c: header.index(c) for c in wanted}

    rejected: list[RowError] = []
    unit_rows, obs_rows = {}, []
    for line, rec in enumerate(records, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            rejected.append(RowError(line, "*", delimiter.join(rec), "wrong field count"))
            continue
        get = lambda col: rec[pos[col]].strip()  # noqa: E731
        try:
            uid = get(schema.unit)
            if not uid:
                raise ValueError
        except ValueError:
            rejected.append(RowError(line, schema.unit, get(schema.unit), "empty unit id"))
            continue
        parsed = {}
        err = None
        for col, key in ((schema.year, "year"), (schema.cohort, "cohort")):
            try:
                parsed[key] = _parse_int(get(col))
            except ValueError:
                err = RowError(line, col, get(col), "not an integer year")
                break
        if err is None:
            gender = _GENDER_ALIASES.get(get(schema.gender).lower())
            if gender is None:
                err = RowError(line, schema.gender, get(schema.gender), "gender must be male/female")
        values = {}
        if err is None:
            for name, col in [*outcome_map.items(), *covariate_map.items()]:
                raw = get(col)
                if raw == "" or raw.lower() in ("na", "nan"):
                    values[name] = np.nan
                    continue
                try:
                    values[name] = float(raw)
                except ValueError:
                    err = RowError(line, col, raw, "not a number")
                    break
        alive = True
        if err is None and schema.alive:
            raw = get(schema.alive).lower()
            if raw in ("1", "true", "t", "yes"):
                alive = True
            elif raw in ("0", "false", "f", "no"):
                alive = False
            else:
                err = RowError(line, schema.alive, raw, "alive must be boolean")
        if err is not None:
            rejected.append(err)
            continue
        unit_info = (
            gender,
            parsed["cohort"],
            _none_if_missing(get(schema.shock_type)) if schema.shock_type else None,
            _none_if_missing(get(schema.severity)) if schema.severity else None,
        )
        prev = unit_rows.setdefault(uid, unit_info)
        if prev != unit_info:
            raise IntegrityError(f"unit {uid!r} has inconsistent unit-level fields (line {line})", [uid])
        obs_rows.append({"unit_id": uid, "year": parsed["year"], "alive": alive, **values})

    if rejected:
        log.warning("%s: rejected %d rows", path, len(rejected))
    if not obs_rows:
        raise IntegrityError(f"{path}: no valid rows")
    obs = pd.DataFrame(obs_rows, columns=["unit_id", "year", "alive", *outcome_map, *covariate_map])
    units = pd.DataFrame.from_dict(unit_rows, orient="index", columns=["gender", "cohort", "shock_type", "severity"])
    if span is None:
        span = (int(obs["year"].min()), int(obs["year"].max()))
    return PanelDataset(
        units=units,
        obs=obs,
        outcomes=tuple(outcome_map),
        covariates=tuple(covariate_map),
        span=span,
        provenance="ingested",
        rejected=tuple(rejected),
    )


def write_csv(ds: PanelDataset, path, delimiter: str = ",") -> None:
    """Write ``ds`` in the long format :func:`ingest_csv` reads back with
    ``ColumnMapping.for_dataset(ds)``."""
    frame = ds.obs.join(ds.units, on="unit_id")
    frame["alive"] = frame["alive"].astype(int)
    cols = ["unit_id", "year", "gender", "cohort", "shock_type", "severity", "alive", *ds.outcomes, *ds.covariates]
    frame[cols].to_csv(path, index=False, sep=delimiter, lineterminator="\n")


def read_cpi_csv(path) -> dict[int, float]:
    frame = pd.read_csv(path)
    if frame.shape[1] < 2:
        raise SchemaError(f"{path}: CPI table needs two columns (year, index)")
    return {int(y): float(v) for y, v in zip(frame.iloc[:, 0], frame.iloc[:, 1])}


# -- transforms ----------------------------------------------------------------------


def deflate(ds: PanelDataset, outcome: str, cpi: Mapping[int, float], base_year: int) -> PanelDataset:
    """Express ``outcome`` in ``base_year`` prices: ``v * cpi[base] / cpi[year]``.

    The dataset remembers the price base of deflated outcomes, so deflating
    again to another base rebases (``cpi[new] / cpi[old]``) instead of
    deflating twice.
    """
    if outcome not in ds.outcomes:
        raise SchemaError(f"unknown outcome {outcome!r}")
    if base_year not in cpi:
        raise ValueError(f"CPI missing for base year {base_year}")
    if not cpi[base_year] > 0:
        raise ValueError("CPI at the base year must be positive")
    bases = dict(ds.price_base)
    obs = ds.obs.copy()
    if outcome in bases:
        old = bases[outcome]
        if old not in cpi:
            raise ValueError(f"CPI missing for year {old}")
        factor = cpi[base_year] / cpi[old]
    else:
        years = ds.obs["year"].to_numpy()
        missing = sorted(set(int(y) for y in np.unique(years)) - set(cpi))
        if missing:
            raise ValueError(f"CPI missing for year {missing[0]}")
        factor = np.array([cpi[base_year] / cpi[int(y)] for y in years])
    obs[outcome] = obs[outcome].to_numpy(dtype=float) * factor
    bases[outcome] = int(base_year)
    return ds._derive(obs=obs, price_base=tuple(sorted(bases.items())))


def event_times(ds: PanelDataset) -> pd.Series:
    """Event time ``year - cohort`` for every observation row."""
    g = ds.units["cohort"].reindex(ds.obs["unit_id"]).to_numpy()
    return pd.Series(ds.obs["year"].to_numpy() - g, index=ds.obs.index, name="event_time")


def restrict_event_window(ds: PanelDataset, lo: int, hi: int) -> PanelDataset:
    e = event_times(ds)
    return ds.with_obs(ds.obs[(e >= lo) & (e <= hi)])


def balanced_subset(ds: PanelDataset, pre: int, post: int) -> PanelDataset:
    """Units alive and observed at every event time ``-pre .. post-1``."""
    if pre < 1 or post < 1:
        raise ValueError("pre and post must be at least 1")
    alive = ds.observed()
    g = ds.cohorts
    keep = np.ones(ds.n_units, dtype=bool)
    for e in range(-pre, post):
        col = g + e - ds.span[0]
        inside = (col >= 0) & (col < alive.shape[1])
        ok = np.zeros(ds.n_units, dtype=bool)
        ok[inside] = alive[np.flatnonzero(inside), col[inside]]
        keep &= ok
    return ds.subset_units(keep)


def baseline_covariates(ds: PanelDataset, covariates=None, offset: int = -1) -> pd.DataFrame:
    """Covariates of each unit in year ``cohort + offset`` (NaN when unobserved)."""
    covariates = list(ds.covariates if covariates is None else covariates)
    cols = ds.cohorts + offset - ds.span[0]
    inside = (cols >= 0) & (cols < len(ds.years))
    out = {}
    for name in covariates:
        w = ds.wide(name)
        v = np.full(ds.n_units, np.nan)
        v[inside] = w[np.flatnonzero(inside), cols[inside]]
        out[name] = v
    return pd.DataFrame(out, index=ds.units.index)


# -- risk sets -----------------------------------------------------------------------


@dataclass(frozen=True)
class RiskSet:
    g: int
    t: int
    base: int
    treated: np.ndarray
    controls: np.ndarray
    status: Literal["ok", "no-controls", "no-treated"]

    @property
    def identified(self) -> bool:
        return self.status == "ok"


def control_cohort_mask(cohorts: np.ndarray, g: int, t: int, window: int, strategy: Strategy) -> np.ndarray:
    if strategy == "not_yet_treated_window":
        return (cohorts > t) & (cohorts <= g + window) & (cohorts != g)
    if strategy == "shifted_exact":
        return cohorts == g + window
    raise ValueError(f"unknown control strategy {strategy!r}")


def risk_positions(ds: PanelDataset, g: int, t: int, window: int, strategy: Strategy, outcome=None, base=None):
    """Positional version of :func:`risk_set`: ``(treated_pos, control_pos)``."""
    base = g - 1 if base is None else base
    obs = ds.observed(outcome)
    cols = [ds.year_index(y) for y in {t, base, g - 1}]
    if any(c is None for c in cols):
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    t_col, b_col, g_col = ds.year_index(t), ds.year_index(base), ds.year_index(g - 1)
    seen = obs[:, t_col] & obs[:, b_col]
    cohorts = ds.cohorts
    treated = (cohorts == g) & seen & obs[:, g_col]
    controls = control_cohort_mask(cohorts, g, t, window, strategy) & seen
    return np.flatnonzero(treated), np.flatnonzero(controls)


def risk_set(
    ds: PanelDataset,
    g: int,
    t: int,
    window: int = 5,
    strategy: Strategy = "not_yet_treated_window",
    outcome: str | None = None,
    base: int | None = None,
) -> RiskSet:
    """Treated and control units for the comparison of cohort ``g`` in year ``t``.

    Treated units belong to cohort ``g`` and are observed at ``t``, the
    comparison year ``base`` (default ``g - 1``) and ``g - 1``. Under the
    rolling window, controls are cohorts ``g'`` with ``t < g' <= g + window``
    (excluding ``g``); under ``shifted_exact`` they are exactly cohort
    ``g + window``. With ``outcome`` set, "observed" means that outcome is
    non-missing; otherwise an alive row must exist.
    """
    base = g - 1 if base is None else base
    treated, controls = risk_positions(ds, g, t, window, strategy, outcome, base)
    status = "ok"
    if treated.size == 0:
        status = "no-treated"
    elif controls.size == 0:
        status = "no-controls"
    ids = ds.unit_ids
    return RiskSet(g, t, base, ids[treated], ids[controls], status)
