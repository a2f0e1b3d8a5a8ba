"""Synthetic staggered-adoption panels with known treatment effects.

Shock timing follows a discrete-time hazard with a logistic link,
conditioned on a shock inside the span (everyone in the analytical sample
is eventually treated). Untreated outcomes are

    Y_it(0) = mu + alpha_i + lambda_t + (beta . z_i) * (t - start) + drift_it + eps_it

and observed outcomes add the unit's effect ``tau_i(t - g_i)`` from the
shock year on. ``z_i`` are the covariates standardised with their
population law, so both the hazard index and the outcome trends are linear
in the covariates the estimators see.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import ConfigError
from .panel_store import DEATH, PanelDataset

COVARIATES = ("age", "income", "education", "married", "single")

# population laws used for standardisation
_INCOME_MU, _INCOME_SIGMA = 12.0, 0.5
_INCOME_MEAN = math.exp(_INCOME_MU + _INCOME_SIGMA**2 / 2)
_INCOME_SD = _INCOME_MEAN * math.sqrt(math.exp(_INCOME_SIGMA**2) - 1)
_EDU_MEAN, _EDU_SD = 138.0, 30.0
_HOUSEHOLD_P = {"married": 0.53, "single": 0.31}  # remainder: other couples / multi-family

_MYOCARDIAL_SHARE = {"male": 0.5898, "female": 0.5005}
_STEMI_SHARE = {"male": 0.3414, "female": 0.2529}


@dataclass(frozen=True)
class OutcomeSpec:
    """Law of one outcome.

    ``effect`` maps gender to ``tau(e)`` for ``e = 0, 1, ...``; the last value
    is carried forward. ``trend`` maps covariate names to per-year slopes on
    the standardised covariate. ``pre_shock_drift`` adds a level change per
    year during the ``drift_years`` years before a unit's own shock.
    """

    name: str
    intercept: float = 10.0
    female_shift: float = 0.0
    unit_sd: float = 3.0
    year_slope: float = 0.3
    year_sd: float = 0.5
    trend: dict = field(default_factory=dict)
    effect: dict = field(default_factory=lambda: {"male": (0.0,), "female": (0.0,)})
    effect_cohort_slope: float = 0.0
    noise_sd: float = 2.0
    pre_shock_drift: float = 0.0
    drift_years: int = 3

    def tau(self, e: int, gender: str) -> float:
        if e < 0:
            return 0.0
        profile = self.effect[gender]
        return float(profile[min(e, len(profile) - 1)])


@dataclass(frozen=True)
class DgpSpec:
    n_units: int = 4000
    span: tuple = (1995, 2018)
    female_share: float = 0.335
    hazard_baseline: float = -4.0
    hazard_trend: float = 0.0
    hazard_loadings: dict = field(default_factory=dict)
    timing_tilt: dict = field(default_factory=dict)
    gender_shifts: dict = field(default_factory=dict)
    outcomes: tuple = (OutcomeSpec("y"),)
    anticipation: int = 0
    death_prob: dict = field(default_factory=lambda: {"male": 0.0, "female": 0.0})
    seed: int = 0

    def __post_init__(self):
        if self.n_units < 2:
            raise ConfigError("n_units must be at least 2")
        if self.span[1] <= self.span[0]:
            raise ConfigError("span must cover at least two years")
        if not 0 <= self.female_share <= 1:
            raise ConfigError("female_share must be in [0, 1]")
        for g, p in self.death_prob.items():
            if not 0 <= p < 1:
                raise ConfigError(f"death probability for {g} must be in [0, 1)")
        if self.anticipation < 0:
            raise ConfigError("anticipation must be non-negative")
        unknown = (set(self.hazard_loadings) | set(self.timing_tilt)) - set(COVARIATES)
        if unknown:
            raise ConfigError(f"unknown hazard covariates {sorted(unknown)}")
        names = [o.name for o in self.outcomes]
        if len(set(names)) != len(names) or DEATH in names:
            raise ConfigError("outcome names must be unique and must not be 'death'")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["span"] = list(self.span)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> DgpSpec:
        data = dict(data)
        outcomes = tuple(
            OutcomeSpec(**{**o, "effect": {k: tuple(v) for k, v in o.get("effect", {}).items()} or OutcomeSpec("x").effect})
            for o in data.pop("outcomes", [asdict(OutcomeSpec("y"))])
        )
        if "span" in data:
            data["span"] = tuple(data["span"])
        return cls(outcomes=outcomes, **data)


@dataclass
class TruthRecord:
    """Known effects of a simulated panel.

    ``effects[outcome]`` is a ``units x years`` frame of each unit's realised
    effect ``tau_i(t - g_i)`` (for ``death`` it is the realised death
    indicator, whose untreated value is always 0). ``cells`` lists the
    finite-sample ATT of every ``(g, t)`` cell with ``-4 <= e <= 4`` among
    the cohort's units observed at ``t`` and the comparison year.
    """

    spec: DgpSpec
    effects: dict
    cells: pd.DataFrame

    def profile(self, outcome: str, gender: str, e_range=range(-4, 5)) -> dict[int, float]:
        """Population effect ``tau(e)`` (before cohort heterogeneity)."""
        spec = {o.name: o for o in self.spec.outcomes}[outcome]
        a = self.spec.anticipation
        return {e: spec.tau(e + a, gender) if e >= -a else 0.0 for e in e_range}

    def cell_truth(self, outcome: str, unit_ids, t: int, base: int) -> float:
        eff = self.effects[outcome]
        ids = np.asarray(unit_ids)
        if ids.size == 0:
            return float("nan")
        return float((eff.loc[ids, t] - eff.loc[ids, base]).mean())

    def truth_for_cells(self, outcome: str, cells, unit_ids) -> list:
        """Copies of ``cells`` whose ``att`` is the realised effect among each
        cell's own treated units, ``mean(tau_i(t) - tau_i(base))``.
        ``unit_ids`` are the ids of the dataset the cells were estimated on,
        so treated positions index into it. Aggregating these with the usual
        functions gives the matching truth."""
        frame = self.effects[outcome].loc[np.asarray(unit_ids)]
        tau = frame.to_numpy()
        years = frame.columns
        col = {int(y): k for k, y in enumerate(years)}
        out = []
        for c in cells:
            if not c.identified:
                out.append(c)
                continue
            att = float(np.mean(tau[c.treated, col[c.t]] - tau[c.treated, col[c.base]]))
            out.append(replace(c, att=att))
        return out

    def to_json(self) -> str:
        payload = {
            "spec": self.spec.to_dict(),
            "profiles": {
                f"{o.name}/{g}": {str(e): v for e, v in self.profile(o.name, g).items()}
                for o in self.spec.outcomes
                for g in ("male", "female")
            },
            "cells": self.cells.to_dict(orient="records"),
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _draw_cohorts(rng, z, span, spec: DgpSpec):
    years = np.arange(span[0], span[1] + 1)
    mid = 0.5 * (span[0] + span[1])
    index = spec.hazard_baseline + spec.hazard_trend * (years - span[0])[None, :]
    level = sum(spec.hazard_loadings.get(k, 0.0) * z[k] for k in COVARIATES)
    tilt = sum(spec.timing_tilt.get(k, 0.0) * z[k] for k in COVARIATES)
    index = index + np.asarray(level)[..., None] * np.ones_like(years) + np.asarray(tilt)[..., None] * ((years - mid) / 10.0)
    hazard = 1.0 / (1.0 + np.exp(-index))
    survive = np.cumprod(1.0 - hazard, axis=1)
    before = np.hstack([np.ones((hazard.shape[0], 1)), survive[:, :-1]])
    pmf = hazard * before
    pmf /= pmf.sum(axis=1, keepdims=True)
    cdf = np.cumsum(pmf, axis=1)
    u = rng.uniform(size=hazard.shape[0])
    pick = (u[:, None] > cdf).sum(axis=1)
    return years[np.minimum(pick, len(years) - 1)], pmf


def standardized_covariates(ds: PanelDataset) -> dict[str, np.ndarray]:
    """Recover the standardised covariates of a simulated dataset."""
    col = ds.cohorts - ds.span[0]
    rows = np.arange(ds.n_units)
    first = {k: ds.wide(k)[:, 0] for k in ("income", "education", "married", "single")}
    return {
        "age": (ds.wide("age")[rows, col] - 60.0) / (20.0 / math.sqrt(12.0)),
        "income": (first["income"] - _INCOME_MEAN) / _INCOME_SD,
        "education": (first["education"] - _EDU_MEAN) / _EDU_SD,
        "married": first["married"] - _HOUSEHOLD_P["married"],
        "single": first["single"] - _HOUSEHOLD_P["single"],
    }


def cohort_probabilities(ds: PanelDataset, spec: DgpSpec) -> np.ndarray:
    """Per-unit probability of each shock year (``units x years``) implied by
    the hazard law, given the unit's covariates."""
    _, pmf = _draw_cohorts(np.random.default_rng(0), standardized_covariates(ds), tuple(spec.span), spec)
    return pmf


def simulate(spec: DgpSpec) -> tuple[PanelDataset, TruthRecord]:
    """Draw one panel and its truth record. Identical specs give identical output."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_units
    span = tuple(spec.span)
    years = np.arange(span[0], span[1] + 1)
    T = len(years)

    female = rng.uniform(size=n) < spec.female_share
    gender = np.where(female, "female", "male")

    shift = {k: spec.gender_shifts.get(k, 0.0) * female for k in COVARIATES}
    log_income = _INCOME_MU + _INCOME_SIGMA * (rng.normal(size=n) + shift["income"])
    income = np.exp(log_income)
    education = _EDU_MEAN + _EDU_SD * (rng.normal(size=n) + shift["education"])
    u = rng.uniform(size=n)
    p_married = np.clip(_HOUSEHOLD_P["married"] + 0.2 * shift["married"], 0.01, 0.95)
    married = (u < p_married).astype(float)
    single = ((u >= p_married) & (u < p_married + _HOUSEHOLD_P["single"])).astype(float)
    age_at_shock = rng.uniform(50.0, 70.0, size=n) + 2.0 * shift["age"]
    z = {
        "age": (age_at_shock - 60.0) / (20.0 / math.sqrt(12.0)),
        "income": (income - _INCOME_MEAN) / _INCOME_SD,
        "education": (education - _EDU_MEAN) / _EDU_SD,
        "married": married - _HOUSEHOLD_P["married"],
        "single": single - _HOUSEHOLD_P["single"],
    }

    cohort, _ = _draw_cohorts(rng, z, span, spec)
    if np.unique(cohort).size < 2:
        raise ConfigError("DGP puts every unit in a single cohort; no comparison units exist")

    myocardial = rng.uniform(size=n) < np.where(female, _MYOCARDIAL_SHARE["female"], _MYOCARDIAL_SHARE["male"])
    stemi = rng.uniform(size=n) < np.where(female, _STEMI_SHARE["female"], _STEMI_SHARE["male"])
    shock_type = np.where(myocardial, "myocardial", "cerebral")
    severity = np.where(myocardial, np.where(stemi, "STEMI", "NSTEMI"), None)

    # post-shock mortality, first possible death in g + 1
    p_death = np.where(female, spec.death_prob.get("female", 0.0), spec.death_prob.get("male", 0.0))
    draws = rng.uniform(size=(n, T)) < p_death[:, None]
    after_shock = years[None, :] > cohort[:, None]
    dies = draws & after_shock
    death_year = np.where(dies.any(axis=1), years[np.argmax(dies, axis=1)], span[1] + 1)
    dead = years[None, :] >= death_year[:, None]

    e = years[None, :] - cohort[:, None]
    mid = 0.5 * (span[0] + span[1])
    ids = np.array([f"u{i:06d}" for i in range(n)])

    columns = {}
    effects = {}
    for out in spec.outcomes:
        alpha = out.unit_sd * rng.normal(size=n)
        lam = out.year_slope * (years - span[0]) + out.year_sd * rng.normal(size=T)
        slope = sum(out.trend.get(k, 0.0) * z[k] for k in COVARIATES) * np.ones(n)
        drift = out.pre_shock_drift * np.clip(years[None, :] - (cohort[:, None] - out.drift_years), 0, out.drift_years)
        eps = out.noise_sd * rng.normal(size=(n, T))
        y0 = out.intercept + out.female_shift * female[:, None] + alpha[:, None] + lam[None, :]
        y0 = y0 + slope[:, None] * (years - span[0])[None, :] + drift + eps
        e_eff = e + spec.anticipation
        tau = np.zeros((n, T))
        for g_name, mask in (("male", ~female), ("female", female)):
            profile = np.asarray(out.effect[g_name], dtype=float)
            idx = np.clip(e_eff[mask], 0, len(profile) - 1)
            tau[mask] = np.where(e_eff[mask] >= 0, profile[idx], 0.0)
        tau *= (1.0 + out.effect_cohort_slope * (cohort - mid))[:, None]
        y = np.where(dead, np.nan, y0 + tau)
        columns[out.name] = y
        effects[out.name] = pd.DataFrame(tau, index=ids, columns=years)
    death = dead.astype(float)
    columns[DEATH] = death
    effects[DEATH] = pd.DataFrame(death, index=ids, columns=years)

    age = age_at_shock[:, None] + e
    covs = {
        "age": age,
        "income": np.repeat(income[:, None], T, axis=1),
        "education": np.repeat(education[:, None], T, axis=1),
        "married": np.repeat(married[:, None], T, axis=1),
        "single": np.repeat(single[:, None], T, axis=1),
    }
    obs = pd.DataFrame(
        {
            "unit_id": np.repeat(ids, T),
            "year": np.tile(years, n),
            "alive": (~dead).ravel(),
            **{k: v.ravel() for k, v in columns.items()},
            **{k: v.ravel() for k, v in covs.items()},
        }
    )
    units = pd.DataFrame(
        {"gender": gender, "cohort": cohort, "shock_type": shock_type, "severity": severity},
        index=pd.Index(ids, name="unit_id"),
    )
    outcome_names = tuple(o.name for o in spec.outcomes) + (DEATH,)
    ds = PanelDataset(units, obs, outcome_names, COVARIATES, span, provenance="simulated")
    truth = TruthRecord(spec=spec, effects=effects, cells=_truth_cells(ds, effects))
    return ds, truth


def _truth_cells(ds: PanelDataset, effects: dict, e_range=range(-4, 5)) -> pd.DataFrame:
    rows = []
    genders = ds.units["gender"].to_numpy()
    cohorts = ds.cohorts
    for name, eff in effects.items():
        tau = eff.to_numpy()
        observed = ds.observed(name)
        for gender in ("male", "female"):
            for g in ds.cohort_years:
                members = (cohorts == g) & (genders == gender)
                for e in e_range:
                    t = g + e
                    base = g - 1 if e >= 0 else t - 1
                    cols = [ds.year_index(y) for y in (t, base, g - 1)]
                    if any(c is None for c in cols):
                        continue
                    ok = members & observed[:, cols[0]] & observed[:, cols[1]] & observed[:, cols[2]]
                    if not ok.any():
                        continue
                    att = float(np.mean(tau[ok, cols[0]] - tau[ok, cols[1]]))
                    rows.append({"outcome": name, "gender": gender, "g": g, "t": t, "e": e, "att": att, "n": int(ok.sum())})
    return pd.DataFrame(rows, columns=["outcome", "gender", "g", "t", "e", "att", "n"])


# -- presets ---------------------------------------------------------------------------------

_STATINS = OutcomeSpec(
    name="statins",
    intercept=36.0,
    female_shift=6.0,
    unit_sd=40.0,
    year_slope=3.0,
    year_sd=4.0,
    trend={"income": 2.0, "education": 1.0},
    effect={
        "male": (185.29, 271.23, 261.61, 254.04, 250.89),
        "female": (151.76, 234.14, 240.36, 243.78, 242.62),
    },
    noise_sd=60.0,
)
_GP = OutcomeSpec(
    name="gp_visits",
    intercept=8.5,
    female_shift=5.0,
    unit_sd=3.0,
    year_slope=0.1,
    year_sd=0.3,
    trend={"income": 0.05, "married": -0.05},
    effect={"male": (7.54, 7.45, 5.12, 4.28, 3.96), "female": (7.20, 6.40, 3.98, 2.94, 2.22)},
    noise_sd=3.0,
)
_HOSP = OutcomeSpec(
    name="hosp_days",
    intercept=1.7,
    female_shift=0.5,
    unit_sd=1.0,
    year_slope=0.02,
    year_sd=0.1,
    trend={},
    effect={"male": (15.03, 2.79, 1.26, 1.06, 0.84), "female": (14.65, 2.55, 0.83, 0.47, 0.07)},
    noise_sd=4.0,
)


def _generic(tau=(10.0,), **kw) -> OutcomeSpec:
    return OutcomeSpec(name="y", effect={"male": tuple(tau), "female": tuple(tau)}, **kw)


def scenario_library() -> dict[str, DgpSpec]:
    """Named simulation presets."""
    return {
        "null": DgpSpec(outcomes=(_generic(tau=(0.0,), trend={"income": 0.2}),)),
        "paper-shaped": DgpSpec(
            hazard_loadings={"income": -0.2, "education": -0.1},
            timing_tilt={"income": 0.3, "education": 0.2},
            gender_shifts={"income": -0.3, "education": -0.2, "age": 0.5, "married": -0.3},
            outcomes=(_STATINS, _GP, _HOSP),
            death_prob={"male": 0.03, "female": 0.03},
        ),
        "confounded-outcome": DgpSpec(
            timing_tilt={"income": 0.3, "education": 0.3},
            outcomes=(_generic(trend={"income": 1.0, "education": 0.8}),),
        ),
        "confounded-propensity": DgpSpec(
            hazard_loadings={"income": 0.3},
            timing_tilt={"income": 0.8, "education": 0.6},
            outcomes=(_generic(trend={"income": 0.4, "education": 0.4}),),
        ),
        "violated-pretrends": DgpSpec(
            outcomes=(_generic(pre_shock_drift=1.0, drift_years=3),),
        ),
        "attrition-heavy": DgpSpec(
            outcomes=(_generic(tau=(8.0, 10.0, 12.0)),),
            death_prob={"male": 0.15, "female": 0.12},
        ),
        "heterogeneous-effects": DgpSpec(
            outcomes=(_generic(tau=(2.0, 4.0, 6.0, 8.0, 10.0), effect_cohort_slope=0.08, year_sd=0.0),),
        ),
        "gender-gap": DgpSpec(
            female_share=0.5,
            outcomes=(OutcomeSpec(name="y", effect={"male": (10.0,), "female": (7.0,)}),),
        ),
    }


def preset(name: str, **overrides) -> DgpSpec:
    library = scenario_library()
    if name not in library:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(library)}")
    return replace(library[name], **overrides)
