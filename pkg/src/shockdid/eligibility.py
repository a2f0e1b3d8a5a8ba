"""Analytical-sample construction: CHA2DS2-VASc screening, age band and
early-death exclusions."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import SchemaError
from .panel_store import DEATH, PanelDataset

log = logging.getLogger(__name__)

REASONS = ("missing_profile", "risk_score", "age", "early_death")
MAX_SCORE = {"male": 1, "female": 2}
AGE_AT_SHOCK = (50.0, 70.0)


@dataclass(frozen=True)
class RiskProfile:
    """Comorbidity profile measured in the year before the shock."""

    congestive_heart_failure: bool = False
    hypertension: bool = False
    age: float = 0.0
    diabetes: bool = False
    prior_stroke_tia_te: bool = False
    vascular_disease: bool = False
    sex: str = "male"

    def __post_init__(self):
        if self.age < 0:
            raise ValueError("age must be non-negative")
        if self.sex not in ("male", "female"):
            raise ValueError(f"sex must be male or female, got {self.sex!r}")


def age_points(age: float) -> int:
    # 75 itself is ambiguous between the two bands; it gets the lower one
    if age > 75:
        return 2
    if age >= 65:
        return 1
    return 0


def chads_vasc_score(p: RiskProfile) -> int:
    return (
        int(p.congestive_heart_failure)
        + int(p.hypertension)
        + age_points(p.age)
        + int(p.diabetes)
        + 2 * int(p.prior_stroke_tia_te)
        + int(p.vascular_disease)
        + int(p.sex == "female")
    )


@dataclass
class ExclusionResult:
    dataset: PanelDataset
    reasons: dict = field(default_factory=dict)  # unit_id -> reason for each excluded unit

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(self.reasons.values())
        return {r: c.get(r, 0) for r in REASONS}


def _age_at_shock(ds: PanelDataset, profile: RiskProfile, row: int, g: int) -> float:
    if "age" in ds.covariates:
        col = ds.year_index(g)
        if col is not None:
            value = ds.wide("age")[row, col]
            if np.isfinite(value):
                return float(value)
    return profile.age + 1.0


def _death_year(ds: PanelDataset, row: int) -> int | None:
    if DEATH in ds.outcomes:
        hits = np.flatnonzero(ds.wide(DEATH)[row] == 1)
        if hits.size:
            return int(ds.years[hits[0]])
    return None


def apply_exclusions(ds: PanelDataset, profiles: Mapping[str, RiskProfile]) -> ExclusionResult:
    """Keep men scoring at most 1 and women scoring at most 2, aged 50-70 in
    the shock year, who survive the shock year.

    Each excluded unit gets the first failing reason in the order
    ``missing_profile``, ``risk_score``, ``age``, ``early_death``.
    """
    reasons = {}
    genders = ds.units["gender"].to_numpy()
    for row, (uid, g) in enumerate(zip(ds.unit_ids, ds.cohorts)):
        profile = profiles.get(uid)
        if profile is None:
            reasons[uid] = "missing_profile"
            continue
        if chads_vasc_score(profile) > MAX_SCORE[genders[row]]:
            reasons[uid] = "risk_score"
            continue
        age = _age_at_shock(ds, profile, row, int(g))
        if not AGE_AT_SHOCK[0] <= age <= AGE_AT_SHOCK[1]:
            reasons[uid] = "age"
            continue
        died = _death_year(ds, row)
        if died is not None and died <= g:
            reasons[uid] = "early_death"
    if reasons:
        log.info("excluded %d of %d units: %s", len(reasons), ds.n_units, dict(Counter(reasons.values())))
    keep = ~np.isin(ds.unit_ids, list(reasons))
    return ExclusionResult(ds.subset_units(keep), reasons)


_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n", ""}


def _flag(value: str, column: str, line: int) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise SchemaError(f"line {line}: column {column!r} is not boolean: {value!r}")


def read_profiles(path) -> dict[str, RiskProfile]:
    """Profiles CSV keyed by ``unit_id``; boolean columns named as the
    :class:`RiskProfile` fields plus ``age`` and ``sex``."""
    flags = ["congestive_heart_failure", "hypertension", "diabetes", "prior_stroke_tia_te", "vascular_disease"]
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ["unit_id", "age", "sex", *flags] if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        for line, rec in enumerate(reader, start=2):
            out[rec["unit_id"].strip()] = RiskProfile(
                age=float(rec["age"]),
                sex=rec["sex"].strip().lower(),
                **{f: _flag(rec[f], f, line) for f in flags},
            )
    return out
