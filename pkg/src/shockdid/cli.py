"""Command-line front end.

Commands: ``simulate``, ``estimate``, ``diagnose``, ``match``, ``twfe`` and
``tripledid``. Settings come from an optional JSON config file with flag
overrides (flags win). A run manifest written next to the outputs records the
resolved config, its hash, the root seed, library versions, sample counts and
output checksums; passing a manifest back as ``--config`` replays the run.

Exit codes: 0 success, 1 invalid configuration or input, 2 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .alt_estimators import (
    EventStudySpec,
    match_dataset,
    matched_gt_did,
    placebo_trend_series,
    triple_did,
    twfe_event_study,
)
from .dgp_sim import DgpSpec, preset, simulate
from .eligibility import apply_exclusions, read_profiles
from .errors import ConfigError, EstimationError, RankDeficientError, ShockDidError
from .gt_did import (
    DEFAULT_E_RANGE,
    EstimatorConfig,
    aggregate_dynamic,
    aggregate_group,
    aggregate_overall,
    estimate_all_cells,
)
from .inference import BootstrapSpec, effect_table
from .numerics import chi_square_homogeneity
from .panel_store import (
    DEATH,
    ColumnMapping,
    PanelDataset,
    balanced_subset,
    baseline_covariates,
    deflate,
    ingest_csv,
    read_cpi_csv,
    write_csv,
)

log = logging.getLogger(__name__)

COMMANDS = ("simulate", "estimate", "diagnose", "match", "twfe", "tripledid")
UNIT_COLUMNS = ("unit_id", "year", "gender", "cohort", "shock_type", "severity", "alive")
KNOWN_COVARIATES = ("age", "income", "education", "married", "single")
GENDERS = ("male", "female")

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 1, 2


# -- configuration ---------------------------------------------------------------------


@dataclass
class BootstrapConfig:
    reps: int = 999
    weights: str = "mammen"
    band: str = "simultaneous"
    level: float = 0.95


@dataclass
class SubgroupConfig:
    income_half: str | None = None  # low | high, split at the full-sample median
    household: str | None = None  # single | non-single
    shock_type: str | None = None  # myocardial | cerebral
    severity: str | None = None  # STEMI | NSTEMI


@dataclass
class RunConfig:
    """Resolved settings for one command."""

    command: str
    input: str | None = None
    output: str = "out"
    preset: str | None = None
    spec: str | None = None
    n_units: int | None = None
    outcome: str | None = None
    outcomes: list | None = None
    covariate_columns: list | None = None
    gender: str = "both"
    window: int = 5
    strategy: str = "not_yet_treated_window"
    covariates: list = field(default_factory=list)
    exclude_year_zero: bool = False
    weighting: str = "cohort_size"
    e_min: int | None = None
    e_max: int | None = None
    lag: int = 5
    balanced: bool = False
    profiles: str | None = None
    cpi: str | None = None
    cpi_base_year: int | None = None
    caliper: float | None = None
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    subgroup: SubgroupConfig = field(default_factory=SubgroupConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        """Everything that determines the results. The output directory is
        left out so that a run gives identical files wherever it writes."""
        payload = dataclasses.asdict(self)
        payload.pop("output")
        return payload

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_CHOICES = {
    "command": COMMANDS,
    "gender": ("both", *GENDERS),
    "window": (3, 5, 7),
    "strategy": ("not_yet_treated_window", "shifted_exact"),
    "weighting": ("cohort_size", "equal", "event"),
    "bootstrap.weights": ("mammen", "rademacher"),
    "bootstrap.band": ("simultaneous", "pointwise"),
    "subgroup.income_half": (None, "low", "high"),
    "subgroup.household": (None, "single", "non-single"),
    "subgroup.shock_type": (None, "myocardial", "cerebral"),
    "subgroup.severity": (None, "STEMI", "NSTEMI"),
}
_NEEDS_INPUT = ("estimate", "diagnose", "match", "twfe", "tripledid")
_NEEDS_OUTCOME = ("estimate", "twfe", "tripledid")


def _fill(cls, data: dict, prefix: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown field")
    kwargs = {}
    for key, value in data.items():
        if key == "bootstrap":
            value = _fill(BootstrapConfig, _mapping(value, "bootstrap"), "bootstrap.")
        elif key == "subgroup":
            value = _fill(SubgroupConfig, _mapping(value, "subgroup"), "subgroup.")
        kwargs[key] = value
    return cls(**kwargs)


def _mapping(value, path):
    if isinstance(value, (BootstrapConfig, SubgroupConfig)):
        return dataclasses.asdict(value)
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object")
    return value


def _check_type(path, value, kind, optional=False):
    if value is None and optional:
        return
    ok = {
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        bool: isinstance(value, bool),
        str: isinstance(value, str),
        list: isinstance(value, list) and all(isinstance(v, str) for v in value),
    }[kind]
    if not ok:
        raise ConfigError(f"{path}: expected {kind.__name__}, got {value!r}")


def validate(cfg: RunConfig) -> RunConfig:
    """Check types and choices; errors name the offending field path."""
    for path, choices in _CHOICES.items():
        obj, name = (cfg, path) if "." not in path else (getattr(cfg, path.split(".")[0]), path.split(".")[1])
        value = getattr(obj, name)
        if value not in choices:
            shown = ", ".join(str(c) for c in choices if c is not None)
            raise ConfigError(f"{path}: {value!r} is not one of {shown}")
    for name in ("n_units", "e_min", "e_max", "cpi_base_year"):
        _check_type(name, getattr(cfg, name), int, optional=True)
    for name in ("lag", "seed"):
        _check_type(name, getattr(cfg, name), int)
    for name in ("exclude_year_zero", "balanced"):
        _check_type(name, getattr(cfg, name), bool)
    for name in ("input", "preset", "spec", "outcome", "profiles", "cpi"):
        _check_type(name, getattr(cfg, name), str, optional=True)
    _check_type("output", cfg.output, str)
    _check_type("covariates", cfg.covariates, list)
    _check_type("outcomes", cfg.outcomes, list, optional=True)
    _check_type("covariate_columns", cfg.covariate_columns, list, optional=True)
    _check_type("caliper", cfg.caliper, float, optional=True)
    _check_type("bootstrap.reps", cfg.bootstrap.reps, int)
    _check_type("bootstrap.level", cfg.bootstrap.level, float)
    if cfg.seed < 0:
        raise ConfigError("seed: must be non-negative")
    if cfg.n_units is not None and cfg.n_units < 2:
        raise ConfigError("n_units: need at least 2 units")
    if cfg.bootstrap.reps < 99:
        raise ConfigError("bootstrap.reps: need at least 99 replications")
    if not 0.5 < cfg.bootstrap.level < 1.0:
        raise ConfigError("bootstrap.level: must lie in (0.5, 1)")
    if (cfg.e_min is None) != (cfg.e_max is None):
        raise ConfigError("e_min: e_min and e_max must be given together")
    if cfg.e_min is not None and cfg.e_min > cfg.e_max:
        raise ConfigError("e_min: must not exceed e_max")
    if cfg.caliper is not None and cfg.caliper < 0:
        raise ConfigError("caliper: must be non-negative")
    if (cfg.cpi is None) != (cfg.cpi_base_year is None):
        raise ConfigError("cpi_base_year: cpi and cpi_base_year must be given together")
    if cfg.command in _NEEDS_INPUT and not cfg.input:
        raise ConfigError("input: required for the " + cfg.command + " command")
    if cfg.command in _NEEDS_OUTCOME and not cfg.outcome:
        raise ConfigError("outcome: required for the " + cfg.command + " command")
    if cfg.command == "simulate" and (cfg.preset is None) == (cfg.spec is None):
        raise ConfigError("preset: give exactly one of a preset name or a spec file")
    return cfg


def load_config_file(path) -> dict:
    """Read a JSON config. A run manifest is accepted too: its ``config``
    block is used, which replays the recorded run."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as err:
        raise ConfigError(f"config: cannot read {path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: {path} is not valid JSON ({err.msg}, line {err.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    if "manifest_version" in data:
        data = data["config"]
    return data


def resolve_config(command: str, file_data: dict, overrides: dict) -> RunConfig:
    data = dict(file_data)
    if data.get("command", command) != command:
        raise ConfigError(f"command: config is for {data['command']!r}, not {command!r}")
    data["command"] = command
    for key, value in overrides.items():
        if "." in key:
            head, name = key.split(".", 1)
            data[head] = {**_mapping(data.get(head, {}), head), name: value}
        else:
            data[key] = value
    try:
        cfg = _fill(RunConfig, data, "")
    except TypeError as err:  # pragma: no cover - guarded by _fill
        raise ConfigError(str(err)) from None
    return validate(cfg)


# -- argument parsing ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _csv_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add(p, *flags, dest, **kw):
    p.add_argument(*flags, dest=dest, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shockdid", description="Staggered health-shock difference-in-differences toolkit.")
    parser.add_argument("--version", action="version", version=f"shockdid {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, needs_input=True):
        p.add_argument("-c", "--config", help="JSON config file or a previous run manifest")
        p.add_argument("-v", "--verbose", action="store_true")
        _add(p, "-o", "--output", dest="output", help="output directory")
        _add(p, "--seed", dest="seed", type=int, help="root seed")
        if needs_input:
            _add(p, "-i", "--input", dest="input", help="panel CSV")
            _add(p, "--outcomes", dest="outcomes", type=_csv_list, help="outcome columns in the CSV")
            _add(p, "--covariate-columns", dest="covariate_columns", type=_csv_list, help="covariate columns in the CSV")
            _add(p, "--profiles", dest="profiles", help="risk profile CSV; applies the sample exclusions")
            _add(p, "--cpi", dest="cpi", help="CPI table (year,index) for deflating the outcome")
            _add(p, "--cpi-base-year", dest="cpi_base_year", type=int)
            _add(p, "--balanced", dest="balanced", action="store_true", help="keep units seen 5 years either side")
            _add(p, "--income-half", dest="subgroup.income_half", help="low or high")
            _add(p, "--household", dest="subgroup.household", help="single or non-single")
            _add(p, "--shock-type", dest="subgroup.shock_type", help="myocardial or cerebral")
            _add(p, "--severity", dest="subgroup.severity", help="STEMI or NSTEMI")

    def estimation(p):
        _add(p, "--outcome", dest="outcome")
        _add(p, "--gender", dest="gender", help="male, female or both")
        _add(p, "--e-min", dest="e_min", type=int)
        _add(p, "--e-max", dest="e_max", type=int)

    def gt(p):
        _add(p, "--window", dest="window", type=int, help="rolling control window (3, 5 or 7)")
        _add(p, "--strategy", dest="strategy")
        _add(p, "--covariates", dest="covariates", type=_csv_list)
        _add(p, "--exclude-year-zero", dest="exclude_year_zero", action="store_true")
        _add(p, "--weighting", dest="weighting", help="overall weighting: cohort_size, equal or event")
        _add(p, "--reps", dest="bootstrap.reps", type=int)
        _add(p, "--weights", dest="bootstrap.weights")
        _add(p, "--band", dest="bootstrap.band")
        _add(p, "--level", dest="bootstrap.level", type=float)

    p = sub.add_parser("simulate", help="draw a synthetic panel and its truth record")
    common(p, needs_input=False)
    p.add_argument("preset_name", nargs="?", default=None, help="preset name")
    _add(p, "--spec", dest="spec", help="DGP spec JSON instead of a preset")
    _add(p, "--n-units", dest="n_units", type=int)

    p = sub.add_parser("estimate", help="group-time ATT tables per gender")
    common(p)
    estimation(p)
    gt(p)

    p = sub.add_parser("diagnose", help="descriptive tables and de-trended series")
    common(p)

    p = sub.add_parser("match", help="propensity matching of women to men")
    common(p)
    estimation(p)
    gt(p)
    _add(p, "--caliper", dest="caliper", type=float)

    for name, text in (("twfe", "two-way fixed effects event study"), ("tripledid", "gender-interacted event study")):
        p = sub.add_parser(name, help=text)
        common(p)
        estimation(p)
        _add(p, "--lag", dest="lag", type=int, help="years to the placebo-dated controls")
    return parser


def parse_config(argv) -> tuple[RunConfig, bool]:
    args = build_parser().parse_args(argv)
    values = vars(args)
    command = values.pop("command")
    path = values.pop("config")
    verbose = values.pop("verbose")
    name = values.pop("preset_name", None)
    if name is not None:
        values["preset"] = name
    file_data = load_config_file(path) if path else {}
    return resolve_config(command, file_data, values), verbose


# -- helpers -----------------------------------------------------------------------------------


def stage_seed(root: int, *labels: str) -> int:
    """Deterministic sub-seed for a named pipeline stage."""
    key = tuple(zlib.crc32(label.encode()) for label in labels)
    return int(np.random.SeedSequence(root, spawn_key=key).generate_state(1)[0])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    return {
        "shockdid": __version__,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "python": ".".join(platform.python_version_tuple()[:2]),
    }


class Outputs:
    """Collects files written by a command, then writes the manifest."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.output)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.counts: dict = {}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def frame(self, name: str, frame: pd.DataFrame, index=False) -> None:
        frame.to_csv(self.path(name), index=index, float_format="%.8g", lineterminator="\n", quoting=csv.QUOTE_MINIMAL)

    def json(self, name: str, payload) -> None:
        with self.path(name).open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")

    def table(self, stem: str, table) -> None:
        table.to_csv(self.path(f"{stem}.csv"))
        table.to_json(self.path(f"{stem}.json"))

    def manifest(self) -> Path:
        cfg = self.cfg
        payload = {
            "manifest_version": 1,
            "command": cfg.command,
            "config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "versions": _versions(),
            "counts": self.counts,
            "outputs": {name: _sha256(self.dir / name) for name in sorted(set(self.files))},
        }
        if cfg.input:
            payload["input_sha256"] = _sha256(Path(cfg.input))
        path = self.dir / "manifest.json"
        with path.open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def column_mapping(path: str, cfg: RunConfig) -> ColumnMapping:
    """Mapping for ``path``: configured columns, else every non-unit column
    with a known covariate name is a covariate and the rest are outcomes."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
    except OSError as err:
        raise ConfigError(f"input: cannot read {path}: {err.strerror}") from None
    rest = [c for c in header if c not in UNIT_COLUMNS]
    covariates = cfg.covariate_columns if cfg.covariate_columns is not None else [c for c in rest if c in KNOWN_COVARIATES]
    outcomes = cfg.outcomes if cfg.outcomes is not None else [c for c in rest if c not in covariates]
    return ColumnMapping(
        shock_type="shock_type" if "shock_type" in header else None,
        severity="severity" if "severity" in header else None,
        alive="alive" if "alive" in header else None,
        outcomes=tuple(outcomes),
        covariates=tuple(covariates),
    )


def load_panel(cfg: RunConfig, out: Outputs) -> PanelDataset:
    """Ingest, deflate, apply exclusions, balance and subgroup filters."""
    ds = ingest_csv(cfg.input, column_mapping(cfg.input, cfg))
    out.counts["units_ingested"] = ds.n_units
    out.counts["rows_rejected"] = len(ds.rejected)
    for name in [cfg.outcome, *cfg.covariates]:
        if name and name not in ds.outcomes and name not in ds.covariates:
            field_name = "outcome" if name == cfg.outcome else "covariates"
            raise ConfigError(f"{field_name}: column {name!r} is not in the input schema")
    if cfg.cpi:
        if not cfg.outcome:
            raise ConfigError("outcome: deflating needs an outcome")
        ds = deflate(ds, cfg.outcome, read_cpi_csv(cfg.cpi), cfg.cpi_base_year)
    if cfg.profiles:
        result = apply_exclusions(ds, read_profiles(cfg.profiles))
        ds = result.dataset
        out.counts["excluded"] = result.counts
    if cfg.balanced:
        ds = balanced_subset(ds, 5, 5)
        out.counts["units_balanced"] = ds.n_units
    ds = apply_subgroup(ds, cfg.subgroup)
    out.counts["units_analysed"] = ds.n_units
    return ds


def apply_subgroup(ds: PanelDataset, sg: SubgroupConfig) -> PanelDataset:
    keep = np.ones(ds.n_units, dtype=bool)
    if sg.income_half or sg.household:
        needed = [c for c, on in (("income", sg.income_half), ("single", sg.household)) if on]
        missing = [c for c in needed if c not in ds.covariates]
        if missing:
            raise ConfigError(f"subgroup: covariate {missing[0]!r} is not in the input schema")
        base = baseline_covariates(ds, needed)
    if sg.income_half:
        income = base["income"].to_numpy()
        median = np.nanmedian(income)
        keep &= (income < median) if sg.income_half == "low" else (income >= median)
    if sg.household:
        single = base["single"].to_numpy() == 1
        keep &= single if sg.household == "single" else ~single & ~np.isnan(base["single"].to_numpy())
    if sg.shock_type:
        keep &= (ds.units["shock_type"] == sg.shock_type).to_numpy()
    if sg.severity:
        keep &= (ds.units["severity"] == sg.severity).to_numpy()
    return ds.subset_units(keep) if not keep.all() else ds


def _genders(cfg: RunConfig) -> tuple:
    return GENDERS if cfg.gender == "both" else (cfg.gender,)


def _estimator_config(cfg: RunConfig) -> EstimatorConfig:
    e_range = DEFAULT_E_RANGE if cfg.e_min is None else range(cfg.e_min, cfg.e_max + 1)
    return EstimatorConfig(
        outcome=cfg.outcome,
        window=cfg.window,
        strategy=cfg.strategy,
        covariates=tuple(cfg.covariates),
        e_range=e_range,
    )


def _bootstrap(cfg: RunConfig, *labels) -> BootstrapSpec:
    b = cfg.bootstrap
    return BootstrapSpec(reps=b.reps, weights=b.weights, seed=stage_seed(cfg.seed, *labels), band=b.band, level=b.level)


def _event_spec(cfg: RunConfig) -> EventStudySpec:
    if cfg.e_min is None:
        return EventStudySpec(lag=cfg.lag)
    return EventStudySpec(e_range=tuple(range(cfg.e_min, cfg.e_max + 1)), lag=cfg.lag)


def _gender_subset(ds: PanelDataset, gender: str) -> PanelDataset:
    sub = ds.by_gender(gender)
    if sub.n_units == 0:
        raise EstimationError(f"no treated units in the {gender} subsample")
    return sub


# -- commands ---------------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> Outputs:
    out = Outputs(cfg)
    overrides = {"seed": cfg.seed}
    if cfg.n_units is not None:
        overrides["n_units"] = cfg.n_units
    if cfg.spec:
        spec = DgpSpec.from_dict({**load_config_file(cfg.spec), **overrides})
    else:
        spec = preset(cfg.preset, **overrides)
    ds, truth = simulate(spec)
    write_csv(ds, out.path("panel.csv"))
    with out.path("truth.json").open("w", encoding="utf-8") as fh:
        fh.write(truth.to_json() + "\n")
    out.counts = {"units": ds.n_units, "observations": len(ds.obs), "cohorts": len(ds.cohort_years)}
    return out


def cmd_estimate(cfg: RunConfig) -> Outputs:
    out = Outputs(cfg)
    ds = load_panel(cfg, out)
    est_cfg = _estimator_config(cfg)
    for gender in _genders(cfg):
        sub = _gender_subset(ds, gender)
        cells = estimate_all_cells(sub, est_cfg)
        if not cells.identified():
            raise EstimationError(f"no treated units with usable comparisons in the {gender} subsample")
        out.counts[gender] = {
            "units": sub.n_units,
            "cells_identified": len(cells.identified()),
            "cells_unidentified": len(cells.cells) - len(cells.identified()),
            "controls_trimmed": int(sum(cells.trimmed.values())),
        }
        aggs = {
            "dynamic": aggregate_dynamic(cells),
            "group": aggregate_group(cells, exclude_year_zero=cfg.exclude_year_zero),
            "overall": aggregate_overall(cells, weighting=cfg.weighting, exclude_year_zero=cfg.exclude_year_zero),
        }
        for kind, agg in aggs.items():
            out.table(f"{kind}_{gender}", effect_table(agg, _bootstrap(cfg, "estimate", gender, kind)))
    return out


def shock_table(ds: PanelDataset) -> pd.DataFrame:
    """Shock-type shares by gender with the chi-square homogeneity p-value."""
    units = ds.units.dropna(subset=["shock_type"])
    counts = pd.crosstab(units["gender"], units["shock_type"]).reindex(index=list(GENDERS), fill_value=0)
    if counts.shape[1] < 2 or (counts.sum(axis=1) == 0).any():
        raise EstimationError("shock table needs both genders and at least two shock types")
    test = chi_square_homogeneity(counts.to_numpy())
    frame = pd.DataFrame({"Gender": counts.index, "N": counts.sum(axis=1).to_numpy()})
    for col in counts.columns:
        frame[f"{col} (%)"] = (100.0 * counts[col] / counts.sum(axis=1)).to_numpy()
    frame["chi-square"] = test.statistic
    frame["p-value"] = test.p_value
    return frame


def _window_totals(ds: PanelDataset, outcome: str, lo: int, hi: int) -> np.ndarray:
    """Per-unit outcome totals over event times ``lo..hi``; only units
    observed in every year of the window count."""
    y = ds.wide(outcome)
    col = ds.cohorts - ds.span[0]
    rows = []
    for e in range(lo, hi + 1):
        j = col + e
        inside = (j >= 0) & (j < y.shape[1])
        v = np.full(ds.n_units, np.nan)
        v[inside] = y[np.flatnonzero(inside), j[inside]]
        rows.append(v)
    block = np.column_stack(rows)
    full = np.isfinite(block).all(axis=1)
    return block[full].sum(axis=1)


def prepost_table(ds: PanelDataset) -> pd.DataFrame:
    """Mean 5-year totals before and after the shock per gender, with a
    two-sample Kolmogorov-Smirnov p-value for equal distributions."""
    from scipy.stats import ks_2samp

    rows = []
    for gender in GENDERS:
        sub = ds.by_gender(gender)
        for outcome in ds.outcomes:
            if outcome == DEATH:
                continue
            pre = _window_totals(sub, outcome, -5, -1)
            post = _window_totals(sub, outcome, 0, 4)
            p = float(ks_2samp(pre, post).pvalue) if len(pre) and len(post) else np.nan
            rows.append(
                {
                    "Gender": gender,
                    "Outcome": outcome,
                    "5 years pre-treatment": pre.mean() if len(pre) else np.nan,
                    "5 years post-treatment": post.mean() if len(post) else np.nan,
                    "N pre": len(pre),
                    "N post": len(post),
                    "p-value": p,
                }
            )
    return pd.DataFrame(rows)


def cmd_diagnose(cfg: RunConfig) -> Outputs:
    out = Outputs(cfg)
    ds = load_panel(cfg, out)
    if "shock_type" in ds.units and ds.units["shock_type"].notna().any():
        out.frame("shock_table.csv", shock_table(ds))
    out.frame("prepost.csv", prepost_table(ds))
    series = []
    for outcome in ds.outcomes:
        if outcome == DEATH:
            continue
        s = placebo_trend_series(ds, outcome, _event_spec(cfg))
        s.insert(0, "outcome", outcome)
        series.append(s)
    out.frame("trend_series.csv", pd.concat(series, ignore_index=True))
    return out


def cmd_match(cfg: RunConfig) -> Outputs:
    out = Outputs(cfg)
    ds = load_panel(cfg, out)
    if not cfg.covariates:
        raise ConfigError("covariates: matching needs at least one covariate")
    res = match_dataset(ds, cfg.covariates, caliper=cfg.caliper)
    out.frame("pairs.csv", res.pairs)
    out.frame("balance_before.csv", res.balance_before.rename_axis("Covariate"), index=True)
    out.frame("balance_after.csv", res.balance_after.rename_axis("Covariate"), index=True)
    out.counts["pairs"] = len(res.pairs)
    out.counts["unmatched_treated"] = res.unmatched_treated
    out.counts["unmatched_control"] = res.unmatched_control
    if cfg.outcome:
        est_cfg = dataclasses.replace(_estimator_config(cfg), covariates=())
        tables = matched_gt_did(ds, res, est_cfg, _bootstrap(cfg, "match"))
        for gender, table in tables.items():
            out.table(f"matched_dynamic_{gender}", table)
    return out


def _print_table(title: str, table) -> None:
    print(title)
    print(table.to_frame().to_string(index=False, float_format=lambda v: f"{v:.6g}"))


def cmd_twfe(cfg: RunConfig) -> Outputs:
    out = Outputs(cfg)
    ds = load_panel(cfg, out)
    spec = _event_spec(cfg)
    for gender in _genders(cfg):
        sub = _gender_subset(ds, gender)
        table = twfe_event_study(sub, cfg.outcome, spec)
        out.table(f"twfe_{gender}", table)
        _print_table(f"TWFE event study ({gender})", table)
    return out


def cmd_tripledid(cfg: RunConfig) -> Outputs:
    out = Outputs(cfg)
    ds = load_panel(cfg, out)
    table = triple_did(ds, cfg.outcome, _event_spec(cfg))
    out.table("tripledid", table)
    _print_table("Triple difference, female minus male", table)
    return out


HANDLERS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "match": cmd_match,
    "twfe": cmd_twfe,
    "tripledid": cmd_tripledid,
}


def run(cfg: RunConfig) -> Path:
    out = HANDLERS[cfg.command](cfg)
    return out.manifest()


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg, verbose = parse_config(argv)
    except ConfigError as err:
        print(f"shockdid: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = run(cfg)
    except (EstimationError, RankDeficientError) as err:
        print(f"shockdid: estimation failed: {err}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (ShockDidError, ValueError, OSError) as err:
        print(f"shockdid: {err}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {manifest}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
