"""Acceptance suite. Each test prints one PASS/FAIL line, repeated in the summary.

Monte Carlo seed bases were fixed before any of these tests were first run and
differ from every seed used while developing the estimators.
"""

import json
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.stats import chi2_contingency

from shockdid.alt_estimators import EventStudySpec, match_dataset, triple_did, twfe_event_study
from shockdid.cli import EXIT_OK, main
from shockdid.dgp_sim import DgpSpec, OutcomeSpec, preset, simulate
from shockdid.eligibility import RiskProfile, age_points, chads_vasc_score
from shockdid.gt_did import (
    EstimatorConfig,
    aggregate_dynamic,
    aggregate_overall,
    att_gt_unconditional,
    estimate_all_cells,
)
from shockdid.inference import BootstrapSpec, multiplier_bootstrap
from shockdid.numerics import chi_square_homogeneity
from shockdid.panel_store import PanelDataset

GOLDEN = Path(__file__).parent / "golden"
GENDERS = ("male", "female")
PRE = (-4, -3, -2, -1)
POST = (0, 1, 2, 3, 4)
FULL_E = PRE + POST


def _truth_dynamic(truth, outcome, cells, e_range):
    realized = truth.truth_for_cells(outcome, cells.identified(), cells.unit_ids)
    return aggregate_dynamic(realized, e_range=e_range).estimates


# -- 1. oracle equivalence -------------------------------------------------------


def _random_panel(rng):
    n = int(rng.integers(6, 51))
    n_years = int(rng.integers(5, 12))
    start = 2000
    years = np.arange(start, start + n_years)
    cohorts = rng.integers(start, start + n_years, size=n)
    ids = [f"u{i:02d}" for i in range(n)]
    y = 3.0 * rng.normal(size=(n, n_years)) + rng.normal(size=(n, 1))
    obs = pd.DataFrame({"unit_id": np.repeat(ids, n_years), "year": np.tile(years, n), "y": y.ravel()})
    u = rng.uniform(size=len(obs))
    # some rows carry a missing outcome, others are absent altogether
    obs.loc[u < 0.1, "y"] = np.nan
    obs = obs[(u < 0.1) | (u >= 0.18)].reset_index(drop=True)
    units = pd.DataFrame({"gender": "male", "cohort": cohorts}, index=ids)
    ds = PanelDataset(units, obs, ("y",), (), (start, start + n_years - 1))
    values = {
        (row.unit_id, int(row.year)): float(row.y) for row in obs.itertuples() if np.isfinite(row.y)
    }
    return ds, dict(zip(ids, cohorts.tolist())), values, years.tolist()


def _brute_force(cohort_of, values, years, g, t, window):
    base = g - 1 if t >= g else t - 1
    if any(y not in years for y in (t, base, g - 1)):
        return None
    treated, controls = [], []
    for unit, c in cohort_of.items():
        if (unit, t) not in values or (unit, base) not in values:
            continue
        change = values[(unit, t)] - values[(unit, base)]
        if c == g and (unit, g - 1) in values:
            treated.append(change)
        elif c != g and t < c <= g + window:
            controls.append(change)
    if not treated or not controls:
        return None
    return sum(treated) / len(treated) - sum(controls) / len(controls)


def test_oracle_equivalence(report):
    rng = np.random.default_rng(1_000_001)
    start = time.perf_counter()
    worst, cells, mismatched = 0.0, 0, 0
    for _ in range(100):
        ds, cohort_of, values, years = _random_panel(rng)
        window = int(rng.choice([3, 5, 7]))
        for g in sorted(set(cohort_of.values())):
            for t in years:
                cell = att_gt_unconditional(ds, g, t, window=window, outcome="y")
                expect = _brute_force(cohort_of, values, years, g, t, window)
                cells += 1
                if (expect is None) != (not cell.identified):
                    mismatched += 1
                elif expect is not None:
                    worst = max(worst, abs(cell.att - expect))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and mismatched == 0 and elapsed < 5.0
    report(1, ok, "oracle equivalence", f"{cells} cells on 100 panels, max |diff| {worst:.1e}, "
           f"{mismatched} identification mismatches, {elapsed:.1f}s")
    assert ok


# -- 2. truth recovery -----------------------------------------------------------


@pytest.mark.slow
def test_truth_recovery(report):
    reps = 200
    covs = ("income", "education", "married")
    start = time.perf_counter()
    errors = defaultdict(list)
    profile = {}
    for r in range(reps):
        ds, truth = simulate(preset("paper-shaped", n_units=4000, seed=7_000_000 + r))
        for gender in GENDERS:
            cells = estimate_all_cells(ds.by_gender(gender), EstimatorConfig("statins", covariates=covs))
            est = aggregate_dynamic(cells, e_range=FULL_E).estimates
            errors[gender].append(est - _truth_dynamic(truth, "statins", cells, FULL_E))
            profile[gender] = truth.profile("statins", gender)
    elapsed = time.perf_counter() - start
    ok = elapsed < 600
    parts = []
    for gender in GENDERS:
        bias = np.mean(errors[gender], axis=0)
        tau = np.array([profile[gender][e] for e in FULL_E])
        bound = np.where(np.array(FULL_E) >= 0, 0.05 * tau, 0.05 * profile[gender][0])
        ok &= bool(np.all(np.abs(bias) < bound))
        worst = int(np.argmax(np.abs(bias) / bound))
        parts.append(f"{gender} max |bias|/bound {abs(bias[worst]) / bound[worst]:.3f} at e={FULL_E[worst]}")
    report(2, ok, "truth recovery (statins, 200 reps)", f"{'; '.join(parts)}, {elapsed:.0f}s")
    assert ok


# -- 3. double robustness --------------------------------------------------------


@pytest.mark.slow
def test_double_robustness(report):
    reps = 200
    full, short = ("income", "education"), ("income",)
    designs = {
        "both_correct": (full, full),
        "or_wrong": (full, short),
        "ps_wrong": (short, full),
        "both_wrong": (short, short),
    }
    outcome = OutcomeSpec(name="y", trend={"income": 1.0, "education": 1.0}, effect={"male": (10.0,), "female": (10.0,)})
    start = time.perf_counter()
    errors = defaultdict(list)
    for r in range(reps):
        spec = DgpSpec(
            n_units=4000,
            hazard_baseline=-8.0,
            timing_tilt={"income": 0.8, "education": 0.8},
            outcomes=(outcome,),
            death_prob={},
            seed=8_000_000 + r,
        )
        ds, truth = simulate(spec)
        for name, (ps, orc) in designs.items():
            cfg = EstimatorConfig("y", covariates=full, ps_covariates=ps, or_covariates=orc, e_range=POST)
            cells = estimate_all_cells(ds, cfg)
            realized = truth.truth_for_cells("y", cells.identified(), cells.unit_ids)
            errors[name].append(aggregate_overall(cells).estimates[0] - aggregate_overall(realized).estimates[0])
    elapsed = time.perf_counter() - start
    bias = {k: float(np.mean(v)) for k, v in errors.items()}
    wrong = np.asarray(errors["both_wrong"])
    t_wrong = bias["both_wrong"] / (wrong.std(ddof=1) / np.sqrt(reps))
    ok = (
        abs(bias["or_wrong"]) < 3 * abs(bias["both_correct"])
        and abs(bias["ps_wrong"]) < 3 * abs(bias["both_correct"])
        and abs(t_wrong) > 1.96
        and elapsed < 900
    )
    detail = ", ".join(f"{k} {v:+.4f}" for k, v in bias.items())
    report(3, ok, "double robustness (overall ATT bias)", f"{detail}, both_wrong t {t_wrong:.1f}, {elapsed:.0f}s")
    assert ok


# -- 4. inference calibration ----------------------------------------------------


@pytest.mark.slow
def test_inference_calibration(report):
    reps = 300
    covs = ("income", "education", "married")
    start = time.perf_counter()
    simultaneous, pointwise = [], []
    for r in range(reps):
        ds, truth = simulate(preset("paper-shaped", n_units=4000, seed=7_000_000 + r))
        cells = estimate_all_cells(ds.by_gender("male"), EstimatorConfig("statins", covariates=covs))
        dyn = aggregate_dynamic(cells, e_range=FULL_E)
        target = _truth_dynamic(truth, "statins", cells, FULL_E)
        band = multiplier_bootstrap(dyn, BootstrapSpec(reps=499, seed=r))
        point = multiplier_bootstrap(dyn, BootstrapSpec(reps=499, seed=r, band="pointwise"))
        simultaneous.append(bool(np.all((band.lower <= target) & (target <= band.upper))))
        pointwise.append((point.lower <= target) & (target <= point.upper))
    elapsed = time.perf_counter() - start
    sim = float(np.mean(simultaneous))
    per_e = np.mean(pointwise, axis=0)
    ok = sim >= 0.90 and bool(np.all((per_e >= 0.92) & (per_e <= 0.98))) and elapsed < 1200
    cover = " ".join(f"{e}:{c:.3f}" for e, c in zip(FULL_E, per_e))
    report(4, ok, "inference calibration (men, statins, 300 reps)", f"simultaneous {sim:.3f}, pointwise {cover}, {elapsed:.0f}s")
    assert ok


# -- 5. pre-trend diagnostic power -----------------------------------------------


@pytest.mark.slow
def test_pretrend_power(report):
    reps = 100
    rates = {}
    for name in ("violated-pretrends", "null"):
        rejected = []
        for r in range(reps):
            ds, _ = simulate(preset(name, seed=9_000_000 + r))
            dyn = aggregate_dynamic(estimate_all_cells(ds, EstimatorConfig("y")))
            band = multiplier_bootstrap(dyn, BootstrapSpec(reps=999, seed=r))
            pre = np.asarray(dyn.labels) < 0
            excludes_zero = (band.lower > 0) | (band.upper < 0)
            rejected.append(bool(np.any(excludes_zero[pre])))
        rates[name] = float(np.mean(rejected))
    ok = rates["violated-pretrends"] >= 0.80 and rates["null"] <= 0.10
    report(5, ok, "pre-trend diagnostic", f"rejection violated-pretrends {rates['violated-pretrends']:.2f}, null {rates['null']:.2f}")
    assert ok


# -- 6. TWFE closed form and heterogeneity bias ----------------------------------


def _two_by_two(rng, n=40):
    cohorts = np.r_[np.full(n // 2, 2000), np.full(n // 2, 2005)]
    ids = [f"u{i:02d}" for i in range(n)]
    y = rng.normal(size=(n, 2)) + np.outer(rng.normal(size=n), [1, 1])
    y[: n // 2, 1] += 4.0
    units = pd.DataFrame({"gender": np.where(rng.uniform(size=n) < 0.5, "female", "male"), "cohort": cohorts}, index=ids)
    obs = pd.DataFrame({"unit_id": np.repeat(ids, 2), "year": np.tile([1999, 2000], n), "y": y.ravel()})
    return PanelDataset(units, obs, ("y",), (), (1999, 2005)), y


@pytest.mark.slow
def test_twfe_closed_form_and_heterogeneity(report):
    rng = np.random.default_rng(6_000_001)
    worst = 0.0
    for _ in range(20):
        ds, y = _two_by_two(rng)
        tab = twfe_event_study(ds, "y", EventStudySpec(e_range=(0,)))
        d = y[:, 1] - y[:, 0]
        worst = max(worst, abs(tab.estimate[tab.labels.index(0)] - (d[:20].mean() - d[20:].mean())))

    # e = -1 is the TWFE reference period, so it carries no estimate to compare
    e_set = (-4, -3, -2, 0, 1, 2, 3, 4)
    gt_err, twfe_err = [], []
    for r in range(100):
        ds, truth = simulate(preset("heterogeneous-effects", seed=6_000_000 + r))
        cells = estimate_all_cells(ds, EstimatorConfig("y"))
        target = _truth_dynamic(truth, "y", cells, e_set)
        gt = aggregate_dynamic(cells, e_range=e_set).estimates
        tw = twfe_event_study(ds, "y")
        twfe = np.array([tw.estimate[tw.labels.index(e)] for e in e_set])
        gt_err.append(np.abs(gt - target))
        twfe_err.append(np.abs(twfe - target))
    mae_gt, mae_twfe = np.mean(gt_err, axis=0), np.mean(twfe_err, axis=0)
    ok = worst < 1e-10 and bool(np.all(mae_gt < mae_twfe))
    pairs = " ".join(f"{e}:{a:.3f}<{b:.3f}" for e, a, b in zip(e_set, mae_gt, mae_twfe))
    report(6, ok, "TWFE closed form and heterogeneity", f"2x2 max |diff| {worst:.1e}; MAE gt<twfe {pairs}")
    assert ok


# -- 7. triple difference gap recovery -------------------------------------------


@pytest.mark.slow
def test_triple_did_gap(report):
    reps = 100
    estimates = []
    for r in range(reps):
        ds, _ = simulate(preset("gender-gap", n_units=4000, seed=6_500_000 + r))
        tab = triple_did(ds, "y")
        labels = list(tab.labels)
        estimates.append(tab.estimate)
    estimates = np.asarray(estimates)
    mean = estimates.mean(axis=0)
    mc_se = estimates.std(axis=0, ddof=1) / np.sqrt(reps)
    z = {e: (mean[labels.index(e)] + 3.0) / mc_se[labels.index(e)] for e in POST}
    ok = all(abs(v) < 3 for v in z.values())
    detail = " ".join(f"{e}:{mean[labels.index(e)]:+.3f}(z {z[e]:+.1f})" for e in POST)
    report(7, ok, "triple difference gap -3", detail)
    assert ok


# -- 8. matching balance ---------------------------------------------------------


def test_matching_balance(report):
    spec = DgpSpec(n_units=4000, seed=9, gender_shifts={"income": -0.3, "education": -0.3, "married": -0.45})
    ds, _ = simulate(spec)
    res = match_dataset(ds, ["age", "income", "education", "married", "single"])
    pre = float(res.balance_before["Std. Mean Diff."].abs().max())
    post = float(res.balance_after["Std. Mean Diff."].abs().max())
    ok = pre > 0.25 and post < 0.1
    report(8, ok, "matching balance", f"max |SMD| before {pre:.3f}, after {post:.3f}")
    assert ok


# -- 9. shock-mix chi-square and risk score --------------------------------------


def test_shock_mix_and_risk_score(report):
    men, women = 30103, 15140
    counts = np.array([
        [round(men * 0.5898), men - round(men * 0.5898)],
        [round(women * 0.5005), women - round(women * 0.5005)],
    ])
    res = chi_square_homogeneity(counts)
    stat, p_ref, dof, _ = chi2_contingency(counts, correction=False)
    base = RiskProfile(sex="male", age=60)
    doubling = (
        age_points(76) == 2
        and age_points(70) == 1
        and age_points(60) == 0
        and chads_vasc_score(RiskProfile(sex="male", age=80)) == 2
        and chads_vasc_score(RiskProfile(sex="male", age=66)) == 1
        and chads_vasc_score(RiskProfile(sex="male", age=60, prior_stroke_tia_te=True)) == 2
        and chads_vasc_score(RiskProfile(sex="female", age=60)) == chads_vasc_score(base) + 1
    )
    ok = res.p_value < 0.005 and np.isclose(res.statistic, stat, rtol=1e-10) and res.dof == dof and doubling
    report(9, ok, "shock-mix chi-square and risk score",
           f"counts {counts.tolist()}, chi2 {res.statistic:.1f}, p {res.p_value:.2e} (scipy {p_ref:.2e}), doubling {doubling}")
    assert ok


# -- 10. determinism -------------------------------------------------------------


def _run(*argv):
    return main([str(a) for a in argv])


def _files(directory: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.mark.slow
def test_determinism(report, tmp_path):
    commands = {
        "simulate": lambda panel: ["simulate", "paper-shaped", "--n-units", 800, "--seed", 21],
        "estimate": lambda panel: ["estimate", "-i", panel, "--outcome", "statins", "--covariates", "income,education", "--reps", 199, "--seed", 5],
        "diagnose": lambda panel: ["diagnose", "-i", panel],
        "match": lambda panel: ["match", "-i", panel, "--covariates", "age,income,education", "--outcome", "statins", "--reps", 99],
        "twfe": lambda panel: ["twfe", "-i", panel, "--outcome", "statins"],
        "tripledid": lambda panel: ["tripledid", "-i", panel, "--outcome", "statins"],
    }
    panel = tmp_path / "simulate_a" / "panel.csv"
    differing = []
    for name, build in commands.items():
        outputs = []
        for run_id in ("a", "b"):
            out = tmp_path / f"{name}_{run_id}"
            assert _run(*build(panel), "-o", out) == EXIT_OK, name
            outputs.append(_files(out))
        if outputs[0] != outputs[1]:
            differing.append(name)

    assert _run("simulate", "null", "--seed", 7, "--n-units", 40, "-o", tmp_path / "gold_sim") == EXIT_OK
    gold_panel = tmp_path / "gold_sim" / "panel.csv"
    assert _run("estimate", "-i", gold_panel, "--outcome", "y", "--reps", 99, "--gender", "male", "-o", tmp_path / "gold_est") == EXIT_OK
    golden_ok = all(
        (tmp_path / "gold_est" / name).read_bytes() == (GOLDEN / name).read_bytes()
        for name in ("dynamic_male.csv", "overall_male.csv")
    )
    manifest = json.loads((tmp_path / "gold_sim" / "manifest.json").read_text())
    golden_ok &= manifest["outputs"] == json.loads((GOLDEN / "simulate_manifest.json").read_text())["outputs"]
    ok = not differing and golden_ok
    report(10, ok, "determinism", f"{len(commands)} commands rerun, differing {differing or 'none'}, golden files match {golden_ok}")
    assert ok
