"""Acceptance criteria 1-9, one PASS/FAIL line each.

The expensive multi-seed runs are cached per session so criteria sharing a
run (recourse effectiveness and ablations) train it once.
"""

import time

import numpy as np
import pytest

from tsrecourse.detector import AnomalyDetector, ResidualScorer
from tsrecourse.eval import ExperimentConfig, lambda_sweep, run_detection, run_experiment
from tsrecourse.gvar import GvarModel, GvarTrainConfig, abduct_all, gradient_check
from tsrecourse.recourse import RecourseAction, RecourseFunction, counterfactual_rollout, recourse_gradient_check
from tsrecourse.synthgen import LinearSystemParams, gen_linear, resimulate

pytestmark = pytest.mark.acceptance

BASELINES = ("mlp", "lstm", "var", "gvar")


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok
    return emit


@pytest.fixture(scope="session")
def linear_point():
    cfg = ExperimentConfig(dataset="linear", regime="external_point", ablations=True)
    return run_experiment(cfg)


@pytest.fixture(scope="session")
def lv_point():
    return run_experiment(ExperimentConfig(dataset="lotka_volterra", regime="external_point"))


def fmt(table, model, metric):
    return f"{table.mean(model, metric):.3f}±{table.std(model, metric):.3f}"


def test_c1_gradient_suite(verdict):
    start = time.perf_counter()
    worst_gvar = worst_rec = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        model = GvarModel(4, 4, hidden=8, seed=seed)
        segs = rng.normal(size=(8, 5, 4))
        worst_gvar = max(worst_gvar, gradient_check(model, segs, GvarTrainConfig(hidden=8), "total"))
        det = AnomalyDetector(ResidualScorer(model), 0.05, 5)
        h = RecourseFunction(4, 5, hidden=8, seed=seed)
        L = 1 + seed % 3
        worst_rec = max(worst_rec, recourse_gradient_check(model, det, h, rng.normal(size=(8, 4 + L + 1, 4)), 0.1, L))
    elapsed = time.perf_counter() - start
    ok = worst_gvar < 1e-4 and worst_rec < 1e-4 and elapsed < 60
    verdict(1, ok, f"max rel err gvar {worst_gvar:.2e} recourse {worst_rec:.2e}, {elapsed:.1f}s")
    assert ok


def test_c2_abduction_round_trip(verdict):
    from tsrecourse.gvar import frozen_linear
    params = LinearSystemParams.sample(1)
    ds = gen_linear(params, 10_004)
    A = params.matrix()
    z = np.zeros_like(A)
    u = abduct_all(frozen_linear([A, z, z, z]), ds.series.values)
    err = float(np.abs(u - ds.exogenous[4:]).max())
    ok = err < 1e-10 and u.shape[0] == 10_000
    verdict(2, ok, f"max abs error {err:.2e} over {u.shape[0]} steps")
    assert ok


def test_c3_aap_oracle(verdict):
    from tsrecourse.gvar import frozen_linear
    params = LinearSystemParams.sample(2)
    ds = gen_linear(params, 5_000)
    A = params.matrix()
    z = np.zeros_like(A)
    gvar = frozen_linear([A, z, z, z])
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(100):
        L = 1 + trial % 5
        t = int(rng.integers(4, ds.series.T - L))
        theta = rng.normal(0, 3, size=4)
        roll = counterfactual_rollout(gvar, ds.series.values, [RecourseAction(t, theta)], L)
        drive = ds.drive.copy()
        drive[t] += theta
        worst = max(worst, float(np.abs(roll.values - resimulate(ds, drive)[t:t + L + 1]).max()))
    ok = worst < 1e-10
    verdict(3, ok, f"max elementwise difference {worst:.2e} over 100 trials, L in 1..5")
    assert ok


def test_c4_detection_quality(verdict):
    start = time.perf_counter()
    det = run_detection(ExperimentConfig(dataset="linear", regime="external_point"))
    elapsed = time.perf_counter() - start
    f1 = float(np.mean([d["f1"] for d in det.values()]))
    roc = float(np.mean([d["auc_roc"] for d in det.values()]))
    ok = f1 >= 0.70 and roc >= 0.78 and elapsed < 600 and len(det) == 5
    verdict(4, ok, f"F1 {f1:.3f} AUC-ROC {roc:.3f} over {len(det)} seeds, {elapsed:.0f}s")
    assert ok


def test_c5_recourse_effectiveness(verdict, linear_point, lv_point):
    lin, lv = linear_point.table, lv_point.table
    rec_lin = lin.mean("recad", "flipping_ratio")
    var_lin = lin.mean("var", "flipping_ratio")
    rec_lv = lv.mean("recad", "flipping_ratio")
    steps_ok = all(t.mean("recad", "action_step") <= t.mean(b, "action_step")
                   for t in (lin, lv) for b in BASELINES)
    parts = {
        "linear recad >= 0.85": rec_lin >= 0.85,
        "linear recad > var": rec_lin > var_lin,
        "lv recad >= 0.85": rec_lv >= 0.85,
        "action_step <= baselines": steps_ok,
    }
    ok = all(parts.values()) and len(lin.values("recad", "flipping_ratio")) == 5 \
        and len(lv.values("recad", "flipping_ratio")) == 5
    detail = (f"linear recad {fmt(lin, 'recad', 'flipping_ratio')} var {fmt(lin, 'var', 'flipping_ratio')}; "
              f"lv recad {fmt(lv, 'recad', 'flipping_ratio')} var {fmt(lv, 'var', 'flipping_ratio')}; "
              "steps " + " ".join(f"{m}={lin.mean(m, 'action_step'):.3f}/{lv.mean(m, 'action_step'):.3f}"
                                  for m in ("recad", *BASELINES))
              + "; failed: " + (", ".join(k for k, v in parts.items() if not v) or "none"))
    verdict(5, ok, detail)
    assert ok


def test_c6_structural_regime(verdict):
    res = run_experiment(ExperimentConfig(dataset="linear", regime="structural_seq", models=("recad",)))
    flip = res.table.mean("recad", "flipping_ratio")
    ok = flip >= 0.85 and len(res.table.values("recad", "flipping_ratio")) == 5
    verdict(6, ok, f"recad flipping ratio {fmt(res.table, 'recad', 'flipping_ratio')}")
    assert ok


def test_c7_lambda_sensitivity(verdict):
    grid = (0.01, 0.1, 0.3, 1.0, 3.0)
    sweep = lambda_sweep(ExperimentConfig(dataset="linear", regime="external_point", seeds=(1, 2, 3)), grid)
    ok = sweep.trend_ok
    pts = " ".join(f"{g:g}:{f:.3f}/{c:.3f}" for g, f, c in zip(grid, sweep.flipping_ratio, sweep.action_cost))
    verdict(7, ok, f"rho(flip) {sweep.rho_flip:.3f} rho(cost) {sweep.rho_cost:.3f}; lam:flip/cost {pts}")
    assert ok


def test_c8_ablation_ordering(verdict, linear_point):
    t = linear_point.table
    first3 = {m: float(np.mean([t.per_seed[m][s]["flipping_ratio"] for s in (1, 2, 3)]))
              for m in ("recad", "recad_wo_lstm", "recad_wo_ffnn")}
    ok = first3["recad"] - max(first3["recad_wo_lstm"], first3["recad_wo_ffnn"]) >= 0.05
    verdict(8, ok, " ".join(f"{m} {v:.3f}" for m, v in first3.items()) + " (seeds 1-3)")
    assert ok


def test_c9_determinism(verdict, tmp_path):
    cfg = ExperimentConfig(T_train=12_000, T_test=6_000, seeds=(1, 2), gvar_epochs=2, recourse_epochs=3,
                           predictor_epochs=2, ablations=True)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    diff = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not diff and len(files) > 3
    verdict(9, ok, f"{len(files)} emitted files compared, {len(diff)} differ")
    assert ok
