import numpy as np
import pytest
import torch

from tsrecourse.detector import AnomalyDetector, ResidualScorer
from tsrecourse.gvar import GvarModel, InsufficientHistoryError
from tsrecourse.nn import as_tensor, finite_difference_check
from tsrecourse.recourse import (CounterfactualRollout, RecourseAction, RecourseFunction, RecourseTrainConfig,
                                 compute_deviation, counterfactual_rollout, deviation_tensor, episode_loss, explain,
                                 predict_action, recourse_gradient_check, recourse_loss, recourse_policy,
                                 train_recourse, training_segments)
from tsrecourse.synthgen import AnomalySpec, inject_anomalies, resimulate


@pytest.fixture(scope="module")
def true_detector(true_gvar):
    return AnomalyDetector(ResidualScorer(true_gvar), 1.5, 5, 0.99)


def oracle_policy(gvar, shrink=1.0):
    def policy(w):
        return -shrink * deviation_tensor(gvar, w)
    return policy


def zero_policy(w):
    return torch.zeros_like(w[..., -1, :])


# ---------------------------------------------------------------- function


def test_recourse_function_shapes_and_flags():
    h = RecourseFunction(4, 5, hidden=7, seed=0)
    out = h(torch.zeros(3, 4, 4, dtype=torch.float64), torch.ones(3, 4, dtype=torch.float64))
    assert out.shape == (3, 4)
    single = predict_action(h, np.zeros((4, 4)), np.ones(4))
    assert single.shape == (4,) and np.isfinite(single).all()
    with pytest.raises(ValueError):
        RecourseFunction(4, 5, use_seq=False, use_dev=False)


def test_zero_head_gives_zero_action():
    h = RecourseFunction(4, 5, seed=1).zero_head_()
    theta = predict_action(h, np.random.default_rng(0).normal(size=(4, 4)), np.random.default_rng(1).normal(size=4))
    assert np.all(theta == 0)


def test_ablation_ignores_disabled_branch():
    h = RecourseFunction(4, 5, hidden=6, use_seq=False, seed=2)
    d = np.random.default_rng(0).normal(size=4)
    a = predict_action(h, np.zeros((4, 4)), d)
    b = predict_action(h, np.random.default_rng(1).normal(size=(4, 4)), d)
    assert np.array_equal(a, b)
    h2 = RecourseFunction(4, 5, hidden=6, use_dev=False, seed=2)
    w = np.random.default_rng(2).normal(size=(4, 4))
    assert np.array_equal(predict_action(h2, w, d), predict_action(h2, w, -d))


def test_action_jacobian_matches_finite_differences():
    h = RecourseFunction(4, 5, hidden=5, seed=3)
    prev = as_tensor(np.random.default_rng(3).normal(size=(4, 4)))
    delta = as_tensor(np.random.default_rng(4).normal(size=4))
    for j in range(4):
        errs = finite_difference_check(lambda: h(prev, delta)[j], list(h.parameters()))
        assert max(errs.values()) < 1e-4


def test_recourse_checkpoint(tmp_path):
    h = RecourseFunction(4, 5, hidden=6, use_seq=False, seed=5)
    h.save(tmp_path / "h.json")
    back = RecourseFunction.load(tmp_path / "h.json")
    assert not back.use_seq
    w, d = np.ones((4, 4)), np.arange(4.0)
    assert np.array_equal(predict_action(back, w, d), predict_action(h, w, d))


# ---------------------------------------------------------------- deviation


def test_deviation_zero_on_forecast(true_gvar):
    w = np.random.default_rng(0).normal(size=(5, 4))
    A = true_gvar.b2[0].detach().numpy().reshape(4, 4)
    w[-1] = A @ w[-2]
    assert np.abs(compute_deviation(true_gvar, w)).max() < 1e-14
    with pytest.raises(ValueError):
        compute_deviation(true_gvar, np.zeros((7, 4)))


def test_deviation_recovers_injected_eps(linear_data, true_gvar):
    ds = inject_anomalies(linear_data, AnomalySpec("external_point", 0.02, seed=11), start=100)
    x = ds.series.values
    for ev in ds.injected[:25]:
        t = ev.start
        delta = compute_deviation(true_gvar, x[t - 4:t + 1])
        eps = delta - ds.exogenous[t]
        expected = np.zeros(4)
        expected[list(ev.dims)] = ev.eps[0]
        assert np.abs(eps - expected).max() < 1e-10


# ---------------------------------------------------------------- rollout


def test_null_action_reproduces_factual(linear_data, true_gvar):
    x = linear_data.series.values
    roll = counterfactual_rollout(true_gvar, x, [RecourseAction(500, np.zeros(4))], 5)
    assert np.abs(roll.values - x[500:506]).max() < 1e-12


def test_rollout_matches_resimulation(linear_data, true_gvar):
    rng = np.random.default_rng(0)
    x = linear_data.series.values
    for trial in range(40):
        t = int(rng.integers(10, 11_000))
        L = int(rng.integers(1, 6))
        theta = rng.normal(0, 2, size=4)
        roll = counterfactual_rollout(true_gvar, x, [RecourseAction(t, theta)], L)
        drive = linear_data.drive.copy()
        drive[t] += theta
        brute = resimulate(linear_data, drive)
        assert np.abs(roll.values - brute[t:t + L + 1]).max() < 1e-10
        assert np.array_equal(roll.values[0], x[t] + theta)


def test_multiple_actions_compose(linear_data, true_gvar):
    x = linear_data.series.values
    acts = [RecourseAction(700, np.array([1.0, -2, 0, 0.5])), RecourseAction(702, np.array([0, 0, 3.0, 0]))]
    roll = counterfactual_rollout(true_gvar, x, acts, 4)
    drive = linear_data.drive.copy()
    for a in acts:
        drive[a.t] += a.theta
    assert np.abs(roll.values - resimulate(linear_data, drive)[700:705]).max() < 1e-10


def test_rollout_errors(linear_data, true_gvar):
    x = linear_data.series.values
    with pytest.raises(InsufficientHistoryError):
        counterfactual_rollout(true_gvar, x, [RecourseAction(2, np.zeros(4))], 1)
    with pytest.raises(ValueError):
        counterfactual_rollout(true_gvar, x, [RecourseAction(x.shape[0] - 2, np.zeros(4))], 5)
    with pytest.raises(ValueError):
        counterfactual_rollout(true_gvar, x, [], 1)


def test_rollout_scores(linear_data, true_gvar, true_detector):
    x = linear_data.series.values
    roll = counterfactual_rollout(true_gvar, x, [RecourseAction(900, np.zeros(4))], 2, true_detector)
    np.testing.assert_allclose(roll.scores, np.linalg.norm(linear_data.exogenous[900:903], axis=1), atol=1e-12)
    assert np.array_equal(roll.flipped, roll.scores <= 1.5)


# ---------------------------------------------------------------- objective


def test_recourse_loss_cases():
    assert recourse_loss(np.array([0.5, 0.9]), [np.zeros(3)], 1.0, 0.3) == 0.0
    assert recourse_loss(np.array([2.0, 0.5]), [np.array([3.0, 4.0])], 1.0, 0.0) == 1.0
    assert recourse_loss(np.array([2.0, 0.5]), [np.array([3.0, 4.0])], 1.0, 0.5) == 3.5
    t = recourse_loss(torch.tensor([2.0, 0.5], dtype=torch.float64), [torch.tensor([3.0, 4.0], dtype=torch.float64)],
                      1.0, 0.5)
    assert float(t) == 3.5


def test_action_cost():
    a = RecourseAction(5, np.array([3.0, 4.0, 0, 0]))
    assert a.cost == 5.0
    assert RecourseAction(5, np.zeros(4)).cost == 0.0
    assert RecourseAction(5, np.array([3.0, 4.0, 0, 0]), np.array([2.0, 2, 1, 1])).cost == 10.0


def test_episode_loss_null_policy_is_factual_hinge(linear_data, true_gvar, true_detector):
    x = linear_data.series.values
    segs = as_tensor(training_segments(x, [100, 200, 300], 4, 1))
    loss, parts = episode_loss(true_gvar, true_detector, zero_policy, segs, 0.5, 1)
    s = np.linalg.norm(linear_data.exogenous, axis=1)
    expected = np.mean([max(s[t] - 1.5, 0) + max(s[t + 1] - 1.5, 0) for t in (100, 200, 300)])
    assert abs(float(loss.detach()) - expected) < 1e-12
    assert parts["penalty"] == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_recourse_gradient_check(seed, linear_data, true_gvar):
    gvar = GvarModel(4, 4, hidden=5, seed=seed)
    det = AnomalyDetector(ResidualScorer(gvar), 0.05, 5)
    h = RecourseFunction(4, 5, hidden=5, seed=seed)
    segs = np.random.default_rng(seed).normal(size=(6, 6, 4))
    assert recourse_gradient_check(gvar, det, h, segs, 0.3, 1) < 1e-4


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def point_setup(linear_data, true_gvar, true_detector):
    ds = inject_anomalies(linear_data, AnomalySpec("external_point", 0.02, (4, 5), seed=12), start=100,
                          reference_std=linear_data.series.values.std(axis=0))
    x = ds.series.values
    s = true_detector.score_series(x)
    steps = [int(t) for t in np.flatnonzero(s > true_detector.tau) if 10 < t < x.shape[0] - 20]
    return x, steps


def test_training_deterministic_and_improves(point_setup, true_gvar, true_detector):
    x, steps = point_setup
    segs = training_segments(x, steps[:120], 4, 1)
    cfg = RecourseTrainConfig(epochs=4, hidden=8, seed=3)
    a = train_recourse(true_gvar, true_detector, segs, cfg)
    b = train_recourse(true_gvar, true_detector, segs, cfg)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    hist = [h["loss"] for h in a.loss_history]
    assert hist[-1] < hist[0]
    assert all(p.requires_grad for p in true_gvar.parameters())


def test_large_lambda_shrinks_actions(point_setup, true_gvar, true_detector):
    x, steps = point_setup
    segs = training_segments(x, steps, 4, 1)
    norms = {}
    for lam in (0.01, 100.0):
        h = train_recourse(true_gvar, true_detector, segs, RecourseTrainConfig(lam=lam, epochs=15, hidden=16))
        with torch.no_grad():
            th = recourse_policy(true_gvar, h)(as_tensor(segs[:, :5]))
        norms[lam] = float(th.norm(dim=-1).mean())
    assert norms[100.0] < 0.1 * norms[0.01]


def test_training_rejects_empty(true_gvar, true_detector):
    with pytest.raises(ValueError):
        train_recourse(true_gvar, true_detector, np.empty((0, 6, 4)), RecourseTrainConfig())
    with pytest.raises(ValueError):
        RecourseTrainConfig(lam=-1)
    with pytest.raises(ValueError):
        RecourseTrainConfig(L=0)


# ---------------------------------------------------------------- explain


def test_oracle_policy_flips_point_in_one_action(point_setup, true_gvar, true_detector):
    x, steps = point_setup
    t = steps[0]
    rep = explain(true_gvar, true_detector, oracle_policy(true_gvar), x, (t, t))
    assert rep.flipped and rep.steps_used == 1 and rep.n_flipped == 1
    assert np.allclose(rep.counterfactual[0], x[t] - compute_deviation(true_gvar, x[t - 4:t + 1]))


def test_flip_soundness(point_setup, true_gvar, true_detector):
    x, steps = point_setup
    for t in steps[:30]:
        rep = explain(true_gvar, true_detector, oracle_policy(true_gvar, 0.7), x, (t, t))
        cf = x.copy()
        cf[rep.steps] = rep.counterfactual
        rescored = true_detector.score_windows(np.stack([cf[s - 4:s + 1] for s in rep.steps]))
        np.testing.assert_allclose(rescored, rep.scores, atol=1e-12)
        assert rep.flipped == bool(np.all(rescored <= true_detector.tau))
        assert np.allclose(rep.counterfactual[0] - x[t], rep.actions[0].theta)


def test_null_policy_never_flips(point_setup, true_gvar, true_detector):
    x, steps = point_setup
    rep = explain(true_gvar, true_detector, zero_policy, x, (steps[0], steps[0]))
    assert rep.n_flipped == 0 and not rep.flipped


def test_max_actions_cap(linear_data, true_gvar):
    det = AnomalyDetector(ResidualScorer(true_gvar), 1e-6, 5)
    rep = explain(true_gvar, det, zero_policy, linear_data.series.values, (1000, 1002), max_actions=4)
    assert rep.steps_used == 4 and not rep.flipped
    assert rep.steps[-1] >= 1003


def test_explain_requires_history(linear_data, true_gvar, true_detector):
    with pytest.raises(InsufficientHistoryError):
        explain(true_gvar, true_detector, zero_policy, linear_data.series.values, (2, 2))


def test_report_json_raw_units(point_setup, true_gvar, true_detector):
    x, steps = point_setup
    rep = explain(true_gvar, true_detector, oracle_policy(true_gvar), x, (steps[0], steps[0]))
    std = np.array([1.0, 2.0, 3.0, 4.0])
    obj = rep.to_json(std, "cf.csv")
    assert obj["counterfactual_csv_path"] == "cf.csv"
    np.testing.assert_allclose(obj["actions"][0]["theta_raw_units"], rep.actions[0].theta * std)
    assert obj["flipped"] is True and obj["steps_used"] == 1
