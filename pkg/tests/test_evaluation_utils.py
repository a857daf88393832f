import numpy as np
import pytest

from utils.attack_utils import AttackSpec, attack_rng, ball_for, run_attack
from utils.evaluation_utils import (
    EVAL_SLOT_OFFSET,
    DeltaErrorReport,
    GaussianDeltaEnsemble,
    RobustReport,
    estimate_delta_terms,
    evaluate_robustness,
    gp_rows,
    monte_carlo_delta,
    paired_monte_carlo,
    predicted_delta_gp,
    predicted_error_difference,
    sin_squared,
)
from utils.gp_utils import GpVariant, gp_layer
from utils.lp_utils import AttackNorm
from utils.tensor_utils import SgdConfig, predict
from utils.training_utils import EpochContext, nt_epoch

ENSEMBLE = GaussianDeltaEnsemble()
EVAL_SPECS = [
    AttackSpec(AttackNorm.L1, 0.2, steps=4),
    AttackSpec(AttackNorm.L2, 0.1, steps=4),
    AttackSpec(AttackNorm.LINF, 0.05, steps=4),
]


def assert_report_invariants(report: RobustReport):
    per_norm = list(report.per_norm_acc.values())
    assert 0.0 <= report.union_acc <= min(per_norm)
    assert max(per_norm) <= report.clean_acc <= 1.0


def test_union_from_flags():
    report = RobustReport.from_flags(
        [True, True],
        {AttackNorm.L1: [True, True], AttackNorm.L2: [True, False], AttackNorm.LINF: [True, True]},
    )
    assert report.union_acc == 0.5
    assert report.per_norm_acc[AttackNorm.L2] == 0.5
    assert report.flags.shape == (2, 4)
    assert report.to_dict() == {
        "clean_acc": 1.0,
        "per_norm_acc": {"l1": 1.0, "l2": 0.5, "linf": 1.0},
        "union_acc": 0.5,
        "samples": 2,
    }


def test_robust_flags_require_clean_correctness():
    report = RobustReport.from_flags([True, False, True], {AttackNorm.L2: [True, True, True]})
    assert report.per_norm_acc[AttackNorm.L2] == pytest.approx(2 / 3)
    assert report.union_acc == report.clean_acc


def test_flag_shape_mismatch():
    with pytest.raises(ValueError):
        RobustReport.from_flags([True, False], {AttackNorm.L1: [True]})


def test_evaluate_robustness_invariants(blobs, blob_model):
    report = evaluate_robustness(blob_model, blobs, EVAL_SPECS, batch_size=16)
    assert_report_invariants(report)
    assert report.clean_acc == pytest.approx(np.mean(predict(blob_model, blobs.x) == blobs.y))
    assert report.norms == (AttackNorm.L1, AttackNorm.L2, AttackNorm.LINF)
    again = evaluate_robustness(blob_model, blobs, EVAL_SPECS, batch_size=16)
    np.testing.assert_array_equal(report.flags, again.flags)


def test_robust_flags_count_every_iterate(blobs, blob_model):
    specs = [AttackSpec(AttackNorm.LINF, 0.15, steps=6)]
    report = evaluate_robustness(blob_model, blobs, specs, batch_size=len(blobs))
    adv = run_attack(blob_model, blobs.x, blobs.y, ball_for(specs[0], blobs.x), specs[0],
                     attack_rng(specs[0].seed, 0, 0, EVAL_SLOT_OFFSET))
    clean_correct = predict(blob_model, blobs.x) == blobs.y
    expected = np.mean(clean_correct & ~adv.fooled)
    assert report.per_norm_acc[AttackNorm.LINF] == pytest.approx(expected)
    assert expected <= np.mean(clean_correct & (adv.logits.argmax(axis=1) == blobs.y))


def test_identity_attacks_keep_clean_accuracy(moons, small_model):
    specs = [AttackSpec(norm, 0.1, steps=0) for norm in AttackNorm]
    report = evaluate_robustness(small_model, moons, specs)
    assert report.union_acc == report.clean_acc
    assert all(acc == report.clean_acc for acc in report.per_norm_acc.values())


def test_predicted_error_difference_formula():
    report = DeltaErrorReport(variance=4.6017e-08, bias=7e-04, tau_bar_sq=0.0071 ** 2, predicted_diff=0.0, m=100)
    assert predicted_error_difference(report, 0.0) == 0.0
    expected = 0.75 * 4.6017e-08 - 0.25 * 0.0071 ** 2 * 7e-04
    assert predicted_error_difference(report, 0.5) == pytest.approx(expected, rel=1e-12)
    assert predicted_error_difference(report, 0.5) == pytest.approx(2.57e-08, rel=0.01)
    corrected = predicted_error_difference(report, 0.5, finite_m=True)
    assert corrected == pytest.approx(0.75 * 4.6017e-08 * 1.01 - 0.25 * 0.0071 ** 2 * 7e-04, rel=1e-12)

    no_tau = DeltaErrorReport(variance=3.0, bias=5.0, tau_bar_sq=0.0, predicted_diff=0.0, m=10)
    assert predicted_error_difference(no_tau, 1.0) == 3.0
    with pytest.raises(ValueError):
        predicted_error_difference(no_tau, 1.2)


def test_predicted_delta_gp_formula():
    assert predicted_delta_gp(100.0, 123.0, 0.9, 0.0, 10) == 100.0
    assert predicted_delta_gp(100.0, 123.0, 0.0, 1.0, 10) == pytest.approx(10.0)
    assert predicted_delta_gp(100.0, 120.0, 0.5, 0.5, 4) == pytest.approx(25.0 + 0.75 * 25.0 + 0.25 * 60.0)
    with pytest.raises(ValueError):
        predicted_delta_gp(1.0, 1.0, 0.5, 0.5, 0)


def test_delta_report_validation():
    with pytest.raises(ValueError):
        DeltaErrorReport(variance=-1.0, bias=0.0, tau_bar_sq=0.0, predicted_diff=0.0, m=1)
    with pytest.raises(ValueError):
        DeltaErrorReport(variance=0.0, bias=0.0, tau_bar_sq=1.5, predicted_diff=0.0, m=1)


def test_sin_squared():
    assert sin_squared(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(1.0)
    assert sin_squared(np.array([1.0, 1.0]), np.array([2.0, 2.0])) == pytest.approx(0.0, abs=1e-15)
    assert sin_squared(np.zeros(2), np.array([1.0, 0.0])) == 0.0


def trajectory(dataset, model, epochs=2):
    sgd = SgdConfig(learning_rate=0.1, seed=1)
    snapshots = [model]
    for epoch in range(epochs):
        snapshots.append(nt_epoch(snapshots[-1], dataset, sgd, EpochContext(epoch=epoch, batch_size=16)))
    return snapshots


def test_full_minibatch_has_zero_variance(moons, small_model):
    snapshots = trajectory(moons, small_model)
    specs = [AttackSpec(AttackNorm.LINF, 0.05, steps=3)]
    report = estimate_delta_terms(snapshots, moons, None, specs, minibatch_size=len(moons), labels=[0, 1, 2])
    assert report.variance == 0.0
    assert report.bias > 0.0
    assert 0.0 <= report.tau_bar_sq <= 1.0
    assert report.m == small_model.parameter_count()
    assert [row["epoch"] for row in report.per_snapshot] == [0, 1, 2]
    assert set(report.per_snapshot[0]) == {"epoch", "variance", "bias", "tau_sq", "tau_bar", "predicted_diff"}
    assert report.predicted_diff == pytest.approx(predicted_error_difference(report, 0.5))


def test_identity_attack_makes_clean_and_adversarial_gradients_agree(moons, small_model):
    snapshots = trajectory(moons, small_model, epochs=1)
    specs = [AttackSpec(AttackNorm.L2, 0.1, steps=0)]
    report = estimate_delta_terms(snapshots, moons, moons, specs, minibatch_size=len(moons))
    assert report.variance == 0.0
    assert report.bias == 0.0
    assert report.tau_bar_sq == 0.0


def test_sampled_minibatches_give_positive_variance(blobs, blob_model):
    snapshots = trajectory(blobs, blob_model)
    specs = [AttackSpec(AttackNorm.L2, 0.1, steps=2)]
    report = estimate_delta_terms(snapshots, blobs, blobs, specs, minibatch_size=8, seed=4)
    assert report.variance > 0.0
    again = estimate_delta_terms(snapshots, blobs, blobs, specs, minibatch_size=8, seed=4)
    assert again.to_dict() == report.to_dict()


def test_delta_estimate_needs_two_snapshots(moons, small_model):
    with pytest.raises(ValueError):
        estimate_delta_terms([small_model], moons, None, [AttackSpec(AttackNorm.L2, 0.1)])
    with pytest.raises(ValueError):
        estimate_delta_terms([small_model, small_model], moons, None, [])


@pytest.mark.parametrize("variant", list(GpVariant))
def test_gp_rows_matches_layer_rule(variant, rng):
    g_n, g_a = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    g_n[2] = 0.0
    expected = np.array([gp_layer(g_n[i], g_a[i], variant) for i in range(6)])
    np.testing.assert_allclose(gp_rows(g_n, g_a, variant), expected, atol=1e-12)


def test_monte_carlo_exact_samples_give_zero():
    g_a = np.arange(4.0)
    sampler = lambda rng, count: (np.tile(g_a, (count, 1)), rng.normal(size=(count, 4)))  # noqa: E731
    assert monte_carlo_delta(g_a, sampler, beta=0.0, trials=50) == 0.0
    with pytest.raises(ValueError):
        monte_carlo_delta(g_a, sampler, beta=0.0, trials=0)


def test_monte_carlo_at_error_matches_known_variance():
    g_a, _ = ENSEMBLE.population()
    delta_at = monte_carlo_delta(g_a, ENSEMBLE.sampler(), beta=0.0, trials=2000, seed=7)
    assert delta_at == pytest.approx(ENSEMBLE.variance, rel=0.02)


def test_lemma_matches_monte_carlo_gp_error():
    g_a, _ = ENSEMBLE.population()
    _, bias, tau_sq = ENSEMBLE.empirical_terms()
    predicted = predicted_delta_gp(ENSEMBLE.variance, bias, tau_sq, 0.5, ENSEMBLE.m)
    result = paired_monte_carlo(g_a, ENSEMBLE.sampler(), beta=0.5, variant=GpVariant.PROJECTION,
                                trials=10_000, seed=11)
    assert result["delta_gp"] == pytest.approx(predicted, rel=0.05)
    assert result["delta_at"] == pytest.approx(ENSEMBLE.variance, rel=0.02)
    assert result["stderr_gp"] < 0.01 * result["delta_gp"]


def test_gp_error_below_at_error_on_controlled_ensemble():
    variance, bias, tau_sq = ENSEMBLE.empirical_terms()
    assert 0.75 * variance > 0.25 * tau_sq * bias
    report = DeltaErrorReport(variance, bias, tau_sq, 0.0, ENSEMBLE.m)
    assert predicted_error_difference(report, 0.5) > 0.0

    g_a, _ = ENSEMBLE.population()
    sampler = ENSEMBLE.sampler()
    wins = 0
    for repetition in range(100):
        result = paired_monte_carlo(g_a, sampler, beta=0.5, trials=20, seed=repetition)
        wins += result["delta_at"] > result["delta_gp"]
    assert wins >= 99


def test_ensemble_reports_both_variants():
    g_a, _ = ENSEMBLE.population()
    projection = monte_carlo_delta(g_a, ENSEMBLE.sampler(), 0.5, GpVariant.PROJECTION, trials=200, seed=3)
    cosine = monte_carlo_delta(g_a, ENSEMBLE.sampler(), 0.5, GpVariant.COSINE, trials=200, seed=3)
    assert projection < ENSEMBLE.variance
    assert cosine < ENSEMBLE.variance
