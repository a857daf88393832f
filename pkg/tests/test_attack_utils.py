import numpy as np
import pytest

from utils.attack_utils import (
    AttackKind,
    AttackSpec,
    _BestTracker,
    apgd_checkpoints,
    apgd_lite_attack,
    attack_rng,
    ball_for,
    pgd_attack,
    run_attack,
    steepest_step,
    worst_case_batch,
)
from utils.lp_utils import AttackNorm, lp_norm
from utils.tensor_utils import DenseLayer, MlpModel, Tensor, init_mlp

WIDE_BOX = (-10.0, 10.0)
DUAL = {AttackNorm.LINF: AttackNorm.L1, AttackNorm.L2: AttackNorm.L2}


def linear_classifier(rng, d=6):
    weight = rng.normal(scale=0.5, size=(d, 2))
    bias = rng.normal(scale=0.1, size=2)
    return MlpModel([DenseLayer("fc1", Tensor(weight, requires_grad=True),
                                Tensor(bias, requires_grad=True), "identity")])


def worst_case_loss(model, x, y, norm, eps):
    """Closed-form maximal cross-entropy of a two-class linear model over an lp ball."""
    w = model.layers[0].weight.data
    b = model.layers[0].bias.data
    other = 1 - y
    direction = w[:, y] - w[:, other]
    margin = x @ direction + b[y] - b[other]
    worst = margin - eps * lp_norm(direction, DUAL[norm])
    return np.logaddexp(0.0, -worst)


@pytest.mark.parametrize("norm", [AttackNorm.LINF, AttackNorm.L2])
@pytest.mark.parametrize("kind", list(AttackKind))
def test_attacks_reach_linear_optimum(norm, kind):
    rng = np.random.default_rng(42)
    for trial in range(5):
        model = linear_classifier(rng)
        x = rng.uniform(-1.0, 1.0, size=(4, 6))
        y = rng.integers(0, 2, size=4)
        if kind is AttackKind.PGD:
            # L2 PGD needs a step of order eps to settle on the sphere; see the default-step test below.
            step_size = 0.3 if norm is AttackNorm.L2 else None
            spec = AttackSpec(norm, 0.3, steps=60, kind=kind, step_size=step_size)
        else:
            spec = AttackSpec(norm, 0.3, steps=100, kind=kind)
        adv = run_attack(model, x, y, ball_for(spec, x, WIDE_BOX), spec, attack_rng(trial))
        expected = np.array([worst_case_loss(model, x[i], y[i], norm, 0.3) for i in range(4)])
        np.testing.assert_allclose(adv.per_sample_loss, expected, rtol=1e-6)


def test_default_step_l2_pgd_stops_short_of_the_optimum():
    # 2*eps/steps shrinks with the budget, so the tangential error never decays; more steps do not help.
    rng = np.random.default_rng(42)
    gaps = []
    for trial in range(5):
        model = linear_classifier(rng)
        x = rng.uniform(-1.0, 1.0, size=(4, 6))
        y = rng.integers(0, 2, size=4)
        spec = AttackSpec(AttackNorm.L2, 0.3, steps=60, kind=AttackKind.PGD)
        adv = run_attack(model, x, y, ball_for(spec, x, WIDE_BOX), spec, attack_rng(trial))
        expected = np.array([worst_case_loss(model, x[i], y[i], AttackNorm.L2, 0.3) for i in range(4)])
        assert np.all(adv.per_sample_loss <= expected * (1.0 + 1e-12))
        gaps.append(np.max((expected - adv.per_sample_loss) / expected))
    assert max(gaps) > 1e-3


def test_tracker_remembers_any_misclassified_iterate():
    labels = np.array([0])
    # Start: class 1 wins. Next: class 0 wins with a higher loss because the mass spreads over two rivals.
    first, second = np.array([[1.0, 1.2, -10.0]]), np.array([[1.0, 0.9, 0.9]])
    loss = lambda logits: np.logaddexp.reduce(logits, axis=1) - logits[:, 0]  # noqa: E731
    assert loss(second)[0] > loss(first)[0]

    tracker = _BestTracker(np.zeros((1, 2)), loss(first), np.zeros((1, 2)), first, labels)
    tracker.update(np.ones((1, 2)), loss(second), np.zeros((1, 2)), second)
    adv = tracker.result()
    assert adv.logits.argmax(axis=1)[0] == 0
    assert adv.fooled.tolist() == [True]


@pytest.mark.parametrize("kind", list(AttackKind))
def test_fooled_covers_the_returned_iterate(kind, blobs, blob_model):
    spec = AttackSpec(AttackNorm.LINF, 0.2, steps=6, kind=kind)
    adv = run_attack(blob_model, blobs.x, blobs.y, ball_for(spec, blobs.x), spec, attack_rng(3))
    assert np.all(adv.fooled[adv.logits.argmax(axis=1) != blobs.y])

    specs = [AttackSpec(AttackNorm.L2, 0.1, steps=3), spec]
    chosen = worst_case_batch(blob_model, blobs.x, blobs.y, specs)
    assert np.all(chosen.fooled[chosen.logits.argmax(axis=1) != blobs.y])


@pytest.mark.parametrize("norm", list(AttackNorm))
@pytest.mark.parametrize("kind", list(AttackKind))
def test_attack_output_is_feasible(norm, kind, blobs, blob_model):
    spec = AttackSpec(norm, 0.2, steps=8, kind=kind)
    ball = ball_for(spec, blobs.x)
    adv = run_attack(blob_model, blobs.x, blobs.y, ball, spec, attack_rng(0))
    assert np.all(ball.contains(adv.x_adv))
    assert adv.x_adv.shape == blobs.x.shape
    assert len(adv.loss_history) == spec.steps + 1
    for earlier, later in zip(adv.loss_history, adv.loss_history[1:]):
        assert np.all(later >= earlier)


def test_attack_never_lowers_loss_below_start(blobs, blob_model):
    spec = AttackSpec(AttackNorm.LINF, 0.1, steps=5)
    adv = pgd_attack(blob_model, blobs.x, blobs.y, ball_for(spec, blobs.x), spec, attack_rng(1))
    np.testing.assert_array_equal(adv.per_sample_loss, adv.loss_history[-1])
    assert np.all(adv.per_sample_loss >= adv.loss_history[0])


def test_zero_steps_is_identity(moons, small_model):
    for kind in AttackKind:
        spec = AttackSpec(AttackNorm.L2, 0.1, steps=0, kind=kind)
        adv = run_attack(small_model, moons.x, moons.y, ball_for(spec, moons.x), spec)
        np.testing.assert_array_equal(adv.x_adv, moons.x)


def test_seeded_attacks_are_deterministic(moons, small_model):
    spec = AttackSpec(AttackNorm.L1, 0.2, steps=6, kind=AttackKind.APGD_LITE)
    ball = ball_for(spec, moons.x)
    first = apgd_lite_attack(small_model, moons.x, moons.y, ball, spec, attack_rng(5, 1, 2, 0))
    second = apgd_lite_attack(small_model, moons.x, moons.y, ball, spec, attack_rng(5, 1, 2, 0))
    np.testing.assert_array_equal(first.x_adv, second.x_adv)


def test_attack_kind_must_match():
    spec = AttackSpec(AttackNorm.L2, 0.1, kind=AttackKind.APGD_LITE)
    x = np.full((1, 2), 0.5)
    with pytest.raises(ValueError):
        pgd_attack(init_mlp([2, 3, 2]), x, np.array([0]), ball_for(spec, x), spec)


def test_ball_must_match_norm(moons, small_model):
    spec = AttackSpec(AttackNorm.L2, 0.1)
    other = AttackSpec(AttackNorm.LINF, 0.1)
    with pytest.raises(ValueError):
        pgd_attack(small_model, moons.x, moons.y, ball_for(other, moons.x), spec)


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(AttackNorm.L2, 0.0)
    with pytest.raises(ValueError):
        AttackSpec(AttackNorm.L2, 0.1, steps=-1)
    with pytest.raises(ValueError):
        AttackSpec(AttackNorm.L1, 0.1, l1_sparsity=0.0)
    assert AttackSpec("linf", 0.1, steps=10).effective_step_size == pytest.approx(0.02)
    assert AttackSpec("linf", 0.1, kind="apgd_lite").effective_step_size == pytest.approx(0.2)


def test_steepest_steps():
    grad = np.array([[0.5, -2.0, 0.0, 1.0]])
    np.testing.assert_array_equal(steepest_step(grad, AttackNorm.LINF, 0.1), [[0.1, -0.1, 0.0, 0.1]])
    l2 = steepest_step(grad, AttackNorm.L2, 0.3)
    assert np.linalg.norm(l2) == pytest.approx(0.3)
    np.testing.assert_array_equal(steepest_step(np.zeros((1, 3)), AttackNorm.L2, 0.3), np.zeros((1, 3)))

    l1 = steepest_step(grad, AttackNorm.L1, 0.4, sparsity=0.5)
    np.testing.assert_allclose(l1, [[0.0, -0.2, 0.0, 0.2]])


def test_l1_step_ties_prefer_lower_index():
    grad = np.array([1.0, 1.0, 1.0, -1.0])
    np.testing.assert_allclose(steepest_step(grad, AttackNorm.L1, 1.0, sparsity=0.25), [1.0, 0.0, 0.0, 0.0])


def test_l1_attack_skips_pinned_coordinates():
    # Raising either input hurts class 0; the first input already sits on the upper box face.
    model = MlpModel([DenseLayer("fc1", Tensor(np.array([[-1.0, 1.0], [-0.1, 0.1]]), requires_grad=True),
                                Tensor(np.zeros(2), requires_grad=True), "identity")])
    x = np.array([[1.0, 0.5]])
    spec = AttackSpec(AttackNorm.L1, 0.3, steps=20, step_size=0.1, l1_sparsity=0.5)
    adv = pgd_attack(model, x, np.array([0]), ball_for(spec, x), spec, attack_rng(0))
    assert adv.x_adv[0, 0] == 1.0
    assert adv.x_adv[0, 1] > 0.75


def test_apgd_checkpoints():
    assert apgd_checkpoints(10) == [3, 5, 6, 7, 8, 9, 10]
    assert apgd_checkpoints(1) == [1]


def test_worst_case_keeps_highest_loss(blobs, blob_model):
    specs = [AttackSpec(AttackNorm.L2, 0.05, steps=3), AttackSpec(AttackNorm.LINF, 0.1, steps=3)]
    chosen = worst_case_batch(blob_model, blobs.x, blobs.y, specs, rng_key=(2, 3))
    runs = [run_attack(blob_model, blobs.x, blobs.y, ball_for(s, blobs.x), s, attack_rng(s.seed, 2, 3, slot))
            for slot, s in enumerate(specs)]
    np.testing.assert_array_equal(chosen.per_sample_loss,
                                  np.maximum(runs[0].per_sample_loss, runs[1].per_sample_loss))
    expected_source = (runs[1].per_sample_loss > runs[0].per_sample_loss).astype(int)
    np.testing.assert_array_equal(chosen.source, expected_source)


def test_worst_case_single_spec_matches_run_attack(moons, small_model):
    spec = AttackSpec(AttackNorm.LINF, 0.08, steps=4)
    chosen = worst_case_batch(small_model, moons.x, moons.y, [spec], rng_key=(1, 0))
    alone = run_attack(small_model, moons.x, moons.y, ball_for(spec, moons.x), spec, attack_rng(0, 1, 0, 0))
    np.testing.assert_array_equal(chosen.x_adv, alone.x_adv)
