from contextlib import nullcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskprobe import attacks
from maskprobe.attacks import AttackConfig, fgsm, gpga, pgd, randomized_inference_wrapper, run_attack
from maskprobe.autodiff import RngState
from maskprobe.errors import ContractViolation
from maskprobe.models import ModelArch, forward_logits, init_model


def linear_model(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    model = init_model(ModelArch.mlp([w.shape[0], w.shape[1]]), RngState(0))
    model.weights["fc0.weight"] = w
    model.weights["fc0.bias"] = np.zeros(w.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    return model


@pytest.fixture(scope="module")
def small_pair():
    arch = ModelArch.mlp([12, 16, 4])
    return init_model(arch, RngState(1)), init_model(arch, RngState(2))


@pytest.fixture(scope="module")
def points():
    rng = np.random.default_rng(0)
    return rng.uniform(-0.8, 0.8, (40, 12)), rng.integers(0, 4, 40)


def test_zero_iterations_is_identity(small_pair, points):
    model, sur = small_pair
    x, y = points
    cfg = AttackConfig(0.3, 0.075, 0)
    for out in (pgd(model, x, y, cfg), gpga(model, sur, x, y, cfg)):
        np.testing.assert_array_equal(out.adversarial, x)
        assert out.grad_l1.shape == (0, len(x))


def test_zero_gradient_leaves_input_unchanged():
    model = linear_model(np.zeros((3, 2)))
    x = np.array([[0.1, -0.2, 0.3]])
    out = pgd(model, x, np.array([0]), AttackConfig(0.3, 0.1, 5))
    np.testing.assert_array_equal(out.adversarial, x)
    np.testing.assert_array_equal(out.grad_l1, 0.0)


def test_fgsm_linear_hand_case():
    # logits = [x0 + x1, 0]; CE on class 0 grows as x0 + x1 shrinks
    model = linear_model([[1.0, 0.0], [1.0, 0.0]])
    x = np.array([[0.2, 0.4]])
    out = fgsm(model, x, np.array([0]), 0.1)
    np.testing.assert_allclose(out.adversarial, [[0.1, 0.3]], atol=1e-15)


def test_pgd_on_linear_model_reaches_box_corner():
    w = np.array([[2.0, -1.0], [-1.0, 0.5], [0.5, 0.0], [-3.0, 1.0]])
    model = linear_model(w)
    x = np.array([[0.1, -0.3, 0.0, 0.2]])
    out = pgd(model, x, np.array([0]), AttackConfig(0.2, 0.05, 20))
    direction = -np.sign(w[:, 0] - w[:, 1])  # CE ascent direction for class 0
    np.testing.assert_allclose(out.adversarial, x + 0.2 * direction, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.005, 0.5), st.integers(0, 6), st.booleans(), st.integers(0, 2 ** 31))
def test_budget_and_pixel_range_hold(eps, step, iters, rand, seed):
    # 60 configs x 170 samples exceeds 10^4 attacked points
    rng = np.random.default_rng(seed)
    model = init_model(ModelArch.mlp([6, 8, 3]), RngState(seed))
    x = rng.uniform(-1, 1, (170, 6))
    x[:10] = np.sign(x[:10])  # inputs on the pixel boundary
    y = rng.integers(0, 3, 170)
    with pytest.warns(UserWarning) if step > 2 * eps else nullcontext():
        cfg = AttackConfig(eps, step, iters, random_init=rand, rng=RngState(seed))
    for out in (pgd(model, x, y, cfg), fgsm(model, x, y, eps)):
        assert np.all(np.abs(out.adversarial - x) <= eps + 1e-12)
        assert out.adversarial.min() >= -1.0 and out.adversarial.max() <= 1.0


def test_gpga_is_deterministic(small_pair, points):
    model, sur = small_pair
    x, y = points
    cfg = AttackConfig.default(0.3)
    a, b = gpga(model, sur, x, y, cfg), gpga(model, sur, x, y, cfg)
    assert a.adversarial.tobytes() == b.adversarial.tobytes()
    assert a.grad_l1.shape == (20, len(x))


def test_gpga_rejects_class_mismatch(points):
    x, y = points
    model = init_model(ModelArch.mlp([12, 4]), RngState(0))
    sur = init_model(ModelArch.mlp([12, 5]), RngState(0))
    with pytest.raises(ContractViolation, match="4 classes.*5"):
        gpga(model, sur, x, y, AttackConfig.default(0.3))


def test_gpga_self_surrogate_still_moves(small_pair, points):
    model, _ = small_pair
    x, y = points
    out = gpga(model, model, x, y, AttackConfig.default(0.3))
    assert np.abs(out.adversarial - x).max() > 0


def test_per_sample_equals_batched(small_pair, points):
    model, sur = small_pair
    x, y = points
    cfg = AttackConfig.default(0.3)
    for kind in ("pgd", "cw", "gpga"):
        batched = run_attack(kind, model, x, y, cfg, sur).adversarial
        single = np.concatenate([run_attack(kind, model, x[i:i + 1], y[i:i + 1], cfg, sur).adversarial
                                 for i in range(len(x))])
        np.testing.assert_allclose(batched, single, atol=1e-12)
        chunked = run_attack(kind, model, x, y, cfg, sur, chunk=7).adversarial
        np.testing.assert_allclose(batched, chunked, atol=1e-12)


def test_random_start_is_chunk_independent(small_pair, points):
    model, _ = small_pair
    x, y = points
    cfg = lambda: AttackConfig(0.3, 0.075, 3, random_init=True, rng=RngState(5))  # noqa: E731
    a = pgd(model, x, y, cfg()).adversarial
    b = pgd(model, x, y, cfg(), chunk=9).adversarial
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_success_flags_match_predictions(small_pair, points):
    model, _ = small_pair
    x, y = points
    out = pgd(model, x, y, AttackConfig.default(0.3))
    np.testing.assert_array_equal(out.success, forward_logits(model, out.adversarial).argmax(1) != y)


def test_empty_batch(small_pair):
    model, sur = small_pair
    out = gpga(model, sur, np.zeros((0, 12)), np.zeros(0, dtype=int), AttackConfig.default(0.3))
    assert out.adversarial.shape == (0, 12)


@pytest.mark.parametrize("kwargs", [
    dict(epsilon=0.0, step=0.1, iters=1),
    dict(epsilon=0.3, step=0.0, iters=1),
    dict(epsilon=0.3, step=0.1, iters=-1),
    dict(epsilon=0.3, step=0.1, iters=1, loss="hinge"),
    dict(epsilon=0.3, step=0.1, iters=1, random_init=True),
])
def test_config_validation(kwargs):
    with pytest.raises(ContractViolation):
        AttackConfig(**kwargs)


def test_large_step_warns():
    with pytest.warns(UserWarning):
        AttackConfig(0.1, 0.5, 1)


def test_out_of_range_input(small_pair):
    model, _ = small_pair
    with pytest.raises(ContractViolation):
        pgd(model, np.full((1, 12), 1.5), np.array([0]), AttackConfig.default(0.3))


def test_pgd_refuses_match_deceive(small_pair, points):
    model, _ = small_pair
    with pytest.raises(ContractViolation):
        pgd(model, *points, AttackConfig(0.3, 0.1, 1, loss="match-deceive"))


class TestRandomizedInference:
    def test_zero_eta_is_transparent(self, small_pair, points):
        model, _ = small_pair
        x, _ = points
        wrapped = randomized_inference_wrapper(model, 0.0, 0.3, RngState(0))
        np.testing.assert_array_equal(forward_logits(wrapped, x), forward_logits(model, x))

    def test_positive_eta_is_stochastic(self, small_pair, points):
        model, _ = small_pair
        x, _ = points
        wrapped = randomized_inference_wrapper(model, 2.0, 0.3, RngState(0))
        assert not np.array_equal(forward_logits(wrapped, x), forward_logits(wrapped, x))

    def test_same_seed_reproduces(self, small_pair, points):
        model, _ = small_pair
        x, _ = points
        a = forward_logits(randomized_inference_wrapper(model, 2.0, 0.3, RngState(4)), x)
        b = forward_logits(randomized_inference_wrapper(model, 2.0, 0.3, RngState(4)), x)
        np.testing.assert_array_equal(a, b)

    def test_attackable(self, small_pair, points):
        model, _ = small_pair
        wrapped = randomized_inference_wrapper(model, 1.0, 0.3, RngState(1))
        out = pgd(wrapped, *points, AttackConfig.default(0.3))
        assert np.all(np.abs(out.adversarial - points[0]) <= 0.3 + 1e-12)

    def test_negative_eta(self, small_pair):
        with pytest.raises(ContractViolation):
            randomized_inference_wrapper(small_pair[0], -1.0, 0.3, RngState(0))


def test_project_clamps_pixels():
    x = np.array([0.95, -0.95])
    np.testing.assert_array_equal(attacks.project(np.array([1.3, -1.3]), x, 0.3), [1.0, -1.0])
