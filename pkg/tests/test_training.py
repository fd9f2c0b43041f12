import numpy as np
import pytest

from maskprobe import training
from maskprobe.autodiff import RngState
from maskprobe.errors import ContractViolation
from maskprobe.harness.data import generate_synthetic
from maskprobe.models import ModelArch, init_model, predict
from maskprobe.training import TrainConfig


@pytest.fixture(scope="module")
def blobs():
    return generate_synthetic(3, 40, 8, 4.0, RngState(0))


ARCH = ModelArch.mlp([8, 16, 3])


def quick(**kw):
    base = dict(epochs=2, batch_size=16, lr=0.05, lr_decay_epochs=(), epsilon=0.2)
    base.update(kw)
    return TrainConfig(**base)


def test_natural_training_separates_blobs():
    data = generate_synthetic(3, 100, 16, 4.0, RngState(3))
    test = generate_synthetic(3, 100, 16, 4.0, RngState(3), split="test")
    model = training.train_natural(ModelArch.mlp([16, 32, 3]), data,
                                   TrainConfig(epochs=50, batch_size=32, lr=0.1, lr_decay_epochs=()))
    assert (predict(model, test.images) == test.labels).mean() >= 0.99


def test_single_sgd_step_decreases_loss(blobs):
    model = init_model(ARCH, RngState(5))
    x, y = blobs.images[:32], blobs.labels[:32]
    loss = lambda p: training.natural_loss(model, x, y, 0.0, p)  # noqa: E731
    before = training.sgd_step(model, loss, 0.01)
    assert loss(None).item() < before


@pytest.mark.parametrize("name", sorted(training.TRAINERS))
def test_trainers_are_deterministic(name, blobs):
    cfg = quick(eta=2.0, delta=0.5, beta=1.0, attack_iters=2, seed=7)
    a = training.TRAINERS[name](ARCH, blobs, cfg)
    b = training.TRAINERS[name](ARCH, blobs, cfg)
    for k in a.weights:
        assert a.weights[k].tobytes() == b.weights[k].tobytes()
    assert a.provenance["method"] == name


def test_seed_changes_result(blobs):
    a = training.train_natural(ARCH, blobs, quick(seed=1))
    b = training.train_natural(ARCH, blobs, quick(seed=2))
    assert not np.array_equal(a.weights["fc0.weight"], b.weights["fc0.weight"])


def test_trades_without_kl_is_natural_training(blobs):
    cfg = quick(beta=0.0, seed=3)
    a = training.train_trades(ARCH, blobs, cfg)
    b = training.train_natural(ARCH, blobs, cfg)
    for k in a.weights:
        np.testing.assert_array_equal(a.weights[k], b.weights[k])


def test_mask_at_without_noise_or_smoothing_is_fgsm_at(blobs):
    cfg = quick(seed=4)
    a = training.train_mask_at(ARCH, blobs, cfg)
    b = training.train_fgsm_at(ARCH, blobs, quick(seed=4, eta=3.0, delta=0.5))
    for k in a.weights:
        np.testing.assert_array_equal(a.weights[k], b.weights[k])


def test_single_iteration_pgd_at_runs(blobs):
    model = training.train_pgd_at(ARCH, blobs, quick(attack_iters=1))
    assert model.provenance["hyperparameters"]["attack_iters"] == 1


def test_pgd_at_needs_an_iteration(blobs):
    with pytest.raises(ContractViolation):
        training.train_pgd_at(ARCH, blobs, quick(attack_iters=0))


def test_mask_at_records_provenance(blobs):
    model = training.train_mask_at(ARCH, blobs, quick(eta=6, delta=0.75))
    assert model.provenance["method"] == "mask-at"
    assert model.provenance["hyperparameters"]["eta"] == 6
    assert model.provenance["hyperparameters"]["delta"] == 0.75


def test_mask_at_adversary_stays_in_budget(blobs):
    model = init_model(ARCH, RngState(0))
    x, y = blobs.images[:50], blobs.labels[:50]
    adv = training.mask_at_adversary(model, x, y, 0.2, 6.0, 0.75, RngState(1))
    assert np.abs(adv - x).max() <= 0.2 + 1e-12
    assert adv.min() >= -1 and adv.max() <= 1


def test_budget_violation_is_an_assertion():
    with pytest.raises(AssertionError, match="epsilon ball"):
        training._check_budget(np.array([0.5]), np.array([0.0]), 0.3)


def test_epoch_hook_rows(blobs):
    rows = []
    training.train_natural(ARCH, blobs, quick(epochs=3), on_epoch=rows.append)
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert all(np.isfinite(r["loss"]) for r in rows)


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=0.1, lr_decay_epochs=(2, 4), lr_decay_factor=0.5)
    assert [cfg.lr_at(e) for e in range(5)] == [0.1, 0.1, 0.05, 0.05, 0.025]
    assert TrainConfig(epsilon=0.3).step == pytest.approx(0.075)


def test_epsilon_warmup_ramp():
    cfg = TrainConfig(epsilon=0.3, epsilon_warmup=2, attack_step=0.1)
    assert [cfg.epsilon_at(e) for e in range(4)] == pytest.approx([0.1, 0.2, 0.3, 0.3])
    # the step keeps its ratio to the current budget
    assert [cfg.step_at(e) for e in range(4)] == pytest.approx([0.1 / 3, 0.2 / 3, 0.1, 0.1])
    assert TrainConfig(epsilon=0.3).epsilon_at(0) == 0.3


def test_warmup_budget_reaches_the_adversary(blobs, monkeypatch):
    seen = []
    real = training.pgd_adversary

    def spy(model, x, y, epsilon, step, *rest):
        seen.append((epsilon, step))
        return real(model, x, y, epsilon, step, *rest)

    monkeypatch.setattr(training, "pgd_adversary", spy)
    training.train_pgd_at(ARCH, blobs, quick(epochs=3, epsilon_warmup=1, batch_size=120, attack_iters=1))
    np.testing.assert_allclose(seen, [(0.1, 0.025), (0.2, 0.05), (0.2, 0.05)], rtol=1e-12)


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(lr=0.0), dict(delta=1.5), dict(eta=-1), dict(beta=-1),
                                    dict(epsilon_warmup=-1)])
def test_config_validation(kwargs):
    with pytest.raises(ContractViolation):
        TrainConfig(**kwargs)


def test_label_out_of_range(blobs):
    with pytest.raises(ContractViolation):
        training.train_natural(ModelArch.mlp([8, 2]), blobs, quick())
