import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gashis.tensor as T
from gashis.evaluation import evaluate
from gashis.model import GasHisTransformer, ModelConfig
from gashis.preprocess import augment_six, synth_dataset
from gashis.robustness import (
    EPSILONS,
    KINDS,
    NOISES,
    PerturbationSpec,
    add_noise,
    attack_deepfool,
    attack_gradient,
    corrupted_fraction,
    loss_gradient,
    perturb,
    sweep,
)
from gashis.tensor import ContractError, Tensor
from gashis.training import TrainConfig, fit
from helpers import Linear, random_linear


# ----------------------------------------------------------------- epsilon grid

def test_epsilon_grid():
    assert EPSILONS == (0.001, 0.002, 0.004, 0.008, 0.016, 0.032, 0.064, 0.128, 0.256)
    assert len(KINDS) == 10


def test_spec_contracts():
    with pytest.raises(ContractError):
        PerturbationSpec("blur", 0.1)
    with pytest.raises(ContractError):
        PerturbationSpec("fgsm", -0.1)
    with pytest.raises(ContractError):
        PerturbationSpec("pgd", 0.01, step_size=0.02)
    with pytest.raises(ContractError):
        PerturbationSpec("salt-pepper", 1.5)
    assert PerturbationSpec("pgd", 0.008).alpha == 0.002


# ------------------------------------------------------------ gradient attacks

@pytest.mark.parametrize("kind", ["fgm", "fgsm", "pgd"])
def test_zero_epsilon_is_identity(kind):
    model, x = random_linear((2, 3, 4, 4))
    res = attack_gradient(model, x, np.array([0, 1]), PerturbationSpec(kind, 0.0))
    np.testing.assert_array_equal(res.x, x)


def test_scalar_linear_fgsm_moves_up_by_epsilon():
    # logits [0, w x] with w > 0 and true class 0: the loss grows with x
    model = Linear([[0.0, 2.0]], [0.0, 0.0])
    x = np.full((1, 1, 1, 1), 0.5)
    res = attack_gradient(model, x, np.array([0]), PerturbationSpec("fgsm", 0.016))
    assert res.x[0, 0, 0, 0] == pytest.approx(0.516, abs=1e-15)


def test_loss_gradient_matches_hand_value():
    model = Linear([[0.0, 2.0]], [0.0, 0.0])
    x = np.full((1, 1, 1, 1), 0.5)
    p1 = np.exp(1.0) / (1.0 + np.exp(1.0))
    assert loss_gradient(model, x, np.array([0]))[0, 0, 0, 0] == pytest.approx(2.0 * p1)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**16),
    kind=st.sampled_from(["fgm", "fgsm", "pgd"]),
    eps=st.sampled_from(EPSILONS),
)
def test_attack_norm_bounds_and_range(seed, kind, eps):
    model, x = random_linear((3, 3, 4, 4), seed=seed)
    y = np.random.default_rng(seed).integers(0, 3, 3)
    adv = attack_gradient(model, x, y, PerturbationSpec(kind, eps)).x
    delta = (adv - x).reshape(3, -1)
    if kind == "fgm":
        assert np.sqrt((delta**2).sum(axis=1)).max() <= eps * (1 + 1e-6)
    else:
        assert np.abs(delta).max() <= eps
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_fgm_zero_gradient_is_flagged():
    model = Linear(np.zeros((48, 2)), [0.0, 0.0])
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 4, 4))
    res = attack_gradient(model, x, np.array([0, 1]), PerturbationSpec("fgm", 0.1))
    assert res.failed.all()
    np.testing.assert_array_equal(res.x, x)


def test_pgd_raises_the_loss():
    model, x = random_linear((4, 3, 4, 4), seed=3)
    y = np.array([0, 1, 2, 0])

    def loss(z):
        return T.cross_entropy(model(Tensor(z, dtype="fp64")), y).item()

    pgd = attack_gradient(model, x, y, PerturbationSpec("pgd", 0.032)).x
    assert loss(pgd) > loss(x)


def test_attacks_leave_parameter_gradients_alone():
    model = GasHisTransformer(ModelConfig.desk())
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 80, 80))
    attack_gradient(model, x, np.array([0, 1]), PerturbationSpec("fgsm", 0.01))
    assert all(p.grad is None and p.requires_grad for p in model.parameters())
    assert model.training


# --------------------------------------------------------------------- DeepFool

@pytest.mark.parametrize("seed", range(5))
def test_deepfool_linear_closed_form(seed):
    rng = np.random.default_rng(seed)
    w, b = rng.normal(size=12), 0.3
    x = rng.normal(size=(1, 3, 2, 2))
    score = float(w @ x.ravel() + b)
    y = 0 if score > 0 else 1
    # logits [s, 0]: class 0 wins exactly when s = w.x + b > 0
    model = Linear(np.stack([w, np.zeros(12)], axis=1), [b, 0.0])
    res = attack_deepfool(model, x, overshoot=0.02, valid_range=None)
    expected = -(score / (w @ w)) * w * 1.02
    got = (res.x - x).ravel()
    assert np.linalg.norm(got - expected) <= 0.01 * np.linalg.norm(expected)
    assert res.iterations[0] == 1 and not res.failed[0]
    flipped = model(Tensor(res.x, dtype="fp64")).data.argmax(axis=1)[0]
    assert flipped != y
    # minimum-norm: the distance to the hyperplane, inflated only by the overshoot
    dist = abs(score) / np.linalg.norm(w)
    assert dist <= np.linalg.norm(got) <= 1.02 * dist * (1 + 1e-9)


def test_deepfool_multiclass_flips_every_sample():
    model, x = random_linear((5, 3, 4, 4), k=4, seed=7)
    res = attack_deepfool(model, x, valid_range=None)
    clean = model(Tensor(x, dtype="fp64")).data.argmax(axis=1)
    after = model(Tensor(res.x, dtype="fp64")).data.argmax(axis=1)
    assert (after != clean).all() and not res.failed.any()
    assert (res.iterations >= 1).all()


def test_deepfool_skips_misclassified_samples():
    model, x = random_linear((2, 3, 4, 4), k=3, seed=1)
    pred = model(Tensor(x, dtype="fp64")).data.argmax(axis=1)
    wrong = (pred + 1) % 3
    res = attack_deepfool(model, x, y=wrong)
    np.testing.assert_array_equal(res.x, x)
    assert res.iterations.tolist() == [0, 0] and not res.failed.any()


def test_deepfool_unreachable_boundary_is_unconverged():
    # the boundary sits at x = 2, outside the valid range
    model = Linear([[-1.0, 0.0]], [2.0, 0.0])
    x = np.full((1, 1, 1, 1), 0.5)
    res = attack_deepfool(model, x, max_iters=5)
    assert res.failed[0] and res.iterations[0] == 5
    assert res.x.max() <= 1.0


def test_perturb_falls_back_to_clean_on_failure():
    model = Linear([[-1.0, 0.0]], [2.0, 0.0])
    x = np.full((1, 1, 1, 1), 0.5)
    adv, failed = perturb(model, x, np.array([0]), PerturbationSpec("deepfool", 0.1, max_iters=3), seed=0)
    assert failed.tolist() == [True]
    np.testing.assert_array_equal(adv, x)


def test_perturb_projects_deepfool_into_the_ball():
    model, x = random_linear((3, 3, 4, 4), k=3, seed=2)
    y = model(Tensor(x, dtype="fp64")).data.argmax(axis=1)
    adv, _ = perturb(model, x, y, PerturbationSpec("deepfool", 0.004), seed=0)
    assert np.abs(adv - x).max() <= 0.004


# ------------------------------------------------------------------------ noise

def test_gaussian_sigma_over_a_million_pixels():
    x = np.full((1, 1, 1000, 1000), 0.5)
    noisy = add_noise(x, PerturbationSpec("gaussian", 0.1), seed=0)
    assert abs((noisy - x).std() - 0.1) <= 0.005


@pytest.mark.parametrize("kind", ["gaussian", "uniform", "exponential", "rayleigh", "erlang"])
def test_additive_noise_is_centred_with_target_sigma(kind):
    x = np.full((1, 1, 500, 500), 0.5)
    d = add_noise(x, PerturbationSpec(kind, 0.02), seed=1) - x
    assert abs(d.mean()) <= 0.02 * 0.01
    assert abs(d.std() - 0.02) <= 0.02 * 0.02


def test_salt_pepper_fraction():
    x = np.full((2, 3, 100, 100), 0.5)
    noisy = add_noise(x, PerturbationSpec("salt-pepper", 0.1), seed=0)
    assert abs(corrupted_fraction(x, noisy) - 0.1) <= 0.01
    changed = noisy != x
    # a corrupted pixel is corrupted in every channel, to 0 or 1
    assert (changed.all(axis=1) == changed.any(axis=1)).all()
    assert set(np.unique(noisy[changed])) <= {0.0, 1.0}


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(NOISES), eps=st.sampled_from(EPSILONS), seed=st.integers(0, 2**16))
def test_noise_is_seeded_and_in_range(kind, eps, seed):
    x = np.random.default_rng(seed).uniform(0, 1, (2, 3, 8, 8))
    spec = PerturbationSpec(kind, eps)
    a, b = add_noise(x, spec, seed), add_noise(x, spec, seed)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


@pytest.mark.parametrize("kind", NOISES)
def test_noise_vanishes_as_epsilon_shrinks(kind):
    x = np.random.default_rng(0).uniform(0.2, 0.8, (1, 3, 40, 40))
    changes = [np.abs(add_noise(x, PerturbationSpec(kind, e), 0) - x).mean() for e in (0.1, 0.01, 0.001)]
    assert changes[0] > changes[1] > changes[2]
    assert np.abs(add_noise(x, PerturbationSpec(kind, 0.0), 0) - x).max() == 0.0


def test_salt_pepper_needs_images():
    with pytest.raises(ContractError):
        add_noise(np.zeros((4, 4)), PerturbationSpec("salt-pepper", 0.1), 0)


# ------------------------------------------------------------------------ sweep

@pytest.fixture(scope="module")
def trained():
    data = synth_dataset(2, 8, seed=0)
    model = GasHisTransformer(ModelConfig.desk())
    fit(model, data.map(augment_six), data, TrainConfig(epochs=5, batch=16))
    return model.eval()


def test_sweep_grid_and_debug_column(trained, tmp_path):
    data = synth_dataset(2, 3, seed=5)
    res = sweep(trained, data, ["fgsm", "gaussian"], seed=0, debug=True, batch=4)
    assert res.grid().shape == (2, 10, 4)
    assert res.epsilons == [0.0, *EPSILONS]
    clean, _ = evaluate(trained, data, batch=4)
    for kind in ("fgsm", "gaussian"):
        assert res.reports[(kind, 0.0)].as_dict() == clean.as_dict()
    res.write_csv(tmp_path / "sweep.csv")
    rows = list(csv.reader(open(tmp_path / "sweep.csv")))
    assert rows[0] == ["kind", "epsilon", "Pre", "Rec", "F1", "Acc", "failures"]
    assert len(rows) == 1 + 20 and rows[2][1] == "0.001"
    res.write_long(tmp_path / "long.csv")
    assert len(list(csv.reader(open(tmp_path / "long.csv")))) == 1 + 80


def test_sweep_is_deterministic(trained):
    data = synth_dataset(2, 2, seed=6)
    a = sweep(trained, data, ["salt-pepper", "rayleigh"], seed=3, epsilons=EPSILONS[-2:])
    b = sweep(trained, data, ["salt-pepper", "rayleigh"], seed=3, epsilons=EPSILONS[-2:])
    np.testing.assert_array_equal(a.grid(), b.grid())


def test_sweep_rejects_unknown_kind(trained):
    with pytest.raises(ContractError):
        sweep(trained, synth_dataset(2, 1), ["blur"])


@pytest.mark.parametrize("seed", range(3))
def test_pgd_does_not_improve_accuracy(trained, seed):
    data = synth_dataset(2, 6, seed=10 + seed)
    clean, _ = evaluate(trained, data)
    assert clean.acc >= 0.9  # otherwise the comparison says nothing
    res = sweep(trained, data, ["pgd"], epsilons=(0.004, 0.032))
    tolerance = 1.0 / len(data)
    for eps in (0.004, 0.032):
        assert res.reports[("pgd", eps)].acc <= clean.acc + tolerance
