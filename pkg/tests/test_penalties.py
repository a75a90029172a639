import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from monotrain.autodiff import Tensor, grad
from monotrain.models import MlpModel, SlicedClassifier, input_gradients
from monotrain.penalties import (
    PenaltySpec,
    compute_penalty,
    group_cross_entropy,
    hinge_penalties,
    mixup_points,
    omega_group,
    omega_mixup,
    omega_points,
    omega_pointwise,
    omega_random,
    omega_train,
    uniform_box,
)

from oracles import Polynomial, linear_model, parameter_difference, relative_error

UNIT = (np.zeros(1), np.ones(1))


def test_pointwise_examples():
    assert omega_pointwise(linear_model([-2.0, 3.0]), np.array([0.1, 0.2]), [0, 1]).item() == 4.0
    assert omega_pointwise(linear_model([1.0, 1.0]), np.array([0.1, 0.2]), [0, 1]).item() == 0.0
    assert omega_pointwise(Polynomial([-1.0]), np.array([1.0]), [0]).item() == 4.0


def test_pointwise_rejects_bad_dims():
    with pytest.raises(IndexError):
        omega_pointwise(linear_model([1.0, 1.0]), np.zeros(2), [2])
    with pytest.raises(ValueError):
        omega_pointwise(linear_model([1.0, 1.0]), np.zeros(2), [])


def test_train_examples():
    model = Polynomial([-1.0])
    one = np.array([[1.0]])
    assert omega_train(model, one, [0]).item() == omega_pointwise(model, one[0], [0]).item()
    assert omega_train(linear_model([0.5, 2.0]), np.random.default_rng(0).normal(size=(9, 2)), [0, 1]).item() == 0.0
    # point penalties 4 (x = 1) and 0 (x = -1)
    assert omega_train(model, np.array([[1.0], [-1.0]]), [0]).item() == 2.0
    with pytest.raises(ValueError):
        omega_train(model, np.zeros((0, 1)), [0])


def test_random_examples():
    rng = np.random.default_rng(0)
    spec = PenaltySpec("random", random_samples=17, box=UNIT)
    assert omega_random(linear_model([3.0]), spec, [0], rng).item() == 0.0
    assert omega_random(linear_model([-1.0]), spec, [0], rng).item() == 1.0
    with pytest.raises(ValueError):
        omega_random(linear_model([-1.0]), PenaltySpec("random"), [0], rng)


def test_random_estimator_is_unbiased():
    model = MlpModel.build(3, 1, (8,), "tanh", rng=np.random.default_rng(4))
    box = (np.full(3, -2.0), np.full(3, 2.0))
    reference_points = uniform_box(box, 1_000_000, np.random.default_rng(123))
    pointwise = np.concatenate([
        hinge_penalties(input_gradients(model, chunk, [0, 2], create_graph=False)).data
        for chunk in np.array_split(reference_points, 20)
    ])
    reference = pointwise.mean()
    spec = PenaltySpec("random", box=box)
    rng = np.random.default_rng(7)
    estimates = [omega_random(model, spec, [0, 2], rng).item() for _ in range(50)]
    sigma = pointwise.std() / math.sqrt(50 * spec.random_samples)
    assert reference > 0
    assert abs(np.mean(estimates) - reference) < 3 * sigma


def test_mixup_follows_the_pair_sampling_recipe():
    rng_seed = 42
    batch = np.random.default_rng(0).uniform(size=(5, 2))
    box = (np.zeros(2), np.ones(2))
    spec = PenaltySpec("mixup", mixup_pairs=30, box=box)
    replay = np.random.default_rng(rng_seed)
    pool = np.concatenate([batch, uniform_box(box, 5, replay)])
    i = replay.integers(0, 10, size=30)
    j = replay.integers(0, 10, size=30)
    assert np.array_equal(mixup_points(batch, spec, np.random.default_rng(rng_seed), lam=1.0), pool[i])
    assert np.array_equal(mixup_points(batch, spec, np.random.default_rng(rng_seed), lam=0.0), pool[j])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 3000), st.integers(0, 2**31 - 1))
def test_mixup_points_stay_in_box_and_count(n, max_pairs, seed):
    box = (np.array([0.0, -1.0]), np.array([1.0, 3.0]))
    batch = np.random.default_rng(seed).uniform(box[0], box[1], size=(n, 2))
    spec = PenaltySpec("mixup", mixup_pairs=max_pairs, box=box)
    pts = mixup_points(batch, spec, np.random.default_rng(seed))
    assert len(pts) == min(max_pairs, (2 * n) ** 2)
    assert (pts >= box[0]).all() and (pts <= box[1]).all()
    assert len(mixup_points(batch, spec, np.random.default_rng(seed), n_pairs=3)) == min(3, max_pairs)


def test_mixup_is_deterministic_under_seed():
    batch = np.random.default_rng(1).normal(size=(6, 3))
    spec = PenaltySpec("mixup", box=(np.full(3, -3.0), np.full(3, 3.0)))
    a = mixup_points(batch, spec, np.random.default_rng(5))
    b = mixup_points(batch, spec, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_mixup_examples():
    rng = np.random.default_rng(0)
    spec = PenaltySpec("mixup", box=UNIT)
    batch = rng.uniform(size=(8, 1))
    assert omega_mixup(linear_model([2.0]), batch, spec, [0], rng).item() == 0.0
    assert omega_mixup(linear_model([-1.0]), batch, spec, [0], rng).item() == 1.0
    model = MlpModel.build(1, 1, (6,), "tanh", rng=np.random.default_rng(3))
    direct = omega_mixup(model, batch, spec, [0], np.random.default_rng(9)).item()
    pts = mixup_points(batch, spec, np.random.default_rng(9))
    assert direct == omega_train(model, pts, [0]).item()


def test_group_cross_entropy_examples():
    assert group_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]), 1.0).item() == pytest.approx(math.log(2), abs=1e-12)
    assert group_cross_entropy(Tensor([[1.0, 0.0]]), np.array([0]), 1.0).item() == pytest.approx(0.313262, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)), st.floats(-50, 50), st.floats(0.1, 10))
def test_group_cross_entropy_shift_invariant(O, c, mu):
    labels = np.array([0, 3, 1])
    base = group_cross_entropy(Tensor(O), labels, mu).item()
    shifted = group_cross_entropy(Tensor(O + c), labels, mu).item()
    assert shifted == pytest.approx(base, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-5, 5)), st.floats(0.01, 5))
def test_group_cross_entropy_decreases_with_own_total(O, bump):
    before = group_cross_entropy(Tensor(O[None, :]), np.array([2]), 1.0).item()
    raised = O.copy()
    raised[2] += bump
    after = group_cross_entropy(Tensor(raised[None, :]), np.array([2]), 1.0).item()
    assert after < before


def _sliced(seed=0):
    return SlicedClassifier.build(4, 3, hidden=(6,), slice_width=9, head_hidden=(5,), activation="tanh",
                                  rng=np.random.default_rng(seed))


def test_group_validates_labels_and_mu():
    model = _sliced()
    x = np.zeros((2, 4))
    with pytest.raises(ValueError):
        omega_group(model, x, [0, 3], 1.0)
    with pytest.raises(ValueError):
        omega_group(model, x, [0, -1], 1.0)
    with pytest.raises(ValueError):
        omega_group(model, x, [0, 1], 0.0)
    with pytest.raises(ValueError):
        omega_group(model, x, [0, 1], 1.0, gradient="other")


def _check_parameter_gradient(model, objective):
    analytic = [g.data for g in grad(objective(model), model.parameters())]
    numeric = parameter_difference(model, lambda m: objective(m).item())
    assert relative_error(np.concatenate([a.ravel() for a in analytic]),
                          np.concatenate([n.ravel() for n in numeric])) < 1e-3


def test_second_order_train_penalty():
    model = MlpModel.build(3, 1, (5, 5), "tanh", rng=np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(6, 3)) * 2
    assert omega_train(model, x, [0, 1]).item() > 0
    _check_parameter_gradient(model, lambda m: omega_train(m, x, [0, 1]))


def test_second_order_mixup_penalty():
    model = MlpModel.build(3, 1, (5, 5), "tanh", rng=np.random.default_rng(3))
    x = np.random.default_rng(4).normal(size=(4, 3))
    spec = PenaltySpec("mixup", mixup_pairs=20, box=(np.full(3, -3.0), np.full(3, 3.0)))
    pts = mixup_points(x, spec, np.random.default_rng(0))
    assert omega_points(model, pts, [2]).item() > 0
    _check_parameter_gradient(model, lambda m: omega_points(m, pts, [2]))


@pytest.mark.parametrize("gradient", ["label", "own"])
def test_second_order_group_penalty(gradient):
    model = _sliced(2)
    x = np.random.default_rng(5).normal(size=(5, 4))
    y = np.array([0, 1, 2, 2, 0])
    _check_parameter_gradient(model, lambda m: omega_group(m, x, y, 2.0, gradient))


def test_spec_validation():
    for bad in (dict(kind="nope"), dict(random_samples=0), dict(mixup_pairs=0), dict(mu=0.0),
                dict(group_gradient="x"), dict(box=(np.ones(2), np.ones(2)))):
        with pytest.raises(ValueError):
            PenaltySpec(**bad)
    spec = PenaltySpec("random").with_box(UNIT)
    assert spec.kind == "random" and spec.box[1].tolist() == [1.0]


def test_compute_penalty_dispatch():
    rng = np.random.default_rng(0)
    model = linear_model([-1.0])
    x = np.array([[0.5]])
    assert compute_penalty(model, PenaltySpec("none"), x, None, [0], rng) is None
    for kind in ("train", "random", "mixup"):
        assert compute_penalty(model, PenaltySpec(kind, box=UNIT), x, None, [0], rng).item() == 1.0
    sliced = _sliced()
    value = compute_penalty(sliced, PenaltySpec("group", mu=3.0), np.zeros((2, 4)), np.array([0, 1]), (), rng)
    assert value.item() == pytest.approx(omega_group(sliced, np.zeros((2, 4)), [0, 1], 3.0).item())
