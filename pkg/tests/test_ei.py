import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from eiil import EIIL, ERM, IRM, EnvironmentInference
from eiil.core import OptimizerConfig, finite_diff_check
from eiil.datasets import ColorShapeConfig, gen_color_shape
from eiil.ei import (ColorReference, ReferencePack, ei_objective, harden, infer_env_binned,
                     infer_env_error_split, infer_env_gradient, random_split, reference_pack,
                     split_objective)
from eiil.exceptions import DegenerateSplitError, ValidationError
from eiil.metrics import delta_eic


def random_pack(n, seed, scale=3.0):
    rng = np.random.default_rng(seed)
    return ReferencePack.from_logits(rng.normal(scale=scale, size=n),
                                     rng.integers(0, 2, size=n))


def brute_force_max(pack, normalization="n"):
    best = -math.inf
    for bits in itertools.product((0.0, 1.0), repeat=len(pack)):
        q = np.array(bits)
        if normalization == "mass" and (q.sum() == 0 or q.sum() == len(q)):
            continue
        best = max(best, ei_objective(pack, q, normalization)[0])
    return best


def test_zero_logit_pack_has_zero_factors():
    pack = ReferencePack.from_logits(np.zeros(6), [0, 1, 1, 0, 1, 0])
    assert np.all(pack.grad_factors == 0)
    np.testing.assert_allclose(pack.losses, math.log(2))


def test_confident_correct_pack_is_near_zero():
    y = np.array([0, 1, 1, 0], dtype=float)
    pack = ReferencePack.from_logits(100 * (2 * y - 1), y)
    assert np.all(pack.losses < 1e-40)
    assert np.all(np.abs(pack.grad_factors) < 1e-40)


def test_pack_matches_scalar_recomputation():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 2))
    y = (X[:, 0] > 0).astype(float)
    model = ERM(architecture="linear", n_steps=50, learning_rate=0.1).fit(X, y)
    pack = reference_pack(model, X, y)
    W, b = model.network_.layers()[0]
    for i in range(10):
        f = float(X[i, 0] * W[0, 0] + X[i, 1] * W[1, 0] + b[0])
        p = 1.0 / (1.0 + math.exp(-f))
        ell = -(y[i] * math.log(p) + (1 - y[i]) * math.log(1 - p))
        assert pack.logits[i] == pytest.approx(f, rel=1e-12)
        assert pack.losses[i] == pytest.approx(ell, rel=1e-10)
        assert pack.grad_factors[i] == pytest.approx((p - y[i]) * f, rel=1e-10, abs=1e-15)
    assert pack.is_consistent()


def test_classification_pack_rejects_regression_targets():
    with pytest.raises(ValidationError):
        reference_pack(lambda X: X[:, 0], np.ones((3, 1)), [0.5, 1.0, 2.0])
    pack = reference_pack(lambda X: X[:, 0], np.ones((3, 1)), [0.5, 1.0, 2.0], "squared_error")
    np.testing.assert_allclose(pack.grad_factors, [0.5, 0.0, -1.0])


def test_uniform_assignment_value():
    pack = random_pack(9, 1)
    g = pack.grad_factors
    value, _ = ei_objective(pack, np.full(9, 0.5))
    assert value == pytest.approx(2 * (0.5 * g.sum() / 9) ** 2, rel=1e-12)


@pytest.mark.parametrize("normalization", ["n", "mass"])
def test_objective_gradient_matches_finite_differences(normalization):
    rng = np.random.default_rng(2)
    for k in range(10):
        pack = random_pack(10, k)
        q = rng.uniform(0.1, 0.9, size=10)
        err = finite_diff_check(lambda p: ei_objective(pack, p, normalization), q, h=1e-6)
        assert err < 1e-4


def test_zero_factor_pack_gives_zero_for_every_q():
    y = np.array([1.0, 0.0, 1.0])
    pack = ReferencePack.from_logits(np.zeros(3), y)
    for q in ([0, 0, 1], [0.3, 0.9, 0.1], [1, 1, 1]):
        assert ei_objective(pack, np.array(q, dtype=float))[0] == 0.0


def test_mass_normalization_rejects_empty_environment():
    pack = random_pack(4, 0)
    with pytest.raises(DegenerateSplitError):
        ei_objective(pack, np.ones(4), "mass")
    assert split_objective(pack, np.ones(4, dtype=int), "mass") == -math.inf


def test_objective_rejects_bad_q():
    pack = random_pack(3, 0)
    with pytest.raises(ValidationError):
        ei_objective(pack, [0.2, 1.2, 0.5])
    with pytest.raises(ValidationError):
        ei_objective(pack, [0.2, 0.5])
    with pytest.raises(ValidationError):
        ei_objective(pack, [0.2, 0.5, 0.1], "sum")


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_inference_reaches_exhaustive_max(seed):
    pack = random_pack(12, seed)
    q = infer_env_gradient(pack)
    assert split_objective(pack, harden(q)) >= brute_force_max(pack) - 1e-6


def test_gradient_inference_is_deterministic():
    pack = random_pack(8, 4)
    cfg = OptimizerConfig(learning_rate=1e-2, steps=300, seed=3)
    a, info = infer_env_gradient(pack, cfg, n_restarts=3, return_info=True)
    b = infer_env_gradient(pack, cfg, n_restarts=3)
    assert np.array_equal(a, b)
    assert len(info["restart_objectives"]) == 3
    assert np.all((a >= 0) & (a <= 1))


def test_color_reference_split_matches_label_color_agreement():
    d = gen_color_shape(ColorShapeConfig(samples_per_env=1000, seed=0))
    pack = reference_pack(ColorReference(), d.X, d.y)
    q = infer_env_gradient(pack, OptimizerConfig(learning_rate=1e-2, steps=2000), n_restarts=2)
    split = harden(q).assignment
    agree = np.where(d.y == d.aux["color"], 1, 2)
    match = max(np.mean(split == agree), np.mean(split == 3 - agree))
    assert match >= 0.99


def test_identical_examples_are_exchangeable():
    pack = ReferencePack.from_logits([1.5, 1.5, -0.3, 2.0], [0, 0, 1, 1])
    q = np.array([0.2, 0.7, 0.4, 0.9])
    swapped = q[[1, 0, 2, 3]]
    for norm in ("n", "mass"):
        assert ei_objective(pack, q, norm)[0] == pytest.approx(ei_objective(pack, swapped, norm)[0],
                                                               rel=1e-14)


def test_binned_split_on_confident_reference_is_error_split():
    rng = np.random.default_rng(5)
    logits = rng.choice([-1, 1], size=200) * rng.uniform(5.5, 9, size=200)
    y = rng.integers(0, 2, size=200)
    pack = ReferencePack.from_logits(logits, y)
    binned = infer_env_binned(pack, 10).assignment
    errors = infer_env_error_split(pack).assignment
    assert np.array_equal(binned, errors) or np.array_equal(binned, 3 - errors)


def test_binned_all_positive_labels_is_degenerate():
    pack = ReferencePack.from_logits([3.0, 2.0, 4.0], [1, 1, 1])
    assert infer_env_binned(pack, 10).degenerate


def test_binned_split_maximizes_delta_eic_exhaustively():
    n, n_bins = 16, 10
    rng = np.random.default_rng(7)
    logits = rng.normal(scale=2.5, size=n)
    y = rng.integers(0, 2, size=n)
    pack = ReferencePack.from_logits(logits, y)
    scores = pack.probabilities
    label_split = (infer_env_binned(pack, n_bins).assignment == 1).astype(float)
    target = delta_eic(scores, y, label_split, n_bins)
    best = max(delta_eic(scores, y, np.array(bits), n_bins)
               for bits in itertools.product((0.0, 1.0), repeat=n))
    assert target == pytest.approx(best, abs=1e-12)


def test_error_split_conventions():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    perfect = ReferencePack.from_logits(8 * (2 * y - 1), y)
    assert infer_env_error_split(perfect).sizes == (0, 4)
    assert infer_env_error_split(perfect).degenerate
    # a zero logit predicts class 1, so the misclassified rows are the y = 0 rows
    flat = ReferencePack.from_logits(np.zeros(4), y)
    np.testing.assert_array_equal(infer_env_error_split(flat).assignment, [1, 2, 2, 1])


def test_error_split_of_erm_reference_on_color_data():
    d = gen_color_shape(ColorShapeConfig(seed=0))
    ref = ERM(hidden=64, learning_rate=0.00125, n_steps=1000, weight_decay=0.00110794568).fit(d.X, d.y)
    frac = np.mean(infer_env_error_split(reference_pack(ref, d.X, d.y)).assignment == 1)
    assert abs(frac - (1 - ref.score(d.X, d.y))) < 1e-12
    assert abs(frac - 0.15) <= 0.02


def test_harden_modes():
    np.testing.assert_array_equal(harden([0.9, 0.1]).assignment, [1, 2])
    np.testing.assert_array_equal(harden(np.full(5, 0.5)).assignment, np.ones(5))
    q = np.random.default_rng(0).uniform(size=50)
    a = harden(q, "bernoulli", seed=4).assignment
    assert np.array_equal(a, harden(q, "bernoulli", seed=4).assignment)
    assert not np.array_equal(a, harden(q, "bernoulli", seed=5).assignment)
    with pytest.raises(ValidationError):
        harden(q, "round")


def test_random_split_is_seeded():
    assert np.array_equal(random_split(30, 1).assignment, random_split(30, 1).assignment)
    assert set(np.unique(random_split(30, 1).assignment)) == {1, 2}


def test_estimators_follow_sklearn_protocol():
    inf = EnvironmentInference(reference=ERM(n_steps=10), method="binned", n_bins=4)
    assert clone(inf).get_params()["n_bins"] == 4
    model = EIIL(inference=inf, learner=IRM(n_steps=20, anneal_steps=10, hidden=4))
    params = model.get_params(deep=True)
    assert params["inference__method"] == "binned"
    d = gen_color_shape(ColorShapeConfig(samples_per_env=100))
    model.fit(d.X, d.y)
    assert set(np.unique(model.envs_)) <= {1, 2}
    assert model.predict(d.X).shape == (200,)
    assert 0.0 <= model.score(d.X, d.y) <= 1.0
    assert model.predict_proba(d.X).shape == (200, 2)


def test_environment_inference_methods():
    d = gen_color_shape(ColorShapeConfig(samples_per_env=300, seed=1))
    for method in ("gradient", "binned", "error_split"):
        inf = EnvironmentInference(reference=ColorReference(), method=method, n_steps=500,
                                   learning_rate=1e-2, n_restarts=1)
        envs = inf.fit_predict(d.X, d.y)
        assert envs.shape == (600,)
        assert np.isfinite(inf.objective_)
    with pytest.raises(ValidationError):
        EnvironmentInference(reference=ColorReference(), method="oracle").fit(d.X, d.y)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000), st.sampled_from(["n", "mass"]))
def test_objective_invariant_to_environment_swap(n, seed, normalization):
    pack = random_pack(n, seed)
    q = np.random.default_rng(seed).uniform(0.05, 0.95, size=n)
    a, ga = ei_objective(pack, q, normalization)
    b, gb = ei_objective(pack, 1 - q, normalization)
    assert a == pytest.approx(b, rel=1e-10, abs=1e-15)
    np.testing.assert_allclose(ga, -gb, rtol=1e-9, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=30), st.integers(0, 1000))
def test_grad_factors_are_self_consistent(logits, seed):
    y = np.random.default_rng(seed).integers(0, 2, size=len(logits))
    pack = ReferencePack.from_logits(logits, y)
    assert pack.is_consistent()
    assert np.all(np.isfinite(pack.grad_factors))
