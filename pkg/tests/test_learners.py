import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from eiil import ERM, IRM, EnvSplit, GroupDRO
from eiil.core import Network, finite_diff_check, scale_grad_factors
from eiil.datasets import Dataset
from eiil.exceptions import DegenerateSplitError, ValidationError
from eiil.learners import (GroupDroState, irm_objective, irmv1_penalty, model_from_json,
                           model_irmv1_penalty, model_to_json, train_erm, train_groupdro,
                           train_irm)
from eiil.metrics import evaluate


def noisy_linear(n=200, seed=0, d=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X @ np.arange(1, d + 1) + rng.normal(scale=2.0, size=n) > 0).astype(float)
    return X, y


def test_penalty_zero_when_every_example_is_fit_exactly():
    y = np.array([0.3, -1.2, 2.0, 0.7])
    assert irmv1_penalty(y, y, [1, 1, 2, 2], "squared_error") == 0.0


def test_penalty_matches_hand_computation():
    f = np.array([2.0, -1.0, 0.5, 3.0])
    y = np.array([1.0, 1.0, 0.0, 0.0])
    sig = 1 / (1 + np.exp(-f))
    phi = (sig - y) * f
    expected = ((phi[0] + phi[2]) / 2) ** 2 + ((phi[1] + phi[3]) / 2) ** 2
    assert irmv1_penalty(f, y, [1, 2, 1, 2]) == pytest.approx(expected, rel=1e-14)
    # squared error: phi = (f - y) * f
    assert irmv1_penalty([2.0, 1.0], [1.0, 0.0], [1, 2], "squared_error") == pytest.approx(5.0)


def test_penalty_vanishes_at_erm_optimum():
    X, y = noisy_linear(300)
    model = ERM(architecture="linear", optimizer="gd", learning_rate=0.5, n_steps=3000).fit(X, y)
    assert model_irmv1_penalty(model, X, y, np.ones(300)) <= 1e-6


def test_penalty_rejects_degenerate_split():
    with pytest.raises(DegenerateSplitError):
        irmv1_penalty([0.1, 0.2], [0, 1], EnvSplit([1, 1]))
    with pytest.raises(ValidationError):
        irmv1_penalty([0.1, 0.2], [0, 1], [1, 2, 1])


@pytest.mark.parametrize("kind", ["bce", "squared_error"])
def test_irm_objective_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(3)
    X = rng.normal(size=(24, 3))
    y = rng.integers(0, 2, size=24).astype(float) if kind == "bce" else rng.normal(size=24)
    envs = rng.integers(1, 3, size=24)
    net = Network(3, "mlp", hidden=4, activation="tanh")
    fun = irm_objective(net, X, y, envs, kind, penalty_weight=10.0, weight_decay=0.01, scale=0.5)
    for _ in range(10):
        assert finite_diff_check(fun, rng.normal(size=net.n_params)) < 1e-4


def test_irm_objective_value_decomposes():
    X, y = noisy_linear(40, seed=2)
    envs = np.repeat([1, 2], 20)
    net = Network(3, "linear")
    p = np.random.default_rng(0).normal(size=net.n_params)
    f = net.forward(X, p)
    risk = np.mean([np.mean(np.logaddexp(0, f[envs == e]) - y[envs == e] * f[envs == e])
                    for e in (1, 2)])
    pen = irmv1_penalty(f, y, envs)
    value, _ = irm_objective(net, X, y, envs, "bce", penalty_weight=7.0)(p)
    assert value == pytest.approx(risk + 7.0 * pen / 2, rel=1e-12)


def test_irm_without_penalty_equals_reweighted_erm():
    X, y = noisy_linear(90, seed=1)
    envs = np.array([1] * 30 + [2] * 60)
    irm = IRM(architecture="mlp", hidden=5, n_steps=100, penalty_weight=0.0, anneal_steps=0,
              learning_rate=1e-2).fit(X, y, envs)
    w = np.where(envs == 1, 1 / (2 * 30), 1 / (2 * 60))
    erm = ERM(architecture="mlp", hidden=5, n_steps=100, learning_rate=1e-2).fit(X, y, sample_weight=w)
    np.testing.assert_allclose(irm.network_.params, erm.network_.params, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(irm.loss_curve_, erm.loss_curve_, rtol=1e-10)


def test_irm_without_penalty_on_equal_envs_matches_erm():
    X, y = noisy_linear(80, seed=4)
    envs = np.tile([1, 2], 40)
    irm = IRM(hidden=6, n_steps=60, penalty_weight=0.0, anneal_steps=0).fit(X, y, envs)
    erm = ERM(hidden=6, n_steps=60).fit(X, y)
    np.testing.assert_allclose(irm.network_.params, erm.network_.params, rtol=1e-10, atol=1e-12)


def test_irm_schedules():
    m = IRM(penalty_weight=50.0, anneal_steps=10, n_steps=30)
    assert [m._weight_at(t) for t in (0, 9, 10, 29)] == [1.0, 1.0, 50.0, 50.0]
    m = IRM(penalty_weight=50.0, penalty_schedule="final", penalty_steps=5, n_steps=30)
    assert [m._weight_at(t) for t in (0, 24, 25, 29)] == [0.0, 0.0, 50.0, 50.0]
    X, y = noisy_linear(40)
    envs = np.repeat([1, 2], 20)
    with pytest.raises(ValidationError):
        IRM(anneal_steps=50, n_steps=10).fit(X, y, envs)
    with pytest.raises(ValidationError):
        IRM(penalty_schedule="late", n_steps=10).fit(X, y, envs)
    with pytest.raises(DegenerateSplitError):
        IRM(n_steps=10, anneal_steps=5).fit(X, y, np.ones(40))


def test_group_weights_stay_uniform_with_equal_risks():
    state = GroupDroState.uniform(2, 0.5)
    for _ in range(100):
        state.update([0.7, 0.7])
    np.testing.assert_allclose(state.weights, [0.5, 0.5])


def test_group_weight_of_riskier_env_increases_to_one():
    state = GroupDroState.uniform(2, 0.1)
    history = [state.weights[0]]
    for _ in range(500):
        history.append(state.update([1.0, 0.2])[0])
    history = np.asarray(history)
    steps = np.diff(history)
    assert np.all(steps >= -1e-15)  # rounding jitter once the weight reaches 1.0
    assert np.all(steps[history[:-1] < 1.0 - 1e-9] > 0)
    assert history[-1] > 0.99


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=2, max_size=5), st.floats(1e-3, 5.0))
def test_group_weights_remain_a_distribution(risks, eta):
    state = GroupDroState.uniform(len(risks), eta)
    for _ in range(20):
        w = state.update(risks)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)


def imbalanced_nuisance(n, seed):
    """Group 0 (90%): nuisance agrees with y 95% of the time; group 1: 5%."""
    rng = np.random.default_rng(seed)
    group = (rng.random(n) < 0.1).astype(int)
    y = rng.integers(0, 2, size=n)
    agree = np.where(group == 0, 0.95, 0.05)
    nuisance = np.where(rng.random(n) < agree, y, 1 - y)
    causal = (2 * y - 1) + rng.normal(size=n)
    X = np.column_stack([causal, 3.0 * (2 * nuisance - 1)])
    return Dataset(X, y, env=group, group=group)


def test_groupdro_improves_worst_group_over_erm():
    train, test = imbalanced_nuisance(4000, 0), imbalanced_nuisance(4000, 1)
    spec = {"architecture": "linear", "learning_rate": 0.05, "n_steps": 1500}
    erm = train_erm(train, spec)
    dro = train_groupdro(train, train.group + 1, spec, group_step_size=0.05)
    erm_worst = evaluate(erm, test).worst_group_accuracy
    dro_worst = evaluate(dro, test).worst_group_accuracy
    assert dro_worst >= erm_worst + 0.10


def test_erm_separates_toy():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 2))
    y = (X[:, 0] - X[:, 1] > 0).astype(float)
    assert ERM(architecture="linear", learning_rate=0.1, n_steps=500).fit(X, y).score(X, y) == 1.0


def test_regression_estimators_expose_coefficients():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 2))
    y = X @ [2.0, -1.0] + 0.5
    m = ERM(task="regression", architecture="linear", learning_rate=0.05, n_steps=2000).fit(X, y)
    np.testing.assert_allclose(m.coef_, [2.0, -1.0], atol=1e-3)
    assert m.intercept_ == pytest.approx(0.5, abs=1e-3)
    assert m.score(X, y) > -1e-5
    with pytest.raises(AttributeError):
        ERM(n_steps=2, hidden=2).fit(X, (y > 0).astype(float)).coef_


def test_sklearn_protocol_and_validation():
    m = IRM(penalty_weight=3.0)
    c = clone(m)
    assert c.get_params() == m.get_params()
    assert c.set_params(hidden=8).hidden == 8
    with pytest.raises(ValidationError):
        ERM(n_steps=2).fit(np.zeros((3, 1)), [0.0, 0.5, 1.0])
    with pytest.raises(ValidationError):
        ERM(task="ranking", n_steps=2).fit(np.zeros((3, 1)), [0.0, 1.0, 1.0])
    X, y = noisy_linear(30)
    m = ERM(n_steps=3, hidden=3).fit(X, y)
    with pytest.raises(ValidationError):
        m.predict(np.zeros((2, 5)))


@pytest.mark.parametrize("cls,needs_envs", [(ERM, False), (IRM, True), (GroupDRO, True)])
def test_json_round_trip_preserves_predictions(tmp_path, cls, needs_envs):
    X, y = noisy_linear(60)
    kwargs = {"hidden": 4, "n_steps": 20}
    if cls is IRM:
        kwargs["anneal_steps"] = 5
    est = cls(**kwargs)
    est = est.fit(X, y, np.repeat([1, 2], 30)) if needs_envs else est.fit(X, y)
    path = tmp_path / "m.json"
    model_to_json(est, path)
    back = model_from_json(str(path))
    assert type(back) is cls
    assert np.array_equal(back.decision_function(X), est.decision_function(X))
    assert back.get_params() == est.get_params()


def test_functional_wrappers():
    X, y = noisy_linear(50)
    d = Dataset(X, y)
    envs = EnvSplit(np.repeat([1, 2], 25))
    assert isinstance(train_irm(d, envs, {"hidden": 3, "n_steps": 5}, anneal_steps=2), IRM)
    assert envs.swapped().sizes == (25, 25)


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 30), st.integers(0, 10_000))
def test_penalty_invariances(n, seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(scale=3, size=n)
    y = rng.integers(0, 2, size=n)
    envs = np.where(np.arange(n) < n // 2, 1, 2)
    base = irmv1_penalty(f, y, envs)
    assert base >= 0
    assert irmv1_penalty(f, y, 3 - envs) == pytest.approx(base, rel=1e-12, abs=1e-300)
    perm = np.concatenate([rng.permutation(np.flatnonzero(envs == 1)),
                           rng.permutation(np.flatnonzero(envs == 2))])
    assert irmv1_penalty(f[perm], y[perm], envs) == pytest.approx(base, rel=1e-12, abs=1e-300)
    # zero exactly when every environment's mean scale gradient is zero
    phi = scale_grad_factors("bce", f, y)
    stationary = all(abs(phi[envs == e].mean()) == 0 for e in (1, 2))
    assert (base == 0) == stationary
