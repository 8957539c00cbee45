import copy

import pytest


TINY_COLOR = {
    "name": "tiny",
    "dataset": {"generator": "color_shape",
                "params": {"samples_per_env": 150, "test_samples": 200, "shape_dim": 6}},
    "model": {"architecture": "mlp", "hidden": 6, "learning_rate": 0.01, "n_steps": 40},
    "learners": {"irm": {"penalty_weight": 100.0, "anneal_steps": 10}},
    "ei": {"n_steps": 150, "n_restarts": 2, "learning_rate": 0.01},
    "arms": [
        {"name": "ERM", "learner": "erm"},
        {"name": "IRM", "learner": "irm", "envs": "handcrafted"},
        {"name": "EIIL", "learner": "irm", "envs": "inferred", "reference": "ERM"},
        {"name": "EIIL|Color", "learner": "irm", "envs": "inferred",
         "reference": {"fixed": "color"}, "ei": {"method": "binned"}},
        {"name": "DRO-random", "learner": "groupdro", "envs": "random"},
    ],
    "evaluation": {"groupings": ["group", "env"], "calibration_bins": 5},
    "seeds": [0, 1],
}


@pytest.fixture
def tiny_config():
    return copy.deepcopy(TINY_COLOR)


_CRITERIA = []


@pytest.fixture
def record_criterion():
    def record(criterion, passed, detail):
        _CRITERIA.append(f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}")
        print(_CRITERIA[-1])
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
