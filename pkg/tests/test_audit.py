import itertools
import json

import numpy as np
import pytest

from eiil.audit import (AUDITS, MAX_ENUMERATION_BITS, assignment_chunks, audit_b2_equivalence,
                        audit_cmnist_gap, audit_prop1, check_enumeration_size, confident_pack,
                        encode, exhaustive_search, format_table, run_audits)
from eiil.ei import ei_objective, infer_env_binned
from eiil.exceptions import ConfigError


def test_assignment_enumeration_is_complete():
    rows = np.vstack([B for _, B in assignment_chunks(5)])
    assert rows.shape == (32, 5)
    assert {tuple(r) for r in rows} == set(itertools.product((0.0, 1.0), repeat=5))
    codes = np.concatenate([c for c, _ in assignment_chunks(5)])
    assert all(encode(rows[k]) == codes[k] for k in range(32))


def test_enumeration_guard():
    check_enumeration_size(MAX_ENUMERATION_BITS)
    with pytest.raises(ConfigError):
        check_enumeration_size(MAX_ENUMERATION_BITS + 1)
    with pytest.raises(ConfigError):
        audit_prop1(n=25)
    with pytest.raises(ConfigError):
        audit_b2_equivalence(n=17)


def test_exhaustive_search_finds_all_ties():
    best, winners = exhaustive_search(3, lambda B: -np.abs(B.sum(axis=1) - 1))
    assert best == 0.0
    assert sorted(winners) == [1, 2, 4]


def test_prop1_default_passes():
    r = audit_prop1()
    assert r.passed
    assert r.observed["gaps_by_scorer"]["z"] == 1.0
    assert r.observed["cell_contribution"] == 1.0
    assert r.observed["exhaustive_max_gap"] == 1.0
    assert r.details["partition_is_argmax"]


def test_prop1_invariant_scorer_is_not_maximal():
    r = audit_prop1(n=16, seed=3)
    assert r.observed["gaps_by_scorer"]["v"] < 1.0
    assert r.observed["gaps_by_scorer"]["constant"] < 1.0


def test_prop1_without_enumeration_allows_large_n():
    r = audit_prop1(n=2000, exhaustive=False)
    assert r.passed and "exhaustive_max_gap" not in r.observed


@pytest.mark.parametrize("seed", range(5))
def test_b2_label_split_in_both_argmax_sets(seed):
    r = audit_b2_equivalence(n=10, seed=seed)
    assert r.passed
    assert r.observed["label_split_objective"] == pytest.approx(r.observed["max_objective"])
    assert r.observed["swapped_objective"] == pytest.approx(r.observed["label_split_objective"])
    assert r.observed["label_split_delta_eic"] == pytest.approx(r.observed["max_delta_eic"])


def test_b2_matches_direct_objective():
    pack = confident_pack(8, 2)
    r = audit_b2_equivalence(pack=pack)
    q = (infer_env_binned(pack, 10).assignment == 1).astype(float)
    assert r.observed["label_split_objective"] == pytest.approx(ei_objective(pack, q)[0], rel=1e-12)
    assert r.details["degenerate_codes_excluded_under_mass"] == [0, 255]


def test_b2_reports_mass_normalization_outcome():
    r = audit_b2_equivalence(n=10, seed=0)
    assert "label_split_in_mass_argmax" in r.details
    assert isinstance(r.details["label_split_in_mass_argmax"], bool)


def test_cmnist_gap_defaults():
    r = audit_cmnist_gap()
    assert r.passed
    assert abs(r.observed["handcrafted_gap"] - 0.1) <= 0.02
    assert r.observed["label_color_split_gap"] >= 0.98


def test_cmnist_gap_equal_correlations():
    r = audit_cmnist_gap(correlations=(0.85, 0.85))
    assert r.observed["handcrafted_gap"] <= 0.02
    assert r.tolerance["handcrafted_expected"] == 0.0
    assert r.passed


def test_reports_are_deterministic_and_serializable():
    a = run_audits("all")
    b = run_audits("all")
    assert [x.to_json() for x in a] == [x.to_json() for x in b]
    doc = json.loads(a[0].to_json())
    assert set(doc) == {"claim_id", "passed", "observed", "tolerance", "details"}
    table = format_table(a)
    assert table.count("PASS") == len(AUDITS)


def test_unknown_audit_rejected():
    with pytest.raises(ConfigError):
        run_audits("prop2")
