import random

import pytest
from hypothesis import given, settings, strategies as st

from horus.datalog import Atom, Cond, Rule, evaluate, stratify, v
from horus.detectors import RULES, RuleSet, detect_all, naive_eval
from horus.errors import ValidationError
from horus.facts import FactStore
from horus.fixtures.corpus import address, build_corpus
from horus.fixtures.random_facts import random_store
from horus.trace import OrderKey

ALL = RuleSet.parse("all")
CASE_NAMES = [c.name for c in build_corpus()]


def summary(findings):
    return sorted((f.rule, f.tx_hashes, f.amount) for f in findings)


@pytest.mark.parametrize("name", CASE_NAMES)
def test_corpus_case(name, corpus, corpus_stores):
    case = next(c for c in corpus if c.name == name)
    found = detect_all(corpus_stores[name], ALL)
    assert summary(found) == sorted(case.expected)
    assert sorted(found, key=repr) == sorted(naive_eval(ALL, corpus_stores[name]), key=repr)


def test_every_rule_has_positive_and_negative_cases(corpus):
    for rule in RULES:
        mine = [c for c in corpus if c.rule == rule]
        assert sum(c.positive for c in mine) >= 2, rule
        assert sum(not c.positive for c in mine) >= 1, rule


def test_reentrancy_finding_details(corpus_stores):
    [f] = detect_all(corpus_stores["reentrancy_dao"], ALL)
    assert f.victim == address("victim", 1)
    assert dict(f.parties)["callee"] == address("attack_contract", 1)
    assert f.head[3] == 4  # depth of the re-entered call
    assert list(f.evidence) == sorted(f.evidence) and len(f.evidence) == 4
    assert all(isinstance(k, OrderKey) for k in f.evidence)


def test_parity_detection_flips_with_order(corpus_stores):
    store = corpus_stores["parity1_same_block"]
    assert len(detect_all(store, ALL)) == 1
    t1, t2 = sorted(store["transaction"], key=lambda t: (t.block_number, t.tx_index))
    swapped = FactStore({k: list(v) for k, v in store.tables.items()})
    swapped.tables["transaction"] = [
        t1._replace(block_number=t2.block_number, tx_index=t2.tx_index),
        t2._replace(block_number=t1.block_number, tx_index=t1.tx_index),
    ]
    assert detect_all(swapped, ALL) == []
    assert naive_eval(ALL, swapped) == []


def test_parity_pair_counts_both_transactions(corpus_stores):
    [f] = detect_all(corpus_stores["parity1_cross_block_library"], ALL)
    assert len(f.tx_hashes) == 2 and f.amount == "26793"
    assert f.victim == address("wallet", 6)


@pytest.mark.parametrize("name,expected", [
    ("short_transfer_67", 1), ("short_transfer_68", 0), ("short_transfer_from_99", 1), ("short_transfer_from_100", 0),
])
def test_short_address_boundaries(name, expected, corpus_stores):
    assert len(detect_all(corpus_stores[name], ALL)) == expected


@pytest.mark.parametrize("name", ["reentrancy_dao_zero", "overflow_zero", "unhandled_zero", "short_zero"])
def test_zero_amount_variants_are_silent(name, corpus_stores):
    assert detect_all(corpus_stores[name], ALL) == []


def test_duplicate_facts_do_not_duplicate_findings(corpus_stores):
    store = corpus_stores["overflow_batch_mul"]
    doubled = FactStore({k: list(v) * 2 for k, v in store.tables.items()})
    assert detect_all(doubled, ALL) == detect_all(store, ALL)
    assert sorted(naive_eval(ALL, doubled), key=repr) == sorted(detect_all(store, ALL), key=repr)


def test_rule_selection(corpus_stores):
    store = FactStore().merge(*corpus_stores.values())
    only = RuleSet.parse("reentrancy, short_address")
    assert only.enabled == ("Reentrancy", "ShortAddress")
    assert {f.rule for f in detect_all(store, only)} == {"Reentrancy", "ShortAddress"}
    assert detect_all(store, ALL, workers=4) == detect_all(store, ALL)
    with pytest.raises(ValidationError):
        RuleSet.parse("reentrancy,bogus")
    with pytest.raises(ValidationError):
        RuleSet(transfer="xyz")


def test_thresholds_are_configurable(corpus_stores):
    store = corpus_stores["short_transfer_68"]
    assert detect_all(store, RuleSet(transfer_min_len=69))
    assert not detect_all(store, RuleSet())


@settings(max_examples=150, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_hash_joins_match_naive_evaluation(seed):
    store = random_store(random.Random(seed))
    assert sorted(detect_all(store, ALL), key=repr) == sorted(naive_eval(ALL, store), key=repr)


# -- the reference engine itself -----------------------------------------------


def test_transitive_closure_reaches_fixpoint():
    x, y, z = v("x", "y", "z")
    rules = [
        Rule("path", (x, y), (Atom("edge", (x, y)),)),
        Rule("path", (x, z), (Atom("path", (x, y)), Atom("edge", (y, z)))),
    ]
    out = evaluate(rules, {"edge": [(1, 2), (2, 3), (3, 4)]})
    assert set(out["path"]) == {(a, b) for a in range(1, 5) for b in range(a + 1, 5)}


def test_negation_is_evaluated_after_its_stratum():
    x, y = v("x", "y")
    reach = Rule("reach", (y,), (Atom("edge", (x, y)),))
    lonely = Rule("lonely", (x,), (Atom("node", (x,)),), negated=(Atom("reach", (x,)),))
    strata = stratify([lonely, reach])
    assert [r.head for r in strata[0]] == ["reach"]
    out = evaluate([lonely, reach], {"edge": [(1, 2)], "node": [(1,), (2,)]})
    assert set(out["lonely"]) == {(1,)}


def test_conditions_and_unstratifiable_programs():
    x = v("x")
    big = Rule("big", (x,), (Atom("n", (x,)),), conditions=(Cond((x,), lambda a: a > 2),))
    assert set(evaluate([big], {"n": [(1,), (3,), (5,)]})["big"]) == {(3,), (5,)}
    p = Rule("p", (x,), (Atom("n", (x,)),), negated=(Atom("q", (x,)),))
    q = Rule("q", (x,), (Atom("n", (x,)),), negated=(Atom("p", (x,)),))
    with pytest.raises(ValueError):
        stratify([p, q])
