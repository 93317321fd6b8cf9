"""A deliberately unoptimized bottom-up evaluator for non-recursive-ish rules.

Used as the reference against which the hash-join detectors are checked:
bodies are matched by plain nested loops over every tuple of each relation,
negated atoms are only consulted once their relation's stratum is complete,
and each stratum is iterated to a fixpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    value: object


ANY = None  # wildcard term


@dataclass(frozen=True)
class Atom:
    relation: str
    terms: tuple


@dataclass(frozen=True)
class Cond:
    """A built-in predicate over bound variables."""

    variables: tuple
    test: Callable


@dataclass(frozen=True)
class Rule:
    head: str
    head_terms: tuple
    body: tuple
    negated: tuple = ()
    conditions: tuple = ()


def v(*names: str):
    out = tuple(Var(n) for n in names)
    return out[0] if len(out) == 1 else out


def _unify(terms: tuple, row: tuple, binding: dict):
    if len(terms) != len(row):
        return None
    new = binding
    for term, value in zip(terms, row):
        if term is ANY:
            continue
        if isinstance(term, Const):
            if term.value != value:
                return None
        else:
            bound = new.get(term.name, _UNBOUND)
            if bound is _UNBOUND:
                if new is binding:
                    new = dict(binding)
                new[term.name] = value
            elif bound != value:
                return None
    return new


_UNBOUND = object()


def _ready(cond: Cond, binding: dict) -> bool:
    return all(x.name in binding for x in cond.variables)


def _check(cond: Cond, binding: dict) -> bool:
    return bool(cond.test(*(binding[x.name] for x in cond.variables)))


def _matches(rule: Rule, db: dict):
    """Yield (binding, matched positive facts) for every derivation of ``rule``."""

    def go(i: int, binding: dict, matched: tuple, pending: tuple):
        if i == len(rule.body):
            if pending:
                return
            for neg in rule.negated:
                for row in db.get(neg.relation, ()):
                    if _unify(neg.terms, tuple(row), binding) is not None:
                        return
            yield binding, matched
            return
        atom = rule.body[i]
        for row in db.get(atom.relation, ()):
            b = _unify(atom.terms, tuple(row), binding)
            if b is None:
                continue
            still = []
            ok = True
            for cond in pending:
                if _ready(cond, b):
                    if not _check(cond, b):
                        ok = False
                        break
                else:
                    still.append(cond)
            if ok:
                yield from go(i + 1, b, matched + ((atom.relation, row),), tuple(still))

    pending = []
    for cond in rule.conditions:
        if _ready(cond, {}):
            if not _check(cond, {}):
                return
        else:
            pending.append(cond)
    yield from go(0, {}, (), tuple(pending))


def _head(rule: Rule, binding: dict) -> tuple:
    return tuple(t.value if isinstance(t, Const) else binding[t.name] for t in rule.head_terms)


def stratify(rules) -> list:
    """Group rules into strata so every negated relation is complete before use."""
    derived = {r.head for r in rules}
    level = {h: 0 for h in derived}
    changed = True
    while changed:
        changed = False
        for r in rules:
            need = level[r.head]
            for a in r.body:
                if a.relation in derived:
                    need = max(need, level[a.relation])
            for a in r.negated:
                if a.relation in derived:
                    need = max(need, level[a.relation] + 1)
            if need > len(rules):
                raise ValueError("rules are not stratifiable")
            if need != level[r.head]:
                level[r.head] = need
                changed = True
    strata = {}
    for r in rules:
        strata.setdefault(level[r.head], []).append(r)
    return [strata[k] for k in sorted(strata)]


def evaluate(rules, facts: dict) -> dict:
    """Evaluate ``rules`` over ``facts`` (relation -> iterable of tuples).

    Returns relation -> {head tuple: [derivation, ...]} for every derived
    relation, where a derivation is the tuple of (relation, row) facts that
    matched the positive body atoms.
    """
    db = {name: list(rows) for name, rows in facts.items()}
    derivations: dict = {r.head: {} for r in rules}
    for stratum in stratify(rules):
        while True:
            grew = False
            for rule in stratum:
                table = derivations[rule.head]
                for binding, matched in list(_matches(rule, db)):
                    head = _head(rule, binding)
                    if head not in table:
                        table[head] = []
                        db.setdefault(rule.head, []).append(head)
                        grew = True
                    if matched not in table[head]:
                        table[head].append(matched)
            if not grew:
                break
    return derivations
