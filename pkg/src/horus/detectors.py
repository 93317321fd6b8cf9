"""Attack detection rules over a FactStore.

Each rule exists twice: as a hand-planned hash join (``detect_*``) and as a
declarative :class:`~horus.datalog.Rule` evaluated by the naive nested-loop
engine (``naive_eval``). Both produce the same :class:`Finding` values; the
second path is the test oracle for the first.

Findings follow Datalog set semantics: one finding per distinct head tuple.
Its evidence is the smallest (sorted) tuple of OrderKeys over all
derivations of that head, so it does not depend on join order.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from itertools import product

from .datalog import ANY, Atom, Cond, Const, Rule, evaluate, v
from .errors import ValidationError
from .facts import FactStore
from .trace import OrderKey

RULES = (
    "Reentrancy",
    "ParityWalletHack1",
    "ParityWalletHack2",
    "IntegerOverflow",
    "UnhandledException",
    "ShortAddress",
)
_RULE_INDEX = {name: i for i, name in enumerate(RULES)}
_SIG_RE = re.compile(r"^[0-9a-f]{8}$")


@dataclass(frozen=True)
class RuleSet:
    enabled: tuple = RULES
    init_wallet: str = "e46dcfeb"
    execute: str = "b61d27f6"
    kill: str = "cbf0b0c0"
    transfer: str = "a9059cbb"
    transfer_from: str = "23b872dd"
    transfer_min_len: int = 68
    transfer_from_min_len: int = 100
    sources: frozenset = frozenset({"CALLDATALOAD", "CALLDATACOPY"})

    def __post_init__(self):
        for name in ("init_wallet", "execute", "kill", "transfer", "transfer_from"):
            if not _SIG_RE.match(getattr(self, name)):
                raise ValidationError(f"{name} must be a 4-byte hex selector, got {getattr(self, name)!r}")
        unknown = set(self.enabled) - set(RULES)
        if unknown:
            raise ValidationError(f"unknown rules: {sorted(unknown)}")

    @classmethod
    def parse(cls, spec: str) -> "RuleSet":
        """``all`` or a comma-separated list of rule names (case-insensitive)."""
        if spec.strip().lower() == "all":
            return cls()
        lookup = {r.lower(): r for r in RULES}
        names = []
        for part in spec.split(","):
            key = part.strip().lower().replace("_", "")
            if key not in lookup:
                raise ValidationError(f"unknown rule {part.strip()!r}; choose from {', '.join(RULES)}")
            names.append(lookup[key])
        return cls(enabled=tuple(r for r in RULES if r in names))


DEFAULT_RULES = RuleSet()


@dataclass(frozen=True)
class Finding:
    rule: str
    tx_hashes: tuple
    head: tuple
    parties: tuple  # ((role, address), ...)
    amount: str
    evidence: tuple  # OrderKeys

    @property
    def victim(self) -> str:
        """The attacked contract, used for per-rule contract counts."""
        return dict(self.parties)["caller" if self.rule == "Reentrancy" else "contract"]

    def sort_key(self):
        first = self.evidence[0] if self.evidence else OrderKey(-1, -1, -1)
        return (_RULE_INDEX[self.rule], tuple(first), self.head)

    def to_json(self) -> dict:
        return {
            "rule": self.rule,
            "contract": self.victim,
            "tx_hashes": list(self.tx_hashes),
            "parties": dict(self.parties),
            "amount": self.amount,
            "evidence": [list(k) for k in self.evidence],
        }


# --------------------------------------------------------------------------
# shared: evidence keys and head -> Finding


_TX_COLUMN = {
    "opcode": 2, "data_flow": 2, "arithmetic": 6, "storage": 2,
    "condition": 1, "erc20_transfer": 1, "call": 1, "selfdestruct": 1,
}


def fact_key(relation: str, row, order: dict):
    """OrderKey locating a fact; data_flow facts are located at their consuming step."""
    if relation == "block":
        return None
    if relation == "transaction":
        return OrderKey(row[2], row[1], 0)
    b, i = order.get(row[_TX_COLUMN[relation]], (-1, -1))
    step = row[1] if relation == "data_flow" else row[0]
    return OrderKey(b, i, step)


def evidence_of(matched, order: dict) -> tuple:
    keys = {fact_key(rel, row, order) for rel, row in matched}
    keys.discard(None)
    return tuple(sorted(keys))


class _Context:
    def __init__(self, store: FactStore):
        self.order = store.tx_order()
        self.tx = {t.tx_hash: t for t in store["transaction"]}


def _finalize(rule: str, head: tuple, evidence: tuple, ctx: _Context) -> Finding:
    if rule == "Reentrancy":
        h, caller, callee, _depth2, amount = head
        return Finding(rule, (h,), head, (("caller", caller), ("callee", callee)), amount, evidence)
    if rule == "ParityWalletHack1":
        h1, h2, caller, callee, amount = head
        parties = (("from", ctx.tx[h1].from_), ("caller", caller), ("callee", callee), ("contract", caller))
        return Finding(rule, (h1, h2), head, parties, amount, evidence)
    if rule == "ParityWalletHack2":
        h1, h2, contract, destination, amount = head
        parties = (("from", ctx.tx[h1].from_), ("contract", contract), ("destination", destination))
        return Finding(rule, (h1, h2), head, parties, amount, evidence)
    if rule in ("IntegerOverflow", "ShortAddress"):
        h, frm, to, amount = head
        return Finding(rule, (h,), head, (("from", frm), ("to", to), ("contract", ctx.tx[h].to)), amount, evidence)
    if rule == "UnhandledException":
        h, caller, callee, amount = head
        return Finding(rule, (h,), head, (("caller", caller), ("callee", callee), ("contract", caller)), amount, evidence)
    raise ValueError(rule)


def _collect(rule: str, derivations: dict, ctx: _Context) -> list:
    """derivations: head -> list of matched-fact tuples."""
    out = []
    for head, matches in derivations.items():
        evidence = min(evidence_of(m, ctx.order) for m in matches)
        out.append(_finalize(rule, head, evidence, ctx))
    return out


def sort_findings(findings) -> list:
    return sorted(findings, key=Finding.sort_key)


# --------------------------------------------------------------------------
# hash-join detectors


def _derive(table: dict, head: tuple, matched: tuple) -> None:
    table.setdefault(head, []).append(matched)


def detect_reentrancy(store: FactStore, rules: RuleSet = DEFAULT_RULES) -> list:
    ctx = _Context(store)
    loads = defaultdict(list)  # (hash, contract, depth) -> SLOAD rows
    stores = defaultdict(list)  # (hash, contract, index, depth) -> SSTORE rows
    for s in store["storage"]:
        if s.op == "SLOAD":
            loads[(s.tx_hash, s.contract, s.depth)].append(s)
        elif s.op == "SSTORE":
            stores[(s.tx_hash, s.contract, s.index, s.depth)].append(s)
    sites = defaultdict(list)
    for c in store["call"]:
        if c.result == 1:
            sites[(c.tx_hash, c.caller, c.callee, c.call_id, c.call_branch)].append(c)

    found: dict = {}
    for (h, caller, callee, _id, _branch), calls in sites.items():
        for c2, c3 in product(calls, calls):
            if not c2.depth < c3.depth or c3.value == "0":
                continue
            for s1 in loads.get((h, caller, c2.depth), ()):
                if not s1.step < c2.step:
                    continue
                for s4 in stores.get((h, caller, s1.index, c2.depth), ()):
                    if c3.step < s4.step:
                        _derive(found, (h, caller, callee, c3.depth, c3.value),
                                (("storage", s1), ("call", c2), ("call", c3), ("storage", s4)))
    return _collect("Reentrancy", found, ctx)


def _parity_pairs(store: FactStore, second_selector: str, rules: RuleSet):
    firsts = defaultdict(list)
    seconds = []
    for t in store["transaction"]:
        if t.status != 1:
            continue
        if t.input[:8] == rules.init_wallet:
            firsts[(t.from_, t.to)].append(t)
        if t.input[:8] == second_selector:
            seconds.append(t)
    for t2 in seconds:
        for t1 in firsts.get((t2.from_, t2.to), ()):
            if (t1.block_number, t1.tx_index) < (t2.block_number, t2.tx_index):
                yield t1, t2


def detect_parity_1(store: FactStore, rules: RuleSet = DEFAULT_RULES) -> list:
    ctx = _Context(store)
    calls = defaultdict(list)
    for c in store["call"]:
        if c.op == "CALL" and c.result == 1:
            calls[c.tx_hash].append(c)
    found: dict = {}
    for t1, t2 in _parity_pairs(store, rules.execute, rules):
        for c in calls.get(t2.tx_hash, ()):
            _derive(found, (t1.tx_hash, t2.tx_hash, c.caller, c.callee, c.value),
                    (("transaction", t1), ("transaction", t2), ("call", c)))
    return _collect("ParityWalletHack1", found, ctx)


def detect_parity_2(store: FactStore, rules: RuleSet = DEFAULT_RULES) -> list:
    ctx = _Context(store)
    kills = defaultdict(list)
    for s in store["selfdestruct"]:
        kills[s.tx_hash].append(s)
    found: dict = {}
    for t1, t2 in _parity_pairs(store, rules.kill, rules):
        for s in kills.get(t2.tx_hash, ()):
            _derive(found, (t1.tx_hash, t2.tx_hash, s.contract, s.destination, s.value),
                    (("transaction", t1), ("transaction", t2), ("selfdestruct", s)))
    return _collect("ParityWalletHack2", found, ctx)


def detect_integer_overflow(store: FactStore, rules: RuleSet = DEFAULT_RULES) -> list:
    ctx = _Context(store)
    sources = defaultdict(list)
    for o in store["opcode"]:
        if o.op in rules.sources:
            sources[o.tx_hash].append(o)
    flows_into = defaultdict(list)  # (hash, step2) -> flows
    flows_from = defaultdict(list)  # (hash, step1) -> flows
    for f in store["data_flow"]:
        flows_into[(f.tx_hash, f.step2)].append(f)
        flows_from[(f.tx_hash, f.step1)].append(f)
    sstores = {(s.tx_hash, s.step): s for s in store["storage"] if s.op == "SSTORE" and s.depth == 1}
    transfers = defaultdict(list)  # (hash, amount) -> transfers
    for t in store["erc20_transfer"]:
        if t.value != "0":
            transfers[(t.tx_hash, t.value)].append(t)
    source_steps = {(o.tx_hash, o.step): o for hs in sources.values() for o in hs}

    found: dict = {}
    for a in store["arithmetic"]:
        if a.arithmetic_result == a.evm_result:
            continue
        h = a.tx_hash
        ins = [(f, source_steps[(h, f.step1)]) for f in flows_into.get((h, a.step), ()) if (h, f.step1) in source_steps]
        if not ins:
            continue
        outs = [(f, sstores[(h, f.step2)]) for f in flows_from.get((h, a.step), ()) if (h, f.step2) in sstores]
        if not outs:
            continue
        for amount in {a.operand1, a.operand2}:
            for t in transfers.get((h, amount), ()):
                for (f1, o), (f2, s) in product(ins, outs):
                    _derive(found, (h, t.from_, t.to, amount),
                            (("opcode", o), ("arithmetic", a), ("storage", s),
                             ("data_flow", f1), ("data_flow", f2), ("erc20_transfer", t)))
    return _collect("IntegerOverflow", found, ctx)


def used_in_condition(step: int, tx_hash: str, store: FactStore) -> bool:
    conditions = {c.step for c in store["condition"] if c.tx_hash == tx_hash}
    return any(f.step1 == step and f.step2 in conditions for f in store["data_flow"] if f.tx_hash == tx_hash)


def _used_in_condition_set(store: FactStore) -> set:
    conditions = {(c.step, c.tx_hash) for c in store["condition"]}
    return {(f.step1, f.tx_hash) for f in store["data_flow"] if (f.step2, f.tx_hash) in conditions}


def detect_unhandled_exception(store: FactStore, rules: RuleSet = DEFAULT_RULES) -> list:
    ctx = _Context(store)
    used = _used_in_condition_set(store)  # stratum below the rule
    found: dict = {}
    for c in store["call"]:
        if c.op == "CALL" and c.result == 0 and c.value != "0" and (c.step, c.tx_hash) not in used:
            _derive(found, (c.tx_hash, c.caller, c.callee, c.value), (("call", c),))
    return _collect("UnhandledException", found, ctx)


def _short_input(t, rules: RuleSet) -> bool:
    n = len(t.input) // 2
    prefix = t.input[:8]
    return (prefix == rules.transfer and n < rules.transfer_min_len) or (
        prefix == rules.transfer_from and n < rules.transfer_from_min_len
    )


def detect_short_address(store: FactStore, rules: RuleSet = DEFAULT_RULES) -> list:
    ctx = _Context(store)
    transfers = defaultdict(list)
    for t in store["erc20_transfer"]:
        if t.value != "0":
            transfers[t.tx_hash].append(t)
    found: dict = {}
    for tx in store["transaction"]:
        if tx.status == 1 and _short_input(tx, rules):
            for t in transfers.get(tx.tx_hash, ()):
                _derive(found, (tx.tx_hash, t.from_, t.to, t.value), (("transaction", tx), ("erc20_transfer", t)))
    return _collect("ShortAddress", found, ctx)


DETECTORS = {
    "Reentrancy": detect_reentrancy,
    "ParityWalletHack1": detect_parity_1,
    "ParityWalletHack2": detect_parity_2,
    "IntegerOverflow": detect_integer_overflow,
    "UnhandledException": detect_unhandled_exception,
    "ShortAddress": detect_short_address,
}


def detect_all(store: FactStore, rules: RuleSet = DEFAULT_RULES, workers: int = 1) -> list:
    """Run every enabled rule; rules are independent so they may run in parallel."""
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda r: DETECTORS[r](store, rules), rules.enabled))
    else:
        parts = [DETECTORS[r](store, rules) for r in rules.enabled]
    return sort_findings(f for part in parts for f in part)


# --------------------------------------------------------------------------
# declarative rules for the naive oracle


def datalog_rules(rules: RuleSet = DEFAULT_RULES) -> list:
    h, h1, h2 = v("hash", "hash1", "hash2")
    caller, callee, amount = v("caller", "callee", "amount")
    s1, s2, s3, s4 = v("step1", "step2", "step3", "step4")
    d1, d2, index = v("depth1", "depth2", "index")
    cid, branch = v("id", "branch")
    frm, to = v("from", "to")
    i1, i2, b1, b2, in1, in2 = v("index1", "index2", "block1", "block2", "input1", "input2")
    op, op1, op2, res, evm = v("op", "operand1", "operand2", "arithmetic_res", "evm_res")
    contract, destination, step, c, inp = v("contract", "destination", "step", "c", "input")
    one, zero = Const(1), Const(0)
    nonzero = Cond((amount,), lambda a: a != "0")
    ordered = Cond((b1, i1, b2, i2), lambda b1, i1, b2, i2: b1 < b2 or (b1 == b2 and i1 < i2))

    def parity(second: str, target: Atom, head_terms) -> Rule:
        return Rule(
            second_name[second], head_terms,
            (
                Atom("transaction", (h1, i1, b1, frm, to, in1, ANY, ANY, one)),
                Atom("transaction", (h2, i2, b2, frm, to, in2, ANY, ANY, one)),
                target,
            ),
            conditions=(
                Cond((in1,), lambda x: x[:8] == rules.init_wallet),
                Cond((in2,), lambda x: x[:8] == second),
                ordered,
            ),
        )

    second_name = {rules.execute: "ParityWalletHack1", rules.kill: "ParityWalletHack2"}

    out = [
        Rule(
            "Reentrancy", (h, caller, callee, d2, amount),
            (
                Atom("storage", (s1, Const("SLOAD"), h, ANY, caller, index, ANY, d1)),
                Atom("call", (s2, h, ANY, caller, callee, ANY, ANY, d1, cid, branch, one)),
                Atom("call", (s3, h, ANY, caller, callee, ANY, amount, d2, cid, branch, one)),
                Atom("storage", (s4, Const("SSTORE"), h, ANY, caller, index, ANY, d1)),
            ),
            conditions=(
                Cond((d1, d2), lambda a, b: a < b),
                Cond((s1, s2), lambda a, b: a < b),
                Cond((s3, s4), lambda a, b: a < b),
                nonzero,
            ),
        ),
        parity(rules.execute, Atom("call", (ANY, h2, Const("CALL"), caller, callee, ANY, amount, ANY, ANY, ANY, one)),
               (h1, h2, caller, callee, amount)),
        parity(rules.kill, Atom("selfdestruct", (ANY, h2, ANY, contract, destination, amount)),
               (h1, h2, contract, destination, amount)),
        Rule(
            "IntegerOverflow", (h, frm, to, amount),
            (
                Atom("opcode", (s1, op, h)),
                Atom("arithmetic", (s2, ANY, op1, op2, res, evm, h)),
                Atom("storage", (s3, Const("SSTORE"), h, ANY, ANY, ANY, ANY, one)),
                Atom("data_flow", (s1, s2, h)),
                Atom("data_flow", (s2, s3, h)),
                Atom("erc20_transfer", (ANY, h, ANY, frm, to, amount)),
            ),
            conditions=(
                Cond((op,), lambda o: o in rules.sources),
                Cond((res, evm), lambda a, b: a != b),
                Cond((op1, op2, amount), lambda a, b, x: x == a or x == b),
                nonzero,
            ),
        ),
        Rule("used_in_condition", (step, h),
             (Atom("condition", (c, h)), Atom("data_flow", (step, c, h)))),
        Rule(
            "UnhandledException", (h, caller, callee, amount),
            (Atom("call", (step, h, Const("CALL"), caller, callee, ANY, amount, ANY, ANY, ANY, zero)),),
            negated=(Atom("used_in_condition", (step, h)),),
            conditions=(nonzero,),
        ),
        Rule(
            "ShortAddress", (h, frm, to, amount),
            (
                Atom("transaction", (h, ANY, ANY, ANY, ANY, inp, ANY, ANY, one)),
                Atom("erc20_transfer", (ANY, h, ANY, frm, to, amount)),
            ),
            conditions=(
                Cond((inp,), lambda x: (x[:8] == rules.transfer and len(x) // 2 < rules.transfer_min_len)
                     or (x[:8] == rules.transfer_from and len(x) // 2 < rules.transfer_from_min_len)),
                nonzero,
            ),
        ),
    ]
    return out


def naive_eval(rules: RuleSet, store: FactStore) -> list:
    """Evaluate the declarative rules with the nested-loop engine (reference path)."""
    ctx = _Context(store)
    program = [r for r in datalog_rules(rules) if r.head in rules.enabled or r.head == "used_in_condition"]
    result = evaluate(program, {name: [tuple(r) for r in rows] for name, rows in store.tables.items()})
    findings = []
    for rule in rules.enabled:
        findings.extend(_collect(rule, result.get(rule, {}), ctx))
    return sort_findings(findings)
