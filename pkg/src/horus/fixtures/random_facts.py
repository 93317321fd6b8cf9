"""Small random fact stores for differential testing of the detectors.

Domains are deliberately tiny (two or three addresses, a handful of steps,
values drawn from a short list) so that joins succeed often enough for every
rule to fire on a good fraction of stores.
"""

from __future__ import annotations

import random

from ..facts import (
    Arithmetic, Block, Call, Condition, DataFlowFact, Erc20Transfer, FactStore, Opcode, SelfDestruct, Storage,
    Transaction,
)

ADDRS = ["0x" + c * 40 for c in "abc"]
VALUES = ["0", "1", "5"]
SELECTORS = ["e46dcfeb", "b61d27f6", "cbf0b0c0", "a9059cbb", "23b872dd", "12345678"]
OPS = ["CALLDATALOAD", "CALLDATACOPY", "ADD", "SUB", "MUL", "SSTORE", "SLOAD", "CALL", "JUMPI", "POP"]


def _input(rng: random.Random) -> str:
    sel = rng.choice(SELECTORS)
    if sel == "a9059cbb":
        n = rng.choice([67, 68])
    elif sel == "23b872dd":
        n = rng.choice([99, 100])
    else:
        n = rng.choice([4, 36])
    return sel + "00" * (n - 4)


def random_store(rng: random.Random, max_txs: int = 3, steps: int = 8) -> FactStore:
    store = FactStore()
    txs = []
    for i in range(rng.randint(1, max_txs)):
        h = "0x%064x" % rng.getrandbits(32)
        block = rng.randint(1, 3)
        txs.append(h)
        store.add(Block(block, 10, 100, 1_000 + block))
        store.add(Transaction(h, rng.randint(0, 2), block, rng.choice(ADDRS[:2]), rng.choice(ADDRS[1:]),
                              _input(rng), 50, 100, 1 if rng.random() < 0.85 else 0))
        for s in range(steps):
            store.add(Opcode(s, rng.choice(OPS), h))

        def step():
            return rng.randrange(steps)

        for _ in range(rng.randint(0, 5)):
            store.add(Storage(step(), rng.choice(["SLOAD", "SSTORE"]), h, rng.choice(ADDRS), rng.choice(ADDRS[:2]),
                              rng.choice(["1", "2"]), rng.choice(VALUES), rng.randint(1, 3)))
        for _ in range(rng.randint(0, 4)):
            store.add(Call(step(), h, rng.choice(["CALL", "CALL", "DELEGATECALL"]), rng.choice(ADDRS[:2]),
                           rng.choice(ADDRS[1:]), "", rng.choice(VALUES), rng.randint(1, 3), rng.randint(0, 1),
                           rng.randint(0, 1), rng.randint(0, 1)))
        for _ in range(rng.randint(0, 2)):
            a, b = rng.choice(VALUES), rng.choice(VALUES)
            wide = rng.choice([str(int(a) + int(b)), "-1", str(1 << 256)])
            store.add(Arithmetic(step(), rng.choice(["ADD", "SUB", "MUL"]), a, b, wide,
                                 rng.choice([wide if not wide.startswith("-") and int(wide) < 1 << 256 else "0", "0"]), h))
        for _ in range(rng.randint(0, 6)):
            s1 = step()
            store.add(DataFlowFact(s1, rng.randrange(s1, steps), h))
        for _ in range(rng.randint(0, 2)):
            store.add(Condition(step(), h))
        for _ in range(rng.randint(0, 2)):
            store.add(Erc20Transfer(step(), h, ADDRS[2], rng.choice(ADDRS), rng.choice(ADDRS), rng.choice(VALUES)))
        if rng.random() < 0.3:
            store.add(SelfDestruct(step(), h, rng.choice(ADDRS), rng.choice(ADDRS), ADDRS[0], rng.choice(VALUES)))
        if rng.random() < 0.4:
            _plant_reentrancy(rng, store, h, steps)
        if rng.random() < 0.4:
            _plant_overflow(rng, store, h, steps)
    if len(txs) > 1 and rng.random() < 0.5:
        _plant_parity(rng, store)
    return store.sorted()


def _jitter(rng: random.Random, base: int, steps: int) -> int:
    """Mostly ``base``; sometimes a random step so orderings can break."""
    return base if rng.random() < 0.8 else rng.randrange(steps)


def _plant_reentrancy(rng: random.Random, store: FactStore, h: str, steps: int) -> None:
    caller, callee = ADDRS[0], ADDRS[1]
    d = rng.randint(1, 2)
    cid, branch = rng.randint(0, 1), rng.randint(0, 1)
    value = rng.choice(VALUES)
    store.add(Storage(_jitter(rng, 0, steps), "SLOAD", h, ADDRS[2], caller, "1", "5", d))
    store.add(Call(_jitter(rng, 1, steps), h, "CALL", caller, callee, "", value, d, cid, branch, 1))
    store.add(Call(_jitter(rng, 2, steps), h, "CALL", caller, callee, "", value, d + rng.choice([0, 2]), cid,
                   rng.choice([branch, branch, 1 - branch]), rng.choice([1, 1, 0])))
    store.add(Storage(_jitter(rng, steps - 1, steps), "SSTORE", h, ADDRS[2], caller, rng.choice(["1", "1", "2"]), "0",
                      rng.choice([d, d, d + 1])))


def _plant_overflow(rng: random.Random, store: FactStore, h: str, steps: int) -> None:
    src, ar, st = 0, steps // 2, steps - 1
    store.add(Opcode(src, "CALLDATALOAD", h))
    a, b = rng.choice(VALUES[1:]), rng.choice(VALUES)
    store.add(Arithmetic(ar, "SUB", a, b, "-4", str((1 << 256) - 4) if rng.random() < 0.8 else "-4", h))
    store.add(DataFlowFact(_jitter(rng, src, steps), ar, h))
    store.add(DataFlowFact(ar, _jitter(rng, st, steps), h))
    store.add(Storage(st, "SSTORE", h, ADDRS[0], ADDRS[1], "1", "2", rng.choice([1, 1, 2])))
    store.add(Erc20Transfer(ar, h, ADDRS[2], ADDRS[0], ADDRS[1], rng.choice([a, b, "0", "7"])))


def _plant_parity(rng: random.Random, store: FactStore) -> None:
    txs = store["transaction"]
    t1, t2 = rng.sample(txs, 2)
    second = rng.choice(["b61d27f6", "cbf0b0c0"])
    txs.remove(t1)
    txs.remove(t2)
    txs.append(t1._replace(input="e46dcfeb" + t1.input[8:]))
    txs.append(t2._replace(input=second + t2.input[8:], from_=rng.choice([t1.from_, t1.from_, t2.from_]), to=t1.to))
