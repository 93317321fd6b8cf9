"""Hand-built fixture corpus: one small scenario per case with known findings.

Every case scripts the execution of a few toy contracts through
:class:`TraceBuilder`, so the traces are genuine Geth-format documents with
consistent stacks and memory. Addresses are derived from the case index so
cases can be merged into one corpus without accidental cross-case matches.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..facts import TRANSFER_TOPIC
from ..trace import BlockMeta, TxMeta, dump_meta
from .builder import TraceBuilder, addr_word, keccak256

SEL_WITHDRAW = bytes.fromhex("3ccfd60b")
SEL_INIT_WALLET = bytes.fromhex("e46dcfeb")
SEL_EXECUTE = bytes.fromhex("b61d27f6")
SEL_KILL = bytes.fromhex("cbf0b0c0")
SEL_TRANSFER = bytes.fromhex("a9059cbb")
SEL_TRANSFER_FROM = bytes.fromhex("23b872dd")
SEL_BATCH = bytes.fromhex("83f12fff")

BASE_BLOCK = 5_000_000
BASE_TIME = 1_600_000_000

_ROLE_BYTE = {
    "attacker": 0xA1, "attack_contract": 0xAC, "victim": 0xD1, "receiver": 0xBE, "token": 0x70,
    "wallet": 0x3A, "library": 0x1B, "user": 0xC5, "other": 0x0E,
}


def address(role: str, case: int) -> str:
    return "0x" + bytes([_ROLE_BYTE[role]] * 18 + [case >> 8 & 0xFF, case & 0xFF]).hex()


def tx_hash(name: str, i: int) -> str:
    return "0x" + hashlib.sha256(f"{name}:{i}".encode()).hexdigest()


def word(x: int) -> bytes:
    return x.to_bytes(32, "big")


def mapping_slot(key: str, slot: int = 0) -> int:
    return int.from_bytes(keccak256(word(addr_word(key)) + word(slot)), "big")


@dataclass
class CaseTx:
    meta: TxMeta
    block: BlockMeta
    trace: dict  # Geth debug_traceTransaction result


@dataclass
class Case:
    name: str
    rule: str
    txs: list = field(default_factory=list)
    expected: list = field(default_factory=list)  # (rule, tx_hashes, amount)

    @property
    def positive(self) -> bool:
        return bool(self.expected)


class _CaseBuilder:
    def __init__(self, name: str, rule: str, index: int):
        self.case = Case(name, rule)
        self.index = index

    def addr(self, role: str) -> str:
        return address(role, self.index)

    def tx(self, b: TraceBuilder, *, input: bytes, offset: int = 0, tx_index: int = 0, status: int = 1,
           value: int = 0, balances=None, block_offset: int = 0) -> str:
        h = tx_hash(self.case.name, len(self.case.txs))
        block = BASE_BLOCK + 10 * self.index + block_offset
        meta = TxMeta(
            tx_hash=h, tx_index=tx_index, block_number=block, from_=b.sender, to=b.to, input=input,
            gas_used=60_000, gas_limit=300_000, status=status, value=value, balances=dict(balances or {}),
        )
        blk = BlockMeta(block, 7_000_000, 10_000_000, BASE_TIME + 13 * (block - BASE_BLOCK))
        self.case.txs.append(CaseTx(meta, blk, b.document()))
        return h

    def expect(self, rule: str, hashes, amount) -> None:
        self.case.expected.append((rule, tuple(hashes), str(amount)))


# --------------------------------------------------------------------------
# contract scripts


def _withdraw(b: TraceBuilder, victim: str, attacker: str, amount: int, reentries: int, effects_first: bool):
    """Victim's withdraw(): read the caller's balance, send it, then zero it."""
    b.op("CALLER").push(0).op("MSTORE")
    b.push(0).push(32).op("MSTORE")
    b.push(64).push(0).op("SHA3")
    b.op("DUP1").op("SLOAD")  # [slot, bal]
    if effects_first:
        b.push(0).op("DUP3").op("SSTORE")
    b.call(attacker, value=amount)  # enters the attacker's fallback
    _fallback(b, victim, attacker, amount, reentries, effects_first)
    # back in withdraw: [slot, bal, ok]
    b.op("ISZERO").push(0x1FF).op("JUMPI")
    if not effects_first:
        b.push(0).op("DUP3").op("SSTORE")
    b.op("POP").op("POP").op("STOP")


def _fallback(b: TraceBuilder, victim, attacker, amount, reentries, effects_first):
    b.op("CALLVALUE").op("POP")
    if reentries > 0:
        b.mstore_bytes(0, SEL_WITHDRAW)
        b.call(victim, args_offset=0, args_len=4)
        _withdraw(b, victim, attacker, amount, reentries - 1, effects_first)
        b.op("POP")
    b.op("STOP")


def reentrancy_case(name: str, index: int, amount: int, reentries: int = 1, effects_first: bool = False) -> Case:
    cb = _CaseBuilder(name, "Reentrancy", index)
    eoa, attacker, victim = cb.addr("attacker"), cb.addr("attack_contract"), cb.addr("victim")
    slot = mapping_slot(attacker)
    b = TraceBuilder(eoa, attacker, calldata=bytes.fromhex("9e5faafc"), storage={victim: {slot: amount}})
    # attack(): call victim.withdraw()
    b.mstore_bytes(0, SEL_WITHDRAW)
    b.call(victim, args_offset=0, args_len=4)
    _withdraw(b, victim, attacker, amount, reentries, effects_first)
    b.op("POP").op("STOP")
    h = cb.tx(b, input=bytes.fromhex("9e5faafc"))
    if not effects_first and amount:
        for depth2 in range(4, 4 + 2 * reentries, 2):
            cb.expect("Reentrancy", (h,), amount)
    return cb.case


def _init_wallet(b: TraceBuilder):
    b.push(4).op("CALLDATALOAD").push(0).op("SSTORE").op("STOP")


def _execute(b: TraceBuilder, to: str, amount: int):
    b.push(0).op("SLOAD").op("CALLER").op("EQ").push(0x80).op("JUMPI")
    b.op("JUMPDEST")
    b.call(to, value=amount, enter=False)
    b.op("ISZERO").push(0x1FF).op("JUMPI").op("STOP")


def parity1_case(name: str, index: int, amount: int, same_block: bool = True, swapped: bool = False,
                 via_library: bool = False, other_sender: bool = False) -> Case:
    cb = _CaseBuilder(name, "ParityWalletHack1", index)
    attacker, wallet, library = cb.addr("attacker"), cb.addr("wallet"), cb.addr("library")
    init_sender = cb.addr("other") if other_sender else attacker
    init_input = SEL_INIT_WALLET + word(addr_word(attacker)) + word(1) + word(10**18)
    exec_input = SEL_EXECUTE + word(addr_word(attacker)) + word(amount) + word(0x60) + word(0)

    def script(sender, data, body):
        b = TraceBuilder(sender, wallet, calldata=data)
        if via_library:
            b.op("CALLDATASIZE").push(0).push(0).op("CALLDATACOPY")
            b.call(library, args_offset=0, args_len=len(data), op="DELEGATECALL")
            body(b)
            b.op("POP").op("STOP")
        else:
            body(b)
        return b

    init_b = script(init_sender, init_input, lambda b: _init_wallet(b))
    exec_b = script(attacker, exec_input, lambda b: _execute(b, attacker, amount))
    if same_block:
        pos1, pos2 = (0, 0), (0, 3)
    else:
        pos1, pos2 = (0, 1), (2, 0)
    if swapped:
        pos1, pos2 = pos2, pos1
    h1 = cb.tx(init_b, input=init_input, block_offset=pos1[0], tx_index=pos1[1])
    h2 = cb.tx(exec_b, input=exec_input, block_offset=pos2[0], tx_index=pos2[1])
    if not swapped and not other_sender:
        cb.expect("ParityWalletHack1", (h1, h2), amount)
    return cb.case


def parity2_case(name: str, index: int, balance: int, target: str = "wallet", with_init: bool = True,
                 init_status: int = 1, kill_status: int = 1) -> Case:
    cb = _CaseBuilder(name, "ParityWalletHack2", index)
    attacker, contract = cb.addr("attacker"), cb.addr(target)
    init_input = SEL_INIT_WALLET + word(addr_word(attacker)) + word(1) + word(0)
    kill_input = SEL_KILL + word(addr_word(attacker))
    hashes = []
    if with_init:
        b = TraceBuilder(attacker, contract, calldata=init_input)
        _init_wallet(b)
        hashes.append(cb.tx(b, input=init_input, tx_index=1, status=init_status))
    b = TraceBuilder(attacker, contract, calldata=kill_input)
    b.push(0).op("SLOAD").op("CALLER").op("EQ").push(0x80).op("JUMPI").op("JUMPDEST")
    b.push(4).op("CALLDATALOAD").op("SELFDESTRUCT")
    hashes.append(cb.tx(b, input=kill_input, tx_index=2, status=kill_status, balances={contract: balance}))
    if with_init and init_status == 1 and kill_status == 1:
        cb.expect("ParityWalletHack2", hashes, balance)
    return cb.case


def _transfer_log(b: TraceBuilder):
    """Stack [amount, to] -> emits Transfer(caller, to, amount); leaves [amount, to]."""
    b.op("DUP2").push(0).op("MSTORE")
    b.op("DUP1").op("CALLER").push(TRANSFER_TOPIC).push(32).push(0).op("LOG3")


def _credit(b: TraceBuilder):
    """Stack [amount, to] -> balances[to] += amount; leaves [amount, to]."""
    b.op("DUP1").push(0).op("MSTORE").push(0).push(32).op("MSTORE").push(64).push(0).op("SHA3")
    b.op("DUP1").op("SLOAD").op("DUP4").op("ADD").op("SWAP1").op("SSTORE")


def overflow_transfer_case(name: str, index: int, balance: int, amount: int, from_calldata: bool = True,
                           guarded: bool = False, logged_amount=None) -> Case:
    """transfer(to, amount) with an unchecked ``balance - amount``."""
    cb = _CaseBuilder(name, "IntegerOverflow", index)
    user, token, receiver = cb.addr("user"), cb.addr("token"), cb.addr("receiver")
    data = SEL_TRANSFER + word(addr_word(receiver)) + word(amount)
    b = TraceBuilder(user, token, calldata=data, storage={token: {mapping_slot(user): balance}})
    if from_calldata:
        b.push(36).op("CALLDATALOAD")
    else:
        b.push(amount)
    b.op("CALLER").push(0).op("MSTORE").push(0).push(32).op("MSTORE").push(64).push(0).op("SHA3")
    b.op("DUP1").op("SLOAD")  # [amount, slot, bal]
    if guarded:
        b.op("DUP3").op("DUP2").op("LT").push(0x1FF).op("JUMPI")
    b.op("DUP3").op("SWAP1").op("SUB")  # bal - amount
    b.op("SWAP1").op("SSTORE")  # [amount]
    b.push(4).op("CALLDATALOAD")  # [amount, to]
    _credit(b)
    if logged_amount is not None:
        b.op("SWAP1").op("POP").push(logged_amount).op("SWAP1")
    _transfer_log(b)
    b.op("POP").op("POP").op("STOP")
    h = cb.tx(b, input=data)
    logged = amount if logged_amount is None else logged_amount
    if from_calldata and not guarded and amount > balance and logged:
        cb.expect("IntegerOverflow", (h,), logged)
    return cb.case


def overflow_batch_case(name: str, index: int, value: int, receivers: int = 2) -> Case:
    """batchTransfer(receivers, value): ``amount = cnt * value`` wraps to a tiny number."""
    cb = _CaseBuilder(name, "IntegerOverflow", index)
    user, token = cb.addr("user"), cb.addr("token")
    targets = [address("receiver", index * 16 + i) for i in range(receivers)]
    data = SEL_BATCH + word(receivers) + word(value)
    b = TraceBuilder(user, token, calldata=data, storage={token: {mapping_slot(user): 10}})
    b.push(36).op("CALLDATALOAD").push(4).op("CALLDATALOAD").op("MUL")  # [value, amount]... via MUL(cnt, value)
    b.op("CALLER").push(0).op("MSTORE").push(0).push(32).op("MSTORE").push(64).push(0).op("SHA3")
    b.op("DUP1").op("SLOAD")  # [amount, slot, bal]
    b.op("DUP3").op("DUP2").op("LT").push(0x1FF).op("JUMPI")  # require(bal >= amount)
    b.op("DUP3").op("SWAP1").op("SUB").op("SWAP1").op("SSTORE").op("POP")
    for t in targets:
        b.push(36).op("CALLDATALOAD").push(t)  # [value, to]
        _credit(b)
        _transfer_log(b)
        b.op("POP").op("POP")
    b.op("STOP")
    h = cb.tx(b, input=data)
    if receivers * value >= 1 << 256:
        for _ in targets:
            cb.expect("IntegerOverflow", (h,), value)
    return cb.case


def unhandled_case(name: str, index: int, amount: int, enter: bool = True, checked: bool = False) -> Case:
    cb = _CaseBuilder(name, "UnhandledException", index)
    user, sender_contract, receiver = cb.addr("user"), cb.addr("victim"), cb.addr("receiver")
    b = TraceBuilder(user, sender_contract, calldata=bytes.fromhex("4e71d92d"))
    b.op("CALLVALUE").op("ISZERO").push(0x40).op("JUMPI").op("JUMPDEST")  # unrelated condition
    b.call(receiver, value=amount, enter=enter, success=False)
    if enter:
        b.push(0).push(0).op("REVERT")
    if checked:
        b.op("ISZERO").push(0x1FF).op("JUMPI")
    elif enter:
        b.op("POP")
    else:
        b.push(0).op("MSTORE")
    b.push(1).push(1).op("SSTORE").op("STOP")
    h = cb.tx(b, input=bytes.fromhex("4e71d92d"), balances={sender_contract: 10**18})
    if amount and not checked:
        cb.expect("UnhandledException", (h,), amount)
    return cb.case


def short_address_case(name: str, index: int, selector: bytes, length: int, amount: int, status: int = 1) -> Case:
    cb = _CaseBuilder(name, "ShortAddress", index)
    user, token = cb.addr("user"), cb.addr("token")
    # receiver address ending in a zero byte, which the truncated encoding drops
    receiver = "0x" + bytes([_ROLE_BYTE["receiver"]] * 19 + [0]).hex()
    if selector == SEL_TRANSFER:
        full = selector + word(addr_word(receiver)) + word(amount)
        to_off, amount_off = 4, 36
    else:
        full = selector + word(addr_word(user)) + word(addr_word(receiver)) + word(amount)
        to_off, amount_off = 36, 68
    data = full[: length] if length <= len(full) else full + b"\0" * (length - len(full))
    b = TraceBuilder(user, token, calldata=data, storage={token: {mapping_slot(user): 10**30}})
    b.push(amount_off).op("CALLDATALOAD").push(to_off).op("CALLDATALOAD")  # [amount, to]
    _credit(b)
    _transfer_log(b)
    b.op("POP").op("POP").op("STOP")
    h = cb.tx(b, input=data, status=status)
    logged = int.from_bytes(data[amount_off : amount_off + 32].ljust(32, b"\0"), "big")
    threshold = 68 if selector == SEL_TRANSFER else 100
    if status == 1 and length < threshold and logged:
        cb.expect("ShortAddress", (h,), logged)
    return cb.case


# --------------------------------------------------------------------------
# the corpus


def build_corpus() -> list:
    """All cases, in a fixed order (case index = position + 1)."""
    specs = [
        ("reentrancy_dao", lambda i: reentrancy_case("reentrancy_dao", i, amount=100)),
        ("reentrancy_triple", lambda i: reentrancy_case("reentrancy_triple", i, amount=40, reentries=2)),
        ("reentrancy_effects_first", lambda i: reentrancy_case("reentrancy_effects_first", i, amount=100, effects_first=True)),
        ("reentrancy_dao_zero", lambda i: reentrancy_case("reentrancy_dao_zero", i, amount=0)),
        ("parity1_same_block", lambda i: parity1_case("parity1_same_block", i, amount=82_000)),
        ("parity1_cross_block_library", lambda i: parity1_case("parity1_cross_block_library", i, amount=26_793, same_block=False, via_library=True)),
        ("parity1_swapped", lambda i: parity1_case("parity1_swapped", i, amount=82_000, swapped=True)),
        ("parity1_other_sender", lambda i: parity1_case("parity1_other_sender", i, amount=82_000, other_sender=True)),
        ("parity2_wallet", lambda i: parity2_case("parity2_wallet", i, balance=500)),
        ("parity2_library", lambda i: parity2_case("parity2_library", i, balance=0, target="library")),
        ("parity2_no_init", lambda i: parity2_case("parity2_no_init", i, balance=500, with_init=False)),
        ("parity2_kill_failed", lambda i: parity2_case("parity2_kill_failed", i, balance=500, kill_status=0)),
        ("overflow_underflow_transfer", lambda i: overflow_transfer_case("overflow_underflow_transfer", i, balance=0, amount=1)),
        ("overflow_batch_mul", lambda i: overflow_batch_case("overflow_batch_mul", i, value=1 << 255)),
        ("overflow_guarded", lambda i: overflow_transfer_case("overflow_guarded", i, balance=5, amount=1, guarded=True)),
        ("overflow_constant", lambda i: overflow_transfer_case("overflow_constant", i, balance=0, amount=1, from_calldata=False)),
        ("overflow_zero", lambda i: overflow_transfer_case("overflow_zero", i, balance=0, amount=1, logged_amount=0)),
        ("unhandled_revert", lambda i: unhandled_case("unhandled_revert", i, amount=5)),
        ("unhandled_no_frame", lambda i: unhandled_case("unhandled_no_frame", i, amount=7, enter=False)),
        ("unhandled_checked", lambda i: unhandled_case("unhandled_checked", i, amount=5, checked=True)),
        ("unhandled_zero", lambda i: unhandled_case("unhandled_zero", i, amount=0)),
        ("short_transfer_67", lambda i: short_address_case("short_transfer_67", i, SEL_TRANSFER, 67, 10**18)),
        ("short_transfer_from_99", lambda i: short_address_case("short_transfer_from_99", i, SEL_TRANSFER_FROM, 99, 10**18)),
        ("short_transfer_68", lambda i: short_address_case("short_transfer_68", i, SEL_TRANSFER, 68, 10**18)),
        ("short_transfer_from_100", lambda i: short_address_case("short_transfer_from_100", i, SEL_TRANSFER_FROM, 100, 10**18)),
        ("short_zero", lambda i: short_address_case("short_zero", i, SEL_TRANSFER, 67, 0)),
        ("short_failed_status", lambda i: short_address_case("short_failed_status", i, SEL_TRANSFER, 67, 10**18, status=0)),
    ]
    return [make(i) for i, (_, make) in enumerate(specs, start=1)]


def case_by_name(name: str) -> Case:
    for c in build_corpus():
        if c.name == name:
            return c
    raise KeyError(name)


def write_case(case: Case, directory) -> Path:
    """Write ``traces/<hash>.trace.json``, ``meta.jsonl`` and ``expected.json``."""
    directory = Path(directory)
    traces = directory / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    for t in case.txs:
        (traces / f"{t.meta.tx_hash}.trace.json").write_text(json.dumps(t.trace, indent=1) + "\n")
    (directory / "meta.jsonl").write_text(dump_meta((t.meta, t.block) for t in case.txs))
    expected = [{"rule": r, "tx_hashes": list(h), "amount": a} for r, h, a in case.expected]
    (directory / "expected.json").write_text(json.dumps(expected, indent=1) + "\n")
    return directory


def merged(cases) -> Case:
    out = Case("all", "*")
    for c in cases:
        out.txs.extend(c.txs)
        out.expected.extend(c.expected)
    return out


# --------------------------------------------------------------------------
# fund-flow fixture for the tracing stage


def attack_time(case_index: int) -> int:
    return BASE_TIME + 13 * 10 * case_index


def provider_records(cases=None) -> dict:
    """Transfers around the DAO-case attacker: a chain to an exchange and a busy hub.

    attacker -> mule -> mixer-hop -> exchange deposit, all after the attack,
    plus an older funding transfer into the attacker and a hub with 1,001
    transfers that must not be expanded.
    """
    attacker = address("attacker", 1)
    t0 = attack_time(1)
    mule = "0x" + "5a" * 20
    hop = "0x" + "5b" * 20
    exchange = "0x" + "ec" * 20
    funder = "0x" + "f0" * 20
    hub = "0x" + "9b" * 20
    hub_peer = "0x" + "9c" * 20

    def rec(kind, frm, to, value, n, ts, **token):
        r = {"kind": kind, "from": frm, "to": to, "value": str(value),
             "hash": "0x" + hashlib.sha256(f"flow:{n}".encode()).hexdigest(), "timestamp": ts}
        r.update(token)
        return r

    chain = [
        rec("normal", attacker, mule, 10 * 10**18, 1, t0 + 100),
        rec("internal", mule, hop, 4 * 10**18, 2, t0 + 200),
        rec("normal", hop, exchange, 7 * 10**18, 3, t0 + 300),
        rec("normal", funder, attacker, 1 * 10**18, 4, t0 - 500),
        rec("token", attacker, hub, 5_000_000, 5, t0 + 50, token_name="Tether USD", token_symbol="USDT", token_decimals=6),
    ]
    hub_traffic = [rec("normal", hub, hub_peer, 1, 100 + i, t0 + 1000 + i) for i in range(1000)]
    by_address: dict = {}
    for r in chain + hub_traffic:
        for a in {r["from"], r["to"]}:
            by_address.setdefault(a, []).append(r)
    return by_address


def labels_csv() -> str:
    return "address,category,label\n" + "0x" + "ec" * 20 + ",exchange,Kraken 1\n" + "0x" + "9b" * 20 + ",exchange,Busy Hub\n"


def write_provider(directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for addr, records in sorted(provider_records().items()):
        (directory / f"{addr}.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return directory


def write_corpus(directory) -> Path:
    """Write every case, the merged ``all`` set, the provider fixture and a run config."""
    directory = Path(directory)
    cases = build_corpus()
    for c in cases:
        write_case(c, directory / "cases" / c.name)
    write_case(merged(cases), directory / "all")
    write_provider(directory / "provider")
    (directory / "labels.csv").write_text(labels_csv())
    (directory / "horus.toml").write_text(
        "[extract]\n"
        'traces = "all/traces"\n'
        'meta = "all/meta.jsonl"\n'
        "skip_gas_limit_21000 = true\n"
        "\n[analyze]\n"
        'rules = "all"\n'
        "\n[trace]\n"
        'provider = "fixture:provider"\n'
        'direction = "forward"\n'
        "hops = 3\n"
        "degree_cap = 1000\n"
        'labels = "labels.csv"\n'
        "\n[output]\n"
        'dir = "out"\n'
    )
    return directory
