"""Fact relations extracted from replayed transactions and their TSV serialization.

The ten relations and their column order::

    opcode(step, op, tx_hash)
    data_flow(step1, step2, tx_hash)
    arithmetic(step, op, operand1, operand2, arithmetic_result, evm_result, tx_hash)
    storage(step, op, tx_hash, caller, contract, index, value, depth)
    condition(step, tx_hash)
    erc20_transfer(step, tx_hash, contract, from, to, value)
    call(step, tx_hash, op, caller, callee, input, value, depth, call_id, call_branch, result)
    selfdestruct(step, tx_hash, caller, contract, destination, value)
    block(block_number, gas_used, gas_limit, timestamp)
    transaction(tx_hash, tx_index, block_number, from, to, input, gas_used, gas_limit, status)

Value columns are decimal strings; ``input`` columns are bare lowercase hex
(no ``0x``) so that rules can take 8-character selector prefixes.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

from . import taint
from .errors import FactFileError
from .trace import WORD_MOD, BlockMeta, ExecutionTrace, OrderKey, TxMeta, word_to_address

log = logging.getLogger(__name__)

# keccak256("Transfer(address,address,uint256)")
TRANSFER_TOPIC = 0xDDF252AD1BE2C89B69C2B068FC378DAA952BA7F163C4A11628F55A4DF523B3EF


class Opcode(NamedTuple):
    step: int
    op: str
    tx_hash: str


class DataFlowFact(NamedTuple):
    step1: int
    step2: int
    tx_hash: str


class Arithmetic(NamedTuple):
    step: int
    op: str
    operand1: str
    operand2: str
    arithmetic_result: str
    evm_result: str
    tx_hash: str


class Storage(NamedTuple):
    step: int
    op: str
    tx_hash: str
    caller: str
    contract: str
    index: str
    value: str
    depth: int


class Condition(NamedTuple):
    step: int
    tx_hash: str


class Erc20Transfer(NamedTuple):
    step: int
    tx_hash: str
    contract: str
    from_: str
    to: str
    value: str


class Call(NamedTuple):
    step: int
    tx_hash: str
    op: str
    caller: str
    callee: str
    input: str
    value: str
    depth: int
    call_id: int
    call_branch: int
    result: int


class SelfDestruct(NamedTuple):
    step: int
    tx_hash: str
    caller: str
    contract: str
    destination: str
    value: str


class Block(NamedTuple):
    block_number: int
    gas_used: int
    gas_limit: int
    timestamp: int


class Transaction(NamedTuple):
    tx_hash: str
    tx_index: int
    block_number: int
    from_: str
    to: str
    input: str
    gas_used: int
    gas_limit: int
    status: int


ROW_TYPES = {
    "opcode": Opcode,
    "data_flow": DataFlowFact,
    "arithmetic": Arithmetic,
    "storage": Storage,
    "condition": Condition,
    "erc20_transfer": Erc20Transfer,
    "call": Call,
    "selfdestruct": SelfDestruct,
    "block": Block,
    "transaction": Transaction,
}
RELATIONS = tuple(ROW_TYPES)

# column -> type used by the schema checker; "number" columns are ints
COLUMN_TYPES = {
    "opcode": ("number", "Opcode", "symbol"),
    "data_flow": ("number", "number", "symbol"),
    "arithmetic": ("number", "Opcode", "Value", "Value", "Wide", "Value", "symbol"),
    "storage": ("number", "Opcode", "symbol", "Address", "Address", "Value", "Value", "number"),
    "condition": ("number", "symbol"),
    "erc20_transfer": ("number", "symbol", "Address", "Address", "Address", "Value"),
    "call": ("number", "symbol", "Opcode", "Address", "Address", "symbol", "Value", "number", "number", "number", "number"),
    "selfdestruct": ("number", "symbol", "Address", "Address", "Address", "Value"),
    "block": ("number", "number", "number", "number"),
    "transaction": ("symbol", "number", "number", "Address", "Address", "symbol", "number", "number", "number"),
}


def column_names(relation: str) -> tuple:
    return tuple(f.rstrip("_") for f in ROW_TYPES[relation]._fields)


@dataclass
class FactStore:
    tables: dict = field(default_factory=lambda: {name: [] for name in RELATIONS})

    def add(self, row) -> None:
        self.tables[_relation_of(row)].append(row)

    def __getitem__(self, relation: str) -> list:
        return self.tables[relation]

    def __eq__(self, other) -> bool:
        return isinstance(other, FactStore) and self.sorted().tables == other.sorted().tables

    def counts(self) -> dict:
        return {name: len(rows) for name, rows in self.tables.items()}

    def total(self) -> int:
        return sum(self.counts().values())

    def tx_order(self) -> dict:
        return {t.tx_hash: (t.block_number, t.tx_index) for t in self.tables["transaction"]}

    def order_key(self, tx_hash: str, step: int = 0) -> OrderKey:
        b, i = self.tx_order().get(tx_hash, (-1, -1))
        return OrderKey(b, i, step)

    def merge(self, *others: "FactStore") -> "FactStore":
        out = FactStore({name: list(rows) for name, rows in self.tables.items()})
        for other in others:
            for name, rows in other.tables.items():
                out.tables[name].extend(rows)
        return out.sorted()

    def sorted(self) -> "FactStore":
        order = self.tx_order()
        far = (1 << 62, 1 << 62)

        def key(row):
            if isinstance(row, Block):
                return (row.block_number, -1, -1, row)
            if isinstance(row, Transaction):
                return (row.block_number, row.tx_index, -1, row)
            b, i = order.get(row.tx_hash, far)
            step = row.step2 if isinstance(row, DataFlowFact) else row.step
            return (b, i, step, row)

        return FactStore({name: sorted(set(rows), key=key) for name, rows in self.tables.items()})


def _relation_of(row) -> str:
    for name, cls in ROW_TYPES.items():
        if type(row) is cls:
            return name
    raise TypeError(f"not a fact row: {row!r}")


# --------------------------------------------------------------------------
# extraction


def decode_erc20_transfer(event: taint.LogEvent, tx_hash: str) -> Optional[Erc20Transfer]:
    """Decode an ERC-20 ``Transfer`` log, or return None if it is not one."""
    topics = event.topics
    if len(topics) != 3 or topics[0] != TRANSFER_TOPIC:
        return None
    if len(event.data) != 32:
        log.warning(
            "tx %s step %d: Transfer log with %d data bytes, expected 32; skipped",
            tx_hash, event.step, len(event.data),
        )
        return None
    amount = int.from_bytes(event.data, "big")
    return Erc20Transfer(
        event.step, tx_hash, event.contract, word_to_address(topics[1]), word_to_address(topics[2]), str(amount)
    )


def extract_facts(
    trace: ExecutionTrace,
    tx: TxMeta,
    block: BlockMeta,
    config: taint.TaintConfig = taint.DEFAULT_CONFIG,
    debug=None,
) -> FactStore:
    store = FactStore()
    h = tx.tx_hash
    store.add(Block(block.block_number, block.gas_used, block.gas_limit, block.timestamp))
    store.add(
        Transaction(h, tx.tx_index, tx.block_number, tx.from_, tx.to, tx.input.hex(), tx.gas_used, tx.gas_limit, tx.status)
    )
    for r in trace.steps:
        store.add(Opcode(r.step, r.op, h))

    for ev in taint.replay(trace, tx, config, debug=debug):
        if isinstance(ev, taint.DataFlow):
            store.add(DataFlowFact(ev.src, ev.dst, h))
        elif isinstance(ev, taint.ArithObservation):
            store.add(
                Arithmetic(ev.step, ev.op, str(ev.operand1), str(ev.operand2), str(ev.wide_result), str(ev.evm_result), h)
            )
        elif isinstance(ev, taint.StorageAccess):
            store.add(Storage(ev.step, ev.op, h, ev.caller, ev.contract, str(ev.index), str(ev.value), ev.depth))
        elif isinstance(ev, taint.ConditionEvent):
            store.add(Condition(ev.step, h))
        elif isinstance(ev, taint.CallEvent):
            store.add(
                Call(ev.step, h, ev.op, ev.caller, ev.callee, ev.input.hex(), str(ev.value), ev.depth,
                     ev.call_id, ev.call_branch, ev.result)
            )
        elif isinstance(ev, taint.SelfDestructEvent):
            store.add(SelfDestruct(ev.step, h, ev.caller, ev.contract, ev.destination, str(ev.value)))
        elif isinstance(ev, taint.LogEvent):
            row = decode_erc20_transfer(ev, h)
            if row is not None:
                store.add(row)
    return store.sorted()


# --------------------------------------------------------------------------
# integrity


_ADDR = re.compile(r"^0x[0-9a-f]{40}$")
_HEX = re.compile(r"^[0-9a-f]*$")
_DEC = re.compile(r"^(0|[1-9][0-9]*)$")
_WIDE = re.compile(r"^(0|-?[1-9][0-9]*)$")


def check_integrity(store: FactStore) -> list:
    """Return a list of violated invariants (empty when the store is consistent)."""
    problems = []
    steps = {(r.step, r.tx_hash) for r in store["opcode"]}
    for name in ("condition", "storage", "call", "selfdestruct", "arithmetic", "erc20_transfer"):
        for r in store[name]:
            if (r.step, r.tx_hash) not in steps:
                problems.append(f"{name}: step {r.step} of {r.tx_hash} has no opcode row")
    for r in store["data_flow"]:
        for s in (r.step1, r.step2):
            if (s, r.tx_hash) not in steps:
                problems.append(f"data_flow: step {s} of {r.tx_hash} has no opcode row")
    blocks = {b.block_number for b in store["block"]}
    for t in store["transaction"]:
        if t.block_number not in blocks:
            problems.append(f"transaction {t.tx_hash}: block {t.block_number} missing")
    for name, types in COLUMN_TYPES.items():
        for r in store[name]:
            for value, ty in zip(r, types):
                if ty == "Value" and not (_DEC.match(value) and int(value) < WORD_MOD):
                    problems.append(f"{name}: value {value!r} outside [0, 2^256)")
    return problems


def validate_cell(value: str, ty: str) -> bool:
    if ty == "number":
        return _WIDE.match(value) is not None
    if ty == "Value":
        return _DEC.match(value) is not None and int(value) < WORD_MOD
    if ty == "Wide":
        return _WIDE.match(value) is not None
    if ty == "Address":
        return _ADDR.match(value) is not None
    if ty == "Opcode":
        return value.isalnum() and value.isupper()
    return "\t" not in value and "\n" not in value


# --------------------------------------------------------------------------
# serialization


def _cell(value) -> str:
    return str(value)


def write_fact_files(store: FactStore, directory, extra: Optional[dict] = None) -> list:
    """Write ``<relation>.facts`` files and ``manifest.json``; return the paths written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    store = store.sorted()
    written = []
    for name in RELATIONS:
        path = directory / f"{name}.facts"
        body = "".join("\t".join(_cell(v) for v in row) + "\n" for row in store[name])
        path.write_text(body, encoding="utf-8", newline="\n")
        written.append(path)
    manifest = {
        "relations": [
            {"name": name, "columns": list(column_names(name)), "arity": len(ROW_TYPES[name]._fields),
             "rows": len(store[name])}
            for name in RELATIONS
        ]
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)
    return written


def read_fact_files(directory) -> FactStore:
    directory = Path(directory)
    store = FactStore()
    for name in RELATIONS:
        path = directory / f"{name}.facts"
        if not path.exists():
            raise FactFileError(f"missing relation file for '{name}': {path}")
        cls = ROW_TYPES[name]
        types = COLUMN_TYPES[name]
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            cells = line.split("\t")
            if len(cells) != len(types):
                raise FactFileError(f"{path}:{lineno}: expected {len(types)} columns, got {len(cells)}")
            values = [int(c) if ty == "number" else c for c, ty in zip(cells, types)]
            store.tables[name].append(cls(*values))
    return store.sorted()


def validate_fact_dir(directory) -> list:
    """Schema check of a fact directory: arity and cell types of every line."""
    directory = Path(directory)
    problems = []
    for name in RELATIONS:
        path = directory / f"{name}.facts"
        if not path.exists():
            problems.append(f"{name}: file missing")
            continue
        raw = path.read_bytes()
        if raw and not raw.endswith(b"\n"):
            problems.append(f"{name}: last line not newline-terminated")
        types = COLUMN_TYPES[name]
        for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
            cells = line.split("\t")
            if len(cells) != len(types):
                problems.append(f"{name}:{lineno}: arity {len(cells)} != {len(types)}")
                continue
            for col, (cell, ty) in enumerate(zip(cells, types)):
                if not validate_cell(cell, ty):
                    problems.append(f"{name}:{lineno}: column {col} {cell!r} is not a valid {ty}")
    return problems
