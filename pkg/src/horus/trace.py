"""Execution traces, transaction/block metadata and the global execution order.

Two on-disk trace forms are understood: the JSON result of a
``debug_traceTransaction`` call (Geth ``structLogs``) and a compact
line-oriented "reduced" form that keeps only what the analysis needs.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Union

from . import opcodes
from .errors import TraceParseError, TraceSchemaError, ValidationError

WORD_MOD = 1 << 256
REDUCED_HEADER = "HORUS-TRACE v1"

_ADDR_RE = re.compile(r"^0x[0-9a-f]{40}$")
_HASH_RE = re.compile(r"^0x[0-9a-f]{64}$")


@dataclass(frozen=True)
class StepRecord:
    step: int
    op: str
    depth: int
    stack_top: tuple[int, ...] = ()
    memory_slice: Optional[bytes] = None
    storage_delta: Optional[tuple[int, int]] = None
    error: bool = False


@dataclass(frozen=True)
class ExecutionTrace:
    steps: tuple[StepRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i):
        return self.steps[i]


@dataclass(frozen=True)
class TxMeta:
    tx_hash: str
    tx_index: int
    block_number: int
    from_: str
    to: str
    input: bytes = b""
    gas_used: int = 0
    gas_limit: int = 0
    status: int = 1
    value: int = 0
    # pre-transaction balances, used to size SELFDESTRUCT sweeps
    balances: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "tx_hash", normalize_hash(self.tx_hash))
        object.__setattr__(self, "from_", normalize_address(self.from_))
        object.__setattr__(self, "to", normalize_address(self.to))
        if self.status not in (0, 1):
            raise ValidationError(f"{self.tx_hash}: status must be 0 or 1, got {self.status}")
        if self.tx_index < 0:
            raise ValidationError(f"{self.tx_hash}: negative tx_index")

    @property
    def order(self) -> "OrderKey":
        return OrderKey(self.block_number, self.tx_index, 0)


@dataclass(frozen=True)
class BlockMeta:
    block_number: int
    gas_used: int
    gas_limit: int
    timestamp: int

    def __post_init__(self):
        if self.gas_used > self.gas_limit:
            raise ValidationError(f"block {self.block_number}: gas_used exceeds gas_limit")
        if self.timestamp <= 0:
            raise ValidationError(f"block {self.block_number}: timestamp must be positive")


class OrderKey(NamedTuple):
    block_number: int
    tx_index: int
    step: int


def compare_order(a: OrderKey, b: OrderKey) -> int:
    """Three-way lexicographic comparison on (block, tx index, step)."""
    a, b = tuple(a), tuple(b)
    return (a > b) - (a < b)


# --------------------------------------------------------------------------
# value helpers


def normalize_address(value) -> str:
    """Lowercase 0x-prefixed 20-byte hex. ``None``/empty maps to the zero address."""
    if value is None or value == "":
        return "0x" + "00" * 20
    if isinstance(value, int):
        return "0x%040x" % (value % (1 << 160))
    s = str(value).lower()
    if not s.startswith("0x"):
        s = "0x" + s
    if not _ADDR_RE.match(s):
        raise ValidationError(f"malformed address: {value!r}")
    return s


def normalize_hash(value) -> str:
    s = str(value).lower()
    if not s.startswith("0x"):
        s = "0x" + s
    if not _HASH_RE.match(s):
        raise ValidationError(f"malformed 32-byte hash: {value!r}")
    return s


def word_to_address(word: int) -> str:
    return "0x%040x" % (word & ((1 << 160) - 1))


def word_bytes(word: int) -> bytes:
    return (word % WORD_MOD).to_bytes(32, "big")


def parse_word(text) -> int:
    """Geth emits stack words either as 0x-prefixed minimal hex or bare 64-char hex."""
    if isinstance(text, int):
        value = text
    else:
        s = str(text).strip().lower()
        if s.startswith("0x"):
            s = s[2:]
        value = int(s or "0", 16)
    if not 0 <= value < WORD_MOD:
        raise ValueError(f"stack word out of range: {text!r}")
    return value


def parse_bytes(text) -> bytes:
    s = str(text or "").strip().lower()
    if s.startswith("0x"):
        s = s[2:]
    return bytes.fromhex(s)


# --------------------------------------------------------------------------
# operand projection


def memory_region(op: str, operands: tuple[int, ...]) -> Optional[tuple[int, int]]:
    """(offset, size) of the memory an opcode reads before executing, if any."""
    if op == "SHA3" or op in ("RETURN", "REVERT") or opcodes.is_log(op):
        return operands[0], operands[1]
    if op == "MLOAD":
        return operands[0], 32
    if op in ("CALL", "CALLCODE"):
        return operands[3], operands[4]
    if op in ("DELEGATECALL", "STATICCALL"):
        return operands[2], operands[3]
    if op in opcodes.CREATE_OPS:
        return operands[1], operands[2]
    return None


def _slice_memory(words: list, offset: int, size: int) -> bytes:
    if size == 0:
        return b""
    buf = b"".join(parse_bytes(w).rjust(32, b"\0") for w in words)
    chunk = buf[offset : offset + size]
    return chunk + b"\0" * (size - len(chunk))


# --------------------------------------------------------------------------
# Geth structLogs


def parse_geth_trace(document: Union[str, bytes, dict]) -> ExecutionTrace:
    """Parse a ``debug_traceTransaction`` result into an ExecutionTrace.

    Full stack and memory snapshots are projected down to the operands the
    opcode consumes. Call outcomes are read from the caller's stack once the
    frame returns and recorded as the ``error`` flag on the record that ends
    the failed frame (or on the call itself when no frame was entered).
    """
    if isinstance(document, dict):
        doc = document
    else:
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            offset = len(exc.doc[: exc.pos].encode("utf-8"))
            raise TraceParseError(f"malformed JSON at byte offset {offset}: {exc.msg}") from None

    if isinstance(doc, dict) and "result" in doc and isinstance(doc["result"], dict):
        doc = doc["result"]
    if not isinstance(doc, dict) or not isinstance(doc.get("structLogs"), list):
        raise TraceSchemaError("document has no structLogs array")

    logs = doc["structLogs"]
    records: list[StepRecord] = []
    for i, entry in enumerate(logs):
        if not isinstance(entry, dict):
            raise TraceSchemaError(f"step {i}: entry is not an object", step=i)
        for key in ("op", "depth", "stack"):
            if key not in entry:
                raise TraceSchemaError(f"step {i}: missing required key {key!r}", step=i)
        try:
            op = opcodes.canonical(str(entry["op"]))
        except opcodes.UnknownOpcode:
            raise TraceSchemaError(f"step {i}: unknown opcode {entry['op']!r}", step=i) from None
        depth = int(entry["depth"])
        try:
            stack = [parse_word(w) for w in entry["stack"]]
        except ValueError as exc:
            raise TraceSchemaError(f"step {i}: {exc}", step=i) from None
        n = opcodes.pops(op)
        if len(stack) < n and not entry.get("error"):
            raise TraceSchemaError(
                f"step {i}: {op} needs {n} stack items, snapshot has {len(stack)}", step=i
            )
        operands = tuple(reversed(stack[-n:])) if n else ()
        if len(operands) < n:
            operands = operands + (0,) * (n - len(operands))

        mem = None
        region = memory_region(op, operands)
        if region is not None and "memory" in entry and entry["memory"] is not None:
            mem = _slice_memory(entry["memory"], *region)

        delta = None
        if op in ("SLOAD", "SSTORE"):
            key = operands[0]
            if op == "SSTORE":
                delta = (key, operands[1])
            else:
                delta = _storage_lookup(entry.get("storage"), key)
        records.append(
            StepRecord(
                step=i,
                op=op,
                depth=depth,
                stack_top=operands,
                memory_slice=mem,
                storage_delta=delta,
                error=bool(entry.get("error")),
            )
        )

    records = _mark_failed_frames(records, logs)
    trace = ExecutionTrace(tuple(records))
    validate_trace(trace)
    return trace


def _storage_lookup(storage, key: int) -> Optional[tuple[int, int]]:
    if not storage:
        return None
    for k, v in storage.items():
        if parse_word(k) == key:
            return (key, parse_word(v))
    return None


def _mark_failed_frames(records: list[StepRecord], logs: list) -> list[StepRecord]:
    flags = [r.error for r in records]
    pending: list[int] = []  # frame-opening records awaiting the caller's resumption
    for k, r in enumerate(records):
        while pending and r.depth <= records[pending[-1]].depth:
            i = pending.pop()
            if r.depth < records[i].depth:
                continue  # the calling frame aborted; nothing was pushed
            stack = logs[k].get("stack") or []
            if stack and parse_word(stack[-1]) == 0:
                flags[i if k == i + 1 else k - 1] = True
        if r.op in opcodes.FRAME_OPS:
            pending.append(k)
    return [
        r if r.error == flags[i] else StepRecord(r.step, r.op, r.depth, r.stack_top, r.memory_slice, r.storage_delta, flags[i])
        for i, r in enumerate(records)
    ]


def validate_trace(trace: ExecutionTrace) -> None:
    prev = None
    for i, r in enumerate(trace.steps):
        if r.step != i:
            raise TraceSchemaError(f"step {i}: step counter is {r.step}", step=i)
        if r.depth < 1:
            raise TraceSchemaError(f"step {i}: depth must be >= 1", step=i)
        if prev is not None and abs(r.depth - prev.depth) > 1:
            raise TraceSchemaError(f"step {i}: depth jumps from {prev.depth} to {r.depth}", step=i)
        if len(r.stack_top) != opcodes.pops(r.op):
            raise TraceSchemaError(
                f"step {i}: {r.op} consumes {opcodes.pops(r.op)} operands, record has {len(r.stack_top)}",
                step=i,
            )
        prev = r


# --------------------------------------------------------------------------
# reduced form


def reduce_trace(trace: ExecutionTrace) -> str:
    """Serialize to the reduced line format (header line, then one line per step)."""
    lines = [REDUCED_HEADER]
    for r in trace.steps:
        fields = []
        if r.stack_top:
            fields.append("stack=" + ",".join(hex(w) for w in r.stack_top))
        if r.memory_slice is not None:
            fields.append("mem=0x" + r.memory_slice.hex())
        if r.storage_delta is not None:
            fields.append("store=%s:%s" % (hex(r.storage_delta[0]), hex(r.storage_delta[1])))
        if r.error:
            fields.append("err=1")
        lines.append(f"{r.step}\t{r.op}\t{r.depth}\t{';'.join(fields)}")
    return "\n".join(lines) + "\n"


def parse_reduced_trace(document: str) -> ExecutionTrace:
    lines = document.splitlines()
    if not lines:
        return ExecutionTrace()
    start = 0
    if lines[0].strip() == REDUCED_HEADER:
        start = 1
    elif lines[0].startswith("HORUS-TRACE"):
        raise TraceSchemaError(f"line 1: unsupported header {lines[0]!r}", line=1)

    records = []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise TraceSchemaError(
                f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}", line=lineno
            )
        try:
            step, depth = int(parts[0]), int(parts[2])
            op = opcodes.canonical(parts[1])
        except opcodes.UnknownOpcode:
            raise TraceSchemaError(f"line {lineno}: unknown opcode {parts[1]!r}", line=lineno) from None
        except ValueError:
            raise TraceSchemaError(f"line {lineno}: step and depth must be integers", line=lineno) from None
        stack: tuple[int, ...] = ()
        mem = None
        delta = None
        error = False
        for item in filter(None, parts[3].split(";")):
            name, sep, value = item.partition("=")
            if not sep:
                raise TraceSchemaError(f"line {lineno}: field {item!r} lacks '='", line=lineno)
            try:
                if name == "stack":
                    stack = tuple(parse_word(w) for w in value.split(","))
                elif name == "mem":
                    mem = parse_bytes(value)
                elif name == "store":
                    k, _, v = value.partition(":")
                    delta = (parse_word(k), parse_word(v))
                elif name == "err":
                    error = value == "1"
                else:
                    raise TraceSchemaError(f"line {lineno}: unknown field {name!r}", line=lineno)
            except ValueError as exc:
                raise TraceSchemaError(f"line {lineno}: {exc}", line=lineno) from None
        records.append(StepRecord(step, op, depth, stack, mem, delta, error))

    trace = ExecutionTrace(tuple(records))
    validate_trace(trace)
    return trace


def load_trace(path) -> ExecutionTrace:
    """Load ``*.trace.json`` (Geth) or any other file as the reduced form."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.name.endswith(".json"):
        return parse_geth_trace(text)
    return parse_reduced_trace(text)


def trace_tx_hash(path) -> str:
    name = Path(path).name
    return normalize_hash(name.split(".", 1)[0])


# --------------------------------------------------------------------------
# metadata sidecar


def meta_from_dict(obj: dict) -> tuple[TxMeta, BlockMeta]:
    try:
        tx = TxMeta(
            tx_hash=obj["tx_hash"],
            tx_index=int(obj["tx_index"]),
            block_number=int(obj["block_number"]),
            from_=obj["from"],
            to=obj.get("to"),
            input=parse_bytes(obj.get("input", "")),
            gas_used=int(obj.get("gas_used", 0)),
            gas_limit=int(obj.get("gas_limit", 0)),
            status=int(obj.get("status", 1)),
            value=int(obj.get("value", 0)),
            balances={normalize_address(k): int(v) for k, v in (obj.get("balances") or {}).items()},
        )
        block = BlockMeta(
            block_number=int(obj["block_number"]),
            gas_used=int(obj.get("block_gas_used", 0)),
            gas_limit=int(obj.get("block_gas_limit", 0)),
            timestamp=int(obj["timestamp"]),
        )
    except KeyError as exc:
        raise ValidationError(f"metadata record missing field {exc.args[0]!r}") from None
    return tx, block


def meta_to_dict(tx: TxMeta, block: BlockMeta) -> dict:
    d = {
        "tx_hash": tx.tx_hash,
        "tx_index": tx.tx_index,
        "block_number": tx.block_number,
        "from": tx.from_,
        "to": tx.to,
        "input": "0x" + tx.input.hex(),
        "gas_used": tx.gas_used,
        "gas_limit": tx.gas_limit,
        "status": tx.status,
        "value": str(tx.value),
        "timestamp": block.timestamp,
        "block_gas_used": block.gas_used,
        "block_gas_limit": block.gas_limit,
    }
    if tx.balances:
        d["balances"] = {k: str(v) for k, v in sorted(tx.balances.items())}
    return d


def load_meta(path) -> dict[str, tuple[TxMeta, BlockMeta]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc.msg}") from None
            tx, block = meta_from_dict(obj)
            out[tx.tx_hash] = (tx, block)
    return out


def dump_meta(rows: Iterable[tuple[TxMeta, BlockMeta]]) -> str:
    return "".join(json.dumps(meta_to_dict(t, b), sort_keys=True) + "\n" for t, b in rows)
