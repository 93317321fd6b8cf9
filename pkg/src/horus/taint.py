"""Shadow-machine replay of an execution trace with byte-level taint provenance.

Every byte of the shadow stack, memory and storage carries a set of *labels*:
the steps of the instructions its value derives from. Source instructions
(CALLDATALOAD, CALLDATACOPY by default) tag what they produce with their own
step, and so does every instruction in the configured producer set, so that
flows between any two relevant instructions (e.g. an ADD feeding an SSTORE)
can be reported, not only source-to-sink ones.

Replay is a generator of semantic events consumed by :mod:`horus.facts`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, TextIO, Union

from . import opcodes
from .errors import IntegrityError
from .trace import WORD_MOD, ExecutionTrace, StepRecord, TxMeta, memory_region, word_to_address

SATURATED_MARK = -1
LABEL_CAP = 256
EMPTY: frozenset = frozenset()
SATURATED: frozenset = frozenset({SATURATED_MARK})
EMPTY_WORD: tuple = (EMPTY,) * 32
ZERO_ADDRESS = "0x" + "00" * 20
MAX_REGION = 1 << 24

Word = tuple  # 32 label sets, most significant byte first


@dataclass(frozen=True)
class TaintConfig:
    sources: frozenset = frozenset({"CALLDATALOAD", "CALLDATACOPY"})
    # instructions whose step becomes a label on the values they produce
    producers: frozenset = frozenset({"CALLDATALOAD", "CALLDATACOPY"}) | opcodes.ARITH_OPS | opcodes.CALL_OPS
    # instructions for which consumed labels are reported as data flows
    sinks: frozenset = opcodes.ARITH_OPS | opcodes.CALL_OPS | frozenset({"SSTORE", "JUMPI"})
    label_cap: int = LABEL_CAP

    def __post_init__(self):
        # a source whose step is never recorded could not be the origin of a flow
        object.__setattr__(self, "producers", frozenset(self.producers) | frozenset(self.sources))


DEFAULT_CONFIG = TaintConfig()


# --------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class ArithObservation:
    step: int
    op: str
    operand1: int
    operand2: int
    wide_result: int
    evm_result: int

    @property
    def overflow(self) -> bool:
        return not 0 <= self.wide_result < WORD_MOD


@dataclass(frozen=True)
class StorageAccess:
    step: int
    op: str
    caller: str
    contract: str
    index: int
    value: int
    depth: int


@dataclass(frozen=True)
class CallEvent:
    step: int
    op: str
    caller: str
    callee: str
    input: bytes
    value: int
    depth: int
    call_id: int
    call_branch: int
    result: int


@dataclass(frozen=True)
class LogEvent:
    step: int
    contract: str
    topics: tuple
    data: bytes


@dataclass(frozen=True)
class ConditionEvent:
    step: int


@dataclass(frozen=True)
class SelfDestructEvent:
    step: int
    caller: str
    contract: str
    destination: str
    value: int


@dataclass(frozen=True)
class DataFlow:
    src: int
    dst: int


Event = Union[ArithObservation, StorageAccess, CallEvent, LogEvent, ConditionEvent, SelfDestructEvent, DataFlow]


# --------------------------------------------------------------------------
# arithmetic


def checked_arith(op: str, a: int, b: int, step: int = 0) -> ArithObservation:
    """Evaluate ADD/SUB/MUL both in unbounded integers and with 256-bit wraparound."""
    if op == "ADD":
        wide = a + b
    elif op == "SUB":
        wide = a - b
    elif op == "MUL":
        wide = a * b
    else:
        raise ValueError(f"not a checked arithmetic op: {op}")
    return ArithObservation(step, op, a, b, wide, wide % WORD_MOD)


# --------------------------------------------------------------------------
# call-site identity


@dataclass(frozen=True)
class CallSiteKey:
    call_id: int
    call_branch: int


def branch_fingerprint(outcomes) -> int:
    # masked to 63 bits so the value stays a non-negative signed 64-bit number
    digest = hashlib.blake2b(bytes(outcomes), digest_size=8).digest()
    return int.from_bytes(digest, "big") & ((1 << 63) - 1)


def assign_call_site(position: int, branch_outcomes) -> CallSiteKey:
    """Identify a call by its ordinal within the frame and the JUMPI outcomes before it."""
    return CallSiteKey(position, branch_fingerprint(branch_outcomes))


# --------------------------------------------------------------------------
# state


@dataclass
class PendingCall:
    step: int
    op: str
    callee: str
    value: int
    input: bytes
    ret_offset: int
    ret_size: int
    site: CallSiteKey
    depth: int
    error: bool


@dataclass
class Frame:
    contract: str
    sender: str
    depth: int
    stack: list = field(default_factory=list)
    memory: dict = field(default_factory=dict)
    executed: int = 0
    branches: list = field(default_factory=list)
    returndata: tuple = ()
    returned: tuple = ()
    pending: Optional[PendingCall] = None
    last: Optional[StepRecord] = None


class TaintState:
    """Shadow stack/memory per call frame plus per-transaction shadow storage."""

    def __init__(self, meta: Optional[TxMeta] = None, config: TaintConfig = DEFAULT_CONFIG, depth: int = 1):
        self.config = config
        self.meta = meta
        contract = meta.to if meta else ZERO_ADDRESS
        sender = meta.from_ if meta else ZERO_ADDRESS
        self.frames: list[Frame] = [Frame(contract, sender, depth)]
        self.storage: dict = {}
        self.concrete_storage: dict = {}
        self.transient: dict = {}
        self.balances: dict = dict(meta.balances) if meta else {}
        if meta and meta.value:
            self.balances[meta.to] = self.balances.get(meta.to, 0) + meta.value
        self.producer_steps: list[int] = []
        self.events: list = []
        self.step = 0
        self.consumed: frozenset = EMPTY

    @property
    def frame(self) -> Frame:
        return self.frames[-1]

    @property
    def shadow_stack(self) -> list:
        return self.frame.stack

    @property
    def shadow_memory(self) -> dict:
        return self.frame.memory

    @property
    def shadow_storage(self) -> dict:
        return self.storage

    # label-set algebra ---------------------------------------------------

    def union(self, sets) -> frozenset:
        out = None
        for s in sets:
            if not s:
                continue
            if out is None:
                out = s
            elif s is not out and not s <= out:
                out = out | s
        if out is None:
            return EMPTY
        if SATURATED_MARK in out or len(out) > self.config.label_cap:
            return SATURATED
        return out

    def own(self, op: str) -> frozenset:
        return frozenset({self.step}) if op in self.config.producers else EMPTY

    # stack and memory ----------------------------------------------------

    def pop(self) -> Word:
        if not self.frame.stack:
            raise IntegrityError(f"step {self.step}: shadow stack underflow", step=self.step)
        return self.frame.stack.pop()

    def push(self, word: Word) -> None:
        self.frame.stack.append(word)

    def read_memory(self, offset: int, size: int) -> list:
        _check_region(self.step, size)
        mem = self.frame.memory
        return [mem.get(offset + i, EMPTY) for i in range(size)]

    def write_memory(self, offset: int, labels) -> None:
        mem = self.frame.memory
        for i, s in enumerate(labels):
            if s:
                mem[offset + i] = s
            else:
                mem.pop(offset + i, None)

    def fill_memory(self, offset: int, size: int, labels: frozenset) -> None:
        _check_region(self.step, size)
        self.write_memory(offset, [labels] * size)


def _check_region(step: int, size: int) -> None:
    if size > MAX_REGION:
        raise IntegrityError(f"step {step}: memory region of {size} bytes is implausible", step=step)


def _uniform(labels: frozenset) -> Word:
    return EMPTY_WORD if not labels else (labels,) * 32


def word_labels(state: TaintState, word: Word) -> frozenset:
    if word[0] is word[31] and all(s is word[0] for s in word):
        return word[0]
    return state.union(word)


# --------------------------------------------------------------------------
# transfer functions


def introduce_sources(op: str, state: TaintState, record: StepRecord) -> TaintState:
    """Tag what a source instruction produced with the current step."""
    if op not in state.config.sources:
        return state
    tag = frozenset({state.step})
    if op == "CALLDATACOPY":
        dest, _, size = record.stack_top
        state.fill_memory(dest, size, tag)
    elif opcodes.pushes(op):
        state.frame.stack[-1] = _uniform(tag)
    return state


def propagate(op: str, state: TaintState, record: StepRecord) -> TaintState:
    """Apply one instruction's taint semantics to the current frame.

    Consumed operand labels are recorded in ``state.consumed``; produced
    values inherit the union of what they were computed from, plus the
    step itself for producer instructions. Events go to ``state.events``.
    """
    frame = state.frame
    step = state.step
    operands = record.stack_top
    n_in = opcodes.pops(op)
    consumed_words = []

    if opcodes.is_dup(op):
        n = n_in
        if len(frame.stack) < n:
            raise IntegrityError(f"step {step}: shadow stack underflow on {op}", step=step)
        state.push(frame.stack[-n])
        state.consumed = EMPTY
        return state
    if opcodes.is_swap(op):
        n = n_in
        if len(frame.stack) < n:
            raise IntegrityError(f"step {step}: shadow stack underflow on {op}", step=step)
        frame.stack[-1], frame.stack[-n] = frame.stack[-n], frame.stack[-1]
        state.consumed = EMPTY
        return state

    for _ in range(n_in):
        consumed_words.append(state.pop())
    consumed = [word_labels(state, w) for w in consumed_words]
    own = state.own(op)

    if op in ("MLOAD", "SHA3") or opcodes.is_log(op) or op in opcodes.FRAME_OPS or op in ("RETURN", "REVERT"):
        off, size = memory_region(op, operands)
        mem = state.read_memory(off, size)
    else:
        mem = None

    # reported consumption: operands plus memory read
    state.consumed = state.union(consumed + (mem or []))

    if opcodes.is_push(op) or (n_in == 0 and opcodes.pushes(op) == 1):
        state.push(_uniform(own))
    elif op in ("AND", "OR", "XOR"):
        a, b = consumed_words
        state.push(tuple(state.union((a[i], b[i], own)) for i in range(32)))
    elif op == "NOT":
        (a,) = consumed_words
        state.push(tuple(state.union((a[i], own)) for i in range(32)))
    elif op == "MLOAD":
        state.push(tuple(mem))
    elif op == "SHA3":
        state.push(_uniform(state.union(mem + [own])))
    elif op == "CALLDATALOAD":
        state.push(_uniform(own))
    elif op == "MSTORE":
        state.write_memory(operands[0], consumed_words[1])
    elif op == "MSTORE8":
        state.write_memory(operands[0], [consumed_words[1][31]])
    elif op == "MCOPY":
        dest, src, size = operands
        state.write_memory(dest, state.read_memory(src, size))
    elif op in ("CALLDATACOPY", "CODECOPY"):
        dest, _, size = operands
        state.fill_memory(dest, size, own)
    elif op == "EXTCODECOPY":
        _, dest, _, size = operands
        state.fill_memory(dest, size, own)
    elif op == "RETURNDATACOPY":
        dest, src, size = operands
        _check_region(step, size)
        rd = frame.returndata
        state.write_memory(dest, [rd[src + i] if src + i < len(rd) else EMPTY for i in range(size)])
    elif op in ("SLOAD", "TLOAD"):
        table = state.storage if op == "SLOAD" else state.transient
        state.push(table.get((frame.contract, operands[0]), EMPTY_WORD))
        if op == "SLOAD":
            value = record.storage_delta[1] if record.storage_delta else _concrete_sload(state, operands[0])
            state.events.append(
                StorageAccess(step, op, frame.sender, frame.contract, operands[0], value, record.depth)
            )
    elif op in ("SSTORE", "TSTORE"):
        table = state.storage if op == "SSTORE" else state.transient
        value_word = consumed_words[1]
        if any(value_word):
            table[(frame.contract, operands[0])] = value_word
        else:
            table.pop((frame.contract, operands[0]), None)
        if op == "SSTORE":
            state.concrete_storage[(frame.contract, operands[0])] = operands[1]
            state.events.append(
                StorageAccess(step, op, frame.sender, frame.contract, operands[0], operands[1], record.depth)
            )
    elif op == "JUMPI":
        frame.branches.append(1 if operands[1] else 0)
        state.events.append(ConditionEvent(step))
    elif opcodes.is_log(op):
        data = record.memory_slice if record.memory_slice is not None else b""
        state.events.append(LogEvent(step, frame.contract, tuple(operands[2:]), data))
    elif op in opcodes.FRAME_OPS:
        frame.pending = _pending_call(state, op, record)
    elif op in ("RETURN", "REVERT"):
        frame.returned = tuple(mem)
    elif op == "SELFDESTRUCT":
        destination = word_to_address(operands[0])
        swept = state.balances.pop(frame.contract, 0)
        state.balances[destination] = state.balances.get(destination, 0) + swept
        state.events.append(SelfDestructEvent(step, frame.sender, frame.contract, destination, swept))
    elif opcodes.pushes(op) == 1:
        # generic computation: every result byte depends on every operand byte
        state.push(_uniform(state.union(consumed + [own])))
    # remaining zero-output instructions (POP, JUMP, JUMPDEST, STOP, INVALID) only consume

    if op in opcodes.ARITH_OPS:
        state.events.append(checked_arith(op, operands[0], operands[1], step))

    introduce_sources(op, state, record)
    return state


def _concrete_sload(state: TaintState, key: int) -> int:
    # storage not written earlier in this transaction and absent from the trace reads as 0
    return state.concrete_storage.get((state.frame.contract, key), 0)


def _pending_call(state: TaintState, op: str, record: StepRecord) -> PendingCall:
    frame = state.frame
    o = record.stack_top
    if op in ("CALL", "CALLCODE"):
        callee, value, ret_off, ret_size = word_to_address(o[1]), o[2], o[5], o[6]
    elif op in ("DELEGATECALL", "STATICCALL"):
        callee, value, ret_off, ret_size = word_to_address(o[1]), 0, o[4], o[5]
    else:
        callee, value, ret_off, ret_size = ZERO_ADDRESS, o[0], 0, 0
    site = assign_call_site(frame.executed, frame.branches)
    data = record.memory_slice if record.memory_slice is not None else b""
    return PendingCall(state.step, op, callee, value, data, ret_off, ret_size, site, record.depth, record.error)


# --------------------------------------------------------------------------
# frame transitions


def _enter_frame(state: TaintState, record: StepRecord) -> None:
    parent = state.frame
    call = parent.pending
    if call is None:
        raise IntegrityError(
            f"step {record.step}: depth rises to {record.depth} without a preceding call", step=record.step
        )
    if call.op in ("CALL", "STATICCALL"):
        contract, sender = call.callee, parent.contract
    elif call.op == "CALLCODE":
        contract, sender = parent.contract, parent.contract
    elif call.op == "DELEGATECALL":
        contract, sender = parent.contract, parent.sender
    else:
        contract, sender = ZERO_ADDRESS, parent.contract
    state.frames.append(Frame(contract, sender, record.depth))


def _resolve(state: TaintState, ok: bool, returned: tuple) -> None:
    """Finish the pending call of the current frame: push its result, copy return data."""
    frame = state.frame
    call = frame.pending
    frame.pending = None
    saved_step = state.step
    state.step = call.step
    label = state.own(call.op)
    state.step = saved_step

    frame.stack.append(_uniform(label))
    frame.returndata = tuple(state.union((s, label)) for s in returned)
    if call.op in opcodes.CALL_OPS and returned:
        n = min(call.ret_size, len(returned))
        state.write_memory(call.ret_offset, frame.returndata[:n])

    if ok and call.value and call.op in ("CALL", "CREATE", "CREATE2"):
        src = frame.contract
        state.balances[src] = state.balances.get(src, 0) - call.value
        if call.op == "CALL":
            state.balances[call.callee] = state.balances.get(call.callee, 0) + call.value

    if call.op in opcodes.CALL_OPS:
        state.events.append(
            CallEvent(
                call.step,
                call.op,
                frame.contract,
                call.callee,
                call.input,
                call.value,
                call.depth,
                call.site.call_id,
                call.site.call_branch,
                1 if ok else 0,
            )
        )


def _frame_failed(last: Optional[StepRecord]) -> bool:
    return last is not None and (last.error or last.op in opcodes.FAIL_OPS)


def _sync_frames(state: TaintState, record: Optional[StepRecord]) -> None:
    """Reconcile the frame stack with the depth of the next record (None at trace end)."""
    frame = state.frame
    prev = frame.last
    depth = record.depth if record is not None else None

    # a call whose callee frame was never entered resolves immediately
    if frame.pending is not None and prev is not None and prev.step == frame.pending.step:
        if depth is None or depth == frame.depth:
            _resolve(state, not prev.error, ())
        elif depth == frame.depth + 1:
            _enter_frame(state, record)
            return
        else:
            frame.pending = None  # the calling frame aborted on the call instruction

    if depth is None:
        # trace ended inside nested frames: unwind using the last record's outcome
        while len(state.frames) > 1:
            child = state.frames.pop()
            if state.frame.pending is not None:
                _resolve(state, not _frame_failed(child.last), child.returned)
        return

    if depth > frame.depth:
        _enter_frame(state, record)
        return
    while depth < state.frame.depth:
        if len(state.frames) == 1:
            raise IntegrityError(
                f"step {record.step}: depth {depth} below the transaction's base frame", step=record.step
            )
        child = state.frames.pop()
        parent = state.frame
        if parent.pending is None:
            raise IntegrityError(f"step {record.step}: frame returned with no pending call", step=record.step)
        if depth == parent.depth:
            _resolve(state, not _frame_failed(child.last), child.returned)
        else:
            parent.pending = None


# --------------------------------------------------------------------------
# driver


def replay(
    trace: ExecutionTrace,
    meta: Optional[TxMeta] = None,
    config: TaintConfig = DEFAULT_CONFIG,
    debug: Optional[TextIO] = None,
    on_step=None,
) -> Iterator[Event]:
    """Replay ``trace`` through a fresh shadow machine, yielding semantic events.

    ``on_step(record, state)`` is called after each instruction; ``debug``
    receives a one-line text dump of the shadow state per step.
    """
    if not trace.steps:
        return
    state = TaintState(meta, config, depth=trace.steps[0].depth)
    for record in trace.steps:
        state.step = record.step
        _sync_frames(state, record)
        yield from _drain(state)
        state.step = record.step
        op = record.op
        if op in config.producers:
            state.producer_steps.append(record.step)
        propagate(op, state, record)
        if op in config.sinks and state.consumed:
            for src in _flow_sources(state):
                state.events.append(DataFlow(src, record.step))
        state.frame.executed += 1
        state.frame.last = record
        if on_step is not None:
            on_step(record, state)
        if debug is not None:
            debug.write(dump_state(record, state) + "\n")
        yield from _drain(state)
    _sync_frames(state, None)
    yield from _drain(state)


def _flow_sources(state: TaintState) -> list:
    labels = state.consumed
    if SATURATED_MARK in labels:
        # label set overflowed: soundly assume every earlier relevant step may flow here
        return [s for s in state.producer_steps if s < state.step]
    return sorted(labels)


def _drain(state: TaintState):
    events, state.events = state.events, []
    return events


def dump_state(record: StepRecord, state: TaintState) -> str:
    def fmt(labels):
        if SATURATED_MARK in labels:
            return "*"
        return "{" + ",".join(map(str, sorted(labels))) + "}"

    stack = " ".join(fmt(word_labels(state, w)) for w in reversed(state.frame.stack))
    tainted_mem = len(state.frame.memory)
    return (
        f"{record.step}\t{record.op}\tdepth={state.frame.depth}\tstack=[{stack}]"
        f"\tmem_tainted={tainted_mem}\tstorage_tainted={len(state.storage)}"
    )
