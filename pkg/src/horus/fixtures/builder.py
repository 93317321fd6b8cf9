"""Author Geth-style ``structLogs`` by executing a short instruction script.

The builder keeps a concrete stack, memory and storage per frame and records
the pre-execution snapshot of every instruction exactly as Geth's struct
logger would (full stack bottom-to-top, memory as 32-byte words, storage on
SLOAD/SSTORE). Only the semantics needed for hand-written fixtures are
modelled; anything else pops its operands and pushes ``result`` (default 0).

    b = TraceBuilder(sender=EOA, to=TOKEN, calldata=data)
    b.push(4).op("CALLDATALOAD").push(0).op("SSTORE").op("STOP")
    doc = b.document()
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .. import opcodes
from ..trace import WORD_MOD, normalize_address, word_to_address

MASK = WORD_MOD - 1


def keccak256(data: bytes) -> bytes:
    from Crypto.Hash import keccak

    return keccak.new(digest_bits=256, data=data).digest()


def addr_word(address: str) -> int:
    return int(normalize_address(address), 16)


@dataclass
class _Frame:
    address: str
    caller: str
    calldata: bytes
    value: int
    depth: int
    stack: list = field(default_factory=list)
    memory: bytearray = field(default_factory=bytearray)
    pc: int = 0
    call_op: Optional[str] = None
    ret: tuple = (0, 0)


def _signed(x: int) -> int:
    return x - WORD_MOD if x >> 255 else x


_PURE = {
    "ADD": lambda a, b: (a + b) & MASK,
    "SUB": lambda a, b: (a - b) & MASK,
    "MUL": lambda a, b: (a * b) & MASK,
    "DIV": lambda a, b: a // b if b else 0,
    "MOD": lambda a, b: a % b if b else 0,
    "EXP": lambda a, b: pow(a, b, WORD_MOD),
    "LT": lambda a, b: int(a < b),
    "GT": lambda a, b: int(a > b),
    "SLT": lambda a, b: int(_signed(a) < _signed(b)),
    "SGT": lambda a, b: int(_signed(a) > _signed(b)),
    "EQ": lambda a, b: int(a == b),
    "AND": lambda a, b: a & b,
    "OR": lambda a, b: a | b,
    "XOR": lambda a, b: a ^ b,
    "SHL": lambda s, v: (v << s) & MASK if s < 256 else 0,
    "SHR": lambda s, v: v >> s if s < 256 else 0,
    "BYTE": lambda i, v: (v >> (8 * (31 - i))) & 0xFF if i < 32 else 0,
    "ISZERO": lambda a: int(a == 0),
    "NOT": lambda a: a ^ MASK,
}


class TraceBuilder:
    def __init__(self, sender: str, to: str, calldata: bytes = b"", value: int = 0, storage: Optional[dict] = None):
        self.sender = normalize_address(sender)
        self.to = normalize_address(to)
        self.calldata = bytes(calldata)
        self.value = value
        # address -> {slot: value}; shared across frames like world state
        self.storage = {normalize_address(k): dict(v) for k, v in (storage or {}).items()}
        self.logs: list[dict] = []
        self.frames = [_Frame(self.to, self.sender, self.calldata, value, 1)]
        self.failed = False

    # -- helpers -----------------------------------------------------------

    @property
    def frame(self) -> _Frame:
        return self.frames[-1]

    @property
    def depth(self) -> int:
        return self.frame.depth

    @property
    def step(self) -> int:
        """Step number the next recorded instruction will get."""
        return len(self.logs)

    def _mem_expand(self, offset: int, size: int) -> None:
        if size == 0:
            return
        end = offset + size
        mem = self.frame.memory
        if end > len(mem):
            mem.extend(b"\0" * (((end + 31) // 32) * 32 - len(mem)))

    def mem_read(self, offset: int, size: int) -> bytes:
        self._mem_expand(offset, size)
        return bytes(self.frame.memory[offset : offset + size])

    def mem_write(self, offset: int, data: bytes) -> None:
        self._mem_expand(offset, len(data))
        self.frame.memory[offset : offset + len(data)] = data

    def _snapshot(self, op: str, error: Optional[str] = None) -> dict:
        f = self.frame
        mem = bytes(f.memory)
        entry = {
            "pc": f.pc,
            "op": op,
            "gas": 1_000_000 - len(self.logs),
            "gasCost": 3,
            "depth": f.depth,
            "stack": [hex(v) for v in f.stack],
            "memory": [mem[i : i + 32].hex() for i in range(0, len(mem), 32)],
        }
        if error:
            entry["error"] = error
        return entry

    def _pop(self, n: int) -> list:
        stack = self.frame.stack
        if len(stack) < n:
            raise ValueError(f"builder stack underflow at step {self.step}")
        out = [stack.pop() for _ in range(n)]
        return out

    # -- public instruction API ------------------------------------------

    def push(self, value, width: Optional[int] = None) -> "TraceBuilder":
        if isinstance(value, str):
            value = int(value, 16)
        value %= WORD_MOD
        if width is None:
            width = max(1, (value.bit_length() + 7) // 8)
        entry = self._snapshot(f"PUSH{width}")
        self.logs.append(entry)
        self.frame.stack.append(value)
        self.frame.pc += 1 + width
        return self

    def pushes(self, *values) -> "TraceBuilder":
        for v in values:
            self.push(v)
        return self

    def op(self, name: str, result: Optional[int] = None, *, enter: bool = True, success: bool = True,
           error: Optional[str] = None, storage_value: Optional[int] = None) -> "TraceBuilder":
        """Execute one instruction.

        For call-family and create instructions ``enter`` selects whether a
        callee frame follows (closed later by RETURN/STOP/REVERT); without
        one, ``success`` is the value pushed. ``error`` attaches a Geth
        error string and halts the frame as failed.
        """
        name = opcodes.canonical(name)
        f = self.frame
        entry = self._snapshot(name, error)
        n_in, n_out = opcodes.ARITY[name]
        storage = self.storage.setdefault(f.address, {})

        if name in ("SLOAD", "SSTORE"):
            key = f.stack[-1] if f.stack else 0
            if name == "SSTORE":
                storage_view = dict(storage)
                storage_view[key] = f.stack[-2]
            else:
                if storage_value is not None:
                    storage[key] = storage_value
                storage_view = {key: storage.get(key, 0)}
            entry["storage"] = {"%064x" % k: "%064x" % v for k, v in storage_view.items()}
        self.logs.append(entry)
        f.pc += 1

        if error:
            self._pop(min(n_in, len(f.stack)))
            self._halt(ok=False, returned=b"")
            return self

        if opcodes.is_dup(name):
            f.stack.append(f.stack[-n_in])
            return self
        if opcodes.is_swap(name):
            f.stack[-1], f.stack[-n_in] = f.stack[-n_in], f.stack[-1]
            return self

        args = self._pop(n_in)
        if name in _PURE:
            f.stack.append(_PURE[name](*args))
        elif name == "CALLDATALOAD":
            chunk = f.calldata[args[0] : args[0] + 32]
            f.stack.append(int.from_bytes(chunk.ljust(32, b"\0"), "big"))
        elif name == "CALLDATASIZE":
            f.stack.append(len(f.calldata))
        elif name == "CALLDATACOPY":
            dest, off, size = args
            self.mem_write(dest, f.calldata[off : off + size].ljust(size, b"\0"))
        elif name == "CALLER":
            f.stack.append(addr_word(f.caller))
        elif name == "ADDRESS":
            f.stack.append(addr_word(f.address))
        elif name == "CALLVALUE":
            f.stack.append(f.value)
        elif name == "MLOAD":
            f.stack.append(int.from_bytes(self.mem_read(args[0], 32), "big"))
        elif name == "MSTORE":
            self.mem_write(args[0], args[1].to_bytes(32, "big"))
        elif name == "MSTORE8":
            self.mem_write(args[0], bytes([args[1] & 0xFF]))
        elif name == "SHA3":
            f.stack.append(int.from_bytes(keccak256(self.mem_read(args[0], args[1])), "big"))
        elif name == "SLOAD":
            f.stack.append(storage.get(args[0], 0))
        elif name == "SSTORE":
            storage[args[0]] = args[1]
        elif name in ("JUMP", "JUMPI", "POP", "JUMPDEST") or opcodes.is_log(name):
            if opcodes.is_log(name):
                self.mem_read(args[0], args[1])
        elif name in opcodes.FRAME_OPS:
            self._call(name, args, enter, success)
        elif name in ("RETURN", "REVERT"):
            self._halt(ok=name == "RETURN", returned=self.mem_read(args[0], args[1]))
        elif name in ("STOP", "SELFDESTRUCT"):
            self._halt(ok=True, returned=b"")
        elif name == "INVALID":
            self._halt(ok=False, returned=b"")
        elif n_out:
            f.stack.append(0 if result is None else result % WORD_MOD)
        return self

    def _call(self, name: str, args: list, enter: bool, success: bool) -> None:
        f = self.frame
        if name in ("CALL", "CALLCODE"):
            _gas, to, value, a_off, a_len, r_off, r_len = args
        elif name in ("DELEGATECALL", "STATICCALL"):
            _gas, to, a_off, a_len, r_off, r_len = args
            value = 0
        else:
            value, a_off, a_len = args[:3]
            to, r_off, r_len = 0, 0, 0
        data = self.mem_read(a_off, a_len)
        if not enter:
            f.stack.append(1 if success else 0)
            return
        target = word_to_address(to)
        if name in ("CALL", "STATICCALL"):
            address, caller = target, f.address
        elif name == "CALLCODE":
            address, caller = f.address, f.address
        elif name == "DELEGATECALL":
            address, caller, value = f.address, f.caller, f.value
        else:
            address, caller = "0x" + "ee" * 20, f.address
        child = _Frame(address, caller, data if name in opcodes.CALL_OPS else b"", value, f.depth + 1)
        child.call_op = name
        child.ret = (r_off, r_len)
        self.frames.append(child)

    def _halt(self, ok: bool, returned: bytes) -> None:
        if len(self.frames) == 1:
            self.failed = not ok
            self.frames[0].stack.clear()
            return
        child = self.frames.pop()
        parent = self.frame
        if child.call_op in opcodes.CREATE_OPS:
            parent.stack.append(addr_word(child.address) if ok else 0)
            return
        parent.stack.append(1 if ok else 0)
        r_off, r_len = child.ret
        n = min(r_len, len(returned))
        if n:
            self.mem_write(r_off, returned[:n])

    # -- composite helpers ----------------------------------------------

    def mstore_bytes(self, offset: int, data: bytes) -> "TraceBuilder":
        """Write ``data`` into memory with PUSH/MSTORE pairs (32-byte chunks, right-padded)."""
        for i in range(0, len(data), 32):
            chunk = data[i : i + 32].ljust(32, b"\0")
            self.push(int.from_bytes(chunk, "big")).push(offset + i).op("MSTORE")
        return self

    def call(self, to: str, value: int = 0, args_offset: int = 0, args_len: int = 0,
             ret_offset: int = 0, ret_len: int = 0, op: str = "CALL", gas: int = 50_000,
             enter: bool = True, success: bool = True) -> "TraceBuilder":
        """Push the operands for a call-family instruction and execute it."""
        if op in ("CALL", "CALLCODE"):
            operands = [ret_len, ret_offset, args_len, args_offset, value, addr_word(to), gas]
        else:
            operands = [ret_len, ret_offset, args_len, args_offset, addr_word(to), gas]
        for v in operands:
            self.push(v)
        return self.op(op, enter=enter, success=success)

    def log(self, topics, data: bytes, offset: int = 0) -> "TraceBuilder":
        self.mstore_bytes(offset, data)
        for t in reversed(list(topics)):
            self.push(t if isinstance(t, int) else int(t, 16))
        self.push(len(data)).push(offset)
        return self.op(f"LOG{len(list(topics))}")

    # -- output --------------------------------------------------------

    def document(self) -> dict:
        return {"gas": len(self.logs), "failed": self.failed, "returnValue": "", "structLogs": self.logs}

    def json(self) -> str:
        return json.dumps(self.document(), indent=1)
