"""EVM opcode table: mnemonic -> (items removed, items added).

Counts follow the EVM's documented stack inputs and outputs. Mnemonics use the names
Geth prints in structLogs; ``KECCAK256`` is folded into ``SHA3``.
"""

from __future__ import annotations

_BASE: dict[str, tuple[int, int]] = {
    "STOP": (0, 0),
    "ADD": (2, 1),
    "MUL": (2, 1),
    "SUB": (2, 1),
    "DIV": (2, 1),
    "SDIV": (2, 1),
    "MOD": (2, 1),
    "SMOD": (2, 1),
    "ADDMOD": (3, 1),
    "MULMOD": (3, 1),
    "EXP": (2, 1),
    "SIGNEXTEND": (2, 1),
    "LT": (2, 1),
    "GT": (2, 1),
    "SLT": (2, 1),
    "SGT": (2, 1),
    "EQ": (2, 1),
    "ISZERO": (1, 1),
    "AND": (2, 1),
    "OR": (2, 1),
    "XOR": (2, 1),
    "NOT": (1, 1),
    "BYTE": (2, 1),
    "SHL": (2, 1),
    "SHR": (2, 1),
    "SAR": (2, 1),
    "SHA3": (2, 1),
    "ADDRESS": (0, 1),
    "BALANCE": (1, 1),
    "ORIGIN": (0, 1),
    "CALLER": (0, 1),
    "CALLVALUE": (0, 1),
    "CALLDATALOAD": (1, 1),
    "CALLDATASIZE": (0, 1),
    "CALLDATACOPY": (3, 0),
    "CODESIZE": (0, 1),
    "CODECOPY": (3, 0),
    "GASPRICE": (0, 1),
    "EXTCODESIZE": (1, 1),
    "EXTCODECOPY": (4, 0),
    "RETURNDATASIZE": (0, 1),
    "RETURNDATACOPY": (3, 0),
    "EXTCODEHASH": (1, 1),
    "BLOCKHASH": (1, 1),
    "COINBASE": (0, 1),
    "TIMESTAMP": (0, 1),
    "NUMBER": (0, 1),
    "DIFFICULTY": (0, 1),
    "PREVRANDAO": (0, 1),
    "RANDOM": (0, 1),
    "GASLIMIT": (0, 1),
    "CHAINID": (0, 1),
    "SELFBALANCE": (0, 1),
    "BASEFEE": (0, 1),
    "BLOBHASH": (1, 1),
    "BLOBBASEFEE": (0, 1),
    "POP": (1, 0),
    "MLOAD": (1, 1),
    "MSTORE": (2, 0),
    "MSTORE8": (2, 0),
    "SLOAD": (1, 1),
    "SSTORE": (2, 0),
    "JUMP": (1, 0),
    "JUMPI": (2, 0),
    "PC": (0, 1),
    "MSIZE": (0, 1),
    "GAS": (0, 1),
    "JUMPDEST": (0, 0),
    "TLOAD": (1, 1),
    "TSTORE": (2, 0),
    "MCOPY": (3, 0),
    "PUSH0": (0, 1),
    "CREATE": (3, 1),
    "CALL": (7, 1),
    "CALLCODE": (7, 1),
    "RETURN": (2, 0),
    "DELEGATECALL": (6, 1),
    "CREATE2": (4, 1),
    "STATICCALL": (6, 1),
    "REVERT": (2, 0),
    "INVALID": (0, 0),
    "SELFDESTRUCT": (1, 0),
}

ARITY: dict[str, tuple[int, int]] = dict(_BASE)
for _n in range(1, 33):
    ARITY[f"PUSH{_n}"] = (0, 1)
for _n in range(1, 17):
    ARITY[f"DUP{_n}"] = (_n, _n + 1)
    ARITY[f"SWAP{_n}"] = (_n + 1, _n + 1)
for _n in range(5):
    ARITY[f"LOG{_n}"] = (_n + 2, 0)

ALIASES = {"KECCAK256": "SHA3", "SUICIDE": "SELFDESTRUCT"}

CALL_OPS = frozenset({"CALL", "CALLCODE", "DELEGATECALL", "STATICCALL"})
CREATE_OPS = frozenset({"CREATE", "CREATE2"})
FRAME_OPS = CALL_OPS | CREATE_OPS
HALT_OPS = frozenset({"STOP", "RETURN", "REVERT", "INVALID", "SELFDESTRUCT"})
FAIL_OPS = frozenset({"REVERT", "INVALID"})
ARITH_OPS = frozenset({"ADD", "SUB", "MUL"})


class UnknownOpcode(KeyError):
    pass


def canonical(name: str) -> str:
    """Normalize a mnemonic as printed by a client; raise UnknownOpcode otherwise."""
    name = name.strip().upper()
    if name in ARITY:
        return name
    if name in ALIASES:
        return ALIASES[name]
    # geth prints undefined bytes as "opcode 0xfe not defined"
    if name.startswith("OPCODE ") and name.endswith(" NOT DEFINED"):
        return "INVALID"
    raise UnknownOpcode(name)


def pops(op: str) -> int:
    return ARITY[op][0]


def pushes(op: str) -> int:
    return ARITY[op][1]


def is_push(op: str) -> bool:
    return op.startswith("PUSH")


def is_dup(op: str) -> bool:
    return op.startswith("DUP")


def is_swap(op: str) -> bool:
    return op.startswith("SWAP")


def is_log(op: str) -> bool:
    return op.startswith("LOG")
