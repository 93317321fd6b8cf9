from __future__ import annotations

import pytest

from horus.facts import FactStore, extract_facts
from horus.fixtures.builder import TraceBuilder
from horus.fixtures.corpus import build_corpus, write_corpus
from horus.trace import BlockMeta, TxMeta, parse_geth_trace

SENDER = "0x" + "11" * 20
CONTRACT = "0x" + "22" * 20
TX_HASH = "0x" + "ab" * 32


def make_meta(input: bytes = b"", status: int = 1, tx_hash: str = TX_HASH, block: int = 100, index: int = 0,
              sender: str = SENDER, to: str = CONTRACT, gas_limit: int = 300_000, balances=None, value: int = 0):
    tx = TxMeta(tx_hash=tx_hash, tx_index=index, block_number=block, from_=sender, to=to, input=input,
                gas_used=21_000, gas_limit=gas_limit, status=status, value=value, balances=balances or {})
    return tx, BlockMeta(block, 1_000_000, 8_000_000, 1_500_000_000 + block)


def builder(calldata: bytes = b"", **kw) -> TraceBuilder:
    return TraceBuilder(SENDER, CONTRACT, calldata=calldata, **kw)


def facts_of(b: TraceBuilder, **meta_kw) -> FactStore:
    tx, block = make_meta(input=b.calldata, **meta_kw)
    return extract_facts(parse_geth_trace(b.document()), tx, block)


def case_store(case) -> FactStore:
    store = FactStore()
    for t in case.txs:
        store = store.merge(extract_facts(parse_geth_trace(t.trace), t.meta, t.block))
    return store


@pytest.fixture(scope="session")
def corpus():
    return build_corpus()


@pytest.fixture(scope="session")
def corpus_stores(corpus):
    return {c.name: case_store(c) for c in corpus}


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("corpus"))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
