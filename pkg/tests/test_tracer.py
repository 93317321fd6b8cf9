import json
import xml.etree.ElementTree as ET

import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st

from horus.errors import PartialGraphError, ProviderError, ValidationError
from horus.fixtures.corpus import address, attack_time
from horus.tracer import (
    FixtureProvider, HttpProvider, LabelDirectory, Provider, TraceConfig, TransferEdge, build_graph, export_graph,
    graph_to_dot, graph_to_graphml, graph_to_json, graph_to_neo4j, query_flows, sorted_edges,
)

SEED = "0x" + "a0" * 20
X = "0x" + "b0" * 20
EXCHANGE = "0x" + "e0" * 20
T0 = 1_000_000


def addr(i: int) -> str:
    return "0x%040x" % (0xC0 + i)


def edge(frm, to, value, ts, kind="normal", n=0, **token):
    return TransferEdge(kind, frm, to, value, "0x%064x" % (n or hash((frm, to, value, ts)) & 0xFFFFFFFF), ts, **token)


class DictProvider(Provider):
    """In-memory provider over a list of edges."""

    def __init__(self, edges, fail_on=()):
        self.by_address = {}
        for e in edges:
            for a in {e.from_, e.to}:
                self.by_address.setdefault(a, []).append(e)
        self.fail_on = set(fail_on)
        self.expanded = []

    def _all(self, address):
        if address in self.fail_on:
            raise ProviderError("boom", retry_exhausted=True)
        return list(self.by_address.get(address, []))

    def fetch_normal(self, address):
        return [e for e in self._all(address) if e.kind == "normal"]

    def fetch_internal(self, address):
        return [e for e in self._all(address) if e.kind == "internal"]

    def fetch_token_transfers(self, address):
        return [e for e in self._all(address) if e.kind == "token"]

    def fetch_all(self, address):
        self.expanded.append(address)
        return super().fetch_all(address)

    def fetch_tx_count(self, address):
        return len(self.by_address.get(address, []))


def test_minimal_forward_and_backward():
    p = DictProvider([edge(SEED, X, 10, T0 + 5)])
    fwd = build_graph([SEED], TraceConfig("forward", 1, attack_timestamp=T0), p)
    assert (fwd.number_of_nodes(), fwd.number_of_edges()) == (2, 1)
    back = build_graph([SEED], TraceConfig("backward", 1, attack_timestamp=T0), p)
    assert (back.number_of_nodes(), back.number_of_edges()) == (2, 0)


def test_ties_with_attack_time_are_excluded_both_ways():
    p = DictProvider([edge(SEED, X, 10, T0)])
    for direction in ("forward", "backward"):
        assert build_graph([SEED], TraceConfig(direction, 2, attack_timestamp=T0), p).number_of_edges() == 0


def test_busy_neighbor_is_kept_but_not_expanded():
    hub, far = addr(1), addr(2)
    edges = [edge(SEED, hub, 1, T0 + 1)] + [edge(hub, far, 1, T0 + 10 + i, n=100 + i) for i in range(1000)]
    p = DictProvider(edges)
    assert p.fetch_tx_count(hub) == 1001
    g = build_graph([SEED], TraceConfig("forward", 3, attack_timestamp=T0), p)
    assert hub in g and far not in g
    assert hub not in p.expanded


def test_seeds_are_exempt_from_the_cap():
    edges = [edge(SEED, addr(i % 50), 1, T0 + 1 + i, n=1 + i) for i in range(1001)]
    g = build_graph([SEED], TraceConfig("forward", 1, attack_timestamp=T0), DictProvider(edges))
    assert g.number_of_edges() == 1001


def test_labels_annotate_nodes():
    labels = LabelDirectory({EXCHANGE.upper().replace("0X", "0x"): ("exchange", "Kraken 1")})
    g = build_graph([SEED], TraceConfig("forward", 2, attack_timestamp=T0),
                    DictProvider([edge(SEED, X, 10, T0 + 1), edge(X, EXCHANGE, 7, T0 + 2)]), labels)
    assert g.nodes[EXCHANGE] == {"kind": "labeled", "category": "exchange", "label": "Kraken 1", "hop": 2}
    assert g.nodes[SEED]["kind"] == "attacker" and g.nodes[X]["kind"] == "unlabeled"


def test_provider_failure_is_partial():
    p = DictProvider([edge(SEED, X, 10, T0 + 1), edge(X, addr(3), 1, T0 + 2)], fail_on={X})
    with pytest.raises(PartialGraphError) as err:
        build_graph([SEED], TraceConfig("forward", 3, attack_timestamp=T0), p)
    assert X in err.value.graph and err.value.frontier == (SEED,)


def test_invalid_inputs():
    with pytest.raises(ValidationError):
        build_graph(["0x12"], TraceConfig(), DictProvider([]))
    with pytest.raises(ValidationError):
        build_graph([], TraceConfig(), DictProvider([]))
    with pytest.raises(ValidationError):
        TraceConfig(max_hops=0)
    with pytest.raises(ValidationError):
        TraceConfig(degree_cap=0)
    with pytest.raises(ValidationError):
        edge(SEED, X, -1, 0)
    with pytest.raises(ValidationError):
        edge(SEED, X, 1, 0, token_name="T", token_symbol="T", token_decimals=0)


# -- random graphs ------------------------------------------------------------


@st.composite
def provider_graphs(draw):
    n = draw(st.integers(2, 7))
    nodes = [SEED] + [addr(i) for i in range(1, n)]
    raw = draw(st.lists(st.tuples(st.sampled_from(nodes), st.sampled_from(nodes), st.integers(0, 50),
                                  st.integers(T0 - 20, T0 + 20)), max_size=25))
    edges = [edge(a, b, val, ts, n=i + 1) for i, (a, b, val, ts) in enumerate(raw) if a != b]
    return edges, draw(st.sampled_from(["forward", "backward"])), draw(st.integers(1, 3)), draw(st.integers(1, 6))


@settings(max_examples=150, deadline=None)
@given(provider_graphs())
def test_graph_invariants(params):
    edges, direction, hops, cap = params
    p = DictProvider(edges)
    g = build_graph([SEED], TraceConfig(direction, hops, cap, T0), p)
    for n, d in g.nodes(data=True):
        assert d["hop"] <= hops
    for e in sorted_edges(g):
        assert e.timestamp > T0 if direction == "forward" else e.timestamp < T0
        # an edge only exists because one endpoint was expanded
        assert any(a in p.expanded for a in (e.from_, e.to))
    for a in p.expanded:
        assert a == SEED or p.fetch_tx_count(a) <= cap
    for u in g.nodes:
        for path in [query_flows(g, SEED, address=u, max_path_len=hops)]:
            for fp in path.paths:
                assert fp.bottleneck == min(fp.values)
                assert all(fp.bottleneck <= g_v for g_v in fp.values)


# -- flow queries -------------------------------------------------------------


def _chain():
    g = nx.MultiDiGraph()
    for n, kind, cat, label in [(SEED, "attacker", None, None), (X, "unlabeled", None, None),
                                (EXCHANGE, "labeled", "exchange", "Kraken 1")]:
        g.add_node(n, kind=kind, category=cat, label=label)
    g.add_edge(SEED, X, transfer=edge(SEED, X, 10, T0 + 1))
    g.add_edge(X, EXCHANGE, transfer=edge(X, EXCHANGE, 7, T0 + 2))
    return g


def test_chain_bottleneck_and_aggregate():
    r = query_flows(_chain(), SEED, category="exchange")
    assert [p.nodes for p in r.paths] == [(SEED, X, EXCHANGE)]
    assert r.paths[0].values == (10, 7) and r.paths[0].bottleneck == 7
    assert r.inflow == 7 and r.bottleneck_total == 7


def test_empty_flow_results():
    assert query_flows(_chain(), SEED, category="mixer").paths == ()
    assert query_flows(_chain(), EXCHANGE, category="exchange").paths == ()
    assert query_flows(_chain(), X, label="Kraken 1").bottleneck_total == 7


def test_parallel_transfers_are_summed():
    g = _chain()
    g.add_edge(X, EXCHANGE, transfer=edge(X, EXCHANGE, 2, T0 + 3))
    r = query_flows(g, SEED, address=EXCHANGE)
    assert r.paths[0].values == (10, 9)


def test_token_flows_are_separate_assets():
    g = _chain()
    g.add_edge(SEED, EXCHANGE, transfer=edge(SEED, EXCHANGE, 5, T0 + 4, kind="token", token_name="Tether",
                                             token_symbol="USDT", token_decimals=6))
    assert query_flows(g, SEED, category="exchange").bottleneck_total == 7
    assert query_flows(g, SEED, category="exchange", asset="USDT").bottleneck_total == 5


# -- providers ----------------------------------------------------------------


def test_fixture_provider(corpus_dir):
    p = FixtureProvider(corpus_dir / "provider")
    attacker = address("attacker", 1)
    [tok] = p.fetch_token_transfers(attacker)
    assert (tok.value, tok.token_decimals, tok.token_symbol) == (5_000_000, 6, "USDT")
    assert p.fetch_normal("0x" + "12" * 20) == [] and p.fetch_tx_count("0x" + "12" * 20) == 0
    assert p.fetch_tx_count("0x" + "9b" * 20) == 1001


def test_fixture_provider_token_file(tmp_path):
    rows = [{"kind": "token", "from": SEED, "to": X, "value": str(10**30 + i), "hash": "0x%064x" % i,
             "timestamp": T0 + i, "token_name": "Dai", "token_symbol": "DAI", "token_decimals": 18} for i in range(3)]
    (tmp_path / f"{SEED}.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    edges = FixtureProvider(tmp_path).fetch_token_transfers(SEED)
    assert [e.value for e in edges] == [10**30, 10**30 + 1, 10**30 + 2]
    assert {e.token_decimals for e in edges} == {18}


def test_fixture_corpus_trace(corpus_dir):
    p = FixtureProvider(corpus_dir / "provider")
    labels = LabelDirectory.from_csv(corpus_dir / "labels.csv")
    seed = address("attacker", 1)
    g = build_graph([seed], TraceConfig("forward", 3, attack_timestamp=attack_time(1)), p, labels)
    r = query_flows(g, seed, category="exchange")
    assert r.bottleneck_total == 4 * 10**18 and r.inflow == 7 * 10**18
    assert "0x" + "9c" * 20 not in g  # behind the busy hub
    back = build_graph([seed], TraceConfig("backward", 3, attack_timestamp=attack_time(1)), p, labels)
    assert all(e.timestamp < attack_time(1) for e in sorted_edges(back))


class FakeResponse:
    def __init__(self, status, body):
        self.status_code, self._body = status, body

    def json(self):
        return self._body


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def get(self, url, params=None, timeout=None):
        self.calls.append(params)
        r = self.responses.pop(0)
        if isinstance(r, Exception):
            raise r
        return r


def _http(responses, retries=2):
    return HttpProvider("https://api.example/api", api_key="k", session=FakeSession(responses), rate_per_second=0,
                        retries=retries, backoff=0)


def test_http_provider_parses_rows():
    row = {"from": SEED, "to": X, "value": "12", "hash": "0x" + "11" * 32, "timeStamp": "1700000000", "isError": "0"}
    failed = dict(row, isError="1")
    p = _http([FakeResponse(200, {"status": "1", "message": "OK", "result": [row, failed]})])
    [e] = p.fetch_normal(SEED)
    assert (e.value, e.timestamp, e.kind) == (12, 1_700_000_000, "normal")
    assert p.session.calls[0]["action"] == "txlist" and p.session.calls[0]["apikey"] == "k"


def test_http_provider_retries_rate_limit_then_succeeds():
    p = _http([FakeResponse(200, {"status": "0", "message": "NOTOK", "result": "Max rate limit reached"}),
               FakeResponse(429, {}),
               FakeResponse(200, {"status": "0", "message": "No transactions found", "result": []})])
    assert p.fetch_internal(SEED) == []
    assert len(p.session.calls) == 3


def test_http_provider_exhausts_retries():
    p = _http([ConnectionError("down")] * 3, retries=2)
    with pytest.raises(ProviderError) as err:
        p.fetch_token_transfers(SEED)
    assert err.value.retry_exhausted


def test_http_provider_rejects_bad_key():
    p = _http([FakeResponse(200, {"status": "0", "message": "NOTOK", "result": "Invalid API Key"})])
    with pytest.raises(ProviderError) as err:
        p.fetch_normal(SEED)
    assert not err.value.retry_exhausted


# -- exports ------------------------------------------------------------------


def test_dot_statements():
    g = build_graph([SEED], TraceConfig("forward", 1, attack_timestamp=T0), DictProvider([edge(SEED, X, 10, T0 + 5)]))
    dot = graph_to_dot(g)
    assert sum(1 for line in dot.splitlines() if line.strip().endswith("];") and "->" not in line) == 2
    assert sum(1 for line in dot.splitlines() if "->" in line) == 1


def test_empty_graph_exports_are_valid():
    g = nx.MultiDiGraph()
    assert graph_to_dot(g) == "digraph fundflow {\n}\n"
    root = ET.fromstring(graph_to_graphml(g))
    assert root.tag.endswith("graphml")
    assert json.loads(graph_to_json(g))["nodes"] == []
    nodes, edges = graph_to_neo4j(g)
    assert nodes.startswith("address:ID") and edges.count("\n") == 1


def test_exports_are_deterministic(tmp_path):
    edges = [edge(SEED, X, 10, T0 + 1), edge(X, EXCHANGE, 7, T0 + 2),
             edge(SEED, EXCHANGE, 3, T0 + 3, kind="token", token_name="Tether", token_symbol="USDT", token_decimals=6)]
    g1 = build_graph([SEED], TraceConfig("forward", 2, attack_timestamp=T0), DictProvider(edges))
    g2 = build_graph([SEED], TraceConfig("forward", 2, attack_timestamp=T0), DictProvider(list(reversed(edges))))
    for fmt in ("dot", "graphml", "json"):
        a = export_graph(g1, fmt, tmp_path / f"a.{fmt}").read_bytes()
        assert a == export_graph(g2, fmt, tmp_path / f"b.{fmt}").read_bytes()
    export_graph(g1, "neo4j", tmp_path / "neo")
    assert (tmp_path / "neo" / "edges.csv").read_text().count("TRANSFER") == 3
    ml = ET.fromstring(graph_to_graphml(g1))
    assert len(ml.findall(".//{http://graphml.graphdrawing.org/xmlns}edge")) == 3


def test_label_file_needs_columns(tmp_path):
    (tmp_path / "l.csv").write_text("addr,cat\n")
    with pytest.raises(ValidationError):
        LabelDirectory.from_csv(tmp_path / "l.csv")
