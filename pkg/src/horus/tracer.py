"""Fund-flow graphs around attacker accounts.

A graph is a ``networkx.MultiDiGraph`` keyed by lowercase address. Nodes carry
``kind`` (attacker, labeled, unlabeled) plus ``category``/``label`` for labeled
accounts; every edge carries one :class:`TransferEdge` under ``transfer``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import threading
import time
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import networkx as nx

from .errors import PartialGraphError, ProviderError, ValidationError
from .trace import normalize_address

log = logging.getLogger(__name__)

EDGE_KINDS = ("normal", "internal", "token")
API_KEY_ENV = "HORUS_PROVIDER_API_KEY"


@dataclass(frozen=True)
class TransferEdge:
    kind: str
    from_: str
    to: str
    value: int
    tx_hash: str
    timestamp: int
    token_name: Optional[str] = None
    token_symbol: Optional[str] = None
    token_decimals: Optional[int] = None

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise ValidationError(f"unknown transfer kind {self.kind!r}")
        if self.value < 0:
            raise ValidationError("transfer value must be non-negative")
        token = (self.token_name, self.token_symbol, self.token_decimals)
        if (self.kind == "token") != all(x is not None for x in token):
            raise ValidationError("token fields are required exactly for token transfers")
        object.__setattr__(self, "from_", normalize_address(self.from_))
        object.__setattr__(self, "to", normalize_address(self.to))

    @property
    def asset(self) -> str:
        return self.token_symbol if self.kind == "token" else "ETH"

    @property
    def identity(self) -> tuple:
        return (self.kind, self.tx_hash, self.from_, self.to, self.value, self.token_symbol)

    def sort_key(self) -> tuple:
        return (self.from_, self.to, self.timestamp, self.kind, self.tx_hash, self.value, self.token_symbol or "")

    def to_json(self) -> dict:
        out = {"kind": self.kind, "from": self.from_, "to": self.to, "value": str(self.value),
               "hash": self.tx_hash, "timestamp": self.timestamp}
        if self.kind == "token":
            out.update(token_name=self.token_name, token_symbol=self.token_symbol, token_decimals=self.token_decimals)
        return out


def edge_from_record(record: dict, kind: Optional[str] = None) -> TransferEdge:
    """Build an edge from a fixture line or an Etherscan result row."""
    kind = kind or record["kind"]
    decimals = record.get("token_decimals", record.get("tokenDecimal"))
    return TransferEdge(
        kind=kind,
        from_=record["from"],
        to=record.get("to") or record.get("contractAddress") or "",
        value=int(record["value"]),
        tx_hash=record.get("hash", ""),
        timestamp=int(record.get("timestamp", record.get("timeStamp", 0))),
        token_name=record.get("token_name", record.get("tokenName")) if kind == "token" else None,
        token_symbol=record.get("token_symbol", record.get("tokenSymbol")) if kind == "token" else None,
        token_decimals=int(decimals) if kind == "token" and decimals is not None else None,
    )


@dataclass(frozen=True)
class TraceConfig:
    direction: str = "forward"
    max_hops: int = 3
    degree_cap: int = 1000
    attack_timestamp: int = 0
    workers: int = 4

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValidationError(f"direction must be forward or backward, not {self.direction!r}")
        if self.max_hops < 1:
            raise ValidationError("max_hops must be >= 1")
        if self.degree_cap < 1:
            raise ValidationError("degree_cap must be >= 1")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def keeps(self, edge: TransferEdge) -> bool:
        if self.direction == "forward":
            return edge.timestamp > self.attack_timestamp
        return edge.timestamp < self.attack_timestamp


@dataclass
class LabelDirectory:
    entries: dict = field(default_factory=dict)  # address -> (category, label)

    def __post_init__(self):
        self.entries = {normalize_address(a): tuple(v) for a, v in self.entries.items()}

    @classmethod
    def from_csv(cls, path) -> "LabelDirectory":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"address", "category", "label"} - set(reader.fieldnames or ())
            if missing:
                raise ValidationError(f"{path}: label file lacks columns {sorted(missing)}")
            return cls({row["address"]: (row["category"], row["label"]) for row in reader})

    def get(self, address: str):
        return self.entries.get(normalize_address(address))

    def __len__(self) -> int:
        return len(self.entries)


# --------------------------------------------------------------------------
# providers


class Provider:
    def fetch_normal(self, address: str) -> list:
        raise NotImplementedError

    def fetch_internal(self, address: str) -> list:
        raise NotImplementedError

    def fetch_token_transfers(self, address: str) -> list:
        raise NotImplementedError

    def fetch_tx_count(self, address: str) -> int:
        raise NotImplementedError

    def fetch_all(self, address: str) -> list:
        return self.fetch_normal(address) + self.fetch_internal(address) + self.fetch_token_transfers(address)


def _checked(address: str) -> str:
    if not address:
        raise ValidationError("empty address")
    return normalize_address(address)


class FixtureProvider(Provider):
    """Reads ``<address>.jsonl`` transfer records from a directory."""

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise ValidationError(f"provider fixture directory {directory} does not exist")

    def _records(self, address: str) -> list:
        path = self.directory / f"{_checked(address)}.jsonl"
        if not path.exists():
            return []
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def _edges(self, address: str, kind: str) -> list:
        return [edge_from_record(r) for r in self._records(address) if r["kind"] == kind]

    def fetch_normal(self, address: str) -> list:
        return self._edges(address, "normal")

    def fetch_internal(self, address: str) -> list:
        return self._edges(address, "internal")

    def fetch_token_transfers(self, address: str) -> list:
        return self._edges(address, "token")

    def fetch_tx_count(self, address: str) -> int:
        return len(self._records(address))


class HttpProvider(Provider):
    """Etherscan-compatible client with a simple rate limit and retries."""

    ACTIONS = {"normal": "txlist", "internal": "txlistinternal", "token": "tokentx"}

    def __init__(self, base_url: str, api_key: Optional[str] = None, session=None, rate_per_second: float = 5.0,
                 retries: int = 3, backoff: float = 1.0, timeout: float = 30.0):
        import requests

        self.base_url = base_url
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.session = session or requests.Session()
        self.interval = 1.0 / rate_per_second if rate_per_second > 0 else 0.0
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._lock = threading.Lock()
        self._next_slot = 0.0
        self._cache: dict = {}

    def _wait_turn(self) -> None:
        with self._lock:
            now = time.monotonic()
            wait = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + self.interval
        if wait > 0:
            time.sleep(wait)

    def _get(self, action: str, address: str) -> list:
        params = {"module": "account", "action": action, "address": address, "startblock": 0,
                  "endblock": 99_999_999, "sort": "asc", "apikey": self.api_key}
        last = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            self._wait_turn()
            try:
                resp = self.session.get(self.base_url, params=params, timeout=self.timeout)
            except Exception as exc:  # transport errors of any client library
                last = f"transport error: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise ProviderError(f"{action} {address}: HTTP {resp.status_code}")
            body = resp.json()
            result = body.get("result")
            if str(body.get("status")) == "1" and isinstance(result, list):
                return result
            message = str(body.get("message", ""))
            if message.startswith("No transactions found"):
                return []
            last = f"{message}: {result}"
            if "rate limit" not in f"{message} {result}".lower():
                raise ProviderError(f"{action} {address}: {last}")
        raise ProviderError(f"{action} {address}: retries exhausted ({last})", retry_exhausted=True)

    def _fetch(self, address: str, kind: str) -> list:
        address = _checked(address)
        key = (address, kind)
        if key not in self._cache:
            rows = self._get(self.ACTIONS[kind], address)
            self._cache[key] = [edge_from_record(r, kind) for r in rows if str(r.get("isError", "0")) != "1"]
        return list(self._cache[key])

    def fetch_normal(self, address: str) -> list:
        return self._fetch(address, "normal")

    def fetch_internal(self, address: str) -> list:
        return self._fetch(address, "internal")

    def fetch_token_transfers(self, address: str) -> list:
        return self._fetch(address, "token")

    def fetch_tx_count(self, address: str) -> int:
        return len(self.fetch_all(address))


def make_provider(spec: str, base_dir: Optional[Path] = None) -> Provider:
    """``fixture:DIR`` or ``http:URL``."""
    kind, _, target = spec.partition(":")
    if kind == "fixture":
        path = Path(target)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return FixtureProvider(path)
    if kind == "http":
        return HttpProvider(target)
    raise ValidationError(f"provider must be fixture:DIR or http:URL, got {spec!r}")


# --------------------------------------------------------------------------
# graph construction


def _add_node(graph: nx.MultiDiGraph, address: str, labels: LabelDirectory, hop: int, seed: bool = False) -> None:
    if address in graph:
        return
    entry = None if seed else labels.get(address)
    if seed:
        graph.add_node(address, kind="attacker", category=None, label=None, hop=hop)
    elif entry:
        graph.add_node(address, kind="labeled", category=entry[0], label=entry[1], hop=hop)
    else:
        graph.add_node(address, kind="unlabeled", category=None, label=None, hop=hop)


def build_graph(seeds: Iterable[str], config: TraceConfig, provider: Provider,
                labels: Optional[LabelDirectory] = None) -> nx.MultiDiGraph:
    """Breadth-first expansion from ``seeds`` for ``config.max_hops`` hops.

    Every transfer touching an expanded account is inspected; its counterparty
    becomes a node, but only transfers on the right side of the attack time
    become edges and only those lead to further expansion. Accounts with more
    than ``degree_cap`` transfers are kept as leaves, seeds excepted.
    """
    labels = labels or LabelDirectory()
    seed_list = sorted({_checked(s) for s in seeds})
    if not seed_list:
        raise ValidationError("at least one seed address is required")
    graph = nx.MultiDiGraph(direction=config.direction, attack_timestamp=config.attack_timestamp,
                            max_hops=config.max_hops, seeds=",".join(seed_list))
    for s in seed_list:
        _add_node(graph, s, labels, 0, seed=True)
    seen_edges: set = set()
    expanded: set = set()
    frontier = seed_list
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for hop in range(1, config.max_hops + 1):
            def load(address: str):
                if address not in seed_list and provider.fetch_tx_count(address) > config.degree_cap:
                    return None
                return provider.fetch_all(address)

            try:
                batches = list(pool.map(load, frontier))
            except ProviderError as exc:
                raise PartialGraphError(f"provider failed at hop {hop}: {exc}", graph=graph,
                                        frontier=tuple(sorted(expanded))) from exc
            nxt: set = set()
            for address, edges in zip(frontier, batches):
                if edges is None:
                    log.info("not expanding %s: more than %d transfers", address, config.degree_cap)
                    continue
                expanded.add(address)
                for e in sorted(edges, key=TransferEdge.sort_key):
                    if address not in (e.from_, e.to):
                        continue
                    other = e.to if e.from_ == address else e.from_
                    _add_node(graph, other, labels, hop)
                    if not config.keeps(e) or e.identity in seen_edges:
                        continue
                    seen_edges.add(e.identity)
                    graph.add_edge(e.from_, e.to, transfer=e)
                    if other not in expanded:
                        nxt.add(other)
            frontier = sorted(nxt - expanded)
            log.info("hop %d: %d nodes, %d edges, next frontier %d", hop, graph.number_of_nodes(),
                     graph.number_of_edges(), len(frontier))
            if not frontier:
                break
    return graph


def sorted_edges(graph: nx.MultiDiGraph) -> list:
    return sorted((d["transfer"] for _, _, d in graph.edges(data=True)), key=TransferEdge.sort_key)


# --------------------------------------------------------------------------
# flow queries


@dataclass(frozen=True)
class FlowPath:
    nodes: tuple
    values: tuple

    @property
    def bottleneck(self) -> int:
        return min(self.values)

    def to_json(self) -> dict:
        return {"nodes": list(self.nodes), "values": [str(v) for v in self.values], "bottleneck": str(self.bottleneck)}


@dataclass(frozen=True)
class FlowResult:
    paths: tuple
    matches: tuple
    inflow: int  # value of the distinct last hops into matching nodes
    bottleneck_total: int

    def to_json(self) -> dict:
        return {"matches": list(self.matches), "paths": [p.to_json() for p in self.paths],
                "inflow": str(self.inflow), "bottleneck_total": str(self.bottleneck_total)}


def capacities(graph: nx.MultiDiGraph, asset: str = "ETH") -> dict:
    """(u, v) -> summed value of the transfers of ``asset`` from u to v."""
    cap: dict = {}
    for u, v, d in graph.edges(data=True):
        e = d["transfer"]
        if e.asset == asset:
            cap[(u, v)] = cap.get((u, v), 0) + e.value
    return cap


def matching_nodes(graph: nx.MultiDiGraph, category=None, label=None, address=None) -> set:
    addr = normalize_address(address) if address else None
    out = set()
    for n, d in graph.nodes(data=True):
        if category is not None and d.get("category") != category:
            continue
        if label is not None and d.get("label") != label:
            continue
        if addr is not None and n != addr:
            continue
        out.add(n)
    return out


def query_flows(graph: nx.MultiDiGraph, source: str, *, category=None, label=None, address=None,
                max_path_len: int = 5, asset: str = "ETH") -> FlowResult:
    """Simple paths from ``source`` that end at the first node matching the filter."""
    source = normalize_address(source)
    targets = matching_nodes(graph, category, label, address) - {source}
    if source not in graph or not targets:
        return FlowResult((), tuple(sorted(targets)), 0, 0)
    cap = capacities(graph, asset)
    succ: dict = {}
    for (u, w) in sorted(cap):
        if cap[(u, w)] > 0:
            succ.setdefault(u, []).append(w)
    paths = []

    def walk(node: str, trail: list, values: list):
        for nxt in succ.get(node, ()):
            if nxt in trail:
                continue
            vals = values + [cap[(node, nxt)]]
            if nxt in targets:
                paths.append(FlowPath(tuple(trail + [nxt]), tuple(vals)))
            elif len(vals) < max_path_len:
                walk(nxt, trail + [nxt], vals)

    walk(source, [source], [])
    last_hops = {(p.nodes[-2], p.nodes[-1]) for p in paths}
    return FlowResult(
        tuple(paths),
        tuple(sorted(targets)),
        sum(cap[h] for h in last_hops),
        sum(p.bottleneck for p in paths),
    )


def assets(graph: nx.MultiDiGraph) -> list:
    symbols = {d["transfer"].asset for _, _, d in graph.edges(data=True)}
    return ["ETH"] + sorted(symbols - {"ETH"})


def flow_report(graph: nx.MultiDiGraph, seeds: Iterable[str], max_path_len: int = 5) -> dict:
    """Per labeled category and asset: value reaching it from the seeds."""
    categories = sorted({d["category"] for _, d in graph.nodes(data=True) if d.get("category")})
    report = {}
    for cat in categories:
        per_asset = {}
        for asset in assets(graph):
            results = [query_flows(graph, s, category=cat, max_path_len=max_path_len, asset=asset) for s in sorted(seeds)]
            paths = [p for r in results for p in r.paths]
            if not paths:
                continue
            per_asset[asset] = {
                "bottleneck_total": str(sum(r.bottleneck_total for r in results)),
                "inflow": str(sum(r.inflow for r in results)),
                "paths": [p.to_json() for p in paths],
            }
        report[cat] = per_asset
    return report


# --------------------------------------------------------------------------
# exports


def _node_rows(graph: nx.MultiDiGraph) -> list:
    return [(n, graph.nodes[n]) for n in sorted(graph.nodes)]


def graph_to_json(graph: nx.MultiDiGraph) -> str:
    doc = {
        "graph": {k: graph.graph[k] for k in sorted(graph.graph)},
        "nodes": [{"address": n, "kind": d["kind"], "category": d.get("category"), "label": d.get("label")}
                  for n, d in _node_rows(graph)],
        "edges": [e.to_json() for e in sorted_edges(graph)],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _dot_quote(text) -> str:
    return '"' + str(text).replace("\\", "\\\\").replace('"', '\\"') + '"'


def graph_to_dot(graph: nx.MultiDiGraph) -> str:
    lines = ["digraph fundflow {"]
    for n, d in _node_rows(graph):
        attrs = [f"kind={_dot_quote(d['kind'])}"]
        if d.get("category"):
            attrs += [f"category={_dot_quote(d['category'])}", f"label={_dot_quote(d['label'])}"]
        lines.append(f"  {_dot_quote(n)} [{', '.join(attrs)}];")
    for e in sorted_edges(graph):
        attrs = [f"kind={_dot_quote(e.kind)}", f"value={_dot_quote(e.value)}", f"tx_hash={_dot_quote(e.tx_hash)}",
                 f"timestamp={_dot_quote(e.timestamp)}"]
        if e.kind == "token":
            attrs += [f"token_name={_dot_quote(e.token_name)}", f"token_symbol={_dot_quote(e.token_symbol)}",
                      f"token_decimals={_dot_quote(e.token_decimals)}"]
        lines.append(f"  {_dot_quote(e.from_)} -> {_dot_quote(e.to)} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


_NODE_KEYS = ("kind", "category", "label")
_EDGE_KEYS = ("kind", "value", "tx_hash", "timestamp", "token_name", "token_symbol", "token_decimals")


def graph_to_graphml(graph: nx.MultiDiGraph) -> str:
    ns = "http://graphml.graphdrawing.org/xmlns"
    root = ET.Element("graphml", xmlns=ns)
    for k in _NODE_KEYS:
        ET.SubElement(root, "key", id=f"n_{k}", attrib={"for": "node", "attr.name": k, "attr.type": "string"})
    for k in _EDGE_KEYS:
        ET.SubElement(root, "key", id=f"e_{k}", attrib={"for": "edge", "attr.name": k, "attr.type": "string"})
    g = ET.SubElement(root, "graph", id="fundflow", edgedefault="directed")
    for n, d in _node_rows(graph):
        node = ET.SubElement(g, "node", id=n)
        for k in _NODE_KEYS:
            if d.get(k) is not None:
                ET.SubElement(node, "data", key=f"n_{k}").text = str(d[k])
    for i, e in enumerate(sorted_edges(graph)):
        edge = ET.SubElement(g, "edge", id=f"e{i}", source=e.from_, target=e.to)
        for k in _EDGE_KEYS:
            value = getattr(e, k)
            if value is not None:
                ET.SubElement(edge, "data", key=f"e_{k}").text = str(value)
    ET.indent(root)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def graph_to_neo4j(graph: nx.MultiDiGraph) -> tuple:
    """(nodes.csv, edges.csv) in neo4j-admin import layout."""
    nodes, edges = io.StringIO(), io.StringIO()
    w = csv.writer(nodes, lineterminator="\n")
    w.writerow(["address:ID", "kind", "category", "label", ":LABEL"])
    for n, d in _node_rows(graph):
        w.writerow([n, d["kind"], d.get("category") or "", d.get("label") or "", "Account"])
    w = csv.writer(edges, lineterminator="\n")
    w.writerow([":START_ID", ":END_ID", "kind", "value", "tx_hash", "timestamp:long", "token_name", "token_symbol",
                "token_decimals", ":TYPE"])
    for e in sorted_edges(graph):
        w.writerow([e.from_, e.to, e.kind, e.value, e.tx_hash, e.timestamp, e.token_name or "", e.token_symbol or "",
                    "" if e.token_decimals is None else e.token_decimals, "TRANSFER"])
    return nodes.getvalue(), edges.getvalue()


EXPORTERS = {"dot": graph_to_dot, "graphml": graph_to_graphml, "json": graph_to_json}


def export_graph(graph: nx.MultiDiGraph, fmt: str, path) -> Path:
    path = Path(path)
    fmt = fmt.lower()
    if fmt == "neo4j":
        path.mkdir(parents=True, exist_ok=True)
        nodes, edges = graph_to_neo4j(graph)
        (path / "nodes.csv").write_text(nodes)
        (path / "edges.csv").write_text(edges)
        return path
    if fmt not in EXPORTERS:
        raise ValidationError(f"unknown export format {fmt!r}")
    path.write_text(EXPORTERS[fmt](graph))
    return path
