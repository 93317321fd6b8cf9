"""``horus`` command line: extract facts, analyze them, trace attacker funds.

Exit codes: 0 success, 1 validation or config error, 2 processing error,
3 partial tracing results.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from . import detectors, facts, tracer
from .config import AnalyzeOptions, ExtractOptions, RunConfig, TraceOptions, in_ranges, parse_block_ranges
from .errors import FactFileError, HorusError, PartialGraphError, ValidationError
from .trace import load_meta, load_trace, trace_tx_hash

EXIT_OK, EXIT_INVALID, EXIT_PROCESSING, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("horus")

TRACE_SUFFIXES = (".trace.json", ".trace")


# --------------------------------------------------------------------------
# extract


def trace_files(directory: Path) -> list:
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.name.endswith(TRACE_SUFFIXES))


def _extract_one(path: Path, tx, block, dump_dir: Optional[Path]):
    """Worker: (tx_hash, FactStore | None, error message | None)."""
    try:
        trace = load_trace(path)
        if dump_dir is not None:
            with open(dump_dir / f"{tx.tx_hash}.taint", "w", encoding="utf-8") as fh:
                store = facts.extract_facts(trace, tx, block, debug=fh)
        else:
            store = facts.extract_facts(trace, tx, block)
        return tx.tx_hash, store, None
    except HorusError as exc:
        return tx.tx_hash, None, f"{type(exc).__name__}: {exc}"


def cmd_extract(opts: ExtractOptions, out: Path) -> int:
    opts.validate()
    meta = load_meta(opts.meta)
    files = trace_files(opts.traces)
    jobs, errors = [], []
    filtered = 0
    for path in files:
        try:
            h = trace_tx_hash(path)
        except ValidationError as exc:
            errors.append({"file": path.name, "error": str(exc)})
            continue
        if h not in meta:
            errors.append({"file": path.name, "error": "no metadata for transaction"})
            continue
        tx, block = meta[h]
        if (opts.skip_gas_limit_21000 and tx.gas_limit == 21000) or in_ranges(tx.block_number, opts.skip_blocks):
            filtered += 1
            continue
        jobs.append((path, tx, block))

    if errors and opts.strict:
        log.error("%s: %s", errors[0]["file"], errors[0]["error"])
        return EXIT_PROCESSING

    dump_dir = None
    if opts.dump_taint:
        dump_dir = Path(out) / "taint"
        dump_dir.mkdir(parents=True, exist_ok=True)
    args = [(p, tx, block, dump_dir) for p, tx, block in jobs]
    if opts.jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=opts.jobs) as pool:
            results = list(pool.map(_extract_one, *zip(*args)))
    else:
        results = [_extract_one(*a) for a in args]

    stores = []
    names = {tx.tx_hash: p.name for p, tx, _ in jobs}
    for h, store, err in results:
        if err is not None:
            errors.append({"file": names[h], "error": err})
            if opts.strict:
                log.error("%s: %s", names[h], err)
                return EXIT_PROCESSING
        else:
            stores.append(store)
        log.debug("extracted %s", names[h])

    merged = facts.FactStore().merge(*stores)
    errors.sort(key=lambda e: e["file"])
    extra = {"processed": len(stores), "filtered": filtered, "failed": len(errors), "errors": errors}
    facts.write_fact_files(merged, out, extra)
    log.info("processed %d, filtered %d, failed %d, %d facts", len(stores), filtered, len(errors), merged.total())
    for e in errors:
        log.error("%s: %s", e["file"], e["error"])
    return EXIT_PROCESSING if errors else EXIT_OK


# --------------------------------------------------------------------------
# analyze


def _plural(n: int, word: str) -> str:
    return f"{n} {word}" if n == 1 else f"{n} {word}s"


def summarize(findings, rules: detectors.RuleSet) -> dict:
    """Per rule: distinct attacked contracts and distinct adversarial transactions."""
    rows = {}
    for rule in rules.enabled:
        mine = [f for f in findings if f.rule == rule]
        rows[rule] = {
            "contracts": len({f.victim for f in mine}),
            "transactions": len({h for f in mine for h in f.tx_hashes}),
        }
    rows_total = {
        "contracts": len({f.victim for f in findings}),
        "transactions": len({h for f in findings for h in f.tx_hashes}),
    }
    return {"rules": rows, "total_unique": rows_total}


def summary_text(summary: dict) -> str:
    lines = [f"{rule}: {_plural(r['contracts'], 'contract')}, {_plural(r['transactions'], 'transaction')}"
             for rule, r in summary["rules"].items()]
    t = summary["total_unique"]
    lines.append(f"Total unique: {_plural(t['contracts'], 'contract')}, {_plural(t['transactions'], 'transaction')}")
    return "\n".join(lines) + "\n"


def findings_document(findings, store: facts.FactStore, summary: dict) -> dict:
    txs = {t.tx_hash: t for t in store["transaction"]}
    times = {b.block_number: b.timestamp for b in store["block"]}
    entries = []
    for f in findings:
        entry = f.to_json()
        entry["transactions"] = [
            {"hash": h, "from": txs[h].from_, "block_number": txs[h].block_number, "tx_index": txs[h].tx_index,
             "timestamp": times.get(txs[h].block_number)}
            for h in f.tx_hashes
        ]
        entries.append(entry)
    return {"findings": entries, "summary": summary}


def findings_csv(findings) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rule", "tx_hashes", "contract", "amount", "parties"])
    for f in findings:
        w.writerow([f.rule, ";".join(f.tx_hashes), f.victim, f.amount, ";".join(f"{k}={a}" for k, a in f.parties)])
    return buf.getvalue()


def cmd_analyze(facts_dir: Path, opts: AnalyzeOptions, out: Path) -> int:
    rules = detectors.RuleSet.parse(opts.rules)
    try:
        store = facts.read_fact_files(facts_dir)
    except FactFileError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    findings = detectors.detect_all(store, rules, workers=opts.jobs)
    summary = summarize(findings, rules)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    doc = findings_document(findings, store, summary)
    (out / "findings.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "findings.csv").write_text(findings_csv(findings), encoding="utf-8")
    text = summary_text(summary)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# trace


def attack_clusters(doc: dict) -> list:
    """(sender, earliest attack timestamp) per distinct adversarial sender."""
    earliest: dict = {}
    for f in doc.get("findings", []):
        for t in f.get("transactions", []):
            sender, ts = t["from"], t.get("timestamp")
            if ts is None:
                raise ValidationError(f"finding transaction {t.get('hash')} has no timestamp")
            earliest[sender] = min(ts, earliest.get(sender, ts))
    return sorted(earliest.items())


def cmd_trace(findings_path: Path, opts: TraceOptions, out: Path) -> int:
    try:
        doc = json.loads(Path(findings_path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"findings file {findings_path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{findings_path}: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("findings"), list):
        raise ValidationError(f"{findings_path}: not a findings document")
    provider = tracer.make_provider(opts.provider)
    if isinstance(provider, tracer.HttpProvider):
        provider.retries = opts.retries
    labels = tracer.LabelDirectory.from_csv(opts.labels) if opts.labels else tracer.LabelDirectory()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clusters, partial = [], False
    for seed, ts in attack_clusters(doc):
        config = tracer.TraceConfig(opts.direction, opts.hops, opts.degree_cap, ts, opts.workers)
        entry = {"seed": seed, "attack_timestamp": ts, "direction": opts.direction, "partial": False}
        try:
            graph = tracer.build_graph([seed], config, provider, labels)
        except PartialGraphError as exc:
            graph, partial = exc.graph, True
            entry.update(partial=True, error=str(exc), completed_frontier=list(exc.frontier))
            log.error("%s: %s", seed, exc)
        gdir = out / seed
        if gdir.exists():
            shutil.rmtree(gdir)
        gdir.mkdir(parents=True)
        for fmt in ("dot", "graphml", "json"):
            tracer.export_graph(graph, fmt, gdir / f"graph.{fmt}")
        tracer.export_graph(graph, "neo4j", gdir / "neo4j")
        entry.update(nodes=graph.number_of_nodes(), edges=graph.number_of_edges(),
                     flows=tracer.flow_report(graph, [seed], opts.max_path_len))
        clusters.append(entry)
        log.info("traced %s: %d nodes, %d edges", seed, graph.number_of_nodes(), graph.number_of_edges())
    report = {"partial": partial, "clusters": clusters, "totals": _flow_totals(clusters)}
    (out / "flow_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_PARTIAL if partial else EXIT_OK


def _flow_totals(clusters) -> dict:
    totals: dict = {}
    for c in clusters:
        for cat, per_asset in c["flows"].items():
            for asset, r in per_asset.items():
                slot = totals.setdefault(cat, {}).setdefault(asset, 0)
                totals[cat][asset] = slot + int(r["bottleneck_total"])
    return {cat: {a: str(v) for a, v in sorted(per.items())} for cat, per in sorted(totals.items())}


# --------------------------------------------------------------------------
# run


def cmd_run(config: RunConfig, out: Optional[Path] = None) -> int:
    out = Path(out or config.output)
    code = cmd_extract(config.extract, out / "facts")
    if code != EXIT_OK:
        log.error("extract stage failed; stopping")
        return code
    code = cmd_analyze(out / "facts", config.analyze, out / "analysis")
    if code != EXIT_OK or config.trace is None:
        return code
    return cmd_trace(out / "analysis" / "findings.json", config.trace, out / "trace")


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="horus", description="Attack detection and fund tracing over EVM traces.")
    parser.add_argument("--quiet", action="store_true", help="only print the summary and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="replay traces and write Datalog fact files")
    p.add_argument("--traces", type=Path, required=True)
    p.add_argument("--meta", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--strict", action="store_true", help="stop at the first failing trace and write nothing")
    p.add_argument("--skip-gas-limit-21000", action="store_true")
    p.add_argument("--skip-blocks", default="", help="inclusive ranges A..B,C..D")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dump-taint", action="store_true", help="write per-step shadow state next to the facts")

    p = sub.add_parser("analyze", help="run the detection rules over fact files")
    p.add_argument("--facts", type=Path, required=True)
    p.add_argument("--rules", default="all")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("trace", help="build fund-flow graphs from the attackers of a findings file")
    p.add_argument("--findings", type=Path, required=True)
    p.add_argument("--provider", required=True, help="fixture:DIR or http:URL")
    p.add_argument("--direction", choices=("forward", "backward"), default="forward")
    p.add_argument("--hops", type=int, default=3)
    p.add_argument("--degree-cap", type=int, default=1000)
    p.add_argument("--labels", type=Path)
    p.add_argument("--max-path-len", type=int, default=5)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="extract, analyze and trace as configured in a TOML file")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, help="override [output] dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        if args.command == "extract":
            opts = ExtractOptions(args.traces, args.meta, args.strict, args.skip_gas_limit_21000,
                                  parse_block_ranges(args.skip_blocks), args.jobs, args.dump_taint)
            return cmd_extract(opts, args.out)
        if args.command == "analyze":
            return cmd_analyze(args.facts, AnalyzeOptions(args.rules, args.jobs), args.out)
        if args.command == "trace":
            opts = TraceOptions(args.provider, args.direction, args.hops, args.degree_cap, args.labels,
                                args.max_path_len, args.workers, args.retries)
            return cmd_trace(args.findings, opts, args.out)
        return cmd_run(RunConfig.load(args.config), args.out)
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except HorusError as exc:
        log.error("%s", exc)
        return EXIT_PROCESSING


if __name__ == "__main__":
    sys.exit(main())
