import json
import shutil

import pytest

from horus.cli import main
from horus.facts import RELATIONS
from horus.fixtures.corpus import build_corpus, case_by_name, merged, write_case

RULE_NAMES = {"Reentrancy", "ParityWalletHack1", "ParityWalletHack2", "IntegerOverflow", "UnhandledException", "ShortAddress"}


def manifest(facts_dir):
    return json.loads((facts_dir / "manifest.json").read_text())


def three_trace_dir(tmp_path):
    """Three single-transaction cases in one directory, the last one with a 21000 gas limit."""
    cases = [case_by_name(n) for n in ("reentrancy_dao", "overflow_underflow_transfer", "unhandled_revert")]
    d = write_case(merged(cases), tmp_path / "in")
    lines = (d / "meta.jsonl").read_text().splitlines()
    assert len(lines) == 3
    last = json.loads(lines[-1])
    last["gas_limit"] = 21000
    lines[-1] = json.dumps(last, sort_keys=True)
    (d / "meta.jsonl").write_text("\n".join(lines) + "\n")
    return d


def extract(src, out, *extra):
    return main(["--quiet", "extract", "--traces", str(src / "traces"), "--meta", str(src / "meta.jsonl"),
                 "--out", str(out), *extra])


def test_extract_filters_gas_limit_21000(tmp_path):
    src = three_trace_dir(tmp_path)
    assert extract(src, tmp_path / "facts", "--skip-gas-limit-21000") == 0
    m = manifest(tmp_path / "facts")
    assert (m["processed"], m["filtered"], m["failed"]) == (2, 1, 0)
    assert extract(src, tmp_path / "all") == 0
    assert manifest(tmp_path / "all")["processed"] == 3


def test_extract_skip_blocks(tmp_path):
    src = three_trace_dir(tmp_path)
    blocks = sorted({json.loads(line)["block_number"] for line in (src / "meta.jsonl").read_text().splitlines()})
    assert extract(src, tmp_path / "facts", "--skip-blocks", f"{blocks[0]}..{blocks[0]}") == 0
    assert manifest(tmp_path / "facts")["filtered"] >= 1
    assert extract(src, tmp_path / "bad", "--skip-blocks", "9..3") == 1


def test_extract_empty_directory(tmp_path):
    (tmp_path / "traces").mkdir()
    (tmp_path / "meta.jsonl").write_text("")
    assert extract(tmp_path, tmp_path / "facts") == 0
    assert manifest(tmp_path / "facts")["processed"] == 0
    assert all((tmp_path / "facts" / f"{r}.facts").exists() for r in RELATIONS)


def _with_malformed(tmp_path):
    src = three_trace_dir(tmp_path)
    victim = sorted((src / "traces").iterdir())[0]
    victim.write_text('{"structLogs": [{"pc": 0, "op": "PUSH1"')
    return src, victim


def test_strict_extract_writes_nothing(tmp_path):
    src, _ = _with_malformed(tmp_path)
    assert extract(src, tmp_path / "facts", "--strict") == 2
    assert not (tmp_path / "facts").exists() or not any((tmp_path / "facts").iterdir())


def test_lenient_extract_reports_per_file_errors(tmp_path):
    src, victim = _with_malformed(tmp_path)
    assert extract(src, tmp_path / "facts") == 2
    m = manifest(tmp_path / "facts")
    assert m["processed"] == 2 and m["failed"] == 1
    assert m["errors"][0]["file"] == victim.name


def test_missing_inputs_are_validation_errors(tmp_path):
    assert extract(tmp_path / "nowhere", tmp_path / "facts") == 1
    assert main(["extract", "--traces", str(tmp_path)]) == 1


def test_parallel_extract_matches_serial(tmp_path, corpus_dir):
    src = corpus_dir / "all"
    assert extract(src, tmp_path / "one") == 0
    assert extract(src, tmp_path / "four", "--jobs", "4") == 0
    for name in RELATIONS:
        assert (tmp_path / "one" / f"{name}.facts").read_bytes() == (tmp_path / "four" / f"{name}.facts").read_bytes()


def test_dump_taint(tmp_path):
    src = write_case(case_by_name("overflow_underflow_transfer"), tmp_path / "in")
    assert extract(src, tmp_path / "facts", "--dump-taint") == 0
    [dump] = (tmp_path / "facts" / "taint").iterdir()
    assert dump.suffix == ".taint" and dump.stat().st_size > 0


# -- analyze ------------------------------------------------------------------


def analyze(facts_dir, out, capsys, *extra):
    code = main(["--quiet", "analyze", "--facts", str(facts_dir), "--out", str(out), *extra])
    return code, capsys.readouterr().out


def test_reentrancy_summary_row(tmp_path, capsys):
    src = write_case(case_by_name("reentrancy_dao"), tmp_path / "in")
    extract(src, tmp_path / "facts")
    code, text = analyze(tmp_path / "facts", tmp_path / "out", capsys)
    assert code == 0
    assert "Reentrancy: 1 contract, 1 transaction" in text.splitlines()
    doc = json.loads((tmp_path / "out" / "findings.json").read_text())
    assert doc["summary"]["rules"]["Reentrancy"] == {"contracts": 1, "transactions": 1}
    assert (tmp_path / "out" / "findings.csv").read_text().count("\n") == 2


def test_parity_pair_counts_two_transactions(tmp_path, capsys):
    src = write_case(case_by_name("parity1_same_block"), tmp_path / "in")
    extract(src, tmp_path / "facts")
    _, text = analyze(tmp_path / "facts", tmp_path / "out", capsys)
    assert "ParityWalletHack1: 1 contract, 2 transactions" in text.splitlines()


def test_empty_facts_give_zero_summary(tmp_path, capsys):
    (tmp_path / "traces").mkdir()
    (tmp_path / "meta.jsonl").write_text("")
    extract(tmp_path, tmp_path / "facts")
    code, text = analyze(tmp_path / "facts", tmp_path / "out", capsys)
    assert code == 0
    rows = [line for line in text.splitlines() if ":" in line]
    assert len(rows) == len(RULE_NAMES) + 1
    assert all(" 0 contracts, 0 transactions" in line for line in rows)


def test_missing_relation_is_named(tmp_path, capsys):
    src = write_case(case_by_name("reentrancy_dao"), tmp_path / "in")
    extract(src, tmp_path / "facts")
    (tmp_path / "facts" / "call.facts").unlink()
    assert main(["analyze", "--facts", str(tmp_path / "facts"), "--out", str(tmp_path / "out")]) == 1
    assert "call.facts" in capsys.readouterr().err


def test_unknown_rule_is_rejected(tmp_path, capsys):
    (tmp_path / "traces").mkdir()
    (tmp_path / "meta.jsonl").write_text("")
    extract(tmp_path, tmp_path / "facts")
    code, _ = analyze(tmp_path / "facts", tmp_path / "out", capsys, "--rules", "reentrancy,nope")
    assert code == 1


def test_summary_counts_are_distinct_cardinalities(corpus_dir, tmp_path, capsys):
    extract(corpus_dir / "all", tmp_path / "facts")
    analyze(tmp_path / "facts", tmp_path / "out", capsys)
    doc = json.loads((tmp_path / "out" / "findings.json").read_text())
    for rule in RULE_NAMES:
        mine = [f for f in doc["findings"] if f["rule"] == rule]
        assert doc["summary"]["rules"][rule]["contracts"] == len({f["contract"] for f in mine})
        assert doc["summary"]["rules"][rule]["transactions"] == len({t["hash"] for f in mine for t in f["transactions"]})


# -- trace --------------------------------------------------------------------


def test_trace_with_zero_findings(tmp_path):
    (tmp_path / "f.json").write_text(json.dumps({"findings": [], "summary": {}}))
    (tmp_path / "prov").mkdir()
    code = main(["--quiet", "trace", "--findings", str(tmp_path / "f.json"), "--provider", f"fixture:{tmp_path / 'prov'}",
                 "--out", str(tmp_path / "out")])
    assert code == 0
    report = json.loads((tmp_path / "out" / "flow_report.json").read_text())
    assert report["clusters"] == [] and report["partial"] is False
    assert [p.name for p in (tmp_path / "out").iterdir()] == ["flow_report.json"]


def test_unreachable_http_provider_is_partial(corpus_dir, tmp_path, capsys):
    extract(corpus_dir / "cases" / "reentrancy_dao", tmp_path / "facts")
    analyze(tmp_path / "facts", tmp_path / "an", capsys)
    code = main(["--quiet", "trace", "--findings", str(tmp_path / "an" / "findings.json"),
                 "--provider", "http:http://127.0.0.1:9/api", "--retries", "0", "--workers", "1",
                 "--out", str(tmp_path / "out")])
    assert code == 3
    report = json.loads((tmp_path / "out" / "flow_report.json").read_text())
    assert report["partial"] is True and report["clusters"][0]["partial"] is True


def test_bad_findings_file(tmp_path):
    (tmp_path / "f.json").write_text("[1, 2]")
    code = main(["--quiet", "trace", "--findings", str(tmp_path / "f.json"), "--provider", f"fixture:{tmp_path}",
                 "--out", str(tmp_path / "out")])
    assert code == 1


# -- run ----------------------------------------------------------------------


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run_twice(tmp_path_factory):
    from horus.fixtures.corpus import write_corpus

    base = write_corpus(tmp_path_factory.mktemp("run"))
    assert main(["--quiet", "run", "--config", str(base / "horus.toml"), "--out", str(base / "one")]) == 0
    assert main(["--quiet", "run", "--config", str(base / "horus.toml"), "--out", str(base / "two")]) == 0
    return base


def test_run_is_byte_identical(run_twice):
    one, two = _tree(run_twice / "one"), _tree(run_twice / "two")
    assert one == two
    assert any(k.endswith("graph.graphml") for k in one)


def test_run_matches_manual_steps(run_twice, tmp_path, capsys):
    base = run_twice
    assert extract(base / "all", tmp_path / "facts", "--skip-gas-limit-21000") == 0
    analyze(tmp_path / "facts", tmp_path / "analysis", capsys)
    code = main(["--quiet", "trace", "--findings", str(tmp_path / "analysis" / "findings.json"),
                 "--provider", f"fixture:{base / 'provider'}", "--labels", str(base / "labels.csv"),
                 "--hops", "3", "--degree-cap", "1000", "--out", str(tmp_path / "trace")])
    assert code == 0
    assert _tree(tmp_path / "facts") == _tree(base / "one" / "facts")
    assert _tree(tmp_path / "analysis") == _tree(base / "one" / "analysis")
    assert _tree(tmp_path / "trace") == _tree(base / "one" / "trace")


def test_run_reports_every_rule_and_exchange_flow(run_twice):
    doc = json.loads((run_twice / "one" / "analysis" / "findings.json").read_text())
    assert {f["rule"] for f in doc["findings"]} == RULE_NAMES
    report = json.loads((run_twice / "one" / "trace" / "flow_report.json").read_text())
    assert report["totals"]["exchange"] == {"ETH": str(4 * 10**18), "USDT": "5000000"}


def test_run_stops_at_failing_stage(tmp_path):
    from horus.fixtures.corpus import write_corpus

    base = write_corpus(tmp_path)
    shutil.rmtree(base / "all" / "traces")
    assert main(["--quiet", "run", "--config", str(base / "horus.toml"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o" / "analysis").exists()


def test_bad_config_is_a_validation_error(tmp_path):
    (tmp_path / "c.toml").write_text("[extract]\ntraces = 3\n[bogus]\n")
    assert main(["run", "--config", str(tmp_path / "c.toml")]) == 1
    (tmp_path / "d.toml").write_text("not toml = = =")
    assert main(["run", "--config", str(tmp_path / "d.toml")]) == 1


def test_corpus_has_every_rule():
    assert {c.rule for c in build_corpus()} == RULE_NAMES
