"""Time the pipeline stages over the fixture corpus and the random-store oracle check."""

import random
import tempfile
import time
from pathlib import Path

from horus.cli import main
from horus.detectors import RuleSet, detect_all, naive_eval
from horus.fixtures.corpus import write_corpus
from horus.fixtures.random_facts import random_store


def timed(label, fn):
    start = time.perf_counter()
    result = fn()
    print(f"{label:<28} {time.perf_counter() - start:7.3f}s")
    return result


def oracle_check(n=1000, seed=7):
    rules, rng, mismatches = RuleSet.parse("all"), random.Random(seed), 0
    for _ in range(n):
        store = random_store(rng)
        mismatches += sorted(detect_all(store, rules), key=repr) != sorted(naive_eval(rules, store), key=repr)
    return mismatches


with tempfile.TemporaryDirectory() as tmp:
    base = write_corpus(Path(tmp))
    cfg = str(base / "horus.toml")
    timed("horus run (corpus)", lambda: main(["--quiet", "run", "--config", cfg, "--out", str(base / "o")]))
    bad = timed("1000 random stores vs naive", oracle_check)
    print(f"oracle mismatches: {bad}")
