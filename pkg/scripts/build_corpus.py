"""Write the fixture corpus, provider fixture, labels and run config to a directory.

    python scripts/build_corpus.py OUT_DIR
    horus run --config OUT_DIR/horus.toml
"""

import argparse
from pathlib import Path

from horus.fixtures.corpus import build_corpus, write_corpus


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("out", type=Path)
    args = parser.parse_args()
    write_corpus(args.out)
    cases = build_corpus()
    print(f"wrote {len(cases)} cases ({sum(len(c.txs) for c in cases)} transactions) to {args.out}")


if __name__ == "__main__":
    main()
