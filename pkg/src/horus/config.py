"""Pipeline configuration: one dataclass per stage plus the TOML loader."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError


def parse_block_ranges(text) -> tuple:
    """``"A..B,C"`` (or a list of such items) -> sorted disjoint inclusive ranges."""
    if not text:
        return ()
    items = text.split(",") if isinstance(text, str) else [str(x) for x in text]
    ranges = []
    for item in items:
        item = item.strip()
        if not item:
            continue
        lo, sep, hi = item.partition("..")
        try:
            a, b = int(lo), int(hi) if sep else int(lo)
        except ValueError:
            raise ValidationError(f"bad block range {item!r}; expected A..B") from None
        if a > b:
            raise ValidationError(f"bad block range {item!r}: start after end")
        ranges.append((a, b))
    ranges.sort()
    for (a1, b1), (a2, b2) in zip(ranges, ranges[1:]):
        if a2 <= b1:
            raise ValidationError(f"block ranges {a1}..{b1} and {a2}..{b2} overlap")
    return tuple(ranges)


def in_ranges(block: int, ranges) -> bool:
    return any(a <= block <= b for a, b in ranges)


@dataclass(frozen=True)
class ExtractOptions:
    traces: Path
    meta: Path
    strict: bool = False
    skip_gas_limit_21000: bool = False
    skip_blocks: tuple = ()
    jobs: int = 1
    dump_taint: bool = False

    def validate(self) -> None:
        if not Path(self.traces).is_dir():
            raise ValidationError(f"trace directory {self.traces} does not exist")
        if not Path(self.meta).is_file():
            raise ValidationError(f"metadata file {self.meta} does not exist")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")


@dataclass(frozen=True)
class AnalyzeOptions:
    rules: str = "all"
    jobs: int = 1


@dataclass(frozen=True)
class TraceOptions:
    provider: str
    direction: str = "forward"
    hops: int = 3
    degree_cap: int = 1000
    labels: Optional[Path] = None
    max_path_len: int = 5
    workers: int = 4
    retries: int = 3


@dataclass(frozen=True)
class RunConfig:
    extract: ExtractOptions
    analyze: AnalyzeOptions
    trace: Optional[TraceOptions]
    output: Path
    base_dir: Path = field(default=Path("."))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"config file {path} does not exist") from None
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
        return cls.from_dict(doc, path.resolve().parent)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path) -> "RunConfig":
        def rel(p):
            p = Path(p)
            return p if p.is_absolute() else base_dir / p

        unknown = set(doc) - {"extract", "analyze", "trace", "output"}
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        ex = dict(doc.get("extract", {}))
        if "traces" not in ex or "meta" not in ex:
            raise ValidationError("[extract] needs 'traces' and 'meta'")
        try:
            extract = ExtractOptions(
                traces=rel(ex.pop("traces")),
                meta=rel(ex.pop("meta")),
                skip_blocks=parse_block_ranges(ex.pop("skip_blocks", "")),
                **ex,
            )
            analyze = AnalyzeOptions(**doc.get("analyze", {}))
            trace = None
            if "trace" in doc:
                tr = dict(doc["trace"])
                if "labels" in tr:
                    tr["labels"] = rel(tr["labels"])
                provider = tr.pop("provider", "")
                kind, _, target = provider.partition(":")
                if kind == "fixture":
                    provider = f"fixture:{rel(target)}"
                trace = TraceOptions(provider=provider, **tr)
        except TypeError as exc:
            raise ValidationError(f"bad config key: {exc}") from None
        output = rel(doc.get("output", {}).get("dir", "out"))
        return cls(extract, analyze, trace, output, base_dir)
