"""Per-domain utterance manifests (JSONL) and domain pooling."""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from mdpipe.audio import SUPPORTED_RATES

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("id", "audio_path", "domain", "sample_rate_hz", "duration_s")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    domain: str
    sample_rate_hz: int
    duration_s: float
    transcript: Optional[str] = None

    def __post_init__(self):
        if self.sample_rate_hz not in SUPPORTED_RATES:
            raise ManifestError(
                f"utterance {self.id!r}: sample_rate_hz={self.sample_rate_hz} "
                f"not in allowed set {{8000, 16000}}"
            )
        if not self.duration_s > 0:
            raise ManifestError(f"utterance {self.id!r}: duration_s must be > 0, got {self.duration_s}")

    def to_json(self) -> dict:
        d = asdict(self)
        if d["transcript"] is None:
            del d["transcript"]
        return d


@dataclass(frozen=True)
class PooledDataset:
    records: tuple
    domains: frozenset

    def __len__(self):
        return len(self.records)

    def by_domain(self) -> "OrderedDict[str, list[UtteranceRecord]]":
        out: OrderedDict[str, list] = OrderedDict()
        for rec in self.records:
            out.setdefault(rec.domain, []).append(rec)
        return out


def _parse_line(line: str, lineno: int, path) -> UtteranceRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
    if not isinstance(obj, dict):
        raise ManifestError(f"{path}:{lineno}: expected a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in obj]
    if missing:
        raise ManifestError(f"{path}:{lineno}: missing keys {missing}")
    try:
        rate = obj["sample_rate_hz"]
        if isinstance(rate, bool) or not isinstance(rate, int):
            raise ManifestError(f"sample_rate_hz must be an integer, got {rate!r}")
        return UtteranceRecord(
            id=str(obj["id"]),
            audio_path=str(obj["audio_path"]),
            domain=str(obj["domain"]),
            sample_rate_hz=rate,
            duration_s=float(obj["duration_s"]),
            transcript=obj.get("transcript"),
        )
    except (ManifestError, TypeError, ValueError) as e:
        raise ManifestError(f"{path}:{lineno}: {e}") from None


def load_manifest(path) -> list[UtteranceRecord]:
    """Parse a JSONL manifest, preserving line order.

    Blank lines are skipped. Errors carry the 1-based line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = _parse_line(line, lineno, path)
            if rec.id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate id {rec.id!r} (first seen on line {seen[rec.id]})"
                )
            seen[rec.id] = lineno
            records.append(rec)
    return records


def write_manifest(path, records: Iterable[UtteranceRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def pool_domains(manifests: Mapping[str, Sequence[UtteranceRecord]]) -> PooledDataset:
    """Concatenate per-domain record lists, stamping each record with its domain.

    No balancing is applied; domain order follows the mapping's iteration order.
    """
    records = []
    owner: dict[str, str] = {}
    for domain, recs in manifests.items():
        for rec in recs:
            if rec.id in owner:
                raise ManifestError(
                    f"id collision: {rec.id!r} appears in domains {owner[rec.id]!r} and {domain!r}"
                )
            owner[rec.id] = domain
            records.append(rec if rec.domain == domain else replace(rec, domain=domain))
    return PooledDataset(tuple(records), frozenset(manifests.keys()))


def dataset_from_records(records: Sequence[UtteranceRecord]) -> PooledDataset:
    """Pool a flat record list by its own domain labels."""
    groups: OrderedDict[str, list] = OrderedDict()
    for rec in records:
        groups.setdefault(rec.domain, []).append(rec)
    return pool_domains(groups)


@dataclass(frozen=True)
class DomainStat:
    domain: str
    utterances: int
    hours: float


def domain_stats(dataset: PooledDataset) -> list[DomainStat]:
    """Per-domain utterance counts and hours, followed by a ``Total`` row."""
    rows = []
    for domain, recs in dataset.by_domain().items():
        rows.append(DomainStat(domain, len(recs), sum(r.duration_s for r in recs) / 3600.0))
    rows.append(
        DomainStat("Total", sum(r.utterances for r in rows), sum(r.hours for r in rows))
    )
    return rows


def format_domain_stats(rows: Sequence[DomainStat]) -> str:
    width = max([len("Domain")] + [len(r.domain) for r in rows])
    lines = [f"{'Domain':<{width}}  {'Utterances':>10}  {'Hours':>12}"]
    for r in rows:
        if r.domain == "Total":
            lines.append("-" * len(lines[0]))
        lines.append(f"{r.domain:<{width}}  {r.utterances:>10d}  {r.hours:>12.4f}")
    return "\n".join(lines)
