"""Swiss-Prot flat-file parsing and the paired sequence/description dataset."""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .features import AA_INDEX

log = logging.getLogger(__name__)

_SEQ_STRIP = re.compile(r"[\s\d]+")
_EVIDENCE = re.compile(r"\s*\{ECO:[^}]*\}")


class FlatFileError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class ProteinRecord:
    accession: str
    sequence: str
    organism_lineage: list[str] = field(default_factory=list)
    keywords: list[str] = field(default_factory=list)
    function_text: str = ""
    description: str = ""

    def __post_init__(self):
        if not self.description:
            self.description = build_description(self)


@dataclass
class DatasetManifest:
    n_records: int = 0
    n_parsed: int = 0
    skipped_no_sequence: int = 0
    truncated_records: list[int] = field(default_factory=list)
    rejected: dict = field(default_factory=lambda: {"too_short": 0, "too_long": 0, "nonstandard": 0})
    length_histogram: dict = field(default_factory=dict)
    source_digest: str = ""
    filter_params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def build_description(record: ProteinRecord) -> str:
    """Compose the ``Species:`` / ``Keyword:`` / ``Function:`` block, skipping empty parts."""
    parts = []
    if record.organism_lineage:
        parts.append("Species: " + "; ".join(record.organism_lineage) + ".")
    if record.keywords:
        parts.append("Keyword: " + "; ".join(record.keywords) + ".")
    if record.function_text:
        text = record.function_text
        # the section label already names the FUNCTION topic
        if text.startswith("FUNCTION:"):
            text = text[len("FUNCTION:"):].lstrip()
        parts.append("Function: " + text)
    return "\n".join(parts)


def _open_text(path) -> io.TextIOBase:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def _split_items(payload: str) -> list[str]:
    payload = _EVIDENCE.sub("", payload).strip()
    if payload.endswith("."):
        payload = payload[:-1]
    return [x.strip() for x in payload.split(";") if x.strip()]


def _clean_comments(cc_lines: list[str]) -> str:
    """Join CC lines into prose; topic markers become ``TOPIC:`` labels, the
    copyright trailer (``-----`` block) is dropped."""
    blocks: list[str] = []
    in_license = False
    for line in cc_lines:
        text = line.strip()
        if text.startswith("-----"):
            in_license = not in_license
            continue
        if in_license or not text:
            continue
        if text.startswith("-!-"):
            blocks.append(text[3:].strip())
        elif blocks:
            blocks[-1] += " " + text
        else:
            blocks.append(text)
    return _EVIDENCE.sub("", " ".join(" ".join(b.split()) for b in blocks))


def parse_swissprot_dat(
    stream: Iterable[str], manifest: DatasetManifest | None = None
) -> Iterator[ProteinRecord]:
    """Yield one ``ProteinRecord`` per ``//``-terminated entry.

    Entries without an ``SQ`` block are skipped and counted; a final entry
    missing its terminator is reported in ``manifest.truncated_records`` by the
    line number it started on.
    """
    if manifest is None:
        manifest = DatasetManifest()
    lines: list[str] = []
    start = 1
    lineno = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n\r")
        if line.startswith("//"):
            rec = _parse_entry(lines, start)
            if rec is None:
                manifest.skipped_no_sequence += 1
                log.warning("entry starting at line %d has no SQ block; skipped", start)
            else:
                manifest.n_parsed += 1
                yield rec
            lines = []
            start = lineno + 1
        elif line.strip():
            lines.append(line)
    if lines:
        manifest.truncated_records.append(start)
        log.warning("truncated final record starting at line %d (no '//' before line %d)", start, lineno + 1)


def _parse_entry(lines: list[str], start: int) -> ProteinRecord | None:
    accession = ""
    oc, kw, cc, seq = [], [], [], []
    in_seq = has_sq = False
    for line in lines:
        if in_seq:
            if line.startswith("     ") or not line[:2].strip():
                seq.append(line)
                continue
            in_seq = False
        code, payload = line[:2], line[5:] if len(line) > 5 else ""
        if code == "AC" and not accession:
            accession = payload.split(";")[0].strip()
        elif code == "OC":
            oc.append(payload.strip())
        elif code == "KW":
            kw.append(payload.strip())
        elif code == "CC":
            cc.append(payload)
        elif code == "SQ":
            in_seq = has_sq = True
    if not has_sq:
        return None
    sequence = _SEQ_STRIP.sub("", "".join(seq)).upper()
    if not sequence:
        return None
    if not accession:
        raise FlatFileError(f"entry starting at line {start} has no AC line")
    return ProteinRecord(
        accession=accession,
        sequence=sequence,
        organism_lineage=_split_items(" ".join(oc)),
        keywords=_split_items(" ".join(kw)),
        function_text=_clean_comments(cc),
    )


def read_swissprot(path, manifest: DatasetManifest | None = None) -> list[ProteinRecord]:
    """Parse a ``.dat`` (or ``.dat.gz``) file, recording its digest in ``manifest``."""
    if manifest is None:
        manifest = DatasetManifest()
    manifest.source_digest = file_digest(path)
    with _open_text(path) as fh:
        return list(parse_swissprot_dat(fh, manifest))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def rejection_reason(sequence: str, min_len: int, max_len: int) -> str | None:
    if len(sequence) < min_len:
        return "too_short"
    if len(sequence) > max_len:
        return "too_long"
    if any(c not in AA_INDEX for c in sequence):
        return "nonstandard"
    return None


def filter_records(
    records: Iterable[ProteinRecord],
    min_len: int = 10,
    max_len: int = 128,
    manifest: DatasetManifest | None = None,
) -> list[ProteinRecord]:
    """Keep records with length in ``[min_len, max_len]`` and a standard alphabet."""
    kept = []
    for rec in records:
        reason = rejection_reason(rec.sequence, min_len, max_len)
        if reason is None:
            kept.append(rec)
        elif manifest is not None:
            manifest.rejected[reason] = manifest.rejected.get(reason, 0) + 1
    if manifest is not None:
        manifest.filter_params = {"min_len": min_len, "max_len": max_len}
        manifest.n_records = len(kept)
        manifest.length_histogram = dict(sorted(Counter(len(r.sequence) for r in kept).items()))
    return kept


_FIELDS = ("accession", "sequence", "description", "organism_lineage", "keywords", "function_text")


def write_protsemantic(records: Iterable[ProteinRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({k: getattr(rec, k) for k in _FIELDS}, ensure_ascii=False))
            fh.write("\n")
            n += 1
    return n


def read_protsemantic(path) -> list[ProteinRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetFormatError(f"{path}:{lineno}: expected an object")
            missing = [k for k in _FIELDS if k not in obj]
            if missing:
                raise DatasetFormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            out.append(ProteinRecord(**{k: obj[k] for k in _FIELDS}))
    return out
