"""Knowledge-base and query-set ingestion.

File formats:
  entries.jsonl    one entry per line:
                   {"schema_version", "entry_id", "url", "title", "content",
                    "image_refs", "embedding_row"}
  queries.jsonl    one query per line:
                   {"query_id", "question", "image_ref", "gold_answers",
                    "gold_entry_url", "split_tag", "answer_type",
                    "query_embedding_row"}
  embeddings.manifest.json   {"dim", "count", "normalized", "dtype": "f32le"}
  embeddings.bin             raw little-endian float32, row-major, count*dim values

Loaded handles are immutable after ingestion and safe for concurrent readers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestError

SCHEMA_VERSION = 1

SPLIT_TAGS = ("unseen_q", "unseen_e", "other")
ANSWER_TYPES = ("text", "numeric", "numeric_range")

NORM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class KnowledgeEntry:
    """One knowledge-base record: an article plus its image references."""

    entry_id: str
    url: str
    title: str
    content: str
    image_refs: tuple[str, ...] = ()
    embedding_row: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "entry_id": self.entry_id,
            "url": self.url,
            "title": self.title,
            "content": self.content,
            "image_refs": list(self.image_refs),
            "embedding_row": self.embedding_row,
        }


@dataclass(frozen=True)
class Query:
    """One VQA instance: an image-question pair with its gold answers."""

    query_id: str
    question: str
    image_ref: str
    gold_answers: tuple[str, ...]
    gold_entry_url: str | None = None
    split_tag: str = "other"
    answer_type: str = "text"
    query_embedding_row: int | None = None

    def gold_range(self) -> tuple[float, float]:
        """Parsed (lo, hi) bounds of a numeric_range gold answer."""
        lo, hi = _parse_range(self.gold_answers[0])
        return lo, hi

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "question": self.question,
            "image_ref": self.image_ref,
            "gold_answers": list(self.gold_answers),
            "gold_entry_url": self.gold_entry_url,
            "split_tag": self.split_tag,
            "answer_type": self.answer_type,
            "query_embedding_row": self.query_embedding_row,
        }


@dataclass
class EmbeddingMatrix:
    """Row-major float32 matrix of L2-normalized embedding vectors."""

    dim: int
    count: int
    data: np.ndarray
    normalized: bool


@dataclass
class KnowledgeBase:
    """Validated entry set plus the manifest of its embedding matrix."""

    entries: list[KnowledgeEntry]
    manifest: dict
    by_id: dict[str, KnowledgeEntry] = field(default_factory=dict)
    embeddings: EmbeddingMatrix | None = None

    def __post_init__(self) -> None:
        if not self.by_id:
            self.by_id = {e.entry_id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def entry_by_url(self, url: str) -> KnowledgeEntry | None:
        """First entry whose url matches byte-exactly."""
        for entry in self.entries:
            if entry.url == url:
                return entry
        return None

    def url_of(self, entry_id: str) -> str:
        return self.by_id[entry_id].url

    def attach_embeddings(self, matrix: EmbeddingMatrix) -> None:
        if matrix.count != int(self.manifest["count"]) or matrix.dim != int(self.manifest["dim"]):
            raise IngestError(
                f"embedding matrix {matrix.count}x{matrix.dim} does not match manifest "
                f"{self.manifest['count']}x{self.manifest['dim']}"
            )
        self.embeddings = matrix


def _parse_range(text: str) -> tuple[float, float]:
    parts = text.split("..")
    if len(parts) != 2:
        raise IngestError(f"numeric_range gold answer must look like 'lo..hi', got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise IngestError(f"numeric_range bounds do not parse as numbers: {text!r}") from exc
    if lo > hi:
        raise IngestError(f"numeric_range has lo > hi: {text!r}")
    return lo, hi


def _read_jsonl(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise IngestError(f"file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc


def load_manifest(manifest_path: str | Path) -> dict:
    path = Path(manifest_path)
    if not path.exists():
        raise IngestError(f"embedding manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: malformed manifest JSON: {exc}") from exc
    for key in ("dim", "count", "normalized"):
        if key not in manifest:
            raise IngestError(f"{path}: manifest missing field {key!r}")
    if manifest.get("dtype", "f32le") != "f32le":
        raise IngestError(f"{path}: unsupported dtype {manifest['dtype']!r} (expected 'f32le')")
    if int(manifest["dim"]) <= 0:
        raise IngestError(f"{path}: dim must be positive")
    if int(manifest["count"]) < 0:
        raise IngestError(f"{path}: count must be non-negative")
    return manifest


def _entry_from_dict(obj: dict, path: Path, lineno: int) -> KnowledgeEntry:
    version = obj.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise IngestError(f"{path}: line {lineno}: unsupported schema_version {version!r}")
    try:
        entry_id = obj["entry_id"]
        url = obj["url"]
    except KeyError as exc:
        raise IngestError(f"{path}: line {lineno}: entry missing field {exc.args[0]!r}") from exc
    if not isinstance(entry_id, str) or not entry_id:
        raise IngestError(f"{path}: line {lineno}: entry_id must be a non-empty string")
    if not isinstance(url, str) or not url:
        raise IngestError(f"{path}: line {lineno}: url must be non-empty (entry {entry_id!r})")
    embedding_row = obj.get("embedding_row")
    if embedding_row is not None:
        if not isinstance(embedding_row, int) or embedding_row < 0:
            raise IngestError(
                f"{path}: line {lineno}: embedding_row must be a non-negative integer "
                f"(entry {entry_id!r})"
            )
    return KnowledgeEntry(
        entry_id=entry_id,
        url=url,
        title=obj.get("title", ""),
        content=obj.get("content", ""),
        image_refs=tuple(obj.get("image_refs", ())),
        embedding_row=embedding_row,
    )


def ingest_kb(entries_path: str | Path, manifest_path: str | Path) -> KnowledgeBase:
    """Load and validate a KB: entries from JSONL, embedding bounds from the manifest.

    Duplicate entry_ids and out-of-range embedding rows are rejected with the
    offending line identified.
    """
    manifest = load_manifest(manifest_path)
    count = int(manifest["count"])
    entries: list[KnowledgeEntry] = []
    seen: dict[str, int] = {}
    path = Path(entries_path)
    for lineno, obj in _read_jsonl(path):
        entry = _entry_from_dict(obj, path, lineno)
        if entry.entry_id in seen:
            raise IngestError(
                f"{path}: line {lineno}: duplicate entry_id {entry.entry_id!r} "
                f"(first seen on line {seen[entry.entry_id]})"
            )
        seen[entry.entry_id] = lineno
        if entry.embedding_row is not None and entry.embedding_row >= count:
            raise IngestError(
                f"{path}: line {lineno}: embedding_row {entry.embedding_row} out of range "
                f"for manifest count {count} (entry {entry.entry_id!r})"
            )
        entries.append(entry)
    return KnowledgeBase(entries=entries, manifest=manifest)


def _query_from_dict(obj: dict, path: Path, lineno: int) -> Query:
    try:
        query_id = obj["query_id"]
        question = obj["question"]
    except KeyError as exc:
        raise IngestError(f"{path}: line {lineno}: query missing field {exc.args[0]!r}") from exc
    gold_answers = obj.get("gold_answers", [])
    if not gold_answers:
        raise IngestError(f"{path}: line {lineno}: gold_answers is empty (query {query_id!r})")
    split_tag = obj.get("split_tag", "other")
    if split_tag not in SPLIT_TAGS:
        raise IngestError(f"{path}: line {lineno}: unknown split_tag {split_tag!r}")
    answer_type = obj.get("answer_type", "text")
    if answer_type not in ANSWER_TYPES:
        raise IngestError(f"{path}: line {lineno}: unknown answer_type {answer_type!r}")
    query = Query(
        query_id=query_id,
        question=question,
        image_ref=obj.get("image_ref", ""),
        gold_answers=tuple(str(a) for a in gold_answers),
        gold_entry_url=obj.get("gold_entry_url"),
        split_tag=split_tag,
        answer_type=answer_type,
        query_embedding_row=obj.get("query_embedding_row"),
    )
    if answer_type == "numeric_range":
        try:
            query.gold_range()
        except IngestError as exc:
            raise IngestError(f"{path}: line {lineno}: {exc} (query {query_id!r})") from exc
    return query


def ingest_queries(path: str | Path) -> list[Query]:
    """Load and validate the query set, preserving file order."""
    queries: list[Query] = []
    seen: dict[str, int] = {}
    p = Path(path)
    for lineno, obj in _read_jsonl(p):
        query = _query_from_dict(obj, p, lineno)
        if query.query_id in seen:
            raise IngestError(
                f"{p}: line {lineno}: duplicate query_id {query.query_id!r} "
                f"(first seen on line {seen[query.query_id]})"
            )
        seen[query.query_id] = lineno
        queries.append(query)
    return queries


def load_embeddings(manifest_path: str | Path, data_path: str | Path) -> EmbeddingMatrix:
    """Load the raw float32 matrix described by the manifest.

    Rows are L2-normalized in place when the manifest says they are not
    already; zero-norm and non-finite rows are hard errors.
    """
    manifest = load_manifest(manifest_path)
    dim, count = int(manifest["dim"]), int(manifest["count"])
    path = Path(data_path)
    if not path.exists():
        raise IngestError(f"embedding data file not found: {path}")
    expected_bytes = count * dim * 4
    actual_bytes = path.stat().st_size
    if actual_bytes != expected_bytes:
        raise IngestError(
            f"{path}: size mismatch: expected {expected_bytes} bytes "
            f"({count}x{dim} float32), found {actual_bytes}"
        )
    data = np.fromfile(path, dtype="<f4").reshape(count, dim)
    bad = ~np.isfinite(data)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise IngestError(f"{path}: non-finite value in row {row}")
    if not manifest["normalized"]:
        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        zero = norms == 0.0
        if zero.any():
            row = int(np.argmax(zero))
            raise IngestError(f"{path}: zero-norm row {row} cannot be normalized")
        data = (data.astype(np.float64) / norms[:, None]).astype(np.float32)
    else:
        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0) > NORM_TOLERANCE
        if count and off.any():
            row = int(np.argmax(off))
            raise IngestError(
                f"{path}: manifest claims normalized but row {row} has norm {norms[row]:.6f}"
            )
    return EmbeddingMatrix(dim=dim, count=count, data=data, normalized=True)


def export_kb(kb: KnowledgeBase, entries_path: str | Path) -> int:
    """Write the KB back to entries JSONL; returns the number of lines written."""
    path = Path(entries_path)
    with path.open("w", encoding="utf-8") as fh:
        for entry in kb.entries:
            fh.write(json.dumps(entry.to_json_dict(), ensure_ascii=False) + "\n")
    return len(kb.entries)


def export_queries(queries: list[Query], path: str | Path) -> int:
    p = Path(path)
    with p.open("w", encoding="utf-8") as fh:
        for query in queries:
            fh.write(json.dumps(query.to_json_dict(), ensure_ascii=False) + "\n")
    return len(queries)
