"""Answer scoring and aggregate reports.

Three built-in match rules keyed by the query's answer_type: normalized
exact match for text, relaxed numeric accuracy (relative tolerance, default
5%) for numeric, and interval containment for numeric_range. An external
equivalence scorer can replace the text rule through a line-JSON subprocess
protocol. Aggregates come out overall, per split tag, and per gold-rank
stratum in the retrieval results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
import shlex
import subprocess
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .answers import normalize_answer
from .errors import EvalError
from .kb import Query
from .pipeline import PipelineTrace
from .retrieval import RetrievalResult, gold_rank, recall_at_k

DEFAULT_TOLERANCE = 0.05
DEFAULT_RECALL_KS = (1, 2, 5, 10)
STRATUM_MODES = ("disjoint", "cumulative")
DISJOINT_STRATA = ("1", "2", "3-5", ">5")
CUMULATIVE_STRATA = ("<=1", "<=2", "<=5", ">5")

# Thousands-grouped form first so "1,234.5" is not read as "1".
_NUMBER = re.compile(
    r"[-+]?\d{1,3}(?:,\d{3})+(?:\.\d+)?|[-+]?(?:\d+\.\d+|\.\d+|\d+)(?:[eE][-+]?\d+)?"
)


def first_number(text: str) -> float | None:
    """The first numeric token in text, thousands separators stripped."""
    m = _NUMBER.search(text)
    if m is None:
        return None
    try:
        return float(m.group(0).replace(",", ""))
    except ValueError:
        return None


@dataclass(frozen=True)
class MatchVerdict:
    query_id: str
    correct: bool
    rule: str
    detail: str = ""

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id, "correct": self.correct,
            "rule": self.rule, "detail": self.detail,
        }


def match_answer(pred: str, query: Query, tolerance: float = DEFAULT_TOLERANCE) -> MatchVerdict:
    """Verdict for one prediction against a query's gold answers.

    Numeric comparison uses |pred - gold| <= tolerance * |gold| directly so
    the boundary case is exact; a gold of zero accepts only an exact zero.
    """
    if tolerance < 0:
        raise ValueError(f"tolerance must be non-negative, got {tolerance}")
    qid = query.query_id
    if query.answer_type == "numeric":
        value = first_number(pred)
        if value is None:
            return MatchVerdict(qid, False, "relaxed_numeric", "parse_fail")
        best_rel: float | None = None
        correct = False
        for alias in query.gold_answers:
            gold = first_number(alias)
            if gold is None:
                continue
            if gold == 0.0:
                ok = value == 0.0
                rel = 0.0 if ok else float("inf")
            else:
                ok = abs(value - gold) <= tolerance * abs(gold)
                rel = abs(value - gold) / abs(gold)
            correct = correct or ok
            if best_rel is None or rel < best_rel:
                best_rel = rel
        if best_rel is None:
            return MatchVerdict(qid, False, "relaxed_numeric", "parse_fail")
        return MatchVerdict(qid, correct, "relaxed_numeric", f"{best_rel:.6g}")
    if query.answer_type == "numeric_range":
        value = first_number(pred)
        if value is None:
            return MatchVerdict(qid, False, "range", "parse_fail")
        lo, hi = query.gold_range()
        return MatchVerdict(qid, lo <= value <= hi, "range", f"value={value:.6g}")
    norm = normalize_answer(pred)
    correct = any(norm == normalize_answer(alias) for alias in query.gold_answers)
    return MatchVerdict(qid, correct, "exact", norm)


class PluginScorer:
    """External answer-equivalence scorer spoken to over a subprocess.

    Protocol: one {"pred", "golds"} JSON object per stdin line, one
    {"correct": bool} per stdout line, same order and count.
    """

    def __init__(self, command: str | Sequence[str]):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise ValueError("plugin command is empty")

    def score(self, pairs: Sequence[tuple[str, Sequence[str]]]) -> list[bool]:
        if not pairs:
            return []
        payload = "".join(
            json.dumps({"pred": pred, "golds": list(golds)}, ensure_ascii=False) + "\n"
            for pred, golds in pairs
        )
        try:
            proc = subprocess.run(
                self.argv, input=payload, capture_output=True, text=True, check=False,
            )
        except OSError as exc:
            raise EvalError(f"cannot run equivalence plugin {self.argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise EvalError(
                f"equivalence plugin exited {proc.returncode}: {proc.stderr[:200]}"
            )
        lines = [line for line in proc.stdout.splitlines() if line.strip()]
        if len(lines) != len(pairs):
            raise EvalError(
                f"equivalence plugin returned {len(lines)} verdicts for {len(pairs)} inputs"
            )
        verdicts: list[bool] = []
        for i, line in enumerate(lines, start=1):
            try:
                obj = json.loads(line)
                verdicts.append(bool(obj["correct"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise EvalError(f"equivalence plugin output line {i} malformed: {exc}") from exc
        return verdicts


@dataclass(frozen=True)
class MetricReport:
    recall: dict[int, float]
    accuracy_overall: float
    accuracy_by_split: dict[str, float]
    accuracy_by_stratum: dict[str, tuple[float, int]]
    stratum_mode: str
    total: int
    tolerance: float
    query_digest: str

    def to_json_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in self.recall.items()},
            "accuracy_overall": self.accuracy_overall,
            "accuracy_by_split": dict(self.accuracy_by_split),
            "accuracy_by_stratum": {
                s: {"fraction": f, "count": n}
                for s, (f, n) in self.accuracy_by_stratum.items()
            },
            "stratum_mode": self.stratum_mode,
            "total": self.total,
            "tolerance": self.tolerance,
            "query_digest": self.query_digest,
        }


@dataclass(frozen=True)
class ScoredRun:
    report: MetricReport
    verdicts: tuple[MatchVerdict, ...]
    memberships: dict[str, tuple[str, ...]]


def strata_for_rank(rank: int | None, mode: str = "disjoint") -> tuple[str, ...]:
    """Stratum bucket(s) for a 1-based gold rank; None means not retrieved.

    Disjoint buckets are {1}, {2}, {3-5}, {>5 or absent}; cumulative buckets
    overlap (rank 1 is in <=1, <=2 and <=5).
    """
    if mode == "disjoint":
        if rank == 1:
            return ("1",)
        if rank == 2:
            return ("2",)
        if rank is not None and 3 <= rank <= 5:
            return ("3-5",)
        return (">5",)
    if mode == "cumulative":
        if rank is None or rank > 5:
            return (">5",)
        buckets = []
        if rank <= 1:
            buckets.append("<=1")
        if rank <= 2:
            buckets.append("<=2")
        buckets.append("<=5")
        return tuple(buckets)
    raise ValueError(f"stratum_mode must be one of {STRATUM_MODES}, got {mode!r}")


def aggregate_accuracy(
    correct_by_qid: Mapping[str, bool],
    memberships: Mapping[str, Sequence[str]],
    stratum_order: Sequence[str],
) -> tuple[float, dict[str, tuple[float, int]]]:
    """Overall fraction plus per-stratum (fraction, count).

    Overall is correct/total over all queries; per-stratum fractions are
    computed over the queries belonging to each bucket. With disjoint
    memberships the count-weighted stratum mean equals the overall fraction.
    """
    if not correct_by_qid:
        raise EvalError("no verdicts to aggregate")
    total = len(correct_by_qid)
    overall = sum(1 for ok in correct_by_qid.values() if ok) / total
    counts: dict[str, int] = defaultdict(int)
    hits: dict[str, int] = defaultdict(int)
    for qid, ok in correct_by_qid.items():
        for bucket in memberships.get(qid, ()):
            counts[bucket] += 1
            if ok:
                hits[bucket] += 1
    by_stratum: dict[str, tuple[float, int]] = {}
    for bucket in stratum_order:
        n = counts.get(bucket, 0)
        if n:
            by_stratum[bucket] = (hits[bucket] / n, n)
    return overall, by_stratum


def query_set_digest(query_ids: Sequence[str]) -> str:
    joined = "\n".join(sorted(query_ids))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def score_run(
    traces: Sequence[PipelineTrace],
    queries: Sequence[Query],
    results: Sequence[RetrievalResult],
    url_of,
    ks: Sequence[int] = DEFAULT_RECALL_KS,
    tolerance: float = DEFAULT_TOLERANCE,
    dedup: bool = True,
    stratum_mode: str = "disjoint",
    plugin: PluginScorer | None = None,
) -> ScoredRun:
    """Score one run end to end: recall at each k, answer verdicts on
    y_final, and accuracies overall / by split / by gold-rank stratum.

    Failed traces score as incorrect with their empty prediction. When a
    plugin is given it replaces the text rule only; numeric rules are
    arithmetic and stay built in.
    """
    if not queries:
        raise EvalError("no queries to score")
    trace_by_qid = {t.query_id: t for t in traces}
    result_by_qid = {r.query_id: r for r in results}
    missing = [q.query_id for q in queries if q.query_id not in trace_by_qid]
    if missing:
        raise EvalError(f"missing trace for {len(missing)} queries, first: {missing[0]!r}")
    missing = [q.query_id for q in queries if q.query_id not in result_by_qid]
    if missing:
        raise EvalError(
            f"missing retrieval result for {len(missing)} queries, first: {missing[0]!r}"
        )

    recall = {int(k): recall_at_k(results, queries, int(k), url_of, dedup=dedup) for k in ks}

    plugin_queue: list[tuple[int, str, Query]] = []
    verdicts: list[MatchVerdict | None] = [None] * len(queries)
    for i, query in enumerate(queries):
        pred = trace_by_qid[query.query_id].y_final
        if plugin is not None and query.answer_type == "text":
            plugin_queue.append((i, pred, query))
        else:
            verdicts[i] = match_answer(pred, query, tolerance=tolerance)
    if plugin_queue:
        outcomes = plugin.score([(pred, q.gold_answers) for _, pred, q in plugin_queue])
        for (i, _pred, query), ok in zip(plugin_queue, outcomes):
            verdicts[i] = MatchVerdict(query.query_id, ok, "plugin", "")
    final_verdicts = tuple(v for v in verdicts if v is not None)

    order = DISJOINT_STRATA if stratum_mode == "disjoint" else CUMULATIVE_STRATA
    memberships: dict[str, tuple[str, ...]] = {}
    for query in queries:
        rank = gold_rank(
            result_by_qid[query.query_id], query.gold_entry_url or "", url_of, dedup=dedup,
        )
        memberships[query.query_id] = strata_for_rank(rank, stratum_mode)

    correct_by_qid = {v.query_id: v.correct for v in final_verdicts}
    overall, by_stratum = aggregate_accuracy(correct_by_qid, memberships, order)

    split_counts: dict[str, int] = defaultdict(int)
    split_hits: dict[str, int] = defaultdict(int)
    for query, verdict in zip(queries, final_verdicts):
        split_counts[query.split_tag] += 1
        if verdict.correct:
            split_hits[query.split_tag] += 1
    by_split = {tag: split_hits[tag] / n for tag, n in sorted(split_counts.items())}

    report = MetricReport(
        recall=recall,
        accuracy_overall=overall,
        accuracy_by_split=by_split,
        accuracy_by_stratum=by_stratum,
        stratum_mode=stratum_mode,
        total=len(queries),
        tolerance=tolerance,
        query_digest=query_set_digest([q.query_id for q in queries]),
    )
    return ScoredRun(report=report, verdicts=final_verdicts, memberships=memberships)


@dataclass(frozen=True)
class DeltaRow:
    metric: str
    value_a: float | None
    value_b: float | None

    @property
    def delta(self) -> float | None:
        if self.value_a is None or self.value_b is None:
            return None
        return self.value_b - self.value_a


def compare_runs(report_a: MetricReport, report_b: MetricReport) -> list[DeltaRow]:
    """Per-metric differences between two runs over the same query set."""
    if report_a.total != report_b.total or report_a.query_digest != report_b.query_digest:
        raise EvalError(
            "cannot compare runs over different query universes "
            f"({report_a.total} vs {report_b.total} queries)"
        )
    rows = [DeltaRow("accuracy_overall", report_a.accuracy_overall, report_b.accuracy_overall)]
    for k in sorted(set(report_a.recall) | set(report_b.recall)):
        rows.append(DeltaRow(f"recall@{k}", report_a.recall.get(k), report_b.recall.get(k)))
    for tag in sorted(set(report_a.accuracy_by_split) | set(report_b.accuracy_by_split)):
        rows.append(
            DeltaRow(
                f"accuracy_split:{tag}",
                report_a.accuracy_by_split.get(tag),
                report_b.accuracy_by_split.get(tag),
            )
        )
    strata = list(report_a.accuracy_by_stratum) + [
        s for s in report_b.accuracy_by_stratum if s not in report_a.accuracy_by_stratum
    ]
    for s in strata:
        a = report_a.accuracy_by_stratum.get(s)
        b = report_b.accuracy_by_stratum.get(s)
        rows.append(
            DeltaRow(
                f"accuracy_stratum:{s}",
                a[0] if a else None,
                b[0] if b else None,
            )
        )
    return rows


# -- file formats ---------------------------------------------------------


def write_report_json(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json_dict(), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def read_report_json(path: str | Path) -> MetricReport:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
        return MetricReport(
            recall={int(k): v for k, v in raw["recall"].items()},
            accuracy_overall=raw["accuracy_overall"],
            accuracy_by_split=dict(raw["accuracy_by_split"]),
            accuracy_by_stratum={
                s: (cell["fraction"], cell["count"])
                for s, cell in raw["accuracy_by_stratum"].items()
            },
            stratum_mode=raw["stratum_mode"],
            total=raw["total"],
            tolerance=raw["tolerance"],
            query_digest=raw["query_digest"],
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise EvalError(f"cannot load report {p}: {exc}") from exc


def _pct(fraction: float | None) -> str:
    return "" if fraction is None else f"{100.0 * fraction:.1f}"


def write_report_csv(
    scored: ScoredRun, queries: Sequence[Query], path: str | Path,
) -> None:
    """Human-oriented table: accuracy per stratum and split (percent, one
    decimal) plus recall rows. Percent cells are blank for empty cells."""
    split_by_qid = {q.query_id: q.split_tag for q in queries}
    splits = sorted({q.split_tag for q in queries})
    order = DISJOINT_STRATA if scored.report.stratum_mode == "disjoint" else CUMULATIVE_STRATA
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "stratum", "split", "count", "value_pct"])
        for k, fraction in scored.report.recall.items():
            writer.writerow([f"recall@{k}", "", "all", scored.report.total, _pct(fraction)])
        for stratum in list(order) + ["all"]:
            for split in splits + ["all"]:
                hits = 0
                count = 0
                for verdict in scored.verdicts:
                    qid = verdict.query_id
                    if stratum != "all" and stratum not in scored.memberships.get(qid, ()):
                        continue
                    if split != "all" and split_by_qid.get(qid) != split:
                        continue
                    count += 1
                    hits += int(verdict.correct)
                fraction = hits / count if count else None
                writer.writerow(["accuracy", stratum, split, count, _pct(fraction)])


def write_verdicts(verdicts: Sequence[MatchVerdict], path: str | Path) -> int:
    with Path(path).open("w", encoding="utf-8") as fh:
        for verdict in verdicts:
            fh.write(json.dumps(verdict.to_json_dict(), ensure_ascii=False))
            fh.write("\n")
    return len(verdicts)


def write_deltas_csv(rows: Sequence[DeltaRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "run_a_pct", "run_b_pct", "delta_pct"])
        for row in rows:
            delta = row.delta
            writer.writerow(
                [row.metric, _pct(row.value_a), _pct(row.value_b),
                 "" if delta is None else f"{100.0 * delta:+.1f}"]
            )
