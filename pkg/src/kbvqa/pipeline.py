"""Pipeline variants over queries, each producing a full audit trace.

Six answering variants (param, oracle, one_stage, two_stage, mmstar, core)
plus a diagnostic probe run. The core variant runs in one of two modes:
"single" sends the whole multi-step template as one prompt, "staged" issues
four separate calls (parametric answer, joint entry selection, external
answer, reconciliation) and computes the answer-inconsistency flag from the
two intermediate answers.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .answers import bracket_spans, extract_answer, normalize_answer, parse_reference_letter
from .backend import Backend, BackendRequest, max_new_tokens_for
from .errors import BackendError, ParseError, PipelineError, PromptError
from .kb import KnowledgeBase, KnowledgeEntry, Query
from .prompts import DEFAULT_CHAR_BUDGET, PromptContext, render
from .retrieval import DEFAULT_TOP_K, RetrievalResult

CORE_MODES = ("staged", "single")


@dataclass(frozen=True)
class StageTranscript:
    stage: str
    prompt_parts: tuple[dict, ...]
    text: str
    latency_ms: float
    raw: str
    temperature: float
    max_new_tokens: int

    def to_json_dict(self) -> dict:
        return {
            "stage": self.stage,
            "prompt_parts": list(self.prompt_parts),
            "text": self.text,
            "latency_ms": self.latency_ms,
            "raw": self.raw,
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
        }


@dataclass(frozen=True)
class PipelineTrace:
    query_id: str
    variant: str
    mode: str | None = None
    y_int: str | None = None
    i_v: int | None = None
    i_t: int | None = None
    i_tv: int | None = None
    y_ext: str | None = None
    y_final: str = ""
    prki_flag: bool | None = None
    vtki_flag: bool | None = None
    context_entry_ids: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()
    failed: bool = False
    error: str | None = None
    transcripts: tuple[StageTranscript, ...] = ()

    def to_json_dict(self, include_transcripts: bool = True) -> dict:
        out = {
            "query_id": self.query_id,
            "variant": self.variant,
            "mode": self.mode,
            "y_int": self.y_int,
            "i_v": self.i_v,
            "i_t": self.i_t,
            "i_tv": self.i_tv,
            "y_ext": self.y_ext,
            "y_final": self.y_final,
            "prki_flag": self.prki_flag,
            "vtki_flag": self.vtki_flag,
            "context_entry_ids": list(self.context_entry_ids),
            "warnings": list(self.warnings),
            "failed": self.failed,
            "error": self.error,
        }
        if include_transcripts:
            out["transcripts"] = [t.to_json_dict() for t in self.transcripts]
        return out


def prki_value(y_int: str | None, y_ext: str | None) -> bool | None:
    """Answer-inconsistency flag: set only when both answers exist."""
    if y_int is None or y_ext is None:
        return None
    return normalize_answer(y_int) != normalize_answer(y_ext)


def vtki_value(i_v: int | None, i_t: int | None) -> bool | None:
    """Selection-inconsistency flag: set only when both indices exist."""
    if i_v is None or i_t is None:
        return None
    return i_v != i_t


class PipelineRunner:
    """Executes one variant per call against a knowledge base and backend.

    Per-variant methods take the query plus the ranked entries already
    resolved from retrieval hits; run_many() does that resolution and fans
    queries out over a worker pool while keeping trace order equal to input
    order. Stages within one query are strictly sequential.
    """

    def __init__(
        self,
        kb: KnowledgeBase,
        backend: Backend,
        top_k: int = DEFAULT_TOP_K,
        char_budget: int = DEFAULT_CHAR_BUDGET,
        core_mode: str = "staged",
    ):
        if core_mode not in CORE_MODES:
            raise ValueError(f"core_mode must be one of {CORE_MODES}, got {core_mode!r}")
        if not 1 <= top_k <= 5:
            raise ValueError(f"top_k must be within 1..5 for prompting, got {top_k}")
        self.kb = kb
        self.backend = backend
        self.top_k = top_k
        self.char_budget = char_budget
        self.core_mode = core_mode

    # -- plumbing ---------------------------------------------------------

    def resolve_entries(self, result: RetrievalResult) -> tuple[KnowledgeEntry, ...]:
        entries = []
        for entry_id, _score in result.hits[: self.top_k]:
            entry = self.kb.by_id.get(entry_id)
            if entry is None:
                raise PipelineError(
                    f"retrieval hit {entry_id!r} for query {result.query_id!r} is not in the KB"
                )
            entries.append(entry)
        return tuple(entries)

    def _call(
        self, variant: str, stage: str, ctx: PromptContext, query_id: str,
        warnings: list[str],
    ) -> tuple[str, StageTranscript]:
        seq = render(variant, stage, ctx)
        req = BackendRequest(
            messages=seq, query_id=query_id, stage=stage,
            max_new_tokens=max_new_tokens_for(variant),
        )
        resp = self.backend.generate(req)
        if not resp.text.strip():
            warnings.append(f"empty_response:{stage}")
        transcript = StageTranscript(
            stage=stage, prompt_parts=tuple(seq.to_json_parts()), text=resp.text,
            latency_ms=resp.latency_ms, raw=resp.raw,
            temperature=req.temperature, max_new_tokens=req.max_new_tokens,
        )
        return resp.text, transcript

    @staticmethod
    def _need_entries(variant: str, query: Query, entries: Sequence[KnowledgeEntry]) -> None:
        if not entries:
            raise PipelineError(
                f"variant {variant!r} requires at least one retrieved entry "
                f"for query {query.query_id!r}"
            )

    def _gold_entry(self, query: Query) -> KnowledgeEntry:
        if not query.gold_entry_url:
            raise PipelineError(f"query {query.query_id!r} has no gold entry URL")
        entry = self.kb.entry_by_url(query.gold_entry_url)
        if entry is None:
            raise PipelineError(
                f"gold entry URL for query {query.query_id!r} is not in the KB: "
                f"{query.gold_entry_url}"
            )
        return entry

    # -- variants ---------------------------------------------------------

    def run_param(self, query: Query) -> PipelineTrace:
        warnings: list[str] = []
        ctx = PromptContext(query=query, char_budget=self.char_budget)
        text, tr = self._call("param", "param_gen", ctx, query.query_id, warnings)
        answer = extract_answer(text)
        return PipelineTrace(
            query_id=query.query_id, variant="param", y_int=answer, y_final=answer,
            warnings=tuple(warnings), transcripts=(tr,),
        )

    def run_oracle(self, query: Query) -> PipelineTrace:
        warnings: list[str] = []
        gold = self._gold_entry(query)
        ctx = PromptContext(query=query, selected_entry=gold, char_budget=self.char_budget)
        text, tr = self._call("oracle", "oracle_gen", ctx, query.query_id, warnings)
        return PipelineTrace(
            query_id=query.query_id, variant="oracle", y_final=extract_answer(text),
            context_entry_ids=(gold.entry_id,), warnings=tuple(warnings), transcripts=(tr,),
        )

    def run_one_stage(self, query: Query, entries: Sequence[KnowledgeEntry]) -> PipelineTrace:
        self._need_entries("one_stage", query, entries)
        warnings: list[str] = []
        ctx = PromptContext(query=query, entries=tuple(entries), char_budget=self.char_budget)
        text, tr = self._call("one_stage", "one_stage_gen", ctx, query.query_id, warnings)
        return PipelineTrace(
            query_id=query.query_id, variant="one_stage", y_final=extract_answer(text),
            context_entry_ids=tuple(e.entry_id for e in entries),
            warnings=tuple(warnings), transcripts=(tr,),
        )

    def run_two_stage(self, query: Query, entries: Sequence[KnowledgeEntry]) -> PipelineTrace:
        self._need_entries("two_stage", query, entries)
        warnings: list[str] = []
        ids = tuple(e.entry_id for e in entries)
        ctx = PromptContext(query=query, entries=tuple(entries), char_budget=self.char_budget)
        rerank_text, tr1 = self._call("two_stage", "rerank", ctx, query.query_id, warnings)
        try:
            i_t = parse_reference_letter(rerank_text, len(entries))
        except ParseError as exc:
            return PipelineTrace(
                query_id=query.query_id, variant="two_stage", context_entry_ids=ids,
                warnings=tuple(warnings), failed=True, error=f"rerank: {exc}",
                transcripts=(tr1,),
            )
        gen_ctx = PromptContext(
            query=query, selected_entry=entries[i_t], char_budget=self.char_budget,
        )
        gen_text, tr2 = self._call("two_stage", "two_stage_gen", gen_ctx, query.query_id, warnings)
        return PipelineTrace(
            query_id=query.query_id, variant="two_stage", i_t=i_t,
            y_final=extract_answer(gen_text), context_entry_ids=ids,
            warnings=tuple(warnings), transcripts=(tr1, tr2),
        )

    def run_mmstar(self, query: Query, entries: Sequence[KnowledgeEntry]) -> PipelineTrace:
        self._need_entries("mmstar", query, entries)
        warnings: list[str] = []
        ctx = PromptContext(query=query, entries=tuple(entries), char_budget=self.char_budget)
        text, tr = self._call("mmstar", "mmstar_gen", ctx, query.query_id, warnings)
        return PipelineTrace(
            query_id=query.query_id, variant="mmstar", y_final=extract_answer(text),
            context_entry_ids=tuple(e.entry_id for e in entries),
            warnings=tuple(warnings), transcripts=(tr,),
        )

    def run_core(self, query: Query, entries: Sequence[KnowledgeEntry]) -> PipelineTrace:
        if self.core_mode == "single":
            return self._run_core_single(query, entries)
        return self._run_core_staged(query, entries)

    def _run_core_single(self, query: Query, entries: Sequence[KnowledgeEntry]) -> PipelineTrace:
        self._need_entries("core", query, entries)
        warnings: list[str] = []
        ctx = PromptContext(query=query, entries=tuple(entries), char_budget=self.char_budget)
        text, tr = self._call("core", "core_single", ctx, query.query_id, warnings)
        y_final = extract_answer(text)
        # Best-effort recovery of intermediate fields the model may emit in
        # its single response; absence is not an error in this mode.
        spans = bracket_spans(text)
        y_int = spans[0].strip() if len(spans) >= 2 else None
        try:
            i_tv = parse_reference_letter(text, len(entries))
        except ParseError:
            i_tv = None
        return PipelineTrace(
            query_id=query.query_id, variant="core", mode="single",
            y_int=y_int, i_tv=i_tv, y_final=y_final,
            context_entry_ids=tuple(e.entry_id for e in entries),
            warnings=tuple(warnings), transcripts=(tr,),
        )

    def _run_core_staged(self, query: Query, entries: Sequence[KnowledgeEntry]) -> PipelineTrace:
        self._need_entries("core", query, entries)
        warnings: list[str] = []
        ids = tuple(e.entry_id for e in entries)
        qid = query.query_id

        param_ctx = PromptContext(query=query, char_budget=self.char_budget)
        step1_text, tr1 = self._call("core", "core_param", param_ctx, qid, warnings)
        y_int = extract_answer(step1_text)

        select_ctx = PromptContext(query=query, entries=tuple(entries), char_budget=self.char_budget)
        select_text, tr2 = self._call("core", "core_select", select_ctx, qid, warnings)
        try:
            i_tv = parse_reference_letter(select_text, len(entries))
        except ParseError as exc:
            return PipelineTrace(
                query_id=qid, variant="core", mode="staged", y_int=y_int,
                context_entry_ids=ids, warnings=tuple(warnings), failed=True,
                error=f"core_select: {exc}", transcripts=(tr1, tr2),
            )
        selected = entries[i_tv]

        ext_ctx = PromptContext(query=query, selected_entry=selected, char_budget=self.char_budget)
        step3_text, tr3 = self._call("core", "core_ext_gen", ext_ctx, qid, warnings)
        y_ext = extract_answer(step3_text)

        rec_ctx = PromptContext(
            query=query, selected_entry=selected, step1_answer=y_int,
            step3_answer=y_ext, char_budget=self.char_budget,
        )
        rec_text, tr4 = self._call("core", "core_reconcile", rec_ctx, qid, warnings)
        return PipelineTrace(
            query_id=qid, variant="core", mode="staged", y_int=y_int, i_tv=i_tv,
            y_ext=y_ext, y_final=extract_answer(rec_text),
            prki_flag=prki_value(y_int, y_ext), context_entry_ids=ids,
            warnings=tuple(warnings), transcripts=(tr1, tr2, tr3, tr4),
        )

    def run_probes(self, query: Query, entries: Sequence[KnowledgeEntry]) -> PipelineTrace:
        """Diagnostic unimodal selections: image-only and text-only entry
        choice over the same candidates, flag set when they disagree."""
        self._need_entries("probe", query, entries)
        warnings: list[str] = []
        ids = tuple(e.entry_id for e in entries)
        ctx = PromptContext(query=query, entries=tuple(entries), char_budget=self.char_budget)
        v_text, tr1 = self._call("probe", "probe_visual", ctx, query.query_id, warnings)
        try:
            i_v = parse_reference_letter(v_text, len(entries))
        except ParseError as exc:
            return PipelineTrace(
                query_id=query.query_id, variant="probe", context_entry_ids=ids,
                warnings=tuple(warnings), failed=True, error=f"probe_visual: {exc}",
                transcripts=(tr1,),
            )
        t_text, tr2 = self._call("probe", "probe_text", ctx, query.query_id, warnings)
        try:
            i_t = parse_reference_letter(t_text, len(entries))
        except ParseError as exc:
            return PipelineTrace(
                query_id=query.query_id, variant="probe", i_v=i_v, context_entry_ids=ids,
                warnings=tuple(warnings), failed=True, error=f"probe_text: {exc}",
                transcripts=(tr1, tr2),
            )
        return PipelineTrace(
            query_id=query.query_id, variant="probe", i_v=i_v, i_t=i_t,
            vtki_flag=vtki_value(i_v, i_t), context_entry_ids=ids,
            warnings=tuple(warnings), transcripts=(tr1, tr2),
        )

    # -- batch ------------------------------------------------------------

    def run_query(
        self, variant: str, query: Query, entries: Sequence[KnowledgeEntry] = (),
    ) -> PipelineTrace:
        if variant == "param":
            return self.run_param(query)
        if variant == "oracle":
            return self.run_oracle(query)
        if variant == "one_stage":
            return self.run_one_stage(query, entries)
        if variant == "two_stage":
            return self.run_two_stage(query, entries)
        if variant == "mmstar":
            return self.run_mmstar(query, entries)
        if variant == "core":
            return self.run_core(query, entries)
        if variant == "probe":
            return self.run_probes(query, entries)
        raise PipelineError(f"unknown variant: {variant!r}")

    def run_many(
        self,
        variant: str,
        queries: Sequence[Query],
        results: Mapping[str, RetrievalResult] | None = None,
        workers: int = 1,
    ) -> list[PipelineTrace]:
        """Run one variant over all queries; traces come back in input order.

        Backend and parse failures become failed traces rather than aborting
        the batch. Variants that consume retrieval output require a result
        for every query up front.
        """
        if workers <= 0:
            raise ValueError(f"workers must be positive, got {workers}")
        needs_retrieval = variant not in ("param", "oracle")
        entries_by_qid: dict[str, tuple[KnowledgeEntry, ...]] = {}
        if needs_retrieval:
            if results is None:
                raise PipelineError(f"variant {variant!r} requires retrieval results")
            missing = [q.query_id for q in queries if q.query_id not in results]
            if missing:
                raise PipelineError(
                    f"no retrieval result for {len(missing)} queries, first: {missing[0]!r}"
                )
            for q in queries:
                entries_by_qid[q.query_id] = self.resolve_entries(results[q.query_id])

        mode = self.core_mode if variant == "core" else None

        def one(query: Query) -> PipelineTrace:
            try:
                return self.run_query(variant, query, entries_by_qid.get(query.query_id, ()))
            except (BackendError, ParseError, PromptError, PipelineError) as exc:
                return PipelineTrace(
                    query_id=query.query_id, variant=variant, mode=mode,
                    failed=True, error=f"{type(exc).__name__}: {exc}",
                )

        if workers == 1 or len(queries) <= 1:
            return [one(q) for q in queries]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, queries))


def has_failures(traces: Sequence[PipelineTrace]) -> bool:
    return any(t.failed for t in traces)


def write_traces(
    traces: Sequence[PipelineTrace], path: str | Path, include_transcripts: bool = True,
) -> None:
    p = Path(path)
    with p.open("w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace.to_json_dict(include_transcripts), ensure_ascii=False))
            fh.write("\n")


def read_traces(path: str | Path) -> list[PipelineTrace]:
    p = Path(path)
    traces: list[PipelineTrace] = []
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PipelineError(f"{p}:{lineno}: malformed trace line: {exc}") from exc
            transcripts = tuple(
                StageTranscript(
                    stage=t["stage"], prompt_parts=tuple(t["prompt_parts"]),
                    text=t["text"], latency_ms=t["latency_ms"], raw=t["raw"],
                    temperature=t["temperature"], max_new_tokens=t["max_new_tokens"],
                )
                for t in rec.get("transcripts", [])
            )
            traces.append(
                PipelineTrace(
                    query_id=rec["query_id"], variant=rec["variant"], mode=rec.get("mode"),
                    y_int=rec.get("y_int"), i_v=rec.get("i_v"), i_t=rec.get("i_t"),
                    i_tv=rec.get("i_tv"), y_ext=rec.get("y_ext"),
                    y_final=rec.get("y_final", ""), prki_flag=rec.get("prki_flag"),
                    vtki_flag=rec.get("vtki_flag"),
                    context_entry_ids=tuple(rec.get("context_entry_ids", ())),
                    warnings=tuple(rec.get("warnings", ())), failed=rec.get("failed", False),
                    error=rec.get("error"), transcripts=transcripts,
                )
            )
    return traces
