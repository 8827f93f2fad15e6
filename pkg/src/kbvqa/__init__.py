"""Knowledge-based VQA harness: retrieval over an image-embedded knowledge
base, prompting pipelines with inconsistency flags, fine-tuning data mining,
and evaluation reports."""

__version__ = "0.1.0"

from .kb import KnowledgeBase, KnowledgeEntry, Query, ingest_kb, ingest_queries
from .retrieval import FlatIndex, RetrievalResult, build_index, recall_at_k, search
from .prompts import MessageSequence, PromptContext, golden_check, render, rendered_text
from .backend import BackendRequest, BackendResponse, EndpointConfig, HttpBackend, MockBackend
from .pipeline import PipelineRunner, PipelineTrace, read_traces, write_traces
from .mining import MiningRecord, export_training, mine_prki, mine_vtki
from .metrics import MatchVerdict, MetricReport, compare_runs, match_answer, score_run

__all__ = [
    "KnowledgeBase", "KnowledgeEntry", "Query", "ingest_kb", "ingest_queries",
    "FlatIndex", "RetrievalResult", "build_index", "recall_at_k", "search",
    "MessageSequence", "PromptContext", "golden_check", "render", "rendered_text",
    "BackendRequest", "BackendResponse", "EndpointConfig", "HttpBackend", "MockBackend",
    "PipelineRunner", "PipelineTrace", "read_traces", "write_traces",
    "MiningRecord", "export_training", "mine_prki", "mine_vtki",
    "MatchVerdict", "MetricReport", "compare_runs", "match_answer", "score_run",
]
