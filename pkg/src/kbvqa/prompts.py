"""Bit-exact prompt rendering for every pipeline variant.

Templates live under ``kbvqa/templates/`` as verbatim resource files using
``{placeholder}`` substitution plus ``<image>`` / ``<image#X>`` markers.
Rendering splits a template into text and image parts without ever running
substituted content back through the marker scanner, so questions or wiki
text containing marker-like strings cannot inject image slots.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Union

from .answers import REFERENCE_LETTERS
from .errors import PromptError
from .kb import KnowledgeEntry, Query

DEFAULT_CHAR_BUDGET = 2000

VARIANTS = ("param", "oracle", "one_stage", "two_stage", "mmstar", "core", "probe")

# Stage tokens are globally unique so mock scripts can key on them directly.
VARIANT_STAGES: dict[str, tuple[str, ...]] = {
    "param": ("param_gen",),
    "oracle": ("oracle_gen",),
    "one_stage": ("one_stage_gen",),
    "two_stage": ("rerank", "two_stage_gen"),
    "mmstar": ("mmstar_gen",),
    "core": ("core_single", "core_param", "core_select", "core_ext_gen", "core_reconcile"),
    "probe": ("probe_visual", "probe_text"),
}

_STAGE_TEMPLATES = {
    "param_gen": "param.tmpl",
    "oracle_gen": "oracle.tmpl",
    "one_stage_gen": "one_stage.tmpl",
    "rerank": "two_stage_rerank.tmpl",
    "two_stage_gen": "two_stage_generate.tmpl",
    "mmstar_gen": "mmstar.tmpl",
    "core_single": "core_single.tmpl",
    "core_param": "param.tmpl",
    "core_select": "core_select.tmpl",
    "core_ext_gen": "oracle.tmpl",
    "core_reconcile": "core_reconcile.tmpl",
    "probe_visual": "probe_visual.tmpl",
    "probe_text": "two_stage_rerank.tmpl",
}

# Stages whose templates carry per-letter reference blocks; they refuse to
# render with zero entries rather than emit a prompt with no references.
_STAGES_NEEDING_ENTRIES = frozenset(
    {"one_stage_gen", "rerank", "mmstar_gen", "core_single", "core_select",
     "probe_visual", "probe_text"}
)

_MARKER = re.compile(r"<image#([A-E])>|<image>")
_PLACEHOLDER = re.compile(r"\{([A-Za-z0-9_]+)\}")
_SENTENCE_END = ".!?"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    """An image slot: which file/uri to attach and the marker it came from."""

    image_ref: str
    marker: str


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class MessageSequence:
    parts: tuple[Part, ...]

    def text_only(self) -> str:
        """Concatenation of the text parts, image slots elided."""
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))

    def marked_text(self) -> str:
        """Full rendered template with image markers left in place."""
        out = []
        for p in self.parts:
            out.append(p.text if isinstance(p, TextPart) else p.marker)
        return "".join(out)

    def image_refs(self) -> tuple[str, ...]:
        return tuple(p.image_ref for p in self.parts if isinstance(p, ImagePart))

    def to_json_parts(self) -> list[dict]:
        out: list[dict] = []
        for p in self.parts:
            if isinstance(p, TextPart):
                out.append({"type": "text", "text": p.text})
            else:
                out.append({"type": "image", "marker": p.marker, "image_ref": p.image_ref})
        return out


@dataclass(frozen=True)
class PromptContext:
    """Everything a template may pull from: the query, the ranked entries
    (labeled A..E by rank), the selected/gold entry for single-reference
    stages, and prior stage answers for the reconciliation step."""

    query: Query
    entries: tuple[KnowledgeEntry, ...] = ()
    selected_entry: KnowledgeEntry | None = None
    step1_answer: str | None = None
    step3_answer: str | None = None
    char_budget: int = DEFAULT_CHAR_BUDGET


@dataclass(frozen=True)
class GoldenCheck:
    passed: bool
    offset: int | None = None
    message: str = "ok"


@lru_cache(maxsize=None)
def _template_text(name: str) -> str:
    ref = resources.files("kbvqa").joinpath("templates").joinpath(name)
    try:
        return ref.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise PromptError(f"template resource missing: {name}") from exc


def template_for_stage(stage: str) -> str:
    try:
        return _STAGE_TEMPLATES[stage]
    except KeyError:
        raise PromptError(f"unknown stage: {stage!r}") from None


def _check_variant_stage(variant: str, stage: str) -> None:
    stages = VARIANT_STAGES.get(variant)
    if stages is None:
        raise PromptError(f"unknown variant: {variant!r}")
    if stage not in stages:
        raise PromptError(f"stage {stage!r} does not belong to variant {variant!r}")


def truncate_content(text: str, char_budget: int) -> str:
    """Clip entry content to char_budget characters, preferring to end on a
    sentence boundary (., ! or ? followed by whitespace or end of text)."""
    if char_budget <= 0:
        raise ValueError(f"char_budget must be positive, got {char_budget}")
    if len(text) <= char_budget:
        return text
    for i in range(char_budget - 1, -1, -1):
        if text[i] in _SENTENCE_END and (i + 1 >= len(text) or text[i + 1].isspace()):
            return text[: i + 1]
    return text[:char_budget]


def _strip_letter_blocks(template: str, n_entries: int) -> str:
    """Drop the whole per-letter block (header line included) for every
    reference letter beyond the entries actually supplied."""
    if n_entries >= len(REFERENCE_LETTERS):
        return template
    dropped = set(REFERENCE_LETTERS[n_entries:])
    kept: list[str] = []
    for line in template.splitlines(keepends=True):
        body = line.rstrip("\n")
        letter = _letter_of_line(body)
        if letter is not None and letter in dropped:
            continue
        kept.append(line)
    return "".join(kept)


def _letter_of_line(body: str) -> str | None:
    for letter in REFERENCE_LETTERS:
        if body in (f"Reference {letter}:", f"Context {letter}:"):
            return letter
        if (f"{{wiki_title_{letter}}}" in body or f"{{wiki_content_{letter}}}" in body
                or f"<image#{letter}>" in body):
            return letter
    return None


def _context_values(stage: str, ctx: PromptContext) -> dict[str, str]:
    values = {"question": ctx.query.question}
    for idx, entry in enumerate(ctx.entries):
        letter = REFERENCE_LETTERS[idx]
        values[f"wiki_title_{letter}"] = entry.title
        values[f"wiki_content_{letter}"] = truncate_content(entry.content, ctx.char_budget)
    if ctx.selected_entry is not None:
        title = ctx.selected_entry.title
        content = truncate_content(ctx.selected_entry.content, ctx.char_budget)
        values["wiki_title_gt"] = values["wiki_title_select"] = title
        values["wiki_content_gt"] = values["wiki_content_select"] = content
    if ctx.step1_answer is not None:
        values["answer_step1"] = ctx.step1_answer
    if ctx.step3_answer is not None:
        values["answer_step3"] = ctx.step3_answer
    return values


def _entry_image(entry: KnowledgeEntry, label: str) -> str:
    if not entry.image_refs:
        raise PromptError(f"entry {entry.entry_id!r} ({label}) has no image to attach")
    return entry.image_refs[0]


def render(variant: str, stage: str, ctx: PromptContext) -> MessageSequence:
    """Render one stage prompt into an ordered text/image part sequence.

    Image marker resolution: ``<image#X>`` attaches the image of the entry
    labeled X. A plain ``<image>`` attaches the query image, except when the
    preceding template text ends with ``Reference Image:``, which attaches
    the selected entry's image instead.
    """
    _check_variant_stage(variant, stage)
    if len(ctx.entries) > len(REFERENCE_LETTERS):
        raise PromptError(
            f"at most {len(REFERENCE_LETTERS)} entries may be supplied, got {len(ctx.entries)}"
        )
    if stage in _STAGES_NEEDING_ENTRIES and not ctx.entries:
        raise PromptError(f"stage {stage!r} requires at least one retrieved entry")

    template = _strip_letter_blocks(_template_text(template_for_stage(stage)), len(ctx.entries))
    values = _context_values(stage, ctx)

    def fill(match: re.Match[str]) -> str:
        name = match.group(1)
        try:
            return values[name]
        except KeyError:
            raise PromptError(
                f"stage {stage!r} is missing context for placeholder {{{name}}}"
            ) from None

    parts: list[Part] = []
    pos = 0
    for marker in _MARKER.finditer(template):
        raw_segment = template[pos : marker.start()]
        if raw_segment:
            parts.append(TextPart(_PLACEHOLDER.sub(fill, raw_segment)))
        letter = marker.group(1)
        if letter is not None:
            idx = REFERENCE_LETTERS.index(letter)
            if idx >= len(ctx.entries):
                raise PromptError(
                    f"marker <image#{letter}> survived block removal with only "
                    f"{len(ctx.entries)} entries"
                )
            ref = _entry_image(ctx.entries[idx], f"reference {letter}")
        elif raw_segment.rstrip(" ").endswith("Reference Image:"):
            if ctx.selected_entry is None:
                raise PromptError(f"stage {stage!r} requires selected_entry for its reference image")
            ref = _entry_image(ctx.selected_entry, "selected entry")
        else:
            ref = ctx.query.image_ref
        parts.append(ImagePart(image_ref=ref, marker=marker.group(0)))
        pos = marker.end()
    tail = template[pos:]
    if tail:
        parts.append(TextPart(_PLACEHOLDER.sub(fill, tail)))
    return MessageSequence(parts=tuple(parts))


def rendered_text(variant: str, stage: str, ctx: PromptContext) -> str:
    """The filled template as one string, image markers kept inline. This is
    the byte stream goldens are compared against."""
    return render(variant, stage, ctx).marked_text()


def golden_check(variant: str, stage: str, ctx: PromptContext, golden_path: str | Path) -> GoldenCheck:
    """Byte-compare a rendered prompt against a golden file. Failures report
    the first differing byte offset plus a 40-byte context window per side."""
    path = Path(golden_path)
    try:
        golden = path.read_bytes()
    except OSError as exc:
        raise PromptError(f"cannot read golden file {path}: {exc}") from exc
    actual = rendered_text(variant, stage, ctx).encode("utf-8")
    if actual == golden:
        return GoldenCheck(passed=True)
    limit = min(len(golden), len(actual))
    offset = limit
    for i in range(limit):
        if golden[i] != actual[i]:
            offset = i
            break
    lo, hi = max(0, offset - 20), offset + 20
    message = (
        f"first difference at byte {offset}: "
        f"golden[{lo}:{hi}]={golden[lo:hi]!r} rendered[{lo}:{hi}]={actual[lo:hi]!r} "
        f"(golden {len(golden)} bytes, rendered {len(actual)} bytes)"
    )
    return GoldenCheck(passed=False, offset=offset, message=message)
