"""Exception types shared across the package."""


class KbvqaError(Exception):
    """Base class for all package errors."""


class IngestError(KbvqaError):
    """Malformed or inconsistent input files (KB, queries, embeddings, configs)."""


class PromptError(KbvqaError):
    """A template cannot be rendered from the supplied context."""


class BackendError(KbvqaError):
    """A model backend call failed after exhausting its retry policy."""


class ScriptKeyError(BackendError):
    """The mock script has no entry for a requested (query_id, stage) tag."""


class ParseError(KbvqaError):
    """Model output could not be parsed into the structure a stage requires."""


class PipelineError(KbvqaError):
    """A pipeline run was asked to do something its inputs cannot support."""


class EvalError(KbvqaError):
    """Scoring inputs are inconsistent (missing traces, mismatched universes)."""
