"""Exception hierarchy for the miniwfl engine.

Static-class errors (parse/validate/plan time) and runtime-class errors
(staging, launch, output collection) are kept in separate branches so the
scheduler can classify failures without string matching.
"""


class MiniwflError(Exception):
    """Base class for all engine errors."""


# --- document model ---------------------------------------------------------

class DocumentSyntaxError(MiniwflError):
    """Input text is not well-formed YAML/JSON."""


class SchemaError(MiniwflError):
    """Document structure violates the dialect schema."""


class TypeSyntaxError(SchemaError):
    """A type string could not be parsed."""


class NotFoundError(MiniwflError):
    """A referenced document could not be loaded."""


class IncludeCycleError(MiniwflError):
    """A document transitively includes itself."""


# --- expressions ------------------------------------------------------------

class ExprSyntaxError(MiniwflError):
    """Expression source is outside the grammar."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ExprTypeError(MiniwflError):
    """Operand types invalid for an operator, or a guard was non-boolean."""


class UnknownReferenceError(MiniwflError):
    """Expression referenced an id absent from the evaluation context."""


# --- planning ---------------------------------------------------------------

class JobOrderError(MiniwflError):
    """Job order is missing inputs or names unreadable files."""


class PlanError(MiniwflError):
    """Internal planning failure (should be unreachable post-validation)."""


class ScatterLengthMismatchError(MiniwflError):
    """Dot-product scatter over arrays of unequal length."""


class GraphCycleError(MiniwflError):
    """Operation requiring an acyclic graph was given a cyclic one."""


# --- runtime ----------------------------------------------------------------

class StagingError(MiniwflError):
    """Input staging failed: missing file, checksum drift, or collision."""


class LaunchError(MiniwflError):
    """Process or container could not be started."""


class TaskTimeout(MiniwflError):
    """Wall-time limit exceeded; the attempt was killed."""


class OutputMissingError(MiniwflError):
    """Required File output matched nothing."""


class OutputAmbiguousError(MiniwflError):
    """Single-File output glob matched more than one file."""


# --- cache / upgrade --------------------------------------------------------

class CacheIOError(MiniwflError):
    """Cache backend failure; degrades to a miss, never fails the run."""


class DowngradeError(MiniwflError):
    """Requested target version precedes the document version."""


class UnknownVersionError(MiniwflError):
    """Version string outside the supported set."""
