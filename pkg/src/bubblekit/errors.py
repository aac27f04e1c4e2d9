"""Domain errors with stable machine-readable codes.

The CLI maps every error one-to-one onto its ``code`` attribute, so the
codes are part of the public contract and must not change.
"""

from __future__ import annotations


class BubbleError(Exception):
    """Base class for every domain failure."""

    code = "ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class NotFound(BubbleError):
    code = "NOT_FOUND"


class DanglingDigest(BubbleError):
    code = "DANGLING_DIGEST"


class DigestMismatch(BubbleError):
    code = "DIGEST_MISMATCH"


class BadPath(BubbleError):
    code = "BAD_PATH"


class UnknownBubble(BubbleError):
    code = "UNKNOWN_BUBBLE"


class FrozenBubble(BubbleError):
    code = "FROZEN_BUBBLE"


class InvalidState(BubbleError):
    code = "INVALID_STATE"


class ParentDestroyed(BubbleError):
    code = "PARENT_DESTROYED"


class SourceDestroyed(BubbleError):
    code = "SOURCE_DESTROYED"


class DestroyedBubble(BubbleError):
    code = "DESTROYED"


class StructuralCycle(BubbleError):
    code = "STRUCTURAL_CYCLE"


class EmbedCycleError(BubbleError):
    code = "EMBED_CYCLE"


class NotDissolvable(BubbleError):
    code = "NOT_DISSOLVABLE"


class NotAdjacent(BubbleError):
    code = "NOT_ADJACENT"


class NotRetractable(BubbleError):
    code = "NOT_RETRACTABLE"


class HasDependents(BubbleError):
    code = "HAS_DEPENDENTS"


class ConstraintViolationError(BubbleError):
    code = "CONSTRAINT_VIOLATION"

    def __init__(self, message: str = "", violations=()):
        super().__init__(message)
        self.violations = list(violations)


class UnknownSignal(BubbleError):
    code = "UNKNOWN_SIGNAL"


class IllegalDecision(BubbleError):
    code = "ILLEGAL_DECISION"


class MergeIncomplete(BubbleError):
    code = "MERGE_INCOMPLETE"


class UnknownGovernor(BubbleError):
    code = "UNKNOWN_GOVERNOR"


class TimedOut(BubbleError):
    code = "TIMED_OUT"


class ScriptError(BubbleError):
    code = "SCRIPT_ERROR"


class RepositoryError(BubbleError):
    code = "REPOSITORY_ERROR"
