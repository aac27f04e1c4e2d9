"""bubblekit: live, reuse-oriented design containers.

Bubbles replace immutable baseline streams: they bind design elements
lazily over a content-addressed store, inherit the rest through explicit
structural relationships, propagate change stress actively to derived and
cloned bubbles, and can be inserted, retracted, embedded and dissolved
without copying data.
"""

from .engine import (
    AncestryEntry,
    AncestryReport,
    ConstraintViolationRecord,
    Federation,
    effective_constraints,
    evaluate_constraints,
    resolve_view,
)
from .errors import BubbleError
from .model import (
    Binding,
    BubbleDescriptor,
    BubbleState,
    Constraint,
    ResolvedElement,
    Violation,
    canonical_bytes,
    validate,
)
from .store import DiskResourceStore, MemoryResourceStore, SnapshotRecord
from .stress import (
    ChangeSet,
    DeliveryRecord,
    PropagationOutcome,
    Resolution,
    StressSignal,
    activate,
    commit,
    propagation_trace,
    resolve_signal,
)

__version__ = "0.1.0"

__all__ = [
    "AncestryEntry",
    "AncestryReport",
    "Binding",
    "BubbleDescriptor",
    "BubbleError",
    "BubbleState",
    "ChangeSet",
    "Constraint",
    "ConstraintViolationRecord",
    "DeliveryRecord",
    "DiskResourceStore",
    "Federation",
    "MemoryResourceStore",
    "PropagationOutcome",
    "ResolvedElement",
    "Resolution",
    "SnapshotRecord",
    "StressSignal",
    "Violation",
    "activate",
    "canonical_bytes",
    "commit",
    "effective_constraints",
    "evaluate_constraints",
    "propagation_trace",
    "resolve_signal",
    "resolve_view",
    "validate",
]
