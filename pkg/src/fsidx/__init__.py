"""File system metadata indexing: snapshot pipelines, change-event
monitoring, and an embedded dual index."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    AggregateRecord,
    NormalizedRow,
    PrimaryRecord,
    Principal,
    SnapshotVersion,
    VisibilityPolicy,
    encode_subject,
    epoch_to_iso8601,
    render_mode,
)
from .sketch import QuantileSketch, exact_quantile  # noqa: F401
from .store import IndexStore  # noqa: F401
