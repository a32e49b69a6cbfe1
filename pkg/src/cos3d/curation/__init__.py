"""Stage I curation: adapters, estimation, filtering and canonical lines."""

from .adapters import ADAPTERS, UnknownAdapterError, ingest, register_adapter
from .pipeline import (
    BEHIND_CAMERA,
    FULLY_OUTSIDE,
    HIGH_TRUNCATION,
    LOW_VISIBILITY,
    MAX_TRUNCATION,
    MIN_VISIBILITY,
    ImageResult,
    build_canonical_lines,
    drop_reason,
    filter_instances,
    normalize,
    prepare_records,
    process_image,
    snap_rotation,
)
from .records import (
    CanonicalLine,
    Diagnostic,
    DropRecord,
    InstanceRecord,
    RawImage,
    RawInstance,
    canonical_line_from_dict,
    canonical_line_to_json,
    read_canonical,
)
