from .records import (
    CSV_HEADER,
    TranscriptRecord,
    apply_turn,
    metrics_csv,
    open_conversation,
    parse_record,
    parse_transcript,
    read_metrics_csv,
    read_transcript,
    replay_records,
    write_transcript,
)
from .snapshot import dumps_state, load_state, loads_state, save_state
from .svg import trajectory_svg

__all__ = [
    "CSV_HEADER",
    "TranscriptRecord",
    "apply_turn",
    "dumps_state",
    "load_state",
    "loads_state",
    "metrics_csv",
    "open_conversation",
    "parse_record",
    "parse_transcript",
    "read_metrics_csv",
    "read_transcript",
    "replay_records",
    "save_state",
    "trajectory_svg",
    "write_transcript",
]
