"""Line-delimited transcript records.

Each line is one JSON object. An ``init`` record opens a conversation::

    {"type": "init", "conversation_id": "c1", "prompt": "hello there"}

and ``turn`` records follow with contiguous indices from 1::

    {"type": "turn", "conversation_id": "c1", "turn_index": 1,
     "response_tokens": [5, 6], "next_prompt_tokens": [5, 7],
     "external_scores": {"cosine": 0.81}}

Every message field appears either as text (``prompt``) or as token ids
(``prompt_tokens``), never both.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from ..exceptions import DuplicateConversationError, TranscriptError, TurnOrderError
from ..idt import ConversationState, Monitor, TurnUpdate
from ..infometrics import CSV_COLUMNS, TurnMetrics
from ..token_stats import TokenizerSpec

INIT_FIELDS = ("prompt",)
TURN_FIELDS = ("response", "next_prompt")
CSV_HEADER = ("turn_index", *(name for name, _ in CSV_COLUMNS), "flags")


@dataclass
class TranscriptRecord:
    kind: str
    conversation_id: str
    prompt: list | str | None = None
    turn_index: int | None = None
    response: list | str | None = None
    next_prompt: list | str | None = None
    external_scores: dict = field(default_factory=dict)
    line_number: int | None = None

    def to_json(self) -> dict:
        out = {"type": self.kind, "conversation_id": self.conversation_id}
        names = INIT_FIELDS if self.kind == "init" else TURN_FIELDS
        if self.kind == "turn":
            out["turn_index"] = self.turn_index
        for name in names:
            value = getattr(self, name)
            out[name if isinstance(value, str) else f"{name}_tokens"] = value
        if self.external_scores:
            out["external_scores"] = dict(self.external_scores)
        return out


def _message(obj: Mapping, name: str, line: int | None, tokenizer: TokenizerSpec | None):
    has_text = name in obj
    has_tokens = f"{name}_tokens" in obj
    if has_text == has_tokens:
        raise TranscriptError(f"exactly one of {name!r} or {name + '_tokens'!r} is required", line)
    if has_tokens:
        tokens = obj[f"{name}_tokens"]
        if not isinstance(tokens, list) or not all(
            isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in tokens
        ):
            raise TranscriptError(f"{name}_tokens must be a list of non-negative integers", line)
        if tokenizer is not None and tokenizer.takes_text:
            raise TranscriptError(f"{name}_tokens given but tokenizer mode is {tokenizer.mode!r}", line)
        return tokens
    text = obj[name]
    if not isinstance(text, str):
        raise TranscriptError(f"{name} must be a string", line)
    if tokenizer is not None and not tokenizer.takes_text:
        raise TranscriptError(f"text field {name!r} not allowed with pretokenized input", line)
    return text


def parse_record(obj, line_number: int | None = None, tokenizer: TokenizerSpec | None = None) -> TranscriptRecord:
    """Validate one decoded record (field-level checks only)."""
    if not isinstance(obj, dict):
        raise TranscriptError("record must be a JSON object", line_number)
    kind = obj.get("type")
    if kind not in ("init", "turn"):
        raise TranscriptError(f"record type must be 'init' or 'turn', got {kind!r}", line_number)
    cid = obj.get("conversation_id")
    if not isinstance(cid, str) or not cid:
        raise TranscriptError("conversation_id must be a non-empty string", line_number)
    if kind == "init":
        return TranscriptRecord("init", cid, prompt=_message(obj, "prompt", line_number, tokenizer),
                                line_number=line_number)

    idx = obj.get("turn_index")
    if not isinstance(idx, int) or isinstance(idx, bool) or idx < 1:
        raise TranscriptError("turn_index must be a positive integer", line_number)
    scores = obj.get("external_scores") or {}
    if not isinstance(scores, dict):
        raise TranscriptError("external_scores must be an object", line_number)
    clean = {}
    for name, value in scores.items():
        if value is None:
            continue
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise TranscriptError(f"external score {name!r} must be a finite number", line_number)
        clean[name] = float(value)
    return TranscriptRecord(
        "turn", cid,
        turn_index=idx,
        response=_message(obj, "response", line_number, tokenizer),
        next_prompt=_message(obj, "next_prompt", line_number, tokenizer),
        external_scores=clean,
        line_number=line_number,
    )


def parse_transcript(lines: Iterable[str], tokenizer: TokenizerSpec | None = None) -> list[TranscriptRecord]:
    """Parse and validate a JSONL transcript.

    Blank lines are ignored. Raises :class:`TranscriptError` naming the
    first offending line.
    """
    records = []
    next_turn: dict[str, int] = {}
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TranscriptError(f"invalid JSON: {exc.msg}", n) from None
        rec = parse_record(obj, n, tokenizer)
        cid = rec.conversation_id
        if rec.kind == "init":
            if cid in next_turn:
                raise TranscriptError(f"duplicate init for conversation {cid!r}", n)
            next_turn[cid] = 1
        else:
            if cid not in next_turn:
                raise TranscriptError(f"turn for conversation {cid!r} before its init record", n)
            if rec.turn_index != next_turn[cid]:
                raise TranscriptError(
                    f"non-contiguous turn index for {cid!r}: expected {next_turn[cid]}, got {rec.turn_index}", n
                )
            next_turn[cid] += 1
        records.append(rec)
    return records


def read_transcript(path, tokenizer: TokenizerSpec | None = None) -> list[TranscriptRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_transcript(fh, tokenizer)


def write_transcript(records: Iterable[Mapping | TranscriptRecord], fh) -> None:
    for rec in records:
        obj = rec.to_json() if isinstance(rec, TranscriptRecord) else rec
        fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def _tokens(state: ConversationState, value) -> list[int]:
    return state.encode(value) if isinstance(value, str) else value


def open_conversation(monitor: Monitor, record: TranscriptRecord) -> ConversationState:
    if record.conversation_id in monitor:
        raise DuplicateConversationError(f"conversation {record.conversation_id!r} already exists")
    state = ConversationState(record.conversation_id, (), monitor.config, monitor.tokenizer)
    state.s_accumulator.add(_tokens(state, record.prompt))
    state.initial_prompt_length = state.s_accumulator.n
    # registered only once fully seeded, so no turn can observe a half-built state
    monitor.add(state)
    return state


def apply_turn(state: ConversationState, record: TranscriptRecord) -> TurnUpdate:
    """Tokenize and process one turn record; the order check happens first
    so a rejected turn leaves the intern table untouched."""
    with state.lock:
        if record.turn_index != state.turn_count + 1:
            raise TurnOrderError(
                f"conversation {state.conversation_id!r}: expected turn {state.turn_count + 1}, "
                f"got {record.turn_index}"
            )
        a = _tokens(state, record.response)
        sp = _tokens(state, record.next_prompt)
        return state.advance(a, sp, record.turn_index, record.external_scores)


def replay_records(records: Sequence[TranscriptRecord], monitor: Monitor) -> dict[str, list[TurnUpdate]]:
    """Feed records through ``monitor``; returns per-conversation updates."""
    out: dict[str, list[TurnUpdate]] = {}
    for rec in records:
        if rec.kind == "init":
            open_conversation(monitor, rec)
            out[rec.conversation_id] = []
        else:
            out[rec.conversation_id].append(apply_turn(monitor.get(rec.conversation_id), rec))
    return out


def fmt(x: float) -> str:
    return format(x, ".17g")


def format_flags(flags) -> str:
    return ";".join(f"{f.metric}:{fmt(f.z_score)}" for f in flags)


def metrics_row(metrics: TurnMetrics, flags=()) -> list[str]:
    return [str(metrics.turn_index), *(fmt(getattr(metrics, attr)) for _, attr in CSV_COLUMNS), format_flags(flags)]


def metrics_csv(updates: Iterable[TurnUpdate]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for u in updates:
        writer.writerow(metrics_row(u.metrics, u.new_flags))
    return buf.getvalue()


def read_metrics_csv(fh) -> list[dict]:
    """Rows of a metrics CSV as dicts with float values (``flags`` kept as text)."""
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or "turn_index" not in reader.fieldnames or "P" not in reader.fieldnames:
        raise ValueError("metrics CSV needs at least 'turn_index' and 'P' columns")
    rows = []
    for n, row in enumerate(reader, start=2):
        try:
            parsed = {k: (v if k == "flags" else float(v)) for k, v in row.items() if k is not None}
            parsed["turn_index"] = int(parsed["turn_index"])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {n}: malformed metrics row ({exc})") from None
        rows.append(parsed)
    return rows
