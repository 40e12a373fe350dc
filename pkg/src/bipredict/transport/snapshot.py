"""Versioned, checksummed state snapshots (one JSON line per file)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from ..exceptions import SnapshotError
from ..idt import ConversationState

FORMAT = "bipredict-state"
VERSION = 1


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _checksum(payload: dict) -> str:
    return "sha256:" + hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()


def dumps_state(state: ConversationState) -> str:
    payload = state.to_dict()
    doc = {"format": FORMAT, "version": VERSION, "checksum": _checksum(payload), "state": payload}
    return json.dumps(doc, separators=(",", ":")) + "\n"


def loads_state(text: str) -> ConversationState:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"corrupted snapshot: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise SnapshotError("not a bipredict state snapshot")
    if doc.get("version") != VERSION:
        raise SnapshotError(f"unsupported snapshot version {doc.get('version')!r} (expected {VERSION})")
    payload = doc.get("state")
    if not isinstance(payload, dict) or doc.get("checksum") != _checksum(payload):
        raise SnapshotError("snapshot checksum mismatch")
    try:
        return ConversationState.from_dict(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotError(f"invalid snapshot contents: {exc}") from None


def save_state(state: ConversationState, path: str | Path) -> None:
    text = dumps_state(state)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def load_state(path: str | Path) -> ConversationState:
    return loads_state(Path(path).read_text(encoding="utf-8"))
