"""HTTP sidecar: accepts transcript records and answers with per-turn metrics.

Endpoints::

    POST /v1/conversations               init record          -> 201
    POST /v1/conversations/{id}/turns    turn record          -> 200 metrics + new flags
    GET  /v1/conversations/{id}/state    snapshot summary     -> 200
    GET  /healthz                                             -> 200

Bodies are single JSON records (the transcript line format). Errors come
back as ``{"error": ...}`` with 400 (malformed), 404 (unknown
conversation) or 409 (duplicate init, out-of-order turn).
"""

from __future__ import annotations

import json
import logging
import re
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import unquote

from ..exceptions import (
    DuplicateConversationError,
    TranscriptError,
    TurnOrderError,
    UnknownConversationError,
)
from ..idt import IDTConfig, Monitor, TurnUpdate
from ..token_stats import TokenizerSpec
from .records import apply_turn, open_conversation, parse_record

log = logging.getLogger(__name__)

CONTENT_TYPE = "application/x-ndjson"
MAX_BODY = 64 * 1024 * 1024

_TURNS = re.compile(r"^/v1/conversations/([^/]+)/turns$")
_STATE = re.compile(r"^/v1/conversations/([^/]+)/state$")


def turn_response(conversation_id: str, update: TurnUpdate) -> dict:
    body = {"type": "metrics", "conversation_id": conversation_id}
    body.update(update.metrics.to_dict())
    body["flags"] = [f.to_dict() for f in update.new_flags]
    return body


class _HTTPError(Exception):
    def __init__(self, status: HTTPStatus, message: str):
        super().__init__(message)
        self.status = status


class MonitorHandler(BaseHTTPRequestHandler):
    server_version = "bipredict/0.1"
    protocol_version = "HTTP/1.1"

    @property
    def monitor(self) -> Monitor:
        return self.server.monitor

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: HTTPStatus, body: dict) -> None:
        data = (json.dumps(body, separators=(",", ":")) + "\n").encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", CONTENT_TYPE)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> dict:
        try:
            length = int(self.headers.get("Content-Length", 0))
        except ValueError:
            raise _HTTPError(HTTPStatus.BAD_REQUEST, "invalid Content-Length") from None
        if length <= 0 or length > MAX_BODY:
            raise _HTTPError(HTTPStatus.BAD_REQUEST, "request body required")
        raw = self.rfile.read(length)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise _HTTPError(HTTPStatus.BAD_REQUEST, f"malformed JSON body: {exc}") from None

    def _dispatch(self, handler) -> None:
        try:
            status, body = handler()
        except _HTTPError as exc:
            status, body = exc.status, {"error": str(exc)}
        except TranscriptError as exc:
            status, body = HTTPStatus.BAD_REQUEST, {"error": str(exc)}
        except UnknownConversationError as exc:
            status, body = HTTPStatus.NOT_FOUND, {"error": exc.args[0]}
        except (TurnOrderError, DuplicateConversationError) as exc:
            status, body = HTTPStatus.CONFLICT, {"error": str(exc)}
        self._send(status, body)

    def do_GET(self):
        self._dispatch(self._get)

    def do_POST(self):
        self._dispatch(self._post)

    def _get(self):
        path = self.path.split("?", 1)[0]
        if path == "/healthz":
            return HTTPStatus.OK, {"status": "ok", "conversations": len(self.monitor)}
        m = _STATE.match(path)
        if m:
            state = self.monitor.get(unquote(m.group(1)))
            return HTTPStatus.OK, state.summary()
        raise _HTTPError(HTTPStatus.NOT_FOUND, f"no route for GET {path}")

    def _post(self):
        path = self.path.split("?", 1)[0]
        tokenizer = self.monitor.tokenizer
        if path == "/v1/conversations":
            record = parse_record(self._body(), tokenizer=tokenizer)
            if record.kind != "init":
                raise _HTTPError(HTTPStatus.BAD_REQUEST, "expected an init record")
            state = open_conversation(self.monitor, record)
            return HTTPStatus.CREATED, state.summary(recent=0)
        m = _TURNS.match(path)
        if m:
            cid = unquote(m.group(1))
            state = self.monitor.get(cid)
            obj = self._body()
            if isinstance(obj, dict):
                obj.setdefault("conversation_id", cid)
                obj.setdefault("type", "turn")
            record = parse_record(obj, tokenizer=tokenizer)
            if record.kind != "turn" or record.conversation_id != cid:
                raise _HTTPError(HTTPStatus.BAD_REQUEST, "expected a turn record for this conversation")
            return HTTPStatus.OK, turn_response(cid, apply_turn(state, record))
        raise _HTTPError(HTTPStatus.NOT_FOUND, f"no route for POST {path}")


class MonitorServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, monitor: Monitor):
        self.monitor = monitor
        super().__init__(address, MonitorHandler)


def make_server(host: str = "127.0.0.1", port: int = 8077, config: IDTConfig | None = None,
                tokenizer: TokenizerSpec | None = None) -> MonitorServer:
    return MonitorServer((host, port), Monitor(config, tokenizer))


def serve(host: str = "127.0.0.1", port: int = 8077, config: IDTConfig | None = None,
          tokenizer: TokenizerSpec | None = None) -> None:
    server = make_server(host, port, config, tokenizer)
    log.info("listening on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
