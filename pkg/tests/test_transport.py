import io
import json
import threading
import urllib.error
import urllib.request

import pytest

from bipredict import harness
from bipredict.exceptions import SnapshotError, TranscriptError
from bipredict.idt import ConversationState, Monitor
from bipredict.token_stats import TokenizerSpec
from bipredict.transport import (
    dumps_state,
    load_state,
    loads_state,
    metrics_csv,
    parse_transcript,
    read_metrics_csv,
    replay_records,
    save_state,
    write_transcript,
)
from bipredict.transport.service import make_server


def lines(*objs):
    return [json.dumps(o) for o in objs]


INIT = {"type": "init", "conversation_id": "c", "prompt_tokens": [0, 1]}


def turn(i, a=(1, 2), sp=(0, 2), cid="c", **extra):
    return {"type": "turn", "conversation_id": cid, "turn_index": i,
            "response_tokens": list(a), "next_prompt_tokens": list(sp), **extra}


class TestParse:
    def test_well_formed(self):
        recs = parse_transcript(lines(INIT, turn(1), turn(2), turn(3)))
        assert len(recs) == 4
        assert [r.kind for r in recs] == ["init", "turn", "turn", "turn"]

    def test_blank_lines_ignored(self):
        assert len(parse_transcript(["", *lines(INIT), "  ", *lines(turn(1))])) == 2

    def test_turn_before_init(self):
        with pytest.raises(TranscriptError, match="line 1"):
            parse_transcript(lines(turn(1)))

    def test_non_contiguous(self):
        with pytest.raises(TranscriptError, match="line 4") as exc:
            parse_transcript(lines(INIT, turn(1), turn(2), turn(4)))
        assert exc.value.line_number == 4

    def test_invalid_json(self):
        with pytest.raises(TranscriptError, match="line 2"):
            parse_transcript([json.dumps(INIT), "{not json"])

    def test_duplicate_init(self):
        with pytest.raises(TranscriptError, match="duplicate"):
            parse_transcript(lines(INIT, INIT))

    @pytest.mark.parametrize("bad", [
        {"type": "turn", "conversation_id": "c", "turn_index": 1, "response_tokens": [1]},
        {"type": "turn", "conversation_id": "c", "turn_index": 1, "response": "a", "response_tokens": [1],
         "next_prompt_tokens": [1]},
        turn(1, a=(1, -2)),
        turn(1, external_scores={"judge": "high"}),
        {"type": "summary", "conversation_id": "c"},
        {"type": "turn", "conversation_id": "", "turn_index": 1},
    ])
    def test_malformed_turn(self, bad):
        with pytest.raises(TranscriptError, match="line 2"):
            parse_transcript(lines(INIT, bad))

    def test_text_needs_tokenizer(self):
        text_init = {"type": "init", "conversation_id": "c", "prompt": "a b"}
        with pytest.raises(TranscriptError):
            parse_transcript(lines(text_init), TokenizerSpec())
        assert parse_transcript(lines(text_init), TokenizerSpec("whitespace"))[0].prompt == "a b"

    def test_external_scores(self):
        recs = parse_transcript(lines(INIT, turn(1, external_scores={"judge": 4, "cos": None})))
        assert recs[1].external_scores == {"judge": 4.0}

    def test_round_trip(self):
        recs = parse_transcript(lines(INIT, turn(1, external_scores={"judge": 0.5})))
        buf = io.StringIO()
        write_transcript(recs, buf)
        again = parse_transcript(buf.getvalue().splitlines())
        assert [r.to_json() for r in again] == [r.to_json() for r in recs]


class TestReplay:
    def test_example_turn_metrics(self):
        updates = replay_records(parse_transcript(lines(
            {"type": "init", "conversation_id": "c", "prompt_tokens": []}, turn(1, (0, 1), (0, 2)))), Monitor())
        m = updates["c"][0].metrics
        assert m.p == pytest.approx(0.25, abs=1e-12)

    def test_text_equals_tokens(self):
        text = [{"type": "init", "conversation_id": "t", "prompt": "x y"},
                {"type": "turn", "conversation_id": "t", "turn_index": 1, "response": "y z", "next_prompt": "x z z"}]
        toks = [{"type": "init", "conversation_id": "t", "prompt_tokens": [0, 1]}, turn(1, (1, 2), (0, 2, 2), cid="t")]
        a = replay_records(parse_transcript(lines(*text), TokenizerSpec("whitespace")),
                           Monitor(tokenizer=TokenizerSpec("whitespace")))
        b = replay_records(parse_transcript(lines(*toks)), Monitor())
        assert a["t"][0].metrics == b["t"][0].metrics

    def test_csv_round_trip(self):
        conv = harness.generate_conversation(harness.GeneratorConfig(seed=1), 40)
        updates = replay_records(parse_transcript(lines(*conv.records())), Monitor())["control-seed1"]
        text = metrics_csv(updates)
        rows = read_metrics_csv(io.StringIO(text))
        assert len(rows) == 40
        for row, u in zip(rows, updates):
            assert row["P"] == u.metrics.p
            assert row["dH"] == u.metrics.delta_h


class TestSnapshot:
    def _conv(self):
        return harness.generate_conversation(harness.GeneratorConfig(seed=2), 60,
                                             harness.PerturbationPlan("topic_shift", (40, 50)))

    @pytest.mark.parametrize("cut", [0, 1, 29, 30, 31, 45])
    def test_crash_consistency(self, tmp_path, cut):
        conv = self._conv()
        full = harness.replay(conv)
        st = ConversationState(conv.conversation_id, conv.prompt)
        for a, sp in conv.turns[:cut]:
            st.process_turn(a, sp)
        path = tmp_path / "state.json"
        save_state(st, path)
        restored = load_state(path)
        for a, sp in conv.turns[cut:]:
            restored.process_turn(a, sp)
        assert restored.history == full.history
        assert [f.to_dict() for f in restored.flags] == [f.to_dict() for f in full.flags]
        assert restored.baseline == full.baseline

    def test_wrong_version(self):
        st = harness.replay(harness.generate_conversation(harness.GeneratorConfig(seed=2), 5))
        obj = json.loads(dumps_state(st))
        obj["version"] = 99
        with pytest.raises(SnapshotError, match="version"):
            loads_state(json.dumps(obj))

    def test_truncated(self, tmp_path):
        st = harness.replay(harness.generate_conversation(harness.GeneratorConfig(seed=2), 5))
        text = dumps_state(st)
        with pytest.raises(SnapshotError):
            loads_state(text[: len(text) // 2])

    def test_tampered(self):
        st = harness.replay(harness.generate_conversation(harness.GeneratorConfig(seed=2), 5))
        obj = json.loads(dumps_state(st))
        obj["state"]["turn_count"] = 4
        with pytest.raises(SnapshotError, match="checksum"):
            loads_state(json.dumps(obj))

    def test_text_state_keeps_vocab(self):
        spec = TokenizerSpec("whitespace")
        mon = Monitor(tokenizer=spec)
        recs = parse_transcript(lines(
            {"type": "init", "conversation_id": "w", "prompt": "alpha beta"},
            {"type": "turn", "conversation_id": "w", "turn_index": 1, "response": "beta gamma", "next_prompt": "alpha"},
        ), spec)
        replay_records(recs, mon)
        restored = loads_state(dumps_state(mon.get("w")))
        assert restored.vocab == {"alpha": 0, "beta": 1, "gamma": 2}
        assert restored.encode("gamma delta") == [2, 3]


# -- service ---------------------------------------------------------------


@pytest.fixture
def server():
    srv = make_server("127.0.0.1", 0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def call(srv, method, path, body=None):
    host, port = srv.server_address[:2]
    data = None if body is None else (body if isinstance(body, bytes) else json.dumps(body).encode())
    req = urllib.request.Request(f"http://{host}:{port}{path}", data=data, method=method,
                                 headers={"Content-Type": "application/x-ndjson"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


class TestService:
    def test_init_then_turn(self, server):
        status, body = call(server, "POST", "/v1/conversations", INIT)
        assert status == 201 and body["turn_count"] == 0
        status, body = call(server, "POST", "/v1/conversations/c/turns", turn(1))
        assert status == 200
        assert "p" in body and body["turn_index"] == 1 and body["flags"] == []

    def test_unknown_conversation(self, server):
        assert call(server, "POST", "/v1/conversations/nope/turns", turn(1, cid="nope"))[0] == 404
        assert call(server, "GET", "/v1/conversations/nope/state")[0] == 404

    def test_out_of_order(self, server):
        call(server, "POST", "/v1/conversations", INIT)
        assert call(server, "POST", "/v1/conversations/c/turns", turn(1))[0] == 200
        status, body = call(server, "POST", "/v1/conversations/c/turns", turn(3))
        assert status == 409 and "expected turn 2" in body["error"]

    def test_duplicate_init(self, server):
        assert call(server, "POST", "/v1/conversations", INIT)[0] == 201
        assert call(server, "POST", "/v1/conversations", INIT)[0] == 409

    @pytest.mark.parametrize("body", [b"{broken", {"type": "init"}, turn(1), {"type": "init", "conversation_id": "x"}])
    def test_malformed(self, server, body):
        assert call(server, "POST", "/v1/conversations", body)[0] == 400

    def test_malformed_turn(self, server):
        call(server, "POST", "/v1/conversations", INIT)
        assert call(server, "POST", "/v1/conversations/c/turns", {"turn_index": 1})[0] == 400

    def test_state_and_health(self, server):
        call(server, "POST", "/v1/conversations", INIT)
        call(server, "POST", "/v1/conversations/c/turns", turn(1))
        status, body = call(server, "GET", "/v1/conversations/c/state")
        assert status == 200 and body["turn_count"] == 1 and body["baseline"] is None
        assert call(server, "GET", "/healthz") == (200, {"status": "ok", "conversations": 1})
        assert call(server, "GET", "/nowhere")[0] == 404

    def test_replay_equivalence_and_isolation(self, server):
        convs = [harness.generate_conversation(harness.GeneratorConfig(seed=s), 40,
                                               harness.PerturbationPlan("non_sequitur", (35, 38)))
                 for s in (7, 8)]
        serial = {}
        for c in convs:
            updates = replay_records(parse_transcript(lines(*c.records())), Monitor())[c.conversation_id]
            serial[c.conversation_id] = updates
            assert call(server, "POST", "/v1/conversations", c.records()[0])[0] == 201

        results = {c.conversation_id: [] for c in convs}

        def feed(c):
            for rec in c.records()[1:]:
                status, body = call(server, "POST", f"/v1/conversations/{c.conversation_id}/turns", rec)
                assert status == 200
                results[c.conversation_id].append(body)

        threads = [threading.Thread(target=feed, args=(c,)) for c in convs]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for cid, updates in serial.items():
            assert len(results[cid]) == len(updates) == 40
            for body, u in zip(results[cid], updates):
                expected = u.metrics.to_dict()
                assert {k: body[k] for k in expected} == expected
                assert body["flags"] == [f.to_dict() for f in u.new_flags]
