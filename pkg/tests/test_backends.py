import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evomem.backends import (
    UNMATCHED,
    CallableBackend,
    HttpBackend,
    MatchKind,
    ScriptedBackend,
    ScriptedRule,
)
from evomem.errors import BackendError, ConfigError, InvalidInput

SECRET = "sk-test-do-not-log-1234"


def test_contains_rule_fires_on_matching_prompt():
    b = ScriptedBackend([ScriptedRule(MatchKind.CONTAINS, "2x^2", ["Final Answer: x=1/2, -2"])])
    assert b.complete("Solve 2x^2 + 3x - 2 = 0") == "Final Answer: x=1/2, -2"
    assert b.complete("something else") == UNMATCHED


def test_always_rule_round_robin():
    b = ScriptedBackend([ScriptedRule(MatchKind.ALWAYS, responses=["a", "b"])])
    assert [b.complete("p") for _ in range(3)] == ["a", "b", "a"]


def test_first_matching_rule_wins_and_counters_are_per_rule():
    b = ScriptedBackend(
        [
            ScriptedRule(MatchKind.EXACT, "exact", ["e1", "e2"]),
            ScriptedRule(MatchKind.CONTAINS, "x", ["c1", "c2"]),
            ScriptedRule(MatchKind.ALWAYS, responses=["z"]),
        ]
    )
    assert b.complete("exact") == "e1"
    assert b.complete("has x") == "c1"
    assert b.complete("exact") == "e2"
    assert b.complete("exact x") == "c2"
    assert b.complete("nothing") == "z"


def test_empty_prompt_rejected():
    with pytest.raises(InvalidInput):
        ScriptedBackend([]).complete("")
    with pytest.raises(InvalidInput):
        CallableBackend(str.upper).complete("")


def test_rule_needs_responses():
    with pytest.raises(InvalidInput):
        ScriptedRule(MatchKind.ALWAYS, responses=[])


def test_from_file(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(
        json.dumps(
            {
                "rules": [
                    {"match": {"contains": "door"}, "responses": ["Action: open door"]},
                    {"match": {"always": True}, "responses": ["Action: look"]},
                ]
            }
        )
    )
    b = ScriptedBackend.from_file(path)
    assert b.complete("a door") == "Action: open door"
    assert b.complete("a wall") == "Action: look"


@pytest.mark.parametrize(
    "payload",
    [
        "not json",
        json.dumps({"nope": []}),
        json.dumps({"rules": [{"match": {"fuzzy": "x"}, "responses": ["a"]}]}),
        json.dumps({"rules": [{"match": {"contains": "x", "exact": "y"}, "responses": ["a"]}]}),
    ],
)
def test_from_file_rejects_bad_rules(tmp_path, payload):
    path = tmp_path / "rules.json"
    path.write_text(payload)
    with pytest.raises(ConfigError):
        ScriptedBackend.from_file(path)


def test_from_file_missing(tmp_path):
    with pytest.raises(ConfigError):
        ScriptedBackend.from_file(tmp_path / "absent.json")


def test_state_dict_roundtrip():
    rules = [ScriptedRule(MatchKind.ALWAYS, responses=["a", "b", "c"])]
    b = ScriptedBackend(rules)
    b.complete("p")
    c = ScriptedBackend(rules)
    c.load_state_dict(b.state_dict())
    assert [c.complete("p") for _ in range(2)] == ["b", "c"]
    with pytest.raises(ConfigError):
        ScriptedBackend(rules * 2).load_state_dict(b.state_dict())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["alpha", "beta", "gamma delta", "beta gamma"]), min_size=1, max_size=20))
def test_scripted_is_deterministic(prompts):
    def make():
        return ScriptedBackend(
            [
                ScriptedRule(MatchKind.CONTAINS, "beta", ["b1", "b2", "b3"]),
                ScriptedRule(MatchKind.EXACT, "alpha", ["a1"]),
            ]
        )

    first, second = make(), make()
    assert [first.complete(p) for p in prompts] == [second.complete(p) for p in prompts]


def test_concurrent_round_robin_consumes_each_slot_once():
    b = ScriptedBackend([ScriptedRule(MatchKind.ALWAYS, responses=[str(i) for i in range(400)])])
    with ThreadPoolExecutor(max_workers=8) as pool:
        out = list(pool.map(lambda _: b.complete("p"), range(400)))
    assert sorted(out, key=int) == [str(i) for i in range(400)]


# -- HTTP ----------------------------------------------------------------------


class _Stub:
    """Chat-completions stub replaying a scripted list of statuses."""

    def __init__(self, statuses, body=None):
        self.statuses = list(statuses)
        self.body = body
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                raw = self.rfile.read(int(self.headers["Content-Length"]))
                stub.requests.append((dict(self.headers), json.loads(raw)))
                status = stub.statuses.pop(0) if stub.statuses else 200
                if status == 200:
                    data = stub.body if stub.body is not None else json.dumps(
                        {"choices": [{"message": {"role": "assistant", "content": "Action: go north"}}]}
                    ).encode()
                else:
                    data = b'{"error": "boom"}'
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_port}/v1/chat/completions"

    def __enter__(self):
        threading.Thread(target=self.server.serve_forever, daemon=True).start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def _client(url, sleeps, **kw):
    return HttpBackend(url, "test-model", timeout=5, api_key=SECRET, sleep=sleeps.append, **kw)


def test_http_retries_5xx_then_succeeds(caplog):
    sleeps = []
    with _Stub([500, 500, 200]) as stub, caplog.at_level(logging.WARNING, logger="evomem.backends"):
        out = _client(stub.url, sleeps).complete("where next?")
    assert out == "Action: go north"
    assert len(stub.requests) == 3
    retries = [r for r in caplog.records if "retry" in r.getMessage()]
    assert len(retries) == 2
    assert sleeps == [0.5, 1.0]
    assert SECRET not in caplog.text


def test_http_request_shape():
    with _Stub([200]) as stub:
        _client(stub.url, [], temperature=0.0).complete("hello")
    headers, body = stub.requests[0]
    assert body == {"model": "test-model", "messages": [{"role": "user", "content": "hello"}], "temperature": 0.0}
    assert headers["Authorization"] == f"Bearer {SECRET}"


def test_http_4xx_not_retried(caplog):
    with _Stub([400, 200]) as stub, caplog.at_level(logging.WARNING):
        with pytest.raises(BackendError) as info:
            _client(stub.url, []).complete("x")
    assert len(stub.requests) == 1
    assert SECRET not in str(info.value) and SECRET not in caplog.text


def test_http_retries_exhausted():
    sleeps = []
    with _Stub([503] * 10) as stub:
        with pytest.raises(BackendError):
            _client(stub.url, sleeps, max_retries=2).complete("x")
    assert len(stub.requests) == 3
    assert sleeps == [0.5, 1.0]


@pytest.mark.parametrize(
    "body",
    [b"not json", b"{}", b'{"choices": []}', b'{"choices": [{"message": {"content": 7}}]}'],
)
def test_http_malformed_body(body):
    with _Stub([200], body=body) as stub:
        with pytest.raises(BackendError):
            _client(stub.url, []).complete("x")


def test_http_unreachable():
    with _Stub([]) as stub:
        url = stub.url
    with pytest.raises(BackendError):
        _client(url, [], max_retries=0).complete("x")


def test_http_repr_hides_key():
    assert SECRET not in repr(HttpBackend("http://h/", "m", api_key=SECRET))


def test_api_key_from_env(monkeypatch):
    monkeypatch.setenv("EVOMEM_API_KEY", SECRET)
    with _Stub([200]) as stub:
        HttpBackend(stub.url, "m", timeout=5).complete("x")
    assert stub.requests[0][0]["Authorization"] == f"Bearer {SECRET}"
