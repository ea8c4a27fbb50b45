import json
import logging
import threading
import time

import httpx
import pytest

from conftest import FIXTURES
from dicekit.gateway import (
    AuthError,
    BackendConfig,
    BackendError,
    ExhaustedRetries,
    Gateway,
    OpenAIChatBackend,
    PromptRecipe,
    ScriptExhausted,
    ScriptMiss,
    ScriptedMock,
    build_prompt,
    complete,
)

DEMOS = (("What is 1+1?", "1+1 equals 2. The answer is 2."), ("What is 2*3?", "2*3 is 6. The answer is 6."))


def _cfg(**kw):
    base = dict(model_name="m", base_url="http://fake/v1", backoff_base=0.0)
    base.update(kw)
    return BackendConfig(**base)


def _ok(contents):
    return httpx.Response(
        200,
        json={"choices": [{"index": i, "message": {"role": "assistant", "content": c}} for i, c in enumerate(contents)]},
    )


def _backend(handler):
    return OpenAIChatBackend(client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=lambda s: None)


# --- prompt assembly ---------------------------------------------------------


def test_zero_shot_freeform():
    msgs = build_prompt(PromptRecipe(system_text="Be brief."), "What is 3+4?")
    assert msgs == [
        {"role": "system", "content": "Be brief."},
        {"role": "user", "content": "What is 3+4?"},
    ]


def test_two_shot_analyze_matches_golden():
    recipe = PromptRecipe(system_text="Analyze, then answer in XML.", demonstrations=DEMOS, mode="slm-analyze")
    y_o = "Tom has 3 apples and buys 4 more, so 7.\nThe answer is 7."
    msgs = build_prompt(recipe, "Tom has 3 apples and buys 4. How many?", y_o)
    golden = json.loads((FIXTURES / "prompt_2shot_analyze.json").read_text(encoding="utf-8"))
    assert msgs == golden
    assert "Tom has 3 apples and buys 4. How many?" in msgs[-1]["content"]
    assert y_o in msgs[-1]["content"]
    assert build_prompt(recipe, "Tom has 3 apples and buys 4. How many?", y_o) == msgs


def test_hint_goes_into_user_turn():
    recipe = PromptRecipe(mode="slm-analyze", hint="7")
    user = build_prompt(recipe, "q", "y")[-1]["content"]
    assert user.endswith("Reference answer: 7")


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(hint="7"),
        dict(demonstrations=(("q", "a"),)),
        dict(mode="chatty"),
    ],
)
def test_recipe_invariants(kwargs):
    with pytest.raises(ValueError):
        PromptRecipe(**kwargs)


def test_analyze_needs_context():
    with pytest.raises(ValueError):
        build_prompt(PromptRecipe(mode="slm-analyze"), "q")


# --- scripted mock -----------------------------------------------------------


def test_mock_identity_and_exhaustion():
    cfg = _cfg(n_samples=2)
    recipe = PromptRecipe()
    mock = ScriptedMock()
    mock.register("m", build_prompt(recipe, "q"), ["A", "B"])
    assert complete(cfg, recipe, "q", backend=mock) == ["A", "B"]
    with pytest.raises(ScriptExhausted):
        complete(cfg, recipe, "q", backend=mock)
    mock.reset()
    assert complete(cfg, recipe, "q", backend=mock) == ["A", "B"]


def test_mock_miss_is_loud():
    with pytest.raises(ScriptMiss):
        complete(_cfg(), PromptRecipe(), "unscripted", backend=ScriptedMock())


def test_mock_fingerprint_includes_n():
    mock = ScriptedMock()
    mock.register("m", build_prompt(PromptRecipe(), "q"), ["A", "B"])
    with pytest.raises(ScriptMiss):
        Gateway(_cfg(), mock).complete(PromptRecipe(), "q", n=1)


def test_mock_script_file_round_trip(tmp_path):
    mock = ScriptedMock(delay_seconds=0.01, down_models=["x"])
    mock.register("m", build_prompt(PromptRecipe(), "q"), ["A"])
    p = tmp_path / "script.json"
    mock.save(p)
    again = ScriptedMock.load(p)
    assert again.script == mock.script and again.delay_seconds == 0.01 and again.down_models == {"x"}


def test_mock_script_accepts_readable_entries():
    msgs = build_prompt(PromptRecipe(), "q")
    mock = ScriptedMock.from_dict({"entries": [{"model": "m", "messages": msgs, "completions": ["A"]}]})
    assert Gateway(_cfg(), mock).chat(msgs) == ["A"]


def test_mock_down_model():
    mock = ScriptedMock(down_models=["m"])
    with pytest.raises(BackendError):
        Gateway(_cfg(), mock).complete(PromptRecipe(), "q")


# --- HTTP backend against a fake server --------------------------------------


def test_429_twice_then_success(caplog):
    statuses = iter([429, 429, 200])
    seen = []

    def handler(request):
        status = next(statuses)
        seen.append(status)
        return _ok(["done"]) if status == 200 else httpx.Response(status)

    backend = _backend(handler)
    with caplog.at_level(logging.WARNING, logger="dicekit.gateway"):
        out = Gateway(_cfg(), backend).complete(PromptRecipe(), "q")
    assert out == ["done"]
    assert seen == [429, 429, 200]
    assert backend.retry_count == 2
    retries = [r for r in caplog.records if r.getMessage() == "retrying request"]
    assert [r.attempt for r in retries] == [1, 2]


def test_backoff_is_exponential_and_capped():
    delays = []

    def handler(request):
        return httpx.Response(503)

    backend = OpenAIChatBackend(
        client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=delays.append
    )
    with pytest.raises(ExhaustedRetries) as err:
        backend.chat(_cfg(max_retries=4, backoff_base=1.0, backoff_max=5.0), [], 1)
    assert delays == [1.0, 2.0, 4.0, 5.0]
    assert err.value.last_status == 503 and err.value.attempts == 5


def test_timeouts_are_retried():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ReadTimeout("slow", request=request)
        return _ok(["x"])

    assert _backend(handler).chat(_cfg(), [], 1) == ["x"]
    assert len(calls) == 2


def test_missing_key_fails_before_any_request(monkeypatch):
    monkeypatch.delenv("DICEKIT_TEST_KEY", raising=False)
    calls = []

    def handler(request):
        calls.append(request)
        return _ok(["x"])

    with pytest.raises(AuthError):
        _backend(handler).chat(_cfg(api_key_env_var="DICEKIT_TEST_KEY"), [], 1)
    assert calls == []


def test_key_sent_as_bearer(monkeypatch):
    monkeypatch.setenv("DICEKIT_TEST_KEY", "sekret")
    got = {}

    def handler(request):
        got["auth"] = request.headers.get("authorization")
        got["body"] = json.loads(request.content)
        return _ok(["x"])

    _backend(handler).chat(_cfg(api_key_env_var="DICEKIT_TEST_KEY", temperature=0.3), [{"role": "user", "content": "q"}], 1, seed=9)
    assert got["auth"] == "Bearer sekret"
    assert got["body"]["temperature"] == 0.3 and got["body"]["seed"] == 9 and got["body"]["n"] == 1


def test_rejected_credentials():
    with pytest.raises(AuthError):
        _backend(lambda r: httpx.Response(401)).chat(_cfg(), [], 1)


def test_client_error_is_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    with pytest.raises(BackendError):
        _backend(handler).chat(_cfg(), [], 1)
    assert len(calls) == 1


def test_native_n_falls_back_to_sequential_calls():
    bodies = []

    def handler(request):
        body = json.loads(request.content)
        bodies.append(body["n"])
        return _ok([f"c{len(bodies)}"])  # this server ignores n

    out = _backend(handler).chat(_cfg(), [], 3)
    assert out == ["c1", "c2", "c3"]
    assert bodies == [3, 1, 1]


def test_native_n_honored():
    def handler(request):
        n = json.loads(request.content)["n"]
        return _ok([str(i) for i in range(n)])

    assert _backend(handler).chat(_cfg(), [], 4) == ["0", "1", "2", "3"]


def test_concurrency_limit_seen_by_server():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(request):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return _ok(["x"])

    cfg = _cfg(concurrency_limit=3)
    gw = Gateway(cfg, _backend(handler))
    # more workers than the limit, all hammering one gateway
    threads = [threading.Thread(target=lambda: [gw.complete(PromptRecipe(), "q") for _ in range(3)]) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert gw.n_calls == 24
    assert state["peak"] <= 3 and gw.max_in_flight <= 3
    assert state["peak"] == 3


def test_map_preserves_order():
    gw = Gateway(_cfg(concurrency_limit=4), ScriptedMock())
    assert gw.map(lambda x: x * x, list(range(20))) == [x * x for x in range(20)]


# --- real socket -------------------------------------------------------------


@pytest.fixture
def local_server():
    """A tiny OpenAI-compatible server on localhost that echoes the last number it sees."""
    import re
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            assert self.path == "/v1/chat/completions"
            user = body["messages"][-1]["content"]
            nums = re.findall(r"\d+", user)
            if user.startswith("Question:"):
                text = f"<response>\n<reasoning>copied</reasoning>\n<answer>{nums[-1]}</answer>\n</response>"
            else:
                text = f"The answer is {nums[-1] if nums else 0}."
            payload = {"choices": [{"index": i, "message": {"role": "assistant", "content": text}} for i in range(body["n"])]}
            data = json.dumps(payload).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1"
    server.shutdown()


def test_http_backend_over_real_socket(local_server):
    cfg = BackendConfig(model_name="local", base_url=local_server)
    out = complete(cfg, PromptRecipe(), "What is 40 + 2?", backend=OpenAIChatBackend())
    assert out == ["The answer is 2."]


def test_live_smoke_path_runs_against_local_server(local_server, monkeypatch):
    import test_acceptance

    monkeypatch.setenv("DICEKIT_LIVE_BASE_URL", local_server)
    monkeypatch.setenv("DICEKIT_LIVE_MODEL", "local")
    ok, detail = test_acceptance.criterion_9()
    assert ok, detail
    assert "f_acc=1.00" in detail
