import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from topiclabel.corpus import bundled_path, load_topics
from topiclabel.gateway import BackendSpec
from topiclabel.runner import ExperimentConfig


@pytest.fixture(scope="session")
def topics104():
    return load_topics(bundled_path("topics_104.jsonl"))


@pytest.fixture(scope="session")
def table1():
    return load_topics(bundled_path("table1_topics.jsonl"))


@pytest.fixture
def mock_config(tmp_path):
    """Factory for small mock-backend configs writing into tmp_path."""

    def make(n_topics=2, iterations=2, kinds=("short", "long"), backends=None, seed=0,
             variants=3, parallel=1, run_dir=None, topics_file=None):
        if topics_file is None:
            src = load_topics(bundled_path("topics_104.jsonl"))
            topics_file = tmp_path / f"topics_{n_topics}.jsonl"
            with topics_file.open("w") as fh:
                for t in list(src)[:n_topics]:
                    fh.write(json.dumps(t.to_dict()) + "\n")
        if backends is None:
            backends = [BackendSpec("mockA", "mock", mock_variants=variants)]
        return ExperimentConfig(
            topics_path=str(topics_file),
            backends=list(backends),
            run_dir=str(run_dir or tmp_path / "run"),
            prompt_kinds=list(kinds),
            iterations=iterations,
            global_seed=seed,
            max_parallel_backends=parallel,
        )

    return make


def _letter_embedding(text):
    # deliberately unlike the hash embedder: 26 letter counts + length
    vec = [float(text.count(c)) for c in "abcdefghijklmnopqrstuvwxyz"]
    vec.append(len(text) / 10.0 + 0.1)
    return vec


class ScriptedServer:
    """Local HTTP server speaking the chat-completions and embeddings shapes.

    ``script`` is a list of actions consumed by successive chat requests
    (``"timeout"``, an int status code, or ``"ok"``); once exhausted every request
    succeeds. Successful chat responses are "recorded" answers derived from the
    keywords in the prompt.
    """

    def __init__(self, script=(), prompt_tokens=None, require_key=None, delay=0.5,
                 usage=True):
        self.script = list(script)
        self.prompt_tokens = prompt_tokens
        self.require_key = require_key
        self.delay = delay
        self.usage = usage
        self.requests = []
        self.lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with server.lock:
                    server.requests.append((self.path, body, dict(self.headers)))
                    action = server.script.pop(0) if server.script and self.path.endswith(
                        "/chat/completions") else "ok"
                if server.require_key and self.headers.get("Authorization") != f"Bearer {server.require_key}":
                    return self._send(401, {"error": "bad key"})
                if action == "timeout":
                    time.sleep(server.delay)
                    return self._send(200, {"late": True})
                if isinstance(action, int):
                    return self._send(action, {"error": "scripted"})
                if self.path.endswith("/embeddings"):
                    data = [{"index": i, "embedding": _letter_embedding(t)}
                            for i, t in enumerate(body["input"])]
                    return self._send(200, {"data": data, "model": body["model"]})
                prompt = body["messages"][0]["content"]
                payload = {"choices": [{"message": {"role": "assistant",
                                                    "content": server.answer(prompt, body["model"])}}]}
                if server.usage:
                    payload["usage"] = {
                        "prompt_tokens": server.prompt_tokens if server.prompt_tokens is not None
                        else len(prompt) // 4,
                        "completion_tokens": 0 if server.prompt_tokens is not None else 3,
                    }
                return self._send(200, payload)

            def _send(self, status, obj):
                data = json.dumps(obj).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                try:
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @staticmethod
    def answer(prompt, model):
        kws = re.search(r"keywords: (.*)\n", prompt).group(1).split(", ")
        if "a single word" in prompt:
            return f"topic: {kws[0].capitalize()}"
        n = 3 if "big" in model else 2
        return "Sure!\ntopic: <" + " ".join(k.capitalize() for k in kws[:n]) + ">"

    @property
    def url(self):
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"

    def chat_requests(self):
        return [r for r in self.requests if r[0].endswith("/chat/completions")]

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def fake_server():
    servers = []

    def start(**kwargs):
        s = ScriptedServer(**kwargs).__enter__()
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.__exit__(None, None, None)


_acceptance_results = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _acceptance_results.append((marker.args[0], rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
