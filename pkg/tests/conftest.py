import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mriqa.volume_io import PhantomSpec, generate_phantom  # noqa: E402


class MockLLM:
    """Chat-completions endpoint whose replies come from a user-supplied function.

    ``responder(request_json) -> str | (status, body)``; a plain string becomes
    the assistant message content.
    """

    def __init__(self, responder):
        self.responder = responder
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                mock.requests.append(body)
                mock.headers.append(dict(self.headers))
                reply = mock.responder(body)
                if isinstance(reply, tuple):
                    status, payload = reply
                else:
                    status = 200
                    payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": reply}}]})
                data = payload.encode() if isinstance(payload, str) else payload
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1/chat/completions"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def mock_llm():
    servers = []

    def start(responder):
        srv = MockLLM(responder)
        servers.append(srv)
        return srv

    yield start
    for s in servers:
        s.close()


@pytest.fixture(scope="session")
def phantom():
    """Default 64^3 phantom: tissue 100, background sigma 5."""
    return generate_phantom(PhantomSpec(seed=3))


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(PhantomSpec(dims=(32, 32, 16), semi_axes=(10, 12, 6),
                                        background_noise_sigma=2.0, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance report

_CRITERIA: list[str] = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"{status} criterion {self.number}: {self.title}" + (f" ({detail})" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
