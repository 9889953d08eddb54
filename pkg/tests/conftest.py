import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from droidpilot.actions import Observation
from droidpilot.gateway import load_prompts
from droidpilot.simworld import bundled_world, load_world

PNG_BYTES = b"\x89PNG\r\n\x1a\n" + b"\x00" * 24


@pytest.fixture(scope="session")
def general_world():
    return load_world(bundled_world("general"))


@pytest.fixture(scope="session")
def shopping_world():
    return load_world(bundled_world("shopping"))


@pytest.fixture(scope="session")
def prompts():
    return load_prompts()


@pytest.fixture
def png_obs():
    return Observation(PNG_BYTES, "png", 1080, 1920, 0.0)


class StubServer:
    """Thread-hosted HTTP server replaying queued (status, body) responses"""

    def __init__(self):
        self.requests = []
        self.responses = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                stub.requests.append({
                    "path": self.path,
                    "headers": dict(self.headers),
                    "json": json.loads(body) if body else None,
                })
                status, payload = stub.responses.pop(0) if stub.responses else (500, {"error": "no response"})
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, format, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def queue(self, status: int, payload):
        self.responses.append((status, payload))


@pytest.fixture
def stub_server():
    stub = StubServer()
    stub.thread.start()
    yield stub
    stub.server.shutdown()
    stub.server.server_close()
