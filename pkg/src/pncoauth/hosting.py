"""Running actors over real sockets: HTTP server adapter, client transport, timers."""

from __future__ import annotations

import http.client
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable
from urllib.parse import urlsplit

from .core.httpwire import HttpRequest, HttpResponse, TransportError

log = logging.getLogger(__name__)

Handler = Callable[[HttpRequest], HttpResponse]

MAX_BODY = 1 << 20


def parse_listen(addr: str) -> tuple[str, int]:
    """Accept ``host:port``, ``:port`` or a URL."""
    if "://" in addr:
        parts = urlsplit(addr)
        return parts.hostname or "127.0.0.1", parts.port or 80
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def make_server(handler: Handler, listen: str) -> ThreadingHTTPServer:
    class _Adapter(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _dispatch(self) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                self.send_error(413)
                return
            body = self.rfile.read(length) if length else b""
            request = HttpRequest(self.command, self.path, list(self.headers.items()), body)
            try:
                response = handler(request)
            except Exception:  # keep serving after a handler bug
                log.exception("handler failed for %s %s", self.command, self.path)
                response = HttpResponse(500, [("Content-Type", "application/json")], b'{"error":"server_error"}')
            self.send_response(response.status)
            for name, value in response.headers:
                if name.lower() != "content-length":
                    self.send_header(name, value)
            self.send_header("Content-Length", str(len(response.body)))
            self.end_headers()
            self.wfile.write(response.body)

        do_GET = _dispatch
        do_POST = _dispatch

        def log_message(self, fmt: str, *args: Any) -> None:
            log.info("%s %s", self.address_string(), fmt % args)

    return ThreadingHTTPServer(parse_listen(listen), _Adapter)


def serve(handler: Handler, listen: str) -> None:
    server = make_server(handler, listen)
    host, port = server.server_address[:2]
    log.info("listening on %s:%s", host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def http_transport(base: str, request: HttpRequest, timeout: float = 10.0) -> HttpResponse:
    """Send ``request`` to the server at ``base`` over a fresh connection."""
    parts = urlsplit(base)
    conn_cls = http.client.HTTPSConnection if parts.scheme == "https" else http.client.HTTPConnection
    conn = conn_cls(parts.hostname or "127.0.0.1", parts.port, timeout=timeout)
    try:
        headers = {k: v for k, v in request.headers if k.lower() not in ("content-length", "host")}
        conn.request(request.method, request.target, body=request.body or None, headers=headers)
        raw = conn.getresponse()
        return HttpResponse(raw.status, list(raw.getheaders()), raw.read())
    except (OSError, http.client.HTTPException) as exc:
        raise TransportError(f"{base}: {exc}") from None
    finally:
        conn.close()


def http_ble_link(ev_base: str) -> Callable[[bytes], bytes]:
    """Short-range link stand-in: frames go as opaque bodies to the vehicle's /ble endpoint."""

    def link(frame: bytes) -> bytes:
        request = HttpRequest("POST", "/ble", [("Content-Type", "application/octet-stream")], frame)
        response = http_transport(ev_base, request)
        if response.status != 200:
            raise TransportError(f"vehicle answered {response.status}")
        return response.body

    return link


class ThreadScheduler:
    """``call_later`` on wall-clock timers; jobs run under the actor's lock."""

    def __init__(self, lock: threading.RLock | None = None) -> None:
        self.lock = lock or threading.RLock()

    def call_later(self, delay: float, fn: Callable[[], None], label: str = "") -> None:
        def run() -> None:
            with self.lock:
                try:
                    fn()
                except Exception:
                    log.exception("scheduled job %s failed", label)

        timer = threading.Timer(delay, run)
        timer.daemon = True
        timer.start()


class FileJournal:
    """Append-only JSON Lines log of server decisions."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def __call__(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
