"""Minimal HTTP/1.1 message model with byte-exact serialization.

Actors exchange these messages both over real sockets (see
:mod:`pncoauth.hosting`) and as raw bytes inside the simulator's channels,
so the simulator transports exactly what a server would see.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from http import HTTPStatus
from typing import Any, Callable, Mapping
from urllib.parse import parse_qsl, urlencode, urlsplit

from .canonical import canonical_encode


class HttpParseError(ValueError):
    pass


def _find(headers: list[tuple[str, str]], name: str) -> str | None:
    name = name.lower()
    for key, value in headers:
        if key.lower() == name:
            return value
    return None


def _head_and_body(data: bytes) -> tuple[list[str], bytes]:
    head, sep, body = data.partition(b"\r\n\r\n")
    if not sep:
        raise HttpParseError("missing end of headers")
    try:
        lines = head.decode("latin-1").split("\r\n")
    except UnicodeDecodeError:  # pragma: no cover - latin-1 never fails
        raise HttpParseError("undecodable header block") from None
    return lines, body


def _parse_headers(lines: list[str]) -> list[tuple[str, str]]:
    headers = []
    for line in lines:
        name, colon, value = line.partition(":")
        if not colon or not name or name != name.strip():
            raise HttpParseError(f"malformed header line {line!r}")
        headers.append((name, value.strip()))
    return headers


def _checked_body(headers: list[tuple[str, str]], body: bytes) -> bytes:
    length = _find(headers, "Content-Length")
    expected = int(length) if length is not None and length.isdigit() else 0
    if expected != len(body):
        raise HttpParseError(f"body length {len(body)} does not match Content-Length {expected}")
    return body


@dataclass
class HttpRequest:
    method: str
    target: str
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""

    @property
    def path(self) -> str:
        return urlsplit(self.target).path

    @property
    def query(self) -> dict[str, str]:
        return dict(parse_qsl(urlsplit(self.target).query, keep_blank_values=True))

    def header(self, name: str) -> str | None:
        return _find(self.headers, name)

    def form(self) -> dict[str, str]:
        try:
            pairs = parse_qsl(self.body.decode("utf-8"), keep_blank_values=True, strict_parsing=bool(self.body))
        except (UnicodeDecodeError, ValueError):
            raise HttpParseError("malformed form body") from None
        out: dict[str, str] = {}
        for key, value in pairs:
            if key in out:
                raise HttpParseError(f"repeated form parameter {key!r}")
            out[key] = value
        return out

    def json(self) -> Any:
        try:
            return json.loads(self.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise HttpParseError("malformed JSON body") from None

    def cookie(self, name: str) -> str | None:
        raw = self.header("Cookie")
        if not raw:
            return None
        for part in raw.split(";"):
            key, _, value = part.strip().partition("=")
            if key == name:
                return value
        return None

    def to_bytes(self) -> bytes:
        head = [f"{self.method} {self.target} HTTP/1.1"]
        head += [f"{k}: {v}" for k, v in self.headers if k.lower() != "content-length"]
        head.append(f"Content-Length: {len(self.body)}")
        return ("\r\n".join(head) + "\r\n\r\n").encode("latin-1") + self.body

    @classmethod
    def parse(cls, data: bytes) -> "HttpRequest":
        lines, body = _head_and_body(data)
        parts = lines[0].split(" ")
        if len(parts) != 3 or parts[2] != "HTTP/1.1":
            raise HttpParseError(f"malformed request line {lines[0]!r}")
        headers = _parse_headers(lines[1:])
        return cls(parts[0], parts[1], headers, _checked_body(headers, body))


@dataclass
class HttpResponse:
    status: int
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""

    def header(self, name: str) -> str | None:
        return _find(self.headers, name)

    def json(self) -> Any:
        try:
            return json.loads(self.body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise HttpParseError("malformed JSON body") from None

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def to_bytes(self) -> bytes:
        try:
            reason = HTTPStatus(self.status).phrase
        except ValueError:
            reason = "Unknown"
        head = [f"HTTP/1.1 {self.status} {reason}"]
        head += [f"{k}: {v}" for k, v in self.headers if k.lower() != "content-length"]
        head.append(f"Content-Length: {len(self.body)}")
        return ("\r\n".join(head) + "\r\n\r\n").encode("latin-1") + self.body

    @classmethod
    def parse(cls, data: bytes) -> "HttpResponse":
        lines, body = _head_and_body(data)
        parts = lines[0].split(" ", 2)
        if len(parts) < 2 or parts[0] != "HTTP/1.1" or not parts[1].isdigit():
            raise HttpParseError(f"malformed status line {lines[0]!r}")
        headers = _parse_headers(lines[1:])
        return cls(int(parts[1]), headers, _checked_body(headers, body))


def form_request(
    target: str,
    fields: Mapping[str, str],
    host: str = "",
    headers: list[tuple[str, str]] | None = None,
) -> HttpRequest:
    hdrs = [("Host", host)] if host else []
    hdrs.append(("Content-Type", "application/x-www-form-urlencoded"))
    hdrs.extend(headers or [])
    return HttpRequest("POST", target, hdrs, urlencode(list(fields.items())).encode("utf-8"))


def json_request(
    method: str,
    target: str,
    obj: Any = None,
    host: str = "",
    headers: list[tuple[str, str]] | None = None,
) -> HttpRequest:
    hdrs = [("Host", host)] if host else []
    body = b""
    if obj is not None:
        hdrs.append(("Content-Type", "application/json"))
        body = canonical_encode(obj)
    hdrs.extend(headers or [])
    return HttpRequest(method, target, hdrs, body)


def json_response(
    status: int, obj: Any, headers: list[tuple[str, str]] | None = None
) -> HttpResponse:
    hdrs = [("Content-Type", "application/json"), ("Cache-Control", "no-store")]
    hdrs.extend(headers or [])
    return HttpResponse(status, hdrs, canonical_encode(obj))


def host_of(base: str) -> str:
    return urlsplit(base).netloc


def path_of(base: str, path: str) -> str:
    prefix = urlsplit(base).path.rstrip("/")
    return prefix + path


class TransportError(Exception):
    """The peer could not be reached or its response was lost or unreadable."""


# (base URL, request) -> response; raises TransportError
Transport = Callable[[str, HttpRequest], HttpResponse]
