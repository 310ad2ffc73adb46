"""XCAP-style document access to the core.

In-memory deployments call the core directly (:class:`DirectCoreClient`).
Over UDP the core also serves a minimal HTTP/1.1 subset on the same port
number (TCP), spoken by :class:`HttpCoreClient`::

    PUT    /xcap/<user>/presence/<tag>        body: XML fragment
    GET    /xcap/<user>/presence
    PUT    /xcap/<user>/contacts/<uri>        DELETE removes
    PUT    /xcap/<user>/lists/<name>          DELETE removes
    PUT    /xcap/<user>/lists/<name>/<uri>    DELETE removes
    GET    /xcap/<user>/contacts              JSON readback

``<user>`` is ``username@domain``.
"""

from __future__ import annotations

import http.client
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import quote, unquote

from .sip import SipUri

log = logging.getLogger(__name__)

_REASONS = {200: "OK", 400: "Bad Request", 404: "Not Found", 409: "Conflict"}


def _user_path(uri: SipUri | str) -> str:
    uri = SipUri.parse(uri)
    return quote(f"{uri.user}@{uri.domain}", safe="@")


class DirectCoreClient:
    def __init__(self, core):
        self.core = core

    def xcap_put(self, owner, tag: str, fragment: str) -> int:
        return self.core.xcap_put(owner, tag, fragment)

    def xcap_get(self, owner) -> tuple[int, str]:
        return self.core.xcap_get(owner)

    def contacts(self, verb: str, owner, *args) -> int:
        return self.core.contact_store(verb, owner, *args)

    def contact_book(self, owner) -> dict:
        book = self.core.contacts_of(owner)
        return {"contacts": [str(u) for u in book.contacts],
                "lists": {k: [str(u) for u in v] for k, v in book.lists.items()}}


class HttpCoreClient:
    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def _request(self, method: str, path: str, body: str | None = None) -> tuple[int, str]:
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            payload = body.encode("utf-8") if body is not None else None
            headers = {"Content-Type": "application/xml"} if payload is not None else {}
            conn.request(method, path, body=payload, headers=headers)
            resp = conn.getresponse()
            return resp.status, resp.read().decode("utf-8")
        finally:
            conn.close()

    def xcap_put(self, owner, tag: str, fragment: str) -> int:
        return self._request("PUT", f"/xcap/{_user_path(owner)}/presence/{quote(tag)}", fragment)[0]

    def xcap_get(self, owner) -> tuple[int, str]:
        return self._request("GET", f"/xcap/{_user_path(owner)}/presence")

    def contacts(self, verb: str, owner, *args) -> int:
        base = f"/xcap/{_user_path(owner)}"
        if verb in ("addContact", "removeContact"):
            path, method = f"{base}/contacts/{_user_path(args[0])}", verb[:3]
        elif verb in ("newContactList", "removeContactList"):
            path, method = f"{base}/lists/{quote(args[0], safe='')}", "new" if verb[0] == "n" else "rem"
        elif verb in ("add", "remove"):
            path = f"{base}/lists/{quote(args[1], safe='')}/{_user_path(args[0])}"
            method = verb[:3]
        else:
            raise ValueError(f"unknown contact verb {verb!r}")
        return self._request("DELETE" if method == "rem" else "PUT", path)[0]

    def contact_book(self, owner) -> dict:
        status, text = self._request("GET", f"/xcap/{_user_path(owner)}/contacts")
        return json.loads(text) if status == 200 else {}


class _XcapHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("xcap: " + fmt, *args)

    def _respond(self, status: int, body: str = "", content_type: str = "application/xml"):
        data = body.encode("utf-8")
        self.send_response(status, _REASONS.get(status))
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _parts(self) -> list[str]:
        parts = [unquote(p) for p in self.path.split("?", 1)[0].split("/") if p]
        if len(parts) < 3 or parts[0] != "xcap":
            return []
        return parts[1:]

    def _call(self, fn, *args):
        try:
            return self.server.core.call_threadsafe(fn, *args)
        except ValueError:
            return 400

    def do_GET(self):
        parts = self._parts()
        core = self.server.core
        if parts and parts[1] == "presence" and len(parts) == 2:
            status, text = self._call(core.xcap_get, parts[0])
            self._respond(status, text)
        elif parts and parts[1] == "contacts" and len(parts) == 2:
            book = self._call(lambda o: DirectCoreClient(core).contact_book(o), parts[0])
            self._respond(200, json.dumps(book), "application/json")
        else:
            self._respond(404)

    def do_PUT(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length).decode("utf-8") if length else ""
        self._mutate(body, remove=False)

    def do_DELETE(self):
        self._mutate("", remove=True)

    def _mutate(self, body: str, remove: bool):
        parts = self._parts()
        core = self.server.core
        if not parts:
            self._respond(404)
            return
        owner, kind, rest = parts[0], parts[1], parts[2:]
        if kind == "presence" and len(rest) == 1 and not remove:
            status = self._call(core.xcap_put, owner, rest[0], body)
        elif kind == "contacts" and len(rest) == 1:
            status = self._call(core.contact_store,
                                "removeContact" if remove else "addContact", owner, rest[0])
        elif kind == "lists" and len(rest) == 1:
            status = self._call(core.contact_store,
                                "removeContactList" if remove else "newContactList", owner, rest[0])
        elif kind == "lists" and len(rest) == 2:
            status = self._call(core.contact_store, "remove" if remove else "add",
                                owner, rest[1], rest[0])
        else:
            status = 404
        self._respond(status)


class XcapServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], core):
        super().__init__(address, _XcapHandler)
        self.core = core

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True, name="xcap")
        thread.start()
        return thread
