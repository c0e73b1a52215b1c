"""A local HTTP endpoint speaking the SPARQL protocol wire format, with
responses scripted per query string.  Used by client / eval / reranker tests."""

from __future__ import annotations

import json
import threading
import time
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse


def boolean_doc(value: bool) -> dict:
    return {"head": {}, "boolean": value}


def bindings_doc(rows: list[dict]) -> dict:
    """rows: list of {var: value} with plain string values, or {var: (type,
    value, datatype)} triples for full control."""
    bindings = []
    variables: set[str] = set()
    for row in rows:
        b = {}
        for var, val in row.items():
            variables.add(var)
            if isinstance(val, tuple):
                ttype, value, datatype = val
                term = {"type": ttype, "value": value}
                if datatype:
                    term["datatype"] = datatype
            elif isinstance(val, str) and val.startswith("http"):
                term = {"type": "uri", "value": val}
            else:
                term = {"type": "literal", "value": str(val)}
            b[var] = term
        bindings.append(b)
    return {"head": {"vars": sorted(variables)}, "results": {"bindings": bindings}}


EMPTY_DOC = {"head": {"vars": []}, "results": {"bindings": []}}


class FixtureEndpoint:
    """Scripted endpoint.  Script values per query string:

    - a dict: served as the JSON results document (status 200)
    - an int: served as that HTTP status with an empty body
    - a list: consumed one entry per request (for retry scenarios)
    - "slow": sleeps 5 s before answering (for timeout tests)

    Unknown queries get a 400 (the real-endpoint behaviour for queries the
    store cannot parse, and a safe default for typos in tests).
    """

    def __init__(self, responses: dict | None = None, default=400):
        self.responses = dict(responses or {})
        self.default = default
        self.hits: Counter[str] = Counter()
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _query(self) -> str:
                parsed = urlparse(self.path)
                qs = parse_qs(parsed.query)
                if "query" in qs:
                    return qs["query"][0]
                length = int(self.headers.get("Content-Length", 0))
                if length:
                    body = self.rfile.read(length).decode("utf-8")
                    return parse_qs(body).get("query", [""])[0]
                return ""

            def _respond(self, query: str):
                with outer._lock:
                    outer.hits[query] += 1
                    script = outer.responses.get(query, outer.default)
                    if isinstance(script, list):
                        script = script.pop(0) if script else outer.default
                if script == "slow":
                    time.sleep(5)
                    script = EMPTY_DOC
                if isinstance(script, int):
                    self.send_response(script)
                    self.end_headers()
                    return
                body = json.dumps(script).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/sparql-results+json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                self._respond(self._query())

            def do_POST(self):
                self._respond(self._query())

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/sparql"

    def set(self, query: str, script) -> None:
        with self._lock:
            self.responses[query] = script

    def __enter__(self) -> "FixtureEndpoint":
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
