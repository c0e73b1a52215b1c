"""SPARQL endpoint client: execution, response normalization, answer equality.

Speaks the SPARQL 1.1 Protocol over HTTP with JSON results, retries
transient failures with exponential backoff, and optionally caches raw
responses in an append-only JSONL file keyed by query hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from enum import Enum
from threading import Lock

import requests

log = logging.getLogger(__name__)

RESULTS_JSON = "application/sparql-results+json"


class QueryError(Exception):
    pass


class SyntaxRejected(QueryError):
    """Endpoint rejected the query with a 400-class status (malformed SPARQL)."""


class Timeout(QueryError):
    pass


class EndpointUnavailable(QueryError):
    pass


class ParseError(QueryError):
    pass


@dataclass
class EndpointConfig:
    url: str
    timeout_seconds: float = 30.0
    max_retries: int = 2
    max_concurrent: int = 8
    cache_path: str | None = None
    backoff_base: float = 0.5

    def __post_init__(self):
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")


class AnswerKind(Enum):
    Boolean = "boolean"
    Bindings = "bindings"
    Count = "count"
    Empty = "empty"


_NUMERIC_DATATYPES = {
    "http://www.w3.org/2001/XMLSchema#decimal",
    "http://www.w3.org/2001/XMLSchema#integer",
    "http://www.w3.org/2001/XMLSchema#int",
    "http://www.w3.org/2001/XMLSchema#long",
    "http://www.w3.org/2001/XMLSchema#float",
    "http://www.w3.org/2001/XMLSchema#double",
}


def _normalize_term(binding: dict) -> tuple[str, str]:
    """Map a results-format term to a comparable (tag, lexical) pair.

    IRI brackets are stripped; any literal whose lexical form parses as a
    number is canonicalized numerically, so 22.4, "22.4" and "22.40"^^decimal
    compare equal.
    """
    ttype = binding.get("type", "literal")
    value = str(binding.get("value", ""))
    if ttype in ("uri", "iri"):
        return ("uri", value.strip("<>"))
    if ttype == "bnode":
        return ("bnode", value)
    dt = binding.get("datatype", "")
    if dt in _NUMERIC_DATATYPES or dt == "":
        try:
            num = Decimal(value)
            return ("num", str(num.normalize()))
        except InvalidOperation:
            pass
    return ("lit", value)


@dataclass(frozen=True)
class AnswerSet:
    kind: AnswerKind
    boolean: bool | None = None
    rows: frozenset[frozenset[tuple[str, tuple[str, str]]]] = frozenset()
    count: int | None = None

    @classmethod
    def of_boolean(cls, value: bool) -> "AnswerSet":
        return cls(AnswerKind.Boolean, boolean=value)

    @classmethod
    def empty(cls) -> "AnswerSet":
        return cls(AnswerKind.Empty)

    @classmethod
    def of_count(cls, value: int) -> "AnswerSet":
        return cls(AnswerKind.Count, count=value)

    @classmethod
    def of_rows(cls, rows) -> "AnswerSet":
        fs = frozenset(frozenset(r.items()) if isinstance(r, dict) else frozenset(r) for r in rows)
        if not fs:
            return cls.empty()
        return cls(AnswerKind.Bindings, rows=fs)

    def elements(self) -> frozenset:
        """The comparable answer elements used for precision/recall."""
        if self.kind is AnswerKind.Boolean:
            return frozenset({("bool", self.boolean)})
        if self.kind is AnswerKind.Count:
            return frozenset({("count", self.count)})
        return self.rows

    def is_valid_response(self, is_ask: bool = False) -> bool:
        """Valid per the evaluation protocol: any boolean for ASK, non-empty
        bindings or a count for SELECT."""
        if self.kind is AnswerKind.Boolean:
            return True
        if self.kind is AnswerKind.Count:
            return True
        return self.kind is AnswerKind.Bindings and len(self.rows) > 0


def normalize_answers(raw: dict, count_query: bool = False) -> AnswerSet:
    """Normalize a parsed SPARQL JSON results document into an AnswerSet.

    Row order is discarded and duplicate rows collapse; numeric literals are
    canonicalized; variable names are preserved.
    """
    if not isinstance(raw, dict):
        raise ParseError(f"results document must be an object, got {type(raw).__name__}")
    if "boolean" in raw:
        return AnswerSet.of_boolean(bool(raw["boolean"]))
    try:
        bindings = raw["results"]["bindings"]
    except (KeyError, TypeError):
        raise ParseError("results document has neither 'boolean' nor 'results.bindings'")
    rows = []
    for b in bindings:
        rows.append(frozenset((var, _normalize_term(term)) for var, term in b.items()))
    if count_query and len(rows) == 1 and len(bindings[0]) == 1:
        (_, (tag, lex)), = next(iter(rows))
        if tag == "num":
            try:
                return AnswerSet.of_count(int(Decimal(lex)))
            except (InvalidOperation, ValueError):
                pass
    if not rows:
        return AnswerSet.empty()
    return AnswerSet.of_rows(rows)


def answers_equal(a: AnswerSet, b: AnswerSet) -> bool:
    """Identity of normalized content.  Empty is never equal to Boolean(false)."""
    if a.kind is not b.kind:
        return False
    if a.kind is AnswerKind.Boolean:
        return a.boolean == b.boolean
    if a.kind is AnswerKind.Count:
        return a.count == b.count
    return a.rows == b.rows


def _is_count_query(query: str) -> bool:
    return "COUNT" in query.upper().split("WHERE")[0] if "WHERE" in query.upper() else False


class SparqlClient:
    """Thread-safe client with retry, backoff and optional response cache.

    The cache stores raw response documents keyed by sha256 of the exact
    query string, so repeated executions issue at most one network request
    per distinct query.
    """

    def __init__(self, cfg: EndpointConfig):
        self.cfg = cfg
        self._session = requests.Session()
        self._cache: dict[str, dict] = {}
        self._cache_lock = Lock()
        self.requests_issued = 0
        if cfg.cache_path:
            self._load_cache()

    def _load_cache(self):
        try:
            with open(self.cfg.cache_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._cache[rec["hash"]] = rec["response"]
        except FileNotFoundError:
            pass

    def _cache_put(self, key: str, response: dict):
        with self._cache_lock:
            self._cache[key] = response
            if self.cfg.cache_path:
                with open(self.cfg.cache_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"hash": key, "response": response}) + "\n")

    def execute_raw(self, query: str) -> dict:
        key = hashlib.sha256(query.encode("utf-8")).hexdigest()
        if key in self._cache:
            return self._cache[key]
        last_exc: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                time.sleep(self.cfg.backoff_base * (2 ** (attempt - 1)))
            try:
                resp = self._session.get(
                    self.cfg.url,
                    params={"query": query},
                    headers={"Accept": RESULTS_JSON},
                    timeout=self.cfg.timeout_seconds,
                )
            except requests.exceptions.Timeout as e:
                last_exc = Timeout(str(e))
                continue
            except requests.exceptions.ConnectionError as e:
                last_exc = EndpointUnavailable(str(e))
                continue
            self.requests_issued += 1
            if 400 <= resp.status_code < 500:
                raise SyntaxRejected(f"endpoint returned {resp.status_code}: {resp.text[:200]}")
            if resp.status_code >= 500:
                last_exc = EndpointUnavailable(f"endpoint returned {resp.status_code}")
                continue
            try:
                doc = resp.json()
            except ValueError as e:
                raise ParseError(f"unparseable response body: {e}") from None
            self._cache_put(key, doc)
            return doc
        raise last_exc  # type: ignore[misc]

    def execute(self, query: str) -> AnswerSet:
        doc = self.execute_raw(query)
        return normalize_answers(doc, count_query=_is_count_query(query))


def execute(query: str, cfg: EndpointConfig) -> AnswerSet:
    return SparqlClient(cfg).execute(query)
