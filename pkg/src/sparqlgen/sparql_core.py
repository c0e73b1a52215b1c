"""SPARQL tokenizer, canonicalizer and structural inspector.

Covers the query shapes found in LC-QuAD 1.0 / 2.0 (ASK, SELECT,
SELECT COUNT, FILTER, OPTIONAL, UNION, ORDER BY / LIMIT / OFFSET),
not the full SPARQL 1.1 grammar.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Iterable

# Fixed vocabulary of SPARQL keywords the lexer recognises.  Gold-query
# keywords outside this set are surfaced as LexErrors at load time rather
# than silently passed through.
KEYWORDS = frozenset(
    {
        "SELECT", "ASK", "WHERE", "FILTER", "DISTINCT", "COUNT", "LIMIT",
        "ORDER", "BY", "ASC", "DESC", "OFFSET", "UNION", "OPTIONAL", "AS",
        # filter-expression functions seen in LC-QuAD 2.0 gold queries
        "CONTAINS", "STRSTARTS", "LCASE", "UCASE", "LANG", "YEAR", "MONTH",
        "DAY", "BOUND", "REGEX", "STR", "NOW", "ABS",
    }
)

PUNCT = ("{", "}", "(", ")", "!=", "<=", ">=", "=", "<", ">", ".", ",", ";", "*", "&&", "||")

#: Full surface vocabulary (keywords + punctuation) available to the codec
#: and the model's fixed output vocabulary.
SPARQL_VOCABULARY = tuple(sorted(KEYWORDS)) + PUNCT


class LexError(ValueError):
    def __init__(self, position: int, snippet: str = ""):
        self.position = position
        super().__init__(f"no token class matches input at position {position}: {snippet!r}")


class UnknownPrefix(KeyError):
    def __init__(self, prefix: str):
        self.prefix = prefix
        super().__init__(f"prefix {prefix!r} not in prefix table")


class MalformedQuery(ValueError):
    pass


class TokenKind(Enum):
    Keyword = "keyword"
    Variable = "variable"
    PrefixedName = "prefixed_name"
    FullIri = "full_iri"
    Literal = "literal"
    Punct = "punct"


@dataclass(frozen=True)
class SparqlToken:
    kind: TokenKind
    text: str

    def __str__(self) -> str:
        return self.text


_TOKEN_RES = [
    (TokenKind.FullIri, re.compile(r"<[^<>\s]+>")),
    (TokenKind.Literal, re.compile(r"""('[^']*'|"[^"]*")(@[A-Za-z\-]+|\^\^[^\s()]+)?""")),
    (TokenKind.Literal, re.compile(r"[+-]?\d+(\.\d+)?([eE][+-]?\d+)?(\^\^[^\s()]+)?")),
    (TokenKind.Variable, re.compile(r"\?[A-Za-z_][A-Za-z0-9_]*")),
    (TokenKind.PrefixedName, re.compile(r"[A-Za-z][A-Za-z0-9\-_]*:[A-Za-z0-9_\-.%]*")),
    (TokenKind.Keyword, re.compile(r"[A-Za-z][A-Za-z0-9_]*")),
]
_PUNCT_SORTED = sorted(PUNCT, key=len, reverse=True)


def tokenize_sparql(text: str) -> list[SparqlToken]:
    """Split a SPARQL query string into tokens.

    Keywords are uppercase-normalized.  Raises LexError on empty input or
    on characters that fit no token class (including bare words outside
    the keyword vocabulary).
    """
    if not text or not text.strip():
        raise LexError(0, text[:20])
    tokens: list[SparqlToken] = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        matched = False
        for kind, rx in _TOKEN_RES:
            m = rx.match(text, i)
            if not m:
                continue
            word = m.group(0)
            if kind is TokenKind.Keyword:
                if word.upper() not in KEYWORDS:
                    raise LexError(i, text[i : i + 20])
                word = word.upper()
            tokens.append(SparqlToken(kind, word))
            i = m.end()
            matched = True
            break
        if matched:
            continue
        for p in _PUNCT_SORTED:
            if text.startswith(p, i):
                tokens.append(SparqlToken(TokenKind.Punct, p))
                i += len(p)
                matched = True
                break
        if not matched:
            raise LexError(i, text[i : i + 20])
    return tokens


def detokenize(tokens: Iterable[SparqlToken]) -> str:
    return " ".join(t.text for t in tokens)


class PrefixTable:
    """Injective map from prefix strings (with trailing colon) to namespace IRIs."""

    def __init__(self, entries: dict[str, str]):
        if len(set(entries.values())) != len(entries):
            raise ValueError("prefix table namespaces must be distinct")
        for p in entries:
            if not p.endswith(":"):
                raise ValueError(f"prefix {p!r} must end with ':'")
        self.entries = dict(entries)
        # longest namespace first, so contraction prefers the most specific match
        self._by_namespace = sorted(entries.items(), key=lambda kv: -len(kv[1]))

    def __contains__(self, prefix: str) -> bool:
        return prefix in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def namespace(self, prefix: str) -> str:
        try:
            return self.entries[prefix]
        except KeyError:
            raise UnknownPrefix(prefix) from None

    def contract_iri(self, iri: str) -> str | None:
        """Return `prefix:local` for a bare IRI, or None if no namespace matches
        or the local part would not survive re-tokenization."""
        for prefix, ns in self._by_namespace:
            if iri.startswith(ns):
                local = iri[len(ns) :]
                if re.fullmatch(r"[A-Za-z0-9_\-.%]*", local):
                    return prefix + local
        return None

    @classmethod
    def from_tsv(cls, path) -> "PrefixTable":
        """Load from a two-column TSV `prefix<TAB>namespace`, '#' comments."""
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                prefix, _, ns = line.partition("\t")
                if not ns:
                    raise ValueError(f"bad prefix table line: {line!r}")
                entries[prefix.strip()] = ns.strip()
        return cls(entries)

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for prefix, ns in self.entries.items():
                fh.write(f"{prefix}\t{ns}\n")


def _load_bundled(name: str) -> PrefixTable:
    ref = resources.files("sparqlgen.data").joinpath(name)
    with resources.as_file(ref) as p:
        return PrefixTable.from_tsv(p)


def wikidata_prefixes() -> PrefixTable:
    return _load_bundled("wikidata_prefixes.tsv")


def dbpedia_prefixes() -> PrefixTable:
    return _load_bundled("dbpedia_prefixes.tsv")


class QueryForm(Enum):
    Ask = "ask"
    Select = "select"
    SelectCount = "select_count"


@dataclass(frozen=True)
class TriplePattern:
    subject: SparqlToken
    predicate: SparqlToken
    object: SparqlToken

    def terms(self) -> tuple[SparqlToken, SparqlToken, SparqlToken]:
        return (self.subject, self.predicate, self.object)


@dataclass(frozen=True)
class SyntaxIssue:
    code: str
    message: str


@dataclass(frozen=True)
class SparqlQuery:
    raw: str
    tokens: tuple[SparqlToken, ...]
    form: QueryForm | None
    triples: tuple[TriplePattern, ...]
    variables: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "SparqlQuery":
        tokens = tuple(tokenize_sparql(text))
        form = _query_form(tokens)
        triples, _ = _parse_structure(tokens)
        seen: dict[str, None] = {}
        for t in tokens:
            if t.kind is TokenKind.Variable:
                seen.setdefault(t.text)
        return cls(text, tokens, form, tuple(triples), tuple(seen))

    def detokenized(self) -> str:
        return detokenize(self.tokens)


def _query_form(tokens) -> QueryForm | None:
    for t in tokens:
        if t.kind is TokenKind.Keyword:
            if t.text == "ASK":
                return QueryForm.Ask
            if t.text == "SELECT":
                has_count = any(
                    u.kind is TokenKind.Keyword and u.text == "COUNT" for u in tokens
                )
                return QueryForm.SelectCount if has_count else QueryForm.Select
            return None
    return None


_TERM_KINDS = (TokenKind.Variable, TokenKind.PrefixedName, TokenKind.FullIri, TokenKind.Literal)


def _parse_structure(tokens) -> tuple[list[TriplePattern], list[SyntaxIssue]]:
    """Best-effort structural parse: returns triples in textual order plus issues."""
    issues: list[SyntaxIssue] = []
    triples: list[TriplePattern] = []
    toks = list(tokens)
    n = len(toks)

    form = _query_form(toks)
    if form is None:
        issues.append(SyntaxIssue("no_form", "no ASK/SELECT form keyword"))

    # find the outermost group
    try:
        start = next(i for i, t in enumerate(toks) if t.text == "{")
    except StopIteration:
        issues.append(SyntaxIssue("no_group", "no WHERE group found"))
        return triples, issues
    # WHERE is optional in the grammar (WhereClause ::= 'WHERE'? GroupGraphPattern);
    # only a SELECT head without it reads as malformed here
    if form in (QueryForm.Select, QueryForm.SelectCount) and not any(
        t.kind is TokenKind.Keyword and t.text == "WHERE" for t in toks[:start]
    ):
        issues.append(SyntaxIssue("no_where", "missing WHERE keyword"))
    if form is QueryForm.Select or form is QueryForm.SelectCount:
        head = toks[:start]
        if not any(t.kind is TokenKind.Variable for t in head) and not any(
            t.text == "*" for t in head
        ):
            issues.append(SyntaxIssue("no_projection", "SELECT without projection"))

    def skip_parens(i: int) -> int:
        # i points at '('; returns index just past the matching ')'
        depth = 0
        while i < n:
            if toks[i].text == "(":
                depth += 1
            elif toks[i].text == ")":
                depth -= 1
                if depth == 0:
                    return i + 1
            i += 1
        issues.append(SyntaxIssue("unbalanced_paren", "unbalanced parentheses"))
        return n

    def parse_group(i: int) -> int:
        # i points at '{'; returns index just past the matching '}'
        i += 1
        pending: list[SparqlToken] = []

        def flush():
            if not pending:
                return
            if len(pending) == 3:
                s, p, o = pending
                if p.kind is TokenKind.Literal:
                    issues.append(SyntaxIssue("literal_predicate", f"literal predicate {p.text!r}"))
                else:
                    triples.append(TriplePattern(s, p, o))
            else:
                issues.append(
                    SyntaxIssue("incomplete_triple", f"{len(pending)} terms where 3 expected")
                )
            pending.clear()

        while i < n:
            t = toks[i]
            if t.text == "}":
                flush()
                return i + 1
            if t.text == "{":
                flush()
                i = parse_group(i)
                continue
            if t.kind is TokenKind.Keyword and t.text == "FILTER":
                flush()
                i += 1
                if i < n and toks[i].text == "(":
                    i = skip_parens(i)
                else:
                    issues.append(SyntaxIssue("bad_filter", "FILTER without parenthesized expression"))
                continue
            if t.kind is TokenKind.Keyword and t.text == "OPTIONAL":
                flush()
                i += 1
                if i < n and toks[i].text == "{":
                    i = parse_group(i)
                else:
                    issues.append(SyntaxIssue("bad_optional", "OPTIONAL without group"))
                continue
            if t.kind is TokenKind.Keyword and t.text == "UNION":
                flush()
                i += 1
                if not (i < n and toks[i].text == "{"):
                    issues.append(SyntaxIssue("bad_union", "UNION without group"))
                continue
            if t.text == ".":
                flush()
                i += 1
                continue
            if t.kind in _TERM_KINDS:
                pending.append(t)
                if len(pending) > 3:
                    issues.append(SyntaxIssue("incomplete_triple", "run-on triple terms"))
                    pending.clear()
                i += 1
                continue
            issues.append(SyntaxIssue("unexpected_token", f"unexpected {t.text!r} in group"))
            i += 1
        flush()
        issues.append(SyntaxIssue("unbalanced_brace", "unbalanced braces"))
        return n

    i = parse_group(start)

    # solution modifiers after the group
    while i < n:
        t = toks[i]
        if t.kind is TokenKind.Keyword and t.text in ("LIMIT", "OFFSET"):
            if i + 1 < n and toks[i + 1].kind is TokenKind.Literal:
                i += 2
            else:
                issues.append(SyntaxIssue("bad_modifier", f"{t.text} without numeric argument"))
                i += 1
        elif t.kind is TokenKind.Keyword and t.text in ("ORDER", "BY", "ASC", "DESC"):
            i += 1
        elif t.text == "(":
            i = skip_parens(i)
        elif t.kind is TokenKind.Variable:
            i += 1
        else:
            issues.append(SyntaxIssue("trailing_tokens", f"unexpected trailing {t.text!r}"))
            i += 1

    return triples, issues


def validate_syntax(tokens: Iterable[SparqlToken]) -> list[SyntaxIssue]:
    """Return [] iff tokens form a structurally complete query."""
    _, issues = _parse_structure(list(tokens))
    return issues


def extract_triples(query: SparqlQuery) -> list[TriplePattern]:
    triples, issues = _parse_structure(query.tokens)
    if issues:
        raise MalformedQuery("; ".join(i.message for i in issues))
    return triples


def canonicalize(query: SparqlQuery) -> SparqlQuery:
    """Whitespace-normalize and rename variables ?var0, ?var1, ... in
    first-occurrence order.  Idempotent and alpha-invariant."""
    mapping: dict[str, str] = {}
    out: list[SparqlToken] = []
    for t in query.tokens:
        if t.kind is TokenKind.Variable:
            if t.text not in mapping:
                mapping[t.text] = f"?var{len(mapping)}"
            out.append(SparqlToken(TokenKind.Variable, mapping[t.text]))
        else:
            out.append(t)
    return SparqlQuery.parse(detokenize(out))


def expand_prefixes(query: SparqlQuery, table: PrefixTable) -> SparqlQuery:
    """Replace every PrefixedName token with the corresponding FullIri token."""
    out = []
    for t in query.tokens:
        if t.kind is TokenKind.PrefixedName:
            prefix, _, local = t.text.partition(":")
            ns = table.namespace(prefix + ":")
            out.append(SparqlToken(TokenKind.FullIri, f"<{ns}{local}>"))
        else:
            out.append(t)
    return SparqlQuery.parse(detokenize(out))


def contract_prefixes(query: SparqlQuery, table: PrefixTable) -> SparqlQuery:
    """Inverse of expand_prefixes where a namespace in the table matches."""
    out = []
    for t in query.tokens:
        if t.kind is TokenKind.FullIri:
            contracted = table.contract_iri(t.text[1:-1])
            if contracted is not None:
                out.append(SparqlToken(TokenKind.PrefixedName, contracted))
                continue
        out.append(t)
    return SparqlQuery.parse(detokenize(out))
