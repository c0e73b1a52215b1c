"""Execution-based evaluation: first-valid-beam selection, macro answer-F1,
test-set filtration, copy-required detection and the error taxonomy."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import Enum

from .codec import LinkedItem
from .kg_client import AnswerSet, SparqlClient, QueryError, EndpointUnavailable, answers_equal
from .sparql_core import (
    SparqlQuery,
    TokenKind,
    LexError,
    canonicalize,
    validate_syntax,
)

log = logging.getLogger(__name__)


class ErrorCategory(Enum):
    TripleFlip = "triple_flip"
    WrongVar = "wrong_var"
    WrongIntent = "wrong_intent"
    CopyError = "copy_error"
    CopyMorph = "copy_morph"
    SyntaxError = "syntax_error"
    Other = "other"


@dataclass
class EvalRecord:
    question_id: str
    gold_query: str
    beams: list[str]
    chosen_rank: int | None = None
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    match: bool = False
    category: str | None = None


@dataclass
class EvalMetrics:
    f1: float
    precision: float
    recall: float
    exact_match: float
    records: list[EvalRecord] = field(repr=False, default_factory=list)


def _prf(gold: AnswerSet, system: AnswerSet) -> tuple[float, float, float]:
    g, s = gold.elements(), system.elements()
    if not g and not s:
        return 1.0, 1.0, 1.0
    if not g or not s:
        return 0.0, 0.0, 0.0
    inter = len(g & s)
    p = inter / len(s)
    r = inter / len(g)
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def evaluate(
    beams_by_question: dict[str, list[str]],
    gold_by_question: dict[str, str],
    client: SparqlClient,
    out_path=None,
) -> EvalMetrics:
    """Per question: execute beams in rank order, take the first valid
    response as the system output, then score answer-level precision/recall/F1
    against the gold query's answers (macro-averaged; boolean answers score
    exact-match 1/0).  Questions with no valid beam score 0."""
    records: list[EvalRecord] = []
    for qid, gold_query in gold_by_question.items():
        beams = beams_by_question.get(qid, [])
        rec = EvalRecord(qid, gold_query, beams)
        try:
            gold_answers = client.execute(gold_query)
        except EndpointUnavailable:
            _persist(records, out_path)
            raise
        except QueryError as e:
            log.warning("gold query for %s failed: %s", qid, e)
            records.append(rec)
            continue
        for rank, query in enumerate(beams):
            try:
                answers = client.execute(query)
            except EndpointUnavailable:
                _persist(records, out_path)
                raise
            except QueryError:
                continue
            if not answers.is_valid_response():
                continue
            rec.chosen_rank = rank
            rec.precision, rec.recall, rec.f1 = _prf(gold_answers, answers)
            rec.match = answers_equal(answers, gold_answers)
            break
        records.append(rec)
    n = max(len(records), 1)
    metrics = EvalMetrics(
        f1=sum(r.f1 for r in records) / n,
        precision=sum(r.precision for r in records) / n,
        recall=sum(r.recall for r in records) / n,
        exact_match=sum(1 for r in records if r.match) / n,
        records=records,
    )
    _persist(records, out_path, summary=metrics)
    return metrics


def _persist(records, out_path, summary: EvalMetrics | None = None):
    if not out_path:
        return
    with open(out_path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "id": r.question_id,
                        "chosen_rank": r.chosen_rank,
                        "f1": r.f1,
                        "match": r.match,
                        "category": r.category,
                    }
                )
                + "\n"
            )
        if summary is not None:
            fh.write(
                json.dumps(
                    {
                        "summary": True,
                        "macro_f1": summary.f1,
                        "precision": summary.precision,
                        "recall": summary.recall,
                        "exact_match": summary.exact_match,
                    }
                )
                + "\n"
            )


def filter_answerable(records, client: SparqlClient, kept_ids_path=None) -> list:
    """Keep questions whose gold query yields a valid response; endpoint
    errors exclude the question and are logged."""
    kept = []
    for rec in records:
        try:
            answers = client.execute(rec.gold_sparql)
        except EndpointUnavailable:
            raise
        except QueryError as e:
            log.warning("excluding %s: %s", rec.id, e)
            continue
        if answers.is_valid_response():
            kept.append(rec)
    if kept_ids_path:
        with open(kept_ids_path, "w", encoding="utf-8") as fh:
            for rec in kept:
                fh.write(f"{rec.id}\n")
    log.info("filtered %d questions down to %d answerable", len(list(records)), len(kept))
    return kept


# --- copy-required detection -----------------------------------------------


def _literal_lexical(text: str) -> str:
    # strip quotes and datatype/lang suffix from a literal token
    body = text
    for suffix_sep in ("^^", "@"):
        if body.startswith(("'", '"')) and suffix_sep in body[1:]:
            close = body.rfind(body[0])
            if close > 0:
                body = body[: close + 1]
                break
    if body and body[0] in "'\"" and len(body) >= 2 and body[-1] == body[0]:
        body = body[1:-1]
    return body


def _numeric_or_none(text: str):
    try:
        return Decimal(text)
    except InvalidOperation:
        return None


def copy_required(question: str, gold: SparqlQuery) -> bool:
    """True iff the gold query contains a literal whose lexical form appears
    verbatim in the question (case-insensitive; numerics compared after
    canonicalization, so 22.40 in the query matches 22.4 in the text)."""
    q_tokens = [w.strip("\"'?,.!;:()") for w in question.split()]
    q_lower = {t.lower() for t in q_tokens if t}
    q_nums = {n for n in (_numeric_or_none(t) for t in q_tokens) if n is not None}
    q_text_lower = question.lower()
    for t in gold.tokens:
        if t.kind is not TokenKind.Literal:
            continue
        lex = _literal_lexical(t.text)
        if not lex:
            continue
        num = _numeric_or_none(lex)
        if num is not None:
            if num in q_nums:
                return True
            continue
        if lex.lower() in q_lower or (len(lex.split()) > 1 and lex.lower() in q_text_lower):
            return True
    return False


def copy_required_fraction(records) -> float:
    hits = 0
    total = 0
    for rec in records:
        try:
            gold = SparqlQuery.parse(rec.gold_sparql)
        except LexError:
            continue
        total += 1
        if copy_required(rec.question, gold):
            hits += 1
    return hits / max(total, 1)


# --- error taxonomy ----------------------------------------------------------

# threshold chosen so the canonical morph confusions (Barack-Obama vs
# Barack_Obama: 1 edit; Artist vs artist: 1; notableWork vs notabilityWork: 4)
# all qualify while genuinely different identifiers stay out of range
COPY_MORPH_MAX_EDITS = 4


def _edit_distance(a: str, b: str) -> int:
    if abs(len(a) - len(b)) > COPY_MORPH_MAX_EDITS:
        return COPY_MORPH_MAX_EDITS + 1
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _iri_tokens(query: SparqlQuery) -> set[str]:
    return {
        t.text
        for t in query.tokens
        if t.kind in (TokenKind.PrefixedName, TokenKind.FullIri)
    }


def _local_part(iri_text: str) -> str:
    s = iri_text.strip("<>")
    for sep in ("/", "#", ":"):
        idx = s.rfind(sep)
        if idx >= 0:
            s = s[idx + 1 :]
            break
    return s


def _literals(query: SparqlQuery) -> list[str]:
    return [_literal_lexical(t.text) for t in query.tokens if t.kind is TokenKind.Literal]


def _var_permutation_equal(gold: SparqlQuery, pred: SparqlQuery) -> bool:
    """True iff the token streams are equal under a variable bijection that
    is not the identity."""
    if len(gold.tokens) != len(pred.tokens):
        return False
    fwd: dict[str, str] = {}
    bwd: dict[str, str] = {}
    for g, p in zip(gold.tokens, pred.tokens):
        if g.kind is TokenKind.Variable and p.kind is TokenKind.Variable:
            if fwd.setdefault(p.text, g.text) != g.text:
                return False
            if bwd.setdefault(g.text, p.text) != p.text:
                return False
        elif g.text != p.text or g.kind is not p.kind:
            return False
    return any(k != v for k, v in fwd.items())


def _triple_key(tp) -> tuple[str, str, str]:
    return tuple(t.text for t in tp.terms())


def categorize_error(
    gold: SparqlQuery,
    pred_text: str,
    linked: list[LinkedItem],
    question: str,
) -> ErrorCategory:
    """Assign exactly one category per mismatching pair, first match in the
    fixed precedence order: syntax, intent, copy morph, copy error, triple
    flip, wrong variable, other."""
    try:
        pred = SparqlQuery.parse(pred_text)
    except LexError:
        return ErrorCategory.SyntaxError
    if validate_syntax(pred.tokens):
        return ErrorCategory.SyntaxError

    # keep the raw streams: canonicalization renames variables by first
    # occurrence, which collapses any variable permutation to the identity and
    # would make the WrongVar check below unsatisfiable
    gold_raw, pred_raw = gold, pred
    gold = canonicalize(gold)
    pred = canonicalize(pred)

    if pred.form is not gold.form:
        return ErrorCategory.WrongIntent

    known = _iri_tokens(gold) | {it.iri for it in linked}
    known_locals = {_local_part(i) for i in known}
    for iri in _iri_tokens(pred) - known:
        local = _local_part(iri)
        if local in known_locals:
            continue
        for ref in known_locals:
            d = _edit_distance(local, ref)
            if 0 < d <= COPY_MORPH_MAX_EDITS:
                return ErrorCategory.CopyMorph

    gold_lits = _literals(gold)
    pred_lits = _literals(pred)
    question_sourced = [l for l in gold_lits if copy_required(question, gold)]
    if question_sourced and sorted(gold_lits) != sorted(pred_lits):
        return ErrorCategory.CopyError

    gold_triples = {_triple_key(tp) for tp in gold.triples}
    pred_triples = {_triple_key(tp) for tp in pred.triples}
    for s, p, o in gold_triples:
        if (s, p, o) not in pred_triples and (o, p, s) in pred_triples:
            return ErrorCategory.TripleFlip

    if _var_permutation_equal(gold_raw, pred_raw):
        return ErrorCategory.WrongVar

    return ErrorCategory.Other
