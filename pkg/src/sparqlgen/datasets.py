"""LC-QuAD 1.0 / 2.0 loading, gold link extraction, label fetching, splits,
and emission of training-ready serialized samples."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from enum import Enum

from .codec import ItemKind, LinkedItem, serialize_input
from .kg_client import SparqlClient, QueryError, EndpointUnavailable
from .sparql_core import (
    LexError,
    PrefixTable,
    SparqlQuery,
    SparqlToken,
    TokenKind,
    canonicalize,
    validate_syntax,
)

log = logging.getLogger(__name__)

LCQUAD1_OFFICIAL_COUNT = 3253
LCQUAD2_TRAIN_COUNT = 24180
LCQUAD2_TEST_COUNT = 6046


class KnowledgeGraph(Enum):
    DBpedia = "dbpedia"
    Wikidata = "wikidata"


class SchemaError(ValueError):
    pass


@dataclass
class QuestionRecord:
    id: str
    question: str
    gold_sparql: str
    kg: KnowledgeGraph
    entities: list[LinkedItem] = field(default_factory=list)
    relations: list[LinkedItem] = field(default_factory=list)


_ENTITY_NAMESPACES = (
    "http://dbpedia.org/resource/",
    "http://www.wikidata.org/entity/",
)
_RELATION_NAMESPACES = (
    "http://dbpedia.org/ontology/",
    "http://dbpedia.org/property/",
    "http://www.wikidata.org/prop/",
)
_ENTITY_PREFIXES = ("wd:", "dbr:", "dbc:")
_RELATION_PREFIXES = ("wdt:", "p:", "ps:", "pq:", "psv:", "pqv:", "pr:", "dbo:", "dbp:")


def _normalize_iri_surface(token: SparqlToken) -> str:
    """Surface form used in model inputs/targets: bare IRI without angle
    brackets for FullIri tokens, the prefixed name otherwise."""
    if token.kind is TokenKind.FullIri:
        return token.text[1:-1]
    return token.text


def _classify_iri(surface: str) -> ItemKind | None:
    if surface.startswith(_ENTITY_NAMESPACES) or surface.startswith(_ENTITY_PREFIXES):
        return ItemKind.Entity
    if surface.startswith(_RELATION_NAMESPACES) or surface.startswith(_RELATION_PREFIXES):
        return ItemKind.Relation
    return None


def extract_gold_links(gold: SparqlQuery, kg: KnowledgeGraph) -> tuple[list[LinkedItem], list[LinkedItem]]:
    """Derive gold entity and relation links from the gold query itself.
    IRIs in unknown namespaces are classified by triple position (predicate
    slot -> relation) with a warning.  Deduplicated, order preserved."""
    predicate_surfaces = {
        _normalize_iri_surface(tp.predicate)
        for tp in gold.triples
        if tp.predicate.kind in (TokenKind.PrefixedName, TokenKind.FullIri)
    }
    entities: dict[str, None] = {}
    relations: dict[str, None] = {}
    for t in gold.tokens:
        if t.kind not in (TokenKind.PrefixedName, TokenKind.FullIri):
            continue
        surface = _normalize_iri_surface(t)
        kind = _classify_iri(surface)
        if kind is None:
            if surface.startswith(("rdf:", "rdfs:", "xsd:", "http://www.w3.org/")):
                continue  # schema vocabulary, neither entity nor relation
            kind = ItemKind.Relation if surface in predicate_surfaces else ItemKind.Entity
            log.warning("unknown namespace for %s; classified as %s by triple position", surface, kind.value)
        (entities if kind is ItemKind.Entity else relations).setdefault(surface)
    mk = lambda d, kind: [LinkedItem(iri, "", kind) for iri in d]
    return mk(entities, ItemKind.Entity), mk(relations, ItemKind.Relation)


def _check_gold(raw_query: str, rec_id) -> str | None:
    """Tokenize/validate a gold query; returns a whitespace-normalized form
    or None (with warning) when it falls outside the supported query shapes."""
    try:
        q = SparqlQuery.parse(raw_query)
    except LexError as e:
        log.warning("record %s: gold query outside lexer vocabulary (%s)", rec_id, e)
        return None
    issues = validate_syntax(q.tokens)
    if issues:
        log.warning("record %s: gold query failed validation: %s", rec_id, issues[0].message)
        return None
    return q.detokenized()


def load_lcquad1(
    path,
    question_field: str = "corrected_question",
    expected_count: int | None = None,
) -> list[QuestionRecord]:
    """Load an LC-QuAD 1.0 JSON file (list of records with _id,
    corrected_question / intermediary_question, sparql_query)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list) or not data:
        raise SchemaError(f"{path}: expected a non-empty JSON array")
    records = []
    for raw in data:
        qid = str(raw.get("_id") or raw.get("id") or len(records))
        question = raw.get(question_field) or raw.get("corrected_question")
        sparql = raw.get("sparql_query") or raw.get("query")
        if not question or not sparql:
            log.warning("record %s: missing question or query; skipped", qid)
            continue
        norm = _check_gold(sparql, qid)
        if norm is None:
            continue
        records.append(QuestionRecord(qid, question, norm, KnowledgeGraph.DBpedia))
    log.info("loaded %d LC-QuAD 1.0 records from %s", len(records), path)
    if expected_count is not None and len(records) != expected_count:
        raise SchemaError(f"{path}: expected {expected_count} records, loaded {len(records)}")
    return records


def load_lcquad2(path, expected_count: int | None = None) -> list[QuestionRecord]:
    """Load an LC-QuAD 2.0 JSON file (list of records with uid, question,
    sparql_wikidata).  Records with missing question text are skipped with
    a warning."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list) or not data:
        raise SchemaError(f"{path}: expected a non-empty JSON array")
    records = []
    skipped = 0
    for raw in data:
        qid = str(raw.get("uid") if raw.get("uid") is not None else raw.get("id", len(records)))
        question = raw.get("question") or raw.get("NNQT_question")
        sparql = raw.get("sparql_wikidata") or raw.get("query")
        if not question or not str(question).strip() or not sparql:
            skipped += 1
            log.warning("record %s: missing question text; skipped", qid)
            continue
        norm = _check_gold(sparql, qid)
        if norm is None:
            skipped += 1
            continue
        records.append(QuestionRecord(qid, str(question), norm, KnowledgeGraph.Wikidata))
    log.info("loaded %d LC-QuAD 2.0 records from %s (%d skipped)", len(records), path, skipped)
    if expected_count is not None and len(records) + skipped != expected_count:
        raise SchemaError(
            f"{path}: expected {expected_count} records, found {len(records) + skipped}"
        )
    return records


def populate_links(records: list[QuestionRecord]) -> None:
    for rec in records:
        gold = SparqlQuery.parse(rec.gold_sparql)
        rec.entities, rec.relations = extract_gold_links(gold, rec.kg)


def local_part_label(iri: str) -> str:
    s = iri.strip("<>")
    for sep in ("/", "#", ":"):
        idx = s.rfind(sep)
        if idx >= 0:
            s = s[idx + 1 :]
            break
    return s.replace("_", " ")


def fetch_labels(
    iris: list[str],
    client: SparqlClient | None,
    cache_path=None,
    prefix_table: PrefixTable | None = None,
) -> tuple[dict[str, str], set[str]]:
    """Fetch English rdfs:label per IRI, consulting/updating a TSV cache.
    Missing labels fall back to the IRI local part (underscores -> spaces)
    and are returned in the flagged set."""
    cache: dict[str, str] = {}
    if cache_path:
        try:
            with open(cache_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        iri, _, label = line.rstrip("\n").partition("\t")
                        cache[iri] = label
        except FileNotFoundError:
            pass
    labels: dict[str, str] = {}
    flagged: set[str] = set()
    new_entries = []
    for iri in iris:
        if iri in cache:
            labels[iri] = cache[iri]
            continue
        label = None
        if client is not None:
            full = iri
            if prefix_table is not None and not iri.startswith("http"):
                prefix, _, local = iri.partition(":")
                if prefix + ":" in prefix_table:
                    full = prefix_table.namespace(prefix + ":") + local
            query = (
                f"SELECT ?label WHERE {{ <{full}> "
                f"<http://www.w3.org/2000/01/rdf-schema#label> ?label "
                f'FILTER ( LANG ( ?label ) = "en" ) }} LIMIT 1'
            )
            try:
                answers = client.execute(query)
                for row in answers.rows:
                    for var, (tag, lex) in row:
                        label = lex
                        break
                    break
            except EndpointUnavailable:
                raise
            except QueryError as e:
                log.warning("label fetch for %s failed: %s", iri, e)
        if not label:
            label = local_part_label(iri)
            flagged.add(iri)
        labels[iri] = label
        new_entries.append((iri, label))
    if cache_path and new_entries:
        with open(cache_path, "a", encoding="utf-8") as fh:
            for iri, label in new_entries:
                fh.write(f"{iri}\t{label}\n")
    return labels, flagged


@dataclass
class SplitPlan:
    fold_count: int = 5
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    folds: list[dict] = field(default_factory=list)


def make_splits(records: list[QuestionRecord], plan: SplitPlan | None = None) -> SplitPlan:
    """Materialize k-fold 70:10:20 splits.  Deterministic given seed; test
    sets rotate so they are disjoint across folds."""
    plan = plan or SplitPlan()
    ids = [r.id for r in records]
    rng = random.Random(plan.seed)
    rng.shuffle(ids)
    n = len(ids)
    test_size = round(n * plan.ratios[2])
    dev_size = round(n * plan.ratios[1])
    plan.folds = []
    for f in range(plan.fold_count):
        rotated = ids[f * test_size :] + ids[: f * test_size]
        test = rotated[:test_size]
        dev = rotated[test_size : test_size + dev_size]
        train = rotated[test_size + dev_size :]
        plan.folds.append({"train_ids": train, "dev_ids": dev, "test_ids": test})
    return plan


def normalize_target(gold: SparqlQuery) -> list[str]:
    """Target token sequence for the model: canonical variables, keywords
    uppercased, full IRIs rendered bare (matching the serialized input's
    entity/relation surfaces) so every IRI is copyable from the input."""
    canon = canonicalize(gold)
    out = []
    for t in canon.tokens:
        if t.kind is TokenKind.FullIri:
            out.append(t.text[1:-1])
        else:
            out.append(t.text)
    return out


def emit_samples(
    records: list[QuestionRecord],
    labels: dict[str, str],
    seed: int = 0,
) -> tuple[list[dict], list[tuple[str, str]]]:
    """Produce {id, input_text, target_text} samples.  Returns (samples,
    uncoverable) where uncoverable lists (record id, token) pairs whose target
    token is neither SPARQL vocabulary nor present in the input."""
    from .pgn import ExtendedVocab, default_fixed_vocabulary

    ext = ExtendedVocab(default_fixed_vocabulary())
    samples = []
    uncoverable: list[tuple[str, str]] = []
    for rec in records:
        ents = [
            LinkedItem(e.iri, labels.get(e.iri, local_part_label(e.iri)), ItemKind.Entity)
            for e in rec.entities
        ]
        rels = [
            LinkedItem(r.iri, labels.get(r.iri, local_part_label(r.iri)), ItemKind.Relation)
            for r in rec.relations
        ]
        # per-record shuffle seed must be stable across processes
        rec_seed = seed + int(hashlib.sha256(rec.id.encode("utf-8")).hexdigest(), 16) % 100000
        si = serialize_input(rec.question, ents, rels, seed=rec_seed)
        target = normalize_target(SparqlQuery.parse(rec.gold_sparql))
        for tok in target:
            if tok not in ext.fixed_index and tok not in si.tokens:
                uncoverable.append((rec.id, tok))
        samples.append({"id": rec.id, "input_text": si.text, "target_text": " ".join(target)})
    return samples, uncoverable
