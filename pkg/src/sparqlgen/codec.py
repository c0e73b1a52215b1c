"""Model input serialization and sentinel-marker encoding.

Builds the linearized input string `question [SEP] entities [SEP] relations`
and maps IRI prefixes / SPARQL keywords to reserved `<extra_id_k>` markers
and back.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from enum import Enum

SEP = "[SEP]"
MAX_SENTINELS = 100

_MARKER_RE = re.compile(r"<extra_id_(\d+)>")


class CapacityExceeded(ValueError):
    pass


class UnknownSentinel(KeyError):
    def __init__(self, sentinel_id: int):
        self.sentinel_id = sentinel_id
        super().__init__(f"sentinel id {sentinel_id} not in table")


class DanglingPrefix(ValueError):
    pass


class ItemKind(Enum):
    Entity = "entity"
    Relation = "relation"


@dataclass(frozen=True)
class LinkedItem:
    """A gold entity or relation: IRI surface form plus human-readable label.

    `label` may be empty only when the KG genuinely carries no label; it is
    never fabricated here.
    """

    iri: str
    label: str
    kind: ItemKind

    def __post_init__(self):
        if not self.iri:
            raise ValueError("LinkedItem.iri must be non-empty")


class Provenance(Enum):
    QuestionWord = "q"
    Sep = "sep"
    EntityIri = "e_iri"
    EntityLabel = "e_lab"
    RelationIri = "r_iri"
    RelationLabel = "r_lab"


@dataclass(frozen=True)
class SerializedInput:
    text: str
    provenance: tuple[Provenance, ...]

    def __post_init__(self):
        ntok = len(self.text.split())
        if ntok != len(self.provenance):
            raise ValueError(f"provenance length {len(self.provenance)} != token count {ntok}")
        if sum(1 for p in self.provenance if p is Provenance.Sep) != 2:
            raise ValueError("serialized input must contain exactly two [SEP] markers")

    @property
    def tokens(self) -> list[str]:
        return self.text.split()


def serialize_input(
    question: str,
    entities: list[LinkedItem],
    relations: list[LinkedItem],
    seed: int,
) -> SerializedInput:
    """Linearize question + gold items, shuffling entities among entities and
    relations among relations with a seeded RNG.  Pure in (question, entities,
    relations, seed)."""
    if not question.strip():
        raise ValueError("question must be non-empty")
    rng = random.Random(seed)
    ents = list(entities)
    rels = list(relations)
    rng.shuffle(ents)
    rng.shuffle(rels)

    parts: list[str] = []
    prov: list[Provenance] = []
    for w in question.split():
        parts.append(w)
        prov.append(Provenance.QuestionWord)
    parts.append(SEP)
    prov.append(Provenance.Sep)
    for item, iri_tag, lab_tag in [
        *((e, Provenance.EntityIri, Provenance.EntityLabel) for e in ents)
    ]:
        parts.append(item.iri)
        prov.append(iri_tag)
        for w in item.label.split():
            parts.append(w)
            prov.append(lab_tag)
    parts.append(SEP)
    prov.append(Provenance.Sep)
    for item in rels:
        parts.append(item.iri)
        prov.append(Provenance.RelationIri)
        for w in item.label.split():
            parts.append(w)
            prov.append(Provenance.RelationLabel)
    return SerializedInput(" ".join(parts), tuple(prov))


class SentinelTable:
    """Bijection between surface strings (IRI prefixes or SPARQL vocabulary
    items) and sentinel ids 0..99, rendered as ``<extra_id_k>``.

    A surface string ending in ':' or '/' is treated as a *prefix* entry:
    encoding splits the residual local part off after the marker and decoding
    re-joins the marker with the following token.  Anything else is a
    standalone keyword entry.
    """

    def __init__(self, entries: dict[str, int]):
        if len(entries) > MAX_SENTINELS:
            raise CapacityExceeded(f"{len(entries)} entries exceed the {MAX_SENTINELS} sentinel slots")
        ids = list(entries.values())
        if len(set(ids)) != len(ids):
            raise ValueError("sentinel ids must be distinct")
        if any(not (0 <= k < MAX_SENTINELS) for k in ids):
            raise ValueError("sentinel ids must lie in 0..99")
        if any(not s for s in entries):
            raise ValueError("empty surface string")
        self.entries = dict(entries)
        self._by_id = {k: s for s, k in entries.items()}
        # longest surface first: DBpedia namespaces nest (resource/ vs resource/Category:)
        self._prefix_keys = sorted(
            (s for s in entries if s.endswith((":", "/"))), key=len, reverse=True
        )
        self._keyword_keys = {s for s in entries if not s.endswith((":", "/"))}

    def __len__(self) -> int:
        return len(self.entries)

    @staticmethod
    def marker(k: int) -> str:
        return f"<extra_id_{k}>"

    def surface(self, k: int) -> str:
        try:
            return self._by_id[k]
        except KeyError:
            raise UnknownSentinel(k) from None

    @classmethod
    def from_tsv(cls, path) -> "SentinelTable":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                surface, _, k = line.partition("\t")
                entries[surface] = int(k)
        return cls(entries)

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for surface, k in self.entries.items():
                fh.write(f"{surface}\t{k}\n")


def build_sentinel_table(prefixes: list[str], vocab: list[str]) -> SentinelTable:
    """Assign ascending sentinel ids: sorted prefixes first, then sorted vocab."""
    if len(prefixes) + len(vocab) > MAX_SENTINELS:
        raise CapacityExceeded(
            f"{len(prefixes) + len(vocab)} entries exceed the {MAX_SENTINELS} sentinel slots"
        )
    entries: dict[str, int] = {}
    for s in sorted(prefixes) + sorted(vocab):
        if s not in entries:
            entries[s] = len(entries)
    return SentinelTable(entries)


def encode_sentinels(text: str, table: SentinelTable) -> str:
    """Replace prefix occurrences (longest match first) and vocabulary keywords
    with their sentinel markers.  Operates on whitespace tokens."""
    out: list[str] = []
    for tok in text.split():
        if tok in table._keyword_keys:
            out.append(table.marker(table.entries[tok]))
            continue
        replaced = False
        for key in table._prefix_keys:
            if tok.startswith(key) and len(tok) > len(key):
                out.append(table.marker(table.entries[key]))
                out.append(tok[len(key) :])
                replaced = True
                break
        if not replaced:
            out.append(tok)
    return " ".join(out)


def decode_sentinels(output: str, table: SentinelTable) -> str:
    """Resolve sentinel markers back to surface strings; prefix markers are
    concatenated with the immediately following token."""
    toks = output.split()
    out: list[str] = []
    i = 0
    while i < len(toks):
        m = _MARKER_RE.fullmatch(toks[i])
        if not m:
            out.append(toks[i])
            i += 1
            continue
        surface = table.surface(int(m.group(1)))
        if surface.endswith((":", "/")):
            if i + 1 >= len(toks):
                raise DanglingPrefix(f"prefix marker for {surface!r} ends the string")
            out.append(surface + toks[i + 1])
            i += 2
        else:
            out.append(surface)
            i += 1
    return " ".join(out)


def write_samples(path, samples: list[dict]) -> None:
    """Persist {id, input_text, target_text} records, one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in samples:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_samples(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
