"""Embedding stores and input-matrix assembly.

Ingests precomputed contextual (768-d) and KG (200-d, TransE-style) vectors
and stacks them into per-token 968-d input rows: contextual part first, then
the KG part, with 1.0 fill for tokens that carry no KG vector and an all
-1.0 row for [SEP].
"""

from __future__ import annotations

import hashlib
import logging
import struct

import numpy as np

from .codec import Provenance, SerializedInput

log = logging.getLogger(__name__)

CONTEXTUAL_DIM = 768
KG_DIM = 200
INPUT_DIM = CONTEXTUAL_DIM + KG_DIM

_MAGIC = b"KGE1"


class DimensionMismatch(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


class MissingContextual(KeyError):
    pass


class KgEmbeddingStore:
    """Immutable map IRI -> fixed-dimension vector.  Absent IRIs are explicit
    misses (KeyError / None), never silently zero-filled."""

    def __init__(self, dim: int = KG_DIM):
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, iri: str) -> bool:
        return iri in self.vectors

    def add(self, iri: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"{iri}: expected {self.dim} dims, got {vec.shape}")
        self.vectors[iri] = vec

    def get(self, iri: str) -> np.ndarray | None:
        return self.vectors.get(iri)

    def save(self, path) -> None:
        """Binary format: magic, dim:u32, count:u32, then per record
        key-length:u32, key utf-8, dim float32 little-endian."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<II", self.dim, len(self.vectors)))
            for key, vec in self.vectors.items():
                kb = key.encode("utf-8")
                fh.write(struct.pack("<I", len(kb)))
                fh.write(kb)
                fh.write(vec.astype("<f4").tobytes())


def load_kg_embeddings(path, dim: int = KG_DIM) -> KgEmbeddingStore:
    """Load the binary format written by KgEmbeddingStore.save."""
    store = KgEmbeddingStore(dim)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ParseError(0, f"bad magic {magic!r}")
        file_dim, count = struct.unpack("<II", fh.read(8))
        if file_dim != dim:
            raise DimensionMismatch(f"file declares dim {file_dim}, expected {dim}")
        for i in range(count):
            (klen,) = struct.unpack("<I", fh.read(4))
            key = fh.read(klen).decode("utf-8")
            buf = fh.read(4 * dim)
            if len(buf) != 4 * dim:
                raise ParseError(i, "truncated vector record")
            store.vectors[key] = np.frombuffer(buf, dtype="<f4").copy()
    log.info("loaded %d KG vectors of dim %d from %s", len(store), dim, path)
    return store


def load_kg_embeddings_tsv(path, dim: int = KG_DIM) -> KgEmbeddingStore:
    """TSV import path for small fixtures: key<TAB>v1<TAB>...<TAB>vN."""
    store = KgEmbeddingStore(dim)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            key, vals = parts[0], parts[1:]
            if len(vals) != dim:
                raise DimensionMismatch(f"line {lineno}: {len(vals)} floats, expected {dim}")
            try:
                vec = np.array([float(v) for v in vals], dtype=np.float32)
            except ValueError as e:
                raise ParseError(lineno, str(e)) from None
            store.add(key, vec)
    return store


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class ContextualEmbeddingStore:
    """Per-text contextual vectors, one row per whitespace token of the text."""

    def __init__(self, dim: int = CONTEXTUAL_DIM):
        self.dim = dim
        self._records: dict[str, np.ndarray] = {}

    def put(self, text: str, matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=np.float32)
        ntok = len(text.split())
        if matrix.shape != (ntok, self.dim):
            raise DimensionMismatch(
                f"expected ({ntok}, {self.dim}) for {ntok} tokens, got {matrix.shape}"
            )
        self._records[text_key(text)] = matrix

    def get(self, text: str) -> np.ndarray:
        key = text_key(text)
        if key not in self._records:
            raise MissingContextual(text[:80])
        return self._records[key]

    def __contains__(self, text: str) -> bool:
        return text_key(text) in self._records

    def save(self, path) -> None:
        np.savez_compressed(path, **self._records)

    @classmethod
    def load(cls, path, dim: int = CONTEXTUAL_DIM) -> "ContextualEmbeddingStore":
        store = cls(dim)
        with np.load(path) as data:
            for key in data.files:
                store._records[key] = data[key].astype(np.float32)
        return store


class InputMatrix:
    def __init__(self, rows: np.ndarray, provenance: tuple[Provenance, ...]):
        if rows.ndim != 2 or rows.shape[1] != INPUT_DIM:
            raise DimensionMismatch(f"rows must be (n, {INPUT_DIM}), got {rows.shape}")
        if rows.shape[0] != len(provenance):
            raise DimensionMismatch("one provenance tag per row required")
        self.rows = rows
        self.provenance = provenance

    def __len__(self):
        return self.rows.shape[0]


def build_input_matrix(
    si: SerializedInput,
    ctx: ContextualEmbeddingStore,
    kg: KgEmbeddingStore,
) -> InputMatrix:
    """Assemble per-token 968-d rows.

    First 768 dims come from the contextual store for every token.  Last 200
    dims: the KG vector for entity/relation IRI tokens, 1.0-fill for question
    words and label tokens, and the whole row is -1.0 for [SEP].  A missing KG
    vector falls back to 1.0-fill with a logged warning.
    """
    ctx_rows = ctx.get(si.text)
    tokens = si.tokens
    n = len(tokens)
    rows = np.empty((n, INPUT_DIM), dtype=np.float32)
    for i, (tok, tag) in enumerate(zip(tokens, si.provenance)):
        if tag is Provenance.Sep:
            rows[i, :] = -1.0
            continue
        rows[i, :CONTEXTUAL_DIM] = ctx_rows[i]
        if tag in (Provenance.EntityIri, Provenance.RelationIri):
            vec = kg.get(tok)
            if vec is None:
                log.warning("no KG vector for %s; using 1.0 fill", tok)
                rows[i, CONTEXTUAL_DIM:] = 1.0
            else:
                rows[i, CONTEXTUAL_DIM:] = vec
        else:
            rows[i, CONTEXTUAL_DIM:] = 1.0
    return InputMatrix(rows, si.provenance)


def ablate_kg_dims(matrix: InputMatrix) -> InputMatrix:
    """No-KG-embedding configuration: force the last 200 dims to 1.0
    everywhere except [SEP] rows."""
    rows = matrix.rows.copy()
    for i, tag in enumerate(matrix.provenance):
        if tag is not Provenance.Sep:
            rows[i, CONTEXTUAL_DIM:] = 1.0
    return InputMatrix(rows, matrix.provenance)


def init_trainable_lookup(vocab_size: int, dim: int = INPUT_DIM, seed: int = 0) -> np.ndarray:
    """Deterministic uniform [-0.1, 0.1] embedding table for desk-scale runs
    without precomputed stores."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.1, 0.1, size=(vocab_size, dim)).astype(np.float32)
