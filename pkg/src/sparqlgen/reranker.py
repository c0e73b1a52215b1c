"""Beam re-ranking with a trained binary scorer over
(question, candidate query, KG response) triples.

The scorer is a compact word-level GRU encoder with a linear head; the
contract is score -> stable reorder, so a stronger external scorer can be
dropped in behind the same interface.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from .kg_client import AnswerSet, AnswerKind, SparqlClient, QueryError, EndpointUnavailable, answers_equal

log = logging.getLogger(__name__)

SEP = "[SEP]"
SNIPPET_MAX_BINDINGS = 10
SNIPPET_MAX_CHARS = 512


class DegenerateData(ValueError):
    pass


@dataclass(frozen=True)
class RerankSample:
    question: str
    query: str
    response_snippet: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


def response_snippet(answers: AnswerSet) -> str:
    """Bounded textual rendering of an endpoint response: first 10 bindings
    as `var=value` joined by '; ', truncated to 512 characters."""
    if answers.kind is AnswerKind.Boolean:
        text = "true" if answers.boolean else "false"
    elif answers.kind is AnswerKind.Count:
        text = f"count={answers.count}"
    elif answers.kind is AnswerKind.Empty:
        text = "empty"
    else:
        rows = sorted(
            "; ".join(
                f"{var}={val[1] if isinstance(val, tuple) else val}" for var, val in sorted(row)
            )
            for row in answers.rows
        )
        text = "; ".join(rows[:SNIPPET_MAX_BINDINGS])
    return text[:SNIPPET_MAX_CHARS]


def collect_training_data(
    decode_fn,
    dev_set,
    client: SparqlClient,
    gold_answers_fn=None,
) -> list[RerankSample]:
    """Run top-k beams per dev question, keep candidates with a valid
    endpoint response, and label 1 iff the response equals the gold answers.

    decode_fn(record) -> list of candidate query strings (beam order);
    gold_answers_fn(record) -> AnswerSet, defaults to executing record.gold_sparql.
    """
    samples: list[RerankSample] = []
    for record in dev_set:
        if gold_answers_fn is not None:
            gold = gold_answers_fn(record)
        else:
            try:
                gold = client.execute(record.gold_sparql)
            except EndpointUnavailable:
                raise
            except QueryError as e:
                log.warning("gold query for %s failed: %s", record.id, e)
                continue
        for query in decode_fn(record):
            try:
                answers = client.execute(query)
            except EndpointUnavailable:
                raise
            except QueryError:
                continue
            if not answers.is_valid_response():
                continue
            label = 1 if answers_equal(answers, gold) else 0
            samples.append(
                RerankSample(record.question, query, response_snippet(answers), label)
            )
    return samples


def write_rerank_samples(path, samples: list[RerankSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "question": s.question,
                        "query": s.query,
                        "response": s.response_snippet,
                        "label": s.label,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_rerank_samples(path) -> list[RerankSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(RerankSample(d["question"], d["query"], d["response"], d["label"]))
    return out


@dataclass
class RerankConfig:
    embedding_dim: int = 64
    hidden_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 15
    batch_size: int = 32
    seed: int = 0


def _concat_text(s: RerankSample) -> str:
    return f"{s.question} {SEP} {s.query} {SEP} {s.response_snippet}"


class RerankModel(nn.Module):
    """GRU encoder over the concatenated word sequence + linear scoring head."""

    PAD, UNK = 0, 1

    def __init__(self, vocab: dict[str, int], config: RerankConfig):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.embedding = nn.Embedding(len(vocab) + 2, config.embedding_dim, padding_idx=0)
        self.encoder = nn.GRU(config.embedding_dim, config.hidden_size, batch_first=True)
        self.head = nn.Linear(config.hidden_size, 1)

    def _ids(self, text: str) -> list[int]:
        return [self.vocab.get(tok, self.UNK) for tok in text.split()] or [self.UNK]

    def forward(self, texts: list[str]) -> torch.Tensor:
        seqs = [self._ids(t) for t in texts]
        L = max(len(s) for s in seqs)
        ids = torch.zeros(len(seqs), L, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s)
        emb = self.embedding(ids)
        _, h = self.encoder(emb)
        return self.head(h[-1]).squeeze(-1)

    @torch.no_grad()
    def score(self, question: str, query: str, snippet: str) -> float:
        """Probability in [0, 1] that the candidate answers the question."""
        self.eval()
        sample = RerankSample(question, query, snippet, 0)
        return float(torch.sigmoid(self.forward([_concat_text(sample)])[0]))


def train_reranker(samples: list[RerankSample], config: RerankConfig) -> tuple[RerankModel, list[dict]]:
    """Binary cross-entropy training; deterministic given seed.  Raises
    DegenerateData unless both labels are present."""
    if not samples:
        raise DegenerateData("no training samples")
    labels = {s.label for s in samples}
    if labels != {0, 1}:
        raise DegenerateData(f"need both labels, got {sorted(labels)}")
    torch.manual_seed(config.seed)
    vocab: dict[str, int] = {}
    for s in samples:
        for tok in _concat_text(s).split():
            if tok not in vocab:
                vocab[tok] = len(vocab) + 2  # 0=pad, 1=unk
    model = RerankModel(vocab, config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    loss_fn = nn.BCEWithLogitsLoss()
    history = []
    texts = [_concat_text(s) for s in samples]
    targets = torch.tensor([float(s.label) for s in samples])
    g = torch.Generator().manual_seed(config.seed)
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(len(samples), generator=g)
        total = 0.0
        for i in range(0, len(samples), config.batch_size):
            idx = perm[i : i + config.batch_size]
            logits = model([texts[j] for j in idx.tolist()])
            loss = loss_fn(logits, targets[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        history.append({"epoch": epoch, "loss": total / len(samples)})
    model.eval()
    return model, history


def save_reranker(path, model: RerankModel) -> None:
    from .pgn import write_named_tensors
    from dataclasses import asdict

    meta = {"kind": "reranker", "config": asdict(model.config), "vocab": model.vocab}
    write_named_tensors(path, meta, model.state_dict())


def load_reranker(path) -> RerankModel:
    from .pgn import read_named_tensors

    meta, sd = read_named_tensors(path)
    if meta.get("kind") != "reranker":
        raise ValueError(f"checkpoint kind {meta.get('kind')!r}, expected 'reranker'")
    model = RerankModel(meta["vocab"], RerankConfig(**meta["config"]))
    model.load_state_dict(sd)
    model.eval()
    return model


@dataclass(frozen=True)
class Candidate:
    query: str
    snippet: str | None  # None when the endpoint gave no valid response


def rerank(question: str, candidates: list[Candidate], model: RerankModel) -> list[Candidate]:
    """Stable sort by scorer output, descending.  Candidates without a valid
    response keep their original beam order after all scored candidates."""
    scored = [
        (i, c, model.score(question, c.query, c.snippet))
        for i, c in enumerate(candidates)
        if c.snippet is not None
    ]
    unscored = [c for c in candidates if c.snippet is None]
    scored.sort(key=lambda t: (-t[2], t[0]))
    return [c for _, c, _ in scored] + unscored
