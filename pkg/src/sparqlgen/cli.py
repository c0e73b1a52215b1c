"""Command-line pipeline: prepare | train | decode | train-reranker |
evaluate | analyze-errors.

Each stage reads only its declared inputs and writes only into the output
directory, so endpoint-dependent stages can be retried without retraining.
Exit codes: 0 ok, 1 runtime failure, 2 usage / missing input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import codec, datasets, evaluation, kg_client, pgn, reranker as rr
from .sparql_core import (
    SPARQL_VOCABULARY,
    SparqlQuery,
    dbpedia_prefixes,
    wikidata_prefixes,
)

log = logging.getLogger("sparqlgen")


class MissingInput(FileNotFoundError):
    def __init__(self, path, producer: str):
        super().__init__(f"missing input {path}; run `sparqlgen {producer}` first")


@dataclass
class RunConfig:
    dataset_kind: str = "fixture"  # lcquad1 | lcquad2 | fixture
    dataset_path: str = ""
    question_field: str = "corrected_question"
    endpoint_url: str | None = None
    endpoint_timeout: float = 30.0
    cache_path: str | None = None
    codec_seed: int = 0
    output_dir: str = "out"
    beam_width: int = 10
    pgn: dict = field(default_factory=dict)
    reranker: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        data = {}
        if path:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def out(self, name: str) -> Path:
        d = Path(self.output_dir)
        d.mkdir(parents=True, exist_ok=True)
        return d / name

    def client(self) -> kg_client.SparqlClient:
        if not self.endpoint_url:
            raise ValueError("endpoint_url is required for this command")
        return kg_client.SparqlClient(
            kg_client.EndpointConfig(
                url=self.endpoint_url,
                timeout_seconds=self.endpoint_timeout,
                cache_path=self.cache_path,
            )
        )

    def pgn_config(self) -> pgn.PgnConfig:
        cfg = pgn.PgnConfig(**self.pgn)
        cfg.beam_width = self.pgn.get("beam_width", self.beam_width)
        return cfg


def _load_records(cfg: RunConfig) -> list[datasets.QuestionRecord]:
    path = Path(cfg.dataset_path)
    if not path.exists():
        raise MissingInput(path, "prepare (dataset_path must point at a dataset file)")
    if cfg.dataset_kind == "lcquad1":
        records = datasets.load_lcquad1(path, question_field=cfg.question_field)
    elif cfg.dataset_kind == "lcquad2":
        records = datasets.load_lcquad2(path)
    elif cfg.dataset_kind == "fixture":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        records = []
        for r in raw:
            kg = datasets.KnowledgeGraph(r.get("kg", "wikidata"))
            norm = datasets._check_gold(r["sparql"], r["id"])
            if norm is not None:
                records.append(datasets.QuestionRecord(str(r["id"]), r["question"], norm, kg))
    else:
        raise ValueError(f"unknown dataset_kind {cfg.dataset_kind!r}")
    datasets.populate_links(records)
    return records


def cmd_prepare(cfg: RunConfig) -> int:
    records = _load_records(cfg)
    client = None
    if cfg.endpoint_url:
        client = cfg.client()
    all_iris: list[str] = []
    for rec in records:
        all_iris += [it.iri for it in rec.entities + rec.relations]
    table = (
        wikidata_prefixes()
        if any(r.kg is datasets.KnowledgeGraph.Wikidata for r in records)
        else dbpedia_prefixes()
    )
    labels, flagged = datasets.fetch_labels(
        list(dict.fromkeys(all_iris)), client, cfg.out("labels.tsv"), table
    )
    samples, uncoverable = datasets.emit_samples(records, labels, seed=cfg.codec_seed)
    codec.write_samples(cfg.out("samples.jsonl"), samples)
    sentinels = codec.build_sentinel_table(
        sorted(table.entries.values()), list(SPARQL_VOCABULARY)
    )
    sentinels.to_tsv(cfg.out("sentinel_table.tsv"))
    plan = datasets.make_splits(records, datasets.SplitPlan(seed=cfg.codec_seed))
    with open(cfg.out("splits.json"), "w", encoding="utf-8") as fh:
        json.dump({"fold_count": plan.fold_count, "seed": plan.seed, "folds": plan.folds}, fh)
    frac = evaluation.copy_required_fraction(records)
    print(f"prepared {len(samples)} samples from {len(records)} records")
    print(f"copy-required fraction: {frac:.3f}")
    print(f"labels missing in KG (local-part fallback): {len(flagged)}")
    if uncoverable:
        print(f"WARNING: {len(uncoverable)} target tokens not coverable, e.g. {uncoverable[:3]}")
    return 0


def _read_prepared(cfg: RunConfig):
    path = cfg.out("samples.jsonl")
    if not path.exists():
        raise MissingInput(path, "prepare")
    samples = codec.read_samples(path)
    return [
        pgn.PgnSample(s["id"], s["input_text"].split(), s["target_text"].split())
        for s in samples
    ]


def cmd_train(cfg: RunConfig) -> int:
    samples = _read_prepared(cfg)
    ext = pgn.ExtendedVocab(pgn.default_fixed_vocabulary())
    source = pgn.SourceVocab.from_samples(samples)
    model, history = pgn.train(
        samples, cfg.pgn_config(), ext, source, log_path=cfg.out("train_log.jsonl")
    )
    pgn.save_checkpoint(cfg.out("model.ckpt"), model)
    with open(cfg.out("source_vocab.json"), "w", encoding="utf-8") as fh:
        json.dump(list(source.tokens), fh)
    print(f"trained {cfg.pgn_config().epochs} epochs; final loss {history[-1]['loss']:.4f}"
          if history else "0 epochs requested; initial model saved")
    return 0


def _load_model(cfg: RunConfig):
    ckpt = cfg.out("model.ckpt")
    if not ckpt.exists():
        raise MissingInput(ckpt, "train")
    vocab_path = cfg.out("source_vocab.json")
    if not vocab_path.exists():
        raise MissingInput(vocab_path, "train")
    model = pgn.load_checkpoint(ckpt)
    with open(vocab_path, encoding="utf-8") as fh:
        tokens = json.load(fh)
    source = pgn.SourceVocab(tokens[2:])  # first two are the pad/unk specials
    ext = pgn.ExtendedVocab(pgn.default_fixed_vocabulary())
    return model, source, ext


def cmd_decode(cfg: RunConfig) -> int:
    samples = _read_prepared(cfg)
    model, source, ext = _load_model(cfg)
    with open(cfg.out("beams.jsonl"), "w", encoding="utf-8") as fh:
        for s in samples:
            beams = pgn.beam_search(model, s, ext, source, width=cfg.beam_width)
            texts = [" ".join(pgn.decode_beam_tokens(b, s, ext)) for b in beams]
            fh.write(json.dumps({"id": s.id, "beams": texts}) + "\n")
    print(f"decoded {len(samples)} questions with beam width {cfg.beam_width}")
    return 0


def _read_beams(cfg: RunConfig) -> dict[str, list[str]]:
    path = cfg.out("beams.jsonl")
    if not path.exists():
        raise MissingInput(path, "decode")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = rec["beams"]
    return out


def cmd_train_reranker(cfg: RunConfig) -> int:
    beams = _read_beams(cfg)
    records = _load_records(cfg)
    client = cfg.client()
    samples = rr.collect_training_data(
        lambda rec: beams.get(rec.id, []), records, client
    )
    model, history = rr.train_reranker(samples, rr.RerankConfig(**cfg.reranker))
    rr.save_reranker(cfg.out("reranker.ckpt"), model)
    print(f"reranker trained on {len(samples)} candidates; final loss {history[-1]['loss']:.4f}")
    return 0


def _maybe_rerank(cfg: RunConfig, beams: dict[str, list[str]], records) -> dict[str, list[str]]:
    ckpt = cfg.out("reranker.ckpt")
    if not ckpt.exists():
        return beams
    model = rr.load_reranker(ckpt)
    client = cfg.client()
    questions = {r.id: r.question for r in records}
    out = {}
    for qid, qbeams in beams.items():
        candidates = []
        for q in qbeams:
            try:
                answers = client.execute(q)
                snippet = rr.response_snippet(answers) if answers.is_valid_response() else None
            except kg_client.EndpointUnavailable:
                raise
            except kg_client.QueryError:
                snippet = None
            candidates.append(rr.Candidate(q, snippet))
        reranked = rr.rerank(questions.get(qid, ""), candidates, model)
        out[qid] = [c.query for c in reranked]
    return out


def cmd_evaluate(cfg: RunConfig, use_reranker: bool = False) -> int:
    beams = _read_beams(cfg)
    records = _load_records(cfg)
    if use_reranker:
        beams = _maybe_rerank(cfg, beams, records)
    client = cfg.client()
    gold = {r.id: r.gold_sparql for r in records if r.id in beams}
    metrics = evaluation.evaluate(beams, gold, client, out_path=cfg.out("eval.jsonl"))
    print(
        f"questions={len(metrics.records)} macro-F1={metrics.f1:.4f} "
        f"precision={metrics.precision:.4f} recall={metrics.recall:.4f} "
        f"exact-match={metrics.exact_match:.4f}"
    )
    return 0


def cmd_analyze_errors(cfg: RunConfig) -> int:
    eval_path = cfg.out("eval.jsonl")
    if not eval_path.exists():
        raise MissingInput(eval_path, "evaluate")
    beams = _read_beams(cfg)
    records = {r.id: r for r in _load_records(cfg)}
    counts: Counter[str] = Counter()
    with open(eval_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("summary") or rec.get("match"):
                continue
            qid = rec["id"]
            if qid not in records or not beams.get(qid):
                continue
            qrec = records[qid]
            rank = rec.get("chosen_rank") or 0
            pred = beams[qid][rank] if rank < len(beams[qid]) else beams[qid][0]
            gold = SparqlQuery.parse(qrec.gold_sparql)
            cat = evaluation.categorize_error(
                gold, pred, qrec.entities + qrec.relations, qrec.question
            )
            counts[cat.value] += 1
    total = sum(counts.values())
    print(f"{'category':<15} count")
    for cat in evaluation.ErrorCategory:
        print(f"{cat.value:<15} {counts.get(cat.value, 0)}")
    print(f"{'total':<15} {total}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sparqlgen", description=__doc__)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--endpoint-url", default=None)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train", "decode", "train-reranker", "analyze-errors"):
        sub.add_parser(name)
    p_eval = sub.add_parser("evaluate")
    p_eval.add_argument("--use-reranker", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(
            args.config,
            {
                "codec_seed": args.seed,
                "output_dir": args.output_dir,
                "endpoint_url": args.endpoint_url,
            },
        )
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "decode":
            return cmd_decode(cfg)
        if args.command == "train-reranker":
            return cmd_train_reranker(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, use_reranker=args.use_reranker)
        if args.command == "analyze-errors":
            return cmd_analyze_errors(cfg)
        parser.error(f"unknown command {args.command}")
    except (MissingInput, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except kg_client.EndpointUnavailable as e:
        print(f"error: endpoint unavailable: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        log.exception("command failed")
        return 1


if __name__ == "__main__":
    sys.exit(main())
