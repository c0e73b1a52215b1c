"""Pointer-generator network: BiLSTM encoder, attentive LSTM decoder with a
generation/copy mixture, teacher-forced training, and beam search.

The output space is an extended vocabulary: a fixed SPARQL-side vocabulary
shared across samples plus sample-local ids for the input tokens, so any
input token can be copied into the query via attention mass.
"""

from __future__ import annotations

import json
import random
import struct
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .sparql_core import SPARQL_VOCABULARY
from .codec import SEP

_EPS = 1e-12
_CKPT_MAGIC = b"PGNC"
_CKPT_VERSION = 1


class TargetNotCoverable(ValueError):
    def __init__(self, sample_id, token):
        self.sample_id = sample_id
        self.token = token
        super().__init__(
            f"sample {sample_id}: target token {token!r} is neither in the fixed "
            "vocabulary nor among the input tokens"
        )


class ShapeError(ValueError):
    pass


@dataclass
class PgnConfig:
    hidden_size: int = 512
    embedding_dim: int = 256
    encoder_layers: int = 1
    bidirectional: bool = True
    dropout: float = 0.0
    max_decode_len: int = 96
    beam_width: int = 10
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    grad_clip_norm: float = 2.0
    seed: int = 0
    input_dim: int | None = None  # set for precomputed-matrix inputs (e.g. 968)

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


def default_fixed_vocabulary(max_variables: int = 10, extra: tuple[str, ...] = ()) -> list[str]:
    """Fixed output vocabulary: SPARQL keywords + punctuation, the [SEP]
    marker, canonical variable names, and any corpus-specific extras."""
    vocab = list(SPARQL_VOCABULARY) + [SEP]
    vocab += [f"?var{i}" for i in range(max_variables)]
    vocab += [t for t in extra if t not in vocab]
    return vocab


class ExtendedVocab:
    PAD, START, END, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

    def __init__(self, fixed_tokens: list[str]):
        self.fixed = self.SPECIALS + tuple(dict.fromkeys(fixed_tokens))
        self.fixed_index = {tok: i for i, tok in enumerate(self.fixed)}

    @property
    def fixed_size(self) -> int:
        return len(self.fixed)

    def extend(self, input_tokens: list[str]) -> "SampleVocab":
        return SampleVocab(self, list(input_tokens))


class SampleVocab:
    """Per-sample extension of the fixed vocabulary with the input tokens."""

    def __init__(self, base: ExtendedVocab, input_tokens: list[str]):
        self.base = base
        self.input_tokens = input_tokens
        self.dynamic: list[str] = []
        dyn_index: dict[str, int] = {}
        ids = []
        for tok in input_tokens:
            fid = base.fixed_index.get(tok)
            if fid is not None:
                ids.append(fid)
                continue
            if tok not in dyn_index:
                dyn_index[tok] = base.fixed_size + len(self.dynamic)
                self.dynamic.append(tok)
            ids.append(dyn_index[tok])
        self.input_ext_ids = ids
        self._dyn_index = dyn_index

    @property
    def size(self) -> int:
        return self.base.fixed_size + len(self.dynamic)

    def token(self, ext_id: int) -> str:
        if ext_id < self.base.fixed_size:
            return self.base.fixed[ext_id]
        return self.dynamic[ext_id - self.base.fixed_size]

    def to_fixed_id(self, ext_id: int) -> int:
        """Fixed-vocab id used to embed a previous output token; copied
        (dynamic) tokens fall back to UNK."""
        return ext_id if ext_id < self.base.fixed_size else ExtendedVocab.UNK

    def target_ids(self, target_tokens: list[str], sample_id="?") -> list[int]:
        """Encode target tokens to extended ids, END appended.  Raises
        TargetNotCoverable for tokens outside both the fixed vocabulary and
        this sample's input."""
        ids = []
        for tok in target_tokens:
            fid = self.base.fixed_index.get(tok)
            if fid is not None:
                ids.append(fid)
            elif tok in self._dyn_index:
                ids.append(self._dyn_index[tok])
            else:
                raise TargetNotCoverable(sample_id, tok)
        ids.append(ExtendedVocab.END)
        return ids


class SourceVocab:
    """Input-side token vocabulary for the trainable-embedding mode."""

    PAD, UNK = 0, 1

    def __init__(self, tokens: list[str]):
        self.tokens = ("<pad>", "<unk>") + tuple(dict.fromkeys(tokens))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_samples(cls, samples: list["PgnSample"]) -> "SourceVocab":
        seen: dict[str, None] = {}
        for s in samples:
            for t in s.input_tokens:
                seen.setdefault(t)
        return cls(list(seen))

    def __len__(self):
        return len(self.tokens)

    def ids(self, tokens: list[str]) -> list[int]:
        return [self.index.get(t, self.UNK) for t in tokens]


@dataclass
class PgnSample:
    id: str
    input_tokens: list[str]
    target_tokens: list[str]
    matrix: np.ndarray | None = None  # precomputed input rows, optional


@dataclass
class Beam:
    tokens: list[int]  # extended-vocab ids, END included when finished
    log_prob: float
    finished: bool


def final_distribution(p_vocab, attn, p_gen, input_token_ids, ext_size: int):
    """Mix generation and copy distributions over the extended vocabulary:

        P(w) = p_gen * P_vocab(w) + (1 - p_gen) * sum_{i: input_i = w} attn_i

    Accepts single ([V], [n]) or batched ([B,V], [B,n]) tensors.
    """
    single = p_vocab.dim() == 1
    if single:
        p_vocab, attn = p_vocab.unsqueeze(0), attn.unsqueeze(0)
        input_token_ids = input_token_ids.unsqueeze(0)
        p_gen = p_gen.reshape(1, 1)
    else:
        p_gen = p_gen.reshape(-1, 1)
    B, V = p_vocab.shape
    out = p_vocab.new_zeros((B, ext_size))
    out[:, :V] = p_gen * p_vocab
    out.scatter_add_(1, input_token_ids, (1.0 - p_gen) * attn)
    return out.squeeze(0) if single else out


class PgnModel(nn.Module):
    def __init__(self, config: PgnConfig, fixed_vocab_size: int, source_vocab_size: int | None = None):
        super().__init__()
        self.config = config
        self.fixed_vocab_size = fixed_vocab_size
        self.source_vocab_size = source_vocab_size
        h = config.hidden_size
        if source_vocab_size is not None:
            self.src_embedding = nn.Embedding(source_vocab_size, config.embedding_dim, padding_idx=0)
            nn.init.uniform_(self.src_embedding.weight, -0.1, 0.1)
            enc_in = config.embedding_dim
        else:
            if config.input_dim is None:
                raise ValueError("config.input_dim required when no source vocabulary is used")
            self.src_embedding = None
            enc_in = config.input_dim
        self.encoder = nn.LSTM(
            enc_in,
            h,
            num_layers=config.encoder_layers,
            bidirectional=config.bidirectional,
            batch_first=True,
            dropout=config.dropout if config.encoder_layers > 1 else 0.0,
        )
        enc_out = h * (2 if config.bidirectional else 1)
        self.enc_out_dim = enc_out
        self.bridge_h = nn.Linear(enc_out, h)
        self.bridge_c = nn.Linear(enc_out, h)
        self.dec_embedding = nn.Embedding(fixed_vocab_size, config.embedding_dim, padding_idx=0)
        nn.init.uniform_(self.dec_embedding.weight, -0.1, 0.1)
        self.decoder_cell = nn.LSTMCell(config.embedding_dim + enc_out, h)
        # additive attention
        self.attn_enc = nn.Linear(enc_out, h, bias=False)
        self.attn_dec = nn.Linear(h, h, bias=True)
        self.attn_v = nn.Linear(h, 1, bias=False)
        self.vocab_head = nn.Linear(h + enc_out, fixed_vocab_size)
        self.p_gen_head = nn.Linear(enc_out + h + config.embedding_dim + enc_out, 1)
        self.dropout = nn.Dropout(config.dropout)

    # --- encoding -------------------------------------------------------

    def embed_inputs(self, src_ids=None, matrices=None):
        if matrices is not None:
            return matrices
        return self.src_embedding(src_ids)

    def encode(self, inputs: torch.Tensor, mask: torch.Tensor):
        """inputs: [B, L, D] float; mask: [B, L] bool.  Returns encoder
        states [B, L, enc_out] and the decoder's initial (h, c)."""
        if inputs.dim() != 3 or inputs.shape[:2] != mask.shape:
            raise ShapeError(f"inputs {tuple(inputs.shape)} vs mask {tuple(mask.shape)}")
        if inputs.shape[1] == 0:
            raise ShapeError("empty input sequence")
        states, _ = self.encoder(self.dropout(inputs))
        lengths = mask.sum(dim=1).clamp(min=1)
        # mean over valid positions seeds the decoder state
        summed = (states * mask.unsqueeze(-1)).sum(dim=1)
        mean = summed / lengths.unsqueeze(-1)
        h0 = torch.tanh(self.bridge_h(mean))
        c0 = torch.tanh(self.bridge_c(mean))
        return states, (h0, c0)

    # --- one decoder step -------------------------------------------------

    def decode_step(self, state, prev_ids, encoder_states, mask, context_prev):
        """prev_ids: [B] fixed-vocab ids of the previous output token.
        Returns (P_vocab [B,V], attn [B,L], p_gen [B], next_state, context)."""
        emb = self.dec_embedding(prev_ids)
        h, c = self.decoder_cell(torch.cat([emb, context_prev], dim=-1), state)
        scores = self.attn_v(torch.tanh(self.attn_enc(encoder_states) + self.attn_dec(h).unsqueeze(1))).squeeze(-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = F.softmax(scores, dim=-1)
        context = torch.bmm(attn.unsqueeze(1), encoder_states).squeeze(1)
        p_vocab = F.softmax(self.vocab_head(torch.cat([h, context], dim=-1)), dim=-1)
        p_gen = torch.sigmoid(
            self.p_gen_head(torch.cat([context, h, emb, context_prev], dim=-1))
        ).squeeze(-1)
        return p_vocab, attn, p_gen, (h, c), context

    def init_context(self, batch_size, device, dtype):
        return torch.zeros(batch_size, self.enc_out_dim, device=device, dtype=dtype)


@dataclass
class EncodedBatch:
    inputs: torch.Tensor          # [B, L, D] float
    mask: torch.Tensor            # [B, L] bool
    input_ext_ids: torch.Tensor   # [B, L] long (pads -> PAD id, attn masked anyway)
    targets: torch.Tensor         # [B, T] long extended ids, END included, PAD padded
    target_mask: torch.Tensor     # [B, T] bool
    ext_size: int
    sample_vocabs: list[SampleVocab]


def make_batch(
    samples: list[PgnSample],
    ext_vocab: ExtendedVocab,
    source_vocab: SourceVocab | None,
    model: PgnModel,
    with_targets: bool = True,
) -> EncodedBatch:
    vocabs = [ext_vocab.extend(s.input_tokens) for s in samples]
    B = len(samples)
    L = max(len(s.input_tokens) for s in samples)
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    mask = torch.zeros(B, L, dtype=torch.bool, device=device)
    input_ext_ids = torch.zeros(B, L, dtype=torch.long, device=device)
    for b, (s, sv) in enumerate(zip(samples, vocabs)):
        n = len(s.input_tokens)
        mask[b, :n] = True
        input_ext_ids[b, :n] = torch.tensor(sv.input_ext_ids, device=device)
    if source_vocab is not None:
        src_ids = torch.zeros(B, L, dtype=torch.long, device=device)
        for b, s in enumerate(samples):
            src_ids[b, : len(s.input_tokens)] = torch.tensor(
                source_vocab.ids(s.input_tokens), device=device
            )
        inputs = model.embed_inputs(src_ids=src_ids)
    else:
        D = model.config.input_dim
        inputs = torch.zeros(B, L, D, dtype=dtype, device=device)
        for b, s in enumerate(samples):
            if s.matrix is None:
                raise ShapeError(f"sample {s.id} has no input matrix")
            inputs[b, : s.matrix.shape[0]] = torch.as_tensor(s.matrix, dtype=dtype)
    ext_size = max(sv.size for sv in vocabs)
    if with_targets:
        tids = [sv.target_ids(s.target_tokens, s.id) for s, sv in zip(samples, vocabs)]
        T = max(len(t) for t in tids)
        targets = torch.zeros(B, T, dtype=torch.long, device=device)
        target_mask = torch.zeros(B, T, dtype=torch.bool, device=device)
        for b, t in enumerate(tids):
            targets[b, : len(t)] = torch.tensor(t, device=device)
            target_mask[b, : len(t)] = True
    else:
        targets = torch.zeros(B, 0, dtype=torch.long, device=device)
        target_mask = torch.zeros(B, 0, dtype=torch.bool, device=device)
    return EncodedBatch(inputs, mask, input_ext_ids, targets, target_mask, ext_size, vocabs)


def batch_loss(model: PgnModel, batch: EncodedBatch) -> torch.Tensor:
    """Mean token-level negative log-likelihood under teacher forcing."""
    B, T = batch.targets.shape
    states, state = model.encode(batch.inputs, batch.mask)
    context = model.init_context(B, batch.inputs.device, batch.inputs.dtype)
    prev = torch.full((B,), ExtendedVocab.START, dtype=torch.long, device=batch.inputs.device)
    nll = batch.inputs.new_zeros(())
    ntok = batch.target_mask.sum()
    for t in range(T):
        p_vocab, attn, p_gen, state, context = model.decode_step(
            state, prev, states, batch.mask, context
        )
        dist = final_distribution(p_vocab, attn, p_gen, batch.input_ext_ids, batch.ext_size)
        tgt = batch.targets[:, t]
        step_nll = -torch.log(dist.gather(1, tgt.unsqueeze(1)).squeeze(1) + _EPS)
        nll = nll + (step_nll * batch.target_mask[:, t]).sum()
        # teacher forcing: feed the gold token, dynamic ids embed as UNK
        prev = torch.where(
            tgt < model.fixed_vocab_size,
            tgt,
            torch.full_like(tgt, ExtendedVocab.UNK),
        )
    return nll / ntok.clamp(min=1)


def train(
    samples: list[PgnSample],
    config: PgnConfig,
    ext_vocab: ExtendedVocab,
    source_vocab: SourceVocab | None = None,
    model: PgnModel | None = None,
    log_path=None,
) -> tuple[PgnModel, list[dict]]:
    """Teacher-forced training; deterministic given config.seed.  Target
    coverability is checked for the whole corpus before the first step."""
    torch.manual_seed(config.seed)
    if model is None:
        model = PgnModel(
            config,
            fixed_vocab_size=ext_vocab.fixed_size,
            source_vocab_size=len(source_vocab) if source_vocab is not None else None,
        )
    # surface TargetNotCoverable at data-prep time, not mid-training
    for s in samples:
        ext_vocab.extend(s.input_tokens).target_ids(s.target_tokens, s.id)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = random.Random(config.seed)
    order = list(range(len(samples)))
    history: list[dict] = []
    for epoch in range(config.epochs):
        t0 = time.time()
        rng.shuffle(order)
        model.train()
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            chunk = [samples[j] for j in order[i : i + config.batch_size]]
            batch = make_batch(chunk, ext_vocab, source_vocab, model)
            loss = batch_loss(model, batch)
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip_norm:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            optimizer.step()
            total += loss.item() * len(chunk)
            count += len(chunk)
        entry = {"epoch": epoch, "loss": total / max(count, 1), "wall_time": time.time() - t0}
        history.append(entry)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
    model.eval()
    return model, history


@torch.no_grad()
def beam_search(
    model: PgnModel,
    sample: PgnSample,
    ext_vocab: ExtendedVocab,
    source_vocab: SourceVocab | None = None,
    width: int | None = None,
    max_len: int | None = None,
) -> list[Beam]:
    """Breadth-limited decoding; returns up to `width` beams sorted by
    log-probability descending.  width=1 is greedy decoding."""
    width = width or model.config.beam_width
    max_len = max_len or model.config.max_decode_len
    batch = make_batch([sample], ext_vocab, source_vocab, model, with_targets=False)
    sv = batch.sample_vocabs[0]
    states, state = model.encode(batch.inputs, batch.mask)
    context0 = model.init_context(1, batch.inputs.device, batch.inputs.dtype)

    # each live hypothesis carries its own decoder state and context
    live = [(Beam([], 0.0, False), state, context0)]
    finished: list[Beam] = []
    for _ in range(max_len):
        if not live:
            break
        candidates: list[tuple[Beam, tuple, torch.Tensor]] = []
        for beam, st, ctx in live:
            prev_ext = beam.tokens[-1] if beam.tokens else ExtendedVocab.START
            prev = torch.tensor([sv.to_fixed_id(prev_ext) if beam.tokens else ExtendedVocab.START])
            p_vocab, attn, p_gen, nst, nctx = model.decode_step(
                st, prev, states, batch.mask, ctx
            )
            dist = final_distribution(
                p_vocab[0], attn[0], p_gen, batch.input_ext_ids[0], sv.size
            )
            logp = torch.log(dist + _EPS)
            k = min(width, sv.size)
            top = torch.topk(logp, k)
            for lp, ext_id in zip(top.values.tolist(), top.indices.tolist()):
                nb = Beam(beam.tokens + [ext_id], beam.log_prob + lp, ext_id == ExtendedVocab.END)
                candidates.append((nb, nst, nctx))
        pool = [(b, s, c) for b, s, c in candidates] + [(b, None, None) for b in finished]
        pool.sort(key=lambda x: x[0].log_prob, reverse=True)
        pool = pool[:width]
        live, finished = [], []
        for b, s, c in pool:
            if b.finished:
                finished.append(b)
            else:
                live.append((b, s, c))
    # hypotheses still live at max_len count as outputs
    finished.extend(b for b, _, _ in live)
    finished.sort(key=lambda b: b.log_prob, reverse=True)
    return finished[:width]


def decode_beam_tokens(beam: Beam, sample: PgnSample, ext_vocab: ExtendedVocab) -> list[str]:
    sv = ext_vocab.extend(sample.input_tokens)
    out = []
    for ext_id in beam.tokens:
        if ext_id == ExtendedVocab.END:
            break
        out.append(sv.token(ext_id))
    return out


def exact_match_rate(
    model: PgnModel,
    samples: list[PgnSample],
    ext_vocab: ExtendedVocab,
    source_vocab: SourceVocab | None = None,
) -> float:
    """Fraction of samples whose greedy decode equals the target token-for-token."""
    hits = 0
    for s in samples:
        beams = beam_search(model, s, ext_vocab, source_vocab, width=1)
        if beams and decode_beam_tokens(beams[0], s, ext_vocab) == s.target_tokens:
            hits += 1
    return hits / max(len(samples), 1)


# --- checkpoint format ----------------------------------------------------
# magic, version:u32, meta-json (u32 length + bytes), tensor count, then
# named float32 tensors: name (u32 + utf8), ndim:u32, dims, data.  Shared by
# the PGN and reranker checkpoints.


def write_named_tensors(path, meta: dict, state_dict) -> None:
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state_dict)))
        for name, tensor in state_dict.items():
            nb = name.encode("utf-8")
            arr = tensor.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_named_tensors(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError("not a sparqlgen checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(mlen).decode("utf-8"))
        (ntensors,) = struct.unpack("<I", fh.read(4))
        sd = {}
        for _ in range(ntensors):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            sd[name] = torch.from_numpy(arr.copy())
    return meta, sd


def save_checkpoint(path, model: PgnModel) -> None:
    meta = {
        "kind": "pgn",
        "config": asdict(model.config),
        "fixed_vocab_size": model.fixed_vocab_size,
        "source_vocab_size": model.source_vocab_size,
    }
    write_named_tensors(path, meta, model.state_dict())


def load_checkpoint(path) -> PgnModel:
    meta, sd = read_named_tensors(path)
    if meta.get("kind") != "pgn":
        raise ValueError(f"checkpoint kind {meta.get('kind')!r}, expected 'pgn'")
    config = PgnConfig(**meta["config"])
    model = PgnModel(config, meta["fixed_vocab_size"], meta["source_vocab_size"])
    model.load_state_dict(sd)
    model.eval()
    return model
