"""Instruction embeddings: skip-gram with negative sampling, cosine neighbours.

Table file layout: one UTF-8 header line of JSON (format, dim, params, vocab),
then ``len(vocab) * dim`` little-endian float32 values, row-major.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import OOV_TOKEN

log = logging.getLogger(__name__)

TABLE_FORMAT = "deadbranch-embeddings/1"
# cosine scores are compared at this many decimals so ties break lexically
SCORE_DECIMALS = 12


class EmptyCorpus(ValueError):
    pass


class UnknownToken(KeyError):
    pass


@dataclass(frozen=True)
class SkipGramParams:
    dim: int = 100
    window: int = 8
    min_count: int = 8
    lr: float = 0.05
    negative: int = 5
    epochs: int = 5
    batch_size: int = 512
    seed: int = 0


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    vocab: tuple[str, ...]
    vectors: np.ndarray  # (|V|, dim) float32
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors.setflags(write=False)
        object.__setattr__(self, "_index", {t: k for k, t in enumerate(self.vocab)})
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1, keepdims=True)
        unit = self.vectors / np.where(norms == 0, 1.0, norms)
        unit.setflags(write=False)
        object.__setattr__(self, "_unit", unit)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __len__(self) -> int:
        return len(self.vocab)

    def row(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownToken(token) from None

    def unit(self) -> np.ndarray:
        return self._unit


def train_skipgram(corpus: Iterable[Sequence[str]], params: SkipGramParams | None = None,
                   **overrides) -> EmbeddingTable:
    p = params or SkipGramParams()
    if overrides:
        p = SkipGramParams(**{**asdict(p), **overrides})
    sentences = [list(s) for s in corpus if len(s)]
    if not sentences:
        raise EmptyCorpus("no tokens to train on")
    counts = Counter(t for s in sentences for t in s)
    kept = sorted((t for t, c in counts.items() if c >= p.min_count), key=lambda t: (-counts[t], t))
    dropped = sum(c for t, c in counts.items() if c < p.min_count)
    vocab = kept + ([OOV_TOKEN] if dropped else [])
    if not vocab:
        raise EmptyCorpus(f"no token reaches min_count={p.min_count}")
    index = {t: k for k, t in enumerate(vocab)}
    oov = index.get(OOV_TOKEN, -1)
    seqs = [np.array([index.get(t, oov) for t in s], dtype=np.int64) for s in sentences]
    freq = np.array([counts[t] if t != OOV_TOKEN else dropped for t in vocab], dtype=np.float64)
    noise = freq ** 0.75
    noise /= noise.sum()

    rng = np.random.default_rng(p.seed)
    V, d = len(vocab), p.dim
    w_in = (rng.random((V, d)) - 0.5) / d
    w_out = np.zeros((V, d))

    flat = np.concatenate(seqs)
    sent = np.repeat(np.arange(len(seqs)), [len(s) for s in seqs])
    n_tokens = len(flat)
    total_steps = p.epochs * n_tokens
    done = 0
    for epoch in range(p.epochs):
        spans = rng.integers(1, p.window + 1, size=len(flat))  # word2vec-style shrunk window
        centers, contexts = [], []
        for off in range(1, p.window + 1):
            for a, b in ((slice(None, -off), slice(off, None)), (slice(off, None), slice(None, -off))):
                ok = (sent[a] == sent[b]) & (spans[a] >= off)
                centers.append(flat[a][ok])
                contexts.append(flat[b][ok])
        centers = np.concatenate(centers)
        contexts = np.concatenate(contexts)
        order = rng.permutation(len(centers))
        centers, contexts = centers[order], contexts[order]
        loss_sum = 0.0
        for b in range(0, len(centers), p.batch_size):
            progress = (done + n_tokens * b / max(len(centers), 1)) / total_steps
            lr = p.lr * max(1.0 - progress, 1e-4)
            c = centers[b:b + p.batch_size]
            o = contexts[b:b + p.batch_size]
            neg = rng.choice(V, size=(len(c), p.negative), p=noise)
            targets = np.concatenate([o[:, None], neg], axis=1)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            h = w_in[c]  # (b, d)
            out = w_out[targets]  # (b, 1+neg, d)
            score = np.einsum("bd,bkd->bk", h, out)
            sig = 1.0 / (1.0 + np.exp(-np.clip(score, -30.0, 30.0)))
            g = (labels - sig) * lr
            loss_sum -= np.sum(np.log(np.where(labels > 0, sig, 1.0 - sig) + 1e-12))
            # per-token averaging keeps frequent tokens from taking one huge step
            n_out = np.bincount(targets.ravel(), minlength=V)[targets]
            n_in = np.bincount(c, minlength=V)[c]
            np.add.at(w_out, targets, (g / n_out)[:, :, None] * h[:, None, :])
            np.add.at(w_in, c, np.einsum("bk,bkd->bd", g, out) / n_in[:, None])
        done += n_tokens
        log.info("skip-gram epoch %d/%d: mean loss %.4f", epoch + 1, p.epochs,
                 loss_sum / max(len(centers), 1))
    return EmbeddingTable(tuple(vocab), w_in.astype(np.float32), asdict(p))


def embed(table: EmbeddingTable, token: str, fallback: bool = True) -> np.ndarray:
    if token in table:
        return table.vectors[table.row(token)]
    if fallback and OOV_TOKEN in table:
        return table.vectors[table.row(OOV_TOKEN)]
    raise UnknownToken(token)


def rank_by_cosine(table: EmbeddingTable, query: np.ndarray,
                   candidates: Sequence[int] | None = None) -> list[int]:
    """Row indices by decreasing cosine to ``query``; ties broken by token."""
    q = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(q)
    q = q / qn if qn > 0 else q
    rows = np.arange(len(table)) if candidates is None else np.asarray(candidates, dtype=np.int64)
    scores = np.round(table.unit()[rows] @ q, SCORE_DECIMALS)
    order = sorted(range(len(rows)), key=lambda j: (-scores[j], table.vocab[rows[j]]))
    return [int(rows[j]) for j in order]


def nearest_neighbors(table: EmbeddingTable, token: str, m: int,
                      restrict_to: Iterable[str] | None = None) -> list[str]:
    """The ``m`` tokens closest to ``token`` by cosine, excluding ``token``."""
    q = table.row(token)
    if m <= 0:
        return []
    if restrict_to is None:
        rows = [k for k in range(len(table)) if k != q]
    else:
        rows = sorted({table.row(t) for t in restrict_to if t in table} - {q})
    ranked = rank_by_cosine(table, table.vectors[q], rows)
    return [table.vocab[k] for k in ranked[:m]]


def save_table(table: EmbeddingTable, path: str | Path) -> None:
    header = {"format": TABLE_FORMAT, "dim": table.dim, "params": table.params,
              "vocab": list(table.vocab)}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(table.vectors, dtype="<f4").tobytes())


def load_table(path: str | Path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != TABLE_FORMAT:
            raise ValueError(f"{path}: not a {TABLE_FORMAT} file")
        data = np.frombuffer(fh.read(), dtype="<f4")
    vocab = tuple(header["vocab"])
    vectors = data.reshape(len(vocab), header["dim"]).astype(np.float32)
    return EmbeddingTable(vocab, vectors, header.get("params", {}))
