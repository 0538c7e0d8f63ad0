"""Desk-scale differentiable surrogates for the three attacked model families."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import torch

from ..embedding import EmbeddingTable
from .base import (LossSpec, ModelWeights, ShapeMismatch, SimilarityModel, describe, load_weights,
                   read_manifest, save_weights)
from .graphs import AcfgGNN, GraphMatcher
from .sequence import SeqEmbed

log = logging.getLogger(__name__)

__all__ = ["AcfgGNN", "GraphMatcher", "SeqEmbed", "LossSpec", "ModelWeights", "ShapeMismatch",
           "SimilarityModel", "build_model", "describe", "load_weights", "read_manifest",
           "save_weights", "train_siamese", "model_from_weights"]


def build_model(family: str, seed: int = 0, table: EmbeddingTable | None = None, **config) -> SimilarityModel:
    if family == "acfg-gnn":
        return AcfgGNN(seed, **config)
    if family == "graph-matcher":
        return GraphMatcher(seed, **config)
    if family == "seq-embed":
        if table is None:
            raise ValueError("seq-embed needs an embedding table")
        return SeqEmbed(table, seed, **config)
    raise ValueError(f"unknown model family {family!r}")


def model_from_weights(w: ModelWeights, table: EmbeddingTable | None = None) -> SimilarityModel:
    if w.family == "seq-embed" and table is None:
        vocab = tuple(w.extra["vocab"])
        emb = w.tensors["embedding"]
        table = EmbeddingTable(vocab, emb[:len(vocab)].astype(np.float32))
    m = build_model(w.family, w.seed, table, **w.config)
    m.load_weights(w)
    return m


def train_siamese(model: SimilarityModel, pairs: Sequence, epochs: int, lr: float = 5e-3,
                  batch_size: int = 32, seed: int = 0) -> ModelWeights:
    """Fit ``sim`` to 1 for similar and 0 for dissimilar pairs (squared error).

    ``pairs`` holds ``(f_a, f_b, label)`` triples with label 1 or 0.
    Returns the trained weights; the model is updated in place.
    """
    if not pairs:
        raise ValueError("no training pairs")
    views = [(model.view(a), model.view(b), float(y)) for a, b, y in pairs]
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(views))
        total = 0.0
        for k in range(0, len(order), batch_size):
            chunk = [views[j] for j in order[k:k + batch_size]]
            a = model.collate([c[0] for c in chunk])
            b = model.collate([c[1] for c in chunk])
            y = torch.tensor([c[2] for c in chunk], dtype=torch.float64)
            loss = ((model.pair_scores(a, b) - y) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
        history.append(total / len(views))
        log.info("siamese epoch %d/%d: loss %.5f", epoch + 1, epochs, history[-1])
    model.snap()
    model.train_history = history
    return model.weights()
