"""Graph surrogates: a structure2vec-style ACFG embedder and a graph matcher."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from ..features import ACFG_DIM, GraphView
from ..asm import N_GMN_CLASSES
from ..relaxed import RelaxedGraph
from .base import DTYPE, SimilarityModel


def collate_graphs(views: Sequence[GraphView], scale: float) -> dict:
    n = max(v.n_nodes for v in views)
    F = views[0].features.shape[1]
    x = np.zeros((len(views), n, F))
    adj = np.zeros((len(views), n, n))
    mask = np.zeros((len(views), n))
    for c, v in enumerate(views):
        x[c, :v.n_nodes] = v.features
        mask[c, :v.n_nodes] = 1.0
        if v.edges:
            e = np.asarray(v.edges)
            np.add.at(adj[c], (e[:, 0], e[:, 1]), 1.0)
            np.add.at(adj[c], (e[:, 1], e[:, 0]), 1.0)
    return {"x": torch.from_numpy(x * scale), "adj": torch.from_numpy(adj),
            "mask": torch.from_numpy(mask)}


def relaxed_graph_batch(relaxed: RelaxedGraph, delta: torch.Tensor, scale: float) -> dict:
    base = collate_graphs([relaxed.view], scale)
    placement = torch.from_numpy(relaxed.placement())
    basis = torch.from_numpy(relaxed.basis)
    x = base["x"] + scale * (placement @ (delta @ basis))[None]
    return {"x": x, "adj": base["adj"], "mask": base["mask"]}


class AcfgGNN(SimilarityModel):
    """Three rounds of neighbour aggregation over ACFG node vectors, sum
    pooling, a two-layer head, cosine comparator."""

    family = "acfg-gnn"

    def __init__(self, seed: int = 0, dim: int = 16, rounds: int = 3, out: int = 16,
                 input_scale: float = 0.1):
        super().__init__(seed, dim=dim, rounds=rounds, out=out, input_scale=input_scale)
        g = torch.Generator().manual_seed(seed)
        self.rounds, self.scale = rounds, input_scale
        self.w_in = self._param(g, ACFG_DIM, dim)
        self.p1 = self._param(g, dim, dim)
        self.p2 = self._param(g, dim, dim)
        self.w_pool = self._param(g, dim, dim)
        self.w_h1 = self._param(g, dim, dim)
        self.b_h1 = self._param(g, dim, scale=0.1)
        self.w_h2 = self._param(g, dim, out)

    def collate(self, views):
        return collate_graphs(views, self.scale)

    def relaxed_batch(self, relaxed, delta):
        return relaxed_graph_batch(relaxed, delta, self.scale)

    def encode(self, batch):
        x, adj, mask = batch["x"], batch["adj"], batch["mask"][..., None]
        local = x @ self.w_in
        mu = torch.zeros_like(local)
        for _ in range(self.rounds):
            nb = adj @ mu
            mu = torch.tanh(local + torch.tanh(nb @ self.p1) @ self.p2) * mask
        g = mu.sum(1) @ self.w_pool
        return torch.tanh(g @ self.w_h1 + self.b_h1) @ self.w_h2


class GraphMatcher(SimilarityModel):
    """Message passing with cross-graph attention; gated sum readout; the
    squared embedding distance goes through a logistic to land in [0, 1]."""

    family = "graph-matcher"

    def __init__(self, seed: int = 0, dim: int = 16, rounds: int = 3, out: int = 16,
                 input_scale: float = 0.5, temperature: float = 4.0):
        super().__init__(seed, dim=dim, rounds=rounds, out=out, input_scale=input_scale,
                         temperature=temperature)
        g = torch.Generator().manual_seed(seed)
        self.rounds, self.scale, self.temperature = rounds, input_scale, temperature
        self.w_enc = self._param(g, N_GMN_CLASSES, dim, scale=0.3)
        self.b_enc = self._param(g, dim, scale=0.1)
        self.w_msg = self._param(g, dim, dim)
        self.w_upd = self._param(g, 3 * dim, dim)
        self.b_upd = self._param(g, dim, scale=0.1)
        self.w_gate = self._param(g, dim, out)
        self.w_out = self._param(g, dim, out)

    def collate(self, views):
        return collate_graphs(views, self.scale)

    def relaxed_batch(self, relaxed, delta):
        return relaxed_graph_batch(relaxed, delta, self.scale)

    def _readout(self, h, mask):
        return torch.tanh((torch.sigmoid(h @ self.w_gate) * (h @ self.w_out) * mask).sum(1))

    def _match(self, a: dict, b: dict) -> torch.Tensor:
        C = max(a["x"].shape[0], b["x"].shape[0])
        xa, adja, ma = (t.expand(C, *t.shape[1:]) for t in (a["x"], a["adj"], a["mask"]))
        xb, adjb, mb = (t.expand(C, *t.shape[1:]) for t in (b["x"], b["adj"], b["mask"]))
        ma3, mb3 = ma[..., None], mb[..., None]
        ha = torch.tanh(xa @ self.w_enc + self.b_enc) * ma3
        hb = torch.tanh(xb @ self.w_enc + self.b_enc) * mb3
        neg = torch.finfo(DTYPE).min
        for _ in range(self.rounds):
            msg_a = adja @ torch.tanh(ha @ self.w_msg)
            msg_b = adjb @ torch.tanh(hb @ self.w_msg)
            scores = ha @ hb.transpose(1, 2)  # (C, na, nb)
            att_ab = torch.softmax(scores.masked_fill(mb[:, None, :] == 0, neg), dim=2)
            att_ba = torch.softmax(scores.transpose(1, 2).masked_fill(ma[:, None, :] == 0, neg), dim=2)
            cross_a = ha - att_ab @ hb
            cross_b = hb - att_ba @ ha
            ha = torch.tanh(torch.cat([ha, msg_a, cross_a], -1) @ self.w_upd + self.b_upd) * ma3
            hb = torch.tanh(torch.cat([hb, msg_b, cross_b], -1) @ self.w_upd + self.b_upd) * mb3
        diff = self._readout(ha, ma3) - self._readout(hb, mb3)
        dist = (diff * diff).sum(-1)
        return 2.0 * torch.sigmoid(-dist / self.temperature)

    def pair_scores(self, a, b):
        return 0.5 * (self._match(a, b) + self._match(b, a))
