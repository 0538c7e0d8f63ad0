"""Sequence surrogate: frozen instruction embeddings, bidirectional GRU,
self-attentive pooling, two-layer head, cosine comparator."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..embedding import EmbeddingTable
from ..features import SeqView, Vocabulary
from ..relaxed import RelaxedSeq
from .base import DTYPE, SimilarityModel


class SeqEmbed(SimilarityModel):
    family = "seq-embed"

    def __init__(self, table: EmbeddingTable, seed: int = 0, hidden: int = 16, heads: int = 2,
                 att: int = 16, out: int = 16):
        super().__init__(seed, hidden=hidden, heads=heads, att=att, out=out)
        self.vocab = Vocabulary(table.vocab)
        emb = np.zeros((len(self.vocab), table.dim))
        emb[:len(table)] = table.vectors
        self.register_buffer("embedding", torch.tensor(emb, dtype=DTYPE))
        g = torch.Generator().manual_seed(seed)
        self.rnn = nn.GRU(table.dim, hidden, batch_first=True, bidirectional=True, dtype=DTYPE)
        with torch.no_grad():
            for p in self.rnn.parameters():
                p.copy_(torch.rand(p.shape, generator=g, dtype=DTYPE) * (2 / np.sqrt(hidden)) - 1 / np.sqrt(hidden))
        self.w_s1 = self._param(g, 2 * hidden, att)
        self.w_s2 = self._param(g, att, heads)
        self.w_h1 = self._param(g, 2 * hidden * heads, 2 * out)
        self.b_h1 = self._param(g, 2 * out, scale=0.1)
        self.w_h2 = self._param(g, 2 * out, out)
        self.snap()

    def _extra(self) -> dict:
        return {"vocab": list(self.vocab.tokens)}

    def collate(self, views):
        L = max(1, max(len(v.ids) for v in views))
        ids = np.full((len(views), L), self.vocab.unk_id, dtype=np.int64)
        lengths = np.zeros(len(views), dtype=np.int64)
        for c, v in enumerate(views):
            ids[c, :len(v.ids)] = v.ids
            lengths[c] = len(v.ids)
        return {"ids": torch.from_numpy(ids), "lengths": torch.from_numpy(np.maximum(lengths, 1))}

    def relaxed_batch(self, relaxed: RelaxedSeq, delta):
        x = self.embedding[torch.from_numpy(relaxed.ids)]
        keep = relaxed.slot_index >= 0
        if keep.any():
            pos = torch.from_numpy(relaxed.slot_index[keep])
            x = x.index_put((pos,), delta[torch.from_numpy(keep)])
        return {"x": x[None], "lengths": torch.tensor([max(len(relaxed.ids), 1)])}

    def _input_gates(self, batch, suffix: str, flip: torch.Tensor | None) -> torch.Tensor:
        """Time-major (L, C, 3H) input gates, optionally with each sequence reversed."""
        w = getattr(self.rnn, f"weight_ih_l0{suffix}")
        b = getattr(self.rnn, f"bias_ih_l0{suffix}")
        if "ids" in batch:
            ids = batch["ids"] if flip is None else torch.take_along_dim(batch["ids"], flip, dim=1)
            # project the vocabulary once instead of every position
            return (self.embedding @ w.T + b)[ids.T]
        x = batch["x"] if flip is None else torch.take_along_dim(batch["x"], flip[..., None], dim=1)
        return x.transpose(0, 1) @ w.T + b

    def _cell(self, g, h, suffix: str):
        w_hh = getattr(self.rnn, f"weight_hh_l0{suffix}")
        b_hh = getattr(self.rnn, f"bias_hh_l0{suffix}")
        H = w_hh.shape[1]
        gh = torch.addmm(b_hh, h, w_hh.T)
        rz = torch.sigmoid(g[:, :2 * H] + gh[:, :2 * H])
        n = torch.tanh(torch.addcmul(g[:, 2 * H:], rz[:, :H], gh[:, 2 * H:]))
        return torch.lerp(n, h, rz[:, H:])

    def _run(self, gi: torch.Tensor, suffix: str) -> torch.Tensor:
        """One GRU direction over time-major input gates.  Sequences are
        left-aligned, so padding only trails and its outputs get masked later."""
        h = gi.new_zeros(gi.shape[1], self.rnn.hidden_size)
        out = []
        for t in range(gi.shape[0]):
            h = self._cell(gi[t], h, suffix)
            out.append(h)
        return torch.stack(out, dim=1)

    def _run_shared(self, ids: np.ndarray, suffix: str) -> tuple[torch.Tensor, np.ndarray]:
        """``_run`` on token ids, stepping each distinct prefix only once.

        Rows are sorted lexicographically; at step t the *leaders* are rows
        whose first t+1 tokens differ from the previous row's.  Only leader
        states are kept (the set only grows), and every row reads its leader's
        output.  Returns the stacked leader outputs (M, H) and an (C, L) index
        into them for each row and step.
        """
        w = getattr(self.rnn, f"weight_ih_l0{suffix}")
        b = getattr(self.rnn, f"bias_ih_l0{suffix}")
        gates = self.embedding @ w.T + b
        C, L = ids.shape
        order = np.lexsort(ids.T[::-1])
        srt = ids[order]
        diff = srt[1:] != srt[:-1]
        lcp = np.concatenate([[-1], np.where(diff.any(1), diff.argmax(1), L)])
        lead = lcp[:, None] <= np.arange(L)[None, :]  # (C, L), monotone in t
        grp = np.cumsum(lead, axis=0) - 1
        n = lead.sum(0)
        h = gates.new_zeros(int(n[0]), self.rnn.hidden_size)
        out = []
        for t in range(L):
            rows = np.flatnonzero(lead[:, t]) if n[t] < C else None
            if t and n[t] != n[t - 1]:
                parent = grp[:, t - 1] if rows is None else grp[rows, t - 1]
                h = h[torch.from_numpy(parent)]
            tok = srt[:, t] if rows is None else srt[rows, t]
            h = self._cell(gates[torch.from_numpy(tok)], h, suffix)
            out.append(h)
        flat = (np.cumsum(n) - n)[None, :] + grp
        return torch.cat(out), flat[np.argsort(order)]

    def encode(self, batch):
        lengths = batch["lengths"]
        shared = "ids" in batch and not torch.is_grad_enabled()
        L = batch["ids"].shape[1] if "ids" in batch else batch["x"].shape[1]
        # reverse each sequence in place (padding stays at the end), run, undo
        t = torch.arange(L)[None, :]
        mask = t < lengths[:, None]
        flip = torch.where(mask, lengths[:, None] - 1 - t, t)
        if shared:
            ids = batch["ids"].numpy()
            f_out, f_idx = self._run_shared(ids, "")
            fl = flip.numpy()
            b_out, b_idx = self._run_shared(np.take_along_axis(ids, fl, 1), "_reverse")
            fwd = f_out[torch.from_numpy(f_idx)]
            bwd = b_out[torch.from_numpy(np.take_along_axis(b_idx, fl, 1))]
        else:
            fwd = self._run(self._input_gates(batch, "", None), "")
            bwd = self._run(self._input_gates(batch, "_reverse", flip), "_reverse")
            bwd = torch.take_along_dim(bwd, flip[..., None], dim=1)
        h = torch.cat([fwd, bwd], -1)  # (C, L, 2H)
        scores = torch.tanh(h @ self.w_s1) @ self.w_s2  # (C, L, heads)
        scores = scores.masked_fill(~mask[..., None], torch.finfo(DTYPE).min)
        att = torch.softmax(scores, dim=1)
        pooled = (att.transpose(1, 2) @ h).flatten(1)  # (C, heads * 2H)
        return torch.tanh(pooled @ self.w_h1 + self.b_h1) @ self.w_h2
