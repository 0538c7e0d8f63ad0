"""Continuous stand-ins for dead-branch contents, used by the gradient attack.

Graph families: every plan position gets a materialized (empty) dead node and
``delta[b, j]`` is the number of category-j (acfg) or class-j (bag)
instructions placed there.  Sequence family: every position gets ``slots``
instruction slots whose embedding vectors are free.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .asm import N_GMN_CLASSES, Instruction, normalize_for_sequence
from .cfg import BinaryFunction
from .features import (ACFG_DIM, CATEGORY_BASIS, MAX_SEQ_LEN, GraphView, Vocabulary, extract)
from .perturb import InsertionPlan, make_dead_branch


def materialize_empty(f: BinaryFunction, plan: InsertionPlan) -> BinaryFunction:
    blocks, edges = list(f.blocks), list(f.edges)
    for k in range(plan.B):
        _, block, new_edges = make_dead_branch(plan, k)
        blocks.append(block)
        edges.extend(new_edges)
    return BinaryFunction(f.name, tuple(blocks), tuple(edges), f.entry)


@dataclass(frozen=True, eq=False)
class RelaxedGraph:
    view: GraphView
    dead_rows: tuple[int, ...]
    basis: np.ndarray  # (K, F) contribution of one unit of each coefficient

    @property
    def delta_shape(self) -> tuple[int, int]:
        return (len(self.dead_rows), self.basis.shape[0])

    def placement(self) -> np.ndarray:
        """(n, B) one-hot matrix sending position b to its dead node row."""
        m = np.zeros((self.view.n_nodes, len(self.dead_rows)))
        for b, r in enumerate(self.dead_rows):
            m[r, b] = 1.0
        return m


def relax_graph(family: str, f: BinaryFunction, plan: InsertionPlan) -> RelaxedGraph:
    g = materialize_empty(f, plan)
    view = extract(family, g)
    rows = tuple(view.node(s.dead_id) for s in plan.positions)
    if family == "acfg-gnn":
        basis = np.zeros((CATEGORY_BASIS.shape[0], ACFG_DIM))
        basis[:, :CATEGORY_BASIS.shape[1]] = CATEGORY_BASIS
    else:
        basis = np.eye(N_GMN_CLASSES)
    return RelaxedGraph(view, rows, basis)


@dataclass(frozen=True, eq=False)
class RelaxedSeq:
    ids: np.ndarray  # (L,) token ids, L <= MAX_SEQ_LEN, slot entries hold 0
    slot_index: np.ndarray  # (B, S) position in ``ids`` or -1 when truncated away
    dim: int

    @property
    def delta_shape(self) -> tuple[int, int, int]:
        return (*self.slot_index.shape, self.dim)


def relax_seq(f: BinaryFunction, plan: InsertionPlan, vocab: Vocabulary, slots: int,
              dim: int) -> RelaxedSeq:
    g = materialize_empty(f, plan)
    slot_of = {s.dead_id: b for b, s in enumerate(plan.positions)}
    ids, slot_index = [], np.full((plan.B, slots), -1, dtype=np.int64)
    for block in g.layout():
        ids.extend(vocab.id(normalize_for_sequence(i)) for i in block.guard)
        ids.extend(vocab.id(normalize_for_sequence(i)) for i in block.instructions)
        if block.is_dead_branch:
            b = slot_of[block.id]
            for s in range(slots):
                slot_index[b, s] = len(ids)
                ids.append(0)
    slot_index[slot_index >= MAX_SEQ_LEN] = -1
    return RelaxedSeq(np.array(ids[:MAX_SEQ_LEN], dtype=np.int64), slot_index, dim)


def realize_counts(counts: np.ndarray, representatives: list[Instruction]) -> list[tuple[int, Instruction]]:
    """Expand integer coefficients into (position, instruction) insertions."""
    out = []
    for b in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            out.extend((b, representatives[j]) for _ in range(int(counts[b, j])))
    return out
