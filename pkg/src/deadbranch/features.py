"""Per-model feature views of a function and their in-place action simulation.

acfg-gnn: 8 counts per node,
    [n_const, n_transfer, n_call, n_arith, n_instr, out_degree, in_degree, n_nodes]
graph-matcher: 200-bin mnemonic-class bag per node
seq-embed: normalized token ids of the linearized function, cut at 150

Dead-branch guards count as tokens in the sequence view; graph views see
them only as the taken edge into the dead node.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .asm import GEMINI_CATEGORIES, N_GMN_CLASSES, Instruction, categorize, normalize_for_sequence
from .cfg import BinaryFunction
from .perturb import Action, InsertionPlan, make_guard

FAMILIES = ("acfg-gnn", "graph-matcher", "seq-embed")
ACFG_DIM = 8
N_INSTR_FEATURES = 5
MAX_SEQ_LEN = 150
OOV_TOKEN = "<unk>"

# per-category unit contribution to the 5 instruction-dependent ACFG columns
CATEGORY_BASIS = np.array([
    [1, 0, 0, 0, 1],  # const
    [0, 1, 0, 0, 1],  # transfer
    [0, 0, 1, 0, 1],  # call
    [0, 0, 0, 1, 1],  # arithmetic
    [0, 0, 0, 0, 1],  # other
], dtype=np.int64)
_CAT_INDEX = {c: k for k, c in enumerate(GEMINI_CATEGORIES)}


def acfg_row(instructions: Sequence[Instruction]) -> np.ndarray:
    row = np.zeros(N_INSTR_FEATURES, dtype=np.int64)
    for i in instructions:
        row += CATEGORY_BASIS[_CAT_INDEX[categorize(i).gemini_category]]
    return row


def bag_row(instructions: Sequence[Instruction]) -> np.ndarray:
    row = np.zeros(N_GMN_CLASSES, dtype=np.int64)
    for i in instructions:
        row[categorize(i).gmn_class] += 1
    return row


class Vocabulary:
    """Token -> id map; unknown tokens share one id."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self.index = {t: k for k, t in enumerate(self.tokens)}
        self.has_oov = OOV_TOKEN in self.index
        # without a trained OOV row, unknown tokens get an extra (zero) slot
        self.unk_id = self.index[OOV_TOKEN] if self.has_oov else len(self.tokens)
        self.size = len(self.tokens) + (0 if self.has_oov else 1)

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GraphView:
    family: str
    node_ids: tuple[int, ...]
    features: np.ndarray  # (n, F) int64
    edges: tuple[tuple[int, int], ...]  # node indices, src -> dst

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def node(self, block_id: int) -> int:
        return self.node_ids.index(block_id)

    def __eq__(self, other) -> bool:
        return (isinstance(other, GraphView) and self.family == other.family
                and self.node_ids == other.node_ids and self.edges == other.edges
                and self.features.shape == other.features.shape
                and bool(np.array_equal(self.features, other.features)))

    __hash__ = None


def AcfgView(node_ids, features, edges) -> GraphView:
    return GraphView("acfg-gnn", node_ids, features, edges)


def BagView(node_ids, features, edges) -> GraphView:
    return GraphView("graph-matcher", node_ids, features, edges)


@dataclass(frozen=True)
class SeqView:
    ids: tuple[int, ...]  # truncated at MAX_SEQ_LEN
    layout: tuple[tuple[int, int, int], ...]  # (block id, start, length) over the untruncated sequence
    total: int
    vocab: Vocabulary = field(compare=False, repr=False)
    family: str = "seq-embed"


FeatureView = GraphView | SeqView


def view_key(view: FeatureView):
    """Hashable summary of exactly what a model reads from ``view``."""
    if isinstance(view, SeqView):
        return view.ids
    return (view.features.shape, view.features.tobytes(), view.edges)


def _structural(features: np.ndarray, edges, n: int) -> None:
    features[:, 5:] = 0
    for s, d in edges:
        features[s, 5] += 1
        features[d, 6] += 1
    features[:, 7] = n


def extract(family: str, f: BinaryFunction, vocab: Vocabulary | None = None) -> FeatureView:
    if family == "seq-embed":
        if vocab is None:
            raise ValueError("seq-embed extraction needs a vocabulary")
        ids, layout, pos = [], [], 0
        for b in f.layout():
            insns = list(b.guard) + list(b.instructions)
            layout.append((b.id, pos, len(insns)))
            pos += len(insns)
            ids.extend(vocab.id(normalize_for_sequence(i)) for i in insns)
        return SeqView(tuple(ids[:MAX_SEQ_LEN]), tuple(layout), pos, vocab)
    node_ids = tuple(b.id for b in f.blocks)
    index = {b: k for k, b in enumerate(node_ids)}
    edges = tuple((index[s], index[d]) for s, d, _ in f.edges)
    if family == "acfg-gnn":
        feats = np.zeros((len(node_ids), ACFG_DIM), dtype=np.int64)
        for k, b in enumerate(f.blocks):
            feats[k, :N_INSTR_FEATURES] = acfg_row(b.instructions)
        _structural(feats, edges, len(node_ids))
    elif family == "graph-matcher":
        feats = np.stack([bag_row(b.instructions) for b in f.blocks])
    else:
        raise ValueError(f"unknown model family {family!r}")
    return GraphView(family, node_ids, feats, edges)


def _node_delta(family: str, i: Instruction) -> np.ndarray:
    if family == "acfg-gnn":
        return CATEGORY_BASIS[_CAT_INDEX[categorize(i).gemini_category]]
    row = np.zeros(N_GMN_CLASSES, dtype=np.int64)
    row[categorize(i).gmn_class] = 1
    return row


def simulate_action(view: FeatureView, plan: InsertionPlan, a: Action) -> FeatureView:
    """Feature-space equivalent of ``extract(apply_action(f, plan, a))``."""
    s = plan.slot(a.position)
    if isinstance(view, SeqView):
        return _simulate_seq(view, plan, s, a.instruction)
    if s.dead_id in view.node_ids:
        k = view.node_ids.index(s.dead_id)
        feats = view.features.copy()
        if view.family == "acfg-gnn":
            feats[k, :N_INSTR_FEATURES] += _node_delta(view.family, a.instruction)
        else:
            feats[k] += _node_delta(view.family, a.instruction)
        return GraphView(view.family, view.node_ids, feats, view.edges)
    n = view.n_nodes
    node_ids = view.node_ids + (s.dead_id,)
    edges = view.edges + ((node_ids.index(s.host), n), (n, node_ids.index(s.exit)))
    feats = np.zeros((n + 1, view.features.shape[1]), dtype=np.int64)
    feats[:n] = view.features
    if view.family == "acfg-gnn":
        feats[n, :N_INSTR_FEATURES] = _node_delta(view.family, a.instruction)
        _structural(feats, edges, n + 1)
    else:
        feats[n] = _node_delta(view.family, a.instruction)
    return GraphView(view.family, node_ids, feats, edges)


def dead_insert_point(layout, plan: InsertionPlan, host: int, dead_id: int) -> int:
    """Index in ``layout`` where a not-yet-materialized dead block goes."""
    dead_hosts = {s.dead_id: s.host for s in plan.positions}
    k = next(j for j, seg in enumerate(layout) if seg[0] == host) + 1
    while k < len(layout) and dead_hosts.get(layout[k][0]) == host and layout[k][0] < dead_id:
        k += 1
    return k


def _simulate_seq(view: SeqView, plan: InsertionPlan, s, instruction: Instruction) -> SeqView:
    vocab = view.vocab
    tok = vocab.id(normalize_for_sequence(instruction))
    layout = list(view.layout)
    seg_index = next((j for j, seg in enumerate(layout) if seg[0] == s.dead_id), None)
    if seg_index is not None:
        bid, start, length = layout[seg_index]
        at, new = start + length, (tok,)
        layout[seg_index] = (bid, start, length + 1)
        shift_from = seg_index + 1
    else:
        seg_index = dead_insert_point(layout, plan, s.host, s.dead_id)
        at = layout[seg_index - 1][1] + layout[seg_index - 1][2]
        new = tuple(vocab.id(normalize_for_sequence(g)) for g in make_guard(s.dead_id)) + (tok,)
        layout.insert(seg_index, (s.dead_id, at, len(new)))
        shift_from = seg_index + 1
    for j in range(shift_from, len(layout)):
        bid, start, length = layout[j]
        layout[j] = (bid, start + len(new), length)
    ids = view.ids
    if at < MAX_SEQ_LEN:
        ids = (ids[:at] + new + ids[at:])[:MAX_SEQ_LEN]
    return SeqView(ids, tuple(layout), view.total + len(new), vocab)
