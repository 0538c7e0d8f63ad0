"""Greedy, Spatial Greedy and gradient-guided (GCAM) dead-branch attacks.

Targeted attacks push ``sim(f_adv, f2)`` up to ``tau``; untargeted ones push
``sim(f_adv, f1)`` down to ``tau``.  The black-box attacks insert one
instruction per iteration; actions are scored in feature space (see
``features.simulate_action``) and only the committed one is applied to code.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .asm import (GEMINI_CATEGORIES, N_GMN_CLASSES, Instruction, ParseError, categorize,
                  mnemonic_table, normalize_for_sequence, parse_instruction)
from .cfg import BinaryFunction
from .embedding import SCORE_DECIMALS, EmbeddingTable, nearest_neighbors, rank_by_cosine
from .features import simulate_action, view_key
from .models import LossSpec, SimilarityModel
from .perturb import (DEAD_EXIT_LABEL, Action, InsertionPlan, apply_action, apply_actions,
                      get_positions, inserted_count, is_safe)
from .relaxed import realize_counts, relax_graph, relax_seq

log = logging.getLogger(__name__)

MODES = ("targeted", "untargeted")
# operand stand-ins used when turning a normalized token back into code
IMM_STANDIN = 0x1000
MEM_STANDIN = "qword ptr [rbp-0x8]"
CALL_STANDIN = "fn_dead"


class UnsupportedFamily(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "targeted"
    tau: float = 0.8
    B: int = 5
    max_insertions: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.B < 1 or self.max_insertions < 1:
            raise ValueError("B and max_insertions must be >= 1")

    def reached(self, s: float) -> bool:
        return s >= self.tau if self.mode == "targeted" else s <= self.tau


@dataclass(frozen=True)
class SpatialConfig:
    N: int = 400
    r: float = 0.75
    c: int = 10
    k: int = 5
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.r < 1.0:
            raise ValueError("r must lie in [0, 1)")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.N < 1 or self.k < 1 or self.c < 0:
            raise ValueError("N, k must be >= 1 and c >= 0")
        if self.random_slots + self.c > self.N:
            raise ValueError("r*N + c exceeds N")

    @property
    def random_slots(self) -> int:
        return int(round(self.r * self.N))


@dataclass(frozen=True)
class CandidateSet:
    instructions: tuple[Instruction, ...]

    def __len__(self) -> int:
        return len(self.instructions)

    @property
    def N(self) -> int:
        return len(self.instructions)

    def tokens(self) -> list[str]:
        return [normalize_for_sequence(i) for i in self.instructions]


@dataclass
class AttackOutcome:
    success: bool
    final_sim: float
    initial_sim: float
    inserted: int
    trajectory: list[float]
    iterations: int
    f_adv: BinaryFunction = field(repr=False)
    actions: list[Action] = field(default_factory=list, repr=False)
    delta: np.ndarray | None = field(default=None, repr=False)  # gcam only: final relaxed perturbation


# -- candidate universes ---------------------------------------------------------

def _fill_slot(kinds: str, first: bool, mnemonic: str, gemini: str) -> str | None:
    if "l" in kinds:
        return DEAD_EXIT_LABEL if gemini == "transfer" else CALL_STANDIN
    if "r" in kinds:
        return "rax" if first else "rcx"
    if "x" in kinds:
        return "xmm0" if first else "xmm1"
    if "i" in kinds:
        return "1"
    if "m" in kinds and not first:
        return MEM_STANDIN
    return None


@lru_cache(maxsize=None)
def realize_mnemonic(mnemonic: str) -> Instruction | None:
    """A dead-code-safe instance of ``mnemonic`` (registers where possible)."""
    info = mnemonic_table()[mnemonic]
    ops = []
    for k, kinds in enumerate(info.slots):
        op = _fill_slot(kinds, k == 0 and len(info.slots) > 1, mnemonic, info.gemini_category)
        if op is None:
            return None
        ops.append(op)
    try:
        i = parse_instruction(f"{mnemonic} {', '.join(ops)}".strip())
    except ParseError:
        return None
    return i if is_safe(i) else None


def realize_token(token: str) -> Instruction | None:
    """Concrete safe instruction normalizing back to ``token``, or None."""
    parts = token.split("_")
    table = mnemonic_table()
    if parts[0] not in table:
        return None
    cat = table[parts[0]].gemini_category
    ops = []
    for p in parts[1:]:
        if p == "IMM":
            ops.append(hex(IMM_STANDIN))
        elif p == "MEM":
            ops.append(MEM_STANDIN)
        elif p == "LABEL":
            ops.append(DEAD_EXIT_LABEL if cat == "transfer" else CALL_STANDIN)
        else:
            ops.append(p)
    try:
        i = parse_instruction(f"{parts[0]} {', '.join(ops)}".strip())
    except ParseError:
        return None
    if not is_safe(i) or normalize_for_sequence(i) != token:
        return None
    return i


def instruction_universe(tokens: Sequence[str]) -> dict[str, Instruction]:
    """Realizable, safe tokens (in the given order) and their instructions."""
    out = {}
    for t in tokens:
        i = realize_token(t)
        if i is not None:
            out[t] = i
    return out


def random_candidates(universe: dict[str, Instruction], N: int, seed: int) -> CandidateSet:
    toks = list(universe)
    N = min(N, len(toks))
    pick = np.random.default_rng(seed).choice(len(toks), size=N, replace=False)
    return CandidateSet(tuple(universe[toks[int(k)]] for k in pick))


def gray_box_candidates(model_family: str) -> CandidateSet:
    """One instruction per feature unit the gray-box families can see."""
    if model_family == "acfg-gnn":
        reps = {"const": "mov rax, 0x1000", "transfer": f"jmp {DEAD_EXIT_LABEL}",
                "call": f"call {CALL_STANDIN}", "arithmetic": "add rax, rcx",
                "other": "mov rax, rcx"}
        insns = tuple(parse_instruction(reps[c]) for c in GEMINI_CATEGORIES)
        assert [categorize(i).gemini_category for i in insns] == list(GEMINI_CATEGORIES)
        return CandidateSet(insns)
    if model_family == "graph-matcher":
        per_class: dict[int, Instruction] = {}
        for m, info in mnemonic_table().items():
            if info.gmn_class in per_class:
                continue
            i = realize_mnemonic(m)
            if i is not None:
                per_class[info.gmn_class] = i
        missing = set(range(N_GMN_CLASSES)) - set(per_class)
        if missing:
            raise RuntimeError(f"no safe instruction for classes {sorted(missing)}")
        return CandidateSet(tuple(per_class[k] for k in range(N_GMN_CLASSES)))
    if model_family == "seq-embed":
        raise UnsupportedFamily("the sequence model sees every token; no restricted candidate set exists")
    raise UnsupportedFamily(f"unknown family {model_family!r}")


# -- greedy machinery ------------------------------------------------------------

def _objective(scores: np.ndarray, mode: str) -> np.ndarray:
    s = np.round(scores, SCORE_DECIMALS)
    return s if mode == "targeted" else -s


def score_actions(model: SimilarityModel, view, plan: InsertionPlan, cand: CandidateSet,
                  target_view, workers: int = 1):
    """Similarity after each action as a (B, |CAND|) array, plus the simulated
    views in the same position-major order."""
    views = [simulate_action(view, plan, Action(p, i))
             for p in range(plan.B) for i in cand.instructions]
    # many actions collide (same bag class, insertions past the sequence cutoff)
    first: dict = {}
    slot = np.array([first.setdefault(view_key(v), len(first)) for v in views])
    unique = [None] * len(first)
    for v, k in zip(views, slot):
        if unique[k] is None:
            unique[k] = v
    scores = model.sim_many(unique, target_view, workers)[slot]
    return scores.reshape(plan.B, len(cand)), views


def best_action(objective: np.ndarray) -> tuple[int, int]:
    """Argmax with ties going to the lowest (position, candidate)."""
    flat = int(np.argmax(objective.ravel()))  # argmax returns the first maximum
    return divmod(flat, objective.shape[1])


def top_k_actions(objective: np.ndarray, cand: CandidateSet, k: int) -> list[tuple[int, int]]:
    """The k best tested actions with pairwise distinct instructions."""
    order = np.lexsort((np.arange(objective.size), -objective.ravel()))
    out, seen = [], set()
    for flat in order:
        p, j = divmod(int(flat), objective.shape[1])
        ins = cand.instructions[j]
        if ins in seen:
            continue
        seen.add(ins)
        out.append((p, j))
        if len(out) == k:
            break
    return out


def _setup(f1, f2, model, cfg):
    if cfg.mode == "untargeted":
        f2 = f1
    target = model.view(f2)
    s0 = model.sim(f1, target)
    return f2, target, s0


def _greedy_loop(f1, f2, model, cand, cfg, epsilon, workers, on_iteration=None) -> AttackOutcome:
    f2, target, s0 = _setup(f1, f2, model, cfg)
    plan = get_positions(f1, cfg.B, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    f_adv, view, current = f1, model.view(f1), s0
    trajectory, actions = [], []
    for it in range(cfg.max_insertions):
        if cfg.reached(current):
            break
        scores, views = score_actions(model, view, plan, cand, target, workers)
        obj = _objective(scores, cfg.mode)
        if rng.random() < epsilon:
            p, j = divmod(int(rng.integers(obj.size)), obj.shape[1])
        else:
            p, j = best_action(obj)
        a = Action(p, cand.instructions[j])
        f_adv = apply_action(f_adv, plan, a)
        view = views[p * len(cand) + j]
        current = model.sim(f_adv, target)
        trajectory.append(current)
        actions.append(a)
        if on_iteration is not None:
            cand = on_iteration(it, obj, cand)
    return AttackOutcome(cfg.reached(current), current, s0, inserted_count(f_adv), trajectory,
                         len(trajectory), f_adv, actions)


def greedy_attack(f1: BinaryFunction, f2: BinaryFunction, oracle: SimilarityModel,
                  cand: CandidateSet, cfg: AttackConfig, epsilon: float = 0.1,
                  workers: int = 1) -> AttackOutcome:
    """ε-greedy over every (position, candidate) pair, one insertion per iteration."""
    return _greedy_loop(f1, f2, oracle, cand, cfg, epsilon, workers)


def update_candidates(cand: CandidateSet, top_k: Sequence[Instruction], table: EmbeddingTable,
                      r: float, c: int, N: int, seed: int,
                      universe: dict[str, Instruction],
                      ranked_previous: Sequence[Instruction] | None = None) -> CandidateSet:
    """Neighbours of the top actions, then rN fresh random picks, then the best
    previous candidates until exactly N (or the whole universe) are present."""
    if not top_k:
        raise ValueError("top_k must be nonempty")
    N = min(N, len(universe))
    allowed = list(universe)
    chosen: dict[Instruction, None] = {}
    per = c // len(top_k)
    for ins in top_k:
        tok = normalize_for_sequence(ins)
        if tok not in table:
            continue
        for t in nearest_neighbors(table, tok, per, restrict_to=allowed):
            chosen.setdefault(universe[t])
    rng = np.random.default_rng(seed)
    n_random = int(round(r * N))
    pool = [t for t in allowed if universe[t] not in chosen]
    if n_random and pool:
        for k in rng.choice(len(pool), size=min(n_random, len(pool)), replace=False):
            chosen.setdefault(universe[pool[int(k)]])
    for ins in (ranked_previous if ranked_previous is not None else cand.instructions):
        if len(chosen) >= N:
            break
        chosen.setdefault(ins)
    if len(chosen) < N:  # previous set too small: top up at random
        rest = [t for t in allowed if universe[t] not in chosen]
        for k in rng.permutation(len(rest))[:N - len(chosen)]:
            chosen.setdefault(universe[rest[int(k)]])
    return CandidateSet(tuple(list(chosen)[:N]))


def spatial_greedy_attack(f1: BinaryFunction, f2: BinaryFunction, oracle: SimilarityModel,
                          table: EmbeddingTable, scfg: SpatialConfig, cfg: AttackConfig,
                          universe: dict[str, Instruction] | None = None, workers: int = 1,
                          history: list | None = None) -> AttackOutcome:
    """Greedy whose candidate pool drifts toward neighbours of the best actions."""
    if universe is None:
        universe = instruction_universe(table.vocab)
    cand = random_candidates(universe, scfg.N, cfg.seed)

    def refresh(it, obj, cand):
        best_per_cand = obj.max(axis=0)
        order = np.lexsort((np.arange(len(cand)), -best_per_cand))
        ranked = [cand.instructions[int(j)] for j in order]
        top = [cand.instructions[j] for _, j in top_k_actions(obj, cand, scfg.k)]
        new = update_candidates(cand, top, table, scfg.r, scfg.c, scfg.N,
                                int(np.random.SeedSequence([cfg.seed, it]).generate_state(1)[0]),
                                universe, ranked)
        if history is not None:
            history.append({"top": top, "ranked": ranked, "cand": new})
        return new

    return _greedy_loop(f1, f2, oracle, cand, cfg, scfg.epsilon, workers, refresh)


# -- GCAM ----------------------------------------------------------------------------

def round_perturbation_counts(delta: np.ndarray) -> np.ndarray:
    """Round half up, clamp at zero."""
    return np.maximum(np.floor(np.asarray(delta, dtype=np.float64) + 0.5), 0).astype(np.int64)


def round_perturbation_embeddings(delta: np.ndarray, table: EmbeddingTable,
                                  allowed: Sequence[str] | None = None) -> list[str]:
    """Nearest token (cosine) for each row of ``delta``.

    With ``allowed`` the search is restricted to those tokens, which is how
    unsafe or unrealizable nearest tokens fall back to the nearest safe one.
    """
    rows = None if allowed is None else sorted(table.row(t) for t in allowed if t in table)
    d = np.asarray(delta, dtype=np.float64).reshape(-1, table.dim)
    return [table.vocab[rank_by_cosine(table, q, rows)[0]] for q in d]


def _seq_slot_order(relaxed) -> list[tuple[int, int]]:
    B, S = relaxed.slot_index.shape
    return [(b, s) for b in range(B) for s in range(S) if relaxed.slot_index[b, s] >= 0]


def gcam_attack(f1: BinaryFunction, f2: BinaryFunction, model: SimilarityModel, spec: LossSpec,
                B: int, iters: int, seed: int, tau: float | None = None, step: float = 0.1,
                slots: int = 3, table: EmbeddingTable | None = None,
                init_scale: float | None = None) -> AttackOutcome:
    """Projected fixed-step gradient descent on the relaxed perturbation, then
    rounding back to instructions and a true similarity check."""
    cfg = AttackConfig(spec.mode, tau if tau is not None else (0.8 if spec.mode == "targeted" else 0.5),
                       B, 1, seed)
    f2, target, s0 = _setup(f1, f2, model, cfg)
    plan = get_positions(f1, B, seed)
    rng = np.random.default_rng(seed)
    fam = model.family
    if fam == "seq-embed":
        if table is None:
            raise ValueError("gcam on seq-embed needs the embedding table")
        relaxed = relax_seq(f1, plan, model.vocab, slots, table.dim)
        scale = init_scale if init_scale is not None else float(np.abs(table.vectors).mean())
        delta = rng.normal(0.0, scale, relaxed.delta_shape)
        project = None
    else:
        relaxed = relax_graph(fam, f1, plan)
        delta = rng.uniform(0.0, init_scale if init_scale is not None else 1.0, relaxed.delta_shape)
        project = lambda d: np.maximum(d, 0.0)  # noqa: E731
    trajectory = []
    for _ in range(iters):
        _, g = model.loss_and_gradient(relaxed, delta, target, spec)
        delta = delta - step * g
        if project is not None:
            delta = project(delta)
        trajectory.append(model.relaxed_sim(relaxed, delta, target))
    if fam == "seq-embed":
        order = _seq_slot_order(relaxed)
        universe = instruction_universe(table.vocab)
        toks = round_perturbation_embeddings(np.array([delta[b, s] for b, s in order]), table,
                                             list(universe))
        actions = [Action(b, universe[t]) for (b, _), t in zip(order, toks)]
    else:
        reps = list(gray_box_candidates(fam).instructions)
        actions = [Action(b, i) for b, i in realize_counts(round_perturbation_counts(delta), reps)]
    f_adv = apply_actions(f1, plan, actions)
    final = model.sim(f_adv, target)
    return AttackOutcome(cfg.reached(final), final, s0, inserted_count(f_adv), trajectory,
                         len(trajectory), f_adv, actions, delta)


__all__ = ["AttackConfig", "AttackOutcome", "CandidateSet", "SpatialConfig", "UnsupportedFamily",
           "best_action", "gcam_attack", "gray_box_candidates", "greedy_attack",
           "instruction_universe", "random_candidates", "realize_mnemonic", "realize_token",
           "round_perturbation_counts", "round_perturbation_embeddings", "score_actions",
           "spatial_greedy_attack", "top_k_actions", "update_candidates"]
