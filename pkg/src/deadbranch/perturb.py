"""Dead-branch addition: insertion plans, guards, safe instructions, semantic checks.

A dead branch hangs off a live *host* block.  Its guard ``cmp r, r`` /
``jne .LdbN`` can never jump, so nothing placed in the dead block executes.
Exits of dead blocks go to the host's fallthrough successor (or its first
successor, or the host itself for blocks without successors).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .asm import STACK_POINTER, Instruction, Operand
from .cfg import BasicBlock, BinaryFunction

# jumps inside dead blocks may only target the block's own exit
DEAD_EXIT_LABEL = ".Ldead_exit"
GUARD_REGISTERS = ("rax", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11")
GUARD_REGISTER = "rax"

_NEVER_SAFE = frozenset({
    "ret", "iretq", "leave", "enter", "push", "pop", "pushfq", "popfq",
    "syscall", "int", "int3", "hlt", "ud2", "jrcxz", "loop", "loope", "loopne",
    "movntdq", "movntps",
})


class UnsafeInstruction(ValueError):
    def __init__(self, instruction: Instruction, reason: str):
        super().__init__(f"{instruction.render()!r} cannot go in a dead block: {reason}")
        self.instruction = instruction
        self.reason = reason


def unsafe_reason(i: Instruction) -> str | None:
    """Why ``i`` fails the dead-code filter, or None when it passes."""
    m = i.mnemonic
    if m in _NEVER_SAFE:
        return "stack, memory or control effect"
    cat = i.info.gemini_category
    if cat == "transfer":
        (op,) = i.operands
        if op.kind != "label" or op.label != DEAD_EXIT_LABEL:
            return "control transfer leaving the dead block"
    elif cat == "call":
        (op,) = i.operands
        if op.kind != "label":
            return "indirect call"
    elif i.operands:
        dst = i.operands[0]
        if dst.kind == "memory":
            return "memory destination"
        if dst.kind == "register" and dst.register in STACK_POINTER:
            return "stack pointer write"
        if m in ("xchg", "xadd", "cmpxchg") and any(o.kind == "memory" for o in i.operands):
            return "memory destination"
    return None


def is_safe(i: Instruction) -> bool:
    return unsafe_reason(i) is None


def check_safe(i: Instruction) -> None:
    reason = unsafe_reason(i)
    if reason is not None:
        raise UnsafeInstruction(i, reason)


@dataclass(frozen=True)
class Slot:
    host: int
    dead_id: int
    exit: int


@dataclass(frozen=True)
class InsertionPlan:
    """B insertion positions ("after block host"); dead ids fixed up front,
    blocks materialize on first insertion."""
    positions: tuple[Slot, ...]

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def B(self) -> int:
        return len(self.positions)

    def slot(self, k: int) -> Slot:
        return self.positions[k]

    def position_of(self, dead_id: int) -> int:
        for k, s in enumerate(self.positions):
            if s.dead_id == dead_id:
                return k
        raise KeyError(dead_id)


@dataclass(frozen=True)
class Action:
    position: int
    instruction: Instruction


def _exit_of(f: BinaryFunction, host: int) -> int:
    succ = f.successors(host)
    for d, kind in succ:
        if kind == "fallthrough":
            return d
    return succ[0][0] if succ else host


def get_positions(f: BinaryFunction, B: int, seed: int) -> InsertionPlan:
    if B < 1:
        raise ValueError("B must be >= 1")
    live = [b.id for b in f.live_blocks]
    if not live:
        raise ValueError("function has no blocks")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(live), size=B, replace=len(live) < B)
    base = max(b.id for b in f.blocks) + 1
    slots = tuple(Slot(live[int(p)], base + k, _exit_of(f, live[int(p)]))
                  for k, p in enumerate(picks))
    return InsertionPlan(slots)


@lru_cache(maxsize=4096)
def make_guard(dead_id: int, register: str = GUARD_REGISTER) -> tuple[Instruction, ...]:
    r = Operand.reg(register)
    return (Instruction("cmp", (r, r)),
            Instruction("jne", (Operand.lab(f".Ldb{dead_id}"),)))


def make_dead_branch(plan: InsertionPlan, position: int):
    """Guard, empty dead block and its two edges for one plan position."""
    s = plan.slot(position)
    guard = make_guard(s.dead_id)
    block = BasicBlock(s.dead_id, (), True, s.host, guard)
    edges = ((s.host, s.dead_id, "taken"), (s.dead_id, s.exit, "fallthrough"))
    return guard, block, edges


def apply_action(f: BinaryFunction, plan: InsertionPlan, a: Action) -> BinaryFunction:
    if not 0 <= a.position < plan.B:
        raise IndexError(f"position {a.position} outside plan of size {plan.B}")
    check_safe(a.instruction)
    s = plan.slot(a.position)
    if f.has_block(s.dead_id):
        b = f.block(s.dead_id)
        return f.replace_block(BasicBlock(b.id, b.instructions + (a.instruction,), True,
                                          b.host, b.guard))
    _, block, edges = make_dead_branch(plan, a.position)
    block = BasicBlock(block.id, (a.instruction,), True, block.host, block.guard)
    return BinaryFunction(f.name, f.blocks + (block,), f.edges + edges, f.entry)


def apply_actions(f: BinaryFunction, plan: InsertionPlan, actions) -> BinaryFunction:
    for a in actions:
        f = apply_action(f, plan, a)
    return f


def inserted_count(f_adv: BinaryFunction) -> int:
    return sum(len(b.instructions) for b in f_adv.dead_blocks)


def _guard_ok(b: BasicBlock) -> bool:
    if len(b.guard) != 2:
        return False
    cmp_, jne = b.guard
    if cmp_.mnemonic != "cmp" or jne.mnemonic != "jne":
        return False
    x, y = cmp_.operands
    if x.kind != "register" or x != y or x.register not in GUARD_REGISTERS:
        return False
    (target,) = jne.operands
    return target.kind == "label" and target.label == b.label


def verify_semantics_preserved(f: BinaryFunction, f_adv: BinaryFunction) -> bool:
    """Syntactic check that ``f_adv`` is ``f`` plus guarded, safe dead branches."""
    if f_adv.entry != f.entry or f_adv.live_blocks != f.live_blocks:
        return False
    live_ids = {b.id for b in f.live_blocks}
    dead = {b.id: b for b in f_adv.dead_blocks}
    if set(dead) & live_ids:
        return False
    live_edges = [e for e in f_adv.edges if e[0] in live_ids and e[1] in live_ids]
    if sorted(live_edges) != sorted(f.edges):
        return False
    for d, b in dead.items():
        if b.host not in live_ids or not _guard_ok(b):
            return False
        if not all(is_safe(i) for i in b.instructions):
            return False
        incident = [e for e in f_adv.edges if d in (e[0], e[1])]
        if len(incident) != 2:
            return False
        into = [e for e in incident if e[1] == d]
        out = [e for e in incident if e[0] == d]
        if len(into) != 1 or len(out) != 1:
            return False
        if into[0] != (b.host, d, "taken"):
            return False
        if out[0][2] != "fallthrough" or out[0][1] not in live_ids:
            return False
    return True
