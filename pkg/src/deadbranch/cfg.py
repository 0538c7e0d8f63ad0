"""Binary functions as control flow graphs, JSONL corpus I/O, pair statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .asm import Instruction, ParseError, parse_instruction

MIN_INSTRUCTIONS = 6
EDGE_KINDS = ("fallthrough", "taken")


class SchemaError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InvalidFunction(ValueError):
    pass


@dataclass(frozen=True)
class BasicBlock:
    id: int
    instructions: tuple[Instruction, ...] = ()
    is_dead_branch: bool = False
    # dead blocks only: the block they hang off and their always-false guard
    host: int | None = None
    guard: tuple[Instruction, ...] = ()

    @property
    def label(self) -> str:
        return f".Ldb{self.id}" if self.is_dead_branch else f".L{self.id}"


@dataclass(frozen=True)
class BinaryFunction:
    name: str
    blocks: tuple[BasicBlock, ...]
    edges: tuple[tuple[int, int, str], ...]
    entry: int
    _index: dict = field(default=None, compare=False, repr=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {b.id: k for k, b in enumerate(self.blocks)})

    def block(self, block_id: int) -> BasicBlock:
        return self.blocks[self._index[block_id]]

    def has_block(self, block_id: int) -> bool:
        return block_id in self._index

    @property
    def live_blocks(self) -> tuple[BasicBlock, ...]:
        return tuple(b for b in self.blocks if not b.is_dead_branch)

    @property
    def dead_blocks(self) -> tuple[BasicBlock, ...]:
        return tuple(b for b in self.blocks if b.is_dead_branch)

    def instruction_count(self) -> int:
        """Body instructions only; dead-branch guards are not counted."""
        return sum(len(b.instructions) for b in self.blocks)

    def successors(self, block_id: int) -> list[tuple[int, str]]:
        return [(d, k) for s, d, k in self.edges if s == block_id]

    def layout(self) -> list[BasicBlock]:
        """Linear block order: each live block followed by its dead blocks."""
        hosted: dict[int, list[BasicBlock]] = {}
        for b in self.dead_blocks:
            hosted.setdefault(b.host, []).append(b)
        out = []
        for b in self.live_blocks:
            out.append(b)
            out.extend(sorted(hosted.get(b.id, ()), key=lambda d: d.id))
        return out

    def linear_instructions(self) -> list[Instruction]:
        out = []
        for b in self.layout():
            out.extend(b.guard)
            out.extend(b.instructions)
        return out

    def replace_block(self, block: BasicBlock) -> BinaryFunction:
        k = self._index[block.id]
        blocks = self.blocks[:k] + (block,) + self.blocks[k + 1:]
        return BinaryFunction(self.name, blocks, self.edges, self.entry)


def validate(f: BinaryFunction) -> None:
    """Raise InvalidFunction if the graph is structurally inconsistent."""
    ids = [b.id for b in f.blocks]
    if len(ids) != len(set(ids)):
        raise InvalidFunction(f"{f.name}: duplicate block ids")
    known = set(ids)
    if f.entry not in known:
        raise InvalidFunction(f"{f.name}: entry {f.entry} missing")
    for s, d, k in f.edges:
        if s not in known or d not in known:
            raise InvalidFunction(f"{f.name}: edge {s}->{d} references a missing block")
        if k not in EDGE_KINDS:
            raise InvalidFunction(f"{f.name}: bad edge kind {k!r}")
    for b in f.dead_blocks:
        if b.host not in known or f.block(b.host).is_dead_branch:
            raise InvalidFunction(f"{f.name}: dead block {b.id} has no live host")
    if f.block(f.entry).is_dead_branch:
        raise InvalidFunction(f"{f.name}: entry is a dead block")


def function_from_record(rec: dict) -> BinaryFunction:
    blocks = []
    for b in rec["blocks"]:
        dead = b.get("dead")
        insns = tuple(parse_instruction(t) for t in b["insns"])
        if dead:
            blocks.append(BasicBlock(int(b["id"]), insns, True, int(dead["host"]),
                                     tuple(parse_instruction(t) for t in dead["guard"])))
        else:
            blocks.append(BasicBlock(int(b["id"]), insns))
    edges = tuple((int(s), int(d), str(k)) for s, d, k in rec["edges"])
    f = BinaryFunction(str(rec["name"]), tuple(blocks), edges, int(rec["entry"]))
    validate(f)
    return f


def function_to_record(f: BinaryFunction) -> dict:
    blocks = []
    for b in f.blocks:
        rec = {"id": b.id, "insns": [i.render() for i in b.instructions]}
        if b.is_dead_branch:
            rec["dead"] = {"host": b.host, "guard": [i.render() for i in b.guard]}
        blocks.append(rec)
    return {"name": f.name, "entry": f.entry, "blocks": blocks,
            "edges": [list(e) for e in f.edges]}


def load_corpus(path: str | Path, min_instructions: int = MIN_INSTRUCTIONS) -> list[BinaryFunction]:
    """Read a JSONL corpus; functions below ``min_instructions`` are dropped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(lineno, f"invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise SchemaError(lineno, "record is not an object")
            missing = {"name", "entry", "blocks", "edges"} - rec.keys()
            if missing:
                raise SchemaError(lineno, f"missing fields {sorted(missing)}")
            try:
                f = function_from_record(rec)
            except ParseError:
                raise
            except (KeyError, TypeError, ValueError) as e:
                raise SchemaError(lineno, f"{type(e).__name__}: {e}") from None
            if f.instruction_count() >= min_instructions:
                out.append(f)
    return out


def save_corpus(functions: Iterable[BinaryFunction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in functions:
            fh.write(json.dumps(function_to_record(f), separators=(",", ":")) + "\n")


class PairStats(NamedTuple):
    instr_diff: int
    cfg_node_diff: int


def pair_stats(f1: BinaryFunction, f2: BinaryFunction) -> PairStats:
    return PairStats(abs(f1.instruction_count() - f2.instruction_count()),
                     abs(len(f1.blocks) - len(f2.blocks)))
