"""x86-64 instruction subset: parsing, rendering, normalization, categories.

Intel syntax only.  The supported mnemonics, their operand slots and their
category assignments live in ``data/mnemonics.tsv``.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

GPR64 = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
         "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")
GPR32 = ("eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp",
         "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d")
GPR16 = ("ax", "bx", "cx", "dx", "si", "di", "bp", "sp",
         "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w")
GPR8 = ("al", "bl", "cl", "dl", "sil", "dil", "bpl", "spl",
        "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b",
        "ah", "bh", "ch", "dh")
XMM = tuple(f"xmm{i}" for i in range(16))
GPRS = frozenset(GPR64 + GPR32 + GPR16 + GPR8)
REGISTERS = GPRS | frozenset(XMM) | {"rip"}
STACK_POINTER = frozenset({"rsp", "esp", "sp", "spl"})

SIZE_PREFIXES = ("byte", "word", "dword", "qword", "xmmword")

# |imm| above this becomes a placeholder token in sequence normalization
IMM_CUTOFF = 255

GEMINI_CATEGORIES = ("const", "transfer", "call", "arithmetic", "other")
N_GMN_CLASSES = 200


class ParseError(ValueError):
    """Raised for text that is not a supported instruction."""

    def __init__(self, message: str, token: str):
        super().__init__(f"{message}: {token!r}")
        self.token = token


class UnknownMnemonic(ParseError):
    def __init__(self, token: str):
        super().__init__("unknown mnemonic", token)


class MalformedOperand(ParseError):
    def __init__(self, token: str, reason: str = "malformed operand"):
        super().__init__(reason, token)


@dataclass(frozen=True)
class MnemonicInfo:
    mnemonic: str
    arity: int
    slots: tuple[str, ...]
    gemini_category: str
    gmn_class: int


@lru_cache(maxsize=None)
def mnemonic_table() -> dict[str, MnemonicInfo]:
    text = resources.files("deadbranch").joinpath("data/mnemonics.tsv").read_text()
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    table = {}
    for row in csv.DictReader(lines, delimiter="\t"):
        slots = () if row["operands"] == "-" else tuple(row["operands"].split(","))
        info = MnemonicInfo(row["mnemonic"], int(row["arity"]), slots,
                            row["gemini_category"], int(row["gmn_class"]))
        assert len(info.slots) == info.arity, info
        table[info.mnemonic] = info
    return table


@dataclass(frozen=True)
class Operand:
    kind: str  # register | immediate | memory | label
    register: str | None = None
    value: int | None = None
    index: str | None = None
    scale: int | None = None
    size: str | None = None
    label: str | None = None

    def __post_init__(self):
        k = self.kind
        if k == "register":
            ok = self.register is not None and self._only("register")
        elif k == "immediate":
            ok = self.value is not None and self._only("value")
        elif k == "label":
            ok = self.label is not None and self._only("label")
        elif k == "memory":
            ok = self.label is None and (self.index is None) == (self.scale is None)
            ok = ok and (self.register is not None or self.index is not None
                         or self.value is not None)
        else:
            ok = False
        if not ok:
            raise ValueError(f"inconsistent operand fields for kind {k!r}: {self}")

    def _only(self, name: str) -> bool:
        return all(getattr(self, f) is None
                   for f in ("register", "value", "index", "scale", "size", "label")
                   if f != name)

    @staticmethod
    def reg(name: str) -> Operand:
        return Operand("register", register=name)

    @staticmethod
    def imm(value: int) -> Operand:
        return Operand("immediate", value=value)

    @staticmethod
    def lab(name: str) -> Operand:
        return Operand("label", label=name)

    @property
    def code(self) -> str:
        if self.kind == "register":
            return "x" if self.register in XMM else "r"
        return {"immediate": "i", "memory": "m", "label": "l"}[self.kind]

    def render(self) -> str:
        if self.kind == "register":
            return self.register
        if self.kind == "immediate":
            return _fmt_int(self.value)
        if self.kind == "label":
            return self.label
        parts = []
        if self.register is not None:
            parts.append(self.register)
        if self.index is not None:
            parts.append(f"{self.index}*{self.scale}")
        body = "+".join(parts)
        if self.value is not None:
            if not body:
                body = _fmt_int(self.value)
            elif self.value < 0:
                body += "-" + _fmt_int(-self.value)
            else:
                body += "+" + _fmt_int(self.value)
        prefix = f"{self.size} ptr " if self.size else ""
        return f"{prefix}[{body}]"


def _fmt_int(v: int) -> str:
    if -10 < v < 10:
        return str(v)
    return f"-{-v:#x}" if v < 0 else f"{v:#x}"


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple[Operand, ...] = ()
    raw_text: str = field(default="", compare=False)

    def render(self) -> str:
        if not self.operands:
            return self.mnemonic
        return f"{self.mnemonic} " + ", ".join(op.render() for op in self.operands)

    def __str__(self) -> str:
        return self.render()

    @property
    def info(self) -> MnemonicInfo:
        return mnemonic_table()[self.mnemonic]


@dataclass(frozen=True)
class InstructionCategory:
    gemini_category: str
    gmn_class: int


_INT_RE = re.compile(r"[+-]?(0x[0-9a-f]+|[0-9]+)h?$")
_LABEL_RE = re.compile(r"[A-Za-z_.$][\w.$@]*$")


def _parse_int(tok: str) -> int | None:
    t = tok.strip().lower()
    if not _INT_RE.match(t):
        return None
    if t.endswith("h"):
        sign = -1 if t.startswith("-") else 1
        return sign * int(t.lstrip("+-")[:-1], 16)
    return int(t, 0)


def _parse_memory(tok: str) -> Operand:
    m = re.match(r"(?:(byte|word|dword|qword|xmmword)\s+ptr\s+)?\[(.*)\]$", tok)
    if not m:
        raise MalformedOperand(tok)
    size, body = m.group(1), m.group(2).replace(" ", "")
    if not body:
        raise MalformedOperand(tok)
    base = index = scale = None
    disp = None
    for sign, term in re.findall(r"([+-]?)([^+-]+)", body):
        if "*" in term:
            reg, _, sc = term.partition("*")
            if reg not in GPRS or index is not None or sign == "-" or sc not in ("1", "2", "4", "8"):
                raise MalformedOperand(tok)
            index, scale = reg, int(sc)
        elif term in REGISTERS:
            if sign == "-":
                raise MalformedOperand(tok)
            if base is None:
                base = term
            elif index is None:
                index, scale = term, 1
            else:
                raise MalformedOperand(tok)
        else:
            v = _parse_int(term)
            if v is None:
                raise MalformedOperand(tok)
            v = -v if sign == "-" else v
            disp = v if disp is None else disp + v
    return Operand("memory", register=base, value=disp, index=index, scale=scale, size=size)


def parse_operand(tok: str) -> Operand:
    tok = tok.strip()
    low = tok.lower()
    if not tok:
        raise MalformedOperand(tok, "empty operand")
    if low in REGISTERS:
        if low == "rip":
            raise MalformedOperand(tok, "rip is only valid inside memory operands")
        return Operand.reg(low)
    if "[" in low:
        return _parse_memory(low)
    v = _parse_int(low)
    if v is not None:
        return Operand.imm(v)
    if _LABEL_RE.match(tok):
        return Operand.lab(tok)
    raise MalformedOperand(tok)


def _split_operands(text: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return out


def parse_instruction(text: str) -> Instruction:
    """Parse one Intel-syntax line, e.g. ``"add rax, 0x10"``.

    Raises UnknownMnemonic or MalformedOperand naming the offending token.
    """
    line = text.split(";", 1)[0].strip()
    if not line:
        raise MalformedOperand(text, "empty instruction")
    head, _, rest = line.partition(" ")
    mnemonic = head.lower()
    info = mnemonic_table().get(mnemonic)
    if info is None:
        raise UnknownMnemonic(head)
    rest = rest.strip()
    toks = _split_operands(rest) if rest else []
    if len(toks) != info.arity:
        raise MalformedOperand(line, f"{mnemonic} takes {info.arity} operand(s), got {len(toks)}")
    ops = tuple(parse_operand(t) for t in toks)
    for op, slot, tok in zip(ops, info.slots, toks):
        if op.code not in slot:
            raise MalformedOperand(tok.strip(), f"operand kind not allowed for {mnemonic}")
    if sum(op.kind == "memory" for op in ops) > 1:
        raise MalformedOperand(line, "at most one memory operand")
    return Instruction(mnemonic, ops, raw_text=text)


def render(i: Instruction) -> str:
    return i.render()


def canonical(text: str) -> str:
    return parse_instruction(text).render()


def normalize_for_sequence(i: Instruction) -> str:
    """Filtered token used by the sequence model, e.g. ``mov_rax_MEM``."""
    parts = [i.mnemonic]
    for op in i.operands:
        if op.kind == "register":
            parts.append(op.register)
        elif op.kind == "immediate":
            parts.append(str(op.value) if abs(op.value) <= IMM_CUTOFF else "IMM")
        elif op.kind == "memory":
            parts.append("MEM")
        else:
            parts.append("LABEL")
    return "_".join(parts)


def categorize(i: Instruction) -> InstructionCategory:
    info = i.info
    cat = info.gemini_category
    if cat == "other" and any(op.kind == "immediate" for op in i.operands):
        cat = "const"
    return InstructionCategory(cat, info.gmn_class)
