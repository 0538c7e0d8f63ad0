"""Seeded synthetic corpus: source "functions" compiled into several variants.

Variants of one source share the CFG and most instructions; they differ by
register renaming, idiom substitution and small insertions/deletions, which
is roughly what a different compiler setting does.  Names are
``src{k}_v{j}``; variants of the same ``src{k}`` form similar pairs.
"""
from __future__ import annotations

import numpy as np

from .asm import normalize_for_sequence, parse_instruction
from .cfg import BasicBlock, BinaryFunction

REGS = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13")
REGS32 = {"rax": "eax", "rbx": "ebx", "rcx": "ecx", "rdx": "edx", "rsi": "esi", "rdi": "edi",
          "r8": "r8d", "r9": "r9d", "r10": "r10d", "r11": "r11d", "r12": "r12d", "r13": "r13d"}
XREGS = tuple(f"xmm{i}" for i in range(8))
JCC = ("je", "jne", "jg", "jge", "jl", "jle", "ja", "jae", "jb", "jbe", "js", "jns")
ALU = ("add", "sub", "and", "or", "xor", "imul")
SHIFT = ("shl", "shr", "sar", "rol")
SSE = ("addsd", "subsd", "mulsd", "divsd", "addss", "mulss", "pxor", "xorps", "andps", "minsd")
CALLEES = tuple(f"fn_{k}" for k in range(40))


def _mem(rng) -> str:
    size = rng.choice(["qword", "dword"])
    form = rng.integers(4)
    if form == 0:
        return f"{size} ptr [rbp-{int(rng.integers(1, 40)) * 8:#x}]"
    if form == 1:
        return f"{size} ptr [{rng.choice(REGS)}+{int(rng.integers(0, 16)) * 8:#x}]"
    if form == 2:
        return f"{size} ptr [{rng.choice(REGS)}+{rng.choice(REGS)}*{rng.choice([1, 2, 4, 8])}]"
    return f"{size} ptr [rip+{int(rng.integers(0x100, 0x4000)):#x}]"


def _imm(rng) -> int:
    return int(rng.choice([0, 1, 1, 2, 4, 8, 16, 255, -1, int(rng.integers(256, 70000))]))


def _body_instruction(rng, style: np.ndarray) -> str:
    kind = rng.choice(len(style), p=style)
    r, s = rng.choice(REGS), rng.choice(REGS)
    if kind == 0:
        return f"mov {r}, {_mem(rng)}"
    if kind == 1:
        return f"mov {_mem(rng)}, {r}"
    if kind == 2:
        return f"mov {r}, {s}" if rng.random() < 0.6 else f"mov {r}, {_imm(rng)}"
    if kind == 3:
        op = rng.choice(ALU)
        if op == "imul":
            return f"imul {r}, {s}"
        return f"{op} {r}, {s}" if rng.random() < 0.5 else f"{op} {r}, {_imm(rng)}"
    if kind == 4:
        return f"lea {r}, {_mem(rng)}"
    if kind == 5:
        return f"call {rng.choice(CALLEES)}"
    if kind == 6:
        return f"{rng.choice(SHIFT)} {r}, {int(rng.integers(1, 8))}"
    if kind == 7:
        op = rng.choice(["movzx", "movsx"])
        return f"{op} {REGS32[r]}, byte ptr [{s}+{int(rng.integers(0, 8))}]"
    if kind == 8:
        return f"{rng.choice(SSE)} {rng.choice(XREGS)}, {rng.choice(XREGS)}"
    if kind == 9:
        return f"cmp {r}, {s}" if rng.random() < 0.5 else f"test {r}, {r}"
    return f"{rng.choice(['inc', 'dec', 'neg', 'not'])} {r}"


_N_KINDS = 11


def _source(rng) -> dict:
    style = rng.dirichlet(np.full(_N_KINDS, 0.6))
    n_blocks = int(rng.integers(1, 11))
    blocks, terms = [], []
    for k in range(n_blocks):
        body = [_body_instruction(rng, style) for _ in range(int(rng.integers(2, 9)))]
        last = k == n_blocks - 1
        if last:
            term = ("ret", None)
        else:
            roll = rng.random()
            target = int(rng.integers(n_blocks))
            if roll < 0.5:
                term = ("jcc", target)
                body.append(f"cmp {rng.choice(REGS)}, {_imm(rng)}")
            elif roll < 0.7:
                term = ("jmp", target)
            else:
                term = ("fall", None)
        blocks.append(body)
        terms.append(term)
    return {"blocks": blocks, "terms": terms, "style": style, "jcc": [rng.choice(JCC) for _ in blocks]}


_SUBST = (
    (lambda t: t.startswith("add ") and t.endswith(", 1"), lambda t: "inc " + t[4:-3]),
    (lambda t: t.startswith("sub ") and t.endswith(", 1"), lambda t: "dec " + t[4:-3]),
    (lambda t: t.startswith("mov ") and t.endswith(", 0") and "[" not in t,
     lambda t: "xor {0}, {0}".format(t[4:-3])),
    (lambda t: t.startswith("test "), lambda t: "cmp {}, 0".format(t.split()[1].rstrip(","))),
)


def _rename(text: str, mapping: dict) -> str:
    out = []
    for tok in text.replace(",", " , ").replace("[", " [ ").replace("]", " ] ").replace("+", " + ").replace("*", " * ").split():
        out.append(mapping.get(tok, tok))
    s = " ".join(out)
    for a, b in ((" , ", ", "), ("[ ", "["), (" ]", "]"), (" + ", "+"), (" * ", "*")):
        s = s.replace(a, b)
    return s


def _variant(src: dict, name: str, rng) -> BinaryFunction:
    perm = rng.permutation(len(REGS))
    mapping = {}
    for a, b in zip(REGS, (REGS[p] for p in perm)):
        if rng.random() < 0.35:
            mapping[a], mapping[REGS32[a]] = b, REGS32[b]
    blocks, edges = [], []
    for k, body in enumerate(src["blocks"]):
        insns = []
        for text in body:
            if rng.random() < 0.06 and len(body) > 2:
                continue  # dropped
            text = _rename(text, mapping)
            if rng.random() < 0.5:
                for test, sub in _SUBST:
                    if test(text):
                        text = sub(text)
                        break
            insns.append(text)
            if rng.random() < 0.06:
                insns.append(_body_instruction(rng, src["style"]))
        kind, target = src["terms"][k]
        if kind == "ret":
            insns.append("ret")
        elif kind == "jcc":
            insns.append(f"{src['jcc'][k]} .L{target}")
            edges += [(k, k + 1, "fallthrough"), (k, target, "taken")]
        elif kind == "jmp":
            insns.append(f"jmp .L{target}")
            edges.append((k, target, "taken"))
        else:
            edges.append((k, k + 1, "fallthrough"))
        blocks.append(BasicBlock(k, tuple(parse_instruction(t) for t in insns)))
    return BinaryFunction(name, tuple(blocks), tuple(edges), 0)


def generate_corpus(n_sources: int = 200, variants: int = 3, seed: int = 0) -> list[BinaryFunction]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_sources):
        src = _source(rng)
        for j in range(variants):
            f = _variant(src, f"src{k:04d}_v{j}", rng)
            if f.instruction_count() >= 6:
                out.append(f)
    return out


def source_of(f: BinaryFunction) -> str:
    return f.name.rsplit("_v", 1)[0]


def labeled_pairs(functions: list[BinaryFunction], n_pairs: int, seed: int = 0) -> list[tuple]:
    """Half similar (same source, different variant), half dissimilar pairs."""
    rng = np.random.default_rng(seed)
    groups: dict[str, list[BinaryFunction]] = {}
    for f in functions:
        groups.setdefault(source_of(f), []).append(f)
    multi = [g for g in groups.values() if len(g) > 1]
    if not multi or len(groups) < 2:
        raise ValueError("corpus has no similar or no dissimilar pairs")
    pairs = []
    for k in range(n_pairs):
        if k % 2 == 0:
            g = multi[int(rng.integers(len(multi)))]
            a, b = rng.choice(len(g), 2, replace=False)
            pairs.append((g[a], g[b], 1))
        else:
            while True:
                a, b = rng.choice(len(functions), 2, replace=False)
                if source_of(functions[a]) != source_of(functions[b]):
                    break
            pairs.append((functions[a], functions[b], 0))
    return pairs


def token_corpus(functions: list[BinaryFunction]) -> list[list[str]]:
    return [[normalize_for_sequence(i) for i in f.linear_instructions()] for f in functions]
