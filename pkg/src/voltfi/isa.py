"""Micro-ISA used by the simulated boot processor, plus a small text assembler.

Every instruction is encoded in 8 bytes::

    byte 0   opcode
    byte 1   rd   (destination / source register for stores and OUT)
    byte 2   rn   (base / first operand register)
    byte 3   flags: bit0 = second operand is a register (held in bits 4-7),
                    bit1 = byte-sized access (LDR/STR/OUT-UART)
    byte 4-7 imm32, little-endian (immediate, absolute branch target,
             register mask for PUSH/POP, repeat count for NOP)

Source syntax is ARM-flavoured so that listings can be transcribed line by
line::

    push    {fp, lr}
    bl      is_fam
    cbz     r0, is_not_fam
    cmp     r0, 0
    ldrb    r0, [r1, #4]
    out.uart r0          ; low byte
    out.uart.w r0        ; full word, little-endian
    nop     #1200        ; 1200 back-to-back NOP slots
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from enum import IntEnum

INSTR_SIZE = 8


class Op(IntEnum):
    UDF = 0x00  # zero-filled memory decodes as undefined
    NOP = 0x01
    HALT = 0x02
    MOV = 0x10
    ADD = 0x11
    CMP = 0x12
    LDR = 0x20
    STR = 0x21
    PUSH = 0x30
    POP = 0x31
    B = 0x40
    BL = 0x41
    BEQ = 0x42
    BNE = 0x43
    CBZ = 0x44
    CBNZ = 0x45
    OUT_UART = 0x50
    OUT_GPIO = 0x51


ALU_OPS = frozenset({Op.MOV, Op.ADD})
COND_BRANCH_OPS = frozenset({Op.BEQ, Op.BNE, Op.CBZ, Op.CBNZ})
BRANCH_OPS = COND_BRANCH_OPS | {Op.B, Op.BL}

F_REG = 0x01
F_BYTE = 0x02

SP, LR, PC = 13, 14, 15
REG_NAMES = {f"r{i}": i for i in range(13)}
REG_NAMES.update({"fp": 11, "ip": 12, "sp": SP, "lr": LR, "pc": PC})


@dataclass(frozen=True)
class Instr:
    op: Op
    rd: int = 0
    rn: int = 0
    rm: int = 0
    use_reg: bool = False
    byte: bool = False
    imm: int = 0

    def encode(self) -> bytes:
        flags = (F_REG if self.use_reg else 0) | (F_BYTE if self.byte else 0) | (self.rm << 4)
        return struct.pack("<BBBBI", self.op, self.rd, self.rn, flags, self.imm & 0xFFFFFFFF)

    @property
    def is_cond_branch(self) -> bool:
        return self.op in COND_BRANCH_OPS

    @property
    def is_alu(self) -> bool:
        return self.op in ALU_OPS


class DecodeError(ValueError):
    pass


def decode(raw: bytes) -> Instr:
    if len(raw) != INSTR_SIZE:
        raise DecodeError("short instruction")
    opcode, rd, rn, flags, imm = struct.unpack("<BBBBI", raw)
    try:
        op = Op(opcode)
    except ValueError:
        raise DecodeError(f"bad opcode 0x{opcode:02x}") from None
    if op is Op.UDF or rd > 15 or rn > 15:
        raise DecodeError(f"undefined instruction {raw.hex()}")
    return Instr(op, rd, rn, flags >> 4, bool(flags & F_REG), bool(flags & F_BYTE), imm)


class AsmError(ValueError):
    pass


@dataclass
class Program:
    """Assembled code with its symbol table and source line map."""

    base: int
    code: bytes
    labels: dict[str, int]
    # address -> (source name, 1-based line number)
    lines: dict[int, tuple[str, int]] = field(default_factory=dict)

    def addr(self, label: str) -> int:
        return self.labels[label]

    def addr_of_line(self, source: str, line: int) -> int:
        for a, where in self.lines.items():
            if where == (source, line):
                return a
        raise KeyError(f"no instruction at {source}:{line}")

    def line_of(self, addr: int) -> tuple[str, int] | None:
        return self.lines.get(addr)

    def label_at(self, addr: int) -> str | None:
        for name, a in self.labels.items():
            if a == addr:
                return name
        return None

    @property
    def end(self) -> int:
        return self.base + len(self.code)


_LABEL_RE = re.compile(r"^\s*([A-Za-z_.][\w.]*)\s*:\s*(.*)$")
_MEM_RE = re.compile(r"^\[\s*(\w+)\s*(?:,\s*#?(.+?))?\s*\]$")


def _strip_comment(line: str) -> str:
    out, in_str = [], False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if not in_str and ch in ";@":
            break
        out.append(ch)
    return "".join(out).strip()


def _split_operands(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        parts.append("".join(cur).strip())
    return parts


class Assembler:
    """Two-pass assembler for the micro-ISA.

    Sources are added as named chunks so that line numbers in the resulting
    :class:`Program` refer back to the chunk they came from.
    """

    def __init__(self, base: int, symbols: dict[str, int] | None = None):
        self.base = base
        self.symbols = dict(symbols or {})
        self._chunks: list[tuple[str, str]] = []

    def add(self, name: str, source: str) -> "Assembler":
        self._chunks.append((name, source))
        return self

    def assemble(self) -> Program:
        items = []  # (kind, payload, where)
        for name, src in self._chunks:
            for lineno, raw in enumerate(src.splitlines(), start=1):
                text = _strip_comment(raw)
                while True:
                    m = _LABEL_RE.match(text)
                    if not m or m.group(1).lower() in _MNEMONICS:
                        break
                    items.append(("label", m.group(1), (name, lineno)))
                    text = m.group(2).strip()
                if text:
                    items.append(("stmt", text, (name, lineno)))

        labels: dict[str, int] = {}
        addr = self.base
        for kind, payload, where in items:
            if kind == "label":
                if payload in labels:
                    raise AsmError(f"duplicate label {payload!r} at {where}")
                labels[payload] = addr
            else:
                addr += self._size(payload, addr, where)

        env = {**self.symbols, **labels}
        out = bytearray()
        lines: dict[int, tuple[str, int]] = {}
        addr = self.base
        for kind, payload, where in items:
            if kind != "stmt":
                continue
            blob, is_code = self._emit(payload, addr, env, where)
            if is_code:
                lines[addr] = where
            out += blob
            addr += len(blob)
        return Program(self.base, bytes(out), labels, lines)

    # -- helpers ---------------------------------------------------------

    def _size(self, stmt: str, addr: int, where) -> int:
        mnem, _, rest = stmt.partition(" ")
        mnem = mnem.lower()
        if mnem == ".ascii" or mnem == ".asciz":
            n = len(_parse_string(rest.strip(), where))
            return n + (1 if mnem == ".asciz" else 0)
        if mnem == ".word":
            return 4 * len(_split_operands(rest))
        if mnem == ".space":
            return _eval(rest.strip(), self.symbols, where)
        if mnem == ".align":
            n = _eval(rest.strip(), self.symbols, where)
            return (-addr) % n
        return INSTR_SIZE

    def _emit(self, stmt: str, addr: int, env: dict[str, int], where) -> tuple[bytes, bool]:
        mnem, _, rest = stmt.partition(" ")
        mnem = mnem.lower()
        rest = rest.strip()
        if mnem in (".ascii", ".asciz"):
            data = _parse_string(rest, where)
            return data + (b"\0" if mnem == ".asciz" else b""), False
        if mnem == ".word":
            return b"".join(struct.pack("<I", _eval(x, env, where) & 0xFFFFFFFF)
                            for x in _split_operands(rest)), False
        if mnem == ".space":
            return bytes(_eval(rest, env, where)), False
        if mnem == ".align":
            return bytes((-addr) % _eval(rest, env, where)), False
        if mnem not in _MNEMONICS:
            raise AsmError(f"unknown mnemonic {mnem!r} at {where}")
        ops = _split_operands(rest)
        return _MNEMONICS[mnem](ops, env, where).encode(), True


def _parse_string(text: str, where) -> bytes:
    if len(text) < 2 or text[0] != '"' or text[-1] != '"':
        raise AsmError(f"expected string literal at {where}")
    return text[1:-1].encode("latin-1").decode("unicode_escape").encode("latin-1")


def _eval(expr: str, env: dict[str, int], where) -> int:
    expr = expr.strip().lstrip("#").strip()
    tokens = re.split(r"(\s*[+-]\s*)", expr)
    total, sign = 0, 1
    for tok in tokens:
        t = tok.strip()
        if not t:
            continue
        if t in "+-":
            sign = 1 if t == "+" else -1
            continue
        if t in env:
            val = env[t]
        else:
            try:
                val = int(t, 0)
            except ValueError:
                raise AsmError(f"cannot evaluate {expr!r} at {where}") from None
        total += sign * val
        sign = 1
    return total


def _reg(tok: str, where) -> int:
    try:
        return REG_NAMES[tok.strip().lower()]
    except KeyError:
        raise AsmError(f"bad register {tok!r} at {where}") from None


def _is_reg(tok: str) -> bool:
    return tok.strip().lower() in REG_NAMES


def _want(ops, n, where):
    if len(ops) != n:
        raise AsmError(f"expected {n} operands at {where}, got {ops}")


def _mov(ops, env, where):
    _want(ops, 2, where)
    if _is_reg(ops[1]):
        return Instr(Op.MOV, rd=_reg(ops[0], where), rm=_reg(ops[1], where), use_reg=True)
    return Instr(Op.MOV, rd=_reg(ops[0], where), imm=_eval(ops[1], env, where))


def _add(ops, env, where):
    _want(ops, 3, where)
    rd, rn = _reg(ops[0], where), _reg(ops[1], where)
    if _is_reg(ops[2]):
        return Instr(Op.ADD, rd=rd, rn=rn, rm=_reg(ops[2], where), use_reg=True)
    return Instr(Op.ADD, rd=rd, rn=rn, imm=_eval(ops[2], env, where))


def _cmp(ops, env, where):
    _want(ops, 2, where)
    if _is_reg(ops[1]):
        return Instr(Op.CMP, rn=_reg(ops[0], where), rm=_reg(ops[1], where), use_reg=True)
    return Instr(Op.CMP, rn=_reg(ops[0], where), imm=_eval(ops[1], env, where))


def _mem(op, byte):
    def build(ops, env, where):
        _want(ops, 2, where)
        m = _MEM_RE.match(ops[1])
        if not m:
            raise AsmError(f"bad memory operand {ops[1]!r} at {where}")
        off = _eval(m.group(2), env, where) if m.group(2) else 0
        return Instr(op, rd=_reg(ops[0], where), rn=_reg(m.group(1), where), byte=byte, imm=off)
    return build


def _reglist(ops, where) -> int:
    text = ",".join(ops).strip()
    if not (text.startswith("{") and text.endswith("}")):
        raise AsmError(f"expected register list at {where}")
    mask = 0
    for tok in text[1:-1].split(","):
        tok = tok.strip()
        if "-" in tok:
            a, b = (_reg(x, where) for x in tok.split("-"))
            for r in range(a, b + 1):
                mask |= 1 << r
        elif tok:
            mask |= 1 << _reg(tok, where)
    return mask


def _branch(op):
    def build(ops, env, where):
        _want(ops, 1, where)
        return Instr(op, imm=_eval(ops[0], env, where))
    return build


def _cbranch(op):
    def build(ops, env, where):
        _want(ops, 2, where)
        return Instr(op, rn=_reg(ops[0], where), imm=_eval(ops[1], env, where))
    return build


def _out(op, byte):
    def build(ops, env, where):
        _want(ops, 1, where)
        return Instr(op, rd=_reg(ops[0], where), byte=byte)
    return build


def _nop(ops, env, where):
    count = _eval(ops[0], env, where) if ops else 1
    if count < 1:
        raise AsmError(f"nop repeat count must be >= 1 at {where}")
    return Instr(Op.NOP, imm=count)


_MNEMONICS = {
    "nop": _nop,
    "halt": lambda ops, env, where: Instr(Op.HALT),
    "udf": lambda ops, env, where: Instr(Op.UDF),
    "mov": _mov,
    "add": _add,
    "cmp": _cmp,
    "ldr": _mem(Op.LDR, False),
    "ldrb": _mem(Op.LDR, True),
    "str": _mem(Op.STR, False),
    "strb": _mem(Op.STR, True),
    "push": lambda ops, env, where: Instr(Op.PUSH, imm=_reglist(ops, where)),
    "pop": lambda ops, env, where: Instr(Op.POP, imm=_reglist(ops, where)),
    "b": _branch(Op.B),
    "bl": _branch(Op.BL),
    "beq": _branch(Op.BEQ),
    "bne": _branch(Op.BNE),
    "cbz": _cbranch(Op.CBZ),
    "cbnz": _cbranch(Op.CBNZ),
    "out.uart": _out(Op.OUT_UART, True),
    "out.uart.w": _out(Op.OUT_UART, False),
    "out.gpio": _out(Op.OUT_GPIO, False),
}


def assemble(source: str, base: int, symbols: dict[str, int] | None = None,
             name: str = "main") -> Program:
    return Assembler(base, symbols).add(name, source).assemble()
