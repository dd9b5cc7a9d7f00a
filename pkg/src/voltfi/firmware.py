"""Synthetic boot firmware and the standalone fixture programs.

The boot ROM mirrors the real reset flow: the reset handler bumps
PIROM_START from 0x400 to 0x2000, calls ApplyIromPatches and the non-secure
dispatcher (whose second entry is the fuse check guarding
NvBootUartDownload), then jumps into the protected section at 0x1200.  The
protected section loads the FEKs, decrypts the key blob, probes QSPI,
decrypts MB1 and finally hands over to MB2, dropping SECURE_BOOT and moving
PIROM_START to 0x1200 on the way out.

Long waits are ``nop #n`` sleds.  :func:`generate_device` sizes them with a
clean simulation so that each timeline event lands on the first instruction
boundary at or after its configured time.
"""

from __future__ import annotations

import functools
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from . import machine as mm
from .crypto import engine as ce
from .isa import Assembler, Program

PROMPT = b"NV-UART-BOOT>"
PROTECTED_OFFSET = 0x1200
RESET_PIROM_UPDATE = (0x400, 0x2000)
MB2_PIROM_START = 0x1200

# Fuse-word pattern the hardened check demands before it opens the loader.
HARDENED_MAGIC = 0xA5C3_96E7

MMIO_SYMBOLS = {
    "UART_TX": mm.UART_TX_ADDR,
    "GPIO_OUT": mm.GPIO_OUT_ADDR,
    "SB_CFG": mm.SB_CFG_ADDR,
    "SB_PIROM_START": mm.SB_PIROM_START_ADDR,
    "FUSE_FA_MODE": mm.FUSE_FA_MODE_ADDR,
    "FUSE_PREPRODUCTION": mm.FUSE_PREPRODUCTION_ADDR,
    "CE_CMD": mm.CE_CMD_ADDR,
    "QSPI_CTRL": mm.QSPI_CTRL_ADDR,
    "BOOT_EVENT": mm.BOOT_EVENT_ADDR,
    "HARDENED_MAGIC": HARDENED_MAGIC,
}

# Fuse check guarding the UART loader, one source line per listing line.
LISTING_2 = """\
    push    {fp, lr}
    bl      is_fam
    cbz     r0, is_not_fam
is_fam_or_ppm:
    bl      is_ppm
    cbnz    r0, exit
    bl      NvBootUartDownload
is_not_fam:
    bl      is_ppm
    cmp     r0, 0
    bne     is_fam_or_ppm
exit:
    pop     {fp, pc}
"""

# Signature check whose failure branch can be skipped.
LISTING_1 = """\
    push    {fp, lr}
    bl      load_further_code
    bl      sig_verify
    cbz     r0, sigcheck_failed
    bl      call_authenticated_code
sigcheck_failed:
    bl      signify_auth_error
.hang:
    b       .hang
"""

FUSE_HELPERS = """\
is_fam:
    mov     r1, #FUSE_FA_MODE
    ldr     r0, [r1, #0]
    mov     pc, lr
is_ppm:
    mov     r1, #FUSE_PREPRODUCTION
    ldr     r0, [r1, #0]
    mov     pc, lr
"""

# Every condition is read twice and confirmed by three compare/branch pairs
# against an immediate high Hamming-weight pattern.  No MOV writes pc and no
# compare depends on a register that a skipped load could leave stale.
HARDENED_CHECK = """\
    push    {r4, r5, lr}
    mov     r1, #FUSE_FA_MODE
    ldr     r4, [r1, #0]
    ldr     r5, [r1, #0]
    cmp     r4, #HARDENED_MAGIC
    bne     hc_check_ppm
    cmp     r5, #HARDENED_MAGIC
    bne     hc_check_ppm
    cmp     r4, #HARDENED_MAGIC
    bne     hc_check_ppm
    bl      NvBootUartDownload
hc_check_ppm:
    mov     r1, #FUSE_PREPRODUCTION
    ldr     r4, [r1, #0]
    ldr     r5, [r1, #0]
    cmp     r4, #HARDENED_MAGIC
    bne     hc_exit
    cmp     r5, #HARDENED_MAGIC
    bne     hc_exit
    cmp     r4, #HARDENED_MAGIC
    bne     hc_exit
    bl      NvBootUartDownload
hc_exit:
    pop     {r4, r5, pc}
hc_return_guard:
    b       hc_return_guard
"""

UART_DOWNLOAD = """\
NvBootUartDownload:
    mov     r1, #uart_prompt
    mov     r3, #UART_TX
prompt_loop:
    ldrb    r0, [r1, #0]
    cbz     r0, prompt_done
    strb    r0, [r3, #0]
    add     r1, r1, #1
    b       prompt_loop
prompt_done:
    mov     r1, #BOOT_EVENT
    mov     r0, #2
    str     r0, [r1, #0]
download_wait:
    b       download_wait
"""

RESET = """\
reset:
    mov     r1, #SB_PIROM_START
    mov     r0, #{pirom_to}
    str     r0, [r1, #0]
    bl      ApplyIromPatches
    bl      NonSecureDispatcher
    b       ProtectedEntry
ApplyIromPatches:
    push    {{lr}}
    pop     {{pc}}
NonSecureDispatcher:
    push    {{r4, lr}}
    bl      InitClocks
    bl      NvBootMainNonsecureRomEnter
    pop     {{r4, pc}}
InitClocks:
    push    {{lr}}
    nop     #{sled_init}
    pop     {{pc}}
"""

PROTECTED = """\
ProtectedEntry:
    mov     r1, #CE_CMD
    mov     r0, #1
    str     r0, [r1, #0]
    mov     r0, #2
    str     r0, [r1, #0]
    nop     #{sled_qspi}
    mov     r1, #QSPI_CTRL
qspi_probe:
    str     r0, [r1, #0]
    mov     r1, #CE_CMD
    mov     r0, #3
    str     r0, [r1, #0]
    ldr     r0, [r1, #4]
    cmp     r0, 0
    bne     boot_failed
    nop     #{sled_mb2}
    mov     r1, #SB_PIROM_START
    mov     r0, #{mb2_pirom}
    str     r0, [r1, #0]
    mov     r1, #SB_CFG
    mov     r0, #0
    str     r0, [r1, #0]
    mov     r1, #BOOT_EVENT
    mov     r0, #1
mb2_entry:
    str     r0, [r1, #0]
boot_failed:
    b       boot_failed
"""


def _rom_data() -> str:
    return "    .align 8\nuart_prompt:\n    .asciz \"" + PROMPT.decode() + "\"\n    .align 8\n"


def assemble_boot_rom(sleds: dict[str, int], hardened: bool = False) -> Program:
    protected_base = mm.IROM_BASE + PROTECTED_OFFSET
    chunks = [
        ("reset", RESET.format(pirom_to=RESET_PIROM_UPDATE[1], sled_init=sleds["init"])),
        ("prologue", "NvBootMainNonsecureRomEnter:\n"),
        ("fusecheck", HARDENED_CHECK if hardened else LISTING_2),
    ]
    if not hardened:
        chunks.append(("helpers", FUSE_HELPERS))
    chunks += [("download", UART_DOWNLOAD), ("data", _rom_data())]
    sizing = Assembler(mm.IROM_BASE, {**MMIO_SYMBOLS, "ProtectedEntry": protected_base})
    for name, src in chunks:
        sizing.add(name, src)
    pad = protected_base - sizing.assemble().end
    if pad < 0:
        raise ValueError("non-secure boot code overflows into the protected region")
    chunks.append(("pad", f"    .space {pad}\n"))
    chunks.append(("protected", PROTECTED.format(sled_qspi=sleds["qspi"], sled_mb2=sleds["mb2"],
                                                 mb2_pirom=MB2_PIROM_START)))
    asm = Assembler(mm.IROM_BASE, MMIO_SYMBOLS)
    for name, src in chunks:
        asm.add(name, src)
    return asm.assemble()


@dataclass(frozen=True, eq=False)
class BootImage:
    """A synthetic device: iROM contents, fused personality and boot medium."""

    irom_bytes: bytes
    fek: ce.FekSource
    mb1_image: bytes
    labels: dict[str, int]
    lines: dict[int, tuple[str, int]]
    fuse_check_time_ns: int
    qspi_probe_time_ns: int = 4_420_000
    mb2_entry_time_ns: int = 172_000_000
    reset_pirom_update: tuple[int, int] = RESET_PIROM_UPDATE
    tick_ns: int = 20
    ticks_per_instr: int = 12
    odm_secure: int = 0
    hardened: bool = False
    sleds: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.fuse_check_time_ns < self.qspi_probe_time_ns < self.mb2_entry_time_ns:
            raise ValueError("need fuse_check_time_ns < qspi_probe_time_ns < mb2_entry_time_ns")
        if len(self.irom_bytes) > mm.IROM_SIZE:
            raise ValueError("iROM image larger than 128 KiB")

    @property
    def key_blob(self) -> bytes:
        return self.irom_bytes[-ce.KEY_BLOB_SIZE:]

    def fuses(self) -> mm.FuseBank:
        return mm.FuseBank(fek2_select=self.fek.fek2_select, odm_secure=self.odm_secure)

    def make_machine(self) -> mm.Machine:
        return mm.Machine(self.irom_bytes, fuses=self.fuses(), fek_source=self.fek,
                          mb1_image=self.mb1_image, tick_ns=self.tick_ns,
                          ticks_per_instr=self.ticks_per_instr)

    @property
    def download_entry(self) -> int:
        return self.labels["NvBootUartDownload"]

    def program(self) -> Program:
        return Program(mm.IROM_BASE, self.irom_bytes, dict(self.labels), dict(self.lines))


@dataclass(frozen=True, eq=False)
class DeviceBundle:
    """Generated image plus the secrets only the generator knows."""

    image: BootImage
    mb1_plaintext: bytes
    mb1_key: bytes
    seed: int

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        img = self.image
        (out / "irom.bin").write_bytes(img.irom_bytes)
        (out / "mb1.bin").write_bytes(img.mb1_image)
        (out / "mb1_plain.bin").write_bytes(self.mb1_plaintext)
        manifest = {
            "format": 1,
            "seed": self.seed,
            "irom": {"file": "irom.bin", "base": mm.IROM_BASE, "size": len(img.irom_bytes)},
            "mb1": {"file": "mb1.bin", "plaintext_file": "mb1_plain.bin"},
            "timeline": {
                "fuse_check_time_ns": img.fuse_check_time_ns,
                "qspi_probe_time_ns": img.qspi_probe_time_ns,
                "mb2_entry_time_ns": img.mb2_entry_time_ns,
                "reset_pirom_update": list(img.reset_pirom_update),
                "tick_ns": img.tick_ns,
                "ticks_per_instr": img.ticks_per_instr,
                "sleds": img.sleds,
            },
            "device": {
                "fek1": img.fek.fek1.hex(),
                "fek2": img.fek.fek2.hex(),
                "fek2_select": img.fek.fek2_select,
                "odm_secure": img.odm_secure,
                "hardened": img.hardened,
                "mb1_key": self.mb1_key.hex(),
            },
            "key_blob": {"offset": len(img.irom_bytes) - ce.KEY_BLOB_SIZE, "size": ce.KEY_BLOB_SIZE,
                         "record_size": ce.RECORD_SIZE, "cipher": "AES-128-CBC", "iv": "00" * 16},
            "labels": {k: v for k, v in sorted(img.labels.items())},
            "lines": {str(a): list(w) for a, w in sorted(img.lines.items())},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, path) -> "DeviceBundle":
        path = Path(path)
        if path.is_file():
            path = path.parent
        m = json.loads((path / "manifest.json").read_text())
        tl, dev = m["timeline"], m["device"]
        fek = ce.FekSource(bytes.fromhex(dev["fek1"]), dev["fek2_select"], bytes.fromhex(dev["fek2"]))
        image = BootImage(
            irom_bytes=(path / m["irom"]["file"]).read_bytes(),
            fek=fek,
            mb1_image=(path / m["mb1"]["file"]).read_bytes(),
            labels=dict(m["labels"]),
            lines={int(a): tuple(w) for a, w in m["lines"].items()},
            fuse_check_time_ns=tl["fuse_check_time_ns"],
            qspi_probe_time_ns=tl["qspi_probe_time_ns"],
            mb2_entry_time_ns=tl["mb2_entry_time_ns"],
            reset_pirom_update=tuple(tl["reset_pirom_update"]),
            tick_ns=tl["tick_ns"],
            ticks_per_instr=tl["ticks_per_instr"],
            odm_secure=dev["odm_secure"],
            hardened=dev["hardened"],
            sleds=dict(tl["sleds"]),
        )
        plain = (path / m["mb1"]["plaintext_file"]).read_bytes()
        return cls(image, plain, bytes.fromhex(dev["mb1_key"]), m["seed"])


@dataclass(frozen=True)
class DeviceSpec:
    seed: int = 0
    fuse_check_time_ns: int = 2_634_000
    qspi_probe_time_ns: int = 4_420_000
    mb2_entry_time_ns: int = 172_000_000
    tick_ns: int = 20
    ticks_per_instr: int = 12
    fek2_select: int = ce.FEK2_FROM_TESTKEY
    odm_secure: int = 1
    hardened: bool = False
    mb1_size: int = 2048

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown device keys: {sorted(extra)}")
        return cls(**d)


def _event_times(image: BootImage, watch: dict[str, int]) -> dict[str, int]:
    """Clean run; start time of the first fetch of each watched address."""
    m = image.make_machine()
    m.reset_release(0)
    want = {addr: name for name, addr in watch.items()}
    seen: dict[str, int] = {}
    while m.state is mm.MachineState.RUNNING and len(seen) < len(want):
        if m.pc in want and want[m.pc] not in seen:
            seen[want[m.pc]] = m.clock_ns
        m.step()
    if len(seen) < len(want):
        raise RuntimeError(f"clean boot never reached {sorted(set(watch) - set(seen))}")
    return seen


def generate_device(spec: DeviceSpec | None = None) -> DeviceBundle:
    """Build a synthetic device deterministically from ``spec.seed``."""
    spec = spec or DeviceSpec()
    rng = random.Random(spec.seed)
    key = lambda: rng.randbytes(16)  # noqa: E731
    fek1, testkey, mb1_key, odm_reserved = key(), key(), key(), key()
    fek = ce.FekSource(fek1, spec.fek2_select, testkey)
    records = [(ce.MB1_SLOT, "MB1_KEY", mb1_key), (ce.ODM_RESERVED_SLOT, "ODM_RSVD", odm_reserved)]
    blob = ce.build_key_blob(fek1, records)
    banner = f"MB1 synthetic stage, seed {spec.seed}\n".encode()
    mb1_plain = banner + rng.randbytes(max(0, spec.mb1_size - len(banner)))
    odm_key = ce.derive_odm_key(fek.fek2_effective) if spec.odm_secure else None
    mb1_image = ce.encrypt_mb1(mb1_plain, mb1_key, odm_key)
    filler = rng.randbytes(mm.IROM_SIZE)

    def build(sleds):
        prog = assemble_boot_rom(sleds, spec.hardened)
        body = prog.code + filler[len(prog.code):mm.IROM_SIZE - ce.KEY_BLOB_SIZE]
        if len(prog.code) > mm.IROM_SIZE - ce.KEY_BLOB_SIZE:
            raise ValueError("boot code collides with the key blob")
        image = BootImage(body + blob, fek, mb1_image, prog.labels, prog.lines,
                          spec.fuse_check_time_ns, spec.qspi_probe_time_ns, spec.mb2_entry_time_ns,
                          tick_ns=spec.tick_ns, ticks_per_instr=spec.ticks_per_instr,
                          odm_secure=spec.odm_secure, hardened=spec.hardened, sleds=dict(sleds))
        return image, prog

    # NOPs are fixed-size, so resizing a sled moves later events by exactly
    # (delta * instr_ns) without moving any code.
    sleds = {"init": 1, "qspi": 1, "mb2": 1}
    image, prog = build(sleds)
    instr_ns = spec.tick_ns * spec.ticks_per_instr
    watch = {"init": prog.addr("NvBootMainNonsecureRomEnter"), "qspi": prog.addr("qspi_probe"),
             "mb2": prog.addr("mb2_entry")}
    targets = {"init": spec.fuse_check_time_ns, "qspi": spec.qspi_probe_time_ns,
               "mb2": spec.mb2_entry_time_ns}
    times = _event_times(image, watch)
    shift = 0
    for name in ("init", "qspi", "mb2"):
        gap = targets[name] - (times[name] + shift)
        if gap < 0:
            raise ValueError(f"{name} event cannot be placed at {targets[name]} ns; earliest is {times[name] + shift}")
        extra = -(-gap // instr_ns)
        sleds[name] += extra
        shift += extra * instr_ns
    image, prog = build(sleds)
    return DeviceBundle(image, mb1_plain, mb1_key, spec.seed)


# -- standalone fixtures --------------------------------------------------

ADD_LOOP_ITERATIONS = 2000
ADD_LOOP_CONSTANT = 0x1000

_ADD_LOOP = f"""\
start:
    mov     r0, #0
    mov     r3, #{ADD_LOOP_ITERATIONS}
loop:
    add     r0, r0, #1
    add     r1, r0, #{ADD_LOOP_CONSTANT}
    out.uart.w r1
    cmp     r0, r3
    bne     loop
    halt
"""

_SIGCHECK_MAIN = """\
start:
    mov     r0, #0x5a
    bl      sigcheck
    halt
sigcheck:
"""

_SIGCHECK_STUBS = """\
load_further_code:
    mov     pc, lr
sig_verify:
    mov     r0, #0
    mov     pc, lr
call_authenticated_code:
    mov     r0, #0x4b       ; 'K'
    out.uart r0
    halt
signify_auth_error:
    mov     r0, #0x46       ; 'F'
    out.uart r0
    mov     pc, lr
"""

_MAIN_CALLS_CHECK = """\
start:
    mov     r0, #1
    out.gpio r0
    bl      fusecheck
    mov     r0, #0
    out.gpio r0
    halt
fusecheck:
"""

_POC_HELPERS = """\
is_fam:
    mov     r0, #0
    mov     pc, lr
is_ppm:
    mov     r0, #0
    mov     pc, lr
NvBootUartDownload:
    mov     r0, #0x21       ; '!'
    out.uart r0
    halt
"""

_HARDENED_TAIL = """\
NvBootUartDownload:
    mov     r0, #0x21
    out.uart r0
    halt
"""

_LISTING2_MAIN = """\
start:
    bl      NvBootMainNonsecureRomEnter
    halt
NvBootMainNonsecureRomEnter:
"""


@dataclass(frozen=True, eq=False)
class Fixture:
    name: str
    program: Program
    target_label: str | None
    ticks_per_instr: int = 1
    anchor: str = "reset"

    def make_machine(self, tick_ns: int = 20) -> mm.Machine:
        return mm.Machine(self.program.code, tick_ns=tick_ns, ticks_per_instr=self.ticks_per_instr)


def _program(*chunks) -> Program:
    asm = Assembler(mm.IROM_BASE, MMIO_SYMBOLS)
    for name, src in chunks:
        asm.add(name, src)
    return asm.assemble()


def listing2_program() -> Program:
    """The fuse check with its fuse-reading helpers, callable from a tiny main."""
    return _program(("main", _LISTING2_MAIN), ("listing2", LISTING_2), ("helpers", FUSE_HELPERS),
                    ("download", UART_DOWNLOAD), ("data", _rom_data()))


def build_fixture(name: str) -> Fixture:
    return _build_fixture(name.upper())


@functools.lru_cache(maxsize=None)
def _build_fixture(name: str) -> Fixture:
    if name == "ADD_LOOP":
        return Fixture(name, _program(("add_loop", _ADD_LOOP)), None)
    if name == "SIGCHECK":
        prog = _program(("main", _SIGCHECK_MAIN), ("listing1", LISTING_1), ("stubs", _SIGCHECK_STUBS))
        return Fixture(name, prog, "call_authenticated_code")
    if name == "FUSECHECK_POC":
        prog = _program(("main", _MAIN_CALLS_CHECK), ("listing2", LISTING_2), ("stubs", _POC_HELPERS))
        return Fixture(name, prog, "NvBootUartDownload", anchor="gpio")
    if name == "FUSECHECK_HARDENED":
        prog = _program(("main", _MAIN_CALLS_CHECK), ("hardened", HARDENED_CHECK), ("tail", _HARDENED_TAIL))
        return Fixture(name, prog, "NvBootUartDownload", anchor="gpio")
    if name == "LISTING2":
        return Fixture(name, listing2_program(), "NvBootUartDownload")
    raise KeyError(f"unknown fixture {name!r}")


FIXTURES = ("ADD_LOOP", "SIGCHECK", "FUSECHECK_POC", "FUSECHECK_HARDENED", "LISTING2")
