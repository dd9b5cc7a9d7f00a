"""Cycle-counted simulator of the boot processor with fault-injection hooks.

Memory map::

    0x0001_0000 - 0x0003_0000   iROM (128 KiB, read-only); reset vector at its base
    0x4000_0000 - 0x4001_0000   RAM (64 KiB); stack grows down from the top
    0x7000_0000 - ...           MMIO (see the ``*_ADDR`` constants)

Time advances by ``ticks_per_instr * tick_ns`` per retired instruction.  A
``nop #n`` retires ``n`` slots in one step, which keeps long boot-time waits
cheap to simulate without breaking that accounting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from enum import Enum

from .crypto import engine as ce
from .isa import INSTR_SIZE, LR, PC, SP, DecodeError, Instr, Op, decode
from .rail import RailKind, RailOutcome

IROM_BASE = 0x0001_0000
IROM_SIZE = 0x0002_0000
IROM_END = IROM_BASE + IROM_SIZE
RAM_BASE = 0x4000_0000
RAM_SIZE = 0x0001_0000
RAM_END = RAM_BASE + RAM_SIZE
STACK_TOP = RAM_END

UART_TX_ADDR = 0x7000_0000
GPIO_OUT_ADDR = 0x7000_0010
SB_CFG_ADDR = 0x7000_0100  # bit0 SECURE_BOOT, bit1 ACCESS_PIROM
SB_PIROM_START_ADDR = 0x7000_0104
FUSE_BASE = 0x7000_0200
FUSE_FA_MODE_ADDR = FUSE_BASE + 0x00
FUSE_PREPRODUCTION_ADDR = FUSE_BASE + 0x04
FUSE_PRODUCTION_ADDR = FUSE_BASE + 0x08
FUSE_FEK2_SELECT_ADDR = FUSE_BASE + 0x0C
FUSE_ODM_SECURE_ADDR = FUSE_BASE + 0x10
FUSE_BLOCK_SIZE = 0x14
FEK_NVKEY_ADDR = 0x7000_0300
FEK_TESTKEY_ADDR = 0x7000_0310
FEK_BLOCK_SIZE = 0x20
CE_CMD_ADDR = 0x7000_0400
CE_STATUS_ADDR = 0x7000_0404
QSPI_CTRL_ADDR = 0x7000_0500
BOOT_EVENT_ADDR = 0x7000_0600

CE_LOAD_FEKS, CE_DECRYPT_KEYBLOB, CE_DECRYPT_MB1 = 1, 2, 3
EVT_MB2_ENTRY, EVT_DOWNLOAD = 1, 2

MASK32 = 0xFFFF_FFFF


class MachineState(Enum):
    RESET_HELD = "RESET_HELD"
    RUNNING = "RUNNING"
    CRASHED = "CRASHED"
    DETECT_SHUTDOWN = "DETECT_SHUTDOWN"
    HALTED = "HALTED"
    # stuck in an exception hang loop or a branch-to-self
    TRAPPED = "TRAPPED"
    # bootloader prompt sent, waiting for a payload on UART
    DOWNLOAD = "DOWNLOAD"


class Mode(Enum):
    SECURE_TZ = "SECURE_TZ"
    NON_SECURE = "NON_SECURE"


class Effect(Enum):
    SKIP = "SKIP"
    BRANCH_INVERT = "BRANCH_INVERT"
    CORRUPT_RESULT = "CORRUPT_RESULT"
    CRASH = "CRASH"
    DETECTED = "DETECTED"
    NONE = "NONE"


class MemoryFault(Exception):
    pass


@dataclass
class ProtectionRegs:
    secure_boot: int = 1
    pirom_start: int = 0x400
    access_pirom: int = 0
    ignored_writes: list = field(default_factory=list)


@dataclass
class FuseBank:
    failure_analysis_mode: int = 0
    preproduction_mode: int = 0
    production_mode: int = 1
    fek_readout_protect: int = 0
    fek2_select: int = 0
    odm_secure: int = 0


@dataclass(frozen=True)
class FaultEvent:
    time_ns: int
    pc_at_fault: int
    effect: Effect
    detail: str = ""


def natural_effect(instr: Instr) -> Effect:
    """Effect a landed glitch has on ``instr``."""
    if instr.is_cond_branch:
        return Effect.BRANCH_INVERT
    if instr.is_alu:
        return Effect.CORRUPT_RESULT
    return Effect.SKIP


class GlitchInjector:
    """Turns a resolved rail outcome into at most one fault on the running core.

    On the first instruction overlapping the stress window a single draw
    decides whether the pulse faults, the instant (tick-aligned, uniform over
    the window) at which it lands, and the bit to flip for a corrupted ALU
    result.  The instruction executing at that instant takes the fault.

    With ``anchor="gpio"`` the window is measured from the first rising edge
    of the GPIO latch instead of from reset release.
    """

    def __init__(self, outcome: RailOutcome, rng, tick_ns: int = 20, anchor: str = "reset", plan=None):
        self.outcome = outcome
        self.rng = rng
        self.tick_ns = tick_ns
        self.anchor = anchor
        self.plan = plan
        self.done = outcome.kind is RailKind.NONE

    def window(self, m: "Machine"):
        ws, we = self.outcome.stress_window
        if self.anchor == "gpio":
            if m.gpio_rise_ns is None:
                return None
            return ws + m.gpio_rise_ns, we + m.gpio_rise_ns
        return ws, we

    def check(self, m: "Machine", instr: Instr, t0: int, dur: int):
        if self.done:
            return None
        w = self.window(m)
        if w is None:
            return None
        ws, we = w
        if t0 + dur <= ws:
            return None
        if t0 >= we:
            self.done = True
            return None
        kind = self.outcome.kind
        if kind is RailKind.CRASH:
            self.done = True
            return Effect.CRASH, 0
        if kind is RailKind.DETECTED:
            self.done = True
            return Effect.DETECTED, 0
        if self.plan is None:
            self.plan = draw_plan(self.outcome.fault_probability, ws, we, self.rng, self.tick_ns)
        fires, t_fault, bit = self.plan
        if not fires or t_fault >= we:
            self.done = True
            return None
        if t0 <= t_fault < t0 + dur:
            self.done = True
            return natural_effect(instr), bit
        return None

    def next_time(self, m: "Machine"):
        """Earliest time at which :meth:`check` could still act, or None."""
        if self.done:
            return None
        w = self.window(m)
        if w is None:
            return 0  # anchor not seen yet; cannot skip ahead safely
        if self.plan is None or self.outcome.kind is not RailKind.FAULT_WINDOW:
            return w[0]
        return self.plan[1]


def draw_plan(p: float, ws: int, we: int, rng, tick_ns: int):
    fires = rng.random() < p
    n = max(1, (we - ws) // tick_ns)
    t_fault = ws + tick_ns * rng.randrange(n)
    bit = rng.randrange(32)
    return fires, t_fault, bit


@dataclass
class ForcedFault:
    """Applies ``effect`` at dynamic instruction number ``step_index``."""

    step_index: int
    effect: Effect
    bit: int = 0
    done: bool = False

    def check(self, m, instr, t0, dur):
        if not self.done and m.steps == self.step_index:
            self.done = True
            return self.effect, self.bit
        return None

    def next_time(self, m):
        return None if self.done else 0


class UartDevice:
    def __init__(self):
        self.tx = bytearray()
        self.rx = bytearray()


class Machine:
    """The simulated boot processor.

    ``fek_source`` and ``mb1_image`` are the device's fused keys and the MB1
    image sitting on its boot medium.
    """

    def __init__(self, irom: bytes = b"", *, fuses: FuseBank | None = None,
                 fek_source: ce.FekSource | None = None, mb1_image: bytes = b"",
                 tick_ns: int = 20, ticks_per_instr: int = 1, qspi_strap: bool = True,
                 reset_vector: int = IROM_BASE):
        if len(irom) > IROM_SIZE:
            raise ValueError("iROM image larger than 128 KiB")
        if ticks_per_instr <= 0 or tick_ns <= 0:
            raise ValueError("ticks_per_instr and tick_ns must be > 0")
        irom = bytes(irom)
        self.irom = irom if len(irom) == IROM_SIZE else irom + bytes(IROM_SIZE - len(irom))
        self.fuses = fuses if fuses is not None else FuseBank()
        self.fek_source = fek_source
        self.mb1_image = bytes(mb1_image)
        self.tick_ns = tick_ns
        self.ticks_per_instr = ticks_per_instr
        self.instr_ns = tick_ns * ticks_per_instr
        self.qspi_strap = qspi_strap
        self.reset_vector = reset_vector
        self._icache: dict[int, Instr] = {}
        self._power_on()

    def _power_on(self) -> None:
        self.regs = [0] * 16
        self.pc = self.reset_vector
        self.z = False
        self.n = False
        self.ram = bytearray(RAM_SIZE)
        self.prot = ProtectionRegs()
        self.fuses.fek_readout_protect = 0
        self.uart = UartDevice()
        self.gpio = 0
        self.gpio_events: list[tuple[int, int]] = []
        self.gpio_rise_ns: int | None = None
        self.clock_ns = 0
        self.retired = 0
        self.steps = 0
        self.mode = Mode.SECURE_TZ
        self.state = MachineState.RESET_HELD
        self.engine = ce.CryptoEngine()
        self.ce_status = 0
        self.mb1_plain: bytes | None = None
        self.events: list[tuple[int, str]] = []
        self.trap: str | None = None
        self.faults: list[FaultEvent] = []

    # -- reset ----------------------------------------------------------

    def reset_assert(self) -> None:
        self._power_on()

    def reset_release(self, start_ns: int = 0) -> None:
        if self.state is not MachineState.RESET_HELD:
            raise RuntimeError(f"reset_release from {self.state}")
        self.regs[SP] = STACK_TOP
        self.clock_ns = start_ns
        self.start_ns = start_ns
        self.state = MachineState.RUNNING

    # -- snapshots ------------------------------------------------------

    def snapshot(self):
        return (list(self.regs), self.pc, self.z, self.n, bytes(self.ram),
                replace(self.prot, ignored_writes=list(self.prot.ignored_writes)),
                replace(self.fuses), bytes(self.uart.tx), self.gpio, list(self.gpio_events),
                self.gpio_rise_ns, self.clock_ns, self.retired, self.steps, self.mode, self.state,
                self.engine.snapshot(), self.ce_status, self.mb1_plain, list(self.events), self.trap,
                list(self.faults), getattr(self, "start_ns", 0))

    def restore(self, snap) -> None:
        (regs, self.pc, self.z, self.n, ram, prot, fuses, tx, self.gpio, gev, self.gpio_rise_ns,
         self.clock_ns, self.retired, self.steps, self.mode, self.state, eng, self.ce_status,
         self.mb1_plain, events, self.trap, faults, self.start_ns) = snap
        self.regs = list(regs)
        self.ram = bytearray(ram)
        self.prot = replace(prot, ignored_writes=list(prot.ignored_writes))
        for f in fields(FuseBank):
            setattr(self.fuses, f.name, getattr(fuses, f.name))
        self.uart.tx = bytearray(tx)
        self.gpio_events = list(gev)
        self.engine.restore(eng)
        self.events = list(events)
        self.faults = list(faults)
        self._icache = {k: v for k, v in self._icache.items() if k < RAM_BASE}

    # -- memory ---------------------------------------------------------

    def _irom_readable(self, offset: int) -> bool:
        return (offset < self.prot.pirom_start or self.mode is Mode.SECURE_TZ
                or self.prot.access_pirom == 1)

    def load(self, addr: int, size: int) -> int:
        addr &= MASK32
        if IROM_BASE <= addr and addr + size <= IROM_END:
            off = addr - IROM_BASE
            if not (self._irom_readable(off) and self._irom_readable(off + size - 1)):
                raise MemoryFault(f"PIROM read violation at 0x{addr:08x}")
            return int.from_bytes(self.irom[off:off + size], "little")
        if RAM_BASE <= addr and addr + size <= RAM_END:
            off = addr - RAM_BASE
            return int.from_bytes(self.ram[off:off + size], "little")
        if addr >= UART_TX_ADDR:
            return int.from_bytes(self._mmio_read(addr, size), "little")
        raise MemoryFault(f"bus error reading 0x{addr:08x}")

    def store(self, addr: int, value: int, size: int) -> None:
        addr &= MASK32
        if RAM_BASE <= addr and addr + size <= RAM_END:
            off = addr - RAM_BASE
            self.ram[off:off + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
            if self._icache:
                for a in range(addr - INSTR_SIZE + 1, addr + size):
                    self._icache.pop(a, None)
            return
        if addr >= UART_TX_ADDR:
            self._mmio_write(addr, value, size)
            return
        raise MemoryFault(f"bus error writing 0x{addr:08x}")

    def write_ram(self, addr: int, data: bytes) -> None:
        if not (RAM_BASE <= addr and addr + len(data) <= RAM_END):
            raise MemoryFault(f"RAM write out of range at 0x{addr:08x}")
        off = addr - RAM_BASE
        self.ram[off:off + len(data)] = data
        self._icache = {k: v for k, v in self._icache.items() if k < RAM_BASE}

    def _fek_bytes(self) -> bytes:
        if self.fuses.fek_readout_protect or self.fek_source is None:
            return bytes(FEK_BLOCK_SIZE)
        return self.fek_source.fek1 + self.fek_source.fek2

    def _mmio_read(self, addr: int, size: int) -> bytes:
        def window(base: int, blob: bytes) -> bytes:
            off = addr - base
            return blob[off:off + size]

        if FEK_NVKEY_ADDR <= addr and addr + size <= FEK_NVKEY_ADDR + FEK_BLOCK_SIZE:
            return window(FEK_NVKEY_ADDR, self._fek_bytes())
        if FUSE_BASE <= addr and addr + size <= FUSE_BASE + FUSE_BLOCK_SIZE:
            f = self.fuses
            blob = struct.pack("<5I", f.failure_analysis_mode, f.preproduction_mode,
                               f.production_mode, f.fek2_select, f.odm_secure)
            return window(FUSE_BASE, blob)
        if SB_CFG_ADDR <= addr and addr + size <= SB_CFG_ADDR + 8:
            blob = struct.pack("<II", self.prot.secure_boot | (self.prot.access_pirom << 1),
                               self.prot.pirom_start)
            return window(SB_CFG_ADDR, blob)
        if addr == CE_STATUS_ADDR:
            return self.ce_status.to_bytes(4, "little")[:size]
        if addr == GPIO_OUT_ADDR:
            return self.gpio.to_bytes(4, "little")[:size]
        if addr in (UART_TX_ADDR, CE_CMD_ADDR, QSPI_CTRL_ADDR, BOOT_EVENT_ADDR):
            return bytes(size)
        raise MemoryFault(f"bus error reading MMIO 0x{addr:08x}")

    def _mmio_write(self, addr: int, value: int, size: int) -> None:
        value &= MASK32
        now = self._now
        if addr == UART_TX_ADDR:
            self.uart.tx += (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
        elif addr == GPIO_OUT_ADDR:
            self._set_gpio(value)
        elif addr == SB_CFG_ADDR:
            if not self.prot.secure_boot:
                self.prot.ignored_writes.append((now, "SB_CFG", value))
            else:
                self.prot.access_pirom = (value >> 1) & 1
                self.prot.secure_boot = value & 1
        elif addr == SB_PIROM_START_ADDR:
            if not self.prot.secure_boot:
                self.prot.ignored_writes.append((now, "PIROM_START", value))
            else:
                self.prot.pirom_start = value
        elif addr == CE_CMD_ADDR:
            self._crypto_command(value)
        elif addr == QSPI_CTRL_ADDR:
            if self.qspi_strap:
                self.events.append((now, "QSPI_CLK"))
        elif addr == BOOT_EVENT_ADDR:
            if value == EVT_MB2_ENTRY:
                self.events.append((now, "MB2_ENTRY"))
                self.mode = Mode.NON_SECURE
                self.state = MachineState.HALTED
            elif value == EVT_DOWNLOAD:
                self.events.append((now, "UART_DOWNLOAD"))
                self.state = MachineState.DOWNLOAD
        elif FUSE_BASE <= addr < FUSE_BASE + FUSE_BLOCK_SIZE or FEK_NVKEY_ADDR <= addr < FEK_NVKEY_ADDR + FEK_BLOCK_SIZE:
            pass  # read-only
        else:
            raise MemoryFault(f"bus error writing MMIO 0x{addr:08x}")

    def _crypto_command(self, cmd: int) -> None:
        try:
            if cmd == CE_LOAD_FEKS:
                if self.fek_source is None:
                    raise ce.CryptoEngineError("no FEK source fused")
                ce.load_feks(self.engine, self.fek_source)
                self.fuses.fek_readout_protect = 1
            elif cmd == CE_DECRYPT_KEYBLOB:
                ce.decrypt_key_blob(self.engine, self.irom[-ce.KEY_BLOB_SIZE:])
            elif cmd == CE_DECRYPT_MB1:
                self.mb1_plain, _ = ce.decrypt_mb1(self.engine, self.mb1_image, bool(self.fuses.odm_secure))
            else:
                raise ce.CryptoEngineError(f"unknown command {cmd}")
            self.ce_status = 0
        except ce.AuthenticationError:
            self.ce_status = 2
        except ce.CryptoEngineError:
            self.ce_status = 1

    def _set_gpio(self, value: int) -> None:
        if value and not self.gpio and self.gpio_rise_ns is None:
            self.gpio_rise_ns = self._now
        self.gpio = value & MASK32
        self.gpio_events.append((self._now, self.gpio))

    # -- execution ------------------------------------------------------

    def fetch(self, addr: int) -> Instr:
        ins = self._icache.get(addr)
        if ins is not None:
            return ins
        if IROM_BASE <= addr and addr + INSTR_SIZE <= IROM_END:
            raw = self.irom[addr - IROM_BASE:addr - IROM_BASE + INSTR_SIZE]
        elif RAM_BASE <= addr and addr + INSTR_SIZE <= RAM_END:
            raw = bytes(self.ram[addr - RAM_BASE:addr - RAM_BASE + INSTR_SIZE])
        else:
            raise MemoryFault(f"prefetch abort at 0x{addr:08x}")
        ins = decode(raw)
        self._icache[addr] = ins
        return ins

    def _trap(self, reason: str) -> None:
        self.trap = reason
        self.state = MachineState.TRAPPED

    def step(self, injector=None) -> FaultEvent | None:
        """Execute one instruction, applying a fault if ``injector`` asks for one."""
        if self.state is not MachineState.RUNNING:
            raise RuntimeError(f"step() while {self.state}")
        pc = self.pc
        try:
            ins = self.fetch(pc)
        except (MemoryFault, DecodeError) as exc:
            self._trap(str(exc))
            return None
        slots = ins.imm if ins.op is Op.NOP else 1
        dur = self.instr_ns * slots
        t0 = self.clock_ns
        self._now = t0
        effect, bit, event = None, 0, None
        if injector is not None:
            hit = injector.check(self, ins, t0, dur)
            if hit is not None:
                effect, bit = hit
                if effect is Effect.CRASH:
                    self.state = MachineState.CRASHED
                elif effect is Effect.DETECTED:
                    self.state = MachineState.DETECT_SHUTDOWN
                event = FaultEvent(t0, pc, effect, ins.op.name)
                self.faults.append(event)
                if effect in (Effect.CRASH, Effect.DETECTED):
                    return event
        self.steps += 1
        self.retired += slots
        self.clock_ns = t0 + dur
        if effect is Effect.SKIP:
            self.pc = pc + INSTR_SIZE
            return event
        try:
            self._execute(ins, pc, effect is Effect.BRANCH_INVERT,
                          bit if effect is Effect.CORRUPT_RESULT else None, injector)
        except MemoryFault as exc:
            self._trap(str(exc))
        return event

    def _execute(self, ins: Instr, pc: int, invert: bool, corrupt_bit, injector) -> None:
        op = ins.op
        regs = self.regs
        nxt = pc + INSTR_SIZE
        if op is Op.NOP:
            self.pc = nxt
        elif op is Op.MOV or op is Op.ADD:
            b = self._reg(ins.rm, nxt) if ins.use_reg else ins.imm
            val = b if op is Op.MOV else self._reg(ins.rn, nxt) + b
            val &= MASK32
            if corrupt_bit is not None:
                val ^= 1 << corrupt_bit
            if ins.rd == PC:
                self.pc = val
            else:
                regs[ins.rd] = val
                self.pc = nxt
        elif op is Op.CMP:
            b = self._reg(ins.rm, nxt) if ins.use_reg else ins.imm
            r = (self._reg(ins.rn, nxt) - b) & MASK32
            self.z = r == 0
            self.n = bool(r >> 31)
            self.pc = nxt
        elif op is Op.LDR:
            val = self.load(regs[ins.rn] + ins.imm, 1 if ins.byte else 4)
            if ins.rd == PC:
                self.pc = val
            else:
                regs[ins.rd] = val
                self.pc = nxt
        elif op is Op.STR:
            self.store(regs[ins.rn] + ins.imm, self._reg(ins.rd, nxt), 1 if ins.byte else 4)
            self.pc = nxt
        elif op is Op.B or op is Op.BL:
            if op is Op.BL:
                regs[LR] = nxt
            self.pc = ins.imm
            if op is Op.B and ins.imm == pc:
                self._spin(pc, injector)
        elif op is Op.BEQ or op is Op.BNE or op is Op.CBZ or op is Op.CBNZ:
            if op is Op.BEQ:
                taken = self.z
            elif op is Op.BNE:
                taken = not self.z
            elif op is Op.CBZ:
                taken = regs[ins.rn] == 0
            else:
                taken = regs[ins.rn] != 0
            if invert:
                taken = not taken
            self.pc = ins.imm if taken else nxt
        elif op is Op.PUSH:
            rl = [r for r in range(16) if ins.imm >> r & 1]
            sp = (regs[SP] - 4 * len(rl)) & MASK32
            for i, r in enumerate(rl):
                self.store(sp + 4 * i, self._reg(r, nxt), 4)
            regs[SP] = sp
            self.pc = nxt
        elif op is Op.POP:
            rl = [r for r in range(16) if ins.imm >> r & 1]
            sp = regs[SP]
            vals = [self.load(sp + 4 * i, 4) for i in range(len(rl))]
            regs[SP] = (sp + 4 * len(rl)) & MASK32
            self.pc = nxt
            for r, v in zip(rl, vals):
                if r == PC:
                    self.pc = v
                else:
                    regs[r] = v
        elif op is Op.OUT_UART:
            v = regs[ins.rd]
            self.uart.tx += bytes([v & 0xFF]) if ins.byte else v.to_bytes(4, "little")
            self.pc = nxt
        elif op is Op.OUT_GPIO:
            self._set_gpio(regs[ins.rd])
            self.pc = nxt
        elif op is Op.HALT:
            self.state = MachineState.HALTED
        else:  # pragma: no cover - decode() rejects everything else
            raise MemoryFault(f"undefined instruction at 0x{pc:08x}")

    def _reg(self, r: int, nxt: int) -> int:
        return nxt if r == PC else self.regs[r]

    def _spin(self, pc: int, injector) -> None:
        """Branch-to-self: fast-forward until a pending fault could act, else trap."""
        nxt = injector.next_time(self) if injector is not None else None
        if nxt is None:
            self._trap(f"spin at 0x{pc:08x}")
            return
        if nxt > self.clock_ns:
            k = (nxt - self.clock_ns) // self.instr_ns
            self.clock_ns += k * self.instr_ns
            self.retired += k
            self.steps += k

    def run(self, injector=None, max_steps: int = 1_000_000, watch: int | None = None) -> bool:
        """Run until the core leaves RUNNING or ``max_steps`` is reached.

        Returns True when ``watch`` (an address) was fetched at some point.
        """
        seen = False
        budget = self.steps + max_steps
        while self.state is MachineState.RUNNING:
            if self.pc == watch:
                seen = True
            if self.steps >= budget:
                self._trap("step budget exhausted")
                break
            self.step(injector)
        return seen

    @property
    def sb_regs(self) -> ProtectionRegs:
        return self.prot


def step(machine: Machine, pending=None) -> FaultEvent | None:
    """Module-level alias of :meth:`Machine.step`.

    ``pending`` is a :class:`GlitchInjector` (rail outcome plus seeded random
    stream) or a :class:`ForcedFault`.
    """
    return machine.step(pending)
