"""Boot runs, the UART loader, fixtures and the exhaustive single-fault oracle."""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field
from enum import Enum

from . import machine as mm
from . import payload as pl
from .firmware import PROMPT, BootImage, Fixture, build_fixture, ADD_LOOP_CONSTANT
from .isa import ALU_OPS, COND_BRANCH_OPS, Op, Program
from .machine import Effect, ForcedFault, GlitchInjector, MachineState, draw_plan
from .rail import GlitchPulse, RailConfig, RailKind, resolve_rail

BOOT_STEP_BUDGET = 100_000
PAYLOAD_STEP_BUDGET = 5_000_000


class BootOutcome(Enum):
    NORMAL_BOOT = "NORMAL_BOOT"
    CRASHED = "CRASHED"
    DETECT_SHUTDOWN = "DETECT_SHUTDOWN"
    UART_PROMPT = "UART_PROMPT"
    HANG = "HANG"


@dataclass(frozen=True)
class BootResult:
    kind: BootOutcome
    prompt: bytes = b""
    end_ns: int = 0
    fault: mm.FaultEvent | None = None
    detail: str = ""

    @property
    def success(self) -> bool:
        return self.kind is BootOutcome.UART_PROMPT and PROMPT in self.prompt


def classify(m: mm.Machine, fault: mm.FaultEvent | None = None) -> BootResult:
    st = m.state
    if st is MachineState.CRASHED:
        kind = BootOutcome.CRASHED
    elif st is MachineState.DETECT_SHUTDOWN:
        kind = BootOutcome.DETECT_SHUTDOWN
    elif st is MachineState.DOWNLOAD:
        return BootResult(BootOutcome.UART_PROMPT, bytes(m.uart.tx), m.clock_ns, fault)
    elif st is MachineState.HALTED and m.events and m.events[-1][1] == "MB2_ENTRY":
        kind = BootOutcome.NORMAL_BOOT
    else:
        kind = BootOutcome.HANG
    return BootResult(kind, b"", m.clock_ns, fault, m.trap or "")


@dataclass
class _CleanTrace:
    starts: list[int]
    pcs: list[int]
    ops: list[Op]
    end_ns: int
    final: tuple
    result: BootResult


def _machine_key(m: mm.Machine):
    f = m.fuses
    return (f.failure_analysis_mode, f.preproduction_mode, f.production_mode, f.fek2_select,
            f.odm_secure, m.qspi_strap, m.tick_ns, m.ticks_per_instr, m.fek_source, m.mb1_image)


def _clean_trace(m: mm.Machine, image: BootImage) -> _CleanTrace:
    cache = image.__dict__.setdefault("_clean_traces", {})
    key = _machine_key(m)
    tr = cache.get(key)
    if tr is None:
        probe = mm.Machine(image.irom_bytes, fuses=mm.FuseBank(**vars(m.fuses)), fek_source=m.fek_source,
                           mb1_image=m.mb1_image, tick_ns=m.tick_ns, ticks_per_instr=m.ticks_per_instr,
                           qspi_strap=m.qspi_strap)
        probe.reset_release(0)
        starts, pcs, ops = [], [], []
        while probe.state is MachineState.RUNNING and probe.steps < BOOT_STEP_BUDGET:
            starts.append(probe.clock_ns)
            pcs.append(probe.pc)
            ops.append(probe.fetch(probe.pc).op)
            probe.step()
        if probe.state is MachineState.RUNNING:
            probe._trap("step budget exhausted")
        tr = _CleanTrace(starts, pcs, ops, probe.clock_ns, probe.snapshot(), classify(probe))
        cache[key] = tr
    return tr


def _shift_snapshot(snap, start_ns: int):
    if not start_ns:
        return snap
    s = list(snap)
    s[9] = [(t + start_ns, v) for t, v in s[9]]          # gpio events
    s[10] = None if s[10] is None else s[10] + start_ns  # gpio rise
    s[11] += start_ns                                    # clock
    s[19] = [(t + start_ns, e) for t, e in s[19]]         # events
    s[22] = start_ns
    return tuple(s)


def run_boot(machine: mm.Machine, image: BootImage, pulse: GlitchPulse | None, rail: RailConfig,
             seed, *, start_ns: int = 0, fast: bool = True) -> BootResult:
    """Release reset at t=0, boot with an optional glitch, classify the outcome.

    ``start_ns`` is the delay between reset release (the trigger, t=0) and the
    first instruction.  With ``fast`` set, runs whose fault provably cannot
    change the clean execution reuse a cached clean trace instead of
    re-simulating; the result and final machine state are identical.
    """
    if machine.state is not MachineState.RESET_HELD:
        raise RuntimeError("run_boot needs a machine held in reset")
    rng = random.Random(seed)
    outcome = resolve_rail(pulse, rail, 0) if pulse is not None else None
    machine.reset_release(start_ns)
    if outcome is None or outcome.kind is RailKind.NONE:
        return _finish_clean(machine, image, start_ns, None, fast)
    injector = GlitchInjector(outcome, rng, machine.tick_ns)
    if fast and outcome.kind is RailKind.FAULT_WINDOW:
        tr = _clean_trace(machine, image)
        ws, we = outcome.stress_window
        # the first instruction overlapping the window is where the reference
        # simulation would draw its plan
        if ws - start_ns >= tr.end_ns or we - start_ns <= 0:
            return _finish_clean(machine, image, start_ns, None, fast)
        fires, t_fault, bit = plan = draw_plan(outcome.fault_probability, ws, we, rng, machine.tick_ns)
        rel = t_fault - start_ns
        if not fires or rel >= tr.end_ns or rel < 0:
            return _finish_clean(machine, image, start_ns, None, fast)
        i = bisect.bisect_right(tr.starts, rel) - 1
        if tr.ops[i] is Op.NOP:
            event = mm.FaultEvent(tr.starts[i] + start_ns, tr.pcs[i], Effect.SKIP, "NOP")
            return _finish_clean(machine, image, start_ns, event, fast)
        injector.plan = plan
    return _simulate(machine, injector)


def _simulate(machine: mm.Machine, injector) -> BootResult:
    while machine.state is MachineState.RUNNING:
        if machine.steps >= BOOT_STEP_BUDGET:
            machine._trap("step budget exhausted")
            break
        machine.step(injector)
    return classify(machine, machine.faults[0] if machine.faults else None)


def _finish_clean(machine, image, start_ns, event, fast) -> BootResult:
    if not fast:
        return _simulate(machine, None)
    tr = _clean_trace(machine, image)
    machine.restore(_shift_snapshot(tr.final, start_ns))
    if event is not None:
        machine.faults.append(event)
    r = tr.result
    return BootResult(r.kind, r.prompt, r.end_ns + start_ns, event, r.detail)


# -- UART loader ------------------------------------------------------------

@dataclass(frozen=True)
class ExecutionReport:
    accepted: bool
    error: str | None
    uart_output: bytes
    state: MachineState
    trap: str | None = None


def uart_download(machine: mm.Machine, payload_bytes: bytes,
                  max_steps: int = PAYLOAD_STEP_BUDGET) -> ExecutionReport:
    """Feed a payload to a machine sitting at the loader prompt.

    A rejected payload makes the loader print its prompt again and keep
    waiting.  An accepted one is copied to its entry address and run in the
    current (Secure/TZ) mode; when it halts control returns to the loader.
    """
    if machine.state is not MachineState.DOWNLOAD:
        raise RuntimeError(f"machine is not in download mode ({machine.state})")
    mark = len(machine.uart.tx)
    try:
        p = pl.decode(payload_bytes)
        machine.write_ram(p.header.entry_addr, p.code)
    except pl.PayloadError as exc:
        machine.uart.tx += PROMPT
        return ExecutionReport(False, exc.code, bytes(machine.uart.tx[mark:]), machine.state)
    except mm.MemoryFault:
        machine.uart.tx += PROMPT
        return ExecutionReport(False, pl.MALFORMED_HEADER, bytes(machine.uart.tx[mark:]), machine.state)
    out = execute_code(machine, p.header.entry_addr, max_steps, start_mark=mark)
    if machine.state is MachineState.HALTED:
        machine.state = MachineState.DOWNLOAD
    return ExecutionReport(True, None, out, machine.state, machine.trap)


def execute_code(machine: mm.Machine, entry: int, max_steps: int = PAYLOAD_STEP_BUDGET,
                 start_mark: int | None = None) -> bytes:
    """Run code already in memory from ``entry`` in the machine's current mode."""
    mark = len(machine.uart.tx) if start_mark is None else start_mark
    machine.pc = entry
    machine.trap = None
    machine.state = MachineState.RUNNING
    machine.run(max_steps=max_steps)
    return bytes(machine.uart.tx[mark:])


def run_payload(machine: mm.Machine, payload: pl.UartPayload, max_steps: int = PAYLOAD_STEP_BUDGET) -> bytes:
    """Load and run a payload outside the loader (e.g. from MB2 in Non-secure mode)."""
    machine.write_ram(payload.header.entry_addr, payload.code)
    return execute_code(machine, payload.header.entry_addr, max_steps)


# -- fixtures ------------------------------------------------------------------

@dataclass
class FixtureResult:
    name: str
    state: MachineState
    uart: bytes
    reached_target: bool
    fault: mm.FaultEvent | None
    corrupted_sums: int = 0
    sums: list[int] = field(default_factory=list)

    @property
    def corrupted(self) -> bool:
        return self.corrupted_sums > 0


def run_fixture(name: str, pulse: GlitchPulse | None, rail: RailConfig, seed,
                max_steps: int = 200_000) -> FixtureResult:
    fx = build_fixture(name)
    m = fx.make_machine()
    m.reset_release(0)
    injector = None
    if pulse is not None:
        outcome = resolve_rail(pulse, rail, 0)
        injector = GlitchInjector(outcome, random.Random(seed), m.tick_ns, anchor=fx.anchor)
    target = fx.program.addr(fx.target_label) if fx.target_label else None
    reached = m.run(injector, max_steps=max_steps, watch=target)
    fault = m.faults[0] if m.faults else None
    res = FixtureResult(fx.name, m.state, bytes(m.uart.tx), reached, fault)
    if fx.name == "ADD_LOOP":
        tx = res.uart
        res.sums = [int.from_bytes(tx[i:i + 4], "little") for i in range(0, len(tx) - 3, 4)]
        res.corrupted_sums = sum(1 for i, s in enumerate(res.sums) if s != i + 1 + ADD_LOOP_CONSTANT)
        if len(tx) % 4:
            res.corrupted_sums += 1
    return res


# -- oracle --------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class FaultSite:
    step: int
    pc: int
    effect: str
    bit: int = -1
    source: str = ""
    line: int = 0

    def to_dict(self) -> dict:
        return {"step": self.step, "pc": self.pc, "effect": self.effect, "bit": self.bit,
                "source": self.source, "line": self.line}


def oracle_target(target) -> tuple:
    """(machine factory, program) for a fixture, boot image or bare program."""
    if isinstance(target, Fixture):
        return target.make_machine, target.program
    if isinstance(target, BootImage):
        return target.make_machine, target.program()
    return (lambda: mm.Machine(target.code)), target


def replay(make_machine, target_addr: int, fault=None, max_steps: int = BOOT_STEP_BUDGET) -> bool:
    m = make_machine()
    m.reset_release(0)
    return m.run(fault, max_steps=max_steps, watch=target_addr)


def clean_path(make_machine, max_steps: int = BOOT_STEP_BUDGET) -> list[tuple[int, int, Op]]:
    """(step index, pc, opcode) of every dynamically executed instruction."""
    m = make_machine()
    m.reset_release(0)
    trace = []
    while m.state is MachineState.RUNNING and m.steps < max_steps:
        trace.append((m.steps, m.pc, m.fetch(m.pc).op))
        m.step()
    return trace


def fault_path_oracle(target, target_label: str, include_corrupt: bool = False) -> set[FaultSite]:
    """Every single fault on the clean path that reaches ``target_label``.

    ``target`` is a :class:`Fixture`, a :class:`BootImage` or a bare
    :class:`Program` (run from its base with default fuses).  Candidates are
    SKIP on each executed instruction and BRANCH_INVERT on each executed
    conditional branch; ``include_corrupt`` adds every single-bit
    CORRUPT_RESULT on each executed ALU instruction.
    """
    make, prog = oracle_target(target)
    addr = prog.addr(target_label)
    hits = set()
    for site, fault in candidate_faults(make, prog, include_corrupt):
        if replay(make, addr, fault):
            hits.add(site)
    return hits


def candidate_faults(make, prog: Program, include_corrupt: bool = False):
    for step, pc, op in clean_path(make):
        src, line = prog.line_of(pc) or ("", 0)
        yield FaultSite(step, pc, Effect.SKIP.value, -1, src, line), ForcedFault(step, Effect.SKIP)
        if op in COND_BRANCH_OPS:
            yield (FaultSite(step, pc, Effect.BRANCH_INVERT.value, -1, src, line),
                   ForcedFault(step, Effect.BRANCH_INVERT))
        if include_corrupt and op in ALU_OPS:
            for bit in range(32):
                yield (FaultSite(step, pc, Effect.CORRUPT_RESULT.value, bit, src, line),
                       ForcedFault(step, Effect.CORRUPT_RESULT, bit))

