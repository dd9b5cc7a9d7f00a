"""Emulated FPGA glitch controller.

Commands are 5-byte frames: an opcode byte followed by a 32-bit
little-endian argument.  Every command gets a one-byte reply::

    0x01 SET_OFFSET  ticks      -> 0x00 ack | 0xFE while armed | 0xFF out of bounds
    0x02 SET_LENGTH  ticks      -> 0x00 ack | 0xFE while armed | 0xFF zero or out of bounds
    0x03 ARM         (ignored)  -> 0x00 ack | 0xFF no valid pulse configured
    0x04 RESET_PULSE hold ticks -> 0x00 ack; asserts reset, releases it and
                                   latches the release edge as the trigger.
                                   If armed, the pulse fires and the rig goes
                                   to FIRED.
    0x05 STATUS      (ignored)  -> 0x00 IDLE | 0x01 ARMED | 0x02 FIRED

Anything else, including short or long frames, is answered with 0xFF and
leaves the rig untouched.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from enum import IntEnum

from .rail import GlitchPulse

FRAME = struct.Struct("<BI")

OP_SET_OFFSET = 0x01
OP_SET_LENGTH = 0x02
OP_ARM = 0x03
OP_RESET_PULSE = 0x04
OP_STATUS = 0x05

ACK = b"\x00"
ERR_MALFORMED = b"\xff"
ERR_ARMED = b"\xfe"

U32_MAX = 0xFFFF_FFFF


class RigState(IntEnum):
    IDLE = 0
    ARMED = 1
    FIRED = 2


class RigError(RuntimeError):
    pass


@dataclass(frozen=True)
class RigConfig:
    tick_ns: int = 20
    max_offset_ticks: int = U32_MAX
    max_length_ticks: int = U32_MAX
    # uniform delay in [0, jitter_max_ns] between reset release and the first
    # instruction; 0 disables jitter
    jitter_max_ns: int = 0
    reset_hold_ticks: int = 50

    def __post_init__(self):
        if self.tick_ns <= 0:
            raise ValueError("tick_ns must be > 0")
        for name in ("max_offset_ticks", "max_length_ticks"):
            if not 0 < getattr(self, name) <= U32_MAX:
                raise ValueError(f"{name} must be a positive 32-bit value")
        if self.jitter_max_ns < 0 or not 0 < self.reset_hold_ticks <= U32_MAX:
            raise ValueError("jitter_max_ns must be >= 0 and reset_hold_ticks in 1..2^32-1")

    @classmethod
    def from_dict(cls, d: dict) -> "RigConfig":
        return cls(**d)

    def pulse_fits(self, pulse: GlitchPulse) -> bool:
        t = self.tick_ns
        return (pulse.offset_ns % t == 0 and pulse.length_ns % t == 0
                and pulse.offset_ns // t <= self.max_offset_ticks
                and pulse.length_ns // t <= self.max_length_ticks)


@dataclass(frozen=True)
class Trigger:
    trigger_ns: int
    first_instr_ns: int
    pulse: GlitchPulse | None

    @property
    def start_delay_ns(self) -> int:
        return self.first_instr_ns - self.trigger_ns


def encode_command(opcode: int, arg: int = 0) -> bytes:
    return FRAME.pack(opcode, arg & U32_MAX)


class GlitchRig:
    """The controller state machine plus a monotonically increasing rig clock."""

    def __init__(self, config: RigConfig | None = None, seed: int = 0):
        self.config = config or RigConfig()
        self.state = RigState.IDLE
        self.offset_ticks = 0
        self.length_ticks = 0
        self.clock_ns = 0
        self.received: list[bytes] = []
        self.last_trigger: Trigger | None = None
        self._jitter = random.Random(seed)

    def execute(self, frame: bytes) -> bytes:
        frame = bytes(frame)
        self.received.append(frame)
        if len(frame) != FRAME.size:
            return ERR_MALFORMED
        op, arg = FRAME.unpack(frame)
        cfg = self.config
        if op in (OP_SET_OFFSET, OP_SET_LENGTH):
            if self.state is RigState.ARMED:
                return ERR_ARMED
            if op == OP_SET_OFFSET:
                if arg > cfg.max_offset_ticks:
                    return ERR_MALFORMED
                self.offset_ticks = arg
            else:
                if arg == 0 or arg > cfg.max_length_ticks:
                    return ERR_MALFORMED
                self.length_ticks = arg
            self.state = RigState.IDLE
            return ACK
        if op == OP_ARM:
            if self.length_ticks == 0:
                return ERR_MALFORMED
            self.state = RigState.ARMED
            return ACK
        if op == OP_RESET_PULSE:
            self._reset_pulse(max(arg, 1))
            return ACK
        if op == OP_STATUS:
            return bytes([self.state])
        return ERR_MALFORMED

    def _reset_pulse(self, hold_ticks: int) -> None:
        self.clock_ns += hold_ticks * self.config.tick_ns
        trigger = self.clock_ns
        jitter = self._jitter.randint(0, self.config.jitter_max_ns) if self.config.jitter_max_ns else 0
        pulse = None
        if self.state is RigState.ARMED:
            pulse = self.pulse
            self.state = RigState.FIRED
        self.last_trigger = Trigger(trigger, trigger + jitter, pulse)

    @property
    def pulse(self) -> GlitchPulse:
        t = self.config.tick_ns
        return GlitchPulse(self.offset_ticks * t, self.length_ticks * t)

    def advance(self, ns: int) -> None:
        """Let rig time pass (the target running, or waiting for a verdict)."""
        if ns < 0:
            raise ValueError("time only moves forward")
        self.clock_ns += ns

    def reseed_jitter(self, seed: int) -> None:
        self._jitter = random.Random(seed)

    def reset_and_trigger(self, hold_ticks: int | None = None) -> Trigger:
        if self.state is not RigState.ARMED:
            raise RigError("rig is not armed")
        hold = self.config.reset_hold_ticks if hold_ticks is None else hold_ticks
        self.execute(encode_command(OP_RESET_PULSE, hold))
        return self.last_trigger


class RigController:
    """Host side of the protocol: turns pulses into command frames.

    Works with any backend exposing ``execute(frame) -> reply``; the emulated
    :class:`GlitchRig` is the only one shipped.
    """

    def __init__(self, backend):
        self.backend = backend

    def send(self, opcode: int, arg: int = 0) -> bytes:
        reply = self.backend.execute(encode_command(opcode, arg))
        if opcode != OP_STATUS and reply != ACK:
            raise RigError(f"command 0x{opcode:02x}({arg}) rejected with 0x{reply.hex()}")
        return reply

    def configure(self, pulse: GlitchPulse) -> None:
        tick = self.backend.config.tick_ns
        pulse.check_ticks(tick)
        self.send(OP_SET_OFFSET, pulse.offset_ns // tick)
        self.send(OP_SET_LENGTH, pulse.length_ns // tick)

    def arm(self) -> None:
        self.send(OP_ARM)

    def status(self) -> RigState:
        return RigState(self.send(OP_STATUS)[0])

    def fire(self, hold_ticks: int | None = None) -> Trigger:
        hold = self.backend.config.reset_hold_ticks if hold_ticks is None else hold_ticks
        self.send(OP_RESET_PULSE, hold)
        return self.backend.last_trigger


def reset_and_trigger(rig: GlitchRig, hold_ticks: int | None = None) -> Trigger:
    return rig.reset_and_trigger(hold_ticks)
