import json
import random

import pytest

from voltfi import machine as mm
from voltfi import payload as pl
from voltfi.boot import (BootOutcome, candidate_faults, clean_path, fault_path_oracle, oracle_target,
                         run_boot, run_fixture, run_payload, uart_download)
from voltfi.firmware import PROMPT, build_fixture, generate_device, DeviceSpec
from voltfi.machine import Effect, GlitchInjector, MachineState, natural_effect
from voltfi.rail import GlitchPulse, RailConfig, resolve_rail

from helpers import GOLDEN, HOT_PULSE


def test_crash_pulse(image, rail):
    m = image.make_machine()
    r = run_boot(m, image, GlitchPulse(2_630_000, 13_000), rail, 0)
    assert r.kind is BootOutcome.CRASHED and r.fault.effect is Effect.CRASH


def test_detector(image):
    m = image.make_machine()
    r = run_boot(m, image, HOT_PULSE, RailConfig(detector_enabled=True), 0)
    assert r.kind is BootOutcome.DETECT_SHUTDOWN


def test_sub_threshold_pulse_boots_normally(image, rail):
    m = image.make_machine()
    assert run_boot(m, image, GlitchPulse(2_633_800, 9_000), rail, 0).kind is BootOutcome.NORMAL_BOOT


def test_prompt_reached(prompt_machine):
    assert prompt_machine.state is MachineState.DOWNLOAD
    assert bytes(prompt_machine.uart.tx).endswith(PROMPT)


def test_run_boot_needs_reset_held(image, rail):
    m = image.make_machine()
    m.reset_release(0)
    with pytest.raises(RuntimeError):
        run_boot(m, image, None, rail, 0)


@pytest.mark.parametrize("hardened", [False, True])
def test_fast_path_matches_reference(hardened, rail):
    image = generate_device(DeviceSpec(hardened=hardened)).image if hardened else generate_device().image
    rng = random.Random(1234 + hardened)
    for _ in range(300):
        offset = 20 * rng.randrange(2_610_000 // 20, 2_640_000 // 20)
        if rng.random() < 0.1:
            offset = 20 * rng.randrange(0, 4_420_000 // 20)
        length = rng.choice([9_000, 10_400, 11_300, 11_320, 11_340, 12_000, 13_000])
        start = rng.choice([0, 0, 20, 100, 240])
        seed = rng.randrange(2**32)
        pulse = GlitchPulse(offset, length)
        fast, ref = image.make_machine(), image.make_machine()
        rf = run_boot(fast, image, pulse, rail, seed, start_ns=start)
        rr = run_boot(ref, image, pulse, rail, seed, start_ns=start, fast=False)
        assert rf == rr
        assert fast.snapshot() == ref.snapshot()


# -- loader ------------------------------------------------------------------

def test_dump_payload_returns_full_irom(prompt_machine, image):
    rep = uart_download(prompt_machine, (GOLDEN / "irom_dump.bin").read_bytes(), max_steps=2_000_000)
    assert rep.accepted and rep.uart_output == image.irom_bytes
    assert rep.state is MachineState.DOWNLOAD


def test_fek_dump(prompt_machine, image):
    rep = uart_download(prompt_machine, pl.build_fek_dump_payload().to_bytes())
    assert rep.uart_output == image.fek.fek1 + image.fek.fek2


def test_corrupted_payload_reprompts(prompt_machine):
    wire = bytearray(pl.build_fek_dump_payload().to_bytes())
    wire[30] ^= 0x40
    rep = uart_download(prompt_machine, bytes(wire))
    assert not rep.accepted and rep.error == pl.CHECKSUM_MISMATCH
    assert rep.uart_output == PROMPT and prompt_machine.state is MachineState.DOWNLOAD
    assert uart_download(prompt_machine, pl.build_fek_dump_payload().to_bytes()).accepted


def test_payload_outside_ram_rejected(prompt_machine):
    wire = pl.encode(pl.UartHeader(0x0, 8), bytes(8))
    rep = uart_download(prompt_machine, wire)
    assert not rep.accepted and rep.error == pl.MALFORMED_HEADER


def test_download_requires_prompt(image):
    m = image.make_machine()
    with pytest.raises(RuntimeError):
        uart_download(m, b"")


def test_non_secure_dump_stops_at_protected_region(image):
    m = image.make_machine()
    assert run_boot(m, image, None, None, 0).kind is BootOutcome.NORMAL_BOOT
    out = run_payload(m, pl.build_dump_payload(mm.IROM_BASE, 0x1200))
    assert out == image.irom_bytes[:0x1200] and m.state is MachineState.HALTED
    out = run_payload(m, pl.build_dump_payload(mm.IROM_BASE, 0x1204))
    assert out == image.irom_bytes[:0x1200] and m.state is MachineState.TRAPPED


def test_empty_dump_halts_immediately(prompt_machine):
    rep = uart_download(prompt_machine, pl.build_dump_payload(mm.IROM_BASE, 0).to_bytes())
    assert rep.accepted and rep.uart_output == b""


# -- fixtures ------------------------------------------------------------------

def test_add_loop_clean():
    r = run_fixture("ADD_LOOP", None, RailConfig(), 0)
    assert r.state is MachineState.HALTED and not r.corrupted and len(r.sums) == 2000


def test_add_loop_corrupts_under_glitch():
    hits = [run_fixture("ADD_LOOP", GlitchPulse(2_000, 11_320), RailConfig(), s).corrupted for s in range(20)]
    assert any(hits)


def test_add_loop_attenuated_never_corrupts():
    rail = RailConfig(decoupling_attenuation_ns=14_000)
    assert not any(run_fixture("ADD_LOOP", GlitchPulse(2_000, 13_980), rail, s).corrupted for s in range(10))


def test_sigcheck_clean_and_glitched():
    assert not run_fixture("SIGCHECK", None, RailConfig(), 0).reached_target
    hits = [run_fixture("SIGCHECK", GlitchPulse(0, 11_320), RailConfig(), s).reached_target for s in range(100)]
    assert any(hits)


def test_fusecheck_poc_is_gpio_anchored():
    r = run_fixture("FUSECHECK_POC", None, RailConfig(), 0)
    assert not r.reached_target and r.state is MachineState.HALTED
    hits = [run_fixture("FUSECHECK_POC", GlitchPulse(0, 11_320), RailConfig(), s).reached_target
            for s in range(100)]
    assert any(hits)


def test_unknown_fixture():
    with pytest.raises(KeyError):
        build_fixture("NOPE")


# -- oracle --------------------------------------------------------------------

def test_listing2_oracle_golden():
    sites = sorted(fault_path_oracle(build_fixture("LISTING2"), "NvBootUartDownload"))
    golden = json.loads((GOLDEN / "listing2_oracle.json").read_text())
    assert [s.to_dict() for s in sites] == golden
    keys = {(s.source, s.line, s.effect) for s in sites}
    assert ("listing2", 3, "SKIP") in keys and ("listing2", 11, "BRANCH_INVERT") in keys


def test_oracle_agrees_with_timed_injection():
    """Landing a glitch inside each instruction's slot gives the same verdict as the oracle."""
    fx = build_fixture("LISTING2")
    hits = fault_path_oracle(fx, "NvBootUartDownload")
    hit_keys = {(s.step, s.effect) for s in hits}
    target = fx.program.addr("NvBootUartDownload")
    path = clean_path(fx.make_machine)
    outcome = resolve_rail(GlitchPulse(0, 11_320), RailConfig())
    for step_no, pc, op in path:
        m = fx.make_machine()
        m.reset_release(0)
        ins = m.fetch(pc)
        t = step_no * m.instr_ns  # no sleds in this fixture
        inj = GlitchInjector(outcome, random.Random(0), plan=(True, t, 0))
        reached = m.run(inj, max_steps=10_000, watch=target)
        effect = natural_effect(ins).value
        if effect == "CORRUPT_RESULT":
            continue
        assert reached == ((step_no, effect) in hit_keys), (step_no, hex(pc), op)


@pytest.mark.parametrize("name", ["FUSECHECK_HARDENED"])
def test_hardened_fixture_oracle_empty(name):
    assert fault_path_oracle(build_fixture(name), "NvBootUartDownload", include_corrupt=True) == set()


def test_hardened_boot_image_oracle_empty():
    img = generate_device(DeviceSpec(hardened=True)).image
    assert fault_path_oracle(img, "NvBootUartDownload", include_corrupt=True) == set()


def test_boot_image_oracle_contains_fuse_check_faults(image):
    sites = fault_path_oracle(image, "NvBootUartDownload")
    keys = {(s.source, s.line, s.effect) for s in sites}
    assert ("fusecheck", 3, "SKIP") in keys and ("fusecheck", 11, "BRANCH_INVERT") in keys


def test_candidates_respect_effect_classes():
    fx = build_fixture("LISTING2")
    make, prog = oracle_target(fx)
    for site, fault in candidate_faults(make, prog, include_corrupt=True):
        m = make()
        ins = m.fetch(site.pc)
        if site.effect == "BRANCH_INVERT":
            assert ins.is_cond_branch
        if site.effect == "CORRUPT_RESULT":
            assert ins.is_alu
