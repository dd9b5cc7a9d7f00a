import json

import pytest

from voltfi import machine as mm
from voltfi.boot import BootOutcome, run_boot
from voltfi.crypto import engine as ce
from voltfi.firmware import (MB2_PIROM_START, PROMPT, BootImage, DeviceBundle, DeviceSpec, generate_device)
from voltfi.machine import Mode


def clean_boot(image):
    m = image.make_machine()
    return m, run_boot(m, image, None, None, 0)


def test_generation_is_deterministic(bundle, tmp_path):
    again = generate_device(DeviceSpec())
    assert again.image.irom_bytes == bundle.image.irom_bytes
    assert again.image.mb1_image == bundle.image.mb1_image
    a, b = bundle.save(tmp_path / "a"), again.save(tmp_path / "b")
    for name in ("irom.bin", "mb1.bin", "mb1_plain.bin", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_distinct_seeds_give_distinct_feks(bundle):
    other = generate_device(DeviceSpec(seed=1))
    assert other.image.fek.fek1 != bundle.image.fek.fek1
    assert other.image.fek.fek2 != bundle.image.fek.fek2


def test_key_blob_decrypts_under_fek1(bundle):
    eng = ce.CryptoEngine()
    ce.load_feks(eng, bundle.image.fek)
    ce.decrypt_key_blob(eng, bundle.image.key_blob)
    assert eng.slots[ce.MB1_SLOT].key_bytes == bundle.mb1_key
    assert len(bundle.image.key_blob) == 4096
    assert bundle.image.irom_bytes[-4096:] == bundle.image.key_blob


def test_clean_boot_timeline(image):
    m, r = clean_boot(image)
    assert r.kind is BootOutcome.NORMAL_BOOT and PROMPT not in bytes(m.uart.tx)
    events = dict((name, t) for t, name in m.events)
    instr = image.tick_ns * image.ticks_per_instr
    assert 4_420_000 <= events["QSPI_CLK"] < 4_420_000 + instr
    assert 172_000_000 <= events["MB2_ENTRY"] < 172_000_000 + instr
    assert r.end_ns >= 172_000_000
    assert m.mode is Mode.NON_SECURE
    assert m.prot.secure_boot == 0 and m.prot.pirom_start == MB2_PIROM_START
    assert m.mb1_plain is not None


def test_fuse_check_placed_at_configured_time(image):
    m = image.make_machine()
    m.reset_release(0)
    entry = image.labels["NvBootMainNonsecureRomEnter"]
    while m.pc != entry:
        m.step()
    assert m.clock_ns == image.fuse_check_time_ns == 2_634_000


def test_reset_handler_moves_pirom_start(image):
    m = image.make_machine()
    m.reset_release(0)
    assert m.prot.pirom_start == 0x400
    for _ in range(3):
        m.step()
    assert m.prot.pirom_start == 0x2000


def test_clean_boot_is_bit_for_bit_deterministic(image):
    a, ra = clean_boot(image)
    b, rb = clean_boot(image)
    assert ra == rb and a.snapshot() == b.snapshot()


def test_bundle_roundtrip(bundle, tmp_path):
    path = bundle.save(tmp_path)
    loaded = DeviceBundle.load(path)
    img = loaded.image
    assert img.irom_bytes == bundle.image.irom_bytes and img.fek == bundle.image.fek
    assert img.labels == bundle.image.labels and img.lines == bundle.image.lines
    assert loaded.mb1_plaintext == bundle.mb1_plaintext
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["irom"]["base"] == mm.IROM_BASE
    assert manifest["timeline"]["qspi_probe_time_ns"] == 4_420_000
    _, r = clean_boot(img)
    assert r.kind is BootOutcome.NORMAL_BOOT


def test_timeline_order_enforced(image):
    with pytest.raises(ValueError):
        BootImage(image.irom_bytes, image.fek, image.mb1_image, image.labels, image.lines,
                  5_000_000, 4_420_000, 172_000_000)


def test_spec_rejects_unknown_keys():
    with pytest.raises(ValueError):
        DeviceSpec.from_dict({"seed": 1, "colour": "red"})


def test_unplaceable_fuse_check():
    with pytest.raises(ValueError):
        generate_device(DeviceSpec(fuse_check_time_ns=100))


def test_odm_disabled_device_boots():
    b = generate_device(DeviceSpec(seed=4, odm_secure=0, fek2_select=ce.FEK2_FROM_NVKEY))
    m, r = clean_boot(b.image)
    assert r.kind is BootOutcome.NORMAL_BOOT and m.mb1_plain == b.mb1_plaintext


def test_wrong_mb1_fails_boot(image):
    other = generate_device(DeviceSpec(seed=9)).image
    swapped = BootImage(image.irom_bytes, image.fek, other.mb1_image, image.labels, image.lines,
                        image.fuse_check_time_ns, sleds=image.sleds)
    m, r = clean_boot(swapped)
    assert r.kind is BootOutcome.HANG and m.ce_status == 2
