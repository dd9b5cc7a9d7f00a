import os
import random

import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from hypothesis import given, strategies as st

from voltfi import machine as mm
from voltfi.boot import run_boot
from voltfi.crypto import aes
from voltfi.crypto import engine as ce


def ref_cbc(key, iv, data, encrypt=True):
    c = Cipher(algorithms.AES(key), modes.CBC(iv))
    op = c.encryptor() if encrypt else c.decryptor()
    return op.update(data) + op.finalize()


def test_fips197_vector():
    key = bytes(range(16))
    pt = bytes.fromhex("00112233445566778899aabbccddeeff")
    assert aes.encrypt_block(aes.expand_key(key), pt).hex() == "69c4e0d86a7b0430d8cdb78070b4c55a"


def test_cbc_against_reference_100_vectors():
    rng = random.Random(7)
    for _ in range(100):
        key = rng.randbytes(16)
        pt = rng.randbytes(16 * rng.randint(1, 8))
        ct = aes.cbc_encrypt(key, pt)
        assert ct == ref_cbc(key, bytes(16), pt)
        assert aes.cbc_decrypt(key, ct) == pt


@given(st.binary(min_size=16, max_size=16), st.binary(min_size=16, max_size=16).filter(any),
       st.integers(min_value=1, max_value=4))
def test_nonzero_iv_breaks_roundtrip(key, iv, blocks):
    pt = os.urandom(16 * blocks)
    ct = aes.cbc_encrypt(key, pt)
    assert aes.cbc_decrypt(key, ct, iv) != pt


def test_key_blob_from_independent_encryptor():
    rng = random.Random(3)
    fek1, k_mb1, k_res = rng.randbytes(16), rng.randbytes(16), rng.randbytes(16)
    plain = bytearray()
    for idx, label, key in [(ce.MB1_SLOT, b"MB1_KEY", k_mb1), (ce.ODM_RESERVED_SLOT, b"ODM_RSVD", k_res)]:
        plain += b"KSLT" + bytes([idx]) + label.ljust(11, b"\0") + key
    plain += bytes(4096 - len(plain))
    blob = ref_cbc(fek1, bytes(16), bytes(plain))
    assert blob == ce.build_key_blob(fek1, [(ce.MB1_SLOT, "MB1_KEY", k_mb1), (ce.ODM_RESERVED_SLOT, "ODM_RSVD", k_res)])
    eng = ce.CryptoEngine()
    ce.load_feks(eng, ce.FekSource(fek1, ce.FEK2_FROM_NVKEY, rng.randbytes(16)))
    ce.decrypt_key_blob(eng, blob)
    assert eng.slot(ce.MB1_SLOT).key_bytes == k_mb1
    assert eng.slot(ce.ODM_RESERVED_SLOT).key_bytes == k_res and eng.slot(ce.ODM_RESERVED_SLOT).label == "ODM_RSVD"


def test_zero_blob_matches_reference():
    fek1 = bytes(range(16))
    eng = ce.CryptoEngine()
    ce.load_feks(eng, ce.FekSource(fek1, 0, bytes(16)))
    plain = ce.decrypt_key_blob(eng, bytes(64))
    assert plain == ref_cbc(fek1, bytes(16), bytes(64), encrypt=False)
    assert set(eng.populated()) == {ce.FEK1_SLOT, ce.FEK2_SLOT}


def test_empty_blob_populates_nothing():
    eng = ce.CryptoEngine()
    ce.load_feks(eng, ce.FekSource(bytes(16), 0, bytes(16)))
    ce.decrypt_key_blob(eng, b"")
    assert set(eng.populated()) == {ce.FEK1_SLOT, ce.FEK2_SLOT}


def test_blob_errors():
    eng = ce.CryptoEngine()
    with pytest.raises(ce.CryptoEngineError):
        ce.decrypt_key_blob(eng, bytes(32))
    ce.load_feks(eng, ce.FekSource(bytes(16), 0, bytes(16)))
    with pytest.raises(ce.CryptoEngineError):
        ce.decrypt_key_blob(eng, bytes(17))
    with pytest.raises(ce.CryptoEngineError):
        ce.load_feks(eng, ce.FekSource(bytes(16), 0, bytes(16)))


def test_fek2_selector():
    nv, test = b"N" * 16, b"T" * 16
    for sel, want in [(ce.FEK2_FROM_TESTKEY, test), (ce.FEK2_FROM_NVKEY, nv)]:
        eng = ce.CryptoEngine()
        ce.load_feks(eng, ce.FekSource(nv, sel, test))
        assert eng.slot(ce.FEK2_SLOT).key_bytes == want


def engine_with_mb1(mb1_key, fek2=b"F" * 16):
    eng = ce.CryptoEngine()
    ce.load_feks(eng, ce.FekSource(b"K" * 16, ce.FEK2_FROM_TESTKEY, fek2))
    eng.slot(ce.MB1_SLOT).key_bytes = mb1_key
    eng.slot(ce.ODM_RESERVED_SLOT).key_bytes = b"R" * 16
    return eng


@pytest.mark.parametrize("odm", [False, True])
def test_mb1_roundtrip_and_slot_hygiene(odm):
    key = b"M" * 16
    pt = os.urandom(1000)
    image = ce.encrypt_mb1(pt, key, ce.derive_odm_key(b"F" * 16) if odm else None)
    eng = engine_with_mb1(key)
    before = eng.populated()
    out, ok = ce.decrypt_mb1(eng, image, odm)
    assert ok and out == pt
    after = eng.populated()
    assert ce.MB1_SLOT not in after
    for idx, k in before.items():
        if idx != ce.MB1_SLOT:
            assert after[idx] == k


def test_mb1_failures():
    key = b"M" * 16
    image = ce.encrypt_mb1(b"hello" * 50, key)
    with pytest.raises(ce.AuthenticationError):
        ce.decrypt_mb1(engine_with_mb1(key), image[:-5], False)
    with pytest.raises(ce.AuthenticationError):
        ce.decrypt_mb1(engine_with_mb1(b"X" * 16), image, False)
    with pytest.raises(ce.AuthenticationError):
        ce.decrypt_mb1(engine_with_mb1(key), image, True)
    eng = engine_with_mb1(key)
    ce.decrypt_mb1(eng, image, False)
    with pytest.raises(ce.AuthenticationError):
        ce.decrypt_mb1(eng, image, False)


def test_readout_protected_on_normal_path(image):
    m = image.make_machine()
    run_boot(m, image, None, None, 0)
    m._now = m.clock_ns
    assert m.load(mm.FEK_NVKEY_ADDR, 4) == 0 and m.load(mm.FEK_TESTKEY_ADDR + 12, 4) == 0
    assert m.fuses.fek_readout_protect == 1
    assert m.engine.slot(ce.MB1_SLOT).empty and not m.engine.slot(ce.FEK1_SLOT).empty


def test_readout_open_on_download_path(prompt_machine, image):
    assert prompt_machine.fuses.fek_readout_protect == 0
    word = prompt_machine.load(mm.FEK_NVKEY_ADDR, 4)
    assert word == int.from_bytes(image.fek.fek1[:4], "little")
