"""Hardware crypto engine model: key slots, FEK handling, key blob and MB1.

Key blob layout (plaintext, before CBC encryption under FEK1 with a zero IV)
is a run of 32-byte records followed by zero padding::

    b"KSLT" | slot index (1 byte) | label (11 bytes, NUL padded) | key (16 bytes)

A record whose first four bytes are not ``KSLT`` ends the table.

MB1 images are wrapped in one or two authenticated layers::

    length (u32 LE) | AES-CBC(key, IV=0, data zero-padded) | tag (16 bytes)

where ``tag`` is the first 16 bytes of HMAC-SHA256(key, length | ciphertext).
The Nvidia layer is always present; the ODM layer wraps it when enabled.
"""

from __future__ import annotations

import functools
import hashlib
import hmac
import struct
from dataclasses import dataclass

from . import aes

N_SLOTS = 16
FEK1_SLOT, FEK2_SLOT, MB1_SLOT, ODM_SLOT = 0, 1, 2, 3
ODM_RESERVED_SLOT = 15
SLOT_LABELS = {FEK1_SLOT: "FEK1", FEK2_SLOT: "FEK2", MB1_SLOT: "MB1_KEY",
               ODM_SLOT: "ODM_KEY", ODM_RESERVED_SLOT: "ODM_RESERVED"}

RECORD_MAGIC = b"KSLT"
RECORD_SIZE = 32
KEY_BLOB_SIZE = 4096
ODM_DERIVE_CONSTANT = b"ODM-SBK-DERIVE\0\0"

FEK2_FROM_NVKEY = 0
FEK2_FROM_TESTKEY = 1


class CryptoEngineError(Exception):
    pass


class AuthenticationError(CryptoEngineError):
    pass


@dataclass
class KeySlot:
    index: int
    key_bytes: bytes = b""
    readable: bool = False
    label: str = ""

    @property
    def empty(self) -> bool:
        return not self.key_bytes

    def clear(self) -> None:
        self.key_bytes = b""


@dataclass(frozen=True)
class FekSource:
    """FEK material as burnt into the device.

    ``fek1`` is the FUSE_ROM_ENCRYPTION_NVKEY register content and ``fek2``
    the FUSE_ROM_ENCRYPTION_TESTKEY content; ``fek2_select`` picks which of
    the two is loaded into the FEK2 slot.
    """

    fek1: bytes
    fek2_select: int
    fek2: bytes

    def __post_init__(self):
        if len(self.fek1) != 16 or len(self.fek2) != 16:
            raise ValueError("FEKs are 16 bytes")
        if self.fek2_select not in (FEK2_FROM_NVKEY, FEK2_FROM_TESTKEY):
            raise ValueError("fek2_select must be 0 (NVKEY) or 1 (TESTKEY)")

    @property
    def fek2_effective(self) -> bytes:
        return self.fek2 if self.fek2_select == FEK2_FROM_TESTKEY else self.fek1


class CryptoEngine:
    def __init__(self):
        self.slots = [KeySlot(i, label=SLOT_LABELS.get(i, "")) for i in range(N_SLOTS)]
        self.feks_loaded = False

    def snapshot(self):
        return (self.feks_loaded, [(s.key_bytes, s.readable, s.label) for s in self.slots])

    def restore(self, snap) -> None:
        self.feks_loaded, slots = snap
        for s, (k, r, lab) in zip(self.slots, slots):
            s.key_bytes, s.readable, s.label = k, r, lab

    def slot(self, index: int) -> KeySlot:
        return self.slots[index]

    def populated(self) -> dict[int, bytes]:
        return {s.index: s.key_bytes for s in self.slots if not s.empty}


def load_feks(engine: CryptoEngine, source: FekSource) -> None:
    if engine.feks_loaded:
        raise CryptoEngineError("FEKs already loaded")
    engine.slots[FEK1_SLOT].key_bytes = source.fek1
    engine.slots[FEK2_SLOT].key_bytes = source.fek2_effective
    engine.feks_loaded = True


@functools.lru_cache(maxsize=64)
def _cbc_decrypt_cached(key: bytes, data: bytes) -> bytes:
    return aes.cbc_decrypt(key, data)


def decrypt_key_blob(engine: CryptoEngine, blob: bytes) -> bytes:
    """Decrypt ``blob`` with FEK1 (CBC, zero IV) and load the keys it names.

    Returns the decrypted plaintext.
    """
    if len(blob) % aes.BLOCK:
        raise CryptoEngineError("key blob length is not a multiple of 16")
    fek1 = engine.slots[FEK1_SLOT].key_bytes
    if not fek1:
        raise CryptoEngineError("FEK1 not loaded")
    plain = _cbc_decrypt_cached(fek1, bytes(blob))
    for off in range(0, len(plain) - RECORD_SIZE + 1, RECORD_SIZE):
        rec = plain[off:off + RECORD_SIZE]
        if rec[:4] != RECORD_MAGIC:
            break
        idx = rec[4]
        if idx >= N_SLOTS:
            break
        slot = engine.slots[idx]
        slot.key_bytes = rec[16:32]
        slot.label = rec[5:16].rstrip(b"\0").decode("ascii", "replace")
    return plain


def derive_odm_key(fek2: bytes) -> bytes:
    return aes.encrypt_block(aes.expand_key(fek2), ODM_DERIVE_CONSTANT)


def _tag(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()[:16]


def wrap_layer(key: bytes, data: bytes) -> bytes:
    padded = data + bytes(-len(data) % aes.BLOCK)
    body = struct.pack("<I", len(data)) + aes.cbc_encrypt(key, padded)
    return body + _tag(key, body)


@functools.lru_cache(maxsize=64)
def unwrap_layer(key: bytes, image: bytes) -> bytes:
    if len(image) < 4 + 16 or (len(image) - 4 - 16) % aes.BLOCK:
        raise AuthenticationError("truncated or malformed image")
    body, tag = image[:-16], image[-16:]
    if not hmac.compare_digest(_tag(key, body), tag):
        raise AuthenticationError("tag mismatch")
    (length,) = struct.unpack_from("<I", body)
    plain = aes.cbc_decrypt(key, body[4:])
    if length > len(plain):
        raise AuthenticationError("length field exceeds payload")
    return plain[:length]


def encrypt_mb1(plaintext: bytes, mb1_key: bytes, odm_key: bytes | None = None) -> bytes:
    """Companion encryptor: Nvidia layer first, then the optional ODM layer."""
    image = wrap_layer(mb1_key, plaintext)
    if odm_key is not None:
        image = wrap_layer(odm_key, image)
    return image


def decrypt_mb1(engine: CryptoEngine, mb1_image: bytes, odm_enabled: bool) -> tuple[bytes, bool]:
    """Peel the ODM layer (if enabled) then the Nvidia layer.

    On success the MB1 key slot is cleared and ``(plaintext, True)`` is
    returned; any failure raises :class:`AuthenticationError`.
    """
    mb1_key = engine.slots[MB1_SLOT].key_bytes
    if not mb1_key:
        raise AuthenticationError("MB1 key slot is empty")
    image = bytes(mb1_image)
    if odm_enabled:
        odm = engine.slots[ODM_SLOT]
        if odm.empty:
            fek2 = engine.slots[FEK2_SLOT].key_bytes
            if not fek2:
                raise AuthenticationError("FEK2 not loaded, cannot derive ODM key")
            odm.key_bytes = derive_odm_key(fek2)
        image = unwrap_layer(odm.key_bytes, image)
    plaintext = unwrap_layer(mb1_key, image)
    engine.slots[MB1_SLOT].clear()
    return plaintext, True


def build_key_blob(fek1: bytes, keys: list[tuple[int, str, bytes]], size: int = KEY_BLOB_SIZE) -> bytes:
    """Companion generator for the encrypted key blob."""
    plain = bytearray()
    for idx, label, key in keys:
        if len(key) != 16 or not 0 <= idx < N_SLOTS:
            raise ValueError(f"bad key record for slot {idx}")
        lab = label.encode("ascii")[:11]
        plain += RECORD_MAGIC + bytes([idx]) + lab + bytes(11 - len(lab)) + key
    if len(plain) > size:
        raise ValueError("key records do not fit the blob")
    plain += bytes(size - len(plain))
    return aes.cbc_encrypt(fek1, bytes(plain))
