"""AES-128 block cipher and CBC mode, in plain Python."""

from __future__ import annotations

BLOCK = 16


def _xtime(a: int) -> int:
    a <<= 1
    return (a ^ 0x11B) if a & 0x100 else a


def _gmul(a: int, b: int) -> int:
    r = 0
    while b:
        if b & 1:
            r ^= a
        a = _xtime(a)
        b >>= 1
    return r


def _build_sbox() -> tuple[list[int], list[int]]:
    sbox = [0] * 256
    inv = [0] * 256
    for x in range(256):
        # multiplicative inverse in GF(2^8), 0 maps to 0
        y = 0 if x == 0 else next(c for c in range(1, 256) if _gmul(x, c) == 1)
        s = y
        for _ in range(4):
            y = ((y << 1) | (y >> 7)) & 0xFF
            s ^= y
        s ^= 0x63
        sbox[x] = s
        inv[s] = x
    return sbox, inv


SBOX, INV_SBOX = _build_sbox()
_MUL = {k: [_gmul(x, k) for x in range(256)] for k in (2, 3, 9, 11, 13, 14)}
_RCON = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36]


def expand_key(key: bytes) -> list[list[int]]:
    if len(key) != 16:
        raise ValueError("AES-128 key must be 16 bytes")
    w = [list(key[i:i + 4]) for i in range(0, 16, 4)]
    for i in range(4, 44):
        t = list(w[i - 1])
        if i % 4 == 0:
            t = t[1:] + t[:1]
            t = [SBOX[b] for b in t]
            t[0] ^= _RCON[i // 4 - 1]
        w.append([a ^ b for a, b in zip(w[i - 4], t)])
    return [sum(w[r * 4:r * 4 + 4], []) for r in range(11)]


def _shift_rows(s):
    # state is column-major: s[c*4 + r]
    return [s[((c + r) % 4) * 4 + r] for c in range(4) for r in range(4)]


def _inv_shift_rows(s):
    return [s[((c - r) % 4) * 4 + r] for c in range(4) for r in range(4)]


def _mix_columns(s):
    m2, m3 = _MUL[2], _MUL[3]
    out = []
    for c in range(4):
        a0, a1, a2, a3 = s[c * 4:c * 4 + 4]
        out += [m2[a0] ^ m3[a1] ^ a2 ^ a3,
                a0 ^ m2[a1] ^ m3[a2] ^ a3,
                a0 ^ a1 ^ m2[a2] ^ m3[a3],
                m3[a0] ^ a1 ^ a2 ^ m2[a3]]
    return out


def _inv_mix_columns(s):
    m9, m11, m13, m14 = _MUL[9], _MUL[11], _MUL[13], _MUL[14]
    out = []
    for c in range(4):
        a0, a1, a2, a3 = s[c * 4:c * 4 + 4]
        out += [m14[a0] ^ m11[a1] ^ m13[a2] ^ m9[a3],
                m9[a0] ^ m14[a1] ^ m11[a2] ^ m13[a3],
                m13[a0] ^ m9[a1] ^ m14[a2] ^ m11[a3],
                m11[a0] ^ m13[a1] ^ m9[a2] ^ m14[a3]]
    return out


def encrypt_block(round_keys: list[list[int]], block: bytes) -> bytes:
    s = [b ^ k for b, k in zip(block, round_keys[0])]
    for rnd in range(1, 10):
        s = _mix_columns(_shift_rows([SBOX[b] for b in s]))
        s = [b ^ k for b, k in zip(s, round_keys[rnd])]
    s = _shift_rows([SBOX[b] for b in s])
    return bytes(b ^ k for b, k in zip(s, round_keys[10]))


def decrypt_block(round_keys: list[list[int]], block: bytes) -> bytes:
    s = [b ^ k for b, k in zip(block, round_keys[10])]
    s = [INV_SBOX[b] for b in _inv_shift_rows(s)]
    for rnd in range(9, 0, -1):
        s = [b ^ k for b, k in zip(s, round_keys[rnd])]
        s = [INV_SBOX[b] for b in _inv_shift_rows(_inv_mix_columns(s))]
    return bytes(b ^ k for b, k in zip(s, round_keys[0]))


ZERO_IV = bytes(BLOCK)


def cbc_encrypt(key: bytes, data: bytes, iv: bytes = ZERO_IV) -> bytes:
    if len(data) % BLOCK:
        raise ValueError("CBC input must be a multiple of 16 bytes")
    rk = expand_key(key)
    prev, out = iv, bytearray()
    for i in range(0, len(data), BLOCK):
        prev = encrypt_block(rk, bytes(a ^ b for a, b in zip(data[i:i + BLOCK], prev)))
        out += prev
    return bytes(out)


def cbc_decrypt(key: bytes, data: bytes, iv: bytes = ZERO_IV) -> bytes:
    if len(data) % BLOCK:
        raise ValueError("CBC input must be a multiple of 16 bytes")
    rk = expand_key(key)
    prev, out = iv, bytearray()
    for i in range(0, len(data), BLOCK):
        blk = data[i:i + BLOCK]
        out += bytes(a ^ b for a, b in zip(decrypt_block(rk, blk), prev))
        prev = blk
    return bytes(out)
