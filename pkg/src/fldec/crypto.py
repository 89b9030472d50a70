"""Fernet tokens (AES-128-CBC + HMAC-SHA256) for offloaded dataset shards.

The token layer is written out here so expiry can be reported separately
from tampering; the block cipher, padding and MAC come from ``cryptography``.
"""

from __future__ import annotations

import base64
import binascii
import hmac
import os
import struct
import time
from dataclasses import dataclass
from hashlib import sha256

from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

VERSION = 0x80
MAX_CLOCK_SKEW = 60


class InvalidToken(Exception):
    pass


class Expired(InvalidToken):
    pass


@dataclass(frozen=True)
class ClientKey:
    signing_key: bytes
    encryption_key: bytes

    def __post_init__(self):
        if len(self.signing_key) != 16 or len(self.encryption_key) != 16:
            raise ValueError("Fernet keys are 16 + 16 bytes")

    def encode(self) -> str:
        return base64.urlsafe_b64encode(self.signing_key + self.encryption_key).decode("ascii")

    @classmethod
    def decode(cls, text: str | bytes) -> "ClientKey":
        if isinstance(text, str):
            text = text.encode("ascii")
        try:
            raw = base64.urlsafe_b64decode(text.strip())
        except (binascii.Error, ValueError) as exc:
            raise ValueError("key is not valid base64url") from exc
        if len(raw) != 32:
            raise ValueError(f"decoded key must be 32 bytes, got {len(raw)}")
        return cls(raw[:16], raw[16:])

    def __repr__(self) -> str:  # keep key bytes out of logs
        return "ClientKey(<redacted>)"


def generate_key(entropy=os.urandom) -> ClientKey:
    raw = entropy(32)
    if not isinstance(raw, (bytes, bytearray)) or len(raw) != 32:
        raise RuntimeError("entropy source did not return 32 bytes")
    return ClientKey(bytes(raw[:16]), bytes(raw[16:]))


def load_key(path) -> ClientKey:
    with open(path, "rb") as fh:
        return ClientKey.decode(fh.read())


def save_key(key: ClientKey, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(key.encode() + "\n")


def encrypt(key: ClientKey, plaintext: bytes, timestamp: int | None = None, iv: bytes | None = None) -> bytes:
    """Return the base64url token for ``plaintext``. A fresh IV is drawn unless given."""
    ts = int(time.time()) if timestamp is None else int(timestamp)
    iv = os.urandom(16) if iv is None else iv
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(algorithms.AES(key.encryption_key), modes.CBC(iv)).encryptor()
    body = struct.pack(">BQ", VERSION, ts) + iv + enc.update(padded) + enc.finalize()
    tag = hmac.new(key.signing_key, body, sha256).digest()
    return base64.urlsafe_b64encode(body + tag)


def token_timestamp(token: bytes) -> int:
    raw = _raw(token)
    return struct.unpack(">Q", raw[1:9])[0]


def _raw(token: bytes | str) -> bytes:
    if isinstance(token, str):
        token = token.encode("ascii")
    try:
        raw = base64.urlsafe_b64decode(token)
    except (binascii.Error, ValueError):
        raise InvalidToken("token is not base64url") from None
    if base64.urlsafe_b64encode(raw) != token.strip():
        raise InvalidToken("token has non-canonical encoding")
    if len(raw) < 1 + 8 + 16 + 16 + 32 or (len(raw) - 57) % 16:
        raise InvalidToken("token has impossible length")
    if raw[0] != VERSION:
        raise InvalidToken(f"unsupported token version 0x{raw[0]:02x}")
    return raw


def decrypt(key: ClientKey, token: bytes | str, ttl: int | None = None, now: int | None = None) -> bytes:
    raw = _raw(token)
    body, tag = raw[:-32], raw[-32:]
    if not hmac.compare_digest(hmac.new(key.signing_key, body, sha256).digest(), tag):
        raise InvalidToken("HMAC verification failed")
    ts = struct.unpack(">Q", body[1:9])[0]
    if ttl is not None:
        current = int(time.time()) if now is None else int(now)
        if ts + ttl < current:
            raise Expired(f"token is {current - ts} s old, ttl {ttl} s")
        if ts > current + MAX_CLOCK_SKEW:
            raise InvalidToken("token timestamp is too far in the future")
    iv, ciphertext = body[9:25], body[25:]
    dec = Cipher(algorithms.AES(key.encryption_key), modes.CBC(iv)).decryptor()
    padded = dec.update(ciphertext) + dec.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError:
        raise InvalidToken("bad padding") from None


def measure_crypto_time(sizes, key: ClientKey | None = None, clock=time.perf_counter) -> float:
    """Wall seconds spent encrypting then decrypting one payload of each size."""
    key = key or generate_key()
    total = 0.0
    for n in sizes:
        data = os.urandom(n)
        t0 = clock()
        decrypt(key, encrypt(key, data))
        total += clock() - t0
    return total
