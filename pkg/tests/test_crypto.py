import base64
import os

import pytest
from cryptography.fernet import Fernet, InvalidToken as LibInvalidToken

from fldec import crypto

VECTOR_SECRET = "cw_0x689RpI-jtRR7oE8h_eQsKImvJapLeSbXpwF4e4="
VECTOR_TOKEN = b"gAAAAAAdwJ6wAAECAwQFBgcICQoLDA0ODy021cpGVWKZ_eEwCGM4BLLF_5CV9dOPmrhuVUPgJobwOz7JcbmrR64jVmpU4IwqDA=="
VECTOR_NOW = 499162800


def test_published_vector_decrypts():
    key = crypto.ClientKey.decode(VECTOR_SECRET)
    assert crypto.decrypt(key, VECTOR_TOKEN, ttl=60, now=VECTOR_NOW + 1) == b"hello"


def test_published_vector_encrypts_byte_for_byte():
    key = crypto.ClientKey.decode(VECTOR_SECRET)
    assert crypto.encrypt(key, b"hello", timestamp=VECTOR_NOW, iv=bytes(range(16))) == VECTOR_TOKEN


def test_interoperates_with_reference_library():
    key = crypto.generate_key()
    lib = Fernet(key.encode())
    assert lib.decrypt(crypto.encrypt(key, b"to the library")) == b"to the library"
    assert crypto.decrypt(key, lib.encrypt(b"from the library")) == b"from the library"


def test_key_encoding_roundtrip_and_redacted_repr(tmp_path):
    key = crypto.generate_key()
    assert len(key.encode()) == 44
    crypto.save_key(key, tmp_path / "k")
    assert crypto.load_key(tmp_path / "k") == key
    assert key.encode() not in repr(key)


def test_key_must_be_32_bytes():
    with pytest.raises(ValueError):
        crypto.ClientKey.decode(base64.urlsafe_b64encode(b"short"))


def test_entropy_failure_is_reported():
    with pytest.raises(RuntimeError):
        crypto.generate_key(entropy=lambda n: b"")


def test_wrong_key_is_rejected():
    token = crypto.encrypt(crypto.generate_key(), b"secret")
    with pytest.raises(crypto.InvalidToken):
        crypto.decrypt(crypto.generate_key(), token)


def test_expired_token():
    key = crypto.generate_key()
    token = crypto.encrypt(key, b"x", timestamp=1000)
    assert crypto.decrypt(key, token, ttl=60, now=1060) == b"x"
    with pytest.raises(crypto.Expired):
        crypto.decrypt(key, token, ttl=60, now=1061)


def test_far_future_timestamp_is_rejected():
    key = crypto.generate_key()
    token = crypto.encrypt(key, b"x", timestamp=10_000)
    with pytest.raises(crypto.InvalidToken):
        crypto.decrypt(key, token, ttl=3600, now=10_000 - crypto.MAX_CLOCK_SKEW - 1)


@pytest.mark.parametrize("bad", [b"", b"gAAAA", b"not base64!!", b"AAAA" * 30])
def test_malformed_tokens_are_rejected(bad):
    with pytest.raises(crypto.InvalidToken):
        crypto.decrypt(crypto.generate_key(), bad)


def test_empty_plaintext_roundtrip():
    key = crypto.generate_key()
    assert crypto.decrypt(key, crypto.encrypt(key, b"")) == b""


def test_single_bit_flips_are_rejected_by_both_implementations():
    key = crypto.generate_key()
    raw = bytearray(base64.urlsafe_b64decode(crypto.encrypt(key, os.urandom(40))))
    lib = Fernet(key.encode())
    for bit in range(0, len(raw) * 8, 7):
        t = bytearray(raw)
        t[bit // 8] ^= 1 << (bit % 8)
        token = base64.urlsafe_b64encode(bytes(t))
        with pytest.raises(crypto.InvalidToken):
            crypto.decrypt(key, token)
        with pytest.raises(LibInvalidToken):
            lib.decrypt(token)


def test_measure_crypto_time_is_positive():
    assert crypto.measure_crypto_time([10, 1000]) > 0
