"""Hashing, deterministic signatures, node identities and the hash-counter RNG.

Two signature schemes share one small interface:

* :class:`Ed25519Scheme` is the production scheme. Ed25519 (RFC 8032) is
  deterministic by construction, so the same key and message always give the
  same 64 signature bytes.
* :class:`TransparentScheme` is a test double: a tag ``H(sk || msg)`` checked
  against a registry of the keys it handed out. It is fast and easy to reason
  about, and nothing outside tests should use it.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NewType, Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

HASH_LEN = 32

# A node is its 32-byte public key; network ordering is plain bytes ordering.
NodeId = NewType("NodeId", bytes)


def digest(data: bytes) -> bytes:
    """SHA-256 of ``data``."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: NodeId

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}...)"


class SignatureScheme(Protocol):
    name: str

    def keypair(self, secret: bytes) -> KeyPair: ...

    def sign(self, key: KeyPair, msg: bytes) -> bytes: ...

    def verify(self, pk: bytes, sig: bytes, msg: bytes) -> bool: ...


@lru_cache(maxsize=4096)
def _private_key(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


@lru_cache(maxsize=4096)
def _public_key(pk: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(pk)


# Verification is a pure function of its arguments, so memoising it is safe.
# In a simulation every node re-verifies every block; this keeps that cheap.
@lru_cache(maxsize=1 << 17)
def _ed25519_verify(pk: bytes, sig: bytes, msg: bytes) -> bool:
    if len(pk) != 32 or len(sig) != 64:
        return False
    try:
        _public_key(pk).verify(sig, msg)
    except (InvalidSignature, ValueError):
        return False
    return True


class Ed25519Scheme:
    name = "ed25519"
    signature_len = 64

    def keypair(self, secret: bytes) -> KeyPair:
        if len(secret) != 32:
            raise ValueError("Ed25519 secret must be 32 bytes")
        pub = _private_key(secret).public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return KeyPair(secret, NodeId(pub))

    def sign(self, key: KeyPair, msg: bytes) -> bytes:
        return _private_key(key.secret).sign(msg)

    def verify(self, pk: bytes, sig: bytes, msg: bytes) -> bool:
        return _ed25519_verify(bytes(pk), bytes(sig), bytes(msg))


@dataclass
class TransparentScheme:
    """Signature double: ``sig = H(sk || msg)``, verified through a key registry.

    Only keys created by :meth:`keypair` on the same instance verify.
    """

    name: str = "transparent"
    signature_len: int = 32
    registry: dict[bytes, bytes] = field(default_factory=dict)

    def keypair(self, secret: bytes) -> KeyPair:
        pub = NodeId(digest(b"transparent-pk" + secret))
        self.registry[pub] = secret
        return KeyPair(secret, pub)

    def sign(self, key: KeyPair, msg: bytes) -> bytes:
        return digest(key.secret + msg)

    def verify(self, pk: bytes, sig: bytes, msg: bytes) -> bool:
        secret = self.registry.get(bytes(pk))
        if secret is None:
            return False
        return digest(secret + msg) == bytes(sig)


ED25519 = Ed25519Scheme()


def sign(key: KeyPair, msg: bytes) -> bytes:
    return ED25519.sign(key, msg)


def verify(pk: bytes, sig: bytes, msg: bytes) -> bool:
    """True iff ``sig`` is the Ed25519 signature of ``msg`` under ``pk``.

    Malformed inputs give False, never an exception.
    """
    return ED25519.verify(pk, sig, msg)


def derive_secret(seed: bytes | int, index: int) -> bytes:
    """32-byte key seed for node ``index`` of a network seeded by ``seed``."""
    if isinstance(seed, int):
        seed = seed.to_bytes(8, "big")
    return digest(b"poichain-key" + seed + index.to_bytes(4, "big"))


def make_keys(
    seed: bytes | int, n: int, scheme: SignatureScheme = ED25519
) -> list[KeyPair]:
    return [scheme.keypair(derive_secret(seed, i)) for i in range(n)]


def rng_word(seed: bytes, i: int) -> int:
    """Word ``i`` of the stream for ``seed``: first 8 bytes (big-endian) of H(seed || i)."""
    return struct.unpack(">Q", digest(seed + struct.pack(">Q", i))[:8])[0]


@dataclass(frozen=True)
class SeededRng:
    """Counter-mode RNG over SHA-256.

    The stream depends only on ``seed``; ``next()`` returns the word and the
    advanced state, so callers can batch or replay draws freely.
    """

    seed: bytes
    counter: int = 0

    def next(self) -> tuple[int, SeededRng]:
        return rng_word(self.seed, self.counter), SeededRng(self.seed, self.counter + 1)
