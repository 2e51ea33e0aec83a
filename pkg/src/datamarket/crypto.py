"""Deterministic cryptographic primitives shared by every party.

Algorithms are pinned in :data:`SUITE` so that test vectors stay stable:
SHA-256 for hashing, ChaCha20-Poly1305 for authenticated encryption,
Ed25519 for signatures, X25519 + HKDF-SHA256 for channel keys.
"""

from __future__ import annotations

import enum
import hashlib
import random
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

SUITE = {
    "hash": "sha256",
    "aead": "chacha20-poly1305",
    "signature": "ed25519",
    "kex": "x25519",
    "kdf": "hkdf-sha256",
}

DIGEST_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
SIGNATURE_SIZE = 64


class CryptoError(Exception):
    pass


class AuthFailure(CryptoError):
    """Authenticated decryption rejected the key, body or associated data."""


class MalformedSignature(CryptoError):
    pass


def hash(data: bytes) -> bytes:  # noqa: A001 - domain name
    return hashlib.sha256(data).digest()


def hexs(data: bytes) -> str:
    """Transcript encoding: lowercase hex, no prefix."""
    return data.hex()


class KeyRole(enum.Enum):
    DATA = "data"
    RESULT = "result"
    CHANNEL = "channel"


@dataclass(frozen=True)
class SymmetricKey:
    material: bytes
    role: KeyRole

    def __post_init__(self):
        if len(self.material) != KEY_SIZE:
            raise ValueError(f"symmetric key must be {KEY_SIZE} bytes")

    def __repr__(self) -> str:
        return f"SymmetricKey(role={self.role.value}, id={hash(self.material)[:4].hex()})"


class SeededRng:
    """The single randomness source of a run.

    Every key, nonce and sampled value is drawn from here so two runs with
    the same seed are bit-identical.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._random = random.Random(seed)
        self._counters: dict[str, int] = {}

    def bytes(self, n: int) -> bytes:
        return self._random.randbytes(n)

    def randint(self, a: int, b: int) -> int:
        return self._random.randint(a, b)

    def random(self) -> float:
        return self._random.random()

    def choice(self, seq):
        return self._random.choice(seq)

    def fork(self, label: str) -> "SeededRng":
        """Independent child stream; does not perturb this one."""
        digest = hash(_seed_bytes(self.seed) + label.encode())
        return SeededRng(int.from_bytes(digest[:8], "big") >> 1)

    def symmetric_key(self, role: KeyRole) -> SymmetricKey:
        return SymmetricKey(self.bytes(KEY_SIZE), role)

    def nonce(self, party: str) -> bytes:
        counter = self._counters.get(party, 0)
        self._counters[party] = counter + 1
        return derive_nonce(self.seed, party, counter)


def _seed_bytes(seed: int) -> bytes:
    return str(seed).encode() + b"|"


def derive_nonce(seed: int, party: str, counter: int) -> bytes:
    material = _seed_bytes(seed) + struct.pack(">Q", counter) + party.encode()
    return hash(b"nonce|" + material)[:NONCE_SIZE]


# -- authenticated encryption ------------------------------------------------

@dataclass(frozen=True)
class Ciphertext:
    nonce: bytes
    body: bytes
    tag: bytes
    ad_digest: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.ad_digest + self.body + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Ciphertext":
        head = NONCE_SIZE + DIGEST_SIZE
        if len(raw) < head + TAG_SIZE:
            raise AuthFailure("ciphertext too short")
        return cls(raw[:NONCE_SIZE], raw[head:-TAG_SIZE], raw[-TAG_SIZE:],
                   raw[NONCE_SIZE:head])


def aead_encrypt(key: SymmetricKey, plaintext: bytes, associated_data: bytes,
                 nonce: bytes) -> Ciphertext:
    sealed = ChaCha20Poly1305(key.material).encrypt(nonce, plaintext, associated_data)
    return Ciphertext(nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:], hash(associated_data))


def aead_decrypt(key: SymmetricKey, ct: Ciphertext, associated_data: bytes) -> bytes:
    if hash(associated_data) != ct.ad_digest:
        raise AuthFailure("associated data mismatch")
    try:
        return ChaCha20Poly1305(key.material).decrypt(
            ct.nonce, ct.body + ct.tag, associated_data)
    except InvalidTag:
        raise AuthFailure("authentication failed") from None


# -- signatures ---------------------------------------------------------------

class SigningKey:
    def __init__(self, seed_bytes: bytes):
        self._key = Ed25519PrivateKey.from_private_bytes(seed_bytes)
        self.public = self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    @classmethod
    def generate(cls, rng: SeededRng) -> "SigningKey":
        return cls(rng.bytes(32))

    def __repr__(self) -> str:
        return f"SigningKey(public={self.public[:4].hex()}..)"


def sign(key: SigningKey, data: bytes) -> bytes:
    return key._key.sign(data)


def verify(public_key: bytes, data: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_SIZE:
        raise MalformedSignature(f"signature must be {SIGNATURE_SIZE} bytes")
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except InvalidSignature:
        return False
    except ValueError:
        return False
    return True


# -- key agreement for attested channels -------------------------------------

class ExchangeKey:
    def __init__(self, seed_bytes: bytes):
        self._key = X25519PrivateKey.from_private_bytes(seed_bytes)
        self.public = self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    @classmethod
    def generate(cls, rng: SeededRng) -> "ExchangeKey":
        return cls(rng.bytes(32))

    def exchange(self, peer_public: bytes) -> bytes:
        return self._key.exchange(X25519PublicKey.from_public_bytes(peer_public))


def derive_channel_key(shared_secret: bytes, transcript_digest: bytes) -> SymmetricKey:
    material = HKDF(
        algorithm=hashes.SHA256(),
        length=KEY_SIZE,
        salt=transcript_digest,
        info=b"attested-channel",
    ).derive(shared_secret)
    return SymmetricKey(material, KeyRole.CHANNEL)
