import pytest

from datamarket import codec, crypto
from datamarket.crypto import KeyRole, SymmetricKey

RFC8439_KEY = bytes(range(0x80, 0xa0))
RFC8439_NONCE = bytes.fromhex("070000004041424344454647")
RFC8439_AAD = bytes.fromhex("50515253c0c1c2c3c4c5c6c7")
RFC8439_PLAIN = (b"Ladies and Gentlemen of the class of '99: If I could offer you only one "
                 b"tip for the future, sunscreen would be it.")
RFC8439_TAG = bytes.fromhex("1ae10b594f09e26a7e902ecbd0600691")

RFC8032_SEED = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
RFC8032_PUB = bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
RFC8032_SIG = bytes.fromhex(
    "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e3970"
    "1cf9b46bd25bf5f0595bbe24655141438e7a100b")

RFC7748_ALICE = bytes.fromhex("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
RFC7748_ALICE_PUB = bytes.fromhex(
    "8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a")


def test_sha256_vectors():
    assert crypto.hash(b"").hex() == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")
    assert crypto.hash(b"abc").hex() == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
    assert len(crypto.hash(b"x")) == crypto.DIGEST_SIZE


def test_single_bit_flip_changes_digest():
    data = bytearray(b"data usage record")
    base = crypto.hash(bytes(data))
    for i in range(len(data) * 8):
        flipped = bytearray(data)
        flipped[i // 8] ^= 1 << (i % 8)
        assert crypto.hash(bytes(flipped)) != base


def test_chacha20_poly1305_vector():
    key = SymmetricKey(RFC8439_KEY, KeyRole.DATA)
    ct = crypto.aead_encrypt(key, RFC8439_PLAIN, RFC8439_AAD, RFC8439_NONCE)
    assert ct.tag == RFC8439_TAG
    assert ct.body[:4].hex() == "d31a8d34"
    assert crypto.aead_decrypt(key, ct, RFC8439_AAD) == RFC8439_PLAIN


def test_aead_roundtrip_through_wire_bytes():
    rng = crypto.SeededRng(1)
    key = rng.symmetric_key(KeyRole.DATA)
    ct = crypto.aead_encrypt(key, b"table", b"ad", rng.nonce("p"))
    back = crypto.Ciphertext.from_bytes(ct.to_bytes())
    assert back == ct
    assert crypto.aead_decrypt(key, back, b"ad") == b"table"


def test_aead_every_single_byte_flip_fails():
    rng = crypto.SeededRng(2)
    key = rng.symmetric_key(KeyRole.DATA)
    wire = crypto.aead_encrypt(key, b"owner dataset rows", b"ad", rng.nonce("p")).to_bytes()
    for i in range(len(wire)):
        bad = wire[:i] + bytes([wire[i] ^ 0x01]) + wire[i + 1:]
        with pytest.raises(crypto.AuthFailure):
            crypto.aead_decrypt(key, crypto.Ciphertext.from_bytes(bad), b"ad")


def test_aead_wrong_key_and_wrong_ad():
    rng = crypto.SeededRng(3)
    key, other = rng.symmetric_key(KeyRole.DATA), rng.symmetric_key(KeyRole.DATA)
    ct = crypto.aead_encrypt(key, b"x", b"ad", rng.nonce("p"))
    with pytest.raises(crypto.AuthFailure):
        crypto.aead_decrypt(other, ct, b"ad")
    with pytest.raises(crypto.AuthFailure):
        crypto.aead_decrypt(key, ct, b"ad2")
    with pytest.raises(crypto.AuthFailure):
        crypto.Ciphertext.from_bytes(b"short")


def test_symmetric_key_length_checked():
    with pytest.raises(ValueError):
        SymmetricKey(b"\x00" * 31, KeyRole.DATA)
    assert "material" not in repr(SymmetricKey(b"\x01" * 32, KeyRole.RESULT))


def test_ed25519_vector():
    key = crypto.SigningKey(RFC8032_SEED)
    assert key.public == RFC8032_PUB
    assert crypto.sign(key, b"") == RFC8032_SIG
    assert crypto.verify(RFC8032_PUB, b"", RFC8032_SIG)


def test_signature_rejections():
    key = crypto.SigningKey(RFC8032_SEED)
    sig = crypto.sign(key, b"msg")
    assert not crypto.verify(key.public, b"msh", sig)
    assert not crypto.verify(key.public, b"msg", sig[:-1] + bytes([sig[-1] ^ 1]))
    other = crypto.SigningKey.generate(crypto.SeededRng(5))
    assert not crypto.verify(other.public, b"msg", sig)
    with pytest.raises(crypto.MalformedSignature):
        crypto.verify(key.public, b"msg", sig[:63])


def test_x25519_vector_and_agreement():
    alice = crypto.ExchangeKey(RFC7748_ALICE)
    assert alice.public == RFC7748_ALICE_PUB
    bob = crypto.ExchangeKey.generate(crypto.SeededRng(4))
    assert alice.exchange(bob.public) == bob.exchange(alice.public)


def test_channel_key_depends_on_transcript():
    secret = b"\x07" * 32
    k1 = crypto.derive_channel_key(secret, crypto.hash(b"t1"))
    k2 = crypto.derive_channel_key(secret, crypto.hash(b"t2"))
    assert k1.role is KeyRole.CHANNEL
    assert k1 != k2
    assert k1 == crypto.derive_channel_key(secret, crypto.hash(b"t1"))


def test_seeded_rng_is_reproducible_and_forks_independently():
    a, b = crypto.SeededRng(9), crypto.SeededRng(9)
    assert a.bytes(16) == b.bytes(16)
    fork = a.fork("x")
    assert a.bytes(8) == b.bytes(8)        # forking does not consume the parent
    assert fork.bytes(8) != crypto.SeededRng(9).fork("y").bytes(8)
    assert crypto.SeededRng(9).fork("x").fork("z").bytes(4) == \
        crypto.SeededRng(9).fork("x").fork("z").bytes(4)


def test_nonces_unique_per_party_and_counter():
    rng = crypto.SeededRng(1)
    seen = {rng.nonce("a") for _ in range(100)} | {rng.nonce("b") for _ in range(100)}
    assert len(seen) == 200
    assert all(len(n) == crypto.NONCE_SIZE for n in seen)
    assert crypto.derive_nonce(1, "a", 0) == crypto.SeededRng(1).nonce("a")
    assert crypto.derive_nonce(1, "a", 0) != crypto.derive_nonce(2, "a", 0)


def test_codec_canonical_and_bytes_roundtrip():
    obj = {"b": b"\x00\xff", "a": [1, (2, 3)], "s": frozenset({"y", "x"})}
    raw = codec.encode(obj)
    assert raw == codec.encode({"s": ["x", "y"], "a": [1, [2, 3]], "b": b"\x00\xff"})
    assert codec.decode(raw) == {"a": [1, [2, 3]], "b": b"\x00\xff", "s": ["x", "y"]}
    with pytest.raises(TypeError):
        codec.encode(object())
