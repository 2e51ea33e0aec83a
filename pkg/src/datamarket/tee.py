"""Simulated trusted execution: measured enclaves, a mock attestation
service, attested channels, key provisioning and sanitizing execution.

The untrusted host only ever handles sealed bytes. Everything an enclave
holds lives in underscore attributes reached through its entry points; the
``inspect`` method exists for tests and the invariant checker.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import Callable

from . import codec, crypto, workload
from .crypto import KeyRole, SymmetricKey


class TeeError(Exception):
    code = "tee-error"


class AttestationError(TeeError):
    code = "attestation-failure"


class StaleNonce(AttestationError):
    code = "stale-nonce"


class ServiceUnreachable(AttestationError):
    code = "service-unreachable"


class MeasurementMismatch(AttestationError):
    code = "measurement-mismatch"


class AttestationRequired(TeeError):
    code = "attestation-required"


class ChannelClosed(TeeError):
    code = "channel-closed"


class MissingKey(TeeError):
    code = "missing-key"


class DecryptFailure(TeeError):
    code = "decrypt-failure"


class BindingMismatch(TeeError):
    code = "binding-mismatch"


# -- programs -----------------------------------------------------------------

@dataclass(frozen=True)
class EnclaveProgram:
    op_id: str
    code: bytes
    run: Callable[[list[bytes]], bytes] | None = None

    @property
    def measurement(self) -> bytes:
        return crypto.hash(self.code)


def _run_stats(plaintexts: list[bytes]) -> bytes:
    return workload.encode_result(workload.column_stats(plaintexts))


STATS_PROGRAM = EnclaveProgram(
    "column-stats",
    b"enclave:column-stats:v1:count,mean,pstdev:integer-csv",
    _run_stats,
)
BROKER_PROGRAM = EnclaveProgram("broker-keystore", b"enclave:broker-keystore:v1")

MANIFEST = {p.op_id: p for p in (STATS_PROGRAM, BROKER_PROGRAM)}


def manifest_table() -> dict[str, str]:
    """op id -> measurement hex; the measurement is what contracts store."""
    return {op_id: p.measurement.hex() for op_id, p in MANIFEST.items()}


def program_for_measurement(measurement: bytes) -> EnclaveProgram | None:
    for p in MANIFEST.values():
        if p.measurement == measurement:
            return p
    return None


# -- capsules and result messages --------------------------------------------

@dataclass(frozen=True)
class DataCapsule:
    owner: str
    descriptor: str
    ciphertext: bytes

    @property
    def associated_data(self) -> bytes:
        return codec.encode(["capsule", self.owner, self.descriptor])

    def to_bytes(self) -> bytes:
        return codec.encode([self.owner, self.descriptor, self.ciphertext])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DataCapsule":
        owner, descriptor, ct = codec.decode(raw)
        return cls(owner, descriptor, ct)


def seal_capsule(rng: crypto.SeededRng, owner: str, descriptor: str,
                 k_data: SymmetricKey, plaintext: bytes) -> DataCapsule:
    ad = codec.encode(["capsule", owner, descriptor])
    ct = crypto.aead_encrypt(k_data, plaintext, ad, rng.nonce(f"capsule:{owner}"))
    return DataCapsule(owner, descriptor, ct.to_bytes())


def binding_bytes(binding) -> bytes:
    return codec.encode(["binding", [list(b) for b in binding]])


@dataclass(frozen=True)
class ResultBundle:
    binding: tuple
    c_result: bytes
    c_result_hash: bytes
    kr_hash: bytes

    def to_bytes(self) -> bytes:
        return codec.encode({"type": "bundle", "binding": [list(b) for b in self.binding],
                             "c_result": self.c_result, "c_result_hash": self.c_result_hash,
                             "kr_hash": self.kr_hash})

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ResultBundle":
        d = codec.decode(raw)
        return cls(tuple(tuple(b) for b in d["binding"]), d["c_result"],
                   d["c_result_hash"], d["kr_hash"])


@dataclass(frozen=True)
class KeySlip:
    binding: tuple
    k_result: bytes

    def to_bytes(self) -> bytes:
        return codec.encode({"type": "keyslip", "binding": [list(b) for b in self.binding],
                             "k_result": self.k_result})

    @classmethod
    def from_bytes(cls, raw: bytes) -> "KeySlip":
        d = codec.decode(raw)
        return cls(tuple(tuple(b) for b in d["binding"]), d["k_result"])


def decrypt_result(k_result: bytes, bundle: ResultBundle) -> bytes:
    key = SymmetricKey(k_result, KeyRole.RESULT)
    return crypto.aead_decrypt(key, crypto.Ciphertext.from_bytes(bundle.c_result),
                               binding_bytes(bundle.binding))


# -- attestation --------------------------------------------------------------

class Platform:
    """A TEE-capable machine; its key signs quotes (stands in for EPID)."""

    def __init__(self, host_id: str, rng: crypto.SeededRng, genuine: bool = True):
        self.host_id = host_id
        self.genuine = genuine
        self._key = crypto.SigningKey.generate(rng)
        self.public_key = self._key.public


@dataclass(frozen=True)
class Quote:
    measurement: bytes
    nonce: bytes
    enclave_pub: bytes
    challenger_pub: bytes
    platform_id: str
    instance_id: str
    signature: bytes = b""

    def body(self) -> bytes:
        return codec.encode(["quote", self.measurement, self.nonce, self.enclave_pub,
                             self.challenger_pub, self.platform_id, self.instance_id])

    @property
    def digest(self) -> bytes:
        return crypto.hash(self.body())

    def to_bytes(self) -> bytes:
        return codec.encode([self.measurement, self.nonce, self.enclave_pub,
                             self.challenger_pub, self.platform_id, self.instance_id,
                             self.signature])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Quote":
        return cls(*codec.decode(raw))


@dataclass(frozen=True)
class AttestationReport:
    quote_digest: bytes
    measurement: bytes
    nonce: bytes
    verdict: str
    issue_time: int
    signature: bytes = b""

    def body(self) -> bytes:
        return codec.encode(["report", self.quote_digest, self.measurement, self.nonce,
                             self.verdict, self.issue_time])

    @property
    def digest(self) -> bytes:
        return crypto.hash(self.body())

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_bytes(self) -> bytes:
        return codec.encode([self.quote_digest, self.measurement, self.nonce,
                             self.verdict, self.issue_time, self.signature])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttestationReport":
        return cls(*codec.decode(raw))


class MockIAS:
    """Attestation service with the revocation-list and report latencies of
    the reference deployment (0.1 s and 0.5 s)."""

    def __init__(self, rng: crypto.SeededRng, sigrl_latency_ms: int = 100,
                 report_latency_ms: int = 500):
        self.sigrl_latency_ms = sigrl_latency_ms
        self.report_latency_ms = report_latency_ms
        self._key = crypto.SigningKey.generate(rng)
        self.public_key = self._key.public
        self._platforms: dict[str, Platform] = {}
        self._seen_nonces: set[bytes] = set()
        self.reachable = True

    @property
    def latency_ms(self) -> int:
        return self.sigrl_latency_ms + self.report_latency_ms

    def register_platform(self, platform: Platform) -> None:
        self._platforms[platform.host_id] = platform

    def verify_quote(self, quote: Quote, now: int = 0) -> AttestationReport:
        if not self.reachable:
            raise ServiceUnreachable("attestation service unreachable")
        if quote.nonce in self._seen_nonces:
            raise StaleNonce(quote.nonce.hex())
        self._seen_nonces.add(quote.nonce)
        platform = self._platforms.get(quote.platform_id)
        ok = False
        if platform is not None and platform.genuine:
            try:
                ok = crypto.verify(platform.public_key, quote.body(), quote.signature)
            except crypto.MalformedSignature:
                ok = False
        unsigned = AttestationReport(quote.digest, quote.measurement, quote.nonce,
                                     "pass" if ok else "fail", now)
        return dataclasses.replace(unsigned, signature=crypto.sign(self._key, unsigned.body()))


def verify_report(report: AttestationReport | None, quote: Quote, ias_public: bytes,
                  expected_measurement: bytes, nonce: bytes) -> None:
    """Challenger-side checks. Raises on any failure."""
    if report is None:
        raise AttestationRequired("no report")
    if not crypto.verify(ias_public, report.body(), report.signature):
        raise AttestationError("bad service signature")
    if report.quote_digest != quote.digest or report.nonce != nonce or quote.nonce != nonce:
        raise AttestationError("report does not match challenge")
    if not report.passed:
        raise AttestationRequired("verdict " + report.verdict)
    if report.measurement != expected_measurement or quote.measurement != expected_measurement:
        raise MeasurementMismatch(report.measurement.hex())


# -- attested channels -----------------------------------------------------------

class ChannelEnd:
    """One side of an attested, confidential, integrity-protected channel.

    Frames are authenticated with the sender's role (initiator or responder)
    so a frame cannot be reflected back to its sender.
    """

    def __init__(self, key: SymmetricKey, channel_id: str, local: str, remote: str,
                 rng: crypto.SeededRng, initiator: bool = True):
        self._key = key
        self._role = "initiator" if initiator else "responder"
        self._peer_role = "responder" if initiator else "initiator"
        self.channel_id = channel_id
        self.local = local
        self.remote = remote
        self._rng = rng
        self._send_seq = 0
        self._seen: set[int] = set()

    def _ad(self, sender: str, seq: int) -> bytes:
        return codec.encode(["chan", self.channel_id, sender, seq])

    def seal(self, plaintext: bytes) -> bytes:
        self._send_seq += 1
        seq = self._send_seq
        nonce = self._rng.nonce(f"chan:{self.channel_id}:{self.local}")
        ct = crypto.aead_encrypt(self._key, plaintext, self._ad(self._role, seq), nonce)
        return struct.pack(">Q", seq) + ct.to_bytes()

    def open(self, wire: bytes) -> bytes:
        if len(wire) < 8:
            raise crypto.AuthFailure("short frame")
        (seq,) = struct.unpack(">Q", wire[:8])
        if seq in self._seen:
            raise crypto.AuthFailure("replayed frame")
        plaintext = crypto.aead_decrypt(self._key, crypto.Ciphertext.from_bytes(wire[8:]),
                                        self._ad(self._peer_role, seq))
        self._seen.add(seq)
        return plaintext


def _transcript_digest(quote: Quote) -> bytes:
    return crypto.hash(b"channel-transcript" + quote.digest
                       + quote.challenger_pub + quote.enclave_pub)


def connect(report: AttestationReport | None, quote: Quote, exchange_key: crypto.ExchangeKey,
            ias_public: bytes, expected_measurement: bytes, nonce: bytes, local: str,
            remote: str, rng: crypto.SeededRng) -> ChannelEnd:
    """Challenger side: verify the report, then derive the channel key."""
    verify_report(report, quote, ias_public, expected_measurement, nonce)
    if quote.challenger_pub != exchange_key.public:
        raise AttestationError("quote bound to another challenger")
    key = crypto.derive_channel_key(exchange_key.exchange(quote.enclave_pub),
                                    _transcript_digest(quote))
    return ChannelEnd(key, quote.digest.hex()[:16], local, remote, rng)


def derive_session(enclave_key: crypto.ExchangeKey, quote: Quote) -> SymmetricKey:
    return crypto.derive_channel_key(enclave_key.exchange(quote.challenger_pub),
                                     _transcript_digest(quote))


# -- enclaves ------------------------------------------------------------------------

class EnclaveHandle:
    def __init__(self, host_id: str, program: EnclaveProgram, platform: Platform,
                 rng: crypto.SeededRng, instance_id: str):
        self.host_id = host_id
        self.program = program
        self.measurement = crypto.hash(program.code)
        self.instance_id = instance_id
        self._platform = platform
        self._rng = rng
        self._keys: dict[str, SymmetricKey] = {}
        self._plaintext: list[bytes] = []
        self._pending_kr: SymmetricKey | None = None
        self._sessions: dict[bytes, tuple[crypto.ExchangeKey, Quote]] = {}
        self._channels: dict[str, ChannelEnd] = {}
        self._bindings: dict[str, tuple] = {}
        self._exchange: dict[str, crypto.ExchangeKey] = {}
        self.sanitized = False
        self.executed = False

    def __repr__(self) -> str:
        return (f"EnclaveHandle({self.instance_id}, {self.program.op_id}, "
                f"sanitized={self.sanitized})")

    # -- attestation, enclave as attestee --
    def quote(self, nonce: bytes, challenger_pub: bytes) -> Quote:
        if self.sanitized:
            raise ChannelClosed("enclave sanitized")
        session_key = crypto.ExchangeKey.generate(self._rng)
        unsigned = Quote(self.measurement, nonce, session_key.public, challenger_pub,
                         self._platform.host_id, self.instance_id)
        signed = dataclasses.replace(
            unsigned, signature=crypto.sign(self._platform._key, unsigned.body()))
        self._sessions[signed.digest] = (session_key, signed)
        return signed

    def bind(self, quote_digest: bytes, peer: str) -> None:
        """Activate the enclave end of the channel opened by ``quote``."""
        if self.sanitized:
            raise ChannelClosed("enclave sanitized")
        session = self._sessions.pop(quote_digest, None)
        if session is None:
            raise AttestationRequired("no pending session for quote")
        enclave_key, quote = session
        key = derive_session(enclave_key, quote)
        self._channels[peer] = ChannelEnd(key, quote_digest.hex()[:16], self.instance_id,
                                          peer, self._rng, initiator=False)

    def accept(self, peer: str, quote_digest: bytes, wire: bytes) -> str:
        """First sealed frame from a challenger binds its channel, then is delivered."""
        if peer in self._channels:
            return self.deliver(peer, wire)
        if self.sanitized:
            raise ChannelClosed("enclave sanitized")
        session = self._sessions.get(quote_digest)
        if session is None:
            raise AttestationRequired("no pending session for quote")
        enclave_key, quote = session
        end = ChannelEnd(derive_session(enclave_key, quote), quote_digest.hex()[:16],
                         self.instance_id, peer, self._rng, initiator=False)
        plaintext = end.open(wire)
        del self._sessions[quote_digest]
        self._channels[peer] = end
        return self._handle(peer, plaintext)

    # -- attestation, enclave as challenger (broker attesting a CEE) --
    def challenger_key(self, peer: str) -> bytes:
        if peer not in self._exchange:
            self._exchange[peer] = crypto.ExchangeKey.generate(self._rng)
        return self._exchange[peer].public

    def connect_out(self, peer: str, report: AttestationReport | None, quote: Quote,
                    ias_public: bytes, expected_measurement: bytes, nonce: bytes) -> None:
        ex = self._exchange.pop(peer, None)
        if ex is None:
            raise AttestationRequired("no challenge outstanding")
        self._channels[peer] = connect(report, quote, ex, ias_public, expected_measurement,
                                       nonce, self.instance_id, peer, self._rng)

    def has_channel(self, peer: str) -> bool:
        return peer in self._channels

    # -- sealed message entry point --
    def deliver(self, peer: str, wire: bytes) -> str:
        if self.sanitized:
            raise ChannelClosed("enclave sanitized")
        end = self._channels.get(peer)
        if end is None:
            raise AttestationRequired(f"no channel from {peer}")
        return self._handle(peer, end.open(wire))

    def _handle(self, peer: str, plaintext: bytes) -> str:
        msg = codec.decode(plaintext)
        kind = msg.get("type")
        binding = tuple(tuple(b) for b in msg.get("binding", ()))
        if kind == "keys":
            for descriptor, material in msg["keys"]:
                self._keys[descriptor] = SymmetricKey(material, KeyRole.DATA)
            self._bindings[peer] = binding
        elif kind == "ready":
            self._bindings[peer] = binding
        return kind

    def seal_for(self, peer: str, message: dict) -> bytes:
        end = self._channels.get(peer)
        if end is None or self.sanitized:
            raise ChannelClosed(f"no channel to {peer}")
        return end.seal(codec.encode(message))

    def open_bytes(self, peer: str, wire: bytes) -> bytes:
        end = self._channels.get(peer)
        if end is None:
            raise AttestationRequired(f"no channel from {peer}")
        return end.open(wire)

    def open_from(self, peer: str, wire: bytes) -> dict:
        return codec.decode(self.open_bytes(peer, wire))

    # -- broker keystore --
    def export_keys(self, peer: str, descriptors: list[str], binding) -> bytes:
        missing = [d for d in descriptors if d not in self._keys]
        if missing:
            raise MissingKey(", ".join(missing))
        keys = [[d, self._keys[d].material] for d in descriptors]
        return self.seal_for(peer, {"type": "keys", "keys": keys,
                                    "binding": [list(b) for b in binding]})

    # -- contracted computation --
    def binding_of(self, peer: str):
        return self._bindings.get(peer)

    def execute(self, capsules: list[DataCapsule], binding, result_peer: str,
                key_peers: list[str]) -> tuple[bytes, dict[str, bytes]]:
        if self.sanitized:
            raise ChannelClosed("enclave sanitized")
        if self.program.run is None:
            raise TeeError("program has no computation")
        binding = tuple(tuple(b) for b in binding)
        try:
            if self._bindings.get(result_peer) != binding:
                raise BindingMismatch("result recipient did not request this binding")
            for peer in key_peers:
                if not set(self._bindings.get(peer, ())) <= set(binding) or \
                        not self._bindings.get(peer):
                    raise BindingMismatch(f"{peer} provisioned for another transaction")
            for capsule in capsules:
                key = self._keys.get(capsule.descriptor)
                if key is None:
                    raise MissingKey(capsule.descriptor)
                try:
                    self._plaintext.append(crypto.aead_decrypt(
                        key, crypto.Ciphertext.from_bytes(capsule.ciphertext),
                        capsule.associated_data))
                except crypto.AuthFailure:
                    raise DecryptFailure(capsule.descriptor) from None
            supplied = {c.descriptor for c in capsules}
            absent = sorted(d for d in self._keys if d not in supplied)
            if absent:
                raise MissingKey("no capsule for " + ", ".join(absent))
            result = self.program.run(self._plaintext)
            self._pending_kr = self._rng.symmetric_key(KeyRole.RESULT)
            ct = crypto.aead_encrypt(self._pending_kr, result, binding_bytes(binding),
                                     self._rng.nonce(f"result:{self.instance_id}"))
            c_result = ct.to_bytes()
            bundle = ResultBundle(binding, c_result, crypto.hash(c_result),
                                  crypto.hash(self._pending_kr.material))
            slip = KeySlip(binding, self._pending_kr.material)
            bundle_wire = self._channels[result_peer].seal(bundle.to_bytes())
            slips = {p: self._channels[p].seal(slip.to_bytes()) for p in key_peers}
            self.executed = True
            return bundle_wire, slips
        finally:
            self.sanitize()

    def sanitize(self) -> None:
        self._keys.clear()
        self._plaintext.clear()
        self._pending_kr = None
        self._sessions.clear()
        self._channels.clear()
        self._exchange.clear()
        self.sanitized = True

    def inspect(self) -> dict:
        """Test and checker accessor; not an enclave entry point."""
        return {"keys": {d: k.material for d, k in self._keys.items()},
                "plaintext": list(self._plaintext),
                "pending_kr": self._pending_kr.material if self._pending_kr else None,
                "channels": sorted(self._channels),
                "sanitized": self.sanitized}


def load_enclave(host_id: str, program: EnclaveProgram, platform: Platform,
                 rng: crypto.SeededRng, instance_id: str | None = None) -> EnclaveHandle:
    if instance_id is None:
        instance_id = f"{host_id}/enclave-{rng.bytes(4).hex()}"
    return EnclaveHandle(host_id, program, platform, rng, instance_id)


def attest(handle: EnclaveHandle, ias: MockIAS, nonce: bytes, challenger_pub: bytes,
           now: int = 0) -> tuple[Quote, AttestationReport]:
    """One attestation round, without timing; the simulator adds latency."""
    quote = handle.quote(nonce, challenger_pub)
    return quote, ias.verify_quote(quote, now)


@dataclass
class Channel:
    """Both ends of an attested channel into an enclave."""
    peer_end: ChannelEnd
    handle: EnclaveHandle
    peer: str


def establish_channel(report: AttestationReport | None, quote: Quote, handle: EnclaveHandle,
                      peer: str, exchange_key: crypto.ExchangeKey, ias_public: bytes,
                      expected_measurement: bytes, nonce: bytes,
                      rng: crypto.SeededRng) -> Channel:
    end = connect(report, quote, exchange_key, ias_public, expected_measurement, nonce,
                  peer, handle.instance_id, rng)
    handle.bind(quote.digest, peer)
    return Channel(end, handle, peer)


def provision_key(channel: Channel, k_data: SymmetricKey, descriptor: str,
                  binding=()) -> None:
    if channel.handle.sanitized:
        raise ChannelClosed("enclave sanitized")
    wire = channel.peer_end.seal(codec.encode(
        {"type": "keys", "keys": [[descriptor, k_data.material]],
         "binding": [list(b) for b in binding]}))
    channel.handle.deliver(channel.peer, wire)
