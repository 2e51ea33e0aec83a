"""Protocol parties as event handlers.

Each actor owns one network host and reacts to deliveries and ledger
finalizations. Steps of the off-chain execution flow are logged with labels
``1:`` .. ``10:``:

1 request, 2 load enclave, 3 attest CEE, 4 provision data keys, 5 compute,
6 emit bundle and key slips, 7 consumer commits Hash(K_result),
8 broker releases K_result, 9 contract settles, 10 consumer decrypts.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

from . import codec, crypto, tee, workload
from .contracts import RecordStatus
from .crypto import KeyRole
from .ledger import ContractRevert, SignedTransaction, Wallet

log = logging.getLogger(__name__)

LEDGER_HOST = "ledger-0"
_DISCARD_ERRORS = (ValueError, KeyError, TypeError, IndexError, crypto.CryptoError,
                   tee.TeeError, UnicodeDecodeError, ContractRevert, struct.error)


_SEALED = b"\x00"


def _envelope(f: bytes | None = None, **fields) -> bytes:
    """Cleartext header fields, optionally followed by one sealed frame ``f``."""
    header = codec.encode(fields)
    if f is None:
        return header
    return _SEALED + struct.pack(">I", len(header)) + header + f


def _unpack(raw: bytes) -> dict:
    if raw[:1] != _SEALED:
        return codec.decode(raw)
    (n,) = struct.unpack(">I", raw[1:5])
    body = codec.decode(raw[5:5 + n])
    body["f"] = raw[5 + n:]
    return body


class Actor:
    role = ""

    def __init__(self, world, name: str, host: str):
        self.world = world
        self.name = name
        self.host = host
        self.cursor: dict[str, int] = {}
        world.network.register(host, self._on_message)

    @property
    def now(self) -> int:
        return self.world.scheduler.now

    def log(self, step: str, detail=None) -> None:
        self.world.transcript.log(self.now, self.name, step, detail)

    def advance_cursor(self, flow: str, step: int) -> None:
        if step < self.cursor.get(flow, 0):
            raise AssertionError(f"{self.name}: step {step} after {self.cursor[flow]}")
        self.cursor[flow] = step

    def send(self, dst: str, kind: str, payload: bytes, confidential: bool = False):
        return self.world.network.send(self.host, dst, kind, payload, confidential)

    def submit(self, tx: SignedTransaction, kind: str = "tx") -> None:
        self.send(LEDGER_HOST, kind, tx.to_bytes())

    def wake(self, delay: int, fn, *args) -> None:
        def guarded():
            if not self.world.network.halted(self.host):
                fn(*args)
        self.world.scheduler.after(max(0, delay), "actor-wakeup", guarded)

    def _on_message(self, msg) -> None:
        handler = getattr(self, "on_" + msg.kind.replace("-", "_"), None)
        if handler is None:
            self.log("discard", {"kind": msg.kind, "reason": "unexpected"})
            return
        try:
            handler(msg, _unpack(msg.delivered))
        except _DISCARD_ERRORS as exc:
            self.log("discard", {"kind": msg.kind, "seq": msg.seq,
                                 "reason": getattr(exc, "code", type(exc).__name__)})

    def on_ledger(self, receipts) -> None:
        pass

    def secrets(self) -> list[bytes]:
        """Byte strings this actor's untrusted application state holds."""
        return []


# -- data plane hosts -------------------------------------------------------------

class Storage(Actor):
    role = "storage"

    def __init__(self, world):
        super().__init__(world, "storage", "storage")
        self.capsules: dict[str, bytes] = {}

    def on_store(self, msg, body) -> None:
        capsule = tee.DataCapsule.from_bytes(body["capsule"])
        self.capsules[capsule.descriptor] = body["capsule"]
        self.log("store", {"descriptor": capsule.descriptor})

    def on_fetch(self, msg, body) -> None:
        found = [self.capsules[d] for d in body["descriptors"] if d in self.capsules]
        self.send(msg.src, "capsules", _envelope(instance=body["instance"], capsules=found))


class LedgerEndpoint(Actor):
    """One of the B ledger nodes accepting broadcasts over secure channels."""
    role = "ledger-node"

    def __init__(self, world, index: int, channel_key: crypto.SymmetricKey):
        super().__init__(world, f"ledger-{index}", f"ledger-{index}")
        self._end = tee.ChannelEnd(channel_key, f"ep{index}", self.name, "db",
                                   world.rng.fork(f"endpoint-{index}"), initiator=False)

    def _on_message(self, msg) -> None:
        try:
            if msg.kind == "complete-tx":
                raw = self._end.open(msg.delivered)
                self.world.network.check_intact(msg)
            elif msg.kind == "tx":
                raw = msg.delivered
            else:
                return
            tx = SignedTransaction.from_bytes(raw)
        except _DISCARD_ERRORS as exc:
            self.log("discard", {"kind": msg.kind, "reason": getattr(exc, "code", str(exc))})
            return
        self.world.submit_tx(tx, via=self.name)


# -- data owner and per-owner agent -------------------------------------------------

class DataOwner(Actor):
    role = "DO"

    def __init__(self, world, index: int, wallet: Wallet):
        super().__init__(world, f"do-{index}", f"owner-{index}")
        self.index = index
        self.wallet = wallet
        self.descriptor = f"do-{index}/adult-{world.config.rows}"
        self.dataset, self.canary = workload.generate_dataset(
            world.rng, world.config.rows)
        self.k_data: crypto.SymmetricKey | None = None
        self.onboard_status = "new"
        self._challenge = None
        self.contract: str | None = None

    @property
    def account(self) -> str:
        return self.wallet.account_id

    def make_capsule(self) -> None:
        """Generate K_data through the agent interface and upload the capsule."""
        self.k_data = self.world.rng.symmetric_key(KeyRole.DATA)
        capsule = tee.seal_capsule(self.world.rng, self.account, self.descriptor,
                                   self.k_data, self.dataset)
        self.send("storage", "store", _envelope(capsule=capsule.to_bytes()))

    def onboard(self, broker_host: str = "db") -> None:
        if self.k_data is None:
            self.make_capsule()
        nonce = self.world.rng.bytes(16)
        exchange = crypto.ExchangeKey.generate(self.world.rng)
        self._challenge = (nonce, exchange, broker_host)
        self.onboard_status = "attesting"
        self.log("stage1:challenge", {"broker": broker_host})
        self.send(broker_host, "challenge", _envelope(nonce=nonce, pub=exchange.public))

    def on_report(self, msg, body) -> None:
        if self._challenge is None or msg.src != self._challenge[2]:
            return
        nonce, exchange, broker_host = self._challenge
        self._challenge = None
        try:
            if body.get("error"):
                raise tee.AttestationError(body["error"])
            quote = tee.Quote.from_bytes(body["quote"])
            report = tee.AttestationReport.from_bytes(body["report"])
            end = tee.connect(report, quote, exchange, self.world.ias.public_key,
                              tee.BROKER_PROGRAM.measurement, nonce, self.host,
                              broker_host, self.world.rng)
        except tee.TeeError as exc:
            self.onboard_status = "aborted"
            self.log("stage1:abort", {"reason": exc.code})
            return
        self.log("stage1:attested", {"report": report.digest, "measurement": report.measurement})
        frame = end.seal(codec.encode({"type": "keys", "binding": [],
                                       "keys": [[self.descriptor, self.k_data.material]]}))
        self.send(broker_host, "provision-key", _envelope(q=quote.digest, f=frame),
                  confidential=True)
        self.onboard_status = "provisioned"
        self.log("stage1:provisioned", {"descriptor": self.descriptor})

    def secrets(self) -> list[bytes]:
        out = [self.dataset]
        if self.k_data is not None:
            out.append(self.k_data.material)
        return out


class IDataAgent(Actor):
    """Per-owner key manager; attests the CEE itself for every request."""
    role = "iDA"

    def __init__(self, world, owner: DataOwner):
        super().__init__(world, f"ida-{owner.index}", f"ida-{owner.index}")
        self.owner = owner
        self.wallet = owner.wallet          # delegated by the owner
        self.k_data = owner.k_data
        self.contract = owner.contract
        self._pending: dict[str, tuple] = {}
        self._channels: dict[str, tee.ChannelEnd] = {}
        self.slips: dict[tuple, bytes] = {}
        self.released: set = set()

    def _my_binding(self, binding) -> tuple | None:
        for cid, idx in binding:
            if cid == self.contract:
                return ((cid, idx),)
        return None

    def on_exec_request(self, msg, body) -> None:
        mine = self._my_binding(body["binding"])
        if mine is None:
            return
        cid, idx = mine[0]
        contract = self.world.ledger.contract(cid)
        rec = contract.record(idx)
        if rec.status is not RecordStatus.WAIT_COMPUTATION or \
                self.owner.descriptor not in rec.data:
            self.log("3:decline", {"record": [cid, idx]})
            return
        nonce = self.world.rng.bytes(16)
        exchange = crypto.ExchangeKey.generate(self.world.rng)
        instance = body["instance"]
        self._pending[instance] = (nonce, exchange, mine, rec.op)
        self.advance_cursor(f"{cid}:{idx}", 3)
        self.send(body["cee"], "challenge", _envelope(instance=instance, nonce=nonce,
                                                       pub=exchange.public))

    def on_report(self, msg, body) -> None:
        instance = body["instance"]
        if instance not in self._pending:
            return
        nonce, exchange, binding, op = self._pending.pop(instance)
        if body.get("error"):
            self.log("3:attest-failed", {"reason": body["error"]})
            return
        quote = tee.Quote.from_bytes(body["quote"])
        report = tee.AttestationReport.from_bytes(body["report"])
        end = tee.connect(report, quote, exchange, self.world.ias.public_key, op, nonce,
                          self.host, instance, self.world.rng)
        self.log("3:attested", {"report": report.digest, "measurement": report.measurement,
                                "instance": instance})
        frame = end.seal(codec.encode({"type": "keys", "binding": [list(b) for b in binding],
                                       "keys": [[self.owner.descriptor, self.k_data.material]]}))
        self._channels[instance] = end
        self.advance_cursor(f"{binding[0][0]}:{binding[0][1]}", 4)
        self.send(msg.src, "provision", _envelope(instance=instance, q=quote.digest, f=frame),
                  confidential=True)
        self.log("4:provision", {"binding": binding})

    def on_keyslip(self, msg, body) -> None:
        slip = tee.KeySlip.from_bytes(self._channels[body["instance"]].open(body["f"]))
        self.world.network.check_intact(msg)
        self.slips[slip.binding] = slip.k_result
        self.log("6:keyslip", {"binding": slip.binding})
        self._maybe_release()

    def on_ledger(self, receipts) -> None:
        self._maybe_release()

    def _maybe_release(self) -> None:
        for binding, kr in self.slips.items():
            mine = self._my_binding(binding)
            if mine is None or mine in self.released:
                continue
            cid, idx = mine[0]
            rec = self.world.ledger.contract(cid).record(idx)
            if rec.status is not RecordStatus.WAIT_COMPLETE:
                continue
            if crypto.hash(kr) != rec.kr_hash:
                self.log("8:refuse", {"record": [cid, idx]})
                self.released.add(mine)
                continue
            self.released.add(mine)
            self.advance_cursor(f"{cid}:{idx}", 8)
            self.submit(self.wallet.tx(cid, "CompleteTransaction", {"idx": idx, "kr": kr}))
            self.log("8:release-key", {"record": [cid, idx]})

    def secrets(self) -> list[bytes]:
        return [self.k_data.material, *self.slips.values()]


# -- broker ------------------------------------------------------------------------

class Broker(Actor):
    role = "DB"

    def __init__(self, world, wallet: Wallet, endpoint_keys: list[crypto.SymmetricKey]):
        super().__init__(world, "db", "db")
        self.wallet = wallet
        cfg = world.config
        self.platform = tee.Platform("db", world.rng)
        world.ias.register_platform(self.platform)
        self.enclave = tee.load_enclave("db", tee.BROKER_PROGRAM, self.platform, world.rng,
                                        "db/broker-enclave")
        from .sim import AttestationPool
        self.pool = AttestationPool(world.scheduler, world.transcript, "db", cfg.workers,
                                    world.ias)
        self._endpoints = [tee.ChannelEnd(k, f"ep{i}", "db", f"ledger-{i}",
                                          world.rng.fork(f"db-endpoint-{i}"))
                           for i, k in enumerate(endpoint_keys)]
        self.contract: str | None = None
        self.behavior = "honest"
        self.quality_check = lambda owner: True
        self.received_keys: list[str] = []
        self._pending: dict[str, tuple] = {}
        self.slips: dict[tuple, bytes] = {}
        self.released: set = set()

    # stage 1: owners attest this broker's enclave
    def on_challenge(self, msg, body) -> None:
        nonce, pub, src = body["nonce"], body["pub"], msg.src

        def done(quote, report, error):
            payload = (_envelope(error=getattr(error, "code", str(error))) if error else
                       _envelope(quote=quote.to_bytes(), report=report.to_bytes()))
            self.send(src, "report", payload)

        self.pool.submit(lambda: self.enclave.quote(nonce, pub), done, label=src)

    def on_provision_key(self, msg, body) -> None:
        self.enclave.accept(msg.src, body["q"], body["f"])
        self.world.network.check_intact(msg)
        self.received_keys.append(msg.src)
        self.log("stage1:key-received", {"from": msg.src})

    # stage 3
    def on_exec_request(self, msg, body) -> None:
        binding = tuple(tuple(b) for b in body["binding"])
        if len(binding) != 1 or binding[0][0] != self.contract:
            self.log("3:decline", {"binding": binding})
            return
        cid, idx = binding[0]
        rec = self.world.ledger.contract(cid).record(idx)
        if rec.status is not RecordStatus.WAIT_COMPUTATION:
            self.log("3:decline", {"binding": binding, "status": rec.status.value})
            return
        instance = body["instance"]
        nonce = self.world.rng.bytes(16)
        pub = self.enclave.challenger_key(instance)
        self._pending[instance] = (nonce, binding, rec.op, list(rec.data))
        self.advance_cursor(f"{cid}:{idx}", 3)
        self.send(body["cee"], "challenge", _envelope(instance=instance, nonce=nonce, pub=pub))

    def on_report(self, msg, body) -> None:
        instance = body.get("instance")
        if instance not in self._pending:
            return
        nonce, binding, op, targets = self._pending.pop(instance)
        if body.get("error"):
            self.log("3:attest-failed", {"reason": body["error"]})
            return
        quote = tee.Quote.from_bytes(body["quote"])
        report = tee.AttestationReport.from_bytes(body["report"])
        self.enclave.connect_out(instance, report, quote, self.world.ias.public_key, op, nonce)
        self.log("3:attested", {"report": report.digest, "measurement": report.measurement,
                                "instance": instance})
        descriptors = [self.world.descriptor_of(owner) for owner in targets]
        frame = self.enclave.export_keys(instance, descriptors, binding)
        self.advance_cursor(f"{binding[0][0]}:{binding[0][1]}", 4)
        self.send(msg.src, "provision", _envelope(instance=instance, q=quote.digest, f=frame),
                  confidential=True)
        self.log("4:provision", {"binding": binding, "keys": len(descriptors)})

    def on_keyslip(self, msg, body) -> None:
        slip = tee.KeySlip.from_bytes(self.enclave.open_bytes(body["instance"], body["f"]))
        self.world.network.check_intact(msg)
        self.slips[slip.binding] = slip.k_result
        self.log("6:keyslip", {"binding": slip.binding})
        (cid, idx), = slip.binding
        if self.behavior == "early-complete":
            self.submit(self.wallet.tx(cid, "CompleteTransaction",
                                       {"idx": idx, "kr": slip.k_result}))
            self.log("attack:early-complete", {"record": [cid, idx]})
        elif self.behavior == "forge-commitment":
            self.submit(self.wallet.tx(cid, "ComputationComplete",
                                       {"idx": idx, "kr_hash": crypto.hash(slip.k_result)}))
            self.log("attack:forge-commitment", {"record": [cid, idx]})
        self._maybe_release()

    def on_ledger(self, receipts) -> None:
        self._maybe_release()

    def _maybe_release(self) -> None:
        for binding, kr in self.slips.items():
            if binding in self.released:
                continue
            (cid, idx), = binding
            rec = self.world.ledger.contract(cid).record(idx)
            if rec.status is not RecordStatus.WAIT_COMPLETE:
                continue
            self.released.add(binding)
            if crypto.hash(kr) != rec.kr_hash:
                self.log("8:refuse", {"record": [cid, idx]})
                continue
            self.db_release_key(cid, idx, kr)

    def db_release_key(self, cid: str, idx: int, kr: bytes) -> None:
        """Broadcast one CompleteTransaction to every ledger endpoint."""
        rec = self.world.ledger.contract(cid).record(idx)
        if crypto.hash(kr) != rec.kr_hash:
            self.log("8:refuse", {"record": [cid, idx]})
            return
        tx = self.wallet.tx(cid, "CompleteTransaction", {"idx": idx, "kr": kr})
        raw = tx.to_bytes()
        for i, end in enumerate(self._endpoints):
            self.send(f"ledger-{i}", "complete-tx", end.seal(raw), confidential=True)
        self.advance_cursor(f"{cid}:{idx}", 8)
        self.log("8:release-key", {"record": [cid, idx], "endpoints": len(self._endpoints)})

    def secrets(self) -> list[bytes]:
        return list(self.slips.values())


# -- contract execution environment -----------------------------------------------------

@dataclass
class _Job:
    handle: tee.EnclaveHandle
    binding: tuple
    providers: list
    descriptors: list
    result_to: str
    fetching: bool = False
    done: bool = False


class ContractExecutionEnvironment(Actor):
    role = "CEE"

    def __init__(self, world):
        super().__init__(world, "cee", "cee")
        self.platform = tee.Platform("cee", world.rng)
        world.ias.register_platform(self.platform)
        from .sim import AttestationPool
        self.pool = AttestationPool(world.scheduler, world.transcript, "cee",
                                    world.config.workers, world.ias)
        self.jobs: dict[str, _Job] = {}
        self.handles: list[tee.EnclaveHandle] = []
        self.execute_attempts: list[tee.EnclaveHandle] = []

    def on_load(self, msg, body) -> None:
        program = tee.program_for_measurement(body["op"])
        if program is None or program.run is None:
            self.log("2:unknown-program", {"op": body["op"]})
            return
        instance = f"cee/enclave-{len(self.handles)}"
        handle = tee.load_enclave("cee", program, self.platform, self.world.rng, instance)
        self.handles.append(handle)
        self.jobs[instance] = _Job(handle, tuple(tuple(b) for b in body["binding"]),
                                   list(body["providers"]), list(body["descriptors"]),
                                   msg.src)
        self.log("2:load", {"instance": instance, "measurement": handle.measurement})
        self.send(msg.src, "loaded", _envelope(instance=instance, measurement=handle.measurement))

    def on_challenge(self, msg, body) -> None:
        job = self.jobs[body["instance"]]
        nonce, pub, src, instance = body["nonce"], body["pub"], msg.src, body["instance"]

        def done(quote, report, error):
            payload = (_envelope(instance=instance, error=getattr(error, "code", str(error)))
                       if error else
                       _envelope(instance=instance, quote=quote.to_bytes(),
                                 report=report.to_bytes()))
            self.send(src, "report", payload)

        self.pool.submit(lambda: job.handle.quote(nonce, pub), done, label=src)

    def _accept(self, msg, body) -> None:
        job = self.jobs[body["instance"]]
        job.handle.accept(msg.src, body["q"], body["f"])
        self.world.network.check_intact(msg)
        self._maybe_fetch(job)

    on_ready = _accept
    on_provision = _accept

    def _maybe_fetch(self, job: _Job) -> None:
        h = job.handle
        if job.fetching or job.done or h.sanitized:
            return
        if h.binding_of(job.result_to) is None:
            return
        if any(h.binding_of(p) is None for p in job.providers):
            return
        job.fetching = True
        self.send("storage", "fetch", _envelope(instance=h.instance_id,
                                                descriptors=job.descriptors))

    def on_capsules(self, msg, body) -> None:
        job = self.jobs[body["instance"]]
        if job.done:
            return
        job.done = True
        capsules = [tee.DataCapsule.from_bytes(c) for c in body["capsules"]]
        self.execute_attempts.append(job.handle)
        try:
            bundle, slips = job.handle.execute(capsules, job.binding, job.result_to,
                                               job.providers)
        except tee.TeeError as exc:
            self.log("5:error", {"instance": job.handle.instance_id, "reason": exc.code})
            self.log("6:sanitized", {"instance": job.handle.instance_id})
            return
        self.log("5:compute", {"instance": job.handle.instance_id, "inputs": len(capsules)})
        self.send(job.result_to, "bundle",
                  _envelope(instance=job.handle.instance_id, f=bundle), confidential=True)
        for peer, frame in slips.items():
            self.send(peer, "keyslip", _envelope(instance=job.handle.instance_id, f=frame),
                      confidential=True)
        self.log("6:emit", {"instance": job.handle.instance_id, "slips": sorted(slips)})
        self.log("6:sanitized", {"instance": job.handle.instance_id})


# -- consumer ----------------------------------------------------------------------------

@dataclass
class Flow:
    requests: list                      # (contract id, data, deposit)
    op: bytes
    providers: list
    descriptors: list
    request_txs: dict = field(default_factory=dict)   # tx id -> contract id
    records: dict = field(default_factory=dict)       # contract id -> idx
    rejected: bool = False
    binding: tuple = ()
    instance: str | None = None
    challenge: tuple | None = None
    channel: tee.ChannelEnd | None = None
    bundle: tee.ResultBundle | None = None
    result: bytes | None = None
    canceled: bool = False
    committed: bool = False
    started_at: int | None = None
    decrypted_at: int | None = None


class DataConsumer(Actor):
    role = "DC"

    def __init__(self, world, wallet: Wallet):
        super().__init__(world, "dc", "dc")
        self.wallet = wallet
        self.flows: list[Flow] = []
        self.auto_cancel = True
        self.rejected_bundles: list[str] = []

    @property
    def account(self) -> str:
        return self.wallet.account_id

    def start(self, flow: Flow) -> Flow:
        self.flows.append(flow)
        flow.started_at = self.now
        for cid, data, deposit in flow.requests:
            tx = self.wallet.tx(cid, "Request", {"op": flow.op, "data": list(data)},
                                value=deposit)
            flow.request_txs[tx.tx_id] = cid
            self.submit(tx)
        self.log("1:request", {"contracts": [r[0] for r in flow.requests]})
        return flow

    def _flow_for_instance(self, instance: str) -> Flow:
        for f in self.flows:
            if f.instance == instance:
                return f
        raise KeyError(instance)

    def on_ledger(self, receipts) -> None:
        for r in receipts:
            for flow in self.flows:
                cid = flow.request_txs.get(r.tx_id)
                if cid is None:
                    continue
                if r.status == "ok" and r.result and "idx" in r.result:
                    flow.records[cid] = r.result["idx"]
                else:
                    flow.rejected = True
                    self.log("1:rejected", {"contract": cid})
                if not flow.rejected and len(flow.records) == len(flow.requests):
                    self._requests_accepted(flow)
        for flow in self.flows:
            if flow.bundle is not None and flow.result is None:
                self._try_decrypt(flow)

    def _requests_accepted(self, flow: Flow) -> None:
        flow.binding = tuple((cid, flow.records[cid]) for cid, _, _ in flow.requests)
        key = ",".join(f"{c}:{i}" for c, i in flow.binding)
        self.advance_cursor(key, 2)
        ledger = self.world.ledger
        deadline = max(ledger.contract(c).record(i).req_time + ledger.contract(c).timeout_ms
                       for c, i in flow.binding)
        if self.auto_cancel:
            self.wake(deadline + 1 - self.now, self.cancel_expired, flow)
        self.send("cee", "load", _envelope(op=flow.op, binding=[list(b) for b in flow.binding],
                                           providers=flow.providers,
                                           descriptors=flow.descriptors))
        self.log("2:instruct-load", {"binding": flow.binding})

    def on_loaded(self, msg, body) -> None:
        flow = next((f for f in self.flows if f.binding and f.instance is None), None)
        if flow is None:
            return
        if body["measurement"] != flow.op:
            self.log("2:wrong-program", {"measurement": body["measurement"]})
            return
        flow.instance = body["instance"]
        nonce = self.world.rng.bytes(16)
        exchange = crypto.ExchangeKey.generate(self.world.rng)
        flow.challenge = (nonce, exchange)
        self.send(msg.src, "challenge", _envelope(instance=flow.instance, nonce=nonce,
                                                   pub=exchange.public))
        for provider in flow.providers:
            self.send(provider, "exec-request",
                      _envelope(binding=[list(b) for b in flow.binding],
                                instance=flow.instance, cee=msg.src))
        self.log("3:challenge", {"instance": flow.instance})

    def on_report(self, msg, body) -> None:
        flow = self._flow_for_instance(body["instance"])
        if flow.challenge is None:
            return
        nonce, exchange = flow.challenge
        flow.challenge = None
        if body.get("error"):
            self.log("3:attest-failed", {"reason": body["error"]})
            return
        quote = tee.Quote.from_bytes(body["quote"])
        report = tee.AttestationReport.from_bytes(body["report"])
        try:
            flow.channel = tee.connect(report, quote, exchange, self.world.ias.public_key,
                                       flow.op, nonce, self.host, flow.instance,
                                       self.world.rng)
        except tee.TeeError as exc:
            self.log("3:attest-failed", {"reason": exc.code})
            return
        self.log("3:attested", {"report": report.digest, "measurement": report.measurement,
                                "instance": flow.instance})
        frame = flow.channel.seal(codec.encode({"type": "ready",
                                                "binding": [list(b) for b in flow.binding]}))
        self.send(msg.src, "ready", _envelope(instance=flow.instance, q=quote.digest, f=frame),
                  confidential=True)

    def on_bundle(self, msg, body) -> None:
        flow = self._flow_for_instance(body["instance"])
        try:
            plaintext = flow.channel.open(body["f"])
        except crypto.AuthFailure:
            self.rejected_bundles.append("auth-failure")
            self.log("7:reject", {"reason": "auth-failure"})
            return
        self.world.network.check_intact(msg)
        self.dc_verify_and_commit(flow, tee.ResultBundle.from_bytes(plaintext))

    def dc_verify_and_commit(self, flow: Flow, bundle: tee.ResultBundle) -> bool:
        """Check the bundle, then commit Hash(K_result) on every bound record."""
        if flow.committed:
            self.rejected_bundles.append("duplicate")
            return False
        if bundle.binding != flow.binding:
            self.rejected_bundles.append("binding")
            self.log("7:reject", {"reason": "binding"})
            return False
        if crypto.hash(bundle.c_result) != bundle.c_result_hash:
            self.rejected_bundles.append("integrity-mismatch")
            self.log("7:reject", {"reason": "integrity-mismatch"})
            return False
        flow.bundle = bundle
        flow.committed = True
        for cid, idx in flow.binding:
            self.submit(self.wallet.tx(cid, "ComputationComplete",
                                       {"idx": idx, "kr_hash": bundle.kr_hash}))
        self.advance_cursor(",".join(f"{c}:{i}" for c, i in flow.binding), 7)
        self.log("7:commit", {"binding": flow.binding, "kr_hash": bundle.kr_hash})
        return True

    def _try_decrypt(self, flow: Flow) -> None:
        for cid, idx in flow.binding:
            rec = self.world.ledger.contract(cid).record(idx)
            if rec.status is not RecordStatus.COMPLETE or rec.kr is None:
                continue
            if crypto.hash(rec.kr) != flow.bundle.kr_hash:
                self.log("10:key-mismatch", {"record": [cid, idx]})
                continue
            flow.result = tee.decrypt_result(rec.kr, flow.bundle)
            flow.decrypted_at = self.now
            self.advance_cursor(",".join(f"{c}:{i}" for c, i in flow.binding), 10)
            self.log("10:decrypt", {"binding": flow.binding})
            return

    def cancel_expired(self, flow: Flow) -> None:
        if flow.result is not None:
            return
        for cid, idx in flow.binding:
            rec = self.world.ledger.contract(cid).record(idx)
            if not rec.status.terminal:
                self.submit(self.wallet.tx(cid, "Cancel", {"idx": idx}))
                flow.canceled = True
                self.log("cancel", {"record": [cid, idx]})

    def secrets(self) -> list[bytes]:
        out = []
        for f in self.flows:
            if f.bundle is not None:
                out.append(f.bundle.c_result)
            if f.result is not None:
                out.append(f.result)
        return out
