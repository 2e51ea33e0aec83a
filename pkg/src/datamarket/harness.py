"""Runs the marketplace end to end and judges the outcome.

A :class:`World` wires actors, ledger, attestation service and network onto
one scheduler. :func:`run` drives setup (key onboarding, contract
publication) honestly, then arms the adversary and executes one data
transaction. :func:`check_invariants` evaluates the final state.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

from . import crypto, tee, workload
from .actors import (Broker, ContractExecutionEnvironment, DataConsumer, DataOwner, Flow,
                     IDataAgent, LedgerEndpoint, Storage)
from .config import ScenarioConfig
from .contracts import (CREATE, Policy, RecordStatus, db_contract_args, do_contract_args,
                        new_ledger)
from .crypto import KeyRole
from .ledger import LedgerError, Wallet
from .sim import (AdversaryPolicy, Network, Rule, Scheduler, Transcript, random_policy)

log = logging.getLogger(__name__)

FLOW_FUNCTIONS = ("Request", "ComputationComplete", "CompleteTransaction")


class World:
    def __init__(self, config: ScenarioConfig):
        cfg = self.config = config
        self.rng = crypto.SeededRng(cfg.seed)
        self.scheduler = Scheduler()
        self.transcript = Transcript()
        self.network = Network(self.scheduler, self.transcript, self.rng.fork("network"),
                               cfg.latency_ms)
        self.ledger = new_ledger(finalization_delay_ms=cfg.finalization_delay_ms,
                                 congestion_penalty_ms=cfg.congestion_penalty_ms,
                                 listener=self._on_receipt)
        self.ias = tee.MockIAS(self.rng.fork("ias"), cfg.sigrl_latency_ms,
                               cfg.report_latency_ms)
        self.op = tee.STATS_PROGRAM.measurement
        self.submitted: list[bytes] = []
        self._statuses: dict[tuple, str] = {}
        self.actors = []
        self.owners: list[DataOwner] = []
        self.agents: list[IDataAgent] = []
        self.broker: Broker | None = None
        self.dc: DataConsumer | None = None
        self.cee: ContractExecutionEnvironment | None = None
        self.flow: Flow | None = None
        if cfg.owners == 0:
            return      # empty scenario: nothing is created, nothing is logged

        owner_wallets = [self._mint(f"do-{i}") for i in range(cfg.owners)]
        dc_wallet = self._mint("dc")
        db_wallet = self._mint("db") if cfg.paradigm == "db" else None

        self.storage = Storage(self)
        endpoint_keys = [self.rng.symmetric_key(KeyRole.CHANNEL) for _ in range(cfg.endpoints)]
        self.endpoints = [LedgerEndpoint(self, i, k) for i, k in enumerate(endpoint_keys)]
        self.owners = [DataOwner(self, i, w) for i, w in enumerate(owner_wallets)]
        if db_wallet is not None:
            self.broker = Broker(self, db_wallet, endpoint_keys)
            rejected = {self.owners[i].account for i in cfg.rejected_owners}
            self.broker.quality_check = lambda owner: owner not in rejected
        self.cee = ContractExecutionEnvironment(self)
        self.dc = DataConsumer(self, dc_wallet)
        self.dc.auto_cancel = cfg.dc_auto_cancel
        self.actors = [self.storage, *self.endpoints, *self.owners]
        if self.broker is not None:
            self.actors.append(self.broker)
        self.actors += [self.cee, self.dc]

    # -- plumbing ----------------------------------------------------------------
    def _mint(self, name: str) -> Wallet:
        key = crypto.SigningKey.generate(self.rng)
        account = f"acct-{name}"
        self.ledger.create_account(account, self.config.genesis_balance, key.public)
        self.transcript.log(0, "ledger", f"genesis:{account}:{self.config.genesis_balance}")
        return Wallet(account, key)

    def descriptor_of(self, owner_account: str) -> str:
        for o in self.owners:
            if o.account == owner_account:
                return o.descriptor
        raise KeyError(owner_account)

    def owner_by_account(self, account: str) -> DataOwner:
        return next(o for o in self.owners if o.account == account)

    def submit_tx(self, tx, via: str) -> bool:
        self._sync()
        now = self.scheduler.now
        try:
            self.ledger.submit_tx(tx)
        except LedgerError as exc:
            self.transcript.log(now, via, f"reject:{exc.code}:{tx.function}", {"tx": tx.tx_id})
            return False
        self.submitted.append(tx.to_bytes())
        self.transcript.log(now, via, f"submit:{tx.function}:{tx.sender}", {"tx": tx.tx_id})
        self.scheduler.at(self.ledger.ready_at(tx.tx_id), "ledger-advance", self._sync)
        return True

    def _sync(self) -> None:
        receipts = self.ledger.advance_to(self.scheduler.now)
        if not receipts:
            return
        for actor in self.actors:
            if not self.network.halted(actor.host):
                actor.on_ledger(receipts)

    def _on_receipt(self, r) -> None:
        t = r.finalized_at
        self.transcript.log(t, "ledger", f"finalize:{r.function}:{r.status}:{r.sender}:{r.target}",
                            {"tx": r.tx_id, "reason": r.reason, "result": r.result})
        for src, dst, amount in r.transfers:
            self.transcript.log(t, "ledger", f"transfer:{src}>{dst}:{amount}")
        cid = r.result.get("contract") if isinstance(r.result, dict) else None
        for target in (r.target, cid):
            contract = self.ledger.contracts().get(target)
            if contract is None:
                continue
            for rec in contract.records:
                key = (target, rec.idx)
                if self._statuses.get(key) != rec.status.value:
                    self._statuses[key] = rec.status.value
                    self.transcript.log(t, "ledger", f"record:{target}:{rec.idx}:{rec.status.value}")

    def settle(self) -> None:
        self.scheduler.run()

    def receipt(self, tx_id: str):
        return next((r for r in self.ledger.finalized if r.tx_id == tx_id), None)

    def _create(self, actor, args: dict) -> str | None:
        tx = actor.wallet.tx(CREATE, "create", args)
        actor.submit(tx)
        self.settle()
        r = self.receipt(tx.tx_id)
        return r.result["contract"] if r is not None and r.status == "ok" else None

    # -- stages ------------------------------------------------------------------
    def stage1_onboard(self) -> None:
        """Owners create K_data, upload capsules and (DB paradigm) provision keys."""
        for owner in self.owners:
            owner.make_capsule()
        if self.config.paradigm == "db":
            for owner in self.owners:
                owner.onboard(self.broker.host)
        else:
            for owner in self.owners:
                agent = IDataAgent(self, owner)
                self.agents.append(agent)
                self.actors.insert(self.actors.index(self.cee), agent)
        self.settle()

    def stage2_publish(self) -> None:
        cfg = self.config
        if cfg.paradigm == "ida":
            for owner, agent in zip(self.owners, self.agents):
                policy = Policy(frozenset([owner.descriptor]), cfg.price, self.op,
                                frozenset([self.dc.account]), cfg.timeout_ms)
                owner.contract = agent.contract = self._create(owner, do_contract_args(policy))
            return
        self.broker.contract = self._create(self.broker,
                                            db_contract_args([self.op], cfg.timeout_ms))
        for owner in self.owners:
            if owner.onboard_status == "provisioned":
                owner.submit(owner.wallet.tx(self.broker.contract, "Register",
                                             {"op": self.op, "dc": self.dc.account,
                                              "price": cfg.price}))
        self.settle()
        accepted = [o.account for o in self.owners
                    if o.onboard_status == "provisioned" and self.broker.quality_check(o.account)]
        self.broker.submit(self.broker.wallet.tx(self.broker.contract, "Confirm",
                                                 {"owners": accepted}))
        self.settle()

    def setup(self) -> None:
        self.stage1_onboard()
        self.stage2_publish()

    def stage3_execute_transaction(self, targets: list | None = None,
                                   deposit: int | None = None,
                                   op: bytes | None = None) -> Flow:
        cfg = self.config
        op = self.op if op is None else op
        if cfg.paradigm == "db":
            contract = self.ledger.contract(self.broker.contract)
            data = list(contract.owners(self.op) if targets is None else targets)
            if deposit is None:
                deposit = contract.price(self.op) if cfg.deposit is None else cfg.deposit
            requests = [(self.broker.contract, data, deposit)]
            providers = [self.broker.host]
            descriptors = [self.descriptor_of(o) for o in data]
        else:
            chosen = self.owners if targets is None else [self.owner_by_account(a)
                                                          for a in targets]
            each = cfg.price if deposit is None else deposit
            requests = [(o.contract, [o.descriptor], each) for o in chosen]
            providers = [a.host for a in self.agents if a.owner in chosen]
            descriptors = [o.descriptor for o in chosen]
        self.network.activate(cfg.adversary)
        if self.broker is not None:
            self.broker.behavior = cfg.adversary.db_behavior
        self.flow = self.dc.start(Flow(requests, op, providers, descriptors))
        self.settle()
        return self.flow

    def finish(self) -> None:
        now = self.scheduler.now
        if self.flow is not None:
            self.transcript.log(now, "harness", f"outcome:{outcome_of(self).kind}")
            for cid, idx in self.flow.binding:
                status = self.ledger.contract(cid).record(idx).status.value
                self.transcript.log(now, "harness", f"final:record:{cid}:{idx}:{status}")


# -- outcomes ----------------------------------------------------------------------

@dataclass
class Outcome:
    kind: str           # completed | canceled | stuck | rejected | empty
    result: bytes | None = None


def outcome_of(world: World) -> Outcome:
    flow = world.flow
    if flow is None:
        return Outcome("empty")
    if flow.result is not None:
        return Outcome("completed", flow.result)
    if flow.rejected:
        return Outcome("rejected")
    statuses = [world.ledger.contract(c).record(i).status for c, i in flow.binding]
    if statuses and all(s is RecordStatus.CANCELED for s in statuses):
        return Outcome("canceled")
    return Outcome("stuck")


def oracle_result(world: World, flow: Flow | None = None) -> dict:
    """Statistics computed outside any enclave, straight from owner datasets."""
    flow = flow or world.flow
    tables = [o.dataset for o in world.owners if o.descriptor in flow.descriptors]
    return workload.column_stats(tables)


# -- final state and invariants ------------------------------------------------------

@dataclass
class FinalState:
    """Plain-data view of a finished run; the checker reads only this and the transcript."""
    genesis: dict
    balances: dict
    escrow: dict
    receipts: list
    records: dict
    flows: list
    owners: list
    dc_account: str
    payloads: list
    holdings: dict
    enclaves: list
    op: bytes


def snapshot(world: World) -> FinalState:
    ledger = world.ledger
    records = {}
    for cid, contract in ledger.contracts().items():
        for rec in contract.records:
            records[(cid, rec.idx)] = {"status": rec.status.value, "kr": rec.kr,
                                       "kr_hash": rec.kr_hash, "dc": rec.dc,
                                       "payees": [tuple(p) for p in rec.payees],
                                       "escrow": rec.escrow, "op": rec.op,
                                       "owner": getattr(contract, "creator", None),
                                       "kind": contract.kind}
    receipts = [{"seq": r.seq, "function": r.function, "status": r.status,
                 "sender": r.sender, "target": r.target, "finalized_at": r.finalized_at,
                 "transfers": list(r.transfers), "result": copy.deepcopy(r.result)}
                for r in ledger.finalized]
    flows = []
    if world.flow is not None:
        f = world.flow
        flows.append({"binding": f.binding, "bundle": f.bundle, "result": f.result,
                      "rejected": f.rejected,
                      "expected": workload.encode_result(oracle_result(world, f))})
    owners = [{"account": o.account, "name": o.name, "canary": o.canary,
               "k_data": o.k_data.material if o.k_data else None} for o in world.owners]
    holdings = {a.name: a.secrets() for a in world.actors if a.secrets()}
    enclaves = [{"instance": h.instance_id, "attempted": h in world.cee.execute_attempts,
                 "measurement": h.measurement, **h.inspect()}
                for h in (world.cee.handles if world.cee else [])]
    return FinalState(dict(ledger.genesis), {a: ledger.balance(a) for a in ledger.accounts()},
                      {c: ledger.escrow(c) for c in ledger.contracts()}, receipts, records,
                      flows, owners, world.dc.account if world.dc else "",
                      world.network.visible_payloads() + list(world.submitted), holdings,
                      enclaves, world.op)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""
    slice: list = field(default_factory=list)


@dataclass
class Verdict:
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.ok]

    def get(self, name: str) -> Check:
        return next(c for c in self.checks if c.name == name)

    def text(self) -> str:
        lines = []
        for c in self.checks:
            line = f"{'PASS' if c.ok else 'FAIL'} {c.name}"
            if c.detail:
                line += f": {c.detail}"
            lines.append(line)
            lines.extend("    " + s for s in c.slice)
        return "\n".join(lines) + "\n"


def _slice(transcript_text: str, needle: str, limit: int = 20) -> list[str]:
    hits = [ln for ln in transcript_text.splitlines() if needle in ln]
    return hits[-limit:]


def _complete_receipt(state: FinalState, cid: str, idx: int):
    for r in state.receipts:
        if (r["target"] == cid and r["function"] == "CompleteTransaction"
                and r["status"] == "ok" and (r["result"] or {}).get("idx") == idx
                and r["result"].get("matched")):
            return r
    return None


def check_atomicity(state: FinalState) -> tuple[bool, str, str]:
    for flow in state.flows:
        for cid, idx in flow["binding"]:
            rec = state.records[(cid, idx)]
            paid = _complete_receipt(state, cid, idx)
            if flow["result"] is not None:
                if rec["status"] != "COMPLETE" or paid is None:
                    return False, f"result without payment on {cid}:{idx}", cid
                for owner, price in _expected_payees(rec):
                    if (cid, owner, price) not in paid["transfers"]:
                        return False, f"{owner} unpaid on {cid}:{idx}", cid
            if rec["status"] == "COMPLETE":
                bundle = flow["bundle"]
                if bundle is None or rec["kr"] is None:
                    return False, f"payment on {cid}:{idx} with no verified bundle", cid
                if crypto.hash(rec["kr"]) != bundle.kr_hash or \
                        crypto.hash(bundle.c_result) != bundle.c_result_hash:
                    return False, f"on-chain key of {cid}:{idx} does not match bundle", cid
                try:
                    tee.decrypt_result(rec["kr"], bundle)
                except crypto.AuthFailure:
                    return False, f"on-chain key of {cid}:{idx} fails to decrypt", cid
                if flow["result"] is None:
                    return False, f"{cid}:{idx} paid but consumer holds no result", cid
        if flow["result"] is not None and flow["result"] != flow["expected"]:
            return False, "decrypted result differs from plaintext oracle", "10:decrypt"
    # any escrow release to a non-consumer must come from a key-matched completion
    for r in state.receipts:
        for src, dst, amount in r["transfers"]:
            if src not in state.escrow or dst == state.dc_account or \
                    any(dst == rec["dc"] for rec in state.records.values()):
                continue
            idx = (r["result"] or {}).get("idx") if isinstance(r["result"], dict) else None
            rec = state.records.get((src, idx))
            if r["function"] != "CompleteTransaction" or rec is None or \
                    rec["status"] != "COMPLETE" or rec["kr"] is None or \
                    crypto.hash(rec["kr"]) != rec["kr_hash"]:
                return False, f"payment {src}>{dst}:{amount} without matching key", src
    return True, "", ""


def _expected_payees(rec: dict) -> list:
    if rec["kind"] == "db":
        return rec["payees"]
    return []   # owner contracts pay the whole escrow to their creator


def check_conservation(state: FinalState) -> tuple[bool, str, str]:
    replay = dict(state.genesis)
    for c in state.escrow:
        replay.setdefault(c, 0)
    for r in state.receipts:
        for src, dst, amount in r["transfers"]:
            if amount <= 0:
                return False, f"non-positive transfer {src}>{dst}", src
            replay[src] = replay.get(src, 0) - amount
            replay[dst] = replay.get(dst, 0) + amount
    final = {**state.balances, **state.escrow}
    if sum(state.genesis.values()) != sum(final.values()):
        return False, "total supply changed", "transfer"
    for k, v in sorted(replay.items()):
        if v < 0 or final.get(k) != v:
            return False, f"{k}: replayed {v}, final {final.get(k)}", k
    for cid, amount in state.escrow.items():
        held = sum(r["escrow"] for (c, _), r in state.records.items()
                   if c == cid and r["status"] in ("WAIT_COMPUTATION", "WAIT_COMPLETE"))
        if held != amount:
            return False, f"{cid} escrow {amount} but open records hold {held}", cid
    return True, "", ""


def _needles(secret: bytes) -> tuple[bytes, bytes]:
    return secret, secret.hex().encode()


def _leaks(secret: bytes, blobs) -> bool:
    raw, hexed = _needles(secret)
    return any(raw in b or hexed in b for b in blobs)


def check_key_confinement(state: FinalState) -> tuple[bool, str, str]:
    for o in state.owners:
        k = o["k_data"]
        if k is None:
            continue
        if _leaks(k, state.payloads):
            return False, f"K_data of {o['name']} visible on the wire or ledger", "send:"
        allowed = {o["name"], o["name"].replace("do-", "ida-")}
        for holder, blobs in sorted(state.holdings.items()):
            if holder not in allowed and _leaks(k, blobs):
                return False, f"K_data of {o['name']} held by {holder}", holder
    return True, "", ""


def check_plaintext_confinement(state: FinalState) -> tuple[bool, str, str]:
    for o in state.owners:
        if _leaks(o["canary"], state.payloads):
            return False, f"dataset of {o['name']} visible on the wire or ledger", "send:"
        for holder, blobs in sorted(state.holdings.items()):
            if holder != o["name"] and _leaks(o["canary"], blobs):
                return False, f"dataset of {o['name']} held by {holder}", holder
    for flow in state.flows:
        result = flow["result"]
        if result is None:
            continue
        if any(result in b for b in state.payloads):
            return False, "plaintext result visible on the wire", "send:bundle"
        for holder, blobs in sorted(state.holdings.items()):
            if holder != "dc" and any(result in b for b in blobs):
                return False, f"plaintext result held by {holder}", holder
    return True, "", ""


def check_sanitization(state: FinalState) -> tuple[bool, str, str]:
    for e in state.enclaves:
        if not e["attempted"]:
            continue
        if not e["sanitized"] or e["keys"] or e["plaintext"] or e["pending_kr"] or e["channels"]:
            return False, f"{e['instance']} retains state after execution", e["instance"]
    return True, "", ""


def check_step_ordering(state: FinalState) -> tuple[bool, str, str]:
    for (cid, idx), rec in sorted(state.records.items()):
        if rec["status"] != "COMPLETE":
            continue
        commit = next((i for i, r in enumerate(state.receipts)
                       if r["target"] == cid and r["function"] == "ComputationComplete"
                       and r["status"] == "ok" and (r["result"] or {}).get("idx") == idx
                       and r["sender"] == rec["dc"]), None)
        release = next((i for i, r in enumerate(state.receipts)
                        if r["target"] == cid and r["function"] == "CompleteTransaction"
                        and r["status"] == "ok" and (r["result"] or {}).get("idx") == idx
                        and (r["result"] or {}).get("matched")), None)
        if commit is None or release is None or not commit < release:
            return False, f"{cid}:{idx} completed without a prior consumer commitment", cid
        if state.receipts[commit]["finalized_at"] > state.receipts[release]["finalized_at"]:
            return False, f"{cid}:{idx} commitment finalized after release", cid
    return True, "", ""


def check_refund_safety(state: FinalState) -> tuple[bool, str, str]:
    for flow in state.flows:
        if flow["result"] is not None:
            continue
        statuses = [state.records[b]["status"] for b in flow["binding"]]
        if "COMPLETE" in statuses:
            return False, "completed record but no result", "record:"
        if flow["rejected"] or (statuses and all(s == "CANCELED" for s in statuses)):
            parties = [state.dc_account] + [o["account"] for o in state.owners]
            for acct in parties:
                delta = state.balances[acct] - state.genesis[acct]
                if delta:
                    return False, f"{acct} net {delta} after abort", acct
        else:
            # stuck: funds must still be escrowed and reclaimable by Cancel
            for b in flow["binding"]:
                rec = state.records[b]
                if rec["status"] == "CANCELED" or rec["escrow"] <= 0 and rec["payees"]:
                    return False, f"{b[0]}:{b[1]} not recoverable", b[0]
    return True, "", ""


def check_settlement(state: FinalState) -> tuple[bool, str, str]:
    """A completed flow moves exactly the registered prices and nothing else."""
    for flow in state.flows:
        if flow["result"] is None:
            continue
        expected: dict[str, int] = {}
        for b in flow["binding"]:
            rec = state.records[b]
            paid = _complete_receipt(state, *b)
            if rec["kind"] == "db":
                for owner, price in rec["payees"]:
                    expected[owner] = expected.get(owner, 0) + price
            else:
                amount = sum(a for s, d, a in paid["transfers"] if d == rec["owner"])
                expected[rec["owner"]] = expected.get(rec["owner"], 0) + amount
        spent = sum(expected.values())
        expected[state.dc_account] = -spent
        for acct, want in sorted(expected.items()):
            got = state.balances[acct] - state.genesis[acct]
            if got != want:
                return False, f"{acct} net {got}, expected {want}", acct
    return True, "", ""


def check_measurement_binding(state: FinalState) -> tuple[bool, str, str]:
    for e in state.enclaves:
        if e["attempted"] and e["measurement"] != state.op:
            return False, f"{e['instance']} runs an unauthorized program", e["instance"]
    return True, "", ""


INVARIANTS = {
    "atomicity": check_atomicity,
    "conservation": check_conservation,
    "key-confinement": check_key_confinement,
    "plaintext-confinement": check_plaintext_confinement,
    "sanitization": check_sanitization,
    "step-ordering": check_step_ordering,
    "refund-safety": check_refund_safety,
    "settlement": check_settlement,
    "measurement-binding": check_measurement_binding,
}


def check_invariants(transcript_text: str, state: FinalState) -> Verdict:
    checks = []
    for name, fn in INVARIANTS.items():
        ok, detail, needle = fn(state)
        checks.append(Check(name, ok, detail, [] if ok else _slice(transcript_text, needle)))
    return Verdict(checks)


# -- metrics ---------------------------------------------------------------------------

def metrics_from_transcript(text: str) -> dict:
    genesis: dict[str, int] = {}
    flow: dict[str, int] = {}
    balances: dict[str, int] = {}
    records: dict[str, str] = {}
    slots: dict[str, list] = {}
    onchain = reverted = 0
    end = 0
    started = decrypted = None
    for entry in Transcript.parse(text):
        end = max(end, entry.time)
        parts = entry.step.split(":")
        if entry.actor == "dc" and parts[0] == "1" and started is None:
            started = entry.time
        if entry.actor == "dc" and parts[0] == "10" and decrypted is None:
            decrypted = entry.time
        if entry.actor == "ledger":
            if parts[0] == "genesis":
                genesis[parts[1]] = balances[parts[1]] = int(parts[2])
            elif parts[0] == "finalize":
                if parts[2] == "ok":
                    onchain += 1
                    if parts[1] in FLOW_FUNCTIONS:
                        flow[parts[1]] = flow.get(parts[1], 0) + 1
                else:
                    reverted += 1
            elif parts[0] == "transfer":
                src, dst = parts[1].split(">")
                amount = int(parts[2])
                if src in balances:
                    balances[src] -= amount
                if dst in balances:
                    balances[dst] += amount
            elif parts[0] == "record":
                records[f"{parts[1]}:{parts[2]}"] = parts[3]
        elif parts[0] == "attest-slot":
            slots.setdefault(entry.actor, []).append((parts[1], entry.time))
    makespan = {}
    for host, marks in sorted(slots.items()):
        starts = [t for k, t in marks if k == "start"]
        ends = [t for k, t in marks if k == "end"]
        makespan[host] = (max(ends) - min(starts)) if ends else 0
    return {
        "onchain_tx": onchain,
        "reverted_tx": reverted,
        "flow_calls": sum(flow.values()),
        "flow_calls_by_function": dict(sorted(flow.items())),
        "balance_delta": {a: balances[a] - genesis[a] for a in sorted(genesis)},
        "records": dict(sorted(records.items())),
        "attest_makespan_ms": makespan,
        "flow_time_ms": None if decrypted is None else decrypted - started,
        "sim_time_ms": end,
    }


def metrics_from_state(world: World) -> dict:
    """The same metrics, read off the live objects (used to cross-check)."""
    ledger = world.ledger
    ok = [r for r in ledger.finalized if r.status == "ok"]
    flow: dict[str, int] = {}
    for r in ok:
        if r.function in FLOW_FUNCTIONS:
            flow[r.function] = flow.get(r.function, 0) + 1
    records = {}
    for cid, contract in ledger.contracts().items():
        for rec in contract.records:
            records[f"{cid}:{rec.idx}"] = rec.status.value
    pools = [p for p in ((world.broker and world.broker.pool), world.cee and world.cee.pool)
             if p is not None]
    makespan = {p.host: p.makespan() for p in pools if p.slots}
    return {
        "onchain_tx": len(ok),
        "reverted_tx": len(ledger.finalized) - len(ok),
        "flow_calls": sum(flow.values()),
        "flow_calls_by_function": dict(sorted(flow.items())),
        "balance_delta": {a: ledger.balance(a) - ledger.genesis[a] for a in sorted(ledger.genesis)},
        "records": dict(sorted(records.items())),
        "attest_makespan_ms": dict(sorted(makespan.items())),
        "flow_time_ms": (None if world.flow is None or world.flow.decrypted_at is None
                         else world.flow.decrypted_at - world.flow.started_at),
        "sim_time_ms": world.transcript.entries[-1].time if world.transcript.entries else 0,
    }


# -- running ----------------------------------------------------------------------------

@dataclass
class RunResult:
    config: ScenarioConfig
    world: World
    extra: list = field(default_factory=list)   # scenario-specific Checks

    @property
    def transcript(self) -> str:
        return self.world.transcript.to_text()

    @property
    def outcome(self) -> Outcome:
        return outcome_of(self.world)

    @property
    def state(self) -> FinalState:
        return snapshot(self.world)

    def metrics(self) -> dict:
        return metrics_from_transcript(self.transcript)

    def verdict(self) -> Verdict:
        if self.world.dc is None:
            return Verdict(list(self.extra))
        v = check_invariants(self.transcript, self.state)
        v.checks.extend(self.extra)
        return v


def run(config: ScenarioConfig, seed: int | None = None) -> RunResult:
    if seed is not None:
        config = config.replace(seed=seed)
    world = World(config)
    if config.owners:
        world.setup()
        world.stage3_execute_transaction()
        world.finish()
    return RunResult(config, world)


# -- scenarios --------------------------------------------------------------------------

def honest_config(paradigm: str = "db", seed: int = 0, **kw) -> ScenarioConfig:
    return ScenarioConfig(name=f"honest-{paradigm}", paradigm=paradigm, seed=seed, **kw)


def _delta(result: RunResult, account: str) -> int:
    ledger = result.world.ledger
    return ledger.balance(account) - ledger.genesis[account]


def db_controls_cloud_config(seed: int = 0, variant: str = "suppress",
                             **kw) -> ScenarioConfig:
    if variant == "suppress":
        adv = AdversaryPolicy(frozenset({"cee", "db"}),
                              (Rule("cee", "dc", "bundle", "drop"),), (), "early-complete")
    elif variant == "tamper":
        adv = AdversaryPolicy(frozenset({"cee", "db"}),
                              (Rule("cee", "dc", "bundle", "tamper", 1),), (), "honest")
    elif variant == "honest":
        adv = AdversaryPolicy(frozenset({"cee", "db"}), (), (), "honest")
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return ScenarioConfig(name="db-controls-cloud", paradigm="db", seed=seed,
                          adversary=adv, **kw)


def scenario_db_controls_cloud(seed: int = 0, variant: str = "suppress", **kw) -> RunResult:
    result = run(db_controls_cloud_config(seed, variant, **kw))
    world, flow = result.world, result.world.flow
    statuses = [world.ledger.contract(c).record(i).status for c, i in flow.binding]
    dc = world.dc.account
    if variant == "honest":
        result.extra.append(Check("scenario:completes", result.outcome.kind == "completed",
                                  result.outcome.kind))
        return result
    never_complete = all(s is not RecordStatus.COMPLETE for s in statuses)
    result.extra.append(Check("scenario:never-complete", never_complete,
                              ",".join(s.value for s in statuses)))
    result.extra.append(Check("scenario:dc-net-zero", _delta(result, dc) == 0,
                              str(_delta(result, dc))))
    if variant == "suppress":
        early = [r for r in world.ledger.finalized
                 if r.function == "CompleteTransaction" and r.sender == world.broker.wallet.account_id]
        reverted = bool(early) and all(r.status == "revert" and r.reason == "wrong-state"
                                       for r in early)
        result.extra.append(Check("scenario:early-complete-reverted", reverted,
                                  ";".join(f"{r.status}:{r.reason}" for r in early)))
    else:
        committed = any(r.function == "ComputationComplete" and r.sender == dc
                        for r in world.ledger.finalized)
        result.extra.append(Check("scenario:tampered-bundle-rejected",
                                  world.dc.rejected_bundles == ["auth-failure"] and not committed,
                                  ",".join(world.dc.rejected_bundles)))
    return result


def blocked_endpoints(fraction: float, endpoints: int) -> int:
    if not 0 <= fraction <= 1:
        raise ValueError("blocked fraction must lie in [0, 1]")
    return min(endpoints, math.floor(fraction * endpoints + 0.5))


def dc_controls_cloud_config(seed: int = 0, blocked_fraction: float = 0.8,
                             endpoints: int = 5, **kw) -> ScenarioConfig:
    k = blocked_endpoints(blocked_fraction, endpoints)
    rules = tuple(Rule("db", f"ledger-{i}", "complete-tx", "drop") for i in range(k))
    adv = AdversaryPolicy(frozenset({"db"}), rules, (), "honest")
    return ScenarioConfig(name="dc-controls-cloud", paradigm="db", seed=seed,
                          endpoints=endpoints, adversary=adv, **kw)


def scenario_dc_controls_cloud(seed: int = 0, blocked_fraction: float = 0.8,
                               endpoints: int = 5, **kw) -> RunResult:
    cfg = dc_controls_cloud_config(seed, blocked_fraction, endpoints, **kw)
    result = run(cfg)
    world, flow = result.world, result.world.flow
    k = blocked_endpoints(blocked_fraction, endpoints)
    records = [world.ledger.contract(c).record(i) for c, i in flow.binding]
    if k < endpoints:
        paid = all(r.status is RecordStatus.COMPLETE for r in records)
        owners_paid = all(_delta(result, o.account) == cfg.price for o in world.owners)
        result.extra.append(Check("scenario:completes-via-open-endpoint",
                                  paid and owners_paid and flow.result is not None,
                                  result.outcome.kind))
    else:
        kr_on_chain = any(r.kr is not None for r in records)
        result.extra.append(Check("scenario:key-never-on-chain", not kr_on_chain))
        result.extra.append(Check("scenario:dc-ciphertext-only",
                                  flow.result is None and flow.bundle is not None))
        result.extra.append(Check("scenario:owners-lose-nothing",
                                  all(_delta(result, o.account) == 0 for o in world.owners)))
    return result


def timeout_cancel_config(seed: int = 0, **kw) -> ScenarioConfig:
    base = ScenarioConfig(**kw) if kw else ScenarioConfig()
    # halt the CEE after it has loaded the enclave but before it can emit anything
    halt = base.finalization_delay_ms + 300
    adv = AdversaryPolicy(frozenset({"cee"}), (), (("cee", halt),), "honest")
    return base.replace(name="timeout-cancel", paradigm="db", seed=seed, adversary=adv)


def scenario_timeout_cancel(seed: int = 0, **kw) -> RunResult:
    result = run(timeout_cancel_config(seed, **kw))
    dc = result.world.dc.account
    result.extra.append(Check("scenario:canceled", result.outcome.kind == "canceled",
                              result.outcome.kind))
    result.extra.append(Check("scenario:dc-net-zero", _delta(result, dc) == 0))
    return result


@dataclass
class SweepReport:
    runs: list          # (index, seed, policy description, failed invariant names)

    @property
    def violations(self) -> int:
        return sum(1 for r in self.runs if r[3])

    def outcomes(self) -> dict:
        counts: dict[str, int] = {}
        for r in self.runs:
            counts[r[4]] = counts.get(r[4], 0) + 1
        return dict(sorted(counts.items()))


def sweep_policy(seed: int, index: int, timeout_ms: int) -> AdversaryPolicy:
    return random_policy(crypto.SeededRng(seed).fork(f"policy-{index}"), timeout_ms)


def random_adversary_sweep(count: int, seed: int = 0,
                           base: ScenarioConfig | None = None) -> SweepReport:
    base = base or honest_config("db")
    runs = []
    for i in range(count):
        policy = sweep_policy(seed, i, base.timeout_ms)
        cfg = base.replace(name="random-adversary-sweep", seed=seed * 1_000_003 + i,
                           adversary=policy)
        result = run(cfg)
        verdict = result.verdict()
        runs.append((i, cfg.seed, policy.describe(), verdict.failed(), result.outcome.kind))
    return SweepReport(runs)


SCENARIOS = {
    "honest-db": lambda seed, **kw: run(honest_config("db", seed, **kw)),
    "honest-ida": lambda seed, **kw: run(honest_config("ida", seed, **kw)),
    "db-controls-cloud": lambda seed, **kw: scenario_db_controls_cloud(seed, **kw),
    "dc-controls-cloud": lambda seed, **kw: scenario_dc_controls_cloud(seed, **kw),
    "timeout-cancel": lambda seed, **kw: scenario_timeout_cancel(seed, **kw),
}


# -- experiments ------------------------------------------------------------------------

def bench_attest(n: int, workers: int, rows: int = 20, seed: int = 0) -> int:
    """Makespan (ms) of the broker's attestation pool when n owners onboard at once."""
    if n < 1:
        raise ValueError("need at least one owner")
    world = World(ScenarioConfig(name="bench-attest", owners=n, workers=workers, rows=rows,
                                 seed=seed))
    world.stage1_onboard()
    return world.broker.pool.makespan()


def attest_formula_ms(n: int, workers: int, sigrl_ms: int = 100, report_ms: int = 500) -> int:
    return math.ceil(n / workers) * (sigrl_ms + report_ms)


def flow_calls(paradigm: str, n: int, seed: int = 0, rows: int = 20) -> int:
    result = run(ScenarioConfig(name=f"compare-{paradigm}", paradigm=paradigm, owners=n,
                                rows=rows, seed=seed, finalization_delay_ms=0))
    if result.outcome.kind != "completed":
        raise RuntimeError(f"{paradigm} flow with {n} owners did not complete")
    return result.metrics()["flow_calls"]
