"""Data-usage contract state machines hosted by :class:`~datamarket.ledger.Ledger`.

``DataOwnerContract`` is published by one owner with a fixed usage policy.
``DataBrokerContract`` is curated by a broker that registers many owners and
sells their data as a bundle. Both share the record lifecycle::

    WAIT_COMPUTATION -> WAIT_COMPLETE -> COMPLETE
           |                  |
           +----> CANCELED <--+
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from . import crypto
from .ledger import CREATE, CallContext, ContractRevert, Ledger

OP_HASH_SIZE = crypto.DIGEST_SIZE


class RecordStatus(str, enum.Enum):
    WAIT_COMPUTATION = "WAIT_COMPUTATION"
    WAIT_COMPLETE = "WAIT_COMPLETE"
    COMPLETE = "COMPLETE"
    CANCELED = "CANCELED"

    @property
    def terminal(self) -> bool:
        return self in (RecordStatus.COMPLETE, RecordStatus.CANCELED)


@dataclass(frozen=True)
class Policy:
    dataset: frozenset
    price: int
    operation: bytes
    consumers: frozenset
    timeout_ms: int

    def validate(self) -> None:
        if not self.dataset:
            raise ValueError("policy dataset is empty")
        if self.price < 0:
            raise ValueError("price must be non-negative")
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        if len(self.operation) != OP_HASH_SIZE:
            raise ValueError(f"operation hash must be {OP_HASH_SIZE} bytes")

    def to_params(self) -> dict:
        return {"dataset": sorted(self.dataset), "price": self.price,
                "operation": self.operation, "consumers": sorted(self.consumers),
                "timeout_ms": self.timeout_ms}

    @classmethod
    def from_params(cls, p: dict) -> "Policy":
        return cls(frozenset(p["dataset"]), int(p["price"]), bytes(p["operation"]),
                   frozenset(p["consumers"]), int(p["timeout_ms"]))


@dataclass
class UsageRecord:
    idx: int
    op: bytes
    data: list
    dc: str
    req_time: int
    escrow: int
    status: RecordStatus = RecordStatus.WAIT_COMPUTATION
    kr_hash: bytes | None = None
    kr: bytes | None = None
    # (owner account, price) pairs frozen at request time; broker contract only
    payees: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"idx": self.idx, "op": self.op.hex(), "data": list(self.data),
                "dc": self.dc, "req_time": self.req_time, "escrow": self.escrow,
                "status": self.status.value,
                "kr_hash": self.kr_hash.hex() if self.kr_hash else None,
                "kr": self.kr.hex() if self.kr else None,
                "payees": [list(p) for p in self.payees]}


class _UsageContract:
    kind = ""
    _functions: tuple = ()

    def __init__(self, creator: str, timeout_ms: int):
        self.creator = creator
        self.timeout_ms = timeout_ms
        self.records: list[UsageRecord] = []
        self.destroyed = False

    def dispatch(self, ctx: CallContext, function: str, args: dict):
        if function not in self._functions:
            raise ContractRevert("unknown-function")
        handler = getattr(self, "_" + _snake(function))
        try:
            return handler(ctx, **args)
        except TypeError:
            raise ContractRevert("malformed-args") from None

    def record(self, idx: int) -> UsageRecord:
        if not isinstance(idx, int) or not 0 <= idx < len(self.records):
            raise ContractRevert("unknown-record")
        return self.records[idx]

    def _new_record(self, ctx: CallContext, op: bytes, data: list, payees=()) -> dict:
        rec = UsageRecord(len(self.records), op, list(data), ctx.sender, ctx.time,
                          ctx.value, payees=[list(p) for p in payees])
        self.records.append(rec)
        return {"idx": rec.idx}

    def _refund_request(self, ctx: CallContext) -> dict:
        ctx.pay(ctx.sender, ctx.value)
        return {"refunded": True}

    def _computation_complete(self, ctx: CallContext, idx, kr_hash) -> dict:
        rec = self.record(idx)
        if ctx.sender != rec.dc:
            raise ContractRevert("wrong-sender")
        if rec.status is not RecordStatus.WAIT_COMPUTATION:
            raise ContractRevert("wrong-state")
        if not isinstance(kr_hash, bytes) or len(kr_hash) != crypto.DIGEST_SIZE:
            raise ContractRevert("malformed-args")
        rec.kr_hash = kr_hash
        rec.status = RecordStatus.WAIT_COMPLETE
        return {"idx": idx, "status": rec.status.value}

    def _complete_transaction(self, ctx: CallContext, idx, kr) -> dict:
        rec = self.record(idx)
        if ctx.sender != self.creator:
            raise ContractRevert("wrong-sender")
        if rec.status is not RecordStatus.WAIT_COMPLETE:
            raise ContractRevert("wrong-state")
        if not isinstance(kr, bytes) or crypto.hash(kr) != rec.kr_hash:
            return {"idx": idx, "matched": False}
        self._pay_out(ctx, rec)
        rec.kr = kr
        rec.status = RecordStatus.COMPLETE
        return {"idx": idx, "matched": True}

    def _pay_out(self, ctx: CallContext, rec: UsageRecord) -> None:
        raise NotImplementedError

    def _cancel(self, ctx: CallContext, idx) -> dict:
        rec = self.record(idx)
        if ctx.sender != rec.dc:
            raise ContractRevert("wrong-sender")
        if rec.status.terminal:
            raise ContractRevert("wrong-state")
        if ctx.time - rec.req_time > self.timeout_ms:
            ctx.pay(rec.dc, rec.escrow)
            rec.escrow = 0
            rec.status = RecordStatus.CANCELED
            return {"idx": idx, "canceled": True}
        return {"idx": idx, "canceled": False}

    def _revoke(self, ctx: CallContext) -> dict:
        if ctx.sender != self.creator:
            raise ContractRevert("wrong-sender")
        refunded = []
        for rec in self.records:
            if not rec.status.terminal:
                ctx.pay(rec.dc, rec.escrow)
                rec.escrow = 0
                rec.status = RecordStatus.CANCELED
                refunded.append(rec.idx)
        self.destroyed = True
        return {"refunded": refunded}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "creator": self.creator, "timeout_ms": self.timeout_ms,
                "destroyed": self.destroyed,
                "records": [r.to_dict() for r in self.records]}

    def dump(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


class DataOwnerContract(_UsageContract):
    kind = "do"
    _functions = ("Request", "ComputationComplete", "CompleteTransaction",
                  "Cancel", "Revoke")

    def __init__(self, ctx: CallContext, params: dict):
        try:
            policy = Policy.from_params(params)
            policy.validate()
        except (KeyError, TypeError, ValueError):
            raise ContractRevert("malformed-policy") from None
        super().__init__(ctx.sender, policy.timeout_ms)
        self.policy = policy

    @property
    def owner(self) -> str:
        return self.creator

    def _request(self, ctx: CallContext, op, data) -> dict:
        p = self.policy
        if (op == p.operation and ctx.sender in p.consumers
                and set(data) <= p.dataset and ctx.value >= p.price):
            return self._new_record(ctx, op, data)
        return self._refund_request(ctx)

    def _pay_out(self, ctx: CallContext, rec: UsageRecord) -> None:
        ctx.pay(self.creator, rec.escrow)
        rec.escrow = 0

    def to_dict(self) -> dict:
        d = super().to_dict()
        p = self.policy
        d["policy"] = {"dataset": sorted(p.dataset), "price": p.price,
                       "operation": p.operation.hex(), "consumers": sorted(p.consumers),
                       "timeout_ms": p.timeout_ms}
        return d


@dataclass
class OwnerEntry:
    owner: str
    dc: str
    price: int


class DataBrokerContract(_UsageContract):
    kind = "db"
    _functions = ("Register", "Confirm", "Request", "ComputationComplete",
                  "CompleteTransaction", "Cancel", "Revoke")

    def __init__(self, ctx: CallContext, params: dict):
        try:
            ops = [bytes(op) for op in params["operations"]]
            timeout = int(params["timeout_ms"])
        except (KeyError, TypeError, ValueError):
            raise ContractRevert("malformed-config") from None
        if timeout <= 0 or any(len(op) != OP_HASH_SIZE for op in ops):
            raise ContractRevert("malformed-config")
        super().__init__(ctx.sender, timeout)
        self.operations = ops
        self.entries: dict[tuple[str, bytes], OwnerEntry] = {}
        self.confirmed: dict[bytes, list[str]] = {op: [] for op in ops}

    @property
    def broker(self) -> str:
        return self.creator

    # Aggregates are derived from the confirmed entries so they always agree
    # with the owner table, including after a confirmed owner re-registers.
    def owners(self, op: bytes) -> list[str]:
        return list(self.confirmed.get(op, []))

    def consumers(self, op: bytes) -> list[str]:
        out = []
        for ido in self.confirmed.get(op, []):
            dc = self.entries[(ido, op)].dc
            if dc not in out:
                out.append(dc)
        return out

    def price(self, op: bytes) -> int:
        return sum(self.entries[(ido, op)].price for ido in self.confirmed.get(op, []))

    def _register(self, ctx: CallContext, op, dc, price) -> dict:
        if not isinstance(op, bytes) or not isinstance(price, int) or price < 0:
            raise ContractRevert("malformed-args")
        self.entries[(ctx.sender, op)] = OwnerEntry(ctx.sender, dc, price)
        return {"owner": ctx.sender}

    def _confirm(self, ctx: CallContext, owners) -> dict:
        if ctx.sender != self.creator:
            raise ContractRevert("not-broker")
        added = []
        for ido in owners:
            for op in self.operations:
                if (ido, op) in self.entries and ido not in self.confirmed[op]:
                    self.confirmed[op].append(ido)
                    added.append(ido)
        return {"added": added}

    def _request(self, ctx: CallContext, op, data) -> dict:
        if (op in self.confirmed and ctx.sender in self.consumers(op)
                and set(data) <= set(self.confirmed[op]) and ctx.value >= self.price(op)):
            payees = [(ido, self.entries[(ido, op)].price) for ido in self.confirmed[op]]
            return self._new_record(ctx, op, data, payees)
        return self._refund_request(ctx)

    def _pay_out(self, ctx: CallContext, rec: UsageRecord) -> None:
        for owner, price in rec.payees:
            ctx.pay(owner, price)
            rec.escrow -= price
        ctx.pay(rec.dc, rec.escrow)
        rec.escrow = 0

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["operations"] = [op.hex() for op in self.operations]
        d["registry"] = [{"owner": o, "op": op.hex(), "dc": e.dc, "price": e.price}
                         for (o, op), e in self.entries.items()]
        d["sources"] = {op.hex(): {"owners": self.owners(op),
                                   "consumers": self.consumers(op),
                                   "price": self.price(op)}
                        for op in self.operations}
        return d


def _snake(name: str) -> str:
    out = []
    for i, ch in enumerate(name):
        if ch.isupper() and i:
            out.append("_")
        out.append(ch.lower())
    return "".join(out)


CONTRACT_TYPES = {"do": DataOwnerContract, "db": DataBrokerContract}


def new_ledger(**kwargs) -> Ledger:
    return Ledger(contract_types=CONTRACT_TYPES, **kwargs)


def do_contract_args(policy: Policy) -> dict:
    """Transaction arguments for creating a data-owner contract."""
    return {"kind": "do", "params": policy.to_params()}


def db_contract_args(operations: list[bytes], timeout_ms: int) -> dict:
    return {"kind": "db", "params": {"operations": list(operations),
                                     "timeout_ms": timeout_ms}}


__all__ = ["CREATE", "RecordStatus", "Policy", "UsageRecord", "DataOwnerContract",
           "DataBrokerContract", "OwnerEntry", "CONTRACT_TYPES", "new_ledger",
           "do_contract_args", "db_contract_args"]
