"""A simulated blockchain: accounts, signed transactions, delayed finality.

Finalization is a fixed delay after submission (plus an optional per-pending
transaction congestion penalty). Contract state machines are hosted here and
only ever mutated by finalized transactions.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from . import codec, crypto

log = logging.getLogger(__name__)

CREATE = "@create"
DEFAULT_FINALIZATION_DELAY_MS = 15_000
UNITS_PER_ETHER = 1_000_000


class LedgerError(Exception):
    code = "ledger-error"


class BadSignature(LedgerError):
    code = "bad-signature"


class InsufficientFunds(LedgerError):
    code = "insufficient-funds"


class BadNonce(LedgerError):
    code = "bad-nonce"


class UnknownAccount(LedgerError):
    code = "unknown-account"


class ContractRevert(Exception):
    """Raised by contract code; the whole call is rolled back."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def ether(amount: float) -> int:
    return round(amount * UNITS_PER_ETHER)


@dataclass
class Account:
    id: str
    balance: int
    public_key: bytes


@dataclass(frozen=True)
class SignedTransaction:
    sender: str
    target: str
    function: str
    args: dict
    value: int
    nonce: int
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return codec.encode([self.sender, self.target, self.function,
                             self.args, self.value, self.nonce])

    @classmethod
    def create(cls, key: crypto.SigningKey, sender: str, target: str,
               function: str, args: dict | None = None, value: int = 0,
               nonce: int = 0) -> "SignedTransaction":
        unsigned = cls(sender, target, function, args or {}, value, nonce)
        return cls(sender, target, function, args or {}, value, nonce,
                   crypto.sign(key, unsigned.signing_bytes()))

    @property
    def tx_id(self) -> str:
        return crypto.hash(self.to_bytes()).hex()

    def to_bytes(self) -> bytes:
        return codec.encode({"sender": self.sender, "target": self.target,
                             "function": self.function, "args": self.args,
                             "value": self.value, "nonce": self.nonce,
                             "signature": self.signature})

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SignedTransaction":
        d = codec.decode(raw)
        return cls(d["sender"], d["target"], d["function"], d["args"],
                   int(d["value"]), int(d["nonce"]), d["signature"])


@dataclass
class Receipt:
    tx_id: str
    seq: int
    sender: str
    target: str
    function: str
    value: int
    submitted_at: int
    finalized_at: int | None = None
    status: str = "pending"
    reason: str = ""
    transfers: list = field(default_factory=list)
    result: Any = None

    def log_line(self) -> str:
        return "|".join([str(self.finalized_at), self.sender, self.target,
                         self.function, str(self.value), self.status])


@dataclass
class _Pending:
    tx: SignedTransaction
    receipt: Receipt
    ready_at: int


class CallContext:
    """What a contract sees while handling one call."""

    def __init__(self, ledger: "Ledger", contract_id: str, sender: str,
                 value: int, receipt: Receipt):
        self._ledger = ledger
        self.contract_id = contract_id
        self.sender = sender
        self.value = value
        self.time = ledger.clock
        self._receipt = receipt

    def pay(self, to: str, amount: int) -> None:
        if amount == 0:
            return
        if amount < 0 or self._ledger._escrow[self.contract_id] < amount:
            raise ContractRevert("escrow-underflow")
        if to not in self._ledger._accounts:
            raise ContractRevert("unknown-payee")
        self._ledger._escrow[self.contract_id] -= amount
        self._ledger._accounts[to].balance += amount
        self._receipt.transfers.append((self.contract_id, to, amount))


class Ledger:
    def __init__(self, contract_types: dict[str, Callable] | None = None,
                 finalization_delay_ms: int = DEFAULT_FINALIZATION_DELAY_MS,
                 congestion_penalty_ms: int = 0,
                 listener: Callable[[Receipt], None] | None = None):
        self.listener = listener
        self.contract_types = dict(contract_types or {})
        self.finalization_delay_ms = finalization_delay_ms
        self.congestion_penalty_ms = congestion_penalty_ms
        self.clock = 0
        self._accounts: dict[str, Account] = {}
        self._escrow: dict[str, int] = {}
        self._contracts: dict[str, Any] = {}
        self._last_nonce: dict[str, int] = {}
        self._pending: list[_Pending] = []
        self._seq = 0
        self.finalized: list[Receipt] = []
        self.genesis: dict[str, int] = {}

    # -- genesis ----------------------------------------------------------
    def create_account(self, account_id: str, balance: int, public_key: bytes) -> Account:
        if account_id in self._accounts or account_id in self._contracts:
            raise ValueError(f"duplicate account id {account_id!r}")
        if balance < 0:
            raise ValueError("balance must be non-negative")
        if self.finalized or self._pending:
            raise ValueError("accounts can only be minted at genesis")
        acct = Account(account_id, balance, public_key)
        self._accounts[account_id] = acct
        self.genesis[account_id] = balance
        return acct

    # -- reads --------------------------------------------------------------
    def balance(self, account_id: str) -> int:
        if account_id in self._accounts:
            return self._accounts[account_id].balance
        if account_id in self._escrow:
            return self._escrow[account_id]
        raise UnknownAccount(account_id)

    def escrow(self, contract_id: str) -> int:
        return self._escrow[contract_id]

    def accounts(self) -> list[str]:
        return list(self._accounts)

    def contract(self, contract_id: str):
        return self._contracts[contract_id]

    def contracts(self) -> dict[str, Any]:
        return dict(self._contracts)

    def total_supply(self) -> int:
        return (sum(a.balance for a in self._accounts.values())
                + sum(self._escrow.values()))

    def pending(self) -> list[SignedTransaction]:
        return [p.tx for p in self._pending]

    def export_log(self) -> str:
        return "".join(r.log_line() + "\n" for r in self.finalized)

    # -- writes -------------------------------------------------------------
    def submit_tx(self, tx: SignedTransaction) -> str:
        acct = self._accounts.get(tx.sender)
        if acct is None:
            raise UnknownAccount(tx.sender)
        try:
            ok = crypto.verify(acct.public_key, tx.signing_bytes(), tx.signature)
        except crypto.MalformedSignature:
            ok = False
        if not ok:
            raise BadSignature(tx.tx_id)
        if tx.value < 0 or acct.balance < tx.value:
            raise InsufficientFunds(f"{tx.sender} has {acct.balance}, needs {tx.value}")
        if tx.nonce <= self._last_nonce.get(tx.sender, 0):
            raise BadNonce(f"{tx.sender} nonce {tx.nonce}")
        self._last_nonce[tx.sender] = tx.nonce
        self._seq += 1
        receipt = Receipt(tx.tx_id, self._seq, tx.sender, tx.target, tx.function,
                          tx.value, submitted_at=self.clock)
        delay = self.finalization_delay_ms + self.congestion_penalty_ms * len(self._pending)
        self._pending.append(_Pending(tx, receipt, self.clock + delay))
        return receipt.tx_id

    def ready_at(self, tx_id: str) -> int:
        for p in self._pending:
            if p.receipt.tx_id == tx_id:
                return p.ready_at
        raise KeyError(tx_id)

    def next_ready_time(self) -> int | None:
        if not self._pending:
            return None
        return min(p.ready_at for p in self._pending)

    def advance(self, dt: int) -> list[Receipt]:
        if dt < 0:
            raise ValueError("dt must be non-negative")
        self.clock += dt
        ready = [p for p in self._pending if p.ready_at <= self.clock]
        if not ready:
            return []
        ready.sort(key=lambda p: (p.receipt.submitted_at, p.tx.sender, p.receipt.seq))
        done = []
        for p in ready:
            self._pending.remove(p)
            self._execute(p.tx, p.receipt)
            done.append(p.receipt)
        return done

    def advance_to(self, time_ms: int) -> list[Receipt]:
        return self.advance(max(0, time_ms - self.clock))

    # -- execution ----------------------------------------------------------
    def _execute(self, tx: SignedTransaction, receipt: Receipt) -> None:
        receipt.finalized_at = self.clock
        balances = {k: a.balance for k, a in self._accounts.items()}
        escrow = dict(self._escrow)
        contract = self._contracts.get(tx.target)
        saved = copy.deepcopy(contract) if contract is not None else None
        try:
            receipt.result = self._apply(tx, receipt)
            receipt.status = "ok"
        except ContractRevert as exc:
            for k, a in self._accounts.items():
                a.balance = balances[k]
            self._escrow = escrow
            if contract is not None:
                self._contracts[tx.target] = saved
            for cid in list(self._contracts):
                if cid not in escrow:
                    del self._contracts[cid]
            receipt.status = "revert"
            receipt.reason = exc.reason
            receipt.transfers = []
            receipt.result = None
        self.finalized.append(receipt)
        if self.listener is not None:
            self.listener(receipt)
        log.debug("finalized %s %s.%s -> %s %s", receipt.sender, receipt.target,
                  receipt.function, receipt.status, receipt.reason)

    def _move_value(self, tx: SignedTransaction, receipt: Receipt, to: str) -> None:
        if tx.value == 0:
            return
        sender = self._accounts[tx.sender]
        if sender.balance < tx.value:
            raise ContractRevert("insufficient-funds")
        sender.balance -= tx.value
        if to in self._accounts:
            self._accounts[to].balance += tx.value
        else:
            self._escrow[to] += tx.value
        receipt.transfers.append((tx.sender, to, tx.value))

    def _apply(self, tx: SignedTransaction, receipt: Receipt):
        if tx.target == CREATE:
            kind = tx.args.get("kind")
            factory = self.contract_types.get(kind)
            if factory is None:
                raise ContractRevert("unknown-contract-kind")
            cid = f"{kind}-{len(self._contracts)}"
            self._escrow[cid] = 0
            self._contracts[cid] = None
            self._move_value(tx, receipt, cid)
            ctx = CallContext(self, cid, tx.sender, tx.value, receipt)
            self._contracts[cid] = factory(ctx, tx.args.get("params", {}))
            return {"contract": cid}
        if tx.target in self._contracts:
            contract = self._contracts[tx.target]
            if getattr(contract, "destroyed", False):
                raise ContractRevert("destroyed")
            self._move_value(tx, receipt, tx.target)
            ctx = CallContext(self, tx.target, tx.sender, tx.value, receipt)
            return contract.dispatch(ctx, tx.function, tx.args)
        if tx.target in self._accounts:
            self._move_value(tx, receipt, tx.target)
            return None
        raise ContractRevert("unknown-target")


class Wallet:
    """Signs transactions for one account and tracks its nonce."""

    def __init__(self, account_id: str, key: crypto.SigningKey):
        self.account_id = account_id
        self.key = key
        self.nonce = 0

    def tx(self, target: str, function: str, args: dict | None = None,
           value: int = 0) -> SignedTransaction:
        self.nonce += 1
        return SignedTransaction.create(self.key, self.account_id, target, function,
                                        args, value, self.nonce)

    def call(self, ledger: Ledger, target: str, function: str,
             args: dict | None = None, value: int = 0) -> str:
        return ledger.submit_tx(self.tx(target, function, args, value))
