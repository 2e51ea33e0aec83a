import pytest

from datamarket import crypto
from datamarket.ledger import (BadNonce, BadSignature, InsufficientFunds, Ledger,
                               SignedTransaction, UnknownAccount, Wallet, ether)


def make(delay=15_000, penalty=0, names=("alice", "bob"), balance=1_000):
    ledger = Ledger(finalization_delay_ms=delay, congestion_penalty_ms=penalty)
    rng = crypto.SeededRng(0)
    wallets = {}
    for n in names:
        key = crypto.SigningKey.generate(rng)
        ledger.create_account(n, balance, key.public)
        wallets[n] = Wallet(n, key)
    return ledger, wallets


def test_ether_units():
    assert ether(0.01) == 10_000
    assert ether(1) == 1_000_000


def test_transfer_finalizes_after_delay():
    ledger, w = make()
    w["alice"].call(ledger, "bob", "pay", value=100)
    assert ledger.advance(14_999) == []
    assert ledger.balance("bob") == 1_000
    (r,) = ledger.advance(1)
    assert r.status == "ok" and r.finalized_at == 15_000
    assert ledger.balance("alice") == 900 and ledger.balance("bob") == 1_100
    assert ledger.export_log() == "15000|alice|bob|pay|100|ok\n"


def test_zero_delay_still_needs_an_advance():
    ledger, w = make(delay=0)
    w["alice"].call(ledger, "bob", "pay", value=1)
    assert ledger.balance("bob") == 1_000
    assert len(ledger.advance(0)) == 1


def test_negative_advance_rejected():
    ledger, _ = make()
    with pytest.raises(ValueError):
        ledger.advance(-1)


def test_submission_errors():
    ledger, w = make()
    tx = w["alice"].tx("bob", "pay", value=10)
    forged = SignedTransaction(tx.sender, tx.target, tx.function, tx.args, 11, tx.nonce,
                               tx.signature)
    with pytest.raises(BadSignature):
        ledger.submit_tx(forged)
    with pytest.raises(InsufficientFunds):
        ledger.submit_tx(w["alice"].tx("bob", "pay", value=10_000))
    ghost = Wallet("ghost", crypto.SigningKey.generate(crypto.SeededRng(1)))
    with pytest.raises(UnknownAccount):
        ledger.submit_tx(ghost.tx("bob", "pay"))
    ledger.submit_tx(tx)
    with pytest.raises(BadNonce):
        ledger.submit_tx(tx)            # the same signed transaction again
    assert len(ledger.pending()) == 1


def test_garbled_signature_is_bad_signature():
    ledger, w = make()
    tx = w["alice"].tx("bob", "pay", value=1)
    short = SignedTransaction(tx.sender, tx.target, tx.function, tx.args, tx.value,
                              tx.nonce, tx.signature[:10])
    with pytest.raises(BadSignature):
        ledger.submit_tx(short)


def test_transaction_wire_roundtrip():
    _, w = make()
    tx = w["alice"].tx("bob", "f", {"k": b"\x01"}, value=3)
    assert SignedTransaction.from_bytes(tx.to_bytes()) == tx
    assert tx.tx_id == SignedTransaction.from_bytes(tx.to_bytes()).tx_id


def test_ordering_within_a_batch():
    ledger, w = make(delay=10, names=("b", "a"))
    ledger.submit_tx(w["b"].tx("a", "pay", value=1))
    ledger.submit_tx(w["a"].tx("b", "pay", value=1))
    ledger.advance(5)
    ledger.submit_tx(w["a"].tx("b", "pay", value=2))
    done = ledger.advance(100)
    # (submitted_at, sender, seq)
    assert [(r.submitted_at, r.sender) for r in done] == [(0, "a"), (0, "b"), (5, "a")]


def test_congestion_penalty_grows_with_pending():
    ledger, w = make(delay=100, penalty=50)
    for _ in range(3):
        w["alice"].call(ledger, "bob", "pay", value=1)
    assert sorted(p.ready_at for p in ledger._pending) == [100, 150, 200]
    assert ledger.next_ready_time() == 100


def test_genesis_only():
    ledger, w = make()
    with pytest.raises(ValueError):
        ledger.create_account("alice", 1, b"")
    w["alice"].call(ledger, "bob", "pay", value=1)
    with pytest.raises(ValueError):
        ledger.create_account("carol", 1, b"")


def test_conservation_over_transfers():
    ledger, w = make(delay=1)
    before = ledger.total_supply()
    for i in range(20):
        src, dst = ("alice", "bob") if i % 2 else ("bob", "alice")
        w[src].call(ledger, dst, "pay", value=i)
    ledger.advance(10)
    assert ledger.total_supply() == before


def test_unknown_target_reverts_and_restores_value():
    ledger, w = make(delay=0)
    w["alice"].call(ledger, "nowhere", "f", value=5)
    (r,) = ledger.advance(0)
    assert r.status == "revert" and r.reason == "unknown-target"
    assert ledger.balance("alice") == 1_000
