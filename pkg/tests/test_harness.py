import copy
import hashlib
import os
import subprocess
import sys

import pytest

from datamarket import crypto
from datamarket.config import ScenarioConfig
from datamarket.harness import (INVARIANTS, check_invariants, metrics_from_state,
                                metrics_from_transcript, random_adversary_sweep, run,
                                scenario_db_controls_cloud, scenario_dc_controls_cloud,
                                scenario_timeout_cancel)
from datamarket.sim import AdversaryPolicy, Transcript


def failing(state, name):
    ok, detail, _ = INVARIANTS[name](state)
    return not ok


@pytest.mark.parametrize("fixture", ["honest_db", "honest_ida", "fast_db"])
def test_honest_runs_satisfy_every_invariant(fixture, request):
    r = request.getfixturevalue(fixture)
    assert r.outcome.kind == "completed"
    assert r.verdict().ok, r.verdict().text()


def test_transcript_ends_with_complete_records(honest_db):
    last = Transcript.parse(honest_db.transcript)[-1]
    assert last.actor == "harness"
    assert last.step == "final:record:db-0:0:COMPLETE"


def test_metrics_agree_between_transcript_and_state(honest_db, honest_ida):
    for r in (honest_db, honest_ida):
        assert metrics_from_transcript(r.transcript) == metrics_from_state(r.world)


def test_transcript_round_trips_through_parser(honest_db):
    text = honest_db.transcript
    assert "".join(e.line() + "\n" for e in Transcript.parse(text)) == text


# -- checker self-test: each invariant must notice a planted violation -----------------

def _mutate_atomicity(s):
    cid = next(iter(s.escrow))
    s.receipts.append({"seq": 999, "function": "Confirm", "status": "ok",
                       "sender": "x", "target": cid, "finalized_at": 1,
                       "transfers": [(cid, s.owners[0]["account"], 1)], "result": None})


def _mutate_conservation(s):
    s.balances[s.dc_account] += 1


def _mutate_key(s):
    s.payloads.append(b"frame:" + s.owners[0]["k_data"])


def _mutate_plaintext(s):
    s.holdings.setdefault("db", []).append(b"..." + s.owners[1]["canary"])


def _mutate_sanitization(s):
    s.enclaves[0]["keys"] = {"do-0/x": b"\1" * 32}


def _mutate_ordering(s):
    s.receipts = [r for r in s.receipts if r["function"] != "ComputationComplete"]


def _mutate_settlement(s):
    s.balances[s.owners[0]["account"]] += 1
    s.balances[s.owners[1]["account"]] -= 1


def _mutate_measurement(s):
    s.enclaves[0]["measurement"] = crypto.hash(b"other program")


MUTATIONS = {
    "atomicity": _mutate_atomicity,
    "conservation": _mutate_conservation,
    "key-confinement": _mutate_key,
    "plaintext-confinement": _mutate_plaintext,
    "sanitization": _mutate_sanitization,
    "step-ordering": _mutate_ordering,
    "settlement": _mutate_settlement,
    "measurement-binding": _mutate_measurement,
}


@pytest.mark.parametrize("name", sorted(MUTATIONS))
def test_checker_detects_planted_violation(name, honest_db):
    state = copy.deepcopy(honest_db.state)
    assert not failing(state, name)
    MUTATIONS[name](state)
    assert failing(state, name)
    verdict = check_invariants(honest_db.transcript, state)
    assert name in verdict.failed()


def test_checker_detects_refund_leak():
    r = scenario_timeout_cancel(seed=2, rows=40)
    state = copy.deepcopy(r.state)
    assert not failing(state, "refund-safety")
    state.balances[state.owners[0]["account"]] += 5
    assert failing(state, "refund-safety")


def test_checker_detects_wrong_result(honest_db):
    state = copy.deepcopy(honest_db.state)
    state.flows[0]["result"] = state.flows[0]["expected"] + b" "
    assert failing(state, "atomicity")


def test_every_invariant_has_a_self_test():
    assert set(MUTATIONS) | {"refund-safety"} == set(INVARIANTS)


# -- determinism ---------------------------------------------------------------------------

def test_same_seed_same_transcript():
    cfg = ScenarioConfig(rows=40, seed=21)
    assert run(cfg).transcript == run(cfg).transcript


def test_transcript_independent_of_hash_seed():
    code = ("import hashlib;from datamarket.harness import run;"
            "from datamarket.config import ScenarioConfig;"
            "print(hashlib.sha256(run(ScenarioConfig(rows=30, seed=5)).transcript.encode()).hexdigest())")
    digests = set()
    for hs in ("0", "1", "12345"):
        env = dict(os.environ, PYTHONHASHSEED=hs)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True)
        digests.add(out.stdout.strip())
    local = hashlib.sha256(run(ScenarioConfig(rows=30, seed=5)).transcript.encode()).hexdigest()
    assert digests == {local}


def test_different_seeds_change_bytes_not_verdicts():
    a, b = run(ScenarioConfig(rows=40, seed=1)), run(ScenarioConfig(rows=40, seed=2))
    assert a.transcript != b.transcript
    assert [c.ok for c in a.verdict().checks] == [c.ok for c in b.verdict().checks]
    assert a.outcome.kind == b.outcome.kind == "completed"


# -- scenarios -------------------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["suppress", "tamper", "honest"])
def test_db_controls_cloud(variant):
    r = scenario_db_controls_cloud(seed=3, variant=variant, rows=40)
    assert r.verdict().ok, r.verdict().text()


@pytest.mark.parametrize("fraction", [0.0, 0.4, 0.8, 1.0])
def test_dc_controls_cloud(fraction):
    r = scenario_dc_controls_cloud(seed=4, blocked_fraction=fraction, rows=40)
    assert r.verdict().ok, r.verdict().text()
    expect = "completed" if fraction < 1 else "stuck"
    assert r.outcome.kind in (expect, "canceled")


def test_timeout_cancel_refunds_consumer():
    r = scenario_timeout_cancel(seed=5, rows=40)
    assert r.verdict().ok, r.verdict().text()
    assert r.outcome.kind == "canceled"


def test_forged_commitment_reverts():
    adv = AdversaryPolicy(frozenset({"db"}), (), (), "forge-commitment")
    r = run(ScenarioConfig(rows=40, seed=6, adversary=adv))
    forged = [x for x in r.world.ledger.finalized
              if x.function == "ComputationComplete" and x.sender == r.world.broker.wallet.account_id]
    assert forged and all(x.status == "revert" for x in forged)
    assert r.verdict().ok, r.verdict().text()


def test_empty_market():
    r = run(ScenarioConfig(owners=0))
    assert r.transcript == ""
    assert r.outcome.kind == "empty"
    assert r.verdict().ok


def test_small_sweep_is_clean():
    report = random_adversary_sweep(25, seed=9)
    assert report.violations == 0, [x for x in report.runs if x[3]]
    assert sum(report.outcomes().values()) == 25
