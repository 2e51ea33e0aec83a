import json

import pytest

from datamarket import cli
from datamarket.config import ConfigError, ScenarioConfig, from_ini, load
from datamarket.harness import (db_controls_cloud_config, dc_controls_cloud_config,
                                timeout_cancel_config)
from datamarket.sim import AdversaryPolicy, Rule, Transcript


@pytest.mark.parametrize("cfg", [
    ScenarioConfig(),
    ScenarioConfig(paradigm="ida", owners=7, deposit=5, rejected_owners=(2, 4),
                   dc_auto_cancel=False),
    db_controls_cloud_config(3, "tamper"),
    dc_controls_cloud_config(4, 1.0),
    timeout_cancel_config(5),
])
def test_ini_round_trip(cfg):
    assert from_ini(cfg.to_ini()) == cfg


def test_ini_partial_uses_defaults():
    cfg = from_ini("[market]\nowners = 9\n[adversary]\ncompromised = db\n"
                   "rule.2 = db ledger-1 complete-tx drop\nrule.1 = * * bundle delay 40\n")
    assert cfg.owners == 9 and cfg.workers == ScenarioConfig().workers
    assert cfg.adversary == AdversaryPolicy(frozenset({"db"}), (
        Rule("*", "*", "bundle", "delay", 40), Rule("db", "ledger-1", "complete-tx", "drop")))


@pytest.mark.parametrize("text", [
    "[market]\nowners = three\n",
    "[market]\nowners = -1\n",
    "[market]\nwidgets = 2\n",
    "[extras]\nx = 1\n",
    "[scenario]\nparadigm = p2p\n",
    "[adversary]\nrule.1 = a b c explode\n",
    "[adversary]\nrule.x = a b c drop\n",
    "[adversary]\nhalt.1 = cee\n",
    "[adversary]\ndb_behavior = sneaky\n",
    "[market]\nowners = 2\nrejected_owners = 5\n",
    "no section header\n",
])
def test_bad_ini_rejected(text):
    with pytest.raises(ConfigError):
        from_ini(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "nope.ini")


def test_cli_run_scenario_writes_transcript_and_metrics(tmp_path, capsys):
    tr, mt = tmp_path / "t.txt", tmp_path / "m.jsonl"
    code = cli.main(["run", "--scenario", "honest-db", "--seed", "2",
                     "--transcript", str(tr), "--metrics", str(mt)])
    assert code == 0
    assert "PASS atomicity" in capsys.readouterr().out
    entries = Transcript.parse(tr.read_text())
    assert entries[-1].step.endswith("COMPLETE")
    metrics = {d["metric"]: d["value"] for d in map(json.loads, mt.read_text().splitlines())}
    assert metrics["flow_calls"] == 3


def test_cli_run_config_file(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text(dc_controls_cloud_config(1, 1.0, rows=40).to_ini())
    assert cli.main(["run", "--config", str(path)]) == 0


def test_cli_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[market]\nowners = many\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert cli.main(["run"]) == 2
    assert cli.main(["run", "--scenario", "nonsense"]) == 2
    assert cli.main(["bench-attest", "--workers", "0"]) == 2
    assert cli.main(["run", "--config", str(bad), "--scenario", "honest-db"]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_invariant_failure_exits_1(monkeypatch):
    from datamarket import harness
    monkeypatch.setitem(harness.INVARIANTS, "conservation", lambda s: (False, "planted", "dc"))
    assert cli.main(["run", "--scenario", "honest-db"]) == 1


def test_cli_sweep(capsys):
    assert cli.main(["run", "--scenario", "random-adversary-sweep", "--sweep", "5"]) == 0
    assert "sweep of 5 policies: 0 violating runs" in capsys.readouterr().out


def test_cli_bench_and_compare(capsys):
    assert cli.main(["bench-attest", "--owners", "8", "--workers", "1,8"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1:] == ["8 1 4.8 4.8", "8 8 0.6 0.6"]
    assert cli.main(["compare-paradigms", "--owners", "2", "--range"]) == 0
    assert capsys.readouterr().out.splitlines()[1:] == ["1 3 3", "2 6 3"]


def test_cli_show_config_is_loadable(tmp_path, capsys):
    assert cli.main(["show-config", "--scenario", "db-controls-cloud"]) == 0
    assert from_ini(capsys.readouterr().out) == db_controls_cloud_config(0)


def test_readme_config_example_parses():
    import re
    from pathlib import Path
    text = (Path(__file__).resolve().parent.parent / "README.md").read_text(encoding="utf-8")
    block = re.search(r"```ini\n(.*?)```", text, re.S).group(1)
    cfg = from_ini(block)
    assert cfg.paradigm == "db" and cfg.deposit is None and cfg.rejected_owners == ()
    assert cfg.adversary.halts == (("cee", 15300),)
