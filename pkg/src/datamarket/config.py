"""Scenario configuration and its INI file format.

Example::

    [scenario]
    name = honest-db
    paradigm = db
    seed = 7

    [market]
    owners = 3
    endpoints = 5

    [adversary]
    compromised = cee, db
    rule.1 = cee dc bundle drop
    halt.1 = cee 500
    db_behavior = early-complete
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .ledger import DEFAULT_FINALIZATION_DELAY_MS, ether
from .sim import DB_BEHAVIORS, HONEST, AdversaryPolicy, Rule

PARADIGMS = ("db", "ida")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    paradigm: str = "db"
    owners: int = 3
    workers: int = 4
    endpoints: int = 5
    price: int = ether(0.01)
    deposit: int | None = None          # None: exactly the total price
    timeout_ms: int = 600_000
    rows: int = 500
    genesis_balance: int = ether(100)
    finalization_delay_ms: int = DEFAULT_FINALIZATION_DELAY_MS
    congestion_penalty_ms: int = 0
    latency_ms: int = 2
    sigrl_latency_ms: int = 100
    report_latency_ms: int = 500
    rejected_owners: tuple = ()         # broker quality-check override
    dc_auto_cancel: bool = True
    adversary: AdversaryPolicy = field(default=HONEST)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        positive = ("workers", "endpoints", "timeout_ms", "rows")
        non_negative = ("owners", "price", "genesis_balance", "finalization_delay_ms",
                        "congestion_penalty_ms", "latency_ms", "sigrl_latency_ms",
                        "report_latency_ms")
        for name in positive + non_negative:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer")
            if value < (1 if name in positive else 0):
                raise ConfigError(f"{name} out of range: {value}")
        if self.deposit is not None and self.deposit < 0:
            raise ConfigError("deposit must be non-negative")
        if any(not 0 <= i < self.owners for i in self.rejected_owners):
            raise ConfigError("rejected_owners refers to an unknown owner")
        if self.adversary.db_behavior not in DB_BEHAVIORS:
            raise ConfigError(f"unknown db_behavior {self.adversary.db_behavior!r}")

    @property
    def total_price(self) -> int:
        return self.price * self.owners

    @property
    def effective_deposit(self) -> int:
        return self.total_price if self.deposit is None else self.deposit

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["scenario"] = {"name": self.name, "paradigm": self.paradigm, "seed": str(self.seed)}
        market = {k: str(getattr(self, k)) for k in _MARKET_KEYS}
        market["deposit"] = "" if self.deposit is None else str(self.deposit)
        market["rejected_owners"] = ", ".join(map(str, self.rejected_owners))
        market["dc_auto_cancel"] = "yes" if self.dc_auto_cancel else "no"
        cp["market"] = market
        cp["ledger"] = {k: str(getattr(self, k)) for k in _LEDGER_KEYS}
        cp["ias"] = {k: str(getattr(self, k)) for k in _IAS_KEYS}
        adv = {"compromised": ", ".join(sorted(self.adversary.compromised)),
               "db_behavior": self.adversary.db_behavior}
        for i, rule in enumerate(self.adversary.rules, 1):
            adv[f"rule.{i}"] = rule.text()
        for i, (host, t) in enumerate(self.adversary.halts, 1):
            adv[f"halt.{i}"] = f"{host} {t}"
        cp["adversary"] = adv
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


_MARKET_KEYS = ("owners", "workers", "endpoints", "price", "timeout_ms", "rows",
                "genesis_balance")
_LEDGER_KEYS = ("finalization_delay_ms", "congestion_penalty_ms", "latency_ms")
_IAS_KEYS = ("sigrl_latency_ms", "report_latency_ms")
_SECTIONS = {"scenario": ("name", "paradigm", "seed"),
             "market": _MARKET_KEYS + ("deposit", "rejected_owners", "dc_auto_cancel"),
             "ledger": _LEDGER_KEYS,
             "ias": _IAS_KEYS,
             "adversary": ("compromised", "db_behavior")}


def _int(section, key, raw) -> int:
    try:
        return int(raw.strip().replace("_", ""))
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from None


def _numbered(cp, key: str, prefix: str) -> list[str]:
    items = []
    for k, v in cp["adversary"].items():
        if k.startswith(prefix):
            suffix = k[len(prefix):]
            if not suffix.isdigit():
                raise ConfigError(f"[adversary] {k}: expected {prefix}<n>")
            items.append((int(suffix), v))
    return [v for _, v in sorted(items)]


def parse_adversary(cp) -> AdversaryPolicy:
    if not cp.has_section("adversary"):
        return HONEST
    sec = cp["adversary"]
    compromised = frozenset(h.strip() for h in sec.get("compromised", "").split(",")
                            if h.strip())
    try:
        rules = tuple(Rule.parse(t) for t in _numbered(cp, "rule", "rule."))
    except ValueError as exc:
        raise ConfigError(f"[adversary] {exc}") from None
    halts = []
    for text in _numbered(cp, "halt", "halt."):
        parts = text.split()
        if len(parts) != 2:
            raise ConfigError(f"[adversary] bad halt {text!r}: want 'host time_ms'")
        halts.append((parts[0], _int("adversary", "halt", parts[1])))
    return AdversaryPolicy(compromised, rules, tuple(halts),
                           sec.get("db_behavior", "honest").strip())


def from_ini(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if section == "adversary" and key.startswith(("rule.", "halt.")):
                continue
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    changes: dict = {}
    if cp.has_section("scenario"):
        sec = cp["scenario"]
        for key in ("name", "paradigm"):
            if key in sec:
                changes[key] = sec[key].strip().lower() if key == "paradigm" else sec[key]
        if "seed" in sec:
            changes["seed"] = _int("scenario", "seed", sec["seed"])
    for section, keys in (("market", _MARKET_KEYS), ("ledger", _LEDGER_KEYS),
                          ("ias", _IAS_KEYS)):
        if cp.has_section(section):
            for key in keys:
                if key in cp[section]:
                    changes[key] = _int(section, key, cp[section][key])
    if cp.has_section("market"):
        sec = cp["market"]
        if "deposit" in sec:
            raw = sec["deposit"].strip()
            changes["deposit"] = _int("market", "deposit", raw) if raw else None
        if "rejected_owners" in sec:
            changes["rejected_owners"] = tuple(
                _int("market", "rejected_owners", v)
                for v in sec["rejected_owners"].split(",") if v.strip())
        if "dc_auto_cancel" in sec:
            try:
                changes["dc_auto_cancel"] = sec.getboolean("dc_auto_cancel")
            except ValueError:
                raise ConfigError("[market] dc_auto_cancel: expected yes/no") from None
    if cp.has_section("adversary"):
        changes["adversary"] = parse_adversary(cp)
    try:
        return dataclasses.replace(base or ScenarioConfig(), **changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return from_ini(text)
