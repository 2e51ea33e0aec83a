"""Discrete-event scheduler, transcript, adversarial network and the
attestation worker pool.

Events run in (time, insertion order). The adversary only touches messages
whose source or destination host it controls, and it can drop, delay,
reorder or corrupt wire bytes but never forge sealed content.
"""

from __future__ import annotations

import fnmatch
import heapq
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from . import codec, crypto

EVENT_KINDS = ("message-delivery", "ledger-advance", "actor-wakeup", "attestation-slot")
ACTIONS = ("deliver", "drop", "delay", "reorder", "tamper")


class HarnessBug(AssertionError):
    pass


class Scheduler:
    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._order = itertools.count()
        self.processed = 0

    def at(self, time: int, kind: str, fn: Callable, *args) -> None:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if time < self.now:
            raise HarnessBug(f"event scheduled in the past: {time} < {self.now}")
        heapq.heappush(self._heap, (time, next(self._order), kind, fn, args))

    def after(self, dt: int, kind: str, fn: Callable, *args) -> None:
        self.at(self.now + dt, kind, fn, *args)

    def __len__(self) -> int:
        return len(self._heap)

    def run(self, until: Callable[[], bool] | None = None,
            max_events: int = 1_000_000) -> int:
        """Process events until the queue drains or ``until()`` holds."""
        n = 0
        while self._heap:
            if until is not None and until():
                break
            time, _, _kind, fn, args = heapq.heappop(self._heap)
            self.now = time
            fn(*args)
            n += 1
            self.processed += 1
            if n >= max_events:
                raise HarnessBug("event budget exhausted")
        return n


# -- transcript ------------------------------------------------------------------

def detail_digest(detail) -> str:
    return crypto.hash(codec.encode(detail)).hex()


@dataclass(frozen=True)
class Entry:
    time: int
    actor: str
    step: str
    digest: str

    def line(self) -> str:
        return f"{self.time}|{self.actor}|{self.step}|{self.digest}"

    @classmethod
    def parse(cls, line: str) -> "Entry":
        time, actor, step, digest = line.rstrip("\n").split("|")
        return cls(int(time), actor, step, digest)


class Transcript:
    def __init__(self):
        self.entries: list[Entry] = []
        self.details: list = []

    def log(self, time: int, actor: str, step: str, detail=None) -> Entry:
        if "|" in actor or "|" in step:
            raise ValueError("transcript fields may not contain '|'")
        entry = Entry(time, actor, step, detail_digest(detail))
        self.entries.append(entry)
        self.details.append(detail)
        return entry

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.entries)

    @staticmethod
    def parse(text: str) -> list[Entry]:
        return [Entry.parse(line) for line in text.splitlines() if line]

    def find(self, actor: str | None = None, step_prefix: str = "") -> list[tuple[Entry, object]]:
        return [(e, d) for e, d in zip(self.entries, self.details)
                if (actor is None or e.actor == actor) and e.step.startswith(step_prefix)]


# -- adversary --------------------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    src: str = "*"
    dst: str = "*"
    kind: str = "*"
    action: str = "deliver"
    arg: int = 0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown adversary action {self.action!r}")
        if self.arg < 0:
            raise ValueError("rule argument must be non-negative")

    def matches(self, msg: "Message") -> bool:
        return (fnmatch.fnmatchcase(msg.src, self.src)
                and fnmatch.fnmatchcase(msg.dst, self.dst)
                and fnmatch.fnmatchcase(msg.kind, self.kind))

    def text(self) -> str:
        return f"{self.src} {self.dst} {self.kind} {self.action} {self.arg}".strip()

    @classmethod
    def parse(cls, text: str) -> "Rule":
        parts = text.split()
        if len(parts) not in (4, 5):
            raise ValueError(f"bad rule {text!r}: want 'src dst kind action [arg]'")
        arg = int(parts[4]) if len(parts) == 5 else 0
        return cls(parts[0], parts[1], parts[2], parts[3], arg)


@dataclass(frozen=True)
class AdversaryPolicy:
    compromised: frozenset = frozenset()
    rules: tuple = ()
    halts: tuple = ()   # (host, time_ms) pairs, relative to activation
    db_behavior: str = "honest"

    def decide(self, msg: "Message") -> Rule | None:
        if msg.src not in self.compromised and msg.dst not in self.compromised:
            return None
        for rule in self.rules:
            if rule.matches(msg):
                return rule
        return None

    def describe(self) -> dict:
        return {"compromised": sorted(self.compromised),
                "rules": [r.text() for r in self.rules],
                "halts": [list(h) for h in self.halts],
                "db_behavior": self.db_behavior}


HONEST = AdversaryPolicy()

# message classes the random sweep assigns actions to
MESSAGE_CLASSES = ("load", "loaded", "exec-request", "challenge", "report", "ready",
                   "provision", "fetch", "capsules", "bundle", "keyslip", "complete-tx",
                   "tx")
DB_BEHAVIORS = ("honest", "early-complete", "forge-commitment")


def random_policy(rng: crypto.SeededRng, timeout_ms: int,
                  hosts=("cee", "db")) -> AdversaryPolicy:
    """Uniform rule sets over identity/drop/delay/reorder per message class."""
    compromised = [h for h in hosts if rng.random() < 0.5] or [rng.choice(list(hosts))]
    rules = []
    for kind in MESSAGE_CLASSES:
        action = rng.choice(["deliver", "drop", "delay", "reorder"])
        arg = rng.randint(1, 10 * timeout_ms) if action == "delay" else 0
        rules.append(Rule("*", "*", kind, action, arg))
    halts = []
    if rng.random() < 0.25:
        halts.append((rng.choice(compromised), rng.randint(0, 2 * timeout_ms)))
    behavior = rng.choice(list(DB_BEHAVIORS)) if "db" in compromised else "honest"
    return AdversaryPolicy(frozenset(compromised), tuple(rules), tuple(halts), behavior)


# -- network ----------------------------------------------------------------------

@dataclass
class Message:
    seq: int
    sent_at: int
    src: str
    dst: str
    kind: str
    wire: bytes
    confidential: bool = False
    delivered: bytes | None = None
    fate: str = "pending"


class Network:
    REORDER_WINDOW_MS = 1_000

    def __init__(self, scheduler: Scheduler, transcript: Transcript, rng: crypto.SeededRng,
                 latency_ms: int = 2):
        self.scheduler = scheduler
        self.transcript = transcript
        self.latency_ms = latency_ms
        self._rng = rng
        self._handlers: dict[str, Callable[[Message], None]] = {}
        self._seq = itertools.count(1)
        self._held: dict[tuple[str, str], deque] = {}
        self.policy: AdversaryPolicy = HONEST
        self.halts: dict[str, int] = {}
        self.log: list[Message] = []

    def register(self, host: str, handler: Callable[[Message], None]) -> None:
        self._handlers[host] = handler

    def activate(self, policy: AdversaryPolicy) -> None:
        self.policy = policy
        now = self.scheduler.now
        for host, t in policy.halts:
            self.halts[host] = min(self.halts.get(host, math.inf), now + t)
        self.transcript.log(now, "adversary", "activate", policy.describe())

    def halted(self, host: str) -> bool:
        return self.scheduler.now >= self.halts.get(host, math.inf)

    def send(self, src: str, dst: str, kind: str, wire: bytes,
             confidential: bool = False) -> Message | None:
        if self.halted(src):
            return None
        msg = Message(next(self._seq), self.scheduler.now, src, dst, kind, wire,
                      confidential)
        self.log.append(msg)
        rule = self.policy.decide(msg)
        action = rule.action if rule else "deliver"
        self.transcript.log(self.scheduler.now, "net", f"send:{kind}:{src}>{dst}",
                            {"seq": msg.seq, "wire": crypto.hash(wire).hex(), "action": action})
        if action == "drop":
            msg.fate = "dropped"
            return msg
        if action == "delay":
            self.scheduler.after(self.latency_ms + rule.arg, "message-delivery",
                                 self._arrive, msg)
        elif action == "reorder":
            self._hold(msg)
        elif action == "tamper":
            pos = self._position(msg, rule)
            msg.delivered = wire[:pos] + bytes([wire[pos] ^ 0x01]) + wire[pos + 1:]
            self.scheduler.after(self.latency_ms, "message-delivery", self._arrive, msg)
        else:
            self.scheduler.after(self.latency_ms, "message-delivery", self._arrive, msg)
        return msg

    def _position(self, msg: Message, rule: Rule) -> int:
        # arg > 0 picks the byte that many positions from the end
        if rule.arg:
            return max(0, len(msg.wire) - rule.arg)
        digest = crypto.hash(codec.encode(["tamper", self._rng.seed, msg.seq]))
        return int.from_bytes(digest[:4], "big") % len(msg.wire)

    def _hold(self, msg: Message) -> None:
        # held until the next message on the same link is delivered, or the window ends
        link = (msg.src, msg.dst)
        self._held.setdefault(link, deque()).append(msg)
        self.scheduler.after(self.REORDER_WINDOW_MS, "message-delivery", self._release, msg)

    def _release(self, msg: Message) -> None:
        queue = self._held.get((msg.src, msg.dst))
        if queue and msg in queue:
            queue.remove(msg)
            self._arrive(msg)

    def _arrive(self, msg: Message) -> None:
        if msg.fate != "pending":
            return
        if self.halted(msg.dst):
            msg.fate = "lost-halted"
            return
        if msg.delivered is None:
            msg.delivered = msg.wire
        msg.fate = "delivered"
        self.transcript.log(self.scheduler.now, "net", f"deliver:{msg.kind}:{msg.src}>{msg.dst}",
                            {"seq": msg.seq, "wire": crypto.hash(msg.delivered).hex()})
        handler = self._handlers.get(msg.dst)
        if handler is not None:
            handler(msg)
        queue = self._held.get((msg.src, msg.dst))
        while queue:
            self._arrive(queue.popleft())

    def check_intact(self, msg: Message) -> None:
        """Called by receivers after a sealed frame opened successfully.

        An altered frame that still authenticates means the channel layer or
        the harness is broken, so this raises instead of being recorded.
        """
        if msg.confidential and msg.delivered != msg.wire:
            raise HarnessBug(f"sealed message {msg.seq} altered in transit")

    def visible_payloads(self) -> list[bytes]:
        out = []
        for m in self.log:
            out.append(m.wire)
            if m.delivered is not None and m.delivered != m.wire:
                out.append(m.delivered)
        return out


# -- attestation worker pool ---------------------------------------------------------

@dataclass
class _AttestJob:
    make_quote: Callable
    on_done: Callable
    label: str


@dataclass
class AttestationPool:
    """W parallel attestation contexts; each job holds a worker for the
    revocation-list fetch plus the report request."""

    scheduler: Scheduler
    transcript: Transcript
    host: str
    workers: int
    ias: object
    _queue: deque = field(default_factory=deque)
    _busy: int = 0
    slots: list = field(default_factory=list)

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("need at least one attestation worker")

    def submit(self, make_quote: Callable, on_done: Callable, label: str = "") -> None:
        self._queue.append(_AttestJob(make_quote, on_done, label))
        self._pump()

    def _pump(self) -> None:
        while self._busy < self.workers and self._queue:
            job = self._queue.popleft()
            self._busy += 1
            start = self.scheduler.now
            self.transcript.log(start, self.host, "attest-slot:start", {"job": job.label})
            self.scheduler.after(self.ias.latency_ms, "attestation-slot", self._finish, job, start)

    def _finish(self, job: _AttestJob, start: int) -> None:
        self._busy -= 1
        now = self.scheduler.now
        self.slots.append((start, now))
        self.transcript.log(now, self.host, "attest-slot:end", {"job": job.label})
        quote = report = error = None
        try:
            quote = job.make_quote()
            report = self.ias.verify_quote(quote, now)
        except Exception as exc:  # noqa: BLE001 - surfaced to the challenger
            error = exc
        job.on_done(quote, report, error)
        self._pump()

    def makespan(self) -> int:
        if not self.slots:
            return 0
        return max(e for _, e in self.slots) - min(s for s, _ in self.slots)
