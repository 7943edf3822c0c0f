"""Append-only CQI event log, sign-off transcripts, export and analytics."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

from .canonical import canonical_json, sha256_hex
from .errors import (
    DuplicateSignature,
    EpisodeStillActive,
    IncompleteSignatures,
    MalformedEvent,
    TimestampRegression,
    UnknownEpisode,
    UnknownOperator,
)


class CqiKind(str, Enum):
    EPISODE_OPENED = "EpisodeOpened"
    READ_OUT = "ReadOut"
    ENTRY_SEALED = "EntrySealed"
    COMPARE_RESULT = "CompareResult"
    ENTRIES_RESET = "EntriesReset"
    VERDICT = "Verdict"
    OVERRIDE_REQUESTED = "OverrideRequested"
    OVERRIDE_APPROVED = "OverrideApproved"
    OVERRIDE_DECLINED = "OverrideDeclined"
    OVERRIDE_BUDGET_WARNING = "OverrideBudgetWarning"
    ACTUATION = "Actuation"
    ALARM = "Alarm"
    ACK = "Ack"
    RESUME = "Resume"
    ABORT_VOTE = "AbortVote"
    ABORT = "Abort"
    STOP = "Stop"
    COMPLETE = "Complete"
    SIGN_OFF_REQUESTED = "SignOffRequested"
    SIGNED = "Signed"
    NO_LIBRARY_MODE = "NoLibraryMode"


_KINDS = frozenset(k.value for k in CqiKind)
CSV_COLUMNS = ("seq", "timestamp", "pump_id", "episode_id", "kind", "operator_ids", "payload")

# episode states from which a sign-off transcript may be built
TRANSCRIPT_STATES = frozenset({"SignOffPending", "Aborted", "Blocked", "SignedOff"})


@dataclass
class SimClock:
    """Simulated time in hours; only ever moves forward."""

    now: float = 0.0

    def advance(self, dt: float) -> float:
        if not dt >= 0:
            raise ValueError("clock cannot run backwards")
        self.now += dt
        return self.now


@dataclass(frozen=True)
class CqiEvent:
    seq: int
    timestamp: float
    pump_id: str
    episode_id: str
    kind: str
    operator_ids: tuple[str, ...] = ()
    payload: dict = field(default_factory=dict, hash=False)

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "pump_id": self.pump_id,
            "episode_id": self.episode_id,
            "kind": self.kind,
            "operator_ids": list(self.operator_ids),
            "payload": self.payload,
        }

    def canonical_line(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CqiEvent":
        try:
            ev = cls(
                seq=d["seq"],
                timestamp=d["timestamp"],
                pump_id=d["pump_id"],
                episode_id=d["episode_id"],
                kind=d["kind"],
                operator_ids=tuple(d["operator_ids"]),
                payload=d["payload"],
            )
        except (KeyError, TypeError) as exc:
            raise MalformedEvent(f"bad event record: {exc}") from None
        _check_well_formed(ev)
        return ev


def _check_well_formed(ev: CqiEvent) -> None:
    if ev.kind not in _KINDS:
        raise MalformedEvent(f"unknown event kind {ev.kind!r}")
    if not isinstance(ev.seq, int) or isinstance(ev.seq, bool) or ev.seq < 0:
        raise MalformedEvent("seq must be a non-negative integer")
    if not isinstance(ev.timestamp, (int, float)) or isinstance(ev.timestamp, bool) or not math.isfinite(ev.timestamp):
        raise MalformedEvent("timestamp must be a finite number")
    if not isinstance(ev.pump_id, str) or not isinstance(ev.episode_id, str):
        raise MalformedEvent("pump_id and episode_id must be strings")
    if not all(isinstance(o, str) and o for o in ev.operator_ids):
        raise MalformedEvent("operator ids must be non-empty strings")
    if not isinstance(ev.payload, dict):
        raise MalformedEvent("payload must be an object")
    try:
        canonical_json(ev.payload)
    except (TypeError, ValueError) as exc:
        raise MalformedEvent(f"payload not serializable: {exc}") from None
    if ev.kind == CqiKind.OVERRIDE_APPROVED and (
        len(ev.operator_ids) != 2 or ev.operator_ids[0] == ev.operator_ids[1]
    ):
        raise MalformedEvent("OverrideApproved needs exactly two distinct operator ids")


class CqiLog:
    """One pump's append-only event stream."""

    def __init__(self, pump_id: str):
        self.pump_id = pump_id
        self._events: list[CqiEvent] = []
        self._alarm_seq = 0

    def __len__(self) -> int:
        return len(self._events)

    @property
    def events(self) -> tuple[CqiEvent, ...]:
        """Snapshot; later appends never alter it."""
        return tuple(self._events)

    @property
    def last_timestamp(self) -> float:
        return self._events[-1].timestamp if self._events else -math.inf

    def record(self, event: CqiEvent) -> CqiEvent:
        """Append ``event``; its seq is reassigned to the next log position."""
        kind = event.kind.value if isinstance(event.kind, CqiKind) else event.kind
        ev = CqiEvent(len(self._events), event.timestamp, event.pump_id, event.episode_id,
                      kind, tuple(event.operator_ids), dict(event.payload))
        _check_well_formed(ev)
        if ev.timestamp < self.last_timestamp:
            raise TimestampRegression(f"timestamp {ev.timestamp} precedes {self.last_timestamp}")
        self._events.append(ev)
        return ev

    def append(self, kind: CqiKind, *, timestamp: float, episode_id: str,
               operator_ids: Sequence[str] = (), **payload) -> CqiEvent:
        return self.record(CqiEvent(0, float(timestamp), self.pump_id, episode_id,
                                    kind.value, tuple(operator_ids), payload))

    def next_alarm_id(self) -> str:
        self._alarm_seq += 1
        return f"{self.pump_id}-A{self._alarm_seq:04d}"

    def episode_events(self, episode_id: str) -> list[CqiEvent]:
        return [e for e in self._events if e.episode_id == episode_id]


def record(log: CqiLog, event: CqiEvent) -> CqiEvent:
    return log.record(event)


# -- transcripts -------------------------------------------------------------


def _jsonl(events: Iterable[CqiEvent]) -> bytes:
    return "".join(e.canonical_line() + "\n" for e in events).encode("utf-8")


@dataclass(frozen=True)
class Signature:
    operator_id: str
    role: str
    timestamp: float
    digest: str


@dataclass(frozen=True)
class SignOffTranscript:
    episode_id: str
    events: tuple[CqiEvent, ...]
    digest: str
    required_signers: frozenset[str]
    signatures: tuple[Signature, ...] = ()

    @property
    def complete(self) -> bool:
        signed = {s.operator_id for s in self.signatures if s.digest == self.digest}
        return self.required_signers <= signed

    def recompute_digest(self) -> str:
        return sha256_hex(_jsonl(self.events))


def build_transcript(log: CqiLog | Iterable[CqiEvent], episode_id: str) -> SignOffTranscript:
    """Collect an episode's events (minus signatures) and digest them."""
    events = log.events if isinstance(log, CqiLog) else tuple(log)
    mine = [e for e in events if e.episode_id == episode_id]
    if not mine:
        raise UnknownEpisode(episode_id)
    body = tuple(sorted((e for e in mine if e.kind != CqiKind.SIGNED), key=lambda e: e.seq))
    state = body[-1].payload.get("state")
    if state not in TRANSCRIPT_STATES:
        raise EpisodeStillActive(f"episode {episode_id} is {state}")
    opened = next((e for e in body if e.kind == CqiKind.EPISODE_OPENED), None)
    signers = frozenset(opened.payload.get("signers", ())) if opened else frozenset()
    return SignOffTranscript(episode_id, body, sha256_hex(_jsonl(body)), signers)


def sign(transcript: SignOffTranscript, operator, episode=None) -> SignOffTranscript:
    """Append ``operator``'s signature over the transcript digest.

    With ``episode`` given, the signature is also logged and a SignOffPending
    episode moves to SignedOff once every required signer has signed.
    """
    op_id = getattr(operator, "operator_id", operator)
    role = getattr(getattr(operator, "role", None), "value", "")
    if op_id not in transcript.required_signers:
        raise UnknownOperator(f"{op_id} is not a signer for episode {transcript.episode_id}")
    if any(s.operator_id == op_id for s in transcript.signatures):
        raise DuplicateSignature(op_id)
    now = episode.clock.now if episode is not None else 0.0
    if episode is not None:
        role = episode.operator(op_id).role.value
    sig = Signature(op_id, role, now, transcript.digest)
    out = SignOffTranscript(transcript.episode_id, transcript.events, transcript.digest,
                            transcript.required_signers, transcript.signatures + (sig,))
    if episode is not None:
        episode._record_signature(sig, complete=out.complete)
    return out


def render_printout(transcript: SignOffTranscript) -> str:
    """Plain-text "print-out": one event per line, available only once fully signed."""
    if not transcript.complete:
        missing = sorted(transcript.required_signers - {s.operator_id for s in transcript.signatures})
        raise IncompleteSignatures(f"unsigned by {missing}")
    lines = [f"EPISODE {transcript.episode_id}", f"DIGEST {transcript.digest}"]
    for e in transcript.events:
        ops = ";".join(e.operator_ids) or "-"
        lines.append(f"{e.seq:06d} t={e.timestamp!r} {e.kind} [{ops}] {canonical_json(e.payload)}")
    for s in transcript.signatures:
        lines.append(f"SIGNED {s.operator_id} ({s.role}) t={s.timestamp!r} {s.digest}")
    return "\n".join(lines) + "\n"


# -- export / import ---------------------------------------------------------


def _events_of(log) -> tuple[CqiEvent, ...]:
    return log.events if isinstance(log, CqiLog) else tuple(log)


def export_cqi(log, fmt: str = "json-lines") -> str:
    events = _events_of(log)
    if fmt in ("json-lines", "jsonl", "json"):
        return _jsonl(events).decode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_ALL)
        w.writerow(CSV_COLUMNS)
        for e in events:
            w.writerow([e.seq, repr(float(e.timestamp)), e.pump_id, e.episode_id, e.kind,
                        ";".join(e.operator_ids), canonical_json(e.payload)])
        return buf.getvalue()
    raise ValueError(f"unknown export format {fmt!r}")


def import_cqi(text: str, fmt: Optional[str] = None) -> list[CqiEvent]:
    """Inverse of :func:`export_cqi`; ``fmt`` is sniffed from the header when omitted."""
    if fmt is None:
        fmt = "csv" if text.startswith('"seq"') or text.startswith("seq,") else "json-lines"
    events = []
    if fmt == "csv":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_COLUMNS:
            raise MalformedEvent("missing CSV header")
        for row in rows[1:]:
            if len(row) != len(CSV_COLUMNS):
                raise MalformedEvent(f"bad CSV row {row!r}")
            try:
                events.append(CqiEvent.from_dict({
                    "seq": int(row[0]), "timestamp": float(row[1]), "pump_id": row[2],
                    "episode_id": row[3], "kind": row[4],
                    "operator_ids": [o for o in row[5].split(";") if o],
                    "payload": json.loads(row[6]),
                }))
            except ValueError as exc:
                raise MalformedEvent(str(exc)) from None
        return events
    for n, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedEvent(f"line {n}: {exc}") from None
        if not isinstance(d, dict):
            raise MalformedEvent(f"line {n}: not an object")
        events.append(CqiEvent.from_dict(d))
    return events


# -- analytics ---------------------------------------------------------------


def analyze(log) -> dict:
    """Override and alert statistics over a CQI stream (any number of pumps)."""
    events = _events_of(log)
    episodes = set()
    ep_drug: dict[str, str] = {}
    alarms_per_episode: dict[str, int] = defaultdict(int)
    per_drug = defaultdict(lambda: {"episodes": set(), "soft_alerts": 0, "hard_alerts": 0, "overrides": 0})
    flagged, no_library = set(), set()
    for e in events:
        ep = label = e.episode_id
        episodes.add(ep)
        drug = e.payload.get("drug_id")
        if drug is not None and e.kind in (CqiKind.VERDICT, CqiKind.NO_LIBRARY_MODE):
            ep_drug[ep] = drug
            per_drug[drug]["episodes"].add(ep)
        if e.kind == CqiKind.ALARM:
            alarms_per_episode[label] += 1
            drug = drug or ep_drug.get(ep)
            if drug is not None and e.payload.get("alarm_kind") == "SoftLimit":
                per_drug[drug]["soft_alerts"] += 1
            elif drug is not None and e.payload.get("alarm_kind") == "HardLimit":
                per_drug[drug]["hard_alerts"] += 1
        elif e.kind == CqiKind.OVERRIDE_APPROVED:
            drug = drug or ep_drug.get(ep)
            if drug is not None:
                per_drug[drug]["overrides"] += 1
        elif e.kind == CqiKind.OVERRIDE_BUDGET_WARNING:
            flagged.add(label)
        elif e.kind == CqiKind.NO_LIBRARY_MODE:
            no_library.add(label)

    rows = []
    for drug, c in per_drug.items():
        n_ep = len(c["episodes"])
        rows.append({
            "drug_id": drug,
            "episodes": n_ep,
            "soft_alerts": c["soft_alerts"],
            "hard_alerts": c["hard_alerts"],
            "overrides": c["overrides"],
            "override_rate": c["overrides"] / n_ep if n_ep else 0.0,
            "soft_alert_override_fraction": c["overrides"] / c["soft_alerts"] if c["soft_alerts"] else 0.0,
        })
    rows.sort(key=lambda r: (-r["override_rate"], r["drug_id"]))
    n = len(episodes)
    total_alarms = sum(alarms_per_episode.values())
    return {
        "episodes": n,
        "alarms": total_alarms,
        "alert_rate_per_episode": total_alarms / n if n else 0.0,
        "drugs": rows,
        "budget_flagged_episodes": sorted(flagged),
        "no_library_episodes": sorted(no_library),
    }


ANALYTICS_CSV_COLUMNS = ("drug_id", "episodes", "soft_alerts", "hard_alerts", "overrides",
                         "override_rate", "soft_alert_override_fraction")


def analytics_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANALYTICS_CSV_COLUMNS)
    for r in report["drugs"]:
        w.writerow([r[c] for c in ANALYTICS_CSV_COLUMNS])
    return buf.getvalue()


# -- log-level safety check --------------------------------------------------


def check_log_invariants(log) -> list[str]:
    """Re-derive the actuation gate from the event stream alone.

    Returns a list of human-readable violations (empty when the log is clean).
    Independent of the state machine: it only reads what was recorded.
    """
    problems = []
    rounds: dict[tuple[str, str], dict] = {}
    last_seq, last_ts = -1, -math.inf
    for e in _events_of(log):
        if e.timestamp < last_ts:
            problems.append(f"seq {e.seq}: timestamp regression")
        if e.seq <= last_seq and e.seq != 0:
            problems.append(f"seq {e.seq}: not increasing")
        last_seq, last_ts = e.seq, e.timestamp
        key = (e.pump_id, e.episode_id)
        r = rounds.get(key)
        if r is None or e.kind == CqiKind.ENTRIES_RESET or (e.kind == CqiKind.ENTRY_SEALED and r["compared"]):
            r = rounds[key] = {"sealed": [], "compared": False, "concurred": False,
                               "verdict": None, "override": False, "nolib": False}
        if e.kind == CqiKind.ENTRY_SEALED:
            r["sealed"].extend(e.operator_ids)
        elif e.kind == CqiKind.COMPARE_RESULT:
            r["compared"] = True
            r["concurred"] = (e.payload.get("result") == "Concurred"
                              and len(r["sealed"]) == 2 and len(set(r["sealed"])) == 2)
        elif e.kind == CqiKind.VERDICT:
            r["verdict"] = e.payload.get("verdict")
        elif e.kind == CqiKind.NO_LIBRARY_MODE:
            r["nolib"] = True
        elif e.kind == CqiKind.OVERRIDE_APPROVED:
            if len(e.operator_ids) != 2 or len(set(e.operator_ids)) != 2:
                problems.append(f"seq {e.seq}: override without two distinct approvers")
            elif set(e.operator_ids) != set(r["sealed"]):
                problems.append(f"seq {e.seq}: override approvers are not the entering pair")
            else:
                r["override"] = True
        elif e.kind == CqiKind.ACTUATION:
            if not r["concurred"]:
                problems.append(f"seq {e.seq}: actuation without concurrence")
            v = r["verdict"]
            if v == "HardViolation":
                problems.append(f"seq {e.seq}: actuation after hard violation")
            elif not (v == "Pass" or (v == "SoftViolation" and r["override"]) or (v is None and r["nolib"])):
                problems.append(f"seq {e.seq}: actuation without passing DERS or dual override")
    return problems
