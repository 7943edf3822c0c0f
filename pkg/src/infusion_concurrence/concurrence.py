"""Dual-operator concurrence state machine.

An :class:`Episode` is one administration, from independent sealed entries
through comparison, DERS review, overrides, actuation, alarms and sign-off.
Every decision point (entry, override, abort, significant-alarm ack) needs two
distinct operators. The pump consults :attr:`Episode.state` before it will
actuate; nothing else can move an episode to ``ReadyToActuate``.

Episodes are single-writer: serialize calls on one episode externally.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, fields
from enum import Enum
from typing import Optional, Sequence, Union

from .alarms import AlarmEvent, AlarmKind
from .audit import CqiKind, CqiLog, SimClock
from .drug_library import DersVerdict, DrugLibrary, VerdictKind, check_program, lookup, normalized_dose
from .errors import (
    DersError,
    DuplicateAck,
    DuplicateOperator,
    DuplicateSubmission,
    EntryNotFound,
    HardLimitNotOverridable,
    NoExecutive,
    NotAnEnteringOperator,
    ReadOutRequired,
    UnknownAlarm,
    UnknownOperator,
    WrongState,
)
from .program import InfusionProgram


class Role(str, Enum):
    COMMANDING = "Commanding"
    EXECUTIVE = "Executive"


@dataclass(frozen=True)
class Operator:
    operator_id: str
    role: Role = Role.EXECUTIVE

    def __post_init__(self):
        if not isinstance(self.operator_id, str) or not self.operator_id:
            raise ValueError("operator_id must be a non-empty string")
        object.__setattr__(self, "role", Role(self.role))


class EpisodeState(str, Enum):
    AWAITING_ENTRIES = "AwaitingEntries"
    COMPARING = "Comparing"
    MISMATCH = "Mismatch"
    DERS_REVIEW = "DersReview"
    BLOCKED = "Blocked"
    OVERRIDE_PENDING = "OverridePending"
    READY_TO_ACTUATE = "ReadyToActuate"
    RUNNING = "Running"
    ALARM_PENDING = "AlarmPending"
    ABORTED = "Aborted"
    COMPLETED = "Completed"
    SIGN_OFF_PENDING = "SignOffPending"
    SIGNED_OFF = "SignedOff"


S = EpisodeState
ABSORBING = frozenset({S.ABORTED, S.SIGNED_OFF})
# states in which an abort vote is refused
NO_ABORT = frozenset({S.BLOCKED, S.ABORTED, S.SIGNED_OFF, S.COMPLETED, S.SIGN_OFF_PENDING})

DEFAULT_OVERRIDE_BUDGET = 3


@dataclass(frozen=True)
class SealedEntry:
    operator_id: str
    program: InfusionProgram
    sealed_at: float


@dataclass(frozen=True)
class EntryReceipt:
    """All the submitting operator learns from submit_entry."""

    episode_id: str
    operator_id: str
    sealed_at: float


@dataclass(frozen=True)
class CompareResult:
    concurred: bool
    fields: tuple[str, ...] = ()


OperatorLike = Union[Operator, str]
_episode_ids = itertools.count(1)


class Episode:
    """One administration under concurrence. Build with :func:`new_episode`."""

    def __init__(self, episode_id: str, pump_id: str, commanding: Operator,
                 executives: Sequence[Operator], *, log: CqiLog, clock: SimClock,
                 library: Optional[DrugLibrary], require_read_out: bool,
                 allow_no_library: bool, override_budget: int):
        self.episode_id = episode_id
        self.pump_id = pump_id
        self.commanding = commanding
        self.executives = tuple(executives)
        self.log = log
        self.clock = clock
        self.library = library
        self.require_read_out = require_read_out
        self.allow_no_library = allow_no_library
        self.override_budget = override_budget

        if len(self.executives) == 2:
            self.entering_pair = (self.executives[0].operator_id, self.executives[1].operator_id)
        else:
            self.entering_pair = (self.executives[0].operator_id, commanding.operator_id)
        self._operators = {o.operator_id: o for o in (commanding, *self.executives)}

        self.state = S.AWAITING_ENTRIES
        self._entries: dict[str, SealedEntry] = {}
        self._read_out_done = False
        self.program: Optional[InfusionProgram] = None
        self.verdict: Optional[DersVerdict] = None
        self.no_library = False
        self.override_approvals: set[str] = set()
        self.abort_votes: set[str] = set()
        self.override_count = 0
        self.alarms: dict[str, AlarmEvent] = {}
        self._open_alarms: list[str] = []
        self._resume_state: Optional[EpisodeState] = None
        self.actuated_program: Optional[InfusionProgram] = None
        self.signatures: list = []
        self._pump = None

    # -- helpers -------------------------------------------------------------

    def __repr__(self) -> str:
        return f"Episode({self.episode_id!r}, pump={self.pump_id!r}, state={self.state.value})"

    @property
    def operators(self) -> tuple[Operator, ...]:
        return tuple(self._operators.values())

    @property
    def required_signers(self) -> frozenset[str]:
        return frozenset({self.commanding.operator_id, *self.entering_pair})

    @property
    def open_alarms(self) -> tuple[AlarmEvent, ...]:
        return tuple(self.alarms[a] for a in self._open_alarms)

    def operator(self, op: OperatorLike) -> Operator:
        op_id = getattr(op, "operator_id", op)
        try:
            return self._operators[op_id]
        except (KeyError, TypeError):
            raise UnknownOperator(f"{op_id!r} is not part of episode {self.episode_id}") from None

    def _entering(self, op: OperatorLike) -> str:
        op_id = getattr(op, "operator_id", op)
        if op_id not in self.entering_pair:
            raise NotAnEnteringOperator(f"{op_id!r} does not enter data in episode {self.episode_id}")
        return op_id

    def _require(self, *states: EpisodeState) -> None:
        if self.state not in states:
            want = ", ".join(s.value for s in states)
            raise WrongState(f"episode {self.episode_id} is {self.state.value}; needs {want}")

    def _log(self, kind: CqiKind, operator_ids=(), **payload):
        payload["state"] = self.state.value
        return self.log.append(kind, timestamp=self.clock.now, episode_id=self.episode_id,
                               operator_ids=operator_ids, **payload)

    # -- entry -----------------------------------------------------------------

    def read_out(self, operator: OperatorLike) -> None:
        """The commanding operator reads the protocol and parameters aloud."""
        op = self.operator(operator)
        if op.role is not Role.COMMANDING:
            raise NotAnEnteringOperator("only the commanding operator reads out the protocol")
        self._require(S.AWAITING_ENTRIES)
        self._read_out_done = True
        self._log(CqiKind.READ_OUT, (op.operator_id,))

    def submit_entry(self, operator: OperatorLike, program: InfusionProgram) -> EntryReceipt:
        """Seal one operator's independent entry.

        The receipt and the logged event are identical whether or not the
        peer has already submitted.
        """
        self._require(S.AWAITING_ENTRIES)
        op_id = self._entering(operator)
        if self.require_read_out and not self._read_out_done:
            raise ReadOutRequired("protocol read-out must precede data entry")
        if op_id in self._entries:
            raise DuplicateSubmission(f"{op_id} already submitted in this round")
        if not isinstance(program, InfusionProgram):
            raise TypeError("program must be an InfusionProgram")
        for name in ("dose_value", "rate_ml_per_h", "vtbi_ml"):
            v = getattr(program, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"keyed {name} must be a finite non-negative number")
        entry = SealedEntry(op_id, program, self.clock.now)
        self._entries[op_id] = entry
        self._log(CqiKind.ENTRY_SEALED, (op_id,))
        if len(self._entries) == 2:
            self.state = S.COMPARING
        return EntryReceipt(self.episode_id, op_id, entry.sealed_at)

    def _comparable(self, program: InfusionProgram) -> dict:
        p = program.canonical()
        out = {f.name: getattr(p, f.name) for f in fields(p)}
        if self.library is not None:
            try:
                entry = lookup(self.library, p.drug_id, p.care_area)
                out["dose_value"] = normalized_dose(entry, p)
                out["dose_unit"] = entry.dosing_unit.value
            except (EntryNotFound, DersError):
                pass
        return out

    def compare_entries(self) -> CompareResult:
        self._require(S.COMPARING)
        a, b = (self._entries[o].program for o in self.entering_pair)
        ca, cb = self._comparable(a), self._comparable(b)
        diffs = tuple(k for k in ca if ca[k] != cb[k])
        if diffs:
            self._entries.clear()
            self.state = S.MISMATCH
            self._log(CqiKind.COMPARE_RESULT, result="Mismatch", fields=list(diffs))
            return CompareResult(False, diffs)
        self.program = a.canonical()
        self.state = S.DERS_REVIEW
        self._log(CqiKind.COMPARE_RESULT, result="Concurred", fields=[])
        return CompareResult(True)

    def restart(self) -> None:
        """Start a fresh entry round after a mismatch or block; counters persist."""
        self._require(S.MISMATCH, S.BLOCKED)
        self._entries.clear()
        self.program = None
        self.verdict = None
        self.no_library = False
        self.override_approvals.clear()
        self._read_out_done = False
        self.state = S.AWAITING_ENTRIES
        self._log(CqiKind.ENTRIES_RESET)

    # -- DERS review and overrides --------------------------------------------

    def review(self) -> Optional[DersVerdict]:
        """Run the agreed program through DERS and move to the matching state."""
        self._require(S.DERS_REVIEW)
        if self.verdict is not None:
            return self.verdict
        p = self.program
        if self.library is None:
            entry = None
        else:
            try:
                entry = lookup(self.library, p.drug_id, p.care_area)
            except EntryNotFound:
                entry = None
        if entry is None:
            if self.allow_no_library:
                self.no_library = True
                self.state = S.READY_TO_ACTUATE
                self._log(CqiKind.NO_LIBRARY_MODE, drug_id=p.drug_id, care_area=p.care_area)
            else:
                self.state = S.BLOCKED
                self._log(CqiKind.VERDICT, drug_id=p.drug_id, care_area=p.care_area,
                          verdict="EntryNotFound", violations=[])
            return None
        try:
            verdict = check_program(entry, p)
        except DersError as exc:
            self.state = S.BLOCKED
            self._log(CqiKind.VERDICT, drug_id=p.drug_id, care_area=p.care_area,
                      verdict=type(exc).__name__, violations=[])
            return None
        # a pump cannot run at zero rate or volume
        if p.rate_ml_per_h <= 0 or p.vtbi_ml <= 0:
            verdict = _force_hard(verdict, p)
        self.verdict = verdict
        if verdict.kind is VerdictKind.PASS:
            self.state = S.READY_TO_ACTUATE
        elif verdict.kind is VerdictKind.HARD:
            self.state = S.BLOCKED
        self._log(CqiKind.VERDICT, drug_id=p.drug_id, care_area=p.care_area,
                  verdict=verdict.kind.value, violations=[v.to_dict() for v in verdict.violations])
        if verdict.kind is not VerdictKind.PASS:
            kind = AlarmKind.HARD_LIMIT if verdict.kind is VerdictKind.HARD else AlarmKind.SOFT_LIMIT
            alarm = AlarmEvent(self.log.next_alarm_id(), kind, True, self.clock.now)
            self.alarms[alarm.alarm_id] = alarm
            self._log(CqiKind.ALARM, alarm_id=alarm.alarm_id, alarm_kind=kind.value,
                      significant=True, drug_id=p.drug_id)
        return verdict

    def _refuse_hard(self) -> None:
        if self.verdict is not None and self.verdict.kind is VerdictKind.HARD:
            raise HardLimitNotOverridable("hard limits cannot be overridden")

    def request_override(self, operator: OperatorLike) -> None:
        self._refuse_hard()
        self._require(S.DERS_REVIEW)
        if self.verdict is None or self.verdict.kind is not VerdictKind.SOFT:
            raise WrongState("override needs a soft-limit verdict")
        op_id = self._entering(operator)
        self.override_approvals = {op_id}
        self.state = S.OVERRIDE_PENDING
        self._log(CqiKind.OVERRIDE_REQUESTED, (op_id,), drug_id=self.program.drug_id)

    def approve_override(self, operator: OperatorLike) -> None:
        self._refuse_hard()
        self._require(S.OVERRIDE_PENDING)
        op_id = self._entering(operator)
        self.override_approvals.add(op_id)
        if self.override_approvals != set(self.entering_pair):
            return
        self.override_count += 1
        self.state = S.READY_TO_ACTUATE
        self._log(CqiKind.OVERRIDE_APPROVED, self.entering_pair, drug_id=self.program.drug_id,
                  override_count=self.override_count)
        if self.override_count > self.override_budget:
            alarm = AlarmEvent(self.log.next_alarm_id(), AlarmKind.OVERRIDE_BUDGET_EXCEEDED,
                               False, self.clock.now)
            self.alarms[alarm.alarm_id] = alarm
            self._open_alarms.append(alarm.alarm_id)
            self._resume_state = S.READY_TO_ACTUATE
            self.state = S.ALARM_PENDING
            self._log(CqiKind.OVERRIDE_BUDGET_WARNING, alarm_id=alarm.alarm_id,
                      override_count=self.override_count, budget=self.override_budget,
                      drug_id=self.program.drug_id)

    def decline_override(self, operator: OperatorLike) -> None:
        self._refuse_hard()
        self._require(S.DERS_REVIEW, S.OVERRIDE_PENDING)
        if self.verdict is None or self.verdict.kind is not VerdictKind.SOFT:
            raise WrongState("nothing to decline")
        op_id = self._entering(operator)
        self.override_approvals.clear()
        self.state = S.BLOCKED
        self._log(CqiKind.OVERRIDE_DECLINED, (op_id,), drug_id=self.program.drug_id)

    # -- abort and alarms ------------------------------------------------------

    def vote_abort(self, operator: OperatorLike) -> None:
        if self.state in NO_ABORT:
            raise WrongState(f"episode {self.episode_id} is {self.state.value}")
        op = self.operator(operator)
        self.abort_votes.add(op.operator_id)
        self._log(CqiKind.ABORT_VOTE, (op.operator_id,))
        if len(self.abort_votes) >= 2:
            pump = self._pump
            self.state = S.ABORTED
            self._log(CqiKind.ABORT, tuple(sorted(self.abort_votes)))
            if pump is not None and pump.episode is self and pump.state.value in ("Infusing", "Paused"):
                pump.stop()

    def raise_alarm(self, alarm: AlarmEvent) -> None:
        """Open an alarm from the pump; pauses the episode until acknowledged."""
        self._require(S.RUNNING, S.READY_TO_ACTUATE, S.ALARM_PENDING)
        if alarm.alarm_id in self.alarms:
            raise ValueError(f"duplicate alarm id {alarm.alarm_id}")
        if self.state is not S.ALARM_PENDING:
            self._resume_state = self.state
        self.alarms[alarm.alarm_id] = alarm
        self._open_alarms.append(alarm.alarm_id)
        self.state = S.ALARM_PENDING
        self._log(CqiKind.ALARM, alarm_id=alarm.alarm_id, alarm_kind=alarm.kind.value,
                  significant=alarm.clinically_significant)

    def acknowledge_alarm(self, alarm_id: str, operator: OperatorLike) -> None:
        self._require(S.ALARM_PENDING)
        op = self.operator(operator)
        if alarm_id not in self._open_alarms:
            raise UnknownAlarm(alarm_id)
        alarm = self.alarms[alarm_id]
        if any(o == op.operator_id for o, _ in alarm.acks):
            raise DuplicateAck(f"{op.operator_id} already acknowledged {alarm_id}")
        alarm.acks.append((op.operator_id, self.clock.now))
        if alarm.satisfied:
            self._open_alarms.remove(alarm_id)
        if not self._open_alarms:
            self.state = self._resume_state
            self._resume_state = None
        self._log(CqiKind.ACK, (op.operator_id,), alarm_id=alarm_id,
                  closed=alarm.satisfied)

    # -- hooks used by the pump and by sign-off --------------------------------

    def _mark_running(self, pump) -> None:
        self._require(S.READY_TO_ACTUATE)
        self._pump = pump
        self.actuated_program = self.program
        self.state = S.RUNNING

    def _mark_complete(self) -> None:
        self._require(S.RUNNING)
        self.state = S.COMPLETED
        self._log(CqiKind.COMPLETE)
        self.state = S.SIGN_OFF_PENDING
        self._log(CqiKind.SIGN_OFF_REQUESTED, signers=sorted(self.required_signers))

    def _record_signature(self, sig, complete: bool) -> None:
        if self.state is S.SIGNED_OFF:
            raise WrongState("episode already signed off")
        self.signatures.append(sig)
        if complete and self.state is S.SIGN_OFF_PENDING:
            self.state = S.SIGNED_OFF
        self._log(CqiKind.SIGNED, (sig.operator_id,), digest=sig.digest, role=sig.role)


def _force_hard(verdict: DersVerdict, p: InfusionProgram) -> DersVerdict:
    from .drug_library import Violation

    extra = tuple(
        Violation(name, float(getattr(p, name)), "positive", 0.0, "hard")
        for name in ("rate_ml_per_h", "vtbi_ml") if getattr(p, name) <= 0
    )
    return DersVerdict(VerdictKind.HARD, verdict.violations + extra)


def new_episode(pump_id: str, commanding: Operator, executives: Sequence[Operator], *,
                episode_id: Optional[str] = None, log: Optional[CqiLog] = None,
                clock: Optional[SimClock] = None, library: Optional[DrugLibrary] = None,
                require_read_out: Optional[bool] = None, allow_no_library: bool = False,
                override_budget: int = DEFAULT_OVERRIDE_BUDGET) -> Episode:
    """Open an episode in ``AwaitingEntries``.

    With two executives they are the entering pair and the commanding operator
    must log a protocol read-out first (``require_read_out`` defaults to True
    in that staffing). With one executive, the commanding operator is the
    second data-enterer.
    """
    executives = list(executives)
    if not executives:
        raise NoExecutive("at least one executive operator is required")
    if len(executives) > 2:
        raise ValueError("at most two executive operators")
    commanding = Operator(commanding.operator_id, Role.COMMANDING)
    executives = [Operator(e.operator_id, Role.EXECUTIVE) for e in executives]
    ids = [commanding.operator_id] + [e.operator_id for e in executives]
    if len(set(ids)) != len(ids):
        raise DuplicateOperator(f"operator ids must be distinct: {ids}")
    if override_budget < 0:
        raise ValueError("override budget must be >= 0")
    if log is None:
        log = CqiLog(pump_id)
    elif log.pump_id != pump_id:
        raise ValueError("one CQI log per pump")
    if clock is None:
        clock = SimClock(max(0.0, log.last_timestamp) if len(log) else 0.0)
    if require_read_out is None:
        require_read_out = len(executives) == 2
    if episode_id is None:
        episode_id = f"{pump_id}-E{next(_episode_ids):06d}"
    ep = Episode(episode_id, pump_id, commanding, executives, log=log, clock=clock,
                 library=library, require_read_out=require_read_out,
                 allow_no_library=allow_no_library, override_budget=override_budget)
    ep._log(CqiKind.EPISODE_OPENED, tuple(ids), entering=list(ep.entering_pair),
            signers=sorted(ep.required_signers), commanding=commanding.operator_id,
            library_version=None if library is None else library.version,
            library_digest=None if library is None else library.digest)
    return ep


# functional aliases
submit_entry = Episode.submit_entry
compare_entries = Episode.compare_entries
request_override = Episode.request_override
approve_override = Episode.approve_override
decline_override = Episode.decline_override
vote_abort = Episode.vote_abort
acknowledge_alarm = Episode.acknowledge_alarm
read_out = Episode.read_out
review = Episode.review
restart = Episode.restart
