"""Random operation sequences against one episode and pump.

A small shadow model, kept from the harness's own view of what succeeded,
decides whether each actuation was legitimate; it never reads the
episode's private state.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from infusion_concurrence import (
    AlarmEvent,
    AlarmKind,
    EpisodeState,
    FaultTrigger,
    InfusionProgram,
    Operator,
    Pump,
    PumpState,
    Role,
    VerdictKind,
    build_transcript,
    check_program,
    lookup,
    new_episode,
    sign,
)
from infusion_concurrence.concurrence import ABSORBING
from infusion_concurrence.drug_library import normalized_dose
from infusion_concurrence.errors import DersError, EntryNotFound, InfusionError

S = EpisodeState
ALL_ACTIONS = ["read", "submit", "compare", "review", "restart", "req", "approve", "decline", "arm",
               "step", "fault", "ack", "resume", "abort", "stop", "sign", "raise"]
# actions that usually make progress from each state; mixed with uniform picks
LIKELY = {
    S.AWAITING_ENTRIES: ["read", "submit", "submit"],
    S.COMPARING: ["compare"],
    S.MISMATCH: ["restart"],
    S.DERS_REVIEW: ["review", "req", "req", "decline"],
    S.OVERRIDE_PENDING: ["approve", "approve", "decline"],
    S.READY_TO_ACTUATE: ["arm"],
    S.RUNNING: ["step", "step", "fault", "abort", "stop"],
    S.ALARM_PENDING: ["ack", "ack", "resume", "abort"],
    S.BLOCKED: ["restart", "sign"],
    S.SIGN_OFF_PENDING: ["sign"],
    S.ABORTED: ["sign"],
}
FAULT_KINDS = [k for k in AlarmKind if k not in (AlarmKind.SOFT_LIMIT, AlarmKind.HARD_LIMIT)]


def program_pool(rng: random.Random) -> list[InfusionProgram]:
    """A passing program plus soft, hard, zero, unknown-drug and equivalent-unit variants."""
    base = InfusionProgram("PT1", "D1", "ICU", rng.choice([1.5, 2.5, 3.0]), "mg_per_kg_per_h",
                           rng.choice([50.0, 175.0, 400.0]), rng.choice([0.5, 5.0, 50.0]), 70.0)
    return [
        base,
        replace(base, dose_value=rng.choice([0.75, 6.0, 7.5])),       # soft
        replace(base, dose_value=rng.choice([0.1, 8.5, 12.5, 25.0])),  # hard
        replace(base, rate_ml_per_h=rng.choice([0.0, 0.5, 1500.0])),    # hard rate
        replace(base, vtbi_ml=0.0),
        replace(base, drug_id="D7"),
        replace(base, patient_weight_kg=None),
        replace(base, dose_value=base.dose_value * 70.0, dose_unit="mg_per_h"),
        replace(base, patient_id="PT2"),
    ]


@dataclass
class Shadow:
    entries: dict = field(default_factory=dict)  # op_id -> program, current round
    approvals: set = field(default_factory=set)


def _shadow_gate_ok(library, shadow: Shadow, pair, program, allow_no_library) -> str | None:
    """None when actuating ``program`` is legitimate, else the reason it is not."""
    if set(shadow.entries) != set(pair) or len(pair) != 2:
        return "actuation without two sealed entries from distinct operators"
    a, b = (shadow.entries[o].canonical() for o in pair)
    if program not in (a, b):
        return "actuated program is not one of the entries"
    same = {k: getattr(a, k) == getattr(b, k) for k in
            ("patient_id", "drug_id", "care_area", "rate_ml_per_h", "vtbi_ml")}
    if not all(same.values()):
        return "entries differ in a non-dose field"
    try:
        entry = lookup(library, program.drug_id, program.care_area)
    except EntryNotFound:
        return None if allow_no_library else "actuation with no library entry"
    try:
        if normalized_dose(entry, a) != normalized_dose(entry, b):
            return "entries differ in dose"
        verdict = check_program(entry, program)
    except DersError:
        return "actuation despite DERS error"
    if program.rate_ml_per_h <= 0 or program.vtbi_ml <= 0:
        return "actuation at zero rate or volume"
    if verdict.kind is VerdictKind.HARD:
        return "hard violation actuated"
    if verdict.kind is VerdictKind.SOFT and shadow.approvals != set(pair):
        return "soft violation actuated without both approvals"
    return None


def run_sequence(library, seed: int, length: int = 30, coverage: set | None = None) -> list[str]:
    """Run one random sequence; return the list of violated properties.

    States the episode visited are added to ``coverage`` when given.
    """
    rng = random.Random(seed)
    staffing = rng.random() < 0.5
    commanding = Operator("C", Role.COMMANDING)
    executives = [Operator("E1"), Operator("E2")] if staffing else [Operator("E1")]
    allow_nl = rng.random() < 0.2
    ep = new_episode("P1", commanding, executives, episode_id=f"F{seed}", library=library,
                     require_read_out=rng.random() < 0.5, allow_no_library=allow_nl,
                     override_budget=rng.randrange(3))
    pump = Pump("P1")
    pool = program_pool(rng)
    people = ["C", "E1", "E2", "X"]
    pair = ep.entering_pair
    shadow = Shadow()
    transcript = None
    problems: list[str] = []
    absorbed = None

    last_prog = None
    for _ in range(length):
        op = rng.choice(pair) if rng.random() < 0.7 else rng.choice(people)
        likely = LIKELY.get(ep.state)
        action = rng.choice(likely if likely and rng.random() < 0.8 else ALL_ACTIONS)
        before = ep.state
        pump_before = pump.state
        try:
            if action == "read":
                ep.read_out(op)
            elif action == "submit":
                prog = last_prog if last_prog is not None and rng.random() < 0.6 else rng.choice(pool)
                ep.submit_entry(op, prog)
                shadow.entries[op] = last_prog = prog
            elif action == "compare":
                if not ep.compare_entries().concurred:
                    shadow.entries.clear()
            elif action == "review":
                ep.review()
            elif action == "restart":
                ep.restart()
                shadow = Shadow()
                last_prog = None
            elif action == "req":
                ep.request_override(op)
                shadow.approvals = {op}
            elif action == "approve":
                ep.approve_override(op)
                shadow.approvals.add(op)
            elif action == "decline":
                ep.decline_override(op)
                shadow.approvals.clear()
            elif action == "arm":
                pump.arm(ep)
            elif action == "step":
                pump.step(ep, rng.choice([0.01, 0.1, 1.0, 10.0]))
            elif action == "fault":
                pump.step(ep, 0.05, [FaultTrigger(rng.choice(FAULT_KINDS), rng.random() < 0.5)])
            elif action == "ack":
                alarms = ep.open_alarms
                alarm_id = rng.choice(alarms).alarm_id if alarms and rng.random() < 0.9 else "bogus"
                ep.acknowledge_alarm(alarm_id, op)
            elif action == "resume":
                pump.resume(ep)
            elif action == "abort":
                ep.vote_abort(op)
            elif action == "stop":
                pump.stop()
            elif action == "sign":
                if transcript is None or rng.random() < 0.3:
                    transcript = build_transcript(ep.log, ep.episode_id)
                transcript = sign(transcript, op, ep)
            elif action == "raise":
                ep.raise_alarm(AlarmEvent(ep.log.next_alarm_id(), rng.choice(FAULT_KINDS),
                                          rng.random() < 0.5, ep.clock.now))
        except (InfusionError, ValueError, TypeError):
            pass

        if coverage is not None:
            coverage.add(ep.state)
        if pump_before is PumpState.IDLE and pump.state is PumpState.INFUSING:
            if before is not S.READY_TO_ACTUATE:
                problems.append(f"armed from {before.value}")
            why = _shadow_gate_ok(library, shadow, pair, pump.program, allow_nl)
            if why:
                problems.append(why)
        if absorbed is not None and ep.state is not absorbed:
            problems.append(f"left absorbing state {absorbed.value} for {ep.state.value}")
        if ep.state in ABSORBING:
            absorbed = ep.state
        if pump.program is not None:
            if abs(pump.infused_ml + pump.remaining_ml - pump.program.vtbi_ml) > 1e-9:
                problems.append("volume not conserved")
        if ep.state is S.SIGNED_OFF:
            by_digest: dict = {}
            for sig in ep.signatures:
                by_digest.setdefault(sig.digest, set()).add(sig.operator_id)
            if not any(ep.required_signers <= ops for ops in by_digest.values()):
                problems.append("signed off without a complete signer set over one digest")

    for e in ep.log.events:
        if e.kind == "OverrideApproved" and (len(set(e.operator_ids)) != 2 or set(e.operator_ids) != set(pair)):
            problems.append("override without both entering operators")
    return problems
