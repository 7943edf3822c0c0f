from dataclasses import replace

import pytest

from infusion_concurrence import AlarmKind, FaultTrigger, EpisodeState, Operator, Pump, new_episode
from infusion_concurrence.audit import CqiKind
from infusion_concurrence.errors import (
    DuplicateAck,
    DuplicateOperator,
    DuplicateSubmission,
    HardLimitNotOverridable,
    NoExecutive,
    NotAnEnteringOperator,
    ReadOutRequired,
    UnknownAlarm,
    UnknownOperator,
    WrongState,
)

from conftest import C, E1, E2, concurred, open_episode

S = EpisodeState


class TestNewEpisode:
    def test_two_executives_enter(self):
        ep = new_episode("P1", C, [E1, E2])
        assert set(ep.entering_pair) == {"E1", "E2"}
        assert ep.state is S.AWAITING_ENTRIES
        assert ep.log.events[0].kind == CqiKind.EPISODE_OPENED

    def test_one_executive_pairs_with_commanding(self):
        ep = new_episode("P1", C, [E1])
        assert set(ep.entering_pair) == {"E1", "C"}
        assert not ep.require_read_out

    def test_duplicate_operator(self):
        with pytest.raises(DuplicateOperator):
            new_episode("P1", C, [E1, E1])
        with pytest.raises(DuplicateOperator):
            new_episode("P1", Operator("E1"), [E1])

    def test_no_executive(self):
        with pytest.raises(NoExecutive):
            new_episode("P1", C, [])


class TestSubmitEntry:
    def test_first_then_second(self, program):
        ep = open_episode()
        ep.submit_entry(E1, program)
        assert ep.state is S.AWAITING_ENTRIES
        ep.submit_entry(E2, program)
        assert ep.state is S.COMPARING

    def test_duplicate_submission(self, program):
        ep = open_episode()
        ep.submit_entry(E1, program)
        with pytest.raises(DuplicateSubmission):
            ep.submit_entry(E1, program)

    def test_commanding_cannot_enter_with_two_executives(self, program):
        ep = open_episode()
        with pytest.raises(NotAnEnteringOperator):
            ep.submit_entry(C, program)
        with pytest.raises(NotAnEnteringOperator):
            ep.submit_entry("stranger", program)

    def test_read_out_required(self, program):
        ep = new_episode("P1", C, [E1, E2])
        with pytest.raises(ReadOutRequired):
            ep.submit_entry(E1, program)
        ep.read_out(C)
        ep.submit_entry(E1, program)

    def test_read_out_can_be_disabled(self, program):
        ep = new_episode("P1", C, [E1, E2], require_read_out=False)
        ep.submit_entry(E1, program)

    def test_wrong_state(self, library, program):
        ep = concurred(library, program)
        with pytest.raises(WrongState):
            ep.submit_entry(E1, program)

    def test_event_reveals_only_metadata(self, program):
        ep = open_episode()
        ep.submit_entry(E1, program)
        ev = ep.log.events[-1]
        assert ev.kind == CqiKind.ENTRY_SEALED
        assert ev.operator_ids == ("E1",)
        assert set(ev.payload) == {"state"}

    def test_entries_not_exposed(self, program):
        ep = open_episode()
        ep.submit_entry(E1, program)
        assert ep.program is None
        assert ep.actuated_program is None


class TestCompare:
    def test_identical(self, library, program):
        ep = concurred(library, program)
        assert ep.state is S.DERS_REVIEW
        assert ep.program == program.canonical()

    def test_double_bounce_mismatch(self, program):
        ep = open_episode()
        ep.submit_entry(E1, replace(program, dose_value=12.5))
        ep.submit_entry(E2, replace(program, dose_value=125.0))
        res = ep.compare_entries()
        assert not res.concurred and res.fields == ("dose_value",)
        assert ep.state is S.MISMATCH
        assert ep.log.events[-1].payload["fields"] == ["dose_value"]

    def test_patient_mismatch(self, program):
        ep = open_episode()
        ep.submit_entry(E1, program)
        ep.submit_entry(E2, replace(program, patient_id="PT2"))
        assert ep.compare_entries().fields == ("patient_id",)

    def test_equivalent_units_concur_with_library(self, library, program):
        ep = open_episode(library)
        ep.submit_entry(E1, program)  # 2.5 mg/kg/h at 70 kg
        ep.submit_entry(E2, replace(program, dose_value=175.0, dose_unit="mg_per_h"))
        assert ep.compare_entries().concurred

    def test_rounding_to_six_figures(self, program):
        ep = open_episode()
        ep.submit_entry(E1, program)
        ep.submit_entry(E2, replace(program, dose_value=2.5000001))
        assert ep.compare_entries().concurred

    def test_wrong_state(self):
        with pytest.raises(WrongState):
            open_episode().compare_entries()

    def test_restart_after_mismatch(self, program):
        ep = open_episode()
        ep.submit_entry(E1, program)
        ep.submit_entry(E2, replace(program, dose_value=25.0))
        ep.compare_entries()
        ep.restart()
        assert ep.state is S.AWAITING_ENTRIES
        with pytest.raises(ReadOutRequired):
            ep.submit_entry(E1, program)
        ep.read_out(C)
        ep.submit_entry(E1, program)
        ep.submit_entry(E2, program)
        assert ep.compare_entries().concurred


class TestReviewAndOverride:
    def test_pass_goes_ready(self, library, program):
        ep = concurred(library, program)
        assert ep.review().is_pass
        assert ep.state is S.READY_TO_ACTUATE

    def test_soft_needs_both(self, library, program):
        ep = concurred(library, replace(program, dose_value=6.0))
        ep.review()
        assert ep.state is S.DERS_REVIEW
        ep.request_override(E1)
        assert ep.state is S.OVERRIDE_PENDING
        ep.approve_override(E2)
        assert ep.state is S.READY_TO_ACTUATE
        assert ep.override_count == 1
        ev = [e for e in ep.log.events if e.kind == CqiKind.OVERRIDE_APPROVED]
        assert len(ev) == 1 and set(ev[0].operator_ids) == {"E1", "E2"}

    def test_single_approval_insufficient(self, library, program):
        ep = concurred(library, replace(program, dose_value=6.0))
        ep.review()
        ep.request_override(E1)
        ep.approve_override(E1)
        assert ep.state is S.OVERRIDE_PENDING

    def test_commanding_cannot_approve_in_two_exec(self, library, program):
        ep = concurred(library, replace(program, dose_value=6.0))
        ep.review()
        ep.request_override(E1)
        with pytest.raises(NotAnEnteringOperator):
            ep.approve_override(C)

    def test_hard_not_overridable(self, library, program):
        ep = concurred(library, replace(program, dose_value=9.0))
        ep.review()
        assert ep.state is S.BLOCKED
        for op in (E1, E2, C):
            with pytest.raises(HardLimitNotOverridable):
                ep.request_override(op)
            with pytest.raises(HardLimitNotOverridable):
                ep.approve_override(op)
        assert ep.state is S.BLOCKED

    def test_pass_cannot_be_overridden(self, library, program):
        ep = concurred(library, program)
        ep.review()
        with pytest.raises(WrongState):
            ep.request_override(E1)

    def test_decline_blocks(self, library, program):
        ep = concurred(library, replace(program, dose_value=6.0))
        ep.review()
        ep.decline_override(E2)
        assert ep.state is S.BLOCKED

    def test_missing_entry_blocks(self, library, program):
        ep = concurred(library, replace(program, care_area="Oncology"))
        assert ep.review() is None
        assert ep.state is S.BLOCKED
        assert ep.log.events[-1].payload["verdict"] == "EntryNotFound"

    def test_no_library_mode_is_logged(self, library, program):
        ep = concurred(library, replace(program, care_area="Oncology"), allow_no_library=True)
        ep.review()
        assert ep.state is S.READY_TO_ACTUATE
        assert ep.log.events[-1].kind == CqiKind.NO_LIBRARY_MODE

    def test_budget_warning(self, library, program):
        ep = concurred(library, replace(program, dose_value=6.0), override_budget=0)
        ep.review()
        ep.request_override(E1)
        ep.approve_override(E2)
        assert ep.override_count == 1
        assert ep.state is S.ALARM_PENDING
        (alarm,) = ep.open_alarms
        assert alarm.kind is AlarmKind.OVERRIDE_BUDGET_EXCEEDED
        assert not alarm.clinically_significant
        assert any(e.kind == CqiKind.OVERRIDE_BUDGET_WARNING for e in ep.log.events)
        ep.acknowledge_alarm(alarm.alarm_id, E1)
        assert ep.state is S.READY_TO_ACTUATE

    def test_within_budget_no_warning(self, library, program):
        ep = concurred(library, replace(program, dose_value=6.0), override_budget=1)
        ep.review()
        ep.request_override(E1)
        ep.approve_override(E2)
        assert ep.state is S.READY_TO_ACTUATE
        assert not any(e.kind == CqiKind.OVERRIDE_BUDGET_WARNING for e in ep.log.events)


class TestAbort:
    def _running(self, library, program):
        ep = concurred(library, program)
        ep.review()
        pump = Pump("P1")
        pump.arm(ep)
        return ep, pump

    def test_two_votes_abort_and_stop(self, library, program):
        ep, pump = self._running(library, program)
        ep.vote_abort(E1)
        assert ep.state is S.RUNNING
        ep.vote_abort(E2)
        assert ep.state is S.ABORTED
        assert pump.state.value == "Stopped"

    def test_single_vote(self, library, program):
        ep, _ = self._running(library, program)
        ep.vote_abort(C)
        assert ep.state is S.RUNNING
        assert ep.abort_votes == {"C"}

    def test_repeat_vote_does_not_count_twice(self, library, program):
        ep, _ = self._running(library, program)
        ep.vote_abort(E1)
        ep.vote_abort(E1)
        assert ep.state is S.RUNNING

    def test_unknown_operator(self, library, program):
        ep, _ = self._running(library, program)
        with pytest.raises(UnknownOperator):
            ep.vote_abort("X9")

    def test_pre_actuation_abort(self, program):
        ep = open_episode()
        ep.vote_abort(E1)
        ep.vote_abort(C)
        assert ep.state is S.ABORTED
        with pytest.raises(WrongState):
            ep.submit_entry(E1, program)

    def test_signed_off_is_terminal(self, library, program):
        from infusion_concurrence import build_transcript, sign

        ep, pump = self._running(library, program)
        pump.step(ep, 10.0)
        t = build_transcript(ep.log, ep.episode_id)
        for op in (C, E1, E2):
            t = sign(t, op, ep)
        assert ep.state is S.SIGNED_OFF
        with pytest.raises(WrongState):
            ep.vote_abort(E1)


class TestAlarms:
    def _pending(self, library, program, significant=True):
        ep = concurred(library, program)
        ep.review()
        pump = Pump("P1")
        pump.arm(ep)
        (alarm,) = pump.step(ep, 0.1, [FaultTrigger(AlarmKind.OCCLUSION, significant)])
        return ep, pump, alarm

    def test_significant_needs_two(self, library, program):
        ep, pump, alarm = self._pending(library, program)
        ep.acknowledge_alarm(alarm.alarm_id, E1)
        assert ep.state is S.ALARM_PENDING
        ep.acknowledge_alarm(alarm.alarm_id, E2)
        assert ep.state is S.RUNNING
        pump.resume(ep)
        assert pump.state.value == "Infusing"

    def test_non_significant_needs_one(self, library, program):
        ep, _, alarm = self._pending(library, program, significant=False)
        ep.acknowledge_alarm(alarm.alarm_id, C)
        assert ep.state is S.RUNNING

    def test_duplicate_ack(self, library, program):
        ep, _, alarm = self._pending(library, program)
        ep.acknowledge_alarm(alarm.alarm_id, E1)
        with pytest.raises(DuplicateAck):
            ep.acknowledge_alarm(alarm.alarm_id, E1)

    def test_unknown_alarm(self, library, program):
        ep, _, _ = self._pending(library, program)
        with pytest.raises(UnknownAlarm):
            ep.acknowledge_alarm("nope", E1)

    def test_ack_outside_alarm_state(self, library, program):
        ep = concurred(library, program)
        with pytest.raises(WrongState):
            ep.acknowledge_alarm("A", E1)

    def test_acks_logged_with_identity(self, library, program):
        ep, _, alarm = self._pending(library, program)
        ep.acknowledge_alarm(alarm.alarm_id, E2)
        ev = ep.log.events[-1]
        assert ev.kind == CqiKind.ACK and ev.operator_ids == ("E2",)
        assert alarm.acks == [("E2", ep.clock.now)]


def test_independence_of_submission_order(program):
    def run(order):
        ep = new_episode("P1", C, [E1, E2], episode_id="EP", require_read_out=False)
        receipts = {}
        events = {}
        for op in order:
            receipts[op.operator_id] = ep.submit_entry(op, program)
            ev = ep.log.events[-1]
            events[op.operator_id] = (ev.kind, ev.operator_ids, ev.payload, ev.timestamp)
        return receipts, events

    assert run([E1, E2]) == run([E2, E1])
