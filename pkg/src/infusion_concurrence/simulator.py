"""Monte Carlo harness: scripted operators driving full episodes.

Every trial draws from its own random streams keyed by (seed, trial index),
so a report depends only on the scenario and seed, never on execution order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from .alarms import AlarmKind, FaultTrigger
from .audit import CqiLog, SimClock, build_transcript, check_log_invariants, sign
from .canonical import canonical_json
from .concurrence import EpisodeState, Operator, Role, new_episode
from .corruption import OperatorModel, corrupt_entry
from .drug_library import DrugLibrary, VerdictKind, check_program, library_from_document, lookup
from .errors import DersError, EntryNotFound, InfusionError, InvalidScenario, InvariantViolation, SpaceTooLarge
from .oracle import DEFAULT_CAP, oracle_single_probability, oracle_undetected_probability
from .program import InfusionProgram
from .pump import Pump, PumpState
from .rng import Stream

# random stream ids within a trial
X_ENTRY, Y_ENTRY, ROUTING, FALSE_ALARMS, ACKS = 1, 2, 3, 4, 5
MAX_STEPS = 1_000_000
PUMP_ID = "P1"


class TrialOutcome(str, Enum):
    COMPLETED_CORRECT = "CompletedCorrect"
    CAUGHT_BY_MISMATCH = "CaughtByMismatch"
    CAUGHT_BY_DERS_HARD = "CaughtByDersHard"
    CAUGHT_BY_SOFT_NO_OVERRIDE = "CaughtBySoftNoOverride"
    UNDETECTED_ERROR_ACTUATED = "UndetectedErrorActuated"
    ABORTED_BY_CONCURRENCE = "AbortedByConcurrence"
    HALTED_NO_LIBRARY_ENTRY = "HaltedNoLibraryEntry"


OUTCOMES = tuple(TrialOutcome)


def miss_probability(base_miss: float, c: float, false_alarms_in_window: int) -> float:
    """Chance a fatigued operator overlooks a significant alarm: clamp(base + c*count, 0, 1)."""
    return min(1.0, max(0.0, base_miss + c * false_alarms_in_window))


@dataclass(frozen=True)
class ScheduledFault:
    t_hours: float
    kind: AlarmKind
    significant: bool = True


@dataclass(frozen=True)
class Scenario:
    library: DrugLibrary
    intended_program: InfusionProgram
    operator_x: OperatorModel
    operator_y: OperatorModel = None
    mode: str = "concurrence"
    staffing: str = "two_executive"
    override_policy: str = "approve_all"
    fault_schedule: tuple[ScheduledFault, ...] = ()
    wrong_pump_routing_p: float = 0.0
    false_alarm_rate: float = 0.0
    false_alarm_kind: AlarmKind = AlarmKind.AIR_IN_LINE
    fatigue_window_hours: Optional[float] = None
    abort_on: tuple[AlarmKind, ...] = ()
    dt_hours: float = 0.25
    allow_no_library: bool = False
    override_budget: int = 3
    deployed: Optional[DrugLibrary] = None
    trials: int = 1
    seed: int = 0
    cqi_export_trials: int = 10

    def __post_init__(self):
        if self.operator_y is None:
            object.__setattr__(self, "operator_y", self.operator_x)
        if self.mode not in ("single", "concurrence"):
            raise InvalidScenario(f"mode must be 'single' or 'concurrence', got {self.mode!r}")
        if self.staffing not in ("two_executive", "one_executive"):
            raise InvalidScenario(f"unknown staffing {self.staffing!r}")
        if self.override_policy not in ("approve_all", "refuse_all"):
            raise InvalidScenario(f"unknown override_policy {self.override_policy!r}")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise InvalidScenario("trials must be >= 1")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**64:
            raise InvalidScenario("seed must be a 64-bit unsigned integer")
        for name in ("wrong_pump_routing_p", "false_alarm_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidScenario(f"{name} must lie in [0, 1]")
        if not (math.isfinite(self.dt_hours) and self.dt_hours > 0):
            raise InvalidScenario("dt_hours must be positive")
        if self.fatigue_window_hours is not None and not self.fatigue_window_hours > 0:
            raise InvalidScenario("fatigue_window_hours must be positive")
        object.__setattr__(self, "fault_schedule",
                           tuple(sorted(self.fault_schedule, key=lambda f: f.t_hours)))
        try:
            self.intended_program.validate()
        except ValueError as exc:
            raise InvalidScenario(f"intended program: {exc}") from None
        try:
            entry = lookup(self.library, self.intended_program.drug_id, self.intended_program.care_area)
            verdict = check_program(entry, self.intended_program)
        except InfusionError as exc:
            raise InvalidScenario(f"intended program fails the library: {exc}") from None
        if verdict.kind is not VerdictKind.PASS:
            raise InvalidScenario(f"intended program must pass DERS, got {verdict.kind.value}")
        steps = self.intended_program.vtbi_ml / (self.intended_program.rate_ml_per_h * self.dt_hours)
        if steps > MAX_STEPS:
            raise InvalidScenario("infusion needs too many steps; raise dt_hours")

    @property
    def deployed_library(self) -> DrugLibrary:
        """The library on the pump; differs from ``library`` when miscalibrated."""
        return self.deployed if self.deployed is not None else self.library

    def routed_program(self) -> InfusionProgram:
        """The neighbouring patient's order that a mis-routed RFID tag delivers."""
        p = self.intended_program
        return replace(p, patient_id=f"{p.patient_id}~neighbour")

    @property
    def downstream_deterministic(self) -> bool:
        # with no faults the episode outcome is a pure function of the two entries
        return not self.fault_schedule and self.false_alarm_rate == 0.0

    def with_overrides(self, *, seed: Optional[int] = None, trials: Optional[int] = None,
                       **kw) -> "Scenario":
        if seed is not None:
            kw["seed"] = seed
        if trials is not None:
            kw["trials"] = trials
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "Scenario":
        if not isinstance(d, dict):
            raise InvalidScenario("scenario must be an object")
        try:
            kw = dict(
                library=_load_library(d["library"], base_dir),
                intended_program=InfusionProgram.from_dict(d["intended_program"]),
                operator_x=OperatorModel.from_dict(d["operator_x"]),
                operator_y=OperatorModel.from_dict(d["operator_y"]) if d.get("operator_y") else None,
                mode=d.get("mode", "concurrence"),
                staffing=d.get("staffing", "two_executive"),
                override_policy=d.get("override_policy", "approve_all"),
                fault_schedule=tuple(
                    ScheduledFault(float(f["t_hours"]), AlarmKind(f["kind"]), bool(f.get("significant", True)))
                    for f in d.get("fault_schedule", [])),
                wrong_pump_routing_p=float(d.get("wrong_pump_routing_p", 0.0)),
                false_alarm_rate=float(d.get("false_alarm_rate", 0.0)),
                false_alarm_kind=AlarmKind(d.get("false_alarm_kind", "AirInLine")),
                fatigue_window_hours=d.get("fatigue_window_hours"),
                abort_on=tuple(AlarmKind(k) for k in d.get("abort_on", [])),
                dt_hours=float(d.get("dt_hours", 0.25)),
                allow_no_library=bool(d.get("allow_no_library", False)),
                override_budget=int(d.get("override_budget", 3)),
                deployed=_load_library(d["deployed_library"], base_dir) if d.get("deployed_library") else None,
                trials=d.get("trials", 1),
                seed=d.get("seed", 0),
                cqi_export_trials=int(d.get("cqi_export_trials", 10)),
            )
        except KeyError as exc:
            raise InvalidScenario(f"scenario missing {exc}") from None
        except (TypeError, ValueError) as exc:
            raise InvalidScenario(str(exc)) from None
        return cls(**kw)


def _load_library(ref, base_dir: Optional[Path]) -> DrugLibrary:
    if isinstance(ref, dict):
        return library_from_document(ref)
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    from .drug_library import parse_library

    return parse_library(path.read_text(encoding="utf-8"))


def load_scenario(path: str | os.PathLike) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidScenario(f"{path}: not valid JSON: {exc}") from None
    return Scenario.from_dict(doc, base_dir=path.parent)


@dataclass
class TrialResult:
    trial_index: int
    outcome: TrialOutcome
    log: Optional[CqiLog] = None
    significant_alarm_misses: int = 0
    false_alarms: int = 0
    actuated_program: Optional[InfusionProgram] = None


def _verdict_outcome(program: InfusionProgram, scenario: Scenario) -> Optional[TrialOutcome]:
    """Single-operator gate: DERS only. None means the program actuates."""
    lib = scenario.deployed_library
    try:
        entry = lookup(lib, program.drug_id, program.care_area)
    except EntryNotFound:
        return None if scenario.allow_no_library else TrialOutcome.HALTED_NO_LIBRARY_ENTRY
    if program.rate_ml_per_h <= 0 or program.vtbi_ml <= 0:
        return TrialOutcome.CAUGHT_BY_DERS_HARD
    try:
        verdict = check_program(entry, program)
    except DersError:
        return TrialOutcome.CAUGHT_BY_DERS_HARD
    if verdict.kind is VerdictKind.HARD:
        return TrialOutcome.CAUGHT_BY_DERS_HARD
    if verdict.kind is VerdictKind.SOFT and scenario.override_policy == "refuse_all":
        return TrialOutcome.CAUGHT_BY_SOFT_NO_OVERRIDE
    return None


def _actuated_outcome(actuated: InfusionProgram, scenario: Scenario) -> TrialOutcome:
    if actuated.canonical() != scenario.intended_program.canonical():
        return TrialOutcome.UNDETECTED_ERROR_ACTUATED
    return TrialOutcome.COMPLETED_CORRECT


def _entries(scenario: Scenario, trial_index: int):
    lib = scenario.deployed_library
    x = corrupt_entry(scenario.operator_x, scenario.intended_program,
                      Stream(scenario.seed, trial_index, X_ENTRY), lib)
    routed = (scenario.wrong_pump_routing_p > 0
              and Stream(scenario.seed, trial_index, ROUTING).random() < scenario.wrong_pump_routing_p)
    if routed:
        x = scenario.routed_program()
    if scenario.mode == "single":
        return x, None
    y = corrupt_entry(scenario.operator_y, scenario.intended_program,
                      Stream(scenario.seed, trial_index, Y_ENTRY), lib)
    return x, y


def run_trial(scenario: Scenario, trial_index: int,
              entries: Optional[tuple[InfusionProgram, Optional[InfusionProgram]]] = None) -> TrialResult:
    """Run one trial end to end and classify it.

    ``entries`` replaces the sampled (x, y) keyed programs, e.g. to force a
    particular pair of slips.
    """
    x, y = entries if entries is not None else _entries(scenario, trial_index)
    if scenario.mode == "single":
        outcome = _verdict_outcome(x, scenario)
        if outcome is not None:
            return TrialResult(trial_index, outcome)
        return TrialResult(trial_index, _actuated_outcome(x, scenario), actuated_program=x)
    return _drive_episode(scenario, trial_index, x, y)


def _drive_episode(scenario: Scenario, trial_index: int, x: InfusionProgram,
                   y: InfusionProgram) -> TrialResult:
    log = CqiLog(PUMP_ID)
    clock = SimClock()
    commanding = Operator("C", Role.COMMANDING)
    if scenario.staffing == "two_executive":
        executives = [Operator("E1"), Operator("E2")]
    else:
        executives = [Operator("E1")]
    ep = new_episode(PUMP_ID, commanding, executives, episode_id=f"T{trial_index:08d}", log=log,
                     clock=clock, library=scenario.deployed_library,
                     allow_no_library=scenario.allow_no_library,
                     override_budget=scenario.override_budget)
    op_x, op_y = ep.entering_pair
    models = {op_x: scenario.operator_x, op_y: scenario.operator_y}
    result = TrialResult(trial_index, TrialOutcome.COMPLETED_CORRECT, log=log)

    if ep.require_read_out:
        ep.read_out(commanding)
    ep.submit_entry(op_x, x)
    ep.submit_entry(op_y, y)
    if not ep.compare_entries().concurred:
        result.outcome = TrialOutcome.CAUGHT_BY_MISMATCH
        return _finish(result, ep, None)

    verdict = ep.review()
    if ep.state is EpisodeState.BLOCKED:
        if verdict is None and not _entry_exists(scenario, ep.program):
            result.outcome = TrialOutcome.HALTED_NO_LIBRARY_ENTRY
        else:
            result.outcome = TrialOutcome.CAUGHT_BY_DERS_HARD
        return _finish(result, ep, None)
    if ep.state is EpisodeState.DERS_REVIEW:
        if scenario.override_policy == "refuse_all":
            ep.decline_override(op_x)
            result.outcome = TrialOutcome.CAUGHT_BY_SOFT_NO_OVERRIDE
            return _finish(result, ep, None)
        ep.request_override(op_x)
        ep.approve_override(op_y)
    if ep.state is EpisodeState.ALARM_PENDING:
        for alarm in ep.open_alarms:
            ep.acknowledge_alarm(alarm.alarm_id, op_x)

    pump = Pump(PUMP_ID)
    pump.arm(ep)
    result.actuated_program = pump.program
    _infuse(scenario, trial_index, ep, pump, models, result)

    if ep.state is EpisodeState.ABORTED:
        actuated = _actuated_outcome(result.actuated_program, scenario)
        result.outcome = (actuated if actuated is TrialOutcome.UNDETECTED_ERROR_ACTUATED
                          else TrialOutcome.ABORTED_BY_CONCURRENCE)
    else:
        result.outcome = _actuated_outcome(result.actuated_program, scenario)
    return _finish(result, ep, pump)


def _entry_exists(scenario: Scenario, program: InfusionProgram) -> bool:
    try:
        lookup(scenario.deployed_library, program.drug_id, program.care_area)
        return True
    except EntryNotFound:
        return False


def _infuse(scenario, trial_index, ep, pump, models, result) -> None:
    pending = list(scenario.fault_schedule)
    false_stream = Stream(scenario.seed, trial_index, FALSE_ALARMS)
    ack_stream = Stream(scenario.seed, trial_index, ACKS)
    false_times: list[float] = []
    op_x, op_y = ep.entering_pair
    dt = scenario.dt_hours
    for _ in range(MAX_STEPS):
        if pump.state is not PumpState.INFUSING:
            break
        now = ep.clock.now
        rate = pump.program.rate_ml_per_h
        if scenario.false_alarm_rate == 0 and not pending and rate > 0:
            # nothing random can happen any more; run to completion in one step
            step = max(pump.remaining_ml / rate, 1e-9)
        else:
            step = dt
        due = [f for f in pending if f.t_hours <= now + step]
        pending = pending[len(due):]
        faults = [FaultTrigger(f.kind, f.significant) for f in due]
        if scenario.false_alarm_rate > 0 and false_stream.random() < scenario.false_alarm_rate:
            faults.append(FaultTrigger(scenario.false_alarm_kind, False))
        alarms = pump.step(ep, step, faults)
        if not alarms:
            continue
        result.false_alarms += sum(1 for f in faults if not f.clinically_significant)
        false_times.extend(ep.clock.now for f in faults if not f.clinically_significant)
        if any(a.kind in scenario.abort_on for a in alarms):
            ep.vote_abort(op_x)
            ep.vote_abort(op_y)
            return
        window = scenario.fatigue_window_hours
        for alarm in alarms:
            if not alarm.clinically_significant:
                ep.acknowledge_alarm(alarm.alarm_id, op_x)
                continue
            recent = sum(1 for t in false_times if window is None or ep.clock.now - t <= window)
            for op in (op_x, op_y):
                m = models[op]
                if ack_stream.random() < miss_probability(m.base_miss, m.fatigue_c, recent):
                    # overlooked at first; the re-announced alarm is then acknowledged
                    result.significant_alarm_misses += 1
                ep.acknowledge_alarm(alarm.alarm_id, op)
        pump.resume(ep)
    else:
        raise InvariantViolation("infusion did not terminate")


def _finish(result: TrialResult, ep, pump: Optional[Pump]) -> TrialResult:
    problems = check_log_invariants(ep.log)
    if pump is not None and pump.program is not None:
        if abs(pump.infused_ml + pump.remaining_ml - pump.program.vtbi_ml) > 1e-9:
            problems.append("volume not conserved")
    if pump is None and result.outcome is TrialOutcome.UNDETECTED_ERROR_ACTUATED:
        problems.append("undetected error reported without actuation")
    if problems:
        raise InvariantViolation(f"trial {result.trial_index}: {problems}")
    if ep.state in (EpisodeState.SIGN_OFF_PENDING, EpisodeState.ABORTED, EpisodeState.BLOCKED):
        transcript = build_transcript(ep.log, ep.episode_id)
        for op_id in sorted(transcript.required_signers):
            transcript = sign(transcript, op_id, ep)
    return result


# -- aggregation ---------------------------------------------------------------


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% Wilson score interval; always contains k/n."""
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, min(p, centre - half)), min(1.0, max(p, centre + half))


@dataclass
class MonteCarloReport:
    mode: str
    seed: int
    trials: int
    counts: dict[str, int]
    significant_alarm_misses: int = 0
    false_alarms: int = 0
    oracle: dict[str, Optional[float]] = field(default_factory=dict)
    outcomes: Optional[list[str]] = field(default=None, repr=False)

    def rate(self, outcome: TrialOutcome | str) -> float:
        return self.counts[TrialOutcome(outcome).value] / self.trials

    @property
    def rates(self) -> dict[str, float]:
        return {k: v / self.trials for k, v in self.counts.items()}

    @property
    def ci95(self) -> dict[str, tuple[float, float]]:
        return {k: wilson_interval(v, self.trials) for k, v in self.counts.items()}

    @property
    def mean_significant_alarm_misses(self) -> float:
        return self.significant_alarm_misses / self.trials

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "trials": self.trials,
            "counts": dict(self.counts),
            "rates": self.rates,
            "ci95": {k: list(v) for k, v in self.ci95.items()},
            "oracle": dict(self.oracle),
            "significant_alarm_misses": self.significant_alarm_misses,
            "mean_significant_alarm_misses": self.mean_significant_alarm_misses,
            "false_alarms": self.false_alarms,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def outcomes_csv(self) -> str:
        if self.outcomes is None:
            raise ValueError("per-trial outcomes were not collected")
        lines = ["trial_index,outcome"]
        lines.extend(f"{i},{o}" for i, o in enumerate(self.outcomes))
        return "\n".join(lines) + "\n"


def oracle_values(scenario: Scenario, cap: int = DEFAULT_CAP) -> dict[str, Optional[float]]:
    out: dict[str, Optional[float]] = {
        "bound_px_py": scenario.operator_x.p_error * scenario.operator_y.p_error,
        "p_x": scenario.operator_x.p_error,
    }
    try:
        out["undetected_concurrence"] = oracle_undetected_probability(scenario, cap)
        out["undetected_single"] = oracle_single_probability(scenario, cap)
    except SpaceTooLarge:
        out["undetected_concurrence"] = out["undetected_single"] = None
    return out


def run_monte_carlo(scenario: Scenario, *, collect_outcomes: bool = False) -> MonteCarloReport:
    """Aggregate ``run_trial`` over trial indices 0..trials-1.

    When nothing after data entry is random, trial outcomes are memoized on
    the pair of keyed programs; the episode still runs in full the first time
    each pair is seen.
    """
    counts = {o.value: 0 for o in OUTCOMES}
    outcomes: Optional[list[str]] = [] if collect_outcomes else None
    misses = false_alarms = 0
    cache: dict = {}
    memo = scenario.downstream_deterministic
    for i in range(scenario.trials):
        if memo:
            key = _entries(scenario, i)
            hit = cache.get(key)
            if hit is None:
                if scenario.mode == "single":
                    hit = run_trial(scenario, i).outcome
                else:
                    hit = _drive_episode(scenario, i, *key).outcome
                cache[key] = hit
            outcome = hit
        else:
            r = run_trial(scenario, i)
            outcome = r.outcome
            misses += r.significant_alarm_misses
            false_alarms += r.false_alarms
        counts[outcome.value] += 1
        if outcomes is not None:
            outcomes.append(outcome.value)
    return MonteCarloReport(scenario.mode, scenario.seed, scenario.trials, counts,
                            misses, false_alarms, oracle_values(scenario), outcomes)


def trial_logs(scenario: Scenario, n: Optional[int] = None) -> list[CqiLog]:
    """Full CQI logs of the first ``n`` trials (concurrence mode only)."""
    if scenario.mode != "concurrence":
        return []
    n = scenario.cqi_export_trials if n is None else n
    return [run_trial(scenario, i).log for i in range(min(n, scenario.trials))]

