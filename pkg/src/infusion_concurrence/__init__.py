"""Dual-operator concurrence protocol core and Monte Carlo simulator for smart infusion pumps."""

from .alarms import AlarmEvent, AlarmKind, FaultTrigger
from .audit import (
    CqiEvent,
    CqiKind,
    CqiLog,
    SignOffTranscript,
    SimClock,
    analyze,
    build_transcript,
    check_log_invariants,
    export_cqi,
    import_cqi,
    record,
    render_printout,
    sign,
)
from .concurrence import (
    Episode,
    EpisodeState,
    Operator,
    Role,
    acknowledge_alarm,
    approve_override,
    compare_entries,
    new_episode,
    request_override,
    submit_entry,
    vote_abort,
)
from .corruption import CorruptionKind, OperatorModel, corrupt_entry
from .drug_library import (
    DersVerdict,
    DrugLibrary,
    DrugLibraryEntry,
    LimitBand,
    VerdictKind,
    check_program,
    lookup,
    parse_library,
)
from .oracle import oracle_single_probability, oracle_undetected_probability
from .program import DosingUnit, InfusionProgram
from .pump import Pump, PumpState, arm, step, stop
from .simulator import (
    MonteCarloReport,
    Scenario,
    TrialOutcome,
    load_scenario,
    miss_probability,
    run_monte_carlo,
    run_trial,
)

__version__ = "0.1.0"
