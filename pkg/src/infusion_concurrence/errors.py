"""Exception hierarchy.

Every refusal the protocol makes is a distinct exception type so callers
(and the fuzzer) can tell a legitimate refusal from a bug.
"""

from __future__ import annotations


class InfusionError(Exception):
    """Base class for all package errors."""


# -- drug library / DERS -----------------------------------------------------


class LibraryError(InfusionError):
    pass


class MalformedDocument(LibraryError):
    pass


class LimitOrderViolation(LibraryError):
    def __init__(self, key, detail: str = ""):
        self.key = key
        self.detail = detail
        where = f" for {key[0]}/{key[1]}" if key else ""
        super().__init__(f"limit order violated{where}" + (f": {detail}" if detail else ""))


class DuplicateEntry(LibraryError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"duplicate library entry {key}")


class NonPositiveConcentration(LibraryError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"concentration must be > 0 for {key}")


class EntryNotFound(LibraryError):
    def __init__(self, drug_id, care_area):
        self.key = (drug_id, care_area)
        super().__init__(f"no library entry for drug {drug_id!r} in care area {care_area!r}")


class DersError(InfusionError):
    pass


class MissingWeight(DersError):
    pass


class UnitMismatch(DersError):
    pass


# -- protocol ----------------------------------------------------------------


class ProtocolError(InfusionError):
    """Refusal by the concurrence state machine."""


class WrongState(ProtocolError):
    pass


class DuplicateOperator(ProtocolError):
    pass


class NoExecutive(ProtocolError):
    pass


class NotAnEnteringOperator(ProtocolError):
    pass


class DuplicateSubmission(ProtocolError):
    pass


class ReadOutRequired(ProtocolError):
    pass


class HardLimitNotOverridable(ProtocolError):
    pass


class UnknownOperator(ProtocolError):
    pass


class UnknownAlarm(ProtocolError):
    pass


class DuplicateAck(ProtocolError):
    pass


# -- pump --------------------------------------------------------------------


class PumpError(InfusionError):
    pass


class NotConcurred(PumpError):
    """Actuation refused: the episode has not reached ReadyToActuate."""


class PumpBusy(PumpError):
    pass


class NotRunning(PumpError):
    pass


class PumpWrongState(PumpError, WrongState):
    pass


# -- audit -------------------------------------------------------------------


class AuditError(InfusionError):
    pass


class TimestampRegression(AuditError):
    pass


class MalformedEvent(AuditError):
    pass


class UnknownEpisode(AuditError):
    pass


class EpisodeStillActive(AuditError):
    pass


class DuplicateSignature(AuditError):
    pass


class IncompleteSignatures(AuditError):
    pass


# -- simulation --------------------------------------------------------------


class SimulationError(InfusionError):
    pass


class NoCorruptionApplicable(SimulationError):
    pass


class InvalidScenario(SimulationError):
    pass


class SpaceTooLarge(SimulationError):
    pass


class InvariantViolation(SimulationError):
    """A safety property failed during a trial; always a bug."""
