"""Simulated infusion pump, gated by a concurrence episode."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .alarms import AlarmEvent, FaultTrigger
from .audit import CqiKind
from .concurrence import Episode, EpisodeState
from .errors import NotConcurred, NotRunning, PumpBusy, PumpWrongState
from .program import InfusionProgram

_EPS = 1e-12


class PumpState(str, Enum):
    IDLE = "Idle"
    INFUSING = "Infusing"
    PAUSED = "Paused"
    STOPPED = "Stopped"
    DONE = "Done"


@dataclass
class Pump:
    pump_id: str
    state: PumpState = PumpState.IDLE
    program: Optional[InfusionProgram] = None
    infused_ml: float = 0.0
    remaining_ml: float = 0.0
    open_alarms: list[AlarmEvent] = field(default_factory=list)
    episode: Optional[Episode] = field(default=None, repr=False)

    def arm(self, episode: Episode) -> None:
        """Load the concurred program and start infusing.

        Refuses with NotConcurred unless the episode is ReadyToActuate for this pump.
        """
        if episode.state is not EpisodeState.READY_TO_ACTUATE:
            raise NotConcurred(f"episode {episode.episode_id} is {episode.state.value}, not ReadyToActuate")
        if episode.pump_id != self.pump_id:
            raise NotConcurred(f"episode {episode.episode_id} belongs to pump {episode.pump_id}")
        if self.state is not PumpState.IDLE:
            raise PumpBusy(f"pump {self.pump_id} is {self.state.value}")
        program = episode.program
        episode._mark_running(self)
        self.episode = episode
        self.program = program
        self.infused_ml = 0.0
        self.remaining_ml = float(program.vtbi_ml)
        self.open_alarms = []
        self.state = PumpState.INFUSING
        episode._log(CqiKind.ACTUATION, episode.entering_pair, program=program.to_dict(),
                     override_count=episode.override_count, no_library=episode.no_library)

    def _check_bound(self, episode: Episode) -> None:
        if episode is not self.episode:
            raise NotRunning(f"pump {self.pump_id} is not bound to episode {episode.episode_id}")

    def step(self, episode: Episode, dt: float, faults: Iterable[FaultTrigger] = ()) -> list[AlarmEvent]:
        """Advance simulated time by ``dt`` hours.

        Injected faults pause the pump (nothing is delivered in that step) and
        put the episode in AlarmPending. Otherwise volume is delivered at the
        programmed rate, clamped at the VTBI.
        """
        if not dt > 0:
            raise ValueError("dt must be positive")
        self._check_bound(episode)
        if self.state is not PumpState.INFUSING or episode.state is not EpisodeState.RUNNING:
            raise NotRunning(f"pump {self.pump_id} is {self.state.value}, episode {episode.state.value}")
        faults = list(faults)
        episode.clock.advance(dt)
        if faults:
            raised = []
            for f in faults:
                f = f if isinstance(f, FaultTrigger) else FaultTrigger(f)
                alarm = AlarmEvent(episode.log.next_alarm_id(), f.kind, f.clinically_significant,
                                   episode.clock.now)
                episode.raise_alarm(alarm)
                self.open_alarms.append(alarm)
                raised.append(alarm)
            self.state = PumpState.PAUSED
            return raised
        delivered = min(self.program.rate_ml_per_h * dt, self.remaining_ml)
        self.infused_ml += delivered
        self.remaining_ml -= delivered
        if self.remaining_ml <= _EPS:
            self.infused_ml = float(self.program.vtbi_ml)
            self.remaining_ml = 0.0
            self.state = PumpState.DONE
            episode._mark_complete()
        return []

    def resume(self, episode: Episode) -> None:
        """Restart a paused pump once the episode's alarms are acknowledged."""
        self._check_bound(episode)
        if self.state is not PumpState.PAUSED:
            raise PumpWrongState(f"pump {self.pump_id} is {self.state.value}")
        if episode.state is not EpisodeState.RUNNING:
            raise NotRunning(f"episode {episode.episode_id} is {episode.state.value}")
        self.open_alarms = [a for a in self.open_alarms if not a.satisfied]
        self.state = PumpState.INFUSING
        episode._log(CqiKind.RESUME)

    def stop(self) -> None:
        if self.state not in (PumpState.INFUSING, PumpState.PAUSED):
            raise PumpWrongState(f"pump {self.pump_id} is {self.state.value}")
        self.state = PumpState.STOPPED
        if self.episode is not None:
            self.episode._log(CqiKind.STOP, infused_ml=self.infused_ml, remaining_ml=self.remaining_ml)

    def reset(self) -> None:
        """Unload a finished or stopped pump so it can take a new episode."""
        if self.state not in (PumpState.DONE, PumpState.STOPPED, PumpState.IDLE):
            raise PumpBusy(f"pump {self.pump_id} is {self.state.value}")
        self.state = PumpState.IDLE
        self.program = None
        self.episode = None
        self.infused_ml = self.remaining_ml = 0.0
        self.open_alarms = []


def arm(pump: Pump, episode: Episode) -> None:
    pump.arm(episode)


def step(pump: Pump, episode: Episode, dt: float, faults: Iterable[FaultTrigger] = ()) -> list[AlarmEvent]:
    return pump.step(episode, dt, faults)


def stop(pump: Pump) -> None:
    pump.stop()
