"""Switched-DPLL simulation, trajectory detectors and the figure of merit."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .lyapunov import BBPD_FORM, CQLF_FORM, MlfReport, SwitchOnTrace, evaluate, mlf_check
from .model import (
    CircuitParams,
    DcoDisturbance,
    FsmState,
    LoopGains,
    Mode,
    PllState,
    in_limit_cycle_region,
    sigma,
    step_bbpd,
    step_fsm_differentiator,
    step_fsm_integrator,
    step_lti,
)


@dataclass(frozen=True)
class SwitchThresholds:
    phi_err_1: float = 1.0
    phi_err_2: float = 0.01

    def validate(self) -> None:
        if not 0 < self.phi_err_2 < self.phi_err_1:
            raise ValueError(f"thresholds need 0 < phi_err_2 < phi_err_1, got {self}")

    @classmethod
    def from_circuit(cls, circuit: CircuitParams) -> "SwitchThresholds":
        """Unrounded thresholds from the TDC resolutions (about 1.049 and 0.0126 rad)."""
        return cls(circuit.phase_threshold(circuit.dt_tdc_counter), circuit.phase_threshold(circuit.dt_tdc_delayline))


@dataclass(frozen=True)
class LoopConfig:
    circuit: CircuitParams = field(default_factory=CircuitParams)
    gains: LoopGains = field(default_factory=LoopGains)


class Step(Enum):
    LTI1 = "LTI1"
    LTI2 = "LTI2"
    FSM_INT = "FSM_INT"
    FSM_DIFF = "FSM_DIFF"
    BBPD = "BBPD"


class PlaneRegion(Enum):
    LTI = "LtiRegion"
    BBPD_SIGN_REVERSAL = "BbpdSignReversal"
    BBPD_SAME_SIGN = "BbpdSameSign"
    LIMIT_CYCLE = "LimitCycleRegion"
    FSM_INTEGRATOR_LTI = "FsmIntegratorLtiQuadrant"
    FSM_INTEGRATOR_DIFFERENTIATOR = "FsmIntegratorDifferentiatorQuadrant"


class Rotation(Enum):
    CLOCKWISE = "clockwise"
    COUNTERCLOCKWISE = "counterclockwise"
    INDETERMINATE = "indeterminate"


INTEGRATOR_LTI = "IntegratorLti"
INTEGRATOR_DIFFERENTIATOR = "IntegratorDifferentiator"
COMPOSITES = (INTEGRATOR_LTI, INTEGRATOR_DIFFERENTIATOR)

FORCE_CHOICES = ("lti1", "lti2", "bbpd", "fsm_integrator")


@dataclass(frozen=True)
class SimOptions:
    """Run-level knobs. Defaults follow the reference reading of the FSM.

    fsm_exit: ``"zero"`` leaves the FSM once kd has been halved to 0,
    ``"one"`` as soon as it reaches 1.
    force: pin the loop to a single subsystem (switching disabled).
    """

    fsm_exit: str = "zero"
    reset_ki_on_reversal: bool = True
    rearm: bool = False
    hold: int = 20
    divergence_limit: float = 1e6
    force: Optional[str] = None
    stop_on_settle: bool = True

    def validate(self) -> None:
        if self.fsm_exit not in ("zero", "one"):
            raise ValueError(f"fsm_exit must be 'zero' or 'one', got {self.fsm_exit!r}")
        if self.hold < 1:
            raise ValueError("hold must be >= 1")
        if self.force is not None and self.force not in FORCE_CHOICES:
            raise ValueError(f"force must be one of {FORCE_CHOICES}, got {self.force!r}")

    @property
    def exit_kd(self) -> int:
        return 0 if self.fsm_exit == "zero" else 1


class TrajectoryRecord(NamedTuple):
    k: int
    mode: Mode
    step: Step
    state: PllState
    kd: int
    ki_fsm: int
    v1: float
    v3: float
    switch_event: Optional[tuple[Mode, Mode]]


@dataclass
class Trajectory:
    """Column store of per-cycle records; row ``k`` holds the cycle-start state."""

    k: list = field(default_factory=list)
    mode: list = field(default_factory=list)
    step: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    dphi_f: list = field(default_factory=list)
    kd: list = field(default_factory=list)
    ki_fsm: list = field(default_factory=list)
    v1: list = field(default_factory=list)
    v3: list = field(default_factory=list)
    switch: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.k)

    def append(self, k, mode, step, phi, dphi_f, kd, ki_fsm, switch) -> None:
        x = PllState(phi, dphi_f)
        self.k.append(k)
        self.mode.append(mode)
        self.step.append(step)
        self.phi.append(phi)
        self.dphi_f.append(dphi_f)
        self.kd.append(kd)
        self.ki_fsm.append(ki_fsm)
        self.v1.append(evaluate(CQLF_FORM, x))
        self.v3.append(evaluate(BBPD_FORM, x))
        self.switch.append(switch)

    def states(self) -> np.ndarray:
        return np.column_stack([self.phi, self.dphi_f]) if self.k else np.zeros((0, 2))

    def record(self, i: int) -> TrajectoryRecord:
        return TrajectoryRecord(
            self.k[i], self.mode[i], self.step[i], PllState(self.phi[i], self.dphi_f[i]),
            self.kd[i], self.ki_fsm[i], self.v1[i], self.v3[i], self.switch[i],
        )

    def records(self) -> Iterator[TrajectoryRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def switch_events(self) -> list[tuple[int, Mode, Mode]]:
        return [(k, s[0], s[1]) for k, s in zip(self.k, self.switch) if s is not None]


@dataclass(frozen=True)
class ChatterReport:
    chattering: bool
    events: tuple = ()


@dataclass
class SimReport:
    settled_at: Optional[int]
    chatter: ChatterReport
    final_mode: Mode
    switch_on_traces: dict
    rotation: Rotation
    diverged: bool = False
    cycles: int = 0

    @property
    def chattering(self) -> bool:
        return self.chatter.chattering

    def mlf(self, subsystems: Sequence[str] = COMPOSITES) -> dict[str, MlfReport]:
        return {s: mlf_check(self.switch_on_traces[s]) for s in subsystems if s in self.switch_on_traces}


class FsmAction(Enum):
    INTEGRATOR = "IntegratorStep"
    DIFFERENTIATOR = "DifferentiatorStep"


def fsm_dispatch(state: PllState, fsm: FsmState) -> FsmAction:
    if sigma(state.phi) != fsm.prev_sigma:
        return FsmAction.DIFFERENTIATOR
    return FsmAction.INTEGRATOR


def next_mode(
    state: PllState,
    current: Optional[Mode],
    thresholds: SwitchThresholds,
    fsm: Optional[FsmState] = None,
    *,
    rearm: bool = False,
    exit_kd: int = 0,
) -> Mode:
    """Phase-error driven switching rule.

    ``current=None`` means no history: a start inside the bang-bang band has
    never crossed in from an LTI mode, so the FSM is not armed and the loop
    begins in BBPD_NLTI. ``fsm`` is the FSM state while in BBPD_FSM.
    """
    if current is Mode.BBPD_NLTI and not rearm:
        return Mode.BBPD_NLTI
    a = abs(state.phi)
    if a > thresholds.phi_err_1:
        return Mode.LTI1
    if a > thresholds.phi_err_2:
        return Mode.LTI2
    if fsm is not None and fsm.kd <= exit_kd:
        return Mode.BBPD_NLTI
    if current is None or current is Mode.BBPD_NLTI:
        return Mode.BBPD_NLTI
    return Mode.BBPD_FSM


def classify_region(
    state: PllState,
    fsm_active: bool,
    gains: LoopGains,
    thresholds: SwitchThresholds,
    prev_sigma: Optional[int] = None,
) -> PlaneRegion:
    """Phase-plane region of ``state``.

    Without ``prev_sigma`` the bang-bang reversal region is taken as
    Quadrants I/III, where a clockwise orbit lands right after crossing the
    dphi_f axis.
    """
    if abs(state.phi) > thresholds.phi_err_2:
        return PlaneRegion.LTI
    same_sign = sigma(state.phi) == sigma(state.dphi_f)
    if fsm_active:
        return PlaneRegion.FSM_INTEGRATOR_LTI if same_sign else PlaneRegion.FSM_INTEGRATOR_DIFFERENTIATOR
    if in_limit_cycle_region(state, gains.kp3n, gains.ki3n):
        return PlaneRegion.LIMIT_CYCLE
    reversal = same_sign if prev_sigma is None else sigma(state.phi) != prev_sigma
    return PlaneRegion.BBPD_SIGN_REVERSAL if reversal else PlaneRegion.BBPD_SAME_SIGN


_FORCED_MODE = {
    "lti1": Mode.LTI1,
    "lti2": Mode.LTI2,
    "bbpd": Mode.BBPD_NLTI,
    "fsm_integrator": Mode.BBPD_FSM,
}


def simulate(
    config: LoopConfig,
    thresholds: SwitchThresholds,
    x0: PllState,
    max_cycles: int,
    disturbance: Optional[DcoDisturbance] = None,
    options: SimOptions = SimOptions(),
) -> tuple[Trajectory, SimReport]:
    """Run the switched loop from ``x0`` for at most ``max_cycles`` cycles.

    Each cycle selects a mode from the cycle-start state, records it, then
    applies that mode's step. The run stops early once the loop has stayed
    ``options.hold`` cycles inside the limit-cycle band in BBPD_NLTI, or when
    a state component exceeds ``options.divergence_limit``.
    """
    if max_cycles < 1:
        raise ValueError("max_cycles must be >= 1")
    options.validate()
    g = config.gains
    traj = Trajectory()
    forced = _FORCED_MODE.get(options.force) if options.force else None

    x = x0
    mode: Optional[Mode] = None
    fsm: Optional[FsmState] = None
    prev_sigma = sigma(x.phi)
    band_run = 0
    settled_at = None
    diverged = False
    traces = defaultdict(lambda: ([], []))
    armed = False
    composite_prev = None

    for k in range(max_cycles):
        if forced is not None:
            new_mode = forced
        else:
            new_mode = next_mode(
                x, mode, thresholds, fsm if mode is Mode.BBPD_FSM else None,
                rearm=options.rearm, exit_kd=options.exit_kd,
            )
        if new_mode is Mode.BBPD_FSM and mode is not Mode.BBPD_FSM:
            fsm = FsmState(kd=g.kd_init, ki_fsm=1, prev_sigma=prev_sigma)
            armed = True
        elif new_mode is Mode.BBPD_NLTI:
            armed = False
        switch = (mode, new_mode) if (mode is not None and new_mode is not mode) else None

        if new_mode is Mode.BBPD_FSM:
            if forced is not None:
                action = FsmAction.INTEGRATOR
                if options.reset_ki_on_reversal and sigma(x.phi) != fsm.prev_sigma:
                    fsm = FsmState(fsm.kd, 1, fsm.prev_sigma)
            else:
                action = fsm_dispatch(x, fsm)
            step = Step.FSM_DIFF if action is FsmAction.DIFFERENTIATOR else Step.FSM_INT
        elif new_mode is Mode.BBPD_NLTI:
            step = Step.BBPD
        else:
            step = Step.LTI1 if new_mode is Mode.LTI1 else Step.LTI2

        fsm_active = new_mode is Mode.BBPD_FSM or (armed and new_mode.is_lti)
        kd_now = fsm.kd if fsm_active else 0
        ki_now = fsm.ki_fsm if fsm_active else 0
        traj.append(k, new_mode, step, x.phi, x.dphi_f, kd_now, ki_now, switch)

        v1, v3 = traj.v1[-1], traj.v3[-1]
        if switch is not None or mode is None:
            vals, cyc = traces[new_mode.value]
            vals.append(v3 if new_mode is Mode.BBPD_NLTI else v1)
            cyc.append(k)
        if armed:
            lti_leg = new_mode.is_lti or sigma(x.phi) == sigma(x.dphi_f)
            comp = INTEGRATOR_LTI if lti_leg else INTEGRATOR_DIFFERENTIATOR
            if comp != composite_prev:
                vals, cyc = traces[comp]
                vals.append(v1)
                cyc.append(k)
            composite_prev = comp
        else:
            composite_prev = None

        if new_mode is Mode.BBPD_NLTI and in_limit_cycle_region(x, g.kp3n, g.ki3n):
            band_run += 1
            if band_run >= options.hold and settled_at is None:
                settled_at = k - options.hold + 1
                if options.stop_on_settle:
                    mode = new_mode
                    break
        else:
            band_run = 0

        if step is Step.LTI1:
            x = step_lti(x, g.kp1n, g.ki1n)
        elif step is Step.LTI2:
            x = step_lti(x, g.kp2n, g.ki2n)
        elif step is Step.BBPD:
            x, _ = step_bbpd(x, prev_sigma, g.kp3n, g.ki3n)
        elif step is Step.FSM_INT:
            x, fsm = step_fsm_integrator(x, fsm, g.kp3n, g.ki3n)
        else:
            x, fsm = step_fsm_differentiator(x, fsm, g.kp3n, g.ki3n, g.beta, options.reset_ki_on_reversal)
        prev_sigma = sigma(traj.phi[-1])
        mode = new_mode

        dphi = x.dphi_f
        if disturbance is not None:
            dphi += disturbance.sample()
        if not (abs(x.phi) <= options.divergence_limit and abs(dphi) <= options.divergence_limit):
            diverged = True
            break
        x = PllState(x.phi, dphi)

    switch_on = {sid: SwitchOnTrace(sid, tuple(v), tuple(c)) for sid, (v, c) in traces.items()}
    report = SimReport(
        settled_at=settled_at,
        chatter=detect_chattering(traj),
        final_mode=traj.mode[-1],
        switch_on_traces=switch_on,
        rotation=rotation_direction(traj) if len(traj) >= 3 else Rotation.INDETERMINATE,
        diverged=diverged,
        cycles=len(traj),
    )
    return traj, report


def detect_settling(traj: Trajectory, gains: LoopGains, hold: int = 20, band_scale: float = 1.0) -> Optional[int]:
    """Earliest cycle after which ``hold`` consecutive BBPD_NLTI cycles stay in the band.

    ``band_scale`` widens the band |phi + dphi_f| < band_scale*(2*kp3n + ki3n);
    1.0 is the limit-cycle region itself.
    """
    if hold < 1:
        raise ValueError("hold must be >= 1")
    band = band_scale * (2.0 * gains.kp3n + gains.ki3n)
    run = 0
    for i in range(len(traj)):
        if traj.mode[i] is Mode.BBPD_NLTI and abs(traj.phi[i] + traj.dphi_f[i]) < band:
            run += 1
            if run >= hold:
                return traj.k[i - hold + 1]
        else:
            run = 0
    return None


def detect_chattering(traj: Trajectory, count: int = 3, window: int = 50) -> ChatterReport:
    """Flag any exit from BBPD_NLTI, or an LTI<->BBPD edge repeated more than
    ``count`` times within ``window`` cycles."""
    events = traj.switch_events()
    bad = [e for e in events if e[1] is Mode.BBPD_NLTI]
    by_edge = defaultdict(list)
    for e in events:
        if e[1].is_lti != e[2].is_lti:
            by_edge[(e[1], e[2])].append(e)
    for edge_events in by_edge.values():
        ks = [e[0] for e in edge_events]
        for i in range(len(ks) - count):
            if ks[i + count] - ks[i] < window:
                bad.extend(edge_events[i:i + count + 1])
                break
    bad = sorted(set(bad), key=lambda e: e[0])
    return ChatterReport(bool(bad), tuple(bad))


def _as_states(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.states()
    return np.asarray(traj, dtype=float).reshape(-1, 2)


def rotation_direction(traj, tol: float = 1e-15) -> Rotation:
    """Sign of the summed cross products x_k x x_{k+1} (phi horizontal)."""
    s = _as_states(traj)
    if len(s) < 3:
        raise ValueError("rotation needs at least 3 states")
    total = float(np.sum(s[:-1, 0] * s[1:, 1] - s[:-1, 1] * s[1:, 0]))
    if abs(total) < tol:
        return Rotation.INDETERMINATE
    return Rotation.CLOCKWISE if total < 0 else Rotation.COUNTERCLOCKWISE


def fom(sigma_t: float, t_s: float, power: float) -> float:
    """Jitter / lock-time / power figure of merit in dB (seconds, seconds, mW)."""
    if not (sigma_t > 0 and t_s > 0 and power > 0):
        raise ValueError("fom arguments must be strictly positive")
    return 10.0 * math.log10(sigma_t ** 2 * t_s ** 2 * power)
