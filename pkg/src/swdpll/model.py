"""Domain types and one-step dynamics for the switched DPLL.

State is the pair ``(phi, dphi_f)``: phase error and the per-reference-cycle
phase increment caused by frequency error, both in radians. Every step
function here is pure; it returns a new state and never mutates its inputs.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

BBPD_MATRIX = np.array([[1.0, 1.0], [0.0, 1.0]])
BBPD_MATRIX.setflags(write=False)


@dataclass(frozen=True)
class PllState:
    phi: float
    dphi_f: float

    def __post_init__(self):
        if not (math.isfinite(self.phi) and math.isfinite(self.dphi_f)):
            raise ValueError(f"non-finite state ({self.phi}, {self.dphi_f})")

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, self.dphi_f])

    @classmethod
    def from_array(cls, x) -> "PllState":
        return cls(float(x[0]), float(x[1]))


ORIGIN = PllState(0.0, 0.0)


@dataclass(frozen=True)
class CircuitParams:
    """Circuit-level constants. Defaults are the 5 GHz / 100 MHz reference design."""

    f_ref: float = 100e6
    k_dco: float = 10e3
    n_div: float = 50.0
    dt_tdc_counter: float = 1.67e-9
    dt_tdc_delayline: float = 20e-12
    sigma_t_dco: float = 0.2e-12

    @property
    def t_ref(self) -> float:
        return 1.0 / self.f_ref

    def validate(self) -> None:
        for name in ("f_ref", "k_dco", "n_div", "dt_tdc_counter", "dt_tdc_delayline", "sigma_t_dco"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be strictly positive, got {v!r}")
        if not self.dt_tdc_delayline < self.dt_tdc_counter:
            raise ValueError("dt_tdc_delayline must be smaller than dt_tdc_counter")
        if not self.dt_tdc_counter < self.t_ref:
            raise ValueError("dt_tdc_counter must be smaller than the reference period")

    def phase_threshold(self, dt: float) -> float:
        """Phase error (rad) corresponding to a time resolution ``dt``."""
        return 2.0 * math.pi * self.f_ref * dt

    def dco_noise_amplitude(self) -> float:
        return 2.0 * math.pi * self.f_ref * self.sigma_t_dco


@dataclass(frozen=True)
class LoopGains:
    """Normalized loop-filter gains (rad) and FSM derivative settings."""

    kp1n: float = 0.03
    ki1n: float = 0.007
    kp2n: float = 0.05
    ki2n: float = 0.003
    kp3n: float = 0.00006
    ki3n: float = 0.0000078
    kd_init: int = 64
    beta: int = 2

    def validate(self) -> None:
        for name in ("kp1n", "ki1n", "kp2n", "ki2n", "kp3n", "ki3n"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be strictly positive, got {v!r}")
        if int(self.kd_init) != self.kd_init or self.kd_init < 1:
            raise ValueError(f"kd_init must be an integer >= 1, got {self.kd_init!r}")
        if int(self.beta) != self.beta or self.beta < 2:
            raise ValueError(f"beta must be an integer >= 2, got {self.beta!r}")

    @property
    def reversal_correction(self) -> float:
        """2*kp3n + ki3n: the bang-bang kick applied on a sign reversal."""
        return 2.0 * self.kp3n + self.ki3n


@dataclass(frozen=True)
class FsmState:
    kd: int
    ki_fsm: int = 1
    prev_sigma: int = 1

    def validate(self) -> None:
        if self.kd < 0:
            raise ValueError("kd must be >= 0")
        if self.ki_fsm < 1:
            raise ValueError("ki_fsm must be >= 1")
        if self.prev_sigma not in (-1, 1):
            raise ValueError("prev_sigma must be -1 or +1")


class Mode(Enum):
    LTI1 = "LTI1"
    LTI2 = "LTI2"
    BBPD_FSM = "BBPD_FSM"
    BBPD_NLTI = "BBPD_NLTI"

    @property
    def is_lti(self) -> bool:
        return self in (Mode.LTI1, Mode.LTI2)

    @property
    def is_bbpd(self) -> bool:
        return self in (Mode.BBPD_FSM, Mode.BBPD_NLTI)


class Region(Enum):
    SIGN_REVERSAL = "SignReversal"
    SAME_SIGN = "SameSign"
    LIMIT_CYCLE = "LimitCycle"


@dataclass(frozen=True)
class AffinePiece:
    a_mat: np.ndarray
    a_vec: np.ndarray
    region_id: Region

    def apply(self, x: PllState) -> PllState:
        return PllState.from_array(self.a_mat @ x.as_array() + self.a_vec)


def sigma(phi: float) -> int:
    """Bang-bang detector output. Zero maps to +1."""
    return 1 if phi >= 0 else -1


def lti_matrix(kpn: float, kin: float) -> np.ndarray:
    k = 1.0 - kpn
    return np.array([[1.0 - kin, k], [-kin, k]])


def step_lti(x: PllState, kpn: float, kin: float) -> PllState:
    k = 1.0 - kpn
    return PllState((1.0 - kin) * x.phi + k * x.dphi_f, -kin * x.phi + k * x.dphi_f)


def _kick(x: PllState, corr: float) -> PllState:
    # Both components receive the same correction; phi also integrates dphi_f.
    return PllState((x.phi + x.dphi_f) - corr, x.dphi_f - corr)


def bbpd_correction(s: int, sigma_prev: int, kp3n: float, ki3n: float) -> float:
    """Signed bang-bang correction for the current cycle."""
    if s != sigma_prev:
        return (2.0 * kp3n + ki3n) * s
    return ki3n * s


def step_bbpd(x: PllState, sigma_prev: int, kp3n: float, ki3n: float) -> tuple[PllState, int]:
    s = sigma(x.phi)
    return _kick(x, bbpd_correction(s, sigma_prev, kp3n, ki3n)), s


def step_fsm_integrator(x: PllState, fsm: FsmState, kp3n: float, ki3n: float) -> tuple[PllState, FsmState]:
    s = sigma(x.phi)
    corr = (kp3n + ki3n * fsm.ki_fsm) * s
    return _kick(x, corr), replace(fsm, ki_fsm=fsm.ki_fsm + 1, prev_sigma=s)


def step_fsm_differentiator(
    x: PllState,
    fsm: FsmState,
    kp3n: float,
    ki3n: float,
    beta: int = 2,
    reset_ki: bool = True,
) -> tuple[PllState, FsmState]:
    """Impulsive derivative kick of constant magnitude ``kd*(kp3n+ki3n)``.

    The derivative gain is floor-divided by ``beta``. With ``reset_ki`` the
    FSM accumulator restarts at 1, since this step only fires on a sign
    reversal.
    """
    s = sigma(x.phi)
    corr = fsm.kd * (kp3n + ki3n) * s
    nxt = FsmState(kd=fsm.kd // beta, ki_fsm=1 if reset_ki else fsm.ki_fsm, prev_sigma=s)
    return _kick(x, corr), nxt


def in_limit_cycle_region(x: PllState, kp3n: float, ki3n: float) -> bool:
    return abs(x.phi + x.dphi_f) < 2.0 * kp3n + ki3n


def affine_piece_for(x: PllState, sigma_prev: int, gains: LoopGains) -> AffinePiece:
    s = sigma(x.phi)
    corr = bbpd_correction(s, sigma_prev, gains.kp3n, gains.ki3n)
    if in_limit_cycle_region(x, gains.kp3n, gains.ki3n):
        region = Region.LIMIT_CYCLE
    elif s != sigma_prev:
        region = Region.SIGN_REVERSAL
    else:
        region = Region.SAME_SIGN
    return AffinePiece(BBPD_MATRIX, np.array([-corr, -corr]), region)


def quadrant(x: PllState) -> int:
    """Phase-plane quadrant 1..4 with phi horizontal; zero counts as positive."""
    sp, sd = sigma(x.phi), sigma(x.dphi_f)
    if sp > 0:
        return 1 if sd > 0 else 4
    return 2 if sd > 0 else 3


def seeded_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator per consumer label, derived from one run seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])


class DcoDisturbance:
    """Zero-mean uniform additive disturbance on ``dphi_f``."""

    def __init__(self, amplitude: float, seed: int = 0, label: str = "dco-noise"):
        self.amplitude = float(amplitude)
        self._rng = seeded_rng(seed, label)

    def sample(self) -> float:
        return float(self._rng.uniform(-self.amplitude, self.amplitude))
