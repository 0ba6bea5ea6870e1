"""Loop-gain synthesis and the stability bounds on the bang-bang gains."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .model import BBPD_MATRIX, CircuitParams


class DomainError(ValueError):
    """Input outside the domain where a design formula is defined."""


class NoStabilizingGainError(DomainError):
    pass


@dataclass(frozen=True)
class LtiDesignSpec:
    pm: float  # rad
    ugbw: float  # rad/s
    omega_z: Optional[float] = None  # rad/s; None -> derived from the PI zero
    loop_delay: float = 0.0  # reference cycles

    def validate(self) -> None:
        if not 0.0 < self.pm < math.pi / 2:
            raise DomainError(f"pm must lie in (0, pi/2), got {self.pm!r}")
        if not self.ugbw > 0:
            raise DomainError(f"ugbw must be positive, got {self.ugbw!r}")
        if self.loop_delay < 0:
            raise DomainError(f"loop_delay must be >= 0, got {self.loop_delay!r}")
        if self.omega_z is not None and self.omega_z < 0:
            raise DomainError(f"omega_z must be >= 0, got {self.omega_z!r}")


def kpfd(t_ref: float, dt_tdc: float) -> float:
    """TDC gain in LSB/rad."""
    if not (t_ref > 0 and dt_tdc > 0):
        raise DomainError(f"t_ref and dt_tdc must be positive, got {t_ref!r}, {dt_tdc!r}")
    return t_ref / (2.0 * math.pi * dt_tdc)


def normalize_gains(kp: float, ki: float, kpfd_factor: float, circuit: CircuitParams) -> tuple[float, float]:
    """Convert raw filter gains (LSB) to phase units (rad).

    For the bang-bang path pass ``kpfd_factor=1``.
    """
    scale = kpfd_factor * 2.0 * math.pi * circuit.k_dco / (circuit.n_div * circuit.f_ref)
    return kp * scale, ki * scale


def design_lti_gains(spec: LtiDesignSpec, kpfd_value: float, circuit: CircuitParams) -> tuple[float, float]:
    """Raw PI gains (kp, ki) for a phase-margin / bandwidth target.

    The DCO gain enters in rad/s per LSB. When ``spec.omega_z`` is None the
    zero is taken as ``(ki/kp)/T_ref`` and resolved with one fixed-point pass:
    kp is computed with a zero at DC, the zero is recomputed from that kp,
    and kp is evaluated once more.
    """
    spec.validate()
    if not kpfd_value > 0:
        raise DomainError(f"kpfd must be positive, got {kpfd_value!r}")
    t_ref = circuit.t_ref
    g = circuit.n_div / (kpfd_value * 2.0 * math.pi * circuit.k_dco)
    tan_pm = math.tan(spec.pm)
    kp_dc = g * spec.ugbw / math.sqrt(1.0 + tan_pm ** -2)
    ki = t_ref * g * spec.ugbw ** 2 / math.sqrt(1.0 + tan_pm ** 2)
    omega_z = spec.omega_z if spec.omega_z is not None else (ki / kp_dc) / t_ref
    kp = kp_dc * (1.0 - 0.5 * t_ref * omega_z)
    if kp <= 0:
        raise DomainError(f"zero at {omega_z:.4g} rad/s leaves no positive proportional gain")
    return kp, ki


def bbpd_ratio_bound(omega_u: float, t_ref: float, d: float, pm: float) -> float:
    """Minimum kp3/ki3 ratio for a bang-bang loop with delay ``d`` cycles."""
    wt = omega_u * t_ref
    if not wt > 0:
        raise DomainError("omega_u * t_ref must be positive")
    if d < 0 or pm < 0:
        raise DomainError("loop delay and phase margin must be non-negative")
    theta = wt * d + pm
    if theta >= math.pi / 2:
        raise DomainError(f"omega_u*t_ref*d + pm = {theta:.4g} rad is not below pi/2")
    return math.tan(theta) / wt


def _reversal_quadratic(p_mat: np.ndarray, x: np.ndarray) -> tuple[float, float, float]:
    """Coefficients (alpha, beta, gamma) of the energy change alpha*c^2 + beta*c + gamma.

    ``c`` is the reversal correction 2*kp3n + ki3n with sigma = +1, taken
    from the affine form dV = x'(A'PA - P)x + 2a'PAx + a'Pa with a = -c*[1, 1].
    """
    ones = np.ones(2)
    ax = BBPD_MATRIX @ x
    alpha = float(ones @ p_mat @ ones)
    beta = -2.0 * float(ones @ p_mat @ ax)
    gamma = float(x @ (BBPD_MATRIX.T @ p_mat @ BBPD_MATRIX - p_mat) @ x)
    return alpha, beta, gamma


def bbpd_lyapunov_bound(p, phi_max: float, dphi_max: float) -> tuple[float, float]:
    """Open interval of reversal corrections that decrease energy at a boundary state.

    ``p`` is a :class:`~swdpll.lyapunov.QuadraticForm` (anything with a
    ``matrix`` attribute works).
    """
    if phi_max < 0 or dphi_max < 0:
        raise DomainError("boundary magnitudes must be non-negative")
    alpha, beta, gamma = _reversal_quadratic(np.asarray(p.matrix, dtype=float), np.array([phi_max, dphi_max]))
    if alpha <= 0:
        raise DomainError("energy form must be positive along [1, 1]")
    disc = beta * beta - 4.0 * alpha * gamma
    if disc <= 0:
        raise NoStabilizingGainError(
            f"no stabilizing gain at boundary point ({phi_max}, {dphi_max}): discriminant {disc:.3g}"
        )
    root = math.sqrt(disc)
    # avoid cancellation in the small root
    q = -0.5 * (beta + math.copysign(root, beta))
    r1, r2 = q / alpha, gamma / q
    return (min(r1, r2), max(r1, r2))


class KdRange(NamedTuple):
    kd_lo: float
    kd_hi: float
    kd_pick: int
    kd_raw: float


def kd_init_range(
    kp3n: float,
    ki3n: float,
    residual_lo: float,
    residual_hi: float,
    beta: int = 2,
    target: Optional[float] = None,
) -> KdRange:
    """Admissible initial derivative gains and the power-of-``beta`` pick.

    ``target`` defaults to the midpoint of the residual range. The pick is the
    largest power of ``beta`` at or below ``target/(kp3n+ki3n)``; if that
    falls outside the range the next power up is used when it fits.
    """
    if not (kp3n > 0 and ki3n > 0):
        raise DomainError("bang-bang gains must be positive")
    if not 0 < residual_lo < residual_hi:
        raise DomainError(f"empty residual range ({residual_lo}, {residual_hi})")
    if int(beta) != beta or beta < 2:
        raise DomainError("beta must be an integer >= 2")
    g = kp3n + ki3n
    kd_lo, kd_hi = residual_lo / g, residual_hi / g
    if target is None:
        target = 0.5 * (residual_lo + residual_hi)
    raw = target / g
    if raw < 1:
        raise DomainError(f"target residual {target} is below a single derivative step {g}")
    n = int(math.floor(math.log(raw, beta)))
    # guard the float log against off-by-one at exact powers
    while beta ** (n + 1) <= raw:
        n += 1
    while beta ** n > raw:
        n -= 1
    for pick in (beta ** n, beta ** (n + 1)):
        if kd_lo < pick < kd_hi:
            return KdRange(kd_lo, kd_hi, int(pick), raw)
    raise DomainError(f"no power of {beta} lies inside ({kd_lo:.4g}, {kd_hi:.4g})")
