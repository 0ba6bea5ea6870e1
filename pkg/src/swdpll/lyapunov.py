"""Quadratic Lyapunov machinery for 2-state discrete-time systems."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import AffinePiece, PllState, seeded_rng

DEFINITENESS_TOL = 1e-12
DEFAULT_SEARCH_BUDGET = 10_000


class NotSchurStableError(ValueError):
    """Raised when a discrete Lyapunov equation has no positive definite solution."""


@dataclass(frozen=True)
class QuadraticForm:
    p11: float
    p12: float
    p22: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.p11, self.p12], [self.p12, self.p22]])

    @classmethod
    def from_matrix(cls, m) -> "QuadraticForm":
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), float(0.5 * (m[0, 1] + m[1, 0])), float(m[1, 1]))

    def __call__(self, x: PllState) -> float:
        return evaluate(self, x)


# Common form for the linear and FSM composite subsystems, and the bang-bang energy.
CQLF_FORM = QuadraticForm(0.02, 0.06, 3.0)
BBPD_FORM = QuadraticForm(1.0, 0.0, 1000.0)


def evaluate(p: QuadraticForm, x: PllState) -> float:
    return p.p11 * x.phi ** 2 + 2.0 * p.p12 * x.phi * x.dphi_f + p.p22 * x.dphi_f ** 2


def _is_pd(m: np.ndarray, tol: float = DEFINITENESS_TOL) -> bool:
    # Sylvester criterion on a symmetric 2x2
    return bool(m[0, 0] > tol and m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0] > tol)


def is_positive_definite(p: QuadraticForm) -> bool:
    return _is_pd(p.matrix)


def is_negative_definite(m) -> bool:
    m = np.asarray(m, dtype=float)
    return _is_pd(-0.5 * (m + m.T))


def _x(x) -> np.ndarray:
    return x.as_array() if isinstance(x, PllState) else np.asarray(x, dtype=float)


def lyapunov_difference(p: QuadraticForm, a_mat) -> np.ndarray:
    """A'PA - P."""
    a = np.asarray(a_mat, dtype=float)
    pm = p.matrix
    return a.T @ pm @ a - pm


def delta_v_linear(p: QuadraticForm, a_mat, x) -> float:
    v = _x(x)
    return float(v @ lyapunov_difference(p, a_mat) @ v)


def delta_v_affine(p: QuadraticForm, piece: AffinePiece, x) -> float:
    """Energy change for x -> A x + a, evaluated in matrix form."""
    v = _x(x)
    a = np.asarray(piece.a_vec, dtype=float)
    pm = p.matrix
    cross = 2.0 * float(a @ pm @ (piece.a_mat @ v))
    return delta_v_linear(p, piece.a_mat, v) + cross + float(a @ pm @ a)


def spectral_radius(a_mat) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(a_mat, dtype=float)))))


def solve_discrete_lyapunov(a_mat, q: QuadraticForm) -> QuadraticForm:
    """Solve A'PA - P + Q = 0 through the vectorized 4x4 linear system."""
    a = np.asarray(a_mat, dtype=float)
    if a.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {a.shape}")
    if not is_positive_definite(q):
        raise ValueError("Q must be positive definite")
    rho = spectral_radius(a)
    if not rho < 1.0:
        raise NotSchurStableError(f"no positive definite solution: spectral radius {rho:.6g} >= 1")
    # vec(A'PA) = (A' kron A') vec(P) for row-major vec
    lhs = np.kron(a.T, a.T) - np.eye(4)
    p_vec = np.linalg.solve(lhs, -q.matrix.reshape(4))
    return QuadraticForm.from_matrix(p_vec.reshape(2, 2))


def lyapunov_residual(a_mat, p: QuadraticForm, q: QuadraticForm) -> float:
    """Infinity norm of A'PA - P + Q."""
    r = lyapunov_difference(p, a_mat) + q.matrix
    return float(np.max(np.sum(np.abs(r), axis=1)))


def check_cqlf(p: QuadraticForm, mats: Sequence) -> bool:
    return all(is_negative_definite(lyapunov_difference(p, a)) for a in mats)


@dataclass
class CqlfSearchResult:
    form: Optional[QuadraticForm]
    candidates_tried: int
    unstable: list[int] = field(default_factory=list)

    @property
    def found(self) -> bool:
        return self.form is not None


def _random_pd(rng: np.random.Generator) -> QuadraticForm:
    l = rng.standard_normal((2, 2))
    return QuadraticForm.from_matrix(l @ l.T + 1e-6 * np.eye(2))


def search_cqlf(mats: Sequence, budget: int = DEFAULT_SEARCH_BUDGET, seed: int = 0) -> CqlfSearchResult:
    """Heuristic search for a common quadratic Lyapunov function.

    Candidates come in rounds. Each round takes one Q (the identity first,
    then seeded random positive definite draws) and tries every matrix's
    Lyapunov solution for that Q plus one Dirichlet-weighted convex
    combination of those solutions. The first candidate that passes wins;
    ``form=None`` means nothing was found within ``budget`` candidates.
    """
    mats = [np.asarray(a, dtype=float) for a in mats]
    unstable = [i for i, a in enumerate(mats) if not spectral_radius(a) < 1.0]
    if unstable:
        return CqlfSearchResult(None, 0, unstable)
    if not mats:
        return CqlfSearchResult(QuadraticForm(1.0, 0.0, 1.0), 0)
    rng = seeded_rng(seed, "cqlf-search")
    tried = 0
    sols = [solve_discrete_lyapunov(a, QuadraticForm(1.0, 0.0, 1.0)).matrix for a in mats]
    while tried < budget:
        cands = list(sols)
        if len(sols) > 1:
            w = rng.dirichlet(np.ones(len(sols)))
            cands.append(np.tensordot(w, np.stack(sols), axes=1))
        for m in cands[: budget - tried]:
            tried += 1
            cand = QuadraticForm.from_matrix(m)
            if is_positive_definite(cand) and check_cqlf(cand, mats):
                return CqlfSearchResult(cand, tried)
        q = _random_pd(rng)
        sols = [solve_discrete_lyapunov(a, q).matrix for a in mats]
    return CqlfSearchResult(None, tried)


@dataclass(frozen=True)
class SwitchOnTrace:
    subsystem_id: str
    values: tuple[float, ...]
    cycles: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.values:
            raise ValueError("a switch-on trace needs at least one sample")


@dataclass(frozen=True)
class MlfReport:
    subsystem_id: str
    passed: bool
    violations: tuple[int, ...]

    @property
    def first_violation(self) -> Optional[int]:
        return self.violations[0] if self.violations else None


def mlf_check(trace: SwitchOnTrace) -> MlfReport:
    """Energies at consecutive switch-on instants must strictly decrease.

    ``violations`` lists every index ``i`` with ``values[i] >= values[i-1]``.
    """
    v = trace.values
    bad = tuple(i for i in range(1, len(v)) if not v[i] < v[i - 1])
    return MlfReport(trace.subsystem_id, not bad, bad)


__all__ = [
    "BBPD_FORM",
    "CQLF_FORM",
    "CqlfSearchResult",
    "MlfReport",
    "NotSchurStableError",
    "QuadraticForm",
    "SwitchOnTrace",
    "check_cqlf",
    "delta_v_affine",
    "delta_v_linear",
    "evaluate",
    "is_negative_definite",
    "is_positive_definite",
    "lyapunov_residual",
    "mlf_check",
    "search_cqlf",
    "solve_discrete_lyapunov",
    "spectral_radius",
]
