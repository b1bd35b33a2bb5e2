"""Static gain synthesis for the cooperative matching controllers.

Every gain returned here comes with a numerical certificate: Riccati
residuals, closed-loop spectra and stability margins.  Downstream code is
expected to read the certificates rather than trust the formulas.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidParameter, InvalidPoles, SynthesisFailure
from .graph import Digraph, build_laplacian, min_eigenvalue

HURWITZ_TOL = 1e-9
RESIDUAL_TOL = 1e-9
SYMMETRY_TOL = 1e-12
DEFAULT_MU_MAX_FACTOR = 2.0**10

LAWS = ("full_order", "reduced_order", "adaptive", "saturated")


@dataclass(frozen=True)
class LeaderModel:
    """Input-driven reference system ``w' = S w + d v``, ``y_r = c^T w``.

    ``S`` is in companion form: identity on the superdiagonal and
    ``bottom_row = (s_0, ..., s_{n-1})`` in the last row.  ``d`` is zero
    except for ``d_last`` in the final entry and ``c`` picks the first
    coordinate.
    """

    bottom_row: tuple[float, ...]
    d_last: float = 1.0
    input_bound: float = float("inf")
    row: NDArray[np.float64] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "bottom_row", tuple(float(s) for s in self.bottom_row))
        row = np.array(self.bottom_row)
        row.setflags(write=False)
        object.__setattr__(self, "row", row)
        if len(self.bottom_row) < 1:
            raise InvalidParameter("leader dimension must be at least 1")
        if self.d_last == 0:
            raise InvalidParameter("d_last must be non-zero")
        if not self.input_bound >= 0:
            raise InvalidParameter("input_bound must be non-negative")

    @property
    def dim(self) -> int:
        return len(self.bottom_row)

    @property
    def S(self) -> NDArray[np.float64]:
        n = self.dim
        s = np.zeros((n, n))
        s[:-1, 1:] = np.eye(n - 1)
        s[-1, :] = self.bottom_row
        return s

    @property
    def d(self) -> NDArray[np.float64]:
        d = np.zeros(self.dim)
        d[-1] = self.d_last
        return d

    @property
    def c(self) -> NDArray[np.float64]:
        c = np.zeros(self.dim)
        c[0] = 1.0
        return c

    def is_controllable(self) -> bool:
        s, d = self.S, self.d
        ctrb = np.column_stack([np.linalg.matrix_power(s, k) @ d for k in range(self.dim)])
        return np.linalg.matrix_rank(ctrb) == self.dim


def double_integrator(input_bound: float = float("inf")) -> LeaderModel:
    return LeaderModel((0.0, 0.0), 1.0, input_bound)


@dataclass(frozen=True)
class HurwitzCheck:
    stable: bool
    margin: float
    eigenvalues: NDArray[np.complex128] = field(repr=False, compare=False)

    def __bool__(self) -> bool:
        return self.stable


def check_hurwitz(m: ArrayLike) -> HurwitzCheck:
    """Stability test with margin ``-max Re(eig(m))``."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    if m.size == 0:
        return HurwitzCheck(True, float("inf"), np.zeros(0, dtype=complex))
    eigs = np.linalg.eigvals(m)
    margin = float(-np.max(eigs.real))
    return HurwitzCheck(margin > HURWITZ_TOL, margin, eigs)


def riccati_residual(a: NDArray, b: NDArray, q: NDArray, p: NDArray) -> float:
    """Frobenius norm of ``a^T p + p a - 2 p b b^T p + q``."""
    pb = p @ b
    return float(np.linalg.norm(a.T @ p + p @ a - 2.0 * np.outer(pb, pb) + q))


def _solve_are(a: NDArray, b: NDArray, q: NDArray) -> NDArray:
    """Stabilizing solution of ``a^T P + P a - 2 P b b^T P + q = 0``."""
    n = a.shape[0]
    bcol = b.reshape(n, 1)
    try:
        p = scipy.linalg.solve_continuous_are(a, bcol, q, np.array([[0.5]]))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SynthesisFailure(f"Riccati solver failed: {exc}") from exc
    p = 0.5 * (p + p.T)
    tol = RESIDUAL_TOL * (1.0 + np.linalg.norm(p))
    res = riccati_residual(a, b, q, p)
    # Newton-Kleinman polishing; each step is a Lyapunov solve
    for _ in range(8):
        if res <= 0.1 * tol:
            break
        gain = 2.0 * (b @ p)
        closed = a - np.outer(b, gain)
        rhs = -(q + 0.5 * np.outer(gain, gain))
        try:
            cand = scipy.linalg.solve_continuous_lyapunov(closed.T, rhs)
        except (np.linalg.LinAlgError, ValueError):
            break
        cand = 0.5 * (cand + cand.T)
        cand_res = riccati_residual(a, b, q, cand)
        if not cand_res < res:
            break
        p, res = cand, cand_res
    if not np.all(np.isfinite(p)) or res > tol:
        raise SynthesisFailure(f"Riccati residual {res:.3e} exceeds tolerance {tol:.3e}")
    if np.linalg.eigvalsh(p)[0] <= 0:
        raise SynthesisFailure("Riccati solution is not positive definite")
    return p


def _weight(q_weight: ArrayLike | None, n: int) -> NDArray:
    q = np.eye(n) if q_weight is None else np.atleast_2d(np.asarray(q_weight, dtype=np.float64))
    if q.shape != (n, n):
        raise InvalidParameter(f"Q must be {n}x{n}, got {q.shape}")
    if np.max(np.abs(q - q.T)) > SYMMETRY_TOL or np.linalg.eigvalsh(q)[0] <= 0:
        raise InvalidParameter("Q must be symmetric positive definite")
    return q


def solve_p(leader: LeaderModel, q_weight: ArrayLike | None = None) -> NDArray[np.float64]:
    """Solve ``S^T P + P S - 2 P d d^T P + Q = 0`` for ``P > 0``.

    The solution satisfies the strict inequality ``S^T P + P S < 2 P d d^T P``
    with margin ``min eig(Q)``.

    Raises:
        SynthesisFailure: no solution meeting the residual contract was found.
    """
    q = _weight(q_weight, leader.dim)
    return _solve_are(leader.S, leader.d, q)


def solve_dual_p(leader: LeaderModel, q_weight: ArrayLike | None = None) -> NDArray[np.float64]:
    """Solve the observer-side equation ``S P + P S^T - 2 P c c^T P + Q = 0``."""
    q = _weight(q_weight, leader.dim)
    return _solve_are(leader.S.T, leader.c, q)


def inequality_margin(leader: LeaderModel, p: NDArray) -> float:
    """``-max eig(S^T P + P S - 2 P d d^T P)``; positive iff the strict inequality holds."""
    s, pd = leader.S, p @ leader.d
    m = s.T @ p + p @ s - 2.0 * np.outer(pd, pd)
    return float(-np.linalg.eigvalsh(0.5 * (m + m.T))[-1])


def gain_k(
    P: NDArray,
    leader: LeaderModel,
    lambda_min: float,
    safety_factor: float = 1.0,
    eigenvalues: Sequence[float] | None = None,
) -> tuple[NDArray[np.float64], float]:
    """Coupling gain ``K = -gamma d^T P`` with ``gamma = max(1/lambda_min, 1) * safety_factor``.

    Each ``S + lambda_i d K`` is checked for every supplied graph eigenvalue
    (``lambda_min`` alone when ``eigenvalues`` is omitted).
    """
    if lambda_min <= 0:
        raise InvalidParameter("lambda_min must be positive")
    if safety_factor < 1:
        raise InvalidParameter("safety_factor must be >= 1")
    gamma = max(1.0 / lambda_min, 1.0) * safety_factor
    k = -gamma * (leader.d @ P)
    s, d = leader.S, leader.d
    for lam in eigenvalues if eigenvalues is not None else (lambda_min,):
        chk = check_hurwitz(s + lam * np.outer(d, k))
        if not chk:
            raise SynthesisFailure(f"S + {lam:.4g} d K is not Hurwitz (margin {chk.margin:.3e})")
    return k, gamma


def observer_matrix(leader: LeaderModel, H: ArrayLike, l0: NDArray) -> NDArray[np.float64]:
    """Observer error matrix ``I_N (x) S + H (x) (l0 c^T)``."""
    h = np.atleast_2d(np.asarray(H, dtype=np.float64))
    return np.kron(np.eye(h.shape[0]), leader.S) + np.kron(h, np.outer(l0, leader.c))


def observer_gain(
    leader: LeaderModel,
    H: ArrayLike,
    q_weight: ArrayLike | None = None,
    mu_max: float | None = None,
) -> tuple[NDArray[np.float64], float]:
    """Distributed-observer injection gain ``l0 = -mu * Pt c``.

    ``Pt`` solves the dual Riccati equation.  ``mu`` starts at ``1/lambda_N``
    and doubles until the assembled observer matrix is certified Hurwitz.

    Raises:
        SynthesisFailure: no ``mu <= mu_max`` (default ``2**10 / lambda_N``) works.
    """
    h = np.atleast_2d(np.asarray(H, dtype=np.float64))
    eigs = np.linalg.eigvalsh(0.5 * (h + h.T))
    lam = float(eigs[0])
    if lam <= 0:
        raise SynthesisFailure("H is not positive definite")
    if mu_max is None:
        mu_max = DEFAULT_MU_MAX_FACTOR / lam
    direction = -(solve_dual_p(leader, q_weight) @ leader.c)
    mu = 1.0 / lam
    while mu <= mu_max * (1 + 1e-12):
        l0 = mu * direction
        if check_hurwitz(observer_matrix(leader, h, l0)):
            return l0, mu
        mu *= 2.0
    raise SynthesisFailure(f"no mu <= {mu_max:.4g} certifies the observer")


def hurwitz_coeffs(n: int, poles: Sequence[float]) -> NDArray[np.float64]:
    """Coefficients ``(k_1, ..., k_n)`` with ``s^n - k_n s^{n-1} - ... - k_1 = prod(s - p)``.

    Raises:
        InvalidPoles: wrong count, complex, or non-negative poles.
    """
    poles = list(poles)
    if n < 1 or len(poles) != n:
        raise InvalidPoles(f"expected {n} poles, got {len(poles)}")
    for p in poles:
        if isinstance(p, complex) or not np.isfinite(p) or p >= 0:
            raise InvalidPoles(f"pole {p!r} is not a negative real number")
    monic = np.poly(np.asarray(poles, dtype=np.float64))
    k = -monic[1:][::-1]
    if not check_hurwitz(companion(k)):
        raise InvalidPoles("resulting polynomial is not Hurwitz")
    return k


def companion(bottom_row: ArrayLike) -> NDArray[np.float64]:
    row = np.asarray(bottom_row, dtype=np.float64)
    n = row.size
    m = np.zeros((n, n))
    m[:-1, 1:] = np.eye(n - 1)
    m[-1] = row
    return m


def default_poles(n: int) -> tuple[float, ...]:
    return tuple(-float(k) for k in range(1, n + 1))


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    """Gains for one control law plus the certificates that validate them.

    Fields not used by the selected law are ``None``.  ``k0`` holds the
    feedback coefficients applied to ``x_ij - eta_ij``; they are chosen so the
    tracking-error matrix ``S + d k0^T`` has the requested poles.
    """

    law: str
    P: NDArray[np.float64] | None = None
    K: NDArray[np.float64] | None = None
    gamma: float | None = None
    l0: NDArray[np.float64] | None = None
    mu: float | None = None
    k0: NDArray[np.float64] | None = None
    certificates: dict[str, Any] = field(default_factory=dict)


def _margins(chk: HurwitzCheck) -> dict[str, Any]:
    return {"hurwitz": chk.stable, "margin": chk.margin}


def synthesize(
    leader: LeaderModel,
    graph: Digraph,
    law: str,
    q_weight: ArrayLike | None = None,
    poles: Sequence[float] | None = None,
    safety_factor: float = 1.0,
) -> SynthesisResult:
    """Compute and certify every gain the selected law needs."""
    if law not in LAWS:
        raise InvalidParameter(f"unknown law {law!r}; expected one of {LAWS}")
    dec = build_laplacian(graph)
    lam_min = min_eigenvalue(dec)
    h = dec.follower_submatrix
    s, d = leader.S, leader.d
    certs: dict[str, Any] = {
        "h_eigenvalues": list(dec.eigenvalues),
        "lambda_min": lam_min,
    }
    q = _weight(q_weight, leader.dim)

    if law == "full_order":
        target = hurwitz_coeffs(leader.dim, poles if poles is not None else default_poles(leader.dim))
        k0 = (target - np.asarray(leader.bottom_row)) / leader.d_last
        err = check_hurwitz(s + np.outer(d, k0))
        if not err:
            raise SynthesisFailure("tracking-error matrix S + d k0^T is not Hurwitz")
        l0, mu = observer_gain(leader, h, q)
        pt = solve_dual_p(leader, q)
        obs = check_hurwitz(observer_matrix(leader, h, l0))
        certs.update(
            {
                "target_polynomial": list(map(float, target)),
                "tracking_error_matrix": _margins(err),
                "dual_riccati_residual": riccati_residual(s.T, leader.c, q, pt),
                "observer_matrix": _margins(obs),
                "mu": mu,
            }
        )
        return SynthesisResult(law, k0=k0, l0=l0, mu=mu, certificates=certs)

    p = _solve_are(s, d, q)
    certs.update(
        {
            "riccati_residual": riccati_residual(s, d, q, p),
            "p_min_eigenvalue": float(np.linalg.eigvalsh(p)[0]),
            "inequality_margin": inequality_margin(leader, p),
        }
    )
    if law != "reduced_order":
        return SynthesisResult(law, P=p, certificates=certs)

    k, gamma = gain_k(p, leader, lam_min, safety_factor, dec.eigenvalues)
    per_mode = [
        {"lambda": lam, **_margins(check_hurwitz(s + lam * np.outer(d, k)))} for lam in dec.eigenvalues
    ]
    assembled = check_hurwitz(np.kron(np.eye(h.shape[0]), s) + np.kron(h, np.outer(d, k)))
    if not assembled:
        raise SynthesisFailure("assembled coupling matrix is not Hurwitz")
    certs.update({"gamma": gamma, "modes": per_mode, "assembled": _margins(assembled)})
    return SynthesisResult(law, P=p, K=k, gamma=gamma, certificates=certs)
