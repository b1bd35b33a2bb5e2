"""Follower agents in normal form and the input-driven leader.

A follower is

    z'      = A0 z + f(x)
    x_j'    = x_{j+1},            j < nx
    x_nx'   = u + g(z, x)
    y       = x_1

with A0 Hurwitz.  ``f`` and ``g`` are polynomials in named state
coordinates (``z1, z2, ..., x1, x2, ...``) so that scenario files stay
declarative.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import BoundViolation, InvalidParameter
from .synthesis import LeaderModel, check_hurwitz

_VAR = re.compile(r"^([zx])([1-9][0-9]*)$")

Term = tuple[float, tuple[tuple[str, int], ...]]


@dataclass(frozen=True)
class Polynomial:
    """Scalar polynomial ``sum coef * prod(var ** power)``.

    Example:
        ``Polynomial.from_terms([(-1.0, {"x1": 1}), (-1.0, {"x2": 1})])`` is ``-x1 - x2``.
    """

    terms: tuple[Term, ...]
    _compiled: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        compiled = []
        canon = []
        for coef, powers in self.terms:
            factors = []
            for name, power in powers:
                m = _VAR.match(name)
                if m is None:
                    raise InvalidParameter(f"unknown variable {name!r}; use z1, z2, ... or x1, x2, ...")
                if int(power) != power or power < 0:
                    raise InvalidParameter(f"power of {name} must be a non-negative integer")
                factors.append((m.group(1) == "z", int(m.group(2)) - 1, int(power)))
            canon.append((float(coef), tuple(sorted((n, int(p)) for n, p in powers))))
            compiled.append((float(coef), tuple(factors)))
        object.__setattr__(self, "terms", tuple(canon))
        object.__setattr__(self, "_compiled", tuple(compiled))

    @classmethod
    def from_terms(cls, terms: Sequence[tuple[float, Mapping[str, int]]]) -> "Polynomial":
        return cls(tuple((float(c), tuple(dict(p).items())) for c, p in terms))

    @classmethod
    def zero(cls) -> "Polynomial":
        return cls(())

    def variables(self) -> set[str]:
        return {name for _, powers in self.terms for name, _ in powers}

    def max_index(self, kind: str) -> int:
        idx = [int(n[1:]) for n in self.variables() if n[0] == kind]
        return max(idx, default=0)

    def __call__(self, z: Sequence[float], x: Sequence[float]) -> float:
        total = 0.0
        for coef, factors in self._compiled:
            val = coef
            for is_z, i, p in factors:
                val *= (z[i] if is_z else x[i]) ** p
            total += val
        return total


@dataclass(frozen=True, eq=False)
class AgentModel:
    """One heterogeneous follower in normal form (unit high-frequency gain).

    Args:
        name: Label used in traces and diagnostics.
        nx: Length of the integrator chain (relative degree).
        A0: ``nz x nz`` Hurwitz matrix; use shape ``(0, 0)`` for no z-dynamics.
        f: One polynomial in ``x`` per z-row.
        g: Polynomial in ``z`` and ``x`` entering the last chain row.
        builtin: ``(name, params)`` when built by a named factory.
    """

    name: str
    nx: int
    A0: NDArray[np.float64]
    f: tuple[Polynomial, ...]
    g: Polynomial
    builtin: tuple[str, tuple[tuple[str, float], ...]] | None = None

    def __post_init__(self) -> None:
        a0 = np.array(self.A0, dtype=np.float64).reshape(-1, len(self.f)) if len(self.f) else np.zeros((0, 0))
        a0.setflags(write=False)
        object.__setattr__(self, "A0", a0)
        object.__setattr__(self, "f", tuple(self.f))
        if self.nx < 1:
            raise InvalidParameter(f"{self.name}: nx must be >= 1")
        if a0.shape != (self.nz, self.nz):
            raise InvalidParameter(f"{self.name}: A0 must be {self.nz}x{self.nz}")
        if self.nz and not check_hurwitz(a0):
            raise InvalidParameter(f"{self.name}: A0 must be Hurwitz")
        for k, fk in enumerate(self.f):
            if fk.max_index("z"):
                raise InvalidParameter(f"{self.name}: f[{k}] may depend on x only")
            if fk.max_index("x") > self.nx:
                raise InvalidParameter(f"{self.name}: f[{k}] references x beyond x{self.nx}")
        if self.g.max_index("x") > self.nx or self.g.max_index("z") > self.nz:
            raise InvalidParameter(f"{self.name}: g references a coordinate outside the state")

    @property
    def nz(self) -> int:
        return len(self.f)

    @property
    def b_inf(self) -> float:
        return 1.0

    def f_eval(self, x: Sequence[float]) -> NDArray[np.float64]:
        return np.array([fk((), x) for fk in self.f])

    def g_eval(self, z: Sequence[float], x: Sequence[float]) -> float:
        return self.g(z, x)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AgentModel):
            return NotImplemented
        return (
            self.name == other.name
            and self.nx == other.nx
            and np.array_equal(self.A0, other.A0)
            and self.f == other.f
            and self.g == other.g
            and self.builtin == other.builtin
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class AgentState:
    z: NDArray[np.float64]
    x: NDArray[np.float64]


def agent_derivative(m: AgentModel, s: AgentState, u: float) -> AgentState:
    """Right-hand side of the follower dynamics under input ``u``."""
    zdot = m.A0 @ s.z + m.f_eval(s.x) if m.nz else np.zeros(0)
    xdot = np.empty(m.nx)
    xdot[:-1] = s.x[1:]
    xdot[-1] = m.b_inf * u + m.g(s.z, s.x)
    return AgentState(zdot, xdot)


def check_relative_degree(m: AgentModel, leader: LeaderModel) -> bool:
    return m.nx <= leader.dim


def lipschitz_estimate(
    m: AgentModel, low: float = -3.0, high: float = 3.0, samples: int = 2000, seed: int = 0
) -> float:
    """Empirical Lipschitz constant of ``g`` in ``z`` over a box.

    Draws ``samples`` random pairs ``(z, z + delta)`` with ``x`` fixed and
    returns the largest observed ratio ``|g(z+delta, x) - g(z, x)| / |delta|``.
    """
    if m.nz == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(samples):
        z = rng.uniform(low, high, m.nz)
        x = rng.uniform(low, high, m.nx)
        delta = rng.uniform(low, high, m.nz) - z
        norm = np.linalg.norm(delta)
        if norm == 0:
            continue
        best = max(best, abs(m.g(z + delta, x) - m.g(z, x)) / norm)
    return best


# -- built-in agents -------------------------------------------------------


def damping_oscillator() -> AgentModel:
    g = Polynomial.from_terms([(-1.0, {"x1": 1}), (-1.0, {"x2": 1})])
    return AgentModel("damping_oscillator", 2, np.zeros((0, 0)), (), g, ("damping_oscillator", ()))


def fitzhugh_nagumo(a: float = 1.0, b: float = 1.0, c: float = 1.0) -> AgentModel:
    """Controlled FitzHugh-Nagumo: ``z' = -c z + b x``, ``x' = x(a-x)(x-1) - z + u``."""
    if c <= 0:
        raise InvalidParameter(f"fitzhugh_nagumo requires c > 0, got c = {c}")
    # x(a - x)(x - 1) = -x^3 + (a + 1) x^2 - a x
    g = Polynomial.from_terms(
        [(-1.0, {"x1": 3}), (a + 1.0, {"x1": 2}), (-a, {"x1": 1}), (-1.0, {"z1": 1})]
    )
    f = (Polynomial.from_terms([(b, {"x1": 1})]),)
    params = (("a", float(a)), ("b", float(b)), ("c", float(c)))
    return AgentModel("fitzhugh_nagumo", 1, np.array([[-c]]), f, g, ("fitzhugh_nagumo", params))


def van_der_pol(a: float = 1.0) -> AgentModel:
    """Controlled Van der Pol: ``x2' = -x1 + a (1 - x1^2) x2 + u``."""
    g = Polynomial.from_terms([(-1.0, {"x1": 1}), (a, {"x2": 1}), (-a, {"x1": 2, "x2": 1})])
    return AgentModel("van_der_pol", 2, np.zeros((0, 0)), (), g, ("van_der_pol", (("a", float(a)),)))


BUILTIN_AGENTS: dict[str, Callable[..., AgentModel]] = {
    "damping_oscillator": damping_oscillator,
    "fitzhugh_nagumo": fitzhugh_nagumo,
    "van_der_pol": van_der_pol,
}


def make_builtin(name: str, params: Mapping[str, float] | None = None) -> AgentModel:
    try:
        factory = BUILTIN_AGENTS[name]
    except KeyError:
        raise InvalidParameter(f"unknown builtin agent {name!r}; choose from {sorted(BUILTIN_AGENTS)}") from None
    try:
        return factory(**dict(params or {}))
    except TypeError as exc:
        raise InvalidParameter(f"bad parameters for {name}: {exc}") from None


def builtin_agents(a2: float = 1.0, b2: float = 1.0, c2: float = 1.0, a3: float = 1.0) -> list[AgentModel]:
    """Damping oscillator, FitzHugh-Nagumo and Van der Pol followers."""
    return [damping_oscillator(), fitzhugh_nagumo(a2, b2, c2), van_der_pol(a3)]


# -- leader input ----------------------------------------------------------

POLICY_KINDS = ("zero", "state_feedback", "tabulated", "sine")


@dataclass(frozen=True)
class LeaderInputPolicy:
    """How the leader input ``v`` is produced.

    kinds:
        ``zero``: ``v = 0``.
        ``state_feedback``: ``v = gain . w``.
        ``tabulated``: linear interpolation of ``(times, values)``, held constant outside.
        ``sine``: ``v = amplitude * sin(frequency * t + phase)``.

    ``private`` marks the input as unavailable to followers; only the fully
    distributed laws may run under such a policy.
    """

    kind: str = "zero"
    gain: tuple[float, ...] = ()
    times: tuple[float, ...] = ()
    values: tuple[float, ...] = ()
    amplitude: float = 0.0
    frequency: float = 0.0
    phase: float = 0.0
    bound_check: bool = False
    private: bool = False

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise InvalidParameter(f"unknown input policy {self.kind!r}; expected one of {POLICY_KINDS}")
        for name in ("gain", "times", "values"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.kind == "tabulated":
            if len(self.times) != len(self.values) or not self.times:
                raise InvalidParameter("tabulated policy needs equal-length, non-empty times and values")
            if any(b <= a for a, b in zip(self.times, self.times[1:])):
                raise InvalidParameter("tabulated times must be strictly increasing")

    def value(self, t: float, w: NDArray[np.float64]) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "state_feedback":
            if len(self.gain) != len(w):
                raise InvalidParameter(f"feedback gain has length {len(self.gain)}, leader has {len(w)}")
            return float(np.dot(self.gain, w))
        if self.kind == "tabulated":
            return float(np.interp(t, self.times, self.values))
        return self.amplitude * math.sin(self.frequency * t + self.phase)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "bound_check": self.bound_check, "private": self.private}
        if self.kind == "state_feedback":
            out["gain"] = list(self.gain)
        elif self.kind == "tabulated":
            out["times"] = list(self.times)
            out["values"] = list(self.values)
        elif self.kind == "sine":
            out.update(amplitude=self.amplitude, frequency=self.frequency, phase=self.phase)
        return out


def leader_derivative(
    leader: LeaderModel, w: ArrayLike, policy: LeaderInputPolicy, t: float
) -> tuple[NDArray[np.float64], float, float]:
    """Return ``(w', v, y_r)`` at time ``t``.

    Raises:
        BoundViolation: ``policy.bound_check`` is set and ``|v| > input_bound``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (leader.dim,):
        raise InvalidParameter(f"leader state must have length {leader.dim}")
    v = policy.value(t, w)
    if policy.bound_check and abs(v) > leader.input_bound:
        raise BoundViolation(f"|v| = {abs(v):.6g} exceeds bound {leader.input_bound:.6g} at t = {t:.6g}")
    wdot = np.empty_like(w)
    wdot[:-1] = w[1:]
    wdot[-1] = float(np.dot(leader.row, w)) + leader.d_last * v
    return wdot, v, float(w[0])
