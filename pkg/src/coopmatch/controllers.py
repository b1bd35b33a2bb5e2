"""Distributed compensators for cooperative model matching.

All four laws share the same output map

    u_i = -g_i(xi_i, x_i) + x_{i(nx+1)}

where ``x_{i(nx+1)}, ..., x_{i n}`` (``n`` the leader dimension) extend the
agent's integrator chain inside the compensator and ``xi_i`` copies the
z-dynamics.  They differ only in how the top of the extended chain is
driven:

* ``full_order_step``: leader-state observer ``eta_i`` plus pole-placement feedback.
* ``reduced_order_step``: diffusive coupling ``K * sum a_ij (xhat_i - xhat_j)``.
* ``adaptive_step``: self-tuning gain ``theta_i`` with a sign term; never reads ``v``.
* ``saturated_adaptive_step``: boundary-layer version with leakage.

When ``nx`` equals the leader dimension there is no chain extension and the
top-row value enters ``u`` directly.

Every step function is pure: state in, ``(u, compensator derivative)`` out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidParameter, MissingNeighborData, SynthesisFailure
from .plant import AgentModel, AgentState
from .synthesis import LeaderModel, SynthesisResult


@dataclass(frozen=True)
class CompensatorState:
    chain_ext: NDArray[np.float64]
    xi: NDArray[np.float64]
    eta: NDArray[np.float64] | None = None
    theta: float | None = None


@dataclass(frozen=True)
class NeighborPacket:
    """What node ``sender`` broadcasts: its extended chain and, for the
    full-order law, its leader estimate.  The leader sends ``xhat = eta = w``."""

    sender: int
    xhat: NDArray[np.float64]
    eta: NDArray[np.float64] | None = None


@dataclass(frozen=True, eq=False)
class ControlGains:
    """Law gains in the form the step functions consume."""

    leader: LeaderModel
    K: NDArray[np.float64] | None = None
    l0: NDArray[np.float64] | None = None
    k0: NDArray[np.float64] | None = None
    dP: NDArray[np.float64] | None = None  # d^T P
    epsilon: float | None = None
    sigma: float | None = None

    @classmethod
    def from_synthesis(
        cls,
        leader: LeaderModel,
        res: SynthesisResult,
        epsilon: float | None = None,
        sigma: float | None = None,
    ) -> "ControlGains":
        dp = None if res.P is None else leader.d @ res.P
        return cls(leader, K=res.K, l0=res.l0, k0=res.k0, dP=dp, epsilon=epsilon, sigma=sigma)


def sgn(s: float) -> float:
    """Sign with ``sgn(0) = 0``."""
    return 1.0 if s > 0 else (-1.0 if s < 0 else 0.0)


def sat(s: float, epsilon: float) -> float:
    """``s / epsilon`` inside ``[-epsilon, epsilon]``, ``sgn(s)`` outside."""
    if abs(s) <= epsilon:
        return s / epsilon
    return sgn(s)


def extended_chain(state: AgentState, comp: CompensatorState) -> NDArray[np.float64]:
    """``xhat_i = col(x_i1, ..., x_in)``: plant chain followed by the compensator extension."""
    if comp.chain_ext.size == 0:
        return state.x
    return np.concatenate((state.x, comp.chain_ext))


def disagreement(
    own: NDArray[np.float64],
    packets: Sequence[NeighborPacket],
    weights: Mapping[int, float],
    attr: str = "xhat",
) -> NDArray[np.float64]:
    """``sum_j a_ij (own - packet_j.attr)`` over the declared in-neighbors."""
    total = own * 0.0
    seen = 0
    for pkt in packets:
        a_ij = weights.get(pkt.sender)
        if a_ij is None:
            continue
        value = getattr(pkt, attr)
        if value is None:
            raise MissingNeighborData(f"neighbor {pkt.sender} sent no {attr}")
        total += a_ij * (own - value)
        seen += 1
    if seen != len(weights):
        missing = sorted(set(weights) - {p.sender for p in packets})
        raise MissingNeighborData(f"no {attr} received from neighbor(s) {missing}")
    return total


def _close_chain(
    agent: AgentModel, comp: CompensatorState, state: AgentState, top: float
) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """Shared output map; returns ``(u, chain_ext', xi')``."""
    ext = comp.chain_ext
    if ext.size:
        u = -agent.g(comp.xi, state.x) + ext[0]
        chain_dot = np.empty_like(ext)
        chain_dot[:-1] = ext[1:]
        chain_dot[-1] = top
    else:
        u = -agent.g(comp.xi, state.x) + top
        chain_dot = ext
    xi_dot = agent.A0 @ comp.xi + agent.f_eval(state.x) if agent.nz else comp.xi
    return u, chain_dot, xi_dot


def _require(value, name: str, law: str):
    if value is None:
        raise SynthesisFailure(f"{law} law needs gain {name}")
    return value


def full_order_step(
    agent: AgentModel,
    comp: CompensatorState,
    state: AgentState,
    packets: Sequence[NeighborPacket],
    v: float,
    gains: ControlGains,
    weights: Mapping[int, float],
) -> tuple[float, CompensatorState]:
    """Observer-based law: each agent reconstructs ``w`` and tracks its estimate."""
    leader = gains.leader
    k0 = _require(gains.k0, "k0", "full_order")
    l0 = _require(gains.l0, "l0", "full_order")
    if comp.eta is None:
        raise InvalidParameter("full_order law needs an eta state")
    xhat = extended_chain(state, comp)
    top = float(np.dot(leader.row, xhat)) + leader.d_last * v
    top += leader.d_last * float(np.dot(k0, xhat - comp.eta))
    u, chain_dot, xi_dot = _close_chain(agent, comp, state, top)

    eta_v = disagreement(comp.eta, packets, weights, "eta")
    eta = comp.eta
    eta_dot = np.empty_like(eta)
    eta_dot[:-1] = eta[1:]
    eta_dot[-1] = float(np.dot(leader.row, eta)) + leader.d_last * v
    eta_dot += l0 * eta_v[0]  # l0 c^T eta_v
    return u, CompensatorState(chain_dot, xi_dot, eta_dot, None)


def reduced_order_step(
    agent: AgentModel,
    comp: CompensatorState,
    state: AgentState,
    packets: Sequence[NeighborPacket],
    v: float,
    gains: ControlGains,
    weights: Mapping[int, float],
) -> tuple[float, CompensatorState]:
    """Diffusive law using neighbours' extended chains directly."""
    leader = gains.leader
    k = _require(gains.K, "K", "reduced_order")
    xhat = extended_chain(state, comp)
    xv = disagreement(xhat, packets, weights)
    top = float(np.dot(leader.row, xhat)) + leader.d_last * (v + float(np.dot(k, xv)))
    u, chain_dot, xi_dot = _close_chain(agent, comp, state, top)
    return u, CompensatorState(chain_dot, xi_dot, None, None)


def _adaptive(
    agent: AgentModel,
    comp: CompensatorState,
    state: AgentState,
    packets: Sequence[NeighborPacket],
    gains: ControlGains,
    weights: Mapping[int, float],
    switch,
    leak: float,
    law: str,
) -> tuple[float, CompensatorState]:
    leader = gains.leader
    dp = _require(gains.dP, "P", law)
    if comp.theta is None:
        raise InvalidParameter(f"{law} law needs a theta state")
    theta = comp.theta
    xhat = extended_chain(state, comp)
    s = float(np.dot(dp, disagreement(xhat, packets, weights)))
    top = float(np.dot(leader.row, xhat)) - leader.d_last * theta * (s + switch(s))
    u, chain_dot, xi_dot = _close_chain(agent, comp, state, top)
    theta_dot = s * s + abs(s) - leak * theta
    return u, CompensatorState(chain_dot, xi_dot, None, theta_dot)


def adaptive_step(
    agent: AgentModel,
    comp: CompensatorState,
    state: AgentState,
    packets: Sequence[NeighborPacket],
    gains: ControlGains,
    weights: Mapping[int, float],
) -> tuple[float, CompensatorState]:
    """Fully distributed sign-based law.

    With ``s = d^T P sum_j a_ij (xhat_i - xhat_j)`` the chain top is driven by
    ``-d_n theta (s + sgn s)`` and ``theta' = s^2 + |s|``.  Neither ``v`` nor its
    bound is used.
    """
    return _adaptive(agent, comp, state, packets, gains, weights, sgn, 0.0, "adaptive")


def saturated_adaptive_step(
    agent: AgentModel,
    comp: CompensatorState,
    state: AgentState,
    packets: Sequence[NeighborPacket],
    gains: ControlGains,
    weights: Mapping[int, float],
    epsilon: float | None = None,
    sigma: float | None = None,
) -> tuple[float, CompensatorState]:
    """Continuous approximation: ``sat_epsilon`` replaces ``sgn`` and ``theta`` leaks at rate ``sigma``."""
    epsilon = gains.epsilon if epsilon is None else epsilon
    sigma = gains.sigma if sigma is None else sigma
    if epsilon is None or epsilon <= 0:
        raise InvalidParameter(f"epsilon must be positive, got {epsilon}")
    if sigma is None or sigma <= 0:
        raise InvalidParameter(f"sigma must be positive, got {sigma}")
    return _adaptive(
        agent, comp, state, packets, gains, weights, lambda s: sat(s, epsilon), sigma, "saturated"
    )
