"""Fixed-step simulation of the leader, the followers and their compensators.

Smooth laws are integrated with classical RK4.  The sign-based adaptive law
has a discontinuous right-hand side and is integrated with explicit Euler
steps (``dt <= 1e-3``) using ``sgn(0) = 0``; the residual chattering is a
property of the discretised closed loop and shows up in the trace.  The
leader is smooth and receives no feedback, so it is always stepped with RK4
and its trajectory does not depend on the selected law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .controllers import (
    CompensatorState,
    ControlGains,
    NeighborPacket,
    adaptive_step,
    full_order_step,
    reduced_order_step,
    saturated_adaptive_step,
)
from .errors import NotApplicable, NumericBlowup, ValidationError
from .graph import Digraph, is_connected
from .plant import AgentModel, AgentState, LeaderInputPolicy, agent_derivative, check_relative_degree, leader_derivative
from .synthesis import LAWS, LeaderModel, SynthesisResult, synthesize

BLOWUP_THRESHOLD = 1e9
MAX_DISCONTINUOUS_DT = 1e-3
SMOOTH_LAWS = ("full_order", "reduced_order", "saturated")
DEFAULT_BOX = (-3.0, 3.0)


@dataclass(frozen=True)
class ControllerConfig:
    law: str = "adaptive"
    q_weight: tuple[tuple[float, ...], ...] | None = None
    poles: tuple[float, ...] | None = None
    safety_factor: float = 1.0
    epsilon: float = 0.01
    sigma: float = 0.01
    theta0: float = 0.0

    def __post_init__(self) -> None:
        if self.q_weight is not None:
            object.__setattr__(self, "q_weight", tuple(tuple(float(v) for v in row) for row in self.q_weight))
        if self.poles is not None:
            object.__setattr__(self, "poles", tuple(float(p) for p in self.poles))


@dataclass(frozen=True)
class AgentInit:
    """Explicit initial values for one follower; ``None`` fields are drawn at random."""

    z: tuple[float, ...] | None = None
    x: tuple[float, ...] | None = None
    chain_ext: tuple[float, ...] | None = None
    xi: tuple[float, ...] | None = None
    eta: tuple[float, ...] | None = None
    theta: float | None = None


@dataclass(frozen=True)
class InitialConditions:
    """Seeded uniform draw over ``box`` with optional explicit overrides.

    The draw order is fixed (``w``, then per agent ``z, x, chain_ext, xi, eta``)
    and does not depend on the control law, so two laws run from the same seed
    start from the same plant and leader state.
    """

    seed: int = 0
    box: tuple[float, float] = DEFAULT_BOX
    w: tuple[float, ...] | None = None
    agents: tuple[AgentInit, ...] | None = None


@dataclass(frozen=True)
class Scenario:
    graph: Digraph
    leader: LeaderModel
    input_policy: LeaderInputPolicy
    agents: tuple[AgentModel, ...]
    controller: ControllerConfig
    initial: InitialConditions = InitialConditions()
    dt: float = 1e-3
    t_final: float = 30.0
    name: str = ""
    output_dir: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "agents", tuple(self.agents))

    def with_overrides(self, **kwargs: Any) -> "Scenario":
        return replace(self, **kwargs)


def validate_scenario(scn: Scenario) -> None:
    """Check every modelling assumption before a run.

    Raises:
        ValidationError: naming the violated assumption and field.
    """
    g = scn.graph
    if len(scn.agents) != g.n_followers:
        raise ValidationError(
            f"graph has {g.n_followers} followers but {len(scn.agents)} agents are declared",
            "agent_count",
            "agents",
        )
    if not is_connected(g):
        raise ValidationError(
            "graph connectivity assumption violated: the leader must reach every follower "
            "and the follower subgraph must be undirected",
            "graph_connectivity",
            "graph.edges",
        )
    for k, m in enumerate(scn.agents):
        if not check_relative_degree(m, scn.leader):
            raise ValidationError(
                f"relative degree assumption violated: agent {k + 1} ({m.name}) has chain length "
                f"{m.nx} > leader dimension {scn.leader.dim}",
                "relative_degree",
                f"agents[{k}].nx",
            )
    if not scn.leader.is_controllable():
        raise ValidationError("leader pair (S, d) is not controllable", "leader_canonical_form", "leader")
    law = scn.controller.law
    if law not in LAWS:
        raise ValidationError(f"unknown controller law {law!r}", None, "controller.law")
    if scn.input_policy.private and law in ("full_order", "reduced_order"):
        raise ValidationError(
            f"the {law} law uses the leader input, which this scenario marks private; "
            "use the adaptive or saturated law",
            "leader_input_private",
            "controller.law",
        )
    if law == "saturated" and (scn.controller.epsilon <= 0 or scn.controller.sigma <= 0):
        raise ValidationError("saturated law needs epsilon > 0 and sigma > 0", "parameter_constraint", "controller")
    if not scn.dt > 0 or not scn.t_final > 0:
        raise ValidationError("dt and t_final must be positive", None, "sim")
    if law == "adaptive" and scn.dt > MAX_DISCONTINUOUS_DT:
        raise ValidationError(
            f"the sign-based law is integrated with explicit Euler and needs dt <= {MAX_DISCONTINUOUS_DT}",
            None,
            "sim.dt",
        )


# -- state layout ------------------------------------------------------------


@dataclass(frozen=True)
class _AgentSlices:
    z: slice
    x: slice
    chain: slice
    xi: slice
    eta: slice | None
    theta: int | None


def _layout(scn: Scenario) -> tuple[int, slice, list[_AgentSlices]]:
    n0 = scn.leader.dim
    law = scn.controller.law
    pos = n0
    out = []
    for m in scn.agents:
        z = slice(pos, pos + m.nz)
        pos += m.nz
        x = slice(pos, pos + m.nx)
        pos += m.nx
        chain = slice(pos, pos + n0 - m.nx)
        pos += n0 - m.nx
        xi = slice(pos, pos + m.nz)
        pos += m.nz
        eta = theta = None
        if law == "full_order":
            eta = slice(pos, pos + n0)
            pos += n0
        if law in ("adaptive", "saturated"):
            theta = pos
            pos += 1
        out.append(_AgentSlices(z, x, chain, xi, eta, theta))
    return pos, slice(0, n0), out


def initial_state(scn: Scenario) -> NDArray[np.float64]:
    dim, wsl, slices = _layout(scn)
    ic = scn.initial
    n0 = scn.leader.dim
    rng = np.random.default_rng(ic.seed)
    lo, hi = ic.box
    y = np.zeros(dim)
    w = rng.uniform(lo, hi, n0)
    y[wsl] = w if ic.w is None else ic.w
    for k, (m, sl) in enumerate(zip(scn.agents, slices)):
        drawn = {
            "z": rng.uniform(lo, hi, m.nz),
            "x": rng.uniform(lo, hi, m.nx),
            "chain_ext": rng.uniform(lo, hi, n0 - m.nx),
            "xi": rng.uniform(lo, hi, m.nz),
            "eta": rng.uniform(lo, hi, n0),
        }
        given = ic.agents[k] if ic.agents is not None else AgentInit()
        for key, target in (("z", sl.z), ("x", sl.x), ("chain_ext", sl.chain), ("xi", sl.xi), ("eta", sl.eta)):
            if target is None:
                continue
            value = getattr(given, key)
            vec = drawn[key] if value is None else np.asarray(value, dtype=np.float64)
            if vec.shape != (target.stop - target.start,):
                raise ValidationError(
                    f"initial {key} of agent {k + 1} must have length {target.stop - target.start}",
                    None,
                    f"sim.initial.agents[{k}].{key}",
                )
            y[target] = vec
        if sl.theta is not None:
            y[sl.theta] = scn.controller.theta0 if given.theta is None else given.theta
    return y


def matched_initial_conditions(scn: Scenario, seed: int = 0) -> InitialConditions:
    """Random start on the matched manifold: ``xhat_i = w``, ``xi_i = z_i``, ``eta_i = w``."""
    rng = np.random.default_rng(seed)
    lo, hi = scn.initial.box
    w = rng.uniform(lo, hi, scn.leader.dim)
    agents = []
    for m in scn.agents:
        z = tuple(rng.uniform(lo, hi, m.nz))
        agents.append(AgentInit(z=z, x=tuple(w[: m.nx]), chain_ext=tuple(w[m.nx :]), xi=z, eta=tuple(w)))
    return InitialConditions(seed=seed, box=scn.initial.box, w=tuple(w), agents=tuple(agents))


# -- trace -------------------------------------------------------------------


@dataclass(frozen=True)
class AgentSeries:
    name: str
    z: NDArray[np.float64]
    x: NDArray[np.float64]
    chain_ext: NDArray[np.float64]
    xi: NDArray[np.float64]
    eta: NDArray[np.float64] | None
    theta: NDArray[np.float64] | None
    u: NDArray[np.float64]

    @property
    def y(self) -> NDArray[np.float64]:
        return self.x[:, 0]


@dataclass(frozen=True, eq=False)
class SimTrace:
    """Time-indexed record of a run; every series shares ``times``."""

    times: NDArray[np.float64]
    w: NDArray[np.float64]
    v: NDArray[np.float64]
    agents: tuple[AgentSeries, ...]
    law: str
    seed: int
    dt: float
    synthesis: SynthesisResult | None = field(default=None, repr=False)

    @property
    def y_r(self) -> NDArray[np.float64]:
        return self.w[:, 0]

    @property
    def errors(self) -> NDArray[np.float64]:
        """Tracking errors ``e_i = y_i - y_r`` with shape ``(steps, N)``."""
        return np.column_stack([a.y - self.y_r for a in self.agents])

    def observer_errors(self) -> NDArray[np.float64]:
        """``||eta_i - w||`` per agent, shape ``(steps, N)``."""
        if any(a.eta is None for a in self.agents):
            raise NotApplicable("trace has no leader-observer states")
        return np.column_stack([np.linalg.norm(a.eta - self.w, axis=1) for a in self.agents])

    def table(self) -> tuple[list[str], NDArray[np.float64]]:
        """Column names and values in export order:
        ``t, w.., v, y_r`` then per agent ``z.., x.., xc.., xi.., eta.., u, e, theta``."""
        names = ["t"] + [f"w{k + 1}" for k in range(self.w.shape[1])] + ["v", "y_r"]
        cols = [self.times[:, None], self.w, self.v[:, None], self.y_r[:, None]]
        errs = self.errors
        n_x = 0
        for i, a in enumerate(self.agents, start=1):
            n_x = a.x.shape[1]
            blocks = [
                ("z", a.z, 1),
                ("x", a.x, 1),
                ("xc", a.chain_ext, n_x + 1),
                ("xi", a.xi, 1),
            ]
            if a.eta is not None:
                blocks.append(("eta", a.eta, 1))
            for prefix, arr, first in blocks:
                names += [f"{prefix}{i}_{k + first}" for k in range(arr.shape[1])]
                cols.append(arr)
            names += [f"u{i}", f"e{i}"]
            cols += [a.u[:, None], errs[:, i - 1 : i]]
            if a.theta is not None:
                names.append(f"theta{i}")
                cols.append(a.theta[:, None])
        return names, np.hstack(cols)


# -- integration ---------------------------------------------------------------


class _ClosedLoop:
    """Right-hand side of the full closed loop over a flat state vector."""

    def __init__(self, scn: Scenario, gains: ControlGains):
        self.scn = scn
        self.gains = gains
        self.dim, self.wsl, self.slices = _layout(scn)
        self.law = scn.controller.law
        self.weights = [scn.graph.in_neighbors(i) for i in range(1, len(scn.agents) + 1)]
        self.n = len(scn.agents)

    def __call__(self, t: float, y: NDArray[np.float64]) -> tuple[NDArray[np.float64], float, NDArray[np.float64]]:
        scn, gains, law = self.scn, self.gains, self.law
        dy = np.empty_like(y)
        w = y[self.wsl]
        wdot, v, _ = leader_derivative(scn.leader, w, scn.input_policy, t)
        dy[self.wsl] = wdot

        states, comps = [], []
        packets = [NeighborPacket(0, w, w)]
        for i, (m, sl) in enumerate(zip(scn.agents, self.slices), start=1):
            st = AgentState(y[sl.z], y[sl.x])
            comp = CompensatorState(
                y[sl.chain],
                y[sl.xi],
                None if sl.eta is None else y[sl.eta],
                None if sl.theta is None else float(y[sl.theta]),
            )
            states.append(st)
            comps.append(comp)
            xhat = st.x if comp.chain_ext.size == 0 else np.concatenate((st.x, comp.chain_ext))
            packets.append(NeighborPacket(i, xhat, comp.eta))

        u_all = np.empty(self.n)
        for k, (m, sl, st, comp) in enumerate(zip(scn.agents, self.slices, states, comps)):
            weights = self.weights[k]
            local = [packets[j] for j in weights]
            if law == "adaptive":
                u, cd = adaptive_step(m, comp, st, local, gains, weights)
            elif law == "saturated":
                u, cd = saturated_adaptive_step(m, comp, st, local, gains, weights)
            elif law == "reduced_order":
                u, cd = reduced_order_step(m, comp, st, local, v, gains, weights)
            else:
                u, cd = full_order_step(m, comp, st, local, v, gains, weights)
            pd = agent_derivative(m, st, u)
            dy[sl.z] = pd.z
            dy[sl.x] = pd.x
            dy[sl.chain] = cd.chain_ext
            dy[sl.xi] = cd.xi
            if sl.eta is not None:
                dy[sl.eta] = cd.eta
            if sl.theta is not None:
                dy[sl.theta] = cd.theta
            u_all[k] = u
        return dy, v, u_all


def _build_trace(
    scn: Scenario, loop: _ClosedLoop, times, ys, vs, us, synthesis: SynthesisResult | None
) -> SimTrace:
    agents = []
    for k, (m, sl) in enumerate(zip(scn.agents, loop.slices)):
        agents.append(
            AgentSeries(
                name=m.name,
                z=ys[:, sl.z],
                x=ys[:, sl.x],
                chain_ext=ys[:, sl.chain],
                xi=ys[:, sl.xi],
                eta=None if sl.eta is None else ys[:, sl.eta],
                theta=None if sl.theta is None else ys[:, sl.theta],
                u=us[:, k],
            )
        )
    return SimTrace(
        times, ys[:, loop.wsl], vs, tuple(agents), scn.controller.law, scn.initial.seed, scn.dt, synthesis
    )


def _leader_rk4(
    scn: Scenario, w: NDArray[np.float64], t: float, dt: float, k1: NDArray[np.float64]
) -> NDArray[np.float64]:
    half = 0.5 * dt
    k2 = leader_derivative(scn.leader, w + half * k1, scn.input_policy, t + half)[0]
    k3 = leader_derivative(scn.leader, w + half * k2, scn.input_policy, t + half)[0]
    k4 = leader_derivative(scn.leader, w + dt * k3, scn.input_policy, t + dt)[0]
    return w + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def synthesize_for(scn: Scenario) -> SynthesisResult:
    c = scn.controller
    return synthesize(scn.leader, scn.graph, c.law, c.q_weight, c.poles, c.safety_factor)


def run(scn: Scenario, synthesis: SynthesisResult | None = None) -> SimTrace:
    """Integrate the closed loop on the grid ``t_k = k * dt``, ``k = 0..round(t_final/dt)``.

    Raises:
        ValidationError: a modelling assumption fails.
        SynthesisFailure: gains could not be certified.
        NumericBlowup: a state norm exceeded ``1e9``; carries the partial trace.
    """
    validate_scenario(scn)
    if synthesis is None:
        synthesis = synthesize_for(scn)
    gains = ControlGains.from_synthesis(scn.leader, synthesis, scn.controller.epsilon, scn.controller.sigma)
    loop = _ClosedLoop(scn, gains)
    dt = scn.dt
    steps = int(round(scn.t_final / dt))
    times = np.arange(steps + 1) * dt
    ys = np.empty((steps + 1, loop.dim))
    vs = np.empty(steps + 1)
    us = np.empty((steps + 1, loop.n))
    y = initial_state(scn)
    euler = scn.controller.law not in SMOOTH_LAWS
    half = 0.5 * dt

    for k in range(steps + 1):
        t = times[k]
        k1, v, u = loop(t, y)
        ys[k], vs[k], us[k] = y, v, u
        if k == steps:
            break
        if euler:
            # followers take an explicit Euler step; the smooth, one-way-coupled leader
            # keeps the same RK4 update as the other laws so its series is law-independent
            w_next = _leader_rk4(scn, y[loop.wsl], t, dt, k1[loop.wsl])
            y = y + dt * k1
            y[loop.wsl] = w_next
        else:
            k2 = loop(t + half, y + half * k1)[0]
            k3 = loop(t + half, y + half * k2)[0]
            k4 = loop(t + dt, y + dt * k3)[0]
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        norm = float(np.max(np.abs(y)))
        if not math.isfinite(norm) or norm > BLOWUP_THRESHOLD:
            t_fail = float(times[k + 1])
            trace = _build_trace(scn, loop, times[: k + 1], ys[: k + 1], vs[: k + 1], us[: k + 1], synthesis)
            raise NumericBlowup(f"state norm exceeded {BLOWUP_THRESHOLD:g} at t = {t_fail:.6g}", t_fail, trace)
    return _build_trace(scn, loop, times, ys, vs, us, synthesis)


# -- analysis ------------------------------------------------------------------


@dataclass(frozen=True)
class DecayFit:
    """Exponential fit ``||eta_i - w|| ~ c0 * exp(-rate * t)``."""

    c0: float
    rate: float
    r_squared: float
    window_end: float
    converged_at_start: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "c0": self.c0,
            "rate": self.rate,
            "r_squared": self.r_squared,
            "window_end": self.window_end,
            "converged_at_start": self.converged_at_start,
        }


def observer_convergence(trace: SimTrace, floor: float = 1e-8) -> list[DecayFit]:
    """Least-squares fit of ``log ||eta_i - w||`` against time.

    The fit window runs from ``t = 0`` until the norm first drops to ``floor``.

    Raises:
        NotApplicable: the trace has no observer states.
    """
    errs = trace.observer_errors()
    t = trace.times
    fits = []
    for col in errs.T:
        below = np.flatnonzero(col <= floor)
        end = int(below[0]) if below.size else col.size
        if end < 3:
            fits.append(DecayFit(float(col[0]), math.inf, 1.0, float(t[0]), converged_at_start=True))
            continue
        tt, ll = t[:end], np.log(col[:end])
        slope, intercept = np.polyfit(tt, ll, 1)
        pred = intercept + slope * tt
        ss_tot = float(np.sum((ll - ll.mean()) ** 2))
        r2 = 1.0 - float(np.sum((ll - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
        fits.append(DecayFit(math.exp(intercept), -float(slope), r2, float(tt[-1])))
    return fits


@dataclass(frozen=True)
class TrackingReport:
    tail_fraction: float
    tail_start: float
    tail_max_error: tuple[float, ...]
    final_theta: tuple[float, ...] | None
    theta_tail_delta: tuple[float, ...] | None

    @property
    def max_error(self) -> float:
        return max(self.tail_max_error)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tail_fraction": self.tail_fraction,
            "tail_start": self.tail_start,
            "tail_max_error": list(self.tail_max_error),
            "max_tail_error": self.max_error,
            "final_theta": None if self.final_theta is None else list(self.final_theta),
            "theta_tail_delta": None if self.theta_tail_delta is None else list(self.theta_tail_delta),
        }


def tracking_report(trace: SimTrace, tail_fraction: float = 0.2) -> TrackingReport:
    """Worst tracking error and adaptive-gain drift over the last ``tail_fraction`` of the horizon."""
    if not 0 < tail_fraction < 1:
        raise ValueError("tail_fraction must lie in (0, 1)")
    t = trace.times
    start = t[-1] - tail_fraction * (t[-1] - t[0])
    mask = t >= start - 1e-12
    errs = np.abs(trace.errors[mask])
    tail_max = tuple(float(v) for v in errs.max(axis=0))
    final = delta = None
    if all(a.theta is not None for a in trace.agents):
        final = tuple(float(a.theta[-1]) for a in trace.agents)
        delta = tuple(float(a.theta[mask][-1] - a.theta[mask][0]) for a in trace.agents)
    return TrackingReport(tail_fraction, float(t[mask][0]), tail_max, final, delta)
