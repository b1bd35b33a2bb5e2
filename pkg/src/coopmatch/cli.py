"""Scenario files, run orchestration and trace/summary export.

Scenario files are TOML documents with the sections ``[graph]``,
``[leader]`` (with ``[leader.input]``), ``[[agents]]``, ``[controller]``,
``[sim]`` and ``[output]``.  See the bundled ``paper_fig2a.toml`` for a
complete example.

Exit status of the ``coopmatch`` command:

    0  tail tracking criterion met
    1  run finished but the tail criterion failed
    2  command-line usage error
    3  scenario could not be parsed or violates an assumption
    4  simulation failed (divergence, input bound, synthesis)
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import tomli
import tomli_w

from .errors import (
    BoundViolation,
    CoopMatchError,
    InvalidParameter,
    NumericBlowup,
    ParseError,
    SynthesisFailure,
    ValidationError,
)
from .graph import Digraph
from .plant import AgentModel, LeaderInputPolicy, Polynomial, make_builtin
from .sim import (
    AgentInit,
    ControllerConfig,
    InitialConditions,
    Scenario,
    SimTrace,
    observer_convergence,
    run,
    synthesize_for,
    tracking_report,
    validate_scenario,
)
from .synthesis import LAWS, LeaderModel, SynthesisResult

log = logging.getLogger(__name__)

BUNDLED = ("paper_fig2a", "paper_fig2b")

EXIT_OK = 0
EXIT_TAIL_FAILED = 1
EXIT_INVALID_SCENARIO = 3
EXIT_SIM_FAILED = 4


# -- parsing helpers -----------------------------------------------------------


def _get(table: Mapping[str, Any], key: str, path: str, kind=None, default=Ellipsis):
    if key not in table:
        if default is Ellipsis:
            raise ParseError(f"missing required field '{path}.{key}'")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ParseError(f"field '{path}.{key}' must be {name}, got {type(value).__name__}")
    return value


def _floats(value: Any, path: str) -> tuple[float, ...]:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ParseError(f"field '{path}' must be a list of numbers")
    return tuple(float(v) for v in value)


def _matrix(value: Any, path: str) -> tuple[tuple[float, ...], ...]:
    if not isinstance(value, list):
        raise ParseError(f"field '{path}' must be a list of rows")
    return tuple(_floats(row, f"{path}[{k}]") for k, row in enumerate(value))


def _polynomial(value: Any, path: str) -> Polynomial:
    if not isinstance(value, list):
        raise ParseError(f"field '{path}' must be a list of terms")
    terms = []
    for k, term in enumerate(value):
        tp = f"{path}[{k}]"
        if not isinstance(term, dict):
            raise ParseError(f"field '{tp}' must be a table with 'coef' and 'powers'")
        coef = _get(term, "coef", tp, float)
        powers = _get(term, "powers", tp, dict, {})
        for name, p in powers.items():
            if not isinstance(p, int) or isinstance(p, bool):
                raise ParseError(f"field '{tp}.powers.{name}' must be an integer")
        terms.append((coef, powers))
    try:
        return Polynomial.from_terms(terms)
    except InvalidParameter as exc:
        raise ParseError(f"field '{path}': {exc}") from None


def _poly_to_toml(p: Polynomial) -> list[dict[str, Any]]:
    return [{"coef": c, "powers": dict(powers)} for c, powers in p.terms]


def _parse_agent(doc: Mapping[str, Any], path: str) -> AgentModel:
    try:
        if "builtin" in doc:
            return make_builtin(_get(doc, "builtin", path, str), _get(doc, "params", path, dict, {}))
        f = _get(doc, "f", path, list, [])
        a0 = _matrix(_get(doc, "A0", path, list, []), f"{path}.A0")
        return AgentModel(
            name=_get(doc, "name", path, str, "custom"),
            nx=_get(doc, "nx", path, int),
            A0=np.array(a0, dtype=np.float64).reshape(len(f), len(f)) if f else np.zeros((0, 0)),
            f=tuple(_polynomial(fk, f"{path}.f[{k}]") for k, fk in enumerate(f)),
            g=_polynomial(_get(doc, "g", path, list), f"{path}.g"),
        )
    except InvalidParameter as exc:
        raise ValidationError(str(exc), "parameter_constraint", path) from None
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def _parse_policy(doc: Mapping[str, Any], path: str) -> LeaderInputPolicy:
    kwargs: dict[str, Any] = {
        "kind": _get(doc, "kind", path, str, "zero"),
        "bound_check": _get(doc, "bound_check", path, bool, False),
        "private": _get(doc, "private", path, bool, False),
    }
    for key in ("gain", "times", "values"):
        if key in doc:
            kwargs[key] = _floats(doc[key], f"{path}.{key}")
    for key in ("amplitude", "frequency", "phase"):
        if key in doc:
            kwargs[key] = _get(doc, key, path, float)
    try:
        return LeaderInputPolicy(**kwargs)
    except InvalidParameter as exc:
        raise ParseError(f"{path}: {exc}") from None


def _parse_initial(sim: Mapping[str, Any]) -> InitialConditions:
    seed = _get(sim, "seed", "sim", int, 0)
    box = _floats(_get(sim, "box", "sim", list, [-3.0, 3.0]), "sim.box")
    if len(box) != 2 or box[0] >= box[1]:
        raise ParseError("field 'sim.box' must be [low, high] with low < high")
    init = _get(sim, "initial", "sim", dict, None)
    if init is None:
        return InitialConditions(seed, box)
    w = _floats(init["w"], "sim.initial.w") if "w" in init else None
    agents = None
    if "agents" in init:
        agents = []
        for k, a in enumerate(_get(init, "agents", "sim.initial", list)):
            ap = f"sim.initial.agents[{k}]"
            if not isinstance(a, dict):
                raise ParseError(f"field '{ap}' must be a table")
            fields = {key: _floats(a[key], f"{ap}.{key}") for key in ("z", "x", "chain_ext", "xi", "eta") if key in a}
            if "theta" in a:
                fields["theta"] = _get(a, "theta", ap, float)
            agents.append(AgentInit(**fields))
        agents = tuple(agents)
    return InitialConditions(seed, box, w, agents)


def parse_scenario(doc: Mapping[str, Any], name: str = "") -> Scenario:
    """Build and validate a :class:`Scenario` from a parsed TOML document."""
    graph_doc = _get(doc, "graph", "", dict)
    n = _get(graph_doc, "followers", "graph", int)
    edges = []
    for k, e in enumerate(_get(graph_doc, "edges", "graph", list)):
        ep = f"graph.edges[{k}]"
        if not isinstance(e, dict):
            raise ParseError(f"field '{ep}' must be a table with 'from', 'to', 'weight'")
        edges.append((_get(e, "from", ep, int), _get(e, "to", ep, int), _get(e, "weight", ep, float, 1.0)))
    try:
        graph = Digraph.from_edges(n, edges)
    except ValueError as exc:
        raise ParseError(f"graph: {exc}") from None

    ld = _get(doc, "leader", "", dict)
    bottom = _floats(_get(ld, "bottom_row", "leader", list), "leader.bottom_row")
    dim = _get(ld, "dim", "leader", int, len(bottom))
    if dim != len(bottom):
        raise ParseError(f"field 'leader.bottom_row' must have {dim} entries")
    try:
        leader = LeaderModel(
            bottom, _get(ld, "d_last", "leader", float, 1.0), _get(ld, "input_bound", "leader", float, math.inf)
        )
    except InvalidParameter as exc:
        raise ValidationError(str(exc), "leader_canonical_form", "leader") from None
    policy = _parse_policy(_get(ld, "input", "leader", dict, {}), "leader.input")

    agents = tuple(_parse_agent(a, f"agents[{k}]") for k, a in enumerate(_get(doc, "agents", "", list)))

    cd = _get(doc, "controller", "", dict)
    law = _get(cd, "law", "controller", str)
    if law not in LAWS:
        raise ParseError(f"field 'controller.law' must be one of {LAWS}, got {law!r}")
    q = _get(cd, "q_weight", "controller", list, None)
    poles = _get(cd, "poles", "controller", list, None)
    controller = ControllerConfig(
        law=law,
        q_weight=None if q is None else _matrix(q, "controller.q_weight"),
        poles=None if poles is None else _floats(poles, "controller.poles"),
        safety_factor=_get(cd, "safety_factor", "controller", float, 1.0),
        epsilon=_get(cd, "epsilon", "controller", float, 0.01),
        sigma=_get(cd, "sigma", "controller", float, 0.01),
        theta0=_get(cd, "theta0", "controller", float, 0.0),
    )

    sim = _get(doc, "sim", "", dict, {})
    out = _get(doc, "output", "", dict, {})
    scn = Scenario(
        graph=graph,
        leader=leader,
        input_policy=policy,
        agents=agents,
        controller=controller,
        initial=_parse_initial(sim),
        dt=_get(sim, "dt", "sim", float, 1e-3),
        t_final=_get(sim, "t_final", "sim", float, 30.0),
        name=_get(doc, "name", "", str, name),
        output_dir=_get(out, "dir", "output", str, None),
    )
    validate_scenario(scn)
    return scn


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("coopmatch") / "scenarios" / f"{name}.toml"))


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario file, or a bundled scenario by name (``paper_fig2a``).

    Raises:
        ParseError: malformed TOML (with line and column) or a bad field.
        ValidationError: a modelling assumption is violated; ``.assumption`` names it.
    """
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        p = bundled_path(str(path))
    try:
        with open(p, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"{p}: {exc}") from None
    return parse_scenario(doc, p.stem)


def scenario_to_dict(scn: Scenario) -> dict[str, Any]:
    """Normalized document; ``parse_scenario`` of the result reproduces ``scn``."""
    leader: dict[str, Any] = {
        "dim": scn.leader.dim,
        "bottom_row": list(scn.leader.bottom_row),
        "d_last": scn.leader.d_last,
        "input_bound": scn.leader.input_bound,
        "input": scn.input_policy.to_dict(),
    }
    agents = []
    for m in scn.agents:
        if m.builtin is not None:
            name, params = m.builtin
            entry: dict[str, Any] = {"builtin": name}
            if params:
                entry["params"] = dict(params)
        else:
            entry = {
                "name": m.name,
                "nx": m.nx,
                "A0": m.A0.tolist(),
                "f": [_poly_to_toml(fk) for fk in m.f],
                "g": _poly_to_toml(m.g),
            }
        agents.append(entry)
    c = scn.controller
    controller: dict[str, Any] = {
        "law": c.law,
        "safety_factor": c.safety_factor,
        "epsilon": c.epsilon,
        "sigma": c.sigma,
        "theta0": c.theta0,
    }
    if c.q_weight is not None:
        controller["q_weight"] = [list(r) for r in c.q_weight]
    if c.poles is not None:
        controller["poles"] = list(c.poles)
    ic = scn.initial
    sim: dict[str, Any] = {"dt": scn.dt, "t_final": scn.t_final, "seed": ic.seed, "box": list(ic.box)}
    if ic.w is not None or ic.agents is not None:
        init: dict[str, Any] = {}
        if ic.w is not None:
            init["w"] = list(ic.w)
        if ic.agents is not None:
            init["agents"] = [
                {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(a).items() if v is not None}
                for a in ic.agents
            ]
        sim["initial"] = init
    doc: dict[str, Any] = {
        "name": scn.name,
        "graph": {
            "followers": scn.graph.n_followers,
            "edges": [{"from": s, "to": t, "weight": w} for s, t, w in scn.graph.edges()],
        },
        "leader": leader,
        "agents": agents,
        "controller": controller,
        "sim": sim,
    }
    if scn.output_dir is not None:
        doc["output"] = {"dir": scn.output_dir}
    return doc


def dump_scenario(scn: Scenario, path: str | Path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(scenario_to_dict(scn), fh)


# -- export --------------------------------------------------------------------


def write_trace(trace: SimTrace, path: str | Path) -> None:
    """Comma-separated trace, header row first, 17 significant digits."""
    names, data = trace.table()
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=",".join(names), comments="")


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def synthesis_summary(res: SynthesisResult) -> dict[str, Any]:
    out: dict[str, Any] = {"law": res.law}
    for key in ("P", "K", "gamma", "l0", "mu", "k0"):
        value = getattr(res, key)
        if value is not None:
            out[key] = value
    out["certificates"] = res.certificates
    return _plain(out)


@dataclass
class ExitReport:
    status: int
    passed: bool
    summary: dict[str, Any]
    trace_path: Path | None
    summary_path: Path


def run_and_export(
    scn: Scenario, out_dir: str | Path, tail_fraction: float = 0.2, tolerance: float = 0.05
) -> ExitReport:
    """Run ``scn`` and write ``trace.csv``, ``summary.json`` and ``scenario.toml`` into ``out_dir``.

    The returned status is 0 iff every agent's tail error stays below ``tolerance``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_scenario(scn, out / "scenario.toml")
    summary: dict[str, Any] = {
        "scenario": scn.name,
        "law": scn.controller.law,
        "seed": scn.initial.seed,
        "dt": scn.dt,
        "t_final": scn.t_final,
        "tolerance": tolerance,
    }
    trace_path: Path | None = out / "trace.csv"
    status = EXIT_SIM_FAILED
    trace = None
    try:
        res = synthesize_for(scn)
        summary["synthesis"] = synthesis_summary(res)
        trace = run(scn, res)
    except NumericBlowup as exc:
        summary.update(status="numeric_blowup", error=str(exc), divergence_time=exc.time)
        trace = exc.trace
    except (BoundViolation, SynthesisFailure) as exc:
        summary.update(status=type(exc).__name__, error=str(exc))
    passed = False
    if trace is not None:
        write_trace(trace, trace_path)
        if "status" not in summary:
            report = tracking_report(trace, tail_fraction)
            summary["tracking"] = report.to_dict()
            if scn.controller.law == "full_order":
                summary["observer_fits"] = [f.to_dict() for f in observer_convergence(trace)]
            passed = report.max_error < tolerance
            status = EXIT_OK if passed else EXIT_TAIL_FAILED
            summary["status"] = "pass" if passed else "tail_criterion_failed"
    else:
        trace_path = None
    summary["exit_status"] = status
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(_plain(summary), indent=2) + "\n")
    return ExitReport(status, passed, summary, trace_path, summary_path)


# -- command line --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="coopmatch",
        description="Simulate cooperative model matching of heterogeneous agents tracking an input-driven leader.",
    )
    p.add_argument("--scenario", required=True, help=f"scenario TOML file or bundled name ({', '.join(BUNDLED)})")
    p.add_argument("--out", help="output directory (default: [output].dir or ./runs/<scenario>)")
    p.add_argument("--dt", type=float, help="integration step")
    p.add_argument("--t-final", type=float, help="simulation horizon")
    p.add_argument("--seed", type=int, help="seed for random initial conditions")
    p.add_argument("--controller", choices=LAWS, help="override the control law")
    p.add_argument("--tail-fraction", type=float, default=0.2, help="tail window as a fraction of the horizon")
    p.add_argument("--tolerance", type=float, default=0.05, help="tail tracking-error tolerance")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        scn = load_scenario(args.scenario)
        overrides: dict[str, Any] = {}
        if args.dt is not None:
            overrides["dt"] = args.dt
        if args.t_final is not None:
            overrides["t_final"] = args.t_final
        if args.seed is not None:
            overrides["initial"] = replace(scn.initial, seed=args.seed)
        if args.controller is not None:
            overrides["controller"] = replace(scn.controller, law=args.controller)
        if overrides:
            scn = replace(scn, **overrides)
            validate_scenario(scn)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_INVALID_SCENARIO
    except ValidationError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        print(f"validation error{where}: {exc}", file=sys.stderr)
        return EXIT_INVALID_SCENARIO
    except (OSError, CoopMatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_SCENARIO

    out = args.out or scn.output_dir or str(Path("runs") / (scn.name or "scenario"))
    log.info("running %s (%s law, seed %d) into %s", scn.name, scn.controller.law, scn.initial.seed, out)
    report = run_and_export(scn, out, args.tail_fraction, args.tolerance)
    tracking = report.summary.get("tracking")
    if tracking:
        print(f"{scn.name}: max tail |e| = {tracking['max_tail_error']:.3e} -> {report.summary['status']}")
    else:
        print(f"{scn.name}: {report.summary['status']}: {report.summary.get('error', '')}")
    return report.status


if __name__ == "__main__":
    sys.exit(main())
