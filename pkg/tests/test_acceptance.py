"""End-to-end acceptance gate.

Every criterion runs at its stated tolerance and records one PASS/FAIL line;
the lines are printed in the pytest terminal summary (and immediately with
``-s``).  Runtimes are wall-clock on the machine running the suite.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from coopmatch.cli import load_scenario, write_trace
from coopmatch.graph import build_laplacian, fig1_graph
from coopmatch.sim import matched_initial_conditions, observer_convergence, run, tracking_report
from coopmatch.synthesis import check_hurwitz, double_integrator, riccati_residual, solve_p, synthesize

SEEDS = (0, 1, 2, 3, 4)
TAIL = 5.0 / 30.0  # t in [25, 30]


@pytest.fixture
def report(acceptance_log):
    def _report(number, title, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
        acceptance_log.append(line)
        print(line)
        return ok

    return _report


def scenario(name, law=None, seed=None, **kw):
    scn = load_scenario(name)
    if law is not None:
        scn = replace(scn, controller=replace(scn.controller, law=law))
    if seed is not None:
        scn = replace(scn, initial=replace(scn.initial, seed=seed))
    return replace(scn, **kw)


def tail_error(trace, fraction=TAIL):
    return tracking_report(trace, fraction).max_error


def test_criterion_01_riccati_certificate(report):
    t0 = time.perf_counter()
    ld = double_integrator()
    p = solve_p(ld, np.eye(2))
    elapsed = time.perf_counter() - t0
    p22 = math.sqrt((1 + math.sqrt(2)) / 2)
    expected = np.array([[math.sqrt(2) * p22, 1 / math.sqrt(2)], [1 / math.sqrt(2), p22]])
    err = float(np.max(np.abs(p - expected)))
    res = riccati_residual(ld.S, ld.d, np.eye(2), p)
    ok = err <= 1e-8 and res <= 1e-9 and elapsed < 1.0
    assert report(1, "P matches hand solution", ok, f"max|dP| = {err:.1e}, residual = {res:.1e}, {elapsed:.3f} s")


def test_criterion_02_spectral_certificate(report):
    t0 = time.perf_counter()
    dec = build_laplacian(fig1_graph())
    ld = double_integrator()
    res = synthesize(ld, fig1_graph(), "reduced_order")
    h = dec.follower_submatrix
    assembled = check_hurwitz(np.kron(np.eye(3), ld.S) + np.kron(h, np.outer(ld.d, res.K)))
    elapsed = time.perf_counter() - t0
    expected = sorted([(3 + math.sqrt(5)) / 2, 1.0, (3 - math.sqrt(5)) / 2], reverse=True)
    eig_err = float(np.max(np.abs(np.array(dec.eigenvalues) - expected)))
    modes = res.certificates["modes"]
    gamma_ok = abs(res.gamma - 1 / expected[-1]) < 1e-12
    modes_ok = all(m["hurwitz"] and m["margin"] > 0 for m in modes)
    asm_cert = res.certificates["assembled"]
    asm_ok = assembled.stable and assembled.margin > 0 and asm_cert["hurwitz"] and asm_cert["margin"] > 0
    ok = eig_err <= 1e-10 and gamma_ok and modes_ok and asm_ok and elapsed < 1.0
    margins = ", ".join(f"{m['margin']:.3f}" for m in modes)
    detail = f"eig err = {eig_err:.1e}, mode margins = [{margins}], assembled = {assembled.margin:.3f}, {elapsed:.3f} s"
    assert report(2, "H spectrum and closed-loop Hurwitz", ok, detail)


def test_criterion_03_observer_decay(report):
    scn = scenario("paper_fig2a", law="full_order")
    t0 = time.perf_counter()
    fits = observer_convergence(run(scn))
    elapsed = time.perf_counter() - t0
    ok = all(f.rate > 0 and f.r_squared >= 0.99 for f in fits) and elapsed < 30
    detail = "; ".join(f"agent {i} rate {f.rate:.3f} R2 {f.r_squared:.4f}" for i, f in enumerate(fits, 1))
    assert report(3, "observer error decays exponentially", ok, f"{detail}; {elapsed:.1f} s")


@pytest.mark.parametrize("number, name", [(4, "paper_fig2a"), (5, "paper_fig2b")])
def test_criteria_04_05_adaptive_tracking(report, number, name):
    t0 = time.perf_counter()
    worst = [tail_error(run(scenario(name, seed=s))) for s in SEEDS]
    elapsed = time.perf_counter() - t0
    ok = max(worst) < 0.05 and elapsed < 120
    detail = f"max tail |e| per seed = [{', '.join(f'{e:.1e}' for e in worst)}], {elapsed:.1f} s"
    label = "v = 0" if number == 4 else "v = -w1"
    assert report(number, f"adaptive law tracks, {label}, 5 seeds", ok, detail)


def test_criterion_06_reduced_order_tracking(report):
    t0 = time.perf_counter()
    runs = {(n, s): tail_error(run(scenario(n, law="reduced_order", seed=s))) for n in ("paper_fig2a", "paper_fig2b") for s in (0, 1)}
    elapsed = time.perf_counter() - t0
    ok = max(runs.values()) < 0.05 and elapsed < 60
    detail = ", ".join(f"{n[6:]}/seed {s}: {e:.1e}" for (n, s), e in runs.items())
    assert report(6, "reduced-order law tracks", ok, f"{detail}; {elapsed:.1f} s")


def test_criterion_07_adaptive_gain(report):
    # the tail drift of theta is a first-order discretization effect (see test_theta_drift_scales_with_step),
    # so the criterion is judged at a refined step inside the dt <= 1e-3 envelope
    deltas, monotone = {}, True
    t0 = time.perf_counter()
    for name in ("paper_fig2a", "paper_fig2b"):
        trace = run(scenario(name, dt=1e-4))
        deltas[name] = max(tracking_report(trace).theta_tail_delta)
        monotone &= all(bool(np.all(np.diff(a.theta) >= 0)) for a in trace.agents)
    elapsed = time.perf_counter() - t0
    ok = monotone and max(deltas.values()) < 1e-2
    detail = ", ".join(f"{n[6:]}: tail delta {d:.2e}" for n, d in deltas.items())
    assert report(7, "theta monotone, tail increment < 1e-2", ok, f"dt = 1e-4, monotone = {monotone}, {detail}; {elapsed:.1f} s")


def test_theta_drift_scales_with_step():
    """Halving dt halves the tail increment of theta: the drift is an Euler artifact, not growth."""
    drift = [max(tracking_report(run(scenario("paper_fig2a", dt=dt))).theta_tail_delta) for dt in (1e-3, 5e-4)]
    assert 1.6 < drift[0] / drift[1] < 2.4


def test_criterion_08_saturated_tunability(report):
    # v = -w1 acts as a bounded disturbance the continuous law can only attenuate; with v = 0 the
    # error converges to zero and the measured bound is integration noise
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in (0, 1, 2):
        errs = []
        for eps in (0.01, 0.005):
            scn = scenario("paper_fig2b", law="saturated", seed=seed)
            scn = replace(scn, controller=replace(scn.controller, epsilon=eps, sigma=eps))
            errs.append(tracking_report(run(scn)).max_error)
        ok &= errs[0] < 0.1 and errs[1] < errs[0]
        rows.append(f"seed {seed}: {errs[0]:.2e} -> {errs[1]:.2e}")
    elapsed = time.perf_counter() - t0
    assert report(8, "saturated law bounded and tunable", ok, f"fig2b, {'; '.join(rows)}; {elapsed:.1f} s")


def test_criterion_09_manifold_invariance(report):
    cases = [(n, law) for n in ("paper_fig2a",) for law in ("full_order", "reduced_order", "adaptive", "saturated")]
    # laws that read v keep the manifold for any input; the distributed laws only when v = 0
    cases += [("paper_fig2b", "full_order"), ("paper_fig2b", "reduced_order")]
    t0 = time.perf_counter()
    rows, ok = [], True
    for name, law in cases:
        scn = scenario(name, law=law)
        scn = replace(scn, initial=matched_initial_conditions(scn, seed=0))
        err = float(np.max(np.abs(run(scn).errors)))
        bound = 10 * scn.dt if law == "adaptive" else 10 * scn.dt**2
        ok &= err <= bound
        rows.append(f"{name[6:]}/{law}: {err:.1e} (<= {bound:.0e})")
    elapsed = time.perf_counter() - t0
    assert report(9, "matched manifold invariant over 30 s", ok, f"{'; '.join(rows)}; {elapsed:.1f} s")


def test_criterion_10_determinism(report, tmp_path):
    rows, ok = [], True
    for name in ("paper_fig2a", "paper_fig2b"):
        blobs = []
        for k in range(2):
            path = tmp_path / f"{name}_{k}.csv"
            write_trace(run(scenario(name)), path)
            blobs.append(path.read_bytes())
        same = blobs[0] == blobs[1]
        ok &= same
        rows.append(f"{name}: {'identical' if same else 'differs'} ({len(blobs[0])} bytes)")
    assert report(10, "byte-identical traces", ok, "; ".join(rows))
