import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from coopmatch.errors import InvalidParameter, InvalidPoles, SynthesisFailure
from coopmatch.graph import build_laplacian, fig1_graph
from coopmatch.synthesis import (
    LeaderModel,
    check_hurwitz,
    companion,
    double_integrator,
    gain_k,
    hurwitz_coeffs,
    inequality_margin,
    observer_gain,
    observer_matrix,
    riccati_residual,
    solve_dual_p,
    solve_p,
    synthesize,
)

FIG1_H = np.array([[2.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def hand_p():
    # components of S^T P + P S - 2 P d d^T P + I = 0 for the double integrator:
    #   1 - 2 p12^2 = 0,  p11 - 2 p12 p22 = 0,  2 p12 - 2 p22^2 + 1 = 0
    p12 = 1 / math.sqrt(2)
    p22 = math.sqrt((1 + math.sqrt(2)) / 2)
    return np.array([[math.sqrt(2) * p22, p12], [p12, p22]])


def test_leader_companion_form():
    ld = LeaderModel((2.0, -3.0), d_last=0.5)
    np.testing.assert_array_equal(ld.S, [[0, 1], [2, -3]])
    np.testing.assert_array_equal(ld.d, [0, 0.5])
    np.testing.assert_array_equal(ld.c, [1, 0])
    assert ld.is_controllable()


def test_leader_rejects_zero_d():
    with pytest.raises(InvalidParameter):
        LeaderModel((0.0, 0.0), d_last=0.0)


def test_solve_p_double_integrator():
    p = solve_p(double_integrator())
    np.testing.assert_allclose(p, hand_p(), atol=1e-10)
    ld = double_integrator()
    assert riccati_residual(ld.S, ld.d, np.eye(2), p) <= 1e-9


def test_solve_p_scalar():
    # -2p - 2p^2 + 1 = 0
    p = solve_p(LeaderModel((-1.0,)))
    assert p[0, 0] == pytest.approx((math.sqrt(3) - 1) / 2, abs=1e-12)


def test_inequality_margin_bounded_by_q():
    ld = double_integrator()
    q = np.diag([3.0, 0.5])
    p = solve_p(ld, q)
    assert inequality_margin(ld, p) == pytest.approx(0.5, abs=1e-8)


@pytest.mark.parametrize("q", [np.zeros((2, 2)), -np.eye(2), [[1.0, 2.0], [0.0, 1.0]], np.eye(3)])
def test_solve_p_rejects_bad_weight(q):
    with pytest.raises(InvalidParameter):
        solve_p(double_integrator(), q)


def test_solve_p_uncontrollable_fails():
    # S has an unstable mode that d cannot reach
    class Fake:
        dim = 2
        S = np.array([[1.0, 0.0], [0.0, 1.0]])
        d = np.array([0.0, 1.0])

    with pytest.raises(SynthesisFailure):
        solve_p(Fake())


def test_gain_k_fig1():
    p = hand_p()
    lam = (3 - math.sqrt(5)) / 2
    k, gamma = gain_k(p, double_integrator(), lam, eigenvalues=build_laplacian(fig1_graph()).eigenvalues)
    assert gamma == pytest.approx((3 + math.sqrt(5)) / 2)
    np.testing.assert_allclose(k, [-1.8512, -2.8763], atol=1e-4)
    np.testing.assert_allclose(k, -gamma * p[1], rtol=1e-12)


def test_gain_k_gamma_floor():
    _, gamma = gain_k(hand_p(), double_integrator(), 1.0)
    assert gamma == 1.0
    _, gamma = gain_k(hand_p(), double_integrator(), 4.0)
    assert gamma == 1.0
    _, gamma = gain_k(hand_p(), double_integrator(), 1.0, safety_factor=2.0)
    assert gamma == 2.0


def test_gain_k_scalar():
    ld = LeaderModel((-1.0,))
    p = np.array([[0.3660]])
    k, _ = gain_k(p, ld, 1.0)
    np.testing.assert_allclose(k, [-0.3660])
    assert ld.S[0, 0] + k[0] < 0


def test_gain_k_validation():
    with pytest.raises(InvalidParameter):
        gain_k(hand_p(), double_integrator(), 0.0)
    with pytest.raises(InvalidParameter):
        gain_k(hand_p(), double_integrator(), 1.0, safety_factor=0.5)


def test_fig1_assembled_closed_loop_hurwitz():
    ld = double_integrator()
    k, _ = gain_k(solve_p(ld), ld, (3 - math.sqrt(5)) / 2)
    m = np.kron(np.eye(3), ld.S) + np.kron(FIG1_H, np.outer(ld.d, k))
    # block-diagonalizes over H's eigenvectors, so the spectrum is the union of the modes
    modes = np.concatenate(
        [np.linalg.eigvals(ld.S + lam * np.outer(ld.d, k)) for lam in np.linalg.eigvalsh(FIG1_H)]
    )
    np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(m)), np.sort_complex(modes), atol=1e-9)
    chk = check_hurwitz(m)
    assert chk and chk.margin > 0


def test_observer_matrix_hurwitz_fig1():
    ld = double_integrator()
    l0, mu = observer_gain(ld, FIG1_H)
    assert mu == pytest.approx(1 / ((3 - math.sqrt(5)) / 2))
    np.testing.assert_allclose(l0, -mu * solve_dual_p(ld) @ ld.c)
    assert check_hurwitz(observer_matrix(ld, FIG1_H, l0)).margin > 0


def test_dual_riccati_is_transposed_primal():
    ld = double_integrator()
    pt = solve_dual_p(ld)
    assert riccati_residual(ld.S.T, ld.c, np.eye(2), pt) <= 1e-9
    # for the double integrator the dual problem is the primal one with coordinates reversed
    flip = np.fliplr(np.eye(2))
    np.testing.assert_allclose(pt, flip @ hand_p() @ flip, atol=1e-10)


def test_mu_doubling_scalar_margin_increases():
    ld = LeaderModel((-1.0,))
    h = np.array([[1.0]])
    direction = -(solve_dual_p(ld) @ ld.c)
    margins = [check_hurwitz(observer_matrix(ld, h, mu * direction)).margin for mu in (1.0, 2.0, 4.0)]
    assert margins[0] < margins[1] < margins[2]


def test_mu_doubling_first_step_fig1():
    ld = double_integrator()
    lam = (3 - math.sqrt(5)) / 2
    direction = -(solve_dual_p(ld) @ ld.c)
    m1 = check_hurwitz(observer_matrix(ld, FIG1_H, direction / lam)).margin
    m2 = check_hurwitz(observer_matrix(ld, FIG1_H, 2 * direction / lam)).margin
    assert m2 >= m1 > 0


def test_observer_gain_gives_up():
    ld = double_integrator()
    with pytest.raises(SynthesisFailure):
        observer_gain(ld, FIG1_H, mu_max=0.1)


@pytest.mark.parametrize(
    "n, poles, expected",
    [
        (2, (-1, -1), (-1, -2)),
        (1, (-3,), (-3,)),
        (3, (-1, -2, -3), (-6, -11, -6)),
    ],
)
def test_hurwitz_coeffs_examples(n, poles, expected):
    np.testing.assert_allclose(hurwitz_coeffs(n, poles), expected)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5.0, -0.1), min_size=1, max_size=5))
def test_hurwitz_coeffs_match_symbolic_expansion(poles):
    s = sympy.symbols("s")
    expr = sympy.expand(sympy.prod([s - sympy.Float(p, 30) for p in poles]))
    monic = sympy.Poly(expr, s).all_coeffs()  # highest power first
    n = len(poles)
    expected = [-float(monic[n - j]) for j in range(n)]
    k = hurwitz_coeffs(n, poles)
    np.testing.assert_allclose(k, expected, rtol=1e-9, atol=1e-9)
    # repeated roots are ill-conditioned as eigenvalues, so compare characteristic polynomials
    np.testing.assert_allclose(np.poly(companion(k)), [float(c) for c in monic], rtol=1e-8, atol=1e-8)


@pytest.mark.parametrize("poles", [(-1.0,), (0.0, -1.0), (1.0, -1.0), (-1 + 1j, -1 - 1j), (float("nan"), -1.0)])
def test_hurwitz_coeffs_rejects(poles):
    with pytest.raises(InvalidPoles):
        hurwitz_coeffs(2, poles)


@pytest.mark.parametrize(
    "m, stable, margin",
    [([[0, 1], [-1, -2]], True, 1.0), ([[0, 1], [1, 0]], False, -1.0), ([[0, 1], [0, 0]], False, 0.0)],
)
def test_check_hurwitz_examples(m, stable, margin):
    chk = check_hurwitz(m)
    assert bool(chk) is stable
    assert chk.margin == pytest.approx(margin, abs=1e-6)


def test_synthesize_reduced_order_certificates():
    res = synthesize(double_integrator(), fig1_graph(), "reduced_order")
    c = res.certificates
    assert c["riccati_residual"] <= 1e-9
    assert res.gamma == pytest.approx((3 + math.sqrt(5)) / 2)
    assert all(m["hurwitz"] and m["margin"] > 0 for m in c["modes"])
    assert c["assembled"]["hurwitz"] and c["assembled"]["margin"] > 0


def test_synthesize_full_order_poles():
    ld = LeaderModel((1.0, -0.5))
    res = synthesize(ld, fig1_graph(), "full_order", poles=(-2.0, -3.0))
    eig = np.sort(np.linalg.eigvals(ld.S + np.outer(ld.d, res.k0)).real)
    np.testing.assert_allclose(eig, [-3.0, -2.0], atol=1e-9)
    assert res.certificates["observer_matrix"]["hurwitz"]


@pytest.mark.parametrize("law", ["adaptive", "saturated"])
def test_synthesize_adaptive_needs_only_p(law):
    res = synthesize(double_integrator(), fig1_graph(), law)
    np.testing.assert_allclose(res.P, hand_p(), atol=1e-10)
    assert res.K is None and res.l0 is None and res.k0 is None


def test_synthesize_unknown_law():
    with pytest.raises(InvalidParameter):
        synthesize(double_integrator(), fig1_graph(), "pid")


def test_synthesize_disconnected():
    from coopmatch.errors import NotConnected

    with pytest.raises(NotConnected):
        synthesize(double_integrator(), fig1_graph().without_edge(0, 3), "adaptive")


leaders = st.lists(st.floats(-3.0, 3.0), min_size=1, max_size=4).map(lambda r: LeaderModel(tuple(r)))


@settings(max_examples=60, deadline=None)
@given(leaders, st.floats(0.2, 5.0))
def test_riccati_solution_properties(ld, qscale):
    q = qscale * np.eye(ld.dim)
    p = solve_p(ld, q)
    assert np.allclose(p, p.T)
    assert np.linalg.eigvalsh(p)[0] > 0
    assert riccati_residual(ld.S, ld.d, q, p) <= 1e-9 * (1 + np.linalg.norm(p))
    # the Riccati identity forces the inequality margin to equal min eig(Q)
    assert inequality_margin(ld, p) == pytest.approx(qscale, rel=1e-6, abs=1e-7)


@settings(max_examples=60, deadline=None)
@given(leaders, st.floats(0.1, 3.0))
def test_gain_k_stabilizes_every_mode(ld, lam):
    p = solve_p(ld)
    k, gamma = gain_k(p, ld, lam)
    assert gamma * lam >= 1 - 1e-12
    for scale in (lam, 2 * lam, 10 * lam):
        assert check_hurwitz(ld.S + scale * np.outer(ld.d, k))


def test_observer_gain_scalar_first_value():
    ld = LeaderModel((-1.0,))
    l0, mu = observer_gain(ld, np.array([[1.0]]))
    assert mu == 1.0
    assert l0[0] <= 0


def test_perturbed_observer_gain_is_recertified():
    ld = double_integrator()
    l0, _ = observer_gain(ld, FIG1_H)
    bad = l0 + 2 * np.abs(l0)
    assert not check_hurwitz(observer_matrix(ld, FIG1_H, bad))
