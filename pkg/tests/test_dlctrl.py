import inspect
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import root

from hiergrid import dlctrl as dl
from hiergrid.netcase import CaseSyntaxError, CaseValidationError

N = dl.Node


def single_line(p, q, r=0.01, x=0.02, rate=np.inf, T=0.01, w=1.0):
    return dl.FeederCase("one", "0", (N("0"), N("1")), (dl.Line("a", "0", "1", r, x, rate),),
                         (dl.Building("b", "1", "a", w, w, T, p, q),))


def three_node(rate=0.12):
    """PCC - 1 - 2 on phase a, one building at each of nodes 1 and 2, plus one on phase b."""
    lines = (dl.Line("a", "0", "1", 0.02, 0.04, rate), dl.Line("a", "1", "2", 0.02, 0.04),
             dl.Line("b", "0", "1", 0.02, 0.04))
    b = (dl.Building("up", "1", "a", 0.3, 0.3, 0.2, 0.03, 0.01),
         dl.Building("down", "2", "a", 0.4, 0.4, 0.3, 0.05, 0.01),
         dl.Building("other", "1", "b", 0.3, 0.3, 0.25, 0.04, 0.01))
    return dl.FeederCase("g", "0", (N("0"), N("1"), N("2")), lines, b)


def newton_oracle(feeder, phase, P, Q):
    """Complex-voltage power flow of one phase, solved with a generic root finder."""
    net = feeder.nets[phase]
    p, q = dl._node_loads(feeder, phase, P, Q)
    n = net.n
    v0 = np.sqrt(feeder.u_pcc)
    z = net.r + 1j * net.x

    def volts(u):
        return np.concatenate([[v0], u[: n - 1] + 1j * u[n - 1:]])

    def mismatch(u):
        V = volts(u)
        inj = np.zeros(n, dtype=complex)
        for m in range(1, n):
            i = net.parent[m]
            I = (V[i] - V[m]) / z[m]
            inj[i] -= I
            inj[m] += I
        S = V * np.conj(inj) - (p + 1j * q)
        return np.concatenate([S.real[1:], S.imag[1:]])

    sol = root(mismatch, np.concatenate([np.full(n - 1, v0), np.zeros(n - 1)]), options={"xtol": 1e-14})
    assert np.max(np.abs(mismatch(sol.x))) < 1e-12
    V = volts(sol.x)
    Pf, Qf = np.zeros(n), np.zeros(n)
    for m in range(1, n):
        i = net.parent[m]
        S = V[i] * np.conj((V[i] - V[m]) / z[m])
        Pf[m], Qf[m] = S.real, S.imag
    return Pf, Qf, np.abs(V) ** 2


# ---- DistFlow -----------------------------------------------------------

def test_zero_load():
    f = dl.random_feeder(np.random.default_rng(1), 10)
    fl = dl.solve_distflow(f, np.zeros(10), np.zeros(10))
    for pf in fl.phases.values():
        assert np.all(pf.U == f.u_pcc)
        assert np.all(pf.P == 0) and np.all(pf.Q == 0)


def test_single_line_closed_form():
    r, x, p, q, u0 = 0.01, 0.02, 0.1, 0.05, 1.0
    z2 = r * r + x * x
    # current-squared l solves z2 l^2 + (2rp + 2xq - U0) l + p^2 + q^2 = 0 (smaller root)
    b = 2 * r * p + 2 * x * q - u0
    l = (-b - np.sqrt(b * b - 4 * z2 * (p * p + q * q))) / (2 * z2)
    P01, Q01 = p + r * l, q + x * l
    U1 = u0 - 2 * (r * P01 + x * Q01) + z2 * l
    fl = dl.solve_distflow(single_line(p, q), np.array([p]), np.array([q]))
    a = fl.phases["a"]
    assert abs(a.P[1] - P01) < 1e-10 and abs(a.Q[1] - Q01) < 1e-10 and abs(a.U[1] - U1) < 1e-10
    assert fl.P0 == pytest.approx(P01, abs=1e-10)


def test_lossless_sum():
    f = dl.random_feeder(np.random.default_rng(2), 12)
    lossless = dl.FeederCase(f.name, f.pcc, f.nodes, tuple(dl.Line(l.phase, l.src, l.dst, 0.0, 0.0) for l in f.lines),
                             f.buildings)
    fl = dl.solve_distflow(lossless, f.p_init, f.q_init)
    assert fl.P0 == f.p_init.sum()
    assert fl.Q0 == pytest.approx(f.q_init.sum(), abs=1e-15)


@pytest.mark.parametrize("seed", range(6))
def test_matches_complex_newton(seed):
    rng = np.random.default_rng(seed)
    f = dl.random_feeder(rng, int(rng.integers(5, 30)))
    P, Q = f.p_init * 3, f.q_init * 3
    fl = dl.solve_distflow(f, P, Q)
    for ph in dl.PHASES:
        Pf, Qf, U = newton_oracle(f, ph, P, Q)
        got = fl.phases[ph]
        np.testing.assert_allclose(got.U, U, atol=1e-8)
        np.testing.assert_allclose(got.P[1:], Pf[1:], atol=1e-8)
        np.testing.assert_allclose(got.Q[1:], Qf[1:], atol=1e-8)
        assert got.residual <= 1e-10


def test_phase_decoupling():
    f = dl.random_feeder(np.random.default_rng(4), 20)
    P, Q = f.p_init, f.q_init
    base = dl.solve_distflow(f, P, Q)
    k = next(i for i, b in enumerate(f.buildings) if b.phase == "b")
    P2 = P.copy()
    P2[k] += 0.05
    pert = dl.solve_distflow(f, P2, Q)
    for ph in ("a", "c"):
        np.testing.assert_array_equal(pert.phases[ph].U, base.phases[ph].U)
        np.testing.assert_array_equal(pert.phases[ph].P, base.phases[ph].P)
    assert pert.P0_phase["b"] > base.P0_phase["b"]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.integers(0, 100))
def test_pcc_monotone_in_each_load(seed, which):
    f = dl.random_feeder(np.random.default_rng(seed), 8)
    k = which % f.n_building
    h = 1e-6
    P = f.p_init.copy()
    Q = f.q_init.copy()
    base = dl.solve_distflow(f, P, Q)
    P[k] += h
    up = dl.solve_distflow(f, P, Q)
    Q[k] += h
    up2 = dl.solve_distflow(f, P, Q)
    assert (up.P0 - base.P0) / h >= 1.0 - 1e-6 and up.Q0 >= base.Q0 - 1e-14
    assert up2.Q0 > up.Q0 and up2.P0 >= up.P0 - 1e-14


def test_voltage_collapse():
    with pytest.raises(dl.NonConvergence):
        dl.solve_distflow(single_line(20.0, 10.0), np.array([20.0]), np.array([10.0]))


# ---- feeder data --------------------------------------------------------

def test_json_round_trip(tmp_path):
    f = dl.random_feeder(np.random.default_rng(5), 9)
    path = tmp_path / "f.json"
    path.write_text(json.dumps(dl.feeder_to_dict(f)))
    g = dl.load_feeder(path)
    assert g == f
    np.testing.assert_array_equal(dl.solve_distflow(g, g.p_init, g.q_init).phases["a"].U,
                                  dl.solve_distflow(f, f.p_init, f.q_init).phases["a"].U)


def test_json_syntax_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"pcc": "0",\n "nodes": [}')
    with pytest.raises(CaseSyntaxError) as exc:
        dl.load_feeder(path)
    assert exc.value.line == 2


def _lines(*pairs):
    return tuple(dl.Line("a", s, d, 0.01, 0.01) for s, d in pairs)


@pytest.mark.parametrize("lines, match", [
    (_lines(("0", "1"), ("1", "2"), ("0", "2")), "two parent"),
    (_lines(("0", "1"), ("2", "3"), ("3", "2")), "two parent|not connected"),
    (_lines(("0", "1"), ("2", "3")), "not connected"),
])
def test_topology_errors(lines, match):
    nodes = tuple(N(str(i)) for i in range(4))
    with pytest.raises(CaseValidationError, match=match):
        dl.FeederCase("x", "0", nodes, lines, (dl.Building("b", "1", "a", 1, 1, 1),))


@pytest.mark.parametrize("kw, match", [
    (dict(wp=0.7), "sum of wp"),
    (dict(wp=-0.1), "nonnegative"),
    (dict(phase="b"), "no phase"),
    (dict(T=0.0), "time constant"),
])
def test_building_errors(kw, match):
    b0 = dict(id="b", node="1", phase="a", wp=0.5, wq=0.5, T=1.0)
    b0.update(kw)
    others = (dl.Building("c", "1", "a", 0.5, 0.5, 1.0),)
    with pytest.raises(CaseValidationError, match=match):
        dl.FeederCase("x", "0", (N("0"), N("1")), _lines(("0", "1")), (dl.Building(**b0),) + others)


def test_zero_participation_rejected():
    with pytest.raises(CaseValidationError, match="sum of wq"):
        dl.FeederCase("x", "0", (N("0"), N("1")), _lines(("0", "1")), (dl.Building("b", "1", "a", 1.0, 0.0, 1.0),))


# ---- controller pieces --------------------------------------------------

def test_zero_error_fixed_point():
    f = three_node()
    p, q = f.p_init, f.q_init
    p2, q2 = dl.dl_ctrl_step(p, q, (0.0, 0.0), f, 0.5)
    np.testing.assert_array_equal(p2, p)
    np.testing.assert_array_equal(q2, q)


def test_one_step_deadbeat():
    f = dl.FeederCase("one", "0", (N("0"), N("1")), (dl.Line("a", "0", "1", 0.0, 0.0),),
                      (dl.Building("b", "1", "a", 1.0, 1.0, 0.01, 0.2, 0.1),))
    tr = dl.Tracker(f, dl.DlCtrlConfig(k_I=1.0, p0_target=0.35, q0_target=0.05))
    tr.step()
    assert tr.flow.P0 == pytest.approx(0.35, abs=1e-15)
    assert tr.flow.Q0 == pytest.approx(0.05, abs=1e-15)


def test_equal_weights_equal_increments():
    b = tuple(dl.Building(f"b{i}", "1", "a", 0.5, 0.5, 0.2) for i in range(2))
    f = dl.FeederCase("two", "0", (N("0"), N("1")), _lines(("0", "1")), b)
    p, q = dl.dl_ctrl_step(np.zeros(2), np.zeros(2), (0.3, -0.1), f, 0.1)
    assert p[0] == p[1] == pytest.approx(0.015)
    assert q[0] == q[1] == pytest.approx(-0.005)


def test_switched_off_factor_contributes_nothing():
    f = three_node()
    g = dl.GuardStatus.all_active(3)
    g.active_p[1] = False
    p, q = dl.dl_ctrl_step(f.p_init, f.q_init, (0.2, 0.2), f, 0.1, g)
    assert p[1] == f.p_init[1] and p[0] > f.p_init[0] and q[1] > f.q_init[1]


def test_controller_sees_only_aggregate_error():
    params = list(inspect.signature(dl.dl_ctrl_step).parameters)
    assert params == ["p_hat", "q_hat", "error", "feeder", "k_I", "guards"]


def test_guards_inactive_far_from_limits():
    f = three_node(rate=10.0)
    fl = dl.solve_distflow(f, f.p_init, f.q_init)
    g = dl.guard_update(fl, f, dl.DlCtrlConfig(), (0.5, 0.5))
    assert g.active_p.all() and g.active_q.all()


def test_capacity_guard_downstream_only():
    f0 = three_node(rate=np.inf)
    fl = dl.solve_distflow(f0, f0.p_init, f0.q_init)
    s = np.sqrt(fl.phases["a"].S2[1])
    f = three_node(rate=s / 0.999)  # line 0-1 of phase a at 99.9% of capacity
    fl = dl.solve_distflow(f, f.p_init, f.q_init)
    cfg = dl.DlCtrlConfig()
    assert fl.phases["a"].S2[1] > f.nets["a"].rate[1] ** 2 - cfg.eps_s * f.nets["a"].rate[1] ** 2
    g = dl.guard_update(fl, f, cfg, (0.1, 0.0))
    assert list(g.active_p) == [False, False, True]
    assert g.cause_p[0] == "capacity a:0-1"
    assert g.active_q.all()  # zero reactive error
    g = dl.guard_update(fl, f, cfg, (-0.1, -0.1))
    assert g.active_p.all() and g.active_q.all()


def test_capacity_guard_on_inner_line_spares_upstream():
    f0 = three_node(rate=np.inf)
    fl = dl.solve_distflow(f0, f0.p_init, f0.q_init)
    s = np.sqrt(fl.phases["a"].S2[2])
    lines = (dl.Line("a", "0", "1", 0.02, 0.04), dl.Line("a", "1", "2", 0.02, 0.04, s / 0.999),
             dl.Line("b", "0", "1", 0.02, 0.04))
    f = dl.FeederCase("g", "0", f0.nodes, lines, f0.buildings)
    g = dl.guard_update(dl.solve_distflow(f, f.p_init, f.q_init), f, dl.DlCtrlConfig(), (0.1, 0.1))
    assert list(g.active_p) == [True, False, True]
    assert list(g.active_q) == [True, False, True]


def test_voltage_guards_direction():
    f = three_node(rate=np.inf)
    fl = dl.solve_distflow(f, f.p_init, f.q_init)
    u2 = fl.phases["a"].U[2]
    near_low = dl.FeederCase("g", "0", (N("0"), N("1"), N("2", u2 - 0.001, 1.2)), f.lines, f.buildings)
    cfg = dl.DlCtrlConfig()
    g = dl.guard_update(fl, near_low, cfg, (0.1, -0.1))
    assert list(g.active_p) == [False, False, True] and g.active_q.all()
    assert g.cause_p[1] == "lower voltage a:2"
    near_high = dl.FeederCase("g", "0", (N("0"), N("1"), N("2", 0.8, u2 + 0.001)), f.lines, f.buildings)
    g = dl.guard_update(fl, near_high, cfg, (0.1, -0.1))
    assert g.active_p.all() and list(g.active_q) == [False, False, True]


def test_plant_unit_ratio_reaches_target():
    f = single_line(0.0, 0.0, T=0.01)
    P, Q = dl.plant_step(np.zeros(1), np.zeros(1), np.array([0.3]), np.array([0.1]), f, 0.01)
    assert P[0] == 0.3 and Q[0] == 0.1


def test_plant_geometric_response():
    f = single_line(0.0, 0.0, T=0.07)
    P = np.zeros(1)
    a = 0.01 / 0.07
    for t in range(1, 60):
        P, _ = dl.plant_step(P, np.zeros(1), np.array([0.4]), np.zeros(1), f, 0.01)
        assert P[0] == pytest.approx(0.4 * (1 - (1 - a) ** t), rel=1e-12)


def test_plant_boundary_ratio_bounded():
    f = single_line(0.0, 0.0, T=0.005)
    P = np.zeros(1)
    seen = []
    for _ in range(20):
        P, _ = dl.plant_step(P, np.zeros(1), np.array([1.0]), np.zeros(1), f, 0.01)
        seen.append(P[0])
    assert set(np.round(seen, 12)) == {0.0, 2.0}


def test_lyapunov_examples():
    assert dl.lyapunov_value([0.2], [0.0], [0.2], [0.0], 0.2, 0.0, 0.2, 0.0) == 0.0
    assert dl.lyapunov_value([0.3], [0.0], [0.2], [0.0], 0.3, 0.0, 0.2, 0.0) == pytest.approx(0.02)


# ---- closed loop --------------------------------------------------------

def _step_target(f, frac=0.95):
    fl = dl.solve_distflow(f, f.p_init, f.q_init)
    return fl, dl.DlCtrlConfig(p0_target=fl.P0 * frac, q0_target=fl.Q0 * frac)


def test_tracking_step_ten_buildings():
    f = dl.builtin_feeder("feeder10")
    assert f.n_building == 10
    fl, cfg = _step_target(f)
    r = dl.run_tracking(f, cfg, 5.0)
    step = 0.05 * fl.P0
    assert abs(r.P0[-1] - r.p0_target) < 1e-3 * step
    assert abs(r.Q0[-1] - r.q0_target) < 1e-3 * 0.05 * abs(fl.Q0)


def test_zero_gain_no_movement():
    f = dl.random_feeder(np.random.default_rng(12), 6)
    fl = dl.solve_distflow(f, f.p_init, f.q_init)
    r = dl.run_tracking(f, dl.DlCtrlConfig(k_I=0.0, p0_target=fl.P0 * 0.5), 0.5)
    np.testing.assert_array_equal(r.P[-1], f.p_init)
    np.testing.assert_allclose(r.P0, r.P0[0], rtol=0, atol=dl.SWEEP_TOL)


@pytest.mark.parametrize("scale", [0.05, 0.15, 0.3])
def test_lyapunov_decreases_for_stable_gains(scale):
    f = dl.random_feeder(np.random.default_rng(13), 15)
    fl, cfg = _step_target(f)
    cfg = dl.DlCtrlConfig(k_I=scale * cfg.t_s / f.T.max(), p0_target=cfg.p0_target, q0_target=cfg.q0_target)
    r = dl.run_tracking(f, cfg, 4.0)
    dV = np.diff(r.V[1:])
    assert np.all(dV <= 1e-15)
    assert r.V[-1] < r.V[1]


def test_infeasible_target_settles_at_guard_boundary():
    f = three_node()
    fl = dl.solve_distflow(f, f.p_init, f.q_init)
    lines = f.lines[:2] + (dl.Line("b", "0", "1", 0.02, 0.04, 0.08),)
    f = dl.FeederCase("g", "0", f.nodes, lines, f.buildings)
    r = dl.run_tracking(f, dl.DlCtrlConfig(p0_target=1.0, q0_target=fl.Q0), 15.0)
    assert r.violation.max() == 0.0
    assert r.P0[-1] < 1.0
    assert abs(r.P0[-1] - r.P0[-100]) < 1e-4
    assert any(not ev["active"] for ev in r.guard_events)


def test_factors_restore_after_reversal():
    f = three_node()
    tr = dl.Tracker(f, dl.DlCtrlConfig(p0_target=0.4))
    for _ in range(300):
        tr.step()
    assert not tr.guards.active_p[0]
    tr.p0_target = 0.05
    tr.step()
    assert tr.guards.active_p.all()


def test_assumption_warning():
    f = single_line(0.01, 0.005, T=0.004)
    with pytest.warns(dl.AssumptionViolated, match="t_s/T"):
        dl.run_tracking(f, dl.DlCtrlConfig(k_I=0.01), 0.02)


def test_no_warning_on_nominal_feeder():
    f = dl.random_feeder(np.random.default_rng(3), 5)
    with warnings.catch_warnings():
        warnings.simplefilter("error", dl.AssumptionViolated)
        dl.run_tracking(f, dl.DlCtrlConfig(), 0.05)


def test_csv_rows():
    f = dl.random_feeder(np.random.default_rng(3), 5)
    r = dl.run_tracking(f, dl.DlCtrlConfig(), 0.05)
    lines = r.to_csv().splitlines()
    assert len(lines) == 7
    assert lines[0].startswith("t,P0,Q0,V,p_hat0") and lines[0].endswith("guards")
    assert lines[1].split(",")[-1] == "11111/11111"
