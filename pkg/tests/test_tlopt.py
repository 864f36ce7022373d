import numpy as np
import pytest
from scipy.optimize import root

from hiergrid import smallsignal as ss
from hiergrid import tlopt as tl
from hiergrid.acpf import injections, solve_powerflow
from hiergrid.netcase import Branch, Bus, GenDynParams, Generator, Load, NetworkCase, build_ybus

WS = 2 * np.pi * 60
XP = X1 = X2 = 0.2
D_DAMP, H1 = 0.01, 3.0


def toy(pl=0.8, flex=0.5):
    """Machine -- flexible load -- stiff machine, classical models, pinned |V| at both machines."""

    def dyn(h, d):
        return GenDynParams(M=2 * h / WS, D=d, xd=XP, xq=XP, xdp=XP, xqp=XP)

    buses = (Bus(1, "PV", 1.0, 1.0), Bus(2, "PQ"), Bus(3, "slack", 1.0, 1.0))
    gens = (Generator(1, 0.5, 0, 0.5, 0.5, -5, 5, 1.0, dyn(H1, D_DAMP)),
            Generator(3, 0.3, 0, -5, 5, -5, 5, 1.0, dyn(3e6, 0.0)))
    loads = (Load(2, pl, 0.0, pl * (1 - flex), pl * (1 + flex), 0.0, 0.0),)
    return NetworkCase(100.0, buses, (Branch(1, 2, 0, X1), Branch(2, 3, 0, X2)), gens, loads)


def _solve(f, x0):
    sol = root(f, x0, options={"xtol": 1e-13})
    assert np.max(np.abs(f(sol.x))) < 1e-11
    return sol.x


def toy_xi_oracle(pl):
    """Independent phasor model: xi = D / (2 sqrt(K M)) against a stiff EMF."""

    def pf(u):
        th1, th2, v2 = u
        V = np.array([np.exp(1j * th1), v2 * np.exp(1j * th2), 1.0])
        I12 = (V[0] - V[1]) / (1j * X1)
        I23 = (V[1] - V[2]) / (1j * X2)
        S1, S2 = V[0] * np.conj(I12), V[1] * np.conj(-I12 + I23)
        return [S1.real - 0.5, S2.real + pl, S2.imag]

    th1, th2, v2 = _solve(pf, [0.1, 0.0, 1.0])
    V1, V2 = np.exp(1j * th1), v2 * np.exp(1j * th2)
    E = V1 + 1j * XP * (V1 - V2) / (1j * X1)
    E3 = 1.0 + 1j * XP * (1.0 - V2) / (1j * X2)
    Em, Xa = abs(E), XP + X1

    def pe(d):
        def bal(u):
            V = u[1] * np.exp(1j * u[0])
            S = V * np.conj((V - Em * np.exp(1j * d)) / (1j * Xa) + (V - E3) / (1j * (X2 + XP)))
            return [S.real + pl, S.imag]

        t2, w2 = _solve(bal, [th2, v2])
        return Em * w2 * np.sin(d - t2) / Xa

    d0, h = np.angle(E), 1e-5
    K = (pe(d0 + h) - pe(d0 - h)) / (2 * h)
    return D_DAMP / (2 * np.sqrt(K * 2 * H1 / WS))


@pytest.fixture(scope="module")
def flex9(case9):
    return case9.with_load_flexibility(0.2)


@pytest.fixture(scope="module")
def snlp9(flex9):
    return tl.snlp(flex9, tl.SnlpConfig(k_max=4, parallel_tau0=(0.1, 0.3, 0.6)))


def _pwl(case, V):
    model = ss.DynamicModel(case)
    modal = ss.modal_analysis(case, V, model)
    return modal, tl.build_pwl_model(modal, ss.masked_gradients(model, modal, 0.05), np.concatenate(
        [np.angle(V), np.abs(V)]))


# ---- PWL model ------------------------------------------------------------

def test_pwl_exact_at_expansion_point(case9, op9):
    modal, pwl = _pwl(case9, op9.V)
    assert pwl.predict(op9.x) == pytest.approx(modal.xi_min, abs=1e-15)


def test_pwl_single_mode_is_affine():
    g = np.array([1.0, -2.0, 0.5])
    pwl = tl.PwlModel(x_hat=np.zeros(3), xi=np.array([0.1]), grad=g[None, :], modes=np.array([0]))
    d = np.array([0.3, 0.1, -0.2])
    assert pwl.predict(d) - pwl.predict(np.zeros(3)) == pytest.approx(g @ d)
    assert pwl.predict(2 * d) - pwl.predict(d) == pytest.approx(g @ d)


@pytest.mark.parametrize("seed", range(5))
def test_pwl_prediction_near_expansion(case9, op9, seed):
    modal, pwl = _pwl(case9, op9.V)
    d = np.random.default_rng(seed).standard_normal(18)
    x = op9.x + 1e-4 * d / np.linalg.norm(d)
    true = ss.modal_analysis(case9, x[9:] * np.exp(1j * x[:9])).xi_min
    assert abs(pwl.predict(x) - true) < 1e-5


# ---- NLP derivatives ---------------------------------------------------

@pytest.mark.parametrize("objective", ["max-min-damping", "cost-tradeoff"])
def test_nlp_derivatives_fd(case39, op39, objective):
    case = case39.with_load_flexibility(0.1)
    _, pwl = _pwl(case, op39.V)
    prob = tl.TrustRegionNlp(case, tl.operational_limits(case, op39.V), op39.x, pwl, 0.1, objective, rho=500.0)
    rng = np.random.default_rng(3)
    z = prob.start() + 1e-2 * rng.standard_normal(prob.n)
    h, Jh, g, Jg = prob.cons(z)
    mu, lam = rng.random(len(h)), rng.standard_normal(len(g))
    H = prob.hess(z, lam, mu)
    eps = 1e-6
    for k in rng.choice(prob.n, 12, replace=False):
        e = np.zeros(prob.n)
        e[k] = eps
        hp, Jhp, gp, Jgp = prob.cons(z + e)
        hm, Jhm, gm, Jgm = prob.cons(z - e)
        np.testing.assert_allclose(Jh[:, k], (hp - hm) / (2 * eps), atol=1e-6 * max(1, np.abs(Jh).max()))
        np.testing.assert_allclose(Jg[:, k], (gp - gm) / (2 * eps), atol=1e-6 * max(1, np.abs(Jg).max()))
        dL = (Jhp.T @ mu + Jgp.T @ lam - Jhm.T @ mu - Jgm.T @ lam) / (2 * eps)
        np.testing.assert_allclose(H[:, k], dL, atol=1e-6 * np.abs(H).max())


def test_bilinear_branch_hessian_fd(case9):
    adm = build_ybus(case9)
    form = tl._Bilinear(adm.Cf, adm.Yf)
    rng = np.random.default_rng(0)
    th, vm = rng.uniform(-0.2, 0.2, 9), rng.uniform(0.9, 1.1, 9)
    w = rng.standard_normal(9) + 1j * rng.standard_normal(9)

    def grad(x):
        V = x[9:] * np.exp(1j * x[:9])
        return (w @ form.jac(V)).real

    x = np.concatenate([th, vm])
    H = form.hess(vm * np.exp(1j * th), w)
    fd = np.array([(grad(x + e) - grad(x - e)) / 2e-6 for e in 1e-6 * np.eye(18)]).T
    np.testing.assert_allclose(H, fd, atol=1e-6 * np.abs(H).max())


# ---- trust-region NLP ---------------------------------------------------

def test_zero_flexibility_returns_expansion_point(case9, op9):
    _, pwl = _pwl(case9, op9.V)
    res = tl.solve_trust_region_nlp(case9, op9.x, pwl, 0.2, tl.pinned_limits(case9, op9.V))
    assert np.max(np.abs(res.y - op9.x)) < 1e-6
    assert res.gamma <= pwl.predict(op9.x) + 1e-6


@pytest.mark.parametrize("tau", [1e-2, 1e-4, 1e-6])
def test_step_within_trust_region(flex9, op9, tau):
    _, pwl = _pwl(flex9, op9.V)
    res = tl.solve_trust_region_nlp(flex9, op9.x, pwl, tau)
    assert np.max(np.abs(res.y - op9.x)) <= tau * (1 + 1e-9)
    assert res.gamma >= pwl.predict(op9.x) - 1e-9


def test_toy_oracle_agrees_with_modal_analysis():
    case = toy()
    modal = ss.modal_analysis(case, solve_powerflow(case))
    assert modal.xi_min == pytest.approx(toy_xi_oracle(0.8), rel=1e-4)


def test_toy_step_direction_matches_oracle_sensitivity():
    case = toy()
    op = solve_powerflow(case)
    h = 1e-4
    dxi_dpl = (toy_xi_oracle(0.8 + h) - toy_xi_oracle(0.8 - h)) / (2 * h)
    assert abs(dxi_dpl) > 1e-6
    _, pwl = _pwl(case, op.V)
    res = tl.solve_trust_region_nlp(case, op.x, pwl, 0.05)
    assert res.status == "optimal"
    dpl = injections(case, res.y[3:] * np.exp(1j * res.y[:3])).Pl[0] - op.Pl[0]
    assert abs(dpl) > 1e-4
    assert np.sign(dpl) == np.sign(dxi_dpl)


# ---- setpoints ----------------------------------------------------------

def test_setpoints_reproduce_dispatch(case9, op9):
    sp = tl.extract_setpoints(case9, op9.x)
    np.testing.assert_allclose(sp.Pm_hat, op9.Pg, atol=1e-8)
    np.testing.assert_allclose(sp.Pl_hat, op9.Pl, atol=1e-8)
    np.testing.assert_allclose(sp.Ql_hat, op9.Ql, atol=1e-8)
    nonslack = case9.gen_bus != case9.slack
    np.testing.assert_allclose(sp.Pm_hat[nonslack], [g.pg for g, k in zip(case9.generators, nonslack) if k],
                               atol=1e-8)


def test_setpoints_conservation(case39, op39):
    sp = tl.extract_setpoints(case39, op39.x)
    inj = injections(case39, op39.V)
    losses = np.sum(inj.Sf + inj.St).real
    shunt = sum(b.gs * op39.vm[k] ** 2 for k, b in enumerate(case39.buses))
    assert sp.Pm_hat.sum() == pytest.approx(case39.bus_load.real.sum() + losses + shunt, abs=1e-8)


def test_classical_ef_equals_emf_magnitude():
    case = toy()
    op = solve_powerflow(case)
    sp = tl.extract_setpoints(case, op.x)
    Ig = ss.DynamicModel(case).gen_current(op.V)
    np.testing.assert_allclose(sp.Ef_hat, np.abs(op.V[case.gen_bus] + 1j * XP * Ig), atol=1e-12)


# ---- SNLP ---------------------------------------------------------------

def test_kmax_zero_returns_start(case9, op9):
    r = tl.snlp(case9, tl.SnlpConfig(k_max=0, parallel_tau0=(0.5,)))
    assert r.iterates == []
    np.testing.assert_allclose(r.x_hat, op9.x)
    assert r.xi_min_after == r.xi_min_before


def test_snlp_properties(flex9, snlp9):
    r = snlp9
    assert r.xi_min_after > r.xi_min_before
    acc = [it for it in r.iterates if it.accepted]
    assert acc and all(b.f > a.f for a, b in zip(acc, acc[1:]))
    assert acc[0].f > r.f_before
    assert all(it.step_norm <= it.tau * (1 + 1e-9) for it in acc)
    assert tl.constraint_violation(flex9, r.limits, r.V_hat) <= 1e-6
    assert r.xi_min_after == max(s.xi_min for s in r.restarts)
    # setpoints invariant
    inj = injections(flex9, r.V_hat)
    np.testing.assert_allclose(r.setpoints.Pm_hat, inj.Pg, atol=1e-8)
    np.testing.assert_allclose(r.setpoints.Pl_hat, inj.Pl, atol=1e-8)
    lo, hi = r.limits.pl
    assert np.all(r.setpoints.Pl_hat >= lo - 1e-6) and np.all(r.setpoints.Pl_hat <= hi + 1e-6)


def test_snlp_every_accepted_iterate_feasible(flex9):
    # replay a single restart and check each accepted point
    limits = tl.operational_limits(flex9, solve_powerflow(flex9).V)
    x, f, modal, its = tl._run_single(flex9, limits, solve_powerflow(flex9).x, 0.3, tl.SnlpConfig(k_max=3))
    assert tl.constraint_violation(flex9, limits, x[9:] * np.exp(1j * x[:9])) <= 1e-6
    assert sum(it.accepted for it in its) >= 1


def test_snlp_result_json(snlp9):
    import json
    d = snlp9.to_dict()
    json.dumps(d)
    assert d["xi_min_after"] == snlp9.xi_min_after and len(d["setpoints"]["Pm_hat"]) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        tl.SnlpConfig(tau0=0.0, parallel_tau0=())
    with pytest.raises(ValueError):
        tl.SnlpConfig(rho=-1.0)
    assert len(tl.SnlpConfig().parallel_tau0) == 12


def test_generation_cost(case39, op39):
    c = tl.generation_cost(case39, op39.V)
    pg = op39.Pg * case39.base_mva
    slopes = [g.cost[1][1] / (g.cost[1][0] * case39.base_mva) for g in case39.generators]
    assert c == pytest.approx(float(np.dot(slopes, pg)), rel=1e-9)


def test_nonconvex_cost_rejected(case9):
    from dataclasses import replace
    gens = list(case9.generators)
    gens[0] = replace(gens[0], cost=((0.0, 0.0), (1.0, 10.0), (2.0, 12.0)))
    with pytest.raises(ValueError, match="convex"):
        tl.cost_segments(replace(case9, generators=tuple(gens)))


def test_tradeoff_sweep_orders_points(flex9):
    cfg = tl.SnlpConfig(k_max=4, parallel_tau0=(0.3,))
    pts = tl.tradeoff_sweep(flex9, [0.0, 1e7], cfg)
    assert [p.rho for p in pts] == [0.0, 1e7]
    assert pts[1].xi_min >= pts[0].xi_min
    assert pts[1].cost >= pts[0].cost - 1e-6


def test_accepted_iterates_record_violation(snlp9):
    acc = [it for it in snlp9.iterates if it.accepted]
    assert acc and all(0.0 <= it.violation <= 1e-6 for it in acc)
