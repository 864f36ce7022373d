"""Transmission-level optimizer.

Maximizes the minimum damping ratio (optionally traded off against generation
cost) over power-flow-feasible voltage profiles.  Each SNLP iteration builds a
piecewise-linear model of the damping ratios around the incumbent, solves a
trust-region NLP with the interior-point solver in :mod:`hiergrid.ipm`, and
accepts the candidate only if the true objective improves.

Decision vector ``x = (theta, |V|)`` over all buses; the slack angle is held
fixed.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import ipm
from .acpf import OperatingPoint, injections, solve_powerflow
from .netcase import NetworkCase, build_ybus
from .smallsignal import DynamicModel, ModalAnalysis, ModeGradients, SmallSignalError, masked_gradients, \
    modal_analysis

log = logging.getLogger(__name__)

NlpConfig = ipm.IpmConfig

PIN_TOL = 1e-10  # limit intervals narrower than this become equality rows
FEAS_TOL = 1e-6


def _default_restarts() -> tuple[float, ...]:
    return tuple(i / 13 for i in range(1, 13))


@dataclass(frozen=True)
class SnlpConfig:
    tau0: float = 0.5
    tau_tol: float = 1e-4
    k_max: int = 20
    parallel_tau0: tuple[float, ...] = field(default_factory=_default_restarts)
    nlp: ipm.IpmConfig = field(default_factory=ipm.IpmConfig)
    objective: str = "max-min-damping"  # or "cost-tradeoff"
    rho: float = 0.0
    margin: float = 0.05  # PWL rows for modes with xi < xi_min + margin
    max_backtrack: int = 30
    workers: int = 1

    def __post_init__(self):
        taus = self.parallel_tau0 or (self.tau0,)
        if not all(0 < t <= 1 for t in taus):
            raise ValueError("tau0 values must lie in (0, 1]")
        if not self.tau_tol > 0:
            raise ValueError("tau_tol must be positive")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.objective not in ("max-min-damping", "cost-tradeoff"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.k_max < 0:
            raise ValueError("k_max must be nonnegative")


# ---------------------------------------------------------------------------
# operational limits h(x) <= 0


@dataclass(frozen=True)
class OperationalLimits:
    pg: tuple[np.ndarray, np.ndarray]
    qg: tuple[np.ndarray, np.ndarray]
    pl: tuple[np.ndarray, np.ndarray]  # load-bus demand, ordered as case.load_bus
    ql: tuple[np.ndarray, np.ndarray]
    vm: tuple[np.ndarray, np.ndarray]
    rate: np.ndarray  # per branch, 0 = unlimited


def operational_limits(case: NetworkCase, include: np.ndarray | None = None) -> OperationalLimits:
    """Limits from the case data.  With ``include`` (a voltage vector), every
    interval is widened just enough to contain that operating point, so an
    infeasible base case still yields a nonempty feasible set."""
    g = case.generators
    pg = (np.array([x.pmin for x in g]), np.array([x.pmax for x in g]))
    qg = (np.array([x.qmin for x in g]), np.array([x.qmax for x in g]))
    pmin, pmax, qmin, qmax = case.bus_load_limits
    lb = case.load_bus
    pl = (pmin[lb].copy(), pmax[lb].copy())
    ql = (qmin[lb].copy(), qmax[lb].copy())
    vm = (np.array([b.vmin for b in case.buses]), np.array([b.vmax for b in case.buses]))
    rate = np.array([br.rate for br in case.branches])
    if include is not None:
        inj = injections(case, include)
        pg = (np.minimum(pg[0], inj.Pg), np.maximum(pg[1], inj.Pg))
        qg = (np.minimum(qg[0], inj.Qg), np.maximum(qg[1], inj.Qg))
        vmag = np.abs(include)
        vm = (np.minimum(vm[0], vmag), np.maximum(vm[1], vmag))
        flow = np.maximum(np.abs(inj.Sf), np.abs(inj.St))
        rate = np.where((rate > 0) & (flow > rate), flow, rate)
        # loads pinned in the data stay pinned at their nominal value
        pl = (np.minimum(pl[0], inj.Pl), np.maximum(pl[1], inj.Pl))
        ql = (np.minimum(ql[0], inj.Ql), np.maximum(ql[1], inj.Ql))
    return OperationalLimits(pg=pg, qg=qg, pl=pl, ql=ql, vm=vm, rate=rate)


def pinned_limits(case: NetworkCase, V: np.ndarray) -> OperationalLimits:
    """Every injection pinned to its value at ``V`` (a singleton feasible set)."""
    inj = injections(case, V)
    vm = np.abs(V)
    return OperationalLimits(pg=(inj.Pg, inj.Pg.copy()), qg=(inj.Qg, inj.Qg.copy()), pl=(inj.Pl, inj.Pl.copy()),
                             ql=(inj.Ql, inj.Ql.copy()), vm=(vm * 0.5, vm * 1.5),
                             rate=np.zeros(len(case.branches)))


def constraint_violation(case: NetworkCase, limits: OperationalLimits, V: np.ndarray) -> float:
    """Largest absolute violation of the operational limits at ``V`` (0 if feasible).

    Branch limits are measured in apparent power (p.u.)."""
    inj = injections(case, V)
    worst = 0.0
    for val, (lo, hi) in ((inj.Pg, limits.pg), (inj.Qg, limits.qg), (inj.Pl, limits.pl), (inj.Ql, limits.ql),
                          (np.abs(V), limits.vm)):
        if val.size:
            worst = max(worst, float(np.max(lo - val)), float(np.max(val - hi)))
    rated = limits.rate > 0
    if rated.any():
        flow = np.maximum(np.abs(inj.Sf), np.abs(inj.St))[rated]
        worst = max(worst, float(np.max(flow - limits.rate[rated])))
    return max(worst, 0.0)


# ---------------------------------------------------------------------------
# generation cost


def cost_segments(case: NetworkCase) -> list[list[tuple[float, float]]]:
    """Per generator, the (slope, intercept) pairs of its convex PWL cost."""
    out = []
    for k, g in enumerate(case.generators):
        pts = sorted(g.cost)
        segs = []
        for (p0, c0), (p1, c1) in zip(pts, pts[1:]):
            if p1 - p0 <= 0:
                continue
            a = (c1 - c0) / (p1 - p0)
            segs.append((a, c0 - a * p0))
        if any(s1[0] < s0[0] - 1e-12 for s0, s1 in zip(segs, segs[1:])):
            raise ValueError(f"generator {k}: cost curve is not convex")
        out.append(segs)
    return out


def generation_cost(case: NetworkCase, V: np.ndarray) -> float:
    """Total PWL generation cost ($/h) at voltage profile ``V``."""
    pg = injections(case, V).Pg
    total = 0.0
    for p, segs in zip(pg, cost_segments(case)):
        if segs:
            total += max(a * p + b for a, b in segs)
    return float(total)


# ---------------------------------------------------------------------------
# piecewise-linear damping model


@dataclass(frozen=True)
class PwlModel:
    x_hat: np.ndarray
    xi: np.ndarray  # damping ratio of each modelled mode at x_hat
    grad: np.ndarray  # (modes, 2 nb)
    modes: np.ndarray  # eigenvalue indices in the source ModalAnalysis

    def predict(self, x: np.ndarray) -> float:
        """max gamma subject to the PWL rows, i.e. the modelled xi_min at ``x``."""
        if not len(self.xi):
            return 1.0
        return float(np.min(self.xi + self.grad @ (np.asarray(x) - self.x_hat)))


def build_pwl_model(modal: ModalAnalysis, gradients: ModeGradients, x_hat: np.ndarray) -> PwlModel:
    del modal  # rows are fully described by the gradients
    return PwlModel(x_hat=np.asarray(x_hat, dtype=float).copy(), xi=np.asarray(gradients.xi, dtype=float),
                    grad=np.asarray(gradients.grad, dtype=float), modes=np.asarray(gradients.index))


# ---------------------------------------------------------------------------
# trust-region NLP


class _Bilinear:
    """``S = (P V) * conj(Q V)`` with polar derivatives in ``(theta, |V|)``."""

    def __init__(self, P: np.ndarray, Q: np.ndarray):
        self.P = P
        self.Q = Q

    def value(self, V):
        return (self.P @ V) * np.conj(self.Q @ V)

    def jac(self, V):
        P, Q = self.P, self.Q
        e = V / np.abs(V)
        PV, QV = P @ V, Q @ V
        dth = PV[:, None] * np.conj(Q * (1j * V)) + np.conj(QV)[:, None] * (P * (1j * V))
        dvm = PV[:, None] * np.conj(Q * e) + np.conj(QV)[:, None] * (P * e)
        return np.hstack([dth, dvm])

    def hess(self, V, w):
        """Hessian of ``Re(sum_l w_l S_l)``."""
        K = self.P.T @ (w[:, None] * np.conj(self.Q))
        T = K * np.outer(V, np.conj(V))
        rs, cs = T.sum(axis=1), T.sum(axis=0)
        m = np.abs(V)
        Htt = (T + T.T - np.diag(rs + cs)).real
        Htm = (1j * (T - T.T + np.diag(rs - cs))).real / m[None, :]
        Hmm = (T + T.T).real / np.outer(m, m)
        return np.block([[Htt, Htm], [Htm.T, Hmm]])


@dataclass
class NlpResult:
    y: np.ndarray
    gamma: float
    status: str  # optimal | max_iter | infeasible
    iterations: int
    objective: float


class TrustRegionNlp:
    """The NLP of one SNLP iteration, in variables ``(theta_free, |V|, gamma[, t])``."""

    def __init__(self, case: NetworkCase, limits: OperationalLimits, x_hat: np.ndarray, pwl: PwlModel,
                 tau: float, objective: str = "max-min-damping", rho: float = 0.0):
        nb = case.n_bus
        self.case, self.nb = case, nb
        self.x_hat = np.asarray(x_hat, dtype=float)
        adm = build_ybus(case)
        self.bus = _Bilinear(np.eye(nb), adm.Y)
        rated = limits.rate > 0
        self.branch = [_Bilinear(adm.Cf[rated], adm.Yf[rated]), _Bilinear(adm.Ct[rated], adm.Yt[rated])]
        self.inv_rate2 = 1.0 / limits.rate[rated] ** 2
        # box: trust region intersected with voltage limits; pinned entries are not variables
        cand = np.array([k for k in range(2 * nb) if k != case.slack])
        box_lo = self.x_hat[cand] - tau
        box_hi = self.x_hat[cand] + tau
        is_vm = cand >= nb
        box_lo[is_vm] = np.maximum(box_lo[is_vm], limits.vm[0][cand[is_vm] - nb])
        box_hi[is_vm] = np.minimum(box_hi[is_vm], limits.vm[1][cand[is_vm] - nb])
        keep = box_hi - box_lo > PIN_TOL
        self.free = cand[keep]  # x-positions of the free variables
        box_lo, box_hi = box_lo[keep], box_hi[keep]
        nx = len(self.free)
        self.i_gamma = nx
        self.cost_mode = objective == "cost-tradeoff"
        segs = cost_segments(case) if self.cost_mode else []
        self.t_gen = [k for k, s in enumerate(segs) if s]
        nt = len(self.t_gen)
        self.n = nx + 1 + nt
        V_hat = self.V_of(self._z_from_x(self.x_hat, 0.0, np.zeros(nt)))
        self.cost_scale = max(1.0, abs(generation_cost(case, V_hat))) if self.cost_mode else 1.0
        self.rho = rho

        # power rows: value = coef * comp(S[bus]) + const + lin . z
        gb, lb = case.gen_bus, case.load_bus
        sl = case.bus_load
        q_rows: list[tuple[int, bool, float, float, float, float]] = []
        for i in range(case.n_gen):
            q_rows.append((gb[i], False, 1.0, sl[gb[i]].real, limits.pg[0][i], limits.pg[1][i]))
            q_rows.append((gb[i], True, 1.0, sl[gb[i]].imag, limits.qg[0][i], limits.qg[1][i]))
        for j, b in enumerate(lb):
            q_rows.append((b, False, -1.0, 0.0, limits.pl[0][j], limits.pl[1][j]))
            q_rows.append((b, True, -1.0, 0.0, limits.ql[0][j], limits.ql[1][j]))
        eq, iq, iq_lin = [], [], []
        for bus, isq, c, d, lo, hi in q_rows:
            if hi - lo <= PIN_TOL:
                eq.append((bus, isq, c, d - 0.5 * (lo + hi)))
                continue
            if np.isfinite(hi):
                iq.append((bus, isq, c, d - hi))
                iq_lin.append(None)
            if np.isfinite(lo):
                iq.append((bus, isq, -c, lo - d))
                iq_lin.append(None)
        for slot, k in enumerate(self.t_gen):
            for a, b in segs[k]:
                iq.append((gb[k], False, a / self.cost_scale, (a * sl[gb[k]].real + b) / self.cost_scale))
                iq_lin.append(nx + 1 + slot)
        self.eq_rows = self._pack(eq)
        self.iq_rows = self._pack(iq)
        L = np.zeros((len(iq), self.n))
        for r, col in enumerate(iq_lin):
            if col is not None:
                L[r, col] = -1.0
        self.iq_lin = L

        # linear rows A z <= b: trust region and voltage box, gamma bounds, PWL rows
        xf = self.x_hat[self.free]
        A, b = [], []
        eye = np.eye(self.n)
        for k in range(nx):
            A.append(eye[k]); b.append(box_hi[k])
            A.append(-eye[k]); b.append(-box_lo[k])
        A.append(eye[self.i_gamma]); b.append(1.0)
        A.append(-eye[self.i_gamma]); b.append(1.0)
        for xi, g in zip(pwl.xi, pwl.grad):
            row = np.zeros(self.n)
            row[self.i_gamma] = 1.0
            row[:nx] = -g[self.free]
            A.append(row)
            b.append(xi - g[self.free] @ xf)
        self.A = np.array(A)
        self.b = np.array(b)
        self.pwl = pwl

    @staticmethod
    def _pack(rows):
        if not rows:
            return (np.zeros(0, int), np.zeros(0, bool), np.zeros(0), np.zeros(0))
        bus, isq, c, d = zip(*rows)
        return np.array(bus, int), np.array(isq, bool), np.array(c, float), np.array(d, float)

    # -- variable maps ------------------------------------------------------
    def _z_from_x(self, x, gamma, t):
        return np.concatenate([x[self.free], [gamma], t])

    def x_of(self, z):
        x = self.x_hat.copy()
        x[self.free] = z[: len(self.free)]
        return x

    def V_of(self, z):
        x = self.x_of(z)
        return x[self.nb:] * np.exp(1j * x[: self.nb])

    def start(self) -> np.ndarray:
        t = np.zeros(len(self.t_gen))
        if self.t_gen:
            pg = injections(self.case, self.V_of(self._z_from_x(self.x_hat, 0.0, t))).Pg
            segs = cost_segments(self.case)
            t = np.array([max(a * pg[k] + b for a, b in segs[k]) / self.cost_scale + 1e-3 for k in self.t_gen])
        return self._z_from_x(self.x_hat, self.pwl.predict(self.x_hat) - 1e-3, t)

    # -- callbacks ----------------------------------------------------------
    def _rows(self, rows, S, dS):
        bus, isq, c, d = rows
        comp = np.where(isq, S[bus].imag, S[bus].real)
        dcomp = np.where(isq[:, None], dS[bus].imag, dS[bus].real)
        return c * comp + d, c[:, None] * dcomp

    def _to_z(self, Jx):
        J = np.zeros((Jx.shape[0], self.n))
        J[:, : len(self.free)] = Jx[:, self.free]
        return J

    def objective(self, z):
        if self.cost_mode:
            return float(z[self.i_gamma + 1:].sum() - self.rho / self.cost_scale * z[self.i_gamma])
        return float(-z[self.i_gamma])

    def fg(self, z):
        df = np.zeros(self.n)
        if self.cost_mode:
            df[self.i_gamma + 1:] = 1.0
            df[self.i_gamma] = -self.rho / self.cost_scale
        else:
            df[self.i_gamma] = -1.0
        return self.objective(z), df

    def cons(self, z):
        V = self.V_of(z)
        S = self.bus.value(V)
        dS = self.bus.jac(V)
        g, Jg = self._rows(self.eq_rows, S, dS)
        h1, J1 = self._rows(self.iq_rows, S, dS)
        J1 = self._to_z(J1) + self.iq_lin
        h1 = h1 + self.iq_lin @ z
        hs, Js = [h1, self.A @ z - self.b], [J1, self.A]
        for br in self.branch:
            if len(self.inv_rate2):
                Sb = br.value(V)
                dSb = br.jac(V)
                hs.append(np.abs(Sb) ** 2 * self.inv_rate2 - 1.0)
                Js.append(self._to_z(2.0 * (np.conj(Sb)[:, None] * dSb).real * self.inv_rate2[:, None]))
        return np.concatenate(hs), np.vstack(Js), g, self._to_z(Jg)

    def hess(self, z, lam, mu):
        V = self.V_of(z)
        nb = self.nb
        w = np.zeros(nb, complex)
        for rows, mult in ((self.eq_rows, lam), (self.iq_rows, mu[: len(self.iq_rows[0])])):
            bus, isq, c, _ = rows
            np.add.at(w, bus, np.where(isq, -1j, 1.0) * c * mult)
        H = self.bus.hess(V, w)
        off = len(self.iq_rows[0]) + len(self.b)
        nr = len(self.inv_rate2)
        for br in self.branch:
            if nr:
                m = mu[off: off + nr] * self.inv_rate2
                off += nr
                Sb = br.value(V)
                dSb = br.jac(V)
                H = H + 2.0 * br.hess(V, m * np.conj(Sb)) + 2.0 * ((dSb.T * m) @ np.conj(dSb)).real
        out = np.zeros((self.n, self.n))
        f = self.free
        out[: len(f), : len(f)] = H[np.ix_(f, f)]
        return out

    def functions(self) -> ipm.NlpFunctions:
        return ipm.NlpFunctions(self.fg, self.cons, self.hess)


def solve_trust_region_nlp(case: NetworkCase, x_hat: np.ndarray, pwl: PwlModel, tau: float,
                           limits: OperationalLimits | None = None, nlp: ipm.IpmConfig | None = None,
                           objective: str = "max-min-damping", rho: float = 0.0) -> NlpResult:
    """Solve one trust-region subproblem around ``x_hat``.

    Returns ``x_hat`` itself (status ``infeasible``) when the solver fails to
    reach a feasible point that is at least as good as ``x_hat``.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    if limits is None:
        limits = operational_limits(case, include=x_hat[case.n_bus:] * np.exp(1j * x_hat[: case.n_bus]))
    prob = TrustRegionNlp(case, limits, x_hat, pwl, tau, objective, rho)
    z0 = prob.start()
    res = ipm.solve(prob.functions(), z0, nlp or ipm.IpmConfig())
    y = prob.x_of(res.x)
    gamma0 = pwl.predict(x_hat)
    base_obj = prob.objective(prob._z_from_x(x_hat, gamma0, z0[prob.i_gamma + 1:] - 1e-3))
    Vy = y[case.n_bus:] * np.exp(1j * y[: case.n_bus])
    ok = (np.all(np.isfinite(y)) and constraint_violation(case, limits, Vy) <= FEAS_TOL
          and np.max(np.abs(y - x_hat)) <= tau * (1 + 1e-9) + 1e-12)
    if ok and prob.objective(res.x) <= base_obj + 1e-9:
        status = "optimal" if res.converged else "max_iter"
        return NlpResult(y=y, gamma=float(res.x[prob.i_gamma]), status=status, iterations=res.iterations,
                         objective=prob.objective(res.x))
    log.info("trust-region NLP failed (%s); keeping the incumbent", res.message)
    return NlpResult(y=x_hat.copy(), gamma=gamma0, status="infeasible", iterations=res.iterations,
                     objective=base_obj)


# ---------------------------------------------------------------------------
# setpoints


@dataclass(frozen=True)
class Setpoints:
    Ef_hat: np.ndarray
    Pm_hat: np.ndarray
    Pl_hat: np.ndarray  # load-bus demand, ordered as case.load_bus
    Ql_hat: np.ndarray
    Vg_hat: np.ndarray  # terminal voltage magnitudes (exciter references)
    delta_hat: np.ndarray

    def to_dict(self) -> dict[str, list[float]]:
        return {k: [float(v) for v in np.asarray(a)] for k, a in asdict(self).items()}


def extract_setpoints(case: NetworkCase, x_hat: np.ndarray, model: DynamicModel | None = None) -> Setpoints:
    """Exciter voltages, mechanical powers and load targets that make ``x_hat``
    an equilibrium (machine internals are back-solved at ``x_hat``)."""
    model = model or DynamicModel(case)
    x_hat = np.asarray(x_hat, dtype=float)
    V = x_hat[case.n_bus:] * np.exp(1j * x_hat[: case.n_bus])
    eq = model.equilibrium(V)
    return Setpoints(Ef_hat=eq.Ef, Pm_hat=eq.Pm, Pl_hat=eq.Pl, Ql_hat=eq.Ql, Vg_hat=eq.vref, delta_hat=eq.delta)


# ---------------------------------------------------------------------------
# SNLP driver


@dataclass
class IterateRecord:
    k: int
    tau: float
    f: float
    xi_min: float
    step_norm: float
    accepted: bool
    backtrack_n: int
    nlp_status: str
    nlp_iterations: int
    violation: float = 0.0  # limit violation of the accepted point; 0 on rejected iterations


@dataclass
class RestartSummary:
    tau0: float
    f: float
    xi_min: float
    accepted: int


@dataclass
class SnlpResult:
    x_hat: np.ndarray
    V_hat: np.ndarray
    xi_min_before: float
    xi_min_after: float
    f_before: float
    f_after: float
    cost_before: float
    cost_after: float
    iterates: list[IterateRecord]
    setpoints: Setpoints
    tau0: float
    restarts: list[RestartSummary]
    modal_before: ModalAnalysis = field(repr=False)
    modal_after: ModalAnalysis = field(repr=False)
    limits: OperationalLimits = field(repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "x_hat": [float(v) for v in self.x_hat],
            "vm_hat": [float(v) for v in np.abs(self.V_hat)],
            "va_hat_deg": [math.degrees(float(v)) for v in np.angle(self.V_hat)],
            "xi_min_before": self.xi_min_before,
            "xi_min_after": self.xi_min_after,
            "f_before": self.f_before,
            "f_after": self.f_after,
            "cost_before": self.cost_before,
            "cost_after": self.cost_after,
            "tau0": self.tau0,
            "iterates": [asdict(r) for r in self.iterates],
            "restarts": [asdict(r) for r in self.restarts],
            "setpoints": self.setpoints.to_dict(),
        }


def _vec(x: np.ndarray, nb: int) -> np.ndarray:
    return x[nb:] * np.exp(1j * x[:nb])


class _Merit:
    def __init__(self, case: NetworkCase, model: DynamicModel, config: SnlpConfig):
        self.case, self.model, self.config = case, model, config

    def __call__(self, x: np.ndarray) -> tuple[float, ModalAnalysis]:
        modal = modal_analysis(self.case, _vec(x, self.case.n_bus), self.model)
        f = modal.xi_min
        if self.config.objective == "cost-tradeoff":
            f = self.config.rho * f - generation_cost(self.case, _vec(x, self.case.n_bus))
        return f, modal


def _run_single(case: NetworkCase, limits: OperationalLimits, x0: np.ndarray, tau0: float, config: SnlpConfig):
    model = DynamicModel(case)
    merit = _Merit(case, model, config)
    x = x0.copy()
    f, modal = merit(x)
    iterates: list[IterateRecord] = []
    tau = tau0
    k = 1
    while not (tau < config.tau_tol or k > config.k_max):
        grads = masked_gradients(model, modal, config.margin)
        pwl = build_pwl_model(modal, grads, x)
        res = solve_trust_region_nlp(case, x, pwl, tau, limits, config.nlp, config.objective, config.rho)
        step = float(np.max(np.abs(res.y - x)))
        rec = IterateRecord(k=k, tau=tau, f=f, xi_min=modal.xi_min, step_norm=step, accepted=False, backtrack_n=0,
                            nlp_status=res.status, nlp_iterations=res.iterations)
        if res.status == "infeasible" or step == 0.0:
            tau /= 2.0
            iterates.append(rec)
            continue
        try:
            fy, modal_y = merit(res.y)
        except SmallSignalError as exc:
            log.info("candidate rejected: %s", exc)
            tau /= 2.0
            iterates.append(rec)
            continue
        if fy > f:
            x, f, modal = res.y, fy, modal_y
            rec.accepted, rec.f, rec.xi_min = True, fy, modal_y.xi_min
            rec.violation = constraint_violation(case, limits, _vec(x, case.n_bus))
            iterates.append(rec)
            tau *= 2.0
            k += 1
            continue
        n = 1
        while n <= config.max_backtrack:
            try:
                fm, _ = merit(x + (res.y - x) / 2.0 ** n)
            except SmallSignalError:
                fm = -np.inf
            if fm > f:
                break
            n += 1
        n = min(n, config.max_backtrack)
        rec.backtrack_n = n
        iterates.append(rec)
        tau /= 2.0 ** n
    return x, f, modal, iterates


def _run_restart(args):
    case, limits, x0, tau0, config = args
    return _run_single(case, limits, x0, tau0, config)


def snlp(case: NetworkCase, config: SnlpConfig = SnlpConfig(), start: OperatingPoint | None = None) -> SnlpResult:
    """Run SNLP from the power-flow solution, once per restart value of tau0,
    and return the best restart."""
    op0 = start or solve_powerflow(case)
    x0 = op0.x.copy()
    limits = operational_limits(case, include=op0.V)
    model = DynamicModel(case)
    merit = _Merit(case, model, config)
    f0, modal0 = merit(x0)
    taus = tuple(config.parallel_tau0) or (config.tau0,)
    jobs = [(case, limits, x0, t, config) for t in taus]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            runs = list(ex.map(_run_restart, jobs))
    else:
        runs = [_run_restart(j) for j in jobs]
    best = max(range(len(runs)), key=lambda i: (runs[i][1], -i))  # earliest restart wins ties
    x, f, modal, iterates = runs[best]
    V = _vec(x, case.n_bus)
    summaries = [RestartSummary(tau0=t, f=r[1], xi_min=r[2].xi_min, accepted=sum(it.accepted for it in r[3]))
                 for t, r in zip(taus, runs)]
    return SnlpResult(
        x_hat=x, V_hat=V, xi_min_before=modal0.xi_min, xi_min_after=modal.xi_min, f_before=f0, f_after=f,
        cost_before=generation_cost(case, op0.V), cost_after=generation_cost(case, V), iterates=iterates,
        setpoints=extract_setpoints(case, x, model), tau0=taus[best], restarts=summaries, modal_before=modal0,
        modal_after=modal, limits=limits,
    )


@dataclass(frozen=True)
class TradeoffPoint:
    rho: float
    xi_min: float
    cost: float


def tradeoff_sweep(case: NetworkCase, rhos: Sequence[float], config: SnlpConfig = SnlpConfig()) -> list[TradeoffPoint]:
    """Solve the cost-tradeoff objective once per ``rho``; points come back in ``rhos`` order."""
    out = []
    for rho in rhos:
        r = snlp(case, replace(config, objective="cost-tradeoff", rho=float(rho)))
        out.append(TradeoffPoint(float(rho), r.xi_min_after, r.cost_after))
    return out
