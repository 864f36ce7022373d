"""Time-domain simulation of the generator/network DAE.

Implicit trapezoidal rule with a simultaneous Newton solve on differential and
algebraic unknowns.  Topology events (fault shunts) land exactly on step
boundaries and are followed by an algebraic re-initialization.  Controllers
(governors, AGC, demand support, setpoint ramps) run as discrete-time blocks
that update the DAE inputs once per step and hold them over the step.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

import numpy as np
import scipy.linalg as sla
from scipy.optimize import least_squares

from .acpf import solve_powerflow
from .netcase import CaseSyntaxError, CaseValidationError, NetworkCase, builtin_case, load_case
from .smallsignal import DynamicModel, Equilibrium

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_IT = 12
LTE_TOL = 1e-6  # local truncation error bound on differential states
MIN_DT = 1e-5
V_UNDER = 0.7  # below this |V| loads turn from constant power to constant impedance
FAULT_Y = 1e3  # bolted-fault shunt susceptance magnitude, p.u.


class SimulationError(RuntimeError):
    pass


class NewtonFailure(SimulationError):
    pass


class AlgebraicSingularity(SimulationError):
    pass


class PoorFit(RuntimeError):
    def __init__(self, message: str, fit: Any = None):
        super().__init__(message)
        self.fit = fit


# ---- events and inputs -----------------------------------------------------

@dataclass(frozen=True)
class Fault:
    bus: int  # bus id
    t_on: float
    clearing: float  # duration, s
    y: complex = -1j * FAULT_Y

    def __post_init__(self):
        if not self.clearing > 0:
            raise ValueError("fault clearing time must be positive")


@dataclass(frozen=True)
class GenerationLoss:
    gen: int  # generator index
    mw: float
    t: float


@dataclass
class Inputs:
    """DAE inputs held constant over one step."""

    pm: np.ndarray
    Ef: np.ndarray
    vref: np.ndarray
    Pl: np.ndarray
    Ql: np.ndarray

    @classmethod
    def from_eq(cls, eq: Equilibrium) -> "Inputs":
        return cls(eq.Pm.copy(), eq.Ef.copy(), eq.vref.copy(), eq.Pl.copy(), eq.Ql.copy())

    def copy(self) -> "Inputs":
        return Inputs(self.pm.copy(), self.Ef.copy(), self.vref.copy(), self.Pl.copy(), self.Ql.copy())


class Controller(Protocol):
    def __call__(self, sim: "Simulator") -> None: ...


# ---- simulator -------------------------------------------------------------

class Simulator:
    """Holds the DAE state and advances it by trapezoidal steps.

    ``V`` fixes the initial equilibrium (defaults to the power-flow solution);
    the machine internals and inputs are back-solved from it.
    """

    def __init__(self, case: NetworkCase, V: np.ndarray | None = None, *, dt: float = 0.01,
                 under_voltage: float = V_UNDER, lte_tol: float | None = LTE_TOL):
        self.case = case
        self.base = DynamicModel(case)
        V = solve_powerflow(case).V if V is None else np.asarray(V, dtype=complex)
        self.eq = self.base.equilibrium(V)
        self.model = self.base
        self.inputs = Inputs.from_eq(self.eq)
        self.s = self.eq.state(self.base.omega_s)
        self.x = self.eq.x.copy()
        self.t = 0.0
        self.dt = dt
        self.v_under = under_voltage
        self.lte_tol = lte_tol  # None: fixed steps of dt, no error control
        self.shunts: dict[int, complex] = {}
        self.pm_loss = np.zeros(self.base.ng)  # mechanical power lost to generation-loss events
        self._models: dict[tuple, DynamicModel] = {(): self.base}
        self._lu = None
        self._lu_key: tuple | None = None
        self.stats = {"steps": 0, "substeps": 0, "rejected": 0, "newton": 0, "factorizations": 0, "max_lte": 0.0}
        self._hist = None
        self._h = dt
        ng, nb = self.base.ng, self.base.nb
        self._ns = 4 * ng
        self._lb_vm = self._ns + nb + self.base.lb  # columns of load-bus |V|
        self._rows_p = self._ns + 2 * ng + np.arange(self.base.nl)
        self._rows_q = self._rows_p + self.base.nl

    # -- helpers ------------------------------------------------------------
    @property
    def omega_s(self) -> float:
        return self.base.omega_s

    @property
    def V(self) -> np.ndarray:
        nb = self.base.nb
        return self.x[nb:] * np.exp(1j * self.x[:nb])

    def split(self):
        return self.base.split(self.s, self.x)

    def coi_omega(self, s: np.ndarray | None = None) -> float:
        s = self.s if s is None else s
        ng = self.base.ng
        M = self.base.M
        return float(M @ s[ng:2 * ng] / M.sum())

    def _scale(self, x):
        vm = x[self.base.nb:][self.base.lb]
        low = vm < self.v_under
        sc = np.ones_like(vm)
        dsc = np.zeros_like(vm)
        sc[low] = (vm[low] / self.v_under) ** 2
        dsc[low] = 2 * vm[low] / self.v_under ** 2
        return sc, dsc

    def _raw(self, s, x, u: Inputs):
        sc, _ = self._scale(x)
        return self.model.residual(s, x, self.eq, pm=u.pm - self.pm_loss, Ef=u.Ef, vref=u.vref, Pl=u.Pl, Ql=u.Ql, load_scale=sc)

    def _F(self, s, x, u: Inputs):
        # load-bus power rows divided by |V|: the plain power mismatch has a
        # spurious root at |V| = 0 that a post-fault Newton can converge to
        F = self._raw(s, x, u)
        vm = x[self.base.nb:][self.base.lb]
        F[self._rows_p] /= vm
        F[self._rows_q] /= vm
        return F

    def _J(self, s, x, u: Inputs):
        J = self.model.jacobian(s, x)
        _, dsc = self._scale(x)
        k = np.flatnonzero(dsc)
        if k.size:
            J[self._rows_p[k], self._lb_vm[k]] += u.Pl[k] * dsc[k]
            J[self._rows_q[k], self._lb_vm[k]] += u.Ql[k] * dsc[k]
        F = self._raw(s, x, u)
        vm = x[self.base.nb:][self.base.lb]
        for rows in (self._rows_p, self._rows_q):
            J[rows] /= vm[:, None]
            J[rows, self._lb_vm] -= F[rows] / vm ** 2
        return J

    def set_shunts(self, shunts: dict[int, complex]) -> None:
        """Switch topology (bus index -> extra shunt) and re-solve the network."""
        key = tuple(sorted(shunts.items()))
        if key not in self._models:
            self._models[key] = self.base.with_shunt(dict(shunts))
        self.shunts = dict(shunts)
        self.model = self._models[key]
        self._lu = None
        self._hist = None
        self.reinit_algebraic()

    def reinit_algebraic(self) -> None:
        """Damped Newton on the algebraic equations with the differential state
        frozen.  Falls back to the initial voltage profile as a starting guess."""
        guesses = [self.x.copy(), self.eq.x.copy()]
        guesses[1][:self.base.nb] += self.s[:self.base.ng].mean() - self.eq.delta.mean()
        last = "no start"
        for x0 in guesses:
            try:
                self.x = self._newton_alg(x0)
                return
            except AlgebraicSingularity as exc:
                last = str(exc)
        raise AlgebraicSingularity(f"t={self.t:.4f}: algebraic re-initialization failed ({last})")

    def _newton_alg(self, x: np.ndarray) -> np.ndarray:
        ns = self._ns
        g = self._F(self.s, x, self.inputs)[ns:]
        for it in range(50):
            err = np.max(np.abs(g))
            if err <= NEWTON_TOL:
                return x
            Jgx = self._J(self.s, x, self.inputs)[ns:, ns:]
            try:
                dx = sla.solve(Jgx, -g, check_finite=True)
            except (sla.LinAlgError, ValueError) as exc:
                raise AlgebraicSingularity(str(exc)) from None
            a = 1.0
            while a > 1e-4:
                xn = x + a * dx
                with np.errstate(all="ignore"):
                    gn = self._F(self.s, xn, self.inputs)[ns:]
                if np.all(np.isfinite(gn)) and np.linalg.norm(gn) < (1 - 1e-4 * a) * np.linalg.norm(g):
                    break
                a /= 2
            else:
                raise AlgebraicSingularity("line search stalled")
            x, g = xn, gn
        raise AlgebraicSingularity("no convergence")

    # -- one trapezoidal step -------------------------------------------------
    def _solve_step(self, h: float, z: np.ndarray, f0: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        ns = self._ns
        u = self.inputs
        n = len(z)
        key = (h, tuple(sorted(self.shunts.items())))
        fresh = False
        last = np.inf
        for it in range(1, NEWTON_MAX_IT + 1):
            s1, x1 = z[:ns], z[ns:]
            with np.errstate(all="ignore"):
                F = self._F(s1, x1, u)
            R = np.concatenate([s1 - self.s - 0.5 * h * (f0 + F[:ns]), F[ns:]])
            err = float(np.max(np.abs(R)))
            if not np.isfinite(err):
                break
            if err <= NEWTON_TOL:
                return s1, x1, it
            if self._lu is None or self._lu_key != key or (err > 0.25 * last and not fresh):
                J = self._J(s1, x1, u)
                A = np.empty((n, n))
                A[:ns] = -0.5 * h * J[:ns]
                A[:ns, :ns] += np.eye(ns)
                A[ns:] = J[ns:]
                try:
                    self._lu = sla.lu_factor(A, check_finite=True)
                except (ValueError, sla.LinAlgError):
                    break
                self._lu_key = key
                self.stats["factorizations"] += 1
                fresh = True
            else:
                fresh = False
            last = err
            z = z - sla.lu_solve(self._lu, R)
        self._lu = None
        raise NewtonFailure(f"t={self.t:.4f}: Newton did not converge with dt={h:g}")

    def forget_history(self) -> None:
        """Drop the multistep history (after a discontinuity)."""
        self._hist = None

    def step(self, dt: float | None = None) -> None:
        """Advance by ``dt`` using as many trapezoidal sub-steps as the local
        error tolerance requires.

        The local error is estimated with Milne's device: an explicit
        second-order (AB2) predictor against the trapezoidal corrector, whose
        leading error terms differ by a known factor.  Right after a
        discontinuity there is no history; a short first sub-step is used.
        """
        dt = self.dt if dt is None else dt
        ns = self._ns
        done = 0.0
        hist = self._hist
        if self.lte_tol is None:
            h = dt
        else:
            h = min(self._h, dt) if hist is not None else dt / 8
        while done < dt - 1e-12:
            h = min(h, dt - done)
            f0 = self._F(self.s, self.x, self.inputs)[:ns]
            if hist is not None:
                sp, xp, hp = hist
                r = h / hp
                fp = self._F(sp, xp, self.inputs)[:ns]
                s_pred = self.s + h * ((1 + r / 2) * f0 - (r / 2) * fp)
                x_pred = self.x + r * (self.x - xp)
            else:
                s_pred = self.s + h * f0
                x_pred = self.x
            try:
                s1, x1, its = self._solve_step(h, np.concatenate([s_pred, x_pred]), f0)
            except NewtonFailure:
                if h / 2 < MIN_DT:
                    raise
                h /= 2
                continue
            est = float(np.max(np.abs(s1 - s_pred))) / 6 if hist is not None else 0.0
            tol = np.inf if self.lte_tol is None else self.lte_tol
            if est > tol and h / 2 >= MIN_DT:
                h /= 2
                self.stats["rejected"] += 1
                continue
            hist = (self.s, self.x, h)
            self.s, self.x = s1, x1
            done += h
            self.t += h
            self.stats["newton"] += its
            self.stats["substeps"] += 1
            self.stats["max_lte"] = max(self.stats["max_lte"], est)
            if est < tol / 8:
                h = min(2 * h, dt)
        self._hist = hist
        self._h = h
        self.stats["steps"] += 1


# ---- trajectories ----------------------------------------------------------

@dataclass
class Trajectory:
    t: np.ndarray
    s: np.ndarray  # (steps, 4 ng)
    x: np.ndarray  # (steps, 2 nb)
    f_coi: np.ndarray  # centre-of-inertia frequency deviation, Hz
    ng: int
    nb: int
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    M: np.ndarray | None = None  # machine inertias, for centre-of-inertia quantities

    @property
    def delta(self) -> np.ndarray:
        return self.s[:, :self.ng]

    @property
    def omega(self) -> np.ndarray:
        return self.s[:, self.ng:2 * self.ng]

    @property
    def vm(self) -> np.ndarray:
        return self.x[:, self.nb:]

    def to_csv(self, gens: Iterable[int] | None = None) -> str:
        gens = range(self.ng) if gens is None else list(gens)
        buf = io.StringIO()
        head = ["t", "f_coi_hz"] + [f"delta{g}" for g in gens] + [f"omega{g}" for g in gens] + sorted(self.extra)
        buf.write(",".join(head) + "\n")
        for k in range(len(self.t)):
            row = [self.t[k], self.f_coi[k], *self.delta[k, list(gens)], *self.omega[k, list(gens)],
                   *(self.extra[e][k] for e in sorted(self.extra))]
            buf.write(",".join(f"{v:.12g}" for v in row) + "\n")
        return buf.getvalue()


class _Recorder:
    def __init__(self, sim: Simulator, probes: dict[str, Callable[[Simulator], float]] | None):
        self.sim = sim
        self.probes = probes or {}
        self.t, self.s, self.x, self.f = [], [], [], []
        self.extra: dict[str, list[float]] = {k: [] for k in self.probes}

    def __call__(self):
        sim = self.sim
        self.t.append(sim.t)
        self.s.append(sim.s.copy())
        self.x.append(sim.x.copy())
        self.f.append((sim.coi_omega() - sim.omega_s) / (2 * np.pi))
        for k, fn in self.probes.items():
            self.extra[k].append(float(fn(sim)))

    def result(self) -> Trajectory:
        return Trajectory(np.array(self.t), np.array(self.s), np.array(self.x), np.array(self.f), self.sim.base.ng,
                          self.sim.base.nb, {k: np.array(v) for k, v in self.extra.items()}, self.sim.base.M.copy())


Event = Fault | GenerationLoss


def _event_times(e: Event) -> list[tuple[float, str]]:
    if isinstance(e, Fault):
        return [(e.t_on, "on"), (e.t_on + e.clearing, "off")]
    return [(e.t, "loss")]


def _apply(sim: Simulator, e: Event, kind: str) -> None:
    if kind == "loss":
        sim.pm_loss[e.gen] += e.mw / sim.case.base_mva
        sim.forget_history()
        return
    b = sim.case.bus_index[e.bus]
    sh = dict(sim.shunts)
    sh[b] = sh.get(b, 0) + (e.y if kind == "on" else -e.y)
    if abs(sh[b]) < 1e-12:
        del sh[b]
    sim.set_shunts(sh)


def integrate(sim: Simulator, horizon: float, events: Iterable[Event] = (), *,
              controllers: Iterable[Controller] = (), probes: dict[str, Callable[[Simulator], float]] | None = None,
              record_every: int = 1) -> Trajectory:
    """Advance ``sim`` by ``horizon`` seconds and return the sampled trajectory.

    Events take effect at their exact times: a step that straddles an event
    is split there, and topology changes are followed by algebraic
    re-initialization.  Controllers run at the start of every grid step.
    """
    dt = sim.dt
    t0 = sim.t
    n = int(round(horizon / dt))
    pending: list[tuple[float, int, str, Event]] = []
    for seq, e in enumerate(events):
        if isinstance(e, Fault):
            if e.bus not in sim.case.bus_index:
                raise ValueError(f"fault at unknown bus {e.bus}")
        elif isinstance(e, GenerationLoss):
            if not 0 <= e.gen < sim.base.ng:
                raise ValueError(f"unknown generator index {e.gen}")
            if not 0 <= e.mw <= (sim.inputs.pm[e.gen] - sim.pm_loss[e.gen]) * sim.case.base_mva + 1e-9:
                raise ValueError(f"loss of {e.mw} MW exceeds generator {e.gen}'s output")
        else:
            raise TypeError(f"unsupported event {e!r}")
        for te, kind in _event_times(e):
            if te >= t0 - 1e-12:
                pending.append((te, seq, kind, e))
    pending.sort(key=lambda p: (p[0], p[1]))
    controllers = list(controllers)
    rec = _Recorder(sim, probes)
    rec()
    eps = 1e-9 * dt
    for k in range(n):
        t_end = t0 + (k + 1) * dt
        for c in controllers:
            c(sim)
        while pending and pending[0][0] < t_end - eps:
            te, _, kind, e = pending.pop(0)
            if te > sim.t + eps:
                sim.step(te - sim.t)
            _apply(sim, e, kind)
        sim.step(t_end - sim.t)
        sim.t = t_end  # keep the clock on the grid
        if (k + 1) % record_every == 0 or k == n - 1:
            rec()
    return rec.result()


# ---- controllers -----------------------------------------------------------

class LagChannel:
    """Discrete first-order-plus-dead-time response (exact zero-order hold)."""

    def __init__(self, model: "AggregateModel", dt: float, y0: float = 0.0):
        self.K = model.K
        self.a = 1.0 - math.exp(-dt / model.T)
        # the dead-time queue starts in steady state with the output
        self.queue = [y0 / model.K if model.K else 0.0] * int(round(model.L / dt))
        self.y = y0

    def step(self, u: float) -> float:
        if self.queue:
            self.queue.append(u)
            u = self.queue.pop(0)
        self.y += self.a * (self.K * u - self.y)
        return self.y


@dataclass
class AgcConfig:
    droop: float | list[float] = 0.05  # p.u. frequency per p.u. of unit rating
    t_gov: float = 0.5  # governor/turbine lag, s
    ki: float = 0.05  # area integral gain on the biased frequency error, 1/s
    kf: float = 0.0  # demand support, p.u. load per p.u. frequency
    feeder: tuple[float, float, float] = (1.0, 1.0, 0.0)  # (K, T, L) of each feeder's tracking response
    feeder_weights: dict[int, float] | None = None  # bus id -> share; default pro rata to load

    def __post_init__(self):
        R = np.atleast_1d(np.asarray(self.droop, dtype=float))
        if np.any(R <= 0) or not self.t_gov > 0 or self.ki < 0 or self.kf < 0:
            raise ValueError("invalid AGC configuration: need droop > 0, t_gov > 0, ki >= 0, kf >= 0")
        AggregateModel(*self.feeder)
        if self.feeder_weights and any(w < 0 for w in self.feeder_weights.values()):
            raise ValueError("feeder weights must be nonnegative")

    def to_dict(self) -> dict[str, Any]:
        d = {"droop": self.droop, "t_gov": self.t_gov, "ki": self.ki, "kf": self.kf, "feeder": list(self.feeder)}
        if self.feeder_weights:
            d["feeder_weights"] = {str(k): v for k, v in sorted(self.feeder_weights.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AgcConfig":
        d = dict(d)
        if "feeder" in d:
            d["feeder"] = tuple(float(v) for v in d["feeder"])
        if d.get("feeder_weights"):
            d["feeder_weights"] = {int(k): float(v) for k, v in d["feeder_weights"].items()}
        return cls(**d)


class FrequencyControl:
    """Governor droop, a single-area integral AGC and proportional demand support.

    All three act on the centre-of-inertia frequency measured at the start of
    each step.  Demand support adds ``kf * df`` (scaled by total demand) to
    the feeder PCC targets; each feeder follows its target through a
    first-order tracking response.  ``pm0``, ``pl0`` and ``ql0`` are the
    scheduled values and may be moved by a setpoint ramp.
    """

    def __init__(self, sim: Simulator, cfg: AgcConfig, *, demand_support: bool = True):
        self.cfg = cfg
        case = sim.case
        ng = sim.base.ng
        self.rating = np.array([max(g.pmax, 1e-3) for g in case.generators])
        R = np.broadcast_to(np.asarray(cfg.droop, dtype=float), (ng,))
        self.inv_droop = 1.0 / R
        self.dpg = np.zeros(ng)
        self.agc = 0.0
        self.pm0 = sim.inputs.pm.copy()
        self.pl0 = sim.inputs.Pl.copy()
        self.ql0 = sim.inputs.Ql.copy()
        lb_ids = [case.buses[k].id for k in case.load_bus]
        if cfg.feeder_weights:
            w = np.array([cfg.feeder_weights.get(i, 0.0) for i in lb_ids])
        else:
            w = np.maximum(self.pl0, 0.0)
        self.w = w / w.sum() if w.sum() > 0 else w
        self.load_total = float(np.maximum(self.pl0, 0).sum())
        self.kf = cfg.kf if demand_support else 0.0
        fm = AggregateModel(*cfg.feeder)
        self.feeders = [LagChannel(fm, sim.dt) for _ in self.pl0]
        self.dload = np.zeros(len(self.pl0))

    def __call__(self, sim: Simulator) -> None:
        cfg, dt = self.cfg, sim.dt
        df = (sim.coi_omega() - sim.omega_s) / sim.omega_s
        share = self.rating / self.rating.sum()
        # area control error with frequency bias 1/R; agc is in p.u. of total rating
        self.agc += -cfg.ki * df * float(np.mean(self.inv_droop)) * dt
        target = -df * self.inv_droop * self.rating + self.agc * self.rating.sum() * share
        self.dpg += (1.0 - math.exp(-dt / cfg.t_gov)) * (target - self.dpg)
        sim.inputs.pm = self.pm0 + self.dpg
        want = self.kf * df * self.load_total * self.w
        self.dload = np.array([f.step(u) for f, u in zip(self.feeders, want)])
        ratio = np.divide(self.dload, self.pl0, out=np.zeros_like(self.dload), where=self.pl0 != 0)
        sim.inputs.Pl = self.pl0 + self.dload
        sim.inputs.Ql = self.ql0 * (1.0 + ratio)


class SetpointRamp:
    """Linear ramp of generator and load inputs from their present values to
    ``target`` over ``duration`` seconds, starting at ``t_start``.

    With a :class:`FrequencyControl` attached the ramp moves its scheduled
    values rather than the raw inputs, so droop and AGC act on top of it.
    """

    def __init__(self, sim: Simulator, target: Inputs, t_start: float, duration: float = 30.0,
                 freq: FrequencyControl | None = None):
        self.start = sim.inputs.copy()
        if freq is not None:
            self.start.pm, self.start.Pl, self.start.Ql = freq.pm0.copy(), freq.pl0.copy(), freq.ql0.copy()
        self.target = target
        self.t0 = t_start
        self.T = max(duration, 1e-9)
        self.freq = freq

    def fraction(self, t: float) -> float:
        return float(np.clip((t - self.t0) / self.T, 0.0, 1.0))

    def value(self, name: str, t: float) -> np.ndarray:
        a = self.fraction(t)
        v0, v1 = getattr(self.start, name), getattr(self.target, name)
        return v0 + a * (v1 - v0)

    def __call__(self, sim: Simulator) -> None:
        for name in ("Ef", "vref"):
            setattr(sim.inputs, name, self.value(name, sim.t))
        if self.freq is None:
            for name in ("pm", "Pl", "Ql"):
                setattr(sim.inputs, name, self.value(name, sim.t))
        else:
            self.freq.pm0 = self.value("pm", sim.t)
            self.freq.pl0 = self.value("Pl", sim.t)
            self.freq.ql0 = self.value("Ql", sim.t)


def setpoint_inputs(sim: Simulator, V_hat: np.ndarray) -> Inputs:
    """Inputs that hold the optimized voltage profile ``V_hat`` in equilibrium."""
    return Inputs.from_eq(sim.base.equilibrium(V_hat))


# ---- scenarios -------------------------------------------------------------

SCENARIO_SCHEMA = "hiergrid-scenario/1"


@dataclass
class Scenario:
    kind: str  # "three-phase-fault" | "generation-loss" | "setpoint-ramp"
    case: str = "case39"  # builtin name or path
    dt: float = 0.01
    horizon: float = 10.0
    bus: int | None = None
    t_on: float = 1.0
    clearing: float = 0.1
    gen: int | None = None
    mw: float = 0.0
    x_hat: list[float] | None = None
    ramp: float = 30.0
    agc: AgcConfig | None = None

    KINDS = ("three-phase-fault", "generation-loss", "setpoint-ramp")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise CaseValidationError(f"unknown scenario kind {self.kind!r}")
        if not self.dt > 0 or not self.horizon > 0:
            raise CaseValidationError("dt and horizon must be positive")
        if self.kind == "three-phase-fault":
            if self.bus is None:
                raise CaseValidationError("fault scenario needs 'bus'")
            if not self.clearing > 0:
                raise CaseValidationError("clearing time must be positive")
        if self.kind == "generation-loss" and (self.gen is None or self.mw < 0):
            raise CaseValidationError("generation-loss scenario needs 'gen' and a nonnegative 'mw'")
        if self.kind == "setpoint-ramp" and (not self.x_hat or not self.ramp > 0):
            raise CaseValidationError("setpoint-ramp scenario needs 'x_hat' and a positive 'ramp'")

    def load_case(self, base_dir: Path | None = None) -> NetworkCase:
        p = Path(self.case)
        if not p.suffix:
            return builtin_case(self.case)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return load_case(str(p))

    def events(self) -> list[Event]:
        if self.kind == "three-phase-fault":
            return [Fault(self.bus, self.t_on, self.clearing)]
        if self.kind == "generation-loss":
            return [GenerationLoss(self.gen, self.mw, self.t_on)]
        return []

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"schema": SCENARIO_SCHEMA, "kind": self.kind, "case": self.case, "dt": self.dt,
                             "horizon": self.horizon, "t_on": self.t_on}
        if self.kind == "three-phase-fault":
            d.update(bus=self.bus, clearing=self.clearing)
        elif self.kind == "generation-loss":
            d.update(gen=self.gen, mw=self.mw)
        else:
            d.update(x_hat=list(self.x_hat), ramp=self.ramp)
        if self.agc is not None:
            d["agc"] = self.agc.to_dict()
        return d


def scenario_from_dict(d: dict[str, Any]) -> Scenario:
    if d.get("schema") != SCENARIO_SCHEMA:
        raise CaseValidationError(f"expected schema {SCENARIO_SCHEMA!r}, got {d.get('schema')!r}")
    known = {"kind", "case", "dt", "horizon", "bus", "t_on", "clearing", "gen", "mw", "x_hat", "ramp", "agc"}
    extra = set(d) - known - {"schema"}
    if extra:
        raise CaseValidationError(f"unknown scenario fields {sorted(extra)}")
    kw = {k: v for k, v in d.items() if k in known}
    if kw.get("agc") is not None:
        try:
            kw["agc"] = AgcConfig.from_dict(kw["agc"])
        except (TypeError, ValueError) as exc:
            raise CaseValidationError(f"agc: {exc}") from None
    try:
        return Scenario(**kw)
    except TypeError as exc:
        raise CaseValidationError(str(exc)) from None


def parse_scenario(text: str | bytes) -> Scenario:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(d, dict):
        raise CaseValidationError("scenario must be a JSON object")
    return scenario_from_dict(d)


def load_scenario(path: str | Path) -> Scenario:
    return parse_scenario(Path(path).read_bytes())


def run_scenario(scn: Scenario, case: NetworkCase | None = None, *, demand_support: bool = True) -> Trajectory:
    case = case or scn.load_case()
    sim = Simulator(case, dt=scn.dt)
    ctrls: list[Controller] = []
    freq = None
    if scn.agc is not None:
        freq = FrequencyControl(sim, scn.agc, demand_support=demand_support)
        ctrls.append(freq)
    if scn.kind == "setpoint-ramp":
        x = np.asarray(scn.x_hat, dtype=float)
        nb = case.n_bus
        if x.shape != (2 * nb,):
            raise CaseValidationError(f"x_hat must have {2 * nb} entries")
        tgt = setpoint_inputs(sim, x[nb:] * np.exp(1j * x[:nb]))
        ctrls.insert(0, SetpointRamp(sim, tgt, scn.t_on, scn.ramp, freq))
    return integrate(sim, scn.horizon, scn.events(), controllers=ctrls)


@dataclass
class FrequencyResult:
    trajectory: Trajectory
    nadir: float  # most negative COI frequency deviation, Hz
    t_nadir: float
    rocof: float  # initial rate of change of COI frequency after the event, Hz/s


def frequency_event(case: NetworkCase, scenario: Scenario, demand_support: bool = True) -> FrequencyResult:
    """Generation-loss response with droop, AGC and optional demand support."""
    if scenario.kind != "generation-loss":
        raise ValueError("frequency_event needs a generation-loss scenario")
    if scenario.agc is None:
        raise ValueError("frequency_event needs an AGC configuration")
    traj = run_scenario(scenario, case, demand_support=demand_support)
    k = int(np.argmin(traj.f_coi))
    i0 = int(np.searchsorted(traj.t, scenario.t_on + 1e-9))
    rocof = (traj.f_coi[i0] - traj.f_coi[i0 - 1]) / (traj.t[i0] - traj.t[i0 - 1]) if 0 < i0 < len(traj.t) else 0.0
    return FrequencyResult(traj, float(min(traj.f_coi[k], 0.0)), float(traj.t[k]), float(rocof))


# ---- fitting ---------------------------------------------------------------

@dataclass
class RingdownFit:
    sigma: float
    beta: float
    xi: float
    amplitude: float
    phase: float
    offset: float
    r2: float


def _r2(y, yhat) -> float:
    ss = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss if ss > 0 else 0.0


def _peak_frequency(t: np.ndarray, y: np.ndarray, band: tuple[float, float]) -> tuple[float, float]:
    """(frequency in Hz, amplitude) of the windowed periodogram peak inside ``band``."""
    n = len(t)
    dt = t[1] - t[0]
    yc = y - np.polyval(np.polyfit(t - t[0], y, 1), t - t[0])
    pad = 8 * n
    spec = np.abs(np.fft.rfft(yc * np.hanning(n), pad))
    freqs = np.fft.rfftfreq(pad, dt)
    inb = (freqs >= band[0]) & (freqs <= band[1])
    if not inb.any():
        return 0.0, 0.0
    k = np.flatnonzero(inb)[int(np.argmax(spec[inb]))]
    return float(freqs[k]), float(spec[k])


def fit_ringdown(t: np.ndarray, y: np.ndarray, *, min_r2: float = 0.9, slow: bool = True,
                 band: tuple[float, float] = (0.05, 5.0)) -> RingdownFit:
    """Least-squares fit of ``A exp(-sigma t) cos(beta t + phi) + c``.

    With ``slow`` an extra ``B exp(-gamma t)`` term absorbs a non-oscillatory
    (flux-decay) component, which would otherwise bias sigma.  The frequency
    guess is the periodogram peak inside ``band`` (Hz).  Raises
    :class:`PoorFit` (carrying the fit) when R^2 < ``min_r2``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(t) < 8:
        raise PoorFit("too few samples")
    tt = t - t[0]
    n = len(tt)
    c0 = float(np.mean(y[n // 2:]))
    f0, _ = _peak_frequency(tt, y, band)
    beta0 = 2 * np.pi * max(f0, 1e-3)
    env = np.abs(y - c0)
    half = n // 2
    a1, a2 = env[:half].max(), env[half:].max()
    sigma0 = float(np.log(max(a1, 1e-300) / max(a2, 1e-300)) / max(tt[half], tt[1])) if a2 > 0 else 0.1

    def model(p):
        out = p[0] * np.exp(-p[1] * tt) * np.cos(p[2] * tt + p[3]) + p[4]
        if slow:
            out = out + p[5] * np.exp(-p[6] * tt)
        return out

    best = None
    for ph0 in np.linspace(0, 2 * np.pi, 8, endpoint=False):
        p0 = [a1, sigma0, beta0, ph0, c0] + ([0.0, 0.3] if slow else [])
        with np.errstate(all="ignore"):
            r = least_squares(lambda p: model(p) - y, p0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14,
                              max_nfev=4000)
        if np.all(np.isfinite(r.x)) and (best is None or r.cost < best.cost):
            best = r
    if best is None:
        raise PoorFit("ringdown fit diverged")
    A, s, b, ph, c = best.x[:5]
    if A < 0:
        A, ph = -A, ph + np.pi
    b = abs(b)
    fit = RingdownFit(sigma=float(s), beta=float(b), xi=float(s / math.hypot(s, b)), amplitude=float(A),
                      phase=float(np.mod(ph, 2 * np.pi)), offset=float(c), r2=_r2(y, model(best.x)))
    if fit.r2 < min_r2:
        raise PoorFit(f"ringdown fit R^2 = {fit.r2:.3f}", fit)
    return fit


def ringdown_signal(traj: Trajectory, t_from: float, t_to: float | None = None,
                    band: tuple[float, float] = (0.1, 2.5)) -> tuple[np.ndarray, np.ndarray, int]:
    """Rotor angle, relative to the centre of inertia, of the machine with the
    largest electromechanical-band oscillation inside the window."""
    sel = (traj.t >= t_from - 1e-9) & (traj.t <= (np.inf if t_to is None else t_to + 1e-9))
    d = traj.delta[sel]
    w = traj.M / traj.M.sum()
    rel = d - (d @ w)[:, None]
    t = traj.t[sel]
    amp = [_peak_frequency(t, rel[:, g], band)[1] for g in range(rel.shape[1])]
    k = int(np.argmax(amp))
    return t, rel[:, k], k


@dataclass(frozen=True)
class AggregateModel:
    K: float
    T: float
    L: float = 0.0

    def __post_init__(self):
        if not self.T > 0 or self.L < 0:
            raise ValueError("need T > 0 and L >= 0")

    def step_response(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.where(t >= self.L, self.K * (1 - np.exp(-np.maximum(t - self.L, 0) / self.T)), 0.0)

    def to_dict(self) -> dict[str, float]:
        return {"K": self.K, "T": self.T, "L": self.L}


def identify_first_order(t: np.ndarray, y: np.ndarray, *, min_r2: float = 0.9, t_min: float = 1e-6
                         ) -> AggregateModel:
    """Fit ``K (1 - exp(-(t - L)/T))`` to a unit-step response starting at t = 0.

    The dead time is searched on the sample grid first (the model is not
    smooth in L), then refined continuously together with K and T.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(t) < 4:
        raise PoorFit("too few samples")
    K0 = float(y[-max(1, len(y) // 20):].mean())
    if K0 == 0:
        raise PoorFit("no response to the step")

    def resid(p):
        K, T, L = p
        return AggregateModel(K, max(T, t_min), max(L, 0.0)).step_response(t) - y

    def fit_KT(L):
        def r(p):
            return AggregateModel(p[0], max(p[1], t_min), L).step_response(t) - y
        reach = np.flatnonzero(np.abs(y) >= 0.632 * abs(K0))
        T0 = max((t[reach[0]] - L) if reach.size else t[-1] / 3, t_min * 10)
        return least_squares(r, [K0, T0], bounds=([-np.inf, t_min], [np.inf, np.inf]), xtol=1e-15, ftol=1e-15,
                             gtol=1e-15)

    cands = t[(t >= 0) & (t <= t[-1] * 0.9)]
    moved = np.flatnonzero(np.abs(y) > 1e-9 * abs(K0))
    L_hi = t[moved[0]] if moved.size else t[-1]
    cands = cands[cands <= L_hi + 1e-12]
    if cands.size > 200:
        cands = cands[np.linspace(0, cands.size - 1, 200).astype(int)]
    best = min(((fit_KT(L), L) for L in cands), key=lambda r: r[0].cost)
    (K, T), L = best[0].x, best[1]
    ref = least_squares(resid, [K, T, L], bounds=([-np.inf, t_min, 0.0], [np.inf, np.inf, t[-1]]), xtol=1e-15,
                        ftol=1e-15, gtol=1e-15)
    if ref.cost <= best[0].cost:
        K, T, L = ref.x
    m = AggregateModel(float(K), float(max(T, t_min)), float(max(L, 0.0)))
    r2 = _r2(y, m.step_response(t))
    if r2 < min_r2:
        raise PoorFit(f"first-order fit R^2 = {r2:.3f}", m)
    return m


# ---- hierarchical co-simulation ----------------------------------------------

COSIM_SCHEMA = "hiergrid-episode/1"


@dataclass
class CosimConfig:
    dt: float = 0.01
    horizon: float = 120.0
    cycle: float = 60.0  # optimization cycle, s
    threshold: float = 0.05  # trigger when xi_min falls below this
    ramp: float = 30.0  # setpoint ramp duration, s
    flexibility: float = 0.10  # load flexibility offered to the optimizer
    k_max: int = 5
    settle_tol: float = 0.02  # normalized control error counted as settled
    load_ramp: tuple[float, float, float] | None = None  # (factor, t_start, duration) scripted demand drift
    agc: AgcConfig = field(default_factory=AgcConfig)
    record_every: int = 10

    def __post_init__(self):
        if not (self.dt > 0 and self.horizon > 0 and self.cycle > 0 and self.ramp > 0):
            raise ValueError("dt, horizon, cycle and ramp must be positive")
        if self.flexibility < 0 or self.k_max < 0:
            raise ValueError("flexibility and k_max must be nonnegative")


@dataclass
class CosimResult:
    t: np.ndarray
    f_coi: np.ndarray
    xi_min: list[tuple[float, float]]  # (cycle time, xi_min) at every trigger check
    errors: dict[str, np.ndarray]  # normalized control errors per level, NaN before the first setpoints
    log: list[dict[str, Any]]
    target_change: dict[int, float]  # bus id -> optimized minus pre-optimization demand, p.u.
    trajectory: Trajectory

    def fired(self) -> list[float]:
        return [e["t"] for e in self.log if e["event"] == "snlp"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.log)

    def to_csv(self) -> str:
        keys = sorted(self.errors)
        buf = io.StringIO()
        buf.write(",".join(["t", "f_coi_hz", *(f"err_{k}" for k in keys)]) + "\n")
        for i in range(len(self.t)):
            row = [self.t[i], self.f_coi[i], *(self.errors[k][i] for k in keys)]
            buf.write(",".join(f"{v:.12g}" for v in row) + "\n")
        return buf.getvalue()


class _Channel:
    """One flexible load bus as seen by the transmission level: a demand
    multiplier that follows a target multiplier through some lower level."""

    level = "aggregate"

    def __init__(self, bus: int):
        self.bus = bus

    def step(self, rp: float, rq: float, vm_ratio: float) -> tuple[float, float]:
        raise NotImplementedError


class _AggregateChannel(_Channel):
    def __init__(self, bus: int, model: AggregateModel, dt: float):
        super().__init__(bus)
        self.p = LagChannel(model, dt, y0=model.K)
        self.q = LagChannel(model, dt, y0=model.K)
        self.K = model.K

    def step(self, rp, rq, vm_ratio):
        return self.p.step(rp) / self.K, self.q.step(rq) / self.K


class _FeederChannel(_Channel):
    level = "feeder"

    def __init__(self, bus: int, feeder, cfg):
        from .dlctrl import Tracker

        super().__init__(bus)
        self.tr = Tracker(feeder, cfg)
        self.P0, self.Q0 = self.tr.flow.P0, self.tr.flow.Q0
        self.u0 = self.tr.u_pcc
        self.failed = False

    def step(self, rp, rq, vm_ratio):
        from .dlctrl import NonConvergence

        if not self.failed:
            self.tr.p0_target = rp * self.P0
            self.tr.q0_target = rq * self.Q0
            self.tr.u_pcc = self.u0 * vm_ratio ** 2
            try:
                self.tr.step()
            except NonConvergence:
                self.failed = True
                raise
        return self.tr.flow.P0 / self.P0, self.tr.flow.Q0 / self.Q0


class _FleetChannel(_Channel):
    level = "building"

    def __init__(self, bus: int, fleet, dt: float, warmup: float = 30.0):
        from .blsched import BuildingLoop

        super().__init__(bus)
        self.loop = BuildingLoop(fleet, t_s=dt)
        flex = sum(d.rated for d in fleet.type1 if d.available) + sum(d.v_max for d in fleet.type2 if d.available)
        self.nominal = fleet.baseline + 0.5 * flex
        for _ in range(int(round(warmup / dt))):
            self.loop.sample(self.nominal)
            self.loop.advance()
        self.P = self.loop.power

    def step(self, rp, rq, vm_ratio):
        self.P = self.loop.sample(rp * self.nominal)
        self.loop.advance()
        r = self.P / self.nominal
        return r, r


def _case_at(case: NetworkCase, sim: Simulator, flex_idx: np.ndarray) -> NetworkCase:
    """Copy of ``case`` at the simulator's present dispatch and demand."""
    from dataclasses import replace

    lb = case.load_bus
    nominal = case.bus_load
    ratio_p = {int(lb[k]): sim.inputs.Pl[k] / nominal[lb[k]].real for k in flex_idx if nominal[lb[k]].real}
    ratio_q = {int(lb[k]): sim.inputs.Ql[k] / nominal[lb[k]].imag for k in flex_idx if nominal[lb[k]].imag}
    bidx = case.bus_index
    loads = tuple(replace(ld, p=ld.p * ratio_p.get(bidx[ld.bus], 1.0), q=ld.q * ratio_q.get(bidx[ld.bus], 1.0))
                  for ld in case.loads)
    vm = np.abs(sim.V)
    pm = sim.inputs.pm - sim.pm_loss
    gens = tuple(replace(g, pg=float(pm[i]), vg=float(vm[case.gen_bus[i]])) for i, g in enumerate(case.generators))
    return replace(case, loads=loads, generators=gens)


def cosim_run(case: NetworkCase, feeders: dict[int, Any] | None = None, fleets: dict[int, Any] | None = None,
              config: CosimConfig = CosimConfig(), *, aggregate: AggregateModel | None = None) -> CosimResult:
    """Run one hierarchical episode.

    ``feeders`` and ``fleets`` attach a detailed distribution feeder or a
    building fleet to a load bus (bus id keys).  Every other load bus with
    demand is represented by ``aggregate`` (by default identified from the
    first detailed feeder's step response, else a unit first-order lag).

    At each cycle boundary the trigger checks the small-signal damping at the
    present operating point; when it is below threshold and the previous
    setpoints have settled, SNLP runs and its setpoints are ramped in.
    Transmission errors cover mechanical power and flexible demand;
    feeder and building errors cover their own tracking targets.
    """
    from .dlctrl import DlCtrlConfig, NonConvergence
    from .smallsignal import modal_analysis
    from .tlopt import SnlpConfig, snlp

    feeders = dict(feeders or {})
    fleets = dict(fleets or {})
    cfg = config
    bidx = case.bus_index
    lb = case.load_bus
    lb_pos = {int(b): k for k, b in enumerate(lb)}
    for b in (*feeders, *fleets):
        if b not in bidx or bidx[b] not in lb_pos:
            raise ValueError(f"bus {b} is not a load bus without a generator")
    if set(feeders) & set(fleets):
        raise ValueError("a bus cannot host both a detailed feeder and a fleet")
    fcfg = DlCtrlConfig(t_s=cfg.dt)
    if aggregate is None:
        aggregate = AggregateModel(1.0, 1.0, 0.0)
        if feeders:
            aggregate = identify_feeder(next(iter(feeders.values())), fcfg)
    sim = Simulator(case, dt=cfg.dt)
    flex_idx = np.flatnonzero(np.abs(case.bus_load[lb]) > 0)
    pos = {int(k): i for i, k in enumerate(flex_idx)}
    chans: dict[int, _Channel] = {}
    for k in flex_idx:
        bid = case.buses[lb[k]].id
        if bid in feeders:
            chans[k] = _FeederChannel(bid, feeders[bid], fcfg)
        elif bid in fleets:
            chans[k] = _FleetChannel(bid, fleets[bid], cfg.dt)
        else:
            chans[k] = _AggregateChannel(bid, aggregate, cfg.dt)
    freq = FrequencyControl(sim, cfg.agc, demand_support=False)
    base_pl, base_ql = sim.inputs.Pl.copy(), sim.inputs.Ql.copy()
    vm0 = np.abs(sim.V)
    log: list[dict[str, Any]] = []
    state: dict[str, Any] = {"ramp": None, "hat": None, "e0": None}
    xi_hist: list[tuple[float, float]] = []
    change: dict[int, float] = {}
    next_cycle = 0.0

    def drift(t):
        if cfg.load_ramp is None:
            return 1.0
        fac, t0, T = cfg.load_ramp
        return 1.0 + (fac - 1.0) * float(np.clip((t - t0) / max(T, 1e-9), 0.0, 1.0))

    def errors_now() -> dict[str, float]:
        out = {}
        hat = state["hat"]
        if hat is not None:
            y = np.concatenate([sim.inputs.pm, sim.inputs.Pl[flex_idx]])
            out["transmission"] = float(np.max(np.abs(y - hat)))
            for k, ch in chans.items():
                if ch.level != "aggregate":
                    out[f"{ch.level}{ch.bus}"] = abs(sim.inputs.Pl[k] - hat[sim.base.ng + pos[k]]) / abs(base_pl[k])
        return out

    def normalized() -> dict[str, float]:
        e = errors_now()
        e0 = state["e0"]
        if e0 is None:
            return {k: np.nan for k in e}
        return {k: (v / e0[k] if e0.get(k, 0) > 1e-12 else 0.0) for k, v in e.items()}

    def settled() -> bool:
        r = state["ramp"]
        if r is None:
            return True
        if r.fraction(sim.t) < 1.0:
            return False
        return all(v <= cfg.settle_tol for v in normalized().values() if np.isfinite(v))

    def orchestrate(sim: Simulator) -> None:
        nonlocal next_cycle
        t = sim.t
        if t >= next_cycle - 1e-9:
            next_cycle += cfg.cycle
            try:
                xi = modal_analysis(case, sim.V).xi_min
            except Exception as exc:  # noqa: BLE001 - logged, run continues
                log.append({"t": round(t, 6), "event": "error", "level": "transmission", "message": str(exc)})
                xi = np.nan
            xi_hist.append((t, float(xi)))
            ok = settled()
            fire = bool(np.isfinite(xi) and xi < cfg.threshold and ok)
            log.append({"t": round(t, 6), "event": "cycle", "xi_min": float(xi), "settled": ok, "fired": fire})
            if fire:
                here = _case_at(case, sim, flex_idx).with_load_flexibility(cfg.flexibility)
                try:
                    res = snlp(here, SnlpConfig(k_max=cfg.k_max))
                except Exception as exc:  # noqa: BLE001
                    log.append({"t": round(t, 6), "event": "error", "level": "transmission",
                                "message": f"SNLP failed: {exc}"})
                else:
                    tgt = setpoint_inputs(sim, res.V_hat)
                    before = sim.inputs.Pl.copy()
                    state["ramp"] = SetpointRamp(sim, tgt, t, cfg.ramp, freq)
                    state["hat"] = np.concatenate([tgt.pm, tgt.Pl[flex_idx]])
                    for k in flex_idx:
                        change[case.buses[lb[k]].id] = float(tgt.Pl[k] - before[k])
                    log.append({"t": round(t, 6), "event": "snlp", "xi_min_before": res.xi_min_before,
                                "xi_min_after": res.xi_min_after, "iterations": len(res.iterates),
                                "accepted": sum(r.accepted for r in res.iterates)})
                    state["e0"] = None
        ramp = state["ramp"]
        if ramp is not None:
            ramp(sim)
        freq(sim)
        if state["hat"] is not None and state["e0"] is None:
            state["e0"] = errors_now()
        # lower levels: targets as demand multipliers relative to the bus's initial demand
        d = drift(t)
        vm = np.abs(sim.V)
        for k, ch in chans.items():
            tp = freq.pl0[k] if ramp is not None else base_pl[k] * d
            tq = freq.ql0[k] if ramp is not None else base_ql[k] * d
            if ramp is None:
                freq.pl0[k], freq.ql0[k] = tp, tq
            rp = tp / base_pl[k] if base_pl[k] else 1.0
            rq = tq / base_ql[k] if base_ql[k] else rp
            try:
                mp, mq = ch.step(rp, rq, float(vm[lb[k]] / vm0[lb[k]]))
            except NonConvergence as exc:
                log.append({"t": round(t, 6), "event": "error", "level": "feeder", "bus": ch.bus,
                            "message": str(exc)})
                continue
            sim.inputs.Pl[k] = base_pl[k] * mp
            sim.inputs.Ql[k] = base_ql[k] * mq

    errs: dict[str, list[float]] = {}

    def probe_factory(name):
        return lambda s: normalized().get(name, np.nan)

    names = ["transmission"] + [f"{ch.level}{ch.bus}" for ch in chans.values() if ch.level != "aggregate"]
    probes = {n: probe_factory(n) for n in names}
    traj = integrate(sim, cfg.horizon, controllers=[orchestrate], probes=probes, record_every=cfg.record_every)
    errs = {n: traj.extra[n] for n in names}
    return CosimResult(traj.t, traj.f_coi, xi_hist, errs, log, change, traj)


def identify_feeder(feeder, cfg=None, *, step: float = 0.05, duration: float = 10.0) -> AggregateModel:
    """First-order model of a feeder's PCC response to a relative P0 step."""
    from .dlctrl import DlCtrlConfig, Tracker

    cfg = cfg or DlCtrlConfig()
    tr = Tracker(feeder, cfg)
    P0 = tr.flow.P0
    tr.p0_target = P0 * (1 + step)
    n = int(round(duration / cfg.t_s))
    y = np.empty(n + 1)
    y[0] = 0.0
    for k in range(1, n + 1):
        tr.step()
        y[k] = (tr.flow.P0 - P0) / (step * P0)
    return identify_first_order(np.arange(n + 1) * cfg.t_s, y)
