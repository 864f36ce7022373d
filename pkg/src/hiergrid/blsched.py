"""Building-level scheduling and fast battery loop.

A single-period MILP decides which on/off (type-I) devices run and how much
power the continuously adjustable (type-II) devices draw, maximizing
controllable consumption under the building's power target.  A PI loop on a
fast battery, running in parallel, removes what the schedule leaves behind.

Powers are in kW; consumption is positive.
"""

from __future__ import annotations

import heapq
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .netcase import CaseSyntaxError, CaseValidationError

LP_TOL = 1e-9
INT_TOL = 1e-9
MAX_BINARIES = 64
SCHEMA = "hiergrid-fleet/1"


# ---- dense simplex ---------------------------------------------------------

@dataclass
class LpResult:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray
    objective: float


def _pivot(T: np.ndarray, rhs: np.ndarray, basis: np.ndarray, r: int, j: int) -> None:
    piv = T[r, j]
    T[r] /= piv
    rhs[r] /= piv
    col = T[:, j].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])
    rhs -= col * rhs[r]
    basis[r] = j


def _run(T, rhs, basis, cost, allowed, tol) -> str:
    """Bland's-rule primal simplex maximizing ``cost @ z`` from a feasible basis."""
    for _ in range(50_000):
        red = cost - cost[basis] @ T
        cand = np.flatnonzero((red > tol) & allowed)
        if cand.size == 0:
            return "optimal"
        j = cand[0]
        col = T[:, j]
        rows = np.flatnonzero(col > tol)
        if rows.size == 0:
            return "unbounded"
        ratios = rhs[rows] / col[rows]
        best = ratios.min()
        tied = rows[ratios <= best + tol * max(1.0, abs(best))]
        r = tied[np.argmin(basis[tied])]
        _pivot(T, rhs, basis, r, j)
    raise RuntimeError("simplex iteration limit")


def lp_solve(c: np.ndarray, A: np.ndarray, b: np.ndarray, tol: float = LP_TOL) -> LpResult:
    """max c @ y  s.t.  A @ y <= b,  y >= 0  (two-phase dense tableau)."""
    c = np.asarray(c, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    neg = np.flatnonzero(b < 0)
    na = neg.size
    N = n + m + na
    T = np.zeros((m, N))
    T[:, :n] = A
    T[:, n:n + m] = np.eye(m)
    rhs = b.copy()
    T[neg] *= -1
    rhs[neg] *= -1
    basis = np.arange(n, n + m)
    for k, i in enumerate(neg):
        T[i, n + m + k] = 1.0
        basis[i] = n + m + k
    art = np.zeros(N, dtype=bool)
    art[n + m:] = True
    if na:
        cost1 = -art.astype(float)
        _run(T, rhs, basis, cost1, np.ones(N, dtype=bool), tol)
        if rhs[art[basis]].sum() > tol * max(1.0, np.abs(b).max()):
            return LpResult("infeasible", np.full(n, np.nan), -math.inf)
        # drive zero-level artificials out; rows that cannot pivot are redundant
        keep = np.ones(m, dtype=bool)
        for r in np.flatnonzero(art[basis]):
            cols = np.flatnonzero((np.abs(T[r]) > tol) & ~art)
            if cols.size:
                _pivot(T, rhs, basis, r, cols[0])
            else:
                keep[r] = False
        T, rhs, basis = T[keep], rhs[keep], basis[keep]
    cost = np.zeros(N)
    cost[:n] = c
    status = _run(T, rhs, basis, cost, ~art, tol)
    z = np.zeros(N)
    z[basis] = rhs
    x = z[:n]
    if status == "unbounded":
        return LpResult("unbounded", x, math.inf)
    return LpResult("optimal", x, float(c @ x))


# ---- branch and bound ------------------------------------------------------

class NodeLimit(RuntimeError):
    def __init__(self, incumbent: "MilpResult | None", gap: float):
        super().__init__(f"branch-and-bound node limit reached (gap {gap:.3g})")
        self.incumbent = incumbent
        self.gap = gap


class MilpInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class MilpModel:
    """max c @ x  s.t.  A @ x <= b,  lb <= x <= ub,  x[integer] integral."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integer: np.ndarray

    def __post_init__(self):
        n = len(self.c)
        if self.A.shape[1:] != (n,) or len(self.lb) != n or len(self.ub) != n or len(self.integer) != n:
            raise ValueError("inconsistent model dimensions")
        if int(np.sum(self.integer)) > MAX_BINARIES:
            raise ValueError(f"at most {MAX_BINARIES} integer variables supported")
        if not np.all(np.isfinite(self.lb)):
            raise ValueError("lower bounds must be finite")


@dataclass
class MilpResult:
    x: np.ndarray
    objective: float
    nodes: int
    optimal: bool
    gap: float = 0.0


def _bounded_lp(model: MilpModel, lb: np.ndarray, ub: np.ndarray) -> LpResult:
    if np.any(lb > ub + INT_TOL):
        return LpResult("infeasible", lb.copy(), -math.inf)
    n = len(model.c)
    fin = np.flatnonzero(np.isfinite(ub))
    A = np.vstack([model.A, np.eye(n)[fin]]) if fin.size else model.A
    b = np.concatenate([model.b - model.A @ lb, (ub - lb)[fin]])
    res = lp_solve(model.c, A, b)
    if res.status != "optimal":
        return res
    x = res.x + lb
    return LpResult("optimal", x, float(model.c @ x))


def bb_solve(model: MilpModel, node_limit: int = 100_000) -> MilpResult:
    """Best-first branch and bound on LP relaxations.

    Ties in the bound are broken by creation order and the lowest-index
    fractional variable is branched on, so the result is deterministic.
    """
    ints = np.flatnonzero(model.integer)
    nodes = 0
    seq = 0
    best: MilpResult | None = None
    heap: list[tuple[float, int, np.ndarray, np.ndarray, np.ndarray]] = []

    def push(lb, ub):
        nonlocal nodes, seq
        nodes += 1
        r = _bounded_lp(model, lb, ub)
        if r.status == "unbounded":
            raise ValueError("LP relaxation is unbounded")
        if r.status == "optimal":
            heapq.heappush(heap, (-r.objective, seq, lb, ub, r.x))
            seq += 1

    push(model.lb.astype(float).copy(), model.ub.astype(float).copy())
    while heap:
        negb, _, lb, ub, x = heapq.heappop(heap)
        bound = -negb
        if best is not None and bound <= best.objective + LP_TOL * max(1.0, abs(best.objective)):
            break  # best-first: every remaining node is dominated
        frac = ints[np.abs(x[ints] - np.round(x[ints])) > INT_TOL]
        if frac.size == 0:
            xi = x.copy()
            xi[ints] = np.round(xi[ints])
            best = MilpResult(xi, float(model.c @ xi), nodes, True)
            continue
        if nodes >= node_limit:
            gap = bound - (best.objective if best else -math.inf)
            if best is not None:
                best.nodes, best.optimal, best.gap = nodes, False, gap
            raise NodeLimit(best, gap)
        j = frac[0]
        ub_dn = ub.copy()
        ub_dn[j] = math.floor(x[j])
        lb_up = lb.copy()
        lb_up[j] = math.ceil(x[j])
        push(lb, ub_dn)
        push(lb_up, ub)
    if best is None:
        raise MilpInfeasible("no integer-feasible point")
    best.nodes = nodes
    return best


# ---- building fleet --------------------------------------------------------

@dataclass(frozen=True)
class TypeI:
    id: str
    rated: float  # kW
    available: bool = True


@dataclass(frozen=True)
class TypeII:
    id: str
    v_min: float
    v_max: float
    available: bool = True


@dataclass(frozen=True)
class Battery:
    p_min: float = -5.0  # discharge limit (negative)
    p_max: float = 5.0
    kp: float = 0.5
    ki: float = 2.0  # per second
    lag: float = 0.1  # s


@dataclass(frozen=True)
class DevicePlant:
    """Actual device behaviour: lag and dead time on the command, then a
    multiplicative characterization error."""

    lag: float = 0.0
    delay: float = 0.0
    error: float = 0.0


@dataclass(frozen=True)
class BuildingFleet:
    baseline: float  # uncontrollable consumption q_hat, kW
    type1: tuple[TypeI, ...] = ()
    type2: tuple[TypeII, ...] = ()
    battery: Battery = field(default_factory=Battery)
    plants: dict[str, DevicePlant] = field(default_factory=dict)

    def __post_init__(self):
        ids = [d.id for d in self.type1] + [d.id for d in self.type2]
        if len(set(ids)) != len(ids):
            raise CaseValidationError("duplicate device id")
        if "battery" in ids:
            raise CaseValidationError("'battery' is reserved for the PI actuator")
        for d in self.type1:
            if not d.rated > 0:
                raise CaseValidationError(f"device {d.id}: rated power must be positive")
        for d in self.type2:
            if not 0 <= d.v_min <= d.v_max:
                raise CaseValidationError(f"device {d.id}: need 0 <= v_min <= v_max")
        bt = self.battery
        if not bt.p_min <= 0 <= bt.p_max or bt.kp < 0 or bt.ki < 0 or bt.lag < 0:
            raise CaseValidationError("battery: need p_min <= 0 <= p_max and nonnegative gains and lag")
        if self.baseline < 0:
            raise CaseValidationError("baseline must be nonnegative")
        for k, p in self.plants.items():
            if k not in ids and k != "battery":
                raise CaseValidationError(f"plant model for unknown device {k}")
            if p.lag < 0 or p.delay < 0 or p.error <= -1:
                raise CaseValidationError(f"plant model {k}: invalid lag, delay or error")

    def plant(self, dev_id: str) -> DevicePlant:
        return self.plants.get(dev_id, DevicePlant())


def fleet_to_dict(f: BuildingFleet) -> dict[str, Any]:
    return {
        "schema": SCHEMA,
        "baseline": f.baseline,
        "type1": [{"id": d.id, "rated": d.rated, "available": d.available} for d in f.type1],
        "type2": [{"id": d.id, "v_min": d.v_min, "v_max": d.v_max, "available": d.available} for d in f.type2],
        "battery": {"p_min": f.battery.p_min, "p_max": f.battery.p_max, "kp": f.battery.kp, "ki": f.battery.ki,
                    "lag": f.battery.lag},
        "plants": {k: {"lag": p.lag, "delay": p.delay, "error": p.error} for k, p in sorted(f.plants.items())},
    }


def fleet_from_dict(d: dict[str, Any]) -> BuildingFleet:
    try:
        return BuildingFleet(
            baseline=float(d["baseline"]),
            type1=tuple(TypeI(str(x["id"]), float(x["rated"]), bool(x.get("available", True)))
                        for x in d.get("type1", [])),
            type2=tuple(TypeII(str(x["id"]), float(x["v_min"]), float(x["v_max"]), bool(x.get("available", True)))
                        for x in d.get("type2", [])),
            battery=Battery(**{k: float(v) for k, v in d.get("battery", {}).items()}),
            plants={str(k): DevicePlant(**{kk: float(vv) for kk, vv in v.items()})
                    for k, v in d.get("plants", {}).items()},
        )
    except KeyError as exc:
        raise CaseValidationError(f"missing field {exc.args[0]!r}") from None
    except TypeError as exc:
        raise CaseValidationError(str(exc)) from None


def parse_fleet(text: str) -> BuildingFleet:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    return fleet_from_dict(d)


def load_fleet(path: str | Path) -> BuildingFleet:
    return parse_fleet(Path(path).read_text())


def builtin_fleet(name: str = "fleet") -> BuildingFleet:
    from importlib import resources

    return parse_fleet(resources.files("hiergrid.data").joinpath(f"{name}.json").read_text())


# ---- scheduling ------------------------------------------------------------

@dataclass
class Schedule:
    x: dict[str, int]
    xi: dict[str, int]
    v: dict[str, float]
    objective: float
    nodes: int
    optimal: bool
    shortfall: bool = False
    gap: float = 0.0

    def power(self, fleet: BuildingFleet) -> float:
        return sum(d.rated * self.x.get(d.id, 0) for d in fleet.type1) + sum(self.v.values())


def schedule_model(fleet: BuildingFleet, target: float) -> tuple[MilpModel, list[TypeI], list[TypeII]]:
    """Variables ordered (x for type-I, xi for type-II, v for type-II)."""
    t1 = [d for d in fleet.type1 if d.available]
    t2 = [d for d in fleet.type2 if d.available]
    k, z = len(t1), len(t2)
    n = k + 2 * z
    c = np.concatenate([[d.rated for d in t1], np.zeros(z), np.ones(z)])
    rows, b = [], []
    cap = np.zeros(n)
    cap[:k] = [d.rated for d in t1]
    cap[k + z:] = 1.0
    rows.append(cap)
    b.append(target - fleet.baseline)
    for j, d in enumerate(t2):
        hi = np.zeros(n)
        hi[k + z + j], hi[k + j] = 1.0, -d.v_max
        lo = np.zeros(n)
        lo[k + z + j], lo[k + j] = -1.0, d.v_min
        rows += [hi, lo]
        b += [0.0, 0.0]
    ub = np.concatenate([np.ones(k + z), [d.v_max for d in t2]])
    integer = np.concatenate([np.ones(k + z, dtype=bool), np.zeros(z, dtype=bool)])
    model = MilpModel(c, np.array(rows).reshape(len(rows), n), np.array(b), np.zeros(n), ub, integer)
    return model, t1, t2


def _fill(t2: list[TypeII], on: np.ndarray, room: float) -> np.ndarray:
    """Continuous powers for fixed enables: every enabled device at v_min,
    then the remaining room handed out in device order."""
    v = np.array([d.v_min if e else 0.0 for d, e in zip(t2, on)])
    room -= v.sum()
    for j, (d, e) in enumerate(zip(t2, on)):
        if e and room > 0:
            extra = min(d.v_max - d.v_min, room)
            v[j] += extra
            room -= extra
    return v


def milp_schedule(fleet: BuildingFleet, target: float, node_limit: int = 100_000) -> Schedule:
    if target < 0:
        raise ValueError("building power target must be nonnegative")
    model, t1, t2 = schedule_model(fleet, target)
    off = Schedule({d.id: 0 for d in fleet.type1}, {d.id: 0 for d in fleet.type2}, {d.id: 0.0 for d in fleet.type2},
                   0.0, 0, True)
    room = target - fleet.baseline
    if room < 0:
        off.shortfall = True
        off.optimal = False
        return off
    k, z = len(t1), len(t2)
    if k + z == 0:
        off.nodes = 1
        return off
    try:
        res = bb_solve(model, node_limit)
    except NodeLimit as exc:
        if exc.incumbent is None:
            off.optimal, off.gap = False, exc.gap
            return off
        res = exc.incumbent
    xs = np.round(res.x[:k]).astype(int)
    en = np.round(res.x[k:k + z]).astype(int)
    v = _fill(t2, en.astype(bool), room - float(np.dot(xs, [d.rated for d in t1])))
    sched = Schedule(x={d.id: 0 for d in fleet.type1}, xi={d.id: 0 for d in fleet.type2},
                     v={d.id: 0.0 for d in fleet.type2}, objective=0.0, nodes=res.nodes, optimal=res.optimal,
                     gap=res.gap)
    for d, xv in zip(t1, xs):
        sched.x[d.id] = int(xv)
    for d, e, vv in zip(t2, en, v):
        sched.xi[d.id] = int(e)
        sched.v[d.id] = float(vv)
    sched.objective = float(sum(d.rated * xv for d, xv in zip(t1, xs)) + v.sum())
    return sched


# ---- battery PI ------------------------------------------------------------

@dataclass
class PiState:
    integral: float = 0.0
    clamped: bool = False


def pi_battery_step(error: float, state: PiState, battery: Battery, dt: float) -> tuple[float, PiState]:
    """PI command with conditional integration: the integrator does not move
    while the output is pinned and the error pushes further into the limit."""
    integ = state.integral + error * dt
    u = battery.kp * error + battery.ki * integ
    if u > battery.p_max or u < battery.p_min:
        lim = battery.p_max if u > battery.p_max else battery.p_min
        if (lim == battery.p_max and error > 0) or (lim == battery.p_min and error < 0):
            integ = state.integral
        u = min(max(battery.kp * error + battery.ki * integ, battery.p_min), battery.p_max)
        return u, PiState(integ, u in (battery.p_min, battery.p_max))
    return u, PiState(integ, False)


# ---- closed loop -----------------------------------------------------------

class _Actuator:
    def __init__(self, plant: DevicePlant, t_s: float):
        self.gain = 1.0 + plant.error
        self.a = 1.0 if plant.lag <= t_s else t_s / plant.lag
        self.queue = [0.0] * int(round(plant.delay / t_s))
        self.y = 0.0

    def step(self, u: float) -> float:
        if self.queue:
            self.queue.append(u)
            u = self.queue.pop(0)
        self.y += self.a * (self.gain * u - self.y)
        return self.y


@dataclass
class BuildingTrace:
    t: np.ndarray
    target: np.ndarray
    power: np.ndarray
    battery: np.ndarray  # battery command
    devices: np.ndarray  # actual type-I + type-II consumption
    schedules: list[tuple[float, Schedule]]
    shortfalls: list[float]

    def steady_error(self, window: float = 1.0) -> float:
        dt = self.t[1] - self.t[0] if len(self.t) > 1 else 1.0
        k = max(1, int(round(window / dt)))
        return float(np.max(np.abs(self.power[-k:] - self.target[-k:])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,target,power,battery,devices\n")
        for row in zip(self.t, self.target, self.power, self.battery, self.devices):
            buf.write(",".join(f"{v:.12g}" for v in row) + "\n")
        return buf.getvalue()


class BuildingLoop:
    """Stepwise form of the two-rate building loop.

    Each sample runs :meth:`sample` (schedule if due, measure, battery PI) and
    then :meth:`advance` (actuators move by one sample time).
    """

    def __init__(self, fleet: BuildingFleet, *, t_s: float = 0.01, milp_period: float = 1.0,
                 milp_latency: float = 0.0, use_battery: bool = True):
        self.fleet = fleet
        self.t_s = t_s
        self.every = max(1, int(round(milp_period / t_s)))
        self.lag_steps = int(round(milp_latency / t_s))
        self.use_battery = use_battery
        self.act = {d.id: _Actuator(fleet.plant(d.id), t_s) for d in (*fleet.type1, *fleet.type2)}
        self.bat = _Actuator(DevicePlant(lag=fleet.battery.lag), t_s)
        self.rated = {d.id: d.rated for d in fleet.type1}
        self.cmd = {k: 0.0 for k in self.act}
        self.pending: list[tuple[int, Schedule]] = []
        self.pi = PiState()
        self.u_bat = 0.0
        self.k = 0
        self.schedules: list[tuple[float, Schedule]] = []
        self.shortfalls: list[float] = []

    @property
    def devices(self) -> float:
        return sum(a.y for a in self.act.values())

    @property
    def power(self) -> float:
        return self.fleet.baseline + self.devices + self.bat.y

    def sample(self, target: float) -> float:
        k = self.k
        if k % self.every == 0:
            s = milp_schedule(self.fleet, max(target, 0.0))
            self.schedules.append((k * self.t_s, s))
            if s.shortfall:
                self.shortfalls.append(k * self.t_s)
            self.pending.append((k + self.lag_steps, s))
        while self.pending and self.pending[0][0] <= k:
            _, s = self.pending.pop(0)
            self.cmd = {**{i: self.rated[i] * x for i, x in s.x.items()}, **s.v}
        meas = self.power
        if self.use_battery:
            self.u_bat, self.pi = pi_battery_step(target - meas, self.pi, self.fleet.battery, self.t_s)
        return meas

    def advance(self) -> None:
        for i, a in self.act.items():
            a.step(self.cmd.get(i, 0.0))
        self.bat.step(self.u_bat)
        self.k += 1


def bl_control_loop(fleet: BuildingFleet, target: float | Callable[[float], float] | np.ndarray, duration: float,
                    *, t_s: float = 0.01, milp_period: float = 1.0, milp_latency: float = 0.0,
                    use_battery: bool = True) -> BuildingTrace:
    """Two-rate loop: MILP every ``milp_period`` s, battery PI every ``t_s``.

    A schedule computed at time t takes effect ``milp_latency`` s later; the
    PI loop keeps running on the previous schedule meanwhile.
    """
    n = int(round(duration / t_s))
    if callable(target):
        tgt = np.array([float(target(k * t_s)) for k in range(n + 1)])
    else:
        tgt = np.broadcast_to(np.asarray(target, dtype=float), (n + 1,)).copy()
    loop = BuildingLoop(fleet, t_s=t_s, milp_period=milp_period, milp_latency=milp_latency,
                        use_battery=use_battery)
    P = np.zeros(n + 1)
    B = np.zeros(n + 1)
    Dv = np.zeros(n + 1)
    for k in range(n + 1):
        P[k] = loop.sample(tgt[k])
        B[k] = loop.u_bat
        Dv[k] = loop.devices
        if k < n:
            loop.advance()
    return BuildingTrace(np.arange(n + 1) * t_s, tgt, P, B, Dv, loop.schedules, loop.shortfalls)
