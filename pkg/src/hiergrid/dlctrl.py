"""Distribution-level PCC power tracking.

Each phase of a feeder is an independent radial network rooted at the point
of common coupling (PCC).  Building targets are moved by an integral law on
the aggregate PCC error, scaled by per-building participation factors that
guards switch off near line-capacity and voltage limits.  Buildings follow
their targets through a discrete first-order lag.

Quantities are per unit; voltages are squared magnitudes ``U = |V|^2``.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .netcase import CaseSyntaxError, CaseValidationError

PHASES = ("a", "b", "c")
SWEEP_TOL = 1e-10
SWEEP_MAX_IT = 200
LOSS_LIMIT = 0.25  # upper bound on the feeder loss fraction (P0 - sum P) / P0
SCHEMA = "hiergrid-feeder/1"


class NonConvergence(RuntimeError):
    pass


class AssumptionViolated(UserWarning):
    """The run proceeds but the convergence guarantee does not apply."""


@dataclass(frozen=True)
class Node:
    id: str
    u_min: float = 0.95 ** 2
    u_max: float = 1.05 ** 2


@dataclass(frozen=True)
class Line:
    phase: str
    src: str
    dst: str
    r: float
    x: float
    rate: float = np.inf  # apparent-power capacity


@dataclass(frozen=True)
class Building:
    id: str
    node: str
    phase: str
    wp: float
    wq: float
    T: float  # first-order time constant, s
    p: float = 0.0  # initial consumption
    q: float = 0.0


class _PhaseNet:
    """One phase compiled to arrays.  Index 0 is the PCC; every other local
    node ``k`` is fed by the line ``parent[k] -> k`` whose data sit at ``k``."""

    def __init__(self, pcc: str, lines: list[Line], nodes: dict[str, Node]):
        children: dict[str, list[Line]] = {}
        seen_dst: set[str] = set()
        for ln in lines:
            if ln.dst in seen_dst:
                raise CaseValidationError(f"phase {ln.phase}: node {ln.dst} has two parent lines")
            seen_dst.add(ln.dst)
            children.setdefault(ln.src, []).append(ln)
        order, parent, feed = [pcc], [-1], [None]
        pos = {pcc: 0}
        k = 0
        while k < len(order):
            for ln in children.get(order[k], []):
                if ln.dst in pos:
                    raise CaseValidationError(f"phase {ln.phase}: cycle through node {ln.dst}")
                pos[ln.dst] = len(order)
                order.append(ln.dst)
                parent.append(k)
                feed.append(ln)
            k += 1
        if len(order) != len(lines) + 1:
            orphan = sorted(seen_dst - set(order))
            raise CaseValidationError(f"phase {lines[0].phase}: nodes {orphan} not connected to the PCC")
        n = len(order)
        self.ids = order
        self.pos = pos
        self.parent = np.array(parent)
        self.r = np.array([0.0] + [ln.r for ln in feed[1:]])
        self.x = np.array([0.0] + [ln.x for ln in feed[1:]])
        self.rate = np.array([np.inf] + [ln.rate for ln in feed[1:]])
        self.u_min = np.array([nodes[i].u_min for i in order])
        self.u_max = np.array([nodes[i].u_max for i in order])
        # D[k, m] = 1 when m lies in the subtree of k (inclusive)
        D = np.eye(n)
        for m in range(n - 1, 0, -1):
            D[self.parent[m]] += D[m]
        self.D = D
        # lateral: the PCC child whose subtree contains the node (0 for the PCC)
        lateral = np.zeros(n, dtype=int)
        for m in range(1, n):
            lateral[m] = m if self.parent[m] == 0 else lateral[self.parent[m]]
        self.lateral = lateral

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class FeederCase:
    name: str
    pcc: str
    nodes: tuple[Node, ...]
    lines: tuple[Line, ...]
    buildings: tuple[Building, ...]
    u_pcc: float = 1.0

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise CaseValidationError("duplicate node id")
        if self.pcc not in ids:
            raise CaseValidationError(f"PCC node {self.pcc} not defined")
        node = {n.id: n for n in self.nodes}
        for n in self.nodes:
            if not 0 < n.u_min < n.u_max:
                raise CaseValidationError(f"node {n.id}: need 0 < u_min < u_max")
        for ln in self.lines:
            if ln.phase not in PHASES:
                raise CaseValidationError(f"line {ln.src}-{ln.dst}: unknown phase {ln.phase!r}")
            if ln.src not in node or ln.dst not in node:
                raise CaseValidationError(f"line {ln.src}-{ln.dst}: unknown node")
            if ln.r < 0 or ln.x < 0 or not ln.rate > 0:
                raise CaseValidationError(f"line {ln.src}-{ln.dst}: need r, x >= 0 and rate > 0")
        nets = {ph: _PhaseNet(self.pcc, [ln for ln in self.lines if ln.phase == ph], node) for ph in PHASES}
        bids = [b.id for b in self.buildings]
        if len(set(bids)) != len(bids):
            raise CaseValidationError("duplicate building id")
        for b in self.buildings:
            if b.phase not in PHASES or b.node not in nets[b.phase].pos:
                raise CaseValidationError(f"building {b.id}: node {b.node} has no phase {b.phase}")
            if b.wp < 0 or b.wq < 0:
                raise CaseValidationError(f"building {b.id}: participation factors must be nonnegative")
            if not b.T > 0:
                raise CaseValidationError(f"building {b.id}: time constant must be positive")
        for name, tot in (("wp", sum(b.wp for b in self.buildings)), ("wq", sum(b.wq for b in self.buildings))):
            if not 0 < tot <= 1 + 1e-12:
                raise CaseValidationError(f"sum of {name} must lie in (0, 1], got {tot:.6g}")
        if not self.u_pcc > 0:
            raise CaseValidationError("u_pcc must be positive")
        object.__setattr__(self, "_nets", nets)
        slots = {}
        for ph in PHASES:
            idx = [k for k, b in enumerate(self.buildings) if b.phase == ph]
            slots[ph] = (np.array(idx, dtype=int), np.array([nets[ph].pos[self.buildings[k].node] for k in idx],
                                                            dtype=int))
        object.__setattr__(self, "_slots", slots)
        for name in ("wp", "wq", "T", "p", "q"):
            object.__setattr__(self, f"_{name}", np.array([getattr(b, name) for b in self.buildings]))

    @property
    def nets(self) -> dict[str, _PhaseNet]:
        return self._nets  # type: ignore[attr-defined]

    @property
    def n_building(self) -> int:
        return len(self.buildings)

    @property
    def wp(self) -> np.ndarray:
        return self._wp.copy()  # type: ignore[attr-defined]

    @property
    def wq(self) -> np.ndarray:
        return self._wq.copy()  # type: ignore[attr-defined]

    @property
    def T(self) -> np.ndarray:
        return self._T.copy()  # type: ignore[attr-defined]

    @property
    def p_init(self) -> np.ndarray:
        return self._p.copy()  # type: ignore[attr-defined]

    @property
    def q_init(self) -> np.ndarray:
        return self._q.copy()  # type: ignore[attr-defined]

    def with_initial(self, p: np.ndarray, q: np.ndarray) -> "FeederCase":
        bs = tuple(replace(b, p=float(pp), q=float(qq)) for b, pp, qq in zip(self.buildings, p, q))
        return replace(self, buildings=bs)

    def building_slots(self, phase: str) -> tuple[np.ndarray, np.ndarray]:
        """(building indices, local node positions) on one phase."""
        return self._slots[phase]  # type: ignore[attr-defined]


# ---- serialization ---------------------------------------------------------

def feeder_to_dict(f: FeederCase) -> dict[str, Any]:
    return {
        "schema": SCHEMA,
        "name": f.name,
        "pcc": f.pcc,
        "u_pcc": f.u_pcc,
        "nodes": [{"id": n.id, "u_min": n.u_min, "u_max": n.u_max} for n in f.nodes],
        "lines": [{"phase": ln.phase, "from": ln.src, "to": ln.dst, "r": ln.r, "x": ln.x,
                   "rate": None if np.isinf(ln.rate) else ln.rate} for ln in f.lines],
        "buildings": [{"id": b.id, "node": b.node, "phase": b.phase, "wp": b.wp, "wq": b.wq, "T": b.T,
                       "p": b.p, "q": b.q} for b in f.buildings],
    }


def feeder_from_dict(d: dict[str, Any]) -> FeederCase:
    try:
        nodes = tuple(Node(str(n["id"]), float(n.get("u_min", 0.95 ** 2)), float(n.get("u_max", 1.05 ** 2)))
                      for n in d["nodes"])
        lines = tuple(Line(ln["phase"], str(ln["from"]), str(ln["to"]), float(ln["r"]), float(ln["x"]),
                           np.inf if ln.get("rate") is None else float(ln["rate"])) for ln in d["lines"])
        bld = tuple(Building(str(b["id"]), str(b["node"]), b["phase"], float(b["wp"]), float(b["wq"]),
                             float(b["T"]), float(b.get("p", 0.0)), float(b.get("q", 0.0)))
                    for b in d["buildings"])
        return FeederCase(str(d.get("name", "feeder")), str(d["pcc"]), nodes, lines, bld,
                          float(d.get("u_pcc", 1.0)))
    except KeyError as exc:
        raise CaseValidationError(f"missing field {exc.args[0]!r}") from None


def load_feeder(path: str | Path) -> FeederCase:
    return parse_feeder(Path(path).read_text())


def builtin_feeder(name: str = "feeder10") -> FeederCase:
    from importlib import resources

    return parse_feeder(resources.files("hiergrid.data").joinpath(f"{name}.json").read_text())


def parse_feeder(text: str) -> FeederCase:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    return feeder_from_dict(d)


def random_feeder(rng: np.random.Generator, n_buildings: int, *, n_nodes: int | None = None,
                  name: str = "random") -> FeederCase:
    """Random three-phase radial feeder with single-phase buildings.

    The backbone is three-phase; roughly a third of the non-backbone nodes are
    single-phase laterals.  Loads and impedances are sized so that losses stay
    at a few percent of the PCC power.
    """
    n_nodes = n_nodes or max(3, n_buildings // 2 + 2)
    ids = [str(k) for k in range(n_nodes)]
    parent = [0] + [int(rng.integers(0, k)) for k in range(1, n_nodes)]
    phases = [set(PHASES)]
    for k in range(1, n_nodes):
        par = phases[parent[k]]
        if len(par) == 3 and rng.random() > 1 / 3:
            phases.append(set(PHASES))
        else:
            phases.append({sorted(par)[int(rng.integers(len(par)))]})
    lines = []
    for k in range(1, n_nodes):
        r, x = rng.uniform(0.002, 0.01), rng.uniform(0.004, 0.02)
        for ph in sorted(phases[k]):
            lines.append(Line(ph, ids[parent[k]], ids[k], r, x, np.inf))
    w = rng.uniform(0.5, 1.5, n_buildings)
    w = w / w.sum()
    wq = rng.uniform(0.5, 1.5, n_buildings)
    wq = wq / wq.sum()
    blds = []
    for i in range(n_buildings):
        k = int(rng.integers(1, n_nodes))
        ph = sorted(phases[k])[int(rng.integers(len(phases[k])))]
        blds.append(Building(f"b{i}", ids[k], ph, float(w[i]), float(wq[i]), float(rng.uniform(0.1, 0.4)),
                             float(rng.uniform(0.005, 0.02)), float(rng.uniform(0.001, 0.006))))
    nodes = tuple(Node(i, 0.9 ** 2, 1.1 ** 2) for i in ids)
    return FeederCase(name, ids[0], nodes, tuple(lines), tuple(blds))


# ---- DistFlow --------------------------------------------------------------

@dataclass
class PhaseFlow:
    P: np.ndarray  # sending-end flow on the line feeding each local node (0 at the PCC)
    Q: np.ndarray
    U: np.ndarray
    iterations: int
    residual: float

    @property
    def S2(self) -> np.ndarray:
        return self.P ** 2 + self.Q ** 2


@dataclass
class FeederFlow:
    phases: dict[str, PhaseFlow]
    P0_phase: dict[str, float]
    Q0_phase: dict[str, float]

    @property
    def P0(self) -> float:
        return float(sum(self.P0_phase.values()))

    @property
    def Q0(self) -> float:
        return float(sum(self.Q0_phase.values()))


def _node_loads(feeder: FeederCase, phase: str, P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    net = feeder.nets[phase]
    idx, pos = feeder.building_slots(phase)
    p = np.zeros(net.n)
    q = np.zeros(net.n)
    np.add.at(p, pos, P[idx])
    np.add.at(q, pos, Q[idx])
    return p, q


def _sweep(net: _PhaseNet, p: np.ndarray, q: np.ndarray, u0: float, start: PhaseFlow | None,
           tol: float, max_it: int) -> PhaseFlow:
    if start is not None:
        Pf, Qf, U = start.P.copy(), start.Q.copy(), start.U.copy()
    else:
        Pf, Qf, U = net.D @ p, net.D @ q, np.full(net.n, u0)
    U[0] = u0
    with np.errstate(over="ignore", invalid="ignore"):
        return _iterate(net, p, q, u0, Pf, Qf, U, tol, max_it)


def _iterate(net, p, q, u0, Pf, Qf, U, tol, max_it) -> PhaseFlow:
    par = net.parent[1:]
    z2 = net.r ** 2 + net.x ** 2
    res = np.inf
    for it in range(1, max_it + 1):
        Up = np.concatenate([[u0], U[par]])
        l = (Pf ** 2 + Qf ** 2) / Up
        l[0] = 0.0
        Pf = net.D @ (p + net.r * l)
        Qf = net.D @ (q + net.x * l)
        drop = 2 * (net.r * Pf + net.x * Qf) - z2 * (Pf ** 2 + Qf ** 2) / Up
        drop[0] = 0.0
        U_new = u0 - net.D.T @ drop
        if not np.all(np.isfinite(U_new)) or np.any(U_new <= 0):
            raise NonConvergence("voltage collapse in DistFlow sweep")
        moved = np.max(np.abs(U_new - U))
        U = U_new
        # the full residual is only worth evaluating once the iterates settle
        if moved <= tol:
            res = _residual(net, p, q, u0, Pf, Qf, U)
            if res <= tol:
                return PhaseFlow(Pf, Qf, U, it, res)
    raise NonConvergence(f"DistFlow sweep residual {res:.3e} after {max_it} iterations")


def _residual(net: _PhaseNet, p, q, u0, Pf, Qf, U) -> float:
    """Max violation over the three DistFlow equations of every line."""
    if net.n == 1:
        return 0.0
    m = np.arange(1, net.n)
    i = net.parent[m]
    Ui = np.where(i == 0, u0, U[i])
    l = (Pf[m] ** 2 + Qf[m] ** 2) / Ui
    child_p = np.zeros(net.n)
    child_q = np.zeros(net.n)
    np.add.at(child_p, i, Pf[m])
    np.add.at(child_q, i, Qf[m])
    r1 = Pf[m] - net.r[m] * l - p[m] - child_p[m]
    r2 = Qf[m] - net.x[m] * l - q[m] - child_q[m]
    r3 = Ui - U[m] - 2 * (net.r[m] * Pf[m] + net.x[m] * Qf[m]) + (net.r[m] ** 2 + net.x[m] ** 2) * l
    return float(max(np.abs(r1).max(), np.abs(r2).max(), np.abs(r3).max()))


def solve_distflow(feeder: FeederCase, P: np.ndarray, Q: np.ndarray, *, u_pcc: float | None = None,
                   start: FeederFlow | None = None, tol: float = SWEEP_TOL, max_it: int = SWEEP_MAX_IT) -> FeederFlow:
    """Backward/forward sweep for building consumptions ``P``, ``Q``."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != (feeder.n_building,) or Q.shape != P.shape:
        raise ValueError(f"expected {feeder.n_building} building powers")
    u0 = feeder.u_pcc if u_pcc is None else u_pcc
    out, p0, q0 = {}, {}, {}
    for ph in PHASES:
        net = feeder.nets[ph]
        p, q = _node_loads(feeder, ph, P, Q)
        fl = _sweep(net, p, q, u0, start.phases[ph] if start else None, tol, max_it)
        out[ph] = fl
        p0[ph] = float(fl.P[0])
        q0[ph] = float(fl.Q[0])
    return FeederFlow(out, p0, q0)


# ---- controller ------------------------------------------------------------

@dataclass(frozen=True)
class DlCtrlConfig:
    k_I: float | None = None  # None: 0.35 * t_s / max T
    t_s: float = 0.01
    eps_s: float = 0.01  # capacity margin, as a fraction of the squared rating
    eps_v: float = 0.005  # voltage margin, p.u.^2
    p0_target: float | None = None
    q0_target: float | None = None
    guards: bool = True

    def __post_init__(self):
        if self.k_I is not None and self.k_I < 0:
            raise ValueError("k_I must be nonnegative")
        if not self.t_s > 0:
            raise ValueError("t_s must be positive")
        if self.eps_s < 0 or self.eps_v < 0:
            raise ValueError("guard margins must be nonnegative")

    def gain(self, feeder: FeederCase) -> float:
        return self.k_I if self.k_I is not None else default_gain(feeder, self.t_s)


def default_gain(feeder: FeederCase, t_s: float = 0.01) -> float:
    return 0.35 * t_s / float(feeder.T.max())


@dataclass
class GuardStatus:
    active_p: np.ndarray
    active_q: np.ndarray
    cause_p: list[str | None] = field(default_factory=list)
    cause_q: list[str | None] = field(default_factory=list)

    @classmethod
    def all_active(cls, n: int) -> "GuardStatus":
        return cls(np.ones(n, dtype=bool), np.ones(n, dtype=bool), [None] * n, [None] * n)

    def bitmap(self) -> str:
        return "".join("1" if a else "0" for a in self.active_p) + "/" + \
            "".join("1" if a else "0" for a in self.active_q)


def dl_ctrl_step(p_hat: np.ndarray, q_hat: np.ndarray, error: tuple[float, float], feeder: FeederCase,
                 k_I: float, guards: GuardStatus | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Integral target update from the broadcast PCC error ``(P0_hat - P0, Q0_hat - Q0)``.

    Only the aggregate error enters; no per-building measurement is used.
    """
    wp = feeder.wp
    wq = feeder.wq
    if guards is not None:
        wp = np.where(guards.active_p, wp, 0.0)
        wq = np.where(guards.active_q, wq, 0.0)
    ep, eq = error
    return p_hat + k_I * wp * ep, q_hat + k_I * wq * eq


def guard_update(flows: FeederFlow | list[FeederFlow], feeder: FeederCase, config: DlCtrlConfig,
                 error: tuple[float, float]) -> GuardStatus:
    """Participation-factor switches for the current error direction.

    A factor is off while any trigger holds in any of the given flow states;
    being stateless, it comes back on as soon as no trigger holds.  Loads
    raise line flows in the direction they already run, and they lower
    voltages, so:

    * line near capacity: off for buildings downstream when the error would
      push the flow further in its present direction;
    * voltage near the upper bound: off on that lateral when the error is
      negative (shedding load raises voltage);
    * voltage near the lower bound: off on that lateral when the error is positive.
    """
    if isinstance(flows, FeederFlow):
        flows = [flows]
    nb = feeder.n_building
    st = GuardStatus.all_active(nb)
    if not config.guards:
        return st
    ep, eq = error
    for ph in PHASES:
        net = feeder.nets[ph]
        idx, pos = feeder.building_slots(ph)
        if idx.size == 0:
            continue
        for fl in flows:
            pf = fl.phases[ph]
            hot = np.flatnonzero(pf.S2 > net.rate ** 2 * (1 - config.eps_s))
            for m in hot:
                down = net.D[m, pos] > 0
                for sig, e, active, cause, tag in ((pf.P[m], ep, st.active_p, st.cause_p, "P"),
                                                   (pf.Q[m], eq, st.active_q, st.cause_q, "Q")):
                    if sig * e > 0:
                        _switch_off(idx[down], active, cause, f"capacity {ph}:{net.ids[net.parent[m]]}-{net.ids[m]}")
            hi = np.flatnonzero((pf.U > net.u_max - config.eps_v) & (np.arange(net.n) > 0))
            lo = np.flatnonzero((pf.U < net.u_min + config.eps_v) & (np.arange(net.n) > 0))
            for nodes, sign, what in ((hi, -1.0, "upper"), (lo, 1.0, "lower")):
                for m in nodes:
                    same = net.lateral[pos] == net.lateral[m]
                    where = f"{what} voltage {ph}:{net.ids[m]}"
                    if sign * ep > 0:
                        _switch_off(idx[same], st.active_p, st.cause_p, where)
                    if sign * eq > 0:
                        _switch_off(idx[same], st.active_q, st.cause_q, where)
    return st


def _switch_off(which: np.ndarray, active: np.ndarray, cause: list, why: str) -> None:
    for k in which:
        if active[k]:
            active[k] = False
            cause[k] = why


def plant_step(P: np.ndarray, Q: np.ndarray, p_hat: np.ndarray, q_hat: np.ndarray, feeder: FeederCase,
               t_s: float) -> tuple[np.ndarray, np.ndarray]:
    a = t_s / feeder.T
    return P + a * (p_hat - P), Q + a * (q_hat - Q)


def lyapunov_value(p_hat, q_hat, P, Q, p0_target, q0_target, P0, Q0) -> float:
    dp = np.asarray(p_hat) - np.asarray(P)
    dq = np.asarray(q_hat) - np.asarray(Q)
    return float(dp @ dp + dq @ dq + (p0_target - P0) ** 2 + (q0_target - Q0) ** 2)


def check_assumptions(feeder: FeederCase, config: DlCtrlConfig, flow: FeederFlow | None = None) -> list[str]:
    """Human-readable list of violated convergence assumptions (empty if none)."""
    bad = []
    ratio = config.t_s / feeder.T
    if np.any(ratio >= 2):
        bad.append(f"t_s/T reaches {ratio.max():.3g} (must stay below 2)")
    flow = flow or solve_distflow(feeder, feeder.p_init, feeder.q_init)
    for tot, dem, tag in ((flow.P0, feeder.p_init.sum(), "active"), (flow.Q0, feeder.q_init.sum(), "reactive")):
        if abs(tot) > 1e-12 and abs(tot - dem) / abs(tot) >= LOSS_LIMIT:
            bad.append(f"{tag} loss fraction {abs(tot - dem) / abs(tot):.3g} exceeds {LOSS_LIMIT}")
    return bad


class Tracker:
    """Closed-loop feeder state advanced one sample at a time.

    Each :meth:`step` runs guard_update, dl_ctrl_step, plant_step and
    solve_distflow, in that order, against the PCC measurement of the previous
    sample.  Guards are evaluated on both the measured state and the state the
    candidate targets would produce; a factor switched off by the candidate
    check stays off for the step and the candidate is recomputed.
    """

    def __init__(self, feeder: FeederCase, config: DlCtrlConfig = DlCtrlConfig()):
        self.feeder = feeder
        self.config = config
        self.k_I = config.gain(feeder)
        self.P = feeder.p_init.copy()
        self.Q = feeder.q_init.copy()
        self.p_hat = self.P.copy()
        self.q_hat = self.Q.copy()
        self.u_pcc = feeder.u_pcc
        self.flow = solve_distflow(feeder, self.P, self.Q)
        self.p0_target = self.flow.P0 if config.p0_target is None else config.p0_target
        self.q0_target = self.flow.Q0 if config.q0_target is None else config.q0_target
        self.guards = GuardStatus.all_active(feeder.n_building)

    @property
    def error(self) -> tuple[float, float]:
        return self.p0_target - self.flow.P0, self.q0_target - self.flow.Q0

    def lyapunov(self) -> float:
        return lyapunov_value(self.p_hat, self.q_hat, self.P, self.Q, self.p0_target, self.q0_target,
                              self.flow.P0, self.flow.Q0)

    def violation(self) -> float:
        """Largest limit violation in the present state (0 when feasible)."""
        worst = 0.0
        for ph in PHASES:
            net, pf = self.feeder.nets[ph], self.flow.phases[ph]
            fin = np.isfinite(net.rate)
            if fin.any():
                worst = max(worst, float(np.max(pf.S2[fin] - net.rate[fin] ** 2)))
            worst = max(worst, float(np.max(net.u_min[1:] - pf.U[1:], initial=0.0)),
                        float(np.max(pf.U[1:] - net.u_max[1:], initial=0.0)))
        return max(worst, 0.0)

    def step(self) -> None:
        e = self.error
        guards = GuardStatus.all_active(self.feeder.n_building)
        while True:
            p_hat, q_hat = dl_ctrl_step(self.p_hat, self.q_hat, e, self.feeder, self.k_I, guards)
            if not self.config.guards:
                break
            # buildings head for the candidate targets, so the guards look one sample ahead
            cand = solve_distflow(self.feeder, p_hat, q_hat, u_pcc=self.u_pcc, start=self.flow)
            new = guard_update([self.flow, cand], self.feeder, self.config, e)
            new.active_p &= guards.active_p
            new.active_q &= guards.active_q
            for k in range(self.feeder.n_building):
                new.cause_p[k] = new.cause_p[k] or guards.cause_p[k]
                new.cause_q[k] = new.cause_q[k] or guards.cause_q[k]
            if np.array_equal(new.active_p, guards.active_p) and np.array_equal(new.active_q, guards.active_q):
                break
            guards = new
        self.guards = guards
        self.p_hat, self.q_hat = p_hat, q_hat
        self.P, self.Q = plant_step(self.P, self.Q, self.p_hat, self.q_hat, self.feeder, self.config.t_s)
        self.flow = solve_distflow(self.feeder, self.P, self.Q, u_pcc=self.u_pcc, start=self.flow)


@dataclass
class TrackingResult:
    t: np.ndarray
    P0: np.ndarray
    Q0: np.ndarray
    p0_target: float
    q0_target: float
    V: np.ndarray
    violation: np.ndarray
    P: np.ndarray  # (steps + 1, buildings)
    Q: np.ndarray
    p_hat: np.ndarray
    q_hat: np.ndarray
    guard_bitmap: list[str]
    guard_events: list[dict[str, Any]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        nb = self.P.shape[1]
        cols = ["t", "P0", "Q0", "V"] + [f"{k}{i}" for k in ("p_hat", "q_hat", "P", "Q") for i in range(nb)] + ["guards"]
        buf.write(",".join(cols) + "\n")
        for j in range(len(self.t)):
            vals = [self.t[j], self.P0[j], self.Q0[j], self.V[j], *self.p_hat[j], *self.q_hat[j], *self.P[j],
                    *self.Q[j]]
            buf.write(",".join(f"{v:.12g}" for v in vals) + f",{self.guard_bitmap[j]}\n")
        return buf.getvalue()


def run_tracking(feeder: FeederCase, config: DlCtrlConfig, duration: float) -> TrackingResult:
    tr = Tracker(feeder, config)
    for msg in check_assumptions(feeder, config, tr.flow):
        warnings.warn(msg, AssumptionViolated, stacklevel=2)
    n = int(round(duration / config.t_s))
    P0, Q0, V, viol = [tr.flow.P0], [tr.flow.Q0], [tr.lyapunov()], [tr.violation()]
    P, Q, ph, qh = [tr.P], [tr.Q], [tr.p_hat], [tr.q_hat]
    bitmap = [tr.guards.bitmap()]
    events: list[dict[str, Any]] = []
    prev = tr.guards
    for k in range(1, n + 1):
        tr.step()
        g = tr.guards
        for i in range(feeder.n_building):
            for kind, a0, a1, cause in (("p", prev.active_p[i], g.active_p[i], g.cause_p[i]),
                                        ("q", prev.active_q[i], g.active_q[i], g.cause_q[i])):
                if a0 != a1:
                    events.append({"t": round(k * config.t_s, 9), "building": feeder.buildings[i].id,
                                   "factor": kind, "active": bool(a1), "cause": cause})
        prev = g
        P0.append(tr.flow.P0)
        Q0.append(tr.flow.Q0)
        V.append(tr.lyapunov())
        viol.append(tr.violation())
        P.append(tr.P)
        Q.append(tr.Q)
        ph.append(tr.p_hat)
        qh.append(tr.q_hat)
        bitmap.append(g.bitmap())
    return TrackingResult(t=np.arange(n + 1) * config.t_s, P0=np.array(P0), Q0=np.array(Q0),
                          p0_target=tr.p0_target, q0_target=tr.q0_target, V=np.array(V),
                          violation=np.array(viol), P=np.array(P), Q=np.array(Q), p_hat=np.array(ph),
                          q_hat=np.array(qh), guard_bitmap=bitmap, guard_events=events)
