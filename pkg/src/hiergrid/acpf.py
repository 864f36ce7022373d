"""Newton-Raphson AC power flow in polar coordinates."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .netcase import Admittance, NetworkCase, build_ybus

log = logging.getLogger(__name__)

TOL = 1e-8
MAX_IT = 50


class PowerFlowError(RuntimeError):
    pass


class NonConvergence(PowerFlowError):
    def __init__(self, mismatch: float, iterations: int):
        super().__init__(f"power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e})")
        self.mismatch = mismatch
        self.iterations = iterations


class SingularJacobian(PowerFlowError):
    pass


@dataclass(frozen=True)
class OperatingPoint:
    V: np.ndarray  # complex bus voltages
    Pg: np.ndarray
    Qg: np.ndarray
    Pl: np.ndarray  # load-bus active demand, ordered as case.load_bus
    Ql: np.ndarray
    converged: bool = True
    mismatch_inf: float = 0.0
    iterations: int = 0

    @property
    def theta(self) -> np.ndarray:
        return np.angle(self.V)

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.V)

    @property
    def x(self) -> np.ndarray:
        """Stacked (theta, |V|) decision vector."""
        return np.concatenate([np.angle(self.V), np.abs(self.V)])


@dataclass(frozen=True)
class Injections:
    Pg: np.ndarray
    Qg: np.ndarray
    Pl: np.ndarray
    Ql: np.ndarray
    Sf: np.ndarray
    St: np.ndarray


def _gen_split(case: NetworkCase, s_gen_bus: np.ndarray) -> np.ndarray:
    """Distribute per-bus generation over the units at each bus, in proportion
    to their dispatch (equally if all are zero)."""
    sg = np.zeros(case.n_gen, dtype=complex)
    for b in np.unique(case.gen_bus):
        units = np.flatnonzero(case.gen_bus == b)
        if len(units) == 1:
            sg[units[0]] = s_gen_bus[b]
            continue
        w = np.array([max(case.generators[u].pg, 0.0) for u in units])
        w = w / w.sum() if w.sum() > 0 else np.full(len(units), 1.0 / len(units))
        sg[units] = w * s_gen_bus[b]
    return sg


def injections(case: NetworkCase, V: np.ndarray, adm: Admittance | None = None) -> Injections:
    """Generator outputs, load-bus demands and branch flows implied by ``V``.

    Loads located at generator buses are treated as fixed, so each unit's
    output is the bus injection plus that local load.
    """
    V = np.asarray(V, dtype=complex)
    if V.shape != (case.n_bus,):
        raise ValueError(f"voltage vector must have length {case.n_bus}")
    adm = adm or build_ybus(case)
    S = V * np.conj(adm.Y @ V)
    s_gen_bus = S + case.bus_load
    sg = _gen_split(case, s_gen_bus)
    sl = -S[case.load_bus]
    Sf = (adm.Cf @ V) * np.conj(adm.Yf @ V)
    St = (adm.Ct @ V) * np.conj(adm.Yt @ V)
    return Injections(Pg=sg.real, Qg=sg.imag, Pl=sl.real, Ql=sl.imag, Sf=Sf, St=St)


def _jacobian(Y: np.ndarray, V: np.ndarray):
    """Partial derivatives of complex bus injections w.r.t. angle and magnitude."""
    Ibus = Y @ V
    Vn = V / np.abs(V)
    dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
    dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(Vn)) + np.diag(np.conj(Ibus) * Vn)
    return dS_dVa, dS_dVm


def solve_powerflow(case: NetworkCase, start: OperatingPoint | None = None, *, tol: float = TOL,
                    max_it: int = MAX_IT, enforce_q_limits: bool = True) -> OperatingPoint:
    """Solve the AC power flow.

    Flat start by default (1 p.u. at PQ buses, setpoint magnitudes at PV and
    slack buses, zero angles). PV buses whose reactive output leaves its
    limits are switched to PQ with the output pinned at the limit. Limits are
    checked each time Newton converges, all violators switch in one pass,
    and switched buses never switch back.
    """
    adm = build_ybus(case)
    Y = adm.Y
    nb = case.n_bus
    kind = np.array([b.type for b in case.buses], dtype=object)
    vset = np.ones(nb)
    for g in case.generators:
        vset[case.bus_index[g.bus]] = g.vg
    has_gen = np.zeros(nb, dtype=bool)
    has_gen[case.gen_bus] = True
    pv = np.flatnonzero((kind == "PV") & has_gen)
    ref = case.slack

    if start is not None:
        V = np.asarray(start.V, dtype=complex).copy()
    else:
        vm = np.ones(nb)
        vm[pv] = vset[pv]
        vm[ref] = vset[ref] if has_gen[ref] else case.buses[ref].vm
        V = vm * np.exp(1j * case.buses[ref].va)

    pg_bus = np.zeros(nb)
    for g in case.generators:
        pg_bus[case.bus_index[g.bus]] += g.pg
    qlim_lo = np.zeros(nb)
    qlim_hi = np.zeros(nb)
    for g in case.generators:
        k = case.bus_index[g.bus]
        qlim_lo[k] += g.qmin
        qlim_hi[k] += g.qmax
    Sspec = pg_bus - case.bus_load
    qfixed = np.zeros(nb)  # reactive generation pinned after PV->PQ switching
    is_pv = np.zeros(nb, dtype=bool)
    is_pv[pv] = True

    it = 0
    mis_inf = np.inf
    while True:
        pvn = np.flatnonzero(is_pv)
        pq = np.flatnonzero(~is_pv & (np.arange(nb) != ref))
        pvpq = np.concatenate([pvn, pq])
        pvpq.sort()
        S = V * np.conj(Y @ V)
        mis = S - (Sspec.real + 1j * (qfixed - case.bus_load.imag))
        F = np.concatenate([mis.real[pvpq], mis.imag[pq]])
        mis_inf = float(np.max(np.abs(F))) if F.size else 0.0
        if mis_inf <= tol:
            if enforce_q_limits and pvn.size:
                qg = S.imag + case.bus_load.imag
                over = pvn[(qg[pvn] > qlim_hi[pvn] + tol)]
                under = pvn[(qg[pvn] < qlim_lo[pvn] - tol)]
                if over.size or under.size:
                    for k in over:
                        qfixed[k] = qlim_hi[k]
                        log.info("bus %s: PV->PQ at Qmax", case.buses[k].id)
                    for k in under:
                        qfixed[k] = qlim_lo[k]
                        log.info("bus %s: PV->PQ at Qmin", case.buses[k].id)
                    is_pv[over] = False
                    is_pv[under] = False
                    continue
            break
        if it >= max_it:
            raise NonConvergence(mis_inf, it)
        dVa, dVm = _jacobian(Y, V)
        Jm = np.block([
            [dVa.real[np.ix_(pvpq, pvpq)], dVm.real[np.ix_(pvpq, pq)]],
            [dVa.imag[np.ix_(pq, pvpq)], dVm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(Jm, -F)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from None
        va = np.angle(V)
        vm = np.abs(V)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        V = vm * np.exp(1j * va)
        it += 1

    inj = injections(case, V, adm)
    return OperatingPoint(V=V, Pg=inj.Pg, Qg=inj.Qg, Pl=inj.Pl, Ql=inj.Ql, converged=True,
                          mismatch_inf=mis_inf, iterations=it)


def op_from_voltage(case: NetworkCase, V: np.ndarray) -> OperatingPoint:
    """Wrap an arbitrary voltage vector as an operating point (no solve)."""
    inj = injections(case, V)
    return OperatingPoint(V=np.asarray(V, dtype=complex), Pg=inj.Pg, Qg=inj.Qg, Pl=inj.Pl, Ql=inj.Ql)
