"""Two-axis generator DAE, its linearization and modal sensitivities.

States per machine are ``s = (delta, omega, eq', ed')``; algebraic variables
are bus angles and magnitudes ``x = (theta, |V|)``.  The exciter/PSS is the
static closure ``ef = Ef - KA (|Vg| - |Vg_e|) + KA KS (omega - omega_s)``.

Generator current is the bus injection ``(Y V)_g`` plus the current drawn by
any (fixed, constant-power) load sitting at the generator bus.

Derivatives are written as batched directional derivatives: ``jvp`` pushes a
block of tangent directions through the residual, ``hvp`` evaluates the
symmetric second derivative on paired directions.  Both are closed-form.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .acpf import OperatingPoint
from .netcase import NetworkCase, build_ybus

log = logging.getLogger(__name__)

BETA_MIN = 2.0 * np.pi * 0.1  # rad/s; slower modes are not counted as oscillatory
ZERO_MODE = 1e-6
DEGENERATE_GAP = 1e-6
COND_WARN = 1e12


class SmallSignalError(RuntimeError):
    pass


class EquilibriumInconsistent(SmallSignalError):
    pass


class SingularD(SmallSignalError):
    pass


class EigenFailure(SmallSignalError):
    pass


class DegenerateMode(SmallSignalError):
    pass


@dataclass(frozen=True)
class Equilibrium:
    """Machine internals and the injections that hold ``V`` in steady state."""

    V: np.ndarray
    delta: np.ndarray
    eqp: np.ndarray
    edp: np.ndarray
    Ef: np.ndarray
    Pm: np.ndarray
    Pl: np.ndarray  # load-bus demand (positive = consumption)
    Ql: np.ndarray
    vref: np.ndarray  # |V| at generator buses

    def state(self, omega_s: float) -> np.ndarray:
        return np.concatenate([self.delta, np.full_like(self.delta, omega_s), self.eqp, self.edp])

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([np.angle(self.V), np.abs(self.V)])


class DynamicModel:
    """Residual of the generator/network DAE for one network topology."""

    def __init__(self, case: NetworkCase, extra_shunt: dict[int, complex] | None = None):
        gb = case.gen_bus
        if len(np.unique(gb)) != len(gb):
            raise SmallSignalError("dynamic model allows at most one generator per bus")
        self.case = case
        self.adm = build_ybus(case, extra_shunt)
        self.Y = self.adm.Y
        self.gb = gb
        self.lb = case.load_bus
        self.ng = case.n_gen
        self.nb = case.n_bus
        self.nl = len(self.lb)
        self.omega_s = case.omega_s
        d = case.dyn_array
        self.M, self.Dm = d("M"), d("D")
        self.Td0, self.Tq0 = d("Td0p"), d("Tq0p")
        self.xd, self.xq, self.xdp, self.xqp = d("xd"), d("xq"), d("xdp"), d("xqp")
        self.KA, self.KS = d("KA"), d("KS")
        # conj of the constant-power load at each generator bus
        self.cl = np.conj(case.bus_load[gb])

    @property
    def n_state(self) -> int:
        return 4 * self.ng

    @property
    def n_alg(self) -> int:
        return 2 * self.nb

    def with_shunt(self, extra_shunt: dict[int, complex]) -> "DynamicModel":
        return DynamicModel(self.case, extra_shunt)

    # -- state helpers ----------------------------------------------------
    def split(self, s: np.ndarray, x: np.ndarray):
        ng, nb = self.ng, self.nb
        return s[:ng], s[ng:2 * ng], s[2 * ng:3 * ng], s[3 * ng:], x[:nb], x[nb:]

    def gen_current(self, V: np.ndarray) -> np.ndarray:
        return (self.Y @ V)[self.gb] + self.cl / np.conj(V[self.gb])

    def equilibrium(self, V: np.ndarray) -> Equilibrium:
        """Back-solve machine internals, Ef, Pm and load demand for voltage ``V``."""
        V = np.asarray(V, dtype=complex)
        if not np.all(np.isfinite(V)) or np.any(np.abs(V) < 1e-9):
            raise EquilibriumInconsistent("bus voltages must be finite and nonzero")
        Vg = V[self.gb]
        Ig = self.gen_current(V)
        E = Vg + 1j * self.xq * Ig
        if np.any(np.abs(E) < 1e-9):
            raise EquilibriumInconsistent("internal voltage vanishes; rotor angle undefined")
        delta = np.angle(E)
        r = 1j * np.exp(-1j * delta)
        vdq, idq = r * Vg, r * Ig
        eqp = vdq.imag + self.xdp * idq.real
        edp = (self.xq - self.xqp) * idq.imag
        Ef = eqp + (self.xd - self.xdp) * idq.real
        Pm = (Vg * np.conj(Ig)).real
        S = V * np.conj(self.Y @ V)
        return Equilibrium(V=V, delta=delta, eqp=eqp, edp=edp, Ef=Ef, Pm=Pm, Pl=-S[self.lb].real,
                           Ql=-S[self.lb].imag, vref=np.abs(Vg))

    def equilibrium_tangent(self, V: np.ndarray) -> np.ndarray:
        """d(state)/dx along the equilibrium manifold, shape (4 ng, 2 nb)."""
        nb, ng = self.nb, self.ng
        V = np.asarray(V, dtype=complex)
        vm = np.abs(V)
        eth = V / vm
        eye = np.eye(nb)
        dth = np.hstack([eye, np.zeros((nb, nb))])
        dvm = np.hstack([np.zeros((nb, nb)), eye])
        dV = eth[:, None] * dvm + 1j * V[:, None] * dth
        dI = self.Y @ dV
        Vg = V[self.gb]
        W = 1.0 / np.conj(Vg)
        dW = W[:, None] * (1j * dth[self.gb] - dvm[self.gb] / vm[self.gb, None])
        Ig = self.gen_current(V)
        dIg = dI[self.gb] + self.cl[:, None] * dW
        dVg = dV[self.gb]
        E = Vg + 1j * self.xq * Ig
        dE = dVg + 1j * self.xq[:, None] * dIg
        ddelta = (dE / E[:, None]).imag
        delta = np.angle(E)
        r = 1j * np.exp(-1j * delta)
        dr = -1j * r[:, None] * ddelta
        dvdq = dr * Vg[:, None] + r[:, None] * dVg
        didq = dr * Ig[:, None] + r[:, None] * dIg
        deqp = dvdq.imag + self.xdp[:, None] * didq.real
        dedp = (self.xq - self.xqp)[:, None] * didq.imag
        return np.vstack([ddelta, np.zeros((ng, 2 * nb)), deqp, dedp])

    # -- residual ---------------------------------------------------------
    def residual(self, s, x, eq: Equilibrium, *, pm=None, Ef=None, vref=None, Pl=None, Ql=None,
                 load_scale=None) -> np.ndarray:
        """Right-hand sides (f, g) of the DAE.  Parameters default to ``eq``.

        ``load_scale`` optionally multiplies load-bus demand (used by the time
        simulator's undervoltage load model).
        """
        delta, omega, eqp, edp, th, vm = self.split(s, x)
        pm = eq.Pm if pm is None else pm
        Ef = eq.Ef if Ef is None else Ef
        vref = eq.vref if vref is None else vref
        Pl = eq.Pl if Pl is None else Pl
        Ql = eq.Ql if Ql is None else Ql
        V = vm * np.exp(1j * th)
        I = self.Y @ V
        Vg = V[self.gb]
        Ig = I[self.gb] + self.cl / np.conj(Vg)
        r = 1j * np.exp(-1j * delta)
        vdq, idq = r * Vg, r * Ig
        Pe = (Vg * np.conj(Ig)).real
        dw = omega - self.omega_s
        ef = Ef - self.KA * (vm[self.gb] - vref) + self.KA * self.KS * dw
        S = V[self.lb] * np.conj(I[self.lb])
        if load_scale is not None:
            Pl = Pl * load_scale
            Ql = Ql * load_scale
        return np.concatenate([
            dw,
            (pm - Pe - self.Dm * dw) / self.M,
            (ef - eqp - (self.xd - self.xdp) * idq.real) / self.Td0,
            (-edp + (self.xq - self.xqp) * idq.imag) / self.Tq0,
            edp - vdq.real + self.xqp * idq.imag,
            eqp - vdq.imag - self.xdp * idq.real,
            Pl + S.real,
            Ql + S.imag,
        ])

    def _first(self, delta, th, vm, ddelta, dth, dvm):
        V = vm * np.exp(1j * th)
        eth = np.exp(1j * th)
        dV = eth[:, None] * dvm + 1j * V[:, None] * dth
        dI = self.Y @ dV
        Vg = V[self.gb]
        W = 1.0 / np.conj(Vg)
        dW = W[:, None] * (1j * dth[self.gb] - dvm[self.gb] / vm[self.gb, None])
        dIg = dI[self.gb] + self.cl[:, None] * dW
        r = 1j * np.exp(-1j * delta)
        dr = -1j * r[:, None] * ddelta
        return V, eth, dV, dI, W, dW, dIg, r, dr

    def jvp(self, s, x, ds: np.ndarray, dx: np.ndarray) -> np.ndarray:
        """Directional derivatives of the residual, one column per direction."""
        ds = np.atleast_2d(ds.T).T
        dx = np.atleast_2d(dx.T).T
        delta, omega, eqp, edp, th, vm = self.split(s, x)
        ng, nb = self.ng, self.nb
        dd, dw, deq, ded = ds[:ng], ds[ng:2 * ng], ds[2 * ng:3 * ng], ds[3 * ng:]
        dth, dvm = dx[:nb], dx[nb:]
        V, eth, dV, dI, W, dW, dIg, r, dr = self._first(delta, th, vm, dd, dth, dvm)
        I = self.Y @ V
        Vg = V[self.gb]
        Ig = I[self.gb] + self.cl * W
        dVg = dV[self.gb]
        dvdq = dr * Vg[:, None] + r[:, None] * dVg
        didq = dr * Ig[:, None] + r[:, None] * dIg
        dPe = (dVg * np.conj(Ig)[:, None] + Vg[:, None] * np.conj(dIg)).real
        lb = self.lb
        dS = dV[lb] * np.conj(I[lb])[:, None] + V[lb, None] * np.conj(dI[lb])
        c = lambda a: a[:, None]  # noqa: E731
        return np.vstack([
            dw,
            (-dPe - c(self.Dm) * dw) / c(self.M),
            (-c(self.KA) * dvm[self.gb] + c(self.KA * self.KS) * dw - deq
             - c(self.xd - self.xdp) * didq.real) / c(self.Td0),
            (-ded + c(self.xq - self.xqp) * didq.imag) / c(self.Tq0),
            ded - dvdq.real + c(self.xqp) * didq.imag,
            deq - dvdq.imag - c(self.xdp) * didq.real,
            dS.real,
            dS.imag,
        ])

    def jacobian(self, s, x) -> np.ndarray:
        n = self.n_state + self.n_alg
        eye = np.eye(n)
        return self.jvp(s, x, eye[: self.n_state], eye[self.n_state:])

    def hvp(self, s, x, a: tuple[np.ndarray, np.ndarray], b: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        """Second directional derivative F''[a, b] for paired direction blocks.

        ``a`` and ``b`` are ``(ds, dx)`` pairs of real arrays broadcastable to a
        common number of columns.
        """
        delta, omega, eqp, edp, th, vm = self.split(s, x)
        ng, nb = self.ng, self.nb
        (dsa, dxa), (dsb, dxb) = a, b
        dsa, dxa = np.atleast_2d(dsa.T).T, np.atleast_2d(dxa.T).T
        dsb, dxb = np.atleast_2d(dsb.T).T, np.atleast_2d(dxb.T).T
        dda, tha, vma = dsa[:ng], dxa[:nb], dxa[nb:]
        ddb, thb, vmb = dsb[:ng], dxb[:nb], dxb[nb:]
        V, eth, dVa, dIa, W, dWa, dIga, r, dra = self._first(delta, th, vm, dda, tha, vma)
        _, _, dVb, dIb, _, dWb, dIgb, _, drb = self._first(delta, th, vm, ddb, thb, vmb)
        I = self.Y @ V
        gb = self.gb
        Vg = V[gb]
        Ig = I[gb] + self.cl * W
        # second derivatives of the primitive quantities
        d2V = 1j * eth[:, None] * (tha * vmb + thb * vma) - V[:, None] * (tha * thb)
        d2I = self.Y @ d2V
        vg = vm[gb, None]
        ua = 1j * tha[gb] - vma[gb] / vg
        ub = 1j * thb[gb] - vmb[gb] / vg
        d2W = W[:, None] * (ua * ub + vma[gb] * vmb[gb] / vg ** 2)
        d2Ig = d2I[gb] + self.cl[:, None] * d2W
        d2r = -r[:, None] * dda * ddb
        dVga, dVgb, d2Vg = dVa[gb], dVb[gb], d2V[gb]
        d2vdq = d2r * Vg[:, None] + dra * dVgb + drb * dVga + r[:, None] * d2Vg
        d2idq = d2r * Ig[:, None] + dra * dIgb + drb * dIga + r[:, None] * d2Ig
        d2Pe = (d2Vg * np.conj(Ig)[:, None] + dVga * np.conj(dIgb) + dVgb * np.conj(dIga)
                + Vg[:, None] * np.conj(d2Ig)).real
        lb = self.lb
        d2S = (d2V[lb] * np.conj(I[lb])[:, None] + dVa[lb] * np.conj(dIb[lb]) + dVb[lb] * np.conj(dIa[lb])
               + V[lb, None] * np.conj(d2I[lb]))
        c = lambda q: q[:, None]  # noqa: E731
        zero = np.zeros_like(d2Pe)
        return np.vstack([
            zero,
            -d2Pe / c(self.M),
            -c(self.xd - self.xdp) * d2idq.real / c(self.Td0),
            c(self.xq - self.xqp) * d2idq.imag / c(self.Tq0),
            -d2vdq.real + c(self.xqp) * d2idq.imag,
            -d2vdq.imag - c(self.xdp) * d2idq.real,
            d2S.real,
            d2S.imag,
        ])


# ---------------------------------------------------------------------------
# public operations


@dataclass(frozen=True)
class LinearizedSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    s: np.ndarray
    x: np.ndarray
    eq: Equilibrium = field(repr=False)
    state_labels: tuple[str, ...] = ()
    alg_labels: tuple[str, ...] = ()

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.A, self.B], [self.C, self.D]])


@dataclass(frozen=True)
class ModalAnalysis:
    lam: np.ndarray
    xi: np.ndarray
    U: np.ndarray  # augmented right eigenvectors (u', u''), columns
    Vl: np.ndarray  # augmented left eigenvectors (v', v''), columns
    oscillatory_mask: np.ndarray
    J: np.ndarray
    lin: LinearizedSystem = field(repr=False)

    @property
    def xi_min(self) -> float:
        m = self.oscillatory_mask
        return float(np.min(self.xi[m])) if m.any() else 1.0

    @property
    def n_state(self) -> int:
        return self.J.shape[0]

    def pair_representatives(self) -> np.ndarray:
        """Indices of masked modes with positive imaginary part (one per pair)."""
        return np.flatnonzero(self.oscillatory_mask & (self.lam.imag > 0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["re", "im", "xi", "oscillatory"])
        order = np.lexsort((self.lam.imag, self.lam.real))
        for k in order:
            w.writerow([repr(float(self.lam[k].real)), repr(float(self.lam[k].imag)), repr(float(self.xi[k])),
                        int(self.oscillatory_mask[k])])
        return buf.getvalue()


def damping_ratio(lam: np.ndarray | complex) -> np.ndarray:
    lam = np.asarray(lam, dtype=complex)
    mag = np.abs(lam)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(mag > 0, -lam.real / np.where(mag > 0, mag, 1.0), 1.0)


def _labels(case: NetworkCase):
    st = [f"{k}_{g.bus}" for k in ("delta", "omega", "eqp", "edp") for g in case.generators]
    al = [f"{k}_{b.id}" for k in ("theta", "vm") for b in case.buses]
    return tuple(st), tuple(al)


def linearize(case: NetworkCase, op: OperatingPoint | np.ndarray, model: DynamicModel | None = None
              ) -> LinearizedSystem:
    """Analytic Jacobian blocks of the DAE at the equilibrium defined by ``op``."""
    model = model or DynamicModel(case)
    V = op.V if isinstance(op, OperatingPoint) else np.asarray(op, dtype=complex)
    eq = model.equilibrium(V)
    s = eq.state(model.omega_s)
    x = eq.x
    res = model.residual(s, x, eq)
    if np.max(np.abs(res)) > 1e-8:
        raise EquilibriumInconsistent(f"equilibrium residual {np.max(np.abs(res)):.2e}")
    Jf = model.jacobian(s, x)
    n = model.n_state
    st, al = _labels(case)
    return LinearizedSystem(A=Jf[:n, :n], B=Jf[:n, n:], C=Jf[n:, :n], D=Jf[n:, n:], s=s, x=x, eq=eq,
                            state_labels=st, alg_labels=al)


def reduce_and_eig(lin: LinearizedSystem, beta_min: float = BETA_MIN) -> ModalAnalysis:
    """Eigen-decomposition of ``J = A - B D^-1 C`` with left/right vectors."""
    cond = np.linalg.cond(lin.D)
    if not np.isfinite(cond):
        raise SingularD("algebraic Jacobian D is singular")
    if cond > COND_WARN:
        warnings.warn(f"algebraic Jacobian badly conditioned (cond={cond:.2e})", RuntimeWarning, stacklevel=2)
    lu = sla.lu_factor(lin.D)
    DinvC = sla.lu_solve(lu, lin.C)
    J = lin.A - lin.B @ DinvC
    try:
        lam, vl, vr = sla.eig(J, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigenFailure(str(exc)) from None
    if not np.all(np.isfinite(lam)):
        raise EigenFailure("non-finite eigenvalues")
    u2 = -sla.lu_solve(lu, lin.C @ vr)
    v2 = -sla.lu_solve(lu, lin.B.T @ vl, trans=1)
    U = np.vstack([vr, u2])
    Vl = np.vstack([vl, v2])
    xi = damping_ratio(lam)
    mask = (np.abs(lam.imag) >= beta_min) & (np.abs(lam) >= ZERO_MODE)
    return ModalAnalysis(lam=lam, xi=xi, U=U, Vl=Vl, oscillatory_mask=mask, J=J, lin=lin)


def modal_analysis(case: NetworkCase, op: OperatingPoint | np.ndarray, model: DynamicModel | None = None,
                   beta_min: float = BETA_MIN) -> ModalAnalysis:
    return reduce_and_eig(linearize(case, op, model), beta_min)


def eigenvalue_gradient(model: DynamicModel, modal: ModalAnalysis, i: int,
                        tangent: np.ndarray | None = None) -> np.ndarray:
    """d lambda_i / d x (complex, length 2 nb) along the equilibrium manifold.

    Uses the generalized-eigenvalue perturbation formula for the pencil
    ``([A B; C D], diag(I, 0))``: the normalisation is ``v'^H u'``.
    """
    lin = modal.lin
    n = model.n_state
    u = modal.U[:, i]
    v = modal.Vl[:, i]
    denom = np.vdot(v[:n], u[:n])
    if abs(denom) < 1e-14 * np.linalg.norm(u[:n]) * np.linalg.norm(v[:n]):
        raise DegenerateMode(f"mode {i}: left/right eigenvectors nearly orthogonal")
    if tangent is None:
        tangent = model.equilibrium_tangent(lin.eq.V)
    nx = 2 * model.nb
    b = (tangent, np.eye(nx))
    out = np.zeros(nx, dtype=complex)
    for part, weight in ((u.real, 1.0), (u.imag, 1j)):
        a = (part[:n, None], part[n:, None])
        d2 = model.hvp(lin.s, lin.x, a, b)
        out += weight * (np.conj(v) @ d2)
    return out / denom


def damping_sensitivity(case: NetworkCase, op: OperatingPoint | np.ndarray | None, modal: ModalAnalysis, i: int,
                        model: DynamicModel | None = None, tangent: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the damping ratio of mode ``i`` w.r.t. ``x = (theta, |V|)``."""
    model = model or DynamicModel(case)
    lam = modal.lam[i]
    gaps = np.abs(modal.lam - lam)
    gaps[i] = np.inf
    if np.min(gaps) < DEGENERATE_GAP:
        raise DegenerateMode(f"mode {i} is (nearly) repeated")
    dlam = eigenvalue_gradient(model, modal, i, tangent)
    mag = abs(lam)
    return lam.imag / mag ** 3 * (np.conj(lam) * dlam).imag


@dataclass
class ModeGradients:
    index: np.ndarray
    xi: np.ndarray
    grad: np.ndarray  # one row per mode
    skipped: list[int] = field(default_factory=list)


def masked_gradients(model: DynamicModel, modal: ModalAnalysis, margin: float | None = None) -> ModeGradients:
    """Damping gradients for one representative of each masked conjugate pair.

    With ``margin`` set, only modes with ``xi < xi_min + margin`` are kept.
    Degenerate modes are skipped and reported.
    """
    reps = modal.pair_representatives()
    if margin is not None and reps.size:
        reps = reps[modal.xi[reps] < modal.xi_min + margin]
    tangent = model.equilibrium_tangent(modal.lin.eq.V)
    rows, keep, skipped = [], [], []
    for i in reps:
        try:
            rows.append(damping_sensitivity(model.case, None, modal, int(i), model, tangent))
            keep.append(int(i))
        except DegenerateMode:
            log.info("skipping degenerate mode %d", i)
            skipped.append(int(i))
    grad = np.array(rows) if rows else np.zeros((0, 2 * model.nb))
    return ModeGradients(index=np.array(keep, dtype=int), xi=modal.xi[keep], grad=grad, skipped=skipped)


def match_modes(lam_ref: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """For each reference eigenvalue the index of the closest one in ``lam``
    (optimal one-to-one assignment)."""
    from scipy.optimize import linear_sum_assignment

    cost = np.abs(lam_ref[:, None] - lam[None, :])
    r, c = linear_sum_assignment(cost)
    out = np.empty(len(lam_ref), dtype=int)
    out[r] = c
    return out
