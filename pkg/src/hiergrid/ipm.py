"""Primal-dual interior-point method for small dense nonlinear programs.

Solves ``min f(x)  s.t.  g(x) = 0,  h(x) <= 0`` with a logarithmic barrier on
slacks ``z`` of the inequality rows, Newton steps on the reduced KKT system
and a fraction-to-boundary step rule (the scheme used by MATPOWER's MIPS).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla

Array = np.ndarray


@dataclass(frozen=True)
class IpmConfig:
    kkt_tol: float = 1e-6  # gradient and complementarity tolerance
    feas_tol: float = 1e-8  # absolute constraint violation at exit
    max_iter: int = 150
    sigma: float = 0.1  # centering parameter
    step_frac: float = 0.99995  # fraction-to-boundary
    z0: float = 1.0


@dataclass
class IpmResult:
    x: Array
    f: float
    lam: Array
    mu: Array
    z: Array
    iterations: int
    converged: bool
    feas: float
    gradcond: float
    compcond: float
    message: str = ""


@dataclass
class NlpFunctions:
    """Callbacks.  ``fg(x) -> (f, df)``;  ``cons(x) -> (h, Jh, g, Jg)`` with
    Jacobians as (rows, n) arrays;  ``hess(x, lam, mu) -> Lxx`` including the
    objective Hessian."""

    fg: Callable[[Array], tuple[float, Array]]
    cons: Callable[[Array], tuple[Array, Array, Array, Array]]
    hess: Callable[[Array, Array, Array], Array]


def _kkt_solve(M: Array, Jg: Array, r1: Array, r2: Array) -> tuple[Array, Array]:
    n, neq = M.shape[0], Jg.shape[0]
    K = np.block([[M, Jg.T], [Jg, np.zeros((neq, neq))]])
    rhs = np.concatenate([r1, r2])
    try:
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            lu = sla.lu_factor(K, check_finite=True)
            sol = sla.lu_solve(lu, rhs)
        ok = np.all(np.isfinite(sol)) and np.linalg.norm(K @ sol - rhs) <= 1e-8 * (1 + np.linalg.norm(rhs))
    except (ValueError, np.linalg.LinAlgError, sla.LinAlgWarning):
        ok = False
    if not ok:
        # redundant equality rows make K singular; the minimum-norm step is still valid
        sol = np.linalg.lstsq(K, rhs, rcond=1e-12)[0]
    return sol[:n], sol[n:]


def solve(fun: NlpFunctions, x0: Array, cfg: IpmConfig = IpmConfig()) -> IpmResult:
    x = np.array(x0, dtype=float)
    f, df = fun.fg(x)
    h, Jh, g, Jg = fun.cons(x)
    niq, neq = len(h), len(g)
    gamma = 1.0
    z = np.full(niq, cfg.z0)
    k = h < -cfg.z0
    z[k] = -h[k]
    mu = np.full(niq, cfg.z0)
    k = gamma / z > cfg.z0
    mu[k] = gamma / z[k]
    lam = np.zeros(neq)
    converged = False
    it = 0
    feas = gradcond = compcond = np.inf
    msg = "max iterations reached"

    def conds():
        Lx = df + Jg.T @ lam + Jh.T @ mu
        maxh = max(float(np.max(h)), 0.0) if niq else 0.0
        ginf = float(np.max(np.abs(g))) if neq else 0.0
        nx = max(float(np.max(np.abs(x))), 1.0)
        feas_abs = max(ginf, maxh)
        gc = float(np.max(np.abs(Lx))) / (1 + max(np.max(np.abs(lam)) if neq else 0.0,
                                               np.max(np.abs(mu)) if niq else 0.0))
        cc = float(z @ mu) / (1 + nx) if niq else 0.0
        return Lx, feas_abs, gc, cc

    Lx, feas, gradcond, compcond = conds()
    while it < cfg.max_iter:
        if feas <= cfg.feas_tol and gradcond <= cfg.kkt_tol and compcond <= cfg.kkt_tol:
            converged = True
            msg = "converged"
            break
        it += 1
        Lxx = fun.hess(x, lam, mu)
        zinv = 1.0 / z
        dh_zinv = Jh.T * zinv
        M = Lxx + (dh_zinv * mu) @ Jh
        N = Lx + dh_zinv @ (mu * h + gamma)
        dx, dlam = _kkt_solve(M, Jg, -N, -g)
        dz = -h - z - Jh @ dx
        dmu = -mu + zinv * (gamma - mu * dz)
        ap = 1.0
        neg = dz < 0
        if neg.any():
            ap = min(cfg.step_frac * float(np.min(-z[neg] / dz[neg])), 1.0)
        ad = 1.0
        neg = dmu < 0
        if neg.any():
            ad = min(cfg.step_frac * float(np.min(-mu[neg] / dmu[neg])), 1.0)
        x = x + ap * dx
        z = z + ap * dz
        lam = lam + ad * dlam
        mu = mu + ad * dmu
        if niq:
            gamma = cfg.sigma * float(z @ mu) / niq
        f, df = fun.fg(x)
        h, Jh, g, Jg = fun.cons(x)
        if not (np.isfinite(f) and np.all(np.isfinite(x))):
            msg = "numerically failed"
            break
        Lx, feas, gradcond, compcond = conds()
    return IpmResult(x=x, f=float(f), lam=lam, mu=mu, z=z, iterations=it, converged=converged, feas=feas,
                     gradcond=gradcond, compcond=compcond, message=msg)
