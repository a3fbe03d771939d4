"""Full-order quasi-geostrophic model in vorticity/streamfunction form.

The streamfunction is eliminated through ``K psi = M omega`` so the time
stepper only carries vorticity.  Time integration is the implicit midpoint
rule; each step is solved with a chord iteration whose matrix is the
linear part of the midpoint Jacobian (factorized once per ``dt``), with a
fall back to full Newton for members that stall.
"""

import logging
import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import apply_trilinear, solve_stiffness, trilinear_jacobians

__all__ = [
    "QgeParams",
    "Trajectory",
    "NonConvergence",
    "QgeModel",
    "get_model",
    "solve_stationary",
    "step_implicit_midpoint",
    "flow",
]

logger = logging.getLogger(__name__)


class NonConvergence(RuntimeError):
    """Raised when a nonlinear solve hits its iteration cap."""

    def __init__(self, residual, iterations, substep=None):
        self.residual = float(residual)
        self.iterations = int(iterations)
        self.substep = substep
        where = "" if substep is None else f" at sub-step {substep}"
        super().__init__(
            f"nonlinear solve did not converge{where}: residual {self.residual:.3e} "
            f"after {self.iterations} iterations"
        )


@dataclass(frozen=True)
class QgeParams:
    Ro: float = 1e-3
    Re: float = 100.0
    dt: float = 0.1
    newton_tol: float = 1e-10
    newton_max_iter: int = 25
    nonlinear: bool = True  # False drops the advection term (linear test problem)

    def __post_init__(self):
        if not (self.Ro > 0 and self.Re > 0 and self.dt > 0 and self.newton_tol > 0):
            raise ValueError(f"Ro, Re, dt and newton_tol must be positive: {self}")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be at least 1")

    @property
    def nu(self):
        return self.Ro / self.Re


@dataclass
class Trajectory:
    """States at ``times``; ``states[s]`` has shape ``(n_dof,)`` or ``(n_members, n_dof)``."""

    times: np.ndarray
    states: np.ndarray

    def __len__(self):
        return len(self.times)

    @property
    def last(self):
        return self.states[-1]


def n_substeps(T_window, dt):
    n = int(round(T_window / dt))
    if n < 1 or abs(n * dt - T_window) > 1e-9 * max(1.0, T_window):
        raise ValueError(f"window {T_window} is not a positive multiple of dt={dt}")
    return n


class QgeModel:
    """Full-order model bound to one set of operators and parameters.

    Factorizations are built lazily and reused; instances are read-only
    after construction and may be shared.
    """

    def __init__(self, ops, params):
        self.ops = ops
        self.params = params
        self._chord = {}

    # -- helpers ---------------------------------------------------------
    def streamfunction(self, omega):
        """Solve ``K psi = M omega`` for one state or a stack of states."""
        omega = np.asarray(omega, dtype=float)
        return solve_stiffness(self.ops, (self.ops.M @ omega.T).T)

    def _chord_lu(self, dt):
        lu = self._chord.get(dt)
        if lu is None:
            ops, nu = self.ops, self.params.nu
            A = sp.bmat(
                [[ops.M / dt + 0.5 * nu * ops.K, -ops.Dx], [-0.5 * ops.M, ops.K]]
            ).tocsc()
            lu = self._chord[dt] = spla.splu(A)
        return lu

    def residual(self, omega_new, omega_old, dt=None, forcing_scale=1.0):
        """Midpoint residual; columns are members when inputs are stacks."""
        dt = self.params.dt if dt is None else dt
        ops, p = self.ops, self.params
        mid = 0.5 * (omega_new + omega_old)
        psi = self.streamfunction(mid)
        R = ops.M @ ((omega_new - omega_old).T / dt) - ops.Dx @ psi.T + p.nu * (ops.K @ mid.T)
        if p.nonlinear:
            R = R + p.Ro * apply_trilinear(ops, mid, psi).T
        F = forcing_scale * ops.F_vec
        R = R - (F[:, None] if R.ndim == 2 else F)
        return R.T

    # -- stationary problem ---------------------------------------------
    def stationary(self, forcing_scale=1.0):
        ops, nu = self.ops, self.params.nu
        n = ops.n_dof
        A = sp.bmat([[nu * ops.K, -ops.Dx], [-ops.M, ops.K]]).tocsc()
        rhs = np.concatenate([forcing_scale * ops.F_vec, np.zeros(n)])
        try:
            sol = spla.splu(A).solve(rhs)
        except RuntimeError as exc:  # singular factor
            raise RuntimeError(f"stationary system is singular: {exc}") from exc
        omega, psi = sol[:n], sol[n:]
        res = np.linalg.norm(A @ sol - rhs)
        scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
        if not np.all(np.isfinite(sol)) or res > 1e-10 * scale:
            raise RuntimeError(f"stationary solve inaccurate: residual {res:.3e}")
        return omega, psi

    # -- time stepping ---------------------------------------------------
    def step(self, omega, dt=None, forcing_scale=1.0):
        """One implicit-midpoint step of a state or a stack of states."""
        dt = self.params.dt if dt is None else dt
        omega = np.asarray(omega, dtype=float)
        single = omega.ndim == 1
        W = np.atleast_2d(omega)
        if not np.all(np.isfinite(W)):
            raise ValueError("non-finite input state")
        out = self._chord_step(W, dt, forcing_scale)
        return out[0] if single else out

    def _chord_step(self, W_old, dt, forcing_scale):
        n = self.ops.n_dof
        tol, cap = self.params.newton_tol, self.params.newton_max_iter
        lu = self._chord_lu(dt)
        W_new = W_old.copy()
        active = np.arange(W_old.shape[0])
        for _ in range(cap + 1):
            R = np.atleast_2d(self.residual(W_new[active], W_old[active], dt, forcing_scale))
            norms = np.linalg.norm(R, axis=1)
            keep = ~(norms <= tol)
            active, R = active[keep], R[keep]
            if active.size == 0:
                return W_new
            rhs = np.zeros((2 * n, active.size))
            rhs[:n] = -R.T
            W_new[active] += lu.solve(rhs)[:n].T
        # members that stalled get a full Newton solve
        for m in active:
            W_new[m] = self._newton_single(W_old[m], W_new[m], dt, forcing_scale)
        return W_new

    def _newton_single(self, w_old, w_new, dt, forcing_scale):
        ops, p = self.ops, self.params
        n = ops.n_dof
        res = np.inf
        for it in range(p.newton_max_iter):
            R = self.residual(w_new, w_old, dt, forcing_scale)
            res = np.linalg.norm(R)
            if res <= p.newton_tol:
                return w_new
            mid = 0.5 * (w_new + w_old)
            psi = self.streamfunction(mid)
            d_om, d_psi = trilinear_jacobians(ops, mid, psi)
            ro = p.Ro if p.nonlinear else 0.0
            J = sp.bmat(
                [
                    [ops.M / dt + 0.5 * p.nu * ops.K + 0.5 * ro * d_om, -ops.Dx + ro * d_psi],
                    [-0.5 * ops.M, ops.K],
                ]
            ).tocsc()
            rhs = np.concatenate([-R, np.zeros(n)])
            w_new = w_new + spla.spsolve(J, rhs)[:n]
        R = self.residual(w_new, w_old, dt, forcing_scale)
        res = np.linalg.norm(R)
        if res <= p.newton_tol:
            return w_new
        raise NonConvergence(res, p.newton_max_iter)

    def flow(self, omega, T_window, t0=0.0):
        """Advance over ``T_window`` and return every sub-step state."""
        dt = self.params.dt
        n_s = n_substeps(T_window, dt)
        omega = np.asarray(omega, dtype=float)
        states = np.empty((n_s + 1,) + omega.shape)
        states[0] = omega
        for s in range(n_s):
            try:
                states[s + 1] = self.step(states[s])
            except NonConvergence as exc:
                raise NonConvergence(exc.residual, exc.iterations, substep=s + 1) from exc
        times = t0 + dt * np.arange(n_s + 1)
        return Trajectory(times, states)


_models = weakref.WeakKeyDictionary()


def get_model(ops, params):
    """Cached ``QgeModel`` for an operator set and parameter tuple."""
    per_ops = _models.setdefault(ops, {})
    model = per_ops.get(params)
    if model is None:
        model = per_ops[params] = QgeModel(ops, params)
    return model


def solve_stationary(ops, params, forcing_scale=1.0):
    """Initial condition: ``-Dx psi + (Ro/Re) K omega = F`` with ``K psi = M omega``."""
    return get_model(ops, params).stationary(forcing_scale)


def step_implicit_midpoint(ops, params, omega_in, dt=None, forcing_scale=1.0):
    return get_model(ops, params).step(omega_in, dt=dt, forcing_scale=forcing_scale)


def flow(ops, params, omega_in, T_window, t0=0.0):
    return get_model(ops, params).flow(omega_in, T_window, t0=t0)
