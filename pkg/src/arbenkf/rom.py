"""POD reduced spaces, Galerkin reduced QGE model and online retraining.

Reduced spaces are stored as rows: ``basis`` has shape ``(n, n_dof)`` with
``basis @ M @ basis.T = I``.  ``ReducedSpace.full_space`` is a sentinel for
the whole finite element space; projecting onto it is the identity and
forecasting in it delegates to the full-order model.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .fem import apply_trilinear, solve_stiffness
from .qge import NonConvergence, Trajectory, n_substeps

__all__ = [
    "POD",
    "PodResult",
    "ReducedSpace",
    "ReducedOperators",
    "DegenerateSpace",
    "pod",
    "gram_schmidt",
    "project_state",
    "project_onto",
    "union_spaces",
    "lift_state",
    "inflate",
    "deflate",
    "build_reduced_operators",
    "reduced_flow",
    "adaptive_tolerance_ml",
    "adaptive_tolerance_mf",
    "tolerance_floor",
    "level_tolerance_ml",
    "level_tolerance_mf",
]

logger = logging.getLogger(__name__)

# eigenvalues below this fraction of the largest are treated as zero
ZERO_RTOL = 1e-14


class DegenerateSpace(ValueError):
    """A reduced model was requested on a zero-dimensional space."""


def gram_schmidt(vectors, weight=None, against=None, drop_tol=1e-10):
    """Orthonormalize rows with respect to ``weight`` (identity if None).

    Each row is orthogonalized twice against ``against`` and the rows kept
    so far.  Rows whose norm collapses below ``drop_tol`` times their input
    norm are dropped as linearly dependent.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    n_dof = vectors.shape[1]
    kept = [] if against is None else list(np.atleast_2d(against))
    n_fixed = len(kept)

    def wdot(a, b):
        return b @ (a if weight is None else weight @ a)

    for v in vectors:
        start = np.sqrt(max(wdot(v, v), 0.0))
        if start == 0.0:
            continue
        for _ in range(2):
            for q in kept:
                v = v - wdot(v, q) * q
        norm = np.sqrt(max(wdot(v, v), 0.0))
        if norm <= drop_tol * start:
            continue
        kept.append(v / norm)
    new = kept[n_fixed:]
    return np.array(new).reshape(len(new), n_dof)


@dataclass
class PodResult:
    basis: np.ndarray  # (n, n_dof)
    eigenvalues: np.ndarray  # all Gramian eigenvalues, descending
    discarded_energy: float

    @property
    def dim(self):
        return self.basis.shape[0]


class POD(TransformerMixin, BaseEstimator):
    """Proper orthogonal decomposition through the snapshot Gramian.

    Parameters
    ----------
    tol : float
        Absolute bound on the mean squared projection error of the training
        snapshots; the smallest basis meeting it is kept.
    inner : sparse or dense matrix, optional
        Gram matrix of the inner product.  Euclidean if None.

    Attributes
    ----------
    components_ : ndarray of shape (n_components, n_features)
        Orthonormal modes, one per row.
    eigenvalues_ : ndarray
        Eigenvalues of the mean-normalized Gramian, descending.
    discarded_energy_ : float
        Sum of the eigenvalues of the dropped modes.
    """

    def __init__(self, tol=0.0, inner=None):
        self.tol = tol
        self.inner = inner

    def _weighted(self, X):
        return X if self.inner is None else (self.inner @ X.T).T

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=1)
        if self.tol < 0:
            raise ValueError(f"tol must be non-negative, got {self.tol}")
        s = X.shape[0]
        G = X @ self._weighted(X).T / s
        G = 0.5 * (G + G.T)
        gamma, vec = np.linalg.eigh(G)
        gamma, vec = gamma[::-1], vec[:, ::-1]
        top = gamma[0] if gamma.size else 0.0
        gamma = np.where(gamma > ZERO_RTOL * max(top, 0.0), gamma, 0.0)
        # tails[n] = sum of eigenvalues beyond the first n
        tails = np.concatenate([np.cumsum(gamma[::-1])[::-1], [0.0]])
        n = int(np.flatnonzero(tails <= self.tol)[0])
        modes = (vec[:, :n] / np.sqrt(s * gamma[:n])).T @ X
        self.components_ = gram_schmidt(modes, self.inner) if n else np.zeros((0, X.shape[1]))
        self.eigenvalues_ = gamma
        self.discarded_energy_ = float(tails[n])
        self.n_components_ = self.components_.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X)
        return self._weighted(X) @ self.components_.T

    def inverse_transform(self, X):
        check_is_fitted(self, "components_")
        return np.asarray(X, dtype=float) @ self.components_


def pod(snapshots, tolerance_abs, inner=None):
    """Functional form of :class:`POD`."""
    est = POD(tol=tolerance_abs, inner=inner).fit(np.atleast_2d(snapshots))
    return PodResult(est.components_, est.eigenvalues_, est.discarded_energy_)


@dataclass(frozen=True, eq=False)
class ReducedSpace:
    """V-orthonormal vorticity basis with paired streamfunction basis."""

    ops: object
    basis: np.ndarray = None
    psi_basis: np.ndarray = None
    full: bool = False
    weighted: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.full and self.weighted is None:
            object.__setattr__(self, "weighted", (self.ops.M @ self.basis.T).T)

    @classmethod
    def full_space(cls, ops):
        return cls(ops, full=True)

    @classmethod
    def empty(cls, ops):
        z = np.zeros((0, ops.n_dof))
        return cls(ops, z, z.copy())

    @classmethod
    def from_basis(cls, ops, basis):
        basis = np.ascontiguousarray(basis).reshape(-1, ops.n_dof)
        psi = solve_stiffness(ops, (ops.M @ basis.T).T) if basis.shape[0] else basis.copy()
        return cls(ops, basis, np.atleast_2d(psi).reshape(basis.shape))

    @property
    def n_dof(self):
        return self.ops.n_dof

    @property
    def dim(self):
        return self.n_dof if self.full else self.basis.shape[0]

    def projector(self):
        """Dense V-orthogonal projector matrix, for tests."""
        if self.full:
            return np.eye(self.n_dof)
        return self.basis.T @ self.weighted


def project_state(space, x):
    """Reduced coordinates ``Phi^T M x``; identity on the full-space sentinel."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != space.n_dof:
        raise ValueError(f"state length {x.shape[-1]} does not match {space.n_dof}")
    if space.full:
        return x
    return x @ space.weighted.T


def lift_state(space, c):
    c = np.asarray(c, dtype=float)
    if c.shape[-1] != space.dim:
        raise ValueError(f"coordinate length {c.shape[-1]} does not match dim {space.dim}")
    if space.full:
        return c
    return c @ space.basis


def project_onto(space, x):
    """V-orthogonal projection of states onto ``space`` in full coordinates."""
    if space.full:
        return np.asarray(x, dtype=float)
    return lift_state(space, project_state(space, x))


def union_spaces(inner, outer):
    """Smallest space containing both; the basis of ``inner`` comes first."""
    if inner.full or outer.full:
        return ReducedSpace.full_space(inner.ops)
    if outer.dim == 0:
        return inner
    if inner.dim == 0:
        return outer
    ops = inner.ops
    extra = gram_schmidt(outer.basis, ops.M, against=inner.basis)
    if extra.shape[0] == 0:
        return inner
    extra_psi = solve_stiffness(ops, (ops.M @ extra.T).T).reshape(extra.shape)
    return ReducedSpace(
        ops, np.vstack([inner.basis, extra]), np.vstack([inner.psi_basis, extra_psi])
    )


def inflate(W_prev, hf_snapshots, eps_half):
    """Enlarge ``W_prev`` with POD modes of the snapshot residuals."""
    if W_prev.full:
        return W_prev
    ops = W_prev.ops
    S = np.atleast_2d(np.asarray(hf_snapshots, dtype=float))
    residual = S - project_onto(W_prev, S) if W_prev.dim else S
    new = pod(residual, eps_half, ops.M).basis
    if new.shape[0] == 0:
        return W_prev
    new = gram_schmidt(new, ops.M, against=W_prev.basis if W_prev.dim else None)
    if new.shape[0] == 0:
        return W_prev
    new_psi = solve_stiffness(ops, (ops.M @ new.T).T).reshape(new.shape)
    basis = np.vstack([W_prev.basis, new])
    psi = np.vstack([W_prev.psi_basis, new_psi])
    return ReducedSpace(ops, basis, psi)


def deflate(V_curr, lf_snapshots_reduced, eps_half):
    """Compress ``V_curr`` to the modes used by low-fidelity trajectories.

    The POD runs on reduced coordinates with the Euclidean product, which
    equals the V product because the basis is V-orthonormal.  On the
    full-space sentinel a zero tolerance keeps the whole space.
    """
    ops = V_curr.ops
    C = np.atleast_2d(np.asarray(lf_snapshots_reduced, dtype=float))
    if V_curr.full:
        if eps_half == 0:
            return V_curr
        return ReducedSpace.from_basis(ops, pod(C, eps_half, ops.M).basis)
    if V_curr.dim == 0:
        return V_curr
    U = pod(C, eps_half).basis
    return ReducedSpace(ops, U @ V_curr.basis, U @ V_curr.psi_basis)


@dataclass(frozen=True, eq=False)
class ReducedOperators:
    space: ReducedSpace
    K_r: np.ndarray
    D_r: np.ndarray
    T_r: np.ndarray  # T_r[i, j, l] = phi_i . J(phi_j, z_l)
    f_r: np.ndarray
    L_r: np.ndarray
    n_trilinear: int

    @property
    def dim(self):
        return self.f_r.size


def build_reduced_operators(ops, space, params=None):
    """Galerkin projection of the QGE operators onto ``space``."""
    if space.full:
        raise ValueError("the full-space sentinel uses the full-order model")
    n = space.dim
    if n == 0:
        raise DegenerateSpace("cannot build a reduced model on an empty space")
    Phi, Z = space.basis, space.psi_basis
    K_r = Phi @ (ops.K @ Phi.T)
    D_r = Phi @ (ops.Dx @ Z.T)
    T_r = np.empty((n, n, n))
    count = 0
    for j in range(n):
        omega = np.broadcast_to(Phi[j], (n, ops.n_dof))
        vals = apply_trilinear(ops, omega, Z)  # row l: J(phi_j, z_l, .)
        count += n
        T_r[:, j, :] = Phi @ vals.T
    f_r = Phi @ ops.F_vec
    L_r = (ops.obs @ Phi.T) if ops.n_obs else np.zeros((0, n))
    return ReducedOperators(space, K_r, D_r, T_r, f_r, np.asarray(L_r), count)


class ReducedModel:
    """Implicit-midpoint integrator for the reduced QGE system."""

    def __init__(self, red_ops, params):
        self.red = red_ops
        self.params = params
        n = red_ops.dim
        nu = params.nu
        self._linear = nu * red_ops.K_r - red_ops.D_r
        self._chord = {}
        self._eye = np.eye(n)

    def quadratic(self, C):
        """``q_i = sum_jl T_ijl c_j c_l`` for a stack of coordinates."""
        Y = np.tensordot(C, self.red.T_r, axes=([1], [1]))  # (B, i, l)
        return np.einsum("bil,bl->bi", Y, C)

    def residual(self, c_new, c_old, dt):
        mid = 0.5 * (c_new + c_old)
        return (
            (c_new - c_old) / dt
            + mid @ self._linear.T
            + self.params.Ro * self.quadratic(mid)
            - self.red.f_r
        )

    def _chord_lu(self, dt):
        lu = self._chord.get(dt)
        if lu is None:
            lu = self._chord[dt] = sla.lu_factor(self._eye / dt + 0.5 * self._linear)
        return lu

    def step(self, C_old, dt=None):
        dt = self.params.dt if dt is None else dt
        tol, cap = self.params.newton_tol, self.params.newton_max_iter
        lu = self._chord_lu(dt)
        C_new = C_old.copy()
        active = np.arange(C_old.shape[0])
        for _ in range(cap + 1):
            R = self.residual(C_new[active], C_old[active], dt)
            keep = ~(np.linalg.norm(R, axis=1) <= tol)
            active, R = active[keep], R[keep]
            if active.size == 0:
                return C_new
            C_new[active] -= sla.lu_solve(lu, R.T).T
        for m in active:
            C_new[m] = self._newton_single(C_old[m], C_new[m], dt)
        return C_new

    def _newton_single(self, c_old, c_new, dt):
        T = self.red.T_r
        Ro = self.params.Ro
        for _ in range(self.params.newton_max_iter):
            R = self.residual(c_new[None], c_old[None], dt)[0]
            if np.linalg.norm(R) <= self.params.newton_tol:
                return c_new
            mid = 0.5 * (c_new + c_old)
            dq = np.einsum("ijl,j->il", T, mid) + np.einsum("ijl,l->ij", T, mid)
            J = self._eye / dt + 0.5 * (self._linear + Ro * dq)
            c_new = c_new - np.linalg.solve(J, R)
        R = self.residual(c_new[None], c_old[None], dt)[0]
        res = np.linalg.norm(R)
        if res <= self.params.newton_tol:
            return c_new
        raise NonConvergence(res, self.params.newton_max_iter)

    def flow(self, C, T_window, t0=0.0):
        dt = self.params.dt
        n_s = n_substeps(T_window, dt)
        C = np.asarray(C, dtype=float)
        single = C.ndim == 1
        C2 = np.atleast_2d(C)
        states = np.empty((n_s + 1,) + C2.shape)
        states[0] = C2
        for s in range(n_s):
            try:
                states[s + 1] = self.step(states[s])
            except NonConvergence as exc:
                raise NonConvergence(exc.residual, exc.iterations, substep=s + 1) from exc
        if single:
            states = states[:, 0]
        return Trajectory(t0 + dt * np.arange(n_s + 1), states)


def reduced_flow(red_ops, params, c_in, T_window, t0=0.0):
    return ReducedModel(red_ops, params).flow(c_in, T_window, t0)


# -- adaptive tolerances -----------------------------------------------------


def _centered_sq_norms(ops, X):
    D = X - X.mean(axis=0)
    return np.einsum("ij,ij->i", D, (ops.M @ D.T).T)


def _centered_inner(ops, X, Y):
    DX = X - X.mean(axis=0)
    DY = Y - Y.mean(axis=0)
    return np.einsum("ij,ij->i", DX, (ops.M @ DY.T).T)


def _check_size(name, X, minimum=2):
    if X.shape[0] < minimum:
        raise ValueError(f"{name} ensemble needs at least {minimum} members, got {X.shape[0]}")


def tolerance_floor(ops, principal):
    spread = float(np.mean(_centered_sq_norms(ops, principal)))
    return 1e-14 * spread if spread > 0 else 1e-300


def _floored(value, eps_r, ops, principal):
    if eps_r == 0:
        return 0.0
    return max(float(value), tolerance_floor(ops, principal))


def adaptive_tolerance_ml(es, eps_r, ops):
    """Multilevel estimate of ``2 eps_r tr(C)`` from post-analysis ensembles."""
    P, C, A = es.principal, es.control, es.ancillary
    _check_size("principal", P)
    _check_size("ancillary", A)
    n_p, n_a = P.shape[0], A.shape[0]
    value = 2.0 * eps_r / (n_p - 1) * np.sum(
        _centered_sq_norms(ops, P) - _centered_sq_norms(ops, C)
    ) + 2.0 * eps_r / (n_a - 1) * np.sum(_centered_sq_norms(ops, A))
    return _floored(value, eps_r, ops, P)


def adaptive_tolerance_mf(es, eps_r, ops):
    """Control-variate estimate of ``2 eps_r tr(C)`` from post-analysis ensembles."""
    P, C, A = es.principal, es.control, es.ancillary
    _check_size("principal", P)
    _check_size("ancillary", A)
    n_p, n_a = P.shape[0], A.shape[0]
    value = 0.5 * eps_r / (n_a - 1) * np.sum(_centered_sq_norms(ops, A)) + 2.0 * eps_r / (
        n_p - 1
    ) * np.sum(
        _centered_sq_norms(ops, P)
        - _centered_inner(ops, P, C)
        + 0.25 * _centered_sq_norms(ops, C)
    )
    return _floored(value, eps_r, ops, P)


def level_tolerance_ml(level_principal, level_control, eps_r, ops):
    """Telescoping trace estimate for one level tolerance ``eps_r``.

    ``level_principal[0]`` is the coarsest ensemble; ``level_control[s]``
    pairs with ``level_principal[s]`` for ``s >= 1``.  Sums use the unbiased
    ``1 / (M_s - 1)`` normalization.
    """
    P0 = level_principal[0]
    _check_size("level-0", P0)
    value = 2.0 * eps_r / (P0.shape[0] - 1) * np.sum(_centered_sq_norms(ops, P0))
    for P, C in zip(level_principal[1:], level_control[1:]):
        _check_size("level", P)
        value += 2.0 * eps_r / (P.shape[0] - 1) * np.sum(
            _centered_sq_norms(ops, P) - _centered_sq_norms(ops, C)
        )
    return _floored(value, eps_r, ops, level_principal[-1])


def level_tolerance_mf(level_principal, level_control, eps_r, ops):
    """Recursive control-variate trace estimate with weights ``4^-(L-s)``."""
    L = len(level_principal) - 1
    P0 = level_principal[0]
    _check_size("level-0", P0)
    value = 2.0 * eps_r / (4.0**L * (P0.shape[0] - 1)) * np.sum(_centered_sq_norms(ops, P0))
    for s in range(1, L + 1):
        P, C = level_principal[s], level_control[s]
        _check_size("level", P)
        value += 2.0 * eps_r / (4.0 ** (L - s) * (P.shape[0] - 1)) * np.sum(
            _centered_sq_norms(ops, P)
            + 0.25 * _centered_sq_norms(ops, C)
            - _centered_inner(ops, P, C)
        )
    return _floored(value, eps_r, ops, level_principal[-1])
