"""Ensemble Kalman filters: standard, multilevel and multifidelity.

The hierarchical filters are written once for ``L`` accuracy levels.  Level
``L`` is the full-order principal ensemble; levels ``0..L-1`` are
propagated by reduced models on nested spaces ``V[0] <= ... <= V[L-1]``.
Level ``s >= 1`` carries a control ensemble paired with its principal one
and living in ``V[s-1]``.  The two-level filters are the case ``L = 1``,
with level 0 playing the ancillary ensemble.

States are always stored in full coordinates, one member per row.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from sklearn.base import BaseEstimator

from .fem import observe
from .qge import get_model
from .rom import (
    ReducedModel,
    ReducedSpace,
    build_reduced_operators,
    deflate,
    inflate,
    level_tolerance_mf,
    level_tolerance_ml,
    lift_state,
    project_onto,
    project_state,
    union_spaces,
)

__all__ = [
    "EnsembleSet",
    "LevelEnsembles",
    "LevelConfig",
    "single_cov",
    "cross_cov",
    "ml_covariances",
    "mf_covariances",
    "level_covariances",
    "psd_regularize",
    "kalman_gain",
    "ml_analysis",
    "mf_analysis",
    "level_analysis",
    "recenter",
    "predict",
    "telescopic_predict",
    "enkf_analysis",
    "enkf_predict",
    "HierarchicalEnKF",
]

logger = logging.getLogger(__name__)

METHODS = ("enkf", "ml", "mf")
SURROGATES = ("adaptive", "reference", "memoryless")


# -- ensemble containers -----------------------------------------------------


@dataclass
class LevelEnsembles:
    """Paired ensembles on ``L + 1`` accuracy levels at assimilation index ``k``."""

    principal: list
    control: list  # control[0] is None
    spaces_V: list  # len L
    spaces_W: list  # len L
    k: int = 0

    def __post_init__(self):
        L = len(self.principal) - 1
        if L < 1:
            raise ValueError("need at least two levels")
        if len(self.control) != L + 1 or self.control[0] is not None:
            raise ValueError("control list must have L + 1 entries with control[0] = None")
        if len(self.spaces_V) != L or len(self.spaces_W) != L:
            raise ValueError("need one inflated and one deflated space per reduced level")
        for s in range(1, L + 1):
            if self.control[s].shape != self.principal[s].shape:
                raise ValueError(f"level {s}: control and principal sizes differ")

    @property
    def L(self):
        return len(self.principal) - 1

    def space(self, s):
        """Space holding level-``s`` principal states (``None`` for the full level)."""
        return self.spaces_V[s] if s < self.L else None

    def copy(self):
        return LevelEnsembles(
            [p.copy() for p in self.principal],
            [None] + [c.copy() for c in self.control[1:]],
            list(self.spaces_V),
            list(self.spaces_W),
            self.k,
        )


@dataclass
class EnsembleSet:
    """Principal, control and ancillary ensembles of the two-level filters."""

    principal: np.ndarray
    control: np.ndarray
    ancillary: np.ndarray
    space_V: ReducedSpace
    space_W: ReducedSpace
    k: int = 0

    def __post_init__(self):
        if self.control.shape != self.principal.shape:
            raise ValueError("control and principal ensembles must have the same size")
        if self.principal.shape[0] < 2 or self.ancillary.shape[0] < 2:
            raise ValueError("every ensemble needs at least two members")

    def to_levels(self):
        return LevelEnsembles(
            [self.ancillary, self.principal],
            [None, self.control],
            [self.space_V],
            [self.space_W],
            self.k,
        )

    @classmethod
    def from_levels(cls, lv):
        if lv.L != 1:
            raise ValueError("only a two-level ensemble converts to an EnsembleSet")
        return cls(lv.principal[1], lv.control[1], lv.principal[0], lv.spaces_V[0], lv.spaces_W[0], lv.k)


@dataclass(frozen=True)
class LevelConfig:
    """Level sizes ``M_0..M_L`` and relative tolerances for levels ``0..L-1``."""

    sizes: tuple
    eps_r: tuple
    split: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(m) for m in self.sizes))
        object.__setattr__(self, "eps_r", tuple(float(e) for e in self.eps_r))
        if len(self.sizes) != len(self.eps_r) + 1 or len(self.eps_r) < 1:
            raise ValueError("need L + 1 sizes and L relative tolerances, L >= 1")
        if any(m < 2 for m in self.sizes):
            raise ValueError(f"level sizes must be at least 2, got {self.sizes}")
        if any(e < 0 for e in self.eps_r) or list(self.eps_r) != sorted(self.eps_r):
            raise ValueError(f"relative tolerances must be non-negative and ascending: {self.eps_r}")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")

    @property
    def L(self):
        return len(self.eps_r)

    @classmethod
    def two_level(cls, n_principal, n_ancillary, eps_r, split=0.5):
        return cls((n_ancillary, n_principal), (eps_r,), split)


# -- covariance estimators ---------------------------------------------------


def _obs(L, X):
    return np.asarray((L @ X.T).T)


def _centered(X):
    X = np.asarray(X, dtype=float)
    return X - X.mean(axis=0)


def _check_members(*ensembles):
    n = ensembles[0].shape[0]
    for E in ensembles:
        if E.shape[0] != n:
            raise ValueError(f"ensemble sizes differ: {E.shape[0]} vs {n}")
    if n < 2:
        raise ValueError(f"ensemble needs at least 2 members, got {n}")
    return n


def cross_cov(ens_a, ens_b, L, which="Q"):
    """Paired cross-covariance ``Q^{a,b}`` (states of a vs data of b) or ``P^{a,b}``."""
    if which not in ("Q", "P"):
        raise ValueError(f"which must be 'Q' or 'P', got {which!r}")
    n = _check_members(ens_a, ens_b)
    Yb = _centered(_obs(L, ens_b))
    left = _centered(ens_a) if which == "Q" else _centered(_obs(L, ens_a))
    return left.T @ Yb / (n - 1)


def single_cov(ensemble, L, which="Q"):
    return cross_cov(ensemble, ensemble, L, which)


def _level_terms(lv, obs, kind):
    """Yield ``(weight, a, b)`` so that the estimator is ``sum weight * cov(a, b)``."""
    L = lv.L
    if kind == "ml":
        for s in range(L, 0, -1):
            yield 1.0, lv.principal[s], lv.principal[s]
            yield -1.0, lv.control[s], lv.control[s]
        yield 1.0, lv.principal[0], lv.principal[0]
    elif kind == "mf":
        for s in range(L, 0, -1):
            w = 4.0 ** -(L - s)
            P, C = lv.principal[s], lv.control[s]
            yield w, P, P
            yield 0.25 * w, C, C
            yield -0.5 * w, P, C
            yield -0.5 * w, C, P
        yield 4.0**-L, lv.principal[0], lv.principal[0]
    else:
        raise ValueError(f"kind must be 'ml' or 'mf', got {kind!r}")


def level_covariances(lv, obs, kind):
    """Signed combination of level covariances, returned as ``(Q, P)``."""
    Q = P = 0.0
    for w, a, b in _level_terms(lv, obs, kind):
        n = _check_members(a, b)
        Yb = _centered(_obs(obs, b))
        Q = Q + w * (_centered(a).T @ Yb / (n - 1))
        P = P + w * (_centered(_obs(obs, a)).T @ Yb / (n - 1))
    return Q, P


def ml_covariances(es, obs):
    """``Q^{P,P} - Q^{C,C} + Q^{A,A}`` and the matching ``P`` combination."""
    return level_covariances(es.to_levels(), obs, "ml")


def mf_covariances(es, obs):
    """Control-variate covariances with weights ``1, 1/4, 1/4, -1/2, -1/2``."""
    return level_covariances(es.to_levels(), obs, "mf")


def psd_regularize(Q_tilde, P_tilde):
    """Project ``P_tilde`` onto the PSD cone and restrict ``Q_tilde`` to its range.

    Eigenvectors of the symmetrized ``P_tilde`` with negative eigenvalues
    are removed from both operators.
    """
    P_sym = 0.5 * (P_tilde + P_tilde.T)
    lam, U = np.linalg.eigh(P_sym)
    keep = lam >= 0
    if keep.all():
        return Q_tilde, P_tilde
    Uk = U[:, keep]
    P = (Uk * lam[keep]) @ Uk.T
    Q = (Q_tilde @ Uk) @ Uk.T
    return Q, P


def _solve_sym(P, noise_var, rhs):
    S = P + noise_var * np.eye(P.shape[0])
    S = 0.5 * (S + S.T)
    return sla.solve(S, rhs, assume_a="sym")


def kalman_gain(Q, P, noise_var):
    """Explicit gain ``Q (P + noise_var I)^{-1}``."""
    if not noise_var > 0:
        raise ValueError("measurement noise variance must be positive")
    return _solve_sym(P, noise_var, Q.T).T


# -- analysis ----------------------------------------------------------------


def _level_label(s, L):
    if s == L:
        return "obs-principal"
    if s == 0:
        return "obs-ancillary"
    return f"obs-level-{s}"


def _project(space, X):
    return X if space is None else project_onto(space, X)


def recenter(lv):
    """Shift every ensemble to the control-variate mean, projected on its space."""
    L = lv.L
    mu = lv.principal[0].mean(axis=0)
    for s in range(1, L + 1):
        mu = lv.principal[s].mean(axis=0) + 0.5 * (mu - lv.control[s].mean(axis=0))
    out = lv.copy()
    for s in range(L + 1):
        P = out.principal[s]
        out.principal[s] = P - P.mean(axis=0) + _project(lv.space(s), mu[None])[0]
        if s >= 1:
            C = out.control[s]
            out.control[s] = C - C.mean(axis=0) + _project(lv.space(s - 1), mu[None])[0]
    return out, mu


def level_analysis(lv, data, sigma, noise, obs, kind, psd=None):
    """Kalman update of all levels with the multilevel or multifidelity gain.

    Parameters
    ----------
    lv : LevelEnsembles
        Forecast ensembles.
    data : ndarray
        Measurement vector.
    sigma : float
        Measurement noise standard deviation, ``Sigma = sigma^2 I``.
    noise : PerturbationSource
        Source of perturbed-data draws; controls reuse their principal draws.
    obs : matrix
        Observation operator.
    kind : {'ml', 'mf'}
    psd : bool, optional
        Apply the PSD-cone projection.  Defaults to True for 'ml' and False
        for 'mf'.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    data = np.asarray(data, dtype=float)
    L = lv.L
    Q, P = level_covariances(lv, obs, kind)
    if psd if psd is not None else kind == "ml":
        Q, P = psd_regularize(Q, P)
    noise_var = sigma**2 * (1.0 if kind == "ml" else 0.5)

    blocks, innov = [], []
    for s in range(L + 1):
        n_s = lv.principal[s].shape[0]
        D = data + np.sqrt(noise_var) * noise.draws(_level_label(s, L), lv.k, n_s, data.size)
        blocks.append(("P", s, n_s))
        innov.append(D - _obs(obs, lv.principal[s]))
        if s >= 1:
            blocks.append(("C", s, n_s))
            innov.append(D - _obs(obs, lv.control[s]))
    Z = _solve_sym(P, noise_var, np.vstack(innov).T)
    incr = (Q @ Z).T

    out = lv.copy()
    row = 0
    for which, s, n_s in blocks:
        d = incr[row : row + n_s]
        row += n_s
        if which == "P":
            out.principal[s] = lv.principal[s] + _project(lv.space(s), d)
        else:
            out.control[s] = lv.control[s] + _project(lv.space(s - 1), d)
    if kind == "mf":
        out, _ = recenter(out)
    return out


def ml_analysis(es, data, sigma, noise, obs):
    return EnsembleSet.from_levels(level_analysis(es.to_levels(), data, sigma, noise, obs, "ml"))


def mf_analysis(es, data, sigma, noise, obs, psd=False):
    lv = level_analysis(es.to_levels(), data, sigma, noise, obs, "mf", psd=psd)
    return EnsembleSet.from_levels(lv)


def enkf_analysis(ensemble, data, sigma, noise, obs, k=0):
    """Standard perturbed-observation EnKF update."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    X = np.asarray(ensemble, dtype=float)
    Q = single_cov(X, obs, "Q")
    P = single_cov(X, obs, "P")
    D = data + sigma * noise.draws("obs-principal", k, X.shape[0], np.size(data))
    Z = _solve_sym(P, sigma**2, (D - _obs(obs, X)).T)
    return X + (Q @ Z).T


def enkf_predict(ensemble, model, T_window, t0=0.0):
    return model.flow(ensemble, T_window, t0).last


# -- prediction --------------------------------------------------------------


def _tolerances(lv, config, kind, ops):
    fn = level_tolerance_ml if kind == "ml" else level_tolerance_mf
    return [fn(lv.principal, lv.control, e, ops) for e in config.eps_r]


def _reduced_forecast(space, model_params, red_cache, X, T_window):
    """Forecast ``X`` projected on ``space``; returns full-coordinate end states and reduced snapshots."""
    if space.dim == 0:
        logger.warning("empty reduced space: surrogate forecast set to zero")
        return np.zeros_like(X), np.zeros((0, 0))
    red = red_cache.get(id(space))
    if red is None:
        red = red_cache[id(space)] = ReducedModel(
            build_reduced_operators(space.ops, space, model_params), model_params
        )
    traj = red.flow(project_state(space, X), T_window)
    n_s = traj.states.shape[0] - 1
    snaps = traj.states[1:].reshape(n_s * X.shape[0], space.dim)
    return lift_state(space, traj.last), snaps


def telescopic_predict(
    lv, model, config, T_window, *, kind="ml", surrogate="adaptive", t0=0.0
):
    """Forecast every level over one window and retrain the reduced spaces.

    Returns the forecast ensembles and a dict with the tolerances, the
    dimension trace of every level and the reduced dimension of the top
    reduced level.
    """
    if lv.L != config.L:
        raise ValueError(f"ensembles have {lv.L} levels, config has {config.L}")
    ops = model.ops
    L = lv.L
    full = ReducedSpace.full_space(ops)
    t_start = time.perf_counter()

    hf = model.flow(lv.principal[L], T_window, t0)
    n_s = len(hf) - 1
    hf_snaps = hf.states[1:].reshape(-1, ops.n_dof)

    if surrogate == "reference":
        eps = [0.0] * L
        V = [full] * L
    else:
        eps = _tolerances(lv, config, kind, ops)
        V = []
        for s in range(L):
            Vs = inflate(lv.spaces_W[s], hf_snaps, config.split * eps[s])
            V.append(union_spaces(V[-1], Vs) if s else Vs)

    # forecast levels top-down so a full-space level can reuse the trajectory above
    new_P = [None] * (L + 1)
    new_C = [None] * (L + 1)
    lf = [None] * L
    new_P[L] = hf.last
    above_traj = hf.states
    red_cache = {}
    for s in range(L - 1, -1, -1):
        space = V[s]
        P_s = lv.principal[s]
        C_up = lv.principal[s + 1]
        n_c = C_up.shape[0]
        if space.full:
            traj_P = model.flow(P_s, T_window, t0).states
            new_C[s + 1] = above_traj[-1].copy()
            new_P[s] = traj_P[-1]
            lf[s] = np.concatenate(
                [above_traj[1:].reshape(-1, ops.n_dof), traj_P[1:].reshape(-1, ops.n_dof)]
            )
            above_traj = traj_P
        else:
            ends, snaps = _reduced_forecast(space, model.params, red_cache, np.vstack([C_up, P_s]), T_window)
            new_C[s + 1], new_P[s] = ends[:n_c], ends[n_c:]
            if snaps.size:
                snaps = snaps.reshape(n_s, n_c + P_s.shape[0], space.dim)
                lf[s] = np.concatenate(
                    [snaps[:, :n_c].reshape(-1, space.dim), snaps[:, n_c:].reshape(-1, space.dim)]
                )
            else:
                lf[s] = np.zeros((1, 0))
            above_traj = None  # nesting keeps every lower level reduced

    if surrogate == "reference":
        W = [full] * L
    elif surrogate == "memoryless":
        W = [ReducedSpace.empty(ops)] * L
    else:
        W = []
        for s in range(L):
            Ws = deflate(V[s], lf[s], (1.0 - config.split) * eps[s])
            W.append(union_spaces(W[-1], Ws) if s else Ws)

    out = LevelEnsembles(new_P, new_C, V, W, lv.k + 1)
    info = {
        "eps": eps,
        "dims": [(lv.spaces_W[s].dim, V[s].dim, W[s].dim) for s in range(L)],
        "rom_dim": V[L - 1].dim,
        "seconds": time.perf_counter() - t_start,
    }
    return out, info


def predict(es, model, eps_r, kind="ml", T_window=1.0, *, surrogate="adaptive", split=0.5, t0=0.0):
    """Two-level prediction step; see :func:`telescopic_predict`."""
    config = LevelConfig.two_level(es.principal.shape[0], es.ancillary.shape[0], eps_r, split)
    lv, info = telescopic_predict(
        es.to_levels(), model, config, T_window, kind=kind, surrogate=surrogate, t0=t0
    )
    return EnsembleSet.from_levels(lv), info


# -- estimator wrapper -------------------------------------------------------


class HierarchicalEnKF(BaseEstimator):
    """Sequential filter with a scikit-learn style parameter interface.

    Parameters
    ----------
    method : {'enkf', 'ml', 'mf'}
        Analysis scheme.
    surrogate : {'adaptive', 'reference', 'memoryless'}
        How low-fidelity ensembles are propagated: adaptive reduced spaces
        with memory, the full-order model, or adaptive spaces rebuilt from
        scratch every window.
    eps_r : float or sequence of float
        Relative surrogate tolerance, one per reduced level.
    sigma : float
        Measurement noise standard deviation.
    split : float
        Share of the tolerance spent on inflation; the rest goes to
        deflation.
    w0 : {'empty', 'full'} or ReducedSpace
        Initial deflated space.
    psd_mf : bool
        Apply PSD regularization in the multifidelity analysis too.

    Attributes
    ----------
    state_ : LevelEnsembles or ndarray
        Current ensembles (an array of members for 'enkf').
    history_ : list of dict
        Per-prediction diagnostics.
    """

    def __init__(
        self,
        method="ml",
        surrogate="adaptive",
        eps_r=1e-3,
        sigma=1e-4,
        split=0.5,
        w0="empty",
        psd_mf=False,
    ):
        self.method = method
        self.surrogate = surrogate
        self.eps_r = eps_r
        self.sigma = sigma
        self.split = split
        self.w0 = w0
        self.psd_mf = psd_mf

    def _validate(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"surrogate must be one of {SURROGATES}, got {self.surrogate!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def fit(self, levels, ops, params, noise):
        """Set the initial ensembles.

        ``levels`` lists member arrays from the coarsest level up; the last
        entry is the full-order principal ensemble.  A single array gives a
        standard EnKF.  Controls start equal to their principals.
        """
        self._validate()
        self.ops_ = ops
        self.model_ = get_model(ops, params)
        self.noise_ = noise
        self.history_ = []
        if self.method == "enkf":
            X = levels[-1] if isinstance(levels, (list, tuple)) else levels
            self.state_ = np.array(X, dtype=float)
            self.k_ = 0
            return self
        levels = [np.array(X, dtype=float) for X in levels]
        L = len(levels) - 1
        eps = np.broadcast_to(np.asarray(self.eps_r, dtype=float), (L,))
        self.config_ = LevelConfig(tuple(X.shape[0] for X in levels), tuple(eps), self.split)
        full = ReducedSpace.full_space(ops)
        if self.surrogate == "reference" or self.w0 == "full":
            W0 = full
        elif self.w0 == "empty":
            W0 = ReducedSpace.empty(ops)
        elif isinstance(self.w0, ReducedSpace):
            W0 = self.w0
        else:
            raise ValueError(f"w0 must be 'empty', 'full' or a ReducedSpace, got {self.w0!r}")
        controls = [None] + [X.copy() for X in levels[1:]]
        self.state_ = LevelEnsembles(levels, controls, [full] * L, [W0] * L, 0)
        return self

    @property
    def k(self):
        return self.k_ if self.method == "enkf" else self.state_.k

    @property
    def mean_(self):
        X = self.state_ if self.method == "enkf" else self.state_.principal[-1]
        return X.mean(axis=0)

    def analyze(self, data):
        obs = self.ops_.obs
        if self.method == "enkf":
            self.state_ = enkf_analysis(self.state_, data, self.sigma, self.noise_, obs, self.k_)
        else:
            psd = True if self.method == "ml" else self.psd_mf
            self.state_ = level_analysis(
                self.state_, data, self.sigma, self.noise_, obs, self.method, psd=psd
            )
        return self

    def predict(self, T_window, t0=0.0):
        """Forecast to the next assimilation time and return the principal mean."""
        if self.method == "enkf":
            t = time.perf_counter()
            self.state_ = enkf_predict(self.state_, self.model_, T_window, t0)
            self.k_ += 1
            self.history_.append({"rom_dim": 0, "seconds": time.perf_counter() - t})
        else:
            self.state_, info = telescopic_predict(
                self.state_,
                self.model_,
                self.config_,
                T_window,
                kind=self.method,
                surrogate=self.surrogate,
                t0=t0,
            )
            self.history_.append(info)
        return self.mean_

    def observe_mean(self):
        return observe(self.ops_, self.mean_)
