"""Initial-ensemble priors: inverse-Laplacian Gaussian and resampled attractor states."""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .rng import stream

__all__ = [
    "LaplacianEigenbasis",
    "InvariantArchive",
    "build_laplacian_eigenbasis",
    "sample_smooth_prior",
    "sample_invariant_prior",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LaplacianEigenbasis:
    """Smallest generalized eigenpairs of ``K xi = lambda M xi``, M-orthonormal."""

    eigvals: np.ndarray
    eigvecs: np.ndarray  # (n_modes, n_dof)
    discarded_variance: float = 0.0

    @property
    def n_modes(self):
        return self.eigvals.size


@dataclass(frozen=True)
class InvariantArchive:
    snapshots: np.ndarray  # (n_snapshots, n_dof)
    window: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.snapshots.ndim != 2 or self.snapshots.shape[0] == 0:
            raise ValueError("invariant archive must hold at least one snapshot")


def build_laplacian_eigenbasis(ops, n_modes):
    n = ops.n_dof
    if not 1 <= n_modes <= n:
        raise ValueError(f"n_modes must lie in [1, {n}], got {n_modes}")
    if n_modes > n // 2 or n <= 2000:
        lam, vec = sla.eigh(ops.K.toarray(), ops.M.toarray())
        tail = float(np.sum(1.0 / lam[n_modes:]))
        lam, vec = lam[:n_modes], vec[:, :n_modes]
    else:
        lam, vec = spla.eigsh(ops.K.tocsc(), k=n_modes, M=ops.M.tocsc(), sigma=0.0, which="LM")
        order = np.argsort(lam)
        lam, vec = lam[order], vec[:, order]
        # every discarded eigenvalue is >= the largest kept one
        tail = float((n - n_modes) / lam[-1])
    if np.any(lam <= 0):
        raise RuntimeError("Laplacian eigenvalues must be positive")
    # re-normalize against M to absorb solver round-off
    vec = vec / np.sqrt(np.einsum("ij,ij->j", vec, ops.M @ vec))
    if tail > 0:
        logger.info("truncated prior: %d modes, discarded variance <= %.3e", n_modes, tail)
    return LaplacianEigenbasis(lam, np.ascontiguousarray(vec.T), tail)


def sample_smooth_prior(basis, rng, count, z=None):
    """Draw ``sum_i lambda_i^{-1/2} z_i xi_i`` with standard normal ``z``.

    ``rng`` is a generator or a callable ``member -> generator``; the
    latter keeps each member on its own stream.  ``z`` overrides the draws.
    """
    if z is None:
        z = np.empty((count, basis.n_modes))
        for m in range(count):
            g = rng(m) if callable(rng) else rng
            z[m] = g.standard_normal(basis.n_modes)
    z = np.asarray(z, dtype=float).reshape(count, basis.n_modes)
    return (z / np.sqrt(basis.eigvals)) @ basis.eigvecs


def sample_invariant_prior(archive, rng, count, jitter=0.0, basis=None):
    """Resample archived states uniformly with replacement.

    With ``jitter > 0`` every draw is perturbed by ``jitter`` times a smooth
    prior sample, which requires ``basis``.
    """
    snaps = archive.snapshots
    if jitter > 0 and basis is None:
        raise ValueError("jitter needs a Laplacian eigenbasis")
    out = np.empty((count, snaps.shape[1]))
    for m in range(count):
        g = rng(m) if callable(rng) else rng
        out[m] = snaps[g.integers(snaps.shape[0])]
        if jitter > 0:
            out[m] += jitter * sample_smooth_prior(basis, g, 1)[0]
    return out


def member_streams(seed, replicate, label):
    """Callable giving the prior stream of each member."""
    return lambda m: stream(seed, replicate, label, 0, m)
