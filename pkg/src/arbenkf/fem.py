"""P1 finite elements on a structured triangulation of the unit square.

All operators act on interior degrees of freedom; homogeneous Dirichlet
conditions are imposed by eliminating boundary nodes.  The ``*_full``
variants keep every node and are used for partition-of-unity style checks.
"""

import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "MEASUREMENT_SPACING",
    "Mesh",
    "FemOperators",
    "build_mesh",
    "assemble_operators",
    "apply_trilinear",
    "observe",
    "v_inner",
    "v_norm",
    "forcing",
    "solve_stiffness",
]

# Measurements sit at (i/20, j/20) for i, j in 1..19.
MEASUREMENT_SPACING = 20


def forcing(x, y):
    """Wind-stress curl forcing ``sin(pi (y - 1)) / 2``."""
    return 0.5 * np.sin(np.pi * (y - 1.0))


@dataclass(frozen=True)
class Mesh:
    """Structured uniform triangulation of ``[0, 1]^2``.

    Nodes are numbered row-major, ``node = j * nx + i`` for the node at
    ``(i h, j h)``.  Every cell is split along its ``(i, j) -> (i+1, j+1)``
    diagonal.
    """

    nx: int
    ny: int
    node_coords: np.ndarray
    triangles: np.ndarray
    interior_mask: np.ndarray
    h: float
    aligned: bool = True

    @property
    def n_nodes(self):
        return self.nx * self.ny

    @property
    def interior_nodes(self):
        return np.flatnonzero(self.interior_mask)

    @property
    def n_dof(self):
        return int(self.interior_mask.sum())

    def node_index(self, i, j):
        return j * self.nx + i


def build_mesh(nx, ny=None, *, aligned=True):
    """Build the uniform mesh with ``nx * ny`` nodes.

    With ``aligned=True`` (the default) ``nx - 1`` must be a multiple of 20 so
    that the 19 x 19 measurement lattice falls on mesh nodes.  Unaligned
    meshes are allowed for small unit tests but cannot be observed.
    """
    if ny is None:
        ny = nx
    nx, ny = int(nx), int(ny)
    if nx != ny:
        raise ValueError(f"only square meshes are supported, got nx={nx}, ny={ny}")
    if nx < 3:
        raise ValueError("need at least one interior node per axis")
    if aligned and (nx < MEASUREMENT_SPACING + 1 or (nx - 1) % MEASUREMENT_SPACING):
        raise ValueError(
            f"nx - 1 must be a positive multiple of {MEASUREMENT_SPACING}, got nx={nx}"
        )

    h = 1.0 / (nx - 1)
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    # divide rather than multiply by h so node (i, j) sits exactly at (i/(nx-1), j/(ny-1))
    coords = np.column_stack([ii.ravel() / (nx - 1), jj.ravel() / (ny - 1)])

    ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    ci, cj = ci.ravel(), cj.ravel()
    n00 = cj * nx + ci
    n10 = n00 + 1
    n01 = n00 + nx
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.empty((2 * lower.shape[0], 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    ib, jb = ii.ravel(), jj.ravel()
    interior = (ib > 0) & (ib < nx - 1) & (jb > 0) & (jb < ny - 1)
    return Mesh(nx, ny, coords, triangles, interior, h, aligned)


@dataclass(frozen=True, eq=False)
class FemOperators:
    """Assembled P1 operators on one mesh.

    ``grad_x``/``grad_y`` map nodal values to the (constant) element
    gradients, ``average`` maps nodal values to element means.  The
    trilinear form is evaluated from these three maps.
    """

    mesh: Mesh
    M: sp.csr_matrix
    K: sp.csr_matrix
    Dx: sp.csr_matrix
    F_vec: np.ndarray
    obs: sp.csr_matrix
    grad_x: sp.csr_matrix
    grad_y: sp.csr_matrix
    average: sp.csr_matrix
    area: np.ndarray
    M_full: sp.csr_matrix
    K_full: sp.csr_matrix
    Dx_full: sp.csr_matrix
    grad_x_T: sp.csr_matrix = field(repr=False, default=None)
    grad_y_T: sp.csr_matrix = field(repr=False, default=None)

    @property
    def n_dof(self):
        return self.M.shape[0]

    @property
    def n_obs(self):
        return self.obs.shape[0]


def _element_geometry(mesh):
    xy = mesh.node_coords[mesh.triangles]  # (T, 3, 2)
    x, y = xy[..., 0], xy[..., 1]
    # gradients of the barycentric coordinates
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    area = 0.5 * np.abs(det)
    gx = b / det[:, None]
    gy = c / det[:, None]
    return area, gx, gy


def _element_map(values, triangles, n_nodes):
    n_tri = triangles.shape[0]
    rows = np.repeat(np.arange(n_tri), 3)
    return sp.csr_matrix((values.ravel(), (rows, triangles.ravel())), shape=(n_tri, n_nodes))


def _observation_matrix(mesh):
    if not mesh.aligned:
        return sp.csr_matrix((0, mesh.n_dof))
    stride = (mesh.nx - 1) // MEASUREMENT_SPACING
    interior_index = -np.ones(mesh.n_nodes, dtype=np.int64)
    interior_index[mesh.interior_nodes] = np.arange(mesh.n_dof)
    cols = []
    for i in range(1, MEASUREMENT_SPACING):
        for j in range(1, MEASUREMENT_SPACING):
            cols.append(interior_index[mesh.node_index(i * stride, j * stride)])
    cols = np.asarray(cols)
    n_obs = cols.size
    return sp.csr_matrix((np.ones(n_obs), (np.arange(n_obs), cols)), shape=(n_obs, mesh.n_dof))


def assemble_operators(mesh, params=None):
    """Assemble mass, stiffness, x-derivative, forcing and observation operators.

    ``params`` is accepted for interface symmetry with the solver; the
    operators themselves do not depend on Ro or Re.
    """
    area, gx, gy = _element_geometry(mesh)
    tri = mesh.triangles
    n = mesh.n_nodes

    grad_x = _element_map(gx, tri, n)
    grad_y = _element_map(gy, tri, n)
    average = _element_map(np.full(tri.shape, 1.0 / 3.0), tri, n)
    A = sp.diags(area)

    K_full = (grad_x.T @ A @ grad_x + grad_y.T @ A @ grad_y).tocsr()
    # int (du/dx) v = sum_T (du/dx)|_T * area_T / 3 for every vertex v of T
    Dx_full = (average.T @ A @ grad_x).tocsr()

    local_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    vals = (area[:, None, None] * local_mass[None]).ravel()
    M_full = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    # edge-midpoint rule, exact for quadratics
    xy = mesh.node_coords[tri]
    mid = 0.5 * (xy[:, [0, 1, 2]] + xy[:, [1, 2, 0]])  # midpoints of edges 01, 12, 20
    fm = forcing(mid[..., 0], mid[..., 1])
    # phi_a at the edge midpoints: 1/2 on the two edges touching a
    weights = np.array([[0.5, 0.0, 0.5], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]])
    load = (area[:, None] / 3.0) * (fm @ weights.T)
    F_full = np.bincount(tri.ravel(), weights=load.ravel(), minlength=n)

    idx = mesh.interior_nodes
    M = M_full[idx][:, idx].tocsr()
    K = K_full[idx][:, idx].tocsr()
    Dx = Dx_full[idx][:, idx].tocsr()
    gxi = grad_x[:, idx].tocsr()
    gyi = grad_y[:, idx].tocsr()
    return FemOperators(
        mesh=mesh,
        M=M,
        K=K,
        Dx=Dx,
        F_vec=F_full[idx],
        obs=_observation_matrix(mesh),
        grad_x=gxi,
        grad_y=gyi,
        average=average[:, idx].tocsr(),
        area=area,
        M_full=M_full,
        K_full=K_full,
        Dx_full=Dx_full,
        grad_x_T=gxi.T.tocsr(),
        grad_y_T=gyi.T.tocsr(),
    )


def _check_states(ops, *arrays):
    n = ops.n_dof
    for a in arrays:
        if a.shape[-1] != n:
            raise ValueError(f"state length {a.shape[-1]} does not match {n} interior dofs")


def apply_trilinear(ops, omega, psi):
    """Evaluate ``J(omega, psi, eta_i)`` for every interior test function.

    ``J(w, p, e) = int p (w_y e_x - w_x e_y)``; on P1 elements the gradients
    are element constants and ``p`` is linear, so the element integral is
    ``area * mean(p) * (w_y e_x - w_x e_y)`` exactly.

    ``omega`` and ``psi`` may be single states or stacks of shape
    ``(n_members, n_dof)``.
    """
    omega = np.asarray(omega, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if omega.shape != psi.shape:
        raise ValueError(f"shape mismatch {omega.shape} vs {psi.shape}")
    _check_states(ops, omega, psi)
    wt, pt = omega.T, psi.T
    weight = ops.area[:, None] * (ops.average @ pt) if pt.ndim == 2 else ops.area * (ops.average @ pt)
    wx = ops.grad_x @ wt
    wy = ops.grad_y @ wt
    out = ops.grad_x_T @ (weight * wy) - ops.grad_y_T @ (weight * wx)
    return out.T


def trilinear_jacobians(ops, omega, psi):
    """Sparse derivatives of ``apply_trilinear`` w.r.t. ``omega`` and ``psi``."""
    weight = ops.area * (ops.average @ psi)
    W = sp.diags(weight)
    d_omega = ops.grad_x_T @ W @ ops.grad_y - ops.grad_y_T @ W @ ops.grad_x
    wx = sp.diags(ops.area * (ops.grad_x @ omega))
    wy = sp.diags(ops.area * (ops.grad_y @ omega))
    d_psi = (ops.grad_x_T @ wy - ops.grad_y_T @ wx) @ ops.average
    return d_omega.tocsr(), d_psi.tocsr()


def observe(ops, omega):
    """Point values at the 361 measurement nodes (row-major in ``(i, j)``)."""
    omega = np.asarray(omega, dtype=float)
    _check_states(ops, omega)
    return (ops.obs @ omega.T).T


def v_inner(ops, a, b):
    """L2 inner product ``a^T M b`` of interior coefficient vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    _check_states(ops, a)
    return float(a @ (ops.M @ b))


def v_norm(ops, a):
    return np.sqrt(max(v_inner(ops, a, a), 0.0))


_stiffness_lu = weakref.WeakKeyDictionary()


def solve_stiffness(ops, rhs):
    """Solve ``K x = rhs`` with a factorization cached per operator set.

    ``rhs`` is a vector or a stack of shape ``(n_members, n_dof)``.
    """
    lu = _stiffness_lu.get(ops)
    if lu is None:
        lu = _stiffness_lu[ops] = spla.splu(ops.K.tocsc())
    rhs = np.asarray(rhs, dtype=float)
    return lu.solve(rhs.T).T
