import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arbenkf.fem import (
    apply_trilinear,
    assemble_operators,
    build_mesh,
    forcing,
    observe,
    v_inner,
    v_norm,
)

from . import oracles


@pytest.mark.parametrize("nx, nodes, tris, interior", [(21, 441, 800, 361), (41, 1681, 3200, 1521)])
def test_mesh_counts(nx, nodes, tris, interior):
    m = build_mesh(nx, nx)
    assert m.n_nodes == nodes
    assert m.triangles.shape == (tris, 3)
    assert m.n_dof == interior
    assert m.h == pytest.approx(1.0 / (nx - 1))


def test_mesh_boundary_is_unit_square_edges():
    m = build_mesh(21)
    x, y = m.node_coords.T
    on_edge = (x == 0) | (x == 1) | (y == 0) | (y == 1)
    assert np.array_equal(~on_edge, m.interior_mask)


@pytest.mark.parametrize("nx, ny", [(22, 22), (21, 41), (30, 30), (11, 11)])
def test_mesh_rejects_bad_sizes(nx, ny):
    with pytest.raises(ValueError):
        build_mesh(nx, ny)


def test_mesh_is_deterministic():
    a, b = build_mesh(21), build_mesh(21)
    assert np.array_equal(a.triangles, b.triangles)
    assert np.array_equal(a.node_coords, b.node_coords)


def test_mass_and_stiffness_symmetric_definite(ops21):
    for A in (ops21.M, ops21.K):
        assert abs(A - A.T).max() <= 1e-14 * abs(A).max()
        assert np.linalg.eigvalsh(A.toarray()).min() > 0


def test_mass_partition_of_unity(ops21):
    assert ops21.M_full.sum() == pytest.approx(1.0, abs=1e-12)


def test_constant_in_kernel_of_full_stiffness(ops21):
    assert np.max(np.abs(ops21.K_full @ np.ones(ops21.mesh.n_nodes))) < 1e-12


def test_dx_of_linear_field_matches_quadrature(ops_tiny):
    mesh = ops_tiny.mesh
    x = mesh.node_coords[:, 0]
    got = ops_tiny.Dx_full @ x
    assert np.allclose(got, oracles.dx_load(mesh, x), atol=1e-12, rtol=0)
    # and it is just the integral of each hat function
    assert np.allclose(got[mesh.interior_nodes], mesh.h**2, atol=1e-12, rtol=0)


def test_forcing_load_matches_fine_quadrature(ops21):
    mesh = ops21.mesh
    # 7-point Gauss rule on each triangle as an independent reference
    pts = np.array([[1 / 3, 1 / 3], [0.0597158717, 0.4701420641], [0.4701420641, 0.0597158717],
                    [0.4701420641, 0.4701420641], [0.7974269853, 0.1012865073],
                    [0.1012865073, 0.7974269853], [0.1012865073, 0.1012865073]])
    wts = np.array([0.225, *[0.1323941527] * 3, *[0.1259391805] * 3])
    ref = np.zeros(mesh.n_nodes)
    for tri in mesh.triangles:
        xy = mesh.node_coords[tri]
        _, area = oracles.element_gradients(xy)
        lam = np.column_stack([1 - pts.sum(1), pts])
        q = lam @ xy
        f = forcing(q[:, 0], q[:, 1])
        ref[tri] += area * (wts * f) @ lam
    err = np.abs(ops21.F_vec - ref[mesh.interior_nodes]).max()
    assert err < 1e-5 * np.abs(ref).max()


def test_trilinear_matches_elementwise_oracle(ops_tiny, rng):
    for _ in range(5):
        w, p = rng.standard_normal((2, ops_tiny.n_dof))
        got = apply_trilinear(ops_tiny, w, p)
        assert np.allclose(got, oracles.trilinear(ops_tiny.mesh, w, p), atol=1e-12, rtol=0)


def test_trilinear_zero_cases(ops21, rng):
    w = rng.standard_normal(ops21.n_dof)
    assert np.all(apply_trilinear(ops21, w, np.zeros_like(w)) == 0)
    # constant vorticity over the full mesh has zero gradient on every element
    ones = np.ones(ops21.mesh.n_nodes)
    gx = ops21.grad_x.shape[0]
    assert gx == ops21.mesh.triangles.shape[0]
    full_gx = ops21.grad_x @ ones[ops21.mesh.interior_nodes]
    interior_only = np.all(np.isin(ops21.mesh.triangles, ops21.mesh.interior_nodes), axis=1)
    assert np.all(full_gx[interior_only] == 0)


def test_trilinear_on_interior_constant_patch(ops_tiny):
    """A field constant on a patch gives zero contributions from those elements."""
    mesh = ops_tiny.mesh
    w = np.ones(ops_tiny.n_dof)
    p = np.ones(ops_tiny.n_dof)
    got = apply_trilinear(ops_tiny, w, p)
    assert np.allclose(got, oracles.trilinear(mesh, w, p), atol=1e-12)


def test_trilinear_stack_matches_single(ops21, rng):
    W, P = rng.standard_normal((2, 4, ops21.n_dof))
    stacked = apply_trilinear(ops21, W, P)
    for i in range(4):
        assert np.allclose(stacked[i], apply_trilinear(ops21, W[i], P[i]), atol=1e-13, rtol=0)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**31))
def test_trilinear_bilinearity(ops_tiny, a, b, seed):
    g = np.random.default_rng(seed)
    w1, w2, p = g.standard_normal((3, ops_tiny.n_dof))
    lhs = apply_trilinear(ops_tiny, a * w1 + b * w2, p)
    rhs = a * apply_trilinear(ops_tiny, w1, p) + b * apply_trilinear(ops_tiny, w2, p)
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=1e-12)


def test_trilinear_rejects_mismatch(ops21):
    with pytest.raises(ValueError):
        apply_trilinear(ops21, np.zeros(ops21.n_dof), np.zeros(ops21.n_dof + 1))


def test_observe_linear_field(ops41):
    mesh = ops41.mesh
    x = mesh.node_coords[mesh.interior_nodes, 0]
    d = observe(ops41, x)
    assert d.shape == (361,)
    i = np.repeat(np.arange(1, 20), 19)
    assert np.array_equal(d, i / 20)


def test_observe_is_selection(ops41):
    O = ops41.obs.toarray()
    assert set(np.unique(O)) == {0.0, 1.0}
    assert np.all(O.sum(axis=1) == 1)
    assert np.all(observe(ops41, np.zeros(ops41.n_dof)) == 0)


def test_unaligned_mesh_has_no_observations(ops_tiny):
    assert ops_tiny.n_obs == 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_v_inner_symmetric_positive(ops_tiny, seed):
    g = np.random.default_rng(seed)
    a, b = g.standard_normal((2, ops_tiny.n_dof))
    assert abs(v_inner(ops_tiny, a, b) - v_inner(ops_tiny, b, a)) <= 1e-14 * max(1.0, abs(v_inner(ops_tiny, a, b)))
    assert v_inner(ops_tiny, a, a) > 0


def test_v_inner_matches_quadrature(ops_tiny, rng):
    mesh = ops_tiny.mesh
    a, b = rng.standard_normal((2, ops_tiny.n_dof))
    ref = oracles.mass_inner_full(mesh, oracles.interior_to_full(mesh, a), oracles.interior_to_full(mesh, b))
    assert v_inner(ops_tiny, a, b) == pytest.approx(ref, rel=1e-12)


def test_unit_constant_norm(ops21):
    ones = np.ones(ops21.mesh.n_nodes)
    assert float(ones @ ops21.M_full @ ones) == pytest.approx(1.0, abs=1e-12)
    assert oracles.area_integral(ops21.mesh, ones) == pytest.approx(1.0, abs=1e-12)


def test_v_norm_zero_only_at_zero(ops21):
    assert v_norm(ops21, np.zeros(ops21.n_dof)) == 0.0
    with pytest.raises(ValueError):
        v_inner(ops21, np.zeros(3), np.zeros(3))
