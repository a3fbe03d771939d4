"""Quick invariant checks runnable without the test suite (``arbenkf selftest``)."""

import numpy as np

from .fem import apply_trilinear, assemble_operators, build_mesh, observe
from .filters import EnsembleSet, ml_covariances, psd_regularize, single_cov
from .qge import QgeParams, get_model
from .rom import POD, ReducedSpace, adaptive_tolerance_ml, build_reduced_operators, inflate


def _ops(nx=21):
    return assemble_operators(build_mesh(nx))


def check_mesh_counts():
    m = build_mesh(21)
    assert m.n_nodes == 441 and m.triangles.shape[0] == 800 and m.n_dof == 361


def check_operator_symmetry():
    ops = _ops()
    for A in (ops.M, ops.K):
        assert abs(A - A.T).max() <= 1e-14 * abs(A).max()
    assert abs(ops.M_full.sum() - 1.0) < 1e-12


def check_observation_selection():
    ops = _ops()
    x = ops.mesh.node_coords[ops.mesh.interior_nodes, 0]
    d = observe(ops, x).reshape(19, 19)
    assert np.array_equal(d, np.repeat(np.arange(1, 20)[:, None] / 20, 19, axis=1))


def check_trilinear_bilinearity():
    ops = _ops()
    rng = np.random.default_rng(0)
    w1, w2, psi = rng.standard_normal((3, ops.n_dof))
    lhs = apply_trilinear(ops, 2 * w1 - 3 * w2, psi)
    rhs = 2 * apply_trilinear(ops, w1, psi) - 3 * apply_trilinear(ops, w2, psi)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


def check_midpoint_step():
    ops = _ops()
    model = get_model(ops, QgeParams())
    w0, _ = model.stationary()
    w1 = model.step(w0)
    assert np.linalg.norm(model.residual(w1, w0)) <= model.params.newton_tol


def check_pod_optimality():
    ops = _ops()
    rng = np.random.default_rng(1)
    X = rng.standard_normal((8, ops.n_dof))
    est = POD(tol=0.3 * np.mean(np.einsum("ij,ij->i", X, (ops.M @ X.T).T)), inner=ops.M).fit(X)
    R = X - est.inverse_transform(est.transform(X))
    err = np.mean(np.einsum("ij,ij->i", R, (ops.M @ R.T).T))
    assert abs(err - est.discarded_energy_) <= 1e-10 * max(err, 1e-300)


def check_inflation_monotone():
    ops = _ops()
    rng = np.random.default_rng(2)
    W = inflate(ReducedSpace.empty(ops), rng.standard_normal((3, ops.n_dof)), 0.0)
    V = inflate(W, rng.standard_normal((4, ops.n_dof)), 0.0)
    PW, PV = W.projector(), V.projector()
    assert V.dim >= W.dim and np.allclose(PV @ PW, PW, atol=1e-10)


def check_reduced_operator_count():
    ops = _ops()
    rng = np.random.default_rng(3)
    space = inflate(ReducedSpace.empty(ops), rng.standard_normal((3, ops.n_dof)), 0.0)
    red = build_reduced_operators(ops, space, QgeParams())
    assert red.n_trilinear == space.dim**2


def check_ml_cancellation():
    ops = _ops()
    rng = np.random.default_rng(4)
    P, A = rng.standard_normal((5, ops.n_dof)), rng.standard_normal((6, ops.n_dof))
    full = ReducedSpace.full_space(ops)
    es = EnsembleSet(P, P.copy(), A, full, full)
    Q, Pm = ml_covariances(es, ops.obs)
    assert np.allclose(Q, single_cov(A, ops.obs, "Q"), rtol=0, atol=1e-12)
    assert np.allclose(Pm, single_cov(A, ops.obs, "P"), rtol=0, atol=1e-12)
    t = adaptive_tolerance_ml(es, 1e-3, ops)
    D = A - A.mean(axis=0)
    ref = 2e-3 / 5 * np.einsum("ij,ij->", D, (ops.M @ D.T).T)
    assert abs(t - ref) <= 1e-12 * ref


def check_psd_projection():
    rng = np.random.default_rng(5)
    B = rng.standard_normal((6, 6))
    Pt = B + B.T
    Q, P = psd_regularize(rng.standard_normal((4, 6)), Pt)
    assert np.linalg.eigvalsh(P).min() >= -1e-12


CHECKS = [v for k, v in sorted(globals().items()) if k.startswith("check_")]


def run_selftest():
    """Run every check; returns ``(n_passed, failures)``."""
    failures = []
    for check in CHECKS:
        try:
            check()
        except Exception as exc:  # report, keep going
            failures.append((check.__name__, f"{type(exc).__name__}: {exc}"))
    return len(CHECKS) - len(failures), failures
