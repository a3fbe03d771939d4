import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from arbenkf.filters import (
    EnsembleSet,
    HierarchicalEnKF,
    LevelConfig,
    LevelEnsembles,
    cross_cov,
    enkf_analysis,
    kalman_gain,
    level_analysis,
    mf_analysis,
    mf_covariances,
    ml_analysis,
    ml_covariances,
    predict,
    psd_regularize,
    recenter,
    single_cov,
    telescopic_predict,
)
from arbenkf.qge import QgeParams, get_model
from arbenkf.rng import PerturbationSource
from arbenkf.rom import ReducedSpace, gram_schmidt, project_onto

from . import oracles


class ConstantNoise:
    """Perturbation source returning a fixed value, to expose the noise scale."""

    def __init__(self, value):
        self.value = value

    def draws(self, label, step, n_members, size):
        return np.full((n_members, size), self.value)


def _full_set(ops, P, C, A):
    full = ReducedSpace.full_space(ops)
    return EnsembleSet(P, C, A, full, full)


@pytest.fixture(scope="module")
def model21(ops21):
    return get_model(ops21, QgeParams())


@pytest.fixture(scope="module")
def base_state(model21):
    w0, _ = model21.stationary()
    return model21.flow(w0, 3.0).last


def _cloud(rng, center, n, scale=0.1):
    return center + scale * np.abs(center).max() * rng.standard_normal((n, center.size))


# -- covariances -------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**16))
def test_cross_covariance_matches_two_loop_sum(n, n_dof, n_obs, seed):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((n_obs, n_dof))
    X, Y = rng.standard_normal((2, n, n_dof))
    assert np.allclose(cross_cov(X, Y, L, "Q"), oracles.q_cov(L, X, Y), atol=1e-12)
    assert np.allclose(cross_cov(X, Y, L, "P"), oracles.p_cov(L, X, Y), atol=1e-12)


def test_covariances_translation_invariant(rng):
    L = rng.standard_normal((3, 6))
    P, C, A = rng.standard_normal((5, 6)), rng.standard_normal((5, 6)), rng.standard_normal((8, 6))
    b = 100 * rng.standard_normal(6)
    for fn in (ml_covariances, mf_covariances):
        Q0, P0 = fn(EnsembleSet(P, C, A, None, None), L)
        Q1, P1 = fn(EnsembleSet(P + b, C + b, A + b, None, None), L)
        assert np.allclose(Q0, Q1, atol=1e-10) and np.allclose(P0, P1, atol=1e-10)


def test_ml_covariance_cancels_identical_control(rng):
    L = rng.standard_normal((3, 6))
    P, A = rng.standard_normal((5, 6)), rng.standard_normal((8, 6))
    Q, Pm = ml_covariances(EnsembleSet(P, P.copy(), A, None, None), L)
    assert np.allclose(Q, single_cov(A, L, "Q"), atol=1e-13)
    assert np.allclose(Pm, single_cov(A, L, "P"), atol=1e-13)


def test_mf_covariance_with_identical_control(rng):
    L = rng.standard_normal((3, 6))
    P, A = rng.standard_normal((5, 6)), rng.standard_normal((8, 6))
    Q, _ = mf_covariances(EnsembleSet(P, P.copy(), A, None, None), L)
    assert np.allclose(Q, 0.25 * (single_cov(P, L) + single_cov(A, L)), atol=1e-13)


def test_covariance_rejects_bad_sizes(rng):
    L = np.eye(3)
    with pytest.raises(ValueError):
        cross_cov(rng.standard_normal((3, 3)), rng.standard_normal((4, 3)), L)
    with pytest.raises(ValueError):
        single_cov(rng.standard_normal((1, 3)), L)
    with pytest.raises(ValueError):
        cross_cov(rng.standard_normal((3, 3)), rng.standard_normal((3, 3)), L, "R")


# -- PSD regularization and gain ---------------------------------------------


def test_psd_small_example():
    Pt = np.diag([1.0, -1.0])
    Qt = np.array([[2.0, 3.0]])
    Q, P = psd_regularize(Qt, Pt)
    assert np.allclose(P, np.diag([1.0, 0.0]))
    assert np.allclose(Q, [[2.0, 0.0]])


def test_psd_input_passes_through(rng):
    B = rng.standard_normal((4, 4))
    S = B @ B.T + np.eye(4)
    Qt = rng.standard_normal((6, 4))
    Q, P = psd_regularize(Qt, S)
    assert Q is Qt and P is S


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**16))
def test_psd_output_is_psd_and_idempotent(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    Q, P = psd_regularize(rng.standard_normal((3, n)), B + B.T)
    assert np.linalg.eigvalsh(P).min() >= -1e-12
    Q2, P2 = psd_regularize(Q, P)
    assert np.allclose(P2, P, atol=1e-12) and np.allclose(Q2, Q, atol=1e-12)


def test_gain_matches_dense_formula_and_shrinks(rng):
    B = rng.standard_normal((4, 4))
    P = B @ B.T
    Q = rng.standard_normal((7, 4))
    K = kalman_gain(Q, P, 0.5)
    assert np.allclose(K, Q @ np.linalg.inv(P + 0.5 * np.eye(4)), atol=1e-12)
    norms = [np.linalg.norm(kalman_gain(Q, P, s)) for s in (0.1, 1.0, 10.0, 1e6)]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-4
    with pytest.raises(ValueError):
        kalman_gain(Q, P, 0.0)


# -- analysis ----------------------------------------------------------------


def test_scalar_enkf_matches_kalman_update():
    rng = np.random.default_rng(8)
    n, prior_var, sigma = 40_000, 2.0, 1.0
    X = 1.0 + np.sqrt(prior_var) * rng.standard_normal((n, 1))
    post = enkf_analysis(X, np.array([3.0]), sigma, PerturbationSource(1), np.eye(1))
    gain = prior_var / (prior_var + sigma**2)
    assert post.mean() == pytest.approx(1.0 + gain * 2.0, abs=0.03)
    assert post.var() == pytest.approx((1 - gain) * prior_var, rel=0.03)


def test_enkf_affine_equivariance(rng):
    L = rng.standard_normal((3, 5))
    X = rng.standard_normal((6, 5))
    d = rng.standard_normal(3)
    a, b = 2.5, rng.standard_normal(5)
    noise = PerturbationSource(4)
    base = enkf_analysis(X, d, 0.3, noise, L)
    moved = enkf_analysis(a * X + b, a * d + L @ b, a * 0.3, noise, L)
    assert np.allclose(moved, a * base + b, atol=1e-10)


def test_zero_spread_is_unchanged(ops21, base_state):
    P = np.tile(base_state, (4, 1))
    A = np.tile(base_state, (6, 1))
    es = _full_set(ops21, P, P.copy(), A)
    data = ops21.obs @ base_state + 1.0
    for analysis in (ml_analysis, mf_analysis):
        out = analysis(es, data, 1e-4, PerturbationSource(0), ops21.obs)
        assert np.allclose(out.principal, P, atol=1e-14)
        assert np.allclose(out.ancillary, A, atol=1e-14)


def test_ml_analysis_matches_explicit_gain(ops21, base_state, rng):
    P = _cloud(rng, base_state, 4)
    A = _cloud(rng, base_state, 9)
    es = _full_set(ops21, P, P.copy(), A)
    data = ops21.obs @ base_state
    # a moderate noise level keeps P + Sigma well conditioned
    out = ml_analysis(es, data, 1.0, ConstantNoise(0.0), ops21.obs)
    Q, Pm = psd_regularize(*ml_covariances(es, ops21.obs))
    K = kalman_gain(Q, Pm, 1.0)
    incr = (K @ (data - (ops21.obs @ P.T).T).T).T
    assert np.abs(out.principal - P - incr).max() <= 1e-8 * np.abs(incr).max()


def test_mf_uses_half_noise(ops21, base_state, rng):
    P = _cloud(rng, base_state, 4)
    A = _cloud(rng, base_state, 9)
    es = _full_set(ops21, P, P + 0.01 * rng.standard_normal(P.shape), A)
    data = ops21.obs @ base_state
    sigma = 1.0
    lv0 = level_analysis(es.to_levels(), data, sigma, ConstantNoise(0.0), ops21.obs, "mf")
    lv1 = level_analysis(es.to_levels(), data, sigma, ConstantNoise(1.0), ops21.obs, "mf")
    Q, Pm = mf_covariances(es, ops21.obs)
    K = kalman_gain(Q, Pm, 0.5 * sigma**2)
    shift = K @ np.full(data.size, np.sqrt(0.5) * sigma)
    # every member moves by the same shift, so the recentred mean moves by it too
    assert np.allclose(lv1.principal[1] - lv0.principal[1], shift, atol=1e-9 * np.abs(shift).max())


def test_recenter_postconditions_and_idempotence(ops21, base_state, rng):
    P = _cloud(rng, base_state, 4)
    C = _cloud(rng, base_state, 4)
    A = _cloud(rng, base_state, 9)
    lv = _full_set(ops21, P, C, A).to_levels()
    out, mu = recenter(lv)
    assert np.allclose(mu, P.mean(0) + 0.5 * (A.mean(0) - C.mean(0)))
    for X in (out.principal[0], out.principal[1], out.control[1]):
        assert np.allclose(X.mean(axis=0), mu, atol=1e-12 * np.abs(mu).max())
    # spreads are untouched
    assert np.allclose(out.principal[1] - out.principal[1].mean(0), P - P.mean(0))
    again, mu2 = recenter(out)
    assert np.allclose(mu2, mu, atol=1e-12 * np.abs(mu).max())
    assert np.allclose(again.principal[1], out.principal[1], atol=1e-12 * np.abs(mu).max())


def test_reduced_members_stay_in_their_space(ops21, base_state, rng):
    Vb = gram_schmidt(np.vstack([base_state, rng.standard_normal((5, ops21.n_dof))]), ops21.M)
    V = ReducedSpace.from_basis(ops21, Vb)
    P = _cloud(rng, base_state, 4)
    C = project_onto(V, P + 0.01 * rng.standard_normal(P.shape))
    A = project_onto(V, _cloud(rng, base_state, 9))
    es = EnsembleSet(P, C, A, V, V)
    data = ops21.obs @ base_state
    for analysis in (ml_analysis, mf_analysis):
        out = analysis(es, data, 1e-4, PerturbationSource(2), ops21.obs)
        for X in (out.control, out.ancillary):
            assert np.allclose(project_onto(V, X), X, atol=1e-10 * np.abs(X).max())


def test_controls_reuse_principal_perturbations(ops21, base_state, rng):
    """With identical principal and control the two stay identical through analysis."""
    P = _cloud(rng, base_state, 4)
    A = _cloud(rng, base_state, 9)
    es = _full_set(ops21, P, P.copy(), A)
    out = ml_analysis(es, ops21.obs @ base_state, 1e-4, PerturbationSource(5), ops21.obs)
    assert np.array_equal(out.principal, out.control)


# -- prediction --------------------------------------------------------------


def test_principal_forecast_is_the_full_flow(ops21, model21, base_state, rng):
    P = _cloud(rng, base_state, 3, 0.02)
    A = _cloud(rng, base_state, 6, 0.02)
    es = EnsembleSet(P, P.copy(), A, ReducedSpace.full_space(ops21), ReducedSpace.empty(ops21))
    out, info = predict(es, model21, 1e-3, "ml", 1.0)
    assert np.array_equal(out.principal, model21.flow(P, 1.0).last)
    w_prev, v, w_new = info["dims"][0]
    assert w_prev <= v and w_new <= v and info["rom_dim"] == v
    assert np.allclose(project_onto(out.space_V, out.ancillary), out.ancillary, atol=1e-8 * np.abs(A).max())


def test_reference_surrogate_uses_full_model(ops21, model21, base_state, rng):
    P = _cloud(rng, base_state, 3, 0.02)
    A = _cloud(rng, base_state, 5, 0.02)
    es = _full_set(ops21, P, P.copy(), A)
    out, info = predict(es, model21, 1e-3, "ml", 1.0, surrogate="reference")
    assert out.space_V.full and out.space_W.full
    assert np.array_equal(out.ancillary, model21.flow(A, 1.0).last)
    assert np.array_equal(out.control, out.principal)
    assert info["eps"] == [0.0]


def test_memoryless_resets_deflated_space(ops21, model21, base_state, rng):
    P = _cloud(rng, base_state, 3, 0.02)
    A = _cloud(rng, base_state, 5, 0.02)
    es = EnsembleSet(P, P.copy(), A, ReducedSpace.full_space(ops21), ReducedSpace.empty(ops21))
    out, _ = predict(es, model21, 1e-3, "ml", 1.0, surrogate="memoryless")
    assert out.space_W.dim == 0 and out.space_V.dim > 0


def test_three_level_spaces_are_nested(ops21, model21, base_state, rng):
    sizes = (8, 5, 3)
    ens = [_cloud(rng, base_state, m, 0.02) for m in sizes]
    full, empty = ReducedSpace.full_space(ops21), ReducedSpace.empty(ops21)
    lv = LevelEnsembles(ens, [None, ens[1].copy(), ens[2].copy()], [full, full], [empty, empty])
    config = LevelConfig(sizes, (1e-4, 1e-2))
    out, info = telescopic_predict(lv, model21, config, 1.0, kind="ml")
    V0, V1 = out.spaces_V
    W0, W1 = out.spaces_W
    assert V0.dim <= V1.dim and W0.dim <= W1.dim
    for small, big in ((V0, V1), (W0, W1), (W0, V0), (W1, V1)):
        assert np.allclose(big.projector() @ small.projector(), small.projector(), atol=1e-8)
    assert info["eps"][0] <= info["eps"][1]
    # level-1 members live in V0-coordinates for their control and in V1 otherwise
    assert np.allclose(project_onto(V0, out.control[1]), out.control[1], atol=1e-8 * np.abs(base_state).max())
    assert np.allclose(project_onto(V1, out.principal[1]), out.principal[1], atol=1e-8 * np.abs(base_state).max())


def test_level_config_validation():
    with pytest.raises(ValueError):
        LevelConfig((4, 2), (0.1, 0.2))
    with pytest.raises(ValueError):
        LevelConfig((4, 3, 2), (0.2, 0.1))
    with pytest.raises(ValueError):
        LevelConfig((1, 2), (0.1,))
    with pytest.raises(ValueError):
        LevelConfig((4, 2), (0.1,), split=1.0)


# -- estimator ---------------------------------------------------------------


def test_estimator_parameters_and_validation(ops21):
    est = HierarchicalEnKF(method="mf", eps_r=1e-2)
    assert clone(est).get_params()["eps_r"] == 1e-2
    with pytest.raises(ValueError):
        HierarchicalEnKF(method="bogus").fit([np.zeros((2, ops21.n_dof))] * 2, ops21, QgeParams(), None)
    with pytest.raises(ValueError):
        HierarchicalEnKF(surrogate="bogus").fit([np.zeros((2, ops21.n_dof))] * 2, ops21, QgeParams(), None)


def test_estimator_cycle(ops21, base_state, rng):
    levels = [_cloud(rng, base_state, 6, 0.05), _cloud(rng, base_state, 3, 0.05)]
    est = HierarchicalEnKF(method="ml", eps_r=1e-3).fit(levels, ops21, QgeParams(), PerturbationSource(0))
    assert est.k == 0
    est.analyze(ops21.obs @ base_state)
    mean = est.predict(1.0)
    assert est.k == 1 and mean.shape == (ops21.n_dof,)
    assert len(est.history_) == 1 and est.history_[0]["rom_dim"] > 0
    assert est.observe_mean().shape == (ops21.n_obs,)
    plain = HierarchicalEnKF(method="enkf").fit(levels, ops21, QgeParams(), PerturbationSource(0))
    plain.analyze(ops21.obs @ base_state)
    plain.predict(1.0)
    assert plain.k == 1 and plain.history_[0]["rom_dim"] == 0
