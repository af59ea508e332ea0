import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reservoir_lab.dynamics import kuznetsov, linear, lorenz, ode_rhs
from reservoir_lab.errors import ConfigError, DimensionMismatch, RankDeficient
from reservoir_lab.knowledge import (
    Architecture,
    KnowledgeFn,
    KnowledgeKind,
    compute_pod,
    fe_knowledge,
    make_knowledge,
    pod_knowledge,
)
from reservoir_lab.reservoir import EsnHyperparams, init_matrices, run_closed_loop, run_open_loop, train_ridge


def _line_snapshots():
    t = np.linspace(-1, 1, 21)[:, None]
    return np.array([0.5, -1.0, 2.0]) + t * np.array([1.0, 2.0, 3.0])


def _axis_snapshots():
    # variances 9 > 4 > 1 along z, x and y
    rows = []
    for axis, amplitude in ((2, 3.0), (0, 2.0), (1, 1.0)):
        for sign in (1.0, -1.0):
            row = np.zeros(3)
            row[axis] = sign * amplitude
            rows.append(row)
    return np.array(rows)


def test_rank_one_snapshots_carry_all_energy_in_one_mode():
    pod = compute_pod(_line_snapshots(), 1)
    assert pod.energy_fraction == pytest.approx(1.0, abs=1e-10)
    direction = np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0)
    np.testing.assert_allclose(pod.phi[:, 0], direction, atol=1e-12)


def test_rank_one_snapshots_cannot_hold_two_modes():
    with pytest.raises(RankDeficient):
        compute_pod(_line_snapshots(), 2)


def test_pod_of_axis_aligned_snapshots():
    pod = compute_pod(_axis_snapshots(), 3)
    np.testing.assert_allclose(pod.phi, [[0, 1, 0], [0, 0, 1], [1, 0, 0]], atol=1e-12)
    np.testing.assert_allclose(pod.energies, np.array([18.0, 8.0, 2.0]) / 5.0, atol=1e-12)
    np.testing.assert_allclose(pod.d, 0.0, atol=1e-15)


def test_pod_input_checks():
    with pytest.raises(DimensionMismatch):
        compute_pod(np.ones((1, 3)), 1)
    with pytest.raises(DimensionMismatch):
        compute_pod(_axis_snapshots(), 4)


@settings(max_examples=30, deadline=None)
@given(u=arrays(np.float64, (4, 3), elements=st.floats(-5, 5, allow_nan=False)))
def test_projection_is_idempotent(u):
    pod = compute_pod(_axis_snapshots() + 0.1, 2)
    once = pod.lift(pod.project(u))
    np.testing.assert_allclose(pod.lift(pod.project(once)), once, atol=1e-12)


def test_pod_knowledge_without_dynamics_is_the_projection():
    pod = compute_pod(_axis_snapshots(), 2, dt=0.1)
    u = np.array([0.3, -0.2, 1.5])
    np.testing.assert_allclose(pod_knowledge(pod, linear([0.0, 0.0, 0.0]), u), pod.phi.T @ (u - pod.d), atol=1e-15)


def test_pod_knowledge_at_the_mean():
    snapshots = _axis_snapshots() + np.array([1.0, 2.0, 3.0])
    pod = compute_pod(snapshots, 2, dt=0.05)
    np.testing.assert_allclose(pod_knowledge(pod, lorenz(), pod.d), 0.05 * pod.phi.T @ ode_rhs(lorenz(), pod.d), atol=1e-12)


def test_pod_knowledge_matches_step_by_step_evaluation(lorenz_dataset):
    record = lorenz_dataset.norm_record
    dt = lorenz_dataset.dt_network
    pod = compute_pod(lorenz_dataset.trainval(), 2, dt=dt, scales=record.scales, offsets=record.offsets)
    u = lorenz_dataset.u[500]

    xi = np.zeros(2)
    for j in range(2):
        for i in range(3):
            xi[j] += pod.phi[i, j] * (u[i] - pod.d[i])
    q = [(sum(pod.phi[i, j] * xi[j] for j in range(2)) + pod.d[i]) * record.scales[i] for i in range(3)]
    sigma, beta, rho = 10.0, 8.0 / 3.0, 28.0
    f = [sigma * (q[1] - q[0]), q[0] * (rho - q[2]) - q[1], q[0] * q[1] - beta * q[2]]
    expected = [xi[j] + dt * sum(pod.phi[i, j] * f[i] / record.scales[i] for i in range(3)) for j in range(2)]

    np.testing.assert_allclose(pod_knowledge(pod, lorenz(), u), expected, rtol=1e-12, atol=1e-12)


def test_pod_knowledge_on_a_stack_of_inputs(lorenz_dataset):
    fn = make_knowledge(Architecture.POD_INFORMED, lorenz_dataset, n_pod=2)
    stacked = fn(lorenz_dataset.u[:5])
    assert stacked.shape == (5, 2)
    np.testing.assert_allclose(stacked[3], fn(lorenz_dataset.u[3]), atol=1e-15)


def test_fe_knowledge_examples():
    system = kuznetsov(0.9)
    assert fe_knowledge(system, 0.05, [0.0, 0.0, 0.0]) == 0.0
    assert fe_knowledge(system, 0.05, [1.0, 1.0, 0.0]) == pytest.approx(0.6605, abs=1e-12)
    assert fe_knowledge(system, 0.0, [0.7, -0.4, 0.2]) == pytest.approx(-0.4, abs=1e-15)


def test_fe_knowledge_needs_kuznetsov():
    with pytest.raises(ConfigError):
        fe_knowledge(lorenz(), 0.05, [1.0, 1.0, 0.0])


def test_fe_knowledge_function_works_in_the_normalized_frame():
    scales = np.array([2.0, 4.0, 0.5])
    offsets = np.zeros(3)
    fn = KnowledgeFn(KnowledgeKind.FORWARD_EULER_Y, kuznetsov(0.9), 0.05, scales, offsets)
    u = np.array([0.5, 0.25, 0.0])
    assert fn.out_dim == 1
    np.testing.assert_allclose(fn(u), [0.6605 / 4.0], atol=1e-12)
    assert fn(np.tile(u, (4, 1))).shape == (4, 1)


def test_make_knowledge_dispatch(lorenz_dataset):
    assert make_knowledge("model_free", lorenz_dataset) is None
    assert make_knowledge("pod_informed", lorenz_dataset, n_pod=3).out_dim == 3
    with pytest.raises(ConfigError):
        make_knowledge("fe_informed", lorenz_dataset)
    with pytest.raises(ValueError):
        make_knowledge("hybrid", lorenz_dataset)


def test_knowledge_function_serialization(lorenz_dataset):
    fn = make_knowledge("pod_informed", lorenz_dataset, n_pod=2)
    restored = KnowledgeFn.from_dict(fn.to_dict())
    np.testing.assert_allclose(restored(lorenz_dataset.u[:10]), fn(lorenz_dataset.u[:10]), atol=1e-15)


def test_informed_network_extends_the_readout_state(lorenz_dataset):
    fn = make_knowledge("pod_informed", lorenz_dataset, n_pod=2)
    hp = EsnHyperparams(sigma_in=1.0, rho=0.5, beta_tik=1e-8, n_r=20, seed=0)
    mats = init_matrices(hp, 3)
    u = lorenz_dataset.trainval()
    R, state = run_open_loop(mats, hp, u[:-1], 111, fn)
    assert R.shape == (23, u.shape[0] - 112)
    np.testing.assert_allclose(R[21:, 0], fn(u[111]), atol=1e-15)

    trained = mats.with_readout(train_ridge(R, u[112:].T, hp.beta_tik))
    predictions = run_closed_loop(trained, hp, state, u[-1], 5, fn)
    assert predictions.shape == (5, 3)
    assert np.all(np.isfinite(predictions))


def test_pod_modes_are_orthonormal_and_energy_grows_with_rank(lorenz_dataset):
    fractions = []
    for n_pod in (1, 2, 3):
        pod = compute_pod(lorenz_dataset.trainval(), n_pod)
        assert np.max(np.abs(pod.phi.T @ pod.phi - np.eye(n_pod))) < 1e-10
        fractions.append(pod.energy_fraction)
    assert fractions[0] <= fractions[1] <= fractions[2]
    assert fractions[2] == pytest.approx(1.0)
