import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reservoir_lab.dynamics import (
    NormMode,
    TrajectoryConfig,
    dataset_from_csv,
    dataset_spec,
    dataset_to_csv,
    integrate_forward_euler,
    kuznetsov,
    linear,
    load_or_make_dataset,
    lorenz,
    make_dataset,
    normalize_max_variation,
    ode_rhs,
)
from reservoir_lab.errors import DegenerateSignal, DimensionMismatch, NonFiniteState

from .conftest import SMALL_DATASET


def test_lorenz_rhs():
    np.testing.assert_array_equal(ode_rhs(lorenz(), [0, 0, 0]), [0, 0, 0])
    np.testing.assert_allclose(ode_rhs(lorenz(), [1, 1, 1]), [0, 26, 1 - 8 / 3], rtol=0, atol=1e-14)


def test_kuznetsov_rhs():
    np.testing.assert_allclose(ode_rhs(kuznetsov(0.9), [0, 0, 0]), [0, 0, 0.9])


def test_rhs_on_stack_of_states():
    states = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    np.testing.assert_allclose(ode_rhs(lorenz(), states), [[0, 26, 1 - 8 / 3], [0, 0, 0]], atol=1e-14)


def test_rhs_rejects_wrong_dimension():
    with pytest.raises(DimensionMismatch):
        ode_rhs(lorenz(), [1.0, 2.0])


def test_zero_vector_field_keeps_initial_condition():
    cfg = TrajectoryConfig(dt_integrator=0.1, subsample=1, n_network_steps=5, initial_condition=(0.3, -1.0, 2.0))
    out = integrate_forward_euler(linear([0.0, 0.0, 0.0]), cfg)
    np.testing.assert_array_equal(out, np.tile([0.3, -1.0, 2.0], (5, 1)))


def test_single_euler_step_of_exponential_growth():
    cfg = TrajectoryConfig(dt_integrator=0.1, subsample=1, n_network_steps=1, initial_condition=(1.0,))
    out = integrate_forward_euler(linear([1.0]), cfg)
    assert out[0, 0] == pytest.approx(1.1, abs=1e-15)


def test_subsample_and_transient_record_every_nth_state():
    cfg = TrajectoryConfig(dt_integrator=0.1, subsample=2, n_network_steps=3, initial_condition=(1.0,), transient_steps=1)
    out = integrate_forward_euler(linear([1.0]), cfg)
    np.testing.assert_allclose(out[:, 0], 1.1 ** np.array([4, 6, 8]))


def test_lorenz_trajectory_stays_on_the_attractor():
    cfg = TrajectoryConfig(dt_integrator=0.0099, subsample=1, n_network_steps=10_000, initial_condition=(1.0, 1.0, 1.0))
    out = integrate_forward_euler(lorenz(), cfg)
    assert np.all(np.abs(out[:, 0]) < 25)
    assert np.all(np.abs(out[:, 1]) < 30)
    assert np.all((out[:, 2] > 0) & (out[:, 2] < 50))


def test_blow_up_raises_non_finite_state():
    cfg = TrajectoryConfig(dt_integrator=1.0, subsample=1, n_network_steps=200, initial_condition=(1.0,))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteState) as info:
            integrate_forward_euler(linear([1e10]), cfg)
    assert info.value.step > 0


@pytest.mark.parametrize(
    "field, value",
    [("dt_integrator", 0.0), ("subsample", 0), ("transient_steps", -1)],
)
def test_trajectory_config_validation(field, value):
    kwargs = dict(dt_integrator=0.1, subsample=1, n_network_steps=1, initial_condition=(1.0,), transient_steps=0)
    kwargs[field] = value
    with pytest.raises(ValueError):
        TrajectoryConfig(**kwargs)


def test_componentwise_normalization_of_a_ramp():
    dataset = normalize_max_variation(np.array([[0.0], [1.0], [2.0]]), NormMode.COMPONENTWISE)
    np.testing.assert_allclose(dataset.u[:, 0], [0.0, 0.5, 1.0])


def test_global_normalization_uses_the_largest_range():
    raw = np.array([[0.0, 0.0], [2.0, 4.0]])
    dataset = normalize_max_variation(raw, NormMode.GLOBAL)
    np.testing.assert_allclose(dataset.norm_record.scales, [4.0, 4.0])
    np.testing.assert_allclose(dataset.u, raw / 4.0)


def test_normalizing_normalized_data_is_a_no_op():
    raw = np.array([[0.0, 0.2], [1.0, 1.2], [0.5, 0.7]])
    dataset = normalize_max_variation(raw, NormMode.COMPONENTWISE)
    np.testing.assert_allclose(dataset.norm_record.scales, [1.0, 1.0], rtol=0, atol=1e-12)


def test_constant_signal_is_degenerate():
    with pytest.raises(DegenerateSignal):
        normalize_max_variation(np.ones((4, 3)), NormMode.GLOBAL)
    with pytest.raises(DegenerateSignal):
        normalize_max_variation(np.array([[0.0, 1.0], [1.0, 1.0]]), NormMode.COMPONENTWISE)


@settings(max_examples=50, deadline=None)
@given(
    raw=arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False)),
    mode=st.sampled_from(list(NormMode)),
)
def test_denormalize_inverts_normalize(raw, mode):
    raw = raw + np.arange(6)[:, None]  # every component varies
    try:
        dataset = normalize_max_variation(raw, mode)
    except DegenerateSignal:
        return
    np.testing.assert_allclose(dataset.denormalize(), raw, rtol=1e-12, atol=1e-12 * np.abs(raw).max())


def test_dataset_is_reproducible(lorenz_dataset):
    again = make_dataset("lorenz", "short", seed=0, **SMALL_DATASET)
    np.testing.assert_array_equal(again.u, lorenz_dataset.u)
    other = make_dataset("lorenz", "short", seed=1, **SMALL_DATASET)
    assert not np.array_equal(other.u, lorenz_dataset.u)


def test_lorenz_dataset_geometry(lorenz_dataset):
    assert lorenz_dataset.steps_per_lt == 111
    assert lorenz_dataset.trainval_steps == 12 * 111
    # the last 3 LT test start is followed by a 10 LT horizon rollout
    assert lorenz_dataset.n_steps == 37 * 111
    assert lorenz_dataset.lt_to_steps(3) == 333
    assert lorenz_dataset.variant == "lorenz_short"
    assert np.ptp(lorenz_dataset.u, axis=0).max() == pytest.approx(1.0)


def test_long_lorenz_covers_the_full_test_suite():
    spec = dataset_spec("lorenz", "long")
    assert spec.trainval_lt == 24
    assert spec.total_lt >= 24 + 100 * 3
    assert spec.steps_per_lt == 111


def test_short_and_long_lorenz_share_their_trajectory():
    short = make_dataset("lorenz", "short", seed=3, **SMALL_DATASET)
    long = make_dataset("lorenz", "long", seed=3, **SMALL_DATASET)
    np.testing.assert_array_equal(short.u, long.u)
    assert long.trainval_steps == 2 * short.trainval_steps


def test_kuznetsov_lyapunov_time():
    dataset = make_dataset("kuznetsov", "chaotic", seed=0, n_test_starts=1, transient_lt=1.0)
    assert dataset.lyapunov_time == 25
    assert dataset.steps_per_lt == 500
    assert dataset.norm_record.mode is NormMode.COMPONENTWISE
    np.testing.assert_allclose(np.ptp(dataset.u, axis=0), 1.0)


def test_unknown_variant():
    with pytest.raises(KeyError):
        make_dataset("lorenz", "medium")


def test_dataset_cache(tmp_path):
    first = load_or_make_dataset("lorenz", "short", 0, cache_dir=tmp_path, **SMALL_DATASET)
    cached = list(tmp_path.glob("lorenz_short_seed0_*.npz"))
    assert len(cached) == 1
    second = load_or_make_dataset("lorenz", "short", 0, cache_dir=tmp_path, **SMALL_DATASET)
    np.testing.assert_array_equal(first.u, second.u)
    assert second.trainval_steps == first.trainval_steps
    np.testing.assert_array_equal(second.norm_record.scales, first.norm_record.scales)


def test_csv_export_and_import(tmp_path, lorenz_dataset):
    path = tmp_path / "dataset.csv"
    dataset_to_csv(lorenz_dataset, path)
    header = path.read_text().splitlines()[0]
    assert header == "t,x,y,z"

    loaded = dataset_from_csv(path, lyapunov_time=1.1, scales=lorenz_dataset.norm_record.scales)
    np.testing.assert_allclose(loaded.u, lorenz_dataset.u, rtol=1e-12)
    assert loaded.steps_per_lt == 111


def test_subsampled_rows_match_the_full_trajectory():
    base = dict(dt_integrator=0.0099, initial_condition=(1.0, 1.0, 1.0), transient_steps=2)
    coarse = integrate_forward_euler(lorenz(), TrajectoryConfig(subsample=3, n_network_steps=5, **base))
    fine = integrate_forward_euler(lorenz(), TrajectoryConfig(subsample=1, n_network_steps=15, **{**base, "transient_steps": 6}))
    np.testing.assert_array_equal(coarse, fine[2::3])
