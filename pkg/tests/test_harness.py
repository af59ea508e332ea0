import json

import numpy as np
import pandas as pd
import pytest

from reservoir_lab import harness
from reservoir_lab.config import config_to_dict, load_config
from reservoir_lab.errors import ConfigError, EmptyInput
from reservoir_lab.harness import (
    ExperimentRecord,
    export,
    load_record,
    optimizer_ratios,
    persist_record,
    run_convergence_sweep,
    run_cost_study,
    run_experiment,
    run_fixed_hp_study,
    run_networks,
    spearman_table,
)
from reservoir_lab.metrics import RESULT_COLUMNS, EnsembleResult, NetworkResult, make_test_suite
from reservoir_lab.reservoir import load_network

from .conftest import TINY_OVERRIDES


def _config(tmp_path, *extra):
    return load_config(overrides=TINY_OVERRIDES + [f"output_dir={tmp_path / 'out'}", *extra])


def _comparable(record):
    return record.ensemble.to_frame().drop(columns=["wall_time"])


@pytest.fixture(scope="module")
def tiny_record(tmp_path_factory, lorenz_dataset):
    cfg = load_config(overrides=TINY_OVERRIDES + [f"output_dir={tmp_path_factory.mktemp('out')}"])
    return run_experiment(cfg, dataset=lorenz_dataset)


def test_single_network_single_shot_grid_search(tmp_path, lorenz_dataset):
    cfg = _config(tmp_path, "n_ensemble=1", "strategies=[SSV]", "optimizers=[GS]")
    record = run_experiment(cfg, dataset=lorenz_dataset)

    (row,) = record.ensemble.rows
    assert row.error == ""
    assert row.n_evaluations == 4 and row.ridge_solves == 4
    assert row.sigma_in in (0.5, 5.0) and row.rho in (0.1, 1.0)
    assert row.val_mse == pytest.approx(10**row.val_objective)
    assert row.test_mse > 0
    assert len(record.traces) == 4
    assert [t["start"] for t in record.tests] == [2664, 2997]
    assert record.summary["SSV/GS"]["n"] == 1


def test_every_triple_is_run_once(tiny_record):
    frame = tiny_record.ensemble.to_frame()
    assert len(frame) == 8
    assert not frame.duplicated(["network", "strategy", "optimizer"]).any()
    assert (frame["error"] == "").all()
    assert set(tiny_record.summary) == {"SSV/GS", "SSV/BO", "RV_c/GS", "RV_c/BO"}

    gs = frame[frame.optimizer == "GS"]
    assert (gs["n_evaluations"] == 4).all() and (gs["ridge_solves"] == 4).all()
    bo = frame[frame.optimizer == "BO"]
    assert (bo["n_evaluations"] == 6).all()
    assert (bo["ridge_solves"] <= bo["n_evaluations"]).all()
    assert len(tiny_record.tests) == 8 * 2


def test_networks_get_distinct_derived_seeds(tiny_record):
    seeds = {r.network: r.seed for r in tiny_record.ensemble.rows}
    assert seeds[0] != seeds[1]


def test_experiments_are_reproducible(tmp_path, lorenz_dataset, tiny_record):
    again = run_experiment(_config(tmp_path), dataset=lorenz_dataset)
    pd.testing.assert_frame_equal(_comparable(again), _comparable(tiny_record))
    pd.testing.assert_frame_equal(pd.DataFrame(again.traces), pd.DataFrame(tiny_record.traces))
    assert again.config_hash == tiny_record.config_hash


def test_failed_pairs_are_recorded(tmp_path, lorenz_dataset):
    cfg = _config(tmp_path, "n_ensemble=1", "strategies=[WFV,SSV]", "optimizers=[GS]", "geometry.wfv_train_lt=0.5")
    record = run_experiment(cfg, dataset=lorenz_dataset)
    rows = {r.strategy: r for r in record.ensemble.rows}
    assert rows["WFV"].error.startswith("ConfigError")
    assert rows["SSV"].error == ""
    assert "WFV/GS" not in record.summary
    assert record.spearman["WFV"] is None


def test_parallel_run_matches_the_serial_one(tmp_path, lorenz_dataset, monkeypatch):
    class InlineJob:
        def __init__(self, fn, args):
            self.value = fn(*args)

        def result(self):
            return self.value

    class InlineExecutor:
        created = []

        def __init__(self, folder, cluster):
            self.folder, self.cluster = folder, cluster
            self.parameters = {}
            InlineExecutor.created.append(self)

        def update_parameters(self, **kwargs):
            self.parameters.update(kwargs)

        def submit(self, fn, *args):
            return InlineJob(fn, args)

    monkeypatch.setattr(harness.submitit, "AutoExecutor", InlineExecutor)
    cfg = _config(tmp_path, "n_ensemble=3", "strategies=[SSV]", "optimizers=[GS]")
    serial = run_networks(cfg, lorenz_dataset)
    cfg.launcher.workers = 2
    parallel = run_networks(cfg, lorenz_dataset)

    (executor,) = InlineExecutor.created
    assert executor.cluster == "local"
    assert executor.parameters["timeout_min"] == cfg.launcher.timeout_min
    assert [o.index for o in parallel] == [0, 1, 2]
    for a, b in zip(serial, parallel):
        assert a.seed == b.seed
        assert [r.test_mse for r in a.rows] == [r.test_mse for r in b.rows]
        pd.testing.assert_frame_equal(pd.DataFrame(a.traces), pd.DataFrame(b.traces))


def test_saved_networks(tmp_path, lorenz_dataset):
    cfg = _config(tmp_path, "n_ensemble=1", "strategies=[SSV]", "optimizers=[GS]", "save_networks=true")
    record = run_experiment(cfg, out_dir=tmp_path / "run", dataset=lorenz_dataset)
    mats, hp, extra = load_network(tmp_path / "run" / "networks" / "net000_SSV_GS.json")
    row = record.ensemble.rows[0]
    assert (hp.sigma_in, hp.rho) == (row.sigma_in, row.rho)
    assert mats.w_out.shape == (21, 3)
    assert extra["knowledge"] is None


def test_records_are_append_only(tmp_path, tiny_record):
    first = persist_record(tiny_record, tmp_path)
    second = persist_record(tiny_record, tmp_path)
    assert first.name == "record_0.json" and second.name == "record_1.json"
    assert first.parent.name == tiny_record.config_hash

    loaded = load_record(first)
    pd.testing.assert_frame_equal(loaded.ensemble.to_frame(), tiny_record.ensemble.to_frame())
    assert loaded.summary == json.loads(json.dumps(tiny_record.summary))
    assert loaded.tests == tiny_record.tests


def test_export_is_idempotent(tmp_path, tiny_record):
    formats = ("csv", "json", "traces", "report")
    first = export(tiny_record, tmp_path / "a", formats)
    second = export(tiny_record, tmp_path / "b", formats)
    assert [p.name for p in first] == ["results.csv", "tests.csv", "traces.csv", "summary.json", "report.md"]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()

    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert set(summary["summary"]) == set(tiny_record.summary)
    assert "created" not in summary and "wall_time" not in summary
    report = (tmp_path / "a" / "report.md").read_text()
    assert tiny_record.config_hash in report and "RV_c/BO" in report


def test_export_of_an_empty_record(tmp_path):
    cfg = load_config(overrides=["n_ensemble=1"])
    record = ExperimentRecord(config=config_to_dict(cfg), config_hash="empty").analyze()
    export(record, tmp_path, ("csv", "json", "traces", "surfaces", "report"))
    assert (tmp_path / "results.csv").read_text().splitlines() == [",".join(RESULT_COLUMNS)]
    assert len((tmp_path / "surfaces.csv").read_text().splitlines()) == 1
    assert json.loads((tmp_path / "summary.json").read_text())["summary"] == {}


def test_unknown_export_format(tmp_path, tiny_record):
    with pytest.raises(ConfigError):
        export(tiny_record, tmp_path, ("xlsx",))


def test_surface_export(tmp_path, lorenz_dataset):
    cfg = _config(tmp_path, "n_ensemble=1", "strategies=[SSV]", "optimizers=[GS]", "test.surfaces=true")
    record = run_experiment(cfg, dataset=lorenz_dataset)
    assert len(record.surfaces) == 4
    export(record, tmp_path / "export", ("surfaces",))
    surfaces = pd.read_csv(tmp_path / "export" / "surfaces.csv")
    counts = surfaces.groupby("set").size()
    assert counts["validation"] == 900
    assert set(counts.index) <= {"validation", "test_mse", "test_ph"}
    assert (counts == 900).all()


def _handmade_ensemble():
    rows = []
    for network in range(3):
        rows.append(NetworkResult(network, network, "SSV", "BO", val_mse=1.0 + network, test_mse=10.0 + network,
                                  test_ph=3.0 - network, n_evaluations=5, ridge_solves=5, wall_time=1.0))
        rows.append(NetworkResult(network, network, "SSV", "GS", val_mse=4.0 + network, test_mse=20.0 + network,
                                  test_ph=2.0 - network, n_evaluations=5, ridge_solves=5, wall_time=3.0))
        rows.append(NetworkResult(network, network, "KFV", "GS", val_mse=1.0, test_mse=1.0 + network,
                                  test_ph=1.0, n_evaluations=5, ridge_solves=20, wall_time=2.0))
    return EnsembleResult(rows)


def test_handmade_analysis_tables():
    ensemble = _handmade_ensemble()
    spearman = spearman_table(ensemble)
    assert spearman["SSV"] == pytest.approx(1.0)
    assert spearman["KFV"] is None

    ratios = optimizer_ratios(ensemble)
    assert ratios["SSV"]["validation"] == pytest.approx(2.0 / 5.0)
    assert ratios["SSV"]["test"] == pytest.approx(11.0 / 21.0)
    assert "KFV" not in ratios

    record = ExperimentRecord(config={"strategies": ["SSV", "KFV"], "optimizers": ["GS", "BO"]}, config_hash="h", ensemble=ensemble)
    record.analyze()
    assert record.mse_ph_spearman["SSV/BO"] == pytest.approx(-1.0)
    assert record.mse_ph_spearman["KFV/GS"] is None
    assert record.costs["KFV"]["solves_per_evaluation"] == 4.0
    assert record.costs["SSV"]["mean_wall_time"] == 2.0


def test_convergence_over_the_ensemble_size():
    record = ExperimentRecord(config={"strategies": ["SSV"], "optimizers": ["GS", "BO"]}, config_hash="h", ensemble=_handmade_ensemble())
    table = run_convergence_sweep(record, "n_ensemble")
    assert list(table["size"]) == [1, 2, 3]
    first = table.iloc[0]
    assert first["metric"] == "val_mse"
    assert first["p25"] == first["p50"] == first["p75"] == 1.0
    assert table.iloc[2]["p50"] == 2.0

    single = run_convergence_sweep(record, "n_ensemble", optimizer="GS", sizes=[1])
    assert len(single) == 1 and single.iloc[0]["p50"] == 4.0

    with pytest.raises(ConfigError):
        run_convergence_sweep(record, "n_ensemble", sizes=[4])
    with pytest.raises(ConfigError):
        run_convergence_sweep(record, "n_folds")
    with pytest.raises(EmptyInput):
        run_convergence_sweep(record, "n_ensemble", strategy="RV")


def test_convergence_over_the_number_of_test_starts():
    tests = [
        {"network": n, "strategy": "SSV", "optimizer": "BO", "start": s, "start_lt": s / 10, "mse": 1e-3, "ph": ph, "censored": False}
        for n, phs in ((0, (1.0, 3.0, 5.0)), (1, (3.0, 3.0, 3.0)))
        for s, ph in zip((30, 60, 90), phs)
    ]
    record = ExperimentRecord(config={"strategies": ["SSV"], "optimizers": ["BO"]}, config_hash="h",
                              ensemble=_handmade_ensemble(), tests=tests)
    table = run_convergence_sweep(record, "n_test_starts")
    assert list(table["metric"].unique()) == ["test_ph"]
    assert table.iloc[0]["p50"] == pytest.approx(2.0)
    assert table.iloc[1]["p25"] == pytest.approx(2.25)

    for row in tests:
        row["ph"] = float("nan")
    table = run_convergence_sweep(record, "n_test_starts", sizes=[3])
    assert table.iloc[0]["metric"] == "test_mse"
    assert table.iloc[0]["p50"] == pytest.approx(1e-3)


def test_fixed_hyperparameters_of_a_degenerate_ensemble(tmp_path, lorenz_dataset):
    cfg = _config(tmp_path, "strategies=[SSV]", "optimizers=[GS]", "shared_network_seed=true")
    study = run_fixed_hp_study(cfg, dataset=lorenz_dataset)
    rows = study.rows

    assert set(rows["mode"]) == {"independent", "fixed_ensemble_opt", "fixed_single_network"}
    assert len(rows) == 6
    assert rows["seed"].nunique() == 1
    assert rows["sigma_in"].nunique() == 1 and rows["rho"].nunique() == 1
    np.testing.assert_allclose(rows["test_mse"], rows["test_mse"].iloc[0], rtol=1e-9)
    assert study.representative == 0
    assert study.ensemble_search.n_evaluations == 4
    assert set(study.summary) == set(rows["mode"])


def test_fixed_hp_study_reuses_a_record(tiny_record, lorenz_dataset):
    cfg = load_config(overrides=TINY_OVERRIDES)
    study = run_fixed_hp_study(cfg, tiny_record, "RV_c", "GS", modes=("independent", "fixed_single_network"), dataset=lorenz_dataset)
    independent = study.rows[study.rows["mode"] == "independent"]
    expected = [r.test_mse for r in sorted(tiny_record.ensemble.select("RV_c", "GS"), key=lambda r: r.network)]
    assert list(independent["test_mse"]) == expected
    assert study.ensemble_search is None

    with pytest.raises(ConfigError):
        run_fixed_hp_study(cfg, tiny_record, modes=("shared",), dataset=lorenz_dataset)


def test_cost_study_counts_ridge_solves(tmp_path, lorenz_dataset):
    cfg = _config(tmp_path, "strategies=[RV,KFV,SSV]")
    table = run_cost_study(cfg, grid_shape=(2, 2), dataset=lorenz_dataset).set_index("strategy")
    assert table.loc["RV", "solves_per_evaluation"] == 1.0
    assert table.loc["KFV", "n_folds"] == 4
    assert table.loc["KFV", "solves_per_evaluation"] == 4.0
    assert table.loc["SSV", "ridge_solves"] == 4
    assert (table["evaluations"] == 4).all()


def _replaying_closed_loop(dataset, drift_after=None):
    """Stands in for the closed loop: replays the data after u_start, then jumps off it."""

    def closed_loop(mats, hp, state, u_start, n_steps, knowledge=None):
        start = int(np.flatnonzero((dataset.u == u_start).all(axis=1))[0]) + 1
        predictions = dataset.u[start : start + n_steps].copy()
        if drift_after is not None:
            predictions[drift_after:] += 10.0
        return predictions

    return closed_loop


@pytest.fixture
def readout_mats(small_hp, small_mats):
    return small_mats.with_readout(np.zeros((small_hp.n_r + 1, 3)))


def test_horizon_is_scored_past_the_mse_interval(lorenz_dataset, small_hp, readout_mats, monkeypatch):
    suite = make_test_suite(lorenz_dataset, start_lt=24, spacing_lt=3, interval_lt=3, n_starts=2, ph_interval_lt=10)
    assert suite.rollout_steps == 1110
    monkeypatch.setattr(harness, "run_closed_loop", _replaying_closed_loop(lorenz_dataset, drift_after=555))

    score = harness.score_test_suite(readout_mats, small_hp, lorenz_dataset, suite)
    assert score.mse_values == [0.0, 0.0]
    assert [h.steps for h in score.horizons] == [555, 555]
    assert score.censored == 0
    assert score.mean_ph == pytest.approx(555 * lorenz_dataset.dt_network / lorenz_dataset.lyapunov_time)


def test_horizon_is_censored_at_the_rollout_length(lorenz_dataset, small_hp, readout_mats, monkeypatch):
    monkeypatch.setattr(harness, "run_closed_loop", _replaying_closed_loop(lorenz_dataset))
    extended = make_test_suite(lorenz_dataset, start_lt=24, spacing_lt=3, interval_lt=3, n_starts=2, ph_interval_lt=10)
    short = make_test_suite(lorenz_dataset, start_lt=24, spacing_lt=3, interval_lt=3, n_starts=2)

    assert [h.steps for h in harness.score_test_suite(readout_mats, small_hp, lorenz_dataset, extended).horizons] == [1110, 1110]
    score = harness.score_test_suite(readout_mats, small_hp, lorenz_dataset, short)
    assert [h.steps for h in score.horizons] == [333, 333]
    assert score.censored == 2


def test_tuned_networks_lose_track_within_the_rollout(tiny_record):
    assert not any(t["censored"] for t in tiny_record.tests)
    assert all(row.ph_scored == 2 for row in tiny_record.ensemble.rows)
    for stats in tiny_record.summary.values():
        assert stats["ph_censored_fraction"] == 0.0
