"""
Ensemble experiments: every network of the ensemble optimizes (sigma_in, rho) on its own
for each (validation strategy, optimizer) pair, is retrained on the whole washout +
training + validation span and is scored on the test suite. Also hosts the studies built
on top of experiment records (fixed hyperparameters, convergence, cost) and the exports.
"""
import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import submitit
from jinja2 import Environment, FileSystemLoader

from .config import ExperimentConfig, config_from_dict, config_hash, config_to_dict
from .dynamics import TimeSeriesDataset, load_or_make_dataset
from .errors import ConfigError, EmptyInput, RecordExists, ReservoirLabError, ZeroVariance, ShapeMismatch
from .hpo import TRACE_COLUMNS, SearchResult, SearchSpace, bayesian_optimize, grid_search, posterior_surface
from .knowledge import KnowledgeFn, make_knowledge
from .metrics import (
    EnsembleResult,
    Horizon,
    NetworkResult,
    TestSuite,
    aggregate,
    geometric_mean,
    make_test_suite,
    mse,
    percentiles,
    prediction_horizon,
    spearman,
)
from .reservoir import (
    EsnHyperparams,
    ReservoirMatrices,
    SolveCounter,
    init_matrices,
    run_closed_loop,
    save_network,
    warm_start,
)
from .utils import derive_seed, ensure_output_dir, resolve_cache_dir
from .validation import (
    TeacherForcedRun,
    build_schedule_for,
    evaluate_objective,
    geometry_from_lt,
    make_objective,
)

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"
SURFACE_SIZE = 30
EXPORT_FORMATS = ("csv", "json", "traces", "surfaces", "report")
FIXED_HP_MODES = ("independent", "fixed_ensemble_opt", "fixed_single_network")
CONVERGENCE_AXES = ("n_ensemble", "n_test_starts")

TEST_COLUMNS = ["network", "strategy", "optimizer", "start", "start_lt", "mse", "ph", "censored"]
TRACE_EXPORT_COLUMNS = ["network", "strategy", "optimizer"] + TRACE_COLUMNS
SURFACE_POINT_COLUMNS = ["network", "strategy", "optimizer", "sigma_in", "rho", "test_log_mse", "test_ph"]
SURFACE_COLUMNS = ["network", "strategy", "optimizer", "set", "sigma_in", "rho", "mean", "std"]

# failures inside one (network, strategy, optimizer) triple are recorded, not raised
RECOVERABLE = (ReservoirLabError, np.linalg.LinAlgError, ValueError)


def prepare_dataset(cfg: ExperimentConfig) -> TimeSeriesDataset:
    return load_or_make_dataset(
        cfg.dataset.name,
        cfg.dataset.variant,
        cfg.dataset.seed,
        cache_dir=resolve_cache_dir(cfg.dataset.cache_dir),
        n_test_starts=cfg.dataset.n_test_starts,
        transient_lt=cfg.dataset.transient_lt,
    )


def search_space(cfg: ExperimentConfig) -> SearchSpace:
    s = cfg.search
    return SearchSpace(bounds=(tuple(s.sigma_in_bounds), tuple(s.rho_bounds)), scales=(s.sigma_in_scale, s.rho_scale))


def network_seed(cfg: ExperimentConfig, index: int) -> int:
    return cfg.seed if cfg.shared_network_seed else derive_seed(cfg.seed, index)


def base_hyperparams(cfg: ExperimentConfig, seed: int) -> EsnHyperparams:
    """Fixed hyperparameters of a network; (sigma_in, rho) start at the lower search bounds."""
    r = cfg.reservoir
    return EsnHyperparams(
        sigma_in=cfg.search.sigma_in_bounds[0],
        rho=cfg.search.rho_bounds[0],
        beta_tik=r.beta_tik,
        b_in=r.b_in,
        n_r=r.n_r,
        sparseness=r.sparseness,
        seed=seed,
    )


def schedule_geometry(cfg: ExperimentConfig, dataset: TimeSeriesDataset):
    g = cfg.geometry
    return geometry_from_lt(
        dataset,
        v_lt=g.v_lt,
        washout_lt=g.washout_lt,
        chaotic_shift_lt=g.chaotic_shift_lt,
        train_lt=g.wfv_train_lt,
        ssv_train_lt=g.ssv_train_lt,
        offset_lt=g.offset_lt,
    )


def make_suite(cfg: ExperimentConfig, dataset: TimeSeriesDataset) -> TestSuite:
    t = cfg.test
    return make_test_suite(
        dataset,
        start_lt=t.start_lt,
        spacing_lt=t.spacing_lt,
        interval_lt=t.interval_lt,
        n_starts=t.n_starts,
        washout_lt=cfg.geometry.washout_lt,
        k_threshold=t.k_threshold,
        score_ph=t.score_ph,
        ph_interval_lt=t.ph_interval_lt,
    )


@dataclass
class TestScore:
    mse_values: List[float]
    horizons: List[Optional[Horizon]]

    __test__ = False

    @property
    def geo_mean_mse(self) -> float:
        return geometric_mean(self.mse_values)

    @property
    def mean_ph(self) -> float:
        scored = [h.lt for h in self.horizons if h is not None]
        return float(np.mean(scored)) if scored else float("nan")

    @property
    def censored(self) -> int:
        return sum(1 for h in self.horizons if h is not None and h.censored)


def retrain(mats: ReservoirMatrices, hp: EsnHyperparams, dataset: TimeSeriesDataset, washout_steps: int, knowledge=None) -> ReservoirMatrices:
    """W_out fitted on the whole washout + training + validation span."""
    run = TeacherForcedRun.over(mats, hp, dataset.trainval(), knowledge)
    return mats.with_readout(run.fit([(max(washout_steps, 1), dataset.trainval_steps)], hp.beta_tik))


def score_test_suite(mats: ReservoirMatrices, hp: EsnHyperparams, dataset: TimeSeriesDataset, suite: TestSuite, knowledge=None) -> TestScore:
    """
    Each start gets a fresh open-loop washout on the data right before it, then one
    closed-loop rollout: MSE over the test interval, the horizon over the whole rollout.
    """
    mse_values, horizons = [], []
    n_rollout = suite.rollout_steps
    for start, stop in suite.intervals():
        history = dataset.u[start - 1 - suite.washout_steps : start - 1]
        state = warm_start(mats, hp, history, knowledge)
        predictions = run_closed_loop(mats, hp, state, dataset.u[start - 1], n_rollout, knowledge)
        truth = dataset.u[start : start + n_rollout]
        n = stop - start
        with np.errstate(over="ignore", invalid="ignore"):
            value = mse(predictions[:n], truth[:n])
        mse_values.append(value if math.isfinite(value) else float("inf"))
        if suite.score_ph:
            horizons.append(prediction_horizon(predictions, truth, suite.k_threshold, dataset.dt_network, dataset.lyapunov_time))
        else:
            horizons.append(None)
    return TestScore(mse_values, horizons)


@dataclass
class NetworkOutcome:
    index: int
    seed: int
    rows: List[NetworkResult] = field(default_factory=list)
    traces: List[dict] = field(default_factory=list)
    tests: List[dict] = field(default_factory=list)
    surfaces: List[dict] = field(default_factory=list)


class NetworkRunner:
    """Runs every (strategy, optimizer) pair of the config for single networks."""

    def __init__(self, cfg: ExperimentConfig, dataset: TimeSeriesDataset, out_dir: Optional[Path] = None):
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = out_dir
        self.space = search_space(cfg)
        self.geometry = schedule_geometry(cfg, dataset)
        self.suite = make_suite(cfg, dataset)
        self.knowledge: Optional[KnowledgeFn] = make_knowledge(cfg.reservoir.arch, dataset, cfg.reservoir.n_pod)

    def optimize(self, objective, optimizer: str, seed: int) -> SearchResult:
        opt = self.cfg.optimizer
        if optimizer == "GS":
            return grid_search(objective, self.space, tuple(opt.grid_shape))
        return bayesian_optimize(
            objective,
            self.space,
            n_start=tuple(opt.bo_start),
            n_acquire=opt.bo_acquire,
            seed=seed,
            kappa=opt.kappa,
            eta=opt.eta,
            lattice_size=opt.lattice_size,
            n_restarts=opt.gp_restarts,
        )

    def test(self, mats: ReservoirMatrices, hp: EsnHyperparams) -> TestScore:
        trained = retrain(mats, hp, self.dataset, self.geometry.washout_steps, self.knowledge)
        return score_test_suite(trained, hp, self.dataset, self.suite, self.knowledge)

    def run(self, index: int) -> NetworkOutcome:
        seed = network_seed(self.cfg, index)
        outcome = NetworkOutcome(index=index, seed=seed)
        hp0 = base_hyperparams(self.cfg, seed)
        try:
            mats = init_matrices(hp0, self.dataset.n_u)
        except ReservoirLabError as e:
            logger.error("Network %d (seed %d) could not be built: %s", index, seed, e)
            for label in self.cfg.strategies:
                for optimizer in self.cfg.optimizers:
                    outcome.rows.append(NetworkResult(index, seed, label, optimizer, error=f"{type(e).__name__}: {e}"))
            return outcome

        for label in self.cfg.strategies:
            for optimizer in self.cfg.optimizers:
                self._run_pair(outcome, mats, hp0, label, optimizer)
        return outcome

    def _run_pair(self, outcome: NetworkOutcome, mats, hp0: EsnHyperparams, label: str, optimizer: str):
        row = NetworkResult(outcome.index, outcome.seed, label, optimizer)
        started = time.perf_counter()
        try:
            schedule = build_schedule_for(label, self.dataset, self.geometry)
            counter = SolveCounter()
            objective = make_objective(hp0, mats, schedule, self.dataset, self.knowledge, counter)
            result = self.optimize(objective, optimizer, outcome.seed)
            hp = hp0.at(*result.best_point)
            score = self.test(mats, hp)

            row.sigma_in, row.rho = float(hp.sigma_in), float(hp.rho)
            row.val_objective = result.best_value
            row.val_mse = 10.0**result.best_value
            row.test_mse = score.geo_mean_mse
            row.test_ph = score.mean_ph
            row.ph_censored = score.censored
            row.ph_scored = sum(1 for h in score.horizons if h is not None)
            row.n_evaluations = result.n_evaluations
            row.ridge_solves = counter.count

            tag = {"network": outcome.index, "strategy": label, "optimizer": optimizer}
            outcome.traces.extend({**tag, **asdict(r)} for r in result.trace)
            for start, value, horizon in zip(self.suite.start_indices, score.mse_values, score.horizons):
                outcome.tests.append({
                    **tag,
                    "start": start,
                    "start_lt": start / self.dataset.steps_per_lt,
                    "mse": value,
                    "ph": float("nan") if horizon is None else horizon.lt,
                    "censored": False if horizon is None else horizon.censored,
                })
            if self.cfg.test.surfaces:
                outcome.surfaces.extend(self._surface_points(tag, mats, hp0, result))
            if self.cfg.save_networks and self.out_dir is not None:
                self._save(mats, hp, label, optimizer, outcome.index)
        except RECOVERABLE as e:
            logger.warning("Network %d, %s/%s failed: %s", outcome.index, label, optimizer, e)
            row.error = f"{type(e).__name__}: {e}"
        row.wall_time = time.perf_counter() - started
        outcome.rows.append(row)

    def _surface_points(self, tag: dict, mats, hp0: EsnHyperparams, result: SearchResult) -> List[dict]:
        points = []
        for r in result.trace:
            try:
                score = self.test(mats, hp0.at(r.sigma_in, r.rho))
                log_mse = float(np.log10(score.geo_mean_mse))
                ph = score.mean_ph
            except RECOVERABLE:
                log_mse, ph = float("nan"), float("nan")
            points.append({**tag, "sigma_in": r.sigma_in, "rho": r.rho, "test_log_mse": log_mse, "test_ph": ph})
        return points

    def _save(self, mats, hp: EsnHyperparams, label: str, optimizer: str, index: int):
        trained = retrain(mats, hp, self.dataset, self.geometry.washout_steps, self.knowledge)
        extra = {"knowledge": None if self.knowledge is None else self.knowledge.to_dict()}
        name = f"net{index:03d}_{label.replace('*', 'star')}_{optimizer}.json"
        save_network(Path(self.out_dir) / "networks" / name, trained, hp, extra)


def _run_chunk(cfg: ExperimentConfig, dataset: TimeSeriesDataset, indices: Sequence[int], out_dir=None) -> List[NetworkOutcome]:
    runner = NetworkRunner(cfg, dataset, out_dir)
    outcomes = []
    for index in indices:
        logger.info("Network %d/%d", index + 1, cfg.n_ensemble)
        outcomes.append(runner.run(index))
    return outcomes


def run_networks(cfg: ExperimentConfig, dataset: TimeSeriesDataset, out_dir=None) -> List[NetworkOutcome]:
    """
    In-process for workers <= 1. Otherwise the networks are dealt round-robin to local
    submitit jobs; outcomes come back in network order either way.
    """
    indices = list(range(cfg.n_ensemble))
    workers = min(cfg.launcher.workers, len(indices))
    if workers <= 1:
        return _run_chunk(cfg, dataset, indices, out_dir)

    folder = ensure_output_dir(out_dir or cfg.output_dir, "submitit")
    executor = submitit.AutoExecutor(folder=str(folder), cluster="local")
    executor.update_parameters(timeout_min=cfg.launcher.timeout_min)
    chunks = [indices[i::workers] for i in range(workers)]
    logger.info("Submitting %d networks as %d local jobs (logs in %s)", len(indices), len(chunks), folder)
    jobs = [executor.submit(_run_chunk, cfg, dataset, chunk, out_dir) for chunk in chunks]
    outcomes = [outcome for job in jobs for outcome in job.result()]
    return sorted(outcomes, key=lambda o: o.index)


def _finite(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values[np.isfinite(values)]


def _safe_spearman(x, y) -> Optional[float]:
    try:
        return spearman(x, y)
    except (ZeroVariance, ShapeMismatch):
        return None


def _by_strategy(ensemble: EnsembleResult) -> Dict[str, List[NetworkResult]]:
    groups: Dict[str, List[NetworkResult]] = {}
    for r in ensemble.rows:
        groups.setdefault(r.strategy, [])
        if not r.error:
            groups[r.strategy].append(r)
    return groups


def spearman_table(ensemble: EnsembleResult) -> Dict[str, Optional[float]]:
    """
    Per strategy, rank correlation between validation and test MSE of the optimal
    hyperparameters, over the BO and GS optima of all networks together.
    """
    table = {}
    for strategy, rows in _by_strategy(ensemble).items():
        ordered = sorted(rows, key=lambda r: (r.optimizer != "BO", r.network))
        table[strategy] = _safe_spearman([r.val_mse for r in ordered], [r.test_mse for r in ordered])
    return table


def mse_ph_table(ensemble: EnsembleResult) -> Dict[str, Optional[float]]:
    table = {}
    for strategy, optimizer in ensemble.pairs():
        rows = [r for r in ensemble.select(strategy, optimizer) if math.isfinite(r.test_ph)]
        table[f"{strategy}/{optimizer}"] = _safe_spearman([r.test_mse for r in rows], [r.test_ph for r in rows])
    return table


def optimizer_ratios(ensemble: EnsembleResult) -> Dict[str, dict]:
    """Median BO optimum over median GS optimum, in validation and in test."""
    ratios = {}
    for strategy, rows in _by_strategy(ensemble).items():
        bo = [r for r in rows if r.optimizer == "BO"]
        gs = [r for r in rows if r.optimizer == "GS"]
        if not bo or not gs:
            continue
        ratios[strategy] = {
            "validation": float(np.median([r.val_mse for r in bo]) / np.median([r.val_mse for r in gs])),
            "test": float(np.median([r.test_mse for r in bo]) / np.median([r.test_mse for r in gs])),
        }
    return ratios


def cost_table(ensemble: EnsembleResult) -> Dict[str, dict]:
    costs = {}
    for strategy, rows in _by_strategy(ensemble).items():
        if not rows:
            continue
        costs[strategy] = {
            "solves_per_evaluation": float(np.mean([r.ridge_solves / max(r.n_evaluations, 1) for r in rows])),
            "mean_wall_time": float(np.mean([r.wall_time for r in rows])),
        }
    return costs


def summarize(ensemble: EnsembleResult) -> Dict[str, dict]:
    summary = {}
    for strategy, optimizer in ensemble.pairs():
        rows = ensemble.select(strategy, optimizer)
        if not rows:
            continue
        ph = _finite([r.test_ph for r in rows])
        scored = sum(r.ph_scored for r in rows)
        summary[f"{strategy}/{optimizer}"] = {
            "n": len(rows),
            "ph_censored_fraction": sum(r.ph_censored for r in rows) / scored if scored else None,
            "validation": aggregate([r.val_mse for r in rows]).to_dict(),
            "test": aggregate([r.test_mse for r in rows], ph if ph.size else None).to_dict(),
        }
    return summary


@dataclass
class ExperimentRecord:
    config: dict
    config_hash: str
    ensemble: EnsembleResult = field(default_factory=EnsembleResult)
    traces: List[dict] = field(default_factory=list)
    tests: List[dict] = field(default_factory=list)
    surfaces: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    spearman: dict = field(default_factory=dict)
    mse_ph_spearman: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)
    costs: dict = field(default_factory=dict)
    # wall-clock fields
    created: str = ""
    wall_time: float = 0.0

    def analyze(self) -> "ExperimentRecord":
        self.summary = summarize(self.ensemble)
        self.spearman = spearman_table(self.ensemble)
        self.mse_ph_spearman = mse_ph_table(self.ensemble)
        self.ratios = optimizer_ratios(self.ensemble)
        self.costs = cost_table(self.ensemble)
        return self

    def to_dict(self) -> dict:
        content = asdict(self)
        content["ensemble"] = [asdict(r) for r in self.ensemble.rows]
        return content

    @classmethod
    def from_dict(cls, content: dict) -> "ExperimentRecord":
        content = dict(content)
        content["ensemble"] = EnsembleResult.from_rows(content.get("ensemble", []))
        return cls(**content)


def run_experiment(cfg: ExperimentConfig, out_dir=None, dataset: Optional[TimeSeriesDataset] = None) -> ExperimentRecord:
    started = time.perf_counter()
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    logger.info(
        "Running %d networks x %d strategies x %d optimizers on %s",
        cfg.n_ensemble, len(cfg.strategies), len(cfg.optimizers), dataset.variant,
    )
    outcomes = run_networks(cfg, dataset, out_dir)

    record = ExperimentRecord(config=config_to_dict(cfg), config_hash=config_hash(cfg))
    for outcome in outcomes:
        record.ensemble.rows.extend(outcome.rows)
        record.traces.extend(outcome.traces)
        record.tests.extend(outcome.tests)
        record.surfaces.extend(outcome.surfaces)
    record.analyze()
    record.created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    record.wall_time = time.perf_counter() - started
    return record


def persist_record(record: ExperimentRecord, output_dir) -> Path:
    """Writes <output_dir>/<config hash>/record_<n>.json; existing records are never touched."""
    directory = ensure_output_dir(output_dir, record.config_hash)
    n = len(list(directory.glob("record_*.json")))
    while (directory / f"record_{n}.json").exists():
        n += 1
    path = directory / f"record_{n}.json"
    try:
        with open(path, "x") as f:
            json.dump(record.to_dict(), f, sort_keys=True, indent=1)
    except FileExistsError as e:
        raise RecordExists(f"record {path} already exists") from e
    logger.info("Saved experiment record to %s", path)
    return path


def load_record(path) -> ExperimentRecord:
    with open(path, "r") as f:
        return ExperimentRecord.from_dict(json.load(f))


@dataclass
class FixedHpStudy:
    strategy: str
    optimizer: str
    rows: pd.DataFrame
    summary: Dict[str, dict]
    ensemble_search: Optional[SearchResult] = None
    representative: Optional[int] = None


def _fixed_point_rows(mode: str, point, contexts, runner: NetworkRunner, schedule) -> List[dict]:
    rows = []
    for index, seed, hp0, mats in contexts:
        hp = hp0.at(*point)
        row = {"mode": mode, "network": index, "seed": seed, "sigma_in": float(point[0]), "rho": float(point[1])}
        try:
            row["val_objective"] = evaluate_objective(point, hp0, mats, schedule, runner.dataset, runner.knowledge)
            score = runner.test(mats, hp)
            row["test_mse"], row["test_ph"] = score.geo_mean_mse, score.mean_ph
        except RECOVERABLE as e:
            logger.warning("Network %d failed at the %s point: %s", index, mode, e)
            row.update(val_objective=float("nan"), test_mse=float("nan"), test_ph=float("nan"))
        rows.append(row)
    return rows


def run_fixed_hp_study(
    cfg: ExperimentConfig,
    record: Optional[ExperimentRecord] = None,
    strategy: Optional[str] = None,
    optimizer: Optional[str] = None,
    modes: Sequence[str] = FIXED_HP_MODES,
    dataset: Optional[TimeSeriesDataset] = None,
) -> FixedHpStudy:
    """
    Compares independently optimized networks with two shared-hyperparameter set-ups:
    the point minimizing the ensemble-mean validation objective (log10 of the geometric
    mean MSE), and the optimum of the representative network, the one whose independent
    validation objective is the ensemble median.
    """
    unknown = [m for m in modes if m not in FIXED_HP_MODES]
    if unknown:
        raise ConfigError(f"unknown fixed-hp modes {unknown}, choose from {FIXED_HP_MODES}")
    strategy = strategy or cfg.strategies[0]
    optimizer = optimizer or ("BO" if "BO" in cfg.optimizers else cfg.optimizers[0])
    dataset = dataset if dataset is not None else prepare_dataset(cfg)

    if record is None:
        study_cfg = copy.deepcopy(cfg)
        study_cfg.strategies, study_cfg.optimizers = [strategy], [optimizer]
        record = run_experiment(study_cfg, dataset=dataset)

    independent = sorted(record.ensemble.select(strategy, optimizer), key=lambda r: r.network)
    if not independent:
        raise EmptyInput(f"record holds no successful {strategy}/{optimizer} networks")

    runner = NetworkRunner(cfg, dataset)
    schedule = build_schedule_for(strategy, dataset, runner.geometry)
    contexts = []
    for r in independent:
        hp0 = base_hyperparams(cfg, r.seed)
        contexts.append((r.network, r.seed, hp0, init_matrices(hp0, dataset.n_u)))

    rows = []
    if "independent" in modes:
        rows.extend(
            {"mode": "independent", "network": r.network, "seed": r.seed, "sigma_in": r.sigma_in, "rho": r.rho,
             "val_objective": r.val_objective, "test_mse": r.test_mse, "test_ph": r.test_ph}
            for r in independent
        )

    ensemble_search = None
    if "fixed_ensemble_opt" in modes:
        objectives = [make_objective(hp0, mats, schedule, dataset, runner.knowledge) for _, _, hp0, mats in contexts]

        def ensemble_objective(point) -> float:
            return float(np.mean([objective(point) for objective in objectives]))

        ensemble_search = runner.optimize(ensemble_objective, optimizer, independent[0].seed)
        rows.extend(_fixed_point_rows("fixed_ensemble_opt", ensemble_search.best_point, contexts, runner, schedule))

    representative = None
    if "fixed_single_network" in modes:
        ranked = sorted(independent, key=lambda r: (r.val_objective, r.network))
        chosen = ranked[(len(ranked) - 1) // 2]
        representative = chosen.network
        rows.extend(_fixed_point_rows("fixed_single_network", (chosen.sigma_in, chosen.rho), contexts, runner, schedule))

    frame = pd.DataFrame(rows, columns=["mode", "network", "seed", "sigma_in", "rho", "val_objective", "test_mse", "test_ph"])
    summary = {}
    for mode, group in frame.groupby("mode", sort=False):
        ph = _finite(group["test_ph"])
        mses = _finite(group["test_mse"])
        if mses.size:
            summary[mode] = aggregate(mses, ph if ph.size else None).to_dict()
    return FixedHpStudy(strategy, optimizer, frame, summary, ensemble_search, representative)


def run_convergence_sweep(
    source: Union[ExperimentRecord, ExperimentConfig],
    axis: str,
    strategy: Optional[str] = None,
    optimizer: Optional[str] = None,
    sizes: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    """
    Quartiles as a function of ensemble size (validation MSE) or of the number of test
    starts (test PH, or test MSE when horizons are not scored).
    """
    if axis not in CONVERGENCE_AXES:
        raise ConfigError(f"unknown axis '{axis}', choose from {CONVERGENCE_AXES}")
    record = run_experiment(source) if isinstance(source, ExperimentConfig) else source
    strategy = strategy or record.config["strategies"][0]
    optimizer = optimizer or ("BO" if "BO" in record.config["optimizers"] else record.config["optimizers"][0])

    rows = sorted(record.ensemble.select(strategy, optimizer), key=lambda r: r.network)
    if not rows:
        raise EmptyInput(f"record holds no successful {strategy}/{optimizer} networks")

    table = []
    if axis == "n_ensemble":
        values = [r.val_mse for r in rows]
        for size in sizes or range(1, len(values) + 1):
            if not 1 <= size <= len(values):
                raise ConfigError(f"ensemble size {size} outside [1, {len(values)}]")
            table.append({"size": size, "metric": "val_mse", **{f"p{q}": v for q, v in percentiles(values[:size]).items()}})
        return pd.DataFrame(table)

    tests = pd.DataFrame(record.tests, columns=TEST_COLUMNS)
    tests = tests[(tests.strategy == strategy) & (tests.optimizer == optimizer)]
    per_network = [group.sort_values("start") for _, group in tests.groupby("network")]
    if not per_network:
        raise EmptyInput("record holds no per-start test results")
    use_ph = bool(np.isfinite(per_network[0]["ph"]).any())
    n_starts = min(len(group) for group in per_network)
    for size in sizes or range(1, n_starts + 1):
        if not 1 <= size <= n_starts:
            raise ConfigError(f"number of test starts {size} outside [1, {n_starts}]")
        if use_ph:
            values = [float(group["ph"].iloc[:size].mean()) for group in per_network]
        else:
            values = [geometric_mean(group["mse"].iloc[:size]) for group in per_network]
        metric = "test_ph" if use_ph else "test_mse"
        table.append({"size": size, "metric": metric, **{f"p{q}": v for q, v in percentiles(values).items()}})
    return pd.DataFrame(table)


def run_cost_study(cfg: ExperimentConfig, network: int = 0, grid_shape: Sequence[int] = (7, 7), dataset: Optional[TimeSeriesDataset] = None) -> pd.DataFrame:
    """Times a full grid search per strategy for one network and counts its ridge solves."""
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    runner = NetworkRunner(cfg, dataset)
    hp0 = base_hyperparams(cfg, network_seed(cfg, network))
    mats = init_matrices(hp0, dataset.n_u)

    rows = []
    for label in cfg.strategies:
        schedule = build_schedule_for(label, dataset, runner.geometry)
        counter = SolveCounter()
        objective = make_objective(hp0, mats, schedule, dataset, runner.knowledge, counter)
        started = time.perf_counter()
        result = grid_search(objective, runner.space, tuple(grid_shape))
        elapsed = time.perf_counter() - started
        rows.append({
            "strategy": label,
            "n_folds": len(schedule.folds),
            "evaluations": result.n_evaluations,
            "ridge_solves": counter.count,
            "solves_per_evaluation": counter.count / result.n_evaluations,
            "wall_time": elapsed,
        })
        logger.info("%s: %d solves in %.2fs", label, counter.count, elapsed)
    return pd.DataFrame(rows)


def json_safe(value):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def _surface_frame(record: ExperimentRecord) -> pd.DataFrame:
    space = search_space(config_from_dict(record.config))
    traces = pd.DataFrame(record.traces, columns=TRACE_EXPORT_COLUMNS)
    points = pd.DataFrame(record.surfaces, columns=SURFACE_POINT_COLUMNS)
    frames = []
    for (network, strategy, optimizer), group in traces.groupby(["network", "strategy", "optimizer"], sort=True):
        sets = [("validation", group[["sigma_in", "rho"]].to_numpy(), group["objective"].to_numpy())]
        mine = points[(points.network == network) & (points.strategy == strategy) & (points.optimizer == optimizer)]
        for name, column in (("test_mse", "test_log_mse"), ("test_ph", "test_ph")):
            ok = mine[np.isfinite(mine[column])]
            if len(ok):
                sets.append((name, ok[["sigma_in", "rho"]].to_numpy(), ok[column].to_numpy()))
        for name, xy, values in sets:
            try:
                surface = posterior_surface(space, xy, values, SURFACE_SIZE)
            except RECOVERABLE as e:
                logger.warning("No %s surface for network %d %s/%s: %s", name, network, strategy, optimizer, e)
                continue
            surface.insert(0, "set", name)
            surface.insert(0, "optimizer", optimizer)
            surface.insert(0, "strategy", strategy)
            surface.insert(0, "network", network)
            frames.append(surface)
    if not frames:
        return pd.DataFrame(columns=SURFACE_COLUMNS)
    return pd.concat(frames, ignore_index=True)[SURFACE_COLUMNS]


def render_report(record: ExperimentRecord) -> str:
    env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), trim_blocks=True, lstrip_blocks=True)
    template = env.get_template("report.md.jinja2")
    return template.render(record=json_safe(record.to_dict()))


def export(record: ExperimentRecord, out_dir, formats: Sequence[str] = ("csv", "json", "report")) -> List[Path]:
    """Writes the requested artifacts into out_dir; the same record always gives the same bytes."""
    unknown = [f for f in formats if f not in EXPORT_FORMATS]
    if unknown:
        raise ConfigError(f"unknown export formats {unknown}, choose from {EXPORT_FORMATS}")
    out = ensure_output_dir(out_dir)
    written = []

    if "csv" in formats:
        record.ensemble.to_frame().to_csv(out / "results.csv", index=False)
        pd.DataFrame(record.tests, columns=TEST_COLUMNS).to_csv(out / "tests.csv", index=False)
        written += [out / "results.csv", out / "tests.csv"]
    if "traces" in formats:
        pd.DataFrame(record.traces, columns=TRACE_EXPORT_COLUMNS).to_csv(out / "traces.csv", index=False)
        written.append(out / "traces.csv")
    if "surfaces" in formats:
        _surface_frame(record).to_csv(out / "surfaces.csv", index=False)
        written.append(out / "surfaces.csv")
    if "json" in formats:
        content = {
            "config_hash": record.config_hash,
            "preset": record.config.get("preset"),
            "n_ensemble": record.config.get("n_ensemble"),
            "summary": record.summary,
            "spearman": record.spearman,
            "mse_ph_spearman": record.mse_ph_spearman,
            "ratios": record.ratios,
            "costs": record.costs,
        }
        with open(out / "summary.json", "w") as f:
            json.dump(json_safe(content), f, sort_keys=True, indent=2)
        written.append(out / "summary.json")
    if "report" in formats:
        (out / "report.md").write_text(render_report(record))
        written.append(out / "report.md")

    for path in written:
        logger.debug("Wrote %s", path)
    return written
