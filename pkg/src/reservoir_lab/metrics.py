"""
Scoring of predictions: MSE, prediction horizon, Spearman rank correlation and the
ensemble statistics the studies report.
"""
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .dynamics import TimeSeriesDataset
from .errors import DatasetTooShort, EmptyInput, ShapeMismatch, ZeroVariance

logger = logging.getLogger(__name__)

PH_THRESHOLD = 0.2
MSE_FLOOR = 1e-16
PERCENTILES = (25, 50, 75)


def _paired(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and truth {truth.shape} differ")
    if pred.ndim != 2 or pred.shape[0] < 1:
        raise ShapeMismatch(f"expected a non-empty [steps x components] array, got {pred.shape}")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.mean((pred - truth) ** 2))


@dataclass(frozen=True)
class Horizon:
    lt: float
    steps: int
    # the threshold was never crossed, so `lt` is only a lower bound
    censored: bool


def prediction_horizon(pred, truth, k: float = PH_THRESHOLD, dt_network: float = 1.0, lyapunov_time: float = 1.0) -> Horizon:
    """
    Time until ||pred - truth|| / sqrt(mean_t ||truth||^2) first reaches k, in Lyapunov
    times. The normalization averages over the whole interval.
    """
    pred, truth = _paired(pred, truth)
    if not k > 0:
        raise ValueError(f"threshold must be positive, got {k}")

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        error = np.linalg.norm(pred - truth, axis=1)
        scale = np.sqrt(np.mean(np.sum(truth**2, axis=1)))
        if scale > 0:
            normalized = error / scale
        else:
            normalized = np.where(error > 0, np.inf, 0.0)
    # nan counts as crossed
    crossed = np.flatnonzero(~(normalized < k))
    steps = int(crossed[0]) if crossed.size else pred.shape[0]
    return Horizon(lt=steps * dt_network / lyapunov_time, steps=steps, censored=not crossed.size)


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatch(f"spearman needs two vectors of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ShapeMismatch("spearman needs at least two observations")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise ZeroVariance("a ranking is constant")
    return float(np.corrcoef(rx, ry)[0, 1])


def geometric_mean(values) -> float:
    values = np.maximum(np.asarray(values, dtype=float), MSE_FLOOR)
    return float(10 ** np.mean(np.log10(values)))


def percentiles(values, qs: Sequence[int] = PERCENTILES) -> Dict[int, float]:
    values = np.asarray(values, dtype=float)
    return {q: float(np.percentile(values, q)) for q in qs}


@dataclass(frozen=True)
class AggregateStats:
    geo_mean_mse: float
    mse_percentiles: Dict[int, float]
    mean_ph: Optional[float] = None
    ph_percentiles: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "geo_mean_mse": self.geo_mean_mse,
            "mse_percentiles": {str(q): v for q, v in self.mse_percentiles.items()},
            "mean_ph": self.mean_ph,
            "ph_percentiles": {str(q): v for q, v in self.ph_percentiles.items()},
        }


def aggregate(mse_values, ph_values=None) -> AggregateStats:
    """Geometric mean MSE, arithmetic mean PH and their quartiles."""
    mse_values = np.asarray(mse_values, dtype=float).ravel()
    if mse_values.size == 0:
        raise EmptyInput("nothing to aggregate")
    ph_values = None if ph_values is None else np.asarray(ph_values, dtype=float).ravel()
    if ph_values is not None and ph_values.size == 0:
        ph_values = None
    return AggregateStats(
        geo_mean_mse=geometric_mean(mse_values),
        mse_percentiles=percentiles(mse_values),
        mean_ph=None if ph_values is None else float(np.mean(ph_values)),
        ph_percentiles={} if ph_values is None else percentiles(ph_values),
    )


@dataclass(frozen=True)
class TestSuite:
    """
    Equally spaced test starting points, each preceded by its own washout. MSE is scored
    over `interval_steps`; the horizon over `ph_steps`, which may be longer so that good
    networks are not censored at the MSE interval.
    """
    start_indices: tuple
    interval_steps: int
    k_threshold: float = PH_THRESHOLD
    washout_steps: int = 0
    # quasiperiodic predictions never lose track, so their horizon is not scored
    score_ph: bool = True
    ph_steps: Optional[int] = None

    __test__ = False

    @property
    def rollout_steps(self) -> int:
        if not self.score_ph or self.ph_steps is None:
            return self.interval_steps
        return max(self.interval_steps, self.ph_steps)

    def intervals(self):
        return [(s, s + self.interval_steps) for s in self.start_indices]


def make_test_suite(
    dataset: TimeSeriesDataset,
    start_lt: float,
    spacing_lt: float,
    interval_lt: float,
    n_starts: int,
    washout_lt: float = 1.0,
    k_threshold: float = PH_THRESHOLD,
    score_ph: bool = True,
    ph_interval_lt: Optional[float] = None,
) -> TestSuite:
    start = dataset.lt_to_steps(start_lt)
    spacing = dataset.lt_to_steps(spacing_lt)
    interval = dataset.lt_to_steps(interval_lt)
    washout = dataset.lt_to_steps(washout_lt)
    ph_steps = None if ph_interval_lt is None else dataset.lt_to_steps(ph_interval_lt)
    if n_starts < 1 or interval < 1:
        raise EmptyInput("a test suite needs at least one non-empty interval")
    if ph_steps is not None and ph_steps < interval:
        raise ValueError(f"horizon interval ({ph_steps} steps) is shorter than the MSE interval ({interval})")
    if start < washout + 1:
        raise DatasetTooShort(washout + 1, start, "test washout before the first start")
    suite = TestSuite(tuple(start + j * spacing for j in range(n_starts)), interval, k_threshold, washout, score_ph, ph_steps)
    last_stop = suite.start_indices[-1] + suite.rollout_steps
    if last_stop > dataset.n_steps:
        raise DatasetTooShort(last_stop, dataset.n_steps, "test suite")
    return suite


@dataclass
class NetworkResult:
    """One row per (network, strategy, optimizer)."""
    network: int
    seed: int
    strategy: str
    optimizer: str
    sigma_in: float = float("nan")
    rho: float = float("nan")
    val_objective: float = float("nan")
    val_mse: float = float("nan")
    test_mse: float = float("nan")
    test_ph: float = float("nan")
    ph_censored: int = 0
    ph_scored: int = 0
    n_evaluations: int = 0
    ridge_solves: int = 0
    wall_time: float = 0.0
    error: str = ""


RESULT_COLUMNS = [f.name for f in fields(NetworkResult)]


@dataclass
class EnsembleResult:
    rows: List[NetworkResult] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=RESULT_COLUMNS)

    def select(self, strategy: str, optimizer: str) -> List[NetworkResult]:
        return [r for r in self.rows if r.strategy == strategy and r.optimizer == optimizer and not r.error]

    def pairs(self):
        """The (strategy, optimizer) pairs in first-seen order."""
        seen = {}
        for r in self.rows:
            seen.setdefault((r.strategy, r.optimizer), None)
        return list(seen)

    @classmethod
    def from_rows(cls, rows) -> "EnsembleResult":
        return cls([r if isinstance(r, NetworkResult) else NetworkResult(**r) for r in rows])
