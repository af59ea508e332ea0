"""
Fold schedules for Single Shot (SSV), Walk Forward (WFV), K-Fold (KFV) and Recycle (RV)
validation, and the validation objective: the mean over folds of log10 of the closed-loop
MSE on each validation interval.

All ranges are half-open [start, stop) row indices into the washout + training +
validation span of a dataset. Training ranges index prediction targets: the target at
row t is predicted from the reservoir state after input row t - 1.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dynamics import TimeSeriesDataset
from .errors import ConfigError, DatasetTooShort
from .metrics import mse
from .reservoir import (
    EsnHyperparams,
    ReservoirMatrices,
    SolveCounter,
    run_closed_loop,
    run_open_loop,
    train_ridge,
    warm_start,
)

logger = logging.getLogger(__name__)

LOG_MSE_FLOOR = -16.0
LOG_MSE_CAP = 6.0

IndexRange = Tuple[int, int]


class Strategy(str, Enum):
    SSV = "SSV"
    WFV = "WFV"
    KFV = "KFV"
    RV = "RV"


@dataclass(frozen=True)
class StrategySpec:
    strategy: Strategy
    chaotic: bool = False
    # walk forward with the training window pinned to the dataset start
    anchored: bool = False

    @property
    def label(self) -> str:
        label = self.strategy.value
        if self.chaotic:
            label += "_c"
        if self.anchored:
            label += "*"
        return label


STRATEGY_LABELS = ("SSV", "WFV", "WFV_c", "WFV_c*", "KFV", "KFV_c", "RV", "RV_c")


def parse_strategy(label: str) -> StrategySpec:
    if label not in STRATEGY_LABELS:
        raise ConfigError(f"unknown strategy '{label}', choose from {', '.join(STRATEGY_LABELS)}")
    anchored = label.endswith("*")
    base, _, suffix = label.rstrip("*").partition("_")
    return StrategySpec(Strategy(base), chaotic=suffix == "c", anchored=anchored)


@dataclass(frozen=True)
class ScheduleGeometry:
    """Validation geometry in network steps."""
    v_steps: int
    washout_steps: int
    chaotic_shift_steps: int
    # training window of walk forward folds
    train_steps: int = 0
    # training block of the single shot split; None means everything before the last v_steps
    ssv_train_steps: Optional[int] = None
    # KFV/RV offset; None picks the smallest offset fitting whole intervals
    offset: Optional[int] = None

    def __post_init__(self):
        if self.v_steps < 1:
            raise ConfigError("validation interval must span at least one step")
        if self.washout_steps < 0 or self.chaotic_shift_steps < 1:
            raise ConfigError("washout must be >= 0 and the chaotic shift >= 1 step")


def geometry_from_lt(
    dataset: TimeSeriesDataset,
    v_lt: float,
    washout_lt: float = 1.0,
    chaotic_shift_lt: float = 1.0,
    train_lt: float = 0.0,
    ssv_train_lt: Optional[float] = None,
    offset_lt: Optional[float] = None,
) -> ScheduleGeometry:
    to_steps = dataset.lt_to_steps
    return ScheduleGeometry(
        v_steps=to_steps(v_lt),
        washout_steps=to_steps(washout_lt),
        chaotic_shift_steps=to_steps(chaotic_shift_lt),
        train_steps=to_steps(train_lt),
        ssv_train_steps=None if ssv_train_lt is None else to_steps(ssv_train_lt),
        offset=None if offset_lt is None else to_steps(offset_lt),
    )


@dataclass(frozen=True)
class Fold:
    # open-loop span feeding the closed-loop start state, right before the scored interval
    washout: IndexRange
    # harvested targets of each training block; block i starts at train_washout[i][0]
    train: Tuple[IndexRange, ...]
    val: IndexRange
    train_washout: Tuple[IndexRange, ...] = ()
    # leading steps of val spent as washout because no data precedes them
    val_trim: int = 0

    @property
    def scored_val(self) -> IndexRange:
        return self.val[0] + self.val_trim, self.val[1]


@dataclass(frozen=True)
class FoldSchedule:
    strategy: Strategy
    chaotic: bool
    folds: Tuple[Fold, ...]
    v_steps: int
    shift_steps: int
    n_steps: int
    anchored: bool = False
    offset: int = 0

    @property
    def label(self) -> str:
        return StrategySpec(self.strategy, self.chaotic, self.anchored).label

    @property
    def trains_once(self) -> bool:
        return self.strategy is Strategy.RV

    def to_dict(self, steps_per_lt: Optional[int] = None) -> dict:
        def lt(r):
            return [r[0] / steps_per_lt, r[1] / steps_per_lt]

        folds = []
        for fold in self.folds:
            entry = {
                "washout": list(fold.washout),
                "train": [list(r) for r in fold.train],
                "train_washout": [list(r) for r in fold.train_washout],
                "val": list(fold.val),
                "val_trim": fold.val_trim,
            }
            if steps_per_lt:
                entry["lt"] = {
                    "washout": lt(fold.washout),
                    "train": [lt(r) for r in fold.train],
                    "train_washout": [lt(r) for r in fold.train_washout],
                    "val": lt(fold.val),
                    "scored_val": lt(fold.scored_val),
                }
            folds.append(entry)
        return {
            "strategy": self.label,
            "n_folds": len(self.folds),
            "v_steps": self.v_steps,
            "shift_steps": self.shift_steps,
            "offset": self.offset,
            "n_steps": self.n_steps,
            "steps_per_lt": steps_per_lt,
            "folds": folds,
        }


def _blocks(start: int, stop: int, washout: int):
    """A contiguous training block: leading washout, then harvested targets."""
    # the first row of a block has no reservoir state before it
    first = start + max(washout, 1)
    if stop <= first:
        return None
    return (start, start + washout), (first, stop)


def _fold(blocks: Sequence[IndexRange], val: IndexRange, washout: int, val_trim: int = 0) -> Fold:
    train, train_washout = [], []
    for start, stop in blocks:
        parts = _blocks(start, stop, washout)
        if parts:
            train_washout.append(parts[0])
            train.append(parts[1])
    scored = val[0] + val_trim
    return Fold(
        washout=(max(scored - washout, 0), scored),
        train=tuple(train),
        val=val,
        train_washout=tuple(train_washout),
        val_trim=val_trim,
    )


def kfold_offset(n: int, v: int, shift: int) -> int:
    return (n - v) % shift


def build_schedule(strategy, chaotic: bool, data: Union[TimeSeriesDataset, int], cfg: ScheduleGeometry, anchored: bool = False) -> FoldSchedule:
    """
    Enumerates the folds of one validation strategy over `data` (a dataset, using its
    washout + training + validation span, or a bare step count).
    """
    strategy = Strategy(strategy)
    n = data.trainval_steps if isinstance(data, TimeSeriesDataset) else int(data)
    v, w = cfg.v_steps, cfg.washout_steps
    shift = cfg.chaotic_shift_steps if chaotic else v
    if anchored and strategy is not Strategy.WFV:
        raise ConfigError("only walk forward validation has an anchored variant")

    folds: List[Fold] = []
    offset = 0
    if strategy is Strategy.SSV:
        train_steps = n - v if cfg.ssv_train_steps is None else cfg.ssv_train_steps
        if cfg.ssv_train_steps is None and train_steps <= w:
            raise DatasetTooShort(v + w + 1, n, "single shot validation")
        if train_steps <= w:
            raise ConfigError(f"single shot training block ({train_steps} steps) must exceed the washout ({w})")
        if n < train_steps + v:
            raise DatasetTooShort(train_steps + v, n, "single shot validation")
        folds.append(_fold([(0, train_steps)], (train_steps, train_steps + v), w))
        shift = v

    elif strategy is Strategy.WFV:
        m = cfg.train_steps + v
        if cfg.train_steps <= w:
            raise ConfigError(f"walk forward training window ({cfg.train_steps} steps) must exceed the washout ({w})")
        if n < m:
            raise DatasetTooShort(m, n, "walk forward validation")
        shift = cfg.chaotic_shift_steps if (chaotic or anchored) else v
        for j in range((n - m) // shift + 1):
            start = 0 if anchored else j * shift
            val_start = cfg.train_steps + j * shift
            folds.append(_fold([(start, val_start)], (val_start, val_start + v), w))

    else:
        min_start = max(w, 1)
        required = v + 2 * w + 1
        if n < max(required, v + min_start):
            raise DatasetTooShort(max(required, v + min_start), n, f"{strategy.value} validation")
        offset = kfold_offset(n, v, shift) if cfg.offset is None else cfg.offset
        if offset + v > n:
            raise DatasetTooShort(offset + v, n, f"{strategy.value} validation with offset {offset}")
        for j in range((n - v - offset) // shift + 1):
            val = (offset + j * shift, offset + j * shift + v)
            # an interval too close to the start spends its head as washout
            trim = max(min_start - val[0], 0)
            if val[0] + trim >= val[1]:
                continue
            blocks = [(0, n)] if strategy is Strategy.RV else [(0, val[0]), (val[1], n)]
            folds.append(_fold(blocks, val, w, trim))
        if not folds:
            raise DatasetTooShort(v + min_start, n - offset, f"{strategy.value} validation with offset {offset}")

    for i, fold in enumerate(folds):
        if not fold.train:
            raise DatasetTooShort(v + 2 * w + 1, n, f"training data of fold {i}")

    return FoldSchedule(
        strategy=strategy,
        chaotic=chaotic,
        folds=tuple(folds),
        v_steps=v,
        shift_steps=shift,
        n_steps=n,
        anchored=anchored,
        offset=offset,
    )


def build_schedule_for(label: str, data: Union[TimeSeriesDataset, int], cfg: ScheduleGeometry) -> FoldSchedule:
    spec = parse_strategy(label)
    return build_schedule(spec.strategy, spec.chaotic, data, cfg, anchored=spec.anchored)


def clamp_log_mse(value: float) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        log_value = np.log10(value)
    if np.isnan(log_value) or log_value == np.inf:
        return LOG_MSE_CAP
    return float(np.clip(log_value, LOG_MSE_FLOOR, LOG_MSE_CAP))


def _train_columns(ranges: Sequence[IndexRange]) -> Tuple[np.ndarray, np.ndarray]:
    targets = np.concatenate([np.arange(a, b) for a, b in ranges])
    return targets - 1, targets


@dataclass
class TeacherForcedRun:
    """
    One open-loop pass over a data span from the zero state. Column i of `states`
    is r_hat after input row i, so it predicts row i + 1.
    """
    u: np.ndarray
    states: np.ndarray

    @classmethod
    def over(cls, mats: ReservoirMatrices, hp: EsnHyperparams, u: np.ndarray, knowledge=None) -> "TeacherForcedRun":
        states, _ = run_open_loop(mats, hp, u[:-1], 0, knowledge)
        return cls(u=u, states=states)

    def harvest(self, ranges: Sequence[IndexRange]) -> Tuple[np.ndarray, np.ndarray]:
        """(R, U_d) for the target rows in `ranges`, indexed relative to this run."""
        columns, targets = _train_columns(ranges)
        return self.states[:, columns], self.u[targets].T

    def fit(self, ranges: Sequence[IndexRange], beta_tik: float, counter: Optional[SolveCounter] = None) -> np.ndarray:
        return train_ridge(*self.harvest(ranges), beta_tik, counter)


def fit_fold(
    mats: ReservoirMatrices,
    hp: EsnHyperparams,
    u: np.ndarray,
    fold: Fold,
    knowledge: Optional[Callable] = None,
    counter: Optional[SolveCounter] = None,
) -> np.ndarray:
    """
    Ridge readout over all training blocks of `fold`. Each block gets its own open-loop
    pass from the zero state, starting at its washout, so no state leaks across a gap.
    """
    states, targets = [], []
    for (origin, _), (first, stop) in zip(fold.train_washout, fold.train):
        R, U_d = TeacherForcedRun.over(mats, hp, u[origin:stop], knowledge).harvest([(first - origin, stop - origin)])
        states.append(R)
        targets.append(U_d)
    return train_ridge(np.hstack(states), np.hstack(targets), hp.beta_tik, counter)


def evaluate_objective(
    hp_point,
    fixed_hp: EsnHyperparams,
    mats: ReservoirMatrices,
    schedule: FoldSchedule,
    dataset: TimeSeriesDataset,
    knowledge: Optional[Callable] = None,
    counter: Optional[SolveCounter] = None,
) -> float:
    """
    Mean log10 MSE over the schedule's validation intervals for (sigma_in, rho) = hp_point.
    Each log10 MSE is floored at -16 and capped at +6; a non-finite rollout scores +6.
    """
    hp = fixed_hp.at(*hp_point)
    u = dataset.trainval()[: schedule.n_steps]

    w_out = fit_fold(mats, hp, u, schedule.folds[0], knowledge, counter) if schedule.trains_once else None
    scores = []
    for fold in schedule.folds:
        trained = mats.with_readout(w_out if w_out is not None else fit_fold(mats, hp, u, fold, knowledge, counter))
        origin = fold.washout[0]
        start, stop = fold.scored_val
        # open loop over the washout up to row start - 2; row start - 1 seeds the closed loop
        state = warm_start(trained, hp, u[origin : start - 1], knowledge)
        predictions = run_closed_loop(trained, hp, state, u[start - 1], stop - start, knowledge)
        with np.errstate(over="ignore", invalid="ignore"):
            scores.append(clamp_log_mse(mse(predictions, u[start:stop])))
    return float(np.mean(scores))


def make_objective(fixed_hp: EsnHyperparams, mats: ReservoirMatrices, schedule: FoldSchedule, dataset: TimeSeriesDataset, knowledge=None, counter=None):
    """Binds everything but the (sigma_in, rho) point."""
    def objective(hp_point) -> float:
        return evaluate_objective(hp_point, fixed_hp, mats, schedule, dataset, knowledge, counter)

    return objective
