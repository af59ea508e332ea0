"""
Dynamical systems used as data sources: the Lorenz system and the Kuznetsov
oscillator, integrated with forward Euler and normalized by their maximum variation.

Time is bookkept in Lyapunov times (LT): every dataset carries its LT and the
number of network steps per LT, and all slicing downstream is expressed in steps.
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DegenerateSignal, DimensionMismatch, NonFiniteState

logger = logging.getLogger(__name__)


class SystemName(str, Enum):
    LORENZ = "lorenz"
    KUZNETSOV = "kuznetsov"
    # q' = a * q componentwise; used to check integrators against closed forms
    LINEAR = "linear"


class NormMode(str, Enum):
    GLOBAL = "global"
    COMPONENTWISE = "componentwise"


LORENZ_PARAMS = (10.0, 8.0 / 3.0, 28.0)
KUZNETSOV_QUASIPERIODIC_MU = 0.9
KUZNETSOV_CHAOTIC_MU = 0.5


@dataclass(frozen=True)
class OdeSystem:
    name: SystemName
    params: Tuple[float, ...]
    state_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "name", SystemName(self.name))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.name is SystemName.LINEAR:
            object.__setattr__(self, "state_dim", len(self.params))
        elif self.state_dim != 3 or len(self.params) != 3:
            raise DimensionMismatch(f"{self.name.value} takes 3 parameters and a 3-d state")


def lorenz(sigma: float = 10.0, beta: float = 8.0 / 3.0, rho: float = 28.0) -> OdeSystem:
    return OdeSystem(SystemName.LORENZ, (sigma, beta, rho))


def kuznetsov(mu: float = KUZNETSOV_QUASIPERIODIC_MU, lam: float = 0.0, omega0: float = 2.7) -> OdeSystem:
    return OdeSystem(SystemName.KUZNETSOV, (lam, omega0, mu))


def linear(rates: Sequence[float]) -> OdeSystem:
    return OdeSystem(SystemName.LINEAR, tuple(rates))


def ode_rhs(system: OdeSystem, q) -> np.ndarray:
    """
    Evaluates f(q). Works on a single state or on a stack of states (..., state_dim).
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != system.state_dim:
        raise DimensionMismatch(f"state has {q.shape[-1]} components, {system.name.value} needs {system.state_dim}")

    if system.name is SystemName.LORENZ:
        sigma, beta, rho = system.params
        x, y, z = q[..., 0], q[..., 1], q[..., 2]
        return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)

    if system.name is SystemName.KUZNETSOV:
        lam, omega0, mu = system.params
        x, y, z = q[..., 0], q[..., 1], q[..., 2]
        dy = y * (lam + z + x**2 - 0.5 * x**4) - omega0**2 * x
        return np.stack([y, dy, mu - x**2], axis=-1)

    return np.asarray(system.params) * q


@dataclass(frozen=True)
class TrajectoryConfig:
    dt_integrator: float
    subsample: int
    n_network_steps: int
    initial_condition: Tuple[float, ...]
    transient_steps: int = 0

    def __post_init__(self):
        if self.dt_integrator <= 0:
            raise ValueError("dt_integrator must be positive")
        if self.subsample < 1:
            raise ValueError("subsample must be >= 1")
        if self.transient_steps < 0 or self.n_network_steps < 0:
            raise ValueError("step counts cannot be negative")

    @property
    def dt_network(self) -> float:
        return self.dt_integrator * self.subsample


def integrate_forward_euler(system: OdeSystem, cfg: TrajectoryConfig) -> np.ndarray:
    """
    q_{k+1} = q_k + dt f(q_k). The first transient_steps network steps are discarded,
    then the state after every `subsample` integrator steps is recorded, so row k is the
    state (transient_steps + k + 1) * subsample integrator steps after the initial one.
    """
    q = np.array(cfg.initial_condition, dtype=float)
    if q.shape != (system.state_dim,):
        raise DimensionMismatch(f"initial condition has shape {q.shape}, expected ({system.state_dim},)")

    dt = cfg.dt_integrator
    out = np.empty((cfg.n_network_steps, system.state_dim))
    step = 0

    def advance(n):
        nonlocal q, step
        for _ in range(n):
            q = q + dt * ode_rhs(system, q)
            step += 1
            if not math.isfinite(q.sum()):
                raise NonFiniteState(step, q)

    advance(cfg.transient_steps * cfg.subsample)
    for row in range(cfg.n_network_steps):
        advance(cfg.subsample)
        out[row] = q
    return out


@dataclass(frozen=True)
class NormRecord:
    offsets: np.ndarray
    scales: np.ndarray
    mode: NormMode = NormMode.GLOBAL


@dataclass(frozen=True)
class TimeSeriesDataset:
    u: np.ndarray
    dt_network: float
    lyapunov_time: float
    norm_record: NormRecord
    name: str = "custom"
    variant: str = "custom"
    seed: int = 0
    trainval_steps: Optional[int] = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.ndim != 2 or u.shape[0] < 2:
            raise DimensionMismatch(f"a dataset needs at least 2 rows of a 2-d array, got shape {u.shape}")
        if not np.all(np.isfinite(u)):
            raise DegenerateSignal("dataset contains non-finite entries")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        if self.steps_per_lt < 1:
            raise ValueError("a Lyapunov time must span at least one network step")
        if self.trainval_steps is None:
            object.__setattr__(self, "trainval_steps", u.shape[0])
        elif not 2 <= self.trainval_steps <= u.shape[0]:
            raise DimensionMismatch(f"trainval_steps={self.trainval_steps} outside the dataset")

    @property
    def n_steps(self) -> int:
        return self.u.shape[0]

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def steps_per_lt(self) -> int:
        return int(round(self.lyapunov_time / self.dt_network))

    def lt_to_steps(self, lt: float) -> int:
        return int(round(lt * self.steps_per_lt))

    def time_lt(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt_network / self.lyapunov_time

    def trainval(self) -> np.ndarray:
        """The washout + training + validation span."""
        return self.u[: self.trainval_steps]

    def denormalize(self, u=None) -> np.ndarray:
        u = self.u if u is None else np.asarray(u, dtype=float)
        return u * self.norm_record.scales + self.norm_record.offsets


def normalize_max_variation(raw, mode=NormMode.GLOBAL, dt_network: float = 1.0, lyapunov_time: float = 1.0, **metadata) -> TimeSeriesDataset:
    """
    Divides the signal by its maximum variation: by the largest component range in
    global mode, by each component's own range in componentwise mode. Offsets are zero.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] < 2:
        raise DimensionMismatch(f"normalization needs at least 2 rows, got shape {raw.shape}")
    mode = NormMode(mode)
    ranges = raw.max(axis=0) - raw.min(axis=0)

    if mode is NormMode.GLOBAL:
        if ranges.max() <= 0:
            raise DegenerateSignal("signal has zero variation")
        scales = np.full(raw.shape[1], ranges.max())
    else:
        if np.any(ranges <= 0):
            raise DegenerateSignal(f"components {np.flatnonzero(ranges <= 0).tolist()} have zero variation")
        scales = ranges

    record = NormRecord(offsets=np.zeros(raw.shape[1]), scales=scales, mode=mode)
    return TimeSeriesDataset(u=raw / scales, dt_network=dt_network, lyapunov_time=lyapunov_time, norm_record=record, **metadata)


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe of a named dataset variant."""
    system: OdeSystem
    dt_integrator: float
    subsample: int
    lyapunov_time: float
    trainval_lt: float
    test_start_lt: float
    test_spacing_lt: float
    test_interval_lt: float
    n_test_starts: int
    norm_mode: NormMode
    canonical_ic: Tuple[float, ...]
    transient_lt: float = 100.0
    ic_noise: float = 1e-3
    # closed-loop horizon scoring may run past the MSE interval
    test_ph_interval_lt: Optional[float] = None

    @property
    def steps_per_lt(self) -> int:
        return int(round(self.lyapunov_time / (self.dt_integrator * self.subsample)))

    @property
    def total_lt(self) -> float:
        rollout_lt = max(self.test_interval_lt, self.test_ph_interval_lt or 0.0)
        test_end = self.test_start_lt + (self.n_test_starts - 1) * self.test_spacing_lt + rollout_lt
        return max(self.trainval_lt, test_end)


_LORENZ_DT = 0.009 * 1.1

DATASET_VARIANTS = {
    "lorenz_short": DatasetSpec(
        system=lorenz(), dt_integrator=_LORENZ_DT, subsample=1, lyapunov_time=1.1,
        trainval_lt=12.0, test_start_lt=24.0, test_spacing_lt=3.0, test_interval_lt=3.0,
        n_test_starts=100, norm_mode=NormMode.GLOBAL, canonical_ic=(1.0, 1.0, 1.0), test_ph_interval_lt=10.0,
    ),
    "lorenz_long": DatasetSpec(
        system=lorenz(), dt_integrator=_LORENZ_DT, subsample=1, lyapunov_time=1.1,
        trainval_lt=24.0, test_start_lt=24.0, test_spacing_lt=3.0, test_interval_lt=3.0,
        n_test_starts=100, norm_mode=NormMode.GLOBAL, canonical_ic=(1.0, 1.0, 1.0), test_ph_interval_lt=10.0,
    ),
    "kuznetsov_quasiperiodic": DatasetSpec(
        system=kuznetsov(KUZNETSOV_QUASIPERIODIC_MU), dt_integrator=0.0025, subsample=20, lyapunov_time=25.0,
        trainval_lt=7.5, test_start_lt=7.5, test_spacing_lt=2.0, test_interval_lt=2.0,
        n_test_starts=50, norm_mode=NormMode.COMPONENTWISE, canonical_ic=(1.0, 0.0, 0.0),
    ),
    "kuznetsov_chaotic": DatasetSpec(
        system=kuznetsov(KUZNETSOV_CHAOTIC_MU), dt_integrator=0.0025, subsample=20, lyapunov_time=25.0,
        trainval_lt=7.5, test_start_lt=7.5, test_spacing_lt=2.0, test_interval_lt=2.0,
        n_test_starts=75, norm_mode=NormMode.COMPONENTWISE, canonical_ic=(1.0, 0.0, 0.0), test_ph_interval_lt=8.0,
    ),
}


def variant_key(name: str, variant: str) -> str:
    key = variant if variant.startswith(f"{name}_") else f"{name}_{variant}"
    if key not in DATASET_VARIANTS:
        raise KeyError(f"unknown dataset '{key}', choose one of {sorted(DATASET_VARIANTS)}")
    return key


def dataset_spec(name: str, variant: str, **overrides) -> DatasetSpec:
    spec = DATASET_VARIANTS[variant_key(name, variant)]
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(spec, **overrides) if overrides else spec


def make_dataset(name: str, variant: str, seed: int = 0, **overrides) -> TimeSeriesDataset:
    """
    Integrates the named variant from a seed-perturbed canonical initial condition,
    drops the transient and normalizes. Keyword overrides replace DatasetSpec fields
    (e.g. n_test_starts=5 for a shorter trajectory).
    """
    key = variant_key(name, variant)
    spec = dataset_spec(name, variant, **overrides)
    rng = np.random.default_rng(seed)
    ic = np.asarray(spec.canonical_ic) + rng.uniform(-spec.ic_noise, spec.ic_noise, size=len(spec.canonical_ic))

    steps_per_lt = spec.steps_per_lt
    cfg = TrajectoryConfig(
        dt_integrator=spec.dt_integrator,
        subsample=spec.subsample,
        n_network_steps=int(round(spec.total_lt * steps_per_lt)),
        initial_condition=tuple(ic),
        transient_steps=int(round(spec.transient_lt * steps_per_lt)),
    )
    logger.debug("Integrating %s (seed %d): %d network steps", key, seed, cfg.n_network_steps)
    raw = integrate_forward_euler(spec.system, cfg)
    return normalize_max_variation(
        raw,
        spec.norm_mode,
        dt_network=cfg.dt_network,
        lyapunov_time=spec.lyapunov_time,
        name=spec.system.name.value,
        variant=key,
        seed=seed,
        trainval_steps=int(round(spec.trainval_lt * steps_per_lt)),
    )


def _cache_path(cache_dir: Path, key: str, seed: int, overrides: dict) -> Path:
    tag = ""
    if overrides:
        digest = hashlib.sha256(json.dumps(overrides, sort_keys=True, default=str).encode()).hexdigest()
        tag = f"_{digest[:8]}"
    return Path(cache_dir) / f"{key}_seed{seed}{tag}.npz"


def load_or_make_dataset(name: str, variant: str, seed: int = 0, cache_dir=None, **overrides) -> TimeSeriesDataset:
    """
    make_dataset behind a binary cache keyed by (name, variant, seed, overrides).
    """
    if cache_dir is None:
        return make_dataset(name, variant, seed, **overrides)

    key = variant_key(name, variant)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    path = _cache_path(cache_dir, key, seed, overrides)
    if path.exists():
        logger.debug("Loading cached dataset %s", path)
        return load_dataset_npz(path)

    dataset = make_dataset(name, variant, seed, **overrides)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset_npz(dataset, path)
    logger.info("Cached dataset %s at %s", key, path)
    return dataset


def save_dataset_npz(dataset: TimeSeriesDataset, path):
    meta = {
        "dt_network": dataset.dt_network,
        "lyapunov_time": dataset.lyapunov_time,
        "mode": dataset.norm_record.mode.value,
        "name": dataset.name,
        "variant": dataset.variant,
        "seed": dataset.seed,
        "trainval_steps": dataset.trainval_steps,
    }
    with open(path, "wb") as f:
        np.savez(
            f,
            u=dataset.u,
            offsets=dataset.norm_record.offsets,
            scales=dataset.norm_record.scales,
            meta=np.array(json.dumps(meta)),
        )


def load_dataset_npz(path) -> TimeSeriesDataset:
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        record = NormRecord(offsets=data["offsets"], scales=data["scales"], mode=NormMode(meta.pop("mode")))
        return TimeSeriesDataset(u=data["u"], norm_record=record, **meta)


def _columns(n_u: int) -> list:
    return ["x", "y", "z"] if n_u == 3 else [f"u{i}" for i in range(n_u)]


def dataset_to_csv(dataset: TimeSeriesDataset, path):
    """Writes `t,x,y,z` rows, t in Lyapunov times, values in the normalized frame."""
    frame = pd.DataFrame(dataset.u, columns=_columns(dataset.n_u))
    frame.insert(0, "t", dataset.time_lt())
    frame.to_csv(path, index=False)


def dataset_from_csv(path, lyapunov_time: float, scales=None, mode=NormMode.GLOBAL, **metadata) -> TimeSeriesDataset:
    frame = pd.read_csv(path)
    t = frame.pop("t").to_numpy()
    if len(t) < 2:
        raise DimensionMismatch(f"{path} holds fewer than 2 rows")
    u = frame.to_numpy(dtype=float)
    dt_network = float(np.median(np.diff(t))) * lyapunov_time
    scales = np.ones(u.shape[1]) if scales is None else np.asarray(scales, dtype=float)
    record = NormRecord(offsets=np.zeros(u.shape[1]), scales=scales, mode=NormMode(mode))
    return TimeSeriesDataset(u=u, dt_network=dt_network, lyapunov_time=lyapunov_time, norm_record=record, **metadata)
