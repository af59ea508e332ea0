import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import yaml
from hydra import compose, initialize_config_dir
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .dynamics import DATASET_VARIANTS, SystemName, variant_key
from .errors import ConfigError
from .knowledge import Architecture
from .validation import STRATEGY_LABELS

logger = logging.getLogger(__name__)

CONF_DIR = Path(__file__).parent / "conf"
OPTIMIZERS = ("GS", "BO")
PRESETS = ("lorenz_short", "lorenz_long", "kuznetsov_quasiperiodic", "kuznetsov_chaotic")
# sections that never change the numbers of a run
UNHASHED_KEYS = ("launcher", "output_dir")


@dataclass
class DatasetConfig:
    name: str = "lorenz"
    variant: str = "short"
    seed: int = 0
    # shorter test suites shrink the integrated trajectory
    n_test_starts: Optional[int] = None
    transient_lt: Optional[float] = None
    cache_dir: str = "~/.cache/reservoir_lab"


@dataclass
class ReservoirConfig:
    arch: str = "model_free"
    n_r: int = 100
    sparseness: float = 0.97
    beta_tik: float = 1e-11
    b_in: float = 1.0
    n_pod: int = 2


@dataclass
class SearchConfig:
    sigma_in_bounds: List[float] = field(default_factory=lambda: [0.5, 5.0])
    rho_bounds: List[float] = field(default_factory=lambda: [0.1, 1.0])
    sigma_in_scale: str = "linear"
    rho_scale: str = "linear"


@dataclass
class OptimizerConfig:
    grid_shape: List[int] = field(default_factory=lambda: [7, 7])
    bo_start: List[int] = field(default_factory=lambda: [5, 5])
    bo_acquire: int = 24
    kappa: float = 1.96
    eta: float = 1.0
    lattice_size: int = 100
    gp_restarts: int = 10


@dataclass
class GeometryConfig:
    v_lt: float = 3.0
    washout_lt: float = 1.0
    chaotic_shift_lt: float = 1.0
    wfv_train_lt: float = 6.0
    ssv_train_lt: Optional[float] = None
    offset_lt: Optional[float] = None


@dataclass
class TestConfig:
    start_lt: float = 24.0
    spacing_lt: float = 3.0
    interval_lt: float = 3.0
    n_starts: int = 100
    k_threshold: float = 0.2
    score_ph: bool = True
    # closed-loop length for the horizon; None scores it over interval_lt only
    ph_interval_lt: Optional[float] = 10.0
    # also score every visited search point on the test suite
    surfaces: bool = False

    __test__ = False


@dataclass
class LauncherConfig:
    workers: int = 1
    timeout_min: int = 720


@dataclass
class ExperimentConfig:
    preset: str = "lorenz_short"
    n_ensemble: int = 50
    seed: int = 0
    # every network gets the master seed (degenerate ensemble)
    shared_network_seed: bool = False
    # write every retrained network as a JSON blob under <out>/networks
    save_networks: bool = False
    strategies: List[str] = field(default_factory=lambda: ["SSV", "WFV", "WFV_c", "KFV", "KFV_c", "RV", "RV_c"])
    optimizers: List[str] = field(default_factory=lambda: ["GS", "BO"])
    output_dir: str = "output"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    reservoir: ReservoirConfig = field(default_factory=ReservoirConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    test: TestConfig = field(default_factory=TestConfig)
    launcher: LauncherConfig = field(default_factory=LauncherConfig)


def _compose_preset(preset: str):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}', choose from {', '.join(PRESETS)}")
    with initialize_config_dir(config_dir=str(CONF_DIR.resolve()), version_base=None):
        return compose(config_name="config", overrides=[f"preset={preset}"])


def load_config(config_path=None, overrides: Sequence[str] = (), preset: Optional[str] = None) -> ExperimentConfig:
    """
    Builds the experiment configuration. Later sources win: structured defaults, the
    packaged preset, the user file, then `key=value` overrides.
    """
    user = OmegaConf.create()
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        user = OmegaConf.load(path)

    dotlist = OmegaConf.from_dotlist(list(overrides))
    preset = preset or dotlist.get("preset") or user.get("preset") or ExperimentConfig.preset

    try:
        merged = OmegaConf.merge(OmegaConf.structured(ExperimentConfig), _compose_preset(preset), user, dotlist)
        cfg = OmegaConf.to_object(merged)
    except OmegaConfBaseException as e:
        raise ConfigError(str(e)) from e
    cfg.preset = preset
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig):
    try:
        key = variant_key(cfg.dataset.name, cfg.dataset.variant)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from e
    system = DATASET_VARIANTS[key].system.name

    try:
        arch = Architecture(cfg.reservoir.arch)
    except ValueError:
        raise ConfigError(f"unknown architecture '{cfg.reservoir.arch}', choose from {[a.value for a in Architecture]}")
    if arch is Architecture.POD_INFORMED and system is not SystemName.LORENZ:
        raise ConfigError("pod_informed networks are defined for the Lorenz system")
    if arch is Architecture.FE_INFORMED and system is not SystemName.KUZNETSOV:
        raise ConfigError("fe_informed networks are defined for the Kuznetsov system")
    if arch is Architecture.POD_INFORMED and not 1 <= cfg.reservoir.n_pod <= 3:
        raise ConfigError(f"n_pod must lie in [1, 3], got {cfg.reservoir.n_pod}")

    unknown = [s for s in cfg.strategies if s not in STRATEGY_LABELS]
    if unknown or not cfg.strategies:
        raise ConfigError(f"strategies must be a non-empty subset of {', '.join(STRATEGY_LABELS)}, got {list(cfg.strategies)}")
    if len(set(cfg.strategies)) != len(cfg.strategies):
        raise ConfigError("strategies are listed more than once")
    if not cfg.optimizers or any(o not in OPTIMIZERS for o in cfg.optimizers) or len(set(cfg.optimizers)) != len(cfg.optimizers):
        raise ConfigError(f"optimizers must be a non-empty subset of {OPTIMIZERS}, got {list(cfg.optimizers)}")

    if cfg.n_ensemble < 1:
        raise ConfigError("n_ensemble must be >= 1")
    if cfg.launcher.workers < 0:
        raise ConfigError("workers cannot be negative")
    if cfg.reservoir.n_r < 1 or not 0 <= cfg.reservoir.sparseness < 1 or cfg.reservoir.beta_tik < 0:
        raise ConfigError("reservoir needs n_r >= 1, 0 <= sparseness < 1 and beta_tik >= 0")

    for name in ("sigma_in", "rho"):
        bounds = getattr(cfg.search, f"{name}_bounds")
        scale = getattr(cfg.search, f"{name}_scale")
        if len(bounds) != 2 or not bounds[0] < bounds[1]:
            raise ConfigError(f"{name}_bounds must be [lo, hi] with lo < hi, got {list(bounds)}")
        if scale not in ("linear", "log10"):
            raise ConfigError(f"{name}_scale must be linear or log10, got {scale}")
        if bounds[0] <= 0:
            raise ConfigError(f"{name} must stay positive, got lower bound {bounds[0]}")

    opt = cfg.optimizer
    if len(opt.grid_shape) != 2 or min(opt.grid_shape) < 1:
        raise ConfigError(f"grid_shape must hold two positive sizes, got {list(opt.grid_shape)}")
    if len(opt.bo_start) != 2 or min(opt.bo_start) < 1 or opt.bo_start[0] * opt.bo_start[1] < 2:
        raise ConfigError(f"bo_start must hold at least 2 points, got {list(opt.bo_start)}")
    if opt.bo_acquire < 0 or opt.lattice_size < 2 or opt.gp_restarts < 1:
        raise ConfigError("bo_acquire >= 0, lattice_size >= 2 and gp_restarts >= 1 are required")

    geo = cfg.geometry
    if geo.v_lt <= 0 or geo.washout_lt < 0 or geo.chaotic_shift_lt <= 0:
        raise ConfigError("geometry needs v_lt > 0, washout_lt >= 0 and chaotic_shift_lt > 0")
    if cfg.test.n_starts < 1 or cfg.test.interval_lt <= 0 or cfg.test.k_threshold <= 0:
        raise ConfigError("test suite needs n_starts >= 1, interval_lt > 0 and k_threshold > 0")
    if cfg.test.ph_interval_lt is not None and cfg.test.ph_interval_lt < cfg.test.interval_lt:
        raise ConfigError(f"ph_interval_lt ({cfg.test.ph_interval_lt}) must not be shorter than interval_lt ({cfg.test.interval_lt})")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return OmegaConf.to_container(OmegaConf.structured(cfg), resolve=True)


def config_to_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    """Identifies the numeric inputs of a run; launcher and output settings are left out."""
    content = config_to_dict(cfg)
    for key in UNHASHED_KEYS:
        content.pop(key, None)
    return hashlib.sha256(yaml.safe_dump(content, sort_keys=True).encode()).hexdigest()[:12]


def config_from_dict(content: dict) -> ExperimentConfig:
    try:
        return OmegaConf.to_object(OmegaConf.merge(OmegaConf.structured(ExperimentConfig), content))
    except OmegaConfBaseException as e:
        raise ConfigError(str(e)) from e
