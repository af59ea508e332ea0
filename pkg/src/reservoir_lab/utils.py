import logging
import os
from pathlib import Path

import numpy as np
from rich.logging import RichHandler

CACHE_ENV_VAR = "RESERVOIR_LAB_CACHE"

logger = logging.getLogger(__name__)


def ensure_output_dir(output_dir, *parts) -> Path:
    """
    Ensures that an output directory (optionally a sub-directory of it) exists.
    """
    path = Path(output_dir).expanduser().joinpath(*[str(p) for p in parts])
    if not path.exists():
        logger.info("Creating output directory %s", path)
        path.mkdir(parents=True, exist_ok=True)
    return path


def resolve_cache_dir(configured: str) -> Path:
    """
    Returns the dataset cache directory; the environment variable wins over config.
    """
    return Path(os.environ.get(CACHE_ENV_VAR) or configured).expanduser()


def derive_seed(master_seed: int, index: int) -> int:
    """
    Counter-based sub-seed: network `index` always gets the same seed for a given
    master seed, however many networks the ensemble holds.
    """
    sequence = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def configure_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )
