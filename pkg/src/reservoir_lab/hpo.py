"""
Hyperparameter search over (sigma_in, rho): grid search and Bayesian optimization with a
noise-free Gaussian-process surrogate and the gp-hedge acquisition portfolio.

Everything inside the optimizers works in unit coordinates: each dimension is mapped
(linearly or in log10) onto [0, 1].
"""
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats

from .errors import DuplicatePoints, EmptyInput, FactorizationFailure, ReservoirLabError
from .validation import LOG_MSE_CAP

logger = logging.getLogger(__name__)

KAPPA = 1.96
HEDGE_ETA = 1.0
GP_JITTER = 1e-10
GP_MAX_JITTER = 1e-6
LENGTH_SCALE_BOUNDS = (1e-2, 10.0)
SIGNAL_VAR_BOUNDS = (1e-4, 1e4)
ACQUISITIONS = ("PI", "EI", "LCB")
SQRT5 = math.sqrt(5.0)


class Scale(str, Enum):
    LINEAR = "linear"
    LOG10 = "log10"


@dataclass(frozen=True)
class SearchSpace:
    bounds: Tuple[Tuple[float, float], ...]
    scales: Tuple[Scale, ...] = (Scale.LINEAR, Scale.LINEAR)

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))
        object.__setattr__(self, "scales", tuple(Scale(s) for s in self.scales))
        if len(self.bounds) != 2 or len(self.scales) != 2:
            raise ValueError("the search space spans exactly (sigma_in, rho)")
        for (lo, hi), scale in zip(self.bounds, self.scales):
            if not lo < hi:
                raise ValueError(f"empty search interval [{lo}, {hi}]")
            if scale is Scale.LOG10 and lo <= 0:
                raise ValueError(f"log10 dimension needs a positive lower bound, got {lo}")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def _scaled_bounds(self):
        lo = np.array([math.log10(b[0]) if s is Scale.LOG10 else b[0] for b, s in zip(self.bounds, self.scales)])
        hi = np.array([math.log10(b[1]) if s is Scale.LOG10 else b[1] for b, s in zip(self.bounds, self.scales)])
        return lo, hi

    def from_unit(self, unit) -> np.ndarray:
        unit = np.asarray(unit, dtype=float)
        lo, hi = self._scaled_bounds()
        scaled = lo + unit * (hi - lo)
        log_dims = np.array([s is Scale.LOG10 for s in self.scales])
        return np.where(log_dims, 10.0**scaled, scaled)

    def to_unit(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        log_dims = np.array([s is Scale.LOG10 for s in self.scales])
        with np.errstate(divide="ignore", invalid="ignore"):
            scaled = np.where(log_dims, np.log10(point), point)
        lo, hi = self._scaled_bounds()
        return (scaled - lo) / (hi - lo)


def unit_grid(shape: Sequence[int]) -> np.ndarray:
    """Row-major tensor grid of equally spaced unit coordinates, endpoints included."""
    if any(n < 1 for n in shape):
        raise ValueError(f"grid shape must be positive, got {tuple(shape)}")
    axes = [np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    return np.array(list(itertools.product(*axes)))


@dataclass
class TraceRow:
    iteration: int
    sigma_in: float
    rho: float
    objective: float
    acquisition: str
    p_pi: float = float("nan")
    p_ei: float = float("nan")
    p_lcb: float = float("nan")


TRACE_COLUMNS = [f.name for f in fields(TraceRow)]


@dataclass
class SearchResult:
    best_point: np.ndarray
    best_value: float
    trace: List[TraceRow] = field(default_factory=list)

    @property
    def n_evaluations(self) -> int:
        return len(self.trace)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.trace], columns=TRACE_COLUMNS)


def _first_argmin(values) -> int:
    return int(np.argmin(np.asarray(values, dtype=float)))


def grid_search(objective: Callable, space: SearchSpace, grid_shape: Sequence[int] = (7, 7)) -> SearchResult:
    """
    Evaluates the objective on the full tensor grid; ties go to the lowest row-major index.
    """
    unit = unit_grid(grid_shape)
    points = space.from_unit(unit)
    values, trace = [], []
    for i, point in enumerate(points):
        value = float(objective(point))
        values.append(value)
        trace.append(TraceRow(i, point[0], point[1], value, "grid"))
    best = _first_argmin(values)
    return SearchResult(best_point=points[best], best_value=values[best], trace=trace)


def matern52(x1, x2, length_scales, signal_var) -> np.ndarray:
    diff = (np.asarray(x1)[:, None, :] - np.asarray(x2)[None, :, :]) / length_scales
    r = np.sqrt(np.sum(diff**2, axis=-1))
    return signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * np.exp(-SQRT5 * r)


def _matern52_grads(x, length_scales, signal_var):
    """Kernel matrix and its derivatives with respect to log length scales and log signal variance."""
    delta = x[:, None, :] - x[None, :, :]
    scaled_sq = (delta / length_scales) ** 2
    r = np.sqrt(np.sum(scaled_sq, axis=-1))
    decay = np.exp(-SQRT5 * r)
    k = signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * decay
    common = signal_var * 5.0 / 3.0 * (1.0 + SQRT5 * r) * decay
    grads = [common * scaled_sq[..., d] for d in range(x.shape[1])]
    grads.append(k)
    return k, grads


def _cholesky(k: np.ndarray, jitter: float):
    """Lower Cholesky factor of k + jitter I, raising the jitter tenfold up to 1e-6."""
    identity = np.eye(k.shape[0])
    while jitter <= GP_MAX_JITTER * (1 + 1e-9):
        try:
            return linalg.cholesky(k + jitter * identity, lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 10
    raise FactorizationFailure(f"kernel matrix not positive definite with jitter up to {GP_MAX_JITTER}")


@dataclass(frozen=True)
class GpSurrogate:
    x_train: np.ndarray
    y_train: np.ndarray
    y_mean: float
    y_std: float
    length_scales: np.ndarray
    signal_var: float
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray

    @property
    def prior_std(self) -> float:
        return self.y_std * math.sqrt(self.signal_var)


def _neg_log_marginal_likelihood(theta, x, z):
    length_scales, signal_var = np.exp(theta[:-1]), math.exp(theta[-1])
    k, grads = _matern52_grads(x, length_scales, signal_var)
    try:
        chol, _ = _cholesky(k, GP_JITTER)
    except FactorizationFailure:
        return 1e25, np.zeros_like(theta)
    alpha = linalg.cho_solve((chol, True), z)
    nlml = 0.5 * z @ alpha + np.sum(np.log(np.diag(chol))) + 0.5 * len(z) * math.log(2 * math.pi)
    inner = np.outer(alpha, alpha) - linalg.cho_solve((chol, True), np.eye(len(z)))
    grad = np.array([-0.5 * np.sum(inner * g) for g in grads])
    return nlml, grad


def gp_fit(
    x_train,
    y_train,
    seed: int = 0,
    n_restarts: int = 10,
    length_scales=None,
    signal_var: Optional[float] = None,
) -> GpSurrogate:
    """
    Noise-free GP regression with a Matern-5/2 ARD kernel on standardized targets. The
    kernel hyperparameters maximize the log marginal likelihood (L-BFGS-B, multi-start)
    unless both are given.
    """
    x = np.atleast_2d(np.asarray(x_train, dtype=float))
    y = np.asarray(y_train, dtype=float).ravel()
    if y.size == 0:
        raise EmptyInput("a GP needs at least one training point")
    if x.shape[0] != y.size:
        raise ValueError(f"{x.shape[0]} points but {y.size} values")
    if x.shape[0] > 1:
        distances = np.sqrt(np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1))
        if np.any(distances[np.triu_indices(x.shape[0], 1)] < 1e-12):
            raise DuplicatePoints("noise-free GP regression needs distinct inputs")

    y_mean = float(y.mean())
    y_std = float(y.std()) if y.size > 1 and y.std() > 0 else 1.0
    z = (y - y_mean) / y_std

    if length_scales is None or signal_var is None:
        log_bounds = [tuple(np.log(LENGTH_SCALE_BOUNDS))] * x.shape[1] + [tuple(np.log(SIGNAL_VAR_BOUNDS))]
        rng = np.random.default_rng(seed)
        starts = [np.array([math.log(0.5)] * x.shape[1] + [0.0])]
        for _ in range(n_restarts - 1):
            starts.append(np.array([rng.uniform(lo, hi) for lo, hi in log_bounds]))
        best = None
        for start in starts:
            res = optimize.minimize(
                _neg_log_marginal_likelihood, start, args=(x, z), jac=True, method="L-BFGS-B", bounds=log_bounds
            )
            if best is None or res.fun < best.fun:
                best = res
        length_scales, signal_var = np.exp(best.x[:-1]), float(math.exp(best.x[-1]))
    length_scales = np.broadcast_to(np.asarray(length_scales, dtype=float), (x.shape[1],)).copy()

    k = matern52(x, x, length_scales, signal_var)
    chol, jitter = _cholesky(k, GP_JITTER)
    alpha = linalg.cho_solve((chol, True), z)
    return GpSurrogate(x, y, y_mean, y_std, length_scales, float(signal_var), jitter, chol, alpha)


def gp_posterior(surrogate: GpSurrogate, x) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation in the units of the training targets."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k_star = matern52(x, surrogate.x_train, surrogate.length_scales, surrogate.signal_var)
    mean = surrogate.y_mean + surrogate.y_std * (k_star @ surrogate.alpha)
    v = linalg.solve_triangular(surrogate.chol, k_star.T, lower=True)
    var = surrogate.signal_var - np.sum(v**2, axis=0)
    std = surrogate.y_std * np.sqrt(np.maximum(var, 0.0))
    return mean, std


def acquisitions_from_posterior(mean, std, best_y: float, kappa: float = KAPPA) -> Dict[str, np.ndarray]:
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    improvement = best_y - mean
    positive = std > 0
    safe_std = np.where(positive, std, 1.0)
    z = improvement / safe_std
    pi = np.where(positive, stats.norm.cdf(z), (improvement > 0).astype(float))
    ei = np.where(positive, improvement * stats.norm.cdf(z) + std * stats.norm.pdf(z), np.maximum(improvement, 0.0))
    lcb = -(mean - kappa * std)
    return {"PI": pi, "EI": ei, "LCB": lcb}


def acquisitions(surrogate: GpSurrogate, x, best_y: float, kappa: float = KAPPA) -> Dict[str, np.ndarray]:
    """PI, EI and the negated lower confidence bound; larger is better for all three."""
    mean, std = gp_posterior(surrogate, x)
    return acquisitions_from_posterior(mean, std, best_y, kappa)


@dataclass
class HedgeState:
    gains: np.ndarray = field(default_factory=lambda: np.zeros(len(ACQUISITIONS)))
    eta: float = HEDGE_ETA

    def probabilities(self) -> np.ndarray:
        logits = self.eta * (self.gains - np.max(self.gains))
        weights = np.exp(logits)
        return weights / weights.sum()

    def update(self, rewards):
        self.gains = self.gains + np.asarray(rewards, dtype=float)

    def choose(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.gains), p=self.probabilities()))


def propose(surrogate: GpSurrogate, best_y: float, lattice: np.ndarray, kappa: float = KAPPA, polish_iter: int = 50) -> np.ndarray:
    """
    One candidate per acquisition: argmax on the lattice, then a Nelder-Mead polish inside
    the unit square. Returns an array [3 x dim] in unit coordinates.
    """
    mean, std = gp_posterior(surrogate, lattice)
    scores = acquisitions_from_posterior(mean, std, best_y, kappa)
    candidates = []
    for name in ACQUISITIONS:
        start = lattice[int(np.argmax(scores[name]))]
        start_score = float(np.max(scores[name]))

        def negated(x, name=name):
            return -float(acquisitions(surrogate, np.clip(x, 0.0, 1.0), best_y, kappa)[name][0])

        res = optimize.minimize(
            negated, start, method="Nelder-Mead", bounds=[(0.0, 1.0)] * lattice.shape[1], options={"maxiter": polish_iter}
        )
        polished = np.clip(res.x, 0.0, 1.0)
        candidates.append(polished if -negated(polished) > start_score else start)
    return np.array(candidates)


def _safe_evaluate(objective: Callable, point) -> float:
    try:
        value = float(objective(point))
    except (ReservoirLabError, ArithmeticError, np.linalg.LinAlgError, ValueError) as e:
        logger.warning("Objective failed at %s: %s", np.round(point, 6).tolist(), e)
        return LOG_MSE_CAP
    return value if math.isfinite(value) else LOG_MSE_CAP


def bayesian_optimize(
    objective: Callable,
    space: SearchSpace,
    n_start: Sequence[int] = (5, 5),
    n_acquire: int = 24,
    seed: int = 0,
    kappa: float = KAPPA,
    eta: float = HEDGE_ETA,
    lattice_size: int = 100,
    n_restarts: int = 10,
    polish_iter: int = 50,
) -> SearchResult:
    """
    Bayesian optimization with gp-hedge: an n_start tensor grid, then n_acquire points, each
    picked among the PI, EI and LCB proposals with probabilities softmax(eta * gains). Every
    acquisition is rewarded with the negated posterior mean at its own proposal.
    """
    if np.prod(n_start) < 2:
        raise ValueError("Bayesian optimization needs at least 2 starting points")
    rng = np.random.default_rng(seed)
    hedge = HedgeState(eta=eta)
    lattice = unit_grid((lattice_size,) * space.dim)

    unit_points: List[np.ndarray] = []
    values: List[float] = []
    trace: List[TraceRow] = []

    for u in unit_grid(n_start):
        point = space.from_unit(u)
        value = _safe_evaluate(objective, point)
        unit_points.append(u)
        values.append(value)
        trace.append(TraceRow(len(trace), point[0], point[1], value, "grid"))

    # points evaluated more than once are kept once in the surrogate
    fitted_x, fitted_y = list(unit_points), list(values)
    for it in range(n_acquire):
        surrogate = gp_fit(np.array(fitted_x), np.array(fitted_y), seed=int(rng.integers(2**32)), n_restarts=n_restarts)
        best_y = float(np.min(fitted_y))
        candidates = propose(surrogate, best_y, lattice, kappa, polish_iter)

        probs = hedge.probabilities()
        choice = hedge.choose(rng)
        candidate_means, _ = gp_posterior(surrogate, candidates)
        hedge.update(-candidate_means)

        u = candidates[choice]
        point = space.from_unit(u)
        distances = np.linalg.norm(np.array(fitted_x) - u, axis=1)
        if distances.min() < 1e-9:
            value = fitted_y[int(np.argmin(distances))]
            logger.debug("Iteration %d re-proposed an evaluated point", it)
        else:
            value = _safe_evaluate(objective, point)
            fitted_x.append(u)
            fitted_y.append(value)
        unit_points.append(u)
        values.append(value)
        trace.append(TraceRow(len(trace), point[0], point[1], value, ACQUISITIONS[choice], *probs))

    best = _first_argmin(values)
    return SearchResult(best_point=space.from_unit(unit_points[best]), best_value=values[best], trace=trace)


def posterior_surface(space: SearchSpace, points, values, size: int = 30, seed: int = 0) -> pd.DataFrame:
    """GP posterior mean of (points, values) on a size x size lattice, for plotting."""
    unit = space.to_unit(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float)
    _, keep = np.unique(np.round(unit, 12), axis=0, return_index=True)
    keep = np.sort(keep)
    surrogate = gp_fit(unit[keep], values[keep], seed=seed)
    lattice = unit_grid((size, size))
    mean, std = gp_posterior(surrogate, lattice)
    physical = space.from_unit(lattice)
    return pd.DataFrame({"sigma_in": physical[:, 0], "rho": physical[:, 1], "mean": mean, "std": std})
