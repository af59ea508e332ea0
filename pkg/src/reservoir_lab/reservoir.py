"""
Echo State Network core.

The reservoir update is written in the rescaled form

    r_{i+1} = tanh(sigma_in * W_in_hat [u_i; b_in] + rho * W_hat r_i)

where W_in_hat holds one U[-1, 1] entry per row and W_hat is an Erdos-Renyi matrix with
unit spectral radius, so sigma_in and rho can be tuned without rebuilding the matrices.
The readout sees r_hat = [r; 1] (or [r; 1; K(u)] when a knowledge function is attached)
and is the only trained part of the network.
"""
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import linalg, sparse

from .errors import DimensionMismatch, InvalidHyperparams, SingularSystem, SliceTooShort, SpectralRadiusFailure

logger = logging.getLogger(__name__)

SPECTRAL_TOL = 1e-6
SPECTRAL_MAX_ITER = 10_000
SPECTRAL_ATTEMPTS = 3
RIDGE_JITTER = 1e-12


@dataclass(frozen=True)
class EsnHyperparams:
    sigma_in: float
    rho: float
    beta_tik: float = 1e-6
    b_in: float = 1.0
    n_r: int = 100
    sparseness: float = 0.97
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_in > 0:
            raise InvalidHyperparams(f"sigma_in must be positive, got {self.sigma_in}")
        if not self.rho > 0:
            raise InvalidHyperparams(f"rho must be positive, got {self.rho}")
        if not self.beta_tik >= 0:
            raise InvalidHyperparams(f"beta_tik cannot be negative, got {self.beta_tik}")
        if self.n_r < 1:
            raise InvalidHyperparams(f"n_r must be >= 1, got {self.n_r}")
        if not 0 <= self.sparseness < 1:
            raise InvalidHyperparams(f"sparseness must lie in [0, 1), got {self.sparseness}")

    def at(self, sigma_in: float, rho: float) -> "EsnHyperparams":
        """The same network evaluated at another (sigma_in, rho) search point."""
        return replace(self, sigma_in=float(sigma_in), rho=float(rho))


@dataclass(frozen=True)
class ReservoirMatrices:
    w_in_hat: np.ndarray
    w_hat: sparse.csr_matrix
    w_out: Optional[np.ndarray] = None

    @property
    def n_r(self) -> int:
        return self.w_hat.shape[0]

    @property
    def n_u(self) -> int:
        return self.w_in_hat.shape[1] - 1

    def with_readout(self, w_out: np.ndarray) -> "ReservoirMatrices":
        return replace(self, w_out=np.asarray(w_out, dtype=float))


@dataclass
class ReservoirState:
    r: np.ndarray
    r_hat: np.ndarray

    @classmethod
    def zero(cls, n_r: int, knowledge_dim: int = 0) -> "ReservoirState":
        return cls(r=np.zeros(n_r), r_hat=np.concatenate([np.zeros(n_r), [1.0], np.zeros(knowledge_dim)]))


@dataclass
class SolveCounter:
    """Counts ridge solves, the unit of validation cost."""
    count: int = 0

    def increment(self):
        self.count += 1


def spectral_radius(matrix, tol: float = SPECTRAL_TOL, max_iter: int = SPECTRAL_MAX_ITER) -> float:
    """
    Dominant eigenvalue magnitude by power iteration from the all-ones vector.

    A real matrix can have a complex-conjugate dominant pair, on which the plain power
    iteration never settles, so every iterate is also fitted with a two-term recurrence
    A^2 x = a A x + b x; the roots of t^2 - a t - b are the dominant pair.
    """
    n = matrix.shape[0]
    x = np.ones(n) / np.sqrt(n)
    for _ in range(max_iter):
        y = matrix @ x
        ny = np.linalg.norm(y)
        if ny == 0 or not np.isfinite(ny):
            raise SpectralRadiusFailure("power iteration collapsed to the zero vector")

        # single real dominant eigenvalue
        lam = x @ y
        if np.linalg.norm(y - lam * x) <= tol * ny:
            return abs(lam)

        z = matrix @ y
        nz = np.linalg.norm(z)
        if nz == 0:
            raise SpectralRadiusFailure("power iteration collapsed to the zero vector")
        coeffs, *_ = np.linalg.lstsq(np.column_stack([y, x]), z, rcond=None)
        a, b = coeffs
        if np.linalg.norm(z - a * y - b * x) <= tol * nz:
            return float(np.max(np.abs(np.roots([1.0, -a, -b]))))
        x = z / nz
    raise SpectralRadiusFailure(f"power iteration did not converge in {max_iter} iterations")


def _random_reservoir(rng: np.random.Generator, n_r: int, sparseness: float) -> sparse.csr_matrix:
    # round((1 - sparseness) * n_r**2) nonzeros drawn U(-1, 1)
    return sparse.random(
        n_r,
        n_r,
        density=1.0 - sparseness,
        format="csr",
        random_state=rng,
        data_rvs=lambda k: rng.uniform(-1.0, 1.0, size=k),
    )


def init_matrices(hp: EsnHyperparams, n_u: int) -> ReservoirMatrices:
    """
    Draws the fixed random matrices of a network; identical for identical (hp.seed, n_u).
    """
    if n_u < 1:
        raise DimensionMismatch(f"n_u must be >= 1, got {n_u}")

    rng = np.random.default_rng(hp.seed)
    w_in_hat = np.zeros((hp.n_r, n_u + 1))
    columns = rng.integers(0, n_u + 1, size=hp.n_r)
    w_in_hat[np.arange(hp.n_r), columns] = rng.uniform(-1.0, 1.0, size=hp.n_r)

    for attempt in range(SPECTRAL_ATTEMPTS):
        if attempt:
            rng = np.random.default_rng([hp.seed, attempt])
        w_hat = _random_reservoir(rng, hp.n_r, hp.sparseness)
        try:
            radius = spectral_radius(w_hat)
        except SpectralRadiusFailure as e:
            logger.warning("Reservoir draw %d for seed %d rejected: %s", attempt, hp.seed, e)
            continue
        if radius > 0:
            return ReservoirMatrices(w_in_hat=w_in_hat, w_hat=(w_hat / radius).tocsr())
    raise SpectralRadiusFailure(f"no usable reservoir for seed {hp.seed} after {SPECTRAL_ATTEMPTS} draws")


def _check_input(mats: ReservoirMatrices, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != mats.n_u:
        raise DimensionMismatch(f"input has {u.shape[-1]} components, network expects {mats.n_u}")
    return u


def _knowledge_dim(knowledge) -> int:
    return 0 if knowledge is None else knowledge.out_dim


def readout(r_hat, w_out) -> np.ndarray:
    return np.asarray(r_hat) @ w_out


def step(mats: ReservoirMatrices, hp: EsnHyperparams, state: ReservoirState, u_in, knowledge: Optional[Callable] = None) -> ReservoirState:
    u_in = _check_input(mats, u_in)
    if u_in.ndim != 1:
        raise DimensionMismatch("step takes a single input vector")
    pre = hp.sigma_in * (mats.w_in_hat @ np.append(u_in, hp.b_in)) + hp.rho * (mats.w_hat @ state.r)
    r_next = np.tanh(pre)
    parts = [r_next, [1.0]]
    if knowledge is not None:
        parts.append(np.atleast_1d(knowledge(u_in)))
    return ReservoirState(r=r_next, r_hat=np.concatenate(parts))


def run_open_loop(
    mats: ReservoirMatrices,
    hp: EsnHyperparams,
    inputs,
    washout: int,
    knowledge: Optional[Callable] = None,
    r0=None,
) -> Tuple[np.ndarray, ReservoirState]:
    """
    Teacher-forces the network with `inputs` (one row per step) starting from r0
    (zero by default). Column j of the returned R is r_hat after input washout + j.
    """
    inputs = _check_input(mats, inputs)
    if inputs.ndim != 2:
        raise DimensionMismatch("open loop takes a [steps x n_u] input array")
    n_steps = inputs.shape[0]
    if washout < 0 or n_steps <= washout:
        raise SliceTooShort(f"slice of {n_steps} steps cannot hold a washout of {washout}")

    drive = hp.sigma_in * (inputs @ mats.w_in_hat[:, :-1].T + hp.b_in * mats.w_in_hat[:, -1])
    w = (hp.rho * mats.w_hat).tocsr()
    r = np.zeros(mats.n_r) if r0 is None else np.asarray(r0, dtype=float).copy()

    states = np.empty((n_steps, mats.n_r))
    for i in range(n_steps):
        r = np.tanh(drive[i] + w @ r)
        states[i] = r

    harvested = states[washout:]
    blocks = [harvested, np.ones((harvested.shape[0], 1))]
    if knowledge is not None:
        blocks.append(np.asarray(knowledge(inputs[washout:])).reshape(harvested.shape[0], -1))
    R = np.hstack(blocks).T
    return R, ReservoirState(r=r, r_hat=R[:, -1].copy())


def warm_start(mats: ReservoirMatrices, hp: EsnHyperparams, history, knowledge: Optional[Callable] = None) -> ReservoirState:
    """Open-loop washout from the zero state over `history`; an empty history gives the zero state."""
    history = np.asarray(history, dtype=float).reshape(-1, mats.n_u)
    if history.shape[0] == 0:
        return ReservoirState.zero(mats.n_r, _knowledge_dim(knowledge))
    _, state = run_open_loop(mats, hp, history, history.shape[0] - 1, knowledge)
    return state


def train_ridge(R, U_d, beta_tik: float, counter: Optional[SolveCounter] = None) -> np.ndarray:
    """
    Solves (R R^T + beta I) W_out = R U_d^T with a Cholesky factorization, retrying with a
    small diagonal jitter when the factorization breaks down.
    """
    R = np.asarray(R, dtype=float)
    U_d = np.asarray(U_d, dtype=float)
    if R.ndim != 2 or U_d.ndim != 2 or R.shape[1] != U_d.shape[1]:
        raise DimensionMismatch(f"R {R.shape} and U_d {U_d.shape} must share the sample axis")
    if R.shape[1] < 1:
        raise SliceTooShort("ridge regression needs at least one training sample")

    gram = R @ R.T
    rhs = R @ U_d.T
    identity = np.eye(gram.shape[0])
    if counter is not None:
        counter.increment()

    factor = None
    for jitter in (0.0, RIDGE_JITTER):
        try:
            factor = linalg.cho_factor(gram + (beta_tik + jitter) * identity, lower=False, check_finite=True)
            break
        except (linalg.LinAlgError, ValueError):
            logger.debug("Cholesky factorization failed with jitter %g", jitter)
    if factor is None:
        raise SingularSystem(f"R R^T + beta I is not positive definite (beta={beta_tik})")

    if beta_tik == 0:
        scale = np.max(np.abs(np.diag(gram)))
        pivots = np.diag(factor[0]) ** 2
        if scale == 0 or pivots.min() < gram.shape[0] * np.finfo(float).eps * scale:
            raise SingularSystem("R R^T is rank-deficient and beta_tik = 0")

    return linalg.cho_solve(factor, rhs)


def run_closed_loop(
    mats: ReservoirMatrices,
    hp: EsnHyperparams,
    state: ReservoirState,
    u_start,
    n_steps: int,
    knowledge: Optional[Callable] = None,
) -> np.ndarray:
    """
    Autonomous prediction: each output is fed back as the next input. Returns the
    [n_steps x n_u] predictions; divergence is returned as is.
    """
    if mats.w_out is None:
        raise DimensionMismatch("network has no trained readout")
    u = _check_input(mats, u_start).copy()
    if n_steps <= 0:
        return np.empty((0, mats.n_u))

    w_in_u = hp.sigma_in * mats.w_in_hat[:, :-1]
    bias = hp.sigma_in * hp.b_in * mats.w_in_hat[:, -1]
    w = (hp.rho * mats.w_hat).tocsr()

    r = np.array(state.r, dtype=float)
    predictions = np.empty((n_steps, mats.n_u))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_steps):
            r = np.tanh(w_in_u @ u + bias + w @ r)
            if knowledge is None:
                r_hat = np.append(r, 1.0)
            else:
                r_hat = np.concatenate([r, [1.0], np.atleast_1d(knowledge(u))])
            predictions[i] = u = readout(r_hat, mats.w_out)
    return predictions


def network_to_dict(mats: ReservoirMatrices, hp: EsnHyperparams, extra: Optional[dict] = None) -> dict:
    w_hat = mats.w_hat.tocsr()
    blob = {
        "hyperparams": asdict(hp),
        "w_in_hat": mats.w_in_hat.tolist(),
        "w_hat": {
            "shape": list(w_hat.shape),
            "data": w_hat.data.tolist(),
            "indices": w_hat.indices.tolist(),
            "indptr": w_hat.indptr.tolist(),
        },
        "w_out": None if mats.w_out is None else mats.w_out.tolist(),
    }
    if extra:
        blob["extra"] = extra
    return blob


def network_from_dict(blob: dict) -> Tuple[ReservoirMatrices, EsnHyperparams, dict]:
    hp = EsnHyperparams(**blob["hyperparams"])
    w = blob["w_hat"]
    w_hat = sparse.csr_matrix((w["data"], w["indices"], w["indptr"]), shape=tuple(w["shape"]))
    w_out = None if blob["w_out"] is None else np.asarray(blob["w_out"], dtype=float)
    mats = ReservoirMatrices(w_in_hat=np.asarray(blob["w_in_hat"], dtype=float), w_hat=w_hat, w_out=w_out)
    return mats, hp, blob.get("extra", {})


def save_network(path, mats: ReservoirMatrices, hp: EsnHyperparams, extra: Optional[dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(network_to_dict(mats, hp, extra), f)
    logger.debug("Saved network (seed %d) to %s", hp.seed, path)


def load_network(path) -> Tuple[ReservoirMatrices, EsnHyperparams, dict]:
    with open(path, "r") as f:
        return network_from_dict(json.load(f))
