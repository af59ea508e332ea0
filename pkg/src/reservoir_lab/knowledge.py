"""
Knowledge functions K(u) that augment the readout state of a model-informed ESN.

Inputs arrive in the network's normalized frame. Each function maps them to the
physical frame through the dataset's normalization record, applies its physics and
returns the result in the normalized frame again.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .dynamics import DATASET_VARIANTS, OdeSystem, SystemName, TimeSeriesDataset, ode_rhs
from .errors import ConfigError, DimensionMismatch, RankDeficient

logger = logging.getLogger(__name__)

RANK_TOL = 1e-14


class Architecture(str, Enum):
    MODEL_FREE = "model_free"
    POD_INFORMED = "pod_informed"
    FE_INFORMED = "fe_informed"


class KnowledgeKind(str, Enum):
    POD_GALERKIN = "pod_galerkin"
    FORWARD_EULER_Y = "forward_euler_y"


@dataclass(frozen=True)
class PodModel:
    phi: np.ndarray
    d: np.ndarray
    energies: np.ndarray
    n_pod: int
    dt: float
    # normalization of the snapshots, physical = u * scales + offsets
    scales: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        n_u = self.phi.shape[0]
        if self.scales is None:
            object.__setattr__(self, "scales", np.ones(n_u))
        if self.offsets is None:
            object.__setattr__(self, "offsets", np.zeros(n_u))

    @property
    def energy_fraction(self) -> float:
        total = self.energies.sum()
        if total <= 0:
            return 0.0
        return float(np.clip(self.energies[: self.n_pod].sum() / total, 0.0, 1.0))

    def project(self, u) -> np.ndarray:
        return (np.asarray(u, dtype=float) - self.d) @ self.phi

    def lift(self, xi) -> np.ndarray:
        return np.asarray(xi, dtype=float) @ self.phi.T + self.d

    def to_dict(self) -> dict:
        return {
            "phi": self.phi.tolist(),
            "d": self.d.tolist(),
            "energies": self.energies.tolist(),
            "n_pod": self.n_pod,
            "dt": self.dt,
            "scales": self.scales.tolist(),
            "offsets": self.offsets.tolist(),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "PodModel":
        arrays = {k: np.asarray(blob[k], dtype=float) for k in ("phi", "d", "energies", "scales", "offsets")}
        return cls(n_pod=int(blob["n_pod"]), dt=float(blob["dt"]), **arrays)


def compute_pod(snapshots, n_pod: int, dt: float = 1.0, scales=None, offsets=None) -> PodModel:
    """
    Proper orthogonal decomposition of the snapshot matrix [M x N_u]: eigenvectors of the
    covariance of the mean-subtracted snapshots, most energetic first. Each mode is signed
    so that its first nonzero component is positive.
    """
    snapshots = np.asarray(snapshots, dtype=float)
    if snapshots.ndim != 2 or snapshots.shape[0] < 2:
        raise DimensionMismatch(f"POD needs at least 2 snapshots, got shape {snapshots.shape}")
    n_u = snapshots.shape[1]
    if not 1 <= n_pod <= n_u:
        raise DimensionMismatch(f"n_pod must lie in [1, {n_u}], got {n_pod}")

    d = snapshots.mean(axis=0)
    centered = snapshots - d
    covariance = centered.T @ centered / (snapshots.shape[0] - 1)
    energies, modes = np.linalg.eigh(covariance)
    order = np.argsort(energies)[::-1]
    energies, modes = energies[order], modes[:, order]

    if energies[0] <= 0 or energies[n_pod - 1] < RANK_TOL * energies[0]:
        raise RankDeficient(f"snapshots do not support {n_pod} POD modes (energies {energies.tolist()})")

    phi = modes[:, :n_pod].copy()
    for j in range(n_pod):
        lead = np.flatnonzero(np.abs(phi[:, j]) > 0)[0]
        if phi[lead, j] < 0:
            phi[:, j] = -phi[:, j]

    return PodModel(phi=phi, d=d, energies=energies, n_pod=n_pod, dt=dt, scales=scales, offsets=offsets)


def pod_knowledge(pod: PodModel, system: OdeSystem, u_in) -> np.ndarray:
    """
    One forward-Euler step of the flat Galerkin system xi' = Phi^T f(Phi xi + d) started
    from the projection of u_in. Works on a single input or a stack of inputs.
    """
    u_in = np.asarray(u_in, dtype=float)
    if u_in.shape[-1] != pod.phi.shape[0]:
        raise DimensionMismatch(f"input has {u_in.shape[-1]} components, POD basis spans {pod.phi.shape[0]}")
    xi = pod.project(u_in)
    q = pod.lift(xi) * pod.scales + pod.offsets
    rate = (ode_rhs(system, q) / pod.scales) @ pod.phi
    return xi + pod.dt * rate


def fe_knowledge(system: OdeSystem, dt: float, u_in):
    """
    Forward-Euler prediction of the Kuznetsov y component from a physical-frame state:
    y + dt * (y (lambda + z + x^2 - x^4 / 2) - omega0^2 x).
    """
    if system.name is not SystemName.KUZNETSOV:
        raise ConfigError(f"forward-Euler y knowledge is defined for the Kuznetsov system, got {system.name.value}")
    u_in = np.asarray(u_in, dtype=float)
    lam, omega0, _ = system.params
    x, y, z = u_in[..., 0], u_in[..., 1], u_in[..., 2]
    return y + dt * (y * (lam + z + x**2 - 0.5 * x**4) - omega0**2 * x)


@dataclass(frozen=True)
class KnowledgeFn:
    kind: KnowledgeKind
    system: OdeSystem
    dt: float
    scales: np.ndarray
    offsets: np.ndarray
    pod: Optional[PodModel] = None

    @property
    def out_dim(self) -> int:
        return self.pod.n_pod if self.kind is KnowledgeKind.POD_GALERKIN else 1

    def __call__(self, u) -> np.ndarray:
        """K(u) for one input [n_u] or a stack [..., n_u]; returns [..., out_dim]."""
        u = np.asarray(u, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            if self.kind is KnowledgeKind.POD_GALERKIN:
                return pod_knowledge(self.pod, self.system, u)
            y_next = fe_knowledge(self.system, self.dt, u * self.scales + self.offsets)
        return ((y_next - self.offsets[1]) / self.scales[1])[..., np.newaxis]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "system": {"name": self.system.name.value, "params": list(self.system.params)},
            "dt": self.dt,
            "scales": self.scales.tolist(),
            "offsets": self.offsets.tolist(),
            "pod": None if self.pod is None else self.pod.to_dict(),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "KnowledgeFn":
        return cls(
            kind=KnowledgeKind(blob["kind"]),
            system=OdeSystem(SystemName(blob["system"]["name"]), tuple(blob["system"]["params"])),
            dt=float(blob["dt"]),
            scales=np.asarray(blob["scales"], dtype=float),
            offsets=np.asarray(blob["offsets"], dtype=float),
            pod=None if blob["pod"] is None else PodModel.from_dict(blob["pod"]),
        )


def _system_of(dataset: TimeSeriesDataset, system: Optional[OdeSystem]) -> OdeSystem:
    if system is not None:
        return system
    if dataset.variant not in DATASET_VARIANTS:
        raise ConfigError(f"dataset '{dataset.variant}' has no registered system, pass one explicitly")
    return DATASET_VARIANTS[dataset.variant].system


def pod_informed(dataset: TimeSeriesDataset, n_pod: int = 2, system: Optional[OdeSystem] = None) -> KnowledgeFn:
    """POD Galerkin knowledge built from the washout + training + validation span."""
    system = _system_of(dataset, system)
    record = dataset.norm_record
    pod = compute_pod(dataset.trainval(), n_pod, dt=dataset.dt_network, scales=record.scales, offsets=record.offsets)
    logger.debug("POD with %d modes captures %.4f of the energy", n_pod, pod.energy_fraction)
    return KnowledgeFn(KnowledgeKind.POD_GALERKIN, system, dataset.dt_network, record.scales, record.offsets, pod)


def fe_informed(dataset: TimeSeriesDataset, system: Optional[OdeSystem] = None) -> KnowledgeFn:
    system = _system_of(dataset, system)
    if system.name is not SystemName.KUZNETSOV:
        raise ConfigError("fe_informed networks need Kuznetsov data")
    record = dataset.norm_record
    return KnowledgeFn(KnowledgeKind.FORWARD_EULER_Y, system, dataset.dt_network, record.scales, record.offsets)


def make_knowledge(arch, dataset: TimeSeriesDataset, n_pod: int = 2, system: Optional[OdeSystem] = None) -> Optional[KnowledgeFn]:
    arch = Architecture(arch)
    if arch is Architecture.MODEL_FREE:
        return None
    if arch is Architecture.POD_INFORMED:
        return pod_informed(dataset, n_pod, system)
    return fe_informed(dataset, system)
