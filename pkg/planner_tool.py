"""
Kernel-density planner with a correlation-gated Gemini term.

For a candidate x in [0,1]^P the acquisition is

    alpha(x) = (sum_k f_k p_k(x) + lambda * p_uniform + rho * g(x)) / (sum_k p_k(x) + p_uniform + 1)

where p_k are Gaussian kernels centred on the observations, f_k the
observed objective values scaled to [0,1], p_uniform = 1 on the unit
hypercube and g the Gemini expensive-branch prediction in the same scaled
units. The planner proposes the argmin. With no usable rho the g term is
dropped and the base kernel-density acquisition remains.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial.distance import cdist

from dataset_tool import Dataset
from gemini_model import GeminiHyperparams, GeminiModel, cross_validate_rho
from stats_tool import seed_sequence

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-8
MIN_BANDWIDTH = 0.02
MAX_BANDWIDTH = 0.5


class PlannerError(ValueError):
    """Raised for out-of-range planner inputs."""


def to_simplex(u) -> np.ndarray:
    """
    Stick-breaking map from [0,1]^(n-1) onto the standard n-simplex.

    t_i = u_i * prod_{j<i}(1 - u_j), and the last component takes the remaining stick.
    """
    u = np.asarray(u, dtype=float)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise PlannerError("hypercube coordinates must lie in [0, 1]")
    remaining = np.cumprod(1.0 - u, axis=-1)
    before = np.concatenate([np.ones(u.shape[:-1] + (1,)), remaining[..., :-1]], axis=-1)
    return np.concatenate([u * before, remaining[..., -1:]], axis=-1)


def from_simplex(t) -> np.ndarray:
    """Inverse of `to_simplex`; a zero remaining stick maps to 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t < -SIMPLEX_TOLERANCE):
        raise PlannerError("simplex components must be nonnegative")
    if np.any(np.abs(t.sum(axis=-1) - 1.0) > SIMPLEX_TOLERANCE):
        raise PlannerError("simplex components must sum to 1")
    t = np.clip(t, 0.0, None)
    tail = np.flip(np.cumsum(np.flip(t, axis=-1), axis=-1), axis=-1)[..., :-1]
    head = t[..., :-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(tail > 0.0, head / np.where(tail > 0.0, tail, 1.0), 0.0)
    return np.clip(u, 0.0, 1.0)


@dataclass(frozen=True)
class SimplexTransform:
    n: int

    @property
    def hypercube_dim(self) -> int:
        return self.n - 1

    def forward(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.n - 1:
            raise PlannerError(f"expected {self.n - 1} hypercube coordinates, got {u.shape[-1]}")
        return to_simplex(u)

    def inverse(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if t.shape[-1] != self.n:
            raise PlannerError(f"expected {self.n} simplex components, got {t.shape[-1]}")
        return from_simplex(t)


def kde_bandwidth(n_obs: int, dim: int) -> float:
    return float(np.clip(0.5 * max(n_obs, 1) ** (-1.0 / (dim + 4)), MIN_BANDWIDTH, MAX_BANDWIDTH))


def scale_objective(y, reference=None) -> np.ndarray:
    """Min-max scale against `reference` (defaults to y); a constant reference maps to 0."""
    y = np.asarray(y, dtype=float)
    ref = y if reference is None else np.asarray(reference, dtype=float)
    if ref.size == 0:
        return np.zeros_like(y)
    low, span = ref.min(), ref.max() - ref.min()
    if span <= 0.0:
        return y - low
    return (y - low) / span


@dataclass
class KdeSurrogate:
    """Isotropic Gaussian kernels at the observations, weighted by their objective values."""

    X: np.ndarray
    f: np.ndarray
    bandwidth: float

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        if self.X.shape[0] != self.f.shape[0]:
            raise PlannerError(f"{self.X.shape[0]} kernel centres but {self.f.shape[0]} objective values")
        if self.bandwidth <= 0:
            raise PlannerError("bandwidth must be positive")

    @classmethod
    def from_observations(cls, X, y, dim: int, bandwidth: Optional[float] = None) -> "KdeSurrogate":
        X = np.asarray(X, dtype=float).reshape(-1, dim)
        y = np.asarray(y, dtype=float).ravel()
        h = bandwidth if bandwidth is not None else kde_bandwidth(len(y), dim)
        return cls(X, scale_objective(y), h)

    @property
    def n_obs(self) -> int:
        return self.f.shape[0]

    def densities(self, Xq) -> np.ndarray:
        """p_k(x) for every query row (m, N)."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if self.n_obs == 0:
            return np.zeros((Xq.shape[0], 0))
        dim = Xq.shape[1]
        norm = (2.0 * np.pi * self.bandwidth ** 2) ** (-dim / 2.0)
        return norm * np.exp(-cdist(Xq, self.X, "sqeuclidean") / (2.0 * self.bandwidth ** 2))


@dataclass
class AcquisitionConfig:
    lambdas: Sequence[float] = (1.0, -1.0)
    rho: Optional[float] = None
    gemini: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not self.lambdas:
            raise PlannerError("at least one lambda is required")
        if any(not -1.0 <= lam <= 1.0 for lam in self.lambdas):
            raise PlannerError(f"lambdas must lie in [-1, 1], got {list(self.lambdas)}")
        if self.rho is not None and not -1.0 <= self.rho <= 1.0:
            raise PlannerError(f"rho must lie in [-1, 1], got {self.rho}")

    @property
    def uses_gemini(self) -> bool:
        return self.rho is not None and self.gemini is not None


def acquisition(X, surrogate: KdeSurrogate, config: AcquisitionConfig, lam: Optional[float] = None) -> np.ndarray:
    """
    Acquisition values for a batch of unit-hypercube points (lower is better).

    Args:
        X: Query points (m, P)
        surrogate: Kernel-density surrogate of the observations
        config: Lambda set, rho and the scaled Gemini predictor
        lam: Lambda to use; defaults to the first configured one
    """
    lam = config.lambdas[0] if lam is None else lam
    p = surrogate.densities(X)
    numerator = p @ surrogate.f + lam
    if config.uses_gemini:
        numerator = numerator + config.rho * np.asarray(config.gemini(np.atleast_2d(X)), dtype=float).ravel()
    return numerator / (p.sum(axis=1) + 2.0)


def minimize_unit_cube(objective: Callable[[np.ndarray], np.ndarray], dim: int, rng: np.random.Generator,
                       n_samples: int = 1024, n_refine: int = 100, initial_step: float = 0.1) -> Optional[np.ndarray]:
    """
    Best of `n_samples` uniform candidates, refined coordinate-wise.

    Each refinement step tries +-step along every axis and halves the step
    when none improves. Returns None when the objective is flat over the
    candidates.
    """
    candidates = rng.uniform(size=(n_samples, dim))
    values = objective(candidates)
    if np.ptp(values) <= 1e-12 * max(1.0, np.abs(values).max()):
        return None
    best_idx = int(np.argmin(values))
    best, best_val = candidates[best_idx].copy(), values[best_idx]
    step = initial_step
    moves = np.vstack([np.eye(dim), -np.eye(dim)])
    for _ in range(n_refine):
        trials = np.clip(best + step * moves, 0.0, 1.0)
        trial_vals = objective(trials)
        i = int(np.argmin(trial_vals))
        if trial_vals[i] < best_val:
            best, best_val = trials[i], trial_vals[i]
        else:
            step *= 0.5
    return best


class PlannerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambdas: List[float] = Field(default_factory=lambda: [1.0, -1.0], description="Exploration/exploitation values, used round-robin")
    bandwidth: Optional[float] = Field(None, gt=0, description="Fixed kernel bandwidth; null anneals it with the observation count")
    n_samples: int = Field(1024, ge=1, description="Uniform candidates per proposal")
    n_refine: int = Field(100, ge=0, description="Coordinate refinement steps")
    initial_step: float = Field(0.1, gt=0, le=1, description="First refinement step length")
    simplex: bool = Field(False, description="Also report proposals mapped onto the simplex")

    @field_validator("lambdas")
    @classmethod
    def _lambdas_in_range(cls, value):
        if not value or any(not -1.0 <= v <= 1.0 for v in value):
            raise ValueError("lambdas must be a nonempty list of values in [-1, 1]")
        return value


class ProposalRecord(BaseModel):
    iteration: int
    lam: float = Field(..., serialization_alias="lambda")
    x: List[float]
    transformed_x: Optional[List[float]] = None


class Planner:
    """
    Sequential proposer over [0,1]^P holding the expensive observations.

    Args:
        dim: Hypercube dimension P
        settings: Search and lambda settings
        seed: Seed for candidate sampling and fallbacks
    """

    def __init__(self, dim: int, settings: Optional[PlannerSettings] = None, seed=None):
        if dim < 1:
            raise PlannerError("dim must be positive")
        self.dim = int(dim)
        self.settings = settings or PlannerSettings()
        self.rng = np.random.default_rng(seed)
        self.X = np.zeros((0, self.dim))
        self.y = np.zeros(0)
        self.rho: Optional[float] = None
        self.gemini: Optional[Callable[[np.ndarray], np.ndarray]] = None
        self.iteration = 0
        self.transform = SimplexTransform(self.dim + 1) if self.settings.simplex else None

    def observe(self, x, y: float) -> None:
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        self.X = np.vstack([self.X, x])
        self.y = np.append(self.y, float(y))

    def set_gemini(self, predictor: Optional[Callable[[np.ndarray], np.ndarray]], rho: Optional[float]) -> None:
        self.gemini = predictor
        self.rho = rho

    def update_rho(self, dataset: Dataset, hyper: Optional[GeminiHyperparams] = None, seed=None, n_jobs: int = 1) -> Optional[float]:
        """
        Refresh rho and the Gemini predictor from a dual-fidelity dataset.

        Fewer than 2 expensive observations leave rho undefined and the
        planner on the base acquisition.
        """
        if dataset.n_exp < 2:
            self.set_gemini(None, None)
            return None
        fold_seed, model_seed = seed_sequence(seed).spawn(2)
        estimate = cross_validate_rho(dataset, hyper, seed=fold_seed, n_jobs=n_jobs)
        model = GeminiModel(self.dim, hyper, seed=model_seed)
        model.train(dataset)
        if estimate.defined:
            self.set_gemini(model.predict_mean, estimate.value)
            logger.debug(f"rho_cv = {estimate.value:.3f} from folds {estimate.fold_values}")
        else:
            self.gemini = model.predict_mean
        return self.rho

    def surrogate(self) -> KdeSurrogate:
        return KdeSurrogate.from_observations(self.X, self.y, self.dim, self.settings.bandwidth)

    def acquisition_config(self) -> AcquisitionConfig:
        gemini = None
        if self.gemini is not None and self.y.size:
            reference = self.y.copy()
            raw = self.gemini
            gemini = lambda X: scale_objective(raw(X), reference)  # noqa: E731
        return AcquisitionConfig(lambdas=tuple(self.settings.lambdas), rho=self.rho, gemini=gemini)

    def propose(self, batch_size: int = 1) -> List[ProposalRecord]:
        """One proposal per batch slot, cycling through the lambdas across calls."""
        if batch_size < 1:
            raise PlannerError("batch_size must be at least 1")
        lambdas = self.settings.lambdas
        records = []
        surrogate = self.surrogate() if self.y.size else None
        config = self.acquisition_config()
        for slot in range(batch_size):
            lam = lambdas[(self.iteration + slot) % len(lambdas)]
            x = None
            if surrogate is not None:
                x = minimize_unit_cube(lambda Z: acquisition(Z, surrogate, config, lam), self.dim, self.rng,
                                       self.settings.n_samples, self.settings.n_refine, self.settings.initial_step)
                if x is None:
                    logger.warning("Acquisition surface is flat; proposing a uniform random point")
            if x is None:
                x = self.rng.uniform(size=self.dim)
            transformed = self.transform.forward(x).tolist() if self.transform else None
            records.append(ProposalRecord(iteration=self.iteration, lam=lam, x=x.tolist(), transformed_x=transformed))
        self.iteration += 1
        return records
