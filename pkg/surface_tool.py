"""
Benchmark surface laboratory.

Draws cheap/expensive surface pairs from a GP prior with an RBF kernel,
characterizes them by Spearman rank correlation, sorts them into correlation
bins and builds training folds. Also provides the 1D trigonometric bias
fixtures and the analytic benchmark suite mapped from the unit hypercube.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.spatial.distance import cdist

from dataset_tool import Dataset
from stats_tool import seed_sequence, spearman

logger = logging.getLogger(__name__)

JITTER = 1e-6
DENSE_LIMIT = 2000
BLOCK_ROWS = 2048
FOURIER_FEATURES = 2048
BIN_WIDTH = 0.25
MAX_BIN_ATTEMPTS = 500


class SurfaceError(ValueError):
    """Raised for invalid surface requests."""


class SurfaceLinAlgError(np.linalg.LinAlgError):
    """Raised when a covariance matrix is not positive definite after jitter."""


@dataclass(frozen=True)
class RbfKernel:
    variance: float = 2.0
    lengthscale: float = 1.0

    def __post_init__(self):
        if not (self.variance > 0 and self.lengthscale > 0):
            raise SurfaceError(f"kernel variance and lengthscale must be positive, got {self.variance}, {self.lengthscale}")

    def matrix(self, A, B) -> np.ndarray:
        A = as_points(A)
        B = as_points(B)
        return self.variance * np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * self.lengthscale ** 2))


def rbf(x, x2, kernel: RbfKernel = RbfKernel()) -> float:
    """k(x, x') = variance * exp(-|x - x'|^2 / (2 lengthscale^2))"""
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise SurfaceError(f"rbf inputs differ in length: {x.shape[0]} vs {x2.shape[0]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x2))):
        raise SurfaceError("rbf inputs must be finite")
    return float(kernel.matrix(x[None, :], x2[None, :])[0, 0])


class DomainSpec(BaseModel):
    """Sampling domain; the defaults give the 1D benchmark grid."""

    model_config = ConfigDict(extra="forbid")

    dim: int = Field(1, ge=1, description="Parameter dimension")
    points_per_axis: int = Field(100, ge=2, description="Grid points per axis (grid layout)")
    n_points: Optional[int] = Field(None, ge=2, description="Number of points (random layout)")
    low: float = Field(-5.0, description="Lower bound of every axis")
    high: float = Field(5.0, description="Upper bound of every axis")
    layout: str = Field("grid", pattern="^(grid|random)$", description="'grid' or 'random'")

    def points(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if self.high <= self.low:
            raise SurfaceError(f"domain bounds are empty: [{self.low}, {self.high}]")
        if self.layout == "grid":
            return self.low + (self.high - self.low) * unit_grid(self.dim, self.points_per_axis)
        if self.n_points is None:
            raise SurfaceError("a random domain needs n_points")
        rng = rng if rng is not None else np.random.default_rng()
        return rng.uniform(self.low, self.high, size=(self.n_points, self.dim))


def as_points(X) -> np.ndarray:
    """(n, d) float block; a flat vector is read as n one-dimensional points."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return X[:, None]
    if X.ndim != 2:
        raise SurfaceError(f"expected an (n, d) block of points, got shape {X.shape}")
    return X


def unit_grid(dim: int, points_per_axis: int) -> np.ndarray:
    axes = [np.linspace(0.0, 1.0, points_per_axis)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _cholesky(K: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(K, lower=True)
    except linalg.LinAlgError as err:
        raise SurfaceLinAlgError(f"{what} is not positive definite after jitter: {err}") from err


def gp_posterior(X_train, y_train, X_query, kernel: RbfKernel, jitter: float = JITTER) -> Tuple[np.ndarray, np.ndarray]:
    """
    Noise-free zero-mean GP conditioning.

    Returns:
        (posterior mean, posterior covariance) over X_query
    """
    X_train = as_points(X_train)
    X_query = as_points(X_query)
    y_train = np.asarray(y_train, dtype=float).ravel()
    K_tt = kernel.matrix(X_train, X_train) + jitter * kernel.variance * np.eye(X_train.shape[0])
    L = _cholesky(K_tt, "anchor covariance")
    K_qt = kernel.matrix(X_query, X_train)
    alpha = linalg.cho_solve((L, True), y_train)
    V = linalg.solve_triangular(L, K_qt.T, lower=True)
    return K_qt @ alpha, kernel.matrix(X_query, X_query) - V.T @ V


def _fourier_prior(X: np.ndarray, kernel: RbfKernel, rng: np.random.Generator, n_features: int) -> Callable[[np.ndarray], np.ndarray]:
    omega = rng.standard_normal((X.shape[1], n_features)) / kernel.lengthscale
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    weights = rng.standard_normal(n_features)
    scale = np.sqrt(2.0 * kernel.variance / n_features)

    def prior(Z: np.ndarray) -> np.ndarray:
        out = np.empty(Z.shape[0])
        for start in range(0, Z.shape[0], BLOCK_ROWS):
            block = Z[start:start + BLOCK_ROWS]
            out[start:start + BLOCK_ROWS] = scale * np.cos(block @ omega + phase) @ weights
        return out

    return prior


def gp_sample_surface(domain: np.ndarray, kernel: RbfKernel, n_train: int, rng: np.random.Generator,
                      jitter: float = JITTER) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw one surface over `domain`.

    Anchor targets are drawn from the prior on a uniform random subset of the
    domain, then the full surface is drawn from the posterior conditioned on
    them. Domains above DENSE_LIMIT points use a pathwise update of a
    random-feature prior draw instead of the dense posterior factorization.

    Returns:
        (surface values over the domain, anchor indices)
    """
    domain = as_points(domain)
    n = domain.shape[0]
    if not 1 <= n_train <= n:
        raise SurfaceError(f"n_train must be in [1, {n}], got {n_train}")
    anchors = np.sort(rng.choice(n, size=n_train, replace=False))
    X_t = domain[anchors]
    K_tt = kernel.matrix(X_t, X_t) + jitter * kernel.variance * np.eye(n_train)
    L_tt = _cholesky(K_tt, "anchor covariance")
    y_t = L_tt @ rng.standard_normal(n_train)

    if n <= DENSE_LIMIT:
        mean, cov = gp_posterior(X_t, y_t, domain, kernel, jitter)
        L = _cholesky(cov + jitter * kernel.variance * np.eye(n), "posterior covariance")
        return mean + L @ rng.standard_normal(n), anchors

    prior = _fourier_prior(domain, kernel, rng, FOURIER_FEATURES)
    coef = linalg.cho_solve((L_tt, True), y_t - prior(X_t))
    values = prior(domain)
    for start in range(0, n, BLOCK_ROWS):
        values[start:start + BLOCK_ROWS] += kernel.matrix(domain[start:start + BLOCK_ROWS], X_t) @ coef
    return values, anchors


def default_n_train(n_points: int) -> int:
    return int(min(200, max(2, n_points // 10)))


class Provenance(str, Enum):
    GP_SAMPLED = "gp_sampled"
    TRIG_FIXTURE = "trig_fixture"
    ANALYTIC = "analytic"


@dataclass
class SurfacePair:
    """Cheap and expensive fields over one domain, tagged with their Spearman r_s."""

    domain: np.ndarray
    y_cheap: np.ndarray
    y_exp: np.ndarray
    provenance: Provenance
    spearman: Optional[float] = None
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.domain = np.asarray(self.domain, dtype=float)
        if self.domain.ndim == 1:
            self.domain = self.domain[:, None]
        self.y_cheap = np.asarray(self.y_cheap, dtype=float).ravel()
        self.y_exp = np.asarray(self.y_exp, dtype=float).ravel()
        n = self.domain.shape[0]
        if self.y_cheap.shape[0] != n or self.y_exp.shape[0] != n:
            raise SurfaceError(f"surface fields must have {n} values to match the domain")
        self.provenance = Provenance(self.provenance)
        if self.spearman is None:
            self.spearman = spearman(self.y_cheap, self.y_exp)

    @property
    def dim(self) -> int:
        return self.domain.shape[1]

    def __len__(self) -> int:
        return self.domain.shape[0]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.domain, columns=[f"x_{i + 1}" for i in range(self.dim)])
        frame["y_cheap"] = self.y_cheap
        frame["y_exp"] = self.y_exp
        return frame

    def write(self, stem: Union[str, Path]) -> Tuple[Path, Path]:
        """Write `<stem>.csv` and the `<stem>.json` sidecar."""
        stem = Path(stem)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        self.to_frame().to_csv(csv_path, index=False)
        sidecar = {"spearman": self.spearman, "provenance": self.provenance.value, **self.meta}
        json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return csv_path, json_path

    @classmethod
    def read(cls, stem: Union[str, Path]) -> "SurfacePair":
        stem = Path(stem)
        frame = pd.read_csv(stem.with_suffix(".csv"), float_precision="round_trip")
        sidecar = json.loads(stem.with_suffix(".json").read_text())
        x_cols = [c for c in frame.columns if c.startswith("x_")]
        pair = cls(
            domain=frame[x_cols].to_numpy(dtype=float),
            y_cheap=frame["y_cheap"].to_numpy(dtype=float),
            y_exp=frame["y_exp"].to_numpy(dtype=float),
            provenance=sidecar.pop("provenance"),
            spearman=sidecar.pop("spearman"),
            meta=sidecar,
        )
        return pair


def gp_sample_pair(domain: Union[DomainSpec, np.ndarray], kernel: RbfKernel = RbfKernel(),
                   n_train: Optional[int] = None, seed=None) -> SurfacePair:
    """Two independent conditioned GP draws over one domain."""
    rng = np.random.default_rng(seed)
    X = domain.points(rng) if isinstance(domain, DomainSpec) else as_points(domain)
    n_train = n_train or default_n_train(X.shape[0])
    y_exp, _ = gp_sample_surface(X, kernel, n_train, rng)
    y_cheap, _ = gp_sample_surface(X, kernel, n_train, rng)
    meta = {"variance": kernel.variance, "lengthscale": kernel.lengthscale, "n_train": n_train,
            "seed": seed if isinstance(seed, int) else None}
    return SurfacePair(X, y_cheap, y_exp, Provenance.GP_SAMPLED, meta=meta)


def n_bins(width: float = BIN_WIDTH) -> int:
    return int(round(2.0 / width))


def bin_index(r: float, width: float = BIN_WIDTH) -> int:
    """Bin of a correlation in [-1, 1]; a value on an edge goes to the lower bin."""
    if r is None or not np.isfinite(r):
        raise SurfaceError(f"cannot bin an undefined correlation: {r}")
    return int(min(max(math.ceil((r + 1.0) / width) - 1, 0), n_bins(width) - 1))


def bin_edges(index: int, width: float = BIN_WIDTH) -> Tuple[float, float]:
    return -1.0 + index * width, -1.0 + (index + 1) * width


def bin_pairs(pairs: Sequence[SurfacePair], width: float = BIN_WIDTH) -> Dict[int, List[SurfacePair]]:
    bins: Dict[int, List[SurfacePair]] = {i: [] for i in range(n_bins(width))}
    for pair in pairs:
        bins[bin_index(pair.spearman, width)].append(pair)
    return bins


@dataclass
class BinnedPool:
    pairs: List[Tuple[int, int, SurfacePair]]
    unreachable: List[Tuple[int, int]]

    def manifest(self) -> pd.DataFrame:
        rows = [{"bin": b, "low": bin_edges(b)[0], "high": bin_edges(b)[1], "expensive_index": e, "spearman": p.spearman}
                for b, e, p in self.pairs]
        return pd.DataFrame(rows, columns=["bin", "low", "high", "expensive_index", "spearman"])


def _fill_bins_for_surface(X, y_exp, kernel, n_train, width, max_attempts, seq) -> Tuple[List[Tuple[int, np.ndarray]], List[int]]:
    rng = np.random.default_rng(seq)
    found, missing = [], []
    for b in range(n_bins(width)):
        low, high = bin_edges(b, width)
        a = 2.0 * np.sin(np.pi * 0.5 * (low + high) / 6.0)
        for _ in range(max_attempts):
            z, _ = gp_sample_surface(X, kernel, n_train, rng)
            y_cheap = a * y_exp + np.sqrt(1.0 - a * a) * z
            r = spearman(y_cheap, y_exp)
            if r is not None and bin_index(r, width) == b:
                found.append((b, y_cheap))
                break
        else:
            missing.append(b)
    return found, missing


def generate_binned_pool(
    domain: Union[DomainSpec, np.ndarray],
    kernel: RbfKernel = RbfKernel(),
    n_exp_surfaces: int = 20,
    n_train: Optional[int] = None,
    seed=None,
    width: float = BIN_WIDTH,
    max_attempts: int = MAX_BIN_ATTEMPTS,
    n_jobs: int = 1,
) -> BinnedPool:
    """
    One cheap partner per bin for each expensive surface.

    Cheap proposals are a*y_exp + sqrt(1 - a^2)*z with z an independent GP
    draw, so they keep the prior's marginal; a = 2 sin(pi c / 6) aims at the
    bin centre c. Proposals are rejected until r_s lands in the bin.
    """
    root = seed_sequence(seed)
    domain_seq, exp_seq, *cheap_seqs = root.spawn(n_exp_surfaces + 2)
    X = domain.points(np.random.default_rng(domain_seq)) if isinstance(domain, DomainSpec) else as_points(domain)
    n_train = n_train or default_n_train(X.shape[0])
    exp_rng = np.random.default_rng(exp_seq)
    y_exps = [gp_sample_surface(X, kernel, n_train, exp_rng)[0] for _ in range(n_exp_surfaces)]

    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_fill_bins_for_surface)(X, y_exp, kernel, n_train, width, max_attempts, seq)
        for y_exp, seq in zip(y_exps, cheap_seqs)
    )
    pairs, unreachable = [], []
    for e, (found, missing) in enumerate(results):
        for b, y_cheap in found:
            meta = {"variance": kernel.variance, "lengthscale": kernel.lengthscale, "n_train": n_train,
                    "bin": b, "expensive_index": e}
            pairs.append((b, e, SurfacePair(X, y_cheap, y_exps[e], Provenance.GP_SAMPLED, meta=meta)))
        for b in missing:
            logger.warning(f"Bin {bin_edges(b, width)} not reached for expensive surface {e} after {max_attempts} attempts")
            unreachable.append((b, e))
    return BinnedPool(pairs=pairs, unreachable=unreachable)


@dataclass
class Fold:
    cheap_idx: np.ndarray
    exp_idx: np.ndarray
    val_idx: np.ndarray

    def to_dataset(self, pair: SurfacePair) -> Dataset:
        return Dataset(pair.domain[self.cheap_idx], pair.y_cheap[self.cheap_idx],
                       pair.domain[self.exp_idx], pair.y_exp[self.exp_idx], dim=pair.dim)

    def validation(self, pair: SurfacePair) -> Tuple[np.ndarray, np.ndarray]:
        return pair.domain[self.val_idx], pair.y_exp[self.val_idx]


def make_folds(n_points: int, n_cheap_train: int, n_exp_train: int, n_folds: int = 20, seed=None) -> List[Fold]:
    """
    Random training subsets over a domain of `n_points`.

    Cheap and expensive training points are drawn independently; the
    validation set is every domain point without an expensive observation.
    """
    if isinstance(n_points, SurfacePair):
        n_points = len(n_points)
    if n_cheap_train > n_points or n_exp_train > n_points:
        raise SurfaceError(f"training sizes ({n_cheap_train} cheap, {n_exp_train} expensive) exceed the domain size {n_points}")
    if n_exp_train >= n_points:
        raise SurfaceError("no validation points left: n_exp_train equals the domain size")
    if n_cheap_train < 0 or n_exp_train < 0 or n_folds < 1:
        raise SurfaceError("fold sizes and count must be positive")
    rng = np.random.default_rng(seed)
    folds = []
    for _ in range(n_folds):
        exp_idx = np.sort(rng.choice(n_points, size=n_exp_train, replace=False))
        cheap_idx = np.sort(rng.choice(n_points, size=n_cheap_train, replace=False))
        folds.append(Fold(cheap_idx, exp_idx, np.setdiff1d(np.arange(n_points), exp_idx)))
    return folds


class TrigKind(str, Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    NONLINEAR = "nonlinear"


@dataclass(frozen=True)
class TrigPair:
    """1D bias fixture with f_exp(x) = f_cheap(x + f_p(x)) + f_t(x)."""

    kind: TrigKind
    cheap: Callable[[np.ndarray], np.ndarray]
    expensive: Callable[[np.ndarray], np.ndarray]
    f_p: Callable[[np.ndarray], np.ndarray]
    f_t: Callable[[np.ndarray], np.ndarray]

    def to_surface_pair(self, n_points: int = 100) -> SurfacePair:
        x = np.linspace(0.0, 1.0, n_points)
        return SurfacePair(x[:, None], self.cheap(x), self.expensive(x), Provenance.TRIG_FIXTURE,
                           meta={"kind": self.kind.value})


_TRIG = {
    TrigKind.CONSTANT: (
        lambda x: np.cos(4 * np.pi * x) + 2,
        lambda x: np.sin(4 * np.pi * x),
        lambda x: np.full_like(x, 3.0 / 8.0),
        lambda x: np.full_like(x, -2.0),
    ),
    TrigKind.LINEAR: (
        lambda x: np.sin(2 * np.pi * x),
        lambda x: np.sin(4 * np.pi * x) + 2 * x,
        lambda x: x,
        lambda x: 2 * x,
    ),
    TrigKind.NONLINEAR: (
        lambda x: np.sin(3 * np.pi * x),
        lambda x: np.sin(3 * np.pi * (x + x ** 2)) + x ** 3,
        lambda x: x ** 2,
        lambda x: x ** 3,
    ),
}


def trig_pair(kind: Union[TrigKind, str]) -> TrigPair:
    try:
        kind = TrigKind(kind)
    except ValueError:
        raise SurfaceError(f"unknown trig pair kind {kind!r}; choose from {[k.value for k in TrigKind]}")
    cheap, expensive, f_p, f_t = _TRIG[kind]
    return TrigPair(kind, cheap, expensive, f_p, f_t)


def _dejong(x):
    return np.sum(x ** 2, axis=1)


def _hyper_ellipsoid(x):
    i = np.arange(1, x.shape[1] + 1)
    return np.sum((i ** 2) * x ** 2, axis=1)


def _ackley_path(x):
    d = x.shape[1]
    return (-20.0 * np.exp(-0.2 * np.sqrt(np.sum(x ** 2, axis=1) / d))
            - np.exp(np.sum(np.cos(2 * np.pi * x), axis=1) / d) + 20.0 + np.e)


def _rastrigin(x):
    return 10.0 * x.shape[1] + np.sum(x ** 2 - 10.0 * np.cos(2 * np.pi * x), axis=1)


def _michalewicz(x, m: int = 10):
    i = np.arange(1, x.shape[1] + 1)
    return -np.sum(np.sin(x) * np.sin(i * x ** 2 / np.pi) ** (2 * m), axis=1)


def _schwefel(x):
    return 418.9829 * x.shape[1] - np.sum(x * np.sin(np.sqrt(np.abs(x))), axis=1)


ANALYTIC_SURFACES: Dict[str, Tuple[Callable[[np.ndarray], np.ndarray], float, float]] = {
    "dejong": (_dejong, -5.12, 5.12),
    "hyperellipsoid": (_hyper_ellipsoid, -5.12, 5.12),
    "ackleypath": (_ackley_path, -32.768, 32.768),
    "rastrigin": (_rastrigin, -5.12, 5.12),
    "michalewicz": (_michalewicz, 0.0, np.pi),
    "schwefel": (_schwefel, -500.0, 500.0),
}


@dataclass(frozen=True)
class AnalyticSurface:
    """Canonical benchmark evaluated on [0,1]^d, affinely mapped to its usual domain."""

    name: str
    dim: int

    def __call__(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = U.reshape(-1, self.dim) if self.dim == 1 else U[None, :]
        if U.ndim != 2 or U.shape[1] != self.dim:
            raise SurfaceError(f"{self.name} expects points of width {self.dim}, got shape {U.shape}")
        fn, low, high = ANALYTIC_SURFACES[self.name]
        return fn(low + (high - low) * U)


def _surface_key(name: str) -> str:
    return name.lower().replace("_", "").replace("-", "").replace(" ", "")


def analytic_surface(name: str, dim: int = 2) -> AnalyticSurface:
    key = _surface_key(name)
    if key not in ANALYTIC_SURFACES:
        raise SurfaceError(f"unknown analytic surface {name!r}; choose from {sorted(ANALYTIC_SURFACES)}")
    if dim < 1:
        raise SurfaceError("dim must be positive")
    return AnalyticSurface(key, int(dim))


def analytic_pair(cheap: str, expensive: str, domain: np.ndarray) -> SurfacePair:
    """Pair of analytic surfaces over unit-hypercube points."""
    domain = as_points(domain)
    c = analytic_surface(cheap, domain.shape[1])
    e = analytic_surface(expensive, domain.shape[1])
    return SurfacePair(domain, c(domain), e(domain), Provenance.ANALYTIC, meta={"cheap": c.name, "expensive": e.name})


def spearman_table(expensive: str = "dejong", dim: int = 2, points_per_axis: int = 100) -> Dict[str, Optional[float]]:
    """Spearman r_s of every analytic surface against `expensive` on a uniform grid."""
    grid = unit_grid(dim, points_per_axis)
    reference = analytic_surface(expensive, dim)(grid)
    return {name: spearman(analytic_surface(name, dim)(grid), reference) for name in ANALYTIC_SURFACES}
