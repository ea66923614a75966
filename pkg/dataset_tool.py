"""
Fidelity-tagged observations and the datasets built from them.

Dataset keeps the cheap and expensive splits as separate arrays; the
DescriptorDataset reads and writes the dual-fidelity CSV layout
`id, f1..fP, y_cheap, y_exp` (empty cells for a missing fidelity).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

HOIP_DESCRIPTOR_WIDTH = 14


class DatasetError(ValueError):
    """Raised for malformed or insufficient data."""


class FidelityTag(str, Enum):
    CHEAP = "cheap"
    EXPENSIVE = "expensive"


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    y: float
    tag: FidelityTag

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        if not np.all(np.isfinite(x)):
            raise DatasetError(f"observation has non-finite parameters: {x}")
        if not np.isfinite(self.y):
            raise DatasetError(f"observation has a non-finite target: {self.y}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "tag", FidelityTag(self.tag))


def _as_block(X, dim: Optional[int]) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return np.zeros((0, dim or 0))
    if X.ndim == 1:
        X = X[:, None] if dim in (None, 1) else X[None, :]
    return X


class Dataset:
    """
    Cheap and expensive observations over a shared parameter space.

    Args:
        X_cheap, y_cheap: cheap parameters (N_c, P) and targets (N_c,)
        X_exp, y_exp: expensive parameters (N_e, P) and targets (N_e,)
        dim: parameter width P, required when both splits are empty
    """

    def __init__(self, X_cheap=None, y_cheap=None, X_exp=None, y_exp=None, dim: Optional[int] = None):
        X_cheap = _as_block([] if X_cheap is None else X_cheap, dim)
        X_exp = _as_block([] if X_exp is None else X_exp, dim)
        y_cheap = np.asarray([] if y_cheap is None else y_cheap, dtype=float).ravel()
        y_exp = np.asarray([] if y_exp is None else y_exp, dtype=float).ravel()

        widths = {X.shape[1] for X in (X_cheap, X_exp) if X.shape[0] > 0}
        if dim is not None:
            widths.add(int(dim))
        if len(widths) > 1:
            raise DatasetError(f"inconsistent parameter widths: {sorted(widths)}")
        if not widths:
            raise DatasetError("an empty dataset needs an explicit dim")
        self.dim = widths.pop()

        if X_cheap.shape[0] != y_cheap.shape[0] or X_exp.shape[0] != y_exp.shape[0]:
            raise DatasetError("parameter and target counts differ")
        for name, arr in (("X_cheap", X_cheap), ("y_cheap", y_cheap), ("X_exp", X_exp), ("y_exp", y_exp)):
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"{name} contains non-finite values")

        self.X_cheap = X_cheap.reshape(-1, self.dim)
        self.y_cheap = y_cheap
        self.X_exp = X_exp.reshape(-1, self.dim)
        self.y_exp = y_exp

    @classmethod
    def from_observations(cls, observations: Iterable[Observation], dim: Optional[int] = None) -> "Dataset":
        observations = list(observations)
        cheap = [o for o in observations if o.tag is FidelityTag.CHEAP]
        exp = [o for o in observations if o.tag is FidelityTag.EXPENSIVE]
        if dim is None and observations:
            dim = observations[0].x.shape[0]
        return cls(
            X_cheap=np.array([o.x for o in cheap]) if cheap else None,
            y_cheap=[o.y for o in cheap],
            X_exp=np.array([o.x for o in exp]) if exp else None,
            y_exp=[o.y for o in exp],
            dim=dim,
        )

    @property
    def n_cheap(self) -> int:
        return self.y_cheap.shape[0]

    @property
    def n_exp(self) -> int:
        return self.y_exp.shape[0]

    def __len__(self) -> int:
        return self.n_cheap + self.n_exp

    def observations(self) -> Iterator[Observation]:
        for x, y in zip(self.X_cheap, self.y_cheap):
            yield Observation(x, y, FidelityTag.CHEAP)
        for x, y in zip(self.X_exp, self.y_exp):
            yield Observation(x, y, FidelityTag.EXPENSIVE)

    def add(self, x, y: float, tag: FidelityTag) -> None:
        obs = Observation(x, y, tag)
        if obs.x.shape[0] != self.dim:
            raise DatasetError(f"observation width {obs.x.shape[0]} does not match dataset width {self.dim}")
        if obs.tag is FidelityTag.CHEAP:
            self.X_cheap = np.vstack([self.X_cheap, obs.x[None, :]])
            self.y_cheap = np.append(self.y_cheap, obs.y)
        else:
            self.X_exp = np.vstack([self.X_exp, obs.x[None, :]])
            self.y_exp = np.append(self.y_exp, obs.y)

    def select(self, cheap_idx: Optional[Sequence[int]] = None, exp_idx: Optional[Sequence[int]] = None) -> "Dataset":
        """Row subset; `None` keeps a whole split."""
        ci = np.arange(self.n_cheap) if cheap_idx is None else np.asarray(cheap_idx, dtype=int)
        ei = np.arange(self.n_exp) if exp_idx is None else np.asarray(exp_idx, dtype=int)
        return Dataset(self.X_cheap[ci], self.y_cheap[ci], self.X_exp[ei], self.y_exp[ei], dim=self.dim)

    def cheap_only(self) -> "Dataset":
        return self.select(exp_idx=[])

    def exp_only(self) -> "Dataset":
        return self.select(cheap_idx=[])

    def copy(self) -> "Dataset":
        return self.select()


@dataclass
class DescriptorDataset:
    """
    Descriptor rows with optional cheap and expensive targets.

    Missing targets are NaN; every row carries at least one of them.
    """

    ids: List[str]
    features: np.ndarray
    y_cheap: np.ndarray
    y_exp: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.features = np.asarray(self.features, dtype=float)
        self.y_cheap = np.asarray(self.y_cheap, dtype=float).ravel()
        self.y_exp = np.asarray(self.y_exp, dtype=float).ravel()
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DatasetError(f"features must be a ({n}, P) block, got {self.features.shape}")
        if self.y_cheap.shape[0] != n or self.y_exp.shape[0] != n:
            raise DatasetError("target columns do not match the number of rows")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("descriptor features contain missing or non-finite values")
        missing = np.isnan(self.y_cheap) & np.isnan(self.y_exp)
        if missing.any():
            bad = [self.ids[i] for i in np.flatnonzero(missing)[:5]]
            raise DatasetError(f"rows without any target value: {bad}")

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def cheap_rows(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.y_cheap))

    @property
    def exp_rows(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.y_exp))

    def to_dataset(self, cheap_rows: Sequence[int], exp_rows: Sequence[int]) -> Dataset:
        cheap_rows = np.asarray(cheap_rows, dtype=int)
        exp_rows = np.asarray(exp_rows, dtype=int)
        if np.isnan(self.y_cheap[cheap_rows]).any() or np.isnan(self.y_exp[exp_rows]).any():
            raise DatasetError("selected rows lack the requested fidelity")
        return Dataset(
            self.features[cheap_rows], self.y_cheap[cheap_rows],
            self.features[exp_rows], self.y_exp[exp_rows],
            dim=self.width,
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.features, columns=[f"f{i + 1}" for i in range(self.width)])
        frame.insert(0, "id", self.ids)
        frame["y_cheap"] = self.y_cheap
        frame["y_exp"] = self.y_exp
        return frame

    def write_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path: Union[str, Path], expected_width: Optional[int] = None) -> "DescriptorDataset":
        """
        Load a descriptor file.

        Args:
            path: CSV with columns id, f1..fP, y_cheap, y_exp
            expected_width: Reject files whose feature width differs (14 for HOIP files)
        """
        frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
        for column in ("id", "y_cheap", "y_exp"):
            if column not in frame.columns:
                raise DatasetError(f"{path}: missing column {column!r}")
        feature_cols = [c for c in frame.columns if c not in ("id", "y_cheap", "y_exp")]
        expected = [f"f{i + 1}" for i in range(len(feature_cols))]
        if feature_cols != expected:
            raise DatasetError(f"{path}: feature columns must be f1..fP in order, got {feature_cols}")
        if expected_width is not None and len(feature_cols) != expected_width:
            raise DatasetError(f"{path}: expected {expected_width} descriptor columns, found {len(feature_cols)}")
        logger.info(f"Loaded {len(frame)} descriptor rows of width {len(feature_cols)} from {path}")
        return cls(
            ids=frame["id"].tolist(),
            features=frame[feature_cols].to_numpy(dtype=float),
            y_cheap=frame["y_cheap"].to_numpy(dtype=float),
            y_exp=frame["y_exp"].to_numpy(dtype=float),
        )
