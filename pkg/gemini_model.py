"""
Gemini bias-correction model.

A latent net F_L is shared by both fidelities. On the expensive branch the
parameters are first shifted by the parameter-bias net F_P and the latent
output is corrected by the target-bias net F_T:

    cheap:     out = F_L(x)
    expensive: h = F_L(x + F_P(x)),  out = h + F_T(h)

Each output is split into a mean and a raw sigma, sigma = S(raw) + floor with
floors 0.01 (cheap) and 0.1 (expensive). Training minimizes

    L = L_exp + xi * L_cheap + lambda_bias * (|F_P|^2 + |F_T|^2) + lambda_latent * |F_L|^2

with Adam. This module also holds the single-fidelity baseline nets, the
cross-validated correlation estimate used by the planner and a random
hyperparameter search.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from dataset_tool import Dataset, DatasetError, FidelityTag
from dense_net import (
    ActivationKind,
    AdamState,
    DenseNet,
    InputShapeError,
    NetworkStateError,
    TrainingDivergenceError,
    adam_step,
)
from stats_tool import pearson, seed_sequence

logger = logging.getLogger(__name__)

SIGMA_FLOOR_CHEAP = 0.01
SIGMA_FLOOR_EXP = 0.1
MIN_HOLDOUT = 2
MODEL_FORMAT = "gemini-lab/gemini-model"
MODEL_VERSION = 1


class GeminiHyperparams(BaseModel):
    """Gemini architecture and training settings; defaults are the tuned optimum."""

    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(50, ge=1, description="Cheap observations per training step")
    learning_rate: float = Field(0.000272, gt=0, description="Adam learning rate")
    act_fbias: ActivationKind = Field(ActivationKind.SOFTPLUS, description="Hidden activation of the parameter-bias net")
    act_tbias: ActivationKind = Field(ActivationKind.SOFTPLUS, description="Hidden activation of the target-bias net")
    act_latent: ActivationKind = Field(ActivationKind.LEAKY_RELU, description="Hidden activation of the latent net")
    depth_fbias: int = Field(1, ge=0, description="Hidden layers in the parameter-bias net")
    depth_latent: int = Field(3, ge=0, description="Hidden layers in the latent net")
    depth_tbias: int = Field(1, ge=0, description="Hidden layers in the target-bias net")
    hidden_fbias: Optional[int] = Field(None, ge=1, description="Units per parameter-bias layer; null means the input width P")
    hidden_latent: int = Field(96, ge=1, description="Units per latent layer")
    hidden_tbias: int = Field(3, ge=1, description="Units per target-bias layer")
    coeff_both: float = Field(0.5, ge=0, description="Weight xi of the cheap-branch loss")
    reg_latent: float = Field(1e-3, ge=0, description="L2 coefficient on the latent net")
    reg_bias: float = Field(0.0894, ge=0, description="L2 coefficient on both bias nets")
    max_epochs: int = Field(30000, ge=1, description="Epoch budget")
    patience: int = Field(500, ge=1, description="Epochs without holdout improvement before stopping")
    holdout_fraction: float = Field(0.1, ge=0, lt=1, description="Share of each fidelity held out for early stopping")
    min_steps_per_epoch: int = Field(10, ge=1, description="Adam steps per epoch at least; small training sets repeat their shuffled batches")
    min_improvement: float = Field(1e-4, ge=0, description="Smallest drop in the monitored loss that resets the patience counter")
    batch_norm_latent: bool = Field(True, description="Batch-normalize latent hidden layers")
    batch_norm_bias: bool = Field(False, description="Batch-normalize bias-net hidden layers")

    def fbias_width(self, input_dim: int) -> int:
        return self.hidden_fbias if self.hidden_fbias is not None else input_dim


@dataclass
class Prediction:
    mean: float
    sigma: float
    tag: FidelityTag


@dataclass
class LossBreakdown:
    total: float
    exp: float
    cheap: float
    regularization: float

    @property
    def data(self) -> float:
        return self.total - self.regularization


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    loss_exp: float
    loss_cheap: float
    holdout: Optional[float]


@dataclass
class Normalizer:
    """Min-max input scaling and z-scored targets."""

    x_min: np.ndarray
    x_span: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim), 0.0, 1.0)

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "Normalizer":
        x_min = X.min(axis=0)
        span = X.max(axis=0) - x_min
        span[span == 0.0] = 1.0
        y_std = float(y.std()) if y.shape[0] > 1 else 0.0
        return cls(x_min, span, float(y.mean()), y_std if y_std > 0.0 else 1.0)

    def transform_x(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.x_min.shape[0]) if self.x_min.shape[0] == 1 else X[None, :]
        if X.ndim != 2 or X.shape[1] != self.x_min.shape[0]:
            raise InputShapeError(f"expected inputs of width {self.x_min.shape[0]}, got shape {X.shape}")
        return (X - self.x_min) / self.x_span

    def transform_y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def to_dict(self) -> dict:
        return {"x_min": self.x_min.tolist(), "x_span": self.x_span.tolist(), "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(np.array(data["x_min"], dtype=float), np.array(data["x_span"], dtype=float),
                   float(data["y_mean"]), float(data["y_std"]))


def split_heads(out: np.ndarray, floor: float) -> Tuple[np.ndarray, np.ndarray]:
    return out[:, 0], expit(out[:, 1]) + floor


def gaussian_nll(y, mu, sigma) -> float:
    """Summed heteroscedastic Gaussian negative log-likelihood (constant dropped)."""
    y, mu, sigma = (np.asarray(a, dtype=float) for a in (y, mu, sigma))
    return float(np.sum(0.5 * ((y - mu) ** 2 / sigma ** 2 + np.log(sigma ** 2))))


def _nll_with_grad(y: np.ndarray, out: np.ndarray, floor: float) -> Tuple[float, np.ndarray]:
    mu = out[:, 0]
    s = expit(out[:, 1])
    sigma = s + floor
    resid = y - mu
    nll = float(np.sum(0.5 * (resid ** 2 / sigma ** 2 + np.log(sigma ** 2))))
    d_mu = -resid / sigma ** 2
    d_sigma = -(resid ** 2) / sigma ** 3 + 1.0 / sigma
    return nll, np.column_stack([d_mu, d_sigma * s * (1.0 - s)])


def _add_weight_decay(grads: Dict[str, np.ndarray], net: DenseNet, coeff: float, prefix: str = "") -> None:
    params = net.parameters()
    for name in net.weight_names():
        grads[prefix + name] = grads[prefix + name] + 2.0 * coeff * params[name]


def _holdout_split(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """(train, holdout) indices; a holdout under MIN_HOLDOUT points is not drawn."""
    n_hold = int(math.floor(fraction * n))
    if n_hold < MIN_HOLDOUT or n - n_hold < 1:
        n_hold = 0
    perm = rng.permutation(n)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _run_epochs(
    step: Callable[[object, AdamState], LossBreakdown],
    epoch_batches: Callable[[], Iterator[object]],
    holdout_loss: Callable[[], Optional[float]],
    snapshot: Callable[[], object],
    restore: Callable[[object], None],
    hyper: GeminiHyperparams,
    label: str,
) -> List[HistoryRow]:
    """Adam epochs with patience-based early stopping; the best state is restored."""
    adam = AdamState(learning_rate=hyper.learning_rate)
    best, best_state, stale = math.inf, snapshot(), 0
    history: List[HistoryRow] = []
    for epoch in range(hyper.max_epochs):
        totals = np.zeros(3)
        steps = 0
        try:
            for batch in epoch_batches():
                parts = step(batch, adam)
                totals += (parts.total, parts.exp, parts.cheap)
                steps += 1
        except TrainingDivergenceError as err:
            raise TrainingDivergenceError(f"{label} diverged in epoch {epoch}: {err}", block=err.block, epoch=epoch) from err
        means = totals / max(steps, 1)
        held = holdout_loss()
        monitored = held if held is not None else means[0]
        if not (np.all(np.isfinite(means)) and np.isfinite(monitored)):
            raise TrainingDivergenceError(f"{label} loss became non-finite in epoch {epoch}", epoch=epoch)
        history.append(HistoryRow(epoch, float(means[0]), float(means[1]), float(means[2]), held))

        if monitored < best - hyper.min_improvement:
            best, best_state, stale = monitored, snapshot(), 0
        else:
            stale += 1
            if stale >= hyper.patience:
                logger.debug(f"{label}: early stop at epoch {epoch}, best monitored loss {best:.6g}")
                break
    restore(best_state)
    return history


class GeminiModel:
    """
    Twin-branch network relating cheap and expensive evaluations.

    Args:
        input_dim: Parameter width P
        hyper: Architecture and training settings
        seed: Seed for weight init, shuffling and holdout selection
    """

    def __init__(self, input_dim: int, hyper: Optional[GeminiHyperparams] = None, seed=None):
        if input_dim < 1:
            raise ValueError("input_dim must be positive")
        self.input_dim = int(input_dim)
        self.hyper = hyper or GeminiHyperparams()
        self.rng = np.random.default_rng(seed)
        h = self.hyper
        P = self.input_dim
        # bias nets start at zero, so the expensive branch starts as the cheap one
        self.f_p = DenseNet.build(P, [h.fbias_width(P)] * h.depth_fbias, P, h.act_fbias,
                                  ActivationKind.LINEAR, batch_norm=h.batch_norm_bias, rng=self.rng, zero_output=True)
        self.f_l = DenseNet.build(P, [h.hidden_latent] * h.depth_latent, 2, h.act_latent,
                                  ActivationKind.LINEAR, batch_norm=h.batch_norm_latent, rng=self.rng)
        self.f_t = DenseNet.build(2, [h.hidden_tbias] * h.depth_tbias, 2, h.act_tbias,
                                  ActivationKind.LINEAR, batch_norm=h.batch_norm_bias, rng=self.rng, zero_output=True)
        self.normalizer: Optional[Normalizer] = None
        self.history: List[HistoryRow] = []

    @property
    def nets(self) -> Dict[str, DenseNet]:
        return {"f_p": self.f_p, "f_l": self.f_l, "f_t": self.f_t}

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{key}.{name}": arr for key, net in self.nets.items() for name, arr in net.parameters().items()}

    def snapshot(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {key: net.snapshot() for key, net in self.nets.items()}

    def restore(self, state: Dict[str, Dict[str, np.ndarray]]) -> None:
        for key, net in self.nets.items():
            net.restore(state[key])

    # forward passes in normalized units

    def _cheap_out(self, Xn: np.ndarray, mode: str = "eval") -> np.ndarray:
        return self.f_l.forward(Xn, mode)

    def _exp_out(self, Xn: np.ndarray, mode: str = "eval") -> np.ndarray:
        h = self.f_l.forward(Xn + self.f_p.forward(Xn, mode), mode)
        return h + self.f_t.forward(h, mode)

    def _require_trained(self) -> Normalizer:
        if self.normalizer is None:
            raise NetworkStateError("GeminiModel has not been trained")
        return self.normalizer

    def predict_arrays(self, X, fidelity: FidelityTag = FidelityTag.EXPENSIVE, normalized: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """
        Predicted mean and sigma for a batch.

        Args:
            X: Parameters of shape (n, P), raw units
            fidelity: Branch to evaluate
            normalized: Return model units instead of raw target units
        """
        norm = self._require_trained()
        Xn = norm.transform_x(X)
        if FidelityTag(fidelity) is FidelityTag.CHEAP:
            mu, sigma = split_heads(self._cheap_out(Xn), SIGMA_FLOOR_CHEAP)
        else:
            mu, sigma = split_heads(self._exp_out(Xn), SIGMA_FLOOR_EXP)
        if normalized:
            return mu, sigma
        return norm.y_mean + norm.y_std * mu, norm.y_std * sigma

    def predict(self, X, fidelity: FidelityTag = FidelityTag.EXPENSIVE) -> List[Prediction]:
        tag = FidelityTag(fidelity)
        mu, sigma = self.predict_arrays(X, tag)
        return [Prediction(float(m), float(s), tag) for m, s in zip(mu, sigma)]

    def predict_cheap(self, X) -> List[Prediction]:
        return self.predict(X, FidelityTag.CHEAP)

    def predict_expensive(self, X) -> List[Prediction]:
        return self.predict(X, FidelityTag.EXPENSIVE)

    def predict_mean(self, X) -> np.ndarray:
        return self.predict_arrays(X, FidelityTag.EXPENSIVE)[0]

    def _composite(self, Xc, yc, Xe, ye, mode: str, need_grads: bool):
        n_c, n_e = len(yc), len(ye)
        if n_c == 0 and n_e == 0:
            raise ValueError("loss needs at least one nonempty batch")
        if need_grads and mode != "train":
            raise ValueError("gradients require a train-mode pass")
        h = self.hyper

        blocks, cache_p = [], None
        if n_c:
            blocks.append(Xc)
        if n_e:
            blocks.append(Xe + self.f_p.forward(Xe, mode))
            cache_p = self.f_p.last_cache
        H = self.f_l.forward(np.vstack(blocks), mode)
        cache_l = self.f_l.last_cache

        loss_c = loss_e = 0.0
        g_c = g_e = None
        cache_t = None
        if n_c:
            loss_c, g_c = _nll_with_grad(yc, H[:n_c], SIGMA_FLOOR_CHEAP)
        if n_e:
            He = H[n_c:]
            out_e = He + self.f_t.forward(He, mode)
            cache_t = self.f_t.last_cache
            loss_e, g_e = _nll_with_grad(ye, out_e, SIGMA_FLOOR_EXP)

        reg = h.reg_bias * (self.f_p.squared_norm() + self.f_t.squared_norm()) + h.reg_latent * self.f_l.squared_norm()
        parts = LossBreakdown(total=loss_e + h.coeff_both * loss_c + reg, exp=loss_e, cheap=loss_c, regularization=reg)
        if not need_grads:
            return parts, None

        upstream = []
        if n_c:
            upstream.append(h.coeff_both * g_c)
        if n_e:
            grads_t, dH_t = self.f_t.backward(g_e, cache_t)
            upstream.append(g_e + dH_t)
        grads_l, d_in = self.f_l.backward(np.vstack(upstream), cache_l)
        if n_e:
            grads_p, _ = self.f_p.backward(d_in[n_c:], cache_p)
        else:
            grads_p = {k: np.zeros_like(v) for k, v in self.f_p.parameters().items()}
            grads_t = {k: np.zeros_like(v) for k, v in self.f_t.parameters().items()}

        _add_weight_decay(grads_p, self.f_p, h.reg_bias)
        _add_weight_decay(grads_t, self.f_t, h.reg_bias)
        _add_weight_decay(grads_l, self.f_l, h.reg_latent)
        grads = {}
        for key, g in (("f_p", grads_p), ("f_l", grads_l), ("f_t", grads_t)):
            grads.update({f"{key}.{name}": arr for name, arr in g.items()})
        return parts, grads

    def loss(self, X_cheap, y_cheap, X_exp, y_exp, mode: str = "eval") -> LossBreakdown:
        """Composite loss on batches already in model units (normalized inputs and targets)."""
        Xc, yc, Xe, ye = self._batch_arrays(X_cheap, y_cheap, X_exp, y_exp)
        return self._composite(Xc, yc, Xe, ye, mode, need_grads=False)[0]

    def loss_and_grads(self, X_cheap, y_cheap, X_exp, y_exp) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
        Xc, yc, Xe, ye = self._batch_arrays(X_cheap, y_cheap, X_exp, y_exp)
        return self._composite(Xc, yc, Xe, ye, "train", need_grads=True)

    def refresh_batch_norm(self, Xc: np.ndarray, Xe: np.ndarray) -> None:
        """Set batch-norm running statistics from the full training inputs (model units)."""
        Xc = np.asarray(Xc, dtype=float).reshape(-1, self.input_dim)
        Xe = np.asarray(Xe, dtype=float).reshape(-1, self.input_dim)
        self.f_p.refresh_batch_norm(Xe)
        shifted = Xe + self.f_p.forward(Xe) if len(Xe) else Xe
        self.f_l.refresh_batch_norm(np.vstack([Xc, shifted]))
        if len(Xe):
            self.f_t.refresh_batch_norm(self.f_l.forward(shifted))

    def _batch_arrays(self, Xc, yc, Xe, ye):
        P = self.input_dim
        Xc = np.zeros((0, P)) if Xc is None else np.asarray(Xc, dtype=float).reshape(-1, P)
        Xe = np.zeros((0, P)) if Xe is None else np.asarray(Xe, dtype=float).reshape(-1, P)
        yc = np.zeros(0) if yc is None else np.asarray(yc, dtype=float).ravel()
        ye = np.zeros(0) if ye is None else np.asarray(ye, dtype=float).ravel()
        return Xc, yc, Xe, ye

    def train(self, dataset: Dataset) -> List[HistoryRow]:
        """
        Fit all three nets on a dual-fidelity dataset.

        Each epoch shuffles the cheap set into batches, repeating the pass
        until `min_steps_per_epoch` steps have run; every step pairs a cheap
        batch with a freshly resampled expensive batch. Early stopping watches
        the loss on a holdout drawn from each fidelity. An expensive split too
        small to spare MIN_HOLDOUT points is trained on in full and its
        training loss joins the monitored loss.

        Raises:
            DatasetError: no observations at all
            TrainingDivergenceError: a loss or update stopped being finite
        """
        if len(dataset) == 0:
            raise DatasetError("cannot train on an empty dataset")
        if dataset.dim != self.input_dim:
            raise InputShapeError(f"dataset width {dataset.dim} does not match model width {self.input_dim}")
        if dataset.n_exp == 0:
            logger.info("No expensive observations: training the latent net as a plain heteroscedastic regressor")
        elif dataset.n_cheap == 0:
            logger.info("No cheap observations: training on the expensive branch only")

        h = self.hyper
        y_ref = dataset.y_cheap if dataset.n_cheap else dataset.y_exp
        self.normalizer = norm = Normalizer.fit(np.vstack([dataset.X_cheap, dataset.X_exp]), y_ref)
        Xc, yc = norm.transform_x(dataset.X_cheap), norm.transform_y(dataset.y_cheap)
        Xe, ye = norm.transform_x(dataset.X_exp), norm.transform_y(dataset.y_exp)

        c_train, c_hold = _holdout_split(dataset.n_cheap, h.holdout_fraction, self.rng)
        e_train, e_hold = _holdout_split(dataset.n_exp, h.holdout_fraction, self.rng)
        Xc_t, yc_t, Xe_t, ye_t = Xc[c_train], yc[c_train], Xe[e_train], ye[e_train]
        e_watch = e_hold if len(e_hold) else e_train
        has_holdout = len(c_hold) + len(e_watch) > 0

        def one_pass():
            n_c, n_e = len(yc_t), len(ye_t)
            if n_c:
                perm = self.rng.permutation(n_c)
                for start in range(0, n_c, h.batch_size):
                    ei = self.rng.choice(n_e, size=min(h.batch_size, n_e), replace=False) if n_e else np.zeros(0, dtype=int)
                    yield perm[start:start + h.batch_size], ei
            else:
                perm = self.rng.permutation(n_e)
                for start in range(0, n_e, h.batch_size):
                    yield np.zeros(0, dtype=int), perm[start:start + h.batch_size]

        def batches():
            steps = 0
            while steps < h.min_steps_per_epoch:
                for batch in one_pass():
                    steps += 1
                    yield batch

        def step(batch, adam):
            ci, ei = batch
            parts, grads = self._composite(Xc_t[ci], yc_t[ci], Xe_t[ei], ye_t[ei], "train", need_grads=True)
            adam_step(self.parameters(), grads, adam)
            return parts

        def holdout():
            self.refresh_batch_norm(Xc_t, Xe_t)
            if not has_holdout:
                return None
            return self._composite(Xc[c_hold], yc[c_hold], Xe[e_watch], ye[e_watch], "eval", need_grads=False)[0].data

        self.history = _run_epochs(step, batches, holdout, self.snapshot, self.restore, h, "GeminiModel")
        logger.debug(f"GeminiModel trained for {len(self.history)} epochs on {dataset.n_cheap} cheap / {dataset.n_exp} expensive points")
        return self.history

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.history], columns=["epoch", "loss", "loss_exp", "loss_cheap", "holdout"])

    def write_history(self, path: Union[str, Path]) -> None:
        self.history_frame().to_csv(path, index=False)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "input_dim": self.input_dim,
            "hyper": self.hyper.model_dump(mode="json"),
            "normalizer": None if self.normalizer is None else self.normalizer.to_dict(),
            "nets": {key: net.to_dict() for key, net in self.nets.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeminiModel":
        if data.get("format") != MODEL_FORMAT or data.get("version") != MODEL_VERSION:
            raise ValueError(f"not a version {MODEL_VERSION} Gemini checkpoint")
        model = cls(data["input_dim"], GeminiHyperparams(**data["hyper"]))
        model.f_p = DenseNet.from_dict(data["nets"]["f_p"])
        model.f_l = DenseNet.from_dict(data["nets"]["f_l"])
        model.f_t = DenseNet.from_dict(data["nets"]["f_t"])
        if data.get("normalizer"):
            model.normalizer = Normalizer.from_dict(data["normalizer"])
        return model

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GeminiModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


class BaselineVariant(str, Enum):
    NN_EXP = "nn_exp"
    NN_CHEAP = "nn_cheap"
    NN_BOTH = "nn_both"


class HeteroscedasticNet:
    """Single-fidelity mean/sigma regressor with the latent-net topology."""

    def __init__(self, input_dim: int, hyper: Optional[GeminiHyperparams] = None, sigma_floor: float = SIGMA_FLOOR_EXP, seed=None):
        self.hyper = hyper or GeminiHyperparams()
        self.sigma_floor = sigma_floor
        self.rng = np.random.default_rng(seed)
        h = self.hyper
        self.net = DenseNet.build(input_dim, [h.hidden_latent] * h.depth_latent, 2, h.act_latent,
                                  ActivationKind.LINEAR, batch_norm=h.batch_norm_latent, rng=self.rng)
        self.normalizer: Optional[Normalizer] = None
        self.history: List[HistoryRow] = []

    def train(self, X, y) -> List[HistoryRow]:
        X = np.asarray(X, dtype=float).reshape(-1, self.net.input_dim)
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] == 0:
            raise DatasetError("cannot train a baseline on zero observations")
        h = self.hyper
        self.normalizer = norm = Normalizer.fit(X, y)
        Xn, yn = norm.transform_x(X), norm.transform_y(y)
        train_idx, hold_idx = _holdout_split(len(yn), h.holdout_fraction, self.rng)
        watch_idx = hold_idx if len(hold_idx) else train_idx

        def batches():
            steps = 0
            while steps < h.min_steps_per_epoch:
                perm = self.rng.permutation(train_idx)
                for start in range(0, len(perm), h.batch_size):
                    steps += 1
                    yield perm[start:start + h.batch_size]

        def step(idx, adam):
            out = self.net.forward(Xn[idx], "train")
            nll, g = _nll_with_grad(yn[idx], out, self.sigma_floor)
            grads, _ = self.net.backward(g)
            _add_weight_decay(grads, self.net, h.reg_latent)
            adam_step(self.net.parameters(), grads, adam)
            reg = h.reg_latent * self.net.squared_norm()
            return LossBreakdown(total=nll + reg, exp=nll, cheap=0.0, regularization=reg)

        def holdout():
            self.net.refresh_batch_norm(Xn[train_idx])
            mu, sigma = split_heads(self.net.forward(Xn[watch_idx]), self.sigma_floor)
            return gaussian_nll(yn[watch_idx], mu, sigma)

        self.history = _run_epochs(step, batches, holdout, self.net.snapshot, self.net.restore, h, "HeteroscedasticNet")
        return self.history

    def predict_arrays(self, X, normalized: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        if self.normalizer is None:
            raise NetworkStateError("baseline net has not been trained")
        mu, sigma = split_heads(self.net.forward(self.normalizer.transform_x(X)), self.sigma_floor)
        if normalized:
            return mu, sigma
        return self.normalizer.y_mean + self.normalizer.y_std * mu, self.normalizer.y_std * sigma

    def predict_mean(self, X) -> np.ndarray:
        return self.predict_arrays(X)[0]


def baseline_train(variant: BaselineVariant, dataset: Dataset, hyper: Optional[GeminiHyperparams] = None, seed=None) -> HeteroscedasticNet:
    """
    Train one of the single-network reference models.

    nn_exp uses the expensive split, nn_cheap the cheap split and nn_both the
    two splits merged as if they were one fidelity.
    """
    variant = BaselineVariant(variant)
    if variant is BaselineVariant.NN_EXP:
        X, y, floor = dataset.X_exp, dataset.y_exp, SIGMA_FLOOR_EXP
    elif variant is BaselineVariant.NN_CHEAP:
        X, y, floor = dataset.X_cheap, dataset.y_cheap, SIGMA_FLOOR_CHEAP
    else:
        X = np.vstack([dataset.X_cheap, dataset.X_exp])
        y = np.concatenate([dataset.y_cheap, dataset.y_exp])
        floor = SIGMA_FLOOR_EXP
    if y.shape[0] == 0:
        raise DatasetError(f"{variant.value} needs at least one observation in its training split")
    model = HeteroscedasticNet(dataset.dim, hyper, sigma_floor=floor, seed=seed)
    model.train(X, y)
    return model


FitPredict = Callable[[Dataset, np.ndarray, np.random.SeedSequence], np.ndarray]


def gemini_fit_predict(hyper: Optional[GeminiHyperparams] = None) -> FitPredict:
    def fit_predict(train: Dataset, X_val: np.ndarray, seed: np.random.SeedSequence) -> np.ndarray:
        model = GeminiModel(train.dim, hyper, seed=seed)
        model.train(train)
        return model.predict_mean(X_val)

    return fit_predict


@dataclass
class RhoEstimate:
    value: Optional[float]
    fold_values: List[float] = field(default_factory=list)
    folds: List[np.ndarray] = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return self.value is not None


def cv_folds(n_exp: int, k_folds: int, rng: np.random.Generator) -> List[np.ndarray]:
    """
    Random expensive-index folds, each with at least 2 validation points.

    With fewer than 4 points two such folds cannot be formed; every point
    becomes its own fold so each training set keeps n_exp - 1 expensive
    points, and the caller pools the single-point folds.
    """
    if k_folds < 2:
        raise ValueError("k_folds must be at least 2")
    if n_exp < 2:
        return []
    k = min(k_folds, n_exp // 2)
    if k < 2:
        return [np.array([i]) for i in rng.permutation(n_exp)]
    return [np.sort(f) for f in np.array_split(rng.permutation(n_exp), k)]


def cross_validate_rho(
    dataset: Dataset,
    hyper: Optional[GeminiHyperparams] = None,
    k_folds: int = 3,
    seed=None,
    n_jobs: int = 1,
    fit_predict: Optional[FitPredict] = None,
) -> RhoEstimate:
    """
    Mean Pearson coefficient between held-out expensive targets and model predictions.

    Cheap observations stay in every training fold. A fold whose predictions
    or targets are constant contributes 0. With 2 or 3 expensive points the
    leave-one-out predictions are pooled into a single fold.
    """
    if dataset.n_exp < 2:
        logger.info(f"rho undefined with {dataset.n_exp} expensive observation(s)")
        return RhoEstimate(value=None)
    fit_predict = fit_predict or gemini_fit_predict(hyper)
    root = seed_sequence(seed)
    folds = cv_folds(dataset.n_exp, k_folds, np.random.default_rng(root.spawn(1)[0]))
    fold_seqs = root.spawn(len(folds))
    all_idx = np.arange(dataset.n_exp)

    def run_fold(val_idx, seq):
        train = dataset.select(exp_idx=np.setdiff1d(all_idx, val_idx))
        return fit_predict(train, dataset.X_exp[val_idx], seq)

    predictions = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(run_fold)(val_idx, seq) for val_idx, seq in zip(folds, fold_seqs)
    )
    predictions = [np.asarray(p, dtype=float).ravel() for p in predictions]
    if all(len(f) == 1 for f in folds):
        folds, predictions = [np.concatenate(folds)], [np.concatenate(predictions)]
    values = []
    for i, (val_idx, pred) in enumerate(zip(folds, predictions)):
        r = pearson(pred, dataset.y_exp[val_idx])
        if r is None:
            logger.warning(f"rho_cv fold {i}: zero variance in predictions or targets, counting as 0")
            r = 0.0
        values.append(r)
    return RhoEstimate(value=float(np.mean(values)), fold_values=values, folds=folds)


def rho_cv(dataset: Dataset, hyper: Optional[GeminiHyperparams] = None, k_folds: int = 3, seed=None,
           n_jobs: int = 1, fit_predict: Optional[FitPredict] = None) -> Optional[float]:
    """Cross-validated rho, or None while fewer than 2 expensive observations exist."""
    return cross_validate_rho(dataset, hyper, k_folds, seed, n_jobs, fit_predict).value


SEARCH_SPACE = {
    "batch_size": (50, 100),
    "learning_rate": (5e-5, 3e-4),
    "act_bias": (ActivationKind.LEAKY_RELU, ActivationKind.SOFTPLUS),
    "hidden_tbias": (1, 3),
    "coeff_both": (0.5, 3.0),
    "reg_bias": (1e-3, 2e-1),
}


class SearchTrial(BaseModel):
    hyper: GeminiHyperparams
    score: float = Field(..., description="Mean validation Pearson r over the splits")


def sample_hyperparams(rng: np.random.Generator, base: Optional[GeminiHyperparams] = None) -> GeminiHyperparams:
    base = base or GeminiHyperparams()
    s = SEARCH_SPACE
    return base.model_copy(update={
        "batch_size": int(rng.integers(s["batch_size"][0], s["batch_size"][1] + 1)),
        "learning_rate": float(np.exp(rng.uniform(*np.log(s["learning_rate"])))),
        "act_fbias": ActivationKind(str(rng.choice([a.value for a in s["act_bias"]]))),
        "act_tbias": ActivationKind(str(rng.choice([a.value for a in s["act_bias"]]))),
        "hidden_tbias": int(rng.integers(s["hidden_tbias"][0], s["hidden_tbias"][1] + 1)),
        "coeff_both": float(rng.uniform(*s["coeff_both"])),
        "reg_bias": float(np.exp(rng.uniform(*np.log(s["reg_bias"])))),
    })


def random_search(
    splits: Sequence[Tuple[Dataset, np.ndarray, np.ndarray]],
    n_trials: int,
    seed=None,
    n_jobs: int = 1,
    base: Optional[GeminiHyperparams] = None,
) -> List[SearchTrial]:
    """
    Score sampled hyperparameter sets by validation Pearson r.

    Args:
        splits: (training dataset, X_val, y_val_expensive) triples
        n_trials: Number of sampled configurations
        seed: Seed for sampling and for every trained model

    Returns:
        Trials sorted best first
    """
    if not splits:
        raise DatasetError("random_search needs at least one split")
    rng = np.random.default_rng(seed)
    candidates = [sample_hyperparams(rng, base) for _ in range(n_trials)]
    seqs = seed_sequence(seed).spawn(n_trials)

    def score(hyper, seq):
        rs = []
        for (train, X_val, y_val), child in zip(splits, seq.spawn(len(splits))):
            model = GeminiModel(train.dim, hyper, seed=child)
            model.train(train)
            r = pearson(model.predict_mean(X_val), y_val)
            rs.append(0.0 if r is None else r)
        return float(np.mean(rs))

    scores = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(score)(h, s) for h, s in zip(candidates, seqs))
    trials = [SearchTrial(hyper=h, score=s) for h, s in zip(candidates, scores)]
    trials.sort(key=lambda t: t.score, reverse=True)
    logger.info(f"random_search: best mean r {trials[0].score:.3f} over {n_trials} trials")
    return trials
