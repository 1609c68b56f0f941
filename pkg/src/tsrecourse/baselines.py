"""Forecast-then-subtract recourse baselines.

Each predictor maps the K-1 steps before t to a normal value x~_t; the action
is x~_t - x_t. Evaluation goes through the same ``recourse.explain`` loop as
the learned recourse function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .gvar import GvarModel
from .nn import DTYPE, as_tensor, check_finite, read_json, single_thread, state_from_json, state_to_json, write_json
from .recourse import Policy
from .series import window_array

KINDS = ("mlp", "lstm", "var", "gvar")


class SingularDesignError(ValueError):
    pass


class MlpPredictor(nn.Module):
    def __init__(self, n_in: int, d: int, hidden=(100, 100, 100), seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            sizes = [n_in * d, *hidden, d]
            layers: list[nn.Module] = []
            for a, b in zip(sizes[:-1], sizes[1:]):
                layers += [nn.Linear(a, b, dtype=DTYPE), nn.ReLU()]
            self.net = nn.Sequential(*layers[:-1])
        self.hidden = tuple(hidden)

    def forward(self, hist: torch.Tensor) -> torch.Tensor:
        return self.net(hist.reshape(*hist.shape[:-2], -1))


class LstmPredictor(nn.Module):
    def __init__(self, d: int, hidden: int = 100, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.lstm = nn.LSTM(d, hidden, batch_first=True, dtype=DTYPE)
            self.head = nn.Linear(hidden, d, dtype=DTYPE)
        self.hidden = hidden

    def forward(self, hist: torch.Tensor) -> torch.Tensor:
        batch = hist.shape[:-2]
        _, (h_n, _) = self.lstm(hist.reshape(-1, *hist.shape[-2:]))
        return self.head(h_n[-1]).reshape(*batch, -1)


class VarPredictor(nn.Module):
    """x_t = c + sum_k A_k x_{t-k}; ``coef`` stacks [c, A_1, ..., A_p] row-wise transposed."""

    def __init__(self, coef: np.ndarray):
        super().__init__()
        self.register_buffer("coef", as_tensor(coef))

    @property
    def n_lags(self) -> int:
        return (self.coef.shape[0] - 1) // self.coef.shape[1]

    def lag_matrices(self) -> np.ndarray:
        d, p = self.coef.shape[1], self.n_lags
        return self.coef[1:].numpy().reshape(p, d, d).transpose(0, 2, 1)

    def forward(self, hist: torch.Tensor) -> torch.Tensor:
        rev = hist.flip(-2).reshape(*hist.shape[:-2], -1)
        return self.coef[0] + rev @ self.coef[1:]


class GvarPredictor(nn.Module):
    def __init__(self, gvar: GvarModel):
        super().__init__()
        self.gvar = gvar

    def forward(self, hist: torch.Tensor) -> torch.Tensor:
        return self.gvar.forecast_tensor(hist)


@dataclass
class PredictorTrainConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class NormalValuePredictor:
    kind: str
    n_lags: int
    module: nn.Module

    def predict_tensor(self, hist: torch.Tensor) -> torch.Tensor:
        return self.module(hist)

    def predict(self, hist) -> np.ndarray:
        hist = np.asarray(hist, dtype=np.float64)
        if hist.shape[-2] != self.n_lags:
            raise ValueError(f"history must have {self.n_lags} rows, got {hist.shape[-2]}")
        with torch.no_grad():
            return self.module(as_tensor(hist)).numpy()

    def to_json(self) -> dict:
        obj = {"schema": 1, "kind": self.kind, "n_lags": self.n_lags}
        if self.kind == "var":
            obj["coef"] = self.module.coef.numpy().tolist()
        elif self.kind == "gvar":
            obj["gvar"] = self.module.gvar.to_json()
        else:
            obj["d"] = int(list(self.module.parameters())[-1].shape[0])
            obj["params"] = state_to_json(self.module)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "NormalValuePredictor":
        kind, p = obj["kind"], obj["n_lags"]
        if kind == "var":
            module: nn.Module = VarPredictor(np.array(obj["coef"]))
        elif kind == "gvar":
            module = GvarPredictor(GvarModel.from_json(obj["gvar"]))
        else:
            module = MlpPredictor(p, obj["d"]) if kind == "mlp" else LstmPredictor(obj["d"])
            state_from_json(module, obj["params"])
        return cls(kind, p, module)

    def save(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "NormalValuePredictor":
        return cls.from_json(read_json(path))


def fit_var(values: np.ndarray, n_lags: int) -> VarPredictor:
    """Least-squares VAR with intercept."""
    segs = window_array(values, n_lags + 1)
    Y = segs[:, -1]
    X = segs[:, :-1][:, ::-1].reshape(segs.shape[0], -1)
    X = np.hstack([np.ones((X.shape[0], 1)), X])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesignError("VAR design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return VarPredictor(coef)


def train_predictor(kind: str, normal_values: np.ndarray, n_lags: int,
                    cfg: Optional[PredictorTrainConfig] = None, gvar: Optional[GvarModel] = None) -> NormalValuePredictor:
    """One-step predictor from ``n_lags`` previous steps, fit on normal data only."""
    cfg = cfg or PredictorTrainConfig()
    if kind not in KINDS:
        raise ValueError(f"unknown predictor kind {kind!r}")
    values = np.asarray(normal_values, dtype=np.float64)
    if kind == "var":
        return NormalValuePredictor(kind, n_lags, fit_var(values, n_lags))
    if kind == "gvar":
        if gvar is None:
            raise ValueError("gvar predictor needs a trained GVAR")
        return NormalValuePredictor(kind, n_lags, GvarPredictor(gvar))
    d = values.shape[1]
    with single_thread():
        module = MlpPredictor(n_lags, d, seed=cfg.seed) if kind == "mlp" else LstmPredictor(d, seed=cfg.seed)
        segs = as_tensor(np.ascontiguousarray(window_array(values, n_lags + 1)))
        opt = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate)
        gen = torch.Generator().manual_seed(cfg.seed + 3)
        step = 0
        for _ in range(cfg.epochs):
            order = torch.randperm(segs.shape[0], generator=gen)
            for i in range(0, segs.shape[0], cfg.batch_size):
                xb = segs[order[i:i + cfg.batch_size]]
                loss = ((module(xb[:, :-1]) - xb[:, -1]) ** 2).sum(-1).mean()
                check_finite(loss, step, f"train_predictor[{kind}]")
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
    module.eval()
    return NormalValuePredictor(kind, n_lags, module)


def baseline_action(predictor: NormalValuePredictor, window) -> np.ndarray:
    """theta_t = x~_t - x_t for a K-row window ending at t."""
    w = np.asarray(getattr(window, "values", window), dtype=np.float64)
    return predictor.predict(w[-1 - predictor.n_lags:-1]) - w[-1]


def baseline_policy(predictor: NormalValuePredictor) -> Policy:
    p = predictor.n_lags

    def policy(windows: torch.Tensor) -> torch.Tensor:
        return predictor.predict_tensor(windows[..., -1 - p:-1, :]) - windows[..., -1, :]
    return policy
