"""Generalized vector autoregression.

Each lag k has its own feedforward net g_k mapping x_{t-k} to a d x d
coefficient matrix; the forecast is ``sum_k g_k(x_{t-k}) @ x_{t-k}``.
Element (i, j) of g_k's output is the influence of x^(j)_{t-k} on x^(i)_t.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .nn import (DTYPE, DivergenceError, as_tensor, check_finite, finite_difference_check,
                 read_json, safe_norm, single_thread, state_from_json, state_to_json, uniform_,
                 write_json)
from .series import MultivariateSeries, Window, window_array

log = logging.getLogger(__name__)


class InsufficientHistoryError(ValueError):
    pass


class GvarModel(nn.Module):
    def __init__(self, d: int, n_lags: int, hidden: int = 100, seed: int = 0):
        super().__init__()
        self.d, self.n_lags, self.hidden = d, n_lags, hidden
        K, H, dd = n_lags, hidden, d * d
        self.W1 = nn.Parameter(torch.empty(K, d, H, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.empty(K, H, dtype=DTYPE))
        self.W2 = nn.Parameter(torch.empty(K, H, dd, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.empty(K, dd, dtype=DTYPE))
        gen = torch.Generator().manual_seed(seed)
        for p, fan_in in ((self.W1, d), (self.b1, d), (self.W2, H), (self.b2, H)):
            uniform_(p, 1.0 / math.sqrt(fan_in), gen)
        self.loss_history: list[dict] = []

    @property
    def K(self) -> int:
        return self.n_lags

    def coefficients(self, lags_rev: torch.Tensor) -> torch.Tensor:
        """Coefficient matrices for lag-ordered inputs.

        ``lags_rev[..., k, :]`` is x_{t-k-1}; net k is applied to it. Fewer
        than ``n_lags`` entries use only the first nets.
        """
        p = lags_rev.shape[-2]
        h = torch.tanh(torch.einsum("...kd,kdh->...kh", lags_rev, self.W1[:p]) + self.b1[:p])
        c = torch.einsum("...kh,khe->...ke", h, self.W2[:p]) + self.b2[:p]
        return c.reshape(*c.shape[:-1], self.d, self.d)

    def forecast_tensor(self, lags: torch.Tensor) -> torch.Tensor:
        """Forecast from lags ordered oldest to newest, shape (..., p, d), p <= n_lags."""
        if lags.shape[-2] > self.n_lags:
            raise ValueError(f"{lags.shape[-2]} lags given, model has {self.n_lags}")
        rev = lags.flip(-2)
        C = self.coefficients(rev)
        return torch.einsum("...kij,...kj->...i", C, rev)

    def to_json(self) -> dict:
        return {"schema": 1, "kind": "gvar", "d": self.d, "n_lags": self.n_lags,
                "hidden": self.hidden, "params": state_to_json(self),
                "loss_history": self.loss_history}

    @classmethod
    def from_json(cls, obj: dict) -> "GvarModel":
        m = cls(obj["d"], obj["n_lags"], obj["hidden"])
        state_from_json(m, obj["params"])
        m.loss_history = obj.get("loss_history", [])
        return m

    def save(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "GvarModel":
        return cls.from_json(read_json(path))


def frozen_linear(matrices, hidden: int = 1) -> GvarModel:
    """A GVAR whose nets output the constant matrices given, lag 1 first."""
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    d = mats[0].shape[0]
    m = GvarModel(d, len(mats), hidden=hidden)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        for k, A in enumerate(mats):
            m.b2[k] = as_tensor(A.reshape(-1))
    return m


def zero_model(d: int, n_lags: int, hidden: int = 100) -> GvarModel:
    m = GvarModel(d, n_lags, hidden)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    return m


# --------------------------------------------------------------------------
# inference


def forecast(model: GvarModel, lags: np.ndarray) -> np.ndarray:
    lags = np.asarray(lags, dtype=np.float64)
    if lags.shape != (model.n_lags, model.d):
        raise ValueError(f"expected {model.n_lags} x {model.d} lags, got {lags.shape}")
    with torch.no_grad():
        return model.forecast_tensor(as_tensor(lags)).numpy()


def abduct(model: GvarModel, series: MultivariateSeries, t: int) -> np.ndarray:
    """Exogenous residual u_t = x_t - forecast from the K preceding steps."""
    K = model.n_lags
    if t < K:
        raise InsufficientHistoryError(f"t={t} needs {K} steps of history")
    x = series.values
    return x[t] - forecast(model, x[t - K:t])


def abduct_all(model: GvarModel, values: np.ndarray) -> np.ndarray:
    """Residuals for every t >= K; row i corresponds to step K+i."""
    K = model.n_lags
    segs = window_array(values, K + 1)
    with torch.no_grad():
        x = as_tensor(np.ascontiguousarray(segs))
        return (x[:, K] - model.forecast_tensor(x[:, :K])).numpy()


def coefficient_stack(model: GvarModel, window) -> np.ndarray:
    """K x d x d matrices; entry k-1 is g_k evaluated at x_{t-k}.

    The last K rows of ``window`` are taken as x_{t-K}, ..., x_{t-1}.
    """
    values = window.values if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
    K = model.n_lags
    if values.shape[0] < K:
        raise ValueError(f"window has {values.shape[0]} rows, need {K}")
    rev = as_tensor(np.ascontiguousarray(values[-K:][::-1]))
    with torch.no_grad():
        return model.coefficients(rev).numpy()


# --------------------------------------------------------------------------
# training


@dataclass
class GvarTrainConfig:
    n_lags: int = 4
    hidden: int = 100
    sparsity: float = 0.1
    smoothness: float = 0.1
    penalty: str = "L2"  # L1 | L2
    loss: str = "norm"  # norm | squared
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.sparsity < 0 or self.smoothness < 0:
            raise ValueError("sparsity and smoothness weights must be non-negative")
        if self.penalty not in ("L1", "L2"):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.loss not in ("norm", "squared"):
            raise ValueError(f"unknown loss {self.loss!r}")


def loss_terms(model: GvarModel, segs: torch.Tensor, cfg: GvarTrainConfig) -> dict[str, torch.Tensor]:
    """Prediction, sparsity and smoothness terms on segments x_{t-K}..x_t, shape (B, K+1, d)."""
    K = model.n_lags
    lags_t = segs[:, :K].flip(1)  # x_{t-1}, ..., x_{t-K}
    lags_next = segs[:, 1:].flip(1)  # x_t, ..., x_{t-K+1}
    C_t = model.coefficients(lags_t)
    x_hat = torch.einsum("bkij,bkj->bi", C_t, lags_t)
    resid = segs[:, K] - x_hat
    pred = safe_norm(resid) if cfg.loss == "norm" else (resid * resid).sum(-1)
    flat_t = C_t.reshape(C_t.shape[0], -1)
    if cfg.penalty == "L2":
        sparsity = safe_norm(flat_t)
    else:
        sparsity = flat_t.abs().sum(-1)
    if cfg.smoothness > 0:
        C_next = model.coefficients(lags_next)
        smooth = safe_norm(C_next.reshape(C_next.shape[0], -1) - flat_t)
    else:
        smooth = torch.zeros_like(pred)
    terms = {"prediction": pred.mean(), "sparsity": sparsity.mean(), "smoothness": smooth.mean()}
    terms["total"] = terms["prediction"] + cfg.sparsity * terms["sparsity"] + cfg.smoothness * terms["smoothness"]
    return terms


def train_gvar(data: MultivariateSeries, cfg: GvarTrainConfig) -> GvarModel:
    """Fit a GVAR on normal data (no labeled anomalies) by Adam."""
    if data.labels is not None and data.labels.any():
        raise ValueError("training data contains labeled anomalies")
    K = cfg.n_lags
    if data.T <= 10 * K:
        raise ValueError(f"need more than {10 * K} steps to train")
    with single_thread():
        torch.manual_seed(cfg.seed)
        model = GvarModel(data.d, K, cfg.hidden, seed=cfg.seed)
        segs = as_tensor(np.ascontiguousarray(window_array(data.values, K + 1)))
        n = segs.shape[0]
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        step = 0
        history = []
        for epoch in range(cfg.epochs):
            order = torch.randperm(n, generator=gen) if cfg.shuffle else torch.arange(n)
            sums = {"prediction": 0.0, "sparsity": 0.0, "smoothness": 0.0, "total": 0.0}
            for i in range(0, n, cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                terms = loss_terms(model, segs[idx], cfg)
                check_finite(terms["total"], step, "train_gvar")
                opt.zero_grad()
                terms["total"].backward()
                opt.step()
                step += 1
                for k in sums:
                    sums[k] += float(terms[k].detach()) * len(idx)
            history.append({"epoch": epoch, **{k: v / n for k, v in sums.items()}})
            log.debug("gvar epoch %d: %s", epoch, history[-1])
        model.loss_history = history
    model.eval()
    return model


def gradient_check(model: GvarModel, segs: np.ndarray, cfg: Optional[GvarTrainConfig] = None,
                   term: str = "total", h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences over all parameter tensors."""
    cfg = cfg or GvarTrainConfig(n_lags=model.n_lags)
    x = as_tensor(segs)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    errs = finite_difference_check(lambda: loss_terms(model, x, cfg)[term], list(model.parameters()), h)
    return max(errs.values())
