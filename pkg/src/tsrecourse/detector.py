"""Score-based window anomaly detection.

Two scorers are available: the norm of the GVAR one-step residual of the
last window row, and a flattened-window autoencoder that does not depend on
the causal model. Both work in standardized units and are differentiable so
the recourse objective can be trained through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from sklearn.metrics import average_precision_score, f1_score, roc_auc_score
from torch import nn

from .gvar import GvarModel
from .nn import DTYPE, as_tensor, read_json, safe_norm, single_thread, state_from_json, state_to_json, write_json
from .series import MultivariateSeries, Window, window_array


class DetectorError(ValueError):
    pass


class ResidualScorer(nn.Module):
    """||x_t - x_hat_t|| with x_hat_t forecast from the window's first K-1 rows."""

    kind = "residual"

    def __init__(self, gvar: GvarModel):
        super().__init__()
        self.gvar = gvar

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        lags = windows[..., :-1, :]
        return safe_norm(windows[..., -1, :] - self.gvar.forecast_tensor(lags))


class AutoencoderScorer(nn.Module):
    """Reconstruction error of the flattened window, widths 100-20-100."""

    kind = "autoencoder"

    def __init__(self, K: int, d: int, widths=(100, 20, 100), seed: int = 0):
        super().__init__()
        self.K, self.d, self.widths = K, d, tuple(widths)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            sizes = [K * d, *widths, K * d]
            layers: list[nn.Module] = []
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                layers.append(nn.Linear(a, b, dtype=DTYPE))
                if i < len(sizes) - 2:
                    layers.append(nn.ReLU())
            self.net = nn.Sequential(*layers)

    def reconstruct(self, windows: torch.Tensor) -> torch.Tensor:
        flat = windows.reshape(*windows.shape[:-2], self.K * self.d)
        return self.net(flat)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        flat = windows.reshape(*windows.shape[:-2], self.K * self.d)
        return safe_norm(self.net(flat) - flat)


def train_autoencoder(values: np.ndarray, K: int, *, epochs: int = 20, batch_size: int = 256,
                      learning_rate: float = 1e-3, seed: int = 0) -> AutoencoderScorer:
    with single_thread():
        ae = AutoencoderScorer(K, values.shape[1], seed=seed)
        x = as_tensor(np.ascontiguousarray(window_array(values, K)))
        opt = torch.optim.Adam(ae.parameters(), lr=learning_rate)
        gen = torch.Generator().manual_seed(seed + 1)
        for _ in range(epochs):
            order = torch.randperm(x.shape[0], generator=gen)
            for i in range(0, x.shape[0], batch_size):
                xb = x[order[i:i + batch_size]]
                loss = ((ae.reconstruct(xb) - xb.reshape(xb.shape[0], -1)) ** 2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
    ae.eval()
    return ae


@dataclass
class AnomalyDetector:
    scorer: nn.Module
    tau: float
    K: int
    quantile: Optional[float] = None

    def score_tensor(self, windows: torch.Tensor) -> torch.Tensor:
        return self.scorer(windows)

    def score_windows(self, windows: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.scorer(as_tensor(np.ascontiguousarray(windows))).numpy()

    def score_series(self, values: np.ndarray) -> np.ndarray:
        """Score per step; the first K-1 steps are unscored (NaN)."""
        values = np.asarray(values, dtype=np.float64)
        out = np.full(values.shape[0], np.nan)
        if values.shape[0] >= self.K:
            out[self.K - 1:] = self.score_windows(window_array(values, self.K))
        return out

    def to_json(self) -> dict:
        obj = {"schema": 1, "kind": self.scorer.kind, "tau": self.tau, "K": self.K, "quantile": self.quantile}
        if isinstance(self.scorer, AutoencoderScorer):
            obj["autoencoder"] = {"d": self.scorer.d, "widths": list(self.scorer.widths),
                                  "params": state_to_json(self.scorer)}
        return obj

    @classmethod
    def from_json(cls, obj: dict, gvar: Optional[GvarModel] = None) -> "AnomalyDetector":
        if obj["kind"] == "residual":
            if gvar is None:
                raise DetectorError("residual detector needs its GVAR model")
            scorer: nn.Module = ResidualScorer(gvar)
        else:
            ae = obj["autoencoder"]
            scorer = AutoencoderScorer(obj["K"], ae["d"], ae["widths"])
            state_from_json(scorer, ae["params"])
        return cls(scorer, obj["tau"], obj["K"], obj.get("quantile"))

    def save(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path, gvar: Optional[GvarModel] = None) -> "AnomalyDetector":
        return cls.from_json(read_json(path), gvar)


def score(detector: AnomalyDetector, window) -> float:
    values = window.values if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
    if values.shape != (detector.K, values.shape[-1]) or values.ndim != 2:
        raise DetectorError(f"window must have {detector.K} rows, got shape {values.shape}")
    return float(detector.score_windows(values[None])[0])


def calibrate_threshold(scores, q: float = 0.99, min_count: int = 1000) -> float:
    """Empirical q-quantile with linear interpolation between order statistics."""
    scores = np.asarray(scores, dtype=np.float64)
    scores = scores[np.isfinite(scores)]
    if scores.size < min_count:
        raise DetectorError(f"need at least {min_count} validation scores, got {scores.size}")
    if not 0 <= q <= 1:
        raise DetectorError("quantile must lie in [0, 1]")
    return float(np.quantile(scores, q))


def best_f1_threshold(scores, truth) -> float:
    """Threshold maximizing F1 on labeled scores (for detection comparisons only)."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    order = np.argsort(-scores)
    tp = np.cumsum(truth[order])
    k = np.arange(1, scores.size + 1)
    f1 = 2 * tp / (k + truth.sum())
    i = int(np.argmax(f1))
    # largest tau that still flags the top i+1 scores
    return float(scores[order[i + 1]]) if i + 1 < scores.size else float(scores[order[i]] - 1e-12)


def build_detector(scorer: nn.Module, K: int, validation_values: np.ndarray,
                   q: float = 0.99, min_count: int = 1000) -> AnomalyDetector:
    det = AnomalyDetector(scorer, 0.0, K, q)
    scores = det.score_series(validation_values)
    det.tau = calibrate_threshold(scores, q, min_count)
    return det


def detect(detector: AnomalyDetector, series) -> np.ndarray:
    """Boolean label for each scored step t >= K-1 (length T-K+1)."""
    values = series.values if isinstance(series, MultivariateSeries) else np.asarray(series)
    scores = detector.score_series(values)[detector.K - 1:]
    return scores > detector.tau


@dataclass(frozen=True)
class DetectionReport:
    f1: float
    auc_pr: float
    auc_roc: float
    predicted: np.ndarray

    def as_dict(self) -> dict:
        return {"f1": self.f1, "auc_pr": self.auc_pr, "auc_roc": self.auc_roc,
                "n_predicted": int(self.predicted.sum())}


def eval_detection(predicted, truth, raw_scores) -> DetectionReport:
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    raw_scores = np.asarray(raw_scores, dtype=np.float64)
    if not (predicted.shape == truth.shape == raw_scores.shape):
        raise DetectorError("predicted, truth and scores must have equal lengths")
    if truth.all() or not truth.any():
        raise DetectorError("truth has a single class; AUCs are undefined")
    return DetectionReport(
        f1=float(f1_score(truth, predicted, zero_division=0.0)),
        auc_pr=float(average_precision_score(truth, raw_scores)),
        auc_roc=float(roc_auc_score(truth, raw_scores)),
        predicted=predicted,
    )
