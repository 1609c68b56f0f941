"""Recourse actions on exogenous inputs, evaluated by counterfactual rollout.

An action theta_t shifts the exogenous input at step t, so the acted value is
x*_t = x_t + theta_t. Later steps are re-predicted with the GVAR from the
counterfactual history while keeping the exogenous residuals abducted from
the factual data (abduction, then prediction). The recourse function maps
the preceding window and the GVAR deviation of the current step to theta_t.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .detector import AnomalyDetector
from .gvar import GvarModel, InsufficientHistoryError
from .nn import (DTYPE, DivergenceError, as_tensor, check_finite, finite_difference_check,
                 read_json, safe_norm, single_thread, state_from_json, state_to_json, write_json)

log = logging.getLogger(__name__)

Policy = Callable[[torch.Tensor], torch.Tensor]


class RecourseFunction(nn.Module):
    """LSTM over the K-1 preceding steps plus a deviation encoder, joined by a linear head.

    ``use_seq``/``use_dev`` switch off one encoder (its latent is replaced by
    zeros) without changing the head's input width.
    """

    def __init__(self, d: int, K: int, hidden: int = 100, *, use_seq: bool = True,
                 use_dev: bool = True, seed: int = 0):
        super().__init__()
        if not (use_seq or use_dev):
            raise ValueError("at least one encoder must be enabled")
        self.d, self.K, self.hidden = d, K, hidden
        self.use_seq, self.use_dev = use_seq, use_dev
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.lstm = nn.LSTM(d, hidden, batch_first=True, dtype=DTYPE)
            self.dev = nn.Sequential(nn.Linear(d, hidden, dtype=DTYPE), nn.ReLU())
            self.head = nn.Linear(2 * hidden, d, dtype=DTYPE)

    def forward(self, prev: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
        batch = prev.shape[:-2]
        if self.use_seq:
            _, (h_n, _) = self.lstm(prev.reshape(-1, *prev.shape[-2:]))
            z_seq = h_n[-1].reshape(*batch, self.hidden)
        else:
            z_seq = prev.new_zeros(*batch, self.hidden)
        z_dev = self.dev(delta) if self.use_dev else delta.new_zeros(*batch, self.hidden)
        return self.head(torch.cat([z_seq, z_dev], dim=-1))

    def zero_head_(self) -> "RecourseFunction":
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        return self

    def to_json(self) -> dict:
        return {"schema": 1, "kind": "recourse", "d": self.d, "K": self.K, "hidden": self.hidden,
                "use_seq": self.use_seq, "use_dev": self.use_dev, "params": state_to_json(self),
                "loss_history": getattr(self, "loss_history", [])}

    @classmethod
    def from_json(cls, obj: dict) -> "RecourseFunction":
        h = cls(obj["d"], obj["K"], obj["hidden"], use_seq=obj["use_seq"], use_dev=obj["use_dev"])
        state_from_json(h, obj["params"])
        h.loss_history = obj.get("loss_history", [])
        return h

    def save(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "RecourseFunction":
        return cls.from_json(read_json(path))


@dataclass(frozen=True)
class RecourseAction:
    t: int
    theta: np.ndarray
    cost_vector: Optional[np.ndarray] = None

    @property
    def cost(self) -> float:
        c = 1.0 if self.cost_vector is None else self.cost_vector
        return float(np.linalg.norm(c * self.theta))


@dataclass(frozen=True)
class CounterfactualRollout:
    start: int
    values: np.ndarray  # (L+1) x d, counterfactual x*_t .. x*_{t+L}
    scores: Optional[np.ndarray] = None
    tau: Optional[float] = None

    @property
    def flipped(self) -> Optional[np.ndarray]:
        if self.scores is None:
            return None
        return self.scores <= self.tau


@dataclass
class RecourseTrainConfig:
    lam: float = 0.1
    L: int = 1
    max_actions: int = 10
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    hidden: int = 100
    use_seq: bool = True
    use_dev: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.L < 1 or self.max_actions < 1:
            raise ValueError("need lam >= 0, L >= 1, max_actions >= 1")


# --------------------------------------------------------------------------
# building blocks


def deviation_tensor(gvar: GvarModel, windows: torch.Tensor) -> torch.Tensor:
    """x_t minus the GVAR forecast from the window's K-1 in-window lags."""
    return windows[..., -1, :] - gvar.forecast_tensor(windows[..., :-1, :])


def compute_deviation(gvar: GvarModel, window) -> np.ndarray:
    values = np.asarray(getattr(window, "values", window), dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != gvar.d or values.shape[0] - 1 > gvar.n_lags:
        raise ValueError(f"window shape {values.shape} incompatible with GVAR (d={gvar.d}, lags={gvar.n_lags})")
    with torch.no_grad():
        return deviation_tensor(gvar, as_tensor(values)).numpy()


def recourse_policy(gvar: GvarModel, h: RecourseFunction) -> Policy:
    def policy(windows: torch.Tensor) -> torch.Tensor:
        return h(windows[..., :-1, :], deviation_tensor(gvar, windows))
    return policy


def predict_action(h: RecourseFunction, prev_window, delta) -> np.ndarray:
    """theta_t from W_{t-1} (K-1 x d) and the deviation Delta_t."""
    with torch.no_grad():
        return h(as_tensor(prev_window), as_tensor(delta)).numpy()


def _abducted(gvar: GvarModel, values: np.ndarray, t: int) -> np.ndarray:
    p = gvar.n_lags
    with torch.no_grad():
        return values[t] - gvar.forecast_tensor(as_tensor(values[t - p:t])).numpy()


def counterfactual_rollout(gvar: GvarModel, series, actions: Sequence[RecourseAction], horizon: int,
                           detector: Optional[AnomalyDetector] = None) -> CounterfactualRollout:
    """Counterfactual values x*_t .. x*_{t+horizon} after applying ``actions``.

    ``t`` is the earliest action step. Each later step is predicted from the
    counterfactual lags plus the exogenous residual abducted from the
    factual series; an action at that step is added on top.
    """
    values = np.asarray(getattr(series, "values", series), dtype=np.float64)
    if not actions:
        raise ValueError("at least one action is required")
    acts = {a.t: np.asarray(a.theta, dtype=np.float64) for a in actions}
    t0 = min(acts)
    p = gvar.n_lags
    if t0 < p or (detector is not None and t0 < detector.K - 1):
        raise InsufficientHistoryError(f"action at step {t0} lacks history")
    if horizon < 0 or t0 + horizon >= values.shape[0]:
        raise ValueError("horizon runs past the end of the series")
    cf = values.copy()
    cf[t0] = values[t0] + acts[t0]
    for t in range(t0 + 1, t0 + horizon + 1):
        u = _abducted(gvar, values, t)
        with torch.no_grad():
            cf[t] = gvar.forecast_tensor(as_tensor(cf[t - p:t])).numpy() + u
        if t in acts:
            cf[t] = cf[t] + acts[t]
    scores = None
    tau = None
    if detector is not None:
        K = detector.K
        wins = np.stack([cf[t - K + 1:t + 1] for t in range(t0, t0 + horizon + 1)])
        scores = detector.score_windows(wins)
        tau = detector.tau
    return CounterfactualRollout(t0, cf[t0:t0 + horizon + 1].copy(), scores, tau)


def recourse_loss(scores, thetas, tau: float, lam: float):
    """Hinge on counterfactual scores above tau plus lam times the action norms.

    Works on numpy arrays or torch tensors (differentiable in the latter case).
    """
    if isinstance(scores, torch.Tensor):
        hinge = torch.clamp(scores - tau, min=0.0).sum()
        pen = sum((safe_norm(th) for th in thetas), torch.zeros((), dtype=scores.dtype))
        return hinge + lam * pen
    hinge = np.maximum(np.asarray(scores) - tau, 0.0).sum()
    pen = sum(float(np.linalg.norm(th)) for th in thetas)
    return float(hinge + lam * pen)


# --------------------------------------------------------------------------
# training


def history_needed(gvar: GvarModel, K: int) -> int:
    return max(gvar.n_lags, K - 1)


def episode_loss(gvar: GvarModel, detector: AnomalyDetector, policy: Policy, segs: torch.Tensor,
                 lam: float, L: int) -> tuple[torch.Tensor, dict]:
    """Objective for a batch of factual segments covering steps t-H .. t+L.

    Acts at t, rolls forward L steps and acts again wherever the
    counterfactual window still scores above tau.
    """
    K, p, tau = detector.K, gvar.n_lags, detector.tau
    H = segs.shape[1] - L - 1
    rows = [segs[:, i] for i in range(segs.shape[1])]

    def window(i):
        return torch.stack(rows[i - K + 1:i + 1], dim=1)

    theta = policy(window(H))
    rows[H] = rows[H] + theta
    s = detector.score_tensor(window(H))
    hinge = torch.clamp(s - tau, min=0.0)
    pen = safe_norm(theta)
    n_act = torch.ones_like(s)
    for l in range(1, L + 1):
        i = H + l
        u = segs[:, i] - gvar.forecast_tensor(segs[:, i - p:i])
        rows[i] = gvar.forecast_tensor(torch.stack(rows[i - p:i], dim=1)) + u
        need = (detector.score_tensor(window(i)) > tau).detach()
        theta = policy(window(i)) * need.unsqueeze(-1).to(DTYPE)
        rows[i] = rows[i] + theta
        s = detector.score_tensor(window(i))
        hinge = hinge + torch.clamp(s - tau, min=0.0)
        pen = pen + safe_norm(theta)
        n_act = n_act + need.to(DTYPE)
    loss = (hinge + lam * pen).mean()
    return loss, {"hinge": float(hinge.mean().detach()), "penalty": float(pen.mean().detach()),
                  "actions": float(n_act.mean())}


def training_segments(values: np.ndarray, steps: Sequence[int], H: int, L: int) -> np.ndarray:
    keep = [t for t in steps if t - H >= 0 and t + L < values.shape[0]]
    if not keep:
        return np.empty((0, H + L + 1, values.shape[1]))
    return np.stack([values[t - H:t + L + 1] for t in keep])


def train_recourse(gvar: GvarModel, detector: AnomalyDetector, segs: np.ndarray,
                   cfg: RecourseTrainConfig) -> RecourseFunction:
    """Fit the recourse function on abnormal segments (see ``training_segments``).

    The GVAR and detector stay frozen; episodes are visited in a seeded
    random order and the parameters are updated once per mini-batch.
    """
    if segs.shape[0] == 0:
        raise ValueError("no abnormal training segments")
    with single_thread():
        h = RecourseFunction(gvar.d, detector.K, cfg.hidden, use_seq=cfg.use_seq,
                             use_dev=cfg.use_dev, seed=cfg.seed)
        frozen = [p for p in list(gvar.parameters()) + list(detector.scorer.parameters())]
        flags = [p.requires_grad for p in frozen]
        for p in frozen:
            p.requires_grad_(False)
        try:
            x = as_tensor(segs)
            opt = torch.optim.Adam(h.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
            gen = torch.Generator().manual_seed(cfg.seed + 7)
            policy = recourse_policy(gvar, h)
            history, step = [], 0
            for epoch in range(cfg.epochs):
                order = torch.randperm(x.shape[0], generator=gen)
                tot = 0.0
                for i in range(0, x.shape[0], cfg.batch_size):
                    idx = order[i:i + cfg.batch_size]
                    loss, _ = episode_loss(gvar, detector, policy, x[idx], cfg.lam, cfg.L)
                    check_finite(loss, step, "train_recourse")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    step += 1
                    tot += float(loss.detach()) * len(idx)
                history.append({"epoch": epoch, "loss": tot / x.shape[0]})
        finally:
            for p, f in zip(frozen, flags):
                p.requires_grad_(f)
    h.loss_history = history
    h.eval()
    return h


def recourse_gradient_check(gvar: GvarModel, detector: AnomalyDetector, h: RecourseFunction,
                            segs: np.ndarray, lam: float, L: int, h_step: float = 1e-5) -> float:
    x = as_tensor(segs)
    policy = recourse_policy(gvar, h)
    errs = finite_difference_check(lambda: episode_loss(gvar, detector, policy, x, lam, L)[0],
                                   list(h.parameters()), h_step)
    return max(errs.values())


# --------------------------------------------------------------------------
# explanation


@dataclass
class RecourseReport:
    episode: tuple[int, int]
    actions: list[RecourseAction]
    steps: np.ndarray  # processed steps
    scores: np.ndarray  # final counterfactual score per processed step
    tau: float
    counterfactual: np.ndarray  # counterfactual values at processed steps
    flipped: bool
    model: str = "recad"

    @property
    def detected_steps(self) -> np.ndarray:
        t0, t1 = self.episode
        return np.arange(t0, t1 + 1)

    @property
    def n_detected(self) -> int:
        return self.episode[1] - self.episode[0] + 1

    @property
    def n_flipped(self) -> int:
        t0, t1 = self.episode
        sel = (self.steps >= t0) & (self.steps <= t1)
        return int((self.scores[sel] <= self.tau).sum())

    @property
    def steps_used(self) -> int:
        return len(self.actions)

    @property
    def total_cost(self) -> float:
        return float(sum(a.cost for a in self.actions))

    def to_json(self, std: Optional[np.ndarray] = None, counterfactual_csv_path: Optional[str] = None) -> dict:
        scale = 1.0 if std is None else np.asarray(std)
        return {
            "schema": 1,
            "model": self.model,
            "episode": list(self.episode),
            "actions": [{"t": a.t, "theta_raw_units": (a.theta * scale).tolist(),
                         "theta_standardized": a.theta.tolist(), "cost": a.cost} for a in self.actions],
            "flipped": self.flipped,
            "steps_used": self.steps_used,
            "flipped_steps": self.n_flipped,
            "detected_steps": self.n_detected,
            "tau": self.tau,
            "counterfactual_csv_path": counterfactual_csv_path,
        }


def explain(gvar: GvarModel, detector: AnomalyDetector, policy: Policy, values: np.ndarray,
            episode: tuple[int, int], *, L: int = 1, max_actions: int = 10,
            cost_vector: Optional[np.ndarray] = None, model: str = "recad") -> RecourseReport:
    """Greedy recourse for one detected episode ``(t0, t1)`` (inclusive).

    Acts at every counterfactual step that still scores above tau, rolling
    the counterfactual forward after each step, until the factual episode
    has passed and L further steps score normal, or ``max_actions`` is hit.
    """
    values = np.asarray(values, dtype=np.float64)
    T = values.shape[0]
    K, p, tau = detector.K, gvar.n_lags, detector.tau
    t0, t1 = episode
    if t0 < max(K - 1, p):
        raise InsufficientHistoryError(f"episode at {t0} lacks history")
    cf = values.copy()
    actions: list[RecourseAction] = []
    steps, scores = [], []
    diverged = False
    last_bad = None
    last_act = None
    t = t0
    with torch.no_grad():
        while t < T:
            if diverged:
                u = values[t] - gvar.forecast_tensor(as_tensor(values[t - p:t])).numpy()
                cf[t] = gvar.forecast_tensor(as_tensor(cf[t - p:t])).numpy() + u
            win = as_tensor(cf[t - K + 1:t + 1])
            s = float(detector.score_tensor(win))
            if s > tau and len(actions) < max_actions:
                theta = policy(win).numpy()
                cf[t] = cf[t] + theta
                diverged = True
                actions.append(RecourseAction(t, theta, cost_vector))
                last_act = t
                s = float(detector.score_tensor(as_tensor(cf[t - K + 1:t + 1])))
            steps.append(t)
            scores.append(s)
            if s > tau:
                last_bad = t
            anchor = max(t1, last_act if last_act is not None else t1, last_bad if last_bad is not None else t1)
            if len(actions) >= max_actions and s > tau and t >= t1 + L:
                break
            if t >= anchor + L:
                break
            t += 1
    steps_a = np.array(steps)
    scores_a = np.array(scores)
    flipped = bool(np.all(scores_a <= tau))
    return RecourseReport((t0, t1), actions, steps_a, scores_a, tau, cf[steps_a].copy(), flipped, model)
