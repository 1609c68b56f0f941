"""Seeded Linear and Lotka-Volterra generators with anomaly injection.

Both systems are written in the additive form ``x_t = f(x_{t-1}) + u_t + eps_t``.
The clean exogenous draws ``u`` and the anomaly term ``eps`` are stored
separately so any trajectory can be resimulated from its drive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from numba import njit

from .series import MultivariateSeries

KINDS = ("external_point", "external_seq", "structural_seq")


class GeneratorError(ValueError):
    pass


class ParameterError(GeneratorError):
    pass


class InstabilityError(GeneratorError):
    pass


class PlacementError(GeneratorError):
    pass


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class LinearSystemParams:
    """Coefficients a_1..a_8 of the four-variable lag-1 linear system."""

    coefficients: tuple[float, ...]
    noise_std: float = 0.4
    seed: int = 0
    burn_in: int = 100

    @classmethod
    def sample(cls, seed: int, noise_std: float = 0.4, **kw) -> "LinearSystemParams":
        rng = np.random.default_rng([seed, 8])
        mag = rng.uniform(0.2, 0.8, size=8)
        sign = rng.choice([-1.0, 1.0], size=8)
        return cls(tuple(float(v) for v in mag * sign), noise_std, seed, **kw)

    def validate(self) -> None:
        if len(self.coefficients) != 8:
            raise ParameterError("expected 8 coefficients")
        for i, a in enumerate(self.coefficients, start=1):
            if not 0.2 <= abs(a) <= 0.8:
                raise ParameterError(f"|a_{i}| = {abs(a):.3f} outside [0.2, 0.8]")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be non-negative")

    def matrix(self) -> np.ndarray:
        a1, a2, a3, a4, a5, a6, a7, a8 = self.coefficients
        return np.array(
            [
                [a1, 0.0, 0.0, 0.0],
                [a3, a2, 0.0, 0.0],
                [0.0, a5, a4, 0.0],
                [0.0, a7, a8, a6],
            ]
        )


def _pairs(p: int) -> tuple[tuple[int, ...], ...]:
    return tuple((i,) for i in range(p))


@dataclass(frozen=True)
class LotkaVolterraParams:
    p: int = 10
    alpha: float = 1.1
    beta: float = 0.4
    delta: float = 0.1
    rho: float = 0.4
    eta: float = 0.1
    dt: float = 0.01
    subsample: int = 100
    noise_std: float = 0.02
    # prey_parents[i]: predators eating prey i; predator_parents[j]: prey eaten by predator j
    prey_parents: Optional[tuple[tuple[int, ...], ...]] = None
    predator_parents: Optional[tuple[tuple[int, ...], ...]] = None
    seed: int = 0
    burn_in: int = 1000
    bound: float = 1e4
    init: Optional[tuple[float, ...]] = None

    def adjacency(self) -> tuple[tuple[tuple[int, ...], ...], tuple[tuple[int, ...], ...]]:
        prey = self.prey_parents if self.prey_parents is not None else _pairs(self.p)
        pred = self.predator_parents if self.predator_parents is not None else _pairs(self.p)
        return prey, pred

    def validate(self) -> None:
        for name in ("alpha", "beta", "delta", "rho", "eta", "dt"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.dt <= 0 or self.subsample < 1 or self.p < 1:
            raise ParameterError("dt > 0, subsample >= 1 and p >= 1 required")
        prey, pred = self.adjacency()
        if len(prey) != self.p or len(pred) != self.p:
            raise ParameterError("adjacency must list parents for every species")
        for role, parents in (("prey", prey), ("predator", pred)):
            for i, pa in enumerate(parents):
                if len(pa) < 1:
                    raise ParameterError(f"{role} {i} has no parent")
                if any(not 0 <= j < self.p for j in pa):
                    raise ParameterError(f"{role} {i} has out-of-range parent")

    def equilibrium(self) -> np.ndarray:
        """Fixed point of the pairwise web; used as the default initial state."""
        prey, pred = self.adjacency()
        x = np.array([self.rho / (self.delta * len(pred[j])) if self.delta > 0 else 1.0
                      for j in range(self.p)])
        y = np.array([max((self.alpha - self.eta * x[i]) / (self.beta * len(prey[i])), 0.1)
                      if self.beta > 0 else 1.0 for i in range(self.p)])
        return np.concatenate([x, y])


@dataclass(frozen=True)
class AnomalySpec:
    """How to place and size injected anomalies.

    ``magnitude`` is a (low, high) range in units of per-dimension reference
    standard deviations. ``structural_gain`` multiplies the normal dynamics
    of affected dimensions for structural events.
    """

    kind: str
    rate: float
    magnitude: tuple[float, float] = (3.0, 5.0)
    seq_len_range: tuple[int, int] = (3, 5)
    max_affected_dims: Optional[int] = None
    min_gap: int = 10
    structural_gain: float = -1.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown anomaly kind {self.kind!r}")
        if not 0 <= self.rate <= 0.2:
            raise ParameterError("rate must lie in (0, 0.2]")
        lo, hi = self.magnitude
        if not 0 < lo <= hi:
            raise ParameterError("magnitude range must be positive")
        if self.kind != "external_point" and self.seq_len_range[0] < 2:
            raise ParameterError("sequence anomalies need length >= 2")

    def lengths(self) -> tuple[int, int]:
        return (1, 1) if self.kind == "external_point" else tuple(self.seq_len_range)


@dataclass(frozen=True)
class AnomalyEvent:
    start: int
    length: int
    dims: tuple[int, ...]
    kind: str
    eps: np.ndarray  # length x len(dims), realized additive term

    def steps(self) -> range:
        return range(self.start, self.start + self.length)

    def to_json(self) -> dict:
        return {
            "start": self.start,
            "length": self.length,
            "dims": list(self.dims),
            "kind": self.kind,
            "eps": np.asarray(self.eps).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnomalyEvent":
        return cls(obj["start"], obj["length"], tuple(obj["dims"]), obj["kind"], np.array(obj["eps"]))


SystemParams = Union[LinearSystemParams, LotkaVolterraParams]


@dataclass(frozen=True)
class GeneratedDataset:
    series: MultivariateSeries
    exogenous: np.ndarray
    anomaly: np.ndarray
    injected: tuple[AnomalyEvent, ...]
    system: SystemParams
    initial_state: np.ndarray

    @property
    def drive(self) -> np.ndarray:
        return self.exogenous + self.anomaly

    def events_json(self) -> dict:
        return {"schema": 1, "events": [e.to_json() for e in self.injected]}


# --------------------------------------------------------------------------
# simulation kernels


@njit(cache=True)
def _linear_run(A, A_alt, x0, drive, struct_mask, eps_out):
    T, d = drive.shape
    out = np.empty((T, d))
    x = x0.copy()
    for t in range(T):
        det = A @ x
        if struct_mask[t].any():
            alt = A_alt @ x
            for j in range(d):
                if struct_mask[t, j]:
                    eps_out[t, j] = alt[j] - det[j]
                    det[j] = alt[j]
        x = det + drive[t]
        out[t] = x
    return out


@njit(cache=True)
def _lv_deriv(s, p, alpha, beta, delta, rho, eta, prey_idx, prey_ptr, pred_idx, pred_ptr):
    out = np.empty_like(s)
    for i in range(p):
        acc = 0.0
        for q in range(prey_ptr[i], prey_ptr[i + 1]):
            acc += s[p + prey_idx[q]]
        out[i] = alpha * s[i] - beta * s[i] * acc - eta * s[i] * s[i]
    for j in range(p):
        acc = 0.0
        for q in range(pred_ptr[j], pred_ptr[j + 1]):
            acc += s[pred_idx[q]]
        out[p + j] = delta * s[p + j] * acc - rho * s[p + j]
    return out


@njit(cache=True)
def _lv_flow(s, n_sub, dt, p, alpha, beta, delta, rho, eta, prey_idx, prey_ptr, pred_idx, pred_ptr):
    for _ in range(n_sub):
        k1 = _lv_deriv(s, p, alpha, beta, delta, rho, eta, prey_idx, prey_ptr, pred_idx, pred_ptr)
        k2 = _lv_deriv(s + 0.5 * dt * k1, p, alpha, beta, delta, rho, eta, prey_idx, prey_ptr, pred_idx, pred_ptr)
        k3 = _lv_deriv(s + 0.5 * dt * k2, p, alpha, beta, delta, rho, eta, prey_idx, prey_ptr, pred_idx, pred_ptr)
        k4 = _lv_deriv(s + dt * k3, p, alpha, beta, delta, rho, eta, prey_idx, prey_ptr, pred_idx, pred_ptr)
        s = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return s


@njit(cache=True)
def _lv_run(x0, drive, struct_mask, eps_out, gain, n_sub, dt, p, alpha, beta, delta, rho, eta,
            prey_idx, prey_ptr, pred_idx, pred_ptr):
    T, d = drive.shape
    out = np.empty((T, d))
    x = x0.copy()
    for t in range(T):
        det = _lv_flow(x, n_sub, dt, p, alpha, beta, delta, rho, eta, prey_idx, prey_ptr, pred_idx, pred_ptr)
        for j in range(d):
            if struct_mask[t, j]:
                alt = x[j] + gain * (det[j] - x[j])
                eps_out[t, j] = alt - det[j]
                det[j] = alt
        x = det + drive[t]
        out[t] = x
    return out


def _csr(parents) -> tuple[np.ndarray, np.ndarray]:
    idx = np.array([j for pa in parents for j in pa], dtype=np.int64)
    ptr = np.cumsum([0] + [len(pa) for pa in parents]).astype(np.int64)
    return idx, ptr


def simulate(system: SystemParams, initial_state: np.ndarray, drive: np.ndarray,
             struct_mask: Optional[np.ndarray] = None, structural_gain: float = -1.5):
    """Run the structural equations forward from ``initial_state``.

    Returns ``(values, structural_eps)`` where ``structural_eps`` holds
    f_tilde - f on masked entries (zero elsewhere).
    """
    drive = np.ascontiguousarray(drive, dtype=np.float64)
    T, d = drive.shape
    mask = np.zeros((T, d), dtype=np.bool_) if struct_mask is None else np.ascontiguousarray(struct_mask, dtype=np.bool_)
    eps = np.zeros((T, d))
    x0 = np.asarray(initial_state, dtype=np.float64)
    if isinstance(system, LinearSystemParams):
        A = system.matrix()
        A_alt = A.copy()
        A_alt[np.diag_indices(4)] *= structural_gain
        values = _linear_run(A, A_alt, x0, drive, mask, eps)
    else:
        prey_idx, prey_ptr = _csr(system.adjacency()[0])
        pred_idx, pred_ptr = _csr(system.adjacency()[1])
        values = _lv_run(x0, drive, mask, eps, structural_gain, system.subsample, system.dt, system.p,
                         system.alpha, system.beta, system.delta, system.rho, system.eta,
                         prey_idx, prey_ptr, pred_idx, pred_ptr)
    return values, eps


def _check_lv(values: np.ndarray, bound: float) -> None:
    bad = (~np.isfinite(values)) | (values < 0) | (values > bound)
    if bad.any():
        t, j = np.argwhere(bad)[0]
        raise InstabilityError(f"trajectory left [0, {bound:g}] at step {t}, dim {j}: {values[t, j]!r}")


def _linear_names() -> tuple[str, ...]:
    return tuple(f"x{j + 1}" for j in range(4))


def _lv_names(p: int) -> tuple[str, ...]:
    return tuple(f"prey{i}" for i in range(p)) + tuple(f"pred{j}" for j in range(p))


# --------------------------------------------------------------------------
# generators


def gen_linear(params: LinearSystemParams, T: int, x0: Optional[np.ndarray] = None) -> GeneratedDataset:
    if T < 100:
        raise ParameterError("T must be >= 100")
    params.validate()
    rng = np.random.default_rng([params.seed, 1])
    u = rng.normal(0.0, params.noise_std, size=(params.burn_in + T, 4)) if params.noise_std > 0 \
        else np.zeros((params.burn_in + T, 4))
    start = np.zeros(4) if x0 is None else np.asarray(x0, dtype=np.float64)
    warm, _ = simulate(params, start, u[: params.burn_in]) if params.burn_in else (start[None], None)
    init = warm[-1] if params.burn_in else start
    exog = u[params.burn_in:]
    values, _ = simulate(params, init, exog)
    series = MultivariateSeries(values, np.zeros(T, dtype=bool), _linear_names())
    return GeneratedDataset(series, exog, np.zeros_like(exog), (), params, init)


def gen_lotka_volterra(params: LotkaVolterraParams, T: int) -> GeneratedDataset:
    if T < 100:
        raise ParameterError("T must be >= 100")
    params.validate()
    d = 2 * params.p
    rng = np.random.default_rng([params.seed, 2])
    n = params.burn_in + T
    u = rng.normal(0.0, params.noise_std, size=(n, d)) if params.noise_std > 0 else np.zeros((n, d))
    if params.init is not None:
        start = np.asarray(params.init, dtype=np.float64)
    else:
        start = params.equilibrium() * (1.0 + 0.05 * rng.standard_normal(d))
    if params.burn_in:
        warm, _ = simulate(params, start, u[: params.burn_in])
        _check_lv(warm, params.bound)
        init = warm[-1]
    else:
        init = start
    exog = u[params.burn_in:]
    values, _ = simulate(params, init, exog)
    _check_lv(values, params.bound)
    series = MultivariateSeries(values, np.zeros(T, dtype=bool), _lv_names(params.p))
    return GeneratedDataset(series, exog, np.zeros_like(exog), (), params, init)


def resimulate(dataset: GeneratedDataset, drive: Optional[np.ndarray] = None) -> np.ndarray:
    """Values obtained by driving the dataset's system with ``drive``."""
    values, _ = simulate(dataset.system, dataset.initial_state, dataset.drive if drive is None else drive)
    return values


# --------------------------------------------------------------------------
# anomaly injection


def _place_events(rng, lengths: list[int], lo: int, hi: int, gap: int) -> list[int]:
    n = len(lengths)
    need = sum(lengths) + gap * (n + 1)
    free = (hi - lo) - need
    if free < 0:
        raise PlacementError(f"cannot place {n} events of total length {sum(lengths)} "
                             f"with gap {gap} in {hi - lo} steps")
    # split the slack into n+1 random non-negative parts
    cuts = np.sort(rng.integers(0, free + 1, size=n))
    slack = np.diff(np.concatenate([[0], cuts]))
    starts, pos = [], lo + gap
    for length, s in zip(lengths, slack):
        pos += int(s)
        starts.append(pos)
        pos += length + gap
    return starts


def inject_anomalies(dataset: GeneratedDataset, spec: AnomalySpec, *, start: int = 0,
                     stop: Optional[int] = None,
                     reference_std: Optional[np.ndarray] = None) -> GeneratedDataset:
    """Inject anomalies into steps ``[start, stop)`` and resimulate.

    External events add eps to the exogenous input; structural events swap
    the dynamics of affected dims for the event duration and record the
    realized difference f_tilde - f as eps. Magnitudes are in units of
    ``reference_std`` (default: std of the series before ``start``, or of
    the whole series when ``start`` is 0).
    """
    if spec.rate == 0:
        return dataset
    T, d = dataset.series.T, dataset.series.d
    stop = T if stop is None else stop
    rng = np.random.default_rng([spec.seed, 3, KINDS.index(spec.kind)])
    values = dataset.series.values
    if reference_std is None:
        ref = values[:start] if start >= 2 else values
        reference_std = ref.std(axis=0)
    reference_std = np.asarray(reference_std, dtype=np.float64)

    lo_len, hi_len = spec.lengths()
    target = spec.rate * (stop - start)
    lengths: list[int] = []
    while sum(lengths) + (lo_len + hi_len) / 2 <= target + 1e-9:
        lengths.append(int(rng.integers(lo_len, hi_len + 1)))
    if not lengths:
        return dataset
    starts = _place_events(rng, lengths, start, stop, spec.min_gap)

    for ev in dataset.injected:
        for s, n in zip(starts, lengths):
            if s < ev.start + ev.length and ev.start < s + n:
                raise PlacementError(f"new event at {s} overlaps existing event at {ev.start}")

    max_dims = spec.max_affected_dims or max(1, d // 4)
    positive = isinstance(dataset.system, LotkaVolterraParams)
    mean = values[:start].mean(axis=0) if start >= 2 else values.mean(axis=0)
    anomaly = dataset.anomaly.copy()
    struct_mask = np.zeros((T, d), dtype=bool)
    plan = []
    for s, n in zip(starts, lengths):
        k = int(rng.integers(1, max_dims + 1))
        dims = tuple(sorted(int(j) for j in rng.choice(d, size=k, replace=False)))
        mag = rng.uniform(*spec.magnitude, size=k) * reference_std[list(dims)]
        sign = rng.choice([-1.0, 1.0], size=k)
        if positive:
            # keep populations away from zero
            low = values[s, list(dims)] - mag < 0.25 * mean[list(dims)]
            sign[low] = 1.0
        eps = sign * mag
        plan.append((s, n, dims, eps))
        if spec.kind == "structural_seq":
            struct_mask[s:s + n, list(dims)] = True
        else:
            anomaly[s:s + n, list(dims)] += eps

    new_values, struct_eps = simulate(dataset.system, dataset.initial_state,
                                      dataset.exogenous + anomaly, struct_mask, spec.structural_gain)
    if positive:
        _check_lv(new_values, dataset.system.bound)
    anomaly = anomaly + struct_eps

    labels = dataset.series.labels.copy() if dataset.series.labels is not None else np.zeros(T, bool)
    events = list(dataset.injected)
    for s, n, dims, eps in plan:
        labels[s:s + n] = True
        realized = anomaly[s:s + n][:, list(dims)] if spec.kind == "structural_seq" \
            else np.tile(eps, (n, 1))
        events.append(AnomalyEvent(s, n, dims, spec.kind, realized))
    events.sort(key=lambda e: e.start)
    series = MultivariateSeries(new_values, labels, dataset.series.dim_names)
    return replace(dataset, series=series, anomaly=anomaly, injected=tuple(events))


def save_events(dataset: GeneratedDataset, path) -> None:
    with open(path, "w") as fh:
        json.dump(dataset.events_json(), fh, indent=1)
