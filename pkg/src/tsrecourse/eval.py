"""Recourse metrics and the seeded experiment pipeline.

An episode is a maximal run of consecutive detected steps; it is the unit
the per-series metrics divide by.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from scipy.stats import spearmanr

from .baselines import PredictorTrainConfig, baseline_policy, train_predictor
from .detector import (AnomalyDetector, AutoencoderScorer, ResidualScorer, build_detector, eval_detection,
                       train_autoencoder)
from .gvar import GvarModel, GvarTrainConfig, train_gvar
from .nn import single_thread
from .recourse import (RecourseReport, RecourseTrainConfig, explain, history_needed, recourse_policy,
                       train_recourse, training_segments)
from .series import MultivariateSeries, apply_standardizer, fit_standardizer
from .synthgen import (AnomalyEvent, AnomalySpec, GeneratedDataset, LinearSystemParams, LotkaVolterraParams,
                       gen_linear, gen_lotka_volterra, inject_anomalies)

log = logging.getLogger(__name__)

METRICS = ("flipping_ratio", "action_cost", "action_step")
BASELINES = ("mlp", "lstm", "var", "gvar")
EPISODE_NOTE = "abnormal series = maximal contiguous run of detected steps"
ACCOUNTING_NOTE = "unflipped episodes contribute their attempted actions and costs"


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# episodes and metrics


@dataclass(frozen=True)
class Episode:
    start: int
    stop: int  # inclusive
    event: Optional[AnomalyEvent] = None

    @property
    def length(self) -> int:
        return self.stop - self.start + 1

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.stop)


def find_episodes(flags, offset: int = 0, events: Sequence[AnomalyEvent] = ()) -> list[Episode]:
    """Maximal runs of True in ``flags``; step indices are shifted by ``offset``."""
    flags = np.asarray(flags, dtype=bool)
    padded = np.concatenate([[False], flags, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    out = []
    for a, b in zip(edges[::2], edges[1::2]):
        s, e = int(a) + offset, int(b) - 1 + offset
        ev = next((x for x in events if x.start <= e and s < x.start + x.length), None)
        out.append(Episode(s, e, ev))
    return out


def split_episodes(episodes: Sequence[Episode], seed: int, frac: float = 0.5):
    order = np.random.default_rng([seed, 5]).permutation(len(episodes))
    n = int(round(frac * len(episodes)))
    return [episodes[i] for i in sorted(order[:n])], [episodes[i] for i in sorted(order[n:])]


def _check(reports) -> None:
    if not reports:
        raise MetricError("no episodes to evaluate")


def flipping_ratio(reports: Sequence[RecourseReport]) -> float:
    _check(reports)
    detected = sum(r.n_detected for r in reports)
    if detected == 0:
        raise MetricError("no detected abnormal steps")
    return sum(r.n_flipped for r in reports) / detected


def action_cost(reports: Sequence[RecourseReport]) -> float:
    _check(reports)
    return sum(r.total_cost for r in reports) / len(reports)


def action_step(reports: Sequence[RecourseReport]) -> float:
    _check(reports)
    return sum(r.steps_used for r in reports) / len(reports)


def summarize(reports: Sequence[RecourseReport]) -> dict[str, float]:
    return {"flipping_ratio": flipping_ratio(reports), "action_cost": action_cost(reports),
            "action_step": action_step(reports)}


@dataclass
class MetricsTable:
    regime: str
    per_seed: dict[str, dict[int, dict[str, float]]] = field(default_factory=dict)

    def add(self, model: str, seed: int, metrics: dict[str, float]) -> None:
        self.per_seed.setdefault(model, {})[seed] = dict(metrics)

    def models(self) -> list[str]:
        return list(self.per_seed)

    def values(self, model: str, metric: str) -> np.ndarray:
        runs = self.per_seed[model]
        return np.array([runs[s][metric] for s in sorted(runs)])

    def mean(self, model: str, metric: str) -> float:
        return float(self.values(model, metric).mean())

    def std(self, model: str, metric: str) -> float:
        v = self.values(model, metric)
        return float(v.std(ddof=1)) if v.size >= 2 else float("nan")

    def rows(self) -> list[dict]:
        out = []
        for m in self.models():
            row = {"regime": self.regime, "model": m, "n_runs": len(self.per_seed[m])}
            for k in METRICS:
                row[f"{k}_mean"] = self.mean(m, k)
                row[f"{k}_std"] = self.std(m, k)
            out.append(row)
        return out

    def write_csv(self, path) -> None:
        _write_rows(path, self.rows())

    def write_per_seed_csv(self, path) -> None:
        rows = [{"regime": self.regime, "model": m, "seed": s, **v}
                for m in self.models() for s, v in sorted(self.per_seed[m].items())]
        _write_rows(path, rows)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    dataset: str = "linear"  # linear | lotka_volterra
    regime: str = "external_point"  # external_point | external_seq | structural_seq
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    T_train: int = 20_000
    T_test: int = 50_000
    K: int = 5
    anomaly_rate: Optional[float] = None  # linear 2% point / 6% seq, lotka_volterra 1% / 3%
    magnitude: tuple[float, float] = (4.0, 5.0)
    seq_len_range: tuple[int, int] = (3, 5)
    lv_species: int = 10
    # gvar
    gvar_epochs: Optional[int] = None  # linear 30, lotka_volterra 30
    gvar_batch_size: Optional[int] = None  # linear 128, lotka_volterra 64
    gvar_hidden: int = 100
    sparsity: float = 0.1
    smoothness: float = 0.1
    penalty: str = "L2"
    # detector
    detector: str = "residual"  # residual | autoencoder
    quantile: float = 0.99
    validation_frac: float = 0.1
    # recourse
    models: tuple[str, ...] = ("recad", "mlp", "lstm", "var", "gvar")
    ablations: bool = False
    lambdas: tuple[float, ...] = ()
    lam: float = 0.1
    L: int = 1
    max_actions: int = 10
    recourse_epochs: int = 30
    recourse_batch_size: int = 32
    recourse_lr: float = 1e-3
    predictor_epochs: int = 10
    train_frac: float = 0.5

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.models = tuple(self.models)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.magnitude = tuple(self.magnitude)
        self.seq_len_range = tuple(self.seq_len_range)
        if self.dataset not in ("linear", "lotka_volterra"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        unknown = set(self.models) - {"recad", *BASELINES}
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}")
        if len(self.seeds) == 0:
            raise ValueError("at least one seed is required")

    @property
    def rate(self) -> float:
        if self.anomaly_rate is not None:
            return self.anomaly_rate
        point = 0.02 if self.dataset == "linear" else 0.01
        return point if self.regime == "external_point" else 3 * point

    def gvar_schedule(self) -> tuple[int, int]:
        epochs, batch = (30, 128) if self.dataset == "linear" else (30, 64)
        return (self.gvar_epochs or epochs, self.gvar_batch_size or batch)

    @property
    def regime_name(self) -> str:
        return f"{self.dataset}/{self.regime}"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        schema = obj.pop("schema", 1)
        if schema != 1:
            raise ValueError(f"unsupported config schema {schema}")
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**obj)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_yaml(self, path) -> None:
        Path(path).write_text(yaml.safe_dump({"schema": 1, **self.to_dict()}, sort_keys=False))


# --------------------------------------------------------------------------
# pipeline


def generate(cfg: ExperimentConfig, seed: int) -> GeneratedDataset:
    """Normal train region followed by a test region carrying injected anomalies."""
    T = cfg.T_train + cfg.T_test
    if cfg.dataset == "linear":
        base = LinearSystemParams.sample(seed)
        ds = gen_linear(base, T)
    else:
        ds = gen_lotka_volterra(LotkaVolterraParams(p=cfg.lv_species, seed=seed), T)
    ref = ds.series.values[:cfg.T_train].std(axis=0)
    spec = AnomalySpec(cfg.regime, cfg.rate, cfg.magnitude, cfg.seq_len_range, seed=seed)
    return inject_anomalies(ds, spec, start=cfg.T_train, reference_std=ref)


@dataclass
class SeedArtifacts:
    seed: int
    values: np.ndarray  # standardized, train + test
    labels: np.ndarray
    gvar: GvarModel
    detector: AnomalyDetector
    train_episodes: list[Episode]
    test_episodes: list[Episode]
    detection: dict
    data_hash: str


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedArtifacts:
    ds = generate(cfg, seed)
    raw = ds.series
    train = raw.slice(0, cfg.T_train)
    stats = fit_standardizer(train)
    values = apply_standardizer(raw, stats).values
    n_val = int(round(cfg.validation_frac * cfg.T_train))
    fit_part = MultivariateSeries(values[:cfg.T_train - n_val])
    epochs, batch = cfg.gvar_schedule()
    gcfg = GvarTrainConfig(n_lags=cfg.K - 1, hidden=cfg.gvar_hidden, sparsity=cfg.sparsity,
                           smoothness=cfg.smoothness, penalty=cfg.penalty, epochs=epochs,
                           batch_size=batch, seed=seed)
    gvar = train_gvar(fit_part, gcfg)
    if cfg.detector == "residual":
        scorer = ResidualScorer(gvar)
    elif cfg.detector == "autoencoder":
        scorer = train_autoencoder(fit_part.values, cfg.K, seed=seed)
    else:
        raise ValueError(f"unknown detector {cfg.detector!r}")
    det = build_detector(scorer, cfg.K, values[cfg.T_train - n_val:cfg.T_train], cfg.quantile)

    scores = det.score_series(values)[cfg.T_train:]
    flags = scores > det.tau
    truth = raw.labels[cfg.T_train:]
    report = eval_detection(flags, truth, scores)
    detection = {**report.as_dict(), "tau": det.tau, "quantile": cfg.quantile}

    H = history_needed(gvar, cfg.K)
    tail = cfg.L + cfg.max_actions + 1
    eps = [e for e in find_episodes(flags, cfg.T_train, ds.injected)
           if e.start - H >= 0 and e.stop + tail < values.shape[0]]
    tr, te = split_episodes(eps, seed, cfg.train_frac)
    h = hashlib.sha256(np.ascontiguousarray(raw.values).tobytes())
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    return SeedArtifacts(seed, values, raw.labels.copy(), gvar, det, tr, te, detection, h.hexdigest())


def run_detection(cfg: ExperimentConfig) -> dict[int, dict]:
    """Detection quality per seed (generate, train GVAR, calibrate, score the test region)."""
    out = {}
    with single_thread():
        for seed in cfg.seeds:
            out[seed] = prepare_seed(cfg, seed).detection
    return out


def _recad_variants(cfg: ExperimentConfig) -> dict[str, dict]:
    out = {}
    if "recad" in cfg.models:
        out["recad"] = {"lam": cfg.lam}
    if cfg.ablations:
        out["recad_wo_lstm"] = {"lam": cfg.lam, "use_seq": False}
        out["recad_wo_ffnn"] = {"lam": cfg.lam, "use_dev": False}
    for lam in cfg.lambdas:
        out[f"recad_lam={lam:g}"] = {"lam": lam}
    return out


def run_seed(cfg: ExperimentConfig, seed: int) -> tuple[SeedArtifacts, dict[str, list[RecourseReport]]]:
    art = prepare_seed(cfg, seed)
    if not art.train_episodes or not art.test_episodes:
        raise MetricError("too few detected episodes to split")
    values, gvar, det = art.values, art.gvar, art.detector
    H = history_needed(gvar, cfg.K)
    steps = [t for e in art.train_episodes for t in range(e.start, e.stop + 1)]
    segs = training_segments(values, steps, H, cfg.L)
    reports: dict[str, list[RecourseReport]] = {}

    def run(name, policy):
        reports[name] = [explain(gvar, det, policy, values, e.span, L=cfg.L, max_actions=cfg.max_actions,
                                 model=name) for e in art.test_episodes]

    for name, kw in _recad_variants(cfg).items():
        rcfg = RecourseTrainConfig(L=cfg.L, max_actions=cfg.max_actions, epochs=cfg.recourse_epochs,
                                   batch_size=cfg.recourse_batch_size, learning_rate=cfg.recourse_lr,
                                   seed=seed, **kw)
        hfun = train_recourse(gvar, det, segs, rcfg)
        run(name, recourse_policy(gvar, hfun))
    normal = values[:cfg.T_train]
    for kind in BASELINES:
        if kind in cfg.models:
            pred = train_predictor(kind, normal, cfg.K - 1, PredictorTrainConfig(epochs=cfg.predictor_epochs, seed=seed),
                                   gvar=gvar)
            run(kind, baseline_policy(pred))
    return art, reports


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    table: MetricsTable
    detection: dict[int, dict]
    manifest: dict
    reports: dict[int, dict[str, list[RecourseReport]]] = field(default_factory=dict)

    def detection_rows(self) -> list[dict]:
        return [{"regime": self.table.regime, "seed": s, **{k: v for k, v in d.items()}}
                for s, d in sorted(self.detection.items())]

    def detection_mean(self, key: str) -> float:
        return float(np.mean([d[key] for d in self.detection.values()]))


def run_experiment(cfg: ExperimentConfig, out_dir=None, keep_reports: bool = False) -> ExperimentResult:
    """Run every seed sequentially; a failing seed is recorded and skipped."""
    table = MetricsTable(cfg.regime_name)
    detection: dict[int, dict] = {}
    failures: dict[int, str] = {}
    hashes: dict[int, str] = {}
    counts: dict[int, dict] = {}
    all_reports: dict[int, dict[str, list[RecourseReport]]] = {}
    started = time.perf_counter()
    for seed in cfg.seeds:
        try:
            with single_thread():
                art, reports = run_seed(cfg, seed)
        except Exception as exc:  # recorded, not fatal
            log.warning("seed %d failed: %s", seed, exc)
            failures[seed] = f"{type(exc).__name__}: {exc}"
            continue
        detection[seed] = art.detection
        hashes[seed] = art.data_hash
        counts[seed] = {"train_episodes": len(art.train_episodes), "test_episodes": len(art.test_episodes),
                        "tau": art.detector.tau}
        for name, reps in reports.items():
            table.add(name, seed, summarize(reps))
        if keep_reports or out_dir is not None:
            all_reports[seed] = reports
    manifest = {
        "schema": 1,
        "config": cfg.to_dict(),
        "episode_definition": EPISODE_NOTE,
        "accounting": ACCOUNTING_NOTE,
        "cost_vector": "ones",
        "data_sha256": {str(k): v for k, v in hashes.items()},
        "episodes": {str(k): v for k, v in counts.items()},
        "failures": {str(k): v for k, v in failures.items()},
        "runtime_seconds": round(time.perf_counter() - started, 1),
    }
    result = ExperimentResult(cfg, table, detection, manifest, all_reports if keep_reports else {})
    if out_dir is not None:
        write_outputs(result, out_dir, all_reports)
    return result


def write_outputs(result: ExperimentResult, out_dir, reports=None) -> None:
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    result.table.write_csv(out / "tables" / "metrics.csv")
    result.table.write_per_seed_csv(out / "tables" / "metrics_per_seed.csv")
    _write_rows(out / "tables" / "detection.csv", result.detection_rows())
    for seed, by_model in (reports or {}).items():
        for name, reps in by_model.items():
            path = out / "reports" / f"seed{seed}_{name}.json"
            path.write_text(json.dumps([r.to_json() for r in reps]))
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=1, sort_keys=True))


# --------------------------------------------------------------------------
# lambda sweep


@dataclass
class LambdaSweep:
    grid: tuple[float, ...]
    flipping_ratio: np.ndarray
    action_cost: np.ndarray
    rho_flip: float
    rho_cost: float

    @property
    def trend_ok(self) -> bool:
        return self.rho_flip < 0 and self.rho_cost < 0

    def rows(self) -> list[dict]:
        return [{"lam": lam, "flipping_ratio": f, "action_cost": c}
                for lam, f, c in zip(self.grid, self.flipping_ratio, self.action_cost)]


def lambda_sweep(cfg: ExperimentConfig, grid: Sequence[float], out_dir=None) -> LambdaSweep:
    grid = tuple(float(v) for v in grid)
    if len(grid) < 4:
        raise ValueError("lambda sweep needs at least 4 grid points")
    sub = ExperimentConfig.from_dict({**cfg.to_dict(), "models": [], "ablations": False, "lambdas": list(grid)})
    res = run_experiment(sub, out_dir)
    names = [f"recad_lam={lam:g}" for lam in grid]
    missing = [n for n in names if n not in res.table.per_seed]
    if missing:
        raise MetricError(f"sweep produced no results for {missing}: {res.manifest['failures']}")
    flip = np.array([res.table.mean(n, "flipping_ratio") for n in names])
    cost = np.array([res.table.mean(n, "action_cost") for n in names])
    rho_f = float(spearmanr(grid, flip).statistic)
    rho_c = float(spearmanr(grid, cost).statistic)
    sweep = LambdaSweep(grid, flip, cost, rho_f, rho_c)
    if out_dir is not None:
        _write_rows(Path(out_dir) / "tables" / "lambda_sweep.csv", sweep.rows())
    return sweep
