"""Command line entry points: ``tsrecourse <command> --help``."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import eval as ev
from .baselines import KINDS as BASELINE_KINDS, PredictorTrainConfig, baseline_policy, train_predictor
from .detector import (AnomalyDetector, ResidualScorer, build_detector, best_f1_threshold, eval_detection,
                       train_autoencoder)
from .gvar import GvarModel, GvarTrainConfig, train_gvar
from .recourse import (RecourseFunction, RecourseTrainConfig, explain as explain_episode, history_needed,
                       recourse_policy, train_recourse, training_segments)
from .series import (MultivariateSeries, StandardizationStats, apply_standardizer, fit_standardizer, read_csv,
                     write_csv, write_matrix_csv)


def _std_values(data: Path, stats: Path) -> tuple[MultivariateSeries, np.ndarray, StandardizationStats]:
    series = read_csv(data)
    st = StandardizationStats.load(stats)
    return series, apply_standardizer(series, st).values, st


def _load_models(gvar: Path, detector: Path) -> tuple[GvarModel, AnomalyDetector]:
    g = GvarModel.load(gvar)
    return g, AnomalyDetector.load(detector, g)


class _Group(click.Group):
    """Report library errors as one-line CLI errors instead of tracebacks."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (ValueError, RuntimeError) as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@click.option("--dataset", type=click.Choice(["linear", "lotka_volterra"]), default="linear")
@click.option("--regime", type=click.Choice(["external_point", "external_seq", "structural_seq"]),
              default="external_point")
@click.option("--t-train", type=int, default=20_000)
@click.option("--t-test", type=int, default=50_000)
@click.option("--rate", type=float, default=None)
@click.option("--seed", type=int, default=1)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
def generate(dataset, regime, t_train, t_test, rate, seed, out_dir):
    """Write train.csv (normal), test.csv (labeled) and events.json (test-relative steps)."""
    cfg = ev.ExperimentConfig(dataset=dataset, regime=regime, T_train=t_train, T_test=t_test,
                              anomaly_rate=rate, seeds=(seed,))
    ds = ev.generate(cfg, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(ds.series.slice(0, t_train), out_dir / "train.csv", include_labels=False)
    write_csv(ds.series.slice(t_train, t_train + t_test), out_dir / "test.csv")
    events = [replace(e, start=e.start - t_train).to_json() for e in ds.injected]
    (out_dir / "events.json").write_text(json.dumps({"schema": 1, "events": events}, indent=1))
    click.echo(f"wrote {len(events)} events to {out_dir}")


@main.command("train-gvar")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True, help="normal training CSV")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--lags", type=int, default=4)
@click.option("--epochs", type=int, default=30)
@click.option("--batch-size", type=int, default=128)
@click.option("--sparsity", type=float, default=0.1)
@click.option("--smoothness", type=float, default=0.1)
@click.option("--penalty", type=click.Choice(["L1", "L2"]), default="L2")
@click.option("--loss", type=click.Choice(["norm", "squared"]), default="norm")
@click.option("--validation-frac", type=float, default=0.1, help="tail held out for the detector")
@click.option("--seed", type=int, default=0)
def train_gvar_cmd(data, out_dir, lags, epochs, batch_size, sparsity, smoothness, penalty, loss,
                   validation_frac, seed):
    """Standardize, fit GVAR on the leading part of the data, write gvar.json, stats.json, loss curve."""
    series = read_csv(data)
    stats = fit_standardizer(series)
    values = apply_standardizer(series, stats).values
    n_fit = series.T - int(round(validation_frac * series.T))
    cfg = GvarTrainConfig(n_lags=lags, sparsity=sparsity, smoothness=smoothness, penalty=penalty, loss=loss,
                          epochs=epochs, batch_size=batch_size, seed=seed)
    model = train_gvar(MultivariateSeries(values[:n_fit]), cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / "gvar.json")
    stats.save(out_dir / "stats.json")
    hist = model.loss_history
    keys = ["epoch", "prediction", "sparsity", "smoothness", "total"]
    write_matrix_csv(np.array([[h[k] for k in keys] for h in hist]), keys, out_dir / "gvar_loss.csv")
    click.echo(f"final loss {hist[-1]['total']:.4f}")


@main.command("train-detector")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True, help="normal training CSV")
@click.option("--gvar", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--stats", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--kind", type=click.Choice(["residual", "autoencoder"]), default="residual")
@click.option("--window", "K", type=int, default=5)
@click.option("--quantile", type=float, default=0.99)
@click.option("--validation-frac", type=float, default=0.1)
@click.option("--seed", type=int, default=0)
def train_detector_cmd(data, gvar, stats, out, kind, K, quantile, validation_frac, seed):
    """Calibrate tau as a quantile of scores on the held-out tail of the normal data."""
    _, values, _ = _std_values(data, stats)
    n_val = int(round(validation_frac * values.shape[0]))
    g = GvarModel.load(gvar)
    scorer = ResidualScorer(g) if kind == "residual" else train_autoencoder(values[:-n_val], K, seed=seed)
    det = build_detector(scorer, K, values[-n_val:], quantile)
    det.save(out)
    click.echo(f"tau = {det.tau:.6f} (q = {quantile})")


@main.command()
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--gvar", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--detector", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--stats", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--best-f1", is_flag=True, help="also report F1 at the label-optimal threshold")
@click.option("--seed", type=int, default=0, help="seed of the 50/50 episode split")
def detect(data, gvar, detector, stats, out_dir, best_f1, seed):
    """Write detections.csv (step, score, label) and episodes.json with a train/test split."""
    series, values, _ = _std_values(data, stats)
    g, det = _load_models(gvar, detector)
    scores = det.score_series(values)
    flags = scores > det.tau
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "detections.csv", "w") as fh:
        fh.write("step,score,label\n")
        for t, s in enumerate(scores):
            fh.write(f"{t},{'' if np.isnan(s) else repr(float(s))},{'' if np.isnan(s) else int(flags[t])}\n")
    H = history_needed(g, det.K)
    episodes = [e for e in ev.find_episodes(flags[det.K - 1:], det.K - 1)
                if e.start >= H and e.stop + 12 < values.shape[0]]
    tr, te = ev.split_episodes(episodes, seed)
    (out_dir / "episodes.json").write_text(json.dumps(
        {"schema": 1, "train": [e.span for e in tr], "test": [e.span for e in te]}))
    msg = f"{int(flags[det.K - 1:].sum())} detected steps, {len(episodes)} episodes"
    if series.labels is not None and series.labels.any():
        sl = slice(det.K - 1, None)
        rep = eval_detection(flags[sl], series.labels[sl], scores[sl])
        msg += f"; F1 {rep.f1:.3f} AUC-PR {rep.auc_pr:.3f} AUC-ROC {rep.auc_roc:.3f}"
        if best_f1:
            tau = best_f1_threshold(scores[sl], series.labels[sl])
            alt = eval_detection(scores[sl] > tau, series.labels[sl], scores[sl])
            msg += f"; best-F1 {alt.f1:.3f} at tau {tau:.4f}"
    click.echo(msg)


@main.command("train-recourse")
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--gvar", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--detector", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--stats", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--episodes", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--lam", type=float, default=0.1)
@click.option("--lookahead", "L", type=int, default=1)
@click.option("--epochs", type=int, default=30)
@click.option("--batch-size", type=int, default=32)
@click.option("--no-lstm", is_flag=True)
@click.option("--no-ffnn", is_flag=True)
@click.option("--seed", type=int, default=0)
def train_recourse_cmd(data, gvar, detector, stats, episodes, out, lam, L, epochs, batch_size, no_lstm, no_ffnn,
                       seed):
    """Fit the recourse function on the training half of the detected episodes."""
    _, values, _ = _std_values(data, stats)
    g, det = _load_models(gvar, detector)
    spans = json.loads(episodes.read_text())["train"]
    steps = [t for a, b in spans for t in range(a, b + 1)]
    segs = training_segments(values, steps, history_needed(g, det.K), L)
    cfg = RecourseTrainConfig(lam=lam, L=L, epochs=epochs, batch_size=batch_size, use_seq=not no_lstm,
                              use_dev=not no_ffnn, seed=seed)
    h = train_recourse(g, det, segs, cfg)
    h.save(out)
    click.echo(f"trained on {segs.shape[0]} windows, final loss {h.loss_history[-1]['loss']:.4f}")


@main.command()
@click.option("--data", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--gvar", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--detector", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--stats", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--episodes", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--recourse", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--baseline", type=click.Choice(BASELINE_KINDS), default=None)
@click.option("--normal-data", type=click.Path(exists=True, path_type=Path), default=None,
              help="normal CSV used to fit a baseline predictor")
@click.option("--lookahead", "L", type=int, default=1)
@click.option("--max-actions", type=int, default=10)
def explain(data, gvar, detector, stats, episodes, out_dir, recourse, baseline, normal_data, L, max_actions):
    """Recourse for each test episode: one report JSON and counterfactual CSV per episode."""
    series, values, st = _std_values(data, stats)
    g, det = _load_models(gvar, detector)
    if (recourse is None) == (baseline is None):
        raise click.UsageError("give exactly one of --recourse or --baseline")
    if recourse is not None:
        policy, name = recourse_policy(g, RecourseFunction.load(recourse)), "recad"
    else:
        if baseline != "gvar" and normal_data is None:
            raise click.UsageError("--normal-data is required to fit this baseline")
        normal = apply_standardizer(read_csv(normal_data), st).values if normal_data else values
        pred = train_predictor(baseline, normal, det.K - 1, PredictorTrainConfig(), gvar=g)
        policy, name = baseline_policy(pred), baseline
    spans = json.loads(episodes.read_text())["test"]
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for a, b in spans:
        rep = explain_episode(g, det, policy, values, (a, b), L=L, max_actions=max_actions, model=name)
        cf_path = out_dir / f"{name}_cf_{a}.csv"
        raw = rep.counterfactual * st.std + st.mean
        write_matrix_csv(np.column_stack([rep.steps, raw]), ("step", *series.names()), cf_path)
        (out_dir / f"{name}_episode_{a}.json").write_text(json.dumps(rep.to_json(st.std, str(cf_path)), indent=1))
        reports.append(rep)
    if reports:
        m = ev.summarize(reports)
        click.echo(" ".join(f"{k}={v:.4f}" for k, v in m.items()))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--sweep", default=None, help="comma-separated lambda grid; runs a lambda sweep instead")
def evaluate(config_path, out_dir, sweep):
    """Run the multi-seed experiment described by a YAML config (schema: 1)."""
    cfg = ev.ExperimentConfig.from_yaml(config_path) if config_path else ev.ExperimentConfig()
    if sweep:
        res = ev.lambda_sweep(cfg, [float(v) for v in sweep.split(",")], out_dir)
        for row in res.rows():
            click.echo(f"lam={row['lam']:g} flip={row['flipping_ratio']:.3f} cost={row['action_cost']:.3f}")
        click.echo(f"spearman flip {res.rho_flip:.3f} cost {res.rho_cost:.3f}")
        return
    res = ev.run_experiment(cfg, out_dir)
    for row in res.table.rows():
        click.echo(f"{row['model']:>14} flip {row['flipping_ratio_mean']:.3f}±{row['flipping_ratio_std']:.3f} "
                   f"cost {row['action_cost_mean']:.3f} step {row['action_step_mean']:.3f}")
    if res.manifest["failures"]:
        click.echo(f"failed seeds: {res.manifest['failures']}")


if __name__ == "__main__":
    main()
