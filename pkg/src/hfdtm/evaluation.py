"""Test-set metrics, model comparison, ablation tables and dataset analysis."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataio import CorridorTopology, MovementTable, NormalizationParams, PreparedData, WindowSet, invert_normalization
from .metrics import mae, rmse
from .model import Model
from .synth import compute_flow_statistics
from .training import TrainConfig, TrainHistory, train

log = logging.getLogger(__name__)

COMPARISON_MODELS = ("hfdtm", "gru", "lstm")
ABLATION_ARMS = ("none", "no_hierarchy", "no_corridor_weight", "no_conservation")
ARM_LABELS = {
    "none": "Full Model",
    "no_hierarchy": "- Hierarchy",
    "no_corridor_weight": "- Corridor Weight",
    "no_conservation": "- Conservation",
}
MODEL_LABELS = {"hfdtm": "HFD-TM", "gru": "GRU", "lstm": "LSTM"}


@dataclass
class MetricsReport:
    model_id: str
    mae: float
    rmse: float
    train_seconds: float = 0.0
    seed: int | None = None
    config_digest: str | None = None
    best_epoch: int | None = None
    epochs: int | None = None
    per_movement_mae: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.rmse >= self.mae - 1e-12 >= -1e-12):
            raise ValueError(f"inconsistent metrics: MAE {self.mae}, RMSE {self.rmse}")

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        if not timings:
            d.pop("train_seconds")
        return d


def pct_delta(other: float, reference: float) -> float:
    return (other - reference) / reference * 100.0


def evaluate(model: Model, windows: WindowSet, norm: NormalizationParams, topology: CorridorTopology,
             history: TrainHistory | None = None, model_id: str | None = None,
             config: TrainConfig | None = None) -> MetricsReport:
    """MAE/RMSE over active movements, in vehicles per interval."""
    if model.topology.digest() != topology.digest():
        raise ValueError("model was built for a different topology")
    if len(windows) == 0:
        raise ValueError("empty evaluation set")
    X, y, h = windows.all()
    pred = invert_normalization(model.predict(X, h), norm)
    true = invert_normalization(y, norm)
    a = topology.active_idx
    per = {topology.movement_ids[i]: mae(pred[:, i], true[:, i]) for i in a}
    return MetricsReport(
        model_id=model_id or model.kind,
        mae=mae(pred[:, a], true[:, a]),
        rmse=rmse(pred[:, a], true[:, a]),
        train_seconds=history.train_seconds if history else 0.0,
        seed=model.seed,
        config_digest=config.digest() if config else None,
        best_epoch=history.best_epoch if history else None,
        epochs=history.epochs if history else None,
        per_movement_mae=per,
    )


def residuals_csv(model: Model, windows: WindowSet, norm: NormalizationParams, path: str | Path) -> None:
    """Per-sample, per-movement residuals (observed minus predicted, vehicles)."""
    X, y, h = windows.all()
    resid = invert_normalization(y, norm) - invert_normalization(model.predict(X, h), norm)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "hour", *model.topology.movement_ids])
        for i, row in enumerate(resid):
            w.writerow([i, int(h[i]), *(repr(float(v)) for v in row)])


# -- experiment runs ------------------------------------------------------


@dataclass
class RunResult:
    kind: str
    ablation: str
    seed: int
    report: MetricsReport
    history: TrainHistory
    model: Model


class ExperimentCache:
    """Trains each (model, ablation, seed) at most once.

    The full-model arm of the ablation and the HFD-TM row of the comparison
    are the same run, so both tables share it.
    """

    def __init__(self, data: PreparedData, config: TrainConfig = TrainConfig()):
        self.data = data
        self.config = config
        self.runs: dict[tuple[str, str, int], RunResult] = {}

    def get(self, kind: str, ablation: str, seed: int) -> RunResult:
        key = (kind, ablation, seed)
        if key not in self.runs:
            cfg = self.config.replace(seed=seed, ablation=ablation)
            log.info("training %s (%s) seed %d", kind, ablation, seed)
            model, hist = train(kind, self.data, cfg)
            label = MODEL_LABELS[kind] if ablation == "none" else ARM_LABELS[ablation]
            rep = evaluate(model, self.data.test, self.data.norm, self.data.topology, hist, label, cfg)
            self.runs[key] = RunResult(kind, ablation, seed, rep, hist, model)
        return self.runs[key]


@dataclass
class ResultTable:
    """Rows per (label, seed) plus seed-mean rows, with deltas vs. a reference label."""

    title: str
    reference: str
    rows: list[dict]

    def mean_rows(self) -> list[dict]:
        return [r for r in self.rows if r["seed"] == "mean"]

    def mean(self, label: str, key: str = "mae") -> float:
        for r in self.mean_rows():
            if r["label"] == label:
                return r[key]
        raise KeyError(label)

    def to_dict(self, timings: bool = True) -> dict:
        rows = [dict(r) for r in self.rows]
        if not timings:
            for r in rows:
                r.pop("train_seconds", None)
        return {"title": self.title, "reference": self.reference, "rows": rows}

    def to_text(self) -> str:
        head = f"{'Model':<20}{'Seed':>6}{'MAE':>10}{'RMSE':>10}{'Time (s)':>10}{'MAE Δ':>10}{'RMSE Δ':>10}{'Best ep':>9}"
        lines = [self.title, "-" * len(head), head, "-" * len(head)]
        for r in self.rows:
            if r["label"] == self.reference:
                dm = dr = "--"
            else:
                dm, dr = f"{r['mae_delta_pct']:+.1f}%", f"{r['rmse_delta_pct']:+.1f}%"
            best = r.get("best_epoch")
            best = "" if best is None else (f"{best:.1f}" if isinstance(best, float) else str(best))
            lines.append(
                f"{r['label']:<20}{str(r['seed']):>6}{r['mae']:>10.4f}{r['rmse']:>10.4f}"
                f"{r['train_seconds']:>10.1f}{dm:>10}{dr:>10}{best:>9}"
            )
        lines.append("-" * len(head))
        return "\n".join(lines)


def build_table(title: str, results: Sequence[RunResult], label_of, reference: str) -> ResultTable:
    """Assemble per-seed rows and mean rows; deltas are against ``reference``."""
    labels: list[str] = []
    for r in results:
        if label_of(r) not in labels:
            labels.append(label_of(r))
    if reference not in labels:
        raise ValueError(f"reference {reference!r} missing from results")
    ref_by_seed = {r.seed: r.report for r in results if label_of(r) == reference}
    rows = []
    for label in labels:
        mine = [r for r in results if label_of(r) == label]
        for r in mine:
            ref = ref_by_seed[r.seed]
            rows.append({
                "label": label, "seed": r.seed, "mae": r.report.mae, "rmse": r.report.rmse,
                "train_seconds": r.report.train_seconds, "best_epoch": r.report.best_epoch,
                "mae_delta_pct": pct_delta(r.report.mae, ref.mae),
                "rmse_delta_pct": pct_delta(r.report.rmse, ref.rmse),
            })
        rows.append({
            "label": label, "seed": "mean",
            "mae": float(np.mean([r.report.mae for r in mine])),
            "rmse": float(np.mean([r.report.rmse for r in mine])),
            "train_seconds": float(np.mean([r.report.train_seconds for r in mine])),
            "best_epoch": float(np.mean([r.report.best_epoch for r in mine])),
        })
    ref_mae = next(r["mae"] for r in rows if r["label"] == reference and r["seed"] == "mean")
    ref_rmse = next(r["rmse"] for r in rows if r["label"] == reference and r["seed"] == "mean")
    for r in rows:
        if r["seed"] == "mean":
            r["mae_delta_pct"] = pct_delta(r["mae"], ref_mae)
            r["rmse_delta_pct"] = pct_delta(r["rmse"], ref_rmse)
    return ResultTable(title, reference, rows)


def run_comparison(data: PreparedData, config: TrainConfig = TrainConfig(), seeds: Iterable[int] = (0, 1, 2),
                   models: Sequence[str] = COMPARISON_MODELS, cache: ExperimentCache | None = None) -> ResultTable:
    cache = cache or ExperimentCache(data, config)
    results = [cache.get(kind, "none", s) for kind in models for s in seeds]
    return build_table("Baseline comparison (vehicles per 15-minute interval)", results,
                       lambda r: MODEL_LABELS[r.kind], MODEL_LABELS["hfdtm"])


def run_ablation(data: PreparedData, config: TrainConfig = TrainConfig(), seeds: Iterable[int] = (0, 1, 2),
                 cache: ExperimentCache | None = None) -> ResultTable:
    cache = cache or ExperimentCache(data, config)
    results = [cache.get("hfdtm", arm, s) for arm in ABLATION_ARMS for s in seeds]
    return build_table("Ablation study (ΔMAE relative to the full model)", results,
                       lambda r: ARM_LABELS[r.ablation], ARM_LABELS["none"])


def analyze_dataset(table: MovementTable, topology: CorridorTopology, n_bins: int = 20) -> dict:
    """Flow statistics plus the per-movement total-variance split."""
    stats = compute_flow_statistics(table, topology, n_bins)
    movements = []
    for i, mid in enumerate(topology.movement_ids):
        movements.append({
            "id": mid,
            "corridor": bool(i in set(topology.corridor_idx.tolist())),
            "total_var": float(stats.total_var[i]),
            "expected_cond_var": float(stats.expected_cond_var[i]),
            "var_cond_mean": float(stats.var_cond_mean[i]),
        })
    return {"summary": stats.summary(), "skipped": stats.skipped, "movements": movements}


def analysis_text(report: dict) -> str:
    s = report["summary"]
    lines = [
        "Flow statistics",
        f"  corridor volume share     {s['corridor_volume_share']:.3f}",
        f"  mean CV, corridor         {s['cv_corridor']:.3f}",
        f"  mean CV, turning          {s['cv_turning']:.3f}",
        f"  mean corr(turn, corridor) {s['mean_corr']:.3f}",
        f"  mean R^2                  {s['mean_r2']:.3f}",
        f"  conditioning bins         {s['n_bins']}",
    ]
    turning = [m for m in report["movements"] if not m["corridor"] and m["total_var"] > 0]
    if turning:
        frac = np.mean([m["var_cond_mean"] / m["total_var"] for m in turning])
        lines.append(f"  mean explained share of turning variance  {frac:.3f}")
    return "\n".join(lines)
