"""Command-line entry point: ``hfdtm <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 runtime or numeric failure.
Errors are printed to stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .dataio import DataError, load_movement_csv, load_topology, prepare, write_movement_csv, write_topology
from .evaluation import ExperimentCache, analysis_text, analyze_dataset, evaluate, residuals_csv, run_ablation, run_comparison
from .model import load_checkpoint, save_checkpoint
from .synth import SynthConfig, compute_flow_statistics, generate_corridor_data
from .training import NumericError, TrainConfig, train

log = logging.getLogger("hfdtm")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict = field(default_factory=dict)
    config_digest: str | None = None
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    tool_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None

    def add_input(self, path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = file_digest(path)

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("need at least one seed")
    return seeds


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(_read_json(args.config))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _load_inputs(args, manifest: RunManifest):
    table = load_movement_csv(args.data)
    topology = load_topology(args.topology)
    manifest.add_input(args.data)
    manifest.add_input(args.topology)
    if args.__dict__.get("config"):
        manifest.add_input(args.config)
    return table, topology


# -- commands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    base = _read_json(args.config)
    if args.seed is not None:
        base["seed"] = args.seed
    if args.days is not None:
        base["days"] = args.days
    cfg = SynthConfig.from_dict(base)
    cfg.validate()
    out = _out_dir(args.out)
    m = RunManifest("generate", sys.argv[1:], cfg.to_dict(), seed=cfg.seed)
    m.config_digest = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    if args.config:
        m.add_input(args.config)
    table, topology = generate_corridor_data(cfg)
    write_movement_csv(table, out / "movements.csv")
    write_topology(topology, out / "topology.json")
    stats = compute_flow_statistics(table, topology)
    _write_json(out / "flow_stats.json", {**stats.summary(), "skipped": stats.skipped})
    for name in ("movements.csv", "topology.json", "flow_stats.json"):
        m.add_output(out / name)
    m.write(out)
    print(json.dumps({"rows": len(table.timestamps), "movements": topology.n_movements, **stats.summary()}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = _out_dir(args.out)
    m = RunManifest("train", sys.argv[1:], cfg.to_dict(), cfg.digest(), cfg.seed)
    table, topology = _load_inputs(args, m)
    data = prepare(table, topology, window=cfg.window)
    model, hist = train(args.model, data, cfg)
    extra = {"config": cfg.to_dict(), "norm_digest": data.norm.digest(), "data_digest": data.data_digest}
    save_checkpoint(model, out / "checkpoint.json", extra)
    _write_json(out / "history.json", hist.to_dict(timings=False))
    m.add_output(out / "checkpoint.json")
    m.add_output(out / "history.json")
    m.timings = {"train_seconds": hist.train_seconds, "epoch_seconds": hist.seconds}
    m.write(out)
    print(json.dumps({"model": model.kind, "best_epoch": hist.best_epoch, "epochs": hist.epochs,
                      "best_val_mae": min(hist.val_mae), "checkpoint": str(out / "checkpoint.json")}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    m = RunManifest("evaluate", sys.argv[1:])
    table, topology = _load_inputs(args, m)
    model, extra = load_checkpoint(args.checkpoint, topology)
    m.add_input(args.checkpoint)
    cfg = TrainConfig.from_dict(extra.get("config", {}))
    m.config, m.config_digest, m.seed = cfg.to_dict(), cfg.digest(), cfg.seed
    data = prepare(table, topology, window=cfg.window)
    if extra.get("norm_digest") not in (None, data.norm.digest()):
        raise UsageError("normalization fitted on this data differs from the checkpoint's")
    rep = evaluate(model, data.test, data.norm, topology, model_id=model.kind, config=cfg)
    doc = rep.to_dict(timings=False)
    print(f"{rep.model_id}: MAE {rep.mae:.4f}  RMSE {rep.rmse:.4f}  (vehicles per 15-minute interval)")
    if args.out:
        out = _out_dir(args.out)
        _write_json(out / "metrics.json", doc)
        m.add_output(out / "metrics.json")
        if args.residuals:
            residuals_csv(model, data.test, data.norm, out / "residuals.csv")
            m.add_output(out / "residuals.csv")
        m.write(out)
    return EXIT_OK


def _experiment(args, which: str) -> int:
    cfg = _train_config(args)
    seeds = _seeds(args.seeds)
    m = RunManifest(which, sys.argv[1:], cfg.to_dict(), cfg.digest(), seeds[0])
    table, topology = _load_inputs(args, m)
    data = prepare(table, topology, window=cfg.window)
    cache = ExperimentCache(data, cfg)
    run = run_comparison if which == "compare" else run_ablation
    result = run(data, cfg, seeds=seeds, cache=cache)
    text = result.to_text()
    print(text)
    if args.out:
        out = _out_dir(args.out)
        stem = "comparison" if which == "compare" else "ablation"
        _write_json(out / f"{stem}.json", result.to_dict(timings=False))
        (out / f"{stem}.txt").write_text(text + "\n")
        m.add_output(out / f"{stem}.json")
        m.add_output(out / f"{stem}.txt")
        m.timings = {f"{r['label']}/{r['seed']}": r["train_seconds"] for r in result.rows}
        m.write(out)
    return EXIT_OK


def cmd_compare(args) -> int:
    return _experiment(args, "compare")


def cmd_ablate(args) -> int:
    return _experiment(args, "ablate")


def cmd_analyze(args) -> int:
    m = RunManifest("analyze", sys.argv[1:], {"n_bins": args.bins})
    table, topology = _load_inputs(args, m)
    rep = analyze_dataset(table, topology, args.bins)
    print(analysis_text(rep))
    if args.out:
        out = _out_dir(args.out)
        _write_json(out / "analysis.json", rep)
        m.add_output(out / "analysis.json")
        m.write(out)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hfdtm", description="Corridor-first turning-movement forecasting.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for per-epoch logs")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corridor dataset")
    g.add_argument("--config", help="SynthConfig JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--days", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="movement count CSV")
        sp.add_argument("--topology", required=True, help="topology JSON")

    t = sub.add_parser("train", help="train one model and save the best checkpoint")
    data_args(t)
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--model", choices=("hfdtm", "gru", "lstm"), default="hfdtm")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="test-set MAE/RMSE of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    data_args(e)
    e.add_argument("--out")
    e.add_argument("--residuals", action="store_true", help="also write residuals.csv (needs --out)")
    e.set_defaults(func=cmd_evaluate)

    for name, func, what in (("compare", cmd_compare, "HFD-TM vs flat GRU/LSTM"),
                             ("ablate", cmd_ablate, "four-arm ablation")):
        c = sub.add_parser(name, help=what)
        data_args(c)
        c.add_argument("--config", help="TrainConfig JSON")
        c.add_argument("--seeds", default="0,1,2")
        c.add_argument("--out")
        c.set_defaults(func=func)

    a = sub.add_parser("analyze", help="flow statistics and variance decomposition")
    data_args(a)
    a.add_argument("--bins", type=int, default=20)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        return _fail(EXIT_RUNTIME, "numeric", exc)
    except (DataError, UsageError, ValueError, KeyError, IndexError, FileNotFoundError) as exc:
        return _fail(EXIT_INVALID, "invalid_input", exc)
    except OSError as exc:
        return _fail(EXIT_INVALID, "io", exc)
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        log.debug("unhandled failure", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", exc)


if __name__ == "__main__":
    sys.exit(main())
