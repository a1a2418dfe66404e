"""Command line entry point: prepare, train, evaluate, grid, cost-report, export."""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs bitwise reproducible; must precede the numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, config_hash, parse_config, validate_config
from .data import load_series_csv
from .graph import build_adjacency_from_distances, read_distance_csv, write_weight_csv
from .harness import (DEFAULT_GRID, DataLoadError, attention_score_report, emit_results_table,
                      export_forecast_series, format_attention_cost, make_model, prepare_data,
                      results_dir, run_experiment_grid, run_single, run_summary)
from .layers import load_checkpoint, save_checkpoint
from .tensor import Tensor
from .train import TrainingDiverged, evaluate, persistence_baseline

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5
EXIT_GRID_PARTIAL = 6


class CheckpointError(RuntimeError):
    pass


def _load_config(path: str | None) -> ExperimentConfig:
    return parse_config(path) if path else ExperimentConfig()


def _format_report(report, mape_enabled: bool) -> str:
    lines = []
    for h, m in report.horizons.items():
        line = f"{h:>3}-step  MAE {m.mae:.4f}  RMSE {m.rmse:.4f}"
        if mape_enabled and m.mape is not None:
            line += f"  MAPE {m.mape:.2f}%  (excluded {m.mape_excluded})"
        lines.append(line)
    return "\n".join(lines)


def _restore(cfg: ExperimentConfig, data, path: str):
    try:
        kind, meta, state = load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    model = make_model(cfg, data.graph.n, cfg.train.seed, data.dataset.slots_per_day)
    if kind != model.kind:
        raise CheckpointError(f"checkpoint holds a {kind!r} model, config builds {model.kind!r}")
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return model


def cmd_prepare(args) -> int:
    try:
        rows = read_distance_csv(args.distances)
        node_ids = None
        if args.series:
            node_ids = load_series_csv(args.series, args.kind).node_ids
        g = build_adjacency_from_distances(rows, sigma=args.sigma, epsilon=args.epsilon,
                                           node_ids=node_ids)
    except (OSError, ValueError) as exc:
        raise DataLoadError(str(exc)) from exc
    write_weight_csv(g, args.out)
    print(f"wrote {g.edge_count} edges over {g.n} nodes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.backbone or args.spatial:
        cfg = cfg.with_model(backbone=args.backbone or cfg.model.backbone,
                             spatial=args.spatial or cfg.model.spatial)
    if args.seed is not None:
        cfg = cfg.with_train(seed=args.seed)
    if args.max_epochs is not None:
        cfg = cfg.with_train(max_epochs=args.max_epochs)
    validate_config(cfg)
    data = prepare_data(cfg)
    result = run_single(cfg, data)
    out = results_dir(cfg)
    save_checkpoint(out / "model.stgw", result.model, result.model.kind, config_hash(cfg))
    (out / "train_log.txt").write_text("\n".join(result.log.lines()) + "\n", encoding="utf-8")
    (out / "run_summary.txt").write_text(run_summary(cfg, result), encoding="utf-8")
    print(f"{result.variant}: {result.parameter_count} parameters, {len(result.log.epochs)} epochs, "
          f"best epoch {result.log.best_epoch}")
    print(_format_report(result.report, data.dataset.mape_enabled))
    print(f"results in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    data = prepare_data(cfg)
    model = _restore(cfg, data, args.checkpoint)
    report = evaluate(model, data.test, data.scaler, data.ctx, cfg.model.horizons,
                      data.dataset.mape_enabled, cfg.train.step_mode)
    print(f"{model.kind}")
    print(_format_report(report, data.dataset.mape_enabled))
    if args.baseline:
        base = persistence_baseline(data.test, cfg.model.horizons, data.dataset.mape_enabled,
                                    cfg.train.step_mode)
        print("persistence")
        print(_format_report(base, data.dataset.mape_enabled))
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load_config(args.config)
    if args.max_epochs is not None:
        cfg = cfg.with_train(max_epochs=args.max_epochs)
    grid = DEFAULT_GRID
    if args.cells:
        grid = tuple(tuple(c.split("/", 1)) for c in args.cells)
        for cell in grid:
            if len(cell) != 2:
                raise ConfigError(f"grid cell {'/'.join(cell)!r} is not backbone/spatial", key="cells")
    gr = run_experiment_grid(cfg, grid, jobs=args.jobs, n_seeds=args.seeds)
    out = results_dir(cfg)
    (out / "results.csv").write_text(emit_results_table(gr, "csv"), encoding="utf-8")
    sys.stdout.write(emit_results_table(gr, args.format))
    print(f"results in {out}")
    return EXIT_GRID_PARTIAL if gr.failures else EXIT_OK


def cmd_cost_report(args) -> int:
    if args.nodes is not None:
        if args.edges is None:
            raise ConfigError("--edges is required with --nodes", key="edges")
        sys.stdout.write(format_attention_cost(attention_score_report(args.nodes, args.edges)))
        return EXIT_OK
    cfg = _load_config(args.config)
    data = prepare_data(cfg)
    model = make_model(cfg, data.graph.n, cfg.train.seed, data.dataset.slots_per_day)
    b = data.test.batch(np.arange(1))
    model(Tensor(data.scaler.transform(b.x)), b.times, data.ctx)      # one live pass for the counters
    cost = attention_score_report(data.graph.n, data.graph.edge_count, model)
    sys.stdout.write(format_attention_cost(cost))
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _load_config(args.config)
    data = prepare_data(cfg)
    model = _restore(cfg, data, args.checkpoint)
    text = export_forecast_series(model, data.test, data.scaler, data.ctx, data.dataset.node_ids,
                                  args.horizon, args.nodes or None)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {len(data.test)} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stgnn-lab", description="Spatio-temporal GNN traffic forecasting lab")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="build a thresholded Gaussian-kernel adjacency from distances")
    s.add_argument("--distances", required=True, help="CSV with src_id,dst_id,distance")
    s.add_argument("--out", required=True, help="output CSV with src_id,dst_id,weight")
    s.add_argument("--sigma", type=float, default=None, help="kernel width (default: std of distances)")
    s.add_argument("--epsilon", type=float, default=0.1)
    s.add_argument("--series", help="series CSV whose header fixes the node order")
    s.add_argument("--kind", default="speed", choices=("speed", "flow"))
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one model and evaluate it on the test split")
    s.add_argument("--config")
    s.add_argument("--backbone", choices=("rnn", "attn"))
    s.add_argument("--spatial", choices=("gcn", "gat", "full-attn"))
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="evaluate a saved checkpoint on the test split")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--baseline", action="store_true", help="also report the persistence baseline")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("grid", help="run the backbone x spatial-kind grid")
    s.add_argument("--config")
    s.add_argument("--cells", nargs="*", help="cells like rnn/gcn attn/gat (default: 2x2 grid)")
    s.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds (mean ± std)")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--format", choices=("text", "csv"), default="text")
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("cost-report", help="attention-score counts per spatial layer")
    s.add_argument("--config")
    s.add_argument("--nodes", type=int)
    s.add_argument("--edges", type=int)
    s.set_defaults(func=cmd_cost_report)

    s = sub.add_parser("export", help="export actual vs predicted series at one horizon")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--horizon", type=int, default=12)
    s.add_argument("--nodes", nargs="*", help="node ids (default: all)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataLoadError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
