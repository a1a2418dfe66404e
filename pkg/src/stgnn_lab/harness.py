"""Experiment grid over backbone x spatial kind, result tables, cost report, forecast export."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, serialize_config, validate_config
from .data import (SeriesDataset, SplitSpec, Scaler, WindowSet, load_series_csv, make_windows,
                   scaler_fit, split, synth_generate)
from .graph import (Graph, build_adjacency_from_distances, random_sensor_network,
                    read_distance_csv, read_weight_csv)
from .models import GraphContext, build_model, spatial_layers
from .train import (MetricsReport, TrainSettings, TrainingLog, evaluate, persistence_baseline,
                    predict, train_model)

log = logging.getLogger(__name__)

DEFAULT_GRID = (("rnn", "gcn"), ("rnn", "gat"), ("attn", "gcn"), ("attn", "gat"))
METRICS = ("mae", "rmse", "mape")


class DataLoadError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    dataset: SeriesDataset
    graph: Graph
    scaler: Scaler
    train: WindowSet
    val: WindowSet
    test: WindowSet
    ctx: GraphContext


def load_dataset_and_graph(cfg: ExperimentConfig) -> tuple[SeriesDataset, Graph]:
    d, g = cfg.data, cfg.graph
    try:
        if d.path is None:
            graph, _ = random_sensor_network(d.synth_nodes, d.synth_seed, epsilon=g.epsilon)
            ds = synth_generate(d.synth_nodes, d.synth_days, d.synth_seed, graph,
                                noise_std=d.noise_std, resolution_minutes=d.resolution_minutes)
            return ds, graph
        ds = load_series_csv(d.path, d.kind, d.resolution_minutes)
        if g.path is None:
            raise DataLoadError("graph.path is required when data.path is set")
        if g.format == "distances":
            graph = build_adjacency_from_distances(read_distance_csv(g.path), sigma=g.sigma,
                                                   epsilon=g.epsilon, node_ids=ds.node_ids)
        else:
            graph = read_weight_csv(g.path, node_ids=ds.node_ids)
    except (OSError, ValueError) as exc:
        raise DataLoadError(str(exc)) from exc
    if list(graph.node_ids) != list(ds.node_ids):
        raise DataLoadError("graph node ids do not match the series header")
    return ds, graph


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    ds, graph = load_dataset_and_graph(cfg)
    spec = SplitSpec(cfg.split.policy, tuple(cfg.split.parts))
    try:
        tr, va, te = split(ds, spec)
        P, Q = cfg.model.input_steps, cfg.model.output_steps
        windows = (make_windows(tr, P, Q, cfg.train.window_stride), make_windows(va, P, Q),
                   make_windows(te, P, Q))
        scaler = scaler_fit(tr)
    except ValueError as exc:
        raise DataLoadError(str(exc)) from exc
    return PreparedData(ds, graph, scaler, *windows, GraphContext.from_graph(graph))


# ---------------------------------------------------------------------------
# single runs and grids
# ---------------------------------------------------------------------------


def make_model(cfg: ExperimentConfig, n: int, seed: int, slots_per_day: int):
    m = cfg.model
    return build_model(m.backbone, m.spatial, n, m.output_steps, seed, hidden=m.hidden,
                       heads=m.heads, head_dim=m.head_dim, layers=m.layers, gcn_inner=m.gcn_inner,
                       gcn_output_activation=m.gcn_output_activation,
                       attention_slope=m.attention_slope, slots_per_day=slots_per_day)


def train_settings(cfg: ExperimentConfig) -> TrainSettings:
    t = cfg.train
    return TrainSettings(batch_size=t.batch_size, lr=t.lr, patience=t.patience,
                         max_epochs=t.max_epochs, loss=t.loss, clip_norm=t.clip_norm,
                         time_budget_s=t.time_budget_s)


def peak_score_count(model) -> int | None:
    layers = spatial_layers(model)
    if not layers:
        return None
    return max(layer.last_score_count for layer in layers)


@dataclass
class RunResult:
    backbone: str
    spatial: str
    seed: int
    report: MetricsReport
    wall_time_s: float
    parameter_count: int
    peak_score_count: int | None
    log: TrainingLog
    model: object = None

    @property
    def variant(self) -> str:
        return f"{self.backbone}/{self.spatial}"


def run_single(cfg: ExperimentConfig, data: PreparedData, seed: int | None = None) -> RunResult:
    seed = cfg.train.seed if seed is None else seed
    started = time.perf_counter()
    model = make_model(cfg, data.graph.n, seed, data.dataset.slots_per_day)
    tlog = train_model(model, data.train, data.val, data.scaler, data.ctx, train_settings(cfg), seed)
    report = evaluate(model, data.test, data.scaler, data.ctx, cfg.model.horizons,
                      data.dataset.mape_enabled, cfg.train.step_mode)
    return RunResult(cfg.model.backbone, cfg.model.spatial, seed, report,
                     time.perf_counter() - started, model.parameter_count(),
                     peak_score_count(model), tlog, model)


@dataclass
class CellResult:
    backbone: str
    spatial: str
    runs: list[RunResult] = field(default_factory=list)
    error: str | None = None

    @property
    def variant(self) -> str:
        return f"{self.backbone}/{self.spatial}"

    @property
    def ok(self) -> bool:
        return self.error is None

    def metric(self, horizon: int, name: str) -> tuple[float, float] | None:
        """Mean and population std over seeds, or None when the metric is disabled."""
        vals = [getattr(r.report[horizon], name) for r in self.runs]
        if any(v is None for v in vals):
            return None
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std())


@dataclass
class GridResult:
    config_hash: str
    horizons: tuple[int, ...]
    mape_enabled: bool
    seeds: tuple[int, ...]
    cells: list[CellResult]
    baseline: MetricsReport

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if not c.ok]


def _run_cell(args) -> CellResult:
    cfg, backbone, spatial, seeds, data = args
    cell_cfg = cfg.with_model(backbone=backbone, spatial=spatial)
    cell = CellResult(backbone, spatial)
    try:
        validate_config(cell_cfg)
        if data is None:
            data = prepare_data(cell_cfg)
        for seed in seeds:
            res = run_single(cell_cfg, data, seed)
            res.model = None                      # keep results small and picklable
            cell.runs.append(res)
    except Exception as exc:                      # a failing cell is recorded, not raised
        log.warning("cell %s/%s failed: %s", backbone, spatial, exc)
        cell.runs = []
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def run_experiment_grid(cfg: ExperimentConfig, grid=DEFAULT_GRID, jobs: int = 1,
                        n_seeds: int = 1) -> GridResult:
    """Train and evaluate every (backbone, spatial) cell on the same data, splits and seeds."""
    data = prepare_data(cfg)                      # load failures abort before any training
    seeds = tuple(cfg.train.seed + k for k in range(n_seeds))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, [(cfg, b, s, seeds, None) for b, s in grid]))
    else:
        cells = [_run_cell((cfg, b, s, seeds, data)) for b, s in grid]
    baseline = persistence_baseline(data.test, cfg.model.horizons, data.dataset.mape_enabled,
                                    cfg.train.step_mode)
    return GridResult(config_hash(cfg), tuple(cfg.model.horizons), data.dataset.mape_enabled,
                      seeds, cells, baseline)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def _metric_names(mape_enabled: bool) -> tuple[str, ...]:
    return METRICS if mape_enabled else METRICS[:2]


def emit_results_table(gr: GridResult, fmt: str = "text") -> str:
    """Rows are horizon x metric, columns are the variants that completed."""
    cells = [c for c in gr.cells if c.ok]
    names = _metric_names(gr.mape_enabled)
    multi = len(gr.seeds) > 1
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["horizon", "metric"]
        for c in cells:
            header += [c.variant, f"{c.variant} std"] if multi else [c.variant]
        w.writerow(header)
        for h in gr.horizons:
            for name in names:
                row = [str(h), name]
                for c in cells:
                    mean, std = c.metric(h, name)
                    row += [repr(mean), repr(std)] if multi else [repr(mean)]
                w.writerow(row)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown table format {fmt!r}")
    head = ["horizon", "metric"] + [c.variant for c in cells] + ["persistence"]
    rows = []
    for h in gr.horizons:
        for name in names:
            row = [f"{h}-step", name.upper()]
            for c in cells:
                mean, std = c.metric(h, name)
                row.append(f"{mean:.4f} ± {std:.4f}" if multi else f"{mean:.4f}")
            row.append(f"{getattr(gr.baseline[h], name):.4f}")
            rows.append(row)
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    lines = ["  ".join(v.ljust(wd) for v, wd in zip(r, widths)).rstrip() for r in [head] + rows]
    for c in gr.failures:
        lines.append(f"failed {c.variant}: {c.error}")
    return "\n".join(lines) + "\n"


def parse_results_csv(text: str) -> dict[tuple[int, str, str], float]:
    """Inverse of the CSV table: ``{(horizon, metric, column): value}``."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    out = {}
    for row in reader:
        h, name = int(row[0]), row[1]
        for col, val in zip(header[2:], row[2:]):
            out[(h, name, col)] = float(val)
    return out


@dataclass(frozen=True)
class AttentionCost:
    n: int
    full: int
    grouped: int
    gat: int
    measured: dict[str, int] | None = None


def attention_score_report(n: int, edge_count: int, model=None) -> AttentionCost:
    """Attention logits per head per spatial layer for full, grouped and graph attention.

    When ``model`` has already run a forward pass, the instrumented counters of
    its spatial layers are included under ``measured``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    grouped = int(math.floor(2.0 ** (-1.0 / 3.0) * n ** (4.0 / 3.0) + 0.5))
    measured = None
    if model is not None:
        measured = {f"{type(layer).__name__}[{i}]": layer.last_score_count
                    for i, layer in enumerate(spatial_layers(model))}
    return AttentionCost(n, n * n, grouped, edge_count, measured)


def format_attention_cost(cost: AttentionCost) -> str:
    lines = [f"nodes {cost.n}",
             f"full attention scores     {cost.full}",
             f"grouped attention scores  {cost.grouped}",
             f"graph attention scores    {cost.gat}"]
    for name, count in (cost.measured or {}).items():
        lines.append(f"measured {name} {count}")
    return "\n".join(lines) + "\n"


def export_forecast_series(model, windows: WindowSet, scaler: Scaler, ctx: GraphContext,
                           node_ids, horizon: int, nodes=None) -> str:
    """Wide CSV: one row per window with the target time at ``horizon`` and actual/predicted per node."""
    if not 1 <= horizon <= windows.Q:
        raise ValueError(f"horizon {horizon} outside 1..{windows.Q}")
    node_ids = list(node_ids)
    cols = list(range(len(node_ids))) if nodes is None else [node_ids.index(v) for v in nodes]
    pred = predict(model, windows, scaler, ctx)[:, horizon - 1]
    actual = windows.y[:, horizon - 1]
    stamps = windows.y_time[:, horizon - 1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["timestamp"]
    for c in cols:
        header += [f"{node_ids[c]} actual", f"{node_ids[c]} predicted"]
    w.writerow(header)
    for i in range(len(windows)):
        row = [str(stamps[i])]
        for c in cols:
            row += [repr(float(actual[i, c])), repr(float(pred[i, c]))]
        w.writerow(row)
    return buf.getvalue()


def run_summary(cfg: ExperimentConfig, result: RunResult) -> str:
    """Key-value run summary; keys are documented in the README."""
    lines = [f"config_hash = {config_hash(cfg)}",
             f"variant = {result.variant}",
             f"seed = {result.seed}",
             f"parameter_count = {result.parameter_count}",
             f"wall_time_s = {result.wall_time_s!r}",
             f"initial_train_loss = {result.log.initial_train_loss!r}",
             f"train_loss = {', '.join(repr(e.train_loss) for e in result.log.epochs)}",
             f"val_mae = {', '.join(repr(e.val_mae) for e in result.log.epochs)}",
             f"best_epoch = {result.log.best_epoch}",
             f"stopped_early = {str(result.log.stopped_early).lower()}"]
    for h, m in result.report.horizons.items():
        lines.append(f"test_mae_{h} = {m.mae!r}")
        lines.append(f"test_rmse_{h} = {m.rmse!r}")
        if m.mape is not None:
            lines.append(f"test_mape_{h} = {m.mape!r}")
            lines.append(f"mape_excluded_{h} = {m.mape_excluded}")
    return "\n".join(lines) + "\n"


def results_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.output.dir) / config_hash(cfg)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.ini").write_text(serialize_config(cfg), encoding="utf-8")
    return path
