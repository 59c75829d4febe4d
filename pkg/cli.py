#!/usr/bin/env python3
"""
Command-line entry point: data generation, partitioning, model building,
EM training, imputation, anomaly detection and scaling benchmarks.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical failure.
"""
from dotenv import load_dotenv
load_dotenv()

# Telemetry is initialized ONCE at the entry point.
# Library modules only emit spans.
from observability import init_telemetry

import json
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from analysis.benchmark import missing_data_sweep, scaling_benchmark
from analysis.detection import calibrate, detect_anomalies, held_out_estimates
from analysis.plots import plot_rmse_vs_missing, plot_scaling
from grid.datagen import KINDS, generate, inject_anomaly, mask_missing
from grid.datagen import mask_kind as hide_kind
from grid.model_builder import blueprint_from_dataset, blueprint_param_count, instantiate
from grid.partitioner import partition as partition_graph
from inference.factor_graph import validate
from inference.trainer import em_train, evaluate, split_hours, split_rows
from tools.dataset_tool import DatasetTool
from tools.graph_tool import MODEL_FORMAT, GraphTool
from tools.report_tool import ReportTool
from utils.config import SCHEMA_VERSION, BenchmarkConfig, DetectionConfig, EmConfig, GridConfig, \
    NlpcaConfig, __version__, load_config
from utils.errors import GridModelError, UsageError
from utils.logger import get_logger, set_level
from utils.telemetry import get_tracer

logger = get_logger("CLI")
tracer = get_tracer("cli")

_NLPCA, _EM = NlpcaConfig(), EmConfig()
_DETECTION, _BENCH = DetectionConfig(), BenchmarkConfig()


class Run:
    """Options shared by every subcommand."""

    def __init__(self, config: GridConfig, no_timing: bool):
        self.config = config
        self.no_timing = no_timing

    def emit(self, document: dict) -> None:
        click.echo(ReportTool.to_json(document, include_timing=not self.no_timing), nl=False)


def _version(ctx, _param, value):
    if not value or ctx.resilient_parsing:
        return
    click.echo(f"gridbp {__version__} (graph schema {SCHEMA_VERSION}, model format {MODEL_FORMAT})")
    ctx.exit(0)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON configuration file (sections nlpca, inference, em, detection, benchmark).")
@click.option("--threads", type=int, default=None, help="Worker threads for per-sample/per-factor work [default: 1].")
@click.option("--verbose", is_flag=True, help="Debug logging on standard error.")
@click.option("--no-timing", is_flag=True, help="Omit timing fields so reports are byte-identical across runs.")
@click.option("--version", is_flag=True, expose_value=False, is_eager=True, callback=_version,
              help="Print build and schema versions.")
@click.pass_context
def cli(ctx, config_path, threads, verbose, no_timing):
    """Graph-NLPCA state estimation for partially observed power grids."""
    if verbose:
        set_level("DEBUG")
    config = load_config(config_path)
    if threads is not None:
        if threads < 1:
            raise UsageError("--threads must be ≥ 1")
        config = config.override("threads", threads=threads)
    ctx.obj = Run(config, no_timing)


@cli.command("gen-data")
@click.option("--buses", type=int, required=True, help="Number of buses (≥ 2).")
@click.option("--hours", type=int, required=True, help="Number of hourly samples (≥ 24).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output dataset directory.")
@click.option("--anomaly-bus", type=int, default=None, help="Bus whose solar generation is scaled unmetered.")
@click.option("--anomaly-factor", type=float, default=2.0, show_default=True)
@click.option("--anomaly-start", type=int, default=0, show_default=True, help="First hour the anomaly affects.")
@click.pass_obj
def gen_data(run: Run, buses, hours, seed, out, anomaly_bus, anomaly_factor, anomaly_start):
    """Generate a seeded synthetic dataset (measurements, truth, topology)."""
    with tracer.start_as_current_span("gen_data"):
        dataset = generate(buses, hours, seed)
        if anomaly_bus is not None:
            dataset = inject_anomaly(dataset, anomaly_bus, "solar", anomaly_factor, anomaly_start)
        DatasetTool.save_dataset(dataset, out)
    run.emit({"dataset": str(out), "buses": buses, "hours": hours, "series": len(dataset.columns),
              "seed": seed, "anomaly": dataset.metadata.get("anomaly")})


@cli.command("partition")
@click.option("--topology", type=click.Path(dir_okay=False), required=True, help="Topology CSV (from,to).")
@click.option("--depth", type=int, required=True, help="Bisection rounds.")
@click.option("--max-size", type=int, default=None, help="Keep splitting sections larger than this.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Partition CSV (node,section).")
@click.pass_obj
def partition_cmd(run: Run, topology, depth, max_size, out):
    """Spectral partitioning of the bus graph."""
    with tracer.start_as_current_span("partition"):
        graph = DatasetTool.load_topology(topology)
        result = partition_graph(graph, depth, max_size=max_size)
        path, adjacency = DatasetTool.save_partition(result, out)
    sizes = [len(s) for s in result.sections]
    run.emit({"partition": str(path), "adjacency": str(adjacency), "sections": result.n_sections,
              "min_size": min(sizes), "max_size": max(sizes)})


@cli.command("build")
@click.option("--partition", "partition_path", type=click.Path(dir_okay=False), required=True)
@click.option("--dataset", type=click.Path(file_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Graph document to write.")
@click.pass_obj
def build(run: Run, partition_path, dataset, out):
    """Build the factor-graph blueprint and report its validation."""
    with tracer.start_as_current_span("build"):
        data = DatasetTool.load_dataset(dataset)
        parts = DatasetTool.load_partition(partition_path, data.topology)
        blueprint = blueprint_from_dataset(parts, data)
        report = validate(instantiate(blueprint, allow_untrained=True))
        GraphTool.save_graph(blueprint, out)
    run.emit({"graph": str(out), "variables": len(blueprint.variables),
              "conditionals": len(blueprint.conditionals), "joints": len(blueprint.joints),
              "parameters": blueprint_param_count(blueprint), "valid": report.valid,
              "violations": report.violations})


@cli.command("train")
@click.option("--model", type=click.Path(dir_okay=False), required=True, help="Graph document (updated in place).")
@click.option("--dataset", type=click.Path(file_okay=False), required=True)
@click.option("--em-iters", type=int, default=None, help=f"EM iterations [default: {_EM.em_iters}].")
@click.option("--epochs", type=int, default=None, help=f"NLPCA epochs per M-step [default: {_NLPCA.epochs}].")
@click.option("--lr", type=float, default=None, help=f"NLPCA learning rate [default: {_NLPCA.lr}].")
@click.option("--train-end", type=int, default=None, help="Train on hours before this index only.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--report", type=click.Path(dir_okay=False), default=None,
              help="Training report path [default: <model>.train.json].")
@click.pass_obj
def train(run: Run, model, dataset, em_iters, epochs, lr, train_end, seed, report):
    """EM training of every joint factor."""
    config = run.config.override("em", em_iters=em_iters).override("nlpca", epochs=epochs, lr=lr)
    with tracer.start_as_current_span("train"):
        blueprint, _ = GraphTool.load_graph(model)
        data = DatasetTool.load_dataset(dataset)
        if train_end is not None:
            data, _ = split_hours(data, train_end)
        result = em_train(blueprint, data, config.em.em_iters, config.nlpca, seed, config.inference,
                          config.em.rollback, config.threads)
        GraphTool.save_trained(result.blueprint, result.models, model)
        report_path = Path(report) if report else Path(model).with_suffix(".train.json")
        document = result.report.to_dict(include_timing=not run.no_timing)
        ReportTool.write_json(document, report_path, include_timing=not run.no_timing)
    run.emit({"graph": str(model), "report": str(report_path), "best_iteration": document["best_iteration"],
              "best_rmse": document["best_rmse"]})


def _estimates_table(data, imputation, mask) -> pd.DataFrame:
    n_hours, n_cols = imputation.estimates.shape
    return pd.DataFrame({
        "hour": np.repeat(data.hours, n_cols),
        "bus": np.tile([b for b, _ in data.columns], n_hours),
        "kind": np.tile([k for _, k in data.columns], n_hours),
        "estimate": imputation.estimates.ravel(),
        "std": imputation.std.ravel(),
        "observed": np.asarray(mask, dtype=int).ravel(),
    })


@cli.command("impute")
@click.option("--model", type=click.Path(dir_okay=False), required=True)
@click.option("--dataset", type=click.Path(file_okay=False), required=True)
@click.option("--missing-ratio", type=float, default=0.0, show_default=True)
@click.option("--mask-kind", type=click.Choice(KINDS), default=None, help="Hide every series of this kind.")
@click.option("--seed", type=int, default=0, show_default=True, help="Mask seed.")
@click.option("--out", type=click.Path(dir_okay=False), default="estimates.csv", show_default=True)
@click.option("--sweep", default=None, help="Comma-separated ratios for a missing-data sweep, e.g. 0.1,0.3,0.5.")
@click.option("--sweep-seeds", type=int, default=20, show_default=True, help="Mask seeds per sweep ratio.")
@click.option("--plot", type=click.Path(dir_okay=False), default=None, help="PNG of RMSE vs missing ratio.")
@click.option("--baseline", is_flag=True, help="Also train a centralized NLPCA model per sweep mask (slow).")
@click.pass_obj
def impute_cmd(run: Run, model, dataset, missing_ratio, mask_kind, seed, out, sweep, sweep_seeds, plot, baseline):
    """Estimate every series with part of the data hidden, and score the hidden entries."""
    config = run.config
    with tracer.start_as_current_span("impute"):
        blueprint, models = GraphTool.load_trained(model)
        data = DatasetTool.load_dataset(dataset)
        masked = mask_missing(data, missing_ratio, seed)
        if mask_kind is not None:
            masked = hide_kind(masked, mask_kind)
        result = evaluate(models, blueprint, data, masked.observed, config.inference, config.nlpca, config.threads)
        ReportTool.write_table(_estimates_table(data, result.imputation, masked.observed), out)
        document = {"estimates": str(out), "missing_ratio": missing_ratio, "mask_kind": mask_kind, "seed": seed,
                    "rmse": result.rmse, "evaluated": int(result.evaluated.sum()),
                    "converged": int(result.imputation.converged.sum()), "samples": data.n_hours,
                    "per_variable": result.per_variable}
        if sweep:
            ratios = [_ratio(r) for r in sweep.split(",") if r.strip()]
            table = missing_data_sweep(models, blueprint, data, ratios, range(sweep_seeds), config.inference,
                                       config.nlpca, config.threads, config.nlpca if baseline else None)
            sweep_path = Path(out).with_suffix(".sweep.csv")
            ReportTool.write_table(table, sweep_path)
            means = table.groupby("ratio")[["rmse", "baseline_rmse"]].mean()
            document["sweep"] = {str(r): float(means.loc[r, "rmse"]) for r in ratios}
            if baseline:
                document["sweep_baseline"] = {str(r): float(means.loc[r, "baseline_rmse"]) for r in ratios}
            if plot:
                plot_rmse_vs_missing(table, plot)
    run.emit(document)


def _ratio(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"Invalid ratio '{text}' in --sweep")


@cli.command("detect")
@click.option("--model", type=click.Path(dir_okay=False), required=True)
@click.option("--dataset", type=click.Path(file_okay=False), required=True)
@click.option("--threshold", type=float, default=None, help=f"Flag probability [default: {_DETECTION.threshold}].")
@click.option("--window", type=int, default=None, help=f"Trailing hours tested, 0 = all [default: {_DETECTION.window}].")
@click.option("--train-end", type=int, default=None,
              help="Calibrate residuals on hours before this one and test the hours from it on.")
@click.option("--out", type=click.Path(dir_okay=False), default="detection.csv", show_default=True)
@click.pass_obj
def detect(run: Run, model, dataset, threshold, window, train_end, out):
    """Z-test every sensor's held-out residuals and list the flagged ones."""
    config = run.config.override("detection", threshold=threshold, window=window)
    if not 0.5 < config.detection.threshold < 1.0:
        raise UsageError("--threshold must lie in (0.5, 1)")
    with tracer.start_as_current_span("detect"):
        blueprint, models = GraphTool.load_trained(model)
        data = DatasetTool.load_dataset(dataset)
        held = held_out_estimates(models, blueprint, data, config.inference, config.nlpca, config.threads)
        calibration = None
        tested, estimates, std = data, held.estimates, held.std
        if train_end is not None:
            before, after = split_rows(data, train_end)
            calibration = calibrate(held.estimates[before], data.select_hours(before),
                                    config.detection.block_hours)
            tested, estimates, std = data.select_hours(after), held.estimates[after], held.std[after]
        table = detect_anomalies(estimates, tested, std, config.detection.threshold, config.detection.window,
                                 calibration)
        ReportTool.write_table(table, out)
    flagged = table[table["flagged"]]
    run.emit({"table": str(out), "threshold": config.detection.threshold, "sensors": len(table),
              "calibrated": calibration is not None,
              "flagged": [{"sensor": r.sensor, "probability": r.probability, "z": r.z}
                          for r in flagged.itertuples()]})


@cli.command("bench")
@click.option("--sizes", default="10,50,100", show_default=True, help="Comma-separated section counts.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--buses-per-section", type=int, default=None,
              help=f"Buses per section [default: {_BENCH.buses_per_section}].")
@click.option("--with-rmse", is_flag=True, help="Also train and score imputation at 10% missing (slow).")
@click.option("--out", type=click.Path(dir_okay=False), default="scaling.csv", show_default=True)
@click.option("--plot", type=click.Path(dir_okay=False), default=None, help="PNG of the scaling curves.")
@click.pass_obj
def bench(run: Run, sizes, seed, buses_per_section, with_rmse, out, plot):
    """Parameter counts and BP iteration time against grid size."""
    try:
        counts = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"Invalid --sizes '{sizes}'")
    if not counts or min(counts) < 1:
        raise UsageError("--sizes needs positive section counts")
    config = run.config.override("benchmark", buses_per_section=buses_per_section)
    with tracer.start_as_current_span("bench"):
        table = scaling_benchmark(counts, config, seed, with_rmse)
        ReportTool.write_table(table, out, include_timing=not run.no_timing)
        if plot:
            plot_scaling(table, plot)
    rows = table.drop(columns=["iteration_time"]) if run.no_timing else table
    run.emit({"table": str(out), "rows": json.loads(rows.to_json(orient="records"))})


def main(argv=None) -> int:
    init_telemetry("gridbp")
    try:
        code = cli.main(args=argv, prog_name="gridbp", standalone_mode=False)
        return code if isinstance(code, int) else 0
    except click.exceptions.Abort:
        click.echo("error: aborted", err=True)
        return 1
    except click.UsageError as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return 1
    except click.ClickException as e:
        click.echo(f"error: {e.format_message()}", err=True)
        return 1
    except GridModelError as e:
        logger.debug(f"{type(e).__name__}: {e}")
        click.echo(f"error: {e}", err=True)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
