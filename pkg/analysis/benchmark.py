"""
Scaling and missing-data experiments.

BP timings use a linear-Gaussian stand-in with the blueprint's structure so
that the per-iteration cost is measured without training any decoder.
"""
from __future__ import annotations

import time
from typing import Sequence

import numpy as np
import pandas as pd

from analysis.baseline import centralized_baseline
from grid.datagen import generate, mask_missing
from grid.model_builder import ModelBlueprint, blueprint_from_dataset, blueprint_param_count
from grid.partitioner import partition
from inference.factor_graph import (ConditionalFactor, FactorGraph, VariableNode, initial_point, linearize_all,
                                    sweep, update_estimates)
from inference.gaussian_core import LinearMap
from inference.nlpca import param_count
from inference.trainer import em_train, evaluate, split_hours
from utils.config import GridConfig, InferenceConfig, NlpcaConfig
from utils.logger import get_logger
from utils.seeding import substream

logger = get_logger("Benchmark")


def linear_surrogate(blueprint: ModelBlueprint, seed: int = 0) -> FactorGraph:
    """Blueprint-shaped graph whose joint factors are random linear pairwise factors."""
    rng = substream(seed, "bench", len(blueprint.variables))
    graph = FactorGraph()
    for v in blueprint.variables:
        graph.add_variable(VariableNode(v.id, v.dim, v.labels))
    for c in blueprint.conditionals:
        graph.add_factor(ConditionalFactor(c.id, [(c.variable, [c.component])], [c.sigma ** 2],
                                           observation=[rng.normal()]))
    for j in blueprint.joints:
        a, b = (blueprint.variable(v) for v in j.variables)
        rows = max(1, j.dim // 2)
        graph.add_factor(ConditionalFactor(j.id, [(a.id, range(a.dim)), (b.id, range(b.dim))], np.ones(rows),
                                           observation=rng.normal(size=rows),
                                           mapping=LinearMap(rng.normal(size=(rows, j.dim)))))
    return graph


def linear_chain(n: int, dim: int, seed: int = 0) -> FactorGraph:
    """Chain of n variables of fixed dim with full-rank unary and random pairwise linear factors."""
    rng = substream(seed, "bench", n, dim)
    graph = FactorGraph()
    for i in range(n):
        graph.add_variable(VariableNode(f"x{i}", dim))
        graph.add_factor(ConditionalFactor(f"u{i}", [(f"x{i}", range(dim))], np.ones(dim),
                                           observation=rng.normal(size=dim)))
        if i:
            graph.add_factor(ConditionalFactor(f"p{i}", [(f"x{i - 1}", range(dim)), (f"x{i}", range(dim))],
                                               np.ones(dim), observation=rng.normal(size=dim),
                                               mapping=LinearMap(rng.normal(size=(dim, 2 * dim)))))
    return graph


def time_bp_iteration(graph: FactorGraph, repeats: int = 5) -> float:
    """Fastest wall time of one relinearize + sweep + update pass."""
    bound = graph.copy_with_observations()
    points = initial_point(bound)
    best = float("inf")
    for _ in range(max(1, repeats)):
        tick = time.perf_counter()
        messages = sweep(bound, linearize_all(bound, points))
        update_estimates(bound, messages)
        best = min(best, time.perf_counter() - tick)
    return best


def missing_data_sweep(models: dict, blueprint: ModelBlueprint, dataset, ratios: Sequence[float],
                       seeds: Sequence[int], inference: InferenceConfig | None = None,
                       nlpca_config: NlpcaConfig | None = None, threads: int = 1,
                       baseline: NlpcaConfig | None = None) -> pd.DataFrame:
    """
    Imputation RMSE for every (ratio, mask seed) pair.

    With ``baseline`` a centralized decoder is trained on each masked copy and
    its RMSE reported alongside; otherwise ``baseline_rmse`` is NaN.
    """
    records = []
    for ratio in ratios:
        for seed in seeds:
            mask = mask_missing(dataset, ratio, seed).observed
            result = evaluate(models, blueprint, dataset, mask, inference, nlpca_config, threads)
            record = {"ratio": float(ratio), "seed": int(seed), "rmse": result.rmse, "baseline_rmse": float("nan")}
            if baseline is not None:
                record["baseline_rmse"] = centralized_baseline(dataset, mask, baseline, int(seed)).rmse
            records.append(record)
        logger.info(f"ratio {ratio}: mean RMSE "
                    f"{np.mean([r['rmse'] for r in records if r['ratio'] == float(ratio)]):.6g}")
    return pd.DataFrame.from_records(records, columns=["ratio", "seed", "rmse", "baseline_rmse"])


def scaling_benchmark(sizes: Sequence[int], config: GridConfig | None = None, seed: int = 0,
                      with_rmse: bool = False) -> pd.DataFrame:
    """
    One row per requested section count: the sections the partition actually
    produced, state dimension, graph-model versus centralized parameter counts,
    per-iteration BP time and (optionally) the imputation RMSE at 10% missing
    data for the EM-trained graph model and the centralized baseline.
    """
    config = config or GridConfig()
    bench = config.benchmark
    records = []
    for requested in sizes:
        dataset = generate(requested * bench.buses_per_section, bench.hours, seed)
        parts = partition(dataset.topology, depth=0, max_size=bench.buses_per_section)
        blueprint = blueprint_from_dataset(parts, dataset)
        variables = sum(v.dim for v in blueprint.variables)
        record = {
            "sections": parts.n_sections,
            "requested_sections": int(requested),
            "variables": int(variables),
            "graph_params": blueprint_param_count(blueprint),
            "centralized_params": param_count(variables),
            "iteration_time": time_bp_iteration(linear_surrogate(blueprint, seed), bench.repeats),
            "rmse_10": float("nan"),
            "baseline_rmse_10": float("nan"),
        }
        if with_rmse:
            train, valid = split_hours(dataset, int(dataset.n_hours * 0.75))
            trained = em_train(blueprint, train, config.em.em_iters, config.nlpca, seed, config.inference,
                               config.em.rollback, config.threads)
            mask = mask_missing(valid, 0.1, seed).observed
            record["rmse_10"] = evaluate(trained.models, trained.blueprint, valid, mask, config.inference,
                                         config.nlpca, config.threads).rmse
            record["baseline_rmse_10"] = centralized_baseline(valid, mask, config.nlpca, seed, training=train).rmse
        logger.info(f"{parts.n_sections} sections ({requested} requested): {variables} variables, graph "
                    f"{record['graph_params']} vs centralized {record['centralized_params']} parameters")
        records.append(record)
    return pd.DataFrame.from_records(records)
