"""
Expectation-maximization over the factor graph.

E-step: belief propagation per sample estimates the entries nobody metered.
M-step: every joint factor's NLPCA decoder is refitted on the completed
states of its two variables, measurements where they exist and E-step
estimates elsewhere. Iteration 0 fills the gaps with the observed means.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from analysis.metrics import rmse
from grid.datagen import GridDataset
from grid.model_builder import ModelBlueprint, instantiate, sample_observations, state_columns, with_means
from inference import nlpca
from inference.factor_graph import run_inference
from utils.config import InferenceConfig, NlpcaConfig
from utils.errors import DataError
from utils.logger import get_logger
from utils.telemetry import get_tracer

logger = get_logger("Trainer")
tracer = get_tracer("trainer")


def inversion_options(config: NlpcaConfig) -> dict:
    return {"steps": config.inversion_steps, "lr": config.inversion_lr, "method": config.inversion_method}


@dataclass
class TrainingReport:
    seed: int
    em_iters: int
    iterations: list = field(default_factory=list)
    best_iteration: int = 0
    timing: dict | None = None

    @property
    def best_rmse(self) -> float:
        return self.iterations[self.best_iteration]["rmse"]

    def accepted_rmse(self) -> list[float]:
        return [it["rmse"] for it in self.iterations if it["accepted"]]

    def to_dict(self, include_timing: bool = True) -> dict:
        doc = {"seed": self.seed, "em_iters": self.em_iters, "iterations": self.iterations,
               "best_iteration": self.best_iteration, "best_rmse": self.best_rmse}
        if include_timing and self.timing is not None:
            doc["timing"] = self.timing
        return doc


@dataclass
class EmResult:
    blueprint: ModelBlueprint
    models: dict
    report: TrainingReport


@dataclass
class ImputationResult:
    estimates: np.ndarray
    std: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray


@dataclass
class EvaluationResult:
    rmse: float
    per_variable: dict
    imputation: ImputationResult
    evaluated: np.ndarray


def split_rows(dataset: GridDataset, train_end: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of hours < ``train_end`` and of the rest."""
    train_rows = np.flatnonzero(dataset.hours < train_end)
    valid_rows = np.flatnonzero(dataset.hours >= train_end)
    if train_rows.size == 0 or valid_rows.size == 0:
        raise DataError(f"Split at hour {train_end} leaves an empty training or validation period")
    return train_rows, valid_rows


def split_hours(dataset: GridDataset, train_end: int) -> tuple[GridDataset, GridDataset]:
    """Training rows are hours < ``train_end``, validation rows the rest."""
    train_rows, valid_rows = split_rows(dataset, train_end)
    return dataset.select_hours(train_rows), dataset.select_hours(valid_rows)


def column_means(blueprint: ModelBlueprint, dataset: GridDataset) -> dict[str, np.ndarray]:
    """Per-variable mean of the observed entries; never-observed components fall back to 0."""
    means = {}
    for vid, cols in state_columns(blueprint, dataset).items():
        observed = dataset.observed[:, cols]
        counts = observed.sum(axis=0)
        sums = np.where(observed, dataset.values[:, cols], 0.0).sum(axis=0)
        means[vid] = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return means


def _map(fn, items, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def impute(models: dict, blueprint: ModelBlueprint, dataset: GridDataset, mask: np.ndarray | None = None,
           inference: InferenceConfig | None = None, nlpca_config: NlpcaConfig | None = None,
           threads: int = 1) -> ImputationResult:
    """
    Run inference for every hour with ``mask`` (default: the dataset's own
    availability) and gather estimates and posterior standard deviations in
    dataset column order.
    """
    inference = inference or InferenceConfig()
    nlpca_config = nlpca_config or NlpcaConfig()
    mask = dataset.observed if mask is None else np.asarray(mask, dtype=bool)
    graph = instantiate(blueprint, models)
    cols = state_columns(blueprint, dataset)
    inversion = inversion_options(nlpca_config)

    def solve(row: int):
        values, available = sample_observations(blueprint, dataset, row, mask)
        return run_inference(graph, values, available, max_outer=inference.max_outer, tol=inference.tol,
                             damping=inference.damping, inversion=inversion)

    results = _map(solve, range(dataset.n_hours), threads)
    estimates = np.full(dataset.values.shape, np.nan)
    std = np.full(dataset.values.shape, np.nan)
    for row, result in enumerate(results):
        for vid, idx in cols.items():
            estimates[row, idx] = result.estimates[vid]
            std[row, idx] = np.sqrt(np.clip(np.diag(result.covariances[vid]), 0.0, None))
    converged = np.array([r.converged for r in results], dtype=bool)
    if not converged.all():
        logger.warning(f"{int((~converged).sum())} of {len(results)} samples did not converge")
    return ImputationResult(estimates=estimates, std=std, converged=converged,
                            iterations=np.array([r.iterations for r in results], dtype=int))


def evaluate(models: dict, blueprint: ModelBlueprint, dataset: GridDataset, mask: np.ndarray,
             inference: InferenceConfig | None = None, nlpca_config: NlpcaConfig | None = None,
             threads: int = 1) -> EvaluationResult:
    """
    RMSE of the estimates against the reference on the entries hidden by ``mask``.

    With nothing hidden every entry is scored, which measures the filtering error.
    """
    mask = np.asarray(mask, dtype=bool)
    imputation = impute(models, blueprint, dataset, mask, inference, nlpca_config, threads)
    evaluated = dataset.observed & ~mask
    if not evaluated.any():
        evaluated = np.ones_like(mask)
    reference = dataset.reference()
    per_variable = {}
    for vid, idx in state_columns(blueprint, dataset).items():
        sub = evaluated[:, idx]
        per_variable[vid] = {"count": int(sub.sum()),
                             "rmse": rmse(imputation.estimates[:, idx], reference[:, idx], sub) if sub.any() else None}
    total = rmse(imputation.estimates, reference, evaluated)
    return EvaluationResult(rmse=total, per_variable=per_variable, imputation=imputation, evaluated=evaluated)


def _m_step(blueprint: ModelBlueprint, states: dict, masks: dict, previous: dict, codes: dict,
            config: NlpcaConfig, seed: int, threads: int) -> tuple[dict, dict, float]:
    def fit(item):
        k, joint = item
        data = np.hstack([states[v] for v in joint.variables])
        mask = np.hstack([masks[v] for v in joint.variables])
        return nlpca.train(data, mask, epochs=config.epochs, lr=config.lr, seed=seed + k,
                           init=previous.get(joint.id), codes=codes.get(joint.id),
                           batch_size=config.batch_size, weight_decay=config.weight_decay, tol=config.tol,
                           patience=config.patience)

    results = _map(fit, list(enumerate(blueprint.joints)), threads)
    models = {j.id: r.net for j, r in zip(blueprint.joints, results)}
    new_codes = {j.id: r.codes for j, r in zip(blueprint.joints, results)}
    weighted = [(r.rmse ** 2, int(np.sum(np.hstack([masks[v] for v in j.variables]))))
                for j, r in zip(blueprint.joints, results)]
    total = sum(c for _, c in weighted)
    aggregate = float(np.sqrt(sum(s * c for s, c in weighted) / total)) if total else 0.0
    return models, new_codes, aggregate


def em_train(blueprint: ModelBlueprint, dataset: GridDataset, em_iters: int = 5,
             nlpca_config: NlpcaConfig | None = None, seed: int = 0, inference: InferenceConfig | None = None,
             rollback: bool = True, threads: int = 1) -> EmResult:
    """
    Alternate per-sample inference and per-factor NLPCA fits.

    An M-step whose training RMSE exceeds the best so far is rolled back: its
    models are discarded and the next E-step reuses the best ones. The models
    returned are those of the best iteration.

    Raises
    ------
    ObservabilityError
        If inference fails on any sample.
    TrainingError
        If an NLPCA fit diverges.
    """
    if em_iters < 1:
        raise DataError(f"em_iters must be ≥ 1, got {em_iters}")
    nlpca_config = nlpca_config or NlpcaConfig()
    inference = inference or InferenceConfig()
    cols = state_columns(blueprint, dataset)
    blueprint = with_means(blueprint, column_means(blueprint, dataset))
    means = {v.id: np.asarray(v.mean) for v in blueprint.variables}
    report = TrainingReport(seed=int(seed), em_iters=int(em_iters))
    timing = {"iterations": []}
    started = time.perf_counter()

    with tracer.start_as_current_span("em_train"):
        observed = {vid: dataset.observed[:, idx] for vid, idx in cols.items()}
        states = {vid: np.where(observed[vid], dataset.values[:, idx], means[vid]) for vid, idx in cols.items()}
        tick = time.perf_counter()
        best_models, best_codes, best_rmse = _m_step(blueprint, states, observed, {}, {}, nlpca_config, seed,
                                                     threads)
        report.iterations.append({"iteration": 0, "rmse": best_rmse, "accepted": True, "filter_rmse": None,
                                  "converged_fraction": None})
        timing["iterations"].append(time.perf_counter() - tick)
        logger.info(f"EM iteration 0 (bootstrap): training RMSE={best_rmse:.6g}")

        for iteration in range(1, em_iters + 1):
            with tracer.start_as_current_span("em_iteration"):
                tick = time.perf_counter()
                imputation = impute(best_models, blueprint, dataset, None, inference, nlpca_config, threads)
                states = {vid: np.where(observed[vid], dataset.values[:, idx], imputation.estimates[:, idx])
                          for vid, idx in cols.items()}
                full = {vid: np.ones_like(m) for vid, m in observed.items()}
                residual = np.where(dataset.observed, imputation.estimates - dataset.values, 0.0)
                filter_rmse = float(np.sqrt(np.sum(residual ** 2) / max(dataset.observed.sum(), 1)))
                models, codes, train_rmse = _m_step(blueprint, states, full, best_models, best_codes, nlpca_config,
                                              seed, threads)
                accepted = not rollback or train_rmse <= best_rmse
                if accepted:
                    best_models, best_codes, best_rmse = models, codes, train_rmse
                    report.best_iteration = iteration
                report.iterations.append({"iteration": iteration, "rmse": train_rmse, "accepted": accepted,
                                          "filter_rmse": filter_rmse,
                                          "converged_fraction": float(imputation.converged.mean())})
                timing["iterations"].append(time.perf_counter() - tick)
                logger.info(f"EM iteration {iteration}: training RMSE={train_rmse:.6g} "
                            f"({'accepted' if accepted else 'rolled back'}), filter RMSE={filter_rmse:.6g}")

    timing["total"] = time.perf_counter() - started
    report.timing = timing
    return EmResult(blueprint=blueprint, models=best_models, report=report)
