"""Centralized comparator: one NLPCA model over every series of the grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from analysis.metrics import rmse
from grid.datagen import GridDataset
from inference import nlpca
from utils.config import NlpcaConfig
from utils.logger import get_logger

logger = get_logger("Baseline")


@dataclass(frozen=True)
class BaselineResult:
    rmse: float
    param_count: int
    dim: int
    estimates: np.ndarray


def centralized_baseline(dataset: GridDataset, mask: np.ndarray, config: NlpcaConfig | None = None,
                         seed: int = 0, training: GridDataset | None = None) -> BaselineResult:
    """
    Train a single decoder (q = ⌊d/2⌋, m = d) and score its reconstruction of
    the entries of ``dataset`` hidden by ``mask``.

    The decoder is fitted on ``training`` when given, otherwise on the entries
    of ``dataset`` that ``mask`` leaves available.
    """
    config = config or NlpcaConfig()
    available = dataset.observed & np.asarray(mask, dtype=bool)
    d = len(dataset.columns)
    if training is None:
        fit_values, fit_mask = dataset.values, available
    else:
        if training.columns != dataset.columns:
            raise ValueError("Training and scored datasets must have the same series")
        fit_values, fit_mask = training.values, training.observed
    result = nlpca.train(fit_values, fit_mask, epochs=config.epochs, lr=config.lr, seed=seed,
                         batch_size=config.batch_size, weight_decay=config.weight_decay, tol=config.tol,
                         patience=config.patience)
    net = result.net
    estimates = np.empty_like(dataset.values)
    for row in range(dataset.n_hours):
        code = result.codes[row] if training is None and available[row].all() else None
        u = nlpca.reconstruct(net, net.to_model(np.where(available[row], dataset.values[row], net.offset)),
                              available[row], z0=code, steps=config.inversion_steps, lr=config.inversion_lr,
                              method=config.inversion_method)
        estimates[row] = net.from_model(u)
    evaluated = dataset.observed & ~available
    if not evaluated.any():
        evaluated = np.ones_like(available)
    score = rmse(estimates, dataset.reference(), evaluated)
    logger.info(f"Centralized NLPCA d={d}: {nlpca.param_count(d)} parameters, RMSE={score:.6g}")
    return BaselineResult(rmse=score, param_count=nlpca.param_count(d), dim=d, estimates=estimates)
