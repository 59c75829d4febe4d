"""
Residual Z-tests for sensor anomalies.

Each series is scored on what the rest of the grid predicts for it: every
quantity kind is hidden in turn and re-estimated, so a meter that stopped
tracking the physics disagrees with its own prediction instead of pulling the
estimate along with it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import norm

from grid.datagen import GridDataset
from grid.model_builder import ModelBlueprint
from inference.trainer import ImputationResult, impute
from utils.config import InferenceConfig, NlpcaConfig
from utils.errors import DataError
from utils.logger import get_logger
from utils.telemetry import get_tracer

logger = get_logger("Detection")
tracer = get_tracer("detection")

TABLE_COLUMNS = ["sensor", "bus", "kind", "n", "mean_residual", "bias", "sigma", "z", "probability", "flagged"]


@dataclass(frozen=True)
class ZTestResult:
    z: float
    probability: float
    flagged: bool
    n: int
    mean: float


@dataclass(frozen=True)
class SensorCalibration:
    """Per-column residual bias and per-hour spread measured on a clean period."""
    bias: np.ndarray
    spread: np.ndarray
    hours: np.ndarray
    block: int = 24


def z_test(residuals, sigma: float, threshold: float = 0.99) -> ZTestResult:
    """
    z = mean(residual)·√n / σ and probability Φ(z).

    Flags when the probability exceeds ``threshold`` or falls below 1 − threshold.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("Z-test needs at least one residual")
    if not sigma > 0:
        raise ValueError(f"Z-test needs a positive sigma, got {sigma}")
    mean = float(r.mean())
    z = mean * np.sqrt(r.size) / sigma
    probability = float(norm.cdf(z))
    flagged = probability > threshold or probability < 1.0 - threshold
    return ZTestResult(z=float(z), probability=probability, flagged=bool(flagged), n=int(r.size), mean=mean)


def held_out_estimates(models: dict, blueprint: ModelBlueprint, dataset: GridDataset,
                       inference: InferenceConfig | None = None, nlpca_config: NlpcaConfig | None = None,
                       threads: int = 1) -> ImputationResult:
    """
    Estimate every series with all series of its kind hidden.

    One inference pass per quantity kind; each pass contributes only the
    columns it hid. Convergence flags and iteration counts are those of the
    worst pass per hour.
    """
    estimates = np.full(dataset.values.shape, np.nan)
    std = np.full(dataset.values.shape, np.nan)
    converged = np.ones(dataset.n_hours, dtype=bool)
    iterations = np.zeros(dataset.n_hours, dtype=int)
    kinds = sorted({k for _, k in dataset.columns})
    with tracer.start_as_current_span("held_out_estimates"):
        for kind in kinds:
            cols = [i for i, (_, k) in enumerate(dataset.columns) if k == kind]
            mask = dataset.observed.copy()
            mask[:, cols] = False
            result = impute(models, blueprint, dataset, mask, inference, nlpca_config, threads)
            estimates[:, cols] = result.estimates[:, cols]
            std[:, cols] = result.std[:, cols]
            converged &= result.converged
            iterations = np.maximum(iterations, result.iterations)
            logger.debug(f"Held out {len(cols)} '{kind}' series")
    return ImputationResult(estimates=estimates, std=std, converged=converged, iterations=iterations)


def calibrate(estimates: np.ndarray, dataset: GridDataset, block: int = 24) -> SensorCalibration:
    """
    Residual statistics of a period assumed free of anomalies.

    ``bias`` is the mean residual and ``spread`` its per-hour standard
    deviation, floored at the sensor noise. Columns never observed get NaN.
    """
    if block < 1:
        raise DataError(f"Calibration block must be ≥ 1 hour, got {block}")
    residual = np.asarray(estimates, dtype=float) - dataset.values
    n_cols = len(dataset.columns)
    bias = np.full(n_cols, np.nan)
    spread = np.full(n_cols, np.nan)
    hours = np.zeros(n_cols, dtype=int)
    for col, (_, kind) in enumerate(dataset.columns):
        r = residual[dataset.observed[:, col], col]
        r = r[np.isfinite(r)]
        hours[col] = r.size
        if r.size == 0:
            continue
        bias[col] = float(r.mean())
        deviation = float(r.std(ddof=1)) if r.size > 1 else 0.0
        spread[col] = max(deviation, dataset.sigma[kind])
    return SensorCalibration(bias=bias, spread=spread, hours=hours, block=int(block))


def _calibrated_sigma(calibration: SensorCalibration, col: int, n: int) -> float:
    # Residuals are correlated within a day, so each block of hours counts once.
    n_eff = max(1.0, n / calibration.block)
    n_cal = max(1.0, calibration.hours[col] / calibration.block)
    return float(calibration.spread[col] * np.sqrt(n * (1.0 / n_eff + 1.0 / n_cal)))


def detect_anomalies(estimates: np.ndarray, dataset: GridDataset, posterior_std: np.ndarray,
                     threshold: float = 0.99, window: int = 0,
                     calibration: SensorCalibration | None = None) -> pd.DataFrame:
    """
    Z-test every metered series on residual = estimate − measurement.

    Without ``calibration`` σ per sensor combines its noise with the mean
    posterior variance. With it, the calibrated bias is removed first and σ is
    the standard error of a difference of block means. ``window`` keeps the
    last N hours (0 = all). Rows are ranked by |z|, largest first.
    """
    rows = np.arange(dataset.n_hours)
    if window > 0:
        rows = rows[-window:]
    records = []
    for col, (bus, kind) in enumerate(dataset.columns):
        seen = rows[dataset.observed[rows, col]]
        if seen.size == 0:
            continue
        residual = estimates[seen, col] - dataset.values[seen, col]
        if calibration is not None and calibration.hours[col] > 0:
            bias = float(calibration.bias[col])
            sigma = _calibrated_sigma(calibration, col, seen.size)
        else:
            bias = 0.0
            sigma = float(np.sqrt(np.mean(posterior_std[seen, col] ** 2) + dataset.sigma[kind] ** 2))
        result = z_test(residual - bias, sigma, threshold)
        records.append({"sensor": f"bus{bus}/{kind}", "bus": bus, "kind": kind, "n": result.n,
                        "mean_residual": result.mean + bias, "bias": bias, "sigma": sigma, "z": result.z,
                        "probability": result.probability, "flagged": result.flagged})
    table = pd.DataFrame.from_records(records, columns=TABLE_COLUMNS)
    if not table.empty:
        table = table.iloc[np.argsort(-np.abs(table["z"].to_numpy()), kind="stable")].reset_index(drop=True)
        logger.info(f"{int(table['flagged'].sum())} of {len(table)} sensors flagged at threshold {threshold}")
    return table
