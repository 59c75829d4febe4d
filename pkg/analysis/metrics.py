import numpy as np

from utils.errors import DataError


def rmse(estimates, truth, mask=None) -> float:
    """Root mean square error over the entries selected by ``mask`` (all entries by default)."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.shape != truth.shape:
        raise ValueError(f"Shape mismatch: estimates {estimates.shape} vs truth {truth.shape}")
    selected = np.ones(estimates.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if selected.shape != estimates.shape:
        raise ValueError(f"Mask shape {selected.shape} does not match {estimates.shape}")
    if not selected.any():
        raise DataError("RMSE over an empty evaluation set")
    diff = estimates[selected] - truth[selected]
    return float(np.sqrt(np.mean(diff * diff)))
