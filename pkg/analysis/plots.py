from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def plot_rmse_vs_missing(sweep: pd.DataFrame, path) -> Path:
    """Mean imputation RMSE per missing ratio, against the centralized model when the sweep has it."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    summary = sweep.groupby("ratio")["rmse"].mean()
    ax.plot(summary.index, summary.values, marker="o", label="graph model")
    if "baseline_rmse" in sweep and sweep["baseline_rmse"].notna().any():
        base = sweep.groupby("ratio")["baseline_rmse"].mean()
        ax.plot(base.index, base.values, marker="s", label="centralized")
    ax.set_xlabel("missing ratio")
    ax.set_ylabel("RMSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_scaling(table: pd.DataFrame, path) -> Path:
    path = Path(path)
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    left.plot(table["variables"], table["graph_params"], marker="o", label="graph model")
    left.plot(table["variables"], table["centralized_params"], marker="s", label="centralized")
    left.set_xlabel("state variables")
    left.set_ylabel("parameters")
    left.set_yscale("log")
    left.legend()
    right.plot(table["sections"], table["iteration_time"] * 1e3, marker="o")
    right.set_xlabel("sections")
    right.set_ylabel("BP iteration [ms]")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
