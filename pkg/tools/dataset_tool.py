# tools/dataset_tool.py
import json
from pathlib import Path

import numpy as np
import pandas as pd

from grid.datagen import DEFAULT_SIGMA, KINDS, GridDataset
from grid.partitioner import ConnectivityGraph, PartitionResult, section_adjacency
from utils.errors import DataError
from utils.logger import get_logger

MEASUREMENT_COLUMNS = ["hour", "bus", "kind", "value", "observed"]
MEASUREMENTS_FILE = "measurements.csv"
TRUTH_FILE = "truth.csv"
TOPOLOGY_FILE = "topology.csv"
META_FILE = "dataset.json"
FLOAT_FORMAT = "%.12g"


def _read_table(path, columns: list[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, skipinitialspace=True)
    except FileNotFoundError:
        raise DataError(f"File not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"Malformed CSV {path}: {e}")
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}; expected header {','.join(columns)}")
    ragged = frame[columns].isna().any(axis=1)
    if ragged.any():
        line = int(np.flatnonzero(ragged.to_numpy())[0]) + 2
        raise DataError(f"{path}, line {line}: expected {len(frame.columns)} fields")
    return frame


def _numeric(frame: pd.DataFrame, column: str, path, integer: bool = False, allow_na: bool = False) -> np.ndarray:
    raw = frame[column].str.strip()
    na = raw.str.upper().isin(["NA", ""]) if allow_na else pd.Series(False, index=raw.index)
    parsed = pd.to_numeric(raw.where(~na), errors="coerce")
    bad = parsed.isna() & ~na
    if integer:
        bad |= ~na & parsed.notna() & (parsed != np.round(parsed))
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise DataError(f"{path}, line {line}: non-numeric {column} '{frame[column].iloc[line - 2]}'")
    return parsed.to_numpy(dtype=float)


class DatasetTool:
    """
    Reads and writes datasets, topologies and partitions as CSV.
    """
    @staticmethod
    def save_csv(dataset: GridDataset, path, truth: bool = False) -> Path:
        """Long-format ``hour,bus,kind,value,observed``; rows ordered by hour then series."""
        logger = get_logger("DatasetTool")
        values = dataset.truth if truth else dataset.values
        if values is None:
            raise DataError("Dataset has no ground truth to write")
        n_hours, n_cols = values.shape
        frame = pd.DataFrame({
            "hour": np.repeat(dataset.hours, n_cols),
            "bus": np.tile([b for b, _ in dataset.columns], n_hours),
            "kind": np.tile([k for _, k in dataset.columns], n_hours),
            "value": values.ravel(),
            "observed": np.ones(values.size, dtype=int) if truth else dataset.observed.ravel().astype(int),
        })
        path = Path(path)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    @staticmethod
    def load_csv(path) -> tuple[list, np.ndarray, np.ndarray, np.ndarray]:
        """
        Parse a measurement file into (columns, values, observed, hours).

        "NA" values are read as masked entries; series absent at some hour are
        masked as well.

        Raises
        ------
        DataError
            On a missing column, a ragged row, a non-numeric cell (with its line
            number), an unknown kind or a duplicated entry.
        """
        frame = _read_table(path, MEASUREMENT_COLUMNS)
        hours = _numeric(frame, "hour", path, integer=True).astype(int)
        buses = _numeric(frame, "bus", path, integer=True).astype(int)
        values = _numeric(frame, "value", path, allow_na=True)
        flags = _numeric(frame, "observed", path, integer=True)
        bad_flag = ~np.isin(flags, [0, 1])
        if bad_flag.any():
            raise DataError(f"{path}, line {int(np.flatnonzero(bad_flag)[0]) + 2}: observed must be 0 or 1")
        kinds = frame["kind"].str.strip().to_numpy()
        unknown = ~np.isin(kinds, KINDS)
        if unknown.any():
            line = int(np.flatnonzero(unknown)[0]) + 2
            raise DataError(f"{path}, line {line}: unknown kind '{kinds[line - 2]}'")
        long = pd.DataFrame({"hour": hours, "bus": buses, "kind": kinds, "value": values,
                             "observed": (flags == 1) & np.isfinite(values)})
        duplicated = long.duplicated(["hour", "bus", "kind"])
        if duplicated.any():
            raise DataError(f"{path}, line {int(np.flatnonzero(duplicated.to_numpy())[0]) + 2}: duplicate entry")

        order = {k: i for i, k in enumerate(KINDS)}
        columns = sorted({(int(b), str(k)) for b, k in zip(buses, kinds)}, key=lambda c: (c[0], order[c[1]]))
        hour_index = np.array(sorted(set(hours.tolist())), dtype=int)
        row = np.searchsorted(hour_index, hours)
        col_of = {c: i for i, c in enumerate(columns)}
        col = np.array([col_of[(int(b), str(k))] for b, k in zip(buses, kinds)], dtype=int)
        wide = np.full((len(hour_index), len(columns)), np.nan)
        observed = np.zeros(wide.shape, dtype=bool)
        wide[row, col] = long["value"].to_numpy()
        observed[row, col] = long["observed"].to_numpy()
        return columns, wide, observed, hour_index

    @staticmethod
    def save_topology(topology: ConnectivityGraph, path) -> Path:
        pd.DataFrame(list(topology.edges), columns=["from", "to"]).to_csv(path, index=False, lineterminator="\n")
        return Path(path)

    @staticmethod
    def load_topology(path, n: int | None = None) -> ConnectivityGraph:
        frame = _read_table(path, ["from", "to"])
        a = _numeric(frame, "from", path, integer=True).astype(int)
        b = _numeric(frame, "to", path, integer=True).astype(int)
        if (a < 0).any() or (b < 0).any():
            raise DataError(f"{path}: negative node index")
        size = n if n is not None else (int(max(a.max(initial=-1), b.max(initial=-1))) + 1)
        return ConnectivityGraph(size, tuple(zip(a.tolist(), b.tolist())))

    @staticmethod
    def save_dataset(dataset: GridDataset, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        DatasetTool.save_csv(dataset, directory / MEASUREMENTS_FILE)
        if dataset.truth is not None:
            DatasetTool.save_csv(dataset, directory / TRUTH_FILE, truth=True)
        DatasetTool.save_topology(dataset.topology, directory / TOPOLOGY_FILE)
        meta = {"n_buses": dataset.topology.n, "sigma": dataset.sigma, "metadata": dataset.metadata}
        with open(directory / META_FILE, "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
        return directory

    @staticmethod
    def load_dataset(directory) -> GridDataset:
        """Measurements, topology and (when present) ground truth and metadata from a dataset directory."""
        directory = Path(directory)
        if not directory.is_dir():
            raise DataError(f"Dataset directory not found: {directory}")
        meta = {}
        if (directory / META_FILE).exists():
            try:
                meta = json.loads((directory / META_FILE).read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise DataError(f"Malformed {directory / META_FILE}: {e}")
        columns, values, observed, hours = DatasetTool.load_csv(directory / MEASUREMENTS_FILE)
        n_buses = meta.get("n_buses", max(b for b, _ in columns) + 1)
        topology = DatasetTool.load_topology(directory / TOPOLOGY_FILE, n_buses)
        truth = None
        if (directory / TRUTH_FILE).exists():
            t_columns, t_values, _, t_hours = DatasetTool.load_csv(directory / TRUTH_FILE)
            if t_columns != columns or not np.array_equal(t_hours, hours):
                raise DataError(f"{directory / TRUTH_FILE} does not cover the same series and hours")
            truth = t_values
        sigma = dict(DEFAULT_SIGMA)
        sigma.update({k: float(v) for k, v in meta.get("sigma", {}).items()})
        return GridDataset(topology=topology, columns=columns, values=np.nan_to_num(values), observed=observed,
                           sigma=sigma, truth=truth, hours=hours, metadata=meta.get("metadata", {}))

    @staticmethod
    def save_partition(result: PartitionResult, path) -> tuple[Path, Path]:
        """``node,section`` at ``path`` plus ``section_a,section_b,edges`` next to it."""
        path = Path(path)
        pd.DataFrame({"node": np.arange(len(result.assignment)), "section": result.assignment}).to_csv(
            path, index=False, lineterminator="\n")
        adjacency_path = path.with_name(path.stem + "_adjacency.csv")
        pd.DataFrame([(a, b, w) for (a, b), w in result.section_adjacency.items()],
                     columns=["section_a", "section_b", "edges"]).to_csv(adjacency_path, index=False,
                                                                           lineterminator="\n")
        return path, adjacency_path

    @staticmethod
    def load_partition(path, topology: ConnectivityGraph) -> PartitionResult:
        frame = _read_table(path, ["node", "section"])
        nodes = _numeric(frame, "node", path, integer=True).astype(int)
        sections = _numeric(frame, "section", path, integer=True).astype(int)
        if sorted(nodes.tolist()) != list(range(topology.n)):
            raise DataError(f"{path}: nodes must cover 0..{topology.n - 1} exactly once")
        assignment = np.empty(topology.n, dtype=int)
        assignment[nodes] = sections
        ids = sorted(set(sections.tolist()))
        if ids != list(range(len(ids))):
            raise DataError(f"{path}: section ids must be 0..{len(ids) - 1}")
        groups = [tuple(np.flatnonzero(assignment == s).tolist()) for s in ids]
        return PartitionResult(assignment=assignment, sections=groups,
                               section_adjacency=section_adjacency(topology, assignment))

# End of tools/dataset_tool.py
