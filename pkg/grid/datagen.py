"""
Synthetic grid datasets: hourly demand, solar and wind profiles feeding a
linear voltage surrogate, with Gaussian sensor noise, masking and anomaly
injection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from grid.partitioner import ConnectivityGraph, laplacian, random_connected_graph
from utils.errors import DataError
from utils.logger import get_logger
from utils.seeding import substream

logger = get_logger("DataGen")

KINDS = ("voltage", "p", "q", "demand", "solar", "wind")
POWER_SIGMA = 1e-3
VOLTAGE_SIGMA = 1e-5
DEFAULT_SIGMA = {kind: (VOLTAGE_SIGMA if kind == "voltage" else POWER_SIGMA) for kind in KINDS}
POWER_FACTOR = 0.9
TAN_PHI = math.tan(math.acos(POWER_FACTOR))
EXTRA_EDGE_FRACTION = 0.15
VOLTAGE_GAIN = 0.05


@dataclass
class GridDataset:
    """
    Hourly series for every (bus, kind) column.

    ``values`` holds measurements and ``observed`` their availability, both
    hours × columns. ``truth`` is the noiseless state for synthetic data.
    ``physics`` keeps what anomaly injection needs to recompute the effects.
    """
    topology: ConnectivityGraph
    columns: list
    values: np.ndarray
    observed: np.ndarray
    sigma: dict = field(default_factory=lambda: dict(DEFAULT_SIGMA))
    truth: np.ndarray | None = None
    hours: np.ndarray | None = None
    physics: dict | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = [(int(b), str(k)) for b, k in self.columns]
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.hours is None:
            self.hours = np.arange(self.values.shape[0])
        self.hours = np.asarray(self.hours, dtype=int)
        if self.values.shape != (len(self.hours), len(self.columns)) or self.observed.shape != self.values.shape:
            raise DataError(f"Dataset arrays {self.values.shape}/{self.observed.shape} do not match "
                            f"{len(self.hours)} hours × {len(self.columns)} series")
        if self.truth is not None and np.shape(self.truth) != self.values.shape:
            raise DataError("Ground truth shape does not match the measurements")
        unknown = {k for _, k in self.columns} - set(KINDS)
        if unknown:
            raise DataError(f"Unknown quantity kinds {sorted(unknown)}")
        for kind in {k for _, k in self.columns}:
            if self.sigma.get(kind, 0.0) <= 0:
                raise DataError(f"Noise sigma for '{kind}' must be positive")

    @property
    def n_hours(self) -> int:
        return len(self.hours)

    def column_index(self, bus: int, kind: str) -> int:
        try:
            return self.columns.index((int(bus), kind))
        except ValueError:
            raise DataError(f"No '{kind}' series at bus {bus}")

    def series(self, bus: int, kind: str) -> np.ndarray:
        return self.values[:, self.column_index(bus, kind)]

    def kinds_at(self, bus: int) -> list[str]:
        present = {k for b, k in self.columns if b == bus}
        return [k for k in KINDS if k in present]

    def quantities(self) -> dict[int, list[str]]:
        return {bus: self.kinds_at(bus) for bus in sorted({b for b, _ in self.columns})}

    def column_sigma(self) -> np.ndarray:
        return np.array([self.sigma[k] for _, k in self.columns])

    def reference(self) -> np.ndarray:
        """Ground truth when known, otherwise the measurements themselves."""
        return self.values if self.truth is None else self.truth

    def with_mask(self, observed: np.ndarray) -> "GridDataset":
        return replace(self, observed=np.asarray(observed, dtype=bool).copy())

    def select_hours(self, rows) -> "GridDataset":
        rows = np.asarray(rows)
        physics = None
        if self.physics is not None:
            physics = dict(self.physics)
            for key in ("noise", "solar_truth"):
                if physics.get(key) is not None:
                    physics[key] = physics[key][rows]
        return replace(self, values=self.values[rows].copy(), observed=self.observed[rows].copy(),
                       truth=None if self.truth is None else self.truth[rows].copy(),
                       hours=self.hours[rows].copy(), physics=physics)


def _sensitivity(topology: ConnectivityGraph, rng: np.random.Generator) -> np.ndarray:
    """Low-gain voltage sensitivity M = g·D^½ (L + I)⁻¹ D^½, positive and decaying with distance."""
    L = laplacian(topology)
    D = np.sqrt(rng.uniform(0.5, 1.5, size=topology.n))
    return VOLTAGE_GAIN * D[:, None] * np.linalg.inv(L + np.eye(topology.n)) * D[None, :]


def _ar1(rng: np.random.Generator, n: int, phi: float, scale: float) -> np.ndarray:
    out = np.empty(n)
    state = rng.normal(0.0, scale / math.sqrt(1.0 - phi * phi))
    for t in range(n):
        state = phi * state + rng.normal(0.0, scale)
        out[t] = state
    return out


def _effects(p: np.ndarray, M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return p * TAN_PHI, 1.0 + p @ M.T


def generate(n_buses: int, n_hours: int, seed: int = 0, solar_fraction: float = 0.4,
             wind_fraction: float = 0.2) -> GridDataset:
    """
    Seeded synthetic grid: random spanning tree plus ⌈0.15·n⌉ extra edges.

    Every bus carries voltage, p, q and demand series; solar and wind sit on
    random subsets of buses (at least one each). p = generation − demand,
    q = p·tan(acos 0.9), v = 1 + M·p.
    """
    if n_buses < 2:
        raise DataError(f"Need at least 2 buses, got {n_buses}")
    if n_hours < 24:
        raise DataError(f"Need at least 24 hours, got {n_hours}")
    rng = substream(seed, "data", n_buses, n_hours)
    topology = random_connected_graph(n_buses, math.ceil(EXTRA_EDGE_FRACTION * n_buses), rng)
    M = _sensitivity(topology, rng)

    solar_buses = set(rng.choice(n_buses, size=max(1, round(solar_fraction * n_buses)), replace=False).tolist())
    wind_buses = set(rng.choice(n_buses, size=max(1, round(wind_fraction * n_buses)), replace=False).tolist())

    t = np.arange(n_hours)
    hour_of_day = t % 24
    seasonal = 1.0 + 0.2 * np.sin(2 * np.pi * t / (24 * 365))
    bell = np.clip(np.sin(np.pi * (hour_of_day - 6) / 12), 0.0, None) ** 1.5

    demand = np.empty((n_hours, n_buses))
    solar = np.zeros((n_hours, n_buses))
    wind = np.zeros((n_hours, n_buses))
    for b in range(n_buses):
        base = rng.uniform(0.05, 0.15)
        phase = rng.uniform(-2.0, 2.0)
        daily = 1.0 + 0.3 * np.sin(2 * np.pi * (t - 8 - phase) / 24)
        weekly = 1.0 + 0.1 * np.sin(2 * np.pi * t / 168)
        demand[:, b] = base * daily * weekly + _ar1(rng, n_hours, 0.8, 0.004)
        if b in solar_buses:
            solar[:, b] = rng.uniform(0.05, 0.2) * bell * seasonal
        if b in wind_buses:
            wind[:, b] = rng.uniform(0.05, 0.15) * (1.0 / (1.0 + np.exp(-_ar1(rng, n_hours, 0.95, 0.3))))
    p = solar + wind - demand
    q, v = _effects(p, M)

    columns, truth_cols = [], []
    by_kind = {"voltage": v, "p": p, "q": q, "demand": demand, "solar": solar, "wind": wind}
    for b in range(n_buses):
        for kind in KINDS:
            if kind == "solar" and b not in solar_buses or kind == "wind" and b not in wind_buses:
                continue
            columns.append((b, kind))
            truth_cols.append(by_kind[kind][:, b])
    truth = np.column_stack(truth_cols)
    sigma = np.array([DEFAULT_SIGMA[k] for _, k in columns])
    noise = rng.normal(size=truth.shape) * sigma
    logger.info(f"Generated {n_buses} buses × {n_hours} hours ({len(columns)} series), seed={seed}")
    return GridDataset(
        topology=topology, columns=columns, values=truth + noise, observed=np.ones_like(truth, dtype=bool),
        sigma=dict(DEFAULT_SIGMA), truth=truth, hours=t,
        physics={"sensitivity": M, "noise": noise, "solar_truth": solar},
        metadata={"seed": int(seed), "n_buses": int(n_buses), "n_hours": int(n_hours)},
    )


def inject_anomaly(dataset: GridDataset, bus: int, kind: str = "solar", factor: float = 2.0,
                   start: int = 0) -> GridDataset:
    """
    Scale the physical generation at one bus while its meter keeps reporting the old value.

    Active/reactive power at the bus and every voltage are recomputed from row
    ``start`` on; earlier rows and the solar measurement series are left untouched.

    Raises
    ------
    DataError
        If the dataset is not synthetic or the bus has no such series.
    """
    if kind != "solar":
        raise DataError(f"Anomaly injection supports 'solar' only, got '{kind}'")
    dataset.column_index(bus, kind)
    if dataset.physics is None or dataset.truth is None:
        raise DataError("Anomaly injection needs a synthetic dataset with known physics")
    if not 0 <= start < dataset.n_hours:
        raise DataError(f"Anomaly start {start} outside 0..{dataset.n_hours - 1}")
    if factor == 1.0:
        return replace(dataset, values=dataset.values.copy(), truth=dataset.truth.copy())

    M = dataset.physics["sensitivity"]
    noise = dataset.physics["noise"]
    truth = dataset.truth.copy()
    buses = sorted({b for b, _ in dataset.columns})
    p_cols = [dataset.column_index(b, "p") for b in buses]
    p = truth[:, p_cols].copy()
    p[:, buses.index(bus)] += (factor - 1.0) * truth[:, dataset.column_index(bus, "solar")]
    q, v = _effects(p, M)
    for i, b in enumerate(buses):
        truth[:, dataset.column_index(b, "p")] = p[:, i]
        truth[:, dataset.column_index(b, "q")] = q[:, i]
        truth[:, dataset.column_index(b, "voltage")] = v[:, i]
    values = truth + noise
    sol = dataset.column_index(bus, "solar")
    values[:, sol] = dataset.values[:, sol]
    truth[:start] = dataset.truth[:start]
    values[:start] = dataset.values[:start]
    metadata = dict(dataset.metadata, anomaly={"bus": int(bus), "kind": kind, "factor": float(factor),
                                               "start": int(start)})
    logger.info(f"Injected {factor}x {kind} at bus {bus} from row {start}")
    return replace(dataset, values=values, truth=truth, metadata=metadata)


def mask_missing(dataset: GridDataset, ratio: float, seed: int = 0) -> GridDataset:
    """Hide each entry independently with probability ``ratio``; ground truth is kept."""
    if not 0.0 <= ratio < 1.0:
        raise DataError(f"Missing ratio must lie in [0, 1), got {ratio}")
    rng = substream(seed, "mask")
    hidden = rng.random(dataset.values.shape) < ratio
    return dataset.with_mask(dataset.observed & ~hidden)


def mask_kind(dataset: GridDataset, kind: str) -> GridDataset:
    """Hide every series of one quantity kind."""
    if kind not in KINDS:
        raise DataError(f"Unknown quantity kind '{kind}'")
    observed = dataset.observed.copy()
    observed[:, [i for i, (_, k) in enumerate(dataset.columns) if k == kind]] = False
    return dataset.with_mask(observed)
