import sys
import os
import numpy as np
import pytest
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from grid.datagen import TAN_PHI, generate, inject_anomaly, mask_kind, mask_missing
from utils.errors import DataError


def truth_of(dataset, kind):
    cols = [dataset.column_index(b, kind) for b in range(dataset.topology.n)]
    return dataset.truth[:, cols]


def test_generate_is_deterministic():
    a = generate(8, 48, seed=3)
    b = generate(8, 48, seed=3)
    assert a.columns == b.columns
    assert np.array_equal(a.values, b.values)
    assert a.topology.edges == b.topology.edges
    assert not np.array_equal(a.values, generate(8, 48, seed=4).values)


def test_noise_levels_and_shapes():
    dataset = generate(6, 24, seed=0)
    assert dataset.sigma["voltage"] == 1e-5
    assert dataset.sigma["p"] == 1e-3
    assert dataset.sigma["solar"] == 1e-3
    assert dataset.values.shape == (24, len(dataset.columns))
    assert dataset.observed.all()
    assert dataset.topology.n == 6
    assert len(dataset.topology.edges) >= 5
    assert any(k == "solar" for _, k in dataset.columns)
    assert any(k == "wind" for _, k in dataset.columns)


def test_physics_relations_hold_on_truth():
    dataset = generate(10, 48, seed=1)
    p = truth_of(dataset, "p")
    assert TAN_PHI == pytest.approx(0.4843, abs=1e-4)
    assert np.allclose(truth_of(dataset, "q"), p * TAN_PHI)
    M = dataset.physics["sensitivity"]
    assert np.allclose(truth_of(dataset, "voltage"), 1.0 + p @ M.T)
    assert truth_of(dataset, "demand").mean() > 0


def test_inject_identity_factor():
    dataset = generate(6, 24, seed=2)
    bus = next(b for b, k in dataset.columns if k == "solar")
    same = inject_anomaly(dataset, bus, factor=1.0)
    assert np.array_equal(same.values, dataset.values)
    assert np.array_equal(same.truth, dataset.truth)


def test_inject_doubles_physical_solar():
    dataset = generate(6, 48, seed=2)
    bus = next(b for b, k in dataset.columns if k == "solar")
    anomalous = inject_anomaly(dataset, bus, "solar", 2.0)
    p_col = dataset.column_index(bus, "p")
    solar_col = dataset.column_index(bus, "solar")
    assert np.allclose(anomalous.truth[:, p_col] - dataset.truth[:, p_col], dataset.truth[:, solar_col])
    assert np.array_equal(anomalous.values[:, solar_col], dataset.values[:, solar_col])
    assert anomalous.metadata["anomaly"] == {"bus": bus, "kind": "solar", "factor": 2.0, "start": 0}
    q_col = dataset.column_index(bus, "q")
    assert np.allclose(anomalous.truth[:, q_col], anomalous.truth[:, p_col] * TAN_PHI)


def test_inject_from_a_start_hour():
    dataset = generate(6, 48, seed=2)
    bus = next(b for b, k in dataset.columns if k == "solar")
    anomalous = inject_anomaly(dataset, bus, "solar", 2.0, start=24)
    p_col = dataset.column_index(bus, "p")
    assert np.array_equal(anomalous.values[:24], dataset.values[:24])
    assert np.array_equal(anomalous.truth[:24], dataset.truth[:24])
    assert np.all(anomalous.truth[24:, p_col] >= dataset.truth[24:, p_col])
    assert not np.array_equal(anomalous.values[24:, p_col], dataset.values[24:, p_col])
    with pytest.raises(DataError):
        inject_anomaly(dataset, bus, "solar", 2.0, start=48)


def test_inject_requires_solar_series():
    dataset = generate(6, 24, seed=2)
    plain = next(b for b in range(6) if "solar" not in dataset.kinds_at(b))
    with pytest.raises(DataError):
        inject_anomaly(dataset, plain)


def test_mask_missing():
    dataset = generate(50, 48, seed=0)
    assert mask_missing(dataset, 0.0, seed=1).observed.all()
    half = mask_missing(dataset, 0.5, seed=1)
    assert dataset.values.size >= 10_000
    assert abs(half.observed.mean() - 0.5) < 0.02
    assert np.array_equal(half.observed, mask_missing(dataset, 0.5, seed=1).observed)
    assert np.array_equal(half.truth, dataset.truth)
    with pytest.raises(DataError):
        mask_missing(dataset, 1.0)


def test_mask_kind_hides_every_series():
    dataset = mask_kind(generate(6, 24, seed=0), "voltage")
    for i, (_, kind) in enumerate(dataset.columns):
        assert dataset.observed[:, i].any() == (kind != "voltage")


def test_select_hours_and_invalid_sizes():
    dataset = generate(4, 48, seed=0)
    tail = dataset.select_hours(np.arange(24, 48))
    assert tail.n_hours == 24
    assert tail.hours[0] == 24
    assert tail.physics["noise"].shape == tail.values.shape
    with pytest.raises(DataError):
        generate(1, 48)
    with pytest.raises(DataError):
        generate(4, 12)
