import sys
import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from analysis.baseline import centralized_baseline
from analysis.benchmark import linear_chain, linear_surrogate, missing_data_sweep, scaling_benchmark, time_bp_iteration
from analysis.detection import calibrate, detect_anomalies, held_out_estimates, z_test
from analysis.metrics import rmse
from analysis.oracle import dense_solve
from analysis.plots import plot_rmse_vs_missing, plot_scaling
from grid.datagen import generate, inject_anomaly, mask_missing
from grid.model_builder import blueprint_from_dataset
from grid.partitioner import partition
from inference import nlpca
from inference.factor_graph import ConditionalFactor, FactorGraph, VariableNode, validate
from inference.trainer import em_train, evaluate, split_hours, split_rows
from utils.config import BenchmarkConfig, GridConfig, InferenceConfig, NlpcaConfig
from utils.errors import DataError


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [1.0, 2.0]) == pytest.approx(np.sqrt(5.0 / 2.0))
    assert rmse([0.0, 0.0], [1.0, 2.0], [True, False]) == pytest.approx(1.0)
    with pytest.raises(DataError):
        rmse([0.0], [1.0], [False])
    with pytest.raises(ValueError):
        rmse([0.0, 1.0], [1.0])


def test_z_test_values():
    neutral = z_test([0.0, 0.0], 1.0)
    assert neutral.probability == pytest.approx(0.5)
    assert not neutral.flagged
    high = z_test([3.0], 1.0)
    assert high.z == pytest.approx(3.0)
    assert high.probability == pytest.approx(0.99865, abs=1e-5)
    assert high.flagged
    low = z_test([-3.0], 1.0)
    assert low.probability == pytest.approx(1.0 - high.probability)
    assert low.flagged
    assert not z_test([3.0], 1.0, threshold=0.999).flagged


def test_z_test_rejects_bad_input():
    with pytest.raises(ValueError):
        z_test([], 1.0)
    with pytest.raises(ValueError):
        z_test([1.0], 0.0)


def test_biased_sensor_is_ranked_first():
    dataset = generate(3, 48, seed=0)
    target = dataset.column_index(1, "p")
    estimates = dataset.truth.copy()
    estimates[:, target] += 0.01
    table = detect_anomalies(estimates, dataset, np.zeros_like(estimates))
    assert len(table) == len(dataset.columns)
    assert table.loc[0, "sensor"] == "bus1/p"
    assert bool(table.loc[0, "flagged"])
    assert table.loc[0, "mean_residual"] == pytest.approx(0.01, abs=1e-3)
    assert np.all(np.diff(np.abs(table["z"].to_numpy())) <= 0)


def test_detection_window_and_hidden_series():
    dataset = generate(3, 48, seed=0)
    observed = dataset.observed.copy()
    observed[:, 0] = False
    dataset = dataset.with_mask(observed)
    table = detect_anomalies(dataset.truth, dataset, np.zeros_like(dataset.truth), window=12)
    assert len(table) == len(dataset.columns) - 1
    assert set(table["n"]) == {12}


def test_dense_solve_single_factor():
    graph = FactorGraph()
    graph.add_variable(VariableNode("x", 1))
    graph.add_factor(ConditionalFactor("y", [("x", [0])], [0.25], observation=[2.0]))
    means, covariances = dense_solve(graph)
    assert means["x"] == pytest.approx([2.0])
    np.testing.assert_allclose(covariances["x"], [[0.25]])


def test_dense_solve_independent_blocks():
    graph = FactorGraph()
    for name, value in (("a", 1.0), ("b", -3.0)):
        graph.add_variable(VariableNode(name, 1))
        graph.add_factor(ConditionalFactor(f"y{name}", [(name, [0])], [1.0], observation=[value]))
    means, covariances = dense_solve(graph)
    assert means["a"] == pytest.approx([1.0])
    assert means["b"] == pytest.approx([-3.0])
    np.testing.assert_allclose(covariances["b"], [[1.0]])


def test_linear_surrogate_follows_blueprint():
    dataset = generate(9, 24, seed=0)
    blueprint = blueprint_from_dataset(partition(dataset.topology, 0, max_size=3), dataset)
    graph = linear_surrogate(blueprint)
    assert validate(graph).valid
    assert len(graph.factors) == len(blueprint.conditionals) + len(blueprint.joints)


def test_iteration_time_grows_linearly_with_chain_length():
    times = {n: min(time_bp_iteration(linear_chain(n, 4), repeats=5) for _ in range(5)) for n in (10, 20, 40)}
    for short, long in ((10, 20), (20, 40)):
        assert 1.3 <= times[long] / times[short] <= 3.0


def test_scaling_benchmark_counts():
    config = GridConfig(benchmark=BenchmarkConfig(buses_per_section=3, hours=24, repeats=1))
    table = scaling_benchmark([10, 20, 40], config)
    assert list(table["requested_sections"]) == [10, 20, 40]
    assert (table["sections"] >= table["requested_sections"]).all()
    assert table["sections"].is_monotonic_increasing
    assert table["variables"].is_monotonic_increasing
    assert (table["graph_params"] < table["centralized_params"]).all()
    assert table["rmse_10"].isna().all()
    assert table["baseline_rmse_10"].isna().all()
    assert (table["iteration_time"] > 0).all()


def test_centralized_baseline_is_seeded():
    dataset = generate(3, 24, seed=0)
    mask = mask_missing(dataset, 0.2, seed=1).observed
    config = NlpcaConfig(epochs=50, inversion_steps=20, inversion_method="gauss-newton")
    first = centralized_baseline(dataset, mask, config, seed=0)
    second = centralized_baseline(dataset, mask, config, seed=0)
    assert first.rmse == second.rmse
    assert first.dim == len(dataset.columns)
    assert first.param_count == nlpca.param_count(first.dim)
    assert first.estimates.shape == dataset.values.shape


def test_plots_are_written(tmp_path):
    sweep = pd.DataFrame({"ratio": [0.1, 0.1, 0.3], "seed": [0, 1, 0], "rmse": [0.01, 0.02, 0.04],
                          "baseline_rmse": [0.02, 0.03, 0.05]})
    assert plot_rmse_vs_missing(sweep, tmp_path / "sweep.png").exists()
    assert plot_rmse_vs_missing(sweep.drop(columns=["baseline_rmse"]), tmp_path / "bare.png").exists()
    table = pd.DataFrame({"sections": [2, 4], "variables": [20, 40], "graph_params": [600, 1500],
                          "centralized_params": [600, 2400], "iteration_time": [0.001, 0.002]})
    assert plot_scaling(table, tmp_path / "scaling.png").stat().st_size > 0


def test_calibrated_detection_removes_model_bias():
    dataset = generate(3, 96, seed=0)
    target = dataset.column_index(1, "p")
    wobble = np.where(np.arange(dataset.n_hours) % 2 == 0, 0.002, -0.002)[:, None]
    estimates = dataset.values + 0.01 + wobble
    before, after = split_rows(dataset, 48)
    calibration = calibrate(estimates[before], dataset.select_hours(before))
    np.testing.assert_allclose(calibration.bias, 0.01, atol=1e-9)
    assert np.all(calibration.spread >= min(dataset.sigma.values()))
    shifted = estimates[after].copy()
    shifted[:, target] += 0.05
    table = detect_anomalies(shifted, dataset.select_hours(after), np.zeros_like(shifted), calibration=calibration)
    assert table.loc[0, "sensor"] == "bus1/p"
    assert table.loc[0, "z"] > 0
    assert table.loc[0, "bias"] == pytest.approx(0.01)
    assert int(table["flagged"].sum()) == 1


def test_calibration_rejects_bad_block():
    dataset = generate(3, 24, seed=0)
    with pytest.raises(DataError):
        calibrate(dataset.values, dataset, block=0)


@pytest.fixture(scope="module")
def detection_setup():
    dataset = generate(6, 192, seed=3)
    blueprint = blueprint_from_dataset(partition(dataset.topology, 1), dataset)
    train, _ = split_hours(dataset, 144)
    config = NlpcaConfig(epochs=500, inversion_steps=30, inversion_method="gauss-newton")
    inference = InferenceConfig(max_outer=8)
    trained = em_train(blueprint, train, em_iters=2, nlpca_config=config, seed=0, inference=inference)
    before, after = split_rows(dataset, 144)
    held = held_out_estimates(trained.models, trained.blueprint, dataset, inference, config)
    calibration = calibrate(held.estimates[before], dataset.select_hours(before))
    return dataset, trained, config, inference, after, held, calibration


def test_held_out_estimates_fill_every_series(detection_setup):
    dataset, _, _, _, _, held, _ = detection_setup
    assert held.estimates.shape == dataset.values.shape
    assert np.all(np.isfinite(held.estimates))
    assert np.all(held.std >= 0)


def test_clean_period_raises_no_flags(detection_setup):
    dataset, _, _, _, after, held, calibration = detection_setup
    table = detect_anomalies(held.estimates[after], dataset.select_hours(after), held.std[after],
                             calibration=calibration)
    assert len(table) == len(dataset.columns)
    assert not table["flagged"].any()


def test_injected_solar_anomaly_is_flagged(detection_setup):
    dataset, trained, config, inference, after, _, calibration = detection_setup
    anomalous = inject_anomaly(dataset, 2, "solar", 2.0).select_hours(after)
    held = held_out_estimates(trained.models, trained.blueprint, anomalous, inference, config)
    table = detect_anomalies(held.estimates, anomalous, held.std, calibration=calibration)
    solar = table[table["sensor"] == "bus2/solar"].iloc[0]
    assert bool(solar["flagged"])
    assert solar["z"] > 0
    assert table.loc[0, "bus"] == 2


def test_graph_model_matches_centralized_baseline_on_a_tiny_system():
    full = generate(2, 96, seed=4)
    keep = [i for i, (_, kind) in enumerate(full.columns) if kind in ("voltage", "p", "q")]
    dataset = replace(full, columns=[full.columns[i] for i in keep], values=full.values[:, keep],
                      observed=full.observed[:, keep], truth=full.truth[:, keep], physics=None)
    assert len(dataset.columns) == 6
    config = NlpcaConfig(epochs=500, inversion_steps=30, inversion_method="gauss-newton")
    inference = InferenceConfig(max_outer=8)
    blueprint = blueprint_from_dataset(partition(dataset.topology, 1), dataset)
    trained = em_train(blueprint, dataset, em_iters=1, nlpca_config=config, seed=0, inference=inference)
    mask = mask_missing(dataset, 0.1, seed=0).observed
    graph = evaluate(trained.models, trained.blueprint, dataset, mask, inference, config).rmse
    central = centralized_baseline(dataset, mask, config, seed=0).rmse
    assert 0.5 <= graph / central <= 2.0


def test_sweep_reports_the_baseline_when_asked():
    dataset = generate(3, 24, seed=0)
    blueprint = blueprint_from_dataset(partition(dataset.topology, 1), dataset)
    config = NlpcaConfig(epochs=50, inversion_steps=20, inversion_method="gauss-newton")
    inference = InferenceConfig(max_outer=5)
    trained = em_train(blueprint, dataset, em_iters=1, nlpca_config=config, seed=0, inference=inference)
    sweep = missing_data_sweep(trained.models, trained.blueprint, dataset, [0.2], [0, 1], inference, config,
                               baseline=config)
    assert list(sweep.columns) == ["ratio", "seed", "rmse", "baseline_rmse"]
    assert sweep["baseline_rmse"].notna().all()
    assert (sweep["baseline_rmse"] > 0).all()
