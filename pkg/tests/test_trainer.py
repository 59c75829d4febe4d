import sys
import os
import numpy as np
import pytest
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from analysis.benchmark import missing_data_sweep
from grid.datagen import POWER_SIGMA, generate, mask_missing
from grid.model_builder import blueprint_from_dataset
from grid.partitioner import partition
from inference.trainer import column_means, em_train, evaluate, impute, split_hours, split_rows
from utils.config import InferenceConfig, NlpcaConfig
from utils.errors import DataError

FAST = NlpcaConfig(epochs=200, inversion_steps=30, inversion_method="gauss-newton")
INFERENCE = InferenceConfig(max_outer=8)


@pytest.fixture(scope="module")
def small_grid():
    dataset = generate(4, 24, seed=0)
    blueprint = blueprint_from_dataset(partition(dataset.topology, 1), dataset)
    return dataset, blueprint


@pytest.fixture(scope="module")
def trained(small_grid):
    dataset, blueprint = small_grid
    return em_train(blueprint, dataset, em_iters=2, nlpca_config=FAST, seed=0, inference=INFERENCE)


def test_report_has_one_entry_per_iteration(trained):
    report = trained.report
    assert [it["iteration"] for it in report.iterations] == [0, 1, 2]
    assert report.iterations[0]["filter_rmse"] is None
    assert all(it["filter_rmse"] is not None for it in report.iterations[1:])
    assert report.best_rmse == min(report.accepted_rmse())
    assert set(trained.models) == {j.id for j in trained.blueprint.joints}


def test_accepted_rmse_never_increases(trained):
    accepted = trained.report.accepted_rmse()
    assert all(b <= a for a, b in zip(accepted, accepted[1:]))


def test_training_is_deterministic(small_grid, trained):
    dataset, blueprint = small_grid
    again = em_train(blueprint, dataset, em_iters=2, nlpca_config=FAST, seed=0, inference=INFERENCE)
    assert again.report.to_dict(False) == trained.report.to_dict(False)
    assert "timing" not in again.report.to_dict(False)
    for jid, net in trained.models.items():
        assert np.array_equal(net.W2, again.models[jid].W2)


def test_blueprint_carries_observed_means(small_grid, trained):
    dataset, blueprint = small_grid
    means = column_means(blueprint, dataset)
    for variable in trained.blueprint.variables:
        assert np.allclose(variable.mean, means[variable.id])


def test_filtering_error_is_near_sensor_noise(small_grid, trained):
    dataset, _ = small_grid
    result = evaluate(trained.models, trained.blueprint, dataset, dataset.observed, INFERENCE, FAST)
    assert result.evaluated.all()
    assert result.rmse < 1e-2
    assert np.all(np.isfinite(result.imputation.estimates))
    assert np.all(result.imputation.std >= 0)


def test_imputation_scores_hidden_entries_only(small_grid, trained):
    dataset, _ = small_grid
    mask = mask_missing(dataset, 0.3, seed=2).observed
    result = evaluate(trained.models, trained.blueprint, dataset, mask, INFERENCE, FAST)
    assert np.array_equal(result.evaluated, dataset.observed & ~mask)
    assert np.isfinite(result.rmse)
    counts = sum(v["count"] for v in result.per_variable.values())
    assert counts == int(result.evaluated.sum())


def test_threaded_imputation_matches_sequential(small_grid, trained):
    dataset, _ = small_grid
    hours = dataset.select_hours(np.arange(6))
    one = impute(trained.models, trained.blueprint, hours, None, INFERENCE, FAST, threads=1)
    many = impute(trained.models, trained.blueprint, hours, None, INFERENCE, FAST, threads=3)
    assert np.allclose(one.estimates, many.estimates)


def test_split_hours():
    dataset = generate(3, 48, seed=1)
    train, valid = split_hours(dataset, 30)
    assert train.n_hours == 30 and valid.n_hours == 18
    assert valid.hours[0] == 30
    with pytest.raises(DataError):
        split_hours(dataset, 0)
    with pytest.raises(DataError):
        split_hours(dataset, 48)
    before, after = split_rows(dataset, 30)
    assert np.array_equal(before, np.arange(30))
    assert np.array_equal(after, np.arange(30, 48))


def test_em_iters_must_be_positive(small_grid):
    dataset, blueprint = small_grid
    with pytest.raises(DataError):
        em_train(blueprint, dataset, em_iters=0)


def test_gauss_newton_em_on_an_undertrained_model():
    dataset = generate(4, 24, seed=1)
    blueprint = blueprint_from_dataset(partition(dataset.topology, 1), dataset)
    config = NlpcaConfig(epochs=50, inversion_steps=30, inversion_method="gauss-newton")
    inference = InferenceConfig(max_outer=5)
    result = em_train(blueprint, dataset, em_iters=1, nlpca_config=config, seed=0, inference=inference)
    assert len(result.report.iterations) == 2
    imputation = impute(result.models, result.blueprint, dataset, None, inference, config)
    assert np.all(np.isfinite(imputation.estimates))
    assert np.all(np.isfinite(imputation.std))


def test_imputation_error_grows_with_missing_ratio(small_grid, trained):
    dataset, _ = small_grid
    sweep = missing_data_sweep(trained.models, trained.blueprint, dataset, [0.1, 0.3, 0.5], range(20),
                               INFERENCE, FAST)
    means = sweep.groupby("ratio")["rmse"].mean()
    assert list(means.index) == [0.1, 0.3, 0.5]
    assert means.is_monotonic_increasing
    assert means[0.1] < 10.0 * POWER_SIGMA
    assert sweep["baseline_rmse"].isna().all()


def test_em_settles_within_five_iterations(small_grid):
    dataset, blueprint = small_grid
    config = NlpcaConfig(epochs=2000, inversion_steps=30, inversion_method="gauss-newton", tol=1e-3, patience=50)
    result = em_train(blueprint, dataset, em_iters=5, nlpca_config=config, seed=0, inference=INFERENCE)
    rmse = [it["rmse"] for it in result.report.iterations]
    assert len(rmse) == 6
    best_after_4, best_after_5 = min(rmse[:5]), min(rmse)
    assert (best_after_4 - best_after_5) / best_after_4 < 0.01
