import sys
import os
import numpy as np
import pytest
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from grid.datagen import DEFAULT_SIGMA, generate
from grid.model_builder import (blueprint_from_dataset, blueprint_param_count, build_blueprint, instantiate,
                                sample_observations, state_columns)
from grid.partitioner import PartitionResult, partition
from inference.factor_graph import validate
from inference.nlpca import init_network, param_count
from utils.errors import DataError, GraphValidationError


def sections(adjacency, n):
    return PartitionResult(assignment=np.arange(n), sections=[(i,) for i in range(n)], section_adjacency=adjacency)


def three_kinds(n):
    return {b: ["voltage", "p", "q"] for b in range(n)}


def test_two_adjacent_sections():
    blueprint = build_blueprint(sections({(0, 1): 1}, 2), three_kinds(2), DEFAULT_SIGMA)
    assert [v.dim for v in blueprint.variables] == [3, 3]
    assert len(blueprint.conditionals) == 6
    (joint,) = blueprint.joints
    assert (joint.dim, joint.latent_dim, joint.hidden_dim) == (6, 3, 6)
    assert joint.variables == ("s0", "s1")
    assert blueprint.variables[0].labels == ["bus0/voltage", "bus0/p", "bus0/q"]


def test_sections_in_a_line():
    blueprint = build_blueprint(sections({(0, 1): 1, (1, 2): 1}, 3), three_kinds(3), DEFAULT_SIGMA)
    assert [j.id for j in blueprint.joints] == ["j:s0-s1", "j:s1-s2"]


def test_triangle_keeps_two_joints():
    blueprint = build_blueprint(sections({(0, 1): 2, (0, 2): 1, (1, 2): 1}, 3), three_kinds(3), DEFAULT_SIGMA)
    assert [j.variables for j in blueprint.joints] == [("s0", "s1"), ("s0", "s2")]
    graph = instantiate(blueprint, {j.id: init_network(j.dim) for j in blueprint.joints})
    assert validate(graph).valid


def test_star_is_trimmed_to_joint_degree_two():
    adjacency = {(0, 1): 3, (0, 2): 2, (0, 3): 1, (0, 4): 1}
    blueprint = build_blueprint(sections(adjacency, 5), three_kinds(5), DEFAULT_SIGMA)
    assert [j.variables for j in blueprint.joints] == [("s0", "s1"), ("s0", "s2")]


def test_instantiate_checks_model_dims():
    blueprint = build_blueprint(sections({(0, 1): 1}, 2), three_kinds(2), DEFAULT_SIGMA)
    graph = instantiate(blueprint, {"j:s0-s1": init_network(6)})
    assert len(graph.factors) == 7
    with pytest.raises(GraphValidationError, match="j:s0-s1"):
        instantiate(blueprint, {"j:s0-s1": init_network(4)})
    with pytest.raises(GraphValidationError, match="No trained model"):
        instantiate(blueprint, {})
    assert len(instantiate(blueprint, allow_untrained=True).factors) == 6


def test_desk_scale_blueprint_validates():
    dataset = generate(30, 24, seed=0)
    parts = partition(dataset.topology, 3)
    blueprint = blueprint_from_dataset(parts, dataset)
    assert len(blueprint.variables) == parts.n_sections
    assert sum(v.dim for v in blueprint.variables) == len(dataset.columns)
    assert len(blueprint.conditionals) == len(dataset.columns)
    graph = instantiate(blueprint, {j.id: init_network(j.dim, seed=k) for k, j in enumerate(blueprint.joints)})
    assert validate(graph).valid
    assert blueprint_param_count(blueprint) < param_count(len(dataset.columns))


def test_blueprint_errors():
    with pytest.raises(DataError):
        build_blueprint(PartitionResult(np.array([], dtype=int), [], {}), {}, DEFAULT_SIGMA)
    with pytest.raises(DataError, match="no quantities"):
        build_blueprint(sections({}, 2), {0: ["p"]}, DEFAULT_SIGMA)
    with pytest.raises(DataError, match="Unknown quantity"):
        build_blueprint(sections({}, 1), {0: ["frequency"]}, DEFAULT_SIGMA)


def test_observations_follow_dataset_columns():
    dataset = generate(4, 24, seed=1)
    blueprint = blueprint_from_dataset(partition(dataset.topology, 1), dataset)
    cols = state_columns(blueprint, dataset)
    assert sorted(np.concatenate(list(cols.values())).tolist()) == list(range(len(dataset.columns)))
    observed = dataset.observed.copy()
    observed[5, 0] = False
    values, mask = sample_observations(blueprint, dataset, 5, observed)
    first = blueprint.conditionals[0]
    col = dataset.columns.index(first.column)
    assert values[first.id][0] == dataset.values[5, col]
    assert mask[first.id][0] == observed[5, col]
    assert len(values) == len(dataset.columns)
