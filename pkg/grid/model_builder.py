"""
Turns a partition and the metered quantities into a factor-graph blueprint,
and a blueprint plus trained decoders into a runnable FactorGraph.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from networkx.utils import UnionFind

from grid.datagen import KINDS, GridDataset
from grid.partitioner import PartitionResult
from inference.factor_graph import ConditionalFactor, FactorGraph, JointFactor, VariableNode, validate
from inference.nlpca import DecoderNetwork, default_dims, param_count
from utils.errors import DataError, GraphValidationError
from utils.logger import get_logger

logger = get_logger("ModelBuilder")


@dataclass(frozen=True)
class VariableSpec:
    id: str
    buses: tuple
    columns: tuple          # (bus, kind) per component
    mean: tuple | None = None

    @property
    def dim(self) -> int:
        return len(self.columns)

    @property
    def labels(self) -> list[str]:
        return [f"bus{b}/{k}" for b, k in self.columns]


@dataclass(frozen=True)
class ConditionalSpec:
    id: str
    variable: str
    component: int
    column: tuple
    sigma: float


@dataclass(frozen=True)
class JointSpec:
    id: str
    variables: tuple
    dim: int
    latent_dim: int
    hidden_dim: int
    weight: int = 1


@dataclass(frozen=True)
class ModelBlueprint:
    variables: tuple
    conditionals: tuple
    joints: tuple
    metadata: dict = field(default_factory=dict)

    def variable(self, variable_id: str) -> VariableSpec:
        for v in self.variables:
            if v.id == variable_id:
                return v
        raise DataError(f"Unknown variable '{variable_id}'")

    def joint_columns(self, joint: JointSpec) -> list[tuple]:
        return [c for vid in joint.variables for c in self.variable(vid).columns]


def variable_id(section: int) -> str:
    return f"s{section}"


def _select_joints(adjacency: Mapping[tuple, int]) -> list[tuple[int, int, int]]:
    """
    Maximum spanning tree over section adjacency (ties to the smaller id pair),
    then drop lowest-weight edges until every section has joint-degree ≤ 2.
    """
    candidates = sorted(((a, b, w) for (a, b), w in adjacency.items()), key=lambda e: (-e[2], e[0], e[1]))
    forest = UnionFind()
    tree = []
    for a, b, w in candidates:
        if forest[a] != forest[b]:
            forest.union(a, b)
            tree.append((a, b, w))
    degree: dict[int, int] = {}
    for a, b, _ in tree:
        degree[a] = degree.get(a, 0) + 1
        degree[b] = degree.get(b, 0) + 1
    kept = list(tree)
    for edge in sorted(tree, key=lambda e: (e[2], -e[0], -e[1])):
        a, b, _ = edge
        if degree[a] > 2 or degree[b] > 2:
            kept.remove(edge)
            degree[a] -= 1
            degree[b] -= 1
    return sorted(kept, key=lambda e: (e[0], e[1]))


def build_blueprint(partition: PartitionResult, quantities: Mapping[int, Sequence[str]],
                    noise: Mapping[str, float]) -> ModelBlueprint:
    """
    One variable per section, one identity conditional per metered series and
    NLPCA joint factors on a cycle-free subset of adjacent section pairs.

    Raises
    ------
    DataError
        On an empty partition or section, a bus without quantities, or an unknown kind.
    """
    if partition.n_sections == 0:
        raise DataError("Cannot build a model from an empty partition")
    variables, conditionals = [], []
    for sid, section in enumerate(partition.sections):
        if len(section) == 0:
            raise DataError(f"Section {sid} is empty")
        columns = []
        for bus in section:
            kinds = list(quantities.get(int(bus), ()))
            if not kinds:
                raise DataError(f"Bus {bus} has no quantities")
            for kind in kinds:
                if kind not in KINDS:
                    raise DataError(f"Unknown quantity kind '{kind}' at bus {bus}")
                if kind not in noise or noise[kind] <= 0:
                    raise DataError(f"No positive sensor noise for kind '{kind}'")
            columns.extend((int(bus), k) for k in KINDS if k in kinds)
        vid = variable_id(sid)
        variables.append(VariableSpec(vid, tuple(int(b) for b in section), tuple(columns)))
        conditionals.extend(ConditionalSpec(f"y:bus{b}/{k}", vid, i, (b, k), float(noise[k]))
                            for i, (b, k) in enumerate(columns))

    joints = []
    for a, b, w in _select_joints(partition.section_adjacency):
        d = variables[a].dim + variables[b].dim
        q, m = default_dims(d)
        joints.append(JointSpec(f"j:{variable_id(a)}-{variable_id(b)}", (variable_id(a), variable_id(b)),
                                d, q, m, int(w)))
    logger.info(f"Blueprint: {len(variables)} variables, {len(conditionals)} conditionals, {len(joints)} joints")
    return ModelBlueprint(tuple(variables), tuple(conditionals), tuple(joints))


def blueprint_from_dataset(partition: PartitionResult, dataset: GridDataset) -> ModelBlueprint:
    return build_blueprint(partition, dataset.quantities(), dataset.sigma)


def blueprint_param_count(blueprint: ModelBlueprint) -> int:
    """Decoder parameters summed over the joint factors."""
    return sum(param_count(j.dim) for j in blueprint.joints)


def with_means(blueprint: ModelBlueprint, means: Mapping[str, np.ndarray]) -> ModelBlueprint:
    variables = tuple(replace(v, mean=tuple(float(x) for x in means[v.id])) if v.id in means else v
                      for v in blueprint.variables)
    return replace(blueprint, variables=variables)


def instantiate(blueprint: ModelBlueprint, models: Mapping[str, DecoderNetwork] | None = None,
                allow_untrained: bool = False) -> FactorGraph:
    """
    Assemble and validate the factor graph.

    With ``allow_untrained`` joint factors without a model are left out.

    Raises
    ------
    GraphValidationError
        If a model's output dim differs from its joint's scope dim, a model is
        missing, or the assembled graph fails validation.
    """
    models = models or {}
    graph = FactorGraph(metadata=dict(blueprint.metadata))
    for v in blueprint.variables:
        graph.add_variable(VariableNode(v.id, v.dim, v.labels, v.mean))
    for c in blueprint.conditionals:
        graph.add_factor(ConditionalFactor(c.id, [(c.variable, [c.component])], [c.sigma ** 2],
                                           labels=[f"bus{c.column[0]}/{c.column[1]}"]))
    for j in blueprint.joints:
        net = models.get(j.id)
        if net is None:
            if allow_untrained:
                continue
            raise GraphValidationError(f"No trained model for joint factor {j.id}", [j.id])
        if net.d != j.dim:
            raise GraphValidationError(f"Joint factor {j.id}: model output dim {net.d} != scope dim {j.dim}",
                                       [j.id])
        graph.add_factor(JointFactor(j.id, j.variables, j.dim, net))
    validate(graph).raise_if_invalid()
    return graph


def sample_observations(blueprint: ModelBlueprint, dataset: GridDataset, row: int,
                        observed: np.ndarray | None = None) -> tuple[dict, dict]:
    """Observation values and availability for one hour, keyed by conditional factor id."""
    observed = dataset.observed if observed is None else observed
    index = {c: i for i, c in enumerate(dataset.columns)}
    values, mask = {}, {}
    for c in blueprint.conditionals:
        col = index.get(tuple(c.column))
        if col is None:
            raise DataError(f"Dataset has no series for {c.id}")
        values[c.id] = np.array([dataset.values[row, col]])
        mask[c.id] = np.array([bool(observed[row, col])])
    return values, mask


def state_columns(blueprint: ModelBlueprint, dataset: GridDataset) -> dict[str, np.ndarray]:
    """Dataset column index of every component, per variable."""
    index = {c: i for i, c in enumerate(dataset.columns)}
    try:
        return {v.id: np.array([index[tuple(c)] for c in v.columns]) for v in blueprint.variables}
    except KeyError as e:
        raise DataError(f"Dataset has no series for component {e.args[0]}")
