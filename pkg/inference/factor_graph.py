"""
Factor-graph model and Gaussian belief propagation on trees.

Factors are relinearized at the current estimate x̄, one two-sweep pass of
sum-product messages is run over the forest, and every variable is moved by
the resulting Gauss-Newton increment. The loop repeats until the increment
vanishes.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import networkx as nx
import numpy as np

from graph_kit import Message, Node
from inference import nlpca
from inference.gaussian_core import (CanonicalGaussian, IdentityMap, LinearizationPoint, as_map, combine,
                                     linearize_conditional, linearize_joint, safe_inverse)
from utils.errors import (GraphValidationError, InvertibilityError, NumericalError, ObservabilityError,
                          SchedulingError)
from utils.logger import get_logger
from utils.telemetry import get_tracer

logger = get_logger("FactorGraph")
tracer = get_tracer("factor_graph")

JOINT_DEGREE_LIMIT = 2


class VariableNode(Node):
    """State sub-vector of one grid section (or any block of the state)."""
    kind = "variable"

    def __init__(self, id: str, dim: int, labels: Sequence[str] | None = None, mean=None):
        super().__init__(id)
        self.dim = int(dim)
        self.labels = list(labels) if labels is not None else [f"{id}[{i}]" for i in range(self.dim)]
        self.mean = np.zeros(self.dim) if mean is None else np.asarray(mean, dtype=float).ravel()
        self.estimate = self.mean.copy()
        self.covariance = np.zeros((self.dim, self.dim))

    def process(self, inbox, target, **context) -> Message:
        payloads = [m.payload for source, m in inbox.items() if source != target]
        return Message(self.id, target, combine(payloads, self.dim))


class ConditionalFactor(Node):
    """
    Observation factor p(y | x): y = f(x) + ν with ν ~ N(0, R).

    ``scope`` lists (variable id, component indices); the mapping acts on the
    concatenation of those components. Unavailable observation components are
    dropped together with their rows of F and R.
    """
    kind = "conditional"

    def __init__(self, id: str, scope: Sequence[tuple[str, Sequence[int]]], noise,
                 observation=None, available=None, mapping=None, labels: Sequence[str] | None = None):
        super().__init__(id)
        self.scope = [(str(v), [int(i) for i in idx]) for v, idx in scope]
        self.mapping = IdentityMap() if mapping is None else as_map(mapping)
        R = np.asarray(noise, dtype=float)
        self.noise = np.diag(np.atleast_1d(R)) if R.ndim <= 1 else R
        out = self.noise.shape[0]
        self.observation = np.full(out, np.nan) if observation is None else np.atleast_1d(
            np.asarray(observation, dtype=float)).copy()
        if available is None:
            available = np.isfinite(self.observation)
        self.available = np.asarray(available, dtype=bool).ravel().copy()
        self.labels = list(labels) if labels is not None else [f"{id}[{i}]" for i in range(out)]

    @property
    def variable_ids(self) -> list[str]:
        seen = []
        for v, _ in self.scope:
            if v not in seen:
                seen.append(v)
        return seen

    @property
    def scope_dim(self) -> int:
        return sum(len(idx) for _, idx in self.scope)

    @property
    def output_dim(self) -> int:
        return self.noise.shape[0]

    def with_observation(self, y, available=None) -> "ConditionalFactor":
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return ConditionalFactor(self.id, self.scope, self.noise, y,
                                 np.isfinite(y) if available is None else np.asarray(available, bool) & np.isfinite(y),
                                 self.mapping, self.labels)

    def linearize(self, x_scope: np.ndarray) -> CanonicalGaussian:
        rows = np.flatnonzero(self.available)
        if rows.size == 0:
            return CanonicalGaussian.zeros(x_scope.size)
        mapping = self.mapping

        class _Rows:
            def __call__(self, x):
                return np.atleast_1d(mapping(x))[rows]

            def jacobian(self, x):
                return np.atleast_2d(mapping.jacobian(x))[rows]

        return linearize_conditional(_Rows(), self.noise[np.ix_(rows, rows)], self.observation[rows],
                                     LinearizationPoint(x_scope), label=f"R of {self.id}")

    def process(self, inbox, target, linearized=None, **context) -> Message:
        incoming = {k: m.payload for k, m in inbox.items() if k != target}
        return Message(self.id, target, _factor_to_var(linearized, self.id, target, incoming))


class ReconstructionResidual:
    """e(x) = x − g(x) for an NLPCA model, with Jacobian I − G; caches the last evaluation."""

    def __init__(self, net: nlpca.DecoderNetwork, observed: np.ndarray, z0=None, inversion: dict | None = None):
        self.net = net
        self.observed = observed
        self.z0 = z0
        self.inversion = inversion or {}
        self._x = None
        self.terms: nlpca.FactorTerms | None = None

    def _at(self, x) -> nlpca.FactorTerms:
        x = np.asarray(x, dtype=float)
        if self._x is None or not np.array_equal(self._x, x):
            self.terms = nlpca.factor_terms(self.net, x, self.observed, z0=self.z0, **self.inversion)
            self._x = x.copy()
        return self.terms

    def __call__(self, x):
        return np.asarray(x, dtype=float) - self._at(x).reconstruction

    def jacobian(self, x):
        return np.eye(len(x)) - self._at(x).jacobian


class JointFactor(Node):
    """
    Learned joint density over the concatenated states of neighbouring sections.

    The NLPCA reconstruction residual e(x) = x − g(x) is treated as a zero-valued
    pseudo-measurement with covariance S_k = Σ_out.
    """
    kind = "joint"

    def __init__(self, id: str, variables: Sequence[str], dim: int, model: nlpca.DecoderNetwork | None = None):
        super().__init__(id)
        self.variables = [str(v) for v in variables]
        self.dim = int(dim)
        self.model = model
        self.covariance: np.ndarray | None = None
        self.code: np.ndarray | None = None

    @property
    def variable_ids(self) -> list[str]:
        return list(self.variables)

    def copy(self) -> "JointFactor":
        clone = JointFactor(self.id, self.variables, self.dim, self.model)
        clone.covariance = self.covariance
        clone.code = self.code
        return clone

    def linearize(self, x: np.ndarray, observed: np.ndarray, inversion: dict | None = None) -> CanonicalGaussian:
        if self.model is None:
            raise NumericalError(f"Joint factor {self.id} has no trained model")
        if not np.any(observed):
            observed = np.ones_like(observed, dtype=bool)
        residual = ReconstructionResidual(self.model, observed, z0=self.code, inversion=inversion)
        point = LinearizationPoint(x)
        residual(point.x)
        terms = residual.terms
        self.covariance = terms.covariance
        self.code = terms.code.z
        return linearize_joint(residual, terms.covariance, point, target=np.zeros(self.dim),
                               label=f"S of {self.id}")

    def process(self, inbox, target, linearized=None, **context) -> Message:
        incoming = {k: m.payload for k, m in inbox.items() if k != target}
        return Message(self.id, target, _factor_to_var(linearized, self.id, target, incoming))


Factor = ConditionalFactor | JointFactor


@dataclass(frozen=True)
class LinearizedFactor:
    """A factor's canonical Gaussian laid out over the full dims of its variables."""
    factor_id: str
    variables: list
    offsets: dict
    dims: dict
    gaussian: CanonicalGaussian

    def indices(self, variable_id: str) -> np.ndarray:
        start = self.offsets[variable_id]
        return np.arange(start, start + self.dims[variable_id])


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid

    def raise_if_invalid(self):
        if self.violations:
            raise GraphValidationError("Invalid factor graph: " + "; ".join(self.violations), self.violations)


class FactorGraph:
    """Variables, factors and the bipartite adjacency implied by factor scopes."""

    def __init__(self, variables: Sequence[VariableNode] = (), factors: Sequence[Factor] = (),
                 metadata: dict | None = None):
        self.variables: dict[str, VariableNode] = {}
        self.factors: dict[str, Factor] = {}
        self.metadata = dict(metadata or {})
        self._factors_of: dict[str, list[str]] = {}
        for v in variables:
            self.add_variable(v)
        for f in factors:
            self.add_factor(f)

    def add_variable(self, variable: VariableNode) -> None:
        if variable.id in self.variables or variable.id in self.factors:
            raise GraphValidationError(f"Duplicate node id '{variable.id}'")
        self.variables[variable.id] = variable
        self._factors_of.setdefault(variable.id, [])

    def add_factor(self, factor: Factor) -> None:
        if factor.id in self.variables or factor.id in self.factors:
            raise GraphValidationError(f"Duplicate node id '{factor.id}'")
        self.factors[factor.id] = factor
        for vid in factor.variable_ids:
            self._factors_of.setdefault(vid, []).append(factor.id)

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(fid, vid) for fid, f in self.factors.items() for vid in f.variable_ids]

    def neighbors(self, node_id: str) -> list[str]:
        if node_id in self.factors:
            return self.factors[node_id].variable_ids
        return list(self._factors_of.get(node_id, ()))

    def joint_factors_of(self, variable_id: str) -> list[str]:
        return [fid for fid in self.neighbors(variable_id) if isinstance(self.factors[fid], JointFactor)]

    def to_networkx(self) -> nx.MultiGraph:
        G = nx.MultiGraph()
        G.add_nodes_from(self.variables, bipartite=0)
        G.add_nodes_from(self.factors, bipartite=1)
        G.add_edges_from(self.edges)
        return G

    def node(self, node_id: str) -> Node:
        return self.variables.get(node_id) or self.factors[node_id]

    def copy_with_observations(self, observations: Mapping[str, np.ndarray] | None = None,
                          mask: Mapping[str, np.ndarray] | None = None) -> "FactorGraph":
        """Copy of the graph carrying one sample's observations; the template is left untouched."""
        observations = observations or {}
        mask = mask or {}
        variables = []
        for v in self.variables.values():
            clone = VariableNode(v.id, v.dim, v.labels, v.mean)
            variables.append(clone)
        factors = []
        for f in self.factors.values():
            if isinstance(f, ConditionalFactor) and f.id in observations:
                factors.append(f.with_observation(observations[f.id], mask.get(f.id)))
            elif isinstance(f, ConditionalFactor):
                factors.append(f.with_observation(f.observation, f.available))
            else:
                factors.append(f.copy())
        return FactorGraph(variables, factors, self.metadata)


def validate(graph: FactorGraph) -> ValidationReport:
    """Check edge endpoints, dimensions, acyclicity and the joint-degree bound."""
    report = ValidationReport()
    for fid, f in graph.factors.items():
        for vid in f.variable_ids:
            if vid not in graph.variables:
                report.violations.append(f"factor {fid} references missing variable {vid}")
    if report.violations:
        return report

    for vid, v in graph.variables.items():
        if v.dim < 1:
            report.violations.append(f"variable {vid} has dim {v.dim}")
        if len(v.labels) != v.dim:
            report.violations.append(f"variable {vid} has {len(v.labels)} labels for dim {v.dim}")

    for fid, f in graph.factors.items():
        if isinstance(f, ConditionalFactor):
            for vid, idx in f.scope:
                if any(i < 0 or i >= graph.variables[vid].dim for i in idx):
                    report.violations.append(f"factor {fid} indexes outside variable {vid}")
            if f.observation.size != f.output_dim:
                report.violations.append(f"factor {fid} observation dim {f.observation.size} != noise dim {f.output_dim}")
            elif all(0 <= i < graph.variables[vid].dim for vid, idx in f.scope for i in idx):
                try:
                    out = np.atleast_1d(f.mapping(np.zeros(f.scope_dim)))
                    if out.size != f.output_dim:
                        report.violations.append(f"factor {fid} mapping output dim {out.size} != observation dim "
                                                 f"{f.output_dim}")
                except (ValueError, IndexError) as e:
                    report.violations.append(f"factor {fid} mapping cannot be evaluated: {e}")
        else:
            scope_dim = sum(graph.variables[v].dim for v in f.variables)
            if scope_dim != f.dim:
                report.violations.append(f"joint factor {fid} dim {f.dim} != scope dim {scope_dim}")
            if f.model is not None and f.model.d != f.dim:
                report.violations.append(f"joint factor {fid} decoder output dim {f.model.d} != scope dim {f.dim}")

    for vid in graph.variables:
        if len(graph.joint_factors_of(vid)) > JOINT_DEGREE_LIMIT:
            report.violations.append(f"variable {vid}: joint-degree > {JOINT_DEGREE_LIMIT}")

    if not _is_forest(graph):
        report.violations.append("graph contains a cycle")
    return report


def _is_forest(graph: FactorGraph) -> bool:
    G = graph.to_networkx()
    simple = nx.Graph(G)
    if G.number_of_edges() != simple.number_of_edges():
        return False
    return simple.number_of_nodes() == 0 or nx.is_forest(simple)


def schedule(graph: FactorGraph) -> list[tuple[str, str]]:
    """
    Two-sweep message order: leaves towards a root, then back out, per tree.

    Raises
    ------
    SchedulingError
        If the graph has a cycle.
    """
    if not _is_forest(graph):
        raise SchedulingError("Cannot schedule messages: graph contains a cycle")
    simple = nx.Graph(graph.to_networkx())
    order: list[tuple[str, str]] = []
    for component in sorted(nx.connected_components(simple), key=lambda c: min(c)):
        if len(component) < 2:
            continue
        candidates = sorted(n for n in component if n in graph.variables) or sorted(component)
        root = candidates[0]
        inward = [(child, parent) for parent, child in nx.bfs_edges(simple, root)]
        inward.reverse()
        order.extend(inward)
        order.extend((parent, child) for parent, child in nx.bfs_edges(simple, root))
    return order


def schedule_levels(graph: FactorGraph) -> list[list[tuple[str, str]]]:
    """Group the schedule into levels whose messages depend only on earlier levels."""
    level: dict[tuple[str, str], int] = {}
    for source, target in schedule(graph):
        prereqs = [level[(k, source)] for k in graph.neighbors(source) if k != target]
        level[(source, target)] = 1 + max(prereqs, default=0)
    grouped: dict[int, list] = {}
    for edge, lvl in level.items():
        grouped.setdefault(lvl, []).append(edge)
    return [grouped[k] for k in sorted(grouped)]


def observed_components(graph: FactorGraph) -> dict[str, np.ndarray]:
    """Components of each variable touched by at least one available observation."""
    observed = {vid: np.zeros(v.dim, dtype=bool) for vid, v in graph.variables.items()}
    for f in graph.factors.values():
        if isinstance(f, ConditionalFactor) and np.any(f.available):
            F = np.atleast_2d(f.mapping.jacobian(np.zeros(f.scope_dim)))[f.available]
            active = np.any(F != 0, axis=0)
            pos = 0
            for vid, idx in f.scope:
                observed[vid][idx] |= active[pos:pos + len(idx)]
                pos += len(idx)
    return observed


def initial_point(graph: FactorGraph) -> dict[str, np.ndarray]:
    """Observed components start at their observations, the rest at the stored training mean."""
    points = {vid: v.mean.copy() for vid, v in graph.variables.items()}
    for f in graph.factors.values():
        if isinstance(f, ConditionalFactor) and isinstance(f.mapping, IdentityMap):
            pos = 0
            for vid, idx in f.scope:
                for k, comp in enumerate(idx):
                    if f.available[pos + k]:
                        points[vid][comp] = f.observation[pos + k]
                pos += len(idx)
    return points


def _layout(graph: FactorGraph, variable_ids: Sequence[str]):
    offsets, dims, pos = {}, {}, 0
    for vid in variable_ids:
        offsets[vid] = pos
        dims[vid] = graph.variables[vid].dim
        pos += dims[vid]
    return offsets, dims, pos


def linearize_factor(graph: FactorGraph, factor_id: str, points: Mapping[str, np.ndarray],
                     observed: Mapping[str, np.ndarray] | None = None,
                     inversion: dict | None = None) -> LinearizedFactor:
    f = graph.factors[factor_id]
    variable_ids = f.variable_ids
    offsets, dims, total = _layout(graph, variable_ids)
    if isinstance(f, ConditionalFactor):
        x_scope = np.concatenate([np.asarray(points[v])[idx] for v, idx in f.scope])
        local = f.linearize(x_scope)
        positions = np.concatenate([offsets[v] + np.asarray(idx, dtype=int) for v, idx in f.scope])
        J = np.zeros((total, total))
        h = np.zeros(total)
        np.add.at(J, (positions[:, None], positions[None, :]), local.J)
        np.add.at(h, positions, local.h)
        gaussian = CanonicalGaussian(J, h)
    else:
        x = np.concatenate([np.asarray(points[v]) for v in variable_ids])
        observed = observed or observed_components(graph)
        mask = np.concatenate([observed[v] for v in variable_ids])
        gaussian = f.linearize(x, mask, inversion)
    return LinearizedFactor(factor_id, variable_ids, offsets, dims, gaussian)


def linearize_all(graph: FactorGraph, points: Mapping[str, np.ndarray], inversion: dict | None = None,
                  threads: int = 1) -> dict[str, LinearizedFactor]:
    observed = observed_components(graph)
    ids = list(graph.factors)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = pool.map(lambda fid: linearize_factor(graph, fid, points, observed, inversion), ids)
            return dict(zip(ids, done))
    return {fid: linearize_factor(graph, fid, points, observed, inversion) for fid in ids}


def message_var_to_factor(graph: FactorGraph, i: str, j: str, messages: Mapping) -> Message:
    """h and J are the sums of the messages from every other factor of x_i."""
    inbox = {}
    for k in graph.neighbors(i):
        if k == j:
            continue
        if (k, i) not in messages:
            raise SchedulingError(f"Message {k}->{i} needed for {i}->{j} has not been computed")
        inbox[k] = messages[(k, i)]
    return graph.variables[i].process(inbox, j)


def _factor_to_var(lf: LinearizedFactor, factor_id: str, i: str, incoming: Mapping[str, CanonicalGaussian]):
    J = lf.gaussian.J.copy()
    h = lf.gaussian.h.copy()
    others = [k for k in lf.variables if k != i]
    for k in others:
        idx = lf.indices(k)
        J[np.ix_(idx, idx)] += incoming[k].J
        h[idx] += incoming[k].h
    ii = lf.indices(i)
    if not others:
        return CanonicalGaussian(J[np.ix_(ii, ii)], h[ii])
    oo = np.concatenate([lf.indices(k) for k in others])
    B = J[np.ix_(oo, oo)]
    C = J[np.ix_(ii, oo)]
    # Components with no precision and no coupling are independent of x_i.
    active = np.any(B != 0, axis=1) | np.any(C != 0, axis=0)
    if not np.any(active):
        return CanonicalGaussian(J[np.ix_(ii, ii)], h[ii])
    B = B[np.ix_(active, active)]
    C = C[:, active]
    B_inv = safe_inverse(B, label=f"block (J_x->{factor_id} + J_{factor_id}^kk) for {others}")
    J_msg = J[np.ix_(ii, ii)] - C @ B_inv @ C.T
    h_msg = h[ii] - C @ B_inv @ h[oo][active]
    return CanonicalGaussian(J_msg, h_msg)


def message_factor_to_var(graph: FactorGraph, j: str, i: str, messages: Mapping,
                          linearized: Mapping[str, LinearizedFactor]) -> Message:
    """
    Marginalize the factor's other variables (Schur complement) after absorbing their messages.

    Raises
    ------
    SchedulingError
        If a required variable-to-factor message is missing.
    InvertibilityError
        If the block to be marginalized is singular after regularization.
    """
    if j not in linearized:
        raise SchedulingError(f"Factor {j} has not been linearized")
    inbox = {}
    for k in graph.neighbors(j):
        if k == i:
            continue
        if (k, j) not in messages:
            raise SchedulingError(f"Message {k}->{j} needed for {j}->{i} has not been computed")
        inbox[k] = messages[(k, j)]
    return graph.factors[j].process(inbox, i, linearized=linearized[j])


def sweep(graph: FactorGraph, linearized: Mapping[str, LinearizedFactor], threads: int = 1) -> dict:
    """Compute every message of the schedule once."""
    messages: dict[tuple[str, str], Message] = {}

    def compute(edge):
        source, target = edge
        if source in graph.variables:
            return message_var_to_factor(graph, source, target, messages)
        return message_factor_to_var(graph, source, target, messages, linearized)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for level in schedule_levels(graph):
                for edge, message in zip(level, pool.map(compute, level)):
                    messages[edge] = message
    else:
        for edge in schedule(graph):
            messages[edge] = compute(edge)
    return messages


def update_estimates(graph: FactorGraph, messages: Mapping) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """
    δx_i = (Σ J_{f→x_i})⁻¹ Σ h_{f→x_i} and S_{x_i} = (Σ J_{f→x_i})⁻¹ for every variable.

    Raises
    ------
    ObservabilityError
        Listing every variable whose total precision is singular.
    """
    updates, unobservable = {}, []
    for vid, v in graph.variables.items():
        total = combine([messages[(fid, vid)].payload for fid in graph.neighbors(vid) if (fid, vid) in messages],
                        v.dim)
        if np.any(np.diag(total.J) <= 0.0):
            unobservable.append(vid)
            continue
        try:
            cov = safe_inverse(total.J, label=f"total precision of {vid}")
        except InvertibilityError:
            unobservable.append(vid)
            continue
        updates[vid] = (cov @ total.h, cov)
    if unobservable:
        raise ObservabilityError(f"Unobservable variables (zero total precision): {unobservable}", unobservable)
    return updates


@dataclass
class InferenceResult:
    estimates: dict
    covariances: dict
    converged: bool
    iterations: int
    residual: float
    trace: list = field(default_factory=list)


def run_inference(graph: FactorGraph, observations: Mapping[str, np.ndarray] | None = None,
                  mask: Mapping[str, np.ndarray] | None = None, max_outer: int = 20, tol: float = 1e-6,
                  damping: float = 1.0, inversion: dict | None = None, threads: int = 1,
                  initial: Mapping[str, np.ndarray] | None = None) -> InferenceResult:
    """
    Relinearize, sweep and update until max‖δx‖∞ < tol or ``max_outer`` updates were made.

    ``observations``/``mask`` are keyed by conditional factor id and bound on a copy
    of the graph. The final relinearization that confirms convergence is not
    counted as an iteration. Non-convergence is reported, not raised.
    """
    if not 0.1 <= damping <= 1.0:
        raise ValueError(f"damping must lie in [0.1, 1.0], got {damping}")
    bound = graph.copy_with_observations(observations, mask) if observations is not None or mask is not None else \
        graph.copy_with_observations()
    if not any(np.any(f.available) for f in bound.factors.values() if isinstance(f, ConditionalFactor)):
        raise ObservabilityError("No observed component: inference needs partially observed data",
                                 list(bound.variables))
    points = initial_point(bound)
    if initial:
        for vid, x in initial.items():
            points[vid] = np.asarray(x, dtype=float).copy()

    trace, iterations, converged, residual = [], 0, False, float("inf")
    covariances: dict = {}
    with tracer.start_as_current_span("run_inference"):
        while True:
            linearized = linearize_all(bound, points, inversion, threads)
            messages = sweep(bound, linearized, threads)
            updates = update_estimates(bound, messages)
            residual = max((float(np.max(np.abs(d))) for d, _ in updates.values()), default=0.0)
            trace.append(residual)
            covariances = {vid: cov for vid, (_, cov) in updates.items()}
            if residual < tol:
                for vid, (delta, _) in updates.items():
                    points[vid] = points[vid] + delta
                converged = True
                break
            if iterations >= max_outer:
                break
            for vid, (delta, _) in updates.items():
                points[vid] = points[vid] + damping * delta
            iterations += 1
            logger.debug(f"outer iteration {iterations}: max|dx|={residual:.3e}")
    for vid, v in bound.variables.items():
        v.estimate = points[vid]
        v.covariance = covariances[vid]
    if not converged:
        logger.warning(f"Inference stopped after {iterations} iterations without converging "
                       f"(max|dx|={residual:.3e})")
    return InferenceResult(estimates=points, covariances=covariances, converged=converged,
                           iterations=iterations, residual=residual, trace=trace)
