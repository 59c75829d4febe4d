# tools/graph_tool.py
import json
import re
from pathlib import Path

import numpy as np

from grid.model_builder import ConditionalSpec, JointSpec, ModelBlueprint, VariableSpec
from inference.nlpca import DecoderNetwork
from utils.config import SCHEMA_VERSION
from utils.errors import DataError
from utils.logger import get_logger

MODEL_FORMAT = "nlpca/1"
LABEL = re.compile(r"^bus(\d+)/(\w+)$")


def _parse_label(label: str) -> tuple:
    match = LABEL.match(label)
    if not match:
        raise DataError(f"Malformed component label '{label}' (expected bus<N>/<kind>)")
    return int(match.group(1)), match.group(2)


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f"File not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"Malformed JSON in {path}: {e}")


def _write_json(document: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


class GraphTool:
    """
    Graph documents (blueprint + model references) and NLPCA model documents.
    """
    @staticmethod
    def blueprint_document(blueprint: ModelBlueprint, models: dict | None = None) -> dict:
        models = models or {}
        return {
            "schema_version": SCHEMA_VERSION,
            "variables": [{"id": v.id, "dim": v.dim, "buses": list(v.buses), "labels": v.labels,
                           "mean": None if v.mean is None else list(v.mean)} for v in blueprint.variables],
            "conditionals": [{"id": c.id, "variable": c.variable, "components": [c.component],
                              "labels": [f"bus{c.column[0]}/{c.column[1]}"], "sigma": c.sigma}
                             for c in blueprint.conditionals],
            "joints": [{"id": j.id, "variables": list(j.variables), "dim": j.dim, "latent_dim": j.latent_dim,
                        "hidden_dim": j.hidden_dim, "weight": j.weight, "model": models.get(j.id)}
                       for j in blueprint.joints],
            "edges": [[c.id, c.variable] for c in blueprint.conditionals]
                     + [[j.id, v] for j in blueprint.joints for v in j.variables],
            "metadata": dict(blueprint.metadata),
        }

    @staticmethod
    def save_graph(blueprint: ModelBlueprint, path, models: dict | None = None) -> Path:
        """Write the graph document; ``models`` maps joint ids to model paths relative to it."""
        logger = get_logger("GraphTool")
        path = _write_json(GraphTool.blueprint_document(blueprint, models), path)
        logger.info(f"Saved graph document to {path}")
        return path

    @staticmethod
    def load_graph(path) -> tuple[ModelBlueprint, dict]:
        """
        Returns the blueprint and the joint id → model path (or None) references.

        Raises
        ------
        DataError
            On an unsupported schema version or a malformed entry.
        """
        doc = _read_json(path)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
        try:
            variables = tuple(
                VariableSpec(v["id"], tuple(v.get("buses", [])), tuple(_parse_label(s) for s in v["labels"]),
                             None if v.get("mean") is None else tuple(float(x) for x in v["mean"]))
                for v in doc["variables"])
            for v, raw in zip(variables, doc["variables"]):
                if v.dim != raw["dim"]:
                    raise DataError(f"{path}: variable {v.id} lists {v.dim} labels for dim {raw['dim']}")
            conditionals = tuple(
                ConditionalSpec(c["id"], c["variable"], int(c["components"][0]), _parse_label(c["labels"][0]),
                                float(c["sigma"]))
                for c in doc["conditionals"])
            joints = tuple(
                JointSpec(j["id"], tuple(j["variables"]), int(j["dim"]), int(j["latent_dim"]),
                          int(j["hidden_dim"]), int(j.get("weight", 1)))
                for j in doc["joints"])
            refs = {j["id"]: j.get("model") for j in doc["joints"]}
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise DataError(f"{path}: malformed graph document ({e!r})")
        return ModelBlueprint(variables, conditionals, joints, doc.get("metadata", {})), refs

    @staticmethod
    def save_model(net: DecoderNetwork, path) -> Path:
        R = np.diag(net.R) if np.count_nonzero(net.R - np.diag(np.diag(net.R))) == 0 else net.R
        return _write_json({
            "format": MODEL_FORMAT,
            "dims": {"d": net.d, "q": net.q, "m": net.m},
            "W1": net.W1.tolist(), "b1": net.b1.tolist(), "W2": net.W2.tolist(), "b2": net.b2.tolist(),
            "R": R.tolist(), "offset": net.offset.tolist(), "scale": net.scale.tolist(),
            "latent_codes": None if net.latent_codes is None else net.latent_codes.tolist(),
            "training": net.training,
        }, path)

    @staticmethod
    def load_model(path) -> DecoderNetwork:
        doc = _read_json(path)
        if doc.get("format") != MODEL_FORMAT:
            raise DataError(f"{path}: not an {MODEL_FORMAT} model document")
        try:
            return DecoderNetwork(W1=doc["W1"], b1=doc["b1"], W2=doc["W2"], b2=doc["b2"], R=doc["R"],
                                  offset=doc["offset"], scale=doc["scale"], latent_codes=doc.get("latent_codes"),
                                  training=doc.get("training", {}))
        except (KeyError, ValueError) as e:
            raise DataError(f"{path}: malformed model document ({e})")

    @staticmethod
    def save_trained(blueprint: ModelBlueprint, models: dict, path) -> Path:
        """Write each model next to the graph document and reference it by relative path."""
        path = Path(path)
        refs = {}
        for joint in blueprint.joints:
            name = f"{path.stem}.{joint.id.replace(':', '_')}.nlpca.json"
            GraphTool.save_model(models[joint.id], path.parent / name)
            refs[joint.id] = name
        return GraphTool.save_graph(blueprint, path, refs)

    @staticmethod
    def load_trained(path) -> tuple[ModelBlueprint, dict]:
        blueprint, refs = GraphTool.load_graph(path)
        untrained = [jid for jid, ref in refs.items() if ref is None]
        if untrained:
            raise DataError(f"{path}: joint factors {untrained} have no trained model; run `train` first")
        base = Path(path).parent
        return blueprint, {jid: GraphTool.load_model(base / ref) for jid, ref in refs.items()}

# End of tools/graph_tool.py
