"""
Parameter and ensemble checkpoints.

A parameter file is JSON:

    {"format": "rfgnn-params", "version": 1,
     "params": {name: {"shape": [r, c], "values": [...row-major...]}}}

Python's float repr round-trips float64 exactly, so a reloaded model
predicts bit-for-bit what the saved one did. An ensemble directory holds
ensemble.json (config, variant, dimensions, explicit branch specs) and one
branch_<i>.json parameter file per branch.
"""
import json
import logging
import re
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from pydantic import ValidationError

from rfgnn.config import CHECKPOINT_VERSION, ENSEMBLE_FILE
from rfgnn.models import BranchSpecRecord, EnsembleManifest
from rfgnn.services.backbones import BackboneParams, FCNParams, HeadParams, LayerParams
from rfgnn.services.ensemble import BranchModel, BranchSpec, EnsembleModel
from rfgnn.services.graphstore import MultiRelationGraph
from rfgnn.services.numkit import ParamTensor

logger = logging.getLogger(__name__)

PARAMS_FORMAT = "rfgnn-params"
ENSEMBLE_FORMAT = "rfgnn-ensemble"

_LAYER_NAME = re.compile(r"^backbone\.(\d+)\.(rel(\d+)|self)$")


class CheckpointError(Exception):
    """Custom exception for checkpoint errors"""
    pass


def branch_file(index: int) -> str:
    return f"branch_{index}.json"


def save_params(path, params: Dict[str, ParamTensor], meta: Optional[dict] = None):
    payload = {
        "format": PARAMS_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {"shape": list(p.shape), "values": [float(v) for v in p.value.reshape(-1)]}
            for name, p in params.items()
        },
    }
    if meta is not None:
        payload["meta"] = meta
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: invalid JSON: {e.msg}")


def load_params(path) -> Dict[str, np.ndarray]:
    """
    Read a parameter file.

    Raises:
        CheckpointError: unknown format or version, or values that do not fill the shape
    """
    path = Path(path)
    raw = _read_json(path)
    if raw.get("format") != PARAMS_FORMAT:
        raise CheckpointError(f"{path}: not a parameter file (format={raw.get('format')!r})")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {raw.get('version')}")

    out = {}
    for name, entry in raw.get("params", {}).items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if len(shape) != 2 or values.size != shape[0] * shape[1]:
            raise CheckpointError(f"{path}: parameter '{name}' has {values.size} values for shape {shape}")
        out[name] = values.reshape(shape)
    return out


def _params_meta(path) -> dict:
    return _read_json(Path(path)).get("meta", {})


def _spec_record(spec: BranchSpec) -> BranchSpecRecord:
    return BranchSpecRecord(
        index=spec.index,
        seed=spec.seed,
        aligned=spec.aligned,
        sampled_nodes=[int(v) for v in spec.sampled_nodes],
        selected_features=[int(v) for v in spec.selected_features],
        remaining_features=[int(v) for v in spec.remaining_features],
        kept_edges=[[[int(a), int(b)] for a, b in e] for e in spec.kept_edges],
    )


def _spec_from_record(record: BranchSpecRecord) -> BranchSpec:
    return BranchSpec(
        index=record.index,
        seed=record.seed,
        sampled_nodes=np.asarray(record.sampled_nodes, dtype=np.int64),
        selected_features=np.asarray(record.selected_features, dtype=np.int64),
        remaining_features=np.asarray(record.remaining_features, dtype=np.int64),
        kept_edges=tuple(np.asarray(e, dtype=np.int64).reshape(-1, 2) for e in record.kept_edges),
        aligned=record.aligned,
    )


def _model_from_arrays(arrays: Dict[str, np.ndarray], ensemble_cfg, path) -> BranchModel:
    layers: Dict[int, Dict] = {}
    for name, value in arrays.items():
        match = _LAYER_NAME.match(name)
        if not match:
            continue
        li = int(match.group(1))
        entry = layers.setdefault(li, {"rel": {}, "self": None})
        tensor = ParamTensor(name, value)
        if match.group(3) is not None:
            entry["rel"][int(match.group(3))] = tensor
        else:
            entry["self"] = tensor
    if not layers or sorted(layers) != list(range(len(layers))):
        raise CheckpointError(f"{path}: backbone layers missing or not contiguous")

    def take(name: str) -> ParamTensor:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter '{name}'")
        return ParamTensor(name, arrays[name])

    backbone = BackboneParams(
        kind=ensemble_cfg.backbone.kind,
        layers=[
            LayerParams([layers[li]["rel"][k] for k in sorted(layers[li]["rel"])], layers[li]["self"])
            for li in range(len(layers))
        ],
        sgc_power=ensemble_cfg.backbone.sgc_power,
    )
    fcn = None
    if "fcn.w1" in arrays:
        fcn = FCNParams(take("fcn.w1"), take("fcn.b1"), take("fcn.w2"), take("fcn.b2"))
    head = HeadParams(take("head.w"), take("head.b"))
    return BranchModel(backbone=backbone, head=head, fcn=fcn)


def save_ensemble(directory, ensemble: EnsembleModel) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = EnsembleManifest(
        format=ENSEMBLE_FORMAT,
        version=CHECKPOINT_VERSION,
        variant=ensemble.variant,
        config=ensemble.config,
        num_nodes=ensemble.num_nodes,
        num_features=ensemble.num_features,
        num_relations=ensemble.num_relations,
        num_classes=ensemble.num_classes,
        branches=[_spec_record(spec) for spec, _ in ensemble.branches],
    )
    (directory / ENSEMBLE_FILE).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    for spec, model in ensemble.branches:
        meta = {"history": [float(v) for v in model.history], "best_epoch": model.best_epoch}
        save_params(directory / branch_file(spec.index), model.parameters(), meta=meta)
    logger.info("Saved ensemble checkpoint: dir=%s branches=%d", directory, ensemble.size)
    return directory


def load_ensemble(directory) -> EnsembleModel:
    directory = Path(directory)
    path = directory / ENSEMBLE_FILE
    raw = _read_json(path)
    if raw.get("format") != ENSEMBLE_FORMAT:
        raise CheckpointError(f"{path}: not an ensemble checkpoint (format={raw.get('format')!r})")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {raw.get('version')}")
    try:
        manifest = EnsembleManifest.model_validate(raw)
    except ValidationError as e:
        raise CheckpointError(f"{path}: invalid ensemble manifest: {e}")

    branches = []
    for record in manifest.branches:
        params_path = directory / branch_file(record.index)
        model = _model_from_arrays(load_params(params_path), manifest.config, params_path)
        meta = _params_meta(params_path)
        model.history = list(meta.get("history", []))
        model.best_epoch = meta.get("best_epoch")
        branches.append((_spec_from_record(record), model))

    logger.info("Loaded ensemble checkpoint: dir=%s branches=%d", directory, len(branches))
    return EnsembleModel(
        branches=branches,
        config=manifest.config,
        variant=manifest.variant,
        num_classes=manifest.num_classes,
        num_nodes=manifest.num_nodes,
        num_features=manifest.num_features,
        num_relations=manifest.num_relations,
    )


def check_compatible(ensemble: EnsembleModel, g: MultiRelationGraph):
    """
    Raises:
        CheckpointError: naming the checkpoint and dataset value of the first mismatch
    """
    pairs = [
        ("num_nodes", ensemble.num_nodes, g.n),
        ("num_features", ensemble.num_features, g.m),
        ("num_relations", ensemble.num_relations, g.k),
        ("num_classes", ensemble.num_classes, g.num_classes),
    ]
    for name, saved, actual in pairs:
        if saved != actual:
            raise CheckpointError(f"dimension mismatch: checkpoint {name}={saved}, dataset {name}={actual}")
