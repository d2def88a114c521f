"""
Model checkpoints in safetensors format.

Tensors are stored under their state-dict names (``model.<name>``) plus
``optimizer.<param index>.<slot>`` entries; everything else (format
version, stage tag, configuration, optimizer hyperparameters, RNG state) is
JSON in the safetensors metadata.
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from constants.config import CHECKPOINT_FORMAT_VERSION
from utils.errors import LoadError, PersistenceError

logger = logging.getLogger(__name__)

FINETUNED_STAGE = "finetuned"
METADATA_KEY = "pmam"


def iteration_stage(iteration: int) -> str:
    return f"iter{iteration}"


def is_valid_stage(stage: str) -> bool:
    return stage == FINETUNED_STAGE or bool(re.fullmatch(r"iter\d+", stage))


@dataclass
class Checkpoint:
    stage: str
    model_state: Dict[str, torch.Tensor]
    config: Dict[str, Any]
    optimizer_state: Optional[Dict[str, Any]] = None
    rng_state: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_FORMAT_VERSION


def _optimizer_tensors(state: Dict[str, Any]) -> Dict[str, torch.Tensor]:
    tensors = {}
    for index, slots in state["state"].items():
        for slot, value in slots.items():
            tensors[f"optimizer.{index}.{slot}"] = torch.as_tensor(value).clone().contiguous()
    return tensors


def _optimizer_state(tensors: Dict[str, torch.Tensor], groups: list) -> Dict[str, Any]:
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for key, value in tensors.items():
        _, index, slot = key.split(".", 2)
        state.setdefault(int(index), {})[slot] = value
    return {"state": state, "param_groups": groups}


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    """
    Write a checkpoint.

    Args:
        path (str): Destination ``.safetensors`` file
        checkpoint (Checkpoint): Model/optimizer state and metadata
    """
    if not is_valid_stage(checkpoint.stage):
        raise PersistenceError(f"Unknown checkpoint stage '{checkpoint.stage}'")
    tensors = {f"model.{k}": v.detach().clone().contiguous() for k, v in checkpoint.model_state.items()}
    groups = None
    if checkpoint.optimizer_state is not None:
        tensors.update(_optimizer_tensors(checkpoint.optimizer_state))
        groups = checkpoint.optimizer_state["param_groups"]
    header = {
        "version": checkpoint.version,
        "stage": checkpoint.stage,
        "config": checkpoint.config,
        "optimizer_groups": groups,
        "rng_state": checkpoint.rng_state,
        "extra": checkpoint.extra,
    }
    # One entry: safetensors does not keep the order of several metadata keys
    metadata = {METADATA_KEY: json.dumps(header, sort_keys=True)}
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        save_file(tensors, path, metadata=metadata)
    except OSError as e:
        raise PersistenceError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint '{checkpoint.stage}' written to {path} ({len(tensors)} tensors)")


def _read_metadata(path: str) -> Dict[str, Any]:
    with safe_open(path, framework="pt") as f:
        raw = (f.metadata() or {}).get(METADATA_KEY)
    if raw is None:
        raise LoadError(f"{path}: no '{METADATA_KEY}' metadata entry")
    try:
        header = json.loads(raw)
    except json.JSONDecodeError as e:
        raise LoadError(f"{path}: corrupt checkpoint metadata: {e}") from e
    if not isinstance(header, dict):
        raise LoadError(f"{path}: corrupt checkpoint metadata")
    return header


def load_checkpoint(path: str, expected_stage: Optional[str] = None) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        PersistenceError: the file cannot be read
        LoadError: wrong format version, unexpected stage or corrupt file
    """
    if not os.path.exists(path):
        raise PersistenceError(f"Checkpoint not found: {path}")
    try:
        tensors = load_file(path)
        metadata = _read_metadata(path)
    except (SafetensorError, ValueError) as e:
        raise LoadError(f"{path} is not a readable checkpoint: {e}") from e
    except OSError as e:
        raise PersistenceError(f"Cannot read checkpoint {path}: {e}") from e

    version = metadata.get("version", -1)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise LoadError(f"{path}: checkpoint format version {version}, expected {CHECKPOINT_FORMAT_VERSION}")
    stage = metadata.get("stage", "")
    if expected_stage is not None and stage != expected_stage:
        raise LoadError(f"{path}: expected a '{expected_stage}' checkpoint, found '{stage}'")

    model_state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    optimizer_tensors = {k: v for k, v in tensors.items() if k.startswith("optimizer.")}
    groups = metadata.get("optimizer_groups")
    optimizer_state = _optimizer_state(optimizer_tensors, groups) if groups is not None else None
    return Checkpoint(
        stage=stage,
        model_state=model_state,
        config=metadata.get("config", {}),
        optimizer_state=optimizer_state,
        rng_state=metadata.get("rng_state", {}),
        extra=metadata.get("extra", {}),
        version=version,
    )


def capture_rng_state(seed: int, **counters: int) -> Dict[str, Any]:
    """JSON-friendly record of the seed and stream counters needed to resume."""
    return {"seed": int(seed), "numpy_version": np.__version__, **{k: int(v) for k, v in counters.items()}}


def submodule_state(state: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    """Entries of ``state`` under ``prefix.``, with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in state.items() if k.startswith(head)}
