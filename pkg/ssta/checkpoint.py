"""Per-node checkpoints.

Layout of a checkpoint directory::

    network.json            node ids, run metadata and the save number, written last
    node_<i>/manifest.json  node id, K^i, hyperparameters, optimizer state version, save number
    node_<i>/params.bin     named parameter slices (tensor records)
    node_<i>/optim.bin      optimizer moments, when any step has been taken

Every save bumps the save number. A node whose manifest disagrees with
network.json belongs to a save that never finished, and loading refuses it.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from ssta.errors import CheckpointError, ConfigError
from ssta.node_model import ModelConfig, param_shapes
from ssta.optimizer import Adam
from ssta.protocol import NodeAgent
from ssta.tensor_core import ParameterSet, load_tensors, save_tensors

logger = logging.getLogger(__name__)


@dataclass
class NodeCheckpoint:
    node_id: int
    neighbors: Tuple[int, ...]
    config: ModelConfig
    params: ParameterSet
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_updates: int = 0
    optimizer_settings: Dict = field(default_factory=dict)
    save_number: int = 0

    def restore_optimizer(self, optimizer: Adam) -> Adam:
        optimizer.load_state(self.optimizer_state, self.optimizer_updates)
        return optimizer


def _write_json(path: str, payload: Dict) -> None:
    temp_file = path + ".tmp"
    with open(temp_file, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    os.replace(temp_file, path)


def _read_json(path: str) -> Dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint file not found: {path}") from None
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e


def node_dir(ckpt_dir: str, node_id: int) -> str:
    return os.path.join(ckpt_dir, f"node_{node_id}")


def save_node(ckpt_dir: str, node_id: int, neighbors: Sequence[int], config: ModelConfig,
              params: ParameterSet, optimizer: Optional[Adam] = None, save_number: int = 0) -> str:
    path = node_dir(ckpt_dir, node_id)
    os.makedirs(path, exist_ok=True)
    save_tensors(os.path.join(path, "params.bin"), params.as_dict())
    state = optimizer.state_arrays() if optimizer is not None else {}
    optim_file = os.path.join(path, "optim.bin")
    if state:
        save_tensors(optim_file, state)
    elif os.path.exists(optim_file):
        os.remove(optim_file)
    manifest = {
        "node_id": node_id,
        "neighbors": sorted(neighbors),
        "hyperparameters": config.to_dict(),
        "param_version": params.version,
        "save_number": save_number,
        "slices": {name: list(shape) for name, shape in params.shapes.items()},
        "optimizer": {
            "kind": "adam",
            "num_updates": optimizer.num_updates if optimizer else 0,
            "lr": optimizer.lr if optimizer else None,
            "beta1": optimizer.beta1 if optimizer else None,
            "beta2": optimizer.beta2 if optimizer else None,
            "eps": optimizer.eps if optimizer else None,
        },
    }
    _write_json(os.path.join(path, "manifest.json"), manifest)
    return path


def load_node(ckpt_dir: str, node_id: int) -> NodeCheckpoint:
    path = node_dir(ckpt_dir, node_id)
    manifest = _read_json(os.path.join(path, "manifest.json"))
    try:
        config = ModelConfig(**manifest["hyperparameters"])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"node {node_id}: bad hyperparameters in manifest: {e}") from e
    expected = param_shapes(config)
    arrays = load_tensors(os.path.join(path, "params.bin"))
    if set(arrays) != set(expected):
        raise CheckpointError(
            f"node {node_id}: checkpoint slices {sorted(arrays)} do not match the model {sorted(expected)}"
        )
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"node {node_id}: slice {name} is {list(arrays[name].shape)}, expected {list(shape)}")
    params = ParameterSet.from_arrays({name: arrays[name] for name in expected}, dtype=config.dtype,
                                      version=manifest.get("param_version", 0))
    optim_file = os.path.join(path, "optim.bin")
    state = load_tensors(optim_file) if os.path.exists(optim_file) else {}
    optimizer = manifest.get("optimizer", {})
    return NodeCheckpoint(node_id, tuple(manifest.get("neighbors", ())), config, params, state,
                          int(optimizer.get("num_updates", 0)), optimizer, int(manifest.get("save_number", 0)))


def save_network(ckpt_dir: str, agents: Mapping[int, NodeAgent], meta: Optional[Dict] = None) -> None:
    """Save every node, then the index that marks the checkpoint complete."""
    os.makedirs(ckpt_dir, exist_ok=True)
    index_file = os.path.join(ckpt_dir, "network.json")
    try:
        previous = int(_read_json(index_file).get("save_number", 0))
    except CheckpointError:
        previous = 0
    save_number = previous + 1
    for node_id, agent in sorted(agents.items()):
        save_node(ckpt_dir, node_id, agent.model.neighbors, agent.model.config, agent.params, agent.optimizer,
                  save_number=save_number)
    _write_json(index_file, {"nodes": sorted(agents), "meta": meta or {}, "save_number": save_number})
    logger.debug("saved %d nodes to %s", len(agents), ckpt_dir)


def load_network(ckpt_dir: str) -> Tuple[Dict[int, NodeCheckpoint], Dict]:
    index = _read_json(os.path.join(ckpt_dir, "network.json"))
    nodes = {int(i): load_node(ckpt_dir, int(i)) for i in index.get("nodes", [])}
    if not nodes:
        raise CheckpointError(f"checkpoint at {ckpt_dir} holds no nodes")
    expected = int(index.get("save_number", 0))
    torn = sorted(i for i, ckpt in nodes.items() if ckpt.save_number != expected)
    if torn:
        raise CheckpointError(
            f"checkpoint at {ckpt_dir} is incomplete: nodes {torn} were written by a save that did not finish"
        )
    return nodes, index.get("meta", {})


def topology_of(nodes: Mapping[int, NodeCheckpoint]) -> Dict[int, Tuple[int, ...]]:
    return {i: ckpt.neighbors for i, ckpt in sorted(nodes.items())}
