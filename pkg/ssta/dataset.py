"""Dataset directories of rendered multi-view frames.

Layout::

    config.json     world config, road map, views, seed
    manifest.json   chunk list
    view<i>_chunk<c>.bin   one tensor record [n, H, W] per view per chunk
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from ssta.errors import CheckpointError, ConfigError
from ssta.tensor_core import dtype_code, encode_tensor, load_tensors, resolve_dtype
from ssta.world import RoadMap, SpawnPoint, ViewSpec, WorldConfig, simulate

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    config: WorldConfig
    views: List[ViewSpec]
    frames: Dict[int, np.ndarray]  # view id -> [L, H, W]
    road_map: Optional[RoadMap] = None

    @classmethod
    def generate(cls, config: WorldConfig, steps: int, dtype: str = "f64") -> "Dataset":
        stacks, views, road_map = simulate(config, steps)
        np_dtype = resolve_dtype(dtype)
        return cls(config, views, {vid: arr.astype(np_dtype) for vid, arr in stacks.items()}, road_map)

    @property
    def length(self) -> int:
        return next(iter(self.frames.values())).shape[0] if self.frames else 0

    @property
    def view_ids(self) -> List[int]:
        return [v.id for v in self.views]

    def window(self, view_id: int, t: int, horizon: int) -> np.ndarray:
        """Frames x_t .. x_{t+horizon} of one view, [horizon + 1, H, W]."""
        if t < 0 or t + horizon >= self.length:
            raise ConfigError(f"window [{t}, {t + horizon}] is outside the {self.length}-step dataset")
        return self.frames[view_id][t:t + horizon + 1]

    def holdout_start(self, holdout_fraction: float) -> int:
        """First step of the held-out segment (the final `holdout_fraction` of the stream)."""
        if not 0.0 <= holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction: must be in [0, 1), got {holdout_fraction}")
        cut = self.length - int(round(self.length * holdout_fraction))
        return cut

    def subset_views(self, n_views: int) -> "Dataset":
        views = self.views[:n_views]
        return Dataset(self.config, views, {v.id: self.frames[v.id] for v in views}, self.road_map)

    def write(self, out_dir: str, chunk_length: int = 100) -> None:
        if chunk_length < 1:
            raise ConfigError(f"chunk_length: must be >= 1, got {chunk_length}")
        os.makedirs(out_dir, exist_ok=True)
        code = dtype_code(next(iter(self.frames.values())).dtype)
        chunks = []
        for c, start in enumerate(range(0, self.length, chunk_length)):
            n = min(chunk_length, self.length - start)
            files = {}
            for view in self.views:
                name = f"view{view.id}_chunk{c:04d}.bin"
                with open(os.path.join(out_dir, name), "wb") as f:
                    f.write(encode_tensor(self.frames[view.id][start:start + n], f"view{view.id}/chunk{c}"))
                files[str(view.id)] = name
            chunks.append({"index": c, "start": start, "length": n, "files": files})
        _write_json(os.path.join(out_dir, "config.json"), {
            "seed": self.config.seed,
            "world": self.config.to_dict(),
            "map": _map_to_dict(self.road_map) if self.road_map else None,
            "views": [{"id": v.id, "origin": list(v.origin), "height": v.height, "width": v.width}
                      for v in self.views],
        })
        _write_json(os.path.join(out_dir, "manifest.json"),
                    {"steps": self.length, "dtype": code, "chunks": chunks})
        logger.info("wrote %d steps x %d views to %s", self.length, len(self.views), out_dir)

    @classmethod
    def load(cls, data_dir: str) -> "Dataset":
        try:
            with open(os.path.join(data_dir, "config.json")) as f:
                cfg = json.load(f)
            with open(os.path.join(data_dir, "manifest.json")) as f:
                manifest = json.load(f)
        except (OSError, ValueError) as e:
            raise CheckpointError(f"cannot read dataset at {data_dir}: {e}") from e
        config = WorldConfig(**cfg["world"])
        views = [ViewSpec(v["id"], tuple(v["origin"]), v["height"], v["width"]) for v in cfg["views"]]
        parts: Dict[int, List[np.ndarray]] = {v.id: [] for v in views}
        for chunk in sorted(manifest["chunks"], key=lambda c: c["start"]):
            for view in views:
                arrays = load_tensors(os.path.join(data_dir, chunk["files"][str(view.id)]))
                parts[view.id].append(next(iter(arrays.values())))
        frames = {vid: np.concatenate(p, axis=0) for vid, p in parts.items()}
        if any(arr.shape[0] != manifest["steps"] for arr in frames.values()):
            raise CheckpointError(f"dataset at {data_dir} does not match its manifest")
        road_map = _map_from_dict(cfg["map"]) if cfg.get("map") else None
        return cls(config, views, frames, road_map)


def _write_json(path: str, payload: Dict) -> None:
    temp_file = path + ".tmp"
    with open(temp_file, "w") as f:
        json.dump(payload, f, indent=2)
    os.replace(temp_file, path)


def _map_to_dict(road_map: RoadMap) -> Dict:
    return {
        "width": road_map.width,
        "height": road_map.height,
        "roads": sorted([list(c) for c in road_map.roads]),
        "intersections": sorted([list(c) for c in road_map.intersections]),
        "spawns": [{"cell": list(s.cell), "heading": s.heading} for s in road_map.spawns],
    }


def _map_from_dict(payload: Dict) -> RoadMap:
    return RoadMap(
        payload["width"], payload["height"],
        frozenset(tuple(c) for c in payload["roads"]),
        frozenset(tuple(c) for c in payload["intersections"]),
        tuple(SpawnPoint(tuple(s["cell"]), s["heading"]) for s in payload["spawns"]),
    )
