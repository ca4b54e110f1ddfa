"""Seeded synthetic multi-view traffic: a road grid, vehicles, camera views.

Coordinates are ``(x, y)`` global cells with ``y`` growing downward, so a
frame's row index is ``y - origin_y`` and its column index ``x - origin_x``.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ssta.errors import ConfigError, WorldConsistencyError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

HEADINGS: Dict[str, Cell] = {"N": (0, -1), "E": (1, 0), "S": (0, 1), "W": (-1, 0)}
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}

BACKGROUND = 0.0
ROAD = 0.3
VEHICLE = 1.0

PRESETS = ("ladder", "crossing")


def _move(cell: Cell, heading: str) -> Cell:
    dx, dy = HEADINGS[heading]
    return (cell[0] + dx, cell[1] + dy)


@dataclass(frozen=True)
class SpawnPoint:
    cell: Cell
    heading: str


@dataclass(frozen=True)
class RoadMap:
    width: int
    height: int
    roads: FrozenSet[Cell]
    intersections: FrozenSet[Cell]
    spawns: Tuple[SpawnPoint, ...]

    def __post_init__(self):
        stray = [c for c in self.intersections if c not in self.roads]
        if stray:
            raise WorldConsistencyError(f"intersection cells off the road: {sorted(stray)[:5]}")
        for sp in self.spawns:
            if sp.cell not in self.roads:
                raise WorldConsistencyError(f"spawn point {sp.cell} is not a road cell")

    @classmethod
    def from_roads(cls, width: int, height: int, roads: Iterable[Cell],
                   spawns: Sequence[SpawnPoint]) -> "RoadMap":
        """Build a map; every road cell that is not a straight pass-through is an intersection."""
        roads = frozenset(roads)
        bare = cls(width, height, roads, frozenset(), tuple(spawns))
        straight = ({"N", "S"}, {"E", "W"})
        junctions = frozenset(c for c in roads if set(bare.open_headings(c)) not in straight)
        return cls(width, height, roads, junctions, tuple(spawns))

    def in_grid(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def open_headings(self, cell: Cell) -> List[str]:
        """Headings that lead to a road cell or off the grid."""
        out = []
        for h in HEADINGS:
            nxt = _move(cell, h)
            if nxt in self.roads or not self.in_grid(nxt):
                out.append(h)
        return out

    def legal_continuations(self, cell: Cell, heading: str) -> List[str]:
        """Open headings except turning back, unless turning back is the only way out."""
        options = self.open_headings(cell)
        forward = [h for h in options if h != OPPOSITE[heading]]
        return forward or options

    def raster(self) -> np.ndarray:
        grid = np.full((self.height, self.width), BACKGROUND)
        for x, y in self.roads:
            grid[y, x] = ROAD
        return grid


@dataclass(frozen=True)
class Vehicle:
    id: int
    position: Cell
    heading: str
    speed: int = 1
    trip: int = 0  # bumped on every respawn


@dataclass(frozen=True)
class ViewSpec:
    id: int
    origin: Cell
    height: int
    width: int

    @property
    def center(self) -> Cell:
        return (self.origin[0] + self.width // 2, self.origin[1] + self.height // 2)

    def contains(self, cell: Cell) -> bool:
        x0, y0 = self.origin
        return x0 <= cell[0] < x0 + self.width and y0 <= cell[1] < y0 + self.height

    def validate(self, road_map: RoadMap) -> None:
        x0, y0 = self.origin
        if x0 < 0 or y0 < 0 or x0 + self.width > road_map.width or y0 + self.height > road_map.height:
            raise ConfigError(f"view {self.id} window {self.origin}+{self.width}x{self.height} leaves the grid")


@dataclass(frozen=True)
class Frame:
    view_id: int
    timestep: int
    pixels: np.ndarray


@dataclass
class WorldState:
    road_map: RoadMap
    vehicles: List[Vehicle] = field(default_factory=list)
    timestep: int = 0


@dataclass(frozen=True)
class WorldConfig:
    preset: str = "ladder"
    grid_size: int = 64
    view_size: int = 16
    n_views: int = 8
    n_vehicles: int = 10
    max_speed: int = 2
    seed: int = 0
    transit_bound: int = 2

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: unknown world preset {self.preset!r}; expected one of {PRESETS}")
        if self.preset == "ladder":
            if self.grid_size != 4 * self.view_size:
                raise ConfigError(f"grid_size: the ladder map needs grid_size == 4 * view_size, got "
                                  f"{self.grid_size} and {self.view_size}")
            if not 1 <= self.n_views <= 8:
                raise ConfigError(f"n_views: the ladder map has 1..8 views, got {self.n_views}")
        if self.preset == "crossing":
            if self.grid_size < 2 * self.view_size:
                raise ConfigError("grid_size: the crossing map needs grid_size >= 2 * view_size")
            if not 1 <= self.n_views <= 2:
                raise ConfigError(f"n_views: the crossing map has 1..2 views, got {self.n_views}")
        if self.view_size < 4:
            raise ConfigError(f"view_size: must be at least 4, got {self.view_size}")
        if self.max_speed < 1:
            raise ConfigError(f"max_speed: must be >= 1, got {self.max_speed}")
        if self.n_vehicles < 0:
            raise ConfigError(f"n_vehicles: must be >= 0, got {self.n_vehicles}")

    def to_dict(self) -> Dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# -- maps --------------------------------------------------------------------

def ladder_map(view_size: int) -> RoadMap:
    """Two full-width avenues joined by four connectors, all inside the middle band of tiles."""
    v = view_size
    size = 4 * v
    top, bottom = v + v // 2, 2 * v + v // 2 - 1
    roads = {(x, top) for x in range(size)} | {(x, bottom) for x in range(size)}
    for col in range(4):
        x = col * v + v // 2
        roads |= {(x, y) for y in range(top, bottom + 1)}
    spawns = [SpawnPoint((0, top), "E"), SpawnPoint((size - 1, top), "W"),
              SpawnPoint((0, bottom), "E"), SpawnPoint((size - 1, bottom), "W")]
    return RoadMap.from_roads(size, size, roads, spawns)


def ladder_views(view_size: int, n_views: int) -> List[ViewSpec]:
    # (col, row) tiles of the middle band, ordered so that 2 views are a pair
    # and 4 views a square.
    tiles = [(0, 1), (1, 1), (0, 2), (1, 2), (2, 1), (3, 1), (2, 2), (3, 2)]
    return [ViewSpec(i + 1, (c * view_size, r * view_size), view_size, view_size)
            for i, (c, r) in enumerate(tiles[:n_views])]


def crossing_map(grid_size: int) -> RoadMap:
    """A single four-way crossing in the middle of the grid."""
    mid = grid_size // 2
    roads = {(x, mid) for x in range(grid_size)} | {(mid, y) for y in range(grid_size)}
    last = grid_size - 1
    spawns = [SpawnPoint((0, mid), "E"), SpawnPoint((last, mid), "W"),
              SpawnPoint((mid, 0), "S"), SpawnPoint((mid, last), "N")]
    return RoadMap.from_roads(grid_size, grid_size, roads, spawns)


def crossing_views(grid_size: int, view_size: int, n_views: int) -> List[ViewSpec]:
    mid = grid_size // 2
    y0 = mid - view_size // 2
    views = [ViewSpec(1, (mid - view_size, y0), view_size, view_size),
             ViewSpec(2, (mid, y0), view_size, view_size)]
    return views[:n_views]


def initial_state(road_map: RoadMap, n_vehicles: int, max_speed: int,
                  rng: np.random.Generator) -> WorldState:
    cells = sorted(road_map.roads)
    vehicles = []
    for vid in range(n_vehicles):
        cell = cells[int(rng.integers(len(cells)))]
        options = road_map.open_headings(cell)
        heading = options[int(rng.integers(len(options)))]
        speed = int(rng.integers(1, max_speed + 1))
        vehicles.append(Vehicle(vid, cell, heading, speed))
    return WorldState(road_map, vehicles, 0)


def make_world(config: WorldConfig, rng: np.random.Generator) -> Tuple[WorldState, List[ViewSpec]]:
    if config.preset == "ladder":
        road_map = ladder_map(config.view_size)
        views = ladder_views(config.view_size, config.n_views)
    else:
        road_map = crossing_map(config.grid_size)
        views = crossing_views(config.grid_size, config.view_size, config.n_views)
    for view in views:
        view.validate(road_map)
    return initial_state(road_map, config.n_vehicles, config.max_speed, rng), views


# -- dynamics ------------------------------------------------------------------

def _advance(vehicle: Vehicle, road_map: RoadMap, rng: np.random.Generator) -> Vehicle:
    pos, heading, trip = vehicle.position, vehicle.heading, vehicle.trip
    for _ in range(vehicle.speed):
        if pos in road_map.intersections:
            options = road_map.legal_continuations(pos, heading)
            heading = options[int(rng.integers(len(options)))] if len(options) > 1 else options[0]
        nxt = _move(pos, heading)
        if not road_map.in_grid(nxt):
            spawn = road_map.spawns[int(rng.integers(len(road_map.spawns)))]
            pos, heading, trip = spawn.cell, spawn.heading, trip + 1
            break
        pos = nxt
        if pos not in road_map.roads:
            raise WorldConsistencyError(
                f"vehicle {vehicle.id} left the road at {pos} heading {heading}"
            )
    return replace(vehicle, position=pos, heading=heading, trip=trip)


def step_world(state: WorldState, rng: np.random.Generator) -> WorldState:
    """Advance every vehicle `speed` cells; vehicles that leave the grid respawn."""
    for v in state.vehicles:
        if v.position not in state.road_map.roads:
            raise WorldConsistencyError(f"vehicle {v.id} is off the road at {v.position}")
    vehicles = [_advance(v, state.road_map, rng) for v in state.vehicles]
    return WorldState(state.road_map, vehicles, state.timestep + 1)


def render(state: WorldState, view: ViewSpec, road_raster: Optional[np.ndarray] = None) -> Frame:
    """Rasterize the view's window: background 0.0, road 0.3, vehicle 1.0."""
    raster = state.road_map.raster() if road_raster is None else road_raster
    x0, y0 = view.origin
    pixels = raster[y0:y0 + view.height, x0:x0 + view.width].copy()
    for v in state.vehicles:
        if view.contains(v.position):
            pixels[v.position[1] - y0, v.position[0] - x0] = VEHICLE
    return Frame(view.id, state.timestep, pixels)


def simulate(config: WorldConfig, steps: int) -> Tuple[Dict[int, np.ndarray], List[ViewSpec], RoadMap]:
    """Run the world for `steps` frames; returns per-view stacks [steps, H, W]."""
    rng = np.random.default_rng(config.seed)
    state, views = make_world(config, rng)
    raster = state.road_map.raster()
    stacks = {v.id: np.zeros((steps, v.height, v.width)) for v in views}
    for t in range(steps):
        for view in views:
            stacks[view.id][t] = render(state, view, raster).pixels
        state = step_world(state, rng)
    logger.debug("simulated %d steps of %d views (seed %d)", steps, len(views), config.seed)
    return stacks, views, state.road_map


# -- topology ------------------------------------------------------------------

def manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def build_topology(views: Sequence[ViewSpec], k: int) -> Dict[int, Tuple[int, ...]]:
    """K^i: the k views nearest to view i by Manhattan distance between centers.

    Ties go to the lower id. A view is never its own neighbor. The result is
    directional; nothing guarantees j in K^i when i in K^j.
    """
    ids = [v.id for v in views]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"views: duplicate view ids in {ids}")
    if not 0 <= k < len(views):
        raise ConfigError(f"k: need 0 <= k < N = {len(views)}, got {k}")
    topology = {}
    for v in views:
        others = sorted((manhattan(v.center, w.center), w.id) for w in views if w.id != v.id)
        topology[v.id] = tuple(sorted(wid for _, wid in others[:k]))
    return topology


def receivers_of(topology: Dict[int, Sequence[int]]) -> Dict[int, Tuple[int, ...]]:
    """Reverse map: sender i -> the nodes k with i in K^k."""
    out: Dict[int, List[int]] = {i: [] for i in topology}
    for k, senders in topology.items():
        for i in senders:
            out[i].append(k)
    return {i: tuple(sorted(ks)) for i, ks in out.items()}


def transit_statistics(config: WorldConfig, steps: int, k: int = 2) -> Dict[str, float]:
    """Count view exits and how many reach a topology neighbor of the exited view within the bound.

    View i neighbors view j when either lists the other among its k nearest
    (see :func:`build_topology`). `followed_any` and `fraction_any` count an
    entry into any other view instead. A vehicle that leaves the grid
    respawns; that is not an exit.
    """
    rng = np.random.default_rng(config.seed)
    state, views = make_world(config, rng)
    topology = build_topology(views, k)
    receivers = receivers_of(topology)
    neighbors = {i: set(topology[i]) | set(receivers[i]) for i in topology}
    history: List[Dict[int, Tuple[int, FrozenSet[int]]]] = []
    for _ in range(steps + config.transit_bound + 1):
        history.append({v.id: (v.trip, frozenset(w.id for w in views if w.contains(v.position)))
                        for v in state.vehicles})
        state = step_world(state, rng)

    exits = followed = followed_any = 0
    for s in range(steps):
        for vid, (trip, inside) in history[s].items():
            trip_next, inside_next = history[s + 1][vid]
            if trip_next != trip:
                continue
            for j in inside - inside_next:
                exits += 1
                reached_any = reached_neighbor = False
                for d in range(1, config.transit_bound + 1):
                    trip_d, inside_d = history[s + d][vid]
                    if trip_d != trip:
                        break
                    reached_any = reached_any or bool(inside_d - {j})
                    reached_neighbor = reached_neighbor or bool(inside_d & neighbors[j])
                followed += reached_neighbor
                followed_any += reached_any
    return {"exits": exits, "followed": followed, "fraction": followed / exits if exits else 1.0,
            "followed_any": followed_any, "fraction_any": followed_any / exits if exits else 1.0}
