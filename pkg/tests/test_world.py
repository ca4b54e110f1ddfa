import numpy as np
import pytest

from ssta.errors import ConfigError, WorldConsistencyError
from ssta.world import (
    ROAD,
    VEHICLE,
    RoadMap,
    SpawnPoint,
    Vehicle,
    ViewSpec,
    WorldConfig,
    WorldState,
    build_topology,
    ladder_views,
    receivers_of,
    render,
    simulate,
    step_world,
    transit_statistics,
)


def straight_road():
    return RoadMap.from_roads(10, 10, {(x, 4) for x in range(10)}, [SpawnPoint((0, 4), "E")])


def test_vehicle_moves_along_straight_road(rng):
    state = WorldState(straight_road(), [Vehicle(0, (3, 4), "E", 1)])
    nxt = step_world(state, rng)
    assert nxt.vehicles[0].position == (4, 4)
    assert nxt.timestep == 1


def test_empty_world_only_advances_time(rng):
    state = WorldState(straight_road(), [], timestep=7)
    nxt = step_world(state, rng)
    assert nxt.vehicles == [] and nxt.timestep == 8


def test_vehicle_leaving_grid_respawns(rng):
    state = WorldState(straight_road(), [Vehicle(0, (9, 4), "E", 1)])
    v = step_world(state, rng).vehicles[0]
    assert v.position == (0, 4) and v.heading == "E" and v.trip == 1


def test_off_road_vehicle_is_rejected(rng):
    state = WorldState(straight_road(), [Vehicle(0, (3, 3), "E", 1)])
    with pytest.raises(WorldConsistencyError):
        step_world(state, rng)


def test_map_rejects_spawn_off_road():
    with pytest.raises(WorldConsistencyError):
        RoadMap.from_roads(5, 5, {(0, 0)}, [SpawnPoint((1, 1), "E")])


def test_intersections_are_road_cells():
    road_map = RoadMap.from_roads(9, 9, {(x, 4) for x in range(9)} | {(4, y) for y in range(9)},
                                  [SpawnPoint((0, 4), "E")])
    assert (4, 4) in road_map.intersections
    assert (2, 4) not in road_map.intersections
    assert road_map.intersections <= road_map.roads


def test_simulation_is_deterministic():
    config = WorldConfig(seed=42)
    first, _, _ = simulate(config, 100)
    second, _, _ = simulate(config, 100)
    for vid in first:
        assert np.array_equal(first[vid], second[vid])


def test_frames_use_the_palette():
    stacks, _, _ = simulate(WorldConfig(seed=1), 50)
    for frames in stacks.values():
        assert set(np.unique(frames)) <= {0.0, ROAD, VEHICLE}


def test_render_without_vehicles_is_road_mask():
    road_map = straight_road()
    view = ViewSpec(1, (0, 0), 8, 8)
    frame = render(WorldState(road_map), view)
    assert np.array_equal(frame.pixels, road_map.raster()[0:8, 0:8])


def test_render_single_vehicle_at_center():
    view = ViewSpec(1, (0, 0), 8, 8)
    assert view.center == (4, 4)
    frame = render(WorldState(straight_road(), [Vehicle(0, (4, 4), "E")]), view)
    assert np.count_nonzero(frame.pixels == VEHICLE) == 1
    assert frame.pixels[4, 4] == VEHICLE


def test_vehicle_in_overlap_shows_in_both_views():
    left, right = ViewSpec(1, (0, 0), 6, 6), ViewSpec(2, (3, 0), 6, 6)
    state = WorldState(straight_road(), [Vehicle(0, (4, 4), "E")])
    assert render(state, left).pixels[4, 4] == VEHICLE
    assert render(state, right).pixels[4, 1] == VEHICLE
    outside = ViewSpec(3, (0, 5), 4, 4)
    assert VEHICLE not in render(state, outside).pixels


def test_topology_square_corners():
    views = ladder_views(16, 4)
    assert build_topology(views, 2) == {1: (2, 3), 2: (1, 4), 3: (1, 4), 4: (2, 3)}


def test_topology_full_and_line():
    views = ladder_views(16, 4)
    assert build_topology(views, 3) == {1: (2, 3, 4), 2: (1, 3, 4), 3: (1, 2, 4), 4: (1, 2, 3)}

    line = [ViewSpec(1, (0, 0), 1, 1), ViewSpec(2, (10, 0), 1, 1), ViewSpec(3, (25, 0), 1, 1)]
    topology = build_topology(line, 1)
    assert topology == {1: (2,), 2: (1,), 3: (2,)}
    assert receivers_of(topology) == {1: (2,), 2: (1, 3), 3: ()}


def test_topology_ties_go_to_lower_id():
    views = [ViewSpec(3, (0, 0), 1, 1), ViewSpec(2, (5, 0), 1, 1), ViewSpec(1, (-5, 0), 1, 1)]
    assert build_topology(views, 1)[3] == (1,)


def test_topology_rejects_k_of_n():
    views = ladder_views(16, 4)
    with pytest.raises(ConfigError):
        build_topology(views, 4)
    assert build_topology(views, 0) == {1: (), 2: (), 3: (), 4: ()}


def test_world_config_validation():
    with pytest.raises(ConfigError):
        WorldConfig(preset="town02")
    with pytest.raises(ConfigError):
        WorldConfig(grid_size=60)
    with pytest.raises(ConfigError):
        WorldConfig(preset="crossing", n_views=3)


def test_exits_reach_a_neighbor_within_the_bound():
    config = WorldConfig(seed=5)
    stats = transit_statistics(config, 1000)
    assert stats["exits"] > 0
    assert stats["fraction"] >= 0.9
    assert stats["followed"] <= stats["followed_any"] <= stats["exits"]


def test_transit_only_counts_topology_neighbors():
    # k=0 leaves every view without neighbors
    config = WorldConfig(seed=5)
    isolated = transit_statistics(config, 300, k=0)
    assert isolated["exits"] > 0
    assert isolated["followed"] == 0 and isolated["fraction"] == 0.0
    assert isolated["followed_any"] > 0
    assert isolated["followed_any"] == transit_statistics(config, 300, k=2)["followed_any"]
