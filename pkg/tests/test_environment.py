"""Terrain generation, state transitions, masking, comms, and rewards."""

import math

import numpy as np
import pytest

from terrascout.environment import (
    Action,
    EnvConfig,
    NoiseStreams,
    TerrainEnv,
    exchange_messages,
    generate_terrain,
    initial_columns,
    initial_state,
    reward,
    valid_actions,
)
from terrascout.errors import ConfigurationError, RejectedStepError
from terrascout.gridmap import CellRect, Measurement, SensorModel, map_entropy


def small_cfg(**kw):
    defaults = dict(
        terrain_size=10.0,
        map_resolution=0.5,
        planning_resolution=5.0,
        num_agents=1,
        budget=3,
        comm_radius=25.0,
        sensor=SensorModel(((5.0, 0.9), (10.0, 0.8), (15.0, 0.7))),
    )
    defaults.update(kw)
    return EnvConfig(**defaults)


def default_cfg(**kw):
    defaults = dict(num_agents=4, budget=15)
    defaults.update(kw)
    return EnvConfig(**defaults)


# ---------------------------------------------------------------------------
# terrain generation
# ---------------------------------------------------------------------------


def test_terrain_fraction_always_in_band():
    cfg = EnvConfig(terrain_size=10.0, map_resolution=0.2, num_agents=1)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        gt = generate_terrain(rng, cfg)
        assert 0.3 <= gt.interesting_fraction() <= 0.6


def test_terrain_deterministic_per_seed():
    cfg = EnvConfig()
    a = generate_terrain(np.random.default_rng(11), cfg)
    b = generate_terrain(np.random.default_rng(11), cfg)
    np.testing.assert_array_equal(a.cells, b.cells)


def test_terrain_forced_axis_aligned_half_split():
    cfg = EnvConfig()
    gt = generate_terrain(np.random.default_rng(0), cfg, angle=math.pi / 2, fraction=0.5)
    # exactly the northern half of the rows
    assert gt.interesting_fraction() == pytest.approx(0.5, abs=1e-12)
    assert (gt.cells[250:] == 1).all() and (gt.cells[:250] == 0).all()


def test_terrain_region_connected_along_split():
    cfg = EnvConfig(terrain_size=10.0, map_resolution=0.2, num_agents=1)
    gt = generate_terrain(np.random.default_rng(5), cfg)
    # half-plane labels: every row's interesting cells are contiguous
    for row in gt.cells:
        idx = np.flatnonzero(row)
        if idx.size:
            assert idx[-1] - idx[0] + 1 == idx.size


# ---------------------------------------------------------------------------
# initial state
# ---------------------------------------------------------------------------


def test_initial_columns_even_spacing():
    assert initial_columns(10, 4) == [1, 3, 6, 8]
    assert initial_columns(10, 1) == [5]
    assert initial_columns(10, 8) == [0, 1, 3, 4, 5, 6, 8, 9]


def test_initial_state_places_agents_south_at_min_altitude():
    cfg = default_cfg()
    gt = generate_terrain(np.random.default_rng(0), cfg)
    state, locals_ = initial_state(cfg, gt, NoiseStreams(0))
    np.testing.assert_array_equal(state.positions[:, 1], 0)
    np.testing.assert_array_equal(state.positions[:, 2], 0)
    assert list(state.positions[:, 0]) == [1, 3, 6, 8]
    assert state.remaining_budget == 15
    for loc in locals_:
        assert loc.local_map.width == cfg.map_cells


def test_initial_measurement_already_fused():
    cfg = default_cfg()
    gt = generate_terrain(np.random.default_rng(0), cfg)
    state, locals_ = initial_state(cfg, gt, NoiseStreams(0))
    uniform_total = 0.5 * cfg.map_cells**2
    assert map_entropy(state.global_map, cfg.weights) < uniform_total


def test_initial_state_too_many_agents():
    with pytest.raises(ConfigurationError):
        initial_state(
            small_cfg(num_agents=3),
            generate_terrain(np.random.default_rng(0), small_cfg()),
            NoiseStreams(0),
        )


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def test_mask_blocks_boundary_moves():
    cfg = default_cfg(num_agents=1)
    gt = generate_terrain(np.random.default_rng(0), cfg)
    state, _ = initial_state(cfg, gt, NoiseStreams(0))
    state.positions[0] = [0, 0, 0]  # west edge, south edge, min altitude
    mask = valid_actions(state, 0, cfg)
    assert not mask[Action.WEST]
    assert not mask[Action.SOUTH]
    assert not mask[Action.DOWN]
    assert mask[Action.NORTH] and mask[Action.EAST] and mask[Action.UP]


def test_mask_blocks_occupied_2d_cell_at_any_altitude():
    cfg = default_cfg(num_agents=2)
    gt = generate_terrain(np.random.default_rng(0), cfg)
    state, _ = initial_state(cfg, gt, NoiseStreams(0))
    state.positions[0] = [4, 4, 0]
    state.positions[1] = [4, 5, 2]  # one step north, different altitude
    mask = valid_actions(state, 0, cfg)
    assert not mask[Action.NORTH]
    assert mask[Action.EAST] and mask[Action.SOUTH] and mask[Action.WEST]


def test_mask_all_valid_in_open_interior():
    cfg = default_cfg(num_agents=1)
    gt = generate_terrain(np.random.default_rng(0), cfg)
    state, _ = initial_state(cfg, gt, NoiseStreams(0))
    state.positions[0] = [4, 4, 1]
    assert valid_actions(state, 0, cfg).all()


# ---------------------------------------------------------------------------
# communication
# ---------------------------------------------------------------------------


def fake_measurement(x, y, z):
    return Measurement(
        np.array([x, y, z]),
        CellRect(0, 0, 0, 0),
        np.zeros((1, 1), dtype=np.uint8),
        0.9,
        0,
        0,
    )


def test_exchange_within_radius_is_mutual():
    pos = np.array([[0.0, 0.0, 5.0], [20.0, 0.0, 5.0]])
    ms = [fake_measurement(*p) for p in pos]
    inboxes = exchange_messages(pos, ms, 25.0)
    assert len(inboxes[0]) == 1 and inboxes[0][0].sender_id == 1
    assert len(inboxes[1]) == 1 and inboxes[1][0].sender_id == 0


def test_exchange_zero_radius_silences_everyone():
    pos = np.array([[0.0, 0.0, 5.0], [20.0, 0.0, 5.0]])
    ms = [fake_measurement(*p) for p in pos]
    assert exchange_messages(pos, ms, 0.0) == [[], []]


def test_exchange_collinear_chain():
    pos = np.array([[0.0, 0.0, 5.0], [20.0, 0.0, 5.0], [40.0, 0.0, 5.0]])
    ms = [fake_measurement(*p) for p in pos]
    inboxes = exchange_messages(pos, ms, 25.0)
    assert [m.sender_id for m in inboxes[0]] == [1]
    assert sorted(m.sender_id for m in inboxes[1]) == [0, 2]
    assert [m.sender_id for m in inboxes[2]] == [1]


def test_exchange_infinite_radius_is_all_to_all():
    pos = np.array([[0.0, 0.0, 5.0], [20.0, 0.0, 5.0], [40.0, 0.0, 5.0]])
    ms = [fake_measurement(*p) for p in pos]
    inboxes = exchange_messages(pos, ms, math.inf)
    assert all(len(box) == 2 for box in inboxes)


def test_exchange_uses_3d_distance():
    pos = np.array([[0.0, 0.0, 5.0], [24.0, 0.0, 15.0]])
    ms = [fake_measurement(*p) for p in pos]
    # 2D distance 24 <= 25 but 3D distance sqrt(24^2 + 10^2) = 26 > 25
    assert exchange_messages(pos, ms, 25.0) == [[], []]


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------


def test_reward_values():
    assert reward(100.0, 90.0, 1.0, 0.0) == pytest.approx(0.1)
    assert reward(50.0, 50.0, 1.0, 0.37) == pytest.approx(0.37)
    assert reward(50.0, 25.0, 2.0, 0.5) == pytest.approx(1.5)
    assert reward(0.0, 0.0, 1.0, 0.25) == pytest.approx(0.25)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def test_full_comms_keeps_local_equal_to_global():
    cfg = default_cfg(num_agents=3, budget=4, comm_radius=math.inf)
    gt = generate_terrain(np.random.default_rng(1), cfg)
    env = TerrainEnv(cfg, gt, NoiseStreams(1))
    env.reset()
    rng = np.random.default_rng(0)
    done = False
    while not done:
        joint = [int(rng.choice(np.flatnonzero(m))) for m in env.masks()]
        _, done = env.step(joint)
        for loc in env.locals:
            np.testing.assert_allclose(
                loc.local_map.probs(), env.state.global_map.probs(), atol=1e-12
            )


def test_first_step_reward_positive_with_accurate_sensor():
    cfg = default_cfg(num_agents=1, budget=2)
    gt = generate_terrain(np.random.default_rng(2), cfg)
    env = TerrainEnv(cfg, gt, NoiseStreams(2))
    env.reset()
    r, done = env.step([int(Action.NORTH)])
    assert r > 0.0
    assert not done


def test_budget_exhaustion_sets_done():
    cfg = default_cfg(num_agents=1, budget=1)
    gt = generate_terrain(np.random.default_rng(3), cfg)
    env = TerrainEnv(cfg, gt, NoiseStreams(3))
    env.reset()
    _, done = env.step([int(Action.NORTH)])
    assert done
    with pytest.raises(RejectedStepError):
        env.step([int(Action.NORTH)])


def test_masked_action_rejected_naming_agent():
    cfg = default_cfg(num_agents=2, budget=3)
    gt = generate_terrain(np.random.default_rng(4), cfg)
    env = TerrainEnv(cfg, gt, NoiseStreams(4))
    env.reset()
    with pytest.raises(RejectedStepError, match="agent 0"):
        env.step([int(Action.SOUTH), int(Action.NORTH)])


def test_simultaneous_collision_lower_id_wins():
    cfg = default_cfg(num_agents=2, budget=3)
    gt = generate_terrain(np.random.default_rng(5), cfg)
    env = TerrainEnv(cfg, gt, NoiseStreams(5))
    env.reset()
    env.state.positions[0] = [4, 4, 0]
    env.state.positions[1] = [6, 4, 0]
    env.locals[0].position = env.state.positions[0].copy()
    env.locals[1].position = env.state.positions[1].copy()
    # both aim at (5, 4)
    env.step([int(Action.EAST), int(Action.WEST)])
    assert list(env.state.positions[0][:2]) == [5, 4]
    assert list(env.state.positions[1][:2]) == [6, 4]


def test_positions_stay_distinct_and_on_lattice():
    cfg = default_cfg(num_agents=4, budget=10)
    gt = generate_terrain(np.random.default_rng(6), cfg)
    env = TerrainEnv(cfg, gt, NoiseStreams(6))
    env.reset()
    rng = np.random.default_rng(1)
    done = False
    while not done:
        joint = [int(rng.choice(np.flatnonzero(m))) for m in env.masks()]
        _, done = env.step(joint)
        pos = env.state.positions
        cells = {(int(p[0]), int(p[1])) for p in pos}
        assert len(cells) == len(pos)
        assert (pos[:, 0] >= 0).all() and (pos[:, 0] < cfg.lattice_cols).all()
        assert (pos[:, 1] >= 0).all() and (pos[:, 1] < cfg.lattice_rows).all()
        assert (pos[:, 2] >= 0).all() and (pos[:, 2] < cfg.altitude_levels).all()


def test_local_maps_fuse_subset_of_global():
    # with finite comms every local belief is at most as sharp as global
    cfg = default_cfg(num_agents=4, budget=6, comm_radius=25.0)
    gt = generate_terrain(np.random.default_rng(7), cfg)
    env = TerrainEnv(cfg, gt, NoiseStreams(7))
    env.reset()
    rng = np.random.default_rng(2)
    done = False
    while not done:
        joint = [int(rng.choice(np.flatnonzero(m))) for m in env.masks()]
        _, done = env.step(joint)
    for loc in env.locals:
        # every fused local observation is part of the global fusion
        assert np.abs(loc.local_map.log_odds).sum() <= np.abs(
            env.state.global_map.log_odds
        ).sum() + 1e-6


def test_rewards_telescope_against_entropy_log():
    cfg = default_cfg(num_agents=2, budget=8)
    gt = generate_terrain(np.random.default_rng(8), cfg)
    env = TerrainEnv(cfg, gt, NoiseStreams(8))
    env.reset()
    rng = np.random.default_rng(3)
    entropies = [env.global_entropy()]
    rewards = []
    done = False
    while not done:
        joint = [int(rng.choice(np.flatnonzero(m))) for m in env.masks()]
        r, done = env.step(joint)
        rewards.append(r)
        entropies.append(env.global_entropy())
    recomputed = [
        (h0 - h1) / h0 for h0, h1 in zip(entropies, entropies[1:])
    ]
    np.testing.assert_allclose(rewards, recomputed, atol=1e-12)
    # absolute reductions telescope exactly
    total = sum(h0 - h1 for h0, h1 in zip(entropies, entropies[1:]))
    assert total == pytest.approx(entropies[0] - entropies[-1], abs=1e-9)


def test_stale_positions_update_only_via_messages():
    cfg = default_cfg(num_agents=2, budget=4, comm_radius=0.0)
    gt = generate_terrain(np.random.default_rng(9), cfg)
    env = TerrainEnv(cfg, gt, NoiseStreams(9))
    env.reset()
    start = env.state.positions.copy()
    done = False
    rng = np.random.default_rng(4)
    while not done:
        joint = [int(rng.choice(np.flatnonzero(m))) for m in env.masks()]
        _, done = env.step(joint)
    # no comms: each agent still believes the other is at its start pose
    np.testing.assert_array_equal(env.locals[0].known_positions[1], start[1])
    np.testing.assert_array_equal(env.locals[1].known_positions[0], start[0])
    # own entry tracks the true pose
    np.testing.assert_array_equal(env.locals[0].known_positions[0], env.state.positions[0])
